//! Base training: BPR with Adam, early stopping on validation Recall@20.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{ranking_metrics, EvalPairs, MaskPolicy};
use crate::bpr::{bpr_gradients, bpr_loss, sample_triples, GradientMap, ObjectiveTag};
use crate::dataset::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{init_model, Model, ModelConfig, N_MODULES};
use crate::scalar::Real;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Epochs without a validation Recall@20 improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_k")]
    pub eval_k: usize,
}

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    2048
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_patience() -> usize {
    5
}
fn default_eval_k() -> usize {
    20
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            patience: default_patience(),
            eval_k: default_eval_k(),
        }
    }
}

/// Dense Adam over the full parameter registry. Moments are kept for every
/// parameter; sparse batch gradients contribute zeros elsewhere.
pub struct Adam<F> {
    m: Vec<Matrix<F>>,
    v: Vec<Matrix<F>>,
    t: u64,
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
}

impl<F: Real> Adam<F> {
    pub fn new(model: &Model<F>, lr: F) -> Self {
        let shape = |k: usize| {
            Matrix::zeros(model.modules[k].values.rows(), model.modules[k].values.cols())
        };
        Adam {
            m: (0..N_MODULES).map(shape).collect(),
            v: (0..N_MODULES).map(shape).collect(),
            t: 0,
            lr,
            beta1: F::from_f64_c(0.9),
            beta2: F::from_f64_c(0.999),
            eps: F::from_f64_c(1e-8),
        }
    }

    /// One descent step. Gradient rows absent from the map are zero, but
    /// their moments still decay.
    pub fn step(&mut self, model: &mut Model<F>, grads: &GradientMap<F>) {
        self.t += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for k in 0..N_MODULES {
            let cols = model.modules[k].values.cols();
            let rows = model.modules[k].values.rows();
            let sparse = grads.module(k);
            for r in 0..rows {
                let g_row = sparse.get(&r);
                let m_row = self.m[k].row_mut(r);
                for (c, m) in m_row.iter_mut().enumerate().take(cols) {
                    let g = g_row.map_or(F::zero(), |v| v[c]);
                    *m = self.beta1 * *m + (one - self.beta1) * g;
                }
                let v_row = self.v[k].row_mut(r);
                for (c, v) in v_row.iter_mut().enumerate().take(cols) {
                    let g = g_row.map_or(F::zero(), |v| v[c]);
                    *v = self.beta2 * *v + (one - self.beta2) * g * g;
                }
                let theta = model.modules[k].values.row_mut(r);
                for c in 0..cols {
                    let m_hat = self.m[k].get(r, c) / bc1;
                    let v_hat = self.v[k].get(r, c) / bc2;
                    theta[c] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub valid_recall: Vec<f64>,
}

/// Train a fresh model on the given interaction indices. Validation
/// Recall@K drives early stopping; the best-epoch parameters are restored
/// on return. With an empty validation split all epochs run.
pub fn train_model<F: Real>(
    ds: &InteractionDataset<F>,
    train_indices: &[usize],
    model_config: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Model<F>, TrainReport)> {
    if train_indices.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::InvalidArgument(
            "batch_size and epochs must be positive".into(),
        ));
    }
    let mut model = init_model(ds, train_indices, model_config, seed)?;
    let mut adam = Adam::new(&model, F::from_f64_c(config.learning_rate));
    let positives = ds.user_positives(train_indices);

    let valid = EvalPairs::from_split(ds, Split::Valid, MaskPolicy::MaskTrainPositives);
    let has_valid = !valid.pairs.is_empty();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = train_indices.to_vec();
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<Vec<Matrix<F>>> = None;
    let mut since_best = 0usize;
    let mut train_loss = Vec::new();
    let mut valid_recall = Vec::new();
    let mut epochs_run = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let triples = sample_triples(ds, chunk, &positives, &mut rng);
            let grads = bpr_gradients(&model, &triples, ObjectiveTag::Retain)?;
            adam.step(&mut model, &grads);
            loss_sum += bpr_loss(&model, &triples)?.to_f64_c();
            n_batches += 1;
        }
        train_loss.push(loss_sum / n_batches as f64);
        epochs_run = epoch + 1;

        if has_valid {
            let (recall, _) = ranking_metrics(&model, &valid, config.eval_k)?;
            let recall = recall.to_f64_c();
            valid_recall.push(recall);
            if recall > best_recall {
                best_recall = recall;
                best_epoch = epoch;
                best_params = Some(model.modules.iter().map(|m| m.values.clone()).collect());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        } else {
            best_epoch = epoch;
        }
    }

    if let Some(params) = best_params {
        for (module, values) in model.modules.iter_mut().zip(params) {
            module.values = values;
        }
    }
    Ok((
        model,
        TrainReport {
            epochs_run,
            best_epoch,
            train_loss,
            valid_recall,
        },
    ))
}

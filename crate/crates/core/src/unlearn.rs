//! The unlearning engine: reverse-repair updates, the gated forget
//! objective, modality scaling, layer sensitivities, the adaptive top-p
//! mask, the full targeted-reverse-update driver, and the exact-retrain
//! oracle.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{ranking_metrics, EvalPairs, MaskPolicy};
use crate::bpr::{
    bpr_gradients, gated_forget_gradients, sample_triples, GradientMap, ObjectiveTag, Triple,
};
use crate::dataset::{DeletionRequest, InteractionDataset};
use crate::error::{Error, Result};
use crate::model::{Branch, Model, ModelConfig, N_MODULES};
use crate::scalar::Real;
use crate::train::{train_model, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    #[serde(default = "default_true")]
    pub gate_on: bool,
    #[serde(default = "default_true")]
    pub scaling_on: bool,
    #[serde(default = "default_true")]
    pub selection_on: bool,
}

fn default_true() -> bool {
    true
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            gate_on: true,
            scaling_on: true,
            selection_on: true,
        }
    }
}

impl Toggles {
    pub fn all_off() -> Toggles {
        Toggles {
            gate_on: false,
            scaling_on: false,
            selection_on: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TruConfig {
    /// Reverse/repair mixing factor.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Unlearning learning rate (plain gradient steps, not Adam).
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// L1 pressure on fusion-branch parameters in the forget objective.
    #[serde(default = "default_lambda")]
    pub lambda_fusion: f64,
    #[serde(default = "default_gamma_min")]
    pub gamma_min: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Top proportion of modules kept by the adaptive mask.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Minimum selected parameter-capacity fraction.
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    /// Per-epoch statistics mini-batch budget.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_unlearn_epochs")]
    pub epochs: usize,
    #[serde(default = "default_unlearn_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub toggles: Toggles,
}

fn default_alpha() -> f64 {
    0.2
}
fn default_eta() -> f64 {
    10.0
}
fn default_lambda() -> f64 {
    1e-3
}
fn default_gamma_min() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_p() -> f64 {
    0.15
}
fn default_tau_min() -> f64 {
    0.05
}
fn default_m() -> usize {
    2
}
fn default_unlearn_epochs() -> usize {
    9
}
fn default_unlearn_batch() -> usize {
    2048
}

impl Default for TruConfig {
    fn default() -> Self {
        TruConfig {
            alpha: default_alpha(),
            eta: default_eta(),
            lambda_fusion: default_lambda(),
            gamma_min: default_gamma_min(),
            epsilon: default_epsilon(),
            p: default_p(),
            tau_min: default_tau_min(),
            m: default_m(),
            epochs: default_unlearn_epochs(),
            batch_size: default_unlearn_batch(),
            toggles: Toggles::default(),
        }
    }
}

impl TruConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.alpha > 0.0 && self.alpha < 1.0, "alpha must lie in (0,1)"),
            (self.eta > 0.0, "eta must be positive"),
            (self.lambda_fusion >= 0.0, "lambda_fusion must be non-negative"),
            (
                self.gamma_min > 0.0 && self.gamma_min <= 1.0,
                "gamma_min must lie in (0,1]",
            ),
            (self.epsilon > 0.0, "epsilon must be positive"),
            (self.p > 0.0 && self.p <= 1.0, "p must lie in (0,1]"),
            (
                (0.0..=1.0).contains(&self.tau_min),
                "tau_min must lie in [0,1]",
            ),
            (self.m >= 1, "m must be at least 1"),
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidArgument(msg.into()));
            }
        }
        Ok(())
    }
}

/// Branch order for scale vectors: [id, image, text].
fn branch_slot(branch: Branch) -> Option<usize> {
    match branch {
        Branch::Id => Some(0),
        Branch::Image => Some(1),
        Branch::Text => Some(2),
        Branch::User | Branch::Fusion => None,
    }
}

/// Per-branch reverse-gradient calibration. User-branch modules follow the
/// ID branch (they live in the same propagated space); fusion modules are
/// never scaled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalityScales {
    pub gamma: [f64; 3],
    pub retain_energy: [f64; 3],
    pub forget_energy: [f64; 3],
}

impl ModalityScales {
    pub fn ones() -> ModalityScales {
        ModalityScales {
            gamma: [1.0; 3],
            retain_energy: [0.0; 3],
            forget_energy: [0.0; 3],
        }
    }

    pub fn gamma_for(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Id | Branch::User => self.gamma[0],
            Branch::Image => self.gamma[1],
            Branch::Text => self.gamma[2],
            Branch::Fusion => 1.0,
        }
    }
}

/// Module-selection mask from sensitivity ranking plus capacity expansion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerMask {
    pub sensitivity: BTreeMap<String, f64>,
    pub selected: BTreeMap<String, bool>,
    pub capacity_fraction: f64,
}

impl LayerMask {
    pub fn all_selected(sensitivity: BTreeMap<String, f64>) -> LayerMask {
        let selected = sensitivity.keys().map(|k| (k.clone(), true)).collect();
        LayerMask {
            sensitivity,
            selected,
            capacity_fraction: 1.0,
        }
    }

    pub fn z(&self, module_id: &str) -> bool {
        self.selected.get(module_id).copied().unwrap_or(false)
    }
}

/// Per-branch gradient energies over M statistics batches: mean over the
/// batches of the Euclidean norm of the branch-restricted gradient. Retain
/// energies use the retain objective, forget energies the base (ungated)
/// forget objective.
pub fn modality_scales<F: Real>(
    model: &Model<F>,
    retain_batches: &[Vec<Triple>],
    forget_batches: &[Vec<Triple>],
    gamma_min: f64,
    epsilon: f64,
) -> Result<ModalityScales> {
    if retain_batches.is_empty() || forget_batches.is_empty() {
        return Err(Error::InvalidArgument(
            "modality scaling needs at least one batch per side".into(),
        ));
    }
    let branch_modules = |slot: usize| -> Vec<usize> {
        (0..N_MODULES)
            .filter(|&k| branch_slot(model.modules[k].branch) == Some(slot))
            .collect()
    };
    let energy = |batches: &[Vec<Triple>], tag: ObjectiveTag| -> Result<[f64; 3]> {
        let mut out = [0.0f64; 3];
        for batch in batches {
            let grads = bpr_gradients(model, batch, tag)?;
            for (slot, acc) in out.iter_mut().enumerate() {
                *acc += grads.norm_over(&branch_modules(slot)).to_f64_c();
            }
        }
        for acc in &mut out {
            *acc /= batches.len() as f64;
        }
        Ok(out)
    };
    let retain_energy = energy(retain_batches, ObjectiveTag::Retain)?;
    let forget_energy = energy(forget_batches, ObjectiveTag::ForgetBase)?;
    let mut gamma = [0.0f64; 3];
    for m in 0..3 {
        let ratio = retain_energy[m] / (forget_energy[m] + epsilon);
        gamma[m] = ratio.min(1.0).max(gamma_min);
    }
    Ok(ModalityScales {
        gamma,
        retain_energy,
        forget_energy,
    })
}

/// Per-module structural sensitivity: mean over the M forget batches of
/// the module's base forget-gradient norm.
pub fn layer_sensitivities<F: Real>(
    model: &Model<F>,
    forget_batches: &[Vec<Triple>],
) -> Result<BTreeMap<String, f64>> {
    if forget_batches.is_empty() {
        return Err(Error::InvalidArgument(
            "sensitivity estimation needs at least one batch".into(),
        ));
    }
    let mut out: BTreeMap<String, f64> = model
        .modules
        .iter()
        .map(|m| (m.id.clone(), 0.0))
        .collect();
    for batch in forget_batches {
        let grads = bpr_gradients(model, batch, ObjectiveTag::ForgetBase)?;
        for (k, module) in model.modules.iter().enumerate() {
            *out.get_mut(&module.id).unwrap() += grads.module_norm(k).to_f64_c();
        }
    }
    for v in out.values_mut() {
        *v /= forget_batches.len() as f64;
    }
    Ok(out)
}

/// Rank modules by sensitivity descending (ties by module id), keep the
/// top ceil(p*K), then expand in rank order until the selected parameter
/// capacity reaches tau_min.
pub fn adaptive_top_mask(
    sensitivity: &BTreeMap<String, f64>,
    sizes: &BTreeMap<String, usize>,
    p: f64,
    tau_min: f64,
) -> Result<LayerMask> {
    if sensitivity.is_empty() || sensitivity.len() != sizes.len() {
        return Err(Error::InvalidArgument(
            "sensitivity and size maps must be non-empty and share keys".into(),
        ));
    }
    for key in sensitivity.keys() {
        if !sizes.contains_key(key) {
            return Err(Error::InvalidArgument(format!(
                "module {key} has no size entry"
            )));
        }
    }
    let mut order: Vec<(&String, f64)> =
        sensitivity.iter().map(|(k, &v)| (k, v)).collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(b.0))
    });
    let total: usize = sizes.values().sum();
    let k_modules = sensitivity.len();
    let take = ((p * k_modules as f64).ceil() as usize).clamp(1, k_modules);

    let mut selected: BTreeMap<String, bool> =
        sensitivity.keys().map(|k| (k.clone(), false)).collect();
    let mut capacity = 0usize;
    let mut taken = 0usize;
    for (id, _) in &order {
        let enough = taken >= take && (capacity as f64 / total as f64) >= tau_min;
        if enough {
            break;
        }
        selected.insert((*id).clone(), true);
        capacity += sizes[*id];
        taken += 1;
    }
    Ok(LayerMask {
        sensitivity: sensitivity.clone(),
        selected,
        capacity_fraction: capacity as f64 / total as f64,
    })
}

/// The unified targeted reverse step: in-place ascent
/// theta_k += eta * alpha * z_k * gamma_m(k) * grad. For fusion modules
/// under a positive gate weight, the L1 component of the applied update is
/// flipped toward zero so the gate pressure shrinks fusion parameters.
pub fn tru_reverse_step<F: Real>(
    model: &mut Model<F>,
    grads: &GradientMap<F>,
    mask: &LayerMask,
    scales: &ModalityScales,
    eta: f64,
    alpha: f64,
) -> Result<()> {
    if grads.tag != ObjectiveTag::ForgetGated {
        return Err(Error::Contract(
            "tru_reverse_step requires forget_gated gradients".into(),
        ));
    }
    let lambda = grads.lambda_fusion;
    let two_lambda = lambda + lambda;
    for k in 0..N_MODULES {
        let module = &mut model.modules[k];
        if !mask.z(&module.id) {
            continue;
        }
        let step = F::from_f64_c(eta * alpha * scales.gamma_for(module.branch));
        let fusion = module.branch == Branch::Fusion && lambda > F::zero();
        for (&row, g) in grads.module(k) {
            let theta = module.values.row_mut(row);
            for (c, &gc) in g.iter().enumerate() {
                let applied = if fusion {
                    gc - two_lambda * sign(theta[c])
                } else {
                    gc
                };
                theta[c] += step * applied;
            }
        }
    }
    Ok(())
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Descent on the retain objective with step eta*(1-alpha); unmasked and
/// unscaled.
pub fn repair_step<F: Real>(
    model: &mut Model<F>,
    retain_batch: &[Triple],
    eta: f64,
    alpha: f64,
) -> Result<()> {
    let grads = bpr_gradients(model, retain_batch, ObjectiveTag::Retain)?;
    let step = F::from_f64_c(eta * (1.0 - alpha));
    apply(model, &grads, -step);
    Ok(())
}

/// Ascent on the ungated forget objective with step eta*alpha; the
/// uniform reverse-repair baseline's forget move.
pub fn uniform_reverse_step<F: Real>(
    model: &mut Model<F>,
    forget_batch: &[Triple],
    eta: f64,
    alpha: f64,
) -> Result<()> {
    let grads = bpr_gradients(model, forget_batch, ObjectiveTag::ForgetBase)?;
    let step = F::from_f64_c(eta * alpha);
    apply(model, &grads, step);
    Ok(())
}

fn apply<F: Real>(model: &mut Model<F>, grads: &GradientMap<F>, step: F) {
    for k in 0..N_MODULES {
        for (&row, g) in grads.module(k) {
            let theta = model.modules[k].values.row_mut(row);
            for (c, &gc) in g.iter().enumerate() {
                theta[c] += step * gc;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub retain_recall: Vec<f64>,
    pub retain_ndcg: Vec<f64>,
    pub forget_recall: Vec<f64>,
    pub forget_ndcg: Vec<f64>,
    /// Per-epoch modality scales in branch order [id, image, text].
    pub gamma: Vec<[f64; 3]>,
    /// Per-epoch selected module ids, in registry order.
    pub selected: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub schema_version: String,
    pub method: String,
    pub config: TruConfig,
    pub seed: u64,
    pub epochs: EpochMetrics,
    pub final_gamma: [f64; 3],
    pub final_mask: BTreeMap<String, bool>,
    pub final_capacity_fraction: f64,
}

pub const REPORT_SCHEMA_VERSION: &str = "1";

/// Full targeted-reverse-update driver. Per epoch: estimate modality
/// scales and layer sensitivities from M seeded statistics batches, form
/// the mask, run gated+masked+scaled reverse steps over the forget set,
/// then repair steps over the retain set. Toggles: gate off treats lambda
/// as 0, scaling off forces gamma = 1, selection off selects everything.
/// The statistics batches are always drawn so toggled-off runs share the
/// same random streams.
pub fn run_tru<F: Real>(
    model: &mut Model<F>,
    ds: &InteractionDataset<F>,
    request: &DeletionRequest,
    cfg: &TruConfig,
    seed: u64,
) -> Result<UnlearnReport> {
    run_unlearn(model, ds, request, cfg, seed, "tru")
}

/// The uniform reverse-repair baseline: the same driver with every
/// targeting mechanism disabled, sharing the TRU code path and random
/// streams exactly.
pub fn run_uniform<F: Real>(
    model: &mut Model<F>,
    ds: &InteractionDataset<F>,
    request: &DeletionRequest,
    cfg: &TruConfig,
    seed: u64,
) -> Result<UnlearnReport> {
    let cfg = TruConfig {
        toggles: Toggles::all_off(),
        ..cfg.clone()
    };
    let mut report = run_unlearn(model, ds, request, &cfg, seed, "uniform")?;
    report.method = "uniform".into();
    Ok(report)
}

fn run_unlearn<F: Real>(
    model: &mut Model<F>,
    ds: &InteractionDataset<F>,
    request: &DeletionRequest,
    cfg: &TruConfig,
    seed: u64,
    method: &str,
) -> Result<UnlearnReport> {
    cfg.validate()?;
    request.validate(ds)?;
    if request.forget_set.is_empty() {
        return Err(Error::InvalidArgument("empty forget set".into()));
    }

    // The deletion takes effect on the adjacency immediately.
    model.rebuild_graph(ds, &request.retain_set, "retain");

    let retain_positives = ds.user_positives(&request.retain_set);
    let forget_eval = EvalPairs::from_interactions(ds, &request.forget_set, MaskPolicy::MaskNone);
    let retain_eval = EvalPairs::from_interactions(ds, &request.retain_set, MaskPolicy::MaskNone);

    let sizes: BTreeMap<String, usize> = model
        .modules
        .iter()
        .map(|m| (m.id.clone(), m.size()))
        .collect();

    let stream_rng = |purpose: u64, epoch: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(purpose * 1000 + epoch as u64);
        rng
    };
    let draw_batches = |set: &[usize],
                        count: usize,
                        rng: &mut ChaCha8Rng|
     -> Vec<Vec<Triple>> {
        let size = cfg.batch_size.min(set.len());
        (0..count)
            .map(|_| {
                let mut pool = set.to_vec();
                pool.shuffle(rng);
                pool.truncate(size);
                sample_triples(ds, &pool, &retain_positives, rng)
            })
            .collect()
    };

    let lambda = if cfg.toggles.gate_on {
        F::from_f64_c(cfg.lambda_fusion)
    } else {
        F::zero()
    };
    let mut metrics = EpochMetrics {
        retain_recall: Vec::new(),
        retain_ndcg: Vec::new(),
        forget_recall: Vec::new(),
        forget_ndcg: Vec::new(),
        gamma: Vec::new(),
        selected: Vec::new(),
    };
    let mut last_scales = ModalityScales::ones();
    let mut last_mask = LayerMask::all_selected(
        sizes.keys().map(|k| (k.clone(), 0.0)).collect(),
    );

    for epoch in 0..cfg.epochs {
        // Statistics batches are drawn unconditionally for stream parity.
        let stat_retain = draw_batches(&request.retain_set, cfg.m, &mut stream_rng(1, epoch));
        let stat_forget = draw_batches(&request.forget_set, cfg.m, &mut stream_rng(2, epoch));

        let scales = if cfg.toggles.scaling_on {
            modality_scales(model, &stat_retain, &stat_forget, cfg.gamma_min, cfg.epsilon)?
        } else {
            ModalityScales::ones()
        };
        let sensitivity = layer_sensitivities(model, &stat_forget)?;
        let mask = if cfg.toggles.selection_on {
            adaptive_top_mask(&sensitivity, &sizes, cfg.p, cfg.tau_min)?
        } else {
            LayerMask::all_selected(sensitivity)
        };

        let mut forget_rng = stream_rng(3, epoch);
        let mut forget_order = request.forget_set.clone();
        forget_order.shuffle(&mut forget_rng);
        for chunk in forget_order.chunks(cfg.batch_size) {
            let triples = sample_triples(ds, chunk, &retain_positives, &mut forget_rng);
            let grads = gated_forget_gradients(model, &triples, lambda)?;
            tru_reverse_step(model, &grads, &mask, &scales, cfg.eta, cfg.alpha)?;
        }

        let mut retain_rng = stream_rng(4, epoch);
        let mut retain_order = request.retain_set.clone();
        retain_order.shuffle(&mut retain_rng);
        for chunk in retain_order.chunks(cfg.batch_size) {
            let triples = sample_triples(ds, chunk, &retain_positives, &mut retain_rng);
            repair_step(model, &triples, cfg.eta, cfg.alpha)?;
        }

        let (fr, fn_) = ranking_metrics(model, &forget_eval, 20)?;
        let (rr, rn) = ranking_metrics(model, &retain_eval, 20)?;
        metrics.forget_recall.push(fr.to_f64_c());
        metrics.forget_ndcg.push(fn_.to_f64_c());
        metrics.retain_recall.push(rr.to_f64_c());
        metrics.retain_ndcg.push(rn.to_f64_c());
        metrics.gamma.push(scales.gamma);
        metrics.selected.push(
            model
                .modules
                .iter()
                .filter(|m| mask.z(&m.id))
                .map(|m| m.id.clone())
                .collect(),
        );
        let _ = epoch;
        last_scales = scales;
        last_mask = mask;
    }

    Ok(UnlearnReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        method: method.into(),
        config: cfg.clone(),
        seed,
        epochs: metrics,
        final_gamma: last_scales.gamma,
        final_mask: last_mask.selected,
        final_capacity_fraction: last_mask.capacity_fraction,
    })
}

/// Exact retrain oracle: fresh initialization and standard training on
/// the retain interactions only.
pub fn run_retrain<F: Real>(
    ds: &InteractionDataset<F>,
    request: &DeletionRequest,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<(Model<F>, TrainReport)> {
    request.validate(ds)?;
    train_model(ds, &request.retain_set, model_config, train_config, seed)
}

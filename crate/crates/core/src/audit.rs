//! Evaluation: full-ranking Recall@K / NDCG@K, target-item exposure,
//! membership-inference balanced accuracy, backdoor ASR, linear CKA,
//! and layer-shift profiles.
//!
//! All audits are read-only over an immutable model; results are reported
//! to four decimal places, with values below 0.00005 rounded to 0.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{BackdoorSpec, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Model, Propagated, ITEM_EMB_IMAGE, ITEM_EMB_TEXT};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Remove the user's train positives from the candidate pool.
    MaskTrainPositives,
    /// Rank over all items; used for forget/retain audits whose positives
    /// are exactly the pairs under audit.
    MaskNone,
}

/// Ground-truth positives for a ranking audit plus the candidate masking
/// policy in effect.
#[derive(Clone, Debug)]
pub struct EvalPairs {
    pub pairs: Vec<(usize, usize)>,
    pub policy: MaskPolicy,
    mask: HashMap<usize, HashSet<usize>>,
}

impl EvalPairs {
    pub fn new<F: Real>(
        ds: &InteractionDataset<F>,
        pairs: Vec<(usize, usize)>,
        policy: MaskPolicy,
    ) -> EvalPairs {
        let mask = match policy {
            MaskPolicy::MaskNone => HashMap::new(),
            MaskPolicy::MaskTrainPositives => ds.user_positives(&ds.train_indices()),
        };
        EvalPairs { pairs, policy, mask }
    }

    pub fn from_split<F: Real>(
        ds: &InteractionDataset<F>,
        split: Split,
        policy: MaskPolicy,
    ) -> EvalPairs {
        let pairs = ds
            .split_indices(split)
            .into_iter()
            .map(|i| ds.interactions[i])
            .collect();
        Self::new(ds, pairs, policy)
    }

    pub fn from_interactions<F: Real>(
        ds: &InteractionDataset<F>,
        indices: &[usize],
        policy: MaskPolicy,
    ) -> EvalPairs {
        let pairs = indices.iter().map(|&i| ds.interactions[i]).collect();
        Self::new(ds, pairs, policy)
    }

    fn per_user(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(u, i) in &self.pairs {
            map.entry(u).or_default().push(i);
        }
        map
    }
}

/// Full-ranking scorer: propagation and the fused item table are computed
/// once per model.
pub struct Ranker<'a, F> {
    model: &'a Model<F>,
    prop: Propagated<F>,
    fused: Matrix<F>,
}

impl<'a, F: Real> Ranker<'a, F> {
    pub fn new(model: &'a Model<F>) -> Self {
        let prop = model.propagate();
        let fused = model.fused_item_matrix(&prop);
        Ranker { model, prop, fused }
    }

    pub fn scores(&self, user: usize) -> Vec<F> {
        let u = self.prop.user(user);
        (0..self.model.n_items)
            .map(|i| crate::linalg::dot(u, self.fused.row(i)))
            .collect()
    }

    pub fn score(&self, user: usize, item: usize) -> F {
        crate::linalg::dot(self.prop.user(user), self.fused.row(item))
    }

    /// Top-K items by score, ties broken by ascending item id.
    pub fn topk(&self, user: usize, masked: Option<&HashSet<usize>>, k: usize) -> Vec<usize> {
        let scores = self.scores(user);
        let mut idx: Vec<usize> = (0..scores.len())
            .filter(|i| masked.map_or(true, |m| !m.contains(i)))
            .collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }
}

/// Mean over users (with >= 1 positive) of |top-K hits| / |positives|.
pub fn recall_at_k<F: Real>(model: &Model<F>, eval: &EvalPairs, k: usize) -> Result<F> {
    let (recall, _) = ranking_metrics(model, eval, k)?;
    Ok(recall)
}

/// Binary-relevance NDCG with log2 discount; ideal DCG over
/// min(K, |positives|).
pub fn ndcg_at_k<F: Real>(model: &Model<F>, eval: &EvalPairs, k: usize) -> Result<F> {
    let (_, ndcg) = ranking_metrics(model, eval, k)?;
    Ok(ndcg)
}

/// Recall@K and NDCG@K in one ranking pass.
pub fn ranking_metrics<F: Real>(
    model: &Model<F>,
    eval: &EvalPairs,
    k: usize,
) -> Result<(F, F)> {
    if k > model.n_items {
        return Err(Error::InvalidArgument(format!(
            "K = {k} exceeds the item count {}",
            model.n_items
        )));
    }
    let per_user = eval.per_user();
    if per_user.is_empty() {
        return Err(Error::InvalidArgument("no user has positives".into()));
    }
    let ranker = Ranker::new(model);
    let mut recall_sum = 0.0f64;
    let mut ndcg_sum = 0.0f64;
    for (&user, positives) in &per_user {
        let pos: HashSet<usize> = positives.iter().copied().collect();
        let top = ranker.topk(user, eval.mask.get(&user), k);
        let mut hits = 0usize;
        let mut dcg = 0.0f64;
        for (rank, &item) in top.iter().enumerate() {
            if pos.contains(&item) {
                hits += 1;
                dcg += 1.0 / ((rank + 2) as f64).log2();
            }
        }
        let ideal: f64 = (0..k.min(pos.len()))
            .map(|r| 1.0 / ((r + 2) as f64).log2())
            .sum();
        recall_sum += hits as f64 / pos.len() as f64;
        ndcg_sum += if ideal > 0.0 { dcg / ideal } else { 0.0 };
    }
    let n = per_user.len() as f64;
    Ok((
        F::from_f64_c(recall_sum / n),
        F::from_f64_c(ndcg_sum / n),
    ))
}

/// Fraction of (user, slot) recommendations in the users' top-K lists
/// occupied by target items. Candidates are unmasked.
pub fn topk_exposure<F: Real>(
    model: &Model<F>,
    target_items: &HashSet<usize>,
    k: usize,
    users: &[usize],
) -> Result<F> {
    if target_items.is_empty() || users.is_empty() {
        return Err(Error::InvalidArgument(
            "exposure needs non-empty target and user sets".into(),
        ));
    }
    let ranker = Ranker::new(model);
    let mut occupied = 0usize;
    let mut slots = 0usize;
    for &u in users {
        let top = ranker.topk(u, None, k);
        occupied += top.iter().filter(|i| target_items.contains(i)).count();
        slots += top.len();
    }
    Ok(F::from_f64_c(occupied as f64 / slots as f64))
}

/// Score-threshold membership inference: sweep thresholds over the union
/// of member/non-member scores (both orientations) and report the best
/// balanced accuracy. 0.5 means no measurable leakage.
pub fn mia_balanced_accuracy<F: Real>(
    model: &Model<F>,
    member_pairs: &EvalPairs,
    nonmember_pairs: &EvalPairs,
) -> Result<F> {
    if member_pairs.pairs.is_empty() || nonmember_pairs.pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "membership inference needs non-empty member and non-member sets".into(),
        ));
    }
    let ranker = Ranker::new(model);
    let score_all = |pairs: &[(usize, usize)]| -> Vec<f64> {
        let mut v: Vec<f64> = pairs
            .iter()
            .map(|&(u, i)| ranker.score(u, i).to_f64_c())
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let members = score_all(&member_pairs.pairs);
    let nonmembers = score_all(&nonmember_pairs.pairs);

    let count_ge = |sorted: &[f64], t: f64| -> usize {
        sorted.len() - sorted.partition_point(|&x| x < t)
    };
    let mut thresholds: Vec<f64> = members.iter().chain(&nonmembers).copied().collect();
    thresholds.push(f64::INFINITY);
    let mut best = 0.5f64;
    for &t in &thresholds {
        let tpr = count_ge(&members, t) as f64 / members.len() as f64;
        let fpr = count_ge(&nonmembers, t) as f64 / nonmembers.len() as f64;
        let bal = (tpr + (1.0 - fpr)) / 2.0;
        // Inverting the decision handles the opposite orientation.
        best = best.max(bal.max(1.0 - bal));
    }
    Ok(F::from_f64_c(best))
}

/// Backdoor audit: (fraction of poisoned users whose unmasked top-K holds
/// the trigger item, same fraction over non-poisoned users).
pub fn backdoor_asr<F: Real>(model: &Model<F>, spec: &BackdoorSpec, k: usize) -> Result<(F, F)> {
    if spec.trigger_item >= model.n_items {
        return Err(Error::Integrity(format!(
            "trigger item {} outside the model's item range",
            spec.trigger_item
        )));
    }
    let poisoned: HashSet<usize> = spec.poisoned_users.iter().copied().collect();
    let ranker = Ranker::new(model);
    let mut hit_poisoned = 0usize;
    let mut hit_clean = 0usize;
    let mut n_clean = 0usize;
    for u in 0..model.n_users {
        let hit = ranker.topk(u, None, k).contains(&spec.trigger_item);
        if poisoned.contains(&u) {
            hit_poisoned += hit as usize;
        } else {
            n_clean += 1;
            hit_clean += hit as usize;
        }
    }
    let asr = if poisoned.is_empty() {
        F::zero()
    } else {
        F::from_f64_c(hit_poisoned as f64 / poisoned.len() as f64)
    };
    let clean = if n_clean == 0 {
        F::zero()
    } else {
        F::from_f64_c(hit_clean as f64 / n_clean as f64)
    };
    Ok((asr, clean))
}

/// Linear centered kernel alignment between two representation matrices
/// with matching row counts: |Yc' Xc|_F^2 / (|Xc' Xc|_F |Yc' Yc|_F).
pub fn linear_cka<F: Real>(x: &Matrix<F>, y: &Matrix<F>) -> Result<F> {
    if x.rows() != y.rows() || x.rows() < 2 {
        return Err(Error::InvalidArgument(
            "CKA needs two matrices with the same row count >= 2".into(),
        ));
    }
    let center = |m: &Matrix<F>| -> Matrix<F> {
        let mut out = m.clone();
        let n = F::from_usize(m.rows()).unwrap();
        for c in 0..m.cols() {
            let mut mean = F::zero();
            for r in 0..m.rows() {
                mean += m.get(r, c);
            }
            mean /= n;
            for r in 0..m.rows() {
                out.set(r, c, m.get(r, c) - mean);
            }
        }
        out
    };
    let xc = center(x);
    let yc = center(y);
    let gram_norm = |a: &Matrix<F>, b: &Matrix<F>| -> F {
        // |A' B|_F over columns of A and B.
        let mut acc = F::zero();
        for i in 0..a.cols() {
            for j in 0..b.cols() {
                let mut s = F::zero();
                for r in 0..a.rows() {
                    s += a.get(r, i) * b.get(r, j);
                }
                acc += s * s;
            }
        }
        acc.sqrt()
    };
    let cross = gram_norm(&yc, &xc);
    let xx = gram_norm(&xc, &xc);
    let yy = gram_norm(&yc, &yc);
    if xx == F::zero() || yy == F::zero() {
        return Err(Error::InvalidArgument("zero-variance input to CKA".into()));
    }
    Ok(cross * cross / (xx * yy))
}

/// 3x3 cross-branch CKA over per-branch item representations, sampled on
/// a fixed seeded item subset.
pub fn cka_branch_matrix<F: Real>(
    model: &Model<F>,
    sample_size: usize,
    seed: u64,
) -> Result<[[f64; 3]; 3]> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<usize> = (0..model.n_items).collect();
    items.shuffle(&mut rng);
    items.truncate(sample_size.max(2).min(model.n_items));

    let prop = model.propagate();
    let d = model.embedding_dim();
    let mut reps: Vec<Matrix<F>> = Vec::with_capacity(3);
    for branch in 0..3 {
        let mut m = Matrix::zeros(items.len(), d);
        for (r, &item) in items.iter().enumerate() {
            let vec = match branch {
                0 => prop.item(item).to_vec(),
                1 => model.projected_feature(ITEM_EMB_IMAGE, item),
                _ => model.projected_feature(ITEM_EMB_TEXT, item),
            };
            m.row_mut(r).copy_from_slice(&vec);
        }
        reps.push(m);
    }
    let mut out = [[0.0f64; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            out[a][b] = linear_cka(&reps[a], &reps[b])?.to_f64_c();
        }
    }
    Ok(out)
}

/// Per-module normalized parameter shift |theta_a - theta_b| / |theta_b|,
/// with `b` as the reference. A zero-norm reference module or a non-finite
/// ratio (overflowed parameters) reports None (the +inf sentinel).
pub fn layer_shift_profile<F: Real>(
    model_a: &Model<F>,
    model_b: &Model<F>,
) -> Result<BTreeMap<String, Option<f64>>> {
    if !model_a.same_registry(model_b) {
        return Err(Error::Integrity(
            "layer shift requires models with a shared module registry".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for (ma, mb) in model_a.modules.iter().zip(&model_b.modules) {
        let mut diff = F::zero();
        for (x, y) in ma.values.data().iter().zip(mb.values.data()) {
            let d = *x - *y;
            diff += d * d;
        }
        let reference = mb.values.frobenius_norm();
        let ratio = (diff.sqrt() / reference).to_f64_c();
        let value = if reference == F::zero() || !ratio.is_finite() {
            None
        } else {
            Some(ratio)
        };
        out.insert(ma.id.clone(), value);
    }
    Ok(out)
}

/// Round to four decimal places; values below 0.00005 report as 0.
pub fn round4(x: f64) -> f64 {
    let r = (x * 10000.0).round() / 10000.0;
    if r.abs() < 0.00005 {
        0.0
    } else {
        r
    }
}

/// Aggregated audit results, serialized as JSON and as a flat CSV
/// (name, split, value) for plotting pipelines.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub recall_at_20: BTreeMap<String, f64>,
    pub ndcg_at_20: BTreeMap<String, f64>,
    pub exposure_at_20: Option<f64>,
    pub mia_balacc: Option<f64>,
    pub bkd_asr_after: Option<f64>,
    pub bkd_clean_after: Option<f64>,
    pub cka: [[f64; 3]; 3],
    pub layer_shift: Option<BTreeMap<String, Option<f64>>>,
}

impl AuditReport {
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(String, String, String)> = Vec::new();
        for (split, v) in &self.recall_at_20 {
            rows.push(("recall_at_20".into(), split.clone(), format!("{v}")));
        }
        for (split, v) in &self.ndcg_at_20 {
            rows.push(("ndcg_at_20".into(), split.clone(), format!("{v}")));
        }
        if let Some(v) = self.exposure_at_20 {
            rows.push(("exposure_at_20".into(), "all".into(), format!("{v}")));
        }
        if let Some(v) = self.mia_balacc {
            rows.push(("mia_balacc".into(), "forget".into(), format!("{v}")));
        }
        if let Some(v) = self.bkd_asr_after {
            rows.push(("bkd_asr_after".into(), "poisoned".into(), format!("{v}")));
        }
        if let Some(v) = self.bkd_clean_after {
            rows.push(("bkd_clean_after".into(), "clean".into(), format!("{v}")));
        }
        for a in 0..3 {
            for b in 0..3 {
                rows.push((
                    format!("cka_{}_{}", crate::model::BRANCHES[a], crate::model::BRANCHES[b]),
                    "items".into(),
                    format!("{}", self.cka[a][b]),
                ));
            }
        }
        if let Some(shift) = &self.layer_shift {
            for (module, v) in shift {
                let text = match v {
                    Some(x) => format!("{x}"),
                    None => "inf".into(),
                };
                rows.push(("layer_shift".into(), module.clone(), text));
            }
        }
        let mut csv = String::from("name,split,value\n");
        for (n, s, v) in rows {
            csv.push_str(&format!("{n},{s},{v}\n"));
        }
        csv
    }
}

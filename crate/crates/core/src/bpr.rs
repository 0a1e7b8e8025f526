//! BPR training loss over the fused multimodal scores and its exact
//! analytic gradients, including the chain through graph propagation,
//! the feature projections, and the fusion gate.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, squared_norm, Matrix};
use crate::model::{
    Model, FUSION_GATE, FUSION_SCALE, ITEM_EMB_ID, ITEM_EMB_IMAGE, ITEM_EMB_TEXT, N_MODULES,
    USER_EMB,
};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveTag {
    Retain,
    ForgetBase,
    ForgetGated,
}

/// Sparse per-module gradients: (module, row) -> gradient vector. Only
/// rows touched by the batch (directly or through propagation) appear.
#[derive(Clone, Debug)]
pub struct GradientMap<F> {
    pub tag: ObjectiveTag,
    /// Gate weight the gated objective was built with; zero otherwise.
    pub lambda_fusion: F,
    entries: Vec<BTreeMap<usize, Vec<F>>>,
}

impl<F: Real> GradientMap<F> {
    pub fn new(tag: ObjectiveTag) -> Self {
        GradientMap {
            tag,
            lambda_fusion: F::zero(),
            entries: (0..N_MODULES).map(|_| BTreeMap::new()).collect(),
        }
    }

    pub fn module(&self, k: usize) -> &BTreeMap<usize, Vec<F>> {
        &self.entries[k]
    }

    pub fn module_mut(&mut self, k: usize) -> &mut BTreeMap<usize, Vec<F>> {
        &mut self.entries[k]
    }

    pub fn accumulate(&mut self, module: usize, row: usize, cols: usize, f: impl FnOnce(&mut [F])) {
        let entry = self.entries[module]
            .entry(row)
            .or_insert_with(|| vec![F::zero(); cols]);
        f(entry);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|m| m.is_empty())
    }

    /// Euclidean norm of all entries restricted to one module.
    pub fn module_norm(&self, module: usize) -> F {
        let mut acc = F::zero();
        for v in self.entries[module].values() {
            acc += squared_norm(v);
        }
        acc.sqrt()
    }

    /// Euclidean norm of all entries over a set of modules.
    pub fn norm_over(&self, modules: &[usize]) -> F {
        let mut acc = F::zero();
        for &k in modules {
            for v in self.entries[k].values() {
                acc += squared_norm(v);
            }
        }
        acc.sqrt()
    }

    /// Scale every entry by a constant.
    pub fn scale(&mut self, c: F) {
        for m in &mut self.entries {
            for v in m.values_mut() {
                for x in v.iter_mut() {
                    *x *= c;
                }
            }
        }
    }
}

/// Sample one uniformly random negative per interaction: an item the user
/// has not interacted with in the active set.
pub fn sample_triples<F: Real>(
    ds: &InteractionDataset<F>,
    batch: &[usize],
    positives: &HashMap<usize, HashSet<usize>>,
    rng: &mut ChaCha8Rng,
) -> Vec<Triple> {
    let n_items = ds.n_items;
    let empty = HashSet::new();
    let mut out = Vec::with_capacity(batch.len());
    for &idx in batch {
        let (user, pos) = ds.interactions[idx];
        let seen = positives.get(&user).unwrap_or(&empty);
        if seen.len() >= n_items {
            continue;
        }
        let mut neg = rng.gen_range(0..n_items);
        let mut tries = 0;
        while (seen.contains(&neg) || neg == pos) && tries < 100 {
            neg = rng.gen_range(0..n_items);
            tries += 1;
        }
        if seen.contains(&neg) || neg == pos {
            // Dense user: fall back to the first admissible item.
            match (0..n_items).find(|i| !seen.contains(i) && *i != pos) {
                Some(i) => neg = i,
                None => continue,
            }
        }
        out.push(Triple { user, pos, neg });
    }
    out
}

fn softplus_neg<F: Real>(x: F) -> F {
    // -ln sigmoid(x) = ln(1 + e^{-x}), computed stably.
    if x > F::zero() {
        (F::one() + (-x).exp()).ln()
    } else {
        -x + (F::one() + x.exp()).ln()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

struct ItemCache<F> {
    branches: [Vec<F>; 3],
    fused: Vec<F>,
}

fn item_cache<'a, F: Real>(
    model: &Model<F>,
    prop: &crate::model::Propagated<F>,
    cache: &'a mut BTreeMap<usize, ItemCache<F>>,
    item: usize,
) -> &'a ItemCache<F> {
    cache.entry(item).or_insert_with(|| {
        let (fused, branches) = model.item_representation(prop, item);
        ItemCache { branches, fused }
    })
}

/// Mean BPR logistic loss plus L2 on the touched raw embedding rows:
/// (1/B) sum -ln sigma(s_pos - s_neg) + (l2/B) sum (|u|^2 + |p|^2 + |n|^2).
pub fn bpr_loss<F: Real>(model: &Model<F>, batch: &[Triple]) -> Result<F> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let prop = model.propagate();
    let mut cache = BTreeMap::new();
    let l2 = F::from_f64_c(model.config.l2_weight);
    let mut loss = F::zero();
    for t in batch {
        let pu = prop.user(t.user).to_vec();
        let sp = dot(&pu, &item_cache(model, &prop, &mut cache, t.pos).fused);
        let sn = dot(&pu, &item_cache(model, &prop, &mut cache, t.neg).fused);
        loss += softplus_neg(sp - sn);
        loss += l2
            * (squared_norm(model.modules[USER_EMB].values.row(t.user))
                + squared_norm(model.modules[ITEM_EMB_ID].values.row(t.pos))
                + squared_norm(model.modules[ITEM_EMB_ID].values.row(t.neg)));
    }
    Ok(loss / F::from_usize(batch.len()).unwrap())
}

/// Exact analytic gradient of `bpr_loss` for every touched parameter row.
pub fn bpr_gradients<F: Real>(
    model: &Model<F>,
    batch: &[Triple],
    tag: ObjectiveTag,
) -> Result<GradientMap<F>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = model.embedding_dim();
    let prop = model.propagate();
    let gate = model.gate_weights();
    let scale = model.modules[FUSION_SCALE].values.clone();
    let inv_b = F::one() / F::from_usize(batch.len()).unwrap();
    let l2 = F::from_f64_c(model.config.l2_weight);
    let two = F::from_f64_c(2.0);

    let mut cache: BTreeMap<usize, ItemCache<F>> = BTreeMap::new();
    // Gradient w.r.t. the propagated ID table, by node id.
    let mut d_prop: BTreeMap<usize, Vec<F>> = BTreeMap::new();
    let mut d_proj_img = Matrix::<F>::zeros(model.image_features.cols(), d);
    let mut d_proj_txt = Matrix::<F>::zeros(model.text_features.cols(), d);
    let mut d_gate = vec![F::zero(); 3];
    let mut d_scale = Matrix::<F>::zeros(3, d);
    let mut grads = GradientMap::new(tag);

    for t in batch {
        let pu = prop.user(t.user).to_vec();
        let sp = dot(&pu, &item_cache(model, &prop, &mut cache, t.pos).fused);
        let sn = dot(&pu, &item_cache(model, &prop, &mut cache, t.neg).fused);
        let coef = -sigmoid(sn - sp) * inv_b; // dL/ds_pos; negated for neg.

        for (item, w) in [(t.pos, coef), (t.neg, -coef)] {
            let entry = cache.get(&item).expect("cached above");
            // User side: dL/d pu += w * fused(item).
            {
                let dpu = d_prop.entry(t.user).or_insert_with(|| vec![F::zero(); d]);
                for j in 0..d {
                    dpu[j] += w * entry.fused[j];
                }
            }
            // Branch representations and fusion parameters.
            let mut branch_scores = [F::zero(); 3];
            for m in 0..3 {
                let s = scale.row(m);
                let b = &entry.branches[m];
                let mut a = F::zero();
                for j in 0..d {
                    a += pu[j] * s[j] * b[j];
                    d_scale.row_mut(m)[j] += w * gate[m] * pu[j] * b[j];
                }
                branch_scores[m] = a;
            }
            // ID branch flows back through propagation.
            {
                let s = scale.row(0);
                let node = model.n_users + item;
                let di = d_prop.entry(node).or_insert_with(|| vec![F::zero(); d]);
                for j in 0..d {
                    di[j] += w * gate[0] * s[j] * pu[j];
                }
            }
            // Image / text branches flow into the projection matrices.
            for (m, module, features, dproj) in [
                (1usize, ITEM_EMB_IMAGE, &model.image_features, &mut d_proj_img),
                (2usize, ITEM_EMB_TEXT, &model.text_features, &mut d_proj_txt),
            ] {
                let _ = module;
                let s = scale.row(m);
                let x = features.row(item);
                for (k, &xk) in x.iter().enumerate() {
                    let row = dproj.row_mut(k);
                    for j in 0..d {
                        row[j] += w * gate[m] * s[j] * pu[j] * xk;
                    }
                }
            }
            // Gate logits through the softmax Jacobian.
            let mean_score: F = (0..3).map(|m| gate[m] * branch_scores[m]).sum();
            for q in 0..3 {
                d_gate[q] += w * gate[q] * (branch_scores[q] - mean_score);
            }
        }
        // L2 on the raw embedding rows touched by this triple.
        let c = two * l2 * inv_b;
        grads.accumulate(USER_EMB, t.user, d, |row| {
            for (g, v) in row.iter_mut().zip(model.modules[USER_EMB].values.row(t.user)) {
                *g += c * *v;
            }
        });
        for item in [t.pos, t.neg] {
            grads.accumulate(ITEM_EMB_ID, item, d, |row| {
                for (g, v) in row.iter_mut().zip(model.modules[ITEM_EMB_ID].values.row(item)) {
                    *g += c * *v;
                }
            });
        }
    }

    // Backpropagate through propagation: the operator is symmetric, so we
    // apply the same propagation to the sparse d_prop rows and keep the
    // L-hop support.
    let depth = model.config.propagation_depth;
    let n_nodes = model.n_users + model.n_items;
    let touched: BTreeSet<usize> = d_prop.keys().copied().collect();
    let mut dense = Matrix::<F>::zeros(n_nodes, d);
    for (&node, vec) in &d_prop {
        dense.row_mut(node).copy_from_slice(vec);
    }
    let back = model.graph.propagate(&dense, depth);
    let support = model.graph.expand_support(&touched, depth);
    for &node in &support {
        let row = back.row(node);
        if node < model.n_users {
            grads.accumulate(USER_EMB, node, d, |g| {
                for (gi, ri) in g.iter_mut().zip(row) {
                    *gi += *ri;
                }
            });
        } else {
            grads.accumulate(ITEM_EMB_ID, node - model.n_users, d, |g| {
                for (gi, ri) in g.iter_mut().zip(row) {
                    *gi += *ri;
                }
            });
        }
    }

    // Projection, scale, and gate blocks (dense within their modules).
    for (module, acc) in [(ITEM_EMB_IMAGE, d_proj_img), (ITEM_EMB_TEXT, d_proj_txt)] {
        for r in 0..acc.rows() {
            let src = acc.row(r).to_vec();
            grads.accumulate(module, r, d, |g| g.copy_from_slice(&src));
        }
    }
    grads.accumulate(FUSION_GATE, 0, 3, |g| g.copy_from_slice(&d_gate));
    for m in 0..3 {
        let src = d_scale.row(m).to_vec();
        grads.accumulate(FUSION_SCALE, m, d, |g| g.copy_from_slice(&src));
    }
    Ok(grads)
}

/// Forget objective with the ranking fusion gate:
/// L(d_u) + lambda * sum over fusion modules of the l1 norm.
pub fn gated_forget_loss<F: Real>(model: &Model<F>, batch: &[Triple], lambda: F) -> Result<F> {
    let mut loss = bpr_loss(model, batch)?;
    if lambda > F::zero() {
        for k in [FUSION_GATE, FUSION_SCALE] {
            let l1: F = model.modules[k].values.data().iter().map(|v| v.abs()).sum();
            loss += lambda * l1;
        }
    }
    Ok(loss)
}

/// Gradient of the gated forget objective: the base BPR gradient plus
/// lambda * sign(theta) on every fusion parameter (subgradient 0 at zero).
pub fn gated_forget_gradients<F: Real>(
    model: &Model<F>,
    batch: &[Triple],
    lambda: F,
) -> Result<GradientMap<F>> {
    let mut grads = bpr_gradients(model, batch, ObjectiveTag::ForgetGated)?;
    grads.lambda_fusion = lambda;
    if lambda > F::zero() {
        let d = model.embedding_dim();
        for k in [FUSION_GATE, FUSION_SCALE] {
            let values = model.modules[k].values.clone();
            for r in 0..values.rows() {
                let cols = if k == FUSION_GATE { 3 } else { d };
                grads.accumulate(k, r, cols, |g| {
                    for (gi, &v) in g.iter_mut().zip(values.row(r)) {
                        *gi += lambda * sign(v);
                    }
                });
            }
        }
    }
    Ok(grads)
}

pub(crate) fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

//! Data model: ingestion, 8:1:1 per-user splitting, deletion-request
//! construction for the three regimes, synthetic multimodal generation,
//! and backdoor injection.
//!
//! All operations are pure functions of (input, seed); repeated calls are
//! bit-identical.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// User-item interactions plus per-item modality features.
///
/// Ids are dense 0-based after ingestion; original ids are kept in the
/// side mappings for reports. Synthetic datasets additionally carry the
/// latent cluster assignment used to generate them.
#[derive(Clone, Debug)]
pub struct InteractionDataset<F> {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions: Vec<(usize, usize)>,
    pub split: Vec<Split>,
    pub image_features: Matrix<F>,
    pub text_features: Matrix<F>,
    pub orig_user_ids: Vec<u64>,
    pub orig_item_ids: Vec<u64>,
    pub user_clusters: Option<Vec<usize>>,
    pub item_clusters: Option<Vec<usize>>,
}

impl<F: Real> InteractionDataset<F> {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.interactions.len())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Train)
    }

    /// Per-user positive item sets over the given interaction indices.
    pub fn user_positives(&self, indices: &[usize]) -> HashMap<usize, HashSet<usize>> {
        let mut map: HashMap<usize, HashSet<usize>> = HashMap::new();
        for &idx in indices {
            let (u, i) = self.interactions[idx];
            map.entry(u).or_default().insert(i);
        }
        map
    }

    fn validate(&self) -> Result<()> {
        if self.interactions.is_empty() {
            return Err(Error::Integrity("no interactions".into()));
        }
        let mut seen: HashSet<(usize, usize, u8)> = HashSet::new();
        for (idx, &(u, i)) in self.interactions.iter().enumerate() {
            if u >= self.n_users || i >= self.n_items {
                return Err(Error::Integrity(format!(
                    "interaction {idx} references out-of-range id ({u}, {i})"
                )));
            }
            let tag = self.split[idx] as u8;
            if !seen.insert((u, i, tag)) {
                return Err(Error::Integrity(format!(
                    "duplicate pair ({u}, {i}) within one split"
                )));
            }
        }
        if self.image_features.rows() != self.n_items || self.text_features.rows() != self.n_items {
            return Err(Error::Integrity("item missing a feature row".into()));
        }
        Ok(())
    }
}

fn parse_feature_csv<F: Real>(path: &Path) -> Result<Vec<Vec<F>>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<F>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let first = line.split(',').next().unwrap_or("").trim();
        // Optional header: detected by a non-numeric first token.
        if lineno == 0 && first.parse::<f64>().is_err() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split(',') {
            let v = tok.trim().parse::<F>().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("non-numeric feature value {tok:?}"),
            })?;
            row.push(v);
        }
        if let Some(prev) = rows.first() {
            if prev.len() != row.len() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "inconsistent feature width".into(),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Ingest a line-oriented interaction file (`user<TAB>item[<TAB>timestamp]`,
/// timestamp ignored) plus item feature CSVs indexed by original item id.
/// Ids are remapped to dense 0-based ranges (ascending original order) and
/// all interactions land in the train split.
pub fn load_interactions<F: Real>(
    path: &Path,
    image_path: &Path,
    text_path: &Path,
) -> Result<InteractionDataset<F>> {
    let text = fs::read_to_string(path)?;
    let mut raw: Vec<(u64, u64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<u64> {
            tok.ok_or(Error::Parse {
                line: lineno + 1,
                msg: "expected `user<TAB>item`".into(),
            })?
            .parse::<u64>()
            .map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("malformed id in {line:?}"),
            })
        };
        let u = parse(parts.next())?;
        let i = parse(parts.next())?;
        raw.push((u, i));
    }
    if raw.is_empty() {
        return Err(Error::Integrity("no interactions".into()));
    }

    let orig_user_ids: Vec<u64> = raw.iter().map(|&(u, _)| u).collect::<BTreeSet<_>>().into_iter().collect();
    let orig_item_ids: Vec<u64> = raw.iter().map(|&(_, i)| i).collect::<BTreeSet<_>>().into_iter().collect();
    let user_map: HashMap<u64, usize> =
        orig_user_ids.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let item_map: HashMap<u64, usize> =
        orig_item_ids.iter().enumerate().map(|(k, &v)| (v, k)).collect();

    let interactions: Vec<(usize, usize)> = raw
        .iter()
        .map(|&(u, i)| (user_map[&u], item_map[&i]))
        .collect();

    let image_rows = parse_feature_csv::<F>(image_path)?;
    let text_rows = parse_feature_csv::<F>(text_path)?;
    let gather = |rows: &[Vec<F>], what: &str| -> Result<Matrix<F>> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut m = Matrix::zeros(orig_item_ids.len(), dim);
        for (dense, &orig) in orig_item_ids.iter().enumerate() {
            let row = rows.get(orig as usize).ok_or_else(|| {
                Error::Integrity(format!("item {orig} missing a row in the {what} feature file"))
            })?;
            m.row_mut(dense).copy_from_slice(row);
        }
        Ok(m)
    };
    let image_features = gather(&image_rows, "image")?;
    let text_features = gather(&text_rows, "text")?;

    let n = interactions.len();
    let ds = InteractionDataset {
        n_users: orig_user_ids.len(),
        n_items: orig_item_ids.len(),
        interactions,
        split: vec![Split::Train; n],
        image_features,
        text_features,
        orig_user_ids,
        orig_item_ids,
        user_clusters: None,
        item_clusters: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-user random split into train/valid/test. Every user keeps at least
/// one train interaction (full-ranking evaluation needs trained user
/// embeddings), and per-user counts follow the requested ratios by largest
/// remainder, so global proportions are within one interaction per user.
pub fn split_dataset<F: Real>(
    ds: &InteractionDataset<F>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<InteractionDataset<F>> {
    let (rt, rv, re) = ratios;
    if rt <= 0.0 || rv < 0.0 || re < 0.0 || (rt + rv + re - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios ({rt}, {rv}, {re}) must be nonnegative with positive train share and sum to 1"
        )));
    }
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); ds.n_users];
    for (idx, &(u, _)) in ds.interactions.iter().enumerate() {
        per_user[u].push(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for indices in per_user.iter_mut() {
        indices.shuffle(&mut rng);
        let n = indices.len();
        if n == 0 {
            continue;
        }
        let targets = [rt * n as f64, rv * n as f64, re * n as f64];
        let mut counts: [usize; 3] = [
            targets[0].floor() as usize,
            targets[1].floor() as usize,
            targets[2].floor() as usize,
        ];
        let mut rem = n - counts.iter().sum::<usize>();
        // Distribute the remainder by largest fractional part; ties go
        // train > valid > test.
        let mut order: Vec<usize> = vec![0, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = targets[a] - targets[a].floor();
            let fb = targets[b] - targets[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &slot in order.iter().cycle() {
            if rem == 0 {
                break;
            }
            counts[slot] += 1;
            rem -= 1;
        }
        if counts[0] == 0 {
            let steal = if counts[1] >= counts[2] { 1 } else { 2 };
            counts[steal] -= 1;
            counts[0] += 1;
        }
        for (pos, &idx) in indices.iter().enumerate() {
            out.split[idx] = if pos < counts[0] {
                Split::Train
            } else if pos < counts[0] + counts[1] {
                Split::Valid
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionRegime {
    UserLevel,
    ItemLevel,
    InteractionLevel,
}

/// A deletion request: the forget set `d_u` (train interaction indices)
/// plus the induced retain set, which together partition the train split.
#[derive(Clone, Debug)]
pub struct DeletionRequest {
    pub regime: DeletionRegime,
    pub forget_set: Vec<usize>,
    pub retain_set: Vec<usize>,
    pub forget_users: BTreeSet<usize>,
    pub forget_items: BTreeSet<usize>,
}

impl DeletionRequest {
    /// Build a request from an explicit forget list (used by the backdoor
    /// audit, where the forget set is exactly the injected interactions).
    pub fn from_interactions<F: Real>(
        ds: &InteractionDataset<F>,
        regime: DeletionRegime,
        forget: &[usize],
    ) -> Result<DeletionRequest> {
        let train = ds.train_indices();
        let forget_lookup: HashSet<usize> = forget.iter().copied().collect();
        for &idx in forget {
            if ds.split.get(idx) != Some(&Split::Train) {
                return Err(Error::InvalidArgument(format!(
                    "forget index {idx} is not a train interaction"
                )));
            }
        }
        let mut forget_set: Vec<usize> = forget.to_vec();
        forget_set.sort_unstable();
        forget_set.dedup();
        let retain_set: Vec<usize> = train
            .iter()
            .copied()
            .filter(|i| !forget_lookup.contains(i))
            .collect();
        let forget_users = forget_set.iter().map(|&i| ds.interactions[i].0).collect();
        let forget_items = forget_set.iter().map(|&i| ds.interactions[i].1).collect();
        Ok(DeletionRequest {
            regime,
            forget_set,
            retain_set,
            forget_users,
            forget_items,
        })
    }

    /// Check that forget and retain sets exactly partition the train split.
    pub fn validate<F: Real>(&self, ds: &InteractionDataset<F>) -> Result<()> {
        let mut seen = HashSet::new();
        for &i in self.forget_set.iter().chain(&self.retain_set) {
            if ds.split.get(i) != Some(&Split::Train) {
                return Err(Error::Integrity(format!(
                    "request index {i} is not a train interaction"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Integrity(format!(
                    "request index {i} appears in both sets"
                )));
            }
        }
        let train = ds.train_indices().len();
        if seen.len() != train {
            return Err(Error::Integrity(format!(
                "request covers {} of {train} train interactions",
                seen.len()
            )));
        }
        Ok(())
    }
}

/// Sample a deletion request: user- and item-level requests collect every
/// train interaction of the sampled entities; interaction-level samples
/// interactions directly. `fraction` is over users / items / train
/// interactions respectively.
pub fn build_deletion_request<F: Real>(
    ds: &InteractionDataset<F>,
    regime: DeletionRegime,
    fraction: f64,
    seed: u64,
) -> Result<DeletionRequest> {
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "deletion fraction {fraction} outside (0, 1)"
        )));
    }
    let train = ds.train_indices();
    if train.is_empty() {
        return Err(Error::Integrity("train split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |universe: usize, count: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut ids: Vec<usize> = (0..universe).collect();
        ids.shuffle(rng);
        ids.truncate(count);
        ids
    };
    let (forget_set, forget_users, forget_items): (Vec<usize>, BTreeSet<usize>, BTreeSet<usize>) =
        match regime {
            DeletionRegime::UserLevel => {
                let k = (fraction * ds.n_users as f64).ceil() as usize;
                if k == 0 {
                    return Err(Error::InvalidArgument("fraction selects zero users".into()));
                }
                let users: BTreeSet<usize> = sample(ds.n_users, k, &mut rng).into_iter().collect();
                let forget: Vec<usize> = train
                    .iter()
                    .copied()
                    .filter(|&i| users.contains(&ds.interactions[i].0))
                    .collect();
                let items = forget.iter().map(|&i| ds.interactions[i].1).collect();
                (forget, users, items)
            }
            DeletionRegime::ItemLevel => {
                let k = (fraction * ds.n_items as f64).ceil() as usize;
                if k == 0 {
                    return Err(Error::InvalidArgument("fraction selects zero items".into()));
                }
                let items: BTreeSet<usize> = sample(ds.n_items, k, &mut rng).into_iter().collect();
                let forget: Vec<usize> = train
                    .iter()
                    .copied()
                    .filter(|&i| items.contains(&ds.interactions[i].1))
                    .collect();
                let users = forget.iter().map(|&i| ds.interactions[i].0).collect();
                (forget, users, items)
            }
            DeletionRegime::InteractionLevel => {
                let k = (fraction * train.len() as f64).ceil() as usize;
                if k == 0 {
                    return Err(Error::InvalidArgument(
                        "fraction selects zero interactions".into(),
                    ));
                }
                let mut pool = train.clone();
                pool.shuffle(&mut rng);
                pool.truncate(k);
                pool.sort_unstable();
                let users = pool.iter().map(|&i| ds.interactions[i].0).collect();
                let items = pool.iter().map(|&i| ds.interactions[i].1).collect();
                (pool, users, items)
            }
        };
    let forget_lookup: HashSet<usize> = forget_set.iter().copied().collect();
    let retain_set: Vec<usize> = train
        .iter()
        .copied()
        .filter(|i| !forget_lookup.contains(i))
        .collect();
    Ok(DeletionRequest {
        regime,
        forget_set,
        retain_set,
        forget_users,
        forget_items,
    })
}

/// Synthetic generator configuration. Users and items get latent clusters;
/// interactions prefer within-cluster items with probability
/// `cluster_affinity`, and item features are cluster centroids plus
/// Gaussian noise, so modality signal genuinely predicts preference.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub interactions_per_user: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub feature_noise: f64,
    #[serde(default = "default_affinity")]
    pub cluster_affinity: f64,
}

fn default_affinity() -> f64 {
    0.9
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 500,
            n_items: 200,
            n_clusters: 8,
            interactions_per_user: 20,
            image_dim: 16,
            text_dim: 16,
            feature_noise: 0.1,
            cluster_affinity: default_affinity(),
        }
    }
}

use crate::rng::gaussian;

pub fn generate_synthetic<F: Real>(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<InteractionDataset<F>> {
    if cfg.n_clusters == 0 || cfg.n_clusters > cfg.n_users.min(cfg.n_items) {
        return Err(Error::InvalidArgument(format!(
            "n_clusters {} outside 1..=min(n_users, n_items)",
            cfg.n_clusters
        )));
    }
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.image_dim == 0 || cfg.text_dim == 0 {
        return Err(Error::InvalidArgument("zero-sized synthetic config".into()));
    }
    if cfg.interactions_per_user == 0 || cfg.interactions_per_user > cfg.n_items {
        return Err(Error::InvalidArgument(
            "interactions_per_user outside 1..=n_items".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.cluster_affinity) {
        return Err(Error::InvalidArgument("cluster_affinity outside [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_clusters: Vec<usize> = (0..cfg.n_users).map(|u| u % cfg.n_clusters).collect();
    let item_clusters: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_clusters).collect();
    let mut cluster_items: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clusters];
    for (i, &c) in item_clusters.iter().enumerate() {
        cluster_items[c].push(i);
    }

    let centroid = |dim: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..cfg.n_clusters)
            .map(|_| (0..dim).map(|_| gaussian(rng)).collect())
            .collect()
    };
    let img_centroids = centroid(cfg.image_dim, &mut rng);
    let txt_centroids = centroid(cfg.text_dim, &mut rng);

    let features = |dim: usize, centroids: &[Vec<f64>], rng: &mut ChaCha8Rng| -> Matrix<F> {
        let mut m = Matrix::zeros(cfg.n_items, dim);
        for i in 0..cfg.n_items {
            let c = &centroids[item_clusters[i]];
            for j in 0..dim {
                let v = c[j] + cfg.feature_noise * gaussian(rng);
                m.set(i, j, F::from_f64_c(v));
            }
        }
        m
    };
    let image_features = features(cfg.image_dim, &img_centroids, &mut rng);
    let text_features = features(cfg.text_dim, &txt_centroids, &mut rng);

    let mut interactions: Vec<(usize, usize)> = Vec::new();
    for u in 0..cfg.n_users {
        let own = &cluster_items[user_clusters[u]];
        let mut chosen: HashSet<usize> = HashSet::new();
        let mut attempts = 0usize;
        while chosen.len() < cfg.interactions_per_user && attempts < 200 * cfg.interactions_per_user
        {
            attempts += 1;
            let item = if rng.gen::<f64>() < cfg.cluster_affinity {
                own[rng.gen_range(0..own.len())]
            } else {
                rng.gen_range(0..cfg.n_items)
            };
            chosen.insert(item);
        }
        // Degenerate configs can exhaust the retry budget; fill with the
        // first unused items so the per-user count is exact.
        for item in 0..cfg.n_items {
            if chosen.len() >= cfg.interactions_per_user {
                break;
            }
            chosen.insert(item);
        }
        let mut items: Vec<usize> = chosen.into_iter().collect();
        items.sort_unstable();
        for item in items {
            interactions.push((u, item));
        }
    }

    let n = interactions.len();
    let ds = InteractionDataset {
        n_users: cfg.n_users,
        n_items: cfg.n_items,
        interactions,
        split: vec![Split::Train; n],
        image_features,
        text_features,
        orig_user_ids: (0..cfg.n_users as u64).collect(),
        orig_item_ids: (0..cfg.n_items as u64).collect(),
        user_clusters: Some(user_clusters),
        item_clusters: Some(item_clusters),
    };
    ds.validate()?;
    Ok(ds)
}

/// Record of an injected backdoor: one fake trigger item plus the poisoned
/// users given train interactions with it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackdoorSpec {
    pub trigger_item: usize,
    pub poisoned_users: Vec<usize>,
    pub injected_interactions: Vec<usize>,
}

/// Append one trigger item (features = mean item feature per modality) and
/// give each sampled poisoned user a train interaction with it.
pub fn inject_backdoor<F: Real>(
    ds: &InteractionDataset<F>,
    n_poisoned_users: usize,
    seed: u64,
) -> Result<(InteractionDataset<F>, BackdoorSpec)> {
    if n_poisoned_users > ds.n_users {
        return Err(Error::InvalidArgument(format!(
            "n_poisoned_users {} exceeds n_users {}",
            n_poisoned_users, ds.n_users
        )));
    }
    if ds.train_indices().is_empty() {
        return Err(Error::Integrity("train split is empty".into()));
    }
    let mut out = ds.clone();
    let trigger = ds.n_items;
    out.n_items += 1;

    let mean_row = |m: &Matrix<F>| -> Vec<F> {
        let mut mean = vec![F::zero(); m.cols()];
        for r in 0..m.rows() {
            for (j, v) in m.row(r).iter().enumerate() {
                mean[j] += *v;
            }
        }
        let n = F::from_usize(m.rows()).unwrap();
        for v in &mut mean {
            *v /= n;
        }
        mean
    };
    let extend = |m: &Matrix<F>| -> Matrix<F> {
        let mean = mean_row(m);
        let mut data = m.data().to_vec();
        data.extend_from_slice(&mean);
        Matrix::from_vec(m.rows() + 1, m.cols(), data)
    };
    out.image_features = extend(&ds.image_features);
    out.text_features = extend(&ds.text_features);
    out.orig_item_ids.push(
        ds.orig_item_ids.iter().max().map(|m| m + 1).unwrap_or(0),
    );
    if let Some(ic) = &mut out.item_clusters {
        ic.push(0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users: Vec<usize> = (0..ds.n_users).collect();
    users.shuffle(&mut rng);
    users.truncate(n_poisoned_users);
    users.sort_unstable();

    let mut injected = Vec::with_capacity(n_poisoned_users);
    for &u in &users {
        injected.push(out.interactions.len());
        out.interactions.push((u, trigger));
        out.split.push(Split::Train);
    }
    out.validate()?;
    Ok((
        out,
        BackdoorSpec {
            trigger_item: trigger,
            poisoned_users: users,
            injected_interactions: injected,
        },
    ))
}

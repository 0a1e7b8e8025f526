//! The multimodal recommender backbone: a named parameter registry with
//! three item branches (ID, image, text), a softmax fusion gate with a
//! per-branch scaling matrix, and light graph propagation on the ID branch.
//!
//! Checkpoints are a directory of CSV matrices (one per module) plus a JSON
//! manifest; byte-stable across runs with the same seed.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DeletionRequest, InteractionDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{dot, Matrix};
use crate::rng::gaussian;
use crate::scalar::Real;

pub const CHECKPOINT_SCHEMA_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    User,
    Id,
    Image,
    Text,
    Fusion,
}

/// One named parameter matrix. The branch tag is immutable after
/// construction and drives modality scaling during unlearning.
#[derive(Clone, Debug)]
pub struct ParameterModule<F> {
    pub id: String,
    pub branch: Branch,
    pub values: Matrix<F>,
}

impl<F: Real> ParameterModule<F> {
    pub fn size(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_depth")]
    pub propagation_depth: usize,
    #[serde(default = "default_l2")]
    pub l2_weight: f64,
}

fn default_dim() -> usize {
    64
}
fn default_depth() -> usize {
    2
}
fn default_l2() -> f64 {
    1e-4
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: default_dim(),
            propagation_depth: default_depth(),
            l2_weight: default_l2(),
        }
    }
}

// Fixed module registry order.
pub const USER_EMB: usize = 0;
pub const ITEM_EMB_ID: usize = 1;
pub const ITEM_EMB_IMAGE: usize = 2;
pub const ITEM_EMB_TEXT: usize = 3;
pub const FUSION_GATE: usize = 4;
pub const FUSION_SCALE: usize = 5;
pub const N_MODULES: usize = 6;

/// Branch order used for gates, scales, and the CKA matrix.
pub const BRANCHES: [&str; 3] = ["id", "image", "text"];

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub modules: Vec<ParameterModule<F>>,
    pub graph: Graph,
    pub graph_tag: String,
    pub image_features: Matrix<F>,
    pub text_features: Matrix<F>,
    pub n_users: usize,
    pub n_items: usize,
    pub seed: u64,
}

/// Propagated ID-branch embeddings: users stacked above items.
#[derive(Clone, Debug)]
pub struct Propagated<F> {
    pub table: Matrix<F>,
    pub n_users: usize,
}

impl<F: Real> Propagated<F> {
    pub fn user(&self, u: usize) -> &[F] {
        self.table.row(u)
    }

    pub fn item(&self, i: usize) -> &[F] {
        self.table.row(self.n_users + i)
    }
}

/// Initialize the parameter registry. Embeddings and projections draw from
/// a seeded zero-mean Gaussian with scale 0.1; gate logits start equal and
/// the per-branch scaling rows start at one, so the initial fusion is the
/// plain mean of the three branches.
pub fn init_model<F: Real>(
    ds: &InteractionDataset<F>,
    retain: &[usize],
    config: &ModelConfig,
    seed: u64,
) -> Result<Model<F>> {
    if config.embedding_dim == 0 {
        return Err(Error::InvalidArgument("embedding_dim must be positive".into()));
    }
    for &idx in retain {
        if idx >= ds.interactions.len() {
            return Err(Error::InvalidArgument(format!(
                "retain index {idx} out of range"
            )));
        }
    }
    let d = config.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Matrix<F> {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = F::from_f64_c(0.1 * gaussian(rng));
        }
        m
    };
    let user_emb = init(ds.n_users, d, &mut rng);
    let item_emb_id = init(ds.n_items, d, &mut rng);
    let item_emb_image = init(ds.image_features.cols(), d, &mut rng);
    let item_emb_text = init(ds.text_features.cols(), d, &mut rng);
    let fusion_gate = Matrix::zeros(1, 3);
    let fusion_scale = Matrix::filled(3, d, F::one());

    let edges: Vec<(usize, usize)> = retain.iter().map(|&i| ds.interactions[i]).collect();
    let graph = Graph::build(ds.n_users, ds.n_items, &edges);

    let module = |id: &str, branch: Branch, values: Matrix<F>| ParameterModule {
        id: id.to_string(),
        branch,
        values,
    };
    Ok(Model {
        config: config.clone(),
        modules: vec![
            module("user_emb", Branch::User, user_emb),
            module("item_emb_id", Branch::Id, item_emb_id),
            module("item_emb_image", Branch::Image, item_emb_image),
            module("item_emb_text", Branch::Text, item_emb_text),
            module("fusion_gate", Branch::Fusion, fusion_gate),
            module("fusion_scale", Branch::Fusion, fusion_scale),
        ],
        graph,
        graph_tag: "train".into(),
        image_features: ds.image_features.clone(),
        text_features: ds.text_features.clone(),
        n_users: ds.n_users,
        n_items: ds.n_items,
        seed,
    })
}

fn softmax3<F: Real>(logits: &[F]) -> [F; 3] {
    let mut max = logits[0];
    for &x in &logits[1..] {
        if x > max {
            max = x;
        }
    }
    let mut e = [F::zero(); 3];
    let mut sum = F::zero();
    for (k, &x) in logits.iter().enumerate() {
        let v = (x - max).exp();
        e[k] = v;
        sum += v;
    }
    [e[0] / sum, e[1] / sum, e[2] / sum]
}

impl<F: Real> Model<F> {
    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn module(&self, k: usize) -> &ParameterModule<F> {
        &self.modules[k]
    }

    pub fn module_mut(&mut self, k: usize) -> &mut ParameterModule<F> {
        &mut self.modules[k]
    }

    pub fn module_index(&self, id: &str) -> Option<usize> {
        self.modules.iter().position(|m| m.id == id)
    }

    /// Rebuild the graph from a new interaction set (e.g. the retain set
    /// once a deletion request takes effect).
    pub fn rebuild_graph(&mut self, ds: &InteractionDataset<F>, interactions: &[usize], tag: &str) {
        let edges: Vec<(usize, usize)> = interactions.iter().map(|&i| ds.interactions[i]).collect();
        self.graph = Graph::build(self.n_users, self.n_items, &edges);
        self.graph_tag = tag.to_string();
    }

    /// Run graph propagation over the stacked user/item ID embeddings.
    pub fn propagate(&self) -> Propagated<F> {
        let d = self.embedding_dim();
        let n = self.n_users + self.n_items;
        let mut stacked = Matrix::zeros(n, d);
        for u in 0..self.n_users {
            stacked.row_mut(u).copy_from_slice(self.modules[USER_EMB].values.row(u));
        }
        for i in 0..self.n_items {
            stacked
                .row_mut(self.n_users + i)
                .copy_from_slice(self.modules[ITEM_EMB_ID].values.row(i));
        }
        Propagated {
            table: self.graph.propagate(&stacked, self.config.propagation_depth),
            n_users: self.n_users,
        }
    }

    /// Softmax of the fusion gate logits, in branch order [id, image, text].
    pub fn gate_weights(&self) -> [F; 3] {
        softmax3(self.modules[FUSION_GATE].values.row(0))
    }

    /// Projected feature vector for one item on one modality branch.
    pub fn projected_feature(&self, module: usize, item: usize) -> Vec<F> {
        let (features, proj) = match module {
            ITEM_EMB_IMAGE => (&self.image_features, &self.modules[ITEM_EMB_IMAGE].values),
            ITEM_EMB_TEXT => (&self.text_features, &self.modules[ITEM_EMB_TEXT].values),
            _ => panic!("projected_feature only applies to image/text modules"),
        };
        let d = self.embedding_dim();
        let x = features.row(item);
        let mut out = vec![F::zero(); d];
        for (k, &xk) in x.iter().enumerate() {
            let row = proj.row(k);
            for j in 0..d {
                out[j] += xk * row[j];
            }
        }
        out
    }

    /// Per-branch representations of one item: propagated ID embedding,
    /// projected image embedding, projected text embedding.
    pub fn item_branches(&self, prop: &Propagated<F>, item: usize) -> [Vec<F>; 3] {
        [
            prop.item(item).to_vec(),
            self.projected_feature(ITEM_EMB_IMAGE, item),
            self.projected_feature(ITEM_EMB_TEXT, item),
        ]
    }

    pub fn fuse_branches(&self, branches: &[Vec<F>; 3]) -> Vec<F> {
        let g = self.gate_weights();
        let scale = &self.modules[FUSION_SCALE].values;
        let d = self.embedding_dim();
        let mut fused = vec![F::zero(); d];
        for m in 0..3 {
            let s = scale.row(m);
            for j in 0..d {
                fused[j] += g[m] * s[j] * branches[m][j];
            }
        }
        fused
    }

    /// Fused representation plus the three raw branch vectors.
    pub fn item_representation(&self, prop: &Propagated<F>, item: usize) -> (Vec<F>, [Vec<F>; 3]) {
        let branches = self.item_branches(prop, item);
        (self.fuse_branches(&branches), branches)
    }

    pub fn score_with(&self, prop: &Propagated<F>, user: usize, item: usize) -> F {
        let (fused, _) = self.item_representation(prop, item);
        dot(prop.user(user), &fused)
    }

    /// Inner-product ranking score; propagation recomputed per call. Use
    /// `propagate()` + `score_with` / `fused_item_matrix` in loops.
    pub fn score(&self, user: usize, item: usize) -> F {
        let prop = self.propagate();
        self.score_with(&prop, user, item)
    }

    /// Fused representations for every item, rows aligned with item ids.
    pub fn fused_item_matrix(&self, prop: &Propagated<F>) -> Matrix<F> {
        let d = self.embedding_dim();
        let mut out = Matrix::zeros(self.n_items, d);
        for i in 0..self.n_items {
            let (fused, _) = self.item_representation(prop, i);
            out.row_mut(i).copy_from_slice(&fused);
        }
        out
    }

    pub fn module_sizes(&self) -> Vec<(String, usize)> {
        self.modules.iter().map(|m| (m.id.clone(), m.size())).collect()
    }

    /// Registries match: same module ids, branches, and shapes.
    pub fn same_registry(&self, other: &Model<F>) -> bool {
        self.modules.len() == other.modules.len()
            && self.modules.iter().zip(&other.modules).all(|(a, b)| {
                a.id == b.id
                    && a.branch == b.branch
                    && a.values.rows() == b.values.rows()
                    && a.values.cols() == b.values.cols()
            })
    }
}

#[derive(Serialize, Deserialize)]
struct ModuleEntry {
    id: String,
    branch: Branch,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: String,
    embedding_dim: usize,
    propagation_depth: usize,
    l2_weight: f64,
    n_users: usize,
    n_items: usize,
    image_dim: usize,
    text_dim: usize,
    graph: String,
    seed: u64,
    modules: Vec<ModuleEntry>,
}

/// Serialize JSON with sorted keys and a trailing newline (byte-stable).
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(format!("{}\n", serde_json::to_string_pretty(&v)?))
}

pub fn save_checkpoint<F: Real>(model: &Model<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for m in &model.modules {
        let file = format!("{}.csv", m.id);
        let mut text = String::new();
        for r in 0..m.values.rows() {
            let row: Vec<String> = m.values.row(r).iter().map(|v| format!("{v}")).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(dir.join(&file), text)?;
        entries.push(ModuleEntry {
            id: m.id.clone(),
            branch: m.branch,
            rows: m.values.rows(),
            cols: m.values.cols(),
            file,
        });
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION.into(),
        embedding_dim: model.config.embedding_dim,
        propagation_depth: model.config.propagation_depth,
        l2_weight: model.config.l2_weight,
        n_users: model.n_users,
        n_items: model.n_items,
        image_dim: model.image_features.cols(),
        text_dim: model.text_features.cols(),
        graph: model.graph_tag.clone(),
        seed: model.seed,
        modules: entries,
    };
    fs::write(dir.join("manifest.json"), to_canonical_json(&manifest)?)?;
    Ok(())
}

/// Load a checkpoint against its originating dataset. The graph is rebuilt
/// from the train split (tag `train`) or from the request's retain set
/// (tag `retain`).
pub fn load_checkpoint<F: Real>(
    dir: &Path,
    ds: &InteractionDataset<F>,
    request: Option<&DeletionRequest>,
) -> Result<Model<F>> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.schema_version.split('.').next() != Some("1") {
        return Err(Error::InvalidArgument(format!(
            "unsupported checkpoint schema version {}",
            manifest.schema_version
        )));
    }
    if manifest.n_users != ds.n_users || manifest.n_items != ds.n_items {
        return Err(Error::Integrity(format!(
            "checkpoint shape ({} users, {} items) does not match dataset ({}, {})",
            manifest.n_users, manifest.n_items, ds.n_users, ds.n_items
        )));
    }
    let mut modules = Vec::new();
    for entry in &manifest.modules {
        let text = fs::read_to_string(dir.join(&entry.file))?;
        let mut data: Vec<F> = Vec::with_capacity(entry.rows * entry.cols);
        for (lineno, line) in text.lines().enumerate() {
            for tok in line.split(',') {
                let v = tok.parse::<F>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad value {tok:?} in {}", entry.file),
                })?;
                data.push(v);
            }
        }
        if data.len() != entry.rows * entry.cols {
            return Err(Error::Integrity(format!(
                "module {} has {} values, expected {}",
                entry.id,
                data.len(),
                entry.rows * entry.cols
            )));
        }
        modules.push(ParameterModule {
            id: entry.id.clone(),
            branch: entry.branch,
            values: Matrix::from_vec(entry.rows, entry.cols, data),
        });
    }
    let edges: Vec<(usize, usize)> = match manifest.graph.as_str() {
        "train" => ds.train_indices().iter().map(|&i| ds.interactions[i]).collect(),
        "retain" => {
            let req = request.ok_or_else(|| {
                Error::InvalidArgument(
                    "checkpoint was saved against the retain set; a deletion request is required"
                        .into(),
                )
            })?;
            req.retain_set.iter().map(|&i| ds.interactions[i]).collect()
        }
        other => {
            return Err(Error::Integrity(format!("unknown graph tag {other:?}")));
        }
    };
    Ok(Model {
        config: ModelConfig {
            embedding_dim: manifest.embedding_dim,
            propagation_depth: manifest.propagation_depth,
            l2_weight: manifest.l2_weight,
        },
        modules,
        graph: Graph::build(ds.n_users, ds.n_items, &edges),
        graph_tag: manifest.graph,
        image_features: ds.image_features.clone(),
        text_features: ds.text_features.clone(),
        n_users: ds.n_users,
        n_items: ds.n_items,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split_dataset, SyntheticConfig};

    pub(crate) fn tiny_ds() -> InteractionDataset<f64> {
        let ds = generate_synthetic(
            &SyntheticConfig {
                n_users: 12,
                n_items: 15,
                n_clusters: 3,
                interactions_per_user: 6,
                image_dim: 4,
                text_dim: 5,
                feature_noise: 0.2,
                cluster_affinity: 0.8,
            },
            3,
        )
        .unwrap();
        split_dataset(&ds, (0.8, 0.1, 0.1), 1).unwrap()
    }

    #[test]
    fn init_dims_and_registry() {
        let ds = tiny_ds();
        let train = ds.train_indices();
        let cfg = ModelConfig::default();
        let model = init_model(&ds, &train, &cfg, 7).unwrap();
        assert_eq!(model.modules.len(), N_MODULES);
        for k in [USER_EMB, ITEM_EMB_ID, ITEM_EMB_IMAGE, ITEM_EMB_TEXT] {
            assert_eq!(model.modules[k].values.cols(), 64);
        }
        assert_eq!(model.modules[FUSION_GATE].values.cols(), 3);
        assert_eq!(model.modules[FUSION_SCALE].values.rows(), 3);
        let ids: Vec<&str> = model.modules.iter().map(|m| m.id.as_str()).collect();
        assert_eq!(
            ids,
            ["user_emb", "item_emb_id", "item_emb_image", "item_emb_text", "fusion_gate", "fusion_scale"]
        );
    }

    #[test]
    fn init_deterministic_under_seed() {
        let ds = tiny_ds();
        let train = ds.train_indices();
        let cfg = ModelConfig { embedding_dim: 8, ..Default::default() };
        let a = init_model(&ds, &train, &cfg, 7).unwrap();
        let b = init_model(&ds, &train, &cfg, 7).unwrap();
        for k in 0..N_MODULES {
            assert_eq!(a.modules[k].values, b.modules[k].values);
        }
    }

    #[test]
    fn empty_retain_falls_back_to_raw_embeddings() {
        let ds = tiny_ds();
        let cfg = ModelConfig { embedding_dim: 8, ..Default::default() };
        let model = init_model(&ds, &[], &cfg, 7).unwrap();
        let prop = model.propagate();
        for u in 0..ds.n_users {
            assert_eq!(prop.user(u), model.modules[USER_EMB].values.row(u));
        }
        for i in 0..ds.n_items {
            assert_eq!(prop.item(i), model.modules[ITEM_EMB_ID].values.row(i));
        }
    }

    #[test]
    fn equal_gate_logits_fuse_to_branch_mean() {
        let ds = tiny_ds();
        let cfg = ModelConfig { embedding_dim: 8, ..Default::default() };
        let model = init_model(&ds, &ds.train_indices(), &cfg, 7).unwrap();
        let prop = model.propagate();
        let (fused, branches) = model.item_representation(&prop, 2);
        for j in 0..8 {
            let mean = (branches[0][j] + branches[1][j] + branches[2][j]) / 3.0;
            assert!((fused[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_gate_on_zeroed_branch_gives_zero_fused() {
        let ds = tiny_ds();
        let cfg = ModelConfig { embedding_dim: 8, ..Default::default() };
        let mut model = init_model(&ds, &ds.train_indices(), &cfg, 7).unwrap();
        model.modules[ITEM_EMB_IMAGE].values.fill(0.0);
        model.modules[FUSION_GATE]
            .values
            .row_mut(0)
            .copy_from_slice(&[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]);
        let prop = model.propagate();
        let (fused, _) = model.item_representation(&prop, 1);
        assert!(fused.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_user_embedding_scores_zero_and_scores_are_linear() {
        let ds = tiny_ds();
        let cfg = ModelConfig { embedding_dim: 8, propagation_depth: 0, ..Default::default() };
        let mut model = init_model(&ds, &ds.train_indices(), &cfg, 7).unwrap();
        let s1 = model.score(3, 4);
        for v in model.modules[USER_EMB].values.row_mut(3).iter_mut() {
            *v *= 2.0;
        }
        let s2 = model.score(3, 4);
        assert!((s2 - 2.0 * s1).abs() < 1e-12);
        model.modules[USER_EMB].values.row_mut(3).fill(0.0);
        for i in 0..ds.n_items {
            assert_eq!(model.score(3, i), 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_and_byte_stable() {
        let ds = tiny_ds();
        let cfg = ModelConfig { embedding_dim: 8, ..Default::default() };
        let model = init_model(&ds, &ds.train_indices(), &cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a");
        let p2 = dir.path().join("b");
        save_checkpoint(&model, &p1).unwrap();
        let loaded = load_checkpoint(&p1, &ds, None).unwrap();
        for k in 0..N_MODULES {
            assert_eq!(model.modules[k].values, loaded.modules[k].values);
        }
        save_checkpoint(&loaded, &p2).unwrap();
        for m in &model.modules {
            let f = format!("{}.csv", m.id);
            assert_eq!(
                fs::read(p1.join(&f)).unwrap(),
                fs::read(p2.join(&f)).unwrap()
            );
        }
        assert_eq!(
            fs::read(p1.join("manifest.json")).unwrap(),
            fs::read(p2.join("manifest.json")).unwrap()
        );
    }
}

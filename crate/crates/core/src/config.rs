//! Run configuration: one self-describing JSON file per run, echoed into
//! every output for provenance. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_deletion_request, generate_synthetic, inject_backdoor, load_interactions,
    split_dataset, BackdoorSpec, DeletionRegime, DeletionRequest, InteractionDataset,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::Real;
use crate::train::TrainConfig;
use crate::unlearn::TruConfig;

pub const CONFIG_SCHEMA_VERSION: &str = "1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    /// TSV interaction log (`user<TAB>item[<TAB>timestamp]`); requires the
    /// two feature CSVs.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub image_features: Option<PathBuf>,
    #[serde(default)]
    pub text_features: Option<PathBuf>,
    /// Alternative to `path`: generate a clustered synthetic dataset.
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitBlock {
    #[serde(default = "default_train_ratio")]
    pub train: f64,
    #[serde(default = "default_side_ratio")]
    pub valid: f64,
    #[serde(default = "default_side_ratio")]
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_train_ratio() -> f64 {
    0.8
}
fn default_side_ratio() -> f64 {
    0.1
}

impl Default for SplitBlock {
    fn default() -> Self {
        SplitBlock {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackdoorBlock {
    pub n_poisoned_users: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DeletionBlock {
    #[serde(default = "default_regime")]
    pub regime: DeletionRegime,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// When present, the dataset is poisoned before training and the
    /// deletion request becomes exactly the injected interactions.
    #[serde(default)]
    pub backdoor: Option<BackdoorBlock>,
}

fn default_regime() -> DeletionRegime {
    DeletionRegime::UserLevel
}
fn default_fraction() -> f64 {
    0.05
}

impl Default for DeletionBlock {
    fn default() -> Self {
        DeletionBlock {
            regime: default_regime(),
            fraction: default_fraction(),
            seed: 0,
            backdoor: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AuditBlock {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_true")]
    pub mia: bool,
    #[serde(default = "default_true")]
    pub exposure: bool,
    #[serde(default = "default_cka_sample")]
    pub cka_sample: usize,
    #[serde(default)]
    pub cka_seed: u64,
    /// Seed for size-matching the MIA non-member pool.
    #[serde(default)]
    pub mia_seed: u64,
}

fn default_k() -> usize {
    20
}
fn default_true() -> bool {
    true
}
fn default_cka_sample() -> usize {
    128
}

impl Default for AuditBlock {
    fn default() -> Self {
        AuditBlock {
            k: 20,
            mia: true,
            exposure: true,
            cka_sample: default_cka_sample(),
            cka_seed: 0,
            mia_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: String,
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub split: SplitBlock,
    #[serde(default)]
    pub deletion: DeletionBlock,
    #[serde(default = "ModelConfig::default")]
    pub model: ModelConfig,
    #[serde(default = "TrainConfig::default")]
    pub train: TrainConfig,
    #[serde(default = "TruConfig::default")]
    pub unlearn: TruConfig,
    #[serde(default)]
    pub audit: AuditBlock,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_schema() -> String {
    CONFIG_SCHEMA_VERSION.into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version.split('.').next() != Some("1") {
            return Err(Error::InvalidArgument(format!(
                "unsupported config schema version {}",
                self.schema_version
            )));
        }
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::InvalidArgument(
                    "dataset block needs exactly one of `path` or `synthetic`".into(),
                ));
            }
            (Some(_), None) => {
                if self.dataset.image_features.is_none() || self.dataset.text_features.is_none() {
                    return Err(Error::InvalidArgument(
                        "file-backed datasets need `image_features` and `text_features`".into(),
                    ));
                }
            }
            (None, Some(_)) => {}
        }
        if !(0.0..1.0).contains(&self.deletion.fraction) || self.deletion.fraction <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "deletion fraction {} outside (0, 1)",
                self.deletion.fraction
            )));
        }
        if self.audit.k == 0 {
            return Err(Error::InvalidArgument("audit K must be positive".into()));
        }
        self.unlearn.validate()?;
        Ok(())
    }

    /// Materialize the dataset: load or generate, apply the backdoor
    /// injection when configured, then split. Deterministic in the config.
    pub fn build_dataset<F: Real>(&self) -> Result<(InteractionDataset<F>, Option<BackdoorSpec>)> {
        let base: InteractionDataset<F> = match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(path), None) => load_interactions(
                path,
                self.dataset.image_features.as_ref().unwrap(),
                self.dataset.text_features.as_ref().unwrap(),
            )?,
            (None, Some(synth)) => generate_synthetic(synth, self.dataset.seed)?,
            _ => unreachable!("validated"),
        };
        let mut ds = split_dataset(
            &base,
            (self.split.train, self.split.valid, self.split.test),
            self.split.seed,
        )?;
        let mut spec = None;
        if let Some(bkd) = &self.deletion.backdoor {
            let (poisoned, s) = inject_backdoor(&ds, bkd.n_poisoned_users, bkd.seed)?;
            ds = poisoned;
            spec = Some(s);
        }
        Ok((ds, spec))
    }

    /// The deletion request implied by the config: the injected backdoor
    /// interactions when poisoning is on, a sampled request otherwise.
    pub fn build_request<F: Real>(
        &self,
        ds: &InteractionDataset<F>,
        spec: Option<&BackdoorSpec>,
    ) -> Result<DeletionRequest> {
        match spec {
            Some(spec) => DeletionRequest::from_interactions(
                ds,
                DeletionRegime::InteractionLevel,
                &spec.injected_interactions,
            ),
            None => build_deletion_request(
                ds,
                self.deletion.regime,
                self.deletion.fraction,
                self.deletion.seed,
            ),
        }
    }
}

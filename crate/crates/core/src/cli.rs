//! Batch entry points: train, unlearn (tru | uniform | retrain), audit,
//! report. Every command is a pure function of (config, input files) and
//! produces byte-stable JSON/CSV artifacts; wall-clock timings go to a
//! separate non-deterministic file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{
    backdoor_asr, cka_branch_matrix, layer_shift_profile, mia_balanced_accuracy,
    ranking_metrics, round4, topk_exposure, AuditReport, EvalPairs, MaskPolicy,
};
use crate::config::RunConfig;
use crate::dataset::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, to_canonical_json, Model};
use crate::train::train_model;
use crate::unlearn::{
    run_retrain, run_tru, run_uniform, EpochMetrics, UnlearnReport, REPORT_SCHEMA_VERSION,
};

#[derive(Parser, Debug)]
#[command(name = "tru-rec", about = "Multimodal recommender unlearning workbench")]
pub struct Cli {
    /// Run seed for model initialization and update streams.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the original model on the train split.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Execute the config's deletion request against a checkpoint.
    Unlearn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Audit a checkpoint; with --reference also emit layer shifts.
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Merge reports into long-format and per-figure CSVs.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Tru,
    Uniform,
    Retrain,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cli.out, &cfg);
            cmd_train(&cfg, &out, cli.seed)
        }
        Command::Unlearn {
            config,
            checkpoint,
            method,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cli.out, &cfg);
            cmd_unlearn(&cfg, &checkpoint, method, &out, cli.seed)
        }
        Command::Audit {
            config,
            checkpoint,
            reference,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cli.out, &cfg);
            cmd_audit(&cfg, &checkpoint, reference.as_deref(), &out)
        }
        Command::Report { reports } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("out"));
            cmd_report(&reports, &out)
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_timings(out: &Path, name: &str, phases: &[(&str, f64)]) -> Result<()> {
    let map: BTreeMap<&str, f64> = phases.iter().copied().collect();
    fs::write(out.join(name), to_canonical_json(&map)?)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SplitMetrics {
    recall_at_k: f64,
    ndcg_at_k: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainMetricsFile {
    schema_version: String,
    seed: u64,
    config: RunConfig,
    epochs_run: usize,
    best_epoch: usize,
    valid: SplitMetrics,
    test: SplitMetrics,
}

fn split_metrics(
    model: &Model<f64>,
    ds: &InteractionDataset<f64>,
    split: Split,
    k: usize,
) -> Result<SplitMetrics> {
    let eval = EvalPairs::from_split(ds, split, MaskPolicy::MaskTrainPositives);
    let (recall, ndcg) = ranking_metrics(model, &eval, k)?;
    Ok(SplitMetrics {
        recall_at_k: round4(recall),
        ndcg_at_k: round4(ndcg),
    })
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let t0 = Instant::now();
    let (ds, _spec) = cfg.build_dataset::<f64>()?;
    let t_data = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (model, report) =
        train_model(&ds, &ds.train_indices(), &cfg.model, &cfg.train, seed)?;
    let t_train = t1.elapsed().as_secs_f64();

    save_checkpoint(&model, &out.join("checkpoint"))?;
    let metrics = TrainMetricsFile {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        seed,
        config: cfg.clone(),
        epochs_run: report.epochs_run,
        best_epoch: report.best_epoch,
        valid: split_metrics(&model, &ds, Split::Valid, cfg.audit.k)?,
        test: split_metrics(&model, &ds, Split::Test, cfg.audit.k)?,
    };
    fs::write(out.join("train_metrics.json"), to_canonical_json(&metrics)?)?;
    write_timings(out, "timings_train.json", &[("data", t_data), ("train", t_train)])
}

pub fn cmd_unlearn(
    cfg: &RunConfig,
    checkpoint: &Path,
    method: Method,
    out: &Path,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let t0 = Instant::now();
    let (ds, spec) = cfg.build_dataset::<f64>()?;
    let request = cfg.build_request(&ds, spec.as_ref())?;
    let t_data = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (model, report) = match method {
        Method::Tru => {
            let mut model = load_checkpoint(checkpoint, &ds, Some(&request))?;
            let report = run_tru(&mut model, &ds, &request, &cfg.unlearn, seed)?;
            (model, report)
        }
        Method::Uniform => {
            let mut model = load_checkpoint(checkpoint, &ds, Some(&request))?;
            let report = run_uniform(&mut model, &ds, &request, &cfg.unlearn, seed)?;
            (model, report)
        }
        Method::Retrain => {
            let (model, _train_report) =
                run_retrain(&ds, &request, &cfg.model, &cfg.train, seed)?;
            let forget =
                EvalPairs::from_interactions(&ds, &request.forget_set, MaskPolicy::MaskNone);
            let retain =
                EvalPairs::from_interactions(&ds, &request.retain_set, MaskPolicy::MaskNone);
            let (fr, fnd) = ranking_metrics(&model, &forget, 20)?;
            let (rr, rnd) = ranking_metrics(&model, &retain, 20)?;
            let report = UnlearnReport {
                schema_version: REPORT_SCHEMA_VERSION.into(),
                method: "retrain".into(),
                config: cfg.unlearn.clone(),
                seed,
                epochs: EpochMetrics {
                    retain_recall: vec![rr],
                    retain_ndcg: vec![rnd],
                    forget_recall: vec![fr],
                    forget_ndcg: vec![fnd],
                    gamma: vec![],
                    selected: vec![],
                },
                final_gamma: [1.0; 3],
                final_mask: model
                    .modules
                    .iter()
                    .map(|m| (m.id.clone(), true))
                    .collect(),
                final_capacity_fraction: 1.0,
            };
            (model, report)
        }
    };
    let t_unlearn = t1.elapsed().as_secs_f64();

    save_checkpoint(&model, &out.join("checkpoint"))?;
    fs::write(out.join("report.json"), to_canonical_json(&report)?)?;
    write_timings(
        out,
        "timings_unlearn.json",
        &[("data", t_data), ("unlearn", t_unlearn)],
    )
}

pub fn cmd_audit(
    cfg: &RunConfig,
    checkpoint: &Path,
    reference: Option<&Path>,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let (ds, spec) = cfg.build_dataset::<f64>()?;
    let request = cfg.build_request(&ds, spec.as_ref())?;
    let model = load_checkpoint(checkpoint, &ds, Some(&request))?;
    let k = cfg.audit.k;

    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    let sets: [(&str, EvalPairs); 4] = [
        (
            "valid",
            EvalPairs::from_split(&ds, Split::Valid, MaskPolicy::MaskTrainPositives),
        ),
        (
            "test",
            EvalPairs::from_split(&ds, Split::Test, MaskPolicy::MaskTrainPositives),
        ),
        (
            "retain",
            EvalPairs::from_interactions(&ds, &request.retain_set, MaskPolicy::MaskNone),
        ),
        (
            "forget",
            EvalPairs::from_interactions(&ds, &request.forget_set, MaskPolicy::MaskNone),
        ),
    ];
    for (name, eval) in &sets {
        if eval.pairs.is_empty() {
            continue;
        }
        let (r, n) = ranking_metrics(&model, eval, k)?;
        recall.insert(name.to_string(), round4(r));
        ndcg.insert(name.to_string(), round4(n));
    }

    let exposure = if cfg.audit.exposure && !request.forget_items.is_empty() {
        let targets: HashSet<usize> = request.forget_items.iter().copied().collect();
        let users: Vec<usize> = (0..ds.n_users).collect();
        Some(round4(topk_exposure(&model, &targets, k, &users)?))
    } else {
        None
    };

    let mia = if cfg.audit.mia {
        mia_for(&model, &ds, &request.forget_set, &request.forget_users, cfg.audit.mia_seed)?
    } else {
        None
    };

    let (bkd_asr, bkd_clean) = match &spec {
        Some(spec) => {
            let (asr, clean) = backdoor_asr(&model, spec, k)?;
            (Some(round4(asr)), Some(round4(clean)))
        }
        None => (None, None),
    };

    let mut cka = cka_branch_matrix(&model, cfg.audit.cka_sample, cfg.audit.cka_seed)?;
    for row in &mut cka {
        for v in row.iter_mut() {
            *v = round4(*v);
        }
    }

    let layer_shift = match reference {
        Some(path) => {
            let reference = load_checkpoint(path, &ds, Some(&request))?;
            if !model.same_registry(&reference) {
                return Err(Error::InvalidArgument(
                    "checkpoint and reference have different module registries".into(),
                ));
            }
            let mut shift = layer_shift_profile(&model, &reference)?;
            for v in shift.values_mut() {
                if let Some(x) = v {
                    *x = round4(*x);
                }
            }
            Some(shift)
        }
        None => None,
    };

    let report = AuditReport {
        recall_at_20: recall,
        ndcg_at_20: ndcg,
        exposure_at_20: exposure,
        mia_balacc: mia,
        bkd_asr_after: bkd_asr,
        bkd_clean_after: bkd_clean,
        cka,
        layer_shift,
    };
    fs::write(out.join("audit.json"), to_canonical_json(&report)?)?;
    fs::write(out.join("audit.csv"), report.to_csv())?;
    Ok(())
}

/// Members: the forget pairs. Non-members: test interactions of the forget
/// users, size-matched to the members by seeded subsampling.
fn mia_for(
    model: &Model<f64>,
    ds: &InteractionDataset<f64>,
    forget_set: &[usize],
    forget_users: &std::collections::BTreeSet<usize>,
    seed: u64,
) -> Result<Option<f64>> {
    let mut member_idx: Vec<usize> = forget_set.to_vec();
    let mut nonmember_idx: Vec<usize> = ds
        .split_indices(Split::Test)
        .into_iter()
        .filter(|&i| forget_users.contains(&ds.interactions[i].0))
        .collect();
    if member_idx.is_empty() || nonmember_idx.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matched = member_idx.len().min(nonmember_idx.len());
    member_idx.shuffle(&mut rng);
    member_idx.truncate(matched);
    nonmember_idx.shuffle(&mut rng);
    nonmember_idx.truncate(matched);
    let members = EvalPairs::from_interactions(ds, &member_idx, MaskPolicy::MaskNone);
    let nonmembers = EvalPairs::from_interactions(ds, &nonmember_idx, MaskPolicy::MaskNone);
    Ok(Some(round4(mia_balanced_accuracy(
        model,
        &members,
        &nonmembers,
    )?)))
}

pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<()> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one input".into()));
    }
    fs::create_dir_all(out)?;

    enum Parsed {
        Unlearn(UnlearnReport),
        Audit(AuditReport),
    }
    let mut runs: Vec<(String, Parsed)> = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let run = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string();
        if value.get("method").is_some() {
            let report: UnlearnReport = serde_json::from_value(value)?;
            if report.schema_version.split('.').next() != Some("1") {
                return Err(Error::InvalidArgument(format!(
                    "unsupported report schema version {} in {}",
                    report.schema_version,
                    path.display()
                )));
            }
            runs.push((run, Parsed::Unlearn(report)));
        } else if value.get("recall_at_20").is_some() {
            let report: AuditReport = serde_json::from_value(value)?;
            runs.push((run, Parsed::Audit(report)));
        } else {
            return Err(Error::InvalidArgument(format!(
                "{} is neither an unlearn report nor an audit report",
                path.display()
            )));
        }
    }
    runs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut merged = String::from("run,metric,split,value\n");
    let mut trajectories = String::from("run,epoch,retain_recall20,forget_recall20\n");
    let mut exposure = String::from("run,exposure_at_20\n");
    let mut cka = String::from("run,branch_a,branch_b,value\n");
    let mut shifts = String::from("run,module,value\n");

    for (run, parsed) in &runs {
        match parsed {
            Parsed::Unlearn(r) => {
                let last = |v: &Vec<f64>| v.last().copied().unwrap_or(f64::NAN);
                for (metric, values) in [
                    ("retain_recall20", &r.epochs.retain_recall),
                    ("retain_ndcg20", &r.epochs.retain_ndcg),
                    ("forget_recall20", &r.epochs.forget_recall),
                    ("forget_ndcg20", &r.epochs.forget_ndcg),
                ] {
                    merged.push_str(&format!("{run},{metric},final,{}\n", last(values)));
                }
                for (epoch, (rr, fr)) in r
                    .epochs
                    .retain_recall
                    .iter()
                    .zip(&r.epochs.forget_recall)
                    .enumerate()
                {
                    trajectories.push_str(&format!("{run},{epoch},{rr},{fr}\n"));
                }
            }
            Parsed::Audit(r) => {
                for line in r.to_csv().lines().skip(1) {
                    merged.push_str(&format!("{run},{line}\n"));
                }
                if let Some(v) = r.exposure_at_20 {
                    exposure.push_str(&format!("{run},{v}\n"));
                }
                for (a, name_a) in crate::model::BRANCHES.iter().enumerate() {
                    for (b, name_b) in crate::model::BRANCHES.iter().enumerate() {
                        cka.push_str(&format!("{run},{name_a},{name_b},{}\n", r.cka[a][b]));
                    }
                }
                if let Some(shift) = &r.layer_shift {
                    for (module, v) in shift {
                        let text = match v {
                            Some(x) => format!("{x}"),
                            None => "inf".into(),
                        };
                        shifts.push_str(&format!("{run},{module},{text}\n"));
                    }
                }
            }
        }
    }
    fs::write(out.join("report_merged.csv"), merged)?;
    fs::write(out.join("trajectories.csv"), trajectories)?;
    fs::write(out.join("exposure.csv"), exposure)?;
    fs::write(out.join("cka.csv"), cka)?;
    fs::write(out.join("layer_shift.csv"), shifts)?;
    Ok(())
}

//! Command-line driver. Every command resolves the run configuration, writes
//! the effective `config.json` to `--out`, and finishes with a report.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use imupose_core::model::{check_total_loss, Model};
use imupose_core::nn::ParamStore;
use imupose_core::synth::Split;
use imupose_core::tasks::{ModelEmbedder, PhysicsEmbedder, WindowEmbedder};
use imupose_core::training::StopReason;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{extract_overrides, RunConfig, SyncEmbedder};
use crate::dataset::write_generated;
use crate::error::{Error, Result};
use crate::report::{file_hash, Report};
use crate::run::{eval_retrieval, run_har, run_localize, run_sync, sync_clips, train_model, Data};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "imupose",
    version,
    about = "Contrastive IMU-pose alignment: data generation, training and evaluation",
    after_help = "Any config field can be overridden with a dotted flag, e.g. --train.batch_size 128"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config merged over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Sets every seed in the config (data, init, sampling, evaluation).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub split: Option<SplitArg>,
    /// Dataset directory; without it the configured synthetic dataset is generated in memory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into --out.
    Gen,
    /// Train on the train split with early stopping on the val split.
    Train,
    /// Bidirectional retrieval recall of a checkpoint.
    EvalRetrieval,
    /// Estimate IMU-pose offsets on clips with injected lags.
    Sync,
    /// Match IMU sets to people and sensors to body parts in multi-person scenes.
    Localize,
    /// Activity recognition from IMU embeddings (1-NN or fine-tuned head).
    Har,
    /// Finite-difference check of the full training loss gradient.
    Gradcheck,
    /// Train and evaluate each objective variant for each seed.
    Ablate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::EvalRetrieval => "eval-retrieval",
            Command::Sync => "sync",
            Command::Localize => "localize",
            Command::Har => "har",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
        }
    }
}

fn seed_overrides(seed: u64) -> Vec<(String, String)> {
    ["gen", "train", "eval", "sync", "localize", "gradcheck", "har.finetune"]
        .iter()
        .map(|s| (format!("{s}.seed"), seed.to_string()))
        .collect()
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args(args: Vec<String>) -> Result<Report> {
    let (rest, overrides) = extract_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => return Err(Error::invalid("arguments", e.to_string())),
    };
    run(cli.command, &cli.common, &overrides)
}

pub fn run(command: Command, common: &Common, overrides: &[(String, String)]) -> Result<Report> {
    let ckpt = match &common.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let mut all = common.seed.map(seed_overrides).unwrap_or_default();
    all.extend_from_slice(overrides);
    // Without an explicit config, a checkpoint's stored config is the base.
    let base = ckpt.as_ref().filter(|_| common.config.is_none()).map(|c| &c.header.config);
    let cfg = RunConfig::resolve_from(base, common.config.as_deref(), &all)?;
    cfg.write_effective(&common.out)?;
    let mut report = Report::new(command.name(), cfg.hash());
    if let Some(p) = &common.checkpoint {
        report.checkpoint_hash = Some(file_hash(p)?);
    }
    let model = |what: &str| -> Result<(Model, &ParamStore<f32>)> {
        let c = ckpt.as_ref().ok_or_else(|| Error::invalid(what, "needs --checkpoint"))?;
        Ok((c.model()?, &c.params))
    };
    let split = |default: Split| common.split.map_or(default, Split::from);
    match command {
        Command::Gen => {
            let data = Data::generate(&cfg.gen)?;
            let ds = imupose_core::synth::GeneratedDataset {
                layout: data.layout.clone(),
                class_names: data.class_names.clone(),
                sequences: data.sequences.iter().map(|(p, _)| p.clone()).collect(),
                splits: data.sequences.iter().map(|(_, s)| *s).collect(),
            };
            let manifest = write_generated(&common.out, &ds)?;
            for s in [Split::Train, Split::Val, Split::Test] {
                report.metric(format!("sequences_{}", s.as_str()), data.split(s).len() as f64);
            }
            report.metric("classes", manifest.class_names.len() as f64);
        }
        Command::Train => {
            let data = Data::load(common.data.as_deref(), &cfg)?;
            let log_path = common.out.join(TRAIN_LOG);
            let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut write_err = None;
            let started = Instant::now();
            let (model, outcome) = train_model(&cfg, &data, |e| {
                let line = serde_json::to_string(e).unwrap_or_default();
                if let Err(err) = writeln!(log, "{line}") {
                    write_err.get_or_insert(err);
                }
            })?;
            if let Some(e) = write_err {
                return Err(Error::io(&log_path, e));
            }
            let path = common.out.join(CHECKPOINT_FILE);
            save_checkpoint(&path, &model.spec, &cfg.to_json(), &outcome.best)?;
            report.checkpoint_hash = Some(file_hash(&path)?);
            report
                .metric("best_epoch", outcome.best_epoch as f64)
                .metric("best_val_r1", outcome.best_val_r1)
                .metric("epochs_run", outcome.epochs_run as f64)
                .metric("train_seconds", started.elapsed().as_secs_f64());
            let test = eval_retrieval(&cfg, &model, &outcome.best, &data, split(Split::Test))?;
            retrieval_metrics(&mut report, &test);
            let stop = match &outcome.stop {
                StopReason::MaxEpochs => "max_epochs".to_string(),
                StopReason::Patience => "patience".to_string(),
                StopReason::NonFinite { epoch, detail } => format!("non_finite at epoch {epoch}: {detail}"),
            };
            report.details = serde_json::json!({ "stop": stop, "split": split(Split::Test).as_str(), "retrieval": test });
        }
        Command::EvalRetrieval => {
            let (m, ps) = model("eval-retrieval")?;
            let data = Data::load(common.data.as_deref(), &cfg)?;
            let r = eval_retrieval(&cfg, &m, ps, &data, split(Split::Test))?;
            retrieval_metrics(&mut report, &r);
            report.details = serde_json::json!({ "split": split(Split::Test).as_str(), "retrieval": r });
        }
        Command::Sync => {
            let data = Data::load(common.data.as_deref(), &cfg)?;
            let clips = sync_clips(&data.split(split(Split::Test)), &cfg.sync)?;
            let summary = match cfg.sync.embedder {
                SyncEmbedder::Model => {
                    let (m, ps) = model("sync with the model embedder")?;
                    let e = ModelEmbedder {
                        model: &m,
                        params: ps,
                        layout: &data.layout,
                        present: crate::run::presence(&data.layout, &cfg.eval.sensors)?,
                    };
                    run_sync(&e as &dyn WindowEmbedder, &clips, &cfg.sync)?
                }
                SyncEmbedder::Physics => {
                    let frames = cfg.model.encoder.frames;
                    run_sync(&PhysicsEmbedder { layout: &data.layout, frames }, &clips, &cfg.sync)?
                }
            };
            report
                .metric("accuracy", summary.accuracy)
                .metric("mae_s", summary.mae_s)
                .metric("clips", summary.clips.len() as f64);
            report.details = serde_json::to_value(&summary.clips).unwrap_or_default();
        }
        Command::Localize => {
            let (m, ps) = model("localize")?;
            let layout = imupose_core::synth::default_layout();
            let s = run_localize(&m, ps, &layout, &cfg.localize)?;
            report
                .metric("subject_accuracy", s.subject_accuracy)
                .metric("subject_macro_f1", s.subject_macro_f1)
                .metric("part_accuracy", s.part_accuracy)
                .metric("ties", s.ties as f64);
            report.details = serde_json::to_value(&s).unwrap_or_default();
        }
        Command::Har => {
            let (m, ps) = model("har")?;
            let data = Data::load(common.data.as_deref(), &cfg)?;
            let s = run_har(&cfg, &m, ps, &data, split(Split::Test))?;
            report.metric("accuracy", s.accuracy);
            for (e, a) in s.epoch_accuracy.iter().enumerate() {
                report.metric(format!("epoch_{:03}_accuracy", e + 1), *a);
            }
            report.details = serde_json::to_value(&s).unwrap_or_default();
        }
        Command::Gradcheck => {
            let started = Instant::now();
            let r = check_total_loss(&cfg.gradcheck, &cfg.train.loss)?;
            report
                .metric("max_rel_error", r.max_rel_error)
                .metric("coordinates_checked", r.coordinates_checked as f64)
                .metric("seconds", started.elapsed().as_secs_f64());
            report.details = serde_json::to_value(&r).unwrap_or_default();
        }
        Command::Ablate => {
            let data = Data::load(common.data.as_deref(), &cfg)?;
            let mut runs = Vec::new();
            for &seed in &cfg.ablate.seeds {
                for objective in &cfg.ablate.objectives {
                    for &mtp in &cfg.ablate.mtp {
                        let mut c = cfg.clone();
                        c.train.seed = seed;
                        set_objective(&mut c, objective)?;
                        c.train.loss.use_mtp = mtp;
                        let (m, outcome) = train_model(&c, &data, |_| {})?;
                        let r = eval_retrieval(&c, &m, &outcome.best, &data, split(Split::Test))?;
                        let key = format!("{objective}/mtp={mtp}/seed={seed}");
                        report.metric(format!("{key}/r1"), r.r1_mean());
                        report.metric(format!("{key}/best_epoch"), outcome.best_epoch as f64);
                        runs.push(serde_json::json!({
                            "objective": objective, "mtp": mtp, "seed": seed, "retrieval": r,
                        }));
                    }
                }
            }
            report.details = serde_json::Value::Array(runs);
        }
    }
    report.write(&common.out)?;
    Ok(report)
}

fn retrieval_metrics(report: &mut Report, r: &imupose_core::tasks::RetrievalMetrics) {
    for (i, k) in r.ks.iter().enumerate() {
        report.metric(format!("imu_to_pose_r{k}"), r.imu_to_pose[i]);
        report.metric(format!("pose_to_imu_r{k}"), r.pose_to_imu[i]);
    }
    report.metric("r1_mean", r.r1_mean());
    report.metric("queries", r.queries as f64);
}

/// `global`, `global+local` or `global+local+token`.
pub fn set_objective(cfg: &mut RunConfig, objective: &str) -> Result<()> {
    let terms: Vec<&str> = objective.split('+').collect();
    if terms.is_empty() || terms.iter().any(|t| !["global", "local", "token"].contains(t)) {
        return Err(Error::invalid("config.ablate.objectives", format!("unknown objective '{objective}'")));
    }
    let l = &mut cfg.train.loss;
    l.use_global = terms.contains(&"global");
    l.use_local = terms.contains(&"local");
    l.use_token = terms.contains(&"token");
    Ok(())
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}

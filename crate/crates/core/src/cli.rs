//! Command-line interface: `synth`, `train`, `eval` and `selftest`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cluster::ClusterConfig;
use crate::data::{
    load_dataset, save_dataset, synth_generate, FeatureStorage, FrameAnnotation, SynthConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport, VocabSizes};
use crate::model::{Ablations, ModelConfig, ModelParams};
use crate::train::{
    infer, load_checkpoint, save_checkpoint, train_with, InferConfig, ParPrediction, TrainConfig,
    TrainState, ADAM_FILE, MODEL_FILE,
};

/// Everything a run can be configured with; loaded from a config file and
/// overridden by flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
}

/// Parses a config file: JSON when it starts with `{`, otherwise one
/// `dotted.key = value` per line (`#` starts a comment). Values are read as
/// JSON literals, falling back to plain strings.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config JSON: {e}")))?
    } else {
        let mut root = Value::Object(Default::default());
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {}: expected key = value", no + 1))
            })?;
            let val = val.trim();
            let parsed =
                serde_json::from_str(val).unwrap_or_else(|_| Value::String(val.to_string()));
            let mut slot = &mut root;
            for part in key.trim().split('.') {
                if !slot.is_object() {
                    return Err(Error::config(format!(
                        "config line {}: {key} nests under a value",
                        no + 1
                    )));
                }
                slot = slot
                    .as_object_mut()
                    .expect("object")
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()));
            }
            *slot = parsed;
        }
        root
    };
    serde_json::from_value(value).map_err(|e| Error::config(format!("config: {e}")))
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => parse_config(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pargraph",
    version,
    about = "Hierarchical relation graphs for individual, group and global activity recognition"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted groups.
    Synth(SynthArgs),
    /// Train a model (teacher-forced groups) and write a checkpoint.
    Train(TrainArgs),
    /// Run inference on a dataset and report metrics.
    Eval(EvalArgs),
    /// Run built-in gradient, metric, clustering and persistence checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_frames: Option<usize>,
    #[arg(long)]
    pub n_subjects: Option<usize>,
    #[arg(long)]
    pub n_groups: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Store features in a binary blob next to the NDJSON file.
    #[arg(long)]
    pub blob: bool,
}

#[derive(Debug, Args, Default, Clone, Copy)]
pub struct AblationArgs {
    #[arg(long)]
    pub no_residual_f: bool,
    #[arg(long)]
    pub no_fhat: bool,
    #[arg(long)]
    pub euclid_dist: bool,
    #[arg(long)]
    pub no_dbreve: bool,
    #[arg(long)]
    pub no_e: bool,
    #[arg(long)]
    pub maxpool_agg: bool,
    #[arg(long)]
    pub no_g2i: bool,
    #[arg(long)]
    pub no_g2p: bool,
}

impl AblationArgs {
    fn apply(&self, a: &mut Ablations) {
        a.no_residual_f |= self.no_residual_f;
        a.no_fhat |= self.no_fhat;
        a.euclid_dist |= self.euclid_dist;
        a.no_dbreve |= self.no_dbreve;
        a.no_e |= self.no_e;
        a.maxpool_agg |= self.maxpool_agg;
        a.no_g2i |= self.no_g2i;
        a.no_g2p |= self.no_g2p;
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training NDJSON file.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rho_ratio: Option<f64>,
    /// Continue from the checkpoint already in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub ablations: AblationArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation NDJSON file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report JSON path (the text table always goes to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-frame predictions as NDJSON.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Aggregate over annotated groups instead of detected ones.
    #[arg(long)]
    pub gt_groups: bool,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Worker threads for inference (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Evaluate frames whose id is a multiple of this stride.
    #[arg(long, default_value_t = 15)]
    pub key_stride: u64,
}

/// Dataset statistics in the layout of a dataset summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub frames: usize,
    pub subjects: usize,
    pub groups: usize,
    pub individual_labels: usize,
    pub social_labels: usize,
    pub global_labels: usize,
    pub individual_categories: usize,
    pub social_categories: usize,
    pub global_categories: usize,
}

pub fn dataset_stats(frames: &[FrameAnnotation]) -> DatasetStats {
    let groups = frames
        .iter()
        .flat_map(|f| f.groups.iter().filter(|g| g.members.len() >= 2));
    let mut cats = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for f in frames {
        cats.0
            .extend(f.subjects.iter().flat_map(|s| s.actions.iter().copied()));
        cats.1
            .extend(f.groups.iter().flat_map(|g| g.activities.iter().copied()));
        cats.2.extend(f.global_activities.iter().copied());
    }
    DatasetStats {
        frames: frames.len(),
        subjects: frames.iter().map(|f| f.num_subjects()).sum(),
        groups: groups.clone().count(),
        individual_labels: frames
            .iter()
            .flat_map(|f| &f.subjects)
            .map(|s| s.actions.len())
            .sum(),
        social_labels: groups.map(|g| g.activities.len()).sum(),
        global_labels: frames.iter().map(|f| f.global_activities.len()).sum(),
        individual_categories: cats.0.len(),
        social_categories: cats.1.len(),
        global_categories: cats.2.len(),
    }
}

impl DatasetStats {
    pub fn to_table(&self) -> String {
        format!(
            "{:>8}{:>10}{:>8}{:>12}{:>12}{:>12}\n{:>8}{:>10}{:>8}{:>12}{:>12}{:>12}\n",
            "frames",
            "subjects",
            "groups",
            "indiv.lbl",
            "social.lbl",
            "global.lbl",
            self.frames,
            self.subjects,
            self.groups,
            format!(
                "{} ({})",
                self.individual_labels, self.individual_categories
            ),
            format!("{} ({})", self.social_labels, self.social_categories),
            format!("{} ({})", self.global_labels, self.global_categories),
        )
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub const DATASET_FILE: &str = "frames.ndjson";
pub const BLOB_FILE: &str = "features.parf";

pub fn cmd_synth(args: &SynthArgs) -> Result<DatasetStats> {
    let mut cfg = load_config(args.config.as_deref())?;
    let s = &mut cfg.synth;
    s.n_frames = args.n_frames.unwrap_or(s.n_frames);
    s.n_subjects = args.n_subjects.unwrap_or(s.n_subjects);
    s.n_groups = args.n_groups.unwrap_or(s.n_groups);
    s.feature_dim = args.feature_dim.unwrap_or(s.feature_dim);
    s.noise_sigma = args.noise_sigma.unwrap_or(s.noise_sigma);
    let frames = synth_generate(&cfg.synth, args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let storage = if args.blob {
        FeatureStorage::Blob(BLOB_FILE.into())
    } else {
        FeatureStorage::Inline
    };
    save_dataset(&args.out.join(DATASET_FILE), &frames, &storage)?;
    let stats = dataset_stats(&frames);
    write_json(
        &args.out.join("stats.json"),
        &json!({ "stats": stats, "seed": args.seed, "config": cfg }),
    )?;
    print!("{}", stats.to_table());
    Ok(stats)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainState> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.train.seed = args.seed;
    cfg.train.epochs = args.epochs.unwrap_or(cfg.train.epochs);
    cfg.train.lr = args.lr.unwrap_or(cfg.train.lr);
    cfg.train.batch_size = args.batch_size.unwrap_or(cfg.train.batch_size);
    if args.hidden_dim.is_some() {
        cfg.model.hidden_dim = args.hidden_dim;
    }
    cfg.model.lambda = args.lambda.unwrap_or(cfg.model.lambda);
    cfg.model.rho_ratio = args.rho_ratio.unwrap_or(cfg.model.rho_ratio);
    args.ablations.apply(&mut cfg.model.ablations);

    let frames = load_dataset(&args.data)?;
    let first = frames
        .first()
        .ok_or_else(|| Error::data(None, "training set is empty"))?;
    cfg.model.feature_dim = first.feature_dim();

    let (params, adam, start, mut trace) = if args.resume {
        let (p, a, st) = load_checkpoint(&args.out)?;
        if p.config != cfg.model {
            warn!("resuming with the checkpoint's model config; config flags for the model are ignored");
        }
        cfg.model = p.config.clone();
        (p, Some(a), st.epoch, st.trace)
    } else {
        (
            ModelParams::init(cfg.model.clone(), args.seed)?,
            None,
            0,
            Vec::new(),
        )
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let echo = serde_json::to_value(&cfg)?;
    let log_path = args.out.join("train_log.json");
    let outcome = train_with(params, adam, &frames, &cfg.train, start, |rec| {
        trace.push(rec.clone());
        write_json(&log_path, &json!({ "config": echo, "epochs": trace }))
    })?;
    let state = TrainState {
        epoch: cfg.train.epochs.max(start),
        seed: args.seed,
        model_file: MODEL_FILE.into(),
        adam_file: ADAM_FILE.into(),
        train: cfg.train.clone(),
        trace,
        config_echo: echo,
    };
    save_checkpoint(&args.out, &outcome.params, &outcome.adam, &state)?;
    if let Some(last) = state.trace.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.mean_loss);
    }
    info!("checkpoint written to {}", args.out.display());
    Ok(state)
}

fn check_labels(frames: &[FrameAnnotation], model: &ModelConfig) -> Result<()> {
    let vocab = crate::data::LabelVocab::with_counts(
        model.num_actions,
        model.num_social,
        model.num_global,
    )?;
    for f in frames {
        f.validate(Some(&vocab)).map_err(|e| {
            Error::data(
                None,
                format!("dataset does not match the checkpoint vocabulary: {e}"),
            )
        })?;
        if f.feature_dim() != model.feature_dim {
            return Err(Error::data(
                None,
                format!(
                    "frame {}: feature dim {} but checkpoint expects {}",
                    f.frame_id,
                    f.feature_dim(),
                    model.feature_dim
                ),
            ));
        }
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let mut cfg = load_config(args.config.as_deref())?;
    let params = ModelParams::load(&args.checkpoint.join(MODEL_FILE))?;
    cfg.model = params.config.clone();
    if let Some(t) = args.tau {
        cfg.train.tau = t;
    }
    if args.key_stride == 0 {
        return Err(Error::invalid("key stride must be positive"));
    }
    let frames: Vec<FrameAnnotation> = load_dataset(&args.data)?
        .into_iter()
        .filter(|f| f.frame_id % args.key_stride == 0)
        .collect();
    if frames.is_empty() {
        return Err(Error::data(None, "no key frames to evaluate"));
    }
    check_labels(&frames, &params.config)?;
    let icfg = InferConfig {
        tau: cfg.train.tau,
        cluster: cfg.cluster.clone(),
        gt_groups: args.gt_groups,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let preds: Vec<ParPrediction> = pool.install(|| {
        frames
            .par_iter()
            .map(|f| infer(&params, f, &icfg))
            .collect::<Result<_>>()
    })?;
    let vocab = VocabSizes {
        actions: params.config.num_actions,
        social: params.config.num_social,
        global: params.config.num_global,
    };
    let report = evaluate(&preds, &frames, vocab)?;
    if let Some(path) = &args.predictions {
        let mut out = Vec::new();
        for p in &preds {
            serde_json::to_writer(&mut out, p)?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &args.out {
        let echo = json!({
            "config": cfg,
            "gt_groups": args.gt_groups,
            "key_stride": args.key_stride,
        });
        write_json(path, &json!({ "report": report, "run": echo }))?;
    }
    print!("{}", report.to_table());
    Ok(report)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| 0),
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Eval(a) => cmd_eval(a).map(|_| 0),
        Command::Selftest => {
            let report = crate::selftest::run_selftest();
            print!("{}", report.summary());
            Ok(if report.passed() { 0 } else { 3 })
        }
    };
    match result {
        Ok(code) => {
            let _ = std::io::stdout().flush();
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_config() {
        let cfg = parse_config(
            "# run\ntrain.lr = 1e-3\nmodel.ablations.no_dbreve = true\nsynth.n_frames=12\ncluster.affinity = {\"mode\": \"raw\"}\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert!(cfg.model.ablations.no_dbreve);
        assert_eq!(cfg.synth.n_frames, 12);
        assert_eq!(cfg.cluster.affinity, crate::cluster::AffinityMode::Raw);
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn json_config_and_errors() {
        let cfg = parse_config(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(parse_config("train.bogus = 1").is_err());
        assert!(parse_config("nonsense line").is_err());
        assert!(parse_config(r#"{"unknown": 1}"#).is_err());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["pargraph", "frobnicate"]), 1);
        assert_eq!(run(["pargraph", "train"]), 1);
        assert_eq!(run(["pargraph", "--help"]), 0);
    }
}

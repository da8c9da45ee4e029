//! `loopy` command line: synthetic data, training, evaluation, pair matching
//! and gradient checking.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, read_pgm, save_dataset, DataError, Split, SyntheticConfig};
use crate::evaluator::{evaluate, EvalError};
use crate::featurenet::FeatureConfig;
use crate::gradcheck::{reference_gradcheck, GradCheckOptions};
use crate::metricnet::{Aggregation, LoopyConfig, StreamMode};
use crate::model::{LoopyModel, ModelError};
use crate::tensor::GradCheckTolerance;
use crate::trainer::{Checkpoint, CheckpointError, TrainConfig, TrainError, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.lpmc";
pub const LOG_FILE: &str = "train.log";

#[derive(Debug, Parser)]
#[command(name = "loopy", version, about = "Patch matching with a symmetric unrolled recurrent metric")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic patch-pair dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a per-iteration log.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint and write a metrics JSON.
    Eval(EvalArgs),
    /// Match two PGM patches and print the per-node trace.
    Match(MatchArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationArg {
    Auto,
    MeanAll,
    LastTwo,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    pub bases: usize,
    #[arg(long, default_value_t = 4)]
    pub pairs_per_base: usize,
    #[arg(long, default_value_t = 64, value_parser = parse_patch_size)]
    pub size: usize,
    #[arg(long, env = "LOOPY_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n_nodes: usize,
    #[arg(long, default_value_t = 1024)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 0.4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub decay_interval: u64,
    #[arg(long, default_value_t = 0.9)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 70)]
    pub epochs: u64,
    #[arg(long, env = "LOOPY_SEED", default_value_t = 0)]
    pub seed: u64,
    /// 16×16 patches and a narrow FeatureNet.
    #[arg(long)]
    pub tiny: bool,
    /// Feed only the (a, b) ordering.
    #[arg(long)]
    pub single_stream: bool,
    /// Disable flip/rotation augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from a checkpoint; model and schedule flags are then ignored
    /// except `--epochs`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = AggregationArg::Auto)]
    pub aggregation: AggregationArg,
    /// Metrics JSON path; the run manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, value_enum, default_value_t = AggregationArg::Auto)]
    pub aggregation: AggregationArg,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, env = "LOOPY_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Relative tolerance; the absolute floor is 1/1000 of it.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Entries sampled per parameter group.
    #[arg(long, default_value_t = 128)]
    pub max_per_group: usize,
    /// Check every entry of every group.
    #[arg(long)]
    pub full: bool,
}

fn parse_patch_size(s: &str) -> Result<usize, String> {
    match s {
        "16" => Ok(16),
        "64" => Ok(64),
        _ => Err(format!("patch size must be 16 or 64, got {s}")),
    }
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(m: impl ToString) -> Self {
        Self { code: EXIT_USAGE, message: m.to_string() }
    }

    fn data(m: impl ToString) -> Self {
        Self { code: EXIT_DATA, message: m.to_string() }
    }

    fn numeric(m: impl ToString) -> Self {
        Self { code: EXIT_NUMERIC, message: m.to_string() }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::data(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::PatchSize { .. } | ModelError::FeatureDim { .. } => Self::data(e),
            _ => Self::numeric(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => Self::data(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::usage(e),
            TrainError::Data(_) | TrainError::PatchSize { .. } => Self::data(e),
            TrainError::Model(m) => m.into(),
            _ => Self::numeric(e),
        }
    }
}

/// Resolved configuration of one invocation, written before any compute.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub run_id: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(config.to_string().as_bytes());
        h.update(seed.to_le_bytes());
        let run_id = hex::encode(h.finalize());
        Self { command: command.into(), config, inputs, outputs, seed, run_id }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, text.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::data(format!("{}: no such file", path.display())));
    }
    Ok(())
}

fn resolve_aggregation(arg: AggregationArg, ck: &Checkpoint) -> Aggregation {
    match arg {
        AggregationArg::Auto => Aggregation::for_lambda(ck.train.lambda),
        AggregationArg::MeanAll => Aggregation::MeanAll,
        AggregationArg::LastTwo => Aggregation::MeanLastTwo,
    }
}

fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.bases < 2 {
        return Err(CliError::usage("--bases must be at least 2"));
    }
    if a.pairs_per_base == 0 {
        return Err(CliError::usage("--pairs-per-base must be positive"));
    }
    let config = json!({
        "bases": a.bases,
        "pairs_per_base": a.pairs_per_base,
        "size": a.size,
        "split": a.split,
        "max_shift": 2,
        "noise_sigma": 8.0,
    });
    create_dir(&a.out)?;
    RunManifest::new("gen-data", config, vec![], vec![a.out.clone()], a.seed).write(&a.out.join(MANIFEST_FILE))?;
    let mut cfg = SyntheticConfig::new(a.bases, a.pairs_per_base, a.size, a.seed);
    cfg.split = a.split.into();
    let ds = cfg.generate();
    save_dataset(&ds, &a.out)?;
    let (pos, neg) = ds.count_labels();
    println!("{} pairs ({pos} positive, {neg} negative) written to {}", ds.pairs.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut trainer = match &a.resume {
        Some(path) => {
            require_file(path)?;
            let mut ck = Checkpoint::load(path)?;
            ck.train.max_epochs = a.epochs;
            Trainer::from_checkpoint(ck)?
        }
        None => {
            let feature = if a.tiny { FeatureConfig::tiny() } else { FeatureConfig::full() };
            let mut loopy = LoopyConfig::new(a.n_nodes, a.hidden_dim, feature.output_dim());
            if a.single_stream {
                loopy.mode = StreamMode::SingleStream;
            }
            loopy.aggregation = Aggregation::for_lambda(a.lambda);
            loopy.validate().map_err(CliError::usage)?;
            let train = TrainConfig {
                learning_rate: a.lr,
                decay_interval: a.decay_interval,
                decay_factor: a.decay_factor,
                batch_size: a.batch,
                max_epochs: a.epochs,
                lambda: a.lambda,
                augmentation: if a.no_augment {
                    crate::data::AugmentationSpec::none()
                } else {
                    crate::data::AugmentationSpec::all()
                },
                seed: a.seed,
                ..TrainConfig::default()
            };
            train.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let model = LoopyModel::init(feature, loopy, &mut rng)?;
            Trainer::new(model, train)?
        }
    };
    let config = json!({
        "feature_config": trainer.model.feature_config().kind.name(),
        "loopy": trainer.model.loopy,
        "train": trainer.config,
        "resume": a.resume,
        "start_epoch": trainer.epoch,
    });
    let ds = load_dataset(&a.data)?;
    create_dir(&a.out)?;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join(LOG_FILE);
    RunManifest::new("train", config, vec![a.data.clone()], vec![ck_path.clone(), log_path.clone()], trainer.config.seed)
        .write(&a.out.join(MANIFEST_FILE))?;
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::data(format!("{}: {e}", log_path.display())))?;
    let result = trainer.run(&ds, |t, entries| {
        for e in entries {
            writeln!(log, "{e}").map_err(|e| TrainError::Config(format!("writing log: {e}")))?;
        }
        let last = entries.last().copied();
        if let Some(e) = last {
            eprintln!("epoch {}\titeration {}\tloss {:.6}\tacc {:.3}", t.epoch, e.iteration, e.loss, e.accuracy);
        }
        t.checkpoint().save(&ck_path).map_err(|e| TrainError::Config(e.to_string()))
    });
    match result {
        Ok(_) => {
            trainer.checkpoint().save(&ck_path)?;
            println!("checkpoint written to {}", ck_path.display());
            Ok(())
        }
        Err(TrainError::NonFiniteLoss { iteration, last_good }) => {
            last_good.save(&ck_path)?;
            Err(CliError::numeric(format!(
                "non-finite loss at iteration {iteration}; kept checkpoint from iteration {}",
                last_good.iteration
            )))
        }
        Err(TrainError::Config(m)) => Err(CliError::data(m)),
        Err(e) => Err(e.into()),
    }
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    require_file(&a.checkpoint)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let aggregation = resolve_aggregation(a.aggregation, &ck);
    let ds = load_dataset(&a.data)?;
    let size = ck.model.input_size();
    if ds.patch_size() != (size, size) {
        return Err(CliError::data(format!(
            "dataset patches are {:?} but the checkpoint expects {size}x{size}",
            ds.patch_size()
        )));
    }
    let manifest_path = a.out.with_extension("manifest.json");
    let config = json!({ "aggregation": aggregation.name(), "split": ds.split.name() });
    RunManifest::new("eval", config, vec![a.checkpoint.clone(), a.data.clone()], vec![a.out.clone()], ck.train.seed)
        .write(&manifest_path)?;
    let report = evaluate(&ck.model, &ds, aggregation)?;
    write_file(&a.out, report.to_json().as_bytes())?;
    println!("fpr95 {}\tmap {}\taggregation {}", report.fpr95, report.map, aggregation.name());
    Ok(())
}

fn match_cmd(a: &MatchArgs) -> Result<(), CliError> {
    require_file(&a.checkpoint)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let aggregation = resolve_aggregation(a.aggregation, &ck);
    let pa = read_pgm(&a.a)?;
    let pb = read_pgm(&a.b)?;
    let (score, seq) = ck.model.match_pair(&pa, &pb, aggregation)?;
    println!("score\t{score}");
    for (t, s) in seq.scores().iter().enumerate() {
        println!("node\t{}\t{s}", t + 1);
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    if !(a.tolerance > 0.0 && a.tolerance.is_finite()) {
        return Err(CliError::usage(format!("--tolerance must be positive, got {}", a.tolerance)));
    }
    let opts = GradCheckOptions {
        tolerance: GradCheckTolerance::relative(a.tolerance),
        max_per_group: if a.full { None } else { Some(a.max_per_group) },
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let report = reference_gradcheck(a.seed, &opts)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::numeric("gradient check failed"))
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Match(a) => match_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

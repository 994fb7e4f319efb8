//! Experiment driver behind the `milpool` binary.
//!
//! Every subcommand is a plain function over a resolved [`ExperimentConfig`],
//! so integration tests can run them without spawning processes. Artifacts
//! are written with sorted keys and fixed float formatting; rerunning a
//! command with the same inputs reproduces them byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use milpool::eval::{
    clip_durations, evaluate_split, format_events, reference_events, score, Metrics,
    PostProcessConfig, Report, ReportRow,
};
use milpool::model::{read_checkpoint, train, train_from, write_checkpoint, TrainConfig, TrainState};
use milpool::synth::{generate, read_dataset, write_dataset, Dataset, SynthConfig};
use milpool::{finite_difference_check, FrameScores, FrameWeights, PoolingFunction, PoolingSpec, StagePlan};

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Numerical(_) => exit::NUMERICAL,
        }
    }
}

impl From<milpool::Error> for CliError {
    fn from(e: milpool::Error) -> Self {
        use milpool::Error as E;
        match e {
            E::Config(_) | E::InvalidPlan { .. } | E::ExpUnsupported | E::AttentionWeights => {
                CliError::Config(e.to_string())
            }
            E::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "milpool", version, about = "Hierarchical multi-instance pooling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic weakly labelled dataset.
    Synth(CommonArgs),
    /// Compare analytic pooling gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Train one scorer per pooling cell and seed.
    Train(TrainArgs),
    /// Score trained scorers on the test split and write the report.
    Evaluate(EvaluateArgs),
    /// Re-render a report from saved results.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single seed, replacing the configured seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated pooling functions (max, average, linear, exp, attention).
    #[arg(long, value_delimiter = ',')]
    pub pooling: Option<Vec<String>>,
    /// Comma-separated structures, e.g. `flat,5x5x5`.
    #[arg(long, value_delimiter = ',')]
    pub structure: Option<Vec<String>>,
    /// Total clips, split 75 / 12.5 / 12.5 between train, validation and test.
    #[arg(long)]
    pub clips: Option<usize>,
    /// Frames per clip.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Dataset directory written by `synth`; otherwise data is generated per seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Continue from existing checkpoints in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory holding checkpoints from `train`.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Score the strong reference against itself instead of model output.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// `results.json` written by `evaluate`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Experiment file contents; every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub functions: Vec<PoolingFunction>,
    pub structures: Vec<StagePlan>,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub post_process: PostProcessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            functions: vec![
                PoolingFunction::LinearSoftmax,
                PoolingFunction::ExponentialSoftmax,
                PoolingFunction::Attention,
            ],
            structures: vec![StagePlan::flat(), StagePlan::new(vec![5, 5, 5]).expect("nonzero")],
            data: None,
            out: PathBuf::from("out"),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            post_process: PostProcessConfig::default(),
        }
    }
}

fn split_clips(total: usize) -> (usize, usize, usize) {
    let train = (total * 3 + 2) / 4;
    let val = (total - train) / 2;
    (train, val, total - train - val)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Loads `--config` (if any) and applies flag overrides.
    pub fn resolve(args: &CommonArgs) -> CliResult<Self> {
        let mut cfg = match &args.config {
            Some(path) => Self::from_toml(
                &fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            )?,
            None => Self::default(),
        };
        if let Some(seeds) = &args.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(seed) = args.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &args.out {
            cfg.out = out.clone();
        }
        if let Some(names) = &args.pooling {
            cfg.functions = names
                .iter()
                .map(|n| n.parse().map_err(|e: milpool::Error| CliError::Config(e.to_string())))
                .collect::<CliResult<_>>()?;
        }
        if let Some(names) = &args.structure {
            cfg.structures = names
                .iter()
                .map(|n| n.parse().map_err(|e: milpool::Error| CliError::Config(e.to_string())))
                .collect::<CliResult<_>>()?;
        }
        if let Some(total) = args.clips {
            let (train, val, test) = split_clips(total);
            cfg.synth.n_train = train;
            cfg.synth.n_val = val;
            cfg.synth.n_test = test;
        }
        if let Some(frames) = args.frames {
            cfg.synth.frames_per_clip = frames;
        }
        if args.data.is_some() {
            cfg.data = args.data.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() || self.functions.is_empty() || self.structures.is_empty() {
            return Err(CliError::Config("seeds, functions and structures must be nonempty".into()));
        }
        self.synth.validate()?;
        self.train.validate()?;
        self.post_process.validate()?;
        if self.data.is_none() {
            for plan in &self.structures {
                plan.validate(self.synth.frames_per_clip)?;
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<PoolingSpec> {
        let mut out = Vec::new();
        for plan in &self.structures {
            for &f in &self.functions {
                out.push(PoolingSpec::new(f, plan.clone()));
            }
        }
        out
    }

    /// The dataset for `seed`: the shared `data` directory, or a fresh draw.
    pub fn dataset(&self, seed: u64) -> CliResult<Dataset> {
        let ds = match &self.data {
            Some(dir) => read_dataset(dir)?,
            None => generate(&SynthConfig { seed, ..self.synth.clone() })?,
        };
        if let Some(n) = ds.train.first().map(|c| c.features.n_frames()) {
            for plan in &self.structures {
                plan.validate(n)?;
            }
        }
        Ok(ds)
    }

    pub fn train_config(&self, spec: &PoolingSpec, seed: u64) -> TrainConfig {
        TrainConfig { pooling: spec.clone(), seed, ..self.train.clone() }
    }
}

pub fn run_name(spec: &PoolingSpec, seed: u64) -> String {
    format!("{}_{}_seed{seed}", spec.function.name(), spec.plan)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn cmd_synth(args: &CommonArgs) -> CliResult<String> {
    let cfg = ExperimentConfig::resolve(args)?;
    let seed = cfg.seeds[0];
    let ds = generate(&SynthConfig { seed, ..cfg.synth.clone() })?;
    fs::create_dir_all(&cfg.out)?;
    write_dataset(&ds, &cfg.out)?;
    Ok(format!(
        "wrote {} / {} / {} clips to {}\n",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        cfg.out.display()
    ))
}

/// One gradcheck cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub function: PoolingFunction,
    pub plan: StagePlan,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    /// Max pooling is only a subgradient; it is reported but not gated.
    pub strict: bool,
    pub passed: bool,
}

/// Gradient check on `trials` random `N × 1` inputs in `(0.05, 0.95)`.
pub fn gradcheck_cell(
    function: PoolingFunction,
    plan: &StagePlan,
    frames: usize,
    trials: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> CliResult<GradcheckRow> {
    plan.validate(frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut checked, mut excluded) = (0.0f64, 0, 0);
    for _ in 0..trials {
        let x: Vec<f64> = (0..frames).map(|_| rng.random_range(0.05..0.95)).collect();
        let w: Vec<f64> = (0..frames).map(|_| rng.random_range(0.05..0.95)).collect();
        let scores = FrameScores::from_frames(&x, 1.0)?;
        let weights = match function {
            PoolingFunction::Attention => FrameWeights::from_frames(&w)?,
            f => milpool::compute_weights(&scores, f)?,
        };
        let r = finite_difference_check(&scores, &weights, function, plan, step)?;
        worst = worst.max(r.max_relative_error());
        checked += r.checked;
        excluded += r.excluded;
    }
    let strict = function != PoolingFunction::Max;
    Ok(GradcheckRow {
        function,
        plan: plan.clone(),
        max_rel_error: worst,
        checked,
        excluded,
        strict,
        passed: worst < tolerance,
    })
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<String> {
    let mut common = args.common.clone();
    // the gradient check covers every function unless told otherwise
    if common.pooling.is_none() && common.config.is_none() {
        common.pooling = Some(PoolingFunction::ALL.iter().map(|f| f.name().to_string()).collect());
    }
    if common.structure.is_none() && common.config.is_none() {
        common.structure = Some(vec!["flat".into(), "5".into(), "5x5x5".into()]);
    }
    let cfg = ExperimentConfig::resolve(&common)?;
    if !(args.step > 0.0) {
        return Err(CliError::Config(format!("step {} must be positive", args.step)));
    }
    let mut cells = Vec::new();
    for f in &cfg.functions {
        for plan in &cfg.structures {
            cells.push((*f, plan.clone()));
        }
    }
    let seed = cfg.seeds[0];
    let frames = cfg.synth.frames_per_clip;
    let rows: Vec<GradcheckRow> = cells
        .par_iter()
        .map(|(f, plan)| gradcheck_cell(*f, plan, frames, args.trials, args.step, args.tolerance, seed))
        .collect::<CliResult<_>>()?;

    let mut out = String::from("function\tstructure\tmax_rel_error\tchecked\texcluded\tstatus\n");
    for r in &rows {
        let status = match (r.strict, r.passed) {
            (false, _) => "subgradient",
            (true, true) => "pass",
            (true, false) => "FAIL",
        };
        writeln!(
            out,
            "{}\t{}\t{:.3e}\t{}\t{}\t{status}",
            r.function, r.plan, r.max_rel_error, r.checked, r.excluded
        )
        .unwrap();
    }
    if let Some(path) = &args.common.out {
        write(&path.join("gradcheck.tsv"), &out)?;
    }
    let failed = rows.iter().filter(|r| r.strict && !r.passed).count();
    if failed > 0 {
        return Err(CliError::CheckFailed(format!(
            "{out}{failed} cell(s) exceed tolerance {:e}",
            args.tolerance
        )));
    }
    Ok(out)
}

fn history_csv(state: &TrainState) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for h in &state.history {
        writeln!(out, "{},{:.10e},{:.10e}", h.epoch, h.train_loss, h.val_loss).unwrap();
    }
    out
}

/// Trains every cell for every seed, writing `<run>.ckpt` and `<run>.csv`.
pub fn cmd_train(args: &TrainArgs) -> CliResult<String> {
    let mut cfg = ExperimentConfig::resolve(&args.common)?;
    if let Some(m) = args.max_epochs {
        cfg.train.max_epochs = m;
    }
    fs::create_dir_all(&cfg.out)?;
    let jobs: Vec<(u64, PoolingSpec)> =
        cfg.seeds.iter().flat_map(|&s| cfg.cells().into_iter().map(move |c| (s, c))).collect();
    let lines: Vec<String> = jobs
        .par_iter()
        .map(|(seed, spec)| -> CliResult<String> {
            let ds = cfg.dataset(*seed)?;
            let tc = cfg.train_config(spec, *seed);
            let name = run_name(spec, *seed);
            let ckpt = cfg.out.join(format!("{name}.ckpt"));
            let state = if args.resume && ckpt.exists() {
                let (state, saved) = read_checkpoint(&ckpt)?;
                if saved.fingerprint() != tc.fingerprint() {
                    return Err(CliError::Config(format!("{}: checkpoint was trained with a different config", ckpt.display())));
                }
                train_from(&ds, &tc, state)?
            } else {
                train(&ds, &tc)?
            };
            write_checkpoint(&ckpt, &state, &tc)?;
            write(&cfg.out.join(format!("{name}.csv")), history_csv(&state))?;
            Ok(format!(
                "{name}: {} epochs, best epoch {} val loss {:.6}\n",
                state.history.len(),
                state.best_epoch,
                state.best_val_loss
            ))
        })
        .collect::<CliResult<_>>()?;
    Ok(lines.concat())
}

/// Scores each `(cell, seed)` on the test split and writes events, the
/// per-run metrics and the combined report.
pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<String> {
    let cfg = ExperimentConfig::resolve(&args.common)?;
    let ckpt_dir = args.checkpoints.clone().unwrap_or_else(|| cfg.out.clone());
    let mut rows = Vec::new();
    for spec in cfg.cells() {
        let seeds: Vec<(u64, Metrics)> = cfg
            .seeds
            .par_iter()
            .map(|&seed| -> CliResult<(u64, Metrics)> {
                let ds = cfg.dataset(seed)?;
                if ds.test.is_empty() {
                    return Err(CliError::Data("test split is empty".into()));
                }
                let name = run_name(&spec, seed);
                let (events, metrics) = if args.oracle {
                    let reference = reference_events(&ds.test, &ds.class_names, ds.frame_rate_hz);
                    let m = score(
                        &reference,
                        &reference,
                        &clip_durations(&ds.test, ds.frame_rate_hz),
                        1.0,
                    )?;
                    (reference, m)
                } else {
                    let ckpt = ckpt_dir.join(format!("{name}.ckpt"));
                    if !ckpt.exists() {
                        return Err(CliError::Data(format!("missing checkpoint {}", ckpt.display())));
                    }
                    let (state, _) = read_checkpoint(&ckpt)?;
                    evaluate_split(&ds.test, &state.best_params, &ds.class_names, ds.frame_rate_hz, &cfg.post_process)?
                };
                write(&cfg.out.join(format!("{name}.events.tsv")), format_events(&events))?;
                Ok((seed, metrics))
            })
            .collect::<CliResult<_>>()?;
        rows.push(ReportRow { structure: spec.plan.to_string(), pooling: spec.function.name().into(), seeds });
    }
    let report = Report { rows };
    write_report(&report, &cfg.out)?;
    Ok(report.to_text())
}

fn write_report(report: &Report, dir: &Path) -> CliResult<()> {
    let mut json = serde_json::to_string_pretty(report).map_err(|e| CliError::Data(e.to_string()))?;
    json.push('\n');
    write(&dir.join("results.json"), json)?;
    write(&dir.join("report.tsv"), report.to_tsv())?;
    write(&dir.join("report.txt"), report.to_text())?;
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<String> {
    let text = fs::read_to_string(&args.input)?;
    let report: Report = serde_json::from_str(&text).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(dir) = &args.out {
        write_report(&report, dir)?;
    }
    Ok(report.to_text())
}

pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    }
}

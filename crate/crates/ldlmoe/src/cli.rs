//! The `ldlmoe` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ldlmoe_core::synth::{self, SynthSpec};
use ldlmoe_core::train::{self, ModeKind, ModelKind, TrainConfig};

use crate::error::{AppError, AppResult};
use crate::io;

#[derive(Debug, Parser)]
#[command(name = "ldlmoe", version, about = "Distribution forecasting with a mixture of LSTM experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic series with known components.
    Synth(SynthArgs),
    /// Write the enhanced (distributional) labels of a series.
    Enhance(EnhanceArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out tail and print JSON metrics.
    Eval(EvalArgs),
    /// Export the component breakdown of a pattern-aware model.
    Decompose(DecomposeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    MultiExpert,
    PatternAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Continuous,
    Discrete,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator spec; defaults are used for missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Series length; changepoint positions are rescaled to match.
    #[arg(long)]
    pub len: Option<usize>,
}

/// Flags shared by the subcommands that read a series and a config.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Training config (JSON).
    #[arg(long, env = io::CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Input series (CSV).
    #[arg(long)]
    pub data: PathBuf,
    /// Series to use from a long-format file.
    #[arg(long)]
    pub series: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output CSV (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Checkpoint file to write (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the training report here (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print one line per epoch to standard error.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Series to evaluate on (CSV).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub series: Option<String>,
    /// Per-step forecasts CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Pattern-aware checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub series: Option<String>,
    /// Output CSV (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config file (or defaults) with command-line overrides applied.
fn load_config(a: &DataArgs, model: Option<ModelArg>) -> AppResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => io::read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Continuous => ModeKind::Continuous,
            ModeArg::Discrete => ModeKind::Discrete,
        };
    }
    if let Some(m) = model {
        cfg.model = match m {
            ModelArg::MultiExpert => ModelKind::MultiExpert,
            ModelArg::PatternAware => ModelKind::PatternAware,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth_cmd(a: &SynthArgs) -> AppResult<()> {
    let mut spec = match &a.config {
        Some(p) => match io::read_json::<SynthSpec>(p) {
            Err(AppError::Parse { path, message }) => {
                return Err(AppError::Usage(format!("invalid spec {}: {message}", path.display())))
            }
            other => other?,
        },
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.len {
        for cp in spec.changepoints.iter_mut() {
            cp.0 = cp.0 * n / spec.len.max(1);
        }
        spec.len = n;
    }
    let s = synth::generate(&spec)?;
    io::write_synth(a.out.as_deref(), &s)
}

fn enhance_cmd(a: &EnhanceArgs) -> AppResult<()> {
    let cfg = load_config(&a.data, None)?;
    let series = io::read_series(&a.data.data, a.data.series.as_deref())?;
    let e = train::enhance_series(&cfg, &series)?;
    io::write_enhanced(a.out.as_deref(), &e)
}

fn train_cmd(a: &TrainArgs) -> AppResult<()> {
    let cfg = load_config(&a.data, a.model)?;
    let series = io::read_series(&a.data.data, a.data.series.as_deref())?;
    let verbose = a.verbose;
    let (ckpt, report) = train::train_observed(&cfg, &series, |r| {
        if verbose {
            eprintln!(
                "epoch {:>4}  train {:.6}  val {:.6}",
                r.epoch, r.train_loss, r.val_loss
            );
        }
    })?;
    io::write_checkpoint(&a.out, &ckpt)?;
    if let Some(p) = &a.report {
        io::write_json(Some(p), &report)?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs, stdout: &mut dyn Write) -> AppResult<()> {
    let ckpt = io::read_checkpoint(&a.checkpoint)?;
    let series = io::read_series(&a.data, a.series.as_deref())?;
    let test = train::test_split(&ckpt, &series)?;
    let metrics = train::evaluate(&ckpt, &test)?;
    if let Some(out) = &a.out {
        let fc = train::forecast(&ckpt, &test, 0.9)?;
        let times: Vec<Vec<i64>> = (0..test.len())
            .map(|k| {
                let s = test.target_start(k);
                (s..s + test.horizon).map(|t| series.timestamp(t)).collect()
            })
            .collect();
        io::write_forecasts(Some(out), &times, &test.targets, &fc)?;
    }
    let text = serde_json::to_string(&metrics).map_err(|e| AppError::parse("<stdout>", e))?;
    writeln!(stdout, "{text}").map_err(|source| AppError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn decompose_cmd(a: &DecomposeArgs) -> AppResult<()> {
    let ckpt = io::read_checkpoint(&a.checkpoint)?;
    let series = io::read_series(&a.data, a.series.as_deref())?;
    let rows = train::decompose_report(&ckpt, &series)?;
    io::write_decomposition(a.out.as_deref(), &rows)
}

/// Runs a parsed command; `stdout` receives the `eval` metrics.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> AppResult<()> {
    match &cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Enhance(a) => enhance_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a, stdout),
        Command::Decompose(a) => decompose_cmd(a),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code. Help and version requests exit with 0, every other
/// parse failure with 1.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}


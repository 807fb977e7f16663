//! `teachcut` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::changepoint::BIC_EPS;
use crate::diagnostics::{self, DEFAULT_GAIN_THRESHOLD, DEFAULT_NUM_BINS};
use crate::error::{Error, Result};
use crate::margin::DEFAULT_SUPPORT_SIZE;
use crate::pipeline::{self, BatchOptions, BatchReport, PipelineConfig, SegmentsSource, Strategy};
use crate::reweight::RESCALE_EPS;
use crate::synthetic::{self, SyntheticConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "teachcut",
    version,
    about = "Trajectory-specific release of dense distillation supervision",
    after_help = "Set TEACHCUT_LOG (e.g. `info`, `debug`) to control logging on stderr."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute release masks and rescaled advantages for JSONL rollouts.
    Release(ReleaseArgs),
    /// Write binned advantage/margin statistics and the release summary as CSV.
    Diagnose(DiagnoseArgs),
    /// Generate synthetic rollouts with planted margin drops.
    Simulate(SimulateArgs),
    /// Apply the random-release control to the output of `release`.
    Permute(PermuteArgs),
    /// Evaluate the directional SNR release condition.
    Snr(SnrArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Input JSONL rollouts.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Read top-K arrays as probabilities instead of log-probabilities.
    #[arg(long)]
    probs: bool,
    /// Abort with exit status 2 on the first bad record.
    #[arg(long)]
    strict: bool,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct RuleArgs {
    /// Student top-K support used for the teacher margin.
    #[arg(long = "top-k", default_value_t = DEFAULT_SUPPORT_SIZE)]
    top_k: usize,
    /// Segment source: `record` (fall back to builtin) or `builtin`.
    #[arg(long, default_value = "record")]
    segments: String,
    /// Floor inside the profiled BIC log.
    #[arg(long, default_value_t = BIC_EPS)]
    bic_eps: f64,
    /// Floor on kept loss mass when rescaling.
    #[arg(long, default_value_t = RESCALE_EPS)]
    rescale_eps: f64,
    /// Positional bins for diagnostics.
    #[arg(long, default_value_t = DEFAULT_NUM_BINS)]
    bins: usize,
    /// BIC gain threshold reported in the release summary.
    #[arg(long, default_value_t = DEFAULT_GAIN_THRESHOLD)]
    gain_threshold: f64,
}

impl RuleArgs {
    fn config(&self, strategy: Strategy) -> Result<PipelineConfig> {
        let config = PipelineConfig {
            support_size: self.top_k,
            bic_eps: self.bic_eps,
            rescale_eps: self.rescale_eps,
            num_bins: self.bins,
            gain_threshold: self.gain_threshold,
            strategy,
            segments_source: self.segments.parse::<SegmentsSource>()?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct ReleaseArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output JSONL (input records plus a `release` object).
    #[arg(long = "out", value_name = "PATH")]
    output: PathBuf,
    #[command(flatten)]
    rule: RuleArgs,
    /// Masking strategy: bic, full, fixed:K (or fixed with --prefix-tokens), random.
    #[arg(long, default_value = "bic")]
    strategy: String,
    /// Tokens kept by the fixed-prefix strategy.
    #[arg(long)]
    prefix_tokens: Option<usize>,
    /// Seed for the random-release permutation [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output directory for bins.csv, margin_bins.csv and summary.csv.
    #[arg(long = "out", value_name = "DIR")]
    output: PathBuf,
    #[command(flatten)]
    rule: RuleArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output JSONL rollouts.
    #[arg(long = "out", value_name = "PATH")]
    output: PathBuf,
    /// Ground-truth sidecar [default: ground_truth.jsonl next to --out].
    #[arg(long, value_name = "PATH")]
    truth: Option<PathBuf>,
    /// Number of rollouts.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Segments per rollout.
    #[arg(long, default_value_t = 6)]
    n: usize,
    /// Last segment before the planted drop; omit for no change.
    #[arg(long)]
    tau: Option<usize>,
    /// Tokens per segment.
    #[arg(long, default_value_t = 10)]
    tokens_per_segment: usize,
    /// Mean token margin before the drop (everywhere without --tau).
    #[arg(long, default_value_t = 2.0)]
    pre: f64,
    /// Mean token margin after the drop.
    #[arg(long, default_value_t = 0.0)]
    post: f64,
    /// Per-token margin noise std (floored at zero margin).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Candidates per position.
    #[arg(long = "top-k", default_value_t = DEFAULT_SUPPORT_SIZE)]
    top_k: usize,
    /// Batch seed; each rollout derives its own.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct PermuteArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output JSONL with permuted release points.
    #[arg(long = "out", value_name = "PATH")]
    output: PathBuf,
    #[command(flatten)]
    rule: RuleArgs,
    /// Permutation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SnrArgs {
    /// Directional signal of the retained prefix.
    #[arg(long, allow_negative_numbers = true)]
    mp: f64,
    /// Directional variance of the retained prefix (> 0).
    #[arg(long)]
    vp: f64,
    /// Directional signal of the released suffix.
    #[arg(long, allow_negative_numbers = true)]
    mr: f64,
    /// Directional variance of the released suffix (>= 0).
    #[arg(long)]
    vr: f64,
    /// Also write the report as CSV.
    #[arg(long = "out", value_name = "PATH")]
    output: Option<PathBuf>,
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("TEACHCUT_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(io::stderr)
        .try_init();
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Record { .. } => EXIT_DATA,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Release(args) => release(args),
        Command::Diagnose(args) => diagnose(args),
        Command::Simulate(args) => simulate(args),
        Command::Permute(args) => permute(args),
        Command::Snr(args) => snr(args),
    }
}

fn with_jobs<T: Send>(jobs: Option<usize>, work: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(jobs);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(work)
}

fn open_input(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(|f| BufReader::with_capacity(1 << 20, f))
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

fn check_output_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Error::Config(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn create_output(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(|f| BufWriter::with_capacity(1 << 20, f))
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))
}

fn parse_strategy(args: &ReleaseArgs) -> Result<Strategy> {
    let strategy = match (args.strategy.as_str(), args.prefix_tokens) {
        ("fixed", Some(k)) => format!("fixed:{k}"),
        ("fixed", None) => {
            return Err(Error::Config("strategy `fixed` needs --prefix-tokens or fixed:K".into()))
        }
        (s, Some(_)) if s.starts_with("fixed:") => {
            return Err(Error::Config("--prefix-tokens and fixed:K are mutually exclusive".into()))
        }
        (_, Some(_)) => {
            return Err(Error::Config("--prefix-tokens only applies to the fixed strategy".into()))
        }
        (s, None) => s.to_string(),
    };
    let strategy: Strategy = strategy.parse()?;
    match (strategy, args.seed) {
        (Strategy::RandomRelease { .. }, Some(_)) if args.strategy.contains(':') => Err(Error::Config(
            "--seed and random:SEED are mutually exclusive".into(),
        )),
        (Strategy::RandomRelease { .. }, Some(seed)) => Ok(Strategy::RandomRelease { seed }),
        (_, Some(_)) if !matches!(strategy, Strategy::RandomRelease { .. }) => {
            Err(Error::Config("--seed only applies to the random strategy".into()))
        }
        _ => Ok(strategy),
    }
}

fn print_report(report: &BatchReport) {
    eprintln!(
        "{}",
        serde_json::to_string(report).expect("report serialization cannot fail")
    );
}

fn release(args: ReleaseArgs) -> Result<()> {
    let config = args.rule.config(parse_strategy(&args)?)?;
    let input = open_input(&args.input.input)?;
    check_output_parent(&args.output)?;
    let output = create_output(&args.output)?;
    let options = BatchOptions {
        strict: args.input.strict,
        probs: args.input.probs,
    };
    let report = with_jobs(args.input.jobs, || pipeline::process_batch(input, output, &config, &options))?;
    print_report(&report);
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let config = args.rule.config(Strategy::BicRelease)?;
    let input = open_input(&args.input.input)?;
    if !args.output.is_dir() {
        return Err(Error::Config(format!(
            "output directory {} does not exist",
            args.output.display()
        )));
    }
    let options = BatchOptions {
        strict: args.input.strict,
        probs: args.input.probs,
    };
    let diagnosis = with_jobs(args.input.jobs, || pipeline::diagnose_batch(input, &config, &options))?;
    diagnostics::write_bins_csv(&diagnosis.advantages, create_output(&args.output.join("bins.csv"))?)?;
    diagnostics::write_bins_csv(&diagnosis.margins, create_output(&args.output.join("margin_bins.csv"))?)?;
    diagnostics::write_summary_csv(&diagnosis.summary, create_output(&args.output.join("summary.csv"))?)?;
    eprintln!(
        "{}",
        serde_json::json!({"rollouts": diagnosis.summary.num_rollouts, "errors": diagnosis.errors})
    );
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let config = SyntheticConfig {
        num_segments: args.n,
        tokens_per_segment: args.tokens_per_segment,
        true_tau: args.tau,
        pre_margin_mean: args.pre,
        post_margin_mean: args.post,
        noise_std: args.noise,
        support_size: args.top_k,
        seed: args.seed,
    };
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    check_output_parent(&args.output)?;
    let truth_path = args.truth.clone().unwrap_or_else(|| {
        args.output
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join("ground_truth.jsonl")
    });
    check_output_parent(&truth_path)?;
    let mut out = create_output(&args.output)?;
    let mut truth = create_output(&truth_path)?;

    with_jobs(args.jobs, || {
        const CHUNK: usize = 256;
        for start in (0..args.count).step_by(CHUNK) {
            let end = (start + CHUNK).min(args.count);
            let chunk: Vec<(String, String)> = (start..end)
                .into_par_iter()
                .map(|i| {
                    let (record, gt) = synthetic::generate_indexed(&config, i)?;
                    let gt = serde_json::to_string(&gt).expect("truth serialization cannot fail");
                    Ok((record.to_json_line(), gt))
                })
                .collect::<Result<_>>()?;
            for (line, gt) in chunk {
                writeln!(out, "{line}")?;
                writeln!(truth, "{gt}")?;
            }
        }
        Ok(())
    })?;
    out.flush()?;
    truth.flush()?;
    Ok(())
}

fn permute(args: PermuteArgs) -> Result<()> {
    let config = args.rule.config(Strategy::RandomRelease { seed: args.seed })?;
    let input = open_input(&args.input.input)?;
    check_output_parent(&args.output)?;
    let output = create_output(&args.output)?;
    let options = BatchOptions {
        strict: args.input.strict,
        probs: args.input.probs,
    };
    let report = with_jobs(args.input.jobs, || {
        pipeline::permute_batch(input, output, args.seed, &config, &options)
    })?;
    print_report(&report);
    Ok(())
}

fn snr(args: SnrArgs) -> Result<()> {
    let report = diagnostics::snr_release_check(args.mp, args.vp, args.mr, args.vr)
        .map_err(|e| Error::Config(e.to_string()))?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "improves={}", report.release_improves)?;
    writeln!(out, "snr_release={:?}", report.snr_release)?;
    writeln!(out, "snr_full={:?}", report.snr_full)?;
    match report.inequality_form {
        Some(form) => writeln!(out, "inequality_form={form}")?,
        None => writeln!(out, "inequality_form=undefined")?,
    }
    writeln!(out, "forms_agree={}", report.forms_agree)?;
    if let Some(path) = &args.output {
        check_output_parent(path)?;
        diagnostics::write_snr_csv(&report, create_output(path)?)?;
    }
    Ok(())
}

/// Reads a JSONL file into non-empty lines; used by tests and tooling.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for line in open_input(path)?.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sts_bench::{
    count_flops, loglog_slope, run_scaling, write_csv, FlopShape, Method, PeakAlloc, ScalingConfig,
};
use sts_cli::{
    generate, run_stream, run_verify, CliError, Result, RunConfig, RunOptions, SignalKind,
    VerifyOptions,
};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

/// Streaming evaluation of diagonal state-space models with transferable state.
#[derive(Debug, Parser)]
#[command(name = "sts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic stream file.
    Gen(GenArgs),
    /// Evaluate a stream file segment by segment and write emissions as CSV.
    Run(RunArgs),
    /// Check the fast evaluation paths against the recurrence.
    Verify(VerifyArgs),
    /// Measure wall time, FLOPs and peak memory across sequence lengths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output stream file.
    #[arg(long, short)]
    out: PathBuf,
    /// Channels per frame.
    #[arg(long, short = 'H', default_value_t = 4)]
    channels: usize,
    /// Number of frames.
    #[arg(long, short = 'L')]
    len: u64,
    /// noise, sine_mix or piecewise_events.
    #[arg(long, default_value = "noise")]
    kind: SignalKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Permit writing a stream with zero frames.
    #[arg(long)]
    allow_empty: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Input stream file.
    #[arg(long, short)]
    input: PathBuf,
    /// Output CSV file.
    #[arg(long, short)]
    output: PathBuf,
    /// Continue from this checkpoint. Output rows start after the
    /// checkpointed position and carry no header.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the final state checkpoint here.
    #[arg(long)]
    save_state: Option<PathBuf>,
    /// Stop after this many segments, leaving the stream unfinished.
    #[arg(long)]
    max_segments: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sabotage {
    /// Shift every state power in the kernel path by one.
    OffByOne,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Sequence lengths to check.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    sizes: Option<Vec<usize>>,
    /// System seeds to check.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seeds: Option<Vec<u64>>,
    /// Inject a known fault to show the suite detects it (debug builds only).
    #[arg(long, value_enum)]
    sabotage: Option<Sabotage>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Methods to run: recurrent, fft_full, sts_chunked, attention.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    methods: Option<Vec<Method>>,
    /// Sequence lengths, ascending.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    sweep: Option<Vec<usize>>,
    #[arg(long, short = 'M', default_value_t = 1024)]
    segment_len: usize,
    /// Attention head dimension.
    #[arg(long, short = 'd', default_value_t = 16)]
    d_attn: usize,
    #[arg(long, short = 'H', default_value_t = 4)]
    channels: usize,
    #[arg(long, short = 'N', default_value_t = 16)]
    state_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timed runs per point; the median is reported.
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Skip attention runs needing more heap bytes than this.
    #[arg(long, default_value_t = 4 << 30)]
    memory_ceiling: u64,
    /// Run methods concurrently.
    #[arg(long)]
    parallel: bool,
    /// CSV destination; standard output when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn open(path: &PathBuf) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let out = create(&args.out)?;
    let report = generate(
        out,
        args.kind,
        args.channels,
        args.len,
        args.seed,
        args.allow_empty,
    )?;
    println!("{}", report.frames);
    if args.kind == SignalKind::PiecewiseEvents {
        let mut err = io::stderr().lock();
        writeln!(err, "change points: {}", report.change_points.len())?;
        for t in &report.change_points {
            writeln!(err, "{t}")?;
        }
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = RunConfig::from_path(&args.config)?;
    let resume = match &args.resume {
        Some(path) => Some(
            std::fs::read(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?,
        ),
        None => None,
    };
    let options = RunOptions {
        resume,
        max_segments: args.max_segments,
    };
    let input = open(&args.input)?;
    let output = create(&args.output)?;
    let summary = run_stream(&config, input, output, &options)?;
    if let Some(path) = &args.save_state {
        std::fs::write(path, &summary.checkpoint)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    }
    eprintln!(
        "{} frames, {} segments, {} rows{}",
        summary.frames,
        summary.segments,
        summary.rows,
        if summary.finished {
            ""
        } else {
            " (stopped early)"
        }
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let mut options = VerifyOptions::default();
    if let Some(sizes) = args.sizes {
        options.sizes = sizes;
    }
    if let Some(seeds) = args.seeds {
        options.seeds = seeds;
    }
    if args.sabotage.is_some() {
        if !cfg!(debug_assertions) {
            return Err(CliError::Usage(
                "--sabotage is only available in debug builds".into(),
            ));
        }
        options.sabotage = true;
    }
    let report = run_verify(&options, io::stdout().lock())?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::VerificationFailed)
    }
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut config = ScalingConfig {
        segment_len: args.segment_len,
        d_attn: args.d_attn,
        channels: args.channels,
        state_size: args.state_size,
        seed: args.seed,
        repetitions: args.repetitions,
        memory_ceiling: args.memory_ceiling,
        parallel: args.parallel,
        ..ScalingConfig::default()
    };
    if let Some(methods) = args.methods {
        config.methods = methods;
    }
    if let Some(sweep) = args.sweep {
        config.sweep = sweep;
    }
    let records = run_scaling(&config)?;
    match &args.output {
        Some(path) => {
            let mut out = create(path)?;
            write_csv(&mut out, &records)?;
            out.flush()?;
        }
        None => write_csv(io::stdout().lock(), &records)?,
    }
    let mut err = io::stderr().lock();
    writeln!(
        err,
        "flops count sequence mixing only (analytic model, not hardware counters)"
    )?;
    for method in &config.methods {
        if let Some(slope) = loglog_slope(&records, *method) {
            writeln!(err, "{method}: log-log wall-time slope {slope:.3}")?;
        }
    }
    let last = *config.sweep.last().expect("validated sweep");
    let shape = FlopShape {
        channels: config.channels as u64,
        state_size: config.state_size as u64,
        len: last as u64,
        segment_len: config.segment_len.min(last) as u64,
        d_attn: config.d_attn as u64,
    };
    if let (Ok(att), Ok(sts)) = (
        count_flops(Method::Attention, shape),
        count_flops(Method::StsChunked, shape),
    ) {
        writeln!(
            err,
            "attention/sts_chunked flop ratio at L={last}: {:.1}",
            att as f64 / sts as f64
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sts: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

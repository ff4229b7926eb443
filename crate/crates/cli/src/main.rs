use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gmfuse_cli::alloc::CountingAlloc;
use gmfuse_cli::bench::{parse_sweep, BenchOptions, Mechanism, DEFAULT_SWEEP};
use gmfuse_cli::commands::{cmd_bench, cmd_forward, cmd_pillarize, cmd_selftest};
use gmfuse_cli::selftest::Faults;
use gmfuse_cli::{Result, RunConfig};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "gmfuse", version, about = "LiDAR pillar grids, BEV state-space fusion and its benchmarks")]
struct Cli {
    /// Flat key = value run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the config thread count.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point cloud (binary or CSV) to a pillar grid tensor file.
    Pillarize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Pillar grid tensor file through the seeded fusion network.
    Forward {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Runs the invariant suite.
    Selftest {
        /// Runs one suite with --seed as its seed.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Times the BEV-SSM block against self-attention over a cell-count sweep.
    Bench {
        #[arg(long, value_name = "LIST")]
        sweep: Option<String>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Pillarize { input, output } => {
            let s = cmd_pillarize(input, &cfg, output)?;
            println!(
                "{} points: {} binned into {} pillars, {} dropped; wrote {} and {}",
                s.points,
                s.binned,
                s.occupied,
                s.dropped,
                output.display(),
                s.sidecar.display()
            );
        }
        Command::Forward { input, output } => {
            let s = cmd_forward(input, &cfg, output)?;
            let [h, w, c] = s.dims;
            println!("output {h}x{w}x{c}, mean {:.6e}, max |x| {:.6e}; wrote {}", s.mean, s.max_abs, output.display());
        }
        Command::Selftest { suite, output } => {
            let report = cmd_selftest(&cfg, suite.as_deref(), &Faults::default(), output.as_deref())?;
            print!("{}", report.to_text());
            for f in report.failures() {
                eprintln!("reproduce: gmfuse selftest --suite {} --seed {}", f.name, f.seed);
            }
            report.into_result()?;
        }
        Command::Bench { sweep, output } => {
            let sweep = match sweep {
                Some(s) => parse_sweep(s)?,
                None => DEFAULT_SWEEP.to_vec(),
            };
            let report = cmd_bench(&cfg, &sweep, &BenchOptions::default(), output.as_deref())?;
            for m in [Mechanism::BevSsm, Mechanism::SelfAttention] {
                eprintln!("{} log-log slope {:.3}", m.name(), report.slope(m));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

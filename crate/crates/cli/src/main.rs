use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use quadapt::checkpoint;
use quadapt::gradsuite::{self, DEFAULT_PROBES};
use quadapt::harness::{self, TrainReport};
use quadapt::report::{write_report, EvalReport};
use quadapt::{Error, Result, RunConfig, ShiftBenchmark};

/// Line to stdout; a closed pipe is not an error.
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "quadapt",
    version,
    about = "Quadratic adapter experiments on frozen base models"
)]
struct Cli {
    /// Override every seed in the config: an integer, or `auto` for a fresh one.
    #[arg(long, global = true)]
    seed: Option<SeedArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the finite-difference suite over every op and model forward.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_PROBES)]
        probes: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate the benchmark described by a config.
    Genbench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model on the pretraining split and save it frozen.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train an adapter on the downstream split over a saved base.
    Adapt {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a base, optionally with an adapter, on a saved benchmark.
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train every adapter in the config on every seed and tabulate.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Parameter-step cost of training from scratch versus adapting.
    Savings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print a checkpoint manifest.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy)]
enum SeedArg {
    Auto,
    Fixed(u64),
}

impl FromStr for SeedArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(SeedArg::Auto);
        }
        s.parse()
            .map(SeedArg::Fixed)
            .map_err(|_| format!("expected an integer or `auto`, got `{s}`"))
    }
}

impl SeedArg {
    fn resolve(self) -> u64 {
        match self {
            SeedArg::Fixed(s) => s,
            SeedArg::Auto => {
                let s = rand::random::<u32>() as u64;
                eprintln!("seed: {s}");
                s
            }
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let run = RunConfig::load(path)?;
    Ok(match seed {
        Some(s) => run.with_seed(s),
        None => run,
    })
}

/// Benchmark for single-run commands: generated from the first run seed.
fn first_bench(run: &RunConfig) -> Result<(u64, ShiftBenchmark)> {
    let seed = run.seeds[0];
    Ok((seed, ShiftBenchmark::generate(&run.bench.with_seed(seed))?))
}

fn emit<T: quadapt::report::Tabular + serde::Serialize>(path: Option<&Path>, report: &T) -> Result<()> {
    if let Some(p) = path {
        write_report(p, report)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn log_train(label: &str, r: &TrainReport) {
    eprintln!(
        "{label}: {} epochs, {} updates, final test mse {:.6e}",
        r.epochs_completed(),
        r.updates,
        r.final_test_loss
    );
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed.map(SeedArg::resolve);
    match cli.command {
        Command::Gradcheck { probes, report } => {
            let suite = gradsuite::run_suite(probes, seed.unwrap_or(gradsuite::DEFAULT_SEED))?;
            for r in &suite.results {
                out!(
                    "{:<48} {:.3e} {}",
                    r.name,
                    r.max_relative_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            out!("{}", suite.summary());
            emit(report.as_deref(), &suite)?;
            Ok(suite.all_passed())
        }
        Command::Genbench { config, out } => {
            let run = load_config(&config, seed)?;
            let (_, bench) = first_bench(&run)?;
            checkpoint::save_bench(&bench, &out)?;
            out!("linear_floor {:.6e}", bench.linear_floor_oracle()?);
            out!("noise_variance {:.6e}", bench.noise_variance());
            Ok(true)
        }
        Command::Pretrain { config, out, report } => {
            let run = load_config(&config, seed)?;
            let (seed, bench) = first_bench(&run)?;
            let (base, rep) = harness::pretrain(&bench, &run.base, &run.pretrain, seed)?;
            log_train("pretrain", &rep);
            checkpoint::save_base(&base, &out)?;
            emit(report.as_deref(), &rep)?;
            Ok(true)
        }
        Command::Adapt {
            base,
            config,
            out,
            report,
        } => {
            let run = load_config(&config, seed)?;
            let adapter = run
                .adapter
                .clone()
                .ok_or_else(|| Error::InvalidConfig("config has no `adapter` entry".into()))?;
            let base = checkpoint::load_base(&base)?;
            let (seed, bench) = first_bench(&run)?;
            let (model, rep) = harness::adapt(
                &base,
                &bench,
                &adapter,
                &run.train.with_seed(seed),
                Some(run.target_mse()),
            )?;
            log_train("adapt", &rep);
            checkpoint::save_adapter(&model, &out)?;
            emit(report.as_deref(), &rep)?;
            Ok(true)
        }
        Command::Eval {
            base,
            adapter,
            bench,
            report,
        } => {
            let base = checkpoint::load_base(&base)?;
            let bench = checkpoint::load_bench(&bench)?;
            let rep = match adapter {
                Some(dir) => {
                    let model = checkpoint::attach_saved(base, &dir)?;
                    EvalReport::measure("adapted", &bench, |x| model.forward(x))?
                }
                None => EvalReport::measure("base", &bench, |x| base.forward(x))?,
            };
            out!("{}", serde_json::to_string_pretty(&rep)?);
            emit(report.as_deref(), &rep)?;
            Ok(true)
        }
        Command::Compare { config, report } => {
            let run = load_config(&config, seed)?;
            let table = harness::compare(&run)?;
            out!(
                "linear_floor {:.6e} target {:.6e}",
                table.linear_floor,
                table.target_mse
            );
            for row in &table.rows {
                let updates = row.updates_to_target.map_or("inf".to_string(), |u| u.to_string());
                out!(
                    "{:>2} {:<16} r={} kernel={:<10} params={:<6} test_mse={:.6e} updates_to_target={updates}",
                    row.config_index,
                    row.family,
                    row.rank,
                    row.kernel,
                    row.params,
                    row.final_test_loss
                );
            }
            emit(report.as_deref(), &table)?;
            Ok(true)
        }
        Command::Savings { config, report } => {
            let run = load_config(&config, seed)?;
            let rep = harness::scratch_vs_adapt(&run)?;
            for s in &rep.seeds {
                let ratio = s.ratio.map_or("inf".to_string(), |r| format!("{r:.4}"));
                out!("seed {} ratio {ratio}", s.seed);
            }
            let ratio = rep.ratio.map_or("inf".to_string(), |r| format!("{r:.4}"));
            out!("median ratio {ratio}");
            emit(report.as_deref(), &rep)?;
            Ok(true)
        }
        Command::Inspect { checkpoint: dir } => {
            out!("{}", checkpoint::inspect(&dir)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fanin_cli::bench::{run_bench, BenchConfig};
use fanin_cli::{
    crossover_report, default_variance_grid, fixture_dir, run_flops, run_train, run_variance,
    write_bench_outputs, CliError,
};
use fanin_core::flops::TrainingCostModel;
use fanin_core::train::SparsityDistribution;

/// Constant fan-in sparse training workbench.
#[derive(Parser)]
#[command(name = "fanin", version, about)]
struct Cli {
    /// Master seed for all randomized subcommands.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads for parallel simulation (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo validation of the output-norm variance closed forms.
    Variance(VarianceArgs),
    /// Train a masked MLP (dense, rigl or srigl) from a JSON config.
    Train(TrainArgs),
    /// Time the condensed kernel against the dense baseline.
    Bench(BenchArgs),
    /// Inference/training FLOPs report for an architecture file.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct VarianceArgs {
    /// Grid points as `n:k` pairs, e.g. `100:10,500:250`. Defaults to
    /// n in {50,100,500} with k in {5,10,n/2,n}.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 50_000)]
    trials: u64,
    /// Maximum allowed |mc - closed| / closed before a non-zero exit.
    #[arg(long, default_value_t = 0.1)]
    tolerance: f64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory for report.json, metrics.csv, topology.jsonl and layer
    /// exports.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 65_536)]
    d: usize,
    /// Comma-separated sparsity levels.
    #[arg(long, default_value = "0.9,0.95,0.99")]
    sparsities: String,
    /// Comma-separated batch sizes.
    #[arg(long, default_value = "1,2,4,8,16,32,64,128,256")]
    batches: String,
    /// Timed samples per configuration (minimum 5).
    #[arg(long, default_value_t = 7)]
    repeats: usize,
    /// Untimed iterations before sampling.
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Output CSV path (metadata goes to `<out>.meta.json`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    /// Architecture file; defaults to `resnet50.json` in the fixture
    /// directory (`$FANIN_FIXTURES` or `./fixtures`).
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Global sparsity to distribute over the layers.
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long, value_enum, default_value_t = DistributionArg::Erk)]
    distribution: DistributionArg,
    /// Training steps (with --train-batch enables the training total).
    #[arg(long)]
    train_steps: Option<u64>,
    #[arg(long)]
    train_batch: Option<u64>,
    /// Steps between mask updates for the amortized dense-gradient term.
    #[arg(long, default_value_t = 800)]
    train_delta_t: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DistributionArg {
    Uniform,
    Erk,
}

impl From<DistributionArg> for SparsityDistribution {
    fn from(d: DistributionArg) -> Self {
        match d {
            DistributionArg::Uniform => SparsityDistribution::Uniform,
            DistributionArg::Erk => SparsityDistribution::Erk,
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|item| {
            item.trim()
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("invalid {what} entry `{item}`")))
        })
        .collect()
}

fn parse_grid(s: &str) -> Result<Vec<(usize, usize)>, CliError> {
    s.split(',')
        .map(|pair| {
            let (n, k) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("grid entry `{pair}` is not n:k")))?;
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("grid entry `{pair}` is not n:k")))
            };
            Ok((parse(n)?, parse(k)?))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        // ignore failure if a pool already exists (e.g. in tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match cli.command {
        Command::Variance(args) => {
            let grid = match &args.grid {
                Some(spec) => parse_grid(spec)?,
                None => default_variance_grid(),
            };
            let summary = run_variance(&grid, args.trials, args.tolerance, cli.seed, &args.out)?;
            println!(
                "variance: {} rows, worst |mc-closed|/closed = {:.4} -> {}",
                summary.rows.len(),
                summary.worst_rel,
                args.out.display()
            );
            if !summary.failures.is_empty() {
                let detail = summary
                    .failures
                    .iter()
                    .map(|(kind, n, k, rel)| format!("{kind} n={n} k={k} rel={rel:.4}"))
                    .collect::<Vec<_>>()
                    .join("; ");
                return Err(CliError::Tolerance(format!(
                    "{} grid points beyond tolerance {}: {detail}",
                    summary.failures.len(),
                    args.tolerance
                )));
            }
            Ok(())
        }
        Command::Train(args) => {
            let (outcome, files) = run_train(&args.config, &args.out_dir)?;
            println!(
                "train: mode {:?}, final eval accuracy {:.4}, loss {:.4}",
                outcome.report.config.mode,
                outcome.report.final_eval_accuracy,
                outcome.report.final_eval_loss
            );
            println!(
                "wrote {}, {}, {} and {} layer export(s)",
                files.report.display(),
                files.metrics.display(),
                files.topology.display(),
                files.layer_exports.len()
            );
            Ok(())
        }
        Command::Bench(args) => {
            let config = BenchConfig {
                n: args.n,
                d: args.d,
                sparsities: parse_list(&args.sparsities, "sparsity")?,
                batch_sizes: parse_list(&args.batches, "batch")?,
                repeats: args.repeats,
                warmup: args.warmup,
                seed: cli.seed,
                ..BenchConfig::default()
            };
            let rows = run_bench(&config)?;
            write_bench_outputs(&rows, &config, cli.threads, &args.out)?;
            println!("bench: {} rows -> {}", rows.len(), args.out.display());
            print!("{}", crossover_report(&rows));
            Ok(())
        }
        Command::Flops(args) => {
            let arch = args
                .arch
                .unwrap_or_else(|| fixture_dir().join("resnet50.json"));
            let cost = match (args.train_steps, args.train_batch) {
                (Some(steps), Some(batch)) => Some(
                    TrainingCostModel::new(steps, batch, args.train_delta_t)
                        .map_err(|e| CliError::Usage(e.to_string()))?,
                ),
                (None, None) => None,
                _ => {
                    return Err(CliError::Usage(
                        "--train-steps and --train-batch must be given together".into(),
                    ))
                }
            };
            let totals = run_flops(
                &arch,
                args.sparsity,
                args.distribution.into(),
                cost,
                &args.out,
            )?;
            println!(
                "flops: inference {:.4e} ({} params, {} nnz) -> {}",
                totals.inference,
                totals.total_params,
                totals.total_nnz,
                args.out.display()
            );
            if let Some(t) = totals.training {
                println!("flops: training {t:.4e}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

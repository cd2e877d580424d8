//! Command implementations behind the `fanin` binary: variance studies,
//! training runs, FLOPs reports and the kernel timing benchmark. Everything
//! here is a thin orchestration layer over `fanin_core`; outputs are CSV and
//! JSON files with pinned schemas.

pub mod bench;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use fanin_core::condensed::{CondensedMatrix, DenseMaskedMatrix};
use fanin_core::dense::DenseMatrix;
use fanin_core::flops::{
    self, ArchitectureSpec, TrainingCostModel,
};
use fanin_core::topology::erk_sparsities;
use fanin_core::train::{
    train_from_config, RunReport, SparsityDistribution, TrainConfig, TrainError, TrainOutcome,
};
use fanin_core::variance::{
    simulate_norm_ratio, variance_closed_form, SparsityKind, VarianceParams,
};

/// Process exit codes: usage and config problems exit 2 (as clap does),
/// training divergence exits 3, a variance tolerance failure exits 4, and
/// I/O or internal faults exit 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Tolerance(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Internal(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Tolerance(_) => 4,
        }
    }

    fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Fixture directory: `$FANIN_FIXTURES` if set, else `./fixtures`.
pub fn fixture_dir() -> PathBuf {
    std::env::var_os("FANIN_FIXTURES")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(CliError::io(path))
}

// ---------------------------------------------------------------------------
// variance
// ---------------------------------------------------------------------------

/// Default validation grid: n in {50, 100, 500}, k in {5, 10, n/2, n}.
pub fn default_variance_grid() -> Vec<(usize, usize)> {
    let mut grid = Vec::new();
    for n in [50usize, 100, 500] {
        for k in [5, 10, n / 2, n] {
            grid.push((n, k));
        }
    }
    grid
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceRow {
    pub kind: SparsityKind,
    pub n: usize,
    pub k: usize,
    pub closed_form: f64,
    pub mc_mean: f64,
    pub mc_variance: f64,
    pub trials: u64,
    pub seed: u64,
}

#[derive(Debug)]
pub struct VarianceSummary {
    pub rows: Vec<VarianceRow>,
    /// `(kind, n, k, relative mismatch)` for rows beyond tolerance.
    pub failures: Vec<(SparsityKind, usize, usize, f64)>,
    pub worst_rel: f64,
}

/// Runs the Monte Carlo validation over the grid and writes the CSV
/// (`kind,n,k,closed_form,mc_mean,mc_variance,trials,seed`).
pub fn run_variance(
    grid: &[(usize, usize)],
    trials: u64,
    tolerance: f64,
    seed: u64,
    out: &Path,
) -> Result<VarianceSummary, CliError> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    if grid.is_empty() {
        return Err(CliError::Usage("variance grid is empty".into()));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for &(n, k) in grid {
        let params = VarianceParams::new(n, k)
            .map_err(|e| CliError::Usage(format!("grid point ({n}, {k}): {e}")))?;
        for kind in SparsityKind::ALL {
            let closed = variance_closed_form::<f64>(kind, params)
                .map_err(|e| CliError::Usage(format!("grid point ({n}, {k}): {e}")))?;
            let stats = simulate_norm_ratio(kind, params, trials, seed);
            let rel = (stats.variance - closed).abs() / closed;
            worst = worst.max(rel);
            if rel > tolerance {
                failures.push((kind, n, k, rel));
            }
            rows.push(VarianceRow {
                kind,
                n,
                k,
                closed_form: closed,
                mc_mean: stats.mean,
                mc_variance: stats.variance,
                trials,
                seed,
            });
        }
    }

    let mut csv = String::from("kind,n,k,closed_form,mc_mean,mc_variance,trials,seed\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.kind, r.n, r.k, r.closed_form, r.mc_mean, r.mc_variance, r.trials, r.seed
        )
        .expect("string write");
    }
    write_file(out, &csv)?;
    Ok(VarianceSummary {
        rows,
        failures,
        worst_rel: worst,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainFiles {
    pub report: PathBuf,
    pub metrics: PathBuf,
    pub topology: PathBuf,
    pub layer_exports: Vec<PathBuf>,
}

/// Serializes the metrics curve with the pinned header
/// `step,train_loss,eval_loss,eval_accuracy`.
pub fn metrics_to_csv(report: &RunReport) -> String {
    let mut csv = String::from("step,train_loss,eval_loss,eval_accuracy\n");
    for m in &report.metrics {
        writeln!(
            csv,
            "{},{},{},{}",
            m.step, m.train_loss, m.eval_loss, m.eval_accuracy
        )
        .expect("string write");
    }
    csv
}

/// Loads a training config, runs it, and writes `report.json`,
/// `metrics.csv`, `topology.jsonl` and per-layer condensed exports into
/// `out_dir`.
pub fn run_train(config_path: &Path, out_dir: &Path) -> Result<(TrainOutcome, TrainFiles), CliError> {
    let text = fs::read_to_string(config_path).map_err(CliError::io(config_path))?;
    let config = TrainConfig::from_json(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let outcome = train_from_config(&config).map_err(|e| match e {
        TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
        TrainError::Config(_) => CliError::Config(e.to_string()),
        other => CliError::Internal(other.to_string()),
    })?;

    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let report_path = out_dir.join("report.json");
    let report_json =
        serde_json::to_string_pretty(&outcome.report).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&report_path, &(report_json + "\n"))?;

    let metrics_path = out_dir.join("metrics.csv");
    write_file(&metrics_path, &metrics_to_csv(&outcome.report))?;

    let topo_path = out_dir.join("topology.jsonl");
    let mut lines = String::new();
    for ev in &outcome.report.topology_events {
        writeln!(
            lines,
            "{}",
            serde_json::to_string(ev).map_err(|e| CliError::Internal(e.to_string()))?
        )
        .expect("string write");
    }
    write_file(&topo_path, &lines)?;

    let mut layer_exports = Vec::new();
    for (i, layer) in outcome.model.layers.iter().enumerate() {
        if let Some(c) = layer
            .condensed()
            .map_err(|e| CliError::Internal(e.to_string()))?
        {
            let path = out_dir.join(format!("layer_{i}.cfin"));
            let narrowed = narrow_condensed(&c);
            let mut bytes = Vec::new();
            narrowed
                .write_to(&mut bytes)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            fs::write(&path, bytes).map_err(CliError::io(&path))?;
            layer_exports.push(path);
        }
    }

    Ok((
        outcome,
        TrainFiles {
            report: report_path,
            metrics: metrics_path,
            topology: topo_path,
            layer_exports,
        },
    ))
}

/// Converts a training-precision condensed matrix to the f32 disk format.
fn narrow_condensed(c: &CondensedMatrix<f64>) -> CondensedMatrix<f32> {
    let masked = c.to_dense();
    let weights32 =
        DenseMatrix::from_fn(masked.rows(), masked.cols(), |i, j| masked.weights().at(i, j) as f32);
    let masked32 = DenseMaskedMatrix::new(weights32, masked.mask().to_vec())
        .expect("shape preserved");
    CondensedMatrix::from_dense(&masked32).expect("fan-in preserved")
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

pub struct FlopsTotals {
    pub inference: f64,
    pub training: Option<f64>,
    pub total_params: u64,
    pub total_nnz: u64,
}

/// Loads an architecture file, optionally re-distributes a global sparsity
/// (uniform or ERK), and writes the `layer,type,params,nnz,flops` report.
pub fn run_flops(
    arch_path: &Path,
    sparsity: Option<f64>,
    distribution: SparsityDistribution,
    cost: Option<TrainingCostModel>,
    out: &Path,
) -> Result<FlopsTotals, CliError> {
    let text = fs::read_to_string(arch_path).map_err(CliError::io(arch_path))?;
    let mut spec = ArchitectureSpec::from_json(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = sparsity {
        let sparsities = match distribution {
            SparsityDistribution::Uniform => vec![s; spec.layers.len()],
            SparsityDistribution::Erk => erk_sparsities(&spec.layer_shapes(), s)
                .map_err(|e| CliError::Config(e.to_string()))?,
        };
        spec = spec
            .with_sparsities(&sparsities)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }

    let rows = flops::report_rows(&spec);
    let inference = flops::model_inference_flops(&spec);
    let training = cost.map(|c| flops::training_flops(&spec, &c));
    let total_params: u64 = rows.iter().map(|r| r.params).sum();
    let total_nnz: u64 = rows.iter().map(|r| r.nnz).sum();

    let mut csv = String::from("layer,type,params,nnz,flops\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.layer, r.kind, r.params, r.nnz, r.flops)
            .expect("string write");
    }
    writeln!(csv, "TOTAL,inference,{total_params},{total_nnz},{inference}").expect("string write");
    if let Some(t) = training {
        writeln!(csv, "TOTAL,training,{total_params},{total_nnz},{t}").expect("string write");
    }
    write_file(out, &csv)?;

    Ok(FlopsTotals {
        inference,
        training,
        total_params,
        total_nnz,
    })
}

// ---------------------------------------------------------------------------
// bench output
// ---------------------------------------------------------------------------

/// Writes the benchmark CSV and its sidecar metadata JSON (`<out>.meta.json`).
pub fn write_bench_outputs(
    rows: &[bench::BenchRow],
    config: &bench::BenchConfig,
    threads: usize,
    out: &Path,
) -> Result<(), CliError> {
    write_file(out, &bench::rows_to_csv(rows))?;
    let meta = bench::BenchMeta {
        n: config.n,
        d: config.d,
        seed: config.seed,
        repeats: config.repeats,
        warmup: config.warmup,
        threads,
        target_block_s: config.target_block_s,
        fan_in: config
            .sparsities
            .iter()
            .map(|&s| (format!("{s}"), config.fan_in(s)))
            .collect(),
    };
    let meta_path = out.with_extension("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&meta_path, &(json + "\n"))
}

/// Human-readable dense-vs-condensed comparison (reported, not asserted).
pub fn crossover_report(rows: &[bench::BenchRow]) -> String {
    let mut out = String::new();
    let mut batches: Vec<usize> = rows.iter().map(|r| r.batch).collect();
    batches.sort_unstable();
    batches.dedup();
    for b in batches {
        let dense = rows
            .iter()
            .find(|r| r.impl_name == "dense" && r.batch == b)
            .map(|r| r.mean_s);
        let Some(dense) = dense else { continue };
        let mut faster: Vec<String> = Vec::new();
        for r in rows.iter().filter(|r| r.impl_name == "condensed" && r.batch == b) {
            if r.mean_s < dense {
                faster.push(format!("s={} ({:.2}x)", r.sparsity, dense / r.mean_s));
            }
        }
        if faster.is_empty() {
            writeln!(out, "batch {b}: dense fastest").expect("string write");
        } else {
            writeln!(out, "batch {b}: condensed faster at {}", faster.join(", "))
                .expect("string write");
        }
    }
    out
}

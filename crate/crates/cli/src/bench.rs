//! Timing harness for the dense-vs-condensed multiplication benchmark.
//!
//! Each measurement times a block of `iters` back-to-back multiply calls on
//! a monotonic clock and divides by `iters`; the block length is calibrated
//! once per configuration so a sample is long enough to resolve. Warmup
//! iterations and matrix construction are excluded from the statistics.
//! Reported values are the mean and sample standard deviation over
//! `repeats >= 5` samples.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use fanin_core::condensed::{CondensedMatrix, DenseMaskedMatrix};
use fanin_core::dense::DenseMatrix;

use crate::CliError;

/// Benchmark configuration (defaults follow the 10-neuron, 65,536-feature
/// single-layer geometry with batch sizes 1..256).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Output neurons.
    pub n: usize,
    /// Input features.
    pub d: usize,
    pub sparsities: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Timed samples per configuration; at least five.
    pub repeats: usize,
    /// Untimed iterations before sampling starts.
    pub warmup: usize,
    pub seed: u64,
    /// Target duration of one timed block, seconds.
    pub target_block_s: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 10,
            d: 65_536,
            sparsities: vec![0.90, 0.95, 0.99],
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
            repeats: 7,
            warmup: 2,
            seed: 42,
            target_block_s: 2e-3,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.repeats < 5 {
            return Err(CliError::Usage(format!(
                "repeats must be at least 5, got {}",
                self.repeats
            )));
        }
        if self.n == 0 || self.d == 0 || self.batch_sizes.iter().any(|&b| b == 0) {
            return Err(CliError::Usage("n, d and batch sizes must be positive".into()));
        }
        if self
            .sparsities
            .iter()
            .any(|&s| !(0.0..1.0).contains(&s))
        {
            return Err(CliError::Usage("sparsities must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Stored fan-in for a sparsity level.
    pub fn fan_in(&self, sparsity: f64) -> usize {
        (((1.0 - sparsity) * self.d as f64).round() as usize).clamp(1, self.d)
    }
}

/// One CSV row: `impl,sparsity,batch,mean_s,std_s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub impl_name: &'static str,
    pub sparsity: f64,
    pub batch: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

/// Run metadata written alongside the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchMeta {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub repeats: usize,
    pub warmup: usize,
    pub threads: usize,
    pub target_block_s: f64,
    /// Fan-in per benchmarked sparsity.
    pub fan_in: BTreeMap<String, usize>,
}

/// Mean and sample standard deviation of per-call seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_s: f64,
    pub std_s: f64,
}

/// Times `call` as described in the module docs.
pub fn measure(repeats: usize, warmup: usize, target_block: Duration, mut call: impl FnMut()) -> Timing {
    // calibration run doubles as the first warmup iteration
    let start = Instant::now();
    call();
    let est = start.elapsed().max(Duration::from_nanos(100));
    let iters = (target_block.as_secs_f64() / est.as_secs_f64()).ceil() as usize;
    let iters = iters.clamp(1, 1_000_000);
    for _ in 1..warmup {
        call();
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for _ in 0..iters {
            call();
        }
        samples.push(start.elapsed().as_secs_f64() / iters as f64);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples
        .iter()
        .map(|s| (s - mean) * (s - mean))
        .sum::<f64>()
        / (samples.len() - 1) as f64;
    Timing {
        mean_s: mean,
        std_s: var.sqrt(),
    }
}

fn random_dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<f32> {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z as f32
    })
}

fn random_condensed(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    k: usize,
) -> CondensedMatrix<f32> {
    let mut mask = vec![false; n * d];
    let mut cols: Vec<u32> = (0..d as u32).collect();
    for row in 0..n {
        for t in 0..k {
            let r = rng.gen_range(t..d);
            cols.swap(t, r);
            mask[row * d + cols[t] as usize] = true;
        }
    }
    let weights = random_dense(rng, n, d);
    let masked = DenseMaskedMatrix::new(weights, mask).expect("shapes consistent");
    CondensedMatrix::from_dense(&masked).expect("constant fan-in by construction")
}

/// Runs the full benchmark grid; matrix construction happens outside the
/// timed regions.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>, CliError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let target = Duration::from_secs_f64(config.target_block_s);

    let dense_weights = random_dense(&mut rng, config.n, config.d);
    let condensed: Vec<(f64, CondensedMatrix<f32>)> = config
        .sparsities
        .iter()
        .map(|&s| {
            let k = config.fan_in(s);
            (s, random_condensed(&mut rng, config.n, config.d, k))
        })
        .collect();

    let mut rows = Vec::new();
    for &batch in &config.batch_sizes {
        let v = random_dense(&mut rng, config.d, batch);
        let timing = measure(config.repeats, config.warmup, target, || {
            black_box(dense_weights.matmul(black_box(&v)));
        });
        rows.push(BenchRow {
            impl_name: "dense",
            sparsity: 0.0,
            batch,
            mean_s: timing.mean_s,
            std_s: timing.std_s,
        });
        for (s, c) in &condensed {
            let timing = measure(config.repeats, config.warmup, target, || {
                black_box(c.matmul(black_box(&v)).expect("dimensions match"));
            });
            rows.push(BenchRow {
                impl_name: "condensed",
                sparsity: *s,
                batch,
                mean_s: timing.mean_s,
                std_s: timing.std_s,
            });
        }
    }
    Ok(rows)
}

/// Serializes rows with the pinned header `impl,sparsity,batch,mean_s,std_s`.
pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("impl,sparsity,batch,mean_s,std_s\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.impl_name, row.sparsity, row.batch, row.mean_s, row.std_s
        ));
    }
    out
}

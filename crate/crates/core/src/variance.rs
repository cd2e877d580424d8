//! Output-norm variance: closed forms for three sparsity types and a Monte
//! Carlo simulator that validates them.
//!
//! The model is a sparse layer with ReLU-style gating and fan-in
//! normalization,
//!
//! ```text
//! z = sqrt(2/k) (W ⊙ I)(ξ ⊙ u)
//! ```
//!
//! with `W` an `n x n` iid standard normal matrix, `I` a binary mask drawn
//! per [`SparsityKind`], `ξ` iid Bernoulli(1/2) and `u` uniform on the unit
//! sphere. `E ||z||^2 = 1` for every kind; the closed forms below give
//! `Var ||z||^2`:
//!
//! * Bernoulli:          `(5n - 8 + 18 n/k) / (n (n+2))`
//! * Constant per layer: `((n^2 + 7n - 8) C_{n,k} + 18 n/k - n^2 - 2n) / (n (n+2))`
//!   with `C_{n,k} = (n - 1/k) / (n - 1/n)`
//! * Constant fan-in:    Bernoulli `- 3 (n-k) / (k n (n+2))`
//!
//! The `18 n/k` term is the one consistent with the case-by-case moment
//! tables and with simulation; the `18 k/n` variant that appears in some
//! write-ups of these formulas does not match either and is not used.
//!
//! Conditioned on the mask and inputs, each `z_i` is a centered Gaussian, so
//! `||z||^2` is distributed as `(2/k) Σ_{ij} g_i^2 I_ij ξ_j u_j^2` with `g`
//! iid standard normal. The simulator samples that form directly, which
//! avoids materializing `W`; a brute-force path over explicit `W` draws is
//! kept in the tests as an independent oracle.

use rand::distributions::Distribution;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Binomial, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// How the binary connectivity mask is distributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityKind {
    /// Every connection appears independently with probability `k/n`.
    Bernoulli,
    /// Exactly `k n` connections placed uniformly in the layer.
    ConstantPerLayer,
    /// Every row holds exactly `k` connections, rows independent.
    ConstantFanIn,
}

impl SparsityKind {
    pub const ALL: [SparsityKind; 3] = [
        SparsityKind::Bernoulli,
        SparsityKind::ConstantPerLayer,
        SparsityKind::ConstantFanIn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SparsityKind::Bernoulli => "bernoulli",
            SparsityKind::ConstantPerLayer => "constant_per_layer",
            SparsityKind::ConstantFanIn => "constant_fan_in",
        }
    }
}

impl std::fmt::Display for SparsityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SparsityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bernoulli" => Ok(SparsityKind::Bernoulli),
            "constant_per_layer" => Ok(SparsityKind::ConstantPerLayer),
            "constant_fan_in" => Ok(SparsityKind::ConstantFanIn),
            other => Err(format!("unknown sparsity kind `{other}`")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VarianceError {
    #[error("layer width n must be at least 1, got {0}")]
    WidthOutOfRange(usize),
    #[error("fan-in k must satisfy 1 <= k <= n, got k = {k}, n = {n}")]
    FanInOutOfRange { n: usize, k: usize },
    #[error("C_{{n,k}} requires n >= 2, got n = {0}")]
    WidthBelowTwo(usize),
}

/// Layer width `n` and (mean or exact) fan-in `k`, with `1 <= k <= n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarianceParams {
    n: usize,
    k: usize,
}

impl VarianceParams {
    pub fn new(n: usize, k: usize) -> Result<Self, VarianceError> {
        if n == 0 {
            return Err(VarianceError::WidthOutOfRange(n));
        }
        if k == 0 || k > n {
            return Err(VarianceError::FanInOutOfRange { n, k });
        }
        Ok(Self { n, k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// `C_{n,k} = (n - 1/k) / (n - 1/n)`, close to 1 for `n >> 1` and exactly 1
/// at `k = n`. Monotone increasing in `k`. Requires `n >= 2`.
pub fn c_nk<T: Scalar>(p: VarianceParams) -> Result<T, VarianceError> {
    if p.n < 2 {
        return Err(VarianceError::WidthBelowTwo(p.n));
    }
    let n = T::from_usize(p.n).unwrap();
    let k = T::from_usize(p.k).unwrap();
    Ok((n - k.recip()) / (n - n.recip()))
}

/// Closed-form `Var(||z||^2)` for the given sparsity kind.
pub fn variance_closed_form<T: Scalar>(
    kind: SparsityKind,
    p: VarianceParams,
) -> Result<T, VarianceError> {
    let n = T::from_usize(p.n).unwrap();
    let k = T::from_usize(p.k).unwrap();
    let two = T::narrow(2.0);
    let denom = n * (n + two);
    let bernoulli =
        (T::narrow(5.0) * n - T::narrow(8.0) + T::narrow(18.0) * n / k) / denom;
    match kind {
        SparsityKind::Bernoulli => Ok(bernoulli),
        SparsityKind::ConstantFanIn => {
            let correction = T::narrow(3.0) * (n - k) / (k * denom);
            Ok(bernoulli - correction)
        }
        SparsityKind::ConstantPerLayer => {
            let c: T = c_nk(p)?;
            let n2 = n * n;
            let seven = T::narrow(7.0);
            let eight = T::narrow(8.0);
            let eighteen = T::narrow(18.0);
            Ok(((n2 + seven * n - eight) * c + eighteen * n / k - n2 - two * n) / denom)
        }
    }
}

/// Samples an `n x n` binary mask (row-major) of the given kind.
pub fn sample_mask<R: Rng>(kind: SparsityKind, p: VarianceParams, rng: &mut R) -> Vec<bool> {
    let n = p.n;
    let k = p.k;
    let mut mask = vec![false; n * n];
    match kind {
        SparsityKind::Bernoulli => {
            let prob = k as f64 / n as f64;
            for cell in mask.iter_mut() {
                *cell = rng.gen_bool(prob);
            }
        }
        SparsityKind::ConstantPerLayer => {
            let mut cells: Vec<u32> = (0..(n * n) as u32).collect();
            for t in 0..k * n {
                let r = rng.gen_range(t..n * n);
                cells.swap(t, r);
                mask[cells[t] as usize] = true;
            }
        }
        SparsityKind::ConstantFanIn => {
            let mut cols: Vec<u32> = (0..n as u32).collect();
            for row in 0..n {
                for t in 0..k {
                    let r = rng.gen_range(t..n);
                    cols.swap(t, r);
                    mask[row * n + cols[t] as usize] = true;
                }
            }
        }
    }
    mask
}

/// Monte Carlo estimate of the mean and variance of `||z||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRatioStats {
    pub mean: f64,
    /// Sample variance (denominator `trials - 1`).
    pub variance: f64,
    pub trials: u64,
}

impl NormRatioStats {
    /// Standard error of the mean estimate.
    pub fn std_error(&self) -> f64 {
        (self.variance / self.trials as f64).sqrt()
    }
}

/// Runs `trials` independent draws of `||z||^2` and aggregates mean and
/// variance.
///
/// Trial `t` uses its own generator seeded from `(seed, t)` via a SplitMix
/// step, so results are byte-identical for a fixed seed regardless of thread
/// count; trials run in parallel and are combined with a deterministic
/// pairwise sum. (The generator family is pinned by the lockfile.)
pub fn simulate_norm_ratio(
    kind: SparsityKind,
    p: VarianceParams,
    trials: u64,
    seed: u64,
) -> NormRatioStats {
    assert!(trials >= 1, "at least one trial required");
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map_init(
            || TrialScratch::new(p.n),
            |scratch, t| {
                let mut rng = SmallRng::seed_from_u64(trial_seed(seed, t));
                norm_sq_trial(kind, p, scratch, &mut rng)
            },
        )
        .collect();
    let mean = pairwise_sum(&samples) / trials as f64;
    let variance = if trials > 1 {
        pairwise_map_sum(&samples, |x| {
            let d = x - mean;
            d * d
        }) / (trials as f64 - 1.0)
    } else {
        0.0
    };
    NormRatioStats {
        mean,
        variance,
        trials,
    }
}

/// SplitMix64 finalizer over a golden-ratio stride: distinct trials map to
/// distinct, well-mixed seeds.
fn trial_seed(seed: u64, trial: u64) -> u64 {
    let mut z = seed.wrapping_add(trial.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unbiased uniform `u32` below `s` (Lemire's multiply-shift with
/// rejection). The subset loops draw hundreds of millions of these, so the
/// 32-bit arithmetic is deliberate.
#[inline]
fn below(rng: &mut SmallRng, s: u32) -> u32 {
    use rand::RngCore;
    debug_assert!(s > 0);
    let mut m = u64::from(rng.next_u32()) * u64::from(s);
    let mut low = m as u32;
    if low < s {
        let threshold = s.wrapping_neg() % s;
        while low < threshold {
            m = u64::from(rng.next_u32()) * u64::from(s);
            low = m as u32;
        }
    }
    (m >> 32) as u32
}

struct TrialScratch {
    /// `w[j] = ξ_j u_j^2` for the current trial.
    w: Vec<f64>,
    g2: Vec<f64>,
    /// Row-column scratch for per-row subsets. Partial Fisher-Yates yields a
    /// uniform prefix subset from any starting arrangement, so rows reuse it
    /// without restoring; it is re-identified at trial start.
    perm: Vec<u32>,
    /// Cell scratch for whole-layer subsets; kept as the identity between
    /// trials via the undo log.
    cells: Vec<u32>,
    undo: Vec<(u32, u32)>,
}

impl TrialScratch {
    fn new(n: usize) -> Self {
        Self {
            w: vec![0.0; n],
            g2: vec![0.0; n],
            perm: (0..n as u32).collect(),
            cells: Vec::new(),
            undo: Vec::new(),
        }
    }

    fn reset_perm(&mut self) {
        for (i, slot) in self.perm.iter_mut().enumerate() {
            *slot = i as u32;
        }
    }

    /// Sum of `w` over a uniform `m`-subset of `0..n`.
    #[inline]
    fn row_subset_sum(&mut self, rng: &mut SmallRng, m: usize) -> f64 {
        let perm = &mut self.perm[..];
        let w = &self.w[..];
        let n = perm.len();
        debug_assert!(m <= n);
        let mut acc = 0.0;
        for t in 0..m {
            let r = t + below(rng, (n - t) as u32) as usize;
            perm.swap(t, r);
            acc += w[perm[t] as usize];
        }
        acc
    }

    /// `Σ g2[row(c)] w[col(c)]` over a uniform `m`-subset of the `n*n`
    /// cells; restores the cell array afterwards.
    fn cell_subset_sum(&mut self, rng: &mut SmallRng, n: usize, m: usize) -> f64 {
        let total = n * n;
        if self.cells.len() != total {
            self.cells = (0..total as u32).collect();
        }
        self.undo.clear();
        self.undo.reserve(m);
        let cells = &mut self.cells[..];
        let w = &self.w[..];
        let g2 = &self.g2[..];
        let mut acc = 0.0;
        for t in 0..m {
            let r = t + below(rng, (total - t) as u32) as usize;
            cells.swap(t, r);
            self.undo.push((t as u32, r as u32));
            let c = cells[t] as usize;
            let row = c / n;
            acc += g2[row] * w[c - row * n];
        }
        for &(t, r) in self.undo.iter().rev() {
            cells.swap(t as usize, r as usize);
        }
        acc
    }
}

/// One draw of `||z||^2 = (2/k) Σ_ij g_i^2 I_ij ξ_j u_j^2`.
///
/// Draw order per trial: `u` normals, then `ξ` flips, then `g` normals, then
/// mask randomness. Mask sums use the complement set whenever that is the
/// smaller side, which is exact by symmetry.
fn norm_sq_trial(
    kind: SparsityKind,
    p: VarianceParams,
    scratch: &mut TrialScratch,
    rng: &mut SmallRng,
) -> f64 {
    let n = p.n;
    let k = p.k;
    scratch.reset_perm();

    // u uniform on the sphere via normalized Gaussians
    let mut norm2;
    loop {
        norm2 = 0.0;
        for slot in scratch.w.iter_mut() {
            let x: f64 = StandardNormal.sample(rng);
            *slot = x * x;
            norm2 += *slot;
        }
        if norm2 > 0.0 {
            break;
        }
    }
    let mut sum_w = 0.0;
    for slot in scratch.w.iter_mut() {
        if rng.gen_bool(0.5) {
            *slot /= norm2;
            sum_w += *slot;
        } else {
            *slot = 0.0;
        }
    }

    let mut sum_g2 = 0.0;
    for slot in scratch.g2.iter_mut() {
        let x: f64 = StandardNormal.sample(rng);
        *slot = x * x;
        sum_g2 += *slot;
    }

    let q = match kind {
        SparsityKind::ConstantFanIn => {
            let mut q = 0.0;
            if 2 * k <= n {
                for i in 0..n {
                    q += scratch.g2[i] * scratch.row_subset_sum(rng, k);
                }
            } else {
                for i in 0..n {
                    q += scratch.g2[i] * (sum_w - scratch.row_subset_sum(rng, n - k));
                }
            }
            q
        }
        SparsityKind::Bernoulli => {
            let prob = k as f64 / n as f64;
            let mut q = 0.0;
            if prob <= 0.5 {
                let dist = Binomial::new(n as u64, prob).unwrap();
                for i in 0..n {
                    let m = dist.sample(rng) as usize;
                    q += scratch.g2[i] * scratch.row_subset_sum(rng, m);
                }
            } else {
                let dist = Binomial::new(n as u64, 1.0 - prob).unwrap();
                for i in 0..n {
                    let m = dist.sample(rng) as usize;
                    q += scratch.g2[i] * (sum_w - scratch.row_subset_sum(rng, m));
                }
            }
            q
        }
        SparsityKind::ConstantPerLayer => {
            let total = n * n;
            let ones = k * n;
            if ones <= total - ones {
                scratch.cell_subset_sum(rng, n, ones)
            } else {
                sum_g2 * sum_w - scratch.cell_subset_sum(rng, n, total - ones)
            }
        }
    };

    2.0 / k as f64 * q
}

/// Deterministic pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn pairwise_map_sum(xs: &[f64], f: impl Fn(f64) -> f64 + Copy) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().map(|&x| f(x)).sum();
    }
    let mid = xs.len() / 2;
    pairwise_map_sum(&xs[..mid], f) + pairwise_map_sum(&xs[mid..], f)
}

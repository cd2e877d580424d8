//! Sparse connectivity updates: unstructured RigL and its constant fan-in
//! variant SRigL with neuron ablation, plus the ERK per-layer sparsity
//! allocator and the cosine drop-fraction schedule.
//!
//! An SRigL update runs, per layer:
//!
//! 1. take weight magnitudes of active weights (prune criterion) and
//!    gradient magnitudes (grow criterion);
//! 2. compute `K`, the number of weights pruned and regrown this step;
//! 3. count *salient* weights per neuron — positions in the layer-wide
//!    top-`K` by active weight magnitude or by gradient magnitude;
//! 4. ablate neurons with fewer salient weights than `max(1, ceil(γ_sal k))`,
//!    lowering the threshold and retrying while the implied new fan-in would
//!    exceed the dense width;
//! 5. compute the new constant fan-in `k' = floor(nnz_target / n_active)`;
//! 6. prune the `K` smallest-magnitude active weights layer-wide;
//! 7. regrow every active neuron to exactly `k'` in order of decreasing
//!    gradient magnitude.
//!
//! All tie-breaks prefer the lower flat index, so update trajectories are
//! bit-reproducible for a fixed saliency stream.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("operation requires {expected:?} mode, layer is {got:?}")]
    ModeMismatch {
        expected: SparsityMode,
        got: SparsityMode,
    },
    #[error("saliency shape {got:?} does not match layer shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("K = {k} exceeds current non-zero count {nnz}")]
    KExceedsNnz { k: usize, nnz: usize },
    #[error("cannot grow {k} weights: only {inactive} inactive positions")]
    InsufficientInactive { k: usize, inactive: usize },
    #[error("row {row} has only {candidates} regrow candidates, needs {needed}")]
    RegrowExhausted {
        row: usize,
        needed: usize,
        candidates: usize,
    },
    #[error("mask row {row} has {got} non-zeros, constant fan-in requires {expected}")]
    NonConstantFanIn {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("global sparsity {0} outside [0, 1)")]
    SparsityOutOfRange(f64),
    #[error("sparsity budget {budget} cannot give each of {layers} layers one weight")]
    InfeasibleSparsity { budget: u64, layers: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid ablation policy: gamma_sal {0} outside [0, 1]")]
    InvalidPolicy(f64),
    #[error("fan-in {k} exceeds dense width {d}")]
    FanInExceedsWidth { k: usize, d: usize },
    #[error("non-zero budget {nnz} exceeds layer capacity {capacity}")]
    NnzExceedsCapacity { nnz: usize, capacity: usize },
}

/// Which mask invariant a layer maintains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// Only the total non-zero count is conserved (RigL).
    Unstructured,
    /// Every active row holds exactly `fan_in` non-zeros (SRigL).
    ConstantFanIn,
}

/// Per-layer mask state for dynamic sparse training.
///
/// Rows are output neurons; columns are the flattened dense fan-in. Ablated
/// neurons stay in storage with an empty mask row, so row indices are stable
/// across updates.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTopology {
    neurons: usize,
    dense_in: usize,
    mode: SparsityMode,
    mask: Vec<bool>,
    active: Vec<bool>,
    /// Constant fan-in of active rows; meaningful in `ConstantFanIn` mode.
    fan_in: usize,
    ablation_log: Vec<AblationEvent>,
}

/// One ablation event: which neurons were removed at which step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEvent {
    pub step: u64,
    pub neurons: Vec<usize>,
}

/// Per-update statistics record, one JSON line per layer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: u64,
    pub layer: usize,
    pub n_active: usize,
    pub k_prime: usize,
    pub nnz: usize,
    pub ablated_this_step: usize,
}

/// Active fraction and fan-in distribution of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStats {
    pub active_fraction: f64,
    /// Histogram of active-row fan-ins (`fan_in -> row count`).
    pub fan_in_histogram: BTreeMap<usize, usize>,
    /// Population variance of active-row fan-ins.
    pub fan_in_variance: f64,
}

/// Outcome of one RigL or SRigL update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub k_prime: usize,
    pub ablated: Vec<usize>,
    pub pruned: usize,
    pub grown: usize,
}

/// Outcome of the ablation step alone.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub k_prime: usize,
    pub ablated: Vec<usize>,
}

impl LayerTopology {
    /// Constant fan-in layer with a uniform random `k`-subset per row.
    pub fn constant_fan_in<R: Rng>(
        neurons: usize,
        dense_in: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<Self, TopologyError> {
        if fan_in > dense_in {
            return Err(TopologyError::FanInExceedsWidth {
                k: fan_in,
                d: dense_in,
            });
        }
        let mut mask = vec![false; neurons * dense_in];
        let mut cols: Vec<u32> = (0..dense_in as u32).collect();
        for row in 0..neurons {
            for t in 0..fan_in {
                let r = rng.gen_range(t..dense_in);
                cols.swap(t, r);
                mask[row * dense_in + cols[t] as usize] = true;
            }
        }
        Ok(Self {
            neurons,
            dense_in,
            mode: SparsityMode::ConstantFanIn,
            mask,
            active: vec![true; neurons],
            fan_in,
            ablation_log: Vec::new(),
        })
    }

    /// Unstructured layer with exactly `nnz` ones placed uniformly.
    pub fn unstructured<R: Rng>(
        neurons: usize,
        dense_in: usize,
        nnz: usize,
        rng: &mut R,
    ) -> Result<Self, TopologyError> {
        let capacity = neurons * dense_in;
        if nnz > capacity {
            return Err(TopologyError::NnzExceedsCapacity { nnz, capacity });
        }
        let mut mask = vec![false; capacity];
        let mut cells: Vec<u32> = (0..capacity as u32).collect();
        for t in 0..nnz {
            let r = rng.gen_range(t..capacity);
            cells.swap(t, r);
            mask[cells[t] as usize] = true;
        }
        Ok(Self {
            neurons,
            dense_in,
            mode: SparsityMode::Unstructured,
            mask,
            active: vec![true; neurons],
            fan_in: 0,
            ablation_log: Vec::new(),
        })
    }

    /// Builds from an explicit mask, validating the mode invariant.
    ///
    /// In constant fan-in mode every row must have either `fan_in` ones
    /// (active) or none (ablated).
    pub fn from_mask(
        mode: SparsityMode,
        neurons: usize,
        dense_in: usize,
        mask: Vec<bool>,
    ) -> Result<Self, TopologyError> {
        assert_eq!(mask.len(), neurons * dense_in, "mask length mismatch");
        let popcounts: Vec<usize> = (0..neurons)
            .map(|i| mask[i * dense_in..(i + 1) * dense_in].iter().filter(|&&b| b).count())
            .collect();
        let (active, fan_in) = match mode {
            SparsityMode::Unstructured => (vec![true; neurons], 0),
            SparsityMode::ConstantFanIn => {
                let k = popcounts.iter().copied().max().unwrap_or(0);
                for (row, &p) in popcounts.iter().enumerate() {
                    if p != 0 && p != k {
                        return Err(TopologyError::NonConstantFanIn {
                            row,
                            got: p,
                            expected: k,
                        });
                    }
                }
                (popcounts.iter().map(|&p| p > 0).collect(), k)
            }
        };
        Ok(Self {
            neurons,
            dense_in,
            mode,
            mask,
            active,
            fan_in,
            ablation_log: Vec::new(),
        })
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn dense_in(&self) -> usize {
        self.dense_in
    }

    pub fn mode(&self) -> SparsityMode {
        self.mode
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn mask_at(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.dense_in + j]
    }

    pub fn active_rows(&self) -> &[bool] {
        &self.active
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn ablation_log(&self) -> &[AblationEvent] {
        &self.ablation_log
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn nnz(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    fn row_popcount(&self, i: usize) -> usize {
        self.mask[i * self.dense_in..(i + 1) * self.dense_in]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    fn check_shape<T: Scalar>(&self, sal: &SaliencySnapshot<T>) -> Result<(), TopologyError> {
        let expected = (self.neurons, self.dense_in);
        let got = (sal.weight_mag.rows(), sal.weight_mag.cols());
        if got != expected {
            return Err(TopologyError::ShapeMismatch { expected, got });
        }
        let got = (sal.grad_mag.rows(), sal.grad_mag.cols());
        if got != expected {
            return Err(TopologyError::ShapeMismatch { expected, got });
        }
        Ok(())
    }

    /// Per-neuron count of salient weights: positions of the row that sit in
    /// the layer-wide top-`K` by active weight magnitude or in the top-`K` by
    /// gradient magnitude. Zero magnitudes carry no signal and are never
    /// counted as salient.
    pub fn count_salient<T: Scalar>(&self, sal: &SaliencySnapshot<T>) -> Vec<usize> {
        let k_update = sal.k_update;
        let mut counts = vec![0usize; self.neurons];
        if k_update == 0 {
            return counts;
        }
        let d = self.dense_in;

        let mut salient = vec![false; self.neurons * d];

        let mut by_weight: Vec<usize> = (0..self.neurons * d)
            .filter(|&f| self.mask[f] && sal.weight_mag.as_slice()[f] > T::zero())
            .collect();
        sort_by_magnitude_desc(&mut by_weight, sal.weight_mag.as_slice());
        for &f in by_weight.iter().take(k_update) {
            salient[f] = true;
            counts[f / d] += 1;
        }

        let mut by_grad: Vec<usize> = (0..self.neurons * d)
            .filter(|&f| sal.grad_mag.as_slice()[f] > T::zero())
            .collect();
        sort_by_magnitude_desc(&mut by_grad, sal.grad_mag.as_slice());
        for &f in by_grad.iter().take(k_update) {
            if !salient[f] {
                salient[f] = true;
                counts[f / d] += 1;
            }
        }
        counts
    }

    /// Ablates every active neuron whose salient-weight count falls below the
    /// policy threshold, decrementing the threshold and retrying while the
    /// implied fan-in `k' = floor(nnz_target / n_active)` would exceed the
    /// dense width (or no neuron would survive). At threshold zero nothing is
    /// ablated and `k'` equals the current fan-in, so the loop always
    /// terminates with a non-empty layer.
    pub fn ablate(
        &mut self,
        counts: &[usize],
        policy: &AblationPolicy,
        nnz_target: usize,
    ) -> Result<AblationOutcome, TopologyError> {
        if self.mode != SparsityMode::ConstantFanIn {
            return Err(TopologyError::ModeMismatch {
                expected: SparsityMode::ConstantFanIn,
                got: self.mode,
            });
        }
        assert_eq!(counts.len(), self.neurons, "counts length mismatch");
        let candidates: Vec<usize> = (0..self.neurons).filter(|&i| self.active[i]).collect();
        if nnz_target > candidates.len() * self.dense_in {
            return Err(TopologyError::NnzExceedsCapacity {
                nnz: nnz_target,
                capacity: candidates.len() * self.dense_in,
            });
        }
        let no_op = AblationOutcome {
            k_prime: self.fan_in,
            ablated: Vec::new(),
        };
        if candidates.is_empty() {
            return Ok(no_op);
        }
        let Some(initial) = policy.threshold(self.fan_in) else {
            return Ok(no_op);
        };

        let mut threshold = initial;
        loop {
            let to_ablate: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&i| counts[i] < threshold)
                .collect();
            let survivors = candidates.len() - to_ablate.len();
            if survivors > 0 {
                let k_prime = nnz_target / survivors;
                if k_prime <= self.dense_in {
                    for &i in &to_ablate {
                        self.active[i] = false;
                        self.mask[i * self.dense_in..(i + 1) * self.dense_in].fill(false);
                    }
                    return Ok(AblationOutcome {
                        k_prime,
                        ablated: to_ablate,
                    });
                }
            }
            debug_assert!(threshold > 0, "threshold 0 ablates nothing and k <= d");
            threshold -= 1;
        }
    }

    /// One unstructured RigL update: prune the `K` smallest-magnitude active
    /// weights, grow the `K` largest-gradient inactive positions. Grow
    /// candidates are the positions inactive before the update, so the
    /// non-zero count is conserved exactly.
    pub fn rigl_update<T: Scalar>(
        &mut self,
        sal: &SaliencySnapshot<T>,
    ) -> Result<UpdateOutcome, TopologyError> {
        if self.mode != SparsityMode::Unstructured {
            return Err(TopologyError::ModeMismatch {
                expected: SparsityMode::Unstructured,
                got: self.mode,
            });
        }
        self.check_shape(sal)?;
        let k_update = sal.k_update;
        let nnz = self.nnz();
        if k_update > nnz {
            return Err(TopologyError::KExceedsNnz { k: k_update, nnz });
        }
        let inactive = self.mask.len() - nnz;
        if inactive < k_update {
            return Err(TopologyError::InsufficientInactive {
                k: k_update,
                inactive,
            });
        }
        if k_update == 0 {
            return Ok(UpdateOutcome {
                k_prime: 0,
                ablated: Vec::new(),
                pruned: 0,
                grown: 0,
            });
        }

        let mut active_pos: Vec<usize> = (0..self.mask.len()).filter(|&f| self.mask[f]).collect();
        sort_by_magnitude_asc(&mut active_pos, sal.weight_mag.as_slice());
        let mut grow_pos: Vec<usize> = (0..self.mask.len()).filter(|&f| !self.mask[f]).collect();
        sort_by_magnitude_desc(&mut grow_pos, sal.grad_mag.as_slice());

        for &f in active_pos.iter().take(k_update) {
            self.mask[f] = false;
        }
        for &f in grow_pos.iter().take(k_update) {
            self.mask[f] = true;
        }
        Ok(UpdateOutcome {
            k_prime: 0,
            ablated: Vec::new(),
            pruned: k_update,
            grown: k_update,
        })
    }

    /// One SRigL update (steps 1-7 above).
    ///
    /// `nnz_target` is the layer's current non-zero count; after the update
    /// every active neuron has fan-in exactly `k'` and
    /// `n_active * k' <= nnz_target < n_active * (k' + 1)` — the flooring
    /// remainder is left unallocated for this update.
    pub fn srigl_update<T: Scalar>(
        &mut self,
        step: u64,
        sal: &SaliencySnapshot<T>,
        policy: &AblationPolicy,
    ) -> Result<UpdateOutcome, TopologyError> {
        if self.mode != SparsityMode::ConstantFanIn {
            return Err(TopologyError::ModeMismatch {
                expected: SparsityMode::ConstantFanIn,
                got: self.mode,
            });
        }
        self.check_shape(sal)?;
        let nnz_target = self.nnz();
        if sal.k_update > nnz_target {
            return Err(TopologyError::KExceedsNnz {
                k: sal.k_update,
                nnz: nnz_target,
            });
        }

        let counts = self.count_salient(sal);
        let abl = self.ablate(&counts, policy, nnz_target)?;
        let k_prime = abl.k_prime;

        // Step 6: layer-wide magnitude pruning over the surviving weights.
        // Ablation-removed weights do not count toward K; K is capped by
        // what remains.
        let mut active_pos: Vec<usize> = (0..self.mask.len()).filter(|&f| self.mask[f]).collect();
        let k_prune = sal.k_update.min(active_pos.len());
        sort_by_magnitude_asc(&mut active_pos, sal.weight_mag.as_slice());
        for &f in active_pos.iter().take(k_prune) {
            self.mask[f] = false;
        }

        // Step 7: per-neuron regrowth to the new fan-in, largest gradient
        // magnitude first. Positions pruned in step 6 are eligible again.
        let d = self.dense_in;
        let mut grown = 0usize;
        let mut candidates: Vec<usize> = Vec::with_capacity(d);
        for i in 0..self.neurons {
            if !self.active[i] {
                continue;
            }
            let have = self.row_popcount(i);
            if have >= k_prime {
                debug_assert_eq!(have, k_prime.min(have));
                continue;
            }
            let needed = k_prime - have;
            candidates.clear();
            candidates.extend((i * d..(i + 1) * d).filter(|&f| !self.mask[f]));
            if candidates.len() < needed {
                return Err(TopologyError::RegrowExhausted {
                    row: i,
                    needed,
                    candidates: candidates.len(),
                });
            }
            sort_by_magnitude_desc(&mut candidates, sal.grad_mag.as_slice());
            for &f in candidates.iter().take(needed) {
                self.mask[f] = true;
            }
            grown += needed;
        }

        self.fan_in = k_prime;
        if !abl.ablated.is_empty() {
            self.ablation_log.push(AblationEvent {
                step,
                neurons: abl.ablated.clone(),
            });
        }
        debug_assert!(self.check_constant_fan_in().is_ok());
        Ok(UpdateOutcome {
            k_prime,
            ablated: abl.ablated,
            pruned: k_prune,
            grown,
        })
    }

    /// Verifies the constant fan-in invariant (every active row has exactly
    /// `fan_in` ones, every inactive row none).
    pub fn check_constant_fan_in(&self) -> Result<(), TopologyError> {
        for i in 0..self.neurons {
            let p = self.row_popcount(i);
            let expected = if self.active[i] { self.fan_in } else { 0 };
            if p != expected {
                return Err(TopologyError::NonConstantFanIn {
                    row: i,
                    got: p,
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Active fraction and fan-in histogram of the current mask.
    ///
    /// A neuron counts as active when it has at least one incoming weight,
    /// which also captures the implicit ablation an unstructured layer can
    /// accumulate.
    pub fn ablation_stats(&self) -> AblationStats {
        let mut hist = BTreeMap::new();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..self.neurons {
            let p = self.row_popcount(i);
            if p > 0 {
                *hist.entry(p).or_insert(0) += 1;
                sum += p as f64;
                count += 1;
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        let mut var = 0.0;
        for (&fan_in, &rows) in &hist {
            let diff = fan_in as f64 - mean;
            var += rows as f64 * diff * diff;
        }
        if count > 0 {
            var /= count as f64;
        }
        AblationStats {
            active_fraction: if self.neurons == 0 {
                0.0
            } else {
                count as f64 / self.neurons as f64
            },
            fan_in_histogram: hist,
            fan_in_variance: var,
        }
    }

    /// Builds the per-update statistics record.
    pub fn update_record(&self, step: u64, layer: usize, ablated_this_step: usize) -> UpdateRecord {
        UpdateRecord {
            step,
            layer,
            n_active: self.n_active(),
            k_prime: self.fan_in,
            nnz: self.nnz(),
            ablated_this_step,
        }
    }
}

fn sort_by_magnitude_desc<T: Scalar>(positions: &mut [usize], mags: &[T]) {
    positions.sort_by(|&a, &b| {
        mags[b]
            .partial_cmp(&mags[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
}

fn sort_by_magnitude_asc<T: Scalar>(positions: &mut [usize], mags: &[T]) {
    positions.sort_by(|&a, &b| {
        mags[a]
            .partial_cmp(&mags[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
}

/// Weight and gradient magnitudes captured at an update step, plus `K`.
#[derive(Debug, Clone)]
pub struct SaliencySnapshot<T> {
    /// `n x d` absolute weights; zero at inactive positions.
    pub weight_mag: DenseMatrix<T>,
    /// `n x d` absolute dense gradients.
    pub grad_mag: DenseMatrix<T>,
    /// Number of weights to prune and grow this update.
    pub k_update: usize,
}

impl<T: Scalar> SaliencySnapshot<T> {
    /// Takes absolute values of raw weights and gradients.
    pub fn from_raw(weights: &DenseMatrix<T>, grads: &DenseMatrix<T>, k_update: usize) -> Self {
        Self {
            weight_mag: weights.map(|x| x.abs()),
            grad_mag: grads.map(|x| x.abs()),
            k_update,
        }
    }
}

/// Update cadence and drop-fraction schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateSchedule {
    /// Steps between connectivity updates.
    pub delta_t: u64,
    /// Initial drop fraction.
    pub alpha: f64,
    /// Fraction of total steps after which the mask freezes.
    pub end_fraction: f64,
    pub total_steps: u64,
}

impl UpdateSchedule {
    pub fn new(
        delta_t: u64,
        alpha: f64,
        end_fraction: f64,
        total_steps: u64,
    ) -> Result<Self, TopologyError> {
        if delta_t == 0 {
            return Err(TopologyError::InvalidSchedule("delta_t must be >= 1".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(TopologyError::InvalidSchedule(format!(
                "alpha {alpha} outside (0, 1)"
            )));
        }
        if !(end_fraction > 0.0 && end_fraction <= 1.0) {
            return Err(TopologyError::InvalidSchedule(format!(
                "end_fraction {end_fraction} outside (0, 1]"
            )));
        }
        Ok(Self {
            delta_t,
            alpha,
            end_fraction,
            total_steps,
        })
    }

    /// Last step at which the mask may still change.
    pub fn t_end(&self) -> f64 {
        self.end_fraction * self.total_steps as f64
    }

    /// Cosine-annealed drop fraction
    /// `f(t) = alpha/2 (1 + cos(pi t / t_end))` for `t <= t_end`, zero after.
    pub fn drop_fraction(&self, t: u64) -> f64 {
        let t_end = self.t_end();
        let t = t as f64;
        if t > t_end {
            return 0.0;
        }
        self.alpha / 2.0 * (1.0 + (std::f64::consts::PI * t / t_end).cos())
    }
}

/// Minimum-salient-weight policy for neuron ablation.
///
/// The per-neuron threshold is `ceil(gamma_sal * k)` floored at one weight;
/// `gamma_sal = 0` disables ablation entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationPolicy {
    pub gamma_sal: f64,
}

impl AblationPolicy {
    pub fn new(gamma_sal: f64) -> Result<Self, TopologyError> {
        if !(0.0..=1.0).contains(&gamma_sal) {
            return Err(TopologyError::InvalidPolicy(gamma_sal));
        }
        Ok(Self { gamma_sal })
    }

    pub fn disabled() -> Self {
        Self { gamma_sal: 0.0 }
    }

    /// Effective salient-weight threshold for fan-in `k`, or `None` when
    /// ablation is disabled. The epsilon guards against representation noise
    /// in `gamma_sal * k` (e.g. 0.3 * 20).
    pub fn threshold(&self, k: usize) -> Option<usize> {
        if self.gamma_sal == 0.0 {
            return None;
        }
        let raw = (self.gamma_sal * k as f64 - 1e-9).ceil();
        Some((raw as usize).max(1))
    }
}

/// Parameter-shape of one layer, as seen by the ERK allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerShape {
    Linear {
        n_in: usize,
        n_out: usize,
    },
    Conv {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
    },
}

impl LayerShape {
    pub fn param_count(&self) -> u64 {
        match *self {
            LayerShape::Linear { n_in, n_out } => (n_in * n_out) as u64,
            LayerShape::Conv { c_in, c_out, kh, kw } => (c_in * c_out * kh * kw) as u64,
        }
    }

    /// Raw ERK density factor: sum of the parameter-tensor dimensions over
    /// their product.
    fn erk_raw(&self) -> f64 {
        match *self {
            LayerShape::Linear { n_in, n_out } => {
                (n_in + n_out) as f64 / (n_in * n_out) as f64
            }
            LayerShape::Conv { c_in, c_out, kh, kw } => {
                (c_in + c_out + kh + kw) as f64 / (c_in * c_out * kh * kw) as f64
            }
        }
    }
}

/// Distributes a global sparsity over layers with the Erdős–Rényi-kernel
/// rule: per-layer density proportional to the raw factor above, rescaled so
/// the total non-zero budget matches `(1 - global) * total_params`. Layers
/// whose scaled density would exceed one are capped dense and the scale is
/// re-solved over the rest.
pub fn erk_sparsities(
    shapes: &[LayerShape],
    global_sparsity: f64,
) -> Result<Vec<f64>, TopologyError> {
    if !(0.0..1.0).contains(&global_sparsity) {
        return Err(TopologyError::SparsityOutOfRange(global_sparsity));
    }
    if shapes.is_empty() {
        return Ok(Vec::new());
    }
    let total: u64 = shapes.iter().map(|s| s.param_count()).sum();
    let budget = ((1.0 - global_sparsity) * total as f64).floor() as u64;
    if budget < shapes.len() as u64 {
        return Err(TopologyError::InfeasibleSparsity {
            budget,
            layers: shapes.len(),
        });
    }

    let raw: Vec<f64> = shapes.iter().map(|s| s.erk_raw()).collect();
    let mut dense = vec![false; shapes.len()];
    loop {
        let mut rhs = 0.0;
        let mut divisor = 0.0;
        for (i, shape) in shapes.iter().enumerate() {
            let params = shape.param_count() as f64;
            if dense[i] {
                rhs -= params * global_sparsity;
            } else {
                rhs += params * (1.0 - global_sparsity);
                divisor += raw[i] * params;
            }
        }
        let eps = rhs / divisor;
        // cap the most raw-dense layer(s) and re-solve if the scale overshoots
        let max_raw = raw
            .iter()
            .zip(&dense)
            .filter(|(_, &d)| !d)
            .map(|(&r, _)| r)
            .fold(f64::MIN, f64::max);
        if max_raw * eps > 1.0 {
            for i in 0..shapes.len() {
                if !dense[i] && raw[i] == max_raw {
                    dense[i] = true;
                }
            }
            continue;
        }
        return Ok(shapes
            .iter()
            .enumerate()
            .map(|(i, _)| if dense[i] { 0.0 } else { 1.0 - eps * raw[i] })
            .collect());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Golden fixture from the worked three-neuron example: d = 4, k = 2,
    /// weights (by magnitude) rows {0.9, 0.8}, {0.01, 0.02}, {0.7, 0.03}.
    fn fixture() -> (LayerTopology, SaliencySnapshot<f64>) {
        let mut mask = vec![false; 12];
        let mut w = DenseMatrix::zeros(3, 4);
        for (i, j, v) in [
            (0, 0, 0.9),
            (0, 1, 0.8),
            (1, 1, 0.01),
            (1, 3, 0.02),
            (2, 0, 0.7),
            (2, 3, 0.03),
        ] {
            mask[i * 4 + j] = true;
            w.set(i, j, v);
        }
        let layer = LayerTopology::from_mask(SparsityMode::ConstantFanIn, 3, 4, mask).unwrap();
        assert_eq!(layer.fan_in(), 2);
        let mut g = DenseMatrix::zeros(3, 4);
        for (i, j, v) in [
            (0, 0, 0.01),
            (0, 1, 0.02),
            (0, 2, 0.5),
            (0, 3, 0.05),
            (1, 0, 0.001),
            (1, 1, 0.002),
            (1, 2, 0.003),
            (1, 3, 0.004),
            (2, 0, 0.4),
            (2, 1, 0.6),
            (2, 2, 0.3),
            (2, 3, 0.1),
        ] {
            g.set(i, j, v);
        }
        let sal = SaliencySnapshot::from_raw(&w, &g, 2);
        (layer, sal)
    }

    fn row_cols(layer: &LayerTopology, i: usize) -> Vec<usize> {
        (0..layer.dense_in()).filter(|&j| layer.mask_at(i, j)).collect()
    }

    #[test]
    fn count_salient_fixture_counts() {
        let (layer, sal) = fixture();
        assert_eq!(layer.count_salient(&sal), vec![3, 0, 1]);
    }

    #[test]
    fn count_salient_k_equals_nnz_zero_grads_gives_fan_in() {
        let (layer, sal) = fixture();
        let sal = SaliencySnapshot {
            grad_mag: DenseMatrix::zeros(3, 4),
            k_update: layer.nnz(),
            ..sal
        };
        assert_eq!(layer.count_salient(&sal), vec![2, 2, 2]);
    }

    #[test]
    fn count_salient_k_zero_gives_zeros() {
        let (layer, sal) = fixture();
        let sal = SaliencySnapshot { k_update: 0, ..sal };
        assert_eq!(layer.count_salient(&sal), vec![0, 0, 0]);
    }

    #[test]
    fn ablate_disabled_policy_is_identity() {
        let (mut layer, sal) = fixture();
        let counts = layer.count_salient(&sal);
        let before = layer.clone();
        let out = layer
            .ablate(&counts, &AblationPolicy::disabled(), layer.nnz())
            .unwrap();
        assert_eq!(out.k_prime, 2);
        assert!(out.ablated.is_empty());
        assert_eq!(layer, before);
    }

    #[test]
    fn ablate_fixture_removes_neuron_one() {
        let (mut layer, sal) = fixture();
        let counts = layer.count_salient(&sal);
        let policy = AblationPolicy::new(0.5).unwrap();
        assert_eq!(policy.threshold(2), Some(1));
        let out = layer.ablate(&counts, &policy, 6).unwrap();
        assert_eq!(out.ablated, vec![1]);
        assert_eq!(out.k_prime, 3);
        assert!(!layer.active_rows()[1]);
        assert_eq!(layer.row_popcount(1), 0);
    }

    #[test]
    fn ablate_threshold_loop_bottoms_out_when_infeasible() {
        // dense 4x4 rows: ablating any neuron would push k' above d = 4,
        // so the loop decrements to zero and ablates nothing
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = LayerTopology::constant_fan_in(4, 4, 4, &mut rng).unwrap();
        let counts = vec![4, 0, 0, 0];
        let policy = AblationPolicy::new(1.0).unwrap();
        let out = layer.ablate(&counts, &policy, 16).unwrap();
        assert!(out.ablated.is_empty());
        assert_eq!(out.k_prime, 4);
        assert_eq!(layer.n_active(), 4);
        assert_eq!(layer.nnz(), 16);
    }

    #[test]
    fn ablate_partial_when_width_allows() {
        // same counts but d = 8 leaves headroom: k' = 16/2 = 8 <= 8 works at
        // the initial threshold
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = LayerTopology::constant_fan_in(4, 8, 4, &mut rng).unwrap();
        let counts = vec![4, 4, 0, 0];
        let policy = AblationPolicy::new(1.0).unwrap();
        let out = layer.ablate(&counts, &policy, 16).unwrap();
        assert_eq!(out.ablated, vec![2, 3]);
        assert_eq!(out.k_prime, 8);
    }

    #[test]
    fn ablate_all_below_threshold_never_empties_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = LayerTopology::constant_fan_in(3, 4, 2, &mut rng).unwrap();
        let counts = vec![0, 0, 0];
        let policy = AblationPolicy::new(0.9).unwrap();
        let out = layer.ablate(&counts, &policy, 6).unwrap();
        assert!(out.ablated.is_empty());
        assert_eq!(out.k_prime, 2);
        assert_eq!(layer.n_active(), 3);
    }

    #[test]
    fn srigl_update_golden_fixture() {
        let (mut layer, sal) = fixture();
        let policy = AblationPolicy::new(0.5).unwrap();
        let out = layer.srigl_update(7, &sal, &policy).unwrap();

        assert_eq!(out.ablated, vec![1]);
        assert_eq!(out.k_prime, 3);
        assert_eq!(out.pruned, 2);
        // neuron 0 regrows col 2 (grad 0.5); neuron 2 regrows cols {0,1,2}
        assert_eq!(row_cols(&layer, 0), vec![0, 1, 2]);
        assert_eq!(row_cols(&layer, 1), Vec::<usize>::new());
        assert_eq!(row_cols(&layer, 2), vec![0, 1, 2]);
        assert_eq!(layer.fan_in(), 3);
        assert_eq!(layer.nnz(), 6);
        assert_eq!(layer.n_active(), 2);
        layer.check_constant_fan_in().unwrap();
        assert_eq!(
            layer.ablation_log(),
            &[AblationEvent {
                step: 7,
                neurons: vec![1]
            }]
        );
    }

    #[test]
    fn srigl_update_noop_with_zero_k_and_disabled_ablation() {
        let (mut layer, sal) = fixture();
        let sal = SaliencySnapshot { k_update: 0, ..sal };
        let before = layer.clone();
        let out = layer.srigl_update(0, &sal, &AblationPolicy::disabled()).unwrap();
        assert_eq!(out.k_prime, 2);
        assert_eq!(out.pruned, 0);
        assert_eq!(out.grown, 0);
        assert_eq!(layer, before);
    }

    #[test]
    fn srigl_update_rejects_unstructured_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = LayerTopology::unstructured(3, 4, 6, &mut rng).unwrap();
        let sal = SaliencySnapshot {
            weight_mag: DenseMatrix::<f64>::zeros(3, 4),
            grad_mag: DenseMatrix::zeros(3, 4),
            k_update: 0,
        };
        assert!(matches!(
            layer.srigl_update(0, &sal, &AblationPolicy::disabled()),
            Err(TopologyError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn srigl_randomized_updates_keep_constant_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for gamma in [0.0, 0.3, 0.5, 0.95] {
            let policy = AblationPolicy::new(gamma).unwrap();
            let mut layer = LayerTopology::constant_fan_in(12, 24, 6, &mut rng).unwrap();
            for step in 0..200 {
                let nnz_before = layer.nnz();
                let w = DenseMatrix::from_fn(12, 24, |i, j| {
                    if layer.mask_at(i, j) {
                        rng.gen_range(0.01..1.0)
                    } else {
                        0.0
                    }
                });
                let g = DenseMatrix::from_fn(12, 24, |_, _| rng.gen_range(-1.0..1.0));
                let k_update = (0.3 * nnz_before as f64).floor() as usize;
                let sal = SaliencySnapshot::from_raw(&w, &g, k_update);
                let out = layer.srigl_update(step, &sal, &policy).unwrap();
                layer.check_constant_fan_in().unwrap();
                let n_active = layer.n_active();
                assert!(n_active >= 1);
                assert!(n_active * out.k_prime <= nnz_before);
                assert!(nnz_before < n_active * (out.k_prime + 1));
                assert_eq!(layer.nnz(), n_active * out.k_prime);
            }
        }
    }

    #[test]
    fn srigl_trajectory_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut layer = LayerTopology::constant_fan_in(8, 16, 4, &mut rng).unwrap();
            let policy = AblationPolicy::new(0.3).unwrap();
            for step in 0..50 {
                let w = DenseMatrix::from_fn(8, 16, |i, j| {
                    if layer.mask_at(i, j) {
                        rng.gen_range(0.01..1.0)
                    } else {
                        0.0
                    }
                });
                let g = DenseMatrix::from_fn(8, 16, |_, _| rng.gen_range(-1.0..1.0));
                let sal = SaliencySnapshot::from_raw(&w, &g, 6);
                layer.srigl_update(step, &sal, &policy).unwrap();
            }
            layer
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rigl_update_zero_k_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = LayerTopology::unstructured(4, 6, 10, &mut rng).unwrap();
        let before = layer.clone();
        let sal = SaliencySnapshot {
            weight_mag: DenseMatrix::<f64>::zeros(4, 6),
            grad_mag: DenseMatrix::zeros(4, 6),
            k_update: 0,
        };
        layer.rigl_update(&sal).unwrap();
        assert_eq!(layer, before);
    }

    #[test]
    fn rigl_update_single_swap_exhaustive() {
        // nnz = 2 in a 2x2 layer: smallest weight at (0,0), largest inactive
        // gradient at (1,1) -> exactly that swap
        let mask = vec![true, false, true, false];
        let mut layer = LayerTopology::from_mask(SparsityMode::Unstructured, 2, 2, mask).unwrap();
        let w = DenseMatrix::from_vec(2, 2, vec![0.1, 0.0, 0.9, 0.0]);
        let g = DenseMatrix::from_vec(2, 2, vec![0.0, 0.2, 0.0, 0.7]);
        let sal = SaliencySnapshot::from_raw(&w, &g, 1);
        layer.rigl_update(&sal).unwrap();
        assert_eq!(layer.mask(), &[false, false, true, true]);
        assert_eq!(layer.nnz(), 2);
    }

    #[test]
    fn rigl_updates_conserve_nnz() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = LayerTopology::unstructured(10, 20, 37, &mut rng).unwrap();
        for _ in 0..100 {
            let w = DenseMatrix::from_fn(10, 20, |i, j| {
                if layer.mask_at(i, j) {
                    rng.gen_range(0.01..1.0)
                } else {
                    0.0
                }
            });
            let g = DenseMatrix::from_fn(10, 20, |_, _| rng.gen_range(-1.0..1.0));
            let sal = SaliencySnapshot::from_raw(&w, &g, 9);
            layer.rigl_update(&sal).unwrap();
            assert_eq!(layer.nnz(), 37);
        }
    }

    #[test]
    fn rigl_update_rejects_insufficient_inactive() {
        let mask = vec![true; 4];
        let mut layer = LayerTopology::from_mask(SparsityMode::Unstructured, 2, 2, mask).unwrap();
        let sal = SaliencySnapshot {
            weight_mag: DenseMatrix::<f64>::zeros(2, 2),
            grad_mag: DenseMatrix::zeros(2, 2),
            k_update: 1,
        };
        assert!(matches!(
            layer.rigl_update(&sal),
            Err(TopologyError::InsufficientInactive { k: 1, inactive: 0 })
        ));
    }

    #[test]
    fn ablation_stats_full_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = LayerTopology::constant_fan_in(5, 8, 3, &mut rng).unwrap();
        let stats = layer.ablation_stats();
        assert_eq!(stats.active_fraction, 1.0);
        assert_eq!(stats.fan_in_histogram.get(&3), Some(&5));
        assert_eq!(stats.fan_in_variance, 0.0);
    }

    #[test]
    fn ablation_stats_after_fixture_update() {
        let (mut layer, sal) = fixture();
        let policy = AblationPolicy::new(0.5).unwrap();
        layer.srigl_update(0, &sal, &policy).unwrap();
        let stats = layer.ablation_stats();
        assert!((stats.active_fraction - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ablation_stats_unstructured_fan_in_variance() {
        // rows with popcounts 1 and 3 -> non-zero variance
        let mask = vec![true, false, false, false, true, true, true, false];
        let layer = LayerTopology::from_mask(SparsityMode::Unstructured, 2, 4, mask).unwrap();
        let stats = layer.ablation_stats();
        assert!(stats.fan_in_variance > 0.0);
        assert_eq!(stats.fan_in_histogram.len(), 2);
    }

    #[test]
    fn drop_fraction_endpoints_and_midpoint() {
        let sched = UpdateSchedule::new(100, 0.3, 0.75, 10_000).unwrap();
        assert_eq!(sched.drop_fraction(0), 0.3);
        assert!(sched.drop_fraction(7_500).abs() < 1e-15);
        assert!((sched.drop_fraction(3_750) - 0.15).abs() < 1e-12);
        assert_eq!(sched.drop_fraction(7_501), 0.0);
        assert_eq!(sched.drop_fraction(10_000), 0.0);
    }

    #[test]
    fn drop_fraction_is_non_increasing() {
        let sched = UpdateSchedule::new(10, 0.3, 0.75, 1_000).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..=1_000 {
            let f = sched.drop_fraction(t);
            assert!(f <= prev + 1e-15, "increase at t={t}");
            prev = f;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(UpdateSchedule::new(0, 0.3, 0.75, 100).is_err());
        assert!(UpdateSchedule::new(10, 0.0, 0.75, 100).is_err());
        assert!(UpdateSchedule::new(10, 1.0, 0.75, 100).is_err());
        assert!(UpdateSchedule::new(10, 0.3, 0.0, 100).is_err());
        assert!(UpdateSchedule::new(10, 0.3, 1.25, 100).is_err());
    }

    #[test]
    fn policy_threshold_ceiling_then_floor() {
        let p = AblationPolicy::new(0.3).unwrap();
        assert_eq!(p.threshold(10), Some(3));
        assert_eq!(p.threshold(20), Some(6));
        assert_eq!(p.threshold(1), Some(1));
        assert_eq!(p.threshold(2), Some(1));
        let p = AblationPolicy::new(0.5).unwrap();
        assert_eq!(p.threshold(2), Some(1));
        assert_eq!(p.threshold(3), Some(2));
        assert_eq!(AblationPolicy::disabled().threshold(10), None);
        assert!(AblationPolicy::new(1.5).is_err());
    }

    #[test]
    fn erk_single_layer_gets_global_sparsity() {
        let shapes = [LayerShape::Linear { n_in: 64, n_out: 32 }];
        let s = erk_sparsities(&shapes, 0.9).unwrap();
        assert!((s[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn erk_identical_layers_get_equal_sparsity() {
        let shapes = [
            LayerShape::Linear { n_in: 128, n_out: 64 },
            LayerShape::Linear { n_in: 128, n_out: 64 },
        ];
        let s = erk_sparsities(&shapes, 0.8).unwrap();
        assert!((s[0] - s[1]).abs() < 1e-12);
        assert!((s[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn erk_smaller_layer_is_denser_and_budget_matches() {
        let shapes = [
            LayerShape::Linear { n_in: 256, n_out: 256 },
            LayerShape::Linear { n_in: 16, n_out: 16 },
        ];
        let global = 0.9;
        let s = erk_sparsities(&shapes, global).unwrap();
        assert!(s[1] < s[0], "smaller layer should be denser: {s:?}");
        let total: f64 = shapes.iter().map(|l| l.param_count() as f64).sum();
        let nnz: f64 = shapes
            .iter()
            .zip(&s)
            .map(|(l, &si)| (1.0 - si) * l.param_count() as f64)
            .sum();
        assert!(
            (nnz - (1.0 - global) * total).abs() < 1.0,
            "budget off: {nnz} vs {}",
            (1.0 - global) * total
        );
    }

    #[test]
    fn erk_caps_tiny_layers_dense() {
        let shapes = [
            LayerShape::Linear { n_in: 1000, n_out: 1000 },
            LayerShape::Linear { n_in: 2, n_out: 2 },
        ];
        let s = erk_sparsities(&shapes, 0.5).unwrap();
        assert_eq!(s[1], 0.0, "tiny layer should be capped dense");
        let total: f64 = shapes.iter().map(|l| l.param_count() as f64).sum();
        let nnz: f64 = shapes
            .iter()
            .zip(&s)
            .map(|(l, &si)| (1.0 - si) * l.param_count() as f64)
            .sum();
        assert!((nnz - 0.5 * total).abs() < 1.0);
    }

    #[test]
    fn erk_conv_uses_kernel_dimensions() {
        let shapes = [
            LayerShape::Conv { c_in: 64, c_out: 64, kh: 3, kw: 3 },
            LayerShape::Linear { n_in: 192, n_out: 192 },
        ];
        // equal parameter counts (36864), but the conv raw factor
        // (64+64+3+3)/36864 differs from the linear one (384/36864)
        assert_eq!(shapes[0].param_count(), shapes[1].param_count());
        let s = erk_sparsities(&shapes, 0.9).unwrap();
        assert!(s[0] > s[1], "conv should be sparser here: {s:?}");
    }

    #[test]
    fn erk_rejects_bad_global_and_infeasible_budget() {
        let shapes = [LayerShape::Linear { n_in: 4, n_out: 4 }];
        assert!(matches!(
            erk_sparsities(&shapes, 1.0),
            Err(TopologyError::SparsityOutOfRange(_))
        ));
        let many: Vec<LayerShape> = (0..20)
            .map(|_| LayerShape::Linear { n_in: 1, n_out: 1 })
            .collect();
        assert!(matches!(
            erk_sparsities(&many, 0.99),
            Err(TopologyError::InfeasibleSparsity { .. })
        ));
    }

    #[test]
    fn update_record_serializes_to_flat_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = LayerTopology::constant_fan_in(4, 8, 2, &mut rng).unwrap();
        let rec = layer.update_record(100, 1, 0);
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            r#"{"step":100,"layer":1,"n_active":4,"k_prime":2,"nnz":8,"ablated_this_step":0}"#
        );
    }
}

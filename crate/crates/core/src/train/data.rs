//! Data sources for the trainer: a seeded Gaussian-blob generator and an
//! IDX-format image loader. No network access; IDX files are read from disk.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense::DenseMatrix;
use crate::train::TrainError;

/// Big-endian magic of an IDX file holding unsigned-byte images
/// (3 dimensions: count, rows, cols).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Big-endian magic of an IDX file holding unsigned-byte labels.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Streaming source of training batches plus a fixed evaluation set.
///
/// Batches are column-major: inputs are `input_dim x batch`, one sample per
/// column.
pub trait DataSource {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn next_train_batch(&mut self, batch: usize) -> (DenseMatrix<f64>, Vec<usize>);
    fn eval_set(&self) -> (&DenseMatrix<f64>, &[usize]);
}

/// Synthetic isotropic Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub dim: usize,
    pub classes: usize,
    /// Standard deviation of class-center coordinates.
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    /// Per-coordinate sample noise around the class center.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Seed for centers and the evaluation set; independent of the run seed
    /// so every run of a config sees the same task.
    #[serde(default = "default_task_seed")]
    pub task_seed: u64,
}

fn default_center_scale() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

fn default_eval_size() -> usize {
    512
}

fn default_task_seed() -> u64 {
    7
}

pub struct BlobTask {
    dim: usize,
    classes: usize,
    noise: f64,
    /// `classes x dim` center coordinates.
    centers: DenseMatrix<f64>,
    eval_x: DenseMatrix<f64>,
    eval_y: Vec<usize>,
    rng: ChaCha8Rng,
}

impl BlobTask {
    pub fn new(cfg: &BlobConfig, run_seed: u64) -> Result<Self, TrainError> {
        if cfg.dim == 0 || cfg.classes < 2 || cfg.eval_size == 0 {
            return Err(TrainError::Config(
                "blob task needs dim >= 1, classes >= 2, eval_size >= 1".into(),
            ));
        }
        let mut task_rng = ChaCha8Rng::seed_from_u64(cfg.task_seed);
        let centers = DenseMatrix::from_fn(cfg.classes, cfg.dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut task_rng);
            cfg.center_scale * z
        });
        let mut partial = Self {
            dim: cfg.dim,
            classes: cfg.classes,
            noise: cfg.noise,
            centers,
            eval_x: DenseMatrix::zeros(0, 0),
            eval_y: Vec::new(),
            rng: task_rng,
        };
        let (eval_x, eval_y) = partial.sample(cfg.eval_size);
        partial.eval_x = eval_x;
        partial.eval_y = eval_y;
        // training stream depends on the run seed
        partial.rng = ChaCha8Rng::seed_from_u64(run_seed);
        partial.rng.set_stream(2);
        Ok(partial)
    }

    fn sample(&mut self, count: usize) -> (DenseMatrix<f64>, Vec<usize>) {
        let mut x = DenseMatrix::zeros(self.dim, count);
        let mut y = Vec::with_capacity(count);
        for col in 0..count {
            let label = self.rng.gen_range(0..self.classes);
            y.push(label);
            for j in 0..self.dim {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                x.set(j, col, self.centers.at(label, j) + self.noise * z);
            }
        }
        (x, y)
    }
}

impl DataSource for BlobTask {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn next_train_batch(&mut self, batch: usize) -> (DenseMatrix<f64>, Vec<usize>) {
        self.sample(batch)
    }

    fn eval_set(&self) -> (&DenseMatrix<f64>, &[usize]) {
        (&self.eval_x, &self.eval_y)
    }
}

/// File locations of an IDX image-classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

pub struct IdxTask {
    dim: usize,
    classes: usize,
    train_x: DenseMatrix<f64>,
    train_y: Vec<usize>,
    eval_x: DenseMatrix<f64>,
    eval_y: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl IdxTask {
    pub fn load(cfg: &IdxConfig, run_seed: u64) -> Result<Self, TrainError> {
        let (train_x, train_y) = load_idx_pair(&cfg.train_images, &cfg.train_labels)?;
        let (eval_x, eval_y) = load_idx_pair(&cfg.test_images, &cfg.test_labels)?;
        if train_x.rows() != eval_x.rows() {
            return Err(TrainError::Data(format!(
                "train dim {} != test dim {}",
                train_x.rows(),
                eval_x.rows()
            )));
        }
        let classes = train_y
            .iter()
            .chain(eval_y.iter())
            .copied()
            .max()
            .map_or(0, |m| m + 1);
        if classes < 2 {
            return Err(TrainError::Data("need at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        rng.set_stream(2);
        Ok(Self {
            dim: train_x.rows(),
            classes,
            order: (0..train_y.len()).collect(),
            cursor: train_y.len(), // forces a shuffle on first batch
            train_x,
            train_y,
            eval_x,
            eval_y,
            rng,
        })
    }
}

impl DataSource for IdxTask {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn next_train_batch(&mut self, batch: usize) -> (DenseMatrix<f64>, Vec<usize>) {
        let mut x = DenseMatrix::zeros(self.dim, batch);
        let mut y = Vec::with_capacity(batch);
        for col in 0..batch {
            if self.cursor >= self.order.len() {
                // fresh epoch: Fisher-Yates reshuffle
                for t in (1..self.order.len()).rev() {
                    let r = self.rng.gen_range(0..=t);
                    self.order.swap(t, r);
                }
                self.cursor = 0;
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            y.push(self.train_y[idx]);
            for j in 0..self.dim {
                x.set(j, col, self.train_x.at(j, idx));
            }
        }
        (x, y)
    }

    fn eval_set(&self) -> (&DenseMatrix<f64>, &[usize]) {
        (&self.eval_x, &self.eval_y)
    }
}

fn load_idx_pair(
    images_path: &str,
    labels_path: &str,
) -> Result<(DenseMatrix<f64>, Vec<usize>), TrainError> {
    let open = |p: &str| -> Result<BufReader<File>, TrainError> {
        File::open(Path::new(p))
            .map(BufReader::new)
            .map_err(|e| TrainError::Data(format!("{p}: {e}")))
    };
    let (count, rows, cols, pixels) = read_idx_images(&mut open(images_path)?)
        .map_err(|e| TrainError::Data(format!("{images_path}: {e}")))?;
    let labels = read_idx_labels(&mut open(labels_path)?)
        .map_err(|e| TrainError::Data(format!("{labels_path}: {e}")))?;
    if labels.len() != count {
        return Err(TrainError::Data(format!(
            "{labels_path}: {} labels for {count} images",
            labels.len()
        )));
    }
    let dim = rows * cols;
    // column-major: sample per column, pixels scaled to [0, 1]
    let mut x = DenseMatrix::zeros(dim, count);
    for (i, chunk) in pixels.chunks_exact(dim).enumerate() {
        for (j, &p) in chunk.iter().enumerate() {
            x.set(j, i, p as f64 / 255.0);
        }
    }
    Ok((x, labels.iter().map(|&l| l as usize).collect()))
}

/// Parses an IDX unsigned-byte image file (magic `0x00000803`); returns
/// `(count, rows, cols, pixels)` with pixels row-major per image.
pub fn read_idx_images<R: Read>(r: &mut R) -> Result<(usize, usize, usize, Vec<u8>), String> {
    let magic = read_u32_be(r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format!("bad image magic {magic:#010x}"));
    }
    let count = read_u32_be(r)? as usize;
    let rows = read_u32_be(r)? as usize;
    let cols = read_u32_be(r)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    r.read_exact(&mut pixels).map_err(|e| e.to_string())?;
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX unsigned-byte label file (magic `0x00000801`).
pub fn read_idx_labels<R: Read>(r: &mut R) -> Result<Vec<u8>, String> {
    let magic = read_u32_be(r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format!("bad label magic {magic:#010x}"));
    }
    let count = read_u32_be(r)? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels).map_err(|e| e.to_string())?;
    Ok(labels)
}

fn read_u32_be<R: Read>(r: &mut R) -> Result<u32, String> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| e.to_string())?;
    Ok(u32::from_be_bytes(buf))
}

//! Deterministic toy-task generators and dataset file IO.
//!
//! Two tasks: an isotropic Gaussian-mixture classification problem and a
//! masked beam-power task where each sample is a grid of received powers
//! with a fraction of entries hidden and the label is the argmax of the
//! full surface. Beam class frequencies are skewed so the task is
//! imbalanced out of the box.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"QDAT";

/// Sentinel margin added after shifting powers positive, so masked zeros
/// are distinguishable from every observed value.
const MASK_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// Row-major `n x d` feature matrix.
    pub features: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, d: usize, classes: usize, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        if features.len() != n * d {
            return Err(Error::ShapeMismatch {
                op: "labeled-dataset",
                lhs: vec![features.len()],
                rhs: vec![n, d],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        Ok(LabeledDataset {
            features,
            n,
            d,
            classes,
            labels,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn features_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.d, self.features.clone()).unwrap()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            n: indices.len(),
            d: self.d,
            classes: self.classes,
            labels,
        }
    }

    /// Splits class-by-class: the first `train_per_class` rows of each
    /// class go to the train split, the rest to test.
    pub fn split_per_class(&self, train_per_class: usize) -> (LabeledDataset, LabeledDataset) {
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for c in 0..self.classes {
            let idx = self.indices_of_class(c);
            for (rank, &i) in idx.iter().enumerate() {
                if rank < train_per_class {
                    train_idx.push(i);
                } else {
                    test_idx.push(i);
                }
            }
        }
        (self.subset(&train_idx), self.subset(&test_idx))
    }
}

/// Isotropic Gaussians at random class centers scaled by `separation`.
pub fn gen_gaussian_mixture(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> LabeledDataset {
    assert!(classes >= 2, "need at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * separation
        })
        .collect();
    let mut features = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for c in 0..classes {
        for _ in 0..n_per_class {
            for k in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(centers[c * dim + k] + z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, dim, classes, labels).unwrap()
}

/// Configuration of the masked beam-power task.
#[derive(Debug, Clone)]
pub struct BeamTaskConfig {
    /// Azimuth beam count.
    pub n_theta: usize,
    /// Elevation beam count.
    pub n_phi: usize,
    /// Fraction of grid entries hidden per sample, in [0, 1).
    pub mask_fraction: f64,
    pub n_samples: usize,
    pub noise_std: f64,
    /// Exponent of the power-law skew over lobe locations; larger means
    /// more class imbalance. Zero gives a balanced task.
    pub location_skew: f64,
    pub seed: u64,
}

impl Default for BeamTaskConfig {
    fn default() -> Self {
        BeamTaskConfig {
            n_theta: 8,
            n_phi: 8,
            mask_fraction: 0.5,
            n_samples: 3000,
            noise_std: 0.05,
            location_skew: 1.0,
            seed: 7,
        }
    }
}

impl BeamTaskConfig {
    pub fn grid_size(&self) -> usize {
        self.n_theta * self.n_phi
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size() == 0 {
            return Err(Error::InvalidConfig("beam grid must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::InvalidConfig(format!(
                "mask fraction must be in [0, 1), got {}",
                self.mask_fraction
            )));
        }
        Ok(())
    }
}

fn raised_cosine(dist: f64, width: f64) -> f64 {
    if dist.abs() >= width {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * dist / width).cos())
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn gen_beam_with_surfaces(cfg: &BeamTaskConfig) -> Result<(LabeledDataset, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let d = cfg.grid_size();
    let (nt, np) = (cfg.n_theta, cfg.n_phi);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Power-law weights over flattened lobe locations drive the class skew.
    let weights: Vec<f64> = (0..d)
        .map(|k| 1.0 / ((k + 1) as f64).powf(cfg.location_skew))
        .collect();
    let total: f64 = weights.iter().sum();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();

    let masked_per_sample = (cfg.mask_fraction * d as f64).round() as usize;
    let main_width = 0.32 * nt.max(np) as f64 + 0.5;
    let side_width = main_width + 1.0;

    let mut features = Vec::with_capacity(cfg.n_samples * d);
    let mut labels = Vec::with_capacity(cfg.n_samples);
    let mut surfaces = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let u: f64 = rng.random_range(0.0..1.0);
        let cell = cumulative.iter().position(|&c| u <= c).unwrap_or(d - 1);
        let (ti, pi) = (cell / np, cell % np);
        // Mirror lobe gives spatially correlated side response, so the
        // main-lobe location stays inferable when its own cells are masked.
        let (mi, mj) = (nt - 1 - ti, np - 1 - pi);

        let mut surface = vec![0.0; d];
        for i in 0..nt {
            for j in 0..np {
                let main = raised_cosine(i as f64 - ti as f64, main_width)
                    * raised_cosine(j as f64 - pi as f64, main_width);
                let side = raised_cosine(i as f64 - mi as f64, side_width)
                    * raised_cosine(j as f64 - mj as f64, side_width);
                let noise: f64 = StandardNormal.sample(&mut rng);
                surface[i * np + j] = main + 0.35 * side + cfg.noise_std * noise;
            }
        }
        let label = argmax(&surface);

        // Shift strictly positive, then hide a fixed count of entries.
        let min = surface.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut row: Vec<f64> = surface.iter().map(|&v| v - min + MASK_MARGIN).collect();
        let mut order: Vec<usize> = (0..d).collect();
        for pick in 0..masked_per_sample {
            let swap = rng.random_range(pick..d);
            order.swap(pick, swap);
            row[order[pick]] = 0.0;
        }

        features.extend_from_slice(&row);
        labels.push(label);
        surfaces.push(surface);
    }
    Ok((
        LabeledDataset::new(features, d, d, labels)?,
        surfaces,
    ))
}

/// Masked beam-power samples; the label is the argmax of the full surface.
pub fn gen_beam_dataset(cfg: &BeamTaskConfig) -> Result<LabeledDataset> {
    gen_beam_with_surfaces(cfg).map(|(ds, _)| ds)
}

/// Per-class initialization pool.
///
/// Without replacement each class contributes a random subset of
/// `m_per_class` samples, or all of them when it has fewer. With
/// replacement each class contributes exactly `m_per_class` draws,
/// duplicating as needed.
pub fn sample_init_pool(
    data: &LabeledDataset,
    m_per_class: usize,
    with_replacement: bool,
    seed: u64,
) -> LabeledDataset {
    assert!(m_per_class >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for c in 0..data.classes {
        let idx = data.indices_of_class(c);
        if idx.is_empty() {
            continue;
        }
        if with_replacement {
            for _ in 0..m_per_class {
                picked.push(idx[rng.random_range(0..idx.len())]);
            }
        } else if idx.len() <= m_per_class {
            picked.extend_from_slice(&idx);
        } else {
            let mut order = idx.clone();
            for pick in 0..m_per_class {
                let swap = rng.random_range(pick..order.len());
                order.swap(pick, swap);
            }
            picked.extend_from_slice(&order[..m_per_class]);
        }
    }
    data.subset(&picked)
}

pub fn dataset_to_bytes(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.features.len() * 8 + ds.n * 4);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&(ds.n as u32).to_le_bytes());
    out.extend_from_slice(&(ds.d as u32).to_le_bytes());
    out.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    for &v in &ds.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<LabeledDataset> {
    let need = |n: usize, found: usize| Error::Truncated { needed: n, found };
    if bytes.len() < 16 {
        return Err(need(16, bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let classes = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let total = 16 + n * d * 8 + n * 4;
    if bytes.len() < total {
        return Err(need(total, bytes.len()));
    }
    let mut features = Vec::with_capacity(n * d);
    let mut offset = 16;
    for _ in 0..n * d {
        features.push(f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()));
        offset += 8;
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize);
        offset += 4;
    }
    LabeledDataset::new(features, d, classes, labels)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&dataset_to_bytes(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    dataset_from_bytes(&bytes)
}

/// Built-in tasks with fixed train/test splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskId {
    Gaussian,
    Beam,
}

impl TaskId {
    pub fn name(&self) -> &'static str {
        match self {
            TaskId::Gaussian => "gaussian",
            TaskId::Beam => "beam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(TaskId::Gaussian),
            "beam" => Ok(TaskId::Beam),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

pub struct Task {
    pub id: TaskId,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Gaussian task defaults: 3 classes, 16 dimensions, 200 train and 100
/// test samples per class.
pub const GAUSSIAN_CLASSES: usize = 3;
pub const GAUSSIAN_DIM: usize = 16;
pub const GAUSSIAN_TRAIN_PER_CLASS: usize = 200;
pub const GAUSSIAN_TEST_PER_CLASS: usize = 100;
pub const GAUSSIAN_SEPARATION: f64 = 0.5;

/// Beam task test-set size.
pub const BEAM_TEST_SAMPLES: usize = 1000;

pub fn load_task(id: TaskId, data_seed: u64) -> Result<Task> {
    match id {
        TaskId::Gaussian => {
            let all = gen_gaussian_mixture(
                GAUSSIAN_CLASSES,
                GAUSSIAN_DIM,
                GAUSSIAN_TRAIN_PER_CLASS + GAUSSIAN_TEST_PER_CLASS,
                GAUSSIAN_SEPARATION,
                data_seed,
            );
            let (train, test) = all.split_per_class(GAUSSIAN_TRAIN_PER_CLASS);
            Ok(Task {
                id,
                train,
                test,
            })
        }
        TaskId::Beam => {
            let train_cfg = BeamTaskConfig {
                seed: data_seed,
                ..BeamTaskConfig::default()
            };
            let test_cfg = BeamTaskConfig {
                seed: data_seed.wrapping_add(1),
                n_samples: BEAM_TEST_SAMPLES,
                ..BeamTaskConfig::default()
            };
            Ok(Task {
                id,
                train: gen_beam_dataset(&train_cfg)?,
                test: gen_beam_dataset(&test_cfg)?,
            })
        }
    }
}

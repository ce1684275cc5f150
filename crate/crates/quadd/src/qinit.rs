//! Quantization-guided initialization.
//!
//! The real data is first quantized with a uniform quantizer; candidates
//! are then scored by the cosine similarity of their last-layer
//! cross-entropy gradients under a seeded random model, and selected
//! greedily to maximize the generalized graph-cut gain
//! `G*(A|C) = sum_{i in C, j in A} Sim(i,j) - sum_{j1,j2 in A} Sim(j1,j2)`,
//! the pair sum running over ordered pairs including `j1 = j2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Arch, Mlp};
use crate::quant::{init_alpha_percentile, quantize_forward, QuantKind, QuantizerSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Symmetric candidate-similarity matrix with unit diagonal.
#[derive(Debug, Clone)]
pub struct SimMatrix {
    pub n: usize,
    values: Vec<f64>,
}

impl SimMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::ShapeMismatch {
                op: "sim-matrix",
                lhs: vec![values.len()],
                rhs: vec![n, n],
            });
        }
        Ok(SimMatrix { n, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Gradient of the cross-entropy loss with respect to the final affine
/// layer's parameters only, flattened (weight row-major, then bias). The
/// model itself is left untouched.
pub fn last_layer_grad(
    sample: &[f64],
    label: usize,
    model: &Mlp,
) -> Result<Vec<f64>> {
    let classes = model.out_dim();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let last = model.layer_count() - 1;
    let w = &model.weights[last];
    let b = &model.biases[last];
    let was_trainable = w.requires_grad();
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    w.zero_grad();
    b.zero_grad();

    let tape = Tape::new();
    let x = Tensor::matrix(1, sample.len(), sample.to_vec())?;
    let loss = model.ce_loss(&tape, &x, &[label])?;
    tape.backward(&loss)?;

    let mut flat = w.grad().unwrap_or_else(|| vec![0.0; w.numel()]);
    flat.extend(b.grad().unwrap_or_else(|| vec![0.0; b.numel()]));
    w.zero_grad();
    b.zero_grad();
    w.set_requires_grad(was_trainable);
    b.set_requires_grad(was_trainable);
    Ok(flat)
}

/// Pairwise cosine similarities of gradient vectors. Zero-norm gradients
/// get similarity 0 to every other candidate; diagonal entries are 1.
pub fn cosine_sim_matrix(grads: &[Vec<f64>]) -> SimMatrix {
    let n = grads.len();
    let norms: Vec<f64> = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![0.0; n * n];
    values
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            for j in 0..n {
                row[j] = if i == j {
                    1.0
                } else if norms[i] == 0.0 || norms[j] == 0.0 {
                    0.0
                } else {
                    let dot: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
                    dot / (norms[i] * norms[j])
                };
            }
        });
    SimMatrix { n, values }
}

/// Similarity matrix over already-quantized candidates.
pub fn build_sim_matrix(candidates: &LabeledDataset, model: &Mlp) -> Result<SimMatrix> {
    let mut grads = Vec::with_capacity(candidates.n);
    for i in 0..candidates.n {
        grads.push(last_layer_grad(
            candidates.row(i),
            candidates.labels[i],
            model,
        )?);
    }
    Ok(cosine_sim_matrix(&grads))
}

/// Greedy graph-cut selection: repeatedly moves the candidate with the
/// largest gain `G*(A + j | C - j) - G*(A | C)` from the candidate pool
/// into the selected set. Ties break toward the lowest index. Returns the
/// selection order and the gain realized at each step.
pub fn greedy_graphcut_select(sim: &SimMatrix, m: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = sim.n;
    if m > n || m == 0 {
        return Err(Error::SelectionCount { m, n });
    }
    // Expanding the gain of adding j (with S symmetric) gives
    //   gain(j) = sum_{i in C} S(i,j) - 3 * sum_{a in A} S(a,j) - 2 * S(j,j)
    // so one pass per pick keeps the column sums current.
    let mut in_pool = vec![true; n];
    let mut sum_pool: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| sim.get(i, j)).sum())
        .collect();
    let mut sum_selected = vec![0.0; n];
    let mut order = Vec::with_capacity(m);
    let mut gains = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !in_pool[j] {
                continue;
            }
            let gain = sum_pool[j] - 3.0 * sum_selected[j] - 2.0 * sim.get(j, j);
            match best {
                Some((_, g)) if gain <= g => {}
                _ => best = Some((j, gain)),
            }
        }
        let (pick, gain) = best.unwrap();
        in_pool[pick] = false;
        order.push(pick);
        gains.push(gain);
        for j in 0..n {
            let s = sim.get(pick, j);
            sum_pool[j] -= s;
            sum_selected[j] += s;
        }
    }
    Ok((order, gains))
}

/// Per-class outcome of quantization-guided selection, in pick order.
#[derive(Debug, Clone)]
pub struct ClassSelection {
    pub class: usize,
    /// Global dataset indices.
    pub indices: Vec<usize>,
    pub gains: Vec<f64>,
}

/// Configuration of the initialization pipeline.
#[derive(Debug, Clone)]
pub struct QinitConfig {
    /// Bits of the uniform pre-quantizer applied to the real candidates.
    pub bits: u8,
    pub model_arch: Arch,
    pub model_hidden: usize,
    pub seed: u64,
}

/// Full initialization-pipeline output: the per-class picks plus the
/// uniformly pre-quantized view of the real data the picks came from.
pub struct QinitOutcome {
    pub selections: Vec<ClassSelection>,
    pub pre_quantized: LabeledDataset,
    pub alpha: f64,
}

/// Runs the full initialization pipeline: uniform pre-quantization of the
/// real data, gradient similarities under a seeded random model, then
/// greedy graph-cut selection per class. Classes with fewer than
/// `m_per_class` candidates contribute all of them.
pub fn quantization_guided_selection(
    real: &LabeledDataset,
    cfg: &QinitConfig,
    m_per_class: usize,
) -> Result<QinitOutcome> {
    let features = real.features_tensor();
    let alpha = init_alpha_percentile(&features)?;
    let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformSte, cfg.bits, alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let quantized = quantize_forward(&features, &spec, false, 0, &mut rng)?;
    let pre_q = LabeledDataset::new(
        quantized.value(),
        real.d,
        real.classes,
        real.labels.clone(),
    )?;

    let model = Mlp::random(
        cfg.model_arch,
        real.d,
        cfg.model_hidden,
        real.classes,
        &mut rng,
    );

    let mut selections = Vec::with_capacity(real.classes);
    for class in 0..real.classes {
        let idx = pre_q.indices_of_class(class);
        if idx.is_empty() {
            selections.push(ClassSelection {
                class,
                indices: Vec::new(),
                gains: Vec::new(),
            });
            continue;
        }
        let candidates = pre_q.subset(&idx);
        let sim = build_sim_matrix(&candidates, &model)?;
        let m = m_per_class.min(idx.len());
        let (order, gains) = greedy_graphcut_select(&sim, m)?;
        selections.push(ClassSelection {
            class,
            indices: order.iter().map(|&local| idx[local]).collect(),
            gains,
        });
    }
    Ok(QinitOutcome {
        selections,
        pre_quantized: pre_q,
        alpha,
    })
}

//! Small multilayer perceptrons used as probes, teachers and students.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Linear,
    Mlp2,
    Mlp3,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Linear => "linear",
            Arch::Mlp2 => "mlp-2",
            Arch::Mlp3 => "mlp-3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Arch::Linear),
            "mlp-2" => Ok(Arch::Mlp2),
            "mlp-3" => Ok(Arch::Mlp3),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }

    pub fn hidden_layers(&self) -> usize {
        match self {
            Arch::Linear => 0,
            Arch::Mlp2 => 1,
            Arch::Mlp3 => 2,
        }
    }
}

/// Fully connected network with ReLU between affine layers.
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub dims: Vec<usize>,
}

impl Mlp {
    /// Gaussian init scaled by 1/sqrt(fan-in); biases start at zero.
    pub fn random<R: Rng + ?Sized>(
        arch: Arch,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Mlp {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(hidden).take(arch.hidden_layers()));
        dims.push(out_dim);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data).unwrap());
            biases.push(Tensor::from_vec(vec![0.0; fan_out]));
        }
        Mlp {
            weights,
            biases,
            dims,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn set_trainable(&self, flag: bool) {
        for t in self.weights.iter().chain(self.biases.iter()) {
            t.set_requires_grad(flag);
        }
    }

    pub fn zero_grads(&self) {
        for t in self.weights.iter().chain(self.biases.iter()) {
            t.zero_grad();
        }
    }

    pub fn sgd_step(&self, lr: f64) {
        for t in self.weights.iter().chain(self.biases.iter()) {
            t.sgd_step(lr);
        }
    }

    /// Parameters in layer order: W0, b0, W1, b1, ...
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layer_count() * 2);
        for l in 0..self.layer_count() {
            out.push(self.weights[l].clone());
            out.push(self.biases[l].clone());
        }
        out
    }

    /// Flattened copy of all parameters, in `params()` order.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params() {
            out.extend(p.value());
        }
        out
    }

    pub fn set_param_vector(&self, flat: &[f64]) {
        let mut offset = 0;
        for p in self.params() {
            let n = p.numel();
            p.set_data(flat[offset..offset + n].to_vec());
            offset += n;
        }
        assert_eq!(offset, flat.len(), "parameter vector length mismatch");
    }

    /// Parameters of the final affine layer only, flattened (weight then
    /// bias).
    pub fn last_layer_param_count(&self) -> usize {
        let l = self.layer_count() - 1;
        self.weights[l].numel() + self.biases[l].numel()
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        forward_with_params(tape, &self.params(), x)
    }

    pub fn ce_loss(&self, tape: &Tape, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let logits = self.forward(tape, x)?;
        tape.softmax_cross_entropy(&logits, labels)
    }

    /// Class predictions by logit argmax.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let logits = self.forward(&tape, x)?;
        let shape = logits.shape();
        let (n, c) = (shape[0], shape[1]);
        let v = logits.value();
        Ok((0..n)
            .map(|r| {
                let row = &v[r * c..(r + 1) * c];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }
}

/// Forward pass through an affine/ReLU stack given parameter tensors in
/// `params()` order. Works on arbitrary tape tensors, which is what the
/// unrolled trajectory-matching steps need.
pub fn forward_with_params(tape: &Tape, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let layers = params.len() / 2;
    let mut h = x.clone();
    for l in 0..layers {
        let z = tape.add(&tape.matmul(&h, &params[2 * l])?, &params[2 * l + 1])?;
        h = if l + 1 < layers { tape.relu(&z) } else { z };
    }
    Ok(h)
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        data[r * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data).unwrap()
}

/// Gradient of the mean cross-entropy with respect to every parameter,
/// expressed as tape operations.
///
/// The returned tensors are ordinary graph nodes, so a loss built from them
/// stays differentiable with respect to both the inputs and the parameters.
/// This is what lets trajectory matching backpropagate through unrolled
/// student updates. The ReLU masks are held constant, which agrees with the
/// true derivative almost everywhere.
pub fn ce_param_grads_on_tape(
    tape: &Tape,
    params: &[Tensor],
    x: &Tensor,
    labels: &[usize],
) -> Result<Vec<Tensor>> {
    let layers = params.len() / 2;
    let n = labels.len();
    if x.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "ce-param-grads",
            lhs: x.shape(),
            rhs: vec![n],
        });
    }
    // forward, keeping pre-activations and activations
    let mut acts: Vec<Tensor> = vec![x.clone()];
    let mut preacts: Vec<Tensor> = Vec::new();
    let mut h = x.clone();
    for l in 0..layers {
        let z = tape.add(&tape.matmul(&h, &params[2 * l])?, &params[2 * l + 1])?;
        preacts.push(z.clone());
        h = if l + 1 < layers { tape.relu(&z) } else { z };
        if l + 1 < layers {
            acts.push(h.clone());
        }
    }
    let logits = h;
    let classes = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }

    let probs = tape.softmax(&logits)?;
    let targets = one_hot(labels, classes);
    let mut delta = tape.affine(&tape.sub(&probs, &targets)?, 1.0 / n as f64, 0.0);

    let mut grads: Vec<Option<(Tensor, Tensor)>> = vec![None; layers];
    for l in (0..layers).rev() {
        let gw = tape.matmul(&tape.transpose(&acts[l])?, &delta)?;
        let gb = tape.sum_axis(&delta, 0)?;
        grads[l] = Some((gw, gb));
        if l > 0 {
            let ga = tape.matmul(&delta, &tape.transpose(&params[2 * l])?)?;
            let mask: Vec<f64> = preacts[l - 1]
                .value()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::new(ga.shape(), mask)?;
            delta = tape.mul(&ga, &mask)?;
        }
    }
    let mut out = Vec::with_capacity(layers * 2);
    for pair in grads.into_iter().flatten() {
        out.push(pair.0);
        out.push(pair.1);
    }
    Ok(out)
}

//! Differentiable quantizers.
//!
//! Quantization is clipping to `[-alpha, alpha]` followed by projection
//! onto a finite codebook. Four families are supported:
//!
//! * `uniform-ste` — evenly spaced levels, straight-through backward;
//! * `uniform-aun` — additive uniform noise while training, hard at eval;
//! * `uniform-fsq` — tanh companding onto `2^b` symmetric levels with a
//!   hybrid noise/hard schedule while training;
//! * `apot` — additive powers-of-two levels, denser near zero, with a
//!   learnable clipping threshold driven by the reparameterized clipping
//!   function (RCF) backward rule.
//!
//! A fifth `passthrough` kind disables quantization entirely so that the
//! distillation loop reduces to its vanilla form.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to degenerate clipping thresholds.
pub const ALPHA_FLOOR: f64 = 1e-6;
/// Denominator epsilon for pre-quantization standardization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantKind {
    UniformSte,
    UniformFsq,
    UniformAun,
    Apot,
    /// Identity quantizer; turns the distillation loop into its vanilla form.
    Passthrough,
}

impl QuantKind {
    pub fn name(&self) -> &'static str {
        match self {
            QuantKind::UniformSte => "uniform-ste",
            QuantKind::UniformFsq => "uniform-fsq",
            QuantKind::UniformAun => "uniform-aun",
            QuantKind::Apot => "apot",
            QuantKind::Passthrough => "passthrough",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform-ste" => Ok(QuantKind::UniformSte),
            "uniform-fsq" => Ok(QuantKind::UniformFsq),
            "uniform-aun" => Ok(QuantKind::UniformAun),
            "apot" => Ok(QuantKind::Apot),
            "passthrough" => Ok(QuantKind::Passthrough),
            other => Err(Error::InvalidSpec(format!("unknown quantizer kind {other:?}"))),
        }
    }
}

/// Forward-mode flag: hard projection, or the smooth surrogate whose exact
/// derivative the backward rule implements (clipping for STE/APoT, scaled
/// tanh for FSQ). The smooth mode is what finite-difference checks drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardMode {
    #[default]
    Hard,
    Smooth,
}

/// Full description of one quantizer.
#[derive(Debug, Clone)]
pub struct QuantizerSpec<S: Scalar = f64> {
    pub kind: QuantKind,
    /// Nominal bits per element.
    pub bits: u8,
    /// Clipping threshold; learnable for `apot`, fixed otherwise.
    pub alpha: S,
    /// APoT base bit-width `k`; each additive term carries `k` bits.
    pub apot_base_bits: u8,
    /// Per-channel standardization before quantization.
    pub normalize: bool,
    pub forward: ForwardMode,
}

impl<S: Scalar> QuantizerSpec<S> {
    pub fn new(kind: QuantKind, bits: u8, alpha: S) -> Self {
        QuantizerSpec {
            kind,
            bits,
            alpha,
            apot_base_bits: default_apot_base(bits),
            normalize: false,
            forward: ForwardMode::Hard,
        }
    }

    pub fn apot(bits: u8, base_bits: u8, alpha: S) -> Self {
        QuantizerSpec {
            kind: QuantKind::Apot,
            bits,
            alpha,
            apot_base_bits: base_bits,
            normalize: false,
            forward: ForwardMode::Hard,
        }
    }

    pub fn passthrough() -> Self {
        QuantizerSpec {
            kind: QuantKind::Passthrough,
            bits: 0,
            alpha: S::one(),
            apot_base_bits: 0,
            normalize: false,
            forward: ForwardMode::Hard,
        }
    }

    pub fn with_alpha(&self, alpha: S) -> Self {
        let mut spec = self.clone();
        spec.alpha = alpha;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == QuantKind::Passthrough {
            return Ok(());
        }
        if self.bits == 0 {
            return Err(Error::InvalidSpec("bit width must be at least 1".into()));
        }
        if self.alpha <= S::zero() {
            return Err(Error::InvalidSpec(format!(
                "clipping threshold must be positive, got {}",
                self.alpha
            )));
        }
        match self.kind {
            QuantKind::Apot => {
                let (b, k) = (self.bits, self.apot_base_bits);
                if k == 0 || b % k != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "apot base bit-width {k} must divide bit width {b}"
                    )));
                }
                if b > 15 {
                    return Err(Error::InvalidSpec("apot supports at most 15 bits".into()));
                }
            }
            _ => {
                if self.bits > 16 {
                    return Err(Error::InvalidSpec(
                        "uniform quantizers support at most 16 bits".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Scale mapping the raw codebook onto `[-alpha, alpha]`; derived from
    /// `alpha` so the largest level equals `alpha` exactly. Not a free
    /// parameter: the only learnable quantizer parameter is `alpha`.
    pub fn gamma(&self) -> Result<S> {
        match self.kind {
            QuantKind::Passthrough => Ok(S::one()),
            QuantKind::Apot => {
                let max = apot_max_magnitude::<S>(self.bits, self.apot_base_bits)?;
                Ok(self.alpha / max)
            }
            _ => Ok(S::one()),
        }
    }

    pub fn codebook(&self) -> Result<Codebook<S>> {
        self.validate()?;
        match self.kind {
            QuantKind::UniformSte | QuantKind::UniformAun => {
                build_uniform_codebook(self.alpha, self.bits)
            }
            QuantKind::UniformFsq => build_fsq_codebook(self.alpha, self.bits),
            QuantKind::Apot => build_apot_codebook(self.alpha, self.bits, self.apot_base_bits),
            QuantKind::Passthrough => Err(Error::InvalidSpec(
                "passthrough quantizer has no codebook".into(),
            )),
        }
    }

    /// Uniform step `2*alpha / (2^b - 1)`.
    pub fn delta(&self) -> S {
        let two = S::cast_f64(2.0);
        two * self.alpha / S::cast_usize((1usize << self.bits) - 1)
    }
}

/// Default APoT base bit-width: 2 when it divides b, otherwise 1.
pub fn default_apot_base(bits: u8) -> u8 {
    if bits > 0 && bits % 2 == 0 {
        2
    } else {
        1
    }
}

/// Sorted, symmetric set of levels a quantizer can output.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<S: Scalar = f64> {
    levels: Vec<S>,
}

impl<S: Scalar> Codebook<S> {
    pub fn from_levels(levels: Vec<S>) -> Self {
        debug_assert!(levels.windows(2).all(|w| w[0] < w[1]), "levels must increase");
        Codebook { levels }
    }

    pub fn levels(&self) -> &[S] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn max_abs(&self) -> S {
        self.levels
            .iter()
            .fold(S::zero(), |acc, &l| acc.max(l.abs()))
    }

    /// Nearest level; ties break toward the larger level.
    pub fn project(&self, x: S) -> S {
        self.levels[self.project_index(x)]
    }

    /// Index of the nearest level; ties break toward the larger level.
    pub fn project_index(&self, x: S) -> usize {
        let levels = &self.levels;
        let n = levels.len();
        let mut lo = 0usize;
        let mut hi = n;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if levels[mid] < x {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        // lo is the first level >= x
        if lo == 0 {
            return 0;
        }
        if lo == n {
            return n - 1;
        }
        let below = levels[lo - 1];
        let above = levels[lo];
        if above - x <= x - below {
            lo
        } else {
            lo - 1
        }
    }

    /// Index of the level equal to `x` within `tol`, if any.
    pub fn index_of(&self, x: S, tol: S) -> Option<usize> {
        let idx = self.project_index(x);
        if (self.levels[idx] - x).abs() <= tol {
            Some(idx)
        } else {
            None
        }
    }

    /// Smallest and largest gap between consecutive levels.
    pub fn gap_range(&self) -> (S, S) {
        let mut min = S::infinity();
        let mut max = S::zero();
        for w in self.levels.windows(2) {
            let gap = w[1] - w[0];
            min = min.min(gap);
            max = max.max(gap);
        }
        (min, max)
    }
}

/// Projects a value onto its nearest codebook level.
pub fn project_nearest<S: Scalar>(x: S, cb: &Codebook<S>) -> S {
    cb.project(x)
}

/// Evenly spaced symmetric levels `i * delta` for
/// `i in -(2^(b-1)-1) ..= 2^(b-1)-1`, `delta = 2*alpha/(2^b - 1)`:
/// `2^b - 1` levels including zero, all within `[-alpha, alpha]`.
pub fn build_uniform_codebook<S: Scalar>(alpha: S, bits: u8) -> Result<Codebook<S>> {
    if bits == 0 {
        return Err(Error::InvalidSpec("bit width must be at least 1".into()));
    }
    if bits > 16 {
        return Err(Error::InvalidSpec(
            "uniform quantizers support at most 16 bits".into(),
        ));
    }
    let half = (1i64 << (bits - 1)) - 1;
    let delta = S::cast_f64(2.0) * alpha / S::cast_usize((1usize << bits) - 1);
    let levels: Vec<S> = (-half..=half).map(|i| S::cast_f64(i as f64) * delta).collect();
    Ok(Codebook::from_levels(levels))
}

/// FSQ grid: `2^b` evenly spaced levels spanning `[-alpha, alpha]` with
/// both endpoints included (no zero level for even counts).
pub fn build_fsq_codebook<S: Scalar>(alpha: S, bits: u8) -> Result<Codebook<S>> {
    if bits == 0 {
        return Err(Error::InvalidSpec("bit width must be at least 1".into()));
    }
    if bits > 16 {
        return Err(Error::InvalidSpec(
            "uniform quantizers support at most 16 bits".into(),
        ));
    }
    let l = 1i64 << bits;
    let denom = S::cast_f64((l - 1) as f64);
    let levels: Vec<S> = (0..l)
        .map(|j| alpha * S::cast_f64((2 * j - (l - 1)) as f64) / denom)
        .collect();
    Ok(Codebook::from_levels(levels))
}

fn apot_term_choices<S: Scalar>(i: u8, n: u8, k: u8) -> Vec<S> {
    let mut choices = vec![S::zero()];
    for j in 0..=(1u32 << k) - 2 {
        let exponent = i as i32 + (j as i32) * n as i32;
        choices.push(S::cast_f64(2f64.powi(-exponent)));
    }
    choices
}

fn apot_magnitudes<S: Scalar>(bits: u8, base_bits: u8) -> Result<Vec<S>> {
    if base_bits == 0 || bits == 0 || bits % base_bits != 0 {
        return Err(Error::InvalidSpec(format!(
            "apot base bit-width {base_bits} must divide bit width {bits}"
        )));
    }
    if bits > 15 {
        return Err(Error::InvalidSpec("apot supports at most 15 bits".into()));
    }
    let n = bits / base_bits;
    let mut sums = vec![S::zero()];
    for i in 0..n {
        let choices = apot_term_choices::<S>(i, n, base_bits);
        let mut next = Vec::with_capacity(sums.len() * choices.len());
        for &s in &sums {
            for &c in &choices {
                next.push(s + c);
            }
        }
        sums = next;
    }
    sums.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sums.dedup();
    Ok(sums)
}

fn apot_max_magnitude<S: Scalar>(bits: u8, base_bits: u8) -> Result<S> {
    let mags = apot_magnitudes::<S>(bits, base_bits)?;
    Ok(*mags.last().unwrap())
}

/// Additive powers-of-two levels: every sum of per-term choices
/// `p_i in {0} U { 2^-(i + j*n) : j = 0..2^k-2 }`, symmetrically closed
/// and scaled so the largest level equals `alpha` exactly.
pub fn build_apot_codebook<S: Scalar>(alpha: S, bits: u8, base_bits: u8) -> Result<Codebook<S>> {
    let mags = apot_magnitudes::<S>(bits, base_bits)?;
    let max = *mags.last().unwrap();
    let gamma = alpha / max;
    let mut levels = Vec::with_capacity(mags.len() * 2 - 1);
    for &m in mags.iter().skip(1).rev() {
        levels.push(-(gamma * m));
    }
    for &m in mags.iter() {
        levels.push(gamma * m);
    }
    Ok(Codebook::from_levels(levels))
}

fn clip<S: Scalar>(x: S, alpha: S) -> S {
    x.max(-alpha).min(alpha)
}

/// Hard-quantizes one value under `spec`.
pub fn quantize_value<S: Scalar>(x: S, spec: &QuantizerSpec<S>, cb: &Codebook<S>) -> S {
    match spec.kind {
        QuantKind::Passthrough => x,
        QuantKind::UniformFsq => {
            let t = x.tanh();
            let l = 1i64 << spec.bits;
            let denom = S::cast_f64((l - 1) as f64);
            let j = ((t + S::one()) * denom / S::cast_f64(2.0)).round();
            let j = j.max(S::zero()).min(denom).as_f64() as usize;
            cb.levels()[j]
        }
        _ => cb.project(clip(x, spec.alpha)),
    }
}

/// Quantizes a slice of values.
///
/// Hard modes clip and project exactly onto the codebook. While training,
/// `uniform-aun` adds uniform noise in `[-delta/2, delta/2]` instead of
/// rounding, and `uniform-fsq` alternates between a tanh-plus-noise
/// approximation (even steps) and the hard quantizer (odd steps). The
/// `Smooth` forward mode applies the surrogate whose derivative the
/// backward rule computes: clipping for STE/AUN/APoT, `alpha*tanh` for FSQ.
pub fn quantize_values<S: Scalar, R: Rng + ?Sized>(
    values: &[S],
    spec: &QuantizerSpec<S>,
    training: bool,
    step: u64,
    rng: &mut R,
) -> Result<Vec<S>> {
    spec.validate()?;
    if spec.kind == QuantKind::Passthrough {
        return Ok(values.to_vec());
    }
    if spec.forward == ForwardMode::Smooth {
        return Ok(values
            .iter()
            .map(|&x| match spec.kind {
                QuantKind::UniformFsq => spec.alpha * x.tanh(),
                _ => clip(x, spec.alpha),
            })
            .collect());
    }
    match spec.kind {
        QuantKind::UniformAun if training => {
            let half = spec.delta() / S::cast_f64(2.0);
            Ok(values
                .iter()
                .map(|&x| {
                    let u = S::cast_f64(rng.random_range(-1.0..1.0)) * half;
                    clip(x, spec.alpha) + u
                })
                .collect())
        }
        QuantKind::UniformFsq if training && step % 2 == 0 => {
            let l = 1i64 << spec.bits;
            let denom = S::cast_f64((l - 1) as f64);
            Ok(values
                .iter()
                .map(|&x| {
                    let u = if rng.random_range(0..2u8) == 0 {
                        -S::one()
                    } else {
                        S::one()
                    };
                    spec.alpha * (x.tanh() + u / denom)
                })
                .collect())
        }
        _ => {
            let cb = spec.codebook()?;
            Ok(values.iter().map(|&x| quantize_value(x, spec, &cb)).collect())
        }
    }
}

/// Tensor form of [`quantize_values`]; the result carries no gradient
/// history (the distillation loop wires gradients via a custom tape node).
pub fn quantize_forward<S: Scalar, R: Rng + ?Sized>(
    x: &Tensor<S>,
    spec: &QuantizerSpec<S>,
    training: bool,
    step: u64,
    rng: &mut R,
) -> Result<Tensor<S>> {
    let data = x.with_data(|v| quantize_values(v, spec, training, step, rng))?;
    Tensor::new(x.shape(), data)
}

/// Straight-through input gradient: `g * 1(|x| <= alpha)` for the clipping
/// kinds, `g * alpha * (1 - tanh^2 x)` for FSQ (analytic tanh derivative
/// composed with unit pass-through of the rounding), `g` unchanged for the
/// pass-through kind.
pub fn quantize_backward_input_values<S: Scalar>(
    grad_out: &[S],
    x: &[S],
    spec: &QuantizerSpec<S>,
) -> Vec<S> {
    match spec.kind {
        QuantKind::Passthrough => grad_out.to_vec(),
        QuantKind::UniformFsq => grad_out
            .iter()
            .zip(x)
            .map(|(&g, &x)| {
                let t = x.tanh();
                g * spec.alpha * (S::one() - t * t)
            })
            .collect(),
        _ => grad_out
            .iter()
            .zip(x)
            .map(|(&g, &x)| {
                if x.abs() <= spec.alpha {
                    g
                } else {
                    S::zero()
                }
            })
            .collect(),
    }
}

pub fn quantize_backward_input<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    spec: &QuantizerSpec<S>,
) -> Result<Tensor<S>> {
    if grad_out.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "quantize-backward-input",
            lhs: grad_out.shape(),
            rhs: x.shape(),
        });
    }
    let data = grad_out
        .with_data(|g| x.with_data(|xv| quantize_backward_input_values(g, xv, spec)));
    Tensor::new(x.shape(), data)
}

/// RCF derivative of one value with respect to the clipping threshold:
/// `sign(x)` outside the clipping range, otherwise the projection residual
/// on the unit-range codebook, `proj(x/alpha) - x/alpha`.
pub fn rcf_alpha_derivative<S: Scalar>(x: S, alpha: S, unit_cb: &Codebook<S>) -> S {
    if x.abs() > alpha {
        x.signum()
    } else {
        let scaled = x / alpha;
        unit_cb.project(scaled) - scaled
    }
}

/// Clipping-threshold gradient `sum_i g_i * d_i` under the RCF rule.
/// Defined for the `apot` kind only.
pub fn quantize_backward_alpha_values<S: Scalar>(
    grad_out: &[S],
    x: &[S],
    spec: &QuantizerSpec<S>,
) -> Result<S> {
    if spec.kind != QuantKind::Apot {
        return Err(Error::AlphaGradKind(spec.kind.name().to_string()));
    }
    let unit_cb = build_apot_codebook(S::one(), spec.bits, spec.apot_base_bits)?;
    let mut total = S::zero();
    for (&g, &xi) in grad_out.iter().zip(x) {
        total = total + g * rcf_alpha_derivative(xi, spec.alpha, &unit_cb);
    }
    Ok(total)
}

pub fn quantize_backward_alpha<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    spec: &QuantizerSpec<S>,
) -> Result<S> {
    grad_out.with_data(|g| x.with_data(|xv| quantize_backward_alpha_values(g, xv, spec)))
}

/// Linear-interpolation percentile of already-sorted values.
pub fn percentile<S: Scalar>(sorted: &[S], p: f64) -> S {
    debug_assert!(!sorted.is_empty());
    let h = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = S::cast_f64(h - lo as f64);
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Robust clipping-threshold initialization `|P99(x) - P1(x)|`, floored at
/// a small positive epsilon for degenerate inputs.
pub fn init_alpha_percentile<S: Scalar>(x: &Tensor<S>) -> Result<S> {
    x.with_data(|v| {
        if v.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let mut sorted = v.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let alpha = (percentile(&sorted, 99.0) - percentile(&sorted, 1.0)).abs();
        Ok(alpha.max(S::cast_f64(ALPHA_FLOOR)))
    })
}

/// Per-channel standardization statistics; evaluation applies the same
/// affine map to test features.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<S: Scalar = f64> {
    pub mean: Vec<S>,
    /// `sqrt(var + eps)` per channel.
    pub denom: Vec<S>,
}

impl<S: Scalar> NormStats<S> {
    /// Applies `(x - mean) / denom` column-wise to row-major data.
    pub fn apply(&self, data: &mut [S]) {
        let d = self.mean.len();
        for row in data.chunks_mut(d) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.denom[c];
            }
        }
    }
}

/// Standardizes each channel (column) of a rank-2 tensor to zero mean and
/// unit variance. Returns the input unchanged when disabled.
pub fn normalize_pre_quant<S: Scalar>(
    x: &Tensor<S>,
    enabled: bool,
) -> Result<(Tensor<S>, Option<NormStats<S>>)> {
    if !enabled {
        return Ok((x.detached(), None));
    }
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "normalize-pre-quant",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (n, d) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::EmptyTensor);
    }
    let inv_n = S::one() / S::cast_usize(n);
    let stats = x.with_data(|v| {
        let mut mean = vec![S::zero(); d];
        for row in v.chunks(d) {
            for (c, &val) in row.iter().enumerate() {
                mean[c] = mean[c] + val;
            }
        }
        for m in &mut mean {
            *m = *m * inv_n;
        }
        let mut var = vec![S::zero(); d];
        for row in v.chunks(d) {
            for (c, &val) in row.iter().enumerate() {
                let diff = val - mean[c];
                var[c] = var[c] + diff * diff;
            }
        }
        let eps = S::cast_f64(NORM_EPS);
        let denom: Vec<S> = var.iter().map(|&v| (v * inv_n + eps).sqrt()).collect();
        NormStats { mean, denom }
    });
    let mut data = x.value();
    stats.apply(&mut data);
    Ok((Tensor::new(shape, data)?, Some(stats)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Exhaustive nearest-level scan with the same tie rule (toward the
    /// larger level); independent of the binary-search implementation.
    fn scan_project(x: f64, levels: &[f64]) -> f64 {
        let mut best = levels[0];
        let mut best_dist = (x - best).abs();
        for &l in &levels[1..] {
            let dist = (x - l).abs();
            if dist <= best_dist {
                best = l;
                best_dist = dist;
            }
        }
        best
    }

    #[test]
    fn uniform_codebook_b1_is_single_zero_level() {
        let cb = build_uniform_codebook(1.0, 1).unwrap();
        assert_eq!(cb.levels(), &[0.0]);
    }

    #[test]
    fn uniform_codebook_b2_enumerates_with_delta_two_thirds() {
        let delta = 2.0 / 3.0;
        let expected: Vec<f64> = (-1..=1).map(|i| i as f64 * delta).collect();
        let cb = build_uniform_codebook(1.0, 2).unwrap();
        assert_eq!(cb.levels(), expected.as_slice());
    }

    #[test]
    fn uniform_codebook_b3_enumerates_with_delta_two_sevenths() {
        let delta = 2.0 / 7.0;
        let expected: Vec<f64> = (-3..=3).map(|i| i as f64 * delta).collect();
        let cb = build_uniform_codebook(1.0, 3).unwrap();
        assert_eq!(cb.levels(), expected.as_slice());
        assert_eq!(cb.len(), 7);
    }

    #[test]
    fn zero_bits_is_an_error() {
        assert!(build_uniform_codebook(1.0, 0).is_err());
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformSte, 0, 1.0);
        assert!(spec.validate().is_err());
    }

    /// Brute-force enumeration of the additive term sets.
    fn apot_oracle(alpha: f64, b: u8, k: u8) -> Vec<f64> {
        let n = b / k;
        let mut sums = vec![0.0f64];
        for i in 0..n {
            let mut choices = vec![0.0];
            for j in 0..=(1u32 << k) - 2 {
                choices.push(2f64.powi(-(i as i32 + j as i32 * n as i32)));
            }
            sums = sums
                .iter()
                .flat_map(|&s| choices.iter().map(move |&c| s + c))
                .collect();
        }
        let max = sums.iter().cloned().fold(0.0, f64::max);
        let gamma = alpha / max;
        let mut levels: Vec<f64> = sums
            .iter()
            .flat_map(|&m| [gamma * m, -(gamma * m)])
            .collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        levels
    }

    #[test]
    fn apot_b2_k2_matches_enumeration() {
        let cb = build_apot_codebook(1.0, 2, 2).unwrap();
        let expected = [-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0];
        assert_eq!(cb.levels(), expected.as_slice());
        assert_eq!(cb.levels(), apot_oracle(1.0, 2, 2).as_slice());
    }

    #[test]
    fn apot_b4_k2_matches_brute_force_over_all_pairs() {
        let cb = build_apot_codebook(1.5, 4, 2).unwrap();
        assert_eq!(cb.levels(), apot_oracle(1.5, 4, 2).as_slice());
        // max magnitude 1 + 1/2 = 1.5, so gamma is exactly 1 here
        let spec: QuantizerSpec = QuantizerSpec::apot(4, 2, 1.5);
        assert_eq!(spec.gamma().unwrap(), 1.0);
        assert_eq!(cb.max_abs(), 1.5);
    }

    #[test]
    fn apot_density_is_higher_near_zero() {
        let cb = build_apot_codebook(1.0, 4, 2).unwrap();
        let levels = cb.levels();
        let zero = levels.iter().position(|&l| l == 0.0).unwrap();
        let near_zero_gap = levels[zero + 1] - levels[zero];
        let top_gap = levels[levels.len() - 1] - levels[levels.len() - 2];
        assert!(
            near_zero_gap < top_gap,
            "expected denser levels near zero: {near_zero_gap} vs {top_gap}"
        );
    }

    #[test]
    fn apot_base_must_divide_bits() {
        assert!(build_apot_codebook(1.0, 5, 2).is_err());
        let spec: QuantizerSpec = QuantizerSpec::apot(5, 2, 1.0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn apot_k1_degenerates_to_a_uniform_grid() {
        // Eq-level enumeration of the additive terms: for k = 1 each term is
        // {0, 2^-i}, so the sums are every multiple of 2^(1-b) and spacing
        // is constant.
        let cb = build_apot_codebook(1.0, 4, 1).unwrap();
        let (min_gap, max_gap) = cb.gap_range();
        assert!(max_gap - min_gap < 1e-12);
        assert_eq!(cb.len(), 2 * 16 - 1);
    }

    #[test]
    fn uniform_spacing_is_constant() {
        for b in 2..=8 {
            let cb = build_uniform_codebook(1.3, b).unwrap();
            let (min_gap, max_gap) = cb.gap_range();
            assert!(max_gap - min_gap < 1e-12, "b={b}");
        }
    }

    #[test]
    fn codebooks_are_symmetric_about_zero() {
        let books: Vec<Codebook> = vec![
            build_uniform_codebook(0.7, 4).unwrap(),
            build_fsq_codebook(1.0, 3).unwrap(),
            build_apot_codebook(1.9, 6, 2).unwrap(),
            build_apot_codebook(0.3, 5, 1).unwrap(),
        ];
        for cb in books {
            let negated_reversed: Vec<f64> =
                cb.levels().iter().rev().map(|&l| -l).collect();
            assert_eq!(cb.levels(), negated_reversed.as_slice());
            assert!(cb.levels().iter().all(|l| l.abs() <= cb.max_abs() + 1e-15));
        }
    }

    #[test]
    fn project_is_identity_on_levels() {
        let cb = build_apot_codebook(1.0, 4, 2).unwrap();
        for &l in cb.levels() {
            assert_eq!(cb.project(l), l);
        }
    }

    #[test]
    fn project_examples() {
        let cb = build_uniform_codebook(1.0, 2).unwrap();
        // |0.3 - 0| < |0.3 - 2/3|
        assert_eq!(project_nearest(0.3, &cb), 0.0);
        // exact midpoint ties toward the larger level
        assert_eq!(project_nearest(1.0 / 3.0, &cb), 2.0 / 3.0);
    }

    proptest::proptest! {
        /// Projection agrees with the exhaustive linear scan for every
        /// codebook family and input.
        #[test]
        fn project_matches_exhaustive_scan(
            b in 1..=8u8,
            alpha in 0.1..3.0f64,
            apot in proptest::bool::ANY,
            x in -4.0..4.0f64,
        ) {
            let cb = if apot {
                let k = if b % 2 == 0 { 2 } else { 1 };
                build_apot_codebook(alpha, b, k).unwrap()
            } else {
                build_uniform_codebook(alpha, b).unwrap()
            };
            proptest::prop_assert_eq!(cb.project(x), scan_project(x, cb.levels()));
        }

        /// Negating the input negates the hard-quantized output, and the
        /// output is always a codebook member.
        #[test]
        fn hard_quantization_is_odd_and_on_codebook(
            b in 1..=8u8,
            alpha in 0.1..3.0f64,
            kind_pick in 0..3u8,
            x in -4.0..4.0f64,
        ) {
            let spec: QuantizerSpec = match kind_pick {
                0 => QuantizerSpec::new(QuantKind::UniformSte, b, alpha),
                1 => QuantizerSpec::new(QuantKind::UniformFsq, b, alpha),
                _ => QuantizerSpec::apot(b, if b % 2 == 0 { 2 } else { 1 }, alpha),
            };
            let mut r = rng();
            let q = quantize_values(&[x], &spec, false, 0, &mut r).unwrap()[0];
            let qn = quantize_values(&[-x], &spec, false, 0, &mut r).unwrap()[0];
            proptest::prop_assert_eq!(qn, -q);
            let cb = spec.codebook().unwrap();
            proptest::prop_assert!(cb.levels().iter().any(|&l| l == q));
        }
    }

    #[test]
    fn ste_forward_projects_after_clipping() {
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformSte, 3, 1.0);
        let mut r = rng();
        let x = Tensor::from_vec(vec![0.2]);
        let q = quantize_forward(&x, &spec, false, 0, &mut r).unwrap();
        assert_eq!(q.value(), vec![2.0 / 7.0]);
        // clipping pulls out-of-range values to the top level
        let x = Tensor::from_vec(vec![5.0]);
        let q = quantize_forward(&x, &spec, false, 0, &mut r).unwrap();
        assert_eq!(q.value(), vec![6.0 / 7.0]);
    }

    #[test]
    fn fsq_saturates_to_top_level() {
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformFsq, 2, 1.0);
        let mut r = rng();
        let x = Tensor::from_vec(vec![50.0]);
        let q = quantize_forward(&x, &spec, false, 0, &mut r).unwrap();
        assert_eq!(q.value(), vec![1.0]);
    }

    #[test]
    fn fsq_b1_is_a_sign_quantizer() {
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformFsq, 1, 1.0);
        let mut r = rng();
        let q = quantize_forward(&Tensor::from_vec(vec![0.1]), &spec, false, 0, &mut r).unwrap();
        assert_eq!(q.value(), vec![1.0]);
        let q = quantize_forward(&Tensor::from_vec(vec![-0.1]), &spec, false, 0, &mut r).unwrap();
        assert_eq!(q.value(), vec![-1.0]);
    }

    #[test]
    fn aun_training_adds_bounded_noise_and_eval_is_hard() {
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformAun, 3, 1.0);
        let mut r = rng();
        let x = Tensor::from_vec(vec![0.2; 64]);
        let q = quantize_forward(&x, &spec, true, 0, &mut r).unwrap();
        let half = spec.delta() / 2.0;
        for v in q.value() {
            assert!((v - 0.2).abs() <= half + 1e-12);
        }
        let hard = quantize_forward(&x, &spec, false, 0, &mut r).unwrap();
        assert!(hard.value().iter().all(|&v| v == 2.0 / 7.0));
    }

    #[test]
    fn fsq_training_alternates_noise_and_hard_steps() {
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformFsq, 2, 1.0);
        let mut r = rng();
        let x = Tensor::from_vec(vec![0.3]);
        let cb = spec.codebook().unwrap();
        // even step: tanh(x) +/- 1/(L-1), not a codebook level in general
        let noisy = quantize_forward(&x, &spec, true, 0, &mut r).unwrap().value()[0];
        let t = 0.3f64.tanh();
        assert!((noisy - (t - 1.0 / 3.0)).abs() < 1e-12 || (noisy - (t + 1.0 / 3.0)).abs() < 1e-12);
        // odd step: hard
        let hard = quantize_forward(&x, &spec, true, 1, &mut r).unwrap().value()[0];
        assert!(cb.levels().contains(&hard));
    }

    #[test]
    fn hard_outputs_are_codebook_members_and_idempotent() {
        let mut r = rng();
        use rand::Rng;
        let specs: Vec<QuantizerSpec> = vec![
            QuantizerSpec::new(QuantKind::UniformSte, 3, 0.9),
            QuantizerSpec::new(QuantKind::UniformAun, 4, 1.4),
            QuantizerSpec::new(QuantKind::UniformFsq, 3, 1.0),
            QuantizerSpec::apot(4, 2, 1.2),
            QuantizerSpec::apot(3, 1, 0.6),
        ];
        for spec in &specs {
            let cb = spec.codebook().unwrap();
            let vals: Vec<f64> = (0..200).map(|_| r.random_range(-3.0..3.0)).collect();
            let x = Tensor::from_vec(vals);
            let q = quantize_forward(&x, spec, false, 0, &mut r).unwrap();
            for &v in &q.value() {
                assert!(
                    cb.levels().iter().any(|&l| l == v),
                    "{}: {v} not a level",
                    spec.kind.name()
                );
            }
            // Idempotence holds for the projection-based kinds. FSQ is
            // excluded: its forward companding (tanh) is not a projection
            // in input space, so levels do not map to themselves.
            if spec.kind != QuantKind::UniformFsq {
                let q2 = quantize_forward(&q, spec, false, 0, &mut r).unwrap();
                assert_eq!(q.value(), q2.value(), "{}", spec.kind.name());
            }
        }
    }

    #[test]
    fn negating_input_negates_hard_output() {
        let mut r = rng();
        use rand::Rng;
        let specs: Vec<QuantizerSpec> = vec![
            QuantizerSpec::new(QuantKind::UniformSte, 4, 1.1),
            QuantizerSpec::new(QuantKind::UniformFsq, 3, 1.0),
            QuantizerSpec::apot(6, 2, 0.8),
        ];
        for spec in &specs {
            for _ in 0..500 {
                let v: f64 = r.random_range(-3.0..3.0);
                let q = quantize_values(&[v], spec, false, 0, &mut r).unwrap()[0];
                let qn = quantize_values(&[-v], spec, false, 0, &mut r).unwrap()[0];
                assert_eq!(qn, -q, "{} at {v}", spec.kind.name());
            }
        }
    }

    #[test]
    fn ste_backward_masks_clipped_entries() {
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformSte, 3, 1.0);
        let g = Tensor::from_vec(vec![1.0, 1.0]);
        let x = Tensor::from_vec(vec![0.5, 2.0]);
        let grad = quantize_backward_input(&g, &x, &spec).unwrap();
        assert_eq!(grad.value(), vec![1.0, 0.0]);
    }

    #[test]
    fn fsq_backward_is_tanh_derivative() {
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformFsq, 3, 1.0);
        let g = Tensor::from_vec(vec![1.0]);
        let x = Tensor::from_vec(vec![0.0]);
        let grad = quantize_backward_input(&g, &x, &spec).unwrap();
        assert_eq!(grad.value(), vec![1.0]);
    }

    #[test]
    fn fsq_backward_matches_finite_differences_of_tanh() {
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformFsq, 4, 1.0);
        let points = [-2.0, -0.7, 0.0, 0.4, 1.9];
        let fd = central_diff(|v: &[f64]| v.iter().map(|x| x.tanh()).sum(), &points, 1e-4);
        let grad = quantize_backward_input_values(&[1.0; 5], &points, &spec);
        for (a, f) in grad.iter().zip(fd.iter()) {
            assert!(
                crate::gradcheck::relative_error(*a, *f) < 1e-4,
                "{a} vs {f}"
            );
        }
    }

    #[test]
    fn rcf_alpha_gradient_branches() {
        let spec: QuantizerSpec = QuantizerSpec::apot(2, 2, 1.0);
        // out-of-range branch: sign(x)
        let g = quantize_backward_alpha(
            &Tensor::from_vec(vec![1.0]),
            &Tensor::from_vec(vec![2.0]),
            &spec,
        )
        .unwrap();
        assert_eq!(g, 1.0);
        // value exactly on a scaled level: projection residual vanishes
        let g = quantize_backward_alpha(
            &Tensor::from_vec(vec![1.0]),
            &Tensor::from_vec(vec![0.5]),
            &spec,
        )
        .unwrap();
        assert_eq!(g, 0.0);
        // negative out-of-range, scaled by upstream gradient
        let g = quantize_backward_alpha(
            &Tensor::from_vec(vec![2.0]),
            &Tensor::from_vec(vec![-3.0]),
            &spec,
        )
        .unwrap();
        assert_eq!(g, -2.0);
    }

    #[test]
    fn alpha_gradient_rejects_non_apot_kinds() {
        let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformSte, 3, 1.0);
        let err = quantize_backward_alpha(
            &Tensor::from_vec(vec![1.0]),
            &Tensor::from_vec(vec![0.4]),
            &spec,
        )
        .unwrap_err();
        assert!(matches!(err, Error::AlphaGradKind(_)));
    }

    #[test]
    fn rcf_derivative_is_bounded_on_a_dense_grid() {
        for (b, k) in [(2u8, 2u8), (4, 2), (3, 1), (6, 2)] {
            let unit = build_apot_codebook(1.0f64, b, k).unwrap();
            let (_, max_gap) = unit.gap_range();
            let bound = 1.0 + max_gap;
            for i in 0..=4000 {
                let x = -4.0 + 8.0 * i as f64 / 4000.0;
                let d = rcf_alpha_derivative(x, 1.0, &unit);
                assert!(d.abs() <= bound, "b={b} k={k} x={x}: {d}");
            }
        }
    }

    #[test]
    fn percentile_alpha_examples() {
        let x = Tensor::from_vec(vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
        assert_eq!(init_alpha_percentile(&x).unwrap(), 2.0);

        let constant = Tensor::from_vec(vec![0.7; 32]);
        assert_eq!(init_alpha_percentile(&constant).unwrap(), ALPHA_FLOOR);

        let ramp = Tensor::from_vec((0..=100).map(|i| i as f64).collect());
        assert_eq!(init_alpha_percentile(&ramp).unwrap(), 98.0);

        let empty = Tensor::from_vec(Vec::<f64>::new());
        assert!(matches!(
            init_alpha_percentile(&empty),
            Err(Error::EmptyTensor)
        ));
    }

    #[test]
    fn normalize_disabled_is_identity() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, stats) = normalize_pre_quant(&x, false).unwrap();
        assert_eq!(y.value(), x.value());
        assert!(stats.is_none());
    }

    #[test]
    fn normalize_two_point_channel() {
        let x = Tensor::matrix(2, 1, vec![1.0f64, 3.0]).unwrap();
        let (y, stats) = normalize_pre_quant(&x, true).unwrap();
        let v = y.value();
        assert!((v[0] + 1.0).abs() < 1e-4);
        assert!((v[1] - 1.0).abs() < 1e-4);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
    }

    #[test]
    fn normalize_output_statistics_recheck() {
        let mut r = rng();
        use rand::Rng;
        let data: Vec<f64> = (0..50 * 4).map(|_| r.random_range(-10.0..10.0)).collect();
        let x = Tensor::matrix(50, 4, data).unwrap();
        let (y, _) = normalize_pre_quant(&x, true).unwrap();
        let v = y.value();
        for c in 0..4 {
            let col: Vec<f64> = (0..50).map(|r| v[r * 4 + c]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {c} variance {var}");
        }
    }

    #[test]
    fn smooth_mode_is_the_surrogate_forward() {
        let mut spec: QuantizerSpec = QuantizerSpec::apot(4, 2, 1.0);
        spec.forward = ForwardMode::Smooth;
        let mut r = rng();
        let x = Tensor::from_vec(vec![0.37, 2.5, -4.0]);
        let q = quantize_forward(&x, &spec, true, 3, &mut r).unwrap();
        assert_eq!(q.value(), vec![0.37, 1.0, -1.0]);

        let mut fsq: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformFsq, 3, 1.0);
        fsq.forward = ForwardMode::Smooth;
        let q = quantize_forward(&x, &fsq, true, 3, &mut r).unwrap();
        let expected: Vec<f64> = vec![0.37f64.tanh(), 2.5f64.tanh(), (-4.0f64).tanh()];
        assert_eq!(q.value(), expected);
    }

    #[test]
    fn passthrough_is_identity_both_ways() {
        let spec: QuantizerSpec = QuantizerSpec::passthrough();
        let mut r = rng();
        let x = Tensor::from_vec(vec![0.1, -7.3, 2.2]);
        let q = quantize_forward(&x, &spec, true, 0, &mut r).unwrap();
        assert_eq!(q.value(), x.value());
        let g = quantize_backward_input(&Tensor::from_vec(vec![1.0, 2.0, 3.0]), &x, &spec)
            .unwrap();
        assert_eq!(g.value(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn generic_core_works_in_f32() {
        let cb = build_uniform_codebook(1.0f32, 3).unwrap();
        assert_eq!(cb.len(), 7);
        assert_eq!(cb.project(0.2f32), 2.0f32 / 7.0);
    }
}

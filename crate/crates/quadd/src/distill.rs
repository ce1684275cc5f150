//! Quantization-aware distillation loop.
//!
//! Synthetic samples are stored continuous and pushed through the
//! differentiable quantizer every iteration; gradients reach the samples
//! via the straight-through rule and the clipping threshold via RCF. Two
//! surrogates are provided: distribution matching against class-mean probe
//! features, and trajectory matching against recorded teacher parameter
//! trajectories with unrolled student steps.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{ce_param_grads_on_tape, Arch, Mlp};
use crate::qinit::{quantization_guided_selection, QinitConfig};
use crate::quant::{
    init_alpha_percentile, normalize_pre_quant, quantize_backward_alpha_values,
    quantize_backward_input_values, quantize_values, NormStats, QuantKind, QuantizerSpec,
    ALPHA_FLOOR,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surrogate {
    Dm,
    Tm,
}

impl Surrogate {
    pub fn name(&self) -> &'static str {
        match self {
            Surrogate::Dm => "dm",
            Surrogate::Tm => "tm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dm" => Ok(Surrogate::Dm),
            "tm" => Ok(Surrogate::Tm),
            other => Err(Error::InvalidConfig(format!("unknown surrogate {other:?}"))),
        }
    }
}

/// How the synthetic set is seeded from real data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Greedy graph-cut selection over gradient similarities.
    GraphCut,
    /// Plain per-class random pool.
    RandomPool,
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub surrogate: Surrogate,
    pub m_per_class: usize,
    pub quantizer: QuantKind,
    pub bits: u8,
    /// APoT base bit-width; 0 picks the default (2 when it divides bits).
    pub apot_base_bits: u8,
    pub normalize: bool,
    pub iterations: usize,
    pub lr_synth: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    pub probe_hidden: usize,
    pub probe_out: usize,
    // trajectory matching
    pub student_steps: usize,
    pub expert_steps: usize,
    pub max_start_epoch: usize,
    pub lr_student: f64,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_arch: Arch,
    pub teacher_hidden: usize,
    /// Normalize the matching distance by the start-target gap.
    pub normalize_tm: bool,
    // initialization
    pub init_strategy: InitStrategy,
    pub init_with_replacement: bool,
    /// Bits of the initialization pre-quantizer; `None` reuses `bits`.
    pub qinit_bits: Option<u8>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            surrogate: Surrogate::Dm,
            m_per_class: 10,
            quantizer: QuantKind::Apot,
            bits: 3,
            apot_base_bits: 0,
            normalize: false,
            iterations: 500,
            lr_synth: 0.5,
            lr_alpha: 0.02,
            batch_size: 64,
            probe_hidden: 64,
            probe_out: 64,
            student_steps: 8,
            expert_steps: 1,
            max_start_epoch: 6,
            lr_student: 0.2,
            teacher_epochs: 8,
            teacher_lr: 0.2,
            teacher_arch: Arch::Mlp2,
            teacher_hidden: 32,
            normalize_tm: true,
            init_strategy: InitStrategy::GraphCut,
            init_with_replacement: false,
            qinit_bits: None,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_per_class == 0 {
            return Err(Error::InvalidConfig("m_per_class must be positive".into()));
        }
        if self.lr_synth <= 0.0 || self.lr_alpha <= 0.0 || self.lr_student <= 0.0 {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.surrogate == Surrogate::Tm
            && self.teacher_epochs < self.max_start_epoch + self.expert_steps
        {
            return Err(Error::InvalidConfig(format!(
                "teacher epochs {} cannot cover start {} + segment {}",
                self.teacher_epochs, self.max_start_epoch, self.expert_steps
            )));
        }
        self.base_spec().validate()
    }

    pub fn apot_base(&self) -> u8 {
        if self.apot_base_bits == 0 {
            crate::quant::default_apot_base(self.bits)
        } else {
            self.apot_base_bits
        }
    }

    /// Quantizer spec before alpha initialization.
    pub fn base_spec(&self) -> QuantizerSpec {
        let mut spec = match self.quantizer {
            QuantKind::Apot => QuantizerSpec::apot(self.bits, self.apot_base(), 1.0),
            QuantKind::Passthrough => QuantizerSpec::passthrough(),
            kind => QuantizerSpec::new(kind, self.bits, 1.0),
        };
        spec.normalize = self.normalize;
        spec
    }

    /// FNV-1a hash of the canonical debug rendering.
    pub fn hash(&self) -> u64 {
        let text = format!("{self:?}");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: u64,
    pub seed: u64,
}

/// Synthetic dataset with its quantizer state.
#[derive(Debug, Clone)]
pub struct DistilledDataset {
    /// Row-major `m x d` values. Continuous latents fresh out of the
    /// distillation loop; exact codebook levels once discretized.
    pub samples: Vec<f64>,
    pub m: usize,
    pub d: usize,
    pub classes: usize,
    pub labels: Vec<usize>,
    pub spec: QuantizerSpec,
    /// Present on discretized datasets that were normalized before
    /// quantization; evaluation applies the same affine map to test data.
    pub norm_stats: Option<NormStats>,
    /// Samples are final feature values (normalized and hard-quantized).
    pub discretized: bool,
    pub provenance: Provenance,
}

impl DistilledDataset {
    pub fn samples_tensor(&self) -> Tensor {
        Tensor::matrix(self.m, self.d, self.samples.clone()).unwrap()
    }

    /// Feature values a student trains on: normalization (when enabled)
    /// followed by evaluation-mode hard quantization. Identity on already
    /// discretized datasets.
    pub fn eval_features(&self) -> Result<(Vec<f64>, Option<NormStats>)> {
        if self.discretized {
            return Ok((self.samples.clone(), self.norm_stats.clone()));
        }
        let tensor = self.samples_tensor();
        let (pre, stats) = normalize_pre_quant(&tensor, self.spec.normalize)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let values = pre.with_data(|v| quantize_values(v, &self.spec, false, 0, &mut rng))?;
        Ok((values, stats))
    }

    /// Permanent discretization: samples become exact codebook levels.
    pub fn discretized(&self) -> Result<DistilledDataset> {
        let (samples, norm_stats) = self.eval_features()?;
        Ok(DistilledDataset {
            samples,
            norm_stats,
            discretized: true,
            ..self.clone()
        })
    }

    pub fn labeled_view(&self) -> Result<LabeledDataset> {
        let (features, _) = self.eval_features()?;
        LabeledDataset::new(features, self.d, self.classes, self.labels.clone())
    }

    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// One-shot hard quantization of an (ordinarily full-precision) distilled
/// dataset under `spec`; the post-quantization baseline.
pub fn post_quantize(synth: &DistilledDataset, spec: &QuantizerSpec) -> Result<DistilledDataset> {
    let mut out = synth.clone();
    out.spec = spec.clone();
    out.norm_stats = None;
    out.discretized = false;
    out.discretized()
}

/// Ordered teacher parameter snapshots, one per epoch including the
/// initialization.
#[derive(Debug, Clone)]
pub struct ExpertTrajectory {
    pub snapshots: Vec<Vec<f64>>,
    /// Cross-entropy on the training data at each snapshot.
    pub train_losses: Vec<f64>,
    pub teacher_seed: u64,
    pub dataset_id: String,
    pub arch: Arch,
    pub hidden: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ExpertTrajectory {
    pub fn epochs(&self) -> usize {
        self.snapshots.len() - 1
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut dims = vec![self.in_dim];
        dims.extend(std::iter::repeat(self.hidden).take(self.arch.hidden_layers()));
        dims.push(self.out_dim);
        let mut shapes = Vec::new();
        for l in 0..dims.len() - 1 {
            shapes.push(vec![dims[l], dims[l + 1]]);
            shapes.push(vec![dims[l + 1]]);
        }
        shapes
    }

    /// Splits one snapshot into constant parameter tensors.
    pub fn param_tensors(&self, epoch: usize) -> Result<Vec<Tensor>> {
        let flat = self.snapshots.get(epoch).ok_or(Error::EpochOutOfRange {
            start: epoch,
            end: epoch,
            len: self.snapshots.len(),
        })?;
        let mut out = Vec::new();
        let mut offset = 0;
        for shape in self.param_shapes() {
            let n: usize = shape.iter().product();
            out.push(Tensor::new(shape, flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(out)
    }
}

/// Plain SGD teacher training on real data with one full-batch gradient
/// step per epoch, snapshotting after every epoch including epoch zero.
pub fn record_expert_trajectories(
    real: &LabeledDataset,
    arch: Arch,
    hidden: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ExpertTrajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Mlp::random(arch, real.d, hidden, real.classes, &mut rng);
    let x = real.features_tensor();
    let mut snapshots = vec![teacher.param_vector()];
    let mut train_losses = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let tape = Tape::new();
        let params = teacher.params();
        let loss = teacher.ce_loss(&tape, &x, &real.labels)?;
        train_losses.push(loss.item());
        let grads = ce_param_grads_on_tape(&tape, &params, &x, &real.labels)?;
        for (p, g) in params.iter().zip(grads.iter()) {
            let gv = g.value();
            let mut pv = p.value();
            for (pi, gi) in pv.iter_mut().zip(gv.iter()) {
                *pi -= lr * gi;
            }
            p.set_data(pv);
        }
        snapshots.push(teacher.param_vector());
    }
    {
        let tape = Tape::new();
        let loss = teacher.ce_loss(&tape, &x, &real.labels)?;
        train_losses.push(loss.item());
    }
    Ok(ExpertTrajectory {
        snapshots,
        train_losses,
        teacher_seed: seed,
        dataset_id: format!("n{}d{}c{}", real.n, real.d, real.classes),
        arch,
        hidden,
        in_dim: real.d,
        out_dim: real.classes,
    })
}

/// Distribution-matching loss: sum over classes of the squared distance
/// between class-mean probe features of the real batch and of the
/// (already quantized) synthetic samples. Classes absent from the real
/// batch contribute nothing.
pub fn dm_loss(
    tape: &Tape,
    probe: &Mlp,
    real_batch: &LabeledDataset,
    synth_q: &Tensor,
    synth_labels: &[usize],
    classes: usize,
) -> Result<Tensor> {
    let feats_synth = probe.forward(tape, synth_q)?;
    let feats_real = probe.forward(tape, &real_batch.features_tensor())?;
    let mut total: Option<Tensor> = None;
    for c in 0..classes {
        let real_idx = real_batch.indices_of_class(c);
        let synth_idx: Vec<usize> = synth_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect();
        if real_idx.is_empty() || synth_idx.is_empty() {
            log::debug!("dm: class {c} absent from batch, contributes 0");
            continue;
        }
        let mean_real = tape.mean_axis(&tape.gather_rows(&feats_real, &real_idx)?, 0)?;
        let mean_synth = tape.mean_axis(&tape.gather_rows(&feats_synth, &synth_idx)?, 0)?;
        let dist = tape.sq_err(&mean_synth, &mean_real)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &dist)?,
            None => dist,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// Trajectory-matching loss: initialize a student at the start snapshot,
/// unroll `student_steps` SGD steps of cross-entropy on the quantized
/// synthetic data, and measure the squared distance to the target
/// snapshot, normalized by the start-target gap. Differentiable through
/// the unrolled updates.
pub fn tm_loss(
    tape: &Tape,
    traj: &ExpertTrajectory,
    start_epoch: usize,
    synth_q: &Tensor,
    synth_labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Tensor> {
    let end = start_epoch + cfg.expert_steps;
    if end >= traj.snapshots.len() {
        return Err(Error::EpochOutOfRange {
            start: start_epoch,
            end,
            len: traj.snapshots.len(),
        });
    }
    let start = &traj.snapshots[start_epoch];
    let target = &traj.snapshots[end];
    let gap: f64 = start
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if gap == 0.0 {
        // degenerate segment carries no signal
        return Ok(Tensor::scalar(0.0));
    }

    let mut params = traj.param_tensors(start_epoch)?;
    for _ in 0..cfg.student_steps {
        let grads = ce_param_grads_on_tape(tape, &params, synth_q, synth_labels)?;
        let mut next = Vec::with_capacity(params.len());
        for (p, g) in params.iter().zip(grads.iter()) {
            next.push(tape.sub(p, &tape.affine(g, cfg.lr_student, 0.0))?);
        }
        params = next;
    }

    let targets = traj.param_tensors(end)?;
    let mut total: Option<Tensor> = None;
    for (p, t) in params.iter().zip(targets.iter()) {
        let dist = tape.sq_err(p, t)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &dist)?,
            None => dist,
        });
    }
    let total = total.expect("trajectory has parameters");
    if cfg.normalize_tm {
        Ok(tape.affine(&total, 1.0 / gap, 0.0))
    } else {
        Ok(total)
    }
}

/// Inserts the quantizer into the graph: forward quantizes the current
/// values under the current clipping threshold, backward applies the
/// straight-through input rule and (for apot) the RCF threshold rule.
pub fn quantize_on_tape<R: Rng + ?Sized>(
    tape: &Tape,
    x: &Tensor,
    alpha: &Tensor,
    base: &QuantizerSpec,
    training: bool,
    step: u64,
    rng: &mut R,
) -> Result<Tensor> {
    let fwd_spec = base.with_alpha(alpha.item());
    let bwd_spec = base.clone();
    tape.custom_grad(
        &[x.clone(), alpha.clone()],
        move |ins| {
            let data = ins[0].with_data(|v| quantize_values(v, &fwd_spec, training, step, rng))?;
            Ok((ins[0].shape(), data))
        },
        move |g, ins| {
            let spec = bwd_spec.with_alpha(ins[1].item());
            let dx = ins[0].with_data(|xv| quantize_backward_input_values(g, xv, &spec));
            let dalpha = if spec.kind == QuantKind::Apot {
                let da = ins[0].with_data(|xv| quantize_backward_alpha_values(g, xv, &spec))?;
                Some(vec![da])
            } else {
                None
            };
            Ok(vec![Some(dx), dalpha])
        },
    )
}

/// RNG streams of one distillation run. Each stage owns an independent
/// deterministic stream derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Init = 1,
    TopUp = 2,
    Teacher = 3,
    Loop = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    splitmix64(seed ^ splitmix64(stage as u64))
}

pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(seed, stage))
}

/// Distinct batch indices by partial shuffle; the whole set when the
/// batch covers it.
pub fn sample_batch_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    for pick in 0..batch {
        let swap = rng.random_range(pick..n);
        order.swap(pick, swap);
    }
    order.truncate(batch);
    order
}

/// Fresh random feature extractor, re-sampled every iteration.
pub fn sample_probe<R: Rng + ?Sized>(rng: &mut R, d: usize, hidden: usize, out: usize) -> Mlp {
    Mlp::random(Arch::Mlp2, d, hidden, out, rng)
}

/// Initial synthetic set: graph-cut (or random-pool) selection over the
/// uniformly pre-quantized real data. Deficient classes contribute all of
/// their samples, topped up by with-replacement duplicates when
/// configured.
pub fn init_synthetic(real: &LabeledDataset, config: &DistillConfig) -> Result<DistilledDataset> {
    let qinit_bits = match config.qinit_bits {
        Some(b) => b,
        None if config.quantizer == QuantKind::Passthrough => 8,
        None => config.bits,
    };
    let provenance = Provenance {
        config_hash: config.hash(),
        seed: config.seed,
    };

    let indices_per_class: Vec<Vec<usize>>;
    let value_source: LabeledDataset;
    match config.init_strategy {
        InitStrategy::GraphCut => {
            let qcfg = QinitConfig {
                bits: qinit_bits,
                model_arch: Arch::Mlp2,
                model_hidden: config.probe_hidden,
                seed: stage_seed(config.seed, Stage::Init),
            };
            let outcome = quantization_guided_selection(real, &qcfg, config.m_per_class)?;
            indices_per_class = outcome
                .selections
                .into_iter()
                .map(|s| s.indices)
                .collect();
            value_source = outcome.pre_quantized;
        }
        InitStrategy::RandomPool => {
            let features = real.features_tensor();
            let alpha = init_alpha_percentile(&features)?;
            let spec: QuantizerSpec = QuantizerSpec::new(QuantKind::UniformSte, qinit_bits, alpha);
            let mut rng = stage_rng(config.seed, Stage::Init);
            let q = crate::quant::quantize_forward(&features, &spec, false, 0, &mut rng)?;
            let pre_q =
                LabeledDataset::new(q.value(), real.d, real.classes, real.labels.clone())?;
            let pool = crate::datasets::sample_init_pool(
                &pre_q,
                config.m_per_class,
                config.init_with_replacement,
                stage_seed(config.seed, Stage::Init),
            );
            // the pool is already the selection
            let mut samples = pool.features.clone();
            let labels = pool.labels.clone();
            let m = pool.n;
            let d = pool.d;
            return Ok(DistilledDataset {
                samples: std::mem::take(&mut samples),
                m,
                d,
                classes: real.classes,
                labels,
                spec: config.base_spec(),
                norm_stats: None,
                discretized: false,
                provenance,
            });
        }
    }

    let mut topup_rng = stage_rng(config.seed, Stage::TopUp);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (class, picked) in indices_per_class.iter().enumerate() {
        let mut rows: Vec<usize> = picked.clone();
        if config.init_with_replacement && rows.len() < config.m_per_class && !rows.is_empty() {
            let pool = value_source.indices_of_class(class);
            while rows.len() < config.m_per_class {
                rows.push(pool[topup_rng.random_range(0..pool.len())]);
            }
        }
        for &i in &rows {
            samples.extend_from_slice(value_source.row(i));
            labels.push(class);
        }
    }
    let m = labels.len();
    Ok(DistilledDataset {
        samples,
        m,
        d: real.d,
        classes: real.classes,
        labels,
        spec: config.base_spec(),
        norm_stats: None,
        discretized: false,
        provenance,
    })
}

pub struct DistillOutcome {
    pub dataset: DistilledDataset,
    pub loss_trace: Vec<f64>,
    pub alpha_trace: Vec<f64>,
}

/// Column-standardization of a tape tensor composed from differentiable
/// ops, so gradients flow through the batch statistics.
fn normalize_on_tape(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let rows = shape[0];
    let mean = tape.mean_axis(x, 0)?;
    let centered = tape.sub(x, &tape.tile_rows(&mean, rows)?)?;
    let var = tape.mean_axis(&tape.mul(&centered, &centered)?, 0)?;
    let denom = tape.sqrt(&tape.affine(&var, 1.0, crate::quant::NORM_EPS));
    let inv = tape.recip(&denom);
    tape.mul(&centered, &tape.tile_rows(&inv, rows)?)
}

/// The full quantization-aware distillation loop.
pub fn quadd_run(real: &LabeledDataset, config: &DistillConfig) -> Result<DistillOutcome> {
    config.validate()?;
    let mut ds = init_synthetic(real, config)?;

    // clipping threshold: percentile range of the initialized samples for
    // the learnable/uniform kinds, pinned to 1 for tanh companding
    let alpha0 = match config.quantizer {
        QuantKind::UniformFsq | QuantKind::Passthrough => 1.0,
        _ => init_alpha_percentile(&ds.samples_tensor())?,
    };
    ds.spec.alpha = alpha0;

    let traj = if config.surrogate == Surrogate::Tm {
        Some(record_expert_trajectories(
            real,
            config.teacher_arch,
            config.teacher_hidden,
            config.teacher_epochs,
            config.teacher_lr,
            stage_seed(config.seed, Stage::Teacher),
        )?)
    } else {
        None
    };

    let synth = Tensor::param(vec![ds.m, ds.d], ds.samples.clone())?;
    let alpha = Tensor::param(vec![], vec![alpha0])?;
    let alpha_learnable = config.quantizer == QuantKind::Apot;

    let mut rng = stage_rng(config.seed, Stage::Loop);
    let mut loss_trace = Vec::with_capacity(config.iterations);
    let mut alpha_trace = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let batch_idx = sample_batch_indices(&mut rng, real.n, config.batch_size);
        let batch = real.subset(&batch_idx);

        let tape = Tape::new();
        synth.zero_grad();
        alpha.zero_grad();

        let pre = if config.normalize {
            normalize_on_tape(&tape, &synth)?
        } else {
            synth.clone()
        };

        let loss = match config.surrogate {
            Surrogate::Dm => {
                let probe = sample_probe(&mut rng, ds.d, config.probe_hidden, config.probe_out);
                let synth_q = quantize_on_tape(
                    &tape, &pre, &alpha, &ds.spec, true, iter as u64, &mut rng,
                )?;
                dm_loss(&tape, &probe, &batch, &synth_q, &ds.labels, ds.classes)?
            }
            Surrogate::Tm => {
                let traj = traj.as_ref().unwrap();
                let start = rng.random_range(0..=config.max_start_epoch);
                let synth_q = quantize_on_tape(
                    &tape, &pre, &alpha, &ds.spec, true, iter as u64, &mut rng,
                )?;
                tm_loss(&tape, traj, start, &synth_q, &ds.labels, config)?
            }
        };

        let loss_value = loss.item();
        if !loss_value.is_finite() {
            let tail_start = loss_trace.len().saturating_sub(10);
            return Err(Error::NanLoss {
                iter,
                alpha: alpha.item(),
                tail: loss_trace[tail_start..].to_vec(),
            });
        }
        tape.backward(&loss)?;

        synth.sgd_step(config.lr_synth);
        if alpha_learnable {
            alpha.sgd_step(config.lr_alpha);
            let clamped = alpha.item().max(ALPHA_FLOOR);
            alpha.set_data(vec![clamped]);
            ds.spec.alpha = clamped;
        }

        loss_trace.push(loss_value);
        alpha_trace.push(alpha.item());
    }

    ds.samples = synth.value();
    ds.spec.alpha = alpha.item();
    Ok(DistillOutcome {
        dataset: ds,
        loss_trace,
        alpha_trace,
    })
}

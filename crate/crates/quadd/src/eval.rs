//! Student training on distilled or real data, and metric computation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datasets::LabeledDataset;
use crate::distill::DistilledDataset;
use crate::error::Result;
use crate::nn::{Arch, Mlp};
use crate::packfmt::{measure_bits, BitCounts};
use crate::quant::NormStats;
use crate::tape::Tape;

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            epochs: 60,
            lr: 0.1,
            batch: 64,
            width: 64,
        }
    }
}

/// Longer fixed schedule for the 64-class beam task.
pub fn beam_eval_defaults() -> EvalConfig {
    EvalConfig {
        epochs: 150,
        lr: 0.3,
        batch: 32,
        width: 64,
    }
}

pub fn eval_defaults(task: crate::datasets::TaskId) -> EvalConfig {
    match task {
        crate::datasets::TaskId::Gaussian => EvalConfig::default(),
        crate::datasets::TaskId::Beam => beam_eval_defaults(),
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_recall: Vec<f64>,
    pub seeds: Vec<u64>,
    pub arch: String,
    pub bits: Option<BitCounts>,
}

/// Minibatch SGD with a fixed schedule; deterministic per seed.
pub fn train_student(
    data: &LabeledDataset,
    arch: Arch,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Mlp::random(arch, data.d, cfg.width, data.classes, &mut rng);
    model.set_trainable(true);
    let mut order: Vec<usize> = (0..data.n).collect();
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch = data.subset(chunk);
            let tape = Tape::new();
            model.zero_grads();
            let loss = model.ce_loss(&tape, &batch.features_tensor(), &batch.labels)?;
            tape.backward(&loss)?;
            model.sgd_step(cfg.lr);
        }
    }
    model.set_trainable(false);
    Ok(model)
}

/// Student-facing view of a distilled dataset: evaluation-mode hard
/// quantization of the stored samples.
pub fn student_view(ds: &DistilledDataset) -> Result<LabeledDataset> {
    ds.labeled_view()
}

/// Applies stored normalization statistics to test features so they live
/// in the same space as normalized distilled data.
pub fn apply_norm(test: &LabeledDataset, stats: &NormStats) -> LabeledDataset {
    let mut features = test.features.clone();
    stats.apply(&mut features);
    LabeledDataset {
        features,
        ..test.clone()
    }
}

/// Accuracy, macro-F1 (undefined classes contribute 0) and per-class
/// recall of a model on a test set. Pure: repeated evaluation yields the
/// identical report.
pub fn evaluate(model: &Mlp, test: &LabeledDataset) -> Result<EvalReport> {
    let predictions = model.predict(&test.features_tensor())?;
    metrics_from_predictions(&predictions, &test.labels, test.classes)
}

pub fn metrics_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<EvalReport> {
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    let mut correct = 0u64;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let accuracy = correct as f64 / labels.len().max(1) as f64;
    let mut per_class_recall = vec![0.0; classes];
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let actual = tp[c] + fn_[c];
        per_class_recall[c] = if actual > 0 {
            tp[c] as f64 / actual as f64
        } else {
            0.0
        };
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        f1_sum += if denom > 0 {
            2.0 * tp[c] as f64 / denom as f64
        } else {
            0.0
        };
    }
    Ok(EvalReport {
        accuracy,
        macro_f1: f1_sum / classes as f64,
        per_class_recall,
        seeds: Vec::new(),
        arch: String::new(),
        bits: None,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregate of one (dataset, architecture) evaluation cell over seeds.
#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub arch: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub seeds: Vec<u64>,
    pub bits: Option<BitCounts>,
    pub runs: Vec<EvalReport>,
}

/// Seeds of the multi-run evaluation protocol.
pub fn eval_seeds(base: u64, runs: usize) -> Vec<u64> {
    (0..runs as u64).map(|i| base + i).collect()
}

/// Trains one student per seed on the distilled data and evaluates each on
/// the test split. Seed cells run in parallel with isolated state.
pub fn eval_protocol(
    ds: &DistilledDataset,
    test: &LabeledDataset,
    arch: Arch,
    seeds: &[u64],
    cfg: &EvalConfig,
) -> Result<ProtocolReport> {
    let (train_view, stats) = {
        let (features, stats) = ds.eval_features()?;
        (
            LabeledDataset::new(features, ds.d, ds.classes, ds.labels.clone())?,
            stats.or_else(|| ds.norm_stats.clone()),
        )
    };
    let test_view = match &stats {
        Some(s) => apply_norm(test, s),
        None => test.clone(),
    };
    let runs: Vec<EvalReport> = seeds
        .par_iter()
        .map(|&seed| -> Result<EvalReport> {
            let model = train_student(&train_view, arch, cfg, seed)?;
            let mut report = evaluate(&model, &test_view)?;
            report.seeds = vec![seed];
            report.arch = arch.name().to_string();
            Ok(report)
        })
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let f1s: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    let (macro_f1_mean, macro_f1_std) = mean_std(&f1s);
    Ok(ProtocolReport {
        arch: arch.name().to_string(),
        accuracy_mean,
        accuracy_std,
        macro_f1_mean,
        macro_f1_std,
        seeds: seeds.to_vec(),
        bits: measure_bits(ds, true).ok(),
        runs,
    })
}

/// Evaluates the same distilled data across several student
/// architectures.
pub fn cross_arch_eval(
    ds: &DistilledDataset,
    test: &LabeledDataset,
    archs: &[Arch],
    seeds: &[u64],
    cfg: &EvalConfig,
) -> Result<Vec<ProtocolReport>> {
    archs
        .iter()
        .map(|&arch| eval_protocol(ds, test, arch, seeds, cfg))
        .collect()
}

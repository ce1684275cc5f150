//! Rate-distortion sweep harness and CSV reporting.
//!
//! One cell is an `(m_per_class, bits)` pair distilled under one or more
//! seeds; cells run in parallel with isolated RNG state and are merged in
//! deterministic cell order. The long-format CSV carries one row per cell;
//! a per-budget summary keeps the best cell of every payload-bit group.

use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::datasets::Task;
use crate::distill::{quadd_run, DistillConfig, DistilledDataset};
use crate::error::{Error, Result};
use crate::eval::{eval_protocol, eval_seeds, EvalConfig, ProtocolReport};
use crate::nn::Arch;
use crate::packfmt::measure_bits;

pub const CSV_HEADER: &str =
    "task,surrogate,m,b,payload_bits,total_bits,accuracy_mean,accuracy_std,macro_f1_mean,seconds";

/// One report row of the distill/sweep CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub task: String,
    pub surrogate: String,
    /// Total sample count of the distilled dataset.
    pub m: u64,
    pub bits: u8,
    pub payload_bits: u64,
    pub total_bits: u64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub seconds: f64,
}

impl CsvRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3}",
            self.task,
            self.surrogate,
            self.m,
            self.bits,
            self.payload_bits,
            self.total_bits,
            self.accuracy_mean,
            self.accuracy_std,
            self.macro_f1_mean,
            self.seconds
        )
    }

    pub fn parse(line: &str) -> Result<CsvRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::InvalidConfig(format!(
                "expected 10 CSV fields, got {}",
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad numeric field {s:?}")))
        };
        Ok(CsvRow {
            task: fields[0].to_string(),
            surrogate: fields[1].to_string(),
            m: num(fields[2])? as u64,
            bits: num(fields[3])? as u8,
            payload_bits: num(fields[4])? as u64,
            total_bits: num(fields[5])? as u64,
            accuracy_mean: num(fields[6])?,
            accuracy_std: num(fields[7])?,
            macro_f1_mean: num(fields[8])?,
            seconds: num(fields[9])?,
        })
    }
}

/// Evaluation settings of one report row.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub arch: Arch,
    pub eval_seed: u64,
    pub eval_runs: usize,
    pub config: EvalConfig,
}

pub struct CellOutcome {
    pub row: CsvRow,
    pub dataset: DistilledDataset,
    pub report: ProtocolReport,
    pub loss_trace: Vec<f64>,
}

fn pooled_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Distills under every seed, evaluates each result, and aggregates one
/// CSV row. The returned dataset is the first seed's (the one a single
/// `distill` invocation would produce).
pub fn run_cell(
    task: &Task,
    base: &DistillConfig,
    seeds: &[u64],
    eval: &EvalOptions,
) -> Result<CellOutcome> {
    let start = Instant::now();
    let mut first: Option<(DistilledDataset, ProtocolReport, Vec<f64>)> = None;
    let mut accs = Vec::new();
    let mut f1s = Vec::new();
    let mut m_total = 0u64;
    for &seed in seeds {
        let cfg = DistillConfig {
            seed,
            ..base.clone()
        };
        let out = quadd_run(&task.train, &cfg)?;
        let report = eval_protocol(
            &out.dataset,
            &task.test,
            eval.arch,
            &eval_seeds(eval.eval_seed, eval.eval_runs),
            &eval.config,
        )?;
        for run in &report.runs {
            accs.push(run.accuracy);
            f1s.push(run.macro_f1);
        }
        m_total = out.dataset.m as u64;
        if first.is_none() {
            first = Some((out.dataset, report, out.loss_trace));
        }
    }
    let (dataset, report, loss_trace) = first.expect("at least one seed");
    let bits_counts = measure_bits(&dataset, true)?;
    let (accuracy_mean, accuracy_std) = pooled_mean_std(&accs);
    let (macro_f1_mean, _) = pooled_mean_std(&f1s);
    let row = CsvRow {
        task: task.id.name().to_string(),
        surrogate: base.surrogate.name().to_string(),
        m: m_total,
        bits: base.bits,
        payload_bits: bits_counts.payload_bits,
        total_bits: bits_counts.total_bits,
        accuracy_mean,
        accuracy_std,
        macro_f1_mean,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(CellOutcome {
        row,
        dataset,
        report,
        loss_trace,
    })
}

/// Inline or file-loaded sweep grid.
#[derive(Debug, Clone, Deserialize)]
pub struct SweepGrid {
    pub m_per_class: Vec<usize>,
    pub bits: Vec<u8>,
    pub seeds: Vec<u64>,
    /// Optional budget targets (payload bits); cells whose payload exceeds
    /// every target are dropped and the summary groups by target.
    #[serde(default)]
    pub budgets: Vec<u64>,
}

impl SweepGrid {
    pub fn from_json(text: &str) -> Result<SweepGrid> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_per_class.is_empty() || self.bits.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "sweep grid needs m_per_class, bits and seeds".into(),
            ));
        }
        Ok(())
    }
}

pub struct SweepOutcome {
    pub rows: Vec<CsvRow>,
    /// Per-cell failures as (m_per_class, bits, message).
    pub failures: Vec<(usize, u8, String)>,
}

/// Executes every `(m_per_class, bits)` cell of the grid in parallel.
/// Per-cell failures are recorded without aborting the sweep; rows come
/// back sorted by (m, bits).
pub fn run_sweep(
    task: &Task,
    base: &DistillConfig,
    grid: &SweepGrid,
    eval: &EvalOptions,
) -> Result<SweepOutcome> {
    grid.validate()?;
    let mut cells: Vec<(usize, u8)> = Vec::new();
    for &m in &grid.m_per_class {
        for &b in &grid.bits {
            cells.push((m, b));
        }
    }
    let results: Vec<(usize, u8, std::result::Result<CsvRow, String>)> = cells
        .par_iter()
        .map(|&(m, b)| {
            let cfg = DistillConfig {
                m_per_class: m,
                bits: b,
                apot_base_bits: if base.apot_base_bits == 0 {
                    0
                } else {
                    base.apot_base_bits
                },
                ..base.clone()
            };
            let outcome = cfg
                .validate()
                .and_then(|_| run_cell(task, &cfg, &grid.seeds, eval));
            match outcome {
                Ok(cell) => (m, b, Ok(cell.row)),
                Err(e) => (m, b, Err(e.to_string())),
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut ordered = results;
    ordered.sort_by_key(|(m, b, _)| (*m, *b));
    for (m, b, r) in ordered {
        match r {
            Ok(row) => {
                if let Some(&max_budget) = grid.budgets.iter().max() {
                    if row.payload_bits > max_budget {
                        continue;
                    }
                }
                rows.push(row);
            }
            Err(msg) => failures.push((m, b, msg)),
        }
    }
    Ok(SweepOutcome { rows, failures })
}

/// Best row (by mean accuracy) per budget group. Groups are the stated
/// budget targets when given, otherwise the distinct payload-bit counts.
pub fn summarize_by_budget(rows: &[CsvRow], budgets: &[u64]) -> Vec<(u64, CsvRow)> {
    let mut groups: Vec<(u64, CsvRow)> = Vec::new();
    for row in rows {
        let key = if budgets.is_empty() {
            row.payload_bits
        } else {
            match budgets
                .iter()
                .filter(|&&t| t >= row.payload_bits)
                .min()
                .copied()
            {
                Some(t) => t,
                None => continue,
            }
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, best)) => {
                if row.accuracy_mean > best.accuracy_mean {
                    *best = row.clone();
                }
            }
            None => groups.push((key, row.clone())),
        }
    }
    groups.sort_by_key(|(k, _)| *k);
    groups
}

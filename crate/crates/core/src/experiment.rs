//! Multi-run experiment helpers: bit-width sweeps and post-training
//! quantization baselines over several seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{contract, Result};
use crate::par::Execution;
use crate::quant::{self, QuantSpec};
use crate::trainer::{self, RunRecord, TrainConfig};

/// One training job: seed `s` uses split seed `s` and training seed `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub seed: u64,
    pub config: TrainConfig,
}

impl Job {
    pub fn new(seed: u64, config: &TrainConfig) -> Self {
        Self {
            seed,
            config: TrainConfig {
                seed,
                ..config.clone()
            },
        }
    }
}

/// Runs every job on `target`, results in job order.
pub fn run_jobs(ds: &DomainDataset, target: &str, jobs: &[Job], exec: Execution) -> Result<Vec<RunRecord>> {
    exec.try_map(jobs.len(), |i| {
        trainer::train_leave_one_out(ds, target, jobs[i].seed, &jobs[i].config)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// 32 for the full-precision baseline.
    pub bits: u32,
    pub seed: u64,
    pub target_acc: f64,
    pub val_acc: f64,
    pub compression: f64,
    pub diverged: bool,
}

pub const SWEEP_HEADER: &str = "bits,seed,target_acc,val_acc,compression";

/// ERM baseline rows followed by one row per (bits, seed). `base` supplies
/// the quantization step and the rest of the schedule. Bit widths must lie in
/// `2..=16` so the baseline's 32 stays unambiguous. Diverged runs without any
/// validation point report NaN accuracies.
pub fn sweep_bits(
    ds: &DomainDataset,
    target: &str,
    base: &TrainConfig,
    bits: &[u32],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if let Some(b) = bits.iter().find(|b| !(2..=16).contains(*b)) {
        return Err(contract(format!("sweep bit width {b} outside 2..=16")));
    }
    if seeds.is_empty() {
        return Err(contract("sweep needs at least one seed"));
    }
    let erm = TrainConfig {
        quantize_at: None,
        ..base.clone()
    };
    let mut jobs: Vec<(u32, Job)> = seeds.iter().map(|&s| (32, Job::new(s, &erm))).collect();
    for &b in bits {
        let cfg = TrainConfig {
            quantize_at: base.quantize_at.or(Some(trainer::DEFAULT_QUANTIZE_AT)),
            quant: QuantSpec { bits: b, ..base.quant },
            ..base.clone()
        };
        cfg.validate()?;
        jobs.extend(seeds.iter().map(|&s| (b, Job::new(s, &cfg))));
    }
    let only: Vec<Job> = jobs.iter().map(|(_, j)| j.clone()).collect();
    let runs = run_jobs(ds, target, &only, exec)?;
    Ok(jobs
        .iter()
        .zip(&runs)
        .map(|((b, job), run)| SweepRow {
            bits: *b,
            seed: job.seed,
            target_acc: run.best_target_acc().unwrap_or(f64::NAN),
            val_acc: run.best_val_acc().unwrap_or(f64::NAN),
            compression: if *b == 32 { 1.0 } else { 32.0 / *b as f64 },
            diverged: run.diverged(),
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.bits, r.seed, r.target_acc, r.val_acc, r.compression);
    }
    s
}

/// Mean target accuracy per bit width, in order of first appearance.
pub fn mean_by_bits(rows: &[SweepRow]) -> Vec<(u32, f64)> {
    let mut order: Vec<u32> = Vec::new();
    for r in rows {
        if !order.contains(&r.bits) {
            order.push(r.bits);
        }
    }
    order
        .into_iter()
        .map(|b| {
            let xs: Vec<f64> = rows.iter().filter(|r| r.bits == b).map(|r| r.target_acc).collect();
            (b, xs.iter().sum::<f64>() / xs.len() as f64)
        })
        .collect()
}

/// Target accuracy of a run's selected checkpoint after round-to-nearest
/// quantization at `spec`.
pub fn ptq_target_acc(ds: &DomainDataset, record: &RunRecord, spec: QuantSpec) -> Result<f64> {
    let best = trainer::select_best(record)?;
    let q = quant::ptq_round_to_nearest(&best.model, spec)?;
    let t = ds.domain(&record.target_domain)?;
    q.accuracy(&t.features, &t.labels)
}

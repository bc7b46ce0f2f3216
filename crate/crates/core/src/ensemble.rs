//! Ensembles of independently trained quantized models.
//!
//! Members differ only in their split seed and training seed. Predictions
//! average the members' logits, apply one softmax and take the argmax.

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{contract, dim, Result};
use crate::nn::{argmax, ModelState};
use crate::par::Execution;
use crate::quant::{self, QuantSpec};
use crate::tensor::{softmax, Tensor};
use crate::trainer::{self, RunStatus, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSeeds {
    pub split_seed: u64,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSeeds>,
    /// Shared by every member; its `seed` field is overridden per member.
    pub train: TrainConfig,
}

impl EnsembleSpec {
    pub fn new(members: Vec<MemberSeeds>, train: TrainConfig) -> Result<Self> {
        let spec = Self { members, train };
        spec.validate()?;
        Ok(spec)
    }

    /// `size` members with split seeds `base, base+1, ...` and training seeds
    /// offset from them.
    pub fn from_base_seed(size: usize, base: u64, train: TrainConfig) -> Result<Self> {
        let members = (0..size as u64)
            .map(|i| MemberSeeds {
                split_seed: base + i,
                train_seed: base.wrapping_mul(1_000_003).wrapping_add(7919 * (i + 1)),
            })
            .collect();
        Self::new(members, train)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(contract("an ensemble needs at least one member"));
        }
        for (i, a) in self.members.iter().enumerate() {
            for b in &self.members[i + 1..] {
                if a.split_seed == b.split_seed || a.train_seed == b.train_seed {
                    return Err(contract(format!(
                        "members share a seed: {a:?} and {b:?}"
                    )));
                }
            }
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EoqPrediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

/// Logit-averaging prediction for every row of `x`. Ties go to the lowest
/// class index.
pub fn predict_eoq(members: &[&ModelState], x: &Tensor) -> Result<Vec<EoqPrediction>> {
    let first = members.first().ok_or_else(|| contract("empty ensemble"))?;
    for m in members {
        if m.spec.input_dim != first.spec.input_dim || m.spec.num_classes != first.spec.num_classes {
            return Err(dim("predict_eoq", "members disagree on input or class count"));
        }
    }
    let (b, _) = x.dims2()?;
    let c = first.spec.num_classes;
    let mut avg = vec![0.0; b * c];
    for m in members {
        let logits = m.forward(x)?;
        for (a, l) in avg.iter_mut().zip(logits.data()) {
            *a += l;
        }
    }
    let e = members.len() as f64;
    avg.iter_mut().for_each(|a| *a /= e);
    Ok(avg
        .chunks(c)
        .map(|row| {
            let probs = softmax(row);
            EoqPrediction {
                class: argmax(&probs),
                probs,
            }
        })
        .collect())
}

pub fn eoq_accuracy(members: &[&ModelState], x: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = predict_eoq(members, x)?;
    let hits = preds.iter().zip(labels).filter(|(p, &l)| p.class == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub split_seed: u64,
    pub train_seed: u64,
    pub status: RunStatus,
    pub best_step: Option<u64>,
    pub val_acc: Option<f64>,
    pub target_acc: Option<f64>,
    /// Packed bytes of this member (quantized codes plus 32-bit extras).
    pub bytes: usize,
}

/// Storage of the ensemble relative to one full-precision model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSize {
    pub bits: u32,
    pub members: usize,
    /// `E · b / 32`: quantized-layer weight bits of the ensemble over those of
    /// one 32-bit model.
    pub relative_size: f64,
    /// Σ member bytes, including full-precision layers, biases and steps.
    pub total_bytes: usize,
    pub full_precision_bytes: usize,
    /// `total_bytes / full_precision_bytes`
    pub relative_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub target_domain: String,
    pub members: Vec<MemberReport>,
    pub survivors: usize,
    /// Set when some members diverged and the ensemble uses the rest.
    pub degraded: bool,
    pub ensemble_target_acc: f64,
    pub mean_member_target_acc: f64,
    pub size: EnsembleSize,
}

/// Trains every member (concurrently under `exec`), selects each member's
/// best checkpoint on its own in-domain validation split, and evaluates the
/// ensemble on the held-out domain.
pub fn run_eoq(ds: &DomainDataset, target_domain: &str, spec: &EnsembleSpec, exec: Execution) -> Result<EnsembleReport> {
    spec.validate()?;
    let target = ds.domain(target_domain)?;
    let runs = exec.try_map(spec.members.len(), |i| {
        let m = spec.members[i];
        let cfg = TrainConfig {
            seed: m.train_seed,
            ..spec.train.clone()
        };
        trainer::train_leave_one_out(ds, target_domain, m.split_seed, &cfg)
    })?;

    let bits = if spec.train.is_quantized() { spec.train.quant.bits } else { 32 };
    let qspec = QuantSpec {
        bits,
        ..spec.train.quant
    };
    let mut members = Vec::with_capacity(runs.len());
    let mut survivors = Vec::new();
    let mut full_precision_bytes = 0;
    for (seeds, run) in spec.members.iter().zip(&runs) {
        let best = trainer::select_best(run).ok();
        let bytes = best.map_or(0, |ck| {
            let acc = quant::size_accounting(&ck.model, &qspec);
            full_precision_bytes = acc.full_precision_bytes;
            if spec.train.is_quantized() {
                acc.total_bytes
            } else {
                acc.full_precision_bytes
            }
        });
        let (val_acc, target_acc) = match best {
            Some(ck) => (Some(ck.val_acc), Some(ck.model.accuracy(&target.features, &target.labels)?)),
            None => (None, None),
        };
        if let (Some(ck), false) = (best, run.diverged()) {
            survivors.push(&ck.model);
        }
        members.push(MemberReport {
            split_seed: seeds.split_seed,
            train_seed: seeds.train_seed,
            status: run.status,
            best_step: best.map(|c| c.step),
            val_acc,
            target_acc,
            bytes,
        });
    }
    if survivors.is_empty() {
        return Err(contract("every ensemble member diverged"));
    }
    let ensemble_target_acc = eoq_accuracy(&survivors, &target.features, &target.labels)?;
    let accs: Vec<f64> = members
        .iter()
        .filter(|m| m.status == RunStatus::Completed)
        .filter_map(|m| m.target_acc)
        .collect();
    let mean_member_target_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    let total_bytes = members.iter().map(|m| m.bytes).sum();
    let e = spec.members.len();
    Ok(EnsembleReport {
        target_domain: target_domain.to_string(),
        survivors: survivors.len(),
        degraded: survivors.len() < e,
        members,
        ensemble_target_acc,
        mean_member_target_acc,
        size: EnsembleSize {
            bits,
            members: e,
            relative_size: e as f64 * bits as f64 / 32.0,
            total_bytes,
            full_precision_bytes,
            relative_total: total_bytes as f64 / full_precision_bytes.max(1) as f64,
        },
    })
}

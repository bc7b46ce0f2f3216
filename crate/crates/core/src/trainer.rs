//! ERM and quantization-aware training with in-domain model selection.
//!
//! Training runs in full precision until `quantize_at`; from then on every
//! layer but the last is fake-quantized with per-channel step sizes that the
//! optimizer learns alongside the weights. Each validation point records the
//! pooled source-validation accuracy and, through the sealed
//! [`TargetEvaluator`], the held-out domain's accuracy. Neither the target
//! metrics nor the target data feed back into training or selection.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DomainDataset, SourceData, TargetEvaluator};
use crate::error::{contract, Error, Result};
use crate::nn::{self, MlpSpec, ModelState, OptimizerConfig};
use crate::quant::{self, QuantMode, QuantSpec};
use crate::tensor::Tensor;

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Step after which quantization is switched on; `None` trains plain ERM.
    pub quantize_at: Option<u64>,
    pub validate_every: u64,
    pub batch_per_domain: usize,
    pub hidden_dims: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub quant: QuantSpec,
    #[serde(default = "default_mode")]
    pub quant_mode: QuantMode,
    /// Cumulative frozen fractions for incremental mode, spread evenly over
    /// the steps after `quantize_at`.
    #[serde(default = "default_schedule")]
    pub incremental_schedule: Vec<f64>,
    pub seed: u64,
    /// Retain a checkpoint at every validation point, not just best and last.
    #[serde(default)]
    pub keep_snapshots: bool,
}

fn default_mode() -> QuantMode {
    QuantMode::Lsq
}

fn default_schedule() -> Vec<f64> {
    vec![0.5, 0.75, 0.875, 1.0]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            quantize_at: None,
            validate_every: 100,
            batch_per_domain: 16,
            hidden_dims: vec![32],
            optimizer: OptimizerConfig::default(),
            quant: QuantSpec::signed(DEFAULT_BITS),
            quant_mode: QuantMode::Lsq,
            incremental_schedule: default_schedule(),
            seed: 0,
            keep_snapshots: false,
        }
    }
}

/// Bit width of the default quantized configuration.
pub const DEFAULT_BITS: u32 = 7;
/// Default quantization step for 3000-step runs.
pub const DEFAULT_QUANTIZE_AT: u64 = 1000;

impl TrainConfig {
    pub fn erm(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn qat(bits: u32, seed: u64) -> Self {
        Self {
            quantize_at: Some(DEFAULT_QUANTIZE_AT),
            quant: QuantSpec::signed(bits),
            seed,
            ..Self::default()
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.quantize_at.is_some()
    }

    /// First step eligible for model selection. Quantized runs select among
    /// quantized states only.
    pub fn selection_start(&self) -> u64 {
        self.quantize_at.map_or(0, |tq| tq + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.validate_every == 0 || self.batch_per_domain == 0 {
            return Err(contract("total_steps, validate_every and batch_per_domain must be ≥ 1"));
        }
        if let Some(tq) = self.quantize_at {
            if tq == 0 || tq >= self.total_steps {
                return Err(contract(format!(
                    "quantize_at {tq} must lie strictly between 0 and total_steps {}",
                    self.total_steps
                )));
            }
            self.quant.validate()?;
            match self.quant_mode {
                QuantMode::Lsq => {}
                QuantMode::Incremental => quant::check_schedule(&self.incremental_schedule)?,
                QuantMode::PtqRtn => {
                    return Err(contract("ptq-rtn is applied after training, not during it"))
                }
            }
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(contract("hidden_dims must be non-empty with widths ≥ 1"));
        }
        self.optimizer.validate()
    }

    /// Steps at which incremental stages fire.
    fn stage_steps(&self) -> Vec<u64> {
        let Some(tq) = self.quantize_at else { return Vec::new() };
        let n = self.incremental_schedule.len() as u64;
        let span = self.total_steps - tq;
        (0..n).map(|i| tq + i * span / n).collect()
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse::<u128>()
            .map_err(|e| contract(format!("bad rng word position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

pub const CHECKPOINT_FORMAT: &str = "qtdog-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Saved model state at one validation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Bit width of the quantized layers, `None` in full precision.
    pub bits: Option<u32>,
    pub step: u64,
    pub val_acc: f64,
    pub target_domain: String,
    pub split_seed: u64,
    pub model: ModelState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(model: &ModelState, rng: &ChaCha8Rng, val_acc: f64, target_domain: &str, split_seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            bits: model.quant.as_ref().map(|q| q.spec.bits),
            step: model.step,
            val_acc,
            target_domain: target_domain.into(),
            split_seed,
            model: model.clone(),
            rng: RngState::capture(rng),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(contract(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        c.model.spec.validate()?;
        if let Some(q) = &c.model.quant {
            q.validate()?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    /// Mean minibatch loss since the previous validation point.
    pub train_loss: f64,
    pub val_acc: f64,
    pub target_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub target_domain: String,
    pub split_seed: u64,
    pub metrics: Vec<MetricRow>,
    pub best: Option<Checkpoint>,
    pub last: Option<Checkpoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<Checkpoint>,
    pub status: RunStatus,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    /// Index into `metrics` of the selected validation point.
    pub fn best_metric_index(&self) -> Result<usize> {
        best_index_from(&self.metrics, self.config.selection_start())
    }

    /// Target accuracy at the selected checkpoint.
    pub fn best_target_acc(&self) -> Result<f64> {
        Ok(self.metrics[self.best_metric_index()?].target_acc)
    }

    pub fn best_val_acc(&self) -> Result<f64> {
        Ok(self.metrics[self.best_metric_index()?].val_acc)
    }
}

/// Cycles through a domain's training indices, reshuffling each pass.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        for _ in 0..k {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
    }
}

/// Data-order stream, separate from the initialization stream.
fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed);
    rng
}

/// Trains one model on `source`, validating every `validate_every` steps and
/// at the final step.
pub fn train(source: &SourceData, target: &TargetEvaluator, split_seed: u64, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if source.domains.is_empty() {
        return Err(contract("no source domains"));
    }
    if source.domains.iter().any(|d| d.train_y.is_empty()) {
        return Err(contract("a source domain has no training samples"));
    }
    let started = Instant::now();
    let (val_x, val_y) = source.val_pooled()?;
    let mut model = ModelState::init(MlpSpec {
        input_dim: source.input_dim,
        hidden_dims: cfg.hidden_dims.clone(),
        num_classes: source.num_classes,
        activation: nn::Activation::Relu,
        seed: cfg.seed,
    })?;
    let mut rng = data_rng(cfg.seed);
    let mut samplers: Vec<Sampler> = source
        .domains
        .iter()
        .map(|d| Sampler::new(d.train_y.len(), &mut rng))
        .collect();
    let stage_steps = cfg.stage_steps();

    let mut metrics = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut last = None;
    let mut snapshots = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_count = 0u64;
    let mut status = RunStatus::Completed;
    let width = source.input_dim;
    let batch_total = cfg.batch_per_domain * source.domains.len();
    let mut idx = Vec::with_capacity(cfg.batch_per_domain);

    while model.step < cfg.total_steps {
        if cfg.quantize_at == Some(model.step) {
            match cfg.quant_mode {
                QuantMode::Lsq => quant::enable_lsq(&mut model, cfg.quant)?,
                QuantMode::Incremental => {
                    quant::enable_incremental(&mut model, cfg.quant, &cfg.incremental_schedule)?
                }
                QuantMode::PtqRtn => unreachable!("rejected by validate"),
            }
        }
        if cfg.quant_mode == QuantMode::Incremental && stage_steps.contains(&model.step) {
            quant::incremental_step(&mut model)?;
        }

        let mut xb = Vec::with_capacity(batch_total * width);
        let mut yb = Vec::with_capacity(batch_total);
        for (d, sampler) in source.domains.iter().zip(samplers.iter_mut()) {
            idx.clear();
            sampler.take(cfg.batch_per_domain, &mut rng, &mut idx);
            for &i in &idx {
                xb.extend_from_slice(d.train_x.row(i));
                yb.push(d.train_y[i]);
            }
        }
        let xb = Tensor::matrix(batch_total, width, xb)?;
        let (loss, grads) = match nn::loss_and_grads(&model, &xb, &yb) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => (f64::NAN, empty_grads()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            status = RunStatus::Diverged {
                step: model.step + 1,
                loss,
            };
            break;
        }
        nn::optimizer_step(&mut model, &grads, &cfg.optimizer)?;
        loss_acc += loss;
        loss_count += 1;

        if model.step % cfg.validate_every == 0 || model.step == cfg.total_steps {
            let val_acc = model.accuracy(&val_x, &val_y)?;
            let target_acc = target.accuracy(&model)?;
            metrics.push(MetricRow {
                step: model.step,
                train_loss: loss_acc / loss_count as f64,
                val_acc,
                target_acc,
            });
            loss_acc = 0.0;
            loss_count = 0;
            let ck = Checkpoint::new(&model, &rng, val_acc, target.name(), split_seed);
            let eligible = model.step >= cfg.selection_start();
            if eligible && best.as_ref().is_none_or(|b| val_acc > b.val_acc) {
                best = Some(ck.clone());
            }
            if cfg.keep_snapshots {
                snapshots.push(ck.clone());
            }
            last = Some(ck);
        }
    }

    Ok(RunRecord {
        config: cfg.clone(),
        target_domain: target.name().to_string(),
        split_seed,
        metrics,
        best,
        last,
        snapshots,
        status,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn empty_grads() -> nn::ModelGrads {
    nn::ModelGrads {
        weights: Vec::new(),
        biases: Vec::new(),
        steps: Vec::new(),
    }
}

/// Splits `ds` with `target` held out and trains on the sources.
pub fn train_leave_one_out(ds: &DomainDataset, target: &str, split_seed: u64, cfg: &TrainConfig) -> Result<RunRecord> {
    let plan = data::split_leave_one_out(ds, target, data::VAL_FRACTION, split_seed)?;
    let (source, evaluator) = data::views(ds, &plan)?;
    train(&source, &evaluator, split_seed, cfg)
}

/// Index of the validation point with the highest in-domain accuracy,
/// earliest on ties.
pub fn best_index(metrics: &[MetricRow]) -> Result<usize> {
    best_index_from(metrics, 0)
}

/// [`best_index`] restricted to validation points with `step ≥ min_step`.
pub fn best_index_from(metrics: &[MetricRow], min_step: u64) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, m) in metrics.iter().enumerate() {
        if m.step < min_step {
            continue;
        }
        if best.is_none_or(|b| m.val_acc > metrics[b].val_acc) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| contract(format!("no validation points at or after step {min_step}")))
}

/// The checkpoint chosen by in-domain validation accuracy.
pub fn select_best(record: &RunRecord) -> Result<&Checkpoint> {
    let i = record.best_metric_index()?;
    let ck = record
        .best
        .as_ref()
        .ok_or_else(|| contract("run retained no checkpoint"))?;
    if ck.step != record.metrics[i].step {
        return Err(contract(format!(
            "retained checkpoint at step {} but best validation point is step {}",
            ck.step, record.metrics[i].step
        )));
    }
    Ok(ck)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub mean: f64,
    /// Sample standard deviation; 0 when the window holds a single point.
    pub std: f64,
    pub count: usize,
    /// Set when the window holds fewer than two points.
    pub degenerate: bool,
}

/// Mean and sample standard deviation of target accuracy over validation
/// points with `step ≥ window_start`.
pub fn stability_stats(metrics: &[MetricRow], window_start: u64) -> Result<StabilityStats> {
    let xs: Vec<f64> = metrics
        .iter()
        .filter(|m| m.step >= window_start)
        .map(|m| m.target_acc)
        .collect();
    if xs.is_empty() {
        return Err(contract(format!("no validation points at or after step {window_start}")));
    }
    let n = xs.len();
    // shifted by the first value so a constant trace gives exactly 0
    let shift = xs[0];
    let d: Vec<f64> = xs.iter().map(|x| x - shift).collect();
    let dsum = d.iter().sum::<f64>();
    let mean = shift + dsum / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss = d.iter().map(|x| x * x).sum::<f64>() - dsum * dsum / n as f64;
        (ss.max(0.0) / (n - 1) as f64).sqrt()
    };
    Ok(StabilityStats {
        mean,
        std,
        count: n,
        degenerate: n < 2,
    })
}

pub const METRICS_HEADER: &str = "step,train_loss,val_acc,target_acc";

/// Metrics as CSV with [`METRICS_HEADER`]; floats use shortest round-trip
/// formatting so equal runs give equal bytes.
pub fn metrics_csv(metrics: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let _ = writeln!(s, "{},{},{},{}", m.step, m.train_loss, m.val_acc, m.target_acc);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(vals: &[(u64, f64)]) -> Vec<MetricRow> {
        vals.iter()
            .map(|&(step, v)| MetricRow {
                step,
                train_loss: 0.0,
                val_acc: v,
                target_acc: v,
            })
            .collect()
    }

    #[test]
    fn best_index_examples() {
        assert_eq!(best_index(&rows(&[(100, 0.7), (200, 0.9), (300, 0.8)])).unwrap(), 1);
        assert_eq!(best_index(&rows(&[(500, 0.9), (700, 0.3), (900, 0.9)])).unwrap(), 0);
        assert_eq!(best_index(&rows(&[(1, 0.1), (2, 0.2), (3, 0.3)])).unwrap(), 2);
        assert!(best_index(&[]).is_err());
    }

    #[test]
    fn stability_examples() {
        let s = stability_stats(&rows(&[(1, 0.4), (2, 0.4), (3, 0.4)]), 0).unwrap();
        assert_eq!(s.std, 0.0);
        let s = stability_stats(&rows(&[(1, 0.5), (2, 0.7)]), 0).unwrap();
        assert!((s.mean - 0.6).abs() < 1e-15);
        assert!((s.std - 0.02f64.sqrt()).abs() < 1e-12);
        let s = stability_stats(&rows(&[(1, 0.5), (2, 0.7)]), 2).unwrap();
        assert!(s.degenerate && s.std == 0.0 && s.count == 1);
        assert!(stability_stats(&rows(&[(1, 0.5)]), 5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::qat(4, 0);
        assert!(c.validate().is_ok());
        c.quantize_at = Some(c.total_steps);
        assert!(c.validate().is_err());
        c.quantize_at = Some(0);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::erm(0);
        c.validate_every = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rng_state_roundtrip() {
        use rand::RngCore;
        let mut rng = data_rng(42);
        rng.next_u64();
        let st = RngState::capture(&rng);
        let mut back = st.restore().unwrap();
        assert_eq!(rng.next_u64(), back.next_u64());
    }

    #[test]
    fn metrics_csv_header() {
        let s = metrics_csv(&rows(&[(100, 0.5)]));
        assert_eq!(s, "step,train_loss,val_acc,target_acc\n100,0,0.5,0.5\n");
    }
}

//! Experiment config: a strict TOML schema. Unknown keys are rejected and
//! every block is validated before any data is generated or read.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use qtdog::analysis::{DEFAULT_FLATNESS_SAMPLES, MIN_POWER_ITERATIONS};
use qtdog::data::{self, DomainDataset, SpuriousBlobs};
use qtdog::nn::OptimizerConfig;
use qtdog::quant::{QuantMode, QuantSpec};
use qtdog::trainer::{self, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetBlock,
    pub protocol: ProtocolBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub quant: QuantBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    #[serde(default)]
    pub ensemble: EnsembleBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetBlock {
    SpuriousBlobs {
        #[serde(default = "default_n")]
        n_per_domain: usize,
        #[serde(default = "default_correlations")]
        correlations: Vec<f64>,
        #[serde(default = "default_sep")]
        signal_sep: f64,
        #[serde(default = "default_causal_dims")]
        causal_dims: usize,
        #[serde(default)]
        seed: u64,
    },
    RotatedMoons {
        #[serde(default = "default_n")]
        n_per_domain: usize,
        #[serde(default = "default_angles")]
        angles: Vec<f64>,
        #[serde(default = "default_noise")]
        noise_sd: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        #[serde(default = "default_domain_column")]
        domain_column: String,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_n() -> usize {
    SpuriousBlobs::benchmark(0).n_per_domain
}
fn default_correlations() -> Vec<f64> {
    SpuriousBlobs::benchmark(0).correlations
}
fn default_sep() -> f64 {
    data::DEFAULT_SIGNAL_SEP
}
fn default_causal_dims() -> usize {
    SpuriousBlobs::benchmark(0).causal_dims
}
fn default_angles() -> Vec<f64> {
    vec![0.0, 15.0, 30.0, 45.0]
}
fn default_noise() -> f64 {
    0.1
}
fn default_domain_column() -> String {
    "domain".into()
}
fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolBlock {
    /// A domain name, or `"all"` to rotate the held-out domain.
    pub target: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub total_steps: u64,
    pub validate_every: u64,
    pub batch_per_domain: usize,
    pub hidden_dims: Vec<usize>,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            total_steps: t.total_steps,
            validate_every: t.validate_every,
            batch_per_domain: t.batch_per_domain,
            hidden_dims: t.hidden_dims,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSetting {
    /// Full-precision ERM.
    Off,
    Lsq,
    Incremental,
    /// Full-precision training, round-to-nearest on the selected checkpoint.
    PtqRtn,
}

impl ModeSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeSetting::Off => "off",
            ModeSetting::Lsq => "lsq",
            ModeSetting::Incremental => "incremental",
            ModeSetting::PtqRtn => "ptq-rtn",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantBlock {
    pub mode: ModeSetting,
    pub bits: u32,
    pub signed: bool,
    pub quantize_at: u64,
    pub schedule: Vec<f64>,
}

impl Default for QuantBlock {
    fn default() -> Self {
        Self {
            mode: ModeSetting::Off,
            bits: trainer::DEFAULT_BITS,
            signed: true,
            quantize_at: trainer::DEFAULT_QUANTIZE_AT,
            schedule: TrainConfig::default().incremental_schedule,
        }
    }
}

impl QuantBlock {
    pub fn spec(&self) -> QuantSpec {
        QuantSpec {
            bits: self.bits,
            signed: self.signed,
            ..QuantSpec::signed(self.bits)
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisBlock {
    /// Explicit γ grid; defaults to a grid scaled by the first checkpoint's
    /// parameter RMS. 0 is always prepended.
    pub gammas: Option<Vec<f64>>,
    pub samples: usize,
    pub probes: usize,
    pub power_iterations: usize,
    pub taylor_scales: Vec<f64>,
    /// Bit width of the displacement used for the Taylor check; defaults to
    /// the quant block's.
    pub taylor_bits: Option<u32>,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        Self {
            gammas: None,
            samples: DEFAULT_FLATNESS_SAMPLES,
            probes: 10,
            power_iterations: MIN_POWER_ITERATIONS,
            taylor_scales: vec![1.0, 0.5, 0.25, 0.125],
            taylor_bits: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleBlock {
    pub members: usize,
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        Self { members: 5 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    pub bits: Vec<u32>,
    pub seeds: Vec<u64>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            bits: (2..=8).collect(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Parses `text`; `base` resolves relative CSV paths.
pub fn parse(text: &str, base: &Path) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if let DatasetBlock::Csv { path, .. } = &mut cfg.dataset {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse(&text, path.parent().unwrap_or(Path::new(".")))
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.protocol.target.is_empty() {
            return Err(bad("protocol.target must name a domain or be \"all\""));
        }
        self.train_config(self.seed)?;
        let a = &self.analysis;
        if a.samples < 2 || a.probes == 0 {
            return Err(bad("analysis.samples must be ≥ 2 and analysis.probes ≥ 1"));
        }
        if a.power_iterations < MIN_POWER_ITERATIONS {
            return Err(bad(format!("analysis.power_iterations must be ≥ {MIN_POWER_ITERATIONS}")));
        }
        if let Some(g) = &a.gammas {
            if g.is_empty() || g.iter().any(|v| !v.is_finite() || *v < 0.0) || g.windows(2).any(|p| p[0] >= p[1]) {
                return Err(bad("analysis.gammas must be strictly increasing finite values ≥ 0"));
            }
        }
        if a.taylor_scales.is_empty() || a.taylor_scales.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(bad("analysis.taylor_scales must be positive"));
        }
        if let Some(b) = a.taylor_bits {
            QuantSpec::signed(b).validate().map_err(|e| bad(e.to_string()))?;
        }
        if self.ensemble.members == 0 {
            return Err(bad("ensemble.members must be ≥ 1"));
        }
        if self.sweep.seeds.is_empty() {
            return Err(bad("sweep.seeds must not be empty"));
        }
        if let Some(b) = self.sweep.bits.iter().find(|b| !(2..=16).contains(*b)) {
            return Err(bad(format!("sweep bit width {b} outside 2..=16")));
        }
        let mut seen = self.sweep.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.sweep.seeds.len() {
            return Err(bad("sweep.seeds contains duplicates"));
        }
        match &self.dataset {
            DatasetBlock::SpuriousBlobs { .. } | DatasetBlock::RotatedMoons { .. } => {}
            DatasetBlock::Csv { domain_column, label_column, .. } => {
                if domain_column == label_column {
                    return Err(bad("dataset.domain_column and dataset.label_column must differ"));
                }
            }
        }
        Ok(())
    }

    /// The training config a run with `seed` uses; PTQ runs train in full
    /// precision.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let q = &self.quant;
        let (quantize_at, quant_mode) = match q.mode {
            ModeSetting::Off | ModeSetting::PtqRtn => (None, QuantMode::Lsq),
            ModeSetting::Lsq => (Some(q.quantize_at), QuantMode::Lsq),
            ModeSetting::Incremental => (Some(q.quantize_at), QuantMode::Incremental),
        };
        let cfg = TrainConfig {
            total_steps: t.total_steps,
            quantize_at,
            validate_every: t.validate_every,
            batch_per_domain: t.batch_per_domain,
            hidden_dims: t.hidden_dims.clone(),
            optimizer: t.optimizer,
            quant: q.spec(),
            quant_mode,
            incremental_schedule: q.schedule.clone(),
            seed,
            keep_snapshots: false,
        };
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        if q.mode == ModeSetting::PtqRtn {
            q.spec().validate().map_err(|e| bad(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn build_dataset(&self) -> Result<DomainDataset, CliError> {
        let ds = match &self.dataset {
            DatasetBlock::SpuriousBlobs {
                n_per_domain,
                correlations,
                signal_sep,
                causal_dims,
                seed,
            } => data::gen_spurious_blobs(&SpuriousBlobs {
                n_per_domain: *n_per_domain,
                correlations: correlations.clone(),
                signal_sep: *signal_sep,
                causal_dims: *causal_dims,
                seed: *seed,
            }),
            DatasetBlock::RotatedMoons {
                n_per_domain,
                angles,
                noise_sd,
                seed,
            } => data::gen_rotated_moons(*n_per_domain, angles, *noise_sd, *seed),
            DatasetBlock::Csv {
                path,
                domain_column,
                label_column,
            } => data::ingest_csv(path, domain_column, label_column),
        };
        ds.map_err(CliError::from_data)
    }

    /// Held-out domains in rotation order.
    pub fn targets(&self, ds: &DomainDataset) -> Result<Vec<String>, CliError> {
        if self.protocol.target == "all" {
            return Ok(ds.domain_names());
        }
        ds.domain_index(&self.protocol.target)
            .map_err(|_| bad(format!("protocol.target {:?} is not a domain of the dataset", self.protocol.target)))?;
        Ok(vec![self.protocol.target.clone()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse() {
        let erm = parse(include_str!("../../../configs/erm.toml"), Path::new(".")).unwrap();
        assert_eq!(erm.quant.mode, ModeSetting::Off);
        assert_eq!(erm.train_config(0).unwrap(), TrainConfig::erm(0));
        let qat = parse(include_str!("../../../configs/qat.toml"), Path::new(".")).unwrap();
        assert_eq!(qat.train_config(3).unwrap(), TrainConfig::qat(7, 3));
        assert_eq!(qat.sweep.seeds.len(), 5);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse(
            "output_dir = \"o\"\n[dataset]\nkind = \"rotated_moons\"\n[protocol]\ntarget = \"all\"\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(c.train_config(0).unwrap(), TrainConfig::erm(0));
        assert_eq!(c.ensemble.members, 5);
        assert_eq!(c.analysis.samples, DEFAULT_FLATNESS_SAMPLES);
        let ds = c.build_dataset().unwrap();
        assert_eq!(c.targets(&ds).unwrap().len(), 4);
    }

    #[test]
    fn csv_path_resolves_against_config_dir() {
        let c = parse(
            "output_dir = \"o\"\n[dataset]\nkind = \"csv\"\npath = \"d.csv\"\n[protocol]\ntarget = \"a\"\n",
            Path::new("/cfg"),
        )
        .unwrap();
        match c.dataset {
            DatasetBlock::Csv { path, .. } => assert_eq!(path, PathBuf::from("/cfg/d.csv")),
            _ => unreachable!(),
        }
    }
}

use std::path::{Path, PathBuf};

use serde::Serialize;

use qtdog::analysis::{
    self, curvature_report, default_gamma_grid, flatness, EvalSet, FlatnessOptions, ModelObjective, Reduction,
};
use qtdog::data::{self, DatasetMeta, DomainDataset};
use qtdog::ensemble::{run_eoq, EnsembleSpec, MemberSeeds};
use qtdog::experiment::{mean_by_bits, sweep_bits, sweep_csv, SweepRow};
use qtdog::quant::{self, QuantSpec};
use qtdog::trainer::{self, Checkpoint, RunRecord, RunStatus, StabilityStats, TrainConfig};
use qtdog::nn::ModelState;
use qtdog::Execution;

use crate::config::{ExperimentConfig, ModeSetting};
use crate::output::{check_destination, Outputs};
use crate::CliError;

/// Everything a subcommand needs after flag overrides are applied.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    /// Set when `--seed` was given explicitly.
    pub seed_override: bool,
    pub exec: Execution,
    pub out: PathBuf,
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Outputs were written but at least one run diverged.
    Diverged,
}

impl Ctx {
    fn dest(&self, command: &str) -> PathBuf {
        self.out.join(command)
    }
}

/// Directory-safe form of a domain name.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn status_fields(s: &RunStatus) -> (&'static str, Option<u64>) {
    match s {
        RunStatus::Completed => ("completed", None),
        RunStatus::Diverged { step, .. } => ("diverged", Some(*step)),
    }
}

#[derive(Serialize)]
struct DomainSummary {
    target: String,
    status: &'static str,
    diverged_at: Option<u64>,
    best_step: Option<u64>,
    val_acc: Option<f64>,
    target_acc: Option<f64>,
    /// Target accuracy after round-to-nearest on the selected checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    ptq_target_acc: Option<f64>,
    stability: Option<StabilityStats>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    dataset: &'a DatasetMeta,
    seed: u64,
    /// 32 for full-precision runs.
    bits: u32,
    quantize_step: Option<u64>,
    quant_mode: &'static str,
    compression: f64,
    domains: Vec<DomainSummary>,
    /// Mean of `target_acc` (or `ptq_target_acc` for PTQ) over held-out
    /// domains; null when any domain has no selected checkpoint.
    average_target_acc: Option<f64>,
}

fn mean(xs: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn add_checkpoint(out: &mut Outputs, rel: String, ck: &Checkpoint) -> Result<(), CliError> {
    out.add(rel, ck.to_json().map_err(CliError::from_core)? + "\n");
    Ok(())
}

fn train_targets(
    ds: &DomainDataset,
    targets: &[String],
    seed: u64,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<Vec<RunRecord>, CliError> {
    exec.try_map(targets.len(), |i| trainer::train_leave_one_out(ds, &targets[i], seed, cfg))
        .map_err(CliError::from_core)
}

/// `run`, and `ptq` without checkpoints: train on every held-out domain and
/// write metrics, checkpoints and a summary.
pub fn run(ctx: &Ctx, command: &str, mode: ModeSetting) -> Result<Outcome, CliError> {
    let dest = ctx.dest(command);
    check_destination(&dest, ctx.force)?;
    let ds = ctx.cfg.build_dataset()?;
    let targets = ctx.cfg.targets(&ds)?;
    let mut cfg = ctx.cfg.clone();
    cfg.quant.mode = mode;
    let train = cfg.train_config(ctx.seed)?;
    let spec = cfg.quant.spec();
    let records = train_targets(&ds, &targets, ctx.seed, &train, ctx.exec)?;

    let mut out = Outputs::default();
    let mut domains = Vec::new();
    for (target, rec) in targets.iter().zip(&records) {
        let dir = slug(target);
        out.add(format!("{dir}/metrics.csv"), trainer::metrics_csv(&rec.metrics));
        let best = trainer::select_best(rec).ok();
        if let Some(ck) = best {
            add_checkpoint(&mut out, format!("{dir}/best.json"), ck)?;
        }
        if let Some(ck) = &rec.last {
            add_checkpoint(&mut out, format!("{dir}/last.json"), ck)?;
        }
        let mut ptq_target_acc = None;
        if let Some(ck) = best {
            let model = match mode {
                ModeSetting::PtqRtn => {
                    let q = quant::ptq_round_to_nearest(&ck.model, spec).map_err(CliError::from_core)?;
                    let t = ds.domain(target).map_err(CliError::from_core)?;
                    ptq_target_acc = Some(q.accuracy(&t.features, &t.labels).map_err(CliError::from_core)?);
                    Some(q)
                }
                ModeSetting::Lsq => Some(ck.model.clone()),
                ModeSetting::Off | ModeSetting::Incremental => None,
            };
            if let Some(m) = model {
                let export = quant::export_quantized(&m, &spec).map_err(CliError::from_core)?;
                out.add_json(format!("{dir}/quantized.json"), &export)?;
            }
        }
        let (status, diverged_at) = status_fields(&rec.status);
        domains.push(DomainSummary {
            target: target.clone(),
            status,
            diverged_at,
            best_step: best.map(|c| c.step),
            val_acc: rec.best_val_acc().ok(),
            target_acc: rec.best_target_acc().ok(),
            ptq_target_acc,
            stability: trainer::stability_stats(&rec.metrics, train.selection_start()).ok(),
        });
    }
    let headline: Vec<Option<f64>> = domains
        .iter()
        .map(|d| if mode == ModeSetting::PtqRtn { d.ptq_target_acc } else { d.target_acc })
        .collect();
    let quantized = mode != ModeSetting::Off;
    let summary = RunSummary {
        command,
        dataset: &ds.meta,
        seed: ctx.seed,
        bits: if quantized { spec.bits } else { 32 },
        quantize_step: train.quantize_at,
        quant_mode: mode.as_str(),
        compression: if quantized { spec.compression() } else { 1.0 },
        average_target_acc: mean(&headline),
        domains,
    };
    out.add_json("summary.json", &summary)?;
    out.commit(command, &dest, ctx.force)?;
    Ok(if records.iter().any(RunRecord::diverged) { Outcome::Diverged } else { Outcome::Ok })
}

#[derive(Serialize)]
struct SweepTargetSummary {
    target: String,
    file: String,
    /// Mean target accuracy per bit width; 32 is the full-precision baseline.
    mean_target_acc: Vec<(u32, f64)>,
    diverged: usize,
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    command: &'a str,
    dataset: &'a DatasetMeta,
    bits: &'a [u32],
    seeds: &'a [u64],
    quantize_step: Option<u64>,
    targets: Vec<SweepTargetSummary>,
}

pub fn sweep(ctx: &Ctx, bits_flag: Option<Vec<u32>>) -> Result<Outcome, CliError> {
    const COMMAND: &str = "sweep-bits";
    let dest = ctx.dest(COMMAND);
    check_destination(&dest, ctx.force)?;
    let bits = bits_flag.unwrap_or_else(|| ctx.cfg.sweep.bits.clone());
    if bits.is_empty() {
        return Err(CliError::Config("no bit widths to sweep".into()));
    }
    if let Some(b) = bits.iter().find(|b| !(2..=16).contains(*b)) {
        return Err(CliError::Config(format!("sweep bit width {b} outside 2..=16")));
    }
    let seeds = if ctx.seed_override { vec![ctx.seed] } else { ctx.cfg.sweep.seeds.clone() };
    let mut cfg = ctx.cfg.clone();
    if cfg.quant.mode != ModeSetting::Incremental {
        cfg.quant.mode = ModeSetting::Lsq;
    }
    let base = cfg.train_config(0)?;
    let ds = ctx.cfg.build_dataset()?;
    let targets = ctx.cfg.targets(&ds)?;

    let mut out = Outputs::default();
    let mut per_target = Vec::new();
    let mut any_diverged = false;
    for target in &targets {
        let rows: Vec<SweepRow> =
            sweep_bits(&ds, target, &base, &bits, &seeds, ctx.exec).map_err(CliError::from_core)?;
        let file = if targets.len() == 1 {
            "sweep.csv".to_string()
        } else {
            format!("sweep_{}.csv", slug(target))
        };
        out.add(file.clone(), sweep_csv(&rows));
        let diverged = rows.iter().filter(|r| r.diverged).count();
        any_diverged |= diverged > 0;
        per_target.push(SweepTargetSummary {
            target: target.clone(),
            file,
            mean_target_acc: mean_by_bits(&rows),
            diverged,
        });
    }
    out.add_json(
        "summary.json",
        &SweepSummary {
            command: COMMAND,
            dataset: &ds.meta,
            bits: &bits,
            seeds: &seeds,
            quantize_step: base.quantize_at,
            targets: per_target,
        },
    )?;
    out.commit(COMMAND, &dest, ctx.force)?;
    Ok(if any_diverged { Outcome::Diverged } else { Outcome::Ok })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn check_compatible(ck: &Checkpoint, ds: &DomainDataset, path: &Path) -> Result<(), CliError> {
    let spec = &ck.model.spec;
    if spec.input_dim != ds.input_dim || spec.num_classes != ds.num_classes {
        return Err(CliError::Config(format!(
            "{}: checkpoint expects {} features and {} classes, dataset has {} and {}",
            path.display(),
            spec.input_dim,
            spec.num_classes,
            ds.input_dim,
            ds.num_classes
        )));
    }
    ds.domain_index(&ck.target_domain).map_err(|_| {
        CliError::Config(format!(
            "{}: held-out domain {:?} is not in the dataset",
            path.display(),
            ck.target_domain
        ))
    })?;
    Ok(())
}

fn checkpoint_label(i: usize, path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let parent = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned());
    match parent {
        Some(p) => slug(&format!("{i}_{p}_{stem}")),
        None => slug(&format!("{i}_{stem}")),
    }
}

#[derive(Serialize)]
struct AnalyzedCheckpoint {
    label: String,
    checkpoint: String,
    target: String,
    step: u64,
    bits: Option<u32>,
    val_acc: f64,
}

#[derive(Serialize)]
struct AnalyzeSummary<'a> {
    command: &'a str,
    dataset: &'a DatasetMeta,
    seed: u64,
    gammas: &'a [f64],
    checkpoints: Vec<AnalyzedCheckpoint>,
}

pub fn analyze(ctx: &Ctx, checkpoints: &[PathBuf]) -> Result<Outcome, CliError> {
    const COMMAND: &str = "analyze";
    if checkpoints.is_empty() {
        return Err(CliError::Config("analyze needs at least one --checkpoint".into()));
    }
    let dest = ctx.dest(COMMAND);
    check_destination(&dest, ctx.force)?;
    let ds = ctx.cfg.build_dataset()?;
    let loaded: Vec<Checkpoint> = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<_, _>>()?;
    for (ck, p) in loaded.iter().zip(checkpoints) {
        check_compatible(ck, &ds, p)?;
    }
    let a = &ctx.cfg.analysis;
    let mut gammas = match &a.gammas {
        Some(g) => g.clone(),
        None => default_gamma_grid(&loaded[0].model.flat_params()),
    };
    if gammas.first() != Some(&0.0) {
        gammas.insert(0, 0.0);
    }
    let taylor_spec = QuantSpec::signed(a.taylor_bits.unwrap_or(ctx.cfg.quant.bits));

    let mut out = Outputs::default();
    let mut entries = Vec::new();
    for (i, (ck, path)) in loaded.iter().zip(checkpoints).enumerate() {
        let label = checkpoint_label(i, path);
        let plan = data::split_leave_one_out(&ds, &ck.target_domain, data::VAL_FRACTION, ck.split_seed)
            .map_err(CliError::from_core)?;
        let (source, _) = data::views(&ds, &plan).map_err(CliError::from_core)?;
        let (vx, vy) = source.val_pooled().map_err(CliError::from_core)?;
        let t = ds.domain(&ck.target_domain).map_err(CliError::from_core)?;
        for (set, x, y) in [(EvalSet::Source, &vx, &vy[..]), (EvalSet::Target, &t.features, &t.labels[..])] {
            let obj = ModelObjective::new(&ck.model, x, y, Reduction::Mean).map_err(CliError::from_core)?;
            let mut opts = FlatnessOptions::new(set, ctx.seed);
            opts.samples = a.samples;
            opts.max_samples = opts.max_samples.max(a.samples);
            opts.exec = ctx.exec;
            let profile = flatness(&obj, &gammas, &opts).map_err(CliError::from_core)?;
            out.add(format!("{label}/flatness_{}.csv", set.as_str()), profile.to_csv());
        }
        let (tx, ty) = source.train_pooled().map_err(CliError::from_core)?;
        let obj = ModelObjective::new(&ck.model, &tx, &ty, Reduction::Mean).map_err(CliError::from_core)?;
        let delta = if ck.model.quant_active() {
            None
        } else {
            Some(analysis::quantization_displacement(&ck.model, &taylor_spec).map_err(CliError::from_core)?)
        };
        let taylor = delta.as_deref().map(|d| (d, &a.taylor_scales[..]));
        let report = curvature_report(&obj, a.probes, a.power_iterations, ctx.seed, taylor, ctx.exec)
            .map_err(CliError::from_core)?;
        out.add_json(format!("{label}/curvature.json"), &report)?;
        entries.push(AnalyzedCheckpoint {
            label,
            checkpoint: path.display().to_string(),
            target: ck.target_domain.clone(),
            step: ck.step,
            bits: ck.bits,
            val_acc: ck.val_acc,
        });
    }
    out.add_json(
        "summary.json",
        &AnalyzeSummary {
            command: COMMAND,
            dataset: &ds.meta,
            seed: ctx.seed,
            gammas: &gammas,
            checkpoints: entries,
        },
    )?;
    out.commit(COMMAND, &dest, ctx.force)?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct EnsembleTargetSummary {
    target: String,
    file: String,
    ensemble_target_acc: f64,
    mean_member_target_acc: f64,
    survivors: usize,
    degraded: bool,
}

#[derive(Serialize)]
struct EnsembleSummary<'a> {
    command: &'a str,
    dataset: &'a DatasetMeta,
    seed: u64,
    members: usize,
    bits: u32,
    quantize_step: Option<u64>,
    targets: Vec<EnsembleTargetSummary>,
    average_ensemble_target_acc: f64,
}

/// Member `i` uses split and training seed `seed + i`, so a one-member
/// ensemble reproduces `run` with the same seed.
pub fn ensemble(ctx: &Ctx) -> Result<Outcome, CliError> {
    const COMMAND: &str = "ensemble";
    let dest = ctx.dest(COMMAND);
    check_destination(&dest, ctx.force)?;
    if ctx.cfg.quant.mode == ModeSetting::PtqRtn {
        return Err(CliError::Config("ensembles train with quant.mode off, lsq or incremental".into()));
    }
    let train = ctx.cfg.train_config(ctx.seed)?;
    let members = (0..ctx.cfg.ensemble.members as u64)
        .map(|i| MemberSeeds {
            split_seed: ctx.seed + i,
            train_seed: ctx.seed + i,
        })
        .collect();
    let spec = EnsembleSpec::new(members, train.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let ds = ctx.cfg.build_dataset()?;
    let targets = ctx.cfg.targets(&ds)?;

    let mut out = Outputs::default();
    let mut per_target = Vec::new();
    for target in &targets {
        let report = run_eoq(&ds, target, &spec, ctx.exec).map_err(CliError::from_core)?;
        let file = format!("{}.json", slug(target));
        out.add_json(file.clone(), &report)?;
        per_target.push(EnsembleTargetSummary {
            target: target.clone(),
            file,
            ensemble_target_acc: report.ensemble_target_acc,
            mean_member_target_acc: report.mean_member_target_acc,
            survivors: report.survivors,
            degraded: report.degraded,
        });
    }
    let avg = per_target.iter().map(|t| t.ensemble_target_acc).sum::<f64>() / per_target.len() as f64;
    let degraded = per_target.iter().any(|t| t.degraded);
    out.add_json(
        "summary.json",
        &EnsembleSummary {
            command: COMMAND,
            dataset: &ds.meta,
            seed: ctx.seed,
            members: spec.members.len(),
            bits: if train.is_quantized() { train.quant.bits } else { 32 },
            quantize_step: train.quantize_at,
            targets: per_target,
            average_ensemble_target_acc: avg,
        },
    )?;
    out.commit(COMMAND, &dest, ctx.force)?;
    Ok(if degraded { Outcome::Diverged } else { Outcome::Ok })
}

#[derive(Serialize)]
struct PtqCheckpoint {
    label: String,
    checkpoint: String,
    target: String,
    full_precision_target_acc: f64,
    ptq_target_acc: f64,
}

#[derive(Serialize)]
struct PtqSummary<'a> {
    command: &'a str,
    dataset: &'a DatasetMeta,
    bits: u32,
    compression: f64,
    checkpoints: Vec<PtqCheckpoint>,
}

/// `ptq --checkpoint ...`: round-to-nearest on saved full-precision
/// checkpoints.
pub fn ptq_checkpoints(ctx: &Ctx, checkpoints: &[PathBuf]) -> Result<Outcome, CliError> {
    const COMMAND: &str = "ptq";
    let dest = ctx.dest(COMMAND);
    check_destination(&dest, ctx.force)?;
    let ds = ctx.cfg.build_dataset()?;
    let spec = ctx.cfg.quant.spec();
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let loaded: Vec<Checkpoint> = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<_, _>>()?;
    for (ck, p) in loaded.iter().zip(checkpoints) {
        check_compatible(ck, &ds, p)?;
        if ck.model.quant.is_some() {
            return Err(CliError::Config(format!("{}: checkpoint is already quantized", p.display())));
        }
    }
    let mut out = Outputs::default();
    let mut rows = Vec::new();
    for (i, (ck, path)) in loaded.iter().zip(checkpoints).enumerate() {
        let label = checkpoint_label(i, path);
        let t = ds.domain(&ck.target_domain).map_err(CliError::from_core)?;
        let q: ModelState = quant::ptq_round_to_nearest(&ck.model, spec).map_err(CliError::from_core)?;
        out.add_json(
            format!("{label}/quantized.json"),
            &quant::export_quantized(&q, &spec).map_err(CliError::from_core)?,
        )?;
        rows.push(PtqCheckpoint {
            label,
            checkpoint: path.display().to_string(),
            target: ck.target_domain.clone(),
            full_precision_target_acc: ck.model.accuracy(&t.features, &t.labels).map_err(CliError::from_core)?,
            ptq_target_acc: q.accuracy(&t.features, &t.labels).map_err(CliError::from_core)?,
        });
    }
    out.add_json(
        "summary.json",
        &PtqSummary {
            command: COMMAND,
            dataset: &ds.meta,
            bits: spec.bits,
            compression: spec.compression(),
            checkpoints: rows,
        },
    )?;
    out.commit(COMMAND, &dest, ctx.force)?;
    Ok(Outcome::Ok)
}

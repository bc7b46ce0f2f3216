//! Loss-landscape diagnostics: Monte-Carlo flatness on spheres around the
//! weights, finite-difference Hessian-vector products, and second-order
//! Taylor residuals of the quantization displacement.
//!
//! Everything works on an [`Objective`], a scalar function of a flat
//! parameter vector. [`ModelObjective`] wraps a network and an evaluation set;
//! tests plug in analytic objectives.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, dim, Result};
use crate::nn::{self, ModelState};
use crate::par::Execution;
use crate::quant::{self, QuantMode, QuantSpec};
use crate::tensor::Tensor;

/// Scalar function of a flat parameter vector, anchored at [`Objective::point`].
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn point(&self) -> Vec<f64>;
    fn value_at(&self, w: &[f64]) -> Result<f64>;
    fn grad_at(&self, w: &[f64]) -> Result<Vec<f64>>;
    /// Number of samples the value is accumulated over.
    fn eval_samples(&self) -> usize {
        1
    }
}

/// `½ λ ‖w‖²` anchored at `point`.
#[derive(Debug, Clone)]
pub struct IsotropicQuadratic {
    pub lambda: f64,
    pub point: Vec<f64>,
}

impl Objective for IsotropicQuadratic {
    fn dim(&self) -> usize {
        self.point.len()
    }
    fn point(&self) -> Vec<f64> {
        self.point.clone()
    }
    fn value_at(&self, w: &[f64]) -> Result<f64> {
        Ok(0.5 * self.lambda * dot(w, w))
    }
    fn grad_at(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(w.iter().map(|x| self.lambda * x).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Accumulated loss over the evaluation set.
    Sum,
    Mean,
}

/// Cross-entropy of a model on a labelled set as a function of its latent
/// parameters. Quantized models are re-quantized after each perturbation, so
/// the landscape is the one the quantized network actually sees.
pub struct ModelObjective<'a> {
    model: &'a ModelState,
    x: &'a Tensor,
    y: &'a [usize],
    reduction: Reduction,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a ModelState, x: &'a Tensor, y: &'a [usize], reduction: Reduction) -> Result<Self> {
        let (n, w) = x.dims2()?;
        if n == 0 || n != y.len() {
            return Err(contract("evaluation set is empty or mislabelled"));
        }
        if w != model.spec.input_dim {
            return Err(dim(
                "model objective",
                format!("set width {w}, model expects {}", model.spec.input_dim),
            ));
        }
        Ok(Self { model, x, y, reduction })
    }

    fn at(&self, w: &[f64]) -> Result<ModelState> {
        let mut m = self.model.clone();
        m.set_flat_params(w)?;
        reproject(&mut m)?;
        Ok(m)
    }

    fn factor(&self) -> f64 {
        match self.reduction {
            Reduction::Sum => self.y.len() as f64,
            Reduction::Mean => 1.0,
        }
    }
}

/// Re-applies quantizers whose grid is baked into the stored weights
/// (post-training and frozen incremental weights). LSQ models quantize in the
/// forward pass and need nothing here.
fn reproject(m: &mut ModelState) -> Result<()> {
    let Some(q) = m.quant.clone() else { return Ok(()) };
    for (l, lq) in q.layers.iter().enumerate() {
        let w = &mut m.layers[l].weight.value;
        match q.mode {
            QuantMode::Lsq => {}
            QuantMode::PtqRtn => *w = quant::fake_quant_forward(w, lq.steps.value.data(), &q.spec)?,
            QuantMode::Incremental => {
                let snapped = quant::fake_quant_forward(w, lq.steps.value.data(), &q.spec)?;
                if let Some(frozen) = &lq.frozen {
                    for (i, f) in frozen.iter().enumerate() {
                        if *f {
                            w.data_mut()[i] = snapped.data()[i];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }
    fn point(&self) -> Vec<f64> {
        self.model.flat_params()
    }
    fn value_at(&self, w: &[f64]) -> Result<f64> {
        Ok(self.at(w)?.mean_loss(self.x, self.y)? * self.factor())
    }
    fn grad_at(&self, w: &[f64]) -> Result<Vec<f64>> {
        let (_, g) = nn::loss_and_grads(&self.at(w)?, self.x, self.y)?;
        let f = self.factor();
        Ok(g.flat().into_iter().map(|v| v * f).collect())
    }
    fn eval_samples(&self) -> usize {
        self.y.len()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(w: &[f64], alpha: f64, v: &[f64]) -> Vec<f64> {
    w.iter().zip(v).map(|(a, b)| a + alpha * b).collect()
}

/// Uniform direction on the unit sphere of dimension `d` (normalized Gaussian).
fn unit_direction(d: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSet {
    Source,
    Target,
}

impl EvalSet {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSet::Source => "source",
            EvalSet::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlatnessOptions {
    pub samples: usize,
    pub seed: u64,
    pub set: EvalSet,
    /// Sample cap when widening a noisy estimate; `samples` disables widening.
    pub max_samples: usize,
    pub exec: Execution,
}

impl FlatnessOptions {
    pub fn new(set: EvalSet, seed: u64) -> Self {
        Self {
            samples: DEFAULT_FLATNESS_SAMPLES,
            seed,
            set,
            max_samples: 4 * DEFAULT_FLATNESS_SAMPLES,
            exec: Execution::default(),
        }
    }
}

pub const DEFAULT_FLATNESS_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessRow {
    pub gamma: f64,
    /// Mean of `E(w + γu) − E(w)` over sampled directions.
    pub mean: f64,
    /// Standard error of that mean.
    pub stderr: f64,
    pub samples: usize,
    /// `mean` divided by the number of evaluation samples.
    pub mean_per_sample: f64,
    /// More than the requested samples were drawn because `stderr > mean/5`.
    pub widened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessProfile {
    pub set: EvalSet,
    pub eval_samples: usize,
    pub rows: Vec<FlatnessRow>,
}

pub const FLATNESS_HEADER: &str = "gamma,mean,stderr,samples,set";

impl FlatnessProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(FLATNESS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.gamma, r.mean, r.stderr, r.samples, self.set.as_str());
        }
        s
    }

    pub fn row(&self, gamma: f64) -> Option<&FlatnessRow> {
        self.rows.iter().find(|r| r.gamma == gamma)
    }
}

/// Radii `{0.01, 0.02, 0.05, 0.1, 0.2, 0.5} · ‖w‖ / √D`.
pub fn default_gamma_grid(w: &[f64]) -> Vec<f64> {
    let scale = norm(w) / (w.len() as f64).sqrt();
    [0.01, 0.02, 0.05, 0.1, 0.2, 0.5].iter().map(|g| g * scale).collect()
}

/// Expected loss increase on spheres of radius γ around the objective's
/// point, one row per γ. A leading `γ = 0` is accepted and reported as
/// exactly zero. Directions are shared across radii (direction `i` is the
/// same for every γ), and per-sample results are reduced in index order.
pub fn flatness(obj: &dyn Objective, gammas: &[f64], opts: &FlatnessOptions) -> Result<FlatnessProfile> {
    if opts.samples < 2 {
        return Err(contract("flatness needs at least 2 samples"));
    }
    for (i, &g) in gammas.iter().enumerate() {
        if !(g >= 0.0) || !g.is_finite() || (g == 0.0 && i > 0) {
            return Err(contract(format!("radius {g} must be positive (0 allowed only first)")));
        }
        if i > 0 && gammas[i - 1] >= g {
            return Err(contract("radii must be strictly increasing"));
        }
    }
    let w = obj.point();
    let base = obj.value_at(&w)?;
    let d = obj.dim();
    let n_eval = obj.eval_samples() as f64;
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        if gamma == 0.0 {
            rows.push(FlatnessRow {
                gamma,
                mean: 0.0,
                stderr: 0.0,
                samples: opts.samples,
                mean_per_sample: 0.0,
                widened: false,
            });
            continue;
        }
        let draw = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
            let start = range.start;
            opts.exec.try_map(range.len(), |k| {
                let u = unit_direction(d, opts.seed, (start + k) as u64);
                Ok(obj.value_at(&axpy(&w, gamma, &u))? - base)
            })
        };
        let mut diffs = draw(0..opts.samples)?;
        let mut widened = false;
        loop {
            let (mean, se) = mean_stderr(&diffs);
            let noisy = 5.0 * se > mean.abs();
            if !noisy || diffs.len() * 2 > opts.max_samples {
                break;
            }
            let n = diffs.len();
            diffs.extend(draw(n..2 * n)?);
            widened = true;
        }
        let (mean, stderr) = mean_stderr(&diffs);
        rows.push(FlatnessRow {
            gamma,
            mean,
            stderr,
            samples: diffs.len(),
            mean_per_sample: mean / n_eval,
            widened,
        });
    }
    Ok(FlatnessProfile {
        set: opts.set,
        eval_samples: obj.eval_samples(),
        rows,
    })
}

/// Mean and standard error (sample standard deviation over √n).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `H·v` at the objective's point by central differences of gradients with
/// step `ε = 1e-4 (1 + ‖w‖) / ‖v‖`.
pub fn hvp(obj: &dyn Objective, v: &[f64]) -> Result<Vec<f64>> {
    let w = obj.point();
    hvp_at(obj, &w, v)
}

fn hvp_at(obj: &dyn Objective, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != w.len() {
        return Err(dim("hvp", format!("vector of {} for {} parameters", v.len(), w.len())));
    }
    let nv = norm(v);
    if nv == 0.0 {
        return Err(contract("hvp direction is zero"));
    }
    let eps = 1e-4 * (1.0 + norm(w)) / nv;
    let gp = obj.grad_at(&axpy(w, eps, v))?;
    let gm = obj.grad_at(&axpy(w, -eps, v))?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// Hutchinson estimate of `tr(H)` from Rademacher probes.
pub fn hutchinson_trace(obj: &dyn Objective, probes: usize, seed: u64, exec: Execution) -> Result<(f64, f64)> {
    if probes == 0 {
        return Err(contract("at least one probe required"));
    }
    let d = obj.dim();
    let w = obj.point();
    let vals = exec.try_map(probes, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let z: Vec<f64> = (0..d)
            .map(|_| if rand::Rng::random::<bool>(&mut rng) { 1.0 } else { -1.0 })
            .collect();
        Ok(dot(&z, &hvp_at(obj, &w, &z)?))
    })?;
    Ok(mean_stderr(&vals))
}

pub const MIN_POWER_ITERATIONS: usize = 20;

/// Dominant Hessian eigenvalue by power iteration on HVPs (Rayleigh quotient
/// of the last iterate).
pub fn top_eigenvalue(obj: &dyn Objective, iterations: usize, seed: u64) -> Result<f64> {
    if iterations < MIN_POWER_ITERATIONS {
        return Err(contract(format!(
            "power iteration needs at least {MIN_POWER_ITERATIONS} steps"
        )));
    }
    let w = obj.point();
    let mut v = unit_direction(obj.dim(), seed, u64::MAX);
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let hv = hvp_at(obj, &w, &v)?;
        lambda = dot(&v, &hv);
        let n = norm(&hv);
        if n == 0.0 {
            return Ok(0.0);
        }
        v = hv.into_iter().map(|x| x / n).collect();
    }
    Ok(lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorRow {
    pub scale: f64,
    pub delta_norm: f64,
    pub actual: f64,
    pub predicted: f64,
    /// `|L(w + Δ) − (L + ∇Lᵀ Δ + ½ Δᵀ H Δ)|`
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorTable {
    pub rows: Vec<TaylorRow>,
    /// The displacement was zero; every residual is trivially 0.
    pub degenerate: bool,
}

impl TaylorTable {
    /// `residual[i] / residual[i+1]` for consecutive scales.
    pub fn shrink_ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|p| p[0].residual / p[1].residual).collect()
    }
}

/// Compares `L(w + cΔ)` against its second-order expansion for each scale
/// `c` (positive, strictly decreasing).
pub fn taylor_residual(obj: &dyn Objective, delta: &[f64], scales: &[f64]) -> Result<TaylorTable> {
    if scales.is_empty() || scales.iter().any(|&c| !(c > 0.0)) || scales.windows(2).any(|p| p[0] <= p[1]) {
        return Err(contract("scales must be positive and strictly decreasing"));
    }
    let w = obj.point();
    if delta.len() != w.len() {
        return Err(dim("taylor_residual", "displacement length differs from parameters"));
    }
    let base = obj.value_at(&w)?;
    if norm(delta) == 0.0 {
        let rows = scales
            .iter()
            .map(|&scale| TaylorRow {
                scale,
                delta_norm: 0.0,
                actual: base,
                predicted: base,
                residual: 0.0,
            })
            .collect();
        return Ok(TaylorTable { rows, degenerate: true });
    }
    let g = obj.grad_at(&w)?;
    let hd = hvp_at(obj, &w, delta)?;
    let lin = dot(&g, delta);
    let quad = dot(delta, &hd);
    let rows = scales
        .iter()
        .map(|&c| {
            let actual = obj.value_at(&axpy(&w, c, delta))?;
            let predicted = base + c * lin + 0.5 * c * c * quad;
            Ok(TaylorRow {
                scale: c,
                delta_norm: c * norm(delta),
                actual,
                predicted,
                residual: (actual - predicted).abs(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaylorTable { rows, degenerate: false })
}

/// Flat displacement `w_q − w` that quantizing `model` with `spec` would
/// apply. Uses the model's own steps when it carries a matching quantizer,
/// fresh [`quant::init_steps`] otherwise. Biases and full-precision layers
/// contribute zeros.
pub fn quantization_displacement(model: &ModelState, spec: &QuantSpec) -> Result<Vec<f64>> {
    let n = quant::quantized_layer_count(model.layers.len(), spec);
    let mut out = Vec::with_capacity(model.num_params());
    for (l, layer) in model.layers.iter().enumerate() {
        let w = &layer.weight.value;
        if l < n {
            let steps = match &model.quant {
                Some(q) if q.spec == *spec => q.steps(l).to_vec(),
                _ => quant::init_steps(w, spec)?,
            };
            let wq = quant::fake_quant_forward(w, &steps, spec)?;
            out.extend(wq.data().iter().zip(w.data()).map(|(a, b)| a - b));
        } else {
            out.extend(std::iter::repeat_n(0.0, w.len()));
        }
        out.extend(std::iter::repeat_n(0.0, layer.bias.value.len()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub trace: f64,
    pub trace_stderr: f64,
    pub probes: usize,
    pub top_eigenvalue: f64,
    pub power_iterations: usize,
    pub taylor: Option<TaylorTable>,
}

pub fn curvature_report(
    obj: &dyn Objective,
    probes: usize,
    power_iterations: usize,
    seed: u64,
    taylor: Option<(&[f64], &[f64])>,
    exec: Execution,
) -> Result<CurvatureReport> {
    let (trace, trace_stderr) = hutchinson_trace(obj, probes, seed, exec)?;
    let top_eigenvalue = top_eigenvalue(obj, power_iterations, seed)?;
    let taylor = taylor
        .map(|(delta, scales)| taylor_residual(obj, delta, scales))
        .transpose()?;
    Ok(CurvatureReport {
        trace,
        trace_stderr,
        probes,
        top_eigenvalue,
        power_iterations,
        taylor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_origin_is_exact() {
        let q = IsotropicQuadratic {
            lambda: 3.0,
            point: vec![0.0; 7],
        };
        let p = flatness(&q, &[0.0, 0.1, 0.5, 2.0], &FlatnessOptions::new(EvalSet::Source, 1)).unwrap();
        assert_eq!(p.rows[0].mean, 0.0);
        for r in &p.rows[1..] {
            assert!((r.mean - 1.5 * r.gamma * r.gamma).abs() <= 1e-14 * r.gamma * r.gamma);
        }
    }

    #[test]
    fn bad_radii_rejected() {
        let q = IsotropicQuadratic {
            lambda: 1.0,
            point: vec![0.0; 3],
        };
        let o = FlatnessOptions::new(EvalSet::Source, 0);
        assert!(flatness(&q, &[-0.1], &o).is_err());
        assert!(flatness(&q, &[0.2, 0.1], &o).is_err());
        assert!(flatness(&q, &[0.1, 0.0], &o).is_err());
    }

    #[test]
    fn hvp_quadratic_and_zero_direction() {
        let q = IsotropicQuadratic {
            lambda: 2.5,
            point: vec![0.3, -1.0, 2.0],
        };
        let v = [1.0, 0.5, -0.25];
        let hv = hvp(&q, &v).unwrap();
        for (a, b) in hv.iter().zip(v) {
            assert!((a - 2.5 * b).abs() <= 1e-6 * 2.5 * b.abs());
        }
        assert!(hvp(&q, &[0.0; 3]).is_err());
    }

    #[test]
    fn taylor_zero_delta_is_degenerate() {
        let q = IsotropicQuadratic {
            lambda: 1.0,
            point: vec![1.0, 2.0],
        };
        let t = taylor_residual(&q, &[0.0, 0.0], &[1.0, 0.5]).unwrap();
        assert!(t.degenerate);
        assert!(t.rows.iter().all(|r| r.residual == 0.0));
        assert!(taylor_residual(&q, &[1.0, 0.0], &[0.5, 1.0]).is_err());
    }

    #[test]
    fn power_iteration_on_quadratic() {
        let q = IsotropicQuadratic {
            lambda: 4.0,
            point: vec![0.1; 5],
        };
        let l = top_eigenvalue(&q, 20, 3).unwrap();
        assert!((l - 4.0).abs() < 1e-6);
        assert!(top_eigenvalue(&q, 5, 3).is_err());
        let (tr, _) = hutchinson_trace(&q, 4, 0, Execution::Sequential).unwrap();
        assert!((tr - 20.0).abs() < 1e-5);
    }
}

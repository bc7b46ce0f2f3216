//! Uniform weight quantization with per-channel learnable step sizes.
//!
//! A weight `w` with step `s` maps to the integer
//! `clip(round(w / s), -Q_N, Q_P)` and back to `w_q = w̄ · s`. Rounding is
//! half-away-from-zero. Channels are the output rows of a `[out × in]` weight
//! matrix; biases are never quantized.

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim, Error, Result};
use crate::nn::{ModelState, Param};
use crate::tensor::{Tape, Tensor, Var};

/// Smallest step size ever produced by [`init_steps`] or the optimizer.
pub const STEP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub signed: bool,
    #[serde(default)]
    pub quantize_last_layer: bool,
}

impl QuantSpec {
    pub fn signed(bits: u32) -> Self {
        Self {
            bits,
            signed: true,
            quantize_last_layer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.bits) {
            return Err(contract(format!("bit width {} outside [2, 32]", self.bits)));
        }
        Ok(())
    }

    /// `(Q_N, Q_P)`: counts of negative and positive levels.
    pub fn levels(&self) -> (i64, i64) {
        let b = self.bits as i64;
        if self.signed {
            (1i64 << (b - 1), (1i64 << (b - 1)) - 1)
        } else {
            (0, (1i64 << b) - 1)
        }
    }

    /// Storage ratio of full-precision 32-bit weights to `b`-bit weights.
    pub fn compression(&self) -> f64 {
        32.0 / self.bits as f64
    }
}

fn check_step(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(contract(format!("step size must be positive and finite, got {s}")))
    }
}

/// Integer code of `w` on the grid of step `s`.
pub fn quantize_int(w: f64, s: f64, spec: &QuantSpec) -> Result<i64> {
    check_step(s)?;
    if !w.is_finite() {
        return Err(Error::NonFinite { op: "quantize_int" });
    }
    Ok(quantize_unchecked(w, s, spec.levels()))
}

#[inline]
fn quantize_unchecked(w: f64, s: f64, (qn, qp): (i64, i64)) -> i64 {
    let k = w / s;
    if k <= -(qn as f64) {
        -qn
    } else if k >= qp as f64 {
        qp
    } else {
        // f64::round rounds half away from zero
        k.round() as i64
    }
}

pub fn dequantize(code: i64, s: f64, spec: &QuantSpec) -> Result<f64> {
    check_step(s)?;
    let (qn, qp) = spec.levels();
    if code < -qn || code > qp {
        return Err(contract(format!("code {code} outside [-{qn}, {qp}]")));
    }
    Ok(code as f64 * s)
}

fn channel_shape(w: &Tensor, steps: &[f64]) -> Result<(usize, usize)> {
    let (out, inp) = w.dims2()?;
    if steps.len() != out {
        return Err(contract(format!(
            "{} step sizes for {out} output channels",
            steps.len()
        )));
    }
    for &s in steps {
        check_step(s)?;
    }
    Ok((out, inp))
}

/// Integer codes of a `[out × in]` weight matrix, one step per row.
pub fn quantize_codes(w: &Tensor, steps: &[f64], spec: &QuantSpec) -> Result<Vec<i64>> {
    let (_, inp) = channel_shape(w, steps)?;
    let lv = spec.levels();
    Ok(w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| quantize_unchecked(x, steps[i / inp], lv))
        .collect())
}

/// Replaces each weight by its dequantized grid value.
pub fn fake_quant_forward(w: &Tensor, steps: &[f64], spec: &QuantSpec) -> Result<Tensor> {
    let (_, inp) = channel_shape(w, steps)?;
    let lv = spec.levels();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = steps[i / inp];
            quantize_unchecked(x, s, lv) as f64 * s
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// LSQ gradient scale `1 / sqrt(N_w · Q_P)`.
pub fn grad_scale(weights_per_channel: usize, spec: &QuantSpec) -> f64 {
    let (_, qp) = spec.levels();
    1.0 / ((weights_per_channel as f64) * qp as f64).sqrt()
}

/// Straight-through gradient for the weights (gated to the clip range) and the
/// LSQ gradient for each channel's step size.
pub fn lsq_backward(
    w: &Tensor,
    steps: &[f64],
    upstream: &Tensor,
    spec: &QuantSpec,
) -> Result<(Tensor, Vec<f64>)> {
    let (out, inp) = channel_shape(w, steps)?;
    if upstream.shape() != w.shape() {
        return Err(dim(
            "lsq_backward",
            format!("upstream {:?} vs weights {:?}", upstream.shape(), w.shape()),
        ));
    }
    let (qn, qp) = spec.levels();
    let (qn, qp) = (qn as f64, qp as f64);
    let g = grad_scale(inp, spec);
    let mut grad_w = vec![0.0; out * inp];
    let mut grad_s = vec![0.0; out];
    for c in 0..out {
        let s = steps[c];
        let mut acc = 0.0;
        for j in 0..inp {
            let i = c * inp + j;
            let k = w.data()[i] / s;
            let u = upstream.data()[i];
            let r = if k <= -qn {
                -qn
            } else if k >= qp {
                qp
            } else {
                grad_w[i] = u;
                k.round() - k
            };
            acc += u * r;
        }
        grad_s[c] = g * acc;
    }
    Ok((Tensor::new(w.shape().to_vec(), grad_w)?, grad_s))
}

/// Per-channel initial step `2·mean|W_c| / sqrt(Q_P)`, floored at [`STEP_FLOOR`].
pub fn init_steps(w: &Tensor, spec: &QuantSpec) -> Result<Vec<f64>> {
    let (out, inp) = w.dims2()?;
    let (_, qp) = spec.levels();
    let root = (qp as f64).sqrt();
    Ok((0..out)
        .map(|c| {
            let mean = w.data()[c * inp..(c + 1) * inp].iter().map(|v| v.abs()).sum::<f64>()
                / inp as f64;
            let s = 2.0 * mean / root;
            if s > 0.0 {
                s.max(STEP_FLOOR)
            } else {
                STEP_FLOOR
            }
        })
        .collect())
}

/// Records a fake-quantized copy of `w` on the tape. Gradients reach both the
/// latent weights and the step sizes through [`lsq_backward`].
pub fn fake_quant_var(tape: &mut Tape, w: Var, steps: Var, spec: QuantSpec) -> Result<Var> {
    let wv = tape.value(w).clone();
    let sv = tape.value(steps).data().to_vec();
    let out = fake_quant_forward(&wv, &sv, &spec)?;
    let s_shape = tape.value(steps).shape().to_vec();
    tape.custom(
        &[w, steps],
        out,
        Box::new(move |up| match lsq_backward(&wv, &sv, up, &spec) {
            Ok((gw, gs)) => vec![gw, Tensor::new(s_shape.clone(), gs).expect("step shape")],
            // shape mismatch: let the tape report it
            Err(_) => vec![Tensor::zeros(up.shape())],
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// Learnable step sizes, straight-through weight gradients.
    Lsq,
    /// Round-to-nearest applied once after training; weights are stored
    /// already quantized.
    PtqRtn,
    /// Staged freezing of the largest-magnitude weights onto a fixed grid.
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub steps: Param,
    /// Incremental mode only; `true` marks a weight fixed at its grid value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub spec: QuantSpec,
    pub mode: QuantMode,
    /// Whether the forward pass applies fake quantization.
    pub enabled: bool,
    /// One entry per quantized layer, in layer order.
    pub layers: Vec<LayerQuant>,
    /// Cumulative frozen fractions, incremental mode only.
    #[serde(default)]
    pub schedule: Vec<f64>,
    /// Number of schedule stages already applied.
    #[serde(default)]
    pub stage: usize,
}

impl QuantState {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for (l, lq) in self.layers.iter().enumerate() {
            if let Some(&s) = lq.steps.value.data().iter().find(|&&s| !(s > 0.0)) {
                return Err(contract(format!("layer {l} has non-positive step {s}")));
            }
        }
        Ok(())
    }

    pub fn steps(&self, layer: usize) -> &[f64] {
        self.layers[layer].steps.value.data()
    }
}

/// Number of layers whose weights get quantized.
pub fn quantized_layer_count(n_layers: usize, spec: &QuantSpec) -> usize {
    if spec.quantize_last_layer {
        n_layers
    } else {
        n_layers - 1
    }
}

/// Attaches an LSQ quantizer with freshly initialized steps and zeroed
/// optimizer moments.
pub fn enable_lsq(model: &mut ModelState, spec: QuantSpec) -> Result<()> {
    spec.validate()?;
    if model.quant.is_some() {
        return Err(contract("model already carries a quantizer"));
    }
    let n = quantized_layer_count(model.layers.len(), &spec);
    let layers = model.layers[..n]
        .iter()
        .map(|l| {
            Ok(LayerQuant {
                steps: Param::new(Tensor::vector(init_steps(&l.weight.value, &spec)?)?),
                frozen: None,
            })
        })
        .collect::<Result<_>>()?;
    model.quant = Some(QuantState {
        spec,
        mode: QuantMode::Lsq,
        enabled: true,
        layers,
        schedule: Vec::new(),
        stage: 0,
    });
    Ok(())
}

/// Round-to-nearest post-training quantization of every layer but the last.
///
/// Steps come from [`init_steps`]; there is no calibration data and no
/// retraining. A model that already went through this function keeps its
/// stored steps, which makes the operation idempotent.
pub fn ptq_round_to_nearest(model: &ModelState, spec: QuantSpec) -> Result<ModelState> {
    spec.validate()?;
    let mut out = model.clone();
    let reuse = match &model.quant {
        None => None,
        Some(q) if q.mode == QuantMode::PtqRtn && q.spec == spec => Some(q.clone()),
        Some(_) => {
            return Err(contract(
                "post-training quantization needs a full-precision model",
            ))
        }
    };
    let n = quantized_layer_count(model.layers.len(), &spec);
    let mut layers = Vec::with_capacity(n);
    for (l, layer) in out.layers[..n].iter_mut().enumerate() {
        let steps = match &reuse {
            Some(q) => q.steps(l).to_vec(),
            None => init_steps(&layer.weight.value, &spec)?,
        };
        layer.weight.value = fake_quant_forward(&layer.weight.value, &steps, &spec)?;
        layers.push(LayerQuant {
            steps: Param::new(Tensor::vector(steps)?),
            frozen: None,
        });
    }
    out.quant = Some(QuantState {
        spec,
        mode: QuantMode::PtqRtn,
        enabled: false,
        layers,
        schedule: Vec::new(),
        stage: 0,
    });
    Ok(out)
}

/// Validates an incremental schedule: strictly increasing, in (0, 1], ending at 1.
pub fn check_schedule(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(contract("incremental schedule is empty"));
    }
    if fractions.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(contract(format!(
            "incremental schedule {fractions:?} is not strictly increasing"
        )));
    }
    if !(fractions[0] > 0.0) || fractions[fractions.len() - 1] != 1.0 {
        return Err(contract(format!(
            "incremental schedule {fractions:?} must lie in (0, 1] and end at 1.0"
        )));
    }
    Ok(())
}

/// Attaches an incremental quantizer. Steps are initialized once and stay
/// fixed so frozen weights remain on their grid.
pub fn enable_incremental(model: &mut ModelState, spec: QuantSpec, schedule: &[f64]) -> Result<()> {
    spec.validate()?;
    check_schedule(schedule)?;
    if model.quant.is_some() {
        return Err(contract("model already carries a quantizer"));
    }
    let n = quantized_layer_count(model.layers.len(), &spec);
    let layers = model.layers[..n]
        .iter()
        .map(|l| {
            Ok(LayerQuant {
                steps: Param::new(Tensor::vector(init_steps(&l.weight.value, &spec)?)?),
                frozen: Some(vec![false; l.weight.value.len()]),
            })
        })
        .collect::<Result<_>>()?;
    model.quant = Some(QuantState {
        spec,
        mode: QuantMode::Incremental,
        enabled: true,
        layers,
        schedule: schedule.to_vec(),
        stage: 0,
    });
    Ok(())
}

/// Applies the next stage of the incremental schedule: in every quantized
/// layer, the largest-magnitude not-yet-frozen weights are snapped to the
/// grid and frozen until the cumulative frozen fraction reaches the stage's
/// target. Ties in magnitude go to the lower index.
pub fn incremental_step(model: &mut ModelState) -> Result<()> {
    let q = model
        .quant
        .as_mut()
        .ok_or_else(|| contract("incremental step on a model without quantizer"))?;
    if q.mode != QuantMode::Incremental {
        return Err(contract("incremental step on a non-incremental quantizer"));
    }
    check_schedule(&q.schedule)?;
    if q.stage >= q.schedule.len() {
        return Err(contract("incremental schedule already complete"));
    }
    let fraction = q.schedule[q.stage];
    let spec = q.spec;
    for (layer, lq) in model.layers.iter_mut().zip(q.layers.iter_mut()) {
        let w = &mut layer.weight.value;
        let (_, inp) = w.dims2()?;
        let n = w.len();
        let frozen = lq
            .frozen
            .as_mut()
            .ok_or_else(|| contract("incremental layer without freeze mask"))?;
        let target = ((fraction * n as f64).round() as usize).min(n);
        let already = frozen.iter().filter(|&&f| f).count();
        if target <= already {
            continue;
        }
        let mut candidates: Vec<usize> = (0..n).filter(|&i| !frozen[i]).collect();
        let data = w.data();
        candidates.sort_by(|&a, &b| {
            data[b]
                .abs()
                .partial_cmp(&data[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let steps = lq.steps.value.data();
        let lv = spec.levels();
        let picks: Vec<usize> = candidates.into_iter().take(target - already).collect();
        let wd = w.data_mut();
        for i in picks {
            let s = steps[i / inp];
            wd[i] = quantize_unchecked(wd[i], s, lv) as f64 * s;
            frozen[i] = true;
        }
    }
    q.stage += 1;
    Ok(())
}

/// Effective weight of a quantized layer as seen by the forward pass.
pub fn effective_weight(w: &Tensor, lq: &LayerQuant, q: &QuantState) -> Result<Tensor> {
    match q.mode {
        QuantMode::Lsq => fake_quant_forward(w, lq.steps.value.data(), &q.spec),
        // frozen weights already sit on the grid; the rest are still training
        QuantMode::Incremental | QuantMode::PtqRtn => Ok(w.clone()),
    }
}

/// Integer export of one quantized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub shape: Vec<usize>,
    pub codes: Vec<i64>,
    pub steps: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Full-precision layer carried alongside quantized ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Integer weights plus per-channel steps; the on-disk quantized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedExport {
    pub format: String,
    pub version: u32,
    pub bits: u32,
    pub signed: bool,
    pub quantized: Vec<QuantizedLayer>,
    pub dense: Vec<DenseLayer>,
    pub size: SizeAccounting,
}

pub const EXPORT_FORMAT: &str = "qtdog-quantized";
pub const EXPORT_VERSION: u32 = 1;

/// Storage accounting for a model with `b`-bit quantized layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeAccounting {
    /// Weights stored at `bits`.
    pub quantized_weights: usize,
    /// Weights, biases and step sizes stored at 32 bits.
    pub full_precision_values: usize,
    /// Bytes of the quantized layers' weights, `ceil(n·b/8)`.
    pub quantized_weight_bytes: usize,
    /// Every byte: packed codes plus 4 bytes per full-precision value.
    pub total_bytes: usize,
    /// Bytes of the same model with every parameter at 32 bits.
    pub full_precision_bytes: usize,
    /// `32 / b`, the compression of the quantized layers.
    pub compression: f64,
}

pub fn size_accounting(model: &ModelState, spec: &QuantSpec) -> SizeAccounting {
    let n = quantized_layer_count(model.layers.len(), spec);
    let mut qw = 0;
    let mut fp = 0;
    let mut all = 0;
    for (l, layer) in model.layers.iter().enumerate() {
        let nw = layer.weight.value.len();
        let nb = layer.bias.value.len();
        all += nw + nb;
        if l < n {
            qw += nw;
            // one step per output channel
            fp += nb + layer.weight.value.shape()[0];
        } else {
            fp += nw + nb;
        }
    }
    let qbytes = (qw * spec.bits as usize).div_ceil(8);
    SizeAccounting {
        quantized_weights: qw,
        full_precision_values: fp,
        quantized_weight_bytes: qbytes,
        total_bytes: qbytes + 4 * fp,
        full_precision_bytes: 4 * all,
        compression: spec.compression(),
    }
}

/// Exports a model's quantized layers as integer codes. LSQ and incremental
/// models are quantized with their current steps; full-precision models use
/// [`init_steps`].
pub fn export_quantized(model: &ModelState, spec: &QuantSpec) -> Result<QuantizedExport> {
    spec.validate()?;
    let n = quantized_layer_count(model.layers.len(), spec);
    let mut quantized = Vec::new();
    let mut dense = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let w = &layer.weight.value;
        if l < n {
            let steps = match &model.quant {
                Some(q) if q.spec == *spec => q.steps(l).to_vec(),
                _ => init_steps(w, spec)?,
            };
            quantized.push(QuantizedLayer {
                shape: w.shape().to_vec(),
                codes: quantize_codes(w, &steps, spec)?,
                steps,
                bias: layer.bias.value.data().to_vec(),
            });
        } else {
            dense.push(DenseLayer {
                shape: w.shape().to_vec(),
                weights: w.data().to_vec(),
                bias: layer.bias.value.data().to_vec(),
            });
        }
    }
    Ok(QuantizedExport {
        format: EXPORT_FORMAT.to_string(),
        version: EXPORT_VERSION,
        bits: spec.bits,
        signed: spec.signed,
        quantized,
        dense,
        size: size_accounting(model, spec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s8() -> QuantSpec {
        QuantSpec::signed(8)
    }

    #[test]
    fn levels_match_definition() {
        assert_eq!(QuantSpec::signed(8).levels(), (128, 127));
        assert_eq!(QuantSpec::signed(3).levels(), (4, 3));
        let u = QuantSpec {
            bits: 4,
            signed: false,
            quantize_last_layer: false,
        };
        assert_eq!(u.levels(), (0, 15));
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_int(0.0, 0.37, &s8()).unwrap(), 0);
        assert_eq!(quantize_int(200.0, 1.0, &s8()).unwrap(), 127);
        assert_eq!(quantize_int(0.74, 0.5, &QuantSpec::signed(3)).unwrap(), 1);
        assert_eq!(quantize_int(-1000.0, 1.0, &s8()).unwrap(), -128);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let spec = s8();
        assert_eq!(quantize_int(0.5, 1.0, &spec).unwrap(), 1);
        assert_eq!(quantize_int(-0.5, 1.0, &spec).unwrap(), -1);
        assert_eq!(quantize_int(2.5, 1.0, &spec).unwrap(), 3);
    }

    #[test]
    fn non_positive_step_rejected() {
        assert!(quantize_int(1.0, 0.0, &s8()).is_err());
        assert!(quantize_int(1.0, -1.0, &s8()).is_err());
    }

    #[test]
    fn dequantize_checks_range() {
        assert_eq!(dequantize(0, 3.3, &s8()).unwrap(), 0.0);
        assert_eq!(dequantize(127, 1.0, &s8()).unwrap(), 127.0);
        assert!(dequantize(128, 1.0, &s8()).is_err());
        assert!(dequantize(-129, 1.0, &s8()).is_err());
    }

    #[test]
    fn init_steps_examples() {
        let w = Tensor::matrix(2, 4, vec![1., 1., 1., 1., 0., 0., 0., 0.]).unwrap();
        let s = init_steps(&w, &s8()).unwrap();
        assert_eq!(s[0], 2.0 / 127f64.sqrt());
        assert_eq!(s[1], STEP_FLOOR);

        let scaled = w.map(|x| 3.5 * x);
        let s2 = init_steps(&scaled, &s8()).unwrap();
        assert!((s2[0] - 3.5 * s[0]).abs() < 1e-15);
    }

    #[test]
    fn fake_quant_zero_and_missing_channel() {
        let w = Tensor::zeros(&[3, 2]);
        let out = fake_quant_forward(&w, &[0.1, 0.2, 0.3], &s8()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(fake_quant_forward(&w, &[0.1, 0.2], &s8()).is_err());
    }

    #[test]
    fn lsq_pass_through_and_clip_branch() {
        let spec = QuantSpec::signed(3); // Q_N = 4, Q_P = 3
        let w = Tensor::matrix(1, 3, vec![0.2, -0.7, 1.1]).unwrap();
        let up = Tensor::filled(&[1, 3], 1.0);
        let (gw, _) = lsq_backward(&w, &[1.0], &up, &spec).unwrap();
        assert_eq!(gw.data(), &[1.0, 1.0, 1.0]);

        // W/s = Q_P + 5
        let w = Tensor::matrix(1, 2, vec![8.0, 0.4]).unwrap();
        let up = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let (gw, gs) = lsq_backward(&w, &[1.0], &up, &spec).unwrap();
        assert_eq!(gw.data(), &[0.0, 1.0]);
        let g = 1.0 / (2.0f64 * 3.0).sqrt();
        // r = Q_P for the clipped weight, round(0.4) - 0.4 for the other
        assert!((gs[0] - g * (2.0 * 3.0 + 1.0 * (0.0 - 0.4))).abs() < 1e-15);
    }

    #[test]
    fn lsq_hand_formula_three_weights() {
        // s = 0.5, b = 3 signed: W/s = [0.6, -9.0, 2.2]; upstream [0.3, -1.2, 0.5]
        let spec = QuantSpec::signed(3);
        let w = Tensor::matrix(1, 3, vec![0.3, -4.5, 1.1]).unwrap();
        let up = Tensor::matrix(1, 3, vec![0.3, -1.2, 0.5]).unwrap();
        let (gw, gs) = lsq_backward(&w, &[0.5], &up, &spec).unwrap();
        assert_eq!(gw.data(), &[0.3, 0.0, 0.5]);
        // r = [1 - 0.6, -4, 2 - 2.2]
        let expected = (0.3 * 0.4 + (-1.2) * (-4.0) + 0.5 * (-0.2)) / (3.0f64 * 3.0).sqrt();
        assert!((gs[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(check_schedule(&[1.0]).is_ok());
        assert!(check_schedule(&[0.5, 1.0]).is_ok());
        assert!(check_schedule(&[0.5, 0.5, 1.0]).is_err());
        assert!(check_schedule(&[0.7, 0.5, 1.0]).is_err());
        assert!(check_schedule(&[0.5, 0.9]).is_err());
        assert!(check_schedule(&[]).is_err());
    }

    #[test]
    fn size_accounting_compression() {
        let spec = QuantSpec::signed(7);
        assert_eq!(spec.compression(), 32.0 / 7.0);
    }
}

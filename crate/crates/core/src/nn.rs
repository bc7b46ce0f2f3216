//! MLP classifiers, softmax cross-entropy, SGD and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, dim, Result};
use crate::quant::{self, QuantMode, QuantState, STEP_FLOOR};
use crate::tensor::{log_sum_exp, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Smooth stand-in used for curvature checks.
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(contract("an MLP needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(contract("all layer widths must be at least 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }
}

/// A trainable tensor with its optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    /// First moment (Adam) or velocity (SGD with momentum).
    pub m: Vec<f64>,
    /// Second moment (Adam).
    pub v: Vec<f64>,
    /// Number of updates applied, for Adam bias correction.
    pub t: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let n = value.len();
        Self {
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[fan_out × fan_in]`; each row is one output channel.
    pub weight: Param,
    pub bias: Param,
}

/// Parameters, optimizer state and optional quantizer of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    pub step: u64,
    pub quant: Option<QuantState>,
}

impl ModelState {
    /// He-uniform weights, zero biases.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Ok(Layer {
                    weight: Param::new(Tensor::matrix(fan_out, fan_in, w)?),
                    bias: Param::new(Tensor::zeros(&[fan_out])),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            layers,
            step: 0,
            quant: None,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.value.len() + l.bias.value.len())
            .sum()
    }

    /// Whether the forward pass runs through an active quantizer.
    pub fn quant_active(&self) -> bool {
        self.quant.as_ref().is_some_and(|q| q.enabled)
    }

    /// Latent parameters flattened as `[W_0, b_0, W_1, b_1, ...]`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.value.data());
            out.extend_from_slice(l.bias.value.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(dim(
                "set_flat_params",
                format!("{} values for {} parameters", flat.len(), self.num_params()),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for p in [&mut l.weight, &mut l.bias] {
                let n = p.value.len();
                p.value.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Copy with a different hidden activation.
    pub fn with_activation(&self, activation: Activation) -> Self {
        let mut m = self.clone();
        m.spec.activation = activation;
        m
    }

    /// Puts every parameter (and step size) on a fresh tape.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.leaf(l.weight.value.clone(), trainable)?;
            let b = tape.leaf(l.bias.value.clone(), trainable)?;
            layers.push((w, b));
        }
        let mut steps = Vec::new();
        if let Some(q) = self.quant.as_ref().filter(|q| q.enabled && q.mode == QuantMode::Lsq) {
            for lq in &q.layers {
                steps.push(tape.leaf(lq.steps.value.clone(), trainable)?);
            }
        }
        Ok(ParamVars { layers, steps })
    }

    /// Logits on the tape. Quantized layers use their effective weights.
    pub fn forward_on(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        let (_, width) = tape.value(x).dims2()?;
        if width != self.spec.input_dim {
            return Err(dim(
                "forward",
                format!("input width {width}, model expects {}", self.spec.input_dim),
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, &(w, b)) in pv.layers.iter().enumerate() {
            let weff = match self.quant.as_ref().filter(|q| q.enabled) {
                Some(q) if l < q.layers.len() => match q.mode {
                    QuantMode::Lsq => quant::fake_quant_var(tape, w, pv.steps[l], q.spec)?,
                    QuantMode::Incremental | QuantMode::PtqRtn => w,
                },
                _ => w,
            };
            let wt = tape.transpose(weff)?;
            let z = tape.matmul(h, wt)?;
            let z = tape.add_bias(z, b)?;
            h = if l < last {
                match self.spec.activation {
                    Activation::Relu => tape.relu(z)?,
                    Activation::Softplus => tape.softplus(z)?,
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Logits for a batch `x[batch × input_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward_on(&mut tape, &pv, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Predicted classes, ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        let (b, _) = logits.dims2()?;
        Ok((0..b).map(|i| argmax(logits.row(i))).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != labels.len() {
            return Err(dim("accuracy", "prediction and label counts differ"));
        }
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Mean cross-entropy over a labelled set.
    pub fn mean_loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        loss_ce_value(&self.forward(x)?, labels)
    }
}

/// Handles of a model's parameters on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    /// Step sizes of LSQ-quantized layers, empty otherwise.
    pub steps: Vec<Var>,
}

impl ParamVars {
    pub fn collect_grads(&self, tape: &Tape) -> Result<ModelGrads> {
        let get = |v: Var| {
            tape.grad(v)
                .cloned()
                .ok_or_else(|| contract("parameter missing from backward pass"))
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &(w, b) in &self.layers {
            weights.push(get(w)?);
            biases.push(get(b)?);
        }
        let steps = self
            .steps
            .iter()
            .map(|&s| get(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelGrads {
            weights,
            biases,
            steps,
        })
    }
}

/// Gradients for every trainable tensor of a [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub steps: Vec<Tensor>,
}

impl ModelGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }
}

/// Loss and gradients of the mean cross-entropy on one batch.
pub fn loss_and_grads(model: &ModelState, x: &Tensor, labels: &[usize]) -> Result<(f64, ModelGrads)> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, true)?;
    let xv = tape.constant(x.clone())?;
    let logits = model.forward_on(&mut tape, &pv, xv)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item()?;
    Ok((value, pv.collect_grads(&tape)?))
}

/// Mean softmax cross-entropy on the tape.
pub fn loss_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Mean softmax cross-entropy of a logit matrix, without a tape.
pub fn loss_ce_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(dim("loss_ce", format!("{} labels for batch of {b}", labels.len())));
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(contract(format!("label {l} outside [0, {c})")));
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[l];
    }
    Ok(total / b as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(contract(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(contract(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(contract("weight decay must be ≥ 0 and eps > 0"));
        }
        Ok(())
    }

    fn update(&self, p: &mut Param, grad: &Tensor, frozen: Option<&[bool]>) -> Result<()> {
        if grad.shape() != p.value.shape() {
            return Err(dim(
                "optimizer_step",
                format!("gradient {:?} for parameter {:?}", grad.shape(), p.value.shape()),
            ));
        }
        p.t += 1;
        let g = grad.data();
        let t = p.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let w = p.value.data_mut();
        for i in 0..w.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let gi = g[i] + self.weight_decay * w[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    p.m[i] = self.momentum * p.m[i] + gi;
                    w[i] -= self.lr * p.m[i];
                }
                OptimizerKind::Adam => {
                    p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * gi;
                    p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * gi * gi;
                    let mhat = p.m[i] / bc1;
                    let vhat = p.v[i] / bc2;
                    w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// One optimizer update of every trainable tensor, step sizes included when
/// an LSQ quantizer is active. Frozen incremental weights are left alone and
/// step sizes are kept at or above [`STEP_FLOOR`].
pub fn optimizer_step(model: &mut ModelState, grads: &ModelGrads, cfg: &OptimizerConfig) -> Result<()> {
    let n = model.layers.len();
    if grads.weights.len() != n || grads.biases.len() != n {
        return Err(contract(format!(
            "gradients for {} layers, model has {n}",
            grads.weights.len().min(grads.biases.len())
        )));
    }
    let lsq_layers = match &model.quant {
        Some(q) if q.enabled && q.mode == QuantMode::Lsq => q.layers.len(),
        _ => 0,
    };
    if grads.steps.len() != lsq_layers {
        return Err(contract(format!(
            "gradients for {} step-size vectors, quantizer has {lsq_layers}",
            grads.steps.len()
        )));
    }
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let frozen = model
            .quant
            .as_ref()
            .filter(|q| q.enabled)
            .and_then(|q| q.layers.get(l))
            .and_then(|lq| lq.frozen.as_deref());
        cfg.update(&mut layer.weight, &grads.weights[l], frozen)?;
        cfg.update(&mut layer.bias, &grads.biases[l], None)?;
    }
    if let Some(q) = model.quant.as_mut() {
        for (lq, g) in q.layers.iter_mut().zip(&grads.steps) {
            // step sizes are not weight-decayed
            let no_decay = OptimizerConfig {
                weight_decay: 0.0,
                ..*cfg
            };
            no_decay.update(&mut lq.steps, g, None)?;
            for s in lq.steps.value.data_mut() {
                *s = s.max(STEP_FLOOR);
            }
        }
    }
    model.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> MlpSpec {
        MlpSpec {
            input_dim: 1,
            hidden_dims: vec![1],
            num_classes: 2,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec();
        s.hidden_dims.clear();
        assert!(ModelState::init(s).is_err());
        let mut s = tiny_spec();
        s.input_dim = 0;
        assert!(ModelState::init(s).is_err());
    }

    #[test]
    fn zero_model_gives_uniform_logits() {
        let mut m = ModelState::init(tiny_spec()).unwrap();
        m.set_flat_params(&vec![0.0; m.num_params()]).unwrap();
        let x = Tensor::matrix(2, 1, vec![0.7, -3.0]).unwrap();
        let logits = m.forward(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let loss = m.mean_loss(&x, &[0, 1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_built_single_unit() {
        // h = relu(2x - 0.5); logits = [3h + 1, -h]
        let mut m = ModelState::init(tiny_spec()).unwrap();
        m.set_flat_params(&[2.0, -0.5, 3.0, -1.0, 1.0, 0.0]).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let logits = m.forward(&x).unwrap();
        assert_eq!(logits.data(), &[5.5, -1.5]);
    }

    #[test]
    fn input_width_checked() {
        let m = ModelState::init(tiny_spec()).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(m.forward(&x).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(&[3, 5]);
        let l = loss_ce_value(&logits, &[0, 4, 2]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let logits = Tensor::matrix(1, 2, vec![800.0, 0.0]).unwrap();
        assert_eq!(loss_ce_value(&logits, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(loss_ce_value(&logits, &[2]).is_err());
        let mut tape = Tape::new();
        let v = tape.constant(logits).unwrap();
        assert!(loss_ce(&mut tape, v, &[5]).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut m = ModelState::init(tiny_spec()).unwrap();
        let before = m.flat_params();
        let zero = ModelGrads {
            weights: m.layers.iter().map(|l| Tensor::zeros(l.weight.value.shape())).collect(),
            biases: m.layers.iter().map(|l| Tensor::zeros(l.bias.value.shape())).collect(),
            steps: vec![],
        };
        optimizer_step(&mut m, &zero, &OptimizerConfig::sgd(0.1)).unwrap();
        assert_eq!(m.flat_params(), before);
        assert_eq!(m.step, 1);

        let mut p = Param::new(Tensor::scalar(1.0));
        OptimizerConfig::sgd(0.1)
            .update(&mut p, &Tensor::scalar(0.5), None)
            .unwrap();
        assert!((p.value.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_single_step_hand_formula() {
        let cfg = OptimizerConfig::adam(0.01);
        let mut p = Param::new(Tensor::scalar(2.0));
        cfg.update(&mut p, &Tensor::scalar(-0.3), None).unwrap();
        let m = 0.1 * -0.3;
        let v = 0.001 * 0.09;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expected = 2.0 - 0.01 * mhat / (f64::sqrt(vhat) + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_step_grads_rejected() {
        let mut m = ModelState::init(tiny_spec()).unwrap();
        quant::enable_lsq(&mut m, quant::QuantSpec::signed(4)).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let (_, mut g) = loss_and_grads(&m, &x, &[1]).unwrap();
        assert_eq!(g.steps.len(), 1);
        g.steps.clear();
        assert!(optimizer_step(&mut m, &g, &OptimizerConfig::default()).is_err());
    }

    #[test]
    fn optimizer_config_validation() {
        assert!(OptimizerConfig::adam(0.0).validate().is_err());
        let mut c = OptimizerConfig::adam(1e-3);
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}

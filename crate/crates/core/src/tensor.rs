//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! return [`Var`] handles into the tape; [`Tape::backward`] walks the nodes in
//! reverse creation order, so the tape is acyclic and topologically ordered by
//! construction. Tapes are single-threaded; parallel work builds one tape per
//! job.
//!
//! Broadcasting is limited to scalar-vs-tensor for the binary elementwise ops.
//! [`Tape::add_bias`] is the one row-broadcast op, used by dense layers.

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim, Error, Result};

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(dim("dims2", format!("expected 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(contract(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Gathers rows of a 2-D tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(dim("select_rows", format!("row {i} out of {r}")));
            }
            out.extend_from_slice(self.row(i));
        }
        Self::matrix(idx.len(), c, out)
    }

    /// Plain (tape-free) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(dim(
                "matmul",
                format!("[{m}x{k}] times [{k2}x{n}]: inner extents differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: maps the upstream gradient of the
/// output to one gradient per input, in input order.
pub type BackwardRule = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, rule: BackwardRule },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`,
    /// if `v` participated and requires a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        self.push("transpose", out, Op::Transpose(a), rg)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor {
                shape: ta.shape.clone(),
                data,
            })
        } else if tb.is_scalar() {
            let y = tb.data[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.data[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(dim(
                op,
                format!("shapes {:?} and {:?} (only scalar broadcasting)", ta.shape, tb.shape),
            ))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a, c), rg)
    }

    /// `x[b×n] + bias[n]`, bias added to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let tb = self.value(bias);
        if tb.len() != c {
            return Err(dim("add_bias", format!("bias of length {} for {c} columns", tb.len())));
        }
        let tx = self.value(x);
        let mut data = tx.data.clone();
        for i in 0..r {
            for (o, &b) in data[i * c..(i + 1) * c].iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", out, Op::AddBias(x, bias), rg)
    }

    /// `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push("relu", out, Op::Relu(a), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push("softplus", out, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(x) = t.data.iter().find(|&&x| x > f64::MAX.ln()) {
            return Err(Error::NumericDomain {
                op: "exp",
                detail: format!("exp({x}) overflows"),
            });
        }
        let out = t.map(f64::exp);
        let rg = self.rg(a);
        self.push("exp", out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(x) = t.data.iter().find(|&&x| x <= 0.0) {
            return Err(Error::NumericDomain {
                op: "log",
                detail: format!("log({x}) undefined"),
            });
        }
        let out = t.map(f64::ln);
        let rg = self.rg(a);
        self.push("log", out, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean softmax cross-entropy of `logits[batch×classes]` against integer
    /// labels, stabilized by subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = t.dims2()?;
        if labels.len() != b {
            return Err(dim(
                "softmax_cross_entropy",
                format!("{} labels for batch of {b}", labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(contract(format!("label {l} outside [0, {c})")));
        }
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for i in 0..b {
            let row = t.row(i);
            let lse = log_sum_exp(row);
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[labels[i]];
        }
        let out = Tensor::scalar(total / b as f64);
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Records `value` as the output of an opaque function of `inputs` whose
    /// vector-Jacobian product is `rule`. Shapes returned by the rule are
    /// checked during [`Tape::backward`].
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: BackwardRule) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients from earlier calls are
    /// discarded; within one sweep, contributions from multiple uses of a
    /// value are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: lt.shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let ga = g.matmul(&tb.transpose()?)?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = ta.transpose()?.matmul(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose()?);
                }
                Op::Add(a, b) => {
                    self.send_broadcast(&mut grads, *a, &g, 1.0);
                    self.send_broadcast(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.send_broadcast(&mut grads, *a, &g, 1.0);
                    self.send_broadcast(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let ga = elementwise_with(&g, tb);
                        self.send_broadcast(&mut grads, *a, &ga, 1.0);
                    }
                    if self.rg(*b) {
                        let gb = elementwise_with(&g, ta);
                        self.send_broadcast(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::AddBias(x, bias) => {
                    let (r, c) = g.dims2()?;
                    if self.rg(*bias) {
                        let mut gb = vec![0.0; c];
                        for i in 0..r {
                            for (o, &v) in gb.iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        let shape = self.value(*bias).shape.clone();
                        accumulate(&mut grads, *bias, Tensor::new(shape, gb)?);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor { shape: g.shape, data });
                }
                Op::Softplus(a) => {
                    let ta = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &x)| gv * sigmoid(x))
                        .collect();
                    accumulate(&mut grads, *a, Tensor { shape: g.shape, data });
                }
                Op::Exp(a) => {
                    let out = &node.value;
                    let ga = elementwise_with(&g, out);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ta = self.value(*a);
                    let data = g.data.iter().zip(&ta.data).map(|(&gv, &x)| gv / x).collect();
                    accumulate(&mut grads, *a, Tensor { shape: g.shape, data });
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape.clone();
                    accumulate(&mut grads, *a, Tensor::filled(&shape, g.data[0]));
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    let v = g.data[0] / ta.len() as f64;
                    let shape = ta.shape.clone();
                    accumulate(&mut grads, *a, Tensor::filled(&shape, v));
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let (b, c) = self.value(*logits).dims2()?;
                    let scale = g.data[0] / b as f64;
                    let mut data = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        data[i * c + l] -= 1.0;
                    }
                    data.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, Tensor::matrix(b, c, data)?);
                }
                Op::Custom { inputs, rule } => {
                    let outs = rule(&g);
                    if outs.len() != inputs.len() {
                        return Err(contract(format!(
                            "custom rule returned {} gradients for {} inputs",
                            outs.len(),
                            inputs.len()
                        )));
                    }
                    for (gi, &inp) in outs.into_iter().zip(inputs) {
                        if gi.shape != self.value(inp).shape {
                            return Err(contract(format!(
                                "custom rule gradient shape {:?} differs from input shape {:?}",
                                gi.shape,
                                self.value(inp).shape
                            )));
                        }
                        if self.rg(inp) {
                            accumulate(&mut grads, inp, gi);
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Routes a gradient to `target`, reducing to a scalar when `target` was
    /// broadcast.
    fn send_broadcast(&self, grads: &mut [Option<Tensor>], target: Var, g: &Tensor, sign: f64) {
        if !self.rg(target) {
            return;
        }
        let t = self.value(target);
        let contrib = if t.shape == g.shape {
            g.map(|x| sign * x)
        } else {
            Tensor {
                shape: t.shape.clone(),
                data: vec![sign * g.data.iter().sum::<f64>()],
            }
        };
        accumulate(grads, target, contrib);
    }
}

/// `g * other`, with `other` possibly a broadcast scalar.
fn elementwise_with(g: &Tensor, other: &Tensor) -> Tensor {
    if other.shape == g.shape {
        Tensor {
            shape: g.shape.clone(),
            data: g.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    } else {
        let y = other.data[0];
        g.map(|x| x * y)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(g.data) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ exp(row)`, max-shifted.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a single logit vector.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| (v - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(i.matmul(&m).unwrap(), m);
        let a = t(&[1, 1], &[2.]);
        let b = t(&[1, 1], &[3.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_and_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1., 0., 2.]).unwrap()).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);
        let y = tape.constant(Tensor::vector(vec![2., 4., 6.]).unwrap()).unwrap();
        let m = tape.mean(y).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 4.0);
    }

    #[test]
    fn relu_grad_zero_at_kink() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1., 0., 2.]).unwrap()).unwrap();
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2., 3.]).unwrap()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.3, -2., 7.]).unwrap()).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn zero_times_anything_gives_zero_grads() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.3, -2., 7.]).unwrap()).unwrap();
        let e = tape.exp(w).unwrap();
        let s = tape.sum(e).unwrap();
        let z = tape.scale(s, 0.0).unwrap();
        tape.backward(z).unwrap();
        assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn scalar_broadcast_grad_reduces() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2., 3.]).unwrap()).unwrap();
        let c = tape.param(Tensor::scalar(2.0)).unwrap();
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(c).unwrap().data(), &[6.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 2., 2.]);
    }

    #[test]
    fn general_broadcast_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn log_and_exp_domain_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(tape.log(a), Err(Error::NumericDomain { .. })));
        let b = tape.constant(Tensor::vector(vec![1000.0]).unwrap()).unwrap();
        assert!(matches!(tape.exp(b), Err(Error::NumericDomain { .. })));
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::vector(vec![f64::NAN]).unwrap());
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2.]).unwrap()).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn custom_identity_and_zero_rules() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., -2.]).unwrap()).unwrap();
        let v = tape.value(x).clone();
        let id = tape.custom(&[x], v.clone(), Box::new(|g| vec![g.clone()])).unwrap();
        let s = tape.sum(id).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1.]);

        let mut tape = Tape::new();
        let x = tape.param(v.clone()).unwrap();
        let z = tape
            .custom(&[x], v, Box::new(|g| vec![Tensor::zeros(g.shape())]))
            .unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn custom_rule_shape_checked() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., -2.]).unwrap()).unwrap();
        let v = tape.value(x).clone();
        let bad = tape
            .custom(&[x], v, Box::new(|_| vec![Tensor::zeros(&[3])]))
            .unwrap();
        let s = tape.sum(bad).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn reuse_accumulates() {
        // y = x + x  =>  dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.5]).unwrap()).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }
}

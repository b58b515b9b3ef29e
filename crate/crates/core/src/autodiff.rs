//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive appends a
//! node holding its output value and the indices of its inputs, so node order
//! is already a topological order and [`Tape::backward`] is a single reverse
//! sweep that visits every node once. Gradients for nodes with fan-out are
//! accumulated.
//!
//! ```
//! use sbnn_core::autodiff::{ParamId, Tape};
//! use sbnn_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(ParamId(0), Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(ParamId(0)).unwrap().item(), 6.0);
//! ```

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Identifier of a trainable tensor within a model.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct ParamId(pub usize);

/// A trainable tensor. The id is assigned by the owning model and is not
/// serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Param {
    #[serde(skip)]
    pub id: ParamId,
    pub value: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            id: ParamId::default(),
            value,
        }
    }

    pub fn on(&self, tape: &mut Tape) -> Var {
        tape.param(self.id, self.value.clone())
    }
}

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Softplus,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Abs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    Sum(usize),
    Mean(usize),
    SliceCols(usize, usize),
    Reshape(usize),
    SoftmaxCe {
        logits: usize,
        targets: Vec<usize>,
    },
    BinaryCe {
        logits: usize,
        targets: Vec<f64>,
    },
    GaussianNll {
        pred: usize,
        targets: Vec<f64>,
        sigma: f64,
    },
    GaussianLogProb {
        w: usize,
        mu: usize,
        sigma: usize,
    },
    LaplaceLogProb {
        w: usize,
        mu: usize,
        scale: usize,
    },
    MixtureLogProb {
        w: usize,
        pi: f64,
        sigma1: f64,
        sigma2: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar root with respect to every reachable parameter.
///
/// Parameters that are absent have zero gradient.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, k: f64) {
        for t in self.grads.values_mut() {
            for g in t.data_mut() {
                *g *= k;
            }
        }
    }

    /// Sets the gradient of `id`, replacing any previous entry.
    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.grads.insert(id, g);
    }

    fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(id, g);
            }
        }
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn ln_normal_pdf(x: f64, sigma: f64) -> f64 {
    let z = x / sigma;
    -0.5 * z * z - sigma.ln() - HALF_LN_2PI
}

/// log of `pi N(w|0,s1^2) + (1-pi) N(w|0,s2^2)` and the responsibilities of
/// the two components, via log-sum-exp.
pub(crate) fn mixture_log_density(w: f64, pi: f64, sigma1: f64, sigma2: f64) -> (f64, f64, f64) {
    if pi >= 1.0 {
        return (ln_normal_pdf(w, sigma1), 1.0, 0.0);
    }
    if pi <= 0.0 {
        return (ln_normal_pdf(w, sigma2), 0.0, 1.0);
    }
    let a = pi.ln() + ln_normal_pdf(w, sigma1);
    let b = (1.0 - pi).ln() + ln_normal_pdf(w, sigma2);
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    (lse, (a - lse).exp(), (b - lse).exp())
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn ix(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.ix(a)?, self.ix(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.ix(a)?;
        let out = self.nodes[ia].value.transpose()?;
        Ok(self.push(out, Op::Transpose(ia)))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.ix(a)?, self.ix(b)?);
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, f)?;
        Ok(self.push(out, op(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a length-`n` vector to every row of a `batch x n` matrix.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (im, iv) = (self.ix(m)?, self.ix(v)?);
        let mv = &self.nodes[im].value;
        let vv = &self.nodes[iv].value;
        let (rows, cols) = mv.dims2()?;
        if mv.shape().len() != 2 || vv.len() != cols {
            return Err(Error::dim("add_row", mv.shape(), vv.shape()));
        }
        let mut out = mv.clone();
        let vd = vv.data();
        for i in 0..rows {
            for (o, b) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(vd) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(im, iv)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ia = self.ix(a)?;
        let out = self.nodes[ia].value.scale(k);
        Ok(self.push(out, Op::Scale(ia, k)))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let ia = self.ix(a)?;
        let out = self.nodes[ia].value.map(|x| x + k);
        Ok(self.push(out, Op::AddScalar(ia)))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let ia = self.ix(a)?;
        let f: fn(f64) -> f64 = match kind {
            Unary::Softplus => softplus_scalar,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid_scalar,
            Unary::Relu => |x| x.max(0.0),
            Unary::Square => |x| x * x,
            Unary::Abs => f64::abs,
        };
        let out = self.nodes[ia].value.map(f);
        Ok(self.push(out, Op::Unary(ia, kind)))
    }

    /// `log(1 + exp(x))` in the overflow-safe form `max(x,0) + log1p(exp(-|x|))`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(a),
            Activation::Tanh => self.tanh(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Linear => {
                self.ix(a)?;
                Ok(a)
            }
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.ix(a)?;
        let s = self.nodes[ia].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.ix(a)?;
        let v = &self.nodes[ia].value;
        let s = v.sum() / v.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(ia)))
    }

    /// Sums a list of scalars; an empty list yields a zero constant.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.ix(a)?;
        let out = self.nodes[ia].value.slice_cols(start, end)?;
        Ok(self.push(out, Op::SliceCols(ia, start)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.ix(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(ia)))
    }

    /// Mean softmax cross-entropy of `batch x K` logits against class indices.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.ix(logits)?;
        let lv = &self.nodes[il].value;
        let (b, k) = lv.dims2()?;
        if targets.len() != b {
            return Err(Error::dim("softmax_ce", lv.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Data(format!("class index {t} out of range for {k} classes")));
            }
            let row = &lv.data()[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / b as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits: il,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy from logits, targets in `[0, 1]`.
    pub fn binary_ce(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let il = self.ix(logits)?;
        let lv = &self.nodes[il].value;
        if lv.len() != targets.len() {
            return Err(Error::dim("binary_ce", lv.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::Data(format!("binary target {bad} outside [0, 1]")));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&l, &y)| softplus_scalar(l) - y * l)
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            out,
            Op::BinaryCe {
                logits: il,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean Gaussian negative log-likelihood with fixed noise `sigma`.
    pub fn gaussian_nll(&mut self, pred: Var, targets: &[f64], sigma: f64) -> Result<Var> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("noise scale must be positive, got {sigma}")));
        }
        let ip = self.ix(pred)?;
        let pv = &self.nodes[ip].value;
        if pv.len() != targets.len() {
            return Err(Error::dim("gaussian_nll", pv.shape(), &[targets.len()]));
        }
        let s2 = sigma * sigma;
        let total: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&m, &y)| (y - m).powi(2) / (2.0 * s2) + sigma.ln() + HALF_LN_2PI)
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            out,
            Op::GaussianNll {
                pred: ip,
                targets: targets.to_vec(),
                sigma,
            },
        ))
    }

    /// `sum_j log N(w_j | mu_j, sigma_j^2)`.
    pub fn gaussian_log_prob(&mut self, w: Var, mu: Var, sigma: Var) -> Result<Var> {
        let (iw, im, is) = (self.ix(w)?, self.ix(mu)?, self.ix(sigma)?);
        let (wv, mv, sv) = (&self.nodes[iw].value, &self.nodes[im].value, &self.nodes[is].value);
        if wv.shape() != mv.shape() || wv.shape() != sv.shape() {
            return Err(Error::dim("gaussian_log_prob", wv.shape(), mv.shape()));
        }
        let total: f64 = (0..wv.len())
            .map(|j| ln_normal_pdf(wv.data()[j] - mv.data()[j], sv.data()[j]))
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::GaussianLogProb {
                w: iw,
                mu: im,
                sigma: is,
            },
        ))
    }

    /// `sum_j log Laplace(w_j | mu_j, b_j)`.
    pub fn laplace_log_prob(&mut self, w: Var, mu: Var, scale: Var) -> Result<Var> {
        let (iw, im, is) = (self.ix(w)?, self.ix(mu)?, self.ix(scale)?);
        let (wv, mv, sv) = (&self.nodes[iw].value, &self.nodes[im].value, &self.nodes[is].value);
        if wv.shape() != mv.shape() || wv.shape() != sv.shape() {
            return Err(Error::dim("laplace_log_prob", wv.shape(), mv.shape()));
        }
        let total: f64 = (0..wv.len())
            .map(|j| {
                let b = sv.data()[j];
                -(wv.data()[j] - mv.data()[j]).abs() / b - (2.0 * b).ln()
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::LaplaceLogProb {
                w: iw,
                mu: im,
                scale: is,
            },
        ))
    }

    /// `sum_j log[pi N(w_j|0,s1^2) + (1-pi) N(w_j|0,s2^2)]`.
    pub fn mixture_log_prob(&mut self, w: Var, pi: f64, sigma1: f64, sigma2: f64) -> Result<Var> {
        let iw = self.ix(w)?;
        let total: f64 = self.nodes[iw]
            .value
            .data()
            .iter()
            .map(|&x| mixture_log_density(x, pi, sigma1, sigma2).0)
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::MixtureLogProb {
                w: iw,
                pi,
                sigma1,
                sigma2,
            },
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<GradientMap> {
        let ir = self.ix(root)?;
        if !self.nodes[ir].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[ir].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; ir + 1];
        grads[ir] = Some(Tensor::full(self.nodes[ir].value.shape(), 1.0));
        let mut out = GradientMap::default();

        for i in (0..=ir).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |j: usize, contrib: Tensor| match &mut grads[j] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            };
            let val = |j: usize| &self.nodes[j].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    send(*a, g.matmul(&val(*b).transpose()?)?);
                    send(*b, val(*a).transpose()?.matmul(&g)?);
                }
                Op::Transpose(a) => send(*a, g.transpose()?),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(val(*b), |x, y| x * y)?);
                    send(*b, g.zip_map(val(*a), |x, y| x * y)?);
                }
                Op::AddRow(m, v) => {
                    let (rows, cols) = g.dims2()?;
                    let mut col = vec![0.0; cols];
                    for r in 0..rows {
                        for (c, acc) in col.iter_mut().enumerate() {
                            *acc += g.data()[r * cols + c];
                        }
                    }
                    let vshape = val(*v).shape().to_vec();
                    send(*v, Tensor::new(vshape, col)?);
                    send(*m, g);
                }
                Op::Scale(a, k) => send(*a, g.scale(*k)),
                Op::AddScalar(a) => send(*a, g),
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let local = match kind {
                        Unary::Softplus => x.map(sigmoid_scalar),
                        Unary::Exp => y.clone(),
                        Unary::Log => x.map(|v| 1.0 / v),
                        Unary::Tanh => y.map(|t| 1.0 - t * t),
                        Unary::Sigmoid => y.map(|s| s * (1.0 - s)),
                        Unary::Relu => x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                        Unary::Square => x.map(|v| 2.0 * v),
                        Unary::Abs => x.map(f64::signum),
                    };
                    send(*a, g.zip_map(&local, |u, v| u * v)?);
                }
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    send(*a, Tensor::full(val(*a).shape(), g.item() / n));
                }
                Op::SliceCols(a, start) => {
                    let src = val(*a);
                    let (rows, cols) = src.dims2()?;
                    let w = g.cols();
                    let mut full = Tensor::zeros(src.shape());
                    for r in 0..rows {
                        for c in 0..w {
                            full.data_mut()[r * cols + start + c] = g.data()[r * w + c];
                        }
                    }
                    send(*a, full);
                }
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
                Op::SoftmaxCe { logits, targets } => {
                    let lv = val(*logits);
                    let (b, k) = lv.dims2()?;
                    let scale = g.item() / b as f64;
                    let mut d = vec![0.0; b * k];
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &lv.data()[i * k..(i + 1) * k];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                        for c in 0..k {
                            let p = (row[c] - m).exp() / z;
                            d[i * k + c] = scale * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    send(*logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
                Op::BinaryCe { logits, targets } => {
                    let lv = val(*logits);
                    let scale = g.item() / targets.len() as f64;
                    let d = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&l, &y)| scale * (sigmoid_scalar(l) - y))
                        .collect();
                    send(*logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
                Op::GaussianNll {
                    pred,
                    targets,
                    sigma,
                } => {
                    let pv = val(*pred);
                    let scale = g.item() / (targets.len() as f64 * sigma * sigma);
                    let d = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&m, &y)| scale * (m - y))
                        .collect();
                    send(*pred, Tensor::new(pv.shape().to_vec(), d)?);
                }
                Op::GaussianLogProb { w, mu, sigma } => {
                    let (wv, mv, sv) = (val(*w), val(*mu), val(*sigma));
                    let gi = g.item();
                    let n = wv.len();
                    let (mut dw, mut dm, mut ds) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                    for j in 0..n {
                        let s = sv.data()[j];
                        let diff = wv.data()[j] - mv.data()[j];
                        dw[j] = -gi * diff / (s * s);
                        dm[j] = -dw[j];
                        ds[j] = gi * (diff * diff / (s * s * s) - 1.0 / s);
                    }
                    let shape = wv.shape().to_vec();
                    send(*w, Tensor::new(shape.clone(), dw)?);
                    send(*mu, Tensor::new(shape.clone(), dm)?);
                    send(*sigma, Tensor::new(shape, ds)?);
                }
                Op::LaplaceLogProb { w, mu, scale } => {
                    let (wv, mv, bv) = (val(*w), val(*mu), val(*scale));
                    let gi = g.item();
                    let n = wv.len();
                    let (mut dw, mut dm, mut db) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                    for j in 0..n {
                        let b = bv.data()[j];
                        let diff = wv.data()[j] - mv.data()[j];
                        dw[j] = -gi * diff.signum() / b;
                        dm[j] = -dw[j];
                        db[j] = gi * (diff.abs() / (b * b) - 1.0 / b);
                    }
                    let shape = wv.shape().to_vec();
                    send(*w, Tensor::new(shape.clone(), dw)?);
                    send(*mu, Tensor::new(shape.clone(), dm)?);
                    send(*scale, Tensor::new(shape, db)?);
                }
                Op::MixtureLogProb {
                    w,
                    pi,
                    sigma1,
                    sigma2,
                } => {
                    let gi = g.item();
                    let d = val(*w).map(|x| {
                        let (_, r1, r2) = mixture_log_density(x, *pi, *sigma1, *sigma2);
                        -gi * x * (r1 / (sigma1 * sigma1) + r2 / (sigma2 * sigma2))
                    });
                    send(*w, d);
                }
            }
        }
        Ok(out)
    }
}

/// Elementwise softplus of a plain tensor.
pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// `log(exp(y) - 1)`, the inverse of softplus, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub(crate) fn gaussian_ln_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    ln_normal_pdf(x - mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{uniform, RngFactory};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central finite differences of a scalar function of one tensor.
    fn fd_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngFactory::new(seed).stream("t");
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| uniform(&mut rng, -2.0, 2.0)).collect()).unwrap()
    }

    /// Checks the gradient of `build(x)` (a scalar) against finite differences.
    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Tape, Var) -> Var) {
        let x0 = random_tensor(shape, seed);
        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.param(ParamId(0), x.clone());
            let y = build(&mut t, v);
            t.value(y).item()
        };
        let mut t = Tape::new();
        let v = t.param(ParamId(0), x0.clone());
        let y = build(&mut t, v);
        let g = t.backward(y).unwrap();
        let analytic = g.get(ParamId(0)).unwrap();
        let numeric = fd_grad(&x0, 1e-5, &eval);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(rel_err(*a, *n) <= 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn square_grad() {
        let mut t = Tape::new();
        let x = t.param(ParamId(0), Tensor::scalar(3.0));
        let y = t.square(x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(ParamId(0)).unwrap().item(), 6.0);
    }

    #[test]
    fn softplus_grad_at_zero() {
        let mut t = Tape::new();
        let x = t.param(ParamId(0), Tensor::scalar(0.0));
        let y = t.softplus(x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(ParamId(0)).unwrap().item(), 0.5);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.param(ParamId(0), Tensor::scalar(1.0));
        let y = t.add(x, x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(ParamId(0)).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut t = Tape::new();
        let x = t.param(ParamId(0), Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.constant(Tensor::scalar(1.0));
        assert!(matches!(b.exp(x), Err(Error::Usage(_))));
    }

    #[test]
    fn softplus_values() {
        let x = Tensor::vector(vec![0.0, 100.0, -5.0, 50.0]);
        let y = softplus(&x);
        assert!((y.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((y.data()[1] - 100.0).abs() <= 1e-12);
        // log(1 + e^-5), 30-digit reference
        assert!((y.data()[2] - 0.006_715_348_489_118_07).abs() < 1e-15);
        assert!((y.data()[3] - 50.0).abs() <= 1e-12);
        assert!(softplus(&Tensor::vector(vec![-700.0, -40.0])).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn activations() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 2.0, 0.0]));
        let r = t.activation(x, Activation::Relu).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 2.0, 0.0]);
        let th = t.activation(x, Activation::Tanh).unwrap();
        assert_eq!(t.value(th).data()[2], 0.0);
        let s = t.activation(x, Activation::Sigmoid).unwrap();
        assert_eq!(t.value(s).data()[2], 0.5);
        assert!(matches!("gelu".parse::<Activation>(), Err(Error::Config(_))));
    }

    #[test]
    fn loss_primitive_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
        let ce = t.softmax_ce(z, &[0]).unwrap();
        assert!((t.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let l = t.constant(Tensor::scalar(0.0));
        let bce = t.binary_ce(l, &[1.0]).unwrap();
        assert!((t.value(bce).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let m = t.constant(Tensor::scalar(0.7));
        let nll = t.gaussian_nll(m, &[0.7], 0.02).unwrap();
        // log(0.02) + 0.5 log(2 pi)
        assert!((t.value(nll).item() - (-2.993_084_472_223_473_3)).abs() < 1e-12);
        assert!(matches!(t.softmax_ce(z, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..5 {
            check(&[3, 4], seed, |t, x| {
                let b = t.constant(random_tensor(&[4, 2], 100 + seed));
                let y = t.matmul(x, b).unwrap();
                t.sum(y).unwrap()
            });
            check(&[4, 2], seed, |t, x| {
                let a = t.constant(random_tensor(&[3, 4], 200 + seed));
                let y = t.matmul(a, x).unwrap();
                let y = t.square(y).unwrap();
                t.sum(y).unwrap()
            });
            for op in 0..8 {
                check(&[2, 3], seed, |t, x| {
                    let y = match op {
                        0 => t.softplus(x),
                        1 => t.exp(x),
                        2 => t.tanh(x),
                        3 => t.sigmoid(x),
                        4 => t.square(x),
                        5 => {
                            let sx = t.softplus(x).unwrap();
                            t.log(sx)
                        }
                        6 => t.transpose(x),
                        _ => t.slice_cols(x, 1, 3),
                    }
                    .unwrap();
                    let w = t.constant(random_tensor(t.value(y).shape(), 300 + op));
                    let y = t.mul(y, w).unwrap();
                    t.sum(y).unwrap()
                });
            }
            check(&[2, 3], seed, |t, x| {
                let v = t.constant(random_tensor(&[3], 7));
                let y = t.add_row(x, v).unwrap();
                let y = t.tanh(y).unwrap();
                t.mean(y).unwrap()
            });
            check(&[3], seed, |t, v| {
                let m = t.constant(random_tensor(&[2, 3], 8));
                let y = t.add_row(m, v).unwrap();
                let y = t.square(y).unwrap();
                t.sum(y).unwrap()
            });
            check(&[3, 2], seed, |t, x| t.softmax_ce(x, &[0, 1, 1]).unwrap());
            check(&[4, 1], seed, |t, x| t.binary_ce(x, &[0.0, 1.0, 1.0, 0.0]).unwrap());
            check(&[4, 1], seed, |t, x| t.gaussian_nll(x, &[0.1, -0.3, 0.5, 1.0], 0.5).unwrap());
            check(&[5], seed, |t, x| t.mixture_log_prob(x, 0.5, 1.0, 0.3).unwrap());
            check(&[5], seed, |t, x| {
                let mu = t.constant(random_tensor(&[5], 9));
                let s = t.softplus(x).unwrap();
                let w = t.constant(random_tensor(&[5], 10));
                t.gaussian_log_prob(w, mu, s).unwrap()
            });
            check(&[5], seed, |t, x| {
                let w = t.constant(random_tensor(&[5], 11));
                let s = t.constant(Tensor::full(&[5], 0.7));
                t.gaussian_log_prob(w, x, s).unwrap()
            });
            check(&[5], seed, |t, x| {
                let mu = t.constant(random_tensor(&[5], 12).scale(0.1));
                let s = t.softplus(x).unwrap();
                let w = t.constant(random_tensor(&[5], 13).map(|v| v + 3.0));
                t.laplace_log_prob(w, mu, s).unwrap()
            });
        }
    }

    #[test]
    fn inverse_softplus_roundtrip() {
        for &y in &[1e-3, 0.0151, std::f64::consts::LN_2, 1.0, 10.0, 40.0] {
            let x = inverse_softplus(y);
            assert!((softplus_scalar(x) - y).abs() <= 1e-12 * y.max(1.0));
        }
        assert!(inverse_softplus(std::f64::consts::LN_2).abs() < 1e-15);
    }
}

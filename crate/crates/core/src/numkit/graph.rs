//! Eagerly evaluated computation graph with reverse-mode differentiation.
//!
//! Every op computes its value at construction time and records enough
//! state to run its vector-Jacobian product. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order.

use rand::Rng;

use super::tensor::{self, dot, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Sigmoid,
    Exp,
    Abs,
    /// `sign(v)·sqrt(|v|)`.
    SqrtSigned,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output length `T`, window centred (extra tap on the right for even `K`).
    Same,
    /// `K-1` zeros on the left; output at `t` sees inputs `<= t`.
    Causal,
    /// No padding; output length `T-K+1`.
    Valid,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, S),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Mask(Var, Vec<bool>),
    Conv1d {
        x: Var,
        kernel: Var,
        left: usize,
    },
    Dropout(Var, Vec<S>),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        normed: Vec<S>,
        inv_std: Vec<S>,
    },
    L2NormRows(Var, Vec<S>),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    Clamp(Var, S, S),
    Dpe {
        gamma: Var,
        beta: Var,
        len: usize,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value when `v` does not
    /// reach the loss.
    pub fn get_or_zero(&self, graph: &Graph<S>, v: Var) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).dims()))
    }
}

#[derive(Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

fn gelu<S: Scalar>(x: S) -> S {
    S::lit(0.5) * x * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let cdf = S::lit(0.5) * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * S::lit(0.5)).exp() * S::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Applies a pointwise function outside any graph.
pub fn apply_unary<S: Scalar>(kind: Unary, x: S) -> S {
    match kind {
        Unary::Gelu => gelu(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Abs => x.abs(),
        Unary::SqrtSigned => sign(x) * x.abs().sqrt(),
        Unary::Log => x.ln(),
    }
}

fn unary_grad<S: Scalar>(kind: Unary, x: S, y: S) -> S {
    match kind {
        Unary::Gelu => gelu_grad(x),
        Unary::Sigmoid => y * (S::one() - y),
        Unary::Exp => y,
        Unary::Abs => sign(x),
        Unary::SqrtSigned => {
            if x == S::zero() {
                S::zero()
            } else {
                S::lit(0.5) / x.abs().sqrt()
            }
        }
        Unary::Log => S::one() / x,
    }
}

fn conv_taps(k: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => (k - 1) / 2,
        Padding::Causal => k - 1,
        Padding::Valid => 0,
    }
}

/// Position-encoding matrix `exp(-|γ(i-j)² + β|)`.
pub fn dpe_matrix<S: Scalar>(len: usize, gamma: S, beta: S) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            let d = S::lit(i as f64 - j as f64);
            data.push((-(gamma * d * d + beta).abs()).exp());
        }
    }
    Tensor::new(vec![len, len], data).expect("square")
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<Var> {
        if !matches!(op, Op::Mask(..)) && !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).dims().to_vec(),
                rhs: self.value(b).dims().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(x).dims().to_vec(),
                rhs: self.value(bias).dims().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(v, Op::AddBias(x, bias), ng)
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var> {
        let v = self.value(x).map(|e| scale * e + shift);
        let ng = self.needs(x);
        self.push(v, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.affine(x, c, S::zero())
    }

    /// Multiplies every element by a one-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("scale_by", s)?;
        let c = self.value(s).item();
        let v = self.value(x).map(|e| e * c);
        let ng = self.needs(x) || self.needs(s);
        self.push(v, Op::ScaleBy(x, s), ng)
    }

    /// Divides every element by a one-element node.
    pub fn div_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("div_by", s)?;
        let c = self.value(s).item();
        let v = self.value(x).map(|e| e / c);
        let ng = self.needs(x) || self.needs(s);
        self.push(v, Op::DivBy(x, s), ng)
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(s).dims().to_vec(),
                rhs: vec![1],
            });
        }
        Ok(())
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let v = self.value(x).map(|e| apply_unary(kind, e));
        let ng = self.needs(x);
        self.push(v, Op::Unary(x, kind), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(x))?;
        let ng = self.needs(x);
        self.push(v, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::new(t.dims().to_vec(), data)?;
        let ng = self.needs(x);
        self.push(v, Op::LogSoftmaxRows(x), ng)
    }

    /// Replaces entries where `keep` is false with `-inf`.
    pub fn mask(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: self.value(x).dims().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let mut v = self.value(x).clone();
        for (e, &k) in v.data_mut().iter_mut().zip(&keep) {
            if !k {
                *e = S::neg_infinity();
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::Mask(x, keep), ng)
    }

    /// 1-D convolution of `x[T×Cin]` with `kernel[K×Cin×Cout]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let xt = self.value(x);
        let kt = self.value(kernel);
        if xt.rank() != 2 || kt.rank() != 3 || kt.dims()[1] != xt.dims()[1] || kt.dims()[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xt.dims().to_vec(),
                rhs: kt.dims().to_vec(),
            });
        }
        let (t, cin) = (xt.dims()[0], xt.dims()[1]);
        let (k, cout) = (kt.dims()[0], kt.dims()[2]);
        let left = conv_taps(k, padding);
        let out_len = match padding {
            Padding::Valid => {
                if k > t {
                    return Err(Error::InvalidArgument(format!(
                        "kernel size {k} exceeds sequence length {t} with no padding"
                    )));
                }
                t - k + 1
            }
            _ => t,
        };
        let (xd, kd) = (xt.data(), kt.data());
        let mut out = vec![S::zero(); out_len * cout];
        for o in 0..out_len {
            let orow = &mut out[o * cout..(o + 1) * cout];
            for tap in 0..k {
                let src = o as isize + tap as isize - left as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
                let w = &kd[tap * cin * cout..(tap + 1) * cin * cout];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == S::zero() {
                        continue;
                    }
                    let wrow = &w[c * cout..(c + 1) * cout];
                    for (ov, &wv) in orow.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let v = Tensor::new(vec![out_len, cout], out)?;
        let ng = self.needs(x) || self.needs(kernel);
        self.push(v, Op::Conv1d { x, kernel, left }, ng)
    }

    /// Inverted dropout. Returns `x` itself in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut v = self.value(x).clone();
        for (e, &m) in v.data_mut().iter_mut().zip(&mask) {
            *e *= m;
        }
        let ng = self.needs(x);
        self.push(v, Op::Dropout(x, mask), ng)
    }

    /// Row-wise layer normalisation with learnable `scale` and `shift`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: S) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.cols();
        if self.value(scale).len() != n || self.value(shift).len() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xt.dims().to_vec(),
                rhs: self.value(scale).dims().to_vec(),
            });
        }
        let (g, b) = (self.value(scale).data(), self.value(shift).data());
        let nf = S::lit(n as f64);
        let mut normed = Vec::with_capacity(xt.len());
        let mut inv_std = Vec::with_capacity(xt.rows());
        let mut out = Vec::with_capacity(xt.len());
        for row in xt.data().chunks(n) {
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normed.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::new(xt.dims().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(
            v,
            Op::LayerNorm {
                x,
                scale,
                shift,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// Scales each row to unit L2 norm. Zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.cols();
        let mut norms = Vec::with_capacity(xt.rows());
        let mut out = Vec::with_capacity(xt.len());
        for row in xt.data().chunks(n) {
            let norm = dot(row, row).sqrt();
            norms.push(norm);
            if norm > S::zero() {
                out.extend(row.iter().map(|&v| v / norm));
            } else {
                out.extend(std::iter::repeat_n(S::zero(), n));
            }
        }
        let v = Tensor::new(xt.dims().to_vec(), out)?;
        let ng = self.needs(x);
        self.push(v, Op::L2NormRows(x, norms), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyBatch("mean"));
        }
        let v = Tensor::scalar(t.sum() / S::lit(t.len() as f64));
        let ng = self.needs(x);
        self.push(v, Op::Mean(x), ng)
    }

    /// Selects flat element indices into a vector.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                t.len()
            )));
        }
        let v = Tensor::vector(idx.iter().map(|&i| t.data()[i]).collect());
        let ng = self.needs(x);
        self.push(v, Op::Gather(x, idx), ng)
    }

    /// Clamps into `[lo, hi]`; gradient flows only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        let ng = self.needs(x);
        self.push(v, Op::Clamp(x, lo, hi), ng)
    }

    /// Position-encoding matrix from one-element `gamma` and `beta` nodes.
    pub fn dpe(&mut self, len: usize, gamma: Var, beta: Var) -> Result<Var> {
        self.check_scalar("dpe", gamma)?;
        self.check_scalar("dpe", beta)?;
        let v = dpe_matrix(len, self.value(gamma).item(), self.value(beta).item());
        let ng = self.needs(gamma) || self.needs(beta);
        self.push(v, Op::Dpe { gamma, beta, len }, ng)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(dims)?;
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Stacks the rows of several matrices (or vectors, as single rows).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyBatch("concat_rows"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(*first).dims().to_vec(),
                    rhs: t.dims().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Copies the value of `x` into a new leaf that blocks gradients.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.dims(), S::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<S>,
        dy: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let g = tensor::matmul_nt(dy, self.value(*b))?;
                    self.accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let g = tensor::matmul_tn(self.value(*a), dy)?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a·bᵀ: da = dy·b, db = dyᵀ·a
                if self.needs(*a) {
                    let g = tensor::matmul(dy, self.value(*b))?;
                    self.accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let g = tensor::matmul_tn(dy, self.value(*a))?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, dy.zip_map(bv, |g, x| g * x));
                self.accumulate(grads, *b, dy.zip_map(av, |g, x| g * x));
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                if self.needs(*bias) {
                    let n = dy.cols();
                    let mut gb = vec![S::zero(); n];
                    for row in dy.data().chunks(n) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    let dims = self.value(*bias).dims().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(dims, gb)?);
                }
            }
            Op::Affine(x, scale) => {
                let c = *scale;
                self.accumulate(grads, *x, dy.map(|g| g * c));
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                self.accumulate(grads, *x, dy.map(|g| g * c));
                if self.needs(*s) {
                    let gs = dot(dy.data(), self.value(*x).data());
                    let dims = self.value(*s).dims().to_vec();
                    self.accumulate(grads, *s, Tensor::new(dims, vec![gs])?);
                }
            }
            Op::DivBy(x, s) => {
                let c = self.value(*s).item();
                self.accumulate(grads, *x, dy.map(|g| g / c));
                if self.needs(*s) {
                    let gs = -dot(dy.data(), self.value(*x).data()) / (c * c);
                    let dims = self.value(*s).dims().to_vec();
                    self.accumulate(grads, *s, Tensor::new(dims, vec![gs])?);
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let data = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(y.data())
                    .map(|((&g, &xi), &yi)| g * unary_grad(*kind, xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), data)?);
            }
            Op::SoftmaxRows(x) => {
                let n = y.cols();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(dy.data().chunks(n)) {
                    let inner = dot(yr, gr);
                    data.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - inner)));
                }
                self.accumulate(grads, *x, Tensor::new(y.dims().to_vec(), data)?);
            }
            Op::LogSoftmaxRows(x) => {
                let n = y.cols();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(dy.data().chunks(n)) {
                    let total: S = gr.iter().copied().sum();
                    data.extend(yr.iter().zip(gr).map(|(&yi, &gi)| gi - yi.exp() * total));
                }
                self.accumulate(grads, *x, Tensor::new(y.dims().to_vec(), data)?);
            }
            Op::Mask(x, keep) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(keep)
                    .map(|(&g, &k)| if k { g } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.dims().to_vec(), data)?);
            }
            Op::Conv1d { x, kernel, left } => {
                let xt = self.value(*x);
                let kt = self.value(*kernel);
                let (t, cin) = (xt.dims()[0], xt.dims()[1]);
                let (k, cout) = (kt.dims()[0], kt.dims()[2]);
                let out_len = y.dims()[0];
                let mut dx = vec![S::zero(); t * cin];
                let mut dk = vec![S::zero(); k * cin * cout];
                let (need_x, need_k) = (self.needs(*x), self.needs(*kernel));
                for o in 0..out_len {
                    let grow = &dy.data()[o * cout..(o + 1) * cout];
                    for tap in 0..k {
                        let src = o as isize + tap as isize - *left as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        let w = &kt.data()[tap * cin * cout..(tap + 1) * cin * cout];
                        for c in 0..cin {
                            let wrow = &w[c * cout..(c + 1) * cout];
                            if need_x {
                                dx[src * cin + c] += dot(grow, wrow);
                            }
                            if need_k {
                                let xv = xt.data()[src * cin + c];
                                if xv != S::zero() {
                                    let krow = &mut dk[(tap * cin + c) * cout
                                        ..(tap * cin + c + 1) * cout];
                                    for (kv, &gv) in krow.iter_mut().zip(grow) {
                                        *kv += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(xt.dims().to_vec(), dx)?);
                }
                if need_k {
                    self.accumulate(grads, *kernel, Tensor::new(kt.dims().to_vec(), dk)?);
                }
            }
            Op::Dropout(x, mask) => {
                let data = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, Tensor::new(y.dims().to_vec(), data)?);
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                normed,
                inv_std,
            } => {
                let n = y.cols();
                let nf = S::lit(n as f64);
                let g = self.value(*scale).data();
                let mut dscale = vec![S::zero(); n];
                let mut dshift = vec![S::zero(); n];
                let mut dx = Vec::with_capacity(y.len());
                for ((gr, hr), &inv) in dy.data().chunks(n).zip(normed.chunks(n)).zip(inv_std) {
                    let mut sum_dh = S::zero();
                    let mut sum_dh_h = S::zero();
                    for j in 0..n {
                        dscale[j] += gr[j] * hr[j];
                        dshift[j] += gr[j];
                        let dh = gr[j] * g[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..n {
                        let dh = gr[j] * g[j];
                        dx.push(inv / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.dims().to_vec(), dx)?);
                let sd = self.value(*scale).dims().to_vec();
                self.accumulate(grads, *scale, Tensor::new(sd.clone(), dscale)?);
                let bd = self.value(*shift).dims().to_vec();
                self.accumulate(grads, *shift, Tensor::new(bd, dshift)?);
            }
            Op::L2NormRows(x, norms) => {
                let n = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &norm) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(norms) {
                    if norm > S::zero() {
                        let inner = dot(yr, gr);
                        dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * inner) / norm));
                    } else {
                        dx.extend(std::iter::repeat_n(S::zero(), n));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.dims().to_vec(), dx)?);
            }
            Op::Sum(x) => {
                let g = dy.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).dims(), g));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.item() / S::lit(xv.len() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.dims(), g));
            }
            Op::Gather(x, idx) => {
                let mut gx = Tensor::zeros(self.value(*x).dims());
                for (&i, &g) in idx.iter().zip(dy.data()) {
                    gx.data_mut()[i] += g;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                let data = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), data)?);
            }
            Op::Dpe { gamma, beta, len } => {
                let gv = self.value(*gamma).item();
                let bv = self.value(*beta).item();
                let (mut dg, mut db) = (S::zero(), S::zero());
                for i in 0..*len {
                    for j in 0..*len {
                        let d = S::lit(i as f64 - j as f64);
                        let d2 = d * d;
                        let s = sign(gv * d2 + bv);
                        let e = y.data()[i * len + j] * dy.data()[i * len + j];
                        dg -= e * s * d2;
                        db -= e * s;
                    }
                }
                let gd = self.value(*gamma).dims().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gd, vec![dg])?);
                let bd = self.value(*beta).dims().to_vec();
                self.accumulate(grads, *beta, Tensor::new(bd, vec![db])?);
            }
            Op::Reshape(x) => {
                let dims = self.value(*x).dims().to_vec();
                self.accumulate(grads, *x, dy.clone().reshape(&dims)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    let g = Tensor::new(pv.dims().to_vec(), dy.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    self.accumulate(grads, p, g);
                }
            }
        }
        Ok(())
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::Affine(..) => "affine",
        Op::ScaleBy(..) => "scale_by",
        Op::DivBy(..) => "div_by",
        Op::Unary(_, Unary::Gelu) => "gelu",
        Op::Unary(_, Unary::Sigmoid) => "sigmoid",
        Op::Unary(_, Unary::Exp) => "exp",
        Op::Unary(_, Unary::Abs) => "abs",
        Op::Unary(_, Unary::SqrtSigned) => "sqrt_signed",
        Op::Unary(_, Unary::Log) => "log",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
        Op::Mask(..) => "mask",
        Op::Conv1d { .. } => "conv1d",
        Op::Dropout(..) => "dropout",
        Op::LayerNorm { .. } => "layer_norm",
        Op::L2NormRows(..) => "l2_normalize_rows",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Gather(..) => "gather",
        Op::Clamp(..) => "clamp",
        Op::Dpe { .. } => "dpe",
        Op::Reshape(..) => "reshape",
        Op::ConcatRows(..) => "concat_rows",
    }
}

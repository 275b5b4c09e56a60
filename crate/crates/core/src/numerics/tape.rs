//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because
//! inputs always precede outputs.

use super::kernels::{self, ConvDims};
use super::{Prng, Scalar, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Outcome of [`Tape::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardStatus {
    Ok,
    /// The loss does not depend on any gradient-requiring leaf; every
    /// leaf gradient was set to zero.
    Detached,
}

/// Options for a Gumbel-Softmax row selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelOptions {
    pub temperature: f64,
    /// Forward emits the one-hot argmax; gradients follow the soft sample.
    pub hard: bool,
    /// When false no Gumbel noise is added (deterministic test hook).
    pub noise: bool,
}

impl Default for GumbelOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            hard: true,
            noise: true,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    BmmNt(Var, Var),
    Conv(Var, Var, Var, ConvDims),
    Deconv(Var, Var, Var, ConvDims),
    SoftmaxRows(Var),
    StraightThrough(Var),
    Reshape(Var),
    ToTokens(Var),
    FromTokens(Var),
    GatherRows(Var, Vec<usize>),
    AddChannelBias(Var, Var),
    Sum(Var),
    WeightedMse(Var, Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations for one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sa == sb, "{what}: shape mismatch {sa:?} vs {sb:?}");
        Ok(sa.to_vec())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let shape = self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(&shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// `[.., k] x [k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            !sa.is_empty() && sb.len() == 2 && sa[sa.len() - 1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut());
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn bmm_dims(&self, a: Var, b: Var, transpose_b: bool) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0],
            "bmm: expected [B,m,k] and [B,.,.], got {sa:?}, {sb:?}"
        );
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            ensure!(sb[2] == k, "bmm_nt: inner dims {k} vs {}", sb[2]);
            sb[1]
        } else {
            ensure!(sb[1] == k, "bmm: inner dims {k} vs {}", sb[1]);
            sb[2]
        };
        Ok((batch, m, k, n))
    }

    /// Batched `[B,m,k] x [B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.bmm_dims(a, b, false)?;
        let mut out = Tensor::zeros(&[batch, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (i, o) in out.data_mut().chunks_exact_mut(m * n).enumerate() {
                kernels::gemm_nn(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    o,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Bmm(a, b), rg))
    }

    /// Batched `[B,m,k] x [B,n,k]^T`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.bmm_dims(a, b, true)?;
        let mut out = Tensor::zeros(&[batch, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (i, o) in out.data_mut().chunks_exact_mut(m * n).enumerate() {
                kernels::gemm_nt(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * n * k..(i + 1) * n * k],
                    o,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::BmmNt(a, b), rg))
    }

    /// 2x2 stride-2 convolution, see [`super::conv2x2_s2`].
    pub fn conv2x2_s2(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (d, shape) = kernels::check_conv(self.shape(x), self.shape(kernel), self.shape(bias))?;
        let mut out = Tensor::zeros(&shape);
        kernels::conv_forward(
            d,
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            out.data_mut(),
        );
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(out, Op::Conv(x, kernel, bias, d), rg))
    }

    /// Transposed 2x2 stride-2 convolution, see [`super::deconv2x2_s2`].
    pub fn deconv2x2_s2(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (d, shape) = kernels::check_deconv(self.shape(x), self.shape(kernel), self.shape(bias))?;
        let mut out = Tensor::zeros(&shape);
        kernels::deconv_forward(
            d,
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            out.data_mut(),
        );
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(out, Op::Deconv(x, kernel, bias, d), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        ensure!(!self.shape(x).is_empty(), "softmax needs at least one axis");
        let cols = *self.shape(x).last().unwrap();
        let mut out = Tensor::zeros(self.shape(x));
        kernels::softmax_rows_into(cols, self.value(x).data(), out.data_mut());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Gumbel-Softmax along the last axis.
    ///
    /// Soft mode returns `softmax((logits + g) / temperature)`. Hard mode
    /// returns the one-hot argmax of that sample (first index on ties)
    /// with gradients routed to the soft sample.
    pub fn gumbel_softmax(&mut self, logits: Var, opts: GumbelOptions, rng: &mut Prng) -> Result<Var> {
        ensure!(
            opts.temperature > 0.0 && opts.temperature.is_finite(),
            "gumbel temperature must be positive, got {}",
            opts.temperature
        );
        let shape = self.shape(logits).to_vec();
        ensure!(!shape.is_empty(), "gumbel_softmax needs at least one axis");
        let mut perturbed = logits;
        if opts.noise {
            let noise: Vec<T> = (0..self.value(logits).numel()).map(|_| T::of(rng.gumbel())).collect();
            let noise = self.constant(Tensor::new(&shape, noise)?);
            perturbed = self.add(logits, noise)?;
        }
        let scaled = self.scale(perturbed, T::of(1.0 / opts.temperature));
        let soft = self.softmax_rows(scaled)?;
        if !opts.hard {
            return Ok(soft);
        }
        let cols = *shape.last().unwrap();
        let mut hard = Tensor::zeros(&shape);
        for (row, out) in self
            .value(soft)
            .data()
            .chunks_exact(cols)
            .zip(hard.data_mut().chunks_exact_mut(cols))
        {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out[best] = T::one();
        }
        let rg = self.rg(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `[B,C,H,W] -> [B,H*W,C]`: each spatial position becomes a token.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 4, "to_tokens expects [B,C,H,W], got {s:?}");
        let (b, c, p) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[b, p, c]);
        let dst = out.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                for pi in 0..p {
                    dst[(bi * p + pi) * c + ci] = src[(bi * c + ci) * p + pi];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ToTokens(x), rg))
    }

    /// `[B,H*W,C] -> [B,C,H,W]`.
    pub fn from_tokens(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            s.len() == 3 && s[1] == height * width,
            "from_tokens expects [B,{},C], got {s:?}",
            height * width
        );
        let (b, p, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[b, c, height, width]);
        let dst = out.data_mut();
        for bi in 0..b {
            for pi in 0..p {
                for ci in 0..c {
                    dst[(bi * c + ci) * p + pi] = src[(bi * p + pi) * c + ci];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::FromTokens(x), rg))
    }

    /// Selects rows of a `[N, C]` table, producing `[idx.len(), C]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        ensure!(s.len() == 2, "gather_rows expects a matrix, got {s:?}");
        ensure!(idx.iter().all(|&i| i < s[0]), "gather_rows index out of range");
        let c = s[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[idx.len(), c], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows(table, idx.to_vec()), rg))
    }

    /// Adds `bias[b,c]` to every spatial cell of `x[b,c,..]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        ensure!(
            sx.len() >= 2 && sb == sx[..2],
            "add_channel_bias: bias {sb:?} does not match {sx:?}"
        );
        let per: usize = sx[2..].iter().product();
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for (chunk, &b) in out.data_mut().chunks_exact_mut(per).zip(bv) {
            for v in chunk {
                *v += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddChannelBias(x, bias), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// `mean_b( w_b * mean_i (pred[b,i] - target[b,i])^2 )` over the
    /// leading axis.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: &[T]) -> Result<Var> {
        let shape = self.same_shape(pred, target, "weighted_mse")?;
        ensure!(
            !shape.is_empty() && shape[0] == weights.len(),
            "weighted_mse: {} weights for leading axis {:?}",
            weights.len(),
            shape
        );
        let per = self.value(pred).numel() / weights.len();
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let mut total = T::zero();
        for (b, &w) in weights.iter().enumerate() {
            let mut s = T::zero();
            for i in b * per..(b + 1) * per {
                let d = p[i] - t[i];
                s += d * d;
            }
            total += w * s / T::of(per as f64);
        }
        let out = Tensor::scalar(total / T::of(weights.len() as f64));
        let rg = self.rg(&[pred, target]);
        Ok(self.push(out, Op::WeightedMse(pred, target, weights.to_vec()), rg))
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(mut g) = self.grad_buf(v) {
            f(g.data_mut());
            self.nodes[v.0].grad = Some(g);
        }
    }

    fn grad_buf(&mut self, v: Var) -> Option<Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            self.nodes[v.0]
                .grad
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape())),
        )
    }

    fn put_grad(&mut self, v: Var, g: Option<Tensor<T>>) {
        if let Some(g) = g {
            self.nodes[v.0].grad = Some(g);
        }
    }

    /// Populates `grad` of every gradient-requiring node reachable from
    /// `loss`, which must be a single-element tensor.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStatus> {
        ensure!(
            self.value(loss).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        self.zero_grad();
        if !self.nodes[loss.0].requires_grad {
            for n in &mut self.nodes {
                if n.requires_grad && matches!(n.op, Op::Leaf) {
                    n.grad = Some(Tensor::zeros(n.value.shape()));
                }
            }
            return Ok(BackwardStatus::Detached);
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backprop(&op, idx, &gout)?;
            self.nodes[idx].grad = Some(gout);
        }
        Ok(BackwardStatus::Ok)
    }

    fn backprop(&mut self, op: &Op<T>, idx: usize, gout: &Tensor<T>) -> Result<()> {
        let go = gout.data();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(v, |g| add_into(g, go));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |g| add_into(g, go));
                self.accumulate(b, |g| {
                    for (gi, &o) in g.iter_mut().zip(go) {
                        *gi -= o;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).clone(), self.value(b).clone());
                self.accumulate(a, |g| {
                    for ((gi, &o), &y) in g.iter_mut().zip(go).zip(bv.data()) {
                        *gi += o * y;
                    }
                });
                self.accumulate(b, |g| {
                    for ((gi, &o), &x) in g.iter_mut().zip(go).zip(av.data()) {
                        *gi += o * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(a, |g| {
                for (gi, &o) in g.iter_mut().zip(go) {
                    *gi += o * s;
                }
            }),
            Op::Relu(a) => {
                let out = self.nodes[idx].value.clone();
                self.accumulate(a, |g| {
                    for ((gi, &o), &y) in g.iter_mut().zip(go).zip(out.data()) {
                        if y > T::zero() {
                            *gi += o;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sb0, sb1) = (self.shape(b)[0], self.shape(b)[1]);
                let (k, n) = (sb0, sb1);
                let m = self.value(a).numel() / k;
                if let Some(mut ga) = self.grad_buf(a) {
                    kernels::gemm_nt(m, n, k, go, self.value(b).data(), ga.data_mut());
                    self.put_grad(a, Some(ga));
                }
                if let Some(mut gb) = self.grad_buf(b) {
                    kernels::gemm_tn(m, k, n, self.value(a).data(), go, gb.data_mut());
                    self.put_grad(b, Some(gb));
                }
            }
            Op::Bmm(a, b) => {
                let (batch, m, k, n) = self.bmm_dims(a, b, false)?;
                if let Some(mut ga) = self.grad_buf(a) {
                    let bv = self.value(b).data();
                    for i in 0..batch {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &go[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.put_grad(a, Some(ga));
                }
                if let Some(mut gb) = self.grad_buf(b) {
                    let av = self.value(a).data();
                    for i in 0..batch {
                        kernels::gemm_tn(
                            m,
                            k,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            &go[i * m * n..(i + 1) * m * n],
                            &mut gb.data_mut()[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.put_grad(b, Some(gb));
                }
            }
            Op::BmmNt(a, b) => {
                // out[m,n] = a[m,k] . b[n,k]
                let (batch, m, k, n) = self.bmm_dims(a, b, true)?;
                if let Some(mut ga) = self.grad_buf(a) {
                    let bv = self.value(b).data();
                    for i in 0..batch {
                        kernels::gemm_nn(
                            m,
                            n,
                            k,
                            &go[i * m * n..(i + 1) * m * n],
                            &bv[i * n * k..(i + 1) * n * k],
                            &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.put_grad(a, Some(ga));
                }
                if let Some(mut gb) = self.grad_buf(b) {
                    let av = self.value(a).data();
                    for i in 0..batch {
                        kernels::gemm_tn(
                            m,
                            n,
                            k,
                            &go[i * m * n..(i + 1) * m * n],
                            &av[i * m * k..(i + 1) * m * k],
                            &mut gb.data_mut()[i * n * k..(i + 1) * n * k],
                        );
                    }
                    self.put_grad(b, Some(gb));
                }
            }
            Op::Conv(x, k, b, d) => {
                let mut gx = self.grad_buf(x);
                let mut gk = self.grad_buf(k);
                let mut gb = self.grad_buf(b);
                kernels::conv_backward(
                    d,
                    self.value(x).data(),
                    self.value(k).data(),
                    go,
                    gx.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                self.put_grad(x, gx);
                self.put_grad(k, gk);
                self.put_grad(b, gb);
            }
            Op::Deconv(x, k, b, d) => {
                let mut gx = self.grad_buf(x);
                let mut gk = self.grad_buf(k);
                let mut gb = self.grad_buf(b);
                kernels::deconv_backward(
                    d,
                    self.value(x).data(),
                    self.value(k).data(),
                    go,
                    gx.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                self.put_grad(x, gx);
                self.put_grad(k, gk);
                self.put_grad(b, gb);
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[idx].value.clone();
                let cols = *y.shape().last().unwrap();
                self.accumulate(x, |g| kernels::softmax_rows_backward(cols, y.data(), go, g));
            }
            Op::StraightThrough(soft) => self.accumulate(soft, |g| add_into(g, go)),
            Op::Reshape(x) => self.accumulate(x, |g| add_into(g, go)),
            Op::ToTokens(x) => {
                let s = self.shape(x).to_vec();
                let (b, c, p) = (s[0], s[1], s[2] * s[3]);
                self.accumulate(x, |g| {
                    for bi in 0..b {
                        for ci in 0..c {
                            for pi in 0..p {
                                g[(bi * c + ci) * p + pi] += go[(bi * p + pi) * c + ci];
                            }
                        }
                    }
                });
            }
            Op::FromTokens(x) => {
                let s = self.shape(x).to_vec();
                let (b, p, c) = (s[0], s[1], s[2]);
                self.accumulate(x, |g| {
                    for bi in 0..b {
                        for pi in 0..p {
                            for ci in 0..c {
                                g[(bi * p + pi) * c + ci] += go[(bi * c + ci) * p + pi];
                            }
                        }
                    }
                });
            }
            Op::GatherRows(table, ref rows) => {
                let c = self.shape(table)[1];
                let rows = rows.clone();
                self.accumulate(table, |g| {
                    for (r, &i) in rows.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &go[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::AddChannelBias(x, bias) => {
                let per: usize = self.shape(x)[2..].iter().product();
                self.accumulate(x, |g| add_into(g, go));
                self.accumulate(bias, |g| {
                    for (gi, chunk) in g.iter_mut().zip(go.chunks_exact(per)) {
                        for &v in chunk {
                            *gi += v;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = go[0];
                self.accumulate(x, |g| {
                    for gi in g.iter_mut() {
                        *gi += s;
                    }
                });
            }
            Op::WeightedMse(pred, target, ref weights) => {
                let weights = weights.clone();
                let per = self.value(pred).numel() / weights.len();
                let scale = go[0] * T::of(2.0) / T::of((per * weights.len()) as f64);
                let diff: Vec<T> = self
                    .value(pred)
                    .data()
                    .iter()
                    .zip(self.value(target).data())
                    .map(|(&p, &t)| p - t)
                    .collect();
                self.accumulate(pred, |g| {
                    for (b, &w) in weights.iter().enumerate() {
                        for i in b * per..(b + 1) * per {
                            g[i] += scale * w * diff[i];
                        }
                    }
                });
                self.accumulate(target, |g| {
                    for (b, &w) in weights.iter().enumerate() {
                        for i in b * per..(b + 1) * per {
                            g[i] -= scale * w * diff[i];
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// `out = (residual ? tokens : 0) + softmax(scale * Q K^T) V` with
    /// `Q = tokens Wq` etc. A `None` projection is the identity.
    ///
    /// `tokens` is `[n, d]` or `[B, n, d]`; the output has the same shape.
    pub fn scaled_dot_attention(
        &mut self,
        tokens: Var,
        projections: [Option<Var>; 3],
        scale: f64,
        residual: bool,
    ) -> Result<Var> {
        self.attention_with(tokens, projections, scale, residual, |tape, logits| {
            tape.softmax_rows(logits)
        })
    }

    /// Attention with a caller-supplied row normalizer applied to the
    /// scaled logits `[B, n, n]`.
    pub fn attention_with(
        &mut self,
        tokens: Var,
        projections: [Option<Var>; 3],
        scale: f64,
        residual: bool,
        normalize: impl FnOnce(&mut Self, Var) -> Result<Var>,
    ) -> Result<Var> {
        let shape = self.shape(tokens).to_vec();
        let batched = match shape.len() {
            2 => self.reshape(tokens, &[1, shape[0], shape[1]])?,
            3 => tokens,
            _ => {
                return Err(Error::contract(format!(
                    "attention expects [n,d] or [B,n,d], got {shape:?}"
                )))
            }
        };
        let d = *shape.last().unwrap();
        ensure!(shape[shape.len() - 2] >= 1, "attention needs at least one token");
        let mut proj = [batched; 3];
        for (slot, w) in proj.iter_mut().zip(projections) {
            if let Some(w) = w {
                ensure!(
                    self.shape(w) == [d, d],
                    "attention projection must be [{d},{d}], got {:?}",
                    self.shape(w)
                );
                *slot = self.matmul(batched, w)?;
            }
        }
        let [q, k, v] = proj;
        let mut logits = self.bmm_nt(q, k)?;
        if scale != 1.0 {
            logits = self.scale(logits, T::of(scale));
        }
        let weights = normalize(self, logits)?;
        let mut out = self.bmm(weights, v)?;
        if residual {
            out = self.add(batched, out)?;
        }
        if shape.len() == 2 {
            out = self.reshape(out, &shape)?;
        }
        Ok(out)
    }
}

fn add_into<T: Scalar>(g: &mut [T], src: &[T]) {
    for (gi, &s) in g.iter_mut().zip(src) {
        *gi += s;
    }
}

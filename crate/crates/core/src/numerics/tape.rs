use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::matrix::{axpy, dot};
use super::{Matrix, ParamId, ParamStore, Real};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise nonlinearities supported by the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// tanh approximation.
    Gelu,
    Sigmoid,
    /// x·sigmoid(x).
    Silu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let c = T::of(GELU_C);
                let inner = c * (x + T::of(GELU_A) * x * x * x);
                T::of(0.5) * x * (T::one() + inner.tanh())
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let inner = c * (x + a * x * x * x);
                let t = inner.tanh();
                let dinner = c * (T::one() + T::of(3.0) * a * x * x);
                T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// log σ(x), evaluated without overflow.
#[inline]
pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Act(Var, Activation),
    Dropout(Var, Matrix<T>),
    MeanRows(Var),
    SumAll(Var),
    SumSq(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Clamp(Var, T, T),
    LogSigmoid(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<Vec<T>>,
    },
}

struct Node<T: Real> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode recorder for the fixed layer set used by the models.
///
/// Parameters enter through [`Tape::param`]; frozen parameters are recorded
/// without gradient tracking, so no gradient is ever computed for them.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a {:?} node", m.shape());
        m.data()[0]
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a parameter, reusing the node if it is already on the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul {:?} x {:?}", va.shape(), vb.shape());
        let out = va.matmul_unchecked(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_nt {:?} x {:?}ᵀ", va.shape(), vb.shape());
        let out = va.matmul_nt_unchecked(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{what} {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::new(va.rows(), va.cols(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "add", |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "sub", |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "mul", |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.rows(), 1, "add_row bias must be a row");
        assert_eq!(va.cols(), vb.cols(), "add_row {:?} + {:?}", va.shape(), vb.shape());
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Rows of `src` picked by index (embedding lookup).
    pub fn gather(&mut self, src: Var, indices: &[usize]) -> Var {
        let out = self
            .value(src)
            .select_rows(indices)
            .expect("gather index out of range");
        let ng = self.ng(src);
        self.push(out, Op::Gather(src, indices.to_vec()), ng)
    }

    /// Row-wise layer normalisation with affine 1×c `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        assert_eq!(vg.shape(), (1, cols));
        assert_eq!(vb.shape(), (1, cols));
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let n = T::of(cols as f64);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.data()[c] + vb.data()[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row-wise softmax. With `causal`, entry (i, j) is masked out for
    /// j > i + (cols - rows), i.e. a query never sees a later key.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let shift = cols.saturating_sub(rows);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + shift + 1).min(cols) } else { cols };
            let row = &vx.row(r)[..limit];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let o = out.row_mut(r);
            let mut s = T::zero();
            for c in 0..limit {
                let e = (row[c] - mx).exp();
                o[c] = e;
                s += e;
            }
            let inv = T::one() / s;
            for v in &mut o[..limit] {
                *v *= inv;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let out = self.value(x).map(|v| kind.apply(v));
        let ng = self.ng(x);
        self.push(out, Op::Act(x, kind), ng)
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut super::Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let vx = self.value(x);
        let keep = T::of(1.0 / (1.0 - p));
        let mask_data = (0..vx.len())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let mask = Matrix::new(vx.rows(), vx.cols(), mask_data).expect("shape");
        let out_data = vx.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
        let out = Matrix::new(vx.rows(), vx.cols(), out_data).expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::Dropout(x, mask), ng)
    }

    /// Column means, 1×c.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        assert!(self.value(x).rows() > 0, "mean_rows on an empty matrix");
        let out = self.value(x).column_mean();
        let ng = self.ng(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Matrix::filled(1, 1, s), Op::SumAll(x), ng)
    }

    /// Σ x².
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).frobenius_sq();
        let ng = self.ng(x);
        self.push(Matrix::filled(1, 1, s), Op::SumSq(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let vx = self.value(x);
        assert!(start + width <= vx.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(vx.rows(), width);
        for r in 0..vx.rows() {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + width]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols(x, start), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, height: usize) -> Var {
        let vx = self.value(x);
        assert!(start + height <= vx.rows(), "slice_rows out of range");
        let c = vx.cols();
        let out = Matrix::new(height, c, vx.data()[start * c..(start + height) * c].to_vec())
            .expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::SliceRows(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
            }
            off += vp.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let out = Matrix::new(rows, cols, data).expect("shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Same data, new shape (row-major order preserved).
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = Matrix::new(rows, cols, self.value(x).data().to_vec()).expect("reshape size");
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let ng = self.ng(x);
        self.push(out, Op::Clamp(x, lo, hi), ng)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(log_sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::LogSigmoid(x), ng)
    }

    /// Σ over `(row, class)` pairs of −log softmax(logits[row])[class].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let vl = self.value(logits);
        let mut loss = T::zero();
        let mut probs = Vec::with_capacity(targets.len());
        for &(r, t) in targets {
            let row = vl.row(r);
            assert!(t < row.len(), "target class {t} out of range");
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut p: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let s: T = p.iter().copied().sum();
            loss += s.ln() - (row[t] - mx);
            let inv = T::one() / s;
            p.iter_mut().for_each(|v| *v *= inv);
            probs.push(p);
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Propagate d(loss)/d(node) for every node that needs a gradient.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    /// Add this tape's parameter gradients into `store` (trainable only).
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let Some(g) = self.grad(v) {
                p.grad.add_assign(g).expect("grad shape matches param");
            }
        }
    }

    fn acc(&mut self, v: Var, delta: Matrix<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta).expect("grad shape"),
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut Matrix<T>)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        let g = self.grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c));
        f(g);
    }

    fn backprop_node(&mut self, i: usize, g: &Matrix<T>) {
        // Ops are small; moving the op out avoids holding a borrow of self.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let d = g.matmul_nt_unchecked(self.value(*b));
                    self.acc(*a, d);
                }
                if self.ng(*b) {
                    let d = self.value(*a).matmul_tn_unchecked(g);
                    self.acc(*b, d);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    let d = g.matmul_unchecked(self.value(*b));
                    self.acc(*a, d);
                }
                if self.ng(*b) {
                    let d = g.matmul_tn_unchecked(self.value(*a));
                    self.acc(*b, d);
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = hadamard(g, self.value(*b));
                    self.acc(*a, d);
                }
                if self.ng(*b) {
                    let d = hadamard(g, self.value(*a));
                    self.acc(*b, d);
                }
            }
            Op::AddRow(a, bias) => {
                self.acc(*a, g.clone());
                if self.ng(*bias) {
                    self.acc(*bias, g.column_mean().scale(T::of(g.rows() as f64)));
                }
            }
            Op::Scale(a, s) => self.acc(*a, g.scale(*s)),
            Op::Gather(src, idx) => {
                self.acc_with(*src, |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        axpy(T::one(), g.row(k), d.row_mut(r));
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = g.cols();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            db.data_mut()[c] += g.get(r, c);
                        }
                    }
                    self.acc(*gamma, dg);
                    self.acc(*beta, db);
                }
                if self.ng(*x) {
                    let gam = self.value(*gamma).data().to_vec();
                    let n = T::of(cols as f64);
                    let mut dx = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        let dxhat: Vec<T> = (0..cols).map(|c| g.get(r, c) * gam[c]).collect();
                        let s1: T = dxhat.iter().copied().sum();
                        let s2 = dot(&dxhat, xhat.row(r));
                        let k = inv_std[r] / n;
                        for c in 0..cols {
                            dx.set(r, c, k * (n * dxhat[c] - s1 - xhat.get(r, c) * s2));
                        }
                    }
                    self.acc(*x, dx);
                }
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for c in 0..y.cols() {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - s));
                    }
                }
                self.acc(*x, dx);
            }
            Op::Act(x, kind) => {
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * kind.derivative(v))
                    .collect();
                let dx = Matrix::new(vx.rows(), vx.cols(), data).expect("shape");
                self.acc(*x, dx);
            }
            Op::Dropout(x, mask) => self.acc(*x, hadamard(g, mask)),
            Op::MeanRows(x) => {
                let rows = self.value(*x).rows();
                let inv = T::one() / T::of(rows as f64);
                self.acc_with(*x, |d| {
                    for r in 0..rows {
                        axpy(inv, g.data(), d.row_mut(r));
                    }
                });
            }
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(*x, Matrix::filled(r, c, g.data()[0]));
            }
            Op::SumSq(x) => {
                let d = self.value(*x).scale(T::of(2.0) * g.data()[0]);
                self.acc(*x, d);
            }
            Op::SliceCols(x, start) => {
                let w = g.cols();
                self.acc_with(*x, |d| {
                    for r in 0..g.rows() {
                        axpy(T::one(), g.row(r), &mut d.row_mut(r)[*start..*start + w]);
                    }
                });
            }
            Op::SliceRows(x, start) => {
                self.acc_with(*x, |d| {
                    for r in 0..g.rows() {
                        axpy(T::one(), g.row(r), d.row_mut(start + r));
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.acc(p, d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let c = g.cols();
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.ng(p) {
                        let d = Matrix::new(h, c, g.data()[off * c..(off + h) * c].to_vec())
                            .expect("shape");
                        self.acc(p, d);
                    }
                    off += h;
                }
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(*x, Matrix::new(r, c, g.data().to_vec()).expect("shape"));
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { T::zero() })
                    .collect();
                let dx = Matrix::new(vx.rows(), vx.cols(), data).expect("shape");
                self.acc(*x, dx);
            }
            Op::LogSigmoid(x) => {
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * sigmoid(-v))
                    .collect();
                let dx = Matrix::new(vx.rows(), vx.cols(), data).expect("shape");
                self.acc(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gs = g.data()[0];
                self.acc_with(*logits, |d| {
                    for ((r, t), p) in targets.iter().zip(probs) {
                        let row = d.row_mut(*r);
                        axpy(gs, p, row);
                        row[*t] -= gs;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn hadamard<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("shape")
}

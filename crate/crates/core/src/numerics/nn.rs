//! Parameter layouts for the layer set shared by the trainable models.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] so the same
//! layout can be evaluated against an `f32` training store or an `f64` copy
//! used for gradient checks.

use super::{Activation, Matrix, ParamId, ParamStore, Real, Rng, Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Matrix::uniform(input, output, bound, rng));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, output));
        Self { w, b, input, output }
    }

    pub fn identity(store: &mut ParamStore, name: &str, n: usize) -> Self {
        let w = store.add(format!("{name}.w"), Matrix::identity(n));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, n));
        Self {
            w,
            b,
            input: n,
            output: n,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Two linear layers with a pointwise activation in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let (input, hidden, output) = dims;
        Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
            activation,
        }
    }

    /// Square variant that computes the identity map exactly at init.
    pub fn identity(store: &mut ParamStore, name: &str, n: usize) -> Self {
        Self {
            first: Linear::identity(store, &format!("{name}.0"), n),
            second: Linear::identity(store, &format!("{name}.1"), n),
            activation: Activation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.first.input
    }

    pub fn output_dim(&self) -> usize {
        self.second.output
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.first.forward(tape, store, x);
        let h = tape.act(h, self.activation);
        self.second.forward(tape, store, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        causal: bool,
    ) -> Var {
        let dim = self.query.output;
        let hd = dim / self.heads;
        let q = self.query.forward(tape, store, x);
        let k = self.key.forward(tape, store, x);
        let v = self.value.forward(tape, store, x);
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * hd, hd),
                    tape.slice_cols(k, h * hd, hd),
                    tape.slice_cols(v, h * hd, hd),
                )
            };
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, causal);
            heads.push(tape.matmul(attn, vh));
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        self.out.forward(tape, store, joined)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: SelfAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attention: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                (dim, ffn_dim, dim),
                Activation::Gelu,
                rng,
            ),
        }
    }

    /// `dropout` is applied to both residual branches when an rng is given.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        causal: bool,
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> Var {
        let h = self.norm1.forward(tape, store, x);
        let mut a = self.attention.forward(tape, store, h, causal);
        if let Some((p, rng)) = dropout.as_mut() {
            a = tape.dropout(a, *p, rng);
        }
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, store, x);
        let mut f = self.ffn.forward(tape, store, h);
        if let Some((p, rng)) = dropout.as_mut() {
            f = tape.dropout(f, *p, rng);
        }
        tape.add(x, f)
    }
}

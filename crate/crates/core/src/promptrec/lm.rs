//! Small decoder-only language model and the soft-prompt projectors.

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::numerics::nn::{LayerNorm, Mlp, TransformerBlock};
use crate::numerics::{Activation, Matrix, ParamId, ParamStore, Real, Rng, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLmConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn: usize,
    pub context: usize,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            blocks: 2,
            heads: 2,
            ffn: 256,
            context: 32,
        }
    }
}

impl TinyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(
                "lm.hidden",
                format!("{} is not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if self.context == 0 || self.ffn == 0 {
            return Err(Error::config("lm.context", "context and ffn must be positive"));
        }
        Ok(())
    }
}

/// Token embeddings (output head tied), learned positions, causal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub config: TinyLmConfig,
    pub vocab_size: usize,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl TinyLm {
    pub fn new(config: &TinyLmConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let h = config.hidden;
        let std = 1.0 / (h as f64).sqrt();
        let token_emb = store.add("lm.token_emb", Matrix::randn(vocab_size, h, std, rng));
        let pos_emb = store.add("lm.pos_emb", Matrix::randn(config.context, h, std, rng));
        let blocks = (0..config.blocks)
            .map(|b| TransformerBlock::new(store, &format!("lm.block{b}"), h, config.heads, config.ffn, rng))
            .collect();
        let final_norm = LayerNorm::new(store, "lm.ln", h);
        Self {
            config: config.clone(),
            vocab_size,
            token_emb,
            pos_emb,
            blocks,
            final_norm,
        }
    }

    pub fn embed_tokens<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[usize]) -> Var {
        let e = tape.param(store, self.token_emb);
        tape.gather(e, tokens)
    }

    /// Final hidden states for an input embedding sequence (L×h).
    pub fn hidden<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: Var) -> Result<Var> {
        let len = tape.value(inputs).rows();
        if len == 0 || len > self.config.context {
            return Err(Error::Prompt(format!(
                "input of {len} positions for a context of {}",
                self.config.context
            )));
        }
        let pos = tape.param(store, self.pos_emb);
        let idx: Vec<usize> = (0..len).collect();
        let p = tape.gather(pos, &idx);
        let mut x = tape.add(inputs, p);
        for b in &self.blocks {
            x = b.forward(tape, store, x, true, None);
        }
        Ok(self.final_norm.forward(tape, store, x))
    }

    /// Vocabulary logits for each row of `hidden`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hidden: Var) -> Var {
        let e = tape.param(store, self.token_emb);
        tape.matmul_nt(hidden, e)
    }
}

/// Two-layer map from a source vector to `n_soft` rows of width `h_lm`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub mlp: Mlp,
    pub n_soft: usize,
    pub hidden: usize,
}

impl Projector {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        source: usize,
        n_soft: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, name, (source, hidden, n_soft * hidden), activation, rng),
            n_soft,
            hidden,
        }
    }

    pub fn source_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn activation(&self) -> Activation {
        self.mlp.activation
    }

    /// `x` is 1×source; the result is n_soft×hidden.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape != (1, self.source_dim()) {
            return Err(Error::Dimension(format!(
                "projector expects 1x{}, got {shape:?}",
                self.source_dim()
            )));
        }
        let y = self.mlp.forward(tape, store, x);
        Ok(tape.reshape(y, self.n_soft, self.hidden))
    }
}

/// How the source vectors become soft rows.
#[derive(Debug, Clone, PartialEq)]
pub enum SoftPath {
    Projected { user: Projector, item: Projector },
    /// Source vectors are zero-padded or cut to the LM width.
    Direct,
}

/// Language model plus soft-prompt path, sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptNet {
    pub vocab: Vocab,
    pub lm: TinyLm,
    pub soft: SoftPath,
    pub instruction: Vec<usize>,
}

/// Shape of the soft-prompt path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftSpec {
    pub user_dim: usize,
    pub item_dim: usize,
    pub n_soft: usize,
    pub projected: bool,
}

impl PromptNet {
    pub fn new(
        lm_cfg: &TinyLmConfig,
        template: &str,
        num_items: usize,
        soft: SoftSpec,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        lm_cfg.validate()?;
        if soft.n_soft == 0 {
            return Err(Error::config("prompt.n_soft", "must be positive"));
        }
        let vocab = Vocab::new(template, num_items);
        let instruction = vocab.encode_words(template)?;
        let lm = TinyLm::new(lm_cfg, vocab.len(), store, &mut rng.fork(1));
        let h = lm_cfg.hidden;
        let soft = if soft.projected {
            let mut prng = rng.fork(2);
            SoftPath::Projected {
                user: Projector::new(store, "proj_u", soft.user_dim, soft.n_soft, h, Activation::Silu, &mut prng),
                item: Projector::new(store, "proj_i", soft.item_dim, soft.n_soft, h, Activation::Relu, &mut prng),
            }
        } else {
            SoftPath::Direct
        };
        let net = Self {
            vocab,
            lm,
            soft,
            instruction,
        };
        if net.prompt_len() + 1 > lm_cfg.context {
            return Err(Error::Prompt(format!(
                "prompt of {} positions does not fit context {}",
                net.prompt_len(),
                lm_cfg.context
            )));
        }
        Ok(net)
    }

    pub fn n_soft(&self) -> usize {
        match &self.soft {
            SoftPath::Projected { user, .. } => user.n_soft,
            SoftPath::Direct => 1,
        }
    }

    /// Positions before the first target.
    pub fn prompt_len(&self) -> usize {
        self.instruction.len() + 2 * self.n_soft()
    }

    fn direct_row<T: Real>(&self, tape: &mut Tape<T>, v: &[f32]) -> Var {
        let h = self.lm.config.hidden;
        let mut row = vec![T::zero(); h];
        for (r, &x) in row.iter_mut().zip(v) {
            *r = T::of(x as f64);
        }
        tape.constant(Matrix::row_vector(row))
    }

    /// Soft rows `(M_u, M_i)` for a pair of source vectors.
    pub fn soft_rows<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        user: &[f32],
        item: &[f32],
    ) -> Result<(Var, Var)> {
        match &self.soft {
            SoftPath::Projected { user: pu, item: pi } => {
                let u = tape.constant(Matrix::row_vector(user.iter().map(|&v| T::of(v as f64)).collect()));
                let i = tape.constant(Matrix::row_vector(item.iter().map(|&v| T::of(v as f64)).collect()));
                Ok((pu.forward(tape, store, u)?, pi.forward(tape, store, i)?))
            }
            SoftPath::Direct => Ok((self.direct_row(tape, user), self.direct_row(tape, item))),
        }
    }

    /// Logits at every target position of `prompt` (targets×V).
    pub fn target_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prompt: &super::HybridPrompt,
        n_targets: usize,
    ) -> Result<Var> {
        let (mu, mi) = self.soft_rows(tape, store, &prompt.user, &prompt.item)?;
        let mut parts = Vec::with_capacity(4);
        if !prompt.instruction.is_empty() {
            parts.push(self.lm.embed_tokens(tape, store, &prompt.instruction));
        }
        parts.push(mu);
        parts.push(mi);
        // Teacher forcing: every target but the last is also an input.
        let fed = &prompt.targets[..n_targets.saturating_sub(1).min(prompt.targets.len())];
        if !fed.is_empty() {
            parts.push(self.lm.embed_tokens(tape, store, fed));
        }
        let x = tape.concat_rows(&parts);
        let h = self.lm.hidden(tape, store, x)?;
        let len = tape.value(h).rows();
        let last = tape.slice_rows(h, len - n_targets, n_targets);
        Ok(self.lm.logits(tape, store, last))
    }
}

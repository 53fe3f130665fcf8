//! Self-attentive next-item model trained on ID sequences. After
//! pretraining it is frozen and only serves encodings.
//!
//! Item index `i` is token `i + 1`; token 0 is padding and never a target.
//! Sequences run unpadded with positional rows aligned to the right end of
//! the `max_len` window, which gives the same outputs as left padding under
//! a causal mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::checkpoint;
use crate::numerics::nn::{LayerNorm, TransformerBlock};
use crate::numerics::{Adam, AdamConfig, Matrix, ParamId, ParamStore, Real, Rng, Tape, Var};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: [u8; 4] = *b"SFSQ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqRecConfig {
    pub d: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for SeqRecConfig {
    fn default() -> Self {
        Self {
            d: 50,
            num_blocks: 2,
            num_heads: 1,
            max_len: 50,
            dropout: 0.2,
            lr: 1e-4,
            epochs: 10,
            batch: 32,
        }
    }
}

impl SeqRecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_heads == 0 || self.d % self.num_heads != 0 {
            return Err(Error::config(
                "seqrec.d",
                format!("{} is not divisible by {} heads", self.d, self.num_heads),
            ));
        }
        if self.max_len == 0 {
            return Err(Error::config("seqrec.max_len", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("seqrec.dropout", format!("{} not in [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("seqrec.lr", format!("{} is not a positive rate", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("seqrec.batch", "must be positive"));
        }
        Ok(())
    }
}

/// Parameter layout; values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeqRecNet {
    pub config: SeqRecConfig,
    pub num_items: usize,
    pub item_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl SeqRecNet {
    pub fn new(config: &SeqRecConfig, num_items: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let d = config.d;
        let std = 1.0 / (d as f64).sqrt();
        let mut items = Matrix::randn(num_items + 1, d, std, rng);
        items.row_mut(0).fill(0.0);
        let item_emb = store.add("seqrec.item_emb", items);
        let pos_emb = store.add("seqrec.pos_emb", Matrix::randn(config.max_len, d, std, rng));
        let blocks = (0..config.num_blocks)
            .map(|b| {
                TransformerBlock::new(store, &format!("seqrec.block{b}"), d, config.num_heads, d, rng)
            })
            .collect();
        let final_norm = LayerNorm::new(store, "seqrec.ln", d);
        Self {
            config: config.clone(),
            num_items,
            item_emb,
            pos_emb,
            blocks,
            final_norm,
        }
    }

    fn tokens(&self, seq: &[usize]) -> Result<Vec<usize>> {
        if seq.is_empty() {
            return Err(Error::Input("empty sequence".into()));
        }
        seq.iter()
            .map(|&i| {
                if i < self.num_items {
                    Ok(i + 1)
                } else {
                    Err(Error::Input(format!("item index {i} outside catalog of {}", self.num_items)))
                }
            })
            .collect()
    }

    /// Hidden states (m×d) for the most recent `max_len` items of `seq`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seq: &[usize],
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let seq = &seq[seq.len().saturating_sub(self.config.max_len)..];
        let tokens = self.tokens(seq)?;
        let m = tokens.len();
        let items = tape.param(store, self.item_emb);
        let pos = tape.param(store, self.pos_emb);
        let e = tape.gather(items, &tokens);
        let positions: Vec<usize> = (self.config.max_len - m..self.config.max_len).collect();
        let p = tape.gather(pos, &positions);
        let mut x = tape.add(e, p);
        let rate = self.config.dropout;
        if let Some(rng) = dropout.as_deref_mut() {
            x = tape.dropout(x, rate, rng);
        }
        for block in &self.blocks {
            let drop = dropout.as_deref_mut().map(|r| (rate, r));
            x = block.forward(tape, store, x, true, drop);
        }
        Ok(self.final_norm.forward(tape, store, x))
    }

    /// Scores over the item vocabulary (padding excluded), one row per
    /// hidden state.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hidden: Var) -> Var {
        let items = tape.param(store, self.item_emb);
        let targets = tape.slice_rows(items, 1, self.num_items);
        tape.matmul_nt(hidden, targets)
    }

    /// Summed next-item cross-entropy over positions `0..m-1` and the number
    /// of targets it covers.
    pub fn sequence_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seq: &[usize],
        dropout: Option<&mut Rng>,
    ) -> Result<Option<(Var, usize)>> {
        let seq = &seq[seq.len().saturating_sub(self.config.max_len + 1)..];
        if seq.len() < 2 {
            return Ok(None);
        }
        let input = &seq[..seq.len() - 1];
        let h = self.forward(tape, store, input, dropout)?;
        let logits = self.logits(tape, store, h);
        let targets: Vec<(usize, usize)> = seq[1..].iter().copied().enumerate().collect();
        Ok(Some((tape.cross_entropy(logits, &targets), targets.len())))
    }

    /// Mean next-item cross-entropy over every target of every sequence.
    pub fn batch_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seqs: &[&[usize]],
        mut dropout: Option<&mut Rng>,
    ) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        let mut count = 0;
        for seq in seqs {
            if let Some((l, n)) = self.sequence_loss(tape, store, seq, dropout.as_deref_mut())? {
                total = Some(match total {
                    Some(t) => tape.add(t, l),
                    None => l,
                });
                count += n;
            }
        }
        Ok(total.map(|t| tape.scale(t, T::of(1.0 / count as f64))))
    }
}

/// Per-position encodings of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEncoding {
    /// Contextual output at every position (m×d).
    pub e_id: Matrix<f32>,
    /// Output at the final position (1×d).
    pub e_u: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: SeqRecConfig,
    num_items: usize,
    frozen: bool,
}

#[derive(Debug, Clone)]
pub struct SeqRecModel {
    pub net: SeqRecNet,
    pub store: ParamStore,
    pub frozen: bool,
}

impl SeqRecModel {
    pub fn init(config: &SeqRecConfig, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::Input("empty catalog".into()));
        }
        let mut store = ParamStore::new();
        let net = SeqRecNet::new(config, num_items, &mut store, &mut Rng::new(seed).fork(1));
        Ok(Self {
            net,
            store,
            frozen: false,
        })
    }

    pub fn num_items(&self) -> usize {
        self.net.num_items
    }

    pub fn dim(&self) -> usize {
        self.net.config.d
    }

    pub fn freeze(&mut self) {
        self.store.set_all_trainable(false);
        self.frozen = true;
    }

    /// Item embedding rows without the padding row (t×d).
    pub fn item_table(&self) -> Matrix<f32> {
        let all = self.store.value(self.net.item_emb);
        let idx: Vec<usize> = (1..=self.num_items()).collect();
        all.select_rows(&idx).expect("rows in range")
    }

    pub fn encode_sequence(&self, seq: &[usize]) -> Result<SequenceEncoding> {
        let mut tape = Tape::new();
        let h = self.net.forward(&mut tape, &self.store, seq, None)?;
        let e_id = tape.value(h).clone();
        let e_u = e_id.select_rows(&[e_id.rows() - 1])?;
        Ok(SequenceEncoding { e_id, e_u })
    }

    /// User representation with the last interaction removed.
    pub fn encode_user_minus_last(&self, seq: &[usize]) -> Result<Matrix<f32>> {
        if seq.len() < 2 {
            return Err(Error::Input(format!(
                "need at least 2 items to drop the last, got {}",
                seq.len()
            )));
        }
        Ok(self.encode_sequence(&seq[..seq.len() - 1])?.e_u)
    }

    /// Scores for every item after `seq`.
    pub fn scores(&self, seq: &[usize]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let h = self.net.forward(&mut tape, &self.store, seq, None)?;
        let m = tape.value(h).rows();
        let last = tape.slice_rows(h, m - 1, 1);
        let logits = self.net.logits(&mut tape, &self.store, last);
        Ok(tape.value(logits).data().to_vec())
    }

    pub fn predict_next(&self, seq: &[usize]) -> Result<usize> {
        let s = self.scores(seq)?;
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(CHECKPOINT_KIND, &self.header(), &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, store): (Header, _) = checkpoint::decode(CHECKPOINT_KIND, bytes)?;
        Self::from_parts(&h.config, h.num_items, h.frozen, &store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.header(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, store): (Header, _) = checkpoint::load(path, CHECKPOINT_KIND)?;
        Self::from_parts(&h.config, h.num_items, h.frozen, &store)
    }

    fn header(&self) -> Header {
        Header {
            config: self.net.config.clone(),
            num_items: self.num_items(),
            frozen: self.frozen,
        }
    }

    pub(crate) fn from_parts(config: &SeqRecConfig, num_items: usize, frozen: bool, store: &ParamStore) -> Result<Self> {
        let mut m = Self::init(config, num_items, 0)?;
        m.store.load_values(store)?;
        m.frozen = frozen;
        Ok(m)
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Train on next-item prediction with causal masking, then freeze.
pub fn pretrain(
    seqs: &[Vec<usize>],
    num_items: usize,
    cfg: &SeqRecConfig,
    seed: u64,
) -> Result<(SeqRecModel, PretrainLog)> {
    let mut model = SeqRecModel::init(cfg, num_items, seed)?;
    let long = seqs.iter().filter(|s| s.len() > cfg.max_len + 1).count();
    if long > 0 {
        log::warn!("{long} sequences longer than max_len {}; keeping the most recent items", cfg.max_len);
    }
    let root = Rng::new(seed);
    let mut order: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].len() >= 2).collect();
    let mut adam = Adam::new(&model.store, AdamConfig::with_lr(cfg.lr));
    let mut log = PretrainLog { epoch_loss: Vec::new() };
    for epoch in 0..cfg.epochs {
        let mut shuffle = root.fork(100 + epoch as u64);
        let mut drop_rng = root.fork(10_000 + epoch as u64);
        shuffle.shuffle(&mut order);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let mut tape = Tape::new();
            let drop = (cfg.dropout > 0.0).then_some(&mut drop_rng);
            let Some(loss) = model.net.batch_loss(&mut tape, &model.store, &batch, drop)? else {
                continue;
            };
            let value = tape.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Training {
                    stage: "pretrain",
                    epoch,
                    msg: format!("loss is {value}"),
                });
            }
            tape.backward(loss);
            tape.accumulate_into(&mut model.store);
            adam.step(&mut model.store)?;
            sum += value;
            batches += 1;
        }
        let mean = if batches > 0 { sum / batches as f64 } else { 0.0 };
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    model.freeze();
    Ok((model, log))
}

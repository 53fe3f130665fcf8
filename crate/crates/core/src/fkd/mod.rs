//! Fact-counter distillation between the ID view (frozen sequential model
//! outputs) and the text view (synchronized item rows) of a user sequence.
//!
//! Per user, with `O = Enc(·)` applied row-wise and mean pooling over
//! positions:
//!
//! ```text
//! D      = mean(Enc_id(E))  − mean(Enc_text(G))        factual
//! D̂      = mean(Enc_id(Ê))  − mean(Enc_text(Ĝ))        counterfactual
//! L_kd   = 1/|U| Σ |D − D̂|²
//! L_t_re = MSE(G, Dec_text(Enc_text(G)))
//! L_i_re = MSE(E, Dec_id(Enc_id(E)))
//! L_rec  = −Σ [log σ(⟨E^{u−1}, O⁺⟩) + log σ(−⟨E^{u−1}, O⁻⟩)]
//! L      = L_kd + α L_t_re + β L_i_re + L_rec
//! ```
//!
//! `O⁺` / `O⁻` are the decoded ID encodings at the final position of the
//! factual / counterfactual sequence.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingMatrix, Stage};
use crate::numerics::checkpoint;
use crate::numerics::nn::Mlp;
use crate::numerics::{Activation, Adam, AdamConfig, Matrix, ParamStore, Real, Rng, Tape, Var};
use crate::seqrec::SeqRecModel;
use crate::{Error, Result};

pub const CHECKPOINT_KIND: [u8; 4] = *b"SFKD";

/// Scores entering the recommendation loss are clamped to this magnitude.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FkdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub d_prime: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negative_seed: u64,
    /// Also pass the item's synchronized text row through `Enc_text` when
    /// building the enhanced item table.
    pub fuse_text: bool,
}

impl Default for FkdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.2,
            d_prime: 128,
            batch: 32,
            epochs: 10,
            lr: 1e-4,
            negative_seed: 0,
            fuse_text: false,
        }
    }
}

impl FkdConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("fkd.alpha", self.alpha), ("fkd.beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(k, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.d_prime == 0 {
            return Err(Error::config("fkd.d_prime", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("fkd.batch", "must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("fkd.lr", format!("{} is not a positive rate", self.lr)));
        }
        Ok(())
    }
}

/// Encoder and decoder layouts for both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct FkdNet {
    pub enc_id: Mlp,
    pub enc_text: Mlp,
    pub dec_id: Mlp,
    pub dec_text: Mlp,
}

impl FkdNet {
    pub fn new(store: &mut ParamStore, d: usize, z: usize, d_prime: usize, rng: &mut Rng) -> Self {
        let act = Activation::Gelu;
        Self {
            enc_id: Mlp::new(store, "fkd.enc_id", (d, d_prime, d_prime), act, rng),
            enc_text: Mlp::new(store, "fkd.enc_text", (z, d_prime, d_prime), act, rng),
            dec_id: Mlp::new(store, "fkd.dec_id", (d_prime, d_prime, d), act, rng),
            dec_text: Mlp::new(store, "fkd.dec_text", (d_prime, d_prime, z), act, rng),
        }
    }

    /// All four maps are exact identities (requires `d = z = d′`).
    pub fn identity(store: &mut ParamStore, n: usize) -> Self {
        Self {
            enc_id: Mlp::identity(store, "fkd.enc_id", n),
            enc_text: Mlp::identity(store, "fkd.enc_text", n),
            dec_id: Mlp::identity(store, "fkd.dec_id", n),
            dec_text: Mlp::identity(store, "fkd.dec_text", n),
        }
    }

    pub fn d(&self) -> usize {
        self.enc_id.input_dim()
    }

    pub fn z(&self) -> usize {
        self.enc_text.input_dim()
    }
}

/// Inputs of one user for one epoch. All matrices are constants for the
/// distillation model.
#[derive(Debug, Clone, PartialEq)]
pub struct UserExample {
    /// ID encodings of the factual sequence (m×d).
    pub e: Matrix<f32>,
    /// Synchronized text rows of the factual sequence (m×z).
    pub g: Matrix<f32>,
    /// ID encodings of the counterfactual sequence.
    pub e_cf: Matrix<f32>,
    /// Synchronized text rows of the counterfactual sequence.
    pub g_cf: Matrix<f32>,
    /// User representation with the last item removed (1×d).
    pub e_minus: Matrix<f32>,
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub kd: f64,
    pub t_re: f64,
    pub i_re: f64,
    pub rec: f64,
    pub total: f64,
}

/// Tape nodes of the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub kd: Var,
    pub t_re: Var,
    pub i_re: Var,
    pub rec: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossParts {
        LossParts {
            kd: tape.scalar(self.kd).f64(),
            t_re: tape.scalar(self.t_re).f64(),
            i_re: tape.scalar(self.i_re).f64(),
            rec: tape.scalar(self.rec).f64(),
            total: tape.scalar(self.total).f64(),
        }
    }
}

fn constant<T: Real>(tape: &mut Tape<T>, m: &Matrix<f32>) -> Var {
    tape.constant(m.cast())
}

/// `mean(Enc_id(E)) − mean(Enc_text(G))`.
pub fn mediator<T: Real>(net: &FkdNet, tape: &mut Tape<T>, store: &ParamStore<T>, e: Var, g: Var) -> Result<Var> {
    let (me, mg) = (tape.value(e).rows(), tape.value(g).rows());
    if me == 0 || mg == 0 {
        return Err(Error::Input("mediator of an empty sequence".into()));
    }
    let oi = net.enc_id.forward(tape, store, e);
    let ot = net.enc_text.forward(tape, store, g);
    Ok(mediator_from(tape, oi, ot))
}

fn mediator_from<T: Real>(tape: &mut Tape<T>, o_id: Var, o_text: Var) -> Var {
    let a = tape.mean_rows(o_id);
    let b = tape.mean_rows(o_text);
    tape.sub(a, b)
}

/// Mean over users of `|D − D̂|²`.
pub fn kd_loss<T: Real>(tape: &mut Tape<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Input("kd loss of an empty batch".into()));
    }
    let mut total = None;
    for &(d, dh) in pairs {
        let diff = tape.sub(d, dh);
        let sq = tape.sum_sq(diff);
        total = Some(match total {
            Some(t) => tape.add(t, sq),
            None => sq,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), T::of(1.0 / pairs.len() as f64)))
}

/// Mean squared error over every entry of the listed `(target, output)`
/// pairs together.
pub fn mse<T: Real>(tape: &mut Tape<T>, pairs: &[(Var, Var)]) -> Var {
    let mut total = None;
    let mut count = 0;
    for &(target, out) in pairs {
        count += tape.value(target).len();
        let diff = tape.sub(out, target);
        let sq = tape.sum_sq(diff);
        total = Some(match total {
            Some(t) => tape.add(t, sq),
            None => sq,
        });
    }
    let total = total.expect("mse of nothing");
    tape.scale(total, T::of(1.0 / count.max(1) as f64))
}

/// `−[log σ(s⁺) + log σ(−s⁻)]` for one user, scores clamped.
pub fn rec_term<T: Real>(tape: &mut Tape<T>, e_minus: Var, pos: Var, neg: Var) -> Var {
    let lim = T::of(LOGIT_CLAMP);
    let sp = tape.matmul_nt(e_minus, pos);
    let sp = tape.clamp(sp, -lim, lim);
    let sn = tape.matmul_nt(e_minus, neg);
    let sn = tape.clamp(sn, -lim, lim);
    let sn = tape.scale(sn, -T::one());
    let a = tape.log_sigmoid(sp);
    let b = tape.log_sigmoid(sn);
    let s = tape.add(a, b);
    tape.scale(s, -T::one())
}

/// Record the full objective for a batch of users.
pub fn total_loss<T: Real>(
    net: &FkdNet,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    batch: &[UserExample],
    alpha: f64,
    beta: f64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut pairs = Vec::with_capacity(batch.len());
    let mut text_pairs = Vec::with_capacity(batch.len());
    let mut id_pairs = Vec::with_capacity(batch.len());
    let mut rec = None;
    for u in batch {
        if u.e.rows() == 0 || u.e_cf.rows() == 0 {
            return Err(Error::Input("empty sequence in batch".into()));
        }
        let e = constant(tape, &u.e);
        let g = constant(tape, &u.g);
        let e_cf = constant(tape, &u.e_cf);
        let g_cf = constant(tape, &u.g_cf);
        let e_minus = constant(tape, &u.e_minus);

        let o_id = net.enc_id.forward(tape, store, e);
        let o_text = net.enc_text.forward(tape, store, g);
        let o_id_cf = net.enc_id.forward(tape, store, e_cf);
        let o_text_cf = net.enc_text.forward(tape, store, g_cf);
        let d = mediator_from(tape, o_id, o_text);
        let d_cf = mediator_from(tape, o_id_cf, o_text_cf);
        pairs.push((d, d_cf));

        let rec_text = net.dec_text.forward(tape, store, o_text);
        text_pairs.push((g, rec_text));
        let rec_id = net.dec_id.forward(tape, store, o_id);
        id_pairs.push((e, rec_id));

        let pos = tape.slice_rows(rec_id, u.e.rows() - 1, 1);
        let last_cf = tape.slice_rows(o_id_cf, u.e_cf.rows() - 1, 1);
        let neg = net.dec_id.forward(tape, store, last_cf);
        let r = rec_term(tape, e_minus, pos, neg);
        rec = Some(match rec {
            Some(t) => tape.add(t, r),
            None => r,
        });
    }
    let kd = kd_loss(tape, &pairs)?;
    let t_re = mse(tape, &text_pairs);
    let i_re = mse(tape, &id_pairs);
    let rec = rec.expect("non-empty batch");
    let a = tape.scale(t_re, T::of(alpha));
    let b = tape.scale(i_re, T::of(beta));
    let s = tape.add(kd, a);
    let s = tape.add(s, b);
    let total = tape.add(s, rec);
    Ok(LossVars {
        kd,
        t_re,
        i_re,
        rec,
        total,
    })
}

/// `m` items the user never interacted with: without replacement when
/// enough are left, otherwise with replacement.
pub fn counterfactual_sample(seq: &[usize], num_items: usize, m: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut seen = vec![false; num_items];
    for &i in seq {
        if i >= num_items {
            return Err(Error::Input(format!("item {i} outside catalog of {num_items}")));
        }
        seen[i] = true;
    }
    let pool: Vec<usize> = (0..num_items).filter(|&i| !seen[i]).collect();
    if pool.is_empty() {
        return Err(Error::Sampling("user interacted with the whole catalog".into()));
    }
    if pool.len() >= m {
        Ok(rng.sample_indices(pool.len(), m).into_iter().map(|k| pool[k]).collect())
    } else {
        Ok((0..m).map(|_| pool[rng.below(pool.len())]).collect())
    }
}

/// Synchronized text rows for a sequence.
pub fn text_rows(synced: &EmbeddingMatrix, seq: &[usize]) -> Result<Matrix<f32>> {
    if let Some(&i) = seq.iter().find(|&&i| i >= synced.rows()) {
        return Err(Error::State(format!(
            "no synchronized row for item {i} ({} rows)",
            synced.rows()
        )));
    }
    synced.values.select_rows(seq)
}

/// ID and text views of a user's sequence.
pub fn sequence_reps(seqrec: &SeqRecModel, synced: &EmbeddingMatrix, seq: &[usize]) -> Result<(Matrix<f32>, Matrix<f32>)> {
    let seq = &seq[seq.len().saturating_sub(seqrec.net.config.max_len)..];
    let e = seqrec.encode_sequence(seq)?.e_id;
    Ok((e, text_rows(synced, seq)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: FkdConfig,
    d: usize,
    z: usize,
    identity: bool,
}

#[derive(Debug, Clone)]
pub struct FkdModel {
    pub config: FkdConfig,
    pub net: FkdNet,
    pub store: ParamStore,
    identity: bool,
}

impl FkdModel {
    pub fn init(config: &FkdConfig, d: usize, z: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = FkdNet::new(&mut store, d, z, config.d_prime, &mut Rng::new(seed).fork(2));
        Ok(Self {
            config: config.clone(),
            net,
            store,
            identity: false,
        })
    }

    /// Square model whose encoders and decoders start as identity maps.
    pub fn identity(config: &FkdConfig, n: usize) -> Result<Self> {
        let config = FkdConfig { d_prime: n, ..config.clone() };
        config.validate()?;
        let mut store = ParamStore::new();
        let net = FkdNet::identity(&mut store, n);
        Ok(Self {
            config,
            net,
            store,
            identity: true,
        })
    }

    pub fn loss(&self, batch: &[UserExample]) -> Result<LossParts> {
        let mut tape = Tape::new();
        let v = total_loss(&self.net, &mut tape, &self.store, batch, self.config.alpha, self.config.beta)?;
        Ok(v.values(&tape))
    }

    /// `Dec_id(Enc_id(x))` row-wise, or the text-fused variant when
    /// configured; `text` must then hold one row per input row.
    pub fn enhance(&self, ids: &Matrix<f32>, text: Option<&Matrix<f32>>) -> Result<Matrix<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(ids.clone());
        let mut code = self.net.enc_id.forward(&mut tape, &self.store, x);
        if self.config.fuse_text {
            let text = text.ok_or_else(|| Error::State("text-fused enhancement needs text rows".into()))?;
            if text.rows() != ids.rows() {
                return Err(Error::Dimension(format!("{} text rows for {} items", text.rows(), ids.rows())));
            }
            let t = tape.constant(text.clone());
            let ct = self.net.enc_text.forward(&mut tape, &self.store, t);
            let s = tape.add(code, ct);
            code = tape.scale(s, 0.5);
        }
        let out = self.net.dec_id.forward(&mut tape, &self.store, code);
        Ok(tape.value(out).clone())
    }

    /// Enhanced embedding of every catalog item (t×d).
    pub fn enhanced_table(&self, seqrec: &SeqRecModel, synced: Option<&EmbeddingMatrix>) -> Result<Matrix<f32>> {
        let ids = seqrec.item_table();
        match synced {
            Some(s) => self.enhance(&ids, Some(&s.values)),
            None => self.enhance(&ids, None),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(CHECKPOINT_KIND, &self.header(), &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, store): (Header, _) = checkpoint::decode(CHECKPOINT_KIND, bytes)?;
        Self::from_parts(h, &store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.header(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, store): (Header, _) = checkpoint::load(path, CHECKPOINT_KIND)?;
        Self::from_parts(h, &store)
    }

    fn header(&self) -> Header {
        Header {
            config: self.config.clone(),
            d: self.net.d(),
            z: self.net.z(),
            identity: self.identity,
        }
    }

    fn from_parts(h: Header, store: &ParamStore) -> Result<Self> {
        let mut m = if h.identity {
            Self::identity(&h.config, h.d)?
        } else {
            Self::init(&h.config, h.d, h.z, 0)?
        };
        m.store.load_values(store)?;
        Ok(m)
    }
}

/// Per-epoch means of the batch loss components.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FkdLog {
    pub epochs: Vec<LossParts>,
}

impl FkdLog {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,kd,t_re,i_re,rec,total")?;
        for (i, p) in self.epochs.iter().enumerate() {
            writeln!(w, "{i},{},{},{},{},{}", p.kd, p.t_re, p.i_re, p.rec, p.total)?;
        }
        Ok(())
    }
}

/// Fixed per-user inputs of distillation.
struct Prepared {
    seq: Vec<usize>,
    e: Matrix<f32>,
    g: Matrix<f32>,
    e_minus: Matrix<f32>,
}

/// Train the distillation model on users' sequences (length ≥ 2).
pub fn train_fkd(
    seqs: &[Vec<usize>],
    seqrec: &SeqRecModel,
    synced: &EmbeddingMatrix,
    cfg: &FkdConfig,
    seed: u64,
) -> Result<(FkdModel, FkdLog)> {
    if !seqrec.frozen {
        return Err(Error::State("sequential model must be frozen before distillation".into()));
    }
    if synced.rows() != seqrec.num_items() {
        return Err(Error::State(format!(
            "{} synchronized rows for {} items",
            synced.rows(),
            seqrec.num_items()
        )));
    }
    let mut model = FkdModel::init(cfg, seqrec.dim(), synced.dim(), seed)?;
    let max_len = seqrec.net.config.max_len;
    let users = seqs
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let seq = s[s.len().saturating_sub(max_len)..].to_vec();
            let (e, g) = sequence_reps(seqrec, synced, &seq)?;
            let e_minus = seqrec.encode_user_minus_last(&seq)?;
            Ok(Prepared { seq, e, g, e_minus })
        })
        .collect::<Result<Vec<_>>>()?;
    if users.is_empty() && cfg.epochs > 0 {
        return Err(Error::Input("no user sequence of length >= 2".into()));
    }
    let root = Rng::new(seed);
    let neg_root = Rng::new(cfg.negative_seed);
    let mut adam = Adam::new(&model.store, AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..users.len()).collect();
    let mut log = FkdLog::default();
    for epoch in 0..cfg.epochs {
        root.fork(100 + epoch as u64).shuffle(&mut order);
        let mut neg_rng = neg_root.fork(epoch as u64);
        let mut examples = Vec::with_capacity(users.len());
        for u in &users {
            let cf = counterfactual_sample(&u.seq, seqrec.num_items(), u.seq.len(), &mut neg_rng)?;
            let (e_cf, g_cf) = sequence_reps(seqrec, synced, &cf)?;
            examples.push(UserExample {
                e: u.e.clone(),
                g: u.g.clone(),
                e_cf,
                g_cf,
                e_minus: u.e_minus.clone(),
            });
        }
        let mut sum = LossParts::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<UserExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut tape = Tape::new();
            let v = total_loss(&model.net, &mut tape, &model.store, &batch, cfg.alpha, cfg.beta)?;
            let p = v.values(&tape);
            if !p.total.is_finite() {
                return Err(Error::Training {
                    stage: "distill",
                    epoch,
                    msg: format!("loss is {}", p.total),
                });
            }
            tape.backward(v.total);
            tape.accumulate_into(&mut model.store);
            adam.step(&mut model.store)?;
            sum.kd += p.kd;
            sum.t_re += p.t_re;
            sum.i_re += p.i_re;
            sum.rec += p.rec;
            sum.total += p.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let mean = LossParts {
            kd: sum.kd / n,
            t_re: sum.t_re / n,
            i_re: sum.i_re / n,
            rec: sum.rec / n,
            total: sum.total / n,
        };
        log::info!("distill epoch {epoch}: total {:.4}", mean.total);
        log.epochs.push(mean);
    }
    Ok((model, log))
}

/// Wrap a table as synchronized rows (for ablations that skip federation).
pub fn as_synced(values: Matrix<f32>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(Stage::Synchronized, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(rng: &mut Rng, m: usize, d: usize, z: usize) -> UserExample {
        UserExample {
            e: Matrix::randn(m, d, 1.0, rng),
            g: Matrix::randn(m, z, 1.0, rng),
            e_cf: Matrix::randn(m, d, 1.0, rng),
            g_cf: Matrix::randn(m, z, 1.0, rng),
            e_minus: Matrix::randn(1, d, 1.0, rng),
        }
    }

    #[test]
    fn counterfactual_is_disjoint_and_forced() {
        let mut rng = Rng::new(1);
        let mut s = counterfactual_sample(&[0], 3, 2, &mut rng).unwrap();
        s.sort();
        assert_eq!(s, vec![1, 2]);
        for seed in 0..20 {
            let seq = [1, 4, 4, 7];
            let s = counterfactual_sample(&seq, 10, 4, &mut Rng::new(seed)).unwrap();
            assert!(s.iter().all(|i| !seq.contains(i)));
            assert_eq!(s, counterfactual_sample(&seq, 10, 4, &mut Rng::new(seed)).unwrap());
        }
        let s = counterfactual_sample(&[0, 1], 3, 4, &mut rng).unwrap();
        assert_eq!(s, vec![2; 4]);
        assert!(matches!(counterfactual_sample(&[0, 1, 2], 3, 2, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn kd_loss_values() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Matrix::row_vector(vec![1.0, 2.0]));
        let z = t.constant(Matrix::row_vector(vec![0.0, 0.0]));
        let l = kd_loss(&mut t, &[(a, z)]).unwrap();
        assert_eq!(t.scalar(l), 5.0);
        let l = kd_loss(&mut t, &[(a, a), (z, z)]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        assert!(kd_loss(&mut t, &[]).is_err());
    }

    #[test]
    fn rec_term_values() {
        let mut t = Tape::<f64>::new();
        let u = t.constant(Matrix::row_vector(vec![1.0, 0.0]));
        let zero = t.constant(Matrix::row_vector(vec![0.0, 0.0]));
        let l = rec_term(&mut t, u, zero, zero);
        assert!((t.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let p = t.constant(Matrix::row_vector(vec![20.0, 0.0]));
        let n = t.constant(Matrix::row_vector(vec![-20.0, 5.0]));
        let l = rec_term(&mut t, u, p, n);
        assert!(t.scalar(l) < 1e-3);
        // Scalar oracle on a random fixture.
        let mut rng = Rng::new(3);
        let (uv, pv, nv) = (
            Matrix::<f64>::randn(1, 5, 1.0, &mut rng),
            Matrix::<f64>::randn(1, 5, 1.0, &mut rng),
            Matrix::<f64>::randn(1, 5, 1.0, &mut rng),
        );
        let dot = |a: &Matrix<f64>, b: &Matrix<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = -((sig(dot(&uv, &pv))).ln() + (1.0 - sig(dot(&uv, &nv))).ln());
        let (a, b, c) = (t.constant(uv), t.constant(pv), t.constant(nv));
        let l = rec_term(&mut t, a, b, c);
        assert!((t.scalar(l) - want).abs() < 1e-6);
    }

    #[test]
    fn mse_matches_elementwise_oracle() {
        let mut rng = Rng::new(5);
        let a = Matrix::<f64>::randn(3, 4, 1.0, &mut rng);
        let b = Matrix::<f64>::randn(3, 4, 1.0, &mut rng);
        let want: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 12.0;
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let l = mse(&mut t, &[(va, vb)]);
        assert!((t.scalar(l) - want).abs() < 1e-6);
        let ones = t.constant(Matrix::filled(2, 3, 1.0));
        let zeros = t.constant(Matrix::zeros(2, 3));
        let l = mse(&mut t, &[(ones, zeros)]);
        assert_eq!(t.scalar(l), 1.0);
    }

    #[test]
    fn mediator_hand_value_and_permutation_invariance() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(2);
        let net = FkdNet::new(&mut store, 1, 1, 1, &mut rng);
        // Make both encoders linear with known weights: Enc_id(x) = 2x, Enc_text(x) = 3x + 1.
        let set = |s: &mut ParamStore, m: &Mlp, w1: f32, b1: f32| {
            s.get_mut(m.first.w).value = Matrix::filled(1, 1, w1);
            s.get_mut(m.first.b).value = Matrix::filled(1, 1, b1);
            s.get_mut(m.second.w).value = Matrix::filled(1, 1, 1.0);
            s.get_mut(m.second.b).value = Matrix::filled(1, 1, 0.0);
        };
        let mut net = net;
        net.enc_id.activation = Activation::Identity;
        net.enc_text.activation = Activation::Identity;
        set(&mut store, &net.enc_id, 2.0, 0.0);
        set(&mut store, &net.enc_text, 3.0, 1.0);
        let mut t = Tape::new();
        let e = t.constant(Matrix::filled(1, 1, 1.5));
        let g = t.constant(Matrix::filled(1, 1, 0.5));
        let d = mediator(&net, &mut t, &store, e, g).unwrap();
        assert_eq!(t.scalar(d), 3.0 - 2.5);

        let mut store = ParamStore::new();
        let net = FkdNet::new(&mut store, 3, 4, 5, &mut rng);
        let e = Matrix::randn(4, 3, 1.0, &mut rng);
        let g = Matrix::randn(4, 4, 1.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let mut t = Tape::new();
        let (ve, vg) = (t.constant(e.clone()), t.constant(g.clone()));
        let a = mediator(&net, &mut t, &store, ve, vg).unwrap();
        let (pe, pg) = (t.constant(e.select_rows(&perm).unwrap()), t.constant(g.select_rows(&perm).unwrap()));
        let b = mediator(&net, &mut t, &store, pe, pg).unwrap();
        assert!(t.value(a).max_abs_diff(t.value(b)).unwrap() < 1e-5);
        let empty = t.constant(Matrix::zeros(0, 3));
        assert!(mediator(&net, &mut t, &store, empty, vg).is_err());
    }

    #[test]
    fn identity_model_has_zero_reconstruction_and_equal_mediators() {
        let m = FkdModel::identity(&FkdConfig::default(), 4).unwrap();
        let mut rng = Rng::new(7);
        let mut u = example(&mut rng, 3, 4, 4);
        u.e_cf = u.e.clone();
        u.g_cf = u.g.clone();
        let p = m.loss(&[u]).unwrap();
        assert_eq!(p.t_re, 0.0);
        assert_eq!(p.i_re, 0.0);
        assert_eq!(p.kd, 0.0);
    }

    #[test]
    fn zero_scores_and_no_recon_weight_give_two_ln_two_per_user() {
        let cfg = FkdConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
        let m = FkdModel::identity(&cfg, 3).unwrap();
        let mut rng = Rng::new(1);
        let batch: Vec<UserExample> = (0..4)
            .map(|_| {
                let mut u = example(&mut rng, 2, 3, 3);
                u.e_cf = u.e.clone();
                u.g_cf = u.g.clone();
                u.e_minus = Matrix::zeros(1, 3);
                u
            })
            .collect();
        let p = m.loss(&batch).unwrap();
        assert!((p.total - 4.0 * 2.0 * 2f64.ln()).abs() < 1e-5, "{p:?}");
    }

    #[test]
    fn total_is_weighted_sum() {
        let cfg = FkdConfig { d_prime: 6, ..Default::default() };
        let m = FkdModel::init(&cfg, 4, 5, 3).unwrap();
        let mut rng = Rng::new(9);
        let batch: Vec<UserExample> = (0..3).map(|_| example(&mut rng, 3, 4, 5)).collect();
        let p = m.loss(&batch).unwrap();
        let want = p.kd + cfg.alpha * p.t_re + cfg.beta * p.i_re + p.rec;
        assert!((p.total - want).abs() < 1e-6 * want.abs().max(1.0));
    }

    #[test]
    fn csv_header() {
        let log = FkdLog { epochs: vec![LossParts { total: 1.5, ..Default::default() }] };
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("epoch,kd,t_re,i_re,rec,total\n0,0,0,0,0,1.5\n"));
    }
}

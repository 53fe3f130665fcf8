//! Soft-prompt next-item prediction with a small decoder LM.
//!
//! A prompt is `[instruction tokens][M_u][M_i]` followed by the target item
//! token; the loss covers target positions only.

mod lm;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use lm::{PromptNet, Projector, SoftPath, SoftSpec, TinyLm, TinyLmConfig};
pub use vocab::{Vocab, END, PAD};

use crate::datamodel::SplitSet;
use crate::numerics::checkpoint;
use crate::numerics::{Adam, AdamConfig, Matrix, ParamStore, ParamTensor, Real, Rng, Tape, Var};
use crate::seqrec::{SeqRecConfig, SeqRecModel};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: [u8; 4] = *b"SFS2";
pub const DEFAULT_TEMPLATE: &str = "user history next item";

#[derive(Debug, Clone, PartialEq)]
pub struct HybridPrompt {
    pub instruction: Vec<usize>,
    /// Source vector of the user soft slot.
    pub user: Vec<f32>,
    /// Source vector of the item soft slot.
    pub item: Vec<f32>,
    /// Target token ids; empty for generation.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub template: String,
    pub n_soft: usize,
    pub freeze_backbone: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Training examples per user: the last `max_prefixes` prefixes of the
    /// training sequence, each predicting its next item.
    pub max_prefixes: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template: DEFAULT_TEMPLATE.to_string(),
            n_soft: 1,
            freeze_backbone: true,
            epochs: 5,
            lr: 1e-4,
            batch: 32,
            max_prefixes: 4,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("prompt.lr", format!("{} is not a positive rate", self.lr)));
        }
        if self.batch == 0 || self.max_prefixes == 0 {
            return Err(Error::config("prompt.batch", "batch and max_prefixes must be positive"));
        }
        Ok(())
    }
}

/// One supervised example before prompt assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: Vec<f32>,
    pub item: Vec<f32>,
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct PromptModel {
    pub net: PromptNet,
    pub store: ParamStore,
    pub config: PromptConfig,
    pub lm_config: TinyLmConfig,
    pub soft: SoftSpec,
}

impl PromptModel {
    pub fn init(lm_cfg: &TinyLmConfig, cfg: &PromptConfig, num_items: usize, soft: SoftSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let soft = SoftSpec { n_soft: cfg.n_soft, ..soft };
        let mut store = ParamStore::new();
        let net = PromptNet::new(lm_cfg, &cfg.template, num_items, soft, &mut store, &mut Rng::new(seed).fork(3))?;
        let mut m = Self {
            net,
            store,
            config: cfg.clone(),
            lm_config: lm_cfg.clone(),
            soft,
        };
        m.apply_freeze();
        Ok(m)
    }

    fn apply_freeze(&mut self) {
        self.store.set_trainable_prefix("lm.", !self.config.freeze_backbone);
    }

    pub fn vocab(&self) -> &Vocab {
        &self.net.vocab
    }

    /// Fingerprint of the backbone LM parameters only.
    pub fn lm_fingerprint(&self) -> Vec<u64> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("lm."))
            .flat_map(|(_, p)| p.value.data().iter().map(|v| (*v as f64).to_bits()))
            .collect()
    }
}

pub fn build_prompt(net: &PromptNet, user: &[f32], item: &[f32], target_item: Option<usize>) -> Result<HybridPrompt> {
    let targets = match target_item {
        Some(i) => vec![net.vocab.item_token(i)?],
        None => Vec::new(),
    };
    let len = net.prompt_len() + targets.len().max(1);
    if len > net.lm.config.context {
        return Err(Error::Prompt(format!(
            "prompt of {len} positions exceeds context {}",
            net.lm.config.context
        )));
    }
    Ok(HybridPrompt {
        instruction: net.instruction.clone(),
        user: user.to_vec(),
        item: item.to_vec(),
        targets,
    })
}

/// `−Σ log p(target)` over the prompt's target positions.
pub fn ce_loss<T: Real>(net: &PromptNet, tape: &mut Tape<T>, store: &ParamStore<T>, prompt: &HybridPrompt) -> Result<Var> {
    if prompt.targets.is_empty() {
        return Err(Error::Prompt("prompt has no target".into()));
    }
    let n = prompt.targets.len();
    let logits = net.target_logits(tape, store, prompt, n)?;
    let targets: Vec<(usize, usize)> = prompt.targets.iter().copied().enumerate().collect();
    Ok(tape.cross_entropy(logits, &targets))
}

/// Greedy token at the first generation position.
pub fn generate_next(model: &PromptModel, prompt: &HybridPrompt) -> Result<usize> {
    let p = HybridPrompt {
        targets: Vec::new(),
        ..prompt.clone()
    };
    let mut tape = Tape::new();
    let logits = model.net.target_logits(&mut tape, &model.store, &p, 1)?;
    let row = tape.value(logits).row(0);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
}

fn mean_loss(model: &PromptModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for e in examples {
        let p = build_prompt(&model.net, &e.user, &e.item, Some(e.target))?;
        let mut tape = Tape::new();
        let l = ce_loss(&model.net, &mut tape, &model.store, &p)?;
        total += tape.scalar(l) as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Minimise the target cross-entropy over `train` with Adam.
pub fn finetune(model: &mut PromptModel, train: &[Example], valid: &[Example], seed: u64) -> Result<FinetuneLog> {
    let cfg = model.config.clone();
    model.apply_freeze();
    let prompts = train
        .iter()
        .map(|e| build_prompt(&model.net, &e.user, &e.item, Some(e.target)))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(&model.store, AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let root = Rng::new(seed);
    let mut log = FinetuneLog {
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        root.fork(200 + epoch as u64).shuffle(&mut order);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let mut total = None;
            for &i in chunk {
                let l = ce_loss(&model.net, &mut tape, &model.store, &prompts[i])?;
                total = Some(match total {
                    Some(t) => tape.add(t, l),
                    None => l,
                });
            }
            let Some(total) = total else { continue };
            let loss = tape.scale(total, 1.0 / chunk.len() as f32);
            let value = tape.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Training {
                    stage: "finetune",
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
        let train_loss = if batches > 0 { sum / batches as f64 } else { 0.0 };
        let valid_loss = mean_loss(model, valid)?;
        log::info!("finetune epoch {epoch}: train {train_loss:.4} valid {valid_loss:.4}");
        log.train_loss.push(train_loss);
        log.valid_loss.push(valid_loss);
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub hit_at_1: f64,
    pub valid_ratio: f64,
    pub users: usize,
}

/// Score predicted tokens against target items.
pub fn score(vocab: &Vocab, predicted: &[usize], targets: &[usize]) -> Result<EvalResult> {
    if predicted.is_empty() || predicted.len() != targets.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    let mut hits = 0;
    let mut valid = 0;
    for (&p, &t) in predicted.iter().zip(targets) {
        if let Some(item) = vocab.token_item(p) {
            valid += 1;
            hits += usize::from(item == t);
        }
    }
    let n = predicted.len() as f64;
    Ok(EvalResult {
        hit_at_1: hits as f64 / n,
        valid_ratio: valid as f64 / n,
        users: predicted.len(),
    })
}

pub fn evaluate(model: &PromptModel, examples: &[Example]) -> Result<EvalResult> {
    let mut predicted = Vec::with_capacity(examples.len());
    for e in examples {
        let p = build_prompt(&model.net, &e.user, &e.item, None)?;
        predicted.push(generate_next(model, &p)?);
    }
    let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
    score(model.vocab(), &predicted, &targets)
}

/// Where the user soft slot's source vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserSource {
    /// Final hidden state of the frozen sequential model.
    SeqRec,
    /// Mean of the item-table rows of the history.
    MeanItemRows,
}

/// Turns a history into the two source vectors.
#[derive(Debug, Clone)]
pub struct Features {
    pub user: UserSource,
    /// One row per catalog item; the item slot uses the last history item.
    pub item_table: Matrix<f32>,
    pub seqrec: Option<SeqRecModel>,
}

impl Features {
    pub fn user_dim(&self) -> usize {
        match (self.user, &self.seqrec) {
            (UserSource::SeqRec, Some(m)) => m.dim(),
            _ => self.item_table.cols(),
        }
    }

    pub fn item_dim(&self) -> usize {
        self.item_table.cols()
    }

    pub fn soft_spec(&self, projected: bool) -> SoftSpec {
        SoftSpec {
            user_dim: self.user_dim(),
            item_dim: self.item_dim(),
            n_soft: 1,
            projected,
        }
    }

    pub fn vectors(&self, history: &[usize]) -> Result<(Vec<f32>, Vec<f32>)> {
        let last = *history
            .last()
            .ok_or_else(|| Error::Input("empty history".into()))?;
        if let Some(&bad) = history.iter().find(|&&i| i >= self.item_table.rows()) {
            return Err(Error::Input(format!("item {bad} has no feature row")));
        }
        let item = self.item_table.row(last).to_vec();
        let user = match self.user {
            UserSource::SeqRec => {
                let m = self
                    .seqrec
                    .as_ref()
                    .ok_or_else(|| Error::State("user features need the sequential model".into()))?;
                m.encode_sequence(history)?.e_u.into_data()
            }
            UserSource::MeanItemRows => self.item_table.select_rows(history)?.column_mean().into_data(),
        };
        Ok((user, item))
    }

    pub fn example(&self, history: &[usize], target: usize) -> Result<Example> {
        let (user, item) = self.vectors(history)?;
        Ok(Example { user, item, target })
    }

    /// Prefix examples from each user's training sequence.
    pub fn train_examples(&self, splits: &SplitSet, max_prefixes: usize) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for u in &splits.users {
            let s = &u.train;
            let start = s.len().saturating_sub(max_prefixes).max(1);
            for k in start..s.len() {
                out.push(self.example(&s[..k], s[k])?);
            }
        }
        Ok(out)
    }

    /// Train history predicting the validation item.
    pub fn valid_examples(&self, splits: &SplitSet) -> Result<Vec<Example>> {
        splits.users.iter().map(|u| self.example(&u.train, u.valid)).collect()
    }

    /// Train plus validation history predicting the test item.
    pub fn test_examples(&self, splits: &SplitSet) -> Result<Vec<Example>> {
        splits.users.iter().map(|u| self.example(&u.test_history(), u.test)).collect()
    }
}

/// Everything `eval` needs: prompt model plus the feature extractors.
#[derive(Debug, Clone)]
pub struct Stage2Bundle {
    pub model: PromptModel,
    pub features: Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleHeader {
    lm: TinyLmConfig,
    prompt: PromptConfig,
    soft: SoftSpec,
    num_items: usize,
    user: UserSource,
    seqrec: Option<(SeqRecConfig, usize)>,
}

const TABLE_NAME: &str = "features.item_table";

fn take_prefix(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
        out.push(ParamTensor::new(p.name.clone(), p.value.clone(), p.trainable));
    }
    out
}

impl Stage2Bundle {
    fn header(&self) -> BundleHeader {
        BundleHeader {
            lm: self.model.lm_config.clone(),
            prompt: self.model.config.clone(),
            soft: self.model.soft,
            num_items: self.model.vocab().num_items(),
            user: self.features.user,
            seqrec: self
                .features
                .seqrec
                .as_ref()
                .map(|m| (m.net.config.clone(), m.num_items())),
        }
    }

    fn merged(&self) -> ParamStore {
        let mut all = ParamStore::new();
        for (_, p) in self.model.store.iter() {
            all.push(ParamTensor::new(p.name.clone(), p.value.clone(), p.trainable));
        }
        all.push(ParamTensor::new(TABLE_NAME, self.features.item_table.clone(), false));
        if let Some(m) = &self.features.seqrec {
            for (_, p) in m.store.iter() {
                all.push(ParamTensor::new(p.name.clone(), p.value.clone(), p.trainable));
            }
        }
        all
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(CHECKPOINT_KIND, &self.header(), &self.merged())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, store): (BundleHeader, _) = checkpoint::decode(CHECKPOINT_KIND, bytes)?;
        Self::from_parts(h, &store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.header(), &self.merged())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, store): (BundleHeader, _) = checkpoint::load(path, CHECKPOINT_KIND)?;
        Self::from_parts(h, &store)
    }

    fn from_parts(h: BundleHeader, store: &ParamStore) -> Result<Self> {
        let mut model = PromptModel::init(&h.lm, &h.prompt, h.num_items, h.soft, 0)?;
        let mut prompt_part = take_prefix(store, "lm.");
        for (_, p) in take_prefix(store, "proj_").iter() {
            prompt_part.push(ParamTensor::new(p.name.clone(), p.value.clone(), p.trainable));
        }
        model.store.load_values(&prompt_part)?;
        let table = store
            .find(TABLE_NAME)
            .map(|id| store.value(id).clone())
            .ok_or_else(|| Error::Checkpoint("bundle has no item feature table".into()))?;
        let seqrec = match h.seqrec {
            Some((cfg, n)) => Some(SeqRecModel::from_parts(&cfg, n, true, &take_prefix(store, "seqrec."))?),
            None => None,
        };
        Ok(Self {
            model,
            features: Features {
                user: h.user,
                item_table: table,
                seqrec,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;

    fn small_lm() -> TinyLmConfig {
        TinyLmConfig {
            hidden: 8,
            blocks: 1,
            heads: 2,
            ffn: 8,
            context: 8,
        }
    }

    fn model(num_items: usize, template: &str, freeze: bool) -> PromptModel {
        let cfg = PromptConfig {
            template: template.into(),
            freeze_backbone: freeze,
            lr: 1e-2,
            batch: 4,
            ..Default::default()
        };
        let soft = SoftSpec { user_dim: 3, item_dim: 3, n_soft: 1, projected: true };
        PromptModel::init(&small_lm(), &cfg, num_items, soft, 1).unwrap()
    }

    #[test]
    fn projectors_use_different_activations() {
        let m = model(4, "go", true);
        let SoftPath::Projected { user, item } = &m.net.soft else { panic!() };
        assert_ne!(user.activation(), item.activation());
        assert_eq!(user.activation(), Activation::Silu);
    }

    #[test]
    fn projector_zero_input_gives_bias_image() {
        let m = model(4, "go", true);
        let SoftPath::Projected { user, .. } = &m.net.soft else { panic!() };
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(1, 3));
        let y = user.forward(&mut t, &m.store, z).unwrap();
        let b1 = m.store.value(user.mlp.first.b).map(|v| Activation::Silu.apply(v));
        let want = b1.matmul(m.store.value(user.mlp.second.w)).unwrap().add(m.store.value(user.mlp.second.b)).unwrap();
        assert_eq!(t.value(y).data(), want.data());
        assert_eq!(t.value(y).shape(), (1, 8));
        let bad = t.constant(Matrix::zeros(1, 4));
        assert!(matches!(user.forward(&mut t, &m.store, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn prompt_building() {
        let m = model(4, "", true);
        let p = build_prompt(&m.net, &[0.0; 3], &[0.0; 3], Some(2)).unwrap();
        assert!(p.instruction.is_empty());
        assert_eq!(p.targets, vec![m.vocab().item_token(2).unwrap()]);
        assert_eq!(p, build_prompt(&m.net, &[0.0; 3], &[0.0; 3], Some(2)).unwrap());
        assert!(matches!(build_prompt(&m.net, &[0.0; 3], &[0.0; 3], Some(4)), Err(Error::Prompt(_))));
        let cfg = PromptConfig { template: "a b c d e f g".into(), ..Default::default() };
        let soft = SoftSpec { user_dim: 3, item_dim: 3, n_soft: 1, projected: true };
        assert!(matches!(PromptModel::init(&small_lm(), &cfg, 4, soft, 1), Err(Error::Prompt(_))));
    }

    #[test]
    fn zero_logits_give_log_vocab() {
        let mut m = model(5, "go now", true);
        // Zero token embeddings make every logit zero.
        let id = m.net.lm.token_emb;
        m.store.get_mut(id).value = Matrix::zeros(m.vocab().len(), 8);
        let p = build_prompt(&m.net, &[1.0, 2.0, 3.0], &[0.5, 0.0, 1.0], Some(3)).unwrap();
        let mut t = Tape::new();
        let l = ce_loss(&m.net, &mut t, &m.store, &p).unwrap();
        assert!((t.scalar(l) as f64 - (m.vocab().len() as f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn ce_matches_log_softmax_oracle() {
        let m = model(5, "go", true);
        let p = build_prompt(&m.net, &[0.3, -1.0, 2.0], &[0.1, 0.2, 0.3], Some(1)).unwrap();
        let mut t = Tape::new();
        let logits = m.net.target_logits(&mut t, &m.store, &p, 1).unwrap();
        let row: Vec<f64> = t.value(logits).row(0).iter().map(|&v| v as f64).collect();
        let mx = row.iter().copied().fold(f64::MIN, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let want = lse - row[p.targets[0]];
        let l = ce_loss(&m.net, &mut t, &m.store, &p).unwrap();
        assert!((t.scalar(l) as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn forced_logits_decide_generation() {
        let mut m = model(10, "go", true);
        let tok = m.vocab().item_token(7).unwrap();
        let id = m.net.lm.token_emb;
        let mut emb = Matrix::zeros(m.vocab().len(), 8);
        // A positive final-norm shift makes this row win the tied head.
        emb.row_mut(tok).fill(50.0);
        m.store.get_mut(id).value = emb;
        let ln = m.net.lm.final_norm.beta;
        m.store.get_mut(ln).value = Matrix::filled(1, 8, 5.0);
        let p = build_prompt(&m.net, &[0.0; 3], &[0.0; 3], None).unwrap();
        assert_eq!(generate_next(&m, &p).unwrap(), tok);
        assert_eq!(generate_next(&m, &p).unwrap(), tok);
    }

    #[test]
    fn score_extremes() {
        let v = Vocab::new("go", 3);
        let toks: Vec<usize> = (0..3).map(|i| v.item_token(i).unwrap()).collect();
        let r = score(&v, &toks, &[0, 1, 2]).unwrap();
        assert_eq!((r.hit_at_1, r.valid_ratio), (1.0, 1.0));
        let r = score(&v, &[PAD; 3], &[0, 1, 2]).unwrap();
        assert_eq!((r.hit_at_1, r.valid_ratio), (0.0, 0.0));
        assert!(score(&v, &[], &[]).is_err());
    }

    #[test]
    fn frozen_backbone_is_untouched_and_projectors_move() {
        let mut m = model(6, "go", true);
        let lm_before = m.lm_fingerprint();
        let all_before = m.store.fingerprint();
        let ex = vec![Example { user: vec![1.0, 0.0, 0.5], item: vec![0.0, 1.0, 0.0], target: 3 }];
        let log = finetune(&mut m, &ex, &ex, 1).unwrap();
        assert_eq!(log.train_loss.len(), 5);
        assert_eq!(m.lm_fingerprint(), lm_before);
        assert_ne!(m.store.fingerprint(), all_before);
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let mut m = model(6, "go", false);
        m.config.epochs = 0;
        let before = m.store.fingerprint();
        let ex = vec![Example { user: vec![1.0; 3], item: vec![1.0; 3], target: 0 }];
        finetune(&mut m, &ex, &[], 1).unwrap();
        assert_eq!(m.store.fingerprint(), before);
    }

    #[test]
    fn memorises_one_target() {
        let mut m = model(12, "go", true);
        m.config.epochs = 50;
        let ex = vec![Example { user: vec![0.2, -0.4, 1.0], item: vec![1.0, 0.0, 0.3], target: 9 }];
        finetune(&mut m, &ex, &[], 2).unwrap();
        let r = evaluate(&m, &ex).unwrap();
        assert_eq!(r.hit_at_1, 1.0);
    }

    #[test]
    fn direct_path_pads_and_truncates() {
        let cfg = PromptConfig { template: "go".into(), ..Default::default() };
        let soft = SoftSpec { user_dim: 3, item_dim: 20, n_soft: 1, projected: false };
        let m = PromptModel::init(&small_lm(), &cfg, 4, soft, 1).unwrap();
        let mut t = Tape::<f32>::new();
        let (u, i) = m.net.soft_rows(&mut t, &m.store, &[1.0, 2.0, 3.0], &[1.0; 20]).unwrap();
        assert_eq!(t.value(u).data(), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.value(i).data(), &[1.0; 8]);
    }

    #[test]
    fn bundle_round_trip() {
        let seq = SeqRecModel::init(&SeqRecConfig { d: 4, num_blocks: 1, num_heads: 1, max_len: 5, ..Default::default() }, 6, 1).unwrap();
        let features = Features {
            user: UserSource::SeqRec,
            item_table: Matrix::randn(6, 4, 1.0, &mut Rng::new(2)),
            seqrec: Some(seq),
        };
        let cfg = PromptConfig { template: "go".into(), ..Default::default() };
        let model = PromptModel::init(&small_lm(), &cfg, 6, features.soft_spec(true), 3).unwrap();
        let b = Stage2Bundle { model, features };
        let back = Stage2Bundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.store.fingerprint(), b.model.store.fingerprint());
        assert_eq!(back.features.item_table, b.features.item_table);
        let ex = b.features.example(&[1, 2], 3).unwrap();
        assert_eq!(back.features.example(&[1, 2], 3).unwrap(), ex);
        assert_eq!(evaluate(&back.model, &[ex.clone()]).unwrap(), evaluate(&b.model, &[ex]).unwrap());
    }
}

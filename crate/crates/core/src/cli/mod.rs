//! Pipeline orchestration: run configuration, stage artifacts, ablations and
//! the run report.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{parse_config, parse_config_str, Ablation, DomainPaths, RunConfig};

use crate::datamodel::{
    leave_one_out, load_interactions, load_items, prepare_dataset, read_embeddings, write_embeddings, Catalog,
    EmbeddingMatrix, SplitSet, Stage,
};
use crate::federation::{run_round, ClientUpload, RoundReport, ServerConfig};
use crate::fkd::{as_synced, train_fkd, FkdLog, FkdModel, LossParts};
use crate::numerics::Rng;
use crate::privacy::{audit_similarity, encrypt, PerturbationConfig};
use crate::promptrec::{evaluate, finetune, EvalResult, Features, FinetuneLog, PromptModel, Stage2Bundle, UserSource};
use crate::seqrec::{pretrain, PretrainLog, SeqRecModel};
use crate::{Error, Result};

/// One domain after ingestion.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub name: String,
    pub catalog: Catalog,
    pub splits: SplitSet,
    pub raw: EmbeddingMatrix,
}

impl DomainData {
    pub fn train_sequences(&self) -> Vec<Vec<usize>> {
        self.splits.users.iter().map(|u| u.train.clone()).collect()
    }
}

/// Read, filter and split one domain.
pub fn load_domain(paths: &DomainPaths, min_len: usize, keep_last: Option<usize>) -> Result<DomainData> {
    let catalog = load_items(&paths.items, &paths.name)?;
    let logs = load_interactions(&paths.interactions, &catalog)?;
    let kept = prepare_dataset(&logs, min_len, keep_last)?;
    if kept.is_empty() {
        return Err(Error::Input(format!(
            "domain '{}' has no user with at least {min_len} interactions",
            paths.name
        )));
    }
    let splits = leave_one_out(&kept)?;
    let raw = read_embeddings(&paths.embeddings)?;
    raw.expect_stage(Stage::Raw)?;
    if raw.rows() != catalog.len() {
        return Err(Error::Dimension(format!(
            "domain '{}': {} embedding rows for {} catalog items",
            paths.name,
            raw.rows(),
            catalog.len()
        )));
    }
    Ok(DomainData {
        name: paths.name.clone(),
        catalog,
        splits,
        raw,
    })
}

/// Seeds used by each stage of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub encrypt: u64,
    pub pretrain: u64,
    pub distill: u64,
    pub finetune: u64,
}

impl StageSeeds {
    pub fn derive(seed: u64, domain_index: usize) -> Self {
        let root = Rng::new(seed).fork(1_000 + domain_index as u64);
        let pick = |tag| root.fork(tag).next_u64();
        Self {
            encrypt: pick(1),
            pretrain: pick(2),
            distill: pick(3),
            finetune: pick(4),
        }
    }

    pub fn server(seed: u64, round: usize) -> u64 {
        Rng::new(seed).fork(500 + round as u64).next_u64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub items: usize,
    pub users: usize,
    pub seeds: StageSeeds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit_similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_loss: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill_loss: Option<Vec<LossParts>>,
    pub finetune: FinetuneLog,
    pub valid: EvalResult,
    pub test: EvalResult,
    /// Hit@1 of a uniform guess over the item vocabulary.
    pub chance_hit_at_1: f64,
}

/// Everything a run produced except wall-clock timings, which go to
/// `timings.json` so that reports of repeated runs compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ablation: Ablation,
    pub seed: u64,
    pub server_seeds: Vec<u64>,
    /// Serialized run configuration.
    pub config: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering: Option<Vec<RoundReport>>,
    pub domains: BTreeMap<String, DomainReport>,
    pub mean_test_hit_at_1: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Seconds spent per stage, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
    pub total: f64,
}

fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            source: Box::new(other),
        },
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Artifact paths of one run directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("run.cfg")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
    pub fn federation(&self) -> PathBuf {
        self.root.join("federation.json")
    }
    pub fn domain_dir(&self, domain: &str) -> PathBuf {
        self.root.join(domain)
    }
    pub fn upload(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("upload.msg")
    }
    pub fn replacement_map(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("replacement_map.json")
    }
    pub fn synced(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("synced.sfub")
    }
    pub fn seqrec(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("seqrec.ckpt")
    }
    pub fn pretrain_log(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("pretrain_log.json")
    }
    pub fn fkd(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("fkd.ckpt")
    }
    pub fn distill_log(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("distill_log.json")
    }
    pub fn distill_csv(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("distill_loss.csv")
    }
    pub fn stage2(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("stage2.ckpt")
    }
    pub fn finetune_log(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("finetune_log.json")
    }
    pub fn eval(&self, domain: &str) -> PathBuf {
        self.domain_dir(domain).join("eval.json")
    }
}

struct Clock {
    start: Instant,
    timings: Timings,
}

impl Clock {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            timings: Timings::default(),
        }
    }

    fn time<T>(&mut self, label: String, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        self.timings.stages.push((label, t.elapsed().as_secs_f64()));
        out
    }

    fn finish(mut self) -> Timings {
        self.timings.total = self.start.elapsed().as_secs_f64();
        self.timings
    }
}

/// Build the Stage-2 feature extractor for an ablation mode.
pub fn stage2_features(
    ablation: Ablation,
    seqrec: Option<&SeqRecModel>,
    fkd: Option<&FkdModel>,
    text: Option<&EmbeddingMatrix>,
) -> Result<Features> {
    let need = |what: &str| Error::State(format!("{} mode needs {what}", ablation.name()));
    Ok(match ablation {
        Ablation::TextOnly => Features {
            user: UserSource::MeanItemRows,
            item_table: text.ok_or_else(|| need("text embeddings"))?.values.clone(),
            seqrec: None,
        },
        Ablation::IdOnly => {
            let s = seqrec.ok_or_else(|| need("the sequential model"))?;
            Features {
                user: UserSource::SeqRec,
                item_table: s.item_table(),
                seqrec: Some(s.clone()),
            }
        }
        Ablation::Full | Ablation::KdLocal | Ablation::FkdNoProjection => {
            let s = seqrec.ok_or_else(|| need("the sequential model"))?;
            let f = fkd.ok_or_else(|| need("the distillation model"))?;
            Features {
                user: UserSource::SeqRec,
                item_table: f.enhanced_table(s, text)?,
                seqrec: Some(s.clone()),
            }
        }
    })
}

/// Ingest, encrypt, federate, pretrain, distill, fine-tune and evaluate
/// every configured domain, writing artifacts under `out_dir`.
///
/// Artifacts already present from a run with the same configuration are
/// reused; a stage reruns when its own artifact is missing or any stage it
/// depends on reran.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    cfg.check_inputs()?;
    let art = Artifacts::new(out_dir);
    mkdir(out_dir)?;
    let cfg_text = cfg.serialize();
    let reuse = std::fs::read_to_string(art.config()).is_ok_and(|t| t == cfg_text);
    if !reuse {
        std::fs::write(art.config(), &cfg_text).map_err(|e| Error::io(art.config(), e))?;
    }
    let mut clock = Clock::new();

    let data = clock.time("ingest".into(), || {
        in_stage(
            "ingest",
            cfg.domains
                .iter()
                .map(|d| load_domain(d, cfg.min_len, cfg.keep_last))
                .collect::<Result<Vec<_>>>(),
        )
    })?;
    for d in &data {
        mkdir(&art.domain_dir(&d.name))?;
    }
    let seeds: Vec<StageSeeds> = (0..data.len()).map(|i| StageSeeds::derive(cfg.seed, i)).collect();
    let ab = cfg.ablation;

    // Stage 1a: encryption and the server round.
    let mut dirty_text = !reuse;
    let mut audits: Vec<Option<f64>> = vec![None; data.len()];
    let mut text: Vec<Option<EmbeddingMatrix>> = vec![None; data.len()];
    let mut clustering = None;
    let mut server_seeds = Vec::new();
    if ab.federates() {
        let mut uploads = Vec::with_capacity(data.len());
        for (i, d) in data.iter().enumerate() {
            let path = art.upload(&d.name);
            let up = clock.time(format!("encrypt:{}", d.name), || {
                in_stage("encrypt", {
                    if !dirty_text && path.is_file() {
                        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                        ClientUpload::from_bytes(&bytes)
                    } else {
                        dirty_text = true;
                        let enc = encrypt(&d.raw, &PerturbationConfig::new(cfg.sigma, seeds[i].encrypt)?)?;
                        write_json(&art.replacement_map(&d.name), &enc.replacement_map)?;
                        let up = ClientUpload::new(d.name.clone(), enc.rows)?;
                        std::fs::write(&path, up.to_bytes()?).map_err(|e| Error::io(&path, e))?;
                        Ok(up)
                    }
                })
            })?;
            audits[i] = Some(in_stage("encrypt", audit_similarity(&d.raw, &up.embeddings))?);
            uploads.push(up);
        }
        server_seeds = (0..cfg.rounds).map(|r| StageSeeds::server(cfg.seed, r)).collect();
        let synced_paths: Vec<PathBuf> = data.iter().map(|d| art.synced(&d.name)).collect();
        let cached = !dirty_text && art.federation().is_file() && synced_paths.iter().all(|p| p.is_file());
        let (reports, synced) = clock.time("federate".into(), || {
            in_stage("federate", {
                if cached {
                    let reports: Vec<RoundReport> = read_json(&art.federation())?;
                    let synced = synced_paths
                        .iter()
                        .map(|p| read_embeddings(p))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((reports, synced))
                } else {
                    federate(&uploads, cfg, &server_seeds).and_then(|(reports, synced)| {
                        write_json(&art.federation(), &reports)?;
                        for (p, s) in synced_paths.iter().zip(&synced) {
                            write_embeddings(p, s)?;
                        }
                        Ok((reports, synced))
                    })
                }
            })
        })?;
        dirty_text |= !cached;
        for (slot, s) in text.iter_mut().zip(synced) {
            *slot = Some(s);
        }
        clustering = Some(reports);
    } else if ab == Ablation::KdLocal {
        for (slot, d) in text.iter_mut().zip(&data) {
            *slot = Some(as_synced(d.raw.values.clone())?);
        }
    }

    let mut domains = BTreeMap::new();
    for (i, d) in data.iter().enumerate() {
        let name = d.name.as_str();
        let seqs = d.train_sequences();
        let n = d.catalog.len();

        // Stage 1b: sequential model.
        let mut dirty = !reuse;
        let mut seqrec = None;
        let mut pretrain_loss = None;
        if ab.uses_seqrec() {
            let (p, lp) = (art.seqrec(name), art.pretrain_log(name));
            let (m, log): (SeqRecModel, PretrainLog) = clock.time(format!("pretrain:{name}"), || {
                in_stage("pretrain", {
                    if !dirty && p.is_file() && lp.is_file() {
                        Ok((SeqRecModel::load(&p)?, read_json(&lp)?))
                    } else {
                        dirty = true;
                        pretrain(&seqs, n, &cfg.seqrec, seeds[i].pretrain).and_then(|(m, log)| {
                            m.save(&p)?;
                            write_json(&lp, &log)?;
                            Ok((m, log))
                        })
                    }
                })
            })?;
            seqrec = Some(m);
            pretrain_loss = Some(log.epoch_loss);
        }

        // Stage 1c: distillation.
        dirty |= dirty_text;
        let mut fkd = None;
        let mut distill_loss = None;
        if ab.uses_fkd() {
            let (p, lp, csv) = (art.fkd(name), art.distill_log(name), art.distill_csv(name));
            let s = seqrec.as_ref().expect("distillation modes pretrain");
            let t = text[i].as_ref().expect("distillation modes have text");
            let (m, log): (FkdModel, FkdLog) = clock.time(format!("distill:{name}"), || {
                in_stage("distill", {
                    if !dirty && p.is_file() && lp.is_file() {
                        Ok((FkdModel::load(&p)?, read_json(&lp)?))
                    } else {
                        dirty = true;
                        train_fkd(&seqs, s, t, &cfg.fkd, seeds[i].distill).and_then(|(m, log)| {
                            m.save(&p)?;
                            write_json(&lp, &log)?;
                            let mut f = std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
                            log.write_csv(&mut f).map_err(|e| Error::io(&csv, e))?;
                            Ok((m, log))
                        })
                    }
                })
            })?;
            fkd = Some(m);
            distill_loss = Some(log.epochs);
        }

        // Stage 2: prompt tuning.
        if ab == Ablation::TextOnly {
            dirty |= dirty_text;
        }
        let (p, lp) = (art.stage2(name), art.finetune_log(name));
        let (bundle, ft_log): (Stage2Bundle, FinetuneLog) = clock.time(format!("finetune:{name}"), || {
            in_stage("finetune", {
                if !dirty && p.is_file() && lp.is_file() {
                    Ok((Stage2Bundle::load(&p)?, read_json(&lp)?))
                } else {
                    stage2(cfg, d, seqrec.as_ref(), fkd.as_ref(), text[i].as_ref(), seeds[i].finetune).and_then(
                        |(b, log)| {
                            b.save(&p)?;
                            write_json(&lp, &log)?;
                            Ok((b, log))
                        },
                    )
                }
            })
        })?;

        let (valid, test) = clock.time(format!("eval:{name}"), || {
            in_stage("eval", {
                let f = &bundle.features;
                let valid = evaluate(&bundle.model, &f.valid_examples(&d.splits)?)?;
                let test = evaluate(&bundle.model, &f.test_examples(&d.splits)?)?;
                write_json(&art.eval(name), &(valid, test))?;
                Ok((valid, test))
            })
        })?;
        log::info!("{name}: test hit@1 {:.4} (valid {:.4})", test.hit_at_1, valid.hit_at_1);
        domains.insert(
            name.to_string(),
            DomainReport {
                items: n,
                users: d.splits.len(),
                seeds: seeds[i],
                audit_similarity: audits[i],
                pretrain_loss,
                distill_loss,
                finetune: ft_log,
                valid,
                test,
                chance_hit_at_1: 1.0 / bundle.model.vocab().len() as f64,
            },
        );
    }

    let mean = domains.values().map(|r| r.test.hit_at_1).sum::<f64>() / domains.len() as f64;
    let report = RunReport {
        ablation: ab,
        seed: cfg.seed,
        server_seeds,
        config: cfg_text,
        clustering,
        domains,
        mean_test_hit_at_1: mean,
    };
    std::fs::write(art.report(), report.to_json()?).map_err(|e| Error::io(art.report(), e))?;
    write_json(&art.timings(), &clock.finish())?;
    Ok(report)
}

/// Server rounds over the encrypted uploads. Later rounds cluster the
/// previous round's synchronized rows.
pub fn federate(
    uploads: &[ClientUpload],
    cfg: &RunConfig,
    server_seeds: &[u64],
) -> Result<(Vec<RoundReport>, Vec<EmbeddingMatrix>)> {
    let total: usize = uploads.iter().map(|u| u.embeddings.rows()).sum();
    if cfg.cluster.k > total {
        return Err(Error::config(
            "k",
            format!("{} clusters for {total} pooled items", cfg.cluster.k),
        ));
    }
    let mut current = uploads.to_vec();
    let mut reports = Vec::new();
    let mut synced = Vec::new();
    for &seed in server_seeds {
        let out = run_round(&current, &ServerConfig { cluster: cfg.cluster, seed })?;
        reports.push(out.report);
        synced = out.responses.iter().map(|r| r.embeddings.clone()).collect();
        current = out
            .responses
            .into_iter()
            .map(|r| {
                let rows = EmbeddingMatrix::new(Stage::Encrypted, r.embeddings.values)?;
                ClientUpload::new(r.domain, rows)
            })
            .collect::<Result<_>>()?;
    }
    Ok((reports, synced))
}

/// Build and fine-tune the Stage-2 model of one domain.
pub fn stage2(
    cfg: &RunConfig,
    d: &DomainData,
    seqrec: Option<&SeqRecModel>,
    fkd: Option<&FkdModel>,
    text: Option<&EmbeddingMatrix>,
    seed: u64,
) -> Result<(Stage2Bundle, FinetuneLog)> {
    let features = stage2_features(cfg.ablation, seqrec, fkd, text)?;
    let projected = cfg.ablation != Ablation::FkdNoProjection;
    let mut prompt = cfg.prompt.clone();
    if !projected {
        // Without projectors nothing else would be trainable.
        prompt.freeze_backbone = false;
    }
    let mut model = PromptModel::init(&cfg.lm, &prompt, d.catalog.len(), features.soft_spec(projected), seed)?;
    let train = features.train_examples(&d.splits, prompt.max_prefixes)?;
    let valid = features.valid_examples(&d.splits)?;
    let log = finetune(&mut model, &train, &valid, seed)?;
    Ok((Stage2Bundle { model, features }, log))
}

/// Domain names of the synthetic two-domain fixture.
pub const FIXTURE_DOMAINS: [&str; 2] = ["books", "movies"];

/// Settings sized for the synthetic fixture: short sequences, a few
/// hundred items, single-core runtime of about a minute per pipeline.
pub fn fixture_config(domains: Vec<DomainPaths>, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        domains,
        seed,
        ..RunConfig::default()
    };
    cfg.cluster.k = 40;
    cfg.seqrec.max_len = 16;
    cfg.seqrec.lr = 1e-3;
    cfg.seqrec.epochs = 10;
    cfg.fkd.d_prime = 64;
    cfg.fkd.lr = 1e-3;
    cfg.fkd.epochs = 5;
    cfg.lm.hidden = 64;
    cfg.lm.ffn = 128;
    cfg.prompt.lr = 1e-3;
    cfg.prompt.epochs = 5;
    cfg
}

/// Write the fixture under `dir` (one sub-directory per domain plus
/// `run.cfg`) and return its configuration.
pub fn write_fixture(dir: &Path, spec: &crate::datamodel::synth::FixtureSpec, seed: u64) -> Result<RunConfig> {
    let fixture = crate::datamodel::synth::cross_domain_fixture(spec, FIXTURE_DOMAINS, seed);
    let mut domains = Vec::new();
    for (name, d) in FIXTURE_DOMAINS.iter().zip(&fixture) {
        let sub = dir.join(name);
        d.write_to(&sub)?;
        domains.push(DomainPaths {
            name: name.to_string(),
            items: sub.join("items.jsonl"),
            interactions: sub.join("interactions.jsonl"),
            embeddings: sub.join("raw.sfub"),
        });
    }
    let cfg = fixture_config(domains, seed);
    let path = dir.join("run.cfg");
    std::fs::write(&path, cfg.serialize()).map_err(|e| Error::io(&path, e))?;
    Ok(cfg)
}

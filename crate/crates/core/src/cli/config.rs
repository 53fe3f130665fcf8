//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::federation::ClusterConfig;
use crate::fkd::FkdConfig;
use crate::promptrec::{PromptConfig, TinyLmConfig};
use crate::seqrec::SeqRecConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    TextOnly,
    IdOnly,
    KdLocal,
    FkdNoProjection,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::TextOnly,
        Ablation::IdOnly,
        Ablation::KdLocal,
        Ablation::FkdNoProjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::TextOnly => "text_only",
            Ablation::IdOnly => "id_only",
            Ablation::KdLocal => "kd_local",
            Ablation::FkdNoProjection => "fkd_no_projection",
        }
    }

    /// Encryption and the server round run.
    pub fn federates(self) -> bool {
        matches!(self, Ablation::Full | Ablation::TextOnly | Ablation::FkdNoProjection)
    }

    pub fn uses_seqrec(self) -> bool {
        self != Ablation::TextOnly
    }

    pub fn uses_fkd(self) -> bool {
        matches!(self, Ablation::Full | Ablation::KdLocal | Ablation::FkdNoProjection)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("ablation", format!("unknown mode '{s}'")))
    }
}

/// Input files of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPaths {
    pub name: String,
    pub items: PathBuf,
    pub interactions: PathBuf,
    pub embeddings: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub domains: Vec<DomainPaths>,
    pub seed: u64,
    pub sigma: f64,
    pub cluster: ClusterConfig,
    pub rounds: usize,
    pub min_len: usize,
    pub keep_last: Option<usize>,
    pub seqrec: SeqRecConfig,
    pub fkd: FkdConfig,
    pub lm: TinyLmConfig,
    pub prompt: PromptConfig,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            domains: Vec::new(),
            seed: 7,
            sigma: 0.1,
            cluster: ClusterConfig::default(),
            rounds: 1,
            min_len: crate::datamodel::DEFAULT_MIN_LEN,
            keep_last: Some(50),
            seqrec: SeqRecConfig::default(),
            fkd: FkdConfig::default(),
            lm: TinyLmConfig::default(),
            prompt: PromptConfig::default(),
            ablation: Ablation::Full,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse '{v}'")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got '{v}'"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` pair. Relative paths resolve against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "sigma" => self.sigma = num(key, v)?,
            "k" => self.cluster.k = num(key, v)?,
            "max_iter" => self.cluster.max_iter = num(key, v)?,
            "tol" => self.cluster.tol = num(key, v)?,
            "n_init" => self.cluster.n_init = num(key, v)?,
            "rounds" => self.rounds = num(key, v)?,
            "min_len" => self.min_len = num(key, v)?,
            "keep_last" => {
                self.keep_last = match v {
                    "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "ablation" => self.ablation = v.parse()?,
            "seqrec.d" => self.seqrec.d = num(key, v)?,
            "seqrec.blocks" => self.seqrec.num_blocks = num(key, v)?,
            "seqrec.heads" => self.seqrec.num_heads = num(key, v)?,
            "seqrec.max_len" => self.seqrec.max_len = num(key, v)?,
            "seqrec.dropout" => self.seqrec.dropout = num(key, v)?,
            "seqrec.lr" => self.seqrec.lr = num(key, v)?,
            "seqrec.epochs" => self.seqrec.epochs = num(key, v)?,
            "seqrec.batch" => self.seqrec.batch = num(key, v)?,
            "fkd.alpha" => self.fkd.alpha = num(key, v)?,
            "fkd.beta" => self.fkd.beta = num(key, v)?,
            "fkd.d_prime" => self.fkd.d_prime = num(key, v)?,
            "fkd.epochs" => self.fkd.epochs = num(key, v)?,
            "fkd.batch" => self.fkd.batch = num(key, v)?,
            "fkd.lr" => self.fkd.lr = num(key, v)?,
            "fkd.negative_seed" => self.fkd.negative_seed = num(key, v)?,
            "fkd.fuse_text" => self.fkd.fuse_text = boolean(key, v)?,
            "lm.hidden" => self.lm.hidden = num(key, v)?,
            "lm.blocks" => self.lm.blocks = num(key, v)?,
            "lm.heads" => self.lm.heads = num(key, v)?,
            "lm.ffn" => self.lm.ffn = num(key, v)?,
            "lm.context" => self.lm.context = num(key, v)?,
            "prompt.template" => self.prompt.template = v.to_string(),
            "prompt.n_soft" => self.prompt.n_soft = num(key, v)?,
            "prompt.freeze_backbone" => self.prompt.freeze_backbone = boolean(key, v)?,
            "prompt.epochs" => self.prompt.epochs = num(key, v)?,
            "prompt.lr" => self.prompt.lr = num(key, v)?,
            "prompt.batch" => self.prompt.batch = num(key, v)?,
            "prompt.max_prefixes" => self.prompt.max_prefixes = num(key, v)?,
            "domains" => {
                let names: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                self.domains = names
                    .iter()
                    .map(|n| DomainPaths {
                        name: n.to_string(),
                        items: PathBuf::new(),
                        interactions: PathBuf::new(),
                        embeddings: PathBuf::new(),
                    })
                    .collect();
            }
            _ => {
                let parts: Vec<&str> = key.splitn(3, '.').collect();
                let [prefix, name, field] = parts[..] else {
                    return Err(Error::config(key, "unknown key"));
                };
                if prefix != "data" {
                    return Err(Error::config(key, "unknown key"));
                }
                let d = self
                    .domains
                    .iter_mut()
                    .find(|d| d.name == name)
                    .ok_or_else(|| Error::config(key, format!("domain '{name}' is not listed in `domains`")))?;
                let path = base.join(v);
                match field {
                    "items" => d.items = path,
                    "interactions" => d.interactions = path,
                    "embeddings" => d.embeddings = path,
                    _ => return Err(Error::config(key, "unknown key")),
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::config("sigma", format!("must be finite and >= 0, got {}", self.sigma)));
        }
        if self.cluster.k == 0 {
            return Err(Error::config("k", "must be positive"));
        }
        if self.cluster.max_iter == 0 {
            return Err(Error::config("max_iter", "must be positive"));
        }
        if !(self.cluster.tol > 0.0) {
            return Err(Error::config("tol", "must be positive"));
        }
        if self.cluster.n_init == 0 {
            return Err(Error::config("n_init", "must be positive"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be positive"));
        }
        if self.min_len < crate::datamodel::COLD_START_MIN_LEN {
            return Err(Error::config(
                "min_len",
                format!("must be at least {}", crate::datamodel::COLD_START_MIN_LEN),
            ));
        }
        if let Some(k) = self.keep_last {
            if k < self.min_len {
                return Err(Error::config("keep_last", "must be at least min_len"));
            }
        }
        self.seqrec.validate()?;
        self.fkd.validate()?;
        self.lm.validate()?;
        self.prompt.validate()?;
        Ok(())
    }

    /// Check that every referenced input exists.
    pub fn check_inputs(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::config("domains", "no domains configured"));
        }
        for d in &self.domains {
            for (field, p) in [("items", &d.items), ("interactions", &d.interactions), ("embeddings", &d.embeddings)] {
                if !p.is_file() {
                    return Err(Error::config(
                        format!("data.{}.{field}", d.name),
                        format!("'{}' does not exist", p.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn serialize(&self) -> String {
        let mut kv: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("sigma".into(), self.sigma.to_string()),
            ("k".into(), self.cluster.k.to_string()),
            ("max_iter".into(), self.cluster.max_iter.to_string()),
            ("tol".into(), self.cluster.tol.to_string()),
            ("n_init".into(), self.cluster.n_init.to_string()),
            ("rounds".into(), self.rounds.to_string()),
            ("min_len".into(), self.min_len.to_string()),
            (
                "keep_last".into(),
                self.keep_last.map_or("none".to_string(), |k| k.to_string()),
            ),
            ("ablation".into(), self.ablation.name().into()),
            ("seqrec.d".into(), self.seqrec.d.to_string()),
            ("seqrec.blocks".into(), self.seqrec.num_blocks.to_string()),
            ("seqrec.heads".into(), self.seqrec.num_heads.to_string()),
            ("seqrec.max_len".into(), self.seqrec.max_len.to_string()),
            ("seqrec.dropout".into(), self.seqrec.dropout.to_string()),
            ("seqrec.lr".into(), self.seqrec.lr.to_string()),
            ("seqrec.epochs".into(), self.seqrec.epochs.to_string()),
            ("seqrec.batch".into(), self.seqrec.batch.to_string()),
            ("fkd.alpha".into(), self.fkd.alpha.to_string()),
            ("fkd.beta".into(), self.fkd.beta.to_string()),
            ("fkd.d_prime".into(), self.fkd.d_prime.to_string()),
            ("fkd.epochs".into(), self.fkd.epochs.to_string()),
            ("fkd.batch".into(), self.fkd.batch.to_string()),
            ("fkd.lr".into(), self.fkd.lr.to_string()),
            ("fkd.negative_seed".into(), self.fkd.negative_seed.to_string()),
            ("fkd.fuse_text".into(), self.fkd.fuse_text.to_string()),
            ("lm.hidden".into(), self.lm.hidden.to_string()),
            ("lm.blocks".into(), self.lm.blocks.to_string()),
            ("lm.heads".into(), self.lm.heads.to_string()),
            ("lm.ffn".into(), self.lm.ffn.to_string()),
            ("lm.context".into(), self.lm.context.to_string()),
            ("prompt.template".into(), self.prompt.template.clone()),
            ("prompt.n_soft".into(), self.prompt.n_soft.to_string()),
            ("prompt.freeze_backbone".into(), self.prompt.freeze_backbone.to_string()),
            ("prompt.epochs".into(), self.prompt.epochs.to_string()),
            ("prompt.lr".into(), self.prompt.lr.to_string()),
            ("prompt.batch".into(), self.prompt.batch.to_string()),
            ("prompt.max_prefixes".into(), self.prompt.max_prefixes.to_string()),
        ];
        if !self.domains.is_empty() {
            let names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
            kv.push(("domains".into(), names.join(",")));
            for d in &self.domains {
                for (field, p) in [("items", &d.items), ("interactions", &d.interactions), ("embeddings", &d.embeddings)] {
                    // Unset paths stay unset on reparse.
                    if !p.as_os_str().is_empty() {
                        kv.push((format!("data.{}.{field}", d.name), p.display().to_string()));
                    }
                }
            }
        }
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parse config text. `domains` is applied before any `data.*` key
/// regardless of order.
pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig> {
    let mut pairs: BTreeMap<usize, (String, String)> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: base.to_path_buf(),
            line: n + 1,
            msg: format!("expected `key = value`, got '{line}'"),
        })?;
        let k = k.trim().to_string();
        if !seen.insert(k.clone()) {
            return Err(Error::config(k, "set more than once"));
        }
        pairs.insert(n, (k, v.trim().to_string()));
    }
    let mut cfg = RunConfig::default();
    let (domains, rest): (Vec<_>, Vec<_>) = pairs.into_values().partition(|(k, _)| k == "domains");
    for (k, v) in domains.iter().chain(&rest) {
        cfg.set(k, v, base)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        },
        other => other,
    })
}

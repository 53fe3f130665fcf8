use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use fedrec::cli::{
    self, load_domain, parse_config, run_pipeline, write_fixture, Ablation, RunConfig, StageSeeds,
};
use fedrec::datamodel::synth::FixtureSpec;
use fedrec::datamodel::{
    load_interactions, load_items, prepare_dataset, read_embeddings, synth_embeddings, write_embeddings,
    write_interactions, write_items, Stage, SynthSpec,
};
use fedrec::federation::{serve_round, ClientUpload, ServerConfig, SyncResponse};
use fedrec::fkd::{train_fkd, FkdModel};
use fedrec::numerics::Rng;
use fedrec::privacy::{audit_similarity, audit_sweep, encrypt, AuditTarget, PerturbationConfig};
use fedrec::promptrec::{evaluate, Stage2Bundle};
use fedrec::seqrec::{pretrain, SeqRecModel};
use fedrec::{Error, Result};

#[derive(Parser)]
#[command(name = "fedrec", version, about = "Federated cross-domain sequential recommendation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Log level filter when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log: String,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and prepare one domain's interaction log.
    Ingest {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long, default_value_t = fedrec::datamodel::DEFAULT_MIN_LEN)]
        min_len: usize,
        /// `none` keeps whole sequences.
        #[arg(long, default_value = "50")]
        keep_last: String,
    },
    /// Write random (optionally clustered) raw embeddings.
    SynthEmbed {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        clusters: usize,
        #[arg(long, default_value_t = 0.1)]
        spread: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic two-domain fixture and its run.cfg.
    SynthFixture {
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        /// Probability of moving to an item's fixed successor.
        #[arg(long, default_value_t = 0.8)]
        follow: f64,
        /// Zipf exponent of item popularity.
        #[arg(long, default_value_t = 1.0)]
        zipf: f64,
    },
    /// Perturb and similarity-replace raw embeddings.
    Encrypt {
        #[arg(long)]
        sigma: f64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Client-local replacement map (JSON); never uploaded.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Run server rounds over client uploads.
    Federate {
        /// Client descriptors, comma separated.
        #[arg(long, value_delimiter = ',')]
        clients: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Train the sequential model of one configured domain.
    Pretrain {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill synchronized text knowledge into the ID space.
    Distill {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        seqrec: PathBuf,
        #[arg(long)]
        synced: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to `<out>.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Tune the soft-prompt model of one configured domain.
    Finetune {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        seqrec: Option<PathBuf>,
        #[arg(long)]
        fkd: Option<PathBuf>,
        /// Synchronized text rows (text-only mode or text-fused enhancement).
        #[arg(long)]
        synced: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hit@1 of a tuned model on the validation or test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report path; defaults to `<out-dir>/eval_<split>.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Mean cosine similarity between raw and protected rows.
    AuditPrivacy {
        #[arg(long)]
        raw: PathBuf,
        /// Audit an existing encrypted file.
        #[arg(long)]
        enc: Option<PathBuf>,
        /// Otherwise sweep these noise scales.
        #[arg(long, value_delimiter = ',', default_value = "0.005,0.05,0.1,0.5")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Audit the perturbed rows before replacement.
        #[arg(long)]
        noise_only: bool,
    },
    /// Full pipeline.
    Run {
        #[arg(long)]
        ablation: Option<String>,
        /// Sweep one key, e.g. `k=10..150:10`.
        #[arg(long)]
        grid: Option<String>,
    },
}

/// A client descriptor for `federate`.
#[derive(Deserialize)]
struct ClientFile {
    domain: String,
    /// Encrypted `SFUB` file, relative to the descriptor.
    upload: PathBuf,
}

struct Ctx {
    global: Global,
}

impl Ctx {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.global.config {
            Some(p) => parse_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.global.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn seed(&self) -> Result<u64> {
        Ok(match (self.global.seed, &self.global.config) {
            (Some(s), _) => s,
            (None, Some(_)) => self.config()?.seed,
            (None, None) => RunConfig::default().seed,
        })
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let p = self.global.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
        Ok(p)
    }

    /// Domain paths and its index in the configuration.
    fn domain(&self, cfg: &RunConfig, name: &str) -> Result<(usize, cli::DomainData)> {
        let i = cfg
            .domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Input(format!("domain '{name}' is not in the configuration")))?;
        cfg.check_inputs()?;
        Ok((i, load_domain(&cfg.domains[i], cfg.min_len, cfg.keep_last)?))
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| io(path, e))
}

/// `key=lo..hi:step`.
fn parse_grid(spec: &str) -> Result<(String, Vec<usize>)> {
    let bad = || Error::config("grid", format!("expected key=lo..hi:step, got '{spec}'"));
    let (key, range) = spec.split_once('=').ok_or_else(bad)?;
    let (lohi, step) = range.split_once(':').unwrap_or((range, "1"));
    let (lo, hi) = lohi.split_once("..").ok_or_else(bad)?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let (lo, hi, step) = (parse(lo)?, parse(hi)?, parse(step)?);
    if step == 0 || lo > hi {
        return Err(bad());
    }
    Ok((key.trim().to_string(), (lo..=hi).step_by(step).collect()))
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { global: cli.global };
    match cli.command {
        Command::Ingest {
            domain,
            items,
            interactions,
            min_len,
            keep_last,
        } => {
            let keep = match keep_last.as_str() {
                "none" => None,
                k => Some(k.parse().map_err(|_| Error::config("keep_last", format!("cannot parse '{k}'")))?),
            };
            let catalog = load_items(&items, &domain)?;
            let logs = load_interactions(&interactions, &catalog)?;
            let kept = prepare_dataset(&logs, min_len, keep)?;
            let out = ctx.out_dir()?.join(&domain);
            std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
            write_items(&out.join("items.jsonl"), &catalog)?;
            write_interactions(&out.join("interactions.jsonl"), &kept, &catalog)?;
            let total: usize = kept.iter().map(|l| l.sequence.len()).sum();
            let summary = serde_json::json!({
                "domain": domain,
                "items": catalog.len(),
                "users_in": logs.len(),
                "users_kept": kept.len(),
                "interactions": total,
            });
            write_json(&out.join("summary.json"), &summary)?;
            println!("{summary}");
        }
        Command::SynthEmbed {
            n,
            dim,
            clusters,
            spread,
            out,
        } => {
            let spec = SynthSpec {
                dim,
                clusters,
                spread,
                ..SynthSpec::default()
            };
            let (emb, _) = synth_embeddings(n, &spec, &mut Rng::new(ctx.seed()?));
            write_embeddings(&out, &emb)?;
        }
        Command::SynthFixture {
            users,
            items,
            follow,
            zipf,
        } => {
            if !(0.0..=1.0).contains(&follow) {
                return Err(Error::config("follow", "must be in [0, 1]"));
            }
            let spec = FixtureSpec {
                users_per_domain: users,
                items_per_domain: items,
                follow,
                zipf,
                ..FixtureSpec::default()
            };
            let dir = ctx.out_dir()?;
            let dir = dir.canonicalize().map_err(|e| io(&dir, e))?;
            write_fixture(&dir, &spec, ctx.seed()?)?;
            println!("{}", dir.join("run.cfg").display());
        }
        Command::Encrypt { sigma, input, out, map } => {
            let raw = read_embeddings(&input)?;
            let enc = encrypt(&raw, &PerturbationConfig::new(sigma, ctx.seed()?)?)?;
            write_embeddings(&out, &enc.rows)?;
            if let Some(m) = map {
                write_json(&m, &enc.replacement_map)?;
            }
        }
        Command::Federate {
            clients,
            k,
            max_iter,
            tol,
            rounds,
        } => {
            let mut cfg = ctx.config()?;
            if let Some(k) = k {
                cfg.cluster.k = k;
            }
            if let Some(m) = max_iter {
                cfg.cluster.max_iter = m;
            }
            if let Some(t) = tol {
                cfg.cluster.tol = t;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            cfg.validate()?;
            if clients.is_empty() {
                return Err(Error::config("clients", "no client descriptors given"));
            }
            let mut uploads = Vec::new();
            for c in &clients {
                let text = std::fs::read_to_string(c).map_err(|e| io(c, e))?;
                let desc: ClientFile = toml::from_str(&text)
                    .map_err(|e| Error::config("clients", format!("{}: {e}", c.display())))?;
                let path = c.parent().unwrap_or(Path::new(".")).join(&desc.upload);
                uploads.push(ClientUpload::new(desc.domain, read_embeddings(&path)?)?);
            }
            let out = ctx.out_dir()?;
            let seeds: Vec<u64> = (0..cfg.rounds).map(|r| StageSeeds::server(cfg.seed, r)).collect();
            let (reports, synced) = if cfg.rounds == 1 {
                // Exercise the wire format end to end.
                let msgs = uploads.iter().map(ClientUpload::to_bytes).collect::<Result<Vec<_>>>()?;
                let (replies, outcome) = serve_round(&msgs, &ServerConfig { cluster: cfg.cluster, seed: seeds[0] })?;
                let synced = replies
                    .iter()
                    .map(|r| SyncResponse::from_bytes(r).map(|s| s.embeddings))
                    .collect::<Result<Vec<_>>>()?;
                (vec![outcome.report], synced)
            } else {
                cli::federate(&uploads, &cfg, &seeds)?
            };
            for (u, s) in uploads.iter().zip(&synced) {
                write_embeddings(&out.join(format!("{}.sync.sfub", u.domain)), s)?;
            }
            write_json(&out.join("round.json"), &reports)?;
            let last = reports.last().expect("at least one round");
            println!(
                "k={} inertia={} iterations={} shared_clusters={}",
                last.k, last.inertia, last.iterations, last.shared_clusters
            );
        }
        Command::Pretrain { domain, out } => {
            let cfg = ctx.config()?;
            let (i, d) = ctx.domain(&cfg, &domain)?;
            let seed = StageSeeds::derive(cfg.seed, i).pretrain;
            let (m, log) = pretrain(&d.train_sequences(), d.catalog.len(), &cfg.seqrec, seed)?;
            m.save(&out)?;
            write_json(&out.with_extension("log.json"), &log)?;
        }
        Command::Distill {
            domain,
            seqrec,
            synced,
            alpha,
            beta,
            epochs,
            batch,
            out,
            csv,
        } => {
            let mut cfg = ctx.config()?;
            if let Some(a) = alpha {
                cfg.fkd.alpha = a;
            }
            if let Some(b) = beta {
                cfg.fkd.beta = b;
            }
            if let Some(e) = epochs {
                cfg.fkd.epochs = e;
            }
            if let Some(b) = batch {
                cfg.fkd.batch = b;
            }
            cfg.fkd.validate()?;
            let (i, d) = ctx.domain(&cfg, &domain)?;
            let s = SeqRecModel::load(&seqrec)?;
            let text = read_embeddings(&synced)?;
            let seed = StageSeeds::derive(cfg.seed, i).distill;
            let (m, log) = train_fkd(&d.train_sequences(), &s, &text, &cfg.fkd, seed)?;
            m.save(&out)?;
            let csv = csv.unwrap_or_else(|| out.with_extension("csv"));
            let mut f = std::fs::File::create(&csv).map_err(|e| io(&csv, e))?;
            log.write_csv(&mut f).map_err(|e| io(&csv, e))?;
        }
        Command::Finetune {
            domain,
            seqrec,
            fkd,
            synced,
            epochs,
            lr,
            out,
        } => {
            let mut cfg = ctx.config()?;
            if let Some(e) = epochs {
                cfg.prompt.epochs = e;
            }
            if let Some(l) = lr {
                cfg.prompt.lr = l;
            }
            cfg.ablation = match (&seqrec, &fkd, &synced) {
                (Some(_), Some(_), _) => Ablation::Full,
                (Some(_), None, _) => Ablation::IdOnly,
                (None, None, Some(_)) => Ablation::TextOnly,
                _ => {
                    return Err(Error::config(
                        "finetune",
                        "give --seqrec [--fkd], or --synced alone for text-only",
                    ))
                }
            };
            cfg.validate()?;
            let (i, d) = ctx.domain(&cfg, &domain)?;
            let s = seqrec.as_deref().map(SeqRecModel::load).transpose()?;
            let f = fkd.as_deref().map(FkdModel::load).transpose()?;
            let t = synced.as_deref().map(read_embeddings).transpose()?;
            let seed = StageSeeds::derive(cfg.seed, i).finetune;
            let (bundle, log) = cli::stage2(&cfg, &d, s.as_ref(), f.as_ref(), t.as_ref(), seed)?;
            bundle.save(&out)?;
            write_json(&out.with_extension("log.json"), &log)?;
        }
        Command::Eval {
            model,
            domain,
            split,
            report,
        } => {
            let cfg = ctx.config()?;
            let name = match domain {
                Some(n) => n,
                None => match cfg.domains.as_slice() {
                    [only] => only.name.clone(),
                    _ => return Err(Error::config("domain", "--domain is required with several domains")),
                },
            };
            let (_, d) = ctx.domain(&cfg, &name)?;
            let bundle = Stage2Bundle::load(&model)?;
            let examples = match split.as_str() {
                "test" => bundle.features.test_examples(&d.splits)?,
                "valid" => bundle.features.valid_examples(&d.splits)?,
                other => return Err(Error::config("split", format!("expected test or valid, got '{other}'"))),
            };
            let r = evaluate(&bundle.model, &examples)?;
            let path = match report {
                Some(p) => p,
                None => ctx.out_dir()?.join(format!("eval_{split}.json")),
            };
            write_json(&path, &r)?;
            println!("hit@1={} valid={}", r.hit_at_1, r.valid_ratio);
        }
        Command::AuditPrivacy {
            raw,
            enc,
            sigmas,
            seeds,
            noise_only,
        } => {
            let raw = read_embeddings(&raw)?;
            raw.expect_stage(Stage::Raw)?;
            match enc {
                Some(p) => println!("{}", audit_similarity(&raw, &read_embeddings(&p)?)?),
                None => {
                    let base = ctx.seed()?;
                    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| base + s).collect();
                    let target = if noise_only {
                        AuditTarget::NoiseOnly
                    } else {
                        AuditTarget::Encrypted
                    };
                    for (sigma, mean) in audit_sweep(&raw, &sigmas, &seed_list, target)? {
                        println!("sigma={sigma} similarity={mean}");
                    }
                }
            }
        }
        Command::Run { ablation, grid } => {
            let mut cfg = ctx.config()?;
            if let Some(a) = ablation {
                cfg.ablation = a.parse()?;
            }
            let out = ctx.out_dir()?;
            match grid {
                None => {
                    let r = run_pipeline(&cfg, &out)?;
                    for (name, d) in &r.domains {
                        println!("{name}: hit@1={} valid={}", d.test.hit_at_1, d.test.valid_ratio);
                    }
                }
                Some(spec) => {
                    let (key, values) = parse_grid(&spec)?;
                    let base = out.clone();
                    let mut rows = Vec::new();
                    for v in values {
                        let mut c = cfg.clone();
                        c.set(&key, &v.to_string(), Path::new("."))?;
                        c.validate()?;
                        let r = run_pipeline(&c, &base.join(format!("{key}={v}")))?;
                        let inertia = r.clustering.as_ref().and_then(|c| c.last()).map(|c| c.inertia);
                        println!("{key}={v} hit@1={} inertia={inertia:?}", r.mean_test_hit_at_1);
                        rows.push(serde_json::json!({
                            "value": v,
                            "mean_test_hit_at_1": r.mean_test_hit_at_1,
                            "inertia": inertia,
                        }));
                    }
                    write_json(&base.join("grid.json"), &rows)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.global.log)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

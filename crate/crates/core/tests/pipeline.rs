use std::path::Path;
use std::process::Command;

use fedrec::cli::{parse_config, run_pipeline, write_fixture, Ablation, Artifacts, RunConfig, RunReport};
use fedrec::datamodel::synth::FixtureSpec;
use fedrec::Error;

fn tiny_fixture(dir: &Path, seed: u64) -> RunConfig {
    let spec = FixtureSpec {
        items_per_domain: 30,
        users_per_domain: 60,
        clusters: 5,
        dim: 16,
        ..FixtureSpec::default()
    };
    let mut cfg = write_fixture(dir, &spec, seed).unwrap();
    cfg.cluster.k = 8;
    cfg.cluster.n_init = 2;
    cfg.seqrec.d = 8;
    cfg.seqrec.num_heads = 2;
    cfg.seqrec.epochs = 2;
    cfg.fkd.d_prime = 8;
    cfg.fkd.epochs = 2;
    cfg.lm.hidden = 16;
    cfg.lm.ffn = 16;
    cfg.prompt.epochs = 2;
    cfg.prompt.max_prefixes = 2;
    std::fs::write(dir.join("run.cfg"), cfg.serialize()).unwrap();
    cfg
}

fn run(cfg: &RunConfig, ablation: Ablation, out: &Path) -> RunReport {
    let cfg = RunConfig {
        ablation,
        ..cfg.clone()
    };
    run_pipeline(&cfg, out).unwrap()
}

#[test]
fn report_sections_follow_the_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_fixture(tmp.path(), 3);
    for ab in Ablation::ALL {
        let r = run(&cfg, ab, &tmp.path().join(ab.name()));
        assert_eq!(r.ablation, ab);
        assert_eq!(r.clustering.is_some(), ab.federates(), "{ab:?}");
        for d in r.domains.values() {
            assert_eq!(d.audit_similarity.is_some(), ab.federates());
            assert_eq!(d.pretrain_loss.is_some(), ab.uses_seqrec());
            assert_eq!(d.distill_loss.is_some(), ab.uses_fkd());
            assert_eq!(d.finetune.train_loss.len(), 2);
            assert!((0.0..=1.0).contains(&d.test.hit_at_1));
        }
        let json = std::fs::read_to_string(tmp.path().join(ab.name()).join("report.json")).unwrap();
        assert_eq!(json.contains("\"clustering\""), ab.federates());
    }
}

#[test]
fn reruns_and_restarts_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_fixture(tmp.path(), 4);
    let a = run(&cfg, Ablation::Full, &tmp.path().join("a"));
    let b = run(&cfg, Ablation::Full, &tmp.path().join("b"));
    assert_eq!(a, b);
    let bytes = |dir: &str| std::fs::read(tmp.path().join(dir).join("report.json")).unwrap();
    assert_eq!(bytes("a"), bytes("b"));

    // Drop only the Stage-2 artifacts and resume.
    let art = Artifacts::new(tmp.path().join("a"));
    let seqrec_before = std::fs::read(art.seqrec("books")).unwrap();
    for d in ["books", "movies"] {
        std::fs::remove_file(art.stage2(d)).unwrap();
    }
    let c = run(&cfg, Ablation::Full, &tmp.path().join("a"));
    assert_eq!(a, c);
    assert_eq!(std::fs::read(art.stage2("books")).unwrap(), std::fs::read(Artifacts::new(tmp.path().join("b")).stage2("books")).unwrap());
    assert_eq!(std::fs::read(art.seqrec("books")).unwrap(), seqrec_before);
    assert!(art.timings().is_file());
}

#[test]
fn changed_config_invalidates_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_fixture(tmp.path(), 5);
    let out = tmp.path().join("run");
    let a = run(&cfg, Ablation::IdOnly, &out);
    let mut other = cfg.clone();
    other.seed = 99;
    let b = run(&other, Ablation::IdOnly, &out);
    assert_ne!(a.domains["books"].pretrain_loss, b.domains["books"].pretrain_loss);
    let fresh = run(&other, Ablation::IdOnly, &tmp.path().join("fresh"));
    assert_eq!(b, fresh);
}

#[test]
fn stage_errors_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_fixture(tmp.path(), 6);
    cfg.cluster.k = 1000;
    let e = run_pipeline(&cfg, &tmp.path().join("out")).unwrap_err();
    assert!(matches!(&e, Error::Stage { stage: "federate", .. }), "{e}");
    assert!(e.is_validation());

    cfg.domains[0].items = tmp.path().join("missing.jsonl");
    let e = run_pipeline(&cfg, &tmp.path().join("out")).unwrap_err();
    assert!(matches!(&e, Error::Config { key, .. } if key == "data.books.items"), "{e}");
}

#[test]
fn written_config_parses_back() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_fixture(tmp.path(), 7);
    assert_eq!(parse_config(&tmp.path().join("run.cfg")).unwrap(), cfg);
}

fn fedrec(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedrec"))
        .args(args)
        .args(["--log", "error"])
        .output()
        .unwrap()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "alpha = -1\n").unwrap();
    let out = fedrec(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'alpha'"));

    assert_eq!(fedrec(&["run", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(fedrec(&["--help"]).status.code(), Some(0));
    let out = fedrec(&["encrypt", "--sigma", "0.1", "--in", "/nonexistent.sfub", "--out", "x.sfub"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn staged_commands_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |p: &str| tmp.path().join(p).to_str().unwrap().to_string();
    tiny_fixture(tmp.path(), 8);
    let cfg = t("run.cfg");

    for d in ["books", "movies"] {
        let out = fedrec(&["encrypt", "--sigma", "0.1", "--seed", "1", "--in", &t(&format!("{d}/raw.sfub")), "--out", &t(&format!("{d}.enc.sfub"))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::write(tmp.path().join(format!("{d}.toml")), format!("domain = \"{d}\"\nupload = \"{d}.enc.sfub\"\n")).unwrap();
    }
    let out = fedrec(&["federate", "--clients", &format!("{},{}", t("books.toml"), t("movies.toml")), "--k", "6", "--seed", "1", "--out-dir", &t("fed")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("k=6 "));

    let out = fedrec(&["audit-privacy", "--raw", &t("books/raw.sfub"), "--enc", &t("books.enc.sfub")]);
    let sim: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(sim > 0.0 && sim < 1.0);

    let steps: [&[&str]; 4] = [
        &["pretrain", "--config", &cfg, "--domain", "books", "--out", &t("books.seqrec")],
        &["distill", "--config", &cfg, "--domain", "books", "--seqrec", &t("books.seqrec"), "--synced", &t("fed/books.sync.sfub"), "--epochs", "1", "--out", &t("books.fkd")],
        &["finetune", "--config", &cfg, "--domain", "books", "--seqrec", &t("books.seqrec"), "--fkd", &t("books.fkd"), "--epochs", "1", "--out", &t("books.stage2")],
        &["eval", "--config", &cfg, "--domain", "books", "--model", &t("books.stage2"), "--split", "test", "--out-dir", &t("eval")],
    ];
    for s in steps {
        let out = fedrec(s);
        assert!(out.status.success(), "{s:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = std::fs::read_to_string(tmp.path().join("books.csv")).unwrap();
    assert!(csv.starts_with("epoch,kd,t_re,i_re,rec,total\n"));
    let out = fedrec(&["eval", "--config", &cfg, "--domain", "books", "--model", &t("books.stage2"), "--out-dir", &t("eval")]);
    let line = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(line.starts_with("hit@1=") && line.contains(" valid="), "{line}");
    assert!(tmp.path().join("eval/eval_test.json").is_file());
}

#[test]
fn grid_sweeps_k() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_fixture(tmp.path(), 9);
    let cfg = tmp.path().join("run.cfg");
    let out = fedrec(&["run", "--config", cfg.to_str().unwrap(), "--grid", "k=4..8:4", "--out-dir", tmp.path().join("g").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("g/grid.json")).unwrap()).unwrap();
    assert_eq!(grid.as_array().unwrap().len(), 2);
}

mod common {
    pub mod gradsuite;
}

use common::gradsuite::run_suite;

#[test]
fn every_case_below_tolerance() {
    let cases = run_suite();
    for (name, r) in &cases {
        assert!(r.checked > 0, "{name}: nothing checked");
        assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn frozen_backbone_is_skipped() {
    let cases = run_suite();
    let count = |n: &str| cases.iter().find(|(c, _)| c == n).unwrap().1.checked;
    assert!(count("prompt_ce_projectors") < count("prompt_ce_full"));
}

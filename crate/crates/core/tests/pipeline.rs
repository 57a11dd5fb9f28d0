mod common;

use std::path::Path;

use seqguard::harness::{
    fake_order_effect_sweep, run_pipeline, MetricsReport, RunOptions, Stage, Variant,
};
use seqguard::Error;

const REPORTS: [&str; 6] = [
    "metrics.json",
    "manifest.json",
    "detection.csv",
    "influence.csv",
    "rectify.json",
    "compromised.json",
];

fn full() -> RunOptions {
    RunOptions {
        until: Stage::Report,
        resume: false,
    }
}

fn same_reports(a: &Path, b: &Path) {
    for name in REPORTS {
        assert!(
            common::read(&a.join(name)) == common::read(&b.join(name)),
            "{name} differs"
        );
    }
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&cfg, &a, full()).unwrap();
    run_pipeline(&cfg, &b, full()).unwrap();
    same_reports(&a, &b);
    for ckpt in ["clean", "compromised", "dualview", "rectified"] {
        let p = format!("checkpoints/{ckpt}.ckpt");
        assert!(
            common::read(&a.join(&p)) == common::read(&b.join(&p)),
            "{p}"
        );
    }
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let (whole, split) = (dir.path().join("whole"), dir.path().join("split"));
    run_pipeline(&cfg, &whole, full()).unwrap();

    let first = run_pipeline(
        &cfg,
        &split,
        RunOptions {
            until: Stage::Detect,
            resume: false,
        },
    )
    .unwrap();
    assert_eq!(first.computed.last(), Some(&Stage::Detect));
    assert!(first.metrics.is_none());

    let second = run_pipeline(
        &cfg,
        &split,
        RunOptions {
            until: Stage::Report,
            resume: true,
        },
    )
    .unwrap();
    assert_eq!(
        second.computed,
        vec![Stage::Influence, Stage::Rectify, Stage::Report]
    );
    assert!(second.resumed.contains(&Stage::Compromised));
    same_reports(&whole, &split);
}

#[test]
fn resume_recomputes_under_a_changed_config() {
    let mut cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let until = |resume| RunOptions {
        until: Stage::Clean,
        resume,
    };
    run_pipeline(&cfg, dir.path(), until(false)).unwrap();
    let again = run_pipeline(&cfg, dir.path(), until(true)).unwrap();
    assert!(again.computed.is_empty());
    cfg.target.train.epochs += 1;
    let changed = run_pipeline(&cfg, dir.path(), until(true)).unwrap();
    assert_eq!(changed.computed, vec![Stage::Data, Stage::Clean]);
}

#[test]
fn zero_injection_leaves_the_model_unchanged() {
    for zero_ratio in [true, false] {
        let mut cfg = common::tiny();
        if zero_ratio {
            cfg.injection.user_ratio = 0.0;
        } else {
            cfg.injection.intensity = 0.0;
        }
        let dir = tempfile::tempdir().unwrap();
        let m = run_pipeline(&cfg, dir.path(), full())
            .unwrap()
            .metrics
            .unwrap();
        assert_eq!(m.fake_orders, 0);
        assert_eq!(m.clean, m.compromised);
        assert_eq!(
            common::read(&dir.path().join("checkpoints/clean.ckpt")),
            common::read(&dir.path().join("checkpoints/compromised.ckpt"))
        );
    }
}

#[test]
fn metrics_report_is_well_formed() {
    let cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let m = run_pipeline(&cfg, dir.path(), full())
        .unwrap()
        .metrics
        .unwrap();
    let on_disk: MetricsReport =
        serde_json::from_slice(&common::read(&dir.path().join("metrics.json"))).unwrap();
    assert_eq!(on_disk, m);
    assert_eq!(m.config_hash, cfg.hash());
    for r in [&m.clean, &m.compromised, &m.rectified] {
        assert_eq!(r.users, m.users);
        for (&k, &hr) in &r.hr {
            assert!((0.0..=1.0).contains(&hr));
            assert!(r.ndcg_at(k) <= hr + 1e-15);
        }
        assert!(r.hr_at(10) <= r.hr_at(20));
    }
    assert!(m.rectification.rounds <= cfg.rectify.rounds);
    assert!(m.influence.harmful <= m.influence.flagged);
    assert_eq!(m.checkpoints.len(), 4);
    let timings: serde_json::Value =
        serde_json::from_slice(&common::read(&dir.path().join("timings.json"))).unwrap();
    assert!(timings["report"].as_f64().unwrap() >= 0.0);
}

#[test]
fn sweep_clean_row_reproduces_the_baseline() {
    let cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let m = run_pipeline(&cfg, &dir.path().join("p"), full())
        .unwrap()
        .metrics
        .unwrap();
    let variants = [Variant::Clean, Variant::Sequential];
    let table = fake_order_effect_sweep(&cfg, &variants, &dir.path().join("s"), false).unwrap();
    let ori = table.row("ori", Some(cfg.seed)).unwrap();
    assert_eq!(ori.metrics, m.clean);
    assert_eq!(ori.fake_orders, 0.0);
    assert!(table.row("swap", Some(cfg.seed)).unwrap().fake_orders > 0.0);
    assert_eq!(table.row("ori", None).unwrap().metrics, m.clean);

    let again = fake_order_effect_sweep(&cfg, &variants, &dir.path().join("s"), true).unwrap();
    assert_eq!(again, table);
}

#[test]
fn sweep_rejects_disabled_injection() {
    let mut cfg = common::tiny();
    cfg.injection.user_ratio = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let err = fake_order_effect_sweep(
        &cfg,
        &[Variant::Clean, Variant::Semantic],
        dir.path(),
        false,
    )
    .unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

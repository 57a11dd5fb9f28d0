use std::ffi::{c_char, CString};
use std::ptr;

use seqguard_ffi::*;

const TINY: &str = include_str!("../../core/tests/fixtures/tiny.json");

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { sg_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take(n.min(511)).map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn tiny_config() -> *mut SgConfig {
    let json = CString::new(TINY).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { sg_config_from_json(json.as_ptr(), &mut cfg) },
        SgStatus::Ok
    );
    cfg
}

#[test]
fn config_round_trip_and_errors() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(sg_config_new(&mut cfg), SgStatus::Ok);
        assert!(!cfg.is_null());
        assert_eq!(sg_config_set_seed(cfg, 9), SgStatus::Ok);
        sg_config_free(cfg);

        let bad = CString::new("{ not json").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(
            sg_config_from_json(bad.as_ptr(), &mut out),
            SgStatus::Format
        );
        assert!(out.is_null());
        assert!(!last_error().is_empty());

        let invalid = CString::new(r#"{"eval": {"ks": [5]}}"#).unwrap();
        assert_eq!(
            sg_config_from_json(invalid.as_ptr(), &mut out),
            SgStatus::InvalidArgument
        );
        assert!(last_error().contains("10"));

        assert_eq!(sg_config_new(ptr::null_mut()), SgStatus::NullPointer);
        assert!(last_error().contains("null"));
        sg_config_free(ptr::null_mut());
    }
}

#[test]
fn last_error_truncates() {
    unsafe {
        assert_eq!(
            sg_config_set_seed(ptr::null_mut(), 1),
            SgStatus::NullPointer
        );
        let full = sg_last_error(ptr::null_mut(), 0);
        assert!(full > 4);
        let mut buf = [1 as c_char; 4];
        assert_eq!(sg_last_error(buf.as_mut_ptr(), 4), full);
        assert_eq!(buf[3], 0);
    }
}

#[test]
fn jensen_shannon_through_the_abi() {
    let p = [0.5, 0.5];
    let q = [1.0, 0.0];
    let mut out = f64::NAN;
    unsafe {
        assert_eq!(
            sg_jensen_shannon(p.as_ptr(), p.as_ptr(), 2, &mut out),
            SgStatus::Ok
        );
        assert!(out.abs() < 1e-12);
        assert_eq!(
            sg_jensen_shannon(p.as_ptr(), q.as_ptr(), 2, &mut out),
            SgStatus::Ok
        );
        let expect = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln())
            + 0.5 * (1.0f64 / 0.75).ln();
        assert!((out - expect).abs() < 1e-12);
        let bad = [0.7, 0.7];
        assert_eq!(
            sg_jensen_shannon(bad.as_ptr(), q.as_ptr(), 2, &mut out),
            SgStatus::InvalidArgument
        );
    }
}

#[test]
fn corpus_and_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let cfg = tiny_config();
    unsafe {
        let mut corpus = ptr::null_mut();
        assert_eq!(sg_corpus_from_config(cfg, &mut corpus), SgStatus::Ok);
        assert_eq!(sg_corpus_num_users(corpus), 120);
        assert_eq!(sg_corpus_num_items(corpus), 60);
        let interactions = sg_corpus_num_interactions(corpus);
        assert!(interactions >= 120 * 5);
        sg_corpus_free(corpus);

        let mut summary = SgPipelineSummary {
            clean_ndcg10: 0.0,
            compromised_ndcg10: 0.0,
            rectified_ndcg10: 0.0,
            detection_precision: 0.0,
            detection_recall: 0.0,
            fake_orders: 0,
            flagged: 0,
            harmful: 0,
        };
        assert_eq!(
            sg_pipeline_run(cfg, out.as_ptr(), SgStage::Report, false, &mut summary),
            SgStatus::Ok
        );
        assert!(summary.fake_orders > 0);
        assert!(summary.flagged >= summary.harmful);
        for v in [
            summary.clean_ndcg10,
            summary.compromised_ndcg10,
            summary.rectified_ndcg10,
        ] {
            assert!((0.0..=1.0).contains(&v));
        }

        let snap = CString::new(dir.path().join("compromised.json").to_str().unwrap()).unwrap();
        let mut corpus = ptr::null_mut();
        assert_eq!(sg_corpus_load(snap.as_ptr(), &mut corpus), SgStatus::Ok);
        assert_eq!(sg_corpus_num_interactions(corpus), interactions);
        sg_corpus_free(corpus);

        let ckpt = CString::new(
            dir.path()
                .join("checkpoints/compromised.ckpt")
                .to_str()
                .unwrap(),
        )
        .unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(sg_model_load(ckpt.as_ptr(), &mut model), SgStatus::Ok);
        let v = sg_model_vocab(model);
        assert_eq!(v, 60);
        let prefix = [1u32, 2, 3];
        let mut scores = vec![f64::NAN; v];
        assert_eq!(
            sg_model_next_item_scores(model, prefix.as_ptr(), 3, scores.as_mut_ptr(), v),
            SgStatus::Ok
        );
        assert!(scores.iter().all(|s| s.is_finite()));
        assert_eq!(
            sg_model_next_item_scores(model, prefix.as_ptr(), 3, scores.as_mut_ptr(), v - 1),
            SgStatus::InvalidArgument
        );
        let oob = [1000u32];
        assert_ne!(
            sg_model_next_item_scores(model, oob.as_ptr(), 1, scores.as_mut_ptr(), v),
            SgStatus::Ok
        );
        sg_model_free(model);

        let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(sg_model_load(missing.as_ptr(), &mut model), SgStatus::Io);
        sg_config_free(cfg);
    }
}

#[test]
fn header_declares_the_surface() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/seqguard.h"))
            .unwrap();
    for name in [
        "SEQGUARD_H",
        "SG_STATUS_OK = 0",
        "SG_STATUS_DIVERGENCE = 7",
        "typedef struct SgConfig SgConfig",
        "typedef struct SgModel SgModel",
        "sg_last_error",
        "sg_config_from_json",
        "sg_corpus_load",
        "sg_model_next_item_scores",
        "sg_pipeline_run",
        "sg_jensen_shannon",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/seqguard.h");
    let Ok(status) = std::process::Command::new("cc")
        .args([
            "-fsyntax-only",
            "-x",
            "c",
            "-std=c99",
            "-Wall",
            "-Werror",
            header,
        ])
        .status()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(status.success());
}

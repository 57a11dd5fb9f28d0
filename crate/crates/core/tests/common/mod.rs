#![allow(dead_code)]

use std::path::{Path, PathBuf};

use seqguard::harness::ExperimentConfig;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::load(&fixture("tiny.json")).unwrap()
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{build_cases, evaluate_topk, RankingMetrics, Target};
use super::pipeline::{inject, load_data, train_target};
use crate::corpus::leave_one_out;
use crate::error::{Error, Result};
use crate::fsio;
use crate::injector::{FakeType, InjectionKnobs};

/// One column of the fake-order effect study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Clean,
    Repetitive(usize),
    Semantic,
    Sequential,
}

impl Variant {
    pub fn name(self) -> String {
        match self {
            Variant::Clean => "ori".into(),
            Variant::Repetitive(k) => format!("rep_{k}"),
            Variant::Semantic => "sem".into(),
            Variant::Sequential => "swap".into(),
        }
    }

    fn knobs(self, base: &InjectionKnobs) -> Option<InjectionKnobs> {
        let (kind, k) = match self {
            Variant::Clean => return None,
            Variant::Repetitive(k) => (FakeType::Repetitive, k),
            Variant::Semantic => (FakeType::Semantic, base.repeat_length),
            Variant::Sequential => (FakeType::Sequential, base.repeat_length),
        };
        Some(InjectionKnobs {
            type_mix: InjectionKnobs::only(kind),
            repeat_length: k,
            ..base.clone()
        })
    }
}

/// The variants named by the sweep section of `cfg`, clean first.
pub fn sweep_variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let mut v = vec![Variant::Clean];
    v.extend(
        cfg.sweep
            .repeat_lengths
            .iter()
            .map(|&k| Variant::Repetitive(k)),
    );
    if cfg.sweep.semantic {
        v.push(Variant::Semantic);
    }
    if cfg.sweep.sequential {
        v.push(Variant::Sequential);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub variant: String,
    /// `None` for the across-seed mean.
    pub seed: Option<u64>,
    pub fake_orders: f64,
    pub metrics: RankingMetrics,
    /// Relative NDCG@10 change against the clean row of the same seed (or mean).
    pub ndcg10_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub ks: Vec<usize>,
    pub rows: Vec<EffectRow>,
}

impl EffectTable {
    pub fn row(&self, variant: &str, seed: Option<u64>) -> Option<&EffectRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,fake_orders");
        for k in &self.ks {
            write!(out, ",hr@{k},ndcg@{k}").unwrap();
        }
        out.push_str(",ndcg@10_change\n");
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
            write!(out, "{},{},{}", r.variant, seed, r.fake_orders).unwrap();
            for &k in &self.ks {
                write!(out, ",{:?},{:?}", r.metrics.hr_at(k), r.metrics.ndcg_at(k)).unwrap();
            }
            writeln!(out, ",{:?}", r.ndcg10_change).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    config_hash: String,
    fake_orders: usize,
    metrics: RankingMetrics,
}

/// Trains and evaluates the deployed recommender under each variant for each
/// seed of `cfg.sweep.seeds`, then appends per-variant means. Writes
/// `effects.csv` and `effects.json` into `out`; with `resume`, finished cells
/// under `out/sweep` are reused.
pub fn fake_order_effect_sweep(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    out: &Path,
    resume: bool,
) -> Result<EffectTable> {
    cfg.validate()?;
    if !cfg.injection_enabled() && variants.iter().any(|v| *v != Variant::Clean) {
        return Err(Error::invalid(
            "the effect sweep needs positive user_ratio and intensity",
        ));
    }
    if cfg.sweep.seeds.is_empty() {
        return Err(Error::invalid("the effect sweep needs at least one seed"));
    }
    let ks = cfg.eval.ks.clone();
    let mut per_seed: Vec<Vec<(usize, RankingMetrics)>> = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let cfg_s = ExperimentConfig {
            seed,
            ..cfg.clone()
        };
        let dir = out.join("sweep").join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (corpus, sem) = load_data(&cfg_s)?;
        let split = leave_one_out(&corpus);
        let cases = build_cases(
            &corpus,
            &corpus,
            &split,
            Target::Test,
            cfg.eval.negatives,
            &cfg_s.stage_rng("eval.test"),
        )?;
        let mut cells = Vec::new();
        for &v in variants {
            let cfg_v = match v.knobs(&cfg.injection) {
                Some(knobs) => ExperimentConfig {
                    injection: knobs,
                    ..cfg_s.clone()
                },
                None => cfg_s.clone(),
            };
            let record_path = dir.join(format!("{}.json", v.name()));
            let hash = cfg_v.hash();
            if resume {
                if let Ok(rec) = fsio::read_json::<CellRecord>(&record_path) {
                    if rec.config_hash == hash {
                        log::info!("sweep seed {seed} {}: resumed", v.name());
                        cells.push((rec.fake_orders, rec.metrics));
                        continue;
                    }
                }
            }
            log::info!("sweep seed {seed} {}: training", v.name());
            let (train_corpus, fakes) = match v {
                Variant::Clean => (corpus.clone(), 0),
                _ => {
                    let (c, m) = inject(&cfg_v, &corpus, &sem)?;
                    (c, m.entries.len())
                }
            };
            let (model, params, _) = train_target(&cfg_v, &train_corpus)?;
            model.save(&params, &dir.join(format!("{}.ckpt", v.name())))?;
            let metrics = evaluate_topk(&model, params.as_slice(), &cases, &ks)?;
            fsio::write_json(
                &record_path,
                &CellRecord {
                    config_hash: hash,
                    fake_orders: fakes,
                    metrics: metrics.clone(),
                },
            )?;
            cells.push((fakes, metrics));
        }
        per_seed.push(cells);
    }

    let change = |x: f64, base: f64| if base > 0.0 { (x - base) / base } else { 0.0 };
    let mut rows = Vec::new();
    for (cells, &seed) in per_seed.iter().zip(&cfg.sweep.seeds) {
        let base = cells[0].1.ndcg_at(10);
        for (v, (fakes, m)) in variants.iter().zip(cells) {
            rows.push(EffectRow {
                variant: v.name(),
                seed: Some(seed),
                fake_orders: *fakes as f64,
                ndcg10_change: change(m.ndcg_at(10), base),
                metrics: m.clone(),
            });
        }
    }
    let n = per_seed.len() as f64;
    let mut means = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        let mut m = RankingMetrics {
            users: per_seed[0][i].1.users,
            hr: BTreeMap::new(),
            ndcg: BTreeMap::new(),
        };
        for &k in &ks {
            m.hr.insert(k, per_seed.iter().map(|c| c[i].1.hr_at(k)).sum::<f64>() / n);
            m.ndcg.insert(
                k,
                per_seed.iter().map(|c| c[i].1.ndcg_at(k)).sum::<f64>() / n,
            );
        }
        let fakes = per_seed.iter().map(|c| c[i].0 as f64).sum::<f64>() / n;
        means.push((v.name(), fakes, m));
    }
    let base = means[0].2.ndcg_at(10);
    for (name, fakes, m) in means {
        rows.push(EffectRow {
            variant: name,
            seed: None,
            fake_orders: fakes,
            ndcg10_change: change(m.ndcg_at(10), base),
            metrics: m,
        });
    }
    let table = EffectTable { ks, rows };
    fsio::write_atomic(&out.join("effects.csv"), table.to_csv().as_bytes())?;
    fsio::write_json(&out.join("effects.json"), &table)?;
    Ok(table)
}

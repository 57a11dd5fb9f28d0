use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_negatives, InteractionCorpus, LooSplit};
use crate::error::Result;
use crate::numkit::SeededRng;
use crate::optim::convergence_epoch;
use crate::seqrec::SequenceModel;

/// Which leave-one-out target a case ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Validation,
    Test,
}

/// One ranking query: score `target` against `negatives` after `input`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub input: Vec<u32>,
    pub target: u32,
    pub negatives: Vec<u32>,
}

/// Ranking queries for every user of `split`. Inputs come from `inputs` (the
/// training prefix, plus the validation item for test queries); negatives are
/// drawn from items absent from the user's sequence in `reference`, one child
/// stream of `rng` per user so every model sees the same candidates.
pub fn build_cases(
    reference: &InteractionCorpus,
    inputs: &InteractionCorpus,
    split: &LooSplit,
    target: Target,
    negatives: usize,
    rng: &SeededRng,
) -> Result<Vec<EvalCase>> {
    split
        .users
        .iter()
        .map(|u| {
            let seq = &inputs.user(u.user).items;
            let n = seq.len();
            let (input, t) = match target {
                Target::Validation => (seq[..n - 2].to_vec(), u.valid),
                Target::Test => (seq[..n - 1].to_vec(), u.test),
            };
            Ok(EvalCase {
                user: u.user,
                input,
                target: t,
                negatives: sample_negatives(
                    reference,
                    u.user,
                    negatives,
                    &mut rng.child(u.user as u64),
                )?,
            })
        })
        .collect()
}

/// HR@k and NDCG@k per cutoff.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl RankingMetrics {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// 1-based rank of the positive; ties count against it.
pub fn rank_of(positive: f64, negatives: &[f64]) -> usize {
    if positive.is_nan() {
        return negatives.len() + 1;
    }
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> RankingMetrics {
    let n = ranks.len().max(1) as f64;
    let mut out = RankingMetrics {
        users: ranks.len(),
        ..Default::default()
    };
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        let gain: f64 = ranks
            .iter()
            .filter(|&&r| r <= k)
            .map(|&r| 1.0 / ((r + 1) as f64).log2())
            .sum();
        out.hr.insert(k, hits as f64 / n);
        out.ndcg.insert(k, gain / n);
    }
    out
}

/// Ranks of the positive of each case under `model`.
pub fn case_ranks<M: SequenceModel>(
    model: &M,
    params: &[f64],
    cases: &[EvalCase],
) -> Result<Vec<usize>> {
    cases
        .par_iter()
        .map(|c| {
            let logits = model.last_logits(params, &c.input)?;
            let neg: Vec<f64> = c.negatives.iter().map(|&i| logits[i as usize]).collect();
            Ok(rank_of(logits[c.target as usize], &neg))
        })
        .collect()
}

/// Leave-one-out HR@k / NDCG@k of `model` over `cases`.
pub fn evaluate_topk<M: SequenceModel>(
    model: &M,
    params: &[f64],
    cases: &[EvalCase],
    ks: &[usize],
) -> Result<RankingMetrics> {
    Ok(metrics_from_ranks(&case_ranks(model, params, cases)?, ks))
}

/// Epochs (or rounds) to convergence, reported on an evaluation cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub stage: String,
    /// Rounded up to a multiple of the cadence; the trace length when the
    /// rule never fired.
    pub reported: usize,
    pub raw: Option<usize>,
    pub converged: bool,
}

pub fn round_up(epoch: usize, cadence: usize) -> usize {
    let c = cadence.max(1);
    epoch.div_ceil(c) * c
}

/// Applies the training convergence rule (relative improvement below 1e-3 for
/// three consecutive epochs) to each trace.
pub fn convergence_report(traces: &[(String, Vec<f64>)], cadence: usize) -> Vec<ConvergenceRow> {
    traces
        .iter()
        .map(|(stage, trace)| match convergence_epoch(trace, 1e-3, 3) {
            Some(e) => ConvergenceRow {
                stage: stage.clone(),
                reported: round_up(e, cadence),
                raw: Some(e),
                converged: true,
            },
            None => ConvergenceRow {
                stage: stage.clone(),
                reported: trace.len(),
                raw: None,
                converged: false,
            },
        })
        .collect()
}

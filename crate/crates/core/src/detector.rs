//! Per-position anomaly scoring of training prefixes.
//!
//! Four signals per position: prediction disagreement between the two views
//! (JSD), representation disagreement (`(1 - cos)/2`), popularity deviation
//! from the user's own profile, and local bigram disruption. Each is
//! z-normalized, combined linearly, smoothed along the sequence and
//! thresholded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionCorpus;
use crate::dualview::{DualView, View};
use crate::error::{Error, Result};
use crate::fsio;
use crate::injector::{apply_plan, plan_allocation, FakeOrderManifest, FakeType, InjectionKnobs};
use crate::numkit::{cosine_similarity, dot, jsd_raw, SeededRng};
use crate::params::ParamVector;
use crate::semantics::SemanticTable;

pub const NUM_FEATURES: usize = 4;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = ["delta_p", "delta_r", "alpha_p", "beta_s"];

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub weights: [f64; NUM_FEATURES],
    pub rho: f64,
    /// Fixed threshold; when absent it is tuned on calibration data or
    /// defaults to the 95th percentile of the scores.
    pub threshold: Option<f64>,
    pub beta_f: f64,
    /// Fraction of users copied into the calibration slice.
    pub calibration_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            weights: [0.25; NUM_FEATURES],
            rho: 0.3,
            threshold: None,
            beta_f: 2.0,
            calibration_fraction: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("detector weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid("smoothing rho must lie in [0, 1)"));
        }
        if !(self.beta_f > 0.0) {
            return Err(Error::invalid("beta_f must be positive"));
        }
        Ok(())
    }
}

/// Feature rows of one user's training prefix, one per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserFeatures {
    pub user: usize,
    pub rows: Vec<[f64; NUM_FEATURES]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnomalyFeatures {
    pub users: Vec<UserFeatures>,
}

impl AnomalyFeatures {
    pub fn positions(&self) -> usize {
        self.users.iter().map(|u| u.rows.len()).sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64; NUM_FEATURES]> {
        self.users.iter().flat_map(|u| u.rows.iter())
    }
}

/// `alpha_p` for every position of `seq` given global item counts.
pub fn popularity_deviation(seq: &[u32], counts: &[u64]) -> Vec<f64> {
    if seq.is_empty() {
        return Vec::new();
    }
    let x: Vec<f64> = seq
        .iter()
        .map(|&i| (1.0 + counts[i as usize] as f64).ln())
        .collect();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    x.iter()
        .map(|v| (v - mean).abs() / (sd + STD_FLOOR))
        .collect()
}

/// `beta_s` for every position: mean negative log smoothed bigram probability
/// of the transitions into and out of the position (one-sided at the ends).
pub fn context_disruption(seq: &[u32], corpus: &InteractionCorpus) -> Vec<f64> {
    let bigram = corpus.bigram();
    (0..seq.len())
        .map(|k| {
            let mut acc = 0.0;
            let mut n = 0.0;
            if k > 0 {
                acc -= bigram.prob(seq[k - 1], seq[k]).ln();
                n += 1.0;
            }
            if k + 1 < seq.len() {
                acc -= bigram.prob(seq[k], seq[k + 1]).ln();
                n += 1.0;
            }
            if n > 0.0 {
                acc / n
            } else {
                0.0
            }
        })
        .collect()
}

/// Feature rows for `seq`; `stats` supplies item counts and bigram statistics.
pub fn sequence_features(
    model: &DualView,
    params: &ParamVector,
    tables: &crate::dualview::ItemTables,
    stats: &InteractionCorpus,
    seq: &[u32],
) -> Result<Vec<[f64; NUM_FEATURES]>> {
    let s = model.encode(params, tables, View::Semantic, seq)?;
    let c = model.encode(params, tables, View::Collaborative, seq)?;
    let alpha = popularity_deviation(seq, stats.counts());
    let beta = context_disruption(seq, stats);
    Ok((0..seq.len())
        .map(|k| {
            let dp = jsd_raw(&s.dists[k], &c.dists[k]);
            let dr = match cosine_similarity(s.state(k), c.state(k)) {
                Ok(cos) => ((1.0 - cos) / 2.0).clamp(0.0, 1.0),
                Err(_) => 0.5,
            };
            [dp, dr, alpha[k], beta[k]]
        })
        .collect())
}

/// Features for every training-prefix position of the listed sequences.
pub fn features_of(
    model: &DualView,
    params: &ParamVector,
    stats: &InteractionCorpus,
    seqs: &[(usize, &[u32])],
) -> Result<AnomalyFeatures> {
    let tables = model.item_inputs(params)?;
    let users = seqs
        .par_iter()
        .map(|&(user, seq)| {
            Ok(UserFeatures {
                user,
                rows: sequence_features(model, params, &tables, stats, seq)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnomalyFeatures { users })
}

/// Features for all training-prefix positions of `corpus`.
pub fn features(
    model: &DualView,
    params: &ParamVector,
    corpus: &InteractionCorpus,
) -> Result<AnomalyFeatures> {
    let seqs: Vec<(usize, &[u32])> = corpus
        .users()
        .iter()
        .enumerate()
        .map(|(u, s)| (u, s.train_prefix()))
        .collect();
    features_of(model, params, corpus, &seqs)
}

/// Column-wise z-normalization `N(.)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl Normalizer {
    pub fn fit(features: &AnomalyFeatures) -> Self {
        let n = features.positions().max(1) as f64;
        let mut mean = [0.0; NUM_FEATURES];
        for r in features.rows() {
            for j in 0..NUM_FEATURES {
                mean[j] += r[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; NUM_FEATURES];
        for r in features.rows() {
            for j in 0..NUM_FEATURES {
                std[j] += (r[j] - mean[j]).powi(2);
            }
        }
        std.iter_mut()
            .for_each(|s| *s = (*s / n).sqrt().max(STD_FLOOR));
        Normalizer { mean, std }
    }

    pub fn apply(&self, row: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut z = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            z[j] = (row[j] - self.mean[j]) / self.std[j];
        }
        z
    }
}

/// `u(k) = w . N(f_k)` per user, with `N` fitted on `features` themselves.
pub fn unified_score(features: &AnomalyFeatures, w: &[f64; NUM_FEATURES]) -> Vec<Vec<f64>> {
    scores_with(features, &Normalizer::fit(features), w)
}

pub fn scores_with(
    features: &AnomalyFeatures,
    norm: &Normalizer,
    w: &[f64; NUM_FEATURES],
) -> Vec<Vec<f64>> {
    features
        .users
        .iter()
        .map(|u| u.rows.iter().map(|r| dot(w, &norm.apply(r))).collect())
        .collect()
}

/// `U(k) = (1 - rho) u(k) + rho * mean(available neighbours)`.
pub fn smooth(u: &[f64], rho: f64) -> Vec<f64> {
    if u.len() < 2 {
        return u.to_vec();
    }
    (0..u.len())
        .map(|k| {
            let nb = match (k.checked_sub(1), u.get(k + 1)) {
                (Some(l), Some(r)) => 0.5 * (u[l] + r),
                (Some(l), None) => u[l],
                (None, Some(r)) => *r,
                (None, None) => u[k],
            };
            (1.0 - rho) * u[k] + rho * nb
        })
        .collect()
}

/// Result of weight fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub weights: [f64; NUM_FEATURES],
    /// Raw logistic coefficients before clipping.
    pub coefficients: [f64; NUM_FEATURES],
    pub intercept: f64,
    /// Deviance reduction of the fit against the intercept-only model.
    pub deviance_gain: f64,
    pub fallback: bool,
}

const LOGIT_STEPS: usize = 500;
const LOGIT_STEP: f64 = 0.1;
const LOGIT_L2: f64 = 1e-4;
/// Chi-square critical value, 4 degrees of freedom, p = 0.001.
const DEVIANCE_CRITICAL: f64 = 18.467;

fn log_loss(z: &[[f64; NUM_FEATURES]], y: &[bool], beta: &[f64; NUM_FEATURES], b0: f64) -> f64 {
    z.iter()
        .zip(y)
        .map(|(x, &t)| {
            let s = dot(beta, x) + b0;
            // log(1 + e^s) - t*s, computed stably.
            let softplus = if s > 0.0 {
                s + (-s).exp().ln_1p()
            } else {
                s.exp().ln_1p()
            };
            softplus - if t { s } else { 0.0 }
        })
        .sum()
}

/// Logistic regression of `labels` on normalized feature rows by batch
/// gradient descent; negative coefficients are clipped and the rest
/// renormalized to sum 1. Falls back to uniform weights when there are no
/// rows, only one class, no positive coefficient, or no significant signal
/// (deviance gain below the chi-square critical value).
pub fn fit_weights(z: &[[f64; NUM_FEATURES]], labels: &[bool]) -> Result<WeightFit> {
    if z.len() != labels.len() {
        return Err(Error::invalid("one label per feature row required"));
    }
    let uniform = [1.0 / NUM_FEATURES as f64; NUM_FEATURES];
    let fallback = |coefficients, intercept, deviance_gain| WeightFit {
        weights: uniform,
        coefficients,
        intercept,
        deviance_gain,
        fallback: true,
    };
    let n = z.len();
    let pos = labels.iter().filter(|&&t| t).count();
    if n == 0 || pos == 0 || pos == n {
        log::warn!(
            "calibration labels are degenerate ({pos} of {n} positive); using uniform weights"
        );
        return Ok(fallback([0.0; NUM_FEATURES], 0.0, 0.0));
    }
    let mut beta = [0.0; NUM_FEATURES];
    let mut b0 = 0.0;
    let inv = 1.0 / n as f64;
    for _ in 0..LOGIT_STEPS {
        let mut g = [0.0; NUM_FEATURES];
        let mut g0 = 0.0;
        for (x, &t) in z.iter().zip(labels) {
            let p = 1.0 / (1.0 + (-(dot(&beta, x) + b0)).exp());
            let r = p - if t { 1.0 } else { 0.0 };
            for j in 0..NUM_FEATURES {
                g[j] += r * x[j];
            }
            g0 += r;
        }
        for j in 0..NUM_FEATURES {
            beta[j] -= LOGIT_STEP * (g[j] * inv + LOGIT_L2 * beta[j]);
        }
        b0 -= LOGIT_STEP * g0 * inv;
    }
    let rate = pos as f64 / n as f64;
    let null = log_loss(z, labels, &[0.0; NUM_FEATURES], (rate / (1.0 - rate)).ln());
    let gain = 2.0 * (null - log_loss(z, labels, &beta, b0));
    if !(gain >= DEVIANCE_CRITICAL) {
        log::warn!("calibration features carry no significant signal (deviance gain {gain:.2}); using uniform weights");
        return Ok(fallback(beta, b0, gain));
    }
    let clipped: Vec<f64> = beta.iter().map(|&c| c.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0) {
        log::warn!("no feature has a positive coefficient; using uniform weights");
        return Ok(fallback(beta, b0, gain));
    }
    let mut weights = [0.0; NUM_FEATURES];
    for j in 0..NUM_FEATURES {
        weights[j] = clipped[j] / total;
    }
    Ok(WeightFit {
        weights,
        coefficients: beta,
        intercept: b0,
        deviance_gain: gain,
        fallback: false,
    })
}

/// Linear-interpolation percentile of already sorted values, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub f_beta: f64,
    /// True when no positives were available and the 95th percentile was used.
    pub defaulted: bool,
}

pub fn f_beta(tp: usize, fp: usize, fn_: usize, beta: f64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (b2 * p + r)
}

/// Sweeps the 80th..99th percentiles of `scores` and keeps the one with the
/// best F_beta for flags `score > threshold`; ties go to the smaller threshold.
pub fn tune_threshold(scores: &[f64], labels: &[bool], beta: f64) -> Result<ThresholdChoice> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid("threshold tuning needs one label per score"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if !labels.iter().any(|&t| t) {
        log::warn!("no positives in calibration data; threshold defaults to the 95th percentile");
        return Ok(ThresholdChoice {
            threshold: percentile(&sorted, 95.0),
            f_beta: 0.0,
            defaulted: true,
        });
    }
    let mut best: Option<ThresholdChoice> = None;
    for q in 80..=99 {
        let t = percentile(&sorted, q as f64);
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&s, &y) in scores.iter().zip(labels) {
            match (s > t, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let f = f_beta(tp, fp, fn_, beta);
        let better = match best {
            None => true,
            Some(b) => f > b.f_beta || (f == b.f_beta && t < b.threshold),
        };
        if better {
            best = Some(ThresholdChoice {
                threshold: t,
                f_beta: f,
                defaulted: false,
            });
        }
    }
    Ok(best.expect("twenty candidates evaluated"))
}

/// Held-aside calibration data: copies of a user slice with a secondary,
/// fully known injection.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub users: Vec<usize>,
    pub sequences: Vec<Vec<u32>>,
    pub manifest: FakeOrderManifest,
}

impl CalibrationSet {
    /// Picks `fraction` of the users of `corpus` and injects fake orders into
    /// every one of them at `knobs.intensity` with the configured type mix.
    pub fn build(
        corpus: &InteractionCorpus,
        fraction: f64,
        knobs: &InjectionKnobs,
        semantics: Option<&SemanticTable>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let n = corpus.num_users();
        let take = ((fraction * n as f64).round() as usize).clamp(1, n);
        let mut users = rng.sample_indices(n, take);
        users.sort_unstable();
        let slice =
            corpus.with_sequences(users.iter().map(|&u| corpus.user(u).clone()).collect())?;
        let knobs = InjectionKnobs {
            user_ratio: 1.0,
            ..knobs.clone()
        };
        let plan = plan_allocation(&slice, &knobs, &mut rng.derive("plan"))?;
        let (injected, manifest) = apply_plan(&slice, &plan, semantics, &mut rng.derive("apply"))?;
        let sequences = injected
            .users()
            .iter()
            .map(|s| s.train_prefix().to_vec())
            .collect();
        Ok(CalibrationSet {
            users,
            sequences,
            manifest,
        })
    }
}

/// Scores, flags and (optionally) ground truth per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionScore {
    pub user: usize,
    pub position: usize,
    pub features: [f64; NUM_FEATURES],
    pub u: f64,
    pub smoothed: f64,
    pub flag: bool,
    pub truth: Option<FakeType>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl QualityMetrics {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        QualityMetrics {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: f_beta(tp, fp, fn_, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub threshold: f64,
    pub threshold_source: String,
    pub weights: [f64; NUM_FEATURES],
    pub weight_fit: Option<WeightFit>,
    pub normalizer: Normalizer,
    pub rho: f64,
    pub positions: usize,
    pub flagged: usize,
    /// Present when a manifest was supplied. Per-type precision counts the
    /// type's hits against all flagged genuine positions.
    pub overall: Option<QualityMetrics>,
    pub per_type: BTreeMap<FakeType, QualityMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub summary: DetectionSummary,
    pub positions: Vec<PositionScore>,
}

impl DetectionReport {
    /// The suspicious set `I_d` as (user, position) pairs.
    pub fn suspicious(&self) -> Vec<(usize, usize)> {
        self.positions
            .iter()
            .filter(|p| p.flag)
            .map(|p| (p.user, p.position))
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, &self.summary)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("user,position,delta_p,delta_r,alpha_p,beta_s,u,U,flag,truth\n");
        for p in &self.positions {
            let f = &p.features;
            writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
                p.user,
                p.position,
                f[0],
                f[1],
                f[2],
                f[3],
                p.u,
                p.smoothed,
                u8::from(p.flag),
                p.truth.map_or("", FakeType::as_str)
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Applies a fixed threshold to already computed scores and, with a manifest,
/// compares the flags with the truth.
pub fn assemble_report(
    features: &AnomalyFeatures,
    u: &[Vec<f64>],
    smoothed: &[Vec<f64>],
    threshold: f64,
    manifest: Option<&FakeOrderManifest>,
) -> (
    Vec<PositionScore>,
    Option<QualityMetrics>,
    BTreeMap<FakeType, QualityMetrics>,
) {
    let labels = manifest.map(FakeOrderManifest::labels).unwrap_or_default();
    let mut positions = Vec::with_capacity(features.positions());
    for (uf, (us, ss)) in features.users.iter().zip(u.iter().zip(smoothed)) {
        for (k, row) in uf.rows.iter().enumerate() {
            positions.push(PositionScore {
                user: uf.user,
                position: k,
                features: *row,
                u: us[k],
                smoothed: ss[k],
                flag: ss[k] > threshold,
                truth: labels.get(&(uf.user, k)).copied(),
            });
        }
    }
    let mut per_type = BTreeMap::new();
    let overall = manifest.map(|m| {
        let fp = positions
            .iter()
            .filter(|p| p.flag && p.truth.is_none())
            .count();
        let tp = positions
            .iter()
            .filter(|p| p.flag && p.truth.is_some())
            .count();
        // Manifest entries are all inside scored prefixes, so misses = total - hits.
        let total = m.entries.len();
        for kind in FakeType::ALL {
            let n = m.count(kind);
            if n == 0 {
                continue;
            }
            let hits = positions
                .iter()
                .filter(|p| p.flag && p.truth == Some(kind))
                .count();
            per_type.insert(kind, QualityMetrics::from_counts(hits, fp, n - hits));
        }
        QualityMetrics::from_counts(tp, fp, total.saturating_sub(tp))
    });
    (positions, overall, per_type)
}

/// Features, scores and flags for all training-prefix positions of `corpus`.
/// With a calibration set, weights and threshold are fitted on it (using the
/// normalizer of the main corpus); otherwise the configured weights are used
/// and the threshold is the configured one or the 95th score percentile.
pub fn detect(
    model: &DualView,
    params: &ParamVector,
    corpus: &InteractionCorpus,
    config: &DetectorConfig,
    calibration: Option<&CalibrationSet>,
    manifest: Option<&FakeOrderManifest>,
) -> Result<DetectionReport> {
    config.validate()?;
    let feats = features(model, params, corpus)?;
    let norm = Normalizer::fit(&feats);

    let mut weights = config.weights;
    let mut weight_fit = None;
    let mut tuned = None;
    if let Some(cal) = calibration {
        let seqs: Vec<(usize, &[u32])> = cal
            .users
            .iter()
            .copied()
            .zip(cal.sequences.iter().map(Vec::as_slice))
            .collect();
        // Calibration manifest users index the slice, so relabel them.
        let cfeats = features_of(model, params, corpus, &seqs)?;
        let labels = cal.manifest.labels();
        let mut z = Vec::new();
        let mut y = Vec::new();
        for (slot, uf) in cfeats.users.iter().enumerate() {
            for (k, row) in uf.rows.iter().enumerate() {
                z.push(norm.apply(row));
                y.push(labels.contains_key(&(slot, k)));
            }
        }
        let fit = fit_weights(&z, &y)?;
        weights = fit.weights;
        weight_fit = Some(fit);
        let cu = scores_with(&cfeats, &norm, &weights);
        let cs: Vec<f64> = cu.iter().flat_map(|u| smooth(u, config.rho)).collect();
        tuned = Some(tune_threshold(&cs, &y, config.beta_f)?);
    }

    let u = scores_with(&feats, &norm, &weights);
    let smoothed: Vec<Vec<f64>> = u.iter().map(|x| smooth(x, config.rho)).collect();
    let (threshold, source) = match (config.threshold, tuned) {
        (Some(t), _) => (t, "configured".to_string()),
        (None, Some(c)) if !c.defaulted => (c.threshold, "calibrated".to_string()),
        _ => {
            let mut all: Vec<f64> = smoothed.iter().flatten().copied().collect();
            if all.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            all.sort_by(f64::total_cmp);
            (
                percentile(&all, 95.0),
                "default-95th-percentile".to_string(),
            )
        }
    };
    let (positions, overall, per_type) =
        assemble_report(&feats, &u, &smoothed, threshold, manifest);
    let flagged = positions.iter().filter(|p| p.flag).count();
    Ok(DetectionReport {
        summary: DetectionSummary {
            threshold,
            threshold_source: source,
            weights,
            weight_fit,
            normalizer: norm,
            rho: config.rho,
            positions: positions.len(),
            flagged,
            overall,
            per_type,
        },
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{UserSequence, Vocab};
    use crate::dualview::DualViewConfig;
    use crate::semantics::synth_semantics;
    use proptest::prelude::*;

    fn corpus(seqs: Vec<Vec<u32>>, v: usize) -> InteractionCorpus {
        let vocab = Vocab::from_ids((0..v).map(|i| format!("i{i}")).collect()).unwrap();
        let users = seqs
            .into_iter()
            .enumerate()
            .map(|(u, items)| UserSequence {
                id: format!("u{u}"),
                items,
            })
            .collect();
        InteractionCorpus::from_sequences(vocab, users).unwrap()
    }

    #[test]
    fn identical_views_have_zero_disagreement() {
        let v = 8;
        let cats: Vec<u32> = (0..v as u32).map(|i| i % 2).collect();
        let table = synth_semantics(&cats, 8, 0.1, &mut SeededRng::new(1)).unwrap();
        let m = DualView::new(
            DualViewConfig {
                vocab: v,
                hidden: 4,
                ..Default::default()
            },
            &table,
        )
        .unwrap();
        let mut p = m.init_params(&mut SeededRng::new(2));
        for name in [
            "semantic.adapter2_w",
            "semantic.residual_w",
            "collaborative.fusion_w",
            "collaborative.id_embeddings",
        ] {
            p.block_mut(name).iter_mut().for_each(|x| *x = 0.0);
        }
        let s = m.layout().prefix_range("semantic.encoder");
        let c = m.layout().prefix_range("collaborative.encoder");
        let mut rng = SeededRng::new(3);
        let enc: Vec<f64> = s.clone().map(|_| 0.5 * rng.normal()).collect();
        p.as_mut_slice()[s].copy_from_slice(&enc);
        p.as_mut_slice()[c].copy_from_slice(&enc);
        let corp = corpus(vec![vec![0, 1, 2, 3, 4, 5, 6], vec![7, 6, 5, 4, 3, 2]], v);
        let f = features(&m, &p, &corp).unwrap();
        for r in f.rows() {
            assert_eq!(r[0], 0.0);
            assert!(r[1].abs() < 1e-12);
        }
    }

    #[test]
    fn popularity_deviation_examples() {
        assert!(popularity_deviation(&[0, 1, 2], &[5, 5, 5])
            .iter()
            .all(|&a| a.abs() < 1e-6));
        let a = popularity_deviation(&[0, 1], &[0, 100]);
        assert!((a[0] - 1.0).abs() < 1e-6 && (a[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn planted_transition_disrupts_context() {
        // a=0 is always followed by b=1; one user has a->z (z=2).
        let mut seqs: Vec<Vec<u32>> = (0..20).map(|_| vec![3, 0, 1, 4, 0, 1, 3, 4, 0]).collect();
        seqs.push(vec![3, 0, 2, 4, 0, 1, 3, 4, 0]);
        let c = corpus(seqs, 5);
        let planted = context_disruption(c.user(20).train_prefix(), &c)[2];
        for u in c.users() {
            let prefix = u.train_prefix();
            let beta = context_disruption(prefix, &c);
            for k in 1..prefix.len() {
                if prefix[k - 1] == 0 && prefix[k] == 1 {
                    assert!(planted > beta[k]);
                }
            }
        }
    }

    fn table(rows: Vec<[f64; 4]>) -> AnomalyFeatures {
        AnomalyFeatures {
            users: vec![UserFeatures { user: 0, rows }],
        }
    }

    #[test]
    fn unified_score_examples() {
        let rows = vec![
            [0.1, 3.0, 1.0, 2.0],
            [0.5, 1.0, 1.0, 0.0],
            [0.3, 2.0, 1.0, 1.0],
            [0.0, 5.0, 1.0, 7.0],
        ];
        let f = table(rows.clone());
        let u = &unified_score(&f, &[1.0, 0.0, 0.0, 0.0])[0];
        let mut by_u: Vec<usize> = (0..4).collect();
        by_u.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
        let mut by_f: Vec<usize> = (0..4).collect();
        by_f.sort_by(|&a, &b| rows[a][0].total_cmp(&rows[b][0]));
        assert_eq!(by_u, by_f);

        // Constant third column contributes nothing; hand summation oracle.
        let u = &unified_score(&f, &[0.25; 4])[0];
        let z = |j: usize, x: f64| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / 4.0;
            let s = (col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 4.0)
                .sqrt()
                .max(1e-8);
            (x - m) / s
        };
        for (k, r) in rows.iter().enumerate() {
            let hand = 0.25 * (z(0, r[0]) + z(1, r[1]) + 0.0 + z(3, r[3]));
            assert!((u[k] - hand).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_examples() {
        let u = vec![1.0, 2.0, 3.0];
        assert_eq!(smooth(&u, 0.0), u);
        assert_eq!(smooth(&[2.0; 5], 0.3), vec![2.0; 5]);
        let s = smooth(&[0.0, 0.0, 10.0, 0.0, 0.0], 0.3);
        assert!((s[2] - 7.0).abs() < 1e-12);
        assert_eq!(smooth(&[4.0], 0.3), vec![4.0]);
    }

    #[test]
    fn separable_feature_dominates() {
        let mut rng = SeededRng::new(3);
        let mut z = Vec::new();
        let mut y = Vec::new();
        for i in 0..400 {
            let t = i % 4 == 0;
            let sep = if t {
                1.5 + rng.uniform()
            } else {
                -1.5 + rng.uniform()
            };
            z.push([rng.normal(), sep, rng.normal(), rng.normal()]);
            y.push(t);
        }
        let fit = fit_weights(&z, &y).unwrap();
        assert!(!fit.fallback);
        assert!(fit.weights[1] > 0.9, "{:?}", fit.weights);
        assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let empty = fit_weights(&[], &[]).unwrap();
        assert_eq!(empty.weights, [0.25; 4]);
        assert!(empty.fallback);

        // Permutation control: labels independent of the features.
        let mut perm = y.clone();
        rng.shuffle(&mut perm);
        let fit = fit_weights(&z, &perm).unwrap();
        assert!(fit.weights.iter().all(|&w| w <= 0.5), "{:?}", fit.weights);
    }

    fn sweep_oracle(scores: &[f64], labels: &[bool], beta: f64) -> f64 {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut best = (f64::NEG_INFINITY, f64::INFINITY);
        for q in 80..=99 {
            let pos = q as f64 / 100.0 * (sorted.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            let t = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, y)| **s > t && **y)
                .count() as f64;
            let fp = scores
                .iter()
                .zip(labels)
                .filter(|(s, y)| **s > t && !**y)
                .count() as f64;
            let pos_n = labels.iter().filter(|y| **y).count() as f64;
            let f = if tp == 0.0 {
                0.0
            } else {
                let p = tp / (tp + fp);
                let r = tp / pos_n;
                (1.0 + beta * beta) * p * r / (beta * beta * p + r)
            };
            if f > best.0 || (f == best.0 && t < best.1) {
                best = (f, t);
            }
        }
        best.1
    }

    #[test]
    fn threshold_examples() {
        // Perfect separation: the top 3 of 20 are positive.
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let labels: Vec<bool> = (0..20).map(|i| i >= 17).collect();
        let c = tune_threshold(&scores, &labels, 2.0).unwrap();
        assert_eq!(c.f_beta, 1.0);
        assert!(c.threshold >= 16.0 && c.threshold < 17.0);
        assert_eq!(c.threshold, sweep_oracle(&scores, &labels, 2.0));

        let all = vec![true; 20];
        let c = tune_threshold(&scores, &all, 2.0).unwrap();
        assert_eq!(c.threshold, percentile(&scores, 80.0));

        let mut rng = SeededRng::new(4);
        let mixed: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let labels: Vec<bool> = mixed
            .iter()
            .map(|s| *s + 0.8 * rng.normal() > 0.7)
            .collect();
        let c = tune_threshold(&mixed, &labels, 2.0).unwrap();
        assert_eq!(c.threshold, sweep_oracle(&mixed, &labels, 2.0));

        let none = tune_threshold(&scores, &[false; 20], 2.0).unwrap();
        assert!(none.defaulted);
        assert_eq!(none.threshold, percentile(&scores, 95.0));
    }

    #[test]
    fn threshold_extremes_in_report() {
        let f = table(vec![
            [0.1, 0.2, 0.3, 0.4],
            [0.4, 0.3, 0.2, 0.1],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        let u = unified_score(&f, &[0.25; 4]);
        let s: Vec<Vec<f64>> = u.iter().map(|x| smooth(x, 0.3)).collect();
        let manifest = FakeOrderManifest {
            header: crate::injector::ManifestHeader {
                knobs: InjectionKnobs::default(),
                seed: 0,
            },
            entries: vec![crate::injector::ManifestEntry {
                user: 0,
                position: 2,
                kind: FakeType::Semantic,
                original_item: 0,
                injected_item: 1,
            }],
        };
        let (pos, overall, per_type) = assemble_report(&f, &u, &s, f64::INFINITY, Some(&manifest));
        assert!(pos.iter().all(|p| !p.flag));
        assert_eq!(overall.unwrap().recall, 0.0);
        let (pos, overall, _) = assemble_report(&f, &u, &s, f64::NEG_INFINITY, Some(&manifest));
        assert!(pos.iter().all(|p| p.flag));
        assert_eq!(overall.unwrap().recall, 1.0);
        assert_eq!(per_type[&FakeType::Semantic].true_positives, 0);
    }

    proptest! {
        #[test]
        fn affine_rescaling_leaves_scores_unchanged(
            rows in proptest::collection::vec(proptest::array::uniform4(-5.0f64..5.0), 2..30),
            col in 0usize..4,
            a in 0.1f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let f = table(rows.clone());
            let g = table(rows.iter().map(|r| { let mut r = *r; r[col] = a * r[col] + b; r }).collect());
            let w = [0.1, 0.2, 0.3, 0.4];
            let (u1, u2) = (&unified_score(&f, &w)[0], &unified_score(&g, &w)[0]);
            for (x, y) in u1.iter().zip(u2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn smoothing_stays_within_local_range(u in proptest::collection::vec(-10.0f64..10.0, 1..40), rho in 0.0f64..0.99) {
            let s = smooth(&u, rho);
            for k in 0..u.len() {
                let lo = k.saturating_sub(1);
                let hi = (k + 1).min(u.len() - 1);
                let local = &u[lo..=hi];
                let mn = local.iter().copied().fold(f64::INFINITY, f64::min);
                let mx = local.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s[k] >= mn - 1e-12 && s[k] <= mx + 1e-12);
            }
        }
    }
}

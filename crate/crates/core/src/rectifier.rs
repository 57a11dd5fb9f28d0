//! Influence triage of flagged samples and targeted rectification.
//!
//! The influence of a training term on the validation loss is
//! `-(H^-1 g_v) . grad L(i_k)`, with one inverse-Hessian-vector product on the
//! validation gradient shared by every sample. Hessian-vector products are
//! central differences of the training gradient; the inverse is approximated
//! by the damped, scaled Neumann recursion. Rectification alternates a clipped
//! ascent step on the harmful terms with a small descent step on clean terms
//! and keeps the best checkpoint by validation NDCG@10.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionCorpus;
use crate::error::{Error, Result};
use crate::fsio;
use crate::injector::{FakeOrderManifest, FakeType};
use crate::numkit::{axpy, dot, norm, scale, DenseMatrix, SeededRng};
use crate::optim::clip_to_norm;
use crate::parallel::accumulate_ordered;
use crate::params::ParamVector;
use crate::seqrec::SequenceModel;

/// A differentiable objective over a set of units (training sequences).
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn units(&self) -> usize;

    /// Gradient of the objective restricted to `units` (all units when `None`).
    fn gradient(&self, params: &[f64], units: Option<&[usize]>) -> Result<Vec<f64>>;
}

/// Mean next-item cross-entropy over training sequences plus
/// `weight_decay / 2 * |theta|^2`: the objective the target model minimizes.
pub struct SequenceObjective<'a, M: SequenceModel> {
    model: &'a M,
    seqs: Vec<&'a [u32]>,
    weight_decay: f64,
}

impl<'a, M: SequenceModel> SequenceObjective<'a, M> {
    pub fn new(model: &'a M, seqs: Vec<&'a [u32]>, weight_decay: f64) -> Self {
        let seqs = seqs.into_iter().filter(|s| s.len() >= 2).collect();
        SequenceObjective {
            model,
            seqs,
            weight_decay,
        }
    }

    pub fn from_corpus(model: &'a M, corpus: &'a InteractionCorpus, weight_decay: f64) -> Self {
        Self::new(
            model,
            corpus.users().iter().map(|u| u.train_prefix()).collect(),
            weight_decay,
        )
    }

    pub fn loss(&self, params: &[f64]) -> Result<f64> {
        let (sum, _) = accumulate_ordered(&self.seqs, 0, |s, _| {
            let w = vec![1.0; s.len() - 1];
            self.model.weighted_loss(params, s, &w, None)
        })?;
        let terms: usize = self.seqs.iter().map(|s| s.len() - 1).sum();
        Ok(sum / terms.max(1) as f64 + 0.5 * self.weight_decay * dot(params, params))
    }
}

impl<M: SequenceModel> Objective for SequenceObjective<'_, M> {
    fn dim(&self) -> usize {
        self.model.layout().len()
    }

    fn units(&self) -> usize {
        self.seqs.len()
    }

    fn gradient(&self, params: &[f64], units: Option<&[usize]>) -> Result<Vec<f64>> {
        let chosen: Vec<&[u32]> = match units {
            Some(idx) => idx.iter().map(|&i| self.seqs[i]).collect(),
            None => self.seqs.clone(),
        };
        let (_, mut g, terms) = self.model.batch_loss(params, &chosen)?;
        scale(1.0 / terms.max(1) as f64, &mut g);
        if self.weight_decay != 0.0 {
            axpy(self.weight_decay, params, &mut g);
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure(
                "non-finite training gradient".into(),
            ));
        }
        Ok(g)
    }
}

/// `1/2 x^T A x - b^T x`; one unit.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub a: DenseMatrix,
    pub b: Vec<f64>,
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn units(&self) -> usize {
        1
    }

    fn gradient(&self, params: &[f64], _units: Option<&[usize]>) -> Result<Vec<f64>> {
        let mut g = self.a.matvec(params);
        axpy(-1.0, &self.b, &mut g);
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfluenceConfig {
    pub depth: usize,
    pub damping: f64,
    /// Fixed scale; `None` means 1.5 times the power-iteration estimate of the
    /// top Hessian eigenvalue.
    pub scale: Option<f64>,
    pub power_iterations: usize,
    pub repeats: usize,
    pub fd_step: f64,
    pub tau_inf: f64,
    /// Units per stochastic Hessian-vector product; `None` uses all units.
    pub hvp_batch: Option<usize>,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            depth: 100,
            damping: 0.01,
            scale: None,
            power_iterations: 20,
            repeats: 2,
            fd_step: 1e-3,
            tau_inf: 0.0,
            hvp_batch: Some(64),
        }
    }
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.repeats == 0 {
            return Err(Error::invalid("LiSSA depth and repeats must be at least 1"));
        }
        if !(self.damping >= 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::invalid("damping must be >= 0 and fd_step > 0"));
        }
        if matches!(self.scale, Some(s) if !(s > 0.0)) {
            return Err(Error::invalid("LiSSA scale must be positive"));
        }
        if self.hvp_batch == Some(0) {
            return Err(Error::invalid("hvp batch must be positive"));
        }
        Ok(())
    }
}

/// `H v` by central differences of the objective gradient, step
/// `fd_step / max(|v|, 1e-8)`.
pub fn hvp(
    obj: &dyn Objective,
    params: &[f64],
    v: &[f64],
    fd_step: f64,
    units: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let nv = norm(v);
    if nv == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let eps = fd_step / nv.max(1e-8);
    let mut plus = params.to_vec();
    axpy(eps, v, &mut plus);
    let mut minus = params.to_vec();
    axpy(-eps, v, &mut minus);
    let gp = obj.gradient(&plus, units)?;
    let gm = obj.gradient(&minus, units)?;
    let out: Vec<f64> = gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite Hessian-vector product".into(),
        ));
    }
    Ok(out)
}

fn draw_batch(
    obj: &dyn Objective,
    batch: Option<usize>,
    rng: &mut SeededRng,
) -> Option<Vec<usize>> {
    match batch {
        Some(b) if b < obj.units() => {
            let mut idx = rng.sample_indices(obj.units(), b);
            idx.sort_unstable();
            Some(idx)
        }
        _ => None,
    }
}

/// Largest-magnitude Hessian eigenvalue by power iteration.
pub fn top_eigenvalue(
    obj: &dyn Objective,
    params: &[f64],
    iterations: usize,
    fd_step: f64,
    units: Option<&[usize]>,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut v: Vec<f64> = (0..obj.dim()).map(|_| rng.normal()).collect();
    let n = norm(&v);
    scale(1.0 / n, &mut v);
    let mut lambda = 0.0;
    for _ in 0..iterations.max(1) {
        let hv = hvp(obj, params, &v, fd_step, units)?;
        lambda = dot(&v, &hv);
        let n = norm(&hv);
        if n == 0.0 {
            return Ok(0.0);
        }
        v = hv;
        scale(1.0 / n, &mut v);
    }
    Ok(lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LissaResult {
    pub estimate: Vec<f64>,
    pub sigma: f64,
    pub top_eigenvalue: Option<f64>,
    /// `|(H + lambda I) est_r - v| / |v|` per repeat, then for the average,
    /// on the check batch (four HVP batches, or all units).
    pub residuals: Vec<f64>,
}

/// Approximates `(H + damping I)^-1 v` with
/// `h_j = v + h_{j-1} - (H h_{j-1} + damping h_{j-1}) / sigma`, estimate
/// `h_J / sigma`, averaged over repeats with independent minibatch draws.
pub fn lissa_ihvp(
    obj: &dyn Objective,
    params: &[f64],
    v: &[f64],
    cfg: &InfluenceConfig,
    rng: &mut SeededRng,
) -> Result<LissaResult> {
    cfg.validate()?;
    let nv = norm(v);
    let check = draw_batch(
        obj,
        cfg.hvp_batch.map(|b| b.saturating_mul(4)),
        &mut rng.derive("check"),
    );
    let (sigma, top) = match cfg.scale {
        Some(s) => (s, None),
        None => {
            let top = top_eigenvalue(
                obj,
                params,
                cfg.power_iterations,
                cfg.fd_step,
                check.as_deref(),
                &mut rng.derive("power"),
            )?;
            ((1.5 * top.abs()).max(1e-8), Some(top))
        }
    };
    if nv == 0.0 {
        return Ok(LissaResult {
            estimate: vec![0.0; v.len()],
            sigma,
            top_eigenvalue: top,
            residuals: Vec::new(),
        });
    }
    let mut sum = vec![0.0; v.len()];
    let mut estimates = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let mut rr = rng.child(r as u64);
        let mut h = v.to_vec();
        for j in 1..=cfg.depth {
            let units = draw_batch(obj, cfg.hvp_batch, &mut rr);
            let hh = hvp(obj, params, &h, cfg.fd_step, units.as_deref())?;
            for i in 0..h.len() {
                h[i] = v[i] + h[i] - (hh[i] + cfg.damping * h[i]) / sigma;
            }
            if !(norm(&h) <= 1e6 * nv) {
                return Err(Error::Divergence {
                    sigma,
                    detail: format!("iterate norm exceeded 1e6 |v| at step {j} of repeat {r}"),
                });
            }
        }
        scale(1.0 / sigma, &mut h);
        axpy(1.0, &h, &mut sum);
        estimates.push(h);
    }
    scale(1.0 / cfg.repeats as f64, &mut sum);
    let residual = |est: &[f64]| -> Result<f64> {
        let mut r = hvp(obj, params, est, cfg.fd_step, check.as_deref())?;
        axpy(cfg.damping, est, &mut r);
        axpy(-1.0, v, &mut r);
        Ok(norm(&r) / nv)
    };
    let mut residuals = Vec::with_capacity(cfg.repeats + 1);
    if cfg.repeats > 1 {
        for e in &estimates {
            residuals.push(residual(e)?);
        }
    }
    residuals.push(residual(&sum)?);
    log::info!(
        "LiSSA: sigma {sigma:.4}, residual {:.4}",
        residuals.last().unwrap()
    );
    Ok(LissaResult {
        estimate: sum,
        sigma,
        top_eigenvalue: top,
        residuals,
    })
}

/// `Inf = -(H^-1 g_v) . grad L(i_k)`; positive means harmful.
pub fn influence(ihvp_of_gv: &[f64], sample_grad: &[f64]) -> f64 {
    -dot(ihvp_of_gv, sample_grad)
}

/// A single next-item term: `prefix -> target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Term<'a> {
    pub prefix: &'a [u32],
    pub target: u32,
}

/// Mean gradient of the given validation terms.
pub fn validation_gradient<M: SequenceModel>(
    model: &M,
    params: &[f64],
    pairs: &[Term<'_>],
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyCleanSet);
    }
    let (_, mut g) = accumulate_ordered(pairs, model.layout().len(), |t, g| {
        let (l, tg) = model.term_loss(params, t.prefix, t.target)?;
        axpy(1.0, &tg, g);
        Ok(l)
    })?;
    scale(1.0 / pairs.len() as f64, &mut g);
    Ok(g)
}

/// Mean loss of the given terms.
pub fn terms_loss<M: SequenceModel>(model: &M, params: &[f64], terms: &[Term<'_>]) -> Result<f64> {
    if terms.is_empty() {
        return Ok(0.0);
    }
    let (sum, _) = accumulate_ordered(terms, 0, |t, _| {
        let mut seq = t.prefix.to_vec();
        seq.push(t.target);
        let mut w = vec![0.0; t.prefix.len()];
        w[t.prefix.len() - 1] = 1.0;
        model.weighted_loss(params, &seq, &w, None)
    })?;
    Ok(sum / terms.len() as f64)
}

/// Sum of the gradients of the given terms.
pub fn terms_gradient_sum<M: SequenceModel>(
    model: &M,
    params: &[f64],
    terms: &[Term<'_>],
) -> Result<Vec<f64>> {
    let (_, g) = accumulate_ordered(terms, model.layout().len(), |t, g| {
        let (l, tg) = model.term_loss(params, t.prefix, t.target)?;
        axpy(1.0, &tg, g);
        Ok(l)
    })?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub user: usize,
    pub position: usize,
    pub truth: Option<FakeType>,
    pub influence: f64,
    pub harmful: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceDiagnostics {
    pub sigma: f64,
    pub top_eigenvalue: Option<f64>,
    pub residuals: Vec<f64>,
    pub gv_norm: f64,
    pub ihvp_norm: f64,
    pub depth: usize,
    pub damping: f64,
    pub tau_inf: f64,
    pub harmful: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub rows: Vec<InfluenceRow>,
    pub diagnostics: InfluenceDiagnostics,
}

impl InfluenceReport {
    /// `I_h` as (user, position) pairs.
    pub fn harmful(&self) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .filter(|r| r.harmful)
            .map(|r| (r.user, r.position))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("user,position,truth,influence,harmful\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:?},{}",
                r.user,
                r.position,
                r.truth.map_or("", FakeType::as_str),
                r.influence,
                u8::from(r.harmful)
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// `I_h = {i_k : Inf(i_k) > tau_inf}`; re-labels `harmful` on every row.
pub fn filter_harmful(report: &mut InfluenceReport, tau_inf: f64) -> Vec<(usize, usize)> {
    for r in &mut report.rows {
        r.harmful = r.influence > tau_inf;
    }
    report.diagnostics.tau_inf = tau_inf;
    report.diagnostics.harmful = report.rows.iter().filter(|r| r.harmful).count();
    report.harmful()
}

/// The training term whose target sits at `position` of the user's prefix;
/// position 0 has no term.
pub fn term_at(corpus: &InteractionCorpus, user: usize, position: usize) -> Option<Term<'_>> {
    let prefix = corpus.users().get(user)?.train_prefix();
    if position == 0 || position >= prefix.len() {
        return None;
    }
    Some(Term {
        prefix: &prefix[..position],
        target: prefix[position],
    })
}

/// Influence of every flagged training term on the mean validation loss of
/// `validation`. Flagged positions without a term get influence 0; with
/// nothing flagged no inverse-Hessian product is computed.
#[allow(clippy::too_many_arguments)]
pub fn influence_report<M: SequenceModel>(
    model: &M,
    params: &ParamVector,
    corpus: &InteractionCorpus,
    weight_decay: f64,
    flagged: &[(usize, usize)],
    validation: &[Term<'_>],
    manifest: Option<&FakeOrderManifest>,
    cfg: &InfluenceConfig,
    rng: &mut SeededRng,
) -> Result<InfluenceReport> {
    cfg.validate()?;
    if flagged.is_empty() {
        return Ok(InfluenceReport {
            rows: Vec::new(),
            diagnostics: InfluenceDiagnostics {
                sigma: 0.0,
                top_eigenvalue: None,
                residuals: Vec::new(),
                gv_norm: 0.0,
                ihvp_norm: 0.0,
                depth: cfg.depth,
                damping: cfg.damping,
                tau_inf: cfg.tau_inf,
                harmful: 0,
                flagged: 0,
            },
        });
    }
    let p = params.as_slice();
    let gv = validation_gradient(model, p, validation)?;
    let obj = SequenceObjective::from_corpus(model, corpus, weight_decay);
    let lissa = lissa_ihvp(&obj, p, &gv, cfg, rng)?;
    let labels = manifest.map(FakeOrderManifest::labels).unwrap_or_default();
    let rows = flagged
        .par_iter()
        .map(|&(user, position)| {
            let inf = match term_at(corpus, user, position) {
                Some(t) => influence(&lissa.estimate, &model.term_loss(p, t.prefix, t.target)?.1),
                None => 0.0,
            };
            Ok(InfluenceRow {
                user,
                position,
                truth: labels.get(&(user, position)).copied(),
                influence: inf,
                harmful: inf > cfg.tau_inf,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let harmful = rows.iter().filter(|r| r.harmful).count();
    Ok(InfluenceReport {
        diagnostics: InfluenceDiagnostics {
            sigma: lissa.sigma,
            top_eigenvalue: lissa.top_eigenvalue,
            residuals: lissa.residuals,
            gv_norm: norm(&gv),
            ihvp_norm: norm(&lissa.estimate),
            depth: cfg.depth,
            damping: cfg.damping,
            tau_inf: cfg.tau_inf,
            harmful,
            flagged: rows.len(),
        },
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RectifyConfig {
    pub ascent_rate: f64,
    pub descent_rate: f64,
    pub rounds: usize,
    /// Max norm of the ascent step `ascent_rate * sum grad L`.
    pub ascent_clip: f64,
    /// Relative validation NDCG@10 drop from the best round that stops early.
    pub early_stop_drop: f64,
    pub clean_batch: usize,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        RectifyConfig {
            ascent_rate: 1e-4,
            descent_rate: 1e-5,
            rounds: 5,
            ascent_clip: 1.0,
            early_stop_drop: 0.02,
            clean_batch: 1024,
        }
    }
}

impl RectifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rectification needs at least one round"));
        }
        if !(self.ascent_rate >= 0.0) || !(self.descent_rate >= 0.0) || !(self.ascent_clip > 0.0) {
            return Err(Error::invalid(
                "rates must be non-negative and the clip positive",
            ));
        }
        if self.descent_rate >= self.ascent_rate && self.ascent_rate > 0.0 {
            log::warn!("descent rate is not below the ascent rate");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub ascent_norm: f64,
    pub descent_norm: f64,
    pub harmful_loss: f64,
    pub validation_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifyTrace {
    pub initial_validation_ndcg: f64,
    pub initial_harmful_loss: f64,
    pub rounds: Vec<RoundRecord>,
    /// 0 when the input parameters were kept.
    pub best_round: usize,
    pub stopped_early: bool,
}

/// Alternating ascent on `harmful` terms and descent on a seeded batch of
/// `clean` terms, with `validate(params)` (validation NDCG@10) after every
/// round. Returns the best-validation parameters.
pub fn rectify<M, V>(
    model: &M,
    params: &ParamVector,
    harmful: &[Term<'_>],
    clean: &[Term<'_>],
    cfg: &RectifyConfig,
    rng: &mut SeededRng,
    mut validate: V,
) -> Result<(ParamVector, RectifyTrace)>
where
    M: SequenceModel,
    V: FnMut(&ParamVector) -> Result<f64>,
{
    cfg.validate()?;
    let initial = validate(params)?;
    let initial_loss = terms_loss(model, params.as_slice(), harmful)?;
    let mut trace = RectifyTrace {
        initial_validation_ndcg: initial,
        initial_harmful_loss: initial_loss,
        rounds: Vec::new(),
        best_round: 0,
        stopped_early: false,
    };
    if harmful.is_empty() && cfg.descent_rate == 0.0 {
        return Ok((params.clone(), trace));
    }
    let mut theta = params.clone();
    let mut best = (initial, params.clone());
    for round in 1..=cfg.rounds {
        let mut step = terms_gradient_sum(model, theta.as_slice(), harmful)?;
        scale(cfg.ascent_rate, &mut step);
        clip_to_norm(&mut step, cfg.ascent_clip);
        let ascent_norm = norm(&step);
        axpy(1.0, &step, theta.as_mut_slice());

        let mut descent_norm = 0.0;
        if cfg.descent_rate > 0.0 && !clean.is_empty() {
            let take = clean.len().min(cfg.clean_batch);
            let mut idx = rng.sample_indices(clean.len(), take);
            idx.sort_unstable();
            let batch: Vec<Term<'_>> = idx.iter().map(|&i| clean[i]).collect();
            let mut g = terms_gradient_sum(model, theta.as_slice(), &batch)?;
            scale(cfg.descent_rate / take as f64, &mut g);
            descent_norm = norm(&g);
            axpy(-1.0, &g, theta.as_mut_slice());
        }
        if !theta.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite parameters after rectification round {round}"
            )));
        }
        let ndcg = validate(&theta)?;
        let harmful_loss = terms_loss(model, theta.as_slice(), harmful)?;
        trace.rounds.push(RoundRecord {
            round,
            ascent_norm,
            descent_norm,
            harmful_loss,
            validation_ndcg: ndcg,
        });
        log::info!(
            "rectify round {round}: validation NDCG@10 {ndcg:.5}, harmful loss {harmful_loss:.5}"
        );
        if ndcg > best.0 {
            best = (ndcg, theta.clone());
            trace.best_round = round;
        }
        if ndcg < (1.0 - cfg.early_stop_drop) * best.0 {
            trace.stopped_early = true;
            break;
        }
    }
    Ok((best.1, trace))
}

/// Clean training terms: every position >= 1 of every prefix not in `flagged`.
pub fn clean_terms<'a>(
    corpus: &'a InteractionCorpus,
    flagged: &HashSet<(usize, usize)>,
) -> Vec<Term<'a>> {
    let mut out = Vec::new();
    for (u, seq) in corpus.users().iter().enumerate() {
        let prefix = seq.train_prefix();
        for k in 1..prefix.len() {
            if !flagged.contains(&(u, k)) {
                out.push(Term {
                    prefix: &prefix[..k],
                    target: prefix[k],
                });
            }
        }
    }
    out
}

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{hex_digest, DatasetSource, ExperimentConfig};
use super::metrics::{
    build_cases, convergence_report, evaluate_topk, round_up, ConvergenceRow, RankingMetrics,
    Target,
};
use crate::corpus::{
    build_corpus, leave_one_out, load_interactions, read_snapshot, synth_corpus, write_snapshot,
    InteractionCorpus,
};
use crate::detector::{detect, CalibrationSet, DetectionSummary};
use crate::dualview::DualView;
use crate::error::{Error, Result};
use crate::fsio;
use crate::injector::{apply_plan, plan_allocation, FakeOrderManifest, InjectionPlan};
use crate::optim::TrainReport;
use crate::params::ParamVector;
use crate::rectifier::{
    clean_terms, influence_report, rectify, term_at, InfluenceReport, RectifyTrace, Term,
};
use crate::semantics::{
    load_semantic_tsv, load_with_vocab, synth_semantics, write_semantic_tsv, SemanticTable,
};
use crate::seqrec::SeqRec;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Clean,
    Inject,
    Compromised,
    DualView,
    Detect,
    Influence,
    Rectify,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Data,
        Stage::Clean,
        Stage::Inject,
        Stage::Compromised,
        Stage::DualView,
        Stage::Detect,
        Stage::Influence,
        Stage::Rectify,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Clean => "clean",
            Stage::Inject => "inject",
            Stage::Compromised => "compromised",
            Stage::DualView => "dual-view",
            Stage::Detect => "detect",
            Stage::Influence => "influence",
            Stage::Rectify => "rectify",
            Stage::Report => "report",
        }
    }
}

/// File layout of an output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.root
            .join("stages")
            .join(format!("{}.json", stage.name()))
    }

    pub fn config(&self) -> PathBuf {
        self.file("config.json")
    }

    pub fn corpus(&self) -> PathBuf {
        self.file("corpus.json")
    }

    pub fn semantics(&self) -> PathBuf {
        self.file("semantics.tsv")
    }

    pub fn compromised(&self) -> PathBuf {
        self.file("compromised.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.file("manifest.json")
    }

    pub fn detection_csv(&self) -> PathBuf {
        self.file("detection.csv")
    }

    pub fn detection_json(&self) -> PathBuf {
        self.file("detection.json")
    }

    pub fn influence_csv(&self) -> PathBuf {
        self.file("influence.csv")
    }

    pub fn influence_json(&self) -> PathBuf {
        self.file("influence.json")
    }

    pub fn rectify_json(&self) -> PathBuf {
        self.file("rectify.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.file("metrics.json")
    }

    pub fn timings(&self) -> PathBuf {
        self.file("timings.json")
    }

    fn train_report(&self, name: &str) -> PathBuf {
        self.file(&format!("{name}_train.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageMarker {
    stage: Stage,
    config_hash: String,
}

/// Flagged positions plus the detection summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub summary: DetectionSummary,
    pub suspicious: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifyOutput {
    pub harmful_terms: usize,
    pub clean_terms: usize,
    pub validation_users: usize,
    pub trace: RectifyTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBrief {
    pub flagged: usize,
    pub threshold: f64,
    pub threshold_source: String,
    pub weights: [f64; 4],
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub recall_by_type: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceBrief {
    pub flagged: usize,
    pub harmful: usize,
    pub sigma: f64,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifyBrief {
    pub rounds: usize,
    pub best_round: usize,
    pub stopped_early: bool,
    pub validation_ndcg_before: f64,
    pub validation_ndcg_best: f64,
}

/// The `metrics.json` document. Wall times go to `timings.json` so that this
/// report stays byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub fake_orders: usize,
    pub clean: RankingMetrics,
    pub compromised: RankingMetrics,
    pub rectified: RankingMetrics,
    /// `(rectified - compromised) / (clean - compromised)` on NDCG@10; absent
    /// when injection did not lower NDCG@10.
    pub recovery: Option<f64>,
    pub detection: DetectionBrief,
    pub influence: InfluenceBrief,
    pub rectification: RectifyBrief,
    pub convergence: Vec<ConvergenceRow>,
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Last stage to run.
    pub until: Stage,
    /// Reuse stages whose outputs in the workspace were produced under the
    /// same configuration.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            until: Stage::Report,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub computed: Vec<Stage>,
    pub resumed: Vec<Stage>,
    pub metrics: Option<MetricsReport>,
}

struct Trained<M> {
    model: M,
    params: ParamVector,
    report: TrainReport,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    ws: Workspace,
    hash: String,
    resume: bool,
    timings: BTreeMap<String, f64>,
    computed: Vec<Stage>,
    resumed: Vec<Stage>,
    data: Option<(InteractionCorpus, SemanticTable)>,
    clean: Option<Trained<SeqRec>>,
    injected: Option<(InteractionCorpus, FakeOrderManifest)>,
    compromised: Option<Trained<SeqRec>>,
    dual: Option<Trained<DualView>>,
    detection: Option<DetectionOutput>,
    influence: Option<InfluenceReport>,
    rectified: Option<(ParamVector, RectifyOutput)>,
}

/// Runs the stages up to `opts.until`, writing every artifact into `out`.
/// A failing stage aborts with its name; earlier outputs stay on disk.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    out: &Path,
    opts: RunOptions,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    std::fs::create_dir_all(out.join("stages")).map_err(|e| Error::io(out, e))?;
    let mut r = Runner {
        cfg,
        ws: Workspace::new(out),
        hash: cfg.hash(),
        resume: opts.resume,
        timings: BTreeMap::new(),
        computed: Vec::new(),
        resumed: Vec::new(),
        data: None,
        clean: None,
        injected: None,
        compromised: None,
        dual: None,
        detection: None,
        influence: None,
        rectified: None,
    };
    cfg.save(&r.ws.config())?;
    let metrics = r.run(opts.until);
    // Timings are best effort; a stage error takes precedence.
    let timings = fsio::write_json(&r.ws.timings(), &r.timings);
    let metrics = metrics?;
    timings?;
    Ok(PipelineOutcome {
        computed: r.computed,
        resumed: r.resumed,
        metrics,
    })
}

impl Runner<'_> {
    fn run(&mut self, until: Stage) -> Result<Option<MetricsReport>> {
        for stage in Stage::ALL.into_iter().filter(|s| *s <= until) {
            let res = match stage {
                Stage::Data => self.data().map(drop),
                Stage::Clean => self.clean().map(drop),
                Stage::Inject => self.injected().map(drop),
                Stage::Compromised => self.compromised().map(drop),
                Stage::DualView => self.dual().map(drop),
                Stage::Detect => self.detection().map(drop),
                Stage::Influence => self.influence().map(drop),
                Stage::Rectify => self.rectified().map(drop),
                Stage::Report => return self.report().map(Some),
            };
            res?;
        }
        Ok(None)
    }

    fn can_resume(&self, stage: Stage, outputs: &[PathBuf]) -> bool {
        if !self.resume || stage == Stage::Report || !outputs.iter().all(|p| p.exists()) {
            return false;
        }
        match fsio::read_json::<StageMarker>(&self.ws.marker(stage)) {
            Ok(m) => m.stage == stage && m.config_hash == self.hash,
            Err(_) => false,
        }
    }

    /// Loads a stage from disk when resumable, otherwise computes it, records
    /// its wall time and writes its marker.
    fn stage<T>(
        &mut self,
        stage: Stage,
        outputs: &[PathBuf],
        load: impl FnOnce(&mut Self) -> Result<T>,
        compute: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        let wrap = |e: Error| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.name().into(),
                source: Box::new(e),
            },
        };
        if self.can_resume(stage, outputs) {
            match load(self) {
                Ok(v) => {
                    log::info!("stage {}: resumed", stage.name());
                    self.resumed.push(stage);
                    return Ok(v);
                }
                Err(e @ Error::Stage { .. }) => return Err(e),
                Err(e) => log::warn!("stage {}: cannot resume ({e}); recomputing", stage.name()),
            }
        }
        log::info!("stage {}: running", stage.name());
        let t = Instant::now();
        let v = compute(self).map_err(wrap)?;
        self.timings
            .insert(stage.name().into(), t.elapsed().as_secs_f64());
        fsio::write_json(
            &self.ws.marker(stage),
            &StageMarker {
                stage,
                config_hash: self.hash.clone(),
            },
        )
        .map_err(wrap)?;
        self.computed.push(stage);
        Ok(v)
    }

    fn data(&mut self) -> Result<&(InteractionCorpus, SemanticTable)> {
        if self.data.is_none() {
            let outputs = [self.ws.corpus(), self.ws.semantics()];
            let d = self.stage(
                Stage::Data,
                &outputs,
                |r| {
                    let corpus = read_snapshot(&r.ws.corpus())?;
                    let sem = load_semantic_tsv(&r.ws.semantics(), &corpus)?;
                    Ok((corpus, sem))
                },
                |r| {
                    let (corpus, sem) = load_data(r.cfg)?;
                    write_snapshot(&corpus, &r.ws.corpus())?;
                    write_semantic_tsv(&sem, corpus.items(), &r.ws.semantics())?;
                    Ok((corpus, sem))
                },
            )?;
            self.data = Some(d);
        }
        Ok(self.data.as_ref().unwrap())
    }

    fn train_target(&mut self, stage: Stage, name: &'static str) -> Result<Trained<SeqRec>> {
        let outputs = [self.ws.checkpoint(name), self.ws.train_report(name)];
        self.stage(
            stage,
            &outputs,
            |r| {
                let (model, params) = SeqRec::load(&r.ws.checkpoint(name))?;
                let report = fsio::read_json(&r.ws.train_report(name))?;
                Ok(Trained {
                    model,
                    params,
                    report,
                })
            },
            |r| {
                let corpus = if stage == Stage::Clean {
                    r.data()?.0.clone()
                } else {
                    r.injected()?.0.clone()
                };
                let (model, params, report) = train_target(r.cfg, &corpus)?;
                model.save(&params, &r.ws.checkpoint(name))?;
                fsio::write_json(&r.ws.train_report(name), &report)?;
                Ok(Trained {
                    model,
                    params,
                    report,
                })
            },
        )
    }

    fn clean(&mut self) -> Result<&Trained<SeqRec>> {
        if self.clean.is_none() {
            let t = self.train_target(Stage::Clean, "clean")?;
            self.clean = Some(t);
        }
        Ok(self.clean.as_ref().unwrap())
    }

    fn injected(&mut self) -> Result<&(InteractionCorpus, FakeOrderManifest)> {
        if self.injected.is_none() {
            let outputs = [self.ws.compromised(), self.ws.manifest()];
            let v = self.stage(
                Stage::Inject,
                &outputs,
                |r| {
                    Ok((
                        read_snapshot(&r.ws.compromised())?,
                        FakeOrderManifest::read(&r.ws.manifest())?,
                    ))
                },
                |r| {
                    let cfg = r.cfg;
                    let (corpus, sem) = r.data()?;
                    let (compromised, manifest) = inject(cfg, corpus, sem)?;
                    write_snapshot(&compromised, &r.ws.compromised())?;
                    manifest.write(&r.ws.manifest())?;
                    Ok((compromised, manifest))
                },
            )?;
            self.injected = Some(v);
        }
        Ok(self.injected.as_ref().unwrap())
    }

    fn compromised(&mut self) -> Result<&Trained<SeqRec>> {
        if self.compromised.is_none() {
            let t = self.train_target(Stage::Compromised, "compromised")?;
            self.compromised = Some(t);
        }
        Ok(self.compromised.as_ref().unwrap())
    }

    fn dual(&mut self) -> Result<&Trained<DualView>> {
        if self.dual.is_none() {
            let outputs = [
                self.ws.checkpoint("dualview"),
                self.ws.train_report("dualview"),
            ];
            let t = self.stage(
                Stage::DualView,
                &outputs,
                |r| {
                    let sem = r.data()?.1.clone();
                    let (model, params) = DualView::load(&r.ws.checkpoint("dualview"), &sem)?;
                    let report = fsio::read_json(&r.ws.train_report("dualview"))?;
                    Ok(Trained {
                        model,
                        params,
                        report,
                    })
                },
                |r| {
                    let cfg = r.cfg;
                    let sem = r.data()?.1.clone();
                    let compromised = r.injected()?.0.clone();
                    let model =
                        DualView::new(cfg.dual_view.model_config(compromised.num_items()), &sem)?;
                    let mut params = model.init_params(&mut cfg.stage_rng("dualview.init"));
                    let seqs = train_prefixes(&compromised);
                    let report = model.train(
                        &mut params,
                        &seqs,
                        &cfg.dual_view.train,
                        &cfg.dual_view.loss,
                        &mut cfg.stage_rng("dualview.train"),
                    )?;
                    model.save(&params, &r.ws.checkpoint("dualview"))?;
                    fsio::write_json(&r.ws.train_report("dualview"), &report)?;
                    Ok(Trained {
                        model,
                        params,
                        report,
                    })
                },
            )?;
            self.dual = Some(t);
        }
        Ok(self.dual.as_ref().unwrap())
    }

    fn detection(&mut self) -> Result<&DetectionOutput> {
        if self.detection.is_none() {
            let outputs = [self.ws.detection_json(), self.ws.detection_csv()];
            let v = self.stage(
                Stage::Detect,
                &outputs,
                |r| fsio::read_json(&r.ws.detection_json()),
                |r| {
                    let cfg = r.cfg;
                    r.data()?;
                    r.injected()?;
                    r.dual()?;
                    let dual = r.dual.as_ref().unwrap();
                    let (compromised, manifest) = r.injected.as_ref().unwrap();
                    let sem = &r.data.as_ref().unwrap().1;
                    let calibration = if cfg.detector.calibration_fraction > 0.0
                        && cfg.injection.intensity > 0.0
                    {
                        Some(CalibrationSet::build(
                            compromised,
                            cfg.detector.calibration_fraction,
                            &cfg.injection,
                            Some(sem),
                            &mut cfg.stage_rng("detect.calibration"),
                        )?)
                    } else {
                        None
                    };
                    let report = detect(
                        &dual.model,
                        &dual.params,
                        compromised,
                        &cfg.detector,
                        calibration.as_ref(),
                        Some(manifest),
                    )?;
                    report.write_csv(&r.ws.detection_csv())?;
                    let out = DetectionOutput {
                        suspicious: report.suspicious(),
                        summary: report.summary,
                    };
                    fsio::write_json(&r.ws.detection_json(), &out)?;
                    Ok(out)
                },
            )?;
            self.detection = Some(v);
        }
        Ok(self.detection.as_ref().unwrap())
    }

    fn influence(&mut self) -> Result<&InfluenceReport> {
        if self.influence.is_none() {
            let outputs = [self.ws.influence_json(), self.ws.influence_csv()];
            let v = self.stage(
                Stage::Influence,
                &outputs,
                |r| fsio::read_json(&r.ws.influence_json()),
                |r| {
                    let cfg = r.cfg;
                    r.injected()?;
                    r.compromised()?;
                    r.detection()?;
                    let target = r.compromised.as_ref().unwrap();
                    let (compromised, manifest) = r.injected.as_ref().unwrap();
                    let flagged = &r.detection.as_ref().unwrap().suspicious;
                    let split = leave_one_out(compromised);
                    let validation = validation_terms(compromised, &split, flagged);
                    let report = influence_report(
                        &target.model,
                        &target.params,
                        compromised,
                        cfg.target.train.weight_decay,
                        flagged,
                        &validation,
                        Some(manifest),
                        &cfg.influence,
                        &mut cfg.stage_rng("influence"),
                    )?;
                    report.write_csv(&r.ws.influence_csv())?;
                    fsio::write_json(&r.ws.influence_json(), &report)?;
                    Ok(report)
                },
            )?;
            self.influence = Some(v);
        }
        Ok(self.influence.as_ref().unwrap())
    }

    fn rectified(&mut self) -> Result<&(ParamVector, RectifyOutput)> {
        if self.rectified.is_none() {
            let outputs = [self.ws.checkpoint("rectified"), self.ws.rectify_json()];
            let v = self.stage(
                Stage::Rectify,
                &outputs,
                |r| {
                    let (_, params) = SeqRec::load(&r.ws.checkpoint("rectified"))?;
                    Ok((params, fsio::read_json(&r.ws.rectify_json())?))
                },
                |r| {
                    let cfg = r.cfg;
                    r.injected()?;
                    r.compromised()?;
                    r.detection()?;
                    r.influence()?;
                    let target = r.compromised.as_ref().unwrap();
                    let compromised = &r.injected.as_ref().unwrap().0;
                    let flagged: HashSet<(usize, usize)> = r
                        .detection
                        .as_ref()
                        .unwrap()
                        .suspicious
                        .iter()
                        .copied()
                        .collect();
                    let harmful: Vec<Term<'_>> = r
                        .influence
                        .as_ref()
                        .unwrap()
                        .harmful()
                        .into_iter()
                        .filter_map(|(u, k)| term_at(compromised, u, k))
                        .collect();
                    let clean = clean_terms(compromised, &flagged);
                    // Monitoring sees only what a defender has: compromised inputs.
                    let split = leave_one_out(compromised);
                    let cases = build_cases(
                        compromised,
                        compromised,
                        &split,
                        Target::Validation,
                        cfg.eval.negatives,
                        &cfg.stage_rng("eval.validation"),
                    )?;
                    let (params, trace) = rectify(
                        &target.model,
                        &target.params,
                        &harmful,
                        &clean,
                        &cfg.rectify,
                        &mut cfg.stage_rng("rectify"),
                        |p| {
                            Ok(evaluate_topk(&target.model, p.as_slice(), &cases, &[10])?
                                .ndcg_at(10))
                        },
                    )?;
                    target.model.save(&params, &r.ws.checkpoint("rectified"))?;
                    let out = RectifyOutput {
                        harmful_terms: harmful.len(),
                        clean_terms: clean.len(),
                        validation_users: cases.len(),
                        trace,
                    };
                    fsio::write_json(&r.ws.rectify_json(), &out)?;
                    Ok((params, out))
                },
            )?;
            self.rectified = Some(v);
        }
        Ok(self.rectified.as_ref().unwrap())
    }

    fn report(&mut self) -> Result<MetricsReport> {
        self.stage(
            Stage::Report,
            &[],
            |_| unreachable!("the report stage is never resumed"),
            |r| {
                r.data()?;
                r.clean()?;
                r.injected()?;
                r.compromised()?;
                r.dual()?;
                r.detection()?;
                r.influence()?;
                r.rectified()?;
                let cfg = r.cfg;
                let (clean_corpus, _) = r.data.as_ref().unwrap();
                let manifest = &r.injected.as_ref().unwrap().1;
                let clean = r.clean.as_ref().unwrap();
                let comp = r.compromised.as_ref().unwrap();
                let dual = r.dual.as_ref().unwrap();
                let det = r.detection.as_ref().unwrap();
                let inf = r.influence.as_ref().unwrap();
                let (rect_params, rect) = r.rectified.as_ref().unwrap();

                let split = leave_one_out(clean_corpus);
                let cases = build_cases(
                    clean_corpus,
                    clean_corpus,
                    &split,
                    Target::Test,
                    cfg.eval.negatives,
                    &cfg.stage_rng("eval.test"),
                )?;
                let ks = &cfg.eval.ks;
                let m_clean = evaluate_topk(&clean.model, clean.params.as_slice(), &cases, ks)?;
                let m_comp = evaluate_topk(&comp.model, comp.params.as_slice(), &cases, ks)?;
                let m_rect = evaluate_topk(&comp.model, rect_params.as_slice(), &cases, ks)?;
                let gap = m_clean.ndcg_at(10) - m_comp.ndcg_at(10);
                let recovery = (gap > 0.0).then(|| (m_rect.ndcg_at(10) - m_comp.ndcg_at(10)) / gap);

                let mut convergence = convergence_report(
                    &[
                        ("clean".to_string(), clean.report.loss_trace.clone()),
                        ("compromised".to_string(), comp.report.loss_trace.clone()),
                        ("dual-view".to_string(), dual.report.loss_trace.clone()),
                    ],
                    5,
                );
                let rounds = rect.trace.rounds.len();
                convergence.push(ConvergenceRow {
                    stage: "rectify".into(),
                    reported: round_up(rounds.max(1), 5),
                    raw: Some(rounds),
                    converged: true,
                });

                let mut checkpoints = BTreeMap::new();
                for name in ["clean", "compromised", "dualview", "rectified"] {
                    let path = r.ws.checkpoint(name);
                    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    checkpoints.insert(name.to_string(), hex_digest(&bytes));
                }
                let s = &det.summary;
                let report = MetricsReport {
                    config_hash: r.hash.clone(),
                    seed: cfg.seed,
                    users: clean_corpus.num_users(),
                    items: clean_corpus.num_items(),
                    interactions: clean_corpus.num_interactions(),
                    fake_orders: manifest.entries.len(),
                    clean: m_clean,
                    compromised: m_comp,
                    rectified: m_rect,
                    recovery,
                    detection: DetectionBrief {
                        flagged: s.flagged,
                        threshold: s.threshold,
                        threshold_source: s.threshold_source.clone(),
                        weights: s.weights,
                        precision: s.overall.as_ref().map(|q| q.precision),
                        recall: s.overall.as_ref().map(|q| q.recall),
                        f1: s.overall.as_ref().map(|q| q.f1),
                        recall_by_type: s
                            .per_type
                            .iter()
                            .map(|(k, q)| (k.as_str().to_string(), q.recall))
                            .collect(),
                    },
                    influence: InfluenceBrief {
                        flagged: inf.diagnostics.flagged,
                        harmful: inf.diagnostics.harmful,
                        sigma: inf.diagnostics.sigma,
                        residual: inf.diagnostics.residuals.last().copied(),
                    },
                    rectification: RectifyBrief {
                        rounds,
                        best_round: rect.trace.best_round,
                        stopped_early: rect.trace.stopped_early,
                        validation_ndcg_before: rect.trace.initial_validation_ndcg,
                        validation_ndcg_best: rect
                            .trace
                            .rounds
                            .iter()
                            .map(|x| x.validation_ndcg)
                            .fold(rect.trace.initial_validation_ndcg, f64::max),
                    },
                    convergence,
                    checkpoints,
                };
                fsio::write_json(&r.ws.metrics(), &report)?;
                Ok(report)
            },
        )
    }
}

/// Corpus and semantic table from the configured source.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(InteractionCorpus, SemanticTable)> {
    match &cfg.dataset {
        DatasetSource::Synth(s) => {
            let (corpus, cats) = synth_corpus(&s.corpus, &mut cfg.stage_rng("synth"))?;
            let sem = synth_semantics(
                &cats,
                s.semantic_dim,
                s.semantic_noise,
                &mut cfg.stage_rng("semantics"),
            )?;
            Ok((corpus, sem))
        }
        DatasetSource::File(f) => {
            let loaded = load_interactions(&f.interactions)?;
            let corpus = build_corpus(&loaded.records, f.min_user, f.min_item)?;
            let sem = load_with_vocab(&f.semantics, corpus.items())?;
            Ok((corpus, sem))
        }
    }
}

/// Plants fake orders per the configured knobs (an empty plan when injection
/// is disabled).
pub fn inject(
    cfg: &ExperimentConfig,
    corpus: &InteractionCorpus,
    sem: &SemanticTable,
) -> Result<(InteractionCorpus, FakeOrderManifest)> {
    let plan = if cfg.injection_enabled() {
        plan_allocation(corpus, &cfg.injection, &mut cfg.stage_rng("inject.plan"))?
    } else {
        InjectionPlan::empty(cfg.injection.clone(), cfg.stage_rng("inject.plan").seed())
    };
    apply_plan(corpus, &plan, Some(sem), &mut cfg.stage_rng("inject.apply"))
}

pub fn train_prefixes(corpus: &InteractionCorpus) -> Vec<Vec<u32>> {
    corpus
        .users()
        .iter()
        .map(|u| u.train_prefix().to_vec())
        .collect()
}

/// Trains the deployed recommender on the training prefixes of `corpus`. The
/// same initialization and shuffling streams are used for every corpus.
pub fn train_target(
    cfg: &ExperimentConfig,
    corpus: &InteractionCorpus,
) -> Result<(SeqRec, ParamVector, TrainReport)> {
    let model = SeqRec::new(cfg.target.model_config(corpus.num_items()))?;
    let mut params = model.init_params(&mut cfg.stage_rng("target.init"));
    let report = model.train(
        &mut params,
        &train_prefixes(corpus),
        &cfg.target.train,
        &mut cfg.stage_rng("target.train"),
    )?;
    Ok((model, params, report))
}

/// Validation terms (training prefix -> validation item) of users with no
/// flagged position.
pub fn validation_terms<'a>(
    corpus: &'a InteractionCorpus,
    split: &crate::corpus::LooSplit,
    flagged: &[(usize, usize)],
) -> Vec<Term<'a>> {
    let dirty: HashSet<usize> = flagged.iter().map(|&(u, _)| u).collect();
    split
        .users
        .iter()
        .filter(|u| !dirty.contains(&u.user))
        .map(|u| Term {
            prefix: corpus.user(u.user).train_prefix(),
            target: u.valid,
        })
        .collect()
}

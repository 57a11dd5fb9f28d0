//! C ABI over the seqguard toolkit.
//!
//! Objects cross the boundary as opaque handles created by `sg_*_new` /
//! `sg_*_load` style functions and released with the matching `sg_*_free`.
//! Every fallible call returns an [`SgStatus`]; the message of the last failure
//! on the calling thread is available through [`sg_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use seqguard::corpus::InteractionCorpus;
use seqguard::error::Error;
use seqguard::harness::{self, ExperimentConfig, RunOptions, Stage};
use seqguard::numkit::{jensen_shannon, ProbDist};
use seqguard::params::ParamVector;
use seqguard::seqrec::{SeqRec, SequenceModel};

/// Status codes. Values match the exit codes of the command-line tool.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    EmptyData = 5,
    Numerical = 6,
    Divergence = 7,
    NullPointer = 8,
    Panic = 9,
}

impl From<&Error> for SgStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            2 => SgStatus::InvalidArgument,
            3 => SgStatus::Io,
            4 => SgStatus::Format,
            5 => SgStatus::EmptyData,
            6 => SgStatus::Numerical,
            7 => SgStatus::Divergence,
            _ => SgStatus::InvalidArgument,
        }
    }
}

/// Last stage a pipeline run executes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStage {
    Data = 0,
    Clean = 1,
    Inject = 2,
    Compromised = 3,
    DualView = 4,
    Detect = 5,
    Influence = 6,
    Rectify = 7,
    Report = 8,
}

impl From<SgStage> for Stage {
    fn from(s: SgStage) -> Self {
        Stage::ALL[s as usize]
    }
}

/// Headline numbers of a full pipeline run. Fields that do not apply are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgPipelineSummary {
    pub clean_ndcg10: f64,
    pub compromised_ndcg10: f64,
    pub rectified_ndcg10: f64,
    pub detection_precision: f64,
    pub detection_recall: f64,
    pub fake_orders: u64,
    pub flagged: u64,
    pub harmful: u64,
}

/// Experiment configuration.
pub struct SgConfig {
    inner: ExperimentConfig,
}

/// An interaction corpus.
pub struct SgCorpus {
    inner: InteractionCorpus,
}

/// A trained recommender and its parameters.
pub struct SgModel {
    model: SeqRec,
    params: ParamVector,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SgStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            let status = SgStatus::from(&e);
            set_error(e.to_string());
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(Error::InvalidArgument(format!("{what} is not valid UTF-8"))))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length, or 0
/// when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Writes a new default configuration to `*out`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_config_new(out: *mut *mut SgConfig) -> SgStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(SgConfig {
            inner: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Parses a JSON configuration document; missing fields take defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_config_from_json(
    json: *const c_char,
    out: *mut *mut SgConfig,
) -> SgStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let inner: ExperimentConfig = serde_json::from_str(text).map_err(Error::from)?;
        inner.validate()?;
        *out = Box::into_raw(Box::new(SgConfig { inner }));
        Ok(())
    })
}

/// Sets the root seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sg_config_set_seed(cfg: *mut SgConfig, seed: u64) -> SgStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.inner.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_config_free(cfg: *mut SgConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Builds the corpus named by the configuration's dataset section.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_corpus_from_config(
    cfg: *const SgConfig,
    out: *mut *mut SgCorpus,
) -> SgStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        let (inner, _) = harness::load_data(&cfg.inner)?;
        *out = Box::into_raw(Box::new(SgCorpus { inner }));
        Ok(())
    })
}

/// Reads a corpus snapshot (`corpus.json` / `compromised.json`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_corpus_load(path: *const c_char, out: *mut *mut SgCorpus) -> SgStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let inner = seqguard::corpus::read_snapshot(&path)?;
        *out = Box::into_raw(Box::new(SgCorpus { inner }));
        Ok(())
    })
}

/// # Safety
/// `corpus` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sg_corpus_num_users(corpus: *const SgCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.inner.num_users())
}

/// # Safety
/// `corpus` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sg_corpus_num_items(corpus: *const SgCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.inner.num_items())
}

/// # Safety
/// `corpus` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sg_corpus_num_interactions(corpus: *const SgCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.inner.num_interactions())
}

/// # Safety
/// `corpus` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_corpus_free(corpus: *mut SgCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads a recommender checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_model_load(path: *const c_char, out: *mut *mut SgModel) -> SgStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let (model, params) = SeqRec::load(&path)?;
        *out = Box::into_raw(Box::new(SgModel { model, params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sg_model_vocab(model: *const SgModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.vocab())
}

/// Next-item logits after `prefix` (dense item indices) into `scores`, which
/// must hold exactly the model's vocabulary size.
///
/// # Safety
/// `prefix` must point to `len` items and `scores` to `scores_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_model_next_item_scores(
    model: *const SgModel,
    prefix: *const u32,
    len: usize,
    scores: *mut f64,
    scores_len: usize,
) -> SgStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if prefix.is_null() || scores.is_null() {
            return Err(Failure::Null("prefix/scores"));
        }
        if scores_len != m.model.vocab() {
            return Err(Error::InvalidArgument(format!(
                "scores holds {scores_len} values, vocabulary is {}",
                m.model.vocab()
            ))
            .into());
        }
        let prefix = std::slice::from_raw_parts(prefix, len);
        let logits = m.model.last_logits(m.params.as_slice(), prefix)?;
        std::slice::from_raw_parts_mut(scores, scores_len).copy_from_slice(&logits);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_model_free(model: *mut SgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Jensen-Shannon divergence (natural log) of two distributions of length `n`.
///
/// # Safety
/// `p` and `q` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_jensen_shannon(
    p: *const f64,
    q: *const f64,
    n: usize,
    out: *mut f64,
) -> SgStatus {
    guard(|| {
        if p.is_null() || q.is_null() {
            return Err(Failure::Null("p/q"));
        }
        let out = out_arg(out, "out")?;
        let p = ProbDist::new(std::slice::from_raw_parts(p, n).to_vec())?;
        let q = ProbDist::new(std::slice::from_raw_parts(q, n).to_vec())?;
        *out = jensen_shannon(&p, &q)?;
        Ok(())
    })
}

/// Runs the pipeline up to `until` with outputs in `out_dir`. When `until` is
/// the report stage and `summary` is non-null, it receives the headline
/// numbers.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` a NUL-terminated string and
/// `summary` null or valid.
#[no_mangle]
pub unsafe extern "C" fn sg_pipeline_run(
    cfg: *const SgConfig,
    out_dir: *const c_char,
    until: SgStage,
    resume: bool,
    summary: *mut SgPipelineSummary,
) -> SgStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let outcome = harness::run_pipeline(
            &cfg.inner,
            &dir,
            RunOptions {
                until: until.into(),
                resume,
            },
        )?;
        if let (Some(s), Some(m)) = (summary.as_mut(), outcome.metrics) {
            *s = SgPipelineSummary {
                clean_ndcg10: m.clean.ndcg_at(10),
                compromised_ndcg10: m.compromised.ndcg_at(10),
                rectified_ndcg10: m.rectified.ndcg_at(10),
                detection_precision: m.detection.precision.unwrap_or(f64::NAN),
                detection_recall: m.detection.recall.unwrap_or(f64::NAN),
                fake_orders: m.fake_orders as u64,
                flagged: m.detection.flagged as u64,
                harmful: m.influence.harmful as u64,
            };
        }
        Ok(())
    })
}

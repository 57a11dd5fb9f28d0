//! Target recommender: item embeddings, one gated recurrent layer, and a
//! softmax over the full vocabulary with weights tied to the embeddings.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::GruCell;
use crate::numkit::{axpy, dot, log_sum_exp, stable_softmax, ProbDist, SeededRng};
use crate::optim::{train_loop, TrainConfig, TrainReport};
use crate::parallel::accumulate_ordered;
use crate::params::{read_checkpoint, write_checkpoint, Architecture, Layout, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 2,
            hidden: 64,
            max_len: 200,
            init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::invalid("vocabulary must hold at least two items"));
        }
        if self.hidden < 8 {
            return Err(Error::invalid("hidden width must be at least 8"));
        }
        Ok(())
    }
}

/// Loss contract used by influence estimation, rectification and evaluation.
/// `weights[t]` scales the cross-entropy of predicting `seq[t + 1]` from the
/// state after `seq[..=t]`.
pub trait SequenceModel: Sync {
    fn layout(&self) -> &Arc<Layout>;

    fn vocab(&self) -> usize;

    /// `sum_t weights[t] * CE_t`; adds its gradient into `grad` when given.
    fn weighted_loss(
        &self,
        params: &[f64],
        seq: &[u32],
        weights: &[f64],
        grad: Option<&mut [f64]>,
    ) -> Result<f64>;

    /// Next-item logits after consuming `prefix`.
    fn last_logits(&self, params: &[f64], prefix: &[u32]) -> Result<Vec<f64>>;

    /// Sum of all next-item terms over `seqs` with gradient, plus the number of
    /// terms. Reduced in fixed order.
    fn batch_loss(&self, params: &[f64], seqs: &[&[u32]]) -> Result<(f64, Vec<f64>, usize)> {
        let terms = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
        let (loss, grad) = accumulate_ordered(seqs, self.layout().len(), |seq, g| {
            if seq.len() < 2 {
                return Ok(0.0);
            }
            let w = vec![1.0; seq.len() - 1];
            self.weighted_loss(params, seq, &w, Some(g))
        })?;
        Ok((loss, grad, terms))
    }

    /// Cross-entropy of the single term whose target is `target`, with gradient.
    fn term_loss(&self, params: &[f64], prefix: &[u32], target: u32) -> Result<(f64, Vec<f64>)> {
        if prefix.is_empty() {
            return Err(Error::invalid("sample term needs a non-empty prefix"));
        }
        let mut seq = Vec::with_capacity(prefix.len() + 1);
        seq.extend_from_slice(prefix);
        seq.push(target);
        let mut w = vec![0.0; prefix.len()];
        w[prefix.len() - 1] = 1.0;
        let mut grad = vec![0.0; self.layout().len()];
        let loss = self.weighted_loss(params, &seq, &w, Some(&mut grad))?;
        Ok((loss, grad))
    }
}

/// The reference recommender.
#[derive(Debug, Clone)]
pub struct SeqRec {
    config: ModelConfig,
    layout: Arc<Layout>,
    emb: usize,
    cell: GruCell,
}

/// Hidden states `h_1..h_T`, `len x hidden` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub hidden: usize,
    pub states: Vec<f64>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.states.len() / self.hidden
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.hidden..(t + 1) * self.hidden]
    }
}

impl SeqRec {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::new();
        let emb = layout.push("item_embeddings", config.vocab, config.hidden);
        let cell = GruCell::register(&mut layout, "encoder", config.hidden, config.hidden);
        Ok(SeqRec {
            config,
            layout: Arc::new(layout),
            emb,
            cell,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(Arc::clone(&self.layout))
    }

    pub fn init_params(&self, rng: &mut SeededRng) -> ParamVector {
        let mut p = self.zero_params();
        p.randomize(self.config.init_scale, rng);
        p
    }

    fn check(&self, params: &[f64], seq: &[u32]) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::invalid("parameter vector does not match this model"));
        }
        if seq.len() > self.config.max_len + 1 {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds maximum {}",
                seq.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&i| i as usize >= self.config.vocab) {
            return Err(Error::invalid(format!("item {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn embed(&self, params: &[f64], seq: &[u32]) -> Vec<f64> {
        let d = self.config.hidden;
        let mut x = Vec::with_capacity(seq.len() * d);
        for &i in seq {
            let o = self.emb + i as usize * d;
            x.extend_from_slice(&params[o..o + d]);
        }
        x
    }

    fn logits(&self, params: &[f64], h: &[f64]) -> Vec<f64> {
        let d = self.config.hidden;
        let table = &params[self.emb..self.emb + self.config.vocab * d];
        table.chunks_exact(d).map(|row| dot(row, h)).collect()
    }

    /// Hidden states and per-position next-item logits (`len x vocab`).
    pub fn forward(
        &self,
        params: &ParamVector,
        seq: &[u32],
    ) -> Result<(EncoderStates, Vec<Vec<f64>>)> {
        self.check(params.as_slice(), seq)?;
        let p = params.as_slice();
        let tr = self.cell.forward(p, &self.embed(p, seq), seq.len());
        let logits = (0..seq.len())
            .map(|t| self.logits(p, tr.state(t, self.config.hidden)))
            .collect();
        Ok((
            EncoderStates {
                hidden: self.config.hidden,
                states: tr.h,
            },
            logits,
        ))
    }

    /// Mean next-item cross-entropy over positions `1..T` and its gradient.
    pub fn sequence_loss(&self, params: &ParamVector, seq: &[u32]) -> Result<(f64, ParamVector)> {
        if seq.len() < 2 {
            return Err(Error::invalid("sequence loss needs at least two items"));
        }
        let w = vec![1.0 / (seq.len() - 1) as f64; seq.len() - 1];
        let mut g = self.zero_params();
        let loss = self.weighted_loss(params.as_slice(), seq, &w, Some(g.as_mut_slice()))?;
        Ok((loss, g))
    }

    /// Single cross-entropy term predicting `target` after `prefix`.
    pub fn sample_term_loss(
        &self,
        params: &ParamVector,
        prefix: &[u32],
        target: u32,
    ) -> Result<(f64, ParamVector)> {
        let (loss, g) = self.term_loss(params.as_slice(), prefix, target)?;
        Ok((loss, ParamVector::from_vec(Arc::clone(&self.layout), g)?))
    }

    pub fn next_item_dist(&self, params: &ParamVector, prefix: &[u32]) -> Result<ProbDist> {
        stable_softmax(&self.last_logits(params.as_slice(), prefix)?)
    }

    /// Adaptive-moment training on `sequences` (training prefixes), minimizing
    /// the mean next-item cross-entropy over all terms of each minibatch.
    pub fn train(
        &self,
        params: &mut ParamVector,
        sequences: &[Vec<u32>],
        cfg: &TrainConfig,
        rng: &mut SeededRng,
    ) -> Result<TrainReport> {
        let usable: Vec<&[u32]> = sequences
            .iter()
            .filter(|s| s.len() >= 2)
            .map(Vec::as_slice)
            .collect();
        if usable.is_empty() {
            return Err(Error::invalid("no training sequence has two or more items"));
        }
        train_loop(params, usable.len(), cfg, rng, |p, batch| {
            let seqs: Vec<&[u32]> = batch.iter().map(|&i| usable[i]).collect();
            let (loss, mut grad, terms) = self.batch_loss(p, &seqs)?;
            let inv = 1.0 / terms.max(1) as f64;
            crate::numkit::scale(inv, &mut grad);
            Ok((loss * inv, grad))
        })
    }

    pub fn save(&self, params: &ParamVector, path: &Path) -> Result<()> {
        write_checkpoint(path, Architecture::SeqRec, &self.config, params)
    }

    pub fn load(path: &Path) -> Result<(SeqRec, ParamVector)> {
        let raw = read_checkpoint(path)?;
        if raw.arch != Architecture::SeqRec {
            return Err(Error::Format(format!(
                "{} is not a recommender checkpoint",
                path.display()
            )));
        }
        let model = SeqRec::new(serde_json::from_value(raw.header)?)?;
        let params = ParamVector::from_vec(Arc::clone(&model.layout), raw.params)?;
        Ok((model, params))
    }
}

impl SequenceModel for SeqRec {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn weighted_loss(
        &self,
        params: &[f64],
        seq: &[u32],
        weights: &[f64],
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check(params, seq)?;
        if seq.len() < 2 || weights.len() != seq.len() - 1 {
            return Err(Error::invalid("term weights must have length len - 1"));
        }
        let Some(last) = weights.iter().rposition(|&w| w != 0.0) else {
            return Ok(0.0);
        };
        let (d, v) = (self.config.hidden, self.config.vocab);
        let inputs = self.embed(params, &seq[..=last]);
        let tr = self.cell.forward(params, &inputs, last + 1);
        let mut loss = 0.0;
        let Some(grad) = grad else {
            for (t, &w) in weights[..=last].iter().enumerate() {
                if w != 0.0 {
                    let logits = self.logits(params, tr.state(t, d));
                    loss += w * (log_sum_exp(&logits) - logits[seq[t + 1] as usize]);
                }
            }
            return Ok(loss);
        };

        let mut dh = vec![0.0; (last + 1) * d];
        let table = &params[self.emb..self.emb + v * d];
        for (t, &w) in weights[..=last].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let h = tr.state(t, d);
            let mut probs = self.logits(params, h);
            let target = seq[t + 1] as usize;
            let lse = log_sum_exp(&probs);
            loss += w * (lse - probs[target]);
            for p in probs.iter_mut() {
                *p = (*p - lse).exp();
            }
            probs[target] -= 1.0;
            let dht = &mut dh[t * d..(t + 1) * d];
            let gtable = &mut grad[self.emb..self.emb + v * d];
            for (j, (row, grow)) in table
                .chunks_exact(d)
                .zip(gtable.chunks_exact_mut(d))
                .enumerate()
            {
                let g = w * probs[j];
                axpy(g, row, dht);
                axpy(g, h, grow);
            }
        }
        let mut dx = vec![0.0; inputs.len()];
        self.cell
            .backward(params, &inputs, &tr, &mut dh, grad, Some(&mut dx));
        for (t, &item) in seq[..=last].iter().enumerate() {
            let o = self.emb + item as usize * d;
            axpy(1.0, &dx[t * d..(t + 1) * d], &mut grad[o..o + d]);
        }
        Ok(loss)
    }

    fn last_logits(&self, params: &[f64], prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::invalid("empty prefix"));
        }
        self.check(params, prefix)?;
        let tr = self
            .cell
            .forward(params, &self.embed(params, prefix), prefix.len());
        Ok(self.logits(params, tr.state(prefix.len() - 1, self.config.hidden)))
    }
}

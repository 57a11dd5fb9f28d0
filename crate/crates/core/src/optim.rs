//! Adaptive-moment optimizer, gradient clipping and the minibatch training
//! loop shared by the recommender and the dual-view model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{norm, scale, SeededRng};
use crate::params::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Sequences per minibatch.
    pub batch_size: usize,
    /// Max global gradient norm; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// L2 penalty `weight_decay / 2 * |theta|^2` added to the objective.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            clip_norm: Some(5.0),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.lr * bc2.sqrt() / bc1;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * *m / (v.sqrt() + self.eps * bc2.sqrt());
        }
    }
}

/// Rescales `grad` to norm `max_norm` if larger; returns the original norm.
pub fn clip_to_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let n = norm(grad);
    if n > max_norm && n > 0.0 {
        scale(max_norm / n, grad);
    }
    n
}

/// Loss per epoch and the detected convergence epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub convergence_epoch: Option<usize>,
}

/// First (1-based) epoch `e` such that the relative loss improvement at
/// epochs `e`, `e+1`, `e+2` is each below `tolerance`.
pub fn convergence_epoch(trace: &[f64], tolerance: f64, patience: usize) -> Option<usize> {
    let small: Vec<bool> = trace
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[0].abs().max(1e-12) < tolerance)
        .collect();
    // small[i] is the improvement achieved at epoch i + 2.
    small
        .windows(patience)
        .position(|run| run.iter().all(|&s| s))
        .map(|i| i + 2)
}

/// Minibatch loop. `batch_objective(params, batch)` returns the batch-mean loss
/// and its gradient; weight decay and clipping are applied here.
pub fn train_loop<F>(
    params: &mut ParamVector,
    units: usize,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
    mut batch_objective: F,
) -> Result<TrainReport>
where
    F: FnMut(&[f64], &[usize]) -> Result<(f64, Vec<f64>)>,
{
    if units == 0 {
        return Err(Error::invalid("no training sequences"));
    }
    let mut adam = Adam::new(params.len(), cfg);
    let mut order: Vec<usize> = (0..units).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let (loss, mut grad) = batch_objective(params.as_slice(), chunk)?;
            if !loss.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "non-finite training loss in epoch {epoch}"
                )));
            }
            if cfg.weight_decay > 0.0 {
                crate::numkit::axpy(cfg.weight_decay, params.as_slice(), &mut grad);
            }
            if let Some(max) = cfg.clip_norm {
                clip_to_norm(&mut grad, max);
            }
            adam.step(params.as_mut_slice(), &grad);
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        trace.push(epoch_loss);
    }
    if !params.is_finite() {
        return Err(Error::NumericalFailure(
            "parameters became non-finite".into(),
        ));
    }
    Ok(TrainReport {
        convergence_epoch: convergence_epoch(&trace, 1e-3, 3),
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Layout;
    use std::sync::Arc;

    #[test]
    fn convergence_rule() {
        // Large improvements through epoch 6, flat from epoch 7 on.
        let trace = [10.0, 8.0, 6.0, 5.0, 4.5, 4.0, 4.0, 4.0, 4.0, 4.0];
        assert_eq!(convergence_epoch(&trace, 1e-3, 3), Some(7));
        assert_eq!(convergence_epoch(&[3.0; 6], 1e-3, 3), Some(2));
        assert_eq!(convergence_epoch(&[3.0, 2.0, 1.0], 1e-3, 3), None);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_to_norm(&mut g, 1.0), 5.0);
        assert!((norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![0.1, 0.0];
        clip_to_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut l = Layout::new();
        l.push("x", 1, 2);
        let mut p = ParamVector::from_vec(Arc::new(l), vec![1.0, -2.0]).unwrap();
        let cfg = TrainConfig {
            epochs: 3000,
            learning_rate: 1e-2,
            batch_size: 1,
            ..Default::default()
        };
        let report = train_loop(&mut p, 1, &cfg, &mut SeededRng::new(0), |x, _| {
            Ok((
                x[0] * x[0] + 3.0 * x[1] * x[1],
                vec![2.0 * x[0], 6.0 * x[1]],
            ))
        })
        .unwrap();
        assert!(p.norm() < 1e-2, "{:?}", p.as_slice());
        assert!(report.loss_trace.last().unwrap() < &1e-3);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut l = Layout::new();
        l.push("x", 1, 1);
        let mut p = ParamVector::from_vec(Arc::new(l), vec![1.5]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        train_loop(&mut p, 1, &cfg, &mut SeededRng::new(0), |x, _| {
            Ok((x[0], vec![1.0]))
        })
        .unwrap();
        assert_eq!(p.as_slice(), &[1.5]);
    }

    #[test]
    fn nan_loss_is_reported() {
        let mut l = Layout::new();
        l.push("x", 1, 1);
        let mut p = ParamVector::zeros(Arc::new(l));
        let err = train_loop(
            &mut p,
            1,
            &TrainConfig::default(),
            &mut SeededRng::new(0),
            |_, _| Ok((f64::NAN, vec![0.0])),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericalFailure(m) if m.contains("epoch 1")));
    }
}

//! Single-layer gated recurrent cell with exact backpropagation through time.
//! Shared by the target recommender and both dual-view encoders.

use crate::numkit::{axpy, dot};
use crate::params::Layout;

/// Offsets of one cell's parameters inside a flat parameter vector.
///
/// Input weights for the update, reset and candidate paths are registered as
/// three consecutive `hidden x input_dim` blocks, so together they form one
/// `3*hidden x input_dim` matrix; the recurrent weights and biases follow the
/// same stacking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden: usize,
    w: usize,
    u: usize,
    b: usize,
}

/// Per-step activations kept for the backward pass (`len x hidden` each).
#[derive(Debug, Clone, Default)]
pub struct GruTrace {
    pub len: usize,
    pub h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
}

impl GruTrace {
    pub fn state(&self, t: usize, hidden: usize) -> &[f64] {
        &self.h[t * hidden..(t + 1) * hidden]
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GruCell {
    pub fn register(layout: &mut Layout, prefix: &str, input_dim: usize, hidden: usize) -> Self {
        let w = layout.push(format!("{prefix}.update_w"), hidden, input_dim);
        layout.push(format!("{prefix}.reset_w"), hidden, input_dim);
        layout.push(format!("{prefix}.candidate_w"), hidden, input_dim);
        let u = layout.push(format!("{prefix}.update_u"), hidden, hidden);
        layout.push(format!("{prefix}.reset_u"), hidden, hidden);
        layout.push(format!("{prefix}.candidate_u"), hidden, hidden);
        let b = layout.push(format!("{prefix}.update_b"), 1, hidden);
        layout.push(format!("{prefix}.reset_b"), 1, hidden);
        layout.push(format!("{prefix}.candidate_b"), 1, hidden);
        GruCell {
            input_dim,
            hidden,
            w,
            u,
            b,
        }
    }

    fn w<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + 3 * self.hidden * self.input_dim]
    }

    fn u<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.u..self.u + 3 * self.hidden * self.hidden]
    }

    fn b<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + 3 * self.hidden]
    }

    /// Runs the cell over `inputs` (`len x input_dim`, row-major) from `h_0 = 0`.
    pub fn forward(&self, params: &[f64], inputs: &[f64], len: usize) -> GruTrace {
        let (d, din) = (self.hidden, self.input_dim);
        debug_assert_eq!(inputs.len(), len * din);
        let (w, u, b) = (self.w(params), self.u(params), self.b(params));
        let mut tr = GruTrace {
            len,
            h: vec![0.0; len * d],
            z: vec![0.0; len * d],
            r: vec![0.0; len * d],
            c: vec![0.0; len * d],
        };
        let zero = vec![0.0; d];
        let mut pre = vec![0.0; 3 * d];
        let mut rh = vec![0.0; d];
        for t in 0..len {
            let x = &inputs[t * din..(t + 1) * din];
            for (k, p) in pre.iter_mut().enumerate() {
                *p = b[k] + dot(&w[k * din..(k + 1) * din], x);
            }
            let (done, rest) = tr.h.split_at_mut(t * d);
            let hp: &[f64] = if t == 0 { &zero } else { &done[(t - 1) * d..] };
            let h = &mut rest[..d];
            let z = &mut tr.z[t * d..(t + 1) * d];
            let r = &mut tr.r[t * d..(t + 1) * d];
            for i in 0..d {
                z[i] = sigmoid(pre[i] + dot(&u[i * d..(i + 1) * d], hp));
                r[i] = sigmoid(pre[d + i] + dot(&u[(d + i) * d..(d + i + 1) * d], hp));
                rh[i] = r[i] * hp[i];
            }
            let c = &mut tr.c[t * d..(t + 1) * d];
            for i in 0..d {
                c[i] = (pre[2 * d + i] + dot(&u[(2 * d + i) * d..(2 * d + i + 1) * d], &rh)).tanh();
                h[i] = (1.0 - z[i]) * hp[i] + z[i] * c[i];
            }
        }
        tr
    }

    /// Backpropagates `dh` (`len x hidden`, gradient of the loss w.r.t. each
    /// emitted state; overwritten) into `grad` (full flat gradient) and, when
    /// given, into `dx` (`len x input_dim`, accumulated).
    pub fn backward(
        &self,
        params: &[f64],
        inputs: &[f64],
        trace: &GruTrace,
        dh: &mut [f64],
        grad: &mut [f64],
        mut dx: Option<&mut [f64]>,
    ) {
        let (d, din, len) = (self.hidden, self.input_dim, trace.len);
        let (w, u) = (self.w(params), self.u(params));
        let zero = vec![0.0; d];
        let mut da = vec![0.0; 3 * d];
        let mut rh = vec![0.0; d];
        let mut drh = vec![0.0; d];
        let mut carry = vec![0.0; d];
        for t in (0..len).rev() {
            let hp: &[f64] = if t == 0 { &zero } else { trace.state(t - 1, d) };
            let z = &trace.z[t * d..(t + 1) * d];
            let r = &trace.r[t * d..(t + 1) * d];
            let c = &trace.c[t * d..(t + 1) * d];
            let dht = &mut dh[t * d..(t + 1) * d];
            axpy(1.0, &carry, dht);

            for i in 0..d {
                let dz = dht[i] * (c[i] - hp[i]);
                let dc = dht[i] * z[i];
                carry[i] = dht[i] * (1.0 - z[i]);
                da[i] = dz * z[i] * (1.0 - z[i]);
                da[2 * d + i] = dc * (1.0 - c[i] * c[i]);
                rh[i] = r[i] * hp[i];
            }
            // Candidate path: U_c acts on r * h_prev.
            drh.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                let g = da[2 * d + i];
                if g != 0.0 {
                    let row = (2 * d + i) * d;
                    axpy(g, &rh, &mut grad[self.u + row..self.u + row + d]);
                    axpy(g, &u[row..row + d], &mut drh);
                }
            }
            for i in 0..d {
                da[d + i] = drh[i] * hp[i] * r[i] * (1.0 - r[i]);
                carry[i] += drh[i] * r[i];
            }
            // Update and reset paths: U_z, U_r act on h_prev.
            for k in 0..2 * d {
                let g = da[k];
                if g != 0.0 {
                    let row = k * d;
                    if t > 0 {
                        axpy(g, hp, &mut grad[self.u + row..self.u + row + d]);
                    }
                    axpy(g, &u[row..row + d], &mut carry);
                }
            }
            let x = &inputs[t * din..(t + 1) * din];
            for k in 0..3 * d {
                let g = da[k];
                if g != 0.0 {
                    let row = k * din;
                    axpy(g, x, &mut grad[self.w + row..self.w + row + din]);
                    grad[self.b + k] += g;
                    if let Some(dx) = dx.as_deref_mut() {
                        axpy(g, &w[row..row + din], &mut dx[t * din..(t + 1) * din]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{fd_gradient_check, SeededRng};
    use crate::params::ParamVector;
    use std::sync::Arc;

    /// Loss = sum_t <a_t, h_t> + sum of squared inputs' gradient proxy.
    #[test]
    fn backward_matches_finite_differences() {
        let (din, d, len) = (3, 4, 5);
        let mut layout = Layout::new();
        let cell = GruCell::register(&mut layout, "enc", din, d);
        let layout = Arc::new(layout);
        let mut rng = SeededRng::new(12);
        let mut p = ParamVector::zeros(Arc::clone(&layout));
        p.randomize(0.8, &mut rng);
        for v in p.block_mut("enc.reset_b") {
            *v = 0.3;
        }
        let inputs: Vec<f64> = (0..len * din).map(|_| rng.normal()).collect();
        let coef: Vec<f64> = (0..len * d).map(|_| rng.normal()).collect();
        let loss = |params: &[f64], x: &[f64]| -> f64 {
            let tr = cell.forward(params, x, len);
            dot(&tr.h, &coef)
        };
        let tr = cell.forward(p.as_slice(), &inputs, len);
        let mut grad = vec![0.0; layout.len()];
        let mut dh = coef.clone();
        let mut dx = vec![0.0; len * din];
        cell.backward(
            p.as_slice(),
            &inputs,
            &tr,
            &mut dh,
            &mut grad,
            Some(&mut dx),
        );
        let err = fd_gradient_check(|q| loss(q, &inputs), &grad, p.as_slice(), 1e-4).unwrap();
        assert!(err < 1e-6, "param err {err}");
        let err = fd_gradient_check(|x| loss(p.as_slice(), x), &dx, &inputs, 1e-4).unwrap();
        assert!(err < 1e-6, "input err {err}");
    }

    #[test]
    fn states_are_causal() {
        let (din, d, len) = (2, 3, 6);
        let mut layout = Layout::new();
        let cell = GruCell::register(&mut layout, "enc", din, d);
        let mut p = ParamVector::zeros(Arc::new(layout));
        p.randomize(0.5, &mut SeededRng::new(1));
        let mut x: Vec<f64> = (0..len * din).map(|i| (i as f64).sin()).collect();
        let a = cell.forward(p.as_slice(), &x, len);
        x[4 * din] += 1.0;
        let b = cell.forward(p.as_slice(), &x, len);
        assert_eq!(a.h[..4 * d], b.h[..4 * d]);
        assert_ne!(a.h[4 * d..], b.h[4 * d..]);
    }
}

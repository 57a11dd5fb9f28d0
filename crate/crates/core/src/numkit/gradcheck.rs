use super::linalg::{dot, norm, scale};
use super::rng::SeededRng;
use crate::error::{Error, Result};

/// Above this dimension the check runs along random directions instead of
/// coordinates.
const COORDINATE_LIMIT: usize = 2000;
const RANDOM_DIRECTIONS: usize = 64;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `f` at `x` along `dir`: the fourth-order stencil at
/// `eps` and `eps / 2`, Richardson-combined to sixth order.
fn directional<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    dir: &[f64],
    eps: f64,
    probe: &mut [f64],
) -> Result<f64> {
    let mut eval = |t: f64, probe: &mut [f64]| -> Result<f64> {
        for ((p, xi), di) in probe.iter_mut().zip(x).zip(dir) {
            *p = xi + t * di;
        }
        let v = f(probe);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericalFailure(format!(
                "objective not finite at step {t}"
            )))
        }
    };
    let mut stencil = |h: f64| -> Result<f64> {
        let fp2 = eval(2.0 * h, probe)?;
        let fp1 = eval(h, probe)?;
        let fm1 = eval(-h, probe)?;
        let fm2 = eval(-2.0 * h, probe)?;
        // Differences first: an objective that ignores the direction gives exactly 0.
        Ok((8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * h))
    };
    let coarse = stencil(eps)?;
    let fine = stencil(0.5 * eps)?;
    Ok((16.0 * fine - coarse) / 15.0)
}

/// Maximum relative error between `analytic_grad` and central finite
/// differences of `f` around `x`. Relative error uses the denominator
/// `max(|a|, |b|, 1e-8)`.
pub fn fd_gradient_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    analytic_grad: &[f64],
    x: &[f64],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if analytic_grad.len() != x.len() {
        return Err(Error::invalid("gradient length differs from point length"));
    }
    let n = x.len();
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    if n <= COORDINATE_LIMIT {
        let mut dir = vec![0.0; n];
        for i in 0..n {
            dir[i] = 1.0;
            let fd = directional(&mut f, x, &dir, eps, &mut probe)?;
            dir[i] = 0.0;
            worst = worst.max(rel_err(fd, analytic_grad[i]));
        }
    } else {
        let mut rng = SeededRng::new(0x6772_6164);
        for _ in 0..RANDOM_DIRECTIONS {
            let mut dir: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let nd = norm(&dir);
            scale(1.0 / nd, &mut dir);
            let fd = directional(&mut f, x, &dir, eps, &mut probe)?;
            worst = worst.max(rel_err(fd, dot(analytic_grad, &dir)));
        }
    }
    Ok(worst)
}

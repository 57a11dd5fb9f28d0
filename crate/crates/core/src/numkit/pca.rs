use serde::{Deserialize, Serialize};

use super::linalg::{axpy, dot, norm, scale, DenseMatrix};
use crate::error::{Error, Result};

const TOLERANCE: f64 = 1e-9;
const MAX_ITERATIONS: usize = 1000;

/// Fitted principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// Column means of the fitted data.
    pub mean: Vec<f64>,
    /// `cols x r`: one component per column.
    pub components: DenseMatrix,
    /// Eigenvalues of the sample covariance, descending.
    pub explained_variance: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl Pca {
    pub fn explained_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.explained_variance.len()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    pub fn project(&self, data: &DenseMatrix) -> Result<DenseMatrix> {
        project_centered(data, &self.mean, &self.components)
    }
}

fn covariance(data: &DenseMatrix, mean: &[f64]) -> DenseMatrix {
    let (n, d) = (data.rows(), data.cols());
    let mut cov = DenseMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for (c, (x, m)) in centered.iter_mut().zip(data.row(i).iter().zip(mean)) {
            *c = x - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca != 0.0 {
                axpy(ca, &centered, cov.row_mut(a));
            }
        }
    }
    scale(1.0 / (n as f64 - 1.0), cov.as_mut_slice());
    cov
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // Two passes keep the result orthogonal to machine precision.
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            axpy(-c, b, v);
        }
    }
}

/// Orthonormalizes `block` in place (modified Gram-Schmidt). A column that
/// vanishes against the earlier ones is replaced by the first coordinate axis
/// that is still independent, so rank-deficient inputs keep `r` columns.
fn orthonormalize(block: &mut [Vec<f64>], floor: f64) {
    for k in 0..block.len() {
        let (done, rest) = block.split_at_mut(k);
        let v = &mut rest[0];
        orthogonalize(v, done);
        let nv = norm(v);
        if nv > floor {
            scale(1.0 / nv, v);
            continue;
        }
        let d = v.len();
        for axis in 0..d {
            v.iter_mut().for_each(|x| *x = 0.0);
            v[axis] = 1.0;
            orthogonalize(v, done);
            let na = norm(v);
            if na > 0.5 {
                scale(1.0 / na, v);
                break;
            }
        }
    }
}

/// Eigenpairs of a small symmetric `n x n` matrix (row-major) by cyclic Jacobi
/// rotations. Values come back descending; vector `j` is column `j` of the
/// returned row-major matrix.
fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let mut off = 0.0;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = a[i * n + j] * a[i * n + j];
                total += x;
                if i != j {
                    off += x;
                }
            }
        }
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apr = a[p * n + r];
                if apr == 0.0 {
                    continue;
                }
                let theta = (a[r * n + r] - a[p * n + p]) / (2.0 * apr);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (x, y) = (a[k * n + p], a[k * n + r]);
                    a[k * n + p] = c * x - s * y;
                    a[k * n + r] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[p * n + k], a[r * n + k]);
                    a[p * n + k] = c * x - s * y;
                    a[r * n + k] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (q[k * n + p], q[k * n + r]);
                    q[k * n + p] = c * x - s * y;
                    q[k * n + r] = s * x + c * y;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + col] = q[k * n + i];
        }
    }
    (values, vectors)
}

/// `block * q` for a block of `r` columns and a row-major `r x r` rotation.
fn rotate(block: &[Vec<f64>], q: &[f64]) -> Vec<Vec<f64>> {
    let r = block.len();
    (0..r)
        .map(|j| {
            let mut out = vec![0.0; block[0].len()];
            for (i, b) in block.iter().enumerate() {
                axpy(q[i * r + j], b, &mut out);
            }
            out
        })
        .collect()
}

/// Top-`r` principal components by block power iteration. Each step multiplies
/// the block by the covariance, re-orthonormalizes it and rotates it onto the
/// Ritz vectors of the projected covariance, which keeps close eigenvalues
/// inside the block apart. Stops once no Ritz value moves by more than the
/// tolerance (relative to the total variance).
pub fn pca_fit(data: &DenseMatrix, r: usize) -> Result<Pca> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::invalid("pca needs at least two rows"));
    }
    if r == 0 || r > (n - 1).min(d) {
        return Err(Error::invalid(format!(
            "pca rank {r} outside 1..={}",
            (n - 1).min(d)
        )));
    }
    let mean = data.column_means();
    let cov = covariance(data, &mean);
    let total_variance: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let scale_ref = total_variance.max(f64::MIN_POSITIVE);
    let floor = 1e-14 * scale_ref;

    // Deterministic start: dense vectors, column k tilted towards axis k.
    let mut block: Vec<Vec<f64>> = (0..r)
        .map(|k| {
            let mut v: Vec<f64> = (0..d)
                .map(|i| 1.0 + 0.5 * ((i * 7 + k * 13) % 11) as f64 / 11.0)
                .collect();
            v[k % d] += d as f64;
            v
        })
        .collect();
    orthonormalize(&mut block, 1e-12);
    let mut image: Vec<Vec<f64>> = block.iter().map(|v| cov.matvec(v)).collect();

    let mut values = vec![f64::INFINITY; r];
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let mut next = image;
        orthonormalize(&mut next, floor);
        let next_image: Vec<Vec<f64>> = next.iter().map(|v| cov.matvec(v)).collect();
        let mut projected = vec![0.0; r * r];
        for i in 0..r {
            for j in i..r {
                let x = 0.5 * (dot(&next[i], &next_image[j]) + dot(&next[j], &next_image[i]));
                projected[i * r + j] = x;
                projected[j * r + i] = x;
            }
        }
        let (ritz, rotation) = symmetric_eigen(projected, r);
        block = rotate(&next, &rotation);
        image = rotate(&next_image, &rotation);
        let change = ritz
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        values = ritz;
        if change <= TOLERANCE * scale_ref {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NumericalFailure(
            "block power iteration did not converge".into(),
        ));
    }
    for v in block.iter_mut() {
        let pivot = v.iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            scale(-1.0, v);
        }
    }
    let basis = block;
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();

    let mut components = DenseMatrix::zeros(d, r);
    for (j, b) in basis.iter().enumerate() {
        for (i, x) in b.iter().enumerate() {
            components.set(i, j, *x);
        }
    }
    Ok(Pca {
        mean,
        components,
        explained_variance: values,
        total_variance,
    })
}

fn project_centered(
    data: &DenseMatrix,
    mean: &[f64],
    components: &DenseMatrix,
) -> Result<DenseMatrix> {
    if data.cols() != components.rows() || mean.len() != data.cols() {
        return Err(Error::invalid(format!(
            "projection shape mismatch: data has {} cols, components {} rows",
            data.cols(),
            components.rows()
        )));
    }
    let mut centered = data.clone();
    for i in 0..centered.rows() {
        axpy(-1.0, mean, centered.row_mut(i));
    }
    centered.matmul(components)
}

/// Centers `data` on its own column means and projects onto `components`
/// (`cols x r`).
pub fn pca_project(data: &DenseMatrix, components: &DenseMatrix) -> Result<DenseMatrix> {
    let mean = data.column_means();
    project_centered(data, &mean, components)
}

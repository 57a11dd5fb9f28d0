//! Deterministic numeric kernel shared by every other module.

mod gradcheck;
mod linalg;
mod pca;
mod prob;
mod rng;

pub use gradcheck::fd_gradient_check;
pub use linalg::{axpy, dot, norm, scale, DenseMatrix};
pub use pca::{pca_fit, pca_project, Pca};
pub use prob::{
    cosine_similarity, jensen_shannon, log_softmax_in_place, log_sum_exp, stable_softmax, ProbDist,
};
pub use rng::SeededRng;

pub(crate) use prob::jsd_raw;

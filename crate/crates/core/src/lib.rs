//! Toolkit for studying fake orders in sequential recommendation logs.
//!
//! The crate covers the whole loop: plant manipulated interactions into genuine
//! user sequences ([`injector`]), flag them with a two-view detection model
//! ([`dualview`], [`detector`]), measure the harm of each flagged sample with
//! influence functions and unlearn the harmful ones by gradient ascent
//! ([`rectifier`]) on the deployed recommender ([`seqrec`]). [`harness`] wires
//! the stages into a reproducible pipeline.

pub mod corpus;
pub mod detector;
pub mod dualview;
pub mod error;
mod fsio;
pub mod gru;
pub mod harness;
pub mod injector;
pub mod numkit;
pub mod optim;
mod parallel;
pub mod params;
pub mod rectifier;
pub mod semantics;
pub mod seqrec;

pub use error::{Error, Result};

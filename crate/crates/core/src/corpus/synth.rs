use serde::{Deserialize, Serialize};

use super::{InteractionCorpus, UserSequence, Vocab};
use crate::error::{Error, Result};
use crate::numkit::SeededRng;

/// Ground-truth generator: items split into categories, each user walks a
/// sticky category Markov chain and draws items within the current category by
/// Zipf popularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub categories: usize,
    pub items: usize,
    pub users: usize,
    pub mean_length: f64,
    pub zipf_exponent: f64,
    pub stay_probability: f64,
    pub min_length: usize,
    pub max_length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: 4,
            items: 500,
            users: 2000,
            mean_length: 50.0,
            zipf_exponent: 1.0,
            stay_probability: 0.85,
            min_length: 5,
            max_length: 200,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.categories < 1 || self.items < self.categories.max(2) {
            return Err(Error::invalid(format!(
                "need items >= categories >= 1 and items >= 2 (got {} items, {} categories)",
                self.items, self.categories
            )));
        }
        if self.users == 0 {
            return Err(Error::invalid("need at least one user"));
        }
        if !(self.mean_length >= 1.0) || self.min_length < 5 || self.max_length < self.min_length {
            return Err(Error::invalid("invalid length configuration"));
        }
        if !(0.0..=1.0).contains(&self.stay_probability) || !(self.zipf_exponent >= 0.0) {
            return Err(Error::invalid("invalid stay probability or zipf exponent"));
        }
        Ok(())
    }

    /// Category of each item: contiguous, balanced blocks.
    pub fn category_assignment(&self) -> Vec<u32> {
        (0..self.items)
            .map(|i| (i * self.categories / self.items) as u32)
            .collect()
    }
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Returns the corpus and each item's category.
pub fn synth_corpus(
    config: &SynthConfig,
    rng: &mut SeededRng,
) -> Result<(InteractionCorpus, Vec<u32>)> {
    config.validate()?;
    let categories = config.category_assignment();
    let members: Vec<Vec<u32>> = (0..config.categories)
        .map(|c| {
            (0..config.items as u32)
                .filter(|&i| categories[i as usize] == c as u32)
                .collect()
        })
        .collect();
    let cdfs: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (1..=m.len())
                .map(|rank| (rank as f64).powf(-config.zipf_exponent))
                .collect();
            cumulative(&w)
        })
        .collect();

    let p_stop = 1.0 / config.mean_length;
    let mut users = Vec::with_capacity(config.users);
    for u in 0..config.users {
        // Geometric on {1, 2, ...} with the requested mean.
        let mut len = 1usize;
        while rng.uniform() >= p_stop && len < config.max_length {
            len += 1;
        }
        let len = len.clamp(config.min_length, config.max_length);
        let mut cat = rng.below(config.categories);
        let mut items = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 && config.categories > 1 && rng.uniform() >= config.stay_probability {
                let other = rng.below(config.categories - 1);
                cat = if other >= cat { other + 1 } else { other };
            }
            items.push(members[cat][draw(&cdfs[cat], rng.uniform())]);
        }
        users.push(UserSequence {
            id: format!("u{u}"),
            items,
        });
    }
    let vocab = Vocab::from_ids((0..config.items).map(|i| format!("i{i}")).collect())?;
    Ok((InteractionCorpus::from_sequences(vocab, users)?, categories))
}

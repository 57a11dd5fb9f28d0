//! Interaction logs: loading, activity filtering, dense vocabularies,
//! leave-one-out splits and the popularity / transition statistics the
//! detector reads.

mod io;
mod synth;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::SeededRng;

pub use io::{load_interactions, read_snapshot, write_snapshot, LoadedInteractions};
pub use synth::{synth_corpus, SynthConfig};

/// One raw log record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Bidirectional external-id <-> dense-index table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary id `{id}`")));
            }
        }
        Ok(Vocab { ids, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: u32) -> &str {
        &self.ids[index as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// A user's chronological item sequence (dense item indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub id: String,
    pub items: Vec<u32>,
}

impl UserSequence {
    /// Training prefix under the leave-one-out protocol (all but the last two).
    pub fn train_prefix(&self) -> &[u32] {
        &self.items[..self.items.len().saturating_sub(2)]
    }
}

/// Laplace-smoothed item transition statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BigramTable {
    vocab: usize,
    counts: HashMap<(u32, u32), u32>,
    row_totals: Vec<u64>,
}

impl BigramTable {
    fn from_sequences<'a>(vocab: usize, seqs: impl Iterator<Item = &'a [u32]>) -> Self {
        let mut counts = HashMap::new();
        let mut row_totals = vec![0u64; vocab];
        for seq in seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
                row_totals[w[0] as usize] += 1;
            }
        }
        BigramTable {
            vocab,
            counts,
            row_totals,
        }
    }

    /// `P(next | prev)` with pseudo-count one per vocabulary item.
    pub fn prob(&self, prev: u32, next: u32) -> f64 {
        let c = self.counts.get(&(prev, next)).copied().unwrap_or(0) as f64;
        (c + 1.0) / (self.row_totals[prev as usize] as f64 + self.vocab as f64)
    }

    pub fn count(&self, prev: u32, next: u32) -> u32 {
        self.counts.get(&(prev, next)).copied().unwrap_or(0)
    }

    pub fn row_total(&self, prev: u32) -> u64 {
        self.row_totals[prev as usize]
    }
}

/// Filtered, densely indexed interaction data with derived statistics.
/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionCorpus {
    users: Vec<UserSequence>,
    items: Vocab,
    counts: Vec<u64>,
    bigram: BigramTable,
}

fn natural_key(id: &str) -> (Option<i64>, &str) {
    (id.parse::<i64>().ok(), id)
}

fn sort_ids(ids: &mut [String]) {
    ids.sort_by(|a, b| {
        let (ka, kb) = (natural_key(a), natural_key(b));
        match (ka.0, kb.0) {
            (Some(x), Some(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.cmp(b),
        }
    });
}

impl InteractionCorpus {
    /// Assembles a corpus from already-indexed sequences and recomputes the
    /// statistics from their training prefixes.
    pub fn from_sequences(items: Vocab, users: Vec<UserSequence>) -> Result<Self> {
        if users.is_empty() || items.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let v = items.len();
        if let Some(u) = users
            .iter()
            .find(|u| u.items.iter().any(|&i| i as usize >= v))
        {
            return Err(Error::invalid(format!(
                "user `{}` references an item outside the vocabulary",
                u.id
            )));
        }
        let mut counts = vec![0u64; v];
        for u in &users {
            for &i in u.train_prefix() {
                counts[i as usize] += 1;
            }
        }
        let bigram = BigramTable::from_sequences(v, users.iter().map(UserSequence::train_prefix));
        Ok(InteractionCorpus {
            users,
            items,
            counts,
            bigram,
        })
    }

    /// Same vocabulary, new sequences (e.g. after injection).
    pub fn with_sequences(&self, users: Vec<UserSequence>) -> Result<Self> {
        InteractionCorpus::from_sequences(self.items.clone(), users)
    }

    pub fn users(&self) -> &[UserSequence] {
        &self.users
    }

    pub fn user(&self, index: usize) -> &UserSequence {
        &self.users[index]
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    pub fn items(&self) -> &Vocab {
        &self.items
    }

    /// Training-prefix interaction count per item.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bigram(&self) -> &BigramTable {
        &self.bigram
    }

    /// Rebuilds raw records, one per interaction, with positions as timestamps.
    pub fn to_interactions(&self) -> Vec<Interaction> {
        self.users
            .iter()
            .flat_map(|u| {
                u.items.iter().enumerate().map(move |(t, &i)| Interaction {
                    user: u.id.clone(),
                    item: self.items.id_of(i).to_string(),
                    timestamp: t as i64,
                })
            })
            .collect()
    }
}

/// Iterative k-core filtering followed by dense re-indexing. Users and items
/// are indexed in natural id order (numeric ids by value).
pub fn build_corpus(
    raw: &[Interaction],
    min_user: usize,
    min_item: usize,
) -> Result<InteractionCorpus> {
    if raw.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut alive = vec![true; raw.len()];
    loop {
        let mut per_user: HashMap<&str, usize> = HashMap::new();
        let mut per_item: HashMap<&str, usize> = HashMap::new();
        for (r, _) in raw.iter().zip(&alive).filter(|(_, a)| **a) {
            *per_user.entry(&r.user).or_insert(0) += 1;
            *per_item.entry(&r.item).or_insert(0) += 1;
        }
        let mut changed = false;
        for (r, a) in raw.iter().zip(alive.iter_mut()) {
            if *a && (per_user[r.user.as_str()] < min_user || per_item[r.item.as_str()] < min_item)
            {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let kept: Vec<(usize, &Interaction)> =
        raw.iter().enumerate().filter(|(i, _)| alive[*i]).collect();
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut item_ids: Vec<String> = kept
        .iter()
        .map(|(_, r)| r.item.clone())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    sort_ids(&mut item_ids);
    let items = Vocab::from_ids(item_ids)?;

    let mut by_user: HashMap<&str, Vec<(i64, usize, u32)>> = HashMap::new();
    for (order, r) in &kept {
        let idx = items.index_of(&r.item).expect("kept item is in vocabulary");
        by_user
            .entry(&r.user)
            .or_default()
            .push((r.timestamp, *order, idx));
    }
    let mut user_ids: Vec<String> = by_user.keys().map(|s| s.to_string()).collect();
    sort_ids(&mut user_ids);
    let users = user_ids
        .into_iter()
        .map(|id| {
            let mut events = by_user.remove(id.as_str()).expect("user present");
            events.sort_by_key(|&(ts, order, _)| (ts, order));
            UserSequence {
                id,
                items: events.into_iter().map(|(_, _, i)| i).collect(),
            }
        })
        .collect();
    InteractionCorpus::from_sequences(items, users)
}

/// Per-user leave-one-out targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LooUser {
    pub user: usize,
    pub prefix: Vec<u32>,
    pub valid: u32,
    pub test: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LooSplit {
    pub users: Vec<LooUser>,
    /// Users with fewer than three interactions.
    pub skipped: Vec<usize>,
}

/// Last item -> test, second-to-last -> validation, the rest -> training prefix.
pub fn leave_one_out(corpus: &InteractionCorpus) -> LooSplit {
    let mut split = LooSplit::default();
    for (u, seq) in corpus.users().iter().enumerate() {
        let n = seq.items.len();
        if n < 3 {
            log::warn!(
                "user `{}` skipped in leave-one-out split (length {n})",
                seq.id
            );
            split.skipped.push(u);
            continue;
        }
        split.users.push(LooUser {
            user: u,
            prefix: seq.items[..n - 2].to_vec(),
            valid: seq.items[n - 2],
            test: seq.items[n - 1],
        });
    }
    split
}

/// `n` distinct items the user never interacted with, uniform over that pool.
pub fn sample_negatives(
    corpus: &InteractionCorpus,
    user: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<u32>> {
    let seq = corpus
        .users()
        .get(user)
        .ok_or_else(|| Error::invalid(format!("user index {user} out of range")))?;
    let mut seen = vec![false; corpus.num_items()];
    for &i in &seq.items {
        seen[i as usize] = true;
    }
    let pool: Vec<u32> = (0..corpus.num_items() as u32)
        .filter(|&i| !seen[i as usize])
        .collect();
    if pool.len() < n {
        return Err(Error::invalid(format!(
            "user `{}` has only {} negative candidates, {n} requested",
            seq.id,
            pool.len()
        )));
    }
    Ok(rng
        .sample_indices(pool.len(), n)
        .into_iter()
        .map(|k| pool[k])
        .collect())
}

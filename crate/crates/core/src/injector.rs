//! Fake-order injection: repetitive runs, semantically irrelevant
//! substitutions and non-adjacent swaps, planted into training prefixes under
//! user-ratio and intensity knobs, with a manifest that records every change.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionCorpus, UserSequence};
use crate::error::{Error, Result};
use crate::fsio;
use crate::numkit::{dot, norm, SeededRng};
use crate::semantics::SemanticTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FakeType {
    Repetitive,
    Semantic,
    Sequential,
}

impl FakeType {
    pub const ALL: [FakeType; 3] = [
        FakeType::Repetitive,
        FakeType::Semantic,
        FakeType::Sequential,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FakeType::Repetitive => "repetitive",
            FakeType::Semantic => "semantic",
            FakeType::Sequential => "sequential",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionKnobs {
    pub user_ratio: f64,
    pub intensity: f64,
    /// Proportions for repetitive, semantic and sequential positions.
    pub type_mix: [f64; 3],
    pub repeat_length: usize,
    pub swap_window: usize,
    /// Cosine below which a replacement counts as semantically irrelevant.
    pub semantic_threshold: f64,
}

impl Default for InjectionKnobs {
    fn default() -> Self {
        InjectionKnobs {
            user_ratio: 0.3,
            intensity: 0.3,
            type_mix: [1.0 / 3.0; 3],
            repeat_length: 3,
            swap_window: 5,
            semantic_threshold: 0.2,
        }
    }
}

impl InjectionKnobs {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        if !in_unit(self.user_ratio) || !in_unit(self.intensity) {
            return Err(Error::invalid(
                "user_ratio and intensity must lie in (0, 1]",
            ));
        }
        if self.type_mix.iter().any(|&m| !(m >= 0.0))
            || (self.type_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid("type_mix must be non-negative and sum to 1"));
        }
        if self.swap_window < 2 {
            return Err(Error::invalid("swap window must be at least 2"));
        }
        if self.type_mix[0] > 0.0 && self.repeat_length == 0 {
            return Err(Error::invalid(
                "repeat length must be positive when repetitive orders are planned",
            ));
        }
        Ok(())
    }

    pub fn only(kind: FakeType) -> [f64; 3] {
        let mut mix = [0.0; 3];
        mix[kind as usize] = 1.0;
        mix
    }
}

/// One planned manipulation, in original-sequence indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum PlannedOp {
    /// Positions `anchor+1 ..= anchor+len` take the anchor's item.
    Repetitive {
        anchor: usize,
        len: usize,
    },
    Semantic {
        position: usize,
    },
    Swap {
        p: usize,
        q: usize,
    },
}

impl PlannedOp {
    pub fn positions(&self) -> Vec<(usize, FakeType)> {
        match *self {
            PlannedOp::Repetitive { anchor, len } => (anchor + 1..=anchor + len)
                .map(|k| (k, FakeType::Repetitive))
                .collect(),
            PlannedOp::Semantic { position } => vec![(position, FakeType::Semantic)],
            PlannedOp::Swap { p, q } => vec![(p, FakeType::Sequential), (q, FakeType::Sequential)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPlan {
    pub user: usize,
    pub budget: usize,
    pub ops: Vec<PlannedOp>,
    /// Budgeted positions that could not be placed.
    pub truncated: usize,
}

impl UserPlan {
    pub fn planned(&self) -> usize {
        self.budget - self.truncated
    }

    /// Every planned position with its type, sorted by position.
    pub fn assignments(&self) -> BTreeMap<usize, FakeType> {
        self.ops.iter().flat_map(PlannedOp::positions).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub knobs: InjectionKnobs,
    pub seed: u64,
    pub users: Vec<UserPlan>,
}

impl InjectionPlan {
    pub fn empty(knobs: InjectionKnobs, seed: u64) -> Self {
        InjectionPlan {
            knobs,
            seed,
            users: Vec::new(),
        }
    }

    pub fn planned_positions(&self) -> usize {
        self.users.iter().map(UserPlan::planned).sum()
    }

    pub fn truncated_positions(&self) -> usize {
        self.users.iter().map(|u| u.truncated).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub user: usize,
    pub position: usize,
    #[serde(rename = "type")]
    pub kind: FakeType,
    pub original_item: u32,
    pub injected_item: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub knobs: InjectionKnobs,
    pub seed: u64,
}

/// Ground truth for one injection, entries sorted by (user, position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeOrderManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl FakeOrderManifest {
    pub fn labels(&self) -> HashMap<(usize, usize), FakeType> {
        self.entries
            .iter()
            .map(|e| ((e.user, e.position), e.kind))
            .collect()
    }

    pub fn count(&self, kind: FakeType) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }
}

/// Largest-remainder split of `total` by `weights` (which sum to 1).
fn split_budget(total: usize, weights: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut out = [0usize; 3];
    for (o, r) in out.iter_mut().zip(&raw) {
        *o = r.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[k] > 0.0 {
            out[k] += 1;
            left -= 1;
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Free,
    /// Kept genuine (repetition anchors).
    Reserved,
    Taken,
}

fn plan_user(user: usize, seq: &[u32], knobs: &InjectionKnobs, rng: &mut SeededRng) -> UserPlan {
    let prefix_len = seq.len().saturating_sub(2);
    let eligible = prefix_len.saturating_sub(1);
    let wanted = (knobs.intensity * prefix_len as f64).round() as usize;
    let budget = wanted.min(eligible);
    let [n_rep, n_sem, n_seq] = split_budget(budget, &knobs.type_mix);
    let mut slots = vec![Slot::Free; prefix_len];
    if prefix_len > 0 {
        // Position 0 has no left neighbor and is never manipulated.
        slots[0] = Slot::Reserved;
    }
    let mut ops = Vec::new();
    let mut placed = 0usize;

    // Repetitive runs first: they need contiguous room.
    let mut left = n_rep;
    while left > 0 {
        let len = left.min(knobs.repeat_length);
        let anchors: Vec<usize> = (0..prefix_len.saturating_sub(len))
            .filter(|&a| {
                slots[a] != Slot::Taken && (a + 1..=a + len).all(|k| slots[k] == Slot::Free)
            })
            .collect();
        if anchors.is_empty() {
            break;
        }
        let a = anchors[rng.below(anchors.len())];
        slots[a] = Slot::Reserved;
        for s in &mut slots[a + 1..=a + len] {
            *s = Slot::Taken;
        }
        ops.push(PlannedOp::Repetitive { anchor: a, len });
        placed += len;
        left -= len;
    }
    let rep_unplaced = left;

    // Swap pairs; an odd leftover position goes to the semantic pool.
    let w = knobs.swap_window;
    let mut seq_unplaced = n_seq % 2;
    for _ in 0..n_seq / 2 {
        let mut done = false;
        for _attempt in 0..2 {
            let free: Vec<usize> = (0..prefix_len)
                .filter(|&k| slots[k] == Slot::Free)
                .collect();
            if free.len() < 2 {
                break;
            }
            let p = free[rng.below(free.len())];
            let partners: Vec<usize> = free
                .iter()
                .copied()
                .filter(|&q| q.abs_diff(p) >= 2 && q.abs_diff(p) <= w && seq[q] != seq[p])
                .collect();
            if partners.is_empty() {
                continue;
            }
            let q = partners[rng.below(partners.len())];
            slots[p] = Slot::Taken;
            slots[q] = Slot::Taken;
            let (p, q) = (p.min(q), p.max(q));
            ops.push(PlannedOp::Swap { p, q });
            placed += 2;
            done = true;
            break;
        }
        if !done {
            seq_unplaced += 2;
        }
    }

    let n_sem_total = n_sem + (n_seq % 2);
    seq_unplaced -= n_seq % 2;
    let free: Vec<usize> = (0..prefix_len)
        .filter(|&k| slots[k] == Slot::Free)
        .collect();
    let take = n_sem_total.min(free.len());
    let chosen = rng.sample_indices(free.len(), take);
    let mut positions: Vec<usize> = chosen.into_iter().map(|i| free[i]).collect();
    positions.sort_unstable();
    for &p in &positions {
        slots[p] = Slot::Taken;
        ops.push(PlannedOp::Semantic { position: p });
    }
    placed += take;

    let truncated = rep_unplaced + seq_unplaced + (n_sem_total - take);
    debug_assert_eq!(placed + truncated, budget);
    if truncated > 0 {
        log::debug!("user {user}: {truncated} of {budget} budgeted positions could not be placed");
    }
    UserPlan {
        user,
        budget,
        ops,
        truncated,
    }
}

/// Samples the affected users and, per user, a type-exclusive set of training
/// prefix positions (never index 0) sized `round(intensity * prefix_len)`.
pub fn plan_allocation(
    corpus: &InteractionCorpus,
    knobs: &InjectionKnobs,
    rng: &mut SeededRng,
) -> Result<InjectionPlan> {
    knobs.validate()?;
    let n = corpus.num_users();
    let affected = ((knobs.user_ratio * n as f64).round() as usize).min(n);
    let mut users = rng.sample_indices(n, affected);
    users.sort_unstable();
    let plans: Vec<UserPlan> = users
        .into_iter()
        .map(|u| plan_user(u, &corpus.user(u).items, knobs, &mut rng.child(u as u64)))
        .collect();
    let truncated: usize = plans.iter().map(|p| p.truncated).sum();
    if truncated > 0 {
        log::warn!("injection plan truncated {truncated} positions that did not fit");
    }
    Ok(InjectionPlan {
        knobs: knobs.clone(),
        seed: rng.seed(),
        users: plans,
    })
}

/// Replaces `anchor+1 ..= anchor+k` with the anchor's item; `k` is truncated at
/// the end of `seq`. Returns (position, original, injected) per replaced slot.
pub fn inject_repetitive(
    seq: &mut [u32],
    anchor: usize,
    k: usize,
) -> Result<Vec<(usize, u32, u32)>> {
    if anchor >= seq.len() {
        return Err(Error::invalid(format!(
            "anchor {anchor} outside sequence of length {}",
            seq.len()
        )));
    }
    let end = (anchor + k).min(seq.len() - 1);
    let item = seq[anchor];
    Ok((anchor + 1..=end)
        .map(|p| {
            let original = std::mem::replace(&mut seq[p], item);
            (p, original, item)
        })
        .collect())
}

/// Item drawn uniformly from those with cosine to the original below
/// `threshold`; falls back to the minimum-cosine item.
pub fn pick_irrelevant(
    original: u32,
    semantics: &SemanticTable,
    threshold: f64,
    rng: &mut SeededRng,
) -> Result<u32> {
    let v = semantics.items();
    if v < 2 || original as usize >= v {
        return Err(Error::invalid("semantic table too small for this item"));
    }
    let a = semantics.row(original);
    let na = norm(a);
    let cos = |j: u32| {
        let b = semantics.row(j);
        let d = na * norm(b);
        if d == 0.0 {
            0.0
        } else {
            dot(a, b) / d
        }
    };
    let scored: Vec<(u32, f64)> = (0..v as u32)
        .filter(|&j| j != original)
        .map(|j| (j, cos(j)))
        .collect();
    let low: Vec<u32> = scored
        .iter()
        .filter(|(_, c)| *c < threshold)
        .map(|(j, _)| *j)
        .collect();
    if !low.is_empty() {
        return Ok(low[rng.below(low.len())]);
    }
    let (j, _) = scored
        .iter()
        .copied()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("vocabulary has at least two items");
    Ok(j)
}

pub fn inject_semantic(
    seq: &mut [u32],
    position: usize,
    semantics: &SemanticTable,
    threshold: f64,
    rng: &mut SeededRng,
) -> Result<(usize, u32, u32)> {
    let original = *seq
        .get(position)
        .ok_or_else(|| Error::invalid(format!("position {position} outside sequence")))?;
    let injected = pick_irrelevant(original, semantics, threshold, rng)?;
    seq[position] = injected;
    Ok((position, original, injected))
}

/// Swaps two non-adjacent, distinct items. Returns the two (position,
/// original, injected) records, or `None` when the swap must be skipped.
pub fn inject_sequential(seq: &mut [u32], p: usize, q: usize) -> Option<[(usize, u32, u32); 2]> {
    if p.abs_diff(q) < 2 || p.max(q) >= seq.len() || seq[p] == seq[q] {
        return None;
    }
    let (a, b) = (seq[p], seq[q]);
    seq.swap(p, q);
    Some([(p, a, b), (q, b, a)])
}

/// Applies the plan to a copy of the corpus. Unaffected users are untouched.
pub fn apply_plan(
    corpus: &InteractionCorpus,
    plan: &InjectionPlan,
    semantics: Option<&SemanticTable>,
    rng: &mut SeededRng,
) -> Result<(InteractionCorpus, FakeOrderManifest)> {
    let mut users: Vec<UserSequence> = corpus.users().to_vec();
    let mut entries = Vec::new();
    for up in &plan.users {
        let seq = users
            .get_mut(up.user)
            .ok_or_else(|| Error::invalid(format!("plan references unknown user {}", up.user)))?;
        let prefix_len = seq.items.len().saturating_sub(2);
        let prefix = &mut seq.items[..prefix_len];
        let mut urng = rng.child(up.user as u64);
        let mut records = Vec::new();
        for op in &up.ops {
            match *op {
                PlannedOp::Repetitive { anchor, len } => {
                    for r in inject_repetitive(prefix, anchor, len)? {
                        records.push((r, FakeType::Repetitive));
                    }
                }
                PlannedOp::Semantic { position } => {
                    let table = semantics.ok_or_else(|| {
                        Error::invalid("semantic injection needs a semantic table")
                    })?;
                    if position >= prefix.len() {
                        return Err(Error::invalid(
                            "planned position outside the training prefix",
                        ));
                    }
                    let r = inject_semantic(
                        prefix,
                        position,
                        table,
                        plan.knobs.semantic_threshold,
                        &mut urng,
                    )?;
                    records.push((r, FakeType::Semantic));
                }
                PlannedOp::Swap { p, q } => match inject_sequential(prefix, p, q) {
                    Some(rs) => records.extend(rs.into_iter().map(|r| (r, FakeType::Sequential))),
                    None => log::warn!("user {}: skipped swap ({p}, {q})", up.user),
                },
            }
        }
        records.sort_by_key(|((p, _, _), _)| *p);
        entries.extend(records.into_iter().map(
            |((position, original_item, injected_item), kind)| ManifestEntry {
                user: up.user,
                position,
                kind,
                original_item,
                injected_item,
            },
        ));
    }
    let compromised = corpus.with_sequences(users)?;
    let manifest = FakeOrderManifest {
        header: ManifestHeader {
            knobs: plan.knobs.clone(),
            seed: plan.seed,
        },
        entries,
    };
    Ok((compromised, manifest))
}

/// Undoes an injection using the manifest's original items.
pub fn restore(
    compromised: &InteractionCorpus,
    manifest: &FakeOrderManifest,
) -> Result<InteractionCorpus> {
    let mut users: Vec<UserSequence> = compromised.users().to_vec();
    for e in &manifest.entries {
        let slot = users
            .get_mut(e.user)
            .and_then(|u| u.items.get_mut(e.position))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "manifest entry ({}, {}) out of range",
                    e.user, e.position
                ))
            })?;
        if *slot != e.injected_item {
            return Err(Error::invalid(format!(
                "manifest entry ({}, {}) does not match the corpus",
                e.user, e.position
            )));
        }
        *slot = e.original_item;
    }
    compromised.with_sequences(users)
}

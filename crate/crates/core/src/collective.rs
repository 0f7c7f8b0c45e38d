//! Collective reuse across the requests of one round.
//!
//! Compatible requests (same prompt length, same cache-hit set, disjoint
//! slot maps) are grouped and recovered in lockstep: one rotation call per
//! layer and one difference pass for the whole group, followed by
//! per-member refresh. The pass also elects the family master and derives
//! the positions at which each mirror may differ from it.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ledger::CostLedger;
use crate::paged_pool::{disjoint, SlotMap};
use crate::pic::{prepare_request, recover_batch, PicConfig, PicError, RecoveryResult};
use crate::segment_index::SegmentIndex;
use crate::toymodel::ModelWeights;
use crate::types::{Digest, PromptLayout, SegmentKind};

#[derive(Debug, Error, PartialEq)]
pub enum CollectiveError {
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error(transparent)]
    Pic(#[from] PicError),
}

/// A round request offered for grouping.
#[derive(Debug, Clone)]
pub struct GroupCandidate {
    pub layout: PromptLayout,
    /// Digests of the shared segments that hit the cache, ascending.
    pub hits: Vec<Digest>,
    pub slot_map: Option<SlotMap>,
}

impl GroupCandidate {
    /// Probe `cache` for every shared segment of `layout`.
    pub fn probe(layout: PromptLayout, cache: &SegmentIndex, slot_map: Option<SlotMap>) -> Self {
        let hits = hit_set(&layout, cache);
        Self {
            layout,
            hits,
            slot_map,
        }
    }

    pub fn request_id(&self) -> u64 {
        self.layout.agent_id()
    }
}

/// Sorted digests of the shared segments of `layout` present in `cache`.
pub fn hit_set(layout: &PromptLayout, cache: &SegmentIndex) -> Vec<Digest> {
    let set: BTreeSet<Digest> = layout
        .segments()
        .iter()
        .filter(|s| s.kind() == SegmentKind::SharedOutput && cache.contains(&s.digest()))
        .map(|s| s.digest())
        .collect();
    set.into_iter().collect()
}

/// Per-member offsets of each hit segment.
fn hit_offsets(layout: &PromptLayout, hits: &[Digest]) -> BTreeMap<Digest, usize> {
    layout
        .segments()
        .iter()
        .zip(layout.segment_ranges())
        .filter(|(s, _)| {
            s.kind() == SegmentKind::SharedOutput && hits.binary_search(&s.digest()).is_ok()
        })
        .map(|(s, r)| (s.digest(), r.start))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReuseGroup {
    pub round_id: u64,
    pub layouts: Vec<PromptLayout>,
    pub active_len: usize,
    pub hits: Vec<Digest>,
    /// For each member, the offset of each hit segment in its prompt.
    pub offsets: Vec<BTreeMap<Digest, usize>>,
    pub slot_maps: Vec<SlotMap>,
}

impl ReuseGroup {
    pub fn members(&self) -> Vec<u64> {
        self.layouts.iter().map(PromptLayout::agent_id).collect()
    }

    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    fn from_candidates(round_id: u64, cands: Vec<GroupCandidate>) -> Self {
        let active_len = cands[0].layout.total_len();
        let hits = cands[0].hits.clone();
        let offsets = cands
            .iter()
            .map(|c| hit_offsets(&c.layout, &hits))
            .collect();
        let mut layouts = Vec::with_capacity(cands.len());
        let mut slot_maps = Vec::with_capacity(cands.len());
        for c in cands {
            layouts.push(c.layout);
            slot_maps.push(c.slot_map.expect("grouped candidates carry slot maps"));
        }
        Self {
            round_id,
            layouts,
            active_len,
            hits,
            offsets,
            slot_maps,
        }
    }

    /// Check the three compatibility constraints against `cache`.
    pub fn validate(&self, cache: &SegmentIndex) -> Result<(), CollectiveError> {
        if self.layouts.is_empty() {
            return Err(CollectiveError::InvalidGroup("empty group".into()));
        }
        if self.slot_maps.len() != self.layouts.len() {
            return Err(CollectiveError::InvalidGroup(
                "one slot map per member required".into(),
            ));
        }
        for l in &self.layouts {
            if l.total_len() != self.active_len {
                return Err(CollectiveError::InvalidGroup(format!(
                    "member {} has length {}, group length {}",
                    l.agent_id(),
                    l.total_len(),
                    self.active_len
                )));
            }
            if hit_set(l, cache) != self.hits {
                return Err(CollectiveError::InvalidGroup(format!(
                    "member {} sees a different cached span",
                    l.agent_id()
                )));
            }
        }
        if !disjoint(&self.slot_maps) {
            return Err(CollectiveError::InvalidGroup("slot maps overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Grouping {
    pub groups: Vec<ReuseGroup>,
    /// Requests served one at a time, in arrival order.
    pub remainder: Vec<GroupCandidate>,
}

/// Greedy grouping by arrival order.
///
/// A candidate joins the first open group with its prompt length and hit
/// set whose slot maps it does not overlap. Groups left with one member and
/// candidates without slot maps fall to the remainder.
pub fn form_groups(round_id: u64, candidates: Vec<GroupCandidate>) -> Grouping {
    let mut buckets: Vec<Vec<(usize, GroupCandidate)>> = Vec::new();
    let mut remainder = Vec::new();
    for (arrival, c) in candidates.into_iter().enumerate() {
        let Some(map) = &c.slot_map else {
            remainder.push((arrival, c));
            continue;
        };
        let slot = buckets.iter().position(|b| {
            let head = &b[0].1;
            head.layout.total_len() == c.layout.total_len()
                && head.hits == c.hits
                && disjoint(
                    b.iter()
                        .filter_map(|(_, m)| m.slot_map.as_ref())
                        .chain([map]),
                )
        });
        match slot {
            Some(i) => buckets[i].push((arrival, c)),
            None => buckets.push(vec![(arrival, c)]),
        }
    }
    let mut groups = Vec::new();
    for b in buckets {
        if b.len() == 1 {
            remainder.extend(b);
        } else {
            groups.push(ReuseGroup::from_candidates(
                round_id,
                b.into_iter().map(|(_, c)| c).collect(),
            ));
        }
    }
    remainder.sort_by_key(|(arrival, _)| *arrival);
    Grouping {
        groups,
        remainder: remainder.into_iter().map(|(_, c)| c).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct ReusePlan {
    pub group: ReuseGroup,
    pub deviation_scores: BTreeMap<u64, f64>,
    pub master_id: u64,
    /// For each mirror, ascending token indices whose final K/V may differ from the master's.
    pub mirror_diff_hints: BTreeMap<u64, Vec<usize>>,
}

/// Lowest deviation wins; ties go to the lowest request id.
pub fn select_master(scores: &BTreeMap<u64, f64>) -> Option<u64> {
    scores
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
        .map(|(&id, _)| id)
}

/// Token indices of `mirror` whose values can differ from `master`.
///
/// A row is bitwise shared only when both serve it from the same cached row
/// and neither recomputed it.
pub fn diff_hints(mirror: &RecoveryResult, master: &RecoveryResult) -> Vec<usize> {
    let recomputed = |r: &RecoveryResult, i: usize| r.important_positions.binary_search(&i).is_ok();
    (0..mirror.reuse_owner.len())
        .filter(|&i| {
            let (a, b) = (
                &mirror.reuse_owner[i],
                master.reuse_owner.get(i).and_then(|o| o.as_ref()),
            );
            a.is_none()
                || b.is_none()
                || a.as_ref() != b
                || recomputed(mirror, i)
                || recomputed(master, i)
        })
        .collect()
}

/// Recover every member of `group` in lockstep and emit the family plan.
pub fn collective_recover(
    weights: &ModelWeights,
    group: &ReuseGroup,
    cache: &SegmentIndex,
    cfg: &PicConfig,
    ledger: &mut CostLedger,
) -> Result<(Vec<RecoveryResult>, ReusePlan), CollectiveError> {
    group.validate(cache)?;
    let prepared = group
        .layouts
        .iter()
        .map(|l| prepare_request(weights, l, cache))
        .collect::<Result<Vec<_>, _>>()?;
    let results = recover_batch(weights, prepared, cfg, ledger)?;

    let deviation_scores: BTreeMap<u64, f64> = results
        .iter()
        .map(|r| (r.request_id, r.deviation_score))
        .collect();
    let master_id = select_master(&deviation_scores).expect("non-empty group");
    let master = results
        .iter()
        .find(|r| r.request_id == master_id)
        .expect("master is a member");
    let mirror_diff_hints = results
        .iter()
        .filter(|r| r.request_id != master_id)
        .map(|r| (r.request_id, diff_hints(r, master)))
        .collect();
    let plan = ReusePlan {
        group: group.clone(),
        deviation_scores,
        master_id,
        mirror_diff_hints,
    };
    Ok((results, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn master_selection() {
        let m = |v: &[(u64, f64)]| v.iter().copied().collect::<BTreeMap<_, _>>();
        assert_eq!(select_master(&m(&[(1, 0.5), (2, 0.2), (3, 0.9)])), Some(2));
        assert_eq!(select_master(&m(&[(1, 0.4), (2, 0.4)])), Some(1));
        assert_eq!(select_master(&m(&[(7, 3.1)])), Some(7));
        assert_eq!(select_master(&BTreeMap::new()), None);
    }
}

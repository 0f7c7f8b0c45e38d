//! End-to-end execution of a workload over the serving paths.
//!
//! Every path owns its own segment index, diff store and paged pool. The
//! full-prefill caches are always computed, whether or not `T1` rows are
//! requested, since they are the oracle for the other paths.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::config::{ConfigError, PathLabel, WorkloadSpec};
use super::report::{Fidelity, Report, ReportRow};
use super::workload::Workload;
use crate::collective::{
    collective_recover, form_groups, CollectiveError, GroupCandidate, ReusePlan,
};
use crate::diffstore::{
    DiffError, DiffStore, FamilyMember, MirrorHandle, StoredCache, FALLBACK_THRESHOLD,
};
use crate::fused_restore::{fused_restore, RestoreError};
use crate::ledger::CostLedger;
use crate::paged_pool::{PagedPool, PoolError, SlotMap};
use crate::pic::{recover_request, PicError, RecoveryResult};
use crate::segment_index::{IndexError, KvRef, SegmentCacheEntry, SegmentIndex};
use crate::toymodel::{ModelError, ModelWeights};
use crate::types::{Digest, KvError, LayeredKv, PositionSpan, PromptLayout, TokenId, TypeError};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pic(#[from] PicError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Restore(#[from] RestoreError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// One agent's final cache (prompt followed by its output) on one path.
#[derive(Debug, Clone)]
pub struct AgentOutcome {
    pub agent: u64,
    pub tokens: Vec<TokenId>,
    pub kv: LayeredKv,
    pub important_positions: Vec<usize>,
    pub deviation_score: f64,
}

#[derive(Debug)]
pub struct TraceOutput {
    pub report: Report,
    /// Keyed by path and round, agents in id order.
    pub outcomes: BTreeMap<(PathLabel, u64), Vec<AgentOutcome>>,
    /// Wall-clock time per path. Not part of the report.
    pub timings: BTreeMap<PathLabel, Duration>,
}

struct PathState {
    index: SegmentIndex,
    store: DiffStore,
    pool: PagedPool,
}

impl PathState {
    fn new(spec: &WorkloadSpec) -> Self {
        let m = &spec.model;
        Self {
            index: SegmentIndex::new(),
            store: DiffStore::new(),
            pool: PagedPool::new(
                spec.pool.capacity_tokens,
                spec.blocks.block_size,
                m.num_layers,
                m.row_width(),
            ),
        }
    }

    /// Take slots for a request, or `None` when the pool is exhausted.
    fn allocate(
        &mut self,
        agent: u64,
        n: usize,
        exhausted: &mut usize,
    ) -> Result<Option<SlotMap>, TraceError> {
        match self.pool.allocate(agent, n) {
            Ok(m) => Ok(Some(m)),
            Err(PoolError::OutOfSlots { .. }) => {
                *exhausted += 1;
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn write(&mut self, map: &SlotMap, kv: &LayeredKv) -> Result<(), TraceError> {
        for (l, layer) in kv.layers().iter().enumerate() {
            self.pool.write_rows(map, l, &layer.k, &layer.v)?;
        }
        Ok(())
    }

    fn pool_matches(&self, map: &SlotMap, kv: &LayeredKv) -> Result<bool, TraceError> {
        for (l, layer) in kv.layers().iter().enumerate() {
            let (k, v) = self.pool.read_rows(map, l)?;
            let same =
                |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same(&k, &layer.k) || !same(&v, &layer.v) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn release(&mut self, maps: impl IntoIterator<Item = SlotMap>) -> Result<(), TraceError> {
        for m in maps {
            self.pool.free(m)?;
        }
        Ok(())
    }

    fn index_output(
        &self,
        prompt_len: usize,
        out_len: usize,
        kv_ref: KvRef,
        out: &[TokenId],
        prompt: &[TokenId],
    ) -> Result<(), TraceError> {
        let entry = SegmentCacheEntry::new(
            Digest::of_tokens(out),
            kv_ref,
            prompt_len..prompt_len + out_len,
            Digest::of_tokens(prompt),
        )?;
        self.index.insert(entry);
        Ok(())
    }
}

fn concat(a: &[TokenId], b: &[TokenId]) -> Vec<TokenId> {
    let mut v = a.to_vec();
    v.extend_from_slice(b);
    v
}

struct Runner<'a> {
    spec: &'a WorkloadSpec,
    weights: &'a ModelWeights,
    workload: Workload,
}

struct RoundOutput {
    row: ReportRow,
    outcomes: Vec<AgentOutcome>,
}

impl Runner<'_> {
    fn empty_row(&self, path: PathLabel, round_id: u64) -> ReportRow {
        ReportRow {
            path,
            round_id,
            num_agents: self.workload.num_agents(),
            groups: 0,
            group_sizes: Vec::new(),
            remainder: 0,
            ledger: CostLedger::new(self.spec.model.num_layers),
            dense_bytes: 0,
            compression: Vec::new(),
            family_cost: 0.0,
            fidelity: Fidelity::default(),
            important_counts: BTreeMap::new(),
            deviation_scores: BTreeMap::new(),
            mirrors_restored: 0,
            restore_mismatches: 0,
            pool_exhausted: 0,
        }
    }

    /// Cached seed outputs: each agent's history and seed output prefilled together.
    fn seed(&self, state: &PathState) -> Result<(), TraceError> {
        for a in 0..self.workload.num_agents() {
            let h = self.workload.initial_history(a);
            let out = self.workload.output(a, -1);
            let kv = self.weights.full_prefill(&concat(&h, &out), 0)?;
            state.index_output(h.len(), out.len(), KvRef::Dense(Arc::new(kv)), &out, &h)?;
        }
        Ok(())
    }

    fn fidelity(
        &self,
        outcomes: &[AgentOutcome],
        oracle: &[AgentOutcome],
    ) -> Result<Fidelity, TraceError> {
        let mut err = KvError::default();
        for (o, r) in outcomes.iter().zip(oracle) {
            err.merge(&o.kv.error_against(&r.kv)?);
        }
        Ok(Fidelity::from(&err))
    }

    fn full_prefill_round(
        &self,
        state: &mut PathState,
        round_id: u64,
    ) -> Result<RoundOutput, TraceError> {
        let round = self.workload.generate_round(round_id)?;
        let mut row = self.empty_row(PathLabel::T1, round_id);
        let mut outcomes = Vec::new();
        let mut maps = Vec::new();
        for p in &round.prompts {
            let a = p.agent_id();
            let tokens = p.model_tokens();
            let out = self.workload.output(a as usize, round_id as i64);
            let map = state.allocate(a, tokens.len() + out.len(), &mut row.pool_exhausted)?;
            let kv = self.weights.full_prefill(&tokens, 0)?;
            row.ledger.recomputed_tokens += tokens.len() as u64;
            let full = self.weights.extend(&tokens, &kv, &out)?;
            if let Some(m) = map {
                state.write(&m, &full)?;
                maps.push(m);
            }
            row.ledger.bytes_stored_dense += full.dense_bytes();
            row.dense_bytes += full.dense_bytes();
            row.family_cost += 1.0;
            outcomes.push(AgentOutcome {
                agent: a,
                tokens: concat(&tokens, &out),
                kv: full,
                important_positions: Vec::new(),
                deviation_score: 0.0,
            });
        }
        row.ledger.observe_pool(state.pool.peak_allocated() as u64);
        state.release(maps)?;
        Ok(RoundOutput { row, outcomes })
    }

    fn finish(
        &self,
        res: RecoveryResult,
        out: &[TokenId],
        row: &mut ReportRow,
    ) -> Result<AgentOutcome, TraceError> {
        let kv = self.weights.extend(&res.tokens, &res.kv, out)?;
        row.dense_bytes += kv.dense_bytes();
        row.important_counts
            .insert(res.request_id, res.important_positions.len());
        row.deviation_scores
            .insert(res.request_id, res.deviation_score);
        Ok(AgentOutcome {
            agent: res.request_id,
            tokens: concat(&res.tokens, out),
            kv,
            important_positions: res.important_positions,
            deviation_score: res.deviation_score,
        })
    }

    fn serial_round(
        &self,
        state: &mut PathState,
        round_id: u64,
    ) -> Result<RoundOutput, TraceError> {
        let round = self.workload.generate_round(round_id)?;
        let mut row = self.empty_row(PathLabel::T2, round_id);
        let mut outcomes = Vec::new();
        let mut maps = Vec::new();
        for p in &round.prompts {
            let a = p.agent_id();
            let out = self.workload.output(a as usize, round_id as i64);
            let map = state.allocate(a, p.total_len() + out.len(), &mut row.pool_exhausted)?;
            let res = recover_request(
                self.weights,
                p,
                &state.index,
                &self.spec.pic,
                &mut row.ledger,
            )?;
            row.remainder += 1;
            let o = self.finish(res, &out, &mut row)?;
            if let Some(m) = map {
                state.write(&m, &o.kv)?;
                maps.push(m);
            }
            outcomes.push(o);
        }
        row.ledger.observe_pool(state.pool.peak_allocated() as u64);
        for o in &outcomes {
            let t = o.tokens.len() - self.spec.workload.shared_block_len;
            state.index_output(
                t,
                o.tokens.len() - t,
                KvRef::Dense(Arc::new(o.kv.clone())),
                &o.tokens[t..],
                &o.tokens[..t],
            )?;
            row.ledger.bytes_stored_dense += o.kv.dense_bytes();
            row.family_cost += 1.0;
        }
        state
            .index
            .evict_to_budget(self.spec.segment_index.budget_bytes);
        state.release(maps)?;
        Ok(RoundOutput { row, outcomes })
    }

    fn run_groups(
        &self,
        state: &PathState,
        groups: &[crate::collective::ReuseGroup],
    ) -> Result<Vec<(Vec<RecoveryResult>, ReusePlan, CostLedger)>, TraceError> {
        let one = |g: &crate::collective::ReuseGroup| -> Result<_, TraceError> {
            let mut ledger = CostLedger::new(self.spec.model.num_layers);
            let (res, plan) =
                collective_recover(self.weights, g, &state.index, &self.spec.pic, &mut ledger)?;
            Ok((res, plan, ledger))
        };
        if self.spec.harness.concurrent_groups && groups.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = groups.iter().map(|g| s.spawn(move || one(g))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("group worker panicked"))
                    .collect()
            })
        } else {
            groups.iter().map(one).collect()
        }
    }

    /// Restore a mirror into its owner's slots and check the pool holds the original cache.
    fn verify_restore(
        &self,
        state: &mut PathState,
        handle: &MirrorHandle,
        map: Option<&SlotMap>,
        original: &LayeredKv,
        row: &mut ReportRow,
    ) -> Result<(), TraceError> {
        let Some(map) = map else {
            return Ok(());
        };
        let span = PositionSpan::identity(handle.source_positions());
        fused_restore(
            self.weights.rope(),
            handle,
            map,
            &span,
            &mut state.pool,
            &mut row.ledger,
            None,
        )?;
        row.mirrors_restored += 1;
        if !state.pool_matches(map, original)? {
            row.restore_mismatches += 1;
        }
        Ok(())
    }

    fn collective_round(
        &self,
        state: &mut PathState,
        round_id: u64,
    ) -> Result<RoundOutput, TraceError> {
        let round = self.workload.generate_round(round_id)?;
        let mut row = self.empty_row(PathLabel::T3, round_id);
        let out_len = self.spec.workload.shared_block_len;
        let blocks = self.spec.blocks;

        let mut candidates = Vec::new();
        for p in &round.prompts {
            let map = state.allocate(
                p.agent_id(),
                p.total_len() + out_len,
                &mut row.pool_exhausted,
            )?;
            candidates.push(GroupCandidate::probe(p.clone(), &state.index, map));
        }
        row.ledger.observe_pool(state.pool.peak_allocated() as u64);
        let grouping = form_groups(round_id, candidates);
        row.groups = grouping.groups.len();
        row.group_sizes = grouping.groups.iter().map(|g| g.len()).collect();
        row.remainder = grouping.remainder.len();

        let mut maps: BTreeMap<u64, SlotMap> = BTreeMap::new();
        let mut outcomes: BTreeMap<u64, AgentOutcome> = BTreeMap::new();
        let mut plans = Vec::new();
        for (results, plan, ledger) in self.run_groups(state, &grouping.groups)? {
            row.ledger.absorb(&ledger);
            for res in results {
                let out = self
                    .workload
                    .output(res.request_id as usize, round_id as i64);
                outcomes.insert(res.request_id, self.finish(res, &out, &mut row)?);
            }
            plans.push(plan);
        }
        for g in &grouping.groups {
            maps.extend(g.slot_maps.iter().map(|m| (m.request_id(), m.clone())));
        }
        let mut unplanned = Vec::new();
        for c in &grouping.remainder {
            let res = recover_request(
                self.weights,
                &c.layout,
                &state.index,
                &self.spec.pic,
                &mut row.ledger,
            )?;
            let out = self
                .workload
                .output(res.request_id as usize, round_id as i64);
            unplanned.push(res.request_id);
            outcomes.insert(res.request_id, self.finish(res, &out, &mut row)?);
            if let Some(m) = &c.slot_map {
                maps.insert(m.request_id(), m.clone());
            }
        }
        for (id, m) in &maps {
            state.write(m, &outcomes[id].kv)?;
        }

        for mut plan in plans {
            let members: BTreeMap<u64, FamilyMember<'_>> = plan
                .group
                .members()
                .into_iter()
                .map(|id| {
                    let o = &outcomes[&id];
                    (
                        id,
                        FamilyMember {
                            tokens: &o.tokens,
                            kv: &o.kv,
                        },
                    )
                })
                .collect();
            // Outputs are agent-specific, so their rows always differ.
            for (id, hints) in plan.mirror_diff_hints.iter_mut() {
                let t = members[id].tokens.len();
                hints.extend(t - out_len..t);
            }
            let family = state.store.encode_family(&plan, &members, blocks)?;
            let dense = family.stats.dense_bytes;
            row.ledger.bytes_stored_dense += dense;
            row.family_cost += 1.0;
            let master = &outcomes[&family.master_id];
            let t = master.tokens.len() - out_len;
            state.index_output(
                t,
                out_len,
                KvRef::Master(Arc::clone(&family.master)),
                &master.tokens[t..],
                &master.tokens[..t],
            )?;
            for (id, handle) in family.mirrors {
                let o = &outcomes[&id];
                let stat = family
                    .stats
                    .mirrors
                    .iter()
                    .find(|m| m.request_id == id)
                    .expect("stats for every mirror");
                let kv_ref = if stat.diff_bytes >= dense {
                    row.ledger.bytes_stored_dense += dense;
                    row.family_cost += 1.0;
                    KvRef::Dense(Arc::new(o.kv.clone()))
                } else {
                    row.ledger.bytes_stored_diff += stat.diff_bytes;
                    row.family_cost += stat.diff_bytes as f64 / dense as f64;
                    self.verify_restore(state, &handle, maps.get(&id), &o.kv, &mut row)?;
                    KvRef::Mirror(handle)
                };
                state.index_output(t, out_len, kv_ref, &o.tokens[t..], &o.tokens[..t])?;
            }
            row.compression.push(family.stats);
        }
        for id in unplanned {
            let o = &outcomes[&id];
            let t = o.tokens.len() - out_len;
            let dense = o.kv.dense_bytes();
            let kv_ref = match state.store.store_unplanned(
                o.tokens.clone(),
                o.kv.clone(),
                blocks,
                FALLBACK_THRESHOLD,
            )? {
                StoredCache::Master(m) => {
                    row.ledger.bytes_stored_dense += dense;
                    row.family_cost += 1.0;
                    KvRef::Master(m)
                }
                StoredCache::Mirror(h) => {
                    let bytes = h.diff().serialized_len() as u64;
                    row.ledger.bytes_stored_diff += bytes;
                    row.family_cost += bytes as f64 / dense as f64;
                    self.verify_restore(state, &h, maps.get(&id), &o.kv, &mut row)?;
                    KvRef::Mirror(h)
                }
            };
            state.index_output(t, out_len, kv_ref, &o.tokens[t..], &o.tokens[..t])?;
        }
        state
            .index
            .evict_to_budget(self.spec.segment_index.budget_bytes);
        state.store.evict_unreferenced();
        state.release(maps.into_values())?;
        Ok(RoundOutput {
            row,
            outcomes: outcomes.into_values().collect(),
        })
    }
}

/// Run the paths named in the spec.
pub fn run_trace(spec: &WorkloadSpec) -> Result<TraceOutput, TraceError> {
    run_trace_paths(spec, &spec.harness.paths)
}

/// Run `paths` over every round of `spec`, one row per (path, round).
pub fn run_trace_paths(
    spec: &WorkloadSpec,
    paths: &[PathLabel],
) -> Result<TraceOutput, TraceError> {
    spec.validate()?;
    let weights = ModelWeights::new(&spec.model)?;
    let runner = Runner {
        spec,
        weights: &weights,
        workload: Workload::new(spec),
    };
    let rounds = spec.workload.num_rounds as u64;
    let mut rows = Vec::new();
    let mut outcomes = BTreeMap::new();
    let mut timings = BTreeMap::new();

    let started = Instant::now();
    let mut oracle = Vec::new();
    let mut state = PathState::new(spec);
    for r in 0..rounds {
        let out = runner.full_prefill_round(&mut state, r)?;
        let mut row = out.row;
        row.fidelity = runner.fidelity(&out.outcomes, &out.outcomes)?;
        if paths.contains(&PathLabel::T1) {
            rows.push(row);
            outcomes.insert((PathLabel::T1, r), out.outcomes.clone());
        }
        oracle.push(out.outcomes);
    }
    if paths.contains(&PathLabel::T1) {
        timings.insert(PathLabel::T1, started.elapsed());
    }

    for path in [PathLabel::T2, PathLabel::T3] {
        if !paths.contains(&path) {
            continue;
        }
        let started = Instant::now();
        let mut state = PathState::new(spec);
        runner.seed(&state)?;
        for r in 0..rounds {
            let out = match path {
                PathLabel::T2 => runner.serial_round(&mut state, r)?,
                _ => runner.collective_round(&mut state, r)?,
            };
            let mut row = out.row;
            row.fidelity = runner.fidelity(&out.outcomes, &oracle[r as usize])?;
            rows.push(row);
            outcomes.insert((path, r), out.outcomes);
        }
        timings.insert(path, started.elapsed());
    }

    Ok(TraceOutput {
        report: Report::new(spec.clone(), rows),
        outcomes,
        timings,
    })
}

/// Prompt layouts of one round, for callers driving the paths by hand.
pub fn round_prompts(spec: &WorkloadSpec, round_id: u64) -> Result<Vec<PromptLayout>, TraceError> {
    Ok(Workload::new(spec).generate_round(round_id)?.prompts)
}

//! Report rows and the JSON document emitted by `simulate`.

use std::collections::BTreeMap;

use serde::Serialize;

use super::config::{PathLabel, WorkloadSpec};
use crate::diffstore::CompressionStats;
use crate::ledger::CostLedger;
use crate::types::KvError;

/// Error of a path's caches against the full-prefill oracle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Fidelity {
    pub mean_k: f64,
    pub max_k: f64,
    pub mean_v: f64,
    pub max_v: f64,
}

impl From<&KvError> for Fidelity {
    fn from(e: &KvError) -> Self {
        Self {
            mean_k: e.mean_k(),
            max_k: e.max_k,
            mean_v: e.mean_v(),
            max_v: e.max_v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub path: PathLabel,
    pub round_id: u64,
    pub num_agents: usize,
    /// Collective groups formed (`T3` only).
    pub groups: usize,
    pub group_sizes: Vec<usize>,
    /// Requests served one at a time.
    pub remainder: usize,
    pub ledger: CostLedger,
    /// Dense size of all caches produced this round.
    pub dense_bytes: u64,
    pub compression: Vec<CompressionStats>,
    /// Stored bytes of the round in dense-cache equivalents.
    pub family_cost: f64,
    pub fidelity: Fidelity,
    /// Total important positions per agent.
    pub important_counts: BTreeMap<u64, usize>,
    pub deviation_scores: BTreeMap<u64, f64>,
    pub mirrors_restored: usize,
    pub restore_mismatches: usize,
    /// Requests that found no free pool slots.
    pub pool_exhausted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PathSummary {
    pub rounds: usize,
    pub rope_calls: u64,
    pub selection_passes: u64,
    pub recomputed_tokens: u64,
    pub bytes_stored: u64,
    pub bytes_moved: u64,
    pub mean_family_cost: f64,
    pub mean_k_error: f64,
    pub max_k_error: f64,
    pub max_v_error: f64,
    pub restore_mismatches: usize,
    pub pool_exhausted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub spec: WorkloadSpec,
    pub rows: Vec<ReportRow>,
    pub summary: BTreeMap<PathLabel, PathSummary>,
}

impl Report {
    pub fn new(spec: WorkloadSpec, rows: Vec<ReportRow>) -> Self {
        let mut summary: BTreeMap<PathLabel, PathSummary> = BTreeMap::new();
        for r in &rows {
            let s = summary.entry(r.path).or_default();
            s.rounds += 1;
            s.rope_calls += r.ledger.rope_calls_per_layer.iter().sum::<u64>();
            s.selection_passes += r.ledger.selection_passes;
            s.recomputed_tokens += r.ledger.recomputed_tokens;
            s.bytes_stored += r.ledger.bytes_stored();
            s.bytes_moved += r.ledger.bytes_moved;
            s.mean_family_cost += r.family_cost;
            s.mean_k_error += r.fidelity.mean_k;
            s.max_k_error = s.max_k_error.max(r.fidelity.max_k);
            s.max_v_error = s.max_v_error.max(r.fidelity.max_v);
            s.restore_mismatches += r.restore_mismatches;
            s.pool_exhausted += r.pool_exhausted;
        }
        for s in summary.values_mut() {
            s.mean_family_cost /= s.rounds as f64;
            s.mean_k_error /= s.rounds as f64;
        }
        Self {
            spec,
            rows,
            summary,
        }
    }

    pub fn rows_for(&self, path: PathLabel) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.path == path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

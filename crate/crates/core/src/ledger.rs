//! Per-round cost counters shared by every execution path.

use serde::Serialize;

/// Counters for one (path, round). Reset by constructing a new ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CostLedger {
    /// Batched RoPE-recovery calls issued at each layer.
    pub rope_calls_per_layer: Vec<u64>,
    /// Important-position selection passes on the check layer.
    pub selection_passes: u64,
    /// Rows materialized by selective recomputation (fresh-only rows included).
    pub recomputed_tokens: u64,
    /// Rows pushed through the check-layer pass to measure key differences.
    pub check_layer_tokens: u64,
    pub bytes_stored_dense: u64,
    pub bytes_stored_diff: u64,
    pub bytes_moved: u64,
    pub dense_mirror_allocations: u64,
    /// Elements rewritten by diff application during restore.
    pub corrected_elements: u64,
    pub pool_peak_occupancy: u64,
}

impl CostLedger {
    pub fn new(num_layers: usize) -> Self {
        Self {
            rope_calls_per_layer: vec![0; num_layers],
            ..Self::default()
        }
    }

    pub fn record_rope_call(&mut self, layer: usize) {
        if self.rope_calls_per_layer.len() <= layer {
            self.rope_calls_per_layer.resize(layer + 1, 0);
        }
        self.rope_calls_per_layer[layer] += 1;
    }

    pub fn bytes_stored(&self) -> u64 {
        self.bytes_stored_dense + self.bytes_stored_diff
    }

    pub fn observe_pool(&mut self, occupancy: u64) {
        self.pool_peak_occupancy = self.pool_peak_occupancy.max(occupancy);
    }

    /// Fold another ledger's counters into this one.
    pub fn absorb(&mut self, other: &CostLedger) {
        if self.rope_calls_per_layer.len() < other.rope_calls_per_layer.len() {
            self.rope_calls_per_layer
                .resize(other.rope_calls_per_layer.len(), 0);
        }
        for (a, b) in self
            .rope_calls_per_layer
            .iter_mut()
            .zip(&other.rope_calls_per_layer)
        {
            *a += b;
        }
        self.selection_passes += other.selection_passes;
        self.recomputed_tokens += other.recomputed_tokens;
        self.check_layer_tokens += other.check_layer_tokens;
        self.bytes_stored_dense += other.bytes_stored_dense;
        self.bytes_stored_diff += other.bytes_stored_diff;
        self.bytes_moved += other.bytes_moved;
        self.dense_mirror_allocations += other.dense_mirror_allocations;
        self.corrected_elements += other.corrected_elements;
        self.pool_peak_occupancy = self.pool_peak_occupancy.max(other.pool_peak_occupancy);
    }
}

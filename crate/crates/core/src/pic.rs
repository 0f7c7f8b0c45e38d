//! Position-independent cache recovery for a batch of requests.
//!
//! Cached shared segments are rotated to their new offsets, key differences
//! against freshly computed keys are measured on the check layer, and the
//! most divergent positions are selectively recomputed at every layer. The
//! selective recomputation backend is [`ModelWeights::recompute_positions`].
//!
//! A batch issues one rotation call per layer and one difference pass
//! regardless of its size; per-request serving is a batch of one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::CostLedger;
use crate::segment_index::{IndexError, SegmentIndex};
use crate::toymodel::{overwrite_rows, ModelError, ModelWeights};
use crate::types::{Digest, LayeredKv, PromptLayout, SegmentKind, TokenId};

#[derive(Debug, Error, PartialEq)]
pub enum PicError {
    #[error("invalid pic config: {0}")]
    Config(String),
    #[error("cache entry for {digest} holds {cached} rows but the segment has {expected}")]
    EntryShape {
        digest: Digest,
        cached: usize,
        expected: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicConfig {
    /// Fraction of reused positions recomputed.
    pub recompute_fraction: f64,
    pub check_layer: usize,
}

impl Default for PicConfig {
    fn default() -> Self {
        Self {
            recompute_fraction: 0.15,
            check_layer: 1,
        }
    }
}

impl PicConfig {
    pub fn validate(&self, num_layers: usize) -> Result<(), PicError> {
        if !(0.0..=1.0).contains(&self.recompute_fraction) {
            return Err(PicError::Config(format!(
                "pic.recompute_fraction {} outside [0, 1]",
                self.recompute_fraction
            )));
        }
        if self.check_layer >= num_layers {
            return Err(PicError::Config(format!(
                "pic.check_layer {} must be below num_layers {num_layers}",
                self.check_layer
            )));
        }
        Ok(())
    }

    /// Recompute budget over `shared` reused positions: `ceil(r * shared)`.
    pub fn budget(&self, shared: usize) -> usize {
        // The epsilon keeps products such as 0.15 * 20 from rounding up.
        let raw = self.recompute_fraction * shared as f64 - 1e-9;
        (raw.ceil().max(0.0) as usize).min(shared)
    }
}

/// Output of recovering one request.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryResult {
    pub request_id: u64,
    pub tokens: Vec<TokenId>,
    pub kv: LayeredKv,
    /// Recomputed reused positions, ascending.
    pub important_positions: Vec<usize>,
    /// Sum of check-layer key-difference magnitudes over reused positions.
    pub deviation_score: f64,
    /// Token indices served from the cache, ascending.
    pub reused_positions: Vec<usize>,
    /// For each token index, the cached segment and row offset it was served from.
    pub reuse_owner: Vec<Option<(Digest, usize)>>,
}

/// A request whose cache hits have been gathered, ready for batched recovery.
#[derive(Debug, Clone)]
pub struct PreparedRequest {
    request_id: u64,
    tokens: Vec<TokenId>,
    /// Reused rows hold cached values at their source encoding until rotated.
    context: LayeredKv,
    reused: Vec<usize>,
    deltas: Vec<i64>,
    fresh: Vec<usize>,
    owner: Vec<Option<(Digest, usize)>>,
}

impl PreparedRequest {
    pub fn request_id(&self) -> u64 {
        self.request_id
    }

    pub fn reused_positions(&self) -> &[usize] {
        &self.reused
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }
}

/// Look up every shared segment of `layout` and stage its cached rows.
///
/// Private history, round task and missed shared segments are left for fresh
/// computation.
pub fn prepare_request(
    weights: &ModelWeights,
    layout: &PromptLayout,
    cache: &SegmentIndex,
) -> Result<PreparedRequest, PicError> {
    let cfg = weights.config();
    let tokens = layout.model_tokens();
    let t = tokens.len();
    let mut context = LayeredKv::zeroed(
        cfg.num_layers,
        cfg.num_heads,
        cfg.head_dim,
        (0..t).collect(),
    )
    .map_err(ModelError::from)?;
    let mut reused = Vec::new();
    let mut deltas = Vec::new();
    let mut fresh = Vec::new();
    let mut owner = vec![None; t];
    for (seg, range) in layout.segments().iter().zip(layout.segment_ranges()) {
        let hit = match seg.kind() {
            SegmentKind::SharedOutput => cache.lookup(&seg.digest()),
            SegmentKind::PrivateHistory | SegmentKind::RoundTask => None,
        };
        let Some(entry) = hit else {
            fresh.extend(range);
            continue;
        };
        let rows = entry.materialize()?;
        if rows.num_tokens() != seg.len() || rows.num_layers() != cfg.num_layers {
            return Err(PicError::EntryShape {
                digest: seg.digest(),
                cached: rows.num_tokens(),
                expected: seg.len(),
            });
        }
        for (off, i) in range.enumerate() {
            for l in 0..cfg.num_layers {
                context.set_row(l, i, rows.k_row(l, off), rows.v_row(l, off));
            }
            reused.push(i);
            deltas.push(i as i64 - rows.positions()[off] as i64);
            owner[i] = Some((seg.digest(), off));
        }
    }
    Ok(PreparedRequest {
        request_id: layout.agent_id(),
        tokens,
        context,
        reused,
        deltas,
        fresh,
        owner,
    })
}

/// Per-position L2 norm of the difference between two row-major K planes.
pub fn key_diff(fresh: &[f32], rotated: &[f32], row_width: usize) -> Result<Vec<f64>, PicError> {
    if fresh.len() != rotated.len() || row_width == 0 || !fresh.len().is_multiple_of(row_width) {
        return Err(ModelError::Shape("key_diff inputs differ in shape".into()).into());
    }
    Ok(fresh
        .chunks_exact(row_width)
        .zip(rotated.chunks_exact(row_width))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = f64::from(x - y);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Top-`budget` positions by magnitude (ties by ascending index), skipping
/// exact zeros. Returned ascending.
pub fn select_important(magnitudes: &[f64], indices: &[usize], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..magnitudes.len())
        .filter(|&n| magnitudes[n] > 0.0)
        .collect();
    order.sort_by(|&a, &b| {
        magnitudes[b]
            .total_cmp(&magnitudes[a])
            .then(indices[a].cmp(&indices[b]))
    });
    let mut picked: Vec<usize> = order.into_iter().take(budget).map(|n| indices[n]).collect();
    picked.sort_unstable();
    picked
}

fn gather_rows(plane: &[f32], rows: &[usize], w: usize, out: &mut Vec<f32>) {
    for &i in rows {
        out.extend_from_slice(&plane[i * w..(i + 1) * w]);
    }
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Recover a batch of prepared requests in layerwise lockstep.
pub fn recover_batch(
    weights: &ModelWeights,
    mut batch: Vec<PreparedRequest>,
    cfg: &PicConfig,
    ledger: &mut CostLedger,
) -> Result<Vec<RecoveryResult>, PicError> {
    let model = weights.config();
    cfg.validate(model.num_layers)?;
    let w = model.row_width();

    // One rotation call per layer over the concatenated reused rows.
    let all_deltas: Vec<i64> = batch
        .iter()
        .flat_map(|p| p.deltas.iter().copied())
        .collect();
    let mut buf = Vec::with_capacity(all_deltas.len() * w);
    for l in 0..model.num_layers {
        buf.clear();
        for p in &batch {
            gather_rows(&p.context.layer(l).k, &p.reused, w, &mut buf);
        }
        weights.rope().shift_in_place(&mut buf, &all_deltas)?;
        ledger.record_rope_call(l);
        let mut rows = buf.chunks_exact(w);
        for p in &mut batch {
            let layer = p.context.layer_mut(l);
            for &i in &p.reused {
                layer.k[i * w..(i + 1) * w].copy_from_slice(rows.next().expect("row count"));
            }
        }
    }

    // One difference pass on the check layer for the whole batch.
    let mut fresh_rows = Vec::new();
    let mut rotated_rows = Vec::new();
    for p in &batch {
        if p.reused.is_empty() {
            continue;
        }
        let fresh =
            weights.fresh_keys_at_layer(&p.tokens, p.context.positions(), cfg.check_layer)?;
        ledger.check_layer_tokens += p.tokens.len() as u64;
        gather_rows(&fresh, &p.reused, w, &mut fresh_rows);
        gather_rows(
            &p.context.layer(cfg.check_layer).k,
            &p.reused,
            w,
            &mut rotated_rows,
        );
    }
    let magnitudes = key_diff(&fresh_rows, &rotated_rows, w)?;
    ledger.selection_passes += 1;

    let mut results = Vec::with_capacity(batch.len());
    let mut offset = 0;
    for p in batch {
        let mags = &magnitudes[offset..offset + p.reused.len()];
        offset += p.reused.len();
        let important = select_important(mags, &p.reused, cfg.budget(p.reused.len()));
        let fix = merge_sorted(&p.fresh, &important);
        let mut kv = p.context;
        let rows = weights.recompute_positions(&p.tokens, &fix, &kv)?;
        overwrite_rows(&mut kv, &fix, &rows);
        ledger.recomputed_tokens += fix.len() as u64;
        results.push(RecoveryResult {
            request_id: p.request_id,
            tokens: p.tokens,
            kv,
            important_positions: important,
            deviation_score: mags.iter().sum(),
            reused_positions: p.reused,
            reuse_owner: p.owner,
        });
    }
    Ok(results)
}

/// Per-request recovery: a batch of one.
pub fn recover_request(
    weights: &ModelWeights,
    layout: &PromptLayout,
    cache: &SegmentIndex,
    cfg: &PicConfig,
    ledger: &mut CostLedger,
) -> Result<RecoveryResult, PicError> {
    let prepared = prepare_request(weights, layout, cache)?;
    Ok(recover_batch(weights, vec![prepared], cfg, ledger)?
        .pop()
        .expect("one result per request"))
}

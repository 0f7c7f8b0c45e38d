//! Layerwise ping-pong restore of a mirror into the paged pool.
//!
//! Two layer-sized staging buffers alternate between loading master rows and
//! compute. On the compute buffer the diff blocks are overwritten in place,
//! then K is re-rotated to the target positions, then both planes are written
//! to the request's slots. No dense copy of the mirror is ever built.

use thiserror::Error;

use crate::diffstore::{DiffError, MirrorHandle};
use crate::ledger::CostLedger;
use crate::paged_pool::{PagedPool, PoolError, SlotMap};
use crate::toymodel::{ModelError, Rope};
use crate::types::{LayerKv, PositionSpan};

#[derive(Debug, Error, PartialEq)]
pub enum RestoreError {
    #[error("span mismatch: {0}")]
    Span(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Pipeline stage, reported to a [`RestoreObserver`] as it happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreEvent {
    Load { layer: usize },
    Swap { layer: usize },
    ApplyDiff { layer: usize, elements: usize },
    Rope { layer: usize },
    Write { layer: usize },
}

pub trait RestoreObserver {
    fn on_event(&mut self, event: RestoreEvent);
}

impl RestoreObserver for Vec<RestoreEvent> {
    fn on_event(&mut self, event: RestoreEvent) {
        self.push(event);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestoreStats {
    /// Largest total size of staging buffers held at once.
    pub peak_buffer_bytes: usize,
    pub corrected_elements: usize,
    pub bytes_moved: u64,
}

fn check_inputs(
    mirror: &MirrorHandle,
    slot_map: &SlotMap,
    span: &PositionSpan,
) -> Result<(), RestoreError> {
    let t = mirror.num_tokens();
    if slot_map.len() != t {
        return Err(RestoreError::Span(format!(
            "slot map covers {} tokens, mirror has {t}",
            slot_map.len()
        )));
    }
    if span.old_positions() != mirror.source_positions() {
        return Err(RestoreError::Span(
            "span old positions differ from the mirror's source positions".into(),
        ));
    }
    Ok(())
}

fn notify(observer: &mut Option<&mut dyn RestoreObserver>, event: RestoreEvent) {
    if let Some(o) = observer {
        o.on_event(event);
    }
}

/// Restore `mirror` into `pool` at `slot_map`, re-encoded to `span.new`.
pub fn fused_restore(
    rope: &Rope,
    mirror: &MirrorHandle,
    slot_map: &SlotMap,
    span: &PositionSpan,
    pool: &mut PagedPool,
    ledger: &mut CostLedger,
    mut observer: Option<&mut dyn RestoreObserver>,
) -> Result<RestoreStats, RestoreError> {
    check_inputs(mirror, slot_map, span)?;
    let master = mirror.master().kv();
    let diff = mirror.diff();
    let num_layers = master.num_layers();
    let plane = master.num_tokens() * master.row_width();
    let mut load = LayerKv {
        k: vec![0.0; plane],
        v: vec![0.0; plane],
    };
    let mut comp = load.clone();
    let peak_buffer_bytes = 2 * 2 * plane * std::mem::size_of::<f32>();

    let fill = |buf: &mut LayerKv, l: usize| {
        buf.k.copy_from_slice(&master.layer(l).k);
        buf.v.copy_from_slice(&master.layer(l).v);
    };
    if num_layers > 0 {
        fill(&mut load, 0);
        notify(&mut observer, RestoreEvent::Load { layer: 0 });
    }
    let mut corrected = 0;
    for l in 0..num_layers {
        std::mem::swap(&mut load, &mut comp);
        notify(&mut observer, RestoreEvent::Swap { layer: l });
        if l + 1 < num_layers {
            fill(&mut load, l + 1);
            notify(&mut observer, RestoreEvent::Load { layer: l + 1 });
        }
        if !diff.layers[l].is_empty() {
            let n = diff.apply_to_plane(l, false, &mut comp.k)
                + diff.apply_to_plane(l, true, &mut comp.v);
            corrected += n;
            notify(
                &mut observer,
                RestoreEvent::ApplyDiff {
                    layer: l,
                    elements: n,
                },
            );
        }
        rope.recover_in_place(span, &mut comp.k)?;
        notify(&mut observer, RestoreEvent::Rope { layer: l });
        pool.write_rows(slot_map, l, &comp.k, &comp.v)?;
        notify(&mut observer, RestoreEvent::Write { layer: l });
    }

    let bytes_moved = master.dense_bytes() + diff.payload_bytes() as u64;
    ledger.bytes_moved += bytes_moved;
    ledger.corrected_elements += corrected as u64;
    ledger.observe_pool(pool.allocated() as u64);
    Ok(RestoreStats {
        peak_buffer_bytes,
        corrected_elements: corrected,
        bytes_moved,
    })
}

/// Baseline restore: decode a dense mirror first, then rotate and write.
pub fn dense_restore(
    rope: &Rope,
    mirror: &MirrorHandle,
    slot_map: &SlotMap,
    span: &PositionSpan,
    pool: &mut PagedPool,
    ledger: &mut CostLedger,
) -> Result<RestoreStats, RestoreError> {
    check_inputs(mirror, slot_map, span)?;
    let mut dense = mirror.decode_dense()?;
    ledger.dense_mirror_allocations += 1;
    for l in 0..dense.num_layers() {
        let layer = dense.layer_mut(l);
        rope.recover_in_place(span, &mut layer.k)?;
        pool.write_rows(slot_map, l, &layer.k, &layer.v)?;
    }
    let master_bytes = mirror.master().kv().dense_bytes();
    // Master read, diff read, then the dense mirror written out and read back.
    let bytes_moved = master_bytes + mirror.diff().payload_bytes() as u64 + 2 * dense.dense_bytes();
    ledger.bytes_moved += bytes_moved;
    ledger.observe_pool(pool.allocated() as u64);
    Ok(RestoreStats {
        peak_buffer_bytes: dense.dense_bytes() as usize,
        corrected_elements: 0,
        bytes_moved,
    })
}

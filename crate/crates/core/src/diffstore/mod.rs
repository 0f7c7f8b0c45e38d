//! Master/mirror storage for the caches of one round family.
//!
//! One member is kept dense as the master. Every other member is stored as a
//! [`BlockSparseDiff`]: the indices of the token blocks whose K or V rows
//! differ from the master, plus full replacement rows for those blocks.
//! Diff payloads keep the mirror's own (source-position) RoPE encoding, so a
//! restore applies the diff before any position recovery.

mod format;

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::collective::ReusePlan;
use crate::types::{CacheBlockConfig, LayerKv, LayeredKv, TokenId};

pub use format::{deserialize_diff, serialize_diff, HEADER_LEN, MAGIC, TRAILER_LEN, VERSION};

/// Elements differing by more than this outside the hinted blocks are a hint breach.
pub const HINT_TOLERANCE: f32 = 1e-6;

/// Default similarity threshold for the token-block fallback.
pub const FALLBACK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("hint set misses layer {layer} block {block} (max element difference {max_diff})")]
    HintUnsound {
        layer: usize,
        block: usize,
        max_diff: f32,
    },
    #[error("malformed diff: {0}")]
    MalformedDiff(String),
    #[error("family {0} is pinned by live mirrors")]
    Pinned(u64),
    #[error("unknown family {0}")]
    UnknownFamily(u64),
    #[error("master {0} is not among the encoded members")]
    MasterMissing(u64),
}

/// The dense master cache of one family.
#[derive(Debug)]
pub struct MasterEntry {
    family_id: u64,
    tokens: Vec<TokenId>,
    kv: LayeredKv,
    pins: AtomicUsize,
}

impl MasterEntry {
    pub fn family_id(&self) -> u64 {
        self.family_id
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn kv(&self) -> &LayeredKv {
        &self.kv
    }

    /// Number of live mirror handles referencing this master.
    pub fn pin_count(&self) -> usize {
        self.pins.load(Ordering::Acquire)
    }
}

/// Changed blocks of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiff {
    /// Changed block indices of the K plane, strictly increasing.
    pub indices: Vec<u32>,
    /// V-plane indices when they differ from the K list; `None` means shared.
    pub v_indices: Option<Vec<u32>>,
    pub k_payload: Vec<f32>,
    pub v_payload: Vec<f32>,
}

impl LayerDiff {
    pub fn v_block_indices(&self) -> &[u32] {
        self.v_indices.as_deref().unwrap_or(&self.indices)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty() && self.v_block_indices().is_empty()
    }
}

/// A mirror's correction against its master, at whole-block granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseDiff {
    pub num_heads: usize,
    pub head_dim: usize,
    pub block_size: usize,
    pub total_tokens: usize,
    pub layers: Vec<LayerDiff>,
}

impl BlockSparseDiff {
    pub fn empty(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        block_size: usize,
        total_tokens: usize,
    ) -> Self {
        Self {
            num_heads,
            head_dim,
            block_size,
            total_tokens,
            layers: (0..num_layers)
                .map(|_| LayerDiff {
                    indices: Vec::new(),
                    v_indices: None,
                    k_payload: Vec::new(),
                    v_payload: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.total_tokens.div_ceil(self.block_size)
    }

    /// Values per block per plane (padded block).
    pub fn block_payload_len(&self) -> usize {
        self.block_size * self.num_heads * self.head_dim
    }

    /// Tokens held by the final (possibly partial) block.
    pub fn valid_len(&self) -> usize {
        if self.total_tokens == 0 {
            0
        } else {
            self.total_tokens - (self.num_blocks() - 1) * self.block_size
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(LayerDiff::is_empty)
    }

    /// Distinct blocks changed in any layer or plane.
    pub fn changed_blocks(&self) -> usize {
        let mut seen = vec![false; self.num_blocks()];
        for l in &self.layers {
            for &b in l.indices.iter().chain(l.v_block_indices()) {
                seen[b as usize] = true;
            }
        }
        seen.iter().filter(|&&x| x).count()
    }

    /// Sum over layers of changed K blocks.
    pub fn changed_block_layers(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }

    pub fn payload_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.k_payload.len() + l.v_payload.len()) * 4)
            .sum()
    }

    pub fn metadata_bytes(&self) -> usize {
        format::metadata_len(self)
    }

    /// Exact length of [`serialize_diff`] output.
    pub fn serialized_len(&self) -> usize {
        self.payload_bytes() + self.metadata_bytes()
    }

    fn check_against(&self, master: &LayeredKv) -> Result<(), DiffError> {
        if master.num_tokens() != self.total_tokens
            || master.num_layers() != self.layers.len()
            || master.num_heads() != self.num_heads
            || master.head_dim() != self.head_dim
        {
            return Err(DiffError::Shape("diff geometry differs from master".into()));
        }
        let bp = self.block_payload_len();
        for l in &self.layers {
            if l.k_payload.len() != l.indices.len() * bp
                || l.v_payload.len() != l.v_block_indices().len() * bp
            {
                return Err(DiffError::Shape(
                    "payload length disagrees with indices".into(),
                ));
            }
        }
        Ok(())
    }

    /// Overwrite the changed blocks of one layer plane in place.
    ///
    /// `plane` holds `total_tokens` rows. Returns the number of elements written.
    pub fn apply_to_plane(&self, layer: usize, v_plane: bool, plane: &mut [f32]) -> usize {
        let w = self.num_heads * self.head_dim;
        let bp = self.block_payload_len();
        let l = &self.layers[layer];
        let (indices, payload) = if v_plane {
            (l.v_block_indices(), &l.v_payload)
        } else {
            (&l.indices[..], &l.k_payload)
        };
        let mut written = 0;
        for (n, &b) in indices.iter().enumerate() {
            let start = b as usize * self.block_size;
            let end = (start + self.block_size).min(self.total_tokens);
            let len = (end - start) * w;
            plane[start * w..end * w].copy_from_slice(&payload[n * bp..n * bp + len]);
            written += len;
        }
        written
    }
}

fn block_differs(a: &[f32], b: &[f32]) -> bool {
    a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
}

fn block_max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn padded_block(plane: &[f32], range: Range<usize>, w: usize, block_size: usize) -> Vec<f32> {
    let mut out = plane[range.start * w..range.end * w].to_vec();
    out.resize(block_size * w, 0.0);
    out
}

/// Encode `mirror` against `master`.
///
/// With `candidates`, only blocks flagged there may carry large differences:
/// an unflagged block differing by more than [`HINT_TOLERANCE`] is a
/// [`DiffError::HintUnsound`]. Unflagged blocks with smaller nonzero
/// differences are still stored so decoding stays lossless.
pub fn encode_diff(
    master: &LayeredKv,
    mirror: &LayeredKv,
    blocks: CacheBlockConfig,
    candidates: Option<&[bool]>,
) -> Result<BlockSparseDiff, DiffError> {
    if master.num_tokens() != mirror.num_tokens()
        || master.num_layers() != mirror.num_layers()
        || master.row_width() != mirror.row_width()
        || master.head_dim() != mirror.head_dim()
    {
        return Err(DiffError::Shape("master and mirror geometry differ".into()));
    }
    let t = master.num_tokens();
    let nb = blocks.num_blocks(t);
    if let Some(c) = candidates {
        if c.len() != nb {
            return Err(DiffError::Shape(
                "candidate mask length differs from block count".into(),
            ));
        }
    }
    let w = master.row_width();
    let mut diff = BlockSparseDiff::empty(
        master.num_layers(),
        master.num_heads(),
        master.head_dim(),
        blocks.block_size,
        t,
    );
    for (l, out) in diff.layers.iter_mut().enumerate() {
        let (ma, mi) = (master.layer(l), mirror.layer(l));
        for b in 0..nb {
            let r = blocks.block_range(b, t);
            let span = r.start * w..r.end * w;
            let (mk, ik) = (&ma.k[span.clone()], &mi.k[span.clone()]);
            let (mv, iv) = (&ma.v[span.clone()], &mi.v[span]);
            let changed = block_differs(mk, ik) || block_differs(mv, iv);
            if !changed {
                continue;
            }
            if let Some(c) = candidates {
                if !c[b] {
                    let max_diff = block_max_diff(mk, ik).max(block_max_diff(mv, iv));
                    if max_diff > HINT_TOLERANCE {
                        return Err(DiffError::HintUnsound {
                            layer: l,
                            block: b,
                            max_diff,
                        });
                    }
                }
            }
            out.indices.push(b as u32);
            out.k_payload
                .extend(padded_block(&mi.k, r.clone(), w, blocks.block_size));
            out.v_payload
                .extend(padded_block(&mi.v, r, w, blocks.block_size));
        }
    }
    Ok(diff)
}

/// Reference decode: copy the master and overwrite the changed blocks.
pub fn diff_decode_dense(
    master: &LayeredKv,
    diff: &BlockSparseDiff,
) -> Result<LayeredKv, DiffError> {
    diff.check_against(master)?;
    let mut out = master.clone();
    for l in 0..diff.layers.len() {
        let layer = out.layer_mut(l);
        diff.apply_to_plane(l, false, &mut layer.k);
        diff.apply_to_plane(l, true, &mut layer.v);
    }
    Ok(out)
}

/// Lazy mirror: a master reference plus a sparse diff. Holding one pins the master.
#[derive(Debug)]
pub struct MirrorHandle {
    master: Arc<MasterEntry>,
    diff: Arc<BlockSparseDiff>,
    source_positions: Vec<usize>,
}

impl MirrorHandle {
    fn new(master: Arc<MasterEntry>, diff: BlockSparseDiff, source_positions: Vec<usize>) -> Self {
        master.pins.fetch_add(1, Ordering::AcqRel);
        Self {
            master,
            diff: Arc::new(diff),
            source_positions,
        }
    }

    pub fn family_id(&self) -> u64 {
        self.master.family_id
    }

    pub fn master(&self) -> &Arc<MasterEntry> {
        &self.master
    }

    pub fn diff(&self) -> &BlockSparseDiff {
        &self.diff
    }

    /// Positions at which the mirror's KV (and its diff payload) was computed.
    pub fn source_positions(&self) -> &[usize] {
        &self.source_positions
    }

    pub fn num_tokens(&self) -> usize {
        self.diff.total_tokens
    }

    /// Materialize rows `range` of the mirror without decoding the rest.
    pub fn rows(&self, range: Range<usize>) -> Result<LayeredKv, DiffError> {
        if range.end > self.num_tokens() || range.start > range.end {
            return Err(DiffError::Shape(format!(
                "row range {range:?} out of bounds"
            )));
        }
        let master = &self.master.kv;
        let w = master.row_width();
        let bs = self.diff.block_size;
        let bp = self.diff.block_payload_len();
        let mut layers = Vec::with_capacity(master.num_layers());
        for (l, ld) in self.diff.layers.iter().enumerate() {
            let mut k = master.layer(l).k[range.start * w..range.end * w].to_vec();
            let mut v = master.layer(l).v[range.start * w..range.end * w].to_vec();
            for (plane, indices, payload) in [
                (&mut k, &ld.indices[..], &ld.k_payload),
                (&mut v, ld.v_block_indices(), &ld.v_payload),
            ] {
                for (n, &b) in indices.iter().enumerate() {
                    let bstart = b as usize * bs;
                    let lo = bstart.max(range.start);
                    let hi = (bstart + bs).min(range.end);
                    if lo >= hi {
                        continue;
                    }
                    let src = n * bp + (lo - bstart) * w;
                    plane[(lo - range.start) * w..(hi - range.start) * w]
                        .copy_from_slice(&payload[src..src + (hi - lo) * w]);
                }
            }
            layers.push(LayerKv { k, v });
        }
        LayeredKv::from_layers(
            master.num_heads(),
            master.head_dim(),
            layers,
            self.source_positions[range].to_vec(),
        )
        .map_err(|e| DiffError::Shape(e.to_string()))
    }

    pub fn decode_dense(&self) -> Result<LayeredKv, DiffError> {
        self.rows(0..self.num_tokens())
    }
}

impl Clone for MirrorHandle {
    fn clone(&self) -> Self {
        self.master.pins.fetch_add(1, Ordering::AcqRel);
        Self {
            master: Arc::clone(&self.master),
            diff: Arc::clone(&self.diff),
            source_positions: self.source_positions.clone(),
        }
    }
}

impl Drop for MirrorHandle {
    fn drop(&mut self) {
        self.master.pins.fetch_sub(1, Ordering::AcqRel);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MirrorStats {
    pub request_id: u64,
    pub changed_blocks: usize,
    pub changed_block_layers: usize,
    pub payload_bytes: u64,
    pub metadata_bytes: u64,
    /// Serialized length (payload plus metadata).
    pub diff_bytes: u64,
    /// `dense_bytes / diff_bytes`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionStats {
    /// Dense size of one member cache.
    pub dense_bytes: u64,
    pub mirrors: Vec<MirrorStats>,
    /// `1 + sum(diff_bytes / dense_bytes)`, in dense-cache equivalents.
    pub family_cost: f64,
}

impl CompressionStats {
    fn new(dense_bytes: u64, mirrors: Vec<MirrorStats>) -> Self {
        let family_cost = 1.0
            + mirrors
                .iter()
                .map(|m| m.diff_bytes as f64 / dense_bytes as f64)
                .sum::<f64>();
        Self {
            dense_bytes,
            mirrors,
            family_cost,
        }
    }

    pub fn mean_ratio(&self) -> Option<f64> {
        if self.mirrors.is_empty() {
            None
        } else {
            Some(self.mirrors.iter().map(|m| m.ratio).sum::<f64>() / self.mirrors.len() as f64)
        }
    }
}

/// Family cost when `n` caches share one compression ratio.
pub fn family_cost_from_ratio(n: usize, ratio: f64) -> f64 {
    1.0 + n.saturating_sub(1) as f64 / ratio
}

fn mirror_stats(request_id: u64, dense_bytes: u64, diff: &BlockSparseDiff) -> MirrorStats {
    let diff_bytes = serialize_diff(diff).len() as u64;
    MirrorStats {
        request_id,
        changed_blocks: diff.changed_blocks(),
        changed_block_layers: diff.changed_block_layers(),
        payload_bytes: diff.payload_bytes() as u64,
        metadata_bytes: diff.metadata_bytes() as u64,
        diff_bytes,
        ratio: dense_bytes as f64 / diff_bytes as f64,
    }
}

/// One member handed to [`DiffStore::encode_family`].
#[derive(Debug, Clone, Copy)]
pub struct FamilyMember<'a> {
    pub tokens: &'a [TokenId],
    pub kv: &'a LayeredKv,
}

#[derive(Debug)]
pub struct EncodedFamily {
    pub master_id: u64,
    pub master: Arc<MasterEntry>,
    pub mirrors: BTreeMap<u64, MirrorHandle>,
    pub stats: CompressionStats,
}

/// Result of storing a cache without a reuse plan.
#[derive(Debug)]
pub enum StoredCache {
    Master(Arc<MasterEntry>),
    Mirror(MirrorHandle),
}

/// Registry of stored families.
#[derive(Debug, Default)]
pub struct DiffStore {
    families: BTreeMap<u64, Arc<MasterEntry>>,
    next_id: u64,
}

impl DiffStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn master(&self, family_id: u64) -> Option<&Arc<MasterEntry>> {
        self.families.get(&family_id)
    }

    /// Store a cache dense as the master of a new family.
    pub fn insert_dense(&mut self, tokens: Vec<TokenId>, kv: LayeredKv) -> Arc<MasterEntry> {
        let family_id = self.next_id;
        self.next_id += 1;
        let entry = Arc::new(MasterEntry {
            family_id,
            tokens,
            kv,
            pins: AtomicUsize::new(0),
        });
        self.families.insert(family_id, Arc::clone(&entry));
        entry
    }

    /// Store a round family: the plan's master dense, every other member as a
    /// diff restricted to the blocks its hint set touches.
    pub fn encode_family(
        &mut self,
        plan: &ReusePlan,
        members: &BTreeMap<u64, FamilyMember<'_>>,
        blocks: CacheBlockConfig,
    ) -> Result<EncodedFamily, DiffError> {
        let master_member = members
            .get(&plan.master_id)
            .ok_or(DiffError::MasterMissing(plan.master_id))?;
        let master_kv = master_member.kv;
        let t = master_kv.num_tokens();
        let mut diffs = BTreeMap::new();
        for (&id, m) in members {
            if id == plan.master_id {
                continue;
            }
            if m.kv.positions() != master_kv.positions() {
                return Err(DiffError::Shape(format!(
                    "member {id} positions differ from the master's"
                )));
            }
            let mut mask = vec![false; blocks.num_blocks(t)];
            for &i in plan
                .mirror_diff_hints
                .get(&id)
                .map_or(&[][..], Vec::as_slice)
            {
                if i >= t {
                    return Err(DiffError::Shape(format!(
                        "hint index {i} beyond {t} tokens"
                    )));
                }
                mask[i / blocks.block_size] = true;
            }
            diffs.insert(id, encode_diff(master_kv, m.kv, blocks, Some(&mask))?);
        }
        let master = self.insert_dense(master_member.tokens.to_vec(), master_kv.clone());
        let dense_bytes = master_kv.dense_bytes();
        let mut stats = Vec::with_capacity(diffs.len());
        let mut mirrors = BTreeMap::new();
        for (id, diff) in diffs {
            stats.push(mirror_stats(id, dense_bytes, &diff));
            let positions = members[&id].kv.positions().to_vec();
            mirrors.insert(id, MirrorHandle::new(Arc::clone(&master), diff, positions));
        }
        Ok(EncodedFamily {
            master_id: plan.master_id,
            master,
            mirrors,
            stats: CompressionStats::new(dense_bytes, stats),
        })
    }

    /// Family whose master shares the largest fraction of block-aligned token
    /// blocks with `tokens`, if that fraction reaches `threshold`.
    ///
    /// Only masters of the same length are eligible, since diffs are
    /// position aligned.
    pub fn find_master_fallback(
        &self,
        tokens: &[TokenId],
        blocks: CacheBlockConfig,
        threshold: f64,
    ) -> Option<u64> {
        let nb = blocks.num_blocks(tokens.len());
        if nb == 0 {
            return None;
        }
        let mut best: Option<(u64, f64)> = None;
        for (&id, master) in &self.families {
            if master.tokens.len() != tokens.len() {
                continue;
            }
            let equal = (0..nb)
                .filter(|&b| {
                    let r = blocks.block_range(b, tokens.len());
                    master.tokens[r.clone()] == tokens[r]
                })
                .count();
            let frac = equal as f64 / nb as f64;
            if best.is_none_or(|(_, f)| frac > f) {
                best = Some((id, frac));
            }
        }
        best.filter(|&(_, f)| f >= threshold).map(|(id, _)| id)
    }

    /// Store a cache that arrived without a reuse plan: as a mirror of the
    /// most token-similar master when one qualifies, otherwise dense.
    pub fn store_unplanned(
        &mut self,
        tokens: Vec<TokenId>,
        kv: LayeredKv,
        blocks: CacheBlockConfig,
        threshold: f64,
    ) -> Result<StoredCache, DiffError> {
        if let Some(id) = self.find_master_fallback(&tokens, blocks, threshold) {
            let master = Arc::clone(&self.families[&id]);
            if master.kv.positions() == kv.positions() && master.kv.row_width() == kv.row_width() {
                let diff = encode_diff(&master.kv, &kv, blocks, None)?;
                if diff.serialized_len() < kv.dense_bytes() as usize {
                    let positions = kv.positions().to_vec();
                    return Ok(StoredCache::Mirror(MirrorHandle::new(
                        master, diff, positions,
                    )));
                }
            }
        }
        Ok(StoredCache::Master(self.insert_dense(tokens, kv)))
    }

    /// Drop a family. Refused while mirrors pin its master.
    pub fn evict(&mut self, family_id: u64) -> Result<(), DiffError> {
        let entry = self
            .families
            .get(&family_id)
            .ok_or(DiffError::UnknownFamily(family_id))?;
        if entry.pin_count() > 0 {
            return Err(DiffError::Pinned(family_id));
        }
        self.families.remove(&family_id);
        Ok(())
    }

    /// Drop every family with no live mirrors and no outside references.
    pub fn evict_unreferenced(&mut self) -> usize {
        let before = self.families.len();
        self.families
            .retain(|_, e| e.pin_count() > 0 || Arc::strong_count(e) > 1);
        before - self.families.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn random_kv(
        rng: &mut SplitMix64,
        layers: usize,
        heads: usize,
        hd: usize,
        t: usize,
    ) -> LayeredKv {
        let plane = t * heads * hd;
        let ls = (0..layers)
            .map(|_| LayerKv {
                k: (0..plane).map(|_| rng.random_range(-1.0..1.0)).collect(),
                v: (0..plane).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        LayeredKv::from_layers(heads, hd, ls, (0..t).collect()).unwrap()
    }

    /// Copy of `kv` with the given token rows perturbed in every layer.
    fn perturb_rows(kv: &LayeredKv, rows: &[usize]) -> LayeredKv {
        let mut out = kv.clone();
        let w = kv.row_width();
        for l in 0..kv.num_layers() {
            for &r in rows {
                out.layer_mut(l).k[r * w] += 1.0;
                out.layer_mut(l).v[r * w + 1] -= 1.0;
            }
        }
        out
    }

    #[test]
    fn identical_caches_have_empty_diff() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let kv = random_kv(&mut rng, 2, 2, 4, 70);
        let diff = encode_diff(&kv, &kv, CacheBlockConfig { block_size: 32 }, None).unwrap();
        assert!(diff.is_empty());
        assert_eq!(diff.payload_bytes(), 0);
        assert_eq!(
            serialize_diff(&diff).len(),
            HEADER_LEN + 2 * 5 + TRAILER_LEN
        );
        assert!(diff_decode_dense(&kv, &diff).unwrap().bit_eq(&kv));
    }

    #[test]
    fn full_diff_ignores_master() {
        let mut rng = SplitMix64::seed_from_u64(2);
        let master = random_kv(&mut rng, 2, 1, 4, 45);
        let mirror = random_kv(&mut rng, 2, 1, 4, 45);
        let diff =
            encode_diff(&master, &mirror, CacheBlockConfig { block_size: 16 }, None).unwrap();
        assert_eq!(diff.changed_blocks(), 3);
        let zero = LayeredKv::zeroed(2, 1, 4, (0..45).collect()).unwrap();
        assert!(diff_decode_dense(&zero, &diff).unwrap().bit_eq(&mirror));
    }

    #[test]
    fn whole_block_payload_and_padding() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let master = random_kv(&mut rng, 1, 1, 2, 40);
        let mirror = perturb_rows(&master, &[3, 39]);
        let diff =
            encode_diff(&master, &mirror, CacheBlockConfig { block_size: 16 }, None).unwrap();
        assert_eq!(diff.layers[0].indices, vec![0, 2]);
        assert_eq!(diff.valid_len(), 8);
        assert_eq!(diff.layers[0].k_payload.len(), 2 * 16 * 2);
        // Padding rows of the final block are zero.
        assert!(diff.layers[0].k_payload[(16 + 8) * 2..]
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn hint_breach_is_reported() {
        let mut rng = SplitMix64::seed_from_u64(4);
        let master = random_kv(&mut rng, 2, 1, 2, 64);
        let mirror = perturb_rows(&master, &[40]);
        let mask = vec![true, false];
        let err = encode_diff(
            &master,
            &mirror,
            CacheBlockConfig { block_size: 32 },
            Some(&mask),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            DiffError::HintUnsound {
                layer: 0,
                block: 1,
                ..
            }
        ));
    }

    #[test]
    fn serializer_detects_truncation_and_garbage() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let master = random_kv(&mut rng, 2, 2, 2, 50);
        let mirror = perturb_rows(&master, &[0, 20, 49]);
        let diff = encode_diff(&master, &mirror, CacheBlockConfig { block_size: 8 }, None).unwrap();
        let bytes = serialize_diff(&diff);
        assert_eq!(bytes.len(), diff.serialized_len());
        assert_eq!(deserialize_diff(&bytes).unwrap(), diff);
        for cut in [0, 3, 10, HEADER_LEN, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                deserialize_diff(&bytes[..cut]),
                Err(DiffError::MalformedDiff(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(deserialize_diff(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(deserialize_diff(&bad).is_err());
    }

    #[test]
    fn separate_v_index_list_round_trips() {
        let mut diff = BlockSparseDiff::empty(1, 1, 2, 4, 10);
        diff.layers[0].indices = vec![1];
        diff.layers[0].k_payload = vec![1.0; 8];
        diff.layers[0].v_indices = Some(vec![0, 2]);
        diff.layers[0].v_payload = vec![2.0; 16];
        let bytes = serialize_diff(&diff);
        assert_eq!(bytes.len(), diff.serialized_len());
        let back = deserialize_diff(&bytes).unwrap();
        assert_eq!(back, diff);
        let master = LayeredKv::zeroed(1, 1, 2, (0..10).collect()).unwrap();
        let dense = diff_decode_dense(&master, &back).unwrap();
        assert_eq!(dense.layer(0).k[8..16], [1.0; 8]);
        assert_eq!(dense.layer(0).v[16..20], [2.0; 4]);
        assert_eq!(dense.layer(0).v[8..16], [0.0; 8]);
    }

    #[test]
    fn mirror_rows_match_dense_decode() {
        let mut rng = SplitMix64::seed_from_u64(6);
        let master = random_kv(&mut rng, 3, 2, 2, 77);
        let mirror = perturb_rows(&master, &[5, 33, 76]);
        let mut store = DiffStore::new();
        let stored = store
            .store_unplanned(
                vec![1; 77],
                master.clone(),
                CacheBlockConfig { block_size: 16 },
                0.5,
            )
            .unwrap();
        let StoredCache::Master(m) = stored else {
            panic!("first store must be dense")
        };
        let handle = match store
            .store_unplanned(
                vec![1; 77],
                mirror.clone(),
                CacheBlockConfig { block_size: 16 },
                0.5,
            )
            .unwrap()
        {
            StoredCache::Mirror(h) => h,
            StoredCache::Master(_) => panic!("identical tokens should reuse the master"),
        };
        assert_eq!(m.pin_count(), 1);
        assert!(handle.decode_dense().unwrap().bit_eq(&mirror));
        for r in [0..1, 10..40, 30..77, 76..77] {
            assert!(handle.rows(r.clone()).unwrap().bit_eq(&mirror.slice(r)));
        }
        assert_eq!(
            store.evict(m.family_id()),
            Err(DiffError::Pinned(m.family_id()))
        );
        let cloned = handle.clone();
        assert_eq!(m.pin_count(), 2);
        drop(handle);
        drop(cloned);
        assert_eq!(m.pin_count(), 0);
        store.evict(m.family_id()).unwrap();
    }

    #[test]
    fn fallback_picks_most_similar_master() {
        let bs = CacheBlockConfig { block_size: 4 };
        let base: Vec<u32> = (0..80).collect();
        let mut store = DiffStore::new();
        let zero_kv = LayeredKv::zeroed(1, 1, 2, (0..80).collect()).unwrap();
        // Family 0 shares blocks 0..12, family 1 shares blocks 0..4.
        let mut a = base.clone();
        for x in &mut a[48..] {
            *x += 1000;
        }
        let mut b = base.clone();
        for x in &mut b[16..] {
            *x += 2000;
        }
        let fa = store.insert_dense(a, zero_kv.clone()).family_id();
        store.insert_dense(b, zero_kv.clone());
        assert_eq!(store.find_master_fallback(&base, bs, 0.5), Some(fa));
        assert_eq!(store.find_master_fallback(&base, bs, 0.7), None);
        let disjoint: Vec<u32> = (5000..5080).collect();
        assert_eq!(store.find_master_fallback(&disjoint, bs, 0.5), None);
        let exact = store.master(fa).unwrap().tokens().to_vec();
        assert_eq!(store.find_master_fallback(&exact, bs, 1.0), Some(fa));
    }

    #[test]
    fn family_cost_spot_values() {
        assert!((family_cost_from_ratio(10, 11.2) - 1.8036).abs() < 1e-4);
        assert!((family_cost_from_ratio(10, 17.5) - 1.5143).abs() < 1e-4);
        assert_eq!(family_cost_from_ratio(1, 3.0), 1.0);
    }
}

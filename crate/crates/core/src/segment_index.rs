//! Content-addressed segment index.
//!
//! Prompts are split at separator tokens and every segment is keyed by the
//! digest of its tokens alone, so a segment hits regardless of the offset it
//! occupies in the requesting prompt.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

use crate::diffstore::{DiffError, MasterEntry, MirrorHandle};
use crate::types::{Digest, LayeredKv, Segment, SegmentKind, TokenId};

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("empty token stream")]
    EmptyStream,
    #[error("empty segment at token offset {offset}")]
    EmptySegment { offset: usize },
    #[error("stream consists only of separators")]
    OnlySeparators,
    #[error("entry {0} is pinned by live mirrors")]
    Pinned(Digest),
    #[error("no entry for {0}")]
    Missing(Digest),
    #[error("entry shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Split a separator-delimited stream into its maximal separator-free runs.
///
/// Leading, trailing and adjacent separators are rejected. Segment kinds are
/// assigned positionally: the first run is the private history, every later
/// run a shared output.
pub fn split_segments(stream: &[TokenId], sep: TokenId) -> Result<Vec<Segment>, IndexError> {
    if stream.is_empty() {
        return Err(IndexError::EmptyStream);
    }
    if stream.iter().all(|&t| t == sep) {
        return Err(IndexError::OnlySeparators);
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for run in stream.split(|&t| t == sep) {
        if run.is_empty() {
            return Err(IndexError::EmptySegment { offset });
        }
        let kind = if out.is_empty() {
            SegmentKind::PrivateHistory
        } else {
            SegmentKind::SharedOutput
        };
        out.push(Segment::new(run.to_vec(), kind).expect("run is non-empty"));
        offset += run.len() + 1;
    }
    Ok(out)
}

/// Where a cached segment's KV rows live.
#[derive(Debug, Clone)]
pub enum KvRef {
    Dense(Arc<LayeredKv>),
    Master(Arc<MasterEntry>),
    Mirror(MirrorHandle),
}

#[derive(Debug)]
pub struct SegmentCacheEntry {
    digest: Digest,
    source_positions: Vec<usize>,
    kv_ref: KvRef,
    /// Rows of the referenced cache holding this segment.
    rows: Range<usize>,
    context_digest: Digest,
    bytes: u64,
    last_used: AtomicU64,
}

impl SegmentCacheEntry {
    pub fn new(
        digest: Digest,
        kv_ref: KvRef,
        rows: Range<usize>,
        context_digest: Digest,
    ) -> Result<Self, IndexError> {
        let (positions, total, width, layers) = match &kv_ref {
            KvRef::Dense(kv) => (
                kv.positions(),
                kv.num_tokens(),
                kv.row_width(),
                kv.num_layers(),
            ),
            KvRef::Master(m) => (
                m.kv().positions(),
                m.kv().num_tokens(),
                m.kv().row_width(),
                m.kv().num_layers(),
            ),
            KvRef::Mirror(h) => (
                h.source_positions(),
                h.num_tokens(),
                h.master().kv().row_width(),
                h.master().kv().num_layers(),
            ),
        };
        if rows.end > total || rows.is_empty() {
            return Err(IndexError::Shape(format!(
                "rows {rows:?} outside a {total}-token cache"
            )));
        }
        let source_positions = positions[rows.clone()].to_vec();
        let bytes = (rows.len() * width * layers * 2 * 4) as u64;
        Ok(Self {
            digest,
            source_positions,
            kv_ref,
            rows,
            context_digest,
            bytes,
            last_used: AtomicU64::new(0),
        })
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn source_positions(&self) -> &[usize] {
        &self.source_positions
    }

    pub fn context_digest(&self) -> Digest {
        self.context_digest
    }

    pub fn kv_ref(&self) -> &KvRef {
        &self.kv_ref
    }

    pub fn num_tokens(&self) -> usize {
        self.rows.len()
    }

    /// Logical KV bytes of the segment.
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    /// Entries backed by a master that live mirrors still reference.
    pub fn is_pinned(&self) -> bool {
        matches!(&self.kv_ref, KvRef::Master(m) if m.pin_count() > 0)
    }

    /// The segment's rows, encoded at [`source_positions`](Self::source_positions).
    pub fn materialize(&self) -> Result<LayeredKv, IndexError> {
        Ok(match &self.kv_ref {
            KvRef::Dense(kv) => kv.slice(self.rows.clone()),
            KvRef::Master(m) => m.kv().slice(self.rows.clone()),
            KvRef::Mirror(h) => h.rows(self.rows.clone())?,
        })
    }
}

#[derive(Debug, Default)]
struct Inner {
    by_digest: HashMap<Digest, Vec<Arc<SegmentCacheEntry>>>,
    used_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictionReport {
    pub evicted: usize,
    pub remaining_bytes: u64,
    pub budget_met: bool,
}

/// Digest -> entries map with LRU eviction. Lookups take a shared lock.
#[derive(Debug, Default)]
pub struct SegmentIndex {
    inner: RwLock<Inner>,
    clock: AtomicU64,
}

impl SegmentIndex {
    pub fn new() -> Self {
        Self::default()
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn insert(&self, entry: SegmentCacheEntry) -> Arc<SegmentCacheEntry> {
        entry.last_used.store(self.tick(), Ordering::Relaxed);
        let entry = Arc::new(entry);
        let mut inner = self.inner.write();
        inner.used_bytes += entry.bytes;
        inner
            .by_digest
            .entry(entry.digest)
            .or_default()
            .push(Arc::clone(&entry));
        entry
    }

    /// Most recently inserted entry for `digest`. Refreshes its LRU stamp.
    pub fn lookup(&self, digest: &Digest) -> Option<Arc<SegmentCacheEntry>> {
        let inner = self.inner.read();
        let entry = inner.by_digest.get(digest)?.last()?;
        entry.last_used.store(self.tick(), Ordering::Relaxed);
        Some(Arc::clone(entry))
    }

    /// Presence check without touching recency.
    pub fn contains(&self, digest: &Digest) -> bool {
        self.inner
            .read()
            .by_digest
            .get(digest)
            .is_some_and(|v| !v.is_empty())
    }

    pub fn len(&self) -> usize {
        self.inner.read().by_digest.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn used_bytes(&self) -> u64 {
        self.inner.read().used_bytes
    }

    /// Remove every entry for `digest`. Refused if any of them is pinned.
    pub fn remove(&self, digest: &Digest) -> Result<usize, IndexError> {
        let mut inner = self.inner.write();
        let entries = inner
            .by_digest
            .get(digest)
            .ok_or(IndexError::Missing(*digest))?;
        if entries.iter().any(|e| e.is_pinned()) {
            return Err(IndexError::Pinned(*digest));
        }
        let entries = inner.by_digest.remove(digest).expect("present");
        inner.used_bytes -= entries.iter().map(|e| e.bytes).sum::<u64>();
        Ok(entries.len())
    }

    /// Evict least-recently-used unpinned entries until `budget_bytes` is met
    /// or only pinned entries remain.
    pub fn evict_to_budget(&self, budget_bytes: u64) -> EvictionReport {
        let mut inner = self.inner.write();
        let mut evicted = 0;
        if inner.used_bytes > budget_bytes {
            let mut order: Vec<(u64, Digest, usize)> = inner
                .by_digest
                .iter()
                .flat_map(|(d, v)| {
                    v.iter()
                        .enumerate()
                        .map(move |(i, e)| (e.last_used.load(Ordering::Relaxed), *d, i))
                })
                .collect();
            order.sort_unstable();
            let mut doomed: HashMap<Digest, Vec<usize>> = HashMap::new();
            let mut used = inner.used_bytes;
            for (_, d, i) in order {
                if used <= budget_bytes {
                    break;
                }
                let e = &inner.by_digest[&d][i];
                if e.is_pinned() {
                    continue;
                }
                used -= e.bytes;
                doomed.entry(d).or_default().push(i);
                evicted += 1;
            }
            for (d, idx) in doomed {
                let list = inner.by_digest.get_mut(&d).expect("present");
                let mut i = 0;
                list.retain(|_| {
                    let keep = !idx.contains(&i);
                    i += 1;
                    keep
                });
                if list.is_empty() {
                    inner.by_digest.remove(&d);
                }
            }
            inner.used_bytes = used;
        }
        EvictionReport {
            evicted,
            remaining_bytes: inner.used_bytes,
            budget_met: inner.used_bytes <= budget_bytes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffstore::{DiffStore, StoredCache};
    use crate::types::{flatten_prompt, CacheBlockConfig, LayerKv, PromptLayout};

    fn kv(t: usize, start: usize) -> Arc<LayeredKv> {
        let layers = vec![LayerKv {
            k: (0..t * 2).map(|x| x as f32).collect(),
            v: vec![0.5; t * 2],
        }];
        Arc::new(LayeredKv::from_layers(1, 2, layers, (start..start + t).collect()).unwrap())
    }

    fn entry(tokens: &[u32], cache: Arc<LayeredKv>, rows: Range<usize>) -> SegmentCacheEntry {
        SegmentCacheEntry::new(
            Digest::of_tokens(tokens),
            KvRef::Dense(cache),
            rows,
            Digest::of_tokens(&[]),
        )
        .unwrap()
    }

    #[test]
    fn split_examples() {
        let segs = split_segments(&[5, 0, 6, 7, 0, 8], 0).unwrap();
        let toks: Vec<&[u32]> = segs.iter().map(Segment::tokens).collect();
        assert_eq!(toks, vec![&[5][..], &[6, 7][..], &[8][..]]);
        assert_eq!(segs[0].kind(), SegmentKind::PrivateHistory);
        assert_eq!(split_segments(&[5, 6, 7], 0).unwrap().len(), 1);
        assert_eq!(
            split_segments(&[5, 0, 0, 6], 0).unwrap_err(),
            IndexError::EmptySegment { offset: 2 }
        );
        assert_eq!(split_segments(&[], 0).unwrap_err(), IndexError::EmptyStream);
        assert_eq!(
            split_segments(&[0, 0], 0).unwrap_err(),
            IndexError::OnlySeparators
        );
        assert!(matches!(
            split_segments(&[0, 4], 0),
            Err(IndexError::EmptySegment { offset: 0 })
        ));
        assert!(matches!(
            split_segments(&[4, 0], 0),
            Err(IndexError::EmptySegment { .. })
        ));
    }

    #[test]
    fn lookup_is_position_independent() {
        let index = SegmentIndex::new();
        let seg = [11, 12, 13];
        // Cached from a prompt where the segment sat at offset 10.
        index.insert(entry(&seg, kv(13, 0), 10..13));
        // A prompt placing it at offset 400 asks by content alone.
        let hit = index.lookup(&Digest::of_tokens(&seg)).unwrap();
        assert_eq!(hit.source_positions(), &[10, 11, 12]);
        assert_eq!(hit.materialize().unwrap().positions(), &[10, 11, 12]);
        assert!(index.lookup(&Digest::of_tokens(&[11, 12, 14])).is_none());
    }

    #[test]
    fn most_recent_entry_wins() {
        let index = SegmentIndex::new();
        index.insert(entry(&[1, 2], kv(2, 0), 0..2));
        index.insert(entry(&[1, 2], kv(2, 50), 0..2));
        assert_eq!(
            index
                .lookup(&Digest::of_tokens(&[1, 2]))
                .unwrap()
                .source_positions(),
            &[50, 51]
        );
        assert_eq!(index.len(), 2);
    }

    #[test]
    fn eviction_to_budget() {
        let index = SegmentIndex::new();
        index.insert(entry(&[1], kv(4, 0), 0..4));
        index.insert(entry(&[2], kv(4, 0), 0..4));
        let per = index.used_bytes() / 2;
        index.lookup(&Digest::of_tokens(&[1]));
        let r = index.evict_to_budget(per);
        assert_eq!(r.evicted, 1);
        assert!(r.budget_met);
        assert!(index.lookup(&Digest::of_tokens(&[1])).is_some());
        assert!(index.lookup(&Digest::of_tokens(&[2])).is_none());
        index.evict_to_budget(0);
        assert!(index.is_empty());
        assert_eq!(index.used_bytes(), 0);
    }

    #[test]
    fn pinned_master_survives_pressure() {
        let blocks = CacheBlockConfig { block_size: 2 };
        let mut store = DiffStore::new();
        let base = kv(8, 0);
        let StoredCache::Master(master) = store
            .store_unplanned(vec![3; 8], (*base).clone(), blocks, 0.5)
            .unwrap()
        else {
            panic!()
        };
        let mut sibling = (*base).clone();
        sibling.layer_mut(0).k[0] = -1.0;
        let mirrors: Vec<_> = (0..2)
            .map(|_| {
                match store
                    .store_unplanned(vec![3; 8], sibling.clone(), blocks, 0.5)
                    .unwrap()
                {
                    StoredCache::Mirror(h) => h,
                    StoredCache::Master(_) => panic!("expected mirror"),
                }
            })
            .collect();
        assert_eq!(master.pin_count(), 2);

        let index = SegmentIndex::new();
        let master_seg = [7u32, 7];
        index.insert(
            SegmentCacheEntry::new(
                Digest::of_tokens(&master_seg),
                KvRef::Master(Arc::clone(&master)),
                0..4,
                Digest::of_tokens(&[]),
            )
            .unwrap(),
        );
        for (i, m) in mirrors.iter().enumerate() {
            index.insert(
                SegmentCacheEntry::new(
                    Digest::of_tokens(&[100 + i as u32]),
                    KvRef::Mirror(m.clone()),
                    4..8,
                    Digest::of_tokens(&[]),
                )
                .unwrap(),
            );
        }
        index.insert(entry(&[55], kv(4, 0), 0..4));
        drop(mirrors);
        assert_eq!(master.pin_count(), 2);
        assert_eq!(
            index.remove(&Digest::of_tokens(&master_seg)),
            Err(IndexError::Pinned(Digest::of_tokens(&master_seg)))
        );

        let r = index.evict_to_budget(0);
        // Mirrors and the dense entry go; the master stays until its pins drain.
        assert_eq!(r.evicted, 3);
        assert!(!r.budget_met);
        assert!(index.contains(&Digest::of_tokens(&master_seg)));
        assert_eq!(master.pin_count(), 0);
        assert!(index.evict_to_budget(0).budget_met);
    }

    #[test]
    fn split_inverts_flatten() {
        let layout = PromptLayout::new(
            0,
            vec![
                Segment::new(vec![1, 2], SegmentKind::PrivateHistory).unwrap(),
                Segment::new(vec![3], SegmentKind::SharedOutput).unwrap(),
                Segment::new(vec![4, 5, 6], SegmentKind::SharedOutput).unwrap(),
            ],
        )
        .unwrap();
        let back = split_segments(&flatten_prompt(&layout, 9), 9).unwrap();
        assert_eq!(back, layout.segments());
    }
}

//! Block-granular paged KV pool addressed in token slots.
//!
//! Each slot holds one token row per layer in a K plane and a V plane.
//! Allocation prefers whole free blocks so that runs stay block aligned.

use std::collections::HashSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("out of slots: requested {requested}, {free} free")]
    OutOfSlots { requested: usize, free: usize },
    #[error("slot {slot} accessed after free")]
    UseAfterFree { slot: usize },
    #[error("layer {layer} out of range ({num_layers} layers)")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("row data has {got} values, expected {expected}")]
    RowShape { got: usize, expected: usize },
}

/// A request's per-token slot assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotMap {
    request_id: u64,
    alloc_id: u64,
    slots: Vec<usize>,
}

impl SlotMap {
    pub fn request_id(&self) -> u64 {
        self.request_id
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Build a map over explicit slots, bypassing the allocator. Such maps are
    /// rejected by pool reads and writes; they exist for grouping checks.
    pub fn detached(request_id: u64, slots: Vec<usize>) -> Self {
        Self {
            request_id,
            alloc_id: u64::MAX,
            slots,
        }
    }
}

/// True iff no slot appears in two maps (or twice in one map).
pub fn disjoint<'a>(maps: impl IntoIterator<Item = &'a SlotMap>) -> bool {
    let mut seen = HashSet::new();
    maps.into_iter()
        .flat_map(|m| m.slots.iter())
        .all(|&s| seen.insert(s))
}

#[derive(Debug, Clone)]
pub struct PagedPool {
    capacity: usize,
    block_size: usize,
    row_width: usize,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    /// Allocation id owning each slot.
    owner: Vec<Option<u64>>,
    /// Free slots per block.
    block_free: Vec<usize>,
    free: usize,
    peak: usize,
    next_alloc: u64,
}

impl PagedPool {
    pub fn new(capacity: usize, block_size: usize, num_layers: usize, row_width: usize) -> Self {
        assert!(block_size > 0, "block size must be positive");
        let plane = || vec![vec![0.0f32; capacity * row_width]; num_layers];
        let blocks = capacity.div_ceil(block_size);
        let block_free = (0..blocks)
            .map(|b| (capacity - b * block_size).min(block_size))
            .collect();
        Self {
            capacity,
            block_size,
            row_width,
            k: plane(),
            v: plane(),
            owner: vec![None; capacity],
            block_free,
            free: capacity,
            peak: 0,
            next_alloc: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_slots(&self) -> usize {
        self.free
    }

    pub fn allocated(&self) -> usize {
        self.capacity - self.free
    }

    pub fn peak_allocated(&self) -> usize {
        self.peak
    }

    pub fn num_layers(&self) -> usize {
        self.k.len()
    }

    fn block_len(&self, b: usize) -> usize {
        (self.capacity - b * self.block_size).min(self.block_size)
    }

    fn take(&mut self, slot: usize, alloc_id: u64, out: &mut Vec<usize>) {
        debug_assert!(self.owner[slot].is_none());
        self.owner[slot] = Some(alloc_id);
        self.block_free[slot / self.block_size] -= 1;
        self.free -= 1;
        out.push(slot);
    }

    pub fn allocate(&mut self, request_id: u64, n_tokens: usize) -> Result<SlotMap, PoolError> {
        if n_tokens > self.free {
            return Err(PoolError::OutOfSlots {
                requested: n_tokens,
                free: self.free,
            });
        }
        let alloc_id = self.next_alloc;
        self.next_alloc += 1;
        let mut slots = Vec::with_capacity(n_tokens);
        let bs = self.block_size;

        // Whole free blocks first, then the tail from a free block, then anything.
        for b in 0..self.block_free.len() {
            let need = n_tokens - slots.len();
            if need < bs {
                break;
            }
            if self.block_free[b] == bs && self.block_len(b) == bs {
                for s in b * bs..(b + 1) * bs {
                    self.take(s, alloc_id, &mut slots);
                }
            }
        }
        let need = n_tokens - slots.len();
        if need > 0 {
            if let Some(b) = (0..self.block_free.len())
                .find(|&b| self.block_free[b] == self.block_len(b) && self.block_len(b) >= need)
            {
                for s in b * bs..b * bs + need {
                    self.take(s, alloc_id, &mut slots);
                }
            }
        }
        let mut s = 0;
        while slots.len() < n_tokens {
            if self.owner[s].is_none() {
                self.take(s, alloc_id, &mut slots);
            }
            s += 1;
        }
        self.peak = self.peak.max(self.allocated());
        Ok(SlotMap {
            request_id,
            alloc_id,
            slots,
        })
    }

    fn check_live(&self, map: &SlotMap) -> Result<(), PoolError> {
        for &s in &map.slots {
            if s >= self.capacity || self.owner[s] != Some(map.alloc_id) {
                return Err(PoolError::UseAfterFree { slot: s });
            }
        }
        Ok(())
    }

    pub fn free(&mut self, map: SlotMap) -> Result<(), PoolError> {
        self.check_live(&map)?;
        for &s in &map.slots {
            self.owner[s] = None;
            self.block_free[s / self.block_size] += 1;
            self.free += 1;
            if cfg!(debug_assertions) {
                let w = self.row_width;
                for plane in self.k.iter_mut().chain(self.v.iter_mut()) {
                    plane[s * w..(s + 1) * w].fill(f32::NAN);
                }
            }
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<(), PoolError> {
        if layer >= self.k.len() {
            return Err(PoolError::LayerOutOfRange {
                layer,
                num_layers: self.k.len(),
            });
        }
        Ok(())
    }

    /// Write `map.len()` rows of K and V for one layer.
    pub fn write_rows(
        &mut self,
        map: &SlotMap,
        layer: usize,
        k: &[f32],
        v: &[f32],
    ) -> Result<(), PoolError> {
        self.check_layer(layer)?;
        self.check_live(map)?;
        let w = self.row_width;
        let expected = map.len() * w;
        for got in [k.len(), v.len()] {
            if got != expected {
                return Err(PoolError::RowShape { got, expected });
            }
        }
        for (i, &s) in map.slots.iter().enumerate() {
            self.k[layer][s * w..(s + 1) * w].copy_from_slice(&k[i * w..(i + 1) * w]);
            self.v[layer][s * w..(s + 1) * w].copy_from_slice(&v[i * w..(i + 1) * w]);
        }
        Ok(())
    }

    /// Read back one layer's K and V rows in slot-map order.
    pub fn read_rows(
        &self,
        map: &SlotMap,
        layer: usize,
    ) -> Result<(Vec<f32>, Vec<f32>), PoolError> {
        self.check_layer(layer)?;
        self.check_live(map)?;
        let w = self.row_width;
        let mut k = Vec::with_capacity(map.len() * w);
        let mut v = Vec::with_capacity(map.len() * w);
        for &s in &map.slots {
            k.extend_from_slice(&self.k[layer][s * w..(s + 1) * w]);
            v.extend_from_slice(&self.v[layer][s * w..(s + 1) * w]);
        }
        Ok((k, v))
    }
}

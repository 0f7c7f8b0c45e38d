//! Little-endian wire format for [`BlockSparseDiff`].
//!
//! ```text
//! magic "TDDF" | version u16 | num_layers u16 | block_size u32 | num_heads u32
//! | head_dim u32 | total_tokens u32
//! per layer: changed_count u32 | shared_index_flag u8 | indices changed_count x u32
//!            [flag == 0: v_changed_count u32 | v indices v_changed_count x u32]
//!            K payload | V payload (raw f32, one padded block per index)
//! valid_len u32 (tokens in the final block)
//! ```

use super::{BlockSparseDiff, DiffError, LayerDiff};

pub const MAGIC: &[u8; 4] = b"TDDF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 4 + 4;
pub const TRAILER_LEN: usize = 4;

pub(super) fn metadata_len(diff: &BlockSparseDiff) -> usize {
    let per_layer: usize = diff
        .layers
        .iter()
        .map(|l| {
            let mut n = 4 + 1 + 4 * l.indices.len();
            if let Some(v) = &l.v_indices {
                n += 4 + 4 * v.len();
            }
            n
        })
        .sum();
    HEADER_LEN + per_layer + TRAILER_LEN
}

pub fn serialize_diff(diff: &BlockSparseDiff) -> Vec<u8> {
    let mut out = Vec::with_capacity(diff.serialized_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(diff.layers.len() as u16).to_le_bytes());
    for x in [
        diff.block_size,
        diff.num_heads,
        diff.head_dim,
        diff.total_tokens,
    ] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    for layer in &diff.layers {
        out.extend_from_slice(&(layer.indices.len() as u32).to_le_bytes());
        out.push(u8::from(layer.v_indices.is_none()));
        for i in &layer.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        if let Some(v) = &layer.v_indices {
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for i in v {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        for x in layer.k_payload.iter().chain(&layer.v_payload) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&(diff.valid_len() as u32).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DiffError> {
        if self.buf.len() - self.at < n {
            return Err(DiffError::MalformedDiff(format!(
                "truncated while reading {what} at byte {}",
                self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DiffError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DiffError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DiffError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn indices(&mut self, n: usize, num_blocks: usize) -> Result<Vec<u32>, DiffError> {
        let raw = self.take(4 * n, "block indices")?;
        let idx: Vec<u32> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DiffError::MalformedDiff(
                "block indices not strictly increasing".into(),
            ));
        }
        if idx.last().is_some_and(|&i| i as usize >= num_blocks) {
            return Err(DiffError::MalformedDiff("block index out of range".into()));
        }
        Ok(idx)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>, DiffError> {
        let raw = self.take(4 * n, "payload")?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn deserialize_diff(bytes: &[u8]) -> Result<BlockSparseDiff, DiffError> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(DiffError::MalformedDiff("bad magic".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(DiffError::MalformedDiff(format!(
            "unsupported version {version}"
        )));
    }
    let num_layers = r.u16("num_layers")? as usize;
    let block_size = r.u32("block_size")? as usize;
    let num_heads = r.u32("num_heads")? as usize;
    let head_dim = r.u32("head_dim")? as usize;
    let total_tokens = r.u32("total_tokens")? as usize;
    if block_size == 0 {
        return Err(DiffError::MalformedDiff("zero block size".into()));
    }
    let num_blocks = total_tokens.div_ceil(block_size);
    let block_payload = block_size
        .checked_mul(num_heads)
        .and_then(|x| x.checked_mul(head_dim))
        .ok_or_else(|| DiffError::MalformedDiff("geometry overflows".into()))?;

    let mut layers = Vec::with_capacity(num_layers.min(1 << 12));
    for _ in 0..num_layers {
        let count = r.u32("changed_count")? as usize;
        if count > num_blocks {
            return Err(DiffError::MalformedDiff(
                "more changed blocks than blocks".into(),
            ));
        }
        let shared = match r.u8("shared_index_flag")? {
            0 => false,
            1 => true,
            f => return Err(DiffError::MalformedDiff(format!("bad index flag {f}"))),
        };
        let indices = r.indices(count, num_blocks)?;
        let v_indices = if shared {
            None
        } else {
            let vc = r.u32("v_changed_count")? as usize;
            if vc > num_blocks {
                return Err(DiffError::MalformedDiff(
                    "more changed blocks than blocks".into(),
                ));
            }
            Some(r.indices(vc, num_blocks)?)
        };
        let v_count = v_indices.as_ref().map_or(count, Vec::len);
        let k_payload = r.floats(count * block_payload)?;
        let v_payload = r.floats(v_count * block_payload)?;
        layers.push(LayerDiff {
            indices,
            v_indices,
            k_payload,
            v_payload,
        });
    }
    let valid_len = r.u32("valid_len")? as usize;
    if r.at != bytes.len() {
        return Err(DiffError::MalformedDiff(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    let diff = BlockSparseDiff {
        num_heads,
        head_dim,
        block_size,
        total_tokens,
        layers,
    };
    if valid_len != diff.valid_len() {
        return Err(DiffError::MalformedDiff(format!(
            "final block valid length {valid_len}, expected {}",
            diff.valid_len()
        )));
    }
    Ok(diff)
}

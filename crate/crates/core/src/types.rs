//! Domain types shared across the engine: tokens, segments, prompt layouts,
//! rounds, layered KV tensors and block geometry.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Token identifier.
pub type TokenId = u32;

/// Errors raised by the shared types.
#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("position span lengths differ: {old} old vs {new} new")]
    SpanLength { old: usize, new: usize },
    #[error("positions must be strictly increasing")]
    NonIncreasingPositions,
    #[error("kv shape mismatch: {0}")]
    Shape(String),
}

/// Geometry of the toy transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: u32,
    pub rope_base: f64,
    pub weight_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 2,
            head_dim: 8,
            vocab_size: 1024,
            rope_base: 10000.0,
            weight_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TypeError> {
        let bad = |msg: &str| Err(TypeError::InvalidModelConfig(msg.to_string()));
        if self.num_layers == 0 {
            return bad("model.num_layers must be positive");
        }
        if self.num_heads == 0 {
            return bad("model.num_heads must be positive");
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return bad("model.head_dim must be a positive even integer");
        }
        if self.vocab_size < 2 {
            return bad("model.vocab_size must be at least 2");
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad("model.rope_base must be a positive real");
        }
        Ok(())
    }

    /// Width of one token row in a K or V plane (`num_heads * head_dim`).
    pub fn row_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// The reserved separator token (`vocab_size - 1`).
    pub fn separator(&self) -> TokenId {
        self.vocab_size - 1
    }

    /// Bytes of K plus V for one token across all layers.
    pub fn bytes_per_token(&self) -> u64 {
        (self.num_layers * self.row_width() * 2 * std::mem::size_of::<f32>()) as u64
    }
}

/// Block geometry of stored caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheBlockConfig {
    pub block_size: usize,
}

impl Default for CacheBlockConfig {
    fn default() -> Self {
        Self { block_size: 32 }
    }
}

impl CacheBlockConfig {
    pub fn num_blocks(&self, num_tokens: usize) -> usize {
        num_tokens.div_ceil(self.block_size)
    }

    /// Token range covered by block `b` of a `num_tokens`-long sequence.
    pub fn block_range(&self, b: usize, num_tokens: usize) -> Range<usize> {
        let start = b * self.block_size;
        start..(start + self.block_size).min(num_tokens)
    }
}

/// 128-bit content digest of a token sequence.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest([u8; 16]);

impl Digest {
    /// Truncated SHA-256 of the little-endian token-id byte stream.
    pub fn of_tokens(tokens: &[TokenId]) -> Self {
        let mut hasher = Sha256::new();
        for t in tokens {
            hasher.update(t.to_le_bytes());
        }
        let full = hasher.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&full[..16]);
        Digest(out)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    PrivateHistory,
    SharedOutput,
    RoundTask,
}

/// A separator-free logical block of a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    tokens: Vec<TokenId>,
    digest: Digest,
    kind: SegmentKind,
}

impl Segment {
    pub fn new(tokens: Vec<TokenId>, kind: SegmentKind) -> Result<Self, TypeError> {
        if tokens.is_empty() {
            return Err(TypeError::InvalidLayout("segment is empty".into()));
        }
        let digest = Digest::of_tokens(&tokens);
        Ok(Self {
            tokens,
            digest,
            kind,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn kind(&self) -> SegmentKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One agent's prompt as an ordered list of segments.
///
/// The first segment is the private history; shared outputs and an optional
/// round task follow. The model consumes the segment tokens back to back:
/// separators delimit segments on the wire but occupy no KV rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    agent_id: u64,
    segments: Vec<Segment>,
    total_len: usize,
}

impl PromptLayout {
    pub fn new(agent_id: u64, segments: Vec<Segment>) -> Result<Self, TypeError> {
        match segments.first() {
            None => return Err(TypeError::InvalidLayout("layout has no segments".into())),
            Some(s) if s.kind() != SegmentKind::PrivateHistory => {
                return Err(TypeError::InvalidLayout(
                    "first segment must be the private history".into(),
                ))
            }
            _ => {}
        }
        if segments[1..]
            .iter()
            .any(|s| s.kind() == SegmentKind::PrivateHistory)
        {
            return Err(TypeError::InvalidLayout(
                "exactly one private history segment is allowed".into(),
            ));
        }
        let total_len = segments.iter().map(Segment::len).sum();
        Ok(Self {
            agent_id,
            segments,
            total_len,
        })
    }

    pub fn agent_id(&self) -> u64 {
        self.agent_id
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Segment tokens back to back, without separators.
    pub fn model_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.total_len);
        for s in &self.segments {
            out.extend_from_slice(s.tokens());
        }
        out
    }

    /// Index range of each segment within [`model_tokens`](Self::model_tokens).
    pub fn segment_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.segments
            .iter()
            .map(|s| {
                let r = start..start + s.len();
                start = r.end;
                r
            })
            .collect()
    }
}

/// Join segment tokens with exactly one `sep` between neighbours.
pub fn flatten_prompt(layout: &PromptLayout, sep: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(layout.total_len() + layout.segments().len());
    for (i, s) in layout.segments().iter().enumerate() {
        if i > 0 {
            out.push(sep);
        }
        out.extend_from_slice(s.tokens());
    }
    out
}

/// One All-Gather round: the gathered outputs and every agent's prompt.
#[derive(Debug, Clone)]
pub struct Round {
    pub round_id: u64,
    pub shared_outputs: Vec<Segment>,
    pub prompts: Vec<PromptLayout>,
}

impl Round {
    pub fn num_agents(&self) -> usize {
        self.prompts.len()
    }
}

/// K and V planes of one layer, each `num_tokens * row_width` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Per-layer K/V tensors for a token sequence with absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredKv {
    num_heads: usize,
    head_dim: usize,
    layers: Vec<LayerKv>,
    positions: Vec<usize>,
}

fn strictly_increasing(p: &[usize]) -> bool {
    p.windows(2).all(|w| w[0] < w[1])
}

impl LayeredKv {
    pub fn from_layers(
        num_heads: usize,
        head_dim: usize,
        layers: Vec<LayerKv>,
        positions: Vec<usize>,
    ) -> Result<Self, TypeError> {
        if !strictly_increasing(&positions) {
            return Err(TypeError::NonIncreasingPositions);
        }
        let plane = positions.len() * num_heads * head_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.k.len() != plane || layer.v.len() != plane {
                return Err(TypeError::Shape(format!(
                    "layer {l}: planes of {}/{} values, expected {plane}",
                    layer.k.len(),
                    layer.v.len()
                )));
            }
        }
        Ok(Self {
            num_heads,
            head_dim,
            layers,
            positions,
        })
    }

    pub fn zeroed(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        positions: Vec<usize>,
    ) -> Result<Self, TypeError> {
        let plane = positions.len() * num_heads * head_dim;
        let layers = (0..num_layers)
            .map(|_| LayerKv {
                k: vec![0.0; plane],
                v: vec![0.0; plane],
            })
            .collect();
        Self::from_layers(num_heads, head_dim, layers, positions)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.positions.len()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn row_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerKv {
        &mut self.layers[l]
    }

    /// Dense size of K plus V over all layers, as 32-bit reals.
    pub fn dense_bytes(&self) -> u64 {
        (self.layers.len() * self.positions.len() * self.row_width() * 2 * 4) as u64
    }

    pub fn k_row(&self, layer: usize, i: usize) -> &[f32] {
        let w = self.row_width();
        &self.layers[layer].k[i * w..(i + 1) * w]
    }

    pub fn v_row(&self, layer: usize, i: usize) -> &[f32] {
        let w = self.row_width();
        &self.layers[layer].v[i * w..(i + 1) * w]
    }

    /// Overwrite row `i` of `layer` in both planes.
    pub fn set_row(&mut self, layer: usize, i: usize, k: &[f32], v: &[f32]) {
        let w = self.row_width();
        self.layers[layer].k[i * w..(i + 1) * w].copy_from_slice(k);
        self.layers[layer].v[i * w..(i + 1) * w].copy_from_slice(v);
    }

    /// Rows `range` of every layer.
    pub fn slice(&self, range: Range<usize>) -> LayeredKv {
        let w = self.row_width();
        let layers = self
            .layers
            .iter()
            .map(|l| LayerKv {
                k: l.k[range.start * w..range.end * w].to_vec(),
                v: l.v[range.start * w..range.end * w].to_vec(),
            })
            .collect();
        LayeredKv {
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            layers,
            positions: self.positions[range].to_vec(),
        }
    }

    /// Append `n` zeroed rows at the given (increasing) positions.
    pub fn extended_with_zeros(&self, positions: &[usize]) -> Result<LayeredKv, TypeError> {
        let w = self.row_width();
        let mut all = self.positions.clone();
        all.extend_from_slice(positions);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut k = l.k.clone();
                let mut v = l.v.clone();
                k.resize(k.len() + positions.len() * w, 0.0);
                v.resize(v.len() + positions.len() * w, 0.0);
                LayerKv { k, v }
            })
            .collect();
        Self::from_layers(self.num_heads, self.head_dim, layers, all)
    }

    fn same_shape(&self, other: &LayeredKv) -> bool {
        self.num_heads == other.num_heads
            && self.head_dim == other.head_dim
            && self.layers.len() == other.layers.len()
            && self.positions.len() == other.positions.len()
    }

    /// Absolute-error statistics of `self` against a reference of equal shape.
    pub fn error_against(&self, reference: &LayeredKv) -> Result<KvError, TypeError> {
        if !self.same_shape(reference) {
            return Err(TypeError::Shape("error_against: shapes differ".into()));
        }
        let mut e = KvError::default();
        for (a, b) in self.layers.iter().zip(&reference.layers) {
            for (x, y) in a.k.iter().zip(&b.k) {
                let d = f64::from((x - y).abs());
                e.sum_k += d;
                e.max_k = e.max_k.max(d);
            }
            for (x, y) in a.v.iter().zip(&b.v) {
                let d = f64::from((x - y).abs());
                e.sum_v += d;
                e.max_v = e.max_v.max(d);
            }
            e.count += a.k.len() as u64;
        }
        Ok(e)
    }

    /// Largest absolute element difference at row `i` over all layers and both planes.
    pub fn row_max_diff(&self, other: &LayeredKv, i: usize) -> f32 {
        let mut m = 0.0f32;
        for l in 0..self.layers.len() {
            for (x, y) in self.k_row(l, i).iter().zip(other.k_row(l, i)) {
                m = m.max((x - y).abs());
            }
            for (x, y) in self.v_row(l, i).iter().zip(other.v_row(l, i)) {
                m = m.max((x - y).abs());
            }
        }
        m
    }

    /// Bitwise equality of every element and position.
    pub fn bit_eq(&self, other: &LayeredKv) -> bool {
        self.same_shape(other)
            && self.positions == other.positions
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.k.iter()
                    .zip(&b.k)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.v
                        .iter()
                        .zip(&b.v)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Accumulated absolute error between two KV tensors.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KvError {
    pub sum_k: f64,
    pub sum_v: f64,
    pub max_k: f64,
    pub max_v: f64,
    /// Elements per plane.
    pub count: u64,
}

impl KvError {
    pub fn merge(&mut self, other: &KvError) {
        self.sum_k += other.sum_k;
        self.sum_v += other.sum_v;
        self.max_k = self.max_k.max(other.max_k);
        self.max_v = self.max_v.max(other.max_v);
        self.count += other.count;
    }

    pub fn mean_k(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_k / self.count as f64
        }
    }

    pub fn mean_v(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_v / self.count as f64
        }
    }
}

/// Old and new absolute positions for a run of tokens.
///
/// Lengths must match. Monotonicity is not required: a batched rotation
/// concatenates spans of several segments or requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionSpan {
    old: Vec<usize>,
    new: Vec<usize>,
}

impl PositionSpan {
    pub fn new(old: Vec<usize>, new: Vec<usize>) -> Result<Self, TypeError> {
        if old.len() != new.len() {
            return Err(TypeError::SpanLength {
                old: old.len(),
                new: new.len(),
            });
        }
        Ok(Self { old, new })
    }

    pub fn identity(positions: &[usize]) -> Self {
        Self {
            old: positions.to_vec(),
            new: positions.to_vec(),
        }
    }

    pub fn old_positions(&self) -> &[usize] {
        &self.old
    }

    pub fn new_positions(&self) -> &[usize] {
        &self.new
    }

    pub fn len(&self) -> usize {
        self.old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old.is_empty()
    }

    pub fn deltas(&self) -> Vec<i64> {
        self.old
            .iter()
            .zip(&self.new)
            .map(|(&o, &n)| n as i64 - o as i64)
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.old == self.new
    }

    /// Concatenate several spans (not necessarily monotone).
    pub fn concat<'a>(spans: impl IntoIterator<Item = &'a PositionSpan>) -> Self {
        let mut old = Vec::new();
        let mut new = Vec::new();
        for s in spans {
            old.extend_from_slice(&s.old);
            new.extend_from_slice(&s.new);
        }
        Self { old, new }
    }
}

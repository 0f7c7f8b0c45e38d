//! Deterministic toy transformer used as the ground-truth KV producer.
//!
//! Architecture: token embedding, then per layer a RoPE'd causal softmax
//! attention followed by a linear mix added back into the residual stream.
//! Every weight is uniform in `[-0.1, 0.1]`, drawn from a SplitMix64 stream
//! seeded with `weight_seed`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use thiserror::Error;

use crate::types::{LayerKv, LayeredKv, ModelConfig, PositionSpan, TokenId, TypeError};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("position index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("row {0} is neither recomputed nor covered by the context")]
    MissingContext(usize),
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// Rotary position embedding over interleaved coordinate pairs `(2j, 2j+1)`.
#[derive(Debug, Clone)]
pub struct Rope {
    head_dim: usize,
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(head_dim: usize, base: f64) -> Self {
        let inv_freq = (0..head_dim / 2)
            .map(|j| base.powf(-2.0 * j as f64 / head_dim as f64))
            .collect();
        Self { head_dim, inv_freq }
    }

    fn rotate_row(&self, row: &mut [f32], pos: f64) {
        for head in row.chunks_exact_mut(self.head_dim) {
            for (j, &f) in self.inv_freq.iter().enumerate() {
                let angle = pos * f;
                let (s, c) = angle.sin_cos();
                let (s, c) = (s as f32, c as f32);
                let x0 = head[2 * j];
                let x1 = head[2 * j + 1];
                head[2 * j] = x0 * c - x1 * s;
                head[2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }

    fn check_rows(&self, data: &[f32], rows: usize) -> Result<usize, ModelError> {
        if rows == 0 {
            if data.is_empty() {
                return Ok(0);
            }
            return Err(ModelError::Shape("rows given for zero positions".into()));
        }
        if !data.len().is_multiple_of(rows) || !(data.len() / rows).is_multiple_of(self.head_dim) {
            return Err(ModelError::Shape(format!(
                "{} values do not split into {rows} rows of whole heads",
                data.len()
            )));
        }
        Ok(data.len() / rows)
    }

    /// Rotate each row in place to its absolute position.
    pub fn apply_in_place(&self, data: &mut [f32], positions: &[usize]) -> Result<(), ModelError> {
        let width = self.check_rows(data, positions.len())?;
        if width == 0 {
            return Ok(());
        }
        for (row, &p) in data.chunks_exact_mut(width).zip(positions) {
            if p != 0 {
                self.rotate_row(row, p as f64);
            }
        }
        Ok(())
    }

    /// Rotate each row in place by a signed position delta. Zero deltas are exact no-ops.
    pub fn shift_in_place(&self, data: &mut [f32], deltas: &[i64]) -> Result<(), ModelError> {
        let width = self.check_rows(data, deltas.len())?;
        if width == 0 {
            return Ok(());
        }
        for (row, &d) in data.chunks_exact_mut(width).zip(deltas) {
            if d != 0 {
                self.rotate_row(row, d as f64);
            }
        }
        Ok(())
    }

    /// Re-encode rows computed at `span.old` as if computed at `span.new`.
    pub fn recover_in_place(
        &self,
        span: &PositionSpan,
        data: &mut [f32],
    ) -> Result<(), ModelError> {
        if span.is_identity() {
            self.check_rows(data, span.len())?;
            return Ok(());
        }
        self.shift_in_place(data, &span.deltas())
    }
}

/// Functional form of [`Rope::apply_in_place`].
pub fn rope_apply(rope: &Rope, k: &[f32], positions: &[usize]) -> Result<Vec<f32>, ModelError> {
    let mut out = k.to_vec();
    rope.apply_in_place(&mut out, positions)?;
    Ok(out)
}

/// Functional form of [`Rope::recover_in_place`].
pub fn rope_recover(rope: &Rope, span: &PositionSpan, k: &[f32]) -> Result<Vec<f32>, ModelError> {
    let mut out = k.to_vec();
    rope.recover_in_place(span, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wmix: Vec<f32>,
}

/// Seeded weights of the toy transformer. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    config: ModelConfig,
    embedding: Vec<f32>,
    layers: Vec<LayerWeights>,
    rope: Rope,
}

/// `out = row * w` for a `d x d` row-major matrix.
fn project(row: &[f32], w: &[f32], out: &mut [f32]) {
    let d = out.len();
    out.fill(0.0);
    for (r, &x) in row.iter().enumerate() {
        let wr = &w[r * d..(r + 1) * d];
        for (o, &wv) in out.iter_mut().zip(wr) {
            *o += x * wv;
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ModelWeights {
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.row_width();
        let mut rng = SplitMix64::seed_from_u64(config.weight_seed);
        let dist = Uniform::new_inclusive(-0.1f32, 0.1f32).expect("valid range");
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| dist.sample(&mut rng)).collect() };
        let embedding = draw(config.vocab_size as usize * d);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: draw(d * d),
                wk: draw(d * d),
                wv: draw(d * d),
                wmix: draw(d * d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            rope: Rope::new(config.head_dim, config.rope_base),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rope(&self) -> &Rope {
        &self.rope
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyTokens);
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Layerwise forward pass that materializes K/V only at `fix`.
    ///
    /// Rows outside `fix` are read from `context`. Returns one [`LayerKv`]
    /// per executed layer holding the fixed rows in `fix` order.
    fn forward(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        fix: &[usize],
        context: Option<&LayeredKv>,
        num_layers: usize,
    ) -> Result<Vec<LayerKv>, ModelError> {
        let n = tokens.len();
        let d = self.config.row_width();
        let hd = self.config.head_dim;
        let heads = self.config.num_heads;
        if positions.len() != n {
            return Err(ModelError::Shape(format!(
                "{n} tokens but {} positions",
                positions.len()
            )));
        }
        if let Some(ctx) = context {
            if ctx.num_tokens() != n || ctx.row_width() != d || ctx.num_layers() < num_layers {
                return Err(ModelError::Shape(
                    "context does not cover the sequence".into(),
                ));
            }
        }
        let mut slot = vec![usize::MAX; n];
        for (a, &i) in fix.iter().enumerate() {
            if i >= n {
                return Err(ModelError::IndexOutOfRange { index: i, len: n });
            }
            if a > 0 && fix[a - 1] >= i {
                return Err(ModelError::Shape(
                    "fix set must be strictly increasing".into(),
                ));
            }
            slot[i] = a;
        }
        if context.is_none() {
            if let Some(&last) = fix.last() {
                if let Some(j) = (0..=last).find(|&j| slot[j] == usize::MAX) {
                    return Err(ModelError::MissingContext(j));
                }
            }
        }

        let nf = fix.len();
        let mut hidden = vec![0.0f32; nf * d];
        for (a, &i) in fix.iter().enumerate() {
            let t = tokens[i] as usize;
            hidden[a * d..(a + 1) * d].copy_from_slice(&self.embedding[t * d..(t + 1) * d]);
        }
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out_layers = Vec::with_capacity(num_layers);
        let mut scores = vec![0.0f32; n];
        let mut attn = vec![0.0f32; d];
        let mut mixed = vec![0.0f32; d];

        for (l, w) in self.layers.iter().take(num_layers).enumerate() {
            let mut q = vec![0.0f32; nf * d];
            let mut k = vec![0.0f32; nf * d];
            let mut v = vec![0.0f32; nf * d];
            for a in 0..nf {
                let h = &hidden[a * d..(a + 1) * d];
                project(h, &w.wq, &mut q[a * d..(a + 1) * d]);
                project(h, &w.wk, &mut k[a * d..(a + 1) * d]);
                project(h, &w.wv, &mut v[a * d..(a + 1) * d]);
            }
            let fix_pos: Vec<usize> = fix.iter().map(|&i| positions[i]).collect();
            self.rope.apply_in_place(&mut q, &fix_pos)?;
            self.rope.apply_in_place(&mut k, &fix_pos)?;

            let key_row = |j: usize| -> &[f32] {
                match slot[j] {
                    usize::MAX => context.expect("checked above").k_row(l, j),
                    s => &k[s * d..(s + 1) * d],
                }
            };
            let value_row = |j: usize| -> &[f32] {
                match slot[j] {
                    usize::MAX => context.expect("checked above").v_row(l, j),
                    s => &v[s * d..(s + 1) * d],
                }
            };

            for (a, &i) in fix.iter().enumerate() {
                let qa = &q[a * d..(a + 1) * d];
                for head in 0..heads {
                    let hs = head * hd..(head + 1) * hd;
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let s = dot(&qa[hs.clone()], &key_row(j)[hs.clone()]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0f32;
                    for s in &mut scores[..=i] {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let out = &mut attn[hs.clone()];
                    out.fill(0.0);
                    for j in 0..=i {
                        let p = scores[j] / sum;
                        for (o, &x) in out.iter_mut().zip(&value_row(j)[hs.clone()]) {
                            *o += p * x;
                        }
                    }
                }
                project(&attn, &w.wmix, &mut mixed);
                for (h, m) in hidden[a * d..(a + 1) * d].iter_mut().zip(&mixed) {
                    *h += m;
                }
            }
            out_layers.push(LayerKv { k, v });
        }
        Ok(out_layers)
    }

    /// Ground-truth prefill at positions `start_pos, start_pos + 1, ...`.
    pub fn full_prefill(
        &self,
        tokens: &[TokenId],
        start_pos: usize,
    ) -> Result<LayeredKv, ModelError> {
        let positions = (start_pos..start_pos + tokens.len()).collect();
        self.prefill_at(tokens, positions)
    }

    /// Ground-truth prefill at explicit (strictly increasing) positions.
    pub fn prefill_at(
        &self,
        tokens: &[TokenId],
        positions: Vec<usize>,
    ) -> Result<LayeredKv, ModelError> {
        self.check_tokens(tokens)?;
        let fix: Vec<usize> = (0..tokens.len()).collect();
        let layers = self.forward(tokens, &positions, &fix, None, self.config.num_layers)?;
        Ok(LayeredKv::from_layers(
            self.config.num_heads,
            self.config.head_dim,
            layers,
            positions,
        )?)
    }

    /// Fresh K plane of one layer for the whole sequence, computed by a full
    /// pass through layers `0..=layer`.
    pub fn fresh_keys_at_layer(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        layer: usize,
    ) -> Result<Vec<f32>, ModelError> {
        self.check_tokens(tokens)?;
        if layer >= self.config.num_layers {
            return Err(ModelError::IndexOutOfRange {
                index: layer,
                len: self.config.num_layers,
            });
        }
        let fix: Vec<usize> = (0..tokens.len()).collect();
        let mut layers = self.forward(tokens, positions, &fix, None, layer + 1)?;
        Ok(layers.pop().expect("at least one layer").k)
    }

    /// Selective recomputation: fresh K/V rows at `positions_to_fix` (sorted,
    /// unique), attending over `context_kv` for every other row.
    pub fn recompute_positions(
        &self,
        tokens: &[TokenId],
        positions_to_fix: &[usize],
        context_kv: &LayeredKv,
    ) -> Result<Vec<LayerKv>, ModelError> {
        if positions_to_fix.is_empty() {
            return Ok(Vec::new());
        }
        self.check_tokens(tokens)?;
        if context_kv.num_layers() != self.config.num_layers {
            return Err(ModelError::Shape(
                "context layer count differs from model".into(),
            ));
        }
        self.forward(
            tokens,
            context_kv.positions(),
            positions_to_fix,
            Some(context_kv),
            self.config.num_layers,
        )
    }

    /// Decode-style extension: K/V of `new_tokens` appended after `prefix`,
    /// attending over the prefix rows as given.
    pub fn extend(
        &self,
        prefix_tokens: &[TokenId],
        prefix: &LayeredKv,
        new_tokens: &[TokenId],
    ) -> Result<LayeredKv, ModelError> {
        if prefix_tokens.len() != prefix.num_tokens() {
            return Err(ModelError::Shape(
                "prefix tokens and kv differ in length".into(),
            ));
        }
        let start = prefix.positions().last().map_or(0, |p| p + 1);
        let new_positions: Vec<usize> = (start..start + new_tokens.len()).collect();
        let mut kv = prefix.extended_with_zeros(&new_positions)?;
        let mut tokens = prefix_tokens.to_vec();
        tokens.extend_from_slice(new_tokens);
        let fix: Vec<usize> = (prefix_tokens.len()..tokens.len()).collect();
        let rows = self.recompute_positions(&tokens, &fix, &kv)?;
        overwrite_rows(&mut kv, &fix, &rows);
        Ok(kv)
    }
}

/// Write recomputed rows (as returned by [`ModelWeights::recompute_positions`]) into `kv`.
pub fn overwrite_rows(kv: &mut LayeredKv, fix: &[usize], rows: &[LayerKv]) {
    let w = kv.row_width();
    for (l, layer) in rows.iter().enumerate() {
        for (a, &i) in fix.iter().enumerate() {
            kv.set_row(
                l,
                i,
                &layer.k[a * w..(a + 1) * w],
                &layer.v[a * w..(a + 1) * w],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights() -> ModelWeights {
        ModelWeights::new(&ModelConfig::default()).unwrap()
    }

    fn tokens(n: usize, salt: u32) -> Vec<u32> {
        (0..n as u32)
            .map(|i| (i * 37 + salt * 101 + 5) % 1000)
            .collect()
    }

    fn max_abs(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn weights_are_deterministic() {
        let a = weights();
        let b = weights();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.layers[3].wmix, b.layers[3].wmix);
        assert!(a.embedding.iter().all(|x| x.abs() <= 0.1));
    }

    #[test]
    fn prefill_is_bit_deterministic() {
        let w = weights();
        let t = tokens(40, 1);
        assert!(w
            .full_prefill(&t, 3)
            .unwrap()
            .bit_eq(&w.full_prefill(&t, 3).unwrap()));
        assert_eq!(w.full_prefill(&[], 0).unwrap_err(), ModelError::EmptyTokens);
    }

    #[test]
    fn layer0_values_are_position_free() {
        let w = weights();
        let t = tokens(20, 2);
        let a = w.full_prefill(&t, 0).unwrap();
        let b = w.full_prefill(&t, 7).unwrap();
        assert_eq!(a.layer(0).v, b.layer(0).v);
        assert_ne!(a.layer(0).k, b.layer(0).k);
        let rotated = rope_recover(
            w.rope(),
            &PositionSpan::new(a.positions().to_vec(), b.positions().to_vec()).unwrap(),
            &a.layer(0).k,
        )
        .unwrap();
        assert!(max_abs(&rotated, &b.layer(0).k) < 1e-6);
    }

    #[test]
    fn deeper_layers_depend_on_context() {
        let w = weights();
        let shared = tokens(16, 3);
        let mut x = tokens(10, 4);
        x.extend_from_slice(&shared);
        let mut y = tokens(10, 5);
        y.extend_from_slice(&shared);
        let a = w.full_prefill(&x, 0).unwrap();
        let b = w.full_prefill(&y, 0).unwrap();
        let w_ = a.row_width();
        for l in 1..4 {
            assert!(max_abs(&a.layer(l).k[10 * w_..], &b.layer(l).k[10 * w_..]) > 1e-6);
        }
        // Layer-0 K over the shared tokens is context independent.
        assert_eq!(a.layer(0).k[10 * w_..], b.layer(0).k[10 * w_..]);
    }

    #[test]
    fn rope_identities() {
        let rope = Rope::new(8, 10000.0);
        let k: Vec<f32> = (0..48).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(rope_apply(&rope, &k, &[0; 3]).unwrap(), k);
        let p = [3usize, 50, 999];
        let q = [11usize, 2, 4000];
        let twice = rope_apply(&rope, &rope_apply(&rope, &k, &p).unwrap(), &q).unwrap();
        let pq: Vec<usize> = p.iter().zip(&q).map(|(a, b)| a + b).collect();
        assert!(max_abs(&twice, &rope_apply(&rope, &k, &pq).unwrap()) < 1e-6);
        let rotated = rope_apply(&rope, &k, &p).unwrap();
        for (a, b) in k.chunks(2).zip(rotated.chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_recover_composes_and_zero_is_identity() {
        let rope = Rope::new(8, 10000.0);
        let k: Vec<f32> = (0..32).map(|i| (i as f32 * 0.11).cos()).collect();
        let p = vec![4usize, 9, 10, 100];
        let q = vec![0usize, 20, 3, 101];
        let span = PositionSpan::new(p.clone(), p.clone()).unwrap();
        assert_eq!(rope_recover(&rope, &span, &k).unwrap(), k);
        let at_p = rope_recover(
            &rope,
            &PositionSpan::new(vec![0; 4], p.clone()).unwrap(),
            &k,
        )
        .unwrap();
        let at_q = rope_recover(&rope, &PositionSpan::new(p, q.clone()).unwrap(), &at_p).unwrap();
        assert!(max_abs(&at_q, &rope_apply(&rope, &k, &q).unwrap()) < 1e-6);
        let bad = PositionSpan::new(vec![1, 2, 3], vec![3, 4, 5]).unwrap();
        assert!(rope_recover(&rope, &bad, &k).is_err());
    }

    #[test]
    fn recompute_everything_is_full_prefill() {
        let w = weights();
        let t = tokens(30, 6);
        let full = w.full_prefill(&t, 0).unwrap();
        let ctx = LayeredKv::zeroed(4, 2, 8, (0..30).collect()).unwrap();
        let all: Vec<usize> = (0..30).collect();
        let rows = w.recompute_positions(&t, &all, &ctx).unwrap();
        for l in 0..4 {
            assert_eq!(rows[l], full.layers()[l]);
        }
        assert!(w.recompute_positions(&t, &[], &ctx).unwrap().is_empty());
        assert!(matches!(
            w.recompute_positions(&t, &[30], &ctx),
            Err(ModelError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn extend_matches_prefill_over_exact_prefix() {
        let w = weights();
        let t = tokens(24, 7);
        let full = w.full_prefill(&t, 0).unwrap();
        let prefix = w.full_prefill(&t[..16], 0).unwrap();
        let ext = w.extend(&t[..16], &prefix, &t[16..]).unwrap();
        assert!(ext.bit_eq(&full));
    }

    #[test]
    fn fresh_keys_match_prefill_layer() {
        let w = weights();
        let t = tokens(12, 8);
        let full = w.full_prefill(&t, 5).unwrap();
        let k1 = w.fresh_keys_at_layer(&t, full.positions(), 1).unwrap();
        assert_eq!(k1, full.layer(1).k);
    }
}

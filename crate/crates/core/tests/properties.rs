//! Randomized invariants across the public API.

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use roundkv::collective::{collective_recover, form_groups, select_master, GroupCandidate};
use roundkv::diffstore::{deserialize_diff, diff_decode_dense, encode_diff, serialize_diff};
use roundkv::ledger::CostLedger;
use roundkv::paged_pool::{disjoint, PagedPool, SlotMap};
use roundkv::pic::{key_diff, recover_request, select_important, PicConfig};
use roundkv::segment_index::{split_segments, KvRef, SegmentCacheEntry, SegmentIndex};
use roundkv::toymodel::{rope_apply, rope_recover, ModelWeights, Rope};
use roundkv::types::{
    flatten_prompt, CacheBlockConfig, Digest, LayerKv, LayeredKv, ModelConfig, PositionSpan,
    PromptLayout, Segment, SegmentKind, TokenId,
};

const SEP: TokenId = 1023;

fn segments_strategy() -> impl Strategy<Value = Vec<Vec<TokenId>>> {
    prop::collection::vec(prop::collection::vec(0u32..SEP, 1..20), 1..8)
}

fn layout_from(runs: &[Vec<TokenId>]) -> PromptLayout {
    let segs = runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let kind = if i == 0 {
                SegmentKind::PrivateHistory
            } else {
                SegmentKind::SharedOutput
            };
            Segment::new(r.clone(), kind).unwrap()
        })
        .collect();
    PromptLayout::new(0, segs).unwrap()
}

fn random_kv(rng: &mut SplitMix64, layers: usize, heads: usize, hd: usize, t: usize) -> LayeredKv {
    let plane = t * heads * hd;
    let ls = (0..layers)
        .map(|_| LayerKv {
            k: (0..plane).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            v: (0..plane).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect();
    LayeredKv::from_layers(heads, hd, ls, (0..t).collect()).unwrap()
}

/// Two prompts sharing `shared` after different histories, with the shared
/// block cached from a third context.
fn reuse_scenario(
    seed: u64,
    h1: usize,
    h2: usize,
) -> (ModelWeights, SegmentIndex, Vec<PromptLayout>) {
    let cfg = ModelConfig::default();
    let w = ModelWeights::new(&cfg).unwrap();
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut toks =
        |n: usize| -> Vec<TokenId> { (0..n).map(|_| rng.random_range(0..SEP)).collect() };
    let origin = toks(7);
    let shared = toks(24);
    let other = toks(10);
    let hists = [toks(h1), toks(h2)];
    let task = toks(4);
    let mut first = origin.clone();
    first.extend(&shared);
    let index = SegmentIndex::new();
    index.insert(
        SegmentCacheEntry::new(
            Digest::of_tokens(&shared),
            KvRef::Dense(Arc::new(w.full_prefill(&first, 0).unwrap())),
            7..31,
            Digest::of_tokens(&origin),
        )
        .unwrap(),
    );
    let layouts = hists
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let mut segs = vec![Segment::new(h.clone(), SegmentKind::PrivateHistory).unwrap()];
            let s = Segment::new(shared.clone(), SegmentKind::SharedOutput).unwrap();
            let o = Segment::new(other.clone(), SegmentKind::SharedOutput).unwrap();
            if i == 0 {
                segs.extend([s, o]);
            } else {
                segs.extend([o, s]);
            }
            segs.push(Segment::new(task.clone(), SegmentKind::RoundTask).unwrap());
            PromptLayout::new(i as u64, segs).unwrap()
        })
        .collect();
    (w, index, layouts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_then_split_round_trips(runs in segments_strategy()) {
        let layout = layout_from(&runs);
        let stream = flatten_prompt(&layout, SEP);
        let back = split_segments(&stream, SEP).unwrap();
        prop_assert_eq!(back.len(), runs.len());
        for (a, b) in back.iter().zip(layout.segments()) {
            prop_assert_eq!(a.tokens(), b.tokens());
            prop_assert_eq!(a.digest(), b.digest());
            prop_assert_eq!(a.kind(), b.kind());
        }
        prop_assert_eq!(layout.model_tokens().len(), layout.total_len());
        prop_assert!(!layout.model_tokens().contains(&SEP));
    }

    #[test]
    fn digest_tracks_content(a in prop::collection::vec(0u32..SEP, 1..30), b in prop::collection::vec(0u32..SEP, 1..30)) {
        prop_assert_eq!(Digest::of_tokens(&a) == Digest::of_tokens(&b), a == b);
    }

    #[test]
    fn diff_round_trip_is_bit_exact(seed in any::<u64>(), t in 1usize..120, bs in 1usize..40, p in 0.0f64..1.0) {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let master = random_kv(&mut rng, 2, 2, 4, t);
        let mut mirror = master.clone();
        for l in 0..2 {
            for x in mirror.layer_mut(l).v.iter_mut() {
                if rng.random_bool(p * 0.1) {
                    *x = rng.random_range(-3.0..3.0);
                }
            }
        }
        let blocks = CacheBlockConfig { block_size: bs };
        let diff = encode_diff(&master, &mirror, blocks, None).unwrap();
        let bytes = serialize_diff(&diff);
        prop_assert_eq!(bytes.len(), diff.serialized_len());
        prop_assert_eq!(diff.serialized_len(), diff.metadata_bytes() + diff.payload_bytes());
        let back = deserialize_diff(&bytes).unwrap();
        prop_assert_eq!(&back, &diff);
        prop_assert!(diff_decode_dense(&master, &back).unwrap().bit_eq(&mirror));
        if bytes.len() > 1 {
            let cut = rng.random_range(0..bytes.len());
            prop_assert!(deserialize_diff(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn rope_shift_composes(seed in any::<u64>(), rows in 1usize..8, shift in -300i64..300) {
        let rope = Rope::new(8, 10000.0);
        let mut rng = SplitMix64::seed_from_u64(seed);
        let k: Vec<f32> = (0..rows * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let old: Vec<usize> = (0..rows).map(|i| 300 + 2 * i).collect();
        let new: Vec<usize> = old.iter().map(|&p| (p as i64 + shift) as usize).collect();
        let at_old = rope_apply(&rope, &k, &old).unwrap();
        let moved = rope_recover(&rope, &PositionSpan::new(old, new.clone()).unwrap(), &at_old).unwrap();
        let direct = rope_apply(&rope, &k, &new).unwrap();
        for (a, b) in moved.iter().zip(&direct) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn selection_budget_law(mags in prop::collection::vec(prop_oneof![Just(0.0f64), 0.0f64..5.0], 0..60), r in 0.0f64..=1.0) {
        let idx: Vec<usize> = (0..mags.len()).map(|i| 3 * i + 1).collect();
        let cfg = PicConfig { recompute_fraction: r, check_layer: 1 };
        let budget = cfg.budget(mags.len());
        prop_assert!(budget as f64 >= r * mags.len() as f64 - 1e-6);
        let picked = select_important(&mags, &idx, budget);
        let nonzero = mags.iter().filter(|&&m| m > 0.0).count();
        prop_assert_eq!(picked.len(), budget.min(nonzero));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        let threshold = picked
            .iter()
            .map(|p| mags[(p - 1) / 3])
            .fold(f64::INFINITY, f64::min);
        for (n, &m) in mags.iter().enumerate() {
            if !picked.contains(&idx[n]) {
                prop_assert!(m <= threshold || m == 0.0);
            }
        }
    }

    #[test]
    fn key_diff_is_rowwise_norm(seed in any::<u64>(), rows in 0usize..10) {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let a: Vec<f32> = (0..rows * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..rows * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = key_diff(&a, &b, 6).unwrap();
        prop_assert_eq!(d.len(), rows);
        for r in 0..rows {
            let want: f64 = (0..6).map(|c| { let x = f64::from(a[r*6+c]) - f64::from(b[r*6+c]); x * x }).sum::<f64>().sqrt();
            prop_assert!((d[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_conservation(ops in prop::collection::vec((any::<bool>(), 1usize..90, any::<prop::sample::Index>()), 1..200)) {
        let mut pool = PagedPool::new(512, 16, 1, 2);
        let mut live: Vec<SlotMap> = Vec::new();
        for (i, (free, n, pick)) in ops.into_iter().enumerate() {
            if free && !live.is_empty() {
                let m = live.swap_remove(pick.index(live.len()));
                pool.free(m).unwrap();
            } else if let Ok(m) = pool.allocate(i as u64, n) {
                prop_assert_eq!(m.len(), n);
                live.push(m);
            }
            prop_assert_eq!(pool.allocated(), live.iter().map(SlotMap::len).sum::<usize>());
            prop_assert!(disjoint(&live));
        }
    }

    #[test]
    fn master_is_never_beaten(scores in prop::collection::btree_map(0u64..50, 0.0f64..10.0, 1..12)) {
        let m = select_master(&scores).unwrap();
        prop_assert!(scores.values().all(|&s| s >= scores[&m]));
        prop_assert!(scores.iter().all(|(&id, &s)| s > scores[&m] || id >= m));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn private_rows_exact_and_error_shrinks(seed in any::<u64>(), h1 in 4usize..30, h2 in 4usize..30) {
        let (w, index, layouts) = reuse_scenario(seed, h1, h2);
        let layout = &layouts[1];
        let oracle = w.full_prefill(&layout.model_tokens(), 0).unwrap();
        let mut errs = Vec::new();
        for r in [0.0, 0.15, 1.0] {
            let cfg = PicConfig { recompute_fraction: r, check_layer: 1 };
            let mut ledger = CostLedger::new(4);
            let res = recover_request(&w, layout, &index, &cfg, &mut ledger).unwrap();
            prop_assert!(res.deviation_score >= 0.0);
            let shared = res.reused_positions.len();
            prop_assert!(res.important_positions.len() <= cfg.budget(shared));
            prop_assert!(res.important_positions.iter().all(|p| res.reused_positions.contains(p)));
            for i in 0..h2 {
                prop_assert!(res.kv.row_max_diff(&oracle, i) <= 1e-6);
            }
            errs.push(res.kv.error_against(&oracle).unwrap().mean_k());
        }
        prop_assert!(errs[1] < errs[0] || errs[0] == 0.0);
        prop_assert!(errs[2] <= 1e-6);
    }

    #[test]
    fn group_of_one_matches_serial(seed in any::<u64>(), h in 4usize..30) {
        let (w, index, layouts) = reuse_scenario(seed, h, h);
        let cfg = PicConfig::default();
        let mut pool = PagedPool::new(256, 16, 1, 1);
        let cands: Vec<GroupCandidate> = layouts
            .iter()
            .map(|l| GroupCandidate::probe(l.clone(), &index, Some(pool.allocate(l.agent_id(), l.total_len()).unwrap())))
            .collect();
        let grouping = form_groups(0, cands);
        prop_assert_eq!(grouping.groups.len(), 1);
        let mut group = grouping.groups[0].clone();
        let mut serial_ledger = CostLedger::new(4);
        let serial: Vec<_> = layouts
            .iter()
            .map(|l| recover_request(&w, l, &index, &cfg, &mut serial_ledger).unwrap())
            .collect();
        let mut ledger = CostLedger::new(4);
        let (results, plan) = collective_recover(&w, &group, &index, &cfg, &mut ledger).unwrap();
        prop_assert_eq!(ledger.rope_calls_per_layer.clone(), vec![1; 4]);
        prop_assert_eq!(serial_ledger.rope_calls_per_layer.clone(), vec![2; 4]);
        prop_assert_eq!(ledger.recomputed_tokens, serial_ledger.recomputed_tokens);
        for (a, b) in results.iter().zip(&serial) {
            prop_assert!(a.kv.bit_eq(&b.kv));
            prop_assert_eq!(&a.important_positions, &b.important_positions);
        }
        prop_assert!(plan.deviation_scores.values().all(|&s| s >= plan.deviation_scores[&plan.master_id]));
        // Hint soundness: rows outside the hints are equal to the master's.
        let master = results.iter().find(|r| r.request_id == plan.master_id).unwrap();
        for r in results.iter().filter(|r| r.request_id != plan.master_id) {
            let hints: BTreeSet<usize> = plan.mirror_diff_hints[&r.request_id].iter().copied().collect();
            for i in 0..r.kv.num_tokens() {
                if !hints.contains(&i) {
                    prop_assert!(r.kv.row_max_diff(&master.kv, i) <= 1e-6);
                }
            }
        }

        // Degenerate group: one member, same as the serial path.
        group.layouts.truncate(1);
        group.offsets.truncate(1);
        group.slot_maps.truncate(1);
        let mut one = CostLedger::new(4);
        let (res, _) = collective_recover(&w, &group, &index, &cfg, &mut one).unwrap();
        let mut single = CostLedger::new(4);
        let alone = recover_request(&w, &layouts[0], &index, &cfg, &mut single).unwrap();
        prop_assert!(res[0].kv.bit_eq(&alone.kv));
        prop_assert_eq!(one, single);
    }
}

//! Invariant suite behind `roundkv verify`.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::config::{PathLabel, WorkloadSpec};
use super::trace::{run_trace_paths, TraceError, TraceOutput};
use crate::diffstore::{
    deserialize_diff, diff_decode_dense, encode_diff, serialize_diff, DiffStore, StoredCache,
    FALLBACK_THRESHOLD,
};
use crate::fused_restore::{dense_restore, fused_restore};
use crate::ledger::CostLedger;
use crate::paged_pool::PagedPool;
use crate::toymodel::Rope;
use crate::types::{CacheBlockConfig, LayerKv, LayeredKv, PositionSpan};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn kv_max_diff(a: &LayeredKv, b: &LayeredKv) -> f32 {
    a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| max_abs(&x.k, &y.k).max(max_abs(&x.v, &y.v)))
        .fold(0.0, f32::max)
}

fn trace_checks(spec: &WorkloadSpec, out: &TraceOutput, checks: &mut Vec<Check>) {
    let report = &out.report;
    let t1_max = report
        .rows_for(PathLabel::T1)
        .map(|r| r.fidelity.max_k.max(r.fidelity.max_v))
        .fold(0.0, f64::max);
    checks.push(Check::new(
        "oracle_self_error",
        t1_max == 0.0,
        format!("max {t1_max:e}"),
    ));

    let mut worst = 0.0f32;
    let mut sets_equal = true;
    for r in 0..spec.workload.num_rounds as u64 {
        let (Some(a), Some(b)) = (
            out.outcomes.get(&(PathLabel::T2, r)),
            out.outcomes.get(&(PathLabel::T3, r)),
        ) else {
            continue;
        };
        for (x, y) in a.iter().zip(b) {
            worst = worst.max(kv_max_diff(&x.kv, &y.kv));
            sets_equal &= x.important_positions == y.important_positions;
        }
    }
    checks.push(Check::new(
        "collective_equals_serial",
        worst <= 1e-6 && sets_equal,
        format!("max element difference {worst:e}, important sets equal: {sets_equal}"),
    ));

    let n = spec.workload.num_agents as u64;
    let mut law = true;
    let mut detail = String::new();
    for row in &report.rows {
        let expected = match row.path {
            PathLabel::T1 => 0,
            PathLabel::T2 => n,
            PathLabel::T3 => (row.groups + row.remainder) as u64,
        };
        let ok = row
            .ledger
            .rope_calls_per_layer
            .iter()
            .all(|&c| c == expected)
            && row.ledger.selection_passes == expected;
        if !ok {
            law = false;
            detail = format!(
                "{:?} round {}: rope calls {:?}, selection passes {}, expected {expected}",
                row.path,
                row.round_id,
                row.ledger.rope_calls_per_layer,
                row.ledger.selection_passes
            );
        }
    }
    if law {
        detail = "rope calls and selection passes equal groups plus remainder".into();
    }
    checks.push(Check::new("call_amortization", law, detail));

    let mut ordered = true;
    for r in 0..spec.workload.num_rounds as u64 {
        let pick = |p: PathLabel| report.rows.iter().find(|x| x.path == p && x.round_id == r);
        if let (Some(t2), Some(t3)) = (pick(PathLabel::T2), pick(PathLabel::T3)) {
            ordered &= t3.ledger.bytes_stored() <= t2.ledger.bytes_stored()
                && t2.ledger.bytes_stored() <= t2.dense_bytes;
        }
    }
    checks.push(Check::new(
        "storage_ordering",
        ordered,
        "T3 <= T2 <= N x dense per round",
    ));

    let mut law_ok = true;
    for row in report.rows_for(PathLabel::T3) {
        for c in &row.compression {
            let want = 1.0
                + c.mirrors
                    .iter()
                    .map(|m| m.diff_bytes as f64 / c.dense_bytes as f64)
                    .sum::<f64>();
            law_ok &= (c.family_cost - want).abs() <= 1e-9;
            law_ok &= c
                .mirrors
                .iter()
                .all(|m| m.diff_bytes == m.metadata_bytes + m.payload_bytes);
        }
    }
    checks.push(Check::new(
        "family_cost_law",
        law_ok,
        "family cost and byte accounting",
    ));

    let mismatches: usize = report.rows.iter().map(|r| r.restore_mismatches).sum();
    let restored: usize = report.rows.iter().map(|r| r.mirrors_restored).sum();
    checks.push(Check::new(
        "restore_in_trace",
        mismatches == 0,
        format!("{restored} mirrors restored, {mismatches} mismatches"),
    ));
}

fn random_kv(rng: &mut SplitMix64, layers: usize, heads: usize, hd: usize, t: usize) -> LayeredKv {
    let plane = t * heads * hd;
    let ls = (0..layers)
        .map(|_| LayerKv {
            k: (0..plane).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            v: (0..plane).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect();
    LayeredKv::from_layers(heads, hd, ls, (0..t).collect()).expect("valid geometry")
}

fn perturb_blocks(
    rng: &mut SplitMix64,
    kv: &LayeredKv,
    blocks: CacheBlockConfig,
    p: f64,
) -> LayeredKv {
    let mut out = kv.clone();
    let t = kv.num_tokens();
    let w = kv.row_width();
    for l in 0..kv.num_layers() {
        for b in 0..blocks.num_blocks(t) {
            if rng.random_bool(p) {
                let r = blocks.block_range(b, t);
                let i = rng.random_range(r.start * w..r.end * w);
                out.layer_mut(l).k[i] += 0.5;
                out.layer_mut(l).v[i] -= 0.25;
            }
        }
    }
    out
}

fn diff_roundtrip_check(trials: usize, seed: u64) -> Check {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..trials {
        let t = rng.random_range(1..200);
        let blocks = CacheBlockConfig {
            block_size: rng.random_range(1..40),
        };
        let master = random_kv(&mut rng, 2, 2, 4, t);
        let p = rng.random_range(0.0..1.0);
        let mirror = perturb_blocks(&mut rng, &master, blocks, p);
        let ok = encode_diff(&master, &mirror, blocks, None)
            .map(|d| serialize_diff(&d))
            .and_then(|bytes| deserialize_diff(&bytes))
            .and_then(|d| diff_decode_dense(&master, &d))
            .is_ok_and(|decoded| decoded.bit_eq(&mirror));
        failures += usize::from(!ok);
    }
    Check::new(
        "diff_lossless",
        failures == 0,
        format!("{trials} random pairs, {failures} failures"),
    )
}

fn restore_equivalence_check(trials: usize, seed: u64) -> Check {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let rope = Rope::new(4, 10000.0);
    let blocks = CacheBlockConfig { block_size: 8 };
    let mut failures = 0;
    for _ in 0..trials {
        let t = rng.random_range(4..80);
        let master = random_kv(&mut rng, 3, 2, 4, t);
        let mirror = perturb_blocks(&mut rng, &master, blocks, 0.3);
        let mut store = DiffStore::new();
        let tokens: Vec<u32> = (0..t as u32).collect();
        store.insert_dense(tokens.clone(), master);
        let Ok(StoredCache::Mirror(handle)) =
            store.store_unplanned(tokens, mirror, blocks, FALLBACK_THRESHOLD)
        else {
            continue;
        };
        let shift = rng.random_range(0..500);
        let span = PositionSpan::new((0..t).collect(), (shift..shift + t).collect())
            .expect("equal lengths");
        let mut pool = PagedPool::new(2 * t, blocks.block_size, 3, 8);
        let (a, b) = (
            pool.allocate(0, t).expect("room"),
            pool.allocate(1, t).expect("room"),
        );
        let (mut fl, mut dl) = (CostLedger::new(3), CostLedger::new(3));
        let ran = fused_restore(&rope, &handle, &a, &span, &mut pool, &mut fl, None)
            .and_then(|_| dense_restore(&rope, &handle, &b, &span, &mut pool, &mut dl));
        let equal = ran.is_ok()
            && (0..3).all(|l| {
                let (x, y) = (
                    pool.read_rows(&a, l).expect("live"),
                    pool.read_rows(&b, l).expect("live"),
                );
                let bits =
                    |p: &[f32], q: &[f32]| p.iter().zip(q).all(|(u, v)| u.to_bits() == v.to_bits());
                bits(&x.0, &y.0) && bits(&x.1, &y.1)
            });
        let accounting = fl.dense_mirror_allocations == 0
            && (handle.diff().is_empty() || fl.bytes_moved < dl.bytes_moved);
        failures += usize::from(!(equal && accounting));
    }
    Check::new(
        "fused_equals_dense",
        failures == 0,
        format!("{trials} random mirrors, {failures} failures"),
    )
}

/// Run every check for `spec`. Errors abort only when the trace itself fails.
pub fn run_suite(spec: &WorkloadSpec) -> Result<Vec<Check>, TraceError> {
    let all = [PathLabel::T1, PathLabel::T2, PathLabel::T3];
    let first = run_trace_paths(spec, &all)?;
    let mut checks = Vec::new();
    trace_checks(spec, &first, &mut checks);
    let second = run_trace_paths(spec, &all)?;
    checks.push(Check::new(
        "deterministic_report",
        first.report.to_json() == second.report.to_json(),
        "two runs serialize identically",
    ));
    let seed = spec.workload.token_seed;
    checks.push(diff_roundtrip_check(200, seed));
    checks.push(restore_equivalence_check(50, seed.wrapping_add(1)));
    Ok(checks)
}

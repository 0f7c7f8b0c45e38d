//! Synthetic round generator.
//!
//! Agent `i` starts from a random initial history and a seed output. In
//! round `t` its prompt is its history, then every agent's previous output
//! in an agent-specific order, then a short task. Each round the agent's own
//! output is appended to its history.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::config::WorkloadSpec;
use crate::types::{PromptLayout, Round, Segment, SegmentKind, TokenId, TypeError};

const HISTORY: u64 = 1;
const OUTPUT: u64 = 2;
const TASK: u64 = 3;
const PERMUTATION: u64 = 4;

fn stream(seed: u64, tag: u64, agent: u64, round: u64) -> SplitMix64 {
    let mut x = seed;
    for part in [tag, agent, round] {
        x = (x ^ part)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(29);
    }
    SplitMix64::seed_from_u64(x)
}

/// Deterministic token source for one workload spec.
#[derive(Debug, Clone)]
pub struct Workload {
    spec: WorkloadSpec,
}

impl Workload {
    pub fn new(spec: &WorkloadSpec) -> Self {
        Self { spec: spec.clone() }
    }

    pub fn num_agents(&self) -> usize {
        self.spec.workload.num_agents
    }

    fn tokens(&self, tag: u64, agent: usize, round: u64, len: usize) -> Vec<TokenId> {
        let mut rng = stream(self.spec.workload.token_seed, tag, agent as u64, round);
        // The top id is reserved as the separator.
        let top = self.spec.model.separator();
        (0..len).map(|_| rng.random_range(0..top)).collect()
    }

    pub fn initial_history(&self, agent: usize) -> Vec<TokenId> {
        let len = self.spec.workload.history_len.for_agent(agent);
        self.tokens(HISTORY, agent, 0, len)
    }

    /// Output of `agent` in round `round`; round `-1` is the seed output.
    pub fn output(&self, agent: usize, round: i64) -> Vec<TokenId> {
        self.tokens(
            OUTPUT,
            agent,
            (round + 1) as u64,
            self.spec.workload.shared_block_len,
        )
    }

    pub fn task(&self, agent: usize, round: u64) -> Vec<TokenId> {
        self.tokens(TASK, agent, round, self.spec.workload.task_len)
    }

    /// History of `agent` entering round `round`: initial history and outputs `-1..round`.
    pub fn history(&self, agent: usize, round: u64) -> Vec<TokenId> {
        let mut h = self.initial_history(agent);
        for r in -1..round as i64 {
            h.extend(self.output(agent, r));
        }
        h
    }

    /// Order in which `agent` sees the shared outputs of `round`.
    pub fn permutation(&self, agent: usize, round: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_agents()).collect();
        if self.spec.workload.permute_shared {
            let mut rng = stream(
                self.spec.workload.permutation_seed,
                PERMUTATION,
                agent as u64,
                round,
            );
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn generate_round(&self, round_id: u64) -> Result<Round, TypeError> {
        let n = self.num_agents();
        let shared = (0..n)
            .map(|a| {
                Segment::new(
                    self.output(a, round_id as i64 - 1),
                    SegmentKind::SharedOutput,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let prompts = (0..n)
            .map(|a| {
                let mut segs = vec![Segment::new(
                    self.history(a, round_id),
                    SegmentKind::PrivateHistory,
                )?];
                segs.extend(
                    self.permutation(a, round_id)
                        .into_iter()
                        .map(|j| shared[j].clone()),
                );
                segs.push(Segment::new(
                    self.task(a, round_id),
                    SegmentKind::RoundTask,
                )?);
                PromptLayout::new(a as u64, segs)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Round {
            round_id,
            shared_outputs: shared,
            prompts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(n: usize, permute: bool) -> WorkloadSpec {
        let mut s = WorkloadSpec::default();
        s.workload.num_agents = n;
        s.workload.permute_shared = permute;
        s
    }

    fn shared_digests(p: &PromptLayout) -> Vec<crate::types::Digest> {
        p.segments()
            .iter()
            .filter(|s| s.kind() == SegmentKind::SharedOutput)
            .map(|s| s.digest())
            .collect()
    }

    #[test]
    fn single_agent_round() {
        let w = Workload::new(&spec(1, true));
        let r = w.generate_round(0).unwrap();
        let segs = r.prompts[0].segments();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[1].tokens(), &w.output(0, -1)[..]);
    }

    #[test]
    fn identity_permutations_share_suffix() {
        let w = Workload::new(&spec(3, false));
        let r = w.generate_round(1).unwrap();
        let d: Vec<_> = r.prompts.iter().map(shared_digests).collect();
        assert!(d.windows(2).all(|x| x[0] == x[1]));
    }

    #[test]
    fn seeded_permutations_preserve_the_set() {
        let w = Workload::new(&spec(3, true));
        let r = w.generate_round(2).unwrap();
        let want: BTreeSet<_> = r.shared_outputs.iter().map(|s| s.digest()).collect();
        for p in &r.prompts {
            let got = shared_digests(p);
            assert_eq!(got.len(), 3);
            assert_eq!(got.into_iter().collect::<BTreeSet<_>>(), want);
        }
    }

    #[test]
    fn histories_accumulate_and_tokens_avoid_separator() {
        let s = spec(2, true);
        let w = Workload::new(&s);
        let h0 = w.history(1, 0);
        let h2 = w.history(1, 2);
        assert_eq!(h0.len(), 64 + 32);
        assert_eq!(h2.len(), 64 + 3 * 32);
        assert_eq!(&h2[..h0.len()], &h0[..]);
        assert!(h2.iter().all(|&t| t < s.model.separator()));
    }

    #[test]
    fn generation_is_deterministic() {
        let w = Workload::new(&spec(4, true));
        assert_eq!(
            w.generate_round(1).unwrap().prompts,
            w.generate_round(1).unwrap().prompts
        );
    }
}

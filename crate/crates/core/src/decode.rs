//! Speculative decoding with deterministic draft proposals: token-wise
//! acceptance, residual resampling on rejection, bonus-token emission on
//! full acceptance, and fallback autoregressive steps when no draft
//! exists.
//!
//! The acceptance rule treats the retrieved draft token as a degenerate
//! proposal: accept draft token `x` with probability `p(x)` under the
//! filtered target distribution, otherwise emit one sample from the
//! residual `r(y) = p(y) * [y != x] / (1 - p(x))`. Branchwise,
//! `p(x) * [y == x] + (1 - p(x)) * r(y) = p(y)`, so the emitted sequence
//! distribution is exactly the autoregressive one for any draft source.

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{apply_filters, sample, Policy, PolicyDistribution, SamplingParams};
use crate::suffix::DraftBlock;
use crate::TokenId;

/// Acceptance probabilities this close to one are treated as certain; the
/// residual is undefined at unit mass.
pub const FORCED_ACCEPT_EPS: f64 = 1e-12;

/// How an emitted token was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenOrigin {
    /// Draft token accepted by the verification test.
    DraftAccepted,
    /// Sampled from the residual distribution after the first rejection.
    Recovered,
    /// Sampled after a fully accepted block.
    Bonus,
    /// Plain autoregressive sample (no draft available).
    Fallback,
}

/// Result of one decoding step (a verification round or a fallback
/// sample).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    /// Draft length proposed this step; zero for fallback steps.
    pub proposed: usize,
    /// Draft tokens accepted, in `[0, proposed]`.
    pub accepted: usize,
    /// Tokens appended to the response this step.
    pub emitted: Vec<TokenId>,
    /// Origin tag per emitted token.
    pub origins: Vec<TokenOrigin>,
    /// True when EOS was emitted.
    pub terminal: bool,
}

impl StepOutcome {
    pub fn is_verification(&self) -> bool {
        self.proposed > 0
    }
}

/// A completed rollout with per-step accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutResult {
    pub response: Vec<TokenId>,
    pub origins: Vec<TokenOrigin>,
    pub steps: Vec<StepOutcome>,
}

impl RolloutResult {
    pub fn decoding_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Anything that can propose a candidate continuation for a prefix.
pub trait DraftSource {
    fn draft(&self, prefix: &[TokenId], k: usize) -> DraftBlock;
}

/// The residual distribution after rejecting `rejected`:
/// `r(x) = p(x) * [x != rejected] / (1 - p(rejected))`.
///
/// Fails when the rejected token holds (numerically) all the mass; a
/// rejection event is unreachable there and the caller must accept
/// instead.
pub fn residual(dist: &PolicyDistribution, rejected: TokenId) -> Result<PolicyDistribution> {
    let p_rej = dist.prob(rejected);
    if p_rej >= 1.0 - FORCED_ACCEPT_EPS {
        return Err(Error::ResidualUnitMass(rejected));
    }
    let denom = 1.0 - p_rej;
    let probs: Vec<f64> = dist
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == rejected as usize { 0.0 } else { p / denom })
        .collect();
    Ok(PolicyDistribution::from_normalized(probs))
}

/// Verifies a draft block sequentially against the live policy, appending
/// emitted tokens to `seq`.
///
/// For each draft position: one uniform draw decides acceptance with
/// probability `p(draft token)`. On acceptance the token is appended
/// (stopping at EOS); on the first rejection one recovered token is drawn
/// from the residual and the step ends. If the whole block is accepted
/// without EOS, one bonus token is sampled from the next filtered
/// distribution. Greedy mode degenerates to an argmax-equality test.
pub fn verify_block<R: Rng + ?Sized>(
    seq: &mut Vec<TokenId>,
    draft: &DraftBlock,
    policy: &dyn Policy,
    params: &SamplingParams,
    rng: &mut R,
) -> StepOutcome {
    debug_assert!(!draft.is_empty(), "verification needs a non-empty draft");
    let eos = policy.vocab().eos();
    let mut emitted = Vec::with_capacity(draft.len() + 1);
    let mut origins = Vec::with_capacity(draft.len() + 1);
    let mut accepted = 0usize;
    let mut terminal = false;
    let mut rejected = false;

    for &cand in &draft.tokens {
        let dist = apply_filters(&policy.next_distribution(seq), params);
        let p_acc = dist.prob(cand);
        let u: f64 = rng.gen();
        if p_acc >= 1.0 - FORCED_ACCEPT_EPS || u < p_acc {
            seq.push(cand);
            emitted.push(cand);
            origins.push(TokenOrigin::DraftAccepted);
            accepted += 1;
            if cand == eos {
                terminal = true;
                break;
            }
        } else {
            let res = residual(&dist, cand).expect("rejection implies residual mass");
            let tok = sample(&res, rng);
            seq.push(tok);
            emitted.push(tok);
            origins.push(TokenOrigin::Recovered);
            terminal = tok == eos;
            rejected = true;
            break;
        }
    }

    if !rejected && !terminal {
        let dist = apply_filters(&policy.next_distribution(seq), params);
        let tok = sample(&dist, rng);
        seq.push(tok);
        emitted.push(tok);
        origins.push(TokenOrigin::Bonus);
        terminal = tok == eos;
    }

    StepOutcome {
        proposed: draft.len(),
        accepted,
        emitted,
        origins,
        terminal,
    }
}

/// One plain autoregressive decoding step appended to `seq`.
pub fn sample_step<R: Rng + ?Sized>(
    seq: &mut Vec<TokenId>,
    policy: &dyn Policy,
    params: &SamplingParams,
    rng: &mut R,
) -> StepOutcome {
    let dist = apply_filters(&policy.next_distribution(seq), params);
    let tok = sample(&dist, rng);
    seq.push(tok);
    StepOutcome {
        proposed: 0,
        accepted: 0,
        emitted: vec![tok],
        origins: vec![TokenOrigin::Fallback],
        terminal: tok == policy.vocab().eos(),
    }
}

/// Speculative rollout: retrieve a draft each iteration and verify it; an
/// empty draft (or no draft source) costs one plain sample. Each loop
/// iteration is one decoding step.
///
/// Drafts are clamped to the remaining response budget so a fully
/// accepted block plus its bonus token lands exactly on `max_len`; a
/// clamp to zero lengths becomes a fallback step.
pub fn rollout<R: Rng + ?Sized>(
    prompt: &[TokenId],
    policy: &dyn Policy,
    drafts: Option<&dyn DraftSource>,
    params: &SamplingParams,
    draft_len: usize,
    max_len: usize,
    rng: &mut R,
) -> RolloutResult {
    assert!(max_len >= 1, "max response length must be >= 1");
    assert!(!prompt.is_empty(), "prompt must be non-empty");
    let mut seq = prompt.to_vec();
    let mut steps = Vec::new();
    let mut terminal = false;

    while seq.len() - prompt.len() < max_len && !terminal {
        let remaining = max_len - (seq.len() - prompt.len());
        let block = drafts.and_then(|source| {
            let k = draft_len.min(remaining.saturating_sub(1));
            if k == 0 {
                return None;
            }
            let block = source.draft(&seq, k);
            (!block.is_empty()).then_some(block)
        });
        let outcome = match block {
            Some(block) => verify_block(&mut seq, &block, policy, params, rng),
            None => sample_step(&mut seq, policy, params, rng),
        };
        terminal = outcome.terminal;
        steps.push(outcome);
    }

    assemble(prompt.len(), seq, steps)
}

/// Plain autoregressive rollout: one sampled token per decoding step
/// until EOS or the length limit.
pub fn autoregressive_rollout<R: Rng + ?Sized>(
    prompt: &[TokenId],
    policy: &dyn Policy,
    params: &SamplingParams,
    max_len: usize,
    rng: &mut R,
) -> RolloutResult {
    assert!(max_len >= 1, "max response length must be >= 1");
    assert!(!prompt.is_empty(), "prompt must be non-empty");
    let mut seq = prompt.to_vec();
    let mut steps = Vec::new();
    while seq.len() - prompt.len() < max_len {
        let outcome = sample_step(&mut seq, policy, params, rng);
        let terminal = outcome.terminal;
        steps.push(outcome);
        if terminal {
            break;
        }
    }
    assemble(prompt.len(), seq, steps)
}

fn assemble(prompt_len: usize, seq: Vec<TokenId>, steps: Vec<StepOutcome>) -> RolloutResult {
    let origins: Vec<TokenOrigin> = steps.iter().flat_map(|s| s.origins.clone()).collect();
    let response = seq[prompt_len..].to_vec();
    debug_assert_eq!(origins.len(), response.len());
    RolloutResult {
        response,
        origins,
        steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{EosSchedule, MarkovPolicy, Vocabulary};
    use crate::suffix::{SuffixTree, TokenPool};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn dist(probs: &[f64]) -> PolicyDistribution {
        PolicyDistribution::new(probs.to_vec()).unwrap()
    }

    fn default_params() -> SamplingParams {
        SamplingParams::default()
    }

    /// Small order-1 policy over vocab 4 with EOS = 3 carried in the rows.
    fn toy_policy() -> MarkovPolicy {
        let vocab = Vocabulary::new(4, 3).unwrap();
        let mut rows = HashMap::new();
        rows.insert(vec![0u32], vec![0.5, 0.3, 0.1, 0.1]);
        rows.insert(vec![1u32], vec![0.2, 0.2, 0.4, 0.2]);
        rows.insert(vec![2u32], vec![0.25, 0.25, 0.25, 0.25]);
        MarkovPolicy::from_rows(vocab, 1, rows, EosSchedule::Off).unwrap()
    }

    #[test]
    fn residual_zeroes_rejected_and_renormalizes() {
        let r = residual(&dist(&[0.5, 0.3, 0.2]), 0).unwrap();
        assert_eq!(r.prob(0), 0.0);
        assert!((r.prob(1) - 0.6).abs() < 1e-15);
        assert!((r.prob(2) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn residual_two_point_case() {
        let r = residual(&dist(&[0.5, 0.5]), 1).unwrap();
        assert_eq!(r.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn residual_rejects_unit_mass() {
        assert!(matches!(
            residual(&dist(&[1.0, 0.0]), 0),
            Err(Error::ResidualUnitMass(0))
        ));
    }

    #[test]
    fn residual_fuzz_is_valid_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10_000 {
            let v = rng.gen_range(2..8usize);
            let weights: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0f64)).collect();
            let d = PolicyDistribution::from_weights(weights).unwrap();
            let rejected = rng.gen_range(0..v) as TokenId;
            let r = residual(&d, rejected).unwrap();
            assert_eq!(r.prob(rejected), 0.0);
            assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn per_token_marginal_identity() {
        // p(x_draft) * [x == x_draft] + (1 - p(x_draft)) * r(x) == p(x)
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..2_000 {
            let v = rng.gen_range(2..10usize);
            let weights: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0f64)).collect();
            let d = PolicyDistribution::from_weights(weights).unwrap();
            let cand = rng.gen_range(0..v) as TokenId;
            let r = residual(&d, cand).unwrap();
            let p_acc = d.prob(cand);
            for x in 0..v as TokenId {
                let marginal =
                    p_acc * if x == cand { 1.0 } else { 0.0 } + (1.0 - p_acc) * r.prob(x);
                assert!((marginal - d.prob(x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_rows_accept_everything() {
        let vocab = Vocabulary::new(3, 2).unwrap();
        let mut rows = HashMap::new();
        rows.insert(vec![0u32], vec![1.0, 0.0, 0.0]);
        let p = MarkovPolicy::from_rows(vocab, 1, rows, EosSchedule::Off).unwrap();
        let draft = DraftBlock {
            tokens: vec![0, 0, 0],
            match_depth: 1,
        };
        let mut seq = vec![0u32];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = verify_block(&mut seq, &draft, &p, &default_params(), &mut rng);
        assert_eq!(out.accepted, 3);
        assert_eq!(out.emitted.len(), 4, "all accepted plus one bonus");
        assert_eq!(out.origins[3], TokenOrigin::Bonus);
    }

    #[test]
    fn zero_mass_draft_rejected_with_residual_equal_to_p() {
        let vocab = Vocabulary::new(3, 2).unwrap();
        let mut rows = HashMap::new();
        rows.insert(vec![0u32], vec![0.0, 0.6, 0.4]);
        let p = MarkovPolicy::from_rows(vocab, 1, rows, EosSchedule::Off).unwrap();
        let draft = DraftBlock {
            tokens: vec![0],
            match_depth: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0u64; 3];
        for _ in 0..20_000 {
            let mut seq = vec![0u32];
            let out = verify_block(&mut seq, &draft, &p, &default_params(), &mut rng);
            assert_eq!(out.accepted, 0);
            assert_eq!(out.origins[0], TokenOrigin::Recovered);
            counts[out.emitted[0] as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let f1 = counts[1] as f64 / 20_000.0;
        assert!((f1 - 0.6).abs() < 0.02);
    }

    #[test]
    fn accepted_eos_ends_block_without_bonus() {
        let vocab = Vocabulary::new(3, 2).unwrap();
        let mut rows = HashMap::new();
        rows.insert(vec![0u32], vec![0.0, 0.0, 1.0]);
        let p = MarkovPolicy::from_rows(vocab, 1, rows, EosSchedule::Off).unwrap();
        let draft = DraftBlock {
            tokens: vec![2, 1],
            match_depth: 1,
        };
        let mut seq = vec![0u32];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = verify_block(&mut seq, &draft, &p, &default_params(), &mut rng);
        assert!(out.terminal);
        assert_eq!(out.accepted, 1);
        assert_eq!(out.emitted, vec![2]);
    }

    #[test]
    fn iid_acceptance_matches_geometric_closed_form() {
        let vocab = Vocabulary::new(16, 0).unwrap();
        let rho = 0.5;
        let p = MarkovPolicy::repetitive(vocab, 1, rho, 99, EosSchedule::Off).unwrap();
        let params = default_params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seq = vec![5u32];
        let n = 100_000usize;
        let mut emitted_total = 0usize;
        for _ in 0..n {
            let draft = DraftBlock {
                tokens: p.canonical_chain(&seq, 4),
                match_depth: 1,
            };
            let out = verify_block(&mut seq, &draft, &p, &params, &mut rng);
            emitted_total += out.emitted.len();
        }
        let expect = 1.0 + rho + rho.powi(2) + rho.powi(3) + rho.powi(4);
        let mean = emitted_total as f64 / n as f64;
        assert!(
            (mean - expect).abs() / expect < 0.01,
            "mean {mean}, closed form {expect}"
        );
    }

    #[test]
    fn greedy_verification_is_argmax_equality() {
        let p = toy_policy();
        let params = SamplingParams {
            temperature: 0.0,
            ..default_params()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Row for context 0 has argmax 0; a draft of [0] is accepted, [1]
        // is rejected and recovered as the argmax.
        let mut seq = vec![0u32];
        let good = DraftBlock {
            tokens: vec![0],
            match_depth: 1,
        };
        let out = verify_block(&mut seq, &good, &p, &params, &mut rng);
        assert_eq!(out.accepted, 1);

        let mut seq = vec![0u32];
        let bad = DraftBlock {
            tokens: vec![1],
            match_depth: 1,
        };
        let out = verify_block(&mut seq, &bad, &p, &params, &mut rng);
        assert_eq!(out.accepted, 0);
        assert_eq!(out.emitted, vec![0], "recovered token is the argmax");
    }

    #[test]
    fn rollout_without_drafts_equals_autoregressive() {
        let p = toy_policy();
        let params = default_params();
        for seed in 0..20u64 {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let spec = rollout(&[0], &p, None, &params, 4, 24, &mut a);
            let auto = autoregressive_rollout(&[0], &p, &params, 24, &mut b);
            assert_eq!(spec.response, auto.response);
            assert_eq!(spec.decoding_steps(), auto.decoding_steps());
        }
    }

    #[test]
    fn max_len_one_is_one_step_one_token() {
        let p = toy_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tree = SuffixTree::build(&TokenPool::new(0, vec![vec![0, 1, 2]]), 8, 1);
        let r = rollout(
            &[0],
            &p,
            Some(&tree),
            &default_params(),
            4,
            1,
            &mut rng,
        );
        assert_eq!(r.response.len(), 1);
        assert_eq!(r.decoding_steps(), 1);
        assert_eq!(r.steps[0].proposed, 0, "no room for a draft plus bonus");
    }

    #[test]
    fn length_limit_truncates_blocks_exactly() {
        let vocab = Vocabulary::new(3, 2).unwrap();
        let mut rows = HashMap::new();
        rows.insert(vec![0u32], vec![1.0, 0.0, 0.0]);
        let p = MarkovPolicy::from_rows(vocab, 1, rows, EosSchedule::Off).unwrap();
        let tree = SuffixTree::build(&TokenPool::new(0, vec![vec![0; 32]]), 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for max_len in 1..12usize {
            let r = rollout(
                &[0],
                &p,
                Some(&tree),
                &default_params(),
                4,
                max_len,
                &mut rng,
            );
            assert_eq!(r.response.len(), max_len);
        }
    }

    #[test]
    fn decoding_steps_bounded_by_response_length() {
        let p = toy_policy();
        let tree = SuffixTree::build(
            &TokenPool::new(0, vec![vec![0, 0, 1, 2, 0], vec![0, 0, 0, 1]]),
            8,
            1,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let r = rollout(&[0], &p, Some(&tree), &default_params(), 4, 32, &mut rng);
            assert!(r.decoding_steps() <= r.response.len());
            let any_accepted = r.steps.iter().any(|s| s.accepted > 0);
            if r.decoding_steps() == r.response.len() {
                assert!(!any_accepted);
            }
            // Step accounting: emitted tokens per step sum to the response.
            let total: usize = r.steps.iter().map(|s| s.emitted.len()).sum();
            assert_eq!(total, r.response.len());
        }
    }

    #[test]
    fn greedy_autoregressive_reproduces_argmax_path() {
        let p = toy_policy();
        let params = SamplingParams {
            temperature: 0.0,
            ..default_params()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = autoregressive_rollout(&[0], &p, &params, 5, &mut rng);
        // argmax chain from 0: 0 -> 0 -> 0 ...
        assert_eq!(r.response, vec![0, 0, 0, 0, 0]);
        assert_eq!(r.decoding_steps(), 5);
    }
}

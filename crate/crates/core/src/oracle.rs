//! Independent oracles for the verification suites.
//!
//! Nothing here touches the suffix tree or the sampled decoding paths:
//! draft retrieval is re-derived by scanning pool windows directly, and
//! output distributions are computed by exhaustive enumeration over every
//! acceptance/rejection branch with exact probability arithmetic. The
//! test suites compare the production implementations against these.

use std::collections::{BTreeMap, HashMap};

use crate::decode::DraftSource;
use crate::policy::{apply_filters, Policy, PolicyDistribution, SamplingParams};
use crate::suffix::{DraftBlock, TokenPool};
use crate::TokenId;

/// Brute-force window counter over a pool: every window of length
/// `<= depth_bound`, counted by direct scanning into a hash map. No trie,
/// no shared code with the suffix index.
pub struct WindowCounts {
    counts: HashMap<Vec<TokenId>, u64>,
    tokens_seen: Vec<TokenId>,
    depth_bound: usize,
}

impl WindowCounts {
    pub fn new(pool: &TokenPool, depth_bound: usize) -> Self {
        let mut counts = HashMap::new();
        let mut tokens_seen: Vec<TokenId> = Vec::new();
        for seq in &pool.sequences {
            for start in 0..seq.len() {
                let end = (start + depth_bound).min(seq.len());
                for stop in start + 1..=end {
                    *counts.entry(seq[start..stop].to_vec()).or_insert(0) += 1;
                }
            }
            tokens_seen.extend_from_slice(seq);
        }
        tokens_seen.sort_unstable();
        tokens_seen.dedup();
        WindowCounts {
            counts,
            tokens_seen,
            depth_bound,
        }
    }

    pub fn count(&self, pattern: &[TokenId]) -> u64 {
        self.counts.get(pattern).copied().unwrap_or(0)
    }

    /// Draft retrieval re-derived from raw window counts: anchor on the
    /// longest matching prefix-suffix (length in
    /// `[min_match, depth_bound - 1]`), then greedily extend by the
    /// continuation token with the highest occurrence count (ties to the
    /// lowest token id), never extending a pattern past the depth bound.
    pub fn draft(&self, prefix: &[TokenId], k: usize, min_match: usize) -> DraftBlock {
        let max_anchor = prefix.len().min(self.depth_bound - 1);
        for anchor in (min_match..=max_anchor).rev() {
            let suffix = &prefix[prefix.len() - anchor..];
            if self.count(suffix) == 0 {
                continue;
            }
            let mut pattern = suffix.to_vec();
            let mut tokens = Vec::with_capacity(k);
            while tokens.len() < k && pattern.len() < self.depth_bound {
                let mut best: Option<(TokenId, u64)> = None;
                for &tok in &self.tokens_seen {
                    pattern.push(tok);
                    let c = self.count(&pattern);
                    pattern.pop();
                    if c > 0 && best.map_or(true, |(_, b)| c > b) {
                        best = Some((tok, c));
                    }
                }
                let Some((tok, _)) = best else { break };
                tokens.push(tok);
                pattern.push(tok);
            }
            return DraftBlock {
                tokens,
                match_depth: anchor,
            };
        }
        DraftBlock::empty()
    }
}

/// One-shot brute-force counterpart of suffix-tree draft retrieval.
pub fn ngram_draft_oracle(
    pool: &TokenPool,
    prefix: &[TokenId],
    k: usize,
    depth_bound: usize,
    min_match: usize,
) -> DraftBlock {
    WindowCounts::new(pool, depth_bound).draft(prefix, k, min_match)
}

/// Exact distribution over responses of plain autoregressive decoding,
/// keyed by emitted token sequence.
pub fn enumerate_autoregressive(
    policy: &dyn Policy,
    params: &SamplingParams,
    prompt: &[TokenId],
    max_len: usize,
) -> BTreeMap<Vec<TokenId>, f64> {
    let mut out = BTreeMap::new();
    let mut seq = prompt.to_vec();
    recurse_auto(policy, params, &mut seq, prompt.len(), max_len, 1.0, &mut out);
    out
}

fn recurse_auto(
    policy: &dyn Policy,
    params: &SamplingParams,
    seq: &mut Vec<TokenId>,
    prompt_len: usize,
    max_len: usize,
    mass: f64,
    out: &mut BTreeMap<Vec<TokenId>, f64>,
) {
    if seq.len() - prompt_len >= max_len {
        *out.entry(seq[prompt_len..].to_vec()).or_insert(0.0) += mass;
        return;
    }
    let eos = policy.vocab().eos();
    let dist = apply_filters(&policy.next_distribution(seq), params);
    for (tok, &p) in dist.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        seq.push(tok as TokenId);
        if tok as TokenId == eos {
            *out.entry(seq[prompt_len..].to_vec()).or_insert(0.0) += mass * p;
        } else {
            recurse_auto(policy, params, seq, prompt_len, max_len, mass * p, out);
        }
        seq.pop();
    }
}

/// Residual rule used by the speculative enumeration; swappable so the
/// verification suite can prove it detects a broken residual.
pub type ResidualFn = fn(&PolicyDistribution, TokenId) -> Vec<f64>;

/// The correct residual: zero out the rejected token, renormalize.
pub fn exact_residual(dist: &PolicyDistribution, rejected: TokenId) -> Vec<f64> {
    let denom = 1.0 - dist.prob(rejected);
    dist.probs()
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == rejected as usize { 0.0 } else { p / denom })
        .collect()
}

/// A deliberately wrong residual (no renormalization) for mutation
/// sanity-checks of the losslessness suite.
pub fn unnormalized_residual(dist: &PolicyDistribution, rejected: TokenId) -> Vec<f64> {
    dist.probs()
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == rejected as usize { 0.0 } else { p })
        .collect()
}

/// Exact distribution over responses of speculative decoding, enumerated
/// over every acceptance/rejection branch and every residual and bonus
/// draw, using the same draft clamping rule as the rollout loop.
pub fn enumerate_speculative(
    policy: &dyn Policy,
    params: &SamplingParams,
    drafts: &dyn DraftSource,
    draft_len: usize,
    prompt: &[TokenId],
    max_len: usize,
) -> BTreeMap<Vec<TokenId>, f64> {
    enumerate_speculative_with(
        policy,
        params,
        drafts,
        draft_len,
        prompt,
        max_len,
        exact_residual,
    )
}

/// [`enumerate_speculative`] with a custom residual rule.
pub fn enumerate_speculative_with(
    policy: &dyn Policy,
    params: &SamplingParams,
    drafts: &dyn DraftSource,
    draft_len: usize,
    prompt: &[TokenId],
    max_len: usize,
    residual: ResidualFn,
) -> BTreeMap<Vec<TokenId>, f64> {
    let mut out = BTreeMap::new();
    let mut seq = prompt.to_vec();
    let mut ctx = SpecCtx {
        policy,
        params,
        drafts,
        draft_len,
        prompt_len: prompt.len(),
        max_len,
        residual,
        out: &mut out,
    };
    recurse_spec(&mut ctx, &mut seq, 1.0);
    out
}

struct SpecCtx<'a> {
    policy: &'a dyn Policy,
    params: &'a SamplingParams,
    drafts: &'a dyn DraftSource,
    draft_len: usize,
    prompt_len: usize,
    max_len: usize,
    residual: ResidualFn,
    out: &'a mut BTreeMap<Vec<TokenId>, f64>,
}

fn emit(ctx: &mut SpecCtx, seq: &[TokenId], mass: f64) {
    *ctx.out
        .entry(seq[ctx.prompt_len..].to_vec())
        .or_insert(0.0) += mass;
}

fn recurse_spec(ctx: &mut SpecCtx, seq: &mut Vec<TokenId>, mass: f64) {
    let produced = seq.len() - ctx.prompt_len;
    if produced >= ctx.max_len {
        emit(ctx, seq, mass);
        return;
    }
    let remaining = ctx.max_len - produced;
    let k = ctx.draft_len.min(remaining.saturating_sub(1));
    let block = if k == 0 {
        DraftBlock::empty()
    } else {
        ctx.drafts.draft(seq, k)
    };

    let eos = ctx.policy.vocab().eos();
    if block.is_empty() {
        // Fallback step: one plain sample.
        let dist = apply_filters(&ctx.policy.next_distribution(seq), ctx.params);
        branch_over(ctx, seq, mass, &dist.probs().to_vec(), eos);
        return;
    }

    // Verification step: enumerate the acceptance prefix length, then the
    // recovered/bonus draw at its end.
    let mut prefix_mass = mass;
    let mut accepted = 0usize;
    loop {
        if accepted == block.len() {
            // Full acceptance: bonus draw.
            let dist = apply_filters(&ctx.policy.next_distribution(seq), ctx.params);
            branch_over(ctx, seq, prefix_mass, &dist.probs().to_vec(), eos);
            break;
        }
        let cand = block.tokens[accepted];
        let dist = apply_filters(&ctx.policy.next_distribution(seq), ctx.params);
        let p_acc = dist.prob(cand);

        // Rejection branch at this position.
        if p_acc < 1.0 {
            let res = (ctx.residual)(&dist, cand);
            branch_over(ctx, seq, prefix_mass * (1.0 - p_acc), &res, eos);
        }

        // Acceptance branch continues the prefix.
        if p_acc == 0.0 {
            break;
        }
        prefix_mass *= p_acc;
        seq.push(cand);
        accepted += 1;
        if cand == eos {
            emit(ctx, seq, prefix_mass);
            for _ in 0..accepted {
                seq.pop();
            }
            return;
        }
    }
    for _ in 0..accepted {
        seq.pop();
    }
}

/// Branches over every token of a one-token draw (recovered, bonus, or
/// fallback), recursing on non-terminal continuations.
fn branch_over(ctx: &mut SpecCtx, seq: &mut Vec<TokenId>, mass: f64, probs: &[f64], eos: TokenId) {
    for (tok, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        seq.push(tok as TokenId);
        if tok as TokenId == eos {
            emit(ctx, seq, mass * p);
        } else {
            recurse_spec(ctx, seq, mass * p);
        }
        seq.pop();
    }
}

/// Total variation distance between two distributions over sequences.
pub fn total_variation(a: &BTreeMap<Vec<TokenId>, f64>, b: &BTreeMap<Vec<TokenId>, f64>) -> f64 {
    let mut keys: Vec<&Vec<TokenId>> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let sum: f64 = keys
        .iter()
        .map(|k| (a.get(*k).copied().unwrap_or(0.0) - b.get(*k).copied().unwrap_or(0.0)).abs())
        .sum();
    sum / 2.0
}

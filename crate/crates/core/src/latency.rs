//! Parametric per-decoding-step latency model.
//!
//! A decoding step costs a token-wise part (linear layers: cheap, batches
//! efficiently) plus a request-wise attention part whose shape depends on
//! the kernel strategy. With batch-split attention, any speculative
//! request in the batch triggers a prefill-style kernel on top of the
//! decode kernel; unified attention handles the short speculative queries
//! in the decode kernel at almost no extra cost. The attention costs are
//! anchored to measured kernel latencies at a reference composition
//! (batch 128, context 8k, 32 speculative requests with 4 drafts each)
//! and extrapolate with user-calibratable slopes that default to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention kernel strategy for speculative batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Separate prefill kernel for speculative requests plus decode
    /// kernel for the rest.
    Split,
    /// One kernel handling variable query lengths.
    Unified,
}

/// What one engine iteration processed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepComposition {
    /// Requests advancing by exactly one query token.
    pub n_normal: usize,
    /// Requests verifying a draft block this step.
    pub n_spec: usize,
    /// Total draft tokens across speculative requests.
    pub draft_tokens: usize,
    /// Mean context length across requests.
    pub mean_context: f64,
}

impl StepComposition {
    pub fn total_tokens(&self) -> usize {
        // Each speculative request carries its base query plus drafts.
        self.n_normal + self.n_spec + self.draft_tokens
    }

    fn spec_query_tokens(&self) -> usize {
        self.n_spec + self.draft_tokens
    }
}

/// Calibration anchors and slopes of the step-latency model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyParams {
    pub attention: AttentionMode,
    /// Token-wise cost in ms per query token. Defaults to zero: at the
    /// modeled batch sizes the step is attention-dominated and the
    /// token-wise operators batch away.
    pub c_tok_ms: f64,
    /// Memory-bound floor: below this many tokens the token-wise cost is
    /// flat at `c_tok_ms * knee_tokens`. Zero disables the knee.
    pub knee_tokens: usize,
    /// Decode-attention cost with no speculative queries in the batch.
    pub normal_attn_ms: f64,
    /// Prefill-kernel cost triggered by speculative requests (split mode).
    pub split_prefill_ms: f64,
    /// Decode-kernel cost for the remaining requests (split mode).
    pub split_decode_ms: f64,
    /// Unified-kernel cost at the anchor composition.
    pub unified_attn_ms: f64,
    /// Speculative query tokens at the anchor composition (requests plus
    /// their drafts).
    pub anchor_spec_tokens: f64,
    /// Context length at the anchor composition.
    pub anchor_context: f64,
    /// Relative attention-cost slope in context length; zero keeps the
    /// anchors flat.
    pub context_slope: f64,
    /// Scales the whole attention term, e.g. to treat the anchors as
    /// per-layer figures.
    pub attn_multiplier: f64,
    /// Intra-GPU interference: iteration slowdown per injected-token
    /// fraction.
    pub interference: f64,
    /// Simulated suffix-index build cost per node visit.
    pub build_ms_per_visit: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams {
            attention: AttentionMode::Unified,
            c_tok_ms: 0.0,
            knee_tokens: 0,
            normal_attn_ms: 0.372,
            split_prefill_ms: 0.753,
            split_decode_ms: 0.226,
            unified_attn_ms: 0.380,
            anchor_spec_tokens: 32.0 * 5.0,
            anchor_context: 8192.0,
            context_slope: 0.0,
            attn_multiplier: 1.0,
            interference: 0.0,
            build_ms_per_visit: 2e-6,
        }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("normal_attn_ms", self.normal_attn_ms),
            ("split_prefill_ms", self.split_prefill_ms),
            ("split_decode_ms", self.split_decode_ms),
            ("unified_attn_ms", self.unified_attn_ms),
            ("anchor_spec_tokens", self.anchor_spec_tokens),
            ("anchor_context", self.anchor_context),
            ("attn_multiplier", self.attn_multiplier),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("c_tok_ms", self.c_tok_ms),
            ("context_slope", self.context_slope),
            ("interference", self.interference),
            ("build_ms_per_visit", self.build_ms_per_visit),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if self.unified_attn_ms < self.normal_attn_ms {
            return Err(Error::config(
                "unified_attn_ms must be at least normal_attn_ms",
            ));
        }
        if self.unified_attn_ms > self.split_prefill_ms + self.split_decode_ms {
            return Err(Error::config(
                "unified anchor exceeds batch-split anchors; dominance would break",
            ));
        }
        Ok(())
    }

    fn context_factor(&self, mean_context: f64) -> f64 {
        let f = 1.0 + self.context_slope * (mean_context - self.anchor_context)
            / self.anchor_context;
        f.max(0.0)
    }

    /// Iteration slowdown when `injected` of `total` query tokens belong
    /// to co-resident injected requests.
    pub fn interference_factor(&self, injected_tokens: usize, total_tokens: usize) -> f64 {
        if self.interference == 0.0 || total_tokens == 0 {
            return 1.0;
        }
        1.0 + self.interference * injected_tokens as f64 / total_tokens as f64
    }
}

/// Latency of one engine iteration in milliseconds.
///
/// An empty composition costs nothing. With zero speculative requests,
/// both attention modes reduce to the normal-attention anchor; with any
/// speculative request, split mode pays the prefill-plus-decode anchors
/// while unified mode pays the normal anchor plus a slope that passes
/// exactly through the unified anchor at the anchor composition.
pub fn step_latency(comp: &StepComposition, params: &LatencyParams) -> f64 {
    let tokens = comp.total_tokens();
    if tokens == 0 {
        return 0.0;
    }
    let effective_tokens = tokens.max(params.knee_tokens);
    let token_cost = params.c_tok_ms * effective_tokens as f64;

    let attn_base = if comp.n_spec == 0 {
        params.normal_attn_ms
    } else {
        match params.attention {
            AttentionMode::Split => params.split_prefill_ms + params.split_decode_ms,
            AttentionMode::Unified => {
                let scale = comp.spec_query_tokens() as f64 / params.anchor_spec_tokens;
                params.normal_attn_ms + (params.unified_attn_ms - params.normal_attn_ms) * scale
            }
        }
    };
    let attn = attn_base * params.context_factor(comp.mean_context) * params.attn_multiplier;
    token_cost + attn
}

/// Total simulated time of a step trace, in seconds.
pub fn rollout_time<I>(trace: I, params: &LatencyParams) -> f64
where
    I: IntoIterator<Item = StepComposition>,
{
    trace
        .into_iter()
        .map(|comp| step_latency(&comp, params))
        .sum::<f64>()
        / 1000.0
}

/// End-to-end generation time reduction from a decoding-step reduction
/// ratio `alpha` and a per-step latency increase ratio `mu`:
/// `1 - (1 - alpha) * (1 + mu)`.
pub fn speedup(alpha: f64, mu: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1]");
    debug_assert!(mu >= -1.0, "mu must be >= -1");
    1.0 - (1.0 - alpha) * (1.0 + mu)
}

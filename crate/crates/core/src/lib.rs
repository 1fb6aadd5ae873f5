//! Deterministic, token-exact simulator for synchronous RL rollout
//! acceleration via draft pre-generation in inter-rank idle bubbles.
//!
//! Fast data-parallel ranks that finish their rollout batch early spend the
//! wait for stragglers pre-generating responses for the *next* batch. Those
//! partial responses are indexed in per-prompt suffix trees and replayed as
//! speculative-decoding drafts, verified token-by-token against the live
//! policy so the output distribution is exactly the autoregressive one.
//!
//! The crate is organized around that pipeline:
//!
//! * [`policy`] — filtered next-token distributions and seeded sampling,
//!   with a table-driven Markov policy standing in for the model.
//! * [`suffix`] — bounded-depth suffix indexing of pre-generated token
//!   pools and frequency-ranked draft retrieval.
//! * [`decode`] — draft verification, residual resampling, and rollout
//!   loops (speculative and plain autoregressive).
//! * [`sched`] — the multi-rank step simulation: dispatch, bubbles,
//!   pre-generation under periodic polling, barrier semantics, plus
//!   tail-batching and intra-GPU baseline modes.
//! * [`latency`] — the parametric per-decoding-step cost model and the
//!   step-reduction/latency-increase speedup identity.
//! * [`metrics`] — per-step reports and aggregation.
//! * [`oracle`] — independent brute-force and enumeration oracles used by
//!   the verification suites.

pub mod config;
pub mod decode;
pub mod error;
pub mod latency;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod sched;
pub mod suffix;

/// Token identifier in `[0, vocab)`.
pub type TokenId = u32;

/// Globally unique prompt identifier.
pub type PromptId = u64;

pub use config::{PolicySpec, RunConfig};
pub use decode::{
    autoregressive_rollout, residual, rollout, sample_step, verify_block, DraftSource,
    RolloutResult, StepOutcome, TokenOrigin,
};
pub use error::{Error, Result};
pub use latency::{speedup, step_latency, AttentionMode, LatencyParams, StepComposition};
pub use metrics::RunReport;
pub use policy::{
    apply_filters, sample, EosSchedule, MarkovPolicy, Policy, PolicyDistribution, SamplingParams,
    Vocabulary,
};
pub use sched::{dispatch, BatchPlan, SchedulerMode, Simulation};
pub use suffix::{shard_pools, DraftBlock, SuffixTree, TokenPool};

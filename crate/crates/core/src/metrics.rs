//! Per-step reports and multi-step aggregation.
//!
//! Metric definitions: acceptance rate is accepted draft tokens over
//! proposed draft tokens; acceptance length is mean emitted tokens per
//! verification step (fallback steps are excluded from that mean but
//! count as decoding steps); draft length is mean proposed tokens per
//! verification step. Zero denominators are reported as absent fields,
//! never as NaN.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decode::StepOutcome;
use crate::error::Result;

/// Metrics of one simulated training step (one round, in tail-batching
/// mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub step: usize,
    pub mode: String,
    /// Fingerprint of the generating configuration (mode and output paths
    /// excluded), for cross-run comparability warnings.
    pub config_fingerprint: String,

    /// Wall time of the step: completion of the slowest rank's batch, ms.
    pub rollout_time_ms: f64,
    /// When all ranks passed the barrier (includes any pre-generation
    /// polling overshoot), ms from step start.
    pub barrier_ms: f64,

    pub decoding_steps_avg: f64,
    /// Per-request maximum within this step.
    pub decoding_steps_max: u64,
    pub response_len_avg: f64,
    pub response_len_max: u64,

    pub acceptance_length: Option<f64>,
    pub draft_length: Option<f64>,
    pub acceptance_rate: Option<f64>,
    /// Normalized distribution of emitted-tokens-per-verification-step,
    /// bins `1 ..= K+1`. Empty when no verification step ran.
    pub streak_histogram: Vec<f64>,

    pub verification_steps: u64,
    pub fallback_steps: u64,
    pub accepted_tokens: u64,
    pub proposed_tokens: u64,
    pub completed_responses: u64,

    pub bubble_avg_ms: f64,
    pub bubble_max_ms: f64,
    pub pregen_len_avg: Option<f64>,
    pub pregen_len_max: Option<u64>,
    pub suffix_build_ms_avg: f64,
    pub suffix_build_ms_max: f64,
    pub suffix_build_visits: u64,

    /// Decoding iterations of the rank that finished last; the critical
    /// path satisfies `straggler_iters * mean_step_latency_ms ==
    /// rollout_time_ms` exactly.
    pub straggler_iters: u64,
    pub mean_step_latency_ms: f64,

    /// Tail-batching only: `short` or `tail`, and the deferred-queue size
    /// after the round.
    pub round_kind: Option<String>,
    pub queue_after: Option<usize>,
    /// Tail-batching only: prompt groups started this round.
    pub round_started: Option<usize>,
}

impl RunReport {
    /// The acceptance-rate/length/draft-length identity:
    /// `rate == (acceptance_length - 1) / draft_length`, exact because
    /// every verification step emits its accepted tokens plus exactly one
    /// recovered-or-bonus token.
    pub fn acceptance_identity_residual(&self) -> Option<f64> {
        let (rate, len, draft) = (
            self.acceptance_rate?,
            self.acceptance_length?,
            self.draft_length?,
        );
        Some((rate - (len - 1.0) / draft).abs())
    }
}

/// Normalized histogram of emitted-tokens-per-verification-step over the
/// bins `1 ..= draft_len + 1`. Fallback steps are ignored.
pub fn streak_histogram(outcomes: &[StepOutcome], draft_len: usize) -> Vec<f64> {
    let mut bins = vec![0u64; draft_len + 1];
    let mut total = 0u64;
    for out in outcomes.iter().filter(|o| o.is_verification()) {
        let emitted = out.emitted.len().clamp(1, draft_len + 1);
        bins[emitted - 1] += 1;
        total += 1;
    }
    if total == 0 {
        return Vec::new();
    }
    bins.into_iter().map(|b| b as f64 / total as f64).collect()
}

/// Mean-of-steps rollup with both maximum semantics (per-step maxima
/// averaged, and the global maximum across steps).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub steps: usize,
    pub rollout_time_ms_total: f64,
    pub rollout_time_ms_avg: f64,
    pub decoding_steps_avg: f64,
    pub decoding_steps_max_avg: f64,
    pub decoding_steps_max_global: u64,
    pub response_len_avg: f64,
    pub response_len_max_avg: f64,
    pub response_len_max_global: u64,
    pub acceptance_length: Option<f64>,
    pub draft_length: Option<f64>,
    pub acceptance_rate: Option<f64>,
    pub bubble_avg_ms: f64,
    pub bubble_max_ms: f64,
    pub straggler_iters_total: u64,
    pub suffix_build_ms_avg: f64,
    pub suffix_build_ms_max: f64,
}

/// Averages per-step values across steps; speculative ratios are
/// recomputed from pooled token counts so the acceptance identity still
/// holds on the rollup.
pub fn aggregate(reports: &[RunReport]) -> Aggregate {
    assert!(!reports.is_empty(), "cannot aggregate zero reports");
    let n = reports.len() as f64;
    let sum = |f: &dyn Fn(&RunReport) -> f64| reports.iter().map(f).sum::<f64>();

    let verif: u64 = reports.iter().map(|r| r.verification_steps).sum();
    let accepted: u64 = reports.iter().map(|r| r.accepted_tokens).sum();
    let proposed: u64 = reports.iter().map(|r| r.proposed_tokens).sum();
    let emitted_verif: f64 = reports
        .iter()
        .filter_map(|r| Some(r.acceptance_length? * r.verification_steps as f64))
        .sum();

    Aggregate {
        steps: reports.len(),
        rollout_time_ms_total: sum(&|r| r.rollout_time_ms),
        rollout_time_ms_avg: sum(&|r| r.rollout_time_ms) / n,
        decoding_steps_avg: sum(&|r| r.decoding_steps_avg) / n,
        decoding_steps_max_avg: sum(&|r| r.decoding_steps_max as f64) / n,
        decoding_steps_max_global: reports.iter().map(|r| r.decoding_steps_max).max().unwrap(),
        response_len_avg: sum(&|r| r.response_len_avg) / n,
        response_len_max_avg: sum(&|r| r.response_len_max as f64) / n,
        response_len_max_global: reports.iter().map(|r| r.response_len_max).max().unwrap(),
        acceptance_length: (verif > 0).then(|| emitted_verif / verif as f64),
        draft_length: (verif > 0).then(|| proposed as f64 / verif as f64),
        acceptance_rate: (proposed > 0).then(|| accepted as f64 / proposed as f64),
        bubble_avg_ms: sum(&|r| r.bubble_avg_ms) / n,
        bubble_max_ms: sum(&|r| r.bubble_max_ms) / n,
        straggler_iters_total: reports.iter().map(|r| r.straggler_iters).sum(),
        suffix_build_ms_avg: sum(&|r| r.suffix_build_ms_avg) / n,
        suffix_build_ms_max: reports
            .iter()
            .map(|r| r.suffix_build_ms_max)
            .fold(0.0, f64::max),
    }
}

/// Appends reports as JSON lines.
pub fn write_jsonl<W: Write>(mut w: W, reports: &[RunReport]) -> Result<()> {
    for report in reports {
        let line = serde_json::to_string(report).expect("report serializes");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads a JSON-lines report file.
pub fn read_jsonl(text: &str) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let report: RunReport = serde_json::from_str(line)
            .map_err(|e| crate::error::Error::parse(idx + 1, e.to_string()))?;
        reports.push(report);
    }
    Ok(reports)
}

const CSV_COLUMNS: &[&str] = &[
    "step",
    "mode",
    "rollout_time_ms",
    "barrier_ms",
    "decoding_steps_avg",
    "decoding_steps_max",
    "response_len_avg",
    "response_len_max",
    "acceptance_length",
    "draft_length",
    "acceptance_rate",
    "verification_steps",
    "fallback_steps",
    "bubble_avg_ms",
    "bubble_max_ms",
    "pregen_len_avg",
    "pregen_len_max",
    "suffix_build_ms_avg",
    "straggler_iters",
    "round_kind",
    "queue_after",
];

fn opt_num<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// Writes reports as CSV with a fixed column set.
pub fn write_csv<W: Write>(mut w: W, reports: &[RunReport]) -> Result<()> {
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for r in reports {
        let row = [
            r.step.to_string(),
            r.mode.clone(),
            r.rollout_time_ms.to_string(),
            r.barrier_ms.to_string(),
            r.decoding_steps_avg.to_string(),
            r.decoding_steps_max.to_string(),
            r.response_len_avg.to_string(),
            r.response_len_max.to_string(),
            opt_num(&r.acceptance_length),
            opt_num(&r.draft_length),
            opt_num(&r.acceptance_rate),
            r.verification_steps.to_string(),
            r.fallback_steps.to_string(),
            r.bubble_avg_ms.to_string(),
            r.bubble_max_ms.to_string(),
            opt_num(&r.pregen_len_avg),
            opt_num(&r.pregen_len_max),
            r.suffix_build_ms_avg.to_string(),
            r.straggler_iters.to_string(),
            opt_num(&r.round_kind),
            opt_num(&r.queue_after),
        ];
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Emits per-step series for plotting: step time and maximum response
/// length per mode/round, one row per step.
pub fn write_plot_data<W: Write>(mut w: W, reports: &[RunReport]) -> Result<()> {
    writeln!(
        w,
        "step,mode,round_kind,rollout_time_s,response_len_max,bubble_avg_s,bubble_max_s"
    )?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step,
            r.mode,
            r.round_kind.as_deref().unwrap_or(""),
            r.rollout_time_ms / 1000.0,
            r.response_len_max,
            r.bubble_avg_ms / 1000.0,
            r.bubble_max_ms / 1000.0,
        )?;
    }
    Ok(())
}

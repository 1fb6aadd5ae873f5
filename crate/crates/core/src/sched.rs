//! Synchronous multi-rank rollout simulation.
//!
//! Each training step dispatches prompt groups round-robin over the
//! data-parallel ranks. A rank advances all of its live requests together,
//! one engine iteration per decoding step, paying the latency model per
//! iteration. In the draft-assisted modes a rank that finishes its batch
//! enters pre-generation: it decodes next-step responses inside its idle
//! bubble, polling the central synchronizer every `T` of its own decoding
//! steps and halting (truncating in-flight sequences) at the first poll
//! after global completion. The emitted partial responses become the next
//! step's per-prompt suffix indices.
//!
//! Ranks never interact except through the synchronizer, so the step is
//! simulated rank-by-rank in rank order: batch-N rollout first (recording
//! completion times), then the pre-generation phase against the known
//! global completion time. This single-loop execution is deterministic;
//! simulated time accumulates across steps, each step starting at the
//! previous barrier.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decode::{sample_step, verify_block, DraftSource, TokenOrigin};
use crate::error::{Error, Result};
use crate::latency::{step_latency, LatencyParams, StepComposition};
use crate::metrics::RunReport;
use crate::policy::{MarkovPolicy, Policy, SamplingParams, Vocabulary};
use crate::rng::{derive_seed, purpose, request_rng};
use crate::suffix::{shard_pools, DraftBlock, NgramScanner, SuffixTree, TokenPool};
use crate::{PromptId, TokenId};

/// One step's worth of work: `batch` prompts, `group` samples each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub step: usize,
    pub prompts: Vec<PromptId>,
    pub group: usize,
    pub pregen_group: usize,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.prompts.len()
    }

    pub fn total_requests(&self) -> usize {
        self.prompts.len() * self.group
    }
}

/// Scheduler variant. Variant-specific parameters live on their variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SchedulerMode {
    /// Plain autoregressive rollout, no pre-generation.
    Baseline,
    /// Pre-generate in inter-rank bubbles; suffix-tree drafts.
    BubbleSpec,
    /// Pre-generate in inter-rank bubbles; linear-scan n-gram drafts.
    NgramDraft,
    /// Over-provision `eta * B` prompts per round, defer stragglers to
    /// dedicated tail rounds. No speculation.
    TailBatching { eta: f64 },
    /// BubbleSpec plus early pre-generation injected once a rank's active
    /// batch falls below `threshold` (first `helpers` ranks only).
    IntraGpu { threshold: usize, helpers: usize },
}

impl SchedulerMode {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerMode::Baseline => "baseline",
            SchedulerMode::BubbleSpec => "bubblespec",
            SchedulerMode::NgramDraft => "ngram-draft",
            SchedulerMode::TailBatching { .. } => "tail-batching",
            SchedulerMode::IntraGpu { .. } => "intra-gpu",
        }
    }

    /// Whether idle bubbles are used for next-step pre-generation.
    pub fn pre_generates(&self) -> bool {
        matches!(
            self,
            SchedulerMode::BubbleSpec | SchedulerMode::NgramDraft | SchedulerMode::IntraGpu { .. }
        )
    }
}

/// Deterministic round-robin dispatch by prompt index; a prompt's entire
/// group lands on one rank so suffix indices shard cleanly.
pub fn dispatch(plan: &BatchPlan, ranks: usize) -> Result<BTreeMap<PromptId, usize>> {
    if ranks == 0 {
        return Err(Error::config("rank count must be >= 1"));
    }
    Ok(plan
        .prompts
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i % ranks))
        .collect())
}

/// Central completion tracker: the only cross-rank mutable point.
#[derive(Debug)]
pub struct Synchronizer {
    done_at: Vec<Option<f64>>,
    poll_interval: usize,
}

impl Synchronizer {
    pub fn new(ranks: usize, poll_interval: usize) -> Self {
        Synchronizer {
            done_at: vec![None; ranks],
            poll_interval,
        }
    }

    pub fn mark_done(&mut self, rank: usize, t: f64) {
        self.done_at[rank] = Some(t);
    }

    /// Whether every rank had flagged completion by simulated time `t`.
    pub fn all_done_at(&self, t: f64) -> bool {
        self.done_at.iter().all(|d| d.is_some_and(|x| x <= t))
    }

    pub fn global_completion(&self) -> Option<f64> {
        let mut max = f64::NEG_INFINITY;
        for d in &self.done_at {
            max = max.max((*d)?);
        }
        Some(max)
    }

    pub fn poll_interval(&self) -> usize {
        self.poll_interval
    }
}

/// Next-step draft pools, tagged with the step they may serve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PregenPools {
    pub for_step: usize,
    pub pools: Vec<TokenPool>,
}

/// Per-request slice of a step trace, for invariant checking.
#[derive(Debug, Clone)]
pub struct RequestTrace {
    pub step: usize,
    pub response_len: usize,
    pub decoding_steps: u64,
    pub origins_len: usize,
    pub accepted_any: bool,
}

/// Raw per-step observables consumed by the invariant checker and tests.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub step: usize,
    pub start_ms: f64,
    pub t_done: Vec<f64>,
    pub t_global: f64,
    pub barrier_ms: f64,
    pub halt_ms: Vec<f64>,
    pub pregen_steps_after_global: Vec<u64>,
    pub poll_interval: usize,
    pub completed_responses: u64,
    pub expected_responses: u64,
    pub requests: Vec<RequestTrace>,
    pub pools_for_step: Option<usize>,
}

/// Checks the cross-rank invariants of one simulated step; returns one
/// message per violation.
pub fn check_step_invariants(trace: &StepTrace) -> Vec<String> {
    let mut violations = Vec::new();
    if trace.completed_responses != trace.expected_responses {
        violations.push(format!(
            "step {}: conservation broken: {} responses, expected {}",
            trace.step, trace.completed_responses, trace.expected_responses
        ));
    }
    for (rank, &overshoot) in trace.pregen_steps_after_global.iter().enumerate() {
        if overshoot > trace.poll_interval as u64 {
            violations.push(format!(
                "step {}: rank {rank} ran {overshoot} pre-generation steps past global \
                 completion (poll interval {})",
                trace.step, trace.poll_interval
            ));
        }
    }
    for (rank, &done) in trace.t_done.iter().enumerate() {
        if done > trace.t_global + 1e-9 {
            violations.push(format!(
                "step {}: rank {rank} completion {done} after global {}",
                trace.step, trace.t_global
            ));
        }
    }
    let barrier_floor = trace
        .halt_ms
        .iter()
        .chain(trace.t_done.iter())
        .fold(trace.t_global, |a, &b| a.max(b));
    if trace.barrier_ms + 1e-9 < barrier_floor {
        violations.push(format!(
            "step {}: barrier {} before last rank activity {barrier_floor}",
            trace.step, trace.barrier_ms
        ));
    }
    if let Some(for_step) = trace.pools_for_step {
        if for_step != trace.step + 1 {
            violations.push(format!(
                "step {}: emitted pools tagged for step {for_step}",
                trace.step
            ));
        }
    }
    for req in &trace.requests {
        if req.step != trace.step {
            violations.push(format!(
                "step {}: response carries policy version {}",
                trace.step, req.step
            ));
        }
        if req.origins_len != req.response_len {
            violations.push(format!(
                "step {}: {} origin tags for {} tokens",
                trace.step, req.origins_len, req.response_len
            ));
        }
        if req.decoding_steps > req.response_len as u64 {
            violations.push(format!(
                "step {}: {} decoding steps exceed response length {}",
                trace.step, req.decoding_steps, req.response_len
            ));
        }
        // Drafts never propose EOS (pools are EOS-stripped), so a step
        // that accepted anything emitted at least two tokens.
        if req.decoding_steps == req.response_len as u64 && req.accepted_any {
            violations.push(format!(
                "step {}: steps == length but draft tokens were accepted",
                trace.step
            ));
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Internal engine
// ---------------------------------------------------------------------------

struct Request {
    prompt: PromptId,
    step: usize,
    prompt_len: usize,
    seq: Vec<TokenId>,
    rng: ChaCha8Rng,
    done: bool,
    finish_ms: f64,
    steps: u64,
    origins: Vec<TokenOrigin>,
    accepted_any: bool,
}

impl Request {
    fn response_len(&self) -> usize {
        self.seq.len() - self.prompt_len
    }

    fn response(&self) -> &[TokenId] {
        &self.seq[self.prompt_len..]
    }
}

/// Synthetic prompt: the lead token cycles over the non-EOS vocabulary
/// (so per-lead hazard factors partition prompts into stable classes),
/// the rest is seed-derived.
pub(crate) fn prompt_tokens(
    vocab: Vocabulary,
    seed: u64,
    prompt: PromptId,
    len: usize,
) -> Vec<TokenId> {
    let non_eos = vocab.size() as u64 - 1;
    let skip_eos = |slot: u64| -> TokenId {
        if slot >= vocab.eos() as u64 {
            (slot + 1) as TokenId
        } else {
            slot as TokenId
        }
    };
    let mut toks = Vec::with_capacity(len);
    toks.push(skip_eos(prompt % non_eos));
    for j in 1..len {
        let slot = derive_seed(seed, &[purpose::PROMPT, prompt, j as u64]) % non_eos;
        toks.push(skip_eos(slot));
    }
    toks
}

enum RankDrafts {
    Tree(SuffixTree),
    Scan(NgramScanner),
}

impl RankDrafts {
    fn draft(&self, prefix: &[TokenId], k: usize) -> DraftBlock {
        match self {
            RankDrafts::Tree(t) => t.draft(prefix, k),
            RankDrafts::Scan(s) => s.draft(prefix, k),
        }
    }
}

type DraftMap = BTreeMap<PromptId, RankDrafts>;

#[derive(Default)]
struct StepTally {
    verif_steps: u64,
    fallback_steps: u64,
    accepted: u64,
    proposed: u64,
    emitted_verif: u64,
    streak_bins: Vec<u64>,
}

impl StepTally {
    fn new(draft_len: usize) -> Self {
        StepTally {
            streak_bins: vec![0; draft_len + 1],
            ..Default::default()
        }
    }

    fn merge(&mut self, other: &StepTally) {
        self.verif_steps += other.verif_steps;
        self.fallback_steps += other.fallback_steps;
        self.accepted += other.accepted;
        self.proposed += other.proposed;
        self.emitted_verif += other.emitted_verif;
        for (a, b) in self.streak_bins.iter_mut().zip(&other.streak_bins) {
            *a += b;
        }
    }
}

struct StepEnv<'a> {
    policy: &'a MarkovPolicy,
    params: &'a SamplingParams,
    lat: &'a LatencyParams,
    draft_len: usize,
    max_len: usize,
    poll_interval: usize,
    seed: u64,
    prompt_len: usize,
    record_iters: bool,
}

impl StepEnv<'_> {
    fn make_request(&self, step: usize, prompt: PromptId, sample: u32, tag: u64) -> Request {
        let toks = prompt_tokens(self.policy.vocab(), self.seed, prompt, self.prompt_len);
        Request {
            prompt,
            step,
            prompt_len: toks.len(),
            seq: toks,
            rng: request_rng(self.seed, &[tag, step as u64, prompt, sample as u64]),
            done: false,
            finish_ms: -1.0,
            steps: 0,
            origins: Vec::new(),
            accepted_any: false,
        }
    }

    fn rank_requests(
        &self,
        plan: &BatchPlan,
        assignment: &BTreeMap<PromptId, usize>,
        rank: usize,
    ) -> Vec<Request> {
        let mut main = Vec::new();
        for &p in plan.prompts.iter().filter(|&&p| assignment[&p] == rank) {
            for s in 0..plan.group {
                main.push(self.make_request(plan.step, p, s as u32, purpose::MAIN));
            }
        }
        main
    }
}

struct RankEngine<'a> {
    rank: usize,
    env: &'a StepEnv<'a>,
    drafts: &'a DraftMap,
    main: Vec<Request>,
    pregen: Vec<Request>,
    next_step: usize,
    next_prompts: Vec<PromptId>,
    pregen_group: usize,
    t: f64,
    iters: u64,
    iter_ends: Vec<f64>,
    pregen_steps: u64,
    pregen_steps_after_global: u64,
    threshold: Option<usize>,
    inject_enabled: bool,
    injected: bool,
    crossing_ms: Option<f64>,
    t_done: f64,
    halt_ms: f64,
    build_ms: f64,
    build_visits: u64,
    tally: StepTally,
}

impl<'a> RankEngine<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        rank: usize,
        env: &'a StepEnv<'a>,
        start_ms: f64,
        drafts: &'a DraftMap,
        build_ms: f64,
        build_visits: u64,
        main: Vec<Request>,
        next_step: usize,
        next_prompts: Vec<PromptId>,
        pregen_group: usize,
    ) -> Self {
        RankEngine {
            rank,
            env,
            drafts,
            main,
            pregen: Vec::new(),
            next_step,
            next_prompts,
            pregen_group,
            t: start_ms,
            iters: 0,
            iter_ends: Vec::new(),
            pregen_steps: 0,
            pregen_steps_after_global: 0,
            threshold: None,
            inject_enabled: false,
            injected: false,
            crossing_ms: None,
            t_done: start_ms,
            halt_ms: start_ms,
            build_ms,
            build_visits,
            tally: StepTally::new(env.draft_len),
        }
    }

    fn active_main(&self) -> usize {
        self.main.iter().filter(|r| !r.done).count()
    }

    fn start_injection(&mut self) {
        self.pregen = make_pregen_requests(
            self.env,
            self.next_step,
            &self.next_prompts,
            self.pregen_group,
        );
        self.injected = true;
    }

    /// One engine iteration (= one decoding step for every live request
    /// included). Advances simulated time by the latency model.
    fn iteration(&mut self, include_main: bool, include_pregen: bool) {
        let mut n_normal = 0usize;
        let mut n_spec = 0usize;
        let mut draft_tokens = 0usize;
        let mut ctx_sum = 0usize;
        let mut n_req = 0usize;
        let mut injected_tokens = 0usize;

        if include_main {
            for req in self.main.iter_mut().filter(|r| !r.done) {
                ctx_sum += req.seq.len();
                n_req += 1;
                let remaining = self.env.max_len - (req.seq.len() - req.prompt_len);
                let k = self.env.draft_len.min(remaining.saturating_sub(1));
                let block = if k == 0 {
                    None
                } else {
                    self.drafts
                        .get(&req.prompt)
                        .map(|d| d.draft(&req.seq, k))
                        .filter(|b| !b.is_empty())
                };
                let outcome = match &block {
                    Some(b) => {
                        n_spec += 1;
                        draft_tokens += b.len();
                        verify_block(
                            &mut req.seq,
                            b,
                            self.env.policy,
                            self.env.params,
                            &mut req.rng,
                        )
                    }
                    None => {
                        n_normal += 1;
                        sample_step(&mut req.seq, self.env.policy, self.env.params, &mut req.rng)
                    }
                };
                req.steps += 1;
                req.origins.extend_from_slice(&outcome.origins);
                if outcome.proposed > 0 {
                    self.tally.verif_steps += 1;
                    self.tally.accepted += outcome.accepted as u64;
                    self.tally.proposed += outcome.proposed as u64;
                    self.tally.emitted_verif += outcome.emitted.len() as u64;
                    self.tally.streak_bins[outcome.emitted.len() - 1] += 1;
                    if outcome.accepted > 0 {
                        req.accepted_any = true;
                    }
                } else {
                    self.tally.fallback_steps += 1;
                }
                if outcome.terminal || req.response_len() >= self.env.max_len {
                    req.done = true;
                }
            }
        }

        if include_pregen {
            for req in self.pregen.iter_mut().filter(|r| !r.done) {
                ctx_sum += req.seq.len();
                n_req += 1;
                n_normal += 1;
                if include_main {
                    injected_tokens += 1;
                }
                let outcome =
                    sample_step(&mut req.seq, self.env.policy, self.env.params, &mut req.rng);
                req.steps += 1;
                if outcome.terminal || req.response_len() >= self.env.max_len {
                    req.done = true;
                }
            }
        }

        let comp = StepComposition {
            n_normal,
            n_spec,
            draft_tokens,
            mean_context: if n_req == 0 {
                0.0
            } else {
                ctx_sum as f64 / n_req as f64
            },
        };
        let mut ms = step_latency(&comp, self.env.lat);
        if injected_tokens > 0 {
            ms *= self
                .env
                .lat
                .interference_factor(injected_tokens, comp.total_tokens());
        }
        self.t += ms;
        if include_main {
            self.iters += 1;
            if self.env.record_iters {
                self.iter_ends.push(self.t);
            }
        }
        if include_pregen {
            self.pregen_steps += 1;
        }

        for req in self.main.iter_mut().chain(self.pregen.iter_mut()) {
            if req.done && req.finish_ms < 0.0 {
                req.finish_ms = self.t;
            }
        }
    }

    /// Batch-N rollout to completion. Index build time is charged up
    /// front; the intra-GPU variant may inject pre-generation requests
    /// once the active batch falls below the threshold.
    fn run_rollout(&mut self, sync: &mut Synchronizer) {
        self.t += self.build_ms;
        loop {
            let active = self.active_main();
            if active == 0 {
                break;
            }
            if let Some(th) = self.threshold {
                if self.crossing_ms.is_none() && active < th {
                    self.crossing_ms = Some(self.t);
                    if self.inject_enabled {
                        self.start_injection();
                    }
                }
            }
            let include_pregen = self.injected && self.pregen.iter().any(|r| !r.done);
            self.iteration(true, include_pregen);
        }
        self.t_done = self.t;
        self.halt_ms = self.t;
        sync.mark_done(self.rank, self.t);
    }

    /// Bubble-time pre-generation under periodic polling: one poll on
    /// phase entry, then one every `T` own decoding steps; halt at the
    /// first poll at-or-after global completion, truncating in-flight
    /// sequences. Exhausting the assignment just idles the rank.
    fn run_pregen(&mut self, sync: &Synchronizer, t_global: f64) {
        // Entry poll: the straggler (and any tie) halts before creating
        // any pre-generation work at all.
        if sync.all_done_at(self.t) {
            self.halt_ms = self.t;
            return;
        }
        if !self.injected {
            self.pregen = make_pregen_requests(
                self.env,
                self.next_step,
                &self.next_prompts,
                self.pregen_group,
            );
        }
        let poll = self.env.poll_interval as u64;
        loop {
            if self.pregen_steps > 0 && self.pregen_steps % poll == 0 && sync.all_done_at(self.t) {
                break;
            }
            if self.pregen.iter().all(|r| r.done) {
                break;
            }
            self.iteration(false, true);
            if self.t > t_global {
                self.pregen_steps_after_global += 1;
            }
        }
        self.halt_ms = self.t;
    }

    /// Truncated pre-generation output, EOS stripped, grouped per prompt.
    fn pregen_pools(&self) -> Vec<TokenPool> {
        let mut by_prompt: BTreeMap<PromptId, Vec<Vec<TokenId>>> = BTreeMap::new();
        for &p in &self.next_prompts {
            by_prompt.entry(p).or_default();
        }
        for req in &self.pregen {
            let mut seq = req.response().to_vec();
            if seq.last() == Some(&self.env.policy.vocab().eos()) {
                seq.pop();
            }
            by_prompt.entry(req.prompt).or_default().push(seq);
        }
        by_prompt
            .into_iter()
            .map(|(prompt, sequences)| TokenPool { prompt, sequences })
            .collect()
    }
}

fn make_pregen_requests(
    env: &StepEnv,
    next_step: usize,
    prompts: &[PromptId],
    group: usize,
) -> Vec<Request> {
    let mut reqs = Vec::with_capacity(prompts.len() * group);
    for &p in prompts {
        for s in 0..group {
            reqs.push(env.make_request(next_step, p, s as u32, purpose::PREGEN));
        }
    }
    reqs
}

// ---------------------------------------------------------------------------
// Step runner and simulation driver
// ---------------------------------------------------------------------------

/// Output of one simulated step.
pub struct StepRun {
    pub report: RunReport,
    pub trace: StepTrace,
}

/// Multi-step simulation with an accumulating clock. Pools produced in
/// step `N` feed the suffix indices of step `N + 1`.
pub struct Simulation {
    cfg: RunConfig,
    mode: SchedulerMode,
    policy: MarkovPolicy,
    fingerprint: String,
    clock_ms: f64,
    next_step: usize,
    pending: Option<PregenPools>,
    next_fresh_prompt: PromptId,
    tail_queue: VecDeque<PromptId>,
}

impl Simulation {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.scheduler_mode()?;
        let policy = cfg.policy.build()?;
        Ok(Simulation {
            fingerprint: cfg.fingerprint(),
            mode,
            policy,
            clock_ms: 0.0,
            next_step: 0,
            pending: None,
            next_fresh_prompt: 0,
            tail_queue: VecDeque::new(),
            cfg,
        })
    }

    pub fn mode(&self) -> SchedulerMode {
        self.mode
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Pools pre-generated by the most recent step, which the next step
    /// will consume (for file emission and inspection).
    pub fn pending_pools(&self) -> Option<&PregenPools> {
        self.pending.as_ref()
    }

    /// Deferred prompt groups awaiting a tail round.
    pub fn tail_queue_len(&self) -> usize {
        self.tail_queue.len()
    }

    /// Fixed prompt stream: step `N` consumes ids `[N * B, (N + 1) * B)`.
    fn plan_for(&self, step: usize) -> BatchPlan {
        let b = self.cfg.batch;
        BatchPlan {
            step,
            prompts: ((step * b) as PromptId..((step + 1) * b) as PromptId).collect(),
            group: self.cfg.group,
            pregen_group: self.cfg.pregen_group,
        }
    }

    /// Runs one step (one round in tail-batching mode).
    pub fn next_step_run(&mut self) -> Result<StepRun> {
        let run = match self.mode {
            SchedulerMode::TailBatching { eta } => self.run_tail_round(eta)?,
            _ => self.run_standard_step()?,
        };
        self.clock_ms = run.trace.barrier_ms;
        self.next_step += 1;
        Ok(run)
    }

    /// Runs the configured number of steps, returning per-step reports.
    pub fn run(&mut self) -> Result<Vec<RunReport>> {
        (0..self.cfg.steps)
            .map(|_| self.next_step_run().map(|r| r.report))
            .collect()
    }

    fn env(&self, record_iters: bool) -> StepEnv<'_> {
        StepEnv {
            policy: &self.policy,
            params: &self.cfg.sampling,
            lat: &self.cfg.latency,
            draft_len: self.cfg.draft_len,
            max_len: self.cfg.max_len,
            poll_interval: self.cfg.poll_interval,
            seed: self.cfg.seed,
            prompt_len: self.cfg.prompt_len,
            record_iters,
        }
    }

    fn run_standard_step(&mut self) -> Result<StepRun> {
        let step = self.next_step;
        let start_ms = self.clock_ms;
        let plan = self.plan_for(step);
        let next_plan = self.plan_for(step + 1);
        let ranks = self.cfg.ranks;
        let assignment = dispatch(&plan, ranks)?;
        let next_assignment = dispatch(&next_plan, ranks)?;

        let pools_in = self.pending.take();
        if let Some(ref pools) = pools_in {
            if pools.for_step != step {
                return Err(Error::StalePools {
                    built: pools.for_step,
                    used: step,
                });
            }
        }
        let shards: Vec<Vec<TokenPool>> = match pools_in {
            Some(p) => shard_pools(p.pools, &assignment, ranks)?,
            None => vec![Vec::new(); ranks],
        };

        // Per-rank draft indices; construction cost is charged to the
        // rank before it starts decoding.
        let mut draft_maps: Vec<DraftMap> = Vec::with_capacity(ranks);
        let mut build_costs: Vec<(f64, u64)> = Vec::with_capacity(ranks);
        for shard in shards {
            let mut map = DraftMap::new();
            let mut visits = 0u64;
            for pool in shard {
                let prompt = pool.prompt;
                let entry = match self.mode {
                    SchedulerMode::NgramDraft => RankDrafts::Scan(NgramScanner::new(
                        pool,
                        self.cfg.depth_bound - 1,
                        self.cfg.min_match,
                    )),
                    _ => {
                        let tree =
                            SuffixTree::build(&pool, self.cfg.depth_bound, self.cfg.min_match);
                        visits += tree.build_visits();
                        RankDrafts::Tree(tree)
                    }
                };
                map.insert(prompt, entry);
            }
            let ms = visits as f64 * self.cfg.latency.build_ms_per_visit;
            draft_maps.push(map);
            build_costs.push((ms, visits));
        }

        let env = self.env(false);
        let mut sync = Synchronizer::new(ranks, self.cfg.poll_interval);

        let mut engines: Vec<RankEngine> = (0..ranks)
            .map(|rank| {
                let next_prompts: Vec<PromptId> = next_plan
                    .prompts
                    .iter()
                    .copied()
                    .filter(|p| next_assignment[p] == rank)
                    .collect();
                RankEngine::new(
                    rank,
                    &env,
                    start_ms,
                    &draft_maps[rank],
                    build_costs[rank].0,
                    build_costs[rank].1,
                    env.rank_requests(&plan, &assignment, rank),
                    step + 1,
                    next_prompts,
                    plan.pregen_group,
                )
            })
            .collect();

        // Intra-GPU mode: probe crossing times without injection, then
        // grant injection to the first `helpers` ranks to cross. The
        // pre-crossing trajectory does not depend on injection, so the
        // probe is exact.
        if let SchedulerMode::IntraGpu { threshold, helpers } = self.mode {
            let mut crossers: Vec<(f64, usize)> = Vec::new();
            for rank in 0..ranks {
                let mut probe_sync = Synchronizer::new(ranks, self.cfg.poll_interval);
                let mut probe = RankEngine::new(
                    rank,
                    &env,
                    start_ms,
                    &draft_maps[rank],
                    build_costs[rank].0,
                    build_costs[rank].1,
                    env.rank_requests(&plan, &assignment, rank),
                    step + 1,
                    Vec::new(),
                    plan.pregen_group,
                );
                probe.threshold = Some(threshold);
                probe.run_rollout(&mut probe_sync);
                if let Some(cross) = probe.crossing_ms {
                    crossers.push((cross, rank));
                }
            }
            crossers.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, rank) in crossers.iter().take(helpers) {
                engines[rank].inject_enabled = true;
            }
            for engine in engines.iter_mut() {
                engine.threshold = Some(threshold);
            }
        }

        // Phase A: batch-N rollout on every rank (rank order; ranks are
        // independent until the barrier).
        for engine in engines.iter_mut() {
            engine.run_rollout(&mut sync);
        }
        let t_global = sync.global_completion().expect("all ranks marked");

        // Phase B: pre-generation inside the bubbles.
        if self.mode.pre_generates() {
            for engine in engines.iter_mut() {
                engine.run_pregen(&sync, t_global);
            }
        }

        let barrier_ms = engines.iter().map(|e| e.halt_ms).fold(t_global, f64::max);

        let pools_out = if self.mode.pre_generates() {
            let pools: Vec<TokenPool> = engines.iter().flat_map(|e| e.pregen_pools()).collect();
            Some(PregenPools {
                for_step: step + 1,
                pools,
            })
        } else {
            None
        };

        let run = assemble_step(
            &self.cfg,
            self.mode,
            &self.fingerprint,
            step,
            start_ms,
            t_global,
            barrier_ms,
            &engines,
            pools_out.as_ref().map(|p| p.for_step),
            plan.total_requests() as u64,
        );
        drop(engines);
        self.pending = pools_out;
        Ok(run)
    }

    fn run_tail_round(&mut self, eta: f64) -> Result<StepRun> {
        let step = self.next_step;
        let start_ms = self.clock_ms;
        let b = self.cfg.batch;
        let ranks = self.cfg.ranks;

        let (kind, prompts) = if self.tail_queue.len() >= b {
            let prompts: Vec<PromptId> =
                (0..b).map(|_| self.tail_queue.pop_front().unwrap()).collect();
            (RoundKind::Tail, prompts)
        } else {
            let expanded = (eta * b as f64).ceil() as usize;
            let prompts: Vec<PromptId> =
                (self.next_fresh_prompt..self.next_fresh_prompt + expanded as u64).collect();
            self.next_fresh_prompt += expanded as u64;
            (RoundKind::Short, prompts)
        };

        let plan = BatchPlan {
            step,
            prompts: prompts.clone(),
            group: self.cfg.group,
            pregen_group: 0,
        };
        let assignment = dispatch(&plan, ranks)?;
        let empty_drafts = DraftMap::new();
        let env = self.env(true);
        let mut sync = Synchronizer::new(ranks, self.cfg.poll_interval);

        let mut engines: Vec<RankEngine> = (0..ranks)
            .map(|rank| {
                RankEngine::new(
                    rank,
                    &env,
                    start_ms,
                    &empty_drafts,
                    0.0,
                    0,
                    env.rank_requests(&plan, &assignment, rank),
                    step + 1,
                    Vec::new(),
                    0,
                )
            })
            .collect();
        for engine in engines.iter_mut() {
            engine.run_rollout(&mut sync);
        }

        // Group completion events: a prompt group is done when all of its
        // requests are. The round ends at the B-th completion (short
        // rounds) or at full completion (tail rounds); later work is
        // abandoned.
        let mut events: Vec<(f64, PromptId)> = Vec::with_capacity(prompts.len());
        for engine in &engines {
            let mut group_done: BTreeMap<PromptId, f64> = BTreeMap::new();
            for req in &engine.main {
                let slot = group_done.entry(req.prompt).or_insert(0.0);
                *slot = slot.max(req.finish_ms);
            }
            events.extend(group_done.into_iter().map(|(p, t)| (t, p)));
        }
        events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

        let (wall_ms, completed): (f64, Vec<PromptId>) = match kind {
            RoundKind::Tail => (
                events.last().map(|e| e.0).unwrap_or(start_ms),
                events.iter().map(|e| e.1).collect(),
            ),
            RoundKind::Short => {
                let cutoff = events[b - 1];
                (cutoff.0, events[..b].iter().map(|e| e.1).collect())
            }
        };
        let completed_set: BTreeSet<PromptId> = completed.iter().copied().collect();
        let mut deferred: Vec<PromptId> = prompts
            .iter()
            .copied()
            .filter(|p| !completed_set.contains(p))
            .collect();
        deferred.sort_unstable();

        let run = assemble_tail_round(
            &self.cfg,
            &self.fingerprint,
            step,
            start_ms,
            wall_ms,
            kind,
            &engines,
            &completed_set,
            prompts.len(),
            self.tail_queue.len() + deferred.len(),
        );
        drop(engines);
        self.tail_queue.extend(deferred);
        Ok(run)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RoundKind {
    Short,
    Tail,
}

impl RoundKind {
    fn name(&self) -> &'static str {
        match self {
            RoundKind::Short => "short",
            RoundKind::Tail => "tail",
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble_step(
    cfg: &RunConfig,
    mode: SchedulerMode,
    fingerprint: &str,
    step: usize,
    start_ms: f64,
    t_global: f64,
    barrier_ms: f64,
    engines: &[RankEngine],
    pools_for_step: Option<usize>,
    expected_responses: u64,
) -> StepRun {
    let mut tally = StepTally::new(cfg.draft_len);
    for engine in engines {
        tally.merge(&engine.tally);
    }

    let mut total_steps = 0u64;
    let mut max_steps = 0u64;
    let mut total_resp = 0u64;
    let mut max_resp = 0u64;
    let mut n_requests = 0u64;
    let mut requests = Vec::new();
    for engine in engines {
        for req in &engine.main {
            total_steps += req.steps;
            max_steps = max_steps.max(req.steps);
            total_resp += req.response_len() as u64;
            max_resp = max_resp.max(req.response_len() as u64);
            n_requests += 1;
            requests.push(RequestTrace {
                step: req.step,
                response_len: req.response_len(),
                decoding_steps: req.steps,
                origins_len: req.origins.len(),
                accepted_any: req.accepted_any,
            });
        }
    }

    let rollout_time_ms = t_global - start_ms;
    let bubbles: Vec<f64> = engines.iter().map(|e| t_global - e.t_done).collect();
    let straggler = engines
        .iter()
        .max_by(|a, b| a.t_done.partial_cmp(&b.t_done).unwrap())
        .expect("at least one rank");

    let pregen_lens: Vec<u64> = engines
        .iter()
        .flat_map(|e| e.pregen.iter().map(|r| r.response_len() as u64))
        .collect();
    let build_ms: Vec<f64> = engines.iter().map(|e| e.build_ms).collect();

    let report = RunReport {
        step,
        mode: mode.name().to_string(),
        config_fingerprint: fingerprint.to_string(),
        rollout_time_ms,
        barrier_ms,
        decoding_steps_avg: total_steps as f64 / n_requests as f64,
        decoding_steps_max: max_steps,
        response_len_avg: total_resp as f64 / n_requests as f64,
        response_len_max: max_resp,
        acceptance_length: (tally.verif_steps > 0)
            .then(|| tally.emitted_verif as f64 / tally.verif_steps as f64),
        draft_length: (tally.verif_steps > 0)
            .then(|| tally.proposed as f64 / tally.verif_steps as f64),
        acceptance_rate: (tally.proposed > 0)
            .then(|| tally.accepted as f64 / tally.proposed as f64),
        streak_histogram: if tally.verif_steps == 0 {
            Vec::new()
        } else {
            tally
                .streak_bins
                .iter()
                .map(|&b| b as f64 / tally.verif_steps as f64)
                .collect()
        },
        verification_steps: tally.verif_steps,
        fallback_steps: tally.fallback_steps,
        accepted_tokens: tally.accepted,
        proposed_tokens: tally.proposed,
        completed_responses: n_requests,
        bubble_avg_ms: bubbles.iter().sum::<f64>() / bubbles.len() as f64,
        bubble_max_ms: bubbles.iter().fold(0.0f64, |a, &b| a.max(b)),
        pregen_len_avg: (!pregen_lens.is_empty())
            .then(|| pregen_lens.iter().sum::<u64>() as f64 / pregen_lens.len() as f64),
        pregen_len_max: pregen_lens.iter().max().copied(),
        suffix_build_ms_avg: build_ms.iter().sum::<f64>() / build_ms.len() as f64,
        suffix_build_ms_max: build_ms.iter().fold(0.0f64, |a, &b| a.max(b)),
        suffix_build_visits: engines.iter().map(|e| e.build_visits).sum(),
        straggler_iters: straggler.iters,
        mean_step_latency_ms: if straggler.iters == 0 {
            0.0
        } else {
            rollout_time_ms / straggler.iters as f64
        },
        round_kind: None,
        queue_after: None,
        round_started: None,
    };

    let trace = StepTrace {
        step,
        start_ms,
        t_done: engines.iter().map(|e| e.t_done).collect(),
        t_global,
        barrier_ms,
        halt_ms: engines.iter().map(|e| e.halt_ms).collect(),
        pregen_steps_after_global: engines
            .iter()
            .map(|e| e.pregen_steps_after_global)
            .collect(),
        poll_interval: cfg.poll_interval,
        completed_responses: n_requests,
        expected_responses,
        requests,
        pools_for_step,
    };

    StepRun { report, trace }
}

#[allow(clippy::too_many_arguments)]
fn assemble_tail_round(
    cfg: &RunConfig,
    fingerprint: &str,
    step: usize,
    start_ms: f64,
    wall_ms: f64,
    kind: RoundKind,
    engines: &[RankEngine],
    completed: &BTreeSet<PromptId>,
    started: usize,
    queue_after: usize,
) -> StepRun {
    let mut total_steps = 0u64;
    let mut max_steps = 0u64;
    let mut total_resp = 0u64;
    let mut max_resp = 0u64;
    let mut n_requests = 0u64;
    let mut requests = Vec::new();
    for engine in engines {
        for req in engine.main.iter().filter(|r| completed.contains(&r.prompt)) {
            total_steps += req.steps;
            max_steps = max_steps.max(req.steps);
            total_resp += req.response_len() as u64;
            max_resp = max_resp.max(req.response_len() as u64);
            n_requests += 1;
            requests.push(RequestTrace {
                step: req.step,
                response_len: req.response_len(),
                decoding_steps: req.steps,
                origins_len: req.origins.len(),
                accepted_any: req.accepted_any,
            });
        }
    }

    // The critical path runs through the rank hosting the last counted
    // completion; count its iterations up to the cutoff.
    let last_counted = |engine: &RankEngine| -> f64 {
        engine
            .main
            .iter()
            .filter(|r| completed.contains(&r.prompt))
            .map(|r| r.finish_ms)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let straggler = engines
        .iter()
        .max_by(|a, b| last_counted(a).partial_cmp(&last_counted(b)).unwrap())
        .expect("at least one rank");
    let straggler_iters = straggler
        .iter_ends
        .iter()
        .filter(|&&t| t <= wall_ms + 1e-9)
        .count() as u64;

    let clamped_done: Vec<f64> = engines.iter().map(|e| e.t_done.min(wall_ms)).collect();
    let bubbles: Vec<f64> = clamped_done.iter().map(|&d| wall_ms - d).collect();
    let rollout_time_ms = wall_ms - start_ms;

    let report = RunReport {
        step,
        mode: "tail-batching".to_string(),
        config_fingerprint: fingerprint.to_string(),
        rollout_time_ms,
        barrier_ms: wall_ms,
        decoding_steps_avg: total_steps as f64 / n_requests as f64,
        decoding_steps_max: max_steps,
        response_len_avg: total_resp as f64 / n_requests as f64,
        response_len_max: max_resp,
        acceptance_length: None,
        draft_length: None,
        acceptance_rate: None,
        streak_histogram: Vec::new(),
        verification_steps: 0,
        fallback_steps: total_steps,
        accepted_tokens: 0,
        proposed_tokens: 0,
        completed_responses: n_requests,
        bubble_avg_ms: bubbles.iter().sum::<f64>() / bubbles.len() as f64,
        bubble_max_ms: bubbles.iter().fold(0.0f64, |a, &b| a.max(b)),
        pregen_len_avg: None,
        pregen_len_max: None,
        suffix_build_ms_avg: 0.0,
        suffix_build_ms_max: 0.0,
        suffix_build_visits: 0,
        straggler_iters,
        mean_step_latency_ms: if straggler_iters == 0 {
            0.0
        } else {
            rollout_time_ms / straggler_iters as f64
        },
        round_kind: Some(kind.name().to_string()),
        queue_after: Some(queue_after),
        round_started: Some(started),
    };

    let trace = StepTrace {
        step,
        start_ms,
        t_done: clamped_done,
        t_global: wall_ms,
        barrier_ms: wall_ms,
        halt_ms: engines.iter().map(|e| e.halt_ms.min(wall_ms)).collect(),
        pregen_steps_after_global: vec![0; engines.len()],
        poll_interval: cfg.poll_interval,
        completed_responses: n_requests,
        expected_responses: (completed.len() * cfg.group) as u64,
        requests,
        pools_for_step: None,
    };

    StepRun { report, trace }
}

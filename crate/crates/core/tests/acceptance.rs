//! Acceptance suite: one test per shipped guarantee, each printing a
//! `PASS` line with its measured figures (visible with `--nocapture`).
//!
//! The suite combines exact oracles (exhaustive enumeration, brute-force
//! window scans), closed-form properties of the repetitive policy, and
//! end-to-end scheduler runs. Expected values are computed by the
//! independent oracle paths in `rollsim_core::oracle`, never by the code
//! under test.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use rollsim_core::config::PolicySpec;
use rollsim_core::decode::{rollout, verify_block};
use rollsim_core::latency::{speedup, step_latency, AttentionMode, LatencyParams, StepComposition};
use rollsim_core::metrics::{aggregate, write_jsonl};
use rollsim_core::oracle::{
    enumerate_autoregressive, enumerate_speculative, total_variation, WindowCounts,
};
use rollsim_core::policy::{EosSchedule, MarkovPolicy, SamplingParams, Vocabulary};
use rollsim_core::sched::check_step_invariants;
use rollsim_core::suffix::{DraftBlock, SuffixTree, TokenPool};
use rollsim_core::{RunConfig, Simulation, TokenId};

fn ident_params() -> SamplingParams {
    SamplingParams::default()
}

/// Criterion 1 policy: vocab 4 with EOS mass in every row so the
/// enumeration exercises termination branches.
fn tiny_policy() -> MarkovPolicy {
    let vocab = Vocabulary::new(4, 3).unwrap();
    let mut rows = HashMap::new();
    rows.insert(vec![0u32], vec![0.35, 0.30, 0.25, 0.10]);
    rows.insert(vec![1u32], vec![0.30, 0.40, 0.10, 0.20]);
    rows.insert(vec![2u32], vec![0.50, 0.20, 0.25, 0.05]);
    MarkovPolicy::from_rows(vocab, 1, rows, EosSchedule::Off).unwrap()
}

#[test]
fn c01_losslessness_exact_oracle() {
    let policy = tiny_policy();
    let params = ident_params();
    let pool = TokenPool::new(
        0,
        vec![
            vec![0, 1, 2],
            vec![0, 1, 1],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![0, 1, 2, 1],
            vec![1, 0],
        ],
    );
    let tree = SuffixTree::build(&pool, 8, 1);
    let prompt = [0u32];
    let max_len = 5;
    let draft_len = 2;

    let auto = enumerate_autoregressive(&policy, &params, &prompt, max_len);
    let spec = enumerate_speculative(&policy, &params, &tree, draft_len, &prompt, max_len);

    let auto_mass: f64 = auto.values().sum();
    let spec_mass: f64 = spec.values().sum();
    assert!((auto_mass - 1.0).abs() < 1e-12, "auto mass {auto_mass}");
    assert!((spec_mass - 1.0).abs() < 1e-12, "spec mass {spec_mass}");

    let tv = total_variation(&auto, &spec);
    assert!(tv < 1e-10, "total variation {tv}");

    // Sampled rollouts must land inside the enumerated support.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let r = rollout(
            &prompt,
            &policy,
            Some(&tree),
            &params,
            draft_len,
            max_len,
            &mut rng,
        );
        let mass = spec.get(&r.response).copied().unwrap_or(0.0);
        assert!(mass > 0.0, "sampled {:?} outside support", r.response);
    }

    println!("ACCEPTANCE c01 losslessness (exact oracle): PASS  tv = {tv:.3e}");
}

/// Two-sample homogeneity chi-square over pooled cells; returns
/// (statistic, degrees of freedom).
fn two_sample_chi2(a: &[u64], b: &[u64]) -> (f64, usize) {
    // Pool sparse cells so the chi-square approximation holds.
    let mut cells: Vec<(u64, u64)> = Vec::new();
    let mut rare = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        if x + y < 10 {
            rare.0 += x;
            rare.1 += y;
        } else {
            cells.push((x, y));
        }
    }
    if rare.0 + rare.1 > 0 {
        cells.push(rare);
    }
    if cells.len() < 2 {
        return (0.0, 0);
    }
    let n_a: u64 = cells.iter().map(|c| c.0).sum();
    let n_b: u64 = cells.iter().map(|c| c.1).sum();
    let total = (n_a + n_b) as f64;
    let mut stat = 0.0;
    for (x, y) in &cells {
        let row = (x + y) as f64;
        let ea = row * n_a as f64 / total;
        let eb = row * n_b as f64 / total;
        stat += (*x as f64 - ea).powi(2) / ea + (*y as f64 - eb).powi(2) / eb;
    }
    (stat, cells.len() - 1)
}

#[test]
fn c02_losslessness_statistical() {
    let started = std::time::Instant::now();
    let vocab = Vocabulary::new(64, 0).unwrap();
    let policy = MarkovPolicy::repetitive(
        vocab,
        1,
        0.5,
        77,
        EosSchedule::Constant { p: 0.02 },
    )
    .unwrap();
    let params = ident_params();
    let prompt = [7u32, 13, 22];
    let k = 4;
    let full_len = 128usize;
    let positions: Vec<usize> = vec![0, 1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 120];
    let rollouts = 100_000usize;
    let ended_cell = 64usize;

    // Draft pool: plain rollouts from the same policy, EOS stripped.
    let mut pool_rng = ChaCha8Rng::seed_from_u64(555);
    let mut pool = TokenPool::new(0, Vec::new());
    for _ in 0..16 {
        let r = rollsim_core::decode::autoregressive_rollout(
            &prompt, &policy, &params, full_len, &mut pool_rng,
        );
        let mut seq = r.response;
        if seq.last() == Some(&0) {
            seq.pop();
        }
        pool.sequences.push(seq);
    }
    let tree = SuffixTree::build(&pool, 32, 1);

    for seed in [201u64, 202, 203, 204, 205] {
        let mut counts_auto = vec![vec![0u64; 65]; positions.len()];
        let mut counts_spec = vec![vec![0u64; 65]; positions.len()];
        for i in 0..rollouts {
            let group = i % positions.len();
            let t = positions[group];
            let cap = t + 1;

            let mut rng_a = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(3) ^ (i as u64) << 1);
            let auto = rollsim_core::decode::autoregressive_rollout(
                &prompt, &policy, &params, cap, &mut rng_a,
            );
            let cell_a = auto.response.get(t).map_or(ended_cell, |&x| x as usize);
            counts_auto[group][cell_a] += 1;

            let mut rng_b =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7) ^ ((i as u64) << 1 | 1));
            let spec = rollout(&prompt, &policy, Some(&tree), &params, k, cap, &mut rng_b);
            let cell_b = spec.response.get(t).map_or(ended_cell, |&x| x as usize);
            counts_spec[group][cell_b] += 1;
        }

        let mut stat = 0.0;
        let mut dof = 0usize;
        for g in 0..positions.len() {
            let (s, d) = two_sample_chi2(&counts_auto[g], &counts_spec[g]);
            stat += s;
            dof += d;
        }
        let dist = ChiSquared::new(dof as f64).unwrap();
        let p = 1.0 - dist.cdf(stat);
        assert!(
            p > 0.01,
            "seed {seed}: chi2 = {stat:.1} at {dof} dof, p = {p:.4}"
        );
        println!(
            "ACCEPTANCE c02 losslessness (statistical): seed {seed} p = {p:.3} \
             (chi2 {stat:.1}, dof {dof})"
        );
    }
    println!(
        "ACCEPTANCE c02 losslessness (statistical): PASS  elapsed = {:.1?}",
        started.elapsed()
    );
}

#[test]
fn c03_suffix_vs_brute_force_oracle() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(333);
    let mut cases = 0usize;
    for pool_idx in 0..200 {
        let vocab = rng.gen_range(2..12u32);
        let n_seqs = rng.gen_range(1..=50usize);
        let min_match = rng.gen_range(1..=2usize);
        let depth_bound = 32usize;
        let sequences: Vec<Vec<TokenId>> = (0..n_seqs)
            .map(|_| {
                (0..rng.gen_range(0..=64usize))
                    .map(|_| rng.gen_range(0..vocab))
                    .collect()
            })
            .collect();
        let pool = TokenPool::new(pool_idx, sequences);
        let tree = SuffixTree::build(&pool, depth_bound, min_match);
        let counts = WindowCounts::new(&pool, depth_bound);

        for _ in 0..50 {
            let k = rng.gen_range(1..=8usize);
            let mut prefix: Vec<TokenId> = (0..rng.gen_range(1..=32usize))
                .map(|_| rng.gen_range(0..vocab))
                .collect();
            // Half the prefixes end with a real pool window so long
            // anchors actually occur.
            if rng.gen_bool(0.5) {
                let flat: Vec<TokenId> = pool.sequences.iter().flatten().copied().collect();
                if !flat.is_empty() {
                    let len = rng.gen_range(1..=8usize.min(flat.len()));
                    let start = rng.gen_range(0..=flat.len() - len);
                    prefix.extend_from_slice(&flat[start..start + len]);
                }
            }
            let got = tree.retrieve_draft(&prefix, k);
            let want = counts.draft(&prefix, k, min_match);
            assert_eq!(
                got, want,
                "pool {pool_idx}, prefix {prefix:?}, k {k}, min_match {min_match}"
            );
            cases += 1;
        }
    }
    println!(
        "ACCEPTANCE c03 suffix vs brute force: PASS  {cases} cases, elapsed = {:.1?}",
        started.elapsed()
    );
}

#[test]
fn c04_closed_form_acceptance() {
    let vocab = Vocabulary::new(16, 0).unwrap();
    let params = ident_params();
    let k = 4usize;
    let n = 100_000usize;
    for (idx, rho) in [0.3f64, 0.6, 0.9].into_iter().enumerate() {
        let policy = MarkovPolicy::repetitive(vocab, 1, rho, 99, EosSchedule::Off).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + idx as u64);
        let mut seq = vec![5u32];
        let mut emitted_total = 0usize;
        let mut bins = vec![0u64; k + 1];
        for _ in 0..n {
            let draft = DraftBlock {
                tokens: policy.canonical_chain(&seq, k),
                match_depth: 1,
            };
            let out = verify_block(&mut seq, &draft, &policy, &params, &mut rng);
            emitted_total += out.emitted.len();
            bins[out.emitted.len() - 1] += 1;
        }

        let expect: f64 = (0..=k).map(|j| rho.powi(j as i32)).sum();
        let mean = emitted_total as f64 / n as f64;
        let rel = (mean - expect).abs() / expect;
        assert!(rel < 0.01, "rho {rho}: mean {mean}, closed form {expect}");

        // Truncated geometric: P(emitted = j) = rho^(j-1) (1 - rho) for
        // j <= k, rho^k for the full-acceptance bin.
        for (j, &count) in bins.iter().enumerate() {
            let p = if j == k {
                rho.powi(k as i32)
            } else {
                rho.powi(j as i32) * (1.0 - rho)
            };
            let freq = count as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "rho {rho} bin {}: freq {freq}, expect {p}",
                j + 1
            );
        }
        println!(
            "ACCEPTANCE c04 closed-form acceptance: rho {rho} mean {mean:.4} vs {expect:.4} \
             (rel {rel:.4})"
        );
    }
    println!("ACCEPTANCE c04 closed-form acceptance: PASS");
}

fn small_sim_cfg(mode: &str, seed: u64) -> RunConfig {
    RunConfig {
        mode: mode.to_string(),
        ranks: 4,
        batch: 16,
        group: 4,
        pregen_group: 4,
        draft_len: 4,
        poll_interval: 50,
        max_len: 512,
        steps: 4,
        seed,
        prompt_len: 4,
        policy: PolicySpec::Repetitive {
            vocab: 64,
            eos: 0,
            order: 1,
            rho: 0.6,
            seed: 7,
            hazard: EosSchedule::Decaying {
                base: 0.05,
                scale: 60.0,
            },
            lead_factors: Vec::new(),
        },
        ..RunConfig::default()
    }
}

#[test]
fn c05_metric_identity() {
    // Pinned regression: the published acceptance length / draft length
    // pair implies the published acceptance rate.
    let pinned: f64 = (2.15 - 1.0) / 3.84;
    assert!((pinned - 0.2995).abs() < 1e-4, "pinned rate {pinned}");

    let mut sim = Simulation::new(small_sim_cfg("bubblespec", 42)).unwrap();
    let reports = sim.run().unwrap();
    let mut checked = 0;
    for r in &reports {
        if let Some(residual) = r.acceptance_identity_residual() {
            assert!(
                residual <= 1e-9,
                "step {}: identity residual {residual}",
                r.step
            );
            checked += 1;
        }
        // Arithmetic closes on the critical path.
        if r.straggler_iters > 0 {
            let closed = r.straggler_iters as f64 * r.mean_step_latency_ms;
            assert!((closed - r.rollout_time_ms).abs() / r.rollout_time_ms < 1e-9);
        }
    }
    assert!(checked >= 3, "speculative steps should produce reports");
    let agg = aggregate(&reports);
    if let (Some(rate), Some(len), Some(draft)) =
        (agg.acceptance_rate, agg.acceptance_length, agg.draft_length)
    {
        assert!((rate - (len - 1.0) / draft).abs() <= 1e-9);
    }
    println!(
        "ACCEPTANCE c05 metric identity: PASS  {checked} reports checked, pinned rate \
         {pinned:.4} = 29.94%"
    );
}

#[test]
fn c06_latency_anchors() {
    let unified = LatencyParams::default();
    let split = LatencyParams {
        attention: AttentionMode::Split,
        ..LatencyParams::default()
    };
    let normal = StepComposition {
        n_normal: 128,
        n_spec: 0,
        draft_tokens: 0,
        mean_context: 8192.0,
    };
    let speculative = StepComposition {
        n_normal: 96,
        n_spec: 32,
        draft_tokens: 128,
        mean_context: 8192.0,
    };
    assert!((step_latency(&normal, &unified) - 0.372).abs() < 1e-12);
    assert!((step_latency(&normal, &split) - 0.372).abs() < 1e-12);
    assert!((step_latency(&speculative, &split) - (0.753 + 0.226)).abs() < 1e-12);
    assert!((step_latency(&speculative, &unified) - 0.380).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..1000 {
        let comp = StepComposition {
            n_normal: rng.gen_range(0..1024),
            n_spec: rng.gen_range(1..512),
            draft_tokens: rng.gen_range(0..4096),
            mean_context: rng.gen_range(16.0..65536.0),
        };
        let u = step_latency(&comp, &unified);
        let s = step_latency(&comp, &split);
        assert!(u <= s + 1e-12, "unified {u} > split {s} at {comp:?}");
    }
    println!(
        "ACCEPTANCE c06 latency anchors: PASS  0.372 / 0.753+0.226 / 0.380 ms reproduced, \
         unified <= split on 1000 fuzzed compositions"
    );
}

#[test]
fn c07_speedup_identity_self_consistency() {
    let mut base = Simulation::new(small_sim_cfg("baseline", 9)).unwrap();
    let mut spec = Simulation::new(small_sim_cfg("bubblespec", 9)).unwrap();
    let base_reports = base.run().unwrap();
    let spec_reports = spec.run().unwrap();

    let t_base: f64 = base_reports.iter().map(|r| r.rollout_time_ms).sum();
    let t_spec: f64 = spec_reports.iter().map(|r| r.rollout_time_ms).sum();
    let s_base: u64 = base_reports.iter().map(|r| r.straggler_iters).sum();
    let s_spec: u64 = spec_reports.iter().map(|r| r.straggler_iters).sum();

    let alpha = 1.0 - s_spec as f64 / s_base as f64;
    let mu = (t_spec / s_spec as f64) / (t_base / s_base as f64) - 1.0;
    let observed = 1.0 - t_spec / t_base;
    let predicted = speedup(alpha, mu);
    assert!(
        (observed - predicted).abs() < 0.01,
        "observed {observed}, predicted {predicted}"
    );
    println!(
        "ACCEPTANCE c07 speedup identity: PASS  alpha = {alpha:.4}, mu = {mu:.4}, observed = \
         {observed:.4}, predicted = {predicted:.4}"
    );
}

#[test]
fn c08_end_to_end_desk_scale_speedup() {
    let started = std::time::Instant::now();
    let cfg = |mode: &str| RunConfig {
        mode: mode.to_string(),
        ranks: 8,
        batch: 64,
        group: 16,
        pregen_group: 16,
        draft_len: 4,
        poll_interval: 50,
        max_len: 2048,
        steps: 10,
        seed: 31,
        prompt_len: 4,
        policy: PolicySpec::Repetitive {
            vocab: 64,
            eos: 0,
            order: 1,
            rho: 0.6,
            seed: 7,
            hazard: EosSchedule::Decaying {
                base: 0.05,
                scale: 60.0,
            },
            lead_factors: Vec::new(),
        },
        ..RunConfig::default()
    };

    let mut base = Simulation::new(cfg("baseline")).unwrap();
    let base_reports = base.run().unwrap();
    let mut spec = Simulation::new(cfg("bubblespec")).unwrap();
    let spec_reports = spec.run().unwrap();

    let base_agg = aggregate(&base_reports);
    let spec_agg = aggregate(&spec_reports);

    let step_reduction = 1.0 - spec_agg.decoding_steps_avg / base_agg.decoding_steps_avg;
    let time_reduction = 1.0 - spec_agg.rollout_time_ms_total / base_agg.rollout_time_ms_total;
    let bubble_share = base_agg.bubble_avg_ms / base_agg.rollout_time_ms_avg;

    println!(
        "ACCEPTANCE c08 desk-scale speedup: steps {:.1} -> {:.1} ({:.1}% reduction), time \
         {:.2}s -> {:.2}s ({:.1}% reduction), baseline bubble share {:.2}, acceptance length \
         {:?}, elapsed = {:.1?}",
        base_agg.decoding_steps_avg,
        spec_agg.decoding_steps_avg,
        100.0 * step_reduction,
        base_agg.rollout_time_ms_total / 1000.0,
        spec_agg.rollout_time_ms_total / 1000.0,
        100.0 * time_reduction,
        bubble_share,
        spec_agg.acceptance_length,
        started.elapsed()
    );
    assert!(
        step_reduction >= 0.40,
        "decoding-step reduction {step_reduction:.3} below 0.40"
    );
    assert!(
        time_reduction >= 0.25,
        "rollout-time reduction {time_reduction:.3} below 0.25"
    );
    println!("ACCEPTANCE c08 desk-scale speedup: PASS");
}

#[test]
fn c09_scheduler_invariants_fuzz() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let modes = ["baseline", "bubblespec", "ngram-draft", "intra-gpu"];
    let mut violations: Vec<String> = Vec::new();
    for case in 0..100 {
        let ranks = rng.gen_range(1..=4usize);
        let mode = modes[case % modes.len()];
        let cfg = RunConfig {
            mode: mode.to_string(),
            ranks,
            batch: rng.gen_range(1..=8),
            group: rng.gen_range(1..=3),
            pregen_group: rng.gen_range(1..=3),
            draft_len: rng.gen_range(1..=5),
            poll_interval: rng.gen_range(1..=7),
            max_len: rng.gen_range(4..=32),
            steps: 3,
            seed: rng.gen(),
            prompt_len: rng.gen_range(1..=4),
            threshold: (mode == "intra-gpu").then(|| rng.gen_range(0..=5)),
            helpers: (mode == "intra-gpu").then(|| rng.gen_range(0..ranks)),
            policy: PolicySpec::Repetitive {
                vocab: rng.gen_range(4..=16),
                eos: 0,
                order: 1,
                rho: rng.gen_range(0.2..0.9),
                seed: rng.gen(),
                hazard: EosSchedule::Constant {
                    p: rng.gen_range(0.05..0.3),
                },
                lead_factors: Vec::new(),
            },
            ..RunConfig::default()
        };
        let mut sim = Simulation::new(cfg).unwrap();
        let mut prev_barrier = 0.0f64;
        for _ in 0..3 {
            let run = sim.next_step_run().unwrap();
            violations.extend(
                check_step_invariants(&run.trace)
                    .into_iter()
                    .map(|v| format!("case {case} ({mode}): {v}")),
            );
            if run.trace.start_ms + 1e-9 < prev_barrier {
                violations.push(format!(
                    "case {case} ({mode}): step started before previous barrier"
                ));
            }
            prev_barrier = run.trace.barrier_ms;
        }
    }
    assert!(violations.is_empty(), "{violations:#?}");
    println!("ACCEPTANCE c09 scheduler invariants: PASS  100 fuzzed configs, zero violations");
}

#[test]
fn c10_tail_batching_baseline() {
    // Uniform workload: eta = 1.25, B = 64 defers ceil(0.25 * 64) = 16
    // groups per short round, so every fifth round is a tail round.
    let uniform = RunConfig {
        mode: "tail-batching".to_string(),
        eta: Some(1.25),
        ranks: 4,
        batch: 64,
        group: 2,
        pregen_group: 1,
        max_len: 64,
        steps: 10,
        seed: 17,
        prompt_len: 4,
        policy: PolicySpec::Repetitive {
            vocab: 64,
            eos: 0,
            order: 1,
            rho: 0.6,
            seed: 7,
            hazard: EosSchedule::AtLength { len: 36 },
            lead_factors: Vec::new(),
        },
        ..RunConfig::default()
    };
    let mut sim = Simulation::new(uniform).unwrap();
    let mut kinds = Vec::new();
    for _ in 0..10 {
        let run = sim.next_step_run().unwrap();
        assert!(check_step_invariants(&run.trace).is_empty());
        kinds.push(run.report.round_kind.unwrap());
    }
    let expect = [
        "short", "short", "short", "short", "tail", "short", "short", "short", "short", "tail",
    ];
    assert_eq!(kinds, expect, "one tail round per five-round cycle");

    // Sparse-long-tail workload: tail rounds dominate the round-time
    // distribution, and bubble-filling speculation beats tail batching on
    // mean step time.
    let heavy_policy = PolicySpec::Repetitive {
        vocab: 64,
        eos: 0,
        order: 1,
        rho: 0.75,
        seed: 7,
        hazard: EosSchedule::Decaying {
            base: 0.05,
            scale: 60.0,
        },
        lead_factors: Vec::new(),
    };
    let heavy = RunConfig {
        mode: "tail-batching".to_string(),
        eta: Some(1.25),
        ranks: 4,
        batch: 64,
        group: 8,
        pregen_group: 8,
        max_len: 2048,
        steps: 20,
        seed: 23,
        prompt_len: 4,
        policy: heavy_policy.clone(),
        ..RunConfig::default()
    };
    let mut tail_sim = Simulation::new(heavy.clone()).unwrap();
    let tail_reports = tail_sim.run().unwrap();
    let (mut tail_times, mut short_times) = (Vec::new(), Vec::new());
    for r in &tail_reports {
        match r.round_kind.as_deref() {
            Some("tail") => tail_times.push(r.rollout_time_ms),
            _ => short_times.push(r.rollout_time_ms),
        }
    }
    assert!(!tail_times.is_empty(), "no tail rounds occurred");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let tail_mean = mean(&tail_times);
    let short_mean = mean(&short_times);
    assert!(
        tail_mean > short_mean,
        "tail rounds should dominate: tail {tail_mean:.1} ms, short {short_mean:.1} ms"
    );

    let spec_cfg = RunConfig {
        mode: "bubblespec".to_string(),
        eta: None,
        policy: heavy_policy,
        ..heavy
    };
    let mut spec_sim = Simulation::new(spec_cfg).unwrap();
    let spec_reports = spec_sim.run().unwrap();
    let spec_mean = mean(
        &spec_reports
            .iter()
            .map(|r| r.rollout_time_ms)
            .collect::<Vec<_>>(),
    );
    let tail_all_mean = mean(
        &tail_reports
            .iter()
            .map(|r| r.rollout_time_ms)
            .collect::<Vec<_>>(),
    );
    assert!(
        spec_mean < tail_all_mean,
        "speculative mean {spec_mean:.1} ms should beat tail-batching mean {tail_all_mean:.1} ms"
    );
    println!(
        "ACCEPTANCE c10 tail batching: PASS  cycle SSSS T, tail mean {tail_mean:.0} ms > short \
         mean {short_mean:.0} ms; speculative mean {spec_mean:.0} ms < tail-batching mean \
         {tail_all_mean:.0} ms"
    );
}

#[test]
fn c11_determinism_byte_identical_reports() {
    let jsonl = |seed: u64| -> Vec<u8> {
        let mut sim = Simulation::new(small_sim_cfg("bubblespec", seed)).unwrap();
        let reports = sim.run().unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &reports).unwrap();
        buf
    };
    let a = jsonl(7);
    let b = jsonl(7);
    assert_eq!(a, b, "identical config + seed must be byte-identical");
    let c = jsonl(8);
    assert_ne!(a, c, "different seeds must differ");
    println!(
        "ACCEPTANCE c11 determinism: PASS  {} bytes of JSONL byte-identical across runs",
        a.len()
    );
}

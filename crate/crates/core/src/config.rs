//! Run configuration: every knob of the simulation, loadable from TOML.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::LatencyParams;
use crate::policy::{EosSchedule, MarkovPolicy, SamplingParams, Vocabulary};
use crate::rng::splitmix64;
use crate::sched::SchedulerMode;
use crate::TokenId;

/// How the target policy is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicySpec {
    /// Seed-generated table with repetitiveness `rho`.
    Repetitive {
        vocab: usize,
        eos: TokenId,
        order: usize,
        rho: f64,
        seed: u64,
        #[serde(default = "default_hazard")]
        hazard: EosSchedule,
        #[serde(default)]
        lead_factors: Vec<f64>,
    },
    /// Explicit transition table loaded from a text file.
    Table {
        path: String,
        #[serde(default = "default_hazard")]
        hazard: EosSchedule,
        #[serde(default)]
        lead_factors: Vec<f64>,
    },
}

fn default_hazard() -> EosSchedule {
    EosSchedule::Off
}

impl PolicySpec {
    pub fn build(&self) -> Result<MarkovPolicy> {
        match self {
            PolicySpec::Repetitive {
                vocab,
                eos,
                order,
                rho,
                seed,
                hazard,
                lead_factors,
            } => {
                let vocab = Vocabulary::new(*vocab, *eos)?;
                let policy = MarkovPolicy::repetitive(vocab, *order, *rho, *seed, hazard.clone())?;
                Ok(policy.with_lead_factors(lead_factors.clone()))
            }
            PolicySpec::Table {
                path,
                hazard,
                lead_factors,
            } => {
                let file = std::fs::File::open(path)?;
                let policy =
                    MarkovPolicy::load_table(std::io::BufReader::new(file), hazard.clone())?;
                Ok(policy.with_lead_factors(lead_factors.clone()))
            }
        }
    }
}

/// Full simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `baseline`, `bubblespec`, `ngram-draft`, `tail-batching`, or
    /// `intra-gpu`.
    pub mode: String,
    /// Data-parallel rank count R.
    pub ranks: usize,
    /// Prompts per step B.
    pub batch: usize,
    /// Responses sampled per prompt G.
    pub group: usize,
    /// Responses pre-generated per next-step prompt.
    pub pregen_group: usize,
    /// Draft block length K.
    pub draft_len: usize,
    /// Synchronizer polling interval T, in own decoding steps.
    pub poll_interval: usize,
    /// Maximum response length L.
    pub max_len: usize,
    /// Training steps to simulate (rounds, in tail-batching mode).
    pub steps: usize,
    pub seed: u64,
    /// Synthetic prompt length in tokens.
    pub prompt_len: usize,
    /// Suffix-index depth bound D.
    pub depth_bound: usize,
    /// Minimum retrieval anchor length.
    pub min_match: usize,
    /// Tail-batching over-provisioning factor (tail-batching mode only).
    pub eta: Option<f64>,
    /// Active-batch threshold for early injection (intra-gpu mode only).
    pub threshold: Option<usize>,
    /// Helper-rank count F (intra-gpu mode only).
    pub helpers: Option<usize>,
    /// Output directory (used by the CLI).
    pub out: Option<String>,
    pub sampling: SamplingParams,
    pub policy: PolicySpec,
    pub latency: LatencyParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: "bubblespec".to_string(),
            ranks: 8,
            batch: 64,
            group: 16,
            pregen_group: 16,
            draft_len: 4,
            poll_interval: 50,
            max_len: 512,
            steps: 10,
            seed: 1,
            prompt_len: 4,
            depth_bound: 32,
            min_match: 1,
            eta: None,
            threshold: None,
            helpers: None,
            out: None,
            sampling: SamplingParams::default(),
            policy: PolicySpec::Repetitive {
                vocab: 64,
                eos: 0,
                order: 1,
                rho: 0.6,
                seed: 7,
                hazard: EosSchedule::Decaying {
                    base: 0.04,
                    scale: 40.0,
                },
                lead_factors: Vec::new(),
            },
            latency: LatencyParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses the mode string together with its variant-specific fields.
    pub fn scheduler_mode(&self) -> Result<SchedulerMode> {
        match self.mode.as_str() {
            "baseline" => Ok(SchedulerMode::Baseline),
            "bubblespec" => Ok(SchedulerMode::BubbleSpec),
            "ngram-draft" => Ok(SchedulerMode::NgramDraft),
            "tail-batching" => {
                let eta = self
                    .eta
                    .ok_or_else(|| Error::config("tail-batching mode requires eta"))?;
                Ok(SchedulerMode::TailBatching { eta })
            }
            "intra-gpu" => {
                let threshold = self
                    .threshold
                    .ok_or_else(|| Error::config("intra-gpu mode requires threshold"))?;
                let helpers = self
                    .helpers
                    .ok_or_else(|| Error::config("intra-gpu mode requires helpers"))?;
                Ok(SchedulerMode::IntraGpu { threshold, helpers })
            }
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected baseline, bubblespec, ngram-draft, \
                 tail-batching, or intra-gpu)"
            ))),
        }
    }

    /// Rejects invalid values and invalid mode/field combinations before
    /// any simulation starts.
    pub fn validate(&self) -> Result<()> {
        let mode = self.scheduler_mode()?;

        let positive = [
            ("ranks", self.ranks),
            ("batch", self.batch),
            ("group", self.group),
            ("draft_len", self.draft_len),
            ("poll_interval", self.poll_interval),
            ("max_len", self.max_len),
            ("steps", self.steps),
            ("prompt_len", self.prompt_len),
            ("min_match", self.min_match),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.depth_bound < 2 {
            return Err(Error::config("depth_bound must be >= 2"));
        }
        if self.min_match >= self.depth_bound {
            return Err(Error::config("min_match must be < depth_bound"));
        }

        match mode {
            SchedulerMode::TailBatching { eta } => {
                if !(eta > 1.0) {
                    return Err(Error::config("eta must be > 1"));
                }
                if self.threshold.is_some() || self.helpers.is_some() {
                    return Err(Error::config(
                        "threshold/helpers only apply to intra-gpu mode",
                    ));
                }
            }
            SchedulerMode::IntraGpu { helpers, .. } => {
                if helpers >= self.ranks {
                    return Err(Error::config("helpers must be < ranks"));
                }
                if self.eta.is_some() {
                    return Err(Error::config("eta only applies to tail-batching mode"));
                }
            }
            _ => {
                if self.eta.is_some() {
                    return Err(Error::config("eta only applies to tail-batching mode"));
                }
                if self.threshold.is_some() || self.helpers.is_some() {
                    return Err(Error::config(
                        "threshold/helpers only apply to intra-gpu mode",
                    ));
                }
            }
        }
        if mode.pre_generates() && self.pregen_group == 0 {
            return Err(Error::config("pregen_group must be >= 1 in this mode"));
        }

        self.sampling.validate()?;
        self.latency.validate()?;
        Ok(())
    }

    /// Stable fingerprint over everything except mode and output paths,
    /// used to warn when comparing reports from different workloads.
    pub fn fingerprint(&self) -> String {
        let mut canon = self.clone();
        canon.mode = String::new();
        canon.out = None;
        canon.eta = None;
        canon.threshold = None;
        canon.helpers = None;
        let text = canon.to_toml_string();
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in text.bytes() {
            h = splitmix64(h ^ b as u64);
        }
        format!("{h:016x}")
    }
}

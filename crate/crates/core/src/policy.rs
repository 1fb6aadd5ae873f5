//! Target-policy surface: filtered next-token distributions and seeded
//! sampling, with a table-driven Markov policy standing in for the model.
//!
//! The policy is pluggable behind [`Policy`]; the rest of the system only
//! ever asks for the raw next-token distribution of a prefix and applies
//! temperature / top-k / top-p filtering on top. [`MarkovPolicy`] is the
//! shipped implementation: an order-`m` transition table with a
//! repetitiveness knob so draft-acceptance behavior is analytically
//! controllable, and a per-position EOS hazard so response-length
//! distributions with long tails can be synthesized.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::splitmix64;
use crate::TokenId;

/// Reserved context symbol used to left-pad prefixes shorter than the
/// policy order. Never a valid token id.
pub const BEGIN_MARKER: u32 = u32::MAX;

/// Tolerance for "this vector sums to one".
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Vocabulary size plus the designated end-of-sequence token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new(size: usize, eos: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::config(format!("vocabulary size {size} < 2")));
        }
        if eos as usize >= size {
            return Err(Error::config(format!(
                "eos token {eos} outside vocabulary of size {size}"
            )));
        }
        Ok(Vocabulary { size, eos })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }
}

/// Sampling configuration shared by rollout and pre-generation.
///
/// `temperature == 0` selects greedy mode (the degenerate distribution on
/// the argmax). `top_k == None` means unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_p: 1.0,
            top_k: None,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::config("temperature must be >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p must lie in (0, 1]"));
        }
        if self.top_k == Some(0) {
            return Err(Error::config("top_k must be >= 1 when bounded"));
        }
        Ok(())
    }
}

/// A filtered, renormalized next-token distribution.
///
/// Entries are non-negative, sum to one within [`PROB_SUM_TOL`], and are
/// exactly zero outside the filtered support.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution {
    probs: Vec<f64>,
}

impl PolicyDistribution {
    /// Wraps an already-normalized probability vector, validating it.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::config("distribution needs at least two entries"));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) {
                return Err(Error::config(format!("negative probability at token {i}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::config(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(PolicyDistribution { probs })
    }

    /// Normalizes non-negative weights with positive total mass.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::config("weights must be non-negative with positive sum"));
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        Ok(PolicyDistribution { probs })
    }

    /// Internal constructor for vectors normalized by construction.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL);
        PolicyDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token as usize).copied().unwrap_or(0.0)
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    /// Highest-probability token; ties break toward the lowest token id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

/// Applies temperature scaling, then top-k truncation, then top-p nucleus
/// truncation, renormalizing the survivors.
///
/// Temperature zero returns the degenerate distribution on the argmax
/// (ties toward the lowest token id). Nucleus truncation keeps tokens in
/// descending-probability order until the kept mass reaches `top_p`, so at
/// least the maximum-probability token always survives.
pub fn apply_filters(dist: &PolicyDistribution, params: &SamplingParams) -> PolicyDistribution {
    let v = dist.vocab_size();
    if params.temperature == 0.0 {
        let mut probs = vec![0.0; v];
        probs[dist.argmax() as usize] = 1.0;
        return PolicyDistribution::from_normalized(probs);
    }

    // Identity-filter fast path: no reordering work needed.
    if (params.temperature - 1.0).abs() < f64::EPSILON
        && params.top_p >= 1.0
        && params.top_k.is_none()
    {
        return dist.clone();
    }

    let mut probs: Vec<f64> = if (params.temperature - 1.0).abs() < f64::EPSILON {
        dist.probs.clone()
    } else {
        // p^(1/T) via logs, shifted by the max for numerical range.
        let inv_t = 1.0 / params.temperature;
        let max_log = dist
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p.ln() * inv_t)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = dist
            .probs
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    (p.ln() * inv_t - max_log).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    };

    // Token ids sorted by descending probability, ties toward lower ids.
    let mut order: Vec<usize> = (0..v).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));

    if let Some(k) = params.top_k {
        for &i in order.iter().skip(k as usize) {
            probs[i] = 0.0;
        }
        order.truncate(k as usize);
        let sum: f64 = order.iter().map(|&i| probs[i]).sum();
        for &i in &order {
            probs[i] /= sum;
        }
    }

    if params.top_p < 1.0 {
        let mut cum = 0.0;
        let mut kept = 0usize;
        for &i in &order {
            if cum < params.top_p {
                cum += probs[i];
                kept += 1;
            } else {
                probs[i] = 0.0;
            }
        }
        let sum: f64 = order[..kept].iter().map(|&i| probs[i]).sum();
        for &i in &order[..kept] {
            probs[i] /= sum;
        }
    }

    PolicyDistribution::from_normalized(probs)
}

/// Inverse-CDF sampling in ascending token-id order.
///
/// Consumes exactly one uniform draw, which keeps generator consumption
/// identical between fallback speculative steps and plain autoregressive
/// steps.
pub fn sample<R: Rng + ?Sized>(dist: &PolicyDistribution, rng: &mut R) -> TokenId {
    sample_at(dist, rng.gen::<f64>())
}

fn sample_at(dist: &PolicyDistribution, u: f64) -> TokenId {
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = Some(i as TokenId);
            if u < cum {
                return i as TokenId;
            }
        }
    }
    // Rounding can leave cum marginally below 1; emit the top of the CDF.
    last_positive.expect("valid distribution has positive support")
}

/// Per-position end-of-sequence hazard, mixed into every context row at
/// query time: `dist = (1 - h) * row + h * eos`.
///
/// The position is the full prefix length (prompt included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EosSchedule {
    /// No hazard; EOS mass comes only from the table rows themselves.
    Off,
    /// Constant hazard per position (geometric lengths).
    Constant { p: f64 },
    /// Deterministic stop once the prefix reaches `len` symbols.
    AtLength { len: usize },
    /// `base / (1 + pos / scale)`: decaying hazard, power-law length tail.
    Decaying { base: f64, scale: f64 },
}

impl EosSchedule {
    pub fn hazard(&self, pos: usize) -> f64 {
        match *self {
            EosSchedule::Off => 0.0,
            EosSchedule::Constant { p } => p,
            EosSchedule::AtLength { len } => {
                if pos >= len {
                    1.0
                } else {
                    0.0
                }
            }
            EosSchedule::Decaying { base, scale } => base / (1.0 + pos as f64 / scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EosSchedule::Off => true,
            EosSchedule::Constant { p } => (0.0..=1.0).contains(&p),
            EosSchedule::AtLength { len } => len > 0,
            EosSchedule::Decaying { base, scale } => (0.0..=1.0).contains(&base) && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("invalid eos schedule parameters"))
        }
    }
}

/// The target policy: a raw (unfiltered) next-token distribution per
/// prefix. Implementations must be pure and safe to share across
/// concurrently simulated ranks.
pub trait Policy: Send + Sync {
    fn vocab(&self) -> Vocabulary;

    /// Raw next-token distribution for the last-`m`-token context of a
    /// non-empty prefix.
    fn next_distribution(&self, prefix: &[TokenId]) -> PolicyDistribution;
}

#[derive(Debug, Clone, Copy)]
struct RepetitiveSpec {
    seed: u64,
    rho: f64,
}

/// Order-`m` Markov policy over token ids.
///
/// Rows are raw distributions keyed by the last `m` context symbols
/// (left-padded with [`BEGIN_MARKER`] for short prefixes); unknown
/// contexts fall back to a uniform row. An optional EOS hazard is mixed in
/// per position, and optional per-lead-token hazard factors let workloads
/// give different prompts systematically different response lengths.
pub struct MarkovPolicy {
    vocab: Vocabulary,
    order: usize,
    rows: HashMap<Vec<u32>, Vec<f64>>,
    fallback: Vec<f64>,
    hazard: EosSchedule,
    lead_factors: Vec<f64>,
    repetitive: Option<RepetitiveSpec>,
}

impl MarkovPolicy {
    /// Builds a policy from explicit context rows. Rows are validated and
    /// normalized; contexts may contain [`BEGIN_MARKER`].
    pub fn from_rows(
        vocab: Vocabulary,
        order: usize,
        rows: HashMap<Vec<u32>, Vec<f64>>,
        hazard: EosSchedule,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::config("order must be >= 1"));
        }
        hazard.validate()?;
        let mut normalized = HashMap::with_capacity(rows.len());
        for (ctx, row) in rows {
            if ctx.len() != order {
                return Err(Error::config(format!(
                    "context {ctx:?} has length {}, expected {order}",
                    ctx.len()
                )));
            }
            if row.len() != vocab.size() {
                return Err(Error::config(format!(
                    "row for context {ctx:?} has {} entries, expected {}",
                    row.len(),
                    vocab.size()
                )));
            }
            // Keep already-normalized rows bit-exact; only rescale rows
            // supplied as raw weights.
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || !(sum > 0.0) {
                return Err(Error::config(format!(
                    "row for context {ctx:?} must be non-negative with positive sum"
                )));
            }
            let row = if (sum - 1.0).abs() <= PROB_SUM_TOL {
                row
            } else {
                row.into_iter().map(|p| p / sum).collect()
            };
            normalized.insert(ctx, row);
        }
        Ok(MarkovPolicy {
            fallback: vec![1.0 / vocab.size() as f64; vocab.size()],
            vocab,
            order,
            rows: normalized,
            hazard,
            lead_factors: Vec::new(),
            repetitive: None,
        })
    }

    /// Generates a repetitive policy: each context concentrates mass
    /// `rho` on one seed-derived canonical continuation and spreads the
    /// rest uniformly over the remaining non-EOS tokens.
    ///
    /// EOS never appears in the rows; termination comes solely from the
    /// hazard schedule. This makes per-draft-token acceptance probability
    /// exactly `rho` whenever drafts propose the canonical continuation.
    pub fn repetitive(
        vocab: Vocabulary,
        order: usize,
        rho: f64,
        seed: u64,
        hazard: EosSchedule,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::config("order must be >= 1"));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        hazard.validate()?;
        let v = vocab.size();
        let contexts = (v as u128).checked_pow(order as u32);
        match contexts {
            Some(n) if n <= 1 << 20 => {}
            _ => {
                return Err(Error::config(format!(
                    "repetitive table too large: {v}^{order} contexts"
                )));
            }
        }

        let spec = RepetitiveSpec { seed, rho };
        let mut rows = HashMap::new();
        let mut ctx = vec![0u32; order];
        loop {
            rows.insert(ctx.clone(), repetitive_row(&ctx, vocab, spec));
            // Odometer increment over [0, v)^order.
            let mut pos = order;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                ctx[pos] += 1;
                if (ctx[pos] as usize) < v {
                    break;
                }
                ctx[pos] = 0;
            }
            if ctx.iter().all(|&c| c == 0) {
                break;
            }
        }

        Ok(MarkovPolicy {
            fallback: vec![1.0 / v as f64; v],
            vocab,
            order,
            rows,
            hazard,
            lead_factors: Vec::new(),
            repetitive: Some(spec),
        })
    }

    /// Per-lead-token hazard multipliers (indexed by `prefix[0] % len`).
    pub fn with_lead_factors(mut self, factors: Vec<f64>) -> Self {
        self.lead_factors = factors;
        self
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn hazard_schedule(&self) -> &EosSchedule {
        &self.hazard
    }

    /// The canonical (highest-mass) continuation of the current prefix
    /// context; only defined for generated repetitive policies.
    pub fn canonical_continuation(&self, prefix: &[TokenId]) -> Option<TokenId> {
        let spec = self.repetitive?;
        let ctx = self.context_of(prefix);
        Some(canonical_token(&ctx, self.vocab, spec.seed))
    }

    /// Iterates `canonical_continuation` to produce a k-token chain.
    pub fn canonical_chain(&self, prefix: &[TokenId], k: usize) -> Vec<TokenId> {
        let mut chain = Vec::with_capacity(k);
        let mut ctx: Vec<TokenId> = prefix.to_vec();
        for _ in 0..k {
            match self.canonical_continuation(&ctx) {
                Some(t) => {
                    chain.push(t);
                    ctx.push(t);
                }
                None => break,
            }
        }
        chain
    }

    fn context_of(&self, prefix: &[TokenId]) -> Vec<u32> {
        let m = self.order;
        if prefix.len() >= m {
            prefix[prefix.len() - m..].to_vec()
        } else {
            let mut ctx = vec![BEGIN_MARKER; m - prefix.len()];
            ctx.extend_from_slice(prefix);
            ctx
        }
    }

    fn hazard_at(&self, prefix: &[TokenId]) -> f64 {
        let mut h = self.hazard.hazard(prefix.len());
        if !self.lead_factors.is_empty() {
            let idx = prefix[0] as usize % self.lead_factors.len();
            h *= self.lead_factors[idx];
        }
        h.clamp(0.0, 1.0)
    }

    /// Writes the transition table as plain text: a header followed by one
    /// `ctx <symbols> | <probabilities>` line per context. `B` denotes the
    /// begin marker. Hazard configuration is not part of the table file.
    pub fn save_table<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "vocab {}", self.vocab.size())?;
        writeln!(w, "eos {}", self.vocab.eos)?;
        writeln!(w, "order {}", self.order)?;
        let mut contexts: Vec<&Vec<u32>> = self.rows.keys().collect();
        contexts.sort();
        for ctx in contexts {
            let syms: Vec<String> = ctx
                .iter()
                .map(|&c| {
                    if c == BEGIN_MARKER {
                        "B".to_string()
                    } else {
                        c.to_string()
                    }
                })
                .collect();
            let probs: Vec<String> = self.rows[ctx].iter().map(|p| format!("{p}")).collect();
            writeln!(w, "ctx {} | {}", syms.join(" "), probs.join(" "))?;
        }
        Ok(())
    }

    /// Parses the table format written by [`MarkovPolicy::save_table`].
    pub fn load_table<R: BufRead>(r: R, hazard: EosSchedule) -> Result<Self> {
        let mut vocab_size = None;
        let mut eos = None;
        let mut order = None;
        let mut rows = HashMap::new();

        for (idx, line) in r.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("vocab") => {
                    vocab_size = Some(parse_field(parts.next(), lineno, "vocab size")?);
                }
                Some("eos") => {
                    eos = Some(parse_field(parts.next(), lineno, "eos token")?);
                }
                Some("order") => {
                    order = Some(parse_field(parts.next(), lineno, "order")?);
                }
                Some("ctx") => {
                    let rest: Vec<&str> = line["ctx".len()..].split('|').collect();
                    if rest.len() != 2 {
                        return Err(Error::parse(lineno, "expected `ctx <syms> | <probs>`"));
                    }
                    let ctx: Result<Vec<u32>> = rest[0]
                        .split_whitespace()
                        .map(|s| {
                            if s == "B" {
                                Ok(BEGIN_MARKER)
                            } else {
                                s.parse::<u32>()
                                    .map_err(|_| Error::parse(lineno, format!("bad symbol `{s}`")))
                            }
                        })
                        .collect();
                    let probs: Result<Vec<f64>> = rest[1]
                        .split_whitespace()
                        .map(|s| {
                            s.parse::<f64>()
                                .map_err(|_| Error::parse(lineno, format!("bad probability `{s}`")))
                        })
                        .collect();
                    rows.insert(ctx?, probs?);
                }
                Some(other) => {
                    return Err(Error::parse(lineno, format!("unknown directive `{other}`")));
                }
                None => unreachable!("blank lines are skipped"),
            }
        }

        let vocab_size: usize =
            vocab_size.ok_or_else(|| Error::parse(0, "missing `vocab` header"))?;
        let eos: u32 = eos.ok_or_else(|| Error::parse(0, "missing `eos` header"))?;
        let order: usize = order.ok_or_else(|| Error::parse(0, "missing `order` header"))?;
        let vocab = Vocabulary::new(vocab_size, eos)?;
        MarkovPolicy::from_rows(vocab, order, rows, hazard)
    }
}

fn parse_field<T: std::str::FromStr>(s: Option<&str>, line: usize, what: &str) -> Result<T> {
    s.and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(line, format!("missing or invalid {what}")))
}

fn canonical_token(ctx: &[u32], vocab: Vocabulary, seed: u64) -> TokenId {
    let mut h = splitmix64(seed ^ 0xa076_1d64_78bd_642f);
    for &c in ctx {
        h = splitmix64(h ^ c as u64);
    }
    // Map into the non-EOS tokens.
    let non_eos = vocab.size() as u64 - 1;
    let slot = h % non_eos;
    let tok = if slot >= vocab.eos as u64 { slot + 1 } else { slot };
    tok as TokenId
}

fn repetitive_row(ctx: &[u32], vocab: Vocabulary, spec: RepetitiveSpec) -> Vec<f64> {
    let v = vocab.size();
    let canonical = canonical_token(ctx, vocab, spec.seed) as usize;
    let mut row = vec![0.0; v];
    if v == 2 {
        // Single non-EOS token: it takes all the mass.
        row[canonical] = 1.0;
        return row;
    }
    let rest = (1.0 - spec.rho) / (v - 2) as f64;
    for (t, slot) in row.iter_mut().enumerate() {
        if t == vocab.eos as usize {
            continue;
        }
        *slot = if t == canonical { spec.rho } else { rest };
    }
    row
}

impl Policy for MarkovPolicy {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> PolicyDistribution {
        assert!(!prefix.is_empty(), "prefix must contain at least one token");
        let m = self.order;
        let row = if prefix.len() >= m {
            // Slice lookup avoids building a context vector per query.
            self.rows
                .get(&prefix[prefix.len() - m..])
                .unwrap_or(&self.fallback)
        } else {
            self.rows
                .get(self.context_of(prefix).as_slice())
                .unwrap_or(&self.fallback)
        };
        let h = self.hazard_at(prefix);
        if h == 0.0 {
            return PolicyDistribution::from_normalized(row.clone());
        }
        let mut probs: Vec<f64> = row.iter().map(|&p| p * (1.0 - h)).collect();
        probs[self.vocab.eos as usize] += h;
        PolicyDistribution::from_normalized(probs)
    }
}

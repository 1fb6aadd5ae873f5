//! Per-prompt suffix indexing of pre-generated token pools and
//! frequency-ranked draft retrieval.
//!
//! The index is a bounded-depth trie over every window of length `<= D`
//! occurring in the pool, with per-node occurrence counts. Construction is
//! `O(D * total pool tokens)`; retrieval anchors on the longest suffix of
//! the live prefix present in the trie and then greedily follows the
//! highest-count child. Trees are immutable once built and rebuilt from
//! scratch each training step.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::decode::DraftSource;
use crate::error::{Error, Result};
use crate::{PromptId, TokenId};

/// Default bound on indexed window length.
pub const DEFAULT_DEPTH_BOUND: usize = 32;

/// Default minimum anchor length for draft retrieval.
pub const DEFAULT_MIN_MATCH: usize = 1;

/// Pre-generated (possibly truncated) responses for one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPool {
    pub prompt: PromptId,
    pub sequences: Vec<Vec<TokenId>>,
}

impl TokenPool {
    pub fn new(prompt: PromptId, sequences: Vec<Vec<TokenId>>) -> Self {
        TokenPool { prompt, sequences }
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// A retrieved candidate continuation of length `<= K`.
///
/// An empty block (no tokens) signals "no draft available" and is never an
/// error. `match_depth` is the length of the prefix-suffix that anchored
/// retrieval, zero when nothing matched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftBlock {
    pub tokens: Vec<TokenId>,
    pub match_depth: usize,
}

impl DraftBlock {
    pub fn empty() -> Self {
        DraftBlock {
            tokens: Vec::new(),
            match_depth: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Default)]
struct Node {
    children: BTreeMap<TokenId, usize>,
    count: u64,
    terminal: u64,
}

/// Bounded-depth suffix index over a token pool.
#[derive(Debug)]
pub struct SuffixTree {
    nodes: Vec<Node>,
    depth_bound: usize,
    min_match: usize,
    source_tokens: usize,
    build_visits: u64,
}

impl SuffixTree {
    /// Indexes every window of length `<= depth_bound` in the pool.
    ///
    /// Anchors shorter than `min_match` are ignored at retrieval time.
    pub fn build(pool: &TokenPool, depth_bound: usize, min_match: usize) -> Self {
        assert!(depth_bound >= 2, "depth bound must allow a continuation");
        assert!(min_match >= 1, "minimum match length must be >= 1");
        let mut tree = SuffixTree {
            nodes: vec![Node::default()],
            depth_bound,
            min_match,
            source_tokens: pool.total_tokens(),
            build_visits: 0,
        };
        for seq in &pool.sequences {
            for start in 0..seq.len() {
                let end = (start + depth_bound).min(seq.len());
                tree.insert_window(&seq[start..end]);
            }
        }
        tree
    }

    fn insert_window(&mut self, window: &[TokenId]) {
        self.nodes[0].count += 1;
        let mut node = 0usize;
        for &tok in window {
            let next = match self.nodes[node].children.get(&tok) {
                Some(&n) => n,
                None => {
                    let n = self.nodes.len();
                    self.nodes.push(Node::default());
                    self.nodes[node].children.insert(tok, n);
                    n
                }
            };
            self.nodes[next].count += 1;
            self.build_visits += 1;
            node = next;
        }
        self.nodes[node].terminal += 1;
    }

    /// Occurrence count of a pattern, zero if absent or too long.
    pub fn pattern_count(&self, pattern: &[TokenId]) -> u64 {
        match self.walk(pattern) {
            Some(node) => self.nodes[node].count,
            None => 0,
        }
    }

    fn walk(&self, pattern: &[TokenId]) -> Option<usize> {
        let mut node = 0usize;
        for tok in pattern {
            node = *self.nodes[node].children.get(tok)?;
        }
        Some(node)
    }

    /// Retrieves a draft for the live prefix.
    ///
    /// Finds the longest suffix of `prefix` (length in
    /// `[min_match, depth_bound - 1]`) that is a root path, then descends
    /// up to `k` steps, always to the highest-occurrence-count child with
    /// ties toward the lowest token id. Blocks come back shorter than `k`
    /// when a leaf (or the depth bound) is reached.
    pub fn retrieve_draft(&self, prefix: &[TokenId], k: usize) -> DraftBlock {
        debug_assert!(k >= 1, "draft length must be >= 1");
        let max_anchor = prefix.len().min(self.depth_bound - 1);
        // Every suffix of an indexed window is itself an indexed window,
        // so matching anchor lengths form a contiguous range; ascend
        // until the first failure instead of rescanning from the longest.
        let mut found: Option<(usize, usize)> = None;
        for anchor in self.min_match..=max_anchor {
            match self.walk(&prefix[prefix.len() - anchor..]) {
                Some(node) => found = Some((anchor, node)),
                None => break,
            }
        }
        let Some((anchor, node)) = found else {
            return DraftBlock::empty();
        };
        let mut tokens = Vec::with_capacity(k);
        let mut cur = node;
        let mut depth = anchor;
        while tokens.len() < k && depth < self.depth_bound {
            // Ascending id iteration with a strict comparison keeps the
            // lowest token id among equal-count children.
            let mut best: Option<(TokenId, usize, u64)> = None;
            for (&tok, &child) in &self.nodes[cur].children {
                let count = self.nodes[child].count;
                if best.map_or(true, |(_, _, b)| count > b) {
                    best = Some((tok, child, count));
                }
            }
            let Some((tok, child, _)) = best else { break };
            tokens.push(tok);
            cur = child;
            depth += 1;
        }
        DraftBlock {
            tokens,
            match_depth: anchor,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn source_tokens(&self) -> usize {
        self.source_tokens
    }

    /// Node visits performed during construction; bounded by
    /// `depth_bound * source_tokens`.
    pub fn build_visits(&self) -> u64 {
        self.build_visits
    }

    pub fn depth_bound(&self) -> usize {
        self.depth_bound
    }

    pub fn min_match(&self) -> usize {
        self.min_match
    }

    /// Checks the structural count identity on every node: a node's count
    /// equals the sum of its children's counts plus the windows that
    /// terminate there.
    pub fn counts_consistent(&self) -> bool {
        self.nodes.iter().all(|node| {
            let child_sum: u64 = node.children.values().map(|&c| self.nodes[c].count).sum();
            node.count == child_sum + node.terminal
        })
    }
}

impl DraftSource for SuffixTree {
    fn draft(&self, prefix: &[TokenId], k: usize) -> DraftBlock {
        self.retrieve_draft(prefix, k)
    }
}

/// Draft retrieval by direct linear scan of the pool, no index.
///
/// Matches the longest suffix of the prefix anywhere in the pool and
/// returns the continuation of the *first* such occurrence (sequence
/// order, then position), ignoring occurrence frequencies. This is the
/// n-gram baseline drafting strategy.
#[derive(Debug)]
pub struct NgramScanner {
    pool: TokenPool,
    max_anchor: usize,
    min_match: usize,
}

impl NgramScanner {
    pub fn new(pool: TokenPool, max_anchor: usize, min_match: usize) -> Self {
        assert!(min_match >= 1);
        NgramScanner {
            pool,
            max_anchor,
            min_match,
        }
    }
}

impl DraftSource for NgramScanner {
    fn draft(&self, prefix: &[TokenId], k: usize) -> DraftBlock {
        let max_anchor = prefix.len().min(self.max_anchor);
        for anchor in (self.min_match..=max_anchor).rev() {
            let pattern = &prefix[prefix.len() - anchor..];
            for seq in &self.pool.sequences {
                if seq.len() < anchor {
                    continue;
                }
                for start in 0..=(seq.len() - anchor) {
                    if &seq[start..start + anchor] == pattern {
                        let cont = &seq[start + anchor..(start + anchor + k).min(seq.len())];
                        if !cont.is_empty() {
                            return DraftBlock {
                                tokens: cont.to_vec(),
                                match_depth: anchor,
                            };
                        }
                    }
                }
            }
        }
        DraftBlock::empty()
    }
}

/// Splits pools into per-rank sets according to a prompt-to-rank map.
///
/// Every prompt must be assigned; the union of the shards is exactly the
/// input.
pub fn shard_pools(
    pools: Vec<TokenPool>,
    assignment: &BTreeMap<PromptId, usize>,
    rank_count: usize,
) -> Result<Vec<Vec<TokenPool>>> {
    let mut shards: Vec<Vec<TokenPool>> = (0..rank_count).map(|_| Vec::new()).collect();
    for pool in pools {
        let &rank = assignment
            .get(&pool.prompt)
            .ok_or(Error::UnassignedPrompt(pool.prompt))?;
        if rank >= rank_count {
            return Err(Error::config(format!(
                "prompt {} assigned to rank {rank}, only {rank_count} ranks",
                pool.prompt
            )));
        }
        shards[rank].push(pool);
    }
    Ok(shards)
}

/// Writes pools as plain text: a `pool <prompt>` header followed by one
/// space-separated token line per sequence. Empty sequences are dropped
/// (they are unobservable in retrieval).
pub fn write_pools<W: Write>(mut w: W, pools: &[TokenPool]) -> std::io::Result<()> {
    for pool in pools {
        writeln!(w, "pool {}", pool.prompt)?;
        for seq in &pool.sequences {
            if seq.is_empty() {
                continue;
            }
            let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

/// Parses the format written by [`write_pools`].
pub fn read_pools<R: BufRead>(r: R) -> Result<Vec<TokenPool>> {
    let mut pools: Vec<TokenPool> = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("pool ") {
            let prompt: PromptId = rest
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad prompt id `{rest}`")))?;
            pools.push(TokenPool::new(prompt, Vec::new()));
        } else {
            let pool = pools
                .last_mut()
                .ok_or_else(|| Error::parse(lineno, "token line before any `pool` header"))?;
            let seq: Result<Vec<TokenId>> = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<TokenId>()
                        .map_err(|_| Error::parse(lineno, format!("bad token `{s}`")))
                })
                .collect();
            pool.sequences.push(seq?);
        }
    }
    Ok(pools)
}

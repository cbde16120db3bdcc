//! Interactive parity-exchange error reconciliation.
//!
//! Bob (the side holding the error-laden key) drives the exchange: for each
//! pass he announces a block permutation, fetches Alice's parities for every
//! top-level block in one batch, and binary-searches each mismatched block
//! with single-range queries until one differing bit is isolated and
//! flipped. Every flip re-evaluates the blocks of all earlier passes that
//! contain the corrected position, so errors masked in pairs earlier
//! cascade into further corrections once a later pass splits them.
//!
//! Alice's side ([`AliceCascade`]) never mutates her key; she precomputes a
//! prefix-parity array per announced permutation and answers any range query
//! in O(1).
//!
//! Every parity bit that crosses the channel is counted by both sides; the
//! total is the reconciliation leakage that privacy amplification must later
//! remove.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bits::Bits;
use crate::wire::ParityRange;

/// Hard ceiling on reconciliation passes.
pub const MAX_PASSES: u8 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum CascadeError {
    #[error("reconciliation needs at least 16 bits, got {0}")]
    KeyTooShort(usize),
    #[error("error estimate {0} is not a probability below one")]
    InvalidEstimate(f64),
    #[error("pass count {0} outside 1..={MAX_PASSES}")]
    InvalidPasses(u8),
    #[error("need {expected} shuffle seeds for the configured passes, got {got}")]
    SeedCount { expected: usize, got: usize },
    #[error("peer broke the parity protocol: {0}")]
    Protocol(&'static str),
    #[error("parity oracle failed: {0}")]
    Oracle(String),
}

/// Tuning of a reconciliation run. `shuffle_seeds` holds one permutation
/// seed per pass after the first (the first pass uses natural order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CascadeConfig {
    pub n_passes: u8,
    pub shuffle_seeds: Vec<u64>,
}

impl CascadeConfig {
    pub fn new(n_passes: u8, shuffle_seeds: Vec<u64>) -> Result<Self, CascadeError> {
        if n_passes == 0 || n_passes > MAX_PASSES {
            return Err(CascadeError::InvalidPasses(n_passes));
        }
        let expected = n_passes as usize - 1;
        if shuffle_seeds.len() != expected {
            return Err(CascadeError::SeedCount { expected, got: shuffle_seeds.len() });
        }
        Ok(CascadeConfig { n_passes, shuffle_seeds })
    }

    /// Draws the shuffle seeds from `rng`.
    pub fn from_rng<R: Rng>(n_passes: u8, rng: &mut R) -> Result<Self, CascadeError> {
        if n_passes == 0 || n_passes > MAX_PASSES {
            return Err(CascadeError::InvalidPasses(n_passes));
        }
        let seeds = (1..n_passes).map(|_| rng.gen()).collect();
        CascadeConfig::new(n_passes, seeds)
    }
}

impl Default for CascadeConfig {
    /// Four passes with fixed, arbitrary shuffle seeds. Sessions draw fresh
    /// seeds instead; the default exists for standalone use.
    fn default() -> Self {
        CascadeConfig { n_passes: 4, shuffle_seeds: vec![0x5eed_0002, 0x5eed_0003, 0x5eed_0004] }
    }
}

/// First-pass block size: `ceil(0.73 / e)` clamped to `[4, n/2]`, with the
/// estimate floored at `1/n` so an error-free sample still yields finite
/// blocks.
pub fn initial_block_size(e_est: f64, n: usize) -> usize {
    let e = e_est.max(1.0 / n as f64);
    let k = (0.73 / e).ceil() as usize;
    k.clamp(4, (n / 2).max(4))
}

/// Block size of pass `pass` (1-based): doubles each pass, capped at `n`.
pub fn pass_block_size(k1: usize, pass: u8, n: usize) -> usize {
    k1.saturating_mul(1usize << (pass as u32 - 1).min(40)).min(n).max(1)
}

/// Position permutation of pass `pass`: natural order for the first pass,
/// otherwise a seeded Fisher-Yates shuffle of `0..n`.
pub fn pass_permutation(n: usize, pass: u8, seed: u64) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    if pass >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
    }
    perm
}

/// Answers parity queries over a permuted key range.
///
/// Implementations must answer `ranges` in order, one parity bit each.
pub trait ParityOracle {
    /// Installs the permutation seed for `pass` before any query on it.
    fn set_shuffle(&mut self, pass: u8, seed: u64) -> Result<(), CascadeError>;
    fn parities(&mut self, ranges: &[ParityRange]) -> Result<Bits, CascadeError>;
}

/// Alice's side of reconciliation: static key, O(1) range parities via
/// per-pass prefix arrays, and a running count of disclosed bits.
#[derive(Debug, Clone)]
pub struct AliceCascade {
    key: Bits,
    n_passes: u8,
    prefixes: Vec<Option<Bits>>,
    answered_bits: u64,
}

impl AliceCascade {
    pub fn new(key: Bits, n_passes: u8) -> Result<Self, CascadeError> {
        if n_passes == 0 || n_passes > MAX_PASSES {
            return Err(CascadeError::InvalidPasses(n_passes));
        }
        if key.len() < 16 {
            return Err(CascadeError::KeyTooShort(key.len()));
        }
        let mut s = AliceCascade {
            key,
            n_passes,
            prefixes: vec![None; n_passes as usize],
            answered_bits: 0,
        };
        s.install_pass(1, 0);
        Ok(s)
    }

    fn install_pass(&mut self, pass: u8, seed: u64) {
        let n = self.key.len();
        let perm = pass_permutation(n, pass, seed);
        let mut prefix = Bits::zeros(n + 1);
        let mut p = 0u8;
        for (i, &src) in perm.iter().enumerate() {
            p ^= self.key.get(src as usize);
            prefix.set(i + 1, p);
        }
        self.prefixes[pass as usize - 1] = Some(prefix);
    }

    /// Parity of the permuted range `[start, start + len)` of `pass`.
    pub fn range_parity(&self, pass: u8, start: u32, len: u32) -> Result<u8, CascadeError> {
        if pass == 0 || pass > self.n_passes {
            return Err(CascadeError::Protocol("parity query for an unknown pass"));
        }
        let prefix = self.prefixes[pass as usize - 1]
            .as_ref()
            .ok_or(CascadeError::Protocol("parity query before the pass shuffle"))?;
        let end = start
            .checked_add(len)
            .ok_or(CascadeError::Protocol("parity range overflows"))? as usize;
        if len == 0 || end > self.key.len() {
            return Err(CascadeError::Protocol("parity range outside the key"));
        }
        Ok(prefix.get(start as usize) ^ prefix.get(end))
    }

    /// Parity bits this side has disclosed so far.
    pub fn leak_bits(&self) -> u64 {
        self.answered_bits
    }
}

impl ParityOracle for AliceCascade {
    fn set_shuffle(&mut self, pass: u8, seed: u64) -> Result<(), CascadeError> {
        if pass < 2 || pass > self.n_passes {
            return Err(CascadeError::Protocol("shuffle for an out-of-range pass"));
        }
        if self.prefixes[pass as usize - 1].is_some() {
            return Err(CascadeError::Protocol("pass shuffled twice"));
        }
        self.install_pass(pass, seed);
        Ok(())
    }

    fn parities(&mut self, ranges: &[ParityRange]) -> Result<Bits, CascadeError> {
        let mut out = Bits::zeros(ranges.len());
        for (i, r) in ranges.iter().enumerate() {
            out.set(i, self.range_parity(r.pass, r.start, r.len)?);
        }
        self.answered_bits += ranges.len() as u64;
        Ok(out)
    }
}

/// Result of a reconciliation run on Bob's side.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutcome {
    /// Bob's corrected key.
    pub key: Bits,
    /// Parity bits Alice disclosed over the whole run.
    pub leak_bits: u64,
    /// Bits flipped in Bob's key.
    pub corrected: u64,
    /// Corrections attributed to the pass whose block isolated them,
    /// indexed by pass minus one. Entries for earlier passes growing during
    /// later passes are the avalanche at work.
    pub corrected_via_pass: Vec<u64>,
    pub initial_block_size: usize,
}

struct PassState {
    k: usize,
    perm: Vec<u32>,
    inv: Vec<u32>,
    alice_top: Bits,
    bob_top: Bits,
}

fn range_parity_local(key: &Bits, perm: &[u32], start: usize, len: usize) -> u8 {
    let mut p = 0u8;
    for &src in &perm[start..start + len] {
        p ^= key.get(src as usize);
    }
    p
}

/// Runs reconciliation over `key` against a parity oracle for the matching
/// key. Returns the corrected key and the exchange's leakage accounting.
///
/// The caller supplies the error estimate that sizes the first-pass blocks;
/// the shuffle seeds in `cfg` are announced to the oracle pass by pass.
pub fn reconcile<O: ParityOracle>(
    key: &Bits,
    e_est: f64,
    cfg: &CascadeConfig,
    oracle: &mut O,
) -> Result<CascadeOutcome, CascadeError> {
    let n = key.len();
    if n < 16 {
        return Err(CascadeError::KeyTooShort(n));
    }
    if !e_est.is_finite() || !(0.0..1.0).contains(&e_est) {
        return Err(CascadeError::InvalidEstimate(e_est));
    }
    if cfg.n_passes == 0 || cfg.n_passes > MAX_PASSES {
        return Err(CascadeError::InvalidPasses(cfg.n_passes));
    }
    if cfg.shuffle_seeds.len() != cfg.n_passes as usize - 1 {
        return Err(CascadeError::SeedCount {
            expected: cfg.n_passes as usize - 1,
            got: cfg.shuffle_seeds.len(),
        });
    }

    let mut key = key.clone();
    let k1 = initial_block_size(e_est, n);
    let mut passes: Vec<PassState> = Vec::new();
    // Top-level blocks currently believed to hold an odd number of errors,
    // keyed by (pass, block).
    let mut pending: BTreeSet<(u8, u32)> = BTreeSet::new();
    let mut leak = 0u64;
    let mut corrected = 0u64;
    let mut corrected_via_pass = vec![0u64; cfg.n_passes as usize];

    for pass_no in 1..=cfg.n_passes {
        let seed = if pass_no >= 2 {
            let s = cfg.shuffle_seeds[pass_no as usize - 2];
            oracle.set_shuffle(pass_no, s)?;
            s
        } else {
            0
        };
        let k = pass_block_size(k1, pass_no, n);
        let perm = pass_permutation(n, pass_no, seed);
        let mut inv = vec![0u32; n];
        for (i, &src) in perm.iter().enumerate() {
            inv[src as usize] = i as u32;
        }
        let n_blocks = n.div_ceil(k);

        // One batched query covers every top-level block of the pass, even
        // ones: the leakage floor is the full block count each pass.
        let ranges: Vec<ParityRange> = (0..n_blocks)
            .map(|b| ParityRange {
                pass: pass_no,
                start: (b * k) as u32,
                len: (k.min(n - b * k)) as u32,
            })
            .collect();
        let alice_top = oracle.parities(&ranges)?;
        if alice_top.len() != n_blocks {
            return Err(CascadeError::Protocol("top-level parity count mismatch"));
        }
        leak += n_blocks as u64;

        let mut bob_top = Bits::zeros(n_blocks);
        for b in 0..n_blocks {
            bob_top.set(b, range_parity_local(&key, &perm, b * k, k.min(n - b * k)));
        }
        for b in 0..n_blocks {
            if alice_top.get(b) != bob_top.get(b) {
                pending.insert((pass_no, b as u32));
            }
        }
        passes.push(PassState { k, perm, inv, alice_top, bob_top });

        // Resolve every known-odd block; fixes may re-open blocks of any
        // earlier pass, which are handled within the same stage.
        while let Some(&(q, blk)) = pending.iter().next() {
            pending.remove(&(q, blk));
            let qi = q as usize - 1;

            // Binary search: query Alice's left-half parity, derive the
            // right half from the whole, and descend into the odd half.
            let (pos, queries) = {
                let st = &passes[qi];
                let mut start = blk as usize * st.k;
                let mut len = st.k.min(n - start);
                let mut queries = 0u64;
                while len > 1 {
                    let half = len / 2;
                    let reply = oracle.parities(&[ParityRange {
                        pass: q,
                        start: start as u32,
                        len: half as u32,
                    }])?;
                    if reply.len() != 1 {
                        return Err(CascadeError::Protocol("expected a single parity bit"));
                    }
                    queries += 1;
                    let ours = range_parity_local(&key, &st.perm, start, half);
                    if reply.get(0) != ours {
                        len = half;
                    } else {
                        start += half;
                        len -= half;
                    }
                }
                (st.perm[start] as usize, queries)
            };
            leak += queries;

            key.flip(pos);
            corrected += 1;
            corrected_via_pass[qi] += 1;
            for (pi, st) in passes.iter_mut().enumerate() {
                let b = st.inv[pos] as usize / st.k;
                st.bob_top.flip(b);
                let entry = (pi as u8 + 1, b as u32);
                if st.alice_top.get(b) != st.bob_top.get(b) {
                    pending.insert(entry);
                } else {
                    pending.remove(&entry);
                }
            }
        }
    }

    Ok(CascadeOutcome { key, leak_bits: leak, corrected, corrected_via_pass, initial_block_size: k1 })
}

/// Leakage of a run that finds no errors: the top-level block count summed
/// over all passes.
pub fn zero_error_leak(n: usize, e_est: f64, n_passes: u8) -> u64 {
    let k1 = initial_block_size(e_est, n);
    (1..=n_passes).map(|p| n.div_ceil(pass_block_size(k1, p, n)) as u64).sum()
}

/// Shannon binary entropy `h(e)` in bits; the information-theoretic floor
/// of reconciliation leakage is `n·h(e)`.
pub fn binary_entropy(e: f64) -> f64 {
    if e <= 0.0 || e >= 1.0 {
        return 0.0;
    }
    -e * e.log2() - (1.0 - e) * (1.0 - e).log2()
}

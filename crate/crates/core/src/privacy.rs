//! Leakage accounting and universal-hash key compression.
//!
//! After reconciliation, the shared key is only partially secret: the error
//! rate bounds what an eavesdropper may have learned from the quantum
//! channel, and the parity/verification traffic disclosed further bits
//! outright. This module computes how many secret bits survive
//! ([`final_length`]) and extracts them with a Toeplitz-matrix universal
//! hash ([`toeplitz_hash`]), a GF(2) linear map defined by an
//! `n + m - 1`-bit seed that may travel in the clear.
//!
//! The hash is evaluated as a carryless convolution over 64-bit words with
//! per-word nibble tables, so compressing a few-hundred-kilobit key takes
//! well under a second; the result is bit-identical to the textbook
//! matrix-vector definition.

use thiserror::Error;

use crate::bits::Bits;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("error rate {0} outside [0, 0.5) for entropy accounting")]
    InvalidQber(f64),
    #[error("error rate {0} is at or above the 0.11 abort threshold")]
    QberTooHigh(f64),
    #[error("hash seed must be {expected} bits, got {got}")]
    SeedLength { expected: usize, got: usize },
    #[error("multi-photon fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
}

/// Classical bits disclosed during a session, by category. Counters only
/// ever increase.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LeakLedger {
    /// Reconciliation parities answered over the wire.
    pub parity_bits: u64,
    /// Verification-digest disclosure (a flat 50 once a digest crossed).
    pub verify_bits: u64,
    /// Error-estimation sample bits; disclosed and removed from the key.
    pub sample_bits: u64,
}

impl LeakLedger {
    /// Disclosure that weakens the *remaining* key and must be subtracted by
    /// [`final_length`]. Sample bits are excluded: they were cut from the
    /// key, not left inside it.
    pub fn reconciliation_total(&self) -> u64 {
        self.parity_bits + self.verify_bits
    }

    /// Everything key-correlated that crossed the wire; a channel tap's
    /// reconstruction must equal this exactly.
    pub fn wire_total(&self) -> u64 {
        self.parity_bits + self.verify_bits + self.sample_bits
    }
}

/// Fraction of each key bit's secrecy surrendered at error rate `e`:
/// `log2(1 + 4e - 4e²)`, the collision-entropy loss for an
/// intercept-bounded eavesdropper. Zero at `e = 0`, approaching one as `e`
/// nears one half.
pub fn collision_entropy_loss(e: f64) -> Result<f64, PrivacyError> {
    if !e.is_finite() || !(0.0..0.5).contains(&e) {
        return Err(PrivacyError::InvalidQber(e));
    }
    Ok((1.0 + 4.0 * e - 4.0 * e * e).log2())
}

/// Secure output length: `floor(n·(1 - loss(e)) - leak_bits - safety_bits)`,
/// clamped at zero. `e` must be below the 0.11 session-abort threshold.
pub fn final_length(
    n: usize,
    e: f64,
    leak_bits: u64,
    safety_bits: u64,
) -> Result<usize, PrivacyError> {
    if e.is_finite() && e >= crate::security::QBER_ABORT_THRESHOLD {
        return Err(PrivacyError::QberTooHigh(e));
    }
    let loss = collision_entropy_loss(e)?;
    let m = n as f64 * (1.0 - loss) - leak_bits as f64 - safety_bits as f64;
    Ok(if m <= 0.0 { 0 } else { m.floor() as usize })
}

/// [`final_length`] with the multi-photon pulse fraction additionally
/// surrendered (`multi_fraction` of the key assumed fully known to an
/// unrestricted photon-number-splitting attacker).
pub fn final_length_unconditional(
    n: usize,
    e: f64,
    leak_bits: u64,
    safety_bits: u64,
    multi_fraction: f64,
) -> Result<usize, PrivacyError> {
    if !multi_fraction.is_finite() || !(0.0..=1.0).contains(&multi_fraction) {
        return Err(PrivacyError::InvalidFraction(multi_fraction));
    }
    if e.is_finite() && e >= crate::security::QBER_ABORT_THRESHOLD {
        return Err(PrivacyError::QberTooHigh(e));
    }
    let loss = collision_entropy_loss(e)?;
    let m = n as f64 * (1.0 - loss - multi_fraction) - leak_bits as f64 - safety_bits as f64;
    Ok(if m <= 0.0 { 0 } else { m.floor() as usize })
}

/// Carryless 64x64 multiply table: `T[x] = clmul(x, b)` for each nibble
/// value `x`, as (low, high) 128-bit halves.
fn nibble_table(b: u64) -> [(u64, u64); 16] {
    let mut t = [(0u64, 0u64); 16];
    for (x, entry) in t.iter_mut().enumerate().skip(1) {
        let mut lo = 0u64;
        let mut hi = 0u64;
        for bit in 0..4 {
            if x >> bit & 1 == 1 {
                lo ^= b << bit;
                if bit > 0 {
                    hi ^= b >> (64 - bit);
                }
            }
        }
        *entry = (lo, hi);
    }
    t
}

/// XORs `clmul(a, b)` into `acc[word_off..word_off + 2]`, with `b` given by
/// its nibble table.
fn clmul_xor_into(acc: &mut [u64], word_off: usize, a: u64, table: &[(u64, u64); 16]) {
    let mut lo = 0u64;
    let mut hi = 0u64;
    for k in 0..16 {
        let nib = ((a >> (4 * k)) & 0xF) as usize;
        if nib == 0 {
            continue;
        }
        let (tlo, thi) = table[nib];
        lo ^= tlo << (4 * k);
        if k > 0 {
            hi ^= (thi << (4 * k)) | (tlo >> (64 - 4 * k));
        } else {
            hi ^= thi;
        }
    }
    acc[word_off] ^= lo;
    acc[word_off + 1] ^= hi;
}

/// Compresses `key` (length `n`) to `m` bits with the Toeplitz matrix
/// defined by `seed` (length `n + m - 1`):
/// `out[i] = XOR_j seed[i - j + n - 1] · key[j]`.
///
/// Equivalently, `out` is the window `[n - 1, n - 1 + m)` of the GF(2)
/// convolution of `key` and `seed`, which is how it is computed here.
pub fn toeplitz_hash(key: &Bits, seed: &Bits, m: usize) -> Result<Bits, PrivacyError> {
    let n = key.len();
    let expected = (n + m).saturating_sub(1);
    if seed.len() != expected {
        return Err(PrivacyError::SeedLength { expected, got: seed.len() });
    }
    if m == 0 {
        return Ok(Bits::new());
    }
    if n == 0 {
        return Ok(Bits::zeros(m));
    }

    let conv_bits = n + seed.len() - 1;
    let mut acc = vec![0u64; conv_bits.div_ceil(64) + 2];
    for (sw, &b) in seed.words().iter().enumerate() {
        if b == 0 {
            continue;
        }
        let table = nibble_table(b);
        for (kw, &a) in key.words().iter().enumerate() {
            if a == 0 {
                continue;
            }
            clmul_xor_into(&mut acc, sw + kw, a, &table);
        }
    }

    // Extract conv[n-1 .. n-1+m] with a cross-word shift.
    let start = n - 1;
    let word_shift = start / 64;
    let bit_shift = start % 64;
    let out_words = m.div_ceil(64);
    let mut words = Vec::with_capacity(out_words);
    for j in 0..out_words {
        let lo = acc[word_shift + j] >> bit_shift;
        let hi = if bit_shift > 0 { acc[word_shift + j + 1] << (64 - bit_shift) } else { 0 };
        words.push(lo | hi);
    }
    Ok(Bits::from_words(words, m))
}

/// Textbook matrix-vector evaluation of the same hash; quadratic, used as
/// the correctness oracle in tests.
#[cfg(test)]
fn toeplitz_hash_naive(key: &Bits, seed: &Bits, m: usize) -> Bits {
    let n = key.len();
    let mut out = Bits::zeros(m);
    for i in 0..m {
        let mut acc = 0u8;
        for j in 0..n {
            acc ^= seed.get(i + n - 1 - j) & key.get(j);
        }
        out.set(i, acc);
    }
    out
}

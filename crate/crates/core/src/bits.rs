//! Packed bit strings.
//!
//! Keys, basis records, bitmaps, and wire payloads are all sequences of bits
//! that routinely reach a few hundred kilobits, so they are stored packed into
//! `u64` words. Bit `i` lives in word `i / 64` at position `i % 64` (LSB
//! first). All bits at positions `>= len` in the last word are kept zero,
//! which makes word-level equality, XOR, and popcounts valid without masking.

use rand::RngCore;

/// A growable, packed sequence of bits.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Bits {
    words: Vec<u64>,
    len: usize,
}

impl Bits {
    /// Empty bit string.
    pub fn new() -> Self {
        Bits { words: Vec::new(), len: 0 }
    }

    /// `len` zero bits.
    pub fn zeros(len: usize) -> Self {
        Bits { words: vec![0; len.div_ceil(64)], len }
    }

    /// Builds from a slice of `0`/`1` values.
    pub fn from_bits(bits: &[u8]) -> Self {
        let mut out = Bits::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            out.set(i, b);
        }
        out
    }

    /// `len` uniformly random bits drawn from `rng`.
    pub fn random<R: RngCore>(rng: &mut R, len: usize) -> Self {
        let mut words = vec![0u64; len.div_ceil(64)];
        for w in words.iter_mut() {
            *w = rng.next_u64();
        }
        let mut out = Bits { words, len };
        out.mask_tail();
        out
    }

    /// Builds from raw LSB-first words, keeping the first `len` bits. The
    /// word vector is resized to fit and the tail is cleared.
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Self {
        words.resize(len.div_ceil(64), 0);
        let mut out = Bits { words, len };
        out.mask_tail();
        out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bit at position `i` as `0` or `1`.
    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        debug_assert!(i < self.len);
        ((self.words[i / 64] >> (i % 64)) & 1) as u8
    }

    /// Sets bit `i` to `v` (`v` must be `0` or `1`).
    #[inline]
    pub fn set(&mut self, i: usize, v: u8) {
        debug_assert!(i < self.len);
        debug_assert!(v <= 1);
        let mask = 1u64 << (i % 64);
        if v == 1 {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    /// Flips bit `i`.
    #[inline]
    pub fn flip(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    /// Appends one bit.
    pub fn push(&mut self, v: u8) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, v);
    }

    /// Number of set bits.
    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// XOR parity of the whole string.
    pub fn parity(&self) -> u8 {
        (self.words.iter().fold(0u64, |a, w| a ^ w).count_ones() & 1) as u8
    }

    /// Number of positions where `self` and `other` differ.
    ///
    /// Both strings must have the same length.
    pub fn hamming_distance(&self, other: &Bits) -> usize {
        assert_eq!(self.len, other.len, "hamming_distance requires equal lengths");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// Iterates bits as `0`/`1` values.
    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// Backing words, LSB-first. Bits beyond `len` are zero.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// New string containing the bits at `indices` (in the given order).
    pub fn select(&self, indices: &[u32]) -> Bits {
        let mut out = Bits::zeros(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            out.set(k, self.get(i as usize));
        }
        out
    }

    /// New string with the bits at `sorted_indices` removed; the remaining
    /// bits keep their relative order. Indices must be strictly increasing.
    pub fn remove_sorted(&self, sorted_indices: &[u32]) -> Bits {
        let mut out = Bits::zeros(self.len - sorted_indices.len());
        let mut next = 0usize;
        let mut k = 0usize;
        for i in 0..self.len {
            if next < sorted_indices.len() && sorted_indices[next] as usize == i {
                next += 1;
            } else {
                out.set(k, self.get(i));
                k += 1;
            }
        }
        out
    }

    /// Contiguous sub-string `[start, start + len)`.
    pub fn extract(&self, start: usize, len: usize) -> Bits {
        assert!(start + len <= self.len, "extract out of range");
        let mut out = Bits::zeros(len);
        let mut i = 0;
        while i < len {
            let src = start + i;
            let avail = (64 - (src % 64)).min(len - i).min(64 - (i % 64));
            let chunk = (self.words[src / 64] >> (src % 64)) & mask_low(avail);
            out.words[i / 64] |= chunk << (i % 64);
            i += avail;
        }
        out
    }

    /// Packs MSB-first into bytes, zero-padded to a byte boundary.
    ///
    /// Returns `(pad_bits, bytes)` where `pad_bits` is the number of zero
    /// padding bits in the final byte (`0..=7`; `0` for the empty string).
    pub fn pack_msb0(&self) -> (u8, Vec<u8>) {
        let n_bytes = self.len.div_ceil(8);
        let mut bytes = vec![0u8; n_bytes];
        for i in 0..self.len {
            if self.get(i) == 1 {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        let pad = (n_bytes * 8 - self.len) as u8;
        (pad, bytes)
    }

    /// Inverse of [`pack_msb0`](Self::pack_msb0).
    ///
    /// Fails if `pad >= 8`, if `pad` is nonzero for an empty byte string, or
    /// if any padding bit is set.
    pub fn unpack_msb0(pad: u8, bytes: &[u8]) -> Result<Bits, &'static str> {
        if pad >= 8 {
            return Err("pad length must be 0..=7");
        }
        if bytes.is_empty() {
            return if pad == 0 { Ok(Bits::new()) } else { Err("nonzero pad on empty bit string") };
        }
        let len = bytes.len() * 8 - pad as usize;
        if bytes[bytes.len() - 1] & mask_low_u8(pad as usize) != 0 {
            return Err("padding bits must be zero");
        }
        let mut out = Bits::zeros(len);
        for i in 0..len {
            out.set(i, (bytes[i / 8] >> (7 - i % 8)) & 1);
        }
        Ok(out)
    }

    /// Lowercase hex of the MSB-first byte packing.
    pub fn to_hex(&self) -> String {
        let (_, bytes) = self.pack_msb0();
        let mut s = String::with_capacity(bytes.len() * 2);
        for b in bytes {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    fn mask_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= mask_low(rem);
            }
        }
    }
}

impl std::fmt::Debug for Bits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Bits[{}; ", self.len)?;
        for i in 0..self.len.min(64) {
            write!(f, "{}", self.get(i))?;
        }
        if self.len > 64 {
            write!(f, "…")?;
        }
        write!(f, "]")
    }
}

#[inline]
fn mask_low(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

#[inline]
fn mask_low_u8(n: usize) -> u8 {
    ((1u16 << n) - 1) as u8
}

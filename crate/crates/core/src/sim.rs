//! Stochastic simulation of the quantum transmission layer.
//!
//! Two interchangeable engines produce the raw material for a key exchange:
//!
//! * [`simulate_exact`] walks every clock cycle: random bit/basis choices on
//!   both ends, interferometric detection with phase drift, spurious counts,
//!   and an optional intercept-resend attacker. Output is a full
//!   [`CycleBatch`].
//! * [`simulate_aggregated`] draws the same statistics as binomial counts per
//!   (Alice basis, Alice bit, Bob basis) cell, in time independent of the
//!   cycle count, and [`synthesize_sample`] expands the tallies back into a
//!   detection stream for the protocol layer.
//!
//! Both engines are deterministic functions of their seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use thiserror::Error;

use crate::bits::Bits;
use crate::link::{signal_rate_per_cycle, LinkError, LinkParams};

/// RNG stream label for quantum-layer event sampling.
pub const DOMAIN_EVENTS: u8 = 0;
/// RNG stream label for the interferometer drift walk.
pub const DOMAIN_DRIFT: u8 = 1;
/// RNG stream label for tally-to-event synthesis.
pub const DOMAIN_SYNTH: u8 = 2;
/// RNG stream label for Bob's protocol randomness (sampling positions,
/// hashing salts, amplification seed).
pub const DOMAIN_SESSION: u8 = 3;
/// RNG stream label for Alice's protocol randomness (shuffle seeds).
pub const DOMAIN_SESSION_ALICE: u8 = 4;

/// Deterministic, domain-separated RNG stream for a run seed.
///
/// Different `domain` values yield independent streams, so consumers can draw
/// without perturbing each other's sequences.
pub fn domain_rng(seed: u64, domain: u8) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = domain;
    key[9..16].copy_from_slice(b"qkdsubs");
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Param(#[from] LinkError),
    #[error("attack fraction {0} outside [0, 1]")]
    AttackFraction(f64),
    #[error("visibility {0} outside [0, 1]")]
    VisibilityRange(f64),
    #[error("exact mode limited to 2^31 cycles per batch, requested {0}")]
    ExactTooLarge(u64),
    #[error("tally counts inconsistent: {0}")]
    BadTallies(&'static str),
}

/// Measurement basis. `Z` encodes bit values at phases {0, π}; `X` at
/// {π/2, 3π/2}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    /// `0 -> Z`, `1 -> X`.
    pub fn from_bit(b: u8) -> Basis {
        if b == 0 {
            Basis::Z
        } else {
            Basis::X
        }
    }

    pub fn as_bit(self) -> u8 {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }
}

/// Modulator phase for a (bit, basis) choice: `bit * π + (basis == X) * π/2`.
pub fn encode_phase(bit: u8, basis: Basis) -> f64 {
    debug_assert!(bit <= 1);
    bit as f64 * std::f64::consts::PI + basis.as_bit() as f64 * std::f64::consts::FRAC_PI_2
}

/// Phase applied by Bob's analyzing interferometer for his basis choice.
pub fn analyzer_phase(basis: Basis) -> f64 {
    basis.as_bit() as f64 * std::f64::consts::FRAC_PI_2
}

/// One transmitted pulse: the modulator setting for a cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingRecord {
    pub cycle: u64,
    pub bit: u8,
    pub basis: Basis,
    /// Always `encode_phase(bit, basis)`.
    pub phase_rad: f64,
}

impl EncodingRecord {
    pub fn new(cycle: u64, bit: u8, basis: Basis) -> Self {
        EncodingRecord { cycle, bit, basis, phase_rad: encode_phase(bit, basis) }
    }
}

/// Probabilities of the two interferometer outputs for a phase difference
/// `Δφ` and fringe visibility `V`:
/// `p0 = (1 + V·cos Δφ) / 2`, `p1 = (1 − V·cos Δφ) / 2`.
pub fn click_probabilities(delta_phi_rad: f64, visibility: f64) -> Result<(f64, f64), SimError> {
    if !(0.0..=1.0).contains(&visibility) {
        return Err(SimError::VisibilityRange(visibility));
    }
    let c = visibility * delta_phi_rad.cos();
    Ok(((1.0 + c) / 2.0, (1.0 - c) / 2.0))
}

/// Interferometer phase drift: a random walk whose per-second increment is
/// uniform in `[-rate_bound, +rate_bound]` degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftSpec {
    pub rate_bound_deg_per_s: f64,
}

impl Default for DriftSpec {
    /// Bound matching the measured stability of a well-isolated fiber
    /// interferometer.
    fn default() -> Self {
        DriftSpec { rate_bound_deg_per_s: 0.05 }
    }
}

/// Running state of the drift walk.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftState {
    spec: DriftSpec,
    offset_deg: f64,
    seconds_elapsed: u64,
}

impl DriftState {
    pub fn new(spec: DriftSpec) -> Self {
        DriftState { spec, offset_deg: 0.0, seconds_elapsed: 0 }
    }

    /// Advances the walk to time `t_s` (whole seconds step the walk) and
    /// returns the current offset in radians.
    pub fn offset_at<R: Rng>(&mut self, t_s: f64, rng: &mut R) -> f64 {
        let target = t_s.max(0.0) as u64;
        while self.seconds_elapsed < target {
            let b = self.spec.rate_bound_deg_per_s;
            self.offset_deg += rng.gen_range(-b..=b);
            self.seconds_elapsed += 1;
        }
        self.offset_deg.to_radians()
    }

    pub fn offset_deg(&self) -> f64 {
        self.offset_deg
    }
}

/// Eavesdropper model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackConfig {
    None,
    /// Each signal photon is independently intercepted with probability
    /// `fraction`; the attacker measures in a uniformly random basis and
    /// resends their result.
    InterceptResend { fraction: f64 },
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        match self {
            AttackConfig::None => Ok(()),
            AttackConfig::InterceptResend { fraction } => {
                if (0.0..=1.0).contains(fraction) {
                    Ok(())
                } else {
                    Err(SimError::AttackFraction(*fraction))
                }
            }
        }
    }

    /// Normalizes a zero-strength attack to `None` so the two configurations
    /// are indistinguishable everywhere downstream.
    pub fn normalized(self) -> Self {
        match self {
            AttackConfig::InterceptResend { fraction: 0.0 } => AttackConfig::None,
            other => other,
        }
    }
}

/// How spurious counts interact with basis sifting.
///
/// Spurious counts fire independently of the modulator settings. Under
/// `AlwaysKept` they survive the basis comparison regardless of the bases
/// drawn, which is the accounting assumed by the closed-form sifted-rate and
/// QBER models (the full spurious rate appears in their denominators).
/// `BasisFiltered` instead subjects them to the same 50% basis test as signal
/// counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSifting {
    #[default]
    AlwaysKept,
    BasisFiltered,
}

/// What produced a detector click.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClickOrigin {
    Signal,
    Noise,
    /// Signal and spurious count in the same cycle; the recorded bit is a
    /// uniform coin flip.
    Double,
}

/// One detector click in exact mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    pub cycle: u64,
    pub bit: u8,
    pub origin: ClickOrigin,
}

/// Full per-cycle record of an exact-mode run.
///
/// The three bit sequences all have length `n_cycles`; `detections` is
/// sparse and sorted by cycle (cycles without a click carry no origin tag).
/// `bob_bases` holds the basis Bob *announces* per cycle; under
/// [`NoiseSifting::AlwaysKept`] the announced basis at a spurious-count cycle
/// coincides with Alice's.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleBatch {
    pub n_cycles: u64,
    pub alice_bits: Bits,
    pub alice_bases: Bits,
    pub bob_bases: Bits,
    pub detections: Vec<DetectionEvent>,
}

impl CycleBatch {
    /// The modulator setting Alice used in `cycle`.
    pub fn encoding(&self, cycle: u64) -> EncodingRecord {
        let i = cycle as usize;
        EncodingRecord::new(cycle, self.alice_bits.get(i), Basis::from_bit(self.alice_bases.get(i)))
    }

    /// Converts to the transport-agnostic sample the protocol layer consumes.
    pub fn into_sample(self) -> QuantumSample {
        let events = self
            .detections
            .iter()
            .map(|d| SampleEvent {
                cycle: d.cycle,
                bob_basis: Basis::from_bit(self.bob_bases.get(d.cycle as usize)),
                bob_bit: d.bit,
                origin: d.origin,
            })
            .collect();
        QuantumSample {
            n_cycles: self.n_cycles,
            events,
            alice: AliceTable::Dense { bits: self.alice_bits, bases: self.alice_bases },
        }
    }
}

/// Per-cell counters of an aggregated run. A cell is one combination of
/// (Alice basis, Alice bit, Bob basis).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellTally {
    pub n_cycles: u64,
    pub n_signal: u64,
    /// Signal clicks whose recorded bit differs from Alice's bit.
    pub n_signal_errors: u64,
    pub n_noise: u64,
    pub n_double: u64,
}

/// Aggregated statistics of a run: eight cells covering every basis/bit
/// combination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TallyCounts {
    pub n_cycles: u64,
    pub cells: [CellTally; 8],
}

impl TallyCounts {
    /// Cell index for a combination: `a_basis << 2 | a_bit << 1 | b_basis`.
    pub fn cell_index(a_basis: Basis, a_bit: u8, b_basis: Basis) -> usize {
        ((a_basis.as_bit() as usize) << 2) | ((a_bit as usize) << 1) | b_basis.as_bit() as usize
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    pub fn cell_coords(idx: usize) -> (Basis, u8, Basis) {
        (Basis::from_bit((idx >> 2) as u8 & 1), (idx >> 1) as u8 & 1, Basis::from_bit(idx as u8 & 1))
    }

    pub fn total_detections(&self) -> u64 {
        self.cells.iter().map(|c| c.n_signal + c.n_noise + c.n_double).sum()
    }

    /// Checks internal consistency: per-cell counts bounded by the cell's
    /// cycle count, errors bounded by signal clicks, cells summing to the
    /// batch total.
    pub fn check(&self) -> Result<(), SimError> {
        let mut total = 0u64;
        for c in &self.cells {
            if c.n_signal + c.n_noise + c.n_double > c.n_cycles {
                return Err(SimError::BadTallies("clicks exceed cycles in a cell"));
            }
            if c.n_signal_errors > c.n_signal {
                return Err(SimError::BadTallies("errors exceed signal clicks"));
            }
            total += c.n_cycles;
        }
        if total != self.n_cycles {
            return Err(SimError::BadTallies("cell cycles do not sum to batch total"));
        }
        Ok(())
    }
}

/// One detector click as the protocol layer sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEvent {
    pub cycle: u64,
    /// Basis Bob announces for this click.
    pub bob_basis: Basis,
    pub bob_bit: u8,
    pub origin: ClickOrigin,
}

/// Alice's record of what she sent.
#[derive(Debug, Clone, PartialEq)]
pub enum AliceTable {
    /// Every cycle (exact mode).
    Dense { bits: Bits, bases: Bits },
    /// Only the cycles that produced clicks, sorted by cycle (aggregate
    /// mode). Entries are `(cycle, bit, basis)`.
    Sparse(Vec<(u64, u8, Basis)>),
}

impl AliceTable {
    pub fn basis_at(&self, cycle: u64) -> Option<Basis> {
        match self {
            AliceTable::Dense { bases, .. } => {
                let i = cycle as usize;
                (i < bases.len()).then(|| Basis::from_bit(bases.get(i)))
            }
            AliceTable::Sparse(v) => v
                .binary_search_by_key(&cycle, |e| e.0)
                .ok()
                .map(|k| v[k].2),
        }
    }

    pub fn bit_at(&self, cycle: u64) -> Option<u8> {
        match self {
            AliceTable::Dense { bits, .. } => {
                let i = cycle as usize;
                (i < bits.len()).then(|| bits.get(i))
            }
            AliceTable::Sparse(v) => v.binary_search_by_key(&cycle, |e| e.0).ok().map(|k| v[k].1),
        }
    }
}

/// Simulated quantum-layer outcome, ready to be split into per-endpoint
/// views.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumSample {
    pub n_cycles: u64,
    /// Sorted by cycle, strictly increasing.
    pub events: Vec<SampleEvent>,
    pub alice: AliceTable,
}

/// What Alice's endpoint knows: her own modulator record.
#[derive(Debug, Clone)]
pub struct AliceView {
    pub n_cycles: u64,
    pub table: AliceTable,
}

/// What Bob's endpoint knows: his basis choices and clicks. Click origins
/// are physics metadata an endpoint cannot observe, so they are stripped.
#[derive(Debug, Clone)]
pub struct BobView {
    pub n_cycles: u64,
    /// `(cycle, announced basis, recorded bit)`, sorted by cycle.
    pub detections: Vec<(u64, Basis, u8)>,
}

impl QuantumSample {
    pub fn split(self) -> (AliceView, BobView) {
        let detections =
            self.events.iter().map(|e| (e.cycle, e.bob_basis, e.bob_bit)).collect();
        (
            AliceView { n_cycles: self.n_cycles, table: self.alice },
            BobView { n_cycles: self.n_cycles, detections },
        )
    }
}

/// The attacker's measure-and-resend transformation of one signal pulse:
/// measures Alice's state in a random basis (a matching basis reads the bit
/// faithfully; a conflicting one yields a coin flip) and re-encodes the
/// result. Returns the resent `(bit, basis)`.
pub fn intercept_resend<R: Rng>(a_bit: u8, a_basis: Basis, rng: &mut R) -> (u8, Basis) {
    let e_basis = Basis::from_bit((rng.next_u64() & 1) as u8);
    let e_bit =
        if e_basis == a_basis { a_bit } else { (rng.next_u64() & 1) as u8 };
    (e_bit, e_basis)
}

/// Error probability of a sifted *signal* bit in matched bases, folding in
/// the intercept-resend fraction `f`: `e_mod·(1 − f/2) + f/4`.
pub fn matched_signal_error_prob(e_mod: f64, attack: &AttackConfig) -> f64 {
    match attack {
        AttackConfig::None => e_mod,
        AttackConfig::InterceptResend { fraction } => e_mod * (1.0 - fraction / 2.0) + fraction / 4.0,
    }
}

fn signal_outcome<R: Rng>(
    a_bit: u8,
    a_basis: Basis,
    b_basis: Basis,
    drift_rad: f64,
    e_mod: f64,
    attack: &AttackConfig,
    rng: &mut R,
) -> u8 {
    let (src_bit, src_basis) = match attack {
        AttackConfig::InterceptResend { fraction }
            if *fraction > 0.0 && rng.gen::<f64>() < *fraction =>
        {
            intercept_resend(a_bit, a_basis, rng)
        }
        _ => (a_bit, a_basis),
    };
    let delta = encode_phase(src_bit, src_basis) - analyzer_phase(b_basis) + drift_rad;
    let (p0, _) = click_probabilities(delta, 1.0).expect("visibility 1 is valid");
    let mut bit = if rng.gen::<f64>() < p0 { 0u8 } else { 1u8 };
    if e_mod > 0.0 && rng.gen::<f64>() < e_mod {
        bit ^= 1;
    }
    bit
}

/// Geometric gap (number of event-free cycles) for per-cycle probability `p`,
/// parameterized by `ln_q = ln(1 - p)`.
fn sample_gap<R: Rng>(rng: &mut R, ln_q: f64) -> u64 {
    let u: f64 = rng.gen();
    let x = (1.0 - u).ln() / ln_q;
    x.min(9.0e18) as u64
}

/// Walks every clock cycle of a run and records the complete outcome.
///
/// Per cycle: Alice draws a uniform bit and basis, Bob a uniform basis. With
/// probability `R` (the signal rate) a signal click occurs, its bit decided
/// by the interference fringe for the cycle's phase difference (including
/// drift) and flipped with probability `e_mod`; independently, with
/// probability `P_e` a spurious click with a uniform bit occurs. Both at once
/// is recorded as a double click with a uniform bit.
pub fn simulate_exact(
    params: &LinkParams,
    n_cycles: u64,
    drift: Option<DriftSpec>,
    attack: &AttackConfig,
    noise_sifting: NoiseSifting,
    seed: u64,
) -> Result<CycleBatch, SimError> {
    params.validate()?;
    attack.validate()?;
    let attack = attack.normalized();
    if n_cycles > 1 << 31 {
        return Err(SimError::ExactTooLarge(n_cycles));
    }
    let n = n_cycles as usize;

    let mut rng = domain_rng(seed, DOMAIN_EVENTS);
    let alice_bits = Bits::random(&mut rng, n);
    let alice_bases = Bits::random(&mut rng, n);
    let mut bob_bases = Bits::random(&mut rng, n);

    let r = signal_rate_per_cycle(params);
    let pe = params.p_err_cycle;
    let p_event = r + pe - r * pe;
    let mut detections = Vec::new();

    if p_event > 0.0 {
        let mut drift_rng = domain_rng(seed, DOMAIN_DRIFT);
        let mut drift_state = drift.map(DriftState::new);
        let ln_q = (-p_event).ln_1p();
        let p_sig_only = r * (1.0 - pe) / p_event;
        let p_noise_only = pe * (1.0 - r) / p_event;

        let mut cycle = sample_gap(&mut rng, ln_q);
        while cycle < n_cycles {
            let i = cycle as usize;
            let u: f64 = rng.gen();
            let (bit, origin) = if u < p_sig_only {
                let offset = match drift_state.as_mut() {
                    Some(d) => d.offset_at(cycle as f64 / params.clock_hz, &mut drift_rng),
                    None => 0.0,
                };
                let bit = signal_outcome(
                    alice_bits.get(i),
                    Basis::from_bit(alice_bases.get(i)),
                    Basis::from_bit(bob_bases.get(i)),
                    offset,
                    params.e_mod,
                    &attack,
                    &mut rng,
                );
                (bit, ClickOrigin::Signal)
            } else if u < p_sig_only + p_noise_only {
                ((rng.next_u64() & 1) as u8, ClickOrigin::Noise)
            } else {
                ((rng.next_u64() & 1) as u8, ClickOrigin::Double)
            };
            if origin != ClickOrigin::Signal && noise_sifting == NoiseSifting::AlwaysKept {
                bob_bases.set(i, alice_bases.get(i));
            }
            detections.push(DetectionEvent { cycle, bit, origin });
            cycle = cycle.saturating_add(1 + sample_gap(&mut rng, ln_q));
        }
    }

    Ok(CycleBatch { n_cycles, alice_bits, alice_bases, bob_bases, detections })
}

fn binom<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p validated").sample(rng)
}

/// Draws the same statistics as [`simulate_exact`] (without drift) as
/// per-cell counts, in time independent of the cycle count.
pub fn simulate_aggregated(
    params: &LinkParams,
    n_cycles: u64,
    attack: &AttackConfig,
    seed: u64,
) -> Result<TallyCounts, SimError> {
    params.validate()?;
    attack.validate()?;
    let attack = attack.normalized();
    let mut rng = domain_rng(seed, DOMAIN_EVENTS);

    let r = signal_rate_per_cycle(params);
    let pe = params.p_err_cycle;
    let p_double = r * pe;
    let p_sig = r * (1.0 - pe);
    let p_noise = pe * (1.0 - r);

    // Multinomial split of the cycles over the 8 equally likely cells.
    let mut cells = [CellTally::default(); 8];
    let mut remaining = n_cycles;
    for (idx, cell) in cells.iter_mut().enumerate() {
        let share = if idx == 7 {
            remaining
        } else {
            binom(&mut rng, remaining, 1.0 / (8 - idx) as f64)
        };
        cell.n_cycles = share;
        remaining -= share;
    }

    for (idx, cell) in cells.iter_mut().enumerate() {
        let (a_basis, _a_bit, b_basis) = TallyCounts::cell_coords(idx);
        cell.n_double = binom(&mut rng, cell.n_cycles, p_double);
        let rem = cell.n_cycles - cell.n_double;
        cell.n_signal = binom(&mut rng, rem, (p_sig / (1.0 - p_double)).clamp(0.0, 1.0));
        let rem2 = rem - cell.n_signal;
        cell.n_noise =
            binom(&mut rng, rem2, (p_noise / (1.0 - p_double - p_sig)).clamp(0.0, 1.0));
        let p_err = if a_basis == b_basis {
            matched_signal_error_prob(params.e_mod, &attack)
        } else {
            0.5
        };
        cell.n_signal_errors = binom(&mut rng, cell.n_signal, p_err);
    }

    Ok(TallyCounts { n_cycles, cells })
}

/// Draws `k` distinct sorted cycle indices in `[0, n)`.
fn sample_sorted_cycles<R: Rng>(rng: &mut R, n: u64, k: usize) -> Vec<u64> {
    assert!(k as u64 <= n, "more detections than cycles");
    let mut v: Vec<u64> = (0..k).map(|_| rng.gen_range(0..n)).collect();
    v.sort_unstable();
    // Resolve duplicates while keeping the list inside [0, n): cap from the
    // top so every slot has room, then bump collisions upward.
    for i in (0..k).rev() {
        let cap = n - (k - i) as u64;
        if v[i] > cap {
            v[i] = cap;
        }
    }
    for i in 1..k {
        if v[i] <= v[i - 1] {
            v[i] = v[i - 1] + 1;
        }
    }
    v
}

/// Expands aggregated tallies into a concrete detection stream.
///
/// Cycle positions and the order of per-cell outcomes are randomized, so the
/// resulting stream is statistically exchangeable with an exact-mode run of
/// the same parameters (drift aside).
pub fn synthesize_sample(
    tallies: &TallyCounts,
    noise_sifting: NoiseSifting,
    seed: u64,
) -> Result<QuantumSample, SimError> {
    tallies.check()?;
    let total = tallies.total_detections();
    if total > tallies.n_cycles {
        return Err(SimError::BadTallies("more detections than cycles"));
    }
    let mut rng = domain_rng(seed, DOMAIN_SYNTH);

    // (alice_bit, alice_basis, announced_bob_basis, bob_bit, origin)
    let mut recs: Vec<(u8, Basis, Basis, u8, ClickOrigin)> =
        Vec::with_capacity(total as usize);
    for idx in 0..8 {
        let (a_basis, a_bit, b_basis) = TallyCounts::cell_coords(idx);
        let cell = &tallies.cells[idx];
        for k in 0..cell.n_signal {
            let err = (k < cell.n_signal_errors) as u8;
            recs.push((a_bit, a_basis, b_basis, a_bit ^ err, ClickOrigin::Signal));
        }
        let announced = |rng_bit_basis: Basis| match noise_sifting {
            NoiseSifting::AlwaysKept => a_basis,
            NoiseSifting::BasisFiltered => rng_bit_basis,
        };
        for _ in 0..cell.n_noise {
            recs.push((a_bit, a_basis, announced(b_basis), (rng.next_u64() & 1) as u8, ClickOrigin::Noise));
        }
        for _ in 0..cell.n_double {
            recs.push((a_bit, a_basis, announced(b_basis), (rng.next_u64() & 1) as u8, ClickOrigin::Double));
        }
    }

    // Fisher-Yates so outcome kinds are uniformly interleaved over cycles.
    for i in (1..recs.len()).rev() {
        let j = rng.gen_range(0..=i);
        recs.swap(i, j);
    }
    let cycles = sample_sorted_cycles(&mut rng, tallies.n_cycles, recs.len());

    let mut events = Vec::with_capacity(recs.len());
    let mut alice = Vec::with_capacity(recs.len());
    for (cycle, (a_bit, a_basis, b_basis, b_bit, origin)) in cycles.into_iter().zip(recs) {
        events.push(SampleEvent { cycle, bob_basis: b_basis, bob_bit: b_bit, origin });
        alice.push((cycle, a_bit, a_basis));
    }
    Ok(QuantumSample { n_cycles: tallies.n_cycles, events, alice: AliceTable::Sparse(alice) })
}

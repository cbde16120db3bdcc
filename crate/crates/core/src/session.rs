//! Endpoint state machines for one key-distribution session.
//!
//! Alice (transmitter) and Bob (receiver) each run a sequential state
//! machine over a framed classical channel: handshake, basis sifting,
//! disclosed-sample error estimation, interactive reconciliation,
//! verification, and key compression. The two sides share nothing but the
//! channel; on success both hold the same final key, and on any failure
//! both observe the same abort reason.

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bits::Bits;
use crate::cascade::{
    reconcile, AliceCascade, CascadeConfig, CascadeError, ParityOracle, MAX_PASSES,
};
use crate::privacy::{final_length, toeplitz_hash, LeakLedger};
use crate::security::QBER_ABORT_THRESHOLD;
use crate::sim::{
    domain_rng, AliceTable, AliceView, BobView, DOMAIN_SESSION, DOMAIN_SESSION_ALICE,
};
use crate::wire::{
    AbortReason, ByteStream, FrameChannel, Message, ParityRange, WireError, PROTOCOL_VERSION,
    VERIFY_DISCLOSURE_BITS,
};

/// Shortest sifted key either side will try to sample and reconcile.
pub const MIN_SIFTED_BITS: usize = 100;
/// Smallest disclosed sample, before the half-key cap.
pub const SAMPLE_FLOOR: usize = 200;

/// Which endpoint a state machine drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Alice,
    Bob,
}

/// Protocol progress marker. Ordered: a session only moves forward, except
/// that `Aborted` is reachable from everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SessionPhase {
    Idle,
    QuantumTx,
    Sifting,
    QberEstimate,
    Reconcile,
    Amplify,
    Done,
    Aborted,
}

/// The phase a wire message belongs to. A well-formed transcript has
/// nondecreasing phases, with `Aborted` allowed anywhere as a terminator.
pub fn message_phase(msg: &Message) -> SessionPhase {
    match msg {
        Message::Hello { .. } => SessionPhase::Idle,
        Message::Detections { .. } | Message::BasisMatch { .. } => SessionPhase::Sifting,
        Message::SampleRequest { .. } | Message::SampleBits { .. } => SessionPhase::QberEstimate,
        Message::CascadeShuffle { .. }
        | Message::CascadeParityReq { .. }
        | Message::CascadeParityResp { .. }
        | Message::VerifyHash { .. } => SessionPhase::Reconcile,
        Message::PaSeed { .. } => SessionPhase::Amplify,
        Message::Done { .. } => SessionPhase::Done,
        Message::Abort { .. } => SessionPhase::Aborted,
    }
}

/// Hard failures a session cannot express as a shared abort reason.
#[derive(Debug, Error)]
pub enum SessionError {
    /// The transport failed in a way that is not a clean close or timeout.
    #[error("classical channel failed: {0}")]
    Wire(#[from] WireError),
    #[error("invalid session configuration: {0}")]
    Config(&'static str),
    #[error("internal session invariant violated: {0}")]
    Internal(String),
}

/// Knobs both endpoints must agree on. The agreement is enforced by the
/// handshake: everything here must be derivable from the configuration the
/// `config_hash` digests.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    /// Run seed; endpoint randomness is drawn from role-separated streams.
    pub seed: u64,
    /// Digest binding both endpoints to one run configuration.
    pub config_hash: [u8; 32],
    /// Fraction of the sifted key disclosed for error estimation.
    pub sample_fraction: f64,
    /// Bits subtracted from the final length as a safety margin.
    pub safety_bits: u64,
    /// Reconciliation passes.
    pub n_passes: u8,
}

impl SessionConfig {
    pub fn new(seed: u64, config_hash: [u8; 32]) -> Self {
        SessionConfig {
            seed,
            config_hash,
            sample_fraction: 0.1,
            safety_bits: 30,
            n_passes: 4,
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        if !(self.sample_fraction > 0.0 && self.sample_fraction < 1.0) {
            return Err(SessionError::Config("sample fraction must be in (0, 1)"));
        }
        if self.n_passes == 0 || self.n_passes > MAX_PASSES {
            return Err(SessionError::Config("reconciliation pass count out of range"));
        }
        Ok(())
    }
}

/// Per-endpoint accounting of one session, filled in as phases complete.
#[derive(Debug, Clone)]
pub struct SessionReport {
    pub role: Role,
    pub phase: SessionPhase,
    pub n_cycles: u64,
    /// Detections Bob announced.
    pub detections: u64,
    pub sifted_bits: u64,
    /// Reconciled key length (sifted minus disclosed sample).
    pub reconciled_bits: u64,
    /// Disclosed-sample error estimate; set once sampling completed.
    pub qber_estimate: Option<f64>,
    /// Bits reconciliation flipped; only the receiving side can know this.
    pub corrected: Option<u64>,
    pub ledger: LeakLedger,
    pub final_bits: u64,
}

impl SessionReport {
    fn new(role: Role, n_cycles: u64) -> Self {
        SessionReport {
            role,
            phase: SessionPhase::Idle,
            n_cycles,
            detections: 0,
            sifted_bits: 0,
            reconciled_bits: 0,
            qber_estimate: None,
            corrected: None,
            ledger: LeakLedger::default(),
            final_bits: 0,
        }
    }

    fn advance(&mut self, next: SessionPhase) {
        debug_assert!(
            next == SessionPhase::Aborted || next >= self.phase,
            "phase may not move backwards: {:?} -> {next:?}",
            self.phase
        );
        if next >= self.phase || next == SessionPhase::Aborted {
            self.phase = next;
        }
    }

    /// Best error-rate figure this side can report: the reconciliation
    /// flip fraction when known, otherwise the sampled estimate.
    pub fn qber_measured(&self) -> Option<f64> {
        match (self.corrected, self.reconciled_bits) {
            (Some(c), n) if n > 0 => Some(c as f64 / n as f64),
            _ => self.qber_estimate,
        }
    }
}

/// A completed session's output.
#[derive(Debug, Clone)]
pub struct SecretKey {
    pub bits: Bits,
    /// Shared identifier; both sides derive it from the configuration
    /// digest, so paired outcomes carry the same id.
    pub session_id: u64,
    pub report: SessionReport,
}

/// What a session run produces when the machinery itself held up: either a
/// key or a clean, mutually observed abort.
#[derive(Debug, Clone)]
pub enum SessionOutcome {
    Established(SecretKey),
    Aborted {
        reason: AbortReason,
        report: SessionReport,
    },
}

impl SessionOutcome {
    pub fn report(&self) -> &SessionReport {
        match self {
            SessionOutcome::Established(k) => &k.report,
            SessionOutcome::Aborted { report, .. } => report,
        }
    }
}

/// Disclosed-sample size: `fraction` of the sifted key, raised to the
/// floor of [`SAMPLE_FLOOR`] bits, capped at half the key.
pub fn sample_size(n_sifted: usize, fraction: f64) -> usize {
    let want = (fraction * n_sifted as f64).floor() as usize;
    want.max(SAMPLE_FLOOR).min(n_sifted / 2)
}

/// Sorted distinct positions to disclose from a sifted key of length
/// `n_sifted`.
pub fn choose_sample_indices<R: Rng>(n_sifted: usize, fraction: f64, rng: &mut R) -> Vec<u32> {
    let k = sample_size(n_sifted, fraction);
    let mut idx: Vec<u32> = rand::seq::index::sample(rng, n_sifted, k)
        .iter()
        .map(|i| i as u32)
        .collect();
    idx.sort_unstable();
    idx
}

/// Alice's sifting verdict: bit `i` is 1 when her encoding basis at
/// `cycles[i]` equals the announced basis `bases[i]`.
pub fn basis_match(
    table: &AliceTable,
    n_cycles: u64,
    cycles: &[u64],
    bases: &Bits,
) -> Result<Bits, &'static str> {
    if bases.len() != cycles.len() {
        return Err("basis list length does not match the cycle list");
    }
    let mut keep = Bits::zeros(cycles.len());
    let mut prev: Option<u64> = None;
    for (i, &cycle) in cycles.iter().enumerate() {
        if prev.is_some_and(|p| cycle <= p) {
            return Err("detection cycles are not strictly increasing");
        }
        prev = Some(cycle);
        if cycle >= n_cycles {
            return Err("detection cycle beyond the run length");
        }
        let mine = table
            .basis_at(cycle)
            .ok_or("detection cycle missing from the encoding record")?;
        if mine.as_bit() == bases.get(i) {
            keep.set(i, 1);
        }
    }
    Ok(keep)
}

/// Alice's sifted key: her bits at the kept detection cycles, in order.
fn sifted_from_table(table: &AliceTable, cycles: &[u64], keep: &Bits) -> Option<Bits> {
    let mut key = Bits::new();
    for (i, &cycle) in cycles.iter().enumerate() {
        if keep.get(i) == 1 {
            key.push(table.bit_at(cycle)?);
        }
    }
    Some(key)
}

/// Bob's sifted key: his recorded bits at the kept detections, in order.
fn sifted_from_detections(detections: &[(u64, crate::sim::Basis, u8)], keep: &Bits) -> Bits {
    let mut key = Bits::new();
    for (i, d) in detections.iter().enumerate() {
        if keep.get(i) == 1 {
            key.push(d.2);
        }
    }
    key
}

/// Error-rate estimate from a random disclosed sample, as used inside a
/// live session but runnable directly on a key pair. Returns the estimate
/// and the sorted positions that must now be discarded from both keys.
pub fn estimate_qber<R: Rng>(
    alice: &Bits,
    bob: &Bits,
    fraction: f64,
    rng: &mut R,
) -> Result<(f64, Vec<u32>), SessionError> {
    if alice.len() != bob.len() {
        return Err(SessionError::Config("sifted keys differ in length"));
    }
    if alice.len() < MIN_SIFTED_BITS {
        return Err(SessionError::Config("sifted key too short to sample"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SessionError::Config("sample fraction must be in (0, 1)"));
    }
    let indices = choose_sample_indices(alice.len(), fraction, rng);
    let mismatches = alice
        .select(&indices)
        .hamming_distance(&bob.select(&indices));
    Ok((mismatches as f64 / indices.len() as f64, indices))
}

/// Salted digest of a reconciled key, truncated to the fixed disclosure
/// budget. Both sides compute it; equality certifies the keys match except
/// with probability about 2^-50.
pub fn verify_hash(salt: u64, key: &Bits) -> Bits {
    let (pad, bytes) = key.pack_msb0();
    let mut h = Sha256::new();
    h.update(b"qkdverify");
    h.update(salt.to_be_bytes());
    h.update((key.len() as u64).to_be_bytes());
    h.update([pad]);
    h.update(&bytes);
    let digest = h.finalize();
    let word = u64::from_be_bytes(digest[..8].try_into().unwrap())
        >> (64 - VERIFY_DISCLOSURE_BITS as u32);
    Bits::from_words(vec![word], VERIFY_DISCLOSURE_BITS as usize)
}

/// Closing-summary digest both sides must agree on. Covers only lengths
/// and leak totals, never key material.
pub fn done_digest(
    n_sifted: u64,
    n_sampled: u64,
    n_reconciled: u64,
    reconciliation_leak: u64,
    final_len: u64,
) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(b"qkddone");
    h.update(PROTOCOL_VERSION.to_be_bytes());
    for v in [n_sifted, n_sampled, n_reconciled, reconciliation_leak, final_len] {
        h.update(v.to_be_bytes());
    }
    h.finalize()[..8].to_vec()
}

fn session_id(config_hash: &[u8; 32]) -> u64 {
    u64::from_be_bytes(config_hash[..8].try_into().unwrap())
}

/// Session-terminating conditions raised inside a state machine.
enum Fail {
    /// Clean abort; the peer has been or is being told the same reason.
    Abort(AbortReason),
    Hard(SessionError),
}

fn internal(e: impl std::fmt::Display) -> Fail {
    Fail::Hard(SessionError::Internal(e.to_string()))
}

/// Channel wrapper that folds transport failures into abort reasons and
/// handles the peer-notification side of aborting.
struct Endpoint<'c, S: ByteStream> {
    ch: &'c mut FrameChannel<S>,
}

impl<S: ByteStream> Endpoint<'_, S> {
    /// Best effort: a dead channel cannot carry the notification anyway.
    fn notify(&mut self, reason: AbortReason) {
        let _ = self.ch.send_msg(&Message::Abort { reason });
    }

    /// Locally decided abort: tell the peer, then fail with the reason.
    fn abort(&mut self, reason: AbortReason) -> Fail {
        self.notify(reason);
        Fail::Abort(reason)
    }

    /// The peer broke the message choreography.
    fn violation(&mut self) -> Fail {
        self.abort(AbortReason::ProtocolError)
    }

    fn send(&mut self, msg: &Message) -> Result<(), Fail> {
        self.ch.send_msg(msg).map_err(|e| match e {
            WireError::Closed => Fail::Abort(AbortReason::ChannelClosed),
            WireError::Timeout => Fail::Abort(AbortReason::Timeout),
            other => Fail::Hard(SessionError::Wire(other)),
        })
    }

    /// Receives one frame. Abort frames and transport failures surface as
    /// [`Fail`], so callers only ever match on in-protocol messages.
    fn recv(&mut self) -> Result<Message, Fail> {
        match self.ch.recv_msg() {
            Ok(Message::Abort { reason }) => Err(Fail::Abort(reason)),
            Ok(msg) => Ok(msg),
            Err(WireError::Timeout) => {
                self.notify(AbortReason::Timeout);
                Err(Fail::Abort(AbortReason::Timeout))
            }
            Err(WireError::Closed) => Err(Fail::Abort(AbortReason::ChannelClosed)),
            Err(WireError::Decode(_)) => Err(self.violation()),
            Err(e) => Err(Fail::Hard(SessionError::Wire(e))),
        }
    }
}

/// Bob's view of Alice's parity answers: each batch is one request frame
/// and one response frame. Transport failures are stashed so the caller
/// can re-raise them with their original meaning.
struct RemoteOracle<'e, 'c, S: ByteStream> {
    ep: &'e mut Endpoint<'c, S>,
    fail: Option<Fail>,
    received_bits: u64,
}

impl<S: ByteStream> RemoteOracle<'_, '_, S> {
    fn round_trip(&mut self, ranges: &[ParityRange]) -> Result<Bits, Fail> {
        self.ep.send(&Message::CascadeParityReq {
            ranges: ranges.to_vec(),
        })?;
        match self.ep.recv()? {
            Message::CascadeParityResp { parities } if parities.len() == ranges.len() => {
                self.received_bits += parities.len() as u64;
                Ok(parities)
            }
            _ => Err(self.ep.violation()),
        }
    }
}

impl<S: ByteStream> ParityOracle for RemoteOracle<'_, '_, S> {
    fn set_shuffle(&mut self, _pass: u8, _seed: u64) -> Result<(), CascadeError> {
        // Seeds were announced before reconciliation started; the peer has
        // already installed them.
        Ok(())
    }

    fn parities(&mut self, ranges: &[ParityRange]) -> Result<Bits, CascadeError> {
        match self.round_trip(ranges) {
            Ok(bits) => Ok(bits),
            Err(fail) => {
                self.fail = Some(fail);
                Err(CascadeError::Oracle("classical channel failed".into()))
            }
        }
    }
}

/// Runs one endpoint of a session to completion over `ch`.
///
/// `Ok` covers both outcomes the protocol defines: an established key or a
/// clean abort observed identically by the peer. `Err` means the machinery
/// failed (transport breakage, invalid local configuration).
pub fn run_session<S: ByteStream>(
    data: EndpointData,
    cfg: &SessionConfig,
    ch: &mut FrameChannel<S>,
) -> Result<SessionOutcome, SessionError> {
    match data {
        EndpointData::Alice(view) => run_alice(&view, cfg, ch),
        EndpointData::Bob(view) => run_bob(&view, cfg, ch),
    }
}

/// Role-tagged quantum-layer record a session endpoint starts from.
#[derive(Debug, Clone)]
pub enum EndpointData {
    Alice(AliceView),
    Bob(BobView),
}

pub fn run_alice<S: ByteStream>(
    view: &AliceView,
    cfg: &SessionConfig,
    ch: &mut FrameChannel<S>,
) -> Result<SessionOutcome, SessionError> {
    cfg.validate()?;
    let mut report = SessionReport::new(Role::Alice, view.n_cycles);
    let mut ep = Endpoint { ch };
    finish(run_alice_inner(view, cfg, &mut ep, &mut report), cfg, report)
}

pub fn run_bob<S: ByteStream>(
    view: &BobView,
    cfg: &SessionConfig,
    ch: &mut FrameChannel<S>,
) -> Result<SessionOutcome, SessionError> {
    cfg.validate()?;
    let mut report = SessionReport::new(Role::Bob, view.n_cycles);
    let mut ep = Endpoint { ch };
    finish(run_bob_inner(view, cfg, &mut ep, &mut report), cfg, report)
}

fn finish(
    res: Result<Bits, Fail>,
    cfg: &SessionConfig,
    mut report: SessionReport,
) -> Result<SessionOutcome, SessionError> {
    match res {
        Ok(bits) => Ok(SessionOutcome::Established(SecretKey {
            bits,
            session_id: session_id(&cfg.config_hash),
            report,
        })),
        Err(Fail::Abort(reason)) => {
            report.advance(SessionPhase::Aborted);
            Ok(SessionOutcome::Aborted { reason, report })
        }
        Err(Fail::Hard(e)) => Err(e),
    }
}

fn run_alice_inner<S: ByteStream>(
    view: &AliceView,
    cfg: &SessionConfig,
    ep: &mut Endpoint<'_, S>,
    report: &mut SessionReport,
) -> Result<Bits, Fail> {
    ep.send(&Message::Hello {
        version: PROTOCOL_VERSION,
        config_hash: cfg.config_hash,
    })?;
    match ep.recv()? {
        Message::Hello { version, config_hash } => {
            if version != PROTOCOL_VERSION {
                return Err(ep.abort(AbortReason::VersionMismatch));
            }
            if config_hash != cfg.config_hash {
                return Err(ep.abort(AbortReason::ConfigMismatch));
            }
        }
        _ => return Err(ep.violation()),
    }
    report.advance(SessionPhase::QuantumTx);

    // Sifting: Bob reports detections, Alice answers with basis matches.
    let (cycles, bases) = match ep.recv()? {
        Message::Detections { cycles, bases } => (cycles, bases),
        _ => return Err(ep.violation()),
    };
    report.advance(SessionPhase::Sifting);
    if cycles.is_empty() {
        return Err(ep.violation());
    }
    report.detections = cycles.len() as u64;
    let keep = match basis_match(&view.table, view.n_cycles, &cycles, &bases) {
        Ok(keep) => keep,
        Err(_) => return Err(ep.violation()),
    };
    let key_sift = match sifted_from_table(&view.table, &cycles, &keep) {
        Some(key) => key,
        None => return Err(ep.violation()),
    };
    ep.send(&Message::BasisMatch { keep })?;
    report.sifted_bits = key_sift.len() as u64;
    if key_sift.len() < MIN_SIFTED_BITS {
        return Err(ep.abort(AbortReason::InsufficientBits));
    }

    // Error estimation: disclose exactly the sample Bob requests. The
    // expected size is pinned by the shared configuration.
    report.advance(SessionPhase::QberEstimate);
    let indices = match ep.recv()? {
        Message::SampleRequest { indices } => indices,
        _ => return Err(ep.violation()),
    };
    if indices.len() != sample_size(key_sift.len(), cfg.sample_fraction)
        || indices.last().is_some_and(|&i| i as usize >= key_sift.len())
    {
        return Err(ep.violation());
    }
    let sample = key_sift.select(&indices);
    report.ledger.sample_bits = sample.len() as u64;
    ep.send(&Message::SampleBits { bits: sample })?;

    // Announce the per-pass shuffles right away; if Bob's estimate is too
    // high his abort arrives in place of the first parity request.
    let mut rng = domain_rng(cfg.seed, DOMAIN_SESSION_ALICE);
    let ccfg = CascadeConfig::from_rng(cfg.n_passes, &mut rng).map_err(internal)?;
    for (i, &seed) in ccfg.shuffle_seeds.iter().enumerate() {
        ep.send(&Message::CascadeShuffle {
            pass: i as u8 + 2,
            seed,
        })?;
    }
    let key_rec = key_sift.remove_sorted(&indices);
    report.reconciled_bits = key_rec.len() as u64;

    // Reconciliation: answer parity queries until Bob concludes with his
    // verification hash.
    report.advance(SessionPhase::Reconcile);
    let mut answerer = AliceCascade::new(key_rec.clone(), cfg.n_passes).map_err(internal)?;
    for (i, &seed) in ccfg.shuffle_seeds.iter().enumerate() {
        answerer.set_shuffle(i as u8 + 2, seed).map_err(internal)?;
    }
    let (salt, their_hash) = loop {
        match ep.recv()? {
            Message::CascadeParityReq { ranges } => {
                let parities = match answerer.parities(&ranges) {
                    Ok(p) => p,
                    Err(_) => return Err(ep.violation()),
                };
                ep.send(&Message::CascadeParityResp { parities })?;
            }
            Message::VerifyHash { salt, hash } => break (salt, hash),
            _ => return Err(ep.violation()),
        }
    };
    report.ledger.parity_bits = answerer.leak_bits();
    report.ledger.verify_bits = VERIFY_DISCLOSURE_BITS;
    let mine = verify_hash(salt, &key_rec);
    if their_hash != mine {
        return Err(ep.abort(AbortReason::ReconciliationFailed));
    }
    ep.send(&Message::VerifyHash { salt, hash: mine })?;

    // Amplification: Bob owns the length decision and the seed; Alice
    // checks the dimensions and compresses.
    report.advance(SessionPhase::Amplify);
    let (m, seed) = match ep.recv()? {
        Message::PaSeed { m, seed } => (m, seed),
        _ => return Err(ep.violation()),
    };
    let n_rec = key_rec.len() as u64;
    if m == 0 || m > n_rec || seed.len() as u64 != n_rec + m - 1 {
        return Err(ep.violation());
    }
    let final_key = toeplitz_hash(&key_rec, &seed, m as usize).map_err(internal)?;
    report.final_bits = m;

    let digest = done_digest(
        report.sifted_bits,
        report.ledger.sample_bits,
        n_rec,
        report.ledger.reconciliation_total(),
        m,
    );
    ep.send(&Message::Done {
        digest: digest.clone(),
    })?;
    match ep.recv()? {
        Message::Done { digest: theirs } if theirs == digest => {}
        _ => return Err(ep.violation()),
    }
    report.advance(SessionPhase::Done);
    Ok(final_key)
}

fn run_bob_inner<S: ByteStream>(
    view: &BobView,
    cfg: &SessionConfig,
    ep: &mut Endpoint<'_, S>,
    report: &mut SessionReport,
) -> Result<Bits, Fail> {
    match ep.recv()? {
        Message::Hello { version, config_hash } => {
            if version != PROTOCOL_VERSION {
                return Err(ep.abort(AbortReason::VersionMismatch));
            }
            if config_hash != cfg.config_hash {
                return Err(ep.abort(AbortReason::ConfigMismatch));
            }
        }
        _ => return Err(ep.violation()),
    }
    ep.send(&Message::Hello {
        version: PROTOCOL_VERSION,
        config_hash: cfg.config_hash,
    })?;
    report.advance(SessionPhase::QuantumTx);

    report.detections = view.detections.len() as u64;
    if view.detections.is_empty() {
        return Err(ep.abort(AbortReason::NoBits));
    }
    report.advance(SessionPhase::Sifting);
    let cycles: Vec<u64> = view.detections.iter().map(|d| d.0).collect();
    let mut bases = Bits::new();
    for d in &view.detections {
        bases.push(d.1.as_bit());
    }
    ep.send(&Message::Detections { cycles, bases })?;

    let keep = match ep.recv()? {
        Message::BasisMatch { keep } => keep,
        _ => return Err(ep.violation()),
    };
    if keep.len() != view.detections.len() {
        return Err(ep.violation());
    }
    let key_sift = sifted_from_detections(&view.detections, &keep);
    report.sifted_bits = key_sift.len() as u64;
    if key_sift.len() < MIN_SIFTED_BITS {
        return Err(ep.abort(AbortReason::InsufficientBits));
    }

    // Error estimation: sacrifice a random sample and compare.
    report.advance(SessionPhase::QberEstimate);
    let mut rng = domain_rng(cfg.seed, DOMAIN_SESSION);
    let indices = choose_sample_indices(key_sift.len(), cfg.sample_fraction, &mut rng);
    ep.send(&Message::SampleRequest {
        indices: indices.clone(),
    })?;
    let their_sample = match ep.recv()? {
        Message::SampleBits { bits } => bits,
        _ => return Err(ep.violation()),
    };
    if their_sample.len() != indices.len() {
        return Err(ep.violation());
    }
    let mismatches = key_sift.select(&indices).hamming_distance(&their_sample);
    let e_est = mismatches as f64 / indices.len() as f64;
    report.qber_estimate = Some(e_est);
    report.ledger.sample_bits = indices.len() as u64;
    if e_est >= QBER_ABORT_THRESHOLD {
        return Err(ep.abort(AbortReason::QberThreshold));
    }

    let mut seeds = Vec::with_capacity(cfg.n_passes as usize - 1);
    for p in 2..=cfg.n_passes {
        match ep.recv()? {
            Message::CascadeShuffle { pass, seed } if pass == p => seeds.push(seed),
            _ => return Err(ep.violation()),
        }
    }
    let key_rec = key_sift.remove_sorted(&indices);
    report.reconciled_bits = key_rec.len() as u64;

    // Reconciliation: Bob drives; Alice is a parity oracle over the wire.
    report.advance(SessionPhase::Reconcile);
    let ccfg = CascadeConfig::new(cfg.n_passes, seeds).map_err(internal)?;
    let mut oracle = RemoteOracle {
        ep,
        fail: None,
        received_bits: 0,
    };
    let outcome = match reconcile(&key_rec, e_est, &ccfg, &mut oracle) {
        Ok(outcome) => outcome,
        Err(CascadeError::Oracle(_)) => {
            return Err(oracle.fail.take().unwrap_or_else(|| {
                Fail::Hard(SessionError::Internal(
                    "oracle failure without a recorded cause".into(),
                ))
            }));
        }
        Err(e) => return Err(internal(e)),
    };
    report.ledger.parity_bits = oracle.received_bits;
    report.corrected = Some(outcome.corrected);
    let key_rec = outcome.key;

    // Verification: both sides hash the reconciled key under a fresh salt.
    let salt: u64 = rng.gen();
    let mine = verify_hash(salt, &key_rec);
    report.ledger.verify_bits = VERIFY_DISCLOSURE_BITS;
    ep.send(&Message::VerifyHash {
        salt,
        hash: mine.clone(),
    })?;
    match ep.recv()? {
        Message::VerifyHash { salt: s, hash } if s == salt && hash == mine => {}
        _ => return Err(ep.violation()),
    }

    // Amplification: size the final key from the estimate and everything
    // disclosed, then announce the compression seed.
    report.advance(SessionPhase::Amplify);
    let n_rec = key_rec.len();
    let m = final_length(
        n_rec,
        e_est,
        report.ledger.reconciliation_total(),
        cfg.safety_bits,
    )
    .map_err(internal)?;
    if m == 0 {
        return Err(ep.abort(AbortReason::NoSecureBits));
    }
    let seed = Bits::random(&mut rng, n_rec + m - 1);
    ep.send(&Message::PaSeed {
        m: m as u64,
        seed: seed.clone(),
    })?;
    let final_key = toeplitz_hash(&key_rec, &seed, m).map_err(internal)?;
    report.final_bits = m as u64;

    let digest = done_digest(
        report.sifted_bits,
        report.ledger.sample_bits,
        n_rec as u64,
        report.ledger.reconciliation_total(),
        m as u64,
    );
    match ep.recv()? {
        Message::Done { digest: theirs } if theirs == digest => {}
        _ => return Err(ep.violation()),
    }
    ep.send(&Message::Done { digest })?;
    report.advance(SessionPhase::Done);
    Ok(final_key)
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::link::LinkParams;
    use crate::sim::{
        simulate_aggregated, synthesize_sample, AttackConfig, Basis, NoiseSifting, QuantumSample,
    };
    use crate::wire::pipe_pair;

    fn test_hash(tag: u8) -> [u8; 32] {
        let mut h = [7u8; 32];
        h[0] = tag;
        h
    }

    /// Runs a full paired session over an in-process pipe and returns
    /// (alice outcome, bob outcome).
    fn run_pair(
        sample: QuantumSample,
        cfg: &SessionConfig,
    ) -> (SessionOutcome, SessionOutcome) {
        let (alice_view, bob_view) = sample.split();
        let (sa, sb) = pipe_pair(Duration::from_secs(10));
        let cfg_a = cfg.clone();
        let alice = std::thread::spawn(move || {
            let mut ch = FrameChannel::new(sa);
            run_alice(&alice_view, &cfg_a, &mut ch).expect("alice endpoint must not fail hard")
        });
        let mut ch = FrameChannel::new(sb);
        let bob = run_bob(&bob_view, cfg, &mut ch).expect("bob endpoint must not fail hard");
        (alice.join().expect("alice thread panicked"), bob)
    }

    fn aggregate_sample(
        params: &LinkParams,
        n_cycles: u64,
        attack: &AttackConfig,
        seed: u64,
    ) -> QuantumSample {
        let tallies = simulate_aggregated(params, n_cycles, attack, seed).expect("simulate");
        synthesize_sample(&tallies, NoiseSifting::AlwaysKept, seed).expect("synthesize")
    }

    #[test]
    fn basis_match_keeps_only_matching_cycles() {
        // Detections at cycles {2, 5, 9} with announced bases {Z, X, Z}
        // against encoding bases all Z keeps exactly {2, 9}.
        let table = AliceTable::Sparse(vec![(2, 1, Basis::Z), (5, 0, Basis::Z), (9, 1, Basis::Z)]);
        let cycles = [2u64, 5, 9];
        let mut bases = Bits::new();
        for b in [Basis::Z, Basis::X, Basis::Z] {
            bases.push(b.as_bit());
        }
        let keep = basis_match(&table, 10, &cycles, &bases).expect("valid detections");
        assert_eq!(
            (keep.get(0), keep.get(1), keep.get(2)),
            (1, 0, 1),
            "only cycles 2 and 9 have matching bases"
        );
        let key = sifted_from_table(&table, &cycles, &keep).expect("cycles known");
        assert_eq!(key.len(), 2);
        assert_eq!((key.get(0), key.get(1)), (1, 1), "alice bits at cycles 2 and 9");
    }

    #[test]
    fn basis_match_rejects_bad_detection_lists() {
        let table = AliceTable::Sparse(vec![(2, 1, Basis::Z)]);
        let mut one_basis = Bits::new();
        one_basis.push(0);
        assert!(
            basis_match(&table, 10, &[12], &one_basis).is_err(),
            "cycle beyond the run must be rejected"
        );
        assert!(
            basis_match(&table, 10, &[3], &one_basis).is_err(),
            "cycle alice never recorded must be rejected"
        );
        let mut two_bases = Bits::new();
        two_bases.push(0);
        two_bases.push(0);
        assert!(
            basis_match(&table, 10, &[2], &two_bases).is_err(),
            "length mismatch must be rejected"
        );
        assert!(
            basis_match(&table, 10, &[2, 2], &two_bases).is_err(),
            "non-increasing cycles must be rejected"
        );
    }

    #[test]
    fn sample_size_has_floor_and_cap() {
        assert_eq!(sample_size(10_000, 0.1), 1000);
        assert_eq!(sample_size(500, 0.1), 200, "floor engages below 2000 bits");
        assert_eq!(sample_size(150, 0.1), 75, "cap at half the key wins over the floor");
        assert_eq!(sample_size(100_000, 0.001), 200, "floor engages for tiny fractions");
    }

    #[test]
    fn estimate_is_zero_for_identical_and_one_for_opposite_keys() {
        let mut rng = domain_rng(11, DOMAIN_SESSION);
        let a = Bits::random(&mut rng, 4000);
        let mut b = a.clone();
        let (e, idx) = estimate_qber(&a, &b, 0.1, &mut rng).expect("valid keys");
        assert_eq!(e, 0.0, "identical keys sample no mismatches");
        assert_eq!(idx.len(), 400);
        for i in 0..b.len() {
            b.flip(i);
        }
        let (e, _) = estimate_qber(&a, &b, 0.1, &mut rng).expect("valid keys");
        assert_eq!(e, 1.0, "fully flipped keys mismatch on every sampled bit");
    }

    #[test]
    fn estimate_tracks_a_planted_error_rate() {
        let n = 20_000;
        let true_rate = 0.089;
        let mut rng = domain_rng(12, DOMAIN_SESSION);
        let a = Bits::random(&mut rng, n);
        let mut b = a.clone();
        let mut planted = 0u64;
        for i in 0..n {
            if rng.gen_bool(true_rate) {
                b.flip(i);
                planted += 1;
            }
        }
        let (e, idx) = estimate_qber(&a, &b, 0.1, &mut rng).expect("valid keys");
        let k = idx.len() as f64;
        let sigma = (true_rate * (1.0 - true_rate) / k).sqrt();
        let actual = planted as f64 / n as f64;
        assert!(
            (e - actual).abs() < 4.0 * sigma,
            "estimate {e} too far from planted rate {actual} (sigma {sigma})"
        );
    }

    #[test]
    fn verify_hash_is_salt_and_key_sensitive() {
        let mut rng = domain_rng(13, DOMAIN_SESSION);
        let key = Bits::random(&mut rng, 1000);
        let h = verify_hash(42, &key);
        assert_eq!(h.len(), VERIFY_DISCLOSURE_BITS as usize);
        assert_eq!(h, verify_hash(42, &key), "deterministic in (salt, key)");
        assert_ne!(h, verify_hash(43, &key), "salt must matter");
        let mut other = key.clone();
        other.flip(777);
        assert_ne!(h, verify_hash(42, &other), "a single flipped bit must matter");
    }

    #[test]
    fn done_digest_changes_with_every_field() {
        let base = done_digest(1000, 100, 900, 300, 400);
        assert_eq!(base.len(), 8);
        assert_ne!(base, done_digest(1001, 100, 900, 300, 400));
        assert_ne!(base, done_digest(1000, 101, 900, 300, 400));
        assert_ne!(base, done_digest(1000, 100, 901, 300, 400));
        assert_ne!(base, done_digest(1000, 100, 900, 301, 400));
        assert_ne!(base, done_digest(1000, 100, 900, 300, 401));
    }

    #[test]
    fn message_phases_are_monotone_in_the_happy_path() {
        let msgs = [
            Message::Hello { version: 1, config_hash: [0; 32] },
            Message::Detections { cycles: vec![1], bases: Bits::zeros(1) },
            Message::BasisMatch { keep: Bits::zeros(1) },
            Message::SampleRequest { indices: vec![0] },
            Message::SampleBits { bits: Bits::zeros(1) },
            Message::CascadeShuffle { pass: 2, seed: 9 },
            Message::CascadeParityReq { ranges: vec![] },
            Message::CascadeParityResp { parities: Bits::new() },
            Message::VerifyHash { salt: 0, hash: Bits::zeros(50) },
            Message::PaSeed { m: 1, seed: Bits::zeros(1) },
            Message::Done { digest: vec![1] },
        ];
        let mut last = SessionPhase::Idle;
        for m in &msgs {
            let p = message_phase(m);
            assert!(p >= last, "phase went backwards at {m:?}");
            last = p;
        }
    }

    #[test]
    fn clean_short_link_session_yields_identical_keys() {
        // Error-free configuration: no noise, no modulation error. Both
        // sides must finish with the same nonempty key and consistent
        // ledgers.
        let mut params = LinkParams::baseline_122km().at_length(4.4);
        params.p_err_cycle = 0.0;
        params.p_dark_cycle = 0.0;
        params.e_mod = 0.0;
        let sample = aggregate_sample(&params, 2_000_000, &AttackConfig::None, 21);
        let cfg = SessionConfig::new(21, test_hash(1));
        let (alice, bob) = run_pair(sample, &cfg);
        let (ka, kb) = match (&alice, &bob) {
            (SessionOutcome::Established(a), SessionOutcome::Established(b)) => (a, b),
            other => panic!("expected both sides to finish, got {other:?}"),
        };
        assert_eq!(ka.bits, kb.bits, "final keys must be identical");
        assert!(!ka.bits.is_empty());
        assert_eq!(ka.session_id, kb.session_id);
        assert_eq!(
            kb.report.qber_estimate,
            Some(0.0),
            "error-free run estimates zero"
        );
        assert_eq!(kb.report.corrected, Some(0), "nothing to correct");
        assert_eq!(
            ka.report.ledger.wire_total(),
            kb.report.ledger.wire_total(),
            "both sides account the same disclosure"
        );
        assert_eq!(ka.report.final_bits, ka.bits.len() as u64);
        assert_eq!(ka.report.phase, SessionPhase::Done);
        assert_eq!(kb.report.phase, SessionPhase::Done);
    }

    #[test]
    fn noisy_session_corrects_errors_and_still_agrees() {
        // Realistic modulation error: sampling estimates ~3.3%, cascade
        // must repair the remaining mismatches exactly.
        let params = LinkParams::baseline_122km().at_length(10.0);
        let sample = aggregate_sample(&params, 3_000_000, &AttackConfig::None, 22);
        let cfg = SessionConfig::new(22, test_hash(2));
        let (alice, bob) = run_pair(sample, &cfg);
        let (ka, kb) = match (&alice, &bob) {
            (SessionOutcome::Established(a), SessionOutcome::Established(b)) => (a, b),
            other => panic!("expected both sides to finish, got {other:?}"),
        };
        assert_eq!(ka.bits, kb.bits, "final keys must be identical after correction");
        let est = kb.report.qber_estimate.expect("bob sampled");
        assert!(
            (est - 0.033).abs() < 0.02,
            "estimate {est} should sit near the modulation error"
        );
        assert!(kb.report.corrected.expect("bob reconciled") > 0);
        assert!(ka.report.final_bits > 0);
        assert_eq!(
            ka.report.ledger.parity_bits, kb.report.ledger.parity_bits,
            "both sides count the same parity disclosure"
        );
    }

    #[test]
    fn full_intercept_attack_aborts_both_sides_at_the_threshold() {
        let params = LinkParams::baseline_122km().at_length(10.0);
        let attack = AttackConfig::InterceptResend { fraction: 1.0 };
        let sample = aggregate_sample(&params, 2_000_000, &attack, 23);
        let cfg = SessionConfig::new(23, test_hash(3));
        let (alice, bob) = run_pair(sample, &cfg);
        match (&alice, &bob) {
            (
                SessionOutcome::Aborted { reason: ra, .. },
                SessionOutcome::Aborted { reason: rb, .. },
            ) => {
                assert_eq!(*ra, AbortReason::QberThreshold);
                assert_eq!(*rb, AbortReason::QberThreshold);
            }
            other => panic!("expected symmetric aborts, got {other:?}"),
        }
        let est = bob.report().qber_estimate.expect("bob sampled before aborting");
        assert!(est >= 0.11, "intercepted run must estimate above threshold, got {est}");
        assert_eq!(bob.report().phase, SessionPhase::Aborted);
    }

    #[test]
    fn tiny_detection_record_aborts_with_insufficient_bits() {
        // 50 detections sift to ~25 bits, below the minimum of 100.
        let params = LinkParams::baseline_122km().at_length(4.4);
        let sample = aggregate_sample(&params, 25_000, &AttackConfig::None, 24);
        assert!(
            !sample.events.is_empty() && sample.events.len() < 200,
            "test premise: a sparse but nonempty detection record"
        );
        let cfg = SessionConfig::new(24, test_hash(4));
        let (alice, bob) = run_pair(sample, &cfg);
        match (&alice, &bob) {
            (
                SessionOutcome::Aborted { reason: ra, .. },
                SessionOutcome::Aborted { reason: rb, .. },
            ) => {
                assert_eq!(*ra, AbortReason::InsufficientBits);
                assert_eq!(*rb, AbortReason::InsufficientBits);
            }
            other => panic!("expected symmetric aborts, got {other:?}"),
        }
    }

    #[test]
    fn empty_detection_record_aborts_with_no_bits() {
        let sample = QuantumSample {
            n_cycles: 1000,
            events: vec![],
            alice: AliceTable::Sparse(vec![]),
        };
        let cfg = SessionConfig::new(25, test_hash(5));
        let (alice, bob) = run_pair(sample, &cfg);
        match (&alice, &bob) {
            (
                SessionOutcome::Aborted { reason: ra, .. },
                SessionOutcome::Aborted { reason: rb, .. },
            ) => {
                assert_eq!(*ra, AbortReason::NoBits);
                assert_eq!(*rb, AbortReason::NoBits);
            }
            other => panic!("expected symmetric aborts, got {other:?}"),
        }
    }

    #[test]
    fn bob_aborts_on_version_mismatch_from_a_scripted_peer() {
        let (sa, sb) = pipe_pair(Duration::from_secs(5));
        let bob = std::thread::spawn(move || {
            let view = BobView {
                n_cycles: 1000,
                detections: vec![(1, Basis::Z, 0)],
            };
            let cfg = SessionConfig::new(26, test_hash(6));
            let mut ch = FrameChannel::new(sb);
            run_bob(&view, &cfg, &mut ch).expect("no hard failure")
        });
        let mut ch = FrameChannel::new(sa);
        ch.send_msg(&Message::Hello {
            version: PROTOCOL_VERSION + 1,
            config_hash: test_hash(6),
        })
        .expect("send");
        match ch.recv_msg().expect("bob must notify") {
            Message::Abort { reason } => assert_eq!(reason, AbortReason::VersionMismatch),
            other => panic!("expected abort frame, got {other:?}"),
        }
        match bob.join().expect("bob thread") {
            SessionOutcome::Aborted { reason, .. } => {
                assert_eq!(reason, AbortReason::VersionMismatch)
            }
            other => panic!("expected abort outcome, got {other:?}"),
        }
    }

    #[test]
    fn alice_aborts_on_config_mismatch_from_a_scripted_peer() {
        let (sa, sb) = pipe_pair(Duration::from_secs(5));
        let alice = std::thread::spawn(move || {
            let view = AliceView {
                n_cycles: 1000,
                table: AliceTable::Sparse(vec![(1, 0, Basis::Z)]),
            };
            let cfg = SessionConfig::new(27, test_hash(7));
            let mut ch = FrameChannel::new(sa);
            run_alice(&view, &cfg, &mut ch).expect("no hard failure")
        });
        let mut ch = FrameChannel::new(sb);
        match ch.recv_msg().expect("alice opens") {
            Message::Hello { version, .. } => assert_eq!(version, PROTOCOL_VERSION),
            other => panic!("expected hello, got {other:?}"),
        }
        ch.send_msg(&Message::Hello {
            version: PROTOCOL_VERSION,
            config_hash: test_hash(99),
        })
        .expect("send");
        match ch.recv_msg().expect("alice must notify") {
            Message::Abort { reason } => assert_eq!(reason, AbortReason::ConfigMismatch),
            other => panic!("expected abort frame, got {other:?}"),
        }
        match alice.join().expect("alice thread") {
            SessionOutcome::Aborted { reason, .. } => {
                assert_eq!(reason, AbortReason::ConfigMismatch)
            }
            other => panic!("expected abort outcome, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_message_aborts_with_protocol_error() {
        let (sa, sb) = pipe_pair(Duration::from_secs(5));
        let alice = std::thread::spawn(move || {
            let view = AliceView {
                n_cycles: 1000,
                table: AliceTable::Sparse(vec![(1, 0, Basis::Z)]),
            };
            let cfg = SessionConfig::new(28, test_hash(8));
            let mut ch = FrameChannel::new(sa);
            run_alice(&view, &cfg, &mut ch).expect("no hard failure")
        });
        let mut ch = FrameChannel::new(sb);
        let _hello = ch.recv_msg().expect("alice opens");
        // Skipping the hello reply and jumping ahead is a choreography
        // violation alice must reject.
        ch.send_msg(&Message::SampleBits { bits: Bits::zeros(8) })
            .expect("send");
        match ch.recv_msg().expect("alice must notify") {
            Message::Abort { reason } => assert_eq!(reason, AbortReason::ProtocolError),
            other => panic!("expected abort frame, got {other:?}"),
        }
        match alice.join().expect("alice thread") {
            SessionOutcome::Aborted { reason, .. } => {
                assert_eq!(reason, AbortReason::ProtocolError)
            }
            other => panic!("expected abort outcome, got {other:?}"),
        }
    }

    #[test]
    fn session_config_rejects_bad_knobs() {
        let mut cfg = SessionConfig::new(1, test_hash(0));
        cfg.sample_fraction = 0.0;
        assert!(matches!(
            run_bob(
                &BobView { n_cycles: 1, detections: vec![] },
                &cfg,
                &mut FrameChannel::new(pipe_pair(Duration::from_secs(1)).0),
            ),
            Err(SessionError::Config(_))
        ));
        let mut cfg = SessionConfig::new(1, test_hash(0));
        cfg.n_passes = 0;
        assert!(matches!(
            run_bob(
                &BobView { n_cycles: 1, detections: vec![] },
                &cfg,
                &mut FrameChannel::new(pipe_pair(Duration::from_secs(1)).0),
            ),
            Err(SessionError::Config(_))
        ));
    }
}

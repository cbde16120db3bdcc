//! Run orchestration: turn one run configuration into a quantum-layer
//! record, drive both endpoints over a chosen transport, and reduce the
//! outcome to a report row.
//!
//! Determinism contract: a [`RunConfig`] fully determines the run. The
//! same configuration (including the seed) produces byte-identical keys
//! and report rows whether the endpoints share a process, a loopback TCP
//! socket, or two separate processes that each rebuild their own view
//! from the seed.

use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::{binary_entropy, zero_error_leak};
use crate::link::{qber_model_extended, sifted_rate_model, transmittance, visibility_model,
    LinkError, LinkParams};
use crate::privacy::final_length;
use crate::security::{verdict, SecurityVerdict};
use crate::session::{
    run_alice, run_bob, sample_size, SessionConfig, SessionError, SessionOutcome,
};
use crate::sim::{
    simulate_aggregated, simulate_exact, synthesize_sample, AttackConfig, DriftSpec,
    NoiseSifting, QuantumSample, SimError,
};
use crate::wire::{pipe_pair, FrameChannel, TapHandle, TcpByteStream, WireError};

/// Read timeout both transports apply to a blocking frame receive.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// How the quantum layer is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    /// Cycle-by-cycle events; supports drift, capped in length.
    Exact,
    /// Cell-count draws expanded to an exchangeable event stream.
    Aggregate,
}

/// How the two endpoints exchange classical frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    /// Two threads over an in-process pipe.
    Inproc,
    /// A loopback TCP connection on `host:port`, still in one process.
    Tcp(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("endpoint thread panicked")]
    Thread,
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything that defines one run. `transport` and `timeout` affect only
/// how frames travel, so they are excluded from the configuration digest
/// the endpoints compare during the handshake.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub params: LinkParams,
    /// Cycle budget; exactly one of `cycles`/`duration_s` must be set.
    pub cycles: Option<u64>,
    /// Run length in seconds, converted via the clock rate.
    pub duration_s: Option<f64>,
    pub seed: u64,
    pub sim_mode: SimMode,
    pub attack: AttackConfig,
    /// Interferometer drift, applied in exact mode only.
    pub drift: Option<DriftSpec>,
    pub noise_sifting: NoiseSifting,
    pub sample_fraction: f64,
    pub safety_bits: u64,
    pub n_passes: u8,
    pub transport: Transport,
    pub timeout: Duration,
}

impl RunConfig {
    /// A 120-second aggregate-mode run with the default protocol knobs.
    pub fn new(params: LinkParams, seed: u64) -> Self {
        RunConfig {
            params,
            cycles: None,
            duration_s: Some(120.0),
            seed,
            sim_mode: SimMode::Aggregate,
            attack: AttackConfig::None,
            drift: None,
            noise_sifting: NoiseSifting::AlwaysKept,
            sample_fraction: 0.1,
            safety_bits: 30,
            n_passes: 4,
            transport: Transport::Inproc,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.params.validate()?;
        self.attack.validate()?;
        match (self.cycles, self.duration_s) {
            (Some(_), Some(_)) => {
                return Err(RunError::Config("set either a cycle count or a duration, not both"))
            }
            (None, None) => {
                return Err(RunError::Config("one of cycle count or duration is required"))
            }
            (Some(0), None) => return Err(RunError::Config("cycle count must be positive")),
            (None, Some(d)) if !(d.is_finite() && d > 0.0) => {
                return Err(RunError::Config("duration must be positive"))
            }
            _ => {}
        }
        self.session_config().validate()?;
        Ok(())
    }

    /// Cycle budget, resolving a duration through the clock rate.
    pub fn n_cycles(&self) -> u64 {
        match (self.cycles, self.duration_s) {
            (Some(c), _) => c,
            (None, Some(d)) => (d * self.params.clock_hz).round() as u64,
            (None, None) => 0,
        }
    }

    /// Wall-clock span the cycle budget represents, for rate figures.
    pub fn duration_seconds(&self) -> f64 {
        match (self.duration_s, self.cycles) {
            (Some(d), _) => d,
            (None, Some(c)) => c as f64 / self.params.clock_hz,
            (None, None) => 0.0,
        }
    }

    /// Digest of every field that shapes the protocol run. Two endpoints
    /// with different digests must refuse to talk to each other.
    pub fn config_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"qkdcfg1");
        let p = &self.params;
        for v in [
            p.mu,
            p.alpha_db_per_km,
            p.length_km,
            p.eta_bob,
            p.p_err_cycle,
            p.p_dark_cycle,
            p.clock_hz,
            p.gate_ns,
            p.e_mod,
        ] {
            h.update(v.to_bits().to_be_bytes());
        }
        h.update(self.n_cycles().to_be_bytes());
        h.update(self.seed.to_be_bytes());
        h.update([match self.sim_mode {
            SimMode::Exact => 0u8,
            SimMode::Aggregate => 1,
        }]);
        match self.attack.normalized() {
            AttackConfig::None => h.update([0u8; 9]),
            AttackConfig::InterceptResend { fraction } => {
                h.update([1u8]);
                h.update(fraction.to_bits().to_be_bytes());
            }
        }
        match self.drift {
            None => h.update([0u8; 9]),
            Some(d) => {
                h.update([1u8]);
                h.update(d.rate_bound_deg_per_s.to_bits().to_be_bytes());
            }
        }
        h.update([match self.noise_sifting {
            NoiseSifting::AlwaysKept => 0u8,
            NoiseSifting::BasisFiltered => 1,
        }]);
        h.update(self.sample_fraction.to_bits().to_be_bytes());
        h.update(self.safety_bits.to_be_bytes());
        h.update([self.n_passes]);
        h.finalize().into()
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            seed: self.seed,
            config_hash: self.config_hash(),
            sample_fraction: self.sample_fraction,
            safety_bits: self.safety_bits,
            n_passes: self.n_passes,
        }
    }
}

/// Simulates the quantum layer for this run. Both processes of a
/// two-process run call this with the same configuration and obtain the
/// same record, of which each endpoint then uses only its own view.
pub fn build_sample(cfg: &RunConfig) -> Result<QuantumSample, RunError> {
    let n = cfg.n_cycles();
    match cfg.sim_mode {
        SimMode::Exact => Ok(simulate_exact(
            &cfg.params,
            n,
            cfg.drift,
            &cfg.attack,
            cfg.noise_sifting,
            cfg.seed,
        )?
        .into_sample()),
        SimMode::Aggregate => {
            let tallies = simulate_aggregated(&cfg.params, n, &cfg.attack, cfg.seed)?;
            Ok(synthesize_sample(&tallies, cfg.noise_sifting, cfg.seed)?)
        }
    }
}

/// Both endpoints' outcomes from a run that owned the whole pair.
#[derive(Debug)]
pub struct PairedOutcome {
    pub alice: SessionOutcome,
    pub bob: SessionOutcome,
}

/// Runs both endpoints on two threads over an in-process pipe. A tap, if
/// given, observes every frame from Bob's side of the channel.
pub fn run_inproc(cfg: &RunConfig, tap: Option<TapHandle>) -> Result<PairedOutcome, RunError> {
    cfg.validate()?;
    let (alice_view, bob_view) = build_sample(cfg)?.split();
    let scfg = cfg.session_config();
    let (sa, sb) = pipe_pair(cfg.timeout);
    let scfg_a = scfg.clone();
    let alice = thread::spawn(move || {
        let mut ch = FrameChannel::new(sa);
        run_alice(&alice_view, &scfg_a, &mut ch)
    });
    let mut ch = FrameChannel::new(sb);
    if let Some(tap) = tap {
        ch.set_tap(tap);
    }
    let bob = run_bob(&bob_view, &scfg, &mut ch)?;
    let alice = alice.join().map_err(|_| RunError::Thread)??;
    Ok(PairedOutcome { alice, bob })
}

/// Runs both endpoints in one process over a real TCP socket bound to
/// `addr`. A tap, if given, observes every frame from Bob's side.
pub fn run_tcp_loopback(
    cfg: &RunConfig,
    addr: &str,
    tap: Option<TapHandle>,
) -> Result<PairedOutcome, RunError> {
    cfg.validate()?;
    let (alice_view, bob_view) = build_sample(cfg)?.split();
    let scfg = cfg.session_config();
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let timeout = cfg.timeout;
    let scfg_a = scfg.clone();
    let alice = thread::spawn(move || -> Result<SessionOutcome, RunError> {
        let (stream, _) = listener.accept()?;
        let mut ch = FrameChannel::new(TcpByteStream::new(stream, timeout)?);
        Ok(run_alice(&alice_view, &scfg_a, &mut ch)?)
    });
    let stream = TcpStream::connect(local)?;
    let mut ch = FrameChannel::new(TcpByteStream::new(stream, timeout)?);
    if let Some(tap) = tap {
        ch.set_tap(tap);
    }
    let bob = run_bob(&bob_view, &scfg, &mut ch)?;
    let alice = alice.join().map_err(|_| RunError::Thread)??;
    Ok(PairedOutcome { alice, bob })
}

/// Runs the configured transport end to end.
pub fn execute(cfg: &RunConfig) -> Result<PairedOutcome, RunError> {
    match &cfg.transport {
        Transport::Inproc => run_inproc(cfg, None),
        Transport::Tcp(addr) => run_tcp_loopback(cfg, &addr.clone(), None),
    }
}

/// Serves Alice's endpoint on an already-bound listener (one connection),
/// for the two-process mode.
pub fn serve_on(cfg: &RunConfig, listener: &TcpListener) -> Result<SessionOutcome, RunError> {
    cfg.validate()?;
    let (alice_view, _) = build_sample(cfg)?.split();
    let (stream, _) = listener.accept()?;
    let mut ch = FrameChannel::new(TcpByteStream::new(stream, cfg.timeout)?);
    Ok(run_alice(&alice_view, &cfg.session_config(), &mut ch)?)
}

/// Runs Bob's endpoint against a remote server, retrying the dial briefly
/// so the two processes need not start in lockstep.
pub fn connect_to(cfg: &RunConfig, addr: &str) -> Result<SessionOutcome, RunError> {
    cfg.validate()?;
    let (_, bob_view) = build_sample(cfg)?.split();
    let mut last = None;
    let mut stream = None;
    for _ in 0..25 {
        match TcpStream::connect(addr) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => {
                last = Some(e);
                thread::sleep(Duration::from_millis(200));
            }
        }
    }
    let stream = match stream {
        Some(s) => s,
        None => return Err(RunError::Io(last.expect("no stream implies an error"))),
    };
    let mut ch = FrameChannel::new(TcpByteStream::new(stream, cfg.timeout)?);
    Ok(run_bob(&bob_view, &cfg.session_config(), &mut ch)?)
}

/// Security assessment of a finished run, using the best error figure the
/// outcome offers and falling back to the model prediction.
pub fn verdict_for(cfg: &RunConfig, outcome: &SessionOutcome) -> SecurityVerdict {
    let e = outcome
        .report()
        .qber_measured()
        .unwrap_or_else(|| qber_model_extended(&cfg.params));
    verdict(e, &cfg.params)
}

/// One report row. Column meanings follow [`csv_header`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub length_km: f64,
    pub transmittance: f64,
    pub visibility_pred: f64,
    pub qber_pred: f64,
    /// Observed error rate; absent when the run aborted before sampling.
    pub qber_measured: Option<f64>,
    pub sifted_bits: u64,
    pub sifted_rate_bps: f64,
    /// Reconciliation disclosure charged against the key (parity bits plus
    /// the verification hash).
    pub leak_bits: u64,
    pub final_bits: u64,
    pub final_rate_bps: f64,
    pub qber_ok: bool,
    pub pns_ok: bool,
    pub seed: u64,
}

/// The fixed report header.
pub fn csv_header() -> &'static str {
    "length_km,transmittance,visibility_pred,qber_pred,qber_measured,sifted_bits,\
     sifted_rate_bps,leak_bits,final_bits,final_rate_bps,qber_ok,pns_ok,seed"
}

impl RunRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt_sig6(self.length_km),
            fmt_sig6(self.transmittance),
            fmt_sig6(self.visibility_pred),
            fmt_sig6(self.qber_pred),
            self.qber_measured.map_or_else(|| "nan".into(), fmt_sig6),
            self.sifted_bits,
            fmt_sig6(self.sifted_rate_bps),
            self.leak_bits,
            self.final_bits,
            fmt_sig6(self.final_rate_bps),
            u8::from(self.qber_ok),
            u8::from(self.pns_ok),
            self.seed,
        )
    }
}

/// Report row for a finished (or cleanly aborted) run, from the receiving
/// endpoint's outcome.
pub fn report_row(cfg: &RunConfig, outcome: &SessionOutcome) -> RunRow {
    let report = outcome.report();
    let duration = cfg.duration_seconds();
    let sec = verdict_for(cfg, outcome);
    RunRow {
        length_km: cfg.params.length_km,
        transmittance: transmittance(cfg.params.alpha_db_per_km, cfg.params.length_km),
        visibility_pred: visibility_model(&cfg.params),
        qber_pred: qber_model_extended(&cfg.params),
        qber_measured: report.qber_measured(),
        sifted_bits: report.sifted_bits,
        sifted_rate_bps: report.sifted_bits as f64 / duration,
        leak_bits: report.ledger.reconciliation_total(),
        final_bits: report.final_bits,
        final_rate_bps: report.final_bits as f64 / duration,
        qber_ok: sec.qber_ok,
        pns_ok: sec.pns_ok,
        seed: cfg.seed,
    }
}

/// Expected reconciliation disclosure for `n` bits at error rate `e`:
/// measured efficiency of the implementation over the entropy floor, never
/// below the zero-error parity floor.
pub fn predicted_leak(n: usize, e: f64, n_passes: u8) -> u64 {
    let entropy = (1.18 * n as f64 * binary_entropy(e)).ceil() as u64;
    entropy.max(zero_error_leak(n, e, n_passes))
}

/// Closed-form report row for a sweep point: model predictions only, no
/// randomness, `qber_measured` left empty.
pub fn model_row(cfg: &RunConfig, length_km: f64) -> Result<RunRow, RunError> {
    let mut cfg = cfg.clone();
    cfg.params = cfg.params.at_length(length_km);
    cfg.params.validate()?;
    let p = &cfg.params;
    let duration = cfg.duration_seconds();
    let qber = qber_model_extended(p);
    let sifted_rate = sifted_rate_model(p);
    let sifted_bits = (sifted_rate * duration).floor() as u64;
    let k = sample_size(sifted_bits as usize, cfg.sample_fraction) as u64;
    let n_rec = sifted_bits.saturating_sub(k) as usize;
    let (leak, final_bits) = if n_rec == 0 {
        (0, 0)
    } else {
        let leak = predicted_leak(n_rec, qber, cfg.n_passes)
            + crate::wire::VERIFY_DISCLOSURE_BITS;
        let m = final_length(n_rec, qber, leak, cfg.safety_bits).unwrap_or(0);
        (leak, m as u64)
    };
    let sec = verdict(qber, p);
    Ok(RunRow {
        length_km,
        transmittance: transmittance(p.alpha_db_per_km, length_km),
        visibility_pred: visibility_model(p),
        qber_pred: qber,
        qber_measured: None,
        sifted_bits,
        sifted_rate_bps: sifted_rate,
        leak_bits: leak,
        final_bits,
        final_rate_bps: final_bits as f64 / duration,
        qber_ok: sec.qber_ok,
        pns_ok: sec.pns_ok,
        seed: cfg.seed,
    })
}

/// Formats with six significant digits, fixed-point for moderate
/// magnitudes and scientific notation otherwise, trailing zeros stripped.
/// The output is locale-free and stable, so report files diff cleanly.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let prec = (5 - exp).max(0) as usize;
        let s = format!("{x:.prec$}");
        strip_trailing_zeros(s)
    } else {
        let s = format!("{x:.5e}");
        match s.split_once('e') {
            Some((mantissa, e)) => {
                format!("{}e{e}", strip_trailing_zeros(mantissa.to_string()))
            }
            None => s,
        }
    }
}

fn strip_trailing_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

/// Convenience: wire-level failures that should map to an infrastructure
/// exit rather than a protocol abort.
pub fn is_infrastructure(err: &RunError) -> bool {
    matches!(
        err,
        RunError::Io(_) | RunError::Thread | RunError::Session(SessionError::Wire(WireError::Io(_)))
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::SessionPhase;
    use crate::wire::TapLog;
    use std::sync::{Arc, Mutex};

    fn short_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::new(LinkParams::baseline_122km().at_length(4.4), seed);
        cfg.duration_s = Some(1.0);
        cfg
    }

    #[test]
    fn config_requires_exactly_one_budget() {
        let mut cfg = short_cfg(1);
        cfg.cycles = Some(1000);
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))), "both budgets set");
        cfg.duration_s = None;
        assert!(cfg.validate().is_ok());
        cfg.cycles = None;
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))), "no budget set");
    }

    #[test]
    fn cycle_budget_resolves_through_the_clock() {
        let mut cfg = RunConfig::new(LinkParams::baseline_122km(), 1);
        cfg.duration_s = Some(120.0);
        assert_eq!(cfg.n_cycles(), 240_000_000);
        assert_eq!(cfg.duration_seconds(), 120.0);
        cfg.duration_s = None;
        cfg.cycles = Some(240_000_000);
        assert_eq!(cfg.n_cycles(), 240_000_000);
        assert_eq!(cfg.duration_seconds(), 120.0);
    }

    #[test]
    fn config_hash_tracks_physics_not_transport() {
        let base = short_cfg(7);
        let mut same = base.clone();
        same.transport = Transport::Tcp("127.0.0.1:9".into());
        same.timeout = Duration::from_secs(5);
        assert_eq!(base.config_hash(), same.config_hash(), "transport is not hashed");

        // A duration and its equivalent cycle count hash identically.
        let mut cycles = base.clone();
        cycles.duration_s = None;
        cycles.cycles = Some(base.n_cycles());
        assert_eq!(base.config_hash(), cycles.config_hash());

        let mut other = base.clone();
        other.seed = 8;
        assert_ne!(base.config_hash(), other.config_hash(), "seed is hashed");
        let mut other = base.clone();
        other.params.length_km = 10.0;
        assert_ne!(base.config_hash(), other.config_hash(), "length is hashed");
        let mut other = base.clone();
        other.attack = AttackConfig::InterceptResend { fraction: 0.5 };
        assert_ne!(base.config_hash(), other.config_hash(), "attack is hashed");
        let mut zero_attack = base.clone();
        zero_attack.attack = AttackConfig::InterceptResend { fraction: 0.0 };
        assert_eq!(
            base.config_hash(),
            zero_attack.config_hash(),
            "a zero-fraction attack is the same run as no attack"
        );
    }

    #[test]
    fn formatting_keeps_six_significant_digits() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(122.0), "122");
        assert_eq!(fmt_sig6(4.4), "4.4");
        assert_eq!(fmt_sig6(0.00363078), "0.00363078");
        assert_eq!(fmt_sig6(1.633851e-5), "1.63385e-5");
        assert_eq!(fmt_sig6(3639.28), "3639.28");
        assert_eq!(fmt_sig6(14.037), "14.037");
        assert_eq!(fmt_sig6(1_234_567.0), "1.23457e6");
        assert_eq!(fmt_sig6(-0.0896), "-0.0896");
        assert_eq!(fmt_sig6(f64::NAN), "nan");
        assert_eq!(fmt_sig6(0.1), "0.1");
    }

    #[test]
    fn header_matches_row_column_count() {
        let row = RunRow {
            length_km: 122.0,
            transmittance: 0.00363078,
            visibility_pred: 0.905757,
            qber_pred: 0.0896,
            qber_measured: None,
            sifted_bits: 1684,
            sifted_rate_bps: 14.037,
            leak_bits: 700,
            final_bits: 100,
            final_rate_bps: 0.83,
            qber_ok: true,
            pns_ok: false,
            seed: 1,
        };
        let line = row.csv_line();
        assert_eq!(
            line.split(',').count(),
            csv_header().split(',').count(),
            "row and header column counts agree"
        );
        assert!(line.contains(",nan,"), "missing measurement renders as nan");
        assert!(line.ends_with(",1,0,1"), "booleans render as 1/0 before the seed");
    }

    #[test]
    fn inproc_run_completes_and_reports_consistently() {
        let cfg = short_cfg(42);
        let pair = run_inproc(&cfg, None).expect("run");
        let (ka, kb) = match (&pair.alice, &pair.bob) {
            (SessionOutcome::Established(a), SessionOutcome::Established(b)) => (a, b),
            other => panic!("expected completion, got {other:?}"),
        };
        assert_eq!(ka.bits, kb.bits);
        let row = report_row(&cfg, &pair.bob);
        assert!(row.final_bits <= row.sifted_bits);
        assert!(row.final_bits > 0);
        assert_eq!(row.final_bits, ka.bits.len() as u64);
        assert!((row.sifted_rate_bps - row.sifted_bits as f64 / 1.0).abs() < 1e-9);
        assert!(row.qber_ok, "short-fiber run sits well under the threshold");
        assert!(row.pns_ok, "4.4 km is inside the multi-photon budget");
        let e = row.qber_measured.expect("completed run has a measurement");
        assert!((e - 0.033).abs() < 0.02, "measured error {e} near the modulation error");
    }

    #[test]
    fn identical_configs_yield_identical_keys_and_rows_across_transports() {
        let cfg = short_cfg(77);
        let a = run_inproc(&cfg, None).expect("inproc");
        let mut cfg_tcp = cfg.clone();
        cfg_tcp.transport = Transport::Tcp("127.0.0.1:0".into());
        let b = run_tcp_loopback(&cfg_tcp, "127.0.0.1:0", None).expect("tcp");
        match (&a.bob, &b.bob) {
            (SessionOutcome::Established(x), SessionOutcome::Established(y)) => {
                assert_eq!(x.bits, y.bits, "keys must not depend on the transport");
            }
            other => panic!("expected completions, got {other:?}"),
        }
        assert_eq!(
            report_row(&cfg, &a.bob).csv_line(),
            report_row(&cfg_tcp, &b.bob).csv_line(),
            "report rows must be byte-identical across transports"
        );
    }

    #[test]
    fn tap_ledger_agrees_with_both_endpoints() {
        let cfg = short_cfg(5);
        let tap = Arc::new(Mutex::new(TapLog::default()));
        let pair = run_inproc(&cfg, Some(tap.clone())).expect("run");
        let observed = tap.lock().expect("tap lock").observed_leak_bits();
        assert_eq!(observed, pair.alice.report().ledger.wire_total());
        assert_eq!(observed, pair.bob.report().ledger.wire_total());
    }

    #[test]
    fn model_row_predicts_without_randomness() {
        let cfg = RunConfig::new(LinkParams::baseline_122km(), 1);
        let row = model_row(&cfg, 122.0).expect("model row");
        assert!(row.qber_measured.is_none());
        assert!((row.qber_pred - 0.0896).abs() < 1e-3);
        assert!(row.final_bits < row.sifted_bits);
        let again = model_row(&cfg, 122.0).expect("model row");
        assert_eq!(row, again, "closed-form rows are deterministic");
        let far = model_row(&cfg, 160.0).expect("model row");
        assert_eq!(far.final_bits, 0, "beyond the threshold no key remains");
        assert!(!far.qber_ok);
    }

    #[test]
    fn aborted_run_still_produces_a_row() {
        let mut cfg = short_cfg(9);
        cfg.attack = AttackConfig::InterceptResend { fraction: 1.0 };
        let pair = run_inproc(&cfg, None).expect("run machinery");
        let row = report_row(&cfg, &pair.bob);
        assert_eq!(row.final_bits, 0);
        assert!(!row.qber_ok, "a full intercept pushes the estimate over the threshold");
        assert!(row.qber_measured.expect("sampled before aborting") >= 0.11);
        assert_eq!(pair.bob.report().phase, SessionPhase::Aborted);
    }
}

//! End-to-end protocol behavior across transports: key agreement,
//! abort symmetry, transcript ordering, and leakage auditing.

use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use qkd_core::link::LinkParams;
use qkd_core::runner::{
    connect_to, run_inproc, serve_on, RunConfig, SimMode, Transport,
};
use qkd_core::session::{message_phase, SessionOutcome, SessionPhase};
use qkd_core::sim::AttackConfig;
use qkd_core::wire::{AbortReason, Message, TapLog};

fn established(outcome: &SessionOutcome) -> &qkd_core::session::SecretKey {
    match outcome {
        SessionOutcome::Established(k) => k,
        other => panic!("expected an established key, got {other:?}"),
    }
}

fn abort_reason(outcome: &SessionOutcome) -> AbortReason {
    match outcome {
        SessionOutcome::Aborted { reason, .. } => *reason,
        other => panic!("expected an abort, got {other:?}"),
    }
}

/// A one-second short-fiber run: thousands of sifted bits, a few percent
/// error rate, completes in milliseconds.
fn short_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(LinkParams::baseline_122km().at_length(4.4), seed);
    cfg.duration_s = Some(1.0);
    cfg
}

#[test]
fn separate_endpoints_rebuild_the_same_run_from_the_seed() {
    // Two-process topology: the server and the client each simulate the
    // quantum layer independently from the shared configuration, and the
    // result must match a single-process run bit for bit.
    let cfg = short_cfg(101);
    let inproc = run_inproc(&cfg, None).expect("inproc run");

    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().expect("local addr").to_string();
    let cfg_serve = cfg.clone();
    let server = thread::spawn(move || serve_on(&cfg_serve, &listener).expect("serve"));
    let bob = connect_to(&cfg, &addr).expect("connect");
    let alice = server.join().expect("server thread");

    let k_inproc = established(&inproc.bob);
    let k_alice = established(&alice);
    let k_bob = established(&bob);
    assert_eq!(k_alice.bits, k_bob.bits, "the two processes agree with each other");
    assert_eq!(
        k_bob.bits, k_inproc.bits,
        "two-process and single-process runs of one config agree"
    );
    assert_eq!(k_alice.session_id, k_bob.session_id);
    assert_eq!(
        k_alice.report.ledger.wire_total(),
        k_bob.report.ledger.wire_total(),
        "both processes account identical disclosure"
    );
}

#[test]
fn exact_mode_session_completes_and_agrees() {
    let mut cfg = RunConfig::new(LinkParams::baseline_122km().at_length(10.0), 55);
    cfg.duration_s = None;
    cfg.cycles = Some(1_000_000);
    cfg.sim_mode = SimMode::Exact;
    let pair = run_inproc(&cfg, None).expect("run");
    let ka = established(&pair.alice);
    let kb = established(&pair.bob);
    assert_eq!(ka.bits, kb.bits, "exact-mode endpoints agree");
    assert!(!ka.bits.is_empty());
}

#[test]
fn full_intercept_attack_aborts_symmetrically_over_tcp() {
    let mut cfg = short_cfg(60);
    cfg.attack = AttackConfig::InterceptResend { fraction: 1.0 };
    cfg.transport = Transport::Tcp("127.0.0.1:0".into());
    let pair = qkd_core::runner::execute(&cfg).expect("run machinery");
    assert_eq!(abort_reason(&pair.alice), AbortReason::QberThreshold);
    assert_eq!(abort_reason(&pair.bob), AbortReason::QberThreshold);
    let est = pair.bob.report().qber_estimate.expect("sampled before abort");
    assert!(
        (0.20..0.31).contains(&est),
        "full intercept shows roughly a quarter errors, got {est}"
    );
}

#[test]
fn no_detections_aborts_with_no_bits() {
    // A hundred cycles at 122 km yields zero clicks for this seed.
    let mut cfg = RunConfig::new(LinkParams::baseline_122km(), 3);
    cfg.duration_s = None;
    cfg.cycles = Some(100);
    let pair = run_inproc(&cfg, None).expect("run machinery");
    assert_eq!(abort_reason(&pair.alice), AbortReason::NoBits);
    assert_eq!(abort_reason(&pair.bob), AbortReason::NoBits);
}

#[test]
fn sparse_detections_abort_with_insufficient_bits() {
    // Around forty detections sift to well under the hundred-bit floor.
    let mut cfg = RunConfig::new(LinkParams::baseline_122km().at_length(4.4), 8);
    cfg.duration_s = None;
    cfg.cycles = Some(20_000);
    let pair = run_inproc(&cfg, None).expect("run machinery");
    assert_eq!(abort_reason(&pair.alice), AbortReason::InsufficientBits);
    assert_eq!(abort_reason(&pair.bob), AbortReason::InsufficientBits);
    let report = pair.bob.report();
    assert!(
        report.detections > 0 && report.sifted_bits < 100,
        "premise: some detections but a short sifted key, got {} / {}",
        report.detections,
        report.sifted_bits
    );
}

#[test]
fn crippled_reconciliation_is_caught_by_the_verification_hash() {
    // One reconciliation pass at a ~9% error rate leaves residual errors
    // in any block holding an even number of them; the closing hash
    // comparison must catch the mismatch and abort both sides.
    let mut params = LinkParams::baseline_122km().at_length(20.0);
    params.e_mod = 0.09;
    let mut cfg = RunConfig::new(params, 31);
    cfg.duration_s = None;
    cfg.cycles = Some(5_000_000);
    cfg.n_passes = 1;
    let pair = run_inproc(&cfg, None).expect("run machinery");
    assert_eq!(abort_reason(&pair.alice), AbortReason::ReconciliationFailed);
    assert_eq!(abort_reason(&pair.bob), AbortReason::ReconciliationFailed);
    let report = pair.bob.report();
    assert!(report.corrected.expect("cascade ran") > 0, "pass one corrected something");
    assert_eq!(
        report.ledger.verify_bits, 50,
        "the failed verification still cost its disclosure budget"
    );
    assert_eq!(
        pair.alice.report().ledger.verify_bits, 50,
        "the answering side charges the same budget"
    );
}

#[test]
fn transcript_phases_never_move_backwards() {
    let cfg = short_cfg(21);
    let tap = Arc::new(Mutex::new(TapLog::default()));
    let pair = run_inproc(&cfg, Some(tap.clone())).expect("run");
    established(&pair.bob);

    let log = tap.lock().expect("tap lock");
    assert!(!log.entries.is_empty(), "tap saw the conversation");
    let mut last = SessionPhase::Idle;
    for entry in &log.entries {
        let phase = message_phase(&entry.msg);
        assert!(
            phase >= last,
            "message {:?} belongs to {phase:?}, already past {last:?}",
            entry.msg.type_byte()
        );
        last = phase;
        assert!(
            !matches!(entry.msg, Message::Abort { .. }),
            "clean run has no abort frames"
        );
    }
    assert_eq!(last, SessionPhase::Done, "transcript ends with the closing digests");
}

#[test]
fn wire_tap_reconstructs_the_endpoints_leak_ledgers() {
    let cfg = short_cfg(33);
    let tap = Arc::new(Mutex::new(TapLog::default()));
    let pair = run_inproc(&cfg, Some(tap.clone())).expect("run");
    let ka = established(&pair.alice);
    let kb = established(&pair.bob);
    let observed = tap.lock().expect("tap lock").observed_leak_bits();
    assert_eq!(
        observed,
        ka.report.ledger.wire_total(),
        "tap reconstruction equals alice's ledger"
    );
    assert_eq!(
        observed,
        kb.report.ledger.wire_total(),
        "tap reconstruction equals bob's ledger"
    );
    assert!(
        kb.report.ledger.parity_bits > 0 && kb.report.ledger.sample_bits > 0,
        "a realistic run discloses both parities and sample bits"
    );
}

//! Subcommand implementations and the exit-code discipline: 0 for success
//! including clean session aborts, 2 for configuration problems, 3 for
//! analysis findings, 4 for infrastructure failures.

use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use qkd_core::link::{qber_model_extended, sifted_rate_model, transmittance, visibility_model};
use qkd_core::runner::{self, csv_header, RunConfig, RunError, Transport};
use qkd_core::security::{solve_max_range, verdict, MaxRange, SecurityError, QBER_ABORT_THRESHOLD};
use qkd_core::session::SessionOutcome;

use crate::config::{parse_lengths, CommonArgs, Settings};

/// A command failure, tagged with which exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Analysis(String),
    Infra(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Analysis(_) => 3,
            Failure::Infra(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Analysis(m) | Failure::Infra(m) => m,
        }
    }
}

fn from_run_error(e: RunError) -> Failure {
    if runner::is_infrastructure(&e) {
        Failure::Infra(e.to_string())
    } else {
        Failure::Config(e.to_string())
    }
}

fn load(args: &CommonArgs) -> Result<(Settings, RunConfig), Failure> {
    let settings = Settings::from_sources(args).map_err(Failure::Config)?;
    let cfg = settings.build().map_err(Failure::Config)?;
    Ok((settings, cfg))
}

/// Closed-form sweep over fiber lengths; no RNG involved.
pub fn model_sweep(lengths_spec: &str, args: &CommonArgs) -> Result<(), Failure> {
    let (settings, cfg) = load(args)?;
    let lengths = parse_lengths(lengths_spec).map_err(Failure::Config)?;
    let mut csv = String::from(csv_header());
    csv.push('\n');
    for l in &lengths {
        let row = runner::model_row(&cfg, *l).map_err(from_run_error)?;
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    match &settings.out {
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            eprintln!("wrote {} model rows to {}", lengths.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// One complete key exchange with both endpoints in this process.
pub fn simulate(args: &CommonArgs) -> Result<(), Failure> {
    let (settings, cfg) = load(args)?;
    let pair = runner::execute(&cfg).map_err(from_run_error)?;
    describe("initiator", &pair.alice);
    describe("responder", &pair.bob);

    // The responder owns the report row: the measured error rate exists
    // only on the side that ran the correction.
    let row = runner::report_row(&cfg, &pair.bob);
    let csv = format!("{}\n{}\n", csv_header(), row.csv_line());
    print!("{csv}");
    if let Some(out) = &settings.out {
        write_file(out, csv.as_bytes())?;
        write_key_file(out, "alice", &pair.alice)?;
        write_key_file(out, "bob", &pair.bob)?;
    }
    Ok(())
}

/// Initiator endpoint of a two-process session: binds, advertises the
/// port, and waits for the responder.
pub fn serve(args: &CommonArgs) -> Result<(), Failure> {
    let (settings, cfg) = load(args)?;
    let addr = tcp_addr(&cfg)?;
    let listener = TcpListener::bind(&addr)
        .map_err(|e| Failure::Infra(format!("cannot bind {addr}: {e}")))?;
    let local = listener
        .local_addr()
        .map_err(|e| Failure::Infra(format!("cannot resolve bound address: {e}")))?;
    println!("listening on {local}");
    std::io::stdout().flush().ok();

    let outcome = runner::serve_on(&cfg, &listener).map_err(from_run_error)?;
    describe("initiator", &outcome);
    if let Some(out) = &settings.out {
        write_key_file(out, "alice", &outcome)?;
    }
    Ok(())
}

/// Responder endpoint of a two-process session: dials the initiator and
/// writes the report row.
pub fn connect(args: &CommonArgs) -> Result<(), Failure> {
    let (settings, cfg) = load(args)?;
    let addr = tcp_addr(&cfg)?;
    let outcome = runner::connect_to(&cfg, &addr).map_err(from_run_error)?;
    describe("responder", &outcome);

    let row = runner::report_row(&cfg, &outcome);
    let csv = format!("{}\n{}\n", csv_header(), row.csv_line());
    print!("{csv}");
    if let Some(out) = &settings.out {
        write_file(out, csv.as_bytes())?;
        write_key_file(out, "bob", &outcome)?;
    }
    Ok(())
}

/// Closed-form security report for a configuration; no session is run.
pub fn analyze(args: &CommonArgs) -> Result<(), Failure> {
    let (_, cfg) = load(args)?;
    let p = &cfg.params;

    let range = match solve_max_range(p, QBER_ABORT_THRESHOLD) {
        Ok(r) => r,
        Err(e @ SecurityError::InsecureAtZero { .. }) => {
            return Err(Failure::Analysis(format!("insecure_at_zero: {e}")));
        }
        Err(e) => return Err(Failure::Analysis(e.to_string())),
    };
    let e_model = qber_model_extended(p);
    let v = verdict(e_model, p);

    println!(
        "configuration: length {} km, alpha {} dB/km, mu {}, eta_bob {}, e_mod {}",
        p.length_km, p.alpha_db_per_km, p.mu, p.eta_bob, p.e_mod
    );
    println!(
        "model: transmittance {:.6e}, visibility {:.4}, qber {:.4}, sifted {:.1} b/s",
        transmittance(p.alpha_db_per_km, p.length_km),
        visibility_model(p),
        e_model,
        sifted_rate_model(p)
    );
    match range {
        MaxRange::Finite(l) => println!("max_range_km: {l:.2}"),
        MaxRange::Unbounded => println!("max_range_km: unbounded"),
    }
    println!("pns_limit_km: {:.2}", v.pns_limit_km);
    println!("qber_ok: {}", v.qber_ok);
    println!("pns_ok: {}", v.pns_ok);
    println!("notes: {}", v.notes);
    Ok(())
}

/// The TCP address of a two-process run; the in-process transport has no
/// meaning for `serve`/`connect`.
fn tcp_addr(cfg: &RunConfig) -> Result<String, Failure> {
    match &cfg.transport {
        Transport::Tcp(addr) => Ok(addr.clone()),
        Transport::Inproc => Err(Failure::Config(
            "this subcommand needs --transport tcp:<host:port>".into(),
        )),
    }
}

fn describe(who: &str, outcome: &SessionOutcome) {
    match outcome {
        SessionOutcome::Established(k) => {
            eprintln!(
                "{who}: established a {}-bit key (session {:016x})",
                k.bits.len(),
                k.session_id
            );
        }
        SessionOutcome::Aborted { reason, report } => {
            let est = report
                .qber_estimate
                .map(|e| format!("{e:.4}"))
                .unwrap_or_else(|| "n/a".into());
            eprintln!(
                "{who}: session aborted ({}), sifted {} bits, qber estimate {est}",
                reason.label(),
                report.sifted_bits
            );
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes)
        .map_err(|e| Failure::Infra(format!("cannot write {}: {e}", path.display())))
}

/// Writes one endpoint's final key as lowercase hex; skipped (with a note)
/// when the session aborted and no key exists.
fn write_key_file(stem: &Path, who: &str, outcome: &SessionOutcome) -> Result<(), Failure> {
    let path = PathBuf::from(format!("{}.{who}.key", stem.display()));
    match outcome {
        SessionOutcome::Established(k) => {
            let mut text = k.bits.to_hex();
            text.push('\n');
            write_file(&path, text.as_bytes())
        }
        SessionOutcome::Aborted { .. } => {
            eprintln!("no {who} key file: the session did not produce a key");
            Ok(())
        }
    }
}

//! Run-configuration assembly: the as-built defaults, flat `key=value`
//! configuration files, and command-line flags, merged (flags win) into a
//! validated [`RunConfig`].

use std::fs;
use std::path::PathBuf;

use clap::Args;

use qkd_core::link::LinkParams;
use qkd_core::runner::{RunConfig, SimMode, Transport};
use qkd_core::sim::AttackConfig;

/// Flags shared by every subcommand. Every value is optional; whatever is
/// left unset falls back to the as-built 122 km configuration with a 120 s
/// budget, seed 1, aggregate simulation, and the in-process transport.
#[derive(Args, Clone, Default, Debug)]
pub struct CommonArgs {
    /// Flat `key=value` configuration file; flags override file entries.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Fiber length in km.
    #[arg(long)]
    pub length_km: Option<f64>,
    /// Fiber attenuation in dB/km.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Mean photon number per pulse at the source.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Receiver transmission-and-detection efficiency.
    #[arg(long)]
    pub eta_bob: Option<f64>,
    /// Spurious-count probability per clock cycle.
    #[arg(long)]
    pub pe: Option<f64>,
    /// Dark-count probability per clock cycle.
    #[arg(long)]
    pub dark: Option<f64>,
    /// Intrinsic modulation error rate.
    #[arg(long)]
    pub emod: Option<f64>,
    /// Pulse clock rate in Hz.
    #[arg(long)]
    pub clock_hz: Option<f64>,
    /// Run length in seconds, converted to cycles via the clock rate.
    #[arg(long, conflicts_with = "cycles")]
    pub duration_s: Option<f64>,
    /// Exact cycle budget (alternative to --duration-s).
    #[arg(long)]
    pub cycles: Option<u64>,
    /// RNG seed shared by both endpoints.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Simulation mode: `exact` or `aggregate`.
    #[arg(long)]
    pub sim_mode: Option<String>,
    /// Eavesdropper model: `none` or `intercept:<fraction>`.
    #[arg(long)]
    pub attack: Option<String>,
    /// Fraction of the sifted key disclosed for error estimation.
    #[arg(long)]
    pub sample_fraction: Option<f64>,
    /// Extra bits removed by privacy amplification.
    #[arg(long)]
    pub safety_bits: Option<u64>,
    /// Session transport: `inproc` or `tcp:<host:port>`.
    #[arg(long)]
    pub transport: Option<String>,
    /// Output stem: CSV report at this path, final keys at
    /// `<out>.alice.key` / `<out>.bob.key`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Merged option values from all sources, before defaults are applied.
#[derive(Default, Clone, Debug)]
pub struct Settings {
    pub length_km: Option<f64>,
    pub alpha: Option<f64>,
    pub mu: Option<f64>,
    pub eta_bob: Option<f64>,
    pub pe: Option<f64>,
    pub dark: Option<f64>,
    pub emod: Option<f64>,
    pub clock_hz: Option<f64>,
    pub duration_s: Option<f64>,
    pub cycles: Option<u64>,
    pub seed: Option<u64>,
    pub sim_mode: Option<String>,
    pub attack: Option<String>,
    pub sample_fraction: Option<f64>,
    pub safety_bits: Option<u64>,
    pub transport: Option<String>,
    pub out: Option<PathBuf>,
}

impl Settings {
    /// Reads the optional config file, then lays the flags on top.
    pub fn from_sources(args: &CommonArgs) -> Result<Settings, String> {
        let mut s = Settings::default();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
            s.apply_file(&text)?;
        }
        s.apply_flags(args);
        Ok(s)
    }

    fn apply_file(&mut self, text: &str) -> Result<(), String> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key=value, got {raw:?}", idx + 1))?;
            let key = key.trim().replace('-', "_");
            let value = value.trim();
            let fail = |e: String| format!("config line {}: {e}", idx + 1);
            match key.as_str() {
                "length_km" => self.length_km = Some(parse_f64(&key, value).map_err(fail)?),
                "alpha" => self.alpha = Some(parse_f64(&key, value).map_err(fail)?),
                "mu" => self.mu = Some(parse_f64(&key, value).map_err(fail)?),
                "eta_bob" => self.eta_bob = Some(parse_f64(&key, value).map_err(fail)?),
                "pe" => self.pe = Some(parse_f64(&key, value).map_err(fail)?),
                "dark" => self.dark = Some(parse_f64(&key, value).map_err(fail)?),
                "emod" => self.emod = Some(parse_f64(&key, value).map_err(fail)?),
                "clock_hz" => self.clock_hz = Some(parse_f64(&key, value).map_err(fail)?),
                "duration_s" => self.duration_s = Some(parse_f64(&key, value).map_err(fail)?),
                "cycles" => self.cycles = Some(parse_u64(&key, value).map_err(fail)?),
                "seed" => self.seed = Some(parse_u64(&key, value).map_err(fail)?),
                "sim_mode" => self.sim_mode = Some(value.to_string()),
                "attack" => self.attack = Some(value.to_string()),
                "sample_fraction" => {
                    self.sample_fraction = Some(parse_f64(&key, value).map_err(fail)?)
                }
                "safety_bits" => self.safety_bits = Some(parse_u64(&key, value).map_err(fail)?),
                "transport" => self.transport = Some(value.to_string()),
                "out" => self.out = Some(PathBuf::from(value)),
                other => return Err(format!("config line {}: unknown key {other:?}", idx + 1)),
            }
        }
        if self.duration_s.is_some() && self.cycles.is_some() {
            return Err("config file sets both cycles and duration-s".into());
        }
        Ok(())
    }

    fn apply_flags(&mut self, args: &CommonArgs) {
        // A budget flag replaces whichever budget the file chose.
        if args.duration_s.is_some() || args.cycles.is_some() {
            self.duration_s = args.duration_s;
            self.cycles = args.cycles;
        }
        macro_rules! lay {
            ($($field:ident),*) => {
                $(if let Some(v) = &args.$field { self.$field = Some(v.clone()); })*
            };
        }
        lay!(
            length_km, alpha, mu, eta_bob, pe, dark, emod, clock_hz, seed, sim_mode, attack,
            sample_fraction, safety_bits, transport, out
        );
    }

    /// Applies defaults and produces a validated run configuration.
    pub fn build(&self) -> Result<RunConfig, String> {
        let mut p = LinkParams::baseline_122km();
        if let Some(v) = self.length_km {
            p = p.at_length(v);
        }
        if let Some(v) = self.alpha {
            p.alpha_db_per_km = v;
        }
        if let Some(v) = self.mu {
            p.mu = v;
        }
        if let Some(v) = self.eta_bob {
            p.eta_bob = v;
        }
        if let Some(v) = self.pe {
            p.p_err_cycle = v;
        }
        if let Some(v) = self.dark {
            p.p_dark_cycle = v;
        }
        if let Some(v) = self.emod {
            p.e_mod = v;
        }
        if let Some(v) = self.clock_hz {
            p.clock_hz = v;
        }

        let mut cfg = RunConfig::new(p, self.seed.unwrap_or(1));
        match (self.cycles, self.duration_s) {
            (Some(_), Some(_)) => {
                return Err("set either cycles or duration-s, not both".into());
            }
            (Some(c), None) => {
                cfg.cycles = Some(c);
                cfg.duration_s = None;
            }
            (None, Some(d)) => cfg.duration_s = Some(d),
            (None, None) => {}
        }
        if let Some(m) = &self.sim_mode {
            cfg.sim_mode = parse_sim_mode(m)?;
        }
        if let Some(a) = &self.attack {
            cfg.attack = parse_attack(a)?;
        }
        if let Some(f) = self.sample_fraction {
            cfg.sample_fraction = f;
        }
        if let Some(b) = self.safety_bits {
            cfg.safety_bits = b;
        }
        if let Some(t) = &self.transport {
            cfg.transport = parse_transport(t)?;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, String> {
    value
        .parse::<f64>()
        .map_err(|_| format!("{key} wants a number, got {value:?}"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64, String> {
    value
        .parse::<u64>()
        .map_err(|_| format!("{key} wants a non-negative integer, got {value:?}"))
}

pub fn parse_sim_mode(s: &str) -> Result<SimMode, String> {
    match s {
        "exact" => Ok(SimMode::Exact),
        "aggregate" => Ok(SimMode::Aggregate),
        other => Err(format!("sim-mode must be exact or aggregate, got {other:?}")),
    }
}

pub fn parse_attack(s: &str) -> Result<AttackConfig, String> {
    if s == "none" {
        return Ok(AttackConfig::None);
    }
    if let Some(rest) = s.strip_prefix("intercept:") {
        let fraction = rest
            .parse::<f64>()
            .map_err(|_| format!("intercept fraction must be a number, got {rest:?}"))?;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(format!("intercept fraction must be in [0, 1], got {fraction}"));
        }
        return Ok(AttackConfig::InterceptResend { fraction });
    }
    Err(format!("attack must be none or intercept:<fraction>, got {s:?}"))
}

pub fn parse_transport(s: &str) -> Result<Transport, String> {
    if s == "inproc" {
        return Ok(Transport::Inproc);
    }
    if let Some(addr) = s.strip_prefix("tcp:") {
        if addr.is_empty() {
            return Err("tcp transport needs an address, e.g. tcp:127.0.0.1:4000".into());
        }
        return Ok(Transport::Tcp(addr.to_string()));
    }
    Err(format!("transport must be inproc or tcp:<host:port>, got {s:?}"))
}

/// Expands a `start:stop:step` span (km) into an ascending length list.
pub fn parse_lengths(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("lengths must be start:stop:step, got {spec:?}"));
    }
    let start = parse_f64("start", parts[0])?;
    let stop = parse_f64("stop", parts[1])?;
    let step = parse_f64("step", parts[2])?;
    if start < 0.0 {
        return Err(format!("lengths start at {start}, must be non-negative"));
    }
    if step <= 0.0 || !step.is_finite() {
        return Err(format!("length step must be positive, got {step}"));
    }
    let mut lengths = Vec::new();
    let mut i = 0u64;
    loop {
        let l = start + step * i as f64;
        if l > stop + 1e-9 {
            break;
        }
        lengths.push(l);
        i += 1;
    }
    if lengths.is_empty() {
        return Err(format!("length span {spec:?} produces no lengths"));
    }
    Ok(lengths)
}

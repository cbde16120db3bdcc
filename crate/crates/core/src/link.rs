//! Closed-form performance model of a phase-encoded BB84 fiber link.
//!
//! A weak coherent pulse with mean photon number `mu` is launched into a fiber
//! with attenuation `alpha` dB/km; the receiver detects with overall
//! efficiency `eta_bob` inside a gated window, and a basis-independent error
//! floor `p_err_cycle` per clock cycle (dark counts plus stray light) competes
//! with the signal. Everything here is deterministic arithmetic; the
//! stochastic counterpart lives in [`crate::sim`].

use thiserror::Error;

/// Planck constant (J·s).
pub const PLANCK_J_S: f64 = 6.626_070_15e-34;
/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("invalid link parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: &'static str },
    #[error("visibility {0} outside [0, 1]")]
    VisibilityRange(f64),
}

/// Physical parameters of one link configuration.
///
/// `p_err_cycle` is the total per-cycle probability of a spurious count inside
/// the detection gate; `p_dark_cycle` is the detector-dark-count part of it
/// (`p_dark_cycle <= p_err_cycle`, the remainder being stray light such as
/// Rayleigh backscatter of a bright reference pulse). `e_mod` is the baseline
/// misalignment error probability of the interferometer and modulators.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkParams {
    /// Mean photon number per pulse leaving Alice (reference + encoded).
    pub mu: f64,
    /// Fiber attenuation in dB/km.
    pub alpha_db_per_km: f64,
    /// Fiber length in km.
    pub length_km: f64,
    /// Receiver detection efficiency (coupling x detector), in [0, 1].
    pub eta_bob: f64,
    /// Total spurious-count probability per clock cycle.
    pub p_err_cycle: f64,
    /// Dark-count-only part of `p_err_cycle`.
    pub p_dark_cycle: f64,
    /// Clock rate in Hz.
    pub clock_hz: f64,
    /// Detection gate width in ns (metadata; the per-cycle error floor
    /// already folds the gate in).
    pub gate_ns: f64,
    /// Intrinsic modulation/alignment error probability, in [0, 0.5).
    pub e_mod: f64,
}

impl LinkParams {
    /// Intensity ratio of the unmodulated reference pulse to the encoded
    /// pulse. The closed-form model uses the total `mu`; the split is kept as
    /// metadata for the multiphoton analysis of the encoded pulse alone.
    pub const REF_TO_ENCODED_RATIO: f64 = 1.6;

    /// Validates all parameter ranges.
    pub fn validate(&self) -> Result<(), LinkError> {
        fn check(cond: bool, name: &'static str, reason: &'static str) -> Result<(), LinkError> {
            if cond {
                Ok(())
            } else {
                Err(LinkError::InvalidParam { name, reason })
            }
        }
        check(self.mu.is_finite() && self.mu >= 0.0, "mu", "must be finite and >= 0")?;
        check(
            self.alpha_db_per_km.is_finite() && self.alpha_db_per_km >= 0.0,
            "alpha_db_per_km",
            "must be finite and >= 0",
        )?;
        check(
            self.length_km.is_finite() && self.length_km >= 0.0,
            "length_km",
            "must be finite and >= 0",
        )?;
        check((0.0..=1.0).contains(&self.eta_bob), "eta_bob", "must be in [0, 1]")?;
        check(
            (0.0..1.0).contains(&self.p_err_cycle),
            "p_err_cycle",
            "must be in [0, 1)",
        )?;
        check(
            self.p_dark_cycle >= 0.0 && self.p_dark_cycle <= self.p_err_cycle,
            "p_dark_cycle",
            "must be in [0, p_err_cycle]",
        )?;
        check(self.clock_hz.is_finite() && self.clock_hz > 0.0, "clock_hz", "must be > 0")?;
        check(self.gate_ns.is_finite() && self.gate_ns >= 0.0, "gate_ns", "must be >= 0")?;
        check((0.0..0.5).contains(&self.e_mod), "e_mod", "must be in [0, 0.5)")?;
        Ok(())
    }

    /// Mean photon number of the encoded pulse alone, given the fixed
    /// reference-to-encoded intensity split.
    pub fn mu_encoded(&self) -> f64 {
        self.mu / (1.0 + Self::REF_TO_ENCODED_RATIO)
    }

    /// As-built 122 km configuration: measured fiber loss 0.21 dB/km,
    /// combined stray-light + dark-count floor 8.5e-7 per cycle, 3.3%
    /// intrinsic error.
    pub fn baseline_122km() -> Self {
        LinkParams {
            mu: 0.1,
            alpha_db_per_km: 0.21,
            length_km: 122.0,
            eta_bob: 0.045,
            p_err_cycle: 8.5e-7,
            p_dark_cycle: 3.2e-7,
            clock_hz: 2.0e6,
            gate_ns: 3.5,
            e_mod: 0.033,
        }
    }

    /// Improved-component scenario: nominal 0.2 dB/km fiber, noise floor
    /// reduced to dark counts only, and no intrinsic modulation error.
    pub fn improved() -> Self {
        LinkParams {
            alpha_db_per_km: 0.2,
            p_err_cycle: 3.2e-7,
            e_mod: 0.0,
            ..Self::baseline_122km()
        }
    }

    /// Same parameters at a different fiber length.
    pub fn at_length(&self, length_km: f64) -> Self {
        LinkParams { length_km, ..self.clone() }
    }
}

/// Fractional power transmittance of `length_km` of fiber:
/// `T = 10^(-alpha * L / 10)`.
pub fn transmittance(alpha_db_per_km: f64, length_km: f64) -> f64 {
    10f64.powf(-alpha_db_per_km * length_km / 10.0)
}

/// Probability per clock cycle that a signal photon is detected:
/// `R = mu * T * eta_bob`.
pub fn signal_rate_per_cycle(p: &LinkParams) -> f64 {
    p.mu * transmittance(p.alpha_db_per_km, p.length_km) * p.eta_bob
}

/// Interference visibility limited by the spurious-count floor:
/// `V = R / (R + 2 * P_e)`.
pub fn visibility_model(p: &LinkParams) -> f64 {
    let r = signal_rate_per_cycle(p);
    let denom = r + 2.0 * p.p_err_cycle;
    if denom == 0.0 {
        0.0
    } else {
        r / denom
    }
}

/// QBER from spurious counts alone:
/// `e = (0.5 * P_e) / (0.5 * R + P_e)`.
///
/// Algebraically identical to `(1 - V) / 2` with `V` from
/// [`visibility_model`].
pub fn qber_model(p: &LinkParams) -> f64 {
    let r = signal_rate_per_cycle(p);
    let denom = 0.5 * r + p.p_err_cycle;
    if denom == 0.0 {
        0.0
    } else {
        0.5 * p.p_err_cycle / denom
    }
}

/// QBER including the intrinsic modulation error:
/// `e = (e_mod * 0.5 * R + 0.5 * P_e) / (0.5 * R + P_e)`.
pub fn qber_model_extended(p: &LinkParams) -> f64 {
    let r = signal_rate_per_cycle(p);
    let denom = 0.5 * r + p.p_err_cycle;
    if denom == 0.0 {
        p.e_mod
    } else {
        (p.e_mod * 0.5 * r + 0.5 * p.p_err_cycle) / denom
    }
}

/// Expected sifted-bit rate in bits/s: `clock * (0.5 * R + P_e)`.
///
/// Half the signal detections survive the basis comparison; spurious counts
/// are basis-independent and all enter the sifted key under the accounting
/// convention used throughout this crate (see
/// [`crate::sim::NoiseSifting`]).
pub fn sifted_rate_model(p: &LinkParams) -> f64 {
    p.clock_hz * (0.5 * signal_rate_per_cycle(p) + p.p_err_cycle)
}

/// Converts an interference visibility to the QBER it implies:
/// `e = (1 - V) / 2`.
pub fn visibility_to_qber(v: f64) -> Result<f64, LinkError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(LinkError::VisibilityRange(v));
    }
    Ok((1.0 - v) / 2.0)
}

/// Noise-equivalent power of a photon-counting detector:
/// `NEP = (h * c / (lambda * eta)) * sqrt(2 * D)`
/// with dark-count rate `D` in counts/s and wavelength `lambda` in meters.
pub fn nep(eta_detector: f64, dark_rate_hz: f64, wavelength_m: f64) -> f64 {
    (PLANCK_J_S * SPEED_OF_LIGHT_M_S / (wavelength_m * eta_detector))
        * (2.0 * dark_rate_hz).sqrt()
}

//! Drive envelopes with derivative-quadrature (DRAG) correction, the
//! two-tone charge-drive Hamiltonian, relative drive phases, and coupler
//! flux-ramp trajectories.
//!
//! Conventions: envelopes and carrier frequencies are linear frequencies in
//! GHz, times in ns; carrier phases are radians. An envelope's complex value
//! is `A(t) + i·α·Ȧ(t)/(2π·δ'_Min)` — the 2π converts the reference detuning
//! to angular units so the quadrature has the amplitude's units. The cosine
//! shape peaks at `2·Ω_d` (the formula is implemented verbatim; treat `Ω_d`
//! as a scale parameter there, not the literal peak). The gaussian width is
//! fixed at `σ = t_g/2`, unusually wide but implemented as specified.

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg::c64;
use crate::spectrum::DressedSystem;

use std::f64::consts::{PI, TAU};

/// Envelope family of a drive pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PulseShape {
    /// `A(t) = Ω_d·(1 − cos(2πt/t_g))`: vanishes at both ends, peaks at
    /// `2·Ω_d` mid-pulse.
    Cosine,
    /// Offset-subtracted gaussian with `σ = t_g/2`, normalized to peak `Ω_d`
    /// and exact zeros at both ends.
    Gaussian,
    /// Cosine-ramped flat top: rises over `t_r`, holds `Ω_d`, falls over
    /// `t_r`.
    FlatTopCosine,
}

/// A microwave charge-drive definition shared by all driven sites.
///
/// `phases[k]` is the carrier phase of the k-th *driven site in list order*
/// when the pulse is applied through [`drive_hamiltonian`].
#[derive(Debug, Clone, PartialEq)]
pub struct DrivePulse {
    pub shape: PulseShape,
    /// Peak amplitude parameter Ω_d, GHz.
    pub omega_d_amp: f64,
    /// Carrier frequency ω_d, GHz.
    pub omega_drive: f64,
    /// Gate length, ns.
    pub t_g: f64,
    /// Ramp time (flat-top only), ns.
    pub t_r: f64,
    /// Gaussian width, ns (`t_g/2` per the envelope definition).
    pub sigma: f64,
    /// DRAG coefficient α; 0 disables the quadrature.
    pub drag_alpha: f64,
    /// DRAG reference detuning, GHz. Sign convention: drive frequency minus
    /// the spurious transition to be suppressed (positive when the spurious
    /// line lies below the carrier); the opposite sign *enhances* the
    /// spurious excitation instead.
    pub drag_detuning: f64,
    /// Carrier phase per driven site, radians, in drive-list order.
    pub phases: Vec<f64>,
}

impl DrivePulse {
    /// A single-site pulse with DRAG off and zero carrier phase.
    pub fn new(shape: PulseShape, omega_d_amp: f64, omega_drive: f64, t_g: f64) -> Self {
        Self {
            shape,
            omega_d_amp,
            omega_drive,
            t_g,
            t_r: 0.0,
            sigma: t_g / 2.0,
            drag_alpha: 0.0,
            drag_detuning: 0.0,
            phases: vec![0.0],
        }
    }

    /// Set the flat-top ramp time.
    pub fn with_ramp(mut self, t_r: f64) -> Self {
        self.t_r = t_r;
        self
    }

    /// Enable the DRAG quadrature at the default coefficient α = 1, with the
    /// given reference detuning (GHz, drive minus spurious — see
    /// [`DrivePulse::drag_detuning`]).
    pub fn with_drag(self, drag_detuning: f64) -> Self {
        self.with_drag_alpha(1.0, drag_detuning)
    }

    /// Enable the DRAG quadrature at an explicit coefficient.
    pub fn with_drag_alpha(mut self, alpha: f64, drag_detuning: f64) -> Self {
        self.drag_alpha = alpha;
        self.drag_detuning = drag_detuning;
        self
    }

    /// Set the per-driven-site carrier phases.
    pub fn with_phases(mut self, phases: Vec<f64>) -> Self {
        self.phases = phases;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_g > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "gate length must be positive, got {} ns",
                self.t_g
            )));
        }
        if self.shape == PulseShape::FlatTopCosine {
            if self.t_r < 0.0 {
                return Err(Error::InvalidSpec("ramp time must be ≥ 0".into()));
            }
            if 2.0 * self.t_r > self.t_g {
                return Err(Error::InvalidSpec(format!(
                    "flat-top requires 2·t_r ≤ t_g, got t_r = {} ns, t_g = {} ns",
                    self.t_r, self.t_g
                )));
            }
        }
        if self.shape == PulseShape::Gaussian && !(self.sigma > 0.0) {
            return Err(Error::InvalidSpec("gaussian width must be positive".into()));
        }
        if self.drag_alpha != 0.0 && self.drag_detuning == 0.0 {
            return Err(Error::InvalidSpec(
                "DRAG requires a nonzero reference detuning".into(),
            ));
        }
        if self.phases.is_empty() {
            return Err(Error::InvalidSpec(
                "pulse must carry at least one carrier phase".into(),
            ));
        }
        Ok(())
    }

    /// Real envelope `A(t)` and its analytic time derivative `Ȧ(t)`.
    fn envelope_and_derivative(&self, t: f64) -> (f64, f64) {
        let om = self.omega_d_amp;
        match self.shape {
            PulseShape::Cosine => {
                let w = TAU / self.t_g;
                (om * (1.0 - (w * t).cos()), om * w * (w * t).sin())
            }
            PulseShape::Gaussian => {
                let c = self.t_g / 2.0;
                let s2 = self.sigma * self.sigma;
                let offset = (-(c * c) / (2.0 * s2)).exp();
                let norm = 1.0 - offset;
                let core = (-((t - c) * (t - c)) / (2.0 * s2)).exp();
                (
                    om * (core - offset) / norm,
                    om * core * (-(t - c) / s2) / norm,
                )
            }
            PulseShape::FlatTopCosine => {
                if self.t_r == 0.0 {
                    return (om, 0.0);
                }
                let w = PI / self.t_r;
                if t < self.t_r {
                    (
                        om * 0.5 * (1.0 - (w * t).cos()),
                        om * 0.5 * w * (w * t).sin(),
                    )
                } else if t <= self.t_g - self.t_r {
                    (om, 0.0)
                } else {
                    let u = self.t_g - t;
                    (
                        om * 0.5 * (1.0 - (w * u).cos()),
                        -om * 0.5 * w * (w * u).sin(),
                    )
                }
            }
        }
    }
}

impl DrivePulse {
    /// Envelope pair `(A, A_quad)` without validation or window checks, for
    /// hot propagation loops that validated the pulse up front. Times are
    /// clamped into `[0, t_g]` so node arithmetic at segment edges stays
    /// safe.
    pub(crate) fn quadrature_pair(&self, t: f64) -> (f64, f64) {
        let t = t.clamp(0.0, self.t_g);
        let (a, da) = self.envelope_and_derivative(t);
        let im = if self.drag_alpha == 0.0 {
            0.0
        } else {
            self.drag_alpha * da / (TAU * self.drag_detuning)
        };
        (a, im)
    }
}

/// Complex envelope at time `t`: real part is the shape formula, imaginary
/// part the DRAG quadrature `α·Ȧ/(2π·δ'_Min)`.
pub fn envelope(pulse: &DrivePulse, t: f64) -> Result<c64> {
    pulse.validate()?;
    if !(0.0..=pulse.t_g).contains(&t) {
        return Err(Error::InvalidSpec(format!(
            "envelope time {t} ns outside [0, {}]",
            pulse.t_g
        )));
    }
    let (a, da) = pulse.envelope_and_derivative(t);
    let im = if pulse.drag_alpha == 0.0 {
        0.0
    } else {
        pulse.drag_alpha * da / (TAU * pulse.drag_detuning)
    };
    Ok(c64::new(a, im))
}

/// Integral of the real envelope over the full pulse, GHz·ns (analytic).
///
/// A resonant transition with dressed charge element magnitude `|m|`
/// completes one full Rabi cycle (angular area 2π) when
/// `pulse_area · |m| = 1`.
pub fn pulse_area(pulse: &DrivePulse) -> Result<f64> {
    pulse.validate()?;
    let om = pulse.omega_d_amp;
    Ok(match pulse.shape {
        PulseShape::Cosine => om * pulse.t_g,
        PulseShape::FlatTopCosine => om * (pulse.t_g - pulse.t_r),
        PulseShape::Gaussian => {
            let c = pulse.t_g / 2.0;
            let s = pulse.sigma;
            let offset = (-(c * c) / (2.0 * s * s)).exp();
            let norm = 1.0 - offset;
            // ∫₀^{t_g} e^{−(t−c)²/2σ²} dt = σ√(2π)·erf(c/(σ√2))
            let gauss_int = s * (TAU).sqrt() * libm::erf(c / (s * std::f64::consts::SQRT_2));
            om * (gauss_int - pulse.t_g * offset) / norm
        }
    })
}

/// Check that simultaneously applied pulses share carrier and envelope (only
/// phases may differ).
pub(crate) fn check_shared_drive(pulses: &[(usize, &DrivePulse)]) -> Result<()> {
    let Some((_, first)) = pulses.first() else {
        return Ok(());
    };
    for (_, p) in pulses {
        p.validate()?;
        if p.omega_drive != first.omega_drive {
            return Err(Error::InvalidSpec(format!(
                "simultaneous drives must share the carrier frequency, got {} and {} GHz",
                first.omega_drive, p.omega_drive
            )));
        }
        let same_env = p.shape == first.shape
            && p.omega_d_amp == first.omega_d_amp
            && p.t_g == first.t_g
            && p.t_r == first.t_r
            && p.sigma == first.sigma
            && p.drag_alpha == first.drag_alpha
            && p.drag_detuning == first.drag_detuning;
        if !same_env {
            return Err(Error::InvalidSpec(
                "simultaneous drives must share the envelope (amplitude, shape, timing, DRAG); \
                 only phases may differ"
                    .into(),
            ));
        }
    }
    Ok(())
}

/// Real drive coefficient of the k-th listed drive at time `t`:
/// `Re A(t)·cos(2π·ω_d·t + φ_k) + Im A(t)·sin(2π·ω_d·t + φ_k)` — the DRAG
/// quadrature rides on the shifted carrier.
pub fn drive_coefficient(pulse: &DrivePulse, k: usize, t: f64) -> Result<f64> {
    let a = envelope(pulse, t)?;
    let phase = *pulse.phases.get(k).ok_or_else(|| {
        Error::InvalidSpec(format!(
            "pulse carries {} phases but drive position {k} was requested",
            pulse.phases.len()
        ))
    })?;
    let th = TAU * pulse.omega_drive * t + phase;
    Ok(a.re * th.cos() + a.im * th.sin())
}

/// Assemble the drive Hamiltonian `H_d(t) = Σ_k A_k(t)·cos(ω_d t + φ_k)·n̂_k`
/// at time `t`, with the DRAG quadrature on the sine carrier.
///
/// `pulses` lists `(site, pulse)` pairs; the k-th listed pair uses
/// `pulse.phases[k]`. `charge_ops` maps each listed site to its embedded
/// charge operator `n̂_site` (complex Hermitian, matching dimensions).
pub fn drive_hamiltonian(
    t: f64,
    pulses: &[(usize, &DrivePulse)],
    charge_ops: &[(usize, &Mat<c64>)],
) -> Result<Mat<c64>> {
    check_shared_drive(pulses)?;
    let dim = charge_ops
        .first()
        .map(|(_, m)| m.nrows())
        .ok_or_else(|| Error::InvalidSpec("no charge operators supplied".into()))?;
    let mut h = Mat::<c64>::zeros(dim, dim);
    for (k, (site, pulse)) in pulses.iter().enumerate() {
        let coeff = drive_coefficient(pulse, k, t)?;
        let op = charge_ops
            .iter()
            .find(|(s, _)| s == site)
            .map(|(_, m)| *m)
            .ok_or_else(|| {
                Error::InvalidSpec(format!("no charge operator supplied for site {site}"))
            })?;
        if op.nrows() != dim || op.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "charge operator for site {site} is {}×{}, expected {dim}×{dim}",
                op.nrows(),
                op.ncols()
            )));
        }
        for i in 0..dim {
            for j in 0..dim {
                h[(i, j)] += c64::new(coeff, 0.0) * op[(i, j)];
            }
        }
    }
    Ok(h)
}

/// Relative carrier phase maximizing constructive interference of two
/// single-site drives at a target dressed transition:
/// `φ_1 = arg⟨to|n̂_a|from⟩ − arg⟨to|n̂_b|from⟩`.
///
/// In the crate's fixed gauge both elements are purely imaginary with real
/// signed parts, so the result is 0 (aligned) or π (anti-aligned). Errors if
/// either element vanishes (no interference to arrange).
pub fn relative_drive_phase(
    ds: &DressedSystem,
    from: &[usize],
    to: &[usize],
    sites: (usize, usize),
) -> Result<f64> {
    let ra = ds.charge_element(sites.0, from, to)?;
    let rb = ds.charge_element(sites.1, from, to)?;
    let scale = ra.abs().max(rb.abs());
    let floor = 1e-10 * scale.max(1e-30);
    if ra.abs() <= floor || rb.abs() <= floor || scale == 0.0 {
        return Err(Error::InvalidSpec(format!(
            "drive matrix element vanishes on a site ({ra:.3e}, {rb:.3e}): \
             cannot set a relative phase"
        )));
    }
    // arg(i·r) = +π/2 for r > 0, −π/2 for r < 0.
    Ok(if ra.signum() == rb.signum() { 0.0 } else { PI })
}

/// Coupler flux-bias trajectory: cosine rise from the idle to the
/// interaction bias over `ramp_time`, a hold, and a mirrored cosine fall.
/// Continuous with continuous first derivative at the joints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxRamp {
    /// Idle-point bias, radians (typically ≈ 0).
    pub idle_bias: f64,
    /// Interaction-point bias, radians.
    pub interaction_bias: f64,
    /// Rise/fall time, ns.
    pub ramp_time: f64,
    /// Plateau duration at the interaction bias, ns.
    pub hold_time: f64,
}

impl FluxRamp {
    pub fn new(idle_bias: f64, interaction_bias: f64, ramp_time: f64, hold_time: f64) -> Self {
        Self {
            idle_bias,
            interaction_bias,
            ramp_time,
            hold_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ramp_time < 0.0 {
            return Err(Error::InvalidSpec("ramp time must be ≥ 0".into()));
        }
        if self.hold_time < 0.0 {
            return Err(Error::InvalidSpec("hold time must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Total trajectory duration `2·ramp_time + hold_time`, ns.
    pub fn total_duration(&self) -> f64 {
        2.0 * self.ramp_time + self.hold_time
    }
}

/// Flux bias (radians) along a ramp trajectory at time `t ∈ [0, total]`.
///
/// With `ramp_time = 0` the profile degenerates to a step that sits at the
/// interaction bias for the whole (hold-long) window.
pub fn flux_bias_at(ramp: &FluxRamp, t: f64) -> Result<f64> {
    ramp.validate()?;
    let total = ramp.total_duration();
    if !(0.0..=total).contains(&t) {
        return Err(Error::InvalidSpec(format!(
            "ramp time {t} ns outside [0, {total}]"
        )));
    }
    let tr = ramp.ramp_time;
    let span = ramp.interaction_bias - ramp.idle_bias;
    if tr == 0.0 {
        return Ok(ramp.interaction_bias);
    }
    Ok(if t < tr {
        ramp.idle_bias + span * 0.5 * (1.0 - (PI * t / tr).cos())
    } else if t <= tr + ramp.hold_time {
        ramp.interaction_bias
    } else {
        let u = total - t;
        ramp.idle_bias + span * 0.5 * (1.0 - (PI * u / tr).cos())
    })
}

//! Simulation and calibration toolkit for star-coupled fluxonium processors
//! with flux-tunable transmon couplers.
//!
//! The crate models a central fluxonium charge-coupled to up to four neighbor
//! fluxoniums, each through its own transmon coupler plus a weak direct
//! coupling. It provides:
//!
//! - exact diagonalization of the individual circuits and of the assembled
//!   star system ([`circuit`]),
//! - dressed-state labeling, neighbor-state-dependent plasmon shifts, and
//!   transition tables used to pick gate operating points ([`spectrum`]),
//! - closed-form effective models (dispersive shifts, mediated couplings)
//!   cross-validated against the full numerics ([`effective`]),
//! - pulse envelopes with quadrature (derivative) correction and flux ramps
//!   ([`pulses`]),
//! - time-domain propagation of the driven system with a 4th-order
//!   commutator-free integrator, including a fast path for periodic flat-top
//!   plateaus ([`dynamics`]),
//! - gate metrics: average fidelity, leakage, conditional phases, and
//!   phase-table decomposition ([`metrics`]),
//! - derivative-free tune-up of drive amplitude and frequency, and
//!   error-vs-duration sweeps ([`calibrate`]).
//!
//! All energies and frequencies are stored as *linear* frequencies in GHz;
//! times are in ns. The single 2π conversion happens inside the propagator.
//! Charge operators are kept in a gauge where every n̂ is purely imaginary
//! and antisymmetric, which makes all static Hamiltonians real symmetric.

pub mod calibrate;
pub mod circuit;
pub mod dynamics;
pub mod effective;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod presets;
pub mod pulses;
pub mod spectrum;

pub use error::{Error, Result};

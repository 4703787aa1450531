//! Bundled parameters of the reference five-fluxonium device: one central
//! qubit (index 0) star-coupled to four neighbors through flux-tunable
//! transmon couplers, plus the coupler interaction biases at which the
//! multi-controlled-Z operating points were chosen.
//!
//! All energies in GHz, biases as φ_ext/2π.

use crate::circuit::{FluxoniumSpec, StarSystem, TransmonCouplerSpec};
use crate::error::{Error, Result};

/// (E_C, E_L, E_J) of the device fluxoniums Q0..Q4.
pub const FLUXONIUM_PARAMS: [(f64, f64, f64); 5] = [
    (1.41, 0.80, 6.27),
    (1.30, 0.59, 5.71),
    (1.33, 0.60, 5.40),
    (1.35, 0.63, 5.60),
    (1.35, 0.70, 5.60),
];

/// Coupler charging energy, GHz.
pub const COUPLER_E_C: f64 = 0.32;
/// Coupler Josephson energy at zero bias, GHz.
pub const COUPLER_E_J: f64 = 55.0;

/// Central-fluxonium ↔ coupler coupling, GHz.
pub const J_C0: f64 = 0.500;
/// Neighbor ↔ coupler coupling, GHz.
pub const J_CJ: f64 = 0.500;
/// Direct central ↔ neighbor coupling, GHz.
pub const J_0J: f64 = 0.125;

/// Coupler interaction biases (φ_ext/2π), one list per neighbor count.
/// Entry `k` of each list biases the coupler between Q0 and Q_{k+1}.
pub fn interaction_biases(n_neighbors: usize) -> Result<Vec<f64>> {
    match n_neighbors {
        1 => Ok(vec![0.413]),
        2 => Ok(vec![0.413, 0.420]),
        3 => Ok(vec![0.403, 0.420, 0.410]),
        4 => Ok(vec![0.395, 0.419, 0.413, 0.411]),
        _ => Err(Error::InvalidSpec(format!(
            "no interaction-bias preset for {n_neighbors} neighbors"
        ))),
    }
}

/// Fluxonium spec for device qubit `index` (0 = central), at its flux sweet
/// spot with the default 4-level truncation.
pub fn fluxonium(index: usize) -> FluxoniumSpec {
    let (e_c, e_l, e_j) = FLUXONIUM_PARAMS[index];
    FluxoniumSpec::new(e_c, e_l, e_j)
}

/// Device coupler at the given bias (φ_ext/2π), 3-level truncation.
pub fn coupler(bias: f64) -> TransmonCouplerSpec {
    TransmonCouplerSpec::at_bias(COUPLER_E_C, COUPLER_E_J, bias)
}

/// Star system with `n_neighbors` neighbors (Q1..Q_{n}) at the preset
/// interaction biases and device couplings.
pub fn star(n_neighbors: usize) -> Result<StarSystem> {
    let biases = interaction_biases(n_neighbors)?;
    star_at_biases(n_neighbors, &biases)
}

/// Star system with explicit coupler biases (φ_ext/2π, one per neighbor).
pub fn star_at_biases(n_neighbors: usize, biases: &[f64]) -> Result<StarSystem> {
    if biases.len() != n_neighbors {
        return Err(Error::InvalidSpec(format!(
            "expected {n_neighbors} biases, got {}",
            biases.len()
        )));
    }
    let system = StarSystem {
        central: fluxonium(0),
        neighbors: (1..=n_neighbors).map(fluxonium).collect(),
        couplers: biases.iter().map(|&b| coupler(b)).collect(),
        j_c0: vec![J_C0; n_neighbors],
        j_cj: vec![J_CJ; n_neighbors],
        j_0j: vec![J_0J; n_neighbors],
        coupler_treatment: Default::default(),
        fluxonium_basis: crate::circuit::DEFAULT_FLUXONIUM_BASIS,
    };
    system.validate()?;
    Ok(system)
}

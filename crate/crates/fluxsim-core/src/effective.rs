//! Closed-form effective models: plasmon–coupler couplings, the
//! coupler-mediated plasmon–plasmon coupling, dispersive shifts, and the
//! block-diagonal rotating-frame gate model.
//!
//! These are fast perturbative estimates meant to be cross-validated against
//! the full diagonalization in [`crate::spectrum`]. At the gate operating
//! points the device sits far outside the dispersive regime, so the effective
//! numbers there are indicative only; the full-model results are
//! authoritative. Two caveats worth knowing when interpreting the estimates:
//!
//! - The mediated and direct contributions to [`effective_g01`] carry
//!   opposite signs on typical parameters. When they nearly cancel, the
//!   dispersive shift `χ = g01²/Δ01` becomes hypersensitive to the
//!   higher-order terms both expressions neglect, and relative agreement with
//!   the full model degrades even though every individual `g/Δ` ratio is
//!   small.
//! - Plasmon frequencies entering the model are the *bare* fluxonium
//!   `E₂ − E₁` splittings; renormalization from the plasmon–coupler coupling
//!   is deliberately omitted.
//!
//! Gauge: fluxonium charge operators are phase-fixed so that the `|1⟩↔|2⟩`
//! matrix element magnitude `⟨1|n̂|2⟩` is real positive, making all coupling
//! signs reproducible.

use faer::Mat;

use crate::circuit::{coupler_oscillator, diagonalize_fluxonium, FluxoniumSpec, StarSystem};
use crate::error::{Error, Result};
use crate::spectrum::{NeighborConfig, TransitionTable};

/// Couplings of one coupler branch projected onto the `|1⟩↔|2⟩` (plasmon)
/// transitions of the two fluxoniums it connects, in GHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlasmonCouplings {
    /// Central-fluxonium ↔ coupler: `J_c0 · n_zpf · ⟨1|n̂_0|2⟩`.
    pub g12_0: f64,
    /// Neighbor-fluxonium ↔ coupler: `J_cj · n_zpf · ⟨1|n̂_j|2⟩`.
    pub g12_j: f64,
    /// Direct central ↔ neighbor: `J_0j · ⟨1|n̂_0|2⟩ · ⟨1|n̂_j|2⟩`.
    pub g12_0j: f64,
}

/// Reduced star model on the plasmon manifold: bare plasmon frequencies,
/// per-branch effective couplings, and per-branch dispersive shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveStarModel {
    /// Bare plasmon (`E₂ − E₁`) frequencies, GHz; central first, then the
    /// neighbors in order (length N+1).
    pub omega12: Vec<f64>,
    /// Closed-form coupler mode frequencies per branch, GHz (length N).
    pub omega_c: Vec<f64>,
    /// Effective central↔neighbor plasmon coupling per branch, GHz (length N).
    pub g0j: Vec<f64>,
    /// Dispersive shift `χ_j = g0j²/Δ0j` per branch, GHz (length N), with
    /// `Δ0j = omega12[0] − omega12[j+1]`.
    pub chi: Vec<f64>,
}

/// Plasmon matrix element and plasmon frequency of one fluxonium:
/// `(⟨1|n̂|2⟩, E₂ − E₁)` in the fixed gauge (element real positive).
fn plasmon_element(spec: &FluxoniumSpec, basis_size: usize) -> Result<(f64, f64)> {
    let modes = diagonalize_fluxonium(spec, basis_size)?;
    Ok((modes.n_imag[(1, 2)], modes.energies[2] - modes.energies[1]))
}

/// Plasmon-transition couplings for coupler branch `j` of a star system.
///
/// Uses the closed-form oscillator `n_zpf` for the coupler regardless of the
/// system's coupler treatment: the effective model is defined with respect to
/// the anharmonic-oscillator expansion.
pub fn plasmon_couplings(system: &StarSystem, j: usize) -> Result<PlasmonCouplings> {
    if j >= system.n_neighbors() {
        return Err(Error::InvalidSpec(format!(
            "coupler branch index {j} out of range for {} neighbors",
            system.n_neighbors()
        )));
    }
    let n_zpf = coupler_oscillator(&system.couplers[j])?.derived.n_zpf;
    let (m0, _) = plasmon_element(&system.central, system.fluxonium_basis)?;
    let (mj, _) = plasmon_element(&system.neighbors[j], system.fluxonium_basis)?;
    Ok(PlasmonCouplings {
        g12_0: system.j_c0[j] * n_zpf * m0,
        g12_j: system.j_cj[j] * n_zpf * mj,
        g12_0j: system.j_0j[j] * m0 * mj,
    })
}

/// Effective plasmon–plasmon coupling of one branch after second-order
/// elimination of the coupler:
///
/// `g01 = g12_0j + (g12_0·g12_j/2)·Σ_k (1/Δ12_k − 1/S12_k)` with
/// `Δ12_k = ω_k − ω_c`, `S12_k = ω_k + ω_c`, `k ∈ {0, j}`.
///
/// The dispersive regime is not enforced: callers may evaluate anywhere
/// except exactly on a pole, but outside `|g12_k/Δ12_k| ≪ 1` the result is
/// only indicative.
pub fn effective_g01(
    pc: &PlasmonCouplings,
    omega12_0: f64,
    omega12_1: f64,
    omega_c: f64,
) -> Result<f64> {
    let mut sum = 0.0;
    for w in [omega12_0, omega12_1] {
        let delta = w - omega_c;
        if delta == 0.0 {
            return Err(Error::InvalidSpec(
                "plasmon frequency equals the coupler frequency: mediated coupling has a pole"
                    .into(),
            ));
        }
        sum += 1.0 / delta - 1.0 / (w + omega_c);
    }
    Ok(pc.g12_0j + 0.5 * pc.g12_0 * pc.g12_j * sum)
}

/// Dispersive shift `g01²/Δ01`, signed; errors on zero detuning.
pub fn dispersive_chi(g01: f64, delta01: f64) -> Result<f64> {
    if delta01 == 0.0 {
        return Err(Error::InvalidSpec(
            "zero plasmon-plasmon detuning in dispersive shift".into(),
        ));
    }
    Ok(g01 * g01 / delta01)
}

/// Build the reduced plasmon-manifold model for a whole star system.
pub fn effective_star_model(system: &StarSystem) -> Result<EffectiveStarModel> {
    system.validate()?;
    let n = system.n_neighbors();
    let (m0, w0) = plasmon_element(&system.central, system.fluxonium_basis)?;
    let mut omega12 = Vec::with_capacity(n + 1);
    omega12.push(w0);
    let mut omega_c = Vec::with_capacity(n);
    let mut g0j = Vec::with_capacity(n);
    let mut chi = Vec::with_capacity(n);
    for j in 0..n {
        let (mj, wj) = plasmon_element(&system.neighbors[j], system.fluxonium_basis)?;
        let wc = coupler_oscillator(&system.couplers[j])?.derived.omega_c;
        let pc = PlasmonCouplings {
            g12_0: system.j_c0[j] * coupler_oscillator(&system.couplers[j])?.derived.n_zpf * m0,
            g12_j: system.j_cj[j] * coupler_oscillator(&system.couplers[j])?.derived.n_zpf * mj,
            g12_0j: system.j_0j[j] * m0 * mj,
        };
        let g = effective_g01(&pc, w0, wj, wc)?;
        omega12.push(wj);
        omega_c.push(wc);
        g0j.push(g);
        chi.push(dispersive_chi(g, w0 - wj)?);
    }
    Ok(EffectiveStarModel {
        omega12,
        omega_c,
        g0j,
        chi,
    })
}

/// Extract the central-fluxonium gate-frame detunings from a transition
/// table: one `(config, δ'_s)` pair per neighbor configuration, where
/// `δ'_s = ω_s − ω_gate` (the all-ones entry is exactly zero).
///
/// This is the canonical `detunings` input for
/// [`build_rotating_gate_model`].
pub fn gate_frame_detunings(table: &TransitionTable) -> Vec<(NeighborConfig, f64)> {
    table
        .rows
        .iter()
        .filter(|r| r.fluxonium == 0)
        .map(|r| (NeighborConfig(r.others.clone()), r.detuning))
        .collect()
}

/// Assemble the block-diagonal rotating-frame (with respect to the drive)
/// gate model: one 2×2 block per neighbor configuration on the central
/// fluxonium's `{|1⟩, |2⟩}` plasmon pair,
///
/// `H_s = (δ'_s/2)·Z + (Ω/2)·X`,  `Z = diag(+1, −1)` on `(|1⟩, |2⟩)`,
///
/// in GHz (the single 2π lives in the propagator). The all-ones
/// configuration must come with detuning 0 (the drive is resonant there); its
/// block is pure `(Ω/2)·X`, so a drive satisfying
/// `∫Ω dt · 1 = 1 GHz·ns` (one full Rabi cycle, i.e. angular area 2π)
/// returns `|1, 1⃗⟩` to itself with phase π.
///
/// Basis ordering: configuration index `c` (first neighbor = most significant
/// bit) occupies rows `2c` (`|1, s⟩`) and `2c+1` (`|2, s⟩`).
pub fn build_rotating_gate_model(
    model: &EffectiveStarModel,
    omega: f64,
    detunings: &[(NeighborConfig, f64)],
) -> Result<Mat<f64>> {
    let n = model.g0j.len();
    let n_cfg = 1usize << n;
    let mut delta: Vec<Option<f64>> = vec![None; n_cfg];
    for (cfg, d) in detunings {
        cfg.validate(n)?;
        let idx = cfg.index();
        if delta[idx].is_some() {
            return Err(Error::InvalidSpec(format!(
                "duplicate detuning entry for configuration {:?}",
                cfg.bits()
            )));
        }
        delta[idx] = Some(*d);
    }
    for (idx, d) in delta.iter().enumerate() {
        if d.is_none() {
            return Err(Error::InvalidSpec(format!(
                "missing detuning for configuration index {idx} (of {n_cfg})"
            )));
        }
    }
    let all_ones = n_cfg - 1;
    let d_ones = delta[all_ones].unwrap();
    if d_ones.abs() > 1e-12 {
        return Err(Error::InvalidSpec(format!(
            "the all-ones configuration must be resonant (detuning 0), got {d_ones:e} GHz"
        )));
    }
    let dim = 2 * n_cfg;
    let mut h = Mat::<f64>::zeros(dim, dim);
    for (c, d) in delta.iter().enumerate() {
        let d = d.unwrap();
        h[(2 * c, 2 * c)] = 0.5 * d;
        h[(2 * c + 1, 2 * c + 1)] = -0.5 * d;
        h[(2 * c, 2 * c + 1)] = 0.5 * omega;
        h[(2 * c + 1, 2 * c)] = 0.5 * omega;
    }
    Ok(h)
}

/// Drive-induced (ac-Stark) phase estimate `2π·(Ω²/4δ')·t_g` in radians for
/// an off-resonant configuration with gate-frame detuning `δ'` (GHz), Rabi
/// rate `Ω` (GHz), and gate length `t_g` (ns).
///
/// Sign convention: the returned value tracks the level shift `Ω²/4δ'`; under
/// the propagator `U = exp(−i·2π·H·t)` the corresponding extra phase of the
/// `|1, s⟩` state relative to free evolution is minus this value.
pub fn ac_stark_estimate(omega: f64, delta_prime: f64, t_g: f64) -> Result<f64> {
    if delta_prime == 0.0 {
        return Err(Error::InvalidSpec(
            "zero detuning in ac-Stark estimate".into(),
        ));
    }
    Ok(std::f64::consts::TAU * (omega * omega / (4.0 * delta_prime)) * t_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eigh;
    use crate::presets;
    use crate::spectrum::{assemble, state_dependent_shift, transition_table};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Tolerances:
    ///
    /// | constant | value | justification |
    /// |---|---|---|
    /// | `FROZEN_TOL` | 2e-5 GHz | frozen independent-diagonalization values |
    /// | `EXACT_TOL` | 1e-12 | identities up to solver roundoff |
    const FROZEN_TOL: f64 = 2e-5;
    const EXACT_TOL: f64 = 1e-12;

    /// N=1 system at idle coupler bias with half-scaled couplings: the
    /// properly dispersive regime used by the cross-validation tests.
    fn idle_half_system(n: usize) -> StarSystem {
        let mut sys = presets::star_at_biases(n, &vec![0.0; n]).unwrap();
        for j in 0..n {
            sys.j_c0[j] = 0.25;
            sys.j_cj[j] = 0.25;
            sys.j_0j[j] = 0.0625;
        }
        sys
    }

    #[test]
    fn direct_coupling_vanishes_without_direct_term() {
        let mut sys = presets::star(1).unwrap();
        sys.j_0j[0] = 0.0;
        let pc = plasmon_couplings(&sys, 0).unwrap();
        assert_eq!(pc.g12_0j, 0.0);
        assert!(pc.g12_0 > 0.0 && pc.g12_j > 0.0);
    }

    #[test]
    fn coupling_magnitudes_at_table_point() {
        let pc = plasmon_couplings(&presets::star(1).unwrap(), 0).unwrap();
        assert!((0.1..1.0).contains(&pc.g12_0), "g12_0 = {}", pc.g12_0);
        assert!((0.1..1.0).contains(&pc.g12_j), "g12_j = {}", pc.g12_j);
    }

    #[test]
    fn coupling_linear_in_charge_coupling() {
        let sys = presets::star(1).unwrap();
        let mut sys2 = presets::star(1).unwrap();
        sys2.j_c0[0] *= 2.0;
        let pc = plasmon_couplings(&sys, 0).unwrap();
        let pc2 = plasmon_couplings(&sys2, 0).unwrap();
        assert_eq!(pc2.g12_0, 2.0 * pc.g12_0);
        assert_eq!(pc2.g12_j, pc.g12_j);
    }

    #[test]
    fn mediated_term_vanishes_far_detuned() {
        let pc = plasmon_couplings(&presets::star(1).unwrap(), 0).unwrap();
        let g = effective_g01(&pc, 5.6, 5.3, 1e9).unwrap();
        assert_abs_diff_eq!(g, pc.g12_0j, epsilon = 1e-8 * pc.g12_0j.abs());
    }

    #[test]
    fn pole_at_zero_plasmon_coupler_detuning() {
        let pc = plasmon_couplings(&presets::star(1).unwrap(), 0).unwrap();
        assert!(effective_g01(&pc, 5.6, 5.3, 5.6).is_err());
        assert!(effective_g01(&pc, 5.6, 5.3, 5.3).is_err());
    }

    #[test]
    fn mediated_collapses_without_coupler_arm() {
        let mut pc = plasmon_couplings(&presets::star(1).unwrap(), 0).unwrap();
        pc.g12_0 = 0.0;
        let g = effective_g01(&pc, 5.6, 5.3, 5.8).unwrap();
        assert_eq!(g, pc.g12_0j);
    }

    proptest! {
        /// The effective coupling does not care which of the two fluxoniums
        /// is called "central": simultaneous exchange of the coupler arms and
        /// plasmon frequencies leaves it bit-identical.
        #[test]
        fn g01_symmetric_under_fluxonium_exchange(
            g120 in -1.0f64..1.0, g121 in -1.0f64..1.0, g1201 in -0.2f64..0.2,
            w0 in 4.0f64..7.0, w1 in 4.0f64..7.0, wc in 8.0f64..12.0,
        ) {
            let pc = PlasmonCouplings { g12_0: g120, g12_j: g121, g12_0j: g1201 };
            let sw = PlasmonCouplings { g12_0: g121, g12_j: g120, g12_0j: g1201 };
            let a = effective_g01(&pc, w0, w1, wc).unwrap();
            let b = effective_g01(&sw, w1, w0, wc).unwrap();
            prop_assert_eq!(a, b);
        }

        /// χ = g²/Δ versus the exact 2×2 level repulsion (√(Δ²+4g²)−Δ)/2:
        /// relative deviation bounded by (g/Δ)².
        #[test]
        fn chi_matches_two_level_repulsion_within_ratio_squared(
            r in 1e-3f64..0.3, delta in 0.1f64..10.0,
        ) {
            let g = r * delta;
            let chi = dispersive_chi(g, delta).unwrap();
            let exact = 0.5 * ((delta * delta + 4.0 * g * g).sqrt() - delta);
            let dev = (chi - exact).abs() / exact;
            prop_assert!(dev <= r * r + 1e-12, "dev {} vs r² {}", dev, r * r);
        }
    }

    #[test]
    fn dispersive_chi_examples() {
        let chi = dispersive_chi(0.1, 1.0).unwrap();
        assert_abs_diff_eq!(chi, 0.01, epsilon = 1e-15);
        let exact = 0.5 * ((1.0f64 + 4.0 * 0.01).sqrt() - 1.0);
        assert!((chi - exact).abs() / exact < 0.011);
        assert_eq!(
            dispersive_chi(0.1, -1.0).unwrap(),
            -dispersive_chi(0.1, 1.0).unwrap()
        );
        assert!(dispersive_chi(0.1, 1e9).unwrap() < 1e-10);
        assert!(dispersive_chi(0.1, 0.0).is_err());
    }

    /// Second-order elimination of the cross-coupling in the 4-dim
    /// two-plasmon model (levels {1,2} per fluxonium, neighbor pinned in the
    /// plasmon manifold) reproduces χ = g²/Δ up to the counter-rotating g²/S
    /// correction.
    #[test]
    fn two_plasmon_reduction_reproduces_dispersive_shift() {
        let (w0, w1, g) = (5.6, 5.3, 0.005);
        // Basis |11⟩, |12⟩, |21⟩, |22⟩ relative to E(|11⟩).
        let mut h = Mat::<f64>::zeros(4, 4);
        h[(1, 1)] = w1;
        h[(2, 2)] = w0;
        h[(3, 3)] = w0 + w1;
        h[(1, 2)] = g;
        h[(2, 1)] = g;
        h[(0, 3)] = g;
        h[(3, 0)] = g;
        let (vals, vecs) = eigh(&h).unwrap();
        // Small g: eigenstates stay aligned with the bare basis; locate each
        // bare state by its dominant eigenvector.
        let locate = |bare: usize| -> f64 {
            let mut best = (0usize, 0.0f64);
            for i in 0..4 {
                let w = vecs[(bare, i)] * vecs[(bare, i)];
                if w > best.1 {
                    best = (i, w);
                }
            }
            assert!(best.1 > 0.99);
            vals[best.0]
        };
        // Central plasmon splitting with the neighbor held in |1⟩, minus the
        // uncoupled reference w0 (neighbor in |0⟩ decouples entirely).
        let chi_exact = (locate(2) - locate(0)) - w0;
        let delta = w0 - w1;
        let s = w0 + w1;
        // Fourth-order corrections enter at ~g⁴/Δ³ ≈ 2e-8 here.
        let second_order = g * g / delta + g * g / s;
        assert_abs_diff_eq!(chi_exact, second_order, epsilon = 1e-3 * chi_exact);
        let chi = dispersive_chi(g, delta).unwrap();
        assert!(
            (chi_exact - chi).abs() / chi < 0.05,
            "RWA deviation {} should be ~Δ/S",
            (chi_exact - chi).abs() / chi
        );
    }

    #[test]
    fn rotating_gate_model_structure_and_validation() {
        let model = effective_star_model(&presets::star(1).unwrap()).unwrap();
        let ones = NeighborConfig::ones(1);
        let zero = NeighborConfig::zeros(1);
        let d = -0.0788;
        let h =
            build_rotating_gate_model(&model, 0.01, &[(ones.clone(), 0.0), (zero.clone(), d)])
                .unwrap();
        assert_eq!(h.nrows(), 4);
        // config 0 block: detuned.
        assert_eq!(h[(0, 0)], 0.5 * d);
        assert_eq!(h[(1, 1)], -0.5 * d);
        assert_eq!(h[(0, 1)], 0.005);
        // config 1 (all-ones) block: resonant.
        assert_eq!(h[(2, 2)], 0.0);
        assert_eq!(h[(3, 3)], 0.0);
        assert_eq!(h[(2, 3)], 0.005);
        assert_eq!(h[(2, 0)], 0.0);
        // validation errors
        assert!(build_rotating_gate_model(&model, 0.01, &[(ones.clone(), 0.0)]).is_err());
        assert!(build_rotating_gate_model(
            &model,
            0.01,
            &[(ones.clone(), 1e-3), (zero.clone(), d)]
        )
        .is_err());
        assert!(build_rotating_gate_model(
            &model,
            0.01,
            &[(ones.clone(), 0.0), (ones.clone(), 0.0)]
        )
        .is_err());
    }

    /// Closed-form 2×2 propagator for a block a·Z + b·X (GHz) over time t
    /// (ns): U = exp(−i·2π·t·(aZ+bX)). Returns the (complex) matrix entries
    /// as ((re, im) for U00, U01).
    fn block_u00_u01(a: f64, b: f64, t: f64) -> ((f64, f64), (f64, f64)) {
        let r = (a * a + b * b).sqrt();
        let th = std::f64::consts::TAU * r * t;
        if r == 0.0 {
            return ((1.0, 0.0), (0.0, 0.0));
        }
        let (c, s) = (th.cos(), th.sin());
        // U = cos(θ)·I − i·sin(θ)·(aZ + bX)/r
        (((c, -s * a / r)), ((0.0, -s * b / r)))
    }

    #[test]
    fn resonant_block_full_cycle_imprints_phase_pi() {
        // One full Rabi cycle: Ω·t = 1 (linear-frequency area; angular 2π).
        let omega = 0.02;
        let t = 1.0 / omega;
        let (u00, u01) = block_u00_u01(0.0, 0.5 * omega, t);
        assert_abs_diff_eq!(u00.0, -1.0, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(u00.1, 0.0, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(u01.0, 0.0, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(u01.1, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_drive_blocks_evolve_pure_detuning_phases() {
        let model = effective_star_model(&presets::star(1).unwrap()).unwrap();
        let h = build_rotating_gate_model(
            &model,
            0.0,
            &[
                (NeighborConfig::ones(1), 0.0),
                (NeighborConfig::zeros(1), -0.05),
            ],
        )
        .unwrap();
        for c in 0..2 {
            assert_eq!(h[(2 * c, 2 * c + 1)], 0.0);
        }
        let (u00, _) = block_u00_u01(h[(0, 0)], 0.0, 10.0);
        // phase of |1, s⟩ after t: −2π·(δ'/2)·t
        let expect = -std::f64::consts::TAU * (-0.05 / 2.0) * 10.0;
        assert_abs_diff_eq!(u00.1.atan2(u00.0), wrap(expect), epsilon = 1e-12);
    }

    fn wrap(mut x: f64) -> f64 {
        use std::f64::consts::{PI, TAU};
        while x > PI {
            x -= TAU;
        }
        while x <= -PI {
            x += TAU;
        }
        x
    }

    /// Off-resonant block: the exact extra phase relative to free evolution
    /// is 2πt(r − |δ'/2|); the Ω²/4δ' estimate matches within 10% for
    /// Ω/δ' < 0.3.
    #[test]
    fn stark_phase_matches_two_level_oracle() {
        for (omega, dp, t) in [(0.01f64, -0.0788f64, 100.0f64), (0.022852, -0.0788, 100.0)] {
            let r = (0.25 * dp * dp + 0.25 * omega * omega).sqrt();
            let exact = std::f64::consts::TAU * t * (r - 0.5 * dp.abs());
            let est = ac_stark_estimate(omega, dp, t).unwrap().abs();
            let dev = (est - exact).abs() / exact;
            assert!(dev < 0.10, "dev {dev} at omega/dp = {}", omega / dp.abs());
        }
    }

    #[test]
    fn ac_stark_examples() {
        assert_eq!(ac_stark_estimate(0.0, -0.0788, 100.0).unwrap(), 0.0);
        // Ω = 10 MHz, δ' = −78.8 MHz, t_g = 100 ns. The formula gives
        // 2π·(1e-4/(4·(−0.0788)))·100 = −0.199339 rad.
        let est = ac_stark_estimate(0.01, -0.0788, 100.0).unwrap();
        assert_abs_diff_eq!(est, -0.199339, epsilon = 1e-6);
        let est2 = ac_stark_estimate(0.02, -0.0788, 100.0).unwrap();
        assert_eq!(est2, 4.0 * est);
        assert!(ac_stark_estimate(0.01, 0.0, 100.0).is_err());
    }

    /// Sweep the neighbor's Josephson energy through plasmon resonance in the
    /// full model and read the minimum avoided-crossing gap between the two
    /// single-plasmon dressed states; the effective g01 must match half that
    /// gap within 25%. Frozen against an independent implementation:
    /// gap = 18.795 MHz at E_J1 = 6.1575 GHz, g01 = +9.385 MHz.
    #[test]
    fn avoided_crossing_gap_matches_effective_coupling() {
        let mut best: Option<(f64, f64, f64)> = None; // (gap, ej1, weight)
        for i in 0..=120 {
            let ej1 = 6.02 + 0.0025 * (i as f64);
            let mut sys = idle_half_system(1);
            sys.neighbors[0].e_j = ej1;
            let (model, ph) = assemble(&sys).unwrap();
            let (vals, vecs) = eigh(&ph.h).unwrap();
            let f21 = model.basis.flat_index(&[2, 1, 0]);
            let f12 = model.basis.flat_index(&[1, 2, 0]);
            let (p21, p12) = (ph.position[f21], ph.position[f12]);
            let mut top = [(0usize, 0.0f64); 2];
            for k in 0..vals.len() {
                let w = vecs[(p21, k)] * vecs[(p21, k)] + vecs[(p12, k)] * vecs[(p12, k)];
                if w > top[0].1 {
                    top[1] = top[0];
                    top[0] = (k, w);
                } else if w > top[1].1 {
                    top[1] = (k, w);
                }
            }
            let gap = (vals[top[0].0] - vals[top[1].0]).abs();
            let weight = top[0].1 + top[1].1;
            if best.is_none() || gap < best.unwrap().0 {
                best = Some((gap, ej1, weight));
            }
        }
        let (gap, ej1, weight) = best.unwrap();
        assert_abs_diff_eq!(gap, 0.018795, epsilon = FROZEN_TOL);
        assert_abs_diff_eq!(ej1, 6.1575, epsilon = 1e-9);
        assert!(weight > 1.9, "resonant pair should dominate, got {weight}");
        let mut sys = idle_half_system(1);
        sys.neighbors[0].e_j = ej1;
        let model = effective_star_model(&sys).unwrap();
        let g01 = model.g0j[0];
        assert_abs_diff_eq!(g01, 0.009385, epsilon = FROZEN_TOL);
        let half_gap = 0.5 * gap;
        assert!(
            (g01.abs() - half_gap).abs() / half_gap < 0.25,
            "|g01| = {} vs half-gap = {}",
            g01.abs(),
            half_gap
        );
    }

    /// Single neighbor, idle coupler bias, half-scaled couplings: the full
    /// model's state-dependent shift agrees with χ within 15%. Frozen:
    /// shift = +0.2836 MHz, χ = +0.2537 MHz.
    #[test]
    fn dispersive_shift_cross_check_full_vs_effective() {
        let sys = idle_half_system(1);
        let shift = state_dependent_shift(&sys, &NeighborConfig::ones(1)).unwrap();
        assert!(!shift.ambiguous);
        let model = effective_star_model(&sys).unwrap();
        let chi = model.chi[0];
        assert_abs_diff_eq!(shift.value, 0.2836e-3, epsilon = 2e-7);
        assert_abs_diff_eq!(chi, 0.2537e-3, epsilon = 2e-7);
        assert!((shift.value - chi).abs() / shift.value.abs() < 0.15);
    }

    /// N=2 idle-bias dispersive regime: effective gate-frame detunings
    /// δ'_s = Σ_j (s_j − 1)·χ_j track the full-model transition table within
    /// 20%. Frozen full-model values: δ'_00 = −0.47433 MHz,
    /// δ'_01 = −0.28891 MHz, δ'_10 = −0.18518 MHz (χ1 = +0.25367 MHz,
    /// χ2 = +0.15556 MHz).
    #[test]
    fn effective_detunings_track_full_model_in_dispersive_regime() {
        let sys = idle_half_system(2);
        let table = transition_table(&sys).unwrap();
        let model = effective_star_model(&sys).unwrap();
        assert_abs_diff_eq!(model.chi[0], 0.25367e-3, epsilon = 2e-7);
        assert_abs_diff_eq!(model.chi[1], 0.15556e-3, epsilon = 2e-7);
        let frozen = [
            (vec![0u8, 0], -0.47433e-3),
            (vec![0, 1], -0.28891e-3),
            (vec![1, 0], -0.18518e-3),
        ];
        for (bits, frozen_full) in frozen {
            let row = table
                .rows
                .iter()
                .find(|r| r.fluxonium == 0 && r.others == bits)
                .unwrap();
            assert_abs_diff_eq!(row.detuning, frozen_full, epsilon = 2e-7);
            let eff: f64 = bits
                .iter()
                .zip(&model.chi)
                .map(|(&s, &chi)| (f64::from(s) - 1.0) * chi)
                .sum();
            let dev = (row.detuning - eff).abs() / row.detuning.abs();
            assert!(dev < 0.20, "config {bits:?}: dev {dev}");
        }
    }

    #[test]
    fn gate_frame_detunings_feed_rotating_model() {
        let sys = presets::star(1).unwrap();
        let table = transition_table(&sys).unwrap();
        let det = gate_frame_detunings(&table);
        assert_eq!(det.len(), 2);
        let ones = det
            .iter()
            .find(|(c, _)| c.bits() == [1])
            .map(|(_, d)| *d)
            .unwrap();
        assert_eq!(ones, 0.0);
        let zero = det
            .iter()
            .find(|(c, _)| c.bits() == [0])
            .map(|(_, d)| *d)
            .unwrap();
        assert_abs_diff_eq!(zero, table.min_detuning, epsilon = EXACT_TOL);
        let model = effective_star_model(&sys).unwrap();
        let h = build_rotating_gate_model(&model, 0.01, &det).unwrap();
        assert_eq!(h.nrows(), 4);
        assert_abs_diff_eq!(h[(0, 0)], 0.5 * zero, epsilon = EXACT_TOL);
    }
}

//! Circuit-level models: individual fluxonium and transmon-coupler spectra,
//! and assembly of the star-coupled composite Hamiltonian.
//!
//! # Gauge
//!
//! Every charge operator n̂ is kept purely imaginary and antisymmetric,
//! n̂ = i·M with M real and M[k, k+1] > 0. For the fluxonium this form is
//! automatic (its Hamiltonian is real in the oscillator basis where
//! n̂ = i·n_zpf(a − a†) up to column signs); for the charge-basis coupler it
//! is reached by an i^k phase redefinition of the eigenvectors, which is
//! possible because a symmetric 1D potential gives eigenstates of strictly
//! alternating parity and hence no same-parity charge matrix elements.
//! Charge-charge couplings J·n̂_a n̂_b = −J·M_a ⊗ M_b are then real, so the
//! assembled static Hamiltonian is real symmetric and the fast real
//! eigensolver applies throughout.
//!
//! # Units
//!
//! All energies are linear frequencies in GHz (h = 1): the Hamiltonian
//! H/h = 4·E_C n̂² + … with E_C, E_L, E_J in GHz. External phases are in
//! radians; coupler biases are usually quoted as φ_ext/2π.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigh, kron, symmetry_residual};

/// Default oscillator-basis size for fluxonium diagonalization. Doubling it
/// moves the reference transition frequencies by well under 0.1 MHz.
pub const DEFAULT_FLUXONIUM_BASIS: usize = 60;

/// Default charge-basis cutoff (states n ∈ [−cutoff, cutoff]) for the exact
/// coupler diagonalization.
pub const DEFAULT_CHARGE_CUTOFF: usize = 40;

/// Single-fluxonium circuit parameters, energies in GHz, phase in radians.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FluxoniumSpec {
    pub e_c: f64,
    pub e_l: f64,
    pub e_j: f64,
    /// External flux phase; the flux sweet spot is φ_ext = π.
    pub phi_ext: f64,
    /// Levels kept after diagonalization.
    pub n_levels: usize,
}

impl FluxoniumSpec {
    pub fn new(e_c: f64, e_l: f64, e_j: f64) -> Self {
        Self {
            e_c,
            e_l,
            e_j,
            phi_ext: std::f64::consts::PI,
            n_levels: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.e_c <= 0.0 || self.e_l <= 0.0 {
            return Err(Error::InvalidSpec(
                "fluxonium E_C and E_L must be positive".into(),
            ));
        }
        if self.e_j < 0.0 {
            return Err(Error::InvalidSpec("fluxonium E_J must be ≥ 0".into()));
        }
        if self.n_levels == 0 {
            return Err(Error::InvalidSpec("n_levels must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Transmon coupler circuit parameters. The flux bias enters through the
/// effective Josephson energy E_J·cos(φ_ext/2).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TransmonCouplerSpec {
    pub e_c: f64,
    pub e_j: f64,
    /// External flux phase in radians (so φ_ext = 2π·bias for a bias quoted
    /// as a flux fraction).
    pub phi_ext: f64,
    pub n_levels: usize,
}

impl TransmonCouplerSpec {
    /// Coupler at a given bias expressed as φ_ext/2π.
    pub fn at_bias(e_c: f64, e_j: f64, bias: f64) -> Self {
        Self {
            e_c,
            e_j,
            phi_ext: 2.0 * std::f64::consts::PI * bias,
            n_levels: 3,
        }
    }

    pub fn e_j_eff(&self) -> f64 {
        self.e_j * (self.phi_ext / 2.0).cos()
    }

    fn validate(&self) -> Result<()> {
        if self.e_c <= 0.0 || self.e_j <= 0.0 {
            return Err(Error::InvalidSpec(
                "coupler E_C and E_J must be positive".into(),
            ));
        }
        if self.e_j_eff() <= 0.0 {
            return Err(Error::DegenerateCouplerPotential);
        }
        if self.n_levels == 0 {
            return Err(Error::InvalidSpec("n_levels must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Closed-form derived constants of the biased coupler.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CouplerDerived {
    /// Plasma frequency √(8·E_J_eff·E_C), GHz.
    pub omega_p: f64,
    /// Dimensionless anharmonicity parameter √(E_C/(8·E_J_eff))/3.
    pub lambda: f64,
    /// 0↔1 transition frequency ω_p(1 − 3λ − 9λ²), GHz.
    pub omega_c: f64,
    /// Anharmonicity −ω_p(3λ + (162/8)λ²), GHz (negative).
    pub alpha_c: f64,
    /// Charge zero-point fluctuation (E_J_eff/(8E_C))^¼ / √2.
    pub n_zpf: f64,
    /// Phase zero-point fluctuation (8E_C/E_J_eff)^¼ / √2.
    pub phi_zpf: f64,
}

/// Eigenbasis data of one subsystem: energies relative to its ground state
/// and the charge operator in the n̂ = i·M gauge (only M is stored).
#[derive(Debug, Clone)]
pub struct SubsystemModes {
    /// Eigenenergies, ground shifted to zero, ascending, GHz.
    pub energies: Vec<f64>,
    /// M in n̂ = i·M: real antisymmetric, M[k, k+1] > 0.
    pub n_imag: Mat<f64>,
}

/// Fluxonium eigenbasis data, including the phase operator.
#[derive(Debug, Clone)]
pub struct FluxoniumModes {
    pub energies: Vec<f64>,
    pub n_imag: Mat<f64>,
    /// Phase operator φ̂ (external offset included), real symmetric.
    pub phi: Mat<f64>,
}

impl FluxoniumModes {
    pub fn modes(&self) -> SubsystemModes {
        SubsystemModes {
            energies: self.energies.clone(),
            n_imag: self.n_imag.clone(),
        }
    }
}

/// Enforce M[k, k+1] > 0 by flipping eigenvector column signs sequentially.
/// `columns` are modified in step so that derived operators stay consistent.
fn fix_ladder_gauge(m: &mut Mat<f64>, columns: &mut Mat<f64>) {
    let n = m.nrows();
    for k in 1..n {
        if m[(k - 1, k)] < 0.0 {
            for i in 0..n {
                let v = m[(i, k)];
                m[(i, k)] = -v;
                let w = m[(k, i)];
                m[(k, i)] = -w;
            }
            // the (k,k) entry was negated twice; restore (it is zero anyway
            // for antisymmetric M, kept for robustness)
            for r in 0..columns.nrows() {
                let c = columns[(r, k)];
                columns[(r, k)] = -c;
            }
        }
    }
}

/// Diagonalize a fluxonium in the harmonic-oscillator basis of its
/// (E_C, E_L) oscillator and return the lowest `spec.n_levels` modes.
///
/// The variable is shifted to φ̃ = φ − φ_ext so the quadratic part is
/// diagonal; the cosine is evaluated through the eigendecomposition of the
/// (truncated) φ̃ operator, which converges fast with basis size.
pub fn diagonalize_fluxonium(spec: &FluxoniumSpec, basis_size: usize) -> Result<FluxoniumModes> {
    spec.validate()?;
    if basis_size < spec.n_levels {
        return Err(Error::InvalidSpec(format!(
            "basis_size {} is smaller than n_levels {}",
            basis_size, spec.n_levels
        )));
    }
    let omega_osc = (8.0 * spec.e_c * spec.e_l).sqrt();
    let phi_zpf = (8.0 * spec.e_c / spec.e_l).powf(0.25) / 2f64.sqrt();
    let n_zpf = 1.0 / (2.0 * phi_zpf);

    // φ̃ = φ_zpf (a + a†) in the oscillator basis
    let phi_tilde = Mat::from_fn(basis_size, basis_size, |i, j| {
        if i + 1 == j {
            phi_zpf * (j as f64).sqrt()
        } else if j + 1 == i {
            phi_zpf * (i as f64).sqrt()
        } else {
            0.0
        }
    });
    let (x, q) = eigh(&phi_tilde)?;
    // cos(φ̃ + φ_ext) = Q · diag(cos(x + φ_ext)) · Qᵀ
    let cos_mat = Mat::from_fn(basis_size, basis_size, |i, j| {
        let mut acc = 0.0;
        for k in 0..basis_size {
            acc += q[(i, k)] * (x[k] + spec.phi_ext).cos() * q[(j, k)];
        }
        acc
    });
    let h = Mat::from_fn(basis_size, basis_size, |i, j| {
        let osc = if i == j {
            omega_osc * (i as f64 + 0.5)
        } else {
            0.0
        };
        osc - spec.e_j * cos_mat[(i, j)]
    });
    let (vals, vecs) = eigh(&h)?;

    let nl = spec.n_levels;
    let energies: Vec<f64> = vals[..nl].iter().map(|e| e - vals[0]).collect();
    let mut v = Mat::from_fn(basis_size, nl, |i, j| vecs[(i, j)]);

    // n̂ = i·n_zpf(a − a†) in the oscillator basis: the real factor is
    // antisymmetric with positive upper diagonal, matching the gauge.
    let m_ho = Mat::from_fn(basis_size, basis_size, |i, j| {
        if i + 1 == j {
            n_zpf * (j as f64).sqrt()
        } else if j + 1 == i {
            -n_zpf * (i as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut n_imag = v.transpose() * &m_ho * &v;
    fix_ladder_gauge(&mut n_imag, &mut v);

    let phi_eig = v.transpose() * &phi_tilde * &v;
    let phi = Mat::from_fn(nl, nl, |i, j| {
        phi_eig[(i, j)] + if i == j { spec.phi_ext } else { 0.0 }
    });

    Ok(FluxoniumModes {
        energies,
        n_imag,
        phi,
    })
}

/// Closed-form oscillator treatment of the biased coupler: derived constants
/// plus ladder operators truncated to `spec.n_levels`.
///
/// Returned charge gauge: n̂ = i·M with M = n_zpf(a − a†), so M[k, k+1] > 0.
pub struct CouplerOscillator {
    pub derived: CouplerDerived,
    pub modes: SubsystemModes,
    /// Annihilation operator (real, upper-diagonal √k entries).
    pub a_op: Mat<f64>,
}

pub fn coupler_oscillator(spec: &TransmonCouplerSpec) -> Result<CouplerOscillator> {
    spec.validate()?;
    let e_j_eff = spec.e_j_eff();
    let omega_p = (8.0 * e_j_eff * spec.e_c).sqrt();
    let lambda = (spec.e_c / (8.0 * e_j_eff)).sqrt() / 3.0;
    let omega_c = omega_p * (1.0 - 3.0 * lambda - 9.0 * lambda * lambda);
    let alpha_c = -omega_p * (3.0 * lambda + (162.0 / 8.0) * lambda * lambda);
    // Near half-flux E_Jeff collapses, λ diverges, and the anharmonic
    // expansion turns the 0↔1 frequency negative: the oscillator picture
    // no longer describes a confining potential.
    if !(omega_c > 0.0) {
        return Err(Error::DegenerateCouplerPotential);
    }
    let n_zpf = (e_j_eff / (8.0 * spec.e_c)).powf(0.25) / 2f64.sqrt();
    let phi_zpf = (8.0 * spec.e_c / e_j_eff).powf(0.25) / 2f64.sqrt();

    let nl = spec.n_levels;
    let energies: Vec<f64> = (0..nl)
        .map(|k| {
            let k = k as f64;
            omega_c * k + alpha_c * k * (k - 1.0) / 2.0
        })
        .collect();
    let a_op = Mat::from_fn(nl, nl, |i, j| {
        if i + 1 == j {
            (j as f64).sqrt()
        } else {
            0.0
        }
    });
    let n_imag = Mat::from_fn(nl, nl, |i, j| n_zpf * (a_op[(i, j)] - a_op[(j, i)]));

    Ok(CouplerOscillator {
        derived: CouplerDerived {
            omega_p,
            lambda,
            omega_c,
            alpha_c,
            n_zpf,
            phi_zpf,
        },
        modes: SubsystemModes { energies, n_imag },
        a_op,
    })
}

/// Exact diagonalization of the cosine-potential coupler in the charge basis
/// n ∈ [−cutoff, cutoff], truncated to `spec.n_levels` eigenstates.
///
/// The charge operator is diagonal in this basis; in the eigenbasis it is
/// real symmetric with vanishing same-parity elements, and an i^k phase
/// redefinition brings it to the crate-wide n̂ = i·M gauge.
pub fn diagonalize_coupler_charge_basis(
    spec: &TransmonCouplerSpec,
    charge_cutoff: usize,
) -> Result<SubsystemModes> {
    spec.validate()?;
    let dim = 2 * charge_cutoff + 1;
    if dim < spec.n_levels {
        return Err(Error::InvalidSpec(
            "charge cutoff too small for requested level count".into(),
        ));
    }
    let e_j_eff = spec.e_j_eff();
    let h = Mat::from_fn(dim, dim, |i, j| {
        if i == j {
            let n = i as f64 - charge_cutoff as f64;
            4.0 * spec.e_c * n * n
        } else if i.abs_diff(j) == 1 {
            -e_j_eff / 2.0
        } else {
            0.0
        }
    });
    let (vals, vecs) = eigh(&h)?;
    let nl = spec.n_levels;
    // Near half-flux the ±n charge pairs become numerically degenerate and
    // the eigenvectors (hence the charge matrix elements) are arbitrary
    // mixtures within each pair.
    for k in 1..nl {
        if vals[k] - vals[k - 1] < 1e-9 {
            return Err(Error::DegenerateCouplerPotential);
        }
    }
    let energies: Vec<f64> = vals[..nl].iter().map(|e| e - vals[0]).collect();

    // n̂ in the truncated eigenbasis (real symmetric, zero diagonal)
    let n_eig = Mat::from_fn(nl, nl, |r, c| {
        let mut acc = 0.0;
        for k in 0..dim {
            let n = k as f64 - charge_cutoff as f64;
            acc += vecs[(k, r)] * n * vecs[(k, c)];
        }
        acc
    });
    // Verify the parity selection that justifies the i^k gauge: same-parity
    // elements (including the diagonal) must vanish.
    for r in 0..nl {
        for c in 0..nl {
            if (r + c) % 2 == 0 && n_eig[(r, c)].abs() > 1e-9 {
                return Err(Error::InvalidSpec(format!(
                    "unexpected same-parity charge element ({r},{c}) = {:.3e}",
                    n_eig[(r, c)]
                )));
            }
        }
    }
    // i^k phases: ⟨k|n̂|l⟩ → i^{l−k}·⟨k|n̂|l⟩. Odd |l−k| elements become
    // imaginary; M picks up sign (−1)^((l−k−1)/2) relative to n_eig.
    let mut n_imag = Mat::from_fn(nl, nl, |r, c| {
        if (r + c) % 2 == 1 {
            let (lo, hi) = if r < c { (r, c) } else { (c, r) };
            let sign = if ((hi - lo - 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
            let upper = sign * n_eig[(lo, hi)];
            if r < c {
                upper
            } else {
                -upper
            }
        } else {
            0.0
        }
    });
    let mut dummy = Mat::<f64>::zeros(1, nl);
    fix_ladder_gauge(&mut n_imag, &mut dummy);

    Ok(SubsystemModes { energies, n_imag })
}

/// How the couplers enter the assembled star Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CouplerTreatment {
    /// Closed-form anharmonic-oscillator levels with ladder charge
    /// operators (the reduced coupler model used throughout the analysis).
    #[default]
    Oscillator,
    /// Exact charge-basis diagonalization of the cosine potential with
    /// eigenbasis charge matrix elements.
    ChargeBasisExact,
}

/// Star system: central fluxonium Q0, N neighbors, one coupler per neighbor,
/// and three coupling lists (all GHz).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StarSystem {
    pub central: FluxoniumSpec,
    pub neighbors: Vec<FluxoniumSpec>,
    pub couplers: Vec<TransmonCouplerSpec>,
    /// Central-fluxonium ↔ coupler couplings J_c0, one per branch.
    pub j_c0: Vec<f64>,
    /// Neighbor ↔ coupler couplings J_cj.
    pub j_cj: Vec<f64>,
    /// Direct central ↔ neighbor couplings J_0j.
    pub j_0j: Vec<f64>,
    #[serde(default)]
    pub coupler_treatment: CouplerTreatment,
    /// Oscillator-basis size used for fluxonium diagonalization.
    #[serde(default = "default_basis")]
    pub fluxonium_basis: usize,
}

fn default_basis() -> usize {
    DEFAULT_FLUXONIUM_BASIS
}

impl StarSystem {
    pub fn n_neighbors(&self) -> usize {
        self.neighbors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.neighbors.len();
        if n == 0 || n > 4 {
            return Err(Error::InvalidSpec(format!(
                "number of neighbors must be in 1..=4, got {n}"
            )));
        }
        if self.couplers.len() != n || self.j_c0.len() != n || self.j_cj.len() != n
            || self.j_0j.len() != n
        {
            return Err(Error::InvalidSpec(
                "couplers, j_c0, j_cj, j_0j must all have one entry per neighbor".into(),
            ));
        }
        self.central.validate()?;
        for f in &self.neighbors {
            f.validate()?;
        }
        for c in &self.couplers {
            c.validate()?;
        }
        Ok(())
    }
}

/// Flat-index bookkeeping for the fixed subsystem ordering
/// (Q0, Q1, C1, Q2, C2, …).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductBasis {
    dims: Vec<usize>,
    strides: Vec<usize>,
}

impl ProductBasis {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut strides = vec![1usize; dims.len()];
        for s in (0..dims.len().saturating_sub(1)).rev() {
            strides[s] = strides[s + 1] * dims[s + 1];
        }
        Self { dims, strides }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn n_sites(&self) -> usize {
        self.dims.len()
    }

    pub fn flat_index(&self, occupations: &[usize]) -> usize {
        debug_assert_eq!(occupations.len(), self.dims.len());
        occupations
            .iter()
            .zip(&self.strides)
            .map(|(o, s)| o * s)
            .sum()
    }

    pub fn occupations(&self, mut flat: usize) -> Vec<usize> {
        let mut occ = vec![0usize; self.dims.len()];
        for s in (0..self.dims.len()).rev() {
            occ[s] = flat % self.dims[s];
            flat /= self.dims[s];
        }
        occ
    }

    pub fn occupation_at(&self, flat: usize, site: usize) -> usize {
        (flat / self.strides[site]) % self.dims[site]
    }

    pub fn stride(&self, site: usize) -> usize {
        self.strides[site]
    }
}

/// One charge-charge coupling term J·n̂_a n̂_b between two sites.
#[derive(Debug, Clone, Copy)]
pub struct CouplingTerm {
    pub site_a: usize,
    pub site_b: usize,
    pub j: f64,
}

/// Site roles in the fixed ordering, useful for labeling and drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    CentralFluxonium,
    NeighborFluxonium(usize),
    Coupler(usize),
}

/// Assembled star model: per-site eigen data plus the coupling term list.
/// The dense Hamiltonian (or its low-energy projection) is built on demand,
/// so large systems never materialize the full product-space matrix unless
/// explicitly requested.
pub struct StarModel {
    pub system: StarSystem,
    pub sites: Vec<SubsystemModes>,
    pub site_kinds: Vec<SiteKind>,
    pub basis: ProductBasis,
    pub terms: Vec<CouplingTerm>,
}

/// Hard cap on dense product-space dimension; beyond this, use
/// [`StarModel::projected_hamiltonian`].
pub const DENSE_DIM_LIMIT: usize = 20_000;

/// Default low-energy projection cutoff (GHz above the bare ground state)
/// for systems too large for dense work.
pub const DEFAULT_PROJECTION_CUTOFF: f64 = 24.0;

impl StarModel {
    pub fn new(system: StarSystem) -> Result<Self> {
        system.validate()?;
        let n = system.n_neighbors();
        let central = diagonalize_fluxonium(&system.central, system.fluxonium_basis)?;
        let mut sites = vec![central.modes()];
        let mut site_kinds = vec![SiteKind::CentralFluxonium];
        for j in 0..n {
            let fl = diagonalize_fluxonium(&system.neighbors[j], system.fluxonium_basis)?;
            sites.push(fl.modes());
            site_kinds.push(SiteKind::NeighborFluxonium(j));
            let coupler = match system.coupler_treatment {
                CouplerTreatment::Oscillator => coupler_oscillator(&system.couplers[j])?.modes,
                CouplerTreatment::ChargeBasisExact => {
                    diagonalize_coupler_charge_basis(&system.couplers[j], DEFAULT_CHARGE_CUTOFF)?
                }
            };
            sites.push(coupler);
            site_kinds.push(SiteKind::Coupler(j));
        }
        let dims: Vec<usize> = sites.iter().map(|s| s.energies.len()).collect();
        let basis = ProductBasis::new(dims);
        let mut terms = Vec::with_capacity(3 * n);
        for j in 0..n {
            let site_q = 1 + 2 * j;
            let site_c = 2 + 2 * j;
            terms.push(CouplingTerm {
                site_a: 0,
                site_b: site_c,
                j: system.j_c0[j],
            });
            terms.push(CouplingTerm {
                site_a: site_q,
                site_b: site_c,
                j: system.j_cj[j],
            });
            terms.push(CouplingTerm {
                site_a: 0,
                site_b: site_q,
                j: system.j_0j[j],
            });
        }
        Ok(Self {
            system,
            sites,
            site_kinds,
            basis,
            terms,
        })
    }

    pub fn total_dim(&self) -> usize {
        self.basis.total_dim()
    }

    /// Sum of bare (uncoupled) subsystem energies for a flat product index.
    pub fn bare_energy(&self, flat: usize) -> f64 {
        (0..self.basis.n_sites())
            .map(|s| self.sites[s].energies[self.basis.occupation_at(flat, s)])
            .sum()
    }

    /// Embed a single-site operator into the full product space with
    /// identities elsewhere. Dense; guarded by [`DENSE_DIM_LIMIT`].
    pub fn embed_operator(&self, local: &Mat<f64>, site_index: usize) -> Result<Mat<f64>> {
        if site_index >= self.basis.n_sites() {
            return Err(Error::DimensionMismatch(format!(
                "site index {site_index} out of range for {} sites",
                self.basis.n_sites()
            )));
        }
        let d = self.basis.dims()[site_index];
        if local.nrows() != d || local.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "operator is {}x{} but site {site_index} has dimension {d}",
                local.nrows(),
                local.ncols()
            )));
        }
        let total = self.total_dim();
        if total > DENSE_DIM_LIMIT {
            return Err(Error::DimensionMismatch(format!(
                "dense embedding of dimension {total} exceeds the {DENSE_DIM_LIMIT} cap; \
                 use the projected assembly instead"
            )));
        }
        let mut out = Mat::from_fn(1, 1, |_, _| 1.0);
        for s in 0..self.basis.n_sites() {
            let ds = self.basis.dims()[s];
            let eye = Mat::from_fn(ds, ds, |i, j| if i == j { 1.0 } else { 0.0 });
            out = if s == site_index {
                kron(&out, local)
            } else {
                kron(&out, &eye)
            };
        }
        Ok(out)
    }

    /// Dense assembled Hamiltonian in the bare product eigenbasis:
    /// H = Σ_sites E_site + Σ_terms J·n̂_a n̂_b, real symmetric in the
    /// crate gauge. Errors above [`DENSE_DIM_LIMIT`].
    pub fn dense_hamiltonian(&self) -> Result<Mat<f64>> {
        let total = self.total_dim();
        if total > DENSE_DIM_LIMIT {
            return Err(Error::DimensionMismatch(format!(
                "dense Hamiltonian of dimension {total} exceeds the {DENSE_DIM_LIMIT} cap; \
                 use projected_hamiltonian(cutoff)"
            )));
        }
        let mut h = Mat::<f64>::zeros(total, total);
        for f in 0..total {
            h[(f, f)] = self.bare_energy(f);
        }
        self.scatter_coupling_terms(&mut h, None);
        debug_assert!(symmetry_residual(&h) <= 1e-12 * h.nrows() as f64);
        Ok(h)
    }

    /// Low-energy projected Hamiltonian: keeps bare product states whose
    /// uncoupled energy is below `cutoff` (GHz above the bare ground state)
    /// and assembles the Hamiltonian directly in the kept basis without
    /// materializing the full matrix.
    pub fn projected_hamiltonian(&self, cutoff: f64) -> Result<ProjectedHamiltonian> {
        let total = self.total_dim();
        let kept: Vec<usize> = (0..total)
            .filter(|&f| self.bare_energy(f) < cutoff)
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyProjection { cutoff });
        }
        let k = kept.len();
        let mut position = vec![usize::MAX; total];
        for (p, &f) in kept.iter().enumerate() {
            position[f] = p;
        }
        let mut h = Mat::<f64>::zeros(k, k);
        for (p, &f) in kept.iter().enumerate() {
            h[(p, p)] = self.bare_energy(f);
        }
        self.scatter_coupling_terms(&mut h, Some((&kept, &position)));
        Ok(ProjectedHamiltonian {
            h,
            kept,
            position,
            basis: self.basis.clone(),
        })
    }

    /// Hamiltonian at this model's parameters restricted to an explicit kept
    /// set (flat indices into the same product basis). This follows a fixed
    /// working subspace across parameter changes — e.g. coupler-bias ramps —
    /// where re-deriving the kept set from bare energies would make the
    /// subspace jump discontinuously.
    pub fn projected_with_kept(&self, kept: Vec<usize>) -> Result<ProjectedHamiltonian> {
        let total = self.total_dim();
        if kept.is_empty() {
            return Err(Error::InvalidSpec("kept state set is empty".into()));
        }
        let mut position = vec![usize::MAX; total];
        for (p, &f) in kept.iter().enumerate() {
            if f >= total {
                return Err(Error::DimensionMismatch(format!(
                    "kept index {f} out of range for dimension {total}"
                )));
            }
            position[f] = p;
        }
        let k = kept.len();
        let mut h = Mat::<f64>::zeros(k, k);
        for (p, &f) in kept.iter().enumerate() {
            h[(p, p)] = self.bare_energy(f);
        }
        self.scatter_coupling_terms(&mut h, Some((&kept, &position)));
        Ok(ProjectedHamiltonian {
            h,
            kept,
            position,
            basis: self.basis.clone(),
        })
    }

    /// Add −J·M_a ⊗ M_b terms (i.e. +J·n̂_a n̂_b) into `h`, either over the
    /// full product space or restricted to a kept-index subset.
    fn scatter_coupling_terms(&self, h: &mut Mat<f64>, kept: Option<(&[usize], &[usize])>) {
        for term in &self.terms {
            let ma = &self.sites[term.site_a].n_imag;
            let mb = &self.sites[term.site_b].n_imag;
            let sa = self.basis.stride(term.site_a);
            let sb = self.basis.stride(term.site_b);
            let da = self.basis.dims()[term.site_a];
            let db = self.basis.dims()[term.site_b];
            let enumerate_rows: Box<dyn Iterator<Item = (usize, usize)>> = match kept {
                Some((kept_list, _)) => Box::new(kept_list.iter().copied().enumerate()),
                None => Box::new((0..h.nrows()).map(|f| (f, f))),
            };
            for (row_pos, f) in enumerate_rows {
                let ia = self.basis.occupation_at(f, term.site_a);
                let ib = self.basis.occupation_at(f, term.site_b);
                for ja in 0..da {
                    let va = ma[(ia, ja)];
                    if va == 0.0 {
                        continue;
                    }
                    for jb in 0..db {
                        let vb = mb[(ib, jb)];
                        if vb == 0.0 {
                            continue;
                        }
                        let g = f as i64
                            + (ja as i64 - ia as i64) * sa as i64
                            + (jb as i64 - ib as i64) * sb as i64;
                        let g = g as usize;
                        let col_pos = match kept {
                            Some((_, position)) => {
                                let p = position[g];
                                if p == usize::MAX {
                                    continue;
                                }
                                p
                            }
                            None => g,
                        };
                        h[(row_pos, col_pos)] += -term.j * va * vb;
                    }
                }
            }
        }
    }
}

/// Result of [`StarModel::projected_hamiltonian`].
pub struct ProjectedHamiltonian {
    /// Hamiltonian in the kept bare basis, real symmetric.
    pub h: Mat<f64>,
    /// Kept flat product indices, ascending.
    pub kept: Vec<usize>,
    /// Full flat index → kept position (usize::MAX when dropped).
    pub position: Vec<usize>,
    pub basis: ProductBasis,
}

impl ProjectedHamiltonian {
    pub fn dim(&self) -> usize {
        self.kept.len()
    }

    /// Apply a single-site operator to a kept-basis vector without
    /// materializing the embedded matrix: `out = O_site · x`.
    pub fn apply_site_operator(&self, local: &Mat<f64>, site: usize, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.kept.len());
        debug_assert_eq!(out.len(), self.kept.len());
        let stride = self.basis.stride(site);
        let d = self.basis.dims()[site];
        for (p, &f) in self.kept.iter().enumerate() {
            let i = self.basis.occupation_at(f, site);
            let mut acc = 0.0;
            for j in 0..d {
                let v = local[(i, j)];
                if v == 0.0 {
                    continue;
                }
                let g = (f as i64 + (j as i64 - i as i64) * stride as i64) as usize;
                let q = self.position[g];
                if q != usize::MAX {
                    acc += v * x[q];
                }
            }
            out[p] = acc;
        }
    }

    /// Project a single-site operator into the kept basis.
    pub fn project_site_operator(&self, local: &Mat<f64>, site: usize) -> Mat<f64> {
        let k = self.kept.len();
        let stride = self.basis.stride(site);
        let d = self.basis.dims()[site];
        let mut out = Mat::<f64>::zeros(k, k);
        for (p, &f) in self.kept.iter().enumerate() {
            let i = self.basis.occupation_at(f, site);
            for j in 0..d {
                let v = local[(i, j)];
                if v == 0.0 {
                    continue;
                }
                let g = (f as i64 + (j as i64 - i as i64) * stride as i64) as usize;
                let q = self.position[g];
                if q != usize::MAX {
                    out[(p, q)] += v;
                }
            }
        }
        out
    }
}

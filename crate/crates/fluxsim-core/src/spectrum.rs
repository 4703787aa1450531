//! Dressed spectra of assembled star systems: maximum-overlap labeling of
//! eigenstates by bare product states, neighbor-state-dependent plasmon
//! shifts, coupling-strength sweeps with breakdown detection, and the
//! per-fluxonium transition tables that locate the gate operating point.

use std::collections::BTreeMap;

use faer::Mat;

use crate::circuit::{
    ProjectedHamiltonian, StarModel, StarSystem, DEFAULT_PROJECTION_CUTOFF, DENSE_DIM_LIMIT,
};
use crate::error::{Error, Result};
use crate::linalg::eigh;

/// Overlap below which a label assignment is flagged as ambiguous.
pub const AMBIGUITY_FLOOR: f64 = 0.5;

/// Bare states within this margin (GHz) above the highest required label
/// compete for eigenstate identity during labeling. Wide enough to include
/// singly-excited coupler states and high fluxonium levels, which are the
/// states that hybridize with the plasmon manifold.
pub const CLAIM_MARGIN: f64 = 3.5;

/// Additivity residual above which a sweep point is marked as broken down.
pub const BREAKDOWN_RESIDUAL: f64 = 0.2;

/// A shift step exceeding this multiple of the preceding step (between
/// cleanly labeled points) is marked as an abrupt jump.
pub const BREAKDOWN_JUMP_FACTOR: f64 = 5.0;

/// Label→eigenstate pairs with squared overlap below this are never assigned.
const PAIR_PRUNE: f64 = 1e-6;

/// Occupations of the neighbor fluxoniums |s_1 … s_N⟩, each 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborConfig(pub Vec<u8>);

impl NeighborConfig {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1; n])
    }

    /// Config with only neighbor `j` excited.
    pub fn unit(n: usize, j: usize) -> Self {
        let mut bits = vec![0; n];
        bits[j] = 1;
        Self(bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    /// Integer index of this configuration with the first neighbor as the
    /// most significant bit (the ordering used by transition tables and the
    /// rotating-frame gate model).
    pub fn index(&self) -> usize {
        self.0.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
    }

    /// Inverse of [`NeighborConfig::index`] for `n` neighbors.
    pub fn from_index(index: usize, n: usize) -> Self {
        Self((0..n).map(|j| ((index >> (n - 1 - j)) & 1) as u8).collect())
    }

    pub fn validate(&self, n_neighbors: usize) -> Result<()> {
        if self.0.len() != n_neighbors {
            return Err(Error::InvalidSpec(format!(
                "neighbor config has {} bits, system has {} neighbors",
                self.0.len(),
                n_neighbors
            )));
        }
        if self.0.iter().any(|&b| b > 1) {
            return Err(Error::InvalidSpec(
                "neighbor config bits must be 0 or 1".into(),
            ));
        }
        Ok(())
    }
}

/// One labeled eigenstate: its index in the ascending eigenvalue list and
/// the squared overlap with the claiming bare product state.
#[derive(Debug, Clone, Copy)]
pub struct LabelEntry {
    pub eigen_index: usize,
    pub overlap: f64,
}

/// Eigenvalues of an assembled system together with an injective assignment
/// of bare product labels (site occupation lists) to eigenstates.
///
/// Assignment is greedy in descending squared overlap over all low-lying
/// bare states, so strongly hybridizing states (excited couplers, high
/// fluxonium levels) compete for identity rather than being silently
/// absorbed into computational labels. Entries with overlap below
/// [`AMBIGUITY_FLOOR`] are kept but reported as ambiguous.
#[derive(Debug, Clone)]
pub struct LabeledSpectrum {
    /// Ascending eigenvalues, GHz.
    pub eigenvalues: Vec<f64>,
    entries: BTreeMap<Vec<usize>, LabelEntry>,
}

impl LabeledSpectrum {
    pub fn entry(&self, label: &[usize]) -> Result<LabelEntry> {
        self.entries
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnassignedLabel(format!("{label:?}")))
    }

    /// All assigned labels with their entries, in lexicographic label order.
    pub fn iter(&self) -> impl Iterator<Item = (&[usize], LabelEntry)> {
        self.entries.iter().map(|(l, e)| (l.as_slice(), *e))
    }

    /// Dressed absolute energy of a labeled state, GHz.
    pub fn energy(&self, label: &[usize]) -> Result<f64> {
        Ok(self.eigenvalues[self.entry(label)?.eigen_index])
    }

    pub fn overlap(&self, label: &[usize]) -> Result<f64> {
        Ok(self.entry(label)?.overlap)
    }

    pub fn is_ambiguous(&self, label: &[usize]) -> Result<bool> {
        Ok(self.entry(label)?.overlap < AMBIGUITY_FLOOR)
    }

    /// E(to) − E(from) between two labeled states, GHz.
    pub fn dressed_transition(&self, from: &[usize], to: &[usize]) -> Result<f64> {
        Ok(self.energy(to)? - self.energy(from)?)
    }

    /// Iterate assigned labels with their entries.
    pub fn labels(&self) -> impl Iterator<Item = (&Vec<usize>, &LabelEntry)> {
        self.entries.iter()
    }
}

/// Star-layout site classification: site 0 is the central fluxonium and
/// each neighbor contributes a (fluxonium, coupler) pair after it.
fn star_qubit_sites(n_sites: usize) -> Vec<usize> {
    let mut sites = vec![0];
    sites.extend((1..n_sites).step_by(2));
    sites
}

fn is_required_label(occ: &[usize], qubit_sites: &[usize]) -> bool {
    let mut q = 0;
    for (site, &o) in occ.iter().enumerate() {
        if q < qubit_sites.len() && qubit_sites[q] == site {
            if o > 2 {
                return false;
            }
            q += 1;
        } else if o != 0 {
            return false;
        }
    }
    true
}

/// Diagonalize a (projected) Hamiltonian and assign bare product labels to
/// eigenstates by maximum squared overlap, greedily in descending overlap
/// with injectivity enforced.
///
/// Every computational-relevant label present in the kept basis (all
/// fluxonium occupations ≤ 2, couplers in the ground state) is guaranteed an
/// assignment; failure to place one is an error. Near-degenerate hybridized
/// pairs resolve to whichever branch overlaps more, and the loser's overlap
/// drops below [`AMBIGUITY_FLOOR`], which flags the entry rather than
/// failing: callers decide how to treat ambiguous identifications.
pub fn solve_and_label(ph: &ProjectedHamiltonian) -> Result<LabeledSpectrum> {
    let (eigenvalues, vectors) = eigh(&ph.h)?;
    label_from_eigen(ph, &eigenvalues, &vectors)
}

/// Labeling stage of [`solve_and_label`], reusable when the eigendecomposition
/// is already available.
pub fn label_from_eigen(
    ph: &ProjectedHamiltonian,
    eigenvalues: &[f64],
    vectors: &Mat<f64>,
) -> Result<LabeledSpectrum> {
    let k = ph.dim();
    let qubit_sites = star_qubit_sites(ph.basis.n_sites());

    // Required labels and the claim window above them.
    let mut required: Vec<usize> = Vec::new(); // kept positions
    let mut max_required_bare = f64::NEG_INFINITY;
    for (p, &f) in ph.kept.iter().enumerate() {
        let occ = ph.basis.occupations(f);
        if is_required_label(&occ, &qubit_sites) {
            required.push(p);
            max_required_bare = max_required_bare.max(ph.h[(p, p)]);
        }
    }
    if required.is_empty() {
        return Err(Error::UnassignedLabel(
            "projection kept no computational-relevant bare states".into(),
        ));
    }
    let claim_cutoff = max_required_bare + CLAIM_MARGIN;
    let claimants: Vec<usize> = (0..k).filter(|&p| ph.h[(p, p)] < claim_cutoff).collect();

    // All candidate (claimant, eigenstate) pairs above the pruning floor,
    // descending by squared overlap.
    let mut pairs: Vec<(f64, u32, u32)> = Vec::new();
    for (ci, &p) in claimants.iter().enumerate() {
        for d in 0..k {
            let ov = vectors[(p, d)] * vectors[(p, d)];
            if ov > PAIR_PRUNE {
                pairs.push((ov, ci as u32, d as u32));
            }
        }
    }
    pairs.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut required_flag = vec![false; k];
    for &p in &required {
        required_flag[p] = true;
    }
    let mut remaining_required = required.len();
    let mut claimed = vec![false; claimants.len()];
    let mut used = vec![false; k];
    let mut entries = BTreeMap::new();
    for (ov, ci, d) in pairs {
        let (ci, d) = (ci as usize, d as usize);
        if claimed[ci] || used[d] {
            continue;
        }
        claimed[ci] = true;
        used[d] = true;
        let p = claimants[ci];
        entries.insert(
            ph.basis.occupations(ph.kept[p]),
            LabelEntry {
                eigen_index: d,
                overlap: ov,
            },
        );
        if required_flag[p] {
            remaining_required -= 1;
            if remaining_required == 0 {
                break;
            }
        }
    }
    if remaining_required > 0 {
        let miss = required
            .iter()
            .find(|&&p| {
                let occ = ph.basis.occupations(ph.kept[p]);
                !entries.contains_key(&occ)
            })
            .unwrap();
        return Err(Error::UnassignedLabel(format!(
            "{:?}",
            ph.basis.occupations(ph.kept[*miss])
        )));
    }

    Ok(LabeledSpectrum {
        eigenvalues: eigenvalues.to_vec(),
        entries,
    })
}

/// Assemble a star system and return its Hamiltonian in the working basis:
/// the full product basis when small enough for dense work, otherwise the
/// low-energy projection at [`DEFAULT_PROJECTION_CUTOFF`].
pub fn assemble(system: &StarSystem) -> Result<(StarModel, ProjectedHamiltonian)> {
    let model = StarModel::new(system.clone())?;
    let cutoff = if model.total_dim() <= DENSE_DIM_LIMIT {
        f64::INFINITY
    } else {
        DEFAULT_PROJECTION_CUTOFF
    };
    let ph = model.projected_hamiltonian(cutoff)?;
    Ok((model, ph))
}

/// Diagonalize and label a star system in one step.
pub fn labeled_spectrum(system: &StarSystem) -> Result<LabeledSpectrum> {
    let (_, ph) = assemble(system)?;
    solve_and_label(&ph)
}

/// Fully diagonalized and labeled star system, retaining the eigenvectors:
/// the working frame for dressed matrix elements and time-domain propagation.
pub struct DressedSystem {
    pub model: StarModel,
    pub ph: ProjectedHamiltonian,
    /// Ascending eigenvalues, GHz.
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]` in the kept bare
    /// basis (real, in the imaginary-antisymmetric charge gauge).
    pub eigenvectors: Mat<f64>,
    pub labels: LabeledSpectrum,
}

/// Diagonalize, label, and keep the eigenvectors.
pub fn dressed_system(system: &StarSystem) -> Result<DressedSystem> {
    let (model, ph) = assemble(system)?;
    let (eigenvalues, eigenvectors) = eigh(&ph.h)?;
    let labels = label_from_eigen(&ph, &eigenvalues, &eigenvectors)?;
    Ok(DressedSystem {
        model,
        ph,
        eigenvalues,
        eigenvectors,
        labels,
    })
}

impl DressedSystem {
    /// Signed real part `r` of the dressed charge matrix element
    /// `⟨to|n̂_site|from⟩ = i·r` between two labeled eigenstates (the element
    /// is purely imaginary in the fixed gauge).
    pub fn charge_element(&self, site: usize, from: &[usize], to: &[usize]) -> Result<f64> {
        let vi = self.labels.entry(from)?.eigen_index;
        let vf = self.labels.entry(to)?.eigen_index;
        let k = self.ph.dim();
        let x: Vec<f64> = (0..k).map(|a| self.eigenvectors[(a, vi)]).collect();
        let mut mx = vec![0.0; k];
        self.ph
            .apply_site_operator(&self.model.sites[site].n_imag, site, &x, &mut mx);
        Ok((0..k).map(|a| self.eigenvectors[(a, vf)] * mx[a]).sum())
    }

    /// The dressed eigenvector of a labeled state, as a kept-basis column.
    pub fn labeled_vector(&self, label: &[usize]) -> Result<Vec<f64>> {
        let idx = self.labels.entry(label)?.eigen_index;
        Ok((0..self.ph.dim())
            .map(|a| self.eigenvectors[(a, idx)])
            .collect())
    }
}

/// Occupation label for qubit `k` at `level` with the other fluxoniums per
/// `others` (in qubit order, skipping k) and all couplers grounded.
fn row_label(n_neighbors: usize, k: usize, level: usize, others: &[u8]) -> Vec<usize> {
    let nq = n_neighbors + 1;
    debug_assert_eq!(others.len(), nq - 1);
    let mut qubit_occ = Vec::with_capacity(nq);
    qubit_occ.extend(others[..k].iter().map(|&b| b as usize));
    qubit_occ.push(level);
    qubit_occ.extend(others[k..].iter().map(|&b| b as usize));
    let mut occ = vec![qubit_occ[0]];
    for &q in &qubit_occ[1..] {
        occ.push(q);
        occ.push(0);
    }
    occ
}

/// Computational label: central fluxonium at `level`, neighbors per `config`,
/// couplers grounded.
pub fn central_label(level: usize, config: &NeighborConfig) -> Vec<usize> {
    row_label(config.0.len(), 0, level, &config.0)
}

/// A neighbor-state-dependent shift observation: the dressed central
/// |1⟩↔|2⟩ frequency at the given config minus the all-ground reference,
/// with an ambiguity flag when any involved label fell below the overlap
/// floor.
#[derive(Debug, Clone, Copy)]
pub struct Shift {
    pub value: f64,
    pub ambiguous: bool,
}

fn central_plasmon(
    spectrum: &LabeledSpectrum,
    config: &NeighborConfig,
) -> Result<(f64, bool)> {
    let lo = central_label(1, config);
    let hi = central_label(2, config);
    let f = spectrum.dressed_transition(&lo, &hi)?;
    let amb = spectrum.is_ambiguous(&lo)? || spectrum.is_ambiguous(&hi)?;
    Ok((f, amb))
}

/// Shift of the central plasmon (1↔2) frequency when the neighbors are in
/// `config`, relative to the all-ground neighbor configuration. Referencing
/// against the dressed all-ground frequency cancels the static
/// coupler-induced renormalization.
pub fn state_dependent_shift(system: &StarSystem, config: &NeighborConfig) -> Result<Shift> {
    config.validate(system.n_neighbors())?;
    let spectrum = labeled_spectrum(system)?;
    shift_from_spectrum(&spectrum, config)
}

fn shift_from_spectrum(spectrum: &LabeledSpectrum, config: &NeighborConfig) -> Result<Shift> {
    let zeros = NeighborConfig::zeros(config.0.len());
    let (f_s, amb_s) = central_plasmon(spectrum, config)?;
    let (f_0, amb_0) = central_plasmon(spectrum, &zeros)?;
    Ok(Shift {
        value: f_s - f_0,
        ambiguous: amb_s || amb_0,
    })
}

/// One coupling-strength grid point of [`shift_sweep`].
#[derive(Debug, Clone)]
pub struct SweepPoint {
    /// Coupler-fluxonium coupling strength J at this point, GHz.
    pub j: f64,
    /// Single-neighbor shifts δ_{e_j}, one per neighbor, GHz.
    pub singles: Vec<f64>,
    /// All-ones shift δ_1⃗, GHz.
    pub ones: f64,
    /// Σ_j δ_{e_j}, GHz.
    pub sum_singles: f64,
    /// |ones − sum_singles| / |ones| (0 when ones = 0).
    pub residual: f64,
    /// Any involved label fell below the overlap floor.
    pub ambiguous: bool,
    /// Additivity residual exceeded [`BREAKDOWN_RESIDUAL`].
    pub breakdown_residual: bool,
    /// Shift jumped by more than [`BREAKDOWN_JUMP_FACTOR`] × the preceding
    /// step between cleanly labeled points.
    pub breakdown_jump: bool,
}

impl SweepPoint {
    pub fn breakdown(&self) -> bool {
        self.breakdown_residual || self.breakdown_jump
    }
}

/// System with all coupler-fluxonium couplings set to `j` and the direct
/// couplings scaled proportionally (same capacitive origin), so j = 0
/// decouples everything.
fn scaled_system(system: &StarSystem, j: f64) -> StarSystem {
    let j_ref = system
        .j_c0
        .iter()
        .chain(&system.j_cj)
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let scale = if j_ref > 0.0 { j / j_ref } else { 1.0 };
    let mut out = system.clone();
    for v in &mut out.j_c0 {
        *v = j;
    }
    for v in &mut out.j_cj {
        *v = j;
    }
    for v in &mut out.j_0j {
        *v *= scale;
    }
    out
}

/// Single grid point of the coupling-strength sweep: all single-neighbor
/// shifts, the all-ones shift, and the additivity residual at
/// coupler-fluxonium coupling `j` (GHz). Jump flags are filled in by
/// [`shift_sweep`], which sees the whole series.
pub fn shift_sweep_point(system: &StarSystem, j: f64) -> Result<SweepPoint> {
    let n = system.n_neighbors();
    let spectrum = labeled_spectrum(&scaled_system(system, j))?;
    let mut singles = Vec::with_capacity(n);
    let mut ambiguous = false;
    for jn in 0..n {
        let s = shift_from_spectrum(&spectrum, &NeighborConfig::unit(n, jn))?;
        singles.push(s.value);
        ambiguous |= s.ambiguous;
    }
    let ones = shift_from_spectrum(&spectrum, &NeighborConfig::ones(n))?;
    ambiguous |= ones.ambiguous;
    let sum_singles: f64 = singles.iter().sum();
    let residual = if ones.value == 0.0 {
        0.0
    } else {
        (ones.value - sum_singles).abs() / ones.value.abs()
    };
    Ok(SweepPoint {
        j,
        singles,
        ones: ones.value,
        sum_singles,
        residual,
        ambiguous,
        breakdown_residual: residual > BREAKDOWN_RESIDUAL,
        breakdown_jump: false,
    })
}

/// Sweep the coupler-fluxonium coupling strength over `j_values` (sorted
/// ascending) and record, per point, the single-neighbor and all-ones
/// shifts, the additivity residual, and breakdown flags.
///
/// Jump detection compares only consecutive cleanly labeled points: near an
/// avoided crossing the maximum-overlap identity itself is uncertain (no
/// adiabatic branch tracking is attempted), so apparent jumps between
/// ambiguous points carry the ambiguity flag instead of a breakdown flag.
pub fn shift_sweep(system: &StarSystem, j_values: &[f64]) -> Result<Vec<SweepPoint>> {
    if j_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidSpec(
            "sweep coupling values must be sorted ascending".into(),
        ));
    }
    let mut points: Vec<SweepPoint> = j_values
        .iter()
        .map(|&j| shift_sweep_point(system, j))
        .collect::<Result<_>>()?;
    mark_jumps(&mut points);
    Ok(points)
}

/// Flag abrupt jumps on the clean-point subsequence of each shift series.
pub fn mark_jumps(points: &mut [SweepPoint]) {
    let n_series = points.first().map_or(0, |p| p.singles.len() + 1);
    for series in 0..n_series {
        let value = |p: &SweepPoint| {
            if series == 0 {
                p.ones
            } else {
                p.singles[series - 1]
            }
        };
        let mut prev: Option<(usize, f64)> = None; // (index, value) of last clean point
        let mut prev_step: Option<f64> = None;
        for i in 0..points.len() {
            if points[i].ambiguous {
                continue;
            }
            let v = value(&points[i]);
            if let Some((_, pv)) = prev {
                let step = (v - pv).abs();
                if let Some(ps) = prev_step {
                    if ps > 0.0 && step > BREAKDOWN_JUMP_FACTOR * ps {
                        points[i].breakdown_jump = true;
                    }
                }
                prev_step = Some(step);
            }
            prev = Some((i, v));
        }
    }
}

/// One row of a [`TransitionTable`]: the dressed |1⟩↔|2⟩ frequency of
/// fluxonium `fluxonium` with the other fluxoniums fixed to `others`
/// (in qubit order, skipping `fluxonium`) and all couplers grounded.
#[derive(Debug, Clone)]
pub struct TransitionRow {
    pub fluxonium: usize,
    pub others: Vec<u8>,
    /// Dressed transition frequency, GHz.
    pub frequency: f64,
    /// frequency − gate_frequency, GHz.
    pub detuning: f64,
    /// Smaller of the two involved label overlaps.
    pub overlap: f64,
    pub ambiguous: bool,
}

/// Per-fluxonium plasmon transition frequencies for every computational
/// configuration of the other fluxoniums, the gate transition (central
/// fluxonium, all neighbors excited), and the minimum signed detuning of
/// any other row from it.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub rows: Vec<TransitionRow>,
    /// Index of the gate row in `rows`.
    pub gate_row: usize,
    /// Dressed gate transition frequency, GHz.
    pub gate_frequency: f64,
    /// Signed detuning of the nearest non-gate row, GHz.
    pub min_detuning: f64,
    /// Index of that nearest row in `rows`.
    pub min_detuning_row: usize,
}

/// Enumerate, for every fluxonium, the dressed plasmon frequency under every
/// computational configuration of the other fluxoniums (couplers grounded),
/// and compute the gate frequency and the minimum signed detuning.
pub fn transition_table(system: &StarSystem) -> Result<TransitionTable> {
    let spectrum = labeled_spectrum(system)?;
    transition_table_from_spectrum(system.n_neighbors(), &spectrum)
}

/// Table construction for an already labeled spectrum.
pub fn transition_table_from_spectrum(
    n_neighbors: usize,
    spectrum: &LabeledSpectrum,
) -> Result<TransitionTable> {
    let nq = n_neighbors + 1;
    let mut rows = Vec::with_capacity(nq << (nq - 1));
    let mut gate_row = None;
    for k in 0..nq {
        for mask in 0..(1usize << (nq - 1)) {
            // lexicographic over the other-qubit bits
            let others: Vec<u8> = (0..nq - 1)
                .map(|b| ((mask >> (nq - 2 - b)) & 1) as u8)
                .collect();
            let lo = row_label(n_neighbors, k, 1, &others);
            let hi = row_label(n_neighbors, k, 2, &others);
            let e_lo = spectrum.entry(&lo)?;
            let e_hi = spectrum.entry(&hi)?;
            let overlap = e_lo.overlap.min(e_hi.overlap);
            if k == 0 && others.iter().all(|&b| b == 1) {
                gate_row = Some(rows.len());
            }
            rows.push(TransitionRow {
                fluxonium: k,
                others,
                frequency: spectrum.eigenvalues[e_hi.eigen_index]
                    - spectrum.eigenvalues[e_lo.eigen_index],
                detuning: 0.0,
                overlap,
                ambiguous: overlap < AMBIGUITY_FLOOR,
            });
        }
    }
    let gate_row = gate_row.expect("gate configuration enumerated");
    let gate_frequency = rows[gate_row].frequency;
    let mut min_detuning = f64::INFINITY;
    let mut min_row = gate_row;
    for (i, row) in rows.iter_mut().enumerate() {
        row.detuning = row.frequency - gate_frequency;
        if i != gate_row && row.detuning.abs() < min_detuning.abs() {
            min_detuning = row.detuning;
            min_row = i;
        }
    }
    Ok(TransitionTable {
        rows,
        gate_row,
        gate_frequency,
        min_detuning,
        min_detuning_row: min_row,
    })
}

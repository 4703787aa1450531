//! Drive calibration for the microwave-activated (C^⊗N)Z gates: analytic
//! initial guesses, derivative-free tune-up of drive amplitude and
//! frequency, and gate-error-versus-length sweeps.
//!
//! The tune-up cost is `leakage + w·(φ_cond − π)²` (default `w` = 1 rad⁻²),
//! minimized over `(Ω_d, ω_drive)` with a deterministic Nelder–Mead simplex.
//! Fidelity is the *reported* metric, not the optimization target: reports
//! come from a final evaluation against the (C^⊗N)Z target with local-Z
//! corrections.
//!
//! Cost evaluations dominate the runtime (each is a full time-domain gate
//! simulation), so the search is staged:
//!
//! 1. **Search** on a low-energy projection of the circuit, at a relaxed
//!    time step (the step-resolution rule needs the drive carrier and
//!    envelope resolved; report-grade accuracy is not needed to rank
//!    candidate drives).
//! 2. **Polish** (optional, budget permitting) on the requested working
//!    space, still at the relaxed step, from a tight simplex.
//! 3. **Carrier trim**: a secant step on the drive frequency alone zeroes
//!    the residual conditional-phase error (≤ 3 extra evaluations).
//! 4. **Report** on the requested working space at the requested step.
//!
//! The optimizer works in frame-intrinsic coordinates — amplitude relative
//! to the area rule evaluated *with that frame's own* gate matrix element,
//! carrier as a detuning from *that frame's own* gate transition — so a
//! common-mode spectral shift between the projected and full circuit moves
//! the anchors, not the optimum, and stage-1 optima transfer directly to
//! the full working space.

use crate::dynamics::{
    evolve_with_frame, gate_frame, GateFrame, PropagationConfig, STEP_RESOLUTION_LIMIT,
};
use crate::error::{Error, Result};
use crate::metrics::{
    conditional_phase, diagonal_phases, gate_report, wrap_phase, GateReport,
    DEFAULT_DOMINANCE_THRESHOLD,
};
use crate::pulses::{pulse_area, DrivePulse, PulseShape};
use crate::spectrum::{central_label, dressed_system, transition_table, NeighborConfig};
use crate::circuit::StarSystem;

use std::f64::consts::PI;

/// Below this spurious-transition spacing (GHz) the gate transition is not
/// addressable and calibration refuses to start.
const MIN_ADDRESSABLE_DETUNING: f64 = 1e-6;

/// Optimizer and evaluation settings for [`tune_up`].
#[derive(Debug, Clone)]
pub struct TuneUpConfig {
    /// Total cost-evaluation budget across both stages.
    pub max_evaluations: usize,
    /// Weight `w` of the conditional-phase term, rad⁻².
    pub phase_weight: f64,
    /// Low-energy cutoff (GHz) for the search-stage circuit model; `None`
    /// runs the whole search on the requested working space.
    pub coarse_cutoff: Option<f64>,
    /// Evaluation budget reserved for re-polishing the optimum on the
    /// requested working space (only used when `coarse_cutoff` is set;
    /// `0` skips straight to the carrier trim, which is usually enough
    /// thanks to the frame-intrinsic coordinates).
    pub polish_evaluations: usize,
    /// Add the derivative-quadrature correction to the pulse, referenced to
    /// the nearest spurious transition (sign chosen so the quadrature
    /// suppresses it).
    pub drag: bool,
    /// Propagation settings for the final (reported) evaluation; the search
    /// stage overrides only the projection cutoff.
    pub propagation: PropagationConfig,
    /// Off-diagonal weight threshold for phase readout.
    pub dominance_threshold: f64,
}

impl Default for TuneUpConfig {
    fn default() -> Self {
        Self {
            max_evaluations: 200,
            phase_weight: 1.0,
            coarse_cutoff: Some(10.0),
            polish_evaluations: 16,
            drag: true,
            propagation: PropagationConfig::default(),
            dominance_threshold: DEFAULT_DOMINANCE_THRESHOLD,
        }
    }
}

/// Outcome of one gate tune-up.
#[derive(Debug, Clone)]
pub struct TuneUpResult {
    /// Optimized drive amplitude, GHz.
    pub omega_d_amp: f64,
    /// Optimized drive frequency, GHz.
    pub omega_drive: f64,
    /// Metrics of the optimized gate on the full working space.
    pub report: GateReport,
    /// `(evaluation index, cost)` for every cost evaluation, in order.
    pub cost_trace: Vec<(usize, f64)>,
    /// True when the simplex collapsed below tolerance within budget.
    pub converged: bool,
}

/// Default flat-top ramp time (ns) per neighbor count.
pub fn default_ramp_time(n_neighbors: usize) -> f64 {
    match n_neighbors {
        0 | 1 | 2 => 10.0,
        3 => 20.0,
        _ => 30.0,
    }
}

/// Analytic starting point for the gate drive: carrier on the dressed gate
/// transition (central |1⟩↔|2⟩ with every neighbor in |1⟩), amplitude from
/// inverting the pulse area so that one full cycle of the target transition
/// fits in the gate window: `area(Ω_d)·|m| = 1` with `m` the dressed charge
/// matrix element of the gate transition on the driven (central) site.
pub fn initial_guess(
    system: &StarSystem,
    shape: PulseShape,
    t_g: f64,
    t_r: f64,
) -> Result<(f64, f64)> {
    let ds = dressed_system(system)?;
    let ones = NeighborConfig::ones(system.n_neighbors());
    let from = central_label(1, &ones);
    let to = central_label(2, &ones);
    let omega_drive = ds.labels.dressed_transition(&from, &to)?;
    let m = ds.charge_element(0, &from, &to)?.abs();
    if m < 1e-10 {
        return Err(Error::Calibration(format!(
            "gate-transition drive matrix element vanishes ({m:.3e}); \
             the transition cannot be driven from the central site"
        )));
    }
    // Unit-amplitude pulse area → required amplitude by linear scaling.
    let probe = DrivePulse::new(shape, 1.0, omega_drive, t_g).with_ramp(t_r);
    let unit_area = pulse_area(&probe)?;
    if unit_area <= 0.0 {
        return Err(Error::Calibration(
            "pulse envelope encloses no area; cannot size the drive".into(),
        ));
    }
    Ok((1.0 / (unit_area * m), omega_drive))
}

/// Frame-intrinsic drive anchors: the frame's own dressed gate-transition
/// frequency and the area-rule amplitude unit from its own matrix element.
/// Optimizer coordinates are expressed relative to these, so they transfer
/// between working spaces whose spectra differ by a common-mode shift.
#[derive(Debug, Clone, Copy)]
struct DriveAnchor {
    /// Area-rule amplitude (GHz): one full cycle of the gate transition.
    om0: f64,
    /// Dressed gate-transition frequency (GHz).
    f_gate: f64,
}

fn drive_anchor(
    frame: &GateFrame,
    shape: PulseShape,
    t_g: f64,
    t_r: f64,
) -> Result<DriveAnchor> {
    let ones = NeighborConfig::ones(frame.system.n_neighbors());
    let from = central_label(1, &ones);
    let to = central_label(2, &ones);
    let f_gate = frame.transition(&from, &to)?;
    let m = frame.drive_element(0, &from, &to)?.abs();
    if m < 1e-10 {
        return Err(Error::Calibration(format!(
            "gate-transition drive matrix element vanishes ({m:.3e}); \
             the transition cannot be driven from the central site"
        )));
    }
    let probe = DrivePulse::new(shape, 1.0, f_gate, t_g).with_ramp(t_r);
    let unit_area = pulse_area(&probe)?;
    if unit_area <= 0.0 {
        return Err(Error::Calibration(
            "pulse envelope encloses no area; cannot size the drive".into(),
        ));
    }
    Ok(DriveAnchor {
        om0: 1.0 / (unit_area * m),
        f_gate,
    })
}

/// Everything fixed during one tune-up stage: the dressed frame, the pulse
/// template, and the coordinate anchors. Only `(Ω_d, ω_drive)` vary.
struct CostContext<'a> {
    frame: &'a GateFrame,
    propagation: PropagationConfig,
    shape: PulseShape,
    t_g: f64,
    t_r: f64,
    drag_detuning: Option<f64>,
    phase_weight: f64,
    dominance_threshold: f64,
    n_neighbors: usize,
    anchor: DriveAnchor,
    detuning_scale: f64,
}

impl CostContext<'_> {
    /// Map normalized coordinates to `(Ω_d, ω_drive)` through this frame's
    /// own anchors.
    fn params(&self, x: &[f64; 2]) -> (f64, f64) {
        (
            x[0] * self.anchor.om0,
            self.anchor.f_gate + x[1] * self.detuning_scale,
        )
    }

    fn pulse(&self, omega_d_amp: f64, omega_drive: f64) -> DrivePulse {
        let mut p = DrivePulse::new(self.shape, omega_d_amp, omega_drive, self.t_g)
            .with_ramp(self.t_r);
        if let Some(det) = self.drag_detuning {
            p = p.with_drag(det);
        }
        p
    }

    /// Cost `leakage + w·(φ_cond − π)²` and the signed conditional-phase
    /// error. `(+∞, None)` when the point is unphysical or the metrics are
    /// unreadable (the optimizer treats it as a wall).
    fn probe(&self, omega_d_amp: f64, omega_drive: f64) -> (f64, Option<f64>) {
        if !(omega_d_amp > 0.0) || !(omega_drive > 0.0) {
            return (f64::INFINITY, None);
        }
        let pulse = self.pulse(omega_d_amp, omega_drive);
        let drives = [(0usize, pulse)];
        let out = match evolve_with_frame(self.frame, &drives, None, &self.propagation) {
            Ok(o) => o,
            Err(_) => return (f64::INFINITY, None),
        };
        let leak = crate::metrics::leakage(&out.u_comp);
        let phases = match diagonal_phases(&out.u_comp, self.dominance_threshold) {
            Ok(p) => p,
            Err(_) => return (f64::INFINITY, None),
        };
        let cond = match conditional_phase(&phases, self.n_neighbors) {
            Ok(c) => c,
            Err(_) => return (f64::INFINITY, None),
        };
        let dphi = wrap_phase(cond - PI);
        (leak + self.phase_weight * dphi * dphi, Some(dphi))
    }

    fn probe_x(&self, x: &[f64; 2]) -> (f64, Option<f64>) {
        let (a, w) = self.params(x);
        self.probe(a, w)
    }

    fn cost_x(&self, x: &[f64; 2]) -> f64 {
        self.probe_x(x).0
    }
}

/// Conditional-phase error is, to excellent approximation, linear in the
/// carrier near the optimum (slope ≈ −2π·t_eff). One secant step on the
/// carrier alone therefore zeroes it far more cheaply than more simplex
/// iterations. Uses ≤ 3 evaluations; keeps whichever probed point had the
/// lowest cost, so it can only improve on `x`.
fn phase_trim(
    ctx: &CostContext<'_>,
    x: [f64; 2],
    trace: &mut Vec<(usize, f64)>,
) -> [f64; 2] {
    /// Phase errors below this (rad) are not worth two more evaluations.
    const TRIM_FLOOR: f64 = 2e-4;
    /// Secant baseline offset, in detuning-scale units.
    const SECANT_STEP: f64 = 1e-3;
    /// Trust region for the Newton step, in detuning-scale units.
    const TRIM_CAP: f64 = 0.05;

    let push = |trace: &mut Vec<(usize, f64)>, c: f64| trace.push((trace.len(), c));
    let (c0, d0) = ctx.probe_x(&x);
    push(trace, c0);
    let (Some(d0), true) = (d0, c0.is_finite()) else {
        return x;
    };
    if d0.abs() < TRIM_FLOOR {
        return x;
    }
    let xh = [x[0], x[1] + SECANT_STEP];
    let (ch, dh) = ctx.probe_x(&xh);
    push(trace, ch);
    let mut best = (x, c0);
    if ch < best.1 {
        best = (xh, ch);
    }
    let Some(dh) = dh else {
        return best.0;
    };
    let slope = (dh - d0) / SECANT_STEP;
    if !slope.is_finite() || slope.abs() < 1e-3 {
        return best.0;
    }
    let step = (-d0 / slope).clamp(-TRIM_CAP, TRIM_CAP);
    let xt = [x[0], x[1] + step];
    let (ct, _) = ctx.probe_x(&xt);
    push(trace, ct);
    if ct < best.1 {
        best = (xt, ct);
    }
    best.0
}

/// Deterministic Nelder–Mead on ℝ², minimizing `f`. Terminates when the
/// simplex diameter drops below `tol` (∞-norm) or the budget runs out.
/// Returns the best point seen, its cost, and whether it converged.
/// Every evaluation is appended to `trace` with a running global index.
fn nelder_mead_2d(
    f: &mut dyn FnMut(&[f64; 2]) -> f64,
    x0: [f64; 2],
    spread: [f64; 2],
    budget: usize,
    tol: f64,
    trace: &mut Vec<(usize, f64)>,
) -> ([f64; 2], f64, bool) {
    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const RHO: f64 = 0.5; // contraction
    const SIGMA: f64 = 0.5; // shrink

    let mut evals = 0usize;
    let mut best_x = x0;
    let mut best_c = f64::INFINITY;
    let mut eval = |x: &[f64; 2],
                    evals: &mut usize,
                    best_x: &mut [f64; 2],
                    best_c: &mut f64,
                    trace: &mut Vec<(usize, f64)>| {
        let c = f(x);
        trace.push((trace.len(), c));
        *evals += 1;
        if c < *best_c {
            *best_c = c;
            *best_x = *x;
        }
        c
    };

    let mut simplex: Vec<([f64; 2], f64)> = Vec::with_capacity(3);
    let vertices = [
        x0,
        [x0[0] + spread[0], x0[1]],
        [x0[0], x0[1] + spread[1]],
    ];
    for v in vertices {
        if evals >= budget {
            return (best_x, best_c, false);
        }
        let c = eval(&v, &mut evals, &mut best_x, &mut best_c, trace);
        simplex.push((v, c));
    }

    let mut converged = false;
    while evals < budget {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let (xb, cb) = simplex[0];
        let (_, cs) = simplex[1];
        let (xw, cw) = simplex[2];
        let diam = simplex
            .iter()
            .flat_map(|(v, _)| {
                simplex
                    .iter()
                    .map(move |(u, _)| (v[0] - u[0]).abs().max((v[1] - u[1]).abs()))
            })
            .fold(0.0f64, f64::max);
        if diam <= tol {
            converged = true;
            break;
        }
        let centroid = [(xb[0] + simplex[1].0[0]) / 2.0, (xb[1] + simplex[1].0[1]) / 2.0];
        let xr = [
            centroid[0] + ALPHA * (centroid[0] - xw[0]),
            centroid[1] + ALPHA * (centroid[1] - xw[1]),
        ];
        let cr = eval(&xr, &mut evals, &mut best_x, &mut best_c, trace);
        if cr < cb {
            // Try to expand.
            if evals >= budget {
                simplex[2] = (xr, cr);
                break;
            }
            let xe = [
                centroid[0] + GAMMA * (xr[0] - centroid[0]),
                centroid[1] + GAMMA * (xr[1] - centroid[1]),
            ];
            let ce = eval(&xe, &mut evals, &mut best_x, &mut best_c, trace);
            simplex[2] = if ce < cr { (xe, ce) } else { (xr, cr) };
        } else if cr < cs {
            simplex[2] = (xr, cr);
        } else {
            // Contract (outside if the reflection helped at all).
            if evals >= budget {
                break;
            }
            let (base, cbase) = if cr < cw { (xr, cr) } else { (xw, cw) };
            let xc = [
                centroid[0] + RHO * (base[0] - centroid[0]),
                centroid[1] + RHO * (base[1] - centroid[1]),
            ];
            let cc = eval(&xc, &mut evals, &mut best_x, &mut best_c, trace);
            if cc < cbase {
                simplex[2] = (xc, cc);
            } else {
                // Shrink toward the best vertex.
                for i in 1..3 {
                    if evals >= budget {
                        break;
                    }
                    let v = [
                        xb[0] + SIGMA * (simplex[i].0[0] - xb[0]),
                        xb[1] + SIGMA * (simplex[i].0[1] - xb[1]),
                    ];
                    let c = eval(&v, &mut evals, &mut best_x, &mut best_c, trace);
                    simplex[i] = (v, c);
                }
            }
        }
    }
    (best_x, best_c, converged)
}

/// Calibrate `(Ω_d, ω_drive)` for the (C^⊗N)Z gate of `system` at gate
/// length `t_g` (envelope ramp `t_r`), minimizing leakage plus
/// conditional-phase error, then evaluate the optimum on the requested
/// working space and report fidelity/leakage/phases against the (C^⊗N)Z
/// target. See the module docs for the staging.
pub fn tune_up(
    system: &StarSystem,
    shape: PulseShape,
    t_g: f64,
    t_r: f64,
    config: &TuneUpConfig,
) -> Result<TuneUpResult> {
    /// Simplex-diameter convergence tolerances (normalized coordinates).
    const SEARCH_TOL: f64 = 2e-3;
    const POLISH_TOL: f64 = 1e-4;

    let n_neighbors = system.n_neighbors();
    let table = transition_table(system)?;
    let detuning_scale = table.min_detuning.abs();
    if detuning_scale < MIN_ADDRESSABLE_DETUNING {
        return Err(Error::Calibration(format!(
            "nearest spurious transition is {:.3e} GHz from the gate \
             transition: no state-selective addressing (couplings off?)",
            table.min_detuning
        )));
    }
    // Quadrature reference: drive minus spurious. The table's detuning is
    // spurious minus gate, so the sign flips.
    let drag_detuning = if config.drag {
        Some(-table.min_detuning)
    } else {
        None
    };

    // Report frame: the user-requested working space and anchors.
    let final_frame = gate_frame(system, &[0], &config.propagation)?;
    let final_anchor = drive_anchor(&final_frame, shape, t_g, t_r)?;

    // Search stages run at a relaxed step: the step-resolution rule needs
    // the carrier and envelope resolved, with headroom for the simplex to
    // wander, but not the report-grade step.
    let bandwidth = match shape {
        PulseShape::FlatTopCosine => {
            if t_r > 0.0 {
                0.5 / t_r
            } else {
                0.0
            }
        }
        _ => 1.0 / t_g,
    };
    let f_search = final_anchor.f_gate + detuning_scale + bandwidth + 0.25;
    let dt_relaxed = (0.95 * STEP_RESOLUTION_LIMIT / f_search).max(config.propagation.dt);
    let relaxed = |cutoff: Option<f64>| PropagationConfig {
        dt: dt_relaxed,
        project_cutoff: cutoff,
        ..config.propagation.clone()
    };
    fn hrtb<F>(f: F) -> F
    where
        F: for<'a> Fn(&'a GateFrame, PropagationConfig) -> Result<CostContext<'a>>,
    {
        f
    }
    let stage_ctx = hrtb(|frame, prop| {
        Ok(CostContext {
            anchor: drive_anchor(frame, shape, t_g, t_r)?,
            frame,
            propagation: prop,
            shape,
            t_g,
            t_r,
            drag_detuning,
            phase_weight: config.phase_weight,
            dominance_threshold: config.dominance_threshold,
            n_neighbors,
            detuning_scale,
        })
    });

    let coarse_frame = match config.coarse_cutoff {
        Some(cutoff) => Some(gate_frame(system, &[0], &relaxed(Some(cutoff)))?),
        None => None,
    };
    let (polish_budget, search_budget) = match &coarse_frame {
        Some(_) => {
            let p = config.polish_evaluations.min(config.max_evaluations / 2);
            (p, config.max_evaluations - p)
        }
        None => (0, config.max_evaluations),
    };

    let mut trace: Vec<(usize, f64)> = Vec::new();

    // Stage 1: search, from the area-rule/on-resonance starting point.
    let (x1, c1, conv1) = {
        let ctx = match &coarse_frame {
            Some(frame) => stage_ctx(frame, relaxed(config.coarse_cutoff))?,
            None => stage_ctx(&final_frame, relaxed(config.propagation.project_cutoff))?,
        };
        let mut f1 = |x: &[f64; 2]| ctx.cost_x(x);
        nelder_mead_2d(
            &mut f1,
            [1.0, 0.0],
            [0.1, 0.1],
            search_budget,
            SEARCH_TOL,
            &mut trace,
        )
    };
    if !c1.is_finite() {
        return Err(Error::Calibration(
            "no finite cost found within the evaluation budget".into(),
        ));
    }

    // Stage 2 (optional): tight-simplex polish on the requested working
    // space; the frame-intrinsic coordinates make x1 directly transferable.
    let final_ctx = stage_ctx(&final_frame, relaxed(config.propagation.project_cutoff))?;
    let (x2, converged) = if coarse_frame.is_some() && polish_budget >= 4 {
        let mut f2 = |x: &[f64; 2]| final_ctx.cost_x(x);
        let (x2, c2, conv2) = nelder_mead_2d(
            &mut f2,
            x1,
            [0.01, 0.01],
            polish_budget,
            POLISH_TOL,
            &mut trace,
        );
        if !c2.is_finite() {
            return Err(Error::Calibration(
                "full-model polish found no finite cost".into(),
            ));
        }
        (x2, conv1 || conv2)
    } else {
        (x1, conv1)
    };

    // Stage 3: carrier trim on the requested working space.
    let x_best = phase_trim(&final_ctx, x2, &mut trace);

    // Stage 4: report at the requested propagation settings.
    let (omega_d_amp, omega_drive) = final_ctx.params(&x_best);
    let pulse = final_ctx.pulse(omega_d_amp, omega_drive);
    let drives = [(0usize, pulse)];
    let out = evolve_with_frame(&final_frame, &drives, None, &config.propagation)?;
    let report = gate_report(&out.u_comp, n_neighbors, config.dominance_threshold)?;

    Ok(TuneUpResult {
        omega_d_amp,
        omega_drive,
        report,
        cost_trace: trace,
        converged,
    })
}

/// One point of an error-versus-gate-length sweep.
#[derive(Debug)]
pub struct LengthSweepPoint {
    /// Gate length, ns.
    pub t_g: f64,
    /// Tune-up outcome; failures are recorded and the sweep continues.
    pub outcome: Result<TuneUpResult>,
}

/// Independently tune the gate at every length in `t_g_list` (ascending)
/// and collect errors, leakage, and optimized parameters. Flat-top ramp
/// times default per neighbor count (see [`default_ramp_time`]); pass
/// `t_r` to override.
pub fn error_vs_length_sweep(
    system: &StarSystem,
    shape: PulseShape,
    t_g_list: &[f64],
    t_r: Option<f64>,
    config: &TuneUpConfig,
) -> Result<Vec<LengthSweepPoint>> {
    if t_g_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSpec(
            "gate lengths must be strictly ascending".into(),
        ));
    }
    let ramp = t_r.unwrap_or_else(|| default_ramp_time(system.n_neighbors()));
    Ok(t_g_list
        .iter()
        .map(|&t_g| {
            let t_r_here = match shape {
                PulseShape::FlatTopCosine => ramp.min(t_g / 2.0),
                _ => 0.0,
            };
            LengthSweepPoint {
                t_g,
                outcome: tune_up(system, shape, t_g, t_r_here, config),
            }
        })
        .collect())
}

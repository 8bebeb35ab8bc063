//! Hybrid equations of motion and their time integration.
//!
//! A [`ModelSpec`] bundles the classical Hamiltonian, the quantum Hamiltonian
//! matrix and the interaction observable; its [`PhaseFunction`] impl is the
//! total energy, and every flow routine here integrates the canonical field
//! of that scalar. The workhorse integrator is the implicit midpoint rule,
//! which is symplectic and preserves quadratic invariants of the flow, the
//! amplitude constraint in particular, to solver accuracy.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::observables::{
    fd_step, ClassicalObservable, HermitianMatrix, HybridObservable, PhaseFunction, PhaseGradient,
    QuadraticObservable,
};
use crate::phase_space::{decode_state, BasisSet, ClassicalPoint, HybridPoint, QuantumPhasePoint};

/// Largest admissible sub-step for [`canonical_step_with`].
pub const MAX_CANONICAL_SUBSTEP: f64 = 1e-3;

/// Default sub-step for [`canonical_step`]. The midpoint map applied to a
/// quadratic generator picks up a phase defect of order `substep^2` per unit
/// parameter; this default keeps a unit-strength transformation canonical to
/// well below 1e-10.
pub const DEFAULT_CANONICAL_SUBSTEP: f64 = 2e-5;

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

/// A complete hybrid system.
///
/// The total energy is `H_cl(x, p) + <H_qm> + <I>`; the interaction may be
/// identically zero, purely classical, or a full matrix field. `ModelSpec`
/// implements [`PhaseFunction`], so brackets and flows treat the total energy
/// like any other observable.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    h_cl: ClassicalObservable,
    h_qm: QuadraticObservable,
    interaction: HybridObservable,
    basis: BasisSet,
    validated_range: Option<f64>,
}

impl ModelSpec {
    pub fn new(
        h_cl: ClassicalObservable,
        h_qm: HermitianMatrix,
        interaction: HybridObservable,
        basis: BasisSet,
    ) -> Result<Self> {
        if basis.dim() != h_qm.dim() {
            return Err(Error::DimensionMismatch {
                context: "model basis",
                expected: h_qm.dim(),
                actual: basis.dim(),
            });
        }
        if let Some(nq) = interaction.qm_dim() {
            if nq != h_qm.dim() {
                return Err(Error::DimensionMismatch {
                    context: "model interaction quantum sector",
                    expected: h_qm.dim(),
                    actual: nq,
                });
            }
        }
        if let Some(n) = interaction.cl_dim() {
            if n != h_cl.dim() {
                return Err(Error::DimensionMismatch {
                    context: "model interaction classical sector",
                    expected: h_cl.dim(),
                    actual: n,
                });
            }
        }
        Ok(Self {
            h_cl,
            h_qm: QuadraticObservable::new(h_qm),
            interaction,
            basis,
            validated_range: None,
        })
    }

    /// Records the half-width of the classical position range over which the
    /// interaction has been numerically validated.
    pub fn with_validated_range(mut self, half_width: f64) -> Self {
        self.validated_range = Some(half_width);
        self
    }

    pub fn cl_dim(&self) -> usize {
        self.h_cl.dim()
    }

    pub fn qm_dim(&self) -> usize {
        self.h_qm.dim()
    }

    pub fn h_cl(&self) -> &ClassicalObservable {
        &self.h_cl
    }

    pub fn h_qm(&self) -> &HermitianMatrix {
        self.h_qm.matrix()
    }

    pub fn interaction(&self) -> &HybridObservable {
        &self.interaction
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    /// `None` when the interaction is exact everywhere.
    pub fn validated_range(&self) -> Option<f64> {
        self.validated_range
    }

    /// True when every classical position lies inside the validated range.
    pub fn within_validated_range(&self, pt: &ClassicalPoint) -> bool {
        match self.validated_range {
            None => true,
            Some(r) => pt.x().iter().all(|v| v.abs() <= r),
        }
    }

    /// Total energy at `h`.
    pub fn total_hamiltonian(&self, h: &HybridPoint) -> Result<f64> {
        self.value(h)
    }

    /// Effective Hermitian generator of the quantum sector at a frozen
    /// classical point, `H_qm + M_I(x, p)`.
    pub fn quantum_generator(&self, pt: &ClassicalPoint) -> Result<HermitianMatrix> {
        match self.interaction.matrix_at(pt)? {
            Some(m) => self.h_qm.matrix().add(&m),
            None => Ok(self.h_qm.matrix().clone()),
        }
    }

    /// Summed occupation of the top `levels` basis states. Initial data for
    /// truncated oscillator models should keep this negligible.
    pub fn tail_occupation(&self, q: &QuantumPhasePoint, levels: usize) -> Result<f64> {
        let nq = self.qm_dim();
        if q.dim() != nq {
            return Err(Error::DimensionMismatch {
                context: "tail occupation state",
                expected: nq,
                actual: q.dim(),
            });
        }
        let c = decode_state(q);
        let start = nq.saturating_sub(levels);
        Ok((start..nq).map(|i| c[i].norm_sqr()).sum())
    }

    pub(crate) fn check_point(&self, h: &HybridPoint) -> Result<()> {
        if h.cl_dim() != self.cl_dim() {
            return Err(Error::DimensionMismatch {
                context: "model classical sector",
                expected: self.cl_dim(),
                actual: h.cl_dim(),
            });
        }
        if h.qm_dim() != self.qm_dim() {
            return Err(Error::DimensionMismatch {
                context: "model quantum sector",
                expected: self.qm_dim(),
                actual: h.qm_dim(),
            });
        }
        Ok(())
    }
}

impl PhaseFunction for ModelSpec {
    fn value(&self, h: &HybridPoint) -> Result<f64> {
        self.check_point(h)?;
        Ok(self.h_cl.value(h.classical())?
            + self.h_qm.expectation(h.quantum())?
            + self.interaction.value(h)?)
    }

    fn gradient(&self, h: &HybridPoint) -> Result<PhaseGradient> {
        self.check_point(h)?;
        let (mut gx, mut gp) = self.h_cl.gradient(h.classical())?;
        let (mut gqx, mut gqp) = self.h_qm.gradient(h.quantum())?;
        let gi = self.interaction.gradient(h)?;
        gx += gi.x;
        gp += gi.p;
        gqx += gi.qx;
        gqp += gi.qp;
        Ok(PhaseGradient {
            x: gx,
            p: gp,
            qx: gqx,
            qp: gqp,
        })
    }
}

/// Total energy at `h`; free-function form of [`ModelSpec::total_hamiltonian`].
pub fn total_hamiltonian(model: &ModelSpec, h: &HybridPoint) -> Result<f64> {
    model.value(h)
}

// ---------------------------------------------------------------------------
// Packed phase vectors
// ---------------------------------------------------------------------------

// Flat layout [x, p, X, P]. All stepping happens on these vectors; points are
// only rebuilt at gradient evaluations and API boundaries.

fn pack(h: &HybridPoint) -> DVector<f64> {
    let n = h.cl_dim();
    let nq = h.qm_dim();
    let mut v = DVector::zeros(2 * n + 2 * nq);
    v.rows_mut(0, n).copy_from(h.classical().x());
    v.rows_mut(n, n).copy_from(h.classical().p());
    v.rows_mut(2 * n, nq).copy_from(h.quantum().x());
    v.rows_mut(2 * n + nq, nq).copy_from(h.quantum().p());
    v
}

fn unpack(v: &DVector<f64>, n: usize, nq: usize) -> Result<HybridPoint> {
    let cl = ClassicalPoint::new(
        DVector::from(v.rows(0, n).clone_owned()),
        DVector::from(v.rows(n, n).clone_owned()),
    )?;
    let qm = QuantumPhasePoint::raw(
        DVector::from(v.rows(2 * n, nq).clone_owned()),
        DVector::from(v.rows(2 * n + nq, nq).clone_owned()),
    )?;
    Ok(HybridPoint::new(cl, qm))
}

/// Canonical field `(dH/dp, -dH/dx, dH/dP, -dH/dX)` of `f` on packed vectors.
fn field<F: PhaseFunction + ?Sized>(
    f: &F,
    v: &DVector<f64>,
    n: usize,
    nq: usize,
) -> Result<DVector<f64>> {
    let h = unpack(v, n, nq)?;
    let g = f.gradient(&h)?;
    let mut out = DVector::zeros(2 * n + 2 * nq);
    for k in 0..n {
        out[k] = g.p[k];
        out[n + k] = -g.x[k];
    }
    for k in 0..nq {
        out[2 * n + k] = g.qp[k];
        out[2 * n + nq + k] = -g.qx[k];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Implicit midpoint solver
// ---------------------------------------------------------------------------

/// Solver controls for the implicit midpoint step.
///
/// Fixed-point iteration normally drives the defect to exact floating-point
/// stationarity, far below `tolerance`; Newton takes over for steps too stiff
/// for the contraction to converge.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Accepted defect, relative to the state magnitude.
    pub tolerance: f64,
    /// Fixed-point sweep cap per step.
    pub max_iterations: usize,
    /// Attempt a Newton rescue before reporting a stall.
    pub newton_fallback: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-13,
            max_iterations: 50,
            newton_fallback: true,
        }
    }
}

/// Diagnostics of one accepted implicit midpoint step.
#[derive(Debug, Clone)]
pub struct StepInfo {
    /// Classical coordinates of the accepted midpoint.
    pub classical_mid: ClassicalPoint,
    /// Fixed-point plus Newton iterations spent.
    pub iterations: usize,
    /// Final defect `max |w - z - dt f((z + w) / 2)|`.
    pub residual: f64,
}

struct MidpointOutcome {
    w: DVector<f64>,
    iterations: usize,
    residual: f64,
}

fn implicit_midpoint<F: PhaseFunction + ?Sized>(
    f: &F,
    z: &DVector<f64>,
    dt: f64,
    n: usize,
    nq: usize,
    opts: &SolverOptions,
) -> Result<MidpointOutcome> {
    let scale = z.amax().max(1.0);
    let accept = opts.tolerance * scale;
    let f0 = field(f, z, n, nq)?;
    let mut w = z + &f0 * dt;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut previous = f64::INFINITY;
    let mut diverged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mid = (z + &w) * 0.5;
        let fm = match field(f, &mid, n, nq) {
            Ok(v) => v,
            // The iterate left the domain; only Newton from a safe start can
            // still rescue the step.
            Err(_) => {
                diverged = true;
                break;
            }
        };
        let next = z + &fm * dt;
        residual = (&next - &w).amax();
        w = next;
        if !residual.is_finite() || residual > 1e6 * scale {
            diverged = true;
            break;
        }
        if residual == 0.0 {
            return Ok(MidpointOutcome {
                w,
                iterations,
                residual,
            });
        }
        // Stalled at rounding level: the map is contractive and further
        // sweeps only flutter in the last bit.
        if residual >= previous && residual <= accept {
            return Ok(MidpointOutcome {
                w,
                iterations,
                residual,
            });
        }
        previous = residual;
    }
    if !diverged && residual <= accept {
        return Ok(MidpointOutcome {
            w,
            iterations,
            residual,
        });
    }
    if opts.newton_fallback {
        let start = if diverged { z.clone() } else { w };
        return newton_midpoint(f, z, start, dt, n, nq, opts, iterations);
    }
    Err(Error::SolverStalled {
        residual,
        iterations,
        dt,
    })
}

const NEWTON_MAX: usize = 25;

#[allow(clippy::too_many_arguments)]
fn newton_midpoint<F: PhaseFunction + ?Sized>(
    f: &F,
    z: &DVector<f64>,
    start: DVector<f64>,
    dt: f64,
    n: usize,
    nq: usize,
    opts: &SolverOptions,
    spent: usize,
) -> Result<MidpointOutcome> {
    let dim = 2 * n + 2 * nq;
    let scale = z.amax().max(1.0);
    let accept = opts.tolerance * scale;
    let mut w = if start.iter().all(|v| v.is_finite()) {
        start
    } else {
        z.clone()
    };
    let mut iterations = spent;
    for _ in 0..NEWTON_MAX {
        iterations += 1;
        let mid = (z + &w) * 0.5;
        let fm = field(f, &mid, n, nq)?;
        let defect = &w - z - &fm * dt;
        let residual = defect.amax();
        if residual <= accept {
            return Ok(MidpointOutcome {
                w,
                iterations,
                residual,
            });
        }
        // J = I - (dt/2) Df at the midpoint, columns by central differences.
        let mut jac = DMatrix::<f64>::identity(dim, dim);
        for j in 0..dim {
            let h = fd_step(mid[j]);
            let mut plus = mid.clone();
            plus[j] += h;
            let mut minus = mid.clone();
            minus[j] -= h;
            let fp = field(f, &plus, n, nq)?;
            let fmn = field(f, &minus, n, nq)?;
            for i in 0..dim {
                jac[(i, j)] -= 0.5 * dt * (fp[i] - fmn[i]) / (2.0 * h);
            }
        }
        let delta = jac.lu().solve(&defect).ok_or(Error::SolverStalled {
            residual,
            iterations,
            dt,
        })?;
        w -= delta;
    }
    let mid = (z + &w) * 0.5;
    let fm = field(f, &mid, n, nq)?;
    let final_residual = (&w - z - &fm * dt).amax();
    if final_residual <= accept {
        return Ok(MidpointOutcome {
            w,
            iterations,
            residual: final_residual,
        });
    }
    Err(Error::SolverStalled {
        residual: final_residual,
        iterations,
        dt,
    })
}

// ---------------------------------------------------------------------------
// Flow steps
// ---------------------------------------------------------------------------

/// One implicit midpoint step of the hybrid flow with default solver options.
pub fn flow_step(model: &ModelSpec, h: &HybridPoint, dt: f64) -> Result<HybridPoint> {
    flow_step_with(model, h, dt, &SolverOptions::default())
}

pub fn flow_step_with(
    model: &ModelSpec,
    h: &HybridPoint,
    dt: f64,
    opts: &SolverOptions,
) -> Result<HybridPoint> {
    Ok(flow_step_detailed(model, h, dt, opts)?.0)
}

/// Step plus midpoint diagnostics; the ensemble propagator reuses the
/// classical midpoint to transport passenger states through the same
/// effective unitary.
pub fn flow_step_detailed(
    model: &ModelSpec,
    h: &HybridPoint,
    dt: f64,
    opts: &SolverOptions,
) -> Result<(HybridPoint, StepInfo)> {
    model.check_point(h)?;
    if !dt.is_finite() || dt == 0.0 {
        return Err(Error::InvalidInput(format!(
            "step size must be finite and nonzero, got {dt}"
        )));
    }
    let n = h.cl_dim();
    let nq = h.qm_dim();
    let z = pack(h);
    let out = implicit_midpoint(model, &z, dt, n, nq, opts)?;
    let mid = (&z + &out.w) * 0.5;
    let hmid = unpack(&mid, n, nq)?;
    let next = unpack(&out.w, n, nq)?;
    Ok((
        next,
        StepInfo {
            classical_mid: hmid.classical().clone(),
            iterations: out.iterations,
            residual: out.residual,
        },
    ))
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Recording and per-step safeguards for [`trajectory_with`].
#[derive(Debug, Clone)]
pub struct TrajectoryOptions {
    /// Keep every k-th step; the initial point and the final step are always
    /// recorded. Drift maxima still cover every step taken.
    pub record_every: usize,
    /// Rescale the quantum sector back to the constraint surface after each
    /// step. Every application is counted in the metadata.
    pub renormalize: bool,
    pub solver: SolverOptions,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            record_every: 1,
            renormalize: false,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryMeta {
    pub integrator: &'static str,
    pub dt: f64,
    pub solver_tolerance: f64,
    /// Number of constraint renormalizations applied along the run.
    pub renormalizations: usize,
}

/// Recorded hybrid flow. `times[k]` pairs with `states[k]`, `energy[k]` and
/// `constraint[k]`; drift maxima are taken over every integration step, not
/// just the recorded ones.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<HybridPoint>,
    pub energy: Vec<f64>,
    pub constraint: Vec<f64>,
    pub max_energy_deviation: f64,
    pub max_constraint_deviation: f64,
    pub metadata: TrajectoryMeta,
}

/// Integrates `model` from `h0` over `t_total` in uniform steps `dt`,
/// recording every step.
pub fn trajectory(
    model: &ModelSpec,
    h0: &HybridPoint,
    t_total: f64,
    dt: f64,
) -> Result<Trajectory> {
    trajectory_with(model, h0, t_total, dt, &TrajectoryOptions::default())
}

pub fn trajectory_with(
    model: &ModelSpec,
    h0: &HybridPoint,
    t_total: f64,
    dt: f64,
    options: &TrajectoryOptions,
) -> Result<Trajectory> {
    if options.record_every == 0 {
        return Err(Error::InvalidInput(
            "record_every must be at least 1".into(),
        ));
    }
    let steps = step_count(t_total, dt)?;
    let e0 = model.value(h0)?;
    let c0 = h0.quantum().constraint();

    let mut times = vec![0.0];
    let mut states = vec![h0.clone()];
    let mut energy = vec![e0];
    let mut constraint = vec![c0];
    let mut max_energy_deviation: f64 = 0.0;
    let mut max_constraint_deviation: f64 = (c0 - 1.0).abs();
    let mut renormalizations = 0;

    let mut state = h0.clone();
    for k in 1..=steps {
        state = flow_step_with(model, &state, dt, &options.solver).map_err(|e| {
            Error::StepFailed {
                step: k,
                source: Box::new(e),
            }
        })?;
        if options.renormalize {
            let qm = state.quantum().renormalized()?;
            state = HybridPoint::new(state.classical().clone(), qm);
            renormalizations += 1;
        }
        let e = model.value(&state)?;
        let c = state.quantum().constraint();
        max_energy_deviation = max_energy_deviation.max((e - e0).abs());
        max_constraint_deviation = max_constraint_deviation.max((c - 1.0).abs());
        if k % options.record_every == 0 || k == steps {
            times.push(k as f64 * dt);
            states.push(state.clone());
            energy.push(e);
            constraint.push(c);
        }
    }

    Ok(Trajectory {
        times,
        states,
        energy,
        constraint,
        max_energy_deviation,
        max_constraint_deviation,
        metadata: TrajectoryMeta {
            integrator: "implicit-midpoint",
            dt,
            solver_tolerance: options.solver.tolerance,
            renormalizations,
        },
    })
}

pub(crate) fn step_count(t_total: f64, dt: f64) -> Result<usize> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "step size must be positive and finite, got {dt}"
        )));
    }
    if !t_total.is_finite() || t_total <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "time span must be positive and finite, got {t_total}"
        )));
    }
    let raw = t_total / dt;
    let steps = raw.round();
    if steps < 1.0 || (raw - steps).abs() > 1e-6 * steps {
        return Err(Error::InvalidInput(format!(
            "time span {t_total} is not an integer number of steps of {dt}"
        )));
    }
    Ok(steps as usize)
}

// ---------------------------------------------------------------------------
// Canonical transformations
// ---------------------------------------------------------------------------

/// Finite canonical transformation generated by an arbitrary observable,
/// advanced with the default sub-step.
pub fn canonical_step<F: PhaseFunction + ?Sized>(
    generator: &F,
    h: &HybridPoint,
    delta_alpha: f64,
) -> Result<HybridPoint> {
    canonical_step_with(generator, h, delta_alpha, DEFAULT_CANONICAL_SUBSTEP)
}

/// Flows `h` along the canonical field of `generator` for parameter
/// `delta_alpha`, split into midpoint sub-steps no larger than `substep`.
pub fn canonical_step_with<F: PhaseFunction + ?Sized>(
    generator: &F,
    h: &HybridPoint,
    delta_alpha: f64,
    substep: f64,
) -> Result<HybridPoint> {
    if !substep.is_finite() || substep <= 0.0 || substep > MAX_CANONICAL_SUBSTEP {
        return Err(Error::InvalidInput(format!(
            "canonical sub-step must lie in (0, {MAX_CANONICAL_SUBSTEP}], got {substep}"
        )));
    }
    if !delta_alpha.is_finite() {
        return Err(Error::InvalidInput(
            "transformation parameter must be finite".into(),
        ));
    }
    if delta_alpha == 0.0 {
        return Ok(h.clone());
    }
    let n = h.cl_dim();
    let nq = h.qm_dim();
    let count = (delta_alpha.abs() / substep).ceil().max(1.0) as usize;
    let hs = delta_alpha / count as f64;
    let opts = SolverOptions::default();
    let mut z = pack(h);
    for _ in 0..count {
        z = implicit_midpoint(generator, &z, hs, n, nq, &opts)?.w;
    }
    unpack(&z, n, nq)
}

// ---------------------------------------------------------------------------
// Reference propagators
// ---------------------------------------------------------------------------

/// Exact propagation of a quantum phase point under a constant Hermitian
/// generator, `c(t) = V exp(-i diag(lambda) t) V^H c(0)`.
///
/// Serves as an independent oracle for flows whose quantum sector decouples
/// from the classical one.
pub fn unitary_oracle(
    h_qm: &HermitianMatrix,
    q0: &QuantumPhasePoint,
    t: f64,
) -> Result<QuantumPhasePoint> {
    if q0.dim() != h_qm.dim() {
        return Err(Error::DimensionMismatch {
            context: "unitary oracle state",
            expected: h_qm.dim(),
            actual: q0.dim(),
        });
    }
    if !t.is_finite() {
        return Err(Error::InvalidInput("propagation time must be finite".into()));
    }
    let eig = h_qm.matrix().clone().symmetric_eigen();
    let mut a = eig.eigenvectors.adjoint() * decode_state(q0);
    for i in 0..a.len() {
        a[i] *= Complex64::from_polar(1.0, -eig.eigenvalues[i] * t);
    }
    let c = &eig.eigenvectors * a;
    let s = std::f64::consts::SQRT_2;
    QuantumPhasePoint::raw(
        DVector::from_iterator(c.len(), c.iter().map(|v| s * v.re)),
        DVector::from_iterator(c.len(), c.iter().map(|v| s * v.im)),
    )
}

/// Classic fixed-step fourth-order reference integration of the canonical
/// field of `f`. Not symplectic; used as an independent accuracy oracle.
pub fn rk4_reference<F: PhaseFunction + ?Sized>(
    f: &F,
    h0: &HybridPoint,
    t_total: f64,
    dt: f64,
) -> Result<HybridPoint> {
    let steps = step_count(t_total, dt)?;
    let n = h0.cl_dim();
    let nq = h0.qm_dim();
    let mut z = pack(h0);
    for _ in 0..steps {
        let k1 = field(f, &z, n, nq)?;
        let k2 = field(f, &(&z + &k1 * (0.5 * dt)), n, nq)?;
        let k3 = field(f, &(&z + &k2 * (0.5 * dt)), n, nq)?;
        let k4 = field(f, &(&z + &k3 * dt), n, nq)?;
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    unpack(&z, n, nq)
}

// ---------------------------------------------------------------------------
// Tangibility experiments
// ---------------------------------------------------------------------------

/// Which canonical coordinate of a classical degree of freedom is displaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationTarget {
    Position,
    Momentum,
}

type ProfileFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Time-dependent displacement of one classical coordinate, switched on at
/// `t0`.
///
/// Profiles are functions of elapsed time since onset; they vanish exactly
/// for non-positive argument and turn on with zero slope, so the displaced
/// trajectory stays continuous with jumps bounded by the profile's slope.
#[derive(Clone)]
pub struct Perturbation {
    t0: f64,
    index: usize,
    target: PerturbationTarget,
    profile: ProfileFn,
    derivative_bound: f64,
}

impl std::fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Perturbation")
            .field("t0", &self.t0)
            .field("index", &self.index)
            .field("target", &self.target)
            .field("derivative_bound", &self.derivative_bound)
            .finish()
    }
}

impl Perturbation {
    /// Monotone ramp `amplitude * u^2 (3 - 2u)` with `u = s / duration`
    /// clamped to `[0, 1]`; slope peaks at `1.5 amplitude / duration`.
    pub fn smooth_step(
        t0: f64,
        index: usize,
        target: PerturbationTarget,
        amplitude: f64,
        duration: f64,
    ) -> Result<Self> {
        if !duration.is_finite() || duration <= 0.0 {
            return Err(Error::InvalidInput(
                "perturbation duration must be positive".into(),
            ));
        }
        if !amplitude.is_finite() || !t0.is_finite() {
            return Err(Error::InvalidInput(
                "perturbation onset and amplitude must be finite".into(),
            ));
        }
        Ok(Self {
            t0,
            index,
            target,
            profile: Arc::new(move |s: f64| {
                if s <= 0.0 {
                    0.0
                } else {
                    let u = (s / duration).min(1.0);
                    amplitude * u * u * (3.0 - 2.0 * u)
                }
            }),
            derivative_bound: 1.5 * amplitude.abs() / duration,
        })
    }

    /// Transient bump `amplitude * sin^2(pi s / period)` supported on one
    /// period; slope peaks at `pi amplitude / period`.
    pub fn sine_pulse(
        t0: f64,
        index: usize,
        target: PerturbationTarget,
        amplitude: f64,
        period: f64,
    ) -> Result<Self> {
        if !period.is_finite() || period <= 0.0 {
            return Err(Error::InvalidInput(
                "perturbation period must be positive".into(),
            ));
        }
        if !amplitude.is_finite() || !t0.is_finite() {
            return Err(Error::InvalidInput(
                "perturbation onset and amplitude must be finite".into(),
            ));
        }
        Ok(Self {
            t0,
            index,
            target,
            profile: Arc::new(move |s: f64| {
                if s <= 0.0 || s >= period {
                    0.0
                } else {
                    amplitude * (std::f64::consts::PI * s / period).sin().powi(2)
                }
            }),
            derivative_bound: std::f64::consts::PI * amplitude.abs() / period,
        })
    }

    /// Arbitrary profile; the caller asserts the slope bound and that the
    /// profile vanishes for non-positive elapsed time.
    pub fn custom(
        t0: f64,
        index: usize,
        target: PerturbationTarget,
        profile: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative_bound: f64,
    ) -> Self {
        Self {
            t0,
            index,
            target,
            profile: Arc::new(profile),
            derivative_bound,
        }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn target(&self) -> PerturbationTarget {
        self.target
    }

    pub fn derivative_bound(&self) -> f64 {
        self.derivative_bound
    }

    /// Displacement at elapsed time `s` since onset.
    pub fn value(&self, s: f64) -> f64 {
        (self.profile)(s)
    }
}

/// Side-by-side record of a displaced and an undisplaced run of the same
/// model from the same initial data.
#[derive(Debug, Clone)]
pub struct TangibilityReport {
    /// Both runs agree bit for bit on every step taken before the onset.
    pub pre_segment_identical: bool,
    /// Step times including zero.
    pub times: Vec<f64>,
    /// Monitored coordinate of the displaced run.
    pub z_series: Vec<f64>,
    /// The same coordinate of the undisplaced run.
    pub reference_series: Vec<f64>,
    /// Largest single-step jump of `z_series`.
    pub max_discontinuity: f64,
    /// Largest `|C - 1|` along the displaced run.
    pub max_constraint_deviation: f64,
}

/// Runs the flow twice, applying the perturbation's incremental displacement
/// to the target coordinate after each step of the second run.
///
/// While the profile is still zero the two runs execute identical arithmetic,
/// so the pre-onset segment matches bitwise, not merely to tolerance.
pub fn tangibility_experiment(
    model: &ModelSpec,
    h0: &HybridPoint,
    perturbation: &Perturbation,
    t_total: f64,
    dt: f64,
) -> Result<TangibilityReport> {
    model.check_point(h0)?;
    if perturbation.index >= model.cl_dim() {
        return Err(Error::IndexOutOfRange {
            index: perturbation.index,
            dim: model.cl_dim(),
        });
    }
    let steps = step_count(t_total, dt)?;
    let opts = SolverOptions::default();

    let coord = |h: &HybridPoint| match perturbation.target {
        PerturbationTarget::Position => h.classical().x()[perturbation.index],
        PerturbationTarget::Momentum => h.classical().p()[perturbation.index],
    };

    let mut reference = h0.clone();
    let mut displaced = h0.clone();
    let mut times = vec![0.0];
    let mut z_series = vec![coord(&displaced)];
    let mut reference_series = vec![coord(&reference)];
    let mut pre_segment_identical = true;
    let mut max_constraint_deviation = (displaced.quantum().constraint() - 1.0).abs();

    for k in 1..=steps {
        let t_prev = (k - 1) as f64 * dt;
        let t_next = k as f64 * dt;
        reference = flow_step_with(model, &reference, dt, &opts).map_err(|e| {
            Error::StepFailed {
                step: k,
                source: Box::new(e),
            }
        })?;
        displaced = flow_step_with(model, &displaced, dt, &opts).map_err(|e| {
            Error::StepFailed {
                step: k,
                source: Box::new(e),
            }
        })?;
        let delta = perturbation.value(t_next - perturbation.t0)
            - perturbation.value(t_prev - perturbation.t0);
        // Skipping on a zero increment keeps the pre-onset arithmetic of both
        // runs literally identical.
        if delta != 0.0 {
            match perturbation.target {
                PerturbationTarget::Position => displaced.cl.x[perturbation.index] += delta,
                PerturbationTarget::Momentum => displaced.cl.p[perturbation.index] += delta,
            }
        }
        if t_next <= perturbation.t0 {
            pre_segment_identical &= bitwise_eq(&reference, &displaced);
        }
        max_constraint_deviation =
            max_constraint_deviation.max((displaced.quantum().constraint() - 1.0).abs());
        times.push(t_next);
        z_series.push(coord(&displaced));
        reference_series.push(coord(&reference));
    }

    let max_discontinuity = z_series
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);

    Ok(TangibilityReport {
        pre_segment_identical,
        times,
        z_series,
        reference_series,
        max_discontinuity,
        max_constraint_deviation,
    })
}

fn bitwise_eq(a: &HybridPoint, b: &HybridPoint) -> bool {
    let eq = |u: &DVector<f64>, v: &DVector<f64>| {
        u.iter()
            .zip(v.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    };
    eq(a.classical().x(), b.classical().x())
        && eq(a.classical().p(), b.classical().p())
        && eq(a.quantum().x(), b.quantum().x())
        && eq(a.quantum().p(), b.quantum().p())
}

//! Hybrid probability densities and their Liouville propagation.
//!
//! A density is a mixture `rho(x, p, Psi) = sum_j w_j(x, p) |<j|Psi>|^2`:
//! nonnegative classical weight profiles paired with unit projector states.
//! Propagation runs by the method of characteristics: initial hybrid points
//! are drawn from the density with importance weights, each characteristic is
//! integrated with the symplectic flow, and the projector states are
//! transported along it so the density can be re-evaluated at any time. The
//! density value along a characteristic is an invariant of the exact flow;
//! its recorded drift measures integrator error.
//!
//! Normalization convention: `sum_j integral w_j dx dp = 1`. The classical
//! profiles carry their own total masses, so the check is a finite sum.

use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{
    flow_step_detailed, step_count, total_hamiltonian, ModelSpec, SolverOptions, Trajectory,
    TrajectoryMeta,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::observables::{ClassicalObservable, QuadraticObservable};
use crate::phase_space::{ClassicalPoint, HybridPoint, QuantumPhasePoint};

/// Tolerance on the mass sum when a density is validated.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Matching window for point-supported classical profiles.
const POINT_SUPPORT_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Densities

/// Classical weight profile of one density component, with a known total
/// integral over the classical phase space.
#[derive(Clone)]
pub enum WeightKind {
    /// Isotropic Gaussian of width `sigma` around a phase-space center,
    /// carrying total mass `mass`.
    Gaussian {
        center_x: DVector<f64>,
        center_p: DVector<f64>,
        sigma: f64,
        mass: f64,
    },
    /// All classical mass concentrated at one point. Its value is `mass` at
    /// the point itself and zero elsewhere.
    PointMass {
        x: DVector<f64>,
        p: DVector<f64>,
        mass: f64,
    },
    /// Arbitrary nonnegative profile with total integral `mass`. Cannot be
    /// sampled with the component-natural proposal.
    Custom {
        f: Arc<dyn Fn(&ClassicalPoint) -> f64 + Send + Sync>,
        mass: f64,
        dim: usize,
    },
}

impl std::fmt::Debug for WeightKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightKind::Gaussian { sigma, mass, .. } => f
                .debug_struct("Gaussian")
                .field("sigma", sigma)
                .field("mass", mass)
                .finish(),
            WeightKind::PointMass { mass, .. } => {
                f.debug_struct("PointMass").field("mass", mass).finish()
            }
            WeightKind::Custom { mass, dim, .. } => f
                .debug_struct("Custom")
                .field("mass", mass)
                .field("dim", dim)
                .finish(),
        }
    }
}

impl WeightKind {
    pub fn mass(&self) -> f64 {
        match self {
            WeightKind::Gaussian { mass, .. }
            | WeightKind::PointMass { mass, .. }
            | WeightKind::Custom { mass, .. } => *mass,
        }
    }

    pub fn cl_dim(&self) -> usize {
        match self {
            WeightKind::Gaussian { center_x, .. } => center_x.len(),
            WeightKind::PointMass { x, .. } => x.len(),
            WeightKind::Custom { dim, .. } => *dim,
        }
    }

    /// Same profile with the mass multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            WeightKind::Gaussian {
                center_x,
                center_p,
                sigma,
                mass,
            } => WeightKind::Gaussian {
                center_x: center_x.clone(),
                center_p: center_p.clone(),
                sigma: *sigma,
                mass: mass * factor,
            },
            WeightKind::PointMass { x, p, mass } => WeightKind::PointMass {
                x: x.clone(),
                p: p.clone(),
                mass: mass * factor,
            },
            WeightKind::Custom { f, mass, dim } => {
                let inner = f.clone();
                WeightKind::Custom {
                    f: Arc::new(move |pt| factor * inner(pt)),
                    mass: mass * factor,
                    dim: *dim,
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let mass = self.mass();
        if !(mass.is_finite() && mass >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "component mass must be finite and nonnegative, got {mass}"
            )));
        }
        if let WeightKind::Gaussian {
            center_x,
            center_p,
            sigma,
            ..
        } = self
        {
            if center_x.len() != center_p.len() {
                return Err(Error::DimensionMismatch {
                    context: "Gaussian profile center",
                    expected: center_x.len(),
                    actual: center_p.len(),
                });
            }
            if !(sigma.is_finite() && *sigma > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "Gaussian width must be positive, got {sigma}"
                )));
            }
        }
        Ok(())
    }

    /// `w_j(x, p)`. Negative values from custom profiles are an integrity
    /// error.
    pub fn value(&self, pt: &ClassicalPoint) -> Result<f64> {
        if pt.dim() != self.cl_dim() {
            return Err(Error::DimensionMismatch {
                context: "weight profile argument",
                expected: self.cl_dim(),
                actual: pt.dim(),
            });
        }
        let v = match self {
            WeightKind::Gaussian {
                center_x,
                center_p,
                sigma,
                mass,
            } => {
                let n = center_x.len();
                let mut d2 = 0.0;
                for k in 0..n {
                    d2 += (pt.x()[k] - center_x[k]).powi(2) + (pt.p()[k] - center_p[k]).powi(2);
                }
                let var = sigma * sigma;
                let norm = (2.0 * std::f64::consts::PI * var).powi(-(n as i32));
                mass * norm * (-0.5 * d2 / var).exp()
            }
            WeightKind::PointMass { x, p, mass } => {
                let hit = (0..x.len()).all(|k| {
                    (pt.x()[k] - x[k]).abs() <= POINT_SUPPORT_TOL
                        && (pt.p()[k] - p[k]).abs() <= POINT_SUPPORT_TOL
                });
                if hit {
                    *mass
                } else {
                    0.0
                }
            }
            WeightKind::Custom { f, .. } => f(pt),
        };
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Integrity(format!(
                "weight profile produced {v} at a sampled point"
            )));
        }
        Ok(v)
    }
}

/// One term of a hybrid density: a classical profile and the projector state
/// it multiplies.
#[derive(Debug, Clone)]
pub struct DensityComponent {
    pub weight: WeightKind,
    pub state: QuantumPhasePoint,
}

/// Mixture density `sum_j w_j(x, p) |<j|Psi>|^2`.
#[derive(Debug, Clone)]
pub struct DensitySpec {
    components: Vec<DensityComponent>,
}

impl DensitySpec {
    pub fn new(components: Vec<DensityComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("a density needs at least one component".into()));
        }
        let cl = components[0].weight.cl_dim();
        let qm = components[0].state.dim();
        for c in &components {
            c.weight.validate()?;
            if c.weight.cl_dim() != cl {
                return Err(Error::DimensionMismatch {
                    context: "density classical sector",
                    expected: cl,
                    actual: c.weight.cl_dim(),
                });
            }
            if c.state.dim() != qm {
                return Err(Error::DimensionMismatch {
                    context: "density quantum sector",
                    expected: qm,
                    actual: c.state.dim(),
                });
            }
            let norm = c.state.constraint();
            if (norm - 1.0).abs() > 1e-10 {
                return Err(Error::NotNormalized { norm });
            }
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[DensityComponent] {
        &self.components
    }

    pub fn cl_dim(&self) -> usize {
        self.components[0].weight.cl_dim()
    }

    pub fn qm_dim(&self) -> usize {
        self.components[0].state.dim()
    }

    pub fn total_mass(&self) -> f64 {
        self.components.iter().map(|c| c.weight.mass()).sum()
    }

    /// Checks the mass-sum convention `sum_j integral w_j dx dp = 1`.
    pub fn validate_normalization(&self, tol: f64) -> Result<()> {
        let total = self.total_mass();
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidInput(format!(
                "density mass sums to {total}, expected 1 within {tol}"
            )));
        }
        Ok(())
    }

    /// `sum_j w_j(x, p) |<j|Psi>|^2`.
    pub fn density_value(&self, h: &HybridPoint) -> Result<f64> {
        if h.cl_dim() != self.cl_dim() || h.qm_dim() != self.qm_dim() {
            return Err(Error::DimensionMismatch {
                context: "density argument",
                expected: self.cl_dim() + self.qm_dim(),
                actual: h.cl_dim() + h.qm_dim(),
            });
        }
        let psi = h.quantum().amplitudes();
        let mut rho = 0.0;
        for c in &self.components {
            let w = c.weight.value(h.classical())?;
            if w != 0.0 {
                rho += w * overlap_sq(&c.state.amplitudes(), &psi);
            }
        }
        Ok(rho)
    }
}

fn overlap_sq(a: &DVector<Complex64>, b: &DVector<Complex64>) -> f64 {
    a.dotc(b).norm_sqr()
}

// ---------------------------------------------------------------------------
// Separable recipes

/// Eigen-decomposition of one subsystem factor: weights and states in that
/// factor's own basis.
#[derive(Debug, Clone)]
pub struct FactorMixture {
    pub weights: Vec<f64>,
    pub states: Vec<Vec<Complex64>>,
}

/// One outer term of a separable density: a scalar weight, a shared
/// classical profile of unit mass, and the two factor mixtures.
#[derive(Debug, Clone)]
pub struct SeparableTerm {
    pub weight: f64,
    pub classical: WeightKind,
    pub factor_a: FactorMixture,
    pub factor_b: FactorMixture,
}

fn check_factor(m: &FactorMixture, label: &'static str) -> Result<usize> {
    if m.weights.len() != m.states.len() || m.states.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{label} needs matching, nonempty weight and state lists"
        )));
    }
    let dim = m.states[0].len();
    for s in &m.states {
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "factor state",
                expected: dim,
                actual: s.len(),
            });
        }
    }
    for w in &m.weights {
        if !(w.is_finite() && *w >= 0.0) {
            return Err(Error::InvalidInput(format!("{label} weight {w} is invalid")));
        }
    }
    for i in 0..m.states.len() {
        for j in 0..m.states.len() {
            let dot: Complex64 = m.states[i]
                .iter()
                .zip(&m.states[j])
                .map(|(a, b)| a.conj() * b)
                .sum();
            let target = if i == j { 1.0 } else { 0.0 };
            if (dot - Complex64::new(target, 0.0)).norm() > 1e-10 {
                return Err(Error::InvalidInput(format!(
                    "{label} states are not orthonormal: <{i}|{j}> = {dot}"
                )));
            }
        }
    }
    Ok(dim)
}

/// Expands a mixture of tensor-product states into a flat component list:
/// masses `w_l * wA_j * wB_j'` and projector states `|j, j'>`, with the
/// composite index `j * dim_b + j'`.
pub fn separable_density(terms: Vec<SeparableTerm>) -> Result<DensitySpec> {
    if terms.is_empty() {
        return Err(Error::InvalidInput("a separable recipe needs at least one term".into()));
    }
    let mut components = Vec::new();
    let dim_a = check_factor(&terms[0].factor_a, "factor A")?;
    let dim_b = check_factor(&terms[0].factor_b, "factor B")?;
    for term in &terms {
        if !(term.weight.is_finite() && term.weight >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "outer weight {} is invalid",
                term.weight
            )));
        }
        let da = check_factor(&term.factor_a, "factor A")?;
        let db = check_factor(&term.factor_b, "factor B")?;
        if da != dim_a || db != dim_b {
            return Err(Error::DimensionMismatch {
                context: "separable factor dimensions",
                expected: dim_a * dim_b,
                actual: da * db,
            });
        }
        for (ja, wa) in term.factor_a.weights.iter().enumerate() {
            for (jb, wb) in term.factor_b.weights.iter().enumerate() {
                let mass = term.weight * wa * wb;
                if mass == 0.0 {
                    continue;
                }
                let mut prod = vec![Complex64::default(); dim_a * dim_b];
                for (i, ai) in term.factor_a.states[ja].iter().enumerate() {
                    for (k, bk) in term.factor_b.states[jb].iter().enumerate() {
                        prod[i * dim_b + k] = ai * bk;
                    }
                }
                components.push(DensityComponent {
                    weight: term.classical.scaled(mass),
                    state: crate::phase_space::encode_state(&prod)?,
                });
            }
        }
    }
    DensitySpec::new(components)
}

// ---------------------------------------------------------------------------
// Sampling

/// How initial classical coordinates are drawn.
#[derive(Debug, Clone, Copy)]
pub enum ClassicalProposal {
    /// Draw from the selected component's own profile. Importance weights
    /// come out uniform. Custom profiles are rejected.
    ComponentNatural,
    /// Isotropic Gaussian around the phase-space origin, reweighted against
    /// the component profiles.
    Isotropic { sigma: f64 },
}

/// Monte Carlo draw plan. The seed fixes every draw; equal seeds give
/// bitwise-equal runs.
#[derive(Debug, Clone, Copy)]
pub struct SamplerSpec {
    pub samples: usize,
    pub seed: u64,
    pub proposal: ClassicalProposal,
}

/// Per-time ensemble average of one observable.
#[derive(Debug, Clone)]
pub struct ObservableSeries {
    pub label: String,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

/// Observables averaged over the ensemble at each recorded time.
#[derive(Clone)]
pub enum EnsembleObservable {
    ClassicalPosition(usize),
    ClassicalMomentum(usize),
    /// Occupation `|c_i|^2` of one basis level.
    LevelOccupation(usize),
    TotalEnergy,
    Classical {
        label: String,
        observable: ClassicalObservable,
    },
    Quadratic {
        label: String,
        form: QuadraticObservable,
    },
}

impl std::fmt::Debug for EnsembleObservable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EnsembleObservable({})", self.label())
    }
}

impl EnsembleObservable {
    pub fn label(&self) -> String {
        match self {
            EnsembleObservable::ClassicalPosition(k) => format!("x_{}", k + 1),
            EnsembleObservable::ClassicalMomentum(k) => format!("p_{}", k + 1),
            EnsembleObservable::LevelOccupation(i) => format!("occ_{i}"),
            EnsembleObservable::TotalEnergy => "H_sigma".into(),
            EnsembleObservable::Classical { label, .. }
            | EnsembleObservable::Quadratic { label, .. } => label.clone(),
        }
    }

    fn evaluate(&self, model: &ModelSpec, h: &HybridPoint) -> Result<f64> {
        match self {
            EnsembleObservable::ClassicalPosition(k) => {
                if *k >= h.cl_dim() {
                    return Err(Error::IndexOutOfRange {
                        index: *k,
                        dim: h.cl_dim(),
                    });
                }
                Ok(h.classical().x()[*k])
            }
            EnsembleObservable::ClassicalMomentum(k) => {
                if *k >= h.cl_dim() {
                    return Err(Error::IndexOutOfRange {
                        index: *k,
                        dim: h.cl_dim(),
                    });
                }
                Ok(h.classical().p()[*k])
            }
            EnsembleObservable::LevelOccupation(i) => {
                if *i >= h.qm_dim() {
                    return Err(Error::IndexOutOfRange {
                        index: *i,
                        dim: h.qm_dim(),
                    });
                }
                let q = h.quantum();
                Ok(0.5 * (q.x()[*i] * q.x()[*i] + q.p()[*i] * q.p()[*i]))
            }
            EnsembleObservable::TotalEnergy => total_hamiltonian(model, h),
            EnsembleObservable::Classical { observable, .. } => observable.value(h.classical()),
            EnsembleObservable::Quadratic { form, .. } => form.expectation(h.quantum()),
        }
    }
}

/// One drawn characteristic.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub index: usize,
    /// Density component the quantum state was drawn from.
    pub component: usize,
    /// Normalized importance weight; the weights sum to one.
    pub weight: f64,
    pub initial: HybridPoint,
    pub trajectory: Trajectory,
    /// Density value re-evaluated at each recorded time with the transported
    /// component states. Exactly conserved by the ideal flow.
    pub density: Vec<f64>,
}

/// Completed ensemble propagation.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub times: Vec<f64>,
    pub samples: Vec<SampleRecord>,
    pub observables: Vec<ObservableSeries>,
    /// Largest density deviation from its initial value along any
    /// characteristic.
    pub max_density_drift: f64,
    /// `|sum of importance weights - 1|`.
    pub normalization_residual: f64,
}

/// Recording, solver, and observable settings for a propagation.
#[derive(Debug, Clone)]
pub struct LiouvilleOptions {
    /// Keep every k-th step; the initial point and the final step are always
    /// recorded.
    pub record_every: usize,
    pub solver: SolverOptions,
    pub observables: Vec<EnsembleObservable>,
}

impl Default for LiouvilleOptions {
    fn default() -> Self {
        Self {
            record_every: 1,
            solver: SolverOptions::default(),
            observables: Vec::new(),
        }
    }
}

struct Draw {
    index: usize,
    component: usize,
    raw_weight: f64,
    point: HybridPoint,
}

fn gaussian_draw(
    rng: &mut ChaCha8Rng,
    center_x: &DVector<f64>,
    center_p: &DVector<f64>,
    sigma: f64,
) -> Result<ClassicalPoint> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidInput(format!("bad proposal width: {e}")))?;
    let n = center_x.len();
    let mut x = DVector::zeros(n);
    let mut p = DVector::zeros(n);
    for k in 0..n {
        x[k] = center_x[k] + normal.sample(rng);
    }
    for k in 0..n {
        p[k] = center_p[k] + normal.sample(rng);
    }
    ClassicalPoint::new(x, p)
}

fn isotropic_density(pt: &ClassicalPoint, sigma: f64) -> f64 {
    let n = pt.dim();
    let var = sigma * sigma;
    let d2 = pt.x().norm_squared() + pt.p().norm_squared();
    (2.0 * std::f64::consts::PI * var).powi(-(n as i32)) * (-0.5 * d2 / var).exp()
}

fn draw_samples(
    dens: &DensitySpec,
    sampler: &SamplerSpec,
) -> Result<Vec<Draw>> {
    if sampler.samples == 0 {
        return Err(Error::InvalidInput("the sampler needs at least one sample".into()));
    }
    let total_mass = dens.total_mass();
    if total_mass <= 0.0 {
        return Err(Error::InvalidInput("the density carries no mass".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut draws = Vec::with_capacity(sampler.samples);
    for index in 0..sampler.samples {
        let mut pick = rng.random_range(0.0..total_mass);
        let mut component = dens.components().len() - 1;
        for (j, c) in dens.components().iter().enumerate() {
            pick -= c.weight.mass();
            if pick < 0.0 {
                component = j;
                break;
            }
        }
        let comp = &dens.components()[component];
        let (cl, raw_weight) = match sampler.proposal {
            ClassicalProposal::ComponentNatural => match &comp.weight {
                WeightKind::Gaussian {
                    center_x,
                    center_p,
                    sigma,
                    ..
                } => (gaussian_draw(&mut rng, center_x, center_p, *sigma)?, total_mass),
                WeightKind::PointMass { x, p, .. } => {
                    (ClassicalPoint::new(x.clone(), p.clone())?, total_mass)
                }
                WeightKind::Custom { .. } => {
                    return Err(Error::InvalidInput(
                        "custom weight profiles need an explicit proposal distribution".into(),
                    ));
                }
            },
            ClassicalProposal::Isotropic { sigma } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "proposal width must be positive, got {sigma}"
                    )));
                }
                let zero = DVector::zeros(dens.cl_dim());
                let cl = gaussian_draw(&mut rng, &zero, &zero, sigma)?;
                let w = comp.weight.value(&cl)?;
                let q = isotropic_density(&cl, sigma);
                let prob = comp.weight.mass() / total_mass;
                (cl.clone(), w / (prob * q))
            }
        };
        draws.push(Draw {
            index,
            component,
            raw_weight,
            point: HybridPoint::new(cl, comp.state.clone()),
        });
    }
    Ok(draws)
}

struct SampleOutput {
    trajectory: Trajectory,
    density: Vec<f64>,
    observed: Vec<Vec<f64>>,
}

fn propagate_characteristic(
    model: &ModelSpec,
    draw: &Draw,
    origin_weights: &[f64],
    passengers0: &[DVector<Complex64>],
    steps: usize,
    dt: f64,
    opts: &LiouvilleOptions,
) -> Result<SampleOutput> {
    let nq = model.qm_dim();
    let mut h = draw.point.clone();
    let mut passengers: Vec<DVector<Complex64>> = passengers0.to_vec();

    let record_len = 2 + (steps.saturating_sub(1)) / opts.record_every.max(1);
    let mut times = Vec::with_capacity(record_len);
    let mut states = Vec::with_capacity(record_len);
    let mut energy = Vec::new();
    let mut constraint = Vec::new();
    let mut density = Vec::new();
    let mut observed = vec![Vec::new(); opts.observables.len()];

    let e0 = total_hamiltonian(model, &h)?;
    let c0 = h.quantum().constraint();
    let mut max_de = 0.0_f64;
    let mut max_dc = 0.0_f64;

    let record = |k: usize,
                  h: &HybridPoint,
                  passengers: &[DVector<Complex64>],
                  times: &mut Vec<f64>,
                  states: &mut Vec<HybridPoint>,
                  energy: &mut Vec<f64>,
                  constraint: &mut Vec<f64>,
                  density: &mut Vec<f64>,
                  observed: &mut [Vec<f64>]|
     -> Result<()> {
        times.push(k as f64 * dt);
        energy.push(total_hamiltonian(model, h)?);
        constraint.push(h.quantum().constraint());
        let psi = h.quantum().amplitudes();
        let mut rho = 0.0;
        for (w, pass) in origin_weights.iter().zip(passengers) {
            if *w != 0.0 {
                rho += w * overlap_sq(pass, &psi);
            }
        }
        density.push(rho);
        for (slot, obs) in observed.iter_mut().zip(&opts.observables) {
            slot.push(obs.evaluate(model, h)?);
        }
        states.push(h.clone());
        Ok(())
    };

    record(
        0, &h, &passengers, &mut times, &mut states, &mut energy, &mut constraint, &mut density,
        &mut observed,
    )?;

    let every = opts.record_every.max(1);
    for k in 1..=steps {
        let (next, info) = flow_step_detailed(model, &h, dt, &opts.solver)
            .map_err(|e| Error::StepFailed {
                step: k,
                source: Box::new(e),
            })?;

        let gen = model.quantum_generator(&info.classical_mid)?;
        let half = Complex::new(0.0, 0.5 * dt);
        let mut a = DMatrix::<Complex64>::identity(nq, nq);
        let mut b = DMatrix::<Complex64>::identity(nq, nq);
        a += gen.matrix() * half;
        b -= gen.matrix() * half;
        let lu = a.lu();
        for pass in &mut passengers {
            let rhs = &b * &*pass;
            *pass = lu.solve(&rhs).ok_or_else(|| {
                Error::Integrity("component state transport failed to solve".into())
            })?;
        }

        h = next;
        let e = total_hamiltonian(model, &h)?;
        max_de = max_de.max((e - e0).abs());
        max_dc = max_dc.max((h.quantum().constraint() - c0).abs());
        if k % every == 0 || k == steps {
            record(
                k, &h, &passengers, &mut times, &mut states, &mut energy, &mut constraint,
                &mut density, &mut observed,
            )?;
        }
    }

    Ok(SampleOutput {
        trajectory: Trajectory {
            times,
            states,
            energy,
            constraint,
            max_energy_deviation: max_de,
            max_constraint_deviation: max_dc,
            metadata: TrajectoryMeta {
                integrator: "implicit-midpoint",
                dt,
                solver_tolerance: opts.solver.tolerance,
                renormalizations: 0,
            },
        },
        density,
        observed,
    })
}

fn liouville_impl(
    model: &ModelSpec,
    dens: &DensitySpec,
    sampler: &SamplerSpec,
    t_total: f64,
    dt: f64,
    opts: &LiouvilleOptions,
    sequential: bool,
) -> Result<EnsembleRun> {
    if dens.cl_dim() != model.cl_dim() || dens.qm_dim() != model.qm_dim() {
        return Err(Error::DimensionMismatch {
            context: "density for model",
            expected: model.cl_dim() + model.qm_dim(),
            actual: dens.cl_dim() + dens.qm_dim(),
        });
    }
    dens.validate_normalization(NORMALIZATION_TOL)?;
    let steps = step_count(t_total, dt)?;

    let draws = draw_samples(dens, sampler)?;
    let total_raw: f64 = draws.iter().map(|d| d.raw_weight).sum();
    if total_raw <= 0.0 {
        return Err(Error::InvalidInput(
            "the proposal never hit the density's support; every importance weight is zero".into(),
        ));
    }

    let passengers0: Vec<DVector<Complex64>> = dens
        .components()
        .iter()
        .map(|c| c.state.amplitudes())
        .collect();

    let work = |draw: &Draw| -> Result<SampleOutput> {
        let mut origin_weights = Vec::with_capacity(dens.components().len());
        for c in dens.components() {
            origin_weights.push(c.weight.value(draw.point.classical())?);
        }
        propagate_characteristic(model, draw, &origin_weights, &passengers0, steps, dt, opts)
    };

    let outputs: Vec<Result<SampleOutput>> = if sequential {
        exec::map_ordered_seq(&draws, work)
    } else {
        exec::map_ordered(&draws, work)
    };

    let mut samples = Vec::with_capacity(draws.len());
    let mut max_drift = 0.0_f64;
    let mut times: Option<Vec<f64>> = None;
    let mut per_sample_obs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(draws.len());
    for (draw, out) in draws.iter().zip(outputs) {
        let out = out?;
        if times.is_none() {
            times = Some(out.trajectory.times.clone());
        }
        let rho0 = out.density[0];
        for rho in &out.density {
            max_drift = max_drift.max((rho - rho0).abs());
        }
        per_sample_obs.push(out.observed);
        samples.push(SampleRecord {
            index: draw.index,
            component: draw.component,
            weight: draw.raw_weight / total_raw,
            initial: draw.point.clone(),
            trajectory: out.trajectory,
            density: out.density,
        });
    }
    let times = times.expect("at least one sample");
    let normalization_residual = (samples.iter().map(|s| s.weight).sum::<f64>() - 1.0).abs();

    let mut observables = Vec::with_capacity(opts.observables.len());
    for (oi, obs) in opts.observables.iter().enumerate() {
        let mut mean = Vec::with_capacity(times.len());
        let mut std_error = Vec::with_capacity(times.len());
        for ti in 0..times.len() {
            let mu: f64 = samples
                .iter()
                .zip(&per_sample_obs)
                .map(|(s, o)| s.weight * o[oi][ti])
                .sum();
            let var: f64 = samples
                .iter()
                .zip(&per_sample_obs)
                .map(|(s, o)| (s.weight * (o[oi][ti] - mu)).powi(2))
                .sum();
            mean.push(mu);
            std_error.push(var.sqrt());
        }
        observables.push(ObservableSeries {
            label: obs.label(),
            mean,
            std_error,
        });
    }

    Ok(EnsembleRun {
        times,
        samples,
        observables,
        max_density_drift: max_drift,
        normalization_residual,
    })
}

/// Propagates the density by characteristics with default options and no
/// observables (monitors only).
pub fn liouville_propagate(
    model: &ModelSpec,
    dens: &DensitySpec,
    sampler: &SamplerSpec,
    t_total: f64,
    dt: f64,
) -> Result<EnsembleRun> {
    liouville_impl(model, dens, sampler, t_total, dt, &LiouvilleOptions::default(), false)
}

/// Propagation with explicit recording, solver, and observable settings.
/// Characteristics run in parallel when the `parallel` feature is enabled;
/// the reduction is index-ordered, so output does not depend on scheduling.
pub fn liouville_propagate_with(
    model: &ModelSpec,
    dens: &DensitySpec,
    sampler: &SamplerSpec,
    t_total: f64,
    dt: f64,
    opts: &LiouvilleOptions,
) -> Result<EnsembleRun> {
    liouville_impl(model, dens, sampler, t_total, dt, opts, false)
}

/// Same computation pinned to one thread, for determinism checks and
/// benchmarks against the parallel path.
pub fn liouville_propagate_seq(
    model: &ModelSpec,
    dens: &DensitySpec,
    sampler: &SamplerSpec,
    t_total: f64,
    dt: f64,
    opts: &LiouvilleOptions,
) -> Result<EnsembleRun> {
    liouville_impl(model, dens, sampler, t_total, dt, opts, true)
}

// ---------------------------------------------------------------------------
// Reports

/// Outcome of the positivity and normalization checks on a completed run.
#[derive(Debug, Clone)]
pub struct PositivityReport {
    pub pass: bool,
    pub min_density: f64,
    pub normalization_residual: f64,
    /// Index of the first offending sample, when the check fails.
    pub first_violation: Option<usize>,
}

/// Asserts every recorded density value is `>= -1e-12`, importance weights
/// are nonnegative, and the weights sum to one within `1e-12`.
pub fn positivity_normalization_report(run: &EnsembleRun) -> PositivityReport {
    let mut min_density = f64::INFINITY;
    let mut first_violation = None;
    for s in &run.samples {
        for rho in &s.density {
            min_density = min_density.min(*rho);
            if (*rho < -1e-12 || !rho.is_finite()) && first_violation.is_none() {
                first_violation = Some(s.index);
            }
        }
        if (s.weight < 0.0 || !s.weight.is_finite()) && first_violation.is_none() {
            first_violation = Some(s.index);
        }
    }
    let normalization_residual =
        (run.samples.iter().map(|s| s.weight).sum::<f64>() - 1.0).abs();
    let pass = first_violation.is_none() && normalization_residual <= 1e-12;
    PositivityReport {
        pass,
        min_density,
        normalization_residual,
        first_violation,
    }
}

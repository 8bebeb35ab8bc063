//! Ready-made hybrid models on a truncated oscillator eigenbasis.
//!
//! Three builders cover the common cases: [`build_bilinear`] couples a bath
//! of classical oscillators to the quantum mode through its position
//! operator, [`build_localized_bilinear`] replaces the position operator with
//! a coupling density evaluated at the classical coordinates, and
//! [`build_generic`] accepts arbitrary sector Hamiltonians, with
//! [`symmetrized_interaction`] providing Weyl-ordered operator words.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::ModelSpec;
use crate::error::{Error, Result};
use crate::observables::{
    position_momentum_matrices, ClassicalObservable, HermitianMatrix, HybridObservable,
    MatrixDerivative, MatrixField, PolyTerm,
};
use crate::phase_space::{BasisSet, ClassicalPoint, QuantumPhasePoint};

/// Largest Gram-matrix deviation tolerated for the quadrature rule backing a
/// localized model.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Tail occupation above which initial data is considered unresolved by the
/// basis truncation.
pub const TRUNCATION_TOL: f64 = 1e-10;

const WORD_LEN_MAX: usize = 8;

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::InvalidInput(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn check_finite(name: &'static str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::InvalidInput(format!("{name} must be finite, got {v}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Oscillator eigenfunctions.

/// Orthonormal eigenfunction values `h_0..h_{count-1}` and derivatives at the
/// dimensionless coordinate `u`, by upward recurrence. Every step renormalizes
/// through the square-root coefficients, so values stay bounded for any
/// index; far tails underflow to zero.
fn hermite_all(count: usize, u: f64) -> (Vec<f64>, Vec<f64>) {
    let mut h = vec![0.0; count];
    let mut dh = vec![0.0; count];
    if count == 0 {
        return (h, dh);
    }
    let h0 = std::f64::consts::PI.powf(-0.25) * (-0.5 * u * u).exp();
    h[0] = h0;
    dh[0] = -u * h0;
    for k in 1..count {
        let a = (2.0 / k as f64).sqrt();
        let b = ((k as f64 - 1.0) / k as f64).sqrt();
        let prev2 = if k >= 2 { h[k - 2] } else { 0.0 };
        h[k] = a * u * h[k - 1] - b * prev2;
        dh[k] = (2.0 * k as f64).sqrt() * h[k - 1] - u * h[k];
    }
    (h, dh)
}

/// Same recurrence with the Gaussian factor stripped, for integrands paired
/// with an `exp(-u^2)` quadrature weight.
fn hermite_polynomial_part(count: usize, u: f64) -> Vec<f64> {
    let mut h = vec![0.0; count];
    if count == 0 {
        return h;
    }
    h[0] = std::f64::consts::PI.powf(-0.25);
    for k in 1..count {
        let a = (2.0 / k as f64).sqrt();
        let b = ((k as f64 - 1.0) / k as f64).sqrt();
        let prev2 = if k >= 2 { h[k - 2] } else { 0.0 };
        h[k] = a * u * h[k - 1] - b * prev2;
    }
    h
}

fn oscillator_scale(mass: f64, frequency: f64) -> Result<f64> {
    check_positive("mass", mass)?;
    check_positive("frequency", frequency)?;
    Ok((mass * frequency).sqrt())
}

/// Value of the `i`-th normalized oscillator eigenfunction at position `q`
/// for the given mass and frequency.
pub fn hermite_eval(i: usize, q: f64, mass: f64, frequency: f64) -> Result<f64> {
    hermite_eval_with_derivative(i, q, mass, frequency).map(|(v, _)| v)
}

/// Eigenfunction value together with its position derivative.
pub fn hermite_eval_with_derivative(
    i: usize,
    q: f64,
    mass: f64,
    frequency: f64,
) -> Result<(f64, f64)> {
    check_finite("position", q)?;
    let s = oscillator_scale(mass, frequency)?;
    let scale = s.sqrt();
    let (h, dh) = hermite_all(i + 1, s * q);
    Ok((scale * h[i], scale * s * dh[i]))
}

/// Nodes and weights of the `n`-point Gauss rule for integrals
/// `int f(u) exp(-u^2) du`, from the eigendecomposition of the Jacobi
/// matrix. Nodes come back sorted ascending; the rule is exact for
/// polynomials of degree `2n - 1`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidInput("quadrature needs at least one node".into()));
    }
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2);
            (eig.eigenvalues[i], w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs.into_iter().unzip())
}

/// Largest deviation of the quadrature Gram matrix of the first `count`
/// eigenfunctions from the identity. The integrand carries the polynomial
/// parts only; the Gaussian factors are absorbed by the rule's weight.
pub fn orthonormality_residual(count: usize, nodes: &[f64], weights: &[f64]) -> f64 {
    let polys: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&u| hermite_polynomial_part(count, u))
        .collect();
    let mut worst = 0.0_f64;
    for i in 0..count {
        for j in i..count {
            let mut s = 0.0;
            for (m, w) in weights.iter().enumerate() {
                s += w * polys[m][i] * polys[m][j];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((s - target).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Bilinear oscillator bath.

/// Classical oscillator bath coupled linearly to one quantum mode.
///
/// The classical sector carries `mass.len()` oscillators; the quantum mode
/// has the given mass and frequency, truncated to `levels` eigenstates.
/// `free_mass` appends purely kinetic probe coordinates after the
/// oscillators: no spring, no coupling, so one at rest stays at rest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilinearParams {
    pub mass: Vec<f64>,
    pub frequency: Vec<f64>,
    pub coupling: Vec<f64>,
    #[serde(default)]
    pub free_mass: Vec<f64>,
    pub quantum_mass: f64,
    pub quantum_frequency: f64,
    pub levels: usize,
}

impl BilinearParams {
    pub fn validate(&self) -> Result<()> {
        let n = self.mass.len();
        if n == 0 {
            return Err(Error::InvalidInput("at least one classical oscillator is required".into()));
        }
        if self.frequency.len() != n {
            return Err(Error::DimensionMismatch {
                context: "oscillator frequencies",
                expected: n,
                actual: self.frequency.len(),
            });
        }
        if self.coupling.len() != n {
            return Err(Error::DimensionMismatch {
                context: "coupling strengths",
                expected: n,
                actual: self.coupling.len(),
            });
        }
        for &m in &self.mass {
            check_positive("oscillator mass", m)?;
        }
        for &w in &self.frequency {
            check_positive("oscillator frequency", w)?;
        }
        for &l in &self.coupling {
            check_finite("coupling strength", l)?;
        }
        for &m in &self.free_mass {
            check_positive("probe mass", m)?;
        }
        check_positive("quantum mass", self.quantum_mass)?;
        check_positive("quantum frequency", self.quantum_frequency)?;
        if self.levels < 2 {
            return Err(Error::InvalidInput(format!(
                "the truncated mode needs at least two levels, got {}",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn cl_dim(&self) -> usize {
        self.mass.len() + self.free_mass.len()
    }
}

fn monomial(dim: usize, coefficient: f64, x_pow: &[(usize, u32)], p_pow: &[(usize, u32)]) -> PolyTerm {
    let mut x_powers = vec![0; dim];
    let mut p_powers = vec![0; dim];
    for &(k, e) in x_pow {
        x_powers[k] = e;
    }
    for &(k, e) in p_pow {
        p_powers[k] = e;
    }
    PolyTerm {
        coefficient,
        x_powers,
        p_powers,
    }
}

fn oscillator_bath(mass: &[f64], frequency: &[f64], free_mass: &[f64]) -> Result<ClassicalObservable> {
    let n = mass.len();
    let dim = n + free_mass.len();
    let mut terms = Vec::with_capacity(2 * n + free_mass.len());
    for k in 0..n {
        terms.push(monomial(dim, 0.5 / mass[k], &[], &[(k, 2)]));
        terms.push(monomial(dim, 0.5 * mass[k] * frequency[k] * frequency[k], &[(k, 2)], &[]));
    }
    for (j, &m) in free_mass.iter().enumerate() {
        terms.push(monomial(dim, 0.5 / m, &[], &[(n + j, 2)]));
    }
    ClassicalObservable::polynomial(dim, terms)
}

fn level_hamiltonian(levels: usize, frequency: f64) -> HermitianMatrix {
    let energies: Vec<f64> = (0..levels).map(|j| frequency * (j as f64 + 0.5)).collect();
    HermitianMatrix::diagonal(&energies)
}

/// `H_cl = sum_k p_k^2/2m_k + m_k w_k^2 x_k^2 / 2`, `H_qm` diagonal in the
/// eigenbasis with level energies `W (j + 1/2)`, and the interaction
/// `(sum_k lambda_k x_k) X` with the truncated position operator `X`.
pub fn build_bilinear(params: &BilinearParams) -> Result<ModelSpec> {
    params.validate()?;
    let n = params.cl_dim();
    let nq = params.levels;
    let basis = BasisSet::harmonic(nq, params.quantum_mass, params.quantum_frequency);
    let h_cl = oscillator_bath(&params.mass, &params.frequency, &params.free_mass)?;
    let h_qm = level_hamiltonian(nq, params.quantum_frequency);
    let (x_hat, _) = position_momentum_matrices(&basis)?;

    let couplings = params.coupling.clone();
    let value_matrix = x_hat.clone();
    let grad_matrix = x_hat;
    let grad_couplings = couplings.clone();
    let field = MatrixField::new(
        n,
        nq,
        move |pt: &ClassicalPoint| {
            let s: f64 = couplings.iter().zip(pt.x().iter()).map(|(l, x)| l * x).sum();
            Ok(value_matrix.scaled(s))
        },
        MatrixDerivative::Analytic(Arc::new(move |_pt: &ClassicalPoint, k: usize| {
            Ok(if k < grad_couplings.len() {
                grad_matrix.scaled(grad_couplings[k])
            } else {
                HermitianMatrix::zeros(nq)
            })
        })),
        MatrixDerivative::Zero,
    );

    ModelSpec::new(h_cl, h_qm, HybridObservable::from_matrix_field(field), basis)
}

// ---------------------------------------------------------------------------
// Localized coupling density.

/// Fixed-node rule resolving the eigenbasis. `nodes == 0` selects
/// `levels + 12`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    #[serde(default)]
    pub nodes: usize,
    #[serde(default = "default_range_multiplier")]
    pub range_multiplier: f64,
}

fn default_range_multiplier() -> f64 {
    1.0
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            nodes: 0,
            range_multiplier: 1.0,
        }
    }
}

impl QuadratureSpec {
    pub fn resolved_nodes(&self, levels: usize) -> usize {
        if self.nodes == 0 {
            levels + 12
        } else {
            self.nodes
        }
    }
}

/// Bath parameters plus the quadrature backing the localized coupling.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizedParams {
    pub mass: Vec<f64>,
    pub frequency: Vec<f64>,
    pub coupling: Vec<f64>,
    /// Purely kinetic probe coordinates appended after the oscillators.
    #[serde(default)]
    pub free_mass: Vec<f64>,
    pub quantum_mass: f64,
    pub quantum_frequency: f64,
    pub levels: usize,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
}

impl LocalizedParams {
    pub fn validate(&self) -> Result<()> {
        self.bath().validate()?;
        if self.quadrature.resolved_nodes(self.levels) < 2 {
            return Err(Error::InvalidInput("the quadrature needs at least two nodes".into()));
        }
        check_positive("range multiplier", self.quadrature.range_multiplier)?;
        Ok(())
    }

    fn bath(&self) -> BilinearParams {
        BilinearParams {
            mass: self.mass.clone(),
            frequency: self.frequency.clone(),
            coupling: self.coupling.clone(),
            free_mass: self.free_mass.clone(),
            quantum_mass: self.quantum_mass,
            quantum_frequency: self.quantum_frequency,
            levels: self.levels,
        }
    }
}

fn localized_matrix(
    x: &DVector<f64>,
    coupling: &[f64],
    s: f64,
    nq: usize,
) -> Result<HermitianMatrix> {
    let mut m = DMatrix::<Complex64>::zeros(nq, nq);
    for (k, &l) in coupling.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let xk = x[k];
        let (h, _) = hermite_all(nq, s * xk);
        let pref = l * xk * xk * s;
        for i in 0..nq {
            for j in 0..nq {
                m[(i, j)] += Complex64::new(pref * h[i] * h[j], 0.0);
            }
        }
    }
    HermitianMatrix::new(m)
}

fn localized_matrix_dx(
    x: &DVector<f64>,
    coupling: &[f64],
    s: f64,
    nq: usize,
    k: usize,
) -> Result<HermitianMatrix> {
    let mut m = DMatrix::<Complex64>::zeros(nq, nq);
    let l = coupling[k];
    if l != 0.0 {
        let xk = x[k];
        let (h, dh) = hermite_all(nq, s * xk);
        // d/dx [x^2 f_i(x) f_j(x)] with f_i' = s^2 dh_i in the h normalization.
        for i in 0..nq {
            for j in 0..nq {
                let v = l * s
                    * (2.0 * xk * h[i] * h[j]
                        + xk * xk * s * (dh[i] * h[j] + h[i] * dh[j]));
                m[(i, j)] = Complex64::new(v, 0.0);
            }
        }
    }
    HermitianMatrix::new(m)
}

/// Same bath as [`build_bilinear`], but each classical coordinate couples
/// through the local density `lambda_k x_k^2 |x_k><x_k|` projected onto the
/// eigenbasis, `M_ij(x) = sum_k lambda_k x_k^2 F_i(x_k) F_j(x_k)`.
///
/// The backing quadrature must resolve orthonormality of the first `levels`
/// eigenfunctions to [`ORTHONORMALITY_TOL`]; that is checked here and a
/// failing rule is rejected. The model records the classical range the rule
/// covers, and [`ModelSpec::within_validated_range`] reports when a point
/// leaves it.
pub fn build_localized_bilinear(params: &LocalizedParams) -> Result<ModelSpec> {
    params.validate()?;
    let n = params.mass.len() + params.free_mass.len();
    let nq = params.levels;
    let node_count = params.quadrature.resolved_nodes(nq);
    let (nodes, weights) = gauss_hermite(node_count)?;
    let residual = orthonormality_residual(nq, &nodes, &weights);
    if residual > ORTHONORMALITY_TOL {
        return Err(Error::Integrity(format!(
            "a {node_count}-node rule resolves orthonormality of {nq} levels only to {residual:.3e}"
        )));
    }
    let u_max = nodes.last().copied().unwrap_or(0.0).abs();
    let s = oscillator_scale(params.quantum_mass, params.quantum_frequency)?;
    let half_width = params.quadrature.range_multiplier * u_max / s;

    let basis = BasisSet::harmonic(nq, params.quantum_mass, params.quantum_frequency);
    let h_cl = oscillator_bath(&params.mass, &params.frequency, &params.free_mass)?;
    let h_qm = level_hamiltonian(nq, params.quantum_frequency);

    let coupling = params.coupling.clone();
    let grad_coupling = coupling.clone();
    let field = MatrixField::new(
        n,
        nq,
        move |pt: &ClassicalPoint| localized_matrix(pt.x(), &coupling, s, nq),
        MatrixDerivative::Analytic(Arc::new(move |pt: &ClassicalPoint, k: usize| {
            if k < grad_coupling.len() {
                localized_matrix_dx(pt.x(), &grad_coupling, s, nq, k)
            } else {
                Ok(HermitianMatrix::zeros(nq))
            }
        })),
        MatrixDerivative::Zero,
    );

    Ok(
        ModelSpec::new(h_cl, h_qm, HybridObservable::from_matrix_field(field), basis)?
            .with_validated_range(half_width),
    )
}

// ---------------------------------------------------------------------------
// Generic assembly and Weyl ordering.

/// Assembles a model from explicit sector Hamiltonians and an interaction.
pub fn build_generic(
    h_cl: ClassicalObservable,
    h_qm: HermitianMatrix,
    interaction: HybridObservable,
    basis: BasisSet,
) -> Result<ModelSpec> {
    ModelSpec::new(h_cl, h_qm, interaction, basis)
}

/// Factor in an operator word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorSymbol {
    Position,
    Momentum,
}

/// One interaction term `coefficient(x, p) * W(word)`, where `W` is the
/// symmetric average of the word's operator products over all orderings. The
/// empty word stands for the identity.
pub struct RecipeTerm {
    pub coefficient: ClassicalObservable,
    pub word: Vec<OperatorSymbol>,
}

fn heap_permutations(word: &[OperatorSymbol]) -> Vec<Vec<OperatorSymbol>> {
    fn rec(w: &mut Vec<OperatorSymbol>, k: usize, out: &mut Vec<Vec<OperatorSymbol>>) {
        if k <= 1 {
            out.push(w.clone());
            return;
        }
        for i in 0..k {
            rec(w, k - 1, out);
            if k.is_multiple_of(2) {
                w.swap(i, k - 1);
            } else {
                w.swap(0, k - 1);
            }
        }
    }
    let mut w = word.to_vec();
    let mut out = Vec::new();
    let n = w.len();
    rec(&mut w, n.max(1), &mut out);
    out
}

fn weyl_average(
    word: &[OperatorSymbol],
    x_hat: &DMatrix<Complex64>,
    p_hat: &DMatrix<Complex64>,
    nq: usize,
) -> Result<HermitianMatrix> {
    if word.is_empty() {
        return Ok(HermitianMatrix::identity(nq));
    }
    if word.len() > WORD_LEN_MAX {
        return Err(Error::InvalidInput(format!(
            "operator words longer than {WORD_LEN_MAX} are not supported, got {}",
            word.len()
        )));
    }
    let perms = heap_permutations(word);
    let mut sum = DMatrix::<Complex64>::zeros(nq, nq);
    for perm in &perms {
        let mut prod = DMatrix::<Complex64>::identity(nq, nq);
        for sym in perm {
            let factor = match sym {
                OperatorSymbol::Position => x_hat,
                OperatorSymbol::Momentum => p_hat,
            };
            prod *= factor;
        }
        sum += prod;
    }
    sum /= Complex64::new(perms.len() as f64, 0.0);
    HermitianMatrix::new(sum)
}

/// Interaction `sum_t coeff_t(x, p) W(word_t)` as a matrix field over the
/// classical sector. Needs an oscillator basis for the operator matrices.
/// Classical derivatives are analytic when every coefficient carries them,
/// finite-difference otherwise.
pub fn symmetrized_interaction(basis: &BasisSet, terms: Vec<RecipeTerm>) -> Result<HybridObservable> {
    if terms.is_empty() {
        return Ok(HybridObservable::zero());
    }
    let nq = basis.dim();
    let cl_dim = terms[0].coefficient.dim();
    for t in &terms {
        if t.coefficient.dim() != cl_dim {
            return Err(Error::DimensionMismatch {
                context: "recipe coefficient",
                expected: cl_dim,
                actual: t.coefficient.dim(),
            });
        }
    }
    let (x_hat, p_hat) = position_momentum_matrices(basis)?;
    let assembled: Vec<(ClassicalObservable, HermitianMatrix)> = terms
        .into_iter()
        .map(|t| {
            let w = weyl_average(&t.word, x_hat.matrix(), p_hat.matrix(), nq)?;
            Ok((t.coefficient, w))
        })
        .collect::<Result<_>>()?;
    let analytic = assembled.iter().all(|(c, _)| c.has_analytic_gradient());

    fn combine(
        parts: &[(ClassicalObservable, HermitianMatrix)],
        nq: usize,
        value: impl Fn(&ClassicalObservable) -> Result<f64>,
    ) -> Result<HermitianMatrix> {
        let mut sum = DMatrix::<Complex64>::zeros(nq, nq);
        for (c, w) in parts {
            let v = value(c)?;
            if v != 0.0 {
                sum += w.matrix() * Complex64::new(v, 0.0);
            }
        }
        HermitianMatrix::new(sum)
    }

    let value_parts = assembled.clone();
    let eval = move |pt: &ClassicalPoint| combine(&value_parts, nq, |c| c.value(pt));

    let (dx, dp) = if analytic {
        let dx_parts = assembled.clone();
        let dp_parts = assembled;
        (
            MatrixDerivative::Analytic(Arc::new(move |pt: &ClassicalPoint, k: usize| {
                combine(&dx_parts, nq, |c| Ok(c.gradient(pt)?.0[k]))
            })),
            MatrixDerivative::Analytic(Arc::new(move |pt: &ClassicalPoint, k: usize| {
                combine(&dp_parts, nq, |c| Ok(c.gradient(pt)?.1[k]))
            })),
        )
    } else {
        (MatrixDerivative::FiniteDifference, MatrixDerivative::FiniteDifference)
    };

    Ok(HybridObservable::from_matrix_field(MatrixField::new(
        cl_dim, nq, eval, dx, dp,
    )))
}

// ---------------------------------------------------------------------------
// First-moment reference for the bilinear model.

/// Closed-form evolution of the first moments of the bilinear model. The
/// moments obey the classical equations of an `(n+1)`-oscillator chain, so
/// this diagonalizes the mass-weighted stiffness matrix once and evaluates
/// normal-mode cosines at any time.
#[derive(Debug, Clone)]
pub struct MomentReference {
    n: usize,
    inv_sqrt_mass: DVector<f64>,
    modes: DMatrix<f64>,
    frequencies: Vec<f64>,
    a: DVector<f64>,
    b: DVector<f64>,
}

/// Builds the moment oracle for initial classical data `(x0, p0)` and
/// quantum first moments `(<X>, <P>)`.
pub fn bilinear_moment_reference(
    params: &BilinearParams,
    x0: &[f64],
    p0: &[f64],
    qx0: f64,
    qp0: f64,
) -> Result<MomentReference> {
    params.validate()?;
    let n = params.cl_dim();
    if x0.len() != n || p0.len() != n {
        return Err(Error::DimensionMismatch {
            context: "moment reference initial data",
            expected: n,
            actual: x0.len().min(p0.len()),
        });
    }
    check_finite("initial quantum position moment", qx0)?;
    check_finite("initial quantum momentum moment", qp0)?;

    let m = n + 1;
    let nc = params.mass.len();
    let mut masses = DVector::<f64>::zeros(m);
    for k in 0..nc {
        masses[k] = params.mass[k];
    }
    for (j, &fm) in params.free_mass.iter().enumerate() {
        masses[nc + j] = fm;
    }
    masses[n] = params.quantum_mass;

    // Probe coordinates contribute no stiffness; they show up as exact
    // zero-frequency modes.
    let mut stiffness = DMatrix::<f64>::zeros(m, m);
    for k in 0..nc {
        stiffness[(k, k)] = params.mass[k] * params.frequency[k] * params.frequency[k];
        stiffness[(k, n)] = params.coupling[k];
        stiffness[(n, k)] = params.coupling[k];
    }
    stiffness[(n, n)] = params.quantum_mass * params.quantum_frequency * params.quantum_frequency;

    let inv_sqrt_mass = masses.map(|v| 1.0 / v.sqrt());
    let mut weighted = stiffness;
    for i in 0..m {
        for j in 0..m {
            weighted[(i, j)] *= inv_sqrt_mass[i] * inv_sqrt_mass[j];
        }
    }
    let eig = weighted.symmetric_eigen();
    let ev_scale = eig.eigenvalues.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut modes = DMatrix::<f64>::zeros(m, m);
    let mut frequencies = Vec::with_capacity(m);
    for (col, &idx) in order.iter().enumerate() {
        let ev = eig.eigenvalues[idx];
        if ev < -1e-9 * ev_scale {
            return Err(Error::InvalidInput(format!(
                "the coupling makes the joint quadratic form indefinite (eigenvalue {ev:.3e})"
            )));
        }
        frequencies.push(ev.max(0.0).sqrt());
        modes.set_column(col, &eig.eigenvectors.column(idx));
    }

    let mut y0 = DVector::<f64>::zeros(m);
    let mut ydot0 = DVector::<f64>::zeros(m);
    for k in 0..n {
        y0[k] = x0[k] / inv_sqrt_mass[k];
        ydot0[k] = p0[k] * inv_sqrt_mass[k];
    }
    y0[n] = qx0 / inv_sqrt_mass[n];
    ydot0[n] = qp0 * inv_sqrt_mass[n];

    let a = modes.transpose() * y0;
    let b = modes.transpose() * ydot0;

    Ok(MomentReference {
        n,
        inv_sqrt_mass,
        modes,
        frequencies,
        a,
        b,
    })
}

impl MomentReference {
    /// Normal-mode angular frequencies, ascending.
    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// `(x, p, <X>, <P>)` at time `t`.
    pub fn evaluate(&self, t: f64) -> (DVector<f64>, DVector<f64>, f64, f64) {
        let m = self.frequencies.len();
        let mut yc = DVector::<f64>::zeros(m);
        let mut ydc = DVector::<f64>::zeros(m);
        for i in 0..m {
            let w = self.frequencies[i];
            let (c, s_over_w, w_s) = if w > 1e-9 {
                ((w * t).cos(), (w * t).sin() / w, w * (w * t).sin())
            } else {
                (1.0, t, 0.0)
            };
            yc[i] = c * self.a[i] + s_over_w * self.b[i];
            ydc[i] = -w_s * self.a[i] + c * self.b[i];
        }
        let y = &self.modes * yc;
        let ydot = &self.modes * ydc;

        let n = self.n;
        let mut x = DVector::<f64>::zeros(n);
        let mut p = DVector::<f64>::zeros(n);
        for k in 0..n {
            x[k] = y[k] * self.inv_sqrt_mass[k];
            p[k] = ydot[k] / self.inv_sqrt_mass[k];
        }
        let qx = y[n] * self.inv_sqrt_mass[n];
        let qp = ydot[n] / self.inv_sqrt_mass[n];
        (x, p, qx, qp)
    }
}

/// Angular frequency of a uniformly sampled cosine from the three-term
/// identity `y(t+D) + y(t-D) = 2 cos(w D) y(t)`, least squares over all
/// interior samples with lag `D = stride * dt`.
pub fn mode_frequency_estimate(series: &[f64], dt: f64, stride: usize) -> Result<f64> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("sample spacing must be positive, got {dt}")));
    }
    if stride == 0 || series.len() < 2 * stride + 1 {
        return Err(Error::InvalidInput(format!(
            "need more than {} samples for stride {stride}",
            2 * stride
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for k in stride..series.len() - stride {
        num += series[k] * (series[k + stride] + series[k - stride]);
        den += 2.0 * series[k] * series[k];
    }
    if den < 1e-300 {
        return Err(Error::InvalidInput("the series carries no signal".into()));
    }
    let c = (num / den).clamp(-1.0, 1.0);
    Ok(c.acos() / (stride as f64 * dt))
}

/// Warning text when initial data presses against the basis truncation: the
/// occupation of the top three levels exceeds [`TRUNCATION_TOL`].
pub fn truncation_warning(model: &ModelSpec, q: &QuantumPhasePoint) -> Result<Option<String>> {
    let tail = model.tail_occupation(q, 3)?;
    if tail > TRUNCATION_TOL {
        Ok(Some(format!(
            "occupation {tail:.3e} in the top three of {} levels; raise the truncation dimension",
            model.qm_dim()
        )))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brackets::finite_difference_gradient;
    use crate::dynamics::{flow_step, total_hamiltonian, trajectory};
    use crate::observables::{PhaseFunction, QuadraticObservable};
    use crate::phase_space::{encode_state, phase_rotate, HybridPoint};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn unit_params(coupling: f64, levels: usize) -> BilinearParams {
        BilinearParams {
            mass: vec![1.0],
            frequency: vec![1.0],
            coupling: vec![coupling],
            free_mass: vec![],
            quantum_mass: 1.0,
            quantum_frequency: 1.0,
            levels,
        }
    }

    fn localized_unit(levels: usize, nodes: usize) -> LocalizedParams {
        LocalizedParams {
            mass: vec![1.0],
            frequency: vec![1.0],
            coupling: vec![1.0],
            free_mass: vec![],
            quantum_mass: 1.0,
            quantum_frequency: 1.0,
            levels,
            quadrature: QuadratureSpec {
                nodes,
                range_multiplier: 1.0,
            },
        }
    }

    fn point(x: &[f64], p: &[f64], c: &[Complex64]) -> HybridPoint {
        let cl = ClassicalPoint::from_slices(x, p).unwrap();
        let qm = encode_state(c).unwrap();
        HybridPoint::new(cl, qm)
    }

    fn level_state(n: usize, j: usize) -> Vec<Complex64> {
        let mut c = vec![c64(0.0, 0.0); n];
        c[j] = c64(1.0, 0.0);
        c
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        let mut c: Vec<Complex64> = (0..n)
            .map(|_| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let norm = c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        for v in &mut c {
            *v /= norm;
        }
        c
    }

    #[test]
    fn ground_state_takes_the_gaussian_normalization() {
        let v = hermite_eval(0, 0.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(v, PI.powf(-0.25), epsilon = 1e-14);
        assert_eq!(hermite_eval(1, 0.0, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn eigenfunctions_scale_with_the_oscillator_length() {
        let mass = 3.0;
        let freq = 2.0;
        let q = 0.7;
        let mw: f64 = mass * freq;
        let expected = mw.powf(0.25) * PI.powf(-0.25) * (-0.5 * mw * q * q).exp();
        let (v, d) = hermite_eval_with_derivative(0, q, mass, freq).unwrap();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-13);
        assert_abs_diff_eq!(d, -mw * q * expected, epsilon = 1e-12);
    }

    #[test]
    fn eigenfunction_derivatives_match_finite_differences() {
        let mass = 1.3;
        let freq = 0.9;
        let h = 1e-6;
        for i in 0..10 {
            for step in 0..7 {
                let q = -3.0 + step as f64;
                let (_, d) = hermite_eval_with_derivative(i, q, mass, freq).unwrap();
                let up = hermite_eval(i, q + h, mass, freq).unwrap();
                let dn = hermite_eval(i, q - h, mass, freq).unwrap();
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (d - fd).abs() <= 1e-7,
                    "level {i} at q={q}: analytic {d} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn quadrature_weights_reproduce_gaussian_moments() {
        let (nodes, weights) = gauss_hermite(12).unwrap();
        let total: f64 = weights.iter().sum();
        assert_abs_diff_eq!(total, PI.sqrt(), epsilon = 1e-13);
        let second: f64 = nodes.iter().zip(&weights).map(|(u, w)| w * u * u).sum();
        assert_abs_diff_eq!(second, PI.sqrt() / 2.0, epsilon = 1e-12);
        let fourth: f64 = nodes.iter().zip(&weights).map(|(u, w)| w * u.powi(4)).sum();
        assert_abs_diff_eq!(fourth, 0.75 * PI.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn quadrature_is_exact_through_the_design_degree() {
        let (nodes, weights) = gauss_hermite(5).unwrap();
        let eighth: f64 = nodes.iter().zip(&weights).map(|(u, w)| w * u.powi(8)).sum();
        let exact = 105.0 / 16.0 * PI.sqrt();
        assert_abs_diff_eq!(eighth, exact, epsilon = 1e-12 * exact);
        let tenth: f64 = nodes.iter().zip(&weights).map(|(u, w)| w * u.powi(10)).sum();
        let exact_tenth = 945.0 / 32.0 * PI.sqrt();
        assert!((tenth - exact_tenth).abs() > 1e-3, "degree 10 should exceed the rule");
    }

    #[test]
    fn the_first_twelve_eigenfunctions_are_orthonormal_under_the_rule() {
        let (nodes, weights) = gauss_hermite(16).unwrap();
        let residual = orthonormality_residual(12, &nodes, &weights);
        assert!(residual < 1e-10, "gram residual {residual}");
    }

    #[test]
    fn orthonormality_holds_in_position_space() {
        let mass = 2.0_f64;
        let freq = 0.5_f64;
        let s = (mass * freq).sqrt();
        let (nodes, weights) = gauss_hermite(16).unwrap();
        let count = 12;
        let values: Vec<Vec<f64>> = nodes
            .iter()
            .map(|&u| {
                (0..count)
                    .map(|i| hermite_eval(i, u / s, mass, freq).unwrap())
                    .collect()
            })
            .collect();
        for i in 0..count {
            for j in 0..count {
                let mut sum = 0.0;
                for (m, &u) in nodes.iter().enumerate() {
                    sum += weights[m] * (u * u).exp() / s * values[m][i] * values[m][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (sum - target).abs() <= 1e-10,
                    "overlap ({i},{j}) = {sum}"
                );
            }
        }
    }

    #[test]
    fn too_coarse_a_rule_is_rejected_at_build_time() {
        let err = build_localized_bilinear(&localized_unit(10, 6)).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "got {err:?}");
        assert!(build_localized_bilinear(&localized_unit(10, 0)).is_ok());
    }

    #[test]
    fn bilinear_hamiltonian_splits_into_its_three_sectors() {
        let model = build_bilinear(&unit_params(0.3, 4)).unwrap();
        let inv = 0.5_f64.sqrt();
        let h = point(&[0.5], &[-0.2], &[c64(inv, 0.0), c64(inv, 0.0), c64(0.0, 0.0), c64(0.0, 0.0)]);
        let x01 = 0.5_f64.sqrt();
        let expected = 0.5 * (0.04 + 0.25) + (0.5 * 0.5 + 1.5 * 0.5) + 0.3 * 0.5 * x01;
        assert_abs_diff_eq!(total_hamiltonian(&model, &h).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn backreaction_enters_the_classical_force_with_the_coupling_sign() {
        let lambda = 0.3;
        let model = build_bilinear(&unit_params(lambda, 4)).unwrap();
        let inv = 0.5_f64.sqrt();
        let h = point(&[0.0], &[0.0], &[c64(inv, 0.0), c64(inv, 0.0), c64(0.0, 0.0), c64(0.0, 0.0)]);
        let g = model.gradient(&h).unwrap();
        let x01 = 0.5_f64.sqrt();
        assert_abs_diff_eq!(g.x[0], lambda * x01, epsilon = 1e-12);
        assert!(-g.x[0] < 0.0, "the coupling must pull the oscillator");
    }

    #[test]
    fn zero_coupling_evolves_sectors_independently() {
        let nq = 4;
        let model = build_bilinear(&unit_params(0.0, nq)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = random_state(&mut rng, nq);
        let h0 = point(&[0.8], &[-0.3], &c);

        let quantum_only = ModelSpec::new(
            ClassicalObservable::zero(1),
            level_hamiltonian(nq, 1.0),
            HybridObservable::zero(),
            BasisSet::harmonic(nq, 1.0, 1.0),
        )
        .unwrap();
        let classical_only = ModelSpec::new(
            oscillator_bath(&[1.0], &[1.0], &[]).unwrap(),
            HermitianMatrix::zeros(nq),
            HybridObservable::zero(),
            BasisSet::abstract_orthonormal(nq),
        )
        .unwrap();

        let q_ref = point(&[0.0], &[0.0], &c);
        let c_ref = point(&[0.8], &[-0.3], &c);

        let dt = 1e-3;
        let full = trajectory(&model, &h0, 0.5, dt).unwrap();
        let qr = trajectory(&quantum_only, &q_ref, 0.5, dt).unwrap();
        let cr = trajectory(&classical_only, &c_ref, 0.5, dt).unwrap();

        let end = full.states.last().unwrap();
        let qe = qr.states.last().unwrap();
        let ce = cr.states.last().unwrap();
        for i in 0..nq {
            assert!((end.quantum().x()[i] - qe.quantum().x()[i]).abs() <= 1e-12);
            assert!((end.quantum().p()[i] - qe.quantum().p()[i]).abs() <= 1e-12);
        }
        assert!((end.classical().x()[0] - ce.classical().x()[0]).abs() <= 1e-12);
        assert!((end.classical().p()[0] - ce.classical().p()[0]).abs() <= 1e-12);
    }

    fn harmonic_matrix_hamiltonian(basis: &BasisSet, mass: f64, freq: f64) -> HermitianMatrix {
        let (x_hat, p_hat) = position_momentum_matrices(basis).unwrap();
        let x2 = x_hat.matrix() * x_hat.matrix();
        let p2 = p_hat.matrix() * p_hat.matrix();
        let h = p2 * Complex64::new(0.5 / mass, 0.0)
            + x2 * Complex64::new(0.5 * mass * freq * freq, 0.0);
        HermitianMatrix::new(h).unwrap()
    }

    #[test]
    fn harmonic_matrix_assembly_matches_the_level_form_below_the_truncation_edge() {
        let nq = 6;
        let basis = BasisSet::harmonic(nq, 1.0, 1.0);
        let assembled = harmonic_matrix_hamiltonian(&basis, 1.0, 1.0);
        let levels = level_hamiltonian(nq, 1.0);

        // The truncated products disagree only in the top corner, where the
        // cut ladder drops half a quantum times the dimension.
        let corner = (assembled.matrix()[(nq - 1, nq - 1)] - levels.matrix()[(nq - 1, nq - 1)]).norm();
        assert_abs_diff_eq!(corner, nq as f64 / 2.0, epsilon = 1e-12);

        let generic = build_generic(
            oscillator_bath(&[1.0], &[1.0], &[]).unwrap(),
            assembled,
            HybridObservable::zero(),
            basis.clone(),
        )
        .unwrap();
        let bilinear = build_bilinear(&unit_params(0.0, nq)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let mut c = random_state(&mut rng, nq - 2);
            c.extend_from_slice(&[c64(0.0, 0.0), c64(0.0, 0.0)]);
            let h = point(
                &[rng.random_range(-1.0..1.0)],
                &[rng.random_range(-1.0..1.0)],
                &c,
            );
            let dv = (total_hamiltonian(&generic, &h).unwrap()
                - total_hamiltonian(&bilinear, &h).unwrap())
            .abs();
            assert!(dv <= 1e-12, "hamiltonians differ by {dv}");
            let ga = generic.gradient(&h).unwrap();
            let gb = bilinear.gradient(&h).unwrap();
            for i in 0..nq {
                assert!((ga.qx[i] - gb.qx[i]).abs() <= 1e-12);
                assert!((ga.qp[i] - gb.qp[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn free_hybrid_energy_is_purely_kinetic() {
        let nq = 4;
        let basis = BasisSet::harmonic(nq, 1.0, 1.0);
        let (_, p_hat) = position_momentum_matrices(&basis).unwrap();
        let p2 = HermitianMatrix::new(p_hat.matrix() * p_hat.matrix() * Complex64::new(0.5, 0.0)).unwrap();
        let h_cl = ClassicalObservable::polynomial(1, vec![monomial(1, 0.5, &[], &[(0, 2)])]).unwrap();
        let model = build_generic(h_cl, p2, HybridObservable::zero(), basis).unwrap();

        let inv = 0.5_f64.sqrt();
        let h = point(&[1.7], &[0.6], &[c64(inv, 0.0), c64(inv, 0.0), c64(0.0, 0.0), c64(0.0, 0.0)]);
        // (|0> + |1>)/sqrt(2) has <P^2> = 1 at unit mass and frequency.
        assert_abs_diff_eq!(
            total_hamiltonian(&model, &h).unwrap(),
            0.5 * 0.36 + 0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn weyl_ordering_symmetrizes_mixed_words() {
        let basis = BasisSet::harmonic(4, 1.0, 1.0);
        let (x_hat, p_hat) = position_momentum_matrices(&basis).unwrap();
        let coeff = ClassicalObservable::coordinate(1, 0).unwrap();
        let interaction = symmetrized_interaction(
            &basis,
            vec![RecipeTerm {
                coefficient: coeff,
                word: vec![OperatorSymbol::Position, OperatorSymbol::Momentum],
            }],
        )
        .unwrap();

        let x = 1.3;
        let pt = ClassicalPoint::from_slices(&[x], &[0.0]).unwrap();
        let m = interaction.matrix_at(&pt).unwrap().unwrap();
        let xp = x_hat.matrix() * p_hat.matrix();
        let px = p_hat.matrix() * x_hat.matrix();
        let expected = (xp + px) * Complex64::new(0.5 * x, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                let d = (m.matrix()[(i, j)] - expected[(i, j)]).norm();
                assert!(d <= 1e-13, "entry ({i},{j}) off by {d}");
            }
        }
    }

    #[test]
    fn the_empty_word_scales_the_identity() {
        let basis = BasisSet::harmonic(3, 1.0, 1.0);
        let interaction = symmetrized_interaction(
            &basis,
            vec![RecipeTerm {
                coefficient: ClassicalObservable::coordinate(1, 0).unwrap(),
                word: vec![],
            }],
        )
        .unwrap();
        let pt = ClassicalPoint::from_slices(&[2.5], &[0.0]).unwrap();
        let m = interaction.matrix_at(&pt).unwrap().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.5 } else { 0.0 };
                assert_abs_diff_eq!(m.matrix()[(i, j)].re, want, epsilon = 1e-14);
                assert_abs_diff_eq!(m.matrix()[(i, j)].im, 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn weyl_field_analytic_gradients_match_finite_differences() {
        let basis = BasisSet::harmonic(4, 1.0, 1.0);
        let coeff = ClassicalObservable::polynomial(1, vec![monomial(1, 1.0, &[(0, 2)], &[])]).unwrap();
        assert!(coeff.has_analytic_gradient());
        let interaction = symmetrized_interaction(
            &basis,
            vec![RecipeTerm {
                coefficient: coeff,
                word: vec![OperatorSymbol::Position, OperatorSymbol::Momentum],
            }],
        )
        .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_state(&mut rng, 4);
        let h = point(&[0.9], &[-0.4], &c);
        let g = interaction.gradient(&h).unwrap();
        let fd = finite_difference_gradient(&interaction, &h).unwrap();
        assert!((g.x[0] - fd.x[0]).abs() <= 1e-6, "{} vs {}", g.x[0], fd.x[0]);
        assert!((g.p[0] - fd.p[0]).abs() <= 1e-6);
    }

    #[test]
    fn localized_coupling_vanishes_at_the_origin() {
        let model = build_localized_bilinear(&localized_unit(8, 0)).unwrap();
        let h = point(&[0.0], &[0.4], &level_state(8, 0));
        assert_eq!(model.interaction().value(&h).unwrap(), 0.0);
    }

    #[test]
    fn localized_ground_state_overlap_matches_the_closed_form() {
        let model = build_localized_bilinear(&localized_unit(8, 0)).unwrap();
        let h = point(&[1.0], &[0.0], &level_state(8, 0));
        let expected = (-1.0_f64).exp() / PI.sqrt();
        assert_abs_diff_eq!(model.interaction().value(&h).unwrap(), expected, epsilon = 1e-10);
    }

    #[test]
    fn localized_coupling_dies_off_beyond_the_resolved_range() {
        let model = build_localized_bilinear(&localized_unit(8, 0)).unwrap();
        let far = point(&[8.0], &[0.0], &level_state(8, 0));
        assert!(model.interaction().value(&far).unwrap().abs() <= 1e-12);
        assert!(!model.within_validated_range(far.classical()));
        let near = point(&[1.0], &[0.0], &level_state(8, 0));
        assert!(model.within_validated_range(near.classical()));
    }

    #[test]
    fn localized_gradients_match_finite_differences_at_random_points() {
        let model = build_localized_bilinear(&localized_unit(8, 0)).unwrap();
        let interaction = model.interaction();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let c = random_state(&mut rng, 8);
            let h = point(&[rng.random_range(-2.0..2.0)], &[rng.random_range(-1.0..1.0)], &c);
            let g = interaction.gradient(&h).unwrap();
            let fd = finite_difference_gradient(interaction, &h).unwrap();
            assert!(
                (g.x[0] - fd.x[0]).abs() <= 1e-7,
                "analytic {} vs fd {}",
                g.x[0],
                fd.x[0]
            );
        }
    }

    #[test]
    fn localized_value_is_invariant_under_phase_rotation() {
        let model = build_localized_bilinear(&localized_unit(8, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let c = random_state(&mut rng, 8);
        let h = point(&[1.2], &[0.0], &c);
        let rotated = HybridPoint::new(
            h.classical().clone(),
            phase_rotate(h.quantum(), 0.7),
        );
        let v0 = model.interaction().value(&h).unwrap();
        let v1 = model.interaction().value(&rotated).unwrap();
        assert_abs_diff_eq!(v0, v1, epsilon = 1e-13);
    }

    #[test]
    fn interaction_matrices_stay_hermitian_across_the_classical_range() {
        let bilinear = build_bilinear(&unit_params(0.4, 6)).unwrap();
        let localized = build_localized_bilinear(&localized_unit(6, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let pt = ClassicalPoint::from_slices(
                &[rng.random_range(-3.0..3.0)],
                &[rng.random_range(-1.0..1.0)],
            )
            .unwrap();
            for model in [&bilinear, &localized] {
                let m = model.interaction().matrix_at(&pt).unwrap().unwrap();
                let mat = m.matrix();
                for i in 0..6 {
                    for j in 0..6 {
                        let d = (mat[(i, j)] - mat[(j, i)].conj()).norm();
                        assert!(d <= 1e-12, "hermiticity defect {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn normal_modes_of_the_unit_chain_split_by_the_coupling() {
        let reference =
            bilinear_moment_reference(&unit_params(0.1, 4), &[1.0], &[0.0], 0.0, 0.0).unwrap();
        let freqs = reference.frequencies();
        assert_abs_diff_eq!(freqs[0], 0.9_f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(freqs[1], 1.1_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn moment_reference_solves_the_coupled_linear_system() {
        let params = BilinearParams {
            mass: vec![1.4, 0.8],
            frequency: vec![0.9, 1.7],
            coupling: vec![0.2, -0.3],
            free_mass: vec![],
            quantum_mass: 1.1,
            quantum_frequency: 1.3,
            levels: 4,
        };
        let reference =
            bilinear_moment_reference(&params, &[0.5, -0.2], &[0.1, 0.4], 0.3, -0.1).unwrap();

        let h = 1e-4;
        for &t in &[0.0, 0.7, 2.3] {
            let (x, _, qx, _) = reference.evaluate(t);
            let (xp, _, qxp, _) = reference.evaluate(t + h);
            let (xm, _, qxm, _) = reference.evaluate(t - h);
            let q = [x[0], x[1], qx];
            let acc = [
                (xp[0] - 2.0 * x[0] + xm[0]) / (h * h),
                (xp[1] - 2.0 * x[1] + xm[1]) / (h * h),
                (qxp - 2.0 * qx + qxm) / (h * h),
            ];
            let masses = [1.4, 0.8, 1.1];
            let springs = [
                1.4 * 0.81 * q[0] + 0.2 * q[2],
                0.8 * 2.89 * q[1] - 0.3 * q[2],
                1.1 * 1.69 * q[2] + 0.2 * q[0] - 0.3 * q[1],
            ];
            for i in 0..3 {
                let residual = masses[i] * acc[i] + springs[i];
                assert!(residual.abs() <= 1e-5, "component {i} at t={t}: {residual}");
            }
        }
    }

    #[test]
    fn free_probes_drift_without_forces() {
        let mut params = unit_params(0.3, 5);
        params.free_mass = vec![1.0, 2.5];
        let model = build_bilinear(&params).unwrap();

        // Coordinate 1 is a probe at rest, coordinate 2 a probe in motion.
        let mut h = point(&[0.4, -0.7, 0.2], &[0.1, 0.0, 0.5], &level_state(5, 1));
        let dt = 1e-2;
        for _ in 0..500 {
            h = flow_step(&model, &h, dt).unwrap();
        }

        assert_eq!(h.classical().x()[1], -0.7);
        assert_eq!(h.classical().p()[1], 0.0);
        assert_eq!(h.classical().p()[2], 0.5);
        let drift = 0.2 + 0.5 * 5.0 / 2.5;
        assert!((h.classical().x()[2] - drift).abs() <= 1e-10);
        assert!((h.classical().x()[0] - 0.4).abs() > 1e-3);
    }

    #[test]
    fn moment_reference_carries_probes_as_zero_frequency_modes() {
        let mut params = unit_params(0.2, 4);
        params.free_mass = vec![2.0];
        let reference =
            bilinear_moment_reference(&params, &[0.3, -0.1], &[0.0, 0.6], 0.2, 0.0).unwrap();
        for &t in &[0.0, 1.3, 4.0] {
            let (x, p, _, _) = reference.evaluate(t);
            assert!((x[1] - (-0.1 + 0.6 * t / 2.0)).abs() <= 1e-12);
            assert!((p[1] - 0.6).abs() <= 1e-12);
        }
    }

    #[test]
    fn localized_model_accepts_free_probes() {
        let mut params = localized_unit(4, 0);
        params.free_mass = vec![1.5];
        let model = build_localized_bilinear(&params).unwrap();

        let mut h = point(&[0.5, -0.2], &[0.1, 0.0], &level_state(4, 0));
        let dt = 1e-2;
        for _ in 0..200 {
            h = flow_step(&model, &h, dt).unwrap();
        }
        assert_eq!(h.classical().x()[1], -0.2);
        assert_eq!(h.classical().p()[1], 0.0);
        assert!((h.classical().x()[0] - 0.5).abs() > 1e-3);
    }

    #[test]
    fn hybrid_first_moments_track_the_linear_reference() {
        let params = unit_params(0.1, 8);
        let model = build_bilinear(&params).unwrap();
        let basis = BasisSet::harmonic(8, 1.0, 1.0);
        let (x_hat, p_hat) = position_momentum_matrices(&basis).unwrap();
        let x_obs = QuadraticObservable::new(x_hat);
        let p_obs = QuadraticObservable::new(p_hat);

        let mut h = point(&[0.3], &[0.1], &level_state(8, 0));
        let reference = bilinear_moment_reference(&params, &[0.3], &[0.1], 0.0, 0.0).unwrap();

        let dt = 1e-3;
        let steps = 2000;
        for _ in 0..steps {
            h = flow_step(&model, &h, dt).unwrap();
        }
        let t = dt * steps as f64;
        let (x, p, qx, qp) = reference.evaluate(t);
        assert!((h.classical().x()[0] - x[0]).abs() <= 1e-6);
        assert!((h.classical().p()[0] - p[0]).abs() <= 1e-6);
        assert!((x_obs.expectation(h.quantum()).unwrap() - qx).abs() <= 1e-6);
        assert!((p_obs.expectation(h.quantum()).unwrap() - qp).abs() <= 1e-6);
    }

    #[test]
    fn frequency_estimator_recovers_a_synthetic_tone() {
        let w = 1.1_f64.sqrt();
        let dt = 1e-3;
        let series: Vec<f64> = (0..5000)
            .map(|k| (w * dt * k as f64 + 0.4).cos())
            .collect();
        let estimate = mode_frequency_estimate(&series, dt, 400).unwrap();
        assert_abs_diff_eq!(estimate, w, epsilon = 1e-10);
    }

    #[test]
    fn estimator_rejects_degenerate_inputs() {
        assert!(mode_frequency_estimate(&[1.0, 0.5], 1e-3, 1).is_err());
        assert!(mode_frequency_estimate(&vec![0.0; 100], 1e-3, 10).is_err());
        assert!(mode_frequency_estimate(&vec![1.0; 100], 0.0, 10).is_err());
    }

    #[test]
    fn truncation_pressure_is_reported_for_top_heavy_states() {
        let model = build_bilinear(&unit_params(0.1, 8)).unwrap();
        let ground = encode_state(&level_state(8, 0)).unwrap();
        assert!(truncation_warning(&model, &ground).unwrap().is_none());
        let top = encode_state(&level_state(8, 7)).unwrap();
        let warning = truncation_warning(&model, &top).unwrap();
        assert!(warning.is_some(), "a top-level state must trip the check");
    }

    #[test]
    fn bilinear_parameters_are_validated() {
        let mut p = unit_params(0.1, 4);
        p.mass = vec![-1.0];
        assert!(build_bilinear(&p).is_err());

        let mut p = unit_params(0.1, 4);
        p.levels = 1;
        assert!(build_bilinear(&p).is_err());

        let mut p = unit_params(0.1, 4);
        p.coupling = vec![0.1, 0.2];
        assert!(build_bilinear(&p).is_err());

        let mut p = unit_params(0.1, 4);
        p.quantum_frequency = 0.0;
        assert!(build_bilinear(&p).is_err());
    }
}

//! Observables on the hybrid phase space.
//!
//! Four layers, one evaluation convention:
//!
//! * [`QuadraticObservable`]: `<psi|G|psi>` as the quadratic form
//!   `(1/2) sum_ij G_ij (X_i - iP_i)(X_j + iP_j)` of a Hermitian `G`.
//! * [`ClassicalObservable`]: scalar `f(x, p)`, with analytic gradients when
//!   supplied and a central-difference fallback otherwise.
//! * [`HybridObservable`]: `s(x, p) + <psi|M(x, p)|psi>`, the general
//!   coupled form used for interactions and total Hamiltonians.
//! * [`AlmostClassicalObservable`]: sums of `coeff(x, p) * prod conj(z_i) z_j`
//!   with `z_i = (X_i + iP_i)/sqrt(2)`; the smallest class containing both
//!   sectors that stays closed under the hybrid bracket.
//!
//! [`PhaseFunction`] exposes value + gradient uniformly; the bracket module
//! consumes nothing else.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase_space::{decode_state, BasisSet, ClassicalPoint, HybridPoint};

/// Entrywise tolerance accepted when validating Hermiticity.
pub const HERMITICITY_TOL: f64 = 1e-12;

/// Relative bound on the imaginary residual of real-valued evaluations.
pub const REALNESS_TOL: f64 = 1e-12;

/// Relative bound on the imaginary residual of almost-classical evaluations,
/// whose longer products accumulate more rounding.
pub const AC_REALNESS_TOL: f64 = 1e-10;

/// Central-difference step for coordinate `v`.
pub(crate) fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

// ---------------------------------------------------------------------------
// Hermitian matrices
// ---------------------------------------------------------------------------

/// Square complex matrix validated and stored exactly Hermitian.
///
/// Construction averages each entry with its adjoint partner after checking
/// the asymmetry stays under [`HERMITICITY_TOL`] (relative to the largest
/// entry), so `m[(i, j)] == conj(m[(j, i)])` holds bitwise afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct HermitianMatrix {
    m: DMatrix<Complex64>,
}

impl HermitianMatrix {
    pub fn new(m: DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                context: "Hermitian matrix",
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        let scale = m
            .iter()
            .map(|c| c.norm())
            .fold(0.0_f64, f64::max)
            .max(1.0);
        if !scale.is_finite() {
            return Err(Error::NonFinite {
                context: "Hermitian matrix",
            });
        }
        let mut residual = 0.0_f64;
        for i in 0..m.nrows() {
            for j in i..m.ncols() {
                residual = residual.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        if residual > HERMITICITY_TOL * scale {
            return Err(Error::NotHermitian { residual });
        }
        let n = m.nrows();
        let mut sym = DMatrix::zeros(n, n);
        for i in 0..n {
            sym[(i, i)] = Complex64::new(m[(i, i)].re, 0.0);
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)].conj());
                sym[(i, j)] = v;
                sym[(j, i)] = v.conj();
            }
        }
        Ok(Self { m: sym })
    }

    pub fn from_real_symmetric(m: DMatrix<f64>) -> Result<Self> {
        Self::new(m.map(|v| Complex64::new(v, 0.0)))
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            m: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            m: DMatrix::identity(n, n),
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        Self {
            m: DMatrix::from_diagonal(&DVector::from_iterator(
                d.len(),
                d.iter().map(|&v| Complex64::new(v, 0.0)),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.m
    }

    /// `M c`.
    pub fn apply(&self, c: &DVector<Complex64>) -> DVector<Complex64> {
        &self.m * c
    }

    /// `Re(c^H M c)`, with the imaginary residual checked against
    /// [`REALNESS_TOL`].
    pub fn expectation(&self, c: &DVector<Complex64>) -> Result<f64> {
        if c.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "matrix expectation",
                expected: self.dim(),
                actual: c.len(),
            });
        }
        let v: Complex64 = c.dotc(&self.apply(c));
        check_real(v, REALNESS_TOL, "matrix expectation")
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            m: self.m.map(|v| factor * v),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                context: "matrix sum",
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(Self {
            m: &self.m + &other.m,
        })
    }
}

/// Serialized layout: rows of `[re, im]` entry pairs.
#[derive(Serialize, Deserialize)]
struct MatrixRepr(Vec<Vec<[f64; 2]>>);

impl TryFrom<MatrixRepr> for HermitianMatrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        let n = r.0.len();
        for row in &r.0 {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "matrix rows",
                    expected: n,
                    actual: row.len(),
                });
            }
        }
        let m = DMatrix::from_fn(n, n, |i, j| Complex64::new(r.0[i][j][0], r.0[i][j][1]));
        HermitianMatrix::new(m)
    }
}

impl From<HermitianMatrix> for MatrixRepr {
    fn from(h: HermitianMatrix) -> Self {
        let n = h.dim();
        MatrixRepr(
            (0..n)
                .map(|i| (0..n).map(|j| [h.m[(i, j)].re, h.m[(i, j)].im]).collect())
                .collect(),
        )
    }
}

fn check_real(v: Complex64, tol: f64, context: &str) -> Result<f64> {
    if v.im.abs() > tol * v.re.abs().max(1.0) {
        return Err(Error::Integrity(format!(
            "{context} should be real, got imaginary residual {:.3e}",
            v.im
        )));
    }
    Ok(v.re)
}

// ---------------------------------------------------------------------------
// Quadratic observables
// ---------------------------------------------------------------------------

/// Expectation of a Hermitian operator as a quadratic form on `(X, P)`.
#[derive(Debug, Clone)]
pub struct QuadraticObservable {
    m: HermitianMatrix,
}

impl QuadraticObservable {
    pub fn new(m: HermitianMatrix) -> Self {
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn matrix(&self) -> &HermitianMatrix {
        &self.m
    }

    /// `(1/2) sum_ij G_ij (X_i - iP_i)(X_j + iP_j) = Re(c^H G c)`.
    ///
    /// Defined on and off the constraint surface.
    pub fn expectation(&self, q: &crate::phase_space::QuantumPhasePoint) -> Result<f64> {
        if q.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "quadratic observable",
                expected: self.dim(),
                actual: q.dim(),
            });
        }
        self.m.expectation(&decode_state(q))
    }

    /// `(dG/dX, dG/dP) = sqrt(2) (Re(Gc), Im(Gc))`.
    pub fn gradient(
        &self,
        q: &crate::phase_space::QuantumPhasePoint,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if q.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "quadratic observable gradient",
                expected: self.dim(),
                actual: q.dim(),
            });
        }
        let y = self.m.apply(&decode_state(q));
        let s = std::f64::consts::SQRT_2;
        Ok((
            DVector::from_iterator(y.len(), y.iter().map(|v| s * v.re)),
            DVector::from_iterator(y.len(), y.iter().map(|v| s * v.im)),
        ))
    }

    /// Same observable as single-pair almost-classical terms
    /// `sum_ij G_ij conj(z_i) z_j`.
    pub fn to_almost_classical(&self, cl_dim: usize) -> AlmostClassicalObservable {
        let n = self.dim();
        let one = ClassicalObservable::constant(cl_dim, 1.0);
        let mut terms = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let g = self.m.matrix()[(i, j)];
                if g != Complex64::new(0.0, 0.0) {
                    terms.push(AcTerm::scaled(g, one.clone(), vec![(i, j)]));
                }
            }
        }
        AlmostClassicalObservable::new(cl_dim, n, terms)
            .expect("quadratic form converts to valid almost-classical observable")
    }
}

// ---------------------------------------------------------------------------
// Classical observables
// ---------------------------------------------------------------------------

type ScalarFn = Arc<dyn Fn(&ClassicalPoint) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&ClassicalPoint) -> (DVector<f64>, DVector<f64>) + Send + Sync>;

/// Scalar function of the classical sector.
#[derive(Clone)]
pub struct ClassicalObservable {
    dim: usize,
    f: ScalarFn,
    grad: Option<GradFn>,
    constant: Option<f64>,
    /// Monomial expansion, kept through sums, products and rescaling so
    /// Poisson brackets of coefficients can stay symbolic.
    poly: Option<Arc<Vec<PolyTerm>>>,
}

impl std::fmt::Debug for ClassicalObservable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassicalObservable")
            .field("dim", &self.dim)
            .field("analytic_gradient", &self.grad.is_some())
            .field("constant", &self.constant)
            .finish()
    }
}

impl ClassicalObservable {
    /// Observable with finite-difference gradients.
    pub fn new(dim: usize, f: impl Fn(&ClassicalPoint) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            dim,
            f: Arc::new(f),
            grad: None,
            constant: None,
            poly: None,
        }
    }

    /// Observable with analytic gradients `(df/dx, df/dp)`.
    pub fn with_gradient(
        dim: usize,
        f: impl Fn(&ClassicalPoint) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&ClassicalPoint) -> (DVector<f64>, DVector<f64>) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            f: Arc::new(f),
            grad: Some(Arc::new(grad)),
            constant: None,
            poly: None,
        }
    }

    pub fn constant(dim: usize, v: f64) -> Self {
        let poly = if v == 0.0 {
            Vec::new()
        } else {
            vec![PolyTerm {
                coefficient: v,
                x_powers: vec![0; dim],
                p_powers: vec![0; dim],
            }]
        };
        Self {
            dim,
            f: Arc::new(move |_| v),
            grad: Some(Arc::new(move |pt: &ClassicalPoint| {
                (DVector::zeros(pt.dim()), DVector::zeros(pt.dim()))
            })),
            constant: Some(v),
            poly: Some(Arc::new(poly)),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(dim, 0.0)
    }

    /// The coordinate `x_k`.
    pub fn coordinate(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::IndexOutOfRange { index: k, dim });
        }
        let mut x_powers = vec![0; dim];
        x_powers[k] = 1;
        Self::polynomial(
            dim,
            vec![PolyTerm {
                coefficient: 1.0,
                x_powers,
                p_powers: vec![0; dim],
            }],
        )
    }

    /// The momentum `p_k`.
    pub fn momentum(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::IndexOutOfRange { index: k, dim });
        }
        let mut p_powers = vec![0; dim];
        p_powers[k] = 1;
        Self::polynomial(
            dim,
            vec![PolyTerm {
                coefficient: 1.0,
                x_powers: vec![0; dim],
                p_powers,
            }],
        )
    }

    /// Polynomial `sum_t c_t prod_k x_k^(a_tk) p_k^(b_tk)` with analytic
    /// gradients. Like terms are merged and the expansion is retained.
    pub fn polynomial(dim: usize, terms: Vec<PolyTerm>) -> Result<Self> {
        for t in &terms {
            if t.x_powers.len() != dim || t.p_powers.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "polynomial term powers",
                    expected: dim,
                    actual: t.x_powers.len().max(t.p_powers.len()),
                });
            }
        }
        let terms = poly_merge(terms);
        if terms.is_empty() {
            return Ok(Self::constant(dim, 0.0));
        }
        if terms.len() == 1 && terms[0].degree() == 0 {
            return Ok(Self::constant(dim, terms[0].coefficient));
        }
        let terms = Arc::new(terms);
        let value_terms = Arc::clone(&terms);
        let grad_terms = Arc::clone(&terms);
        let mut out = Self::with_gradient(
            dim,
            move |pt| value_terms.iter().map(|t| t.eval(pt)).sum(),
            move |pt| {
                let mut gx = DVector::zeros(pt.dim());
                let mut gp = DVector::zeros(pt.dim());
                for t in grad_terms.iter() {
                    t.accumulate_gradient(pt, &mut gx, &mut gp);
                }
                (gx, gp)
            },
        );
        out.poly = Some(terms);
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.grad.is_some()
    }

    /// `Some(v)` when the observable is a known constant.
    pub fn constant_value(&self) -> Option<f64> {
        self.constant
    }

    pub(crate) fn fn_ptr(&self) -> usize {
        Arc::as_ptr(&self.f) as *const () as usize
    }

    /// Monomial expansion when one is known.
    pub(crate) fn poly(&self) -> Option<&Arc<Vec<PolyTerm>>> {
        self.poly.as_ref()
    }

    fn check_dim(&self, pt: &ClassicalPoint, context: &'static str) -> Result<()> {
        if pt.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dim,
                actual: pt.dim(),
            });
        }
        Ok(())
    }

    pub fn value(&self, pt: &ClassicalPoint) -> Result<f64> {
        self.check_dim(pt, "classical observable")?;
        Ok((self.f)(pt))
    }

    /// Analytic gradient when available, central differences otherwise.
    pub fn gradient(&self, pt: &ClassicalPoint) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_dim(pt, "classical observable gradient")?;
        if let Some(g) = &self.grad {
            return Ok(g(pt));
        }
        let n = pt.dim();
        let mut gx = DVector::zeros(n);
        let mut gp = DVector::zeros(n);
        let mut probe = pt.clone();
        for k in 0..n {
            let h = fd_step(pt.x()[k]);
            probe.x[k] = pt.x()[k] + h;
            let fp = (self.f)(&probe);
            probe.x[k] = pt.x()[k] - h;
            let fm = (self.f)(&probe);
            probe.x[k] = pt.x()[k];
            gx[k] = (fp - fm) / (2.0 * h);

            let h = fd_step(pt.p()[k]);
            probe.p[k] = pt.p()[k] + h;
            let fp = (self.f)(&probe);
            probe.p[k] = pt.p()[k] - h;
            let fm = (self.f)(&probe);
            probe.p[k] = pt.p()[k];
            gp[k] = (fp - fm) / (2.0 * h);
        }
        Ok((gx, gp))
    }

    /// `factor * self`. A factor of exactly 1 returns a clone that shares
    /// the underlying function, which downstream term-merging relies on.
    pub fn scaled(&self, factor: f64) -> Self {
        if factor == 1.0 {
            return self.clone();
        }
        if let Some(v) = self.constant {
            return Self::constant(self.dim, factor * v);
        }
        if let Some(terms) = &self.poly {
            let scaled = terms
                .iter()
                .map(|t| PolyTerm {
                    coefficient: factor * t.coefficient,
                    x_powers: t.x_powers.clone(),
                    p_powers: t.p_powers.clone(),
                })
                .collect();
            return Self::polynomial(self.dim, scaled)
                .expect("rescaled polynomial keeps its dimension");
        }
        let f = self.f.clone();
        let grad = self.grad.clone().map(|g| -> GradFn {
            Arc::new(move |pt: &ClassicalPoint| {
                let (gx, gp) = g(pt);
                (factor * gx, factor * gp)
            })
        });
        Self {
            dim: self.dim,
            f: Arc::new(move |pt| factor * f(pt)),
            grad,
            constant: None,
            poly: None,
        }
    }

    pub fn sum(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                context: "classical observable sum",
                expected: self.dim,
                actual: other.dim,
            });
        }
        if let (Some(a), Some(b)) = (self.constant, other.constant) {
            return Ok(Self::constant(self.dim, a + b));
        }
        if self.constant == Some(0.0) {
            return Ok(other.clone());
        }
        if other.constant == Some(0.0) {
            return Ok(self.clone());
        }
        if let (Some(a), Some(b)) = (&self.poly, &other.poly) {
            let mut terms = a.as_ref().clone();
            terms.extend(b.iter().cloned());
            return Self::polynomial(self.dim, terms);
        }
        let fa = self.f.clone();
        let fb = other.f.clone();
        let grad = match (&self.grad, &other.grad) {
            (Some(ga), Some(gb)) => {
                let (ga, gb) = (ga.clone(), gb.clone());
                Some(Arc::new(move |pt: &ClassicalPoint| {
                    let (ax, ap) = ga(pt);
                    let (bx, bp) = gb(pt);
                    (ax + bx, ap + bp)
                }) as GradFn)
            }
            _ => None,
        };
        Ok(Self {
            dim: self.dim,
            f: Arc::new(move |pt| fa(pt) + fb(pt)),
            grad,
            constant: None,
            poly: None,
        })
    }

    /// Product, with analytic gradients by the product rule when both
    /// factors carry them. Constant factors fold into a rescaling so the
    /// underlying function pointer is preserved.
    pub fn product(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                context: "classical observable product",
                expected: self.dim,
                actual: other.dim,
            });
        }
        if let Some(v) = self.constant {
            return Ok(other.scaled(v));
        }
        if let Some(v) = other.constant {
            return Ok(self.scaled(v));
        }
        if let (Some(a), Some(b)) = (&self.poly, &other.poly) {
            return Self::polynomial(self.dim, poly_product(a, b));
        }
        let fa = self.f.clone();
        let fb = other.f.clone();
        let grad = match (&self.grad, &other.grad) {
            (Some(ga), Some(gb)) => {
                let (ga, gb) = (ga.clone(), gb.clone());
                let (fa, fb) = (self.f.clone(), other.f.clone());
                Some(Arc::new(move |pt: &ClassicalPoint| {
                    let (ax, ap) = ga(pt);
                    let (bx, bp) = gb(pt);
                    let (va, vb) = (fa(pt), fb(pt));
                    (vb * ax + va * bx, vb * ap + va * bp)
                }) as GradFn)
            }
            _ => None,
        };
        Ok(Self {
            dim: self.dim,
            f: Arc::new(move |pt| fa(pt) * fb(pt)),
            grad,
            constant: None,
            poly: None,
        })
    }
}

/// One monomial of [`ClassicalObservable::polynomial`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolyTerm {
    pub coefficient: f64,
    pub x_powers: Vec<u32>,
    pub p_powers: Vec<u32>,
}

impl PolyTerm {
    fn degree(&self) -> u32 {
        self.x_powers.iter().sum::<u32>() + self.p_powers.iter().sum::<u32>()
    }

    fn mul(&self, other: &PolyTerm) -> PolyTerm {
        PolyTerm {
            coefficient: self.coefficient * other.coefficient,
            x_powers: self
                .x_powers
                .iter()
                .zip(&other.x_powers)
                .map(|(a, b)| a + b)
                .collect(),
            p_powers: self
                .p_powers
                .iter()
                .zip(&other.p_powers)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    fn dx(&self, k: usize) -> Option<PolyTerm> {
        let a = self.x_powers[k];
        if a == 0 {
            return None;
        }
        let mut x_powers = self.x_powers.clone();
        x_powers[k] = a - 1;
        Some(PolyTerm {
            coefficient: self.coefficient * a as f64,
            x_powers,
            p_powers: self.p_powers.clone(),
        })
    }

    fn dp(&self, k: usize) -> Option<PolyTerm> {
        let b = self.p_powers[k];
        if b == 0 {
            return None;
        }
        let mut p_powers = self.p_powers.clone();
        p_powers[k] = b - 1;
        Some(PolyTerm {
            coefficient: self.coefficient * b as f64,
            x_powers: self.x_powers.clone(),
            p_powers,
        })
    }

    fn eval(&self, pt: &ClassicalPoint) -> f64 {
        let mut v = self.coefficient;
        for (k, &a) in self.x_powers.iter().enumerate() {
            v *= pt.x()[k].powi(a as i32);
        }
        for (k, &b) in self.p_powers.iter().enumerate() {
            v *= pt.p()[k].powi(b as i32);
        }
        v
    }

    fn accumulate_gradient(&self, pt: &ClassicalPoint, gx: &mut DVector<f64>, gp: &mut DVector<f64>) {
        for k in 0..pt.dim() {
            let a = self.x_powers[k];
            if a > 0 {
                let mut v = self.coefficient * a as f64 * pt.x()[k].powi(a as i32 - 1);
                for (m, &am) in self.x_powers.iter().enumerate() {
                    if m != k {
                        v *= pt.x()[m].powi(am as i32);
                    }
                }
                for (m, &bm) in self.p_powers.iter().enumerate() {
                    v *= pt.p()[m].powi(bm as i32);
                }
                gx[k] += v;
            }
            let b = self.p_powers[k];
            if b > 0 {
                let mut v = self.coefficient * b as f64 * pt.p()[k].powi(b as i32 - 1);
                for (m, &am) in self.x_powers.iter().enumerate() {
                    v *= pt.x()[m].powi(am as i32);
                }
                for (m, &bm) in self.p_powers.iter().enumerate() {
                    if m != k {
                        v *= pt.p()[m].powi(bm as i32);
                    }
                }
                gp[k] += v;
            }
        }
    }
}

/// Collects like monomials and drops exact zeros. Output order is the
/// lexicographic order of the power vectors, so it is deterministic.
pub(crate) fn poly_merge(terms: Vec<PolyTerm>) -> Vec<PolyTerm> {
    let mut acc: std::collections::BTreeMap<(Vec<u32>, Vec<u32>), f64> =
        std::collections::BTreeMap::new();
    for t in terms {
        *acc.entry((t.x_powers, t.p_powers)).or_insert(0.0) += t.coefficient;
    }
    acc.into_iter()
        .filter(|&(_, c)| c != 0.0)
        .map(|((x_powers, p_powers), coefficient)| PolyTerm {
            coefficient,
            x_powers,
            p_powers,
        })
        .collect()
}

pub(crate) fn poly_product(a: &[PolyTerm], b: &[PolyTerm]) -> Vec<PolyTerm> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for s in a {
        for t in b {
            out.push(s.mul(t));
        }
    }
    poly_merge(out)
}

/// Canonical Poisson bracket of two monomial expansions over `dim`
/// coordinate pairs, computed term by term.
pub(crate) fn poly_poisson(a: &[PolyTerm], b: &[PolyTerm], dim: usize) -> Vec<PolyTerm> {
    let mut out = Vec::new();
    for s in a {
        for t in b {
            for k in 0..dim {
                if let (Some(sx), Some(tp)) = (s.dx(k), t.dp(k)) {
                    out.push(sx.mul(&tp));
                }
                if let (Some(sp), Some(tx)) = (s.dp(k), t.dx(k)) {
                    let mut term = sp.mul(&tx);
                    term.coefficient = -term.coefficient;
                    out.push(term);
                }
            }
        }
    }
    poly_merge(out)
}

// ---------------------------------------------------------------------------
// Hybrid observables
// ---------------------------------------------------------------------------

type MatrixFn = Arc<dyn Fn(&ClassicalPoint) -> Result<HermitianMatrix> + Send + Sync>;
type MatrixDerivFn = Arc<dyn Fn(&ClassicalPoint, usize) -> Result<HermitianMatrix> + Send + Sync>;

/// How a matrix field differentiates along one classical coordinate family.
#[derive(Clone)]
pub enum MatrixDerivative {
    /// The field does not depend on these coordinates.
    Zero,
    /// `(pt, k) -> dM/dcoord_k`.
    Analytic(MatrixDerivFn),
    /// Central differences of the field itself.
    FiniteDifference,
}

impl std::fmt::Debug for MatrixDerivative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatrixDerivative::Zero => write!(f, "Zero"),
            MatrixDerivative::Analytic(_) => write!(f, "Analytic"),
            MatrixDerivative::FiniteDifference => write!(f, "FiniteDifference"),
        }
    }
}

/// Hermitian-matrix-valued function `M(x, p)` with derivative information.
#[derive(Clone)]
pub struct MatrixField {
    cl_dim: Option<usize>,
    qm_dim: usize,
    m: MatrixFn,
    dx: MatrixDerivative,
    dp: MatrixDerivative,
}

impl std::fmt::Debug for MatrixField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MatrixField")
            .field("cl_dim", &self.cl_dim)
            .field("qm_dim", &self.qm_dim)
            .field("dx", &self.dx)
            .field("dp", &self.dp)
            .finish()
    }
}

impl MatrixField {
    pub fn new(
        cl_dim: usize,
        qm_dim: usize,
        m: impl Fn(&ClassicalPoint) -> Result<HermitianMatrix> + Send + Sync + 'static,
        dx: MatrixDerivative,
        dp: MatrixDerivative,
    ) -> Self {
        Self {
            cl_dim: Some(cl_dim),
            qm_dim,
            m: Arc::new(m),
            dx,
            dp,
        }
    }

    /// Constant matrix; works with any classical dimension.
    pub fn constant(matrix: HermitianMatrix) -> Self {
        let qm_dim = matrix.dim();
        Self {
            cl_dim: None,
            qm_dim,
            m: Arc::new(move |_| Ok(matrix.clone())),
            dx: MatrixDerivative::Zero,
            dp: MatrixDerivative::Zero,
        }
    }

    pub fn qm_dim(&self) -> usize {
        self.qm_dim
    }

    pub fn cl_dim(&self) -> Option<usize> {
        self.cl_dim
    }

    fn check_dims(&self, pt: &ClassicalPoint) -> Result<()> {
        if let Some(n) = self.cl_dim {
            if pt.dim() != n {
                return Err(Error::DimensionMismatch {
                    context: "matrix field classical point",
                    expected: n,
                    actual: pt.dim(),
                });
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, pt: &ClassicalPoint) -> Result<HermitianMatrix> {
        self.check_dims(pt)?;
        let m = (self.m)(pt)?;
        if m.dim() != self.qm_dim {
            return Err(Error::DimensionMismatch {
                context: "matrix field value",
                expected: self.qm_dim,
                actual: m.dim(),
            });
        }
        Ok(m)
    }

    /// Gradient of `c^H M(x, p) c` with respect to `(x, p)`.
    fn expectation_gradient(
        &self,
        pt: &ClassicalPoint,
        c: &DVector<Complex64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_dims(pt)?;
        let n = pt.dim();
        let gx = self.expectation_gradient_family(pt, c, &self.dx, true, n)?;
        let gp = self.expectation_gradient_family(pt, c, &self.dp, false, n)?;
        Ok((gx, gp))
    }

    fn expectation_gradient_family(
        &self,
        pt: &ClassicalPoint,
        c: &DVector<Complex64>,
        deriv: &MatrixDerivative,
        along_x: bool,
        n: usize,
    ) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(n);
        match deriv {
            MatrixDerivative::Zero => {}
            MatrixDerivative::Analytic(d) => {
                for k in 0..n {
                    g[k] = d(pt, k)?.expectation(c)?;
                }
            }
            MatrixDerivative::FiniteDifference => {
                let set = |probe: &mut ClassicalPoint, k: usize, v: f64| {
                    if along_x {
                        probe.x[k] = v;
                    } else {
                        probe.p[k] = v;
                    }
                };
                let mut probe = pt.clone();
                for k in 0..n {
                    let base = if along_x { pt.x()[k] } else { pt.p()[k] };
                    let h = fd_step(base);
                    set(&mut probe, k, base + h);
                    let fp = (self.m)(&probe)?.expectation(c)?;
                    set(&mut probe, k, base - h);
                    let fm = (self.m)(&probe)?.expectation(c)?;
                    set(&mut probe, k, base);
                    g[k] = (fp - fm) / (2.0 * h);
                }
            }
        }
        Ok(g)
    }

    /// Pointwise sum of two fields on the same sectors.
    pub fn sum(&self, other: &Self) -> Result<Self> {
        if self.qm_dim != other.qm_dim {
            return Err(Error::DimensionMismatch {
                context: "matrix field sum",
                expected: self.qm_dim,
                actual: other.qm_dim,
            });
        }
        let cl_dim = match (self.cl_dim, other.cl_dim) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::DimensionMismatch {
                    context: "matrix field sum",
                    expected: a,
                    actual: b,
                })
            }
            (Some(a), _) => Some(a),
            (_, b) => b,
        };
        let (ma, mb) = (self.m.clone(), other.m.clone());
        let dx = Self::sum_derivs(&self.dx, &other.dx);
        let dp = Self::sum_derivs(&self.dp, &other.dp);
        Ok(Self {
            cl_dim,
            qm_dim: self.qm_dim,
            m: Arc::new(move |pt| ma(pt)?.add(&mb(pt)?)),
            dx,
            dp,
        })
    }

    fn sum_derivs(a: &MatrixDerivative, b: &MatrixDerivative) -> MatrixDerivative {
        match (a, b) {
            (MatrixDerivative::Zero, MatrixDerivative::Zero) => MatrixDerivative::Zero,
            (MatrixDerivative::Zero, other) | (other, MatrixDerivative::Zero) => other.clone(),
            (MatrixDerivative::Analytic(da), MatrixDerivative::Analytic(db)) => {
                let (da, db) = (da.clone(), db.clone());
                MatrixDerivative::Analytic(Arc::new(move |pt, k| da(pt, k)?.add(&db(pt, k)?)))
            }
            _ => MatrixDerivative::FiniteDifference,
        }
    }
}

/// General observable `s(x, p) + <psi|M(x, p)|psi>`.
///
/// A missing matrix part makes it live purely in the classical sector; a
/// missing scalar part with a constant matrix makes it purely quantum.
#[derive(Debug, Clone, Default)]
pub struct HybridObservable {
    scalar: Option<ClassicalObservable>,
    matrix: Option<MatrixField>,
}

impl HybridObservable {
    /// The identically-zero observable, valid on any sector dimensions.
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn classical(obs: ClassicalObservable) -> Self {
        Self {
            scalar: Some(obs),
            matrix: None,
        }
    }

    pub fn quantum(matrix: HermitianMatrix) -> Self {
        Self {
            scalar: None,
            matrix: Some(MatrixField::constant(matrix)),
        }
    }

    pub fn from_matrix_field(field: MatrixField) -> Self {
        Self {
            scalar: None,
            matrix: Some(field),
        }
    }

    pub fn new(scalar: Option<ClassicalObservable>, matrix: Option<MatrixField>) -> Result<Self> {
        if let (Some(s), Some(m)) = (&scalar, &matrix) {
            if let Some(mcl) = m.cl_dim() {
                if s.dim() != mcl {
                    return Err(Error::DimensionMismatch {
                        context: "hybrid observable sectors",
                        expected: s.dim(),
                        actual: mcl,
                    });
                }
            }
        }
        Ok(Self { scalar, matrix })
    }

    pub fn scalar_part(&self) -> Option<&ClassicalObservable> {
        self.scalar.as_ref()
    }

    pub fn matrix_part(&self) -> Option<&MatrixField> {
        self.matrix.as_ref()
    }

    pub fn qm_dim(&self) -> Option<usize> {
        self.matrix.as_ref().map(|m| m.qm_dim())
    }

    pub fn cl_dim(&self) -> Option<usize> {
        self.scalar
            .as_ref()
            .map(|s| s.dim())
            .or_else(|| self.matrix.as_ref().and_then(|m| m.cl_dim()))
    }

    /// `M(x, p)` when a matrix part is present.
    pub fn matrix_at(&self, pt: &ClassicalPoint) -> Result<Option<HermitianMatrix>> {
        self.matrix.as_ref().map(|m| m.evaluate(pt)).transpose()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let scalar = match (&self.scalar, &other.scalar) {
            (Some(a), Some(b)) => Some(a.sum(b)?),
            (Some(a), None) => Some(a.clone()),
            (None, b) => b.clone(),
        };
        let matrix = match (&self.matrix, &other.matrix) {
            (Some(a), Some(b)) => Some(a.sum(b)?),
            (Some(a), None) => Some(a.clone()),
            (None, b) => b.clone(),
        };
        Self::new(scalar, matrix)
    }

    fn check_point(&self, h: &HybridPoint) -> Result<()> {
        if let Some(n) = self.cl_dim() {
            if h.cl_dim() != n {
                return Err(Error::DimensionMismatch {
                    context: "hybrid observable classical sector",
                    expected: n,
                    actual: h.cl_dim(),
                });
            }
        }
        if let Some(n) = self.qm_dim() {
            if h.qm_dim() != n {
                return Err(Error::DimensionMismatch {
                    context: "hybrid observable quantum sector",
                    expected: n,
                    actual: h.qm_dim(),
                });
            }
        }
        Ok(())
    }
}

/// Gradient of a scalar on the full hybrid phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGradient {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub qx: DVector<f64>,
    pub qp: DVector<f64>,
}

/// Differentiable real scalar on the hybrid phase space; the bracket module
/// is written against this interface only.
pub trait PhaseFunction {
    fn value(&self, h: &HybridPoint) -> Result<f64>;
    fn gradient(&self, h: &HybridPoint) -> Result<PhaseGradient>;
}

impl PhaseFunction for HybridObservable {
    fn value(&self, h: &HybridPoint) -> Result<f64> {
        self.check_point(h)?;
        let mut v = 0.0;
        if let Some(s) = &self.scalar {
            v += s.value(h.classical())?;
        }
        if let Some(m) = &self.matrix {
            v += m.evaluate(h.classical())?.expectation(&decode_state(h.quantum()))?;
        }
        Ok(v)
    }

    fn gradient(&self, h: &HybridPoint) -> Result<PhaseGradient> {
        self.check_point(h)?;
        let n = h.cl_dim();
        let nq = h.qm_dim();
        let mut g = PhaseGradient {
            x: DVector::zeros(n),
            p: DVector::zeros(n),
            qx: DVector::zeros(nq),
            qp: DVector::zeros(nq),
        };
        if let Some(s) = &self.scalar {
            let (gx, gp) = s.gradient(h.classical())?;
            g.x += gx;
            g.p += gp;
        }
        if let Some(m) = &self.matrix {
            let c = decode_state(h.quantum());
            let (gx, gp) = m.expectation_gradient(h.classical(), &c)?;
            g.x += gx;
            g.p += gp;
            let y = m.evaluate(h.classical())?.apply(&c);
            let s = std::f64::consts::SQRT_2;
            for i in 0..nq {
                g.qx[i] = s * y[i].re;
                g.qp[i] = s * y[i].im;
            }
        }
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Almost-classical observables
// ---------------------------------------------------------------------------

/// One term `scale * coeff(x, p) * prod_(i,j) conj(z_i) z_j`.
///
/// User-built terms normally carry `scale = 1`; bracket closure introduces
/// factors of `+-i`. Constructors keep term lists conjugation-closed so the
/// total stays real.
#[derive(Clone)]
pub struct AcTerm {
    scale: Complex64,
    coeff: ClassicalObservable,
    pairs: Vec<(usize, usize)>,
}

impl std::fmt::Debug for AcTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AcTerm")
            .field("scale", &self.scale)
            .field("pairs", &self.pairs)
            .finish()
    }
}

impl AcTerm {
    pub fn new(coeff: ClassicalObservable, pairs: Vec<(usize, usize)>) -> Self {
        Self::scaled(Complex64::new(1.0, 0.0), coeff, pairs)
    }

    pub fn scaled(scale: Complex64, coeff: ClassicalObservable, pairs: Vec<(usize, usize)>) -> Self {
        Self {
            scale,
            coeff,
            pairs,
        }
    }

    pub fn scale(&self) -> Complex64 {
        self.scale
    }

    pub fn coeff(&self) -> &ClassicalObservable {
        &self.coeff
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    fn conjugate(&self) -> Self {
        Self {
            scale: self.scale.conj(),
            coeff: self.coeff.clone(),
            pairs: self.pairs.iter().map(|&(i, j)| (j, i)).collect(),
        }
    }

    pub(crate) fn sorted_pairs(&self) -> Vec<(usize, usize)> {
        let mut v = self.pairs.clone();
        v.sort_unstable();
        v
    }

    fn is_self_conjugate(&self) -> bool {
        self.scale.im == 0.0 && self.sorted_pairs() == self.conjugate().sorted_pairs()
    }
}

/// Sum of almost-classical terms: classical coefficients times products of
/// bilinears `conj(z_i) z_j`. Closed under the hybrid bracket, which is what
/// [`crate::brackets::bracket_closure`] exploits.
#[derive(Debug, Clone)]
pub struct AlmostClassicalObservable {
    cl_dim: usize,
    qm_dim: usize,
    terms: Vec<AcTerm>,
}

impl AlmostClassicalObservable {
    /// Validates indices/dimensions and canonicalizes the term list: any
    /// term without its conjugate partner is replaced by the symmetrization
    /// `(T + conj(T))/2`, which leaves already-real inputs unchanged in
    /// value and forces realness otherwise.
    pub fn new(cl_dim: usize, qm_dim: usize, terms: Vec<AcTerm>) -> Result<Self> {
        let mut canonical = Vec::with_capacity(terms.len());
        for t in terms {
            if t.coeff.dim() != cl_dim {
                return Err(Error::DimensionMismatch {
                    context: "almost-classical coefficient",
                    expected: cl_dim,
                    actual: t.coeff.dim(),
                });
            }
            for &(i, j) in &t.pairs {
                let bad = i.max(j);
                if bad >= qm_dim {
                    return Err(Error::IndexOutOfRange {
                        index: bad,
                        dim: qm_dim,
                    });
                }
            }
            if t.is_self_conjugate() {
                canonical.push(t);
            } else {
                let half = AcTerm {
                    scale: 0.5 * t.scale,
                    coeff: t.coeff.clone(),
                    pairs: t.pairs.clone(),
                };
                let partner = half.conjugate();
                canonical.push(half);
                canonical.push(partner);
            }
        }
        Ok(Self {
            cl_dim,
            qm_dim,
            terms: canonical,
        })
    }

    /// The constraint `C = sum_i conj(z_i) z_i` as an almost-classical
    /// observable.
    pub fn constraint(cl_dim: usize, qm_dim: usize) -> Self {
        let one = ClassicalObservable::constant(cl_dim, 1.0);
        let terms = (0..qm_dim)
            .map(|i| AcTerm::new(one.clone(), vec![(i, i)]))
            .collect();
        Self::new(cl_dim, qm_dim, terms).expect("constraint observable is valid")
    }

    pub fn cl_dim(&self) -> usize {
        self.cl_dim
    }

    pub fn qm_dim(&self) -> usize {
        self.qm_dim
    }

    pub fn terms(&self) -> &[AcTerm] {
        &self.terms
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn all_coefficients_analytic(&self) -> bool {
        self.terms.iter().all(|t| t.coeff.has_analytic_gradient())
    }

    fn check_point(&self, h: &HybridPoint) -> Result<()> {
        if h.cl_dim() != self.cl_dim {
            return Err(Error::DimensionMismatch {
                context: "almost-classical classical sector",
                expected: self.cl_dim,
                actual: h.cl_dim(),
            });
        }
        if h.qm_dim() != self.qm_dim {
            return Err(Error::DimensionMismatch {
                context: "almost-classical quantum sector",
                expected: self.qm_dim,
                actual: h.qm_dim(),
            });
        }
        Ok(())
    }

    fn complex_value(&self, h: &HybridPoint) -> Result<Complex64> {
        let c = decode_state(h.quantum());
        let mut total = Complex64::new(0.0, 0.0);
        for t in &self.terms {
            let mut v = t.scale * t.coeff.value(h.classical())?;
            for &(i, j) in &t.pairs {
                v *= c[i].conj() * c[j];
            }
            total += v;
        }
        Ok(total)
    }

    /// Evaluates the observable; the imaginary residual of the term sum is
    /// checked against [`AC_REALNESS_TOL`].
    pub fn evaluate(&self, h: &HybridPoint) -> Result<f64> {
        self.check_point(h)?;
        check_real(
            self.complex_value(h)?,
            AC_REALNESS_TOL,
            "almost-classical evaluation",
        )
    }
}

impl PhaseFunction for AlmostClassicalObservable {
    fn value(&self, h: &HybridPoint) -> Result<f64> {
        self.evaluate(h)
    }

    fn gradient(&self, h: &HybridPoint) -> Result<PhaseGradient> {
        self.check_point(h)?;
        let c = decode_state(h.quantum());
        let inv_sqrt2 = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let mi = Complex64::new(0.0, -1.0);
        let pi = Complex64::new(0.0, 1.0);

        let n = self.cl_dim;
        let nq = self.qm_dim;
        let mut gx = DVector::from_element(n, Complex64::new(0.0, 0.0));
        let mut gp = gx.clone();
        let mut gqx = DVector::from_element(nq, Complex64::new(0.0, 0.0));
        let mut gqp = gqx.clone();

        for t in &self.terms {
            let coeff_v = t.coeff.value(h.classical())?;
            let factors: Vec<Complex64> = t
                .pairs
                .iter()
                .map(|&(i, j)| c[i].conj() * c[j])
                .collect();
            let product: Complex64 = factors
                .iter()
                .fold(Complex64::new(1.0, 0.0), |acc, f| acc * f);

            // Classical gradient: scale * grad(coeff) * prod(factors).
            let (cgx, cgp) = t.coeff.gradient(h.classical())?;
            let w = t.scale * product;
            for k in 0..n {
                gx[k] += w * cgx[k];
                gp[k] += w * cgp[k];
            }

            // Quantum gradient: product rule over the pair factors.
            let base = t.scale * coeff_v;
            for (u, &(i, j)) in t.pairs.iter().enumerate() {
                let mut cof = base;
                for (v, f) in factors.iter().enumerate() {
                    if v != u {
                        cof *= f;
                    }
                }
                // d(conj(z_i) z_j)/dX_m = delta_mi z_j/sqrt2 + delta_mj conj(z_i)/sqrt2
                // d(conj(z_i) z_j)/dP_m = -i delta_mi z_j/sqrt2 + i delta_mj conj(z_i)/sqrt2
                let zi_bar = c[i].conj();
                let zj = c[j];
                gqx[i] += cof * zj * inv_sqrt2;
                gqx[j] += cof * zi_bar * inv_sqrt2;
                gqp[i] += cof * zj * inv_sqrt2 * mi;
                gqp[j] += cof * zi_bar * inv_sqrt2 * pi;
            }
        }

        Ok(PhaseGradient {
            x: gx.map(|v| v.re),
            p: gp.map(|v| v.re),
            qx: gqx.map(|v| v.re),
            qp: gqp.map(|v| v.re),
        })
    }
}

// ---------------------------------------------------------------------------
// Position/momentum operators in a truncated oscillator basis
// ---------------------------------------------------------------------------

/// Ladder-built `X` and `P` operators for a harmonic oscillator basis with
/// `hbar = 1`:
/// `X[i, i+1] = sqrt((i+1) / (2 m w))`, `P[i, i+1] = -i sqrt(m w (i+1) / 2)`.
///
/// Truncation caveat: `(1/i)[X, P]` equals the identity only on the leading
/// `(dim-1) x (dim-1)` block; the last diagonal entry is `-(dim-1)`.
pub fn position_momentum_matrices(basis: &BasisSet) -> Result<(HermitianMatrix, HermitianMatrix)> {
    match basis {
        BasisSet::AbstractOrthonormal { .. } => Err(Error::UnsupportedBasis),
        BasisSet::HarmonicOscillatorPosition {
            dim,
            mass,
            frequency,
        } => {
            if *dim < 2 {
                return Err(Error::InvalidInput(
                    "oscillator operators need dimension >= 2".into(),
                ));
            }
            let mw = mass * frequency;
            if !(mw.is_finite() && mw > 0.0) {
                return Err(Error::InvalidInput(
                    "oscillator basis needs positive mass * frequency".into(),
                ));
            }
            let mut x = DMatrix::zeros(*dim, *dim);
            let mut p = DMatrix::zeros(*dim, *dim);
            for i in 0..dim - 1 {
                let xe = ((i + 1) as f64 / (2.0 * mw)).sqrt();
                let pe = (mw * (i + 1) as f64 / 2.0).sqrt();
                x[(i, i + 1)] = Complex64::new(xe, 0.0);
                x[(i + 1, i)] = Complex64::new(xe, 0.0);
                p[(i, i + 1)] = Complex64::new(0.0, -pe);
                p[(i + 1, i)] = Complex64::new(0.0, pe);
            }
            Ok((HermitianMatrix::new(x)?, HermitianMatrix::new(p)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_space::{encode_state, QuantumPhasePoint};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn pauli_x() -> HermitianMatrix {
        HermitianMatrix::new(DMatrix::from_row_slice(
            2,
            2,
            &[c64(0.0, 0.0), c64(1.0, 0.0), c64(1.0, 0.0), c64(0.0, 0.0)],
        ))
        .unwrap()
    }

    fn plus_state() -> QuantumPhasePoint {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        encode_state(&[c64(s, 0.0), c64(s, 0.0)]).unwrap()
    }

    #[test]
    fn construction_rejects_non_hermitian_input() {
        let m = DMatrix::from_row_slice(
            2,
            2,
            &[c64(0.0, 0.0), c64(1.0, 0.0), c64(0.5, 0.0), c64(0.0, 0.0)],
        );
        assert!(matches!(
            HermitianMatrix::new(m),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn pauli_x_expectation_on_plus_state_is_one() {
        let g = QuadraticObservable::new(pauli_x());
        assert_relative_eq!(g.expectation(&plus_state()).unwrap(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn identity_expectation_equals_constraint_value() {
        let g = QuadraticObservable::new(HermitianMatrix::identity(3));
        let q = QuantumPhasePoint::from_slices(&[1.0, 0.4, 0.0], &[0.2, 0.0, -0.9]).unwrap();
        assert_relative_eq!(
            g.expectation(&q).unwrap(),
            q.constraint(),
            max_relative = 1e-14
        );
    }

    // Direct-summation oracle for the quadratic form, written against the
    // raw coordinates instead of matrix-vector products.
    fn quadratic_oracle(m: &HermitianMatrix, q: &QuantumPhasePoint) -> Complex64 {
        let n = m.dim();
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let zi = c64(q.x()[i], -q.p()[i]);
                let zj = c64(q.x()[j], q.p()[j]);
                acc += 0.5 * m.matrix()[(i, j)] * zi * zj;
            }
        }
        acc
    }

    proptest! {
        #[test]
        fn expectation_matches_direct_summation_oracle(
            entries in prop::collection::vec((-1.0_f64..1.0, -1.0_f64..1.0), 9..=9),
            xs in prop::collection::vec(-1.0_f64..1.0, 3..=3),
            ps in prop::collection::vec(-1.0_f64..1.0, 3..=3),
        ) {
            let raw = DMatrix::from_fn(3, 3, |i, j| c64(entries[3 * i + j].0, entries[3 * i + j].1));
            let herm = HermitianMatrix::new(&raw + raw.adjoint()).unwrap();
            let q = QuantumPhasePoint::from_slices(&xs, &ps).unwrap();
            let oracle = quadratic_oracle(&herm, &q);
            let got = QuadraticObservable::new(herm).expectation(&q).unwrap();
            prop_assert!((got - oracle.re).abs() <= 1e-12 * oracle.re.abs().max(1.0));
            prop_assert!(oracle.im.abs() <= 1e-12);
        }

        #[test]
        fn quadratic_gradient_matches_finite_differences(
            entries in prop::collection::vec((-1.0_f64..1.0, -1.0_f64..1.0), 4..=4),
            xs in prop::collection::vec(-1.0_f64..1.0, 2..=2),
            ps in prop::collection::vec(-1.0_f64..1.0, 2..=2),
        ) {
            let raw = DMatrix::from_fn(2, 2, |i, j| c64(entries[2 * i + j].0, entries[2 * i + j].1));
            let herm = HermitianMatrix::new(&raw + raw.adjoint()).unwrap();
            let g = QuadraticObservable::new(herm);
            let q = QuantumPhasePoint::from_slices(&xs, &ps).unwrap();
            let (gx, gp) = g.gradient(&q).unwrap();
            for k in 0..2 {
                let h = fd_step(q.x()[k]);
                let mut xp = xs.clone();
                xp[k] += h;
                let mut xm = xs.clone();
                xm[k] -= h;
                let fp = g.expectation(&QuantumPhasePoint::from_slices(&xp, &ps).unwrap()).unwrap();
                let fm = g.expectation(&QuantumPhasePoint::from_slices(&xm, &ps).unwrap()).unwrap();
                prop_assert!((gx[k] - (fp - fm) / (2.0 * h)).abs() <= 1e-6);

                let h = fd_step(q.p()[k]);
                let mut pp = ps.clone();
                pp[k] += h;
                let mut pm = ps.clone();
                pm[k] -= h;
                let fp = g.expectation(&QuantumPhasePoint::from_slices(&xs, &pp).unwrap()).unwrap();
                let fm = g.expectation(&QuantumPhasePoint::from_slices(&xs, &pm).unwrap()).unwrap();
                prop_assert!((gp[k] - (fp - fm) / (2.0 * h)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn classical_fd_gradient_matches_analytic_polynomial() {
        let dim = 2;
        let poly = ClassicalObservable::polynomial(
            dim,
            vec![
                PolyTerm {
                    coefficient: 0.7,
                    x_powers: vec![2, 0],
                    p_powers: vec![0, 1],
                },
                PolyTerm {
                    coefficient: -1.3,
                    x_powers: vec![0, 1],
                    p_powers: vec![1, 0],
                },
            ],
        )
        .unwrap();
        let opaque = ClassicalObservable::new(dim, |pt| {
            0.7 * pt.x()[0] * pt.x()[0] * pt.p()[1] - 1.3 * pt.x()[1] * pt.p()[0]
        });
        let pt = ClassicalPoint::from_slices(&[0.3, -1.2], &[2.0, 0.5]).unwrap();
        let (ax, ap) = poly.gradient(&pt).unwrap();
        let (fx, fp) = opaque.gradient(&pt).unwrap();
        for k in 0..dim {
            assert_relative_eq!(ax[k], fx[k], epsilon = 1e-7, max_relative = 1e-6);
            assert_relative_eq!(ap[k], fp[k], epsilon = 1e-7, max_relative = 1e-6);
        }
    }

    #[test]
    fn polynomial_structure_survives_products_and_sums() {
        let x0 = ClassicalObservable::coordinate(2, 0).unwrap();
        let p1 = ClassicalObservable::momentum(2, 1).unwrap();
        let combo = x0.sum(&p1.scaled(2.0)).unwrap().product(&x0).unwrap();
        assert!(combo.has_analytic_gradient());
        assert!(combo.poly().is_some());
        let pt = ClassicalPoint::from_slices(&[1.5, -0.4], &[0.3, 2.0]).unwrap();
        // (x0 + 2 p1) x0 = x0^2 + 2 x0 p1
        assert_relative_eq!(
            combo.value(&pt).unwrap(),
            1.5 * 1.5 + 2.0 * 1.5 * 2.0,
            max_relative = 1e-14
        );
        // Folding a product with a constant keeps the partner's function.
        let one = ClassicalObservable::constant(2, 1.0);
        let folded = one.product(&x0).unwrap();
        assert_eq!(folded.fn_ptr(), x0.fn_ptr());
    }

    #[test]
    fn monomial_poisson_bracket_of_squares() {
        // {x^2, p^2} = 4 x p in one degree of freedom.
        let a = vec![PolyTerm {
            coefficient: 1.0,
            x_powers: vec![2],
            p_powers: vec![0],
        }];
        let b = vec![PolyTerm {
            coefficient: 1.0,
            x_powers: vec![0],
            p_powers: vec![2],
        }];
        let bracket = poly_poisson(&a, &b, 1);
        assert_eq!(bracket.len(), 1);
        assert_abs_diff_eq!(bracket[0].coefficient, 4.0);
        assert_eq!(bracket[0].x_powers, vec![1]);
        assert_eq!(bracket[0].p_powers, vec![1]);
    }

    #[test]
    fn hybrid_identity_matrix_times_scalar_reproduces_the_scalar() {
        let field = MatrixField::new(
            1,
            2,
            |pt| Ok(HermitianMatrix::identity(2).scaled(pt.x()[0])),
            MatrixDerivative::FiniteDifference,
            MatrixDerivative::Zero,
        );
        let obs = HybridObservable::from_matrix_field(field);
        let h = HybridPoint::new(
            ClassicalPoint::from_slices(&[3.0], &[0.0]).unwrap(),
            plus_state(),
        );
        assert_relative_eq!(obs.value(&h).unwrap(), 3.0, max_relative = 1e-14);
    }

    #[test]
    fn coupled_matrix_expectation_matches_direct_oracle() {
        // M(x) = x * sigma_x on the plus state at x = 2.
        let field = MatrixField::new(
            1,
            2,
            |pt| Ok(pauli_x().scaled(pt.x()[0])),
            MatrixDerivative::Analytic(Arc::new(|_, _| Ok(pauli_x()))),
            MatrixDerivative::Zero,
        );
        let obs = HybridObservable::from_matrix_field(field);
        let q = plus_state();
        let h = HybridPoint::new(
            ClassicalPoint::from_slices(&[2.0], &[0.5]).unwrap(),
            q.clone(),
        );
        let oracle = quadratic_oracle(&pauli_x().scaled(2.0), &q);
        let got = obs.value(&h).unwrap();
        assert_relative_eq!(got, oracle.re, max_relative = 1e-14);
        assert_relative_eq!(got, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn almost_classical_single_pair_is_level_population() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let q = encode_state(&[c64(s, 0.0), c64(0.0, s)]).unwrap();
        let h = HybridPoint::new(ClassicalPoint::from_slices(&[0.0], &[0.0]).unwrap(), q);
        let one = ClassicalObservable::constant(1, 1.0);
        let obs =
            AlmostClassicalObservable::new(1, 2, vec![AcTerm::new(one.clone(), vec![(0, 0)])])
                .unwrap();
        assert_relative_eq!(obs.evaluate(&h).unwrap(), 0.5, max_relative = 1e-14);

        let obs2 = AlmostClassicalObservable::new(
            1,
            2,
            vec![AcTerm::new(one, vec![(0, 0), (1, 1)])],
        )
        .unwrap();
        assert_relative_eq!(obs2.evaluate(&h).unwrap(), 0.25, max_relative = 1e-14);
    }

    #[test]
    fn lone_cross_term_is_symmetrized_to_a_real_observable() {
        let one = ClassicalObservable::constant(0, 1.0);
        let obs = AlmostClassicalObservable::new(0, 2, vec![AcTerm::new(one, vec![(0, 1)])])
            .unwrap();
        assert_eq!(obs.term_count(), 2);
        let q = encode_state(&[c64(0.6, 0.0), c64(0.0, 0.8)]).unwrap();
        let h = HybridPoint::new(ClassicalPoint::from_slices(&[], &[]).unwrap(), q.clone());
        // (conj(z_0) z_1 + conj(z_1) z_0) / 2 = Re(conj(z_0) z_1).
        let z0 = c64(0.6, 0.0);
        let z1 = c64(0.0, 0.8);
        let expected = (z0.conj() * z1).re;
        assert_relative_eq!(obs.evaluate(&h).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn quadratic_and_almost_classical_agree() {
        let m = HermitianMatrix::new(DMatrix::from_row_slice(
            2,
            2,
            &[c64(0.3, 0.0), c64(0.1, -0.4), c64(0.1, 0.4), c64(-0.7, 0.0)],
        ))
        .unwrap();
        let quad = QuadraticObservable::new(m);
        let ac = quad.to_almost_classical(1);
        let q = QuantumPhasePoint::from_slices(&[0.9, -0.3], &[0.2, 1.0]).unwrap();
        let h = HybridPoint::new(ClassicalPoint::from_slices(&[0.0], &[0.0]).unwrap(), q.clone());
        assert_relative_eq!(
            quad.expectation(&q).unwrap(),
            ac.evaluate(&h).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn almost_classical_gradient_matches_finite_differences() {
        let coeff = ClassicalObservable::polynomial(
            1,
            vec![PolyTerm {
                coefficient: 0.8,
                x_powers: vec![1],
                p_powers: vec![1],
            }],
        )
        .unwrap();
        let obs = AlmostClassicalObservable::new(
            1,
            3,
            vec![AcTerm::new(coeff, vec![(0, 1), (1, 2)])],
        )
        .unwrap();
        let q = QuantumPhasePoint::from_slices(&[0.7, -0.2, 0.4], &[0.1, 0.9, -0.5]).unwrap();
        let h = HybridPoint::new(
            ClassicalPoint::from_slices(&[0.6], &[-1.1]).unwrap(),
            q.clone(),
        );
        let g = obs.gradient(&h).unwrap();

        let eval = |x: f64, p: f64, qx: &[f64], qp: &[f64]| {
            let hh = HybridPoint::new(
                ClassicalPoint::from_slices(&[x], &[p]).unwrap(),
                QuantumPhasePoint::from_slices(qx, qp).unwrap(),
            );
            obs.evaluate(&hh).unwrap()
        };
        let (x0, p0) = (0.6, -1.1);
        let qx: Vec<f64> = q.x().iter().copied().collect();
        let qp: Vec<f64> = q.p().iter().copied().collect();

        let hstep = fd_step(x0);
        let fd = (eval(x0 + hstep, p0, &qx, &qp) - eval(x0 - hstep, p0, &qx, &qp)) / (2.0 * hstep);
        assert_relative_eq!(g.x[0], fd, epsilon = 1e-6);

        for m in 0..3 {
            let hstep = fd_step(qx[m]);
            let mut plus = qx.clone();
            plus[m] += hstep;
            let mut minus = qx.clone();
            minus[m] -= hstep;
            let fd = (eval(x0, p0, &plus, &qp) - eval(x0, p0, &minus, &qp)) / (2.0 * hstep);
            assert_relative_eq!(g.qx[m], fd, epsilon = 1e-6);

            let hstep = fd_step(qp[m]);
            let mut plus = qp.clone();
            plus[m] += hstep;
            let mut minus = qp.clone();
            minus[m] -= hstep;
            let fd = (eval(x0, p0, &qx, &plus) - eval(x0, p0, &qx, &minus)) / (2.0 * hstep);
            assert_relative_eq!(g.qp[m], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn oscillator_matrices_match_ladder_values() {
        let basis = BasisSet::harmonic(2, 1.0, 1.0);
        let (x, p) = position_momentum_matrices(&basis).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(x.matrix()[(0, 1)].re, s, max_relative = 1e-15);
        assert_relative_eq!(x.matrix()[(1, 0)].re, s, max_relative = 1e-15);
        assert_abs_diff_eq!(x.matrix()[(0, 0)].re, 0.0);
        assert_relative_eq!(p.matrix()[(0, 1)].im, -s, max_relative = 1e-15);
        assert_relative_eq!(p.matrix()[(1, 0)].im, s, max_relative = 1e-15);
    }

    #[test]
    fn ground_state_oscillator_energy_is_half() {
        // <0| (X^2 + P^2)/2 |0> = 1/2 for unit mass and frequency.
        let basis = BasisSet::harmonic(4, 1.0, 1.0);
        let (x, p) = position_momentum_matrices(&basis).unwrap();
        let x2 = x.matrix() * x.matrix();
        let p2 = p.matrix() * p.matrix();
        let energy = HermitianMatrix::new((x2 + p2) * c64(0.5, 0.0)).unwrap();
        let ground =
            encode_state(&[c64(1.0, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(0.0, 0.0)]).unwrap();
        assert_relative_eq!(
            QuadraticObservable::new(energy).expectation(&ground).unwrap(),
            0.5,
            max_relative = 1e-14
        );
        let mean_x = QuadraticObservable::new(x).expectation(&ground).unwrap();
        assert_abs_diff_eq!(mean_x, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn abstract_basis_has_no_position_operator() {
        let err = position_momentum_matrices(&BasisSet::abstract_orthonormal(4)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedBasis));
    }

    #[test]
    fn matrix_json_round_trips_rows_of_re_im_pairs() {
        let m = pauli_x();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.starts_with("[["), "{text}");
        let back: HermitianMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}

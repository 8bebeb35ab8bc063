//! Bracket algebra on the hybrid phase space.
//!
//! The hybrid bracket of two phase functions is the sum of two canonical
//! Poisson brackets, one over the classical pairs `(x_k, p_k)` and one over
//! the quantum pairs `(X_i, P_i)`. On quadratic observables the quantum part
//! reproduces commutator expectations, which [`commutator_residual`] checks
//! through two independent code paths. [`bracket_closure`] evaluates the
//! bracket of two almost-classical observables symbolically, staying inside
//! that class.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec;
use crate::observables::{
    fd_step, poly_poisson, AcTerm, AlmostClassicalObservable, ClassicalObservable,
    HermitianMatrix, PhaseFunction, PhaseGradient, QuadraticObservable,
};
use crate::phase_space::{encode_state, ClassicalPoint, HybridPoint, QuantumPhasePoint};

/// Hybrid bracket value split into its two sector contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BracketResult {
    pub value: f64,
    pub classical_part: f64,
    pub quantum_part: f64,
}

/// `sum_i (dA/dx_i dB/dp_i - dA/dp_i dB/dx_i) + (same over X, P)`.
pub fn symplectic_pairing(ga: &PhaseGradient, gb: &PhaseGradient) -> BracketResult {
    let classical_part = ga.x.dot(&gb.p) - ga.p.dot(&gb.x);
    let quantum_part = ga.qx.dot(&gb.qp) - ga.qp.dot(&gb.qx);
    BracketResult {
        value: classical_part + quantum_part,
        classical_part,
        quantum_part,
    }
}

/// Canonical bracket of two classical observables at a point.
pub fn classical_bracket(
    f: &ClassicalObservable,
    g: &ClassicalObservable,
    pt: &ClassicalPoint,
) -> Result<f64> {
    let (fx, fp) = f.gradient(pt)?;
    let (gx, gp) = g.gradient(pt)?;
    Ok(fx.dot(&gp) - fp.dot(&gx))
}

/// Canonical bracket of two quadratic observables over `(X, P)`.
///
/// Computed from the gradients, not from matrix products; the commutator
/// route lives in [`commutator_expectation`].
pub fn quantum_bracket(
    f: &QuadraticObservable,
    g: &QuadraticObservable,
    q: &QuantumPhasePoint,
) -> Result<f64> {
    let (fx, fp) = f.gradient(q)?;
    let (gx, gp) = g.gradient(q)?;
    Ok(fx.dot(&gp) - fp.dot(&gx))
}

/// Expectation of `(1/i)[F, G]`, built from the explicit matrix commutator.
pub fn commutator_expectation(
    f: &QuadraticObservable,
    g: &QuadraticObservable,
    q: &QuantumPhasePoint,
) -> Result<f64> {
    if f.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            context: "commutator",
            expected: f.dim(),
            actual: g.dim(),
        });
    }
    let fm = f.matrix().matrix();
    let gm = g.matrix().matrix();
    let k = (fm * gm - gm * fm) * Complex64::new(0.0, -1.0);
    QuadraticObservable::new(HermitianMatrix::new(k)?).expectation(q)
}

/// `|{F, G}_(X,P) - <(1/i)[F, G]>|` at a state.
pub fn commutator_residual(
    f: &QuadraticObservable,
    g: &QuadraticObservable,
    q: &QuantumPhasePoint,
) -> Result<f64> {
    Ok((quantum_bracket(f, g, q)? - commutator_expectation(f, g, q)?).abs())
}

/// Hybrid bracket of two phase functions through their gradients.
pub fn hybrid_bracket<A, B>(a: &A, b: &B, h: &HybridPoint) -> Result<BracketResult>
where
    A: PhaseFunction + ?Sized,
    B: PhaseFunction + ?Sized,
{
    let ga = a.gradient(h)?;
    let gb = b.gradient(h)?;
    Ok(symplectic_pairing(&ga, &gb))
}

/// Gradient from central differences of `value` alone. Oracle path for
/// validating analytic gradients; never used by the integrators.
pub fn finite_difference_gradient<F>(f: &F, h: &HybridPoint) -> Result<PhaseGradient>
where
    F: PhaseFunction + ?Sized,
{
    let x0 = h.classical().x().clone();
    let p0 = h.classical().p().clone();
    let qx0 = h.quantum().x().clone();
    let qp0 = h.quantum().p().clone();

    let eval = |x: &DVector<f64>,
                p: &DVector<f64>,
                qx: &DVector<f64>,
                qp: &DVector<f64>|
     -> Result<f64> {
        let pt = HybridPoint::new(
            ClassicalPoint::new(x.clone(), p.clone())?,
            QuantumPhasePoint::raw(qx.clone(), qp.clone())?,
        );
        f.value(&pt)
    };

    let mut gx = DVector::zeros(x0.len());
    let mut gp = DVector::zeros(p0.len());
    let mut gqx = DVector::zeros(qx0.len());
    let mut gqp = DVector::zeros(qp0.len());

    for k in 0..x0.len() {
        let step = fd_step(x0[k]);
        let mut v = x0.clone();
        v[k] = x0[k] + step;
        let fp = eval(&v, &p0, &qx0, &qp0)?;
        v[k] = x0[k] - step;
        let fm = eval(&v, &p0, &qx0, &qp0)?;
        gx[k] = (fp - fm) / (2.0 * step);
    }
    for k in 0..p0.len() {
        let step = fd_step(p0[k]);
        let mut v = p0.clone();
        v[k] = p0[k] + step;
        let fp = eval(&x0, &v, &qx0, &qp0)?;
        v[k] = p0[k] - step;
        let fm = eval(&x0, &v, &qx0, &qp0)?;
        gp[k] = (fp - fm) / (2.0 * step);
    }
    for k in 0..qx0.len() {
        let step = fd_step(qx0[k]);
        let mut v = qx0.clone();
        v[k] = qx0[k] + step;
        let fp = eval(&x0, &p0, &v, &qp0)?;
        v[k] = qx0[k] - step;
        let fm = eval(&x0, &p0, &v, &qp0)?;
        gqx[k] = (fp - fm) / (2.0 * step);
    }
    for k in 0..qp0.len() {
        let step = fd_step(qp0[k]);
        let mut v = qp0.clone();
        v[k] = qp0[k] + step;
        let fp = eval(&x0, &p0, &qx0, &v)?;
        v[k] = qp0[k] - step;
        let fm = eval(&x0, &p0, &qx0, &v)?;
        gqp[k] = (fp - fm) / (2.0 * step);
    }

    Ok(PhaseGradient {
        x: gx,
        p: gp,
        qx: gqx,
        qp: gqp,
    })
}

/// Hybrid bracket evaluated purely from function values. Oracle path.
pub fn finite_difference_bracket<A, B>(a: &A, b: &B, h: &HybridPoint) -> Result<BracketResult>
where
    A: PhaseFunction + ?Sized,
    B: PhaseFunction + ?Sized,
{
    let ga = finite_difference_gradient(a, h)?;
    let gb = finite_difference_gradient(b, h)?;
    Ok(symplectic_pairing(&ga, &gb))
}

// ---------------------------------------------------------------------------
// Symbolic closure
// ---------------------------------------------------------------------------

/// Poisson bracket of two coefficient functions, `None` when it vanishes
/// identically. Symbolic for monomial expansions; otherwise the returned
/// observable evaluates through the factors' gradients and differentiates
/// by central differences.
fn poisson_coefficient(
    f: &ClassicalObservable,
    g: &ClassicalObservable,
    dim: usize,
) -> Result<Option<ClassicalObservable>> {
    if dim == 0 || f.constant_value().is_some() || g.constant_value().is_some() {
        return Ok(None);
    }
    if let (Some(a), Some(b)) = (f.poly(), g.poly()) {
        let terms = poly_poisson(a, b, dim);
        if terms.is_empty() {
            return Ok(None);
        }
        return Ok(Some(ClassicalObservable::polynomial(dim, terms)?));
    }
    let (f, g) = (f.clone(), g.clone());
    Ok(Some(ClassicalObservable::new(dim, move |pt| {
        let (fx, fp) = f.gradient(pt).expect("factor dimensions fixed at construction");
        let (gx, gp) = g.gradient(pt).expect("factor dimensions fixed at construction");
        fx.dot(&gp) - fp.dot(&gx)
    })))
}

/// Bracket of two almost-classical observables as an almost-classical
/// observable.
///
/// Classical sector: the bracket hits only the coefficients, so each term
/// pair contributes its coefficient bracket times the concatenated pair
/// factors. Quantum sector: each bilinear contraction
/// `{conj(z_i) z_j, conj(z_k) z_l} = i (delta_il conj(z_k) z_j - delta_jk conj(z_i) z_l)`
/// replaces one factor from each side. Like terms are merged by coefficient
/// identity and sorted pair list, so structure-constant cancellations (the
/// constraint bracketing to zero, for instance) happen exactly.
pub fn bracket_closure(
    a: &AlmostClassicalObservable,
    b: &AlmostClassicalObservable,
) -> Result<AlmostClassicalObservable> {
    if a.cl_dim() != b.cl_dim() {
        return Err(Error::DimensionMismatch {
            context: "closure classical sector",
            expected: a.cl_dim(),
            actual: b.cl_dim(),
        });
    }
    if a.qm_dim() != b.qm_dim() {
        return Err(Error::DimensionMismatch {
            context: "closure quantum sector",
            expected: a.qm_dim(),
            actual: b.qm_dim(),
        });
    }
    let cl_dim = a.cl_dim();
    let qm_dim = a.qm_dim();
    let plus_i = Complex64::new(0.0, 1.0);

    let mut raw: Vec<AcTerm> = Vec::new();
    for s in a.terms() {
        for t in b.terms() {
            let scale = s.scale() * t.scale();
            if scale == Complex64::new(0.0, 0.0) {
                continue;
            }

            if let Some(coeff) = poisson_coefficient(s.coeff(), t.coeff(), cl_dim)? {
                let mut pairs = s.pairs().to_vec();
                pairs.extend_from_slice(t.pairs());
                raw.push(AcTerm::scaled(scale, coeff, pairs));
            }

            if s.pairs().is_empty() || t.pairs().is_empty() {
                continue;
            }
            // Shared per term pair so merged keys coincide.
            let coeff_product = s.coeff().product(t.coeff())?;
            for (u, &(i, j)) in s.pairs().iter().enumerate() {
                for (v, &(k, l)) in t.pairs().iter().enumerate() {
                    if i != l && j != k {
                        continue;
                    }
                    let mut rest = Vec::with_capacity(s.pairs().len() + t.pairs().len() - 1);
                    rest.extend(s.pairs().iter().enumerate().filter(|&(m, _)| m != u).map(|(_, &p)| p));
                    rest.extend(t.pairs().iter().enumerate().filter(|&(m, _)| m != v).map(|(_, &p)| p));
                    if i == l {
                        let mut pairs = rest.clone();
                        pairs.push((k, j));
                        raw.push(AcTerm::scaled(scale * plus_i, coeff_product.clone(), pairs));
                    }
                    if j == k {
                        let mut pairs = rest;
                        pairs.push((i, l));
                        raw.push(AcTerm::scaled(scale * (-plus_i), coeff_product.clone(), pairs));
                    }
                }
            }
        }
    }

    let mut merged: BTreeMap<(usize, Vec<(usize, usize)>), AcTerm> = BTreeMap::new();
    for term in raw {
        let key = (term.coeff().fn_ptr(), term.sorted_pairs());
        match merged.entry(key) {
            std::collections::btree_map::Entry::Vacant(e) => {
                let pairs = term.sorted_pairs();
                let scale = term.scale();
                e.insert(AcTerm::scaled(scale, term.coeff().clone(), pairs));
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let combined = e.get().scale() + term.scale();
                let updated =
                    AcTerm::scaled(combined, e.get().coeff().clone(), e.get().pairs().to_vec());
                *e.get_mut() = updated;
            }
        }
    }

    let terms: Vec<AcTerm> = merged
        .into_values()
        .filter(|t| t.scale() != Complex64::new(0.0, 0.0))
        .collect();
    AlmostClassicalObservable::new(cl_dim, qm_dim, terms)
}

// ---------------------------------------------------------------------------
// Randomized commutator sweeps
// ---------------------------------------------------------------------------

/// Dense Hermitian matrix with Gaussian entries, `H = (A + A^H)/2`.
pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<HermitianMatrix> {
    if dim == 0 {
        return Err(Error::InvalidInput("matrix dimension must be positive".into()));
    }
    let a = DMatrix::from_fn(dim, dim, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    HermitianMatrix::new((&a + a.adjoint()) * Complex64::new(0.5, 0.0))
}

/// Haar-uniform normalized state encoded on the constraint sphere.
pub fn random_unit_state<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<QuantumPhasePoint> {
    if dim == 0 {
        return Err(Error::InvalidInput("state dimension must be positive".into()));
    }
    loop {
        let v = DVector::from_fn(dim, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let norm = v.norm();
        if norm > 1e-8 {
            return encode_state((v / Complex64::new(norm, 0.0)).as_slice());
        }
    }
}

/// Outcome of a randomized bracket-versus-commutator sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepReport {
    pub pairs: usize,
    pub dim: usize,
    pub max_residual: f64,
    /// Index of the pair attaining `max_residual`.
    pub worst_pair: usize,
}

type SweepCase = (QuadraticObservable, QuadraticObservable, QuantumPhasePoint);

fn sweep_cases(pairs: usize, dim: usize, seed: u64) -> Result<Vec<SweepCase>> {
    if pairs == 0 {
        return Err(Error::InvalidInput("sweep needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pairs)
        .map(|_| {
            let f = QuadraticObservable::new(random_hermitian(dim, &mut rng)?);
            let g = QuadraticObservable::new(random_hermitian(dim, &mut rng)?);
            let q = random_unit_state(dim, &mut rng)?;
            Ok((f, g, q))
        })
        .collect()
}

fn sweep_reduce(pairs: usize, dim: usize, residuals: Vec<Result<f64>>) -> Result<SweepReport> {
    let mut max_residual = f64::NEG_INFINITY;
    let mut worst_pair = 0;
    for (idx, r) in residuals.into_iter().enumerate() {
        let r = r?;
        if r > max_residual {
            max_residual = r;
            worst_pair = idx;
        }
    }
    Ok(SweepReport {
        pairs,
        dim,
        max_residual,
        worst_pair,
    })
}

/// Residual sweep over seeded random Hermitian pairs and states. Runs the
/// cases through the crate's data-parallel map; identical inputs and a
/// deterministic reduction make the result independent of thread count.
pub fn commutator_sweep(pairs: usize, dim: usize, seed: u64) -> Result<SweepReport> {
    let cases = sweep_cases(pairs, dim, seed)?;
    let residuals = exec::map_ordered(&cases, |(f, g, q)| commutator_residual(f, g, q));
    sweep_reduce(pairs, dim, residuals)
}

/// [`commutator_sweep`] forced onto the sequential path; the two must agree
/// bitwise.
pub fn commutator_sweep_seq(pairs: usize, dim: usize, seed: u64) -> Result<SweepReport> {
    let cases = sweep_cases(pairs, dim, seed)?;
    let residuals = exec::map_ordered_seq(&cases, |(f, g, q)| commutator_residual(f, g, q));
    sweep_reduce(pairs, dim, residuals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::{HybridObservable, PolyTerm};
    use crate::phase_space::decode_state;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn pair_value(q: &QuantumPhasePoint, i: usize, j: usize) -> Complex64 {
        let c = decode_state(q);
        c[i].conj() * c[j]
    }

    /// Complex-bilinear canonical bracket over (X, P) by central differences.
    fn fd_quantum_bracket_complex(
        fa: &dyn Fn(&QuantumPhasePoint) -> Complex64,
        fb: &dyn Fn(&QuantumPhasePoint) -> Complex64,
        q: &QuantumPhasePoint,
    ) -> Complex64 {
        let dim = q.dim();
        let grad = |f: &dyn Fn(&QuantumPhasePoint) -> Complex64| {
            let mut dx = vec![c64(0.0, 0.0); dim];
            let mut dp = vec![c64(0.0, 0.0); dim];
            for k in 0..dim {
                let h = fd_step(q.x()[k]);
                let mut xs = q.x().clone();
                xs[k] = q.x()[k] + h;
                let fp = f(&QuantumPhasePoint::raw(xs.clone(), q.p().clone()).unwrap());
                xs[k] = q.x()[k] - h;
                let fm = f(&QuantumPhasePoint::raw(xs, q.p().clone()).unwrap());
                dx[k] = (fp - fm) / c64(2.0 * h, 0.0);

                let h = fd_step(q.p()[k]);
                let mut ps = q.p().clone();
                ps[k] = q.p()[k] + h;
                let fp = f(&QuantumPhasePoint::raw(q.x().clone(), ps.clone()).unwrap());
                ps[k] = q.p()[k] - h;
                let fm = f(&QuantumPhasePoint::raw(q.x().clone(), ps).unwrap());
                dp[k] = (fp - fm) / c64(2.0 * h, 0.0);
            }
            (dx, dp)
        };
        let (ax, ap) = grad(fa);
        let (bx, bp) = grad(fb);
        let mut out = c64(0.0, 0.0);
        for k in 0..dim {
            out += ax[k] * bp[k] - ap[k] * bx[k];
        }
        out
    }

    #[test]
    fn pair_contraction_identity_matches_finite_differences() {
        // {conj(z_i) z_j, conj(z_k) z_l} = i (delta_il conj(z_k) z_j - delta_jk conj(z_i) z_l),
        // verified numerically over every index combination before the
        // closure construction is allowed to rely on it.
        let dim = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(0x9d02);
        for _ in 0..3 {
            let q = random_unit_state(dim, &mut rng).unwrap();
            for i in 0..dim {
                for j in 0..dim {
                    for k in 0..dim {
                        for l in 0..dim {
                            let fa = move |s: &QuantumPhasePoint| pair_value(s, i, j);
                            let fb = move |s: &QuantumPhasePoint| pair_value(s, k, l);
                            let numeric = fd_quantum_bracket_complex(&fa, &fb, &q);
                            let mut expected = c64(0.0, 0.0);
                            if i == l {
                                expected += c64(0.0, 1.0) * pair_value(&q, k, j);
                            }
                            if j == k {
                                expected -= c64(0.0, 1.0) * pair_value(&q, i, l);
                            }
                            assert_abs_diff_eq!((numeric - expected).norm(), 0.0, epsilon = 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn classical_bracket_of_squares_matches_hand_value() {
        // {x^2, p^2} = 4 x p, so 8 at (x, p) = (1, 2).
        let x2 = ClassicalObservable::polynomial(
            1,
            vec![PolyTerm {
                coefficient: 1.0,
                x_powers: vec![2],
                p_powers: vec![0],
            }],
        )
        .unwrap();
        let p2 = ClassicalObservable::polynomial(
            1,
            vec![PolyTerm {
                coefficient: 1.0,
                x_powers: vec![0],
                p_powers: vec![2],
            }],
        )
        .unwrap();
        let pt = ClassicalPoint::from_slices(&[1.0], &[2.0]).unwrap();
        assert_relative_eq!(
            classical_bracket(&x2, &p2, &pt).unwrap(),
            8.0,
            max_relative = 1e-14
        );

        // Same value through opaque closures and finite differences.
        let fx2 = ClassicalObservable::new(1, |pt| pt.x()[0] * pt.x()[0]);
        let fp2 = ClassicalObservable::new(1, |pt| pt.p()[0] * pt.p()[0]);
        assert_relative_eq!(
            classical_bracket(&fx2, &fp2, &pt).unwrap(),
            8.0,
            max_relative = 1e-6
        );
    }

    #[test]
    fn quantum_bracket_matches_commutator_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let f = QuadraticObservable::new(random_hermitian(5, &mut rng).unwrap());
            let g = QuadraticObservable::new(random_hermitian(5, &mut rng).unwrap());
            let q = random_unit_state(5, &mut rng).unwrap();
            assert!(commutator_residual(&f, &g, &q).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn commutator_sweep_parallel_and_sequential_agree_bitwise() {
        let a = commutator_sweep(16, 4, 7).unwrap();
        let b = commutator_sweep_seq(16, 4, 7).unwrap();
        assert_eq!(a.max_residual.to_bits(), b.max_residual.to_bits());
        assert_eq!(a.worst_pair, b.worst_pair);
        assert!(a.max_residual <= 1e-10);
    }

    #[test]
    fn cross_sector_brackets_vanish_identically() {
        let scalar = HybridObservable::classical(
            ClassicalObservable::polynomial(
                2,
                vec![PolyTerm {
                    coefficient: 0.8,
                    x_powers: vec![1, 0],
                    p_powers: vec![0, 2],
                }],
            )
            .unwrap(),
        );
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = c64(0.3, -0.7);
        m[(1, 0)] = c64(0.3, 0.7);
        let matrix = HybridObservable::quantum(HermitianMatrix::new(m).unwrap());
        let h = HybridPoint::new(
            ClassicalPoint::from_slices(&[0.4, -1.1], &[0.9, 0.2]).unwrap(),
            QuantumPhasePoint::from_slices(&[1.0, 0.3], &[-0.2, 0.8]).unwrap(),
        );
        let r = hybrid_bracket(&scalar, &matrix, &h).unwrap();
        assert_eq!(r.classical_part, 0.0);
        assert_eq!(r.quantum_part, 0.0);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn constraint_commutes_with_every_quadratic_observable() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dim = 4;
        let constraint = QuadraticObservable::new(HermitianMatrix::identity(dim));
        for _ in 0..10 {
            let g = QuadraticObservable::new(random_hermitian(dim, &mut rng).unwrap());
            let q = random_unit_state(dim, &mut rng).unwrap();
            assert_abs_diff_eq!(quantum_bracket(&constraint, &g, &q).unwrap(), 0.0, epsilon = 1e-14);

            // The closure cancels symbolically, not just numerically.
            let c_ac = AlmostClassicalObservable::constraint(0, dim);
            let g_ac = g.to_almost_classical(0);
            let closed = bracket_closure(&c_ac, &g_ac).unwrap();
            assert_eq!(closed.term_count(), 0);
        }
    }

    fn random_poly_coeff(cl_dim: usize, rng: &mut ChaCha8Rng) -> ClassicalObservable {
        let mut terms = Vec::new();
        for _ in 0..2 {
            let mut x_powers = vec![0u32; cl_dim];
            let mut p_powers = vec![0u32; cl_dim];
            x_powers[rng.random_range(0..cl_dim)] = rng.random_range(0..3);
            p_powers[rng.random_range(0..cl_dim)] = rng.random_range(0..2);
            terms.push(PolyTerm {
                coefficient: rng.sample::<f64, _>(StandardNormal),
                x_powers,
                p_powers,
            });
        }
        ClassicalObservable::polynomial(cl_dim, terms).unwrap()
    }

    fn random_ac(cl_dim: usize, qm_dim: usize, rng: &mut ChaCha8Rng) -> AlmostClassicalObservable {
        let mut terms = Vec::new();
        for _ in 0..2 {
            let pair = (rng.random_range(0..qm_dim), rng.random_range(0..qm_dim));
            terms.push(AcTerm::new(random_poly_coeff(cl_dim, rng), vec![pair]));
        }
        let two = (
            (rng.random_range(0..qm_dim), rng.random_range(0..qm_dim)),
            (rng.random_range(0..qm_dim), rng.random_range(0..qm_dim)),
        );
        terms.push(AcTerm::new(
            random_poly_coeff(cl_dim, rng),
            vec![two.0, two.1],
        ));
        AlmostClassicalObservable::new(cl_dim, qm_dim, terms).unwrap()
    }

    fn random_hybrid_point(cl_dim: usize, qm_dim: usize, rng: &mut ChaCha8Rng) -> HybridPoint {
        let x: Vec<f64> = (0..cl_dim).map(|_| rng.sample(StandardNormal)).collect();
        let p: Vec<f64> = (0..cl_dim).map(|_| rng.sample(StandardNormal)).collect();
        HybridPoint::new(
            ClassicalPoint::from_slices(&x, &p).unwrap(),
            random_unit_state(qm_dim, rng).unwrap(),
        )
    }

    #[test]
    fn closure_reproduces_numeric_bracket() {
        let (cl_dim, qm_dim) = (2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        for _ in 0..5 {
            let a = random_ac(cl_dim, qm_dim, &mut rng);
            let b = random_ac(cl_dim, qm_dim, &mut rng);
            let closed = bracket_closure(&a, &b).unwrap();
            assert!(closed.all_coefficients_analytic());
            for _ in 0..4 {
                let h = random_hybrid_point(cl_dim, qm_dim, &mut rng);
                let numeric = hybrid_bracket(&a, &b, &h).unwrap().value;
                let symbolic = closed.evaluate(&h).unwrap();
                assert_abs_diff_eq!(symbolic, numeric, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn closure_handles_opaque_coefficients_through_finite_differences() {
        let (cl_dim, qm_dim) = (1, 2);
        let a = AlmostClassicalObservable::new(
            cl_dim,
            qm_dim,
            vec![AcTerm::new(
                ClassicalObservable::new(cl_dim, |pt| (pt.x()[0]).sin()),
                vec![(0, 1)],
            )],
        )
        .unwrap();
        let b = AlmostClassicalObservable::new(
            cl_dim,
            qm_dim,
            vec![AcTerm::new(
                ClassicalObservable::new(cl_dim, |pt| pt.p()[0] * pt.p()[0]),
                vec![(1, 0)],
            )],
        )
        .unwrap();
        let closed = bracket_closure(&a, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let h = random_hybrid_point(cl_dim, qm_dim, &mut rng);
            let numeric = finite_difference_bracket(&a, &b, &h).unwrap().value;
            let symbolic = closed.evaluate(&h).unwrap();
            assert_abs_diff_eq!(symbolic, numeric, epsilon = 1e-6);
        }
    }

    #[test]
    fn jacobi_identity_holds_for_almost_classical_observables() {
        let (cl_dim, qm_dim) = (2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2718);
        for _ in 0..3 {
            let a = random_ac(cl_dim, qm_dim, &mut rng);
            let b = random_ac(cl_dim, qm_dim, &mut rng);
            let c = random_ac(cl_dim, qm_dim, &mut rng);
            let bc = bracket_closure(&b, &c).unwrap();
            let ca = bracket_closure(&c, &a).unwrap();
            let ab = bracket_closure(&a, &b).unwrap();
            for _ in 0..3 {
                let h = random_hybrid_point(cl_dim, qm_dim, &mut rng);
                let total = hybrid_bracket(&a, &bc, &h).unwrap().value
                    + hybrid_bracket(&b, &ca, &h).unwrap().value
                    + hybrid_bracket(&c, &ab, &h).unwrap().value;
                assert_abs_diff_eq!(total, 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn bracket_is_antisymmetric() {
        let (cl_dim, qm_dim) = (2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_ac(cl_dim, qm_dim, &mut rng);
        let b = random_ac(cl_dim, qm_dim, &mut rng);
        for _ in 0..5 {
            let h = random_hybrid_point(cl_dim, qm_dim, &mut rng);
            let ab = hybrid_bracket(&a, &b, &h).unwrap().value;
            let ba = hybrid_bracket(&b, &a, &h).unwrap().value;
            assert_abs_diff_eq!(ab + ba, 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn bracket_is_bilinear() {
        let (cl_dim, qm_dim) = (2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_ac(cl_dim, qm_dim, &mut rng);
        let b = random_ac(cl_dim, qm_dim, &mut rng);
        let c = random_ac(cl_dim, qm_dim, &mut rng);
        let (alpha, beta) = (0.6, -1.7);
        let mut combo_terms: Vec<AcTerm> = Vec::new();
        for t in a.terms() {
            combo_terms.push(AcTerm::scaled(
                alpha * t.scale(),
                t.coeff().clone(),
                t.pairs().to_vec(),
            ));
        }
        for t in b.terms() {
            combo_terms.push(AcTerm::scaled(
                beta * t.scale(),
                t.coeff().clone(),
                t.pairs().to_vec(),
            ));
        }
        let combo = AlmostClassicalObservable::new(cl_dim, qm_dim, combo_terms).unwrap();
        for _ in 0..5 {
            let h = random_hybrid_point(cl_dim, qm_dim, &mut rng);
            let lhs = hybrid_bracket(&combo, &c, &h).unwrap().value;
            let rhs = alpha * hybrid_bracket(&a, &c, &h).unwrap().value
                + beta * hybrid_bracket(&b, &c, &h).unwrap().value;
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn leibniz_rule_holds_against_finite_differences() {
        struct ValueOnly<F: Fn(&HybridPoint) -> Result<f64> + Send + Sync>(F);
        impl<F: Fn(&HybridPoint) -> Result<f64> + Send + Sync> PhaseFunction for ValueOnly<F> {
            fn value(&self, h: &HybridPoint) -> Result<f64> {
                (self.0)(h)
            }
            fn gradient(&self, h: &HybridPoint) -> Result<PhaseGradient> {
                finite_difference_gradient(self, h)
            }
        }

        let (cl_dim, qm_dim) = (1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = random_ac(cl_dim, qm_dim, &mut rng);
        let b = random_ac(cl_dim, qm_dim, &mut rng);
        let c = random_ac(cl_dim, qm_dim, &mut rng);
        let (bb, cc) = (b.clone(), c.clone());
        let product = ValueOnly(move |h: &HybridPoint| Ok(bb.evaluate(h)? * cc.evaluate(h)?));

        for _ in 0..4 {
            let h = random_hybrid_point(cl_dim, qm_dim, &mut rng);
            let lhs = hybrid_bracket(&a, &product, &h).unwrap().value;
            let rhs = hybrid_bracket(&a, &b, &h).unwrap().value * c.evaluate(&h).unwrap()
                + b.evaluate(&h).unwrap() * hybrid_bracket(&a, &c, &h).unwrap().value;
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-6);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences_for_hybrid_observables() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let (cl_dim, qm_dim) = (2, 3);
        let a = random_ac(cl_dim, qm_dim, &mut rng);
        for _ in 0..3 {
            let h = random_hybrid_point(cl_dim, qm_dim, &mut rng);
            let analytic = a.gradient(&h).unwrap();
            let numeric = finite_difference_gradient(&a, &h).unwrap();
            for k in 0..cl_dim {
                assert_abs_diff_eq!(analytic.x[k], numeric.x[k], epsilon = 1e-6);
                assert_abs_diff_eq!(analytic.p[k], numeric.p[k], epsilon = 1e-6);
            }
            for k in 0..qm_dim {
                assert_abs_diff_eq!(analytic.qx[k], numeric.qx[k], epsilon = 1e-6);
                assert_abs_diff_eq!(analytic.qp[k], numeric.qp[k], epsilon = 1e-6);
            }
        }
    }
}

//! Phase-space points for the classical and quantum sectors.
//!
//! The quantum sector stores a state vector `c` as oscillator pairs
//! `X_i = sqrt(2) Re c_i`, `P_i = sqrt(2) Im c_i`. Normalization of `c` is
//! the constraint surface `C = (1/2) sum_i (X_i^2 + P_i^2) = 1`; every
//! admissible observable commutes with `C`, so the flow stays on the sphere
//! of radius `sqrt(2)`.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance on `|C - 1|` for physical points.
pub const CONSTRAINT_TOL: f64 = 1e-12;

/// Tolerance on `||c| - 1|` accepted when encoding amplitudes.
pub const ENCODE_NORM_TOL: f64 = 1e-9;

fn check_finite(v: &[f64], context: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

/// Point `(x, p)` of the classical sector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalPoint {
    pub(crate) x: DVector<f64>,
    pub(crate) p: DVector<f64>,
}

impl ClassicalPoint {
    pub fn new(x: DVector<f64>, p: DVector<f64>) -> Result<Self> {
        if x.len() != p.len() {
            return Err(Error::DimensionMismatch {
                context: "classical point",
                expected: x.len(),
                actual: p.len(),
            });
        }
        check_finite(x.as_slice(), "classical point")?;
        check_finite(p.as_slice(), "classical point")?;
        Ok(Self { x, p })
    }

    pub fn from_slices(x: &[f64], p: &[f64]) -> Result<Self> {
        Self::new(DVector::from_row_slice(x), DVector::from_row_slice(p))
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn p(&self) -> &DVector<f64> {
        &self.p
    }
}

/// Oscillator pairs `(X, P)` representing the quantum sector.
///
/// `new` enforces the constraint; `raw` admits off-shell points, which show
/// up as intermediate quantities (gradients of the constraint itself, test
/// probes) and must never be fed to the propagators.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumPhasePoint {
    pub(crate) x: DVector<f64>,
    pub(crate) p: DVector<f64>,
}

impl QuantumPhasePoint {
    /// Constraint-checked constructor with the default tolerance.
    pub fn new(x: DVector<f64>, p: DVector<f64>) -> Result<Self> {
        Self::with_tolerance(x, p, CONSTRAINT_TOL)
    }

    /// Constraint-checked constructor with a caller-chosen tolerance.
    pub fn with_tolerance(x: DVector<f64>, p: DVector<f64>, tol: f64) -> Result<Self> {
        let point = Self::raw(x, p)?;
        let c = point.constraint();
        if (c - 1.0).abs() > tol {
            return Err(Error::ConstraintViolation { value: c, tol });
        }
        Ok(point)
    }

    /// Unconstrained constructor; only lengths and finiteness are checked.
    pub fn raw(x: DVector<f64>, p: DVector<f64>) -> Result<Self> {
        if x.len() != p.len() {
            return Err(Error::DimensionMismatch {
                context: "quantum phase point",
                expected: x.len(),
                actual: p.len(),
            });
        }
        check_finite(x.as_slice(), "quantum phase point")?;
        check_finite(p.as_slice(), "quantum phase point")?;
        Ok(Self { x, p })
    }

    pub fn from_slices(x: &[f64], p: &[f64]) -> Result<Self> {
        Self::raw(DVector::from_row_slice(x), DVector::from_row_slice(p))
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn p(&self) -> &DVector<f64> {
        &self.p
    }

    /// `C` evaluated at this point.
    pub fn constraint(&self) -> f64 {
        constraint_value(self)
    }

    /// Complex amplitudes `c_i = (X_i + i P_i) / sqrt(2)`.
    pub fn amplitudes(&self) -> DVector<Complex64> {
        decode_state(self)
    }

    /// Rescales `(X, P)` by `1/sqrt(C)` so the constraint is exactly 1.
    ///
    /// Opt-in drift repair for very long runs; callers are expected to log
    /// each application.
    pub fn renormalized(&self) -> Result<Self> {
        let c = self.constraint();
        if c <= 0.0 {
            return Err(Error::ConstraintViolation {
                value: c,
                tol: CONSTRAINT_TOL,
            });
        }
        let s = 1.0 / c.sqrt();
        Self::raw(&self.x * s, &self.p * s)
    }
}

/// Combined classical + quantum state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HybridPointRepr", into = "HybridPointRepr")]
pub struct HybridPoint {
    pub(crate) cl: ClassicalPoint,
    pub(crate) qm: QuantumPhasePoint,
}

impl HybridPoint {
    pub fn new(cl: ClassicalPoint, qm: QuantumPhasePoint) -> Self {
        Self { cl, qm }
    }

    pub fn classical(&self) -> &ClassicalPoint {
        &self.cl
    }

    pub fn quantum(&self) -> &QuantumPhasePoint {
        &self.qm
    }

    pub fn cl_dim(&self) -> usize {
        self.cl.dim()
    }

    pub fn qm_dim(&self) -> usize {
        self.qm.dim()
    }
}

/// Serialized layout: plain arrays `x`, `p` (classical) and `X`, `P`
/// (oscillator pairs).
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HybridPointRepr {
    x: Vec<f64>,
    p: Vec<f64>,
    #[serde(rename = "X")]
    qx: Vec<f64>,
    #[serde(rename = "P")]
    qp: Vec<f64>,
}

impl TryFrom<HybridPointRepr> for HybridPoint {
    type Error = Error;

    fn try_from(r: HybridPointRepr) -> Result<Self> {
        Ok(HybridPoint::new(
            ClassicalPoint::from_slices(&r.x, &r.p)?,
            QuantumPhasePoint::from_slices(&r.qx, &r.qp)?,
        ))
    }
}

impl From<HybridPoint> for HybridPointRepr {
    fn from(h: HybridPoint) -> Self {
        HybridPointRepr {
            x: h.cl.x.as_slice().to_vec(),
            p: h.cl.p.as_slice().to_vec(),
            qx: h.qm.x.as_slice().to_vec(),
            qp: h.qm.p.as_slice().to_vec(),
        }
    }
}

/// Basis the oscillator pairs refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisSet {
    /// Orthonormal basis with no position-space realization.
    AbstractOrthonormal { dim: usize },
    /// Eigenbasis of a harmonic oscillator with the given mass and frequency
    /// (hbar = 1), realized by Hermite functions in position space.
    HarmonicOscillatorPosition {
        dim: usize,
        mass: f64,
        frequency: f64,
    },
}

impl BasisSet {
    pub fn abstract_orthonormal(dim: usize) -> Self {
        BasisSet::AbstractOrthonormal { dim }
    }

    pub fn harmonic(dim: usize, mass: f64, frequency: f64) -> Self {
        BasisSet::HarmonicOscillatorPosition {
            dim,
            mass,
            frequency,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            BasisSet::AbstractOrthonormal { dim } => *dim,
            BasisSet::HarmonicOscillatorPosition { dim, .. } => *dim,
        }
    }
}

/// Maps unit-norm amplitudes to oscillator pairs, `X_i + i P_i = sqrt(2) c_i`.
pub fn encode_state(amplitudes: &[Complex64]) -> Result<QuantumPhasePoint> {
    let norm_sq: f64 = amplitudes.iter().map(|c| c.norm_sqr()).sum();
    if !norm_sq.is_finite() {
        return Err(Error::NonFinite {
            context: "encode_state",
        });
    }
    let norm = norm_sq.sqrt();
    if (norm - 1.0).abs() > ENCODE_NORM_TOL {
        return Err(Error::NotNormalized { norm });
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    let x = DVector::from_iterator(amplitudes.len(), amplitudes.iter().map(|c| sqrt2 * c.re));
    let p = DVector::from_iterator(amplitudes.len(), amplitudes.iter().map(|c| sqrt2 * c.im));
    QuantumPhasePoint::raw(x, p)
}

/// Inverse of [`encode_state`]; defined for off-shell points as well.
pub fn decode_state(q: &QuantumPhasePoint) -> DVector<Complex64> {
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    DVector::from_iterator(
        q.dim(),
        q.x.iter()
            .zip(q.p.iter())
            .map(|(&x, &p)| Complex64::new(x * inv_sqrt2, p * inv_sqrt2)),
    )
}

/// `C = (1/2) sum_i (X_i^2 + P_i^2)`, i.e. `|c|^2`.
pub fn constraint_value(q: &QuantumPhasePoint) -> f64 {
    0.5 * (q.x.norm_squared() + q.p.norm_squared())
}

/// Global phase `c -> exp(i theta) c` as a rotation of every `(X_i, P_i)`
/// pair. Leaves the constraint and every admissible observable unchanged.
pub fn phase_rotate(q: &QuantumPhasePoint, theta: f64) -> QuantumPhasePoint {
    let (s, c) = theta.sin_cos();
    let x = c * &q.x - s * &q.p;
    let p = s * &q.x + c * &q.p;
    QuantumPhasePoint { x, p }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn encode_basis_state_gives_sqrt2_coordinate() {
        let q = encode_state(&[c64(1.0, 0.0), c64(0.0, 0.0)]).unwrap();
        assert_relative_eq!(q.x()[0], std::f64::consts::SQRT_2, max_relative = 1e-15);
        assert_abs_diff_eq!(q.x()[1], 0.0);
        assert_abs_diff_eq!(q.p()[0], 0.0);
        assert_abs_diff_eq!(q.p()[1], 0.0);
        assert_relative_eq!(q.constraint(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn encode_rejects_unnormalized_input() {
        let err = encode_state(&[c64(1.0, 0.0), c64(0.5, 0.0)]).unwrap_err();
        match err {
            Error::NotNormalized { norm } => {
                assert_relative_eq!(norm, 1.25_f64.sqrt(), max_relative = 1e-14)
            }
            other => panic!("expected NotNormalized, got {other:?}"),
        }
    }

    #[test]
    fn constraint_of_off_shell_points() {
        let zero = QuantumPhasePoint::from_slices(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(constraint_value(&zero), 0.0);

        let two = QuantumPhasePoint::from_slices(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(constraint_value(&two), 2.0);
    }

    #[test]
    fn constrained_constructor_rejects_off_shell_points() {
        let err = QuantumPhasePoint::new(
            DVector::from_row_slice(&[2.0, 0.0]),
            DVector::from_row_slice(&[0.0, 0.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ConstraintViolation { .. }));
    }

    #[test]
    fn quarter_turn_moves_x_onto_p() {
        let q = QuantumPhasePoint::from_slices(&[std::f64::consts::SQRT_2, 0.0], &[0.0, 0.0])
            .unwrap();
        let r = phase_rotate(&q, std::f64::consts::FRAC_PI_2);
        assert_abs_diff_eq!(r.x()[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(r.p()[0], std::f64::consts::SQRT_2, max_relative = 1e-15);
    }

    #[test]
    fn renormalized_lands_on_the_sphere() {
        let q = QuantumPhasePoint::from_slices(&[2.0, 0.0], &[0.0, 0.3]).unwrap();
        let r = q.renormalized().unwrap();
        assert_relative_eq!(r.constraint(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn hybrid_point_json_uses_sector_field_names() {
        let h = HybridPoint::new(
            ClassicalPoint::from_slices(&[0.25], &[-1.5]).unwrap(),
            QuantumPhasePoint::from_slices(&[1.0, 0.5], &[0.0, -0.5]).unwrap(),
        );
        let text = serde_json::to_string(&h).unwrap();
        assert!(text.contains("\"x\""), "{text}");
        assert!(text.contains("\"X\""), "{text}");
        let back: HybridPoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn hybrid_point_json_rejects_unknown_fields() {
        let text = r#"{"x":[0.0],"p":[0.0],"X":[1.0],"P":[0.0],"Q":[2.0]}"#;
        assert!(serde_json::from_str::<HybridPoint>(text).is_err());
    }

    prop_compose! {
        fn arb_amplitudes(max_dim: usize)
            (dim in 1..=max_dim)
            (parts in prop::collection::vec((-1.0_f64..1.0, -1.0_f64..1.0), dim..=dim)
                .prop_filter("nonzero", |v| {
                    v.iter().map(|(a, b)| a * a + b * b).sum::<f64>() > 1e-3
                }))
            -> Vec<Complex64>
        {
            let norm = parts.iter().map(|(a, b)| a * a + b * b).sum::<f64>().sqrt();
            parts.into_iter().map(|(a, b)| c64(a / norm, b / norm)).collect()
        }
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(amps in arb_amplitudes(8)) {
            let q = encode_state(&amps).unwrap();
            let back = decode_state(&q);
            for (a, b) in amps.iter().zip(back.iter()) {
                prop_assert!((a - b).norm() <= 1e-15);
            }
            prop_assert!((q.constraint() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn phase_rotation_preserves_constraint_and_composes(
            amps in arb_amplitudes(6),
            t1 in -3.0_f64..3.0,
            t2 in -3.0_f64..3.0,
        ) {
            let q = encode_state(&amps).unwrap();
            let r = phase_rotate(&q, t1);
            prop_assert!((constraint_value(&r) - constraint_value(&q)).abs() <= 1e-13);

            let a = phase_rotate(&phase_rotate(&q, t1), t2);
            let b = phase_rotate(&q, t1 + t2);
            for i in 0..q.dim() {
                prop_assert!((a.x()[i] - b.x()[i]).abs() <= 1e-12);
                prop_assert!((a.p()[i] - b.p()[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn rotation_matches_amplitude_phase(amps in arb_amplitudes(5), theta in -3.0_f64..3.0) {
            let q = encode_state(&amps).unwrap();
            let rotated = decode_state(&phase_rotate(&q, theta));
            let phase = Complex64::from_polar(1.0, theta);
            for (c, r) in amps.iter().zip(rotated.iter()) {
                prop_assert!((c * phase - r).norm() <= 1e-14);
            }
        }
    }
}

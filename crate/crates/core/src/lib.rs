//! Hamiltonian dynamics for coupled classical-quantum systems in the
//! oscillator representation.
//!
//! A pure state `|psi> = sum_i c_i |phi_i>` over an orthonormal basis is
//! stored as real oscillator coordinates `X_i = sqrt(2) Re c_i` and momenta
//! `P_i = sqrt(2) Im c_i`. Normalization becomes the constraint
//! `C = (1/2) sum_i (X_i^2 + P_i^2) = 1`, and the Schroedinger equation
//! becomes Hamilton's equations for the quadratic form `<psi|H|psi>`.
//! Classical degrees of freedom `(x_k, p_k)` live alongside the oscillator
//! pairs, so a single generalized Poisson bracket
//! `{A, B} = {A, B}_cl + {A, B}_qm` generates the coupled flow.
//!
//! Module map:
//!
//! * [`phase_space`]: points, the constraint, encoding amplitudes.
//! * [`observables`]: Hermitian quadratic forms, classical scalars, hybrid
//!   and almost-classical observables.
//! * [`brackets`]: classical/quantum/hybrid brackets, commutator
//!   cross-checks, symbolic closure of almost-classical observables.
//! * [`dynamics`]: implicit-midpoint flow, trajectories, canonical
//!   transformations, unitary reference propagation, perturbation response.
//! * [`models`]: bilinear and localized oscillator-bath builders, Hermite
//!   basis functions, Gauss-Hermite quadrature, Weyl-symmetrized operator
//!   recipes.
//! * [`ensemble`]: hybrid densities, Monte Carlo Liouville propagation,
//!   positivity/normalization reports.
//!
//! With the default `parallel` feature, ensemble propagation and batch
//! bracket sweeps fan out over rayon; results are reduced in sample order so
//! output is identical to the sequential fallback.

pub mod brackets;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod models;
pub mod observables;
pub mod phase_space;

pub(crate) mod exec;

pub use error::{Error, Result};
pub use phase_space::{BasisSet, ClassicalPoint, HybridPoint, QuantumPhasePoint};

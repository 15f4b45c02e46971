//! Numerical laboratory for multidimensional quadratic BSDEs with product
//! generators dY = Z f(Y, Z) dt + Z dW and bounded terminal values.
//!
//! The crate has two halves. The certificate half ([`certificate`]) computes
//! the full constant ledger of the existence construction (K, alpha, beta,
//! C6, R, delta, lambda, R-tilde) in log-safe arithmetic and decides the
//! existence and uniqueness gates. The solver half ([`paths`], [`regression`],
//! [`picard`], [`pasting`]) iterates the measure-change fixed-point map on
//! simulated Brownian ensembles, window by window, and cross-checks the
//! iterates against independent oracles ([`oracles`]).

pub mod certificate;
pub mod error;
pub mod oracles;
pub mod pasting;
pub mod paths;
pub mod picard;
pub mod problem;
pub mod regression;
pub mod rng;

pub use certificate::{certify, certify_with, CertifyOptions, ConstantLedger};
pub use error::{Error, Result};
pub use oracles::{constant_drift_oracle, heat_kernel_oracle, tree_oracle, TrigKind};
pub use pasting::{solve_full, FullSolution, SolveParams, SolveReport};
pub use paths::{generate_ensemble, PathEnsemble, TimeGrid};
pub use picard::{contraction_probe, iterate, phi_step, ConvergenceTrace, PhiMode};
pub use problem::{validate_constants, GeneratorSpec, ProblemSpec, TerminalSpec};
pub use regression::{BasisSpec, ProcessApprox};

//! Semiclassical Gaussian-mixture dynamics for open quantum systems.
//!
//! A Lindblad model is specified through the phase-space symbols of its
//! Hamiltonian and jump operators. Expanding the symbols to second order
//! around a packet centroid makes the generator map Gaussians to Gaussians,
//! so the state is carried by (centroid, covariance) pairs plus a mixing
//! measure over them. This crate evaluates the local-harmonic coefficients,
//! integrates the deterministic packet paths, propagates the mixing measure
//! as an Ito particle ensemble, and splits observable rates into coherent
//! and diffusive parts.

pub mod coeff;
pub mod ensemble;
pub mod error;
pub mod observables;
pub mod phase;
pub mod propagator;
pub mod symbol;

pub use nalgebra;

pub use coeff::{CoefficientBundle, ConventionFlags, LindbladModel, Raising};
pub use ensemble::{psd_sqrt, run_ensemble, EnsembleConfig, NoiseFactor};
pub use error::{DynamicsError, ObservableError, PhaseError, SymbolError};
pub use observables::{PolynomialObservable, RateDecomposition};
pub use phase::{
    nts_check, purity_defect, symplectic_form, uncertainty_check, CovMatrix, GaussianComponent,
    MixtureSnapshot, PhasePoint, SymplecticForm,
};
pub use propagator::{propagate, CheckPolicy, IntegratorConfig, Method, Trajectory};
pub use symbol::{parse, ComplexSymbol, Expr, ParamBindings, VarId};

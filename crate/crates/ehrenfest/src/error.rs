//! Error types shared across the crate.

use thiserror::Error;

/// Construction and invariant failures of the phase-space value types.
#[derive(Debug, Error)]
pub enum PhaseError {
    #[error("phase point must have positive even length, got {len}")]
    OddPhaseDim { len: usize },
    #[error("covariance must be square with even positive size, got {rows}x{cols}")]
    BadCovShape { rows: usize, cols: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("covariance not symmetric (max asymmetry {asym:.3e})")]
    NotSymmetric { asym: f64 },
    #[error("covariance not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },
    #[error("alpha has d={alpha} but sigma has d={sigma}")]
    DimMismatch { alpha: usize, sigma: usize },
    #[error("component weight must be finite and >= 0, got {weight}")]
    BadWeight { weight: f64 },
    #[error("mixture snapshot needs at least one component")]
    EmptyMixture,
    #[error("mixture weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },
}

/// Parse and evaluation failures of the symbol language.
#[derive(Debug, Error, PartialEq)]
pub enum SymbolError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdent { name: String, pos: usize },
    #[error("variable `{name}` exceeds dimension d={d}")]
    VarIndex { name: String, d: usize },
    #[error("divisor at byte {pos} must be built from constants and parameters only")]
    NonConstDivisor { pos: usize },
    #[error("exponent at byte {pos} must be a nonnegative integer")]
    BadExponent { pos: usize },
    #[error("parameter `{0}` is unbound")]
    UnboundParam(String),
    #[error("division by zero while evaluating")]
    DivisionByZero,
    #[error("evaluation produced a non-finite value")]
    NonFiniteValue,
}

/// Model construction, coefficient evaluation, and propagation failures.
#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error("hbar must be positive, got {0}")]
    BadHbar(f64),
    #[error("model dimension must be >= 1")]
    BadDimension,
    #[error("state dimension d={state} does not match model dimension d={model}")]
    StateDim { state: usize, model: usize },
    #[error("{name} is not positive semidefinite (min eigenvalue {min_eig:.3e}); check the index-raising conventions")]
    CoefficientPsd { name: &'static str, min_eig: f64 },
    #[error("noise factor: eigenvalue {min_eig:.3e} below -clamp_tol={clamp_tol:.1e}")]
    NoisePsd { min_eig: f64, clamp_tol: f64 },
    #[error("non-finite state at t={t} (step {step})")]
    NonFiniteState { t: f64, step: usize },
    #[error("uncertainty principle violated at t={t} (step {step}): min eigenvalue {min_eig:.3e}")]
    UncertaintyViolation { t: f64, step: usize, min_eig: f64 },
    #[error("not-too-squeezed condition (xi={xi}) violated at t={t} (step {step})")]
    NtsViolation { t: f64, step: usize, xi: f64 },
    #[error("integrator config: {0}")]
    BadConfig(&'static str),
    #[error("trajectory {index} failed: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<DynamicsError>,
    },
    #[error(transparent)]
    Observable(#[from] ObservableError),
}

/// Polynomial-observable failures.
#[derive(Debug, Error, PartialEq)]
pub enum ObservableError {
    #[error("total degree {degree} exceeds the supported bound {max}")]
    DegreeTooHigh { degree: usize, max: usize },
    #[error("coefficient for {0:?} is not finite")]
    NonFiniteCoefficient(Vec<u8>),
    #[error("expression is not a polynomial in the phase variables: {0}")]
    NonPolynomial(&'static str),
    #[error("multi-index length {len} does not match 2d={expected}")]
    IndexLength { len: usize, expected: usize },
    #[error("parameter `{0}` is unbound")]
    UnboundParam(String),
    #[error("observable dimension 2d={obs} does not match state dimension 2d={state}")]
    DimMismatch { obs: usize, state: usize },
}

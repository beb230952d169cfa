//! Scenario file schema and validation.
//!
//! A scenario is a single JSON document with `model`, `initial`,
//! `integrator`, optional `ensemble`, `observables`, and `outputs` blocks.
//! Everything is parsed and validated before any computation starts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use ehrenfest::observables::PolynomialObservable;
use ehrenfest::propagator::{CheckPolicy, IntegratorConfig, Method};
use ehrenfest::symbol::parse;
use ehrenfest::{
    ComplexSymbol, ConventionFlags, CovMatrix, EnsembleConfig, GaussianComponent, LindbladModel,
    ParamBindings, PhasePoint, Raising,
};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub model: ModelBlock,
    pub initial: InitialBlock,
    #[serde(default)]
    pub integrator: IntegratorBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleBlock>,
    #[serde(default)]
    pub observables: Vec<ObservableSpec>,
    #[serde(default)]
    pub outputs: OutputsBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub d: usize,
    pub hbar: f64,
    #[serde(default)]
    pub params: std::collections::BTreeMap<String, f64>,
    pub hamiltonian: String,
    #[serde(default)]
    pub lindblads: Vec<LindbladSpec>,
    #[serde(default)]
    pub conventions: ConventionsBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LindbladSpec {
    pub re: String,
    #[serde(default = "zero_expr")]
    pub im: String,
}

fn zero_expr() -> String {
    "0".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConventionsBlock {
    #[serde(default = "default_drift_raising")]
    pub drift_raising: RaisingSpec,
    #[serde(default = "default_diffusion_raising")]
    pub diffusion_raising: RaisingSpec,
    #[serde(default)]
    pub ehrenfest_factor_two: bool,
}

// The mixed defaults (symplectic drift, Euclidean diffusion) are the pair
// that reproduces the exactly solvable reference model.
impl Default for ConventionsBlock {
    fn default() -> Self {
        Self {
            drift_raising: default_drift_raising(),
            diffusion_raising: default_diffusion_raising(),
            ehrenfest_factor_two: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum RaisingSpec {
    Symplectic,
    Euclidean,
}

fn default_drift_raising() -> RaisingSpec {
    RaisingSpec::Symplectic
}

fn default_diffusion_raising() -> RaisingSpec {
    RaisingSpec::Euclidean
}

impl From<RaisingSpec> for Raising {
    fn from(r: RaisingSpec) -> Self {
        match r {
            RaisingSpec::Symplectic => Raising::Symplectic,
            RaisingSpec::Euclidean => Raising::Euclidean,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    pub alpha: Vec<f64>,
    pub sigma: SigmaSpec,
}

/// Either the `"coherent"` shorthand for `(hbar/2) I` or an explicit
/// `2d x 2d` matrix given row by row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Shorthand(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorBlock {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default)]
    pub method: MethodSpec,
    #[serde(default = "default_uncertainty_policy")]
    pub uncertainty_policy: PolicySpec,
    #[serde(default = "default_nts_policy")]
    pub nts_policy: PolicySpec,
    #[serde(default = "default_nts_xi")]
    pub nts_xi: f64,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
}

impl Default for IntegratorBlock {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            t_max: default_t_max(),
            method: MethodSpec::default(),
            uncertainty_policy: default_uncertainty_policy(),
            nts_policy: default_nts_policy(),
            nts_xi: default_nts_xi(),
            record_stride: default_stride(),
        }
    }
}

fn default_dt() -> f64 {
    0.02
}

fn default_t_max() -> f64 {
    10.0
}

fn default_nts_xi() -> f64 {
    1.0
}

fn default_stride() -> usize {
    1
}

fn default_uncertainty_policy() -> PolicySpec {
    PolicySpec::Error
}

fn default_nts_policy() -> PolicySpec {
    PolicySpec::Warn
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum MethodSpec {
    #[default]
    Rk4,
    Euler,
}

impl From<MethodSpec> for Method {
    fn from(m: MethodSpec) -> Self {
        match m {
            MethodSpec::Rk4 => Method::Rk4,
            MethodSpec::Euler => Method::Euler,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PolicySpec {
    Error,
    Warn,
    Ignore,
}

impl From<PolicySpec> for CheckPolicy {
    fn from(p: PolicySpec) -> Self {
        match p {
            PolicySpec::Error => CheckPolicy::Error,
            PolicySpec::Warn => CheckPolicy::Warn,
            PolicySpec::Ignore => CheckPolicy::Ignore,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    pub n_traj: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    #[serde(default = "default_clamp_tol")]
    pub clamp_tol: f64,
}

fn default_clamp_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    pub name: String,
    pub expr: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsBlock {
    pub trajectory: String,
    pub moments: String,
    pub rates: String,
    pub energy: String,
    pub summary: String,
    /// When set, `ensemble` also dumps per-trajectory states here.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<String>,
}

impl Default for OutputsBlock {
    fn default() -> Self {
        Self {
            trajectory: "trajectory.csv".into(),
            moments: "moments.csv".into(),
            rates: "rates.csv".into(),
            energy: "energy.csv".into(),
            summary: "summary.json".into(),
            trajectories: None,
        }
    }
}

/// Everything validated and ready to run.
pub struct Prepared {
    pub file: ScenarioFile,
    pub model: LindbladModel,
    pub init: GaussianComponent,
    pub integrator: IntegratorConfig,
    pub ensemble: Option<EnsembleConfig>,
    /// `(name, polynomial)` in declaration order.
    pub observables: Vec<(String, PolynomialObservable)>,
    /// Energy balance availability: `Err` carries the reason when the
    /// Hamiltonian is not polynomial.
    pub energy_supported: Result<(), String>,
}

pub fn load(path: &std::path::Path) -> Result<ScenarioFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read scenario {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("scenario schema error: {e}")))
}

pub fn prepare(file: ScenarioFile) -> Result<Prepared, CliError> {
    let bad = |msg: String| CliError::Validation(msg);

    let d = file.model.d;
    let param_names: BTreeSet<String> = file.model.params.keys().cloned().collect();
    let hamiltonian = parse(&file.model.hamiltonian, d, &param_names)
        .map_err(|e| bad(format!("hamiltonian: {e}")))?;
    let mut lindblads = Vec::with_capacity(file.model.lindblads.len());
    for (k, spec) in file.model.lindblads.iter().enumerate() {
        let re = parse(&spec.re, d, &param_names)
            .map_err(|e| bad(format!("lindblad {k} (re): {e}")))?;
        let im = parse(&spec.im, d, &param_names)
            .map_err(|e| bad(format!("lindblad {k} (im): {e}")))?;
        lindblads.push(ComplexSymbol::new(re, im));
    }
    let bindings: ParamBindings = file
        .model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let conventions = ConventionFlags {
        drift_raising: file.model.conventions.drift_raising.into(),
        diffusion_raising: file.model.conventions.diffusion_raising.into(),
        ehrenfest_factor_two: file.model.conventions.ehrenfest_factor_two,
    };
    let model = LindbladModel::new(
        d,
        file.model.hbar,
        hamiltonian,
        lindblads,
        bindings,
        conventions,
    )
    .map_err(|e| bad(format!("model: {e}")))?;

    let alpha = PhasePoint::new(file.initial.alpha.clone())
        .map_err(|e| bad(format!("initial alpha: {e}")))?;
    if alpha.dof() != d {
        return Err(bad(format!(
            "initial alpha has d={} but the model has d={d}",
            alpha.dof()
        )));
    }
    let sigma = match &file.initial.sigma {
        SigmaSpec::Shorthand(s) if s == "coherent" => CovMatrix::coherent(d, file.model.hbar),
        SigmaSpec::Shorthand(s) => {
            return Err(bad(format!(
                "initial sigma: unknown shorthand `{s}` (expected \"coherent\" or a matrix)"
            )))
        }
        SigmaSpec::Matrix(rows) => {
            let n = 2 * d;
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(bad(format!("initial sigma must be {n}x{n}")));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            CovMatrix::new(ehrenfest::nalgebra::DMatrix::from_row_slice(n, n, &flat))
                .map_err(|e| bad(format!("initial sigma: {e}")))?
        }
    };
    let init = GaussianComponent::new(alpha, sigma, 1.0)
        .map_err(|e| bad(format!("initial state: {e}")))?;

    let integrator = IntegratorConfig {
        dt: file.integrator.dt,
        t_max: file.integrator.t_max,
        method: file.integrator.method.into(),
        uncertainty_policy: file.integrator.uncertainty_policy.into(),
        nts_policy: file.integrator.nts_policy.into(),
        nts_xi: file.integrator.nts_xi,
        record_stride: file.integrator.record_stride,
    };
    integrator
        .validate()
        .map_err(|e| bad(format!("integrator: {e}")))?;

    let ensemble = match &file.ensemble {
        None => None,
        Some(b) => {
            let cfg = EnsembleConfig {
                n_traj: b.n_traj,
                dt: b.dt,
                t_max: b.t_max,
                seed: b.seed,
                record_stride: b.record_stride,
                clamp_tol: b.clamp_tol,
            };
            cfg.validate().map_err(|e| bad(format!("ensemble: {e}")))?;
            Some(cfg)
        }
    };

    let mut observables = Vec::with_capacity(file.observables.len());
    for spec in &file.observables {
        let expr = parse(&spec.expr, d, &param_names)
            .map_err(|e| bad(format!("observable `{}`: {e}", spec.name)))?;
        let poly = PolynomialObservable::from_expr(&expr, d, model.bindings())
            .map_err(|e| bad(format!("observable `{}`: {e}", spec.name)))?;
        observables.push((spec.name.clone(), poly));
    }

    let energy_supported =
        PolynomialObservable::from_expr(model.hamiltonian(), d, model.bindings())
            .map(|_| ())
            .map_err(|e| format!("unsupported: {e}"));

    Ok(Prepared {
        file,
        model,
        init,
        integrator,
        ensemble,
        observables,
        energy_supported,
    })
}

//! Deterministic integration of the semiclassical path equations
//! `d alpha/dt = U(alpha)`, `d sigma/dt = S(alpha, sigma)` for a single
//! Gaussian component, with admissibility monitoring.

use nalgebra::{DMatrix, DVector};

use crate::coeff::LindbladModel;
use crate::error::DynamicsError;
use crate::phase::{nts_check, uncertainty_check, CovMatrix, GaussianComponent, PhasePoint};

/// Integration scheme. RK4 is the default; the explicit Euler scheme is kept
/// for benchmark parity with step-size studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Rk4,
    Euler,
}

/// What to do when an admissibility check fails mid-trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckPolicy {
    Error,
    Warn,
    Ignore,
}

/// Integrator configuration.
///
/// The uncertainty check defaults to a hard error (a violating state is
/// unphysical); the squeezing check defaults to a warning (violation only
/// degrades the harmonic approximation).
#[derive(Debug, Clone, Copy)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_max: f64,
    pub method: Method,
    pub uncertainty_policy: CheckPolicy,
    pub nts_policy: CheckPolicy,
    pub nts_xi: f64,
    pub record_stride: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            t_max: 10.0,
            method: Method::Rk4,
            uncertainty_policy: CheckPolicy::Error,
            nts_policy: CheckPolicy::Warn,
            nts_xi: 1.0,
            record_stride: 1,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::BadConfig("dt must be positive"));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(DynamicsError::BadConfig("t_max must be positive"));
        }
        if self.dt > self.t_max {
            return Err(DynamicsError::BadConfig("dt must not exceed t_max"));
        }
        if !(self.nts_xi > 0.0 && self.nts_xi <= 1.0) {
            return Err(DynamicsError::BadConfig("nts_xi must lie in (0, 1]"));
        }
        if self.record_stride == 0 {
            return Err(DynamicsError::BadConfig("record_stride must be >= 1"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_max / self.dt).round().max(1.0) as usize
    }
}

/// A recorded deterministic path: strictly increasing times and the
/// unit-weight component at each.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<GaussianComponent>,
}

impl Trajectory {
    /// View each recorded state as a single-component mixture snapshot.
    pub fn to_snapshots(&self) -> Vec<crate::phase::MixtureSnapshot> {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(&t, s)| {
                crate::phase::MixtureSnapshot::new(t, vec![s.clone()])
                    .expect("unit-weight component")
            })
            .collect()
    }
}

/// Raw (unvalidated) state used inside the stage arithmetic.
struct RawState {
    alpha: DVector<f64>,
    sigma: DMatrix<f64>,
}

fn rhs(
    model: &LindbladModel,
    alpha: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), DynamicsError> {
    let point = PhasePoint::from_vector(alpha.clone())?;
    let u = model.drift(&point)?;
    let s = model.covariance_rhs_raw(&point, sigma)?;
    Ok((u, s))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn rk4_raw(model: &LindbladModel, state: &RawState, dt: f64) -> Result<RawState, DynamicsError> {
    let (k1a, k1s) = rhs(model, &state.alpha, &state.sigma)?;
    let (k2a, k2s) = rhs(
        model,
        &(&state.alpha + &k1a * (dt / 2.0)),
        &symmetrize(&(&state.sigma + &k1s * (dt / 2.0))),
    )?;
    let (k3a, k3s) = rhs(
        model,
        &(&state.alpha + &k2a * (dt / 2.0)),
        &symmetrize(&(&state.sigma + &k2s * (dt / 2.0))),
    )?;
    let (k4a, k4s) = rhs(
        model,
        &(&state.alpha + &k3a * dt),
        &symmetrize(&(&state.sigma + &k3s * dt)),
    )?;
    let alpha = &state.alpha + (k1a + k2a * 2.0 + k3a * 2.0 + k4a) * (dt / 6.0);
    let sigma = symmetrize(&(&state.sigma + (k1s + k2s * 2.0 + k3s * 2.0 + k4s) * (dt / 6.0)));
    Ok(RawState { alpha, sigma })
}

fn euler_raw(model: &LindbladModel, state: &RawState, dt: f64) -> Result<RawState, DynamicsError> {
    let (ua, ss) = rhs(model, &state.alpha, &state.sigma)?;
    Ok(RawState {
        alpha: &state.alpha + ua * dt,
        sigma: symmetrize(&(&state.sigma + ss * dt)),
    })
}

fn finish(raw: RawState, weight: f64, t: f64, step: usize) -> Result<GaussianComponent, DynamicsError> {
    if raw.alpha.iter().any(|v| !v.is_finite()) || raw.sigma.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFiniteState { t, step });
    }
    let alpha = PhasePoint::from_vector(raw.alpha)?;
    let sigma = CovMatrix::new(raw.sigma)?;
    Ok(GaussianComponent {
        alpha,
        sigma,
        weight,
    })
}

/// One integrator step of the packet equations; the covariance is
/// re-symmetrized after the stage arithmetic.
pub fn step(
    model: &LindbladModel,
    state: &GaussianComponent,
    dt: f64,
    method: Method,
) -> Result<GaussianComponent, DynamicsError> {
    let raw = RawState {
        alpha: state.alpha.coords().clone(),
        sigma: state.sigma.entries().clone(),
    };
    let next = match method {
        Method::Rk4 => rk4_raw(model, &raw, dt)?,
        Method::Euler => euler_raw(model, &raw, dt)?,
    };
    finish(next, state.weight, dt, 1)
}

fn enforce(
    ok: bool,
    policy: CheckPolicy,
    warned: &mut bool,
    err: impl FnOnce() -> DynamicsError,
    warn_msg: impl FnOnce() -> String,
) -> Result<(), DynamicsError> {
    if ok {
        return Ok(());
    }
    match policy {
        CheckPolicy::Error => Err(err()),
        CheckPolicy::Warn => {
            if !*warned {
                log::warn!("{}", warn_msg());
                *warned = true;
            }
            Ok(())
        }
        CheckPolicy::Ignore => Ok(()),
    }
}

/// Integrate from `init` up to `t_max`, recording every `record_stride`
/// steps (the initial and final states are always recorded). Admissibility
/// is enforced per the configured policies.
pub fn propagate(
    model: &LindbladModel,
    init: &GaussianComponent,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, DynamicsError> {
    cfg.validate()?;
    if init.weight != 1.0 {
        return Err(DynamicsError::BadConfig(
            "deterministic propagation expects a unit-weight component",
        ));
    }
    let hbar = model.hbar();
    let n_steps = cfg.n_steps();
    let mut times = Vec::with_capacity(n_steps / cfg.record_stride + 2);
    let mut states = Vec::with_capacity(n_steps / cfg.record_stride + 2);

    let mut warned_uncertainty = false;
    let mut warned_nts = false;
    let check = |state: &GaussianComponent,
                     t: f64,
                     step_idx: usize,
                     warned_u: &mut bool,
                     warned_n: &mut bool|
     -> Result<(), DynamicsError> {
        enforce(
            uncertainty_check(&state.sigma, hbar, 1e-9),
            cfg.uncertainty_policy,
            warned_u,
            || DynamicsError::UncertaintyViolation {
                t,
                step: step_idx,
                min_eig: state.sigma.min_eigenvalue(),
            },
            || format!("uncertainty principle violated at t={t}"),
        )?;
        enforce(
            nts_check(&state.sigma, cfg.nts_xi, hbar),
            cfg.nts_policy,
            warned_n,
            || DynamicsError::NtsViolation {
                t,
                step: step_idx,
                xi: cfg.nts_xi,
            },
            || {
                format!(
                    "not-too-squeezed condition (xi={}) violated at t={t}; \
                     the harmonic approximation may degrade",
                    cfg.nts_xi
                )
            },
        )
    };

    let mut current = init.clone();
    check(&current, 0.0, 0, &mut warned_uncertainty, &mut warned_nts)?;
    times.push(0.0);
    states.push(current.clone());

    for k in 0..n_steps {
        let t_next = (k + 1) as f64 * cfg.dt;
        let raw = RawState {
            alpha: current.alpha.coords().clone(),
            sigma: current.sigma.entries().clone(),
        };
        let next_raw = match cfg.method {
            Method::Rk4 => rk4_raw(model, &raw, cfg.dt)?,
            Method::Euler => euler_raw(model, &raw, cfg.dt)?,
        };
        current = finish(next_raw, init.weight, t_next, k + 1)?;
        check(
            &current,
            t_next,
            k + 1,
            &mut warned_uncertainty,
            &mut warned_nts,
        )?;
        if (k + 1) % cfg.record_stride == 0 || k + 1 == n_steps {
            times.push(t_next);
            states.push(current.clone());
        }
    }
    Ok(Trajectory { times, states })
}

/// Parameters of the exactly solvable free-particle benchmark
/// (`H = p^2/2m`, `L = sqrt(2 lambda) x`, minimum-uncertainty start).
#[derive(Debug, Clone, Copy)]
pub struct FreeParticleParams {
    pub m: f64,
    pub hbar: f64,
    pub lambda: f64,
    pub x0: f64,
    pub p0: f64,
}

impl Default for FreeParticleParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            hbar: 1.0,
            lambda: 0.15,
            x0: 0.0,
            p0: 1.0,
        }
    }
}

/// Closed-form benchmark state at time `t >= 0`:
/// `x = x0 + p0 t / m`, `p = p0`, `sigma^xx = hbar/2 + hbar t^2/(2 m^2)
/// + 2 hbar lambda t`, `sigma^xp = hbar t/(2m)`, `sigma^pp = hbar/2`.
pub fn analytic_free_particle(params: &FreeParticleParams, t: f64) -> GaussianComponent {
    let FreeParticleParams {
        m,
        hbar,
        lambda,
        x0,
        p0,
    } = *params;
    let alpha = PhasePoint::new(vec![x0 + p0 * t / m, p0]).expect("finite centroid");
    let sxx = hbar / 2.0 + hbar * t * t / (2.0 * m * m) + 2.0 * hbar * lambda * t;
    let sxp = hbar * t / (2.0 * m);
    let spp = hbar / 2.0;
    let sigma = CovMatrix::new(DMatrix::from_row_slice(2, 2, &[sxx, sxp, sxp, spp]))
        .expect("closed-form covariance is admissible");
    GaussianComponent {
        alpha,
        sigma,
        weight: 1.0,
    }
}

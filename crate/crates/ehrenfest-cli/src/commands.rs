//! The four subcommands: deterministic simulation, Monte-Carlo ensemble,
//! rate decomposition, and the built-in self-check.

use std::path::Path;
use std::time::Instant;

use ehrenfest::observables::{
    energy_balance, gaussian_expectation, mixture_rate, PolynomialObservable,
};
use ehrenfest::propagator::{analytic_free_particle, propagate, FreeParticleParams};
use ehrenfest::{
    run_ensemble, uncertainty_check, CheckPolicy, ComplexSymbol, GaussianComponent,
    IntegratorConfig, LindbladModel, ParamBindings, PhasePoint,
};

use crate::output::{
    fmt_f64, snapshot_invariants, state_header, state_values, write_summary, CsvWriter,
};
use crate::scenario::Prepared;
use crate::{CliError, Overrides};

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn apply_integrator_overrides(cfg: &mut IntegratorConfig, ov: &Overrides) -> Result<(), CliError> {
    if let Some(dt) = ov.dt {
        cfg.dt = dt;
    }
    if let Some(tmax) = ov.tmax {
        cfg.t_max = tmax;
    }
    cfg.validate()
        .map_err(|e| CliError::Validation(format!("integrator: {e}")))
}

fn summary_base(command: &str, prepared: &Prepared, ov: &Overrides) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "scenario": serde_json::to_value(&prepared.file).unwrap_or_default(),
        "overrides": {
            "seed": ov.seed,
            "dt": ov.dt,
            "tmax": ov.tmax,
        },
    })
}

pub fn cmd_simulate(prepared: &Prepared, out: &Path, ov: &Overrides) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = prepared.integrator;
    apply_integrator_overrides(&mut cfg, ov)?;

    let traj = propagate(&prepared.model, &prepared.init, &cfg)?;

    ensure_out_dir(out)?;
    let names: Vec<String> = prepared.observables.iter().map(|(n, _)| n.clone()).collect();
    let mut csv = CsvWriter::new(
        out.join(&prepared.file.outputs.trajectory),
        &state_header(prepared.model.dof(), &names),
    );
    for (t, state) in traj.times.iter().zip(&traj.states) {
        let mut row = state_values(*t, state);
        for (_, o) in &prepared.observables {
            row.push(gaussian_expectation(o, &state.alpha, &state.sigma));
        }
        csv.row(&row);
    }
    let csv_path = csv.finish()?;

    let snapshots = traj.to_snapshots();
    let mut summary = summary_base("simulate", prepared, ov);
    summary["invariants"] =
        snapshot_invariants(&snapshots, prepared.model.hbar(), cfg.nts_xi);
    summary["wall_time_s"] = start.elapsed().as_secs_f64().into();
    summary["outputs"] = serde_json::json!([csv_path.display().to_string()]);
    write_summary(&out.join(&prepared.file.outputs.summary), &summary)
}

pub fn cmd_ensemble(prepared: &Prepared, out: &Path, ov: &Overrides) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = prepared
        .ensemble
        .ok_or_else(|| CliError::Validation("scenario has no ensemble block".into()))?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(dt) = ov.dt {
        cfg.dt = dt;
    }
    if let Some(tmax) = ov.tmax {
        cfg.t_max = tmax;
    }
    cfg.validate()
        .map_err(|e| CliError::Validation(format!("ensemble: {e}")))?;

    let snapshots = run_ensemble(&prepared.model, &prepared.init, &cfg)?;

    ensure_out_dir(out)?;
    let d = prepared.model.dof();
    let n = 2 * d;
    // Mixture means of the canonical coordinates, then declared observables.
    let coordinate_polys: Vec<PolynomialObservable> = (0..n)
        .map(|a| {
            let mut idx = vec![0u8; n];
            idx[a] = 1;
            PolynomialObservable::new(n, [(idx, 1.0)]).expect("degree-1 monomial")
        })
        .collect();
    let mut header = vec!["t".to_string()];
    for i in 1..=d {
        header.push(format!("x{i}"));
    }
    for i in 1..=d {
        header.push(format!("p{i}"));
    }
    header.extend(prepared.observables.iter().map(|(n, _)| n.clone()));
    let mut csv = CsvWriter::new(out.join(&prepared.file.outputs.moments), &header);
    for snap in &snapshots {
        let mut row = vec![snap.time];
        for poly in &coordinate_polys {
            row.push(ehrenfest::ensemble::mixture_expectation(snap, poly));
        }
        for (_, o) in &prepared.observables {
            row.push(ehrenfest::ensemble::mixture_expectation(snap, o));
        }
        csv.row(&row);
    }
    let moments_path = csv.finish()?;
    let mut outputs = vec![moments_path.display().to_string()];

    if let Some(dump_name) = &prepared.file.outputs.trajectories {
        let mut header = vec!["traj".to_string()];
        header.extend(state_header(d, &[]));
        let mut dump = CsvWriter::new(out.join(dump_name), &header);
        for snap in &snapshots {
            for (i, comp) in snap.components.iter().enumerate() {
                let mut row = vec![i as f64];
                row.extend(state_values(snap.time, comp));
                dump.row(&row);
            }
        }
        outputs.push(dump.finish()?.display().to_string());
    }

    let mut summary = summary_base("ensemble", prepared, ov);
    summary["invariants"] = snapshot_invariants(
        &snapshots,
        prepared.model.hbar(),
        prepared.integrator.nts_xi,
    );
    summary["effective_seed"] = cfg.seed.into();
    summary["n_traj"] = (cfg.n_traj as u64).into();
    summary["wall_time_s"] = start.elapsed().as_secs_f64().into();
    summary["outputs"] = serde_json::json!(outputs);
    write_summary(&out.join(&prepared.file.outputs.summary), &summary)
}

pub fn cmd_decompose(prepared: &Prepared, out: &Path, ov: &Overrides) -> Result<(), CliError> {
    let start = Instant::now();
    if prepared.observables.is_empty() {
        return Err(CliError::Validation(
            "decompose needs a non-empty observables block".into(),
        ));
    }
    let mut cfg = prepared.integrator;
    apply_integrator_overrides(&mut cfg, ov)?;

    let traj = propagate(&prepared.model, &prepared.init, &cfg)?;
    let snapshots = traj.to_snapshots();

    ensure_out_dir(out)?;
    let mut header = vec!["t".to_string()];
    for (name, _) in &prepared.observables {
        header.push(format!("{name}_value"));
        header.push(format!("{name}_coherent"));
        header.push(format!("{name}_diffusive"));
        header.push(format!("{name}_total"));
    }
    let mut csv = CsvWriter::new(out.join(&prepared.file.outputs.rates), &header);
    for snap in &snapshots {
        let mut row = vec![snap.time];
        for (_, o) in &prepared.observables {
            let value = ehrenfest::ensemble::mixture_expectation(snap, o);
            let rate = mixture_rate(&prepared.model, snap, o, prepared.model.conventions())?;
            row.extend([value, rate.coherent, rate.diffusive, rate.total]);
        }
        csv.row(&row);
    }
    let rates_path = csv.finish()?;
    let mut outputs = vec![rates_path.display().to_string()];

    // Energy ledger for the model Hamiltonian, when it is polynomial.
    let mut energy_note = serde_json::Value::Null;
    match &prepared.energy_supported {
        Ok(()) => {
            let records = energy_balance(&prepared.model, &snapshots)?;
            let mut csv = CsvWriter::new(
                out.join(&prepared.file.outputs.energy),
                &["t".into(), "energy".into(), "work_rate".into(), "heat_rate".into()],
            );
            for r in &records {
                csv.row(&[r.time, r.energy, r.work_rate, r.heat_rate]);
            }
            outputs.push(csv.finish()?.display().to_string());
        }
        Err(reason) => {
            energy_note = serde_json::json!(reason);
        }
    }

    let mut summary = summary_base("decompose", prepared, ov);
    summary["invariants"] =
        snapshot_invariants(&snapshots, prepared.model.hbar(), cfg.nts_xi);
    summary["energy_balance"] = energy_note;
    summary["wall_time_s"] = start.elapsed().as_secs_f64().into();
    summary["outputs"] = serde_json::json!(outputs);
    write_summary(&out.join(&prepared.file.outputs.summary), &summary)
}

/// One self-check row: a named comparison with its tolerance.
struct Check {
    name: &'static str,
    worst: f64,
    tol: f64,
}

impl Check {
    fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

/// Hermetic benchmark: the exactly solvable model run three ways (full
/// diffusion, diffusion zeroed, closed form), with pass/fail gating at the
/// reference tolerance of 1e-3.
pub fn cmd_check(
    out: &Path,
    dt: Option<f64>,
    tmax: Option<f64>,
    lambda: Option<f64>,
    method: ehrenfest::Method,
) -> Result<bool, CliError> {
    let start = Instant::now();
    let lambda = lambda.unwrap_or(0.15);
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(CliError::Validation("lambda must be >= 0".into()));
    }
    let dt = dt.unwrap_or(0.02);
    let t_max = tmax.unwrap_or(10.0);
    let params = FreeParticleParams {
        m: 1.0,
        hbar: 1.0,
        lambda,
        x0: 0.0,
        p0: 1.0,
    };

    let build = |lam: f64| -> Result<LindbladModel, CliError> {
        let ps: std::collections::BTreeSet<String> =
            ["m", "c"].iter().map(|s| s.to_string()).collect();
        let h = ehrenfest::symbol::parse("p1^2/(2*m)", 1, &ps)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let lindblads = if lam > 0.0 {
            vec![ComplexSymbol::real(
                ehrenfest::symbol::parse("c*x1", 1, &ps)
                    .map_err(|e| CliError::Validation(e.to_string()))?,
            )]
        } else {
            vec![]
        };
        let mut b = ParamBindings::new();
        b.set("m", params.m).set("c", (2.0 * lam).sqrt());
        Ok(LindbladModel::new(1, params.hbar, h, lindblads, b, Default::default())?)
    };
    let quantum_model = build(lambda)?;
    let classical_model = build(0.0)?;

    // Admissibility is itself one of the reported checks, so the monitors
    // must not abort the run.
    let stride = (0.1 / dt).round().max(1.0) as usize;
    let cfg = IntegratorConfig {
        dt,
        t_max,
        method,
        uncertainty_policy: CheckPolicy::Ignore,
        nts_policy: CheckPolicy::Ignore,
        record_stride: stride,
        ..IntegratorConfig::default()
    };
    let init = GaussianComponent::coherent(
        PhasePoint::new(vec![params.x0, params.p0]).expect("finite"),
        params.hbar,
    );
    let quantum = propagate(&quantum_model, &init, &cfg)?;
    let classical = propagate(&classical_model, &init, &cfg)?;

    let x2_of = |s: &GaussianComponent| s.alpha.x(0).powi(2) + s.sigma.entries()[(0, 0)];

    let mut checks: Vec<Check> = Vec::new();
    let last = quantum.states.last().unwrap();
    let t_end = *quantum.times.last().unwrap();
    let exact_end = analytic_free_particle(&params, t_end);

    let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1e-300);
    checks.push(Check {
        name: "sigma_xx_final_vs_analytic",
        worst: rel(
            last.sigma.entries()[(0, 0)],
            exact_end.sigma.entries()[(0, 0)],
        ),
        tol: 1e-3,
    });
    checks.push(Check {
        name: "sigma_xp_final_vs_analytic",
        worst: if t_end > 0.0 {
            (last.sigma.entries()[(0, 1)] - exact_end.sigma.entries()[(0, 1)]).abs()
                / exact_end.sigma.entries()[(0, 1)].abs().max(1e-9)
        } else {
            0.0
        },
        tol: 1e-3,
    });
    checks.push(Check {
        name: "sigma_pp_constant",
        worst: quantum
            .states
            .iter()
            .map(|s| rel(s.sigma.entries()[(1, 1)], params.hbar / 2.0))
            .fold(0.0, f64::max),
        tol: 1e-3,
    });

    let mut worst_x2 = 0.0f64;
    let mut worst_gap = 0.0f64;
    let mut uncertainty_ok = true;
    for ((t, q), c) in quantum
        .times
        .iter()
        .zip(&quantum.states)
        .zip(&classical.states)
    {
        let exact = analytic_free_particle(&params, *t);
        let x2_exact = exact.alpha.x(0).powi(2) + exact.sigma.entries()[(0, 0)];
        worst_x2 = worst_x2.max((x2_of(q) - x2_exact).abs() / x2_exact.max(1e-9));
        worst_gap = worst_gap.max((x2_of(q) - x2_of(c) - 2.0 * params.hbar * lambda * t).abs());
        if !uncertainty_check(&q.sigma, params.hbar, 1e-9) {
            uncertainty_ok = false;
        }
    }
    checks.push(Check {
        name: "x2_vs_analytic",
        worst: worst_x2,
        tol: 1e-3,
    });
    checks.push(Check {
        name: "quantum_minus_classical_gap_vs_2hbar_lambda_t",
        worst: worst_gap,
        tol: 1e-3,
    });
    checks.push(Check {
        name: "uncertainty_along_path",
        worst: if uncertainty_ok { 0.0 } else { 1.0 },
        tol: 0.5,
    });

    ensure_out_dir(out)?;
    let mut series = CsvWriter::new(
        out.join("x2_series.csv"),
        &[
            "t".to_string(),
            "quantum".to_string(),
            "classical".to_string(),
            "analytic".to_string(),
        ],
    );
    for ((t, q), c) in quantum
        .times
        .iter()
        .zip(&quantum.states)
        .zip(&classical.states)
    {
        let exact = analytic_free_particle(&params, *t);
        series.row(&[
            *t,
            x2_of(q),
            x2_of(c),
            exact.alpha.x(0).powi(2) + exact.sigma.entries()[(0, 0)],
        ]);
    }
    let series_path = series.finish()?;

    let all_passed = checks.iter().all(Check::passed);
    for c in &checks {
        println!(
            "check {:<45} {}  worst={} tol={}",
            c.name,
            if c.passed() { "PASS" } else { "FAIL" },
            fmt_f64(c.worst),
            fmt_f64(c.tol),
        );
    }
    // Informational only: the xi = 1 squeezing margin goes negative on this
    // benchmark because the shear squeezes one principal direction.
    let min_nts_margin = quantum
        .states
        .iter()
        .map(|s| s.sigma.min_eigenvalue() - params.hbar / 2.0)
        .fold(f64::INFINITY, f64::min);
    println!(
        "check note: min (eig_min(sigma) - hbar/2) along path = {} (informational)",
        fmt_f64(min_nts_margin)
    );

    let report = serde_json::json!({
        "command": "check",
        "parameters": {
            "m": params.m, "hbar": params.hbar, "lambda": lambda,
            "x0": params.x0, "p0": params.p0, "dt": dt, "t_max": t_max,
            "method": match method {
                ehrenfest::Method::Rk4 => "rk4",
                ehrenfest::Method::Euler => "euler",
            },
        },
        "checks": checks.iter().map(|c| serde_json::json!({
            "name": c.name,
            "passed": c.passed(),
            "worst": c.worst,
            "tol": c.tol,
        })).collect::<Vec<_>>(),
        "min_nts_margin": min_nts_margin,
        "all_passed": all_passed,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "outputs": [series_path.display().to_string()],
    });
    write_summary(&out.join("check_report.json"), &report)?;
    Ok(all_passed)
}

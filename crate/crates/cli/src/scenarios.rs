//! One runner per scenario kind. Each writes its artifacts into the output
//! directory and returns a verdict with a JSON summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use mvjump::closed_forms::{
    consumption_objective, consumption_solution, consumption_value_and_objective, lq_cost,
    lq_feedback, lq_model, lq_value, riccati_solve, RiccatiCurves, TerminalUtility,
};
use mvjump::dynamics::{
    feynman_kac_density, simulate_particles, CoefficientModel, FeynmanKacConfig, LawTrajectory,
    SimulationConfig, SimulationResult,
};
use mvjump::fokker_planck::{
    check_characteristic_evolution, solve_fp, ConvergenceReport, FpConfig, FpSolution,
};
use mvjump::hjb::{
    estimate_performance, hjb_residual, hjbi_zero_sum_check, nash_check, ControlGrid,
    CylindricalValueFunction, EvalBox, OuterDerivatives, RunningCost,
};
use mvjump::jumps::JumpMeasure;
use mvjump::measures::{normal_pdf, GridDensity, GridSpec, LawView};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Config, Initial, Kind, Preset};

pub struct Verdict {
    pub pass: bool,
    pub details: Value,
}

type Pair = (f64, f64);

pub fn run(cfg: &Config, seed: u64, out: &Path) -> Result<Verdict> {
    match cfg.kind {
        Kind::Simulate => simulate(cfg, seed, out),
        Kind::SolveFp => solve_density(cfg, out),
        Kind::FeynmanKac => feynman_kac(cfg, seed, out),
        Kind::CheckCharacteristic => characteristic(cfg, seed, out),
        Kind::VerifyHjb => verify_hjb(cfg, out).map(|(v, _)| v),
        Kind::LqBenchmark => lq_benchmark(cfg, seed, out),
        Kind::ConsumptionBenchmark => consumption(cfg, out),
        Kind::VerifyHjbi => verify_hjbi(cfg, out),
        Kind::VerifyNash => verify_nash(cfg, out),
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = out.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn particle_run(cfg: &Config, seed: u64, model: &CoefficientModel) -> Result<SimulationResult> {
    let p = cfg.particles()?;
    let config = SimulationConfig {
        x0: p.x0.unwrap_or(0.0),
        particles: p.n,
        dt: p.dt.unwrap_or(cfg.horizon.dt),
        horizon: cfg.horizon.t,
        seed,
    };
    Ok(simulate_particles(
        model,
        &cfg.policy()?,
        &cfg.nu()?,
        &config,
    )?)
}

fn simulate(cfg: &Config, seed: u64, out: &Path) -> Result<Verdict> {
    let model = cfg.coefficients()?;
    let sim = particle_run(cfg, seed, &model)?;
    sim.write_summary_csv(create(out, "simulation.csv")?)?;
    sim.final_ensemble()
        .write_csv(create(out, "final_ensemble.csv")?)?;
    let last = sim.final_ensemble();
    Ok(Verdict {
        pass: true,
        details: json!({
            "steps": sim.times().len() - 1,
            "final_mean": last.mean(),
            "final_variance": last.variance(),
        }),
    })
}

fn density_solve(cfg: &Config) -> Result<(FpSolution, CoefficientModel, JumpMeasure)> {
    let model = cfg.coefficients()?;
    let nu = cfg.nu()?;
    let m0 = cfg.initial_density()?;
    let steps = (cfg.horizon.t / cfg.horizon.dt).round().max(1.0) as usize;
    let config = FpConfig {
        dt: cfg.horizon.dt,
        horizon: cfg.horizon.t,
        record_every: cfg.horizon.record_every.unwrap_or((steps / 10).max(1)),
    };
    let sol = solve_fp(&model, &nu, &m0, &cfg.policy()?, &config)?;
    Ok((sol, model, nu))
}

/// Exact final density for constant drift and volatility without jumps.
fn gaussian_reference(cfg: &Config, nu: &JumpMeasure) -> Option<(f64, f64)> {
    let m = cfg.model.as_ref()?;
    let (a, b) = (m.alpha.constant_value()?, m.beta.constant_value()?);
    let Some(Initial::Normal { mean, std }) = cfg.initial else {
        return None;
    };
    if !nu.is_zero() {
        return None;
    }
    let t = cfg.horizon.t;
    Some((mean + a * t, (std * std + b * b * t).sqrt()))
}

fn probes(cfg: &Config) -> Vec<f64> {
    cfg.probes
        .clone()
        .unwrap_or_else(|| vec![-2.0, -1.0, 0.0, 1.0, 2.0])
}

fn write_probes(out: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out, "probes.csv")?);
    w.write_record(["x", "density", "std_error"])?;
    for (x, d, se) in rows {
        w.write_record([x.to_string(), d.to_string(), se.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn solve_density(cfg: &Config, out: &Path) -> Result<Verdict> {
    let (sol, _, nu) = density_solve(cfg)?;
    sol.write_csv(create(out, "fp_solution.csv")?)?;
    let last = sol.final_density();
    let rows: Vec<_> = probes(cfg)
        .into_iter()
        .map(|x| (x, last.value_at(x), 0.0))
        .collect();
    write_probes(out, &rows)?;
    let reference = gaussian_reference(cfg, &nu);
    let report = ConvergenceReport {
        scenario: "solve_fp".into(),
        dx: last.grid().dx(),
        dt: sol.dt(),
        l1_error: reference.map(|(m, s)| last.l1_distance(|x| normal_pdf(x, m, s))),
        mass_drift: sol.max_mass_drift(),
    };
    let tol = &cfg.tolerances;
    let pass = report.l1_error.is_none_or(|e| e <= tol.l1) && report.mass_drift <= tol.mass;
    Ok(Verdict {
        pass,
        details: json!({
            "convergence": report,
            "reference": reference.map(|(m, s)| json!({"mean": m, "std": s})),
            "clipped_mass": sol.clipped_mass(),
        }),
    })
}

fn feynman_kac(cfg: &Config, seed: u64, out: &Path) -> Result<Verdict> {
    let (sol, model, nu) = density_solve(cfg)?;
    let p = cfg.particles()?;
    let law = LawTrajectory::from_densities(sol.times(), sol.densities())?;
    let config = FeynmanKacConfig {
        paths: p.n,
        dt: p.dt.unwrap_or(cfg.horizon.dt),
        seed,
        fd_step: None,
    };
    let policy = cfg.policy()?;
    let m0 = &sol.densities()[0];
    let tol = &cfg.tolerances;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut pass = true;
    for x in probes(cfg) {
        let est = feynman_kac_density(&model, &nu, m0, &law, &policy, x, cfg.horizon.t, &config)?;
        let fp = sol.final_density().value_at(x);
        let gap = (est.estimate - fp).abs();
        let band = tol.sigmas * est.std_error + tol.mc_slack;
        pass &= gap <= band;
        rows.push((x, est.estimate, est.std_error));
        checks.push(
            json!({"x": x, "estimate": est.estimate, "std_error": est.std_error,
                           "fp_density": fp, "gap": gap, "band": band}),
        );
    }
    write_probes(out, &rows)?;
    Ok(Verdict {
        pass,
        details: json!({ "probes": checks }),
    })
}

fn characteristic(cfg: &Config, seed: u64, out: &Path) -> Result<Verdict> {
    let model = cfg.coefficients()?;
    let sim = particle_run(cfg, seed, &model)?;
    let ys = cfg
        .probes
        .clone()
        .unwrap_or_else(|| (-10..=10).map(|k| k as f64 * 0.5).collect());
    let report = check_characteristic_evolution(
        &sim,
        &model,
        &cfg.nu()?,
        &cfg.policy()?,
        &ys,
        cfg.horizon.dt,
    )?;
    report.write_csv(create(out, "characteristic.csv")?)?;
    let slack = cfg.tolerances.characteristic_slack;
    Ok(Verdict {
        pass: report.passes(slack),
        details: json!({
            "h": report.h,
            "max_discrepancy": report.max_discrepancy,
            "failing": report.rows.iter().filter(|r| !r.within(slack)).collect::<Vec<_>>(),
        }),
    })
}

fn eval_box(
    cfg: &Config,
    default_grid: GridSpec,
    defaults: (usize, f64, usize, &[(f64, f64)]),
) -> Result<EvalBox> {
    let grid = match cfg.grid {
        Some(_) => cfg.grid()?,
        None => default_grid,
    };
    let (n_s, x_max, n_x, scenarios): (usize, f64, usize, Vec<(f64, f64)>) = match &cfg.eval {
        Some(e) => (
            e.n_s,
            e.x_max,
            e.n_x,
            e.scenarios.iter().map(|s| (s.mean, s.std)).collect(),
        ),
        None => (defaults.0, defaults.1, defaults.2, defaults.3.to_vec()),
    };
    let densities = scenarios
        .iter()
        .map(|&(m, s)| GridDensity::normal(grid, m, s))
        .collect::<mvjump::Result<Vec<_>>>()
        .context("invalid config at `eval.scenarios`")?;
    EvalBox::uniform(cfg.horizon.t, n_s, x_max, n_x, densities).context("invalid config at `eval`")
}

fn control_grid(cfg: &Config, lo: f64, hi: f64, n: usize) -> Result<ControlGrid> {
    let r = cfg.control.grid;
    let (lo, hi, n) = r.map_or((lo, hi, n), |r| (r.lo, r.hi, r.n));
    ControlGrid::uniform(lo, hi, n).context("invalid config at `control.grid`")
}

struct LqSetup {
    sigma: f64,
    model: CoefficientModel,
    nu: JumpMeasure,
    jump_second_moment: f64,
    curves: RiccatiCurves,
}

fn lq_setup(cfg: &Config) -> Result<LqSetup> {
    let sigma = match &cfg.model {
        None => 0.0,
        Some(m) => match (&m.alpha, &m.beta, &m.gamma) {
            (Preset::Lq { .. }, Preset::Lq { sigma }, Preset::Lq { .. }) => *sigma,
            _ => bail!("invalid config at `model`: kind {:?} needs the lq preset for alpha, beta and gamma", cfg.kind),
        },
    };
    let nu = cfg.nu()?;
    let jump_second_moment = if cfg.control.jump_corrected {
        nu.second_moment()
    } else {
        0.0
    };
    let mut curves = riccati_solve(sigma, jump_second_moment, cfg.horizon.t, cfg.horizon.dt)?;
    if cfg.control.k1_scale != 1.0 {
        curves = curves.scaled_k1(cfg.control.k1_scale);
    }
    Ok(LqSetup {
        sigma,
        model: lq_model(sigma)?,
        nu,
        jump_second_moment,
        curves,
    })
}

fn verify_hjb(cfg: &Config, out: &Path) -> Result<(Verdict, LqSetup)> {
    let lq = lq_setup(cfg)?;
    lq.curves.write_csv(create(out, "riccati.csv")?)?;
    let eval = eval_box(
        cfg,
        GridSpec::new(-8.0, 8.0, 0.02)?,
        (11, 2.0, 21, &[(0.0, 1.0), (1.0, 0.5), (-0.5, 0.8)]),
    )?;
    let report = hjb_residual(
        &lq_value(&lq.curves),
        &lq_cost(),
        &lq.model,
        &lq.nu,
        &control_grid(cfg, -4.0, 4.0, 1601)?,
        &eval,
        cfg.tolerances.hjb,
    )?;
    #[derive(Serialize)]
    struct Written<'a> {
        #[serde(flatten)]
        report: &'a mvjump::hjb::HjbReport,
        sigma: f64,
        jump_second_moment: f64,
        sigma_eff2: f64,
        k1_scale: f64,
    }
    let written = Written {
        report: &report,
        sigma: lq.sigma,
        jump_second_moment: lq.jump_second_moment,
        sigma_eff2: lq.curves.sigma_eff2(),
        k1_scale: cfg.control.k1_scale,
    };
    write_json(out, "hjb_report.json", &written)?;
    let details = serde_json::to_value(&written)?;
    Ok((
        Verdict {
            pass: report.pass,
            details,
        },
        lq,
    ))
}

fn lq_benchmark(cfg: &Config, seed: u64, out: &Path) -> Result<Verdict> {
    let (hjb, lq) = verify_hjb(cfg, out)?;
    let Some(p) = &cfg.particles else {
        return Ok(hjb);
    };
    let dt = p.dt.unwrap_or(cfg.horizon.dt);
    let x0 = p.x0.unwrap_or(1.0);
    let config = SimulationConfig {
        x0,
        particles: p.n,
        dt,
        horizon: cfg.horizon.t,
        seed,
    };
    let policy = lq_feedback(&lq.curves);
    let cost = lq_cost();
    let estimate = |delta: f64| {
        let pol = if delta == 0.0 {
            policy.clone()
        } else {
            policy.shifted(delta)
        };
        estimate_performance(&lq.model, &pol, &lq.nu, &cost, &config, p.replicates)
    };
    let base = estimate(0.0)?;
    let sigmas = cfg.tolerances.sigmas;
    let mut w = csv::Writer::from_writer(create(out, "performance.csv")?);
    w.write_record(["delta", "estimate", "std_error"])?;
    w.write_record([
        "0".into(),
        base.estimate.to_string(),
        base.std_error.to_string(),
    ])?;
    let mut dominance = true;
    let mut rows = Vec::new();
    for delta in cfg
        .control
        .deltas
        .clone()
        .unwrap_or_else(|| vec![0.1, 0.2, 0.5])
    {
        let other = estimate(delta)?;
        w.write_record([
            delta.to_string(),
            other.estimate.to_string(),
            other.std_error.to_string(),
        ])?;
        let se = base.std_error.hypot(other.std_error);
        let diff = base.estimate - other.estimate;
        dominance &= diff >= -sigmas * se;
        rows.push(json!({"delta": delta, "estimate": other.estimate, "std_error": other.std_error, "advantage": diff}));
    }
    w.flush()?;
    let [k1, k2, k3] = lq.curves.at(0.0)?;
    let phi0 = k1 * x0 * x0 + k2 * x0 * x0 + k3 * x0 * x0;
    let gap = (base.estimate - phi0).abs();
    let band = sigmas * base.std_error + 5.0 * dt;
    Ok(Verdict {
        pass: hjb.pass && dominance && gap <= band,
        details: json!({
            "hjb": hjb.details,
            "performance": {"estimate": base.estimate, "std_error": base.std_error,
                            "phi0": phi0, "gap": gap, "band": band},
            "perturbations": rows,
            "dominance": dominance,
        }),
    })
}

fn consumption(cfg: &Config, out: &Path) -> Result<Verdict> {
    let rho = match cfg.model.as_ref().map(|m| &m.alpha) {
        None => 0.0,
        Some(Preset::Consumption { rho, .. }) => *rho,
        Some(_) => bail!("invalid config at `model.alpha`: kind ConsumptionBenchmark needs the consumption preset"),
    };
    let theta = cfg.control.theta.unwrap_or(1.0);
    let x0 = cfg.particles.as_ref().and_then(|p| p.x0).unwrap_or(1.0);
    let dt = cfg.horizon.dt;
    let sol = consumption_solution(theta, cfg.horizon.t, move |_| rho, dt)?;
    let n = ((cfg.horizon.t / dt).round() as usize).clamp(1, 1000);
    sol.write_csv(create(out, "consumption.csv")?, n)?;
    let (value, objective) = consumption_value_and_objective(&sol, x0, dt)?;
    let mut better = true;
    let mut rows = Vec::new();
    for delta in cfg.control.deltas.clone().unwrap_or_else(|| vec![0.2]) {
        for f in [1.0 - delta, 1.0 + delta] {
            let j = consumption_objective(
                &sol,
                |t| f * sol.c_hat(t),
                x0,
                dt,
                TerminalUtility::Logarithmic,
            )?;
            better &= j < objective;
            rows.push(json!({"factor": f, "objective": j}));
        }
    }
    let gap = (objective - value).abs();
    Ok(Verdict {
        pass: gap <= cfg.tolerances.value && better,
        details: json!({
            "theta": theta, "rho": rho, "x0": x0,
            "k0": sol.k0(0.0), "k1": sol.k1(0.0), "c_hat": sol.c_hat(0.0),
            "value": value, "objective": objective, "gap": gap,
            "perturbations": rows,
        }),
    })
}

fn game_box(cfg: &Config) -> Result<EvalBox> {
    eval_box(
        cfg,
        GridSpec::new(-6.0, 6.0, 0.05)?,
        (6, 2.0, 11, &[(0.0, 1.0), (0.8, 0.6)]),
    )
}

fn drift_only<U: Copy + Default + Send + Sync + 'static>(
    alpha: impl Fn(f64, f64, U) -> f64 + Send + Sync + 'static,
) -> Result<CoefficientModel<U>> {
    Ok(CoefficientModel::new(
        move |t, x, _: &LawView, u| alpha(t, x, u),
        |_, _, _, _| 0.0,
        |_, _, _, _| 0.0,
    )?)
}

/// Zero-sum toy: `dX = (u1 - u2) dt`, `f = -u1^2/2 + u2^2/2 + (u1 - u2) x`,
/// `g = x^2/2`, value `x^2/2` and saddle `u1 = u2 = 2x`.
fn verify_hjbi(cfg: &Config, out: &Path) -> Result<Verdict> {
    let phi = CylindricalValueFunction::state_only(|_, x| OuterDerivatives {
        value: 0.5 * x * x,
        dx: x,
        dxx: 1.0,
        ..Default::default()
    });
    let cost = RunningCost::new(
        |_, x, _, u: Pair| -0.5 * u.0 * u.0 + 0.5 * u.1 * u.1 + (u.0 - u.1) * x,
        |x, _| 0.5 * x * x,
    );
    let grid = control_grid(cfg, -6.0, 6.0, 1201)?;
    let shift = cfg.control.shift;
    let report = hjbi_zero_sum_check(
        &phi,
        &cost,
        &drift_only(|_, _, u: Pair| u.0 - u.1)?,
        &cfg.nu()?,
        &grid,
        &grid,
        move |_, x, _| (2.0 * x + shift, 2.0 * x),
        &game_box(cfg)?,
        cfg.tolerances.hjb,
    )?;
    write_json(out, "hjbi_report.json", &report)?;
    Ok(Verdict {
        pass: report.pass,
        details: serde_json::to_value(&report)?,
    })
}

/// Decoupled two-player game: `dX = (u1 + u2) dt`, `f_i = -u_i^2/2`,
/// `g_i = -x^2/2`; both values are `k(s) x^2` with
/// `k(s) = -1 / (2 + 6 (T - s))` and `u_i = 2 k(s) x`.
fn verify_nash(cfg: &Config, out: &Path) -> Result<Verdict> {
    let horizon = cfg.horizon.t;
    let k = move |s: f64| -1.0 / (2.0 + 6.0 * (horizon - s));
    let phi = CylindricalValueFunction::state_only(move |s, x| OuterDerivatives {
        value: k(s) * x * x,
        ds: -6.0 * k(s) * k(s) * x * x,
        dx: 2.0 * k(s) * x,
        dxx: 2.0 * k(s),
        ..Default::default()
    });
    let cost1 = RunningCost::new(|_, _, _, u: Pair| -0.5 * u.0 * u.0, |x, _| -0.5 * x * x);
    let cost2 = RunningCost::new(|_, _, _, u: Pair| -0.5 * u.1 * u.1, |x, _| -0.5 * x * x);
    let grid = control_grid(cfg, -6.0, 6.0, 1201)?;
    let shift = cfg.control.shift;
    let report = nash_check(
        &phi,
        &phi,
        &cost1,
        &cost2,
        &drift_only(|_, _, u: Pair| u.0 + u.1)?,
        &cfg.nu()?,
        &grid,
        &grid,
        move |s, x, _| (2.0 * k(s) * x, 2.0 * k(s) * x + shift),
        &game_box(cfg)?,
        cfg.tolerances.hjb,
    )?;
    write_json(out, "nash_report.json", &report)?;
    Ok(Verdict {
        pass: report.pass,
        details: serde_json::to_value(&report)?,
    })
}

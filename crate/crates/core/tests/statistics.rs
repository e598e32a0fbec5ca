use mvjump::dynamics::{simulate_particles, CoefficientModel, ControlPolicy, SimulationConfig};
use mvjump::jumps::JumpMeasure;
use mvjump::measures::{
    density_from_ensemble, normal_pdf, silverman_bandwidth, EmpiricalEnsemble, GridSpec,
};
use mvjump::rng::{stream, StreamDomain};
use rand::Rng;
use rand_distr::StandardNormal;

fn normals(n: usize, seed: u64) -> EmpiricalEnsemble {
    let mut rng = stream(seed, StreamDomain::Particles, 0);
    EmpiricalEnsemble::new((0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn config(x0: f64, particles: usize, dt: f64, horizon: f64, seed: u64) -> SimulationConfig {
    SimulationConfig {
        x0,
        particles,
        dt,
        horizon,
        seed,
    }
}

#[test]
fn kde_of_normal_sample_is_close_in_l1() {
    let e = normals(100_000, 17);
    let grid = GridSpec::new(-6.0, 6.0, 0.02).unwrap();
    let h = silverman_bandwidth(&e).unwrap();
    let kde = density_from_ensemble(&e, grid, h).unwrap();
    let l1 = kde.l1_distance(|x| normal_pdf(x, 0.0, 1.0));
    assert!(l1 <= 0.05, "L1 = {l1}");
}

#[test]
fn empirical_characteristic_function_of_normals() {
    let n = 100_000;
    let e = normals(n, 5);
    let bound = 3.0 / (n as f64).sqrt();
    for y in [0.0, 0.5, 1.0, 2.0, 3.0] {
        let got = e.characteristic_function(y);
        let want = (-0.5 * y * y).exp();
        assert!(
            (got.re - want).abs() <= bound && got.im.abs() <= bound,
            "y = {y}: {got} vs {want}"
        );
    }
}

#[test]
fn compensated_poisson_counts() {
    // gamma = zeta with one atom at 1: X_T - x0 + lambda T counts the jumps.
    let (lambda, horizon, n) = (1.5, 2.0, 50_000);
    let model = CoefficientModel::new(
        |_, _, _, _: f64| 0.0,
        |_, _, _, _| 0.0,
        |_, _, _, zeta| zeta,
    )
    .unwrap();
    let nu = JumpMeasure::single(1.0, lambda).unwrap();
    let res = simulate_particles(
        &model,
        &ControlPolicy::constant(0.0),
        &nu,
        &config(0.0, n, 0.01, horizon, 8),
    )
    .unwrap();
    let counts: Vec<f64> = res
        .final_ensemble()
        .positions()
        .iter()
        .map(|x| x + lambda * horizon)
        .collect();
    assert!(counts.iter().all(|c| (c - c.round()).abs() < 1e-9));
    let mean = counts.iter().sum::<f64>() / n as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (lambda * horizon / n as f64).sqrt();
    assert!((mean - lambda * horizon).abs() <= 4.0 * se, "mean {mean}");
    assert!((var / (lambda * horizon) - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn driftless_jump_diffusion_is_a_martingale() {
    let model = CoefficientModel::new(
        |_, _, _, _: f64| 0.0,
        |_, _, _, _| 0.7,
        |_, _, _, zeta| zeta,
    )
    .unwrap();
    let nu = JumpMeasure::single(0.5, 3.0).unwrap();
    let n = 40_000;
    let res = simulate_particles(
        &model,
        &ControlPolicy::constant(0.0),
        &nu,
        &config(1.0, n, 0.01, 1.0, 21),
    )
    .unwrap();
    for e in res.ensembles().iter().step_by(20) {
        let se = (e.variance() / n as f64).sqrt().max(1e-12);
        assert!((e.mean() - 1.0).abs() <= 4.0 * se, "mean {}", e.mean());
    }
}

#[test]
fn same_seed_same_paths() {
    let model = CoefficientModel::new(
        |_, x, law: &mvjump::measures::LawView, _: f64| law.mean() - x,
        |_, _, _, _| 0.4,
        |_, _, _, zeta| zeta,
    )
    .unwrap();
    let nu = JumpMeasure::single(-0.3, 1.0).unwrap();
    let run = |seed| {
        simulate_particles(
            &model,
            &ControlPolicy::constant(0.0),
            &nu,
            &config(0.2, 500, 0.02, 1.0, seed),
        )
        .unwrap()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

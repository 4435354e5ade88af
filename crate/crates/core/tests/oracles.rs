//! Monte Carlo and quadrature oracles for the statistical parts of the lab.

mod common;

use std::f64::consts::PI;

use common::{gauss_hermite, se_axis, squashed_lag_table_2d, weighted_box_variance, TanhCovariance};
use homlab_core::calculus::SolveOptions;
use homlab_core::corrector::{divergence_identity_check, parameter_derivative_ratio, CorrectorSet};
use homlab_core::experiments::{cube_dictionary, fit_slope, localize_point, run_rate, LabConfig};
use homlab_core::field::{
    empirical_covariance, squash, squash_value, CoefficientParams, CoefficientSampler, CoefficientSet, CovarianceSpec,
    GaussianSynthesizer, ParameterField,
};
use homlab_core::grid::GridSpec;
use homlab_core::homog::{estimate_homogenized, gamma_field, gamma_l2_bound_check, homogenize_single, HomogenizedCoefficients};
use homlab_core::localize::{poincare_check, CubePartition};
use homlab_core::sgap::{coarse_lattice, gamma_variance_bridge, spectral_gap_test, Functional, GammaCubeFunctional, SgapConfig, DEFAULT_STEP};
use homlab_core::twoscale::{MacroFunction, U0Kind};
use homlab_core::ScalarField;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn raw_as_parameter(synth: &GaussianSynthesizer, seed: u64) -> ParameterField {
    let raw = synth.sample(seed);
    ParameterField { grid: raw.grid, cell: raw.cell, faces: raw.faces, seed }
}

#[test]
fn gauss_hermite_integrates_gaussian_moments() {
    let (x, w) = gauss_hermite(64);
    let moment = |p: i32| x.iter().zip(&w).map(|(x, w)| w * (2f64.sqrt() * x).powi(p)).sum::<f64>() / PI.sqrt();
    assert!((moment(0) - 1.0).abs() < 1e-13);
    assert!((moment(2) - 1.0).abs() < 1e-12);
    assert!((moment(4) - 3.0).abs() < 1e-11);
    let tc = TanhCovariance::new(1.0);
    assert!(tc.at(0.0).abs() < 1e-15);
    assert!(tc.at(0.5) < tc.at(1.0));
}

#[test]
fn lag_h_covariance_matches_wrapped_kernel() {
    let (eps, n) = (0.1, 64);
    let grid = GridSpec::unit(2, n).unwrap();
    let synth = GaussianSynthesizer::new(CovarianceSpec::squared_exponential(eps).unwrap(), &grid).unwrap();
    let samples: Vec<ParameterField> = (0..2000).map(|s| raw_as_parameter(&synth, 1000 + s)).collect();
    let lags = empirical_covariance(&samples, 1).unwrap();
    let h = 1.0 / n as f64;
    let oracle = se_axis(h, eps, 1.0) * se_axis(0.0, eps, 1.0);
    let c = &lags[1];
    assert!((c.covariance - oracle).abs() <= 3.0 * c.std_err, "lag h {} +- {} vs {oracle}", c.covariance, c.std_err);
}

#[test]
fn white_noise_has_no_lag_correlation() {
    let grid = GridSpec::unit(2, 32).unwrap();
    let synth = GaussianSynthesizer::from_modal_variances(&grid, vec![1.0; grid.cells()]).unwrap();
    let samples: Vec<ParameterField> = (0..200).map(|s| raw_as_parameter(&synth, s)).collect();
    let lags = empirical_covariance(&samples, 4).unwrap();
    assert!(lags[0].covariance > 0.0);
    for c in &lags[1..] {
        assert!(c.covariance.abs() <= 3.0 * c.std_err, "lag {}: {} +- {}", c.lag, c.covariance, c.std_err);
    }
}

#[test]
fn squashing_compresses_the_variance() {
    let (eps, n) = (0.1, 64);
    let grid = GridSpec::unit(2, n).unwrap();
    let synth = GaussianSynthesizer::new(CovarianceSpec::squared_exponential(eps).unwrap(), &grid).unwrap();
    let samples: Vec<ParameterField> = (0..400).map(|s| squash(&synth.sample(s))).collect();
    let c0 = &empirical_covariance(&samples, 0).unwrap()[0];
    let oracle = TanhCovariance::new(se_axis(0.0, eps, 1.0)).at(1.0);
    assert!(c0.covariance < 1.0);
    assert!((c0.covariance - oracle).abs() <= 3.0 * c0.std_err, "{} +- {} vs {oracle}", c0.covariance, c0.std_err);
}

#[test]
fn squash_of_ten() {
    let e = (-20.0f64).exp();
    let oracle = (1.0 - e) / (1.0 + e);
    assert!((squash_value(10.0) - oracle).abs() < 1e-16);
    assert!((squash_value(10.0) - 0.999_999_995_8).abs() < 1e-10);
}

#[test]
fn poincare_ratio_on_random_smooth_fields() {
    let n = 64;
    let grid = GridSpec::unit(2, n).unwrap();
    let part = CubePartition::new(&grid, 0.25).unwrap();
    let m = n / 4;
    // Smallest non-zero Neumann eigenvalue of the m-cell discrete Laplacian.
    let discrete = 1.0 / (2.0 * m as f64 * (PI / (2.0 * m as f64)).sin());
    let bound = 2f64.sqrt() / PI * 1.05;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let modes: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| (rng.gen_range(-4..=4) as f64, rng.gen_range(-4..=4) as f64, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let v = ScalarField::from_fn(&grid, |x| modes.iter().map(|(k1, k2, a, p)| a * (2.0 * PI * (k1 * x[0] + k2 * x[1]) + p).cos()).sum());
        let rep = poincare_check(&v, &part).unwrap();
        assert!(rep.holds);
        worst = worst.max(rep.max_ratio);
    }
    assert!(worst <= bound, "{worst} > {bound}");
    assert!(worst <= discrete * (1.0 + 1e-12), "{worst} > {discrete}");
}

fn desk_sampler(d: usize, n: usize, eps: f64, stream: u64) -> CoefficientSampler {
    let grid = GridSpec::unit(d, n).unwrap();
    CoefficientSampler::new(CovarianceSpec::squared_exponential(eps).unwrap(), &grid, CoefficientParams::minimal(d, 4.0, 0.5), 99, stream).unwrap()
}

#[test]
fn flux_and_gamma_means_are_consistent_with_the_ensemble() {
    let opts = SolveOptions::default();
    let sampler = desk_sampler(2, 64, 0.125, 1);
    let m = 16;
    let (hc, samples) = estimate_homogenized(&sampler, m, &opts).unwrap();
    let sd = |se: f64| se * (m as f64).sqrt() * (1.0 + 1.0 / m as f64).sqrt();
    let coef = sampler.sample(m).unwrap();
    let cols: Vec<Vec<f64>> = (0..2).map(|i| hc.column(i)).collect();
    let set = CorrectorSet::compute(&coef, Some(&cols), None, &opts).unwrap();
    for i in 0..2 {
        let q_mean = set.q_mean[i][i];
        assert!(q_mean.abs() <= 3.0 * sd(hc.a_std_err[i][i]), "q mean {q_mean}");
    }
    let gamma = gamma_field(&coef, &set, &hc.b_bar, sampler.seed(m)).unwrap();
    for i in 0..2 {
        let mean = gamma.gamma[i].mean();
        assert!(mean.abs() <= 3.0 * sd(hc.b_std_err[i]) + 1e-12, "gamma mean {mean}");
    }
    // Γ averaged over the ensemble itself is zero up to roundoff.
    let mut total = 0.0;
    for s in 0..m {
        let coef = sampler.sample(s).unwrap();
        let set = CorrectorSet::compute(&coef, Some(&cols), None, &opts).unwrap();
        total += gamma_field(&coef, &set, &hc.b_bar, 0).unwrap().gamma[0].mean();
    }
    assert!((total / m as f64).abs() < 1e-10);
    assert_eq!(samples.len(), m);
}

#[test]
fn divergence_identity_on_refined_random_sample() {
    let opts = SolveOptions::default();
    let mut res = Vec::new();
    for n in [64usize, 128] {
        let coef = desk_sampler(2, n, 0.125, 2).sample(0).unwrap();
        let set = CorrectorSet::compute(&coef, None, None, &opts).unwrap();
        let r = (0..2).map(|i| divergence_identity_check(&set.sigma[i], &set.q[i]).unwrap()).fold(0.0, f64::max);
        res.push(r);
    }
    assert!(res[1] <= 0.6 * res[0] || res[1] <= 1e-9, "{res:?}");
}

#[test]
fn laminate_drift_matches_quadrature() {
    let k = 0.5;
    let grid = GridSpec::unit(2, 256).unwrap();
    let coef = CoefficientSet::from_fns(
        &grid,
        |x| 2.0 + (2.0 * PI * x[0]).sin(),
        move |x| vec![k * (2.0 * PI * x[0]).sin(), 0.0],
        4.0,
        k,
        k * k + 1.0,
    )
    .unwrap();
    let hc = homogenize_single(&coef, &SolveOptions::default()).unwrap();
    let m = 20_000;
    let f = |x: f64| (2.0 * PI * x).sin() * 3f64.sqrt() / (2.0 + (2.0 * PI * x).sin());
    let oracle = k * (0..m).map(|j| f((j as f64 + 0.5) / m as f64)).sum::<f64>() / m as f64;
    assert!((hc.b_bar[0] - oracle).abs() <= 1e-3 * oracle.abs(), "{} vs {oracle}", hc.b_bar[0]);
    assert!(hc.b_bar[1].abs() < 1e-12);
}

#[test]
fn gamma_l2_ratio_respects_drift_bound() {
    let opts = SolveOptions::default();
    let sampler = desk_sampler(2, 64, 0.125, 3);
    let (hc, _) = estimate_homogenized(&sampler, 8, &opts).unwrap();
    let grid = *sampler.grid();
    let du0 = MacroFunction::of_kind(U0Kind::Sines, &grid, true).sample_gradient(&grid);
    let ensemble: Vec<_> = (0..8)
        .map(|s| {
            let coef = sampler.sample(s).unwrap();
            let set = CorrectorSet::compute(&coef, None, None, &opts).unwrap();
            gamma_field(&coef, &set, &hc.b_bar, sampler.seed(s)).unwrap()
        })
        .collect();
    let rep = gamma_l2_bound_check(&ensemble, &du0, 0.5).unwrap();
    assert!(rep.holds, "{:?} vs {}", rep.mean_ratio, rep.bound);
    assert!(rep.mean_ratio.iter().all(|&r| r > 0.0));
}

#[test]
fn derivative_ratio_is_moderate() {
    let opts = SolveOptions::default();
    let sampler = desk_sampler(2, 64, 0.125, 4);
    for s in 0..8 {
        let omega = sampler.parameter_field(s);
        let r = parameter_derivative_ratio(&omega, &sampler.params, &[0.5, 0.5], 0.125, 0, 1e-4, &opts).unwrap();
        assert!(r.is_finite() && r <= 10.0, "sample {s}: {r}");
    }
}

#[test]
fn fit_slope_interval_under_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 1000;
    let inside = (0..trials)
        .filter(|_| {
            let pts: Vec<(f64, f64)> = (1..=5)
                .map(|k| {
                    let e = 0.5f64.powi(k);
                    (e, e.powf(0.6) * (1.0 + rng.gen_range(-0.1..0.1)))
                })
                .collect();
            let s = fit_slope(&pts).unwrap().slope;
            (0.45..=0.75).contains(&s)
        })
        .count();
    assert!(inside as f64 >= 0.95 * trials as f64, "{inside}/{trials}");
}

#[test]
fn doubling_samples_shrinks_the_error_bar() {
    let base = LabConfig { d: 2, epsilons: vec![0.25, 0.125, 0.0625], homog_samples: 8, samples: 16, ..LabConfig::default() };
    let small = run_rate(&base).unwrap();
    let large = run_rate(&LabConfig { samples: 32, ..base }).unwrap();
    for (a, b) in small.points.iter().zip(&large.points) {
        let ratio = b.error.std_err / a.error.std_err;
        assert!((ratio - 0.5f64.sqrt()).abs() <= 0.25, "eps {}: ratio {ratio}", a.epsilon);
    }
}

/// Lattice points within `margin` cells of the cube `[lo, lo + side)^2`.
fn lattice_near_cube(grid: &GridSpec, spacing: usize, lo: [usize; 2], side: usize, margin: usize) -> (Vec<usize>, f64) {
    let n = grid.n() as isize;
    let (all, vol) = coarse_lattice(grid, spacing).unwrap();
    let near = |c: usize, l: usize| {
        let off = (c as isize - l as isize).rem_euclid(n);
        off < (side + margin) as isize || off >= n - margin as isize
    };
    let cells = all.into_iter().filter(|&lin| {
        let c = grid.coords(lin);
        near(c[0], lo[0]) && near(c[1], lo[1])
    });
    (cells.collect(), vol)
}

fn bridge_case(fixed_diffusion: Option<f64>, samples: usize, rhs_samples: usize) -> (homlab_core::sgap::BridgeReport, f64) {
    let eps = 1.0 / 16.0;
    let iota = 0.25;
    let cfg = LabConfig { d: 2, n: 128, epsilons: vec![eps], fixed_diffusion, samples, homog_samples: 8, iotas: Some(vec![iota]), ..LabConfig::default() };
    let hc = match fixed_diffusion {
        Some(a) => HomogenizedCoefficients::exact(vec![vec![a, 0.0], vec![0.0, a]], vec![0.0, 0.0]),
        None => homlab_core::experiments::homogenized_for(&cfg, 0).unwrap(),
    };
    let point = localize_point(&cfg, 0, Some(iota), &hc).unwrap();
    let cube = point.cubes.iter().max_by(|a, b| a.grad_energy.total_cmp(&b.grad_energy)).unwrap();
    let grid = cfg.grid_for(eps).unwrap();
    let part = CubePartition::new(&grid, iota).unwrap();
    let c = part.cube_coords(cube.cube);
    let side = part.m;
    let synth = GaussianSynthesizer::new(CovarianceSpec::squared_exponential(eps).unwrap(), &grid).unwrap();

    // Calibrate ρ on the cube-mean dictionary.
    let dict = cube_dictionary(&grid, 5).unwrap();
    let refs: Vec<&dyn Functional> = dict.iter().map(|f| f as &dyn Functional).collect();
    let (lattice, lattice_volume) = coarse_lattice(&grid, 4).unwrap();
    let base = SgapConfig { epsilon: eps, samples: 256, rhs_samples: 2, lattice, lattice_volume, t: DEFAULT_STEP, master_seed: 17, stream: 0 };
    let rho = spectral_gap_test(&refs, &synth, &base).unwrap().rho.unwrap();

    let f = GammaCubeFunctional {
        params: cfg.coefficient_params(),
        fixed_diffusion,
        b_bar: hc.b_bar.clone(),
        du0: MacroFunction::of_kind(U0Kind::Sines, &grid, true).sample_gradient(&grid),
        part,
        cube: cube.cube,
        t: None,
        opts: cfg.solve_options(),
    };
    let (lattice, lattice_volume) = lattice_near_cube(&grid, 4, [c[0] * side, c[1] * side], side, 8);
    let sc = SgapConfig { lattice, lattice_volume, rhs_samples, stream: 1, ..base };
    let variance = homlab_core::stats::Estimate { mean: cube.variance, std_err: cube.std_err, n: point.samples };
    (gamma_variance_bridge(variance, &f, &synth, &sc, rho).unwrap(), rho)
}

#[test]
fn bridge_with_constant_diffusion() {
    let (rep, rho) = bridge_case(Some(2.5), 128, 2);
    assert!(rep.holds && rep.ratio <= 1.0, "ratio {} (rho {rho}, var {:?}, bound {})", rep.ratio, rep.variance, rep.bound);
}

#[test]
fn bridge_with_random_diffusion() {
    let (rep, rho) = bridge_case(None, 64, 2);
    assert!(rep.holds, "ratio {} (rho {rho}, var {:?}, bound {})", rep.ratio, rep.variance, rep.bound);
}

#[test]
fn constant_diffusion_cube_variance_matches_quadrature_on_every_cube() {
    // Same reduction as the acceptance check, summed over all cubes.
    let eps = 1.0 / 16.0;
    let cfg = LabConfig { d: 2, n: 128, epsilons: vec![eps], fixed_diffusion: Some(2.5), samples: 200, iotas: Some(vec![0.5]), ..LabConfig::default() };
    let hc = HomogenizedCoefficients::exact(vec![vec![2.5, 0.0], vec![0.0, 2.5]], vec![0.0, 0.0]);
    let point = localize_point(&cfg, 0, Some(0.5), &hc).unwrap();
    let n = 128;
    let table = squashed_lag_table_2d(n, eps);
    let h = 1.0 / n as f64;
    let grid = GridSpec::unit(2, n).unwrap();
    let part = CubePartition::new(&grid, 0.5).unwrap();
    let (mut mc, mut se2, mut oracle) = (0.0, 0.0, 0.0);
    for cube in &point.cubes {
        let c = part.cube_coords(cube.cube);
        oracle += 0.25
            * weighted_box_variance(&table, n, c[0] * 64, c[1] * 64, 64, |i, j| {
                2.0 * PI * (2.0 * PI * (i as f64 + 0.5) * h).cos() * (2.0 * PI * (j as f64 + 0.5) * h).sin()
            });
        mc += cube.variance;
        se2 += cube.std_err * cube.std_err;
    }
    assert!((mc - oracle).abs() <= 3.0 * se2.sqrt(), "{mc} +- {} vs {oracle}", se2.sqrt());
}

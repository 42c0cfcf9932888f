mod common;

use common::{adaptive_simpson, decreasing};
use gpadapt::harness::{
    gen_data, make_truth, run_rate_study, smallball_nested, BaseFunction, DataSpec, SmallBallConfig, StudyConfig,
    TruthSpec,
};
use gpadapt::hyperprior::{projection_matrix, sample_orthogonal, HyperConfig, ProjectionMatrixR};
use gpadapt::inference::{ChainConfig, Family, SamplerMode, Schedule};
use gpadapt::likelihoods::{Link, ModelKind};
use gpadapt::metrics::{hellinger, norm_gx, norm_n, proj_distance, rho_gx, MatrixNorm};
use gpadapt::quadrature::{gauss_legendre, uniform_in_disc};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_projection(d: usize, rng: &mut ChaCha8Rng) -> ProjectionMatrixR {
    let mask: Vec<bool> = (0..d).map(|_| rng.random()).collect();
    projection_matrix(&mask, &sample_orthogonal(d, rng)).unwrap()
}

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn empirical_norm_is_a_metric(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, g, h) = (normals(n, &mut rng), normals(n, &mut rng), normals(n, &mut rng));
        prop_assert_eq!(norm_n(&f, &f).unwrap(), 0.0);
        prop_assert!((norm_n(&f, &g).unwrap() - norm_n(&g, &f).unwrap()).abs() <= 1e-15);
        prop_assert!(norm_n(&f, &h).unwrap() <= norm_n(&f, &g).unwrap() + norm_n(&g, &h).unwrap() + 1e-8);
    }

    #[test]
    fn hellinger_is_a_metric_and_ignores_node_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rule = gauss_legendre(40, 0.0, 1.0);
        let dens = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let (a, b) = (rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0);
            let raw: Vec<f64> = rule.scalar_nodes().iter().map(|u| (a * u - b * u * u).exp()).collect();
            let z: f64 = raw.iter().zip(&rule.weights).map(|(v, w)| v * w).sum();
            raw.iter().map(|v| v / z).collect()
        };
        let (g1, g2, g3) = (dens(&mut rng), dens(&mut rng), dens(&mut rng));
        let w = &rule.weights;
        prop_assert!(hellinger(&g1, &g1, w).unwrap() <= 1e-12);
        prop_assert!((hellinger(&g1, &g2, w).unwrap() - hellinger(&g2, &g1, w).unwrap()).abs() <= 1e-15);
        prop_assert!(hellinger(&g1, &g3, w).unwrap() <= hellinger(&g1, &g2, w).unwrap() + hellinger(&g2, &g3, w).unwrap() + 1e-8);
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.shuffle(&mut rng);
        let permute = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let shuffled = hellinger(&permute(&g1), &permute(&g2), &permute(w)).unwrap();
        prop_assert!((shuffled - hellinger(&g1, &g2, w).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn projection_distance_is_a_conjugation_invariant_metric(seed in any::<u64>(), d in 1usize..6, spectral in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = if spectral { MatrixNorm::Spectral } else { MatrixNorm::Frobenius };
        let (r1, r2, r3) = (random_projection(d, &mut rng), random_projection(d, &mut rng), random_projection(d, &mut rng));
        let dist = |a: &ProjectionMatrixR, b: &ProjectionMatrixR| proj_distance(a, b, norm).unwrap();
        prop_assert!(dist(&r1, &r1) <= 1e-12);
        prop_assert!((dist(&r1, &r2) - dist(&r2, &r1)).abs() <= 1e-12);
        prop_assert!(dist(&r1, &r3) <= dist(&r1, &r2) + dist(&r2, &r3) + 1e-8);
        let p = sample_orthogonal(d, &mut rng);
        let conj = |r: &ProjectionMatrixR| ProjectionMatrixR { matrix: p.transpose() * &r.matrix * &p, rank: r.rank };
        prop_assert!((dist(&conj(&r1), &conj(&r2)) - dist(&r1, &r2)).abs() <= 1e-10);
    }

    #[test]
    fn design_norm_satisfies_triangle_inequality_on_a_shared_sample(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..500).map(|_| uniform_in_disc(2, &mut rng)).collect();
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        let f = move |x: &[f64]| (a * x[0]).sin();
        let g = move |x: &[f64]| b * x[1];
        let h = |x: &[f64]| x[0] * x[1];
        let fg = norm_gx(&f, &g, &xs).unwrap().value;
        let gh = norm_gx(&g, &h, &xs).unwrap().value;
        let fh = norm_gx(&f, &h, &xs).unwrap().value;
        prop_assert!(fh <= fg + gh + 1e-8);
        prop_assert!(norm_gx(&f, &f, &xs).unwrap().value == 0.0);
    }
}

#[test]
fn conditional_hellinger_of_linear_tilt() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<Vec<f64>> = (0..200).map(|_| uniform_in_disc(2, &mut rng)).collect();
    let e1 = std::f64::consts::E - 1.0;
    let report = rho_gx(&|_, _| 1.0, &|_, u| u.exp() / e1, &xs, &gauss_legendre(64, 0.0, 1.0)).unwrap();
    let oracle = adaptive_simpson(&|u| (1.0 - (u.exp() / e1).sqrt()).powi(2), 0.0, 1.0, 1e-13).sqrt();
    assert!((report.value - oracle).abs() <= 1e-4, "{} vs {oracle}", report.value);
    assert!(report.mc_se.unwrap() <= 1e-12);
}

#[test]
fn kink_derivative_has_bounded_half_order_quotient() {
    let truth = make_truth(&TruthSpec::sparse(1.5, vec![true], BaseFunction::Kink).unwrap()).unwrap();
    let h = 1e-6;
    let deriv = |t: f64| (truth.value(&[t + h]) - truth.value(&[t - h])) / (2.0 * h);
    let grid: Vec<f64> = (0..=400).map(|i| -0.99 + 1.98 * i as f64 / 400.0).collect();
    let slopes: Vec<f64> = grid.iter().map(|&t| deriv(t)).collect();
    let mut sup = 0.0f64;
    for i in 0..grid.len() {
        for j in (i + 1)..grid.len() {
            sup = sup.max((slopes[i] - slopes[j]).abs() / (grid[j] - grid[i]).abs().sqrt());
        }
    }
    // Attained at s = -t: 1.5 · 2√t / √(2t) = 3/√2.
    assert!(sup <= 3.0 / 2f64.sqrt() + 1e-4, "{sup}");
    assert!(sup >= 2.0, "{sup}");
}

#[test]
fn balanced_labels_under_zero_truth() {
    let truth = make_truth(&TruthSpec::sparse(1.5, vec![true, false], BaseFunction::Zero).unwrap()).unwrap();
    for link in [Link::Logistic, Link::Probit] {
        let mut spec = DataSpec::new(ModelKind::Classification, 20_000);
        spec.link = link;
        let data = gen_data(&spec, &truth, 2).unwrap();
        let ones = data.y().iter().sum::<f64>() / data.n() as f64;
        assert!((ones - 0.5).abs() <= 3.0 * (0.25 / data.n() as f64).sqrt(), "{link:?}: {ones}");
    }
}

#[test]
fn simulation_is_reproducible() {
    let truth = make_truth(&TruthSpec::sparse(1.5, vec![true, true], BaseFunction::Smooth).unwrap()).unwrap();
    for kind in [ModelKind::RegRandom, ModelKind::Classification, ModelKind::Density, ModelKind::DensityRegression] {
        let spec = DataSpec::new(kind, 50);
        let a = gen_data(&spec, &truth, 3).unwrap();
        let b = gen_data(&spec, &truth, 3).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
        assert_ne!(a.x(), gen_data(&spec, &truth, 4).unwrap().x());
    }
}

#[test]
fn zero_truth_regression_errors_shrink() {
    let n_grid = vec![32, 64, 128, 256];
    let mut chain = ChainConfig::new(HyperConfig::with_defaults(2, false), Family::Selection, Schedule::new(400, None, 4).unwrap());
    chain.mode = SamplerMode::Marginal;
    let cfg = StudyConfig {
        data: DataSpec::new(ModelKind::RegRandom, 0),
        truth: TruthSpec::sparse(1.5, vec![true, false], BaseFunction::Zero).unwrap(),
        n_grid: n_grid.clone(),
        replicates: 3,
        chain,
        bootstrap: 200,
        seed: 5,
    };
    let report = run_rate_study(&cfg).unwrap();
    assert!(decreasing(&n_grid, &report.median_err), "{:?}", report.median_err);
    assert!(report.slope <= -0.25, "slope {}", report.slope);
}

#[test]
fn smallball_probabilities_grow_with_radius_and_shrink_with_grid() {
    let truths = [
        make_truth(&TruthSpec::sparse(1.5, vec![true, false], BaseFunction::Zero).unwrap()).unwrap(),
        make_truth(&TruthSpec::sparse(1.5, vec![true, true], BaseFunction::Smooth).unwrap()).unwrap(),
    ];
    let cfg = SmallBallConfig {
        hyper: HyperConfig::with_defaults(2, false),
        eps_grid: vec![0.1, 0.3, 1.0, 3.0],
        grid_size: 64,
        paths: 2000,
        seed: 6,
    };
    let est = smallball_nested(&truths, &cfg, &[8, 16, 64]).unwrap();
    for grid in &est {
        for curve in grid {
            assert!(curve.windows(2).all(|w| w[0].estimate <= w[1].estimate));
            assert!(curve.iter().all(|e| e.ci.0 <= e.estimate && e.estimate <= e.ci.1));
        }
    }
    for pair in est.windows(2) {
        for (coarse, fine) in pair[0].iter().zip(&pair[1]) {
            assert!(coarse.iter().zip(fine).all(|(c, f)| c.estimate >= f.estimate));
        }
    }
}

mod common;

use common::adaptive_simpson;
use gpadapt::gp::{build_gram, PointSet, ProjectionSpec};
use gpadapt::harness::{make_truth, BaseFunction, TruthSpec};
use gpadapt::likelihoods::{
    class_loglik, density_log_normalizer, denreg_loglik, normal_cdf, reg_loglik, reg_marginal_loglik, GStar, Link,
    ModelData, ModelKind, SigmaPrior,
};
use gpadapt::quadrature::{disc_quadrature, gauss_legendre, uniform_in_disc};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[test]
fn regression_loglik_is_sum_of_normal_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<Vec<f64>> = (0..5).map(|_| uniform_in_disc(2, &mut rng)).collect();
    let y: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
    let f: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
    let sigma = 0.7;
    let data = ModelData::regression(ModelKind::RegRandom, x, y.clone()).unwrap();
    let value = reg_loglik(&f, &data, sigma, &SigmaPrior::default()).unwrap();
    let oracle: f64 = y.iter().zip(&f).map(|(&yi, &fi)| normal_log_pdf(yi, fi, sigma)).sum();
    assert!((value - oracle).abs() <= 1e-10);
}

#[test]
fn two_point_marginal_matches_explicit_inverse() {
    let x = vec![vec![0.2, 0.1], vec![-0.4, 0.3]];
    let y = vec![0.5, -0.8];
    let sigma = 0.4;
    let data = ModelData::regression(ModelKind::RegRandom, x.clone(), y.clone()).unwrap();
    let spec = ProjectionSpec::new(1.7, vec![true, true], DMatrix::identity(2, 2), false).unwrap();
    let gram = build_gram(&PointSet::new(x, None).unwrap(), &spec).unwrap();
    let value = reg_marginal_loglik(&data, &gram, sigma).unwrap();
    let k = gram.matrix();
    let (a, b, c) = (k[(0, 0)] + sigma * sigma, k[(0, 1)], k[(1, 1)] + sigma * sigma);
    let det = a * c - b * b;
    let quad = (c * y[0] * y[0] - 2.0 * b * y[0] * y[1] + a * y[1] * y[1]) / det;
    let oracle = -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln();
    assert!((value - oracle).abs() <= 1e-10);
}

#[test]
fn empty_selection_marginal_is_rank_one_woodbury() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 7;
    let x: Vec<Vec<f64>> = (0..n).map(|_| uniform_in_disc(3, &mut rng)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let sigma = 0.6;
    let data = ModelData::regression(ModelKind::RegRandom, x.clone(), y.clone()).unwrap();
    let spec = ProjectionSpec::new(1.0, vec![false; 3], DMatrix::identity(3, 3), false).unwrap();
    let gram = build_gram(&PointSet::new(x, None).unwrap(), &spec).unwrap();
    let value = reg_marginal_loglik(&data, &gram, sigma).unwrap();
    let s2 = sigma * sigma;
    let nf = n as f64;
    let sum: f64 = y.iter().sum();
    let ss: f64 = y.iter().map(|v| v * v).sum();
    let quad = (ss - sum * sum / (s2 + nf)) / s2;
    let log_det = nf * s2.ln() + (1.0 + nf / s2).ln();
    let oracle = -0.5 * quad - 0.5 * log_det - 0.5 * nf * (2.0 * std::f64::consts::PI).ln();
    assert!((value - oracle).abs() <= 1e-8, "{value} vs {oracle}");
}

#[test]
fn probit_far_tail_follows_mills_ratio() {
    let data = ModelData::classification(vec![vec![0.0]], vec![1.0], Link::Probit).unwrap();
    let value = class_loglik(&[-10.0], &data).unwrap();
    assert!(value.is_finite());
    let x: f64 = 10.0;
    let mut series = 1.0;
    let mut term = 1.0;
    for k in 1..8 {
        term *= -((2 * k - 1) as f64) / (x * x);
        series += term;
    }
    let oracle = normal_log_pdf(x, 0.0, 1.0) - x.ln() + series.ln();
    assert!(((value - oracle) / oracle).abs() <= 1e-6, "{value} vs {oracle}");
    assert!((normal_cdf(-x).ln() - oracle).abs() / oracle.abs() <= 1e-6);
}

#[test]
fn linear_conditional_log_density_closed_form() {
    let y = 0.37;
    let data = ModelData::density_regression(vec![vec![0.1, -0.2]], vec![y], GStar::StdNormal, gauss_legendre(64, 0.0, 1.0))
        .unwrap();
    let u_nodes = data.quad().scalar_nodes();
    let big_g = normal_cdf(y);
    let value = denreg_loglik(&[big_g], &u_nodes, &data).unwrap();
    let oracle = normal_log_pdf(y, 0.0, 1.0) + big_g - (std::f64::consts::E - 1.0).ln();
    assert!((value - oracle).abs() <= 1e-12);
    let check = adaptive_simpson(&f64::exp, 0.0, 1.0, 1e-13);
    assert!((check - (std::f64::consts::E - 1.0)).abs() <= 1e-10);
}

#[test]
fn density_normalizers_are_stable_under_refinement() {
    for base in [BaseFunction::Smooth, BaseFunction::Kink] {
        let truth = make_truth(&TruthSpec::sparse(1.5, vec![true, true], base).unwrap()).unwrap();
        for seed in 0..4 {
            let values: Vec<f64> = [2048, 4096]
                .into_iter()
                .map(|m| {
                    let quad = disc_quadrature(2, m, &mut ChaCha8Rng::seed_from_u64(seed));
                    let fq: Vec<f64> = quad.nodes.iter().map(|z| truth.value(z)).collect();
                    let data = ModelData::density(vec![vec![0.0, 0.0]], GStar::UniformDisc, quad).unwrap();
                    density_log_normalizer(&fq, &data).unwrap()
                })
                .collect();
            assert!((values[0] - values[1]).abs() < 1e-4, "{base:?}, shift seed {seed}: {values:?}");
        }
    }
    let rule = |m| gauss_legendre(m, -1.0, 1.0);
    let one_d: Vec<f64> = [64, 128]
        .into_iter()
        .map(|m| {
            let q = rule(m);
            let fq: Vec<f64> = q.scalar_nodes().iter().map(|t| (3.0 * t).sin()).collect();
            let data = ModelData::density(vec![vec![0.0]], GStar::UniformDisc, q).unwrap();
            density_log_normalizer(&fq, &data).unwrap()
        })
        .collect();
    assert!((one_d[0] - one_d[1]).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn classification_loglik_is_concave(seed in any::<u64>(), probit in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let link = if probit { Link::Probit } else { Link::Logistic };
        let x: Vec<Vec<f64>> = (0..n).map(|_| uniform_in_disc(2, &mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
        let data = ModelData::classification(x, y, link).unwrap();
        let f: Vec<f64> = (0..n).map(|_| 4.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let h = 1e-3;
        let base = class_loglik(&f, &data).unwrap();
        for i in 0..n {
            let mut up = f.clone();
            let mut down = f.clone();
            up[i] += h;
            down[i] -= h;
            let second = (class_loglik(&up, &data).unwrap() - 2.0 * base + class_loglik(&down, &data).unwrap()) / (h * h);
            prop_assert!(second <= 1e-5, "coordinate {i}: {second}");
        }
    }

    #[test]
    fn regression_loglik_peaks_at_the_responses(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..4).map(|_| uniform_in_disc(1, &mut rng)).collect();
        let y: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let data = ModelData::regression(ModelKind::RegRandom, x, y.clone()).unwrap();
        let prior = SigmaPrior::default();
        let moved: Vec<f64> = y.iter().map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        prop_assert!(reg_loglik(&y, &data, 0.5, &prior).unwrap() >= reg_loglik(&moved, &data, 0.5, &prior).unwrap());
    }
}

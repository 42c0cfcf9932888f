//! Quadrature rules and point sets on the unit disc.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Nodes with positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Flattens a one-dimensional rule into its node values.
    pub fn scalar_nodes(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n[0]).collect()
    }
}

/// Lebesgue volume of the unit disc in `d` dimensions.
pub fn disc_volume(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    (half * std::f64::consts::PI.ln() - ln_gamma(half + 1.0)).exp()
}

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut out = 0.0;
    let mut scale = inv;
    while index > 0 {
        out += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    out
}

/// Halton point (indices start at 1) in `[0, 1)^d`.
pub fn halton(index: u64, d: usize) -> Vec<f64> {
    assert!(d <= PRIMES.len(), "Halton sequence supports at most {} dimensions", PRIMES.len());
    PRIMES[..d].iter().map(|&p| radical_inverse(index, p)).collect()
}

/// First `m` points of a (optionally shifted) Halton sequence on `[-1, 1]^d`
/// that fall inside the unit disc. The prefix property makes the sets nested
/// in `m`.
pub fn halton_disc(m: usize, d: usize, shift: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(m);
    let mut index = 1u64;
    while out.len() < m {
        let mut p = halton(index, d);
        index += 1;
        if let Some(shift) = shift {
            for (v, s) in p.iter_mut().zip(shift) {
                *v = (*v + s).fract();
            }
        }
        let x: Vec<f64> = p.iter().map(|v| 2.0 * v - 1.0).collect();
        if x.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            out.push(x);
        }
    }
    out
}

/// Gauss–Legendre rule with `m` nodes on `[lo, hi]`.
pub fn gauss_legendre(m: usize, lo: f64, hi: f64) -> Quadrature {
    assert!(m >= 1);
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    for i in 0..m.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (z * p1 - p0) / (z * z - 1.0);
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = mid - half * z;
        nodes[m - 1 - i] = mid + half * z;
        weights[i] = half * w;
        weights[m - 1 - i] = half * w;
    }
    Quadrature {
        nodes: nodes.into_iter().map(|v| vec![v]).collect(),
        weights,
    }
}

/// Quadrature over the unit disc with weights summing to its volume.
///
/// For `d = 1` the disc is `[-1, 1]` and a Gauss–Legendre rule is used. For
/// `d = 2` a polar product rule with at most `m` nodes: Gauss–Legendre in the
/// radius against `r dr`, times an equispaced angle grid turned by a random
/// offset. Otherwise a randomly shifted Halton set on the enclosing cube is
/// rejected to the disc and every node gets weight `vol / m`.
pub fn disc_quadrature<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Quadrature {
    match d {
        1 => gauss_legendre(m, -1.0, 1.0),
        2 => polar_disc(m, rng.random::<f64>()),
        _ => {
            let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let nodes = halton_disc(m, d, Some(&shift));
            let w = disc_volume(d) / m as f64;
            Quadrature {
                nodes,
                weights: vec![w; m],
            }
        }
    }
}

fn polar_disc(m: usize, turn: f64) -> Quadrature {
    let radial_count = ((m as f64 / 2.0).sqrt().floor() as usize).max(1);
    let angular_count = (m / radial_count).max(1);
    let step = std::f64::consts::TAU / angular_count as f64;
    let radial = gauss_legendre(radial_count, 0.0, 1.0);
    let mut nodes = Vec::with_capacity(radial_count * angular_count);
    let mut weights = Vec::with_capacity(radial_count * angular_count);
    for (r, w) in radial.scalar_nodes().into_iter().zip(&radial.weights) {
        for k in 0..angular_count {
            let angle = (turn + k as f64) * step;
            nodes.push(vec![r * angle.cos(), r * angle.sin()]);
            weights.push(w * r * step);
        }
    }
    Quadrature { nodes, weights }
}

/// Uniform draw from the unit disc.
pub fn uniform_in_disc<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius = rng.random::<f64>().powf(1.0 / d as f64);
    dir.into_iter().map(|v| v / norm * radius).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn disc_volumes() {
        assert!((disc_volume(1) - 2.0).abs() < 1e-12);
        assert!((disc_volume(2) - std::f64::consts::PI).abs() < 1e-12);
        assert!((disc_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre(8, 0.0, 1.0);
        assert!((rule.total_weight() - 1.0).abs() < 1e-14);
        let x7: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(x, w)| w * x[0].powi(7))
            .sum();
        assert!((x7 - 0.125).abs() < 1e-14);
        let rule = gauss_legendre(64, 0.0, 1.0);
        let e: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x[0].exp()).sum();
        assert!((e - (std::f64::consts::E - 1.0)).abs() < 1e-13);
        assert!(rule.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn halton_prefix_and_range() {
        assert_eq!(halton(1, 2), vec![0.5, 1.0 / 3.0]);
        let a = halton_disc(50, 3, None);
        let b = halton_disc(80, 3, None);
        assert_eq!(a[..], b[..50]);
        assert!(b.iter().all(|x| x.iter().map(|v| v * v).sum::<f64>() <= 1.0));
    }

    #[test]
    fn disc_quadrature_weights_sum_to_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..=4 {
            let q = disc_quadrature(d, 256, &mut rng);
            assert!(q.len() <= 256 && q.len() > 200);
            assert!((q.total_weight() - disc_volume(d)).abs() < 1e-10);
        }
    }

    #[test]
    fn polar_rule_is_exact_for_low_degree_polynomials() {
        let q = disc_quadrature(2, 512, &mut ChaCha8Rng::seed_from_u64(2));
        let integral = |f: &dyn Fn(&[f64]) -> f64| q.nodes.iter().zip(&q.weights).map(|(x, w)| w * f(x)).sum::<f64>();
        let pi = std::f64::consts::PI;
        assert!((integral(&|x| x[0] * x[0]) - pi / 4.0).abs() < 1e-13);
        assert!((integral(&|x| x[0].powi(2) * x[1].powi(2)) - pi / 24.0).abs() < 1e-13);
        assert!(integral(&|x| x[0] * x[1].powi(3)).abs() < 1e-13);
    }

    #[test]
    fn uniform_disc_second_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40_000;
        let m: f64 = (0..n)
            .map(|_| {
                let x = uniform_in_disc(2, &mut rng);
                x[0] * x[0]
            })
            .sum::<f64>()
            / n as f64;
        assert!((m - 0.25).abs() < 0.01);
    }
}

//! Prior on the rescale/select/rotate triple and utilities on the orthogonal group.
//!
//! `B` has iid Bernoulli(`p_b`) coordinates, `Q` is Haar on `O(d)` and, given
//! `B = b`, `A^m ~ Ga(a1, a2)` with `m = |b|` (plus one when the u-axis is
//! present). With nothing selected and no u-axis, `A` is pinned at 1.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gp::{orthogonality_defect, ProjectionSpec};

const PROJECTION_TOL: f64 = 1e-10;
const CAYLEY_RETRIES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperConfig {
    pub a1: f64,
    pub a2: f64,
    pub p_b: f64,
    pub d: usize,
    pub extra_axis: bool,
}

impl HyperConfig {
    pub fn new(a1: f64, a2: f64, p_b: f64, d: usize, extra_axis: bool) -> Result<Self> {
        let cfg = Self {
            a1,
            a2,
            p_b,
            d,
            extra_axis,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `a1 = 1`, `a2 = 1`, `p_b = 0.5`.
    pub fn with_defaults(d: usize, extra_axis: bool) -> Self {
        Self {
            a1: 1.0,
            a2: 1.0,
            p_b: 0.5,
            d,
            extra_axis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a1 >= 1.0 && self.a1.is_finite()) {
            return Err(Error::InvalidInput(format!("a1 = {} must be at least 1", self.a1)));
        }
        if !(self.a2 > 0.0 && self.a2.is_finite()) {
            return Err(Error::InvalidInput(format!("a2 = {} must be positive", self.a2)));
        }
        if !(self.p_b > 0.0 && self.p_b < 1.0) {
            return Err(Error::InvalidInput(format!(
                "inclusion probability {} must lie in (0, 1)",
                self.p_b
            )));
        }
        if self.d == 0 {
            return Err(Error::InvalidInput("input dimension must be positive".into()));
        }
        Ok(())
    }

    /// `m = |b| + [extra_axis]`.
    pub fn exponent(&self, active: usize) -> usize {
        active + usize::from(self.extra_axis)
    }

    /// `log π_B(b)`.
    pub fn log_mask_prior(&self, mask: &[bool]) -> f64 {
        mask.iter()
            .map(|&bit| if bit { self.p_b.ln() } else { (1.0 - self.p_b).ln() })
            .sum()
    }

    /// Log prior density of `(a, b)` (the Haar density of `q` is constant).
    pub fn log_prior(&self, spec: &ProjectionSpec) -> f64 {
        let m = self.exponent(spec.active());
        let log_a = if m == 0 {
            0.0
        } else {
            log_density_a(spec.a(), m, self.a1, self.a2).unwrap_or(f64::NEG_INFINITY)
        };
        self.log_mask_prior(spec.mask()) + log_a
    }
}

/// Symmetric idempotent `qᵀ·diag(b)·q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrixR {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
}

/// `a = S^{1/m}` with `S ~ Ga(a1, a2)` (rate parametrization).
pub fn sample_a<R: Rng + ?Sized>(m: usize, a1: f64, a2: f64, rng: &mut R) -> f64 {
    if m == 0 {
        return 1.0;
    }
    let gamma = Gamma::new(a1, 1.0 / a2).expect("validated gamma parameters");
    loop {
        let s: f64 = gamma.sample(rng);
        let a = s.powf(1.0 / m as f64);
        if a > 0.0 && a.is_finite() {
            return a;
        }
    }
}

pub fn sample_mask<R: Rng + ?Sized>(d: usize, p_b: f64, rng: &mut R) -> Vec<bool> {
    (0..d).map(|_| rng.random::<f64>() < p_b).collect()
}

/// Draws `(a, b, q)` from the hyperprior.
pub fn sample_hyper<R: Rng + ?Sized>(cfg: &HyperConfig, rng: &mut R) -> ProjectionSpec {
    let mask = sample_mask(cfg.d, cfg.p_b, rng);
    let q = sample_orthogonal(cfg.d, rng);
    let m = cfg.exponent(mask.iter().filter(|&&b| b).count());
    let a = sample_a(m, cfg.a1, cfg.a2, rng);
    ProjectionSpec::new(a, mask, q, cfg.extra_axis).expect("prior draws satisfy spec invariants")
}

/// Log density of `A` when `A^m ~ Ga(a1, a2)`:
/// `log m + a1·log a2 + (m·a1 - 1)·log a - a2·a^m - log Γ(a1)`.
pub fn log_density_a(a: f64, m: usize, a1: f64, a2: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!("rescale a = {a} must be positive")));
    }
    if m == 0 {
        return Err(Error::Domain("exponent m must be at least 1".into()));
    }
    let m = m as f64;
    Ok(m.ln() + a1 * a2.ln() + (m * a1 - 1.0) * a.ln() - a2 * a.powf(m) - ln_gamma(a1))
}

/// Haar-distributed draw from `O(d)`: QR of a Gaussian matrix with the signs
/// of `R`'s diagonal absorbed into `Q`.
pub fn sample_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(d >= 1);
    loop {
        let z = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = z.qr();
        let r = qr.r();
        if (0..d).any(|i| r[(i, i)] == 0.0) {
            continue;
        }
        let mut q = qr.q();
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        return q;
    }
}

/// `(I - S/2)⁻¹ (I + S/2)`; `None` when `I - S/2` is singular.
pub fn cayley(skew: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d = skew.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let half = skew * 0.5;
    let lhs = &eye - &half;
    let rhs = &eye + &half;
    lhs.lu().solve(&rhs)
}

fn random_skew<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let v: f64 = rng.sample(StandardNormal);
            s[(i, j)] = v;
            s[(j, i)] = -v;
        }
    }
    s
}

/// Symmetric random-walk proposal on `O(d)`: `q · cayley(step · S)` with `S`
/// skew-symmetric and standard-normal above the diagonal.
pub fn propose_rotation<R: Rng + ?Sized>(
    q: &DMatrix<f64>,
    step: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = q.nrows();
    for _ in 0..CAYLEY_RETRIES {
        let skew = random_skew(d, rng);
        if step == 0.0 {
            return Ok(q.clone());
        }
        if let Some(c) = cayley(&(skew * step)) {
            let proposal = q * c;
            return Ok(reorthonormalize(proposal));
        }
    }
    Err(Error::Numerical {
        message: format!("Cayley transform singular in {CAYLEY_RETRIES} attempts"),
        fvals: None,
    })
}

/// Snaps accumulated round-off back onto `O(d)` without changing the matrix
/// beyond that round-off.
pub(crate) fn reorthonormalize(q: DMatrix<f64>) -> DMatrix<f64> {
    if orthogonality_defect(&q) <= 1e-13 {
        return q;
    }
    let d = q.nrows();
    let qr = q.qr();
    let r = qr.r();
    let mut fixed = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            fixed.column_mut(j).neg_mut();
        }
    }
    fixed
}

/// `R = qᵀ·diag(b)·q`.
pub fn projection_matrix(mask: &[bool], q: &DMatrix<f64>) -> Result<ProjectionMatrixR> {
    let d = mask.len();
    if q.nrows() != d || q.ncols() != d {
        return Err(Error::InvalidInput(format!(
            "mask of length {d} with {}x{} rotation",
            q.nrows(),
            q.ncols()
        )));
    }
    let mut selected = q.clone();
    for (row, &bit) in mask.iter().enumerate() {
        if !bit {
            selected.row_mut(row).fill(0.0);
        }
    }
    let matrix = q.transpose() * selected;
    let rank = mask.iter().filter(|&&b| b).count();
    debug_assert!((&matrix * &matrix - &matrix).amax() <= PROJECTION_TOL * d as f64);
    Ok(ProjectionMatrixR { matrix, rank })
}

impl ProjectionMatrixR {
    pub fn from_spec(spec: &ProjectionSpec) -> Self {
        projection_matrix(spec.mask(), spec.q()).expect("spec dimensions agree")
    }

    /// Checks `R² = R`, `Rᵀ = R` and `tr R = rank`.
    pub fn check(&self) -> Result<()> {
        let sym = (&self.matrix - self.matrix.transpose()).amax();
        let idem = (&self.matrix * &self.matrix - &self.matrix).amax();
        let trace = (self.matrix.trace() - self.rank as f64).abs();
        if sym > 1e-12 || idem > PROJECTION_TOL || trace > PROJECTION_TOL {
            return Err(Error::Numerical {
                message: format!(
                    "projection defects: symmetry {sym:e}, idempotence {idem:e}, trace {trace:e}"
                ),
                fvals: None,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_mask_pins_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = HyperConfig::with_defaults(2, false);
        let mut seen = 0;
        for _ in 0..400 {
            let spec = sample_hyper(&cfg, &mut rng);
            if spec.active() == 0 {
                assert_eq!(spec.a(), 1.0);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn config_ranges() {
        assert!(HyperConfig::new(0.5, 1.0, 0.5, 2, false).is_err());
        assert!(HyperConfig::new(1.0, 0.0, 0.5, 2, false).is_err());
        assert!(HyperConfig::new(1.0, 1.0, 1.0, 2, false).is_err());
        assert!(HyperConfig::new(1.0, 1.0, 0.3, 2, true).is_ok());
    }

    #[test]
    fn density_of_a_with_unit_exponent_is_gamma() {
        let (a1, a2) = (2.5, 0.7);
        for &a in &[0.1, 1.0, 3.3] {
            let expected =
                a1 * f64::ln(a2) + (a1 - 1.0) * f64::ln(a) - a2 * a - ln_gamma(a1);
            assert!((log_density_a(a, 1, a1, a2).unwrap() - expected).abs() < 1e-12);
        }
        assert!(matches!(log_density_a(0.0, 1, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(log_density_a(-1.0, 2, 1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_step_rotation_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = sample_orthogonal(4, &mut rng);
        assert_eq!(propose_rotation(&q, 0.0, &mut rng).unwrap(), q);
    }

    #[test]
    fn rotation_proposals_stay_orthogonal_and_keep_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in 1..=5 {
            let q = sample_orthogonal(d, &mut rng);
            assert!(orthogonality_defect(&q) < 1e-10);
            for j in 0..d {
                assert!((q.column(j).norm() - 1.0).abs() < 1e-10);
            }
            let p = propose_rotation(&q, 0.8, &mut rng).unwrap();
            assert!(orthogonality_defect(&p) < 1e-10);
            assert!((p.determinant() - q.determinant()).abs() < 1e-8);
        }
    }

    #[test]
    fn projection_closed_forms() {
        let q = DMatrix::identity(3, 3);
        let r = projection_matrix(&[true, true, true], &q).unwrap();
        assert_eq!(r.matrix, DMatrix::identity(3, 3));
        let r = projection_matrix(&[false, false, false], &q).unwrap();
        assert_eq!(r.matrix, DMatrix::zeros(3, 3));
        assert_eq!(r.rank, 0);
        let r = projection_matrix(&[true, false, false], &q).unwrap();
        assert_eq!(r.matrix, DMatrix::from_diagonal(&nalgebra::dvector![1.0, 0.0, 0.0]));
        assert!(projection_matrix(&[true, false], &q).is_err());
    }

    #[test]
    fn sampled_specs_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in 1..=5 {
            for extra in [false, true] {
                let cfg = HyperConfig::new(1.5, 0.8, 0.4, d, extra).unwrap();
                for _ in 0..50 {
                    let spec = sample_hyper(&cfg, &mut rng);
                    assert!(orthogonality_defect(spec.q()) < 1e-10);
                    assert!(spec.a() > 0.0);
                    ProjectionMatrixR::from_spec(&spec).check().unwrap();
                    assert!(cfg.log_prior(&spec).is_finite());
                }
            }
        }
    }
}

//! Synthetic truths with known smoothness and intrinsic dimension, data
//! generation for the four models, empirical rate studies and prior
//! small-ball diagnostics.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::{build_gram, orthogonality_defect, sample_path, PointSet};
use crate::hyperprior::{projection_matrix, sample_hyper, HyperConfig, ProjectionMatrixR};
use crate::inference::{inclusion_probs, run_chain, Chain, ChainConfig, Snapshot};
use crate::likelihoods::{denreg_log_normalizers, density_log_normalizer, GStar, Link, ModelData, ModelKind};
use crate::metrics::{self, matrix_distance, norm_n, MatrixNorm};
use crate::quadrature::{disc_quadrature, gauss_legendre, halton_disc, uniform_in_disc};

const MIN_ENVELOPE_RATE: f64 = 1e-3;
const ENVELOPE_CHECK_AFTER: usize = 10_000;
const WILSON_Z: f64 = 1.959_963_984_540_054;
const MIN_SUCCESS: f64 = 0.8;

/// Base function `v0` on the reduced coordinates `t`, scaled so that its
/// supremum over the unit disc is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseFunction {
    Zero,
    /// `Σ_k |t_k|^α`: Hölder smoothness exactly `α` for non-even `α`.
    Kink,
    /// `Σ_k t_k²`.
    Square,
    /// `sin(2 Σ_k t_k / √k)`, analytic.
    Smooth,
}

impl BaseFunction {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseFunction::Zero => "zero",
            BaseFunction::Kink => "kink",
            BaseFunction::Square => "square",
            BaseFunction::Smooth => "smooth",
        }
    }
}

impl fmt::Display for BaseFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaseFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(BaseFunction::Zero),
            "kink" => Ok(BaseFunction::Kink),
            "square" => Ok(BaseFunction::Square),
            "smooth" => Ok(BaseFunction::Smooth),
            _ => Err(Error::Specification(format!("unknown base function '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TruthKind {
    /// `f0(x) = v0(x_b0)`.
    Sparse { mask: Vec<bool> },
    /// `f0(x) = v0((q0 x)_b0)`.
    Projected { mask: Vec<bool>, q: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthSpec {
    pub alpha: f64,
    pub kind: TruthKind,
    pub base: BaseFunction,
    /// Multiplier on `v0`; the supremum of `|f0|` equals `|scale|`.
    pub scale: f64,
}

impl TruthSpec {
    pub fn sparse(alpha: f64, mask: Vec<bool>, base: BaseFunction) -> Result<Self> {
        let spec = Self {
            alpha,
            kind: TruthKind::Sparse { mask },
            base,
            scale: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn projected(alpha: f64, mask: Vec<bool>, q: DMatrix<f64>, base: BaseFunction) -> Result<Self> {
        let spec = Self {
            alpha,
            kind: TruthKind::Projected { mask, q },
            base,
            scale: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Specification(format!("smoothness {} must be positive", self.alpha)));
        }
        if !self.scale.is_finite() {
            return Err(Error::Specification("truth scale must be finite".into()));
        }
        let mask = self.mask();
        if mask.is_empty() {
            return Err(Error::Specification("truth needs at least one ambient dimension".into()));
        }
        if let TruthKind::Projected { q, .. } = &self.kind {
            if self.alpha <= 1.0 {
                return Err(Error::Specification(format!(
                    "projected truths need smoothness above 1, got {}",
                    self.alpha
                )));
            }
            if q.nrows() != mask.len() || q.ncols() != mask.len() {
                return Err(Error::Specification(format!(
                    "truth rotation is {}x{} for d = {}",
                    q.nrows(),
                    q.ncols(),
                    mask.len()
                )));
            }
            let defect = orthogonality_defect(q);
            if defect > 1e-10 {
                return Err(Error::Specification(format!("truth rotation is not orthogonal ({defect:e})")));
            }
        }
        Ok(())
    }

    pub fn mask(&self) -> &[bool] {
        match &self.kind {
            TruthKind::Sparse { mask } | TruthKind::Projected { mask, .. } => mask,
        }
    }

    pub fn d(&self) -> usize {
        self.mask().len()
    }

    /// Number of active coordinates or rank of the explaining projection.
    pub fn d_active(&self) -> usize {
        self.mask().iter().filter(|&&b| b).count()
    }

    /// Projection onto the span the truth depends on.
    pub fn projection(&self) -> ProjectionMatrixR {
        let d = self.d();
        let q = match &self.kind {
            TruthKind::Sparse { .. } => DMatrix::identity(d, d),
            TruthKind::Projected { q, .. } => q.clone(),
        };
        projection_matrix(self.mask(), &q).expect("validated dimensions")
    }

    /// `-α / (2α + d_active)`, with one more dimension for density regression.
    pub fn theory_exponent(&self, kind: ModelKind) -> f64 {
        let extra = if kind.extra_axis() { 1.0 } else { 0.0 };
        -self.alpha / (2.0 * self.alpha + self.d_active() as f64 + extra)
    }
}

/// Orthogonal (Householder) matrix whose first row is `direction / ‖direction‖`.
pub fn rotation_to(direction: &[f64]) -> Result<DMatrix<f64>> {
    let d = direction.len();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if d == 0 || !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Specification("rotation target must be a nonzero vector".into()));
    }
    let mut v: Vec<f64> = direction.iter().map(|x| -x / norm).collect();
    v[0] += 1.0;
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let mut h = DMatrix::identity(d, d);
    if vv > 1e-30 {
        for i in 0..d {
            for j in 0..d {
                h[(i, j)] -= 2.0 * v[i] * v[j] / vv;
            }
        }
    }
    Ok(h)
}

/// Evaluable truth `f0` built from a [`TruthSpec`].
#[derive(Debug, Clone)]
pub struct Truth {
    spec: TruthSpec,
    active: Vec<usize>,
    norm: f64,
}

pub fn make_truth(spec: &TruthSpec) -> Result<Truth> {
    spec.validate()?;
    let active: Vec<usize> = spec.mask().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    let k = active.len().max(1) as f64;
    let norm = match spec.base {
        BaseFunction::Kink => k.powf(1.0 - spec.alpha / 2.0).max(1.0),
        _ => 1.0,
    };
    Ok(Truth {
        spec: spec.clone(),
        active,
        norm,
    })
}

impl Truth {
    pub fn spec(&self) -> &TruthSpec {
        &self.spec
    }

    /// Reduced coordinates `t` the truth depends on.
    pub fn reduced(&self, x: &[f64]) -> Vec<f64> {
        match &self.spec.kind {
            TruthKind::Sparse { .. } => self.active.iter().map(|&i| x[i]).collect(),
            TruthKind::Projected { q, .. } => self
                .active
                .iter()
                .map(|&i| q.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    /// `v0(t)` without the scale.
    pub fn base_value(&self, t: &[f64]) -> f64 {
        match self.spec.base {
            BaseFunction::Zero => 0.0,
            BaseFunction::Kink => t.iter().map(|v| v.abs().powf(self.spec.alpha)).sum::<f64>() / self.norm,
            BaseFunction::Square => t.iter().map(|v| v * v).sum(),
            BaseFunction::Smooth => {
                if t.is_empty() {
                    0.0
                } else {
                    (2.0 * t.iter().sum::<f64>() / (t.len() as f64).sqrt()).sin()
                }
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.spec.scale * self.base_value(&self.reduced(x))
    }

    /// Density-regression truth `f0(x, u) = f0(x)·(2u - 1)`.
    pub fn value_joint(&self, x: &[f64], u: f64) -> f64 {
        self.value(x) * (2.0 * u - 1.0)
    }

    /// Upper bound on `|f0|` over the disc.
    pub fn sup_bound(&self) -> f64 {
        if self.spec.base == BaseFunction::Zero {
            0.0
        } else {
            self.spec.scale.abs()
        }
    }
}

/// How to simulate one data set.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub kind: ModelKind,
    pub n: usize,
    /// Noise standard deviation for regression.
    pub noise: f64,
    pub link: Link,
    pub gstar: GStar,
    /// Density quadrature size on the disc.
    pub density_nodes: usize,
    /// Gauss–Legendre size on `[0, 1]` for density regression.
    pub u_nodes: usize,
}

impl DataSpec {
    pub fn new(kind: ModelKind, n: usize) -> Self {
        Self {
            kind,
            n,
            noise: 0.1,
            link: Link::default(),
            gstar: GStar::default_for(kind),
            density_nodes: 2048,
            u_nodes: 64,
        }
    }
}

/// Design points: a low-discrepancy set in the disc for fixed-design
/// regression, uniform draws on the disc otherwise.
pub fn design_points<R: Rng + ?Sized>(kind: ModelKind, n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    match kind {
        ModelKind::RegFixed => halton_disc(n, d, None),
        _ => (0..n).map(|_| uniform_in_disc(d, rng)).collect(),
    }
}

fn sample_gstar<R: Rng + ?Sized>(gstar: GStar, d: usize, rng: &mut R) -> (Vec<f64>, usize) {
    match gstar {
        GStar::UniformDisc => (uniform_in_disc(d, rng), 1),
        GStar::StdNormal => {
            let mut tries = 0;
            loop {
                tries += 1;
                let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                if x.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    return (x, tries);
                }
            }
        }
    }
}

/// Simulates a data set from `truth`; deterministic given `seed`.
pub fn gen_data(spec: &DataSpec, truth: &Truth, seed: u64) -> Result<ModelData> {
    if spec.n == 0 {
        return Err(Error::InvalidInput("sample size must be positive".into()));
    }
    let d = truth.spec().d();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.kind {
        ModelKind::RegFixed | ModelKind::RegRandom => {
            if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
                return Err(Error::InvalidInput(format!("noise level {} must be nonnegative", spec.noise)));
            }
            let x = design_points(spec.kind, spec.n, d, &mut rng);
            let y = x
                .iter()
                .map(|xi| truth.value(xi) + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            ModelData::regression(spec.kind, x, y)
        }
        ModelKind::Classification => {
            let x = design_points(spec.kind, spec.n, d, &mut rng);
            let y = x
                .iter()
                .map(|xi| f64::from(u8::from(rng.random::<f64>() < spec.link.cdf(truth.value(xi)))))
                .collect();
            ModelData::classification(x, y, spec.link)
        }
        ModelKind::Density => {
            let bound = truth.sup_bound();
            let mut x = Vec::with_capacity(spec.n);
            let mut proposals = 0usize;
            while x.len() < spec.n {
                let (cand, tries) = sample_gstar(spec.gstar, d, &mut rng);
                proposals += tries;
                if rng.random::<f64>().ln() < truth.value(&cand) - bound {
                    x.push(cand);
                }
                if proposals >= ENVELOPE_CHECK_AFTER {
                    let rate = x.len() as f64 / proposals as f64;
                    if rate < MIN_ENVELOPE_RATE {
                        return Err(Error::Envelope { rate, proposals });
                    }
                }
            }
            let quad = disc_quadrature(d, spec.density_nodes, &mut rng);
            ModelData::density(x, spec.gstar, quad)
        }
        ModelKind::DensityRegression => {
            let x: Vec<Vec<f64>> = (0..spec.n).map(|_| uniform_in_disc(d, &mut rng)).collect();
            let y = x
                .iter()
                .map(|xi| {
                    let u = sample_u(truth, xi, &mut rng);
                    spec.gstar.quantile(u)
                })
                .collect::<Result<Vec<f64>>>()?;
            ModelData::density_regression(x, y, spec.gstar, gauss_legendre(spec.u_nodes, 0.0, 1.0))
        }
    }
}

/// Cells of the fine u-grid used for inverse-CDF sampling.
const U_CELLS: usize = 1024;

/// Draw from the density on `[0, 1]` proportional to `exp(f0(x, u))`,
/// piecewise constant on a uniform grid of cells (exact when `f0` does not
/// depend on `u`).
fn sample_u<R: Rng + ?Sized>(truth: &Truth, x: &[f64], rng: &mut R) -> f64 {
    let h = 1.0 / U_CELLS as f64;
    let logs: Vec<f64> = (0..U_CELLS).map(|j| truth.value_joint(x, (j as f64 + 0.5) * h)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cdf = Vec::with_capacity(U_CELLS);
    let mut acc = 0.0;
    for l in &logs {
        acc += (l - max).exp();
        cdf.push(acc);
    }
    let target = rng.random::<f64>() * acc;
    let cell = cdf.partition_point(|&c| c <= target).min(U_CELLS - 1);
    let u = (cell as f64 + rng.random::<f64>()) * h;
    u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// Distance from posterior latent values to the truth in the metric that
/// matches the model kind.
#[derive(Debug, Clone)]
pub struct DistanceOracle {
    kind: ModelKind,
    n: usize,
    reference: Vec<f64>,
    weights: Vec<f64>,
    log_gstar_quad: Vec<f64>,
}

impl DistanceOracle {
    pub fn new(data: &ModelData, truth: &Truth) -> Result<Self> {
        if data.d() != truth.spec().d() {
            return Err(Error::InvalidInput("truth and data dimensions differ".into()));
        }
        let n = data.n();
        let quad = data.quad();
        let (reference, log_gstar_quad) = match data.kind() {
            ModelKind::RegFixed | ModelKind::RegRandom | ModelKind::Classification => {
                (data.x().iter().map(|x| truth.value(x)).collect(), Vec::new())
            }
            ModelKind::Density => {
                let lg: Vec<f64> = quad.nodes.iter().map(|z| data.gstar().log_pdf(z)).collect();
                let f0: Vec<f64> = quad.nodes.iter().map(|z| truth.value(z)).collect();
                let log_norm = density_log_normalizer(&f0, data)?;
                let g0 = f0.iter().zip(&lg).map(|(f, l)| (f + l - log_norm).exp()).collect();
                (g0, lg)
            }
            ModelKind::DensityRegression => {
                let us = quad.scalar_nodes();
                let f0: Vec<f64> = data
                    .x()
                    .iter()
                    .flat_map(|x| us.iter().map(move |&u| truth.value_joint(x, u)))
                    .collect();
                (conditional_densities(&f0, &quad.weights), Vec::new())
            }
        };
        Ok(Self {
            kind: data.kind(),
            n,
            reference,
            weights: quad.weights.clone(),
            log_gstar_quad,
        })
    }

    pub fn metric_name(&self) -> &'static str {
        match self.kind {
            ModelKind::RegFixed => "norm_n",
            ModelKind::RegRandom | ModelKind::Classification => "L2(G_x)",
            ModelKind::Density => "hellinger",
            ModelKind::DensityRegression => "rho(G_x)",
        }
    }

    /// Distance of latent values at the chain's sites to the truth. Design
    /// law integrals are averaged over the observed design points.
    pub fn distance(&self, fvals: &[f64]) -> Result<f64> {
        let n = self.n;
        if fvals.len() < n {
            return Err(Error::InvalidInput(format!("{} latent values for {n} observations", fvals.len())));
        }
        match self.kind {
            ModelKind::RegFixed | ModelKind::RegRandom | ModelKind::Classification => {
                norm_n(&fvals[..n], &self.reference)
            }
            ModelKind::Density => {
                let fq = &fvals[n..];
                if fq.len() != self.weights.len() {
                    return Err(Error::InvalidInput("latent values do not cover the quadrature".into()));
                }
                let log_norm = log_sum(fq.iter().zip(&self.log_gstar_quad).map(|(f, l)| f + l), &self.weights);
                let g: Vec<f64> = fq
                    .iter()
                    .zip(&self.log_gstar_quad)
                    .map(|(f, l)| (f + l - log_norm).exp())
                    .collect();
                metrics::hellinger(&g, &self.reference, &self.weights)
            }
            ModelKind::DensityRegression => {
                let m = self.weights.len();
                let grid = &fvals[n..];
                if grid.len() != n * m {
                    return Err(Error::InvalidInput("latent values do not cover the u-grid".into()));
                }
                let p = conditional_densities(grid, &self.weights);
                let mut total = 0.0;
                for i in 0..n {
                    let rows = i * m..(i + 1) * m;
                    total += metrics::hellinger_sq(&p[rows.clone()], &self.reference[rows], &self.weights)?;
                }
                Ok((total / n as f64).sqrt())
            }
        }
    }
}

fn log_sum(logs: impl Iterator<Item = f64>, weights: &[f64]) -> f64 {
    let logs: Vec<f64> = logs.collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logs.iter().zip(weights).map(|(l, w)| w * (l - max).exp()).sum::<f64>().ln()
}

/// Row-normalized `exp(f)` on the u-grid.
fn conditional_densities(fvals_grid: &[f64], weights: &[f64]) -> Vec<f64> {
    let m = weights.len();
    let norms = denreg_log_normalizers(fvals_grid, weights);
    fvals_grid
        .iter()
        .enumerate()
        .map(|(k, f)| (f - norms[k / m]).exp())
        .collect()
}

/// Stable 64-bit seed for a cell of a study.
pub fn derive_seed(master: u64, n: u64, replicate: u64, stream: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    [n, replicate, stream].iter().fold(mix(master), |h, &v| mix(h ^ mix(v)))
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    /// Data template; `n` is overwritten per grid cell.
    pub data: DataSpec,
    pub truth: TruthSpec,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub chain: ChainConfig,
    pub bootstrap: usize,
    pub seed: u64,
}

impl StudyConfig {
    /// Pins the selection mask to all ones (ablation of variable selection).
    pub fn pin_all_ones(&mut self) {
        self.chain.moves.b = false;
        self.chain.initial_spec = None;
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) || self.n_grid[0] == 0 {
            return Err(Error::Configuration("n grid must be nonempty, positive and strictly increasing".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Configuration("at least one replicate is required".into()));
        }
        if self.chain.hyper.d != self.truth.d() {
            return Err(Error::Configuration(format!(
                "prior dimension {} differs from truth dimension {}",
                self.chain.hyper.d,
                self.truth.d()
            )));
        }
        if self.chain.hyper.extra_axis != self.data.kind.extra_axis() {
            return Err(Error::Configuration(format!(
                "{} needs extra_axis = {}",
                self.data.kind,
                self.data.kind.extra_axis()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    /// Posterior median of the distance to the truth.
    pub median_err: f64,
    /// Posterior 0.9-quantile of the distance.
    pub q90_err: f64,
    /// Posterior median of `distance + |σ - σ0|` (regression only).
    pub median_joint: Option<f64>,
    /// Posterior mean Frobenius distance between the sampled and true projections.
    pub proj_err: f64,
    pub inclusion: Vec<f64>,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub n: usize,
    pub replicate: usize,
    pub data_seed: u64,
    pub chain_seed: u64,
    pub outcome: std::result::Result<CellSummary, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub kind: ModelKind,
    pub metric: String,
    pub n_grid: Vec<usize>,
    /// Per `n`: median over replicates of the posterior median distance.
    pub median_err: Vec<f64>,
    /// Per `n`: median over replicates of the posterior 0.9-quantile.
    pub q90_err: Vec<f64>,
    pub joint_median_err: Option<Vec<f64>>,
    /// Per `n`: replicate mean of the posterior mean projection distance.
    pub proj_err: Vec<f64>,
    /// Per `n`: replicate mean of the inclusion probabilities.
    pub inclusion: Vec<Vec<f64>>,
    /// Least-squares slope of log median error against log n.
    pub slope: f64,
    /// 95% bootstrap interval of the slope over replicates.
    pub slope_ci: (f64, f64),
    pub theory_exponent: f64,
    pub success_rate: f64,
    pub cells: Vec<CellReport>,
}

impl RateReport {
    /// Successful replicate summaries at grid index `i`.
    pub fn successes_at(&self, i: usize) -> Vec<&CellSummary> {
        let n = self.n_grid[i];
        self.cells
            .iter()
            .filter(|c| c.n == n)
            .filter_map(|c| c.outcome.as_ref().ok())
            .collect()
    }

    /// Per-replicate posterior medians, indexed `[replicate][grid index]`;
    /// failed cells are `None`.
    pub fn replicate_curves(&self, replicates: usize) -> Vec<Vec<Option<f64>>> {
        let mut out = vec![vec![None; self.n_grid.len()]; replicates];
        for c in &self.cells {
            if let (Ok(s), Some(i)) = (&c.outcome, self.n_grid.iter().position(|&n| n == c.n)) {
                out[c.replicate][i] = Some(s.median_err);
            }
        }
        out
    }
}

/// Distances of every post-burn-in snapshot to the truth.
pub fn posterior_distances(chain: &Chain, oracle: &DistanceOracle) -> Result<Vec<f64>> {
    chain.posterior().map(|s| oracle.distance(&s.fvals)).collect()
}

fn summarize_cell(chain: &Chain, oracle: &DistanceOracle, truth: &TruthSpec, noise: Option<f64>) -> Result<CellSummary> {
    let post: Vec<&Snapshot> = chain.posterior().collect();
    if post.is_empty() {
        return Err(Error::Domain("no snapshots after burn-in".into()));
    }
    let dist = posterior_distances(chain, oracle)?;
    let joint = noise.map(|s0| {
        post.iter()
            .zip(&dist)
            .map(|(s, d)| d + (s.sigma.unwrap_or(s0) - s0).abs())
            .collect::<Vec<f64>>()
    });
    let r0 = truth.projection();
    let proj: f64 = post
        .iter()
        .map(|s| {
            let r = projection_matrix(s.spec.mask(), s.spec.q())?;
            matrix_distance(&r.matrix, &r0.matrix, MatrixNorm::Frobenius)
        })
        .sum::<Result<f64>>()?
        / post.len() as f64;
    Ok(CellSummary {
        median_err: metrics::median(&dist)?,
        q90_err: metrics::quantile(&dist, 0.9)?,
        median_joint: joint.map(|j| metrics::median(&j)).transpose()?,
        proj_err: proj,
        inclusion: inclusion_probs(chain)?,
        draws: dist.len(),
    })
}

fn run_cell(cfg: &StudyConfig, truth: &Truth, n: usize, replicate: usize) -> CellReport {
    let data_seed = derive_seed(cfg.seed, n as u64, replicate as u64, 0);
    let chain_seed = derive_seed(cfg.seed, n as u64, replicate as u64, 1);
    let outcome = (|| -> Result<CellSummary> {
        let mut spec = cfg.data.clone();
        spec.n = n;
        let data = gen_data(&spec, truth, data_seed)?;
        let mut chain_cfg = cfg.chain.clone();
        chain_cfg.keep_fvals = true;
        let chain = run_chain(&data, &chain_cfg, chain_seed)?;
        let oracle = DistanceOracle::new(&data, truth)?;
        let noise = data.kind().is_regression().then_some(spec.noise);
        summarize_cell(&chain, &oracle, &cfg.truth, noise)
    })();
    if let Err(err) = &outcome {
        log::warn!("replicate {replicate} at n = {n} failed: {err}");
    }
    CellReport {
        n,
        replicate,
        data_seed,
        chain_seed,
        outcome: outcome.map_err(|e| e.to_string()),
    }
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn log_slope(n_grid: &[usize], errs: &[f64]) -> Result<f64> {
    if let Some(bad) = errs.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::Domain(format!("cannot take the log of error {bad}")));
    }
    let xs: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    Ok(ols_slope(&xs, &ys))
}

/// Runs chains on simulated data for every `(n, replicate)` cell in
/// parallel and summarizes the error curve.
pub fn run_rate_study(cfg: &StudyConfig) -> Result<RateReport> {
    cfg.validate()?;
    let truth = make_truth(&cfg.truth)?;
    let jobs: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    let cells: Vec<CellReport> = jobs
        .par_iter()
        .map(|&(n, r)| run_cell(cfg, &truth, n, r))
        .collect();
    let succeeded = cells.iter().filter(|c| c.outcome.is_ok()).count();
    let total = cells.len();
    if (succeeded as f64) < MIN_SUCCESS * total as f64 {
        return Err(Error::InsufficientReplicates { succeeded, total });
    }
    let mut report = RateReport {
        kind: cfg.data.kind,
        metric: metric_name(cfg.data.kind).into(),
        n_grid: cfg.n_grid.clone(),
        median_err: Vec::new(),
        q90_err: Vec::new(),
        joint_median_err: cfg.data.kind.is_regression().then(Vec::new),
        proj_err: Vec::new(),
        inclusion: Vec::new(),
        slope: f64::NAN,
        slope_ci: (f64::NAN, f64::NAN),
        theory_exponent: cfg.truth.theory_exponent(cfg.data.kind),
        success_rate: succeeded as f64 / total as f64,
        cells,
    };
    let mut per_n: Vec<Vec<CellSummary>> = Vec::new();
    for i in 0..report.n_grid.len() {
        let ok: Vec<CellSummary> = report.successes_at(i).into_iter().cloned().collect();
        if ok.is_empty() {
            return Err(Error::InsufficientReplicates { succeeded, total });
        }
        let medians: Vec<f64> = ok.iter().map(|s| s.median_err).collect();
        let q90s: Vec<f64> = ok.iter().map(|s| s.q90_err).collect();
        report.median_err.push(metrics::median(&medians)?);
        report.q90_err.push(metrics::median(&q90s)?);
        if let Some(joint) = report.joint_median_err.as_mut() {
            let js: Vec<f64> = ok.iter().filter_map(|s| s.median_joint).collect();
            joint.push(metrics::median(&js)?);
        }
        report.proj_err.push(ok.iter().map(|s| s.proj_err).sum::<f64>() / ok.len() as f64);
        let d = cfg.truth.d();
        let mut inc = vec![0.0; d];
        for s in &ok {
            for (a, b) in inc.iter_mut().zip(&s.inclusion) {
                *a += b / ok.len() as f64;
            }
        }
        report.inclusion.push(inc);
        per_n.push(ok);
    }
    if report.n_grid.len() >= 2 {
        report.slope = log_slope(&report.n_grid, &report.median_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 0, 2));
        let mut slopes = Vec::with_capacity(cfg.bootstrap);
        for _ in 0..cfg.bootstrap {
            let meds = per_n
                .iter()
                .map(|ok| {
                    let sample: Vec<f64> = (0..ok.len())
                        .map(|_| ok[rng.random_range(0..ok.len())].median_err)
                        .collect();
                    metrics::median(&sample)
                })
                .collect::<Result<Vec<f64>>>()?;
            slopes.push(log_slope(&report.n_grid, &meds)?);
        }
        if !slopes.is_empty() {
            report.slope_ci = (metrics::quantile(&slopes, 0.025)?, metrics::quantile(&slopes, 0.975)?);
        }
    }
    Ok(report)
}

fn metric_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::RegFixed => "norm_n",
        ModelKind::RegRandom | ModelKind::Classification => "L2(G_x)",
        ModelKind::Density => "hellinger",
        ModelKind::DensityRegression => "rho(G_x)",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallBallConfig {
    pub hyper: HyperConfig,
    pub eps_grid: Vec<f64>,
    pub grid_size: usize,
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallBallEstimate {
    pub eps: f64,
    pub estimate: f64,
    /// 95% Wilson interval.
    pub ci: (f64, f64),
}

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Nested evaluation grid in the disc: the first `m` points of a Halton set.
pub fn smallball_grid(m: usize, d: usize) -> Vec<Vec<f64>> {
    halton_disc(m, d, None)
}

/// Monte-Carlo estimate of `P(max_j |W(t_j) - f0(t_j)| ≤ ε)` for prior paths
/// on an `m`-point grid, with Wilson intervals.
pub fn smallball_mc(truth: &Truth, cfg: &SmallBallConfig) -> Result<Vec<SmallBallEstimate>> {
    let mut out = smallball_nested(std::slice::from_ref(truth), cfg, &[cfg.grid_size])?;
    Ok(out.remove(0).remove(0))
}

/// Small-ball estimates for several truths and nested grid prefixes, all
/// computed from the same prior paths. Indexed `[grid size][truth][ε]`.
pub fn smallball_nested(
    truths: &[Truth],
    cfg: &SmallBallConfig,
    grid_sizes: &[usize],
) -> Result<Vec<Vec<Vec<SmallBallEstimate>>>> {
    cfg.hyper.validate()?;
    if cfg.hyper.extra_axis {
        return Err(Error::Configuration("small-ball diagnostics take processes without a u-axis".into()));
    }
    if cfg.paths == 0 || cfg.grid_size == 0 {
        return Err(Error::Configuration("paths and grid size must be positive".into()));
    }
    if cfg.eps_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Configuration("ε grid must be strictly increasing".into()));
    }
    if grid_sizes.iter().any(|&m| m == 0 || m > cfg.grid_size) {
        return Err(Error::Configuration(format!("grid prefixes must lie in 1..={}", cfg.grid_size)));
    }
    if truths.iter().any(|t| t.spec().d() != cfg.hyper.d) {
        return Err(Error::Configuration("truth and prior dimensions differ".into()));
    }
    let grid = smallball_grid(cfg.grid_size, cfg.hyper.d);
    let f0: Vec<Vec<f64>> = truths.iter().map(|t| grid.iter().map(|x| t.value(x)).collect()).collect();
    let pts = PointSet::new(grid, None)?;
    // deviations[path][size][truth]
    let deviations: Vec<Vec<Vec<f64>>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| -> Result<Vec<Vec<f64>>> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, p as u64, 0, 3));
            let spec = sample_hyper(&cfg.hyper, &mut rng);
            let gram = build_gram(&pts, &spec)?;
            let path = sample_path(&gram, &mut rng);
            Ok(grid_sizes
                .iter()
                .map(|&m| {
                    f0.iter()
                        .map(|f| {
                            path[..m]
                                .iter()
                                .zip(&f[..m])
                                .fold(0.0f64, |acc, (w, f)| acc.max((w - f).abs()))
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..grid_sizes.len())
        .map(|s| {
            (0..truths.len())
                .map(|t| {
                    cfg.eps_grid
                        .iter()
                        .map(|&eps| {
                            let hits = deviations.iter().filter(|d| d[s][t] <= eps).count();
                            SmallBallEstimate {
                                eps,
                                estimate: hits as f64 / cfg.paths as f64,
                                ci: wilson_interval(hits, cfg.paths),
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect())
}

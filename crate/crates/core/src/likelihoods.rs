//! Log-likelihoods for mean regression, binary classification, density
//! estimation and density regression.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::gp::{KernelGram, PointSet, Rescale};
use crate::quadrature::{disc_volume, Quadrature};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const TAIL_CUTOFF: f64 = 8.0;
const U_CLAMP: f64 = 1e-12;
const WEIGHT_TOTAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    RegFixed,
    RegRandom,
    Classification,
    Density,
    DensityRegression,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::RegFixed,
        ModelKind::RegRandom,
        ModelKind::Classification,
        ModelKind::Density,
        ModelKind::DensityRegression,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::RegFixed => "reg-fixed",
            ModelKind::RegRandom => "reg-random",
            ModelKind::Classification => "classif",
            ModelKind::Density => "density",
            ModelKind::DensityRegression => "density-reg",
        }
    }

    pub fn is_regression(self) -> bool {
        matches!(self, ModelKind::RegFixed | ModelKind::RegRandom)
    }

    /// Whether the latent function carries the extra u-axis.
    pub fn extra_axis(self) -> bool {
        self == ModelKind::DensityRegression
    }

    pub fn has_response(self) -> bool {
        self != ModelKind::Density
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Link {
    Probit,
    #[default]
    Logistic,
}

impl Link {
    pub fn as_str(self) -> &'static str {
        match self {
            Link::Probit => "probit",
            Link::Logistic => "logistic",
        }
    }

    pub fn cdf(self, f: f64) -> f64 {
        match self {
            Link::Probit => normal_cdf(f),
            Link::Logistic => 1.0 / (1.0 + (-f).exp()),
        }
    }

    /// `log Φ(f)` without underflow in either tail.
    pub fn log_cdf(self, f: f64) -> f64 {
        match self {
            Link::Logistic => {
                if f >= 0.0 {
                    -(-f).exp().ln_1p()
                } else {
                    f - f.exp().ln_1p()
                }
            }
            Link::Probit => {
                if f < -TAIL_CUTOFF {
                    log_normal_tail(-f)
                } else if f > TAIL_CUTOFF {
                    (-log_normal_tail(f).exp()).ln_1p()
                } else {
                    (0.5 * erfc(-f / std::f64::consts::SQRT_2)).ln()
                }
            }
        }
    }

    /// `log(1 - Φ(f))`; both links are symmetric about zero.
    pub fn log_sf(self, f: f64) -> f64 {
        self.log_cdf(-f)
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probit" => Ok(Link::Probit),
            "logistic" => Ok(Link::Logistic),
            _ => Err(Error::InvalidInput(format!("unknown link '{s}'"))),
        }
    }
}

/// `log Φ(-x)` for large positive `x` from the Mills-ratio series.
pub fn log_normal_tail(x: f64) -> f64 {
    let inv2 = 1.0 / (x * x);
    let mut term = 1.0;
    let mut series = 1.0;
    for k in 1..=6 {
        term *= -((2 * k - 1) as f64) * inv2;
        series += term;
    }
    -0.5 * x * x - x.ln() - 0.5 * LN_2PI + series.ln()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Fixed reference density `g*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GStar {
    /// Uniform on the unit disc.
    UniformDisc,
    /// Standard normal (product form in several dimensions).
    StdNormal,
}

impl GStar {
    pub fn as_str(self) -> &'static str {
        match self {
            GStar::UniformDisc => "uniform",
            GStar::StdNormal => "normal",
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::DensityRegression => GStar::StdNormal,
            _ => GStar::UniformDisc,
        }
    }

    pub fn log_pdf(self, x: &[f64]) -> f64 {
        match self {
            GStar::UniformDisc => -disc_volume(x.len()).ln(),
            GStar::StdNormal => {
                -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * x.len() as f64 * LN_2PI
            }
        }
    }

    /// CDF `G*` of a univariate reference.
    pub fn cdf(self, y: f64) -> Result<f64> {
        match self {
            GStar::StdNormal => Ok(normal_cdf(y)),
            GStar::UniformDisc => Ok(((y + 1.0) / 2.0).clamp(0.0, 1.0)),
        }
    }

    pub fn quantile(self, u: f64) -> Result<f64> {
        match self {
            GStar::StdNormal => Ok(normal_quantile(u)),
            GStar::UniformDisc => Ok(2.0 * u - 1.0),
        }
    }
}

impl fmt::Display for GStar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GStar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(GStar::UniformDisc),
            "normal" => Ok(GStar::StdNormal),
            _ => Err(Error::InvalidInput(format!("unknown reference density '{s}'"))),
        }
    }
}

/// Uniform prior on the noise level over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaPrior {
    pub lo: f64,
    pub hi: f64,
}

impl Default for SigmaPrior {
    fn default() -> Self {
        Self { lo: 0.05, hi: 5.0 }
    }
}

impl SigmaPrior {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise prior support [{lo}, {hi}] must satisfy 0 < lo < hi < ∞"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, sigma: f64) -> bool {
        (self.lo..=self.hi).contains(&sigma)
    }

    pub fn log_density(&self) -> f64 {
        -(self.hi - self.lo).ln()
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Folds `x` back into `[lo, hi]` by mirror reflection at the ends.
    pub fn reflect(&self, x: f64) -> f64 {
        let width = self.hi - self.lo;
        let period = 2.0 * width;
        let mut r = (x - self.lo).rem_euclid(period);
        if r > width {
            r = period - r;
        }
        (self.lo + r).clamp(self.lo, self.hi)
    }
}

/// Observations for one of the four likelihoods with the fixed reference
/// objects they need.
#[derive(Debug, Clone)]
pub struct ModelData {
    kind: ModelKind,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    link: Link,
    gstar: GStar,
    quad: Quadrature,
    rescale: Rescale,
    log_gstar_data: Vec<f64>,
    log_gstar_quad: Vec<f64>,
    u_data: Vec<f64>,
    clamped: usize,
}

impl ModelData {
    fn check_x(x: &[Vec<f64>]) -> Result<()> {
        if x.is_empty() {
            return Err(Error::InvalidInput("no observations".into()));
        }
        PointSet::new(x.to_vec(), None).map(|_| ())
    }

    fn base(kind: ModelKind, x: Vec<Vec<f64>>, y: Vec<f64>) -> Self {
        let d = x[0].len();
        Self {
            kind,
            x,
            y,
            link: Link::default(),
            gstar: GStar::default_for(kind),
            quad: Quadrature {
                nodes: Vec::new(),
                weights: Vec::new(),
            },
            rescale: Rescale::identity(d),
            log_gstar_data: Vec::new(),
            log_gstar_quad: Vec::new(),
            u_data: Vec::new(),
            clamped: 0,
        }
    }

    pub fn regression(kind: ModelKind, x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if !kind.is_regression() {
            return Err(Error::InvalidInput(format!("{kind} is not a regression kind")));
        }
        Self::check_x(&x)?;
        check_responses(&x, &y)?;
        Ok(Self::base(kind, x, y))
    }

    pub fn classification(x: Vec<Vec<f64>>, y: Vec<f64>, link: Link) -> Result<Self> {
        Self::check_x(&x)?;
        check_responses(&x, &y)?;
        if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput(format!("class label {bad} is not 0 or 1")));
        }
        let mut data = Self::base(ModelKind::Classification, x, y);
        data.link = link;
        Ok(data)
    }

    pub fn density(x: Vec<Vec<f64>>, gstar: GStar, quad: Quadrature) -> Result<Self> {
        Self::check_x(&x)?;
        let d = x[0].len();
        check_quadrature(&quad, d, disc_volume(d))?;
        let mut data = Self::base(ModelKind::Density, x, Vec::new());
        data.gstar = gstar;
        data.log_gstar_data = data.x.iter().map(|p| gstar.log_pdf(p)).collect();
        data.log_gstar_quad = quad.nodes.iter().map(|p| gstar.log_pdf(p)).collect();
        data.quad = quad;
        Ok(data)
    }

    /// `quad` is a rule on `[0, 1]` for the u-integral.
    pub fn density_regression(
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        gstar: GStar,
        quad: Quadrature,
    ) -> Result<Self> {
        Self::check_x(&x)?;
        check_responses(&x, &y)?;
        check_quadrature(&quad, 1, 1.0)?;
        if quad.nodes.iter().any(|u| !(0.0..=1.0).contains(&u[0])) {
            return Err(Error::InvalidInput("u-quadrature nodes must lie in [0, 1]".into()));
        }
        let mut data = Self::base(ModelKind::DensityRegression, x, y);
        data.gstar = gstar;
        let mut clamped = 0;
        for &yi in &data.y {
            let u = gstar.cdf(yi)?;
            let c = u.clamp(U_CLAMP, 1.0 - U_CLAMP);
            if c != u {
                clamped += 1;
            }
            data.u_data.push(c);
        }
        if clamped > 0 {
            log::warn!("{clamped} responses had G*(y) clamped into [1e-12, 1 - 1e-12]");
        }
        data.clamped = clamped;
        data.log_gstar_data = data.y.iter().map(|&v| gstar.log_pdf(&[v])).collect();
        data.quad = quad;
        Ok(data)
    }

    pub fn with_rescale(mut self, rescale: Rescale) -> Self {
        self.rescale = rescale;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn x(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn gstar(&self) -> GStar {
        self.gstar
    }

    pub fn quad(&self) -> &Quadrature {
        &self.quad
    }

    pub fn rescale(&self) -> &Rescale {
        &self.rescale
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn d(&self) -> usize {
        self.x[0].len()
    }

    /// `G*(y_i)` clamped into the open unit interval (density regression only).
    pub fn u_data(&self) -> &[f64] {
        &self.u_data
    }

    /// Number of responses whose `G*(y)` needed clamping.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn log_gstar_data(&self) -> &[f64] {
        &self.log_gstar_data
    }

    /// Sites at which the latent function must be known: data points, then
    /// density quadrature nodes, or for density regression `(x_i, G*(y_i))`
    /// followed by `(x_i, u_j)` in row-major order.
    pub fn latent_sites(&self) -> Result<PointSet> {
        match self.kind {
            ModelKind::RegFixed | ModelKind::RegRandom | ModelKind::Classification => {
                PointSet::new(self.x.clone(), None)
            }
            ModelKind::Density => {
                let mut pts = self.x.clone();
                pts.extend(self.quad.nodes.iter().cloned());
                PointSet::new(pts, None)
            }
            ModelKind::DensityRegression => {
                let m = self.quad.len();
                let mut pts = self.x.clone();
                let mut aux = self.u_data.clone();
                for xi in &self.x {
                    for node in &self.quad.nodes {
                        pts.push(xi.clone());
                        aux.push(node[0]);
                    }
                }
                debug_assert_eq!(pts.len(), self.n() * (m + 1));
                PointSet::new(pts, Some(aux))
            }
        }
    }

    /// Log-likelihood from latent values at [`latent_sites`](Self::latent_sites).
    pub fn loglik_sites(&self, fvals: &[f64], sigma: Option<f64>, prior: &SigmaPrior) -> Result<f64> {
        let n = self.n();
        match self.kind {
            ModelKind::RegFixed | ModelKind::RegRandom => {
                let sigma = sigma.ok_or_else(|| {
                    Error::InvalidInput("regression likelihood needs a noise level".into())
                })?;
                reg_loglik(&fvals[..n], self, sigma, prior)
            }
            ModelKind::Classification => class_loglik(&fvals[..n], self),
            ModelKind::Density => density_loglik(&fvals[..n], &fvals[n..], self),
            ModelKind::DensityRegression => denreg_loglik(&fvals[..n], &fvals[n..], self),
        }
    }
}

fn check_responses(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "{} covariate rows but {} responses",
            x.len(),
            y.len()
        )));
    }
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite response {bad}")));
    }
    Ok(())
}

fn check_quadrature(quad: &Quadrature, d: usize, total: f64) -> Result<()> {
    if quad.nodes.len() != quad.weights.len() || quad.is_empty() {
        return Err(Error::InvalidInput("quadrature needs matching nonempty nodes and weights".into()));
    }
    if quad.nodes.iter().any(|n| n.len() != d) {
        return Err(Error::InvalidInput(format!("quadrature nodes must have dimension {d}")));
    }
    if quad.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidInput("quadrature weights must be nonnegative".into()));
    }
    let sum = quad.total_weight();
    if sum > 0.0 && ((sum - total) / total).abs() > WEIGHT_TOTAL_TOL {
        return Err(Error::InvalidInput(format!(
            "quadrature weights sum to {sum}, expected {total}"
        )));
    }
    Ok(())
}

/// Gaussian-noise log-likelihood
/// `-n·log σ - Σ(y - f)²/(2σ²) - (n/2)·log 2π`.
pub fn reg_loglik(fvals: &[f64], data: &ModelData, sigma: f64, prior: &SigmaPrior) -> Result<f64> {
    if !data.kind.is_regression() {
        return Err(Error::InvalidInput(format!("{} data in regression likelihood", data.kind)));
    }
    if !prior.contains(sigma) {
        return Err(Error::Domain(format!(
            "σ = {sigma} outside prior support [{}, {}]",
            prior.lo, prior.hi
        )));
    }
    Ok(gaussian_loglik(fvals, &data.y, sigma))
}

pub(crate) fn gaussian_loglik(fvals: &[f64], y: &[f64], sigma: f64) -> f64 {
    let n = y.len() as f64;
    let rss: f64 = y.iter().zip(fvals).map(|(y, f)| (y - f) * (y - f)).sum();
    -n * sigma.ln() - rss / (2.0 * sigma * sigma) - 0.5 * n * LN_2PI
}

/// Log density of `y` under `N(0, K + σ²I)` together with the factor of
/// `K + σ²I`.
pub fn gaussian_marginal(
    y: &[f64],
    k: &DMatrix<f64>,
    sigma: f64,
) -> Result<(f64, Cholesky<f64, Dyn>)> {
    let n = y.len();
    if k.nrows() != n || k.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "covariance is {}x{} for {n} responses",
            k.nrows(),
            k.ncols()
        )));
    }
    let mut cov = k.clone();
    let s2 = sigma * sigma;
    for i in 0..n {
        cov[(i, i)] += s2;
    }
    let chol = cov.cholesky().ok_or_else(|| Error::Numerical {
        message: "marginal covariance K + σ²I is not positive definite".into(),
        fvals: None,
    })?;
    let yv = DVector::from_column_slice(y);
    let white = chol
        .l_dirty()
        .solve_lower_triangular(&yv)
        .expect("Cholesky factor has a positive diagonal");
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let value = -0.5 * white.norm_squared() - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;
    Ok((value, chol))
}

/// Log density of `y` with the latent function integrated out under the
/// Gaussian law described by `gram`.
pub fn reg_marginal_loglik(data: &ModelData, gram: &KernelGram, sigma: f64) -> Result<f64> {
    if !data.kind.is_regression() {
        return Err(Error::InvalidInput(format!("{} data in regression likelihood", data.kind)));
    }
    gaussian_marginal(&data.y, gram.matrix(), sigma).map(|(v, _)| v)
}

/// Bernoulli log-likelihood through the data's link.
pub fn class_loglik(fvals: &[f64], data: &ModelData) -> Result<f64> {
    if data.kind != ModelKind::Classification {
        return Err(Error::InvalidInput(format!("{} data in classification likelihood", data.kind)));
    }
    let link = data.link;
    Ok(data
        .y
        .iter()
        .zip(fvals)
        .map(|(&y, &f)| if y == 1.0 { link.log_cdf(f) } else { link.log_sf(f) })
        .sum())
}

fn log_weighted_sum_exp(log_w: impl Iterator<Item = (f64, f64)>) -> f64 {
    let terms: Vec<(f64, f64)> = log_w.filter(|(w, _)| *w > 0.0).collect();
    let max = terms.iter().map(|(_, e)| *e).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|(w, e)| w * (e - max).exp()).sum();
    max + sum.ln()
}

/// `log ∫ g*(z) e^{f(z)} dz` by quadrature.
pub fn density_log_normalizer(fvals_quad: &[f64], data: &ModelData) -> Result<f64> {
    if data.quad.total_weight() <= 0.0 {
        return Err(Error::Configuration("density quadrature has zero total weight".into()));
    }
    if fvals_quad.len() != data.quad.len() {
        return Err(Error::InvalidInput(format!(
            "{} latent values for {} quadrature nodes",
            fvals_quad.len(),
            data.quad.len()
        )));
    }
    Ok(log_weighted_sum_exp(
        data.quad
            .weights
            .iter()
            .zip(fvals_quad)
            .zip(&data.log_gstar_quad)
            .map(|((&w, &f), &lg)| (w, f + lg)),
    ))
}

/// Logistic-transform density log-likelihood
/// `Σ[log g*(x_i) + f(x_i)] - n·log ∫ g* e^f`.
pub fn density_loglik(fvals_data: &[f64], fvals_quad: &[f64], data: &ModelData) -> Result<f64> {
    if data.kind != ModelKind::Density {
        return Err(Error::InvalidInput(format!("{} data in density likelihood", data.kind)));
    }
    let log_norm = density_log_normalizer(fvals_quad, data)?;
    let head: f64 = data
        .log_gstar_data
        .iter()
        .zip(fvals_data)
        .map(|(lg, f)| lg + f)
        .sum();
    Ok(head - data.n() as f64 * log_norm)
}

/// Conditional-density log-likelihood. `fvals_quad` holds `f(x_i, u_j)` in
/// row-major `n × m` layout; the u-integral uses the data's rule on `[0, 1]`.
pub fn denreg_loglik(fvals_data: &[f64], fvals_quad: &[f64], data: &ModelData) -> Result<f64> {
    if data.kind != ModelKind::DensityRegression {
        return Err(Error::InvalidInput(format!(
            "{} data in density-regression likelihood",
            data.kind
        )));
    }
    let m = data.quad.len();
    let n = data.n();
    if fvals_quad.len() != n * m || fvals_data.len() != n {
        return Err(Error::InvalidInput(format!(
            "expected {n} data values and {n}x{m} grid values"
        )));
    }
    if data.quad.total_weight() <= 0.0 {
        return Err(Error::Configuration("u-quadrature has zero total weight".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = &fvals_quad[i * m..(i + 1) * m];
        let log_norm =
            log_weighted_sum_exp(data.quad.weights.iter().copied().zip(row.iter().copied()));
        total += data.log_gstar_data[i] + fvals_data[i] - log_norm;
    }
    Ok(total)
}

/// Per-row log-normalizers `log Σ_j w_j e^{f(x_i, u_j)}`.
pub fn denreg_log_normalizers(fvals_quad: &[f64], weights: &[f64]) -> Vec<f64> {
    fvals_quad
        .chunks(weights.len())
        .map(|row| log_weighted_sum_exp(weights.iter().copied().zip(row.iter().copied())))
        .collect()
}

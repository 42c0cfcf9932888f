//! Distances between functions, densities and projections.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::hyperprior::ProjectionMatrixR;
use crate::quadrature::Quadrature;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    /// Present exactly when the value is a Monte-Carlo estimate.
    pub mc_se: Option<f64>,
}

impl MetricReport {
    pub fn exact(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            mc_se: None,
        }
    }
}

/// Empirical L2 distance `sqrt(mean((f - g)²))` at the design points.
pub fn norm_n(fvals: &[f64], gvals: &[f64]) -> Result<f64> {
    if fvals.len() != gvals.len() {
        return Err(Error::InvalidInput(format!(
            "vectors of length {} and {}",
            fvals.len(),
            gvals.len()
        )));
    }
    if fvals.is_empty() {
        return Err(Error::Domain("empirical norm of zero points".into()));
    }
    let ss: f64 = fvals.iter().zip(gvals).map(|(f, g)| (f - g).powi(2)).sum();
    Ok((ss / fvals.len() as f64).sqrt())
}

/// Monte-Carlo root mean square of `f - g` over a sample from the design
/// law, with a delta-method standard error.
pub fn norm_gx(
    f: &dyn Fn(&[f64]) -> f64,
    g: &dyn Fn(&[f64]) -> f64,
    xs: &[Vec<f64>],
) -> Result<MetricReport> {
    let sq: Vec<f64> = xs.iter().map(|x| (f(x) - g(x)).powi(2)).collect();
    root_mean_report("L2(G_x)", &sq)
}

fn root_mean_report(name: &str, values: &[f64]) -> Result<MetricReport> {
    if values.is_empty() {
        return Err(Error::Domain("Monte-Carlo estimate from an empty sample".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let value = mean.max(0.0).sqrt();
    let se_mean = (var / n).sqrt();
    let mc_se = if value > 0.0 { se_mean / (2.0 * value) } else { 0.0 };
    Ok(MetricReport {
        name: name.into(),
        value,
        mc_se: Some(mc_se),
    })
}

/// Squared Hellinger distance from density values at quadrature nodes.
pub fn hellinger_sq(g1: &[f64], g2: &[f64], weights: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() || g1.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "density vectors of length {} and {} with {} weights",
            g1.len(),
            g2.len(),
            weights.len()
        )));
    }
    let mut total = 0.0;
    for ((&a, &b), &w) in g1.iter().zip(g2).zip(weights) {
        if !(a >= 0.0 && b >= 0.0) {
            return Err(Error::Domain(format!("negative density value ({a}, {b})")));
        }
        total += w * (a.sqrt() - b.sqrt()).powi(2);
    }
    Ok(total)
}

/// Hellinger distance `sqrt(Σ w (√g1 - √g2)²)`.
pub fn hellinger(g1: &[f64], g2: &[f64], weights: &[f64]) -> Result<f64> {
    hellinger_sq(g1, g2, weights).map(f64::sqrt)
}

/// Root of the design-averaged squared Hellinger distance between two
/// conditional densities.
///
/// `g1(x, u)` and `g2(x, u)` are conditional densities of `u = G*(y)` given
/// `x`; Hellinger distance is unchanged by that substitution, so the inner
/// integral is taken on `[0, 1]` with `u_quad`.
pub fn rho_gx(
    g1: &dyn Fn(&[f64], f64) -> f64,
    g2: &dyn Fn(&[f64], f64) -> f64,
    xs: &[Vec<f64>],
    u_quad: &Quadrature,
) -> Result<MetricReport> {
    let us = u_quad.scalar_nodes();
    let per_x = xs
        .iter()
        .map(|x| {
            let a: Vec<f64> = us.iter().map(|&u| g1(x, u)).collect();
            let b: Vec<f64> = us.iter().map(|&u| g2(x, u)).collect();
            hellinger_sq(&a, &b, &u_quad.weights)
        })
        .collect::<Result<Vec<_>>>()?;
    root_mean_report("rho(G_x)", &per_x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatrixNorm {
    #[default]
    Frobenius,
    Spectral,
}

impl MatrixNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixNorm::Frobenius => "frobenius",
            MatrixNorm::Spectral => "spectral",
        }
    }
}

impl fmt::Display for MatrixNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatrixNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(MatrixNorm::Frobenius),
            "spectral" => Ok(MatrixNorm::Spectral),
            _ => Err(Error::InvalidInput(format!("unknown matrix norm '{s}'"))),
        }
    }
}

/// Norm of the difference of two projection matrices.
pub fn proj_distance(r1: &ProjectionMatrixR, r2: &ProjectionMatrixR, norm: MatrixNorm) -> Result<f64> {
    matrix_distance(&r1.matrix, &r2.matrix, norm)
}

/// Norm of `m1 - m2` for symmetric matrices.
pub fn matrix_distance(m1: &DMatrix<f64>, m2: &DMatrix<f64>, norm: MatrixNorm) -> Result<f64> {
    if m1.shape() != m2.shape() {
        return Err(Error::InvalidInput(format!(
            "matrices of shape {:?} and {:?}",
            m1.shape(),
            m2.shape()
        )));
    }
    let diff = m1 - m2;
    Ok(match norm {
        MatrixNorm::Frobenius => diff.norm(),
        MatrixNorm::Spectral => {
            let sym = (&diff + diff.transpose()) * 0.5;
            SymmetricEigen::new(sym)
                .eigenvalues
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
        }
    })
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], prob: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Domain(format!("quantile level {prob} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = prob * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

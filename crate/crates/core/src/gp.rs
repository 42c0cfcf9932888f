//! Square-exponential process with rescaling, variable selection and rotation.
//!
//! A realization of the prior is indexed by a [`ProjectionSpec`] `(a, b, q)`:
//! the input `x` is mapped to `diag(a·b)·q·x` (with `a·u` appended for the
//! conditional-density process) and fed to the isotropic kernel
//! `exp(-‖t - s‖²)`. Finite marginals are built by [`build_gram`] and drawn by
//! [`sample_path`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Diagonal jitter rungs tried in order until the Cholesky factorization succeeds.
pub const JITTER_LADDER: [f64; 4] = [1e-10, 1e-8, 1e-6, 1e-4];

const ORTHOGONALITY_TOL: f64 = 1e-10;
const DISC_TOL: f64 = 1e-12;

/// One realization `(a, b, q)` of the rescale/select/rotate transform.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpec {
    a: f64,
    mask: Vec<bool>,
    q: DMatrix<f64>,
    extra_axis: bool,
}

impl ProjectionSpec {
    pub fn new(a: f64, mask: Vec<bool>, q: DMatrix<f64>, extra_axis: bool) -> Result<Self> {
        let d = mask.len();
        if d == 0 {
            return Err(Error::InvalidInput("selection mask is empty".into()));
        }
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::InvalidInput(format!(
                "rotation is {}x{} but mask has length {d}",
                q.nrows(),
                q.ncols()
            )));
        }
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::InvalidInput(format!("rescale a = {a} must be positive")));
        }
        if !extra_axis && mask.iter().all(|&bit| !bit) && a != 1.0 {
            return Err(Error::InvalidInput(format!(
                "empty selection requires a = 1, got {a}"
            )));
        }
        let defect = orthogonality_defect(&q);
        if defect > ORTHOGONALITY_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthogonal (max |qᵀq - I| = {defect:e})"
            )));
        }
        Ok(Self {
            a,
            mask,
            q,
            extra_axis,
        })
    }

    /// `a = 1`, every coordinate selected, `q = I`.
    pub fn identity(d: usize, extra_axis: bool) -> Self {
        Self {
            a: 1.0,
            mask: vec![true; d],
            q: DMatrix::identity(d, d),
            extra_axis,
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn extra_axis(&self) -> bool {
        self.extra_axis
    }

    /// |b|, the number of selected coordinates.
    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&bit| bit).count()
    }

    /// Power `m` with `A^m ~ Ga(a1, a2)`: |b|, plus one for the u-axis.
    pub fn exponent(&self) -> usize {
        self.active() + usize::from(self.extra_axis)
    }

    pub fn with_a(&self, a: f64) -> Result<Self> {
        Self::new(a, self.mask.clone(), self.q.clone(), self.extra_axis)
    }

    pub fn with_mask(&self, mask: Vec<bool>, a: f64) -> Result<Self> {
        Self::new(a, mask, self.q.clone(), self.extra_axis)
    }

    pub fn with_q(&self, q: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a, self.mask.clone(), q, self.extra_axis)
    }

    fn transform_into(&self, x: &[f64], u: Option<f64>, out: &mut Vec<f64>) {
        out.clear();
        for (row, &bit) in self.mask.iter().enumerate() {
            if bit {
                let dot: f64 = self.q.row(row).iter().zip(x).map(|(q, x)| q * x).sum();
                out.push(self.a * dot);
            } else {
                out.push(0.0);
            }
        }
        if let Some(u) = u {
            out.push(self.a * u);
        }
    }
}

pub(crate) fn orthogonality_defect(q: &DMatrix<f64>) -> f64 {
    let gram = q.transpose() * q;
    let d = q.ncols();
    (gram - DMatrix::<f64>::identity(d, d)).amax()
}

/// Inputs on the unit disc, with optional u-coordinates in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Vec<f64>>,
    aux: Option<Vec<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<Vec<f64>>, aux: Option<Vec<f64>>) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        for (i, p) in points.iter().enumerate() {
            if p.len() != d {
                return Err(Error::InvalidInput(format!(
                    "point {i} has dimension {} (expected {d})",
                    p.len()
                )));
            }
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= 1.0 + DISC_TOL) {
                return Err(Error::InvalidInput(format!(
                    "point {i} has norm {norm} outside the unit disc"
                )));
            }
        }
        if let Some(aux) = &aux {
            if aux.len() != points.len() {
                return Err(Error::InvalidInput(format!(
                    "{} u-coordinates for {} points",
                    aux.len(),
                    points.len()
                )));
            }
            if let Some(bad) = aux.iter().find(|u| !(0.0..=1.0).contains(*u)) {
                return Err(Error::InvalidInput(format!("u-coordinate {bad} outside [0, 1]")));
            }
        }
        Ok(Self { points, aux })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn aux(&self) -> Option<&[f64]> {
        self.aux.as_deref()
    }

    pub fn concat(&self, other: &PointSet) -> Result<PointSet> {
        let aux = match (&self.aux, &other.aux) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            (None, None) => None,
            _ => {
                return Err(Error::InvalidInput(
                    "cannot concatenate point sets with and without u-coordinates".into(),
                ))
            }
        };
        let points = self.points.iter().chain(&other.points).cloned().collect();
        PointSet::new(points, aux)
    }
}

/// Affine map `x ↦ (x - shift) / scale` that brought raw covariates into the disc.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescale {
    pub shift: Vec<f64>,
    pub scale: f64,
}

impl Rescale {
    pub fn identity(d: usize) -> Self {
        Self {
            shift: vec![0.0; d],
            scale: 1.0,
        }
    }

    /// Fits the transform for a raw covariate cloud. Data already inside the
    /// disc is left untouched; otherwise covariates are centred on the
    /// coordinate-wise midrange and divided by `max(1, max ‖x - mid‖)`.
    pub fn fit(raw: &[Vec<f64>]) -> Self {
        let d = raw.first().map_or(0, Vec::len);
        let inside = raw
            .iter()
            .all(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0 + DISC_TOL);
        if inside {
            return Self::identity(d);
        }
        let shift: Vec<f64> = (0..d)
            .map(|k| {
                let (lo, hi) = raw
                    .iter()
                    .map(|x| x[k])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                0.5 * (lo + hi)
            })
            .collect();
        let radius = raw
            .iter()
            .map(|x| {
                x.iter()
                    .zip(&shift)
                    .map(|(v, s)| (v - s) * (v - s))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        Self {
            shift,
            scale: radius.max(1.0),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.shift)
            .map(|(v, s)| (v - s) / self.scale)
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.shift)
            .map(|(v, s)| v * self.scale + s)
            .collect()
    }
}

/// Returns `diag(a·b)·(q·x)`, with `a·u` appended when the spec carries the u-axis.
pub fn effective_input(x: &[f64], u: Option<f64>, spec: &ProjectionSpec) -> Result<Vec<f64>> {
    if x.len() != spec.dim() {
        return Err(Error::InvalidInput(format!(
            "input has dimension {} but spec has dimension {}",
            x.len(),
            spec.dim()
        )));
    }
    if u.is_some() != spec.extra_axis() {
        return Err(Error::InvalidInput(
            "u-coordinate must be given exactly when the spec has the extra axis".into(),
        ));
    }
    let mut out = Vec::with_capacity(x.len() + 1);
    spec.transform_into(x, u, &mut out);
    Ok(out)
}

/// `exp(-‖t - s‖²)`.
pub fn sq_exp_cov(t: &[f64], s: &[f64]) -> Result<f64> {
    if t.len() != s.len() {
        return Err(Error::InvalidInput(format!(
            "covariance arguments have lengths {} and {}",
            t.len(),
            s.len()
        )));
    }
    Ok(kernel(t, s))
}

#[inline]
fn kernel(t: &[f64], s: &[f64]) -> f64 {
    let dist2: f64 = t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
    (-dist2).exp()
}

/// Effective inputs for every point of `pts` under `spec`.
pub fn effective_inputs(pts: &PointSet, spec: &ProjectionSpec) -> Result<Vec<Vec<f64>>> {
    if pts.dim() != spec.dim() {
        return Err(Error::InvalidInput(format!(
            "points have dimension {} but spec has dimension {}",
            pts.dim(),
            spec.dim()
        )));
    }
    if pts.aux().is_some() != spec.extra_axis() {
        return Err(Error::InvalidInput(
            "u-coordinates must be present exactly when the spec has the extra axis".into(),
        ));
    }
    let aux = pts.aux();
    Ok(pts
        .points()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut out = Vec::with_capacity(x.len() + 1);
            spec.transform_into(x, aux.map(|u| u[i]), &mut out);
            out
        })
        .collect())
}

/// Raw kernel matrix (no jitter) over `pts`.
pub fn kernel_matrix(pts: &PointSet, spec: &ProjectionSpec) -> Result<DMatrix<f64>> {
    let inputs = effective_inputs(pts, spec)?;
    Ok(kernel_from_inputs(&inputs))
}

fn kernel_from_inputs(inputs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = 1.0;
        for i in (j + 1)..n {
            let v = kernel(&inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Covariance over a point set, factorized for sampling.
///
/// Sites whose effective inputs the kernel cannot tell apart (covariance
/// exactly 1) share a single latent coordinate, so their sampled values
/// coincide. The Cholesky factor is taken over the distinct inputs with the
/// jitter on its diagonal; [`KernelGram::chol`] expands it back to all sites.
#[derive(Debug, Clone)]
pub struct KernelGram {
    matrix: DMatrix<f64>,
    jitter: f64,
    groups: Vec<usize>,
    factor: DMatrix<f64>,
}

impl KernelGram {
    /// `K + jitter·I` over all sites.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Number of distinct effective inputs (latent coordinates in use).
    pub fn distinct(&self) -> usize {
        self.factor.nrows()
    }

    /// Site-to-latent-coordinate map.
    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// Lower-triangular factor over the distinct inputs.
    pub fn distinct_factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// The `n×n` factor used for whitening: row `i` is the factor row of the
    /// site's group, columns beyond the distinct count are zero.
    pub fn chol(&self) -> DMatrix<f64> {
        let n = self.len();
        let u = self.distinct();
        let mut out = DMatrix::zeros(n, n);
        for (i, &g) in self.groups.iter().enumerate() {
            for k in 0..u {
                out[(i, k)] = self.factor[(g, k)];
            }
        }
        out
    }

    /// `chol · eta`. Only the first [`distinct`](Self::distinct) coordinates
    /// of `eta` enter.
    pub fn apply(&self, eta: &[f64]) -> Vec<f64> {
        let u = self.distinct();
        let head = DVector::from_column_slice(&eta[..u]);
        let distinct = &self.factor * head;
        self.groups.iter().map(|&g| distinct[g]).collect()
    }
}

fn group_inputs(inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<usize>) {
    let mut representatives: Vec<usize> = Vec::new();
    let mut groups = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let found = representatives
            .iter()
            .position(|&r| kernel(x, &inputs[r]) == 1.0);
        match found {
            Some(g) => groups.push(g),
            None => {
                groups.push(representatives.len());
                representatives.push(i);
            }
        }
    }
    (groups, representatives)
}

/// Builds and factorizes the Gram matrix of the process at `pts`.
pub fn build_gram(pts: &PointSet, spec: &ProjectionSpec) -> Result<KernelGram> {
    if pts.is_empty() {
        return Err(Error::InvalidInput("point set is empty".into()));
    }
    let inputs = effective_inputs(pts, spec)?;
    let (groups, representatives) = group_inputs(&inputs);
    let distinct: Vec<Vec<f64>> = representatives.iter().map(|&r| inputs[r].clone()).collect();
    let base = kernel_from_inputs(&distinct);

    let mut attempted = Vec::new();
    for &jitter in JITTER_LADDER.iter() {
        attempted.push(jitter);
        let mut regularized = base.clone();
        for i in 0..regularized.nrows() {
            regularized[(i, i)] += jitter;
        }
        if let Some(chol) = regularized.cholesky() {
            let mut matrix = kernel_from_inputs(&inputs);
            for i in 0..matrix.nrows() {
                matrix[(i, i)] += jitter;
            }
            return Ok(KernelGram {
                matrix,
                jitter,
                groups,
                factor: chol.l(),
            });
        }
    }
    Err(Error::Factorization { ladder: attempted })
}

/// Draws the process at the gram's sites: `chol · η` with fresh standard normals.
pub fn sample_path<R: Rng + ?Sized>(gram: &KernelGram, rng: &mut R) -> Vec<f64> {
    let eta: Vec<f64> = (0..gram.len()).map(|_| rng.sample(StandardNormal)).collect();
    gram.apply(&eta)
}

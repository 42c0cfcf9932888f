//! Posterior sampling for the extended GP models.
//!
//! Latent function values are kept whitened, `f = chol(K_θ)·η` with
//! `η ~ N(0, I)`, so that moves on `θ = (a, b, q)` transport `η` unchanged.
//! `η` is refreshed by elliptical slice sampling; `a`, `b`, `q` and `σ` by
//! Metropolis–Hastings. Regression models can instead integrate `f` out
//! ([`SamplerMode::Marginal`]) and draw it only when a snapshot is taken.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{build_gram, kernel_matrix, sample_path, KernelGram, PointSet, ProjectionSpec};
use crate::hyperprior::{log_density_a, propose_rotation, reorthonormalize, sample_a, HyperConfig};
use crate::likelihoods::{gaussian_marginal, ModelData, SigmaPrior};

const CACHE_TOL: f64 = 1e-8;
const ADAPT_BATCH: usize = 20;
const TARGET_ACCEPT: f64 = 0.25;
const TARGET_ACCEPT_SIGMA: f64 = 0.4;

/// Which extension of the rescaled GP is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Rescaling with variable selection; `q` stays at the identity.
    Selection,
    /// Rescaling with selection and rotation.
    Projection,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Selection => "selection",
            Family::Projection => "projection",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selection" => Ok(Family::Selection),
            "projection" => Ok(Family::Projection),
            _ => Err(Error::InvalidInput(format!("unknown prior family '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Whitened latent values at every site, updated by elliptical slice.
    Latent,
    /// Regression only: latent values integrated out.
    Marginal,
}

impl SamplerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::Latent => "latent",
            SamplerMode::Marginal => "marginal",
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(SamplerMode::Latent),
            "marginal" => Ok(SamplerMode::Marginal),
            _ => Err(Error::InvalidInput(format!("unknown sampler mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Schedule {
    /// Burn-in defaults to a quarter of the iterations.
    pub fn new(iterations: usize, burn_in: Option<usize>, thin: usize) -> Result<Self> {
        if thin == 0 {
            return Err(Error::InvalidInput("thinning interval must be positive".into()));
        }
        let burn_in = burn_in.unwrap_or(iterations / 4);
        if burn_in > iterations {
            return Err(Error::InvalidInput(format!(
                "burn-in {burn_in} exceeds {iterations} iterations"
            )));
        }
        Ok(Self {
            iterations,
            burn_in,
            thin,
        })
    }
}

/// Which updates run each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Moves {
    pub latent: bool,
    pub a: bool,
    pub b: bool,
    pub q: bool,
    pub sigma: bool,
}

impl Default for Moves {
    fn default() -> Self {
        Self {
            latent: true,
            a: true,
            b: true,
            q: true,
            sigma: true,
        }
    }
}

impl Moves {
    /// Only the latent refresh (hyperparameters fixed).
    pub fn latent_only() -> Self {
        Self {
            latent: true,
            a: false,
            b: false,
            q: false,
            sigma: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    /// Random-walk scale on `log a`.
    pub log_a: f64,
    /// Scale of the skew-symmetric generator in the Cayley proposal.
    pub rotation: f64,
    /// Angle scale of the Givens move between a selected and an unselected row.
    pub plane: f64,
    /// Random-walk scale on `σ`.
    pub sigma: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            log_a: 0.3,
            rotation: 0.3,
            plane: 0.3,
            sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub hyper: HyperConfig,
    pub family: Family,
    pub mode: SamplerMode,
    pub sigma_prior: SigmaPrior,
    pub schedule: Schedule,
    pub moves: Moves,
    pub steps: StepSizes,
    /// Tune random-walk steps during burn-in.
    pub adapt: bool,
    pub initial_spec: Option<ProjectionSpec>,
    pub initial_sigma: Option<f64>,
    /// Record latent values in snapshots (marginal mode draws them).
    pub keep_fvals: bool,
    /// Iterations between cache consistency checks (0 disables).
    pub check_every: usize,
}

impl ChainConfig {
    pub fn new(hyper: HyperConfig, family: Family, schedule: Schedule) -> Self {
        Self {
            hyper,
            family,
            mode: SamplerMode::Latent,
            sigma_prior: SigmaPrior::default(),
            schedule,
            moves: Moves::default(),
            steps: StepSizes::default(),
            adapt: true,
            initial_spec: None,
            initial_sigma: None,
            keep_fvals: true,
            check_every: 100,
        }
    }
}

/// What the chain conditions on.
pub enum Target<'a> {
    Data(&'a ModelData),
    /// Constant likelihood on the given sites; `sigma` adds a noise level
    /// with its uniform prior.
    Flat { sites: PointSet, sigma: bool },
    /// Arbitrary log-likelihood of the latent values at `sites`.
    Custom {
        sites: PointSet,
        loglik: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    },
}

impl Target<'_> {
    fn sites(&self, mode: SamplerMode) -> Result<PointSet> {
        match self {
            Target::Data(data) => match mode {
                SamplerMode::Latent => data.latent_sites(),
                SamplerMode::Marginal => PointSet::new(data.x().to_vec(), None),
            },
            Target::Flat { sites, .. } | Target::Custom { sites, .. } => Ok(sites.clone()),
        }
    }

    fn has_sigma(&self) -> bool {
        match self {
            Target::Data(data) => data.kind().is_regression(),
            Target::Flat { sigma, .. } => *sigma,
            Target::Custom { .. } => false,
        }
    }

    fn describe(&self) -> String {
        match self {
            Target::Data(data) => data.kind().to_string(),
            Target::Flat { .. } => "flat".into(),
            Target::Custom { .. } => "custom".into(),
        }
    }
}

#[derive(Debug, Clone)]
enum Factor {
    Latent(KernelGram),
    Marginal {
        kernel: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
}

/// Current point of a chain with its cached derived quantities.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub eta: Vec<f64>,
    pub spec: ProjectionSpec,
    pub sigma: Option<f64>,
    /// `chol·η` at the latent sites (empty in marginal mode).
    pub fvals: Vec<f64>,
    pub loglik: f64,
    pub logprior: f64,
    factor: Factor,
}

impl ChainState {
    /// Builds a latent-mode state from scratch.
    pub fn latent(
        sites: &PointSet,
        spec: ProjectionSpec,
        eta: Vec<f64>,
        sigma: Option<f64>,
        loglik: &dyn Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        if eta.len() != sites.len() {
            return Err(Error::InvalidInput(format!(
                "{} whitened values for {} sites",
                eta.len(),
                sites.len()
            )));
        }
        let gram = build_gram(sites, &spec)?;
        let fvals = gram.apply(&eta);
        let ll = loglik(&fvals);
        check_finite(ll, &fvals)?;
        Ok(Self {
            eta,
            spec,
            sigma,
            fvals,
            loglik: ll,
            logprior: 0.0,
            factor: Factor::Latent(gram),
        })
    }

    pub fn gram(&self) -> Option<&KernelGram> {
        match &self.factor {
            Factor::Latent(g) => Some(g),
            Factor::Marginal { .. } => None,
        }
    }

    pub fn log_posterior(&self) -> f64 {
        let whitened = if self.eta.is_empty() {
            0.0
        } else {
            -0.5 * self.eta.iter().map(|v| v * v).sum::<f64>()
        };
        self.loglik + self.logprior + whitened
    }
}

fn check_finite(ll: f64, fvals: &[f64]) -> Result<()> {
    if ll.is_nan() {
        return Err(Error::Numerical {
            message: "log-likelihood evaluated to NaN".into(),
            fvals: Some(fvals.to_vec()),
        });
    }
    Ok(())
}

/// Result of one elliptical slice update.
#[derive(Debug, Clone)]
pub struct EssOutcome {
    pub state: ChainState,
    /// Log-likelihood level drawn at entry; the new state lies above it.
    pub threshold: f64,
    /// Number of angle proposals evaluated.
    pub proposals: usize,
}

/// Elliptical slice update of the whitened latent vector, leaving
/// `N(η; 0, I)·exp(loglik(chol·η))` invariant.
pub fn ess_update<R: Rng + ?Sized>(
    state: &ChainState,
    loglik: &dyn Fn(&[f64]) -> f64,
    rng: &mut R,
) -> Result<EssOutcome> {
    let gram = state.gram().ok_or_else(|| {
        Error::InvalidInput("elliptical slice needs a latent-mode state".into())
    })?;
    let nu: Vec<f64> = (0..state.eta.len()).map(|_| rng.sample(StandardNormal)).collect();
    let f_nu = gram.apply(&nu);
    let threshold = state.loglik + rng.random::<f64>().ln();
    let mut angle = rng.random::<f64>() * std::f64::consts::TAU;
    let mut lo = angle - std::f64::consts::TAU;
    let mut hi = angle;
    let mut proposals = 0;
    loop {
        proposals += 1;
        let (s, c) = angle.sin_cos();
        let fvals: Vec<f64> = state
            .fvals
            .iter()
            .zip(&f_nu)
            .map(|(f, g)| f * c + g * s)
            .collect();
        let ll = loglik(&fvals);
        check_finite(ll, &fvals)?;
        if ll > threshold {
            let eta = state.eta.iter().zip(&nu).map(|(e, v)| e * c + v * s).collect();
            let mut next = state.clone();
            next.eta = eta;
            next.fvals = fvals;
            next.loglik = ll;
            return Ok(EssOutcome {
                state: next,
                threshold,
                proposals,
            });
        }
        if angle < 0.0 {
            lo = angle;
        } else {
            hi = angle;
        }
        if hi - lo < 1e-300 {
            return Err(Error::Numerical {
                message: "elliptical slice bracket collapsed".into(),
                fvals: Some(state.fvals.clone()),
            });
        }
        angle = lo + rng.random::<f64>() * (hi - lo);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MoveCounter {
    pub attempts: u64,
    pub accepts: u64,
}

impl MoveCounter {
    fn record(&mut self, accepted: bool) {
        self.attempts += 1;
        self.accepts += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepts as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AcceptanceStats {
    pub a: MoveCounter,
    pub b: MoveCounter,
    pub q: MoveCounter,
    /// Givens rotations mixing a selected and an unselected row of `q`.
    pub plane: MoveCounter,
    pub sigma: MoveCounter,
    /// `attempts` counts slice updates, `accepts` counts angle proposals.
    pub ess: MoveCounter,
}

/// Thinned record of a chain state.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iter: usize,
    pub spec: ProjectionSpec,
    pub sigma: Option<f64>,
    /// Latent values at the sites (posterior draw at the data in marginal mode).
    pub fvals: Vec<f64>,
    pub log_posterior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDescriptor {
    pub model: String,
    pub family: Family,
    pub mode: SamplerMode,
    pub d: usize,
    pub extra_axis: bool,
    pub sites: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub descriptor: ChainDescriptor,
    pub seed: u64,
    pub schedule: Schedule,
    pub initial: Snapshot,
    /// One snapshot every `thin` iterations, burn-in included.
    pub snapshots: Vec<Snapshot>,
    pub stats: AcceptanceStats,
}

impl Chain {
    /// Snapshots taken after burn-in.
    pub fn posterior(&self) -> impl Iterator<Item = &Snapshot> {
        let burn_in = self.schedule.burn_in;
        self.snapshots.iter().filter(move |s| s.iter > burn_in)
    }
}

/// Posterior inclusion frequency of each coordinate.
pub fn inclusion_probs(chain: &Chain) -> Result<Vec<f64>> {
    let d = chain.descriptor.d;
    let mut counts = vec![0usize; d];
    let mut total = 0usize;
    for snap in chain.posterior() {
        total += 1;
        for (c, &bit) in counts.iter_mut().zip(snap.spec.mask()) {
            *c += usize::from(bit);
        }
    }
    if total == 0 {
        return Err(Error::Domain("no snapshots after burn-in".into()));
    }
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

struct Adapter {
    accepts: usize,
    attempts: usize,
}

impl Adapter {
    fn new() -> Self {
        Self {
            accepts: 0,
            attempts: 0,
        }
    }

    fn observe(&mut self, accepted: bool, step: &mut f64, target: f64, max: f64) {
        self.attempts += 1;
        self.accepts += usize::from(accepted);
        if self.attempts == ADAPT_BATCH {
            let rate = self.accepts as f64 / self.attempts as f64;
            *step = (*step * (2.0 * (rate - target)).exp()).clamp(1e-4, max);
            self.attempts = 0;
            self.accepts = 0;
        }
    }
}

struct Adaptation {
    a: Adapter,
    q: Adapter,
    plane: Adapter,
    sigma: Adapter,
}

/// Metropolis-within-Gibbs sampler over `(η, a, b, q, σ)` for one target.
pub struct Sampler<'a> {
    target: Target<'a>,
    sites: PointSet,
    cfg: ChainConfig,
    steps: StepSizes,
    stats: AcceptanceStats,
    adaptation: Adaptation,
    adapting: bool,
}

impl<'a> Sampler<'a> {
    pub fn new(target: Target<'a>, cfg: ChainConfig) -> Result<Self> {
        cfg.hyper.validate()?;
        if cfg.mode == SamplerMode::Marginal {
            match &target {
                Target::Data(data) if data.kind().is_regression() => {}
                _ => {
                    return Err(Error::InvalidInput(
                        "marginal sampling is only available for regression data".into(),
                    ))
                }
            }
        }
        let sites = target.sites(cfg.mode)?;
        if sites.dim() != cfg.hyper.d {
            return Err(Error::InvalidInput(format!(
                "sites have dimension {} but the prior has d = {}",
                sites.dim(),
                cfg.hyper.d
            )));
        }
        if sites.aux().is_some() != cfg.hyper.extra_axis {
            return Err(Error::InvalidInput(
                "u-axis in the prior must match u-coordinates in the sites".into(),
            ));
        }
        if let Target::Data(data) = &target {
            if data.kind().extra_axis() != cfg.hyper.extra_axis {
                return Err(Error::InvalidInput(format!(
                    "{} data needs extra_axis = {}",
                    data.kind(),
                    data.kind().extra_axis()
                )));
            }
        }
        Ok(Self {
            steps: cfg.steps,
            target,
            sites,
            cfg,
            stats: AcceptanceStats::default(),
            adaptation: Adaptation {
                a: Adapter::new(),
                q: Adapter::new(),
                plane: Adapter::new(),
                sigma: Adapter::new(),
            },
            adapting: false,
        })
    }

    pub fn sites(&self) -> &PointSet {
        &self.sites
    }

    pub fn stats(&self) -> &AcceptanceStats {
        &self.stats
    }

    pub fn steps(&self) -> &StepSizes {
        &self.steps
    }

    fn latent_loglik(&self, fvals: &[f64], sigma: Option<f64>) -> Result<f64> {
        let ll = match &self.target {
            Target::Data(data) => data.loglik_sites(fvals, sigma, &self.cfg.sigma_prior)?,
            Target::Flat { .. } => 0.0,
            Target::Custom { loglik, .. } => loglik(fvals),
        };
        check_finite(ll, fvals)?;
        Ok(ll)
    }

    fn evaluate(&self, spec: &ProjectionSpec, sigma: Option<f64>, eta: &[f64]) -> Result<(Factor, Vec<f64>, f64)> {
        match self.cfg.mode {
            SamplerMode::Latent => {
                let gram = build_gram(&self.sites, spec)?;
                let fvals = gram.apply(eta);
                let ll = self.latent_loglik(&fvals, sigma)?;
                Ok((Factor::Latent(gram), fvals, ll))
            }
            SamplerMode::Marginal => {
                let kernel = kernel_matrix(&self.sites, spec)?;
                let (ll, chol) = self.marginal_with(&kernel, sigma)?;
                Ok((Factor::Marginal { kernel, chol }, Vec::new(), ll))
            }
        }
    }

    fn marginal_with(&self, kernel: &DMatrix<f64>, sigma: Option<f64>) -> Result<(f64, Cholesky<f64, Dyn>)> {
        let Target::Data(data) = &self.target else {
            unreachable!("marginal mode is checked at construction")
        };
        let sigma = sigma.expect("regression state carries σ");
        let (ll, chol) = gaussian_marginal(data.y(), kernel, sigma)?;
        if ll.is_nan() {
            return Err(Error::Numerical {
                message: "marginal log-likelihood evaluated to NaN".into(),
                fvals: None,
            });
        }
        Ok((ll, chol))
    }

    /// Initial state: `η = 0`, `a = 1`, everything selected, `q = I`, `σ` at
    /// the middle of its support, unless the config overrides them.
    pub fn initial_state(&self) -> Result<ChainState> {
        let d = self.cfg.hyper.d;
        let spec = match &self.cfg.initial_spec {
            Some(spec) => spec.clone(),
            None => ProjectionSpec::identity(d, self.cfg.hyper.extra_axis),
        };
        let sigma = if self.target.has_sigma() {
            let s = self.cfg.initial_sigma.unwrap_or(self.cfg.sigma_prior.midpoint());
            if !self.cfg.sigma_prior.contains(s) {
                return Err(Error::Domain(format!("initial σ = {s} outside prior support")));
            }
            Some(s)
        } else {
            None
        };
        let eta = match self.cfg.mode {
            SamplerMode::Latent => vec![0.0; self.sites.len()],
            SamplerMode::Marginal => Vec::new(),
        };
        let (factor, fvals, loglik) = self.evaluate(&spec, sigma, &eta)?;
        let logprior = self.cfg.hyper.log_prior(&spec);
        Ok(ChainState {
            eta,
            spec,
            sigma,
            fvals,
            loglik,
            logprior,
            factor,
        })
    }

    fn metropolis<R: Rng + ?Sized>(
        &self,
        state: &mut ChainState,
        spec: ProjectionSpec,
        log_ratio_extra: f64,
        rng: &mut R,
    ) -> Result<bool> {
        let (factor, fvals, loglik) = self.evaluate(&spec, state.sigma, &state.eta)?;
        let logprior = self.cfg.hyper.log_prior(&spec);
        let log_ratio = loglik - state.loglik + logprior - state.logprior + log_ratio_extra;
        if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
            state.spec = spec;
            state.factor = factor;
            state.fvals = fvals;
            state.loglik = loglik;
            state.logprior = logprior;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// One elliptical slice refresh of `η`.
    pub fn ess_step<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        if self.cfg.mode != SamplerMode::Latent {
            return Ok(());
        }
        let sigma = state.sigma;
        let outcome = {
            let loglik = |f: &[f64]| self.latent_loglik(f, sigma).unwrap_or(f64::NAN);
            ess_update(state, &loglik, rng)?
        };
        self.stats.ess.attempts += 1;
        self.stats.ess.accepts += outcome.proposals as u64;
        *state = outcome.state;
        Ok(())
    }

    /// Reflected random walk on `σ` inside the prior support.
    pub fn update_sigma<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        let Some(sigma) = state.sigma else {
            return Ok(());
        };
        let z: f64 = rng.sample(StandardNormal);
        let proposal = self.cfg.sigma_prior.reflect(sigma + self.steps.sigma * z);
        let accepted = match (&self.cfg.mode, &state.factor) {
            (SamplerMode::Marginal, Factor::Marginal { kernel, .. }) => {
                let (ll, chol) = self.marginal_with(kernel, Some(proposal))?;
                let accept = accept(ll - state.loglik, rng);
                if accept {
                    state.loglik = ll;
                    if let Factor::Marginal { chol: c, .. } = &mut state.factor {
                        *c = chol;
                    }
                }
                accept
            }
            _ => {
                let ll = self.latent_loglik(&state.fvals, Some(proposal))?;
                let accept = accept(ll - state.loglik, rng);
                if accept {
                    state.loglik = ll;
                }
                accept
            }
        };
        if accepted {
            state.sigma = Some(proposal);
        }
        self.stats.sigma.record(accepted);
        if self.adapting {
            self.adaptation
                .sigma
                .observe(accepted, &mut self.steps.sigma, TARGET_ACCEPT_SIGMA, self.cfg.sigma_prior.hi - self.cfg.sigma_prior.lo);
        }
        Ok(())
    }

    /// Random walk on `log a` against the law of `A` given `|b|`.
    pub fn update_a<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        if state.spec.exponent() == 0 {
            return Ok(());
        }
        let z: f64 = rng.sample(StandardNormal);
        let log_step = self.steps.log_a * z;
        if log_step == 0.0 {
            self.stats.a.record(true);
            return Ok(());
        }
        let proposal = state.spec.a() * log_step.exp();
        let spec = state.spec.with_a(proposal)?;
        let accepted = self.metropolis(state, spec, log_step, rng)?;
        self.stats.a.record(accepted);
        if self.adapting {
            self.adaptation.a.observe(accepted, &mut self.steps.log_a, TARGET_ACCEPT, 5.0);
        }
        Ok(())
    }

    /// Flips one selection bit. Half the time `a` is redrawn from its law
    /// given the proposed `|b|`; when both the current and proposed exponents
    /// are positive, the other half keeps `a` fixed.
    pub fn update_b<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        let d = state.spec.dim();
        let j = rng.random_range(0..d);
        let mut mask = state.spec.mask().to_vec();
        mask[j] = !mask[j];
        let hyper = &self.cfg.hyper;
        let m_new = hyper.exponent(mask.iter().filter(|&&b| b).count());
        let m_old = state.spec.exponent();
        let keep_a = m_new > 0 && m_old > 0 && rng.random::<f64>() < 0.5;
        let (a, log_ratio_extra) = if keep_a {
            (state.spec.a(), 0.0)
        } else {
            // Independence draw from the conditional prior: its density
            // cancels against the prior term of the target.
            let a = sample_a(m_new, hyper.a1, hyper.a2, rng);
            let forward = if m_new > 0 { log_density_a(a, m_new, hyper.a1, hyper.a2)? } else { 0.0 };
            let backward = if m_old > 0 {
                log_density_a(state.spec.a(), m_old, hyper.a1, hyper.a2)?
            } else {
                0.0
            };
            (a, backward - forward)
        };
        let spec = state.spec.with_mask(mask, a)?;
        let accepted = self.metropolis(state, spec, log_ratio_extra, rng)?;
        self.stats.b.record(accepted);
        Ok(())
    }

    /// Moves on `q`: a free sign flip of one row, a Givens rotation of two
    /// rows, then a Cayley random walk.
    ///
    /// When both rows of the Givens pair are selected (or both are not) the
    /// rotation leaves the kernel unchanged, so the angle is drawn uniformly
    /// and always kept. A selected/unselected pair tilts the active subspace
    /// and goes through Metropolis with a symmetric angle proposal.
    pub fn update_q<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        if self.cfg.family == Family::Selection || state.spec.active() == 0 {
            return Ok(());
        }
        let d = state.spec.dim();
        // Negating a row of q negates one effective-input coordinate, which
        // leaves every kernel entry (and hence the likelihood) bit-identical.
        if rng.random::<bool>() {
            let row = rng.random_range(0..d);
            let mut q = state.spec.q().clone();
            q.row_mut(row).neg_mut();
            state.spec = state.spec.with_q(q)?;
        }
        if d == 1 {
            return Ok(());
        }
        let i = rng.random_range(0..d);
        let j = (i + rng.random_range(1..d)) % d;
        let mask = state.spec.mask();
        if mask[i] == mask[j] {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            state.spec = state.spec.with_q(givens(state.spec.q(), i, j, angle))?;
        } else {
            let angle = self.steps.plane * rng.sample::<f64, _>(StandardNormal);
            let spec = state.spec.with_q(givens(state.spec.q(), i, j, angle))?;
            let accepted = self.metropolis(state, spec, 0.0, rng)?;
            self.stats.plane.record(accepted);
            if self.adapting {
                self.adaptation.plane.observe(accepted, &mut self.steps.plane, TARGET_ACCEPT, std::f64::consts::PI);
            }
        }
        let q = propose_rotation(state.spec.q(), self.steps.rotation, rng)?;
        let spec = state.spec.with_q(q)?;
        let accepted = self.metropolis(state, spec, 0.0, rng)?;
        self.stats.q.record(accepted);
        if self.adapting {
            self.adaptation.q.observe(accepted, &mut self.steps.rotation, TARGET_ACCEPT, 10.0);
        }
        Ok(())
    }

    /// Recomputes the cached factor, latent values and log-likelihood from
    /// scratch and compares them with the cache.
    pub fn check_cache(&self, state: &ChainState) -> Result<()> {
        let (_, fvals, ll) = self.evaluate(&state.spec, state.sigma, &state.eta)?;
        let fscale = state.fvals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let fdiff = fvals
            .iter()
            .zip(&state.fvals)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let ldiff = (ll - state.loglik).abs();
        if fdiff > CACHE_TOL * fscale || ldiff > CACHE_TOL * state.loglik.abs().max(1.0) {
            return Err(Error::Numerical {
                message: format!(
                    "cached state drifted: latent values by {fdiff:e}, log-likelihood by {ldiff:e}"
                ),
                fvals: Some(state.fvals.clone()),
            });
        }
        Ok(())
    }

    /// One full sweep of the enabled moves.
    pub fn sweep<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        let moves = self.cfg.moves;
        if moves.latent {
            self.ess_step(state, rng)?;
        }
        if moves.a {
            self.update_a(state, rng)?;
        }
        if moves.b {
            self.update_b(state, rng)?;
        }
        if moves.q {
            self.update_q(state, rng)?;
        }
        if moves.sigma {
            self.update_sigma(state, rng)?;
        }
        Ok(())
    }

    fn snapshot<R: Rng + ?Sized>(&self, iter: usize, state: &ChainState, rng: &mut R) -> Result<Snapshot> {
        let fvals = if !self.cfg.keep_fvals {
            Vec::new()
        } else {
            match &state.factor {
                Factor::Latent(_) => state.fvals.clone(),
                Factor::Marginal { kernel, chol } => self.posterior_draw(state, kernel, chol, rng)?,
            }
        };
        Ok(Snapshot {
            iter,
            spec: state.spec.clone(),
            sigma: state.sigma,
            fvals,
            log_posterior: state.log_posterior(),
        })
    }

    fn bare_snapshot(iter: usize, state: &ChainState) -> Snapshot {
        Snapshot {
            iter,
            spec: state.spec.clone(),
            sigma: state.sigma,
            fvals: state.fvals.clone(),
            log_posterior: state.log_posterior(),
        }
    }

    /// Draw of `f` at the data given `(θ, σ, y)` by pathwise conditioning:
    /// `f̃ + K (K + σ²I)⁻¹ (y - f̃ - ε)` with `f̃ ~ N(0, K)`, `ε ~ N(0, σ²I)`.
    fn posterior_draw<R: Rng + ?Sized>(
        &self,
        state: &ChainState,
        kernel: &DMatrix<f64>,
        chol: &Cholesky<f64, Dyn>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let Target::Data(data) = &self.target else {
            unreachable!("marginal mode is checked at construction")
        };
        let sigma = state.sigma.expect("regression state carries σ");
        let gram = build_gram(&self.sites, &state.spec)?;
        let prior = sample_path(&gram, rng);
        let residual: Vec<f64> = data
            .y()
            .iter()
            .zip(&prior)
            .map(|(y, f)| y - f - sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let alpha = chol.solve(&DVector::from_vec(residual));
        let update = kernel * alpha;
        Ok(prior.iter().zip(update.iter()).map(|(f, u)| f + u).collect())
    }

    /// Runs the configured schedule from [`initial_state`](Self::initial_state).
    pub fn run(mut self, seed: u64) -> Result<Chain> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.initial_state()?;
        let initial = self.snapshot(0, &state, &mut rng)?;
        let schedule = self.cfg.schedule;
        let mut snapshots = Vec::with_capacity(schedule.iterations / schedule.thin);
        for iter in 1..=schedule.iterations {
            self.adapting = self.cfg.adapt && iter <= schedule.burn_in;
            let step = (|| -> Result<()> {
                self.sweep(&mut state, &mut rng)?;
                if self.cfg.check_every > 0 && iter % self.cfg.check_every == 0 {
                    self.check_cache(&state)?;
                }
                Ok(())
            })();
            if let Err(err) = step {
                return Err(Error::ChainAborted {
                    iteration: iter,
                    source: Box::new(err),
                    state: Box::new(Self::bare_snapshot(iter, &state)),
                });
            }
            if iter % schedule.thin == 0 {
                let snap = self.snapshot(iter, &state, &mut rng).map_err(|err| Error::ChainAborted {
                    iteration: iter,
                    source: Box::new(err),
                    state: Box::new(Self::bare_snapshot(iter, &state)),
                })?;
                snapshots.push(snap);
            }
        }
        Ok(Chain {
            descriptor: ChainDescriptor {
                model: self.target.describe(),
                family: self.cfg.family,
                mode: self.cfg.mode,
                d: self.cfg.hyper.d,
                extra_axis: self.cfg.hyper.extra_axis,
                sites: self.sites.len(),
            },
            seed,
            schedule,
            initial,
            snapshots,
            stats: self.stats,
        })
    }
}

/// `q` with rows `i` and `j` rotated by `angle` in their common plane.
fn givens(q: &DMatrix<f64>, i: usize, j: usize, angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = q.clone();
    for col in 0..q.ncols() {
        let (x, y) = (q[(i, col)], q[(j, col)]);
        out[(i, col)] = c * x - s * y;
        out[(j, col)] = s * x + c * y;
    }
    reorthonormalize(out)
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Runs a chain on observed data.
pub fn run_chain(data: &ModelData, cfg: &ChainConfig, seed: u64) -> Result<Chain> {
    Sampler::new(Target::Data(data), cfg.clone())?.run(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihoods::ModelKind;

    fn toy_regression(n: usize) -> ModelData {
        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                vec![0.8 * (t * 6.0).cos(), 0.5 * (t * 6.0).sin()]
            })
            .collect();
        let y = x.iter().map(|p| p[0].sin()).collect();
        ModelData::regression(ModelKind::RegFixed, x, y).unwrap()
    }

    fn config(iterations: usize) -> ChainConfig {
        ChainConfig::new(
            HyperConfig::with_defaults(2, false),
            Family::Projection,
            Schedule::new(iterations, None, 1).unwrap(),
        )
    }

    #[test]
    fn zero_iterations_yield_initial_state_only() {
        let data = toy_regression(6);
        let chain = run_chain(&data, &config(0), 1).unwrap();
        assert!(chain.snapshots.is_empty());
        assert_eq!(chain.initial.iter, 0);
        assert_eq!(chain.initial.spec, ProjectionSpec::identity(2, false));
        assert_eq!(chain.initial.sigma, Some(SigmaPrior::default().midpoint()));
        assert!(inclusion_probs(&chain).is_err());
    }

    #[test]
    fn snapshot_count_follows_thinning() {
        let data = toy_regression(6);
        let mut cfg = config(23);
        cfg.schedule = Schedule::new(23, Some(5), 4).unwrap();
        let chain = run_chain(&data, &cfg, 2).unwrap();
        assert_eq!(chain.snapshots.len(), 23 / 4);
        for c in [chain.stats.a, chain.stats.b, chain.stats.q, chain.stats.sigma] {
            assert!(c.accepts <= c.attempts);
        }
    }

    #[test]
    fn inclusion_of_fixed_and_alternating_masks() {
        let data = toy_regression(4);
        let mut chain = run_chain(&data, &config(0), 1).unwrap();
        chain.schedule.burn_in = 0;
        let snap = |mask: Vec<bool>| Snapshot {
            iter: 1,
            spec: ProjectionSpec::new(1.0, mask, DMatrix::identity(2, 2), false).unwrap(),
            sigma: None,
            fvals: vec![],
            log_posterior: 0.0,
        };
        chain.snapshots = vec![snap(vec![true, false]), snap(vec![true, false])];
        assert_eq!(inclusion_probs(&chain).unwrap(), vec![1.0, 0.0]);
        chain.snapshots = vec![snap(vec![true, false]), snap(vec![false, true])];
        assert_eq!(inclusion_probs(&chain).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn zero_step_a_move_is_accepted_no_op() {
        let data = toy_regression(5);
        let mut cfg = config(1);
        cfg.steps.log_a = 0.0;
        let mut sampler = Sampler::new(Target::Data(&data), cfg).unwrap();
        let mut state = sampler.initial_state().unwrap();
        let before = state.spec.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        sampler.update_a(&mut state, &mut rng).unwrap();
        assert_eq!(state.spec, before);
        assert_eq!(sampler.stats().a.accepts, 1);
    }

    #[test]
    fn a_move_is_skipped_without_selection() {
        let data = toy_regression(5);
        let mut cfg = config(1);
        cfg.initial_spec =
            Some(ProjectionSpec::new(1.0, vec![false, false], DMatrix::identity(2, 2), false).unwrap());
        let mut sampler = Sampler::new(Target::Data(&data), cfg).unwrap();
        let mut state = sampler.initial_state().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            sampler.update_a(&mut state, &mut rng).unwrap();
            sampler.update_q(&mut state, &mut rng).unwrap();
        }
        assert_eq!(state.spec.a(), 1.0);
        assert_eq!(sampler.stats().a.attempts, 0);
        assert_eq!(sampler.stats().q.attempts, 0);
    }

    #[test]
    fn nan_likelihood_is_numerical_failure() {
        let sites = PointSet::new(vec![vec![0.1], vec![0.2]], None).unwrap();
        let nan = |_: &[f64]| f64::NAN;
        let err = ChainState::latent(&sites, ProjectionSpec::identity(1, false), vec![0.0; 2], None, &nan)
            .unwrap_err();
        match err {
            Error::Numerical { fvals, .. } => assert_eq!(fvals.unwrap().len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn marginal_mode_requires_regression() {
        let sites = PointSet::new(vec![vec![0.1]], None).unwrap();
        let mut cfg = ChainConfig::new(
            HyperConfig::with_defaults(1, false),
            Family::Selection,
            Schedule::new(1, None, 1).unwrap(),
        );
        cfg.mode = SamplerMode::Marginal;
        assert!(Sampler::new(Target::Flat { sites, sigma: false }, cfg).is_err());
    }

    #[test]
    fn cache_matches_fresh_evaluation_after_moves() {
        let data = toy_regression(10);
        let mut sampler = Sampler::new(Target::Data(&data), config(1)).unwrap();
        let mut state = sampler.initial_state().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            sampler.sweep(&mut state, &mut rng).unwrap();
            sampler.check_cache(&state).unwrap();
        }
    }
}

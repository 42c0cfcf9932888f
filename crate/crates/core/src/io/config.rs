//! Line-oriented `section.key = value` run configuration.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{rotation_to, BaseFunction, DataSpec, SmallBallConfig, StudyConfig, TruthSpec};
use crate::hyperprior::HyperConfig;
use crate::inference::{ChainConfig, Family, SamplerMode, Schedule, StepSizes};
use crate::likelihoods::{GStar, Link, ModelKind, SigmaPrior};

use super::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthShape {
    Sparse,
    Projected,
}

impl TruthShape {
    pub fn as_str(self) -> &'static str {
        match self {
            TruthShape::Sparse => "sparse",
            TruthShape::Projected => "projected",
        }
    }
}

impl FromStr for TruthShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(TruthShape::Sparse),
            "projected" => Ok(TruthShape::Projected),
            _ => Err(Error::Specification(format!("unknown truth kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub link: Link,
    /// `None` picks the default reference density for the model kind.
    pub gstar: Option<GStar>,
    pub family: Family,
    pub d: usize,

    pub a1: f64,
    pub a2: f64,
    pub p_b: f64,
    pub sigma: SigmaPrior,

    pub mode: SamplerMode,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub steps: StepSizes,
    pub adapt: bool,

    pub data_path: Option<PathBuf>,
    pub density_nodes: usize,
    pub u_nodes: usize,

    pub truth_shape: TruthShape,
    pub alpha: f64,
    pub base: BaseFunction,
    pub active: usize,
    pub direction: Option<Vec<f64>>,
    pub scale: f64,

    pub n: usize,
    pub noise: f64,

    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub bootstrap: usize,
    pub ablation: bool,

    pub eps_grid: Vec<f64>,
    pub grid_size: usize,
    pub paths: usize,

    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let steps = StepSizes::default();
        Self {
            model: ModelKind::RegFixed,
            link: Link::default(),
            gstar: None,
            family: Family::Projection,
            d: 3,
            a1: 1.0,
            a2: 1.0,
            p_b: 0.5,
            sigma: SigmaPrior::default(),
            mode: SamplerMode::Latent,
            iterations: 2000,
            burn_in: 500,
            thin: 5,
            steps,
            adapt: true,
            data_path: None,
            density_nodes: 2048,
            u_nodes: 64,
            truth_shape: TruthShape::Sparse,
            alpha: 1.5,
            base: BaseFunction::Kink,
            active: 1,
            direction: None,
            scale: 1.0,
            n: 200,
            noise: 0.1,
            n_grid: vec![64, 128, 256, 512],
            replicates: 5,
            bootstrap: 1000,
            ablation: false,
            eps_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            grid_size: 128,
            paths: 10_000,
            seed: 1,
            out: PathBuf::from("out"),
        }
    }
}

/// Result of [`parse_config`]: the configuration with the defaults that were
/// applied and any warnings raised while reading.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub config: RunConfig,
    pub defaults: Vec<String>,
    pub warnings: Vec<String>,
}

pub const KEYS: &[&str] = &[
    "model.kind",
    "model.link",
    "model.gstar",
    "model.family",
    "model.d",
    "prior.a1",
    "prior.a2",
    "prior.pb",
    "prior.sigma_lo",
    "prior.sigma_hi",
    "sampler.mode",
    "sampler.iterations",
    "sampler.burn_in",
    "sampler.thin",
    "sampler.step_log_a",
    "sampler.step_rotation",
    "sampler.step_plane",
    "sampler.step_sigma",
    "sampler.adapt",
    "data.path",
    "data.density_nodes",
    "data.u_nodes",
    "truth.kind",
    "truth.alpha",
    "truth.base",
    "truth.active",
    "truth.direction",
    "truth.scale",
    "sim.n",
    "sim.noise",
    "study.n_grid",
    "study.replicates",
    "study.bootstrap",
    "study.ablation",
    "smallball.eps",
    "smallball.grid",
    "smallball.paths",
    "run.seed",
    "run.out",
];

fn parse_value<T: FromStr>(raw: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| format!("cannot parse '{raw}': {e}"))
}

fn parse_list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    raw.split(',').map(|s| parse_value(s.trim())).collect()
}

fn parse_bool(raw: &str) -> std::result::Result<bool, String> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{raw}'")),
    }
}

fn apply(cfg: &mut RunConfig, key: &str, raw: &str) -> std::result::Result<(), String> {
    let e = |err: Error| err.to_string();
    match key {
        "model.kind" => cfg.model = raw.parse().map_err(e)?,
        "model.link" => cfg.link = raw.parse().map_err(e)?,
        "model.gstar" => cfg.gstar = if raw == "auto" { None } else { Some(raw.parse().map_err(e)?) },
        "model.family" => cfg.family = raw.parse().map_err(e)?,
        "model.d" => cfg.d = parse_value(raw)?,
        "prior.a1" => cfg.a1 = parse_value(raw)?,
        "prior.a2" => cfg.a2 = parse_value(raw)?,
        "prior.pb" => cfg.p_b = parse_value(raw)?,
        "prior.sigma_lo" => cfg.sigma.lo = parse_value(raw)?,
        "prior.sigma_hi" => cfg.sigma.hi = parse_value(raw)?,
        "sampler.mode" => cfg.mode = raw.parse().map_err(e)?,
        "sampler.iterations" => cfg.iterations = parse_value(raw)?,
        "sampler.burn_in" => cfg.burn_in = parse_value(raw)?,
        "sampler.thin" => cfg.thin = parse_value(raw)?,
        "sampler.step_log_a" => cfg.steps.log_a = parse_value(raw)?,
        "sampler.step_rotation" => cfg.steps.rotation = parse_value(raw)?,
        "sampler.step_plane" => cfg.steps.plane = parse_value(raw)?,
        "sampler.step_sigma" => cfg.steps.sigma = parse_value(raw)?,
        "sampler.adapt" => cfg.adapt = parse_bool(raw)?,
        "data.path" => cfg.data_path = Some(PathBuf::from(raw)),
        "data.density_nodes" => cfg.density_nodes = parse_value(raw)?,
        "data.u_nodes" => cfg.u_nodes = parse_value(raw)?,
        "truth.kind" => cfg.truth_shape = raw.parse().map_err(e)?,
        "truth.alpha" => cfg.alpha = parse_value(raw)?,
        "truth.base" => cfg.base = raw.parse().map_err(e)?,
        "truth.active" => cfg.active = parse_value(raw)?,
        "truth.direction" => cfg.direction = Some(parse_list(raw)?),
        "truth.scale" => cfg.scale = parse_value(raw)?,
        "sim.n" => cfg.n = parse_value(raw)?,
        "sim.noise" => cfg.noise = parse_value(raw)?,
        "study.n_grid" => cfg.n_grid = parse_list(raw)?,
        "study.replicates" => cfg.replicates = parse_value(raw)?,
        "study.bootstrap" => cfg.bootstrap = parse_value(raw)?,
        "study.ablation" => cfg.ablation = parse_bool(raw)?,
        "smallball.eps" => cfg.eps_grid = parse_list(raw)?,
        "smallball.grid" => cfg.grid_size = parse_value(raw)?,
        "smallball.paths" => cfg.paths = parse_value(raw)?,
        "run.seed" => cfg.seed = parse_value(raw)?,
        "run.out" => cfg.out = PathBuf::from(raw),
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

/// Parses a configuration. Blank lines and lines starting with `#` are
/// ignored; a repeated key keeps its last value and records a warning.
/// Omitted `sampler.burn_in` defaults to a quarter of the iterations.
pub fn parse_config(text: &str) -> Result<ParsedConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut warnings = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected 'key = value', got '{trimmed}'"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unknown key '{key}'"),
            });
        }
        if value.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("empty value for '{key}'"),
            });
        }
        apply(&mut cfg, key, value).map_err(|message| Error::Parse { line: line_no, message })?;
        if let Some(prev) = seen.insert(key.to_string(), line_no) {
            let w = format!("key '{key}' on line {line_no} overrides line {prev}");
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    if !seen.contains_key("sampler.burn_in") {
        cfg.burn_in = cfg.iterations / 4;
    }
    let defaults: Vec<String> = KEYS
        .iter()
        .filter(|k| !seen.contains_key(**k))
        .map(|k| match value_of(&cfg, k) {
            Some(v) => format!("{k} = {v}"),
            None => format!("{k} unset"),
        })
        .collect();
    for d in &defaults {
        log::info!("default {d}");
    }
    cfg.validate().map_err(|(key, message)| Error::Parse {
        line: seen.get(key).copied().unwrap_or(0),
        message,
    })?;
    Ok(ParsedConfig {
        config: cfg,
        defaults,
        warnings,
    })
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn value_of(cfg: &RunConfig, key: &str) -> Option<String> {
    Some(match key {
        "model.kind" => cfg.model.to_string(),
        "model.link" => cfg.link.as_str().into(),
        "model.gstar" => cfg.gstar.map_or("auto".into(), |g| g.to_string()),
        "model.family" => cfg.family.to_string(),
        "model.d" => cfg.d.to_string(),
        "prior.a1" => fmt_f64(cfg.a1),
        "prior.a2" => fmt_f64(cfg.a2),
        "prior.pb" => fmt_f64(cfg.p_b),
        "prior.sigma_lo" => fmt_f64(cfg.sigma.lo),
        "prior.sigma_hi" => fmt_f64(cfg.sigma.hi),
        "sampler.mode" => cfg.mode.to_string(),
        "sampler.iterations" => cfg.iterations.to_string(),
        "sampler.burn_in" => cfg.burn_in.to_string(),
        "sampler.thin" => cfg.thin.to_string(),
        "sampler.step_log_a" => fmt_f64(cfg.steps.log_a),
        "sampler.step_rotation" => fmt_f64(cfg.steps.rotation),
        "sampler.step_plane" => fmt_f64(cfg.steps.plane),
        "sampler.step_sigma" => fmt_f64(cfg.steps.sigma),
        "sampler.adapt" => cfg.adapt.to_string(),
        "data.path" => cfg.data_path.as_ref()?.display().to_string(),
        "data.density_nodes" => cfg.density_nodes.to_string(),
        "data.u_nodes" => cfg.u_nodes.to_string(),
        "truth.kind" => cfg.truth_shape.as_str().into(),
        "truth.alpha" => fmt_f64(cfg.alpha),
        "truth.base" => cfg.base.to_string(),
        "truth.active" => cfg.active.to_string(),
        "truth.direction" => {
            let dir: Vec<String> = cfg.direction.as_ref()?.iter().map(|v| fmt_f64(*v)).collect();
            dir.join(",")
        }
        "truth.scale" => fmt_f64(cfg.scale),
        "sim.n" => cfg.n.to_string(),
        "sim.noise" => fmt_f64(cfg.noise),
        "study.n_grid" => join(&cfg.n_grid),
        "study.replicates" => cfg.replicates.to_string(),
        "study.bootstrap" => cfg.bootstrap.to_string(),
        "study.ablation" => cfg.ablation.to_string(),
        "smallball.eps" => {
            let eps: Vec<String> = cfg.eps_grid.iter().map(|v| fmt_f64(*v)).collect();
            eps.join(",")
        }
        "smallball.grid" => cfg.grid_size.to_string(),
        "smallball.paths" => cfg.paths.to_string(),
        "run.seed" => cfg.seed.to_string(),
        "run.out" => cfg.out.display().to_string(),
        _ => return None,
    })
}

/// Writes every set key, one per line, in canonical order.
pub fn serialize_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for key in KEYS {
        if let Some(v) = value_of(cfg, key) {
            writeln!(out, "{key} = {v}").expect("writing to a String");
        }
    }
    out
}

type Invalid = (&'static str, String);

impl RunConfig {
    /// Checks every field against the range its owning module accepts.
    /// Errors name the offending key.
    pub fn validate(&self) -> std::result::Result<(), Invalid> {
        if self.d == 0 || self.d > 16 {
            return Err(("model.d", format!("dimension {} outside 1..=16", self.d)));
        }
        HyperConfig::new(self.a1, self.a2, self.p_b, self.d, false).map_err(|e| {
            let key = if !(self.a1 >= 1.0) {
                "prior.a1"
            } else if !(self.a2 > 0.0) {
                "prior.a2"
            } else {
                "prior.pb"
            };
            (key, e.to_string())
        })?;
        SigmaPrior::new(self.sigma.lo, self.sigma.hi).map_err(|e| ("prior.sigma_hi", e.to_string()))?;
        if self.mode == SamplerMode::Marginal && !self.model.is_regression() {
            return Err(("sampler.mode", format!("marginal sampling needs a regression model, not {}", self.model)));
        }
        Schedule::new(self.iterations, Some(self.burn_in), self.thin).map_err(|e| {
            let key = if self.thin == 0 { "sampler.thin" } else { "sampler.burn_in" };
            (key, e.to_string())
        })?;
        for (key, v) in [
            ("sampler.step_log_a", self.steps.log_a),
            ("sampler.step_rotation", self.steps.rotation),
            ("sampler.step_plane", self.steps.plane),
            ("sampler.step_sigma", self.steps.sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err((key, format!("step size {v} must be finite and nonnegative")));
            }
        }
        if self.density_nodes == 0 {
            return Err(("data.density_nodes", "need at least one quadrature node".into()));
        }
        if self.u_nodes == 0 {
            return Err(("data.u_nodes", "need at least one quadrature node".into()));
        }
        if self.active > self.d {
            return Err(("truth.active", format!("{} active coordinates with d = {}", self.active, self.d)));
        }
        if let Some(dir) = &self.direction {
            if dir.len() != self.d {
                return Err(("truth.direction", format!("direction has {} entries for d = {}", dir.len(), self.d)));
            }
        }
        self.truth_spec().map_err(|e| {
            let key = if matches!(e, Error::Specification(ref m) if m.contains("rotation")) {
                "truth.direction"
            } else {
                "truth.alpha"
            };
            (key, e.to_string())
        })?;
        if self.n == 0 {
            return Err(("sim.n", "sample size must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(("sim.noise", format!("noise level {} must be nonnegative", self.noise)));
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(("study.n_grid", "must be positive and strictly increasing".into()));
        }
        if self.replicates == 0 {
            return Err(("study.replicates", "need at least one replicate".into()));
        }
        if self.eps_grid.is_empty()
            || !(self.eps_grid[0] > 0.0)
            || self.eps_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(("smallball.eps", "must be positive and strictly increasing".into()));
        }
        if self.grid_size == 0 {
            return Err(("smallball.grid", "grid size must be positive".into()));
        }
        if self.paths == 0 {
            return Err(("smallball.paths", "need at least one path".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> Result<HyperConfig> {
        HyperConfig::new(self.a1, self.a2, self.p_b, self.d, self.model.extra_axis())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.iterations, Some(self.burn_in), self.thin)
    }

    pub fn chain_config(&self) -> Result<ChainConfig> {
        let mut chain = ChainConfig::new(self.hyper()?, self.family, self.schedule()?);
        chain.mode = self.mode;
        chain.sigma_prior = self.sigma;
        chain.steps = self.steps;
        chain.adapt = self.adapt;
        if self.ablation {
            chain.moves.b = false;
        }
        Ok(chain)
    }

    pub fn truth_spec(&self) -> Result<TruthSpec> {
        let mask: Vec<bool> = (0..self.d).map(|i| i < self.active).collect();
        let spec = match self.truth_shape {
            TruthShape::Sparse => TruthSpec::sparse(self.alpha, mask, self.base)?,
            TruthShape::Projected => {
                let dir = self.direction.clone().unwrap_or_else(|| vec![1.0; self.d]);
                TruthSpec::projected(self.alpha, mask, rotation_to(&dir)?, self.base)?
            }
        };
        spec.with_scale(self.scale)
    }

    pub fn gstar(&self) -> GStar {
        self.gstar.unwrap_or_else(|| GStar::default_for(self.model))
    }

    pub fn data_spec(&self) -> DataSpec {
        let mut spec = DataSpec::new(self.model, self.n);
        spec.noise = self.noise;
        spec.link = self.link;
        spec.gstar = self.gstar();
        spec.density_nodes = self.density_nodes;
        spec.u_nodes = self.u_nodes;
        spec
    }

    pub fn study_config(&self) -> Result<StudyConfig> {
        let mut study = StudyConfig {
            data: self.data_spec(),
            truth: self.truth_spec()?,
            n_grid: self.n_grid.clone(),
            replicates: self.replicates,
            chain: self.chain_config()?,
            bootstrap: self.bootstrap,
            seed: self.seed,
        };
        if self.ablation {
            study.pin_all_ones();
        }
        Ok(study)
    }

    pub fn smallball_config(&self) -> Result<SmallBallConfig> {
        Ok(SmallBallConfig {
            hyper: HyperConfig::new(self.a1, self.a2, self.p_b, self.d, false)?,
            eps_grid: self.eps_grid.clone(),
            grid_size: self.grid_size,
            paths: self.paths,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let parsed = parse_config("").unwrap();
        assert_eq!(parsed.config, RunConfig::default());
        assert_eq!(parsed.defaults.len(), KEYS.len());
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn burn_in_defaults_to_quarter() {
        let cfg = parse_config("sampler.iterations = 400\n").unwrap().config;
        assert_eq!(cfg.burn_in, 100);
    }

    #[test]
    fn shape_rejected_below_one() {
        let err = parse_config("# comment\n\nprior.a1 = 0.5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicates_keep_last_value() {
        let parsed = parse_config("sim.n = 10\nsim.n = 20\n").unwrap();
        assert_eq!(parsed.config.n, 20);
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn malformed_and_unknown_lines() {
        assert!(matches!(parse_config("sim.n 10"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_config("\nsim.m = 10"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_config("sim.n = ten"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_config("model.kind = classif\nsampler.mode = marginal"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn round_trip_with_optional_keys() {
        let text = "model.kind = density-reg\ndata.path = in.csv\ntruth.kind = projected\n\
                    truth.direction = 1,2,0.5\nsmallball.eps = 0.1,0.30000000000000004\n";
        let cfg = parse_config(text).unwrap().config;
        let again = parse_config(&serialize_config(&cfg)).unwrap().config;
        assert_eq!(cfg, again);
    }
}

//! Command-line front end for fitting, simulation, rate studies and
//! small-ball diagnostics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpadapt::harness::{gen_data, make_truth, run_rate_study, smallball_mc};
use gpadapt::hyperprior::ProjectionMatrixR;
use gpadapt::inference::{inclusion_probs, run_chain, Chain, MoveCounter};
use gpadapt::io::{
    emit_report, fmt_f64, load_chain, parse_config, persist_chain, read_dataset, serialize_config, write_dataset,
    DirLock, ReadOptions, Report, RunConfig,
};
use gpadapt::likelihoods::{Link, ModelKind};
use gpadapt::metrics::{matrix_distance, MatrixNorm, MetricReport};
use gpadapt::{Error, Result};

#[derive(Parser)]
#[command(name = "gpadapt", version, about = "Adaptive Gaussian-process priors: fitting and experiments")]
struct Cli {
    /// Worker threads for replicate-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Line-oriented `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `model.kind` (reg-fixed, reg-random, classif, density, density-reg).
    #[arg(long)]
    model: Option<ModelKind>,
    /// Overrides `model.link` (logistic, probit).
    #[arg(long)]
    link: Option<Link>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a data file and write the chain with summaries.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Data file; defaults to `data.path` from the configuration.
        data: Option<PathBuf>,
        /// Store the latent values of every snapshot, not only their digest.
        #[arg(long)]
        full_fvals: bool,
    },
    /// Draw a dataset from the configured truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the posterior contraction study over the configured n grid.
    RateStudy {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate prior small-ball probabilities around the configured truth.
    Smallball {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a persisted chain.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// Directory holding `chain.jsonl`.
        chain_dir: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let parsed = parse_config(&text)?;
    for key in &parsed.defaults {
        log::info!("default applied: {key}");
    }
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    let mut cfg = parsed.config;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(model) = common.model {
        cfg.model = model;
    }
    if let Some(link) = common.link {
        cfg.link = link;
    }
    cfg.validate()
        .map_err(|(key, msg)| Error::Configuration(format!("{key}: {msg}")))?;
    Ok(cfg)
}

fn counter_metric(name: &str, c: &MoveCounter) -> Option<MetricReport> {
    (c.attempts > 0).then(|| MetricReport::exact(format!("accept_{name}"), c.rate()))
}

fn chain_metrics(chain: &Chain, inclusion: &[f64]) -> Vec<MetricReport> {
    let mut out: Vec<MetricReport> = inclusion
        .iter()
        .enumerate()
        .map(|(k, p)| MetricReport::exact(format!("inclusion_{}", k + 1), *p))
        .collect();
    let post: Vec<_> = chain.posterior().collect();
    if !post.is_empty() {
        let n = post.len() as f64;
        out.push(MetricReport::exact("posterior_mean_a", post.iter().map(|s| s.spec.a()).sum::<f64>() / n));
        let sigmas: Vec<f64> = post.iter().filter_map(|s| s.sigma).collect();
        if !sigmas.is_empty() {
            out.push(MetricReport::exact("posterior_mean_sigma", sigmas.iter().sum::<f64>() / sigmas.len() as f64));
        }
    }
    let s = &chain.stats;
    for (name, c) in [("a", &s.a), ("b", &s.b), ("q", &s.q), ("plane", &s.plane), ("sigma", &s.sigma)] {
        out.extend(counter_metric(name, c));
    }
    out
}

fn print_inclusion(inclusion: &[f64]) {
    let cells: Vec<String> = inclusion.iter().map(|p| format!("{p:.3}")).collect();
    println!("inclusion probabilities: {}", cells.join(" "));
}

fn fit(common: &Common, data_path: Option<PathBuf>, full_fvals: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let path = data_path
        .or_else(|| cfg.data_path.clone())
        .ok_or_else(|| Error::Configuration("no data file given (argument or data.path)".into()))?;
    let opts = ReadOptions {
        link: cfg.link,
        gstar: cfg.gstar,
        density_nodes: cfg.density_nodes,
        u_nodes: cfg.u_nodes,
        seed: cfg.seed,
    };
    let data = read_dataset(&path, cfg.model, &opts)?;
    if data.d() != cfg.d {
        return Err(Error::Configuration(format!(
            "model.d: data has {} covariates, configuration says {}",
            data.d(),
            cfg.d
        )));
    }
    log::info!("fitting {} model to {} observations", cfg.model, data.n());
    let chain = run_chain(&data, &cfg.chain_config()?, cfg.seed)?;
    persist_chain(&chain, &cfg.out, full_fvals)?;
    let _lock = DirLock::acquire(&cfg.out)?;
    let inclusion = inclusion_probs(&chain)?;
    emit_report(Report::Metrics(&chain_metrics(&chain, &inclusion)), &cfg.out)?;
    write_config(&cfg, &cfg.out)?;
    print_inclusion(&inclusion);
    println!("chain written to {}", cfg.out.display());
    Ok(())
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.txt");
    fs::write(&path, serialize_config(cfg)).map_err(|e| Error::io(&path, e))
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let truth = make_truth(&cfg.truth_spec()?)?;
    let data = gen_data(&cfg.data_spec(), &truth, cfg.seed)?;
    let _lock = DirLock::acquire(&cfg.out)?;
    let path = cfg.out.join("data.csv");
    write_dataset(&data, &path)?;
    write_config(&cfg, &cfg.out)?;
    println!("{} observations written to {}", data.n(), path.display());
    Ok(())
}

fn rate_study(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let report = run_rate_study(&cfg.study_config()?)?;
    let _lock = DirLock::acquire(&cfg.out)?;
    emit_report(Report::Rate(&report), &cfg.out)?;
    write_config(&cfg, &cfg.out)?;
    println!(
        "slope {:.4} (95% interval {:.4} to {:.4}), theory exponent {:.4}, {:.0}% of cells succeeded",
        report.slope,
        report.slope_ci.0,
        report.slope_ci.1,
        report.theory_exponent,
        100.0 * report.success_rate
    );
    Ok(())
}

fn smallball(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let truth = make_truth(&cfg.truth_spec()?)?;
    let est = smallball_mc(&truth, &cfg.smallball_config()?)?;
    let _lock = DirLock::acquire(&cfg.out)?;
    emit_report(Report::SmallBall(&est), &cfg.out)?;
    write_config(&cfg, &cfg.out)?;
    for e in &est {
        println!("eps {:<8} probability {:.5} [{:.5}, {:.5}]", e.eps, e.estimate, e.ci.0, e.ci.1);
    }
    Ok(())
}

fn summarize(common: &Common, chain_dir: &Path) -> Result<()> {
    let chain = load_chain(chain_dir)?;
    let cfg = common.config.as_ref().map(|_| load_config(common)).transpose()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.as_ref().map(|c| c.out.clone()))
        .unwrap_or_else(|| chain_dir.to_path_buf());
    let inclusion = inclusion_probs(&chain)?;
    let mut metrics = chain_metrics(&chain, &inclusion);

    // Reference projection: the configured truth if any, else the posterior mean.
    let post: Vec<_> = chain.posterior().collect();
    let projections: Vec<ProjectionMatrixR> = post.iter().map(|s| ProjectionMatrixR::from_spec(&s.spec)).collect();
    let d = chain.descriptor.d;
    let (reference, label) = match &cfg {
        Some(c) => {
            let truth = c.truth_spec()?;
            if truth.d() != d {
                return Err(Error::Configuration(format!("model.d: chain has d = {d}, configuration says {}", truth.d())));
            }
            (truth.projection().matrix, "truth")
        }
        None => {
            let mut mean = ProjectionMatrixR::from_spec(&chain.initial.spec).matrix.scale(0.0);
            for p in &projections {
                mean += &p.matrix / projections.len() as f64;
            }
            (mean, "posterior_mean")
        }
    };
    let mut trace = format!("# iter frobenius_distance_to_{label}\n");
    let mut total = 0.0;
    for (s, p) in post.iter().zip(&projections) {
        let dist = matrix_distance(&p.matrix, &reference, MatrixNorm::Frobenius)?;
        total += dist;
        trace.push_str(&format!("{} {}\n", s.iter, fmt_f64(dist)));
    }
    if !projections.is_empty() {
        metrics.push(MetricReport::exact(
            format!("mean_projection_distance_to_{label}"),
            total / projections.len() as f64,
        ));
    }
    let _lock = DirLock::acquire(&out)?;
    emit_report(Report::Metrics(&metrics), &out)?;
    let path = out.join("projection_trace.dat");
    fs::write(&path, trace).map_err(|e| Error::io(&path, e))?;
    print_inclusion(&inclusion);
    for m in &metrics[inclusion.len()..] {
        println!("{}: {:.5}", m.name, m.value);
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } | Error::Configuration(_) | Error::Specification(_) | Error::InvalidInput(_) => 2,
        Error::Ingestion { .. } | Error::Load { .. } => 3,
        Error::InsufficientReplicates { .. } => 4,
        e if e.is_numerical() => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot start {threads} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Fit { common, data, full_fvals } => fit(common, data.clone(), *full_fvals),
        Command::Simulate { common } => simulate(common),
        Command::RateStudy { common } => rate_study(common),
        Command::Smallball { common } => smallball(common),
        Command::Summarize { common, chain_dir } => summarize(common, chain_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Configuration("x".into())), 2);
        assert_eq!(exit_code(&Error::Parse { line: 3, message: "x".into() }), 2);
        assert_eq!(
            exit_code(&Error::Ingestion { row: 1, column: "y".into(), message: "x".into() }),
            3
        );
        assert_eq!(exit_code(&Error::Factorization { ladder: vec![1e-10] }), 4);
        assert_eq!(exit_code(&Error::InsufficientReplicates { succeeded: 1, total: 5 }), 4);
    }
}

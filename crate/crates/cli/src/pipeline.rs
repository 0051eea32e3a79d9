//! `solve -> consistency_check -> spike_test` with the result bundle.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tic_mkv::equilibrium::{ConsistencyReport, IterationRecord, Status};
use tic_mkv::rng::derive_seed;
use tic_mkv::verify::{spike_test, McOptions, ProbePoint, SpikeReport};
use tic_mkv::{consistency_check, contraction_report, solve_equilibrium, DistributionCurve, EquilibriumResult};

use crate::bundle::{sha256_hex, Bundle, FileEntry};
use crate::config::RunConfig;
use crate::CliError;

const CONSISTENCY_TAG: u64 = 1;
const SPIKE_TAG: u64 = 2;

pub const CONFIG_ECHO: &str = "config-echo.toml";
pub const SUMMARY: &str = "summary.json";

/// Command-line overrides of a configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub fresh_seed: u64,
    pub m_distance: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSummary {
    pub mc_seed: u64,
    pub mc_paths: usize,
    pub probes: usize,
    pub failed: usize,
    pub overall_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub backend: String,
    pub seed: u64,
    pub n_particles: usize,
    pub steps: usize,
    pub status: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_m_distance: f64,
    pub tol_fp: f64,
    pub fitted_rate: Option<f64>,
    pub consistency: Option<ConsistencySummary>,
    pub spike: Option<SpikeSummary>,
    pub checks_passed: bool,
    /// SHA-256 of the configuration echo.
    pub model_fingerprint: String,
    pub files: Vec<FileEntry>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    pub directory: PathBuf,
    pub exit_code: i32,
}

fn history_csv(history: &[IterationRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("iteration,m_distance,contraction_ratio,strategy_delta,tolerance\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.iteration,
            r.m_distance,
            opt(r.contraction_ratio),
            opt(r.strategy_delta),
            r.tolerance
        );
    }
    s
}

/// Times `0, T/4, T/2` (snapped to the grid) by the quartiles of the cloud at
/// each time, coordinate-wise.
pub fn default_probes(mu: &DistributionCurve) -> Vec<ProbePoint> {
    let k_max = mu.steps();
    let mut probes = Vec::new();
    for frac in [0.0, 0.25, 0.5] {
        let k = (frac * k_max as f64).round() as usize;
        let cloud = mu.measure(k);
        let axes: Vec<Vec<f64>> = (0..cloud.dim()).map(|c| cloud.sorted_axis(c)).collect();
        for p in [0.25, 0.5, 0.75] {
            let x = axes.iter().map(|a| a[((a.len() - 1) as f64 * p).round() as usize]).collect();
            probes.push(ProbePoint { t: mu.grid()[k], x });
        }
    }
    probes
}

fn echo(config: &RunConfig, seed: u64) -> String {
    let mut c = config.clone();
    c.seed = Some(seed);
    c.output.directory = None;
    c.to_toml()
}

/// Runs the configured pipeline and writes the bundle. Configuration errors
/// are returned before anything is written; later failures still leave the
/// bundle and the summary on disk and are reported through the exit code.
pub fn run(config: &RunConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let model = config.validate()?;
    let dir = opts
        .out
        .clone()
        .or_else(|| config.output.directory.clone())
        .ok_or_else(|| CliError::Config("no output directory (output.directory or --out)".into()))?;
    let seed = config.effective_seed(opts.seed);
    let mut bundle = Bundle::create(&dir)?;
    let echo_text = echo(config, seed);
    bundle.write(CONFIG_ECHO, echo_text.as_bytes())?;

    let eq_opts = config.equilibrium_options(seed, opts.workers);
    let eq = solve_equilibrium(&model.problem, &model.initial, &eq_opts)?;
    write_equilibrium(&mut bundle, &eq, config.output.paths)?;

    let mut consistency = None;
    let mut spike = None;
    if eq.status == Status::Converged {
        if config.checks.consistency {
            let fresh_seed = config.checks.fresh_seed.unwrap_or_else(|| derive_seed(seed, CONSISTENCY_TAG));
            let r: ConsistencyReport = consistency_check(&eq, &model.problem, &model.initial, fresh_seed, opts.workers)?;
            consistency =
                Some(ConsistencySummary { fresh_seed, m_distance: r.m_distance, tolerance: r.tolerance, pass: r.pass });
        }
        if config.checks.spike {
            let report = run_spike(config, &model.problem, &eq, seed, opts.workers)?;
            write_spike(&mut bundle, &report)?;
            spike = Some(SpikeSummary {
                mc_seed: report.mc.seed,
                mc_paths: report.mc.n_paths,
                probes: report.probes.len(),
                failed: report.probes.iter().filter(|p| !p.pass).count(),
                overall_pass: report.overall_pass,
            });
        }
    }

    let checks_passed = eq.status == Status::Converged
        && consistency.as_ref().is_none_or(|c| c.pass)
        && spike.as_ref().is_none_or(|s| s.overall_pass);
    let distances = eq.distances();
    let summary = Summary {
        model: model.problem.name().to_string(),
        backend: match eq_opts.backend.unwrap_or(model.problem.natural_backend()) {
            tic_mkv::Backend::Riccati => "riccati".into(),
            tic_mkv::Backend::Hjb1d => "hjb1d".into(),
        },
        seed,
        n_particles: eq.n_particles,
        steps: eq_opts.steps,
        status: status_name(eq.status).into(),
        converged: eq.converged,
        iterations: eq.iterations,
        final_m_distance: *distances.last().expect("at least one iteration"),
        tol_fp: eq_opts.tol_fp,
        fitted_rate: contraction_report(&distances).ok().map(|r| r.fitted_rate),
        consistency,
        spike,
        checks_passed,
        model_fingerprint: sha256_hex(echo_text.as_bytes()),
        files: bundle.files().to_vec(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    bundle.write(SUMMARY, json.as_bytes())?;
    let exit_code = match (eq.status, checks_passed) {
        (Status::Converged, true) => 0,
        (Status::Converged, false) => 4,
        _ => 3,
    };
    Ok(RunOutcome { summary, directory: dir, exit_code })
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Converged => "converged",
        Status::MaxIterations => "max_iterations",
        Status::Diverged => "diverged",
    }
}

fn write_equilibrium(bundle: &mut Bundle, eq: &EquilibriumResult, paths: bool) -> Result<(), CliError> {
    bundle.write_with("curve.csv", |w| eq.mu_star.write_csv(w))?;
    bundle.write_with("strategy.csv", |w| eq.strategy_star.write_csv(w))?;
    bundle.write("history.csv", history_csv(&eq.history).as_bytes())?;
    if paths {
        bundle.write_with("paths.bin", |w| eq.paths.write_binary(w))?;
    }
    Ok(())
}

fn run_spike(
    config: &RunConfig,
    problem: &tic_mkv::Problem,
    eq: &EquilibriumResult,
    seed: u64,
    workers: Option<usize>,
) -> Result<SpikeReport, CliError> {
    let probes = config.checks.probes.clone().unwrap_or_else(|| default_probes(&eq.mu_star));
    let mc = McOptions { n_paths: config.numerics.mc_paths, seed: derive_seed(seed, SPIKE_TAG), workers };
    let ladder = config.ladder(problem.horizon());
    Ok(spike_test(problem, eq, &probes, &config.checks.probe_controls, &ladder, &mc)?)
}

fn write_spike(bundle: &mut Bundle, report: &SpikeReport) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).expect("spike report serializes") + "\n";
    bundle.write("spike.json", json.as_bytes())?;
    bundle.write_with("spike_probes.csv", |w| report.write_probe_csv(w))
}

/// Re-solves the equilibrium recorded in a bundle (configuration echo with
/// its seed) and repeats the spike test. Returns the fresh report and the
/// saved `overall_pass`, if the bundle has one.
pub fn verify_bundle(dir: &Path, workers: Option<usize>) -> Result<(SpikeReport, Option<bool>), CliError> {
    let config = RunConfig::load(&dir.join(CONFIG_ECHO))?;
    let model = config.validate()?;
    let seed = config.effective_seed(None);
    let eq = solve_equilibrium(&model.problem, &model.initial, &config.equilibrium_options(seed, workers))?;
    if eq.status != Status::Converged {
        return Err(CliError::Divergence(format!("equilibrium did not converge ({})", status_name(eq.status))));
    }
    let report = run_spike(&config, &model.problem, &eq, seed, workers)?;
    let saved = match std::fs::read_to_string(dir.join("spike.json")) {
        Ok(text) => {
            let old: SpikeReport =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("spike.json: {e}")))?;
            Some(old.overall_pass)
        }
        Err(_) => None,
    };
    Ok((report, saved))
}

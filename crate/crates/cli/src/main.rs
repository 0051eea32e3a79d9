use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tic_mkv::equilibrium::{zero_strategy, Backend};
use tic_mkv::riccati::{solve_riccati_family_with, OffsetForm, RiccatiOptions};
use tic_mkv::simulate::FrozenCurve;
use tic_mkv::verify::constant_curve;
use tic_mkv::{simulate_t1, Problem, SimOptions};
use tic_mkv_cli::{run, verify_bundle, CliError, ModelSection, RunConfig, RunOptions};

#[derive(Parser)]
#[command(name = "tic-mkv", version, about = "Equilibria of time-inconsistent McKean-Vlasov control problems")]
struct Cli {
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true, env = "TIC_MKV_SEED")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline from a TOML configuration.
    Run {
        config: PathBuf,
        /// Bundle directory; overrides output.directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Equilibrium of an LQ catalog model (Riccati backend), no checks.
    SolveLq(SolveArgs),
    /// Equilibrium of a general one-dimensional model (HJB backend), no checks.
    SolveHjb1d(SolveArgs),
    /// Law of the particle system under the zero control.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        k: usize,
        /// Curve CSV path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagonal of the Riccati family on the constant curve at the initial law.
    Riccati {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 2000)]
        k: usize,
        /// Size of the cloud representing the initial law.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value = "derived")]
        offset_form: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-runs the spike test on a saved bundle.
    Verify {
        #[arg(long)]
        bundle: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Catalog name.
    #[arg(long, alias = "model")]
    catalog: String,
    /// Catalog parameter as `key=value` (TOML value syntax); repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    k: usize,
    #[arg(long, default_value_t = 400)]
    kx: usize,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    x_domain: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-3)]
    tol_fp: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    damping: f64,
    #[arg(long)]
    out: PathBuf,
}

fn model_section(args: &ModelArgs) -> Result<ModelSection, CliError> {
    let mut params = toml::Table::new();
    for p in &args.params {
        let (key, value) = p.split_once('=').ok_or_else(|| CliError::Config(format!("expected key=value, got '{p}'")))?;
        let parsed: toml::Table = toml::from_str(&format!("v = {value}"))
            .map_err(|e| CliError::Config(format!("parameter '{key}': {e}")))?;
        params.insert(key.trim().to_string(), parsed["v"].clone());
    }
    Ok(ModelSection { catalog: Some(args.catalog.clone()), params, ..ModelSection::default() })
}

fn solve_config(args: &SolveArgs, backend: Backend) -> Result<RunConfig, CliError> {
    let mut c = RunConfig { model: model_section(&args.model)?, ..RunConfig::default() };
    c.numerics.n_particles = args.n;
    c.numerics.steps = args.k;
    c.numerics.x_intervals = args.kx;
    c.numerics.x_domain = args.x_domain.as_ref().map(|v| [v[0], v[1]]);
    c.numerics.tol_fp = args.tol_fp;
    c.numerics.max_iter = args.max_iter;
    c.numerics.damping = args.damping;
    c.numerics.backend = Some(backend);
    c.checks.consistency = false;
    c.checks.spike = false;
    Ok(c)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    let workers = cli.workers;
    match cli.command {
        Command::Run { config, out } => {
            let config = RunConfig::load(&config)?;
            let outcome = run(&config, &RunOptions { seed: cli.seed, workers, out })?;
            let s = &outcome.summary;
            eprintln!(
                "{}: status {} after {} iterations, checks {}; bundle in {}",
                s.model,
                s.status,
                s.iterations,
                if s.checks_passed { "passed" } else { "failed" },
                outcome.directory.display()
            );
            Ok(outcome.exit_code)
        }
        Command::SolveLq(args) => solve(&args, Backend::Riccati, cli.seed, workers),
        Command::SolveHjb1d(args) => solve(&args, Backend::Hjb1d, cli.seed, workers),
        Command::Simulate { model, n, k, out } => {
            let resolved = model_section(&model)?.resolve()?;
            let strategy = zero_strategy(&resolved.problem, k);
            let opts = SimOptions::new(n, k, cli.seed.unwrap_or(0)).with_workers(workers);
            let curve = match &resolved.problem {
                Problem::Lq(m) => simulate_t1(m, &strategy, &resolved.initial, &opts)?.0,
                Problem::General(m) => simulate_t1(m, &strategy, &resolved.initial, &opts)?.0,
            };
            let mut w = output(&out)?;
            curve.write_csv(&mut w)?;
            w.flush()?;
            Ok(0)
        }
        Command::Riccati { model, k, n, offset_form, out } => {
            let resolved = model_section(&model)?.resolve()?;
            let Problem::Lq(lq) = &resolved.problem else {
                return Err(CliError::Config(format!("'{}' is not an LQ catalog model", model.catalog)));
            };
            let offset_form = match offset_form.as_str() {
                "derived" => OffsetForm::Derived,
                "as_printed" => OffsetForm::AsPrinted,
                other => return Err(CliError::Config(format!("unknown offset form '{other}'"))),
            };
            let cloud = resolved.initial.sample(n, cli.seed.unwrap_or(0))?;
            let mu = constant_curve(lq.horizon, k, &cloud)?;
            let fam = solve_riccati_family_with(lq, &FrozenCurve::new(lq, &mu)?, RiccatiOptions { offset_form })?;
            let mut w = output(&out)?;
            fam.write_diagonal_csv(&mut w)?;
            w.flush()?;
            Ok(0)
        }
        Command::Verify { bundle } => {
            let (report, saved) = verify_bundle(&bundle, workers)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if let Some(saved) = saved {
                if saved != report.overall_pass {
                    eprintln!("overall_pass {} differs from the saved report ({saved})", report.overall_pass);
                }
            }
            Ok(if report.overall_pass { 0 } else { 4 })
        }
    }
}

fn solve(args: &SolveArgs, backend: Backend, seed: Option<u64>, workers: Option<usize>) -> Result<i32, CliError> {
    let config = solve_config(args, backend)?;
    let outcome = run(&config, &RunOptions { seed, workers, out: Some(args.out.clone()) })?;
    eprintln!("{}: status {} after {} iterations", outcome.summary.model, outcome.summary.status, outcome.summary.iterations);
    Ok(outcome.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

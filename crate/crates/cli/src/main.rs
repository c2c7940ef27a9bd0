use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mjls_pob::io::{load_model, load_policy, load_specs, save_model, save_policy, save_specs, write_json, SynthesisReport};
use mjls_pob::model::{Ellitope, MjlsModel};
use mjls_pob::portfolio::{
    boxplot_csv, build_portfolio_model, evaluate_policy, income_csv, portfolio_specs, PortfolioParams,
};
use mjls_pob::simulator::{path_boxplot_csv, simulate, trajectory_csv, UncertaintySampling};
use mjls_pob::synthesis::{synthesize, ClarabelSolver, SolverStatus, SynthesisOptions};
use mjls_pob::verify::{run_verify, Sizes, VerifyOptions};
use mjls_pob::Error;

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_INPUT: u8 = 4;
const EXIT_VERIFY: u8 = 1;

#[derive(Parser)]
#[command(name = "mjls-pob", version, about = "Robust POB policy synthesis for Markov jump linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the synthesis SDP and write policy.json and report.json.
    Synthesize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        memory: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-7)]
        tol_psd: f64,
        #[arg(long)]
        deterministic_solver: bool,
    },
    /// Roll a policy out on sampled scenarios and write CSV trajectories.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Specification file: supplies the ellitope and the specs to summarize.
        /// Without it ζ is drawn from the unit ball.
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Sampling::Boundary)]
        sampling: Sampling,
    },
    /// Run the randomized oracle suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SizeArg::Small)]
        sizes: SizeArg,
        /// Write the JSON report here as well.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sign-flip one recursion step (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<usize>,
    },
    /// Build, synthesize and simulate the two-asset portfolio instance.
    PortfolioExample {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Return realizations per mode path.
        #[arg(long, default_value_t = 100)]
        samples: u64,
        #[arg(long, default_value_t = 2)]
        memory: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampling {
    Boundary,
    Interior,
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeArg {
    Small,
    Medium,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        return report_error(&e);
    }
    let result = match cli.command {
        Command::Synthesize {
            model,
            specs,
            memory,
            out,
            tol_psd,
            deterministic_solver,
        } => cmd_synthesize(&model, &specs, memory, &out, tol_psd, deterministic_solver),
        Command::Simulate {
            model,
            policy,
            samples,
            seed,
            out,
            specs,
            sampling,
        } => cmd_simulate(&model, &policy, samples, seed, &out, specs.as_deref(), sampling),
        Command::Verify {
            seed,
            sizes,
            out,
            inject_fault,
        } => cmd_verify(seed, sizes, out.as_deref(), inject_fault),
        Command::PortfolioExample {
            out,
            seed,
            samples,
            memory,
        } => cmd_portfolio(&out, seed, samples, memory),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => report_error(&e),
    }
}

fn configure_threads() -> mjls_pob::Result<()> {
    let Ok(v) = std::env::var("ROBUST_POB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("ROBUST_POB_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(Error::Invalid("ROBUST_POB_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

/// One JSON object on stderr, exit 3 for solver failures and 4 for everything else.
fn report_error(e: &Error) -> ExitCode {
    let (kind, code) = match e {
        Error::Solver(_) => ("solver", EXIT_SOLVER),
        Error::Parse { .. } => ("parse", EXIT_INPUT),
        Error::Dimension { .. } => ("dimension", EXIT_INPUT),
        Error::Invalid(_) => ("invalid", EXIT_INPUT),
        Error::TooLarge { .. } => ("too_large", EXIT_INPUT),
        Error::Unsupported(_) => ("unsupported", EXIT_INPUT),
        Error::Io(_) => ("io", EXIT_INPUT),
    };
    let mut diag = json!({ "error": kind, "message": e.to_string() });
    if let Error::Parse {
        source_name,
        line,
        column,
        ..
    } = e
    {
        diag["file"] = json!(source_name);
        diag["line"] = json!(line);
        diag["column"] = json!(column);
    }
    eprintln!("{diag}");
    ExitCode::from(code)
}

fn ensure_dir(dir: &Path) -> mjls_pob::Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn status_code(status: SolverStatus) -> u8 {
    match status {
        SolverStatus::Feasible => 0,
        SolverStatus::Infeasible => EXIT_INFEASIBLE,
        SolverStatus::Inaccurate | SolverStatus::Failed => EXIT_SOLVER,
    }
}

fn cmd_synthesize(
    model: &Path,
    specs: &Path,
    memory: usize,
    out: &Path,
    tol_psd: f64,
    deterministic: bool,
) -> mjls_pob::Result<u8> {
    let model = load_model(model)?;
    let specs = load_specs(specs)?;
    let mut opts = SynthesisOptions::with_memory(memory);
    opts.solver.tol_psd = tol_psd;
    opts.solver.deterministic = deterministic;
    let (outcome, policy) = synthesize(&model, &specs, &opts, &ClarabelSolver)?;
    ensure_dir(out)?;
    let report = SynthesisReport::new(&outcome);
    write_json(&out.join("report.json"), &report)?;
    save_policy(&out.join("policy.json"), &policy)?;
    println!("status: {}", report.status);
    for (label, g) in &report.gammas {
        println!("  {label}: gamma = {g:.6e}");
    }
    for c in &report.gamma_minus {
        println!("  {}: gamma_minus = {:.6e} (psi = {:.6e})", c.label, c.gamma_minus, c.psi);
    }
    Ok(status_code(outcome.status))
}

fn unit_ball(n: usize) -> mjls_pob::Result<Ellitope> {
    Ellitope::new(vec![nalgebra::DMatrix::identity(n, n)])
}

fn cmd_simulate(
    model_path: &Path,
    policy_path: &Path,
    samples: usize,
    seed: u64,
    out: &Path,
    specs_path: Option<&Path>,
    sampling: Sampling,
) -> mjls_pob::Result<u8> {
    let model: MjlsModel = load_model(model_path)?;
    let policy = load_policy(policy_path)?;
    let specs = specs_path.map(load_specs).transpose()?;
    let ellitope = match &specs {
        Some(s) => s.ellitope.clone(),
        None => unit_ball(model.n_zeta())?,
    };
    let sampling = match sampling {
        Sampling::Boundary => UncertaintySampling::Boundary,
        Sampling::Interior => UncertaintySampling::Interior,
    };
    let run = simulate(&model, &policy, &ellitope, specs.as_ref(), samples, seed, sampling)?;
    ensure_dir(out)?;
    fs::write(out.join("trajectories.csv"), trajectory_csv(&model, &run))?;
    fs::write(out.join("paths.csv"), path_boxplot_csv(&model, &run))?;
    write_json(
        &out.join("report.json"),
        &json!({ "samples": samples, "seed": seed, "specs": run.summaries }),
    )?;
    let mut violated = false;
    for s in &run.summaries {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
        println!(
            "{} [{}] level {} exact {} worst {} mc {} ± {}",
            s.spec_id,
            s.kind,
            fmt(s.level),
            fmt(s.exact_value),
            fmt(s.exact_worst),
            fmt(s.mc_value),
            fmt(s.stderr)
        );
        violated |= s.satisfied == Some(false);
    }
    if violated {
        println!("some specification levels are exceeded on the sampled scenarios");
    }
    Ok(0)
}

fn cmd_verify(seed: u64, sizes: SizeArg, out: Option<&Path>, fault: Option<usize>) -> mjls_pob::Result<u8> {
    let sizes = match sizes {
        SizeArg::Small => Sizes::Small,
        SizeArg::Medium => Sizes::Medium,
    };
    let report = run_verify(&VerifyOptions { seed, sizes, fault })?;
    for s in &report.suites {
        println!(
            "{} {:<26} cases {:>5}  max error {:.3e}  tol {:.1e}  {:.2}s",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.cases,
            s.max_error,
            s.tolerance,
            s.seconds
        );
    }
    println!("total {:.2}s", report.seconds);
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        write_json(path, &report)?;
    }
    Ok(if report.passed { 0 } else { EXIT_VERIFY })
}

fn cmd_portfolio(out: &Path, seed: u64, samples: u64, memory: usize) -> mjls_pob::Result<u8> {
    let params = PortfolioParams::default();
    let (model, ellitope) = build_portfolio_model(&params)?;
    let specs = portfolio_specs(&params, ellitope)?;
    ensure_dir(out)?;
    write_json(&out.join("params.json"), &params)?;
    save_model(&out.join("model.json"), &model)?;
    save_specs(&out.join("specs.json"), &specs)?;

    let (outcome, policy) = synthesize(&model, &specs, &SynthesisOptions::with_memory(memory), &ClarabelSolver)?;
    let report = SynthesisReport::new(&outcome);
    write_json(&out.join("report.json"), &report)?;
    save_policy(&out.join("policy.json"), &policy)?;
    println!("synthesis: {}", report.status);
    if outcome.status != SolverStatus::Feasible {
        return Ok(status_code(outcome.status));
    }

    let run = evaluate_policy(&params, &model, &specs, &policy, 20, samples, seed)?;
    write_json(&out.join("portfolio.json"), &run)?;
    fs::write(out.join("boxplot.csv"), boxplot_csv(&run))?;
    fs::write(out.join("income.csv"), income_csv(&run))?;
    println!("U_tar = {:.4}", run.u_tar);
    for c in &run.exact_checks {
        println!(
            "{:<8} worst exact {:.6} <= {:.3}: {}",
            c.spec_id, c.worst_exact, c.level, c.satisfied
        );
    }
    for s in &run.scenarios {
        println!(
            "path {} (p = {:.3}): mean income deviation {:.6}",
            s.path, s.probability, s.mean_income_deviation
        );
    }
    println!(
        "starting in recession {:.6} vs expansion {:.6}",
        run.groups.first_mode_1_mean, run.groups.first_mode_2_mean
    );
    Ok(0)
}

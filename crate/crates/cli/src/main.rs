//! `amfem` command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amfem_core::adapt::{amfem, default_gamma_grid, AdaptConfig, AdaptRun, ErrorColumn, Mode};
use amfem_core::estimate::{oscillations, EstimatorKind};
use amfem_core::io;
use amfem_core::problems::ProblemSpec;
use amfem_core::verify::{self, SUITES};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const BURN_IN: usize = 2;

#[derive(Parser)]
#[command(name = "amfem", version, about = "Adaptive mixed finite elements for -div(A grad u) = f")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the adaptive loop on one problem and write its artifacts.
    Run(RunArgs),
    /// Execute a property suite and report every check.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Built-in problem name.
    #[arg(long)]
    problem: Option<String>,
    /// Key-value file with run settings and optionally a custom problem.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    theta: Option<f64>,
    /// Exponent of the data term; selects the full estimator.
    #[arg(long)]
    kappa: Option<f64>,
    /// Bisections per marked element.
    #[arg(long)]
    b: Option<u32>,
    /// Target estimator value, or `none`.
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    max_dofs: Option<String>,
    /// adaptive, uniform or two_step.
    #[arg(long)]
    mode: Option<String>,
    /// stress or full.
    #[arg(long)]
    estimator: Option<String>,
    /// Comma-separated weights scanned for the contraction constant.
    #[arg(long)]
    gamma_grid: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recorded in the metadata; runs are deterministic regardless.
    #[arg(long)]
    seed: Option<u64>,
    /// Record wall-clock seconds per iteration in the trace.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// One of mesh, dorfler, pythagoras, reduction, oscillation, upper_bound, all.
    suite: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write the report as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Failure { code: 2, kind: "config", message: message.to_string() }
    }
    fn solver(message: impl ToString) -> Self {
        Failure { code: 3, kind: "solver", message: message.to_string() }
    }
    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure { code: 3, kind: "io", message: format!("{}: {e}", path.display()) }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            return report(Failure::config(text.lines().next().unwrap_or("invalid arguments")));
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Verify(args) => verify(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let line = json!({ "error": f.kind, "code": f.code, "message": f.message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(f.code)
}

/// Settings after merging the config file with the command line.
struct Settings {
    problem: ProblemSpec,
    cfg: AdaptConfig,
    gamma_grid: Vec<f64>,
    out: PathBuf,
    seed: u64,
}

const RUN_KEYS: [&str; 12] = [
    "problem", "theta", "kappa", "b", "eps", "max_dofs", "mode", "estimator", "gamma_grid", "out", "seed", "timing",
];
const PROBLEM_KEYS: [&str; 2] = ["domain", "name"];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, Failure> {
    v.trim().parse().map_err(|_| Failure::config(format!("invalid value `{v}` for `{key}`")))
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, Failure> {
    match v.trim() {
        "none" | "off" => Ok(None),
        _ => parse(key, v).map(Some),
    }
}

fn settings(args: RunArgs) -> Result<Settings, Failure> {
    let mut kv = BTreeMap::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        kv = io::parse_kv(&text).map_err(Failure::config)?;
        for key in kv.keys() {
            let known = RUN_KEYS.contains(&key.as_str())
                || PROBLEM_KEYS.contains(&key.as_str())
                || key.starts_with("coefficient.")
                || key.starts_with("source.");
            if !known {
                return Err(Failure::config(io::ConfigError::UnknownKey(key.clone())));
            }
        }
    }
    let mut set = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.insert(key.to_string(), v);
        }
    };
    set("problem", args.problem);
    set("theta", args.theta.map(|v| v.to_string()));
    set("kappa", args.kappa.map(|v| v.to_string()));
    set("b", args.b.map(|v| v.to_string()));
    set("eps", args.eps);
    set("max_dofs", args.max_dofs);
    set("mode", args.mode);
    set("estimator", args.estimator);
    set("gamma_grid", args.gamma_grid);
    set("out", args.out.map(|p| p.display().to_string()));
    set("seed", args.seed.map(|v| v.to_string()));
    if args.timing {
        set("timing", Some("true".into()));
    }

    let custom = kv.keys().any(|k| k == "domain" || k.starts_with("coefficient.") || k.starts_with("source."));
    let problem = match (kv.get("problem"), custom) {
        (Some(_), true) => return Err(Failure::config("give either `problem` or a custom problem, not both")),
        (Some(name), false) => ProblemSpec::builtin(name).map_err(Failure::config)?,
        (None, true) => io::custom_problem(&kv).map_err(Failure::config)?,
        (None, false) => return Err(Failure::config("no problem: pass --problem or a config with `domain`")),
    };

    let mut cfg = AdaptConfig::default();
    if let Some(v) = kv.get("theta") {
        cfg.theta = parse("theta", v)?;
    }
    if let Some(v) = kv.get("b") {
        cfg.b = parse("b", v)?;
    }
    if let Some(v) = kv.get("eps") {
        cfg.eps = optional("eps", v)?;
    }
    if let Some(v) = kv.get("max_dofs") {
        cfg.max_dofs = optional("max_dofs", v)?;
    }
    if let Some(v) = kv.get("mode") {
        cfg.mode = v.parse::<Mode>().map_err(Failure::config)?;
    }
    if let Some(v) = kv.get("timing") {
        cfg.timing = parse("timing", v)?;
    }
    let kappa = kv.get("kappa").map(|v| parse::<f64>("kappa", v)).transpose()?;
    cfg.estimator = match (kv.get("estimator").map(String::as_str), kappa) {
        (None | Some("stress"), None) => EstimatorKind::Stress,
        (Some("stress"), Some(_)) => return Err(Failure::config("`kappa` requires the full estimator")),
        (None | Some("full"), Some(kappa)) => EstimatorKind::Full { kappa },
        (Some("full"), None) => EstimatorKind::Full { kappa: 1.0 },
        (Some(other), _) => return Err(Failure::config(format!("unknown estimator `{other}`"))),
    };
    cfg.validate().map_err(Failure::config)?;

    let gamma_grid = match kv.get("gamma_grid") {
        None => default_gamma_grid(),
        Some(v) => {
            let g: Vec<f64> = v.split(',').map(|t| parse("gamma_grid", t)).collect::<Result<_, _>>()?;
            if g.is_empty() || g.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                return Err(Failure::config("gamma_grid needs positive finite weights"));
            }
            g
        }
    };
    Ok(Settings {
        problem,
        cfg,
        gamma_grid,
        out: PathBuf::from(kv.get("out").map_or("amfem-out", String::as_str)),
        seed: kv.get("seed").map(|v| parse("seed", v)).transpose()?.unwrap_or(0),
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Outcome {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Failure::io(&path, e))
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Adaptive => "adaptive",
        Mode::Uniform => "uniform",
        Mode::TwoStep => "two_step",
    }
}

fn summary(s: &Settings, run: &AdaptRun) -> serde_json::Value {
    let last = run.rows.last();
    let column = if run.rows.iter().any(|r| r.errors.is_some()) { ErrorColumn::Flux } else { ErrorColumn::Estimator };
    let fit = run.fit(column, BURN_IN).ok();
    let eff = run.efficiency_indices();
    let eff_range = (!eff.is_empty()).then(|| {
        let tail = &eff[BURN_IN.min(eff.len() - 1)..];
        [tail.iter().copied().fold(f64::INFINITY, f64::min), tail.iter().copied().fold(0.0, f64::max)]
    });
    json!({
        "problem": s.problem.name,
        "stop": run.stop,
        "failure": run.failure,
        "iterations": run.rows.len(),
        "n_elem": last.map(|r| r.n_elem),
        "n_flux_dofs": last.map(|r| r.n_flux_dofs),
        "eta": last.map(|r| r.eta2.sqrt()),
        "osc": last.map(|r| r.osc2.sqrt()),
        "errors": last.and_then(|r| r.errors),
        "surrogate_errors": run.surrogate,
        "rate_column": column,
        "rate": fit,
        "efficiency_range": eff_range,
        "max_complexity": run.max_complexity(),
        "contraction": run.contraction(&s.gamma_grid),
        "approx": run.approx.as_ref().map(|a| json!({ "eps": a.eps, "history": a.history })),
    })
}

fn run(args: RunArgs) -> Outcome {
    let s = settings(args)?;
    std::fs::create_dir_all(&s.out).map_err(|e| Failure::io(&s.out, e))?;
    let meta = json!({
        "problem": s.problem.name,
        "domain": format!("{:?}", s.problem.domain),
        "theta": s.cfg.theta,
        "b": s.cfg.b,
        "eps": s.cfg.eps,
        "max_dofs": s.cfg.max_dofs,
        "mode": mode_name(s.cfg.mode),
        "estimator": s.cfg.estimator,
        "gamma_grid": s.gamma_grid,
        "seed": s.seed,
        "burn_in": BURN_IN,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write(&s.out, "meta.json", &io::metadata_json(&meta))?;

    let run = amfem(&s.problem, &s.cfg).map_err(|e| match e {
        amfem_core::adapt::AdaptError::Fem(_) | amfem_core::adapt::AdaptError::Estimate(_) => Failure::solver(e),
        amfem_core::adapt::AdaptError::Mesh(_) => Failure::solver(e),
        other => Failure::config(other),
    })?;
    write(&s.out, "trace.csv", &io::trace_csv(&run.rows))?;
    write(&s.out, "errors.csv", &io::errors_csv(&run))?;
    if let Some(step) = run.final_step() {
        write(&s.out, "mesh.txt", &step.mesh.to_text())?;
        write(&s.out, "solution.csv", &io::solution_csv(&step.mesh, &step.solution.p, &step.solution.u))?;
        let osc = oscillations(&step.mesh, &step.solution, &s.problem).map_err(Failure::solver)?;
        write(&s.out, "indicators.csv", &io::indicators_csv(&step.indicators, &osc))?;
    }
    let sum = summary(&s, &run);
    write(&s.out, "summary.json", &io::metadata_json(&sum))?;
    println!("{sum}");
    match &run.failure {
        Some(msg) => Err(Failure::solver(msg)),
        None => Ok(()),
    }
}

fn verify(args: VerifyArgs) -> Outcome {
    if !SUITES.contains(&args.suite.as_str()) {
        return Err(Failure::config(verify::VerifyError::UnknownSuite(args.suite)));
    }
    let report = verify::run_suite(&args.suite, args.seed).map_err(Failure::solver)?;
    for c in &report.checks {
        println!("{}", json!(c));
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        let value = serde_json::to_value(&report).expect("serializable");
        write(dir, &format!("verify_{}.json", args.suite), &io::metadata_json(&value))?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure { code: 4, kind: "verification", message: format!("failed checks: {}", failed.join(", ")) })
    }
}

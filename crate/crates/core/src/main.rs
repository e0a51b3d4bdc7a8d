use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use riskgame::config::{Mode, ScenarioConfig};
use riskgame::experiment::{build_planner, oracle_grid, run_experiment};
use riskgame::oracle::{controls_from_solution, exit_probability_reference, solve_dirichlet};
use riskgame::output::{emit_outputs, SUMMARY_FILE};
use riskgame::{Error, Result};

#[derive(Parser)]
#[command(name = "riskgame", version, about = "Path-integral solver for risk-minimizing zero-sum SDGs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write its outputs.
    Run(Common),
    /// Parse the config, build the game and certify λ.
    Validate(Common),
    /// Solve the finite-difference oracle for a game of dimension ≤ 2.
    Oracle(Common),
    /// Print the summary of a finished run.
    Report(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Desk,
    Full,
}

#[derive(Args)]
struct Common {
    /// Scenario config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Reproducibility mode: ordered reductions for bitwise-stable output.
    #[arg(long, value_enum)]
    repro: Option<Switch>,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Desk => Mode::Desk,
                ModeArg::Full => Mode::Full,
            };
        }
        if let Some(seed) = self.seed {
            cfg.numerics.master_seed = Some(seed);
        }
        if let Some(w) = self.workers {
            cfg.numerics.workers = Some(w);
        }
        if let Some(r) = self.repro {
            cfg.numerics.reproducible = Some(matches!(r, Switch::On));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let report = run_experiment(&cfg)?;
    let files = emit_outputs(&report, &args.out)?;
    println!(
        "{}: lambda = {} ({} rollouts, {:.1} s)",
        report.game, report.lambda.lambda, report.rollouts, report.seconds
    );
    for r in &report.runs {
        let o = &r.outcome;
        println!(
            "  {:<24} p_fail {:.3} [{:.3}, {:.3}] over {} trials, cost {:.4} +- {:.4}",
            r.label, o.p_fail, o.ci.0, o.ci.1, o.trials, o.cost_mean, o.cost_se
        );
    }
    for v in &report.verdicts {
        println!("  {} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    println!("wrote {}", files.summary.display());
    Ok(())
}

fn validate(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let planner = build_planner(&cfg)?;
    let c = &planner.lambda;
    println!("{}", planner.spec.name);
    println!(
        "lambda = {} ({:?}, residual {:.3e} over {} probes, exact: {})",
        c.lambda, c.source, c.residual, c.probe_count, c.exact
    );
    if let Some(s) = &planner.single_agent_lambda {
        println!("single-agent lambda = {}", s.lambda);
    }
    println!("safe set: {}", planner.spec.safe_set.describe());
    Ok(())
}

fn oracle(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let planner = build_planner(&cfg)?;
    let spec = &planner.spec;
    let grid = oracle_grid(&cfg)?;
    let sol = solve_dirichlet(spec, &grid, planner.lambda.lambda)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("oracle.csv");
    sol.write_csv(BufWriter::new(fs::File::create(&path)?))?;
    let x0 = spec.x0.as_slice();
    println!("xi(x0, t0) = {:.8}", sol.xi_at(x0, spec.t0)?);
    println!("J(x0, t0)  = {:.8}", sol.value_at(x0, spec.t0)?);
    let (u, v) = controls_from_solution(&sol, spec, x0, spec.t0)?;
    println!("u*(x0) = {:?}", u.as_slice());
    println!("v*(x0) = {:?}", v.as_slice());
    match exit_probability_reference(spec, &grid, x0, spec.t0) {
        Ok(p) => println!("P_exit(x0) = {p:.6}"),
        Err(Error::UnsupportedOracle(_)) => {}
        Err(e) => return Err(e),
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
    let table: toml::Table = toml::from_str(&text)?;
    let get = |t: &toml::Table, k: &str| match t.get(k) {
        Some(toml::Value::String(s)) => s.clone(),
        Some(v) => v.to_string(),
        None => String::new(),
    };
    println!("{} / {} ({} mode)", get(&table, "experiment"), get(&table, "game"), get(&table, "mode"));
    if let Some(lam) = table.get("lambda").and_then(|v| v.as_table()) {
        println!("lambda = {} (exact: {})", get(lam, "value"), get(lam, "exact"));
    }
    for run in table.get("runs").and_then(|v| v.as_array()).into_iter().flatten() {
        if let Some(r) = run.as_table() {
            println!(
                "  {:<24} p_fail {} CI {} trials {}",
                get(r, "label"),
                get(r, "p_fail"),
                get(r, "p_fail_ci"),
                get(r, "trials")
            );
        }
    }
    for v in table.get("verdicts").and_then(|v| v.as_array()).into_iter().flatten() {
        if let Some(v) = v.as_table() {
            let passed = v.get("passed").and_then(|p| p.as_bool()).unwrap_or(false);
            println!("  {} {}: {}", if passed { "PASS" } else { "FAIL" }, get(v, "name"), get(v, "detail"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Validate(a) => validate(a),
        Command::Oracle(a) => oracle(a),
        Command::Report(a) => report(&a.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

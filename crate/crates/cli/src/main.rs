use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use graphon_lq::config::{ProblemConfig, PRESETS};
use graphon_lq::io::{self, Provenance};
use graphon_lq::simulator::{
    estimate_cost, fundamental_relation_residual, simulate_paths, simulate_policies,
    trajectory_quantiles, ControlPolicy, SimulationOptions,
};
use graphon_lq::{solve_backward, Error, ProblemSpec, RiccatiSolution, Scheme};

#[derive(Parser)]
#[command(
    name = "graphon-lq",
    version,
    about = "Graphon LQ mean-field control with common noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Riccati system and write K, Kbar, Y, Lambda and the monitor series.
    Solve(RunArgs),
    /// Simulate the optimal feedback and write trajectory quantiles and a cost estimate.
    Simulate(SimArgs),
    /// Check the optimality residuals of the feedback law by Monte Carlo.
    Verify(VerifyArgs),
    /// Built-in configurations.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
}

#[derive(Args)]
struct RunArgs {
    /// Built-in configuration name.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default `out/<name>`).
    #[arg(long, env = "GRAPHON_LQ_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    n_common: Option<usize>,
    #[arg(long)]
    n_idio: Option<usize>,
    /// Number of common paths whose trajectories feed the quantile CSV.
    #[arg(long, default_value_t = 50)]
    record: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    n_common: Option<usize>,
    #[arg(long)]
    n_idio: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    /// Directory holding a Riccati cache written by `solve`; skips the solve.
    #[arg(long)]
    solution: Option<PathBuf>,
}

struct Run {
    cfg: ProblemConfig,
    spec: ProblemSpec,
    out: PathBuf,
    prov: Provenance,
}

impl Run {
    fn name(&self) -> &str {
        self.cfg.name.as_deref().unwrap_or("run")
    }

    fn solve(&self) -> Result<RiccatiSolution, Error> {
        solve_backward(&self.spec, self.cfg.solver.options())
    }
}

fn prepare(
    args: &RunArgs,
    n_common: Option<usize>,
    n_idio: Option<usize>,
    eps: Option<f64>,
) -> Result<Run, Error> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), _) => ProblemConfig::preset(name)?,
        (None, Some(path)) => ProblemConfig::load(path)?,
        (None, None) => {
            return Err(Error::Config(
                "one of --preset, --config is required".into(),
            ))
        }
    };
    if let Some(dt) = args.dt {
        cfg.set_dt(dt);
    }
    if let Some(s) = args.scheme {
        cfg.solver.scheme = s;
    }
    if let Some(s) = args.seed {
        cfg.simulation.seed = s;
    }
    if let Some(n) = n_common {
        cfg.simulation.n_common = n;
    }
    if let Some(n) = n_idio {
        cfg.simulation.n_idio = n;
    }
    if let Some(e) = eps {
        cfg.simulation.eps = e;
    }
    cfg.simulation
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
    let spec = cfg.build()?;
    let name = cfg.name.clone().unwrap_or_else(|| "run".into());
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| Path::new("out").join(name));
    std::fs::create_dir_all(&out)?;
    let prov = Provenance {
        config_hash: cfg.hash(),
        seed: cfg.simulation.seed,
    };
    Ok(Run {
        cfg,
        spec,
        out,
        prov,
    })
}

fn base_report(run: &Run) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("name".into(), json!(run.name()));
    m.insert("config_hash".into(), json!(run.prov.config_hash));
    m.insert("seed".into(), json!(run.prov.seed));
    m.insert("labels".into(), json!(run.spec.grid.len()));
    m.insert("dt".into(), json!(run.spec.tgrid.dt()));
    m.insert("scheme".into(), json!(run.cfg.solver.scheme.to_string()));
    m
}

fn print_table(title: &str, rows: &Map<String, Value>) {
    println!("{title}");
    let width = rows.keys().map(String::len).max().unwrap_or(0);
    for (k, v) in rows {
        let shown = match v {
            Value::Number(n) if n.is_f64() => format!("{:.6e}", n.as_f64().unwrap_or(f64::NAN)),
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        println!("  {k:<width$}  {shown}");
    }
}

fn cmd_solve(args: &RunArgs) -> Result<bool, Error> {
    let run = prepare(args, None, None, None)?;
    let sol = run.solve()?;
    io::write_riccati(&run.out, &sol, &run.prov)?;
    let mut rep = base_report(&run);
    rep.insert("value_t0".into(), json!(sol.initial_value(&run.spec)?));
    let min_k = sol
        .monitor
        .iter()
        .map(|m| m.min_eig_k)
        .fold(f64::INFINITY, f64::min);
    let min_o = sol
        .monitor
        .iter()
        .map(|m| m.min_eig_o)
        .fold(f64::INFINITY, f64::min);
    let max_kbar = sol.monitor.iter().map(|m| m.kbar_norm).fold(0.0, f64::max);
    rep.insert("min_eig_k".into(), json!(min_k));
    rep.insert("min_eig_o".into(), json!(min_o));
    rep.insert("max_kbar_op_norm".into(), json!(max_kbar));
    io::write_json(&run.out.join("solve.json"), &rep)?;
    print_table(&format!("solve: {}", run.out.display()), &rep);
    Ok(true)
}

fn cmd_simulate(args: &SimArgs) -> Result<bool, Error> {
    let run = prepare(&args.run, args.n_common, args.n_idio, None)?;
    let sim = &run.cfg.simulation;
    let sol = run.solve()?;
    let value = sol.initial_value(&run.spec)?;
    let ens = simulate_policies(
        &run.spec,
        Some(&sol),
        &[ControlPolicy::Feedback],
        sim.n_common,
        sim.n_idio,
        sim.seed,
        SimulationOptions::default(),
    )?
    .remove(0);
    let est = estimate_cost(&run.spec, &ens)?;
    let recorded = args.record.clamp(1, sim.n_common);
    let paths = simulate_paths(
        &run.spec,
        Some(&sol),
        &ControlPolicy::Feedback,
        recorded,
        sim.n_idio,
        sim.seed,
    )?;
    let rows = trajectory_quantiles(&paths)?;
    io::write_quantiles(&run.out.join("trajectories.csv"), &rows, &run.prov)?;

    let mut rep = base_report(&run);
    rep.insert("n_common".into(), json!(sim.n_common));
    rep.insert("n_idio".into(), json!(sim.n_idio));
    rep.insert("recorded_common_paths".into(), json!(recorded));
    rep.insert("value_t0".into(), json!(value));
    rep.insert("j_hat".into(), json!(est.mean));
    rep.insert("std_error".into(), json!(est.std_error));
    rep.insert(
        "z_score".into(),
        json!(if est.std_error > 0.0 {
            (est.mean - value) / est.std_error
        } else {
            0.0
        }),
    );
    rep.insert("state_cost".into(), json!(est.breakdown.state));
    rep.insert("control_cost".into(), json!(est.breakdown.control));
    rep.insert("terminal_cost".into(), json!(est.breakdown.terminal));
    io::write_json(&run.out.join("cost.json"), &rep)?;
    print_table(&format!("simulate: {}", run.out.display()), &rep);
    Ok(true)
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool, Error> {
    let run = prepare(&args.run, args.n_common, args.n_idio, args.eps)?;
    let sim = &run.cfg.simulation;
    let sol = match &args.solution {
        Some(dir) => io::read_riccati(dir, &run.spec, run.cfg.solver.scheme)?,
        None => run.solve()?,
    };
    let delta = sim.delta_field(run.spec.grid, run.spec.control_dim)?;
    let report = fundamental_relation_residual(
        &run.spec,
        &sol,
        std::slice::from_ref(&delta),
        sim.eps,
        sim.n_common,
        sim.n_idio,
        sim.seed,
    )?;
    let mut rep = base_report(&run);
    if let Value::Object(fields) = serde_json::to_value(&report)? {
        rep.extend(fields);
    }
    io::write_json(&run.out.join("verify.json"), &rep)?;
    print_table(&format!("verify: {}", run.out.display()), &rep);
    if !report.pass {
        eprintln!("verify: residuals exceed 3 standard errors");
    }
    Ok(report.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Presets {
            action: PresetAction::List,
        } => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 1 } else { 2 })
        }
    }
}

//! `qrlpf`: basin maps, PPO training and evaluation, one-shot power-flow and
//! QUBO solves.

mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use qrlpf_core::annealer::remote;
use qrlpf_core::env::{profile_of, state_at};
use qrlpf_core::newton::{basin_sweep, half_open_grid, mismatch_pq, solve_nr};
use qrlpf_core::ppo::{checkpoint, evaluate, train, ActorCritic};
use qrlpf_core::qubo::{build_pf_poly, decode, quadratize, BinaryObjective};
use qrlpf_core::{
    EnvConfig, EpisodeTrace, Grid, IncrementSpec, PfEnv, PfSolution, SampleSet, State, UpdateMode,
    VoltageProfile,
};

use config::{FileConfig, Mode, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "qrlpf",
    version,
    about = "Learned initial values for Newton-Raphson power flow"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Built-in case (`case4`, `case14`) or path to a case JSON file.
    #[arg(long, global = true)]
    case: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (directory for `train`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// `brute`, `sa` or `remote:HOST:PORT`.
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    timesteps: Option<usize>,
    /// Reads per sampler call.
    #[arg(long, global = true)]
    n_read: Option<usize>,
    /// Auxiliary penalty for quadratization: `auto`, `uniform` or a number.
    #[arg(long, global = true)]
    penalty: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// NR iteration counts over a V × θ grid at one load bus (CSV).
    Basin {
        /// Zero-based bus index; must be a load bus.
        #[arg(long)]
        bus: usize,
        /// Points per axis.
        #[arg(long, default_value_t = 50)]
        resolution: usize,
    },
    /// Train a PPO agent; writes config.toml, trace.csv and model.ckpt.
    Train,
    /// Run a trained policy from given starts (JSON lines traces).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON array or JSON lines of `{"V": [...], "theta": [...]}`.
        #[arg(long)]
        scenarios: PathBuf,
        /// Run both update modes and print a table of final iteration counts.
        #[arg(long)]
        compare: bool,
    },
    /// Solve the power flow from a start.
    SolvePf {
        /// `flat`, or a JSON file with a voltage profile, a load-bus state,
        /// or a saved solution.
        #[arg(long, default_value = "flat")]
        start: String,
    },
    /// Build the update Hamiltonian around a state and sample it.
    Qubo {
        /// Load-bus state JSON; flat start when omitted.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        step_mu: f64,
        #[arg(long, default_value_t = 0.1)]
        step_omega: f64,
        /// Samples to list.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Answer remote sampler requests with the local backend.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Stop after this many connections.
        #[arg(long)]
        max_connections: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let file = match &c.config {
        Some(p) => FileConfig::read(p)?,
        None => FileConfig::default(),
    };
    let overrides = Overrides {
        case: c.case,
        seed: c.seed,
        mode: c.mode,
        backend: c.backend,
        n_read: c.n_read,
        timesteps: c.timesteps,
        penalty: c.penalty,
        out: c.out,
    };
    match cli.cmd {
        Command::Eval {
            checkpoint,
            scenarios,
            compare,
        } => cmd_eval(file, overrides, &checkpoint, &scenarios, compare),
        cmd => {
            let cfg = RunConfig::resolve(file, overrides)?;
            match cmd {
                Command::Basin { bus, resolution } => cmd_basin(&cfg, bus, resolution),
                Command::Train => cmd_train(&cfg),
                Command::SolvePf { start } => cmd_solve_pf(&cfg, &start),
                Command::Qubo {
                    state,
                    step_mu,
                    step_omega,
                    top,
                } => cmd_qubo(&cfg, state.as_deref(), step_mu, step_omega, top),
                Command::Serve {
                    addr,
                    max_connections,
                } => cmd_serve(&cfg, &addr, max_connections),
                Command::Eval { .. } => unreachable!(),
            }
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_basin(cfg: &RunConfig, bus: usize, resolution: usize) -> Result<()> {
    if resolution == 0 {
        bail!("resolution must be >= 1");
    }
    let v = half_open_grid(0.0, 2.0, resolution);
    let theta = half_open_grid(-90.0, 90.0, resolution);
    let map = basin_sweep(&cfg.grid, bus, &v, &theta, &cfg.env.nr)
        .with_context(|| format!("basin sweep on {}", cfg.case))?;
    let mut out = output(cfg.out.as_deref())?;
    map.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.case, cfg.seed)));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let settings = cfg.to_toml()?;
    std::fs::write(dir.join("config.toml"), &settings)?;
    print!("{settings}");
    io::stdout().flush()?;

    let mut env = PfEnv::new(cfg.grid.clone(), cfg.env.clone())?;
    let result = train(&mut env, &cfg.ppo, cfg.seed);
    let trace = match &result {
        Ok(o) => &o.trace,
        Err(f) => &f.trace,
    };
    trace.write_csv(File::create(dir.join("trace.csv"))?)?;
    let outcome = result.map_err(|f| anyhow::anyhow!("training failed: {f}"))?;
    checkpoint::save(
        &outcome.model,
        &cfg.case,
        BufWriter::new(File::create(dir.join("model.ckpt"))?),
    )?;
    if let Some(d) = outcome.trace.decile_means() {
        eprintln!(
            "{} episodes in {} steps; episode-end k {:.2} -> {:.2}, reward {:.3} -> {:.3}",
            outcome.trace.rows.len(),
            outcome.timesteps,
            d.first_k,
            d.last_k,
            d.first_reward,
            d.last_reward
        );
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Scenario {
    #[serde(rename = "V")]
    v: Vec<f64>,
    theta: Vec<f64>,
}

fn read_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn cmd_eval(
    file: FileConfig,
    mut overrides: Overrides,
    ckpt: &Path,
    scenarios: &Path,
    compare: bool,
) -> Result<()> {
    let reader = BufReader::new(
        File::open(ckpt).with_context(|| format!("opening checkpoint {}", ckpt.display()))?,
    );
    let (header, model) = checkpoint::load(reader)?;
    if overrides.case.is_none() && file.case.is_none() {
        overrides.case = Some(header.case.clone());
    }
    let cfg = RunConfig::resolve(file, overrides)?;
    let starts = read_scenarios(scenarios)?;
    let states = starts
        .iter()
        .map(|s| state_at(&cfg.grid, &s.v, &s.theta, &cfg.env.nr))
        .collect::<std::result::Result<Vec<State>, _>>()
        .context("scenario does not fit the case")?;

    let mut out = output(cfg.out.as_deref())?;
    if compare {
        let classic = run_eval(&model, &cfg.grid, &states, &cfg.env, UpdateMode::Classic)?;
        let quantum_mode = UpdateMode::Quantum {
            backend: cfg.backend.clone(),
            n_read: cfg.n_read,
        };
        let quantum = run_eval(&model, &cfg.grid, &states, &cfg.env, quantum_mode)?;
        writeln!(
            out,
            "scenario,initial_k,classic_final_k,classic_steps,quantum_final_k,quantum_steps"
        )?;
        for (i, s) in states.iter().enumerate() {
            let end = |t: &EpisodeTrace| t.final_state().map_or(s.k, |f| f.k);
            writeln!(
                out,
                "{i},{},{},{},{},{}",
                s.k,
                end(&classic[i]),
                classic[i].len(),
                end(&quantum[i]),
                quantum[i].len()
            )?;
        }
    } else {
        let traces = run_eval(&model, &cfg.grid, &states, &cfg.env, cfg.env.mode.clone())?;
        for (i, t) in traces.iter().enumerate() {
            t.write_jsonl(&mut out, Some(i), cfg.env.k_max)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn run_eval(
    model: &ActorCritic,
    grid: &Grid,
    states: &[State],
    env: &EnvConfig,
    mode: UpdateMode,
) -> Result<Vec<EpisodeTrace>> {
    let env = EnvConfig {
        mode,
        ..env.clone()
    };
    Ok(evaluate(model, grid, states, &env)?)
}

/// Anything `solve-pf --start` accepts.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum StartFile {
    Solution(PfSolution),
    Profile(VoltageProfile),
    State(LoadStart),
}

#[derive(Debug, Deserialize)]
struct LoadStart {
    #[serde(rename = "V")]
    v: Vec<f64>,
    theta: Vec<f64>,
}

fn load_start(grid: &Grid, start: &str) -> Result<VoltageProfile> {
    if start == "flat" {
        return Ok(grid.flat_start());
    }
    let text = std::fs::read_to_string(start).with_context(|| format!("reading {start}"))?;
    let parsed: StartFile = serde_json::from_str(&text).with_context(|| {
        format!("{start}: expected a voltage profile, a load-bus state or a solution")
    })?;
    let profile = match parsed {
        StartFile::Solution(s) => s.voltages,
        StartFile::Profile(p) => p,
        StartFile::State(s) => {
            let st = State {
                v: s.v,
                theta: s.theta,
                k: 0,
            };
            profile_of(grid, &st)?
        }
    };
    profile.check_dims(grid)?;
    Ok(profile)
}

fn cmd_solve_pf(cfg: &RunConfig, start: &str) -> Result<()> {
    let v0 = load_start(&cfg.grid, start)?;
    let sol = solve_nr(&cfg.grid, &v0, &cfg.env.nr)?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    match sol.failure {
        None => writeln!(w, "{}: converged, k = {}", cfg.case, sol.k)?,
        Some(kind) => writeln!(w, "{}: failed ({kind:?}), k = {}", cfg.case, sol.k)?,
    }
    if let Some(r) = sol.residual_history.last() {
        writeln!(w, "final mismatch norm: {r:.3e}")?;
    }
    writeln!(w, "bus,kind,V,theta_deg")?;
    for i in 0..cfg.grid.n_bus() {
        writeln!(
            w,
            "{},{:?},{:.6},{:.6}",
            cfg.grid.labels()[i],
            cfg.grid.kinds()[i],
            sol.voltages.vm[i],
            sol.voltages.va_deg[i]
        )?;
    }
    if let Some(p) = &cfg.out {
        serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &sol)?;
    }
    Ok(())
}

/// What `qubo --out` writes: the sample set without timing.
#[derive(Debug, Serialize)]
struct QuboReport<'a> {
    backend_id: &'a str,
    n_read: usize,
    n_primary: usize,
    n_aux: usize,
    constant: f64,
    mismatch_sq_at_state: f64,
    samples: &'a [qrlpf_core::Sample],
}

fn cmd_qubo(
    cfg: &RunConfig,
    state: Option<&Path>,
    step_mu: f64,
    step_omega: f64,
    top: usize,
) -> Result<()> {
    let grid = &cfg.grid;
    let base = match state {
        Some(p) => load_start(grid, &p.to_string_lossy())?,
        None => grid.flat_start(),
    };
    let n_load = grid.load_buses().len();
    let spec = IncrementSpec::new(
        grid,
        base.clone(),
        vec![step_mu; n_load],
        vec![step_omega; n_load],
    )?;
    let poly = build_pf_poly(grid, &spec)?;
    let q = quadratize(&poly, cfg.penalty)?;
    let set: SampleSet = cfg.backend.sample(&q, cfg.n_read)?;
    let at_state = mismatch_pq(grid, &base)?.load_sum_squares(grid);

    let stdout = io::stdout();
    let mut w = stdout.lock();
    writeln!(
        w,
        "{}: {} primary + {} auxiliary variables, degree {}",
        cfg.case,
        q.n_primary,
        q.n_aux(),
        poly.degree()
    )?;
    writeln!(w, "constant term: {:.12e}", poly.constant())?;
    writeln!(w, "mismatch^2 at state: {at_state:.12e}")?;
    writeln!(w, "backend: {} ({} reads)", set.backend_id, set.n_read)?;
    writeln!(w, "rank,energy,count,bits")?;
    for (i, s) in set.samples.iter().take(top).enumerate() {
        let bits: String = s.bits[..q.n_primary]
            .iter()
            .map(|b| if *b != 0 { '1' } else { '0' })
            .collect();
        writeln!(w, "{i},{:.12e},{},{bits}", s.energy, s.count)?;
    }
    if let Some(best) = set.best() {
        let primary = &best.bits[..q.n_primary];
        let e = poly.energy(primary)?;
        writeln!(w, "best: H = {e:.12e}")?;
        match decode(primary, &spec) {
            Ok(p) => {
                for &b in &grid.load_buses() {
                    writeln!(
                        w,
                        "  bus {}: V = {:.6}, theta = {:.6}",
                        grid.labels()[b],
                        p.vm[b],
                        p.va_deg[b]
                    )?;
                }
            }
            Err(e) => writeln!(w, "  decoded profile is degenerate: {e}")?,
        }
    }
    if let Some(p) = &cfg.out {
        let report = QuboReport {
            backend_id: &set.backend_id,
            n_read: set.n_read,
            n_primary: q.n_primary,
            n_aux: q.n_aux(),
            constant: poly.constant(),
            mismatch_sq_at_state: at_state,
            samples: &set.samples,
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &report)?;
    }
    Ok(())
}

fn cmd_serve(cfg: &RunConfig, addr: &str, max_connections: Option<usize>) -> Result<()> {
    if matches!(cfg.backend, qrlpf_core::Backend::Remote(_)) {
        bail!("serve needs a local backend");
    }
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    eprintln!("serving {} on {}", cfg.backend.id(), listener.local_addr()?);
    remote::serve(listener, &cfg.backend, max_connections)?;
    Ok(())
}

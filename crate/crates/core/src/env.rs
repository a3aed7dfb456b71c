//! Episodic environment: the agent nudges load-bus starting voltages until
//! Newton-Raphson converges within `k_max` iterations.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annealer::{AnnealError, Backend, DEFAULT_N_READ};
use crate::grid::{polar_to_rect, rect_to_polar, Grid, GridError, VoltageProfile};
use crate::newton::{mismatch_pq, solve_nr, NewtonError, NrConfig, DIVERGED_K};
use crate::qubo::{build_pf_qubo, decode, IncrementSpec, QuboError};

/// Largest `|Δμ|` an action may request (p.u.).
pub const MAX_STEP_MU: f64 = 0.5;
/// Largest `|Δω|` an action may request (p.u.).
pub const MAX_STEP_OMEGA: f64 = 0.25;
/// Upper voltage bound of the state space.
pub const V_MAX: f64 = 2.0;
/// Smallest magnitude kept after clamping; the state space excludes zero.
pub const V_FLOOR: f64 = 1e-3;
/// Angle bound of the state space, degrees.
pub const THETA_MAX: f64 = 90.0;
/// Lowest angle kept after clamping; the state space excludes −90°.
pub const THETA_FLOOR: f64 = -90.0 + 1e-6;
/// Reward returned when the mismatch cannot be evaluated.
pub const REWARD_SENTINEL: f64 = -1e6;
/// Resets tried before giving up on finding a start that is not already solved.
pub const MAX_RESET_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error(transparent)]
    Qubo(#[from] QuboError),
    #[error(transparent)]
    Anneal(#[from] AnnealError),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} values for {what}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("backend `{0}` returned no samples")]
    NoSamples(String),
    #[error("no unsolved start found in {0} resets")]
    NoUnsolvedStart(usize),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Load-bus voltages and the NR iteration count they lead to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub k: u32,
}

impl State {
    pub fn n_load(&self) -> usize {
        self.v.len()
    }

    pub fn in_bounds(&self) -> bool {
        self.v.len() == self.theta.len()
            && self.k <= DIVERGED_K
            && self.v.iter().all(|&v| v > 0.0 && v <= V_MAX)
            && self.theta.iter().all(|&t| t > -THETA_MAX && t <= THETA_MAX)
    }
}

/// Per-load-bus rectangular adjustments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub d_mu: Vec<f64>,
    pub d_omega: Vec<f64>,
}

impl Action {
    pub fn zeros(n_load: usize) -> Self {
        Action {
            d_mu: vec![0.0; n_load],
            d_omega: vec![0.0; n_load],
        }
    }

    /// `[Δμ…, Δω…]`, as produced by the policy.
    pub fn from_flat(a: &[f64]) -> Result<Self> {
        if !a.len().is_multiple_of(2) {
            return Err(EnvError::Dimension {
                what: "action",
                expected: a.len() + 1,
                found: a.len(),
            });
        }
        let (mu, omega) = a.split_at(a.len() / 2);
        Ok(Action {
            d_mu: mu.to_vec(),
            d_omega: omega.to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.d_mu.iter().chain(&self.d_omega).copied().collect()
    }

    /// Clips into the action box; NaN becomes 0.
    pub fn clipped(&self) -> Self {
        let clip = |x: f64, m: f64| if x.is_nan() { 0.0 } else { x.clamp(-m, m) };
        Action {
            d_mu: self.d_mu.iter().map(|&x| clip(x, MAX_STEP_MU)).collect(),
            d_omega: self
                .d_omega
                .iter()
                .map(|&x| clip(x, MAX_STEP_OMEGA))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    /// Never positive.
    pub reward: f64,
    /// `k ≤ k_max` after the update.
    pub done: bool,
    /// Horizon reached without `done`.
    pub truncated: bool,
    /// The update hit a degenerate voltage or a non-finite mismatch.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateMode {
    Classic,
    /// Step magnitudes come from the action, directions from the sampler.
    Quantum {
        backend: Backend,
        n_read: usize,
    },
}

impl UpdateMode {
    pub fn quantum(backend: Backend) -> Self {
        UpdateMode::Quantum {
            backend,
            n_read: DEFAULT_N_READ,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub k_max: u32,
    /// Episode horizon `T`.
    pub horizon: usize,
    pub mode: UpdateMode,
    pub nr: NrConfig,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            k_max: 3,
            horizon: 20,
            mode: UpdateMode::Classic,
            nr: NrConfig::default(),
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max < 1 {
            return Err(EnvError::InvalidConfig("k_max must be >= 1".into()));
        }
        if self.horizon < 1 {
            return Err(EnvError::InvalidConfig("horizon must be >= 1".into()));
        }
        if let UpdateMode::Quantum { n_read: 0, .. } = self.mode {
            return Err(EnvError::InvalidConfig("n_read must be >= 1".into()));
        }
        self.nr.validate()?;
        Ok(())
    }
}

/// `−‖[ΔP, ΔQ]‖` over the load buses. Non-finite mismatches give
/// [`REWARD_SENTINEL`] and `true`.
pub fn reward_of(grid: &Grid, v: &VoltageProfile) -> Result<(f64, bool)> {
    let norm = mismatch_pq(grid, v)?.load_norm(grid);
    if norm.is_finite() {
        Ok((-norm, false))
    } else {
        Ok((REWARD_SENTINEL, true))
    }
}

/// Full-grid profile: state values on load buses, flat start elsewhere.
pub fn profile_of(grid: &Grid, s: &State) -> Result<VoltageProfile> {
    let load = grid.load_buses();
    if s.v.len() != load.len() || s.theta.len() != load.len() {
        return Err(EnvError::Dimension {
            what: "state",
            expected: load.len(),
            found: s.v.len().max(s.theta.len()),
        });
    }
    let mut p = grid.flat_start();
    for (j, &bus) in load.iter().enumerate() {
        p.vm[bus] = s.v[j];
        p.va_deg[bus] = s.theta[j];
    }
    Ok(p)
}

fn clamp_polar(v: f64, theta: f64) -> (f64, f64) {
    let v = if v.is_nan() {
        V_FLOOR
    } else {
        v.clamp(V_FLOOR, V_MAX)
    };
    let theta = if theta.is_nan() {
        0.0
    } else {
        theta.clamp(THETA_FLOOR, THETA_MAX)
    };
    (v, theta)
}

/// State for a load-bus start, with `k` from a fresh NR run.
pub fn state_at(grid: &Grid, v: &[f64], theta: &[f64], nr: &NrConfig) -> Result<State> {
    let mut s = State {
        v: v.to_vec(),
        theta: theta.to_vec(),
        k: 0,
    };
    let p = profile_of(grid, &s)?;
    s.k = solve_nr(grid, &p, nr)?.k;
    Ok(s)
}

/// Clamps the new load-bus voltages, runs NR from them and scores them.
fn finish_update(
    grid: &Grid,
    new_load: Option<Vec<(f64, f64)>>,
    k_max: u32,
    nr: &NrConfig,
) -> Result<StepResult> {
    let n_load = grid.load_buses().len();
    let Some(polar) = new_load else {
        let next_state = State {
            v: vec![V_FLOOR; n_load],
            theta: vec![0.0; n_load],
            k: DIVERGED_K,
        };
        return Ok(StepResult {
            next_state,
            reward: REWARD_SENTINEL,
            done: false,
            truncated: false,
            failed: true,
        });
    };
    let (v, theta): (Vec<f64>, Vec<f64>) =
        polar.into_iter().map(|(v, t)| clamp_polar(v, t)).unzip();
    let next_state = state_at(grid, &v, &theta, nr)?;
    let (reward, failed) = reward_of(grid, &profile_of(grid, &next_state)?)?;
    Ok(StepResult {
        done: next_state.k <= k_max,
        next_state,
        reward,
        truncated: false,
        failed,
    })
}

fn check_action(s: &State, a: &Action) -> Result<()> {
    if a.d_mu.len() != s.n_load() || a.d_omega.len() != s.n_load() {
        return Err(EnvError::Dimension {
            what: "action",
            expected: 2 * s.n_load(),
            found: a.d_mu.len() + a.d_omega.len(),
        });
    }
    Ok(())
}

/// Adds the (clipped) action to the rectangular load-bus voltages.
pub fn step_classic(
    grid: &Grid,
    s: &State,
    a: &Action,
    k_max: u32,
    nr: &NrConfig,
) -> Result<StepResult> {
    check_action(s, a)?;
    let a = a.clipped();
    let polar = (0..s.n_load())
        .map(|j| {
            let (m, w) = polar_to_rect(s.v[j], s.theta[j]);
            rect_to_polar(m + a.d_mu[j], w + a.d_omega[j])
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .ok();
    finish_update(grid, polar, k_max, nr)
}

/// Lets the sampler pick the direction of each (clipped) action component.
///
/// The Hamiltonian is built around the state, sampled with `backend`, and
/// the lowest-energy bitstring is decoded into the new load-bus voltages.
pub fn step_quantum(
    grid: &Grid,
    s: &State,
    a: &Action,
    backend: &Backend,
    n_read: usize,
    k_max: u32,
    nr: &NrConfig,
) -> Result<StepResult> {
    check_action(s, a)?;
    let a = a.clipped();
    let base = profile_of(grid, s)?;
    let spec = IncrementSpec::new(grid, base, a.d_mu, a.d_omega)?;
    let (_, q) = build_pf_qubo(grid, &spec)?;
    let set = backend.sample(&q, n_read)?;
    let best = set
        .best()
        .ok_or_else(|| EnvError::NoSamples(set.backend_id.clone()))?;
    let polar = match decode(&best.bits, &spec) {
        Ok(p) => Some(
            grid.load_buses()
                .iter()
                .map(|&b| (p.vm[b], p.va_deg[b]))
                .collect(),
        ),
        Err(QuboError::Grid(GridError::DegenerateVoltage)) => None,
        Err(e) => return Err(e.into()),
    };
    finish_update(grid, polar, k_max, nr)
}

/// One step of an episode as exported to JSON lines. The record with
/// `t = 0` holds the start and has no action or reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<usize>,
    pub t: usize,
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub k: u32,
    pub action: Vec<f64>,
    pub reward: Option<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTrace {
    pub initial: Option<State>,
    pub steps: Vec<(Action, StepResult)>,
}

impl EpisodeTrace {
    /// Number of actions taken.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_state(&self) -> Option<&State> {
        self.steps
            .last()
            .map(|(_, r)| &r.next_state)
            .or(self.initial.as_ref())
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|(_, r)| r.reward).sum()
    }

    pub fn records(&self, scenario: Option<usize>, k_max: u32) -> Vec<TraceRecord> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        if let Some(s) = &self.initial {
            out.push(TraceRecord {
                scenario,
                t: 0,
                v: s.v.clone(),
                theta: s.theta.clone(),
                k: s.k,
                action: Vec::new(),
                reward: None,
                done: s.k <= k_max,
            });
        }
        for (i, (a, r)) in self.steps.iter().enumerate() {
            out.push(TraceRecord {
                scenario,
                t: i + 1,
                v: r.next_state.v.clone(),
                theta: r.next_state.theta.clone(),
                k: r.next_state.k,
                action: a.to_flat(),
                reward: Some(r.reward),
                done: r.done,
            });
        }
        out
    }

    pub fn write_jsonl<W: Write>(
        &self,
        mut out: W,
        scenario: Option<usize>,
        k_max: u32,
    ) -> Result<()> {
        for rec in self.records(scenario, k_max) {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads every record of a JSON-lines trace file.
pub fn read_trace_records<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    input
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// The power-flow initialisation MDP.
#[derive(Debug, Clone)]
pub struct PfEnv {
    grid: Grid,
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    state: Option<State>,
    t: usize,
}

impl PfEnv {
    pub fn new(grid: Grid, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        if grid.load_buses().is_empty() {
            return Err(EnvError::InvalidConfig("grid has no load buses".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(PfEnv {
            grid,
            cfg,
            rng,
            state: None,
            t: 0,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn n_load(&self) -> usize {
        self.grid.load_buses().len()
    }

    pub fn obs_dim(&self) -> usize {
        2 * self.n_load() + 1
    }

    pub fn act_dim(&self) -> usize {
        2 * self.n_load()
    }

    pub fn state(&self) -> Option<&State> {
        self.state.as_ref()
    }

    /// Steps taken since the last reset.
    pub fn t(&self) -> usize {
        self.t
    }

    /// `V ~ U(0,2]`, `θ ~ U(−90,90]` on every load bus.
    pub fn reset(&mut self) -> Result<State> {
        let n = self.n_load();
        let mut v = Vec::with_capacity(n);
        let mut theta = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(V_MAX - V_MAX * self.rng.random::<f64>());
            theta.push(THETA_MAX - 2.0 * THETA_MAX * self.rng.random::<f64>());
        }
        self.reset_to(&v, &theta)
    }

    /// Resets until the start is not already solved within `k_max`.
    pub fn reset_unsolved(&mut self) -> Result<State> {
        for _ in 0..MAX_RESET_ATTEMPTS {
            let s = self.reset()?;
            if s.k > self.cfg.k_max {
                return Ok(s);
            }
        }
        Err(EnvError::NoUnsolvedStart(MAX_RESET_ATTEMPTS))
    }

    pub fn reset_to(&mut self, v: &[f64], theta: &[f64]) -> Result<State> {
        let s = state_at(&self.grid, v, theta, &self.cfg.nr)?;
        self.state = Some(s.clone());
        self.t = 0;
        Ok(s)
    }

    /// Applies `a` in the configured mode and advances time.
    pub fn step(&mut self, a: &Action) -> Result<StepResult> {
        let s = self
            .state
            .as_ref()
            .ok_or_else(|| EnvError::InvalidConfig("step before reset".into()))?;
        let mut r = match &self.cfg.mode {
            UpdateMode::Classic => step_classic(&self.grid, s, a, self.cfg.k_max, &self.cfg.nr)?,
            UpdateMode::Quantum { backend, n_read } => {
                let backend = backend.with_seed(self.rng.next_u64());
                step_quantum(
                    &self.grid,
                    s,
                    a,
                    &backend,
                    *n_read,
                    self.cfg.k_max,
                    &self.cfg.nr,
                )?
            }
        };
        self.t += 1;
        r.truncated = !r.done && self.t >= self.cfg.horizon;
        self.state = Some(r.next_state.clone());
        Ok(r)
    }

    /// `[V…, θ/90…, k/50]`.
    pub fn observe(s: &State) -> Vec<f64> {
        s.v.iter()
            .copied()
            .chain(s.theta.iter().map(|t| t / THETA_MAX))
            .chain(std::iter::once(f64::from(s.k) / f64::from(DIVERGED_K)))
            .collect()
    }

    /// Runs one episode from the current state. Ends immediately when the
    /// start already satisfies `k ≤ k_max`.
    pub fn run_from_current<P>(&mut self, mut policy: P) -> Result<EpisodeTrace>
    where
        P: FnMut(&[f64]) -> Vec<f64>,
    {
        let initial = self
            .state
            .clone()
            .ok_or_else(|| EnvError::InvalidConfig("episode before reset".into()))?;
        let mut trace = EpisodeTrace {
            initial: Some(initial.clone()),
            steps: Vec::new(),
        };
        if initial.k <= self.cfg.k_max {
            return Ok(trace);
        }
        let mut s = initial;
        loop {
            let a = Action::from_flat(&policy(&Self::observe(&s)))?;
            let r = self.step(&a)?;
            s = r.next_state.clone();
            let end = r.done || r.truncated;
            trace.steps.push((a.clipped(), r));
            if end {
                return Ok(trace);
            }
        }
    }

    /// Resets and runs one episode.
    pub fn run_episode<P>(&mut self, policy: P) -> Result<EpisodeTrace>
    where
        P: FnMut(&[f64]) -> Vec<f64>,
    {
        self.reset()?;
        self.run_from_current(policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::load_case;
    use crate::newton::Mismatch;

    fn case4() -> Grid {
        load_case("case4").unwrap()
    }

    fn solution_state(grid: &Grid) -> State {
        let sol = solve_nr(grid, &grid.flat_start(), &NrConfig::default()).unwrap();
        let load = grid.load_buses();
        State {
            v: load.iter().map(|&b| sol.voltages.vm[b]).collect(),
            theta: load.iter().map(|&b| sol.voltages.va_deg[b]).collect(),
            k: 0,
        }
    }

    #[test]
    fn resets_are_bounded_and_seeded() {
        let cfg = EnvConfig {
            seed: 9,
            ..EnvConfig::default()
        };
        let mut a = PfEnv::new(case4(), cfg.clone()).unwrap();
        let mut b = PfEnv::new(case4(), cfg).unwrap();
        for _ in 0..50 {
            let s = a.reset().unwrap();
            assert!(s.in_bounds(), "{s:?}");
            assert_eq!(s, b.reset().unwrap());
        }
    }

    #[test]
    fn reset_hits_both_regions() {
        let mut env = PfEnv::new(case4(), EnvConfig::default()).unwrap();
        let ks: Vec<u32> = (0..2000).map(|_| env.reset().unwrap().k).collect();
        assert!(ks.iter().any(|&k| k <= 5));
        assert!(ks.iter().any(|&k| k == DIVERGED_K));
    }

    #[test]
    fn flat_start_reward_matches_mismatch_oracle() {
        let grid = case4();
        let (r, failed) = reward_of(&grid, &grid.flat_start()).unwrap();
        assert!(!failed);
        // direct complex evaluation of S = V (Y V)* at the flat start
        let n = grid.n_bus();
        let mut parts = Vec::new();
        for &i in &grid.load_buses() {
            let (mut re, mut im) = (0.0, 0.0);
            for k in 0..n {
                let v = grid.flat_start();
                let (m, w) = polar_to_rect(v.vm[k], v.va_deg[k]);
                re += grid.g()[(i, k)] * m - grid.b()[(i, k)] * w;
                im += grid.g()[(i, k)] * w + grid.b()[(i, k)] * m;
            }
            // V_i = 1∠0 so S_i = conj(I_i)
            parts.push(re + grid.p_dem()[i]);
            parts.push(-im + grid.q_dem()[i]);
        }
        let want = -parts.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((r - want).abs() < 1e-9, "{r} vs {want}");
    }

    #[test]
    fn solution_is_a_fixed_point() {
        let grid = case4();
        let s = solution_state(&grid);
        let r = step_classic(&grid, &s, &Action::zeros(3), 3, &NrConfig::default()).unwrap();
        assert!(r.done);
        assert!(r.next_state.k <= 3);
        assert!(r.reward.abs() < 1e-8);
    }

    #[test]
    fn zero_action_keeps_state() {
        let grid = case4();
        let nr = NrConfig::default();
        let s = state_at(&grid, &[0.6, 1.3, 0.9], &[10.0, -40.0, 5.0], &nr).unwrap();
        let r = step_classic(&grid, &s, &Action::zeros(3), 3, &nr).unwrap();
        for j in 0..3 {
            assert!((r.next_state.v[j] - s.v[j]).abs() < 1e-12);
            assert!((r.next_state.theta[j] - s.theta[j]).abs() < 1e-9);
        }
        assert_eq!(r.next_state.k, s.k);
    }

    #[test]
    fn classic_step_matches_out_of_band_nr() {
        let grid = case4();
        let nr = NrConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..1.8)).collect();
            let t: Vec<f64> = (0..3).map(|_| rng.random_range(-60.0..60.0)).collect();
            let s = state_at(&grid, &v, &t, &nr).unwrap();
            let a = Action {
                d_mu: (0..3).map(|_| rng.random_range(-0.6..0.6)).collect(),
                d_omega: (0..3).map(|_| rng.random_range(-0.3..0.3)).collect(),
            };
            let r = step_classic(&grid, &s, &a, 3, &nr).unwrap();
            assert!(r.next_state.in_bounds());
            let p = profile_of(&grid, &r.next_state).unwrap();
            assert_eq!(solve_nr(&grid, &p, &nr).unwrap().k, r.next_state.k);
            let m: Mismatch = mismatch_pq(&grid, &p).unwrap();
            assert!((r.reward + m.load_norm(&grid)).abs() < 1e-12);
            assert!(r.reward <= 0.0);
        }
    }

    #[test]
    fn actions_are_clipped() {
        let a = Action {
            d_mu: vec![0.9, -0.7, f64::NAN],
            d_omega: vec![0.3, -0.1, -0.26],
        }
        .clipped();
        assert_eq!(a.d_mu, vec![0.5, -0.5, 0.0]);
        assert_eq!(a.d_omega, vec![0.25, -0.1, -0.25]);
        assert_eq!(Action::from_flat(&a.to_flat()).unwrap(), a);
    }

    #[test]
    fn clamping_keeps_state_in_bounds() {
        let grid = case4();
        let nr = NrConfig::default();
        // pushes bus voltages into the left half plane and towards V = 2
        let s = state_at(&grid, &[0.1, 1.95, 1.0], &[0.0, 0.0, 89.0], &nr).unwrap();
        let a = Action {
            d_mu: vec![-0.5, 0.5, -0.5],
            d_omega: vec![0.0, 0.25, 0.25],
        };
        let r = step_classic(&grid, &s, &a, 3, &nr).unwrap();
        assert!(r.next_state.in_bounds(), "{:?}", r.next_state);
        assert_eq!(r.next_state.theta[0], THETA_MAX);
        assert_eq!(r.next_state.v[1], V_MAX);
    }

    #[test]
    fn landing_on_zero_voltage_fails_softly() {
        let grid = case4();
        let nr = NrConfig::default();
        let s = state_at(&grid, &[0.5, 1.0, 1.0], &[0.0, 0.0, 0.0], &nr).unwrap();
        let a = Action {
            d_mu: vec![-0.5, 0.0, 0.0],
            d_omega: vec![0.0; 3],
        };
        let r = step_classic(&grid, &s, &a, 3, &nr).unwrap();
        assert!(r.failed);
        assert_eq!(r.reward, REWARD_SENTINEL);
        assert_eq!(r.next_state.k, DIVERGED_K);
        assert!(r.next_state.in_bounds());
    }

    #[test]
    fn quantum_zero_action_equals_classic() {
        let grid = case4();
        let nr = NrConfig::default();
        let s = state_at(&grid, &[0.7, 1.2, 0.9], &[20.0, -10.0, 0.0], &nr).unwrap();
        let zero = Action::zeros(3);
        let q = step_quantum(&grid, &s, &zero, &Backend::BruteForce, 10, 3, &nr).unwrap();
        let c = step_classic(&grid, &s, &zero, 3, &nr).unwrap();
        assert_eq!(q.next_state.k, c.next_state.k);
        assert!((q.reward - c.reward).abs() < 1e-12);
        for j in 0..3 {
            assert!((q.next_state.v[j] - c.next_state.v[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn quantum_at_solution_stays_put() {
        let grid = case4();
        let nr = NrConfig::default();
        let s = solution_state(&grid);
        let a = Action {
            d_mu: vec![0.05, -0.03, 0.02],
            d_omega: vec![0.01, 0.02, -0.02],
        };
        let r = step_quantum(&grid, &s, &a, &Backend::BruteForce, 10, 3, &nr).unwrap();
        assert!(r.done);
        assert!(r.reward.abs() < 1e-8);
    }

    #[test]
    fn quantum_dominates_sign_matched_classic() {
        let grid = case4();
        let nr = NrConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..15 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(0.6..1.4)).collect();
            let t: Vec<f64> = (0..3).map(|_| rng.random_range(-30.0..30.0)).collect();
            let s = state_at(&grid, &v, &t, &nr).unwrap();
            let a = Action {
                d_mu: (0..3).map(|_| rng.random_range(-0.25..0.25)).collect(),
                d_omega: (0..3).map(|_| rng.random_range(-0.1..0.1)).collect(),
            };
            let q = step_quantum(&grid, &s, &a, &Backend::BruteForce, 1, 3, &nr).unwrap();
            let c = step_classic(&grid, &s, &a, 3, &nr).unwrap();
            assert!(q.reward >= c.reward - 1e-9, "{} < {}", q.reward, c.reward);
        }
    }

    #[test]
    fn episodes_end_within_horizon() {
        let cfg = EnvConfig {
            seed: 4,
            ..EnvConfig::default()
        };
        let mut env = PfEnv::new(case4(), cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let tr = env
                .run_episode(|_| (0..6).map(|_| rng.random_range(-0.5..0.5)).collect())
                .unwrap();
            assert!(tr.len() <= 20);
            if let Some((_, last)) = tr.steps.last() {
                assert!(last.done || last.truncated);
                assert!(!(last.done && last.truncated));
            }
            for (_, r) in &tr.steps[..tr.len().saturating_sub(1)] {
                assert!(!r.done && !r.truncated);
            }
        }
    }

    #[test]
    fn solved_start_gives_zero_length_trace() {
        let grid = case4();
        let s = solution_state(&grid);
        let mut env = PfEnv::new(grid, EnvConfig::default()).unwrap();
        env.reset_to(&s.v, &s.theta).unwrap();
        let tr = env.run_from_current(|_| vec![0.0; 6]).unwrap();
        assert!(tr.is_empty());
        assert_eq!(tr.final_state().unwrap().k, 0);
        let recs = tr.records(None, 3);
        assert_eq!(recs.len(), 1);
        assert!(recs[0].done && recs[0].reward.is_none());
    }

    #[test]
    fn random_policy_trace_is_deterministic_and_round_trips() {
        let run = || {
            let cfg = EnvConfig {
                seed: 12,
                ..EnvConfig::default()
            };
            let mut env = PfEnv::new(case4(), cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            env.reset_unsolved().unwrap();
            env.run_from_current(|_| (0..6).map(|_| rng.random_range(-0.5..0.5)).collect())
                .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(!a.is_empty());
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf, Some(2), 3).unwrap();
        let recs = read_trace_records(&buf[..]).unwrap();
        assert_eq!(recs, a.records(Some(2), 3));
        assert_eq!(recs.len(), a.len() + 1);
        let first: serde_json::Value =
            serde_json::from_slice(buf.split(|&b| b == b'\n').nth(1).unwrap()).unwrap();
        for key in ["t", "V", "theta", "k", "action", "reward", "done"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn observation_layout() {
        let s = State {
            v: vec![1.0, 0.5],
            theta: vec![45.0, -90.0],
            k: 25,
        };
        assert_eq!(PfEnv::observe(&s), vec![1.0, 0.5, 0.5, -1.0, 0.5]);
    }

    #[test]
    fn config_validation() {
        let bad = EnvConfig {
            k_max: 0,
            ..EnvConfig::default()
        };
        assert!(PfEnv::new(case4(), bad).is_err());
        let bad = EnvConfig {
            mode: UpdateMode::Quantum {
                backend: Backend::BruteForce,
                n_read: 0,
            },
            ..EnvConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

//! Newton-Raphson power flow with learned initial values.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: bus data, admittance assembly, polar/rectangular conversions.
//! * [`newton`]: mismatch evaluation, Jacobian, NR solver and basin sweeps.
//! * [`qubo`]: the sum-of-squares power-balance Hamiltonian over binary
//!   voltage increments, its quartic expansion and quadratization.
//! * [`annealer`]: brute-force and simulated-annealing samplers plus a
//!   line-delimited JSON remote sampler protocol.
//! * [`env`]: the episodic environment that adjusts initial voltages, with a
//!   classic update and an annealer-driven update.
//! * [`ppo`]: a small dependency-free PPO agent (MLPs, GAE, clipped surrogate).

pub mod annealer;
pub mod env;
pub mod grid;
pub mod newton;
pub mod ppo;
pub mod qubo;

pub use annealer::{AnnealSchedule, Backend, Sample, SampleSet};
pub use env::{Action, EnvConfig, EpisodeTrace, PfEnv, State, StepResult, UpdateMode};
pub use grid::{BusKind, Grid, VoltageProfile};
pub use newton::{NrConfig, PfSolution};
pub use ppo::{PpoHyper, TrainingTrace};
pub use qubo::{IncrementSpec, PolyProblem, QuboProblem};

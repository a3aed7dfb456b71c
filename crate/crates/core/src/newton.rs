//! Newton-Raphson power flow in polar coordinates.
//!
//! Unknowns are the angles of all non-slack buses followed by the magnitudes
//! of the load buses. Mismatches are evaluated from the rectangular form of
//! the injections, which is the same expansion the QUBO builder uses.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BusKind, Grid, GridError, VoltageProfile};

/// Iteration count reported for any failed solve.
pub const DIVERGED_K: u32 = 50;

/// Pivots smaller than this make the Jacobian count as singular.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NewtonError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("bus {0} is not a load bus")]
    NotLoadBus(usize),
    #[error("basin CSV: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, NewtonError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NrConfig {
    /// Convergence threshold on the Euclidean mismatch norm.
    pub tolerance: f64,
    pub max_iter: u32,
    /// Fraction of the Newton step applied per iteration.
    pub relaxation: f64,
}

impl Default for NrConfig {
    fn default() -> Self {
        NrConfig {
            tolerance: 1e-8,
            max_iter: DIVERGED_K,
            relaxation: 1.0,
        }
    }
}

impl NrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(NewtonError::InvalidConfig("tolerance must be > 0".into()));
        }
        if self.max_iter < 1 || self.max_iter > DIVERGED_K {
            return Err(NewtonError::InvalidConfig(format!(
                "max_iter must lie in 1..={DIVERGED_K}"
            )));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(NewtonError::InvalidConfig(
                "relaxation must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    MaxIter,
    SingularJacobian,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfSolution {
    pub converged: bool,
    /// Completed iterations; [`DIVERGED_K`] on failure.
    pub k: u32,
    pub voltages: VoltageProfile,
    /// Mismatch norm before each iteration and after the last one.
    pub residual_history: Vec<f64>,
    pub failure: Option<FailureKind>,
}

/// Power-balance residuals. `dp` is indexed like [`Grid::p_buses`], `dq`
/// like [`Grid::load_buses`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub p_buses: Vec<usize>,
    pub dp: Vec<f64>,
    pub q_buses: Vec<usize>,
    pub dq: Vec<f64>,
}

impl Mismatch {
    pub fn to_vec(&self) -> Vec<f64> {
        self.dp.iter().chain(&self.dq).copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.dp
            .iter()
            .chain(&self.dq)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Sum of squared ΔP and ΔQ over load buses only.
    pub fn load_sum_squares(&self, grid: &Grid) -> f64 {
        let dp: f64 = self
            .p_buses
            .iter()
            .zip(&self.dp)
            .filter(|(b, _)| grid.kinds()[**b] == BusKind::Load)
            .map(|(_, x)| x * x)
            .sum();
        dp + self.dq.iter().map(|x| x * x).sum::<f64>()
    }

    pub fn load_norm(&self, grid: &Grid) -> f64 {
        self.load_sum_squares(grid).sqrt()
    }
}

/// Net injections `(P, Q)` at every bus from rectangular voltages.
pub fn injections_rect(grid: &Grid, mu: &[f64], omega: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (g, b) = (grid.g(), grid.b());
    let n = grid.n_bus();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        // re/im parts of (Y V)_i
        let mut re = 0.0;
        let mut im = 0.0;
        for k in 0..n {
            re += g[(i, k)] * mu[k] - b[(i, k)] * omega[k];
            im += g[(i, k)] * omega[k] + b[(i, k)] * mu[k];
        }
        p[i] = mu[i] * re + omega[i] * im;
        q[i] = omega[i] * re - mu[i] * im;
    }
    (p, q)
}

fn mismatch_from_injections(grid: &Grid, p: &[f64], q: &[f64]) -> Mismatch {
    let p_buses = grid.p_buses();
    let q_buses = grid.load_buses();
    let dp = p_buses
        .iter()
        .map(|&i| p[i] - grid.p_gen()[i] + grid.p_dem()[i])
        .collect();
    let dq = q_buses
        .iter()
        .map(|&i| q[i] - grid.q_gen()[i] + grid.q_dem()[i])
        .collect();
    Mismatch {
        p_buses,
        dp,
        q_buses,
        dq,
    }
}

/// ΔP for PV and load buses, ΔQ for load buses.
pub fn mismatch_pq(grid: &Grid, v: &VoltageProfile) -> Result<Mismatch> {
    v.check_dims(grid)?;
    let (mu, omega) = v.rect();
    let (p, q) = injections_rect(grid, &mu, &omega);
    Ok(mismatch_from_injections(grid, &p, &q))
}

fn mismatch_polar(grid: &Grid, vm: &[f64], va: &[f64]) -> (Mismatch, Vec<f64>, Vec<f64>) {
    let (mu, omega): (Vec<f64>, Vec<f64>) = vm
        .iter()
        .zip(va)
        .map(|(&v, &t)| (v * t.cos(), v * t.sin()))
        .unzip();
    let (p, q) = injections_rect(grid, &mu, &omega);
    (mismatch_from_injections(grid, &p, &q), p, q)
}

fn jacobian_polar(grid: &Grid, vm: &[f64], va: &[f64], p: &[f64], q: &[f64]) -> DMatrix<f64> {
    let (g, b) = (grid.g(), grid.b());
    let p_buses = grid.p_buses();
    let q_buses = grid.load_buses();
    let n_theta = p_buses.len();
    let dim = n_theta + q_buses.len();
    let mut jac = DMatrix::zeros(dim, dim);

    // (dP_i/dθ_k, dP_i/dV_k, dQ_i/dθ_k, dQ_i/dV_k)
    let partials = |i: usize, k: usize| -> (f64, f64, f64, f64) {
        let (gik, bik) = (g[(i, k)], b[(i, k)]);
        if i == k {
            let v = vm[i];
            (
                -q[i] - bik * v * v,
                p[i] / v + gik * v,
                p[i] - gik * v * v,
                q[i] / v - bik * v,
            )
        } else {
            let (s, c) = (va[i] - va[k]).sin_cos();
            let t1 = gik * s - bik * c;
            let t2 = gik * c + bik * s;
            (
                vm[i] * vm[k] * t1,
                vm[i] * t2,
                -vm[i] * vm[k] * t2,
                vm[i] * t1,
            )
        }
    };

    for (r, &i) in p_buses.iter().enumerate() {
        for (c, &k) in p_buses.iter().enumerate() {
            jac[(r, c)] = partials(i, k).0;
        }
        for (c, &k) in q_buses.iter().enumerate() {
            jac[(r, n_theta + c)] = partials(i, k).1;
        }
    }
    for (r, &i) in q_buses.iter().enumerate() {
        for (c, &k) in p_buses.iter().enumerate() {
            jac[(n_theta + r, c)] = partials(i, k).2;
        }
        for (c, &k) in q_buses.iter().enumerate() {
            jac[(n_theta + r, n_theta + c)] = partials(i, k).3;
        }
    }
    jac
}

/// Jacobian of `[ΔP; ΔQ]` with respect to `[θ (non-slack, radians); V (load)]`.
pub fn jacobian(grid: &Grid, v: &VoltageProfile) -> Result<DMatrix<f64>> {
    v.check_dims(grid)?;
    let va: Vec<f64> = v.va_deg.iter().map(|t| t.to_radians()).collect();
    let (_, p, q) = mismatch_polar(grid, &v.vm, &va);
    Ok(jacobian_polar(grid, &v.vm, &va, &p, &q))
}

/// Runs Newton-Raphson from `v0`.
///
/// Slack voltage and PV magnitudes are taken from the grid; `v0` supplies
/// every other starting value. Convergence is tested before the first
/// iteration, so a start that already satisfies the tolerance reports `k = 0`.
pub fn solve_nr(grid: &Grid, v0: &VoltageProfile, cfg: &NrConfig) -> Result<PfSolution> {
    v0.check_dims(grid)?;
    cfg.validate()?;
    let p_buses = grid.p_buses();
    let q_buses = grid.load_buses();
    let n_theta = p_buses.len();

    let mut vm = v0.vm.clone();
    let mut va: Vec<f64> = v0.va_deg.iter().map(|t| t.to_radians()).collect();
    for i in 0..grid.n_bus() {
        if grid.kinds()[i] != BusKind::Load {
            vm[i] = grid.v_set()[i];
        }
    }
    va[0] = grid.slack_voltage().ang.to_radians();

    let mut history = Vec::new();
    let mut it = 0u32;
    let failure = loop {
        let (mis, p, q) = mismatch_polar(grid, &vm, &va);
        let norm = mis.norm();
        history.push(norm);
        let finite_state = vm.iter().chain(&va).all(|x| x.is_finite());
        if !norm.is_finite() || !finite_state {
            break Some(FailureKind::NonFinite);
        }
        if norm < cfg.tolerance {
            break None;
        }
        if it == cfg.max_iter {
            break Some(FailureKind::MaxIter);
        }
        let jac = jacobian_polar(grid, &vm, &va, &p, &q);
        let lu = jac.lu();
        let min_pivot = lu
            .u()
            .diagonal()
            .iter()
            .fold(f64::INFINITY, |m, d| m.min(d.abs()));
        if !(min_pivot >= PIVOT_TOL) {
            break Some(FailureKind::SingularJacobian);
        }
        let rhs = -DVector::from_vec(mis.to_vec());
        let Some(dx) = lu.solve(&rhs) else {
            break Some(FailureKind::SingularJacobian);
        };
        for (c, &k) in p_buses.iter().enumerate() {
            va[k] += cfg.relaxation * dx[c];
        }
        for (c, &k) in q_buses.iter().enumerate() {
            vm[k] += cfg.relaxation * dx[n_theta + c];
        }
        it += 1;
    };

    let voltages = VoltageProfile {
        vm,
        va_deg: va.iter().map(|t| t.to_degrees()).collect(),
    };
    Ok(PfSolution {
        converged: failure.is_none(),
        k: if failure.is_none() { it } else { DIVERGED_K },
        voltages,
        residual_history: history,
        failure,
    })
}

/// `n` points evenly spaced over `(lo, hi]`.
pub fn half_open_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .collect()
}

/// Iteration counts over a grid of starting values at one load bus.
#[derive(Debug, Clone, PartialEq)]
pub struct BasinMap {
    pub bus: usize,
    /// Row coordinates (p.u.).
    pub v_values: Vec<f64>,
    /// Column coordinates (degrees).
    pub theta_values: Vec<f64>,
    /// `k[row][col]`, 50 marks divergence.
    pub k: Vec<Vec<u32>>,
}

/// Varies the start of `bus` over `v_values × theta_values` with every other
/// bus at its flat-start value, and records the NR iteration count.
pub fn basin_sweep(
    grid: &Grid,
    bus: usize,
    v_values: &[f64],
    theta_values: &[f64],
    cfg: &NrConfig,
) -> Result<BasinMap> {
    if grid.kinds().get(bus) != Some(&BusKind::Load) {
        return Err(NewtonError::NotLoadBus(bus));
    }
    cfg.validate()?;
    let base = grid.flat_start();
    let k = v_values
        .par_iter()
        .map(|&v| {
            theta_values
                .iter()
                .map(|&theta| {
                    let mut start = base.clone();
                    start.vm[bus] = v;
                    start.va_deg[bus] = theta;
                    solve_nr(grid, &start, cfg).map(|s| s.k)
                })
                .collect::<Result<Vec<u32>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BasinMap {
        bus,
        v_values: v_values.to_vec(),
        theta_values: theta_values.to_vec(),
        k,
    })
}

impl BasinMap {
    /// Header row `v\theta, θ_1, …`; then one row per V value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| NewtonError::Csv(e.to_string());
        let mut header = vec!["v\\theta".to_owned()];
        header.extend(self.theta_values.iter().map(|t| t.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (v, row) in self.v_values.iter().zip(&self.k) {
            let mut rec = vec![v.to_string()];
            rec.extend(row.iter().map(|k| k.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| NewtonError::Csv(e.to_string()))
    }

    /// Reads a map written by [`BasinMap::write_csv`]; `bus` is not stored
    /// in the file.
    pub fn read_csv<R: Read>(input: R, bus: usize) -> Result<BasinMap> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(input);
        let parse_f = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| NewtonError::Csv(format!("bad number `{s}`: {e}")))
        };
        let mut rows = r.records();
        let header = rows
            .next()
            .ok_or_else(|| NewtonError::Csv("empty file".into()))?
            .map_err(|e| NewtonError::Csv(e.to_string()))?;
        let theta_values = header
            .iter()
            .skip(1)
            .map(parse_f)
            .collect::<Result<Vec<_>>>()?;
        let mut v_values = Vec::new();
        let mut k = Vec::new();
        for rec in rows {
            let rec = rec.map_err(|e| NewtonError::Csv(e.to_string()))?;
            v_values.push(parse_f(&rec[0])?);
            let row = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<u32>()
                        .map_err(|e| NewtonError::Csv(format!("bad count `{s}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != theta_values.len() {
                return Err(NewtonError::Csv("ragged row".into()));
            }
            k.push(row);
        }
        Ok(BasinMap {
            bus,
            v_values,
            theta_values,
            k,
        })
    }

    /// Cells sorted by descending k, ties in row-major order.
    pub fn worst_cells(&self) -> Vec<(f64, f64, u32)> {
        let mut cells: Vec<(usize, usize)> = (0..self.v_values.len())
            .flat_map(|r| (0..self.theta_values.len()).map(move |c| (r, c)))
            .collect();
        cells.sort_by_key(|&(r, c)| std::cmp::Reverse(self.k[r][c]));
        cells
            .into_iter()
            .map(|(r, c)| (self.v_values[r], self.theta_values[c], self.k[r][c]))
            .collect()
    }
}

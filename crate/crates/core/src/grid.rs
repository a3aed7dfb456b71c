//! Power-system data model: bus kinds, admittance matrix, demand and
//! generation vectors, and the case-file format.
//!
//! All quantities are per-unit. Angles are degrees at every public boundary.
//! Buses are ordered slack first, then PV, then load buses.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const CASE4_JSON: &str = include_str!("../data/case4.json");
const CASE14_JSON: &str = include_str!("../data/case14.json");

/// Names of the cases compiled into the crate.
pub const BUILTIN_CASES: [&str; 2] = ["case4", "case14"];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unknown case `{0}` (builtin cases: case4, case14)")]
    UnknownCase(String),
    #[error("failed to read case file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed case file: {0}")]
    Malformed(String),
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    Dimension {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("a grid needs exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("buses must be ordered slack, PV, load (offending bus index {0})")]
    BusOrder(usize),
    #[error("branch list is empty")]
    NoBranches,
    #[error("branch connects bus {0} to itself")]
    SelfLoop(usize),
    #[error("bus index {index} out of range for a {n_bus}-bus grid")]
    BusIndex { index: usize, n_bus: usize },
    #[error("voltage (0, 0) has no polar representation")]
    DegenerateVoltage,
}

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Load,
}

impl BusKind {
    fn rank(self) -> u8 {
        match self {
            BusKind::Slack => 0,
            BusKind::Pv => 1,
            BusKind::Load => 2,
        }
    }
}

/// A series branch in the pi model: series admittance `g + jb` and total
/// line-charging susceptance `shunt_b`, split evenly between both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
    #[serde(default)]
    pub shunt_b: f64,
}

/// Fixed shunt admittance at a bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusShunt {
    pub bus: usize,
    #[serde(default)]
    pub g: f64,
    #[serde(default)]
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackVoltage {
    pub mag: f64,
    /// Degrees.
    pub ang: f64,
}

/// On-disk case description. Either `y_real`/`y_imag` or `branches` must be
/// present; when both are given the explicit matrices win.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n_bus: usize,
    pub kinds: Vec<BusKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    pub slack_voltage: SlackVoltage,
    pub p_gen: Vec<f64>,
    pub p_dem: Vec<f64>,
    pub q_dem: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_gen: Option<Vec<f64>>,
    /// Voltage magnitude setpoints; only PV entries are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_set: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_real: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_imag: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branches: Option<Vec<Branch>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bus_shunts: Option<Vec<BusShunt>>,
}

/// Static description of a power system.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    name: String,
    labels: Vec<usize>,
    kinds: Vec<BusKind>,
    g: DMatrix<f64>,
    b: DMatrix<f64>,
    p_gen: Vec<f64>,
    p_dem: Vec<f64>,
    q_gen: Vec<f64>,
    q_dem: Vec<f64>,
    v_set: Vec<f64>,
    slack_voltage: SlackVoltage,
}

/// Loads a builtin case (`"case4"`, `"case14"`) or a case file from disk.
pub fn load_case(source: &str) -> Result<Grid> {
    let text = match source {
        "case4" => CASE4_JSON.to_owned(),
        "case14" => CASE14_JSON.to_owned(),
        path if Path::new(path).is_file() => {
            std::fs::read_to_string(path).map_err(|source| GridError::Io {
                path: PathBuf::from(path),
                source,
            })?
        }
        other => return Err(GridError::UnknownCase(other.to_owned())),
    };
    let file: CaseFile =
        serde_json::from_str(&text).map_err(|e| GridError::Malformed(e.to_string()))?;
    let mut grid = Grid::from_case_file(file)?;
    if grid.name.is_empty() {
        grid.name = source.to_owned();
    }
    Ok(grid)
}

/// Assembles the bus admittance matrix `Y = G + jB` from pi-model branches.
///
/// `Y_ii` collects every incident series admittance plus half the line
/// charging of each incident branch and any bus shunt; `Y_ik = -y_ik`.
pub fn build_ybus(
    n_bus: usize,
    branches: &[Branch],
    shunts: &[BusShunt],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if branches.is_empty() {
        return Err(GridError::NoBranches);
    }
    let mut g = DMatrix::zeros(n_bus, n_bus);
    let mut b = DMatrix::zeros(n_bus, n_bus);
    for br in branches {
        for index in [br.from, br.to] {
            if index >= n_bus {
                return Err(GridError::BusIndex { index, n_bus });
            }
        }
        if br.from == br.to {
            return Err(GridError::SelfLoop(br.from));
        }
        let (f, t) = (br.from, br.to);
        g[(f, f)] += br.g;
        g[(t, t)] += br.g;
        g[(f, t)] -= br.g;
        g[(t, f)] -= br.g;
        b[(f, f)] += br.b + br.shunt_b / 2.0;
        b[(t, t)] += br.b + br.shunt_b / 2.0;
        b[(f, t)] -= br.b;
        b[(t, f)] -= br.b;
    }
    for sh in shunts {
        if sh.bus >= n_bus {
            return Err(GridError::BusIndex {
                index: sh.bus,
                n_bus,
            });
        }
        g[(sh.bus, sh.bus)] += sh.g;
        b[(sh.bus, sh.bus)] += sh.b;
    }
    Ok((g, b))
}

fn check_len(field: &'static str, len: usize, n: usize) -> Result<()> {
    if len != n {
        return Err(GridError::Dimension {
            field,
            expected: n,
            found: len,
        });
    }
    Ok(())
}

fn square_matrix(field: &'static str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    check_len(field, rows.len(), n)?;
    for row in rows {
        check_len(field, row.len(), n)?;
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl Grid {
    pub fn from_case_file(file: CaseFile) -> Result<Grid> {
        let n = file.n_bus;
        check_len("kinds", file.kinds.len(), n)?;
        check_len("p_gen", file.p_gen.len(), n)?;
        check_len("p_dem", file.p_dem.len(), n)?;
        check_len("q_dem", file.q_dem.len(), n)?;
        let q_gen = file.q_gen.unwrap_or_else(|| vec![0.0; n]);
        check_len("q_gen", q_gen.len(), n)?;
        let labels = file.labels.unwrap_or_else(|| (1..=n).collect());
        check_len("labels", labels.len(), n)?;

        let slacks = file.kinds.iter().filter(|k| **k == BusKind::Slack).count();
        if slacks != 1 {
            return Err(GridError::SlackCount(slacks));
        }
        if let Some(i) = (1..n).find(|&i| file.kinds[i].rank() < file.kinds[i - 1].rank()) {
            return Err(GridError::BusOrder(i));
        }
        if file.kinds[0] != BusKind::Slack {
            return Err(GridError::BusOrder(0));
        }

        let mut v_set = file.v_set.unwrap_or_else(|| vec![1.0; n]);
        check_len("v_set", v_set.len(), n)?;
        v_set[0] = file.slack_voltage.mag;
        if v_set.iter().any(|v| !(*v > 0.0)) {
            return Err(GridError::Malformed(
                "voltage setpoints must be positive".into(),
            ));
        }

        let (g, b) = match (&file.y_real, &file.y_imag, &file.branches) {
            (Some(re), Some(im), _) => (
                square_matrix("y_real", re, n)?,
                square_matrix("y_imag", im, n)?,
            ),
            (None, None, Some(branches)) => {
                build_ybus(n, branches, file.bus_shunts.as_deref().unwrap_or(&[]))?
            }
            _ => {
                return Err(GridError::Malformed(
                    "case needs both y_real and y_imag, or branches".into(),
                ))
            }
        };

        Ok(Grid {
            name: file.name.unwrap_or_default(),
            labels,
            kinds: file.kinds,
            g,
            b,
            p_gen: file.p_gen,
            p_dem: file.p_dem,
            q_gen,
            q_dem: file.q_dem,
            v_set,
            slack_voltage: file.slack_voltage,
        })
    }

    /// Serializable form carrying the explicit admittance matrix.
    pub fn to_case_file(&self) -> CaseFile {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        CaseFile {
            name: Some(self.name.clone()),
            n_bus: self.n_bus(),
            kinds: self.kinds.clone(),
            labels: Some(self.labels.clone()),
            slack_voltage: self.slack_voltage,
            p_gen: self.p_gen.clone(),
            p_dem: self.p_dem.clone(),
            q_dem: self.q_dem.clone(),
            q_gen: Some(self.q_gen.clone()),
            v_set: Some(self.v_set.clone()),
            y_real: Some(rows(&self.g)),
            y_imag: Some(rows(&self.b)),
            branches: None,
            bus_shunts: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_bus(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[BusKind] {
        &self.kinds
    }

    /// External bus numbers, in internal order.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn p_gen(&self) -> &[f64] {
        &self.p_gen
    }

    pub fn p_dem(&self) -> &[f64] {
        &self.p_dem
    }

    pub fn q_gen(&self) -> &[f64] {
        &self.q_gen
    }

    pub fn q_dem(&self) -> &[f64] {
        &self.q_dem
    }

    pub fn v_set(&self) -> &[f64] {
        &self.v_set
    }

    pub fn slack_voltage(&self) -> SlackVoltage {
        self.slack_voltage
    }

    pub fn buses_of(&self, kind: BusKind) -> Vec<usize> {
        (0..self.n_bus())
            .filter(|&i| self.kinds[i] == kind)
            .collect()
    }

    pub fn load_buses(&self) -> Vec<usize> {
        self.buses_of(BusKind::Load)
    }

    pub fn pv_buses(&self) -> Vec<usize> {
        self.buses_of(BusKind::Pv)
    }

    /// Buses carrying an active-power balance (PV and load).
    pub fn p_buses(&self) -> Vec<usize> {
        (0..self.n_bus())
            .filter(|&i| self.kinds[i] != BusKind::Slack)
            .collect()
    }

    /// Slack at its fixed voltage, PV buses at `v_set∠0`, load buses at `1∠0`.
    pub fn flat_start(&self) -> VoltageProfile {
        let vm = (0..self.n_bus())
            .map(|i| match self.kinds[i] {
                BusKind::Load => 1.0,
                _ => self.v_set[i],
            })
            .collect();
        let mut va = vec![0.0; self.n_bus()];
        va[0] = self.slack_voltage.ang;
        VoltageProfile { vm, va_deg: va }
    }
}

/// Per-bus voltage magnitude (p.u.) and angle (degrees).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageProfile {
    #[serde(rename = "v")]
    pub vm: Vec<f64>,
    #[serde(rename = "theta")]
    pub va_deg: Vec<f64>,
}

impl VoltageProfile {
    pub fn new(vm: Vec<f64>, va_deg: Vec<f64>) -> Result<Self> {
        check_len("theta", va_deg.len(), vm.len())?;
        Ok(VoltageProfile { vm, va_deg })
    }

    pub fn from_rect(mu: &[f64], omega: &[f64]) -> Result<Self> {
        check_len("omega", omega.len(), mu.len())?;
        let (vm, va_deg) = mu
            .iter()
            .zip(omega)
            .map(|(&m, &w)| rect_to_polar(m, w))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(VoltageProfile { vm, va_deg })
    }

    pub fn len(&self) -> usize {
        self.vm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vm.is_empty()
    }

    /// Rectangular components `(μ, ω)`.
    pub fn rect(&self) -> (Vec<f64>, Vec<f64>) {
        self.vm
            .iter()
            .zip(&self.va_deg)
            .map(|(&v, &t)| polar_to_rect(v, t))
            .unzip()
    }

    pub fn check_dims(&self, grid: &Grid) -> Result<()> {
        check_len("v", self.vm.len(), grid.n_bus())?;
        check_len("theta", self.va_deg.len(), grid.n_bus())
    }
}

/// `(V, θ°) → (V cos θ, V sin θ)`.
pub fn polar_to_rect(v: f64, theta_deg: f64) -> (f64, f64) {
    let (s, c) = theta_deg.to_radians().sin_cos();
    (v * c, v * s)
}

/// `(μ, ω) → (|V|, θ°)` with `θ = atan2(ω, μ)`.
pub fn rect_to_polar(mu: f64, omega: f64) -> Result<(f64, f64)> {
    if mu == 0.0 && omega == 0.0 {
        return Err(GridError::DegenerateVoltage);
    }
    Ok((mu.hypot(omega), omega.atan2(mu).to_degrees()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn case4_matches_demand_table() {
        let grid = load_case("case4").unwrap();
        assert_eq!(grid.p_dem(), &[0.0, 1.7, 2.0, 0.8]);
        assert_eq!(grid.q_dem(), &[0.0, 1.05, 1.24, 0.49]);
        assert_eq!(grid.kinds()[0], BusKind::Slack);
        assert_eq!(grid.load_buses(), vec![1, 2, 3]);
        assert_eq!(grid.slack_voltage(), SlackVoltage { mag: 1.0, ang: 0.0 });
    }

    #[test]
    fn case14_generation_and_kinds() {
        let grid = load_case("case14").unwrap();
        assert_eq!(grid.p_gen()[1], 0.4);
        assert_eq!(grid.pv_buses().len(), 4);
        assert_eq!(grid.load_buses().len(), 9);
        assert!(grid.q_gen().iter().all(|q| *q == 0.0));
    }

    #[test]
    fn unknown_case_is_rejected() {
        assert!(matches!(
            load_case("nonexistent"),
            Err(GridError::UnknownCase(_))
        ));
    }

    #[test]
    fn builtin_cases_are_stable() {
        assert_eq!(load_case("case14").unwrap(), load_case("case14").unwrap());
    }

    #[test]
    fn bundled_matrices_are_symmetric() {
        for name in BUILTIN_CASES {
            let grid = load_case(name).unwrap();
            assert_eq!(grid.g(), &grid.g().transpose());
            assert_eq!(grid.b(), &grid.b().transpose());
        }
    }

    #[test]
    fn two_bus_ybus() {
        let br = Branch {
            from: 0,
            to: 1,
            g: 1.0,
            b: -5.0,
            shunt_b: 0.0,
        };
        let (g, b) = build_ybus(2, &[br], &[]).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[-5.0, 5.0, 5.0, -5.0]));
    }

    #[test]
    fn ybus_errors() {
        assert!(matches!(
            build_ybus(2, &[], &[]),
            Err(GridError::NoBranches)
        ));
        let self_loop = Branch {
            from: 1,
            to: 1,
            g: 1.0,
            b: -1.0,
            shunt_b: 0.0,
        };
        assert!(matches!(
            build_ybus(2, &[self_loop], &[]),
            Err(GridError::SelfLoop(1))
        ));
        let far = Branch { to: 7, ..self_loop };
        assert!(matches!(
            build_ybus(2, &[far], &[]),
            Err(GridError::BusIndex { index: 7, .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut file = load_case("case4").unwrap().to_case_file();
        file.p_dem.pop();
        assert!(matches!(
            Grid::from_case_file(file),
            Err(GridError::Dimension { field: "p_dem", .. })
        ));
    }

    #[test]
    fn bus_order_and_slack_count() {
        let mut file = load_case("case4").unwrap().to_case_file();
        file.kinds = vec![BusKind::Slack, BusKind::Load, BusKind::Pv, BusKind::Load];
        assert!(matches!(
            Grid::from_case_file(file.clone()),
            Err(GridError::BusOrder(2))
        ));
        file.kinds = vec![BusKind::Slack, BusKind::Slack, BusKind::Load, BusKind::Load];
        assert!(matches!(
            Grid::from_case_file(file),
            Err(GridError::SlackCount(2))
        ));
    }

    #[test]
    fn conversions() {
        assert_eq!(polar_to_rect(1.0, 0.0), (1.0, 0.0));
        let (m, w) = polar_to_rect(2.0, 90.0);
        assert!(m.abs() < 1e-15 && (w - 2.0).abs() < 1e-15);
        // cos(-30°) = √3/2, sin(-30°) = -1/2
        let (m, w) = polar_to_rect(0.95, -30.0);
        assert!((m - 0.95 * 3f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((w + 0.475).abs() < 1e-15);
        assert!((m - 0.8227).abs() < 1e-4);
        assert_eq!(rect_to_polar(1.0, 0.0).unwrap(), (1.0, 0.0));
        assert_eq!(rect_to_polar(0.0, 2.0).unwrap(), (2.0, 90.0));
        assert!(matches!(
            rect_to_polar(0.0, 0.0),
            Err(GridError::DegenerateVoltage)
        ));
    }

    proptest! {
        #[test]
        fn polar_round_trip(v in 1e-6f64..=2.0, theta in -179.999f64..=180.0) {
            let (m, w) = polar_to_rect(v, theta);
            let (v2, t2) = rect_to_polar(m, w).unwrap();
            prop_assert!((v - v2).abs() < 1e-10);
            prop_assert!((theta - t2).abs() < 1e-10);
        }

        #[test]
        fn symmetric_branches_give_symmetric_ybus(
            raw in proptest::collection::vec((0usize..5, 0usize..5, -10.0f64..10.0, -50.0f64..0.0, 0.0f64..0.2), 1..12)
        ) {
            let branches: Vec<Branch> = raw
                .into_iter()
                .filter(|(f, t, ..)| f != t)
                .map(|(from, to, g, b, shunt_b)| Branch { from, to, g, b, shunt_b })
                .collect();
            prop_assume!(!branches.is_empty());
            let (g, b) = build_ybus(5, &branches, &[]).unwrap();
            prop_assert_eq!(&g, &g.transpose());
            prop_assert_eq!(&b, &b.transpose());
        }
    }
}

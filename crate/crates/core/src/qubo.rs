//! Power-balance Hamiltonian over binary voltage increments.
//!
//! Each load bus `i` gets four binary variables that move its rectangular
//! voltage by `±Δμ_i` and `±Δω_i`:
//!
//! ```text
//! μ_i = μ_i⁰ + Δμ_i (x[4j]   - x[4j+1])
//! ω_i = ω_i⁰ + Δω_i (x[4j+2] - x[4j+3])
//! ```
//!
//! where `j` is the position of `i` among the load buses. Substituting into
//! the rectangular injections and squaring the load-bus balances gives a
//! quartic pseudo-Boolean polynomial, which [`quadratize`] reduces to a QUBO
//! by pairwise substitution with penalised auxiliary variables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{polar_to_rect, rect_to_polar, Grid, GridError, VoltageProfile};

/// Expanded coefficients with smaller magnitude are discarded.
pub const COEFF_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum QuboError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("increment spec does not fit the grid: {0}")]
    SpecMismatch(String),
    #[error("polynomial has degree {0}; at most 4 is supported")]
    DegreeTooHigh(usize),
    #[error("bitstring has length {found}, expected {expected}")]
    Length { expected: usize, found: usize },
    #[error("invalid QUBO: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, QuboError>;

/// Anything that assigns an energy to a bitstring.
pub trait BinaryObjective {
    fn n_vars(&self) -> usize;

    /// Bits are `0`/`1`; any nonzero byte counts as `1`.
    fn energy(&self, x: &[u8]) -> Result<f64>;
}

type Monomial = Vec<usize>;

/// Sparse multilinear polynomial; keys are strictly increasing index lists.
#[derive(Debug, Clone, Default, PartialEq)]
struct Poly(BTreeMap<Monomial, f64>);

impl Poly {
    fn constant(c: f64) -> Self {
        let mut p = Poly::default();
        p.add_term(Vec::new(), c);
        p
    }

    fn add_term(&mut self, key: Monomial, c: f64) {
        if c != 0.0 {
            *self.0.entry(key).or_insert(0.0) += c;
        }
    }

    fn add_scaled(&mut self, other: &Poly, s: f64) {
        for (k, c) in &other.0 {
            self.add_term(k.clone(), c * s);
        }
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::default();
        for (ka, ca) in &self.0 {
            for (kb, cb) in &other.0 {
                out.add_term(merge_sorted(ka, kb), ca * cb);
            }
        }
        out
    }
}

/// Union of two sorted index lists (`x·x = x`).
fn merge_sorted(a: &[usize], b: &[usize]) -> Monomial {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(_), Some(&y)) => {
                j += 1;
                y
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        out.push(next);
    }
    out
}

/// A pseudo-Boolean polynomial of degree at most four.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyProblem {
    terms: BTreeMap<Monomial, f64>,
    var_names: Vec<String>,
}

impl PolyProblem {
    /// Builds a polynomial from raw terms. Repeated indices inside a term
    /// collapse (`x² = x`) and equal monomials are summed.
    pub fn from_terms<I>(n_vars: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<usize>, f64)>,
    {
        let mut poly = Poly::default();
        for (mut key, c) in terms {
            key.sort_unstable();
            key.dedup();
            if let Some(&bad) = key.iter().find(|&&i| i >= n_vars) {
                return Err(QuboError::Invalid(format!(
                    "variable {bad} out of range for {n_vars} variables"
                )));
            }
            poly.add_term(key, c);
        }
        let terms: BTreeMap<_, _> = poly.0.into_iter().filter(|(_, c)| *c != 0.0).collect();
        if let Some(d) = terms.keys().map(Vec::len).max().filter(|&d| d > 4) {
            return Err(QuboError::DegreeTooHigh(d));
        }
        Ok(PolyProblem {
            terms,
            var_names: (0..n_vars).map(|i| format!("x{i}")).collect(),
        })
    }

    pub fn terms(&self) -> &BTreeMap<Vec<usize>, f64> {
        &self.terms
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(Vec::len).max().unwrap_or(0)
    }

    pub fn constant(&self) -> f64 {
        self.terms.get(&Vec::new()).copied().unwrap_or(0.0)
    }

    /// Largest non-constant coefficient magnitude.
    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms
            .iter()
            .filter(|(k, _)| !k.is_empty())
            .fold(0.0, |m, (_, c)| m.max(c.abs()))
    }
}

impl BinaryObjective for PolyProblem {
    fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    fn energy(&self, x: &[u8]) -> Result<f64> {
        check_len(self.n_vars(), x.len())?;
        Ok(self
            .terms
            .iter()
            .filter(|(k, _)| k.iter().all(|&i| x[i] != 0))
            .map(|(_, c)| c)
            .sum())
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(QuboError::Length { expected, found });
    }
    Ok(())
}

/// Base point and per-load-bus step sizes of the binary update.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementSpec {
    /// Full-grid voltage profile around which increments are taken.
    pub base: VoltageProfile,
    pub load_buses: Vec<usize>,
    pub step_mu: Vec<f64>,
    pub step_omega: Vec<f64>,
}

impl IncrementSpec {
    pub fn new(
        grid: &Grid,
        base: VoltageProfile,
        step_mu: Vec<f64>,
        step_omega: Vec<f64>,
    ) -> Result<Self> {
        base.check_dims(grid)?;
        let load_buses = grid.load_buses();
        if step_mu.len() != load_buses.len() || step_omega.len() != load_buses.len() {
            return Err(QuboError::SpecMismatch(format!(
                "{} load buses but {} μ steps and {} ω steps",
                load_buses.len(),
                step_mu.len(),
                step_omega.len()
            )));
        }
        if step_mu.iter().chain(&step_omega).any(|s| !s.is_finite()) {
            return Err(QuboError::SpecMismatch("steps must be finite".into()));
        }
        if base.vm.iter().chain(&base.va_deg).any(|s| !s.is_finite()) {
            return Err(QuboError::SpecMismatch(
                "base voltages must be finite".into(),
            ));
        }
        Ok(IncrementSpec {
            base,
            load_buses,
            step_mu,
            step_omega,
        })
    }

    /// Number of binary variables (four per load bus).
    pub fn n_primary(&self) -> usize {
        4 * self.load_buses.len()
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        self.base.check_dims(grid)?;
        if self.load_buses != grid.load_buses() {
            return Err(QuboError::SpecMismatch(
                "load bus set differs from the grid".into(),
            ));
        }
        Ok(())
    }
}

/// Expands `H(x) = Σ_load (ΔP_i² + ΔQ_i²)` over the increment variables.
pub fn build_pf_poly(grid: &Grid, spec: &IncrementSpec) -> Result<PolyProblem> {
    spec.check_grid(grid)?;
    let n = grid.n_bus();
    let (mu0, omega0) = spec.base.rect();

    let mut mu: Vec<Poly> = mu0.iter().map(|&c| Poly::constant(c)).collect();
    let mut omega: Vec<Poly> = omega0.iter().map(|&c| Poly::constant(c)).collect();
    let mut var_names = Vec::with_capacity(spec.n_primary());
    for (j, &bus) in spec.load_buses.iter().enumerate() {
        let base = 4 * j;
        mu[bus].add_term(vec![base], spec.step_mu[j]);
        mu[bus].add_term(vec![base + 1], -spec.step_mu[j]);
        omega[bus].add_term(vec![base + 2], spec.step_omega[j]);
        omega[bus].add_term(vec![base + 3], -spec.step_omega[j]);
        let label = grid.labels()[bus];
        for suffix in ["mu.0", "mu.1", "omega.0", "omega.1"] {
            var_names.push(format!("bus{label}.{suffix}"));
        }
    }

    let (g, b) = (grid.g(), grid.b());
    let mut h = Poly::default();
    for &i in &spec.load_buses {
        // real and imaginary parts of (Y V)_i
        let mut re = Poly::default();
        let mut im = Poly::default();
        for k in 0..n {
            let (gik, bik) = (g[(i, k)], b[(i, k)]);
            if gik == 0.0 && bik == 0.0 {
                continue;
            }
            re.add_scaled(&mu[k], gik);
            re.add_scaled(&omega[k], -bik);
            im.add_scaled(&omega[k], gik);
            im.add_scaled(&mu[k], bik);
        }
        let mut dp = mu[i].mul(&re);
        dp.add_scaled(&omega[i].mul(&im), 1.0);
        dp.add_term(Vec::new(), grid.p_dem()[i] - grid.p_gen()[i]);
        let mut dq = omega[i].mul(&re);
        dq.add_scaled(&mu[i].mul(&im), -1.0);
        dq.add_term(Vec::new(), grid.q_dem()[i] - grid.q_gen()[i]);

        h.add_scaled(&dp.mul(&dp), 1.0);
        h.add_scaled(&dq.mul(&dq), 1.0);
    }

    let terms =
        h.0.into_iter()
            .filter(|(k, c)| k.is_empty() || c.abs() >= COEFF_EPS)
            .collect();
    Ok(PolyProblem { terms, var_names })
}

/// Load-bus voltages after applying the primary bits of `x` to `spec.base`.
pub fn decode(x: &[u8], spec: &IncrementSpec) -> Result<VoltageProfile> {
    let need = spec.n_primary();
    if x.len() < need {
        return Err(QuboError::Length {
            expected: need,
            found: x.len(),
        });
    }
    let bit = |i: usize| f64::from(u8::from(x[i] != 0));
    let mut out = spec.base.clone();
    for (j, &bus) in spec.load_buses.iter().enumerate() {
        let (m0, w0) = polar_to_rect(spec.base.vm[bus], spec.base.va_deg[bus]);
        let m = m0 + spec.step_mu[j] * (bit(4 * j) - bit(4 * j + 1));
        let w = w0 + spec.step_omega[j] * (bit(4 * j + 2) - bit(4 * j + 3));
        let (v, t) = rect_to_polar(m, w)?;
        out.vm[bus] = v;
        out.va_deg[bus] = t;
    }
    Ok(out)
}

/// Auxiliary-variable penalty weight used by [`quadratize`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Penalty {
    /// Per auxiliary variable: `1 + Σ |c|` over the terms it replaces.
    #[default]
    Auto,
    /// One weight for every auxiliary: `1 + Σ |non-constant coefficients|`.
    Uniform,
    Fixed(f64),
}

impl std::str::FromStr for Penalty {
    type Err = String;

    /// `auto`, `uniform`, or a positive number.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Penalty::Auto),
            "uniform" => Ok(Penalty::Uniform),
            _ => match s.parse::<f64>() {
                Ok(m) if m > 0.0 && m.is_finite() => Ok(Penalty::Fixed(m)),
                _ => Err(format!(
                    "penalty `{s}`: expected auto, uniform or a positive number"
                )),
            },
        }
    }
}

/// Quadratic binary objective with bookkeeping for auxiliary variables.
///
/// Variables `0..n_primary` are primary; every index in `aux_map` is an
/// auxiliary standing for the product of its two parents (which may be
/// auxiliaries themselves, always with smaller indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "QuboWire", try_from = "QuboWire")]
pub struct QuboProblem {
    pub linear: Vec<f64>,
    pub quadratic: BTreeMap<(usize, usize), f64>,
    pub offset: f64,
    pub aux_map: BTreeMap<usize, (usize, usize)>,
    pub n_primary: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuboWire {
    offset: f64,
    linear: Vec<f64>,
    quadratic: Vec<(usize, usize, f64)>,
    n_primary: usize,
    #[serde(default)]
    aux_map: Vec<(usize, usize, usize)>,
}

impl From<QuboProblem> for QuboWire {
    fn from(q: QuboProblem) -> Self {
        QuboWire {
            offset: q.offset,
            linear: q.linear,
            quadratic: q
                .quadratic
                .into_iter()
                .map(|((i, j), c)| (i, j, c))
                .collect(),
            n_primary: q.n_primary,
            aux_map: q.aux_map.into_iter().map(|(z, (i, j))| (z, i, j)).collect(),
        }
    }
}

impl TryFrom<QuboWire> for QuboProblem {
    type Error = QuboError;

    fn try_from(w: QuboWire) -> Result<Self> {
        let mut quadratic = BTreeMap::new();
        for (i, j, c) in w.quadratic {
            let key = if i < j { (i, j) } else { (j, i) };
            if i == j {
                return Err(QuboError::Invalid(format!(
                    "diagonal quadratic key ({i}, {j})"
                )));
            }
            *quadratic.entry(key).or_insert(0.0) += c;
        }
        let q = QuboProblem {
            linear: w.linear,
            quadratic,
            offset: w.offset,
            aux_map: w.aux_map.into_iter().map(|(z, i, j)| (z, (i, j))).collect(),
            n_primary: w.n_primary,
        };
        q.validate()?;
        Ok(q)
    }
}

impl QuboProblem {
    pub fn n_aux(&self) -> usize {
        self.aux_map.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_primary + self.aux_map.len();
        if self.linear.len() != n {
            return Err(QuboError::Invalid(format!(
                "{} linear coefficients for {n} variables",
                self.linear.len()
            )));
        }
        if let Some(&(i, j)) = self.quadratic.keys().find(|&&(i, j)| i >= j || j >= n) {
            return Err(QuboError::Invalid(format!("bad quadratic key ({i}, {j})")));
        }
        for (expected, (&z, &(a, b))) in (self.n_primary..).zip(&self.aux_map) {
            if z != expected || a >= z || b >= z {
                return Err(QuboError::Invalid(format!(
                    "bad auxiliary entry {z} -> ({a}, {b})"
                )));
            }
        }
        Ok(())
    }

    /// Largest coefficient magnitude (linear or quadratic).
    pub fn max_abs_coefficient(&self) -> f64 {
        self.linear
            .iter()
            .chain(self.quadratic.values())
            .fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Overwrites the auxiliary bits of `x` with the products they stand for.
    pub fn fill_aux(&self, x: &mut [u8]) {
        for (&z, &(a, b)) in &self.aux_map {
            x[z] = u8::from(x[a] != 0 && x[b] != 0);
        }
    }

    /// Extends a primary assignment with consistent auxiliary bits.
    pub fn extend_primary(&self, primary: &[u8]) -> Result<Vec<u8>> {
        check_len(self.n_primary, primary.len())?;
        let mut x = primary.to_vec();
        x.resize(self.n_vars(), 0);
        self.fill_aux(&mut x);
        Ok(x)
    }
}

impl BinaryObjective for QuboProblem {
    fn n_vars(&self) -> usize {
        self.linear.len()
    }

    fn energy(&self, x: &[u8]) -> Result<f64> {
        check_len(self.n_vars(), x.len())?;
        let mut e = self.offset;
        for (i, c) in self.linear.iter().enumerate() {
            if x[i] != 0 {
                e += c;
            }
        }
        for (&(i, j), c) in &self.quadratic {
            if x[i] != 0 && x[j] != 0 {
                e += c;
            }
        }
        Ok(e)
    }
}

/// Reduces a polynomial of degree ≤ 4 to a QUBO.
///
/// While a term of degree three or more remains, the variable pair shared by
/// the most such terms (lowest pair on ties) is replaced by a fresh variable
/// `z` and `M_z (x_a x_b − 2 x_a z − 2 x_b z + 3 z)` is added. The penalty
/// is zero exactly when `z = x_a x_b` and at least `M_z` otherwise.
///
/// Setting `z` wrong moves the replaced terms by at most the sum of their
/// magnitudes, so the [`Penalty::Auto`] weight keeps each substitution exact.
pub fn quadratize(p: &PolyProblem, penalty: Penalty) -> Result<QuboProblem> {
    if p.degree() > 4 {
        return Err(QuboError::DegreeTooHigh(p.degree()));
    }
    let uniform = match penalty {
        Penalty::Auto => None,
        Penalty::Uniform => Some(
            1.0 + p
                .terms
                .iter()
                .filter(|(k, _)| !k.is_empty())
                .map(|(_, c)| c.abs())
                .sum::<f64>(),
        ),
        Penalty::Fixed(m) if m > 0.0 && m.is_finite() => Some(m),
        Penalty::Fixed(m) => {
            return Err(QuboError::Invalid(format!("penalty {m} must be positive")))
        }
    };

    let n_primary = p.n_vars();
    let mut terms = p.terms.clone();
    let mut aux_map = BTreeMap::new();
    let mut weights = Vec::new();
    let mut next = n_primary;
    loop {
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for key in terms.keys().filter(|k| k.len() > 2) {
            for (ai, &a) in key.iter().enumerate() {
                for &b in &key[ai + 1..] {
                    *counts.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
        // first maximum in key order is the lowest pair
        let Some((&(a, b), _)) = counts.iter().fold(
            None,
            |best: Option<(&(usize, usize), &usize)>, cur| match best {
                Some(bst) if bst.1 >= cur.1 => Some(bst),
                _ => Some(cur),
            },
        ) else {
            break;
        };
        let z = next;
        next += 1;
        aux_map.insert(z, (a, b));
        let mut replaced = 0.0;
        let mut rewritten = BTreeMap::new();
        for (key, c) in terms {
            let new_key = if key.len() > 2 && key.contains(&a) && key.contains(&b) {
                replaced += c.abs();
                let mut k: Vec<usize> = key.into_iter().filter(|&v| v != a && v != b).collect();
                k.push(z);
                k
            } else {
                key
            };
            *rewritten.entry(new_key).or_insert(0.0) += c;
        }
        terms = rewritten;
        weights.push(uniform.unwrap_or(1.0 + replaced));
    }

    let n = next;
    let mut q = QuboProblem {
        linear: vec![0.0; n],
        quadratic: BTreeMap::new(),
        offset: 0.0,
        aux_map,
        n_primary,
    };
    let add = |q: &mut QuboProblem, key: &[usize], c: f64| match *key {
        [] => q.offset += c,
        [i] => q.linear[i] += c,
        [i, j] => *q.quadratic.entry((i.min(j), i.max(j))).or_insert(0.0) += c,
        _ => unreachable!("degree reduced to two"),
    };
    for (key, c) in &terms {
        add(&mut q, key, *c);
    }
    let aux: Vec<(usize, (usize, usize))> = q.aux_map.iter().map(|(&z, &ab)| (z, ab)).collect();
    for ((z, (a, b)), weight) in aux.into_iter().zip(weights) {
        add(&mut q, &[a, b], weight);
        add(&mut q, &[a, z], -2.0 * weight);
        add(&mut q, &[b, z], -2.0 * weight);
        add(&mut q, &[z], 3.0 * weight);
    }
    q.quadratic.retain(|_, c| *c != 0.0);
    Ok(q)
}

/// Builds and quadratizes the Hamiltonian for one environment update.
pub fn build_pf_qubo(grid: &Grid, spec: &IncrementSpec) -> Result<(PolyProblem, QuboProblem)> {
    let poly = build_pf_poly(grid, spec)?;
    let qubo = quadratize(&poly, Penalty::Auto)?;
    Ok((poly, qubo))
}

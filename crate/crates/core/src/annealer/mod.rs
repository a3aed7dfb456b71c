//! Ising-machine stand-ins: exhaustive search, simulated annealing and a
//! remote sampler speaking line-delimited JSON.

mod brute;
pub mod remote;
mod sa;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qubo::{QuboError, QuboProblem};

pub use brute::{brute_force, brute_force_top, MAX_BRUTE_FORCE_VARS};
pub use remote::RemoteConfig;
pub use sa::{simulated_anneal, AnnealSchedule};

/// Reads requested when the caller does not say otherwise.
pub const DEFAULT_N_READ: usize = 100;

/// Energies closer than this are treated as ties when ordering samples.
pub const ENERGY_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AnnealError {
    #[error("{n_primary} primary variables exceed the brute-force limit of {max}")]
    TooManyVariables { n_primary: usize, max: usize },
    #[error("invalid anneal schedule: {0}")]
    InvalidSchedule(String),
    #[error("n_read must be at least 1")]
    NoReads,
    #[error(transparent)]
    Qubo(#[from] QuboError),
    #[error("backend `{backend_id}`: {message}")]
    Remote { backend_id: String, message: String },
}

pub type Result<T> = std::result::Result<T, AnnealError>;

/// One distinct bitstring with its energy and how often it was read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(Vec<u8>, f64, usize)", into = "(Vec<u8>, f64, usize)")]
pub struct Sample {
    pub bits: Vec<u8>,
    pub energy: f64,
    pub count: usize,
}

impl From<(Vec<u8>, f64, usize)> for Sample {
    fn from((bits, energy, count): (Vec<u8>, f64, usize)) -> Self {
        Sample {
            bits,
            energy,
            count,
        }
    }
}

impl From<Sample> for (Vec<u8>, f64, usize) {
    fn from(s: Sample) -> Self {
        (s.bits, s.energy, s.count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    /// Ascending energy; near-ties ordered lexicographically by bits.
    pub samples: Vec<Sample>,
    pub n_read: usize,
    pub backend_id: String,
    /// Seconds.
    pub wall_time: f64,
}

impl SampleSet {
    /// Merges raw reads into distinct samples and orders them.
    pub fn from_reads(reads: Vec<(Vec<u8>, f64)>, backend_id: &str, wall_time: f64) -> Self {
        let n_read = reads.len();
        let mut merged: BTreeMap<Vec<u8>, (f64, usize)> = BTreeMap::new();
        for (bits, e) in reads {
            merged.entry(bits).or_insert((e, 0)).1 += 1;
        }
        let mut samples: Vec<Sample> = merged
            .into_iter()
            .map(|(bits, (energy, count))| Sample {
                bits,
                energy,
                count,
            })
            .collect();
        order_samples(&mut samples);
        SampleSet {
            samples,
            n_read,
            backend_id: backend_id.to_owned(),
            wall_time,
        }
    }

    pub fn best(&self) -> Option<&Sample> {
        self.samples.first()
    }

    pub fn best_energy(&self) -> Option<f64> {
        self.best().map(|s| s.energy)
    }
}

/// Sorts by energy, then lexicographically by bitstring within runs of
/// energies that agree to [`ENERGY_TIE_TOL`].
pub(crate) fn order_samples(samples: &mut [Sample]) {
    samples.sort_by(|a, b| {
        a.energy
            .total_cmp(&b.energy)
            .then_with(|| a.bits.cmp(&b.bits))
    });
    let mut start = 0;
    while start < samples.len() {
        let head = samples[start].energy;
        let end = samples[start..]
            .iter()
            .position(|s| s.energy - head > ENERGY_TIE_TOL)
            .map_or(samples.len(), |p| start + p);
        samples[start..end].sort_by(|a, b| a.bits.cmp(&b.bits));
        start = end;
    }
}

pub(crate) fn cmp_energy_bits(a: (f64, &[u8]), b: (f64, &[u8])) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

/// Where QUBOs get solved.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    BruteForce,
    /// Simulated annealing with the default schedule for each problem;
    /// `sweeps` overrides the sweep count.
    SimAnneal {
        seed: u64,
        sweeps: Option<usize>,
    },
    Remote(RemoteConfig),
}

impl Backend {
    pub fn id(&self) -> String {
        match self {
            Backend::BruteForce => "brute-force".into(),
            Backend::SimAnneal { .. } => "sim-anneal".into(),
            Backend::Remote(cfg) => format!("remote:{}", cfg.addr),
        }
    }

    /// Same backend with a different annealing seed (no-op for the others).
    pub fn with_seed(&self, seed: u64) -> Backend {
        match self {
            Backend::SimAnneal { sweeps, .. } => Backend::SimAnneal {
                seed,
                sweeps: *sweeps,
            },
            other => other.clone(),
        }
    }

    pub fn sample(&self, q: &QuboProblem, n_read: usize) -> Result<SampleSet> {
        if n_read == 0 {
            return Err(AnnealError::NoReads);
        }
        match self {
            Backend::BruteForce => {
                let mut set = brute_force_top(q, n_read)?;
                set.backend_id = self.id();
                Ok(set)
            }
            Backend::SimAnneal { seed, sweeps } => {
                let mut sched = AnnealSchedule::default_for(q, *seed);
                if let Some(s) = sweeps {
                    sched.sweeps = *s;
                }
                simulated_anneal(q, n_read, &sched)
            }
            Backend::Remote(cfg) => remote::sample_remote(cfg, q, n_read),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Backend {
    type Err = String;

    /// `brute`, `brute-force`, `sa`, `sim-anneal`, or `remote:HOST:PORT`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "brute" | "brute-force" | "bruteforce" => Ok(Backend::BruteForce),
            "sa" | "sim-anneal" | "simanneal" => Ok(Backend::SimAnneal {
                seed: 0,
                sweeps: None,
            }),
            _ => match s.strip_prefix("remote:") {
                Some(addr) if !addr.is_empty() => Ok(Backend::Remote(RemoteConfig {
                    addr: addr.to_owned(),
                    timeout: Duration::from_secs(30),
                })),
                _ => Err(format!(
                    "unknown backend `{s}` (expected brute, sa, or remote:HOST:PORT)"
                )),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qubo::BinaryObjective;

    fn two_var() -> QuboProblem {
        QuboProblem {
            linear: vec![-1.0, -1.0],
            quadratic: [((0, 1), 2.0)].into_iter().collect(),
            offset: 0.0,
            aux_map: BTreeMap::new(),
            n_primary: 2,
        }
    }

    #[test]
    fn samples_are_ordered_with_lexicographic_ties() {
        let set = SampleSet::from_reads(
            vec![
                (vec![1, 0], -1.0),
                (vec![0, 1], -1.0 + 1e-12),
                (vec![1, 1], 0.0),
                (vec![1, 0], -1.0),
            ],
            "t",
            0.0,
        );
        assert_eq!(set.n_read, 4);
        let bits: Vec<_> = set.samples.iter().map(|s| s.bits.clone()).collect();
        assert_eq!(bits, vec![vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert_eq!(set.samples.iter().map(|s| s.count).sum::<usize>(), 4);
    }

    #[test]
    fn dispatch_identities() {
        let q = two_var();
        let direct = brute_force(&q).unwrap();
        let via = Backend::BruteForce.sample(&q, 7).unwrap();
        assert_eq!(via.n_read, 7);
        assert_eq!(via.best().unwrap().bits, direct.best().unwrap().bits);
        assert_eq!(via.best_energy(), direct.best_energy());
        assert_eq!(via.samples.iter().map(|s| s.count).sum::<usize>(), 7);

        let sa = Backend::SimAnneal {
            seed: 5,
            sweeps: None,
        }
        .sample(&q, 10)
        .unwrap();
        let sched = AnnealSchedule::default_for(&q, 5);
        let direct = simulated_anneal(&q, 10, &sched).unwrap();
        assert_eq!(sa.samples, direct.samples);
        assert!(matches!(
            Backend::BruteForce.sample(&q, 0),
            Err(AnnealError::NoReads)
        ));
    }

    #[test]
    fn backend_parsing() {
        assert_eq!("brute".parse::<Backend>().unwrap(), Backend::BruteForce);
        assert!(matches!(
            "sa".parse::<Backend>().unwrap(),
            Backend::SimAnneal { .. }
        ));
        match "remote:127.0.0.1:9000".parse::<Backend>().unwrap() {
            Backend::Remote(cfg) => assert_eq!(cfg.addr, "127.0.0.1:9000"),
            other => panic!("{other:?}"),
        }
        assert!("quantum".parse::<Backend>().is_err());
        assert!("remote:".parse::<Backend>().is_err());
    }

    #[test]
    fn sample_wire_shape() {
        let s = Sample {
            bits: vec![1, 0],
            energy: -1.0,
            count: 3,
        };
        assert_eq!(serde_json::to_string(&s).unwrap(), "[[1,0],-1.0,3]");
        let q = two_var();
        assert_eq!(q.energy(&s.bits).unwrap(), s.energy);
    }
}

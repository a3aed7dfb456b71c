use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnnealError, Result, SampleSet};
use crate::qubo::{BinaryObjective, QuboProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub sweeps: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Read `i` is seeded with `seed + i`.
    pub seed: u64,
}

impl AnnealSchedule {
    /// 1000 sweeps from the largest coefficient magnitude down to `1e-3`.
    pub fn default_for(q: &QuboProblem, seed: u64) -> Self {
        let t_end = 1e-3;
        let t_start = q.max_abs_coefficient().max(t_end);
        AnnealSchedule {
            sweeps: 1000,
            t_start,
            t_end,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 {
            return Err(AnnealError::InvalidSchedule("sweeps must be >= 1".into()));
        }
        if !(self.t_end > 0.0 && self.t_start >= self.t_end && self.t_start.is_finite()) {
            return Err(AnnealError::InvalidSchedule(format!(
                "need t_start >= t_end > 0, got {} and {}",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    fn temperature(&self, sweep: usize) -> f64 {
        if self.sweeps == 1 {
            return self.t_start;
        }
        let frac = sweep as f64 / (self.sweeps - 1) as f64;
        self.t_start * (self.t_end / self.t_start).powf(frac)
    }
}

/// Adjacency lists of the quadratic couplings.
struct Couplings {
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl Couplings {
    fn new(q: &QuboProblem) -> Self {
        let mut neighbors = vec![Vec::new(); q.n_vars()];
        for (&(i, j), &c) in &q.quadratic {
            neighbors[i].push((j, c));
            neighbors[j].push((i, c));
        }
        Couplings { neighbors }
    }
}

pub(super) fn random_start(rng: &mut impl Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

fn anneal_once(
    q: &QuboProblem,
    couplings: &Couplings,
    sched: &AnnealSchedule,
    read: usize,
) -> Vec<u8> {
    let n = q.n_vars();
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed.wrapping_add(read as u64));
    let mut x = random_start(&mut rng, n);
    // field[i] = linear_i + Σ_j Q_ij x_j
    let mut field: Vec<f64> = (0..n)
        .map(|i| {
            q.linear[i]
                + couplings.neighbors[i]
                    .iter()
                    .filter(|(j, _)| x[*j] != 0)
                    .map(|(_, c)| c)
                    .sum::<f64>()
        })
        .collect();
    for sweep in 0..sched.sweeps {
        let t = sched.temperature(sweep);
        for i in 0..n {
            let delta = if x[i] == 0 { field[i] } else { -field[i] };
            let accept = delta <= 0.0 || rng.random::<f64>() < (-delta / t).exp();
            if accept {
                let sign = if x[i] == 0 { 1.0 } else { -1.0 };
                x[i] ^= 1;
                for &(j, c) in &couplings.neighbors[i] {
                    field[j] += sign * c;
                }
            }
        }
    }
    x
}

/// `n_read` independent single-flip Metropolis runs with geometric cooling.
/// Reads run in parallel; the result equals the sequential one.
pub fn simulated_anneal(
    q: &QuboProblem,
    n_read: usize,
    sched: &AnnealSchedule,
) -> Result<SampleSet> {
    if n_read == 0 {
        return Err(AnnealError::NoReads);
    }
    sched.validate()?;
    q.validate()?;
    let start = Instant::now();
    let couplings = Couplings::new(q);
    let reads = (0..n_read)
        .into_par_iter()
        .map(|r| {
            let x = anneal_once(q, &couplings, sched, r);
            let e = q.energy(&x)?;
            Ok((x, e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet::from_reads(
        reads,
        "sim-anneal",
        start.elapsed().as_secs_f64(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annealer::brute_force;
    use std::collections::BTreeMap;

    fn random_qubo(n: usize, seed: u64) -> QuboProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut quadratic = BTreeMap::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.5 {
                    quadratic.insert((i, j), rng.random_range(-1.0..1.0));
                }
            }
        }
        QuboProblem {
            linear: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            quadratic,
            offset: 0.0,
            aux_map: BTreeMap::new(),
            n_primary: n,
        }
    }

    #[test]
    fn zero_temperature_single_sweep_descends() {
        let q = random_qubo(14, 1);
        let sched = AnnealSchedule {
            sweeps: 1,
            t_start: 1e-300,
            t_end: 1e-300,
            seed: 42,
        };
        let set = simulated_anneal(&q, 1, &sched).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = random_start(&mut rng, 14);
        assert!(set.best_energy().unwrap() <= q.energy(&x0).unwrap());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let q = random_qubo(12, 2);
        let sched = AnnealSchedule::default_for(&q, 7);
        let a = simulated_anneal(&q, 20, &sched).unwrap();
        let b = simulated_anneal(&q, 20, &sched).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples.iter().map(|s| s.count).sum::<usize>(), 20);
    }

    #[test]
    fn parallel_reads_match_sequential() {
        let q = random_qubo(10, 3);
        let sched = AnnealSchedule {
            sweeps: 50,
            ..AnnealSchedule::default_for(&q, 11)
        };
        let set = simulated_anneal(&q, 8, &sched).unwrap();
        let couplings = Couplings::new(&q);
        let seq: Vec<_> = (0..8)
            .map(|r| {
                let x = anneal_once(&q, &couplings, &sched, r);
                let e = q.energy(&x).unwrap();
                (x, e)
            })
            .collect();
        assert_eq!(
            set.samples,
            SampleSet::from_reads(seq, "sim-anneal", 0.0).samples
        );
    }

    #[test]
    fn stored_energies_are_recomputable() {
        let q = random_qubo(16, 4);
        let set = simulated_anneal(&q, 30, &AnnealSchedule::default_for(&q, 0)).unwrap();
        for s in &set.samples {
            assert!((q.energy(&s.bits).unwrap() - s.energy).abs() < 1e-9);
        }
    }

    #[test]
    fn never_beats_the_oracle() {
        for seed in 0..10 {
            let q = random_qubo(16, 100 + seed);
            let exact = brute_force(&q).unwrap().best_energy().unwrap();
            let sa = simulated_anneal(&q, 20, &AnnealSchedule::default_for(&q, seed))
                .unwrap()
                .best_energy()
                .unwrap();
            assert!(sa >= exact - 1e-12);
        }
    }

    #[test]
    fn more_sweeps_do_not_hurt_median() {
        let q = random_qubo(20, 5);
        let median = |sweeps: usize| {
            let mut best: Vec<f64> = (0..50)
                .map(|seed| {
                    let sched = AnnealSchedule {
                        sweeps,
                        ..AnnealSchedule::default_for(&q, seed * 1000)
                    };
                    simulated_anneal(&q, 1, &sched)
                        .unwrap()
                        .best_energy()
                        .unwrap()
                })
                .collect();
            best.sort_by(f64::total_cmp);
            (best[24] + best[25]) / 2.0
        };
        assert!(median(1000) <= median(10));
    }

    #[test]
    fn schedule_validation() {
        let q = random_qubo(3, 6);
        let mut s = AnnealSchedule::default_for(&q, 0);
        s.sweeps = 0;
        assert!(s.validate().is_err());
        let s = AnnealSchedule {
            t_start: 0.5,
            t_end: 1.0,
            ..AnnealSchedule::default_for(&q, 0)
        };
        assert!(simulated_anneal(&q, 1, &s).is_err());
    }
}

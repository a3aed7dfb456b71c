use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use super::{
    cmp_energy_bits, order_samples, AnnealError, Result, Sample, SampleSet, DEFAULT_N_READ,
};
use crate::qubo::{BinaryObjective, QuboProblem};

/// Largest primary-variable count accepted by [`brute_force`].
pub const MAX_BRUTE_FORCE_VARS: usize = 26;

struct Ranked {
    energy: f64,
    bits: Vec<u8>,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_energy_bits((self.energy, &self.bits), (other.energy, &other.bits))
    }
}

/// Exhaustive search keeping the [`DEFAULT_N_READ`] lowest assignments.
pub fn brute_force(q: &QuboProblem) -> Result<SampleSet> {
    brute_force_top(q, DEFAULT_N_READ)
}

/// Exhaustive search over the primary variables.
///
/// Auxiliary variables are set to the products they stand for. For QUBOs
/// produced by [`crate::qubo::quadratize`] that is the exact minimum over
/// the auxiliary bits, so the first sample is a global optimum. The `keep`
/// lowest assignments are returned, one read each; if there are fewer
/// assignments than `keep` the best one absorbs the remaining reads.
pub fn brute_force_top(q: &QuboProblem, keep: usize) -> Result<SampleSet> {
    if keep == 0 {
        return Err(AnnealError::NoReads);
    }
    q.validate()?;
    let n = q.n_primary;
    if n > MAX_BRUTE_FORCE_VARS {
        return Err(AnnealError::TooManyVariables {
            n_primary: n,
            max: MAX_BRUTE_FORCE_VARS,
        });
    }
    let start = Instant::now();
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(keep + 1);
    let mut x = vec![0u8; q.n_vars()];
    for code in 0u64..(1u64 << n) {
        for (i, b) in x[..n].iter_mut().enumerate() {
            *b = ((code >> i) & 1) as u8;
        }
        q.fill_aux(&mut x);
        let energy = q.energy(&x)?;
        if heap.len() < keep {
            heap.push(Ranked {
                energy,
                bits: x.clone(),
            });
        } else if let Some(top) = heap.peek() {
            if cmp_energy_bits((energy, &x), (top.energy, &top.bits)) == Ordering::Less {
                heap.pop();
                heap.push(Ranked {
                    energy,
                    bits: x.clone(),
                });
            }
        }
    }
    let mut samples: Vec<Sample> = heap
        .into_iter()
        .map(|r| Sample {
            bits: r.bits,
            energy: r.energy,
            count: 1,
        })
        .collect();
    order_samples(&mut samples);
    let short = keep - samples.len();
    samples[0].count += short;
    Ok(SampleSet {
        samples,
        n_read: keep,
        backend_id: "brute-force".into(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

use rand::Rng;
use rand_distr::StandardNormal;

use super::mlp::Mlp;

/// Gaussian policy and value network sharing one flat parameter vector:
/// `[actor…, log_std…, critic…]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    actor: Mlp,
    critic: Mlp,
    pub params: Vec<f64>,
}

/// `ln √(2π)`.
pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl ActorCritic {
    /// Hidden widths `pi_hidden` for the policy mean, `vf_hidden` for the value.
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        pi_hidden: &[usize],
        vf_hidden: &[usize],
    ) -> Option<Self> {
        let mut a = vec![obs_dim];
        a.extend_from_slice(pi_hidden);
        a.push(act_dim);
        let mut c = vec![obs_dim];
        c.extend_from_slice(vf_hidden);
        c.push(1);
        let actor = Mlp::new(a)?;
        let critic = Mlp::new(c)?;
        let n = actor.n_params() + act_dim + critic.n_params();
        Some(ActorCritic {
            actor,
            critic,
            params: vec![0.0; n],
        })
    }

    /// Orthogonal weights (gain √2 hidden, 0.01 policy head, 1 value head),
    /// zero biases, `log_std = 0`.
    pub fn init<R: Rng>(
        obs_dim: usize,
        act_dim: usize,
        pi_hidden: &[usize],
        vf_hidden: &[usize],
        rng: &mut R,
    ) -> Option<Self> {
        let mut m = Self::new(obs_dim, act_dim, pi_hidden, vf_hidden)?;
        let a = m.actor.init_orthogonal(rng, 2f64.sqrt(), 0.01);
        let c = m.critic.init_orthogonal(rng, 2f64.sqrt(), 1.0);
        m.params = a;
        m.params.extend(std::iter::repeat_n(0.0, act_dim));
        m.params.extend(c);
        Some(m)
    }

    /// Rebuilds a model from a stored parameter vector.
    pub fn from_params(actor: Mlp, critic: Mlp, params: Vec<f64>) -> Option<Self> {
        let ok = critic.output_dim() == 1
            && actor.input_dim() == critic.input_dim()
            && params.len() == actor.n_params() + actor.output_dim() + critic.n_params();
        ok.then_some(ActorCritic {
            actor,
            critic,
            params,
        })
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn split(&self) -> (usize, usize) {
        let a = self.actor.n_params();
        (a, a + self.act_dim())
    }

    pub fn actor_params(&self) -> &[f64] {
        &self.params[..self.split().0]
    }

    pub fn log_std(&self) -> &[f64] {
        let (a, b) = self.split();
        &self.params[a..b]
    }

    pub fn critic_params(&self) -> &[f64] {
        &self.params[self.split().1..]
    }

    pub fn mean(&self, obs: &[f64]) -> Vec<f64> {
        self.actor.forward(self.actor_params(), obs)
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.critic.forward(self.critic_params(), obs)[0]
    }

    /// `Σ_d log N(a_d; mean_d, exp(log_std_d)²)`.
    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> f64 {
        gaussian_log_prob(&self.mean(obs), self.log_std(), action)
    }

    /// `mean + std ⊙ ε` and its log-density (before any clipping).
    pub fn sample_action<R: Rng>(&self, obs: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let mean = self.mean(obs);
        let a: Vec<f64> = mean
            .iter()
            .zip(self.log_std())
            .map(|(m, ls)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + ls.exp() * eps
            })
            .collect();
        let lp = gaussian_log_prob(&mean, self.log_std(), &a);
        (a, lp)
    }

    /// Entropy of the action distribution (state independent).
    pub fn entropy(&self) -> f64 {
        self.log_std().iter().map(|ls| ls + 0.5 + LN_SQRT_2PI).sum()
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(a)
        .map(|((m, ls), x)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - LN_SQRT_2PI
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn constant_matches() {
        assert!((LN_SQRT_2PI - (2.0 * PI).sqrt().ln()).abs() < 1e-15);
    }

    fn model() -> ActorCritic {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ActorCritic::init(4, 2, &[8, 8], &[8, 8], &mut rng).unwrap()
    }

    #[test]
    fn layout_and_init() {
        let m = model();
        assert_eq!(
            m.n_params(),
            m.actor().n_params() + 2 + m.critic().n_params()
        );
        assert_eq!(m.log_std(), &[0.0, 0.0]);
        assert_eq!(m.actor().sizes(), &[4, 8, 8, 2]);
        assert_eq!(m.critic().sizes(), &[4, 8, 8, 1]);
    }

    #[test]
    fn log_prob_at_mode() {
        let mut m = model();
        let (a, b) = m.split();
        m.params[a..b].copy_from_slice(&[0.3, -1.2]);
        let obs = [0.1, 0.2, -0.3, 0.4];
        let mean = m.mean(&obs);
        let want: f64 = [0.3f64, -1.2]
            .iter()
            .map(|ls| -(ls.exp() * (2.0 * PI).sqrt()).ln())
            .sum();
        assert!((m.log_prob(&obs, &mean) - want).abs() < 1e-12);
    }

    #[test]
    fn tiny_std_gives_the_mean() {
        let mut m = model();
        let (a, b) = m.split();
        m.params[a..b].copy_from_slice(&[-40.0, -40.0]);
        let obs = [1.0, 0.0, 0.5, -0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (act, _) = m.sample_action(&obs, &mut rng);
        for (x, mu) in act.iter().zip(m.mean(&obs)) {
            assert!((x - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_mean_converges() {
        let mut m = model();
        let (a, b) = m.split();
        m.params[a..b].copy_from_slice(&[0.5, -0.5]);
        let obs = [0.2, -0.1, 0.3, 0.9];
        let mean = m.mean(&obs);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let (x, _) = m.sample_action(&obs, &mut rng);
            sum[0] += x[0];
            sum[1] += x[1];
        }
        for d in 0..2 {
            let std = m.log_std()[d].exp();
            let emp = sum[d] / n as f64;
            assert!((emp - mean[d]).abs() < 3.0 * std / (n as f64).sqrt());
        }
    }

    #[test]
    fn entropy_formula() {
        let m = model();
        assert!((m.entropy() - 2.0 * (0.5 + LN_SQRT_2PI)).abs() < 1e-15);
    }
}

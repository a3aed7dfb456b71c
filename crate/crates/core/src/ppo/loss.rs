use super::policy::{ActorCritic, LN_SQRT_2PI};

/// Training samples for one gradient step. Advantages are used as given.
#[derive(Debug, Clone, Default)]
pub struct Minibatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub old_log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossCoefs {
    pub clip_range: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    /// Share of samples whose ratio left the clip range.
    pub clip_fraction: f64,
}

/// `min(ρA, clip(ρ, 1 ± ε) A)` and its derivative in `ρ`.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Clipped-surrogate PPO loss over `batch` and its gradient in `model.params`.
///
/// `total = policy + vf_coef · value − ent_coef · entropy`, where `policy`
/// is the negated mean surrogate, `value` the mean squared error against the
/// returns and `entropy` the mean Gaussian entropy.
pub fn ppo_loss(model: &ActorCritic, batch: &Minibatch, c: &LossCoefs) -> (LossParts, Vec<f64>) {
    let n = batch.len();
    assert!(n > 0, "empty minibatch");
    let inv_n = 1.0 / n as f64;
    let (a_end, ls_end) = model.split();
    let log_std = model.log_std().to_vec();
    let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    let mut grad = vec![0.0; model.n_params()];
    let mut parts = LossParts::default();
    let mut clipped = 0usize;

    for i in 0..n {
        let obs = &batch.obs[i];
        let act = &batch.actions[i];

        let cache = model.actor().forward_cached(model.actor_params(), obs);
        let mean = cache.output();
        let mut logp = 0.0;
        for d in 0..mean.len() {
            let z = (act[d] - mean[d]) / std[d];
            logp += -0.5 * z * z - log_std[d] - LN_SQRT_2PI;
        }
        let ratio = (logp - batch.old_log_prob[i]).exp();
        let adv = batch.advantages[i];
        let (surr, dsurr) = clipped_surrogate(ratio, adv, c.clip_range);
        if (ratio - 1.0).abs() > c.clip_range {
            clipped += 1;
        }
        parts.policy -= surr * inv_n;

        // d(policy loss)/d logp
        let g_logp = -dsurr * ratio * inv_n;
        if g_logp != 0.0 {
            let mut dmean = vec![0.0; mean.len()];
            for d in 0..mean.len() {
                let diff = act[d] - mean[d];
                let var = std[d] * std[d];
                dmean[d] = g_logp * diff / var;
                grad[a_end + d] += g_logp * (diff * diff / var - 1.0);
            }
            model
                .actor()
                .backward(model.actor_params(), &cache, &dmean, &mut grad[..a_end]);
        }

        let vcache = model.critic().forward_cached(model.critic_params(), obs);
        let v = vcache.output()[0];
        let err = v - batch.returns[i];
        parts.value += err * err * inv_n;
        let dv = [c.vf_coef * 2.0 * err * inv_n];
        model
            .critic()
            .backward(model.critic_params(), &vcache, &dv, &mut grad[ls_end..]);
    }

    parts.entropy = model.entropy();
    for g in &mut grad[a_end..ls_end] {
        *g -= c.ent_coef;
    }
    parts.total = parts.policy + c.vf_coef * parts.value - c.ent_coef * parts.entropy;
    parts.clip_fraction = clipped as f64 * inv_n;
    (parts, grad)
}

/// Scales `grad` so its Euclidean norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

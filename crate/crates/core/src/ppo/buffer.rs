/// One collected transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Raw policy sample, before clipping to the action box.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// Value of the observation after this step. Ignored when `done`.
    pub next_value: f64,
    /// Terminal: no bootstrap.
    pub done: bool,
    /// Cut by the horizon: bootstrap from `next_value`, but the episode ends.
    pub truncated: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    capacity: usize,
    pub steps: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        RolloutBuffer {
            capacity,
            steps: Vec::with_capacity(capacity),
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.steps.len() >= self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert!(!self.is_full());
        self.steps.push(t);
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.advantages.clear();
        self.returns.clear();
    }

    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) {
        let (adv, ret) = compute_gae(&self.steps, gamma, lambda);
        self.advantages = adv;
        self.returns = ret;
    }
}

/// Generalised advantage estimates and returns.
///
/// `δ_t = r_t + γ V'_t (1 − done_t) − V_t` and
/// `A_t = δ_t + γ λ (1 − end_t) A_{t+1}`, where `end_t` is `done_t` or
/// `truncated_t`. The last step of the buffer bootstraps through
/// `next_value` only.
pub fn compute_gae(steps: &[Transition], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = steps.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let s = &steps[t];
        let boot = if s.done { 0.0 } else { gamma * s.next_value };
        let delta = s.reward + boot - s.value;
        let carry = if s.done || s.truncated || t + 1 == n {
            0.0
        } else {
            gamma * lambda * next_adv
        };
        adv[t] = delta + carry;
        next_adv = adv[t];
    }
    let ret = adv.iter().zip(steps).map(|(a, s)| a + s.value).collect();
    (adv, ret)
}

/// Zero mean, unit (population) standard deviation.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    if x.is_empty() {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    x.iter().map(|v| (v - mean) / std).collect()
}

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::buffer::{normalize, RolloutBuffer, Transition};
use super::loss::{clip_grad_norm, ppo_loss, Minibatch};
use super::{ActorCritic, Adam, EpisodeRow, PpoError, PpoHyper, Result, TrainingTrace};
use crate::env::{Action, EnvConfig, EpisodeTrace, PfEnv, State};
use crate::grid::Grid;

/// Mean losses over the minibatches of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ActorCritic,
    pub trace: TrainingTrace,
    pub updates: Vec<UpdateStats>,
    pub timesteps: usize,
}

/// A training error together with everything recorded before it.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: PpoError,
    pub trace: TrainingTrace,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (after {} episodes)",
            self.error,
            self.trace.rows.len()
        )
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// `n_epochs` passes of shuffled minibatches over a buffer whose advantages
/// and returns are already computed.
pub fn ppo_update(
    model: &mut ActorCritic,
    opt: &mut Adam,
    buffer: &RolloutBuffer,
    hyper: &PpoHyper,
    rng: &mut ChaCha8Rng,
) -> UpdateStats {
    let n = buffer.len();
    let coefs = hyper.loss_coefs();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..hyper.n_epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(hyper.batch_size) {
            let raw: Vec<f64> = chunk.iter().map(|&i| buffer.advantages[i]).collect();
            let advantages = if raw.len() > 1 { normalize(&raw) } else { raw };
            let batch = Minibatch {
                obs: chunk.iter().map(|&i| buffer.steps[i].obs.clone()).collect(),
                actions: chunk
                    .iter()
                    .map(|&i| buffer.steps[i].action.clone())
                    .collect(),
                old_log_prob: chunk.iter().map(|&i| buffer.steps[i].log_prob).collect(),
                advantages,
                returns: chunk.iter().map(|&i| buffer.returns[i]).collect(),
            };
            let (parts, mut grad) = ppo_loss(model, &batch, &coefs);
            let norm = clip_grad_norm(&mut grad, hyper.max_grad_norm);
            opt.step(&mut model.params, &grad);
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.entropy += parts.entropy;
            stats.clip_fraction += parts.clip_fraction;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches.max(1) as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.clip_fraction /= m;
    stats.grad_norm /= m;
    stats
}

/// Trains a fresh policy on `env`.
///
/// Rollouts of `n_steps` alternate with updates until at least
/// `total_timesteps` steps are collected. Episodes continue across rollouts.
/// Starts that already satisfy `k ≤ k_max` are redrawn, since no action is
/// taken in them. Everything is determined by `seed` and the environment's
/// own seed.
pub fn train(
    env: &mut PfEnv,
    hyper: &PpoHyper,
    seed: u64,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut trace = TrainingTrace::default();
    match train_inner(env, hyper, seed, &mut trace) {
        Ok((model, updates, timesteps)) => Ok(TrainOutcome {
            model,
            trace,
            updates,
            timesteps,
        }),
        Err(error) => Err(TrainFailure { error, trace }),
    }
}

fn train_inner(
    env: &mut PfEnv,
    hyper: &PpoHyper,
    seed: u64,
    trace: &mut TrainingTrace,
) -> Result<(ActorCritic, Vec<UpdateStats>, usize)> {
    hyper.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut act_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.next_u64());

    let (obs_dim, act_dim) = (env.obs_dim(), env.act_dim());
    let mut model = ActorCritic::init(
        obs_dim,
        act_dim,
        &hyper.policy_net,
        &hyper.value_net,
        &mut init_rng,
    )
    .ok_or_else(|| PpoError::InvalidHyper("empty network".into()))?;
    let mut opt = Adam::new(model.n_params(), hyper.learning_rate);
    let mut buffer = RolloutBuffer::new(hyper.n_steps);
    let mut updates: Vec<UpdateStats> = Vec::new();

    let mut timestep = 0;
    let mut episode_reward = 0.0;
    let mut obs = PfEnv::observe(&env.reset_unsolved()?);
    while timestep < hyper.total_timesteps {
        buffer.clear();
        while !buffer.is_full() {
            let (action, log_prob) = model.sample_action(&obs, &mut act_rng);
            let value = model.value(&obs);
            let r = env.step(&Action::from_flat(&action)?)?;
            timestep += 1;
            let next_obs = PfEnv::observe(&r.next_state);
            let next_value = if r.done { 0.0 } else { model.value(&next_obs) };
            buffer.push(Transition {
                obs: std::mem::take(&mut obs),
                action,
                log_prob,
                reward: r.reward,
                value,
                next_value,
                done: r.done,
                truncated: r.truncated,
            });
            episode_reward += r.reward;
            if r.done || r.truncated {
                let last = updates.last();
                trace.rows.push(EpisodeRow {
                    timestep,
                    episode_index: trace.rows.len(),
                    episode_reward,
                    episode_end_k: r.next_state.k,
                    policy_loss: last.map(|u| u.policy_loss),
                    value_loss: last.map(|u| u.value_loss),
                    entropy: last.map(|u| u.entropy),
                });
                episode_reward = 0.0;
                obs = PfEnv::observe(&env.reset_unsolved()?);
            } else {
                obs = next_obs;
            }
        }
        buffer.compute_gae(hyper.gamma, hyper.gae_lambda);
        updates.push(ppo_update(
            &mut model,
            &mut opt,
            &buffer,
            hyper,
            &mut shuffle_rng,
        ));
    }
    Ok((model, updates, timestep))
}

/// Runs the mean action of `model` from each start. The episode for
/// scenario `i` uses an environment seeded with `cfg.seed + i`.
pub fn evaluate(
    model: &ActorCritic,
    grid: &Grid,
    scenarios: &[State],
    cfg: &EnvConfig,
) -> Result<Vec<EpisodeTrace>> {
    scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = EnvConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let mut env = PfEnv::new(grid.clone(), cfg)?;
            if env.obs_dim() != model.obs_dim() {
                return Err(PpoError::Dimension {
                    expected: model.obs_dim(),
                    found: env.obs_dim(),
                });
            }
            env.reset_to(&s.v, &s.theta)?;
            Ok(env.run_from_current(|obs| model.mean(obs))?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::load_case;

    fn small_hyper() -> PpoHyper {
        PpoHyper {
            n_steps: 64,
            batch_size: 16,
            n_epochs: 2,
            total_timesteps: 128,
            policy_net: vec![8],
            value_net: vec![8],
            ..PpoHyper::case4()
        }
    }

    fn env(seed: u64) -> PfEnv {
        let cfg = EnvConfig {
            seed,
            ..EnvConfig::default()
        };
        PfEnv::new(load_case("case4").unwrap(), cfg).unwrap()
    }

    #[test]
    fn one_update_bookkeeping() {
        let h = PpoHyper {
            n_steps: 8,
            batch_size: 8,
            n_epochs: 1,
            total_timesteps: 8,
            ..small_hyper()
        };
        let out = train(&mut env(0), &h, 0).unwrap();
        assert_eq!(out.updates.len(), 1);
        assert_eq!(out.updates[0].minibatches, 1);
        assert_eq!(out.timesteps, 8);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let a = train(&mut env(3), &small_hyper(), 7).unwrap();
        let b = train(&mut env(3), &small_hyper(), 7).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.trace, b.trace);
        assert!(!a.trace.rows.is_empty());
        let c = train(&mut env(3), &small_hyper(), 8).unwrap();
        assert_ne!(a.model.params, c.model.params);
    }

    #[test]
    fn rows_are_consistent() {
        let out = train(&mut env(1), &small_hyper(), 1).unwrap();
        let mut prev = 0;
        for (i, r) in out.trace.rows.iter().enumerate() {
            assert_eq!(r.episode_index, i);
            assert!(r.timestep > prev && r.timestep <= out.timesteps);
            prev = r.timestep;
            assert!(r.episode_reward <= 0.0);
            assert_eq!(r.policy_loss.is_some(), r.timestep > 64);
        }
    }

    #[test]
    fn invalid_hyper_is_reported() {
        let h = PpoHyper {
            gamma: 0.0,
            ..small_hyper()
        };
        let err = train(&mut env(0), &h, 0).unwrap_err();
        assert!(matches!(err.error, PpoError::InvalidHyper(_)));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let out = train(&mut env(2), &small_hyper(), 2).unwrap();
        let grid = load_case("case4").unwrap();
        let scenarios = vec![
            State {
                v: vec![0.24, 1.0, 1.0],
                theta: vec![57.6, 0.0, 0.0],
                k: 0,
            },
            State {
                v: vec![0.95, 0.95, 0.95],
                theta: vec![-5.0, -5.0, -6.0],
                k: 0,
            },
        ];
        let cfg = EnvConfig::default();
        let a = evaluate(&out.model, &grid, &scenarios, &cfg).unwrap();
        let b = evaluate(&out.model, &grid, &scenarios, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        // near the solution the start is already solved
        assert!(a[1].is_empty());
    }
}

//! Proximal policy optimisation written against the environment in
//! [`crate::env`]: Gaussian MLP policy, MLP value function, GAE and the
//! clipped surrogate objective.

mod adam;
mod buffer;
pub mod checkpoint;
mod loss;
mod mlp;
mod policy;
mod train;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;

pub use adam::Adam;
pub use buffer::{compute_gae, normalize, RolloutBuffer, Transition};
pub use loss::{clip_grad_norm, clipped_surrogate, ppo_loss, LossCoefs, LossParts, Minibatch};
pub use mlp::{Mlp, MlpCache};
pub use policy::{gaussian_log_prob, ActorCritic};
pub use train::{evaluate, ppo_update, train, TrainFailure, TrainOutcome, UpdateStats};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("model expects {expected} inputs, environment gives {found}")]
    Dimension { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PpoError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyper {
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub clip_range: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub total_timesteps: usize,
    pub policy_net: Vec<usize>,
    pub value_net: Vec<usize>,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self::case4()
    }
}

impl PpoHyper {
    /// The 4-bus training setup.
    pub fn case4() -> Self {
        PpoHyper {
            learning_rate: 0.7e-4,
            gamma: 0.9,
            gae_lambda: 0.95,
            n_steps: 2048,
            batch_size: 64,
            n_epochs: 10,
            clip_range: 0.2,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            total_timesteps: 100_000,
            policy_net: vec![32, 32, 32],
            value_net: vec![32, 32, 32],
        }
    }

    /// The 14-bus training setup.
    pub fn case14() -> Self {
        PpoHyper {
            learning_rate: 0.5e-4,
            total_timesteps: 25_000,
            policy_net: vec![64, 64, 64],
            value_net: vec![64, 64, 64],
            ..Self::case4()
        }
    }

    /// Preset for a built-in case name; other grids get the 4-bus preset.
    pub fn for_case(name: &str) -> Self {
        match name {
            "case14" => Self::case14(),
            _ => Self::case4(),
        }
    }

    pub fn loss_coefs(&self) -> LossCoefs {
        LossCoefs {
            clip_range: self.clip_range,
            ent_coef: self.ent_coef,
            vf_coef: self.vf_coef,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(PpoError::InvalidHyper(m.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gae_lambda must lie in [0, 1]");
        }
        if self.n_steps == 0
            || self.batch_size == 0
            || self.n_epochs == 0
            || self.total_timesteps == 0
        {
            return fail("n_steps, batch_size, n_epochs and total_timesteps must be >= 1");
        }
        if !(self.clip_range > 0.0) {
            return fail("clip_range must be positive");
        }
        if !(self.ent_coef >= 0.0 && self.vf_coef >= 0.0) {
            return fail("ent_coef and vf_coef must be non-negative");
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("max_grad_norm must be positive");
        }
        if self.policy_net.contains(&0) || self.value_net.contains(&0) {
            return fail("layer widths must be >= 1");
        }
        Ok(())
    }
}

/// One finished training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    /// Environment steps taken when the episode ended.
    pub timestep: usize,
    pub episode_index: usize,
    pub episode_reward: f64,
    pub episode_end_k: u32,
    /// Losses of the most recent update; empty before the first one.
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub rows: Vec<EpisodeRow>,
}

impl TrainingTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record([
                "timestep",
                "episode_index",
                "episode_reward",
                "episode_end_k",
                "policy_loss",
                "value_loss",
                "entropy",
            ])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let rows = csv::Reader::from_reader(input)
            .deserialize()
            .collect::<std::result::Result<Vec<EpisodeRow>, _>>()?;
        Ok(TrainingTrace { rows })
    }

    /// Means of episode-end `k` and episode reward over the first and last
    /// tenth of the episodes (at least one episode each).
    pub fn decile_means(&self) -> Option<DecileMeans> {
        let n = self.rows.len();
        if n == 0 {
            return None;
        }
        let w = (n / 10).max(1);
        let mean = |rows: &[EpisodeRow], f: &dyn Fn(&EpisodeRow) -> f64| {
            rows.iter().map(f).sum::<f64>() / rows.len() as f64
        };
        let (first, last) = (&self.rows[..w], &self.rows[n - w..]);
        Some(DecileMeans {
            first_k: mean(first, &|r| f64::from(r.episode_end_k)),
            last_k: mean(last, &|r| f64::from(r.episode_end_k)),
            first_reward: mean(first, &|r| r.episode_reward),
            last_reward: mean(last, &|r| r.episode_reward),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecileMeans {
    pub first_k: f64,
    pub last_k: f64,
    pub first_reward: f64,
    pub last_reward: f64,
}

impl DecileMeans {
    pub fn improved(&self) -> bool {
        self.last_k < self.first_k && self.last_reward > self.first_reward
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let h = PpoHyper::case4();
        assert_eq!(h.learning_rate, 0.7e-4);
        assert_eq!(h.policy_net, vec![32, 32, 32]);
        let h = PpoHyper::for_case("case14");
        assert_eq!(h.learning_rate, 0.5e-4);
        assert_eq!(h.value_net, vec![64, 64, 64]);
        assert_eq!(
            (h.gamma, h.n_steps, h.batch_size, h.n_epochs),
            (0.9, 2048, 64, 10)
        );
        assert_eq!((h.clip_range, h.ent_coef), (0.2, 0.0));
        h.validate().unwrap();
    }

    #[test]
    fn validation() {
        let bad = PpoHyper {
            gamma: 1.0,
            ..PpoHyper::case4()
        };
        assert!(bad.validate().is_err());
        let bad = PpoHyper {
            clip_range: 0.0,
            ..PpoHyper::case4()
        };
        assert!(bad.validate().is_err());
        let bad = PpoHyper {
            policy_net: vec![32, 0],
            ..PpoHyper::case4()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_config_overrides_defaults() {
        let h: PpoHyper =
            serde_json::from_str(r#"{"learning_rate": 0.001, "policy_net": [16]}"#).unwrap();
        assert_eq!(h.learning_rate, 0.001);
        assert_eq!(h.policy_net, vec![16]);
        assert_eq!(h.n_steps, 2048);
        assert!(serde_json::from_str::<PpoHyper>(r#"{"lr": 1}"#).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = TrainingTrace {
            rows: vec![
                EpisodeRow {
                    timestep: 12,
                    episode_index: 0,
                    episode_reward: -3.25,
                    episode_end_k: 50,
                    policy_loss: None,
                    value_loss: None,
                    entropy: None,
                },
                EpisodeRow {
                    timestep: 30,
                    episode_index: 1,
                    episode_reward: -0.1,
                    episode_end_k: 3,
                    policy_loss: Some(-0.01),
                    value_loss: Some(2.5),
                    entropy: Some(8.51),
                },
            ],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "timestep,episode_index,episode_reward,episode_end_k,policy_loss,value_loss,entropy\n"
        ));
        assert_eq!(TrainingTrace::read_csv(&buf[..]).unwrap(), t);
        let mut empty = Vec::new();
        TrainingTrace::default().write_csv(&mut empty).unwrap();
        assert_eq!(TrainingTrace::read_csv(&empty[..]).unwrap().rows.len(), 0);
    }

    #[test]
    fn decile_means() {
        let rows = (0..20)
            .map(|i| EpisodeRow {
                timestep: i,
                episode_index: i,
                episode_reward: i as f64,
                episode_end_k: 50 - i as u32,
                policy_loss: None,
                value_loss: None,
                entropy: None,
            })
            .collect();
        let d = TrainingTrace { rows }.decile_means().unwrap();
        assert_eq!((d.first_k, d.last_k), (49.5, 31.5));
        assert_eq!((d.first_reward, d.last_reward), (0.5, 18.5));
        assert!(d.improved());
    }
}

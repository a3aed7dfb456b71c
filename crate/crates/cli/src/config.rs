use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qrlpf_core::annealer::DEFAULT_N_READ;
use qrlpf_core::grid::load_case;
use qrlpf_core::qubo::Penalty;
use qrlpf_core::{Backend, EnvConfig, Grid, NrConfig, PpoHyper, UpdateMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classic,
    Quantum,
}

/// What a `--config` file may contain. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub case: Option<String>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub backend: Option<String>,
    pub n_read: Option<usize>,
    pub timesteps: Option<usize>,
    pub penalty: Option<String>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub env: EnvSection,
    /// Partial PPO hyperparameters laid over the case preset.
    pub ppo: Option<toml::Table>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub k_max: Option<u32>,
    pub horizon: Option<usize>,
    pub nr_tolerance: Option<f64>,
    pub nr_max_iter: Option<u32>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Values given on the command line; these win over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub case: Option<String>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub backend: Option<String>,
    pub n_read: Option<usize>,
    pub timesteps: Option<usize>,
    pub penalty: Option<String>,
    pub out: Option<PathBuf>,
}

/// Fully resolved and validated settings for one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub case: String,
    pub grid: Grid,
    pub seed: u64,
    pub mode: Mode,
    pub backend: Backend,
    pub n_read: usize,
    pub penalty: Penalty,
    pub out: Option<PathBuf>,
    pub env: EnvConfig,
    pub ppo: PpoHyper,
}

impl RunConfig {
    pub fn resolve(file: FileConfig, cli: Overrides) -> Result<Self> {
        let case = cli.case.or(file.case).unwrap_or_else(|| "case4".into());
        let grid = load_case(&case).with_context(|| format!("loading case `{case}`"))?;
        let seed = cli.seed.or(file.seed).unwrap_or(0);
        let mode = cli.mode.or(file.mode).unwrap_or(Mode::Classic);
        let backend_name = cli
            .backend
            .or(file.backend)
            .unwrap_or_else(|| "brute".into());
        let backend = backend_name
            .parse::<Backend>()
            .map_err(anyhow::Error::msg)?
            .with_seed(seed);
        let n_read = cli.n_read.or(file.n_read).unwrap_or(DEFAULT_N_READ);
        if n_read == 0 {
            bail!("n_read must be >= 1");
        }
        let penalty = cli
            .penalty
            .or(file.penalty)
            .map(|p| p.parse::<Penalty>().map_err(anyhow::Error::msg))
            .transpose()?
            .unwrap_or_default();

        let defaults = EnvConfig::default();
        let nr = NrConfig {
            tolerance: file.env.nr_tolerance.unwrap_or(defaults.nr.tolerance),
            max_iter: file.env.nr_max_iter.unwrap_or(defaults.nr.max_iter),
            ..defaults.nr
        };
        let env = EnvConfig {
            k_max: file.env.k_max.unwrap_or(defaults.k_max),
            horizon: file.env.horizon.unwrap_or(defaults.horizon),
            mode: match mode {
                Mode::Classic => UpdateMode::Classic,
                Mode::Quantum => UpdateMode::Quantum {
                    backend: backend.clone(),
                    n_read,
                },
            },
            nr,
            seed,
        };
        env.validate().context("environment settings")?;

        let mut ppo = overlay(PpoHyper::for_case(&case), file.ppo)?;
        if let Some(t) = cli.timesteps.or(file.timesteps) {
            ppo.total_timesteps = t;
        }
        ppo.validate()?;

        Ok(RunConfig {
            case,
            grid,
            seed,
            mode,
            backend,
            n_read,
            penalty,
            out: cli.out.or(file.out),
            env,
            ppo,
        })
    }

    /// The settings as a TOML document that `--config` accepts again.
    pub fn to_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Env {
            k_max: u32,
            horizon: usize,
            nr_tolerance: f64,
            nr_max_iter: u32,
        }
        #[derive(Serialize)]
        struct View<'a> {
            case: &'a str,
            seed: u64,
            mode: Mode,
            backend: String,
            n_read: usize,
            env: Env,
            ppo: &'a PpoHyper,
        }
        let backend = match &self.backend {
            Backend::BruteForce => "brute".to_owned(),
            Backend::SimAnneal { .. } => "sa".to_owned(),
            Backend::Remote(r) => format!("remote:{}", r.addr),
        };
        let view = View {
            case: &self.case,
            seed: self.seed,
            mode: self.mode,
            backend,
            n_read: self.n_read,
            env: Env {
                k_max: self.env.k_max,
                horizon: self.env.horizon,
                nr_tolerance: self.env.nr.tolerance,
                nr_max_iter: self.env.nr.max_iter,
            },
            ppo: &self.ppo,
        };
        Ok(toml::to_string(&view)?)
    }
}

fn overlay(preset: PpoHyper, table: Option<toml::Table>) -> Result<PpoHyper> {
    let Some(table) = table else {
        return Ok(preset);
    };
    let mut base = toml::Table::try_from(&preset)?;
    base.extend(table);
    toml::Value::Table(base).try_into().context("[ppo] section")
}

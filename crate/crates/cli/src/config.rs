//! Per-subcommand JSON configs. Every struct rejects unknown keys and every
//! field has a default, so `{}` is a valid config for each command.

use fwplab::autodiff::{MixerSpec, TrainConfig};
use fwplab::layer::PhiMap;
use fwplab::rules::UpdateRule;
use fwplab::tasks::{TaskKind, TaskSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivConfig {
    pub seed: u64,
    /// Seeds per pair.
    pub seeds: usize,
    /// Pair names; empty means all registered pairs.
    pub pairs: Vec<String>,
    /// Name of a pair to perturb, for checking that the suite can fail.
    pub fault: Option<String>,
}

impl Default for EquivConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 100,
            pairs: Vec::new(),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub seeds: usize,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub eps: f64,
    pub threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 3,
            width: 6,
            heads: 2,
            seq_len: 5,
            eps: 1e-6,
            threshold: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdSettings {
    pub d_x: usize,
    pub d_y: usize,
    /// Demonstrations per problem.
    pub demos: usize,
    pub problems: usize,
    /// Entries of the starting weights are uniform in ±`w0_scale`.
    pub w0_scale: f64,
    pub threshold: f64,
}

impl Default for GdSettings {
    fn default() -> Self {
        Self {
            d_x: 3,
            d_y: 2,
            demos: 8,
            problems: 100,
            w0_scale: 0.5,
            threshold: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParitySettings {
    /// Every bitstring of length 1 to `max_len` is checked.
    pub max_len: usize,
}

impl Default for ParitySettings {
    fn default() -> Self {
        Self { max_len: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    Gd,
    Parity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstructConfig {
    pub seed: u64,
    pub construction: Construction,
    pub gd: GdSettings,
    pub parity: ParitySettings,
}

impl Default for ConstructConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            construction: Construction::Gd,
            gd: GdSettings::default(),
            parity: ParitySettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub blocks: usize,
    pub mixer: MixerSpec,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            d_model: 32,
            blocks: 2,
            mixer: MixerSpec::fwp(UpdateRule::Delta, 2, PhiMap::SiluL2norm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelSettings,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskSpec::new(TaskKind::Parity, 2, 32),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seed: u64,
    pub rules: Vec<UpdateRule>,
    pub seq_lens: Vec<usize>,
    pub chunks: Vec<usize>,
    pub d_key: usize,
    pub d_out: usize,
    pub heads: usize,
    pub repetitions: usize,
    /// The quadratic form needs `T²` memory per head; it is skipped above this.
    pub quadratic_max_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rules: vec![UpdateRule::Additive, UpdateRule::Gla],
            seq_lens: vec![256, 1024, 4096],
            chunks: vec![64],
            d_key: 32,
            d_out: 32,
            heads: 2,
            repetitions: 5,
            quadratic_max_len: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub samples: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskSpec::new(TaskKind::Parity, 2, 32),
            samples: 1000,
        }
    }
}

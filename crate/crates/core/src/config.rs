//! Run configuration: one TOML file covering data generation, model,
//! training, evaluation and diagnostics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::NsConfig;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::train::{TrainConfig, DEFAULT_BAND_EDGES};

/// SHA-256 of the compact JSON serialization of `value`.
pub fn sha256_json<T: Serialize>(value: &T) -> [u8; 32] {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    Sha256::digest(&bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/kf.drft"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_traj: usize,
    /// Named solver preset applied before explicit `[ns]` keys.
    pub preset: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_traj: 100,
            preset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Rollout length; `None` runs to the last stored frame.
    pub steps: Option<usize>,
    pub band_edges: Vec<f64>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            steps: None,
            band_edges: DEFAULT_BAND_EDGES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryConfig {
    /// Random linearization points per block.
    pub points: usize,
    pub power_iters: usize,
    pub power_tol: f64,
    /// Random bins for the fusion amplitude check.
    pub fusion_bins: usize,
    /// Reference per-layer constants of an attention/MLP stack.
    pub a_attn: f64,
    pub a_mlp: f64,
    pub sobolev_s: f64,
    pub sobolev_lambda: f64,
    pub bench_grids: Vec<usize>,
    pub bench_channels: usize,
    pub bench_warmup: usize,
    pub bench_iters: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            points: 100,
            power_iters: 200,
            power_tol: 1e-9,
            fusion_bins: 1_000_000,
            a_attn: 1.0,
            a_mlp: 1.0,
            sobolev_s: 1.0,
            sobolev_lambda: 1.0,
            bench_grids: vec![32, 64, 128, 256, 512],
            bench_channels: 16,
            bench_warmup: 10,
            bench_iters: 30,
        }
    }
}

/// Everything a subcommand needs. `seed` overrides the solver and training seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub ns: NsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
    pub theory: TheoryConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Propagates the top-level seed into the sections that consume one.
    pub fn resolved(mut self) -> Self {
        self.ns.seed = self.seed;
        self.train.seed = self.seed;
        self.model.variant = self.train.variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.ns.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn hash(&self) -> [u8; 32] {
        sha256_json(self)
    }

    /// Writes the resolved config as `config.toml` into `dir`.
    pub fn write_into(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let p = dir.join("config.toml");
        std::fs::write(&p, self.to_toml()?)?;
        Ok(p)
    }
}

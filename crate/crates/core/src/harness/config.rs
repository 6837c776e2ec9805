use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{snr_range, DatasetConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Architecture, OutputLayout};
use crate::seeding::mix_seed;

/// Environment variable that overrides [`ExperimentConfig::seed`].
pub const SEED_ENV: &str = "RISGAT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub l2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    /// Mini-batches are split into this many chunks, each differentiated on
    /// its own tape in parallel.
    pub grad_chunks: usize,
    /// Reduce chunk gradients in a fixed order.
    pub deterministic: bool,
    pub split_ratio: [usize; 2],
    pub self_loops: bool,
    pub edge_fusion: bool,
    pub output: OutputLayout,
    /// Standardize node features with training-set statistics.
    pub standardize_inputs: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 20,
            patience: 5,
            lr: 1e-3,
            l2: 5e-4,
            dropout: 0.5,
            batch_size: 64,
            grad_chunks: 8,
            deterministic: true,
            split_ratio: [4, 1],
            self_loops: true,
            edge_fusion: false,
            output: OutputLayout::Complex,
            standardize_inputs: true,
        }
    }
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn architecture(&self, m_pilots: usize, n_elements: usize) -> Architecture {
        Architecture {
            output: self.output,
            self_loops: self.self_loops,
            edge_fusion: self.edge_fusion,
            dropout: self.dropout,
            ..Architecture::reference(m_pilots, n_elements)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_chunks == 0 {
            return Err(Error::invalid("batch_size and grad_chunks must be positive"));
        }
        if !(self.lr > 0.0 && self.l2 >= 0.0) {
            return Err(Error::invalid("lr must be positive and l2 nonnegative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalGrid {
    pub snr_db: Vec<f64>,
    pub k_factors: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub n_elements: Vec<usize>,
    pub m_pilots: Vec<usize>,
    pub samples_per_point: usize,
    /// Operating point the network was trained at; the sweeps vary one
    /// parameter around it.
    pub nominal_k: f64,
    pub nominal_epsilon: f64,
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid {
            snr_db: snr_range(-30.0, 2.0, 10.0),
            k_factors: vec![0.0, 4.0, 8.0, 10.0, 12.0],
            epsilons: vec![0.0, 1e-1, 1e-2, 1e-3],
            n_elements: vec![128],
            m_pilots: vec![16],
            samples_per_point: 500,
            nominal_k: 10.0,
            nominal_epsilon: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

/// Everything a run needs. `seed` is the single source of randomness:
/// dataset, initialization, shuffling, dropout and test-signal seeds are all
/// derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    pub evaluation: EvalGrid,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            seed: 2021,
            dataset: DatasetConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvalGrid::default(),
            output: OutputConfig::default(),
        };
        cfg.dataset.master_seed = cfg.dataset_seed();
        cfg
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.dataset.master_seed = cfg.dataset_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Replaces the global seed with `RISGAT_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.master_seed = self.dataset_seed();
    }

    pub fn dataset_seed(&self) -> u64 {
        mix_seed(self.seed, &[1])
    }

    pub fn training_seed(&self) -> u64 {
        mix_seed(self.seed, &[2])
    }

    pub fn evaluation_seed(&self) -> u64 {
        mix_seed(self.seed, &[3])
    }

    /// Dataset configuration for one `(N, M)` pair.
    pub fn dataset_for(&self, n_elements: usize, m_pilots: usize) -> DatasetConfig {
        DatasetConfig {
            n_elements,
            m_pilots,
            ..self.dataset.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.training.validate()?;
        let g = &self.evaluation;
        if g.snr_db.is_empty() || g.n_elements.is_empty() || g.m_pilots.is_empty() {
            return Err(Error::invalid("evaluation grid needs SNR, N and M values"));
        }
        if g.samples_per_point == 0 {
            return Err(Error::invalid("samples_per_point must be at least 1"));
        }
        Ok(())
    }

    /// Writes the resolved configuration as `config.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

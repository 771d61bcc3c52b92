//! Run configuration: a TOML file whose values CLI flags may override.
//!
//! The resolved configuration is embedded in every output. `workers` and
//! `out` are excluded because they never change results.

use std::path::{Path, PathBuf};

use acbi_core::attacks::{AttackConfig, Init, Method};
use acbi_core::model::TrainConfig;
use acbi_core::rng::derive_seed;
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every section seed is derived from it.
    pub seed: u64,
    #[serde(skip_serializing)]
    pub workers: usize,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub method: Method,
    pub init: Init,
    pub sweep: SweepSection,
    pub export: ExportSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Original labels to keep; empty keeps all.
    pub classes: Vec<u32>,
    /// Test examples sampled for attacks; `None` uses the whole split.
    pub test_samples: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Checkpoint path; relative paths are resolved against `out`.
    pub checkpoint: PathBuf,
    pub repr_dim: usize,
    /// Train on PGD examples built with the `[attack]` budget.
    pub adversarial: bool,
    /// PGD steps per adversarial training example.
    pub adversarial_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub n_init: Vec<usize>,
    /// Attack seeds, one repetition each.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub examples: usize,
    /// Iterations of the BIM attack whose results are exported.
    pub steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out: PathBuf::from("out"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            method: Method::Pgd,
            init: Init::Acbi,
            sweep: SweepSection::default(),
            export: ExportSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/mnist-0123"),
            train_images: "train-images-idx3-ubyte.gz".into(),
            train_labels: "train-labels-idx1-ubyte.gz".into(),
            test_images: "t10k-images-idx3-ubyte.gz".into(),
            test_labels: "t10k-labels-idx1-ubyte.gz".into(),
            classes: vec![0, 1, 2, 3],
            test_samples: Some(1000),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.ckpt"),
            repr_dim: 2,
            adversarial: false,
            adversarial_steps: 5,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            n_init: (0..=5).collect(),
            seeds: (0..5).collect(),
        }
    }
}

impl Default for ExportSection {
    fn default() -> Self {
        Self { examples: 200, steps: 10 }
    }
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<RunConfig>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(w) = overrides.workers {
            cfg.workers = w;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_seeds(&mut self) {
        self.train.seed = derive_seed(self.seed, &[1]);
        self.attack.seed = derive_seed(self.seed, &[2]);
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[0])
    }

    pub fn sample_seed(&self) -> u64 {
        derive_seed(self.seed, &[3])
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate().context("in [train]")?;
        self.attack.validate().context("in [attack]")?;
        if self.model.repr_dim == 0 {
            bail!("model.repr_dim must be >= 1");
        }
        if self.data.test_samples == Some(0) {
            bail!("data.test_samples must be >= 1");
        }
        if self.sweep.n_init.iter().any(|&n| n > self.attack.total_budget()) {
            bail!(
                "sweep.n_init entries must not exceed attack.n_init + attack.n_attack = {}",
                self.attack.total_budget()
            );
        }
        if self.sweep.seeds.is_empty() || self.sweep.n_init.is_empty() {
            bail!("sweep.n_init and sweep.seeds must be non-empty");
        }
        if self.export.examples == 0 || self.export.steps == 0 {
            bail!("export.examples and export.steps must be >= 1");
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.model.checkpoint.is_absolute() {
            self.model.checkpoint.clone()
        } else {
            self.out.join(&self.model.checkpoint)
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

//! Run configuration, read from TOML. Every field not given takes its
//! default, and the resolved copy written next to a run spells them all out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusFormat, SplitSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::mceval::EvalConfig;
use crate::model::ModelConfig;
use crate::objective::{AdamConfig, ObjectiveWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectBy {
    #[default]
    Ce,
    Loss,
    Nll,
}

impl SelectBy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectBy::Ce => "ce",
            SelectBy::Loss => "loss",
            SelectBy::Nll => "nll",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Corpus file; the built-in toy corpus is used when absent.
    pub path: Option<PathBuf>,
    pub format: CorpusFormat,
    pub toy_docs: usize,
    pub val_frac: f64,
    /// Defaults to the run seed.
    pub split_seed: Option<u64>,
    /// Window stride; defaults to the window length.
    pub stride: Option<usize>,
    pub story_only_loss: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            format: CorpusFormat::Jsonl,
            toy_docs: 50,
            val_frac: 0.2,
            split_seed: None,
            stride: None,
            story_only_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches per epoch; one pass over the training windows when absent.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub grad_clip: f64,
    pub select_by: SelectBy,
    /// Steps between homeostat gain updates.
    pub homeostat_window: usize,
    /// Steps between full latent-diagnostic records.
    pub diag_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 8,
            steps_per_epoch: None,
            lr: 3e-3,
            grad_clip: 1.0,
            select_by: SelectBy::Ce,
            homeostat_window: 10,
            diag_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip: self.grad_clip,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    /// Required; may be supplied on the command line instead.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub objective: ObjectiveWeights,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: None,
            out_dir: None,
            model: ModelConfig::default(),
            objective: ObjectiveWeights::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(&self.resolved()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("seed is mandatory (set `seed` or pass --seed)".into()))
    }

    /// Copy with the derived defaults filled in.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        if c.data.split_seed.is_none() {
            c.data.split_seed = c.seed;
        }
        if c.data.stride.is_none() {
            c.data.stride = Some(c.model.window_length);
        }
        if c.model.det_hidden.is_none() {
            c.model.det_hidden = Some(c.model.matched_det_hidden());
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.model.validate()?;
        self.objective.validate()?;
        self.eval.validate()?;
        if self.train.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.train.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be ≥ 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config("lr must be a positive number".into()));
        }
        if !(self.data.val_frac > 0.0 && self.data.val_frac < 1.0) {
            return Err(Error::Config("val_frac must lie in (0, 1)".into()));
        }
        if self.data.path.is_none() && self.data.toy_docs < 2 {
            return Err(Error::Config("toy_docs must be ≥ 2".into()));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            t: self.model.window_length,
            stride: self.data.stride.unwrap_or(self.model.window_length),
            story_only_loss: self.data.story_only_loss,
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        Ok(SplitSpec {
            val_frac: self.data.val_frac,
            seed: match self.data.split_seed {
                Some(s) => s,
                None => self.seed()?,
            },
        })
    }
}

//! Run configuration: a TOML file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use mvse_core::config::{Dims, FuseMode, ModelConfig, SpaceSet, TripletConfig};
use mvse_core::data::synth::SynthConfig;

use crate::Failure;

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            data: None,
            manifest: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub train_split: String,
    pub eval_split: String,
    pub k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            train_split: "train".into(),
            eval_split: "test".into(),
            k: 5,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness for synthesis, initialization, shuffling
    /// and frame sampling. Overrides `train.seed` and `synth.seed`.
    pub seed: u64,
    pub preset: String,
    /// Full dimension table; replaces the preset when present.
    pub dims: Option<Dims>,
    pub spaces: Option<SpaceSet>,
    pub fuse_mode: Option<FuseMode>,
    pub attention: bool,
    pub train: TripletConfig,
    pub synth: SynthConfig,
    pub paths: Paths,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: "small".into(),
            dims: None,
            spaces: None,
            fuse_mode: None,
            attention: true,
            train: TripletConfig::default(),
            synth: SynthConfig::default(),
            paths: Paths::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub spaces: Option<SpaceSet>,
    pub fuse_mode: Option<FuseMode>,
    pub margin: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub k: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config `{}`", p.display()))
                    .map_err(Failure::Usage)?;
                toml::from_str(&text)
                    .with_context(|| format!("invalid config `{}`", p.display()))
                    .map_err(Failure::Usage)?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = o.spaces {
            cfg.spaces = Some(v);
        }
        if let Some(v) = o.fuse_mode {
            cfg.fuse_mode = Some(v);
        }
        if let Some(v) = o.margin {
            cfg.train.margin = v;
        }
        if let Some(v) = o.lr {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = o.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = o.k {
            cfg.eval.k = v;
        }
        if let Some(v) = &o.out_dir {
            cfg.paths.out_dir = v.clone();
        }
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), Failure> {
        self.dims()?.validate(self.spaces.unwrap_or_default())?;
        self.train.validate()?;
        if self.eval.k == 0 {
            return Err(Failure::usage("--k must be >= 1"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<Dims, Failure> {
        match self.dims {
            Some(d) => Ok(d),
            None => Ok(Dims::preset(&self.preset)?),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, Failure> {
        Ok(ModelConfig {
            dims: self.dims()?,
            spaces: self.spaces.unwrap_or_default(),
            fuse_mode: self.fuse_mode.unwrap_or_default(),
            attention: self.attention,
        })
    }

    /// Generator settings with feature sizes taken from the model dimensions.
    pub fn synth_config(&self) -> Result<SynthConfig, Failure> {
        let d = self.dims()?;
        Ok(SynthConfig {
            grid: d.grid,
            c_global: d.c_global,
            c_grid: d.c_grid,
            c_action: d.c_action,
            token_dim: d.token_dim,
            ..self.synth.clone()
        })
    }

    pub fn data_path(&self) -> PathBuf {
        self.paths.data.clone().unwrap_or_else(|| self.paths.out_dir.join("features.mvse"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths
            .manifest
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("manifest.txt"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("checkpoint.mvse"))
    }
}

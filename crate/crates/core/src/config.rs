//! Model dimensions, embedding-space selection and training settings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One joint embedding space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Global,
    Sequential,
    Action,
}

impl Space {
    pub const ALL: [Space; 3] = [Space::Global, Space::Sequential, Space::Action];

    pub fn name(self) -> &'static str {
        match self {
            Space::Global => "global",
            Space::Sequential => "sequential",
            Space::Action => "action",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Space::Global),
            "sequential" => Ok(Space::Sequential),
            "action" => Ok(Space::Action),
            other => Err(Error::UnknownSpace(other.to_string())),
        }
    }
}

/// Model variants: which spaces take part in the fused similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceSet {
    #[serde(rename = "single")]
    Single,
    #[default]
    #[serde(rename = "dual-S")]
    DualS,
    #[serde(rename = "dual-I")]
    DualI,
    #[serde(rename = "triple")]
    Triple,
}

impl SpaceSet {
    pub const ALL: [SpaceSet; 4] = [
        SpaceSet::Single,
        SpaceSet::DualS,
        SpaceSet::DualI,
        SpaceSet::Triple,
    ];

    pub fn spaces(self) -> &'static [Space] {
        match self {
            SpaceSet::Single => &[Space::Global],
            SpaceSet::DualS => &[Space::Global, Space::Sequential],
            SpaceSet::DualI => &[Space::Global, Space::Action],
            SpaceSet::Triple => &[Space::Global, Space::Sequential, Space::Action],
        }
    }

    pub fn contains(self, space: Space) -> bool {
        self.spaces().contains(&space)
    }

    pub fn name(self) -> &'static str {
        match self {
            SpaceSet::Single => "single",
            SpaceSet::DualS => "dual-S",
            SpaceSet::DualI => "dual-I",
            SpaceSet::Triple => "triple",
        }
    }
}

impl fmt::Display for SpaceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpaceSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SpaceSet::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown space set `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    #[default]
    Weighted,
    Average,
}

impl FromStr for FuseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(FuseMode::Weighted),
            "average" => Ok(FuseMode::Average),
            other => Err(Error::Config(format!("unknown fuse mode `{other}`"))),
        }
    }
}

impl fmt::Display for FuseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FuseMode::Weighted => "weighted",
            FuseMode::Average => "average",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    SumAll,
    #[default]
    Hardest,
}

impl FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum-all" => Ok(NegativeMode::SumAll),
            "hardest" => Ok(NegativeMode::Hardest),
            other => Err(Error::Config(format!("unknown negative mode `{other}`"))),
        }
    }
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeMode::SumAll => "sum-all",
            NegativeMode::Hardest => "hardest",
        })
    }
}

/// Every size in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Chunks (sampled frames) per video.
    pub n_chunks: usize,
    /// Spatial grid side.
    pub grid: usize,
    pub c_global: usize,
    pub c_grid: usize,
    pub c_action: usize,
    /// GRU / LSTM hidden size.
    pub hidden: usize,
    /// Joint space size for the global and sequential spaces.
    pub embed: usize,
    pub token_dim: usize,
    /// Width of the attention intermediates `p` and `q`.
    pub attn_dim: usize,
}

impl Dims {
    pub const FULL: Dims = Dims {
        n_chunks: 20,
        grid: 7,
        c_global: 2048,
        c_grid: 2048,
        c_action: 1024,
        hidden: 512,
        embed: 512,
        token_dim: 300,
        attn_dim: 512,
    };

    pub const SMALL: Dims = Dims {
        n_chunks: 4,
        grid: 2,
        c_global: 32,
        c_grid: 32,
        c_action: 16,
        hidden: 16,
        embed: 16,
        token_dim: 8,
        attn_dim: 16,
    };

    pub fn preset(name: &str) -> Result<Dims> {
        match name {
            "full" => Ok(Self::FULL),
            "small" => Ok(Self::SMALL),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Length of one flattened grid frame.
    pub fn grid_len(&self) -> usize {
        self.cells() * self.c_grid
    }

    /// Output size of the textual projection into `space`.
    pub fn space_dim(&self, space: Space) -> usize {
        match space {
            Space::Global | Space::Sequential => self.embed,
            Space::Action => self.c_action,
        }
    }

    pub fn validate(&self, spaces: SpaceSet) -> Result<()> {
        let named = [
            ("n_chunks", self.n_chunks),
            ("c_global", self.c_global),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("token_dim", self.token_dim),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if spaces.contains(Space::Sequential) {
            if self.grid == 0 || self.c_grid == 0 || self.attn_dim == 0 {
                return Err(Error::Config(
                    "sequential space needs grid, c_grid and attn_dim > 0".into(),
                ));
            }
            if self.embed != self.hidden {
                return Err(Error::Config(format!(
                    "sequential space needs embed == hidden ({} != {})",
                    self.embed, self.hidden
                )));
            }
        }
        if spaces.contains(Space::Action) && self.c_action == 0 {
            return Err(Error::Config("action space needs c_action > 0".into()));
        }
        Ok(())
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self::SMALL
    }
}

/// Architecture choices that shape the parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dims: Dims,
    pub spaces: SpaceSet,
    pub fuse_mode: FuseMode,
    /// Sentence-conditioned spatial attention; when off every cell gets `1/G^2`.
    pub attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: Dims::SMALL,
            spaces: SpaceSet::DualS,
            fuse_mode: FuseMode::Weighted,
            attention: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate(self.spaces)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub margin: f64,
    pub negative_mode: NegativeMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            negative_mode: NegativeMode::Hardest,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

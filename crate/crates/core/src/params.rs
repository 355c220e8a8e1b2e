//! Named parameter storage and seeded initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::config::{ModelConfig, Space};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Every learnable tensor, keyed as `module.name`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    /// Initializes every tensor the configured model needs.
    ///
    /// Matrices and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// the LSTM forget-gate bias starts at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = &config.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let mut layer = |p: &mut ModelParams, name: &str, out: usize, fan_in: usize| -> Result<()> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..out * fan_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            p.insert(format!("{name}.w"), Tensor::matrix(out, fan_in, w)?)
        };

        for gate in ["z", "r", "n"] {
            layer(&mut p, &format!("gru.input_{gate}"), d.hidden, d.token_dim)?;
            layer(&mut p, &format!("gru.hidden_{gate}"), d.hidden, d.hidden)?;
        }
        for space in config.spaces.spaces() {
            layer(&mut p, &format!("text.{space}"), d.space_dim(*space), d.hidden)?;
        }
        if config.spaces.contains(Space::Global) {
            layer(&mut p, "visual.global", d.embed, d.c_global)?;
        }
        if config.spaces.contains(Space::Sequential) {
            layer(&mut p, "attention.p", d.attn_dim, d.grid_len())?;
            layer(&mut p, "attention.q", d.attn_dim, d.hidden)?;
            layer(&mut p, "attention.a", d.cells(), d.attn_dim)?;
            for gate in ["i", "f", "g", "o"] {
                layer(&mut p, &format!("lstm.input_{gate}"), d.hidden, d.grid_len())?;
                layer(&mut p, &format!("lstm.hidden_{gate}"), d.hidden, d.hidden)?;
            }
        }
        if config.spaces.spaces().len() > 1 {
            layer(&mut p, "gate", config.spaces.spaces().len(), d.hidden)?;
        }

        // Biases: drawn in a second pass so matrix draws do not depend on
        // which biases exist.
        let mut bias = |p: &mut ModelParams, name: &str, len: usize, fan_in: usize| -> Result<()> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let b: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
            p.insert(format!("{name}.b"), Tensor::vector(&b))
        };
        for gate in ["z", "r", "n"] {
            bias(&mut p, &format!("gru.{gate}"), d.hidden, d.hidden)?;
        }
        for space in config.spaces.spaces() {
            bias(&mut p, &format!("text.{space}"), d.space_dim(*space), d.hidden)?;
        }
        if config.spaces.contains(Space::Global) {
            bias(&mut p, "visual.global", d.embed, d.c_global)?;
        }
        if config.spaces.contains(Space::Sequential) {
            bias(&mut p, "attention.p", d.attn_dim, d.grid_len())?;
            bias(&mut p, "attention.q", d.attn_dim, d.hidden)?;
            bias(&mut p, "attention.a", d.cells(), d.attn_dim)?;
            for gate in ["i", "g", "o"] {
                bias(&mut p, &format!("lstm.{gate}"), d.hidden, d.hidden)?;
            }
            p.insert("lstm.f.b", Tensor::full(&[d.hidden], 1.0))?;
        }
        Ok(p)
    }
}

/// Parameter handles on one tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Handles for tensors already on a tape, keyed by parameter name.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradient per parameter; parameters the loss never reached get zeros.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SpaceSet;

    #[test]
    fn init_shapes_follow_out_in_orientation() {
        let cfg = ModelConfig {
            spaces: SpaceSet::Triple,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg, 1).unwrap();
        let d = cfg.dims;
        assert_eq!(p.get("visual.global.w").unwrap().shape(), &[d.embed, d.c_global]);
        assert_eq!(p.get("attention.p.w").unwrap().shape(), &[d.attn_dim, d.grid_len()]);
        assert_eq!(p.get("attention.a.w").unwrap().shape(), &[d.cells(), d.attn_dim]);
        assert_eq!(p.get("text.action.w").unwrap().shape(), &[d.c_action, d.hidden]);
        assert_eq!(p.get("gate.w").unwrap().shape(), &[3, d.hidden]);
        assert!(!p.contains("gate.b"));
        assert!(p.get("lstm.f.b").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = ModelParams::init(&ModelConfig::default(), 7).unwrap();
        let w = p.get("lstm.input_i.w").unwrap();
        let bound = 1.0 / (w.shape()[1] as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn single_space_has_no_gate_or_sequential_params() {
        let cfg = ModelConfig {
            spaces: SpaceSet::Single,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg, 0).unwrap();
        assert!(!p.contains("gate.w"));
        assert!(p.names().all(|n| !n.starts_with("lstm") && !n.starts_with("attention")));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    }
}

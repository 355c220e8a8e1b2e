//! Sentence side: tokenization, frozen token vectors, GRU encoding and the
//! per-space affine projections `g_*(y) = W phi(y) + b`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::config::Space;
use crate::error::{Error, Result};
use crate::params::ParamVars;
use crate::tensor::Tensor;

/// Lowercases, splits on whitespace and strips ASCII punctuation.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .flat_map(|w| {
            w.split(|c: char| c.is_ascii_punctuation())
                .filter(|p| !p.is_empty())
                .map(str::to_lowercase)
                .collect::<Vec<_>>()
        })
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptySentence);
    }
    Ok(tokens)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OovPolicy {
    #[default]
    ZeroVector,
    HashedRandom,
}

/// Frozen token-vector table standing in for pre-trained word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Tensor,
    pub oov_policy: OovPolicy,
}

impl EmbeddingTable {
    /// `vectors` must be `[tokens.len(), E]`.
    pub fn new(tokens: Vec<String>, vectors: Tensor, oov_policy: OovPolicy) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] != tokens.len() {
            return Err(Error::Shape {
                op: "embedding_table",
                lhs: vectors.shape().to_vec(),
                rhs: vec![tokens.len()],
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Malformed(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            index,
            vectors,
            oov_policy,
        })
    }

    /// Table of unit-variance Gaussian vectors scaled by `1/sqrt(E)`.
    pub fn random(tokens: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let data = (0..tokens.len() * dim).map(|_| normal.sample(&mut rng)).collect();
        let vectors = Tensor::matrix(tokens.len(), dim, data)?;
        Self::new(tokens, vectors, OovPolicy::ZeroVector)
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let e = self.dim();
        &self.vectors.data()[i * e..(i + 1) * e]
    }

    fn oov_vector(&self, token: &str) -> Vec<f64> {
        match self.oov_policy {
            OovPolicy::ZeroVector => vec![0.0; self.dim()],
            OovPolicy::HashedRandom => hashed_vector(token, self.dim()),
        }
    }

    /// `[T, E]` token vectors; out-of-vocabulary tokens follow the policy.
    pub fn lookup<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim());
        for t in tokens {
            match self.index_of(t.as_ref()) {
                Some(i) => data.extend_from_slice(self.row(i)),
                None => data.extend(self.oov_vector(t.as_ref())),
            }
        }
        Tensor::matrix(tokens.len(), self.dim(), data)
    }

    /// Tokenizes and looks up free text. With the zero-vector policy a
    /// sentence made only of unknown tokens has no content and is rejected.
    pub fn encode_text(&self, text: &str) -> Result<Tensor> {
        let tokens = tokenize(text)?;
        let known = tokens.iter().any(|t| self.index_of(t).is_some());
        if !known && self.oov_policy == OovPolicy::ZeroVector {
            return Err(Error::AllOutOfVocabulary(text.to_string()));
        }
        self.lookup(&tokens)
    }

    pub fn lookup_indices(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::EmptySentence);
        }
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for &i in ids {
            let i = i as usize;
            if i >= self.len() {
                return Err(Error::Malformed(format!("token index {i} outside vocabulary")));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(ids.len(), self.dim(), data)
    }
}

/// Deterministic pseudo-random vector derived from the token bytes.
fn hashed_vector(token: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

/// GRU weights bound on a tape.
pub struct GruParams {
    input: [Var; 3],
    hidden: [Var; 3],
    bias: [Var; 3],
}

impl GruParams {
    pub fn bind(p: &ParamVars) -> Result<Self> {
        let three = |fmt: &dyn Fn(&str) -> String| -> Result<[Var; 3]> {
            Ok([p.get(&fmt("z"))?, p.get(&fmt("r"))?, p.get(&fmt("n"))?])
        };
        Ok(Self {
            input: three(&|g| format!("gru.input_{g}.w"))?,
            hidden: three(&|g| format!("gru.hidden_{g}.w"))?,
            bias: three(&|g| format!("gru.{g}.b"))?,
        })
    }
}

/// Runs the GRU over `[T, E]` token vectors from a zero state and returns the
/// final hidden state `phi(y)`.
///
/// ```text
/// z = sigmoid(Wz x + Uz h + bz)
/// r = sigmoid(Wr x + Ur h + br)
/// n = tanh(Wn x + Un (r * h) + bn)
/// h' = h + z * (n - h)
/// ```
pub fn gru_encode(tape: &mut Tape, tokens: &Tensor, gru: &GruParams) -> Result<Var> {
    if tokens.rank() != 2 || tokens.shape()[0] == 0 {
        return Err(Error::EmptySentence);
    }
    let hidden = tape.value(gru.hidden[0]).shape()[0];
    let e = tokens.shape()[1];
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    for row in tokens.data().chunks(e) {
        let x = tape.constant(Tensor::vector(row));
        let gate = |tape: &mut Tape, k: usize, h: Var| -> Result<Var> {
            let wx = tape.matvec(gru.input[k], x)?;
            let uh = tape.matvec(gru.hidden[k], h)?;
            let s = tape.add(wx, uh)?;
            tape.add(s, gru.bias[k])
        };
        let z_pre = gate(tape, 0, h)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = gate(tape, 1, h)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h)?;
        let n_pre = gate(tape, 2, rh)?;
        let n = tape.tanh(n_pre)?;
        let diff = tape.sub(n, h)?;
        let step = tape.mul(z, diff)?;
        h = tape.add(h, step)?;
    }
    Ok(h)
}

/// `g_space(y) = W phi + b` for the given space.
pub fn project_text(tape: &mut Tape, phi: Var, space: Space, p: &ParamVars) -> Result<Var> {
    let w = p.get(&format!("text.{space}.w"))?;
    let b = p.get(&format!("text.{space}.b"))?;
    tape.linear(w, phi, b)
}

/// Like [`project_text`] but selecting the space by name.
pub fn project_text_named(tape: &mut Tape, phi: Var, space: &str, p: &ParamVars) -> Result<Var> {
    project_text(tape, phi, space.parse()?, p)
}

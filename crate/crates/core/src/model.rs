//! The full multi-space model on one tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::aggregation::Fuser;
use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, Space};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamVars};
use crate::tensor::Tensor;
use crate::text::{gru_encode, project_text, GruParams};
use crate::visual::{
    chunk_sample, global_embed, sequential_embed_cached, AttentionParams, LstmParams, SampleMode,
    SequentialFrames, VideoFeature,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Stable 64-bit seed derived from a base seed and a label.
pub fn derive_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Frame indices feeding the global and the sequential head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSelection {
    pub global: Vec<usize>,
    pub sequential: Vec<usize>,
}

impl FrameSelection {
    /// Chunk-start frames for both heads.
    pub fn deterministic(frames: usize, n_chunks: usize) -> Self {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let first = chunk_sample(frames, n_chunks, SampleMode::First, &mut unused);
        Self {
            global: first.clone(),
            sequential: first,
        }
    }

    /// Random frame per chunk for the global head, drawn from a generator
    /// keyed by `(seed, epoch, video_id)`; chunk-start frames for the
    /// sequential head.
    pub fn for_training(frames: usize, n_chunks: usize, seed: u64, epoch: usize, video_id: &str) -> Self {
        let s = derive_seed(
            seed,
            &[b"frames", &(epoch as u64).to_le_bytes(), video_id.as_bytes()],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Self {
            global: chunk_sample(frames, n_chunks, SampleMode::Random, &mut rng),
            sequential: chunk_sample(frames, n_chunks, SampleMode::First, &mut unused),
        }
    }
}

pub struct SentenceNodes {
    pub phi: Var,
    /// Textual embedding per active space, in space-set order.
    pub text: Vec<Var>,
    /// Attention query `q`, when the sequential head uses attention.
    pub query: Option<Var>,
    pub weights: Var,
}

pub struct VideoNodes {
    pub global: Option<Var>,
    pub sequential: Option<SequentialFrames>,
    pub action: Option<Var>,
}

pub struct PairNodes {
    /// Similarity per active space, in space-set order.
    pub sims: Vec<Var>,
    pub fused: Var,
}

/// A model whose parameters are registered on a tape.
pub struct BoundModel<'m> {
    pub config: &'m ModelConfig,
    pub vars: ParamVars,
    gru: GruParams,
    attention: Option<AttentionParams>,
    lstm: Option<LstmParams>,
    fuser: Fuser,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn spaces(&self) -> &'static [Space] {
        self.config.spaces.spaces()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel<'_>> {
        let vars = self.params.bind(tape, trainable);
        self.with_vars(vars)
    }

    /// Builds the model over parameter handles that are already on a tape.
    pub fn with_vars(&self, vars: ParamVars) -> Result<BoundModel<'_>> {
        let seq = self.config.spaces.contains(Space::Sequential);
        let attention = if seq && self.config.attention {
            Some(AttentionParams::bind(&vars)?)
        } else {
            None
        };
        let lstm = if seq { Some(LstmParams::bind(&vars)?) } else { None };
        Ok(BoundModel {
            config: &self.config,
            gru: GruParams::bind(&vars)?,
            attention,
            lstm,
            fuser: Fuser::new(self.config.fuse_mode, self.spaces().len()),
            vars,
        })
    }

    /// Checks that the dataset provides every feature the model consumes.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let d = &self.config.dims;
        let f = &ds.dims;
        let mismatch = |what: &str, model: usize, data: usize| {
            Err(Error::Config(format!("{what}: model expects {model}, dataset has {data}")))
        };
        if f.c_global != d.c_global {
            return mismatch("c_global", d.c_global, f.c_global);
        }
        if f.token_dim != d.token_dim {
            return mismatch("token_dim", d.token_dim, f.token_dim);
        }
        if self.config.spaces.contains(Space::Sequential) {
            if !f.has_grid() {
                return Err(Error::SpaceUnavailable("sequential (no grid features)".into()));
            }
            if f.grid != d.grid || f.c_grid != d.c_grid {
                return mismatch("grid * c_grid", d.grid_len(), f.grid_len());
            }
        }
        if self.config.spaces.contains(Space::Action) {
            if !f.has_action() {
                return Err(Error::SpaceUnavailable("action (no action vectors)".into()));
            }
            if f.c_action != d.c_action {
                return mismatch("c_action", d.c_action, f.c_action);
            }
        }
        Ok(())
    }
}

impl<'m> BoundModel<'m> {
    pub fn spaces(&self) -> &'static [Space] {
        self.config.spaces.spaces()
    }

    pub fn attention(&self) -> Option<&AttentionParams> {
        self.attention.as_ref()
    }

    pub fn encode_sentence(&self, tape: &mut Tape, tokens: &Tensor) -> Result<SentenceNodes> {
        let phi = gru_encode(tape, tokens, &self.gru)?;
        let text = self
            .spaces()
            .iter()
            .map(|&s| project_text(tape, phi, s, &self.vars))
            .collect::<Result<Vec<_>>>()?;
        let query = match &self.attention {
            Some(att) => Some(att.sentence_query(tape, phi)?),
            None => None,
        };
        let weights = self.fuser.weights(tape, phi, &self.vars)?;
        Ok(SentenceNodes {
            phi,
            text,
            query,
            weights,
        })
    }

    pub fn encode_video(&self, tape: &mut Tape, video: &VideoFeature, frames: &FrameSelection) -> Result<VideoNodes> {
        let mut nodes = VideoNodes {
            global: None,
            sequential: None,
            action: None,
        };
        for &space in self.spaces() {
            match space {
                Space::Global => nodes.global = Some(global_embed(tape, video, &frames.global, &self.vars)?),
                Space::Sequential => {
                    nodes.sequential = Some(SequentialFrames::prepare(
                        tape,
                        video,
                        &frames.sequential,
                        self.attention.as_ref(),
                    )?)
                }
                Space::Action => {
                    let a = crate::visual::action_embed(video)?;
                    nodes.action = Some(tape.constant(a));
                }
            }
        }
        Ok(nodes)
    }

    pub fn pair(&self, tape: &mut Tape, video: &VideoNodes, sentence: &SentenceNodes) -> Result<PairNodes> {
        let mut sims = Vec::with_capacity(self.spaces().len());
        for (k, &space) in self.spaces().iter().enumerate() {
            let visual = match space {
                Space::Global => video.global,
                Space::Action => video.action,
                Space::Sequential => {
                    let frames = video.sequential.as_ref();
                    let lstm = self.lstm.as_ref();
                    match (frames, lstm) {
                        (Some(frames), Some(lstm)) => {
                            let att = self.attention.as_ref().zip(sentence.query);
                            Some(sequential_embed_cached(tape, frames, att, lstm)?)
                        }
                        _ => None,
                    }
                }
            }
            .ok_or_else(|| Error::SpaceUnavailable(space.name().into()))?;
            sims.push(tape.cosine(visual, sentence.text[k])?);
        }
        let fused = self.fuser.fuse(tape, &sims, sentence.weights)?;
        Ok(PairNodes { sims, fused })
    }
}

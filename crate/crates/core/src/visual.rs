//! Video side: frame sampling, the global head, the sentence-conditioned
//! spatial attention + LSTM sequential head, and the frozen action vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamVars;
use crate::tensor::Tensor;

/// Precomputed features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeature {
    pub id: String,
    /// `[F, C_g]`
    pub global_frames: Tensor,
    /// `[F, G, G, C_s]`, absent when the container has no grid section.
    pub grid_frames: Option<Tensor>,
    /// `[C_a]`, absent when the container has no action section.
    pub action: Option<Tensor>,
}

impl VideoFeature {
    pub fn frames(&self) -> usize {
        self.global_frames.shape()[0]
    }

    /// One flattened `[G, G, C_s]` grid frame (row-major: g1, g2, channel).
    pub fn grid_frame(&self, t: usize) -> Result<Tensor> {
        let grid = self
            .grid_frames
            .as_ref()
            .ok_or_else(|| Error::SpaceUnavailable("sequential".into()))?;
        let shape = &grid.shape()[1..];
        let n: usize = shape.iter().product();
        Ok(Tensor::from_parts(
            shape.to_vec(),
            grid.data()[t * n..(t + 1) * n].to_vec(),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Uniformly random frame inside each chunk.
    Random,
    /// First frame of each chunk.
    First,
}

/// Picks one frame index per chunk.
///
/// Chunk `i` starts at `floor(i * F / n)` and always contains at least its
/// start frame, so short videos repeat frames in order.
pub fn chunk_sample<R: Rng + ?Sized>(
    frames: usize,
    n_chunks: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Vec<usize> {
    assert!(frames >= 1 && n_chunks >= 1, "need at least one frame and chunk");
    (0..n_chunks)
        .map(|i| {
            let start = i * frames / n_chunks;
            let end = ((i + 1) * frames / n_chunks).max(start + 1);
            match mode {
                SampleMode::First => start,
                SampleMode::Random => rng.gen_range(start..end),
            }
        })
        .collect()
}

fn check_indices(video: &VideoFeature, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::Empty("frame indices"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= video.frames()) {
        return Err(Error::Malformed(format!(
            "frame index {bad} out of range for video `{}` with {} frames",
            video.id,
            video.frames()
        )));
    }
    Ok(())
}

/// `f_g(x) = W_g mean(selected frames) + b_g`
pub fn global_embed(
    tape: &mut Tape,
    video: &VideoFeature,
    indices: &[usize],
    p: &ParamVars,
) -> Result<Var> {
    check_indices(video, indices)?;
    let c = video.global_frames.shape()[1];
    let mut rows = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        rows.extend_from_slice(&video.global_frames.data()[i * c..(i + 1) * c]);
    }
    let selected = tape.constant(Tensor::matrix(indices.len(), c, rows)?);
    let pooled = tape.mean_over_axis(selected, 0)?;
    tape.linear(p.get("visual.global.w")?, pooled, p.get("visual.global.b")?)
}

pub struct AttentionParams {
    pub w_p: Var,
    pub b_p: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub w_a: Var,
    pub b_a: Var,
}

impl AttentionParams {
    pub fn bind(p: &ParamVars) -> Result<Self> {
        Ok(Self {
            w_p: p.get("attention.p.w")?,
            b_p: p.get("attention.p.b")?,
            w_q: p.get("attention.q.w")?,
            b_q: p.get("attention.q.b")?,
            w_a: p.get("attention.a.w")?,
            b_a: p.get("attention.a.b")?,
        })
    }

    /// `p = tanh(W_p flatten(grid) + b_p)`, depends only on the frame.
    pub fn frame_key(&self, tape: &mut Tape, grid_frame: Var) -> Result<Var> {
        let n = tape.value(grid_frame).len();
        let flat = tape.reshape(grid_frame, &[n])?;
        let pre = tape.linear(self.w_p, flat, self.b_p)?;
        tape.tanh(pre)
    }

    /// `q = tanh(W_q phi + b_q)`, depends only on the sentence.
    pub fn sentence_query(&self, tape: &mut Tape, phi: Var) -> Result<Var> {
        let pre = tape.linear(self.w_q, phi, self.b_q)?;
        tape.tanh(pre)
    }

    /// Attention logits `tanh(W_a (p + q) + b_a)` over the flattened grid.
    pub fn logits(&self, tape: &mut Tape, key: Var, query: Var) -> Result<Var> {
        let pq = tape.add(key, query)?;
        let pre = tape.linear(self.w_a, pq, self.b_a)?;
        tape.tanh(pre)
    }

    /// Attention map `[G, G]` and attended feature `[G, G, C_s]` from cached
    /// key and query.
    pub fn attend(&self, tape: &mut Tape, grid_frame: Var, key: Var, query: Var) -> Result<(Var, Var)> {
        let shape = tape.value(grid_frame).shape().to_vec();
        if shape.len() != 3 || shape[0] != shape[1] {
            return Err(Error::Shape {
                op: "spatial_attention",
                lhs: shape,
                rhs: vec![],
            });
        }
        let logits = self.logits(tape, key, query)?;
        let flat = tape.softmax(logits)?;
        let a = tape.reshape(flat, &shape[..2])?;
        let attended = tape.channel_scale(grid_frame, a)?;
        Ok((a, attended))
    }
}

/// Sentence-conditioned attention over one `[G, G, C_s]` frame.
pub fn spatial_attention(
    tape: &mut Tape,
    grid_frame: Var,
    phi: Var,
    params: &AttentionParams,
) -> Result<(Var, Var)> {
    let key = params.frame_key(tape, grid_frame)?;
    let query = params.sentence_query(tape, phi)?;
    params.attend(tape, grid_frame, key, query)
}

/// Four-gate LSTM weights.
pub struct LstmParams {
    input: [Var; 4],
    hidden: [Var; 4],
    bias: [Var; 4],
}

impl LstmParams {
    pub fn bind(p: &ParamVars) -> Result<Self> {
        let four = |fmt: &dyn Fn(&str) -> String| -> Result<[Var; 4]> {
            Ok([
                p.get(&fmt("i"))?,
                p.get(&fmt("f"))?,
                p.get(&fmt("g"))?,
                p.get(&fmt("o"))?,
            ])
        };
        Ok(Self {
            input: four(&|g| format!("lstm.input_{g}.w"))?,
            hidden: four(&|g| format!("lstm.hidden_{g}.w"))?,
            bias: four(&|g| format!("lstm.{g}.b"))?,
        })
    }

    pub fn hidden_size(&self, tape: &Tape) -> usize {
        tape.value(self.hidden[0]).shape()[0]
    }

    /// Runs the LSTM from a zero state; returns the last hidden state.
    ///
    /// ```text
    /// i = sigmoid(Wi x + Ui h + bi)    f = sigmoid(Wf x + Uf h + bf)
    /// g = tanh(Wg x + Ug h + bg)       o = sigmoid(Wo x + Uo h + bo)
    /// c' = f * c + i * g               h' = o * tanh(c')
    /// ```
    pub fn run(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Empty("lstm inputs"));
        }
        let n = self.hidden_size(tape);
        let mut h = tape.constant(Tensor::zeros(&[n]));
        let mut c = tape.constant(Tensor::zeros(&[n]));
        for &x in inputs {
            let mut pre = [h; 4];
            for (k, slot) in pre.iter_mut().enumerate() {
                let wx = tape.matvec(self.input[k], x)?;
                let uh = tape.matvec(self.hidden[k], h)?;
                let s = tape.add(wx, uh)?;
                *slot = tape.add(s, self.bias[k])?;
            }
            let i = tape.sigmoid(pre[0])?;
            let f = tape.sigmoid(pre[1])?;
            let g = tape.tanh(pre[2])?;
            let o = tape.sigmoid(pre[3])?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c)?;
            h = tape.mul(o, squashed)?;
        }
        Ok(h)
    }
}

/// Per-frame nodes of the sequential head that do not depend on the sentence.
pub struct SequentialFrames {
    pub grids: Vec<Var>,
    pub keys: Vec<Var>,
}

impl SequentialFrames {
    /// Puts the selected grid frames on the tape and, with attention on,
    /// computes each frame's key `p`.
    pub fn prepare(
        tape: &mut Tape,
        video: &VideoFeature,
        indices: &[usize],
        attention: Option<&AttentionParams>,
    ) -> Result<Self> {
        check_indices(video, indices)?;
        let mut grids = Vec::with_capacity(indices.len());
        let mut keys = Vec::new();
        for &t in indices {
            let g = tape.constant(video.grid_frame(t)?);
            if let Some(att) = attention {
                keys.push(att.frame_key(tape, g)?);
            }
            grids.push(g);
        }
        Ok(Self { grids, keys })
    }
}

/// `f_s(x) = LSTM(psi_a(x))` with per-frame attention driven by the sentence
/// query `q`. With `attention = None` every cell is weighted `1/G^2`.
pub fn sequential_embed_cached(
    tape: &mut Tape,
    frames: &SequentialFrames,
    attention: Option<(&AttentionParams, Var)>,
    lstm: &LstmParams,
) -> Result<Var> {
    let mut inputs = Vec::with_capacity(frames.grids.len());
    for (t, &grid) in frames.grids.iter().enumerate() {
        let attended = match attention {
            Some((att, query)) => att.attend(tape, grid, frames.keys[t], query)?.1,
            None => {
                let shape = tape.value(grid).shape().to_vec();
                let cells = (shape[0] * shape[1]) as f64;
                tape.affine(grid, 1.0 / cells, 0.0)?
            }
        };
        let n = tape.value(attended).len();
        inputs.push(tape.reshape(attended, &[n])?);
    }
    lstm.run(tape, &inputs)
}

/// Sequential embedding of one video for one sentence representation `phi`.
pub fn sequential_embed(
    tape: &mut Tape,
    video: &VideoFeature,
    indices: &[usize],
    phi: Var,
    p: &ParamVars,
) -> Result<Var> {
    let att = AttentionParams::bind(p)?;
    let lstm = LstmParams::bind(p)?;
    let frames = SequentialFrames::prepare(tape, video, indices, Some(&att))?;
    let query = att.sentence_query(tape, phi)?;
    sequential_embed_cached(tape, &frames, Some((&att, query)), &lstm)
}

/// `f_e(x)`: the stored action vector, used as-is.
pub fn action_embed(video: &VideoFeature) -> Result<Tensor> {
    video
        .action
        .clone()
        .ok_or_else(|| Error::SpaceUnavailable(format!("action (video `{}`)", video.id)))
}

/// Cosine similarity between a visual and a textual embedding.
pub fn space_similarity(tape: &mut Tape, f: Var, g: Var) -> Result<Var> {
    tape.cosine(f, g)
}

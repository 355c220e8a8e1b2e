//! Feature containers, checkpoints, split manifests and the planted-signal
//! dataset generator.

pub mod checkpoint;
pub mod container;
pub mod manifest;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::EmbeddingTable;
use crate::visual::VideoFeature;

/// Per-video feature sizes shared by every video in a container. A zero
/// dimension means the corresponding section is absent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FeatureDims {
    pub frames: usize,
    pub grid: usize,
    pub c_global: usize,
    pub c_grid: usize,
    pub c_action: usize,
    pub token_dim: usize,
}

impl FeatureDims {
    pub fn has_grid(&self) -> bool {
        self.grid > 0 && self.c_grid > 0
    }

    pub fn has_action(&self) -> bool {
        self.c_action > 0
    }

    pub fn grid_len(&self) -> usize {
        self.grid * self.grid * self.c_grid
    }
}

/// A sentence as token indices into the dataset's embedding table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    /// Index of the described video in [`Dataset::videos`].
    pub video: usize,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: FeatureDims,
    pub videos: Vec<VideoFeature>,
    pub table: Option<EmbeddingTable>,
    pub sentences: Vec<Sentence>,
}

impl Dataset {
    pub fn empty(dims: FeatureDims) -> Self {
        Self {
            dims,
            videos: Vec::new(),
            table: None,
            sentences: Vec::new(),
        }
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.id == id)
    }

    pub fn table(&self) -> Result<&EmbeddingTable> {
        self.table
            .as_ref()
            .ok_or_else(|| Error::Malformed("dataset has no embedding table".into()))
    }

    /// `[T, E]` token vectors for sentence `id`.
    pub fn sentence_tokens(&self, id: usize) -> Result<Tensor> {
        let s = self
            .sentences
            .get(id)
            .ok_or_else(|| Error::Malformed(format!("sentence {id} out of range")))?;
        self.table()?.lookup_indices(&s.tokens)
    }

    /// Checks every video and sentence against the header dimensions.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let bad = |msg: String| Err(Error::Malformed(msg));
        for v in &self.videos {
            if d.frames == 0 || d.c_global == 0 {
                return bad("videos need frames > 0 and c_global > 0".into());
            }
            if v.global_frames.shape() != [d.frames, d.c_global] {
                return bad(format!("video `{}` global frames {:?}", v.id, v.global_frames.shape()));
            }
            match (&v.grid_frames, d.has_grid()) {
                (Some(g), true) if g.shape() == [d.frames, d.grid, d.grid, d.c_grid] => {}
                (None, false) => {}
                _ => return bad(format!("video `{}` grid frames disagree with header", v.id)),
            }
            match (&v.action, d.has_action()) {
                (Some(a), true) if a.shape() == [d.c_action] => {}
                (None, false) => {}
                _ => return bad(format!("video `{}` action vector disagrees with header", v.id)),
            }
        }
        let vocab = self.table.as_ref().map_or(0, |t| t.len());
        if let Some(t) = &self.table {
            if t.dim() != d.token_dim {
                return bad(format!("token dim {} != header {}", t.dim(), d.token_dim));
            }
        }
        for (i, s) in self.sentences.iter().enumerate() {
            if s.video >= self.videos.len() {
                return bad(format!("sentence {i} refers to missing video {}", s.video));
            }
            if s.tokens.is_empty() {
                return bad(format!("sentence {i} is empty"));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= vocab) {
                return bad(format!("sentence {i} token {t} outside vocabulary of {vocab}"));
            }
        }
        Ok(())
    }
}

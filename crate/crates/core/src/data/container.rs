//! Binary feature container.
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! "MVSE"  u16 version  u16 kind (=1)
//! u32 videos  u32 frames  u32 grid  u32 c_global  u32 c_grid  u32 c_action
//! u32 vocab   u32 token_dim  u32 sentences  u32 flags (bit 0: hashed OOV)
//! video ids        videos x (u32 len, utf-8)
//! global_frames    videos*frames*c_global f32
//! grid_frames      videos*frames*grid*grid*c_grid f32   (omitted if grid*c_grid == 0)
//! action_vecs      videos*c_action f32                  (omitted if c_action == 0)
//! embedding_table  vocab x (u32 len, utf-8), then vocab*token_dim f32
//! sentences        sentences x (u32 video, u32 len, len x u32 token)
//! ```
//!
//! Floats are 32-bit on disk and widened to `f64` on read; writing narrows
//! them back, so `write(read(bytes)) == bytes`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{EmbeddingTable, OovPolicy};
use crate::visual::VideoFeature;

use super::{Dataset, FeatureDims, Sentence};

pub const MAGIC: &[u8; 4] = b"MVSE";
pub const VERSION: u16 = 1;
pub const KIND_FEATURES: u16 = 1;
pub const KIND_CHECKPOINT: u16 = 2;

const FLAG_HASHED_OOV: u32 = 1;

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: u16) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&kind.to_le_bytes());
        Self { buf }
    }

    pub fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("{v} exceeds u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    pub fn f32s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }

    pub fn f64s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, version and kind.
    pub fn open(bytes: &'a [u8], kind: u16) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Self { bytes, pos: 4 };
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let found = r.u16("kind")?;
        if found != kind {
            return Err(Error::Kind {
                found,
                expected: kind,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Malformed(format!("{what}: invalid utf-8")))
    }

    pub fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(4).ok_or(Error::Truncated(what))?;
        let b = self.take(bytes, what)?;
        Ok(b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or(Error::Truncated(what))?;
        let b = self.take(bytes, what)?;
        Ok(b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(Error::TrailingBytes(n)),
        }
    }
}

pub fn write_container(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let d = &ds.dims;
    let mut w = Writer::new(KIND_FEATURES);
    let vocab = ds.table.as_ref().map_or(0, |t| t.len());
    let flags = match ds.table.as_ref().map(|t| t.oov_policy) {
        Some(OovPolicy::HashedRandom) => FLAG_HASHED_OOV,
        _ => 0,
    };
    for v in [
        ds.videos.len(),
        d.frames,
        d.grid,
        d.c_global,
        d.c_grid,
        d.c_action,
        vocab,
        d.token_dim,
        ds.sentences.len(),
        flags as usize,
    ] {
        w.u32(v)?;
    }
    for v in &ds.videos {
        w.str(&v.id)?;
    }
    for v in &ds.videos {
        w.f32s(v.global_frames.data());
    }
    if d.has_grid() {
        for v in &ds.videos {
            w.f32s(v.grid_frames.as_ref().expect("validated").data());
        }
    }
    if d.has_action() {
        for v in &ds.videos {
            w.f32s(v.action.as_ref().expect("validated").data());
        }
    }
    if let Some(t) = &ds.table {
        for tok in t.tokens() {
            w.str(tok)?;
        }
        w.f32s(t.vectors().data());
    }
    for s in &ds.sentences {
        w.u32(s.video)?;
        w.u32(s.tokens.len())?;
        for &t in &s.tokens {
            w.u32(t as usize)?;
        }
    }
    Ok(w.buf)
}

pub fn read_container(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, KIND_FEATURES)?;
    let videos = r.u32("header")?;
    let dims = FeatureDims {
        frames: r.u32("header")?,
        grid: r.u32("header")?,
        c_global: r.u32("header")?,
        c_grid: r.u32("header")?,
        c_action: r.u32("header")?,
        token_dim: 0,
    };
    let vocab = r.u32("header")?;
    let dims = FeatureDims {
        token_dim: r.u32("header")?,
        ..dims
    };
    let sentences = r.u32("header")?;
    let flags = r.u32("header")? as u32;
    if videos > 0 && (dims.frames == 0 || dims.c_global == 0) {
        return Err(Error::Malformed("videos need frames > 0 and c_global > 0".into()));
    }
    if vocab > 0 && dims.token_dim == 0 {
        return Err(Error::Malformed("vocabulary needs token_dim > 0".into()));
    }

    let ids = (0..videos)
        .map(|_| r.str("video ids"))
        .collect::<Result<Vec<_>>>()?;
    let per_global = dims.frames * dims.c_global;
    let global = r.f32s(videos * per_global, "global_frames")?;
    let per_grid = dims.frames * dims.grid_len();
    let grid = if dims.has_grid() {
        Some(r.f32s(videos * per_grid, "grid_frames")?)
    } else {
        None
    };
    let action = if dims.has_action() {
        Some(r.f32s(videos * dims.c_action, "action_vecs")?)
    } else {
        None
    };
    let table = if vocab > 0 {
        let tokens = (0..vocab)
            .map(|_| r.str("embedding_table"))
            .collect::<Result<Vec<_>>>()?;
        let vectors = Tensor::matrix(vocab, dims.token_dim, r.f32s(vocab * dims.token_dim, "embedding_table")?)?;
        let policy = if flags & FLAG_HASHED_OOV != 0 {
            OovPolicy::HashedRandom
        } else {
            OovPolicy::ZeroVector
        };
        Some(EmbeddingTable::new(tokens, vectors, policy)?)
    } else {
        None
    };
    let mut sents = Vec::with_capacity(sentences);
    for _ in 0..sentences {
        let video = r.u32("sentences")?;
        let len = r.u32("sentences")?;
        let tokens = (0..len)
            .map(|_| r.u32("sentences").map(|t| t as u32))
            .collect::<Result<Vec<_>>>()?;
        sents.push(Sentence { video, tokens });
    }
    r.finish()?;

    let videos = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            Ok(VideoFeature {
                id,
                global_frames: Tensor::matrix(
                    dims.frames,
                    dims.c_global,
                    global[i * per_global..(i + 1) * per_global].to_vec(),
                )?,
                grid_frames: grid
                    .as_ref()
                    .map(|g| {
                        Tensor::new(
                            vec![dims.frames, dims.grid, dims.grid, dims.c_grid],
                            g[i * per_grid..(i + 1) * per_grid].to_vec(),
                        )
                    })
                    .transpose()?,
                action: action
                    .as_ref()
                    .map(|a| Tensor::vector(&a[i * dims.c_action..(i + 1) * dims.c_action])),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        dims,
        videos,
        table,
        sentences: sents,
    };
    ds.validate()?;
    Ok(ds)
}

/// Rounds every value to the nearest `f32`, making a dataset exactly
/// representable in the container.
pub fn quantize(xs: &mut [f64]) {
    for x in xs {
        *x = *x as f32 as f64;
    }
}

//! Planted-correlation dataset generator.
//!
//! Each video gets a latent code: `slots` discrete attributes, each taking one
//! of `values` values, with every video's code distinct. The signal split
//! assigns each slot to one visual source:
//!
//! * global slots are summed into every global frame as random code vectors,
//! * sequential slots are written into the grid frames one slot per segment of
//!   the timeline, using code vectors shared by all slots, so only the frame
//!   order tells which slot holds which value,
//! * action slots are summed into the action vector.
//!
//! Sentences spell out slot values with one token per `(slot, value)`, in slot
//! order, optionally interleaved with filler tokens. With
//! [`SentenceKeying::PerSpace`] sentence `j` of a video only mentions the
//! slots of one source, cycling over the sources that carry signal.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::Space;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::EmbeddingTable;
use crate::visual::VideoFeature;

use super::container::quantize;
use super::manifest::{Manifest, Split, SplitEntry};
use super::{Dataset, FeatureDims, Sentence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SentenceKeying {
    /// Every sentence mentions every slot.
    #[default]
    All,
    /// Sentence `j` mentions only the slots of the `j`-th signal-bearing source.
    PerSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames: usize,
    pub grid: usize,
    pub c_global: usize,
    pub c_grid: usize,
    pub c_action: usize,
    pub token_dim: usize,
    pub videos: usize,
    pub sentences_per_video: usize,
    /// Trailing videos held out as the `test` split.
    pub test_videos: usize,
    /// Share of latent slots carried by (global, sequential, action).
    pub split: [f64; 3],
    pub noise: f64,
    pub seed: u64,
    pub slots: usize,
    pub values: usize,
    pub keying: SentenceKeying,
    pub filler_tokens: usize,
    /// Probability of a filler token before each content token.
    pub filler_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            grid: 2,
            c_global: 32,
            c_grid: 32,
            c_action: 16,
            token_dim: 8,
            videos: 200,
            sentences_per_video: 2,
            test_videos: 50,
            split: [1.0, 0.0, 0.0],
            noise: 0.05,
            seed: 0,
            slots: 4,
            values: 6,
            keying: SentenceKeying::All,
            filler_tokens: 4,
            filler_rate: 0.0,
        }
    }
}

/// Generative ground truth kept alongside a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedTruth {
    /// Source carrying each slot.
    pub slot_space: Vec<Space>,
    /// Slot values per video.
    pub latent: Vec<Vec<usize>>,
    /// Global code vector per `(slot, value)`, `None` for non-global slots.
    pub global_codes: Vec<Option<Vec<Vec<f64>>>>,
    /// Slots mentioned by each sentence.
    pub sentence_slots: Vec<Vec<usize>>,
}

impl PlantedTruth {
    pub fn slots_of(&self, space: Space) -> Vec<usize> {
        (0..self.slot_space.len())
            .filter(|&k| self.slot_space[k] == space)
            .collect()
    }

    /// Noise-free mean global feature implied by slot values.
    pub fn expected_global(&self, values: &[usize]) -> Vec<f64> {
        let global = self.slots_of(Space::Global);
        let dim = global
            .first()
            .and_then(|&k| self.global_codes[k].as_ref())
            .map_or(0, |c| c[0].len());
        let mut out = vec![0.0; dim];
        let scale = 1.0 / (global.len().max(1) as f64).sqrt();
        for &k in &global {
            let code = &self.global_codes[k].as_ref().expect("global slot")[values[k]];
            for (o, c) in out.iter_mut().zip(code) {
                *o += c * scale;
            }
        }
        out
    }
}

pub struct SynthOutput {
    pub dataset: Dataset,
    pub manifest: Manifest,
    pub truth: PlantedTruth,
}

/// Splits `slots` across sources in proportion to `split` (largest
/// remainder, earlier sources win ties).
fn apportion(split: [f64; 3], slots: usize) -> [usize; 3] {
    let exact: Vec<f64> = split.iter().map(|r| r * slots as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut left = slots - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for k in order {
        if left == 0 {
            break;
        }
        if split[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.split.iter().any(|&r| !(r >= 0.0)) || (cfg.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "signal split {:?} must be non-negative and sum to 1",
            cfg.split
        )));
    }
    if cfg.videos < 2 {
        return Err(Error::Config("need at least 2 videos".into()));
    }
    if cfg.test_videos > cfg.videos {
        return Err(Error::Config("test_videos exceeds videos".into()));
    }
    if cfg.frames == 0 || cfg.c_global == 0 || cfg.token_dim == 0 || cfg.sentences_per_video == 0 {
        return Err(Error::Config("frames, c_global, token_dim and sentences must be positive".into()));
    }
    if cfg.slots == 0 || cfg.values < 2 {
        return Err(Error::Config("need slots >= 1 and values >= 2".into()));
    }
    if !(0.0..=1.0).contains(&cfg.filler_rate) || (cfg.filler_rate > 0.0 && cfg.filler_tokens == 0) {
        return Err(Error::Config("filler_rate must be in [0, 1] with filler tokens available".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Config("noise must be >= 0".into()));
    }
    let combos = (cfg.values as f64).powi(cfg.slots as i32);
    if combos < cfg.videos as f64 {
        return Err(Error::Config(format!(
            "{} videos need distinct codes but only {combos} exist",
            cfg.videos
        )));
    }
    let counts = apportion(cfg.split, cfg.slots);
    let has_grid = cfg.grid > 0 && cfg.c_grid > 0;
    if counts[1] > 0 && !has_grid {
        return Err(Error::Config("sequential signal needs grid features".into()));
    }
    if counts[2] > 0 && cfg.c_action == 0 {
        return Err(Error::Config("action signal needs c_action > 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let slot_space: Vec<Space> = Space::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&s, n)| std::iter::repeat(s).take(n))
        .collect();

    // Distinct latent codes.
    let mut seen = HashSet::new();
    let mut latent = Vec::with_capacity(cfg.videos);
    while latent.len() < cfg.videos {
        let code: Vec<usize> = (0..cfg.slots).map(|_| rng.gen_range(0..cfg.values)).collect();
        if seen.insert(code.clone()) {
            latent.push(code);
        }
    }

    let global_codes: Vec<Option<Vec<Vec<f64>>>> = slot_space
        .iter()
        .map(|&s| {
            (s == Space::Global).then(|| {
                (0..cfg.values)
                    .map(|_| gaussian_vec(&mut rng, cfg.c_global))
                    .collect()
            })
        })
        .collect();
    let grid_len = cfg.grid * cfg.grid * cfg.c_grid;
    let grid_codes: Vec<Vec<f64>> = (0..cfg.values)
        .map(|_| gaussian_vec(&mut rng, grid_len))
        .collect();
    let action_codes: Vec<Option<Vec<Vec<f64>>>> = slot_space
        .iter()
        .map(|&s| {
            (s == Space::Action).then(|| {
                (0..cfg.values)
                    .map(|_| gaussian_vec(&mut rng, cfg.c_action))
                    .collect()
            })
        })
        .collect();

    let tokens: Vec<String> = (0..cfg.slots)
        .flat_map(|k| (0..cfg.values).map(move |v| format!("s{k}v{v}")))
        .chain((0..cfg.filler_tokens).map(|f| format!("filler{f}")))
        .collect();
    let mut table = EmbeddingTable::random(tokens.clone(), cfg.token_dim, rng.gen())?;
    let mut vectors = table.vectors().clone();
    quantize(vectors.data_mut());
    table = EmbeddingTable::new(tokens, vectors, table.oov_policy)?;

    let noise = Normal::new(0.0, 1.0).expect("valid std");
    let seq_slots: Vec<usize> = (0..cfg.slots).filter(|&k| slot_space[k] == Space::Sequential).collect();
    let global_slots: Vec<usize> = (0..cfg.slots).filter(|&k| slot_space[k] == Space::Global).collect();
    let action_slots: Vec<usize> = (0..cfg.slots).filter(|&k| slot_space[k] == Space::Action).collect();
    let signal_sources: Vec<&Vec<usize>> = [&global_slots, &seq_slots, &action_slots]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();

    let mut videos = Vec::with_capacity(cfg.videos);
    let mut sentences = Vec::new();
    let mut sentence_slots = Vec::new();
    for (i, code) in latent.iter().enumerate() {
        let mut global = Vec::with_capacity(cfg.frames * cfg.c_global);
        let gscale = 1.0 / (global_slots.len().max(1) as f64).sqrt();
        for _ in 0..cfg.frames {
            for c in 0..cfg.c_global {
                let signal: f64 = global_slots
                    .iter()
                    .map(|&k| global_codes[k].as_ref().unwrap()[code[k]][c] * gscale)
                    .sum();
                global.push(signal + cfg.noise * noise.sample(&mut rng));
            }
        }
        quantize(&mut global);

        let grid_frames = if has_grid {
            let mut grid = Vec::with_capacity(cfg.frames * grid_len);
            for t in 0..cfg.frames {
                let slot = (!seq_slots.is_empty()).then(|| seq_slots[t * seq_slots.len() / cfg.frames]);
                for c in 0..grid_len {
                    let signal = slot.map_or(0.0, |k| grid_codes[code[k]][c]);
                    grid.push(signal + cfg.noise * noise.sample(&mut rng));
                }
            }
            quantize(&mut grid);
            Some(Tensor::new(vec![cfg.frames, cfg.grid, cfg.grid, cfg.c_grid], grid)?)
        } else {
            None
        };

        let action = if cfg.c_action > 0 {
            let ascale = 1.0 / (action_slots.len().max(1) as f64).sqrt();
            let mut a: Vec<f64> = (0..cfg.c_action)
                .map(|c| {
                    let signal: f64 = action_slots
                        .iter()
                        .map(|&k| action_codes[k].as_ref().unwrap()[code[k]][c] * ascale)
                        .sum();
                    signal + cfg.noise * noise.sample(&mut rng)
                })
                .collect();
            quantize(&mut a);
            Some(Tensor::vector(&a))
        } else {
            None
        };

        videos.push(VideoFeature {
            id: format!("video{i:04}"),
            global_frames: Tensor::matrix(cfg.frames, cfg.c_global, global)?,
            grid_frames,
            action,
        });

        for j in 0..cfg.sentences_per_video {
            let mentioned: Vec<usize> = match cfg.keying {
                SentenceKeying::All => (0..cfg.slots).collect(),
                SentenceKeying::PerSpace => signal_sources[j % signal_sources.len()].clone(),
            };
            let mut toks = Vec::new();
            for &k in &mentioned {
                if cfg.filler_rate > 0.0 && rng.gen_bool(cfg.filler_rate) {
                    let f = rng.gen_range(0..cfg.filler_tokens);
                    toks.push((cfg.slots * cfg.values + f) as u32);
                }
                toks.push((k * cfg.values + code[k]) as u32);
            }
            sentences.push(Sentence { video: i, tokens: toks });
            sentence_slots.push(mentioned);
        }
    }

    let dims = FeatureDims {
        frames: cfg.frames,
        grid: if has_grid { cfg.grid } else { 0 },
        c_global: cfg.c_global,
        c_grid: if has_grid { cfg.c_grid } else { 0 },
        c_action: cfg.c_action,
        token_dim: cfg.token_dim,
    };
    let dataset = Dataset {
        dims,
        videos,
        table: Some(table),
        sentences,
    };
    dataset.validate()?;

    let entry = |i: usize| SplitEntry {
        video_id: dataset.videos[i].id.clone(),
        sentence_ids: (0..cfg.sentences_per_video)
            .map(|j| i * cfg.sentences_per_video + j)
            .collect(),
    };
    let n_train = cfg.videos - cfg.test_videos;
    let manifest = Manifest {
        splits: vec![
            Split {
                name: "train".into(),
                entries: (0..n_train).map(entry).collect(),
            },
            Split {
                name: "test".into(),
                entries: (n_train..cfg.videos).map(entry).collect(),
            },
        ],
    };

    Ok(SynthOutput {
        dataset,
        manifest,
        truth: PlantedTruth {
            slot_space,
            latent,
            global_codes,
            sentence_slots,
        },
    })
}

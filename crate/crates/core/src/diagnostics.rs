//! Finite-difference checks of every model head and of the full objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{Dims, ModelConfig, NegativeMode, Space, SpaceSet, TripletConfig};
use crate::data::synth::{synth_generate, SynthConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_many, CoordSample};
use crate::model::{BoundModel, FrameSelection, Model};
use crate::params::ParamVars;
use crate::training::{batch_loss, Pair};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Minimum distance of every hinge from its kink at a probe point.
const MIN_SLACK: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub rows: Vec<CheckRow>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_error < GRADCHECK_TOLERANCE)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let verdict = if r.max_error < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
            out.push_str(&format!("{:<28}{:>12.3e}  {verdict}\n", r.name, r.max_error));
        }
        out
    }
}

/// Max relative error of `f` with respect to the parameters whose names
/// start with any of `prefixes`; every other parameter is held constant.
fn check_params<F>(model: &Model, prefixes: &[&str], sample: CoordSample, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &BoundModel<'_>) -> Result<Var>,
{
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(Error::MissingParam(prefixes.join(",")));
    }
    let inputs = names
        .iter()
        .map(|n| model.params.get(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    let errs = grad_check_many(
        |tape, vars| {
            let mut handles = Vec::with_capacity(model.params.len());
            for (name, t) in model.params.iter() {
                let v = match names.iter().position(|n| n == name) {
                    Some(k) => vars[k],
                    None => tape.constant(t.clone()),
                };
                handles.push((name.to_string(), v));
            }
            let bound = model.with_vars(ParamVars::from_vars(handles))?;
            f(tape, &bound)
        },
        &inputs,
        EPS,
        Some(sample),
    )?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Similarity of video 0 and sentence 0 in one space.
fn space_sim(ds: &Dataset, space: Space) -> impl Fn(&mut Tape, &BoundModel<'_>) -> Result<Var> + '_ {
    move |tape, m| {
        let k = m
            .spaces()
            .iter()
            .position(|&s| s == space)
            .ok_or_else(|| Error::SpaceUnavailable(space.name().into()))?;
        let video = &ds.videos[0];
        let frames = FrameSelection::deterministic(video.frames(), m.config.dims.n_chunks);
        let v = m.encode_video(tape, video, &frames)?;
        let s = m.encode_sentence(tape, &ds.sentence_tokens(0)?)?;
        Ok(m.pair(tape, &v, &s)?.sims[k])
    }
}

/// Spatial attention output, projected onto fixed random directions.
fn attention_probe(ds: &Dataset, seed: u64) -> impl Fn(&mut Tape, &BoundModel<'_>) -> Result<Var> + '_ {
    move |tape, m| {
        let att = m.attention().ok_or_else(|| Error::SpaceUnavailable("attention".into()))?;
        let video = &ds.videos[0];
        let frames = FrameSelection::deterministic(video.frames(), m.config.dims.n_chunks);
        let v = m.encode_video(tape, video, &frames)?;
        let s = m.encode_sentence(tape, &ds.sentence_tokens(0)?)?;
        let seq = v.sequential.as_ref().expect("sequential space present");
        let query = s.query.expect("attention on");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut terms = Vec::new();
        for (t, &grid) in seq.grids.iter().enumerate() {
            let (a, psi) = att.attend(tape, grid, seq.keys[t], query)?;
            for x in [a, psi] {
                let n = tape.value(x).len();
                let flat = tape.reshape(x, &[n])?;
                let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let dir = tape.constant(crate::tensor::Tensor::vector(&dir));
                terms.push(tape.dot(flat, dir)?);
            }
        }
        let all = tape.concat(&terms)?;
        tape.sum(all)
    }
}

/// Checks that every hinge in the batch objective sits at least
/// `MIN_SLACK` from its kink and, for hardest negatives, that the chosen
/// negative leads the runner-up by the same distance.
fn away_from_kinks(sims: &[Vec<f64>], margin: f64) -> bool {
    let b = sims.len();
    for i in 0..b {
        let mut row = Vec::new();
        let mut col = Vec::new();
        for j in (0..b).filter(|&j| j != i) {
            for s in [sims[i][j], sims[j][i]] {
                if (margin - sims[i][i] + s).abs() <= MIN_SLACK {
                    return false;
                }
            }
            row.push(sims[i][j]);
            col.push(sims[j][i]);
        }
        for mut v in [row, col] {
            v.sort_by(|a, b| b.total_cmp(a));
            if v.len() > 1 && v[0] - v[1] <= MIN_SLACK {
                return false;
            }
        }
    }
    true
}

/// Runs every check on freshly initialized parameters for `dims`.
pub fn gradient_report(dims: Dims, seed: u64) -> Result<GradReport> {
    let config = ModelConfig {
        dims,
        spaces: SpaceSet::Triple,
        ..ModelConfig::default()
    };
    config.validate()?;
    let synth = synth_generate(&SynthConfig {
        frames: dims.n_chunks,
        grid: dims.grid,
        c_global: dims.c_global,
        c_grid: dims.c_grid,
        c_action: dims.c_action,
        token_dim: dims.token_dim,
        videos: 8,
        test_videos: 2,
        split: [0.5, 0.25, 0.25],
        noise: 0.1,
        seed,
        ..SynthConfig::default()
    })?;
    let ds = &synth.dataset;
    let model = Model::new(config, seed)?;
    let sample = CoordSample {
        max_per_input: 24,
        seed,
    };

    let mut rows = Vec::new();
    let mut push = |name: &str, err: f64| {
        rows.push(CheckRow {
            name: name.to_string(),
            max_error: err,
        })
    };
    push("global head", check_params(&model, &["visual.global."], sample, space_sim(ds, Space::Global))?);
    push("attention", check_params(&model, &["attention."], sample, attention_probe(ds, seed))?);
    push(
        "sequential head",
        check_params(&model, &["lstm.", "attention."], sample, space_sim(ds, Space::Sequential))?,
    );
    push(
        "action text projection",
        check_params(&model, &["text.action.", "gru."], sample, space_sim(ds, Space::Action))?,
    );
    push(
        "gate",
        check_params(&model, &["gate.", "gru."], sample, |tape, m| {
            let video = &ds.videos[0];
            let frames = FrameSelection::deterministic(video.frames(), m.config.dims.n_chunks);
            let v = m.encode_video(tape, video, &frames)?;
            let s = m.encode_sentence(tape, &ds.sentence_tokens(0)?)?;
            Ok(m.pair(tape, &v, &s)?.fused)
        })?,
    );

    for mode in [NegativeMode::SumAll, NegativeMode::Hardest] {
        let triplet = TripletConfig {
            negative_mode: mode,
            ..TripletConfig::default()
        };
        let batch = kink_free_batch(&model, ds, &triplet)?;
        let frames: Vec<FrameSelection> = batch
            .iter()
            .map(|p| FrameSelection::deterministic(ds.videos[p.video].frames(), dims.n_chunks))
            .collect();
        let err = check_params(&model, &[""], sample, |tape, m| {
            Ok(batch_loss(tape, m, ds, &batch, &frames, &triplet)?.loss)
        })?;
        push(&format!("batch loss ({mode})"), err);
    }
    Ok(GradReport { rows })
}

/// First batch of three distinct videos whose hinges all sit away from their
/// kinks under the initial parameters.
fn kink_free_batch(model: &Model, ds: &Dataset, triplet: &TripletConfig) -> Result<Vec<Pair>> {
    let n = ds.sentences.len();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                let batch: Vec<Pair> = [a, b, c]
                    .iter()
                    .map(|&s| Pair {
                        video: ds.sentences[s].video,
                        sentence: s,
                    })
                    .collect();
                let v: Vec<usize> = batch.iter().map(|p| p.video).collect();
                if v[0] == v[1] || v[1] == v[2] || v[0] == v[2] {
                    continue;
                }
                let frames: Vec<FrameSelection> = batch
                    .iter()
                    .map(|p| FrameSelection::deterministic(ds.videos[p.video].frames(), model.config.dims.n_chunks))
                    .collect();
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, false)?;
                let out = batch_loss(&mut tape, &bound, ds, &batch, &frames, triplet)?;
                let sims: Vec<Vec<f64>> = out
                    .sims
                    .iter()
                    .map(|r| r.iter().map(|&s| tape.scalar_value(s)).collect())
                    .collect();
                // A probe point with every hinge inactive checks nothing.
                if away_from_kinks(&sims, triplet.margin) && tape.scalar_value(out.loss) > 0.0 {
                    return Ok(batch);
                }
            }
        }
    }
    Err(Error::Config("no batch away from hinge kinks".into()))
}

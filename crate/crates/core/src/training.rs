//! Triplet ranking objective and plain SGD.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, NegativeMode, TripletConfig};
use crate::data::manifest::Split;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{derive_seed, BoundModel, FrameSelection, Model};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// `max(0, margin - positive + negative)`
pub fn hinge(tape: &mut Tape, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let gap = tape.sub(negative, positive)?;
    let slack = tape.affine(gap, 1.0, margin)?;
    tape.relu(slack)
}

/// Sentence-negative and video-negative hinge terms for one anchor pair.
pub fn triplet_losses(
    tape: &mut Tape,
    positive: Var,
    negative_sentence: Var,
    negative_video: Var,
    margin: f64,
) -> Result<(Var, Var)> {
    Ok((
        hinge(tape, positive, negative_sentence, margin)?,
        hinge(tape, positive, negative_video, margin)?,
    ))
}

/// Index of the largest value, skipping `skip`; lowest index wins ties.
fn hardest(values: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in values.enumerate() {
        if j == skip {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.expect("at least two entries").0
}

/// Batch objective over a square similarity matrix, `sims[i][j] = s(video_i, sentence_j)`.
pub fn loss_from_similarities(
    tape: &mut Tape,
    sims: &[Vec<Var>],
    margin: f64,
    mode: NegativeMode,
) -> Result<Var> {
    let b = sims.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if let Some(row) = sims.iter().find(|r| r.len() != b) {
        return Err(Error::Shape {
            op: "batch_loss",
            lhs: vec![b, row.len()],
            rhs: vec![b, b],
        });
    }
    let mut terms = Vec::new();
    for i in 0..b {
        let pos = sims[i][i];
        match mode {
            NegativeMode::SumAll => {
                for j in (0..b).filter(|&j| j != i) {
                    let (ls, lv) = triplet_losses(tape, pos, sims[i][j], sims[j][i], margin)?;
                    terms.push(ls);
                    terms.push(lv);
                }
            }
            NegativeMode::Hardest => {
                let js = hardest((0..b).map(|j| tape.scalar_value(sims[i][j])), i);
                let jv = hardest((0..b).map(|j| tape.scalar_value(sims[j][i])), i);
                let (ls, lv) = triplet_losses(tape, pos, sims[i][js], sims[jv][i], margin)?;
                terms.push(ls);
                terms.push(lv);
            }
        }
    }
    let all = tape.concat(&terms)?;
    tape.sum(all)
}

/// One training example: a video index and one of its sentence indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub video: usize,
    pub sentence: usize,
}

/// Loss node plus the similarity matrix it was built from.
pub struct BatchLoss {
    pub loss: Var,
    pub sims: Vec<Vec<Var>>,
}

/// Builds the full batch objective on `tape`. Video features are encoded once
/// per batch; sentence features once per sentence.
pub fn batch_loss(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    ds: &Dataset,
    batch: &[Pair],
    frames: &[FrameSelection],
    triplet: &TripletConfig,
) -> Result<BatchLoss> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    if frames.len() != batch.len() {
        return Err(Error::Shape {
            op: "batch_loss",
            lhs: vec![batch.len()],
            rhs: vec![frames.len()],
        });
    }
    for (i, a) in batch.iter().enumerate() {
        if batch[..i].iter().any(|b| b.video == a.video) {
            return Err(Error::Config(format!("video {} appears twice in one batch", a.video)));
        }
    }
    let mut videos = Vec::with_capacity(batch.len());
    let mut sentences = Vec::with_capacity(batch.len());
    for (pair, sel) in batch.iter().zip(frames) {
        let video = ds
            .videos
            .get(pair.video)
            .ok_or_else(|| Error::Malformed(format!("video {} out of range", pair.video)))?;
        videos.push(model.encode_video(tape, video, sel)?);
        let tokens = ds.sentence_tokens(pair.sentence)?;
        sentences.push(model.encode_sentence(tape, &tokens)?);
    }
    let mut sims = Vec::with_capacity(batch.len());
    for v in &videos {
        let row = sentences
            .iter()
            .map(|s| model.pair(tape, v, s).map(|p| p.fused))
            .collect::<Result<Vec<_>>>()?;
        sims.push(row);
    }
    let loss = loss_from_similarities(tape, &sims, triplet.margin, triplet.negative_mode)?;
    Ok(BatchLoss { loss, sims })
}

/// `p <- p - lr * g` for every tensor. `grads` must cover every parameter.
pub fn sgd_step(params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    for name in params.names().map(str::to_string).collect::<Vec<_>>() {
        let g = grads.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        let p = params.get_mut(&name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    if let Some(extra) = grads.keys().find(|k| !params.contains(k)) {
        return Err(Error::MissingParam(extra.clone()));
    }
    Ok(())
}

/// Every (video, sentence) pair of a split, as dataset indices.
pub fn split_pairs(ds: &Dataset, split: &Split) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for entry in &split.entries {
        let video = ds
            .video_index(&entry.video_id)
            .ok_or_else(|| Error::Malformed(format!("unknown video `{}`", entry.video_id)))?;
        for &sentence in &entry.sentence_ids {
            pairs.push(Pair { video, sentence });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("training split"));
    }
    Ok(pairs)
}

/// Greedy batching of an already shuffled pair list: each pair goes to the
/// first open batch that does not yet hold its video. Batches smaller than 2
/// are dropped.
pub fn make_batches(pairs: &[Pair], batch_size: usize) -> Vec<Vec<Pair>> {
    let mut open: Vec<Vec<Pair>> = Vec::new();
    let mut done = Vec::new();
    for &p in pairs {
        match open.iter().position(|b| b.iter().all(|q| q.video != p.video)) {
            Some(k) => {
                open[k].push(p);
                if open[k].len() == batch_size {
                    done.push(open.remove(k));
                }
            }
            None => open.push(vec![p]),
        }
    }
    done.extend(open.into_iter().filter(|b| b.len() >= 2));
    done
}

/// Per-epoch record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Objective after the epoch's updates, on fixed batches in split order
    /// with chunk-start frames; depends only on the parameters.
    pub loss: f64,
    /// Mean loss of the shuffled training batches during the epoch.
    pub train_loss: f64,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|e| e.loss).collect()
    }
}

/// Mean batch objective over `batches` with chunk-start frames.
pub fn objective(model: &Model, ds: &Dataset, batches: &[Vec<Pair>], triplet: &TripletConfig) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("batch list"));
    }
    let mut total = 0.0;
    for batch in batches {
        let frames: Vec<FrameSelection> = batch
            .iter()
            .map(|p| FrameSelection::deterministic(ds.videos[p.video].frames(), model.config.dims.n_chunks))
            .collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false)?;
        let out = batch_loss(&mut tape, &bound, ds, batch, &frames, triplet)?;
        total += tape.scalar_value(out.loss);
    }
    Ok(total / batches.len() as f64)
}

/// Trains a freshly initialized model. Initialization, shuffling and frame
/// sampling all derive from `triplet.seed`.
pub fn train(
    ds: &Dataset,
    split: &Split,
    config: ModelConfig,
    triplet: &TripletConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    triplet.validate()?;
    let mut model = Model::new(config, derive_seed(triplet.seed, &[b"init"]))?;
    model.check_dataset(ds)?;
    let pairs = split_pairs(ds, split)?;
    let fixed = make_batches(&pairs, triplet.batch_size);
    if fixed.is_empty() {
        return Err(Error::BatchTooSmall(pairs.len()));
    }
    let n_chunks = config.dims.n_chunks;
    let mut log = Vec::with_capacity(triplet.epochs);

    for epoch in 0..triplet.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            triplet.seed,
            &[b"shuffle", &(epoch as u64).to_le_bytes()],
        ));
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        let batches = make_batches(&order, triplet.batch_size);
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let frames: Vec<FrameSelection> = batch
                .iter()
                .map(|p| {
                    let v = &ds.videos[p.video];
                    FrameSelection::for_training(v.frames(), n_chunks, triplet.seed, epoch, &v.id)
                })
                .collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let out = batch_loss(&mut tape, &bound, ds, batch, &frames, triplet)?;
            let loss = tape.scalar_value(out.loss);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            let grads = tape.backward(out.loss)?;
            let grads = bound.vars.collect_grads(&tape, &grads);
            drop(bound);
            sgd_step(&mut model.params, &grads, triplet.learning_rate)?;
            total += loss;
        }
        let entry = EpochLog {
            epoch,
            loss: objective(&model, ds, &fixed, triplet)?,
            train_loss: total / batches.len().max(1) as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// `epoch,loss` CSV.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        out.push_str(&format!("{e},{l:.12e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.constant(Tensor::scalar(v))
    }

    #[test]
    fn triplet_examples() {
        let mut tape = Tape::new();
        let cases = [(0.9, 0.1, 0.0), (0.5, 0.5, 0.2), (0.3, 0.4, 0.3)];
        for (pos, neg, want) in cases {
            let p = scalar(&mut tape, pos);
            let n = scalar(&mut tape, neg);
            let (ls, lv) = triplet_losses(&mut tape, p, n, n, 0.2).unwrap();
            assert!((tape.scalar_value(ls) - want).abs() < 1e-15, "{pos} {neg}");
            assert_eq!(tape.scalar_value(ls), tape.scalar_value(lv));
        }
    }

    fn matrix(tape: &mut Tape, m: &[&[f64]]) -> Vec<Vec<Var>> {
        m.iter()
            .map(|r| r.iter().map(|&v| tape.constant(Tensor::scalar(v))).collect())
            .collect()
    }

    #[test]
    fn two_by_two_modes_agree() {
        let mut tape = Tape::new();
        let s = matrix(&mut tape, &[&[0.5, 0.45], &[0.1, 0.3]]);
        let a = loss_from_similarities(&mut tape, &s, 0.2, NegativeMode::SumAll).unwrap();
        let b = loss_from_similarities(&mut tape, &s, 0.2, NegativeMode::Hardest).unwrap();
        assert_eq!(tape.scalar_value(a), tape.scalar_value(b));
        // 0.15 + 0 (anchor 0), 0 + 0.35 (anchor 1)
        assert!((tape.scalar_value(a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn separated_batch_has_zero_loss() {
        let mut tape = Tape::new();
        let s = matrix(&mut tape, &[&[0.9, 0.1, 0.0], &[0.2, 0.8, 0.1], &[-0.3, 0.0, 0.7]]);
        for mode in [NegativeMode::SumAll, NegativeMode::Hardest] {
            let l = loss_from_similarities(&mut tape, &s, 0.2, mode).unwrap();
            assert_eq!(tape.scalar_value(l), 0.0);
        }
    }

    #[test]
    fn three_by_three_hand_values() {
        let mut tape = Tape::new();
        let s = matrix(&mut tape, &[&[0.5, 0.4, 0.4], &[0.0, 0.6, 0.7], &[0.6, 0.1, 0.3]]);
        // anchor 0: rows (0.4, 0.4) -> 0.1 + 0.1; cols (0.0, 0.6) -> 0 + 0.3
        // anchor 1: rows (0.0, 0.7) -> 0 + 0.3; cols (0.4, 0.1) -> 0 + 0
        // anchor 2: rows (0.6, 0.1) -> 0.5 + 0; cols (0.4, 0.7) -> 0.3 + 0.6
        let sum = loss_from_similarities(&mut tape, &s, 0.2, NegativeMode::SumAll).unwrap();
        assert!((tape.scalar_value(sum) - 2.2).abs() < 1e-12);
        // hardest: ties at 0.4 pick j=1, value is the same either way
        // anchor 0: 0.1 + 0.3, anchor 1: 0.3 + 0.0, anchor 2: 0.5 + 0.6
        let hard = loss_from_similarities(&mut tape, &s, 0.2, NegativeMode::Hardest).unwrap();
        assert!((tape.scalar_value(hard) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn hardest_breaks_ties_low() {
        assert_eq!(hardest([0.3, 0.9, 0.9].into_iter(), 0), 1);
        assert_eq!(hardest([0.9, 0.2, 0.9].into_iter(), 1), 0);
        assert_eq!(hardest([0.9, 0.2, 0.9].into_iter(), 0), 2);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut tape = Tape::new();
        let s = matrix(&mut tape, &[&[0.5]]);
        assert!(matches!(
            loss_from_similarities(&mut tape, &s, 0.2, NegativeMode::SumAll),
            Err(Error::BatchTooSmall(1))
        ));
    }

    fn single(name: &str, v: &[f64]) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(name, Tensor::vector(v)).unwrap();
        p
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = single("w", &[1.0]);
        let g = BTreeMap::from([("w".to_string(), Tensor::vector(&[2.0]))]);
        sgd_step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.0]);

        let before = single("w", &[0.1, -3.7]);
        let mut after = before.clone();
        let g = BTreeMap::from([("w".to_string(), Tensor::vector(&[5.0, 1e9]))]);
        sgd_step(&mut after, &g, 0.0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn sgd_rejects_bad_gradients() {
        let mut p = single("w", &[1.0, 2.0]);
        let short = BTreeMap::from([("w".to_string(), Tensor::vector(&[1.0]))]);
        assert!(matches!(sgd_step(&mut p, &short, 0.1), Err(Error::Shape { .. })));
        assert!(matches!(sgd_step(&mut p, &BTreeMap::new(), 0.1), Err(Error::MissingParam(_))));
    }

    #[test]
    fn sgd_descends_quadratic() {
        let mut p = single("w", &[0.8, -1.3, 2.0]);
        let f = |p: &ModelParams| p.get("w").unwrap().data().iter().map(|x| x * x).sum::<f64>();
        let before = f(&p);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, true);
        let w = vars.get("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = vars.collect_grads(&tape, &tape.backward(loss).unwrap());
        sgd_step(&mut p, &grads, 0.1).unwrap();
        assert!(f(&p) < before);
    }

    #[test]
    fn batching_keeps_videos_distinct() {
        let pairs: Vec<Pair> = [0, 0, 1, 1, 2, 0, 3]
            .iter()
            .enumerate()
            .map(|(s, &v)| Pair { video: v, sentence: s })
            .collect();
        let batches = make_batches(&pairs, 3);
        for b in &batches {
            assert!(b.len() >= 2 && b.len() <= 3);
            for (i, p) in b.iter().enumerate() {
                assert!(b[..i].iter().all(|q| q.video != p.video));
            }
        }
        let used: usize = batches.iter().map(Vec::len).sum();
        assert!(used >= 6);
    }

    #[test]
    fn loss_log_format() {
        assert_eq!(loss_csv(&[0.5]), "epoch,loss\n0,5.000000000000e-1\n");
    }
}

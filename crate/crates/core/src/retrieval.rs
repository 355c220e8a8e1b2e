//! Sentence-to-video ranking and Recall@k / median-rank metrics.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::aggregation::GateRecorder;
use crate::autodiff::Tape;
use crate::config::Space;
use crate::data::manifest::Split;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FrameSelection, Model};
use crate::tensor::Tensor;

/// A query sentence. `sentence` is its index in the dataset when it has one.
pub struct Query {
    pub id: String,
    pub sentence: Option<usize>,
    pub tokens: Tensor,
}

/// Scores of one query against a gallery, in gallery order.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryScores {
    pub fused: Vec<f64>,
    /// `per_space[v][k]`: similarity of gallery item `v` in space `k`.
    pub per_space: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Anything that scores a sentence against a set of videos.
pub trait Scorer {
    fn spaces(&self) -> Vec<Space>;
    fn score(&self, ds: &Dataset, query: &Query, gallery: &[usize]) -> Result<QueryScores>;
}

impl Scorer for Model {
    fn spaces(&self) -> Vec<Space> {
        Model::spaces(self).to_vec()
    }

    fn score(&self, ds: &Dataset, query: &Query, gallery: &[usize]) -> Result<QueryScores> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let sentence = bound.encode_sentence(&mut tape, &query.tokens)?;
        let weights = tape.value(sentence.weights).data().to_vec();
        let mut fused = Vec::with_capacity(gallery.len());
        let mut per_space = Vec::with_capacity(gallery.len());
        for &v in gallery {
            let video = ds
                .videos
                .get(v)
                .ok_or_else(|| Error::Malformed(format!("video {v} out of range")))?;
            let frames = FrameSelection::deterministic(video.frames(), self.config.dims.n_chunks);
            let nodes = bound.encode_video(&mut tape, video, &frames)?;
            let pair = bound.pair(&mut tape, &nodes, &sentence)?;
            fused.push(tape.scalar_value(pair.fused));
            per_space.push(pair.sims.iter().map(|&s| tape.scalar_value(s)).collect());
        }
        Ok(QueryScores {
            fused,
            per_space,
            weights,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedVideo {
    pub video_id: String,
    pub similarity: f64,
    pub per_space: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query_id: String,
    pub ranked: Vec<RankedVideo>,
    /// Gate weights of the query; shared by every gallery item.
    pub weights: Vec<f64>,
    /// 1-based position of the ground truth, when one was given.
    pub rank: Option<usize>,
}

/// Orders the gallery by descending similarity, then ascending video id.
pub fn rank_gallery(
    query_id: &str,
    gallery_ids: &[&str],
    scores: &QueryScores,
    ground_truth: Option<&str>,
) -> Result<RankingResult> {
    if gallery_ids.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    if scores.fused.len() != gallery_ids.len() || scores.per_space.len() != gallery_ids.len() {
        return Err(Error::Shape {
            op: "rank_gallery",
            lhs: vec![gallery_ids.len()],
            rhs: vec![scores.fused.len()],
        });
    }
    let mut order: Vec<usize> = (0..gallery_ids.len()).collect();
    order.sort_by(|&a, &b| match scores.fused[b].total_cmp(&scores.fused[a]) {
        Ordering::Equal => gallery_ids[a].cmp(gallery_ids[b]),
        o => o,
    });
    let rank = match ground_truth {
        Some(gt) => Some(
            order
                .iter()
                .position(|&i| gallery_ids[i] == gt)
                .ok_or_else(|| Error::GroundTruthAbsent(gt.to_string()))?
                + 1,
        ),
        None => None,
    };
    let ranked = order
        .into_iter()
        .map(|i| RankedVideo {
            video_id: gallery_ids[i].to_string(),
            similarity: scores.fused[i],
            per_space: scores.per_space[i].clone(),
        })
        .collect();
    Ok(RankingResult {
        query_id: query_id.to_string(),
        ranked,
        weights: scores.weights.clone(),
        rank,
    })
}

/// Fraction of ranks `<= k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Config("ranks are 1-based".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Median rank; the mean of the two middle ranks for even counts.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(ranks, 1)?,
            r5: recall_at_k(ranks, 5)?,
            r10: recall_at_k(ranks, 10)?,
            median_rank: median_rank(ranks)?,
        })
    }
}

pub struct EvalReport {
    pub ranks: Vec<usize>,
    pub metrics: Metrics,
    pub gates: GateRecorder,
    /// Dataset sentence index of each query, aligned with `ranks`.
    pub sentences: Vec<usize>,
}

/// Every sentence of the split queries the split's full video gallery.
pub fn evaluate(ds: &Dataset, split: &Split, scorer: &dyn Scorer) -> Result<EvalReport> {
    let mut gallery = Vec::with_capacity(split.entries.len());
    for e in &split.entries {
        gallery.push(
            ds.video_index(&e.video_id)
                .ok_or_else(|| Error::Malformed(format!("unknown video `{}`", e.video_id)))?,
        );
    }
    let ids: Vec<&str> = gallery.iter().map(|&v| ds.videos[v].id.as_str()).collect();
    let mut gates = GateRecorder::new(&scorer.spaces());
    let mut ranks = Vec::new();
    let mut sentences = Vec::new();
    for e in &split.entries {
        for &s in &e.sentence_ids {
            let query = Query {
                id: format!("sentence{s}"),
                sentence: Some(s),
                tokens: ds.sentence_tokens(s)?,
            };
            let scores = scorer.score(ds, &query, &gallery)?;
            let result = rank_gallery(&query.id, &ids, &scores, Some(&e.video_id))?;
            gates.record(&scores.weights)?;
            ranks.push(result.rank.expect("ground truth given"));
            sentences.push(s);
        }
    }
    if ranks.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    Ok(EvalReport {
        metrics: Metrics::from_ranks(&ranks)?,
        ranks,
        gates,
        sentences,
    })
}

/// Aligned `method R@1 R@5 R@10 MedR` table; recalls in percent.
pub fn metrics_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(6) + 2;
    let mut out = format!("{:<width$}{:>8}{:>8}{:>8}{:>8}\n", "method", "R@1", "R@5", "R@10", "MedR");
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name:<width$}{:>8.1}{:>8.1}{:>8.1}{:>8.1}",
            100.0 * m.r1,
            100.0 * m.r5,
            100.0 * m.r10,
            m.median_rank
        );
    }
    out
}

/// `method,R@1,R@5,R@10,MedR` with recalls as fractions.
pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from("method,R@1,R@5,R@10,MedR\n");
    for (name, m) in rows {
        let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{}", m.r1, m.r5, m.r10, m.median_rank);
    }
    out
}

//! Sentence-gated fusion of per-space similarities.

use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::config::{FuseMode, Space};
use crate::error::{Error, Result};
use crate::params::ParamVars;
use crate::tensor::Tensor;

/// `softmax(W_t phi)`; no bias.
pub fn gate_weights(tape: &mut Tape, phi: Var, w_t: Var) -> Result<Var> {
    let logits = tape.matvec(w_t, phi)?;
    tape.softmax(logits)
}

/// `dot(weights, concat(similarities))`
pub fn fuse(tape: &mut Tape, similarities: &[Var], weights: Var) -> Result<Var> {
    let m = tape.value(weights).len();
    if similarities.len() != m {
        return Err(Error::Shape {
            op: "fuse",
            lhs: vec![similarities.len()],
            rhs: vec![m],
        });
    }
    let stacked = tape.concat(similarities)?;
    tape.dot(weights, stacked)
}

/// Weight producer for a fixed space count and fuse mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fuser {
    pub mode: FuseMode,
    pub spaces: usize,
}

impl Fuser {
    pub fn new(mode: FuseMode, spaces: usize) -> Self {
        Self { mode, spaces }
    }

    /// Gate weights for a sentence. Average mode, and any single-space model,
    /// use constant `1/M` weights and never touch the gate.
    pub fn weights(&self, tape: &mut Tape, phi: Var, p: &ParamVars) -> Result<Var> {
        if self.spaces == 0 {
            return Err(Error::Empty("space set"));
        }
        match self.mode {
            FuseMode::Weighted if self.spaces > 1 => gate_weights(tape, phi, p.get("gate.w")?),
            _ => Ok(tape.constant(Tensor::full(&[self.spaces], 1.0 / self.spaces as f64))),
        }
    }

    pub fn fuse(&self, tape: &mut Tape, similarities: &[Var], weights: Var) -> Result<Var> {
        fuse(tape, similarities, weights)
    }
}

/// Summary of one space's gate weights over a set of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceWeightStats {
    pub space: Space,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Cumulative fraction of queries with weight `<= bin_upper`, 0.01 bins.
    pub cumulative: Vec<(f64, f64)>,
}

/// Gate weights recorded per query, one row per query.
#[derive(Clone, Debug, Default)]
pub struct GateRecorder {
    spaces: Vec<Space>,
    rows: Vec<Vec<f64>>,
}

pub const HISTOGRAM_BINS: usize = 100;

impl GateRecorder {
    pub fn new(spaces: &[Space]) -> Self {
        Self {
            spaces: spaces.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn record(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.spaces.len() {
            return Err(Error::Shape {
                op: "gate_stats",
                lhs: vec![weights.len()],
                rhs: vec![self.spaces.len()],
            });
        }
        self.rows.push(weights.to_vec());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn stats(&self) -> Vec<SpaceWeightStats> {
        let n = self.rows.len();
        self.spaces
            .iter()
            .enumerate()
            .map(|(k, &space)| {
                let mut col: Vec<f64> = self.rows.iter().map(|r| r[k]).collect();
                col.sort_by(f64::total_cmp);
                let mean = if n == 0 { f64::NAN } else { col.iter().sum::<f64>() / n as f64 };
                let mut cumulative = Vec::with_capacity(HISTOGRAM_BINS);
                let mut seen = 0;
                for bin in 1..=HISTOGRAM_BINS {
                    let upper = bin as f64 / HISTOGRAM_BINS as f64;
                    while seen < n && col[seen] <= upper + 1e-12 {
                        seen += 1;
                    }
                    let frac = if n == 0 { 0.0 } else { seen as f64 / n as f64 };
                    cumulative.push((upper, frac));
                }
                SpaceWeightStats {
                    space,
                    mean,
                    min: col.first().copied().unwrap_or(f64::NAN),
                    max: col.last().copied().unwrap_or(f64::NAN),
                    cumulative,
                }
            })
            .collect()
    }
}

/// Aligned `space mean min max` table.
pub fn stats_table(stats: &[SpaceWeightStats]) -> String {
    let mut out = format!("{:<12}{:>10}{:>10}{:>10}\n", "space", "mean", "min", "max");
    for s in stats {
        let _ = writeln!(out, "{:<12}{:>10.4}{:>10.4}{:>10.4}", s.space.name(), s.mean, s.min, s.max);
    }
    out
}

/// `bin_upper,cumulative_fraction` CSV for one space.
pub fn histogram_csv(stats: &SpaceWeightStats) -> String {
    let mut out = String::from("bin_upper,cumulative_fraction\n");
    for (upper, frac) in &stats.cumulative {
        let _ = writeln!(out, "{upper:.2},{frac:.6}");
    }
    out
}

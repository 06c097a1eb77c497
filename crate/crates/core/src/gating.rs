//! Embedding space, distance-based gate, routing losses and schedules.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default additive constant inside `−log(d² + ε)`.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Lower bound applied to probabilities before taking their log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `K` learnable anchors of dimension `D`, stored as one `K×D` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpace {
    pub vectors: Tensor,
}

impl EmbeddingSpace {
    /// Anchors drawn from the standard normal distribution.
    pub fn init<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::config(
                "k",
                "expert count and embedding dimension must be >= 1",
            ));
        }
        let data = (0..k * d).map(|_| StandardNormal.sample(rng)).collect();
        Ok(EmbeddingSpace {
            vectors: Tensor::new(vec![k, d], data)?,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(EmbeddingSpace {
            vectors: Tensor::from_rows(rows)?,
        })
    }

    pub fn k(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        self.vectors.row(k)
    }

    /// Smallest Euclidean distance between two distinct anchors.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.k() {
            for j in i + 1..self.k() {
                best = best.min(euclidean(self.vector(i), self.vector(j)));
            }
        }
        best
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Gate values for one batch, recorded on a tape.
#[derive(Clone, Debug)]
pub struct GateDistribution {
    /// `batch×K` probabilities.
    pub p: Var,
    /// `batch×K` scores `−log(d² + ε)`.
    pub s: Var,
    /// `batch×K` Euclidean distances (values only).
    pub d: Tensor,
}

/// `d_k = ‖v − e_k‖`, `s_k = −log(d_k² + ε)`, `p = softmax(s)`.
pub fn gate_values(tape: &mut Tape, v: Var, embeddings: Var, eps: f64) -> Result<GateDistribution> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "gate eps must be positive, got {eps}"
        )));
    }
    let sq = tape.pairwise_sq_dist(v, embeddings)?;
    let d = {
        let t = tape.value(sq);
        Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|x| x.sqrt()).collect(),
        )?
    };
    let shifted = tape.unary(sq, Unary::Shift(eps))?;
    let log = tape.log(shifted)?;
    let s = tape.neg(log)?;
    let p = tape.softmax_rows(s)?;
    Ok(GateDistribution { p, s, d })
}

/// Mean Shannon entropy (nats) of the rows of `p`.
pub fn entropy_loss(tape: &mut Tape, p: Var) -> Result<Var> {
    let logp = tape.unary(p, Unary::LogFloor(PROB_FLOOR))?;
    let plogp = tape.mul(p, logp)?;
    let row = tape.reduce_axis(plogp, Reduce::Sum, 1)?;
    let mean = tape.mean(row)?;
    tape.neg(mean)
}

/// `KL(I/ΣI ‖ U)` where `I` is the column sum of `p`.
pub fn kl_balance(tape: &mut Tape, p: Var) -> Result<Var> {
    let k = tape.value(p).dims2()?.1 as f64;
    let importance = tape.reduce_axis(p, Reduce::Sum, 0)?;
    let total = tape.sum(importance)?;
    let inv = tape.unary(total, Unary::Recip)?;
    let share = tape.mul_scalar(importance, inv)?;
    let scaled = tape.scale(share, k)?;
    let log = tape.unary(scaled, Unary::LogFloor(PROB_FLOOR))?;
    let terms = tape.mul(share, log)?;
    tape.sum(terms)
}

/// Per-expert gate mass of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector {
    pub importance: Vec<f64>,
    pub share: Vec<f64>,
}

impl ImportanceVector {
    pub fn from_probs(p: &Tensor) -> Result<Self> {
        let (m, k) = p.dims2()?;
        let mut importance = vec![0.0; k];
        for i in 0..m {
            for (acc, &x) in importance.iter_mut().zip(p.row(i)) {
                *acc += x;
            }
        }
        let total: f64 = importance.iter().sum();
        let share = importance.iter().map(|x| x / total).collect();
        Ok(ImportanceVector { importance, share })
    }

    /// `max I / min I`; infinite when some expert receives no mass.
    pub fn max_min_ratio(&self) -> f64 {
        let max = self
            .importance
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self
            .importance
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

fn check_pct(pct_tr: f64) -> Result<()> {
    if (0.0..=1.0).contains(&pct_tr) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "training fraction {pct_tr} outside [0, 1]"
        )))
    }
}

/// Entropy-loss ramp: 0 → 1 over the first half of training, then 1.
pub fn gamma_en(pct_tr: f64) -> Result<f64> {
    check_pct(pct_tr)?;
    Ok((2.0 * pct_tr).min(1.0))
}

/// GRL coefficient `2/(1 + exp(−10·pct)) − 1`.
pub fn lambda_grl(pct_tr: f64) -> Result<f64> {
    check_pct(pct_tr)?;
    Ok(2.0 / (1.0 + (-10.0 * pct_tr).exp()) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub pct_tr: f64,
    pub gamma_en: f64,
    pub lambda_grl: f64,
}

impl ScheduleState {
    pub fn at(pct_tr: f64) -> Result<Self> {
        Ok(ScheduleState {
            pct_tr,
            gamma_en: gamma_en(pct_tr)?,
            lambda_grl: lambda_grl(pct_tr)?,
        })
    }

    /// Schedule at `step` of `total` (0-based); an empty run is at 0.
    pub fn for_step(step: usize, total: usize) -> Self {
        let pct = if total == 0 {
            0.0
        } else {
            step as f64 / total as f64
        };
        Self::at(pct.clamp(0.0, 1.0)).expect("fraction clamped to [0, 1]")
    }
}

/// Index of the largest gate value in each row; ties go to the lowest index.
pub fn assign_cluster(p: &Tensor) -> Result<Vec<usize>> {
    let (m, _) = p.dims2()?;
    Ok((0..m).map(|i| argmax(p.row(i))).collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

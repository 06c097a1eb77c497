//! Synthetic datasets and the per-domain train/validation split.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Examples with inputs, targets and true domain indices.
///
/// For classification `y` holds the class index as a float and
/// `n_classes` is set; for regression `n_classes` is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub d: Vec<usize>,
    pub n_classes: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Width of the model output: class count, or 1 for regression.
    pub fn output_dim(&self) -> usize {
        self.n_classes.unwrap_or(1)
    }

    pub fn n_domains(&self) -> usize {
        self.d.iter().max().map_or(0, |m| m + 1)
    }

    pub fn class_labels(&self) -> Option<Vec<usize>> {
        self.n_classes
            .map(|_| self.y.iter().map(|&v| v as usize).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            d: idx.iter().map(|&i| self.d[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Inputs as an `n×in` matrix.
    pub fn inputs(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        Tensor::from_rows(&self.x)
    }

    /// Dense `n×C` targets: one-hot rows for classes, the raw value otherwise.
    pub fn dense_targets(&self, idx: &[usize]) -> Vec<f64> {
        match self.n_classes {
            Some(c) => {
                let mut out = vec![0.0; idx.len() * c];
                for (r, &i) in idx.iter().enumerate() {
                    out[r * c + self.y[i] as usize] = 1.0;
                }
                out
            }
            None => idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        if self.y.len() != self.len() || self.d.len() != self.len() {
            return Err(Error::Data("x, y and d lengths differ".into()));
        }
        let w = self.input_dim();
        if w == 0 || self.x.iter().any(|r| r.len() != w) {
            return Err(Error::Data("inputs must share a positive width".into()));
        }
        if let Some(c) = self.n_classes {
            if let Some(bad) = self
                .y
                .iter()
                .find(|&&v| v < 0.0 || v.fract() != 0.0 || v as usize >= c)
            {
                return Err(Error::Data(format!("class label {bad} outside 0..{c}")));
            }
        }
        if self
            .x
            .iter()
            .flatten()
            .chain(&self.y)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Data("non-finite value".into()));
        }
        Ok(())
    }
}

/// One sample of the sine toy problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPoint {
    pub x: f64,
    pub y: f64,
    pub interval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRegressionSet {
    pub points: Vec<ToyPoint>,
}

/// Interval lower bounds; every interval has width 0.5.
pub const TOY_INTERVALS: [f64; 3] = [0.0, 1.0, 2.0];
pub const TOY_COUNTS: [usize; 3] = [10, 20, 30];
pub const TOY_WIDTH: f64 = 0.5;

pub fn toy_target(x: f64) -> f64 {
    (4.0 * PI * x).sin()
}

/// 10/20/30 points of `sin(4πx)` drawn uniformly from (0, 0.5), (1, 1.5), (2, 2.5).
pub fn gen_toy_regression<R: Rng + ?Sized>(rng: &mut R) -> ToyRegressionSet {
    let mut points = Vec::with_capacity(TOY_COUNTS.iter().sum());
    for (interval, (&lo, &count)) in TOY_INTERVALS.iter().zip(&TOY_COUNTS).enumerate() {
        for _ in 0..count {
            let x = loop {
                let x = rng.random_range(lo..lo + TOY_WIDTH);
                if x > lo {
                    break x;
                }
            };
            points.push(ToyPoint {
                x,
                y: toy_target(x),
                interval,
            });
        }
    }
    ToyRegressionSet { points }
}

impl ToyRegressionSet {
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            x: self.points.iter().map(|p| vec![p.x]).collect(),
            y: self.points.iter().map(|p| p.y).collect(),
            d: self.points.iter().map(|p| p.interval).collect(),
            n_classes: None,
        }
    }
}

/// Affine map applied to the shared class blobs of one domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub angle: f64,
    pub translation: [f64; 2],
    pub scale: f64,
}

impl DomainTransform {
    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [
            self.scale * (c * p[0] - s * p[1]) + self.translation[0],
            self.scale * (s * p[0] + c * p[1]) + self.translation[1],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainExample {
    pub class: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSet {
    pub x: Vec<Vec<f64>>,
    pub examples: Vec<DomainExample>,
    pub m: usize,
    pub c: usize,
    pub transforms: Vec<DomainTransform>,
    /// `2×lift_dim` map from the plane into input space.
    pub lift: Vec<[f64; 2]>,
}

/// Parameters of [`gen_synthetic_domains`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub domains: usize,
    pub classes: usize,
    /// Examples per (domain, class) pair.
    pub n_per: usize,
    /// Distance of each domain's centre from the origin.
    pub separation: f64,
    pub lift_dim: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            domains: 3,
            classes: 3,
            n_per: 100,
            separation: 10.0,
            lift_dim: 16,
        }
    }
}

/// Radius of the circle holding the class centres.
const CLASS_RADIUS: f64 = 3.0;
const CLASS_STD: f64 = 0.6;

/// Gaussian class blobs in the plane; domain `m` rotates them by `m·180°/M`
/// and shifts them by `separation` along direction `m·360°/M`. The plane is
/// then lifted to `lift_dim` dimensions by a fixed random linear map.
pub fn gen_synthetic_domains<R: Rng + ?Sized>(
    p: &SyntheticParams,
    rng: &mut R,
) -> Result<SyntheticDomainSet> {
    if p.domains == 0 || p.classes == 0 || p.n_per == 0 || p.lift_dim == 0 {
        return Err(Error::config(
            "data",
            "domains, classes, n_per and lift_dim must be >= 1",
        ));
    }
    if !(p.separation > 0.0) {
        return Err(Error::config("data.separation", "must be positive"));
    }
    let m = p.domains;
    let transforms: Vec<DomainTransform> = (0..m)
        .map(|k| {
            let dir = 2.0 * PI * k as f64 / m as f64;
            DomainTransform {
                angle: PI * k as f64 / m as f64,
                translation: [p.separation * dir.cos(), p.separation * dir.sin()],
                scale: 1.0,
            }
        })
        .collect();
    // roughly norm-preserving
    let lift_scale = 1.0 / (p.lift_dim as f64).sqrt();
    let lift: Vec<[f64; 2]> = (0..p.lift_dim)
        .map(|_| {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            [a * lift_scale, b * lift_scale]
        })
        .collect();
    let noise = Normal::new(0.0, CLASS_STD).expect("positive std");

    let mut x = Vec::with_capacity(m * p.classes * p.n_per);
    let mut examples = Vec::with_capacity(x.capacity());
    for (domain, t) in transforms.iter().enumerate() {
        for class in 0..p.classes {
            let a = 2.0 * PI * class as f64 / p.classes as f64;
            let centre = [CLASS_RADIUS * a.cos(), CLASS_RADIUS * a.sin()];
            for _ in 0..p.n_per {
                let plane = t.apply([centre[0] + noise.sample(rng), centre[1] + noise.sample(rng)]);
                x.push(
                    lift.iter()
                        .map(|w| w[0] * plane[0] + w[1] * plane[1])
                        .collect(),
                );
                examples.push(DomainExample { class, domain });
            }
        }
    }
    Ok(SyntheticDomainSet {
        x,
        examples,
        m,
        c: p.classes,
        transforms,
        lift,
    })
}

impl SyntheticDomainSet {
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            x: self.x.clone(),
            y: self.examples.iter().map(|e| e.class as f64).collect(),
            d: self.examples.iter().map(|e| e.domain).collect(),
            n_classes: Some(self.c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Per-domain split: `floor(fraction·n)` examples of each domain go to
/// training, the rest to validation. Both halves keep the input order.
pub fn split_train_val<R: Rng + ?Sized>(
    data: &Dataset,
    fraction: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if data.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("data.train_fraction", "must lie in [0, 1]"));
    }
    let mut in_train = vec![false; data.len()];
    for domain in 0..data.n_domains() {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.d[i] == domain).collect();
        let n_train = (fraction * members.len() as f64 + 1e-9).floor() as usize;
        members.shuffle(rng);
        for &i in &members[..n_train] {
            in_train[i] = true;
        }
    }
    let train: Vec<usize> = (0..data.len()).filter(|&i| in_train[i]).collect();
    let val: Vec<usize> = (0..data.len()).filter(|&i| !in_train[i]).collect();
    Ok((data.subset(&train), data.subset(&val)))
}

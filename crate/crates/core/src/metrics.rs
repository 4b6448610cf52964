//! Perceptual distance proxy, path length / distance variance, and
//! reschedule sampling of interpolation ratios.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A distance between two images of equal shape.
pub trait DistanceFn<S: Scalar>: Sync {
    /// Stable identifier written into reports.
    fn id(&self) -> &str;
    fn distance(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<f64>;
}

/// RMS pixel difference summed over 2× average-pooled scales 1, ½, ¼.
#[derive(Clone, Copy, Debug, Default)]
pub struct MultiScaleRms;

pub const MULTISCALE_RMS_ID: &str = "multiscale-rms-1-2-4";

impl<S: Scalar> DistanceFn<S> for MultiScaleRms {
    fn id(&self) -> &str {
        MULTISCALE_RMS_ID
    }

    fn distance(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
        perceptual_distance(a, b)
    }
}

/// Average-pool the last two axes by 2 (f64 planes of `h×w`).
fn pool_planes(planes: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let n = planes.len() / (h * w);
    let mut out = Vec::with_capacity(n * ho * wo);
    for p in 0..n {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let at = |di: usize, dj: usize| planes[base + (2 * i + di) * w + 2 * j + dj];
                out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * 0.25);
            }
        }
    }
    out
}

/// `Σ_s ‖down_s(I) − down_s(J)‖₂ / √(elements at s)` over the scales
/// `{1, ½, ¼}` that the spatial size supports.
pub fn perceptual_distance<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    a.expect_same_shape(b, "perceptual_distance")?;
    if a.rank() < 2 || a.numel() == 0 {
        return Err(shape_err("perceptual_distance", format!("image shape {:?}", a.shape())));
    }
    let rank = a.rank();
    let (mut h, mut w) = (a.shape()[rank - 2], a.shape()[rank - 1]);
    let mut diff: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.as_f64() - y.as_f64())
        .collect();
    let mut total = 0.0;
    for level in 0..3 {
        if level > 0 {
            if h % 2 != 0 || w % 2 != 0 {
                break;
            }
            diff = pool_planes(&diff, h, w);
            h /= 2;
            w /= 2;
        }
        let ss: f64 = diff.iter().map(|d| d * d).sum();
        total += (ss / diff.len() as f64).sqrt();
    }
    Ok(total)
}

/// Distances between consecutive frames.
pub fn adjacent_distances<S: Scalar>(frames: &[Tensor<S>], dist: &dyn DistanceFn<S>) -> Result<Vec<f64>> {
    frames.windows(2).map(|w| dist.distance(&w[0], &w[1])).collect()
}

/// Sum of adjacent distances.
pub fn ppl_of(distances: &[f64]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::Invalid("path length needs at least 2 frames".into()));
    }
    Ok(distances.iter().sum())
}

/// Population variance of adjacent distances.
pub fn pdv_of(distances: &[f64]) -> Result<f64> {
    if distances.len() < 2 {
        return Err(Error::Invalid("distance variance needs at least 3 frames".into()));
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    Ok(distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n)
}

pub fn ppl<S: Scalar>(frames: &[Tensor<S>]) -> Result<f64> {
    ppl_of(&adjacent_distances(frames, &MultiScaleRms)?)
}

pub fn pdv<S: Scalar>(frames: &[Tensor<S>]) -> Result<f64> {
    pdv_of(&adjacent_distances(frames, &MultiScaleRms)?)
}

/// Adjacent distances of a uniformly sampled sequence and their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceProfile {
    d: Vec<f64>,
    d_bar: f64,
}

impl DistanceProfile {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Invalid("empty distance profile".into()));
        }
        if let Some(bad) = d.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Invalid(format!("distance {bad} is not a finite non-negative value")));
        }
        let d_bar = d.iter().sum();
        Ok(DistanceProfile { d, d_bar })
    }

    pub fn from_frames<S: Scalar>(frames: &[Tensor<S>], dist: &dyn DistanceFn<S>) -> Result<Self> {
        Self::new(adjacent_distances(frames, dist)?)
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn distances(&self) -> &[f64] {
        &self.d
    }

    pub fn total(&self) -> f64 {
        self.d_bar
    }

    /// Normalized cumulative distance at the knots `i/n`, `i = 0..=n`.
    fn knots(&self) -> Vec<f64> {
        let mut k = Vec::with_capacity(self.d.len() + 1);
        let mut acc = 0.0;
        k.push(0.0);
        for d in &self.d[..self.d.len() - 1] {
            acc += d;
            k.push(acc / self.d_bar);
        }
        k.push(1.0);
        k
    }

    /// Piecewise-linear normalized cumulative distance `D_0(α)`.
    pub fn cumulative(&self, alpha: f64) -> f64 {
        let n = self.d.len();
        let k = self.knots();
        if alpha <= 0.0 {
            return 0.0;
        }
        if alpha >= 1.0 {
            return 1.0;
        }
        let x = alpha * n as f64;
        let j = (x.floor() as usize).min(n - 1);
        k[j] + (x - j as f64) * (k[j + 1] - k[j])
    }
}

/// Ratios `α_i = D_0⁻¹(i/n)` that make adjacent frames equidistant under the
/// piecewise-linear distance model. Flat segments invert to their left end.
pub fn reschedule(profile: &DistanceProfile) -> Result<Vec<f64>> {
    if profile.d_bar <= 0.0 {
        return Err(Error::Invalid("cannot reschedule an all-zero distance profile".into()));
    }
    let n = profile.d.len();
    let nf = n as f64;
    if profile.d.iter().all(|&d| d == profile.d[0]) {
        return Ok((0..=n).map(|i| i as f64 / nf).collect());
    }
    let k = profile.knots();
    let mut alphas = Vec::with_capacity(n + 1);
    alphas.push(0.0);
    let mut j = 0;
    for i in 1..n {
        let y = i as f64 / nf;
        while k[j + 1] < y {
            j += 1;
        }
        let frac = (y - k[j]) / (k[j + 1] - k[j]);
        alphas.push((j as f64 + frac) / nf);
    }
    alphas.push(1.0);
    Ok(alphas)
}

/// Distances the piecewise-linear model predicts between frames at `alphas`.
pub fn model_distances(profile: &DistanceProfile, alphas: &[f64]) -> Vec<f64> {
    alphas
        .windows(2)
        .map(|w| (profile.cumulative(w[1]) - profile.cumulative(w[0])) * profile.d_bar)
        .collect()
}

/// Smoothness report over a frame sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ppl: f64,
    pub pdv: f64,
    pub distances: Vec<f64>,
    pub frames: usize,
    pub distance_fn: String,
    pub config_hash: Option<String>,
}

impl MetricsReport {
    pub fn from_frames<S: Scalar>(
        frames: &[Tensor<S>],
        dist: &dyn DistanceFn<S>,
        config_hash: Option<String>,
    ) -> Result<Self> {
        let distances = adjacent_distances(frames, dist)?;
        Ok(MetricsReport {
            ppl: ppl_of(&distances)?,
            pdv: pdv_of(&distances)?,
            distances,
            frames: frames.len(),
            distance_fn: dist.id().to_string(),
            config_hash,
        })
    }
}

//! Planted-anomaly feature sequences for desk-scale experiments.
//!
//! Every frame is a smooth Gaussian background plus a large, slowly drifting
//! nuisance component confined to a subspace orthogonal to the anomaly
//! directions. Anomalous videos get 1..=`max_segments` segments during which
//! a class-specific unit direction scaled by `snr` is added. The background
//! has unit variance along every axis, so `snr` is the per-frame shift along
//! the anomaly direction in noise standard deviations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, VideoLabel, VideoRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub train_videos: usize,
    pub test_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub input_dim: usize,
    pub anomaly_fraction: f64,
    /// Segment durations in frames, drawn uniformly.
    pub durations: Vec<usize>,
    pub max_segments: usize,
    pub snr: f64,
    pub anomaly_classes: usize,
    /// AR(1) coefficient of the background.
    pub smoothness: f64,
    pub nuisance_dim: usize,
    /// Standard deviation of each nuisance coordinate.
    pub nuisance_scale: f64,
    /// AR(1) coefficient of the nuisance coordinates.
    pub nuisance_smoothness: f64,
    pub crops: usize,
    /// Per-element noise distinguishing crops of one video.
    pub crop_jitter: f64,
    /// Probability that a pseudo label disagrees with the ground truth.
    pub pseudo_flip: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_videos: 200,
            test_videos: 50,
            min_len: 64,
            max_len: 128,
            input_dim: 64,
            anomaly_fraction: 0.5,
            durations: vec![2, 6, 18, 54],
            max_segments: 3,
            snr: 2.5,
            anomaly_classes: 4,
            smoothness: 0.5,
            nuisance_dim: 16,
            nuisance_scale: 4.0,
            nuisance_smoothness: 0.95,
            crops: 1,
            crop_jitter: 0.1,
            pseudo_flip: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.anomaly_fraction) || !unit(self.pseudo_flip) {
            return Err(Error::config("anomaly_fraction and pseudo_flip must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.smoothness) || !(0.0..1.0).contains(&self.nuisance_smoothness) {
            return Err(Error::config("smoothness coefficients must lie in [0, 1)"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if self.durations.is_empty() || self.durations.contains(&0) {
            return Err(Error::config("durations must be non-empty and positive"));
        }
        if self.max_segments == 0 || self.anomaly_classes == 0 || self.crops == 0 || self.input_dim == 0 {
            return Err(Error::config("max_segments, anomaly_classes, crops and input_dim must be positive"));
        }
        if self.anomaly_classes + self.nuisance_dim > self.input_dim {
            return Err(Error::config(format!(
                "{} anomaly + {} nuisance directions do not fit in {} dims",
                self.anomaly_classes, self.nuisance_dim, self.input_dim
            )));
        }
        if !(self.snr >= 0.0) || !(self.nuisance_scale >= 0.0) || !(self.crop_jitter >= 0.0) {
            return Err(Error::config("snr, nuisance_scale and crop_jitter must be non-negative"));
        }
        if self.train_videos + self.test_videos == 0 {
            return Err(Error::config("no videos requested"));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Orthonormal rows: `anomaly_classes` anomaly directions followed by the
/// nuisance basis.
fn basis(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = stream(spec.seed, 1);
    let d = spec.input_dim;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < spec.anomaly_classes + spec.nuisance_dim {
        let mut v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
    }
    rows
}

/// Unit anomaly direction of each class.
pub fn anomaly_directions(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut b = basis(spec);
    b.truncate(spec.anomaly_classes);
    b
}

fn ar1_step(prev: f64, coeff: f64, rng: &mut impl Rng) -> f64 {
    coeff * prev + (1.0 - coeff * coeff).sqrt() * normal(rng)
}

fn video(
    spec: &SyntheticSpec,
    basis: &[Vec<f64>],
    id: String,
    anomalous: bool,
    rng: &mut ChaCha8Rng,
) -> Result<VideoRecord> {
    let d = spec.input_dim;
    let t = rng.random_range(spec.min_len..=spec.max_len);
    let mut gt = vec![0.0; t];
    let class = rng.random_range(0..spec.anomaly_classes);
    if anomalous {
        let segments = rng.random_range(1..=spec.max_segments);
        for _ in 0..segments {
            let dur = spec.durations[rng.random_range(0..spec.durations.len())].min(t);
            let start = rng.random_range(0..=t - dur);
            gt[start..start + dur].iter_mut().for_each(|g| *g = 1.0);
        }
    }
    let nuisance = &basis[spec.anomaly_classes..];
    let dir = &basis[class];

    // frame-major [T, D] while generating, transposed to [D, T] at the end
    let mut frames = vec![0.0; t * d];
    let mut bg: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let mut nz: Vec<f64> = (0..nuisance.len()).map(|_| normal(rng)).collect();
    for i in 0..t {
        if i > 0 {
            bg.iter_mut().for_each(|v| *v = ar1_step(*v, spec.smoothness, rng));
            nz.iter_mut().for_each(|v| *v = ar1_step(*v, spec.nuisance_smoothness, rng));
        }
        let row = &mut frames[i * d..(i + 1) * d];
        row.copy_from_slice(&bg);
        for (z, axis) in nz.iter().zip(nuisance) {
            row.iter_mut().zip(axis).for_each(|(x, a)| *x += spec.nuisance_scale * z * a);
        }
        if gt[i] > 0.0 {
            row.iter_mut().zip(dir).for_each(|(x, a)| *x += spec.snr * a);
        }
    }
    let mut base = vec![0.0; d * t];
    for i in 0..t {
        for j in 0..d {
            base[j * t + i] = frames[i * d + j];
        }
    }
    let crops = (0..spec.crops)
        .map(|_| {
            let mut c = base.clone();
            if spec.crops > 1 {
                c.iter_mut().for_each(|v| *v += spec.crop_jitter * normal(rng));
            }
            Tensor::new(&[d, t], c)
        })
        .collect::<Result<Vec<_>>>()?;
    let pseudo = gt
        .iter()
        .map(|&g| {
            let flipped = rng.random::<f64>() < spec.pseudo_flip;
            let positive = (g > 0.5) != flipped;
            let u: f64 = rng.random_range(0.05..0.45);
            if positive {
                0.5 + u
            } else {
                0.5 - u
            }
        })
        .collect();
    Ok(VideoRecord {
        id,
        crops,
        label: if anomalous { VideoLabel::Anomalous } else { VideoLabel::Normal },
        frame_gt: Some(gt),
        pseudo_probs: Some(pseudo),
    })
}

fn split(spec: &SyntheticSpec, basis: &[Vec<f64>], n: usize, prefix: &str, stream_id: u64) -> Result<Vec<VideoRecord>> {
    let mut rng = stream(spec.seed, stream_id);
    let n_anom = (spec.anomaly_fraction * n as f64).round() as usize;
    // interleave labels deterministically, then shuffle them with the split stream
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_anom).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels.into_iter().enumerate().map(|(i, a)| video(spec, basis, format!("{prefix}{i:04}"), a, &mut rng)).collect()
}

/// Deterministic in `spec`; the test split does not depend on `train_videos`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let b = basis(spec);
    Ok(Dataset {
        train: split(spec, &b, spec.train_videos, "train", 2)?,
        test: split(spec, &b, spec.test_videos, "test", 3)?,
    })
}

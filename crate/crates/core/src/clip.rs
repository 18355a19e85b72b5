//! Vision–language pseudo-label path: cosine similarity between frame and
//! text embeddings, turned into per-frame anomaly probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    /// Softmax temperature over class prompts.
    pub temperature: f64,
    /// Logistic scale applied to the centered max-similarity.
    pub scale: f64,
    /// Pseudo-label threshold; labels are `prob > threshold`.
    pub threshold: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { temperature: 0.07, scale: 100.0, threshold: 0.5 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.scale > 0.0) {
            return Err(Error::config("clip temperature and scale must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

fn unit_rows(m: &Tensor, what: &str) -> Result<(usize, usize, Vec<f64>)> {
    let (n, d) = m.dims2()?;
    let mut out = m.data().to_vec();
    for (i, row) in out.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateEmbedding(format!("{what} row {i} has norm {norm}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok((n, d, out))
}

/// Cosine similarities `[T, N]` between frame rows `[T, De]` and text rows `[N, De]`.
pub fn cosine_similarity(frames: &Tensor, texts: &Tensor) -> Result<Tensor> {
    let (t, d, f) = unit_rows(frames, "frame embedding")?;
    let (n, dt, u) = unit_rows(texts, "text embedding")?;
    if d != dt {
        return Err(Error::dim(format!("frame dim {d} vs text dim {dt}")));
    }
    let mut out = vec![0.0; t * n];
    for i in 0..t {
        let fi = &f[i * d..(i + 1) * d];
        for c in 0..n {
            out[i * n + c] = fi.iter().zip(&u[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(&[t, n], out)
}

/// Per-frame class distribution `softmax_c(cos / temperature)`, `[T, N]`.
pub fn clip_scores(frames: &Tensor, texts: &Tensor, cfg: &ClipConfig) -> Result<Tensor> {
    let cos = cosine_similarity(frames, texts)?;
    ops::softmax(&cos.map(|v| v / cfg.temperature), 1)
}

/// Binary anomaly probability per frame: the best-matching anomaly prompt
/// similarity, centered on its mean over the video and squashed with a
/// logistic of slope `scale`.
pub fn clip_binary_probs(frames: &Tensor, anomaly_texts: &Tensor, cfg: &ClipConfig) -> Result<Vec<f64>> {
    let cos = cosine_similarity(frames, anomaly_texts)?;
    let (_, n) = cos.dims2()?;
    let best: Vec<f64> =
        cos.data().chunks(n).map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mean = best.iter().sum::<f64>() / best.len() as f64;
    Ok(best.iter().map(|&m| ops::sigmoid_scalar(cfg.scale * (m - mean))).collect())
}

/// Hard pseudo labels: 1 where `prob > threshold` (strict), else 0.
pub fn pseudo_labels(probs: &[f64], threshold: f64) -> Vec<f64> {
    probs.iter().map(|&p| if p > threshold { 1.0 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_prompt_scores_are_one() {
        let frames = Tensor::new(&[2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let texts = Tensor::new(&[1, 2], vec![0.3, 0.1]).unwrap();
        let s = clip_scores(&frames, &texts, &ClipConfig::default()).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn two_frame_binary_probs() {
        let frames = Tensor::new(&[2, 2], vec![0.9, (1.0f64 - 0.81).sqrt(), 0.1, (0.99f64).sqrt()]).unwrap();
        let texts = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let cfg = ClipConfig { scale: 10.0, ..ClipConfig::default() };
        let p = clip_binary_probs(&frames, &texts, &cfg).unwrap();
        let s4 = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((p[0] - s4).abs() < 1e-12);
        assert!((p[1] - (1.0 - s4)).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let frames = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let texts = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(cosine_similarity(&frames, &texts), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(pseudo_labels(&[0.5, 0.50001, 0.2], 0.5), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn scale_invariant_in_embedding_norm() {
        let frames = Tensor::new(&[3, 2], vec![1.0, 0.2, 0.3, 0.9, -0.4, 0.5]).unwrap();
        let texts = Tensor::new(&[2, 2], vec![0.6, 0.8, 1.0, -1.0]).unwrap();
        let cfg = ClipConfig::default();
        let a = clip_scores(&frames, &texts, &cfg).unwrap();
        let b = clip_scores(&frames.map(|v| 7.0 * v), &texts.map(|v| 0.1 * v), &cfg).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

//! Frame-level focal loss on pseudo labels, top-k video classification
//! loss, embedding triplet loss and their uncertainty-weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, ForwardOutput};
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;

/// Probabilities entering a logarithm are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_pos: f64,
    pub gamma: f64,
    /// Fraction of frames averaged into the video score.
    pub topk_fraction: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha_pos: 0.75, gamma: 2.0, topk_fraction: 0.1, margin: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_pos > 0.0 && self.alpha_pos < 1.0) {
            return Err(Error::config(format!("alpha_pos {} outside (0, 1)", self.alpha_pos)));
        }
        if !(self.gamma >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::config("gamma and margin must be non-negative"));
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::config(format!("topk_fraction {} outside (0, 1]", self.topk_fraction)));
        }
        Ok(())
    }
}

fn check_masked(scores: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<usize> {
    scores.expect_same_shape(targets)?;
    scores.expect_same_shape(mask)?;
    let n = mask.data().iter().filter(|&&m| m > 0.0).count();
    if n == 0 {
        return Err(Error::EmptyLoss("every frame in the batch is masked".into()));
    }
    Ok(n)
}

/// Returns `(p_t clamped, alpha_t, sign)` where `sign = dp_t/dscore`, zeroed
/// when the clamp is active.
fn focal_terms(score: f64, target: f64, cfg: &LossConfig) -> (f64, f64, f64) {
    let (p, alpha, sign) =
        if target > 0.5 { (score, cfg.alpha_pos, 1.0) } else { (1.0 - score, 1.0 - cfg.alpha_pos, -1.0) };
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let sign = if pc == p { sign } else { 0.0 };
    (pc, alpha, sign)
}

/// Mean over valid frames of `-α_t (1 - p_t)^γ ln p_t`.
pub fn focal_loss(scores: &Tensor, targets: &Tensor, mask: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let n = check_masked(scores, targets, mask)?;
    let mut sum = 0.0;
    for ((&s, &y), &m) in scores.data().iter().zip(targets.data()).zip(mask.data()) {
        if m > 0.0 {
            let (p, alpha, _) = focal_terms(s, y, cfg);
            sum -= alpha * (1.0 - p).powf(cfg.gamma) * p.ln();
        }
    }
    Ok(sum / n as f64)
}

/// Gradient of [`focal_loss`] with respect to `scores`.
pub fn focal_loss_backward(scores: &Tensor, targets: &Tensor, mask: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let n = check_masked(scores, targets, mask)? as f64;
    let g = cfg.gamma;
    let mut out = Tensor::zeros(scores.shape());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        if mask.data()[i] <= 0.0 {
            continue;
        }
        let (p, alpha, sign) = focal_terms(scores.data()[i], targets.data()[i], cfg);
        if sign == 0.0 {
            continue;
        }
        let q = 1.0 - p;
        let focus = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) * p.ln() };
        let dp = alpha * (focus - q.powf(g) / p);
        *o = sign * dp / n;
    }
    Ok(out)
}

/// `k = ceil(fraction · len)`, at least 1 and at most `len`. A tiny slack
/// keeps products such as `0.1 · 30` from rounding up to 4.
pub fn topk_count(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64 - 1e-9).ceil() as usize).clamp(1, len.max(1))
}

/// Indices of the `k` largest values, descending; equal values keep the
/// earlier index first.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Mean of the `ceil(fraction · T)` largest values, summed in frame order so
/// that `fraction = 1` reproduces the plain mean bit for bit.
pub fn topk_video_score(values: &[f64], fraction: f64) -> f64 {
    let k = topk_count(fraction, values.len());
    let mut idx = topk_indices(values, k);
    idx.sort_unstable();
    idx.iter().map(|&i| values[i]).sum::<f64>() / k as f64
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `labels`, in the
/// overflow-free form `softplus(z) - y z`.
pub fn video_cls_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::dim(format!("{} video scores vs {} labels", logits.len(), labels.len())));
    }
    let sum: f64 = logits.iter().zip(labels).map(|(&z, &y)| softplus(z) - y * z).sum();
    Ok(sum / logits.len() as f64)
}

pub fn video_cls_loss_backward(logits: &[f64], labels: &[f64]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits.iter().zip(labels).map(|(&z, &y)| (sigmoid_scalar(z) - y) / n).collect()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(0, ‖a − p‖² − ‖a − n‖² + margin)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (sq_dist(anchor, positive) - sq_dist(anchor, negative) + margin).max(0.0)
}

/// Gradients `(d anchor, d positive, d negative)`; all zero where the hinge is flat.
pub fn triplet_loss_backward(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = anchor.len();
    if triplet_loss(anchor, positive, negative, margin) <= 0.0 {
        return (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    }
    let mut ga = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let mut gn = vec![0.0; d];
    for i in 0..d {
        gp[i] = -2.0 * (anchor[i] - positive[i]);
        gn[i] = 2.0 * (anchor[i] - negative[i]);
        ga[i] = -gp[i] - gn[i];
    }
    (ga, gp, gn)
}

/// Frames `(video, time)` feeding each triplet mean, and the means themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub anchor_frames: Vec<(usize, usize)>,
    pub positive_frames: Vec<(usize, usize)>,
    pub negative_frames: Vec<(usize, usize)>,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

fn mean_embedding(emb: &Tensor, frames: &[(usize, usize)]) -> Result<Vec<f64>> {
    let (_, c, t) = emb.dims3()?;
    let mut out = vec![0.0; c];
    for &(b, f) in frames {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += emb.data()[(b * c + ch) * t + f];
        }
    }
    let n = frames.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

fn valid_frames(mask: &Tensor, b: usize) -> Result<Vec<usize>> {
    let (_, t) = mask.dims2()?;
    Ok((0..t).filter(|&i| mask.data()[b * t + i] > 0.0).collect())
}

/// Selects triplet frames from a batch.
///
/// Anchor: the top-k scored valid frames of each anomalous video. Positive:
/// frames with pseudo label 1 in anomalous videos, or the anchor frames when
/// there are none. Negative: every valid frame of the normal videos. Returns
/// `None` when the batch lacks either class.
pub fn build_triplet(
    embeddings: &Tensor,
    scores: &Tensor,
    pseudo: &Tensor,
    mask: &Tensor,
    video_labels: &[f64],
    fraction: f64,
) -> Result<Option<Triplet>> {
    let (b, _, t) = embeddings.dims3()?;
    for (what, m) in [("scores", scores), ("pseudo labels", pseudo), ("mask", mask)] {
        if m.shape() != [b, t] {
            return Err(Error::dim(format!("triplet {what} {:?} vs embeddings [{b}, _, {t}]", m.shape())));
        }
    }
    if video_labels.len() != b {
        return Err(Error::dim(format!("{} video labels for batch of {b}", video_labels.len())));
    }
    let mut anchor_frames = Vec::new();
    let mut positive_frames = Vec::new();
    let mut negative_frames = Vec::new();
    for (v, &label) in video_labels.iter().enumerate() {
        let valid = valid_frames(mask, v)?;
        if valid.is_empty() {
            continue;
        }
        if label > 0.5 {
            let vals: Vec<f64> = valid.iter().map(|&f| scores.data()[v * t + f]).collect();
            let k = topk_count(fraction, vals.len());
            anchor_frames.extend(topk_indices(&vals, k).into_iter().map(|i| (v, valid[i])));
            positive_frames.extend(valid.iter().filter(|&&f| pseudo.data()[v * t + f] > 0.5).map(|&f| (v, f)));
        } else {
            negative_frames.extend(valid.iter().map(|&f| (v, f)));
        }
    }
    if anchor_frames.is_empty() || negative_frames.is_empty() {
        return Ok(None);
    }
    if positive_frames.is_empty() {
        positive_frames = anchor_frames.clone();
    }
    Ok(Some(Triplet {
        anchor: mean_embedding(embeddings, &anchor_frames)?,
        positive: mean_embedding(embeddings, &positive_frames)?,
        negative: mean_embedding(embeddings, &negative_frames)?,
        anchor_frames,
        positive_frames,
        negative_frames,
    }))
}

impl Triplet {
    pub fn loss(&self, margin: f64) -> f64 {
        triplet_loss(&self.anchor, &self.positive, &self.negative, margin)
    }

    /// Scatters the triplet-loss gradient back onto the `[B, C, T]` embeddings.
    pub fn embedding_grad(&self, shape: &[usize], margin: f64) -> Result<Tensor> {
        let mut out = Tensor::zeros(shape);
        let (_, c, t) = out.dims3()?;
        let (ga, gp, gn) = triplet_loss_backward(&self.anchor, &self.positive, &self.negative, margin);
        for (frames, g) in [(&self.anchor_frames, ga), (&self.positive_frames, gp), (&self.negative_frames, gn)] {
            let n = frames.len() as f64;
            for &(b, f) in frames {
                for (ch, gv) in g.iter().enumerate() {
                    out.data_mut()[(b * c + ch) * t + f] += gv / n;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pse: f64,
    pub l_cls: f64,
    pub l_trip: f64,
    pub total: f64,
    pub sigma2: [f64; 3],
    /// Effective weights `1 / (2 σ_i²)`.
    pub weights: [f64; 3],
}

/// `Σ_i l_i / (2 σ_i²) + ln(1 + σ_i²)` with `σ_i² = exp(log_var_i)`.
pub fn total_loss(l: [f64; 3], log_var: &[f64]) -> Result<LossBreakdown> {
    if log_var.len() != 3 {
        return Err(Error::dim(format!("expected 3 log-variances, got {}", log_var.len())));
    }
    if let Some(bad) = l.iter().chain(log_var).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss component {bad}")));
    }
    let sigma2 = [log_var[0].exp(), log_var[1].exp(), log_var[2].exp()];
    let weights = sigma2.map(|s| 0.5 / s);
    let total = (0..3).map(|i| l[i] * weights[i] + sigma2[i].ln_1p()).sum();
    Ok(LossBreakdown { l_pse: l[0], l_cls: l[1], l_trip: l[2], total, sigma2, weights })
}

/// `(d total / d l_i, d total / d log_var_i)`.
pub fn total_loss_backward(l: [f64; 3], log_var: &[f64]) -> ([f64; 3], [f64; 3]) {
    let mut dl = [0.0; 3];
    let mut dr = [0.0; 3];
    for i in 0..3 {
        let s = log_var[i].exp();
        dl[i] = 0.5 / s;
        dr[i] = -l[i] * 0.5 / s + s / (1.0 + s);
    }
    (dl, dr)
}

/// Video classification loss on padded frame logits `[B, T]`: each video's
/// valid logits are top-k pooled, then scored with [`video_cls_loss`].
/// Returns the loss and its gradient with respect to `logits`.
pub fn masked_video_loss(logits: &Tensor, mask: &Tensor, labels: &[f64], fraction: f64) -> Result<(f64, Tensor)> {
    logits.expect_same_shape(mask)?;
    let (b, t) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::dim(format!("{} video labels for batch of {b}", labels.len())));
    }
    let mut pooled = Vec::with_capacity(b);
    let mut picks = Vec::with_capacity(b);
    for v in 0..b {
        let valid = valid_frames(mask, v)?;
        if valid.is_empty() {
            return Err(Error::EmptyLoss(format!("video {v} of the batch has no valid frames")));
        }
        let vals: Vec<f64> = valid.iter().map(|&f| logits.data()[v * t + f]).collect();
        let k = topk_count(fraction, vals.len());
        let mut idx: Vec<usize> = topk_indices(&vals, k).into_iter().map(|i| valid[i]).collect();
        idx.sort_unstable();
        pooled.push(idx.iter().map(|&f| logits.data()[v * t + f]).sum::<f64>() / k as f64);
        picks.push(idx);
    }
    let loss = video_cls_loss(&pooled, labels)?;
    let gpool = video_cls_loss_backward(&pooled, labels);
    let mut grad = Tensor::zeros(&[b, t]);
    for (v, idx) in picks.iter().enumerate() {
        let share = gpool[v] / idx.len() as f64;
        for &f in idx {
            grad.data_mut()[v * t + f] += share;
        }
    }
    Ok((loss, grad))
}

/// Per-batch supervision aligned with a padded `[B, T]` forward pass.
#[derive(Clone, Debug)]
pub struct BatchTargets {
    /// Binary frame pseudo labels `[B, T]`.
    pub pseudo: Tensor,
    /// 1 for real frames, 0 for padding, `[B, T]`.
    pub mask: Tensor,
    /// 0 normal, 1 anomalous, one per video.
    pub video_labels: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    pub triplet: Option<Triplet>,
    /// `d total / d frame_logits`.
    pub grad_logits: Tensor,
    pub grad_embeddings: Option<Tensor>,
    pub grad_log_var: [f64; 3],
}

/// Evaluates the full training objective on a forward pass and returns its
/// gradients with respect to the model outputs and the log-variances.
/// Switched-off loss terms contribute `l_i = 0`.
pub fn objective(
    out: &ForwardOutput,
    targets: &BatchTargets,
    log_var: &[f64],
    cfg: &LossConfig,
    ablation: &Ablation,
) -> Result<Objective> {
    let scores = &out.frame_scores;
    let logits = &out.frame_logits;
    let (b, t) = logits.dims2()?;
    if targets.video_labels.len() != b {
        return Err(Error::dim(format!("{} video labels for batch of {b}", targets.video_labels.len())));
    }

    let l_pse = if ablation.use_l_pse { focal_loss(scores, &targets.pseudo, &targets.mask, cfg)? } else { 0.0 };

    let (l_cls, g_cls) = masked_video_loss(logits, &targets.mask, &targets.video_labels, cfg.topk_fraction)?;

    let triplet = if ablation.use_l_trip {
        build_triplet(
            &out.embeddings,
            scores,
            &targets.pseudo,
            &targets.mask,
            &targets.video_labels,
            cfg.topk_fraction,
        )?
    } else {
        None
    };
    let l_trip = triplet.as_ref().map_or(0.0, |tr| tr.loss(cfg.margin));

    let l = [l_pse, l_cls, l_trip];
    let breakdown = total_loss(l, log_var)?;
    let (dl, grad_log_var) = total_loss_backward(l, log_var);

    let mut grad_logits = Tensor::zeros(&[b, t]);
    if ablation.use_l_pse {
        let gs = focal_loss_backward(scores, &targets.pseudo, &targets.mask, cfg)?;
        for ((g, &gsv), &s) in grad_logits.data_mut().iter_mut().zip(gs.data()).zip(scores.data()) {
            *g += dl[0] * gsv * s * (1.0 - s);
        }
    }
    for (g, &gc) in grad_logits.data_mut().iter_mut().zip(g_cls.data()) {
        *g += dl[1] * gc;
    }
    let grad_embeddings = match &triplet {
        Some(tr) => Some(tr.embedding_grad(out.embeddings.shape(), cfg.margin)?.map(|g| dl[2] * g)),
        None => None,
    };
    Ok(Objective { breakdown, triplet, grad_logits, grad_embeddings, grad_log_var })
}

//! Frame-level ranking metrics and a plug-in mutual-information estimator
//! for the pyramid-branch complementarity diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredFrames {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredFrames {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim(format!("{} scores vs {} labels", scores.len(), labels.len())));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {s}")));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    /// Groups of equal scores in the given order: `(positives, negatives)`.
    fn tie_blocks(&self, descending: bool) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            let o = self.scores[a].total_cmp(&self.scores[b]);
            if descending {
                o.reverse()
            } else {
                o
            }
        });
        let mut blocks: Vec<(usize, usize)> = Vec::new();
        let mut prev = None;
        for i in idx {
            let s = self.scores[i];
            if prev != Some(s) {
                blocks.push((0, 0));
                prev = Some(s);
            }
            let last = blocks.last_mut().expect("block pushed above");
            if self.labels[i] {
                last.0 += 1;
            } else {
                last.1 += 1;
            }
        }
        blocks
    }
}

/// `P(score_pos > score_neg) + ½ P(tie)`.
pub fn roc_auc(sf: &ScoredFrames) -> Result<f64> {
    let (p, n) = sf.counts();
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes ({p} positive, {n} negative)")));
    }
    let mut neg_below = 0.0;
    let mut wins = 0.0;
    for (bp, bn) in sf.tie_blocks(false) {
        wins += bp as f64 * (neg_below + 0.5 * bn as f64);
        neg_below += bn as f64;
    }
    Ok(wins / (p as f64 * n as f64))
}

/// Step-interpolated AP over the descending sweep, tied scores entering as one block.
pub fn average_precision(sf: &ScoredFrames) -> Result<f64> {
    let (p, _) = sf.counts();
    if p == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for (bp, bn) in sf.tie_blocks(true) {
        tp += bp;
        seen += bp + bn;
        if bp > 0 {
            ap += (bp as f64 / p as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiConfig {
    pub bins: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self { bins: 8 }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::config("MI estimator needs at least 2 bins"));
        }
        Ok(())
    }
}

/// Discretizes `values` into at most `bins` bins. Inputs with no more
/// distinct values than bins keep one bin per value; otherwise edges sit at
/// the empirical `i / bins` quantiles and a value's bin is the number of
/// edges at or below it.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let edges: Vec<f64> = if distinct.len() <= bins {
        distinct.into_iter().skip(1).collect()
    } else {
        let m = sorted.len();
        let mut e: Vec<f64> = (1..bins).map(|i| sorted[i * m / bins]).collect();
        e.dedup();
        e
    };
    values.iter().map(|v| edges.partition_point(|e| e <= v)).collect()
}

fn histogram(x: &[usize]) -> Vec<f64> {
    let n = x.iter().max().map_or(0, |m| m + 1);
    let mut h = vec![0.0; n];
    for &v in x {
        h[v] += 1.0;
    }
    h
}

/// Plug-in entropy in nats.
pub fn entropy_discrete(x: &[usize]) -> f64 {
    let m = x.len() as f64;
    -histogram(x).iter().filter(|&&c| c > 0.0).map(|&c| (c / m) * (c / m).ln()).sum::<f64>()
}

/// Plug-in mutual information `Σ p(x,y) ln[p(x,y) / (p(x)p(y))]` in nats.
pub fn mi_discrete(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::dim(format!("MI needs two equal sequences of length ≥ 2, got {} and {}", a.len(), b.len())));
    }
    let m = a.len() as f64;
    let ha = histogram(a);
    let hb = histogram(b);
    let nb = hb.len();
    let mut joint = vec![0.0; ha.len() * nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * nb + y] += 1.0;
    }
    let mut mi = 0.0;
    for (i, &c) in joint.iter().enumerate() {
        if c > 0.0 {
            let (x, y) = (i / nb, i % nb);
            mi += (c / m) * (c * m / (ha[x] * hb[y])).ln();
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplementarityReport {
    pub mi_i: f64,
    pub mi_j: f64,
    pub mi_joint: f64,
    pub ci: f64,
}

fn channel_means(f: &Tensor) -> Result<Vec<f64>> {
    let (_, c) = f.dims2()?;
    Ok(f.data().chunks(c).map(|r| r.iter().sum::<f64>() / c as f64).collect())
}

/// `(I(φ_i, φ_j; Y) − max(I(φ_i; Y), I(φ_j; Y))) / (I(φ_i; Y) + I(φ_j; Y))`
/// where each branch `[M, C]` is reduced to its channel mean per frame and
/// quantile-binned.
pub fn complementarity_index(
    feat_i: &Tensor,
    feat_j: &Tensor,
    labels: &[bool],
    cfg: &MiConfig,
) -> Result<ComplementarityReport> {
    cfg.validate()?;
    feat_i.expect_same_shape(feat_j)?;
    if labels.len() != feat_i.shape()[0] {
        return Err(Error::dim(format!("{} labels for {} frames", labels.len(), feat_i.shape()[0])));
    }
    let bi = quantile_bins(&channel_means(feat_i)?, cfg.bins);
    let bj = quantile_bins(&channel_means(feat_j)?, cfg.bins);
    let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let width = bj.iter().max().map_or(1, |m| m + 1);
    let pair: Vec<usize> = bi.iter().zip(&bj).map(|(&a, &b)| a * width + b).collect();
    let mi_i = mi_discrete(&bi, &y)?;
    let mi_j = mi_discrete(&bj, &y)?;
    let mi_joint = mi_discrete(&pair, &y)?;
    let denom = mi_i + mi_j;
    if denom < 1e-9 {
        return Err(Error::UndefinedMetric(format!("complementarity undefined: branch informations sum to {denom:e}")));
    }
    Ok(ComplementarityReport { mi_i, mi_j, mi_joint, ci: (mi_joint - mi_i.max(mi_j)) / denom })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sf(s: &[f64], l: &[u8]) -> ScoredFrames {
        ScoredFrames::new(s.to_vec(), l.iter().map(|&v| v == 1).collect()).unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&sf(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(roc_auc(&sf(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&sf(&[0.3; 5], &[0, 1, 0, 1, 1])).unwrap(), 0.5);
        assert!(matches!(roc_auc(&sf(&[0.1, 0.2], &[1, 1])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&sf(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&sf(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        let last = average_precision(&sf(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1])).unwrap();
        assert!((last - 0.25).abs() < 1e-15);
        assert!(average_precision(&sf(&[0.5], &[0])).is_err());
    }

    #[test]
    fn tied_block_enters_together() {
        // both items at 0.5 enter at once: precision 1/2 at recall 1
        assert_eq!(average_precision(&sf(&[0.5, 0.5], &[1, 0])).unwrap(), 0.5);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(ScoredFrames::new(vec![f64::NAN], vec![true]).is_err());
    }

    #[test]
    fn binning_keeps_small_alphabets() {
        assert_eq!(
            quantile_bins(&[1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 4),
            vec![1, 0, 1, 1, 1, 1, 1, 1, 1, 1]
        );
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b = quantile_bins(&v, 4);
        for k in 0..4 {
            assert_eq!(b.iter().filter(|&&x| x == k).count(), 25);
        }
    }

    #[test]
    fn self_information_is_entropy() {
        let a = [0, 1, 2, 2, 1, 0, 0, 3];
        let h = entropy_discrete(&a);
        assert!((mi_discrete(&a, &a).unwrap() - h).abs() < 1e-12);
        let relabeled: Vec<usize> = a.iter().map(|&x| 3 - x).collect();
        assert!((mi_discrete(&a, &relabeled).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn duplicated_branches_have_zero_ci() {
        let f = Tensor::new(&[6, 2], vec![0.1, 0.3, 0.9, 0.8, 0.2, 0.1, 0.7, 0.9, 0.4, 0.3, 0.95, 0.6]).unwrap();
        let y = [false, true, false, true, false, true];
        let r = complementarity_index(&f, &f, &y, &MiConfig { bins: 2 }).unwrap();
        assert!(r.ci.abs() < 1e-9);
    }
}

#![allow(dead_code)]

use dams_core::data::{synthesize, Dataset, SyntheticSpec};

/// Pairwise AUC: positives beating negatives, ties counting one half.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// AP from thresholding at every distinct score, highest first.
pub fn ap_thresholds(scores: &[f64], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / total_pos;
        let precision = tp / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        train_videos: 12,
        test_videos: 6,
        min_len: 12,
        max_len: 20,
        input_dim: 12,
        nuisance_dim: 4,
        durations: vec![2, 6],
        crops: 2,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_data(seed: u64) -> Dataset {
    synthesize(&tiny_spec(seed)).unwrap()
}

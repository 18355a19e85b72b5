//! Padded mini-batches with validity masks, class-stratified shuffling and
//! crop-score aggregation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::derived_rng;
use super::manifest::VideoRecord;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348;
const CROP_STREAM: u64 = 0x4352;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Record indices, in batch order.
    pub indices: Vec<usize>,
    /// `[B, Din, T_max]`, zero past each video's end.
    pub features: Tensor,
    /// `[B, T_max]`, 1 for real frames.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    pub video_labels: Vec<f64>,
    /// `[B, T_max]` when every record carries pseudo probabilities.
    pub pseudo_probs: Option<Tensor>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

pub enum CropChoice<'a> {
    Index(usize),
    Random(&'a mut ChaCha8Rng),
}

/// Pads the selected records to the longest one and stacks them.
pub fn assemble(records: &[VideoRecord], indices: &[usize], mut crops: CropChoice<'_>) -> Result<Batch> {
    let first = indices.first().map(|&i| &records[i]).ok_or_else(|| Error::Data("empty batch".into()))?;
    let din = first.input_dim();
    let tmax = indices.iter().map(|&i| records[i].len()).max().unwrap_or(0);
    let b = indices.len();
    let mut features = vec![0.0; b * din * tmax];
    let mut mask = vec![0.0; b * tmax];
    let all_pseudo = indices.iter().all(|&i| records[i].pseudo_probs.is_some());
    let mut pseudo = vec![0.0; b * tmax];
    let mut lengths = Vec::with_capacity(b);
    let mut video_labels = Vec::with_capacity(b);
    for (slot, &ri) in indices.iter().enumerate() {
        let r = &records[ri];
        if r.input_dim() != din {
            return Err(Error::Data(format!("video {} has {} dims, batch has {din}", r.id, r.input_dim())));
        }
        let crop = match &mut crops {
            CropChoice::Index(k) => *k,
            CropChoice::Random(rng) => rng.random_range(0..r.crops.len()),
        };
        let x = r.crops.get(crop).ok_or_else(|| Error::Data(format!("video {} has no crop {crop}", r.id)))?;
        let t = r.len();
        for c in 0..din {
            let dst = (slot * din + c) * tmax;
            features[dst..dst + t].copy_from_slice(&x.data()[c * t..(c + 1) * t]);
        }
        mask[slot * tmax..slot * tmax + t].iter_mut().for_each(|m| *m = 1.0);
        if let (true, Some(p)) = (all_pseudo, &r.pseudo_probs) {
            pseudo[slot * tmax..slot * tmax + t].copy_from_slice(p);
        }
        lengths.push(t);
        video_labels.push(r.label.as_f64());
    }
    Ok(Batch {
        indices: indices.to_vec(),
        features: Tensor::new(&[b, din, tmax], features)?,
        mask: Tensor::new(&[b, tmax], mask)?,
        lengths,
        video_labels,
        pseudo_probs: if all_pseudo { Some(Tensor::new(&[b, tmax], pseudo)?) } else { None },
    })
}

fn shuffle(v: &mut [usize], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Training order for one epoch: each class is shuffled on its own, then
/// the two lists are interleaved in proportion so every batch carries both
/// classes whenever the data allows. Chunked into batches of `batch_size`.
pub fn epoch_order(records: &[VideoRecord], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = derived_rng(seed, SHUFFLE_STREAM, epoch);
    let (mut anom, mut norm): (Vec<usize>, Vec<usize>) =
        (0..records.len()).partition(|&i| records[i].label.is_anomalous());
    shuffle(&mut anom, &mut rng);
    shuffle(&mut norm, &mut rng);
    let n = records.len();
    let mut merged = Vec::with_capacity(n);
    let (mut ia, mut inn) = (0, 0);
    for pos in 0..n {
        // keep the anomalous share of each prefix as close as possible to the global share
        let want = ((pos + 1) * anom.len()).div_ceil(n.max(1));
        if ia < anom.len() && (ia < want || inn >= norm.len()) {
            merged.push(anom[ia]);
            ia += 1;
        } else {
            merged.push(norm[inn]);
            inn += 1;
        }
    }
    merged.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Seeded crop picker for one training iteration.
pub fn crop_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    derived_rng(seed, CROP_STREAM, iteration)
}

/// One pass over `records`. Train mode uses the seeded stratified order of
/// epoch 0 and a random crop per video; eval mode keeps input order and
/// uses the first crop.
pub fn batch_iter(
    records: &[VideoRecord],
    batch_size: usize,
    seed: u64,
    mode: Mode,
) -> impl Iterator<Item = Result<Batch>> + '_ {
    let order = match mode {
        Mode::Train => epoch_order(records, batch_size, seed, 0),
        Mode::Eval => (0..records.len()).collect::<Vec<_>>().chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect(),
    };
    let mut rng = crop_rng(seed, 0);
    order.into_iter().map(move |idx| {
        let crops = match mode {
            Mode::Train => CropChoice::Random(&mut rng),
            Mode::Eval => CropChoice::Index(0),
        };
        assemble(records, &idx, crops)
    })
}

/// Elementwise mean of per-crop frame scores.
pub fn tencrop_aggregate(per_crop: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_crop.first().ok_or_else(|| Error::Data("no crop scores to aggregate".into()))?;
    if per_crop.iter().any(|c| c.len() != first.len()) {
        return Err(Error::dim("crop score sequences differ in length"));
    }
    let n = per_crop.len() as f64;
    Ok((0..first.len()).map(|t| per_crop.iter().map(|c| c[t]).sum::<f64>() / n).collect())
}

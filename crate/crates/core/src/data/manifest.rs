//! Video records and the on-disk dataset layout: `train.jsonl` and
//! `test.jsonl` manifests whose lines point at feature files relative to
//! the dataset directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feature_file::{read_feature_file, write_feature_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoLabel {
    Normal,
    Anomalous,
}

impl VideoLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            VideoLabel::Normal => 0.0,
            VideoLabel::Anomalous => 1.0,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == VideoLabel::Anomalous
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// Per-crop features, each `[Din, T]`.
    pub crops: Vec<Tensor>,
    pub label: VideoLabel,
    pub frame_gt: Option<Vec<f64>>,
    pub pseudo_probs: Option<Vec<f64>>,
}

impl VideoRecord {
    pub fn input_dim(&self) -> usize {
        self.crops[0].shape()[0]
    }

    pub fn len(&self) -> usize {
        self.crops[0].shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.crops.first().ok_or_else(|| Error::Data(format!("video {} has no crops", self.id)))?;
        let (din, t) = first.dims2()?;
        if let Some(c) = self.crops.iter().find(|c| c.shape() != [din, t]) {
            return Err(Error::Data(format!(
                "video {}: crop shape {:?} differs from {:?}",
                self.id,
                c.shape(),
                first.shape()
            )));
        }
        for (what, v) in [("frame_gt", &self.frame_gt), ("pseudo_probs", &self.pseudo_probs)] {
            if let Some(v) = v {
                if v.len() != t {
                    return Err(Error::Data(format!("video {}: {what} has {} frames, features {t}", self.id, v.len())));
                }
            }
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordDescriptor {
    pub id: String,
    pub label: VideoLabel,
    pub crops: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_gt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_probs: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const TEST_MANIFEST: &str = "test.jsonl";

fn vector_file(v: &[f64]) -> Result<Tensor> {
    Tensor::new(&[v.len()], v.to_vec())
}

/// Writes each record's tensors under `features/` and one manifest line per record.
pub fn write_split(dir: &Path, manifest: &str, records: &[VideoRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = Vec::new();
    for r in records {
        r.validate()?;
        let mut desc = RecordDescriptor {
            id: r.id.clone(),
            label: r.label,
            crops: Vec::new(),
            frame_gt: None,
            pseudo_probs: None,
        };
        for (i, c) in r.crops.iter().enumerate() {
            let rel = PathBuf::from(format!("features/{}.crop{i}.feat", r.id));
            write_feature_file(dir.join(&rel), c)?;
            desc.crops.push(rel);
        }
        if let Some(gt) = &r.frame_gt {
            let rel = PathBuf::from(format!("labels/{}.gt.feat", r.id));
            write_feature_file(dir.join(&rel), &vector_file(gt)?)?;
            desc.frame_gt = Some(rel);
        }
        if let Some(p) = &r.pseudo_probs {
            let rel = PathBuf::from(format!("labels/{}.pseudo.feat", r.id));
            write_feature_file(dir.join(&rel), &vector_file(p)?)?;
            desc.pseudo_probs = Some(rel);
        }
        lines.push(serde_json::to_string(&desc)?);
    }
    let path = dir.join(manifest);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let t = read_feature_file(path)?;
    if t.rank() != 1 {
        return Err(Error::Data(format!("{}: expected a rank-1 file, got {:?}", path.display(), t.shape())));
    }
    Ok(t.into_data())
}

pub fn read_split(dir: &Path, manifest: &str) -> Result<Vec<VideoRecord>> {
    let path = dir.join(manifest);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let desc: RecordDescriptor =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let crops = desc.crops.iter().map(|p| read_feature_file(dir.join(p))).collect::<Result<Vec<_>>>()?;
        let rec = VideoRecord {
            id: desc.id,
            crops,
            label: desc.label,
            frame_gt: desc.frame_gt.map(|p| read_vector(&dir.join(p))).transpose()?,
            pseudo_probs: desc.pseudo_probs.map(|p| read_vector(&dir.join(p))).transpose()?,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_split(dir, TRAIN_MANIFEST, &self.train)?;
        write_split(dir, TEST_MANIFEST, &self.test)
    }

    /// Loads both splits. A missing test manifest yields an empty test split.
    pub fn load(dir: &Path) -> Result<Self> {
        let train = read_split(dir, TRAIN_MANIFEST)?;
        let test = if dir.join(TEST_MANIFEST).exists() { read_split(dir, TEST_MANIFEST)? } else { Vec::new() };
        Ok(Self { train, test })
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.train.first().or(self.test.first()).map(VideoRecord::input_dim)
    }
}

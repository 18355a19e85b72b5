//! Deterministic training loop: Adam over every parameter (including the
//! loss log-variances), periodic validation with best-AUC selection,
//! checkpoints that resume bit-for-bit, and ablation sweeps.

use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{assemble, crop_rng, derived_rng, epoch_order, tencrop_aggregate, CropChoice, Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::losses::{objective, BatchTargets, LossConfig};
use crate::metrics::{average_precision, roc_auc, ScoredFrames};
use crate::model::{Ablation, Model, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "dams-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const DROPOUT_STREAM: u64 = 0x4450;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub validate_every: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Pseudo probabilities above this become positive frame targets.
    pub pseudo_threshold: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            validate_every: 100,
            batch_size: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            pseudo_threshold: 0.5,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.validate_every == 0 || self.batch_size == 0 {
            return Err(Error::config("validate_every and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate and epsilon must be positive, weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(Error::config(format!("pseudo_threshold {} outside (0, 1)", self.pseudo_threshold)));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Strict JSON parse: unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of everything that shapes the training trajectory. The
    /// iteration budget is excluded so a run can be resumed and extended.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.max_iterations = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            state: AdamState { t: 0, m: zeros(), v: zeros() },
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.state.m).zip(&mut self.state.v) {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g[i] + self.weight_decay * w[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                w[i] -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

fn snapshot(store: &ParamStore) -> (Vec<NamedTensor>, Vec<NamedTensor>) {
    (
        store.params().iter().map(|p| NamedTensor { name: p.name.clone(), value: p.value.clone() }).collect(),
        store.buffers().iter().map(|b| NamedTensor { name: b.name.clone(), value: b.value.clone() }).collect(),
    )
}

fn restore(store: &mut ParamStore, params: &[NamedTensor], buffers: &[NamedTensor]) -> Result<()> {
    if params.len() != store.params().len() || buffers.len() != store.buffers().len() {
        return Err(Error::config("checkpoint layout does not match the configured model"));
    }
    for (dst, src) in store.params_mut().iter_mut().zip(params) {
        if dst.name != src.name || dst.value.shape() != src.value.shape() {
            return Err(Error::config(format!("checkpoint parameter {} does not match {}", src.name, dst.name)));
        }
        dst.value = src.value.clone();
    }
    for (dst, src) in store.buffers_mut().iter_mut().zip(buffers) {
        if dst.name != src.name || dst.value.shape() != src.value.shape() {
            return Err(Error::config(format!("checkpoint buffer {} does not match {}", src.name, dst.name)));
        }
        dst.value = src.value.clone();
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestState {
    pub auc: f64,
    pub ap: f64,
    pub iteration: u64,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub iteration: u64,
    pub seed: u64,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
    pub optimizer: AdamState,
    pub best: Option<BestState>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: not a checkpoint: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the model and loads the selected weights: the best
    /// validation snapshot when `prefer_best` and one exists, else the
    /// latest.
    pub fn model(&self, prefer_best: bool) -> Result<(Model, ParamStore)> {
        let (model, mut store) = Model::new(&self.config.model, &self.config.ablation, self.seed)?;
        match (&self.best, prefer_best) {
            (Some(b), true) => restore(&mut store, &b.params, &b.buffers)?,
            _ => restore(&mut store, &self.params, &self.buffers)?,
        }
        Ok((model, store))
    }
}

/// One JSON log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub iter: u64,
    pub l_pse: f64,
    pub l_cls: f64,
    pub l_trip: f64,
    pub total: f64,
    pub sigma2: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoReport {
    pub id: String,
    pub label: String,
    pub frames: usize,
    pub mean_score: f64,
    pub max_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    pub per_video: Vec<VideoReport>,
}

/// Frame scores of one video, averaged over its crops. Each crop runs
/// alone in eval mode, so no padding reaches the pooled statistics.
pub fn score_video(model: &Model, store: &ParamStore, rec: &VideoRecord) -> Result<Vec<f64>> {
    let per_crop = rec.crops.iter().map(|c| model.score_sequence(store, c)).collect::<Result<Vec<_>>>()?;
    tencrop_aggregate(&per_crop)
}

/// Frame-level AUC/AP over all frames of `records`, plus per-video scores.
pub fn evaluate(model: &Model, store: &ParamStore, records: &[VideoRecord]) -> Result<(EvalReport, Vec<Vec<f64>>)> {
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut per_video = Vec::with_capacity(records.len());
    let mut scores = Vec::with_capacity(records.len());
    for rec in records {
        let s = score_video(model, store, rec)?;
        let gt =
            rec.frame_gt.as_ref().ok_or_else(|| Error::Data(format!("video {} has no frame ground truth", rec.id)))?;
        all_scores.extend_from_slice(&s);
        all_labels.extend(gt.iter().map(|&g| g > 0.5));
        per_video.push(VideoReport {
            id: rec.id.clone(),
            label: if rec.label.is_anomalous() { "anomalous" } else { "normal" }.to_string(),
            frames: s.len(),
            mean_score: s.iter().sum::<f64>() / s.len() as f64,
            max_score: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        scores.push(s);
    }
    let sf = ScoredFrames::new(all_scores, all_labels)?;
    Ok((EvalReport { auc: roc_auc(&sf)?, ap: average_precision(&sf)?, per_video }, scores))
}

pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    opt: Adam,
    iteration: u64,
    best: Option<BestState>,
    train: &'d [VideoRecord],
    val: &'d [VideoRecord],
    order: Option<(u64, Vec<Vec<usize>>)>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &TrainConfig, train: &'d [VideoRecord], val: &'d [VideoRecord]) -> Result<Self> {
        cfg.validate()?;
        let n_anom = train.iter().filter(|r| r.label.is_anomalous()).count();
        if n_anom == 0 || n_anom == train.len() {
            return Err(Error::Data("training split needs both normal and anomalous videos".into()));
        }
        if let Some(r) = train.iter().chain(val).find(|r| r.input_dim() != cfg.model.input_dim) {
            return Err(Error::Data(format!(
                "video {} has {}-dim features, model expects {}",
                r.id,
                r.input_dim(),
                cfg.model.input_dim
            )));
        }
        let (model, store) = Model::new(&cfg.model, &cfg.ablation, cfg.seed)?;
        let opt = Adam::new(cfg, &store);
        Ok(Self { cfg: cfg.clone(), model, store, opt, iteration: 0, best: None, train, val, order: None })
    }

    /// Continues from `ck`, whose config must hash equal to `cfg` (the
    /// iteration budget may differ).
    pub fn resume(
        cfg: &TrainConfig,
        ck: &Checkpoint,
        train: &'d [VideoRecord],
        val: &'d [VideoRecord],
    ) -> Result<Self> {
        if ck.config_hash != cfg.hash() {
            return Err(Error::config("checkpoint was produced by a different configuration"));
        }
        let mut t = Self::new(cfg, train, val)?;
        restore(&mut t.store, &ck.params, &ck.buffers)?;
        if ck.optimizer.m.len() != t.store.params().len() || ck.optimizer.v.len() != t.store.params().len() {
            return Err(Error::config("optimizer state does not match the model"));
        }
        t.opt.state = ck.optimizer.clone();
        t.iteration = ck.iteration;
        t.best = ck.best.clone();
        Ok(t)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn best(&self) -> Option<&BestState> {
        self.best.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (params, buffers) = snapshot(&self.store);
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            config_hash: self.cfg.hash(),
            iteration: self.iteration,
            seed: self.cfg.seed,
            params,
            buffers,
            optimizer: self.opt.state.clone(),
            best: self.best.clone(),
        }
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let bs = self.cfg.batch_size;
        let per_epoch = self.train.len().div_ceil(bs) as u64;
        let epoch = self.iteration / per_epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.train, bs, self.cfg.seed, epoch)));
        }
        let (_, order) = self.order.as_ref().expect("order cached above");
        order[(self.iteration % per_epoch) as usize].clone()
    }

    fn targets(&self, batch: &crate::data::Batch) -> Result<BatchTargets> {
        let (b, t) = batch.mask.dims2()?;
        let mut pseudo = Tensor::zeros(&[b, t]);
        match &batch.pseudo_probs {
            Some(p) => {
                for (v, &label) in batch.video_labels.iter().enumerate() {
                    // frames of a known-normal video are never positive
                    if label > 0.5 {
                        for f in 0..t {
                            let i = v * t + f;
                            pseudo.data_mut()[i] = (p.data()[i] > self.cfg.pseudo_threshold) as u8 as f64;
                        }
                    }
                }
            }
            None if self.cfg.ablation.use_l_pse => {
                return Err(Error::Data("pseudo-label loss enabled but training videos lack pseudo_probs".into()));
            }
            None => {}
        }
        Ok(BatchTargets { pseudo, mask: batch.mask.clone(), video_labels: batch.video_labels.clone() })
    }

    /// One optimization step. Returns `None` when the batch was skipped.
    pub fn step(&mut self) -> Result<Option<LogLine>> {
        let it = self.iteration;
        let idx = self.batch_indices();
        let mut crop = crop_rng(self.cfg.seed, it);
        let batch = assemble(self.train, &idx, CropChoice::Random(&mut crop))?;
        let targets = self.targets(&batch)?;
        let mut ctx = Ctx::train().with_dropout_rng(derived_rng(self.cfg.seed, DROPOUT_STREAM, it));
        self.iteration += 1;

        let result = self.model.forward(&self.store, &batch.features, &mut ctx).and_then(|(out, cache)| {
            let log_var = self.store.value(self.model.log_var).data().to_vec();
            let obj = objective(&out, &targets, &log_var, &self.cfg.loss, &self.cfg.ablation)?;
            Ok((cache, obj))
        });
        let (cache, obj) = match result {
            Ok(v) => v,
            Err(e @ (Error::DegenerateBatch(_) | Error::EmptyLoss(_))) => {
                warn!("iteration {}: skipping batch: {e}", it + 1);
                return Ok(None);
            }
            Err(Error::NonFinite(m)) => {
                return Err(Error::NonFinite(format!("iteration {}: {m}", it + 1)));
            }
            Err(e) => return Err(e),
        };
        if !obj.breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("iteration {}: total loss {}", it + 1, obj.breakdown.total)));
        }

        self.store.zero_grads();
        self.model.backward(&mut self.store, &cache, &obj.grad_logits, obj.grad_embeddings.as_ref())?;
        for (g, d) in self.store.grad_mut(self.model.log_var).data_mut().iter_mut().zip(obj.grad_log_var) {
            *g += d;
        }
        if let Some(p) = self.store.params().iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("iteration {}: gradient of {}", it + 1, p.name)));
        }
        self.opt.step(&mut self.store);
        ctx.commit(&mut self.store);

        let b = &obj.breakdown;
        let mut line = LogLine {
            iter: self.iteration,
            l_pse: b.l_pse,
            l_cls: b.l_cls,
            l_trip: b.l_trip,
            total: b.total,
            sigma2: b.sigma2,
            val_auc: None,
            val_ap: None,
        };
        if self.iteration.is_multiple_of(self.cfg.validate_every as u64) && !self.val.is_empty() {
            let (report, _) = evaluate(&self.model, &self.store, self.val)?;
            line.val_auc = Some(report.auc);
            line.val_ap = Some(report.ap);
            info!("iter {}: total {:.4} val auc {:.4} ap {:.4}", self.iteration, b.total, report.auc, report.ap);
            if self.best.as_ref().is_none_or(|best| report.auc > best.auc) {
                let (params, buffers) = snapshot(&self.store);
                self.best =
                    Some(BestState { auc: report.auc, ap: report.ap, iteration: self.iteration, params, buffers });
            }
        } else {
            debug!("iter {}: total {:.4}", self.iteration, b.total);
        }
        Ok(Some(line))
    }

    /// Steps until `max_iterations`, handing each log line to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&LogLine) -> Result<()>) -> Result<()> {
        while self.iteration < self.cfg.max_iterations as u64 {
            if let Some(line) = self.step()? {
                sink(&line)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogLine>,
}

/// Trains on `data.train`, validating on `data.test`.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg, &data.train, &data.test)?;
    let mut log = Vec::new();
    t.run(|l| {
        log.push(l.clone());
        Ok(())
    })?;
    Ok(TrainOutcome { checkpoint: t.checkpoint(), log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub aps: Vec<f64>,
    pub median_auc: f64,
    pub median_ap: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains each variant once per seed with otherwise identical settings and
/// reports test AUC/AP of the best validation snapshot.
pub fn ablate(cfg: &TrainConfig, data: &Dataset, variants: &[Ablation], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut aucs = Vec::new();
        let mut aps = Vec::new();
        for &seed in seeds {
            let run_cfg = TrainConfig { seed, ablation: variant.clone(), ..cfg.clone() };
            let out = train(&run_cfg, data)?;
            let (model, store) = out.checkpoint.model(true)?;
            let (report, _) = evaluate(&model, &store, &data.test)?;
            info!("ablation {} seed {seed}: auc {:.4} ap {:.4}", variant.label(), report.auc, report.ap);
            aucs.push(report.auc);
            aps.push(report.ap);
        }
        rows.push(AblationRow {
            variant: variant.label(),
            seeds: seeds.to_vec(),
            median_auc: median(&aucs),
            median_ap: median(&aps),
            aucs,
            aps,
        });
    }
    Ok(rows)
}

/// The full model followed by each single-switch-off variant.
pub fn standard_variants() -> Vec<Ablation> {
    ["full", "no-amtpn", "no-cbam", "no-aff", "no-tce", "no-tpp", "no-l_pse", "no-l_trip"]
        .iter()
        .map(|l| Ablation::from_label(l).expect("known labels"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticSpec};

    fn tiny_data() -> Dataset {
        synthesize(&SyntheticSpec {
            train_videos: 8,
            test_videos: 4,
            min_len: 10,
            max_len: 16,
            input_dim: 12,
            nuisance_dim: 4,
            durations: vec![2, 6],
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            max_iterations: 6,
            validate_every: 3,
            batch_size: 4,
            model: ModelConfig { input_dim: 12, channels: 8, depth: 1, scales: vec![1, 3], ..ModelConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let data = tiny_data();
        let cfg = TrainConfig { max_iterations: 0, ..tiny_cfg() };
        let out = train(&cfg, &data).unwrap();
        let (_, init) = Model::new(&cfg.model, &cfg.ablation, cfg.seed).unwrap();
        let (params, buffers) = snapshot(&init);
        assert_eq!(out.checkpoint.params, params);
        assert_eq!(out.checkpoint.buffers, buffers);
        assert!(out.log.is_empty());
    }

    #[test]
    fn runs_are_deterministic_and_validate_periodically() {
        let data = tiny_data();
        let a = train(&tiny_cfg(), &data).unwrap();
        let b = train(&tiny_cfg(), &data).unwrap();
        assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json());
        assert_eq!(a.log, b.log);
        let validated: Vec<u64> = a.log.iter().filter(|l| l.val_auc.is_some()).map(|l| l.iter).collect();
        assert_eq!(validated, vec![3, 6]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(TrainConfig::from_json("{\"max_iters\": 3}"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json("{\"ablation\": {\"use_amptn\": false}}"), Err(Error::Config(_))));
        let c = TrainConfig::from_json("{\"max_iterations\": 3, \"ablation\": {\"use_tce\": false}}").unwrap();
        assert_eq!(c.max_iterations, 3);
        assert!(!c.ablation.use_tce);
    }

    #[test]
    fn hash_ignores_budget_only() {
        let a = tiny_cfg();
        let b = TrainConfig { max_iterations: 99, ..tiny_cfg() };
        let c = TrainConfig { seed: 1, ..tiny_cfg() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec(vec![1.0, -1.0]));
        store.grad_mut(p).data_mut().copy_from_slice(&[0.5, -3.0]);
        let mut opt = Adam::new(&TrainConfig::default(), &store);
        opt.step(&mut store);
        let w = store.value(p).data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }
}

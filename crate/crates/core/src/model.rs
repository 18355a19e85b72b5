//! Main scoring path: temporal-conv backbone → pyramid → attention →
//! per-frame classifier head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amtpn::{Amtpn, AmtpnCache, PyramidConfig};
use crate::cbam::{Cbam, CbamCache, CbamConfig};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm1d, Conv1d, Ctx};
use crate::ops::{self, BnCache};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per-frame input feature dimension.
    pub input_dim: usize,
    /// Backbone / pyramid / attention width.
    pub channels: usize,
    /// Number of residual temporal-conv blocks in the backbone.
    pub depth: usize,
    pub scales: Vec<usize>,
    pub reduction: usize,
    pub cbam: CbamConfig,
    /// Head hidden width; `channels / 2` when absent.
    pub head_hidden: Option<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            channels: 128,
            depth: 2,
            scales: vec![1, 3, 9, 27],
            reduction: 4,
            cbam: CbamConfig::default(),
            head_hidden: None,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Small single-core configuration used for the synthetic benchmark.
    pub fn desk(input_dim: usize) -> Self {
        Self { input_dim, channels: 16, depth: 1, ..Self::default() }
    }

    pub fn head_width(&self) -> usize {
        self.head_hidden.unwrap_or((self.channels / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.channels == 0 || self.head_width() == 0 {
            return Err(Error::config("input_dim, channels and head width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.pyramid(&Ablation::default()).validate()?;
        self.cbam.validate(self.channels)
    }

    pub fn pyramid(&self, ablation: &Ablation) -> PyramidConfig {
        PyramidConfig {
            scales: if ablation.use_tpp { self.scales.clone() } else { vec![1] },
            channels: self.channels,
            reduction: self.reduction,
        }
    }
}

/// Component switches. Disabling a module replaces it with its neutral
/// element: identity for whole modules, a gate fixed at 1 for attention and
/// context gates, uniform weights for fusion, scale set `{1}` for pyramid
/// pooling, and a zero term for losses.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_amtpn: bool,
    pub use_cbam: bool,
    pub use_ca: bool,
    pub use_sa: bool,
    pub use_aff: bool,
    pub use_tce: bool,
    pub use_tpp: bool,
    pub use_l_pse: bool,
    pub use_l_trip: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_amtpn: true,
            use_cbam: true,
            use_ca: true,
            use_sa: true,
            use_aff: true,
            use_tce: true,
            use_tpp: true,
            use_l_pse: true,
            use_l_trip: true,
        }
    }
}

impl Ablation {
    pub fn label(&self) -> String {
        let full = Ablation::default();
        if *self == full {
            return "full".to_string();
        }
        let mut off = Vec::new();
        let pairs = [
            (self.use_amtpn, "amtpn"),
            (self.use_cbam, "cbam"),
            (self.use_ca, "ca"),
            (self.use_sa, "sa"),
            (self.use_aff, "aff"),
            (self.use_tce, "tce"),
            (self.use_tpp, "tpp"),
            (self.use_l_pse, "l_pse"),
            (self.use_l_trip, "l_trip"),
        ];
        for (on, name) in pairs {
            if !on {
                off.push(format!("no-{name}"));
            }
        }
        off.join("+")
    }

    /// Parses a label such as `full`, `no-amtpn` or `no-ca+no-sa`.
    pub fn from_label(label: &str) -> Result<Self> {
        let mut a = Ablation::default();
        if label == "full" {
            return Ok(a);
        }
        for part in label.split('+') {
            let flag = match part.strip_prefix("no-") {
                Some("amtpn") => &mut a.use_amtpn,
                Some("cbam") => &mut a.use_cbam,
                Some("ca") => &mut a.use_ca,
                Some("sa") => &mut a.use_sa,
                Some("aff") => &mut a.use_aff,
                Some("tce") => &mut a.use_tce,
                Some("tpp") => &mut a.use_tpp,
                Some("l_pse") => &mut a.use_l_pse,
                Some("l_trip") => &mut a.use_l_trip,
                _ => return Err(Error::config(format!("unknown ablation switch {part:?}"))),
            };
            *flag = false;
        }
        Ok(a)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv: Conv1d,
    bn: BatchNorm1d,
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Tensor,
    bn: BnCache,
    pre_relu: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, T]`.
    pub frame_logits: Tensor,
    /// `sigmoid(frame_logits)`, `[B, T]`.
    pub frame_scores: Tensor,
    /// Penultimate features `[B, C, T]`.
    pub embeddings: Tensor,
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    input: Tensor,
    blocks: Vec<BlockCache>,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    backbone: BackboneCache,
    backbone_out: Tensor,
    amtpn: Option<AmtpnCache>,
    amtpn_out: Tensor,
    cbam: Option<CbamCache>,
    embeddings: Tensor,
    head: HeadCache,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    pre: Tensor,
    hidden: Tensor,
    dropout_mask: Option<Vec<f64>>,
}

impl ModelCache {
    pub fn amtpn(&self) -> Option<&AmtpnCache> {
        self.amtpn.as_ref()
    }

    pub fn cbam(&self) -> Option<&CbamCache> {
        self.cbam.as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    input_proj: Conv1d,
    blocks: Vec<ResBlock>,
    pub amtpn: Option<Amtpn>,
    pub cbam: Option<Cbam>,
    head1: Conv1d,
    head2: Conv1d,
    /// Uncertainty log-variances `ln σ_i²` for the three loss terms.
    pub log_var: ParamId,
}

impl Model {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new(cfg: &ModelConfig, ablation: &Ablation, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let input_proj = Conv1d::new(&mut store, "backbone.proj", cfg.input_dim, c, 1, 0, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|i| ResBlock {
                conv: Conv1d::new(&mut store, &format!("backbone.block{i}.conv"), c, c, 3, 1, &mut rng),
                bn: BatchNorm1d::new(&mut store, &format!("backbone.block{i}.bn"), c),
            })
            .collect();
        let amtpn = if ablation.use_amtpn {
            let mut m = Amtpn::new(&mut store, "amtpn", cfg.pyramid(ablation), &mut rng)?;
            m.use_aff = ablation.use_aff;
            m.use_tce = ablation.use_tce;
            Some(m)
        } else {
            None
        };
        let cbam = if ablation.use_cbam {
            let mut m = Cbam::new(&mut store, "cbam", c, &cfg.cbam, &mut rng)?;
            m.use_channel = ablation.use_ca;
            m.use_temporal = ablation.use_sa;
            Some(m)
        } else {
            None
        };
        let h = cfg.head_width();
        let head1 = Conv1d::new(&mut store, "head.fc1", c, h, 1, 0, &mut rng);
        let head2 = Conv1d::new(&mut store, "head.fc2", h, 1, 1, 0, &mut rng);
        let log_var = store.add("uncertainty.log_var", Tensor::zeros(&[3]));
        Ok((
            Self {
                cfg: cfg.clone(),
                ablation: ablation.clone(),
                input_proj,
                blocks,
                amtpn,
                cbam,
                head1,
                head2,
                log_var,
            },
            store,
        ))
    }

    /// Input projection followed by residual `{conv k=3 → BN → relu}` blocks.
    pub fn backbone_forward(&self, store: &ParamStore, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, BackboneCache)> {
        let (_, din, _) = x.dims3()?;
        if din != self.cfg.input_dim {
            return Err(Error::dim(format!("model expects {}-dim features, got {din}", self.cfg.input_dim)));
        }
        let mut h = self.input_proj.forward(store, x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let c = blk.conv.forward(store, &h)?;
            let (pre_relu, bn) = blk.bn.forward(store, &c, ctx)?;
            let out = h.zip_map(&pre_relu, |a, b| a + b.max(0.0))?;
            blocks.push(BlockCache { input: std::mem::replace(&mut h, out), bn, pre_relu });
        }
        Ok((h, BackboneCache { input: x.clone(), blocks }))
    }

    pub fn backbone_backward(&self, store: &mut ParamStore, cache: &BackboneCache, grad: Tensor) -> Result<()> {
        let mut g = grad;
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let gn = ops::relu_backward(&bc.pre_relu, &g)?;
            let gc = blk.bn.backward(store, &bc.bn, &gn)?;
            let gin = blk.conv.backward(store, &bc.input, &gc)?;
            g.add_assign(&gin)?;
        }
        self.input_proj.backward(store, &cache.input, &g)?;
        Ok(())
    }

    /// `conv1x1 → relu → dropout → conv1x1`, giving `[B, T]` logits.
    pub fn head_forward(&self, store: &ParamStore, embeddings: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, HeadCache)> {
        let pre = self.head1.forward(store, embeddings)?;
        let mut hidden = ops::relu(&pre);
        let dropout_mask = if ctx.mode.is_train() && self.cfg.dropout > 0.0 {
            let rng = ctx
                .dropout_rng
                .as_mut()
                .ok_or_else(|| Error::config("dropout > 0 in train mode needs a dropout RNG"))?;
            let keep = 1.0 - self.cfg.dropout;
            let mask: Vec<f64> =
                (0..hidden.len()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
            for (h, m) in hidden.data_mut().iter_mut().zip(&mask) {
                *h *= m;
            }
            Some(mask)
        } else {
            None
        };
        let (nb, _, t) = embeddings.dims3()?;
        let logits = self.head2.forward(store, &hidden)?.reshape(&[nb, t])?;
        Ok((logits, HeadCache { pre, hidden, dropout_mask }))
    }

    /// Returns the gradient with respect to the embeddings.
    pub fn head_backward(
        &self,
        store: &mut ParamStore,
        embeddings: &Tensor,
        cache: &HeadCache,
        grad_logits: &Tensor,
    ) -> Result<Tensor> {
        let (nb, _, t) = embeddings.dims3()?;
        let g3 = grad_logits.clone().reshape(&[nb, 1, t])?;
        let mut gh = self.head2.backward(store, &cache.hidden, &g3)?;
        if let Some(mask) = &cache.dropout_mask {
            for (g, m) in gh.data_mut().iter_mut().zip(mask) {
                *g *= m;
            }
        }
        let gp = ops::relu_backward(&cache.pre, &gh)?;
        self.head1.backward(store, embeddings, &gp)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, ctx: &mut Ctx) -> Result<(ForwardOutput, ModelCache)> {
        let (backbone_out, backbone) = self.backbone_forward(store, x, ctx)?;
        let (amtpn_out, amtpn) = match &self.amtpn {
            Some(m) => {
                let (o, c) = m.forward(store, &backbone_out, ctx)?;
                (o, Some(c))
            }
            None => (backbone_out.clone(), None),
        };
        let (embeddings, cbam) = match &self.cbam {
            Some(m) => {
                let (o, c) = m.forward(store, &amtpn_out)?;
                (o, Some(c))
            }
            None => (amtpn_out.clone(), None),
        };
        let (frame_logits, head) = self.head_forward(store, &embeddings, ctx)?;
        let frame_scores = ops::sigmoid(&frame_logits);
        Ok((
            ForwardOutput { frame_logits, frame_scores, embeddings: embeddings.clone() },
            ModelCache { backbone, backbone_out, amtpn, amtpn_out, cbam, embeddings, head },
        ))
    }

    /// Accumulates parameter gradients given `d loss / d frame_logits` and,
    /// optionally, `d loss / d embeddings`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &ModelCache,
        grad_logits: &Tensor,
        grad_embeddings: Option<&Tensor>,
    ) -> Result<()> {
        let mut g_emb = self.head_backward(store, &cache.embeddings, &cache.head, grad_logits)?;
        if let Some(ge) = grad_embeddings {
            g_emb.add_assign(ge)?;
        }
        let g_amtpn_out = match (&self.cbam, &cache.cbam) {
            (Some(m), Some(c)) => m.backward(store, &cache.amtpn_out, c, &g_emb)?,
            _ => g_emb,
        };
        let g_backbone = match (&self.amtpn, &cache.amtpn) {
            (Some(m), Some(c)) => m.backward(store, &cache.backbone_out, c, &g_amtpn_out)?,
            _ => g_amtpn_out,
        };
        self.backbone_backward(store, &cache.backbone, g_backbone)
    }

    /// Eval-mode frame scores for one `[Din, T]` sequence.
    pub fn score_sequence(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<f64>> {
        let (din, t) = features.dims2()?;
        let x = features.clone().reshape(&[1, din, t])?;
        let (out, _) = self.forward(store, &x, &mut Ctx::eval())?;
        Ok(out.frame_scores.into_data())
    }
}

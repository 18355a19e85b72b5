//! Adaptive multiscale temporal pyramid.
//!
//! Three stages applied to a `[B, C, T]` feature map:
//!
//! 1. **Pyramid pooling** – one branch per odd scale `s`:
//!    `relu(bn(conv1x1(avg_pool(x; s, stride 1, pad s/2))))`. Odd scales with
//!    half-width padding keep every branch at length `T`.
//! 2. **Adaptive fusion** – each branch is summarized by global average
//!    pooling and a shared two-layer MLP; the concatenated descriptors feed a
//!    linear head whose softmax gives one weight per scale. The weighted sum
//!    of branches is refined by a 1×1 convolution.
//! 3. **Context enhancement** – squeeze-excite channel gating:
//!    `f ⊙ sigmoid(W2 · relu(W1 · gap(f)))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm1d, Conv1d, Ctx, Linear};
use crate::ops::{self, BnCache};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Odd, strictly increasing pooling kernel sizes.
    pub scales: Vec<usize>,
    pub channels: usize,
    /// Channel reduction ratio for the fusion MLP and the context gate.
    pub reduction: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { scales: vec![1, 3, 9, 27], channels: 128, reduction: 4 }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("empty pyramid: at least one scale is required"));
        }
        for &s in &self.scales {
            if s == 0 || s % 2 == 0 {
                return Err(Error::config(format!("pyramid scale {s} must be odd and >= 1")));
            }
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("pyramid scales {:?} must be strictly increasing", self.scales)));
        }
        if self.channels == 0 || self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::config(format!(
                "reduction ratio {} must divide channel count {}",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }
}

#[derive(Clone, Debug)]
pub struct TppBranch {
    pub scale: usize,
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
}

#[derive(Clone, Debug)]
pub struct BranchCache {
    pooled: Tensor,
    bn_cache: BnCache,
    pre_relu: Tensor,
}

#[derive(Clone, Debug)]
pub struct TppCache {
    branches: Vec<BranchCache>,
}

#[derive(Clone, Debug)]
pub struct AffOutput {
    pub fused: Tensor,
    /// `[B, K]`, rows sum to one.
    pub weights: Tensor,
}

#[derive(Clone, Debug)]
struct DescriptorCache {
    gaps: Vec<Tensor>,
    hidden_pre: Vec<Tensor>,
    hidden: Vec<Tensor>,
    concat: Tensor,
}

#[derive(Clone, Debug)]
pub struct AffCache {
    descriptors: Option<DescriptorCache>,
    weights: Tensor,
    mixed: Tensor,
}

#[derive(Clone, Debug)]
pub struct TceCache {
    squeeze: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    gate: Tensor,
}

#[derive(Clone, Debug)]
pub struct AmtpnCache {
    tpp: TppCache,
    branches: Vec<Tensor>,
    aff: AffCache,
    fused: Tensor,
    tce: Option<TceCache>,
}

impl AmtpnCache {
    /// Fusion weights `[B, K]` from the forward pass.
    pub fn fusion_weights(&self) -> &Tensor {
        &self.aff.weights
    }

    /// Per-scale branch outputs `[B, C, T]`.
    pub fn branches(&self) -> &[Tensor] {
        &self.branches
    }

    /// Channel gate `[B, C]`, if context enhancement is enabled.
    pub fn context_gate(&self) -> Option<&Tensor> {
        self.tce.as_ref().map(|c| &c.gate)
    }
}

#[derive(Clone, Debug)]
pub struct Amtpn {
    pub cfg: PyramidConfig,
    pub branches: Vec<TppBranch>,
    pub desc_fc1: Linear,
    pub desc_fc2: Linear,
    pub weight_head: Linear,
    pub refine: Conv1d,
    pub tce_fc1: Linear,
    pub tce_fc2: Linear,
    /// When false the scales are mixed with uniform weights `1/K`.
    pub use_aff: bool,
    /// When false the context gate is fixed at 1.
    pub use_tce: bool,
}

impl Amtpn {
    pub fn new(store: &mut ParamStore, name: &str, cfg: PyramidConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let h = cfg.hidden();
        let k = cfg.scales.len();
        let branches = cfg
            .scales
            .iter()
            .map(|&s| TppBranch {
                scale: s,
                conv: Conv1d::new(store, &format!("{name}.tpp.s{s}.conv"), c, c, 1, 0, rng),
                bn: BatchNorm1d::new(store, &format!("{name}.tpp.s{s}.bn"), c),
            })
            .collect();
        Ok(Self {
            branches,
            desc_fc1: Linear::new(store, &format!("{name}.aff.fc1"), c, h, rng),
            desc_fc2: Linear::new(store, &format!("{name}.aff.fc2"), h, h, rng),
            weight_head: Linear::new(store, &format!("{name}.aff.head"), k * h, k, rng),
            refine: Conv1d::new(store, &format!("{name}.aff.refine"), c, c, 1, 0, rng),
            tce_fc1: Linear::new(store, &format!("{name}.tce.fc1"), c, h, rng),
            tce_fc2: Linear::new(store, &format!("{name}.tce.fc2"), h, c, rng),
            cfg,
            use_aff: true,
            use_tce: true,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, _) = x.dims3()?;
        if c != self.cfg.channels {
            return Err(Error::dim(format!("pyramid expects {} channels, got {c}", self.cfg.channels)));
        }
        Ok(())
    }

    /// One `[B, C, T]` map per scale.
    pub fn tpp_forward(&self, store: &ParamStore, x: &Tensor, ctx: &mut Ctx) -> Result<(Vec<Tensor>, TppCache)> {
        self.check_input(x)?;
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let pooled = if br.scale == 1 { x.clone() } else { ops::avg_pool1d(x, br.scale, 1, br.scale / 2)? };
            let conv_out = br.conv.forward(store, &pooled)?;
            let (pre_relu, bn_cache) = br.bn.forward(store, &conv_out, ctx)?;
            outs.push(ops::relu(&pre_relu));
            caches.push(BranchCache { pooled, bn_cache, pre_relu });
        }
        Ok((outs, TppCache { branches: caches }))
    }

    pub fn tpp_backward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        cache: &TppCache,
        grads: &[Tensor],
    ) -> Result<Tensor> {
        let mut dx = Tensor::zeros(x.shape());
        for ((br, bc), g) in self.branches.iter().zip(&cache.branches).zip(grads) {
            let g = ops::relu_backward(&bc.pre_relu, g)?;
            let g = br.bn.backward(store, &bc.bn_cache, &g)?;
            let g = br.conv.backward(store, &bc.pooled, &g)?;
            if br.scale == 1 {
                dx.add_assign(&g)?;
            } else {
                dx.add_assign(&ops::avg_pool1d_backward(x.shape(), br.scale, 1, br.scale / 2, &g)?)?;
            }
        }
        Ok(dx)
    }

    fn descriptor_logits(&self, store: &ParamStore, branches: &[Tensor]) -> Result<(Tensor, DescriptorCache)> {
        let h = self.cfg.hidden();
        let k = branches.len();
        let nb = branches[0].shape()[0];
        let mut gaps = Vec::with_capacity(k);
        let mut hidden_pre = Vec::with_capacity(k);
        let mut hidden = Vec::with_capacity(k);
        let mut concat = vec![0.0; nb * k * h];
        for (i, br) in branches.iter().enumerate() {
            let g = ops::global_avg_pool(br)?;
            let a = self.desc_fc1.forward(store, &g)?;
            let r = ops::relu(&a);
            let e = self.desc_fc2.forward(store, &r)?;
            for b in 0..nb {
                concat[b * k * h + i * h..][..h].copy_from_slice(&e.data()[b * h..][..h]);
            }
            gaps.push(g);
            hidden_pre.push(a);
            hidden.push(r);
        }
        let concat = Tensor::new(&[nb, k * h], concat)?;
        let logits = self.weight_head.forward(store, &concat)?;
        Ok((logits, DescriptorCache { gaps, hidden_pre, hidden, concat }))
    }

    /// Scale weights and the refined weighted sum of branches.
    pub fn aff_forward(&self, store: &ParamStore, branches: &[Tensor]) -> Result<(AffOutput, AffCache)> {
        if branches.is_empty() {
            return Err(Error::config("empty pyramid: no branches to fuse"));
        }
        if branches.len() != self.branches.len() {
            return Err(Error::dim(format!("fusion expects {} branches, got {}", self.branches.len(), branches.len())));
        }
        let shape = branches[0].shape().to_vec();
        for b in branches {
            if b.shape() != shape.as_slice() {
                return Err(Error::dim("pyramid branches differ in shape"));
            }
        }
        let (nb, _, _) = branches[0].dims3()?;
        let k = branches.len();
        let (weights, descriptors) = if self.use_aff {
            let (logits, dc) = self.descriptor_logits(store, branches)?;
            (ops::softmax(&logits, 1)?, Some(dc))
        } else {
            (Tensor::full(&[nb, k], 1.0 / k as f64), None)
        };
        let mixed = mix(branches, &weights)?;
        let fused = self.refine.forward(store, &mixed)?;
        Ok((AffOutput { fused, weights: weights.clone() }, AffCache { descriptors, weights, mixed }))
    }

    /// Returns the gradient for each branch.
    pub fn aff_backward(
        &self,
        store: &mut ParamStore,
        branches: &[Tensor],
        cache: &AffCache,
        grad_fused: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let g_mixed = self.refine.backward(store, &cache.mixed, grad_fused)?;
        let (nb, c, t) = g_mixed.dims3()?;
        let k = branches.len();
        let w = cache.weights.data();
        let gm = g_mixed.data();
        let mut grads = Vec::with_capacity(k);
        let mut g_weights = vec![0.0; nb * k];
        for (i, br) in branches.iter().enumerate() {
            let mut g = vec![0.0; gm.len()];
            for b in 0..nb {
                let wb = w[b * k + i];
                let span = b * c * t..(b + 1) * c * t;
                let mut acc = 0.0;
                for ((gv, &gmv), &xv) in g[span.clone()].iter_mut().zip(&gm[span.clone()]).zip(&br.data()[span]) {
                    *gv = wb * gmv;
                    acc += gmv * xv;
                }
                g_weights[b * k + i] = acc;
            }
            grads.push(Tensor::new(br.shape(), g)?);
        }
        if let Some(dc) = &cache.descriptors {
            let h = self.cfg.hidden();
            let g_logits = ops::softmax_backward(&cache.weights, 1, &Tensor::new(&[nb, k], g_weights)?)?;
            let g_concat = self.weight_head.backward(store, &dc.concat, &g_logits)?;
            for i in 0..k {
                let mut ge = vec![0.0; nb * h];
                for b in 0..nb {
                    ge[b * h..][..h].copy_from_slice(&g_concat.data()[b * k * h + i * h..][..h]);
                }
                let ge = Tensor::new(&[nb, h], ge)?;
                let gr = self.desc_fc2.backward(store, &dc.hidden[i], &ge)?;
                let ga = ops::relu_backward(&dc.hidden_pre[i], &gr)?;
                let gg = self.desc_fc1.backward(store, &dc.gaps[i], &ga)?;
                grads[i].add_assign(&ops::global_avg_pool_backward(branches[i].shape(), &gg)?)?;
            }
        }
        Ok(grads)
    }

    /// Squeeze-excite channel gating of the fused map.
    pub fn tce_forward(&self, store: &ParamStore, f: &Tensor) -> Result<(Tensor, TceCache)> {
        let squeeze = ops::global_avg_pool(f)?;
        let hidden_pre = self.tce_fc1.forward(store, &squeeze)?;
        let hidden = ops::relu(&hidden_pre);
        let gate = ops::sigmoid(&self.tce_fc2.forward(store, &hidden)?);
        let out = ops::gate_channels(f, &gate)?;
        Ok((out, TceCache { squeeze, hidden_pre, hidden, gate }))
    }

    pub fn tce_backward(
        &self,
        store: &mut ParamStore,
        f: &Tensor,
        cache: &TceCache,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        let (mut df, dgate) = ops::gate_channels_backward(f, &cache.gate, grad_out)?;
        let dz2 = ops::sigmoid_backward(&cache.gate, &dgate)?;
        let dh = self.tce_fc2.backward(store, &cache.hidden, &dz2)?;
        let dz1 = ops::relu_backward(&cache.hidden_pre, &dh)?;
        let dsq = self.tce_fc1.backward(store, &cache.squeeze, &dz1)?;
        df.add_assign(&ops::global_avg_pool_backward(f.shape(), &dsq)?)?;
        Ok(df)
    }

    /// Full pipeline: pyramid pooling, fusion, then context enhancement.
    /// Output shape equals input shape.
    pub fn forward(&self, store: &ParamStore, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, AmtpnCache)> {
        let (branches, tpp) = self.tpp_forward(store, x, ctx)?;
        let (aff_out, aff) = self.aff_forward(store, &branches)?;
        let fused = aff_out.fused;
        let (out, tce) = if self.use_tce {
            let (o, c) = self.tce_forward(store, &fused)?;
            (o, Some(c))
        } else {
            (fused.clone(), None)
        };
        Ok((out, AmtpnCache { tpp, branches, aff, fused, tce }))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        cache: &AmtpnCache,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        let g_fused = match &cache.tce {
            Some(tc) => self.tce_backward(store, &cache.fused, tc, grad_out)?,
            None => grad_out.clone(),
        };
        let g_branches = self.aff_backward(store, &cache.branches, &cache.aff, &g_fused)?;
        self.tpp_backward(store, x, &cache.tpp, &g_branches)
    }
}

/// `Σ_k w[b,k] · branch_k[b,c,t]`.
fn mix(branches: &[Tensor], weights: &Tensor) -> Result<Tensor> {
    let (nb, c, t) = branches[0].dims3()?;
    let k = branches.len();
    let mut out = vec![0.0; nb * c * t];
    for (i, br) in branches.iter().enumerate() {
        for b in 0..nb {
            let w = weights.data()[b * k + i];
            let span = b * c * t..(b + 1) * c * t;
            for (o, &v) in out[span.clone()].iter_mut().zip(&br.data()[span]) {
                *o += w * v;
            }
        }
    }
    Tensor::new(&[nb, c, t], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(scales: &[usize], c: usize, r: usize, seed: u64) -> (ParamStore, Amtpn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PyramidConfig { scales: scales.to_vec(), channels: c, reduction: r };
        let m = Amtpn::new(&mut store, "amtpn", cfg, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn config_validation() {
        let ok = PyramidConfig::default();
        assert!(ok.validate().is_ok());
        for scales in [vec![], vec![2], vec![3, 1], vec![1, 1], vec![0]] {
            let cfg = PyramidConfig { scales, ..ok.clone() };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        let cfg = PyramidConfig { channels: 10, reduction: 4, ..ok };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unit_scale_branch_is_plain_conv_bn_relu() {
        let (store, m) = build(&[1], 4, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 4, 5], 1.0, &mut rng);
        let (outs, _) = m.tpp_forward(&store, &x, &mut Ctx::train()).unwrap();
        let br = &m.branches[0];
        let conv = br.conv.forward(&store, &x).unwrap();
        let (bn, _) = br.bn.forward(&store, &conv, &mut Ctx::train()).unwrap();
        assert_eq!(outs[0], ops::relu(&bn));
    }

    #[test]
    fn constant_input_gives_time_constant_branches() {
        let (store, m) = build(&[1, 3, 9], 4, 2, 3);
        let x = Tensor::full(&[1, 4, 12], 0.7);
        let (outs, _) = m.tpp_forward(&store, &x, &mut Ctx::eval()).unwrap();
        for o in &outs {
            for row in o.data().chunks_exact(12) {
                assert!(row.iter().all(|&v| (v - row[0]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn singleton_pyramid_has_unit_weight() {
        let (store, m) = build(&[1], 4, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let br = vec![Tensor::uniform(&[3, 4, 6], 1.0, &mut rng)];
        let (out, _) = m.aff_forward(&store, &br).unwrap();
        assert!(out.weights.data().iter().all(|&w| w == 1.0));
        assert_eq!(out.fused, m.refine.forward(&store, &br[0]).unwrap());
    }

    #[test]
    fn identical_branches_mix_to_themselves() {
        let (store, m) = build(&[1, 3, 9], 4, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = Tensor::uniform(&[2, 4, 6], 1.0, &mut rng);
        let brs = vec![b.clone(), b.clone(), b.clone()];
        let (_, cache) = m.aff_forward(&store, &brs).unwrap();
        for (p, q) in cache.mixed.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn forced_head_logits_give_closed_form_weights() {
        let (mut store, m) = build(&[1, 3], 4, 2, 8);
        store.value_mut(m.weight_head.weight).fill(0.0);
        store.value_mut(m.weight_head.bias).data_mut().copy_from_slice(&[0.0, 3f64.ln()]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let brs: Vec<_> = (0..2).map(|_| Tensor::uniform(&[1, 4, 5], 1.0, &mut rng)).collect();
        let (out, _) = m.aff_forward(&store, &brs).unwrap();
        assert!((out.weights.data()[0] - 0.25).abs() < 1e-15);
        assert!((out.weights.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_context_logits_halve_the_input() {
        let (mut store, m) = build(&[1], 4, 2, 10);
        store.value_mut(m.tce_fc2.weight).fill(0.0);
        store.value_mut(m.tce_fc2.bias).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Tensor::uniform(&[2, 4, 3], 1.0, &mut rng);
        let (out, _) = m.tce_forward(&store, &f).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn context_gate_hand_case() {
        // C=2, r=2: one hidden unit. W1=[1,1], W2=[1,1]^T, zero biases.
        let (mut store, m) = build(&[1], 2, 2, 12);
        store.value_mut(m.tce_fc1.weight).fill(1.0);
        store.value_mut(m.tce_fc1.bias).fill(0.0);
        store.value_mut(m.tce_fc2.weight).fill(1.0);
        store.value_mut(m.tce_fc2.bias).fill(0.0);
        let f = Tensor::new(&[1, 2, 1], vec![0.5, -0.2]).unwrap();
        let (out, _) = m.tce_forward(&store, &f).unwrap();
        let hidden = (0.5f64 - 0.2).max(0.0);
        let alpha = 1.0 / (1.0 + (-hidden).exp());
        assert!((out.data()[0] - 0.5 * alpha).abs() < 1e-15);
        assert!((out.data()[1] + 0.2 * alpha).abs() < 1e-15);
    }

    #[test]
    fn forward_preserves_shape() {
        let (store, m) = build(&[1, 3, 9, 27], 16, 4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::uniform(&[2, 16, 64], 1.0, &mut rng);
        let (y, cache) = m.forward(&store, &x, &mut Ctx::train()).unwrap();
        assert_eq!(y.shape(), &[2, 16, 64]);
        assert_eq!(cache.fusion_weights().shape(), &[2, 4]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (store, m) = build(&[1, 3], 4, 2, 15);
        let x = Tensor::zeros(&[1, 3, 5]);
        assert!(m.forward(&store, &x, &mut Ctx::train()).is_err());
    }
}

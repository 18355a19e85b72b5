//! Sequential channel and temporal attention over `[B, C, T]` features.
//!
//! `f' = M_c(f) ⊙ f` with `M_c ∈ (0,1)^{B×C×1}`, then `f'' = M_t(f') ⊙ f'`
//! with `M_t ∈ (0,1)^{B×1×T}`. The channel map comes from a shared MLP over
//! temporal average- and max-pooled descriptors; the temporal map from a
//! `k`-tap convolution over the channel-wise mean and max maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv1d, Linear};
use crate::ops;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbamConfig {
    pub reduction: usize,
    /// Odd temporal kernel of the temporal-attention convolution.
    pub kernel: usize,
}

impl Default for CbamConfig {
    fn default() -> Self {
        Self { reduction: 4, kernel: 7 }
    }
}

impl CbamConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction == 0 || !channels.is_multiple_of(self.reduction) {
            return Err(Error::config(format!(
                "attention reduction {} must divide channel count {channels}",
                self.reduction
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("temporal attention kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MlpCache {
    input: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

#[derive(Clone, Debug)]
pub struct ChannelCache {
    avg: MlpCache,
    max: MlpCache,
    max_arg: Vec<usize>,
    /// `[B, C]`.
    gate: Tensor,
}

#[derive(Clone, Debug)]
pub struct TemporalCache {
    pooled: Tensor,
    max_arg: Vec<usize>,
    /// `[B, T]`.
    gate: Tensor,
}

#[derive(Clone, Debug)]
pub struct CbamCache {
    channel: Option<ChannelCache>,
    after_channel: Tensor,
    temporal: Option<TemporalCache>,
}

impl CbamCache {
    pub fn channel_gate(&self) -> Option<&Tensor> {
        self.channel.as_ref().map(|c| &c.gate)
    }

    pub fn temporal_gate(&self) -> Option<&Tensor> {
        self.temporal.as_ref().map(|c| &c.gate)
    }
}

#[derive(Clone, Debug)]
pub struct Cbam {
    pub channels: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub conv: Conv1d,
    /// When false the channel gate is fixed at 1.
    pub use_channel: bool,
    /// When false the temporal gate is fixed at 1.
    pub use_temporal: bool,
}

impl Cbam {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &CbamConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let h = channels / cfg.reduction;
        Ok(Self {
            channels,
            fc1: Linear::new(store, &format!("{name}.channel.fc1"), channels, h, rng),
            fc2: Linear::new(store, &format!("{name}.channel.fc2"), h, channels, rng),
            conv: Conv1d::new(store, &format!("{name}.temporal.conv"), 2, 1, cfg.kernel, cfg.kernel / 2, rng),
            use_channel: true,
            use_temporal: true,
        })
    }

    fn mlp(&self, store: &ParamStore, x: Tensor) -> Result<(Tensor, MlpCache)> {
        let hidden_pre = self.fc1.forward(store, &x)?;
        let hidden = ops::relu(&hidden_pre);
        let out = self.fc2.forward(store, &hidden)?;
        Ok((out, MlpCache { input: x, hidden_pre, hidden }))
    }

    fn mlp_backward(&self, store: &mut ParamStore, cache: &MlpCache, grad: &Tensor) -> Result<Tensor> {
        let gh = self.fc2.backward(store, &cache.hidden, grad)?;
        let gp = ops::relu_backward(&cache.hidden_pre, &gh)?;
        self.fc1.backward(store, &cache.input, &gp)
    }

    fn channel_gate(&self, store: &ParamStore, f: &Tensor) -> Result<ChannelCache> {
        let (_, c, _) = f.dims3()?;
        if c != self.channels {
            return Err(Error::dim(format!("attention expects {} channels, got {c}", self.channels)));
        }
        let (za, avg) = self.mlp(store, ops::global_avg_pool(f)?)?;
        let (mx, max_arg) = ops::global_max_pool(f)?;
        let (zm, max) = self.mlp(store, mx)?;
        let gate = ops::sigmoid(&za.zip_map(&zm, |a, b| a + b)?);
        Ok(ChannelCache { avg, max, max_arg, gate })
    }

    /// Channel attention map `[B, C, 1]`.
    pub fn channel_attention(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        let (nb, c, _) = f.dims3()?;
        self.channel_gate(store, f)?.gate.reshape(&[nb, c, 1])
    }

    fn temporal_gate(&self, store: &ParamStore, f: &Tensor) -> Result<TemporalCache> {
        let (nb, c, t) = f.dims3()?;
        let mut pooled = vec![0.0; nb * 2 * t];
        let mut max_arg = vec![0usize; nb * t];
        let fd = f.data();
        for b in 0..nb {
            for ti in 0..t {
                let mut sum = 0.0;
                let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
                for ch in 0..c {
                    let v = fd[(b * c + ch) * t + ti];
                    sum += v;
                    if v > best {
                        best = v;
                        bi = ch;
                    }
                }
                pooled[b * 2 * t + ti] = sum / c as f64;
                pooled[b * 2 * t + t + ti] = best;
                max_arg[b * t + ti] = (b * c + bi) * t + ti;
            }
        }
        let pooled = Tensor::new(&[nb, 2, t], pooled)?;
        let logits = self.conv.forward(store, &pooled)?;
        let gate = ops::sigmoid(&logits).reshape(&[nb, t])?;
        Ok(TemporalCache { pooled, max_arg, gate })
    }

    /// Temporal attention map `[B, 1, T]`.
    pub fn temporal_attention(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        let (nb, _, t) = f.dims3()?;
        self.temporal_gate(store, f)?.gate.reshape(&[nb, 1, t])
    }

    pub fn forward(&self, store: &ParamStore, f: &Tensor) -> Result<(Tensor, CbamCache)> {
        let (channel, after_channel) = if self.use_channel {
            let cc = self.channel_gate(store, f)?;
            let out = ops::gate_channels(f, &cc.gate)?;
            (Some(cc), out)
        } else {
            (None, f.clone())
        };
        let (temporal, out) = if self.use_temporal {
            let tc = self.temporal_gate(store, &after_channel)?;
            let out = ops::gate_time(&after_channel, &tc.gate)?;
            (Some(tc), out)
        } else {
            (None, after_channel.clone())
        };
        Ok((out, CbamCache { channel, after_channel, temporal }))
    }

    pub fn backward(&self, store: &mut ParamStore, f: &Tensor, cache: &CbamCache, grad_out: &Tensor) -> Result<Tensor> {
        let g_after = match &cache.temporal {
            Some(tc) => {
                let f1 = &cache.after_channel;
                let (nb, c, t) = f1.dims3()?;
                let (mut df1, dgate) = ops::gate_time_backward(f1, &tc.gate, grad_out)?;
                let dz = ops::sigmoid_backward(&tc.gate, &dgate)?.reshape(&[nb, 1, t])?;
                let dpooled = self.conv.backward(store, &tc.pooled, &dz)?;
                let dp = dpooled.data();
                let d = df1.data_mut();
                for b in 0..nb {
                    for ti in 0..t {
                        let gm = dp[b * 2 * t + ti] / c as f64;
                        for ch in 0..c {
                            d[(b * c + ch) * t + ti] += gm;
                        }
                        d[tc.max_arg[b * t + ti]] += dp[b * 2 * t + t + ti];
                    }
                }
                df1
            }
            None => grad_out.clone(),
        };
        match &cache.channel {
            Some(cc) => {
                let (mut df, dgate) = ops::gate_channels_backward(f, &cc.gate, &g_after)?;
                let dz = ops::sigmoid_backward(&cc.gate, &dgate)?;
                let d_avg = self.mlp_backward(store, &cc.avg, &dz)?;
                let d_max = self.mlp_backward(store, &cc.max, &dz)?;
                df.add_assign(&ops::global_avg_pool_backward(f.shape(), &d_avg)?)?;
                let d = df.data_mut();
                for (&i, &g) in cc.max_arg.iter().zip(d_max.data()) {
                    d[i] += g;
                }
                Ok(df)
            }
            None => Ok(g_after),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize, r: usize, seed: u64) -> (ParamStore, Cbam) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CbamConfig { reduction: r, kernel: 7 };
        let m = Cbam::new(&mut store, "cbam", c, &cfg, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn zero_mlp_gives_half_channel_gate() {
        let (mut store, m) = build(4, 2, 1);
        for id in [m.fc2.weight, m.fc2.bias] {
            store.value_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::uniform(&[2, 4, 5], 1.0, &mut rng);
        let mc = m.channel_attention(&store, &f).unwrap();
        assert_eq!(mc.shape(), &[2, 4, 1]);
        assert!(mc.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_mlp_hand_case() {
        let (mut store, m) = build(2, 1, 3);
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *store.value_mut(m.fc1.weight) = eye.clone();
        *store.value_mut(m.fc2.weight) = eye;
        store.value_mut(m.fc1.bias).fill(0.0);
        store.value_mut(m.fc2.bias).fill(0.0);
        // channel 0 over time: [1, 3]; channel 1: [2, 2]
        let f = Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 2.0, 2.0]).unwrap();
        let mc = m.channel_attention(&store, &f).unwrap();
        assert!((mc.data()[0] - ops::sigmoid_scalar(2.0 + 3.0)).abs() < 1e-15);
        assert!((mc.data()[1] - ops::sigmoid_scalar(2.0 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn time_constant_input_collapses_pooling_paths() {
        let (store, m) = build(4, 2, 4);
        let v = [0.3, -0.1, 0.8, 0.2];
        let mut data = Vec::new();
        for x in v {
            data.extend([x; 10]);
        }
        let f = Tensor::new(&[1, 4, 10], data).unwrap();
        let mc = m.channel_attention(&store, &f).unwrap();
        let (z, _) = m.mlp(&store, Tensor::new(&[1, 4], v.to_vec()).unwrap()).unwrap();
        for (g, zz) in mc.data().iter().zip(z.data()) {
            assert!((g - ops::sigmoid_scalar(2.0 * zz)).abs() < 1e-15);
        }
        let mt = m.temporal_attention(&store, &f).unwrap();
        assert_eq!(mt.shape(), &[1, 1, 10]);
        // Interior positions see the same window; borders see zero padding.
        assert!((mt.data()[3] - mt.data()[6]).abs() < 1e-15);
        assert!((mt.data()[0] - mt.data()[3]).abs() > 0.0);
    }

    #[test]
    fn zero_conv_gives_half_temporal_gate() {
        let (mut store, m) = build(4, 2, 5);
        store.value_mut(m.conv.weight).fill(0.0);
        store.value_mut(m.conv.bias).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::uniform(&[2, 4, 9], 1.0, &mut rng);
        let mt = m.temporal_attention(&store, &f).unwrap();
        assert!(mt.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_channel_temporal_map_matches_hand_conv() {
        let (store, m) = build(1, 1, 7);
        let f = Tensor::new(&[1, 1, 5], vec![0.2, -0.4, 0.9, 0.1, -0.3]).unwrap();
        let mt = m.temporal_attention(&store, &f).unwrap();
        let w = store.value(m.conv.weight).data();
        let bias = store.value(m.conv.bias).data()[0];
        for t in 0..5usize {
            let mut z = bias;
            for k in 0..7usize {
                let s = t as isize + k as isize - 3;
                if (0..5).contains(&s) {
                    let v = f.data()[s as usize];
                    // mean map and max map coincide for one channel
                    z += (w[k] + w[7 + k]) * v;
                }
            }
            assert!((mt.data()[t] - ops::sigmoid_scalar(z)).abs() < 1e-14);
        }
    }

    #[test]
    fn open_gates_pass_input_through() {
        let (mut store, m) = build(4, 2, 8);
        for id in [m.fc2.weight, m.conv.weight] {
            store.value_mut(id).fill(0.0);
        }
        store.value_mut(m.fc2.bias).fill(20.0);
        store.value_mut(m.conv.bias).fill(40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Tensor::uniform(&[2, 4, 7], 1.0, &mut rng);
        let (out, _) = m.forward(&store, &f).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!((o - i).abs() < 1e-6);
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let cfg = CbamConfig { reduction: 2, kernel: 4 };
        assert!(cfg.validate(8).is_err());
        let cfg = CbamConfig { reduction: 3, kernel: 7 };
        assert!(cfg.validate(8).is_err());
    }
}

//! Module-wise finite-difference checks at reduced shapes (B ≤ 2, C = 8,
//! T = 12). Each check projects the component's output onto a fixed random
//! tensor so every output element contributes to the scalar being
//! differentiated; inputs are registered as parameters so input gradients
//! are checked alongside weight gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::amtpn::{Amtpn, PyramidConfig};
use crate::cbam::{Cbam, CbamConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::layers::Ctx;
use crate::losses::{
    build_triplet, focal_loss, focal_loss_backward, masked_video_loss, objective, total_loss, total_loss_backward,
    BatchTargets, LossConfig,
};
use crate::model::{Ablation, Model, ModelConfig};
use crate::ops::{self, BnMode};
use crate::tensor::{ParamStore, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

const B: usize = 2;
const C: usize = 8;
const T: usize = 12;

/// Components in the order the suite runs them.
pub const COMPONENTS: &[&str] = &[
    "conv1d",
    "avg_pool1d",
    "max_pool1d",
    "linear",
    "softmax",
    "sigmoid",
    "relu",
    "batch_norm1d",
    "tpp",
    "aff",
    "tce",
    "amtpn",
    "cbam",
    "backbone",
    "head",
    "model",
    "focal",
    "topk_bce",
    "triplet",
    "total_loss",
    "objective",
];

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Uniform values kept at least `gap` away from zero, for kinked ops.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    rand_t(shape, rng).map(|v| v.signum() * (v.abs() + gap))
}

fn small_model(ablation: &Ablation, seed: u64) -> Result<(Model, ParamStore)> {
    let cfg = ModelConfig {
        input_dim: 16,
        channels: C,
        depth: 2,
        scales: vec![1, 3, 9],
        reduction: 4,
        cbam: CbamConfig { reduction: 4, kernel: 7 },
        head_hidden: None,
        dropout: 0.0,
    };
    Model::new(&cfg, ablation, seed)
}

fn pyramid(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Amtpn> {
    Amtpn::new(store, "amtpn", PyramidConfig { scales: vec![1, 3, 9], channels: C, reduction: 4 }, rng)
}

/// Runs one named component check.
pub fn check_component(name: &str, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let label = format!("{name}[seed {seed}]");
    match name {
        "conv1d" => {
            let x = s.add("x", rand_t(&[B, 3, T], &mut rng));
            let w = s.add("w", rand_t(&[4, 3, 3], &mut rng));
            let b = s.add("b", rand_t(&[4], &mut rng));
            let r = rand_t(&[B, 4, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| ops::conv1d(s.value(x), s.value(w), s.value(b), 1)?.dot(&r),
                |s| {
                    let (dx, dw, db) = ops::conv1d_backward(s.value(x), s.value(w), 1, &r)?;
                    s.grad_mut(x).add_assign(&dx)?;
                    s.grad_mut(w).add_assign(&dw)?;
                    s.grad_mut(b).add_assign(&db)
                },
                tol,
            )
        }
        "avg_pool1d" => {
            let x = s.add("x", rand_t(&[B, 3, T], &mut rng));
            // (kernel, stride, pad) covering padded borders and strides
            let cfgs = [(3, 1, 1), (9, 1, 4), (5, 2, 2)];
            let probes: Vec<Tensor> = cfgs
                .iter()
                .map(|&(k, st, p)| {
                    let y = ops::avg_pool1d(s.value(x), k, st, p).expect("valid pooling");
                    rand_t(y.shape(), &mut rng)
                })
                .collect();
            grad_check(
                &label,
                &mut s,
                |s| {
                    let mut total = 0.0;
                    for (&(k, st, p), r) in cfgs.iter().zip(&probes) {
                        total += ops::avg_pool1d(s.value(x), k, st, p)?.dot(r)?;
                    }
                    Ok(total)
                },
                |s| {
                    let shape = s.value(x).shape().to_vec();
                    for (&(k, st, p), r) in cfgs.iter().zip(&probes) {
                        let dx = ops::avg_pool1d_backward(&shape, k, st, p, r)?;
                        s.grad_mut(x).add_assign(&dx)?;
                    }
                    Ok(())
                },
                tol,
            )
        }
        "max_pool1d" => {
            let x = s.add("x", rand_t(&[B, 3, T], &mut rng));
            let r = rand_t(&[B, 3, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| ops::max_pool1d(s.value(x), 3, 1, 1)?.0.dot(&r),
                |s| {
                    let shape = s.value(x).shape().to_vec();
                    let (_, arg) = ops::max_pool1d(s.value(x), 3, 1, 1)?;
                    let dx = ops::max_pool1d_backward(&shape, &arg, &r)?;
                    s.grad_mut(x).add_assign(&dx)
                },
                tol,
            )
        }
        "linear" => {
            let x = s.add("x", rand_t(&[B, 5], &mut rng));
            let w = s.add("w", rand_t(&[4, 5], &mut rng));
            let b = s.add("b", rand_t(&[4], &mut rng));
            let r = rand_t(&[B, 4], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| ops::linear(s.value(x), s.value(w), s.value(b))?.dot(&r),
                |s| {
                    let (dx, dw, db) = ops::linear_backward(s.value(x), s.value(w), &r)?;
                    s.grad_mut(x).add_assign(&dx)?;
                    s.grad_mut(w).add_assign(&dw)?;
                    s.grad_mut(b).add_assign(&db)
                },
                tol,
            )
        }
        "softmax" => {
            let x = s.add("x", rand_t(&[3, 5], &mut rng).map(|v| 3.0 * v));
            let r0 = rand_t(&[3, 5], &mut rng);
            let r1 = rand_t(&[3, 5], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| Ok(ops::softmax(s.value(x), 0)?.dot(&r0)? + ops::softmax(s.value(x), 1)?.dot(&r1)?),
                |s| {
                    for (axis, r) in [(0, &r0), (1, &r1)] {
                        let y = ops::softmax(s.value(x), axis)?;
                        let dx = ops::softmax_backward(&y, axis, r)?;
                        s.grad_mut(x).add_assign(&dx)?;
                    }
                    Ok(())
                },
                tol,
            )
        }
        "sigmoid" => {
            let x = s.add("x", rand_t(&[B, 3, T], &mut rng).map(|v| 4.0 * v));
            let r = rand_t(&[B, 3, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| ops::sigmoid(s.value(x)).dot(&r),
                |s| {
                    let y = ops::sigmoid(s.value(x));
                    let dx = ops::sigmoid_backward(&y, &r)?;
                    s.grad_mut(x).add_assign(&dx)
                },
                tol,
            )
        }
        "relu" => {
            let x = s.add("x", away_from_zero(&[B, 3, T], 1e-3, &mut rng));
            let r = rand_t(&[B, 3, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| ops::relu(s.value(x)).dot(&r),
                |s| {
                    let dx = ops::relu_backward(s.value(x), &r)?;
                    s.grad_mut(x).add_assign(&dx)
                },
                tol,
            )
        }
        "batch_norm1d" => {
            let x = s.add("x", rand_t(&[B, 3, T], &mut rng));
            let g = s.add("gamma", rand_t(&[3], &mut rng).map(|v| 1.0 + 0.5 * v));
            let b = s.add("beta", rand_t(&[3], &mut rng));
            let rm = Tensor::zeros(&[3]);
            let rv = Tensor::full(&[3], 1.0);
            let r = rand_t(&[B, 3, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| ops::batch_norm1d(s.value(x), s.value(g), s.value(b), &rm, &rv, BnMode::Train)?.0.dot(&r),
                |s| {
                    let (_, cache) = ops::batch_norm1d(s.value(x), s.value(g), s.value(b), &rm, &rv, BnMode::Train)?;
                    let (dx, dg, db) = ops::batch_norm1d_backward(&cache, s.value(g), &r)?;
                    s.grad_mut(x).add_assign(&dx)?;
                    s.grad_mut(g).add_assign(&dg)?;
                    s.grad_mut(b).add_assign(&db)
                },
                tol,
            )
        }
        "tpp" => {
            let m = pyramid(&mut s, &mut rng)?;
            let x = s.add("x", rand_t(&[B, C, T], &mut rng));
            let rs: Vec<Tensor> = (0..3).map(|_| rand_t(&[B, C, T], &mut rng)).collect();
            grad_check(
                &label,
                &mut s,
                |s| {
                    let (outs, _) = m.tpp_forward(s, s.value(x), &mut Ctx::train())?;
                    outs.iter().zip(&rs).map(|(o, r)| o.dot(r)).sum()
                },
                |s| {
                    let xv = s.value(x).clone();
                    let (_, cache) = m.tpp_forward(s, &xv, &mut Ctx::train())?;
                    let dx = m.tpp_backward(s, &xv, &cache, &rs)?;
                    s.grad_mut(x).add_assign(&dx)
                },
                tol,
            )
        }
        "aff" => {
            let m = pyramid(&mut s, &mut rng)?;
            let ids: Vec<_> = (0..3).map(|k| s.add(format!("branch{k}"), rand_t(&[B, C, T], &mut rng))).collect();
            let r = rand_t(&[B, C, T], &mut rng);
            let gather = |s: &ParamStore| ids.iter().map(|&i| s.value(i).clone()).collect::<Vec<_>>();
            grad_check(
                &label,
                &mut s,
                |s| m.aff_forward(s, &gather(s))?.0.fused.dot(&r),
                |s| {
                    let br = gather(s);
                    let (_, cache) = m.aff_forward(s, &br)?;
                    let grads = m.aff_backward(s, &br, &cache, &r)?;
                    for (&i, g) in ids.iter().zip(&grads) {
                        s.grad_mut(i).add_assign(g)?;
                    }
                    Ok(())
                },
                tol,
            )
        }
        "tce" => {
            let m = pyramid(&mut s, &mut rng)?;
            let f = s.add("f", rand_t(&[B, C, T], &mut rng));
            let r = rand_t(&[B, C, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| m.tce_forward(s, s.value(f))?.0.dot(&r),
                |s| {
                    let fv = s.value(f).clone();
                    let (_, cache) = m.tce_forward(s, &fv)?;
                    let df = m.tce_backward(s, &fv, &cache, &r)?;
                    s.grad_mut(f).add_assign(&df)
                },
                tol,
            )
        }
        "amtpn" => {
            let m = pyramid(&mut s, &mut rng)?;
            let x = s.add("x", rand_t(&[B, C, T], &mut rng));
            let r = rand_t(&[B, C, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| m.forward(s, s.value(x), &mut Ctx::train())?.0.dot(&r),
                |s| {
                    let xv = s.value(x).clone();
                    let (_, cache) = m.forward(s, &xv, &mut Ctx::train())?;
                    let dx = m.backward(s, &xv, &cache, &r)?;
                    s.grad_mut(x).add_assign(&dx)
                },
                tol,
            )
        }
        "cbam" => {
            let m = Cbam::new(&mut s, "cbam", C, &CbamConfig { reduction: 4, kernel: 7 }, &mut rng)?;
            let f = s.add("f", rand_t(&[B, C, T], &mut rng));
            let r = rand_t(&[B, C, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| m.forward(s, s.value(f))?.0.dot(&r),
                |s| {
                    let fv = s.value(f).clone();
                    let (_, cache) = m.forward(s, &fv)?;
                    let df = m.backward(s, &fv, &cache, &r)?;
                    s.grad_mut(f).add_assign(&df)
                },
                tol,
            )
        }
        "backbone" => {
            let (m, mut s) = small_model(&Ablation::default(), seed)?;
            let x = rand_t(&[B, 16, T], &mut rng);
            let r = rand_t(&[B, C, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| m.backbone_forward(s, &x, &mut Ctx::train())?.0.dot(&r),
                |s| {
                    let (_, cache) = m.backbone_forward(s, &x, &mut Ctx::train())?;
                    m.backbone_backward(s, &cache, r.clone())
                },
                tol,
            )
        }
        "head" => {
            let (m, mut s) = small_model(&Ablation::default(), seed)?;
            let e = s.add("embeddings", rand_t(&[B, C, T], &mut rng));
            let r = rand_t(&[B, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| m.head_forward(s, s.value(e), &mut Ctx::train())?.0.dot(&r),
                |s| {
                    let ev = s.value(e).clone();
                    let (_, cache) = m.head_forward(s, &ev, &mut Ctx::train())?;
                    let de = m.head_backward(s, &ev, &cache, &r)?;
                    s.grad_mut(e).add_assign(&de)
                },
                tol,
            )
        }
        "model" => {
            let (m, mut s) = small_model(&Ablation::default(), seed)?;
            let x = rand_t(&[1, 16, T], &mut rng);
            let r = rand_t(&[1, T], &mut rng);
            let re = rand_t(&[1, C, T], &mut rng);
            grad_check(
                &label,
                &mut s,
                |s| {
                    let (out, _) = m.forward(s, &x, &mut Ctx::train())?;
                    Ok(out.frame_logits.dot(&r)? + out.embeddings.dot(&re)?)
                },
                |s| {
                    let (_, cache) = m.forward(s, &x, &mut Ctx::train())?;
                    m.backward(s, &cache, &r, Some(&re))
                },
                tol,
            )
        }
        "focal" => {
            let p = s.add("scores", rand_t(&[B, T], &mut rng).map(|v| 0.5 + 0.45 * v));
            let y = rand_t(&[B, T], &mut rng).map(|v| (v > 0.0) as u8 as f64);
            let mask = Tensor::new(&[B, T], (0..B * T).map(|i| (i % T < T - 2 || i < T) as u8 as f64).collect())?;
            let cfg = LossConfig::default();
            grad_check(
                &label,
                &mut s,
                |s| focal_loss(s.value(p), &y, &mask, &cfg),
                |s| {
                    let g = focal_loss_backward(s.value(p), &y, &mask, &cfg)?;
                    s.grad_mut(p).add_assign(&g)
                },
                tol,
            )
        }
        "topk_bce" => {
            let z = s.add("logits", rand_t(&[B, T], &mut rng).map(|v| 3.0 * v));
            let mask = Tensor::new(&[B, T], (0..B * T).map(|i| (i < T || i % T < 7) as u8 as f64).collect())?;
            let labels = [1.0, 0.0];
            grad_check(
                &label,
                &mut s,
                |s| Ok(masked_video_loss(s.value(z), &mask, &labels, 0.25)?.0),
                |s| {
                    let (_, g) = masked_video_loss(s.value(z), &mask, &labels, 0.25)?;
                    s.grad_mut(z).add_assign(&g)
                },
                tol,
            )
        }
        "triplet" => {
            let e = s.add("embeddings", rand_t(&[B, 4, T], &mut rng));
            let scores = rand_t(&[B, T], &mut rng).map(|v| 0.5 + 0.4 * v);
            let pseudo = rand_t(&[B, T], &mut rng).map(|v| (v > 0.0) as u8 as f64);
            let mask = Tensor::full(&[B, T], 1.0);
            let labels = [1.0, 0.0];
            // a wide margin keeps the hinge active
            let margin = 10.0;
            let build = |s: &ParamStore| {
                build_triplet(s.value(e), &scores, &pseudo, &mask, &labels, 0.25)
                    .map(|t| t.expect("batch has both classes"))
            };
            grad_check(
                &label,
                &mut s,
                |s| Ok(build(s)?.loss(margin)),
                |s| {
                    let g = build(s)?.embedding_grad(&[B, 4, T], margin)?;
                    s.grad_mut(e).add_assign(&g)
                },
                tol,
            )
        }
        "total_loss" => {
            let l = s.add("components", Tensor::from_vec((0..3).map(|_| rng.random_range(0.0..2.0)).collect()));
            let rho = s.add("log_var", rand_t(&[3], &mut rng));
            let parts = |s: &ParamStore| {
                let v = s.value(l).data();
                [v[0], v[1], v[2]]
            };
            grad_check(
                &label,
                &mut s,
                |s| Ok(total_loss(parts(s), s.value(rho).data())?.total),
                |s| {
                    let (dl, dr) = total_loss_backward(parts(s), s.value(rho).data());
                    s.grad_mut(l).data_mut().copy_from_slice(&dl);
                    s.grad_mut(rho).data_mut().copy_from_slice(&dr);
                    Ok(())
                },
                tol,
            )
        }
        "objective" => {
            let (m, mut s) = small_model(&Ablation::default(), seed)?;
            let x = rand_t(&[B, 16, T], &mut rng);
            let mask = Tensor::new(&[B, T], (0..B * T).map(|i| (i < T || i % T < 9) as u8 as f64).collect())?;
            let targets = BatchTargets {
                pseudo: rand_t(&[B, T], &mut rng).map(|v| (v > 0.3) as u8 as f64),
                mask,
                video_labels: vec![1.0, 0.0],
            };
            let cfg = LossConfig { margin: 5.0, ..LossConfig::default() };
            let ablation = Ablation::default();
            s.value_mut(m.log_var).data_mut().copy_from_slice(&[0.3, -0.2, 0.1]);
            let eval = |s: &ParamStore| {
                let (out, cache) = m.forward(s, &x, &mut Ctx::train())?;
                let obj = objective(&out, &targets, s.value(m.log_var).data(), &cfg, &ablation)?;
                Ok::<_, crate::error::Error>((cache, obj))
            };
            grad_check(
                &label,
                &mut s,
                |s| Ok(eval(s)?.1.breakdown.total),
                |s| {
                    let (cache, obj) = eval(s)?;
                    m.backward(s, &cache, &obj.grad_logits, obj.grad_embeddings.as_ref())?;
                    for (g, d) in s.grad_mut(m.log_var).data_mut().iter_mut().zip(obj.grad_log_var) {
                        *g += d;
                    }
                    Ok(())
                },
                tol,
            )
        }
        other => Err(crate::error::Error::config(format!("unknown gradient-check component {other:?}"))),
    }
}

/// Runs every component for every seed.
pub fn run_suite(seeds: &[u64], tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::with_capacity(COMPONENTS.len() * seeds.len());
    for name in COMPONENTS {
        for &seed in seeds {
            out.push(check_component(name, seed, tol)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_one_seed() {
        for name in COMPONENTS {
            let rep = check_component(name, 3, DEFAULT_TOLERANCE).unwrap();
            assert!(rep.passed, "{rep:?}");
            assert!(rep.checked > 0);
        }
    }

    #[test]
    fn primitive_ops_meet_the_tighter_tolerance() {
        let ops = ["conv1d", "avg_pool1d", "max_pool1d", "linear", "softmax", "sigmoid", "relu", "batch_norm1d"];
        for name in ops {
            for seed in 0..5 {
                let rep = check_component(name, seed, 1e-5).unwrap();
                assert!(rep.passed, "{rep:?}");
            }
        }
    }

    #[test]
    fn unknown_component_is_rejected() {
        assert!(check_component("nope", 0, 1e-4).is_err());
    }
}

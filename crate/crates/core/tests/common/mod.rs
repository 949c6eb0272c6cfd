//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use sami::diffusion::{NoiseSchedule, TimestepDistribution};
use sami::guidance::{guidance_score, sami_loss, GuidanceMask, ModelBundle, TrainConfig};
use sami::networks::{Denoiser, DenoiserConfig, Encoder, EncoderConfig, GaussianPosterior, Nonlinearity};
use sami::numerics::{
    backward, concat, conv2d, conv_transpose, finite_difference_check, finite_difference_check_fourth_order, grad_values, max_relative_error, ConvGeom,
    RngStream, Tensor, Var,
};
use sami::Result;

pub const OP_COUNT: u8 = 22;

/// Applies primitive `op` to `h` (shape `[3, 3]`), mixing in the input `x`.
pub fn apply_op(op: u8, h: &Var, x: &Var) -> Result<Var> {
    let shift = |v: &Var| v.softplus().add_scalar(0.5);
    Ok(match op % OP_COUNT {
        0 => h.add(x)?,
        1 => h.sub(&x.scale(0.5))?,
        2 => h.mul(x)?,
        3 => h.div(&shift(x))?,
        4 => h.neg(),
        // Both relu branches, kept clear of the kink so differences stay smooth.
        5 => {
            let pos = h.square().add_scalar(0.25);
            pos.relu().add(&pos.neg().relu())?.add(&h.scale(0.1))?
        }
        6 => h.sigmoid(),
        7 => h.silu(),
        8 => h.softplus(),
        9 => h.softplus().neg().exp(),
        10 => shift(h).log()?,
        11 => h.square().scale(0.5),
        12 => h.square().add_scalar(1.0).sqrt()?,
        13 => h.transpose()?,
        14 => h.matmul(x)?.scale(0.3),
        15 => h.reshape(&[9])?.reshape(&[3, 3])?,
        16 => h.sum_to(&[1, 3])?.broadcast_to(&[3, 3])?,
        17 => concat(&[&h.slice(0, 1, 2)?, &h.slice(0, 0, 1)?], 0)?,
        18 => {
            let img = h.reshape(&[1, 1, 3, 3])?;
            let k = x.reshape(&[1, 1, 3, 3])?.scale(0.3);
            conv2d(&img, &k, 1, 1)?.reshape(&[3, 3])?
        }
        19 => {
            let img = h.reshape(&[1, 1, 3, 3])?;
            let k = x.reshape(&[1, 1, 3, 3])?.scale(0.3);
            let geom = ConvGeom::new(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 1)?;
            conv_transpose(&img, &k, geom)?.reshape(&[3, 3])?
        }
        20 => h.mean().broadcast_to(&[3, 3])?.add(h)?,
        _ => h.add_scalar(0.7).mul(&h.square().scale(-0.2).exp())?,
    })
}

/// Max relative error of backward vs central differences for one composition.
pub fn composition_error(ops: &[u8], seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let x0 = rng.normal_tensor(&[3, 3]);
    let w = rng.normal_tensor(&[3, 3]);
    let f = |x: &Var| -> Result<Var> {
        let mut h = x.clone();
        for &op in ops {
            h = apply_op(op, &h, x)?;
        }
        h.mul(&Var::constant(w.clone())).map(|v| v.sum())
    };
    finite_difference_check_fourth_order(f, &x0, 1e-3)
}

pub fn tiny_encoder(seed: u64, act: Nonlinearity) -> Encoder {
    let cfg = EncoderConfig {
        image_size: 8,
        base_channels: 2,
        channel_mult: vec![1, 2],
        latent_dim: 2,
        nonlinearity: act,
        head_bias: true,
    };
    Encoder::init(cfg, &mut RngStream::new(seed)).expect("valid config")
}

pub fn tiny_denoiser(seed: u64, levels: usize) -> Denoiser {
    let cfg = DenoiserConfig {
        image_size: 8,
        base_channels: 2,
        channel_mult: vec![1, 2],
        nonlinearity: Nonlinearity::Silu,
        num_levels: levels,
    };
    Denoiser::init(cfg, &mut RngStream::new(seed)).expect("valid config")
}

/// Gradient check of every parameter tensor of a random encoder and denoiser.
pub fn network_gradient_error(seed: u64) -> Result<f64> {
    let act = if seed % 2 == 0 { Nonlinearity::Silu } else { Nonlinearity::Relu };
    let enc = tiny_encoder(seed, act);
    let den = tiny_denoiser(seed + 100, 10);
    let mut rng = RngStream::new(seed + 200);
    let x = Var::constant(rng.normal_tensor(&[2, 1, 8, 8]));
    let t = [3usize, 7];
    let mut worst: f64 = 0.0;

    for k in 0..enc.params.len() {
        let f = |p: &Var| -> Result<Var> {
            let mut ps = enc.params.bind(false);
            ps[k] = p.clone();
            let (m, v) = enc.forward(&ps, &x)?;
            Ok(m.square().sum().add(&v.log()?.sum())?)
        };
        worst = worst.max(finite_difference_check(f, &enc.params.tensors[k], 1e-5)?);
    }
    for k in 0..den.params.len() {
        let f = |p: &Var| -> Result<Var> {
            let mut ps = den.params.bind(false);
            ps[k] = p.clone();
            Ok(den.forward(&ps, &x, &t)?.square().sum())
        };
        worst = worst.max(finite_difference_check(f, &den.params.tensors[k], 1e-5)?);
    }
    Ok(worst)
}

/// `f(x) = ‖∇_x g(x)‖²` with `g` a two-layer network; checks backward
/// through the recorded inner backward.
pub fn second_order_error(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let w1 = Var::constant(rng.normal_tensor(&[4, 6]).scale(0.5));
    let w2 = Var::constant(rng.normal_tensor(&[6, 1]).scale(0.5));
    let x0 = rng.normal_tensor(&[1, 4]);
    // The inner backward needs a recording tape, so perturbed points are
    // evaluated as fresh parameters rather than under `no_grad`.
    let f = |x: &Var| -> Result<Var> {
        let g = x.matmul(&w1)?.silu().matmul(&w2)?.sum();
        let gx = backward(&g, &[x], true)?.remove(0);
        Ok(gx.square().sum())
    };
    let x = Var::param(x0.clone());
    let ad = grad_values(&f(&x)?, &[&x])?.remove(0);
    let eps = 1e-5;
    let mut fd = Vec::new();
    for i in 0..x0.len() {
        let at = |delta: f64| -> Result<f64> {
            let mut v = x0.to_vec();
            v[i] += delta;
            f(&Var::param(Tensor::new(x0.shape(), v)?))?.value().item()
        };
        fd.push((at(eps)? - at(-eps)?) / (2.0 * eps));
    }
    Ok(max_relative_error(ad.data(), &fd))
}

/// φ-gradient of the full objective against central differences over three
/// entries of the encoder's mean head.
pub fn sami_loss_slice_error(seed: u64) -> Result<f64> {
    let levels = 20;
    let bundle = ModelBundle {
        denoiser: tiny_denoiser(seed, levels),
        encoder: tiny_encoder(seed + 1, Nonlinearity::Silu),
        schedule: NoiseSchedule::linear(levels)?,
    };
    let cfg = TrainConfig {
        timesteps: TimestepDistribution::Uniform,
        ..Default::default()
    };
    let x0 = RngStream::new(seed + 2).normal_tensor(&[3, 1, 8, 8]);
    let kl_weight = 0.7;
    let head = bundle.encoder.params.names.iter().position(|n| n == "mean.w").expect("mean head");
    let loss_at = |eparams: &[Var]| -> Result<Var> {
        let dparams = bundle.denoiser.params.bind(false);
        let mut rng = RngStream::new(seed + 3);
        Ok(sami_loss(&bundle, &dparams, eparams, &x0, &cfg, kl_weight, 0, &mut rng)?.0)
    };
    let eparams = bundle.encoder.params.bind(true);
    let loss = loss_at(&eparams)?;
    let grads = grad_values(&loss, &eparams.iter().collect::<Vec<_>>())?;
    let ad: Vec<f64> = grads[head].data()[..3].to_vec();

    let eps = 1e-5;
    let base = bundle.encoder.params.tensors[head].clone();
    let mut fd = Vec::new();
    for i in 0..3 {
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.to_vec();
            v[i] += delta;
            let mut ps = bundle.encoder.params.bind(false);
            ps[head] = Var::constant(Tensor::new(base.shape(), v)?);
            loss_at(&ps)?.value().item()
        };
        fd.push((eval(eps)? - eval(-eps)?) / (2.0 * eps));
    }
    Ok(max_relative_error(&ad, &fd))
}

/// Encoder whose variance head is the constant `softplus(c)²`.
pub fn constant_variance_encoder(seed: u64, c: f64) -> Encoder {
    let mut enc = tiny_encoder(seed, Nonlinearity::Silu);
    let vw = enc.params.get("var.w").unwrap().shape().to_vec();
    enc.params.set("var.w", Tensor::zeros(&vw)).unwrap();
    enc.params.set("var.b", Tensor::full(&[2], c)).unwrap();
    enc
}

/// Guidance score against `J_μᵀ Σ⁻¹ (z − μ)` built from one backward per latent axis.
pub fn explicit_jacobian_error(seed: u64) -> f64 {
    let enc = constant_variance_encoder(seed, -0.2 + 0.3 * seed as f64);
    let mut rng = RngStream::new(100 + seed);
    let x = rng.normal_tensor(&[1, 1, 8, 8]);
    let z = rng.normal_tensor(&[1, 2]);
    let g = guidance_score(&enc, &x, &z, &GuidanceMask::full(2)).unwrap();

    let params = enc.params.bind(false);
    let xv = Var::param(x.clone());
    let (mu, var) = enc.forward(&params, &xv).unwrap();
    let mut expect = vec![0.0; x.len()];
    for i in 0..2 {
        let row = backward(&mu.slice(1, i, 1).unwrap().sum(), &[&xv], false).unwrap().remove(0);
        let w = (z.data()[i] - mu.value().data()[i]) / var.value().data()[i];
        for (e, r) in expect.iter_mut().zip(row.value().data()) {
            *e += r * w;
        }
    }
    max_relative_error(g.data(), &expect)
}

/// Monte-Carlo KL estimate and its standard error.
pub fn monte_carlo_kl(p: &GaussianPosterior, n: usize, rng: &mut RngStream) -> (f64, f64) {
    let d = p.dim();
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let mut diff = 0.0;
        for i in 0..d {
            let (m, v) = (p.mean.data()[i], p.variance.data()[i]);
            let e = rng.normal();
            let z = m + v.sqrt() * e;
            diff += -0.5 * (v.ln() + e * e) + 0.5 * z * z;
        }
        sum += diff;
        sq += diff * diff;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    (mean, (var / n as f64).sqrt())
}

//! Gaussian log-likelihood of a latent under the inference network, its
//! gradient with respect to the noisy image, and the KL regularizer.

use crate::error::{Result, SamiError};
use crate::networks::{Encoder, GaussianPosterior};
use crate::numerics::{backward, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Which latent axes enter the Mahalanobis distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidanceMask {
    active: Vec<bool>,
}

impl GuidanceMask {
    pub fn new(active: Vec<bool>) -> Result<Self> {
        if !active.iter().any(|&a| a) {
            return Err(SamiError::InvalidArgument("guidance mask has no active dimension".into()));
        }
        Ok(Self { active })
    }

    pub fn full(d: usize) -> Self {
        Self { active: vec![true; d] }
    }

    /// Only the listed axes active.
    pub fn only(d: usize, axes: &[usize]) -> Result<Self> {
        let mut active = vec![false; d];
        for &a in axes {
            if a >= d {
                return Err(SamiError::InvalidArgument(format!("mask axis {a} >= latent dim {d}")));
            }
            active[a] = true;
        }
        Self::new(active)
    }

    /// Parses `"1,0,1"` / `"all"`.
    pub fn parse(s: &str, d: usize) -> Result<Self> {
        if s == "all" {
            return Ok(Self::full(d));
        }
        let active: Vec<bool> = s
            .split(',')
            .map(|p| match p.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(SamiError::InvalidArgument(format!("bad mask entry '{other}'"))),
            })
            .collect::<Result<_>>()?;
        if active.len() != d {
            return Err(SamiError::InvalidArgument(format!("mask has {} entries, latent dim is {d}", active.len())));
        }
        Self::new(active)
    }

    pub fn dim(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::vector(&self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect::<Vec<_>>())
    }
}

/// `log N(z; μ, diag σ²)` over the active axes.
pub fn log_posterior(post: &GaussianPosterior, z: &Tensor, mask: &GuidanceMask) -> Result<f64> {
    let d = post.dim();
    if z.shape() != [d] || mask.dim() != d {
        return Err(SamiError::Shape {
            op: "log_posterior",
            detail: format!("posterior dim {d}, z {:?}, mask {}", z.shape(), mask.dim()),
        });
    }
    let mut acc = 0.0;
    for i in 0..d {
        if mask.active[i] {
            let var = post.variance.data()[i];
            let r = z.data()[i] - post.mean.data()[i];
            acc += r * r / var + var.ln();
        }
    }
    Ok(-0.5 * (acc + mask.count() as f64 * LN_2PI))
}

/// Batched log-likelihood, summed over the batch, as a graph node.
/// `mean`, `var`, `z` are `[N, d]`.
pub fn log_posterior_graph(mean: &Var, var: &Var, z: &Var, mask: &GuidanceMask) -> Result<Var> {
    let d = mask.dim();
    if mean.shape().len() != 2 || mean.shape()[1] != d || var.shape() != mean.shape() || z.shape() != mean.shape() {
        return Err(SamiError::Shape {
            op: "log_posterior",
            detail: format!("mean {:?}, var {:?}, z {:?}, mask {d}", mean.shape(), var.shape(), z.shape()),
        });
    }
    let n = mean.shape()[0] as f64;
    let per_axis = z.sub(mean)?.square().div(var)?.add(&var.log()?)?;
    let masked = if mask.is_full() {
        per_axis
    } else {
        per_axis.mul(&Var::constant(mask.as_tensor().reshape(&[1, d])?))?
    };
    Ok(masked.sum().add_scalar(n * mask.count() as f64 * LN_2PI).scale(-0.5))
}

/// Guidance score `∇_{x_t} log q(z | x_t)` for a batch of noisy images.
///
/// `params` are the encoder's bound parameters. With `create_graph` the
/// result stays attached to the graph, so a loss built from it can be
/// differentiated with respect to trainable `params`.
pub fn guidance_score_graph(
    encoder: &Encoder,
    params: &[Var],
    x_t: &Tensor,
    z: &Var,
    mask: &GuidanceMask,
    create_graph: bool,
) -> Result<Var> {
    let x = Var::param(x_t.clone());
    let (mean, var) = encoder.forward(params, &x)?;
    let logq = log_posterior_graph(&mean, &var, z, mask)?;
    Ok(backward(&logq, &[&x], create_graph)?.remove(0))
}

/// Guidance score values for fixed encoder weights.
pub fn guidance_score(encoder: &Encoder, x_t: &Tensor, z: &Tensor, mask: &GuidanceMask) -> Result<Tensor> {
    let params = encoder.params.bind(false);
    let g = guidance_score_graph(encoder, &params, x_t, &Var::constant(z.clone()), mask, false)?;
    Ok(g.value().clone())
}

/// `ε̂_cond = ε̂ − γ_t g`, one level per batch item.
pub fn conditional_noise_estimate(
    eps_hat: &Tensor,
    g: &Tensor,
    t: &[usize],
    sched: &crate::diffusion::NoiseSchedule,
) -> Result<Tensor> {
    if eps_hat.shape() != g.shape() || eps_hat.shape().first() != Some(&t.len()) {
        return Err(SamiError::Shape {
            op: "conditional_noise_estimate",
            detail: format!("eps {:?}, g {:?}, {} levels", eps_hat.shape(), g.shape(), t.len()),
        });
    }
    let item = eps_hat.len() / t.len().max(1);
    let mut out = Vec::with_capacity(eps_hat.len());
    for (i, &level) in t.iter().enumerate() {
        sched.check_level(level)?;
        let gamma = sched.gamma(level);
        let e = &eps_hat.data()[i * item..(i + 1) * item];
        let gs = &g.data()[i * item..(i + 1) * item];
        out.extend(e.iter().zip(gs).map(|(&a, &b)| a - gamma * b));
    }
    Tensor::new(eps_hat.shape(), out)
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − log σ²)`.
pub fn kl_to_standard_normal(post: &GaussianPosterior) -> f64 {
    0.5 * post
        .mean
        .data()
        .iter()
        .zip(post.variance.data())
        .map(|(&m, &v)| m * m + v - 1.0 - v.ln())
        .sum::<f64>()
}

/// Batch-mean KL as a graph node; `mean`, `var` are `[N, d]`.
pub fn kl_graph(mean: &Var, var: &Var) -> Result<Var> {
    let n = mean.shape()[0] as f64;
    let terms = mean.square().add(var)?.sub(&var.log()?)?.add_scalar(-1.0);
    Ok(terms.sum().scale(0.5 / n))
}

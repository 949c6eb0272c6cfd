//! Variance-preserving forward process, noise schedules, the DDPM noise
//! regression loss, and unconditional ancestral sampling.
//!
//! Levels are indexed `0..T`; level 0 is the least noisy (`ᾱ_0 ≈ 1`) and the
//! clean image sits one step below it.

use crate::error::{Result, SamiError};
use crate::networks::Denoiser;
use crate::numerics::{RngStream, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(SamiError::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Offset `s` of the cosine schedule.
    pub cosine_offset: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta_min: 1e-4,
            beta_max: 0.02,
            cosine_offset: 0.008,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub params: ScheduleParams,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

const COSINE_BETA_CLIP: f64 = 0.999;

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, levels: usize, params: ScheduleParams) -> Result<Self> {
        if levels < 2 {
            return Err(SamiError::InvalidArgument(format!("schedule needs T >= 2, got {levels}")));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let (lo, hi) = (params.beta_min, params.beta_max);
                if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
                    return Err(SamiError::InvalidArgument(format!(
                        "beta range ({lo}, {hi}) must satisfy 0 < min <= max < 1"
                    )));
                }
                (0..levels)
                    .map(|i| lo + (hi - lo) * i as f64 / (levels - 1) as f64)
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = params.cosine_offset;
                if !(s >= 0.0) {
                    return Err(SamiError::InvalidArgument("cosine offset must be >= 0".into()));
                }
                let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let f0 = f(0.0);
                // ᾱ at the clean image (u = 0) is 1; level i sits at u = (i + 1) / T
                let ab = |i: usize| f(i as f64 / levels as f64) / f0;
                (0..levels)
                    .map(|i| (1.0 - ab(i + 1) / ab(i)).clamp(1e-12, COSINE_BETA_CLIP))
                    .collect()
            }
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(levels);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(Self {
            kind,
            params,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn linear(levels: usize) -> Result<Self> {
        Self::build(ScheduleKind::Linear, levels, ScheduleParams::default())
    }

    pub fn levels(&self) -> usize {
        self.beta.len()
    }

    /// Noise scale `γ_t = √(1 − ᾱ_t)`.
    pub fn gamma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn check_level(&self, t: usize) -> Result<()> {
        if t >= self.levels() {
            return Err(SamiError::InvalidArgument(format!(
                "noise level {t} outside [0, {})",
                self.levels()
            )));
        }
        Ok(())
    }

    /// Reverse-step mean from level `t` with noise estimate `eps_hat`. At
    /// `t = 0` this is the clean-image estimate.
    pub(crate) fn reverse_mean(&self, x_t: &[f64], t: usize, eps_hat: &[f64], out: &mut [f64]) {
        let a = self.alpha[t];
        let coef = (1.0 - a) / (1.0 - self.alpha_bar[t]).sqrt();
        let inv = 1.0 / a.sqrt();
        for ((o, &x), &e) in out.iter_mut().zip(x_t).zip(eps_hat) {
            *o = inv * (x - coef * e);
        }
    }
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_level(t)?;
    let (a, b) = (sched.alpha_bar[t].sqrt(), sched.gamma(t));
    x0.zip_map(eps, "forward_noise", |x, e| a * x + b * e)
}

/// Batched forward noising with a level per leading-axis item.
pub fn forward_noise_batch(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() || x0.shape().first() != Some(&t.len()) {
        return Err(SamiError::Shape {
            op: "forward_noise",
            detail: format!("x0 {:?}, eps {:?}, {} levels", x0.shape(), eps.shape(), t.len()),
        });
    }
    let item = x0.len() / t.len().max(1);
    let mut out = Vec::with_capacity(x0.len());
    for (i, &level) in t.iter().enumerate() {
        sched.check_level(level)?;
        let (a, b) = (sched.alpha_bar[level].sqrt(), sched.gamma(level));
        let xs = &x0.data()[i * item..(i + 1) * item];
        let es = &eps.data()[i * item..(i + 1) * item];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(x0.shape(), out)
}

/// Mean of the unconditional reverse transition from level `t` to `t − 1`:
/// `(x_t − (1 − α_t)/√(1 − ᾱ_t) · ε̂) / √α_t`.
pub fn ddpm_transition_mean(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_level(t)?;
    if t == 0 {
        return Err(SamiError::InvalidArgument("no transition below level 0".into()));
    }
    if x_t.shape() != eps_hat.shape() {
        return Err(SamiError::Shape {
            op: "ddpm_transition_mean",
            detail: format!("{:?} vs {:?}", x_t.shape(), eps_hat.shape()),
        });
    }
    let mut out = vec![0.0; x_t.len()];
    sched.reverse_mean(x_t.data(), t, eps_hat.data(), &mut out);
    Tensor::new(x_t.shape(), out)
}

/// Anything that estimates the noise in a batch of noisy items.
pub trait NoisePredictor {
    /// `x` has a leading batch axis matching `t`.
    fn predict_noise(&self, x: &Tensor, t: &[usize]) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.denoise(x, t)
    }
}

/// Ancestral sampling from `x_{T−1} ~ N(0, I)` down to a clean estimate.
/// `item_shape` excludes the batch axis. Transition noise has std `√β_t`;
/// the last step adds none.
pub fn sample_unconditional(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    n: usize,
    item_shape: &[usize],
) -> Result<Tensor> {
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    let mut x = rng.normal_tensor(&shape);
    let mut next = vec![0.0; x.len()];
    for t in (0..sched.levels()).rev() {
        let eps = model.predict_noise(&x, &vec![t; n])?;
        sched.reverse_mean(x.data(), t, eps.data(), &mut next);
        if t > 0 {
            let sd = sched.beta[t].sqrt();
            for v in next.iter_mut() {
                *v += sd * rng.normal();
            }
        }
        x = Tensor::new(&shape, next.clone())?;
    }
    Ok(x)
}

/// How training draws noise levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimestepDistribution {
    Uniform,
    /// `P(t) ∝ t + 1`.
    Increasing,
    /// Always the given level.
    Fixed(usize),
}

impl TimestepDistribution {
    pub fn sample(&self, levels: usize, rng: &mut RngStream) -> usize {
        match *self {
            TimestepDistribution::Uniform => rng.below(levels),
            TimestepDistribution::Increasing => {
                // inverse CDF of the discrete triangular law
                let total = (levels * (levels + 1) / 2) as f64;
                let u = rng.uniform() * total;
                let mut acc = 0.0;
                for t in 0..levels {
                    acc += (t + 1) as f64;
                    if u < acc {
                        return t;
                    }
                }
                levels - 1
            }
            TimestepDistribution::Fixed(t) => t.min(levels - 1),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TimestepDistribution::Uniform => "uniform".into(),
            TimestepDistribution::Increasing => "increasing".into(),
            TimestepDistribution::Fixed(t) => format!("fixed:{t}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "increasing" => Ok(Self::Increasing),
            other => match other.strip_prefix("fixed:") {
                Some(t) => t
                    .parse()
                    .map(Self::Fixed)
                    .map_err(|_| SamiError::Config(format!("bad fixed level in '{other}'"))),
                None => Err(SamiError::Config(format!("unknown timestep distribution '{other}'"))),
            },
        }
    }
}

/// Noise draws for one training batch: levels, `ε`, and the noised images.
pub struct NoisedBatch {
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub x_t: Tensor,
}

pub fn noise_batch(
    x0: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    tdist: TimestepDistribution,
) -> Result<NoisedBatch> {
    let n = x0.shape()[0];
    let t: Vec<usize> = (0..n).map(|_| tdist.sample(sched.levels(), rng)).collect();
    let eps = rng.normal_tensor(x0.shape());
    let x_t = forward_noise_batch(x0, &t, &eps, sched)?;
    Ok(NoisedBatch { t, eps, x_t })
}

/// Mean over the batch of `‖ε − ε̂‖²` as a graph node (λ_t ≡ 1).
pub fn noise_regression_loss(eps: &Tensor, eps_hat: &Var) -> Result<Var> {
    let n = eps.shape()[0] as f64;
    Ok(Var::constant(eps.clone()).sub(eps_hat)?.square().sum().scale(1.0 / n))
}

/// DDPM loss of `model` on a batch `x0: [N, ...]`, as a graph node whose
/// gradient reaches the bound denoiser parameters.
pub fn ddpm_loss_graph(
    denoiser: &Denoiser,
    params: &[Var],
    x0: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    tdist: TimestepDistribution,
) -> Result<Var> {
    let b = noise_batch(x0, sched, rng, tdist)?;
    let eps_hat = denoiser.forward(params, &Var::constant(b.x_t), &b.t)?;
    noise_regression_loss(&b.eps, &eps_hat)
}

/// DDPM loss value for any noise predictor.
pub fn ddpm_loss(
    model: &dyn NoisePredictor,
    x0: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    tdist: TimestepDistribution,
) -> Result<f64> {
    let b = noise_batch(x0, sched, rng, tdist)?;
    let eps_hat = model.predict_noise(&b.x_t, &b.t)?;
    let n = x0.shape()[0] as f64;
    Ok(b.eps.sub(&eps_hat)?.sum_sq() / n)
}

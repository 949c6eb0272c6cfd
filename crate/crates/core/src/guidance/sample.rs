//! Guided ancestral sampling.

use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Result, SamiError};
use crate::guidance::posterior::{guidance_score_graph, GuidanceMask};
use crate::guidance::runlog::{RunLog, RunRecord};
use crate::guidance::train::{GuidanceSign, ModelBundle};
use crate::networks::Encoder;
use crate::numerics::{RngStream, Tensor, Var};

/// Coefficient `c_t` of the guided mean `μ_θ + c_t g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CoefficientRule {
    /// `(1 − α_t) / √α_t`, equivalent to plugging `ε̂ − γ_t g` into the reverse mean.
    #[default]
    Derived,
    /// `√(1 − α_t)`.
    Algorithm,
}

impl CoefficientRule {
    pub fn coefficient(self, sched: &NoiseSchedule, t: usize) -> f64 {
        let a = sched.alpha[t];
        match self {
            CoefficientRule::Derived => (1.0 - a) / a.sqrt(),
            CoefficientRule::Algorithm => (1.0 - a).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CoefficientRule::Derived => "derived",
            CoefficientRule::Algorithm => "algorithm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "derived" | "a" => Ok(Self::Derived),
            "algorithm" | "b" => Ok(Self::Algorithm),
            other => Err(SamiError::InvalidArgument(format!("unknown coefficient rule '{other}'"))),
        }
    }
}

/// Source of the likelihood score `∇_{x_t} log q(z | x_t)`.
pub trait GuidanceField {
    fn latent_dim(&self) -> usize;

    /// Posterior mean and variance `[N, d]` for clean images `[N, ...]`.
    fn posterior(&self, x0: &Tensor) -> Result<(Tensor, Tensor)>;

    /// Score for a batch: `x_t` is `[N, ...]`, `z` is `[N, d]`, one level per item.
    fn score(&self, x_t: &Tensor, z: &Tensor, mask: &GuidanceMask, t: &[usize]) -> Result<Tensor>;
}

impl GuidanceField for Encoder {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn posterior(&self, x0: &Tensor) -> Result<(Tensor, Tensor)> {
        self.encode_batch(x0)
    }

    fn score(&self, x_t: &Tensor, z: &Tensor, mask: &GuidanceMask, _t: &[usize]) -> Result<Tensor> {
        let params = self.params.bind(false);
        let g = guidance_score_graph(self, &params, x_t, &Var::constant(z.clone()), mask, false)?;
        Ok(g.value().clone())
    }
}

/// A field that always returns zero; the sampler then reduces to the unconditional one.
#[derive(Clone, Copy, Debug)]
pub struct NullGuidance {
    pub latent_dim: usize,
}

impl GuidanceField for NullGuidance {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn posterior(&self, x0: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = x0.shape()[0];
        Ok((Tensor::zeros(&[n, self.latent_dim]), Tensor::ones(&[n, self.latent_dim])))
    }

    fn score(&self, x_t: &Tensor, _z: &Tensor, _mask: &GuidanceMask, _t: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

/// What the chains are conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    /// A single clean image; every chain draws its own `z ∼ q(z | x₀)`.
    Image(Tensor),
    /// A fixed latent `[d]` shared by all chains.
    Latent(Tensor),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SampleSettings {
    pub rule: CoefficientRule,
    pub sign: GuidanceSign,
}

impl Default for GuidanceSign {
    fn default() -> Self {
        GuidanceSign::Positive
    }
}

pub struct ConditionalSamples {
    pub images: Tensor,
    /// The latent each chain was guided towards, `[n, d]`.
    pub latents: Tensor,
    pub log: RunLog,
}

fn chain_latents(field: &dyn GuidanceField, cond: &Condition, n: usize, rng: &mut RngStream) -> Result<Tensor> {
    let d = field.latent_dim();
    match cond {
        Condition::Latent(z) => {
            if z.shape() != [d] {
                return Err(SamiError::Shape {
                    op: "sample_conditional",
                    detail: format!("latent {:?}, expected [{d}]", z.shape()),
                });
            }
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                data.extend_from_slice(z.data());
            }
            Tensor::new(&[n, d], data)
        }
        Condition::Image(x0) => {
            let mut shape = vec![1];
            shape.extend_from_slice(x0.shape());
            let (m, v) = field.posterior(&x0.reshape(&shape)?)?;
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                for k in 0..d {
                    data.push(m.data()[k] + v.data()[k].sqrt() * rng.normal());
                }
            }
            Tensor::new(&[n, d], data)
        }
    }
}

fn item_norms(x: &[f64], n: usize) -> impl Iterator<Item = f64> + '_ {
    let item = x.len() / n.max(1);
    x.chunks(item.max(1)).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Guided ancestral sampling with any noise predictor and guidance field.
///
/// Draw order: the initial noise from `rng`, then latents from
/// `rng.split("latent")`, then the per-step noise from `rng`. With a
/// [`NullGuidance`] field the output is identical to
/// [`crate::diffusion::sample_unconditional`] for the same stream.
#[allow(clippy::too_many_arguments)]
pub fn sample_guided(
    model: &dyn NoisePredictor,
    field: &dyn GuidanceField,
    sched: &NoiseSchedule,
    condition: &Condition,
    mask: &GuidanceMask,
    settings: SampleSettings,
    rng: &mut RngStream,
    n: usize,
    item_shape: &[usize],
) -> Result<ConditionalSamples> {
    if mask.dim() != field.latent_dim() {
        return Err(SamiError::InvalidArgument(format!(
            "mask has {} axes, latent dim is {}",
            mask.dim(),
            field.latent_dim()
        )));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    let mut x = rng.normal_tensor(&shape);
    let z = chain_latents(field, condition, n, &mut rng.split("latent"))?;
    let sign = settings.sign.factor();
    let mut log = RunLog::default();
    let mut next = vec![0.0; x.len()];
    let levels = sched.levels();
    for (step, t) in (0..levels).rev().enumerate() {
        let tv = vec![t; n];
        let eps = model.predict_noise(&x, &tv)?;
        let g = field.score(&x, &z, mask, &tv)?;
        if g.shape() != x.shape() {
            return Err(SamiError::Shape {
                op: "sample_conditional",
                detail: format!("guidance {:?} for images {:?}", g.shape(), x.shape()),
            });
        }
        sched.reverse_mean(x.data(), t, eps.data(), &mut next);
        let c = sign * settings.rule.coefficient(sched, t);
        for (o, &gi) in next.iter_mut().zip(g.data()) {
            *o += c * gi;
        }
        let gamma = sched.gamma(t);
        log.push(RunRecord {
            step,
            t: t as f64,
            loss: None,
            recon: None,
            kl: None,
            norm_eps: item_norms(eps.data(), n).sum::<f64>() / n as f64,
            norm_guidance: gamma * item_norms(g.data(), n).sum::<f64>() / n as f64,
        });
        if t > 0 {
            let sd = sched.beta[t].sqrt();
            for v in next.iter_mut() {
                *v += sd * rng.normal();
            }
        }
        x = Tensor::new(&shape, next.clone())?;
    }
    Ok(ConditionalSamples { images: x, latents: z, log })
}

/// Guided sampling with a trained bundle.
pub fn sample_conditional(
    bundle: &ModelBundle,
    condition: &Condition,
    mask: &GuidanceMask,
    rng: &mut RngStream,
    n: usize,
    settings: SampleSettings,
) -> Result<ConditionalSamples> {
    let s = bundle.denoiser.config.image_size;
    sample_guided(
        &bundle.denoiser,
        &bundle.encoder,
        &bundle.schedule,
        condition,
        mask,
        settings,
        rng,
        n,
        &[1, s, s],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sample_unconditional;

    struct Scaled(f64);
    impl NoisePredictor for Scaled {
        fn predict_noise(&self, x: &Tensor, _t: &[usize]) -> Result<Tensor> {
            Ok(x.scale(self.0))
        }
    }

    #[test]
    fn null_guidance_reproduces_unconditional() {
        let s = NoiseSchedule::linear(20).unwrap();
        let m = Scaled(0.3);
        let a = sample_unconditional(&m, &s, &mut RngStream::new(4), 3, &[2]).unwrap();
        let b = sample_guided(
            &m,
            &NullGuidance { latent_dim: 2 },
            &s,
            &Condition::Latent(Tensor::vector(&[0.0, 1.0])),
            &GuidanceMask::full(2),
            SampleSettings::default(),
            &mut RngStream::new(4),
            3,
            &[2],
        )
        .unwrap();
        assert_eq!(a, b.images);
        assert_eq!(b.log.len(), 20);
        assert!(b.log.records.iter().all(|r| r.norm_guidance == 0.0));
    }

    #[test]
    fn rules_and_parsing() {
        let s = NoiseSchedule::linear(10).unwrap();
        let a = s.alpha[5];
        assert_eq!(CoefficientRule::Derived.coefficient(&s, 5), (1.0 - a) / a.sqrt());
        assert_eq!(CoefficientRule::Algorithm.coefficient(&s, 5), (1.0 - a).sqrt());
        assert_eq!(CoefficientRule::parse("b").unwrap(), CoefficientRule::Algorithm);
        assert!(CoefficientRule::parse("c").is_err());
    }

    #[test]
    fn latent_shape_checked() {
        let s = NoiseSchedule::linear(5).unwrap();
        let r = sample_guided(
            &Scaled(0.0),
            &NullGuidance { latent_dim: 2 },
            &s,
            &Condition::Latent(Tensor::vector(&[0.0; 3])),
            &GuidanceMask::full(2),
            SampleSettings::default(),
            &mut RngStream::new(0),
            1,
            &[2],
        );
        assert!(r.is_err());
    }
}

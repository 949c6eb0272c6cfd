//! The β-weighted guided noise-regression objective and its training loop.

use crate::diffusion::{ddpm_loss_graph, noise_batch, NoiseSchedule, TimestepDistribution};
use crate::error::{Result, SamiError};
use crate::guidance::posterior::{guidance_score_graph, kl_graph, GuidanceMask};
use crate::guidance::runlog::{RunLog, RunRecord};
use crate::networks::{Denoiser, Encoder};
use crate::numerics::{backward, no_grad, RngStream, Tensor, Var};

/// Which networks receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Denoiser and encoder together.
    Joint,
    /// Encoder only, on top of a fixed denoiser.
    FrozenDenoiser,
    /// Plain DDPM training of the denoiser, no encoder.
    DenoiserOnly,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::FrozenDenoiser => "frozen-denoiser",
            TrainMode::DenoiserOnly => "denoiser-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "frozen-denoiser" => Ok(Self::FrozenDenoiser),
            "denoiser-only" => Ok(Self::DenoiserOnly),
            other => Err(SamiError::Config(format!("unknown training mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KlAnneal {
    /// Geometric ramp from `β · start_factor` to `β` over `epochs`.
    Exponential { epochs: usize, start_factor: f64 },
    Constant,
}

/// Sign of the guidance term inside the training norm and the guided mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceSign {
    /// `‖ε − ε̂_θ + γ g‖²` and `μ_θ + c·g`.
    Positive,
    /// The flipped convention, kept for A/B comparison.
    Negative,
}

impl GuidanceSign {
    pub fn factor(self) -> f64 {
        match self {
            GuidanceSign::Positive => 1.0,
            GuidanceSign::Negative => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GuidanceSign::Positive => "positive",
            GuidanceSign::Negative => "negative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Self::Positive),
            "negative" => Ok(Self::Negative),
            other => Err(SamiError::Config(format!("unknown guidance sign '{other}'"))),
        }
    }
}

/// Per-level weight λ_t of the regression term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossWeight {
    Unit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta_final: f64,
    pub anneal: KlAnneal,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub timesteps: TimestepDistribution,
    pub mode: TrainMode,
    pub loss_weight: LossWeight,
    /// Latent draws averaged in the guidance score.
    pub latent_samples: usize,
    pub sign: GuidanceSign,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta_final: 5e-6,
            anneal: KlAnneal::Exponential {
                epochs: 1000,
                start_factor: 1e-6,
            },
            learning_rate: 6e-3,
            batch_size: 512,
            epochs: 1000,
            timesteps: TimestepDistribution::Uniform,
            mode: TrainMode::Joint,
            loss_weight: LossWeight::Unit,
            latent_samples: 1,
            sign: GuidanceSign::Positive,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_final > 0.0) {
            return Err(SamiError::Config("beta_final must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.latent_samples == 0 {
            return Err(SamiError::Config("learning rate, batch size and latent samples must be positive".into()));
        }
        if let KlAnneal::Exponential { start_factor, .. } = self.anneal {
            if !(start_factor > 0.0 && start_factor <= 1.0) {
                return Err(SamiError::Config("anneal start factor must be in (0, 1]".into()));
            }
        }
        Ok(())
    }

    /// KL weight at fractional epoch `progress` (epochs elapsed, may be fractional).
    pub fn kl_weight(&self, progress: f64) -> f64 {
        match self.anneal {
            KlAnneal::Constant => self.beta_final,
            KlAnneal::Exponential { epochs, start_factor } => {
                if epochs == 0 || progress >= epochs as f64 {
                    self.beta_final
                } else {
                    let frac = (progress / epochs as f64).max(0.0);
                    self.beta_final * start_factor.powf(1.0 - frac)
                }
            }
        }
    }
}

/// Denoiser, encoder and the schedule they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub denoiser: Denoiser,
    pub encoder: Encoder,
    pub schedule: NoiseSchedule,
}

/// Per-item `γ_t`, shaped to broadcast over `[N, 1, S, S]`.
fn gamma_column(t: &[usize], sched: &NoiseSchedule, item_rank: usize) -> Result<Tensor> {
    let mut shape = vec![t.len()];
    shape.extend(std::iter::repeat_n(1, item_rank));
    Tensor::new(&shape, t.iter().map(|&l| sched.gamma(l)).collect())
}

fn mean_item_norm(x: &Tensor) -> f64 {
    let n = x.shape()[0];
    let item = x.len() / n.max(1);
    (0..n)
        .map(|i| x.data()[i * item..(i + 1) * item].iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

/// `ε − ε̂ + s·γ·g`, the residual inside the guided regression norm.
pub fn guided_residual(eps: &Tensor, eps_hat: &Var, gamma_g: &Var, sign: GuidanceSign) -> Result<Var> {
    let r = Var::constant(eps.clone()).sub(eps_hat)?;
    match sign {
        GuidanceSign::Positive => r.add(gamma_g),
        GuidanceSign::Negative => r.sub(gamma_g),
    }
}

/// Graph of the full objective for one batch plus its log record.
///
/// Draw order from `rng`: levels and forward noise first (exactly as
/// [`crate::diffusion::noise_batch`]), then the latent reparameterization
/// noise.
#[allow(clippy::too_many_arguments)]
pub fn sami_loss(
    bundle: &ModelBundle,
    denoiser_params: &[Var],
    encoder_params: &[Var],
    x0: &Tensor,
    config: &TrainConfig,
    kl_weight: f64,
    step: usize,
    rng: &mut RngStream,
) -> Result<(Var, RunRecord)> {
    let sched = &bundle.schedule;
    let b = noise_batch(x0, sched, rng, config.timesteps)?;
    let n = x0.shape()[0];
    let d = bundle.encoder.config.latent_dim;

    let (mu0, var0) = bundle.encoder.forward(encoder_params, &Var::constant(x0.clone()))?;
    let sd0 = var0.sqrt()?;
    let mask = GuidanceMask::full(d);
    let mut g: Option<Var> = None;
    for _ in 0..config.latent_samples {
        let ez = Var::constant(rng.normal_tensor(&[n, d]));
        let z = mu0.add(&sd0.mul(&ez)?)?;
        let gk = guidance_score_graph(&bundle.encoder, encoder_params, &b.x_t, &z, &mask, true)?;
        g = Some(match g {
            Some(acc) => acc.add(&gk)?,
            None => gk,
        });
    }
    let g = g.expect("latent_samples >= 1").scale(1.0 / config.latent_samples as f64);

    let eps_hat = bundle
        .denoiser
        .forward(denoiser_params, &Var::constant(b.x_t.clone()), &b.t)?;
    let gamma = Var::constant(gamma_column(&b.t, sched, x0.rank() - 1)?);
    let gamma_g = g.mul(&gamma)?;
    let resid = guided_residual(&b.eps, &eps_hat, &gamma_g, config.sign)?;
    let recon = resid.square().sum().scale(1.0 / n as f64);
    let kl = kl_graph(&mu0, &var0)?;
    let loss = recon.add(&kl.scale(kl_weight))?;

    let record = RunRecord {
        step,
        t: b.t.iter().sum::<usize>() as f64 / n as f64,
        loss: Some(loss.value().item()?),
        recon: Some(recon.value().item()?),
        kl: Some(kl.value().item()?),
        norm_eps: mean_item_norm(eps_hat.value()),
        norm_guidance: mean_item_norm(gamma_g.value()),
    };
    Ok((loss, record))
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(SamiError::InvalidArgument("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(params.len());
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&w, &gi))| {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    w - self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps)
                })
                .collect();
            out.push(Tensor::new(p.shape(), data)?);
        }
        Ok(out)
    }
}

/// Trained bundle and the per-step log.
pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub log: RunLog,
}

/// Minibatch training with per-epoch shuffling.
///
/// `data` is `[N, 1, S, S]` in model space. Every step appends one record.
/// A non-finite loss aborts with [`SamiError::Diverged`] after logging.
pub fn train(config: &TrainConfig, bundle: ModelBundle, data: &Tensor, rng: &RngStream) -> Result<TrainOutput> {
    train_with_progress(config, bundle, data, rng, |_, _| {})
}

/// [`train`] with a callback after every epoch (epoch index, that epoch's mean loss).
pub fn train_with_progress(
    config: &TrainConfig,
    mut bundle: ModelBundle,
    data: &Tensor,
    rng: &RngStream,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    config.validate()?;
    let n = *data
        .shape()
        .first()
        .ok_or_else(|| SamiError::InvalidArgument("empty dataset".into()))?;
    if n == 0 {
        return Err(SamiError::InvalidArgument("empty dataset".into()));
    }
    let item: Vec<usize> = data.shape()[1..].to_vec();
    let item_len: usize = item.iter().product();
    let batches_per_epoch = n.div_ceil(config.batch_size);

    let train_denoiser = matches!(config.mode, TrainMode::Joint | TrainMode::DenoiserOnly);
    let train_encoder = matches!(config.mode, TrainMode::Joint | TrainMode::FrozenDenoiser);
    let mut opt_d = Adam::new(config.learning_rate, &bundle.denoiser.params.tensors);
    let mut opt_e = Adam::new(config.learning_rate, &bundle.encoder.params.tensors);
    let mut log = RunLog::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let order = rng.split_index("epoch", epoch as u64).permutation(n);
        let mut epoch_loss = 0.0;
        for bi in 0..batches_per_epoch {
            let idx = &order[bi * config.batch_size..((bi + 1) * config.batch_size).min(n)];
            let mut buf = Vec::with_capacity(idx.len() * item_len);
            for &i in idx {
                buf.extend_from_slice(&data.data()[i * item_len..(i + 1) * item_len]);
            }
            let mut shape = vec![idx.len()];
            shape.extend_from_slice(&item);
            let x0 = Tensor::new(&shape, buf)?;
            let mut step_rng = rng.split_index("step", step as u64);

            let pd = bundle.denoiser.params.bind(train_denoiser);
            let pe = bundle.encoder.params.bind(train_encoder);
            let (loss, record) = if config.mode == TrainMode::DenoiserOnly {
                let loss = ddpm_loss_graph(&bundle.denoiser, &pd, &x0, &bundle.schedule, &mut step_rng, config.timesteps)?;
                let v = loss.value().item()?;
                let rec = RunRecord {
                    step,
                    t: f64::NAN,
                    loss: Some(v),
                    recon: Some(v),
                    kl: None,
                    norm_eps: f64::NAN,
                    norm_guidance: 0.0,
                };
                (loss, rec)
            } else {
                let progress = epoch as f64 + bi as f64 / batches_per_epoch as f64;
                sami_loss(
                    &bundle,
                    &pd,
                    &pe,
                    &x0,
                    config,
                    config.kl_weight(progress),
                    step,
                    &mut step_rng,
                )?
            };
            let lv = loss.value().item()?;
            log.push(record);
            if !lv.is_finite() {
                log::error!("training diverged at step {step} (epoch {epoch}): loss = {lv}");
                return Err(SamiError::Diverged { step, loss: lv });
            }
            epoch_loss += lv;

            let mut wrt: Vec<&Var> = Vec::new();
            if train_denoiser {
                wrt.extend(pd.iter());
            }
            if train_encoder {
                wrt.extend(pe.iter());
            }
            let grads: Vec<Tensor> = backward(&loss, &wrt, false)?
                .into_iter()
                .map(|g| g.value().clone())
                .collect();
            drop(loss);
            let (gd, ge) = grads.split_at(if train_denoiser { pd.len() } else { 0 });
            no_grad(|| -> Result<()> {
                if train_denoiser {
                    let new = opt_d.update(&bundle.denoiser.params.tensors, gd)?;
                    bundle.denoiser.params = bundle.denoiser.params.with_tensors(new)?;
                }
                if train_encoder {
                    let new = opt_e.update(&bundle.encoder.params.tensors, ge)?;
                    bundle.encoder.params = bundle.encoder.params.with_tensors(new)?;
                }
                Ok(())
            })?;
            step += 1;
        }
        let mean = epoch_loss / batches_per_epoch as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        on_epoch(epoch, mean);
    }
    Ok(TrainOutput { bundle, log })
}

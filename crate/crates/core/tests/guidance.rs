mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use sami::diffusion::{ddpm_loss_graph, sample_unconditional, NoiseSchedule, TimestepDistribution};
use sami::guidance::*;
use sami::networks::{Encoder, GaussianPosterior, Nonlinearity};
use sami::numerics::{max_relative_error, RngStream, Tensor, Var};

fn post(m: &[f64], v: &[f64]) -> GaussianPosterior {
    GaussianPosterior::new(Tensor::vector(m), Tensor::vector(v)).unwrap()
}

/// Encoder whose outputs do not depend on the input at all.
fn input_blind_encoder(seed: u64) -> Encoder {
    let mut enc = common::tiny_encoder(seed, Nonlinearity::Silu);
    for name in enc.params.names.clone() {
        if name.starts_with("conv") {
            let s = enc.params.get(&name).unwrap().shape().to_vec();
            enc.params.set(&name, Tensor::zeros(&s)).unwrap();
        }
    }
    enc.params.set("mean.b", Tensor::vector(&[0.3, -0.2])).unwrap();
    enc.params.set("var.b", Tensor::vector(&[0.1, 0.4])).unwrap();
    enc
}

fn independent_log_density(m: &[f64], v: &[f64], z: &[f64], active: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..m.len() {
        if active[i] {
            s += -0.5 * (2.0 * PI * v[i]).ln() - (z[i] - m[i]).powi(2) / (2.0 * v[i]);
        }
    }
    s
}

#[test]
fn log_posterior_examples() {
    let full = GuidanceMask::full(2);
    let lp = log_posterior(&post(&[0.4, 0.1], &[1.0, 1.0]), &Tensor::vector(&[0.4, 0.1]), &full).unwrap();
    assert!((lp + (2.0 * PI).ln()).abs() < 1e-14);
    let lp = log_posterior(&post(&[0.0, 0.0], &[1.0, 1.0]), &Tensor::vector(&[1.0, 0.0]), &full).unwrap();
    assert!((lp + (2.0 * PI).ln() + 0.5).abs() < 1e-14);
}

#[test]
fn empty_mask_is_rejected() {
    assert!(GuidanceMask::new(vec![false, false]).is_err());
}

#[test]
fn log_posterior_matches_density_oracle() {
    let mut rng = RngStream::new(21);
    for _ in 0..20 {
        let m: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..4).map(|_| rng.uniform_range(0.1, 3.0)).collect();
        let z: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let active: Vec<bool> = (0..4).map(|i| i == 0 || rng.uniform() < 0.5).collect();
        let mask = GuidanceMask::new(active.clone()).unwrap();
        let lp = log_posterior(&post(&m, &v), &Tensor::vector(&z), &mask).unwrap();
        let want = independent_log_density(&m, &v, &z, &active);
        assert!((lp - want).abs() <= 1e-12 * want.abs().max(1.0), "{lp} vs {want}");
    }
}

#[test]
fn full_mask_equals_unmasked_exactly() {
    let mut rng = RngStream::new(22);
    let m = rng.normal_tensor(&[3, 2]);
    let v = rng.uniform_tensor(&[3, 2], 0.2, 2.0);
    let z = rng.normal_tensor(&[3, 2]);
    let full = GuidanceMask::full(2);
    let explicit = GuidanceMask::new(vec![true, true]).unwrap();
    let a = log_posterior_graph(&Var::constant(m.clone()), &Var::constant(v.clone()), &Var::constant(z.clone()), &full).unwrap();
    let b = log_posterior_graph(&Var::constant(m), &Var::constant(v), &Var::constant(z), &explicit).unwrap();
    assert_eq!(a.value().item().unwrap().to_bits(), b.value().item().unwrap().to_bits());
}

#[test]
fn guidance_vanishes_at_the_mean_with_constant_variance() {
    let enc = common::constant_variance_encoder(1, 0.3);
    let x = RngStream::new(2).normal_tensor(&[1, 1, 8, 8]);
    let (mu, _) = enc.encode_batch(&x).unwrap();
    let g = guidance_score(&enc, &x, &mu, &GuidanceMask::full(2)).unwrap();
    assert!(g.max_abs() < 1e-14, "{}", g.max_abs());
}

#[test]
fn guidance_matches_explicit_jacobian() {
    for seed in 0..4 {
        let err = common::explicit_jacobian_error(seed);
        assert!(err <= 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn guidance_matches_finite_differences() {
    for seed in 0..3 {
        let enc = common::tiny_encoder(seed, Nonlinearity::Silu);
        let mut rng = RngStream::new(200 + seed);
        let x = rng.normal_tensor(&[1, 1, 8, 8]);
        let z = rng.normal_tensor(&[1, 2]);
        let mask = if seed == 2 { GuidanceMask::only(2, &[1]).unwrap() } else { GuidanceMask::full(2) };
        let g = guidance_score(&enc, &x, &z, &mask).unwrap();
        let f = |xv: &Var| -> sami::Result<Var> {
            let (m, v) = enc.forward(&enc.params.bind(false), xv)?;
            log_posterior_graph(&m, &v, &Var::constant(z.clone()), &mask)
        };
        let fd = sami::numerics::fdcheck::numeric_gradient(&f, &x, 1e-5).unwrap();
        let err = max_relative_error(g.data(), fd.data());
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn conditional_estimate_cases() {
    let sched = NoiseSchedule::linear(50).unwrap();
    let mut rng = RngStream::new(5);
    let e = rng.normal_tensor(&[2, 4]);
    let g = rng.normal_tensor(&[2, 4]);
    let t = [3usize, 40];
    assert_eq!(conditional_noise_estimate(&e, &Tensor::zeros(&[2, 4]), &t, &sched).unwrap(), e);
    let c = conditional_noise_estimate(&e, &g, &t, &sched).unwrap();
    for i in 0..2 {
        let gamma = (1.0 - sched.alpha_bar[t[i]]).sqrt();
        for j in 0..4 {
            let k = i * 4 + j;
            // Score additivity holds to the bit for the defining expression.
            assert_eq!(c.data()[k].to_bits(), (e.data()[k] - gamma * g.data()[k]).to_bits());
            let diff = c.data()[k] - e.data()[k];
            assert!((diff + gamma * g.data()[k]).abs() <= 4.0 * f64::EPSILON * e.data()[k].abs().max(1.0));
        }
    }
    let early = conditional_noise_estimate(&e, &g, &[0, 0], &sched).unwrap();
    assert!(early.sub(&e).unwrap().max_abs() < 0.02 * g.max_abs());
}

#[test]
fn kl_closed_form_examples() {
    assert_eq!(kl_to_standard_normal(&post(&[0.0, 0.0], &[1.0, 1.0])), 0.0);
    assert!((kl_to_standard_normal(&post(&[1.0], &[1.0])) - 0.5).abs() < 1e-15);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = RngStream::new(31);
    for _ in 0..20 {
        let m: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.2, 2.0)).collect();
        let p = post(&m, &v);
        let exact = kl_to_standard_normal(&p);
        let (mc, se) = common::monte_carlo_kl(&p, 100_000, &mut rng);
        assert!((mc - exact).abs() <= 3.0 * se, "{mc} vs {exact} (se {se})");
        assert!((mc - exact).abs() <= 1e-2 * exact.max(1.0), "{mc} vs {exact}");
    }
}

#[test]
fn kl_graph_agrees_with_value() {
    let m = Tensor::new(&[2, 2], vec![0.1, -0.5, 1.0, 0.0]).unwrap();
    let v = Tensor::new(&[2, 2], vec![0.5, 1.0, 2.0, 0.3]).unwrap();
    let g = kl_graph(&Var::constant(m.clone()), &Var::constant(v.clone())).unwrap().value().item().unwrap();
    let a = kl_to_standard_normal(&post(&m.data()[..2], &v.data()[..2]));
    let b = kl_to_standard_normal(&post(&m.data()[2..], &v.data()[2..]));
    assert!((g - 0.5 * (a + b)).abs() < 1e-14);
}

#[test]
fn blind_encoder_reduces_to_ddpm_loss() {
    let levels = 30;
    let bundle = ModelBundle {
        denoiser: common::tiny_denoiser(7, levels),
        encoder: input_blind_encoder(8),
        schedule: NoiseSchedule::linear(levels).unwrap(),
    };
    let x0 = RngStream::new(9).normal_tensor(&[4, 1, 8, 8]);
    let cfg = TrainConfig {
        timesteps: TimestepDistribution::Uniform,
        ..Default::default()
    };
    let dp = bundle.denoiser.params.bind(false);
    let ep = bundle.encoder.params.bind(false);
    let (loss, rec) = sami_loss(&bundle, &dp, &ep, &x0, &cfg, 0.0, 0, &mut RngStream::new(10)).unwrap();
    let plain = ddpm_loss_graph(&bundle.denoiser, &dp, &x0, &bundle.schedule, &mut RngStream::new(10), cfg.timesteps).unwrap();
    assert_eq!(loss.value().item().unwrap().to_bits(), plain.value().item().unwrap().to_bits());
    assert_eq!(rec.norm_guidance, 0.0);
}

#[test]
fn perfect_composite_gives_zero_residual() {
    let eps = RngStream::new(3).normal_tensor(&[2, 3]);
    let r = guided_residual(&eps, &Var::constant(eps.clone()), &Var::constant(Tensor::zeros(&[2, 3])), GuidanceSign::Positive).unwrap();
    assert_eq!(r.value().sum_sq(), 0.0);
}

#[test]
fn encoder_gradient_of_full_loss() {
    for seed in [5, 6] {
        let err = common::sami_loss_slice_error(seed).unwrap();
        assert!(err <= 1e-3, "seed {seed}: {err}");
    }
}

fn tiny_bundle(levels: usize) -> ModelBundle {
    ModelBundle {
        denoiser: common::tiny_denoiser(1, levels),
        encoder: common::tiny_encoder(2, Nonlinearity::Relu),
        schedule: NoiseSchedule::linear(levels).unwrap(),
    }
}

fn tiny_run(mode: TrainMode) -> TrainOutput {
    let data = RngStream::new(4).uniform_tensor(&[12, 1, 8, 8], -1.0, 1.0);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 2,
        learning_rate: 1e-3,
        anneal: KlAnneal::Exponential { epochs: 2, start_factor: 1e-6 },
        mode,
        ..Default::default()
    };
    train(&cfg, tiny_bundle(20), &data, &RngStream::new(5)).unwrap()
}

#[test]
fn frozen_denoiser_is_untouched() {
    let before = tiny_bundle(20);
    let out = tiny_run(TrainMode::FrozenDenoiser);
    assert_eq!(out.bundle.denoiser, before.denoiser);
    assert_ne!(out.bundle.encoder, before.encoder);
    assert_eq!(out.log.records.len(), 6);
}

#[test]
fn training_is_deterministic() {
    let a = tiny_run(TrainMode::Joint);
    let b = tiny_run(TrainMode::Joint);
    assert_eq!(a.bundle, b.bundle);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
}

#[test]
fn kl_weight_anneals_geometrically() {
    let cfg = TrainConfig::default();
    assert!((cfg.kl_weight(0.0) - 5e-12).abs() < 1e-24);
    assert_eq!(cfg.kl_weight(1000.0), 5e-6);
    let mid = cfg.kl_weight(500.0);
    assert!((mid - 5e-9).abs() < 1e-20, "{mid}");
}

#[test]
fn null_guidance_matches_unconditional_sampling() {
    let b = tiny_bundle(15);
    let u = sample_unconditional(&b.denoiser, &b.schedule, &mut RngStream::new(3), 3, &[1, 8, 8]).unwrap();
    let c = sample_guided(
        &b.denoiser,
        &NullGuidance { latent_dim: 2 },
        &b.schedule,
        &Condition::Latent(Tensor::zeros(&[2])),
        &GuidanceMask::full(2),
        SampleSettings::default(),
        &mut RngStream::new(3),
        3,
        &[1, 8, 8],
    )
    .unwrap();
    assert_eq!(u, c.images);
    assert_eq!(c.log.records.len(), 15);
    assert!(c.log.records.iter().all(|r| r.norm_guidance == 0.0));
}

#[test]
fn coefficient_rules() {
    let s = NoiseSchedule::linear(100).unwrap();
    let a = s.alpha[50];
    assert_eq!(CoefficientRule::Derived.coefficient(&s, 50), (1.0 - a) / a.sqrt());
    assert_eq!(CoefficientRule::Algorithm.coefficient(&s, 50), (1.0 - a).sqrt());
    assert!(CoefficientRule::parse("nonsense").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        rng_seed: proptest::test_runner::RngSeed::Fixed(64),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn kl_nonnegative_and_zero_only_at_prior(
        m in proptest::collection::vec(-3.0f64..3.0, 1..5),
        seed in 0u64..1000,
    ) {
        let mut rng = RngStream::new(seed);
        let v: Vec<f64> = m.iter().map(|_| rng.uniform_range(0.05, 4.0)).collect();
        let k = kl_to_standard_normal(&post(&m, &v));
        prop_assert!(k >= 0.0);
    }

    #[test]
    fn score_additivity_is_exact(seed in 0u64..10_000, t in 0usize..200) {
        let sched = NoiseSchedule::linear(200).unwrap();
        let mut rng = RngStream::new(seed);
        let e = rng.normal_tensor(&[1, 6]);
        let g = rng.normal_tensor(&[1, 6]);
        let c = conditional_noise_estimate(&e, &g, &[t], &sched).unwrap();
        let gamma = (1.0 - sched.alpha_bar[t]).sqrt();
        for k in 0..6 {
            prop_assert_eq!(c.data()[k].to_bits(), (e.data()[k] - gamma * g.data()[k]).to_bits());
        }
    }

    #[test]
    fn masked_log_posterior_sums_active_axes(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed);
        let m: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.1, 2.0)).collect();
        let z: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let p = post(&m, &v);
        let zt = Tensor::vector(&z);
        let parts: f64 = (0..3)
            .map(|i| log_posterior(&p, &zt, &GuidanceMask::only(3, &[i]).unwrap()).unwrap())
            .sum();
        let full = log_posterior(&p, &zt, &GuidanceMask::full(3)).unwrap();
        prop_assert!((parts - full).abs() < 1e-12 * full.abs().max(1.0));
    }
}

//! Representation diagnostics for trained encoders and sampling runs.

use crate::diffusion::{forward_noise_batch, NoiseSchedule};
use crate::error::{Result, SamiError};
use crate::guidance::RunLog;
use crate::networks::Encoder;
use crate::numerics::{backward, RngStream, Tensor, Var};

const COHERENCE_EPS: f64 = 1e-8;

fn invalid(msg: impl Into<String>) -> SamiError {
    SamiError::InvalidArgument(msg.into())
}

/// Mean squared distance to the sample mean, divided by the per-sample size.
pub fn variability(samples: &[Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(invalid("variability needs at least 2 samples"));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(SamiError::Shape {
            op: "variability",
            detail: "samples differ in size".into(),
        });
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let ss: f64 = samples
        .iter()
        .map(|s| s.data().iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum();
    Ok(ss / n / d as f64)
}

/// [`variability`] over the leading axis of a batch.
pub fn batch_variability(x: &Tensor) -> Result<f64> {
    variability(&x.unstack()?)
}

/// `steps` evenly spaced points from `z_a` to `z_b`, endpoints included.
pub fn latent_traverse(z_a: &Tensor, z_b: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    if steps < 2 {
        return Err(invalid("latent_traverse needs at least 2 steps"));
    }
    if z_a.shape() != z_b.shape() {
        return Err(SamiError::Shape {
            op: "latent_traverse",
            detail: format!("{:?} vs {:?}", z_a.shape(), z_b.shape()),
        });
    }
    (0..steps)
        .map(|k| {
            let w = k as f64 / (steps - 1) as f64;
            z_a.zip_map(z_b, "latent_traverse", |a, b| if k + 1 == steps { b } else { a + w * (b - a) })
        })
        .collect()
}

/// Mean posterior variance per latent axis at a set of diffusion times.
///
/// Time `0` is the clean image and uses no noise draw; time `t ≥ 1` is
/// schedule level `t − 1`, averaged over `draws` forward-noise samples and
/// over the batch `x0` (`[N, 1, S, S]`). Returns `times.len()` rows of `d`.
pub fn posterior_variance_profile(
    encoder: &Encoder,
    x0: &Tensor,
    sched: &NoiseSchedule,
    times: &[usize],
    draws: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("times must be sorted ascending"));
    }
    if draws == 0 {
        return Err(invalid("draws must be positive"));
    }
    let n = x0.shape()[0];
    let d = encoder.config.latent_dim;
    let mean_var = |x: &Tensor| -> Result<Vec<f64>> {
        let (_, v) = encoder.encode_batch(x)?;
        let mut acc = vec![0.0; d];
        for i in 0..n {
            for (k, a) in acc.iter_mut().enumerate() {
                *a += v.data()[i * d + k];
            }
        }
        Ok(acc.into_iter().map(|a| a / n as f64).collect())
    };
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        if t == 0 {
            rows.push(mean_var(x0)?);
            continue;
        }
        let level = t - 1;
        sched.check_level(level)?;
        let mut acc = vec![0.0; d];
        for _ in 0..draws {
            let eps = rng.normal_tensor(x0.shape());
            let xt = forward_noise_batch(x0, &vec![level; n], &eps, sched)?;
            for (a, v) in acc.iter_mut().zip(mean_var(&xt)?) {
                *a += v;
            }
        }
        rows.push(acc.into_iter().map(|a| a / draws as f64).collect());
    }
    Ok(rows)
}

/// Per-axis global-coherence diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisReport {
    /// Variance over images of the clean posterior mean.
    pub population_variance: Vec<f64>,
    /// Mean posterior variance at the reference level.
    pub noisy_variance: Vec<f64>,
    /// Mean `‖∇_{x_t} σ_i²‖` at the reference level.
    pub sensitivity: Vec<f64>,
    pub coherence: Vec<f64>,
}

impl AxisReport {
    /// Coherence with a custom guard `eps`, for perturbation checks.
    pub fn coherence_with(&self, eps: f64) -> Vec<f64> {
        (0..self.population_variance.len())
            .map(|i| self.noisy_variance[i] / ((self.population_variance[i] + eps) * (self.sensitivity[i] + eps)))
            .collect()
    }

    /// Axis indices by descending coherence.
    pub fn ranking(&self) -> Vec<usize> {
        rank_desc(&self.coherence)
    }
}

fn rank_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

fn column_stats(x: &Tensor, n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            mean[k] += x.data()[i * d + k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            let r = x.data()[i * d + k] - mean[k];
            var[k] += r * r;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

/// Population spread of clean latents, noisy posterior variance and its
/// input sensitivity, per axis, at schedule level `t_ref`.
pub fn global_coherence(
    encoder: &Encoder,
    images: &Tensor,
    sched: &NoiseSchedule,
    t_ref: usize,
    rng: &mut RngStream,
) -> Result<AxisReport> {
    let n = images.shape()[0];
    if n < 50 {
        return Err(invalid(format!("global_coherence needs at least 50 images, got {n}")));
    }
    sched.check_level(t_ref)?;
    let d = encoder.config.latent_dim;
    let (mu, _) = encoder.encode_batch(images)?;
    let (_, population_variance) = column_stats(&mu, n, d);

    let eps = rng.normal_tensor(images.shape());
    let xt = forward_noise_batch(images, &vec![t_ref; n], &eps, sched)?;
    let params = encoder.params.bind(false);
    let x = Var::param(xt);
    let (_, var) = encoder.forward(&params, &x)?;
    let (noisy_mean, _) = column_stats(var.value(), n, d);
    let mut sensitivity = vec![0.0; d];
    let item = x.value().len() / n;
    for (k, s) in sensitivity.iter_mut().enumerate() {
        let mut sel = vec![0.0; d];
        sel[k] = 1.0;
        // Images are independent, so the gradient of the batch sum splits per image.
        let picked = var.mul(&Var::constant(Tensor::new(&[1, d], sel)?))?.sum();
        let g = backward(&picked, &[&x], false)?.remove(0);
        *s = g
            .value()
            .data()
            .chunks(item)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64;
    }
    let mut report = AxisReport {
        population_variance,
        noisy_variance: noisy_mean,
        sensitivity,
        coherence: Vec::new(),
    };
    report.coherence = report.coherence_with(COHERENCE_EPS);
    Ok(report)
}

/// `√((Σw²)² / Σw⁴)`: 1 for a one-hot vector, `√d` for a uniform one.
pub fn participation_ratio(w: &[f64]) -> Result<f64> {
    let s2: f64 = w.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        return Err(invalid("participation ratio of a zero vector"));
    }
    let s4: f64 = w.iter().map(|v| v.powi(4)).sum();
    Ok((s2 * s2 / s4).sqrt())
}

/// Cosine similarity of consecutive displacement vectors along a path.
pub fn straightness(points: &[Tensor]) -> Result<(Vec<f64>, f64)> {
    if points.len() < 3 {
        return Err(invalid("straightness needs at least 3 points"));
    }
    let diffs: Vec<Tensor> = points
        .windows(2)
        .map(|w| w[1].sub(&w[0]))
        .collect::<Result<_>>()?;
    for (i, d) in diffs.iter().enumerate() {
        if d.sum_sq() == 0.0 {
            return Err(invalid(format!("points {i} and {} coincide", i + 1)));
        }
    }
    let per: Vec<f64> = diffs
        .windows(2)
        .map(|w| {
            let dot: f64 = w[0].data().iter().zip(w[1].data()).map(|(a, b)| a * b).sum();
            (dot / (w[0].norm() * w[1].norm())).clamp(-1.0, 1.0)
        })
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Per-step norms of the prior and guidance terms from a sampling log.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreProfile {
    pub steps: Vec<usize>,
    pub t: Vec<f64>,
    pub eps_norm: Vec<f64>,
    pub guidance_norm: Vec<f64>,
    /// `‖ε̂_θ‖ − ‖γ_t g‖`.
    pub difference: Vec<f64>,
}

impl ScoreProfile {
    /// `‖γ_t g‖ / ‖ε̂_θ‖` per step.
    pub fn ratio(&self) -> Vec<f64> {
        self.guidance_norm
            .iter()
            .zip(&self.eps_norm)
            .map(|(g, e)| if *e > 0.0 { g / e } else { 0.0 })
            .collect()
    }

    /// Step index (0 = first, noisiest) where the ratio peaks.
    pub fn peak_ratio_step(&self) -> usize {
        let r = self.ratio();
        (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a))).unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t,eps_norm,guidance_norm,difference,ratio\n");
        for (i, r) in self.ratio().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.steps[i], self.t[i], self.eps_norm[i], self.guidance_norm[i], self.difference[i], r
            ));
        }
        out
    }
}

pub fn score_magnitude_profile(log: &RunLog) -> Result<ScoreProfile> {
    if log.is_empty() {
        return Err(invalid("empty run log"));
    }
    let r = &log.records;
    Ok(ScoreProfile {
        steps: r.iter().map(|x| x.step).collect(),
        t: r.iter().map(|x| x.t).collect(),
        eps_norm: r.iter().map(|x| x.norm_eps).collect(),
        guidance_norm: r.iter().map(|x| x.norm_guidance).collect(),
        difference: r.iter().map(|x| x.norm_eps - x.norm_guidance).collect(),
    })
}

/// Hutchinson estimates of the squared Jacobian and Hessian norms of a
/// batched map `x [N, ...] -> μ [N, d]`, averaged over images and probes.
///
/// The Jacobian term is `E_v ‖Jᵀv‖²`. The Hessian term is
/// `E_{v,u} ‖∇_x(uᵀ ∇_x(vᵀ μ))‖²` with `v ∼ N(0, I_d)` and `u ∼ N(0, I_D)`.
pub fn smoothness_probe_fn(
    f: impl Fn(&Var) -> Result<Var>,
    images: &Tensor,
    n_probes: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    if n_probes == 0 {
        return Err(invalid("n_probes must be at least 1"));
    }
    let n = images.shape()[0];
    let mut jac = 0.0;
    let mut hess = 0.0;
    for _ in 0..n_probes {
        let x = Var::param(images.clone());
        let mu = f(&x)?;
        let v = Var::constant(rng.normal_tensor(mu.shape()));
        let u = Var::constant(rng.normal_tensor(images.shape()));
        let vmu = mu.mul(&v)?.sum();
        let gx = backward(&vmu, &[&x], true)?.remove(0);
        jac += gx.value().sum_sq();
        let ug = gx.mul(&u)?.sum();
        let hu = backward(&ug, &[&x], false)?.remove(0);
        hess += hu.value().sum_sq();
    }
    let denom = (n * n_probes) as f64;
    Ok((jac / denom, hess / denom))
}

/// [`smoothness_probe_fn`] on an encoder's mean head.
pub fn smoothness_probe(encoder: &Encoder, images: &Tensor, n_probes: usize, rng: &mut RngStream) -> Result<(f64, f64)> {
    let params = encoder.params.bind(false);
    smoothness_probe_fn(|x| Ok(encoder.forward(&params, x)?.0), images, n_probes, rng)
}

/// Univariate R² of every factor on every latent axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    /// `r2[f][i]`: factor `f` regressed on latent axis `i`.
    pub r2: Vec<Vec<f64>>,
    pub best_axis: Vec<usize>,
    pub best_r2: Vec<f64>,
}

impl AlignmentReport {
    /// Whether the listed factors peak on pairwise different axes.
    pub fn distinct(&self, factors: &[usize]) -> bool {
        let axes: Vec<usize> = factors.iter().map(|&f| self.best_axis[f]).collect();
        axes.iter().enumerate().all(|(i, a)| !axes[..i].contains(a))
    }
}

/// Squared Pearson correlation, which equals the OLS R² for one regressor.
/// A constant input gives 0.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
}

/// `latents` is `[N, d]`, `factors` is one row of factor values per image.
pub fn factor_alignment(latents: &Tensor, factors: &[Vec<f64>]) -> Result<AlignmentReport> {
    if latents.rank() != 2 || latents.shape()[0] != factors.len() {
        return Err(SamiError::Shape {
            op: "factor_alignment",
            detail: format!("latents {:?} for {} factor rows", latents.shape(), factors.len()),
        });
    }
    let (n, d) = (latents.shape()[0], latents.shape()[1]);
    if n < 100 {
        return Err(invalid(format!("factor_alignment needs at least 100 samples, got {n}")));
    }
    let nf = factors[0].len();
    let mut r2 = vec![vec![0.0; d]; nf];
    for (f, row) in r2.iter_mut().enumerate() {
        let y: Vec<f64> = factors.iter().map(|r| r[f]).collect();
        for (i, cell) in row.iter_mut().enumerate() {
            let x: Vec<f64> = (0..n).map(|j| latents.data()[j * d + i]).collect();
            *cell = r_squared(&x, &y);
        }
    }
    let best_axis: Vec<usize> = r2.iter().map(|row| rank_desc(row)[0]).collect();
    let best_r2 = r2.iter().zip(&best_axis).map(|(row, &a)| row[a]).collect();
    Ok(AlignmentReport { r2, best_axis, best_r2 })
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid("spearman needs two equal-length inputs of at least 2 values"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    Ok(r_squared(&ra, &rb).sqrt() * {
        let n = ra.len() as f64;
        let m = (n + 1.0) / 2.0;
        let c: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
        c.signum()
    })
}

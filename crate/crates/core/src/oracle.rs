//! A linear-Gaussian world where every score, denoiser and posterior is
//! available in closed form.
//!
//! `x₀ ∼ N(m, S)` in `R^D`, observed through `z = A x₀ + N(0, σ_z² I)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Result, SamiError};
use crate::guidance::{GuidanceField, GuidanceMask};
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWorld {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub obs: DMatrix<f64>,
    pub latent_var: f64,
}

/// Mean and covariance of a Gaussian over `x₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianX {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn chol(m: DMatrix<f64>, op: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| SamiError::Domain {
        op,
        detail: "matrix is not positive definite".into(),
    })
}

fn rows_of(x: &Tensor, dim: usize, op: &'static str) -> Result<(usize, bool)> {
    match x.shape() {
        [d] if *d == dim => Ok((1, false)),
        [n, d] if *d == dim => Ok((*n, true)),
        s => Err(SamiError::Shape {
            op,
            detail: format!("{s:?}, expected [{dim}] or [N, {dim}]"),
        }),
    }
}

/// Applies `f` to each row of `[N, D]` (or a single `[D]`).
fn map_rows(x: &Tensor, dim: usize, op: &'static str, f: impl Fn(DVector<f64>, usize) -> DVector<f64>) -> Result<Tensor> {
    let (n, _) = rows_of(x, dim, op)?;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..n {
        let row = DVector::from_column_slice(&x.data()[i * dim..(i + 1) * dim]);
        out.extend(f(row, i).iter());
    }
    Tensor::new(x.shape(), out)
}

impl GaussianWorld {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, obs: DMatrix<f64>, latent_var: f64) -> Result<Self> {
        let dim = mean.len();
        if cov.shape() != (dim, dim) || obs.ncols() != dim {
            return Err(SamiError::Shape {
                op: "GaussianWorld",
                detail: format!("mean {dim}, cov {:?}, obs {:?}", cov.shape(), obs.shape()),
            });
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * cov.amax().max(1.0) {
            return Err(SamiError::Domain {
                op: "GaussianWorld",
                detail: format!("covariance not symmetric (max asymmetry {asym:e})"),
            });
        }
        if !(latent_var >= 0.0) {
            return Err(SamiError::Domain {
                op: "GaussianWorld",
                detail: "latent noise variance must be non-negative".into(),
            });
        }
        chol(cov.clone(), "GaussianWorld")?;
        Ok(Self { mean, cov, obs, latent_var })
    }

    /// Random world with a well-conditioned covariance `MMᵀ/D + 0.3 I`.
    pub fn random(dim: usize, latent_dim: usize, latent_var: f64, rng: &mut RngStream) -> Result<Self> {
        let m = DMatrix::from_fn(dim, dim, |_, _| rng.normal());
        let cov = &m * m.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.3;
        let cov = (&cov + cov.transpose()) * 0.5;
        let mean = DVector::from_fn(dim, |_, _| rng.normal());
        let obs = DMatrix::from_fn(latent_dim, dim, |_, _| rng.normal());
        Self::new(mean, cov, obs, latent_var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.obs.nrows()
    }

    /// `ᾱ S + (1 − ᾱ) I`, the covariance of `x_t`.
    fn marginal_cov(&self, a: f64) -> DMatrix<f64> {
        &self.cov * a + DMatrix::identity(self.dim(), self.dim()) * (1.0 - a)
    }

    /// `∇ log p(x_t)` at level `t` for `[D]` or `[N, D]` inputs.
    pub fn marginal_score(&self, sched: &NoiseSchedule, t: usize, x_t: &Tensor) -> Result<Tensor> {
        sched.check_level(t)?;
        let a = sched.alpha_bar[t];
        let c = chol(self.marginal_cov(a), "marginal_score")?;
        let centre = &self.mean * a.sqrt();
        map_rows(x_t, self.dim(), "marginal_score", |x, _| -c.solve(&(x - &centre)))
    }

    /// `log p(x_t)` for a single `[D]` point.
    pub fn marginal_log_density(&self, sched: &NoiseSchedule, t: usize, x_t: &Tensor) -> Result<f64> {
        sched.check_level(t)?;
        let a = sched.alpha_bar[t];
        gaussian_log_density(&(&self.mean * a.sqrt()), &self.marginal_cov(a), x_t)
    }

    /// The MMSE noise estimate `−√(1 − ᾱ_t) ∇ log p(x_t)`.
    pub fn analytic_denoiser(&self, sched: &NoiseSchedule, t: usize, x_t: &Tensor) -> Result<Tensor> {
        let g = self.gamma(sched, t)?;
        Ok(self.marginal_score(sched, t, x_t)?.scale(-g))
    }

    fn gamma(&self, sched: &NoiseSchedule, t: usize) -> Result<f64> {
        sched.check_level(t)?;
        Ok(sched.gamma(t))
    }

    /// `E[x₀ | x_t]` and `Cov[x₀ | x_t]`, the latter shared by all `x_t`.
    pub fn clean_posterior(&self, sched: &NoiseSchedule, t: usize, x_t: &Tensor) -> Result<(Tensor, DMatrix<f64>)> {
        sched.check_level(t)?;
        let a = sched.alpha_bar[t];
        let c = chol(self.marginal_cov(a), "clean_posterior")?;
        let sc = c.solve(&self.cov).transpose(); // S C⁻¹
        let centre = &self.mean * a.sqrt();
        let mean = map_rows(x_t, self.dim(), "clean_posterior", |x, _| &self.mean + &sc * (x - &centre) * a.sqrt())?;
        let cov = &self.cov - &sc * &self.cov * a;
        Ok((mean, cov))
    }

    /// `E[ε | x_t] = (x_t − √ᾱ E[x₀ | x_t]) / √(1 − ᾱ)`, computed without any score.
    pub fn posterior_noise(&self, sched: &NoiseSchedule, t: usize, x_t: &Tensor) -> Result<Tensor> {
        let (m0, _) = self.clean_posterior(sched, t, x_t)?;
        let a = sched.alpha_bar[t];
        let g = sched.gamma(t);
        x_t.zip_map(&m0, "posterior_noise", |x, m| (x - a.sqrt() * m) / g)
    }

    /// `p(x₀ | z)` by Gaussian conditioning.
    pub fn conditional_posterior(&self, z: &Tensor) -> Result<GaussianX> {
        let d = self.latent_dim();
        if z.shape() != [d] {
            return Err(SamiError::Shape {
                op: "conditional_posterior",
                detail: format!("z {:?}, expected [{d}]", z.shape()),
            });
        }
        let a = &self.obs;
        let innov = a * &self.cov * a.transpose() + DMatrix::identity(d, d) * self.latent_var;
        let c = chol(innov, "conditional_posterior")?;
        let sat = &self.cov * a.transpose();
        let gain = c.solve(&sat.transpose()).transpose(); // S Aᵀ (A S Aᵀ + σ² I)⁻¹
        let resid = DVector::from_column_slice(z.data()) - a * &self.mean;
        Ok(GaussianX {
            mean: &self.mean + &gain * resid,
            cov: &self.cov - &gain * a * &self.cov,
        })
    }

    /// Score of `p(x_t | z)`, from the conditional posterior pushed through the forward process.
    pub fn conditional_score(&self, sched: &NoiseSchedule, t: usize, x_t: &Tensor, z: &Tensor) -> Result<Tensor> {
        sched.check_level(t)?;
        let a = sched.alpha_bar[t];
        let post = self.conditional_posterior(z)?;
        let cov = &post.cov * a + DMatrix::identity(self.dim(), self.dim()) * (1.0 - a);
        let c = chol(cov, "conditional_score")?;
        let centre = &post.mean * a.sqrt();
        map_rows(x_t, self.dim(), "conditional_score", |x, _| -c.solve(&(x - &centre)))
    }

    /// `∇_{x_t} log p(z | x_t)` restricted to the active latent axes.
    ///
    /// `z` is `[d]` (shared) or `[N, d]` (one per row of `x_t`).
    pub fn likelihood_score(
        &self,
        sched: &NoiseSchedule,
        t: usize,
        x_t: &Tensor,
        z: &Tensor,
        mask: &GuidanceMask,
    ) -> Result<Tensor> {
        sched.check_level(t)?;
        let d = self.latent_dim();
        if mask.dim() != d {
            return Err(SamiError::InvalidArgument(format!("mask has {} axes, latent dim is {d}", mask.dim())));
        }
        let (n, _) = rows_of(x_t, self.dim(), "likelihood_score")?;
        let (zn, zb) = rows_of(z, d, "likelihood_score")?;
        if zb && zn != n {
            return Err(SamiError::Shape {
                op: "likelihood_score",
                detail: format!("{zn} latents for {n} points"),
            });
        }
        let keep: Vec<usize> = (0..d).filter(|&i| mask.active()[i]).collect();
        let a_s = self.obs.select_rows(&keep);
        let k = keep.len();
        let ab = sched.alpha_bar[t];
        let (m0, cov0) = self.clean_posterior(sched, t, x_t)?;
        let p = &a_s * &cov0 * a_s.transpose() + DMatrix::identity(k, k) * self.latent_var;
        let pc = chol(p, "likelihood_score")?;
        // d E[x₀ | x_t] / d x_t = √ᾱ S C⁻¹
        let c = chol(self.marginal_cov(ab), "likelihood_score")?;
        let jac = c.solve(&self.cov).transpose() * ab.sqrt();
        let lift = jac.transpose() * a_s.transpose();
        let dim = self.dim();
        map_rows(x_t, dim, "likelihood_score", |_, i| {
            let zi = if zb { i } else { 0 };
            let zr = DVector::from_iterator(k, keep.iter().map(|&j| z.data()[zi * d + j]));
            let mi = DVector::from_column_slice(&m0.data()[i * dim..(i + 1) * dim]);
            &lift * pc.solve(&(zr - &a_s * mi))
        })
    }

    /// Samples `[n, D]` from `N(mean, cov)`.
    pub fn sample(dist: &GaussianX, n: usize, rng: &mut RngStream) -> Result<Tensor> {
        let dim = dist.mean.len();
        let l = chol(dist.cov.clone(), "sample")?.l();
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let e = DVector::from_fn(dim, |_, _| rng.normal());
            out.extend((&dist.mean + &l * e).iter());
        }
        Tensor::new(&[n, dim], out)
    }

    pub fn prior(&self) -> GaussianX {
        GaussianX {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
        }
    }
}

fn gaussian_log_density(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &Tensor) -> Result<f64> {
    let dim = mean.len();
    if x.shape() != [dim] {
        return Err(SamiError::Shape {
            op: "log_density",
            detail: format!("{:?}, expected [{dim}]", x.shape()),
        });
    }
    let c = chol(cov.clone(), "log_density")?;
    let r = DVector::from_column_slice(x.data()) - mean;
    let maha = r.dot(&c.solve(&r));
    let logdet = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (maha + logdet + dim as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Empirical mean and covariance (denominator `N − 1`) of rows `[N, D]`.
pub fn empirical_moments(x: &Tensor) -> Result<GaussianX> {
    if x.rank() != 2 || x.shape()[0] < 2 {
        return Err(SamiError::InvalidArgument("need at least 2 rows of [N, D]".into()));
    }
    let (n, dim) = (x.shape()[0], x.shape()[1]);
    let m = DMatrix::from_row_slice(n, dim, x.data());
    let mean = DVector::from_fn(dim, |j, _| m.column(j).sum() / n as f64);
    let centred = DMatrix::from_fn(n, dim, |i, j| m[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    Ok(GaussianX { mean, cov })
}

/// The analytic denoiser as a [`NoisePredictor`] over `[N, D]` batches.
pub struct AnalyticDenoiser<'a> {
    pub world: &'a GaussianWorld,
    pub schedule: &'a NoiseSchedule,
}

impl NoisePredictor for AnalyticDenoiser<'_> {
    fn predict_noise(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let level = uniform_level(t)?;
        self.world.analytic_denoiser(self.schedule, level, x)
    }
}

/// The exact likelihood score with the linear map `A` as the encoder mean.
pub struct AnalyticGuidance<'a> {
    pub world: &'a GaussianWorld,
    pub schedule: &'a NoiseSchedule,
}

impl GuidanceField for AnalyticGuidance<'_> {
    fn latent_dim(&self) -> usize {
        self.world.latent_dim()
    }

    fn posterior(&self, x0: &Tensor) -> Result<(Tensor, Tensor)> {
        let dim = self.world.dim();
        let d = self.world.latent_dim();
        let (n, _) = rows_of(x0, dim, "posterior")?;
        let mut mean = Vec::with_capacity(n * d);
        for i in 0..n {
            let x = DVector::from_column_slice(&x0.data()[i * dim..(i + 1) * dim]);
            mean.extend((&self.world.obs * x).iter());
        }
        Ok((Tensor::new(&[n, d], mean)?, Tensor::full(&[n, d], self.world.latent_var)))
    }

    fn score(&self, x_t: &Tensor, z: &Tensor, mask: &GuidanceMask, t: &[usize]) -> Result<Tensor> {
        self.world.likelihood_score(self.schedule, uniform_level(t)?, x_t, z, mask)
    }
}

fn uniform_level(t: &[usize]) -> Result<usize> {
    match t.first() {
        Some(&l) if t.iter().all(|&x| x == l) => Ok(l),
        Some(_) => Err(SamiError::InvalidArgument("analytic models need one level per batch".into())),
        None => Err(SamiError::InvalidArgument("empty batch".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(seed: u64) -> GaussianWorld {
        GaussianWorld::random(4, 2, 0.1, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn score_vanishes_at_marginal_mean() {
        let w = world(1);
        let s = NoiseSchedule::linear(50).unwrap();
        let a = s.alpha_bar[20].sqrt();
        let x = Tensor::vector(&w.mean.iter().map(|m| m * a).collect::<Vec<_>>());
        assert!(w.marginal_score(&s, 20, &x).unwrap().max_abs() < 1e-14);
        assert!(w.analytic_denoiser(&s, 20, &x).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn standard_normal_world() {
        let w = GaussianWorld::new(DVector::zeros(3), DMatrix::identity(3, 3), DMatrix::identity(1, 3), 0.1).unwrap();
        let s = NoiseSchedule::linear(50).unwrap();
        let x = Tensor::vector(&[0.3, -1.2, 2.0]);
        let sc = w.marginal_score(&s, 10, &x).unwrap();
        for (a, b) in sc.data().iter().zip(x.data()) {
            assert!((a + b).abs() < 1e-14);
        }
        let e = w.analytic_denoiser(&s, 10, &x).unwrap();
        for (a, b) in e.data().iter().zip(x.data()) {
            assert!((a - s.gamma(10) * b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_covariance() {
        let mut c = DMatrix::identity(2, 2);
        c[(0, 1)] = 0.5;
        assert!(GaussianWorld::new(DVector::zeros(2), c, DMatrix::identity(1, 2), 0.1).is_err());
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianWorld::new(DVector::zeros(2), c, DMatrix::identity(1, 2), 0.1).is_err());
    }

    #[test]
    fn conditioning_limits() {
        let w = world(2);
        let exact = GaussianWorld::new(w.mean.clone(), w.cov.clone(), DMatrix::identity(4, 4), 1e-12).unwrap();
        let z = Tensor::vector(&[0.5, -0.2, 1.0, 0.0]);
        let p = exact.conditional_posterior(&z).unwrap();
        for (a, b) in p.mean.iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let blind = GaussianWorld::new(w.mean.clone(), w.cov.clone(), DMatrix::zeros(2, 4), 0.1).unwrap();
        let p = blind.conditional_posterior(&Tensor::vector(&[3.0, 1.0])).unwrap();
        assert!((p.mean - &w.mean).amax() < 1e-15);
        assert!((p.cov - &w.cov).amax() < 1e-15);
    }
}

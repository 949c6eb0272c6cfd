//! The two parameterized functions: an unconditional UNet denoiser
//! `ε_θ(x_t, t)` and a convolutional Gaussian inference network `q_φ(z|x)`.
//!
//! Networks are stateless descriptions plus a [`ParamSet`]. To run one, bind
//! its parameters to graph leaves with [`ParamSet::bind`] (trainable or
//! constant) and call `forward`; the `denoise` / `encode` helpers do this
//! with constants and no graph.

use crate::error::{Result, SamiError};
use crate::numerics::{concat, conv2d, conv_transpose, no_grad, ConvGeom, RngStream, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Silu,
}

impl Nonlinearity {
    pub fn apply(self, x: &Var) -> Var {
        match self {
            Nonlinearity::Relu => x.relu(),
            Nonlinearity::Silu => x.silu(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Silu => "silu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Nonlinearity::Relu),
            "silu" => Ok(Nonlinearity::Silu),
            other => Err(SamiError::Config(format!("unknown nonlinearity '{other}'"))),
        }
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| SamiError::InvalidArgument(format!("no parameter named '{name}'")))?;
        if t.shape() != self.tensors[i].shape() {
            return Err(SamiError::Shape {
                op: "set_param",
                detail: format!("{name}: {:?} vs {:?}", t.shape(), self.tensors[i].shape()),
            });
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Graph leaves for every tensor, tracked or constant.
    pub fn bind(&self, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { Var::param(t.clone()) } else { Var::constant(t.clone()) })
            .collect()
    }

    /// Same names and shapes with new values, in order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len()
            || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(SamiError::InvalidArgument("parameter layout mismatch".into()));
        }
        Ok(Self {
            names: self.names.clone(),
            tensors,
        })
    }
}

fn uniform_init(rng: &mut RngStream, shape: &[usize], bound: f64) -> Tensor {
    rng.uniform_tensor(shape, -bound, bound)
}

/// He-uniform bound for a layer followed by a nonlinearity.
fn hidden_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Plain fan-in bound for linear outputs.
fn linear_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn log2_exact(n: usize) -> Option<usize> {
    n.is_power_of_two().then(|| n.trailing_zeros() as usize)
}

fn add_channel_bias(h: Var, b: &Var) -> Result<Var> {
    let c = b.shape()[0];
    h.add(&b.reshape(&[1, c, 1, 1])?)
}

/// Walks bound parameters in layout order.
struct Cursor<'a> {
    params: &'a [Var],
    next: usize,
}

impl<'a> Cursor<'a> {
    fn new(params: &'a [Var]) -> Self {
        Self { params, next: 0 }
    }

    fn take(&mut self) -> Result<&'a Var> {
        let v = self
            .params
            .get(self.next)
            .ok_or_else(|| SamiError::InvalidArgument("too few parameters bound".into()))?;
        self.next += 1;
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    /// Number of noise levels `T`; valid levels are `0..T`.
    pub num_levels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 128,
            channel_mult: vec![1; 6],
            nonlinearity: Nonlinearity::Silu,
            num_levels: 400,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        let depth = log2_exact(self.image_size)
            .ok_or_else(|| SamiError::Config(format!("image size {} must be a power of two", self.image_size)))?;
        if levels == 0 || self.base_channels == 0 || self.channel_mult.contains(&0) {
            return Err(SamiError::Config("denoiser channels and multipliers must be positive".into()));
        }
        if levels - 1 > depth {
            return Err(SamiError::Config(format!(
                "denoiser has {} levels but a {}px image allows at most {}",
                levels,
                self.image_size,
                depth + 1
            )));
        }
        if self.num_levels < 2 {
            return Err(SamiError::Config("denoiser needs at least 2 noise levels".into()));
        }
        Ok(())
    }

    fn channels(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_channels).collect()
    }
}

/// Sinusoidal embedding of `t` with one entry per image column.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let k = (j / 2) as f64;
            let freq = (-(10000f64.ln()) * 2.0 * k / width as f64).exp();
            let arg = t as f64 * freq;
            if j % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// The embedding tiled down the rows into one `[N, 1, S, S]` channel.
fn time_channel(t: &[usize], size: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * size * size);
    for &level in t {
        let row = timestep_embedding(level, size);
        for _ in 0..size {
            data.extend_from_slice(&row);
        }
    }
    Tensor::from_parts(vec![t.len(), 1, size, size], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let levels = ch.len();
        let mut p = ParamSet::default();
        let conv = |p: &mut ParamSet, rng: &mut RngStream, name: String, o: usize, c: usize, k: usize, hidden: bool| {
            let fan_in = c * k * k;
            let bound = if hidden { hidden_bound(fan_in) } else { linear_bound(fan_in) };
            p.push(format!("{name}.w"), uniform_init(rng, &[o, c, k, k], bound));
            p.push(format!("{name}.b"), Tensor::zeros(&[o]));
        };
        for i in 0..levels {
            let cin = if i == 0 { 2 } else { ch[i - 1] };
            conv(&mut p, rng, format!("down{i}.conv"), ch[i], cin, 3, true);
            if i + 1 < levels {
                conv(&mut p, rng, format!("down{i}.pool"), ch[i], ch[i], 2, false);
            }
        }
        conv(&mut p, rng, "mid.conv".into(), ch[levels - 1], ch[levels - 1], 3, true);
        for i in (0..levels).rev() {
            conv(&mut p, rng, format!("up{i}.conv"), ch[i], 2 * ch[i], 3, true);
            if i > 0 {
                // stored as the kernel of the matching stride-2 conv: [c_i, c_{i-1}, 2, 2]
                let fan_in = ch[i] * 4;
                p.push(format!("up{i}.unpool.w"), uniform_init(rng, &[ch[i], ch[i - 1], 2, 2], linear_bound(fan_in)));
                p.push(format!("up{i}.unpool.b"), Tensor::zeros(&[ch[i - 1]]));
            }
        }
        conv(&mut p, rng, "out.conv".into(), 1, ch[0], 3, false);
        log::info!("denoiser initialized: {} tensors, {} parameters", p.len(), p.count());
        Ok(Self { config, params: p })
    }

    fn check_input(&self, shape: &[usize], t: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(SamiError::Shape {
                op: "denoise",
                detail: format!("expected [N, 1, {s}, {s}], got {:?}", shape),
            });
        }
        if t.len() != shape[0] {
            return Err(SamiError::Shape {
                op: "denoise",
                detail: format!("{} levels for batch of {}", t.len(), shape[0]),
            });
        }
        if let Some(&bad) = t.iter().find(|&&l| l >= self.config.num_levels) {
            return Err(SamiError::InvalidArgument(format!(
                "noise level {bad} outside [0, {})",
                self.config.num_levels
            )));
        }
        Ok(())
    }

    /// Noise estimate for a batch `x: [N, 1, S, S]` at per-image levels `t`.
    pub fn forward(&self, params: &[Var], x: &Var, t: &[usize]) -> Result<Var> {
        self.check_input(x.shape(), t)?;
        let act = self.config.nonlinearity;
        let ch = self.config.channels();
        let levels = ch.len();
        let n = x.shape()[0];
        let mut cur = Cursor::new(params);
        let conv = |cur: &mut Cursor, h: &Var, stride: usize, pad: usize| -> Result<Var> {
            let w = cur.take()?;
            let b = cur.take()?;
            add_channel_bias(conv2d(h, w, stride, pad)?, b)
        };

        let emb = Var::constant(time_channel(t, self.config.image_size));
        let mut h = concat(&[x, &emb], 1)?;
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = act.apply(&conv(&mut cur, &h, 1, 1)?);
            skips.push(h.clone());
            if i + 1 < levels {
                h = conv(&mut cur, &h, 2, 0)?;
            }
        }
        h = act.apply(&conv(&mut cur, &h, 1, 1)?);
        for i in (0..levels).rev() {
            h = act.apply(&conv(&mut cur, &concat(&[&h, &skips[i]], 1)?, 1, 1)?);
            if i > 0 {
                let res = self.config.image_size >> (i - 1);
                let geom = ConvGeom::new(&[n, ch[i - 1], res, res], &[ch[i], ch[i - 1], 2, 2], 2, 0)?;
                let w = cur.take()?;
                let b = cur.take()?;
                h = add_channel_bias(conv_transpose(&h, w, geom)?, b)?;
            }
        }
        conv(&mut cur, &h, 1, 1)
    }

    /// Graph-free evaluation.
    pub fn denoise(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        no_grad(|| {
            let p = self.params.bind(false);
            Ok(self.forward(&p, &Var::constant(x.clone()), t)?.value().clone())
        })
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub latent_dim: usize,
    pub nonlinearity: Nonlinearity,
    /// Bias on the two linear heads. The conv stack never has biases.
    pub head_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 48,
            channel_mult: vec![2, 2],
            latent_dim: 3,
            nonlinearity: Nonlinearity::Relu,
            head_bias: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let depth = log2_exact(self.image_size)
            .ok_or_else(|| SamiError::Config(format!("image size {} must be a power of two", self.image_size)))?;
        if self.channel_mult.is_empty() || self.base_channels == 0 || self.channel_mult.contains(&0) {
            return Err(SamiError::Config("encoder channels and multipliers must be positive".into()));
        }
        if self.channel_mult.len() > depth {
            return Err(SamiError::Config(format!(
                "encoder has {} stride-2 layers but a {}px image allows at most {}",
                self.channel_mult.len(),
                self.image_size,
                depth
            )));
        }
        if self.latent_dim == 0 {
            return Err(SamiError::Config("latent dimension must be positive".into()));
        }
        Ok(())
    }

    fn feature_len(&self) -> usize {
        let res = self.image_size >> self.channel_mult.len();
        self.channel_mult.last().unwrap() * self.base_channels * res * res
    }
}

/// Diagonal Gaussian `q(z|x) = N(mean, diag(variance))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub variance: Tensor,
}

impl GaussianPosterior {
    pub fn new(mean: Tensor, variance: Tensor) -> Result<Self> {
        if mean.rank() != 1 || mean.shape() != variance.shape() {
            return Err(SamiError::Shape {
                op: "posterior",
                detail: format!("mean {:?}, variance {:?}", mean.shape(), variance.shape()),
            });
        }
        if variance.data().iter().any(|&v| !(v > 0.0)) {
            return Err(SamiError::Domain {
                op: "posterior",
                detail: "variance must be positive".into(),
            });
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl Encoder {
    pub fn init(config: EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::default();
        let mut cin = 1;
        for (i, m) in config.channel_mult.iter().enumerate() {
            let o = m * config.base_channels;
            p.push(format!("conv{i}.w"), uniform_init(rng, &[o, cin, 3, 3], hidden_bound(cin * 9)));
            cin = o;
        }
        let f = config.feature_len();
        let d = config.latent_dim;
        p.push("mean.w".into(), uniform_init(rng, &[f, d], linear_bound(f)));
        p.push("var.w".into(), uniform_init(rng, &[f, d], linear_bound(f)));
        if config.head_bias {
            p.push("mean.b".into(), Tensor::zeros(&[d]));
            p.push("var.b".into(), Tensor::zeros(&[d]));
        }
        log::info!("encoder initialized: {} tensors, {} parameters", p.len(), p.count());
        Ok(Self { config, params: p })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(SamiError::Shape {
                op: "encode",
                detail: format!("expected [N, 1, {s}, {s}], got {:?}", shape),
            });
        }
        Ok(())
    }

    /// Posterior mean and variance, each `[N, d]`.
    pub fn forward(&self, params: &[Var], x: &Var) -> Result<(Var, Var)> {
        self.check_input(x.shape())?;
        let act = self.config.nonlinearity;
        let mut cur = Cursor::new(params);
        let mut h = x.clone();
        for _ in &self.config.channel_mult {
            h = act.apply(&conv2d(&h, cur.take()?, 2, 1)?);
        }
        let n = x.shape()[0];
        let flat = h.reshape(&[n, self.config.feature_len()])?;
        let mut mean = flat.matmul(cur.take()?)?;
        let mut raw = flat.matmul(cur.take()?)?;
        if self.config.head_bias {
            mean = mean.add(cur.take()?)?;
            raw = raw.add(cur.take()?)?;
        }
        Ok((mean, raw.softplus().square()))
    }

    /// Batch posterior as `([N, d] means, [N, d] variances)`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        no_grad(|| {
            let p = self.params.bind(false);
            let (m, v) = self.forward(&p, &Var::constant(x.clone()))?;
            Ok((m.value().clone(), v.value().clone()))
        })
    }

    /// Posterior for a single image `[1, S, S]` or `[S, S]`.
    pub fn encode(&self, x: &Tensor) -> Result<GaussianPosterior> {
        let s = self.config.image_size;
        let batch = x.reshape(&[1, 1, s, s]).map_err(|_| SamiError::Shape {
            op: "encode",
            detail: format!("expected one {s}x{s} image, got {:?}", x.shape()),
        })?;
        let (m, v) = self.encode_batch(&batch)?;
        let d = self.config.latent_dim;
        GaussianPosterior::new(m.reshape(&[d])?, v.reshape(&[d])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_denoiser() -> Denoiser {
        let cfg = DenoiserConfig {
            image_size: 8,
            base_channels: 4,
            channel_mult: vec![1, 2],
            nonlinearity: Nonlinearity::Silu,
            num_levels: 10,
        };
        Denoiser::init(cfg, &mut RngStream::new(1)).unwrap()
    }

    fn small_encoder() -> Encoder {
        let cfg = EncoderConfig {
            image_size: 8,
            base_channels: 3,
            channel_mult: vec![2, 2],
            latent_dim: 3,
            nonlinearity: Nonlinearity::Relu,
            head_bias: false,
        };
        Encoder::init(cfg, &mut RngStream::new(2)).unwrap()
    }

    #[test]
    fn denoiser_preserves_shape_and_is_finite() {
        let d = small_denoiser();
        let x = RngStream::new(3).normal_tensor(&[2, 1, 8, 8]);
        let y = d.denoise(&x, &[0, 9]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }

    #[test]
    fn denoiser_batch_matches_single_calls() {
        let d = small_denoiser();
        let x = RngStream::new(4).normal_tensor(&[3, 1, 8, 8]);
        let t = [1, 5, 7];
        let batch = d.denoise(&x, &t).unwrap();
        for i in 0..3 {
            let xi = x.index0(i).unwrap().reshape(&[1, 1, 8, 8]).unwrap();
            let yi = d.denoise(&xi, &t[i..i + 1]).unwrap();
            assert_eq!(yi.data(), batch.index0(i).unwrap().data());
        }
    }

    #[test]
    fn denoiser_rejects_out_of_range_level() {
        let d = small_denoiser();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(d.denoise(&x, &[10]).is_err());
    }

    #[test]
    fn default_table_configs_validate() {
        DenoiserConfig::default().validate().unwrap();
        EncoderConfig::default().validate().unwrap();
    }

    #[test]
    fn overlong_multipliers_are_rejected() {
        let enc = EncoderConfig {
            channel_mult: vec![1; 6],
            ..EncoderConfig::default()
        };
        assert!(Encoder::init(enc, &mut RngStream::new(0)).is_err());
        let den = DenoiserConfig {
            channel_mult: vec![1; 7],
            ..DenoiserConfig::default()
        };
        assert!(den.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = small_encoder();
        let b = small_encoder();
        assert_eq!(a.params, b.params);
        assert_eq!(small_denoiser().params, small_denoiser().params);
    }

    #[test]
    fn encoder_variance_positive_and_deterministic() {
        let e = small_encoder();
        let x = RngStream::new(5).normal_tensor(&[1, 8, 8]);
        let p1 = e.encode(&x).unwrap();
        let p2 = e.encode(&x).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.variance.data().iter().all(|&v| v > 0.0));
        assert_eq!(p1.dim(), 3);
    }

    #[test]
    fn conv_stack_has_no_biases() {
        let e = small_encoder();
        assert!(e.params.names.iter().all(|n| !n.starts_with("conv") || n.ends_with(".w")));
    }

    #[test]
    fn time_channel_rows_are_identical() {
        let t = time_channel(&[3], 4);
        let d = t.data();
        assert_eq!(&d[0..4], &d[4..8]);
        assert!((d[0] - 3f64.sin()).abs() < 1e-15);
        assert!((d[1] - 3f64.cos()).abs() < 1e-15);
    }
}

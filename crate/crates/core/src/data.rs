//! Procedural disks: one disk of fixed radius and intensity on a flat background.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SamiError};
use crate::numerics::{RngStream, Tensor};

pub const DISK_INTENSITY: f64 = 0.5;
const MAGIC: &[u8; 4] = b"SMD1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiskConfig {
    pub width: usize,
    pub height: usize,
    pub radius: f64,
    /// Width of the linear blend band at the rim, in pixels.
    pub edge: f64,
}

impl Default for DiskConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            radius: 8.0,
            edge: 1.0,
        }
    }
}

impl DiskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.radius > 0.0) || !(self.edge > 0.0) {
            return Err(SamiError::Config("disk config needs positive size, radius and edge".into()));
        }
        if 2.0 * self.radius > self.width.min(self.height) as f64 {
            return Err(SamiError::Config("disk does not fit in the image".into()));
        }
        Ok(())
    }

    pub fn cx_range(&self) -> (f64, f64) {
        (self.radius, self.width as f64 - self.radius)
    }

    pub fn cy_range(&self) -> (f64, f64) {
        (self.radius, self.height as f64 - self.radius)
    }
}

/// Ground-truth generative factors of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiskFactors {
    pub c_x: f64,
    pub c_y: f64,
    pub i_bg: f64,
}

impl DiskFactors {
    pub fn check(&self, cfg: &DiskConfig) -> Result<()> {
        let (x0, x1) = cfg.cx_range();
        let (y0, y1) = cfg.cy_range();
        let eps = 1e-12;
        if !(self.c_x >= x0 - eps && self.c_x <= x1 + eps && self.c_y >= y0 - eps && self.c_y <= y1 + eps) {
            return Err(SamiError::Domain {
                op: "render_disk",
                detail: format!("centre ({}, {}) puts the disk outside the image", self.c_x, self.c_y),
            });
        }
        if !(0.0..=1.0).contains(&self.i_bg) {
            return Err(SamiError::Domain {
                op: "render_disk",
                detail: format!("background intensity {} outside [0, 1]", self.i_bg),
            });
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.c_x, self.c_y, self.i_bg]
    }
}

/// Renders an `[H, W]` image in `[0, 1]`; pixel `(r, c)` is sampled at its centre.
pub fn render_disk(f: &DiskFactors, cfg: &DiskConfig) -> Result<Tensor> {
    cfg.validate()?;
    f.check(cfg)?;
    let mut data = Vec::with_capacity(cfg.width * cfg.height);
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let dx = c as f64 + 0.5 - f.c_x;
            let dy = r as f64 + 0.5 - f.c_y;
            let dist = (dx * dx + dy * dy).sqrt();
            let cover = ((cfg.radius + 0.5 * cfg.edge - dist) / cfg.edge).clamp(0.0, 1.0);
            data.push(f.i_bg + (DISK_INTENSITY - f.i_bg) * cover);
        }
    }
    Tensor::new(&[cfg.height, cfg.width], data)
}

/// Maps pixel intensities `[0, 1]` to the network range `[-1, 1]`.
pub fn to_model_space(x: &Tensor) -> Tensor {
    x.map(|p| 2.0 * p - 1.0)
}

pub fn from_model_space(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * (v + 1.0))
}

/// Images `[N, 1, H, W]` in pixel space plus their factors.
#[derive(Clone, Debug, PartialEq)]
pub struct DiskDataset {
    pub config: DiskConfig,
    pub images: Tensor,
    pub factors: Vec<DiskFactors>,
}

impl DiskDataset {
    pub fn from_factors(factors: Vec<DiskFactors>, cfg: &DiskConfig) -> Result<Self> {
        let mut data = Vec::with_capacity(factors.len() * cfg.width * cfg.height);
        for f in &factors {
            data.extend_from_slice(render_disk(f, cfg)?.data());
        }
        Ok(Self {
            config: *cfg,
            images: Tensor::new(&[factors.len(), 1, cfg.height, cfg.width], data)?,
            factors,
        })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn model_images(&self) -> Tensor {
        to_model_space(&self.images)
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.config.width, self.config.height, self.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let item = self.config.width * self.config.height;
        let mut buf = Vec::with_capacity((item + 3) * 4);
        for (i, f) in self.factors.iter().enumerate() {
            buf.clear();
            for &p in &self.images.data()[i * item..(i + 1) * item] {
                buf.extend_from_slice(&(p as f32).to_le_bytes());
            }
            for v in f.as_array() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads an SMD1 stream; `cfg` supplies radius and edge, which the file does not store.
    pub fn read(mut r: impl Read, cfg: &DiskConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let fmt = |offset: usize, field: &str, detail: String| SamiError::Format {
            offset: offset as u64,
            field: field.to_string(),
            detail,
        };
        if bytes.len() < 16 {
            return Err(fmt(0, "header", format!("{} bytes, need 16", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(0, "magic", format!("{:?}", &bytes[..4])));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (w, h, n) = (u(4), u(8), u(12));
        if w == 0 || h == 0 {
            return Err(fmt(4, "size", format!("{w}x{h}")));
        }
        let item = w * h;
        let rec = (item + 3) * 4;
        let expected = 16 + n * rec;
        if bytes.len() != expected {
            return Err(fmt(16, "records", format!("{} bytes for {n} records, expected {expected}", bytes.len())));
        }
        let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64;
        let mut images = Vec::with_capacity(n * item);
        let mut factors = Vec::with_capacity(n);
        for i in 0..n {
            let base = 16 + i * rec;
            images.extend((0..item).map(|k| f(base + 4 * k)));
            let fb = base + 4 * item;
            factors.push(DiskFactors {
                c_x: f(fb),
                c_y: f(fb + 4),
                i_bg: f(fb + 8),
            });
        }
        Ok(Self {
            config: DiskConfig { width: w, height: h, ..*cfg },
            images: Tensor::new(&[n, 1, h, w], images)?,
            factors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path, cfg: &DiskConfig) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?), cfg)
    }
}

pub fn sample_factors(cfg: &DiskConfig, rng: &mut RngStream) -> DiskFactors {
    let (x0, x1) = cfg.cx_range();
    let (y0, y1) = cfg.cy_range();
    DiskFactors {
        c_x: rng.uniform_range(x0, x1),
        c_y: rng.uniform_range(y0, y1),
        i_bg: rng.uniform(),
    }
}

/// `n` images with i.i.d. uniform factors; image `i` uses its own substream.
pub fn generate_dataset(n: usize, rng: &RngStream, cfg: &DiskConfig) -> Result<DiskDataset> {
    if n == 0 {
        return Err(SamiError::InvalidArgument("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let factors = (0..n)
        .map(|i| sample_factors(cfg, &mut rng.split_index("disk", i as u64)))
        .collect();
    DiskDataset::from_factors(factors, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceKind {
    /// Centre moves with constant velocity, background fixed.
    LinearDrift,
    /// Background intensity changes linearly, centre fixed.
    ContrastRamp,
}

impl SequenceKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear-drift" => Ok(Self::LinearDrift),
            "contrast-ramp" => Ok(Self::ContrastRamp),
            other => Err(SamiError::InvalidArgument(format!("unknown sequence kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Tensor>,
    pub factors: Vec<DiskFactors>,
}

/// Frames along `start + k·step` for `k = 0..length`.
pub fn sequence_from(start: DiskFactors, step: [f64; 3], length: usize, cfg: &DiskConfig) -> Result<Sequence> {
    let mut frames = Vec::with_capacity(length);
    let mut factors = Vec::with_capacity(length);
    for k in 0..length {
        let kf = k as f64;
        let f = DiskFactors {
            c_x: start.c_x + kf * step[0],
            c_y: start.c_y + kf * step[1],
            i_bg: start.i_bg + kf * step[2],
        };
        f.check(cfg).map_err(|_| SamiError::Domain {
            op: "generate_sequence",
            detail: format!("frame {k} leaves the valid factor range: {f:?}"),
        })?;
        frames.push(render_disk(&f, cfg)?);
        factors.push(f);
    }
    Ok(Sequence { frames, factors })
}

/// Random sequence whose endpoints are drawn uniformly; the path between
/// them stays inside the (convex) factor box.
pub fn generate_sequence(kind: SequenceKind, length: usize, rng: &mut RngStream, cfg: &DiskConfig) -> Result<Sequence> {
    if length < 2 {
        return Err(SamiError::InvalidArgument("a sequence needs at least 2 frames".into()));
    }
    let a = sample_factors(cfg, rng);
    let b = sample_factors(cfg, rng);
    let span = (length - 1) as f64;
    let step = match kind {
        SequenceKind::LinearDrift => [(b.c_x - a.c_x) / span, (b.c_y - a.c_y) / span, 0.0],
        SequenceKind::ContrastRamp => [0.0, 0.0, (b.i_bg - a.i_bg) / span],
    };
    sequence_from(a, step, length, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DiskConfig {
        DiskConfig::default()
    }

    #[test]
    fn matched_background_hides_disk() {
        let img = render_disk(&DiskFactors { c_x: 12.0, c_y: 20.0, i_bg: 0.5 }, &cfg()).unwrap();
        assert!(img.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn centred_disk_geometry() {
        let img = render_disk(&DiskFactors { c_x: 16.0, c_y: 16.0, i_bg: 0.0 }, &cfg()).unwrap();
        assert_eq!(img.data()[15 * 32 + 15], 0.5);
        assert_eq!(img.data()[0], 0.0);
        assert_eq!(img.data()[32 * 32 - 1], 0.0);
    }

    #[test]
    fn outside_disk_rejected() {
        assert!(render_disk(&DiskFactors { c_x: 7.0, c_y: 16.0, i_bg: 0.0 }, &cfg()).is_err());
        assert!(render_disk(&DiskFactors { c_x: 16.0, c_y: 16.0, i_bg: 1.5 }, &cfg()).is_err());
    }

    #[test]
    fn dataset_deterministic_and_roundtrips() {
        let rng = RngStream::new(3);
        let a = generate_dataset(5, &rng, &cfg()).unwrap();
        let b = generate_dataset(5, &rng, &cfg()).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 5 * (1024 + 3) * 4);
        let back = DiskDataset::read(&buf[..], &cfg()).unwrap();
        assert_eq!(back.len(), 5);
        for (x, y) in a.images.data().iter().zip(back.images.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(matches!(DiskDataset::read(&buf[..20], &cfg()), Err(SamiError::Format { .. })));
        buf[0] = b'X';
        assert!(matches!(DiskDataset::read(&buf[..], &cfg()), Err(SamiError::Format { ref field, .. }) if field == "magic"));
    }

    #[test]
    fn static_sequence_and_range_errors() {
        let s = sequence_from(DiskFactors { c_x: 10.0, c_y: 10.0, i_bg: 0.2 }, [0.0; 3], 4, &cfg()).unwrap();
        assert!(s.frames.windows(2).all(|w| w[0] == w[1]));
        assert!(sequence_from(DiskFactors { c_x: 10.0, c_y: 10.0, i_bg: 0.2 }, [1.0, 0.0, 0.0], 20, &cfg()).is_err());
        let mut rng = RngStream::new(0);
        let s = generate_sequence(SequenceKind::ContrastRamp, 6, &mut rng, &cfg()).unwrap();
        assert!(s.factors.iter().all(|f| f.c_x == s.factors[0].c_x));
    }
}

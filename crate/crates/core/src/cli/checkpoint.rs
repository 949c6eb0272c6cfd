//! Binary checkpoint: magic `SAMI`, version, schedule descriptor, config
//! echo, then a tensor table. All integers and floats little-endian.

use std::path::Path;

use crate::cli::config::RunConfig;
use crate::diffusion::{NoiseSchedule, ScheduleKind, ScheduleParams};
use crate::error::{Result, SamiError};
use crate::guidance::ModelBundle;
use crate::networks::{Denoiser, Encoder, ParamSet};
use crate::numerics::{RngStream, Tensor};

const MAGIC: &[u8; 4] = b"SAMI";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

fn kind_tag(k: ScheduleKind) -> u8 {
    match k {
        ScheduleKind::Linear => 0,
        ScheduleKind::Cosine => 1,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

fn write_params(w: &mut Writer, prefix: &str, p: &ParamSet, dtype: Dtype) {
    for (name, t) in p.names.iter().zip(&p.tensors) {
        w.str(&format!("{prefix}.{name}"));
        w.u8(dtype.tag());
        w.u32(t.rank() as u32);
        for &s in t.shape() {
            w.u32(s as u32);
        }
        match dtype {
            Dtype::F32 => t.data().iter().for_each(|&v| w.0.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F64 => t.data().iter().for_each(|&v| w.f64(v)),
        }
    }
}

/// Serializes a bundle. `f32` storage rounds values; `f64` is bit-exact.
pub fn encode_checkpoint(bundle: &ModelBundle, dtype: Dtype) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let s = &bundle.schedule;
    w.u8(kind_tag(s.kind));
    w.u32(s.levels() as u32);
    w.f64(s.params.beta_min);
    w.f64(s.params.beta_max);
    w.f64(s.params.cosine_offset);
    let mut cfg = RunConfig::default();
    cfg.denoiser = bundle.denoiser.config.clone();
    cfg.encoder = bundle.encoder.config.clone();
    cfg.schedule.kind = s.kind;
    cfg.schedule.levels = s.levels();
    cfg.schedule.params = s.params;
    w.str(&cfg.model_echo());
    let p = (&bundle.denoiser.params, &bundle.encoder.params);
    w.u32((p.0.len() + p.1.len()) as u32);
    write_params(&mut w, "denoiser", p.0, dtype);
    write_params(&mut w, "encoder", p.1, dtype);
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, field: &str, detail: impl Into<String>) -> SamiError {
        SamiError::Format {
            offset: self.pos as u64,
            field: field.to_string(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(field, format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let start = self.pos;
        let b = self.take(n, field)?;
        String::from_utf8(b.to_vec()).map_err(|_| SamiError::Format {
            offset: start as u64,
            field: field.to_string(),
            detail: "not UTF-8".into(),
        })
    }
}

/// Parses a checkpoint; nothing is returned unless every check passes.
pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("magic", "not a SAMI checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err("version", format!("unsupported version {version}")));
    }
    let kind = match r.u8("schedule.kind")? {
        0 => ScheduleKind::Linear,
        1 => ScheduleKind::Cosine,
        k => {
            r.pos -= 1;
            return Err(r.err("schedule.kind", format!("unknown tag {k}")));
        }
    };
    let levels = r.u32("schedule.levels")? as usize;
    let params = ScheduleParams {
        beta_min: r.f64("schedule.beta_min")?,
        beta_max: r.f64("schedule.beta_max")?,
        cosine_offset: r.f64("schedule.cosine_offset")?,
    };
    let echo_at = r.pos;
    let echo = r.str("config")?;
    let cfg = RunConfig::parse(&echo).map_err(|e| SamiError::Format {
        offset: echo_at as u64,
        field: "config".into(),
        detail: e.to_string(),
    })?;
    if cfg.schedule.kind != kind || cfg.schedule.levels != levels || cfg.schedule.params != params {
        return Err(SamiError::Format {
            offset: echo_at as u64,
            field: "config".into(),
            detail: "schedule descriptor disagrees with config echo".into(),
        });
    }
    let schedule = NoiseSchedule::build(kind, levels, params)?;
    // Layouts come from the config; values are then overwritten from the table.
    let mut scratch = RngStream::new(0);
    let mut denoiser = Denoiser::init(cfg.denoiser.clone(), &mut scratch)?;
    let mut encoder = Encoder::init(cfg.encoder.clone(), &mut scratch)?;
    let expected = denoiser.params.len() + encoder.params.len();
    let count = r.u32("tensor_count")? as usize;
    if count != expected {
        r.pos -= 4;
        return Err(r.err("tensor_count", format!("{count} tensors, config implies {expected}")));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_at = r.pos;
        let name = r.str("tensor.name")?;
        let dtype = r.u8("tensor.dtype")?;
        let rank = r.u32("tensor.rank")? as usize;
        if rank > 8 {
            return Err(r.err("tensor.rank", format!("rank {rank} for '{name}'")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32("tensor.shape").map(|v| v as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            0 => r
                .take(n * 4, "tensor.data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            1 => r
                .take(n * 8, "tensor.data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            t => return Err(r.err("tensor.dtype", format!("unknown dtype tag {t} for '{name}'"))),
        };
        let named_err = |detail: String| SamiError::Format {
            offset: name_at as u64,
            field: "tensor.name".into(),
            detail,
        };
        if !seen.insert(name.clone()) {
            return Err(named_err(format!("duplicate tensor '{name}'")));
        }
        let (set, local) = if let Some(l) = name.strip_prefix("denoiser.") {
            (&mut denoiser.params, l)
        } else if let Some(l) = name.strip_prefix("encoder.") {
            (&mut encoder.params, l)
        } else {
            return Err(named_err(format!("unexpected tensor '{name}'")));
        };
        match set.get(local) {
            None => return Err(named_err(format!("tensor '{name}' not in the configured model"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(named_err(format!("'{name}' has shape {shape:?}, config implies {:?}", t.shape())))
            }
            Some(_) => set.set(local, Tensor::new(&shape, data)?)?,
        }
    }
    if r.pos != buf.len() {
        return Err(r.err("trailer", format!("{} unexpected trailing bytes", buf.len() - r.pos)));
    }
    Ok(ModelBundle {
        denoiser,
        encoder,
        schedule,
    })
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path, dtype: Dtype) -> Result<()> {
    super::write_atomic(path, &encode_checkpoint(bundle, dtype))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    decode_checkpoint(&std::fs::read(path)?)
}

//! Line-based `key = value` run configuration with `[section]` headers.

use crate::diffusion::{NoiseSchedule, ScheduleKind, ScheduleParams, TimestepDistribution};
use crate::error::{Result, SamiError};
use crate::guidance::{CoefficientRule, GuidanceSign, KlAnneal, TrainConfig, TrainMode};
use crate::networks::{DenoiserConfig, EncoderConfig, Nonlinearity};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub levels: usize,
    pub params: ScheduleParams,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            levels: 400,
            params: ScheduleParams::default(),
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.kind, self.levels, self.params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub n_train: usize,
    pub radius: f64,
    pub edge: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_train: 2000,
            radius: 8.0,
            edge: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisSection {
    pub n_test: usize,
    pub n_samples: usize,
    pub probes: usize,
    pub t_ref: usize,
    pub draws: usize,
    pub buckets: usize,
    pub sequences: usize,
    pub sequence_length: usize,
    pub coefficient_rule: CoefficientRule,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            n_test: 100,
            n_samples: 16,
            probes: 4,
            t_ref: 200,
            draws: 8,
            buckets: 10,
            sequences: 50,
            sequence_length: 8,
            coefficient_rule: CoefficientRule::Derived,
        }
    }
}

/// Everything a command needs besides its flags.
///
/// Defaults are the disks configuration; the denoiser and encoder image
/// sizes and the denoiser's level count follow `model.image_size` and
/// `schedule.levels`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub denoiser: DenoiserConfig,
    pub encoder: EncoderConfig,
    pub schedule: ScheduleSection,
    pub training: TrainConfig,
    pub data: DataSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            encoder: EncoderConfig::default(),
            schedule: ScheduleSection::default(),
            training: TrainConfig::default(),
            data: DataSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn bad(section: &str, key: &str, value: &str) -> SamiError {
    SamiError::Config(format!("invalid value '{value}' for {section}.{key}"))
}

fn num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(section, key, value))
}

fn parse_list(section: &str, key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|p| num(section, key, p.trim())).collect()
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(section, key, value)),
    }
}

pub const SECTIONS: [&str; 5] = ["model", "schedule", "training", "data", "analysis"];

impl RunConfig {
    /// `(section, key, value)` for every setting, in print order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let d = &self.denoiser;
        let e = &self.encoder;
        let s = &self.schedule;
        let t = &self.training;
        let (anneal, anneal_epochs, anneal_start) = match t.anneal {
            KlAnneal::Exponential { epochs, start_factor } => ("exponential", epochs, start_factor),
            KlAnneal::Constant => ("constant", 0, 1e-6),
        };
        vec![
            ("model", "image_size", d.image_size.to_string()),
            ("model", "denoiser_base_channels", d.base_channels.to_string()),
            ("model", "denoiser_channel_mult", list(&d.channel_mult)),
            ("model", "denoiser_nonlinearity", d.nonlinearity.name().into()),
            ("model", "encoder_base_channels", e.base_channels.to_string()),
            ("model", "encoder_channel_mult", list(&e.channel_mult)),
            ("model", "encoder_nonlinearity", e.nonlinearity.name().into()),
            ("model", "encoder_head_bias", e.head_bias.to_string()),
            ("model", "latent_dim", e.latent_dim.to_string()),
            ("schedule", "kind", s.kind.name().into()),
            ("schedule", "levels", s.levels.to_string()),
            ("schedule", "beta_min", s.params.beta_min.to_string()),
            ("schedule", "beta_max", s.params.beta_max.to_string()),
            ("schedule", "cosine_offset", s.params.cosine_offset.to_string()),
            ("training", "kl_weight", t.beta_final.to_string()),
            ("training", "kl_anneal", anneal.into()),
            ("training", "kl_anneal_epochs", anneal_epochs.to_string()),
            ("training", "kl_anneal_start", anneal_start.to_string()),
            ("training", "learning_rate", t.learning_rate.to_string()),
            ("training", "batch_size", t.batch_size.to_string()),
            ("training", "epochs", t.epochs.to_string()),
            ("training", "t_distribution", t.timesteps.name()),
            ("training", "mode", t.mode.name().into()),
            ("training", "latent_samples", t.latent_samples.to_string()),
            ("training", "guidance_sign", t.sign.name().into()),
            ("training", "loss_weight", "unit".into()),
            ("data", "n_train", self.data.n_train.to_string()),
            ("data", "radius", self.data.radius.to_string()),
            ("data", "edge", self.data.edge.to_string()),
            ("analysis", "n_test", self.analysis.n_test.to_string()),
            ("analysis", "n_samples", self.analysis.n_samples.to_string()),
            ("analysis", "probes", self.analysis.probes.to_string()),
            ("analysis", "t_ref", self.analysis.t_ref.to_string()),
            ("analysis", "draws", self.analysis.draws.to_string()),
            ("analysis", "buckets", self.analysis.buckets.to_string()),
            ("analysis", "sequences", self.analysis.sequences.to_string()),
            ("analysis", "sequence_length", self.analysis.sequence_length.to_string()),
            ("analysis", "coefficient_rule", self.analysis.coefficient_rule.name().into()),
        ]
    }

    /// Applies one setting; unknown keys are errors.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value;
        match (section, key) {
            ("model", "image_size") => {
                let n = num(section, key, v)?;
                self.denoiser.image_size = n;
                self.encoder.image_size = n;
            }
            ("model", "denoiser_base_channels") => self.denoiser.base_channels = num(section, key, v)?,
            ("model", "denoiser_channel_mult") => self.denoiser.channel_mult = parse_list(section, key, v)?,
            ("model", "denoiser_nonlinearity") => self.denoiser.nonlinearity = Nonlinearity::parse(v)?,
            ("model", "encoder_base_channels") => self.encoder.base_channels = num(section, key, v)?,
            ("model", "encoder_channel_mult") => self.encoder.channel_mult = parse_list(section, key, v)?,
            ("model", "encoder_nonlinearity") => self.encoder.nonlinearity = Nonlinearity::parse(v)?,
            ("model", "encoder_head_bias") => self.encoder.head_bias = parse_bool(section, key, v)?,
            ("model", "latent_dim") => self.encoder.latent_dim = num(section, key, v)?,
            ("schedule", "kind") => self.schedule.kind = ScheduleKind::parse(v)?,
            ("schedule", "levels") => {
                let n = num(section, key, v)?;
                self.schedule.levels = n;
                self.denoiser.num_levels = n;
            }
            ("schedule", "beta_min") => self.schedule.params.beta_min = num(section, key, v)?,
            ("schedule", "beta_max") => self.schedule.params.beta_max = num(section, key, v)?,
            ("schedule", "cosine_offset") => self.schedule.params.cosine_offset = num(section, key, v)?,
            ("training", "kl_weight") => self.training.beta_final = num(section, key, v)?,
            ("training", "kl_anneal") => {
                let (epochs, start_factor) = match self.training.anneal {
                    KlAnneal::Exponential { epochs, start_factor } => (epochs, start_factor),
                    KlAnneal::Constant => (self.training.epochs, 1e-6),
                };
                self.training.anneal = match v {
                    "exponential" => KlAnneal::Exponential { epochs, start_factor },
                    "constant" => KlAnneal::Constant,
                    _ => return Err(bad(section, key, v)),
                };
            }
            ("training", "kl_anneal_epochs") => {
                if let KlAnneal::Exponential { epochs, .. } = &mut self.training.anneal {
                    *epochs = num(section, key, v)?;
                } else {
                    num::<usize>(section, key, v)?;
                }
            }
            ("training", "kl_anneal_start") => {
                if let KlAnneal::Exponential { start_factor, .. } = &mut self.training.anneal {
                    *start_factor = num(section, key, v)?;
                } else {
                    num::<f64>(section, key, v)?;
                }
            }
            ("training", "learning_rate") => self.training.learning_rate = num(section, key, v)?,
            ("training", "batch_size") => self.training.batch_size = num(section, key, v)?,
            ("training", "epochs") => self.training.epochs = num(section, key, v)?,
            ("training", "t_distribution") => self.training.timesteps = TimestepDistribution::parse(v)?,
            ("training", "mode") => self.training.mode = TrainMode::parse(v)?,
            ("training", "latent_samples") => self.training.latent_samples = num(section, key, v)?,
            ("training", "guidance_sign") => self.training.sign = GuidanceSign::parse(v)?,
            ("training", "loss_weight") => {
                if v != "unit" {
                    return Err(bad(section, key, v));
                }
            }
            ("data", "n_train") => self.data.n_train = num(section, key, v)?,
            ("data", "radius") => self.data.radius = num(section, key, v)?,
            ("data", "edge") => self.data.edge = num(section, key, v)?,
            ("analysis", "n_test") => self.analysis.n_test = num(section, key, v)?,
            ("analysis", "n_samples") => self.analysis.n_samples = num(section, key, v)?,
            ("analysis", "probes") => self.analysis.probes = num(section, key, v)?,
            ("analysis", "t_ref") => self.analysis.t_ref = num(section, key, v)?,
            ("analysis", "draws") => self.analysis.draws = num(section, key, v)?,
            ("analysis", "buckets") => self.analysis.buckets = num(section, key, v)?,
            ("analysis", "sequences") => self.analysis.sequences = num(section, key, v)?,
            ("analysis", "sequence_length") => self.analysis.sequence_length = num(section, key, v)?,
            ("analysis", "coefficient_rule") => self.analysis.coefficient_rule = CoefficientRule::parse(v)?,
            _ => return Err(SamiError::Config(format!("unknown key '{key}' in section [{section}]"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| SamiError::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected 'key = value', got '{line}'")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| at("setting before any [section] header".into()))?;
            cfg.set(sec, key.trim(), value.trim()).map_err(|e| at(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.encoder.validate()?;
        self.training.validate()?;
        self.schedule.build()?;
        Ok(())
    }

    /// Canonical text; `parse(print(c)) == c`.
    pub fn print(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (sec, key, value) in self.entries() {
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                current = sec;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// The `[model]` and `[schedule]` sections only, as stored in checkpoints.
    pub fn model_echo(&self) -> String {
        let mut c = RunConfig::default();
        c.denoiser = self.denoiser.clone();
        c.encoder = self.encoder.clone();
        c.schedule = self.schedule.clone();
        c.print()
            .split("\n\n")
            .filter(|block| block.starts_with("[model]") || block.starts_with("[schedule]"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.print()).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse("[model]\ndenoiser_base_channels = 16 # small\n[training]\nepochs = 3\n").unwrap();
        assert_eq!(c.denoiser.base_channels, 16);
        assert_eq!(c.training.epochs, 3);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(RunConfig::parse("[model]\nbase = 3\n").unwrap_err().to_string().contains("line 2"));
        assert!(RunConfig::parse("[optim]\n").is_err());
        assert!(RunConfig::parse("epochs = 3\n").is_err());
        assert!(RunConfig::parse("[training]\nepochs = three\n").is_err());
    }

    #[test]
    fn every_table_entry_has_a_key() {
        let keys: Vec<&str> = RunConfig::default().entries().iter().map(|e| e.1).collect();
        for k in [
            "denoiser_base_channels",
            "encoder_base_channels",
            "denoiser_channel_mult",
            "encoder_channel_mult",
            "levels",
            "latent_dim",
            "kl_weight",
            "kind",
            "batch_size",
            "epochs",
            "learning_rate",
            "t_distribution",
            "mode",
        ] {
            assert!(keys.contains(&k), "{k}");
        }
    }
}

//! Command-line front end: configuration, checkpoints, image grids and the
//! `sami` subcommands.

pub mod checkpoint;
pub mod config;
pub mod pgm;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::analysis;
use crate::data::{self, DiskConfig, DiskDataset, SequenceKind};
use crate::diffusion::sample_unconditional;
use crate::error::{Result, SamiError};
use crate::guidance::{
    sample_conditional, train_with_progress, CoefficientRule, Condition, GuidanceMask, ModelBundle, SampleSettings,
};
use crate::networks::{Denoiser, Encoder};
use crate::numerics::{RngStream, Tensor};
use crate::oracle::{empirical_moments, AnalyticDenoiser, AnalyticGuidance, GaussianWorld};

pub use checkpoint::{load_checkpoint, save_checkpoint, Dtype};
pub use config::RunConfig;
pub use pgm::{encode_grid, read_pgm, write_image_grid};

/// Writes via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| SamiError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "sami", version, about = "Train, sample and analyse score-guided diffusion VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Append-only run journal; defaults to `sami-journal.log` next to `--out`.
    #[arg(long)]
    journal: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Variability,
    VarianceProfile,
    Coherence,
    Straightness,
    Pr,
    ScoreProfile,
    Smoothness,
    Alignment,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a disks dataset to an SMD1 file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides `data.n_train`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a model and write a checkpoint plus a per-step CSV log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; generated from the seed when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to start from, e.g. a pre-trained denoiser.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StoreDtype::F64)]
        dtype: StoreDtype,
    },
    /// Draw samples as a PGM grid.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `.pgm` image or a text file of latent values; unconditional when omitted.
        #[arg(long)]
        condition: Option<PathBuf>,
        /// Active latent axes, e.g. `1,0,0`, or `all`.
        #[arg(long, default_value = "all")]
        mask: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value = "derived")]
        coefficient_rule: String,
    },
    /// Posterior means and variances of a dataset as CSV.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Images generated along a straight line between two latents.
    Traverse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated start latent.
        #[arg(long, allow_hyphen_values = true)]
        from: String,
        #[arg(long, allow_hyphen_values = true)]
        to: String,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Representation diagnostics written as CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Closed-form checks in the linear-Gaussian world.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        chains: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StoreDtype {
    F32,
    F64,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::Sample { common, .. }
            | Command::Encode { common, .. }
            | Command::Traverse { common, .. }
            | Command::Analyze { common, .. }
            | Command::OracleCheck { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Encode { .. } => "encode",
            Command::Traverse { .. } => "traverse",
            Command::Analyze { .. } => "analyze",
            Command::OracleCheck { .. } => "oracle-check",
        }
    }
}

/// Parses `argv` (including the program name) and runs one command.
/// Returns the process exit code: 0 on success, 2 on usage errors, 1 on failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(outputs) => {
            for o in outputs {
                println!("{}", o.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cmd: &Command) -> Result<Vec<PathBuf>> {
    let common = cmd.common();
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let rng = RngStream::new(common.seed);
    let outputs = match cmd {
        Command::GenData { n, .. } => gen_data(&cfg, &rng, *n, &common.out)?,
        Command::Train { data, init, dtype, .. } => train_cmd(&cfg, &rng, data.as_deref(), init.as_deref(), *dtype, &common.out)?,
        Command::Sample {
            checkpoint,
            condition,
            mask,
            n,
            coefficient_rule,
            ..
        } => sample_cmd(&cfg, &rng, checkpoint, condition.as_deref(), mask, *n, coefficient_rule, &common.out)?,
        Command::Encode { checkpoint, data, .. } => encode_cmd(&cfg, &rng, checkpoint, data.as_deref(), &common.out)?,
        Command::Traverse {
            checkpoint, from, to, steps, ..
        } => traverse_cmd(&rng, checkpoint, from, to, *steps, &common.out)?,
        Command::Analyze {
            checkpoint, metric, data, ..
        } => analyze_cmd(&cfg, &rng, checkpoint, *metric, data.as_deref(), &common.out)?,
        Command::OracleCheck { chains, .. } => oracle_cmd(&cfg, &rng, *chains, &common.out)?,
    };
    let journal = common.journal.clone().unwrap_or_else(|| {
        common
            .out
            .parent()
            .map(|p| p.join("sami-journal.log"))
            .unwrap_or_else(|| PathBuf::from("sami-journal.log"))
    });
    append_journal(&journal, cmd.name(), &cfg, common.seed, &outputs)?;
    Ok(outputs)
}

/// Hex SHA-256 of the canonical config text.
pub fn config_hash(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.print().as_bytes());
    digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn append_journal(path: &Path, command: &str, cfg: &RunConfig, seed: u64, outputs: &[PathBuf]) -> Result<()> {
    let outs: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
    let line = format!("command={command}\tconfig={}\tseed={seed}\toutputs={}\n", config_hash(cfg), outs.join(","));
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

fn disk_config(cfg: &RunConfig) -> DiskConfig {
    DiskConfig {
        width: cfg.denoiser.image_size,
        height: cfg.denoiser.image_size,
        radius: cfg.data.radius,
        edge: cfg.data.edge,
    }
}

fn sibling(out: &Path, ext: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn load_or_generate(cfg: &RunConfig, rng: &RngStream, path: Option<&Path>, n: usize, label: &str) -> Result<DiskDataset> {
    match path {
        Some(p) => DiskDataset::load(p, &disk_config(cfg)),
        None => data::generate_dataset(n, &rng.split(label), &disk_config(cfg)),
    }
}

fn gen_data(cfg: &RunConfig, rng: &RngStream, n: Option<usize>, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = data::generate_dataset(n.unwrap_or(cfg.data.n_train), &rng.split("data"), &disk_config(cfg))?;
    let mut buf = Vec::new();
    ds.write(&mut buf)?;
    write_atomic(out, &buf)?;
    Ok(vec![out.to_path_buf()])
}

fn train_cmd(
    cfg: &RunConfig,
    rng: &RngStream,
    data_path: Option<&Path>,
    init: Option<&Path>,
    dtype: StoreDtype,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let ds = load_or_generate(cfg, rng, data_path, cfg.data.n_train, "data")?;
    let bundle = match init {
        Some(p) => {
            let mut b = load_checkpoint(p)?;
            if b.encoder.config != cfg.encoder {
                b.encoder = Encoder::init(cfg.encoder.clone(), &mut rng.split("init.encoder"))?;
            }
            b
        }
        None => {
            let mut ir = rng.split("init");
            ModelBundle {
                denoiser: Denoiser::init(cfg.denoiser.clone(), &mut ir)?,
                encoder: Encoder::init(cfg.encoder.clone(), &mut ir)?,
                schedule: cfg.schedule.build()?,
            }
        }
    };
    let result = train_with_progress(&cfg.training, bundle, &ds.model_images(), &rng.split("train"), |e, l| {
        log::info!("epoch {e}: {l:.6}")
    })?;
    let dtype = match dtype {
        StoreDtype::F32 => Dtype::F32,
        StoreDtype::F64 => Dtype::F64,
    };
    save_checkpoint(&result.bundle, out, dtype)?;
    let log_path = sibling(out, ".csv");
    write_atomic(&log_path, result.log.to_csv().as_bytes())?;
    Ok(vec![out.to_path_buf(), log_path])
}

fn parse_latent(text: &str) -> Result<Tensor> {
    let v: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| SamiError::InvalidArgument(format!("bad latent value '{s}'"))))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(SamiError::InvalidArgument("empty latent".into()));
    }
    Ok(Tensor::vector(&v))
}

fn pixel_tiles(images: &Tensor) -> Result<Vec<Tensor>> {
    data::from_model_space(images).unstack()
}

fn grid_dims(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (n.div_ceil(cols), cols)
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    _cfg: &RunConfig,
    rng: &RngStream,
    ckpt: &Path,
    condition: Option<&Path>,
    mask: &str,
    n: usize,
    rule: &str,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let rule = CoefficientRule::parse(rule)?;
    let bundle = load_checkpoint(ckpt)?;
    let s = bundle.denoiser.config.image_size;
    let mut sr = rng.split("sample");
    let mut outputs = vec![out.to_path_buf()];
    let images = match condition {
        None => sample_unconditional(&bundle.denoiser, &bundle.schedule, &mut sr, n, &[1, s, s])?,
        Some(p) => {
            let cond = if p.extension().is_some_and(|e| e == "pgm") {
                let img = read_pgm(p)?;
                if img.shape() != [s, s] {
                    return Err(SamiError::InvalidArgument(format!("condition image {:?}, model is {s}x{s}", img.shape())));
                }
                Condition::Image(data::to_model_space(&img.reshape(&[1, s, s])?))
            } else {
                Condition::Latent(parse_latent(&std::fs::read_to_string(p)?)?)
            };
            let mask = GuidanceMask::parse(mask, bundle.encoder.config.latent_dim)?;
            let settings = SampleSettings { rule, ..Default::default() };
            let res = sample_conditional(&bundle, &cond, &mask, &mut sr, n, settings)?;
            let log_path = sibling(out, ".csv");
            write_atomic(&log_path, res.log.to_csv().as_bytes())?;
            outputs.push(log_path);
            res.images
        }
    };
    let (rows, cols) = grid_dims(n);
    write_image_grid(&pixel_tiles(&images)?, rows, cols, out)?;
    Ok(outputs)
}

fn encode_cmd(cfg: &RunConfig, rng: &RngStream, ckpt: &Path, data_path: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    let bundle = load_checkpoint(ckpt)?;
    let ds = load_or_generate(cfg, rng, data_path, cfg.analysis.n_test, "test")?;
    let (mu, var) = bundle.encoder.encode_batch(&ds.model_images())?;
    let d = bundle.encoder.config.latent_dim;
    let mut csv = String::from("index,c_x,c_y,i_bg");
    (0..d).for_each(|i| csv.push_str(&format!(",mean{i}")));
    (0..d).for_each(|i| csv.push_str(&format!(",var{i}")));
    csv.push('\n');
    for (i, f) in ds.factors.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{}", f.c_x, f.c_y, f.i_bg));
        (0..d).for_each(|k| csv.push_str(&format!(",{}", mu.data()[i * d + k])));
        (0..d).for_each(|k| csv.push_str(&format!(",{}", var.data()[i * d + k])));
        csv.push('\n');
    }
    write_atomic(out, csv.as_bytes())?;
    Ok(vec![out.to_path_buf()])
}

fn traverse_cmd(rng: &RngStream, ckpt: &Path, from: &str, to: &str, steps: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let bundle = load_checkpoint(ckpt)?;
    let d = bundle.encoder.config.latent_dim;
    let path = analysis::latent_traverse(&parse_latent(from)?, &parse_latent(to)?, steps)?;
    let mut tiles = Vec::with_capacity(steps);
    for (k, z) in path.into_iter().enumerate() {
        let mut sr = rng.split_index("traverse", k as u64);
        let res = sample_conditional(&bundle, &Condition::Latent(z), &GuidanceMask::full(d), &mut sr, 1, SampleSettings::default())?;
        tiles.extend(pixel_tiles(&res.images)?);
    }
    write_image_grid(&tiles, 1, steps, out)?;
    Ok(vec![out.to_path_buf()])
}

fn csv_rows(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn analyze_cmd(
    cfg: &RunConfig,
    rng: &RngStream,
    ckpt: &Path,
    metric: Metric,
    data_path: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let bundle = load_checkpoint(ckpt)?;
    let a = &cfg.analysis;
    let ds = load_or_generate(cfg, rng, data_path, a.n_test, "test")?;
    let x = ds.model_images();
    let s = bundle.denoiser.config.image_size;
    let d = bundle.encoder.config.latent_dim;
    let mut ar = rng.split("analyze");
    let csv = match metric {
        Metric::Variability => {
            let u = sample_unconditional(&bundle.denoiser, &bundle.schedule, &mut ar, a.n_samples, &[1, s, s])?;
            let vu = analysis::batch_variability(&u)?;
            let cond = Condition::Image(x.index0(0)?);
            let settings = SampleSettings {
                rule: a.coefficient_rule,
                ..Default::default()
            };
            let c = sample_conditional(&bundle, &cond, &GuidanceMask::full(d), &mut ar, a.n_samples, settings)?;
            let vc = analysis::batch_variability(&c.images)?;
            csv_rows(
                "unconditional,conditional,ratio",
                [vec![vu.to_string(), vc.to_string(), (vc / vu).to_string()]],
            )
        }
        Metric::VarianceProfile => {
            let times = bucket_times(bundle.schedule.levels(), a.buckets);
            let prof = analysis::posterior_variance_profile(&bundle.encoder, &x, &bundle.schedule, &times, a.draws, &mut ar)?;
            let header = std::iter::once("t".to_string())
                .chain((0..d).map(|i| format!("var{i}")))
                .collect::<Vec<_>>()
                .join(",");
            csv_rows(
                &header,
                times.iter().zip(prof).map(|(t, row)| {
                    std::iter::once(t.to_string()).chain(row.iter().map(|v| v.to_string())).collect()
                }),
            )
        }
        Metric::Coherence => {
            let r = analysis::global_coherence(&bundle.encoder, &x, &bundle.schedule, a.t_ref, &mut ar)?;
            csv_rows(
                "axis,population_variance,noisy_variance,sensitivity,coherence",
                (0..d).map(|i| {
                    vec![
                        i.to_string(),
                        r.population_variance[i].to_string(),
                        r.noisy_variance[i].to_string(),
                        r.sensitivity[i].to_string(),
                        r.coherence[i].to_string(),
                    ]
                }),
            )
        }
        Metric::Straightness => {
            let dc = disk_config(cfg);
            let mut rows = Vec::new();
            for k in 0..a.sequences {
                let seq = data::generate_sequence(SequenceKind::LinearDrift, a.sequence_length, &mut ar.split_index("seq", k as u64), &dc)?;
                let (latent, pixel) = sequence_straightness(&bundle.encoder, &seq.frames, s)?;
                rows.push(vec![k.to_string(), latent.to_string(), pixel.to_string()]);
            }
            csv_rows("sequence,latent,pixel", rows)
        }
        Metric::Pr => {
            let (mu, _) = bundle.encoder.encode_batch(&x)?;
            let mut rows = Vec::new();
            for (fi, name) in ["c_x", "c_y", "i_bg"].iter().enumerate() {
                let y: Vec<f64> = ds.factors.iter().map(|f| f.as_array()[fi]).collect();
                let w = least_squares(&mu, &y)?;
                rows.push(vec![name.to_string(), analysis::participation_ratio(&w)?.to_string()]);
            }
            csv_rows("factor,participation_ratio", rows)
        }
        Metric::ScoreProfile => {
            let cond = Condition::Image(x.index0(0)?);
            let c = sample_conditional(&bundle, &cond, &GuidanceMask::full(d), &mut ar, a.n_samples, SampleSettings::default())?;
            analysis::score_magnitude_profile(&c.log)?.to_csv()
        }
        Metric::Smoothness => {
            let (j, h) = analysis::smoothness_probe(&bundle.encoder, &x, a.probes, &mut ar)?;
            csv_rows("jacobian_energy,hessian_energy", [vec![j.to_string(), h.to_string()]])
        }
        Metric::Alignment => {
            let (mu, _) = bundle.encoder.encode_batch(&x)?;
            let f: Vec<Vec<f64>> = ds.factors.iter().map(|f| f.as_array().to_vec()).collect();
            let r = analysis::factor_alignment(&mu, &f)?;
            let header = std::iter::once("factor".to_string())
                .chain((0..d).map(|i| format!("r2_axis{i}")))
                .chain(["best_axis".to_string()])
                .collect::<Vec<_>>()
                .join(",");
            csv_rows(
                &header,
                ["c_x", "c_y", "i_bg"].iter().enumerate().map(|(fi, name)| {
                    std::iter::once(name.to_string())
                        .chain(r.r2[fi].iter().map(|v| v.to_string()))
                        .chain([r.best_axis[fi].to_string()])
                        .collect()
                }),
            )
        }
    };
    write_atomic(out, csv.as_bytes())?;
    Ok(vec![out.to_path_buf()])
}

/// Diffusion times at the centres of `buckets` equal slices of `1..=levels`,
/// with time 0 (the clean image) first.
pub fn bucket_times(levels: usize, buckets: usize) -> Vec<usize> {
    let mut t = vec![0];
    for b in 0..buckets {
        let c = ((b as f64 + 0.5) * levels as f64 / buckets as f64).floor() as usize + 1;
        t.push(c.min(levels));
    }
    t.dedup();
    t
}

/// Mean straightness of the latent-mean path and of the pixel path.
pub fn sequence_straightness(encoder: &Encoder, frames: &[Tensor], size: usize) -> Result<(f64, f64)> {
    let n = frames.len();
    let flat: Vec<f64> = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    let batch = data::to_model_space(&Tensor::new(&[n, 1, size, size], flat)?);
    let (mu, _) = encoder.encode_batch(&batch)?;
    let (_, latent) = analysis::straightness(&mu.unstack()?)?;
    let (_, pixel) = analysis::straightness(frames)?;
    Ok((latent, pixel))
}

/// Least-squares coefficients `w` (plus intercept, dropped) of `y ≈ X w + b`.
pub fn least_squares(x: &Tensor, y: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let design = nalgebra::DMatrix::from_fn(n, d + 1, |i, j| if j < d { x.data()[i * d + j] } else { 1.0 });
    let rhs = nalgebra::DVector::from_column_slice(y);
    let sol = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| SamiError::InvalidArgument(e.to_string()))?;
    Ok(sol.iter().take(d).copied().collect())
}

/// Results of the linear-Gaussian checks.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub miyasawa_error: f64,
    pub bayes_error: f64,
    pub mean_rel_error: f64,
    pub cov_rel_error: f64,
}

/// Closed-form identities plus guided sampling against the exact posterior.
pub fn oracle_report(levels: usize, chains: usize, rng: &RngStream) -> Result<OracleReport> {
    let world = GaussianWorld::random(4, 2, 0.1, &mut rng.split("world"))?;
    let sched = crate::diffusion::NoiseSchedule::linear(levels)?;
    let am = &world.obs * &world.mean;
    let z_obs = Tensor::vector(&[am[0] + 0.8, am[1] - 0.5]);
    let mut pr = rng.split("probe");
    let mut miyasawa: f64 = 0.0;
    let mut bayes: f64 = 0.0;
    for t in [0, levels / 4, levels / 2, levels - 1] {
        let x = pr.normal_tensor(&[16, 4]);
        let a = world.analytic_denoiser(&sched, t, &x)?;
        let b = world.posterior_noise(&sched, t, &x)?;
        miyasawa = miyasawa.max(a.sub(&b)?.max_abs());
        let lhs = world.conditional_score(&sched, t, &x, &z_obs)?;
        let rhs = world
            .marginal_score(&sched, t, &x)?
            .add(&world.likelihood_score(&sched, t, &x, &z_obs, &GuidanceMask::full(2))?)?;
        bayes = bayes.max(lhs.sub(&rhs)?.max_abs());
    }
    let den = AnalyticDenoiser {
        world: &world,
        schedule: &sched,
    };
    let field = AnalyticGuidance {
        world: &world,
        schedule: &sched,
    };
    let res = crate::guidance::sample_guided(
        &den,
        &field,
        &sched,
        &Condition::Latent(z_obs.clone()),
        &GuidanceMask::full(2),
        SampleSettings::default(),
        &mut rng.split("chains"),
        chains,
        &[4],
    )?;
    let emp = empirical_moments(&res.images)?;
    let exact = world.conditional_posterior(&z_obs)?;
    Ok(OracleReport {
        miyasawa_error: miyasawa,
        bayes_error: bayes,
        mean_rel_error: (&emp.mean - &exact.mean).norm() / exact.mean.norm(),
        cov_rel_error: (&emp.cov - &exact.cov).norm() / exact.cov.norm(),
    })
}

fn oracle_cmd(cfg: &RunConfig, rng: &RngStream, chains: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let r = oracle_report(cfg.schedule.levels, chains, rng)?;
    let csv = csv_rows(
        "miyasawa_max_abs_error,bayes_max_abs_error,mean_rel_error,cov_rel_error",
        [vec![
            r.miyasawa_error.to_string(),
            r.bayes_error.to_string(),
            r.mean_rel_error.to_string(),
            r.cov_rel_error.to_string(),
        ]],
    );
    write_atomic(out, csv.as_bytes())?;
    Ok(vec![out.to_path_buf()])
}

use std::path::{Path, PathBuf};
use std::process::Command;

use sami::cli::{load_checkpoint, read_pgm, write_image_grid, RunConfig};
use sami::data::{render_disk, DiskConfig, DiskFactors};

const TINY: &str = "\
[model]
image_size = 16
denoiser_base_channels = 2
denoiser_channel_mult = 1,2
encoder_base_channels = 2
encoder_channel_mult = 1,2

[schedule]
levels = 12

[training]
batch_size = 8
epochs = 2
kl_anneal_epochs = 2
learning_rate = 0.001

[data]
n_train = 16
radius = 4

[analysis]
n_test = 100
n_samples = 4
t_ref = 5
draws = 2
buckets = 3
sequences = 3
sequence_length = 4
";

fn sami(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sami")).args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) {
    let (code, _, err) = sami(args);
    assert_eq!(code, 0, "{args:?}: {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.cfg"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn cfg(&self) -> String {
        s(&self.p("tiny.cfg")).to_string()
    }

    fn condition_image(&self) -> PathBuf {
        let cfg = DiskConfig { width: 16, height: 16, radius: 4.0, edge: 1.0 };
        let img = render_disk(&DiskFactors { c_x: 6.0, c_y: 9.0, i_bg: 0.1 }, &cfg).unwrap();
        let path = self.p("cond.pgm");
        write_image_grid(&[img], 1, 1, &path).unwrap();
        path
    }

    /// gen-data, train, sample and analyze; returns the produced files.
    fn pipeline(&self) -> Vec<PathBuf> {
        let cfg = self.cfg();
        let (data, ckpt, grid) = (self.p("d.smd"), self.p("m.ckpt"), self.p("g.pgm"));
        ok(&["gen-data", "--config", &cfg, "--seed", "7", "--out", s(&data)]);
        ok(&["train", "--config", &cfg, "--seed", "7", "--data", s(&data), "--out", s(&ckpt)]);
        let cond = self.condition_image();
        ok(&["sample", "--config", &cfg, "--seed", "7", "--checkpoint", s(&ckpt), "--condition", s(&cond), "--n", "16", "--out", s(&grid)]);
        let mut files = vec![data, ckpt.clone(), self.p("m.ckpt.csv"), grid, self.p("g.pgm.csv")];
        for metric in ["variability", "variance-profile", "coherence", "straightness", "pr", "score-profile", "smoothness", "alignment"] {
            let out = self.p(&format!("{metric}.csv"));
            ok(&["analyze", "--config", &cfg, "--seed", "7", "--checkpoint", s(&ckpt), "--metric", metric, "--out", s(&out)]);
            files.push(out);
        }
        files
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(sami(&["frobnicate"]).0, 2);
    assert_eq!(sami(&["gen-data"]).0, 2);
    assert_eq!(sami(&["analyze", "--out", "x", "--checkpoint", "m", "--metric", "nope"]).0, 2);
    assert_eq!(sami(&["--help"]).0, 0);
}

#[test]
fn runtime_failures_exit_one() {
    let run = Run::new();
    let bad = run.p("bad.cfg");
    std::fs::write(&bad, "[model]\nno_such_key = 3\n").unwrap();
    let (code, _, err) = sami(&["gen-data", "--config", s(&bad), "--out", s(&run.p("x.smd"))]);
    assert_eq!(code, 1);
    assert!(err.contains("no_such_key"), "{err}");

    std::fs::write(run.p("junk.ckpt"), b"SAMI\x01\x00").unwrap();
    let (code, _, err) = sami(&["sample", "--checkpoint", s(&run.p("junk.ckpt")), "--out", s(&run.p("g.pgm"))]);
    assert_eq!(code, 1);
    assert!(err.contains("offset"), "{err}");
}

#[test]
fn gen_data_writes_dataset_and_journal() {
    let run = Run::new();
    let out = run.p("d.smd");
    ok(&["gen-data", "--config", &run.cfg(), "--seed", "7", "--out", s(&out)]);
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"SMD1");
    let journal = std::fs::read_to_string(run.p("sami-journal.log")).unwrap();
    let line = journal.lines().next().unwrap();
    let cfg = RunConfig::load(&run.p("tiny.cfg")).unwrap();
    assert!(line.starts_with("command=gen-data\t"), "{line}");
    assert!(line.contains(&format!("config={}", sami::cli::config_hash(&cfg))));
    assert!(line.contains("seed=7"));
    assert!(line.ends_with(s(&out)));
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let (a, b) = (Run::new(), Run::new());
    let fa = a.pipeline();
    let fb = b.pipeline();
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }

    let grid = read_pgm(&a.p("g.pgm")).unwrap();
    assert_eq!(grid.shape(), &[4 * 16 + 3 * 2, 4 * 16 + 3 * 2]);
    let bundle = load_checkpoint(&a.p("m.ckpt")).unwrap();
    assert_eq!(bundle.schedule.levels(), 12);
    let log = std::fs::read_to_string(a.p("m.ckpt.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), sami::guidance::RUNLOG_HEADER);
    assert_eq!(log.lines().count(), 1 + 2 * 2);
    let journal = std::fs::read_to_string(a.p("sami-journal.log")).unwrap();
    assert_eq!(journal.lines().count(), 11);
}

#[test]
fn frozen_training_keeps_the_initial_denoiser() {
    let run = Run::new();
    let cfg = run.cfg();
    let (first, second) = (run.p("a.ckpt"), run.p("b.ckpt"));
    ok(&["train", "--config", &cfg, "--seed", "1", "--out", s(&first)]);
    let frozen = run.p("frozen.cfg");
    std::fs::write(&frozen, format!("{TINY}\n[training]\nmode = frozen-denoiser\n")).unwrap();
    ok(&["train", "--config", s(&frozen), "--seed", "2", "--init", s(&first), "--out", s(&second)]);
    let (a, b) = (load_checkpoint(&first).unwrap(), load_checkpoint(&second).unwrap());
    assert_eq!(a.denoiser, b.denoiser);
    assert_ne!(a.encoder, b.encoder);
}

#[test]
fn latent_conditioning_and_traversal() {
    let run = Run::new();
    let cfg = run.cfg();
    let ckpt = run.p("m.ckpt");
    ok(&["train", "--config", &cfg, "--out", s(&ckpt)]);
    std::fs::write(run.p("z.txt"), "0.5, -1.0, 0.25\n").unwrap();
    let grid = run.p("z.pgm");
    ok(&["sample", "--checkpoint", s(&ckpt), "--condition", s(&run.p("z.txt")), "--mask", "1,0,1", "--n", "3", "--coefficient-rule", "algorithm", "--out", s(&grid)]);
    assert_eq!(read_pgm(&grid).unwrap().shape(), &[2 * 16 + 2, 2 * 16 + 2]);
    let (code, _, _) = sami(&["sample", "--checkpoint", s(&ckpt), "--condition", s(&run.p("z.txt")), "--coefficient-rule", "c", "--out", s(&grid)]);
    assert_eq!(code, 1);

    let trav = run.p("t.pgm");
    ok(&["traverse", "--checkpoint", s(&ckpt), "--from", "-1,0,0", "--to", "1,0,0", "--steps", "5", "--out", s(&trav)]);
    assert_eq!(read_pgm(&trav).unwrap().shape(), &[16, 5 * 16 + 4 * 2]);

    let enc = run.p("enc.csv");
    ok(&["encode", "--config", &cfg, "--checkpoint", s(&ckpt), "--out", s(&enc)]);
    let text = std::fs::read_to_string(&enc).unwrap();
    assert!(text.starts_with("index,c_x,c_y,i_bg,mean0,mean1,mean2,var0,var1,var2\n"));
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn oracle_check_reports_small_errors() {
    let run = Run::new();
    let out = run.p("oracle.csv");
    ok(&["oracle-check", "--seed", "3", "--chains", "2000", "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let vals: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(vals[0] <= 1e-10 && vals[1] <= 1e-10, "{text}");
}

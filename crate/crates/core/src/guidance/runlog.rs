use std::io::Write;

use crate::error::Result;

/// One training or sampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub step: usize,
    /// Noise level; the batch mean during training.
    pub t: f64,
    pub loss: Option<f64>,
    pub recon: Option<f64>,
    pub kl: Option<f64>,
    /// Mean per-item `‖ε̂_θ‖`.
    pub norm_eps: f64,
    /// Mean per-item `‖γ_t g‖`.
    pub norm_guidance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

pub const RUNLOG_HEADER: &str = "step,t,loss,recon,kl,norm_eps,norm_guidance";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl RunLog {
    pub fn push(&mut self, r: RunRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: RunLog) {
        self.records.extend(other.records);
    }

    /// CSV with a header row; missing values are empty fields.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{RUNLOG_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.step,
                r.t,
                opt(r.loss),
                opt(r.recon),
                opt(r.kl),
                r.norm_eps,
                r.norm_guidance
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

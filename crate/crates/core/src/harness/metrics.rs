use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub train_loss: f32,
    pub r_used: f64,
    pub selected_layers: Vec<usize>,
    pub t_forward: f64,
    pub t_backward: f64,
    pub t_optimizer: f64,
    pub t_selection: f64,
    /// Wall time of the whole step.
    pub t_step: f64,
    /// Training time so far, eval excluded.
    pub cumulative_time: f64,
}

impl StepMetrics {
    /// Same step with every wall-clock field zeroed, for trace comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            t_forward: 0.0,
            t_backward: 0.0,
            t_optimizer: 0.0,
            t_selection: 0.0,
            t_step: 0.0,
            cumulative_time: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
}

/// Seconds spent per phase over a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub forward: f64,
    pub backward: f64,
    pub optimizer: f64,
    pub selection: f64,
    pub eval: f64,
    /// Sum of step wall times.
    pub train: f64,
}

impl PhaseTotals {
    pub fn train_with_eval(&self) -> f64 {
        self.train + self.eval
    }

    pub fn backward_share(&self) -> f64 {
        if self.train > 0.0 {
            self.backward / self.train
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    /// `None` when the loss was not finite.
    pub loss: Option<f64>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub steps_completed: usize,
    pub initial_eval_loss: f64,
    /// `None` for a diverged run.
    pub final_eval_loss: Option<f64>,
    pub evals: Vec<EvalPoint>,
    pub totals: PhaseTotals,
    pub trainable_params: usize,
    pub diverged: Option<Divergence>,
    #[serde(skip)]
    pub metrics: Vec<StepMetrics>,
}

impl RunReport {
    pub fn is_diverged(&self) -> bool {
        self.diverged.is_some()
    }

    pub fn mean_backward_time(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.t_backward))
    }

    /// Process exit code: 0 converged, 2 divergence recorded.
    pub fn exit_code(&self) -> i32 {
        if self.is_diverged() {
            2
        } else {
            0
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Writes `metrics.jsonl`, `metrics.csv` and `summary.json` into `dir`.
pub fn write_run_outputs(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut jsonl = BufWriter::new(File::create(dir.join(METRICS_JSONL))?);
    for m in &report.metrics {
        serde_json::to_writer(&mut jsonl, m)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;

    let mut csv = BufWriter::new(File::create(dir.join(METRICS_CSV))?);
    writeln!(
        csv,
        "step,train_loss,r_used,selected_layers,t_forward,t_backward,t_optimizer,t_selection,t_step,cumulative_time"
    )?;
    for m in &report.metrics {
        let layers: Vec<String> = m.selected_layers.iter().map(usize::to_string).collect();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            m.step,
            m.train_loss,
            m.r_used,
            layers.join(" "),
            m.t_forward,
            m.t_backward,
            m.t_optimizer,
            m.t_selection,
            m.t_step,
            m.cumulative_time
        )?;
    }
    csv.flush()?;

    std::fs::write(dir.join(SUMMARY_JSON), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = File::open(path).map_err(|e| Error::Reporting(format!("{}: {e}", path.display())))?;
    BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| Ok(serde_json::from_str(&line?)?))
        .collect()
}

/// Loads `summary.json` plus the JSONL trace of a run directory.
pub fn read_run(dir: &Path) -> Result<RunReport> {
    let summary = dir.join(SUMMARY_JSON);
    let text = std::fs::read_to_string(&summary).map_err(|e| Error::Reporting(format!("{}: {e}", summary.display())))?;
    let mut report: RunReport = serde_json::from_str(&text)?;
    report.metrics = read_metrics(&dir.join(METRICS_JSONL))?;
    Ok(report)
}

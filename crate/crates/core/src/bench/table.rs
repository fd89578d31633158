use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{read_run, PhaseTotals, RunReport};

/// Which wall time speedups divide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBasis {
    Train,
    TrainWithEval,
}

/// What the table keeps of one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// `None` marks a diverged run (loss = ∞).
    pub final_eval_loss: Option<f64>,
    pub totals: PhaseTotals,
    /// Mean `r_used` over post-warmup steps.
    pub mean_ratio: f64,
    pub dir: Option<PathBuf>,
}

impl RunRecord {
    pub fn from_report(report: &RunReport, dir: Option<PathBuf>) -> Self {
        let post: Vec<f64> = report
            .metrics
            .iter()
            .filter(|m| m.step > report.config.warmup_steps)
            .map(|m| m.r_used)
            .collect();
        let mean_ratio = if post.is_empty() { 1.0 } else { post.iter().sum::<f64>() / post.len() as f64 };
        Self {
            seed: report.config.seed,
            final_eval_loss: if report.is_diverged() { None } else { report.final_eval_loss },
            totals: report.totals.clone(),
            mean_ratio,
            dir,
        }
    }

    fn time(&self, basis: TimeBasis) -> f64 {
        match basis {
            TimeBasis::Train => self.totals.train,
            TimeBasis::TrainWithEval => self.totals.train_with_eval(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub name: String,
    pub runs: usize,
    pub diverged: usize,
    /// Mean and sample standard deviation of the final eval loss over converged runs.
    pub loss_mean: Option<f64>,
    pub loss_std: Option<f64>,
    pub train_time: Option<f64>,
    pub train_time_with_eval: Option<f64>,
    pub backward_share: Option<f64>,
    pub mean_ratio: f64,
    /// Against the basis chosen for the table.
    pub speedup: Option<f64>,
    pub speedup_train: Option<f64>,
    pub speedup_train_with_eval: Option<f64>,
    pub loss_gap: Option<f64>,
    pub records: Vec<RunRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub reference: String,
    pub basis: TimeBasis,
    pub rows: Vec<VariantRow>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    mean_std(&v).0
}

/// Builds the table. Diverged runs are counted but left out of every mean.
pub fn aggregate(reference: &str, groups: Vec<(String, Vec<RunRecord>)>, basis: TimeBasis) -> Result<ComparisonTable> {
    let mut rows: Vec<VariantRow> = groups
        .into_iter()
        .map(|(name, records)| {
            let ok: Vec<&RunRecord> = records.iter().filter(|r| r.final_eval_loss.is_some()).collect();
            let losses: Vec<f64> = ok.iter().filter_map(|r| r.final_eval_loss).collect();
            let (loss_mean, loss_std) = mean_std(&losses);
            VariantRow {
                runs: records.len(),
                diverged: records.len() - ok.len(),
                loss_mean,
                loss_std,
                train_time: mean_of(ok.iter().map(|r| r.time(TimeBasis::Train))),
                train_time_with_eval: mean_of(ok.iter().map(|r| r.time(TimeBasis::TrainWithEval))),
                backward_share: mean_of(ok.iter().map(|r| r.totals.backward_share())),
                mean_ratio: mean_of(records.iter().map(|r| r.mean_ratio)).unwrap_or(1.0),
                speedup: None,
                speedup_train: None,
                speedup_train_with_eval: None,
                loss_gap: None,
                records,
                name,
            }
        })
        .collect();

    let Some(r) = rows.iter().find(|r| r.name == reference) else {
        return Err(Error::Suite(format!("reference variant `{reference}` not found")));
    };
    if r.diverged > 0 || r.loss_mean.is_none() {
        return Err(Error::Suite(format!(
            "reference variant `{reference}` diverged in {} of {} runs; speedups are undefined",
            r.diverged, r.runs
        )));
    }
    let (ref_loss, ref_train, ref_eval) = (
        r.loss_mean.expect("checked"),
        r.train_time.expect("converged"),
        r.train_time_with_eval.expect("converged"),
    );
    for row in &mut rows {
        row.speedup_train = row.train_time.map(|t| ref_train / t);
        row.speedup_train_with_eval = row.train_time_with_eval.map(|t| ref_eval / t);
        row.speedup = match basis {
            TimeBasis::Train => row.speedup_train,
            TimeBasis::TrainWithEval => row.speedup_train_with_eval,
        };
        row.loss_gap = row.loss_mean.map(|l| (l - ref_loss) / ref_loss);
    }
    Ok(ComparisonTable {
        reference: reference.to_string(),
        basis,
        rows,
    })
}

/// Table over existing run directories; each directory is its own row and
/// the first one is the reference.
pub fn report_runs(dirs: &[PathBuf], basis: TimeBasis) -> Result<ComparisonTable> {
    if dirs.is_empty() {
        return Err(Error::Reporting("no run directories given".into()));
    }
    let mut groups = Vec::new();
    for dir in dirs {
        let report = read_run(dir)?;
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        groups.push((name, vec![RunRecord::from_report(&report, Some(dir.clone()))]));
    }
    let reference = groups[0].0.clone();
    aggregate(&reference, groups, basis)
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map_or_else(|| "-".to_string(), f)
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned plain-text rendering with divergence footnotes.
    pub fn render(&self) -> String {
        let header = [
            "variant", "runs", "eval loss", "train s", "train+eval s", "bwd share", "speedup", "loss gap",
        ];
        let mut footnotes = Vec::new();
        let body: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                let mut name = r.name.clone();
                if r.diverged > 0 {
                    footnotes.push(format!(
                        "[{}] {}: {} of {} runs diverged (loss = ∞), excluded from means",
                        footnotes.len() + 1,
                        r.name,
                        r.diverged,
                        r.runs
                    ));
                    name = format!("{name} [{}]", footnotes.len());
                }
                let loss = match (r.loss_mean, r.loss_std) {
                    (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
                    _ => "∞".to_string(),
                };
                [
                    name,
                    r.runs.to_string(),
                    loss,
                    opt(r.train_time, |v| format!("{v:.2}")),
                    opt(r.train_time_with_eval, |v| format!("{v:.2}")),
                    opt(r.backward_share, |v| format!("{:.1}%", v * 100.0)),
                    opt(r.speedup, |v| format!("{v:.2}x")),
                    opt(r.loss_gap, |v| format!("{:+.2}%", v * 100.0)),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
                let pad = w - cell.chars().count();
                if i == 0 {
                    s.push_str(cell);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str("  ");
                    s.push_str(&" ".repeat(pad));
                    s.push_str(cell);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", line(&header.map(String::from)));
        let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        for row in &body {
            let _ = writeln!(out, "{}", line(row));
        }
        let basis = match self.basis {
            TimeBasis::Train => "training time without eval",
            TimeBasis::TrainWithEval => "training time including eval",
        };
        let _ = writeln!(out, "\nreference: {}; speedup uses {basis}", self.reference);
        for f in footnotes {
            let _ = writeln!(out, "{f}");
        }
        out
    }

    /// Writes `table.json` and `table.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("table.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("table.txt"), self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, loss: Option<f64>, train: f64) -> RunRecord {
        RunRecord {
            seed,
            final_eval_loss: loss,
            totals: PhaseTotals {
                train,
                backward: train / 4.0,
                eval: 1.0,
                ..PhaseTotals::default()
            },
            mean_ratio: 0.5,
            dir: None,
        }
    }

    #[test]
    fn reference_is_exactly_one_and_zero() {
        let t = aggregate(
            "ref",
            vec![
                ("ref".into(), vec![rec(1, Some(2.7), 3.3), rec(2, Some(2.9), 3.1)]),
                ("same".into(), vec![rec(1, Some(2.7), 3.3), rec(2, Some(2.9), 3.1)]),
            ],
            TimeBasis::Train,
        )
        .unwrap();
        for name in ["ref", "same"] {
            let r = t.row(name).unwrap();
            assert_eq!(r.speedup, Some(1.0));
            assert_eq!(r.loss_gap, Some(0.0));
        }
        assert!(t.render().contains("1.00x") && t.render().contains("+0.00%"));
    }

    #[test]
    fn divergent_runs_are_footnoted_and_excluded() {
        let t = aggregate(
            "ref",
            vec![
                ("ref".into(), vec![rec(1, Some(2.0), 4.0)]),
                ("fast".into(), vec![rec(1, Some(2.2), 2.0), rec(2, None, 0.5)]),
            ],
            TimeBasis::Train,
        )
        .unwrap();
        let r = t.row("fast").unwrap();
        assert_eq!((r.runs, r.diverged), (2, 1));
        assert_eq!(r.speedup, Some(2.0));
        assert!((r.loss_gap.unwrap() - 0.1).abs() < 1e-12);
        let text = t.render();
        assert!(text.contains("fast [1]") && text.contains("1 of 2 runs diverged"), "{text}");
    }

    #[test]
    fn divergent_reference_is_a_suite_error() {
        let err = aggregate("ref", vec![("ref".into(), vec![rec(1, None, 1.0)])], TimeBasis::Train);
        assert!(matches!(err, Err(Error::Suite(_))));
    }

    #[test]
    fn eval_time_basis() {
        let t = aggregate(
            "a",
            vec![("a".into(), vec![rec(1, Some(1.0), 4.0)]), ("b".into(), vec![rec(1, Some(1.0), 1.0)])],
            TimeBasis::TrainWithEval,
        )
        .unwrap();
        let b = t.row("b").unwrap();
        assert_eq!(b.speedup_train, Some(4.0));
        assert_eq!(b.speedup_train_with_eval, Some(2.5));
        assert_eq!(b.speedup, Some(2.5));
    }
}

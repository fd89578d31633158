use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::table::ComparisonTable;
use crate::error::{Error, Result};
use crate::harness::{read_metrics, METRICS_JSONL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Mean training loss per step, one column per variant.
    LossCurve,
    /// `(r, mean loss, std, speedup)` per variant, sorted by r.
    RatioSweep,
    /// `(variant, mean loss, std, speedup, backward share)`.
    StrategyBar,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::LossCurve, PlotKind::RatioSweep, PlotKind::StrategyBar];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::LossCurve => "loss_curve",
            PlotKind::RatioSweep => "ratio_sweep",
            PlotKind::StrategyBar => "strategy_bar",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Reporting(format!("unknown plot kind `{s}`")))
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes `<kind>.csv` into `dir` and returns its path.
pub fn emit_plot_data(table: &ComparisonTable, kind: PlotKind, dir: &Path) -> Result<PathBuf> {
    if table.rows.is_empty() {
        return Err(Error::Reporting("empty suite: nothing to plot".into()));
    }
    let mut csv = String::new();
    match kind {
        PlotKind::LossCurve => {
            let mut series: Vec<BTreeMap<usize, (f64, usize)>> = Vec::new();
            for row in &table.rows {
                let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
                for rec in &row.records {
                    let dir = rec.dir.as_ref().ok_or_else(|| {
                        Error::Reporting(format!("run {} seed {} kept no trace", row.name, rec.seed))
                    })?;
                    let path = dir.join(METRICS_JSONL);
                    if !path.exists() {
                        return Err(Error::Reporting(format!(
                            "run {} seed {}: missing trace {}",
                            row.name,
                            rec.seed,
                            path.display()
                        )));
                    }
                    for m in read_metrics(&path)? {
                        let e = acc.entry(m.step).or_default();
                        e.0 += m.train_loss as f64;
                        e.1 += 1;
                    }
                }
                series.push(acc);
            }
            let steps: std::collections::BTreeSet<usize> = series.iter().flat_map(|s| s.keys().copied()).collect();
            let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
            let _ = writeln!(csv, "step,{}", names.join(","));
            for step in steps {
                let cols: Vec<String> = series
                    .iter()
                    .map(|s| cell(s.get(&step).map(|(sum, n)| sum / *n as f64)))
                    .collect();
                let _ = writeln!(csv, "{step},{}", cols.join(","));
            }
        }
        PlotKind::RatioSweep => {
            let mut rows: Vec<_> = table.rows.iter().collect();
            rows.sort_by(|a, b| a.mean_ratio.total_cmp(&b.mean_ratio));
            let _ = writeln!(csv, "r,mean_loss,std,speedup");
            for r in rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    r.mean_ratio,
                    cell(r.loss_mean),
                    cell(r.loss_std),
                    cell(r.speedup)
                );
            }
        }
        PlotKind::StrategyBar => {
            let _ = writeln!(csv, "variant,mean_loss,std,speedup,backward_share");
            for r in &table.rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    r.name,
                    cell(r.loss_mean),
                    cell(r.loss_std),
                    cell(r.speedup),
                    cell(r.backward_share)
                );
            }
        }
    }
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.csv", kind.name()));
    std::fs::write(&path, csv)?;
    Ok(path)
}

//! Multi-run comparisons: suites of config variants, aggregated comparison
//! tables (speedup and loss gap against a reference), and plot-ready CSVs.

mod plot;
mod suite;
mod table;

pub use plot::{emit_plot_data, PlotKind};
pub use suite::{load_suite, run_suite, suite_configs, SuiteConfig, SuiteOptions, Variant};
pub use table::{aggregate, report_runs, ComparisonTable, RunRecord, TimeBasis, VariantRow};

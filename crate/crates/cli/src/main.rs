use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lcsb_core::bench::{emit_plot_data, load_suite, report_runs, run_suite, PlotKind, SuiteOptions, TimeBasis};
use lcsb_core::gradcheck::{model_suite, primitive_suite, CheckOutcome};
use lcsb_core::harness::{
    apply_overrides, config_from_value, eval_windows, evaluate_windows, load_corpus, tokenize, write_run_outputs,
    Checkpoint, Trainer, SEED_ENV,
};
use lcsb_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lcsb", version, about = "Layer-cyclic selective backpropagation training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config.
    Train {
        config: PathBuf,
        /// Override a config field by dotted path, e.g. `schedule.kind=cosine`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
        /// Directory for metrics.jsonl, metrics.csv, summary.json and the final checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue the run saved in this checkpoint directory (the config file is ignored).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps (checkpoint and resume later).
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Mean loss of a checkpoint over the non-overlapping windows of a text file.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long)]
        max_windows: Option<usize>,
    },
    /// Finite-difference gradient checks of every primitive and of a micro model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 10)]
        model_seeds: usize,
    },
    /// Run a benchmark suite.
    Bench {
        suite: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Serialize runs so timed sections never overlap (the default).
        #[arg(long, conflicts_with = "parallel")]
        exclusive: bool,
        /// Run concurrently; only losses stay comparable.
        #[arg(long)]
        parallel: bool,
        /// Compute speedups from training time without eval.
        #[arg(long)]
        exclude_eval: bool,
    },
    /// Comparison table over finished run directories; the first is the reference.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        exclude_eval: bool,
    },
}

fn train(config: &Path, sets: &[String], out: Option<&Path>, resume: Option<&Path>, stop_at: Option<usize>) -> Result<i32> {
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dir, None)?,
        None => {
            let text = std::fs::read_to_string(config)
                .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            let mut doc: serde_json::Value = serde_json::from_str(&text)?;
            if let Ok(seed) = std::env::var(SEED_ENV) {
                let seed: u64 = seed
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={seed} is not an unsigned integer")))?;
                doc["seed"] = seed.into();
            }
            apply_overrides(&mut doc, sets.iter().map(String::as_str))?;
            let cfg = config_from_value(doc)?;
            let path = cfg
                .corpus_path
                .clone()
                .ok_or_else(|| Error::Config("corpus_path is not set".into()))?;
            let corpus = load_corpus(&path, cfg.eval_fraction, cfg.model.seq_len)?;
            Trainer::new(cfg, corpus)?
        }
    };
    let stop = stop_at.unwrap_or(trainer.config().total_steps);
    trainer.run_until(stop)?;
    let report = trainer.report();
    if let Some(out) = out {
        write_run_outputs(out, &report)?;
        trainer.save_checkpoint(&out.join("checkpoint"))?;
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
    println!(
        "steps {}/{}  eval loss {:.4} -> {}  train {:.2}s  eval {:.2}s",
        report.steps_completed,
        report.config.total_steps,
        report.initial_eval_loss,
        fmt(report.final_eval_loss),
        report.totals.train,
        report.totals.eval
    );
    if let Some(d) = &report.diverged {
        println!("diverged at step {}: {}", d.step, d.reason);
    }
    Ok(report.exit_code())
}

fn eval(checkpoint: &Path, corpus: &Path, max_windows: Option<usize>) -> Result<i32> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let bytes = std::fs::read(corpus).map_err(|e| Error::Ingestion {
        path: corpus.to_path_buf(),
        detail: e.to_string(),
    })?;
    let seq_len = ckpt.model.config().seq_len;
    let windows = eval_windows(&tokenize(&bytes), seq_len, max_windows);
    if windows.is_empty() {
        return Err(Error::Ingestion {
            path: corpus.to_path_buf(),
            detail: format!("shorter than {} bytes", seq_len + 1),
        });
    }
    let loss = evaluate_windows(&ckpt.model, &windows)?;
    println!("{}", serde_json::json!({ "loss": loss, "windows": windows.len(), "step": ckpt.manifest.state.step }));
    Ok(0)
}

fn gradcheck(seeds: usize, model_seeds: usize) -> Result<i32> {
    let mut outcomes: Vec<CheckOutcome> = primitive_suite(seeds)?;
    outcomes.push(model_suite(model_seeds)?);
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        println!("{:<22} seeds {:>3}  max rel err {:.3e}  {status}", o.name, o.seeds, o.max_rel_error);
        failed += usize::from(!o.passed());
    }
    println!("{} checks, {failed} failed (tolerance {:.0e})", outcomes.len(), outcomes[0].tolerance);
    Ok(if failed == 0 { 0 } else { 1 })
}

fn bench(suite: &Path, out: Option<PathBuf>, parallel: bool, exclude_eval: bool) -> Result<i32> {
    let suite = load_suite(suite)?;
    let options = SuiteOptions {
        out_dir: out.clone(),
        parallel,
        exclude_eval,
    };
    let table = run_suite(&suite, &options)?;
    print!("{}", table.render());
    if let Some(out) = out {
        for kind in PlotKind::ALL {
            emit_plot_data(&table, kind, &out)?;
        }
    }
    Ok(0)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train {
            config,
            sets,
            out,
            resume,
            stop_at,
        } => train(&config, &sets, out.as_deref(), resume.as_deref(), stop_at),
        Command::Eval {
            checkpoint,
            corpus,
            max_windows,
        } => eval(&checkpoint, &corpus, max_windows),
        Command::Gradcheck { seeds, model_seeds } => gradcheck(seeds, model_seeds),
        Command::Bench {
            suite,
            out,
            exclusive: _,
            parallel,
            exclude_eval,
        } => bench(&suite, out, parallel, exclude_eval),
        Command::Report { runs, exclude_eval } => {
            let basis = if exclude_eval { TimeBasis::Train } else { TimeBasis::TrainWithEval };
            print!("{}", report_runs(&runs, basis)?.render());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

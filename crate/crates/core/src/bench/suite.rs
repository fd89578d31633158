use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::table::{aggregate, ComparisonTable, RunRecord, TimeBasis};
use crate::error::{Error, Result};
use crate::harness::{config_from_value, load_corpus, set_path, train_on, write_run_outputs, Corpus, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Dotted config paths and their values, e.g. `{"schedule.r_start": 0.3}`.
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default)]
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    /// Seeds per variant: `seed, seed + 1, ...`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub reference_variant: String,
}

fn default_repeats() -> usize {
    3
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    /// Where `table.json`, `table.txt` and per-run directories go.
    pub out_dir: Option<PathBuf>,
    /// Run concurrently; wall times are then not comparable.
    pub parallel: bool,
    /// Base speedups on training time without eval.
    pub exclude_eval: bool,
}

pub fn load_suite(path: &Path) -> Result<SuiteConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Suite(format!("{}: {e}", path.display())))
}

/// The validated config of every variant, in suite order (seed not yet varied).
pub fn suite_configs(suite: &SuiteConfig) -> Result<Vec<(String, TrainConfig)>> {
    if suite.variants.is_empty() {
        return Err(Error::Suite("suite has no variants".into()));
    }
    if suite.repeats == 0 {
        return Err(Error::Suite("repeats must be at least 1".into()));
    }
    let mut seen = BTreeSet::new();
    for v in &suite.variants {
        if !seen.insert(v.name.as_str()) {
            return Err(Error::Suite(format!("duplicate variant `{}`", v.name)));
        }
        if v.name.is_empty() || v.name.contains(['/', '\\']) {
            return Err(Error::Suite(format!("variant name `{}` is not usable as a directory", v.name)));
        }
    }
    if !seen.contains(suite.reference_variant.as_str()) {
        return Err(Error::Suite(format!(
            "reference variant `{}` is not among the variants",
            suite.reference_variant
        )));
    }
    let base = serde_json::to_value(&suite.base)?;
    suite
        .variants
        .iter()
        .map(|v| {
            let mut doc = base.clone();
            for (path, value) in &v.overrides {
                set_path(&mut doc, path, value.clone())?;
            }
            let cfg = config_from_value(doc).map_err(|e| Error::Suite(format!("variant `{}`: {e}", v.name)))?;
            Ok((v.name.clone(), cfg))
        })
        .collect()
}

type CorpusKey = (PathBuf, u64, usize);

fn corpus_key(cfg: &TrainConfig) -> Result<CorpusKey> {
    let path = cfg
        .corpus_path
        .clone()
        .ok_or_else(|| Error::Suite("every variant needs a corpus_path".into()))?;
    Ok((path, cfg.eval_fraction.to_bits(), cfg.model.seq_len))
}

/// Runs every variant `repeats` times and aggregates the results.
pub fn run_suite(suite: &SuiteConfig, options: &SuiteOptions) -> Result<ComparisonTable> {
    let configs = suite_configs(suite)?;
    let mut corpora: HashMap<CorpusKey, Corpus> = HashMap::new();
    for (_, cfg) in &configs {
        let key = corpus_key(cfg)?;
        if !corpora.contains_key(&key) {
            let corpus = load_corpus(&key.0, cfg.eval_fraction, cfg.model.seq_len)?;
            corpora.insert(key, corpus);
        }
    }
    let paths: BTreeSet<&PathBuf> = corpora.keys().map(|k| &k.0).collect();
    if paths.len() > 1 {
        return Err(Error::Suite("variants must share one corpus".into()));
    }

    let jobs: Vec<(usize, String, TrainConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(vi, (name, cfg))| {
            (0..suite.repeats).map(move |rep| {
                let mut cfg = cfg.clone();
                cfg.seed = cfg.seed.wrapping_add(rep as u64);
                (vi, name.clone(), cfg)
            })
        })
        .collect();

    let run_one = |(vi, name, cfg): &(usize, String, TrainConfig)| -> Result<(usize, RunRecord)> {
        let corpus = corpora[&corpus_key(cfg)?].clone();
        let report = train_on(cfg.clone(), corpus)?;
        let dir = match &options.out_dir {
            Some(out) => {
                let dir = out.join("runs").join(name).join(format!("seed{}", cfg.seed));
                write_run_outputs(&dir, &report)?;
                Some(dir)
            }
            None => None,
        };
        Ok((*vi, RunRecord::from_report(&report, dir)))
    };

    let results: Vec<Result<(usize, RunRecord)>> = if options.parallel {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
        let next = Mutex::new(0usize);
        let out = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().expect("job counter");
                        let i = *n;
                        *n += 1;
                        i
                    };
                    let Some(job) = jobs.get(i) else { break };
                    let r = run_one(job);
                    out.lock().expect("results").push((i, r));
                });
            }
        });
        let mut out = out.into_inner().expect("results");
        out.sort_by_key(|(i, _)| *i);
        out.into_iter().map(|(_, r)| r).collect()
    } else {
        jobs.iter().map(run_one).collect()
    };

    let mut groups: Vec<(String, Vec<RunRecord>)> = configs.iter().map(|(n, _)| (n.clone(), Vec::new())).collect();
    for r in results {
        let (vi, rec) = r?;
        groups[vi].1.push(rec);
    }
    let basis = if options.exclude_eval { TimeBasis::Train } else { TimeBasis::TrainWithEval };
    let table = aggregate(&suite.reference_variant, groups, basis)?;
    if let Some(out) = &options.out_dir {
        table.write(out)?;
    }
    Ok(table)
}

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use super::config::{Method, TrainConfig};
use super::data::{eval_windows, load_corpus, next_batch, Corpus, Sequence};
use super::metrics::{Divergence, EvalPoint, PhaseTotals, RunReport, StepMetrics};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ParamRef};
use crate::optim::{stale_cache_step, zero_order_step, GradMap, GradientCache, OptimizerState};
use crate::rng::{stream_rng, RunRng};
use crate::selection::{select_layers, update_importance, ImportanceState, SelectionPlan, StrategyKind};

pub(crate) const DATA_STREAM: u64 = 10;
pub(crate) const SELECT_STREAM: u64 = 11;
pub(crate) const ZO_STREAM: u64 = 12;

/// Mean loss over `windows` with every block attached.
pub fn evaluate_windows(model: &Model, windows: &[Sequence]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Input("no eval windows".into()));
    }
    let mut total = 0.0;
    for (x, y) in windows {
        total += model.loss_no_grad(x, y)? as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Mean cross-entropy over the non-overlapping windows of `eval_tokens`.
pub fn evaluate(model: &Model, eval_tokens: &[u32], seq_len: usize) -> Result<f64> {
    evaluate_windows(model, &eval_windows(eval_tokens, seq_len, None))
}

pub(crate) struct Rngs {
    pub data: RunRng,
    pub select: RunRng,
    pub zo: RunRng,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        Self {
            data: stream_rng(seed, DATA_STREAM),
            select: stream_rng(seed, SELECT_STREAM),
            zo: stream_rng(seed, ZO_STREAM),
        }
    }
}

/// Everything a run carries from one step to the next.
pub struct Trainer {
    pub(crate) config: TrainConfig,
    pub(crate) model: Model,
    pub(crate) optimizer: OptimizerState,
    pub(crate) cache: GradientCache,
    pub(crate) importance: ImportanceState,
    pub(crate) rngs: Rngs,
    pub(crate) step: usize,
    pub(crate) metrics: Vec<StepMetrics>,
    pub(crate) evals: Vec<EvalPoint>,
    pub(crate) totals: PhaseTotals,
    pub(crate) diverged: Option<Divergence>,
    corpus: Corpus,
    windows: Vec<Sequence>,
}

enum StepResult {
    Done(StepMetrics),
    Diverged(Divergence),
}

fn diverged(step: usize, loss: f64, threshold: f64) -> Option<Divergence> {
    if !loss.is_finite() {
        Some(Divergence {
            step,
            loss: None,
            reason: "non-finite loss".into(),
        })
    } else if loss > threshold {
        Some(Divergence {
            step,
            loss: Some(loss),
            reason: format!("loss above threshold {threshold}"),
        })
    } else {
        None
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), config.seed)?;
        let n = model.n_layers();
        Ok(Self::assemble(
            config.clone(),
            model,
            OptimizerState::new(config.optimizer.clone()),
            ImportanceState::new(n),
            Rngs::new(config.seed),
            corpus,
        ))
    }

    pub(crate) fn assemble(
        config: TrainConfig,
        model: Model,
        optimizer: OptimizerState,
        importance: ImportanceState,
        rngs: Rngs,
        corpus: Corpus,
    ) -> Self {
        let windows = eval_windows(&corpus.eval, config.model.seq_len, config.eval_max_windows);
        Self {
            config,
            model,
            optimizer,
            cache: GradientCache::default(),
            importance,
            rngs,
            step: 0,
            metrics: Vec::new(),
            evals: Vec::new(),
            totals: PhaseTotals::default(),
            diverged: None,
            corpus,
            windows,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn importance(&self) -> &ImportanceState {
        &self.importance
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.metrics
    }

    pub fn evals(&self) -> &[EvalPoint] {
        &self.evals
    }

    pub fn is_finished(&self) -> bool {
        self.diverged.is_some() || self.step >= self.config.total_steps
    }

    fn eval_now(&mut self) -> Result<()> {
        if self.evals.last().is_some_and(|e| e.step == self.step) {
            return Ok(());
        }
        let start = Instant::now();
        let loss = evaluate_windows(&self.model, &self.windows)?;
        self.totals.eval += start.elapsed().as_secs_f64();
        self.evals.push(EvalPoint { step: self.step, loss });
        Ok(())
    }

    /// Runs until `step` steps are complete, the run ends, or it diverges.
    pub fn run_until(&mut self, step: usize) -> Result<()> {
        if self.evals.is_empty() {
            self.eval_now()?;
        }
        let end = step.min(self.config.total_steps);
        while self.diverged.is_none() && self.step < end {
            match self.train_step()? {
                StepResult::Done(m) => {
                    self.step = m.step;
                    self.metrics.push(m);
                    if self.step % self.config.eval_interval == 0 || self.step == self.config.total_steps {
                        self.eval_now()?;
                    }
                }
                StepResult::Diverged(d) => self.diverged = Some(d),
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.total_steps)
    }

    /// Report of the steps run so far.
    pub fn report(&self) -> RunReport {
        let finished = self.step >= self.config.total_steps;
        RunReport {
            config: self.config.clone(),
            steps_completed: self.step,
            initial_eval_loss: self.evals.first().map_or(f64::NAN, |e| e.loss),
            final_eval_loss: match (&self.diverged, self.evals.last()) {
                (None, Some(e)) if finished => Some(e.loss),
                _ => None,
            },
            evals: self.evals.clone(),
            totals: self.totals.clone(),
            trainable_params: self.model.trainable_count(),
            diverged: self.diverged.clone(),
            metrics: self.metrics.clone(),
        }
    }

    fn train_step(&mut self) -> Result<StepResult> {
        let step_start = Instant::now();
        let t = self.step + 1;
        let cfg = &self.config;
        let n = self.model.n_layers();
        let strategy = cfg.effective_strategy();

        let sel_start = Instant::now();
        let r = if strategy.kind == StrategyKind::Full {
            1.0
        } else {
            cfg.schedule.ratio(t, cfg.total_steps)?
        };
        let plan: SelectionPlan = select_layers(
            &strategy,
            &self.importance,
            t,
            cfg.warmup_steps,
            n,
            r,
            Some(&mut self.rngs.select),
        )?;
        let t_selection = sel_start.elapsed().as_secs_f64();

        let batch = next_batch(&self.corpus.train, cfg.model.seq_len, cfg.batch_size, &mut self.rngs.data)?;

        let (train_loss, t_forward, t_backward, t_optimizer) = if cfg.method == Method::Mezo {
            let start = Instant::now();
            let out = match zero_order_step(&mut self.model, &batch, &cfg.zero_order, &mut self.rngs.zo) {
                Ok(out) => out,
                Err(Error::ZeroOrderDivergence { .. }) => {
                    return Ok(StepResult::Diverged(Divergence {
                        step: t,
                        loss: None,
                        reason: "non-finite zeroth-order probe".into(),
                    }))
                }
                Err(e) => return Err(e),
            };
            let loss = (out.loss_plus + out.loss_minus) / 2.0;
            if let Some(d) = diverged(t, loss, cfg.divergence_threshold) {
                return Ok(StepResult::Diverged(d));
            }
            (loss as f32, start.elapsed().as_secs_f64(), 0.0, 0.0)
        } else {
            let mut t_forward = 0.0;
            let mut t_backward = 0.0;
            let mut loss_sum = 0.0f64;
            let mut grads: BTreeMap<ParamRef, Tensor> = BTreeMap::new();
            let inv_b = 1.0 / batch.len() as f32;
            for (x, y) in &batch {
                let fwd_start = Instant::now();
                let mut g = Graph::new();
                let fwd = self.model.forward(&mut g, x, &plan.modes)?;
                let targets: Vec<usize> = y.iter().map(|&v| v as usize).collect();
                let loss = g.cross_entropy(fwd.logits, &targets)?;
                let lv = g.value(loss).item()? as f64;
                t_forward += fwd_start.elapsed().as_secs_f64();
                if let Some(d) = diverged(t, lv, cfg.divergence_threshold) {
                    return Ok(StepResult::Diverged(d));
                }
                loss_sum += lv;

                let bwd_start = Instant::now();
                let mut gr = g.backward(loss)?;
                for (p, v) in fwd.bindings {
                    let gv = gr.take(v).expect("bound parameters require grad");
                    match grads.get_mut(&p) {
                        Some(acc) => acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, b)| *a += b * inv_b),
                        None => {
                            grads.insert(p, if batch.len() == 1 { gv } else { gv.map(|v| v * inv_b) });
                        }
                    }
                }
                t_backward += bwd_start.elapsed().as_secs_f64();
            }

            let opt_start = Instant::now();
            if strategy.kind == StrategyKind::Importance {
                let mut sq = vec![0.0f64; n];
                for (p, g) in &grads {
                    sq[p.layer] += g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                }
                let norms: Vec<f64> = sq.into_iter().map(f64::sqrt).collect();
                update_importance(&mut self.importance, &plan, &norms, strategy.ema_alpha)?;
            }
            let exact: GradMap = grads.into_iter().map(|(p, g)| (p.name(), g)).collect();
            let mut params = self.model.trainable_mut();
            stale_cache_step(
                &mut self.optimizer,
                &mut self.cache,
                &mut params,
                &exact,
                cfg.ablation_mode.fill_mode(),
                t as u64,
            )?;
            let t_optimizer = opt_start.elapsed().as_secs_f64();
            ((loss_sum / batch.len() as f64) as f32, t_forward, t_backward, t_optimizer)
        };

        let t_step = step_start.elapsed().as_secs_f64();
        self.totals.forward += t_forward;
        self.totals.backward += t_backward;
        self.totals.optimizer += t_optimizer;
        self.totals.selection += t_selection;
        self.totals.train += t_step;
        Ok(StepResult::Done(StepMetrics {
            step: t,
            train_loss,
            r_used: plan.r_used,
            selected_layers: plan.attached(),
            t_forward,
            t_backward,
            t_optimizer,
            t_selection,
            t_step,
            cumulative_time: self.totals.train,
        }))
    }
}

/// Runs `config` on an already loaded corpus.
pub fn train_on(config: TrainConfig, corpus: Corpus) -> Result<RunReport> {
    let mut trainer = Trainer::new(config, corpus)?;
    trainer.run()?;
    Ok(trainer.report())
}

/// Loads `config.corpus_path` and trains.
pub fn train(config: TrainConfig) -> Result<RunReport> {
    let path = config
        .corpus_path
        .clone()
        .ok_or_else(|| Error::Config("corpus_path is not set".into()))?;
    let corpus = load_corpus(&path, config.eval_fraction, config.model.seq_len)?;
    train_on(config, corpus)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

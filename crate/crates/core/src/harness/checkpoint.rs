//! Directory checkpoints: `manifest.json` describes every entry of
//! `blob.bin` (little-endian f32 or i8) and carries the run's scalar state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::{load_corpus, Corpus};
use super::metrics::{Divergence, EvalPoint, PhaseTotals, StepMetrics};
use super::train::{Rngs, Trainer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{BaseWeight, LoraTarget, Model, QuantizedLinear};
use crate::optim::{GradientCache, OptimizerState};
use crate::rng::RngState;
use crate::selection::ImportanceState;

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "blob.bin";
const FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    I8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub step: usize,
    pub optimizer_t: u64,
    pub importance: Vec<f64>,
    pub rng_data: RngState,
    pub rng_select: RngState,
    pub rng_zo: RngState,
    /// Step at which each cached gradient was captured.
    pub cache_steps: BTreeMap<String, u64>,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
    pub totals: PhaseTotals,
    pub diverged: Option<Divergence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config: TrainConfig,
    pub state: RunState,
    pub entries: Vec<Entry>,
}

enum Payload<'a> {
    F32(&'a [f32]),
    I8(&'a [i8]),
}

#[derive(Default)]
struct BlobWriter {
    entries: Vec<Entry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: &[usize], payload: Payload) {
        let offset = self.bytes.len();
        let dtype = match payload {
            Payload::F32(xs) => {
                xs.iter().for_each(|x| self.bytes.extend_from_slice(&x.to_le_bytes()));
                Dtype::F32
            }
            Payload::I8(xs) => {
                self.bytes.extend(xs.iter().map(|&x| x as u8));
                Dtype::I8
            }
        };
        self.entries.push(Entry {
            name,
            dtype,
            shape: shape.to_vec(),
            offset,
            len: self.bytes.len() - offset,
        });
    }

    fn tensor(&mut self, name: String, t: &Tensor) {
        self.push(name, t.shape(), Payload::F32(t.data()));
    }
}

fn model_entries(model: &Model, w: &mut BlobWriter) {
    w.tensor("tok_emb".into(), &model.tok_emb);
    w.tensor("pos_emb".into(), &model.pos_emb);
    w.tensor("final_norm".into(), &model.final_norm);
    for (l, block) in model.blocks.iter().enumerate() {
        w.tensor(format!("layers.{l}.attn_norm"), &block.attn_norm);
        w.tensor(format!("layers.{l}.mlp_norm"), &block.mlp_norm);
        for (t, proj) in LoraTarget::ALL.into_iter().zip(&block.projections) {
            let prefix = format!("layers.{l}.{}", t.name());
            match &proj.base {
                BaseWeight::Dense(wt) => w.tensor(format!("{prefix}.weight"), wt),
                BaseWeight::Quantized(q) => {
                    let [rows, cols] = q.shape();
                    w.push(format!("{prefix}.codes"), &[rows, cols], Payload::I8(q.codes()));
                    w.push(
                        format!("{prefix}.scales"),
                        &[rows, cols / q.group_size()],
                        Payload::F32(q.scales()),
                    );
                }
            }
        }
    }
    for p in model.param_refs() {
        w.tensor(p.name(), model.param(&p).expect("listed"));
    }
}

impl Trainer {
    /// Writes the full run state to `dir` (created if needed).
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let mut w = BlobWriter::default();
        model_entries(&self.model, &mut w);
        for (name, m) in self.optimizer.moments_iter() {
            w.tensor(format!("optim.m.{name}"), &m.m);
            w.tensor(format!("optim.v.{name}"), &m.v);
        }
        for (name, (g, _)) in &self.cache.entries {
            w.tensor(format!("cache.{name}"), g);
        }
        let manifest = Manifest {
            format: FORMAT,
            config: self.config.clone(),
            state: RunState {
                step: self.step,
                optimizer_t: self.optimizer.t,
                importance: self.importance.scores.clone(),
                rng_data: RngState::capture(&self.rngs.data),
                rng_select: RngState::capture(&self.rngs.select),
                rng_zo: RngState::capture(&self.rngs.zo),
                cache_steps: self.cache.entries.iter().map(|(k, (_, s))| (k.clone(), *s)).collect(),
                metrics: self.metrics.clone(),
                evals: self.evals.clone(),
                totals: self.totals.clone(),
                diverged: self.diverged.clone(),
            },
            entries: w.entries,
        };
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(BLOB), &w.bytes)?;
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save_checkpoint`]. Without `corpus`
    /// the configured `corpus_path` is loaded.
    pub fn resume(dir: &Path, corpus: Option<Corpus>) -> Result<Self> {
        let ckpt = Checkpoint::load(dir)?;
        let corpus = match corpus {
            Some(c) => c,
            None => {
                let path = ckpt.manifest.config.corpus_path.as_ref().ok_or_else(|| {
                    Error::Config("checkpoint config has no corpus_path and no corpus was given".into())
                })?;
                load_corpus(path, ckpt.manifest.config.eval_fraction, ckpt.manifest.config.model.seq_len)?
            }
        };
        let Checkpoint { manifest, mut tensors, model } = ckpt;
        let cfg = manifest.config;
        let st = manifest.state;

        let mut optimizer = OptimizerState::new(cfg.optimizer.clone());
        optimizer.t = st.optimizer_t;
        let names: Vec<String> = model.param_refs().iter().map(|p| p.name()).collect();
        for name in &names {
            let m = tensors.remove(&format!("optim.m.{name}"));
            let v = tensors.remove(&format!("optim.v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => optimizer.set_moments(name.clone(), m, v).map_err(|e| corrupt(name, e))?,
                (None, None) => {}
                _ => return Err(corrupt(name, "only one optimizer moment present")),
            }
        }
        let mut cache = GradientCache::default();
        for (name, step) in st.cache_steps {
            let key = format!("cache.{name}");
            let g = tensors.remove(&key).ok_or_else(|| corrupt(&key, "missing"))?;
            cache.entries.insert(name, (g, step));
        }
        if st.importance.len() != model.n_layers() {
            return Err(corrupt("importance", "length does not match layer count"));
        }
        let rngs = Rngs {
            data: st.rng_data.restore()?,
            select: st.rng_select.restore()?,
            zo: st.rng_zo.restore()?,
        };
        let mut trainer = Trainer::assemble(cfg, model, optimizer, ImportanceState { scores: st.importance }, rngs, corpus);
        trainer.cache = cache;
        trainer.step = st.step;
        trainer.metrics = st.metrics;
        trainer.evals = st.evals;
        trainer.totals = st.totals;
        trainer.diverged = st.diverged;
        Ok(trainer)
    }
}

fn corrupt(entry: &str, detail: impl ToString) -> Error {
    Error::Corruption {
        entry: entry.to_string(),
        detail: detail.to_string(),
    }
}

enum Loaded {
    F32(Tensor),
    I8(Vec<usize>, Vec<i8>),
}

/// A checkpoint read back from disk: the model is rebuilt, the remaining
/// tensors (optimizer, cache) are kept by name.
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_text = std::fs::read_to_string(dir.join(MANIFEST)).map_err(|e| corrupt(MANIFEST, e))?;
        let manifest: Manifest = serde_json::from_str(&manifest_text).map_err(|e| corrupt(MANIFEST, e))?;
        if manifest.format != FORMAT {
            return Err(corrupt(MANIFEST, format!("unsupported format {}", manifest.format)));
        }
        let blob = std::fs::read(dir.join(BLOB)).map_err(|e| corrupt(BLOB, e))?;

        let mut loaded: BTreeMap<String, Loaded> = BTreeMap::new();
        let mut covered = 0usize;
        for e in &manifest.entries {
            let numel: usize = e.shape.iter().product();
            if e.len != numel * e.dtype.size() {
                return Err(corrupt(&e.name, format!("{} bytes for shape {:?}", e.len, e.shape)));
            }
            let bytes = e
                .offset
                .checked_add(e.len)
                .and_then(|end| blob.get(e.offset..end))
                .ok_or_else(|| corrupt(&e.name, format!("range {}+{} beyond blob of {} bytes", e.offset, e.len, blob.len())))?;
            covered += e.len;
            let value = match e.dtype {
                Dtype::F32 => {
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Loaded::F32(Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(&e.name, err))?)
                }
                Dtype::I8 => Loaded::I8(e.shape.clone(), bytes.iter().map(|&b| b as i8).collect()),
            };
            if loaded.insert(e.name.clone(), value).is_some() {
                return Err(corrupt(&e.name, "duplicate entry"));
            }
        }
        if covered != blob.len() {
            return Err(corrupt(BLOB, format!("{} bytes described, {} present", covered, blob.len())));
        }

        fn take(loaded: &mut BTreeMap<String, Loaded>, name: &str, shape: &[usize]) -> Result<Tensor> {
            match loaded.remove(name) {
                Some(Loaded::F32(t)) if t.shape() == shape => Ok(t),
                Some(Loaded::F32(t)) => Err(corrupt(name, format!("shape {:?}, expected {shape:?}", t.shape()))),
                Some(Loaded::I8(..)) => Err(corrupt(name, "expected f32 data")),
                None => Err(corrupt(name, "missing")),
            }
        }

        let cfg = &manifest.config.model;
        // Structure (and adapter presence) comes from the config; every value is overwritten.
        let mut model = Model::init(cfg.clone(), manifest.config.seed)?;
        let d = cfg.d_model;
        model.tok_emb = take(&mut loaded, "tok_emb", &[cfg.vocab_size, d])?;
        model.pos_emb = take(&mut loaded, "pos_emb", &[cfg.seq_len, d])?;
        model.final_norm = take(&mut loaded, "final_norm", &[d])?;
        for (l, block) in model.blocks.iter_mut().enumerate() {
            block.attn_norm = take(&mut loaded, &format!("layers.{l}.attn_norm"), &[d])?;
            block.mlp_norm = take(&mut loaded, &format!("layers.{l}.mlp_norm"), &[d])?;
            for (t, proj) in LoraTarget::ALL.into_iter().zip(block.projections.iter_mut()) {
                let prefix = format!("layers.{l}.{}", t.name());
                let (d_in, d_out) = cfg.projection_dims(t);
                proj.base = if cfg.quantize_base {
                    let name = format!("{prefix}.codes");
                    let codes = match loaded.remove(&name) {
                        Some(Loaded::I8(shape, codes)) if shape == [d_out, d_in] => codes,
                        Some(_) => return Err(corrupt(&name, "expected i8 codes of the projection shape")),
                        None => return Err(corrupt(&name, "missing")),
                    };
                    let scales = take(&mut loaded, &format!("{prefix}.scales"), &[d_out, d_in / cfg.quant_group_size])?;
                    BaseWeight::Quantized(
                        QuantizedLinear::from_parts(d_out, d_in, cfg.quant_group_size, codes, scales.into_data(), None)
                            .map_err(|e| corrupt(&name, e))?,
                    )
                } else {
                    BaseWeight::Dense(take(&mut loaded, &format!("{prefix}.weight"), &[d_out, d_in])?)
                };
            }
        }
        for p in model.param_refs() {
            let shape = model.param(&p).expect("listed").shape().to_vec();
            *model.param_mut(&p).expect("listed") = take(&mut loaded, &p.name(), &shape)?;
        }
        let mut tensors = BTreeMap::new();
        for (name, v) in loaded {
            match v {
                Loaded::F32(t) => {
                    tensors.insert(name, t);
                }
                Loaded::I8(..) => return Err(corrupt(&name, "unexpected i8 entry")),
            }
        }
        Ok(Self { manifest, model, tensors })
    }
}

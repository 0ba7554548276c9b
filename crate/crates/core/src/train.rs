//! Training loop, evaluation driver and the fusion-layer ablation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LayerSelection;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{preprocess_eval, preprocess_train, read_dataset, read_vocab, ModelInputs, Sample};
use crate::error::{Error, Result};
use crate::head::LossBundle;
use crate::metrics::{format_table, top5_map, MetricReport};
use crate::model::GanoModel;
use crate::nn::{Graph, ParamStore, Tensor};
use crate::types::{StaPrediction, Vocab};
use crate::world::generate_dataset;

pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

/// `0.5 · base · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule length {total_steps}")));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    if 2 * step == total_steps {
        return Ok(0.5 * base_lr);
    }
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    /// `v ← μ v + (g + λ w)`, `w ← w − lr · v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for (id, grad) in ids.into_iter().zip(grads) {
            let v = &mut self.velocity[id.index()];
            let w = store.get_mut(id);
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut().iter_mut()).zip(grad.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub clips: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
}

/// Generates the synthetic corpus or reads the configured data directory.
pub fn load_samples(config: &RunConfig) -> Result<Vec<Sample>> {
    match &config.data {
        Some(dir) => {
            let vocab = read_vocab(dir)?;
            if vocab != config.world.vocab {
                return Err(Error::Config(format!(
                    "dataset vocabulary {vocab:?} differs from the configured {:?}",
                    config.world.vocab
                )));
            }
            read_dataset(dir, &vocab)
        }
        None => Ok(generate_dataset(&config.world, config.train_clips)?
            .into_iter()
            .map(Sample::from)
            .collect()),
    }
}

/// Model, parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: GanoModel,
    pub store: ParamStore,
    pub sgd: Sgd,
    pub step: usize,
    pub epoch: usize,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let model = GanoModel::new(&mut store, &config.model, &config.world.vocab, config.preprocess.frames, 3)?;
        let sgd = Sgd::new(&store, config.optim.momentum, config.optim.weight_decay);
        Ok(Self {
            config: config.clone(),
            model,
            store,
            sgd,
            step: 0,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(&ckpt.config)?;
        ckpt.restore(&mut t.store)?;
        if !ckpt.velocity.is_empty() {
            if ckpt.velocity.len() != t.sgd.velocity.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            t.sgd.velocity = ckpt.velocity.clone();
        }
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.config, self.epoch, self.step, &self.store, &self.sgd.velocity)
    }

    pub fn steps_per_epoch(&self, clips: usize) -> usize {
        clips.div_ceil(self.config.optim.batch_size)
    }

    /// Schedule length: all epochs, capped by `max_steps`.
    pub fn total_steps(&self, clips: usize) -> usize {
        let full = self.config.optim.epochs * self.steps_per_epoch(clips);
        self.config.optim.max_steps.map_or(full, |m| m.min(full))
    }

    /// Averaged losses and gradients over a batch, then one SGD step at `lr`.
    pub fn train_step(&mut self, batch: &[ModelInputs], lr: f64) -> Result<StepLog> {
        let mut grads: Vec<Tensor> = self.store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let mut mean = LossBundle::default();
        let usable: Vec<&ModelInputs> = batch
            .iter()
            .filter(|x| {
                if x.annotations.is_empty() {
                    warn!(
                        "step {}: clip {} has no annotations after preprocessing; skipped",
                        self.step, x.clip_id
                    );
                }
                !x.annotations.is_empty()
            })
            .collect();
        let scale = 1.0 / usable.len().max(1) as f64;
        for (k, inputs) in usable.iter().enumerate() {
            let mut rng = sample_rng(self.config.seed ^ 0x7a26_539f, (self.step * batch.len() + k) as u64);
            let mut g = Graph::new();
            let loss = self.model.loss(&mut g, &self.store, inputs, &mut rng)?;
            let bundle = loss.bundle(&g);
            if let Some(i) = bundle.components().iter().position(|c| !c.is_finite()) {
                return Err(Error::NonFinite {
                    component: LossBundle::NAMES[i].into(),
                    step: self.step,
                });
            }
            mean.accumulate(&bundle, scale);
            let back = g.backward(loss.total);
            for (id, var) in g.param_vars() {
                if let Some(grad) = back.wrt(var) {
                    grads[id.index()].axpy(scale, grad);
                }
            }
        }
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                component: "gradient".into(),
                step: self.step,
            });
        }
        if let Some(clip) = self.config.optim.grad_clip {
            let norm = grads.iter().map(|t| t.dot(t)).sum::<f64>().sqrt();
            if norm > clip {
                grads
                    .iter_mut()
                    .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= clip / norm));
            }
        }
        if !usable.is_empty() {
            self.sgd.step(&mut self.store, &grads, lr);
        }
        let log = StepLog {
            step: self.step,
            epoch: self.epoch,
            lr,
            clips: usable.len(),
            losses: mean,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs the schedule from the current step to its end.
    pub fn fit(&mut self, samples: &[Sample], out: Option<&Path>) -> Result<Vec<StepLog>> {
        self.fit_until(samples, out, usize::MAX)
    }

    /// Runs the schedule until step `stop` (or its end), keeping the full-length schedule.
    pub fn fit_until(&mut self, samples: &[Sample], out: Option<&Path>, stop: usize) -> Result<Vec<StepLog>> {
        if samples.is_empty() {
            return Err(Error::Config("no training clips".into()));
        }
        let total = self.total_steps(samples.len());
        let end = total.min(stop);
        let per_epoch = self.steps_per_epoch(samples.len());
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOSS_LOG_FILE);
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(self.step > 0)
                    .write(true)
                    .truncate(self.step == 0)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, BufWriter::new(file)))
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.step < end {
            self.epoch = self.step / per_epoch;
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut sample_rng(self.config.seed ^ 0x5eed_0bde, self.epoch as u64));
            let start = self.step % per_epoch;
            for chunk in order.chunks(self.config.optim.batch_size).skip(start) {
                if self.step >= end {
                    break;
                }
                let mut batch = Vec::with_capacity(chunk.len());
                for (k, &i) in chunk.iter().enumerate() {
                    let s = &samples[i];
                    let mut rng = sample_rng(self.config.seed ^ 0xa11_9e55, (self.step * chunk.len() + k) as u64);
                    batch.push(preprocess_train(
                        &s.clip_id,
                        &s.clip,
                        &s.detections,
                        &s.annotations,
                        &self.config.preprocess,
                        &mut rng,
                    )?);
                }
                let lr = cosine_lr(self.step, total, self.config.optim.learning_rate)?;
                let entry = self.train_step(&batch, lr)?;
                if let Some((path, w)) = log_file.as_mut() {
                    let line = serde_json::to_string(&entry).expect("log entry serializes");
                    writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
                }
                if entry.step % 10 == 0 {
                    info!("step {} lr {:.3e} loss {:.4}", entry.step, entry.lr, entry.losses.total);
                }
                history.push(entry);
            }
            let finished = self.step / per_epoch;
            if let Some(dir) = out {
                if self.step.is_multiple_of(per_epoch) || self.step >= total {
                    self.epoch = finished;
                    self.write_checkpoints(dir)?;
                }
            }
        }
        if let Some((path, mut w)) = log_file {
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(history)
    }

    fn write_checkpoints(&self, dir: &Path) -> Result<()> {
        let ckpt = self.checkpoint();
        let ckpt_dir = dir.join(CHECKPOINT_DIR);
        if self.epoch.is_multiple_of(self.config.checkpoint_every) {
            ckpt.save(&ckpt_dir.join(format!("epoch-{:04}.ckpt", self.epoch)))?;
        }
        ckpt.save(&ckpt_dir.join(LATEST_CHECKPOINT))
    }

    pub fn predict(&self, samples: &[Sample]) -> Result<BTreeMap<String, Vec<StaPrediction>>> {
        predict(&self.model, &self.store, samples, &self.config)
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<Evaluation> {
        evaluate(&self.model, &self.store, samples, &self.config)
    }
}

/// Predictions per clip in the clip's original still-frame coordinates.
pub fn predict(
    model: &GanoModel,
    store: &ParamStore,
    samples: &[Sample],
    config: &RunConfig,
) -> Result<BTreeMap<String, Vec<StaPrediction>>> {
    let mut out = BTreeMap::new();
    for s in samples {
        let inputs = preprocess_eval(&s.clip_id, &s.clip, &s.detections, &s.annotations, &config.preprocess)?;
        let bounds = inputs.geometry.still_source();
        let preds = model
            .predict(store, &inputs)?
            .into_iter()
            .map(|p| StaPrediction {
                bbox: inputs.geometry.inverse_still(&p.bbox).clip(bounds),
                ..p
            })
            .filter(|p| p.bbox.is_valid())
            .collect();
        out.insert(s.clip_id.clone(), preds);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: BTreeMap<String, Vec<StaPrediction>>,
}

pub fn evaluate(model: &GanoModel, store: &ParamStore, samples: &[Sample], config: &RunConfig) -> Result<Evaluation> {
    let predictions = predict(model, store, samples, config)?;
    let gts = crate::dataset::ground_truth(samples);
    let report = top5_map(&predictions, &gts, &config.metrics)?;
    Ok(Evaluation { report, predictions })
}

/// Rejects a dataset whose vocabulary differs from the checkpoint's.
pub fn check_vocab(checkpoint: &Checkpoint, dataset: &Vocab) -> Result<()> {
    let own = checkpoint.config.world.vocab;
    if own != *dataset {
        return Err(Error::Config(format!(
            "vocabulary mismatch: checkpoint {own:?}, dataset {dataset:?}"
        )));
    }
    Ok(())
}

/// Trains then evaluates on the training clips.
pub fn train(config: &RunConfig, samples: &[Sample], out: Option<&Path>) -> Result<(Trainer, Vec<StepLog>)> {
    let mut trainer = Trainer::new(config)?;
    let history = trainer.fit(samples, out)?;
    Ok((trainer, history))
}

pub const ABLATION_ROWS: [(LayerSelection, &str); 3] = [
    (LayerSelection::First, "first layer"),
    (LayerSelection::Top, "top layer"),
    (LayerSelection::All, "all layers"),
];

pub const ABLATION_TABLE_FILE: &str = "ablation.md";

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub rows: Vec<(LayerSelection, MetricReport)>,
    pub table: String,
    pub run_dirs: Vec<PathBuf>,
}

/// Three runs differing only in the fused layers, each evaluated on `samples`.
pub fn ablate(config: &RunConfig, samples: &[Sample], out: Option<&Path>) -> Result<Ablation> {
    let mut rows = Vec::new();
    let mut labelled = Vec::new();
    let mut run_dirs = Vec::new();
    for (sel, label) in ABLATION_ROWS {
        let mut cfg = config.clone();
        cfg.model.attention.layers = sel;
        let dir = out.map(|d| d.join(sel.to_string()));
        if let Some(d) = &dir {
            run_dirs.push(d.clone());
        }
        let mut trainer = Trainer::new(&cfg)?;
        if trainer.total_steps(samples.len()) > 0 {
            trainer.fit(samples, dir.as_deref())?;
        }
        let eval = trainer.evaluate(samples)?;
        info!("ablation {label}: {}", eval.report);
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            trainer.checkpoint().save(&d.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT))?;
            let path = d.join("report.txt");
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(eval.report.key_values().as_bytes())
                .map_err(|e| Error::io(&path, e))?;
        }
        rows.push((sel, eval.report));
        labelled.push((label.to_string(), eval.report));
    }
    let table = format_table(&labelled);
    if let Some(d) = out {
        let path = d.join(ABLATION_TABLE_FILE);
        fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    }
    Ok(Ablation { rows, table, run_dirs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_are_exact() {
        assert_eq!(cosine_lr(0, 10, 0.3).unwrap(), 0.3);
        assert_eq!(cosine_lr(5, 10, 0.3).unwrap(), 0.15);
        assert_eq!(cosine_lr(10, 10, 0.3).unwrap(), 0.0);
        assert!(cosine_lr(0, 0, 0.3).is_err());
        let mid = cosine_lr(3, 10, 1.0).unwrap();
        assert!((mid - 0.5 * (1.0 + (0.3 * std::f64::consts::PI).cos())).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut store = ParamStore::new(1);
        store.add("w", [3], crate::nn::Init::Uniform(1.0));
        let before = store.clone();
        let mut sgd = Sgd::new(&store, 0.9, 1e-3);
        sgd.step(&mut store, &[Tensor::full([3], 5.0)], 0.0);
        assert_eq!(store, before);
    }

    #[test]
    fn momentum_step_matches_hand_computation() {
        let mut store = ParamStore::new(1);
        let id = store.add("w", [1], crate::nn::Init::Constant(2.0));
        let mut sgd = Sgd::new(&store, 0.5, 0.1);
        sgd.step(&mut store, &[Tensor::full([1], 1.0)], 0.1);
        // v = 1 + 0.1*2 = 1.2, w = 2 - 0.12
        assert!((store.get(id).data()[0] - 1.88).abs() < 1e-15);
        sgd.step(&mut store, &[Tensor::full([1], 1.0)], 0.1);
        // v = 0.6 + 1 + 0.188, w = 1.88 - 0.1788
        assert!((store.get(id).data()[0] - (1.88 - 0.1788)).abs() < 1e-15);
    }
}

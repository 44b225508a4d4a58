//! Training, evaluation, ablation and visualisation around the model, plus
//! the checkpoint format.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamGrads};
use crate::error::{bail, Error, Result};
use crate::geometry::{BevGridSpec, CameraIntrinsics};
use crate::losses::{
    compute_class_weights, objective, Distance, LossParts, LossWeights, Scheme, SchemeConfig, Targets,
    WeightNormalization,
};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::net::{image_to_chw, Mode, Model, ModelConfig, ParamCount};
use crate::rng::indexed_substream;
use crate::synthworld::{Dataset, SampleRecord};
use crate::tensor::{DType, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: String,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    /// Epoch indices (0-based) at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: "adamw".into(),
            lr: 2e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 10.0,
            decay_epochs: vec![22, 26],
            decay_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Must match the dataset grid when given.
    pub grid: Option<BevGridSpec>,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub scheme: SchemeConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Used when `loss.class_weights` is empty.
    pub class_weight_normalization: WeightNormalization,
    pub flip_probability: f64,
    /// Half-width of the brightness, contrast and saturation factors drawn
    /// per training sample; 0 disables photometric jitter.
    pub photometric_jitter: f64,
    /// Stops after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Validate every this many epochs (and after the last).
    pub eval_every: usize,
    pub train_split: String,
    pub val_split: String,
    pub save_checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            grid: None,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            scheme: SchemeConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 8,
            seed: 0,
            precision: Precision::F32,
            class_weight_normalization: WeightNormalization::MeanOne,
            flip_probability: 0.5,
            photometric_jitter: 0.0,
            max_steps: None,
            eval_every: 1,
            train_split: "train".into(),
            val_split: "val".into(),
            save_checkpoints: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !o.algorithm.eq_ignore_ascii_case("adamw") {
            bail!(Config, "unsupported optimizer '{}'", o.algorithm);
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            bail!(Config, "learning rate must be positive");
        }
        if !(o.clip_norm > 0.0) {
            bail!(Config, "clip norm must be positive");
        }
        if !(o.decay_factor > 0.0 && o.decay_factor <= 1.0) {
            bail!(Config, "decay factor must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&o.betas.0) || !(0.0..1.0).contains(&o.betas.1) || !(o.eps > 0.0) {
            bail!(Config, "invalid Adam moments or epsilon");
        }
        if !(o.weight_decay >= 0.0) {
            bail!(Config, "weight decay must be non-negative");
        }
        if o.decay_epochs.iter().any(|&e| e >= self.epochs) {
            warn!("decay epochs {:?} past the last epoch {} are not reached", o.decay_epochs, self.epochs);
        }
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(Config, "epochs and batch size must be positive");
        }
        if self.eval_every == 0 {
            bail!(Config, "eval_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            bail!(Config, "flip probability must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.photometric_jitter) {
            bail!(Config, "photometric jitter must lie in [0, 1)");
        }
        if self.model.mode != Mode::Hybrid && self.scheme.scheme != Scheme::None {
            bail!(
                Config,
                "scheme {} needs the hybrid model, got {}",
                self.scheme.scheme.name(),
                self.model.mode.name()
            );
        }
        Ok(())
    }
}

/// Dataset facts a checkpoint needs to rebuild and evaluate the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
    pub static_ids: Vec<usize>,
    pub dynamic_ids: Vec<usize>,
    pub grid: BevGridSpec,
    pub intrinsics: CameraIntrinsics,
    pub fingerprint: String,
}

impl DatasetMeta {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let m = &ds.manifest;
        let intrinsics = m
            .samples
            .first()
            .map(|s| s.intrinsics)
            .ok_or_else(|| Error::Data("dataset is empty".into()))?;
        Ok(Self {
            class_names: m.class_names.clone(),
            static_ids: m.static_classes.clone(),
            dynamic_ids: m.dynamic_classes.clone(),
            grid: m.grid.clone(),
            intrinsics,
            fingerprint: m.fingerprint(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// A sample in network layout.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub labels: Tensor<T>,
    pub validity: Vec<bool>,
    pub intrinsics: CameraIntrinsics,
}

impl<T: Float> PreparedSample<T> {
    pub fn from_record(rec: &SampleRecord, classes: usize, grid: &BevGridSpec) -> Result<Self> {
        let img = &rec.fv_image;
        let image = image_to_chw(&img.to_f32(), img.height, img.width)?;
        if rec.bev_labels.len() != classes * grid.num_cells() {
            bail!(Data, "sample {} has {} label cells for {} classes", rec.id, rec.bev_labels.len(), classes);
        }
        let labels = Tensor::from_vec(
            &[classes, grid.depth_cells, grid.lateral_cells],
            rec.bev_labels.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )?;
        Ok(Self {
            id: rec.id.clone(),
            image,
            labels,
            validity: rec.validity.clone(),
            intrinsics: rec.intrinsics,
        })
    }

    /// Left-right mirror of image, labels, validity and principal point.
    pub fn flipped(&self) -> Self {
        let flip_last = |t: &Tensor<T>| -> Tensor<T> {
            let w = *t.shape().last().unwrap();
            let mut d = t.data().to_vec();
            for row in d.chunks_mut(w) {
                row.reverse();
            }
            Tensor::from_vec(t.shape(), d).expect("same shape")
        };
        let w = self.labels.shape()[2];
        let mut validity = self.validity.clone();
        for row in validity.chunks_mut(w) {
            row.reverse();
        }
        Self {
            id: self.id.clone(),
            image: flip_last(&self.image),
            labels: flip_last(&self.labels),
            validity,
            intrinsics: self.intrinsics.flipped(),
        }
    }

    /// Scales brightness, then contrast around the image mean, then
    /// saturation around each pixel's grey value; clamps to `[0, 1]`.
    pub fn jittered(&self, brightness: f64, contrast: f64, saturation: f64) -> Self {
        let plane = self.image.len() / 3;
        let mut d: Vec<f64> = self.image.data().iter().map(|v| v.as_f64() * brightness).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        for v in &mut d {
            *v = (*v - mean) * contrast + mean;
        }
        for p in 0..plane {
            let grey = (d[p] + d[plane + p] + d[2 * plane + p]) / 3.0;
            for c in 0..3 {
                let v = &mut d[c * plane + p];
                *v = ((*v - grey) * saturation + grey).clamp(0.0, 1.0);
            }
        }
        Self {
            image: Tensor::from_vec(self.image.shape(), d.into_iter().map(T::f).collect()).expect("same shape"),
            ..self.clone()
        }
    }
}

pub fn prepare_split<T: Float>(ds: &Dataset, split: &str) -> Result<Vec<PreparedSample<T>>> {
    let classes = ds.num_classes();
    let grid = &ds.manifest.grid;
    ds.split(split)?
        .map(|i| PreparedSample::from_record(&ds.load(i)?, classes, grid))
        .collect()
}

/// Per-class fraction of positive cells among valid cells.
pub fn class_frequencies<T: Float>(samples: &[PreparedSample<T>]) -> Vec<f64> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let classes = first.labels.shape()[0];
    let plane = first.validity.len();
    let mut pos = vec![0usize; classes];
    let mut valid = 0usize;
    for s in samples {
        valid += s.validity.iter().filter(|&&v| v).count();
        for c in 0..classes {
            pos[c] += (0..plane)
                .filter(|&k| s.validity[k] && s.labels.data()[c * plane + k] > T::f(0.5))
                .count();
        }
    }
    pos.iter().map(|&p| p as f64 / valid.max(1) as f64).collect()
}

/// Class weights from training frequencies; classes that never occur get
/// the smallest defined weight.
pub fn derive_class_weights(freqs: &[f64], norm: WeightNormalization) -> Result<Vec<f64>> {
    let w = compute_class_weights(freqs, norm)?;
    let fallback = w.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let fallback = if fallback.is_finite() { fallback } else { 1.0 };
    Ok(w.into_iter().map(|v| v.unwrap_or(fallback)).collect())
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: &crate::autograd::ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut crate::autograd::ParamStore<T>, grads: &ParamGrads<T>, cfg: &OptimizerConfig, lr: f64) {
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = g.as_f64();
                let mf = b1 * m.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * v.as_f64() + (1.0 - b2) * gf * gf;
                *m = T::f(mf);
                *v = T::f(vf);
                let pf = p.as_f64();
                let upd = lr * ((mf / c1) / ((vf / c2).sqrt() + cfg.eps) + cfg.weight_decay * pf);
                *p = T::f(pf - upd);
            }
        }
    }
}

/// One optimizer step in the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub batch: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_miou: Option<f64>,
}

/// Scales gradients so their global norm is at most `max_norm`; returns
/// the norms before and after.
pub fn clip_gradients<T: Float>(grads: &mut ParamGrads<T>, max_norm: f64) -> (f64, f64) {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(T::f(max_norm / norm));
    }
    (norm, grads.global_norm())
}

/// Scores of one sample as `f64`.
pub fn predict<T: Float>(model: &Model<T>, s: &PreparedSample<T>, mode: Mode) -> Result<Tensor<f64>> {
    Ok(model.forward(&s.image, &s.intrinsics, mode)?.scores.cast())
}

pub fn evaluate_model<T: Float>(
    model: &Model<T>,
    samples: &[PreparedSample<T>],
    mode: Mode,
    static_ids: &[usize],
    dynamic_ids: &[usize],
) -> Result<MetricReport> {
    let classes = model.config.num_classes;
    let mut acc = MetricAccumulator::new(classes);
    for s in samples {
        let scores = predict(model, s, mode)?;
        let gt: Vec<bool> = s.labels.data().iter().map(|&v| v > T::f(0.5)).collect();
        acc.add(scores.data(), &gt, &s.validity)?;
    }
    acc.finish(static_ids, dynamic_ids)
}

/// Training state that can be checkpointed and resumed.
pub struct Trainer<T: Float> {
    pub config: RunConfig,
    pub meta: DatasetMeta,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub class_weights: Vec<f64>,
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: u64,
    pub best_miou: Option<f64>,
    pub log: Vec<StepRecord>,
    pub epochs_log: Vec<EpochRecord>,
    pub last_report: Option<MetricReport>,
    train: Vec<PreparedSample<T>>,
    val: Vec<PreparedSample<T>>,
}

impl<T: Float> Trainer<T> {
    pub fn new(
        config: RunConfig,
        meta: DatasetMeta,
        train: Vec<PreparedSample<T>>,
        val: Vec<PreparedSample<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if config.model.num_classes != meta.num_classes() {
            bail!(
                Config,
                "model has {} classes, dataset {}",
                config.model.num_classes,
                meta.num_classes()
            );
        }
        if let Some(g) = &config.grid {
            if g != &meta.grid {
                bail!(Config, "configured grid differs from the dataset grid");
            }
        }
        if train.is_empty() {
            bail!(Data, "training split is empty");
        }
        let class_weights = if config.loss.class_weights.is_empty() {
            derive_class_weights(&class_frequencies(&train), config.class_weight_normalization)?
        } else {
            config.loss.class_weights.clone()
        };
        LossWeights {
            class_weights: class_weights.clone(),
            ..config.loss.clone()
        }
        .validate(meta.num_classes())?;
        let model = Model::new(config.model.clone(), meta.grid.clone(), &meta.intrinsics, config.seed)?;
        let optimizer = AdamW::new(&model.params);
        Ok(Self {
            config,
            meta,
            model,
            optimizer,
            class_weights,
            epoch: 0,
            global_step: 0,
            best_miou: None,
            log: Vec::new(),
            epochs_log: Vec::new(),
            last_report: None,
            train,
            val,
        })
    }

    pub fn from_dataset(config: RunConfig, ds: &Dataset) -> Result<Self> {
        let meta = DatasetMeta::from_dataset(ds)?;
        let train = prepare_split(ds, &config.train_split)?;
        let val = if ds.split(&config.val_split).is_ok() {
            prepare_split(ds, &config.val_split)?
        } else {
            Vec::new()
        };
        Self::new(config, meta, train, val)
    }

    /// Rebuilds a trainer from a checkpoint, continuing its counters.
    pub fn resume(ckpt: Checkpoint<T>, train: Vec<PreparedSample<T>>, val: Vec<PreparedSample<T>>) -> Result<Self> {
        let mut t = Self::new(ckpt.meta.config.clone(), ckpt.meta.dataset.clone(), train, val)?;
        if ckpt.meta.dataset.fingerprint != t.meta.fingerprint {
            warn!("resuming on a dataset whose checksums differ from the checkpoint's");
        }
        ckpt.load_into(&mut t.model)?;
        t.class_weights = ckpt.meta.class_weights.clone();
        t.optimizer = ckpt.optimizer;
        t.epoch = ckpt.meta.epoch;
        t.global_step = ckpt.meta.global_step;
        t.best_miou = ckpt.meta.best_miou;
        t.load_previous_logs();
        Ok(t)
    }

    /// Picks up the step and epoch logs written before the checkpoint.
    fn load_previous_logs(&mut self) {
        let dir = &self.config.output;
        if let Ok(text) = fs::read_to_string(dir.join("loss_log.jsonl")) {
            let steps: std::result::Result<Vec<StepRecord>, _> =
                text.lines().map(serde_json::from_str).collect();
            match steps {
                Ok(s) => self.log = s.into_iter().filter(|r| r.step <= self.global_step).collect(),
                Err(e) => warn!("ignoring unreadable loss log: {e}"),
            }
        }
        if let Ok(text) = fs::read_to_string(dir.join("epochs.json")) {
            match serde_json::from_str::<Vec<EpochRecord>>(&text) {
                Ok(e) => self.epochs_log = e.into_iter().filter(|r| r.epoch < self.epoch).collect(),
                Err(e) => warn!("ignoring unreadable epoch log: {e}"),
            }
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            class_weights: self.class_weights.clone(),
            ..self.config.loss.clone()
        }
    }

    pub fn train_samples(&self) -> &[PreparedSample<T>] {
        &self.train
    }

    pub fn val_samples(&self) -> &[PreparedSample<T>] {
        &self.val
    }

    fn done(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.global_step >= m)
    }

    /// Loss and parameter gradients averaged over `batch`.
    pub fn batch_gradients(&self, batch: &[PreparedSample<T>]) -> Result<(LossParts, ParamGrads<T>)> {
        let lw = self.loss_weights();
        let extent_rows: Vec<usize> = (0..self.meta.grid.extents.len())
            .map(|e| self.meta.grid.extent_depth_cells(e))
            .collect();
        let mut total = ParamGrads::zeros_like(&self.model.params);
        let mut parts = LossParts::default();
        let share = 1.0 / batch.len() as f64;
        for s in batch {
            let mut g = Graph::new(&self.model.params);
            let fwd = self.model.forward_graph(&mut g, &s.image, &s.intrinsics, self.config.model.mode)?;
            let targets = Targets {
                labels: &s.labels,
                validity: &s.validity,
            };
            let (node, p) = objective(&mut g, &fwd, &targets, &lw, &self.config.scheme, &extent_rows)?;
            let grads = g.backward(node)?.into_param_grads(&self.model.params);
            total.accumulate(&grads, T::f(share));
            parts.semantic += p.semantic * share;
            parts.uncertainty += p.uncertainty * share;
            parts.mutual += p.mutual * share;
            parts.total += p.total * share;
        }
        Ok((parts, total))
    }

    fn dump_batch(&self, batch_id: &str, ids: &[String], msg: &str) {
        let out = &self.config.output;
        if fs::create_dir_all(out).is_err() {
            return;
        }
        let doc = serde_json::json!({ "batch": batch_id, "samples": ids, "error": msg });
        let _ = fs::write(out.join(format!("nonfinite_{batch_id}.json")), doc.to_string());
    }

    /// Runs one epoch (or until `max_steps`). Returns `None` when finished.
    pub fn run_epoch(&mut self) -> Result<Option<EpochRecord>> {
        if self.done() {
            return Ok(None);
        }
        let epoch = self.epoch;
        let lr = self.config.optimizer.lr_at(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut indexed_substream(self.config.seed, "order", epoch as u64));
        let mut aug = indexed_substream(self.config.seed, "augment", epoch as u64);
        let flips: Vec<bool> = order
            .iter()
            .map(|_| aug.random_bool(self.config.flip_probability))
            .collect();
        let j = self.config.photometric_jitter;
        let jitter: Vec<[f64; 3]> = if j > 0.0 {
            let mut r = indexed_substream(self.config.seed, "photometric", epoch as u64);
            order
                .iter()
                .map(|_| std::array::from_fn(|_| r.random_range(1.0 - j..=1.0 + j)))
                .collect()
        } else {
            Vec::new()
        };
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            if self.config.max_steps.is_some_and(|m| self.global_step >= m) {
                break;
            }
            let start = b * self.config.batch_size;
            let batch: Vec<PreparedSample<T>> = chunk
                .iter()
                .zip(&flips[start..])
                .enumerate()
                .map(|(k, (&i, &f))| {
                    let s = if f { self.train[i].flipped() } else { self.train[i].clone() };
                    match jitter.get(start + k) {
                        Some(&[b, c, sat]) => s.jittered(b, c, sat),
                        None => s,
                    }
                })
                .collect();
            let batch_id = format!("e{epoch}b{b}");
            let ids: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();
            let result = self.batch_gradients(&batch).and_then(|(parts, grads)| {
                if !grads.is_finite() {
                    return Err(Error::Numerical("non-finite gradient".into()));
                }
                Ok((parts, grads))
            });
            let (parts, mut grads) = match result {
                Ok(v) => v,
                Err(Error::Numerical(msg)) => {
                    self.dump_batch(&batch_id, &ids, &msg);
                    return Err(Error::Numerical(format!("batch {batch_id} (samples {ids:?}): {msg}")));
                }
                Err(e) => return Err(e),
            };
            let (grad_norm, clipped_norm) = clip_gradients(&mut grads, self.config.optimizer.clip_norm);
            self.optimizer
                .update(&mut self.model.params, &grads, &self.config.optimizer, lr);
            self.global_step += 1;
            loss_sum += parts.total;
            batches += 1;
            self.log.push(StepRecord {
                epoch,
                step: self.global_step,
                batch: b,
                lr,
                loss: parts,
                grad_norm,
                clipped_norm,
            });
        }
        self.epoch += 1;
        let last = self.done();
        let val_miou = if !self.val.is_empty() && (last || self.epoch % self.config.eval_every == 0) {
            let r = evaluate_model(
                &self.model,
                &self.val,
                self.config.model.mode,
                &self.meta.static_ids,
                &self.meta.dynamic_ids,
            )?;
            let m = r.miou;
            self.last_report = Some(r);
            m
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / batches.max(1) as f64,
            val_miou,
        };
        info!(
            "epoch {} lr {:.2e} loss {:.5} val mIoU {:?}",
            epoch, lr, rec.mean_loss, val_miou
        );
        if let Some(m) = val_miou {
            if self.best_miou.is_none_or(|b| m > b) {
                self.best_miou = Some(m);
                if self.config.save_checkpoints {
                    self.save(&self.config.output.join("best.ckpt"))?;
                }
            }
        }
        self.epochs_log.push(rec.clone());
        Ok(Some(rec))
    }

    /// Runs until the configured epochs or step limit, then writes the last
    /// checkpoint and the loss log.
    pub fn run(&mut self) -> Result<()> {
        while self.run_epoch()?.is_some() {}
        if self.config.save_checkpoints {
            self.save(&self.config.output.join("last.ckpt"))?;
            self.write_log()?;
        }
        Ok(())
    }

    pub fn write_log(&self) -> Result<()> {
        fs::create_dir_all(&self.config.output)?;
        let mut text = String::new();
        for r in &self.log {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(self.config.output.join("loss_log.jsonl"), text)?;
        fs::write(
            self.config.output.join("epochs.json"),
            serde_json::to_string_pretty(&self.epochs_log)?,
        )?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            meta: CheckpointMeta {
                config: self.config.clone(),
                dataset: self.meta.clone(),
                class_weights: self.class_weights.clone(),
                epoch: self.epoch,
                global_step: self.global_step,
                best_miou: self.best_miou,
                seed: self.config.seed,
            },
            params: self
                .model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.checkpoint().to_bytes())?;
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_miou: Option<f64>,
    pub final_report: Option<MetricReport>,
    pub param_count: ParamCount,
    pub dataset_fingerprint: String,
}

fn train_typed<T: Float>(config: &RunConfig) -> Result<TrainSummary> {
    let ds = Dataset::open(&config.dataset)?;
    let mut t = Trainer::<T>::from_dataset(config.clone(), &ds)?;
    t.run()?;
    Ok(TrainSummary {
        steps: t.global_step,
        epochs: t.epochs_log.clone(),
        best_miou: t.best_miou,
        final_report: t.last_report.clone(),
        param_count: t.model.param_count(),
        dataset_fingerprint: t.meta.fingerprint.clone(),
    })
}

/// Trains from the dataset directory named in `config`.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    match config.precision {
        Precision::F32 => train_typed::<f32>(config),
        Precision::F64 => train_typed::<f64>(config),
    }
}

fn resume_typed<T: Float>(ckpt: Checkpoint<T>, epochs: Option<usize>) -> Result<TrainSummary> {
    let ds = Dataset::open(&ckpt.meta.config.dataset)?;
    let mut ckpt = ckpt;
    if let Some(e) = epochs {
        ckpt.meta.config.epochs = e;
    }
    let cfg = ckpt.meta.config.clone();
    let train = prepare_split(&ds, &cfg.train_split)?;
    let val = if ds.split(&cfg.val_split).is_ok() {
        prepare_split(&ds, &cfg.val_split)?
    } else {
        Vec::new()
    };
    let mut t = Trainer::resume(ckpt, train, val)?;
    t.run()?;
    Ok(TrainSummary {
        steps: t.global_step,
        epochs: t.epochs_log.clone(),
        best_miou: t.best_miou,
        final_report: t.last_report.clone(),
        param_count: t.model.param_count(),
        dataset_fingerprint: t.meta.fingerprint.clone(),
    })
}

/// Continues training from a checkpoint, optionally extending the epoch count.
pub fn resume(path: &Path, epochs: Option<usize>) -> Result<TrainSummary> {
    match AnyCheckpoint::load(path)? {
        AnyCheckpoint::F32(c) => resume_typed(c, epochs),
        AnyCheckpoint::F64(c) => resume_typed(c, epochs),
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HFTC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub dataset: DatasetMeta,
    pub class_weights: Vec<f64>,
    pub epoch: usize,
    pub global_step: u64,
    pub best_miou: Option<f64>,
    /// Root seed; data order and augmentation streams are keyed by epoch.
    pub seed: u64,
}

/// Model parameters, optimizer moments and counters.
///
/// Layout: magic, `u16` version, `u8` dtype code, `u32` header length, JSON
/// header, then tensor records for the parameters and both Adam moments
/// (`u16` name length, name, `u8` dtype, `u8` rank, `u64` dims, raw
/// values), the `u64` Adam step and a SHA-256 trailer over everything
/// before it. All integers little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: AdamW<T>,
}

fn write_record<T: Float>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(Data, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record<T: Float>(&mut self) -> Result<(String, Tensor<T>)> {
        let n = self.u16()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Data("checkpoint tensor name is not UTF-8".into()))?;
        if self.u8()? != T::DTYPE.code() {
            bail!(Data, "tensor {} has an unexpected element type", name);
        }
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let raw = self.take(len * size)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

impl<T: Float> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        let header = serde_json::to_vec(&self.meta).expect("checkpoint header serialises");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            write_record(&mut out, name, t);
        }
        for moments in [&self.optimizer.m, &self.optimizer.v] {
            for ((name, _), t) in self.params.iter().zip(moments) {
                write_record(&mut out, name, t);
            }
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    fn from_reader(r: &mut Reader<'_>, meta: CheckpointMeta) -> Result<Self> {
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(r.record::<T>()?);
        }
        let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for m in &mut moments {
            for (name, p) in &params {
                let (mn, t) = r.record::<T>()?;
                if &mn != name || t.shape() != p.shape() {
                    bail!(Data, "optimizer state does not match parameter {}", name);
                }
                m.push(t);
            }
        }
        let step = r.u64()?;
        let [m, v] = moments;
        Ok(Self {
            meta,
            params,
            optimizer: AdamW { step, m, v },
        })
    }

    /// Copies parameters into a model with matching names and shapes.
    pub fn load_into(&self, model: &mut Model<T>) -> Result<()> {
        if model.params.len() != self.params.len() {
            bail!(
                Data,
                "checkpoint has {} tensors, model {}",
                self.params.len(),
                model.params.len()
            );
        }
        for (name, t) in &self.params {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Data(format!("model has no parameter {name}")))?;
            model.params.set(id, t.clone())?;
        }
        Ok(())
    }

    /// Rebuilds the model described by the header.
    pub fn model(&self) -> Result<Model<T>> {
        let m = &self.meta;
        let mut model = Model::new(m.config.model.clone(), m.dataset.grid.clone(), &m.dataset.intrinsics, m.config.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}

/// A checkpoint of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 1 + 4 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
            bail!(Data, "not a checkpoint (bad magic)");
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            bail!(Data, "checkpoint checksum mismatch");
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            bail!(Data, "unsupported checkpoint version {}", version);
        }
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Data("unknown checkpoint dtype".into()))?;
        let hl = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(hl)?)
            .map_err(|e| Error::Data(format!("corrupt checkpoint header: {e}")))?;
        let out = match dtype {
            DType::F32 => AnyCheckpoint::F32(Checkpoint::from_reader(&mut r, meta)?),
            DType::F64 => AnyCheckpoint::F64(Checkpoint::from_reader(&mut r, meta)?),
        };
        if r.pos != body.len() {
            bail!(Data, "trailing bytes in checkpoint");
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta(&self) -> &CheckpointMeta {
        match self {
            AnyCheckpoint::F32(c) => &c.meta,
            AnyCheckpoint::F64(c) => &c.meta,
        }
    }
}

fn evaluate_typed<T: Float>(ckpt: &Checkpoint<T>, ds: &Dataset, split: &str) -> Result<MetricReport> {
    let meta = &ckpt.meta.dataset;
    if meta.class_names != ds.manifest.class_names {
        bail!(Config, "checkpoint classes {:?} differ from dataset classes {:?}", meta.class_names, ds.manifest.class_names);
    }
    let samples = prepare_split::<T>(ds, split)?;
    if samples.is_empty() {
        bail!(Data, "split '{}' is empty", split);
    }
    let model = ckpt.model()?;
    evaluate_model(&model, &samples, ckpt.meta.config.model.mode, &meta.static_ids, &meta.dynamic_ids)
}

/// Evaluates a checkpoint on a dataset split.
pub fn evaluate(ckpt: &AnyCheckpoint, ds: &Dataset, split: &str) -> Result<MetricReport> {
    match ckpt {
        AnyCheckpoint::F32(c) => evaluate_typed(c, ds, split),
        AnyCheckpoint::F64(c) => evaluate_typed(c, ds, split),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Scheme,
    Distance,
    Mode,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scheme" => Ok(Self::Scheme),
            "distance" => Ok(Self::Distance),
            "mode" => Ok(Self::Mode),
            _ => Err(Error::Config(format!("unknown ablation axis '{s}'"))),
        }
    }
}

/// Named variants of `base` along `axis`.
pub fn ablation_variants(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Scheme => Scheme::ALL
            .iter()
            .map(|&s| {
                (
                    s.name().to_string(),
                    with(&|c| {
                        c.model.mode = Mode::Hybrid;
                        c.scheme.scheme = s;
                    }),
                )
            })
            .collect(),
        AblationAxis::Distance => Distance::ALL
            .iter()
            .map(|&d| {
                (
                    d.name().to_string(),
                    with(&|c| {
                        c.model.mode = Mode::Hybrid;
                        c.scheme.distance = d;
                        if c.scheme.scheme == Scheme::None {
                            c.scheme.scheme = Scheme::Mutual;
                        }
                    }),
                )
            })
            .collect(),
        AblationAxis::Mode => {
            let mls = if base.scheme.scheme == Scheme::None {
                Scheme::Mutual
            } else {
                base.scheme.scheme
            };
            [
                ("cbft_only", Mode::CbftOnly, Scheme::None),
                ("cfft_only", Mode::CfftOnly, Scheme::None),
                ("hybrid(no MLS)", Mode::Hybrid, Scheme::None),
                ("hybrid(MLS)", Mode::Hybrid, mls),
            ]
            .into_iter()
            .map(|(n, m, s)| {
                (
                    n.to_string(),
                    with(&|c| {
                        c.model.mode = m;
                        c.scheme.scheme = s;
                    }),
                )
            })
            .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub param_count: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub map: Option<f64>,
    pub bamiou: f64,
    pub dataset_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub class_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut header = vec!["variant".to_string(), "params".to_string()];
        header.extend(self.class_names.iter().cloned());
        header.extend(["mIoU", "mAP", "BamIoU"].map(String::from));
        let mut rows = vec![header];
        for r in &self.rows {
            let mut row = vec![r.variant.clone(), r.param_count.to_string()];
            row.extend(r.per_class_iou.iter().map(|&v| fmt_opt(v)));
            row.push(fmt_opt(r.miou));
            row.push(fmt_opt(r.map));
            row.push(format!("{:.4}", r.bamiou));
            rows.push(row);
        }
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r.get(c).map_or(0, |s| s.len())).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, &w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates every variant along `axis` on the same data and
/// seed, writing `ablation.json` and `ablation.txt` into `out`.
pub fn ablate(base: &RunConfig, axis: AblationAxis, out: &Path) -> Result<AblationTable> {
    let ds = Dataset::open(&base.dataset)?;
    let mut rows = Vec::new();
    for (name, mut cfg) in ablation_variants(base, axis) {
        let slug: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
            .collect();
        cfg.output = out.join(slug.trim_matches('_'));
        info!("ablation variant {name}");
        let summary = train(&cfg)?;
        let report = match summary.final_report {
            Some(r) => r,
            None => {
                let ckpt = AnyCheckpoint::load(&cfg.output.join("last.ckpt"))?;
                evaluate(&ckpt, &ds, &cfg.val_split)?
            }
        };
        rows.push(AblationRow {
            variant: name,
            param_count: summary.param_count.total,
            per_class_iou: report.per_class_iou,
            miou: report.miou,
            map: report.map,
            bamiou: report.bamiou,
            dataset_fingerprint: summary.dataset_fingerprint,
        });
    }
    let table = AblationTable {
        axis,
        class_names: ds.manifest.class_names.clone(),
        rows,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    fs::write(out.join("ablation.txt"), table.to_text())?;
    Ok(table)
}

/// Parameter counts of the three construction modes for `model`.
pub fn param_table(model: &ModelConfig, grid: &BevGridSpec, intr: &CameraIntrinsics) -> Result<Vec<(Mode, ParamCount)>> {
    [Mode::CbftOnly, Mode::CfftOnly, Mode::Hybrid]
        .into_iter()
        .map(|mode| {
            let cfg = ModelConfig {
                mode,
                ..model.clone()
            };
            Ok((mode, Model::<f32>::new(cfg, grid.clone(), intr, 0)?.param_count()))
        })
        .collect()
}

/// `hybrid - (cbft + cfft - encoder + fuse + dec.main)`; zero when the
/// submodule accounting is consistent.
pub fn additivity_residual(table: &[(Mode, ParamCount)]) -> Result<i64> {
    let get = |m: Mode| {
        table
            .iter()
            .find(|(mm, _)| *mm == m)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::Config(format!("missing mode {}", m.name())))
    };
    let (h, a, b) = (get(Mode::Hybrid)?, get(Mode::CbftOnly)?, get(Mode::CfftOnly)?);
    Ok(h.total as i64
        - (a.total as i64 + b.total as i64 - h.get("encoder") as i64 + h.get("fuse") as i64 + h.get("dec.main") as i64))
}

/// Fixed display palette indexed by class.
pub const PALETTE: [[u8; 3]; 16] = [
    [128, 64, 128],
    [244, 35, 232],
    [220, 20, 60],
    [0, 0, 142],
    [250, 170, 30],
    [70, 130, 180],
    [107, 142, 35],
    [152, 251, 152],
    [255, 0, 0],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
    [190, 153, 153],
    [153, 153, 153],
    [102, 102, 156],
];
pub const VIZ_BACKGROUND: [u8; 3] = [255, 255, 255];
pub const VIZ_INVALID: [u8; 3] = [0, 0, 0];

/// Colour per cell: the largest class index with probability above 0.5,
/// background when none, black outside validity. Output rows run from the
/// far edge of the grid (top) to the near edge (bottom).
pub fn render_bev(scores: &[f64], validity: &[bool], classes: usize, depth: usize, lateral: usize) -> Result<Vec<u8>> {
    let plane = depth * lateral;
    if scores.len() != classes * plane || validity.len() != plane {
        bail!(Shape, "score map does not match {} x {} x {}", classes, depth, lateral);
    }
    let mut out = Vec::with_capacity(plane * 3);
    for r in 0..depth {
        let zi = depth - 1 - r;
        for xi in 0..lateral {
            let k = zi * lateral + xi;
            let color = if !validity[k] {
                VIZ_INVALID
            } else {
                (0..classes)
                    .rev()
                    .find(|&c| scores[c * plane + k] > 0.5)
                    .map_or(VIZ_BACKGROUND, |c| PALETTE[c % PALETTE.len()])
            };
            out.extend_from_slice(&color);
        }
    }
    Ok(out)
}

fn write_rgb_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Data(format!("png encode: {e}")))?;
    w.write_image_data(data)
        .map_err(|e| Error::Data(format!("png encode: {e}")))?;
    Ok(())
}

fn visualize_typed<T: Float>(ckpt: &Checkpoint<T>, ds: &Dataset, ids: &[String], out: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out)?;
    let model = ckpt.model()?;
    let classes = ds.num_classes();
    let grid = &ds.manifest.grid;
    let mut written = Vec::new();
    for id in ids {
        let Some(index) = ds.index_of(id) else {
            warn!("sample {id} not found; skipped");
            continue;
        };
        let rec = ds.load(index)?;
        let s = PreparedSample::<T>::from_record(&rec, classes, grid)?;
        let scores = predict(&model, &s, ckpt.meta.config.model.mode)?;
        let gt: Vec<f64> = rec.bev_labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let (d, l) = (grid.depth_cells, grid.lateral_cells);
        write_rgb_png(&out.join(format!("fv_{id}.png")), rec.fv_image.width, rec.fv_image.height, &rec.fv_image.data)?;
        write_rgb_png(&out.join(format!("pred_{id}.png")), l, d, &render_bev(scores.data(), &rec.validity, classes, d, l)?)?;
        write_rgb_png(&out.join(format!("gt_{id}.png")), l, d, &render_bev(&gt, &rec.validity, classes, d, l)?)?;
        written.push(id.clone());
    }
    let palette: Vec<serde_json::Value> = ds
        .manifest
        .class_names
        .iter()
        .enumerate()
        .map(|(c, n)| serde_json::json!({ "class": n, "color": PALETTE[c % PALETTE.len()] }))
        .collect();
    let manifest = serde_json::json!({
        "samples": written,
        "palette": palette,
        "background": VIZ_BACKGROUND,
        "invalid": VIZ_INVALID,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(written)
}

/// Writes FV, predicted BEV and ground-truth BEV images for `ids`.
/// Unknown ids are skipped with a warning.
pub fn visualize(ckpt: &AnyCheckpoint, ds: &Dataset, ids: &[String], out: &Path) -> Result<Vec<String>> {
    match ckpt {
        AnyCheckpoint::F32(c) => visualize_typed(c, ds, ids, out),
        AnyCheckpoint::F64(c) => visualize_typed(c, ds, ids, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_drops_by_factor() {
        let o = OptimizerConfig::default();
        assert_eq!(o.lr_at(0), 2e-4);
        assert_eq!(o.lr_at(21), 2e-4);
        assert!((o.lr_at(22) - 2e-5).abs() < 1e-18);
        assert!((o.lr_at(26) - 2e-6).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.optimizer.lr = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.optimizer.decay_epochs = vec![30];
        assert!(c.validate().is_ok());
        c.photometric_jitter = 1.0;
        assert!(c.validate().is_err());
        assert!(RunConfig::from_json(r#"{"epochs": 3, "bogus": 1}"#).is_err());
        let c = RunConfig::from_json(r#"{"epochs": 3, "optimizer": {"decay_epochs": [1]}}"#).unwrap();
        assert_eq!(c.epochs, 3);
    }

    #[test]
    fn render_bev_rules() {
        // two classes, one row of three cells
        let scores = [0.6, 0.2, 0.9, 0.7, 0.4, 0.9];
        let img = render_bev(&scores, &[true, true, false], 2, 1, 3).unwrap();
        assert_eq!(&img[0..3], &PALETTE[1]);
        assert_eq!(&img[3..6], &VIZ_BACKGROUND);
        assert_eq!(&img[6..9], &VIZ_INVALID);
    }

    #[test]
    fn mode_axis_rows() {
        let names: Vec<String> = ablation_variants(&RunConfig::default(), AblationAxis::Mode)
            .into_iter()
            .map(|v| v.0)
            .collect();
        assert_eq!(names, ["cbft_only", "cfft_only", "hybrid(no MLS)", "hybrid(MLS)"]);
    }
}

//! Mini-batch training: Adam, per-epoch exponential learning-rate decay,
//! mixup and spectrogram augmentation, progressive resizing, best-checkpoint
//! retention and per-run logs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::augment::{self, argmax, ImageAugConfig, LabeledExample, ResizePolicy};
use crate::dataset::{EmotionLabel, Manifest, Split, N_CLASSES};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::models::{Checkpoint, CnnClassifier, InputNorm, ModelState};
use crate::nn::{softmax_cross_entropy, zero_grads, Layer, Mode};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// Raw `frames x bands` features and their label.
pub type Example = (Tensor, EmotionLabel);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Epochs per stage.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplier on the learning rate.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub mixup_enabled: bool,
    pub mixup_alpha: f64,
    /// Affine + brightness augmentation of CNN inputs.
    pub aug_enabled: bool,
    pub aug: ImageAugConfig,
    pub resize_policy: ResizePolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.001,
            lr_decay: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mixup_enabled: false,
            mixup_alpha: 0.4,
            aug_enabled: false,
            aug: ImageAugConfig::default(),
            resize_policy: ResizePolicy::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.mixup_enabled && !(self.mixup_alpha > 0.0) {
            return bad("mixup_alpha must be positive");
        }
        self.aug.validate()?;
        self.resize_policy.validate()
    }

    /// `key=value` pairs, enough to rerun identically.
    pub fn describe(&self) -> Vec<(String, String)> {
        let sizes = self.resize_policy.stage_sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("mixup_enabled", self.mixup_enabled.to_string()),
            ("mixup_alpha", self.mixup_alpha.to_string()),
            ("aug_enabled", self.aug_enabled.to_string()),
            ("aug_max_rotate_deg", self.aug.max_rotate_deg.to_string()),
            ("aug_zoom_lo", self.aug.zoom_range.0.to_string()),
            ("aug_zoom_hi", self.aug.zoom_range.1.to_string()),
            ("aug_brightness_delta", self.aug.brightness_delta.to_string()),
            ("stage_sizes", sizes),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// `lr * decay^epoch`, epochs counted from 0 within a stage.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi(epoch as i32)
}

/// First and second moments per parameter, in `visit_params` order.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

/// One Adam update from the accumulated gradients.
///
/// Gradients are checked before anything moves, so a non-finite gradient
/// leaves parameters and moments untouched.
pub fn adam_step(layer: &mut dyn Layer, state: &mut AdamState, lr_t: f64, cfg: &TrainConfig) -> Result<()> {
    let mut bad = None;
    let mut dims = Vec::new();
    layer.visit_params(&mut |p| {
        if bad.is_none() && !p.grad.all_finite() {
            bad = Some(p.name.clone());
        }
        dims.push(p.value.dims().to_vec());
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient(name));
    }
    if state.m.is_empty() {
        state.m = dims.iter().map(|d| Tensor::zeros(d)).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != dims.len() || state.m.iter().zip(&dims).any(|(m, d)| m.dims() != d.as_slice()) {
        return Err(Error::shape("adam state does not match model parameters"));
    }
    state.t += 1;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let mut i = 0;
    layer.visit_params(&mut |p| {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        i += 1;
    });
    Ok(())
}

/// Batches of example indices for one epoch: a seeded shuffle cut into
/// `batch_size` chunks. A trailing batch of one is folded into the previous
/// batch, since batch statistics are undefined for a single example.
pub fn plan_epoch(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::item_stream(seed, epoch as u64, domain::SHUFFLE));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("checked non-empty");
        batches.last_mut().expect("more than one batch").extend(last);
    }
    batches
}

/// Seed for per-example streams within one epoch; items are indexed by
/// example (augmentation) or by batch (mixup).
fn epoch_seed(seed: u64, stage: usize, epoch: usize) -> u64 {
    seed ^ ((stage as u64) << 48) ^ ((epoch as u64) << 32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    /// Square input side for CNNs, 0 otherwise.
    pub input_size: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const EPOCHS_HEADER: &str = "stage,epoch,input_size,train_loss,val_loss,val_accuracy,lr";
pub const TIMING_HEADER: &str = "stage,epoch,wall_seconds";

impl EpochLog {
    /// Row of `epochs.csv`. Wall time is kept out so reruns compare byte for byte.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.stage, self.epoch, self.input_size, self.train_loss, self.val_loss, self.val_accuracy, self.lr
        )
    }
}

fn one_hot(label: EmotionLabel) -> Vec<f64> {
    label.one_hot()
}

/// Mean cross-entropy and accuracy of `scores` against `labels`.
fn score_summary(scores: &[Vec<f64>], labels: &[EmotionLabel], with_loss: bool) -> Result<(f64, f64)> {
    let n = labels.len();
    let correct = scores.iter().zip(labels).filter(|(s, l)| argmax(s) == l.code()).count();
    let acc = correct as f64 / n as f64;
    if !with_loss {
        return Ok((1.0 - acc, acc));
    }
    let logits = Tensor::from_rows(scores)?;
    let targets = Tensor::from_rows(&labels.iter().map(|&l| one_hot(l)).collect::<Vec<_>>())?;
    let (loss, _) = softmax_cross_entropy(&logits, &targets)?;
    Ok((loss, acc))
}

/// Drives one training stage epoch by epoch.
pub struct Trainer {
    pub model: ModelState,
    cfg: TrainConfig,
    stage: usize,
    input_size: usize,
    train: Vec<Example>,
    /// CNN inputs resized once per stage; empty for other kinds.
    images: Vec<Tensor>,
    val: Vec<Example>,
    adam: AdamState,
    epoch: usize,
    best: Option<(f64, Checkpoint)>,
}

impl Trainer {
    /// `fit_norm` fits input normalization on the training split; later
    /// progressive stages keep the statistics of the first.
    pub fn new(
        mut model: ModelState,
        train: Vec<Example>,
        val: Vec<Example>,
        cfg: &TrainConfig,
        stage: usize,
        fit_norm: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        if val.is_empty() {
            return Err(Error::EmptySplit("val".into()));
        }
        let input_size = *cfg
            .resize_policy
            .stage_sizes
            .get(stage)
            .ok_or_else(|| Error::InvalidConfig(format!("no stage {stage} in resize policy")))?;
        let mut images = Vec::new();
        match &mut model {
            ModelState::Cnn(m) => {
                m.input_size = input_size;
                images = train.iter().map(|(f, _)| m.prepare(f)).collect::<Result<_>>()?;
                if fit_norm {
                    let refs: Vec<&Tensor> = images.iter().collect();
                    m.norm = InputNorm::fit(&refs, 1)?;
                }
            }
            ModelState::Lstm(m) => {
                if fit_norm {
                    let refs: Vec<&Tensor> = train.iter().map(|(f, _)| f).collect();
                    m.norm = InputNorm::fit(&refs, m.n_mels)?;
                }
            }
            ModelState::Svm(_) => {}
        }
        Ok(Trainer {
            input_size: if model.kind().is_cnn() { input_size } else { 0 },
            model,
            cfg: cfg.clone(),
            stage,
            train,
            images,
            val,
            adam: AdamState::default(),
            epoch: 0,
            best: None,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Best validation accuracy so far and its checkpoint (earliest on ties).
    pub fn best(&self) -> Option<&(f64, Checkpoint)> {
        self.best.as_ref()
    }

    pub fn into_parts(self) -> (ModelState, Option<(f64, Checkpoint)>) {
        (self.model, self.best)
    }

    /// Inference-mode accuracy on the (unaugmented) training split.
    pub fn train_accuracy(&mut self) -> Result<f64> {
        let refs: Vec<&Tensor> = self.train.iter().map(|(f, _)| f).collect();
        let labels: Vec<EmotionLabel> = self.train.iter().map(|e| e.1).collect();
        let scores = self.model.scores(&refs)?;
        Ok(score_summary(&scores, &labels, false)?.1)
    }

    /// Validation loss and accuracy in inference mode.
    pub fn validate(&mut self) -> Result<(f64, f64)> {
        let refs: Vec<&Tensor> = self.val.iter().map(|(f, _)| f).collect();
        let labels: Vec<EmotionLabel> = self.val.iter().map(|e| e.1).collect();
        let scores = self.model.scores(&refs)?;
        score_summary(&scores, &labels, !matches!(self.model, ModelState::Svm(_)))
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.cfg);
        let train_loss = match &mut self.model {
            ModelState::Svm(svm) => {
                let refs: Vec<&Tensor> = self.train.iter().map(|(f, _)| f).collect();
                let labels: Vec<EmotionLabel> = self.train.iter().map(|e| e.1).collect();
                svm.fit(&refs, &labels)?;
                let scores = self.model.scores(&refs)?;
                score_summary(&scores, &labels, false)?.0
            }
            _ => self.train_nn_epoch(lr)?,
        };
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let (val_loss, val_accuracy) = self.validate()?;
        if self.best.as_ref().is_none_or(|(b, _)| val_accuracy > *b) {
            self.best = Some((val_accuracy, self.model.to_checkpoint()?));
        }
        self.epoch += 1;
        let log = EpochLog {
            stage: self.stage,
            epoch,
            input_size: self.input_size,
            train_loss,
            val_loss,
            val_accuracy,
            lr: if matches!(self.model, ModelState::Svm(_)) { 0.0 } else { lr },
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "stage {} epoch {} train_loss {:.4} val_loss {:.4} val_acc {:.4} ({:.1}s)",
            log.stage,
            log.epoch,
            log.train_loss,
            log.val_loss,
            log.val_accuracy,
            log.wall_seconds
        );
        Ok(log)
    }

    /// Training inputs for one batch: augmented (CNN only) and optionally mixed.
    fn batch_examples(&self, batch: &[usize], batch_index: usize) -> Result<Vec<(Tensor, Vec<f64>)>> {
        let eseed = epoch_seed(self.cfg.seed, self.stage, self.epoch);
        let cnn = !self.images.is_empty();
        let mut items = Vec::with_capacity(batch.len());
        for &i in batch {
            let (features, label) = &self.train[i];
            let x = if !cnn {
                features.clone()
            } else if self.cfg.aug_enabled {
                let mut r = rng::item_stream(eseed, i as u64, domain::AUGMENT);
                let warped = augment::random_affine(&self.images[i], &self.cfg.aug, &mut r)?;
                augment::brightness_shift(&warped, &self.cfg.aug, &mut r)
            } else {
                self.images[i].clone()
            };
            items.push(LabeledExample::one_hot(i, x, label.code()));
        }
        if !self.cfg.mixup_enabled {
            return Ok(items.into_iter().map(|e| (e.features, e.target)).collect());
        }
        let mut r = rng::item_stream(eseed, batch_index as u64, domain::MIXUP);
        let lambda = augment::sample_lambda(self.cfg.mixup_alpha, &mut r)?;
        let mut partners: Vec<usize> = (0..items.len()).collect();
        partners.shuffle(&mut r);
        items
            .iter()
            .zip(&partners)
            .map(|(a, &p)| {
                let b = &items[p];
                let s = if cnn {
                    augment::mixup(a, b, lambda)?
                } else {
                    // Sequences differ in length; mix the common prefix.
                    let t = a.features.dims()[0].min(b.features.dims()[0]);
                    augment::mixup(&crop_frames(a, t)?, &crop_frames(b, t)?, lambda)?
                };
                Ok((s.x_tilde, s.y_tilde))
            })
            .collect()
    }

    fn train_nn_epoch(&mut self, lr: f64) -> Result<f64> {
        if let ModelState::Lstm(m) = &mut self.model {
            m.reseed_dropout(epoch_seed(self.cfg.seed, self.stage, 0), self.epoch as u64);
        }
        let batches = plan_epoch(self.train.len(), self.cfg.batch_size, self.cfg.seed ^ ((self.stage as u64) << 48), self.epoch);
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let items = self.batch_examples(batch, bi)?;
            let targets: Vec<Vec<f64>> = items.iter().map(|(_, y)| y.clone()).collect();
            let layer = self.model.layer_mut().expect("neural model");
            zero_grads(layer);
            let batch_loss = match &mut self.model {
                ModelState::Cnn(m) => {
                    let refs: Vec<&Tensor> = items.iter().map(|(x, _)| x).collect();
                    let x = CnnClassifier::stack(&refs)?;
                    let logits = m.forward(&x, Mode::Train)?;
                    let (loss, grad) = softmax_cross_entropy(&logits, &Tensor::from_rows(&targets)?)?;
                    m.backward(&grad)?;
                    loss
                }
                ModelState::Lstm(m) => {
                    let scale = 1.0 / items.len() as f64;
                    let mut sum = 0.0;
                    for (x, y) in &items {
                        let (t, d) = x.shape2()?;
                        let logits = m.forward(&x.clone().reshape(&[1, t, d])?, Mode::Train)?;
                        let (loss, grad) = softmax_cross_entropy(&logits, &Tensor::new(vec![1, N_CLASSES], y.clone())?)?;
                        m.backward(&grad.map(|g| g * scale))?;
                        sum += loss;
                    }
                    sum * scale
                }
                ModelState::Svm(_) => unreachable!("svm has no gradient epochs"),
            };
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: self.epoch });
            }
            let layer = self.model.layer_mut().expect("neural model");
            adam_step(layer, &mut self.adam, lr, &self.cfg)?;
            total += batch_loss * batch.len() as f64;
        }
        Ok(total / self.train.len() as f64)
    }
}

fn crop_frames(e: &LabeledExample, t: usize) -> Result<LabeledExample> {
    let (_, d) = e.features.shape2()?;
    Ok(LabeledExample {
        id: e.id,
        features: Tensor::new(vec![t, d], e.features.data()[..t * d].to_vec())?,
        target: e.target.clone(),
    })
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the final epoch.
    pub model: ModelState,
    pub logs: Vec<EpochLog>,
    pub best_val_accuracy: f64,
    pub best: Checkpoint,
}

/// Per-run output directory writer.
struct RunDir<'a> {
    dir: Option<&'a Path>,
}

impl RunDir<'_> {
    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        match self.dir {
            Some(dir) => {
                let path = dir.join(name);
                fs::write(&path, contents).map_err(|e| Error::io(&path, e))
            }
            None => Ok(()),
        }
    }

    fn start(&self, cfg: &TrainConfig, model: &ModelState, extra: &[(String, String)]) -> Result<()> {
        if let Some(dir) = self.dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut text = format!("model={}\n", model.kind());
        for (k, v) in cfg.describe().iter().chain(extra) {
            let _ = writeln!(text, "{k}={v}");
        }
        self.write("config.txt", text.as_bytes())
    }

    fn logs(&self, logs: &[EpochLog]) -> Result<()> {
        let mut epochs = format!("{EPOCHS_HEADER}\n");
        let mut timing = format!("{TIMING_HEADER}\n");
        for l in logs {
            let _ = writeln!(epochs, "{}", l.csv_row());
            let _ = writeln!(timing, "{},{},{:.3}", l.stage, l.epoch, l.wall_seconds);
        }
        self.write("epochs.csv", epochs.as_bytes())?;
        self.write("timing.csv", timing.as_bytes())
    }

    fn checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        self.write(name, &ckpt.to_bytes()?)
    }
}

/// Train and validation examples of a split manifest.
pub fn load_splits(manifest: &Manifest, store: &FeatureStore) -> Result<(Vec<Example>, Vec<Example>)> {
    Ok((store.load_split(manifest, Split::Train)?, store.load_split(manifest, Split::Val)?))
}

fn run_stages(
    model: ModelState,
    train: Vec<Example>,
    val: Vec<Example>,
    cfg: &TrainConfig,
    stages: usize,
    run_dir: Option<&Path>,
    extra: &[(String, String)],
) -> Result<TrainOutcome> {
    let out = RunDir { dir: run_dir };
    out.start(cfg, &model, extra)?;
    let svm = matches!(model, ModelState::Svm(_));
    let mut logs = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut model = Some(model);
    for stage in 0..stages {
        let mut trainer = Trainer::new(
            model.take().expect("model carried between stages"),
            train.clone(),
            val.clone(),
            cfg,
            stage,
            stage == 0,
        )?;
        // The SVM solves its problem exactly once.
        let epochs = if svm { 1 } else { cfg.epochs };
        for _ in 0..epochs {
            logs.push(trainer.run_epoch()?);
            out.logs(&logs)?;
        }
        let (m, stage_best) = trainer.into_parts();
        if let Some((acc, ck)) = stage_best {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                out.checkpoint("best.ckpt", &ck)?;
                best = Some((acc, ck));
            }
        }
        model = Some(m);
    }
    let model = model.expect("model returned by last stage");
    let last = model.to_checkpoint()?;
    out.checkpoint("last.ckpt", &last)?;
    let (best_val_accuracy, best) = match best {
        Some(b) => b,
        None => {
            // Zero epochs: the untrained state is the best there is.
            out.checkpoint("best.ckpt", &last)?;
            (0.0, last)
        }
    };
    Ok(TrainOutcome {
        model,
        logs,
        best_val_accuracy,
        best,
    })
}

/// Trains on the train split, validating on val each epoch. CNNs train at
/// the first size of `cfg.resize_policy`. With `run_dir`, writes
/// `config.txt`, `epochs.csv`, `timing.csv`, `best.ckpt` and `last.ckpt`.
pub fn train_model(
    model: ModelState,
    train: Vec<Example>,
    val: Vec<Example>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    extra: &[(String, String)],
) -> Result<TrainOutcome> {
    run_stages(model, train, val, cfg, 1, run_dir, extra)
}

/// Trains a CNN once per size in `cfg.resize_policy`, each stage starting
/// from the previous weights with fresh Adam moments and learning-rate
/// schedule.
pub fn progressive_train(
    model: ModelState,
    train: Vec<Example>,
    val: Vec<Example>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    extra: &[(String, String)],
) -> Result<TrainOutcome> {
    if !model.kind().is_cnn() {
        return Err(Error::InvalidConfig(format!("progressive training needs a CNN, got {}", model.kind())));
    }
    let stages = cfg.resize_policy.stage_sizes.len();
    run_stages(model, train, val, cfg, stages, run_dir, extra)
}

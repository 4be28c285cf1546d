//! The three classifier families and their checkpoint handling.

pub mod checkpoint;
mod cnn;
mod lstm;
pub mod svm;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use checkpoint::Checkpoint;
pub use cnn::{CnnClassifier, CnnVariant, INPUT_CHANNELS};
pub use lstm::{LstmClassifier, DEFAULT_DROPOUT, DEFAULT_HIDDEN};
pub use svm::{svm_predict, svm_train, SvmConfig, SvmModel};

use crate::augment::argmax;
use crate::dataset::{EmotionLabel, N_CLASSES};
use crate::dsp;
use crate::error::{Error, Result};
use crate::nn::{Layer, Mode};
use crate::rng;
use crate::tensor::Tensor;

/// Evaluation batch size for the CNN.
const CNN_EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Svm,
    Lstm,
    CnnLite,
    Cnn34,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Svm, ModelKind::Lstm, ModelKind::CnnLite, ModelKind::Cnn34];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Svm => "svm",
            ModelKind::Lstm => "lstm",
            ModelKind::CnnLite => "cnn_lite",
            ModelKind::Cnn34 => "cnn34",
        }
    }

    pub fn is_cnn(self) -> bool {
        matches!(self, ModelKind::CnnLite | ModelKind::Cnn34)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model kind {s:?}")))
    }
}

/// Affine input normalization `(x - mean) / std` over the last axis, with
/// statistics taken from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mean: Tensor,
    pub std: Tensor,
}

impl InputNorm {
    pub fn new(mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.ndim() != 1 || mean.dims() != std.dims() {
            return Err(Error::shape("normalization mean/std must be equal-length vectors"));
        }
        if !std.data().iter().all(|&s| s > 0.0 && s.is_finite()) || !mean.all_finite() {
            return Err(Error::InvalidConfig("normalization needs finite mean and positive std".into()));
        }
        Ok(InputNorm { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        InputNorm {
            mean: Tensor::zeros(&[d]),
            std: Tensor::filled(&[d], 1.0),
        }
    }

    pub fn scalar(mean: f64, std: f64) -> Self {
        InputNorm::new(Tensor::filled(&[1], mean), Tensor::filled(&[1], std)).expect("valid scalar normalization")
    }

    /// One statistic per column over all rows of all `rows x d` tensors;
    /// `d = 1` pools every element.
    pub fn fit(samples: &[&Tensor], d: usize) -> Result<Self> {
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for s in samples {
            if d > 1 && s.dims().last() != Some(&d) {
                return Err(Error::shape(format!("expected last dim {d}, got {:?}", s.dims())));
            }
            for (i, v) in s.data().iter().enumerate() {
                sum[i % d] += v;
            }
            count += s.len() / d;
        }
        if count == 0 {
            return Err(Error::EmptySplit("train".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut ss = vec![0.0; d];
        for s in samples {
            for (i, v) in s.data().iter().enumerate() {
                ss[i % d] += (v - mean[i % d]) * (v - mean[i % d]);
            }
        }
        let std = ss
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 0.0 && sd.is_finite() { sd } else { 1.0 }
            })
            .collect();
        InputNorm::new(Tensor::new(vec![d], mean)?, Tensor::new(vec![d], std)?)
    }

    pub fn apply_last(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if d > 1 && x.dims().last() != Some(&d) {
            return Err(Error::shape("normalization width does not match input"));
        }
        let (m, s) = (self.mean.data(), self.std.data());
        Ok(Tensor::from_fn(x.dims(), |i| (x.data()[i] - m[i % d]) / s[i % d]))
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("input.mean", &mut self.mean);
        f("input.std", &mut self.std);
    }
}

/// RBF-SVM over time-averaged cepstral vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmClassifier {
    pub cfg: SvmConfig,
    /// Cepstral coefficients per frame; log-mel inputs are converted.
    pub n_mfcc: usize,
    pub model: Option<SvmModel>,
}

impl SvmClassifier {
    /// Mean-pooled MFCC vector from `frames x n_mfcc` MFCCs or
    /// `frames x n_mels` log-mel features.
    pub fn vector(&self, features: &Tensor) -> Result<Vec<f64>> {
        let (_, cols) = features.shape2()?;
        let pooled = if cols == self.n_mfcc {
            dsp::mean_pool_time(features)?
        } else if cols > self.n_mfcc {
            dsp::mean_pool_time(&dsp::cepstra_from_log_mel(features, self.n_mfcc)?)?
        } else {
            return Err(Error::shape(format!(
                "svm needs at least {} feature columns, got {cols}",
                self.n_mfcc
            )));
        };
        Ok(pooled.into_data())
    }

    pub fn matrix(&self, features: &[&Tensor]) -> Result<Tensor> {
        let rows = features.iter().map(|f| self.vector(f)).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.n_mfcc]));
        }
        Tensor::from_rows(&rows)
    }

    pub fn fit(&mut self, features: &[&Tensor], labels: &[EmotionLabel]) -> Result<()> {
        let x = self.matrix(features)?;
        self.model = Some(svm_train(&x, labels, &self.cfg)?);
        Ok(())
    }

    pub fn trained(&self) -> Result<&SvmModel> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("svm has not been trained".into()))
    }
}

#[derive(Debug, Clone)]
pub enum ModelState {
    Svm(SvmClassifier),
    Lstm(LstmClassifier),
    Cnn(CnnClassifier),
}

/// Architecture knobs for [`build_model_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptions {
    pub n_mels: usize,
    pub lstm_hidden: usize,
    pub lstm_dropout: f64,
    pub cnn_input_size: usize,
    pub n_mfcc: usize,
    pub svm: SvmConfig,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            n_mels: 128,
            lstm_hidden: DEFAULT_HIDDEN,
            lstm_dropout: DEFAULT_DROPOUT,
            cnn_input_size: 128,
            n_mfcc: 20,
            svm: SvmConfig::default(),
        }
    }
}

pub fn build_model(kind: ModelKind, seed: u64) -> Result<ModelState> {
    build_model_with(kind, seed, &ModelOptions::default())
}

pub fn build_model_with(kind: ModelKind, seed: u64, opts: &ModelOptions) -> Result<ModelState> {
    let mut rng = rng::seeded(seed, rng::domain::INIT);
    Ok(match kind {
        ModelKind::Svm => {
            opts.svm.validate()?;
            ModelState::Svm(SvmClassifier {
                cfg: opts.svm.clone(),
                n_mfcc: opts.n_mfcc,
                model: None,
            })
        }
        ModelKind::Lstm => ModelState::Lstm(LstmClassifier::new(
            opts.n_mels,
            opts.lstm_hidden,
            opts.lstm_dropout,
            seed,
            &mut rng,
        )?),
        ModelKind::CnnLite | ModelKind::Cnn34 => {
            let variant = if kind == ModelKind::CnnLite {
                CnnVariant::Lite
            } else {
                CnnVariant::Resnet34
            };
            ModelState::Cnn(CnnClassifier::new(variant, opts.cnn_input_size, &mut rng))
        }
    })
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn load_state(ckpt: &Checkpoint, visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor))) -> Result<()> {
    let mut first_err = None;
    visit(&mut |name, t| {
        if first_err.is_some() {
            return;
        }
        match ckpt.require(name) {
            Ok(src) if src.dims() == t.dims() => *t = src.clone(),
            Ok(src) => {
                first_err = Some(Error::DimMismatch {
                    name: name.to_string(),
                    expected: t.dims().to_vec(),
                    found: src.dims().to_vec(),
                })
            }
            Err(e) => first_err = Some(e),
        }
    });
    first_err.map_or(Ok(()), Err)
}

impl ModelState {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelState::Svm(_) => ModelKind::Svm,
            ModelState::Lstm(_) => ModelKind::Lstm,
            ModelState::Cnn(c) => match c.variant {
                CnnVariant::Lite => ModelKind::CnnLite,
                CnnVariant::Resnet34 => ModelKind::Cnn34,
            },
        }
    }

    pub fn layer_mut(&mut self) -> Option<&mut dyn Layer> {
        match self {
            ModelState::Svm(_) => None,
            ModelState::Lstm(m) => Some(m),
            ModelState::Cnn(m) => Some(m),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set("kind", self.kind());
        ck.set("n_classes", N_CLASSES);
        let push_state = |ck: &mut Checkpoint, visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor))| {
            visit(&mut |name, t| ck.push(name, t.clone()));
        };
        match self.clone() {
            ModelState::Svm(s) => {
                ck.set("n_mfcc", s.n_mfcc);
                ck.set("tol", s.cfg.tol);
                ck.set("max_iter", s.cfg.max_iter);
                ck.set("trained", s.model.is_some());
                ck.set("cfg_c", s.cfg.c);
                ck.set("cfg_gamma", s.cfg.gamma.map_or("auto".to_string(), |g| g.to_string()));
                if let Some(m) = &s.model {
                    m.to_checkpoint(&mut ck);
                }
            }
            ModelState::Lstm(mut m) => {
                ck.set("n_mels", m.n_mels);
                ck.set("hidden", m.hidden);
                ck.set("dropout", m.dropout.p);
                ck.set("pooling", "last_forward+first_backward");
                push_state(&mut ck, &mut |f| m.visit_state(f));
            }
            ModelState::Cnn(mut m) => {
                ck.set("variant", m.variant);
                ck.set("input_size", m.input_size);
                ck.set("input_channels", INPUT_CHANNELS);
                ck.set("blocks", join(&m.variant.blocks()));
                ck.set("widths", join(&m.variant.widths()));
                push_state(&mut ck, &mut |f| m.visit_state(f));
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: ModelKind = ck.desc("kind")?.parse()?;
        let mut rng = rng::seeded(0, rng::domain::INIT);
        match kind {
            ModelKind::Svm => {
                let n_mfcc = ck.desc_parse("n_mfcc")?;
                let trained: bool = ck.desc_parse("trained")?;
                let model = if trained { Some(SvmModel::from_checkpoint(ck)?) } else { None };
                let gamma = match ck.desc("cfg_gamma")? {
                    "auto" => None,
                    _ => Some(ck.desc_parse("cfg_gamma")?),
                };
                let cfg = SvmConfig {
                    c: ck.desc_parse("cfg_c")?,
                    gamma,
                    tol: ck.desc_parse("tol")?,
                    max_iter: ck.desc_parse("max_iter")?,
                };
                Ok(ModelState::Svm(SvmClassifier { cfg, n_mfcc, model }))
            }
            ModelKind::Lstm => {
                let mut m = LstmClassifier::new(
                    ck.desc_parse("n_mels")?,
                    ck.desc_parse("hidden")?,
                    ck.desc_parse("dropout")?,
                    0,
                    &mut rng,
                )?;
                load_state(ck, &mut |f| m.visit_state(f))?;
                Ok(ModelState::Lstm(m))
            }
            ModelKind::CnnLite | ModelKind::Cnn34 => {
                let variant: CnnVariant = ck.desc("variant")?.parse()?;
                let mut m = CnnClassifier::new(variant, ck.desc_parse("input_size")?, &mut rng);
                load_state(ck, &mut |f| m.visit_state(f))?;
                Ok(ModelState::Cnn(m))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Eight class scores per example from raw `frames x bands` features.
    /// SVM slots for classes absent from training hold `-inf`.
    pub fn scores(&mut self, features: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        match self {
            ModelState::Svm(s) => {
                let x = s.matrix(features)?;
                s.trained()?.scores8(&x)
            }
            ModelState::Lstm(m) => features
                .iter()
                .map(|f| {
                    let (t, d) = f.shape2()?;
                    let x = (*f).clone().reshape(&[1, t, d])?;
                    Ok(m.forward(&x, Mode::Eval)?.into_data())
                })
                .collect(),
            ModelState::Cnn(m) => {
                let mut out = Vec::with_capacity(features.len());
                for chunk in features.chunks(CNN_EVAL_BATCH) {
                    let imgs = chunk.iter().map(|f| m.prepare(f)).collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&Tensor> = imgs.iter().collect();
                    let y = m.forward(&CnnClassifier::stack(&refs)?, Mode::Eval)?;
                    let (b, _) = y.shape2()?;
                    out.extend((0..b).map(|r| y.row(r).to_vec()));
                }
                Ok(out)
            }
        }
    }

    pub fn predict(&mut self, features: &[&Tensor]) -> Result<Vec<EmotionLabel>> {
        Ok(self
            .scores(features)?
            .iter()
            .map(|s| EmotionLabel::from_code(argmax(s)).expect("argmax below N_CLASSES"))
            .collect())
    }
}

/// Outcome of [`import_pretrained`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportReport {
    pub matched: Vec<String>,
    /// Model tensors left at their fresh initialization.
    pub skipped: Vec<String>,
    /// Checkpoint tensors with no counterpart in the model.
    pub unused: Vec<String>,
}

fn is_head(name: &str) -> bool {
    name.starts_with("fc.")
}

fn is_norm(name: &str) -> bool {
    name.starts_with("input.")
}

/// Copies weights stored under canonical ResNet names into `model`.
///
/// The classification head is copied only when its dims match; otherwise it
/// keeps its fresh initialization, unless `strict_head` demands a match.
/// Input-normalization statistics are optional. The model is left untouched
/// on error.
pub fn import_pretrained(ckpt: &Checkpoint, model: &mut CnnClassifier, strict_head: bool) -> Result<ImportReport> {
    let mut wanted: Vec<(String, Vec<usize>)> = Vec::new();
    model.visit_state(&mut |name, t| wanted.push((name.to_string(), t.dims().to_vec())));

    let mut report = ImportReport::default();
    for (name, dims) in &wanted {
        let found = ckpt.get(name);
        let optional = is_norm(name) || (is_head(name) && !strict_head);
        match found {
            Some(t) if t.dims() == dims.as_slice() => report.matched.push(name.clone()),
            Some(_) | None if optional => report.skipped.push(name.clone()),
            Some(t) => {
                return Err(Error::DimMismatch {
                    name: name.clone(),
                    expected: dims.clone(),
                    found: t.dims().to_vec(),
                })
            }
            None => return Err(Error::MissingTensor(name.clone())),
        }
    }
    // A head is imported whole or not at all.
    let head_partial = report.matched.iter().any(|n| is_head(n)) && report.skipped.iter().any(|n| is_head(n));
    if head_partial {
        let moved: Vec<String> = report.matched.iter().filter(|n| is_head(n)).cloned().collect();
        report.matched.retain(|n| !is_head(n));
        report.skipped.extend(moved);
    }
    report.unused = ckpt
        .tensors
        .iter()
        .map(|(n, _)| n)
        .filter(|n| !wanted.iter().any(|(w, _)| w == *n))
        .cloned()
        .collect();

    model.visit_state(&mut |name, t| {
        if report.matched.iter().any(|n| n == name) {
            *t = ckpt.get(name).expect("matched tensors exist").clone();
        }
    });
    Ok(report)
}

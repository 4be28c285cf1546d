use rand::Rng;

use super::InputNorm;
use crate::dataset::N_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Dense, Dropout, Layer, Mode, Param, SequenceEnds};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Two stacked bidirectional LSTMs over `batch x T x n_mels` log-mel frames.
/// The summary vector is the last forward state joined with the first-step
/// backward state; dropout and a linear head follow.
#[derive(Debug, Clone)]
pub struct LstmClassifier {
    pub n_mels: usize,
    pub hidden: usize,
    pub norm: InputNorm,
    pub lstm1: BiLstm,
    pub lstm2: BiLstm,
    ends: SequenceEnds,
    pub dropout: Dropout,
    pub fc: Dense,
}

impl LstmClassifier {
    pub fn new<R: Rng + ?Sized>(n_mels: usize, hidden: usize, dropout: f64, seed: u64, rng: &mut R) -> Result<Self> {
        if n_mels == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("lstm dims must be positive".into()));
        }
        Ok(LstmClassifier {
            n_mels,
            hidden,
            norm: InputNorm::identity(n_mels),
            lstm1: BiLstm::new("lstm1", n_mels, hidden, rng),
            lstm2: BiLstm::new("lstm2", 2 * hidden, hidden, rng),
            ends: SequenceEnds::new(),
            dropout: Dropout::new(dropout, seed)?,
            fc: Dense::new("fc", 2 * hidden, N_CLASSES, rng),
        })
    }

    /// Closed-form trainable parameter count.
    pub fn expected_param_count(n_mels: usize, hidden: usize) -> usize {
        let dir = |d: usize| 4 * hidden * (d + hidden + 1);
        2 * dir(n_mels) + 2 * dir(2 * hidden) + 2 * hidden * N_CLASSES + N_CLASSES
    }

    pub fn reseed_dropout(&mut self, seed: u64, epoch: u64) {
        self.dropout.reseed_from(&mut rng::item_stream(seed, epoch, rng::domain::DROPOUT));
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm.visit(f);
        self.visit_params(&mut |p| f(&p.name, &mut p.value));
    }
}

impl Layer for LstmClassifier {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.ndim() != 3 || x.dims()[2] != self.n_mels {
            return Err(Error::shape(format!(
                "lstm expects batch x T x {}, got {:?}",
                self.n_mels,
                x.dims()
            )));
        }
        let h = self.norm.apply_last(x)?;
        let h = self.lstm1.forward(&h, mode)?;
        let h = self.lstm2.forward(&h, mode)?;
        let h = self.ends.forward(&h, mode)?;
        let h = self.dropout.forward(&h, mode)?;
        self.fc.forward(&h, mode)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.fc.backward(grad_out)?;
        let g = self.dropout.backward(&g)?;
        let g = self.ends.backward(&g)?;
        let g = self.lstm2.backward(&g)?;
        let g = self.lstm1.backward(&g)?;
        let std = self.norm.std.data();
        let d = self.n_mels;
        Ok(Tensor::from_fn(g.dims(), |i| g.data()[i] / std[i % d]))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.lstm1.visit_params(f);
        self.lstm2.visit_params(f);
        self.fc.visit_params(f);
    }
}

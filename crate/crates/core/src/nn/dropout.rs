use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{no_forward, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Inverted dropout with its own reseedable stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout p must be in [0,1), got {p}")));
        }
        Ok(Dropout {
            p,
            rng: rng::seeded(seed, rng::domain::DROPOUT),
            mask: None,
        })
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = rng::seeded(seed, rng::domain::DROPOUT);
    }

    /// Replaces the stream with one derived from `rng`.
    pub fn reseed_from<R: Rng>(&mut self, rng: &mut R) {
        self.rng = ChaCha8Rng::from_rng(rng);
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let scale = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { scale })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.mask = Some(mask);
        Tensor::new(x.dims().to_vec(), data)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        match &self.mask {
            None => Ok(grad_out.clone()),
            Some(mask) if mask.len() == grad_out.len() => {
                let data = grad_out.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                Tensor::new(grad_out.dims().to_vec(), data)
            }
            Some(_) => Err(no_forward("dropout")),
        }
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

use super::{no_forward, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `batch x ch x ...` inputs.
///
/// Training normalizes with the biased batch variance and folds the unbiased
/// variance into the running estimate.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    running_mean_name: String,
    running_var_name: String,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    dims: Vec<usize>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new(prefix: &str, ch: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{prefix}.weight"), Tensor::filled(&[ch], 1.0)),
            beta: Param::zeros(format!("{prefix}.bias"), &[ch]),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::filled(&[ch], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            running_mean_name: format!("{prefix}.running_mean"),
            running_var_name: format!("{prefix}.running_var"),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn layout(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let d = x.dims();
        if d.len() < 2 || d[1] != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm expects batch x {} x ..., got {:?}",
                self.channels(),
                d
            )));
        }
        Ok((d[0], d[1], d[2..].iter().product()))
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (batch, ch, plane) = self.layout(x)?;
        if mode == Mode::Train && batch < 2 {
            return Err(Error::DegenerateBatch(batch));
        }
        let xd = x.data();
        let count = batch * plane;
        let mut mean = vec![0.0; ch];
        let mut inv_std = vec![0.0; ch];
        match mode {
            Mode::Train => {
                for c in 0..ch {
                    let values = || (0..batch).flat_map(move |b| xd[(b * ch + c) * plane..][..plane].iter().copied());
                    let m = values().sum::<f64>() / count as f64;
                    let ss: f64 = values().map(|v| (v - m) * (v - m)).sum();
                    let var = ss / count as f64;
                    mean[c] = m;
                    inv_std[c] = 1.0 / (var + self.eps).sqrt();
                    let unbiased = if count > 1 { ss / (count - 1) as f64 } else { var };
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * m;
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
                }
            }
            Mode::Eval => {
                for c in 0..ch {
                    mean[c] = self.running_mean.data()[c];
                    inv_std[c] = 1.0 / (self.running_var.data()[c] + self.eps).sqrt();
                }
            }
        }
        let (g, bt) = (self.gamma.value.data(), self.beta.value.data());
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    y[i] = g[c] * h + bt[c];
                }
            }
        }
        self.cache = Some(Cache {
            dims: x.dims().to_vec(),
            xhat,
            inv_std,
            mode,
        });
        Tensor::new(x.dims().to_vec(), y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| no_forward("batchnorm"))?;
        if grad_out.dims() != cache.dims.as_slice() {
            return Err(Error::shape("batchnorm grad_out dims"));
        }
        let (batch, ch) = (cache.dims[0], cache.dims[1]);
        let plane: usize = cache.dims[2..].iter().product();
        let count = (batch * plane) as f64;
        let gy = grad_out.data();
        let gamma = self.gamma.value.data().to_vec();
        let mut dx = vec![0.0; gy.len()];
        for c in 0..ch {
            let idx = || (0..batch).flat_map(move |b| (b * ch + c) * plane..(b * ch + c + 1) * plane);
            let sum_g: f64 = idx().map(|i| gy[i]).sum();
            let sum_gx: f64 = idx().map(|i| gy[i] * cache.xhat[i]).sum();
            self.gamma.grad.data_mut()[c] += sum_gx;
            self.beta.grad.data_mut()[c] += sum_g;
            let k = gamma[c] * cache.inv_std[c];
            match cache.mode {
                Mode::Train => {
                    for i in idx() {
                        dx[i] = k * (gy[i] - sum_g / count - cache.xhat[i] * sum_gx / count);
                    }
                }
                Mode::Eval => {
                    for i in idx() {
                        dx[i] = k * gy[i];
                    }
                }
            }
        }
        Tensor::new(cache.dims.clone(), dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&self.running_mean_name, &mut self.running_mean);
        f(&self.running_var_name, &mut self.running_var);
    }
}

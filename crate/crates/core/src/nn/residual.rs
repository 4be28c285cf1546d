use rand::Rng;

use super::{BatchNorm2d, Conv2d, Layer, Mode, Param, Relu};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Basic two-convolution residual block with an identity or 1x1-projection
/// shortcut. Parameter names follow the common `layerN.i.*` checkpoint layout
/// when `prefix` is `layerN.i`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    relu1: Relu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub downsample: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "residual shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.dims().to_vec(), data)
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(prefix: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(&format!("{prefix}.conv1"), in_ch, out_ch, 3, stride, 1, false, rng);
        let conv2 = Conv2d::new(&format!("{prefix}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(&format!("{prefix}.downsample.0"), in_ch, out_ch, 1, stride, 0, false, rng),
                BatchNorm2d::new(&format!("{prefix}.downsample.1"), out_ch),
            )
        });
        ResidualBlock {
            conv1,
            bn1: BatchNorm2d::new(&format!("{prefix}.bn1"), out_ch),
            relu1: Relu::new(),
            conv2,
            bn2: BatchNorm2d::new(&format!("{prefix}.bn2"), out_ch),
            downsample,
            relu_out: Relu::new(),
        }
    }
}

impl Layer for ResidualBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.conv1.forward(x, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward(&h, mode)?;
        let h = self.conv2.forward(&h, mode)?;
        let h = self.bn2.forward(&h, mode)?;
        let s = match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x, mode)?;
                bn.forward(&s, mode)?
            }
            None => x.clone(),
        };
        let sum = add(&h, &s)?;
        self.relu_out.forward(&sum, mode)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.relu_out.backward(grad_out)?;
        let gh = self.bn2.backward(&g)?;
        let gh = self.conv2.backward(&gh)?;
        let gh = self.relu1.backward(&gh)?;
        let gh = self.bn1.backward(&gh)?;
        let gx = self.conv1.backward(&gh)?;
        let gs = match &mut self.downsample {
            Some((conv, bn)) => {
                let gs = bn.backward(&g)?;
                conv.backward(&gs)?
            }
            None => g,
        };
        add(&gx, &gs)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
        if let Some((_, bn)) = &mut self.downsample {
            bn.visit_buffers(f);
        }
    }
}

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::InputNorm;
use crate::augment;
use crate::dataset::N_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Dense, GlobalAvgPool, Layer, MaxPool2d, Mode, Param, Relu, ResidualBlock};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnnVariant {
    /// One block per stage, widths 16-128.
    Lite,
    /// ResNet34 layout: [3, 4, 6, 3] blocks, widths 64-512.
    Resnet34,
}

impl CnnVariant {
    pub fn blocks(self) -> [usize; 4] {
        match self {
            CnnVariant::Lite => [1, 1, 1, 1],
            CnnVariant::Resnet34 => [3, 4, 6, 3],
        }
    }

    pub fn widths(self) -> [usize; 4] {
        match self {
            CnnVariant::Lite => [16, 32, 64, 128],
            CnnVariant::Resnet34 => [64, 128, 256, 512],
        }
    }
}

impl fmt::Display for CnnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CnnVariant::Lite => "lite",
            CnnVariant::Resnet34 => "resnet34",
        })
    }
}

impl FromStr for CnnVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lite" => Ok(CnnVariant::Lite),
            "resnet34" => Ok(CnnVariant::Resnet34),
            other => Err(Error::InvalidConfig(format!("unknown cnn variant {other:?}"))),
        }
    }
}

/// Residual CNN over square log-mel images replicated to three channels.
///
/// Input is `batch x 1 x S x S` in raw log-mel units; normalization and
/// channel replication happen inside `forward`.
#[derive(Debug, Clone)]
pub struct CnnClassifier {
    pub variant: CnnVariant,
    /// Side length spectrograms are resized to.
    pub input_size: usize,
    pub norm: InputNorm,
    pub conv1: Conv2d,
    /// Single-channel twin of `conv1` holding its channel-summed weights. The
    /// three input channels are identical copies, so convolving once with the
    /// summed kernel gives the same response at a third of the cost.
    stem: Conv2d,
    /// When false (the default), `backward` skips the input gradient and returns zeros.
    pub input_grad: bool,
    pub bn1: BatchNorm2d,
    relu: Relu,
    pool: MaxPool2d,
    pub blocks: Vec<ResidualBlock>,
    gap: GlobalAvgPool,
    pub fc: Dense,
}

impl CnnClassifier {
    pub fn new<R: Rng + ?Sized>(variant: CnnVariant, input_size: usize, rng: &mut R) -> Self {
        let widths = variant.widths();
        let conv1 = Conv2d::new("conv1", INPUT_CHANNELS, widths[0], 7, 2, 3, false, rng);
        let mut stem = conv1.clone();
        stem.weight = Param::zeros("stem.weight", &[widths[0], 1, 7, 7]);
        stem.input_grad = false;
        let mut blocks = Vec::new();
        let mut in_ch = widths[0];
        for (stage, (&n, &w)) in variant.blocks().iter().zip(&widths).enumerate() {
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(&format!("layer{}.{b}", stage + 1), in_ch, w, stride, rng));
                in_ch = w;
            }
        }
        CnnClassifier {
            variant,
            input_size,
            norm: InputNorm::identity(1),
            conv1,
            stem,
            input_grad: false,
            bn1: BatchNorm2d::new("bn1", widths[0]),
            relu: Relu::new(),
            pool: MaxPool2d::new(3, 2, 1),
            blocks,
            gap: GlobalAvgPool::new(),
            fc: Dense::new("fc", widths[3], N_CLASSES, rng),
        }
    }

    pub fn stage_block_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for b in &self.blocks {
            let stage: usize = b.conv1.weight.name["layer".len()..]
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .expect("block names start with layerN");
            counts[stage - 1] += 1;
        }
        counts
    }

    /// Raw `frames x n_mels` features to one `S x S` image.
    pub fn prepare(&self, features: &Tensor) -> Result<Tensor> {
        augment::to_model_square(features, self.input_size)
    }

    /// Stacks `S x S` images into the `batch x 1 x S x S` input layout.
    pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::shape("empty image batch"))?;
        let (h, w) = first.shape2()?;
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.dims() != [h, w] {
                return Err(Error::shape("images in a batch must share dims"));
            }
            data.extend_from_slice(img.data());
        }
        Tensor::new(vec![images.len(), 1, h, w], data)
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm.visit(f);
        self.visit_params(&mut |p| f(&p.name, &mut p.value));
        self.visit_buffers(f);
    }
}

impl Layer for CnnClassifier {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let d = x.dims();
        if d.len() != 4 || d[1] != 1 {
            return Err(Error::shape(format!("cnn expects batch x 1 x H x W, got {d:?}")));
        }
        let (m, s) = (self.norm.mean.data()[0], self.norm.std.data()[0]);
        let h = x.map(|v| (v - m) / s);
        let wd = self.conv1.weight.value.dims();
        let taps = wd[2] * wd[3];
        let w = self.conv1.weight.value.data();
        let folded = self.stem.weight.value.data_mut();
        for (o, dst) in folded.chunks_exact_mut(taps).enumerate() {
            for (t, v) in dst.iter_mut().enumerate() {
                *v = (0..INPUT_CHANNELS).map(|c| w[(o * INPUT_CHANNELS + c) * taps + t]).sum();
            }
        }
        self.stem.input_grad = self.input_grad;
        let h = self.stem.forward(&h, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu.forward(&h, mode)?;
        let mut h = self.pool.forward(&h, mode)?;
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
        }
        let h = self.gap.forward(&h, mode)?;
        self.fc.forward(&h, mode)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.fc.backward(grad_out)?;
        let mut g = self.gap.backward(&g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = self.pool.backward(&g)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        self.stem.weight.zero_grad();
        let g = self.stem.backward(&g)?;
        let taps = self.conv1.kernel() * self.conv1.kernel();
        let gw = self.stem.weight.grad.data();
        for (o, dst) in self.conv1.weight.grad.data_mut().chunks_exact_mut(INPUT_CHANNELS * taps).enumerate() {
            for c in 0..INPUT_CHANNELS {
                for (d, v) in dst[c * taps..(c + 1) * taps].iter_mut().zip(&gw[o * taps..(o + 1) * taps]) {
                    *d += v;
                }
            }
        }
        let s = self.norm.std.data()[0];
        Ok(g.map(|v| v / s))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.fc.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.bn1.visit_buffers(f);
        for b in &mut self.blocks {
            b.visit_buffers(f);
        }
    }
}

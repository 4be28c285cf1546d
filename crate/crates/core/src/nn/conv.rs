use rand::Rng;

use super::{expect_dims, no_forward, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Target column count per GEMM call; small feature maps are batched together.
const COLS_PER_GROUP: usize = 1024;

/// 2-D cross-correlation with zero padding. Output size uses floor division,
/// `(H + 2p - k) / s + 1`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    /// When false, `backward` skips the input gradient and returns zeros.
    pub input_grad: bool,
    input: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    fn group_size(&self) -> usize {
        COLS_PER_GROUP.div_ceil(self.plane()).clamp(1, self.batch)
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        // He-uniform for ReLU stacks.
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Param::uniform(format!("{prefix}.weight"), &[out_ch, in_ch, kernel, kernel], bound, rng);
        let bias = bias.then(|| {
            let b = (1.0 / fan_in as f64).sqrt();
            Param::uniform(format!("{prefix}.bias"), &[out_ch], b, rng)
        });
        Conv2d {
            weight,
            bias,
            stride,
            pad,
            input_grad: true,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.dims()[2]
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        expect_dims(x, 4, "conv2d")?;
        let d = x.dims();
        let wd = self.weight.value.dims();
        let (out_ch, in_ch, k) = (wd[0], wd[1], wd[2]);
        if d[1] != in_ch {
            return Err(Error::shape(format!("conv2d expects {in_ch} channels, got {}", d[1])));
        }
        let (h, w) = (d[2], d[3]);
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(Error::shape(format!(
                "conv2d kernel {k} larger than padded input {h}x{w}"
            )));
        }
        Ok(Geometry {
            batch: d[0],
            in_ch,
            h,
            w,
            out_ch,
            k,
            oh: (h + 2 * self.pad - k) / self.stride + 1,
            ow: (w + 2 * self.pad - k) / self.stride + 1,
        })
    }

    /// Columns for images `b0..b0+g`: row = (c, ky, kx), column = (b, oy, ox).
    fn im2col(&self, g: &Geometry, x: &[f64], b0: usize, n: usize, col: &mut [f64]) {
        let plane = g.plane();
        let cols = n * plane;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..g.in_ch {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for bi in 0..n {
                        let src = &x[((b0 + bi) * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..g.oh {
                            let iy = oy as isize * s + ky as isize - p;
                            let out = &mut dst[bi * plane + oy * g.ow..][..g.ow];
                            if iy < 0 || iy >= g.h as isize {
                                out.fill(0.0);
                                continue;
                            }
                            let src_row = &src[iy as usize * g.w..][..g.w];
                            let (lo, hi) = valid_cols(kx, g.ow, g.w, self.stride, self.pad);
                            out[..lo].fill(0.0);
                            out[hi..].fill(0.0);
                            let start = lo * self.stride + kx - self.pad;
                            if self.stride == 1 {
                                out[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                            } else {
                                for (o, &v) in out[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(self.stride)) {
                                    *o = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, g: &Geometry, col: &[f64], b0: usize, n: usize, dx: &mut [f64]) {
        let plane = g.plane();
        let cols = n * plane;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..g.in_ch {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for bi in 0..n {
                        let dst = &mut dx[((b0 + bi) * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..g.oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                            let vals = &src[bi * plane + oy * g.ow..][..g.ow];
                            let (lo, hi) = valid_cols(kx, g.ow, g.w, self.stride, self.pad);
                            let start = lo * self.stride + kx - self.pad;
                            for (d, v) in dst_row[start..].iter_mut().step_by(self.stride).zip(&vals[lo..hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - pad` lies inside `0..w`.
fn valid_cols(kx: usize, ow: usize, w: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride).min(ow);
    // Largest ox with ox * stride + kx < w + pad.
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let plane = g.plane();
        let group = g.group_size();
        let mut y = vec![0.0; g.batch * g.out_ch * plane];
        let mut col = vec![0.0; g.patch() * group * plane];
        let mut prod = vec![0.0; g.out_ch * group * plane];
        let mut b0 = 0;
        while b0 < g.batch {
            let n = group.min(g.batch - b0);
            let cols = n * plane;
            self.im2col(&g, x.data(), b0, n, &mut col[..g.patch() * cols]);
            let out = &mut prod[..g.out_ch * cols];
            linalg::gemm(g.out_ch, cols, g.patch(), self.weight.value.data(), &col[..g.patch() * cols], out, false);
            for bi in 0..n {
                for o in 0..g.out_ch {
                    let dst = &mut y[((b0 + bi) * g.out_ch + o) * plane..][..plane];
                    dst.copy_from_slice(&out[o * cols + bi * plane..][..plane]);
                    if let Some(b) = &self.bias {
                        let bv = b.value.data()[o];
                        dst.iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
            b0 += n;
        }
        self.input = Some(x.clone());
        Tensor::new(vec![g.batch, g.out_ch, g.oh, g.ow], y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| no_forward("conv2d"))?;
        let g = self.geometry(&x)?;
        if grad_out.dims() != [g.batch, g.out_ch, g.oh, g.ow] {
            return Err(Error::shape("conv2d grad_out dims"));
        }
        let plane = g.plane();
        let group = g.group_size();
        let gy = grad_out.data();
        let mut dx = vec![0.0; x.len()];
        let mut col = vec![0.0; g.patch() * group * plane];
        let mut gmat = vec![0.0; g.out_ch * group * plane];
        let mut dcol = if self.input_grad { vec![0.0; g.patch() * group * plane] } else { Vec::new() };
        let mut b0 = 0;
        while b0 < g.batch {
            let n = group.min(g.batch - b0);
            let cols = n * plane;
            let gm = &mut gmat[..g.out_ch * cols];
            for bi in 0..n {
                for o in 0..g.out_ch {
                    gm[o * cols + bi * plane..][..plane].copy_from_slice(&gy[((b0 + bi) * g.out_ch + o) * plane..][..plane]);
                }
            }
            if let Some(b) = &mut self.bias {
                let gb = b.grad.data_mut();
                for (o, acc) in gb.iter_mut().enumerate() {
                    *acc += gm[o * cols..(o + 1) * cols].iter().sum::<f64>();
                }
            }
            let c = &mut col[..g.patch() * cols];
            self.im2col(&g, x.data(), b0, n, c);
            linalg::gemm_bt(g.out_ch, g.patch(), cols, gm, c, self.weight.grad.data_mut(), true);
            if self.input_grad {
                let dc = &mut dcol[..g.patch() * cols];
                linalg::gemm_at(g.patch(), cols, g.out_ch, self.weight.value.data(), gm, dc, false);
                self.col2im(&g, dc, b0, n, &mut dx);
            }
            b0 += n;
        }
        let dims = x.dims().to_vec();
        self.input = Some(x);
        Tensor::new(dims, dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Element-wise `max(0, x)`.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        Ok(x.map(|v| v.max(0.0)))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self.mask.as_ref().ok_or_else(|| no_forward("relu"))?;
        if mask.len() != grad_out.len() {
            return Err(Error::shape("relu grad_out dims"));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::new(grad_out.dims().to_vec(), data)
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

/// Max pooling with implicit `-inf` padding.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            size,
            stride,
            pad,
            argmax: None,
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        expect_dims(x, 4, "maxpool")?;
        let d = x.dims();
        let (b, c, h, w) = (d[0], d[1], d[2], d[3]);
        if h + 2 * self.pad < self.size || w + 2 * self.pad < self.size {
            return Err(Error::shape("maxpool window larger than input"));
        }
        let oh = (h + 2 * self.pad - self.size) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.size) / self.stride + 1;
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut idx = Vec::with_capacity(b * c * oh * ow);
        let xd = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..self.size {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.size {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    idx.push(best_i);
                }
            }
        }
        self.argmax = Some((idx, d.to_vec()));
        Tensor::new(vec![b, c, oh, ow], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (idx, dims) = self.argmax.as_ref().ok_or_else(|| no_forward("maxpool"))?;
        if idx.len() != grad_out.len() {
            return Err(Error::shape("maxpool grad_out dims"));
        }
        let mut dx = Tensor::zeros(dims);
        let d = dx.data_mut();
        for (&i, &g) in idx.iter().zip(grad_out.data()) {
            d[i] += g;
        }
        Ok(dx)
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

/// `batch x ch x H x W -> batch x ch`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    dims: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        expect_dims(x, 4, "global average pool")?;
        let d = x.dims();
        let plane = d[2] * d[3];
        let out = x
            .data()
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        self.dims = Some(d.to_vec());
        Tensor::new(vec![d[0], d[1]], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let dims = self.dims.as_ref().ok_or_else(|| no_forward("global average pool"))?;
        if grad_out.dims() != &dims[..2] {
            return Err(Error::shape("global average pool grad_out dims"));
        }
        let plane = dims[2] * dims[3];
        let mut dx = Vec::with_capacity(grad_out.len() * plane);
        for &g in grad_out.data() {
            dx.extend(std::iter::repeat_n(g / plane as f64, plane));
        }
        Tensor::new(dims.clone(), dx)
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

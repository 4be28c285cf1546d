//! Training-time augmentation: mixup, spectrogram affine/brightness
//! transforms, bilinear resizing for progressive training.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::dataset::N_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A feature tensor with a label distribution over the 8 classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: usize,
    pub features: Tensor,
    pub target: Vec<f64>,
}

impl LabeledExample {
    pub fn one_hot(id: usize, features: Tensor, class: usize) -> Self {
        let mut target = vec![0.0; N_CLASSES];
        target[class] = 1.0;
        LabeledExample {
            id,
            features,
            target,
        }
    }

    /// Index of the largest target probability (lowest index on ties).
    pub fn hard_label(&self) -> usize {
        argmax(&self.target)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixupSample {
    pub x_tilde: Tensor,
    pub y_tilde: Vec<f64>,
    pub lambda: f64,
    pub parent_ids: (usize, usize),
}

fn is_distribution(v: &[f64]) -> bool {
    v.iter().all(|&p| p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

/// Convex combination of two examples and their label distributions.
pub fn mixup(a: &LabeledExample, b: &LabeledExample, lambda: f64) -> Result<MixupSample> {
    if a.features.dims() != b.features.dims() {
        return Err(Error::shape(format!(
            "mixup parents have dims {:?} and {:?}",
            a.features.dims(),
            b.features.dims()
        )));
    }
    if a.target.len() != b.target.len() {
        return Err(Error::shape("mixup parents have different label widths"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    for t in [&a.target, &b.target] {
        if !is_distribution(t) {
            return Err(Error::InvalidTarget {
                row: 0,
                sum: t.iter().sum(),
            });
        }
    }
    let mu = 1.0 - lambda;
    let data = a
        .features
        .data()
        .iter()
        .zip(b.features.data())
        .map(|(&xa, &xb)| lambda * xa + mu * xb)
        .collect();
    let y_tilde = a
        .target
        .iter()
        .zip(&b.target)
        .map(|(&ya, &yb)| lambda * ya + mu * yb)
        .collect();
    Ok(MixupSample {
        x_tilde: Tensor::new(a.features.dims().to_vec(), data)?,
        y_tilde,
        lambda,
        parent_ids: (a.id, b.id),
    })
}

/// Draw lambda ~ Beta(alpha, alpha) as G1 / (G1 + G2) with G ~ Gamma(alpha, 1).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("mixup alpha {alpha} must be positive")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    loop {
        let g1 = gamma.sample(rng);
        let g2 = gamma.sample(rng);
        let total = g1 + g2;
        // both draws can underflow to zero for tiny alpha
        if total > 0.0 {
            return Ok((g1 / total).clamp(0.0, 1.0));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAugConfig {
    pub max_rotate_deg: f64,
    pub zoom_range: (f64, f64),
    /// Additive shift range in the log domain, applied as +/- this value.
    pub brightness_delta: f64,
}

impl Default for ImageAugConfig {
    fn default() -> Self {
        ImageAugConfig {
            max_rotate_deg: 4.0,
            zoom_range: (1.0, 1.15),
            brightness_delta: 0.4,
        }
    }
}

impl ImageAugConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.zoom_range;
        if !(lo >= 1.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!("zoom range ({lo}, {hi}) must satisfy 1 <= lo <= hi")));
        }
        if !(self.max_rotate_deg >= 0.0) || !(self.brightness_delta >= 0.0) {
            return Err(Error::InvalidConfig("rotation and brightness ranges must be >= 0".into()));
        }
        Ok(())
    }
}

fn hw(spec: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = spec.shape2()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("need at least 2x2, got {h}x{w}")));
    }
    Ok((h, w))
}

/// Bilinear sample at fractional (row, col); both must lie in range.
fn bilinear_at(data: &[f64], w: usize, h: usize, r: f64, c: f64) -> f64 {
    let r0 = (r.floor() as usize).min(h - 1);
    let c0 = (c.floor() as usize).min(w - 1);
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let top = data[r0 * w + c0] * (1.0 - fc) + data[r0 * w + c1] * fc;
    let bottom = data[r1 * w + c0] * (1.0 - fc) + data[r1 * w + c1] * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Rotate by `angle_deg` about the centre and zoom in by `zoom`, sampling
/// bilinearly. Pixels whose source falls outside take the tensor minimum.
pub fn affine(spec: &Tensor, angle_deg: f64, zoom: f64) -> Result<Tensor> {
    let (h, w) = hw(spec)?;
    if !(zoom > 0.0) {
        return Err(Error::InvalidConfig(format!("zoom {zoom} must be positive")));
    }
    if angle_deg == 0.0 && zoom == 1.0 {
        return Ok(spec.clone());
    }
    let fill = spec.min();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cr, cc) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let eps = 1e-9;
    let src = spec.data();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (dr, dc) = (i as f64 - cr, j as f64 - cc);
            // inverse map: rotate by -angle, then undo the zoom
            let r = (cos * dr + sin * dc) / zoom + cr;
            let c = (-sin * dr + cos * dc) / zoom + cc;
            let inside = r >= -eps && r <= (h - 1) as f64 + eps && c >= -eps && c <= (w - 1) as f64 + eps;
            out.push(if inside {
                bilinear_at(src, w, h, r.clamp(0.0, (h - 1) as f64), c.clamp(0.0, (w - 1) as f64))
            } else {
                fill
            });
        }
    }
    let mut t = Tensor::new(vec![h, w], out)?;
    t.meta = spec.meta.clone();
    Ok(t)
}

/// Random rotation within +/- `max_rotate_deg` and zoom within `zoom_range`.
pub fn random_affine<R: Rng + ?Sized>(spec: &Tensor, cfg: &ImageAugConfig, rng: &mut R) -> Result<Tensor> {
    cfg.validate()?;
    let angle = if cfg.max_rotate_deg > 0.0 {
        rng.random_range(-cfg.max_rotate_deg..=cfg.max_rotate_deg)
    } else {
        0.0
    };
    let (lo, hi) = cfg.zoom_range;
    let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    affine(spec, angle, zoom)
}

/// Add `delta` to every cell (a gain in the power domain).
pub fn shift_brightness(spec: &Tensor, delta: f64) -> Tensor {
    spec.map(|v| v + delta)
}

pub fn brightness_shift<R: Rng + ?Sized>(spec: &Tensor, cfg: &ImageAugConfig, rng: &mut R) -> Tensor {
    let d = cfg.brightness_delta;
    let delta = if d > 0.0 { rng.random_range(-d..=d) } else { 0.0 };
    shift_brightness(spec, delta)
}

/// Bilinear resize with half-pixel centres (align_corners = false).
pub fn resize_bilinear(spec: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    let (h, w) = hw(spec)?;
    let (oh, ow) = size;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    let src_coord = |i: usize, n_in: usize, n_out: usize| {
        ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
    };
    let cols: Vec<f64> = (0..ow).map(|j| src_coord(j, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let r = src_coord(i, h, oh);
        for &c in &cols {
            out.push(bilinear_at(spec.data(), w, h, r, c));
        }
    }
    let mut t = Tensor::new(vec![oh, ow], out)?;
    t.meta = spec.meta.clone();
    Ok(t)
}

/// `frames x n_mels` spectrogram to a `size x size` image with mel bands as
/// rows.
pub fn to_model_square(spec: &Tensor, size: usize) -> Result<Tensor> {
    let transposed = spec.transpose2()?;
    let (h, w) = transposed.shape2()?;
    if (h, w) == (size, size) {
        return Ok(transposed);
    }
    resize_bilinear(&transposed, (size, size))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResizePolicy {
    pub stage_sizes: Vec<usize>,
}

impl Default for ResizePolicy {
    fn default() -> Self {
        ResizePolicy {
            stage_sizes: vec![128, 256],
        }
    }
}

impl ResizePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.stage_sizes.is_empty() {
            return Err(Error::InvalidConfig("resize policy needs at least one stage".into()));
        }
        if self.stage_sizes.iter().any(|&s| s < 8) || self.stage_sizes.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidConfig(format!(
                "stage sizes {:?} must be >= 8 and strictly increasing",
                self.stage_sizes
            )));
        }
        Ok(())
    }

    pub fn first(&self) -> usize {
        self.stage_sizes[0]
    }
}

//! Feature extraction: framing, STFT power, mel filterbank, log-mel, DCT-II
//! and MFCC.
//!
//! All arithmetic is 64-bit. Conventions: periodic Hann window, reflect
//! padding by half a frame on each side, HTK mel scale without area
//! normalization, natural log with a floor.

pub mod fft;

use std::fmt;
use std::str::FromStr;

use crate::audio::{self, AudioClip};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

pub use fft::{Complex, Fft};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Reflect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop_len: usize,
    pub window: Window,
    pub pad_mode: PadMode,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_len: 1024,
            hop_len: 256,
            window: Window::Hann,
            pad_mode: PadMode::Reflect,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.frame_len.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "frame length {} is not a power of two",
                self.frame_len
            )));
        }
        if self.hop_len == 0 || self.hop_len > self.frame_len {
            return Err(Error::InvalidConfig(format!(
                "hop {} must be in 1..={}",
                self.hop_len, self.frame_len
            )));
        }
        Ok(())
    }

    pub fn n_fft_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min_hz: f64,
    /// `None` means the Nyquist frequency of the clip.
    pub f_max_hz: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 128,
            f_min_hz: 0.0,
            f_max_hz: None,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn f_max_for(&self, sample_rate_hz: u32) -> f64 {
        self.f_max_hz.unwrap_or(sample_rate_hz as f64 / 2.0)
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let f_max = self.f_max_for(sample_rate_hz);
        if self.n_mels < 2 {
            return Err(Error::InvalidConfig("need at least 2 mel bands".into()));
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < f_max && f_max <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "mel range {}..{f_max} Hz invalid for Nyquist {nyquist} Hz",
                self.f_min_hz
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the mel filters, plus the two outer edges:
/// `n_mels + 2` points equally spaced in mel.
pub fn mel_points_hz(cfg: &MelConfig, sample_rate_hz: u32) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min_hz);
    let hi = hz_to_mel(cfg.f_max_for(sample_rate_hz));
    let steps = cfg.n_mels + 1;
    (0..=steps)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / steps as f64))
        .collect()
}

/// Triangular filters, `n_mels x n_fft_bins`, peak weight 1 at each centre.
pub fn build_mel_filterbank(cfg: &MelConfig, sample_rate_hz: u32, n_fft_bins: usize) -> Result<Tensor> {
    cfg.validate(sample_rate_hz)?;
    if n_fft_bins < 2 {
        return Err(Error::InvalidConfig("need at least 2 FFT bins".into()));
    }
    let n_fft = 2 * (n_fft_bins - 1);
    let points = mel_points_hz(cfg, sample_rate_hz);
    let bin_hz: Vec<f64> = (0..n_fft_bins)
        .map(|b| b as f64 * sample_rate_hz as f64 / n_fft as f64)
        .collect();
    let mut weights = vec![0.0; cfg.n_mels * n_fft_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        let row = &mut weights[m * n_fft_bins..(m + 1) * n_fft_bins];
        for (w, &f) in row.iter_mut().zip(&bin_hz) {
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            *w = up.min(down).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::DegenerateFilter { index: m });
        }
    }
    Tensor::new(vec![cfg.n_mels, n_fft_bins], weights)
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect_index(i: isize, len: usize) -> usize {
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Power spectrogram `|X|^2`, `frames x (frame_len/2 + 1)`.
pub fn stft_power(clip: &AudioClip, cfg: &StftConfig) -> Result<Tensor> {
    cfg.validate()?;
    let x = &clip.samples;
    if x.len() < 2 {
        return Err(Error::ClipTooShort(x.len()));
    }
    let n = cfg.frame_len;
    let pad = (n / 2) as isize;
    let bins = cfg.n_fft_bins();
    let frames = cfg.frame_count(x.len());
    let window = hann_window(n);
    let fft = Fft::new(n);
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::default(); n];
    for t in 0..frames {
        let start = (t * cfg.hop_len) as isize - pad;
        for (j, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + j as isize, x.len());
            *slot = Complex::new(x[idx] as f64 * window[j], 0.0);
        }
        fft.forward(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    let mut t = Tensor::new(vec![frames, bins], out)?;
    t.meta.insert("hop_len".into(), cfg.hop_len.to_string());
    t.meta.insert("frame_len".into(), cfg.frame_len.to_string());
    Ok(t)
}

/// Natural-log mel spectrogram, `frames x n_mels`.
pub fn log_mel_spectrogram(clip: &AudioClip, stft: &StftConfig, mel: &MelConfig) -> Result<Tensor> {
    let power = stft_power(clip, stft)?;
    let fb = build_mel_filterbank(mel, clip.sample_rate_hz, stft.n_fft_bins())?;
    let (frames, bins) = power.shape2()?;
    let mut out = vec![0.0; frames * mel.n_mels];
    linalg::gemm_bt(frames, mel.n_mels, bins, power.data(), fb.data(), &mut out, false);
    for v in &mut out {
        *v = v.max(mel.log_floor).ln();
    }
    let mut t = Tensor::new(vec![frames, mel.n_mels], out)?;
    t.meta = power.meta;
    t.meta.insert("n_mels".into(), mel.n_mels.to_string());
    Ok(t)
}

/// Orthonormal DCT-II matrix, `n_out x n_in`.
pub fn dct2_matrix(n_in: usize, n_out: usize) -> Result<Tensor> {
    if n_out == 0 || n_out > n_in {
        return Err(Error::InvalidConfig(format!(
            "DCT needs 1 <= n_out ({n_out}) <= n_in ({n_in})"
        )));
    }
    let scale0 = (1.0 / n_in as f64).sqrt();
    let scale = (2.0 / n_in as f64).sqrt();
    Ok(Tensor::from_fn(&[n_out, n_in], |idx| {
        let (k, j) = (idx / n_in, idx % n_in);
        let s = if k == 0 { scale0 } else { scale };
        s * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n_in) as f64).cos()
    }))
}

/// Apply a DCT to each row of a `frames x n_mels` log-mel tensor.
pub fn cepstra_from_log_mel(log_mel: &Tensor, n_mfcc: usize) -> Result<Tensor> {
    let (frames, n_mels) = log_mel.shape2()?;
    let dct = dct2_matrix(n_mels, n_mfcc)?;
    let mut out = vec![0.0; frames * n_mfcc];
    linalg::gemm_bt(frames, n_mfcc, n_mels, log_mel.data(), dct.data(), &mut out, false);
    let mut t = Tensor::new(vec![frames, n_mfcc], out)?;
    t.meta = log_mel.meta.clone();
    t.meta.insert("n_mfcc".into(), n_mfcc.to_string());
    Ok(t)
}

/// MFCCs, `frames x n_mfcc`.
pub fn mfcc(clip: &AudioClip, stft: &StftConfig, mel: &MelConfig, n_mfcc: usize) -> Result<Tensor> {
    if n_mfcc > mel.n_mels {
        return Err(Error::InvalidConfig(format!(
            "{n_mfcc} MFCCs requested from {} mel bands",
            mel.n_mels
        )));
    }
    cepstra_from_log_mel(&log_mel_spectrogram(clip, stft, mel)?, n_mfcc)
}

/// Mean over the time (first) axis of a `frames x d` tensor.
pub fn mean_pool_time(features: &Tensor) -> Result<Tensor> {
    let (frames, d) = features.shape2()?;
    if frames == 0 {
        return Err(Error::shape("cannot pool zero frames"));
    }
    let mut acc = vec![0.0; d];
    for t in 0..frames {
        for (a, &v) in acc.iter_mut().zip(features.row(t)) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= frames as f64;
    }
    Tensor::new(vec![d], acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    LogMel,
    Mfcc,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::LogMel => "logmel",
            FeatureKind::Mfcc => "mfcc",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logmel" => Ok(FeatureKind::LogMel),
            "mfcc" => Ok(FeatureKind::Mfcc),
            other => Err(Error::InvalidConfig(format!("unknown feature kind {other:?}"))),
        }
    }
}

/// Complete recipe from a decoded clip to a feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub sample_rate_hz: u32,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub n_mfcc: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            kind: FeatureKind::LogMel,
            sample_rate_hz: audio::DEFAULT_SAMPLE_RATE,
            stft: StftConfig::default(),
            mel: MelConfig::default(),
            n_mfcc: 20,
        }
    }
}

impl FeatureConfig {
    pub fn extract(&self, clip: &AudioClip) -> Result<Tensor> {
        let resampled;
        let clip = if clip.sample_rate_hz == self.sample_rate_hz {
            clip
        } else {
            resampled = audio::resample(clip, self.sample_rate_hz)?;
            &resampled
        };
        match self.kind {
            FeatureKind::LogMel => log_mel_spectrogram(clip, &self.stft, &self.mel),
            FeatureKind::Mfcc => mfcc(clip, &self.stft, &self.mel, self.n_mfcc),
        }
    }

    /// `key=value` lines describing this configuration.
    pub fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("kind".into(), self.kind.to_string()),
            ("sample_rate_hz".into(), self.sample_rate_hz.to_string()),
            ("frame_len".into(), self.stft.frame_len.to_string()),
            ("hop_len".into(), self.stft.hop_len.to_string()),
            ("window".into(), "hann".into()),
            ("pad_mode".into(), "reflect".into()),
            ("n_mels".into(), self.mel.n_mels.to_string()),
            ("f_min_hz".into(), self.mel.f_min_hz.to_string()),
            (
                "f_max_hz".into(),
                self.mel.f_max_for(self.sample_rate_hz).to_string(),
            ),
            ("log_floor".into(), self.mel.log_floor.to_string()),
            ("n_mfcc".into(), self.n_mfcc.to_string()),
        ]
    }
}

//! Plain-file renderings of tensors and waveforms for inspection and plotting.

use std::fmt::Write as _;

use crate::audio::AudioClip;
use crate::error::Result;
use crate::tensor::Tensor;

/// Binary 16-bit PGM ("P5", maxval 65535), min-max normalized. Row 0 of the
/// tensor is the top image row. A constant tensor renders black.
pub fn pgm16(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image.shape2()?;
    let (lo, hi) = (image.min(), image.max());
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(h * w * 2);
    for &v in image.data() {
        let level = if span > 0.0 && span.is_finite() {
            (((v - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok(out)
}

/// Spectrogram image with low frequencies at the bottom: `frames x bands`
/// becomes `bands x frames`, rows flipped.
pub fn spectrogram_image(features: &Tensor) -> Result<Tensor> {
    let (frames, bands) = features.shape2()?;
    Ok(Tensor::from_fn(&[bands, frames], |i| {
        let (r, c) = (i / frames, i % frames);
        features.at2(c, bands - 1 - r)
    }))
}

/// Comma-separated rows of a 2-D tensor.
pub fn tensor_csv(t: &Tensor) -> Result<String> {
    let (rows, _) = t.shape2()?;
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    Ok(out)
}

/// `time_s,amplitude` per sample.
pub fn waveform_csv(clip: &AudioClip) -> String {
    let mut out = String::from("time_s,amplitude\n");
    let sr = clip.sample_rate_hz as f64;
    for (i, s) in clip.samples.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i as f64 / sr, s);
    }
    out
}

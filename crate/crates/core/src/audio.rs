//! WAV decoding/encoding and linear-interpolation resampling.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Canonical sample rate of the pipeline.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Mono waveform with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub source_path: Option<PathBuf>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(AudioClip {
            samples,
            sample_rate_hz,
            source_path: None,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

pub fn decode_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut clip = decode_wav_bytes(&bytes)?;
    clip.source_path = Some(path.to_path_buf());
    Ok(clip)
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(Error::MalformedContainer("fmt chunk shorter than 16 bytes".into()));
    }
    let mut format = le_u16(body, 0);
    if format == FORMAT_EXTENSIBLE {
        // WAVE_FORMAT_EXTENSIBLE: sub-format GUID starts at byte 24; its first
        // two bytes carry the plain format tag.
        if body.len() < 26 {
            return Err(Error::MalformedContainer("truncated extensible fmt chunk".into()));
        }
        format = le_u16(body, 24);
    }
    Ok(FmtChunk {
        format,
        channels: le_u16(body, 2),
        sample_rate: le_u32(body, 4),
        bits: le_u16(body, 14),
    })
}

/// Decode an in-memory RIFF/WAVE file into a mono clip.
pub fn decode_wav_bytes(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedContainer("missing RIFF/WAVE magic".into()));
    }
    let mut fmt = None;
    let mut data = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::MalformedContainer(format!(
                    "chunk {:?} claims {size} bytes past end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[start..end])?),
            b"data" => data = Some(&bytes[start..end]),
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| Error::MalformedContainer("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::MalformedContainer("no data chunk".into()))?;

    if fmt.channels == 0 || fmt.channels > 2 {
        return Err(Error::UnsupportedEncoding(format!("{} channels", fmt.channels)));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::MalformedContainer("sample rate of zero".into()));
    }
    let channels = fmt.channels as usize;
    let interleaved: Vec<f32> = match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
            .collect(),
        (FORMAT_FLOAT, 32) => {
            let mut out = Vec::with_capacity(data.len() / 4);
            for c in data.chunks_exact(4) {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if !v.is_finite() {
                    return Err(Error::MalformedContainer("non-finite float sample".into()));
                }
                out.push(v.clamp(-1.0, 1.0));
            }
            out
        }
        (tag, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "format tag {tag} with {bits} bits per sample"
            )))
        }
    };
    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(Error::EmptyAudio);
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|lr| (lr[0] + lr[1]) / 2.0)
            .collect()
    };
    Ok(AudioClip {
        samples,
        sample_rate_hz: fmt.sample_rate,
        source_path: None,
    })
}

fn wav_header(format: u16, bits: u16, sample_rate: u32, data_len: usize) -> Vec<u8> {
    let block_align = bits / 8;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    out
}

/// 16-bit PCM mono encoding (the writer format).
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let mut out = wav_header(FORMAT_PCM, 16, clip.sample_rate_hz, clip.samples.len() * 2);
    for &s in &clip.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// IEEE float32 mono encoding.
pub fn encode_wav_f32(clip: &AudioClip) -> Vec<u8> {
    let mut out = wav_header(FORMAT_FLOAT, 32, clip.sample_rate_hz, clip.samples.len() * 4);
    for &s in &clip.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    fs::write(path, encode_wav_pcm16(clip)).map_err(|e| Error::io(path, e))
}

/// Linear-interpolation resampler. Not band-limited: content above the new
/// Nyquist frequency aliases.
pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> Result<AudioClip> {
    if target_rate_hz == 0 {
        return Err(Error::InvalidConfig("target sample rate must be positive".into()));
    }
    if target_rate_hz == clip.sample_rate_hz {
        return Ok(clip.clone());
    }
    let src = &clip.samples;
    let ratio = clip.sample_rate_hz as f64 / target_rate_hz as f64;
    let out_len = ((src.len() as f64 / ratio).round() as usize).max(1);
    let last = src.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let t = pos - i0 as f64;
            let (a, b) = (src[i0] as f64, src[i1] as f64);
            let v = (a + t * (b - a)).clamp(a.min(b), a.max(b));
            v as f32
        })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate_hz: target_rate_hz,
        source_path: clip.source_path.clone(),
    })
}

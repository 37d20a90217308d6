use std::path::Path;

use crate::error::{Error, Result};

fn format_err(path: &Path, field: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field,
        msg: msg.into(),
    }
}

/// Reads a mono 16-bit PCM RIFF/WAVE file. Samples are scaled by 1/32768.
pub fn load_pcm_wav(path: &Path, expected_rate: u32) -> Result<(Vec<f64>, u32)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pcm_wav(&bytes, path, expected_rate)
}

pub fn parse_pcm_wav(bytes: &[u8], path: &Path, expected_rate: u32) -> Result<(Vec<f64>, u32)> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err(path, "header", "is not RIFF/WAVE"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);

    let mut pos = 12;
    let mut rate = None;
    let mut data = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(len).filter(|&e| e <= bytes.len());
        let Some(end) = end else {
            return Err(format_err(path, "chunk", "extends past end of file"));
        };
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(format_err(path, "fmt", "chunk too short"));
                }
                let format = u16_at(body);
                let channels = u16_at(body + 2);
                let sample_rate = u32_at(body + 4);
                let bits = u16_at(body + 14);
                if format != 1 {
                    return Err(format_err(path, "audio_format", format!("{} is not PCM (1)", format)));
                }
                if channels != 1 {
                    return Err(format_err(path, "channels", format!("{} is not mono", channels)));
                }
                if bits != 16 {
                    return Err(format_err(path, "bits_per_sample", format!("{} is not 16", bits)));
                }
                if sample_rate != expected_rate {
                    return Err(format_err(
                        path,
                        "sample_rate",
                        format!("{} Hz, expected {} Hz", sample_rate, expected_rate),
                    ));
                }
                rate = Some(sample_rate);
            }
            b"data" => data = Some(&bytes[body..end]),
            _ => {}
        }
        pos = end + (len & 1);
    }
    let rate = rate.ok_or_else(|| format_err(path, "fmt", "chunk missing"))?;
    let data = data.ok_or_else(|| format_err(path, "data", "chunk missing"))?;
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok((samples, rate))
}

/// Writes mono 16-bit PCM, rounding to the nearest quantization level.
pub fn write_pcm_wav(path: &Path, samples: &[f64], rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

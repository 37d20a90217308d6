use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FBK1";

/// Per-utterance `[frames × dims]` log-mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub utt_id: String,
    pub frames: usize,
    pub dims: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.dims], self.data.clone()).expect("consistent features")
    }
}

/// Subtracts the per-dimension mean over frames; variances are left alone.
pub fn utterance_cmvn(f: &FeatureMatrix) -> FeatureMatrix {
    let mut mean = vec![0.0; f.dims];
    for t in 0..f.frames {
        for (m, v) in mean.iter_mut().zip(f.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= f.frames as f64);
    let data = f
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| v - mean[i % f.dims])
        .collect();
    FeatureMatrix { data, ..f.clone() }
}

/// `FBK1`, u32 frames, u32 dims, frames·dims f32, u16-length-prefixed UTF-8 id. All little-endian.
pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let id = f.utt_id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(Error::Data(format!("utterance id too long: {} bytes", id.len())));
    }
    let mut out = Vec::with_capacity(14 + f.data.len() * 4 + id.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(f.frames as u32).to_le_bytes());
    out.extend_from_slice(&(f.dims as u32).to_le_bytes());
    for &v in &f.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {}", path.display(), msg));
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing FBK1 magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (frames, dims) = (u32_at(4), u32_at(8));
    let body = 12 + frames * dims * 4;
    if bytes.len() < body + 2 {
        return Err(bad("truncated feature payload"));
    }
    let data = bytes[12..body]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let id_len = u16::from_le_bytes([bytes[body], bytes[body + 1]]) as usize;
    let id = bytes
        .get(body + 2..body + 2 + id_len)
        .ok_or_else(|| bad("truncated utterance id"))?;
    let utt_id = String::from_utf8(id.to_vec()).map_err(|_| bad("utterance id is not UTF-8"))?;
    Ok(FeatureMatrix {
        utt_id,
        frames,
        dims,
        data,
    })
}

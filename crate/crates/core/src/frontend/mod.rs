//! PCM audio to 80-dimensional log-mel filterbank features.
//!
//! Defaults follow the usual ASR front-end: 16 kHz input, 25 ms Hamming
//! windows every 10 ms, per-frame pre-emphasis 0.97, 512-point FFT power
//! spectrum and an HTK-scale triangular mel bank between 20 Hz and 7600 Hz.

mod fbank;
mod features;
mod wav;

pub use fbank::{compute_fbank, hz_to_mel, mel_to_hz, MelBank};
pub use features::{read_features, utterance_cmvn, write_features, FeatureMatrix, FEATURE_MAGIC};
pub use wav::{load_pcm_wav, parse_pcm_wav, write_pcm_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model input width.
pub const FEATURE_DIMS: usize = 80;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate_hz: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: FEATURE_DIMS,
            fmin_hz: 20.0,
            fmax_hz: 7600.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: &str| Err(Error::config(format!("frontend.{}", f), m));
        if self.n_mels != FEATURE_DIMS {
            return field("n_mels", "must be 80 to match the model input width");
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) {
            return field("fmin_hz", "must satisfy 0 <= fmin < fmax");
        }
        if self.fmax_hz > self.sample_rate_hz as f64 / 2.0 {
            return field("fmax_hz", "must not exceed the Nyquist frequency");
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return field("window_ms", "window and hop must span at least one sample");
        }
        if self.n_fft < self.window_samples() {
            return field("n_fft", "must be at least the window length in samples");
        }
        if !(self.log_floor > 0.0) {
            return field("log_floor", "must be positive");
        }
        Ok(())
    }
}

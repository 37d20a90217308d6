use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureMatrix, FrontendConfig};
use crate::error::{Error, Result};

const PRE_EMPHASIS: f64 = 0.97;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the one-sided power spectrum.
#[derive(Clone, Debug)]
pub struct MelBank {
    /// Center frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
    /// `n_mels × (n_fft/2 + 1)` weights.
    weights: Vec<Vec<f64>>,
}

impl MelBank {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let n_bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
        let step = (hi - lo) / (cfg.n_mels + 1) as f64;
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + step * i as f64))
            .collect();
        let bin_hz = cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        MelBank {
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
            weights,
        }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Log-mel filterbank energies, one row per 10 ms hop.
///
/// Frame count is `1 + (N - window) / hop` (integer division).
pub fn compute_fbank(samples: &[f64], cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    if samples.len() < win {
        return Err(Error::TooShort {
            len: samples.len(),
            min: win,
        });
    }
    let frames = 1 + (samples.len() - win) / hop;
    let window: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1) as f64).cos())
        .collect();
    let bank = MelBank::new(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;

    let mut data = Vec::with_capacity(frames * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for f in 0..frames {
        let frame = &samples[f * hop..f * hop + win];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for n in 0..win {
            let prev = if n == 0 { frame[0] } else { frame[n - 1] };
            buf[n].re = (frame[n] - PRE_EMPHASIS * prev) * window[n];
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        data.extend(bank.apply(&power).into_iter().map(|e| e.max(cfg.log_floor).ln()));
    }
    Ok(FeatureMatrix {
        utt_id: String::new(),
        frames,
        dims: cfg.n_mels,
        data,
    })
}

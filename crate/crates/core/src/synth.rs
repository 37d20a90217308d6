//! Synthetic tone corpus: every character is a pure tone at its own
//! frequency, so a small model can learn the mapping from audio to text.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::write_pcm_wav;
use crate::manifest::{write_text_map, Manifest, ManifestRow};
use crate::tensor::RngState;

pub const TONE_BASE_HZ: f64 = 400.0;
pub const TONE_STEP_HZ: f64 = 300.0;
/// Keeps the highest tone below the default mel bank's 7600 Hz edge.
pub const MAX_SYNTH_VOCAB: usize = 23;
const ALPHABET: &str = "abcdefghijklmnopqrstuvw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_utts: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Standard deviation of additive white noise; 0 for clean audio.
    pub noise_std: f64,
    pub sample_rate_hz: u32,
    pub utt_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_utts: 10,
            vocab_size: 5,
            min_len: 3,
            max_len: 6,
            seed: 1,
            noise_std: 0.0,
            sample_rate_hz: 16_000,
            utt_prefix: "utt".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SYNTH_VOCAB).contains(&self.vocab_size) {
            return Err(Error::config("vocab_size", format!("must be in 2..={}", MAX_SYNTH_VOCAB)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("min_len", "need 1 <= min_len <= max_len"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be finite and non-negative"));
        }
        if self.sample_rate_hz < 16_000 {
            return Err(Error::config("sample_rate_hz", "must be at least 16000"));
        }
        Ok(())
    }

    pub fn chars(&self) -> Vec<char> {
        ALPHABET.chars().take(self.vocab_size).collect()
    }
}

/// Frequency of the 1-based character index `k`.
pub fn tone_hz(k: usize) -> f64 {
    TONE_BASE_HZ + TONE_STEP_HZ * k as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtt {
    pub utt_id: String,
    pub text: String,
    pub samples: Vec<f64>,
    /// `(start, len)` in samples for each character's tone.
    pub segments: Vec<(usize, usize)>,
}

fn ms(rate: u32, lo: f64, hi: f64, rng: &mut impl Rng) -> usize {
    (rate as f64 * rng.random_range(lo..hi) / 1000.0).round() as usize
}

/// The `index`-th utterance of the corpus; each one has its own random stream.
pub fn synth_utterance(cfg: &SynthConfig, index: usize) -> SynthUtt {
    let mut rng = RngState::new(cfg.seed).derive(index as u64).next_stream();
    let chars = cfg.chars();
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..chars.len())).collect();
    let rate = cfg.sample_rate_hz;
    let ramp = (rate as f64 * 0.005) as usize;

    let mut samples = vec![0.0; ms(rate, 30.0, 70.0, &mut rng)];
    let mut segments = Vec::with_capacity(len);
    for &c in &ids {
        let n = ms(rate, 80.0, 140.0, &mut rng);
        let amp = rng.random_range(0.3..0.8);
        let f = tone_hz(c + 1);
        let start = samples.len();
        for i in 0..n {
            let env = ((i.min(n - 1 - i)) as f64 / ramp as f64).min(1.0);
            samples.push(amp * env * (2.0 * PI * f * i as f64 / rate as f64).sin());
        }
        segments.push((start, n));
        let gap = ms(rate, 30.0, 70.0, &mut rng);
        samples.extend(std::iter::repeat_n(0.0, gap));
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("valid deviation");
        for s in samples.iter_mut() {
            *s += noise.sample(&mut rng);
        }
    }
    SynthUtt {
        utt_id: format!("{}{:05}", cfg.utt_prefix, index),
        text: ids.iter().map(|&i| chars[i]).collect(),
        samples,
        segments,
    }
}

#[derive(Serialize)]
struct ToneEntry {
    char: char,
    id: usize,
    hz: f64,
}

/// Writes `wav/`, `manifest.jsonl`, `text`, `tones.json` and `config.json` under `out_dir`.
pub fn write_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut rows = Vec::with_capacity(cfg.n_utts);
    for i in 0..cfg.n_utts {
        let u = synth_utterance(cfg, i);
        let rel = format!("wav/{}.wav", u.utt_id);
        write_pcm_wav(&out_dir.join(&rel), &u.samples, cfg.sample_rate_hz)?;
        rows.push(ManifestRow {
            utt_id: u.utt_id,
            path: rel,
            text: u.text,
            frames: None,
        });
    }
    Manifest::write(&out_dir.join("manifest.jsonl"), &rows)?;
    let texts: Vec<(String, String)> = rows.iter().map(|r| (r.utt_id.clone(), r.text.clone())).collect();
    write_text_map(&out_dir.join("text"), &texts)?;
    let tones: Vec<ToneEntry> = cfg
        .chars()
        .into_iter()
        .enumerate()
        .map(|(i, c)| ToneEntry {
            char: c,
            id: i + 1,
            hz: tone_hz(i + 1),
        })
        .collect();
    let write_json = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    };
    write_json("tones.json", serde_json::to_string_pretty(&tones)?)?;
    write_json("config.json", serde_json::to_string_pretty(cfg)?)?;
    Ok(rows)
}

//! Line-delimited JSON corpus manifests and example loading.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{compute_fbank, load_pcm_wav, read_features, utterance_cmvn, FrontendConfig};
use crate::training::Example;
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub utt_id: String,
    /// WAV or feature file, relative to the manifest's directory unless absolute.
    pub path: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), n + 1, e)))?;
            rows.push(row);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest { rows, base_dir };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Data(format!("duplicate utt_id {:?}", r.utt_id)));
            }
        }
        Ok(())
    }

    pub fn write(path: &Path, rows: &[ManifestRow]) -> Result<()> {
        let mut out = String::new();
        for r in rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Characters outside `vocab`, with occurrence counts.
    pub fn unknown_chars(&self, vocab: &Vocabulary) -> BTreeMap<char, usize> {
        let mut out = BTreeMap::new();
        for c in self.rows.iter().flat_map(|r| r.text.chars()) {
            if vocab.id(c).is_none() {
                *out.entry(c).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let unknown = self.unknown_chars(vocab);
        if unknown.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = unknown.iter().map(|(c, n)| format!("{:?}×{}", c, n)).collect();
        Err(Error::Data(format!("transcripts use characters outside the vocabulary: {}", list.join(", "))))
    }

    /// Loads every row as a mean-normalized example. WAV paths are featurized
    /// on the fly; anything else is read as a feature file.
    pub fn load_examples(&self, vocab: &Vocabulary, frontend: &FrontendConfig) -> Result<Vec<Example>> {
        if self.rows.is_empty() {
            return Err(Error::Data("no utterances".into()));
        }
        self.check_vocab(vocab)?;
        self.rows
            .iter()
            .map(|r| {
                let path = self.resolve(r);
                let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
                let mut feats = if is_wav {
                    let (samples, _) = load_pcm_wav(&path, frontend.sample_rate_hz)?;
                    compute_fbank(&samples, frontend)?
                } else {
                    read_features(&path)?
                };
                feats.utt_id = r.utt_id.clone();
                Ok(Example {
                    utt_id: r.utt_id.clone(),
                    text: r.text.clone(),
                    feats: utterance_cmvn(&feats).to_tensor(),
                    target: vocab.encode(&r.text)?,
                })
            })
            .collect()
    }
}

/// Kaldi-style text: `utt_id` then the transcript, separated by the first space.
pub fn read_text_map(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, t) = line.split_once(' ').unwrap_or((line, ""));
        if !seen.insert(id.to_string()) {
            return Err(Error::Data(format!("{}: duplicate utt_id {:?}", path.display(), id)));
        }
        out.push((id.to_string(), t.to_string()));
    }
    Ok(out)
}

pub fn write_text_map(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let out: String = rows.iter().map(|(id, t)| format!("{} {}\n", id, t)).collect();
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

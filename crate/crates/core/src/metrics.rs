//! Best-path CTC decoding, Levenshtein edit counts and character error rates.

use std::fmt::Write as _;

use crate::decoder::argmax;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode(logits: &Tensor, blank: usize) -> Vec<usize> {
    let rows = logits.dims2().map_or(0, |(r, _)| r);
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..rows {
        let best = argmax(logits.row(t));
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Alignment counts: substitutions, deletions, insertions, hits, reference length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub h: usize,
    pub n: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.s + self.d + self.i
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.s += o.s;
        self.d += o.d;
        self.i += o.i;
        self.h += o.h;
        self.n += o.n;
    }
}

/// Counts from a minimum-cost alignment. Traceback prefers the diagonal
/// (hit or substitution), then insertion, then deletion.
pub fn levenshtein_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = dp[i * w + j - 1] + 1;
            let del = dp[(i - 1) * w + j] + 1;
            dp[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut c = EditCounts {
        n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if here == dp[(i - 1) * w + j - 1] + usize::from(!same) {
                if same {
                    c.h += 1;
                } else {
                    c.s += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == dp[i * w + j - 1] + 1 {
            c.i += 1;
            j -= 1;
        } else {
            c.d += 1;
            i -= 1;
        }
    }
    c
}

/// `(S + D + I) / N`, unclamped.
pub fn cer(c: &EditCounts, utt_id: &str) -> Result<f64> {
    if c.n == 0 {
        return Err(Error::EmptyReference {
            utt_id: utt_id.to_string(),
        });
    }
    Ok(c.errors() as f64 / c.n as f64)
}

/// `1 - CER`, equal to `(H - I) / N`; may be negative.
pub fn cer_acc(c: &EditCounts, utt_id: &str) -> Result<f64> {
    Ok(1.0 - cer(c, utt_id)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UttScore {
    pub utt_id: String,
    pub counts: EditCounts,
}

/// Per-utterance counts plus pooled totals.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusReport {
    pub rows: Vec<UttScore>,
    pub total: EditCounts,
}

impl CorpusReport {
    /// Pooled `ΣErrors / ΣN`.
    pub fn cer(&self) -> f64 {
        self.total.errors() as f64 / self.total.n as f64
    }

    pub fn cer_acc(&self) -> f64 {
        1.0 - self.cer()
    }

    /// CSV with a final `TOTAL` row. Undefined per-utterance rates are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("utt_id,N,S,D,I,H,cer,cer_acc\n");
        let mut row = |id: &str, c: &EditCounts| {
            let (r, a) = match (cer(c, id), cer_acc(c, id)) {
                (Ok(r), Ok(a)) => (r.to_string(), a.to_string()),
                _ => (String::new(), String::new()),
            };
            writeln!(out, "{},{},{},{},{},{},{},{}", id, c.n, c.s, c.d, c.i, c.h, r, a).expect("string write");
        };
        for r in &self.rows {
            row(&r.utt_id, &r.counts);
        }
        row("TOTAL", &self.total);
        out
    }
}

/// Scores `(utt_id, reference, hypothesis)` triples character by character.
pub fn corpus_cer<S: AsRef<str>>(pairs: &[(S, S, S)]) -> Result<CorpusReport> {
    let mut total = EditCounts::default();
    let rows: Vec<UttScore> = pairs
        .iter()
        .map(|(id, r, h)| {
            let rc: Vec<char> = r.as_ref().chars().collect();
            let hc: Vec<char> = h.as_ref().chars().collect();
            let counts = levenshtein_counts(&rc, &hc);
            total.add(&counts);
            UttScore {
                utt_id: id.as_ref().to_string(),
                counts,
            }
        })
        .collect();
    if total.n == 0 {
        return Err(Error::Data("no utterance has a non-empty reference".into()));
    }
    Ok(CorpusReport { rows, total })
}

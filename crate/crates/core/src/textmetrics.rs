//! Longest common subsequence, ROUGE-L and corpus BLEU over token lists.

use std::collections::HashMap;

use serde::Serialize;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("recall undefined for an empty answer")]
    EmptyAnswer,
    #[error("ROUGE-L needs non-empty candidate and reference")]
    EmptyInput,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("BLEU needs at least one pair")]
    EmptyCorpus,
    #[error("max n-gram order must be in 1..=4, got {0}")]
    BadOrder(usize),
}

/// ROUGE-L F-measure weight (β² with β = 1.2).
pub const ROUGE_BETA_SQ: f64 = 1.44;

pub fn lcs_length<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `lcs(candidate, answer) / |answer|`
pub fn rouge_l_recall<S: AsRef<str>>(candidate: &[S], answer: &[S]) -> Result<f64, MetricError> {
    if answer.is_empty() {
        return Err(MetricError::EmptyAnswer);
    }
    Ok(lcs_length(candidate, answer) as f64 / answer.len() as f64)
}

/// ROUGE-L F-measure with β² = 1.44.
pub fn rouge_l_f<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Result<f64, MetricError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let lcs = lcs_length(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok((1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p))
}

/// Mean sentence-level ROUGE-L F over aligned pairs.
pub fn corpus_rouge_l<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64, MetricError> {
    check_pairs(candidates.len(), references.len())?;
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        total += rouge_l_f(c, r)?;
    }
    Ok(total / candidates.len() as f64)
}

fn check_pairs(c: usize, r: usize) -> Result<(), MetricError> {
    if c != r {
        return Err(MetricError::LengthMismatch { candidates: c, references: r });
    }
    if c == 0 {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped n-gram precisions for n = 1..=max_n,
/// uniform weights, brevity penalty and no smoothing.
pub fn corpus_bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>], max_n: usize) -> Result<f64, MetricError> {
    check_pairs(candidates.len(), references.len())?;
    if !(1..=4).contains(&max_n) {
        return Err(MetricError::BadOrder(max_n));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            for (gram, count) in &cc {
                matched[n - 1] += (*count).min(rc.get(gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// BLEU-1..4 and ROUGE-L for one prediction set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    #[serde(rename = "BLEU-1")]
    pub bleu1: f64,
    #[serde(rename = "BLEU-2")]
    pub bleu2: f64,
    #[serde(rename = "BLEU-3")]
    pub bleu3: f64,
    #[serde(rename = "BLEU-4")]
    pub bleu4: f64,
    #[serde(rename = "ROUGE-L")]
    pub rouge_l: f64,
}

impl MetricRow {
    pub fn compute<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<Self, MetricError> {
        // Empty predictions score zero ROUGE-L instead of failing the run.
        check_pairs(candidates.len(), references.len())?;
        let rouge: f64 = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| rouge_l_f(c, r).unwrap_or(0.0))
            .sum::<f64>()
            / candidates.len() as f64;
        Ok(MetricRow {
            bleu1: corpus_bleu(candidates, references, 1)?,
            bleu2: corpus_bleu(candidates, references, 2)?,
            bleu3: corpus_bleu(candidates, references, 3)?,
            bleu4: corpus_bleu(candidates, references, 4)?,
            rouge_l: rouge,
        })
    }

    pub fn table(&self) -> String {
        format!(
            "BLEU-1\t{:.4}\nBLEU-2\t{:.4}\nBLEU-3\t{:.4}\nBLEU-4\t{:.4}\nROUGE-L\t{:.4}\n",
            self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l
        )
    }
}

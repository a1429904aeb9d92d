//! Translation scores, alignment accuracy over similarity grids, and
//! attention memory accounting.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::synth::{sign_word, GroundTruth};
use crate::error::{Error, Result};
use crate::nncore::{Real, Tensor};
use crate::segmenter::{SegmentSet, SegmentSpan};

/// Whitespace tokenization used for every metric.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn check_corpus<S>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram totals per order, plus the
/// hypothesis and reference lengths.
fn ngram_stats<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> (Vec<usize>, Vec<usize>, usize, usize) {
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let rc = ngram_counts(rf, n);
            for (g, k) in &ngram_counts(h, n) {
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    (matched, total, c, r)
}

/// Corpus-level modified precision for orders `1..=max_n`; 0 when the
/// hypotheses contain no n-gram of that order.
pub fn modified_precisions<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(hyps, refs)?;
    let (m, t, _, _) = ngram_stats(hyps, refs, max_n);
    Ok(m.iter()
        .zip(&t)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect())
}

/// Corpus BLEU with a single reference per hypothesis and no smoothing.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::invalid(format!("max_n must be in 1..=4, got {max_n}")));
    }
    let (matched, total, c, r) = ngram_stats(hyps, refs, max_n);
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
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

/// Sentence-mean ROUGE-L F1.
pub fn rouge_l_f1<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let sum: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let l = lcs_len(h, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / h.len() as f64;
            let rc = l as f64 / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .sum();
    Ok(sum / hyps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l_f1: f64,
    pub num_sentences: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_ratio: Option<f64>,
}

impl EvalReport {
    pub fn score<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<Self> {
        Ok(Self {
            bleu1: corpus_bleu(hyps, refs, 1)?,
            bleu2: corpus_bleu(hyps, refs, 2)?,
            bleu3: corpus_bleu(hyps, refs, 3)?,
            bleu4: corpus_bleu(hyps, refs, 4)?,
            rouge_l_f1: rouge_l_f1(hyps, refs)?,
            num_sentences: hyps.len(),
            alignment_accuracy: None,
            reduction_ratio: None,
        })
    }

    pub const CSV_HEADER: &'static str =
        "bleu1,bleu2,bleu3,bleu4,rouge_l_f1,num_sentences,alignment_accuracy,reduction_ratio";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge_l_f1,
            self.num_sentences,
            opt(self.alignment_accuracy),
            opt(self.reduction_ratio)
        )
    }
}

/// For each segment, the position in `glosses` of the sign it mostly
/// overlaps, or `None` when that sign's word is absent from the glosses.
pub fn segment_gloss_truth(segs: &SegmentSet, truth: &GroundTruth, glosses: &[String]) -> Vec<Option<usize>> {
    segs.spans
        .iter()
        .map(|s| {
            let mut best: Option<(usize, usize)> = None;
            for (k, span) in truth.spans.iter().enumerate() {
                let ov = s.overlap(&SegmentSpan::new(span[0], span[1]));
                if ov > 0 && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((k, ov));
                }
            }
            let (k, _) = best?;
            let word = sign_word(truth.sign_ids[k]);
            glosses.iter().position(|w| *w == word)
        })
        .collect()
}

/// Fraction of visual tokens whose most similar gloss (first index on ties)
/// is their true gloss. Tokens without a true gloss are left out.
pub fn alignment_accuracy<T: Real>(grids: &[Tensor<T>], truth: &[Vec<Option<usize>>]) -> Result<f64> {
    if grids.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} grids for {} truth rows",
            grids.len(),
            truth.len()
        )));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (grid, tr) in grids.iter().zip(truth) {
        if grid.rows() != tr.len() {
            return Err(Error::shape(
                "alignment_accuracy",
                format!("grid has {} visual tokens, truth has {}", grid.rows(), tr.len()),
            ));
        }
        for (i, t) in tr.iter().enumerate() {
            let Some(t) = *t else { continue };
            total += 1;
            if argmax_first(grid.row(i)) == Some(t) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no visual token has a ground-truth gloss"));
    }
    Ok(hit as f64 / total as f64)
}

pub(crate) fn argmax_first<T: Real>(row: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryProfile {
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub batch: usize,
    pub dim: usize,
    /// `batch · heads · L²` for one layer.
    pub score_elements_per_layer: u64,
    pub score_elements: u64,
    /// Scores, softmax output, Q/K/V/context projections and the attention
    /// output, summed over layers.
    pub activation_elements: u64,
    pub bytes_f32: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_peak_bytes: Option<u64>,
}

impl MemoryProfile {
    pub const CSV_HEADER: &'static str = "seq_len,layers,heads,batch,dim,score_elements_per_layer,score_elements,activation_elements,bytes_f32,measured_peak_bytes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.seq_len,
            self.layers,
            self.heads,
            self.batch,
            self.dim,
            self.score_elements_per_layer,
            self.score_elements,
            self.activation_elements,
            self.bytes_f32,
            self.measured_peak_bytes.map(|b| b.to_string()).unwrap_or_default()
        )
    }
}

/// Analytic element counts for self-attention at length `len`.
pub fn attention_memory_profile(len: usize, layers: usize, heads: usize, batch: usize, dim: usize) -> MemoryProfile {
    let (l, h, b, d) = (len as u64, heads as u64, batch as u64, dim as u64);
    let per_layer = b * h * l * l;
    let activation_per_layer = 2 * per_layer + 5 * b * l * d;
    let activation_elements = layers as u64 * activation_per_layer;
    MemoryProfile {
        seq_len: len,
        layers,
        heads,
        batch,
        dim,
        score_elements_per_layer: per_layer,
        score_elements: layers as u64 * per_layer,
        activation_elements,
        bytes_f32: 4 * activation_elements,
        measured_peak_bytes: None,
    }
}

/// Ratio of attention score elements at two relative lengths.
pub fn quadratic_ratio(r1: f64, r2: f64) -> f64 {
    (r1 / r2).powi(2)
}

/// Least-squares fit `y ≈ c0 + c1·x + c2·x²`, returning the coefficients and R².
pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> Result<([f64; 3], f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::invalid("quadratic fit needs at least three points"));
    }
    let mut a = [[0.0f64; 4]; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let basis = [1.0, x, x * x];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += basis[i] * basis[j];
            }
            a[i][3] += basis[i] * y;
        }
    }
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        if a[col][col].abs() < 1e-300 {
            return Err(Error::invalid("quadratic fit is singular; lengths must be distinct"));
        }
        for row in 0..3 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..4 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let c = [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]];
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - (c[0] + c[1] * x + c[2] * x * x)).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((c, r2))
}

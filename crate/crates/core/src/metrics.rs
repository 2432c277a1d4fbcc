//! Perplexity, corpus BLEU, ROUGE-L and length statistics.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgnError};

pub const MAX_ORDER: usize = 4;

/// `exp(-mean log p)` over every scored token.
pub fn perplexity(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(SgnError::Input("perplexity of an empty corpus".into()));
    }
    if log_probs.iter().any(|x| !x.is_finite()) {
        return Err(SgnError::Input("non-finite log-probability".into()));
    }
    Ok((-log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuMean {
    #[default]
    Geometric,
    Arithmetic,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram totals for orders `1..=4`.
fn match_stats<T: Eq + Hash>(cand: &[T], reference: &[T]) -> ([usize; MAX_ORDER], [usize; MAX_ORDER]) {
    let mut matched = [0; MAX_ORDER];
    let mut total = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let c = ngram_counts(cand, n);
        let r = ngram_counts(reference, n);
        matched[n - 1] = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        total[n - 1] = cand.len().saturating_sub(n - 1);
    }
    (matched, total)
}

fn combine(matched: &[usize; MAX_ORDER], total: &[usize; MAX_ORDER], cand_len: usize, ref_len: usize, mean: BleuMean) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let precisions: Vec<f64> =
        (0..MAX_ORDER).map(|i| if total[i] == 0 { 0.0 } else { matched[i] as f64 / total[i] as f64 }).collect();
    let brevity = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    let avg = match mean {
        BleuMean::Geometric => {
            if precisions.iter().any(|&p| p == 0.0) {
                0.0
            } else {
                (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
            }
        }
        BleuMean::Arithmetic => precisions.iter().sum::<f64>() / MAX_ORDER as f64,
    };
    brevity * avg
}

fn check_pairs<T>(cands: &[Vec<T>], refs: &[Vec<T>]) -> Result<()> {
    if cands.is_empty() {
        return Err(SgnError::Input("empty candidate set".into()));
    }
    if cands.len() != refs.len() {
        return Err(SgnError::Input(format!("{} candidates for {} references", cands.len(), refs.len())));
    }
    Ok(())
}

/// Corpus-level BLEU with one reference per candidate, n-gram orders 1-4,
/// brevity penalty and no smoothing.
pub fn bleu<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>], mean: BleuMean) -> Result<f64> {
    check_pairs(cands, refs)?;
    let mut matched = [0; MAX_ORDER];
    let mut total = [0; MAX_ORDER];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in cands.iter().zip(refs) {
        let (m, t) = match_stats(c, r);
        for i in 0..MAX_ORDER {
            matched[i] += m[i];
            total[i] += t[i];
        }
        c_len += c.len();
        r_len += r.len();
    }
    Ok(combine(&matched, &total, c_len, r_len, mean))
}

/// Mean of per-pair BLEU scores.
pub fn sentence_bleu<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>], mean: BleuMean) -> Result<f64> {
    check_pairs(cands, refs)?;
    let total: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| {
            let (m, t) = match_stats(c, r);
            combine(&m, &t, c.len(), r.len(), mean)
        })
        .sum();
    Ok(total / cands.len() as f64)
}

pub fn lcs_length<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one pair; zero when either side is empty.
pub fn rouge_l_pair<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_length(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean per-pair ROUGE-L F-measure.
pub fn rouge_l<T: Eq>(cands: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_pairs(cands, refs)?;
    Ok(cands.iter().zip(refs).map(|(c, r)| rouge_l_pair(c, r)).sum::<f64>() / cands.len() as f64)
}

/// Mean token count per recipe.
pub fn avg_length<T>(recipes: &[Vec<T>]) -> Result<f64> {
    if recipes.is_empty() {
        return Err(SgnError::Input("average length of no recipes".into()));
    }
    Ok(recipes.iter().map(Vec::len).sum::<usize>() as f64 / recipes.len() as f64)
}

/// Scores of one configuration on one evaluation split. BLEU and ROUGE-L
/// are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub perplexity: f64,
    pub bleu: f64,
    pub sentence_bleu: f64,
    pub rouge_l: f64,
    pub avg_length: f64,
    /// Mean length of the reference recipes.
    pub reference_length: f64,
    pub bleu_mean: BleuMean,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.perplexity, self.bleu, self.sentence_bleu, self.rouge_l, self.avg_length, self.reference_length];
        if self.samples == 0 || fields.iter().any(|x| !x.is_finite()) {
            return Err(SgnError::Input("report needs finite fields and at least one sample".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| SgnError::Input(format!("bad report: {e}")))?;
        r.validate()?;
        Ok(r)
    }

    /// `name | perplexity | BLEU | ROUGE-L | length`, scores x100.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{name:<12} {:>10.2} {:>8.2} {:>8.2} {:>8.1}",
            self.perplexity,
            100.0 * self.bleu,
            100.0 * self.rouge_l,
            self.avg_length
        )
    }
}

pub fn table_header() -> String {
    format!("{:<12} {:>10} {:>8} {:>8} {:>8}", "model", "perplexity", "BLEU", "ROUGE-L", "length")
}

/// `b - a` per metric plus how much closer `b`'s length is to the
/// reference length than `a`'s (positive when `b` is closer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub perplexity: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub avg_length: f64,
    pub reference_length: f64,
    pub length_gap_a: f64,
    pub length_gap_b: f64,
    pub closer_by: f64,
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ReportDelta> {
    if a.split != b.split || a.samples != b.samples || (a.reference_length - b.reference_length).abs() > 1e-9 {
        return Err(SgnError::Comparability(format!(
            "reports come from different evaluation sets ({} x{} vs {} x{})",
            a.split, a.samples, b.split, b.samples
        )));
    }
    let gap_a = (a.avg_length - a.reference_length).abs();
    let gap_b = (b.avg_length - b.reference_length).abs();
    Ok(ReportDelta {
        perplexity: b.perplexity - a.perplexity,
        bleu: b.bleu - a.bleu,
        rouge_l: b.rouge_l - a.rouge_l,
        avg_length: b.avg_length - a.avg_length,
        reference_length: a.reference_length,
        length_gap_a: gap_a,
        length_gap_b: gap_b,
        closer_by: gap_a - gap_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let r = vec![w("a b c d")];
        assert!((bleu(&r, &r, BleuMean::Geometric).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&[w("a b c d")], &[w("a b c e")], BleuMean::Geometric).unwrap(), 0.0);
        let arith = bleu(&[w("a b c d")], &[w("a b c e")], BleuMean::Arithmetic).unwrap();
        assert!((arith - (0.75 + 2.0 / 3.0 + 0.5 + 0.0) / 4.0).abs() < 1e-12);
        assert!(matches!(bleu::<&str>(&[], &[], BleuMean::Geometric), Err(SgnError::Input(_))));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_pair(&w("a b c d"), &w("a b c d")), 1.0);
        assert!((rouge_l_pair(&w("a b c d"), &w("a c b d")) - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l_pair(&w("a b"), &w("c d")), 0.0);
        assert_eq!(rouge_l_pair(&w(""), &w("c d")), 0.0);
    }

    #[test]
    fn perplexity_and_length() {
        assert!((perplexity(&[-(100f64).ln(); 7]).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), 1.0);
        assert!(perplexity(&[]).is_err());
        assert_eq!(avg_length(&[vec![0; 100], vec![0; 120]]).unwrap(), 110.0);
    }
}

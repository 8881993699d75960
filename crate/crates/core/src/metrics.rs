//! Corpus BLEU-4 and exact match.

use std::collections::HashMap;

use serde::Serialize;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuScore {
    /// 0 to 100.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with brevity penalty over whitespace tokens.
///
/// Unigram precision is unsmoothed; orders 2 to 4 use add-one smoothing,
/// `(matches + 1) / (candidates + 1)`, so that sparse higher-order n-grams on
/// small corpora do not zero the score.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> BleuScore {
    assert_eq!(hyps.len(), refs.len(), "hypothesis and reference counts differ");
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let smooth = if n == 0 { 0.0 } else { 1.0 };
        let denom = totals[n] as f64 + smooth;
        precisions[n] = if denom == 0.0 {
            0.0
        } else {
            (matches[n] as f64 + smooth) / denom
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    BleuScore {
        bleu: bleu.clamp(0.0, 100.0),
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    }
}

/// Fraction of lines whose token sequences are identical.
pub fn exact_match<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "hypothesis and reference counts differ");
    if hyps.is_empty() {
        return 0.0;
    }
    let hits = hyps
        .iter()
        .zip(refs)
        .filter(|(h, r)| h.as_ref().split_whitespace().eq(r.as_ref().split_whitespace()))
        .count();
    hits as f64 / hyps.len() as f64
}

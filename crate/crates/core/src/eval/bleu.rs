use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;
/// Numerator used for an n-gram order with no matches.
pub const SMOOTHING_EPS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over token ids with one reference per hypothesis.
///
/// Orders for which the hypotheses contain no n-gram at all are left out of
/// the geometric mean; an order with n-grams but no match uses
/// `SMOOTHING_EPS` as its numerator.
pub fn corpus_bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let ref_counts = ngrams(rf, n);
            for (g, k) in ngrams(h, n) {
                matches[n - 1] += k.min(ref_counts.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        let num = if matches[n] == 0 {
            SMOOTHING_EPS
        } else {
            matches[n] as f64
        };
        precisions[n] = num / totals[n] as f64;
        log_sum += precisions[n].ln();
        orders += 1;
    }
    let brevity_penalty = if c == 0 {
        if r == 0 {
            1.0
        } else {
            0.0
        }
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let geo = if orders == 0 {
        1.0
    } else {
        (log_sum / orders as f64).exp()
    };
    Ok(BleuScore {
        score: (100.0 * brevity_penalty * geo).clamp(0.0, 100.0),
        precisions,
        brevity_penalty,
        hyp_len: c,
        ref_len: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_hypothesis_scores_zero() {
        let b = corpus_bleu(&[vec![]], &[vec![4, 5, 6]]).unwrap();
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn mismatched_counts() {
        assert!(matches!(
            corpus_bleu(&[vec![4]], &[]),
            Err(Error::Contract(_))
        ));
    }
}

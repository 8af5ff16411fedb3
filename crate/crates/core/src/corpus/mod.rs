//! Synthetic multi-domain parallel corpora.
//!
//! Every domain translates by a bijective token substitution followed by a
//! deterministic structural rule, so the ground-truth target of a clean pair
//! is a pure function of its source. Domains differ in their source lexicon,
//! in the substitution of their domain-specific tokens, and in the rule.

mod dataset;
mod domain;
mod noise;
mod split;
mod tsv;

use serde::{Deserialize, Serialize};

pub use dataset::{DatasetConfig, DomainDef, MultiDomainDataset};
pub use domain::{generate_domain, DomainSpec, StructuralRule};
pub use noise::inject_noise;
pub use split::{split, Budgets, DatasetSplits};
pub use tsv::{load_scored_tsv, load_tsv, save_scored_tsv, save_tsv};

pub const MIN_LEN: usize = 5;
pub const MAX_LEN: usize = 175;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub domain: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_noise: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_score: Option<f64>,
}

impl SentencePair {
    pub fn new(source: Vec<usize>, target: Vec<usize>, domain: usize) -> Self {
        Self {
            source,
            target,
            domain,
            is_noise: None,
            q_score: None,
            d_score: None,
        }
    }

    pub fn is_noise(&self) -> bool {
        self.is_noise == Some(true)
    }
}

/// Keeps pairs whose source and target lengths both lie in
/// `min_len..=max_len`, preserving order.
pub fn length_filter(pairs: &[SentencePair], min_len: usize, max_len: usize) -> Vec<SentencePair> {
    let ok = |n: usize| (min_len..=max_len).contains(&n);
    pairs
        .iter()
        .filter(|p| ok(p.source.len()) && ok(p.target.len()))
        .cloned()
        .collect()
}

/// Total source tokens.
pub fn source_tokens(pairs: &[SentencePair]) -> usize {
    pairs.iter().map(|p| p.source.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(s: usize, t: usize) -> SentencePair {
        SentencePair::new(vec![4; s], vec![4; t], 0)
    }

    #[test]
    fn length_filter_boundaries() {
        let pairs = vec![pair(4, 6), pair(5, 175), pair(6, 176), pair(175, 5)];
        let kept = length_filter(&pairs, MIN_LEN, MAX_LEN);
        assert_eq!(kept, vec![pair(5, 175), pair(175, 5)]);
        assert_eq!(length_filter(&kept, MIN_LEN, MAX_LEN), kept);
    }
}

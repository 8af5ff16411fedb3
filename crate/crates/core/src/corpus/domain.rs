use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SentencePair;
use crate::model::NUM_RESERVED;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructuralRule {
    Identity,
    Reverse,
    /// Left rotation by `r` positions (modulo the length).
    Rotate {
        r: usize,
    },
    /// Swaps positions (0,1), (2,3), ...; a trailing odd token stays.
    SwapAdjacentPairs,
}

impl StructuralRule {
    pub fn apply(&self, tokens: &[usize]) -> Vec<usize> {
        let mut out = tokens.to_vec();
        match *self {
            StructuralRule::Identity => {}
            StructuralRule::Reverse => out.reverse(),
            StructuralRule::Rotate { r } => {
                if !out.is_empty() {
                    let k = r % out.len();
                    out.rotate_left(k);
                }
            }
            StructuralRule::SwapAdjacentPairs => {
                for chunk in out.chunks_mut(2) {
                    chunk.reverse();
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    /// Source tokens with their sampling weights.
    pub lexicon: Vec<(usize, f64)>,
    /// `substitution[i]` is the image of content token `i + NUM_RESERVED`.
    pub substitution: Vec<usize>,
    pub rule: StructuralRule,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let content = self.substitution.len();
        let mut seen = vec![false; content];
        for &img in &self.substitution {
            let ix = img
                .checked_sub(NUM_RESERVED)
                .filter(|&i| i < content)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "domain {}: substitution image {img} outside the content vocabulary",
                        self.domain_id
                    ))
                })?;
            if std::mem::replace(&mut seen[ix], true) {
                return Err(Error::Config(format!(
                    "domain {}: substitution is not bijective (image {img} repeats)",
                    self.domain_id
                )));
            }
        }
        if self.max_len < super::MIN_LEN || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "domain {}: degenerate length range {}..={}",
                self.domain_id, self.min_len, self.max_len
            )));
        }
        if self.lexicon.is_empty()
            || self.lexicon.iter().any(|&(t, w)| {
                !(NUM_RESERVED..NUM_RESERVED + content).contains(&t) || !(w > 0.0 && w.is_finite())
            })
        {
            return Err(Error::Config(format!(
                "domain {}: lexicon must be non-empty content tokens with positive weights",
                self.domain_id
            )));
        }
        Ok(())
    }

    pub fn substitute(&self, token: usize) -> usize {
        self.substitution[token - NUM_RESERVED]
    }

    /// The clean target for `source`.
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        let mapped: Vec<usize> = source.iter().map(|&t| self.substitute(t)).collect();
        self.rule.apply(&mapped)
    }

    pub fn sample_source<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let total: f64 = self.lexicon.iter().map(|(_, w)| w).sum();
        let len = rng.random_range(self.min_len.max(1)..=self.max_len);
        (0..len)
            .map(|_| {
                let mut u = rng.random::<f64>() * total;
                for &(t, w) in &self.lexicon {
                    if u < w {
                        return t;
                    }
                    u -= w;
                }
                self.lexicon.last().expect("non-empty lexicon").0
            })
            .collect()
    }
}

/// Draws `n_pairs` clean pairs. Deterministic per `(spec, seed)`.
pub fn generate_domain(spec: &DomainSpec, n_pairs: usize, seed: u64) -> Result<Vec<SentencePair>> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec.seed.rotate_left(17));
    Ok((0..n_pairs)
        .map(|_| {
            let source = spec.sample_source(&mut rng);
            let target = spec.translate(&source);
            let mut p = SentencePair::new(source, target, spec.domain_id);
            p.is_noise = Some(false);
            p
        })
        .collect())
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    generate_domain, inject_noise, length_filter, source_tokens, split, Budgets, DatasetSplits,
    DomainSpec, SentencePair, StructuralRule, MAX_LEN, MIN_LEN,
};
use crate::model::{Vocabulary, NUM_RESERVED};
use crate::seed::{derive, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDef {
    pub name: String,
    pub rule: StructuralRule,
}

impl DomainDef {
    fn new(name: &str, rule: StructuralRule) -> Self {
        Self {
            name: name.into(),
            rule,
        }
    }
}

/// Topology and budgets of the synthetic benchmark.
///
/// The content vocabulary is `common_tokens` tokens shared by every domain
/// followed by one block of `domain_tokens` per seen/unseen domain. All
/// domains translate common tokens with one shared permutation; each domain
/// translates its own block with a domain-specific remapping of that
/// permutation, and applies its structural rule afterwards. The generic
/// domain (Vanilla pre-training) samples mostly common tokens and only
/// rarely the domain blocks, which it translates with the shared
/// permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Set from the master seed by the pipeline; not part of the JSON.
    #[serde(skip)]
    pub seed: u64,
    pub common_tokens: usize,
    pub domain_tokens: usize,
    pub common_weight: f64,
    pub domain_weight: f64,
    pub generic_domain_weight: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seen: Vec<DomainDef>,
    pub unseen: Vec<DomainDef>,
    pub seen_budgets: Budgets,
    pub unseen_budgets: Budgets,
    pub generic_train_tokens: usize,
    pub noise_fraction: f64,
    pub trusted_pairs: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        use StructuralRule::*;
        Self {
            seed: 0,
            common_tokens: 28,
            domain_tokens: 12,
            common_weight: 1.0,
            domain_weight: 2.0,
            generic_domain_weight: 0.05,
            min_len: 5,
            max_len: 12,
            seen: vec![
                DomainDef::new("law", Identity),
                DomainDef::new("medical", Identity),
                DomainDef::new("it", SwapAdjacentPairs),
                DomainDef::new("koran", Identity),
                DomainDef::new("subtitles", SwapAdjacentPairs),
            ],
            unseen: vec![
                DomainDef::new("covid", Identity),
                DomainDef::new("bible", SwapAdjacentPairs),
                DomainDef::new("books", Identity),
            ],
            seen_budgets: Budgets {
                train_tokens: 20_000,
                finetune_tokens: 1_000,
                test_tokens: 2_000,
            },
            unseen_budgets: Budgets {
                train_tokens: 0,
                finetune_tokens: 1_000,
                test_tokens: 2_000,
            },
            generic_train_tokens: 20_000,
            noise_fraction: 0.10,
            trusted_pairs: 200,
        }
    }
}

impl DatasetConfig {
    pub fn num_domains(&self) -> usize {
        1 + self.seen.len() + self.unseen.len()
    }

    pub fn vocab_size(&self) -> usize {
        NUM_RESERVED + self.common_tokens + self.domain_tokens * (self.num_domains() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen.is_empty() {
            return Err(Error::Config("at least one seen domain is required".into()));
        }
        if self.common_tokens == 0 || self.domain_tokens < 2 {
            return Err(Error::Config(
                "need common tokens and at least two tokens per domain block".into(),
            ));
        }
        if self.min_len < MIN_LEN || self.max_len > MAX_LEN || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sentence lengths {}..={} must lie within {MIN_LEN}..={MAX_LEN}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::Config("noise_fraction must lie in [0, 1]".into()));
        }
        if self.unseen_budgets.train_tokens != 0 {
            return Err(Error::Config(
                "unseen domains cannot have training data".into(),
            ));
        }
        for w in [
            self.common_weight,
            self.domain_weight,
            self.generic_domain_weight,
        ] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config("lexicon weights must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let content = self.vocab_size() - NUM_RESERVED;
        Vocabulary::new((0..content).map(|i| format!("w{i}"))).expect("generated tokens are unique")
    }

    /// Domain specs indexed by domain id; id 0 is the generic domain.
    pub fn domain_specs(&self) -> Result<Vec<DomainSpec>> {
        self.validate()?;
        let content = self.vocab_size() - NUM_RESERVED;
        let mut base: Vec<usize> = (NUM_RESERVED..NUM_RESERVED + content).collect();
        base.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(
            self.seed,
            stream::VOCAB,
            0,
        )));
        let common = NUM_RESERVED..NUM_RESERVED + self.common_tokens;
        let block = |d: usize| {
            let start = NUM_RESERVED + self.common_tokens + (d - 1) * self.domain_tokens;
            start..start + self.domain_tokens
        };

        let defs = std::iter::once(DomainDef::new("generic", StructuralRule::Identity))
            .chain(self.seen.iter().cloned())
            .chain(self.unseen.iter().cloned());
        let mut specs = Vec::new();
        for (d, def) in defs.enumerate() {
            let mut substitution = base.clone();
            let mut lexicon: Vec<(usize, f64)> =
                common.clone().map(|t| (t, self.common_weight)).collect();
            if d == 0 {
                for other in 1..self.num_domains() {
                    lexicon.extend(block(other).map(|t| (t, self.generic_domain_weight)));
                }
            } else {
                let b = block(d);
                lexicon.extend(b.clone().map(|t| (t, self.domain_weight)));
                // Domain terminology: rotate the shared images within the block.
                let len = b.len();
                for (k, t) in b.clone().enumerate() {
                    let donor = b.start + (k + 1 + (d - 1) % (len - 1)) % len;
                    substitution[t - NUM_RESERVED] = base[donor - NUM_RESERVED];
                }
            }
            let spec = DomainSpec {
                domain_id: d,
                name: def.name.clone(),
                lexicon,
                substitution,
                rule: def.rule,
                min_len: self.min_len,
                max_len: self.max_len,
                seed: derive(self.seed, stream::DOMAIN, d as u64),
            };
            spec.validate()?;
            specs.push(spec);
        }
        Ok(specs)
    }
}

/// The generated benchmark: specs, splits and trusted corpora per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDomainDataset {
    pub vocab: Vocabulary,
    pub domains: Vec<DomainSpec>,
    pub generic: usize,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Indexed by domain id. The generic domain only has a training split.
    pub splits: Vec<DatasetSplits>,
    /// Clean pairs per domain drawn apart from the splits (`D̂_Z`).
    pub trusted: Vec<Vec<SentencePair>>,
    /// Injected noise count per domain.
    pub noise_counts: Vec<usize>,
}

fn generate_splits(
    spec: &DomainSpec,
    budgets: Budgets,
    trusted: usize,
    seed: u64,
) -> Result<(Vec<SentencePair>, DatasetSplits)> {
    let needed = budgets.train_tokens + budgets.finetune_tokens + budgets.test_tokens;
    let mean_len = (spec.min_len + spec.max_len) as f64 / 2.0;
    let mut n = trusted + (needed as f64 / mean_len * 1.2) as usize + 16;
    loop {
        let pool = length_filter(&generate_domain(spec, n, seed)?, MIN_LEN, MAX_LEN);
        let cut = trusted.min(pool.len());
        let (head, rest) = pool.split_at(cut);
        if source_tokens(rest) >= needed {
            match split(rest, budgets, derive(seed, stream::SPLIT, 0)) {
                Ok(s) => return Ok((head.to_vec(), s)),
                Err(Error::Budget(_)) => {}
                Err(e) => return Err(e),
            }
        }
        n *= 2;
    }
}

impl MultiDomainDataset {
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        let specs = cfg.domain_specs()?;
        let n_seen = cfg.seen.len();
        let seen: Vec<usize> = (1..=n_seen).collect();
        let unseen: Vec<usize> = (n_seen + 1..cfg.num_domains()).collect();
        let mut splits = Vec::with_capacity(specs.len());
        let mut trusted = Vec::with_capacity(specs.len());
        let mut noise_counts = Vec::with_capacity(specs.len());
        for spec in &specs {
            let d = spec.domain_id;
            let budgets = if d == 0 {
                Budgets {
                    train_tokens: cfg.generic_train_tokens,
                    finetune_tokens: 0,
                    test_tokens: 0,
                }
            } else if d <= n_seen {
                cfg.seen_budgets
            } else {
                cfg.unseen_budgets
            };
            let trusted_n = if d == 0 { 0 } else { cfg.trusted_pairs };
            let seed = derive(cfg.seed, stream::DATA, d as u64);
            let (t, mut s) = generate_splits(spec, budgets, trusted_n, seed)?;
            let mut noise = 0;
            if d != 0 && d <= n_seen {
                s.training = inject_noise(
                    &s.training,
                    cfg.noise_fraction,
                    derive(cfg.seed, stream::NOISE, d as u64),
                );
                noise = s.training.iter().filter(|p| p.is_noise()).count();
            }
            splits.push(s);
            trusted.push(t);
            noise_counts.push(noise);
        }
        Ok(Self {
            vocab: cfg.vocabulary(),
            domains: specs,
            generic: 0,
            seen,
            unseen,
            splits,
            trusted,
            noise_counts,
        })
    }

    pub fn domain_name(&self, d: usize) -> &str {
        &self.domains[d].name
    }

    pub fn is_seen(&self, d: usize) -> bool {
        self.seen.contains(&d)
    }

    /// Seen and unseen domain ids, in id order.
    pub fn eval_domains(&self) -> Vec<usize> {
        self.seen.iter().chain(&self.unseen).copied().collect()
    }

    pub fn seen_training(&self) -> Vec<SentencePair> {
        self.seen
            .iter()
            .flat_map(|&d| self.splits[d].training.iter().cloned())
            .collect()
    }

    pub fn generic_training(&self) -> &[SentencePair] {
        &self.splits[self.generic].training
    }
}

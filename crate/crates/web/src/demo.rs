//! The demo logic, free of any JS types so it runs and tests natively.

use std::collections::HashMap;

use epi_core::corpus::{generate_domain, DomainSpec, SentencePair, StructuralRule};
use epi_core::curriculum::{build_plan, stage_of, SchedulerPolicy, Variant, NUM_SHARDS};
use epi_core::eval::{corpus_bleu, BleuScore};
use epi_core::model::{EncoderDecoderModel, ModelConfig, Vocabulary, NUM_RESERVED};
use epi_core::trainers::train_step;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub type Result<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchedulerView {
    pub stage: usize,
    pub probabilities: Vec<f64>,
    /// Draws per shard, easiest first.
    pub counts: Vec<usize>,
}

/// The stage row at `progress` and an empirical draw from it.
pub fn scheduler(variant: &str, progress: f64, draws: usize, seed: u64) -> Result<SchedulerView> {
    let variant: Variant = variant.parse().map_err(err)?;
    if !(0.0..=1.0).contains(&progress) {
        return Err(format!("progress must be in [0, 1], got {progress}"));
    }
    let policy = SchedulerPolicy::new(variant);
    let stage = stage_of(progress, &policy);
    let probabilities = policy.row(stage).to_vec();
    // One pair per shard, tagged by its shard through the divergence score.
    let pairs: Vec<SentencePair> = (0..NUM_SHARDS)
        .map(|s| {
            let mut p = SentencePair::new(vec![NUM_RESERVED; 5], vec![NUM_RESERVED; 5], 1);
            p.d_score = Some(s as f64);
            p
        })
        .collect();
    let plan = build_plan(&pairs, policy, 0).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0; NUM_SHARDS];
    for p in plan.sample(stage, None, draws, &mut rng).map_err(err)? {
        counts[p.d_score.unwrap_or(0.0) as usize] += 1;
    }
    Ok(SchedulerView {
        stage,
        probabilities,
        counts,
    })
}

/// Corpus BLEU over whitespace-tokenized lines, one sentence per line.
pub fn bleu(hypotheses: &str, references: &str) -> Result<BleuScore> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut lines = |text: &str| -> Vec<Vec<usize>> {
        text.lines()
            .map(|l| {
                l.split_whitespace()
                    .map(|w| {
                        let n = ids.len();
                        *ids.entry(w.to_string()).or_insert(n)
                    })
                    .collect()
            })
            .collect()
    };
    let h = lines(hypotheses);
    let r = lines(references);
    corpus_bleu(&h, &r).map_err(err)
}

const WORDS: [&str; 16] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p",
];

pub fn parse_rule(name: &str) -> Result<StructuralRule> {
    match name {
        "identity" => Ok(StructuralRule::Identity),
        "reverse" => Ok(StructuralRule::Reverse),
        "rotate" => Ok(StructuralRule::Rotate { r: 2 }),
        "swap" => Ok(StructuralRule::SwapAdjacentPairs),
        _ => Err(format!(
            "unknown rule {name:?} (expected identity, reverse, rotate or swap)"
        )),
    }
}

/// A one-layer model learning a single synthetic rule over the words a..p.
pub struct Trainer {
    vocab: Vocabulary,
    spec: DomainSpec,
    model: EncoderDecoderModel,
    train: Vec<SentencePair>,
    test: Vec<SentencePair>,
    rng: ChaCha8Rng,
    lr: f64,
    pub steps: usize,
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(rule: &str, seed: u64) -> Result<Self> {
        let vocab = Vocabulary::new(WORDS).map_err(err)?;
        let content = NUM_RESERVED..NUM_RESERVED + WORDS.len();
        let spec = DomainSpec {
            domain_id: 1,
            name: rule.into(),
            lexicon: content.clone().map(|t| (t, 1.0)).collect(),
            substitution: content.collect(),
            rule: parse_rule(rule)?,
            min_len: 4,
            max_len: 8,
            seed,
        };
        let pairs = generate_domain(&spec, 600, seed).map_err(err)?;
        let (test, train) = pairs.split_at(100);
        let config = ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            max_len: 12,
            dropout_rate: 0.0,
            vocab_size: vocab.len(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EncoderDecoderModel::init(&config, &mut rng).map_err(err)?;
        Ok(Self {
            vocab,
            spec,
            model,
            train: train.to_vec(),
            test: test.to_vec(),
            rng,
            lr: 0.3,
            steps: 0,
            losses: Vec::new(),
        })
    }

    /// Runs `n` SGD steps on batches of 16; returns the mean loss.
    pub fn train(&mut self, n: usize) -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..n {
            let batch: Vec<SentencePair> = self
                .train
                .choose_multiple(&mut self.rng, 16)
                .cloned()
                .collect();
            let loss = train_step(&mut self.model, &batch, self.lr).map_err(err)?;
            self.losses.push(loss);
            total += loss;
            self.steps += 1;
        }
        Ok(if n == 0 { f64::NAN } else { total / n as f64 })
    }

    /// Greedy translation of space-separated words; unknown words become `<unk>`.
    pub fn translate(&self, text: &str) -> Result<String> {
        let ids = self.vocab.tokenize(text);
        if ids.is_empty() {
            return Ok(String::new());
        }
        let max = self.model.config().max_len - 2;
        if ids.len() > max {
            return Err(format!("at most {max} words"));
        }
        let out = self.model.greedy_decode(&ids, max).map_err(err)?;
        Ok(self.vocab.detokenize(&out.tokens))
    }

    /// What the rule itself produces for `text`.
    pub fn reference(&self, text: &str) -> String {
        self.vocab
            .detokenize(&self.spec.translate(&self.vocab.tokenize(text)))
    }

    /// Greedy BLEU on 100 held-out pairs.
    pub fn test_bleu(&self) -> Result<f64> {
        let mut hyps = Vec::with_capacity(self.test.len());
        for p in &self.test {
            hyps.push(self.model.greedy_decode(&p.source, 12).map_err(err)?.tokens);
        }
        let refs: Vec<Vec<usize>> = self.test.iter().map(|p| p.target.clone()).collect();
        corpus_bleu(&hyps, &refs).map(|b| b.score).map_err(err)
    }
}

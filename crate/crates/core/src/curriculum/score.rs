use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::model::{EncoderDecoderModel, LanguageModel};
use crate::seed::{derive, stream};
use crate::trainers::{fit_steps, train_lm};
use crate::{Error, Result};

/// How the scorer models were derived from their base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_checksum: String,
    pub steps: usize,
    pub lr: f64,
    pub pairs: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    /// Fine-tuning steps for every per-domain scorer model.
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs of base language model training on generic sources.
    pub lm_epochs: usize,
    pub lm_lr: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 0.3,
            batch_size: 16,
            lm_epochs: 6,
            lm_lr: 0.3,
        }
    }
}

/// `(a − b) / len`: the shared arithmetic of both scores.
pub fn normalized_difference(log_p_domain: f64, log_p_base: f64, len: usize) -> f64 {
    (log_p_domain - log_p_base) / len as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseScorer {
    pub base: EncoderDecoderModel,
    pub domains: BTreeMap<usize, EncoderDecoderModel>,
    pub provenance: BTreeMap<usize, Provenance>,
}

impl DenoiseScorer {
    pub fn new(base: EncoderDecoderModel) -> Self {
        Self {
            base,
            domains: BTreeMap::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        domain: usize,
        model: EncoderDecoderModel,
        provenance: Provenance,
    ) -> Result<()> {
        if model.config() != self.base.config() {
            return Err(Error::Compatibility(format!(
                "scorer for domain {domain} has a different model configuration"
            )));
        }
        self.domains.insert(domain, model);
        self.provenance.insert(domain, provenance);
        Ok(())
    }

    /// Fine-tunes a copy of `base` on each domain's trusted pairs.
    pub fn train(
        base: EncoderDecoderModel,
        trusted: &BTreeMap<usize, Vec<SentencePair>>,
        cfg: &ScorerConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut scorer = Self::new(base);
        let base_checksum = scorer.base.checksum();
        for (&d, pairs) in trusted {
            let mut m = scorer.base.clone();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive(seed, stream::FINETUNE, 1000 + d as u64));
            fit_steps(&mut m, pairs, cfg.steps, cfg.batch_size, cfg.lr, &mut rng)?;
            let provenance = Provenance {
                base_checksum: base_checksum.clone(),
                steps: cfg.steps,
                lr: cfg.lr,
                pairs: pairs.len(),
                checksum: m.checksum(),
            };
            scorer.insert(d, m, provenance)?;
        }
        Ok(scorer)
    }
}

/// `[log P(t|s; Θ_Z) − log P(t|s; Θ_base)] / |t|` with EOS counted in `|t|`.
pub fn denoise_score(pair: &SentencePair, scorer: &DenoiseScorer) -> Result<f64> {
    let model = scorer
        .domains
        .get(&pair.domain)
        .ok_or_else(|| Error::Lookup(format!("no denoise model for domain {}", pair.domain)))?;
    let lp_z = model.target_log_prob(pair)?;
    let lp_base = scorer.base.target_log_prob(pair)?;
    Ok(normalized_difference(lp_z, lp_base, pair.target.len() + 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceScorer {
    pub base: LanguageModel,
    pub domains: BTreeMap<usize, LanguageModel>,
    pub provenance: BTreeMap<usize, Provenance>,
}

impl DivergenceScorer {
    pub fn new(base: LanguageModel) -> Self {
        Self {
            base,
            domains: BTreeMap::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        domain: usize,
        lm: LanguageModel,
        provenance: Provenance,
    ) -> Result<()> {
        if lm.config() != self.base.config() {
            return Err(Error::Compatibility(format!(
                "language model for domain {domain} has a different configuration"
            )));
        }
        self.domains.insert(domain, lm);
        self.provenance.insert(domain, provenance);
        Ok(())
    }

    /// Trains the base LM on generic sources, then fine-tunes a copy on each
    /// domain's source sentences.
    pub fn train(
        init: LanguageModel,
        generic: &[Vec<usize>],
        domains: &BTreeMap<usize, Vec<Vec<usize>>>,
        cfg: &ScorerConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut base = init;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, stream::LM, 0));
        let steps = cfg.lm_epochs * generic.len().div_ceil(cfg.batch_size);
        train_lm(
            &mut base,
            generic,
            steps,
            cfg.batch_size,
            cfg.lm_lr,
            &mut rng,
        )?;
        let base_checksum = base.params().checksum();
        let mut scorer = Self::new(base);
        for (&d, sentences) in domains {
            let mut lm = scorer.base.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, stream::LM, 1 + d as u64));
            train_lm(
                &mut lm,
                sentences,
                cfg.steps,
                cfg.batch_size,
                cfg.lr,
                &mut rng,
            )?;
            let provenance = Provenance {
                base_checksum: base_checksum.clone(),
                steps: cfg.steps,
                lr: cfg.lr,
                pairs: sentences.len(),
                checksum: lm.params().checksum(),
            };
            scorer.insert(d, lm, provenance)?;
        }
        Ok(scorer)
    }
}

/// `[log P(s; Θ̄_Z) − log P(s; Θ̄_base)] / |s|` with EOS counted in `|s|`.
pub fn divergence_score(
    sentence: &[usize],
    scorer: &DivergenceScorer,
    domain: usize,
) -> Result<f64> {
    let lm = scorer
        .domains
        .get(&domain)
        .ok_or_else(|| Error::Lookup(format!("no language model for domain {domain}")))?;
    let lp_z = lm.log_prob(sentence)?;
    let lp_base = scorer.base.log_prob(sentence)?;
    Ok(normalized_difference(lp_z, lp_base, sentence.len() + 1))
}

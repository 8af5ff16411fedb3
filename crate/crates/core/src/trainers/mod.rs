//! Training procedures for the comparison group.
//!
//! Every trainer is generic over [`Seq2Seq`] so the same code drives the
//! transformer and the scalar models used in tests. Trainers consume and
//! return models by value; [`finetune`] works on a copy.

mod episodic;

pub use episodic::{
    epi_episode, epi_train, episodic_decoder_step, episodic_encoder_step, specialist_step,
    EpisodeAudit, EpisodeLog, EpisodeRecord, EpisodicState,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::curriculum::{stage_of, CurriculumPlan};
use crate::model::{LanguageModel, Seq2Seq};
use crate::seed::{derive, stream};
use crate::tensor::{sgd_step, Graph};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Aggregation / episodic learning rate.
    pub alpha: f64,
    /// Specialist (and MAML inner) learning rate.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Set from the master seed by the pipeline; not part of the JSON.
    #[serde(skip)]
    pub seed: u64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Epochs of generic-domain pre-training for Vanilla.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.05,
            epochs: 4,
            batch_size: 16,
            seed: 0,
            finetune_epochs: 5,
            finetune_lr: 0.1,
            pretrain_epochs: 10,
            pretrain_lr: 0.3,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.alpha, self.beta, self.finetune_lr, self.pretrain_lr];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Config(
                "learning rates must be finite and >= 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Optimizer steps per epoch over `n` training pairs.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    fn rng(&self, stream: u64, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive(self.seed, stream, index))
    }
}

/// Where episode and step batches come from.
#[derive(Debug, Clone)]
pub enum BatchSource {
    /// Uniform sampling with replacement.
    Uniform {
        pairs: Vec<SentencePair>,
        by_domain: BTreeMap<usize, Vec<usize>>,
    },
    /// Shard-then-pair sampling with the plan's stage schedule.
    Curriculum(CurriculumPlan),
}

impl BatchSource {
    pub fn uniform(pairs: Vec<SentencePair>) -> Self {
        let mut by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate() {
            by_domain.entry(p.domain).or_default().push(i);
        }
        Self::Uniform { pairs, by_domain }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Uniform { pairs, .. } => pairs.len(),
            Self::Curriculum(plan) => plan.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domains(&self) -> Vec<usize> {
        match self {
            Self::Uniform { by_domain, .. } => by_domain.keys().copied().collect(),
            Self::Curriculum(plan) => plan.domains(),
        }
    }

    /// Draws `n` pairs, optionally restricted to one domain. Returns the
    /// batch and the stage used (0 for uniform sampling).
    pub fn draw<R: Rng + ?Sized>(
        &self,
        domain: Option<usize>,
        progress: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<(Vec<SentencePair>, usize)> {
        match self {
            Self::Uniform { pairs, by_domain } => {
                let pool: Vec<usize> = match domain {
                    Some(d) => by_domain.get(&d).cloned().unwrap_or_default(),
                    None => (0..pairs.len()).collect(),
                };
                if pool.is_empty() {
                    return Err(Error::Contract(format!(
                        "no training pairs for domain {domain:?}"
                    )));
                }
                let batch = (0..n)
                    .map(|_| pairs[pool[rng.random_range(0..pool.len())]].clone())
                    .collect();
                Ok((batch, 0))
            }
            Self::Curriculum(plan) => {
                let stage = stage_of(progress, &plan.policy);
                let batch = plan.sample(stage, domain, n, rng)?;
                Ok((batch, stage))
            }
        }
    }
}

/// One SGD step on both halves over `batch`; returns the batch loss.
pub fn train_step<M: Seq2Seq>(model: &mut M, batch: &[SentencePair], lr: f64) -> Result<f64> {
    let loss = accumulate_loss_grads(model, batch)?;
    sgd_step(model.encoder_set_mut(), lr)?;
    sgd_step(model.decoder_set_mut(), lr)?;
    Ok(loss)
}

/// Adds `∇ loss(batch)` into both halves' gradient buffers.
fn accumulate_loss_grads<M: Seq2Seq>(model: &mut M, batch: &[SentencePair]) -> Result<f64> {
    let mut g = Graph::new();
    let loss = M::composed_loss(&mut g, model, true, model, true, batch)?;
    let grads = g.backward(loss)?;
    grads.accumulate_into(&g, model.encoder_set_mut())?;
    grads.accumulate_into(&g, model.decoder_set_mut())?;
    Ok(g.value(loss)[0])
}

/// Shuffled mini-batch epochs over `pairs`; returns the per-step losses.
pub fn fit<M: Seq2Seq, R: Rng + ?Sized>(
    model: &mut M,
    pairs: &[SentencePair],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<SentencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            curve.push(train_step(model, &batch, lr)?);
        }
    }
    Ok(curve)
}

/// Like [`fit`] but stops after exactly `steps` updates.
pub fn fit_steps<M: Seq2Seq, R: Rng + ?Sized>(
    model: &mut M,
    pairs: &[SentencePair],
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    if pairs.is_empty() {
        return Err(Error::Contract("cannot train on an empty corpus".into()));
    }
    let mut curve = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    'outer: loop {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if curve.len() == steps {
                break 'outer;
            }
            let batch: Vec<SentencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            curve.push(train_step(model, &batch, lr)?);
        }
    }
    Ok(curve)
}

/// Vanilla: plain NLL training of `init` on the generic domain.
pub fn pretrain_vanilla<M: Seq2Seq>(
    init: M,
    generic: &[SentencePair],
    hp: &Hyperparams,
) -> Result<(M, Vec<f64>)> {
    if generic.is_empty() {
        return Err(Error::Contract("generic corpus is empty".into()));
    }
    let mut model = init;
    let mut rng = hp.rng(stream::TRAIN, 0);
    let curve = fit(
        &mut model,
        generic,
        hp.pretrain_epochs,
        hp.batch_size,
        hp.pretrain_lr,
        &mut rng,
    )?;
    Ok((model, curve))
}

/// AGG: continued training on the union of the seen-domain corpora.
pub fn train_agg<M: Seq2Seq>(
    vanilla: M,
    seen_pairs: &[SentencePair],
    hp: &Hyperparams,
) -> Result<(M, Vec<f64>)> {
    if seen_pairs.is_empty() {
        return Err(Error::Contract("no seen-domain training pairs".into()));
    }
    let mut model = vanilla;
    let mut rng = hp.rng(stream::TRAIN, 1);
    let curve = fit(
        &mut model,
        seen_pairs,
        hp.epochs,
        hp.batch_size,
        hp.alpha,
        &mut rng,
    )?;
    Ok((model, curve))
}

/// AGG-Curriculum: AGG with batches drawn from the staged plan.
pub fn train_agg_curriculum<M: Seq2Seq>(
    vanilla: M,
    plan: &CurriculumPlan,
    hp: &Hyperparams,
) -> Result<(M, Vec<f64>)> {
    if plan.is_empty() {
        return Err(Error::Contract("curriculum plan is empty".into()));
    }
    let mut model = vanilla;
    let mut rng = hp.rng(stream::TRAIN, 2);
    let total = hp.epochs * hp.steps_per_epoch(plan.len());
    let mut curve = Vec::with_capacity(total);
    for step in 0..total {
        let stage = stage_of(step as f64 / total as f64, &plan.policy);
        let batch = plan.sample(stage, None, hp.batch_size, &mut rng)?;
        curve.push(train_step(&mut model, &batch, hp.alpha)?);
    }
    Ok((model, curve))
}

/// First-order MAML (the Meta-MT surrogate).
///
/// Each meta-iteration picks a seen domain uniformly, adapts a copy with one
/// step at `beta` on a support batch, and applies the query-batch gradient
/// taken at the adapted parameters to the original ones at `alpha`.
pub fn maml_train<M: Seq2Seq>(
    vanilla: M,
    source: &BatchSource,
    hp: &Hyperparams,
) -> Result<(M, Vec<f64>)> {
    let domains = source.domains();
    if domains.is_empty() {
        return Err(Error::Contract("no seen-domain training pairs".into()));
    }
    let mut model = vanilla;
    let mut rng = hp.rng(stream::TRAIN, 3);
    let total = hp.epochs * hp.steps_per_epoch(source.len());
    let mut curve = Vec::with_capacity(total);
    for _ in 0..total {
        let d = domains[rng.random_range(0..domains.len())];
        let (support, _) = source.draw(Some(d), 0.0, hp.batch_size, &mut rng)?;
        let (query, _) = source.draw(Some(d), 0.0, hp.batch_size, &mut rng)?;
        let mut adapted = model.clone();
        train_step(&mut adapted, &support, hp.beta)?;
        curve.push(accumulate_loss_grads(&mut adapted, &query)?);
        transfer_grads(adapted.encoder_set(), model.encoder_set_mut())?;
        transfer_grads(adapted.decoder_set(), model.decoder_set_mut())?;
        sgd_step(model.encoder_set_mut(), hp.alpha)?;
        sgd_step(model.decoder_set_mut(), hp.alpha)?;
    }
    Ok((model, curve))
}

fn transfer_grads(
    from: &crate::tensor::ParameterSet,
    to: &mut crate::tensor::ParameterSet,
) -> Result<()> {
    for (name, t) in from.iter() {
        if let Some(g) = t.grad() {
            to.get_mut(name)?.accumulate_grad(g)?;
        }
    }
    Ok(())
}

/// Copy-on-adapt fine-tuning on one domain's fine-tuning split.
pub fn finetune<M: Seq2Seq>(
    model: &M,
    pairs: &[SentencePair],
    hp: &Hyperparams,
    index: u64,
) -> Result<M> {
    if pairs.is_empty() {
        return Err(Error::Contract("fine-tuning split is empty".into()));
    }
    let mut adapted = model.clone();
    let mut rng = hp.rng(stream::FINETUNE, index);
    fit(
        &mut adapted,
        pairs,
        hp.finetune_epochs,
        hp.batch_size,
        hp.finetune_lr,
        &mut rng,
    )?;
    Ok(adapted)
}

/// Plain NLL training of a language model for exactly `steps` updates on
/// shuffled mini-batches of `sentences`.
pub fn train_lm<R: Rng + ?Sized>(
    lm: &mut LanguageModel,
    sentences: &[Vec<usize>],
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    if sentences.is_empty() {
        return Err(Error::Contract(
            "cannot train a language model on no sentences".into(),
        ));
    }
    let mut curve = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    'outer: loop {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if curve.len() == steps {
                break 'outer;
            }
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| sentences[i].as_slice()).collect();
            let mut g = Graph::new();
            let loss = lm.batch_loss(&mut g, &batch)?;
            let grads = g.backward(loss)?;
            grads.accumulate_into(&g, lm.params_mut())?;
            sgd_step(lm.params_mut(), lr)?;
            curve.push(g.value(loss)[0]);
        }
    }
    Ok(curve)
}

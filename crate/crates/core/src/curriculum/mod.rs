//! Denoising, divergence ordering, shard plans and staged sampling.

mod scheduler;
mod score;

pub use scheduler::{stage_of, SchedulerPolicy, Variant, NUM_SHARDS, NUM_STAGES};
pub use score::{
    denoise_score, divergence_score, normalized_difference, DenoiseScorer, DivergenceScorer,
    Provenance, ScorerConfig,
};

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::{Error, Result};

/// Drops pairs with a strictly negative denoise score, keeping order.
/// Returns the kept pairs and the number removed.
pub fn filter_noise(pairs: &[SentencePair]) -> Result<(Vec<SentencePair>, usize)> {
    let mut kept = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        match p.q_score {
            None => return Err(Error::Contract(format!("pair {i} has no denoise score"))),
            Some(q) if q < 0.0 => {}
            Some(_) => kept.push(p.clone()),
        }
    }
    let removed = pairs.len() - kept.len();
    Ok((kept, removed))
}

/// Divergence-ordered shards with the schedule that samples them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub shards: Vec<Vec<SentencePair>>,
    /// Largest divergence score of shards 1..=4.
    pub shard_thresholds: Vec<f64>,
    pub policy: SchedulerPolicy,
    pub filtered_count: usize,
}

fn d_score(p: &SentencePair, i: usize) -> Result<f64> {
    p.d_score
        .ok_or_else(|| Error::Contract(format!("pair {i} has no divergence score")))
}

/// Stable ascending sort by divergence, then five contiguous shards. The
/// first `n % 5` shards take one extra pair.
pub fn build_plan(
    kept: &[SentencePair],
    policy: SchedulerPolicy,
    filtered_count: usize,
) -> Result<CurriculumPlan> {
    policy.validate()?;
    if kept.len() < NUM_SHARDS {
        return Err(Error::Contract(format!(
            "a plan needs at least {NUM_SHARDS} pairs, got {}",
            kept.len()
        )));
    }
    let mut keyed = Vec::with_capacity(kept.len());
    for (i, p) in kept.iter().enumerate() {
        keyed.push((d_score(p, i)?, p));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let base = kept.len() / NUM_SHARDS;
    let extra = kept.len() % NUM_SHARDS;
    let mut shards = Vec::with_capacity(NUM_SHARDS);
    let mut rest = keyed.as_slice();
    for s in 0..NUM_SHARDS {
        let (head, tail) = rest.split_at(base + usize::from(s < extra));
        shards.push(head.iter().map(|(_, p)| (*p).clone()).collect::<Vec<_>>());
        rest = tail;
    }
    let shard_thresholds = shards[..NUM_SHARDS - 1]
        .iter()
        .map(|s| {
            s.last()
                .and_then(|p| p.d_score)
                .unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    Ok(CurriculumPlan {
        shards,
        shard_thresholds,
        policy,
        filtered_count,
    })
}

static EMPTY_SHARD_WARNED: AtomicBool = AtomicBool::new(false);

impl CurriculumPlan {
    pub fn len(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.shards.iter().flatten().map(|p| p.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// Independent draws: a shard by the stage's row, then a pair uniformly
    /// within it (optionally among one domain's pairs only). Shards without
    /// candidates are dropped and the row renormalized.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        stage: usize,
        domain: Option<usize>,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<SentencePair>> {
        let candidates: Vec<Vec<&SentencePair>> = self
            .shards
            .iter()
            .map(|s| {
                s.iter()
                    .filter(|p| domain.is_none_or(|d| p.domain == d))
                    .collect()
            })
            .collect();
        let row = self.policy.row(stage);
        let weights: Vec<f64> = row
            .iter()
            .zip(&candidates)
            .map(|(p, c)| if c.is_empty() { 0.0 } else { *p })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Contract(format!(
                "stage {stage} gives no probability to any shard with pairs of domain {domain:?}"
            )));
        }
        let dropped = row
            .iter()
            .zip(&candidates)
            .any(|(p, c)| *p > 0.0 && c.is_empty());
        if dropped {
            if !EMPTY_SHARD_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!("empty shard with nonzero probability; renormalizing over the rest");
            } else {
                log::debug!("renormalizing stage {stage} over nonempty shards");
            }
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut u = rng.random::<f64>() * total;
            let mut shard = weights.iter().rposition(|w| *w > 0.0).expect("total > 0");
            for (s, w) in weights.iter().enumerate() {
                if *w > 0.0 && u < *w {
                    shard = s;
                    break;
                }
                u -= w;
            }
            let c = &candidates[shard];
            out.push(c[rng.random_range(0..c.len())].clone());
        }
        Ok(out)
    }

    /// Pair indices per shard relative to `corpus`, for the plan file.
    pub fn shard_indices(&self, corpus: &[SentencePair]) -> Vec<Vec<usize>> {
        let mut used = vec![false; corpus.len()];
        self.shards
            .iter()
            .map(|shard| {
                shard
                    .iter()
                    .filter_map(|p| {
                        let i = (0..corpus.len()).find(|&i| !used[i] && corpus[i] == *p)?;
                        used[i] = true;
                        Some(i)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Five divergence levels using the training thresholds; a score equal to
/// a threshold falls in the lower bin.
pub fn bin_testset(pairs: &[SentencePair], thresholds: &[f64]) -> Result<Vec<Vec<SentencePair>>> {
    let mut bins = vec![Vec::new(); thresholds.len() + 1];
    for (i, p) in pairs.iter().enumerate() {
        let d = d_score(p, i)?;
        let b = thresholds
            .iter()
            .position(|t| d <= *t)
            .unwrap_or(thresholds.len());
        bins[b].push(p.clone());
    }
    Ok(bins)
}

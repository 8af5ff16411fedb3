use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SentencePair;
use crate::{Error, Result};

/// Source-token budgets per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub train_tokens: usize,
    pub finetune_tokens: usize,
    pub test_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub training: Vec<SentencePair>,
    pub finetune: Vec<SentencePair>,
    pub testing: Vec<SentencePair>,
}

/// Shuffles deterministically, then fills training, fine-tuning and testing
/// in that order, each until its source-token count reaches its budget (so
/// a split overshoots by less than one sentence). A pair whose source
/// sentence was already taken is skipped, keeping the splits disjoint by
/// source.
pub fn split(pairs: &[SentencePair], budgets: Budgets, seed: u64) -> Result<DatasetSplits> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut used: HashSet<&[usize]> = HashSet::new();
    let mut it = order.into_iter();
    let mut fill = |budget: usize, name: &str| -> Result<Vec<SentencePair>> {
        let mut out = Vec::new();
        let mut count = 0;
        while count < budget {
            let Some(i) = it.next() else {
                return Err(Error::Budget(format!(
                    "{name} split short by {} source tokens",
                    budget - count
                )));
            };
            let p = &pairs[i];
            if !used.insert(p.source.as_slice()) {
                continue;
            }
            count += p.source.len();
            out.push(p.clone());
        }
        Ok(out)
    };
    let training = fill(budgets.train_tokens, "training")?;
    let finetune = fill(budgets.finetune_tokens, "fine-tuning")?;
    let testing = fill(budgets.test_tokens, "testing")?;
    Ok(DatasetSplits {
        training,
        finetune,
        testing,
    })
}

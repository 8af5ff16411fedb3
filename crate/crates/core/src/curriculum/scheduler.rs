use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_SHARDS: usize = 5;
pub const NUM_STAGES: usize = 3;

const EASY_FIRST: [f64; NUM_SHARDS] = [0.40, 0.25, 0.15, 0.12, 0.08];
const FLATTENING: [f64; NUM_SHARDS] = [0.30, 0.25, 0.20, 0.15, 0.10];
const UNIFORM: [f64; NUM_SHARDS] = [0.2; NUM_SHARDS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Default,
    Advanced,
    Reversed,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "advanced" => Ok(Self::Advanced),
            "reversed" => Ok(Self::Reversed),
            _ => Err(Error::Config(format!(
                "unknown scheduler variant {s:?} (expected default, advanced or reversed)"
            ))),
        }
    }
}

/// Stage-dependent shard sampling probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerPolicy {
    pub variant: Variant,
    pub stage_matrix: [[f64; NUM_SHARDS]; NUM_STAGES],
    pub stage_boundaries: [f64; 2],
}

impl Default for SchedulerPolicy {
    fn default() -> Self {
        Self::new(Variant::Default)
    }
}

fn reversed(row: [f64; NUM_SHARDS]) -> [f64; NUM_SHARDS] {
    let mut r = row;
    r.reverse();
    r
}

impl SchedulerPolicy {
    pub fn new(variant: Variant) -> Self {
        let stage_matrix = match variant {
            Variant::Default => [EASY_FIRST, FLATTENING, UNIFORM],
            Variant::Advanced => [EASY_FIRST, EASY_FIRST, UNIFORM],
            Variant::Reversed => [
                reversed(EASY_FIRST),
                reversed(FLATTENING),
                reversed(UNIFORM),
            ],
        };
        Self {
            variant,
            stage_matrix,
            stage_boundaries: [1.0 / 3.0, 2.0 / 3.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (s, row) in self.stage_matrix.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                return Err(Error::Config(format!(
                    "stage {} has a negative probability",
                    s + 1
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "stage {} sums to {sum}, not 1",
                    s + 1
                )));
            }
        }
        let [b1, b2] = self.stage_boundaries;
        if !(0.0..=1.0).contains(&b1) || !(b1..=1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "stage boundaries {b1}, {b2} must satisfy 0 <= b1 <= b2 <= 1"
            )));
        }
        Ok(())
    }

    /// Probability row of stage `stage` (1-based).
    pub fn row(&self, stage: usize) -> &[f64; NUM_SHARDS] {
        &self.stage_matrix[stage.clamp(1, NUM_STAGES) - 1]
    }
}

/// Stage 1 below `b1`, stage 2 in `[b1, b2)`, stage 3 from `b2` on.
pub fn stage_of(progress: f64, policy: &SchedulerPolicy) -> usize {
    let [b1, b2] = policy.stage_boundaries;
    if progress < b1 {
        1
    } else if progress < b2 {
        2
    } else {
        3
    }
}

//! The JSON run configuration.
//!
//! Every section may be omitted and every field inside a section defaults.
//! Unknown keys are rejected. Component seeds are never configured directly:
//! they all derive from the master `seed` (see [`crate::seed`]).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DatasetConfig;
use crate::curriculum::{SchedulerPolicy, ScorerConfig};
use crate::eval::DecodeOptions;
use crate::model::ModelConfig;
use crate::trainers::Hyperparams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Agg,
    AggCurriculum,
    MetaMt,
    EpiNmt,
    EpiCurriculum,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Vanilla,
        Method::Agg,
        Method::AggCurriculum,
        Method::MetaMt,
        Method::EpiNmt,
        Method::EpiCurriculum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Agg => "agg",
            Method::AggCurriculum => "agg_curriculum",
            Method::MetaMt => "meta_mt",
            Method::EpiNmt => "epi_nmt",
            Method::EpiCurriculum => "epi_curriculum",
        }
    }

    pub fn needs_plan(self) -> bool {
        matches!(self, Method::AggCurriculum | Method::EpiCurriculum)
    }

    pub fn is_episodic(self) -> bool {
        matches!(self, Method::EpiNmt | Method::EpiCurriculum)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Usage(format!(
                    "unknown method {s:?}; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub policy: SchedulerPolicy,
    /// Filter pairs with negative denoise scores before sharding.
    pub denoise: bool,
    pub scorer: ScorerConfig,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            policy: SchedulerPolicy::default(),
            denoise: true,
            scorer: ScorerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hyperparams: Hyperparams,
    pub methods: Vec<Method>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hyperparams: Hyperparams::default(),
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of replicates; replicate `r` runs with master seed `seed + r`.
    pub seeds: usize,
    pub sigmas: Vec<f64>,
    pub noise_seeds: usize,
    pub decode: DecodeOptions,
    /// Methods for the swap study; all trained methods when absent.
    pub swap_methods: Option<Vec<Method>>,
    /// Methods for the perturbation study; all trained methods when absent.
    pub perturb_methods: Option<Vec<Method>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            sigmas: vec![0.01, 0.02, 0.03],
            noise_seeds: 3,
            decode: DecodeOptions::default(),
            swap_methods: None,
            perturb_methods: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            curriculum: CurriculumConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.curriculum.policy.validate()?;
        self.training.hyperparams.validate()?;
        if self.model.vocab_size != self.dataset.vocab_size() {
            return Err(Error::Config(format!(
                "model.vocab_size is {} but the dataset vocabulary has {} tokens",
                self.model.vocab_size,
                self.dataset.vocab_size()
            )));
        }
        if self.model.max_len < self.dataset.max_len + 1 {
            return Err(Error::Config(format!(
                "model.max_len {} cannot hold sentences of {} tokens plus BOS/EOS",
                self.model.max_len, self.dataset.max_len
            )));
        }
        if self.training.methods.is_empty() {
            return Err(Error::Config("training.methods is empty".into()));
        }
        if self.eval.seeds == 0 {
            return Err(Error::Config("eval.seeds must be >= 1".into()));
        }
        if self.eval.decode.beam_width == 0 {
            return Err(Error::Config("eval.decode.beam_width must be >= 1".into()));
        }
        if self
            .eval
            .sigmas
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(Error::Config("eval.sigmas must be finite and >= 0".into()));
        }
        let s = &self.curriculum.scorer;
        if s.batch_size == 0 {
            return Err(Error::Config(
                "curriculum.scorer.batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 (first 12 hex digits) of the configuration without the
    /// master seed and output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn replicate_seeds(&self) -> Vec<u64> {
        (0..self.eval.seeds as u64)
            .map(|r| self.seed.wrapping_add(r))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_json_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"model": {"d_model": 64, "width": 3}}"#,
            r#"{"dataset": {"seed": 3}}"#,
            r#"{"training": {"hyperparams": {"seed": 3}}}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let text = r#"{"model": {"vocab_size": 100}}"#;
        assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!(matches!("maml".parse::<Method>(), Err(Error::Usage(_))));
    }

    #[test]
    fn hash_ignores_seed_and_output() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 9,
            output_dir: "elsewhere".into(),
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.training.hyperparams.alpha = 0.5;
        assert_ne!(a.hash(), c.hash());
    }
}

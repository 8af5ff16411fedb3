//! Decoder-only language model used for divergence scoring.

use rand::Rng;

use super::decode::log_softmax;
use super::transformer::{attention, embed, feed_forward, layer_norm, Block, Init};
use super::{teacher_forcing, ModelConfig};
use crate::tensor::{BoundSet, Graph, ParameterSet, Var};
use crate::{Error, Result};

const LM: &str = "lm";

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    params: ParameterSet,
}

impl LanguageModel {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init {
            set: ParameterSet::new(),
            rng,
        };
        init.normal(format!("{LM}.embed"), &[config.vocab_size, d], 1.0)?;
        for l in 0..config.n_layers {
            let p = format!("{LM}.layers.{l}");
            init.layer_norm(&format!("{p}.ln1"), d)?;
            init.attention(&format!("{p}.attn"), d)?;
            init.layer_norm(&format!("{p}.ln2"), d)?;
            init.feed_forward(&format!("{p}.ff"), d, config.d_ff)?;
        }
        init.layer_norm(&format!("{LM}.ln_f"), d)?;
        init.normal(
            format!("{LM}.out.w"),
            &[d, config.vocab_size],
            1.0 / (d as f64).sqrt(),
        )?;
        init.zeros(format!("{LM}.out.b"), &[config.vocab_size])?;
        Ok(Self {
            config: config.clone(),
            params: init.set,
        })
    }

    pub fn from_params(config: &ModelConfig, params: ParameterSet) -> Result<Self> {
        let reference = Self::init(config, &mut super::layout_rng())?;
        if !reference.params.compatible_with(&params) {
            return Err(Error::Compatibility(
                "language model parameters do not match the configured layout".into(),
            ));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn zero_output_projection(&mut self) {
        for name in [format!("{LM}.out.w"), format!("{LM}.out.b")] {
            if let Ok(t) = self.params.get_mut(&name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    fn logits(
        &self,
        g: &mut Graph,
        bound: &BoundSet,
        sentence: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        if sentence.is_empty() {
            return Err(Error::Contract("empty sentence".into()));
        }
        if sentence.len() + 1 > self.config.max_len {
            return Err(Error::Length {
                len: sentence.len() + 1,
                max: self.config.max_len,
            });
        }
        let cfg = &self.config;
        let p = Block { bound, prefix: LM };
        let (inputs, gold) = teacher_forcing(sentence);
        let mut x = embed(g, &p, &inputs, cfg.d_model)?;
        for l in 0..cfg.n_layers {
            let pre = format!("layers.{l}");
            let h = layer_norm(g, &p, &format!("{pre}.ln1"), x)?;
            let a = attention(g, &p, &format!("{pre}.attn"), cfg, h, h, true)?;
            x = g.add(x, a)?;
            let h = layer_norm(g, &p, &format!("{pre}.ln2"), x)?;
            let f = feed_forward(g, &p, &format!("{pre}.ff"), h)?;
            x = g.add(x, f)?;
        }
        let h = layer_norm(g, &p, "ln_f", x)?;
        let logits = g.matmul(h, p.var("out.w")?)?;
        let logits = g.add(logits, p.var("out.b")?)?;
        Ok((logits, gold))
    }

    /// Mean per-token NLL over a batch of sentences (EOS included).
    pub fn batch_loss(&self, g: &mut Graph, sentences: &[&[usize]]) -> Result<Var> {
        if sentences.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let bound = g.bind_set(&self.params, true);
        let mut losses = Vec::with_capacity(sentences.len());
        for s in sentences {
            let (logits, gold) = self.logits(g, &bound, s)?;
            losses.push(g.softmax_cross_entropy(logits, &gold)?);
        }
        let total = g.add_all(&losses)?;
        Ok(g.scale(total, 1.0 / sentences.len() as f64))
    }

    /// `log P(s)`: BOS-conditioned sum over the tokens of `s` and EOS.
    pub fn log_prob(&self, sentence: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = g.bind_set(&self.params, false);
        let (logits, gold) = self.logits(&mut g, &bound, sentence)?;
        let ce = g.softmax_cross_entropy(logits, &gold)?;
        Ok(-g.value(ce)[0] * gold.len() as f64)
    }

    /// Next-token distributions (probabilities) at every position.
    pub fn distributions(&self, sentence: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = g.bind_set(&self.params, false);
        let (logits, _) = self.logits(&mut g, &bound, sentence)?;
        let v = self.config.vocab_size;
        Ok(g.value(logits)
            .chunks(v)
            .map(|row| log_softmax(row).into_iter().map(f64::exp).collect())
            .collect())
    }
}

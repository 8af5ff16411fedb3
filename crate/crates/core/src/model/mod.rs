//! Encoder-decoder transformer with separately owned, recombinable halves.
//!
//! An [`EncoderParams`] and a [`DecoderParams`] built from the same
//! [`ModelConfig`] always compose. [`compose`] borrows both halves, so a
//! composition never copies or mutates either side.

mod config;
mod decode;
mod lm;
mod transformer;
mod vocab;

use rand::Rng;

use crate::corpus::SentencePair;
use crate::tensor::{BoundSet, Graph, ParameterSet, Var};
use crate::{Error, Result};
use transformer::{attention, embed, feed_forward, layer_norm, Block, Init};

pub use config::ModelConfig;
pub use decode::{beam_decode, greedy_decode, Decoded};
pub use lm::LanguageModel;
pub use vocab::{Vocabulary, BOS, EOS, NUM_RESERVED, PAD, RESERVED, UNK};

const ENC: &str = "encoder";
const DEC: &str = "decoder";

/// Encoder parameters θ (embedding, self-attention, feed-forward, norms).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: ModelConfig,
    params: ParameterSet,
}

/// Decoder parameters φ, including cross-attention and the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    config: ModelConfig,
    params: ParameterSet,
}

macro_rules! half_accessors {
    ($t:ty) => {
        impl $t {
            pub fn config(&self) -> &ModelConfig {
                &self.config
            }

            pub fn params(&self) -> &ParameterSet {
                &self.params
            }

            pub fn params_mut(&mut self) -> &mut ParameterSet {
                &mut self.params
            }

            pub fn into_params(self) -> ParameterSet {
                self.params
            }
        }
    };
}

half_accessors!(EncoderParams);
half_accessors!(DecoderParams);

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init {
            set: ParameterSet::new(),
            rng,
        };
        init.normal(format!("{ENC}.embed"), &[config.vocab_size, d], 1.0)?;
        for l in 0..config.n_layers {
            let p = format!("{ENC}.layers.{l}");
            init.layer_norm(&format!("{p}.ln1"), d)?;
            init.attention(&format!("{p}.attn"), d)?;
            init.layer_norm(&format!("{p}.ln2"), d)?;
            init.feed_forward(&format!("{p}.ff"), d, config.d_ff)?;
        }
        init.layer_norm(&format!("{ENC}.ln_f"), d)?;
        Ok(Self {
            config: config.clone(),
            params: init.set,
        })
    }

    /// Wraps an existing parameter set, checking it against a fresh layout.
    pub fn from_params(config: &ModelConfig, params: ParameterSet) -> Result<Self> {
        let reference = Self::init(config, &mut layout_rng())?;
        check_layout(&reference.params, &params, "encoder")?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init {
            set: ParameterSet::new(),
            rng,
        };
        init.normal(format!("{DEC}.embed"), &[config.vocab_size, d], 1.0)?;
        for l in 0..config.n_layers {
            let p = format!("{DEC}.layers.{l}");
            init.layer_norm(&format!("{p}.ln1"), d)?;
            init.attention(&format!("{p}.self_attn"), d)?;
            init.layer_norm(&format!("{p}.ln2"), d)?;
            init.attention(&format!("{p}.cross_attn"), d)?;
            init.layer_norm(&format!("{p}.ln3"), d)?;
            init.feed_forward(&format!("{p}.ff"), d, config.d_ff)?;
        }
        init.layer_norm(&format!("{DEC}.ln_f"), d)?;
        init.normal(
            format!("{DEC}.out.w"),
            &[d, config.vocab_size],
            1.0 / (d as f64).sqrt(),
        )?;
        init.zeros(format!("{DEC}.out.b"), &[config.vocab_size])?;
        Ok(Self {
            config: config.clone(),
            params: init.set,
        })
    }

    pub fn from_params(config: &ModelConfig, params: ParameterSet) -> Result<Self> {
        let reference = Self::init(config, &mut layout_rng())?;
        check_layout(&reference.params, &params, "decoder")?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Zeroes the output projection, making every next-token distribution
    /// uniform.
    pub fn zero_output_projection(&mut self) {
        for name in [format!("{DEC}.out.w"), format!("{DEC}.out.b")] {
            if let Ok(t) = self.params.get_mut(&name) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

fn check_layout(reference: &ParameterSet, got: &ParameterSet, what: &str) -> Result<()> {
    if reference.compatible_with(got) {
        Ok(())
    } else {
        Err(Error::Compatibility(format!(
            "{what} parameters do not match the configured layout"
        )))
    }
}

/// A full model: f(s) = h_φ(g_θ(s)).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoderModel {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Borrowed pairing of an encoder with a decoder.
#[derive(Debug, Clone, Copy)]
pub struct Composition<'a> {
    pub encoder: &'a EncoderParams,
    pub decoder: &'a DecoderParams,
}

/// Routes encoding through `theta` and decoding through `phi`.
pub fn compose<'a>(theta: &'a EncoderParams, phi: &'a DecoderParams) -> Result<Composition<'a>> {
    if theta.config != phi.config {
        return Err(Error::Compatibility(format!(
            "encoder config {:?} differs from decoder config {:?}",
            theta.config, phi.config
        )));
    }
    Ok(Composition {
        encoder: theta,
        decoder: phi,
    })
}

impl EncoderDecoderModel {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder = EncoderParams::init(config, rng)?;
        let decoder = DecoderParams::init(config, rng)?;
        Ok(Self { encoder, decoder })
    }

    pub fn from_parts(encoder: EncoderParams, decoder: DecoderParams) -> Result<Self> {
        compose(&encoder, &decoder)?;
        Ok(Self { encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    pub fn as_composition(&self) -> Composition<'_> {
        Composition {
            encoder: &self.encoder,
            decoder: &self.decoder,
        }
    }

    /// Both halves flattened into one set (names are prefix-disjoint).
    pub fn to_parameter_set(&self) -> ParameterSet {
        let mut all = self.encoder.params.clone();
        for (n, t) in self.decoder.params.iter() {
            all.insert(n, t.clone())
                .expect("encoder/decoder names are disjoint");
        }
        all
    }

    pub fn from_parameter_set(config: &ModelConfig, all: ParameterSet) -> Result<Self> {
        let mut enc = ParameterSet::new();
        let mut dec = ParameterSet::new();
        for (n, t) in all.iter() {
            let target = if n.starts_with(ENC) {
                &mut enc
            } else {
                &mut dec
            };
            target.insert(n, t.clone())?;
        }
        Ok(Self {
            encoder: EncoderParams::from_params(config, enc)?,
            decoder: DecoderParams::from_params(config, dec)?,
        })
    }

    pub fn checksum(&self) -> String {
        self.to_parameter_set().checksum()
    }

    pub fn encode(&self, source: &[usize]) -> Result<crate::tensor::Tensor> {
        self.as_composition().encode(source)
    }

    pub fn nll(&self, pair: &SentencePair) -> Result<f64> {
        self.as_composition().nll(pair)
    }

    pub fn target_log_prob(&self, pair: &SentencePair) -> Result<f64> {
        self.as_composition().target_log_prob(pair)
    }

    pub fn decode_log_probs(&self, source: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        self.as_composition().decode_log_probs(source, prefix)
    }

    pub fn greedy_decode(&self, source: &[usize], max_steps: usize) -> Result<Decoded> {
        greedy_decode(self.as_composition(), source, max_steps)
    }

    pub fn beam_decode(&self, source: &[usize], width: usize, max_steps: usize) -> Result<Decoded> {
        beam_decode(self.as_composition(), source, width, max_steps)
    }
}

fn check_source(cfg: &ModelConfig, source: &[usize]) -> Result<()> {
    if source.is_empty() {
        return Err(Error::Contract("empty source sequence".into()));
    }
    if source.len() > cfg.max_len {
        return Err(Error::Length {
            len: source.len(),
            max: cfg.max_len,
        });
    }
    Ok(())
}

fn check_target(cfg: &ModelConfig, target: &[usize]) -> Result<()> {
    if target.is_empty() {
        return Err(Error::Contract("empty target sequence".into()));
    }
    if target.len() + 1 > cfg.max_len {
        return Err(Error::Length {
            len: target.len() + 1,
            max: cfg.max_len,
        });
    }
    Ok(())
}

pub(crate) fn encoder_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    bound: &BoundSet,
    source: &[usize],
) -> Result<Var> {
    check_source(cfg, source)?;
    let p = Block { bound, prefix: ENC };
    let mut x = embed(g, &p, source, cfg.d_model)?;
    for l in 0..cfg.n_layers {
        let pre = format!("layers.{l}");
        let h = layer_norm(g, &p, &format!("{pre}.ln1"), x)?;
        let a = attention(g, &p, &format!("{pre}.attn"), cfg, h, h, false)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, &p, &format!("{pre}.ln2"), x)?;
        let f = feed_forward(g, &p, &format!("{pre}.ff"), h)?;
        x = g.add(x, f)?;
    }
    layer_norm(g, &p, "ln_f", x)
}

/// Decoder hidden states for `inputs` (BOS-prefixed), before projection.
pub(crate) fn decoder_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    bound: &BoundSet,
    memory: Var,
    inputs: &[usize],
) -> Result<Var> {
    let p = Block { bound, prefix: DEC };
    let mut y = embed(g, &p, inputs, cfg.d_model)?;
    for l in 0..cfg.n_layers {
        let pre = format!("layers.{l}");
        let h = layer_norm(g, &p, &format!("{pre}.ln1"), y)?;
        let a = attention(g, &p, &format!("{pre}.self_attn"), cfg, h, h, true)?;
        y = g.add(y, a)?;
        let h = layer_norm(g, &p, &format!("{pre}.ln2"), y)?;
        let c = attention(g, &p, &format!("{pre}.cross_attn"), cfg, h, memory, false)?;
        y = g.add(y, c)?;
        let h = layer_norm(g, &p, &format!("{pre}.ln3"), y)?;
        let f = feed_forward(g, &p, &format!("{pre}.ff"), h)?;
        y = g.add(y, f)?;
    }
    layer_norm(g, &p, "ln_f", y)
}

pub(crate) fn project(g: &mut Graph, bound: &BoundSet, hidden: Var) -> Result<Var> {
    let w = bound.get(&format!("{DEC}.out.w"))?;
    let b = bound.get(&format!("{DEC}.out.b"))?;
    let logits = g.matmul(hidden, w)?;
    g.add(logits, b)
}

/// Decoder input `[BOS, t_1..t_M]` and gold outputs `[t_1..t_M, EOS]`.
pub(crate) fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(target.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(EOS);
    (inputs, gold)
}

/// Teacher-forced mean per-token NLL of one pair as a graph scalar.
pub(crate) fn pair_nll(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &BoundSet,
    dec: &BoundSet,
    source: &[usize],
    target: &[usize],
) -> Result<Var> {
    check_target(cfg, target)?;
    let memory = encoder_forward(g, cfg, enc, source)?;
    let (inputs, gold) = teacher_forcing(target);
    let hidden = decoder_forward(g, cfg, dec, memory, &inputs)?;
    let logits = project(g, dec, hidden)?;
    g.softmax_cross_entropy(logits, &gold)
}

/// Mean over the batch of per-pair mean NLL, for the composition of
/// `encoder` and `decoder`. Halves bound with `*_trainable == false` are
/// constants: gradients pass through them but are never written back.
pub fn batch_loss(
    g: &mut Graph,
    encoder: &EncoderParams,
    enc_trainable: bool,
    decoder: &DecoderParams,
    dec_trainable: bool,
    batch: &[SentencePair],
) -> Result<Var> {
    let comp = compose(encoder, decoder)?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let cfg = comp.encoder.config();
    let enc = g.bind_set(&encoder.params, enc_trainable);
    let dec = g.bind_set(&decoder.params, dec_trainable);
    let mut losses = Vec::with_capacity(batch.len());
    for pair in batch {
        losses.push(pair_nll(g, cfg, &enc, &dec, &pair.source, &pair.target)?);
    }
    let total = g.add_all(&losses)?;
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

impl Composition<'_> {
    pub fn config(&self) -> &ModelConfig {
        self.encoder.config()
    }

    /// Memory features `[len, d_model]`.
    pub fn encode(&self, source: &[usize]) -> Result<crate::tensor::Tensor> {
        let mut g = Graph::new();
        let enc = g.bind_set(&self.encoder.params, false);
        let m = encoder_forward(&mut g, self.config(), &enc, source)?;
        Ok(g.to_tensor(m))
    }

    pub fn nll(&self, pair: &SentencePair) -> Result<f64> {
        let mut g = Graph::new();
        let enc = g.bind_set(&self.encoder.params, false);
        let dec = g.bind_set(&self.decoder.params, false);
        let l = pair_nll(
            &mut g,
            self.config(),
            &enc,
            &dec,
            &pair.source,
            &pair.target,
        )?;
        Ok(g.value(l)[0])
    }

    /// `log P(t | s)` summed over the target tokens and EOS.
    pub fn target_log_prob(&self, pair: &SentencePair) -> Result<f64> {
        Ok(-self.nll(pair)? * (pair.target.len() + 1) as f64)
    }

    /// Log-probabilities of the next token after `BOS + prefix`.
    pub fn decode_log_probs(&self, source: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        let mut s = decode::Session::new(*self, source)?;
        s.next_log_probs(prefix)
    }
}

/// A model whose two halves can be trained separately and recombined.
/// The trainers are generic over this so small analytic models can stand
/// in for the transformer in tests.
pub trait Seq2Seq: Clone {
    fn encoder_set(&self) -> &ParameterSet;
    fn encoder_set_mut(&mut self) -> &mut ParameterSet;
    fn decoder_set(&self) -> &ParameterSet;
    fn decoder_set_mut(&mut self) -> &mut ParameterSet;

    /// Mean batch loss of `enc_from`'s encoder composed with `dec_from`'s
    /// decoder.
    fn composed_loss(
        g: &mut Graph,
        enc_from: &Self,
        enc_trainable: bool,
        dec_from: &Self,
        dec_trainable: bool,
        batch: &[SentencePair],
    ) -> Result<Var>;
}

impl Seq2Seq for EncoderDecoderModel {
    fn encoder_set(&self) -> &ParameterSet {
        &self.encoder.params
    }

    fn encoder_set_mut(&mut self) -> &mut ParameterSet {
        &mut self.encoder.params
    }

    fn decoder_set(&self) -> &ParameterSet {
        &self.decoder.params
    }

    fn decoder_set_mut(&mut self) -> &mut ParameterSet {
        &mut self.decoder.params
    }

    fn composed_loss(
        g: &mut Graph,
        enc_from: &Self,
        enc_trainable: bool,
        dec_from: &Self,
        dec_trainable: bool,
        batch: &[SentencePair],
    ) -> Result<Var> {
        batch_loss(
            g,
            &enc_from.encoder,
            enc_trainable,
            &dec_from.decoder,
            dec_trainable,
            batch,
        )
    }
}

fn layout_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

//! A two-parameter stand-in for the transformer.
//!
//! Source and target are single tokens in `0..3`. The encoder maps token
//! `s` to `h = θ·X[s]`, the decoder produces logits `z_c = φ·h·W[c] + B[c]`,
//! and the loss is softmax cross-entropy averaged over the batch. Every
//! gradient below is worked out by hand, independently of the graph.

use epi_core::corpus::SentencePair;
use epi_core::model::Seq2Seq;
use epi_core::tensor::{Graph, ParameterSet, Tensor, Var};
use epi_core::trainers::{BatchSource, EpisodicState, Hyperparams};
use epi_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const X: [f64; 3] = [1.0, -0.5, 2.0];
pub const W: [f64; 3] = [1.0, -1.0, 0.5];
pub const B: [f64; 3] = [0.1, 0.0, -0.2];

#[derive(Debug, Clone, PartialEq)]
pub struct Toy {
    pub enc: ParameterSet,
    pub dec: ParameterSet,
}

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1, 1], vec![v]).unwrap().with_grad(true)
}

impl Toy {
    pub fn new(theta: f64, phi: f64) -> Self {
        let mut enc = ParameterSet::new();
        enc.insert("enc.theta", scalar(theta)).unwrap();
        let mut dec = ParameterSet::new();
        dec.insert("dec.phi", scalar(phi)).unwrap();
        Self { enc, dec }
    }

    pub fn theta(&self) -> f64 {
        self.enc.get("enc.theta").unwrap().data()[0]
    }

    pub fn phi(&self) -> f64 {
        self.dec.get("dec.phi").unwrap().data()[0]
    }
}

impl Seq2Seq for Toy {
    fn encoder_set(&self) -> &ParameterSet {
        &self.enc
    }

    fn encoder_set_mut(&mut self) -> &mut ParameterSet {
        &mut self.enc
    }

    fn decoder_set(&self) -> &ParameterSet {
        &self.dec
    }

    fn decoder_set_mut(&mut self) -> &mut ParameterSet {
        &mut self.dec
    }

    fn composed_loss(
        g: &mut Graph,
        enc_from: &Self,
        enc_trainable: bool,
        dec_from: &Self,
        dec_trainable: bool,
        batch: &[SentencePair],
    ) -> Result<Var> {
        let theta = g.bind_set(&enc_from.enc, enc_trainable).get("enc.theta")?;
        let phi = g.bind_set(&dec_from.dec, dec_trainable).get("dec.phi")?;
        let w = g.constant(vec![1, 3], W.to_vec())?;
        let b = g.constant(vec![1, 3], B.to_vec())?;
        let mut losses = Vec::new();
        for p in batch {
            let x = g.constant(vec![1, 1], vec![X[p.source[0]]])?;
            let h = g.matmul(x, theta)?;
            let hp = g.matmul(h, phi)?;
            let z = g.matmul(hp, w)?;
            let z = g.add(z, b)?;
            losses.push(g.softmax_cross_entropy(z, &[p.target[0]])?);
        }
        let total = g.add_all(&losses)?;
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }
}

fn probs(theta: f64, phi: f64, s: usize) -> [f64; 3] {
    let z: Vec<f64> = (0..3).map(|c| phi * theta * X[s] * W[c] + B[c]).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    [e[0] / sum, e[1] / sum, e[2] / sum]
}

/// Mean loss and `(∂/∂θ, ∂/∂φ)` for encoder `theta` with decoder `phi`.
pub fn oracle(theta: f64, phi: f64, batch: &[SentencePair]) -> (f64, f64, f64) {
    let (mut loss, mut gt, mut gp) = (0.0, 0.0, 0.0);
    for pair in batch {
        let (s, t) = (pair.source[0], pair.target[0]);
        let p = probs(theta, phi, s);
        loss -= p[t].ln();
        // dL/dz_c = p_c - [c == t]; z_c depends on θφ through X[s]·W[c].
        let dz: f64 = (0..3)
            .map(|c| (p[c] - f64::from(u8::from(c == t))) * X[s] * W[c])
            .sum();
        gt += dz * phi;
        gp += dz * theta;
    }
    let n = batch.len() as f64;
    (loss / n, gt / n, gp / n)
}

/// Every source token once per domain; domain `d` maps `s` to `(s + d) % 3`.
pub fn corpus(domains: &[usize], copies: usize) -> Vec<SentencePair> {
    let mut out = Vec::new();
    for &d in domains {
        for _ in 0..copies {
            for s in 0..3 {
                out.push(SentencePair::new(vec![s], vec![(s + d) % 3], d));
            }
        }
    }
    out
}

/// Agg at (0.7, -0.4) with distinct specialists so that partner choice matters.
pub fn toy_state(domains: Vec<usize>, alpha: f64, beta: f64) -> EpisodicState<Toy> {
    let mut s = EpisodicState::new(
        &Toy::new(0.7, -0.4),
        domains,
        Hyperparams {
            alpha,
            beta,
            batch_size: 3,
            ..Hyperparams::default()
        },
        10,
    );
    for (j, spec) in s.specialists.iter_mut().enumerate() {
        *spec = Toy::new(0.3 + 0.2 * j as f64, 0.9 - 0.3 * j as f64);
    }
    s
}

/// One episode replayed by hand from the same draws.
pub fn replay_episode(
    s: &EpisodicState<Toy>,
    source: &BatchSource,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, Vec<(f64, f64)>) {
    let (alpha, beta, bs) = (s.hp.alpha, s.hp.beta, s.hp.batch_size);
    let n = s.domains.len();
    let pos = s.completed % n;
    let progress = s.completed as f64 / s.total as f64;
    let (batch, _) = source
        .draw(Some(s.domains[pos]), progress, bs, rng)
        .unwrap();
    let j = rng.random_range(0..n - 1);
    let k = if j >= pos { j + 1 } else { j };

    let mut specs: Vec<(f64, f64)> = s.specialists.iter().map(|m| (m.theta(), m.phi())).collect();
    for (j, d) in s.domains.iter().enumerate() {
        let (own, _) = source.draw(Some(*d), progress, bs, rng).unwrap();
        let (t, p) = specs[j];
        let (_, gt, gp) = oracle(t, p, &own);
        specs[j] = (t - beta * gt, p - beta * gp);
    }
    let (theta, phi) = (s.agg.theta(), s.agg.phi());
    let (_, agg_t, agg_p) = oracle(theta, phi, &batch);
    let (_, enc_t, _) = oracle(theta, specs[k].1, &batch);
    let (_, _, dec_p) = oracle(specs[k].0, phi, &batch);
    (
        theta - alpha * (agg_t + enc_t),
        phi - alpha * (agg_p + dec_p),
        specs,
    )
}

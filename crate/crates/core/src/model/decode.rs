//! Greedy and beam decoding.
//!
//! Only content tokens and EOS are ever emitted. Among equal scores content
//! tokens win by lowest id and EOS ranks after every content token, so a
//! model with a uniform output distribution keeps emitting the lowest content
//! id until the step limit. Beam hypotheses are ranked by the sum of token
//! log-probabilities divided by the number of generated tokens (EOS
//! included); remaining ties go to the lowest beam index.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::rc::Rc;

use super::transformer::{positional, LN_EPS};
use super::{encoder_forward, Composition, BOS, EOS, NUM_RESERVED};
use crate::tensor::{gelu, matmul_into, Graph, ParameterSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated tokens without BOS/EOS.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of the generated tokens (EOS included when
    /// finished).
    pub log_prob: f64,
    /// `log_prob` divided by the number of generated tokens.
    pub score: f64,
    /// True when the step limit was hit before EOS.
    pub truncated: bool,
}

/// Incremental decoder for one source sentence.
///
/// Keys and values of every decoded prefix are cached, so extending a
/// prefix by one token costs one position instead of a full decoder pass.
/// The arithmetic mirrors the graph ops operation for operation, so the
/// log-probabilities are bitwise equal to a full teacher-forced pass.
pub(crate) struct Session<'a> {
    comp: Composition<'a>,
    w: Weights<'a>,
    pe: Vec<f64>,
    /// Cross-attention keys and values of the memory, per layer.
    cross: Vec<(Vec<f64>, Vec<f64>)>,
    src_len: usize,
    cache: HashMap<Vec<usize>, Rc<State>>,
}

/// Self-attention keys/values of `BOS + prefix`, per layer, and the
/// next-token log-probabilities after it.
struct State {
    kv: Vec<(Vec<f64>, Vec<f64>)>,
    log_probs: Vec<f64>,
}

fn param<'p>(set: &'p ParameterSet, name: &str) -> Result<&'p [f64]> {
    Ok(set.get(name)?.data())
}

struct LayerWeights<'a> {
    ln: [(&'a [f64], &'a [f64]); 3],
    self_attn: [&'a [f64]; 4],
    cross_wq: &'a [f64],
    cross_wo: &'a [f64],
    ff: [&'a [f64]; 4],
}

struct Weights<'a> {
    embed: &'a [f64],
    layers: Vec<LayerWeights<'a>>,
    ln_f: (&'a [f64], &'a [f64]),
    out_w: &'a [f64],
    out_b: &'a [f64],
}

impl<'a> Weights<'a> {
    fn new(set: &'a ParameterSet, n_layers: usize) -> Result<Self> {
        let get = |suffix: &str| param(set, &format!("decoder.{suffix}"));
        let ln = |name: &str| -> Result<(&'a [f64], &'a [f64])> {
            Ok((get(&format!("{name}.g"))?, get(&format!("{name}.b"))?))
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let pre = format!("layers.{l}");
            let sa = |w: &str| get(&format!("{pre}.self_attn.{w}"));
            let ff = |w: &str| get(&format!("{pre}.ff.{w}"));
            layers.push(LayerWeights {
                ln: [
                    ln(&format!("{pre}.ln1"))?,
                    ln(&format!("{pre}.ln2"))?,
                    ln(&format!("{pre}.ln3"))?,
                ],
                self_attn: [sa("wq")?, sa("wk")?, sa("wv")?, sa("wo")?],
                cross_wq: get(&format!("{pre}.cross_attn.wq"))?,
                cross_wo: get(&format!("{pre}.cross_attn.wo"))?,
                ff: [ff("w1")?, ff("b1")?, ff("w2")?, ff("b2")?],
            });
        }
        Ok(Self {
            embed: get("embed")?,
            layers,
            ln_f: ln("ln_f")?,
            out_w: get("out.w")?,
            out_b: get("out.b")?,
        })
    }
}

fn vec_mat(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    matmul_into(x, w, 1, x.len(), n, &mut out);
    out
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let s = 1.0 / (var + LN_EPS).sqrt();
    (0..d)
        .map(|j| (x[j] - mean) * s * gain[j] + bias[j])
        .collect()
}

/// One query row attending over `rows` cached keys/values.
fn attend(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    rows: usize,
    heads: usize,
    wo: &[f64],
) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut cat = Vec::with_capacity(d);
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let mut scores = vec![0.0; rows];
        for (p, &qv) in qh.iter().enumerate() {
            if qv == 0.0 {
                continue;
            }
            for (j, sc) in scores.iter_mut().enumerate() {
                *sc += qv * keys[j * d + h * dh + p];
            }
        }
        scores.iter_mut().for_each(|v| *v *= scale);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in scores.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        scores.iter_mut().for_each(|v| *v /= z);
        let mut out = vec![0.0; dh];
        for (j, &a) in scores.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, &v) in out
                .iter_mut()
                .zip(&values[j * d + h * dh..j * d + (h + 1) * dh])
            {
                *o += a * v;
            }
        }
        cat.extend(out);
    }
    vec_mat(&cat, wo, d)
}

impl<'a> Session<'a> {
    pub fn new(comp: Composition<'a>, source: &[usize]) -> Result<Self> {
        let cfg = comp.config();
        let mut graph = Graph::new();
        let enc = graph.bind_set(comp.encoder.params(), false);
        let memory = encoder_forward(&mut graph, cfg, &enc, source)?;
        let memory = graph.value(memory);
        let d = cfg.d_model;
        let dec = comp.decoder.params();
        let mut cross = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let pre = format!("decoder.layers.{l}.cross_attn");
            let mut k = vec![0.0; source.len() * d];
            let mut v = vec![0.0; source.len() * d];
            matmul_into(
                memory,
                param(dec, &format!("{pre}.wk"))?,
                source.len(),
                d,
                d,
                &mut k,
            );
            matmul_into(
                memory,
                param(dec, &format!("{pre}.wv"))?,
                source.len(),
                d,
                d,
                &mut v,
            );
            cross.push((k, v));
        }
        Ok(Self {
            comp,
            w: Weights::new(dec, cfg.n_layers)?,
            pe: positional(cfg.max_len, d),
            cross,
            src_len: source.len(),
            cache: HashMap::new(),
        })
    }

    /// Extends `parent` (the state of `BOS + prefix[..pos-1]`) with the
    /// token at decoder position `pos`.
    fn extend(&self, parent: Option<&State>, token: usize, pos: usize) -> Result<State> {
        let cfg = self.comp.config();
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let w = &self.w;
        let mut x: Vec<f64> = w.embed[token * d..(token + 1) * d].to_vec();
        add_in_place(&mut x, &self.pe[pos * d..(pos + 1) * d]);
        let mut kv = Vec::with_capacity(cfg.n_layers);
        for (l, lw) in w.layers.iter().enumerate() {
            let [wq, wk, wv, wo] = lw.self_attn;
            let h = layer_norm_row(&x, lw.ln[0].0, lw.ln[0].1);
            let q = vec_mat(&h, wq, d);
            let (mut keys, mut values) = match parent {
                Some(s) => s.kv[l].clone(),
                None => (Vec::new(), Vec::new()),
            };
            keys.extend(vec_mat(&h, wk, d));
            values.extend(vec_mat(&h, wv, d));
            let a = attend(&q, &keys, &values, pos + 1, heads, wo);
            add_in_place(&mut x, &a);
            kv.push((keys, values));

            let h = layer_norm_row(&x, lw.ln[1].0, lw.ln[1].1);
            let q = vec_mat(&h, lw.cross_wq, d);
            let (ck, cv) = &self.cross[l];
            let c = attend(&q, ck, cv, self.src_len, heads, lw.cross_wo);
            add_in_place(&mut x, &c);

            let [w1, b1, w2, b2] = lw.ff;
            let h = layer_norm_row(&x, lw.ln[2].0, lw.ln[2].1);
            let mut f = vec_mat(&h, w1, cfg.d_ff);
            add_in_place(&mut f, b1);
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let mut f = vec_mat(&f, w2, d);
            add_in_place(&mut f, b2);
            add_in_place(&mut x, &f);
        }
        let h = layer_norm_row(&x, w.ln_f.0, w.ln_f.1);
        let mut logits = vec_mat(&h, w.out_w, cfg.vocab_size);
        add_in_place(&mut logits, w.out_b);
        Ok(State {
            kv,
            log_probs: log_softmax(&logits),
        })
    }

    fn state(&mut self, prefix: &[usize]) -> Result<Rc<State>> {
        if let Some(s) = self.cache.get(prefix) {
            return Ok(s.clone());
        }
        let state = match prefix.split_last() {
            None => self.extend(None, BOS, 0)?,
            Some((&last, head)) => {
                let parent = self.state(head)?;
                self.extend(Some(&parent), last, prefix.len())?
            }
        };
        let state = Rc::new(state);
        self.cache.insert(prefix.to_vec(), state.clone());
        Ok(state)
    }

    pub fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let cfg = self.comp.config();
        if prefix.len() + 1 > cfg.max_len {
            return Err(Error::Length {
                len: prefix.len() + 1,
                max: cfg.max_len,
            });
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} >= vocabulary size {}",
                cfg.vocab_size
            )));
        }
        Ok(self.state(prefix)?.log_probs.clone())
    }

    fn step_limit(&self, max_steps: usize) -> usize {
        max_steps.min(self.comp.config().max_len - 1)
    }
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Tie-break rank: content tokens by id, then EOS.
fn rank(token: usize) -> usize {
    if token == EOS {
        usize::MAX
    } else {
        token
    }
}

fn emittable(vocab: usize) -> impl Iterator<Item = usize> {
    (NUM_RESERVED..vocab).chain(std::iter::once(EOS))
}

pub fn greedy_decode(comp: Composition<'_>, source: &[usize], max_steps: usize) -> Result<Decoded> {
    let mut s = Session::new(comp, source)?;
    let limit = s.step_limit(max_steps);
    let vocab = comp.config().vocab_size;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut finished = false;
    while tokens.len() < limit {
        let lp = s.next_log_probs(&tokens)?;
        let best = emittable(vocab)
            .min_by(|&a, &b| {
                lp[b]
                    .partial_cmp(&lp[a])
                    .unwrap_or(Ordering::Equal)
                    .then(rank(a).cmp(&rank(b)))
            })
            .expect("vocabulary has content tokens");
        log_prob += lp[best];
        if best == EOS {
            finished = true;
            break;
        }
        tokens.push(best);
    }
    let generated = tokens.len() + usize::from(finished);
    Ok(Decoded {
        score: if generated == 0 {
            0.0
        } else {
            log_prob / generated as f64
        },
        tokens,
        log_prob,
        truncated: !finished,
    })
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Hyp {
    fn generated(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    fn score(&self) -> f64 {
        self.log_prob / self.generated().max(1) as f64
    }
}

struct Candidate {
    beam: usize,
    /// `None` carries a finished hypothesis over unchanged.
    token: Option<usize>,
    log_prob: f64,
    score: f64,
}

impl Candidate {
    fn order(&self, other: &Self) -> Ordering {
        let key = |c: &Self| rank(c.token.unwrap_or(EOS));
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then(key(self).cmp(&key(other)))
            .then(self.beam.cmp(&other.beam))
    }
}

pub fn beam_decode(
    comp: Composition<'_>,
    source: &[usize],
    width: usize,
    max_steps: usize,
) -> Result<Decoded> {
    if width == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    let mut s = Session::new(comp, source)?;
    let limit = s.step_limit(max_steps);
    let vocab = comp.config().vocab_size;
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..limit {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut cands = Vec::new();
        for (bi, h) in beams.iter().enumerate() {
            if h.finished {
                cands.push(Candidate {
                    beam: bi,
                    token: None,
                    log_prob: h.log_prob,
                    score: h.score(),
                });
                continue;
            }
            let lp = s.next_log_probs(&h.tokens)?;
            for tok in emittable(vocab) {
                let generated = h.tokens.len() + 1;
                let log_prob = h.log_prob + lp[tok];
                cands.push(Candidate {
                    beam: bi,
                    token: Some(tok),
                    log_prob,
                    score: log_prob / generated as f64,
                });
            }
        }
        cands.sort_by(Candidate::order);
        beams = cands
            .iter()
            .take(width)
            .map(|c| {
                let parent = &beams[c.beam];
                let mut tokens = parent.tokens.clone();
                match c.token {
                    Some(t) if t != EOS => tokens.push(t),
                    _ => {}
                }
                Hyp {
                    tokens,
                    log_prob: c.log_prob,
                    finished: c.token.is_none_or(|t| t == EOS),
                }
            })
            .collect();
    }
    let pick = |hs: &[&Hyp]| -> Option<Hyp> {
        hs.iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| {
                b.score()
                    .partial_cmp(&a.score())
                    .unwrap_or(Ordering::Equal)
                    .then(ia.cmp(ib))
            })
            .map(|(_, h)| (*h).clone())
    };
    let finished: Vec<&Hyp> = beams.iter().filter(|h| h.finished).collect();
    let best = match pick(&finished) {
        Some(h) => h,
        None => pick(&beams.iter().collect::<Vec<_>>()).expect("at least one beam"),
    };
    Ok(Decoded {
        score: best.score(),
        truncated: !best.finished,
        tokens: best.tokens,
        log_prob: best.log_prob,
    })
}

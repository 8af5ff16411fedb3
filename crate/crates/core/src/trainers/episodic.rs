//! Episodic encoder/decoder training with domain specialists.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{train_step, BatchSource, Hyperparams};
use crate::corpus::SentencePair;
use crate::model::Seq2Seq;
use crate::tensor::{sgd_step, Graph, ParameterSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub stage: usize,
    pub domain_i: usize,
    pub partner_k: usize,
    pub l_agg: f64,
    pub l_i: f64,
    pub l_enc: f64,
    pub l_dec: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<EpisodeRecord>,
}

impl EpisodeLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Contract(format!("csv: {e}"))
}

/// Which model halves changed (values or gradient buffers) during each
/// phase of one episode. Recorded only when auditing is on.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeAudit {
    pub episode: usize,
    /// Part labels: `agg.enc`, `agg.dec`, then `spec{d}.enc`, `spec{d}.dec`
    /// per seen domain `d`.
    pub parts: Vec<String>,
    /// `(phase, changed part labels)` in execution order.
    pub phases: Vec<(String, Vec<String>)>,
}

impl EpisodeAudit {
    pub fn changed(&self, phase: &str) -> Option<&[String]> {
        self.phases
            .iter()
            .find(|(p, _)| p == phase)
            .map(|(_, c)| c.as_slice())
    }
}

/// Aggregation model, persistent specialists and progress of one run.
#[derive(Debug, Clone)]
pub struct EpisodicState<M: Seq2Seq> {
    pub agg: M,
    /// `specialists[j]` is trained only on `domains[j]`.
    pub specialists: Vec<M>,
    pub domains: Vec<usize>,
    pub hp: Hyperparams,
    pub completed: usize,
    pub total: usize,
    pub audit: Option<Vec<EpisodeAudit>>,
}

impl<M: Seq2Seq> EpisodicState<M> {
    /// Aggregation model and every specialist start from `vanilla`.
    pub fn new(vanilla: &M, domains: Vec<usize>, hp: Hyperparams, total: usize) -> Self {
        Self {
            agg: vanilla.clone(),
            specialists: vec![vanilla.clone(); domains.len()],
            domains,
            hp,
            completed: 0,
            total,
            audit: None,
        }
    }

    pub fn with_audit(mut self) -> Self {
        self.audit = Some(Vec::new());
        self
    }

    fn position(&self, domain: usize) -> Result<usize> {
        self.domains
            .iter()
            .position(|&d| d == domain)
            .ok_or_else(|| Error::Lookup(format!("no specialist for domain {domain}")))
    }

    fn fingerprints(&self) -> Vec<u64> {
        let mut out = vec![
            fingerprint(self.agg.encoder_set()),
            fingerprint(self.agg.decoder_set()),
        ];
        for s in &self.specialists {
            out.push(fingerprint(s.encoder_set()));
            out.push(fingerprint(s.decoder_set()));
        }
        out
    }

    fn part_labels(&self) -> Vec<String> {
        let mut out = vec!["agg.enc".to_string(), "agg.dec".to_string()];
        for d in &self.domains {
            out.push(format!("spec{d}.enc"));
            out.push(format!("spec{d}.dec"));
        }
        out
    }

    fn partner<R: Rng + ?Sized>(&self, pos_i: usize, rng: &mut R) -> Result<usize> {
        let n = self.domains.len();
        if n < 2 {
            return Err(Error::Config(
                "episodic training needs at least two seen domains".into(),
            ));
        }
        let j = rng.random_range(0..n - 1);
        Ok(if j >= pos_i { j + 1 } else { j })
    }
}

fn fingerprint(set: &ParameterSet) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in set.iter() {
        name.hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
        if let Some(g) = t.grad() {
            for v in g {
                v.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

fn check_domain(batch: &[SentencePair], domain: usize) -> Result<()> {
    match batch.iter().find(|p| p.domain != domain) {
        Some(p) => Err(Error::Contract(format!(
            "batch for domain {domain} contains a pair from domain {}",
            p.domain
        ))),
        None if batch.is_empty() => Err(Error::Contract("empty batch".into())),
        None => Ok(()),
    }
}

/// `θ_i, φ_i ← θ_i, φ_i − β∇L_i` on a batch from domain `domain`.
pub fn specialist_step<M: Seq2Seq>(
    state: &mut EpisodicState<M>,
    domain: usize,
    batch: &[SentencePair],
) -> Result<f64> {
    check_domain(batch, domain)?;
    let pos = state.position(domain)?;
    let beta = state.hp.beta;
    train_step(&mut state.specialists[pos], batch, beta)
}

/// Adds `∇θ L_enc` to the aggregation encoder: its encoder composed with
/// the frozen decoder of specialist `k`.
fn encoder_grads<M: Seq2Seq>(
    state: &mut EpisodicState<M>,
    k: usize,
    batch: &[SentencePair],
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = M::composed_loss(
        &mut g,
        &state.agg,
        true,
        &state.specialists[k],
        false,
        batch,
    )?;
    let grads = g.backward(loss)?;
    grads.accumulate_into(&g, state.agg.encoder_set_mut())?;
    Ok(g.value(loss)[0])
}

/// Adds `∇φ L_dec` to the aggregation decoder: the frozen encoder of
/// specialist `k` composed with its decoder.
fn decoder_grads<M: Seq2Seq>(
    state: &mut EpisodicState<M>,
    k: usize,
    batch: &[SentencePair],
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = M::composed_loss(
        &mut g,
        &state.specialists[k],
        false,
        &state.agg,
        true,
        batch,
    )?;
    let grads = g.backward(loss)?;
    grads.accumulate_into(&g, state.agg.decoder_set_mut())?;
    Ok(g.value(loss)[0])
}

fn agg_grads<M: Seq2Seq>(state: &mut EpisodicState<M>, batch: &[SentencePair]) -> Result<f64> {
    let mut g = Graph::new();
    let loss = M::composed_loss(&mut g, &state.agg, true, &state.agg, true, batch)?;
    let grads = g.backward(loss)?;
    grads.accumulate_into(&g, state.agg.encoder_set_mut())?;
    grads.accumulate_into(&g, state.agg.decoder_set_mut())?;
    Ok(g.value(loss)[0])
}

/// `θ ← θ − α∇θ L_enc` with a partner drawn uniformly from the other seen
/// domains. Returns `(partner domain, L_enc)`.
pub fn episodic_encoder_step<M: Seq2Seq, R: Rng + ?Sized>(
    state: &mut EpisodicState<M>,
    domain: usize,
    batch: &[SentencePair],
    rng: &mut R,
) -> Result<(usize, f64)> {
    check_domain(batch, domain)?;
    let k = state.partner(state.position(domain)?, rng)?;
    let loss = encoder_grads(state, k, batch)?;
    let alpha = state.hp.alpha;
    sgd_step(state.agg.encoder_set_mut(), alpha)?;
    Ok((state.domains[k], loss))
}

/// `φ ← φ − α∇φ L_dec`, symmetric to [`episodic_encoder_step`].
pub fn episodic_decoder_step<M: Seq2Seq, R: Rng + ?Sized>(
    state: &mut EpisodicState<M>,
    domain: usize,
    batch: &[SentencePair],
    rng: &mut R,
) -> Result<(usize, f64)> {
    check_domain(batch, domain)?;
    let k = state.partner(state.position(domain)?, rng)?;
    let loss = decoder_grads(state, k, batch)?;
    let alpha = state.hp.alpha;
    sgd_step(state.agg.decoder_set_mut(), alpha)?;
    Ok((state.domains[k], loss))
}

/// One full episode.
///
/// Domains are visited round-robin. Every specialist takes one step on a
/// fresh batch of its own domain drawn from `source`, then the aggregation
/// model is updated once per half with the summed gradients of `L_agg` and
/// `L_enc` (encoder) or `L_agg` and `L_dec` (decoder), all computed on the
/// episode batch with one shared partner `k`.
pub fn epi_episode<M: Seq2Seq, R: Rng + ?Sized>(
    state: &mut EpisodicState<M>,
    source: &BatchSource,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    let n = state.domains.len();
    let pos = state.completed % n;
    let domain = state.domains[pos];
    let progress = if state.total == 0 {
        0.0
    } else {
        state.completed as f64 / state.total as f64
    };
    let bs = state.hp.batch_size;
    let (batch, stage) = source.draw(Some(domain), progress, bs, rng)?;
    let k = state.partner(pos, rng)?;

    let auditing = state.audit.is_some();
    let mut phases = Vec::new();
    let mut last = if auditing {
        state.fingerprints()
    } else {
        Vec::new()
    };
    let mut mark = |state: &EpisodicState<M>, phase: String| {
        if auditing {
            let now = state.fingerprints();
            let labels = state.part_labels();
            let changed = (0..now.len())
                .filter(|&p| now[p] != last[p])
                .map(|p| labels[p].clone())
                .collect();
            phases.push((phase, changed));
            last = now;
        }
    };

    let mut l_i = f64::NAN;
    for j in 0..n {
        let d = state.domains[j];
        let (own, _) = source.draw(Some(d), progress, bs, rng)?;
        let l = specialist_step(state, d, &own)?;
        if j == pos {
            l_i = l;
        }
        mark(state, format!("specialist{d}"));
    }
    let l_agg = agg_grads(state, &batch)?;
    mark(state, "agg".into());
    let l_enc = encoder_grads(state, k, &batch)?;
    mark(state, "enc".into());
    let l_dec = decoder_grads(state, k, &batch)?;
    mark(state, "dec".into());
    let alpha = state.hp.alpha;
    sgd_step(state.agg.encoder_set_mut(), alpha)?;
    sgd_step(state.agg.decoder_set_mut(), alpha)?;
    mark(state, "update".into());

    let record = EpisodeRecord {
        episode: state.completed,
        stage,
        domain_i: domain,
        partner_k: state.domains[k],
        l_agg,
        l_i,
        l_enc,
        l_dec,
    };
    if auditing {
        let audit = EpisodeAudit {
            episode: state.completed,
            parts: state.part_labels(),
            phases,
        };
        state.audit.get_or_insert_with(Vec::new).push(audit);
    }
    state.completed += 1;
    Ok(record)
}

/// Runs the remaining `state.total - state.completed` episodes.
pub fn epi_train<M: Seq2Seq, R: Rng + ?Sized>(
    state: &mut EpisodicState<M>,
    source: &BatchSource,
    rng: &mut R,
) -> Result<EpisodeLog> {
    let mut log = EpisodeLog::default();
    while state.completed < state.total {
        let r = epi_episode(state, source, rng)?;
        log::debug!(
            "episode {} domain {} partner {} L_agg {:.4} L_enc {:.4} L_dec {:.4}",
            r.episode,
            r.domain_i,
            r.partner_k,
            r.l_agg,
            r.l_enc,
            r.l_dec
        );
        log.records.push(r);
    }
    Ok(log)
}

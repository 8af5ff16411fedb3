//! BLEU, the fine-tuning protocol, and the robustness and curriculum
//! analyses.
//!
//! All experiments work on replicates: one master seed's dataset together
//! with the models trained from it. Per-seed cells are aggregated into mean
//! and sample standard deviation.

mod bleu;
mod report;

pub use bleu::{corpus_bleu, BleuScore, MAX_ORDER, SMOOTHING_EPS};
pub use report::{write_flat_csv, FlatRow, ReportHeader};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{MultiDomainDataset, SentencePair};
use crate::curriculum::bin_testset;
use crate::model::{compose, Composition, EncoderDecoderModel};
use crate::seed::{derive, stream};
use crate::trainers::{finetune, Hyperparams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    pub beam_width: usize,
    /// Generated-token cap; the model's `max_len - 1` also applies.
    pub max_steps: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_steps: 200,
        }
    }
}

pub fn translate(
    comp: Composition<'_>,
    pairs: &[SentencePair],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<usize>>> {
    pairs
        .iter()
        .map(|p| {
            let d = if opts.beam_width <= 1 {
                crate::model::greedy_decode(comp, &p.source, opts.max_steps)?
            } else {
                crate::model::beam_decode(comp, &p.source, opts.beam_width, opts.max_steps)?
            };
            Ok(d.tokens)
        })
        .collect()
}

/// Corpus BLEU of `comp` on `pairs`.
pub fn bleu_on(comp: Composition<'_>, pairs: &[SentencePair], opts: &DecodeOptions) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot score an empty test set".into()));
    }
    let hyps = translate(comp, pairs, opts)?;
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
    Ok(corpus_bleu(&hyps, &refs)?.score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// One master seed's dataset and the models trained from it.
#[derive(Debug, Clone)]
pub struct Replicate<'a> {
    pub seed: u64,
    pub dataset: &'a MultiDomainDataset,
    pub models: Vec<(String, &'a EncoderDecoderModel)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub bleu_before: f64,
    pub bleu_after: f64,
    pub delta_ft: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub method: String,
    pub domain: String,
    pub domain_id: usize,
    pub seen: bool,
    pub seeds: Vec<SeedResult>,
    pub bleu_before: Stat,
    pub bleu_after: Stat,
    pub delta_ft: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: ReportHeader,
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn cell(&self, method: &str, domain_id: usize) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.domain_id == domain_id)
    }

    /// Mean over seen (or unseen) domains of a per-cell statistic.
    pub fn domain_mean(&self, method: &str, seen: bool, metric: impl Fn(&EvalCell) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method && c.seen == seen)
            .map(metric)
            .collect();
        Stat::of(&vals).mean
    }

    pub fn flat_rows(&self) -> Vec<FlatRow> {
        let mut rows = Vec::new();
        for c in &self.cells {
            for s in &c.seeds {
                for (metric, value) in [
                    ("bleu_before", s.bleu_before),
                    ("bleu_after", s.bleu_after),
                    ("delta_ft", s.delta_ft),
                ] {
                    rows.push(FlatRow::new(
                        &c.method,
                        &c.domain,
                        Some(c.seen),
                        metric,
                        value,
                        s.seed,
                    ));
                }
            }
        }
        rows
    }
}

/// Before-FT / After-FT / ΔFT for every method and seen/unseen domain.
pub fn run_protocol(
    replicates: &[Replicate<'_>],
    hp: &Hyperparams,
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    let mut cells: BTreeMap<(usize, usize), EvalCell> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for rep in replicates {
        let ds = rep.dataset;
        for (name, model) in &rep.models {
            let m = match order.iter().position(|o| o == name) {
                Some(m) => m,
                None => {
                    order.push(name.clone());
                    order.len() - 1
                }
            };
            for d in ds.eval_domains() {
                let split = &ds.splits[d];
                let before = bleu_on(model.as_composition(), &split.testing, opts)
                    .map_err(|e| cell_error(name, ds.domain_name(d), rep.seed, e))?;
                let ft_hp = Hyperparams {
                    seed: rep.seed,
                    ..*hp
                };
                let adapted = finetune(*model, &split.finetune, &ft_hp, d as u64)
                    .map_err(|e| cell_error(name, ds.domain_name(d), rep.seed, e))?;
                let after = bleu_on(adapted.as_composition(), &split.testing, opts)?;
                let cell = cells.entry((m, d)).or_insert_with(|| EvalCell {
                    method: name.clone(),
                    domain: ds.domain_name(d).to_string(),
                    domain_id: d,
                    seen: ds.is_seen(d),
                    seeds: Vec::new(),
                    bleu_before: Stat::of(&[]),
                    bleu_after: Stat::of(&[]),
                    delta_ft: Stat::of(&[]),
                });
                cell.seeds.push(SeedResult {
                    seed: rep.seed,
                    bleu_before: before,
                    bleu_after: after,
                    delta_ft: after - before,
                });
                log::info!(
                    "{name} seed {} {}: before {before:.2} after {after:.2}",
                    rep.seed,
                    ds.domain_name(d)
                );
            }
        }
    }
    let mut cells: Vec<EvalCell> = cells.into_values().collect();
    for c in &mut cells {
        let get = |f: fn(&SeedResult) -> f64| c.seeds.iter().map(f).collect::<Vec<_>>();
        c.bleu_before = Stat::of(&get(|s| s.bleu_before));
        c.bleu_after = Stat::of(&get(|s| s.bleu_after));
        c.delta_ft = Stat::of(&get(|s| s.delta_ft));
    }
    Ok(EvalReport {
        header: ReportHeader::new(opts),
        cells,
    })
}

fn cell_error(method: &str, domain: &str, seed: u64, e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Contract(format!("{method}/{domain}/seed {seed}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapCell {
    pub domain: String,
    pub domain_id: usize,
    pub seen: bool,
    /// `(specialist domain, BLEU improvement)`.
    pub improvements: Vec<(usize, f64)>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub method: String,
    pub part: Part,
    pub seed: u64,
    pub cells: Vec<SwapCell>,
}

impl SwapReport {
    pub fn domain_mean(&self) -> f64 {
        Stat::of(&self.cells.iter().map(|c| c.mean).collect::<Vec<_>>()).mean
    }
}

/// Specialist-alone BLEU per `(specialist domain, target domain)`, shared
/// by every swap report of one replicate.
pub fn specialist_baselines(
    specialists: &[(usize, EncoderDecoderModel)],
    dataset: &MultiDomainDataset,
    opts: &DecodeOptions,
) -> Result<BTreeMap<(usize, usize), f64>> {
    let mut out = BTreeMap::new();
    for d in dataset.eval_domains() {
        for (s, spec) in specialists {
            if *s != d {
                out.insert(
                    (*s, d),
                    bleu_on(spec.as_composition(), &dataset.splits[d].testing, opts)?,
                );
            }
        }
    }
    Ok(out)
}

/// Improvement from giving each specialist the trained model's encoder (or
/// decoder), on every domain except the specialist's own.
#[allow(clippy::too_many_arguments)]
pub fn swap_experiment(
    method: &str,
    trained: &EncoderDecoderModel,
    specialists: &[(usize, EncoderDecoderModel)],
    baselines: &BTreeMap<(usize, usize), f64>,
    dataset: &MultiDomainDataset,
    part: Part,
    seed: u64,
    opts: &DecodeOptions,
) -> Result<SwapReport> {
    let mut cells = Vec::new();
    for d in dataset.eval_domains() {
        let test = &dataset.splits[d].testing;
        let mut improvements = Vec::new();
        for (s, spec) in specialists {
            if *s == d {
                continue;
            }
            let comp = match part {
                Part::Encoder => compose(&trained.encoder, &spec.decoder)?,
                Part::Decoder => compose(&spec.encoder, &trained.decoder)?,
            };
            let base = baselines.get(&(*s, d)).ok_or_else(|| {
                Error::Lookup(format!("no baseline for specialist {s} on domain {d}"))
            })?;
            improvements.push((*s, bleu_on(comp, test, opts)? - base));
        }
        let mean = Stat::of(&improvements.iter().map(|(_, v)| *v).collect::<Vec<_>>()).mean;
        cells.push(SwapCell {
            domain: dataset.domain_name(d).to_string(),
            domain_id: d,
            seen: dataset.is_seen(d),
            improvements,
            mean,
        });
    }
    Ok(SwapReport {
        method: method.to_string(),
        part,
        seed,
        cells,
    })
}

/// Copy of `model` with i.i.d. `N(0, sigma²)` noise on every parameter.
pub fn perturbed(
    model: &EncoderDecoderModel,
    sigma: f64,
    seed: u64,
) -> Result<EncoderDecoderModel> {
    let mut out = model.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for set in [out.encoder.params_mut(), out.decoder.params_mut()] {
        for (_, t) in set.iter_mut() {
            for v in t.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbCell {
    pub sigma: f64,
    pub method: String,
    pub domain: String,
    pub domain_id: usize,
    pub seed: u64,
    /// BLEU per noise seed.
    pub bleu: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub cells: Vec<PerturbCell>,
}

impl PerturbReport {
    /// Domain-mean BLEU at `sigma=0` minus at `sigma`, over all seeds.
    pub fn degradation(&self, method: &str, sigma: f64) -> f64 {
        let at = |s: f64| {
            let v: Vec<f64> = self
                .cells
                .iter()
                .filter(|c| c.method == method && c.sigma == s)
                .map(|c| c.mean)
                .collect();
            Stat::of(&v).mean
        };
        at(0.0) - at(sigma)
    }

    pub fn flat_rows(&self) -> Vec<FlatRow> {
        self.cells
            .iter()
            .map(|c| {
                FlatRow::new(
                    &c.method,
                    &c.domain,
                    None,
                    &format!("bleu_sigma_{}", c.sigma),
                    c.mean,
                    c.seed,
                )
            })
            .collect()
    }
}

/// BLEU of noisy copies at each `sigma` (0 is always included), averaged
/// over `noise_seeds` draws.
pub fn perturb_experiment(
    models: &[(String, &EncoderDecoderModel)],
    dataset: &MultiDomainDataset,
    sigmas: &[f64],
    noise_seeds: usize,
    seed: u64,
    opts: &DecodeOptions,
) -> Result<PerturbReport> {
    let mut all = vec![0.0];
    all.extend(sigmas.iter().copied().filter(|s| *s != 0.0));
    let mut cells = Vec::new();
    for (name, model) in models {
        for &sigma in &all {
            let draws = if sigma == 0.0 { 1 } else { noise_seeds.max(1) };
            let copies = (0..draws)
                .map(|r| perturbed(model, sigma, derive(seed, stream::PERTURB, r as u64)))
                .collect::<Result<Vec<_>>>()?;
            for d in dataset.eval_domains() {
                let test = &dataset.splits[d].testing;
                let bleu = copies
                    .iter()
                    .map(|m| bleu_on(m.as_composition(), test, opts))
                    .collect::<Result<Vec<_>>>()?;
                let mean = Stat::of(&bleu).mean;
                cells.push(PerturbCell {
                    sigma,
                    method: name.clone(),
                    domain: dataset.domain_name(d).to_string(),
                    domain_id: d,
                    seed,
                    bleu,
                    mean,
                });
            }
        }
    }
    Ok(PerturbReport { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCell {
    pub method: String,
    /// Divergence level, 1 (closest to generic) to 5.
    pub level: usize,
    pub size: usize,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub seed: u64,
    pub cells: Vec<BinCell>,
    /// Spearman correlation of level against BLEU over non-empty bins.
    pub spearman: BTreeMap<String, f64>,
}

impl BinReport {
    pub fn flat_rows(&self) -> Vec<FlatRow> {
        self.cells
            .iter()
            .map(|c| {
                FlatRow::new(
                    &c.method,
                    &format!("level{}", c.level),
                    Some(true),
                    "bleu",
                    c.bleu,
                    self.seed,
                )
            })
            .collect()
    }
}

/// Per-method BLEU on the seen-domain test set split into divergence
/// levels. `test` pairs must carry divergence scores.
pub fn bin_report(
    models: &[(String, &EncoderDecoderModel)],
    thresholds: &[f64],
    test: &[SentencePair],
    seed: u64,
    opts: &DecodeOptions,
) -> Result<BinReport> {
    let bins = bin_testset(test, thresholds)?;
    let mut cells = Vec::new();
    let mut spearman = BTreeMap::new();
    for (name, model) in models {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (b, pairs) in bins.iter().enumerate() {
            let bleu = if pairs.is_empty() {
                f64::NAN
            } else {
                bleu_on(model.as_composition(), pairs, opts)?
            };
            if !pairs.is_empty() {
                xs.push((b + 1) as f64);
                ys.push(bleu);
            }
            cells.push(BinCell {
                method: name.clone(),
                level: b + 1,
                size: pairs.len(),
                bleu,
            });
        }
        spearman.insert(name.clone(), spearman_rho(&xs, &ys));
    }
    Ok(BinReport {
        seed,
        cells,
        spearman,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman's rho with average ranks for ties; NaN when undefined.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return f64::NAN;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_known_values() {
        assert_eq!(
            spearman_rho(&[1., 2., 3., 4., 5.], &[5., 4., 3., 2., 1.]),
            -1.0
        );
        assert_eq!(spearman_rho(&[1., 2., 3.], &[10., 20., 30.]), 1.0);
        assert!(spearman_rho(&[1., 2.], &[3., 3.]).is_nan());
    }

    #[test]
    fn stat_sample_std() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
    }
}

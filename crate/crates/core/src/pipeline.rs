//! Command implementations behind the `epi` binary.
//!
//! Artifacts of master seed `s` live under
//! `<output_dir>/<config hash>/seed-<s>/`:
//!
//! ```text
//! data/      manifest.json, vocab.txt, dataset.json, <domain>.<split>.tsv
//! scores/    train_scored.tsv, test_seen_scored.tsv, plan.json, summary.json
//! models/    <method>.ckpt, <method>.json, <method>.loss.csv,
//!            <method>.spec<d>.ckpt (episodic methods), finetuned/
//! reports/   eval_<hash>_seed<s>.{json,csv}
//! ```
//!
//! Experiment bundles go to `<output_dir>/<config hash>/`. A command whose
//! inputs are missing fails with a dependency error unless `build_deps` is
//! set, in which case the missing inputs are produced first.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};
use crate::corpus::{load_scored_tsv, save_scored_tsv, save_tsv, MultiDomainDataset, SentencePair};
use crate::curriculum::{
    build_plan, denoise_score, divergence_score, filter_noise, CurriculumPlan, DenoiseScorer,
    DivergenceScorer, SchedulerPolicy,
};
use crate::eval::{
    bin_report, perturb_experiment, run_protocol, specialist_baselines, swap_experiment,
    write_flat_csv, BinReport, EvalReport, FlatRow, Part, PerturbReport, Replicate, SwapReport,
};
use crate::model::{EncoderDecoderModel, LanguageModel};
use crate::seed::{derive, stream};
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::trainers::{
    epi_train, finetune, maml_train, pretrain_vanilla, train_agg, train_agg_curriculum,
    BatchSource, EpisodicState, Hyperparams,
};
use crate::{Error, Result};

pub const REVISION: &str = concat!("epi-core ", env!("CARGO_PKG_VERSION"));

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, rows: &[FlatRow]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_flat_csv(rows, std::io::BufWriter::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub id: usize,
    pub name: String,
    pub role: String,
    pub train: usize,
    pub finetune: usize,
    pub test: usize,
    pub trusted: usize,
    pub train_tokens: usize,
    pub noise_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub dataset_seed: u64,
    pub vocab_size: usize,
    pub domains: Vec<DomainManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub denoise: bool,
    pub scored: usize,
    pub filtered_count: usize,
    pub noise_total: usize,
    pub noise_removed: usize,
    pub clean_total: usize,
    pub clean_removed: usize,
    pub shard_sizes: Vec<usize>,
    pub shard_thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanFile {
    /// Row indices into `train_scored.tsv`.
    shards: Vec<Vec<usize>>,
    shard_thresholds: Vec<f64>,
    policy: SchedulerPolicy,
    filtered_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub method: Method,
    pub config_hash: String,
    pub master_seed: u64,
    pub train_seed: u64,
    pub revision: String,
    pub checksum: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

/// A trained method: the model plus, for episodic methods, the specialists.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: EncoderDecoderModel,
    pub specialists: Vec<(usize, EncoderDecoderModel)>,
}

/// Scoring outputs in memory.
#[derive(Debug, Clone)]
pub struct Scored {
    pub plan: CurriculumPlan,
    pub test_seen: Vec<SentencePair>,
    pub summary: ScoreSummary,
}

/// All artifacts of one master seed.
pub struct Run<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    hash: String,
    dir: PathBuf,
    build_deps: bool,
    dataset: OnceCell<MultiDomainDataset>,
    scored: OnceCell<Scored>,
    trained: std::cell::RefCell<BTreeMap<Method, Trained>>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, seed: u64, build_deps: bool) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let dir = cfg.output_dir.join(&hash).join(format!("seed-{seed}"));
        Ok(Self {
            cfg,
            seed,
            hash,
            dir,
            build_deps,
            dataset: OnceCell::new(),
            scored: OnceCell::new(),
            trained: Default::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn sub(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn run_seed(&self, index: u64) -> u64 {
        derive(self.seed, stream::RUN, index)
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            seed: self.run_seed(2),
            ..self.cfg.training.hyperparams
        }
    }

    fn missing(&self, what: &str, cmd: &str) -> Error {
        Error::Dependency(format!(
            "{what} not found under {}; run `epi {cmd}` first or pass --build-deps",
            self.dir.display()
        ))
    }

    // ---- data ----

    /// Generates the dataset and writes every data artifact.
    pub fn gen_data(&self) -> Result<&MultiDomainDataset> {
        let mut dcfg = self.cfg.dataset.clone();
        dcfg.seed = self.run_seed(0);
        let ds = MultiDomainDataset::generate(&dcfg)?;
        let dir = self.sub("data");
        mkdir(&dir)?;
        ds.vocab.save(&dir.join("vocab.txt"))?;
        let mut domains = Vec::new();
        for spec in &ds.domains {
            let d = spec.domain_id;
            let s = &ds.splits[d];
            let role = if d == ds.generic {
                "generic"
            } else if ds.is_seen(d) {
                "seen"
            } else {
                "unseen"
            };
            let files: [(&str, &[SentencePair]); 4] = [
                ("train", &s.training),
                ("finetune", &s.finetune),
                ("test", &s.testing),
                ("trusted", &ds.trusted[d]),
            ];
            for (split, pairs) in files {
                save_tsv(
                    pairs,
                    &ds.vocab,
                    &dir.join(format!("{}.{split}.tsv", spec.name)),
                )?;
            }
            domains.push(DomainManifest {
                id: d,
                name: spec.name.clone(),
                role: role.into(),
                train: s.training.len(),
                finetune: s.finetune.len(),
                test: s.testing.len(),
                trusted: ds.trusted[d].len(),
                train_tokens: crate::corpus::source_tokens(&s.training),
                noise_count: ds.noise_counts[d],
            });
        }
        write_json(&dir.join("dataset.json"), &ds)?;
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                config_hash: self.hash.clone(),
                master_seed: self.seed,
                dataset_seed: dcfg.seed,
                vocab_size: ds.vocab.len(),
                domains,
            },
        )?;
        log::info!("wrote dataset to {}", dir.display());
        let _ = self.dataset.set(ds);
        Ok(self.dataset.get().expect("just set"))
    }

    pub fn dataset(&self) -> Result<&MultiDomainDataset> {
        if let Some(ds) = self.dataset.get() {
            return Ok(ds);
        }
        let path = self.sub("data").join("dataset.json");
        if path.exists() {
            let ds: MultiDomainDataset = read_json(&path)?;
            let _ = self.dataset.set(ds);
            return Ok(self.dataset.get().expect("just set"));
        }
        if !self.build_deps {
            return Err(self.missing("dataset", "gen-data"));
        }
        self.gen_data()
    }

    // ---- models ----

    fn model_path(&self, name: &str) -> PathBuf {
        self.sub("models").join(format!("{name}.ckpt"))
    }

    fn load_model(&self, path: &Path) -> Result<EncoderDecoderModel> {
        EncoderDecoderModel::from_parameter_set(&self.cfg.model, load_checkpoint(path)?)
    }

    fn load_trained(&self, method: Method) -> Result<Option<Trained>> {
        let path = self.model_path(method.name());
        if !path.exists() {
            return Ok(None);
        }
        let model = self.load_model(&path)?;
        let mut specialists = Vec::new();
        if method.is_episodic() {
            for &d in &self.dataset()?.seen {
                let p = self.model_path(&format!("{}.spec{d}", method.name()));
                if !p.exists() {
                    return Ok(None);
                }
                specialists.push((d, self.load_model(&p)?));
            }
        }
        Ok(Some(Trained { model, specialists }))
    }

    /// The trained model of `method`, loading, or training when allowed.
    pub fn trained(&self, method: Method) -> Result<Trained> {
        if let Some(t) = self.trained.borrow().get(&method) {
            return Ok(t.clone());
        }
        let t = match self.load_trained(method)? {
            Some(t) => t,
            None if self.build_deps => self.train(method)?,
            None => {
                return Err(self.missing(
                    &format!("{method} checkpoint"),
                    &format!("train --method {method}"),
                ))
            }
        };
        self.trained.borrow_mut().insert(method, t.clone());
        Ok(t)
    }

    /// Trains `method`, writing its checkpoint, loss log and record.
    pub fn train(&self, method: Method) -> Result<Trained> {
        let ds = self.dataset()?;
        let hp = self.hyperparams();
        let dir = self.sub("models");
        let (model, specialists, steps, final_loss) = match method {
            Method::Vanilla => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.run_seed(1));
                let init = EncoderDecoderModel::init(&self.cfg.model, &mut rng)?;
                let (m, curve) = pretrain_vanilla(init, ds.generic_training(), &hp)?;
                mkdir(&dir)?;
                write_curve(&dir.join("vanilla.loss.csv"), &curve)?;
                (m, Vec::new(), curve.len(), curve.last().copied())
            }
            _ => {
                let vanilla = self.trained(Method::Vanilla)?.model;
                let seen = ds.seen_training();
                let plan = || -> Result<CurriculumPlan> { Ok(self.scored()?.plan.clone()) };
                let (m, specs, log_rows) = match method {
                    Method::Agg => {
                        let (m, c) = train_agg(vanilla, &seen, &hp)?;
                        (m, Vec::new(), Curve::Steps(c))
                    }
                    Method::AggCurriculum => {
                        let (m, c) = train_agg_curriculum(vanilla, &plan()?, &hp)?;
                        (m, Vec::new(), Curve::Steps(c))
                    }
                    Method::MetaMt => {
                        let (m, c) = maml_train(vanilla, &BatchSource::uniform(seen), &hp)?;
                        (m, Vec::new(), Curve::Steps(c))
                    }
                    Method::EpiNmt | Method::EpiCurriculum => {
                        let source = if method == Method::EpiCurriculum {
                            BatchSource::Curriculum(plan()?)
                        } else {
                            BatchSource::uniform(seen)
                        };
                        let total = hp.epochs * hp.steps_per_epoch(source.len());
                        let mut state = EpisodicState::new(&vanilla, ds.seen.clone(), hp, total);
                        let mut rng = ChaCha8Rng::seed_from_u64(derive(hp.seed, stream::TRAIN, 4));
                        let log = epi_train(&mut state, &source, &mut rng)?;
                        let specs: Vec<(usize, EncoderDecoderModel)> = state
                            .domains
                            .iter()
                            .copied()
                            .zip(state.specialists)
                            .collect();
                        (state.agg, specs, Curve::Episodes(log))
                    }
                    Method::Vanilla => unreachable!(),
                };
                mkdir(&dir)?;
                let loss_path = dir.join(format!("{method}.loss.csv"));
                let (steps, last) = match &log_rows {
                    Curve::Steps(c) => {
                        write_curve(&loss_path, c)?;
                        (c.len(), c.last().copied())
                    }
                    Curve::Episodes(log) => {
                        log.save_csv(&loss_path)?;
                        (log.records.len(), log.records.last().map(|r| r.l_agg))
                    }
                };
                for (d, s) in &specs {
                    save_checkpoint(
                        &s.to_parameter_set(),
                        &self.model_path(&format!("{method}.spec{d}")),
                    )?;
                }
                (m, specs, steps, last)
            }
        };
        save_checkpoint(&model.to_parameter_set(), &self.model_path(method.name()))?;
        write_json(
            &dir.join(format!("{method}.json")),
            &TrainRecord {
                method,
                config_hash: self.hash.clone(),
                master_seed: self.seed,
                train_seed: hp.seed,
                revision: REVISION.into(),
                checksum: model.checksum(),
                steps,
                final_loss,
            },
        )?;
        log::info!(
            "trained {method}: {steps} steps, checksum {}",
            &model.checksum()[..12]
        );
        let t = Trained { model, specialists };
        self.trained.borrow_mut().insert(method, t.clone());
        Ok(t)
    }

    // ---- scoring ----

    /// Scores seen-domain data, filters, and writes the plan.
    pub fn score(&self) -> Result<&Scored> {
        let ds = self.dataset()?;
        let vanilla = self.trained(Method::Vanilla)?.model;
        let ccfg = &self.cfg.curriculum;
        let scorer_seed = self.run_seed(3);
        let mut seen = ds.seen_training();

        let mut filtered = 0;
        let mut kept_mask = vec![true; seen.len()];
        if ccfg.denoise {
            let trusted: BTreeMap<usize, Vec<SentencePair>> = ds
                .seen
                .iter()
                .map(|&d| (d, ds.trusted[d].clone()))
                .collect();
            let dn = DenoiseScorer::train(vanilla, &trusted, &ccfg.scorer, scorer_seed)?;
            for p in &mut seen {
                p.q_score = Some(denoise_score(p, &dn)?);
            }
            let (_, removed) = filter_noise(&seen)?;
            filtered = removed;
            for (k, p) in kept_mask.iter_mut().zip(&seen) {
                *k = p.q_score.is_some_and(|q| q >= 0.0);
            }
        }

        let mut lm_rng = ChaCha8Rng::seed_from_u64(self.run_seed(4));
        let lm = LanguageModel::init(&self.cfg.model, &mut lm_rng)?;
        let generic: Vec<Vec<usize>> = ds
            .generic_training()
            .iter()
            .map(|p| p.source.clone())
            .collect();
        let domain_sources: BTreeMap<usize, Vec<Vec<usize>>> = ds
            .seen
            .iter()
            .map(|&d| {
                (
                    d,
                    ds.splits[d]
                        .training
                        .iter()
                        .map(|p| p.source.clone())
                        .collect(),
                )
            })
            .collect();
        let dv = DivergenceScorer::train(lm, &generic, &domain_sources, &ccfg.scorer, scorer_seed)?;
        for p in &mut seen {
            p.d_score = Some(divergence_score(&p.source, &dv, p.domain)?);
        }
        let mut test_seen = Vec::new();
        for &d in &ds.seen {
            for p in &ds.splits[d].testing {
                let mut p = p.clone();
                p.d_score = Some(divergence_score(&p.source, &dv, d)?);
                test_seen.push(p);
            }
        }

        let kept: Vec<SentencePair> = seen
            .iter()
            .zip(&kept_mask)
            .filter(|(_, k)| **k)
            .map(|(p, _)| p.clone())
            .collect();
        let plan = build_plan(&kept, ccfg.policy.clone(), filtered)?;
        let noise_total = seen.iter().filter(|p| p.is_noise()).count();
        let noise_removed = seen
            .iter()
            .zip(&kept_mask)
            .filter(|(p, k)| p.is_noise() && !**k)
            .count();
        let summary = ScoreSummary {
            denoise: ccfg.denoise,
            scored: seen.len(),
            filtered_count: filtered,
            noise_total,
            noise_removed,
            clean_total: seen.len() - noise_total,
            clean_removed: filtered - noise_removed,
            shard_sizes: plan.shards.iter().map(Vec::len).collect(),
            shard_thresholds: plan.shard_thresholds.clone(),
        };

        let dir = self.sub("scores");
        mkdir(&dir)?;
        save_scored_tsv(&seen, &ds.vocab, &dir.join("train_scored.tsv"))?;
        save_scored_tsv(&test_seen, &ds.vocab, &dir.join("test_seen_scored.tsv"))?;
        let kept_rows: Vec<usize> = (0..seen.len()).filter(|&i| kept_mask[i]).collect();
        let shards = plan
            .shard_indices(&kept)
            .into_iter()
            .map(|s| s.into_iter().map(|i| kept_rows[i]).collect())
            .collect();
        write_json(
            &dir.join("plan.json"),
            &PlanFile {
                shards,
                shard_thresholds: plan.shard_thresholds.clone(),
                policy: plan.policy.clone(),
                filtered_count: filtered,
            },
        )?;
        write_json(&dir.join("summary.json"), &summary)?;
        log::info!(
            "scored {} pairs, filtered {filtered} ({noise_removed} of {noise_total} noise)",
            seen.len()
        );
        // Reload so fresh and resumed runs see identical data.
        let scored = self.load_scored()?.expect("just written");
        let _ = self.scored.set(scored);
        Ok(self.scored.get().expect("just set"))
    }

    fn load_scored(&self) -> Result<Option<Scored>> {
        let dir = self.sub("scores");
        let plan_path = dir.join("plan.json");
        if !plan_path.exists() {
            return Ok(None);
        }
        let ds = self.dataset()?;
        let rows = load_scored_tsv(&dir.join("train_scored.tsv"), &ds.vocab)?;
        let file: PlanFile = read_json(&plan_path)?;
        let mut shards = Vec::with_capacity(file.shards.len());
        for s in &file.shards {
            let mut shard = Vec::with_capacity(s.len());
            for &i in s {
                shard.push(rows.get(i).cloned().ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: "plan refers to a missing scored row".into(),
                })?);
            }
            shards.push(shard);
        }
        let plan = CurriculumPlan {
            shards,
            shard_thresholds: file.shard_thresholds,
            policy: file.policy,
            filtered_count: file.filtered_count,
        };
        let test_seen = load_scored_tsv(&dir.join("test_seen_scored.tsv"), &ds.vocab)?;
        let summary: ScoreSummary = read_json(&dir.join("summary.json"))?;
        Ok(Some(Scored {
            plan,
            test_seen,
            summary,
        }))
    }

    pub fn scored(&self) -> Result<&Scored> {
        if let Some(s) = self.scored.get() {
            return Ok(s);
        }
        if let Some(s) = self.load_scored()? {
            let _ = self.scored.set(s);
            return Ok(self.scored.get().expect("just set"));
        }
        if !self.build_deps {
            return Err(self.missing("curriculum plan", "score"));
        }
        self.score()
    }

    // ---- fine-tuning and evaluation ----

    /// Fine-tunes a copy of `method`'s model on every evaluation domain.
    pub fn finetune(&self, method: Method) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let model = self.trained(method)?.model;
        let hp = Hyperparams {
            seed: self.seed,
            ..self.cfg.training.hyperparams
        };
        let dir = self.sub("models").join("finetuned");
        mkdir(&dir)?;
        let mut out = Vec::new();
        for d in ds.eval_domains() {
            let adapted = finetune(&model, &ds.splits[d].finetune, &hp, d as u64)?;
            let path = dir.join(format!("{method}.{}.ckpt", ds.domain_name(d)));
            save_checkpoint(&adapted.to_parameter_set(), &path)?;
            out.push(path);
        }
        Ok(out)
    }

    /// Before/After-FT report for this seed only.
    pub fn eval(&self, methods: &[Method]) -> Result<EvalReport> {
        let ds = self.dataset()?;
        let trained = methods
            .iter()
            .map(|&m| Ok((m, self.trained(m)?)))
            .collect::<Result<Vec<_>>>()?;
        let rep = Replicate {
            seed: self.seed,
            dataset: ds,
            models: trained
                .iter()
                .map(|(m, t)| (m.name().to_string(), &t.model))
                .collect(),
        };
        let report = run_protocol(
            &[rep],
            &self.cfg.training.hyperparams,
            &self.cfg.eval.decode,
        )?;
        let dir = self.sub("reports");
        mkdir(&dir)?;
        let stem = format!("eval_{}_seed{}", self.hash, self.seed);
        write_json(&dir.join(format!("{stem}.json")), &report)?;
        write_csv(&dir.join(format!("{stem}.csv")), &report.flat_rows())?;
        Ok(report)
    }
}

enum Curve {
    Steps(Vec<f64>),
    Episodes(crate::trainers::EpisodeLog),
}

fn write_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut body = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        body.push_str(&format!("{i},{l:?}\n"));
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Everything `experiment` produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentBundle {
    pub config_hash: String,
    pub revision: String,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub eval: EvalReport,
    pub swap: Vec<SwapReport>,
    pub perturb: Vec<PerturbReport>,
    pub bins: Vec<BinReport>,
    pub denoise: Vec<ScoreSummary>,
}

impl ExperimentBundle {
    /// Domain- and seed-mean swap improvement of `method` for `part`.
    pub fn swap_mean(&self, method: &str, part: Part) -> f64 {
        let v: Vec<f64> = self
            .swap
            .iter()
            .filter(|s| s.method == method && s.part == part)
            .map(SwapReport::domain_mean)
            .collect();
        crate::eval::Stat::of(&v).mean
    }

    /// Seed-mean BLEU degradation at `sigma`.
    pub fn perturb_degradation(&self, method: &str, sigma: f64) -> f64 {
        let v: Vec<f64> = self
            .perturb
            .iter()
            .map(|p| p.degradation(method, sigma))
            .collect();
        crate::eval::Stat::of(&v).mean
    }

    /// Seed-mean Spearman correlation of divergence level against BLEU.
    pub fn spearman_mean(&self, method: &str) -> f64 {
        let v: Vec<f64> = self
            .bins
            .iter()
            .filter_map(|b| b.spearman.get(method).copied())
            .collect();
        crate::eval::Stat::of(&v).mean
    }
}

/// The full study over `cfg.eval.seeds` replicates, building every missing
/// artifact. Writes the bundle JSON and flat CSVs next to the seed
/// directories and returns the bundle.
pub fn experiment(cfg: &RunConfig) -> Result<ExperimentBundle> {
    let seeds = cfg.replicate_seeds();
    let methods = cfg.training.methods.clone();
    let runs = seeds
        .iter()
        .map(|&s| Run::new(cfg, s, true))
        .collect::<Result<Vec<_>>>()?;

    let mut trained: Vec<BTreeMap<Method, Trained>> = Vec::new();
    for run in &runs {
        run.dataset()?;
        let mut per = BTreeMap::new();
        for &m in &methods {
            per.insert(m, run.trained(m)?);
        }
        trained.push(per);
    }

    let replicates: Vec<Replicate<'_>> = runs
        .iter()
        .zip(&trained)
        .map(|(run, per)| {
            Ok(Replicate {
                seed: run.seed,
                dataset: run.dataset()?,
                models: per
                    .iter()
                    .map(|(m, t)| (m.name().to_string(), &t.model))
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    let opts = &cfg.eval.decode;
    let eval = run_protocol(&replicates, &cfg.training.hyperparams, opts)?;

    let select = |list: &Option<Vec<Method>>| -> Vec<Method> {
        match list {
            Some(l) => methods.iter().copied().filter(|m| l.contains(m)).collect(),
            None => methods.clone(),
        }
    };
    let swap_methods = select(&cfg.eval.swap_methods);
    let perturb_methods = select(&cfg.eval.perturb_methods);

    let mut swap = Vec::new();
    let mut perturb = Vec::new();
    let mut bins = Vec::new();
    let mut denoise = Vec::new();
    for ((run, per), rep) in runs.iter().zip(&trained).zip(&replicates) {
        let ds = rep.dataset;
        let specialists = [Method::EpiCurriculum, Method::EpiNmt]
            .iter()
            .find_map(|m| per.get(m))
            .map(|t| t.specialists.clone());
        match &specialists {
            Some(specs) if !swap_methods.is_empty() => {
                let baselines = specialist_baselines(specs, ds, opts)?;
                for m in &swap_methods {
                    for part in [Part::Encoder, Part::Decoder] {
                        swap.push(swap_experiment(
                            m.name(),
                            &per[m].model,
                            specs,
                            &baselines,
                            ds,
                            part,
                            run.seed,
                            opts,
                        )?);
                    }
                }
            }
            _ => log::warn!("no episodic method trained; skipping the swap study"),
        }
        let models: Vec<(String, &EncoderDecoderModel)> = perturb_methods
            .iter()
            .map(|m| (m.name().to_string(), &per[m].model))
            .collect();
        perturb.push(perturb_experiment(
            &models,
            ds,
            &cfg.eval.sigmas,
            cfg.eval.noise_seeds,
            run.seed,
            opts,
        )?);
        let scored = run.scored()?;
        let all: Vec<(String, &EncoderDecoderModel)> = per
            .iter()
            .map(|(m, t)| (m.name().to_string(), &t.model))
            .collect();
        bins.push(bin_report(
            &all,
            &scored.plan.shard_thresholds,
            &scored.test_seen,
            run.seed,
            opts,
        )?);
        denoise.push(scored.summary.clone());
    }

    let bundle = ExperimentBundle {
        config_hash: cfg.hash(),
        revision: REVISION.into(),
        seeds: seeds.clone(),
        methods,
        eval,
        swap,
        perturb,
        bins,
        denoise,
    };
    let dir = cfg.output_dir.join(cfg.hash());
    mkdir(&dir)?;
    let stem = format!(
        "experiment_{}_seeds{}-{}",
        bundle.config_hash,
        seeds[0],
        seeds[seeds.len() - 1]
    );
    write_json(&dir.join(format!("{stem}.json")), &bundle)?;
    write_csv(
        &dir.join(format!("{stem}.eval.csv")),
        &bundle.eval.flat_rows(),
    )?;
    let mut swap_rows = Vec::new();
    for s in &bundle.swap {
        for c in &s.cells {
            let metric = match s.part {
                Part::Encoder => "swap_encoder",
                Part::Decoder => "swap_decoder",
            };
            swap_rows.push(FlatRow::new(
                &s.method,
                &c.domain,
                Some(c.seen),
                metric,
                c.mean,
                s.seed,
            ));
        }
    }
    write_csv(&dir.join(format!("{stem}.swap.csv")), &swap_rows)?;
    let perturb_rows: Vec<FlatRow> = bundle.perturb.iter().flat_map(|p| p.flat_rows()).collect();
    write_csv(&dir.join(format!("{stem}.perturb.csv")), &perturb_rows)?;
    let bin_rows: Vec<FlatRow> = bundle.bins.iter().flat_map(|b| b.flat_rows()).collect();
    write_csv(&dir.join(format!("{stem}.bins.csv")), &bin_rows)?;
    Ok(bundle)
}

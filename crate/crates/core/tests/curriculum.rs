mod common;

use std::collections::BTreeMap;

use common::{rng, small_dataset, tiny_config, tiny_model};
use epi_core::corpus::{load_scored_tsv, save_scored_tsv, SentencePair};
use epi_core::curriculum::{
    bin_testset, build_plan, denoise_score, divergence_score, filter_noise, normalized_difference,
    stage_of, CurriculumPlan, DenoiseScorer, DivergenceScorer, SchedulerPolicy, ScorerConfig,
    Variant, NUM_SHARDS,
};
use epi_core::model::LanguageModel;
use epi_core::trainers::fit_steps;
use epi_core::Error;
use rand::Rng;

fn scored(d: f64) -> SentencePair {
    let mut p = SentencePair::new(vec![5, 6, 7, 8, 9], vec![9, 8, 7, 6, 5], 1);
    p.d_score = Some(d);
    p.q_score = Some(0.0);
    p
}

fn ds(shard: &[SentencePair]) -> Vec<f64> {
    shard.iter().map(|p| p.d_score.unwrap()).collect()
}

#[test]
fn score_arithmetic() {
    assert_eq!(normalized_difference(-2.0, -3.0, 4), 0.25);
    assert_eq!(normalized_difference(-5.0, -4.0, 2), -0.5);
}

#[test]
fn filter_removes_exactly_the_negative_scores() {
    let qs = [0.3, -0.1, 0.0];
    let pairs: Vec<SentencePair> = qs
        .iter()
        .map(|q| {
            let mut p = scored(0.0);
            p.q_score = Some(*q);
            p
        })
        .collect();
    let (kept, removed) = filter_noise(&pairs).unwrap();
    assert_eq!(kept, vec![pairs[0].clone(), pairs[2].clone()]);
    assert_eq!(removed, 1);

    let mut r = rng(1);
    let many: Vec<SentencePair> = (0..500)
        .map(|_| {
            let mut p = scored(0.0);
            p.q_score = Some(r.random_range(-1.0..1.0));
            p
        })
        .collect();
    let (kept, removed) = filter_noise(&many).unwrap();
    let negatives = many.iter().filter(|p| p.q_score.unwrap() < 0.0).count();
    assert_eq!(removed, negatives);
    assert!(kept.iter().all(|p| p.q_score.unwrap() >= 0.0));

    let nonneg: Vec<SentencePair> = kept.clone();
    assert_eq!(filter_noise(&nonneg).unwrap().0, nonneg);

    let mut unscored = scored(0.0);
    unscored.q_score = None;
    assert!(matches!(filter_noise(&[unscored]), Err(Error::Contract(_))));
}

#[test]
fn plan_shards_are_contiguous_and_balanced() {
    let ten: Vec<SentencePair> = (1..=10).rev().map(|d| scored(d as f64)).collect();
    let plan = build_plan(&ten, SchedulerPolicy::default(), 0).unwrap();
    let shards: Vec<Vec<f64>> = plan.shards.iter().map(|s| ds(s)).collect();
    assert_eq!(
        shards,
        vec![
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![7.0, 8.0],
            vec![9.0, 10.0]
        ]
    );
    assert_eq!(plan.shard_thresholds, vec![2.0, 4.0, 6.0, 8.0]);

    let eleven: Vec<SentencePair> = (0..11).map(|d| scored(d as f64)).collect();
    let sizes: Vec<usize> = build_plan(&eleven, SchedulerPolicy::default(), 0)
        .unwrap()
        .shards
        .iter()
        .map(Vec::len)
        .collect();
    assert_eq!(sizes, vec![3, 2, 2, 2, 2]);

    let four: Vec<SentencePair> = (0..4).map(|d| scored(d as f64)).collect();
    assert!(build_plan(&four, SchedulerPolicy::default(), 0).is_err());

    let mut r = rng(2);
    let random: Vec<SentencePair> = (0..503)
        .map(|_| scored(r.random_range(-3.0..3.0)))
        .collect();
    let plan = build_plan(&random, SchedulerPolicy::default(), 0).unwrap();
    let mut sorted = ds(&random);
    sorted.sort_by(f64::total_cmp);
    let flat: Vec<f64> = plan.shards.iter().flat_map(|s| ds(s)).collect();
    assert_eq!(flat, sorted);
    let means: Vec<f64> = plan
        .shards
        .iter()
        .map(|s| ds(s).iter().sum::<f64>() / s.len() as f64)
        .collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    let sizes: Vec<usize> = plan.shards.iter().map(Vec::len).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
}

#[test]
fn ties_keep_original_order() {
    let mut pairs: Vec<SentencePair> = (0..10).map(|_| scored(1.0)).collect();
    for (i, p) in pairs.iter_mut().enumerate() {
        p.source = vec![4 + i; 5];
    }
    let plan = build_plan(&pairs, SchedulerPolicy::default(), 0).unwrap();
    let flat: Vec<SentencePair> = plan.shards.concat();
    assert_eq!(flat, pairs);
}

#[test]
fn stages_are_half_open() {
    let p = SchedulerPolicy::default();
    assert_eq!(stage_of(0.0, &p), 1);
    assert_eq!(stage_of(1.0 / 3.0, &p), 2);
    assert_eq!(stage_of(0.5, &p), 2);
    assert_eq!(stage_of(2.0 / 3.0, &p), 3);
    assert_eq!(stage_of(1.0, &p), 3);
}

#[test]
fn policy_rows_are_probability_vectors() {
    for v in [Variant::Default, Variant::Advanced, Variant::Reversed] {
        let p = SchedulerPolicy::new(v);
        p.validate().unwrap();
        for row in &p.stage_matrix {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|x| *x >= 0.0));
        }
    }
    let d = SchedulerPolicy::new(Variant::Default);
    let r = SchedulerPolicy::new(Variant::Reversed);
    for s in 0..3 {
        let mut rev = d.stage_matrix[s];
        rev.reverse();
        assert_eq!(r.stage_matrix[s], rev);
    }
    let a = SchedulerPolicy::new(Variant::Advanced);
    assert_eq!(a.stage_matrix[0], a.stage_matrix[1]);
    assert!(a.stage_matrix[0].windows(2).all(|w| w[0] > w[1]));
    assert_eq!(a.stage_matrix[2], [0.2; NUM_SHARDS]);

    let mut bad = SchedulerPolicy::default();
    bad.stage_matrix[1][0] += 1e-9;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    assert!("uniform".parse::<Variant>().is_err());
}

fn indexed_plan(policy: SchedulerPolicy) -> CurriculumPlan {
    let pairs: Vec<SentencePair> = (0..50).map(|d| scored(d as f64)).collect();
    build_plan(&pairs, policy, 0).unwrap()
}

fn frequencies(plan: &CurriculumPlan, stage: usize, draws: usize, seed: u64) -> [f64; NUM_SHARDS] {
    let batch = plan.sample(stage, None, draws, &mut rng(seed)).unwrap();
    let mut f = [0.0; NUM_SHARDS];
    for p in &batch {
        f[p.d_score.unwrap() as usize / 10] += 1.0 / draws as f64;
    }
    f
}

#[test]
fn sampling_follows_the_stage_rows() {
    let plan = indexed_plan(SchedulerPolicy::default());
    for (stage, seed) in [(3, 1), (1, 2), (2, 3)] {
        let f = frequencies(&plan, stage, 100_000, seed);
        for (got, want) in f.iter().zip(plan.policy.row(stage)) {
            assert!((got - want).abs() < 0.01, "stage {stage}: {f:?}");
        }
    }
    let third = frequencies(&plan, 3, 100_000, 7);
    assert!(third.iter().all(|f| (f - 0.2).abs() < 0.01));

    let reversed = indexed_plan(SchedulerPolicy::new(Variant::Reversed));
    let f = frequencies(&reversed, 1, 100_000, 4);
    assert!(f.windows(2).all(|w| w[0] < w[1]), "{f:?}");
}

#[test]
fn empty_shards_are_renormalized_away() {
    let mut plan = indexed_plan(SchedulerPolicy::default());
    for s in 1..NUM_SHARDS {
        plan.shards[s].clear();
    }
    let batch = plan.sample(3, None, 1000, &mut rng(5)).unwrap();
    assert!(batch.iter().all(|p| p.d_score.unwrap() < 10.0));

    let mut dead = indexed_plan(SchedulerPolicy::default());
    dead.policy.stage_matrix[2] = [0.0, 0.0, 0.0, 0.0, 1.0];
    dead.shards[4].clear();
    assert!(dead.sample(3, None, 1, &mut rng(5)).is_err());
}

#[test]
fn domain_restricted_sampling_stays_in_domain() {
    let mut pairs: Vec<SentencePair> = (0..40).map(|d| scored(d as f64)).collect();
    for (i, p) in pairs.iter_mut().enumerate() {
        p.domain = 1 + i % 2;
    }
    let plan = build_plan(&pairs, SchedulerPolicy::default(), 0).unwrap();
    let batch = plan.sample(1, Some(2), 500, &mut rng(8)).unwrap();
    assert!(batch.iter().all(|p| p.domain == 2));
    assert_eq!(plan.domains(), vec![1, 2]);
}

#[test]
fn binning_partitions_with_lower_ties() {
    let test: Vec<SentencePair> = [-1.0, 2.0, 2.5, 4.0, 9.0, 100.0]
        .iter()
        .map(|d| scored(*d))
        .collect();
    let inf = [f64::INFINITY; 4];
    let bins = bin_testset(&test, &inf).unwrap();
    assert_eq!(bins[0].len(), test.len());

    let bins = bin_testset(&test, &[2.0, 4.0, 6.0, 8.0]).unwrap();
    let shape: Vec<Vec<f64>> = bins.iter().map(|b| ds(b)).collect();
    assert_eq!(
        shape,
        vec![
            vec![-1.0, 2.0],
            vec![2.5, 4.0],
            vec![],
            vec![],
            vec![9.0, 100.0]
        ]
    );
    assert_eq!(bins.iter().map(Vec::len).sum::<usize>(), test.len());
}

#[test]
fn scored_tsv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.tsv");
    let vocab = epi_core::model::Vocabulary::new((0..20).map(|i| format!("t{i}"))).unwrap();
    let mut r = rng(3);
    let pairs: Vec<SentencePair> = (0..50)
        .map(|i| {
            let mut p = scored(r.random_range(-2.0..2.0));
            p.q_score = Some(r.random_range(-2.0..2.0) / 3.0);
            p.domain = 1 + i % 3;
            p
        })
        .collect();
    save_scored_tsv(&pairs, &vocab, &path).unwrap();
    let back = load_scored_tsv(&path, &vocab).unwrap();
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!(
            (&a.source, &a.target, a.domain),
            (&b.source, &b.target, b.domain)
        );
        assert_eq!(a.q_score, b.q_score);
        assert_eq!(a.d_score, b.d_score);
    }
}

#[test]
fn identical_scorers_give_zero() {
    let data = small_dataset(2, 600);
    let base = tiny_model(data.vocab.len(), 1);
    let mut denoise = DenoiseScorer::new(base.clone());
    let provenance = epi_core::curriculum::Provenance {
        base_checksum: base.checksum(),
        steps: 0,
        lr: 0.0,
        pairs: 0,
        checksum: base.checksum(),
    };
    denoise.insert(1, base.clone(), provenance.clone()).unwrap();
    let lm = LanguageModel::init(&tiny_config(data.vocab.len()), &mut rng(2)).unwrap();
    let mut div = DivergenceScorer::new(lm.clone());
    div.insert(1, lm, provenance).unwrap();
    for p in &data.splits[1].training {
        assert_eq!(denoise_score(p, &denoise).unwrap(), 0.0);
        assert_eq!(divergence_score(&p.source, &div, 1).unwrap(), 0.0);
    }
    let stray = SentencePair::new(vec![5; 5], vec![5; 5], 3);
    assert!(matches!(
        denoise_score(&stray, &denoise),
        Err(Error::Lookup(_))
    ));
    assert!(matches!(
        divergence_score(&stray.source, &div, 3),
        Err(Error::Lookup(_))
    ));
}

#[test]
fn trained_scorers_separate_noise_and_rank_domains() {
    let data = small_dataset(4, 8500);
    let d = data.seen[0];
    let cfg = ScorerConfig::default();
    let mut base = tiny_model(data.vocab.len(), 3);
    fit_steps(
        &mut base,
        data.generic_training(),
        300,
        16,
        0.3,
        &mut rng(4),
    )
    .unwrap();
    let trusted = BTreeMap::from([(d, data.trusted[d].clone())]);
    let scorer =
        DenoiseScorer::train(base, &trusted, &ScorerConfig { steps: 300, ..cfg }, 5).unwrap();
    let train = &data.splits[d].training;
    let mean = |noise: bool| {
        let qs: Vec<f64> = train
            .iter()
            .filter(|p| p.is_noise() == noise)
            .map(|p| denoise_score(p, &scorer).unwrap())
            .collect();
        qs.iter().sum::<f64>() / qs.len() as f64
    };
    assert!(
        mean(true) < mean(false),
        "noise {} vs clean {}",
        mean(true),
        mean(false)
    );

    let lm = LanguageModel::init(&tiny_config(data.vocab.len()), &mut rng(6)).unwrap();
    let generic: Vec<Vec<usize>> = data
        .generic_training()
        .iter()
        .map(|p| p.source.clone())
        .collect();
    let domain_sources = BTreeMap::from([(d, train.iter().map(|p| p.source.clone()).collect())]);
    let lm_cfg = ScorerConfig {
        steps: 200,
        lm_epochs: 2,
        ..cfg
    };
    let div = DivergenceScorer::train(lm, &generic, &domain_sources, &lm_cfg, 7).unwrap();
    let score = |s: &[usize]| divergence_score(s, &div, d).unwrap();
    // Purity: the same sentence always scores the same.
    assert_eq!(score(&train[0].source), score(&train[0].source));
    let in_domain: f64 = train.iter().map(|p| score(&p.source)).sum::<f64>() / train.len() as f64;
    let generic_mean: f64 = generic.iter().take(200).map(|s| score(s)).sum::<f64>() / 200.0;
    assert!(in_domain > generic_mean, "{in_domain} vs {generic_mean}");
}

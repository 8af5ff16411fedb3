mod common;

use common::{bleu_oracle, rng, small_dataset, tiny_model};
use epi_core::corpus::SentencePair;
use epi_core::eval::{
    bin_report, bleu_on, corpus_bleu, perturb_experiment, perturbed, run_protocol, spearman_rho,
    specialist_baselines, swap_experiment, DecodeOptions, Part, Replicate,
};
use epi_core::trainers::Hyperparams;
use epi_core::Error;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn bleu_of_a_copy_is_100() {
    let s = vec![vec![4, 5, 6, 7, 8], vec![9, 10, 11, 12]];
    assert_eq!(corpus_bleu(&s, &s).unwrap().score, 100.0);
}

#[test]
fn bleu_short_hypothesis_pays_brevity_penalty() {
    let b = corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5]]).unwrap();
    assert!((b.score - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
    assert!((b.score - 77.88).abs() < 5e-3);
    assert_eq!(b.precisions, [1.0; 4]);
}

#[test]
fn bleu_matches_oracle_on_random_corpora() {
    let mut r = rng(11);
    for _ in 0..200 {
        let n = r.random_range(1..6);
        let sent = |r: &mut rand_chacha::ChaCha8Rng| {
            let len = r.random_range(0..9);
            (0..len)
                .map(|_| r.random_range(4..9))
                .collect::<Vec<usize>>()
        };
        let hyps: Vec<_> = (0..n).map(|_| sent(&mut r)).collect();
        let refs: Vec<_> = (0..n).map(|_| sent(&mut r)).collect();
        let got = corpus_bleu(&hyps, &refs).unwrap().score;
        let want = bleu_oracle(&hyps, &refs);
        assert!(
            (got - want).abs() < 1e-6,
            "{hyps:?} {refs:?}: {got} vs {want}"
        );
    }
}

#[test]
fn bleu_disjoint_is_near_zero_and_order_invariant() {
    // The floor alone gives about 10/len, so the sentence must be long.
    let b = corpus_bleu(&[(4..16).collect()], &[(20..32).collect()]).unwrap();
    assert!(b.score < 1.0, "{}", b.score);
    let short = corpus_bleu(&[vec![4, 5, 6, 7, 8]], &[vec![9, 10, 11, 12, 13]]).unwrap();
    assert!(
        (short.score - bleu_oracle(&[vec![4, 5, 6, 7, 8]], &[vec![9, 10, 11, 12, 13]])).abs()
            < 1e-9
    );

    let mut r = rng(12);
    let hyps: Vec<Vec<usize>> = (0..20)
        .map(|_| (0..7).map(|_| r.random_range(4..10)).collect())
        .collect();
    let refs: Vec<Vec<usize>> = (0..20)
        .map(|_| (0..7).map(|_| r.random_range(4..10)).collect())
        .collect();
    let base = corpus_bleu(&hyps, &refs).unwrap().score;
    let mut idx: Vec<usize> = (0..20).collect();
    idx.shuffle(&mut r);
    let h2: Vec<_> = idx.iter().map(|&i| hyps[i].clone()).collect();
    let r2: Vec<_> = idx.iter().map(|&i| refs[i].clone()).collect();
    assert!((corpus_bleu(&h2, &r2).unwrap().score - base).abs() < 1e-9);

    assert!(matches!(
        corpus_bleu(&hyps, &refs[..3]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn spearman_values() {
    assert!((spearman_rho(&[1., 2., 3., 4.], &[10., 20., 30., 40.]) - 1.0).abs() < 1e-12);
    assert!((spearman_rho(&[1., 2., 3., 4.], &[4., 3., 2., 1.]) + 1.0).abs() < 1e-12);
    // Ranks with ties: y = (1, 2.5, 2.5, 4) against x = (1, 2, 3, 4).
    let rho = spearman_rho(&[1., 2., 3., 4.], &[1., 5., 5., 9.]);
    assert!((rho - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12);
    assert!(spearman_rho(&[1., 2.], &[3., 3.]).is_nan());
    assert!(spearman_rho(&[1.], &[3.]).is_nan());
}

fn fast() -> DecodeOptions {
    DecodeOptions {
        beam_width: 2,
        max_steps: 16,
    }
}

#[test]
fn protocol_without_finetuning_has_zero_delta() {
    let data = small_dataset(3, 600);
    let v = data.vocab.len();
    let (a, b) = (tiny_model(v, 1), tiny_model(v, 2));
    let (ca, cb) = (a.checksum(), b.checksum());
    let rep = Replicate {
        seed: 3,
        dataset: &data,
        models: vec![("a".into(), &a), ("b".into(), &b)],
    };
    let hp = Hyperparams {
        finetune_epochs: 0,
        ..Hyperparams::default()
    };
    let report = run_protocol(&[rep], &hp, &fast()).unwrap();
    assert_eq!(report.cells.len(), 2 * data.eval_domains().len());
    for c in &report.cells {
        assert_eq!(c.seeds.len(), 1);
        assert_eq!(c.delta_ft.mean, 0.0);
        assert_eq!(c.seen, data.is_seen(c.domain_id));
    }
    assert_eq!((a.checksum(), b.checksum()), (ca, cb));
    assert_eq!(report.header.beam_width, 2);
}

#[test]
fn swapping_in_the_specialists_own_half_changes_nothing() {
    let data = small_dataset(4, 600);
    let m = tiny_model(data.vocab.len(), 5);
    let specialists: Vec<_> = data.seen.iter().map(|&d| (d, m.clone())).collect();
    let base = specialist_baselines(&specialists, &data, &fast()).unwrap();
    for part in [Part::Encoder, Part::Decoder] {
        let rep = swap_experiment("m", &m, &specialists, &base, &data, part, 4, &fast()).unwrap();
        assert_eq!(rep.cells.len(), data.eval_domains().len());
        for c in &rep.cells {
            let expected = if data.is_seen(c.domain_id) {
                specialists.len() - 1
            } else {
                specialists.len()
            };
            assert_eq!(c.improvements.len(), expected);
            assert!(c
                .improvements
                .iter()
                .all(|(s, v)| *s != c.domain_id && *v == 0.0));
        }
    }
    let empty = Default::default();
    assert!(matches!(
        swap_experiment(
            "m",
            &m,
            &specialists,
            &empty,
            &data,
            Part::Encoder,
            4,
            &fast()
        ),
        Err(Error::Lookup(_))
    ));
}

#[test]
fn zero_noise_perturbation_is_the_identity() {
    let data = small_dataset(5, 600);
    let m = tiny_model(data.vocab.len(), 6);
    assert_eq!(perturbed(&m, 0.0, 1).unwrap(), m);
    let noisy = perturbed(&m, 0.1, 1).unwrap();
    assert_eq!(noisy, perturbed(&m, 0.1, 1).unwrap());
    assert_ne!(noisy, m);

    let report = perturb_experiment(&[("m".into(), &m)], &data, &[0.05], 2, 5, &fast()).unwrap();
    for c in report.cells.iter().filter(|c| c.sigma == 0.0) {
        let direct = bleu_on(
            m.as_composition(),
            &data.splits[c.domain_id].testing,
            &fast(),
        )
        .unwrap();
        assert_eq!(c.bleu, vec![direct]);
    }
    assert_eq!(report.degradation("m", 0.0), 0.0);
    assert!(report
        .cells
        .iter()
        .filter(|c| c.sigma == 0.05)
        .all(|c| c.bleu.len() == 2));
}

#[test]
fn bin_report_shape() {
    let data = small_dataset(6, 600);
    let m = tiny_model(data.vocab.len(), 7);
    let test: Vec<SentencePair> = data.splits[data.seen[0]]
        .testing
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut p = p.clone();
            p.d_score = Some(i as f64);
            p
        })
        .collect();
    let n = test.len() as f64;
    let thresholds: Vec<f64> = (1..5).map(|k| (n * k as f64 / 5.0).floor()).collect();
    let rep = bin_report(&[("m".into(), &m)], &thresholds, &test, 6, &fast()).unwrap();
    assert_eq!(rep.cells.len(), 5);
    assert_eq!(rep.cells.iter().map(|c| c.size).sum::<usize>(), test.len());
    assert_eq!(
        rep.cells.iter().map(|c| c.level).collect::<Vec<_>>(),
        vec![1, 2, 3, 4, 5]
    );
    assert!(rep.spearman.contains_key("m"));

    let unscored = data.splits[data.seen[0]].testing.clone();
    assert!(bin_report(&[("m".into(), &m)], &thresholds, &unscored, 6, &fast()).is_err());
}

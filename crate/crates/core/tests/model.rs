mod common;

use common::{rng, sharp_model as sharp, tiny_config, tiny_model};
use epi_core::corpus::SentencePair;
use epi_core::model::{
    batch_loss, compose, greedy_decode, EncoderDecoderModel, LanguageModel, ModelConfig,
    Vocabulary, EOS, NUM_RESERVED,
};
use epi_core::tensor::{load_checkpoint, save_checkpoint, Graph};
use epi_core::trainers::train_step;
use epi_core::Error;
use rand::Rng;

const V: usize = 24;

fn sharp_model(seed: u64) -> EncoderDecoderModel {
    sharp(V, seed)
}

fn random_source<R: Rng>(r: &mut R) -> Vec<usize> {
    let n = r.random_range(5..10);
    (0..n).map(|_| r.random_range(NUM_RESERVED..V)).collect()
}

#[test]
fn nll_equals_stepwise_log_probs() {
    let mut r = rng(1);
    for seed in 0..5 {
        let m = sharp_model(seed);
        let source = random_source(&mut r);
        let target = random_source(&mut r);
        let pair = SentencePair::new(source.clone(), target.clone(), 1);
        let mut total = 0.0;
        for i in 0..=target.len() {
            let lp = m.decode_log_probs(&source, &target[..i]).unwrap();
            let next = if i < target.len() { target[i] } else { EOS };
            total += lp[next];
        }
        let nll = m.nll(&pair).unwrap();
        assert!((nll + total / (target.len() + 1) as f64).abs() < 1e-9);
        assert!((m.target_log_prob(&pair).unwrap() - total).abs() < 1e-9);
    }
}

#[test]
fn next_token_distributions_are_normalized() {
    let m = sharp_model(3);
    let lp = m.decode_log_probs(&[5, 6, 7, 8, 9], &[10, 11]).unwrap();
    assert_eq!(lp.len(), V);
    let total: f64 = lp.iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn greedy_takes_the_argmax_with_the_documented_tie_rule() {
    let mut r = rng(2);
    for seed in 0..10 {
        let m = sharp_model(seed);
        let source = random_source(&mut r);
        let out = m.greedy_decode(&source, 12).unwrap();
        let mut prefix = Vec::new();
        let mut log_prob = 0.0;
        loop {
            let lp = m.decode_log_probs(&source, &prefix).unwrap();
            // Content ids in order, EOS last; strict > keeps the first.
            let mut best = NUM_RESERVED;
            for t in (NUM_RESERVED..V).chain([EOS]) {
                if lp[t] > lp[best] {
                    best = t;
                }
            }
            log_prob += lp[best];
            if best == EOS {
                break;
            }
            prefix.push(best);
            if prefix.len() == 12 {
                break;
            }
        }
        assert_eq!(out.tokens, prefix);
        assert!((out.log_prob - log_prob).abs() < 1e-9);
    }
}

#[test]
fn beam_of_one_is_greedy() {
    let mut r = rng(7);
    for case in 0..100 {
        let m = sharp_model(case % 10);
        let source = random_source(&mut r);
        let g = m.greedy_decode(&source, 14).unwrap();
        let b = m.beam_decode(&source, 1, 14).unwrap();
        assert_eq!(g.tokens, b.tokens, "case {case}");
        assert_eq!(g.log_prob, b.log_prob, "case {case}");
    }
}

#[test]
fn beam_search_finds_at_least_the_greedy_score() {
    let mut r = rng(8);
    for case in 0..100 {
        let m = sharp_model(case);
        let source = random_source(&mut r);
        let g = m.greedy_decode(&source, 6).unwrap();
        let b = m.beam_decode(&source, 5, 6).unwrap();
        if !g.truncated && !b.truncated {
            assert!(
                b.score >= g.score - 1e-12,
                "case {case}: {} < {}",
                b.score,
                g.score
            );
        }
    }
    assert!(matches!(
        sharp_model(0).beam_decode(&[5; 5], 0, 5),
        Err(Error::Contract(_))
    ));
}

#[test]
fn zero_projection_repeats_the_lowest_content_token() {
    let mut m = tiny_model(V, 1);
    m.decoder.zero_output_projection();
    let out = m.greedy_decode(&[7, 8, 9, 10, 11], 6).unwrap();
    assert_eq!(out.tokens, vec![NUM_RESERVED; 6]);
    assert!(out.truncated);
    let beam = m.beam_decode(&[7, 8, 9, 10, 11], 3, 6).unwrap();
    assert_eq!(beam.tokens, vec![NUM_RESERVED; 6]);
}

#[test]
fn sgd_halves_the_loss_on_a_fixed_batch() {
    let mut m = tiny_model(V, 2);
    m.decoder.zero_output_projection();
    let mut r = rng(3);
    let batch: Vec<SentencePair> = (0..16)
        .map(|_| {
            let s = random_source(&mut r);
            SentencePair::new(s.clone(), s, 1)
        })
        .collect();
    let start = (V as f64).ln();
    let nll = |m: &EncoderDecoderModel| batch.iter().map(|p| m.nll(p).unwrap()).sum::<f64>() / 16.0;
    assert!((nll(&m) - start).abs() < 1e-9);
    for _ in 0..50 {
        train_step(&mut m, &batch, 0.5).unwrap();
    }
    assert!(nll(&m) <= 0.5 * start, "{} vs {start}", nll(&m));
}

#[test]
fn decoding_respects_max_len() {
    let m = sharp_model(4);
    let out = m.greedy_decode(&[5, 6, 7, 8, 9], 1000).unwrap();
    assert!(out.tokens.len() < m.config().max_len);
    let long = vec![5; m.config().max_len + 1];
    assert!(m.greedy_decode(&long, 5).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let m = sharp_model(5);
    let batch = vec![
        SentencePair::new(vec![5, 6, 7, 8, 9], vec![9, 8, 7, 6, 5], 1),
        SentencePair::new(vec![10, 11, 12, 13, 14, 15], vec![4, 4, 20, 21, 22], 1),
    ];
    let loss = |m: &EncoderDecoderModel| {
        let mut g = Graph::new();
        let l = batch_loss(&mut g, &m.encoder, false, &m.decoder, false, &batch).unwrap();
        g.value(l)[0]
    };
    let mut g = Graph::new();
    let l = batch_loss(&mut g, &m.encoder, true, &m.decoder, true, &batch).unwrap();
    let grads = g.backward(l).unwrap();
    let mut enc = m.encoder.params().clone();
    let mut dec = m.decoder.params().clone();
    grads.accumulate_into(&g, &mut enc).unwrap();
    grads.accumulate_into(&g, &mut dec).unwrap();

    let h = 1e-5;
    let mut r = rng(9);
    let mut checked = 0;
    for set in [&enc, &dec] {
        for (name, t) in set.iter() {
            let j = r.random_range(0..t.len());
            let analytic = t.grad().unwrap()[j];
            let bump = |delta: f64| {
                let mut c = m.clone();
                let target = if name.starts_with("encoder") {
                    c.encoder.params_mut()
                } else {
                    c.decoder.params_mut()
                };
                target.get_mut(name).unwrap().data_mut()[j] += delta;
                loss(&c)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "{name}[{j}]: {analytic} vs {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn halves_swap_between_compatible_models() {
    let a = sharp_model(1);
    let b = sharp_model(2);
    let pair = SentencePair::new(vec![5, 6, 7, 8, 9], vec![6, 7, 8, 9, 10], 1);
    let own = compose(&a.encoder, &a.decoder).unwrap();
    assert_eq!(own.nll(&pair).unwrap(), a.nll(&pair).unwrap());
    let mixed = compose(&a.encoder, &b.decoder).unwrap();
    let rebuilt = EncoderDecoderModel::from_parts(a.encoder.clone(), b.decoder.clone()).unwrap();
    assert_eq!(mixed.nll(&pair).unwrap(), rebuilt.nll(&pair).unwrap());
    assert_eq!(
        greedy_decode(mixed, &pair.source, 8).unwrap(),
        rebuilt.greedy_decode(&pair.source, 8).unwrap()
    );

    let other = EncoderDecoderModel::init(
        &ModelConfig {
            d_model: 8,
            ..tiny_config(V)
        },
        &mut rng(0),
    )
    .unwrap();
    assert!(matches!(
        compose(&a.encoder, &other.decoder),
        Err(Error::Compatibility(_))
    ));
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = sharp_model(6);
    save_checkpoint(&m.to_parameter_set(), &path).unwrap();
    let back = EncoderDecoderModel::from_parameter_set(m.config(), load_checkpoint(&path).unwrap())
        .unwrap();
    assert_eq!(back.checksum(), m.checksum());
    assert_eq!(back, m);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn config_validation() {
    assert!(tiny_config(V).validate().is_ok());
    for bad in [
        ModelConfig {
            n_heads: 3,
            ..tiny_config(V)
        },
        ModelConfig {
            vocab_size: 4,
            ..tiny_config(V)
        },
        ModelConfig {
            dropout_rate: 0.1,
            ..tiny_config(V)
        },
        ModelConfig {
            max_len: 2,
            ..tiny_config(V)
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn language_model_probabilities() {
    let lm = LanguageModel::init(&tiny_config(V), &mut rng(3)).unwrap();
    let s = [5, 9, 13, 17, 21];
    let dists = lm.distributions(&s).unwrap();
    assert_eq!(dists.len(), s.len() + 1);
    let mut lp = 0.0;
    for (i, d) in dists.iter().enumerate() {
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let next = if i < s.len() { s[i] } else { EOS };
        lp += d[next].ln();
    }
    assert!((lm.log_prob(&s).unwrap() - lp).abs() < 1e-9);
}

#[test]
fn vocabulary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = Vocabulary::new(["alpha", "beta", "gamma"]).unwrap();
    v.save(&path).unwrap();
    let back = Vocabulary::load(&path).unwrap();
    assert_eq!(back, v);
    let ids = v.tokenize("beta gamma zeta");
    assert_eq!(ids, vec![5, 6, epi_core::model::UNK]);
    assert_eq!(v.detokenize(&ids[..2]), "beta gamma");
    assert!(Vocabulary::new(["a", "a"]).is_err());
}

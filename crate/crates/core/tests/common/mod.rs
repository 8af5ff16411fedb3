#![allow(dead_code)]

pub mod ops;
pub mod toy;

use epi_core::corpus::{Budgets, DatasetConfig, MultiDomainDataset};
use epi_core::model::{EncoderDecoderModel, ModelConfig};
use epi_core::tensor::{Graph, Tensor, Var};
use epi_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite differences, step `h`, over every input value.
///
/// `f` builds a scalar from graph leaves created for `inputs`. Returns the
/// largest relative error between the reverse pass and the numeric estimate.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out)[0]
    };

    let mut g = Graph::new();
    let grad_inputs: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad(true)).collect();
    let vars: Vec<Var> = grad_inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars).expect("forward");
    let grads = g.backward(out).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for (j, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Weighted sum `sum(x * w)` so that gradients are not trivially constant.
pub fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let wv = g.leaf(w);
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}

/// A small benchmark: default topology, reduced budgets.
pub fn small_dataset(seed: u64, train_tokens: usize) -> MultiDomainDataset {
    let cfg = DatasetConfig {
        seed,
        seen_budgets: Budgets {
            train_tokens,
            finetune_tokens: 300,
            test_tokens: 300,
        },
        unseen_budgets: Budgets {
            train_tokens: 0,
            finetune_tokens: 300,
            test_tokens: 300,
        },
        generic_train_tokens: 3000,
        trusted_pairs: 40,
        ..DatasetConfig::default()
    };
    MultiDomainDataset::generate(&cfg).expect("dataset")
}

pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        dropout_rate: 0.0,
        vocab_size,
    }
}

pub fn tiny_model(vocab_size: usize, seed: u64) -> EncoderDecoderModel {
    EncoderDecoderModel::init(&tiny_config(vocab_size), &mut rng(seed)).expect("init")
}

pub fn mean_nll(model: &EncoderDecoderModel, pairs: &[epi_core::corpus::SentencePair]) -> f64 {
    pairs.iter().map(|p| model.nll(p).unwrap()).sum::<f64>() / pairs.len() as f64
}

/// Sharper than the default init so that decoding is not near-uniform.
pub fn sharp_model(vocab: usize, seed: u64) -> EncoderDecoderModel {
    let mut m = tiny_model(vocab, seed);
    let mut r = rng(seed + 1000);
    for (name, t) in m.decoder.params_mut().iter_mut() {
        if name.starts_with("decoder.out") {
            for v in t.data_mut() {
                *v = r.random_range(-2.0..2.0);
            }
        }
    }
    m
}

/// Straight from the definition: clipped counts per order, epsilon numerator
/// for an order with n-grams but no match, orders with no n-grams skipped.
pub fn bleu_oracle(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let (mut c, mut r) = (0usize, 0usize);
    let mut logs = Vec::new();
    for n in 1..=4 {
        let (mut m, mut t) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            if h.len() < n {
                continue;
            }
            let mut pool: Vec<&[usize]> = if rf.len() >= n {
                rf.windows(n).collect()
            } else {
                vec![]
            };
            for g in h.windows(n) {
                t += 1;
                if let Some(i) = pool.iter().position(|x| *x == g) {
                    pool.swap_remove(i);
                    m += 1;
                }
            }
        }
        if t > 0 {
            let num = if m == 0 { 0.1 } else { m as f64 };
            logs.push((num / t as f64).ln());
        }
    }
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
    }
    if c == 0 || logs.is_empty() {
        return 0.0;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

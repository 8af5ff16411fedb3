use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SentencePair;

/// Replaces the target of `round(fraction * n)` uniformly chosen pairs with
/// the original target of a uniformly chosen *other* pair and flags them as
/// noise. Corpora with fewer than two pairs are returned unchanged.
pub fn inject_noise(pairs: &[SentencePair], fraction: f64, seed: u64) -> Vec<SentencePair> {
    let n = pairs.len();
    let mut out = pairs.to_vec();
    let k = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    if k == 0 || n < 2 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        out[i].target = pairs[j].target.clone();
        out[i].is_noise = Some(true);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize) -> Vec<SentencePair> {
        (0..n)
            .map(|i| {
                let mut p = SentencePair::new(vec![4 + i % 7; 5], vec![4 + i % 11; 6], 0);
                p.is_noise = Some(false);
                p
            })
            .collect()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let c = corpus(50);
        assert_eq!(inject_noise(&c, 0.0, 1), c);
    }

    #[test]
    fn flags_exact_count() {
        let c = corpus(1000);
        let noisy = inject_noise(&c, 0.10, 4);
        assert_eq!(noisy.iter().filter(|p| p.is_noise()).count(), 100);
        // sources untouched
        assert!(noisy.iter().zip(&c).all(|(a, b)| a.source == b.source));
    }

    #[test]
    fn tiny_corpus_unchanged() {
        let c = corpus(1);
        assert_eq!(inject_noise(&c, 1.0, 0), c);
    }
}

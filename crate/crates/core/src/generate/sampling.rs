use rand::RngCore;

use super::GenerateError;
use crate::provider::TokenDistribution;
use crate::{Real, TokenId};

/// `p_i = exp(z_i/τ) / Σ_j exp(z_j/τ)`, evaluated after subtracting the
/// largest logit.
pub fn softmax_with_temperature<T: Real>(logits: &[T], temperature: T) -> Result<Vec<T>, GenerateError> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(GenerateError::Argument(format!("temperature must be positive and finite, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(GenerateError::Argument("softmax over an empty logit vector".into()));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(GenerateError::Argument(format!("non-finite logit {z}")));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &e| a + e);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Uniform draw in `[0, 1)` built from exactly one `u64`.
fn unit<T: Real, R: RngCore + ?Sized>(rng: &mut R) -> T {
    T::of((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
}

/// Inverse-CDF draw of an index from `probs`, consuming one `u64`.
pub fn sample_index<T: Real, R: RngCore + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: T = unit(rng);
    let total = probs.iter().fold(T::zero(), |a, &p| a + p);
    let target = u * total;
    let mut acc = T::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc = acc + p;
        if target < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > T::zero()).unwrap_or(0)
}

/// Samples from the renormalized `k` most probable tokens of `dist`.
pub fn top_k_sample<T: Real, R: RngCore + ?Sized>(dist: &TokenDistribution<T>, k: usize, rng: &mut R) -> TokenId {
    let k = k.max(1);
    let probs = &dist.probs()[..k.min(dist.len())];
    dist.token_ids()[sample_index(probs, rng)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert!(close(&softmax_with_temperature(&[0.0, 0.0], 1.0).unwrap(), &[0.5, 0.5], 1e-15));
        assert!(close(&softmax_with_temperature(&[2f64.ln(), 0.0], 1.0).unwrap(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        assert!(close(&softmax_with_temperature(&[5.0, 0.0], 1e6).unwrap(), &[0.5, 0.5], 1e-5));
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        for t in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(softmax_with_temperature(&[1.0, 2.0], t).is_err());
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_with_temperature(&[1e308, 1e308 - 1e292], 1.0).unwrap();
        assert!(p.iter().all(|x: &f64| x.is_finite()));
        let p32 = softmax_with_temperature(&[100.0f32, 0.0], 1.0).unwrap();
        assert!((p32[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_one_is_argmax() {
        let d = TokenDistribution::from_probs(vec![(4, 0.2), (9, 0.5), (1, 0.3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..50).all(|_| top_k_sample(&d, 1, &mut rng) == 9));
    }

    #[test]
    fn k_one_tie_takes_lowest_id() {
        let d = TokenDistribution::from_probs(vec![(8, 0.4), (3, 0.4), (1, 0.2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(top_k_sample(&d, 1, &mut rng), 3);
    }

    #[test]
    fn dominant_token_wins_most_draws() {
        let d = TokenDistribution::from_probs(vec![(0, 0.999_999), (1, 1e-6)]);
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let hits = (0..1000).filter(|_| top_k_sample(&d, 2, &mut rng) == 0).count();
        assert!(hits >= 990, "{hits}");
    }

    #[test]
    fn sampling_follows_probabilities() {
        let d = TokenDistribution::from_probs(vec![(0, 0.5), (1, 0.3), (2, 0.2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 3];
        let n = 200_000;
        for _ in 0..n {
            counts[top_k_sample(&d, 3, &mut rng) as usize] += 1;
        }
        for (c, p) in counts.iter().zip([0.5, 0.3, 0.2]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.005);
        }
    }

    proptest! {
        #[test]
        fn softmax_normalizes_and_keeps_argmax(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..40),
            tau in 1e-3f64..1e3,
        ) {
            let p = softmax_with_temperature(&logits, tau).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&logits));
        }

        #[test]
        fn lower_temperature_is_sharper(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..20),
            t1 in 0.05f64..5.0,
            dt in 0.01f64..5.0,
        ) {
            let hi = |t| softmax_with_temperature(&logits, t).unwrap().into_iter().fold(0.0, f64::max);
            let (m1, m2) = (hi(t1), hi(t1 + dt));
            prop_assert!(m1 >= m2 - 1e-12);
            let constant = logits.iter().all(|&z| z == logits[0]);
            if !constant && m1 < 1.0 - 1e-12 {
                prop_assert!(m1 > m2);
            }
        }
    }
}

//! Pure vector functions shared by the forward passes, the losses and the
//! evaluation code.

use super::kernels::dot;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Log-softmax of `logits / temperature` written into `out`.
pub fn log_softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let inv = 1.0 / temperature;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max) * inv;
        sum += o.exp();
    }
    let lse = sum.ln();
    out.iter_mut().for_each(|o| *o -= lse);
}

pub fn softmax_slice(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits, temperature, &mut out);
    out.iter_mut().for_each(|o| *o = o.exp());
    out
}

/// Temperature softmax of a 1-D tensor.
pub fn softmax_temp(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(Tensor::vector(softmax_slice(logits.values(), temperature)))
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize_slice(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    Ok(Tensor::vector(l2_normalize_slice(v.values())?))
}

pub fn cosine_slice(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: vec![a.len()], got: vec![b.len()] });
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    cosine_slice(a.values(), b.values())
}

/// Checks that `p` sums to one within `tol` with non-negative entries.
pub fn check_distribution(p: &[f64], tol: f64) -> Result<()> {
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::NonDistribution);
    }
    if (p.iter().sum::<f64>() - 1.0).abs() > tol {
        return Err(Error::NonDistribution);
    }
    Ok(())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `−Σ p log q`, with `0·log 0 = 0`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| -pi * qi.ln())
        .sum()
}

/// Linear-interpolated empirical quantile of unsorted data, `q` in `[0,1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let p = softmax_temp(&Tensor::vector(vec![0.0; 4]), 1.0).unwrap();
        for &x in p.values() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn low_temperature_sharpens() {
        let p = softmax_temp(&Tensor::vector(vec![1.0, 0.0]), 0.01).unwrap();
        assert!((p.values()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let l = [2.0, 1.0, 0.5];
        let t = 0.1;
        let z: f64 = l.iter().map(|x: &f64| (x / t).exp()).sum();
        let p = softmax_temp(&Tensor::vector(l.to_vec()), t).unwrap();
        for (pi, li) in p.values().iter().zip(l) {
            assert!((pi - (li / t).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(
            softmax_temp(&Tensor::vector(vec![1.0]), 0.0),
            Err(Error::NonPositiveTemperature(0.0))
        );
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert!((v.values()[0] - 0.6).abs() < 1e-15 && (v.values()[1] - 0.8).abs() < 1e-15);
        let again = l2_normalize(&v).unwrap();
        for (a, b) in again.values().iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(l2_normalize(&Tensor::vector(vec![0.0, 0.0])), Err(Error::ZeroVector));
    }

    #[test]
    fn cosine_examples() {
        let a = Tensor::vector(vec![1.0, 2.0, -0.5]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let e1 = Tensor::vector(vec![1.0, 0.0]);
        let e2 = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let b = Tensor::vector(vec![0.3, -1.2, 2.2]);
        let direct = (1.0 * 0.3 + 2.0 * -1.2 + -0.5 * 2.2)
            / ((1.0f64 + 4.0 + 0.25).sqrt() * (0.09f64 + 1.44 + 4.84).sqrt());
        assert!((cosine_similarity(&a, &b).unwrap() - direct).abs() < 1e-14);
        assert!(matches!(
            cosine_similarity(&e1, &Tensor::vector(vec![1.0, 2.0, 3.0])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(l in prop::collection::vec(-5.0f64..5.0, 1..12), c in -50.0f64..50.0, t in 0.05f64..3.0) {
            let p = softmax_slice(&l, t);
            let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
            let q = softmax_slice(&shifted, t);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            b in prop::collection::vec(-3.0f64..3.0, 4),
            s in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = cosine_slice(&a, &b).unwrap();
            prop_assert!((ab - cosine_slice(&b, &a).unwrap()).abs() < 1e-15);
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            prop_assert!((ab - cosine_slice(&sa, &b).unwrap()).abs() < 1e-12);
        }
    }
}

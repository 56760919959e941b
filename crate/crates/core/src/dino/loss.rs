//! DINO objective pieces: repeat-speaker probability, teacher centering and
//! sharpening, short-to-long cross-entropy, cosine consistency, EMA.

use serde::{Deserialize, Serialize};

use super::model::DinoNet;
use crate::error::{Error, Result};
use crate::numkit::ops::{check_distribution, cosine_slice, log_softmax_into, softmax_slice};
use crate::synthworld::{NUM_LONG, NUM_VIEWS};

/// Probability that a batch of `batch_size` draws (with replacement) from
/// `num_speakers` equally likely speakers contains a repeat.
pub fn repeat_probability(num_speakers: usize, batch_size: usize) -> Result<f64> {
    if batch_size == 0 || batch_size > num_speakers {
        return Err(Error::BatchLargerThanPopulation { batch: batch_size, population: num_speakers });
    }
    let s = num_speakers as f64;
    let log_distinct: f64 = (0..batch_size).map(|i| (-(i as f64) / s).ln_1p()).sum();
    Ok(-log_distinct.exp_m1())
}

/// `softmax((logits − center) / ε_t)`.
pub fn teacher_probs(head_logits: &[f64], center: &[f64], teacher_temp: f64) -> Result<Vec<f64>> {
    if head_logits.len() != center.len() {
        return Err(Error::ShapeMismatch { expected: vec![center.len()], got: vec![head_logits.len()] });
    }
    if !(teacher_temp > 0.0) {
        return Err(Error::NonPositiveTemperature(teacher_temp));
    }
    let shifted: Vec<f64> = head_logits.iter().zip(center).map(|(l, c)| l - c).collect();
    Ok(softmax_slice(&shifted, teacher_temp))
}

/// `center ← m·center + (1−m)·mean(batch)`.
pub fn update_center(center: &[f64], batch_teacher_logits: &[&[f64]], momentum: f64) -> Result<Vec<f64>> {
    if batch_teacher_logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = center.len();
    let mut mean = vec![0.0; k];
    for row in batch_teacher_logits {
        if row.len() != k {
            return Err(Error::ShapeMismatch { expected: vec![k], got: vec![row.len()] });
        }
        mean.iter_mut().zip(row.iter()).for_each(|(m, v)| *m += v);
    }
    let n = batch_teacher_logits.len() as f64;
    Ok(center.iter().zip(&mean).map(|(c, m)| momentum * c + (1.0 - momentum) * m / n).collect())
}

/// Which student views each teacher view is compared against.
pub fn ce_pairs(include_self_pairs: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in 0..NUM_LONG {
        for s in 0..NUM_VIEWS {
            if include_self_pairs || s != t {
                out.push((t, s));
            }
        }
    }
    out
}

/// `Σ_t Σ_s H(P_t | P_s)` for one crop set: two teacher distributions over the
/// long views, six student logit vectors (long first).
pub fn dino_ce_loss(teacher: &[Vec<f64>], student_logits: &[Vec<f64>], student_temp: f64, include_self_pairs: bool) -> Result<f64> {
    if teacher.len() != NUM_LONG || student_logits.len() != NUM_VIEWS {
        return Err(Error::ShapeMismatch { expected: vec![NUM_LONG, NUM_VIEWS], got: vec![teacher.len(), student_logits.len()] });
    }
    let k = teacher[0].len();
    for t in teacher {
        check_distribution(t, 1e-9)?;
    }
    if student_logits.iter().chain(teacher.iter()).any(|v| v.len() != k) {
        return Err(Error::ShapeMismatch { expected: vec![k], got: vec![] });
    }
    let logp: Vec<Vec<f64>> = student_logits
        .iter()
        .map(|l| {
            let mut o = vec![0.0; k];
            log_softmax_into(l, student_temp, &mut o);
            o
        })
        .collect();
    Ok(ce_pairs(include_self_pairs)
        .iter()
        .map(|&(t, s)| -teacher[t].iter().zip(&logp[s]).map(|(p, lq)| p * lq).sum::<f64>())
        .sum())
}

/// Cosine pairs for the consistency term: each long view against every other view.
pub fn consistency_pairs() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for e in 0..NUM_LONG {
        for f in 0..NUM_VIEWS {
            if f != e {
                out.push((e, f));
            }
        }
    }
    out
}

/// `Σ_{e ∈ long} Σ_{e' ≠ e} (1 − cos(e, e'))` over six embeddings.
pub fn consistency_loss(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() != NUM_VIEWS {
        return Err(Error::ShapeMismatch { expected: vec![NUM_VIEWS], got: vec![embeddings.len()] });
    }
    consistency_pairs()
        .iter()
        .map(|&(e, f)| cosine_slice(&embeddings[e], &embeddings[f]).map(|c| 1.0 - c))
        .sum()
}

pub fn total_dino_loss(ce: f64, consistency: f64, alpha: f64) -> Result<f64> {
    let t = ce + alpha * consistency;
    if !t.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(t)
}

/// Student/teacher pair with the teacher's centering vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub student: DinoNet,
    pub teacher: DinoNet,
    pub center: Vec<f64>,
    pub step: usize,
}

impl ModelState {
    pub fn new(student: DinoNet) -> Self {
        let k = student.head.proto_gain.value.len();
        Self { teacher: student.clone(), student, center: vec![0.0; k], step: 0 }
    }
}

/// `θ_t ← λθ_t + (1−λ)θ_s` on every teacher parameter.
pub fn ema_update(state: &mut ModelState, lambda: f64) {
    let src: Vec<Vec<f64>> = state.student.params().iter().map(|p| p.value.values().to_vec()).collect();
    for (t, s) in state.teacher.params_mut().into_iter().zip(&src) {
        for (tv, sv) in t.value.values_mut().iter_mut().zip(s) {
            *tv = lambda * *tv + (1.0 - lambda) * sv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dino::model::EncoderConfig;
    use crate::numkit::{Rng, Tensor};

    #[test]
    fn repeat_probability_table() {
        for (n, want) in [(16, 0.020), (32, 0.080), (64, 0.286), (128, 0.745), (256, 0.996)] {
            let p = repeat_probability(5994, n).unwrap();
            assert!((p - want).abs() <= 0.0005, "N={n}: {p}");
        }
        assert_eq!(repeat_probability(77, 1).unwrap(), 0.0);
        assert!(repeat_probability(10, 11).is_err());
    }

    #[test]
    fn repeat_probability_matches_direct_product() {
        let (s, n) = (50usize, 12usize);
        let prod: f64 = (0..n).map(|i| (s - i) as f64 / s as f64).product();
        assert!((repeat_probability(s, n).unwrap() - (1.0 - prod)).abs() < 1e-14);
    }

    #[test]
    fn teacher_probs_examples() {
        let l = [0.4, -1.0, 2.5];
        let u = teacher_probs(&l, &l, 0.04).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let plain = softmax_slice(&l, 0.04);
        assert_eq!(teacher_probs(&l, &[0.0; 3], 0.04).unwrap(), plain);
        let c = [0.1, 0.2, -0.3];
        let z: f64 = l.iter().zip(&c).map(|(a, b)| ((a - b) / 0.5f64).exp()).sum();
        let got = teacher_probs(&l, &c, 0.5).unwrap();
        for i in 0..3 {
            assert!((got[i] - ((l[i] - c[i]) / 0.5f64).exp() / z).abs() < 1e-14);
        }
        assert!(teacher_probs(&l, &c[..2], 0.5).is_err());
    }

    #[test]
    fn center_update_rules() {
        let c = [1.0, -1.0];
        let b1 = [3.0, 1.0];
        let b2 = [1.0, 1.0];
        let batch: Vec<&[f64]> = vec![&b1, &b2];
        assert_eq!(update_center(&c, &batch, 0.0).unwrap(), vec![2.0, 1.0]);
        assert_eq!(update_center(&c, &batch, 1.0).unwrap(), c.to_vec());
        assert_eq!(update_center(&c, &[], 0.5), Err(Error::EmptyBatch));
        // geometric convergence: c_n − mean = m^n (c_0 − mean)
        let m: f64 = 0.9;
        let mut cur = c.to_vec();
        for _ in 0..25 {
            cur = update_center(&cur, &batch, m).unwrap();
        }
        let f = m.powi(25);
        assert!((cur[0] - (2.0 + f * (1.0 - 2.0))).abs() < 1e-12);
        assert!((cur[1] - (1.0 + f * (-1.0 - 1.0))).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_and_matched() {
        let k = 8;
        let t = vec![vec![1.0 / k as f64; k]; 2];
        let s = vec![vec![0.0; k]; 6];
        let got = dino_ce_loss(&t, &s, 0.1, false).unwrap();
        assert!((got - 10.0 * (k as f64).ln()).abs() < 1e-12);
        let with_self = dino_ce_loss(&t, &s, 0.1, true).unwrap();
        assert!((with_self - 12.0 * (k as f64).ln()).abs() < 1e-12);

        let mut onehot = vec![0.0; k];
        onehot[3] = 1.0;
        let mut logits = vec![0.0; k];
        logits[3] = 5.0;
        let got = dino_ce_loss(&[onehot.clone(), onehot], &vec![logits; 6], 0.1, false).unwrap();
        assert!(got / 10.0 < 0.01);
    }

    #[test]
    fn ce_matches_double_loop() {
        let mut rng = Rng::new(4);
        let t: Vec<Vec<f64>> = (0..2).map(|_| softmax_slice(&rng.normal_vec(3, 1.0), 0.04)).collect();
        let s: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(3, 1.0)).collect();
        let mut want = 0.0;
        for ti in 0..2 {
            for si in 0..6 {
                if si == ti {
                    continue;
                }
                let z: f64 = s[si].iter().map(|v| (v / 0.1).exp()).sum();
                for k in 0..3 {
                    want -= t[ti][k] * ((s[si][k] / 0.1).exp() / z).ln();
                }
            }
        }
        assert!((dino_ce_loss(&t, &s, 0.1, false).unwrap() - want).abs() < 1e-10);
        let bad = vec![vec![0.5, 0.6, 0.0], t[1].clone()];
        assert_eq!(dino_ce_loss(&bad, &s, 0.1, false), Err(Error::NonDistribution));
    }

    #[test]
    fn consistency_examples() {
        let e = vec![vec![1.0, 2.0, 3.0]; 6];
        assert!(consistency_loss(&e).unwrap().abs() < 1e-12);
        let mut o = vec![vec![0.0, 0.0, 1.0]; 6];
        o[0] = vec![1.0, 0.0, 0.0];
        o[1] = vec![0.0, 1.0, 0.0];
        assert!((consistency_loss(&o).unwrap() - 10.0).abs() < 1e-12);
        let mut rng = Rng::new(8);
        let r: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(4, 1.0)).collect();
        let mut want = 0.0;
        for a in 0..2 {
            for b in 0..6 {
                if a != b {
                    let d: f64 = r[a].iter().zip(&r[b]).map(|(x, y)| x * y).sum();
                    let na: f64 = r[a].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = r[b].iter().map(|x| x * x).sum::<f64>().sqrt();
                    want += 1.0 - d / (na * nb);
                }
            }
        }
        let got = consistency_loss(&r).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((0.0..=20.0).contains(&got));
    }

    #[test]
    fn total_loss() {
        assert_eq!(total_dino_loss(1.5, 3.0, 0.0).unwrap(), 1.5);
        assert_eq!(total_dino_loss(0.0, 2.5, 1.0).unwrap(), 2.5);
        assert_eq!(total_dino_loss(f64::NAN, 1.0, 1.0), Err(Error::NonFiniteLoss));
    }

    #[test]
    fn ema_rules() {
        let cfg = EncoderConfig { input_dim: 2, hidden_dims: vec![2], embed_dim: 2, head_hidden_dim: 2, head_bottleneck_dim: 2, head_output_dim: 3 };
        let mut st = ModelState::new(DinoNet::init(&cfg, &mut Rng::new(1)));
        st.student = DinoNet::init(&cfg, &mut Rng::new(2));
        let before = st.clone();
        ema_update(&mut st, 1.0);
        assert_eq!(st, before);
        ema_update(&mut st, 0.0);
        assert_eq!(st.teacher, st.student);
        let mut st = before.clone();
        st.teacher.encoder.mlp.layers[0].bias.value = Tensor::vector(vec![2.0, 2.0]);
        st.student.encoder.mlp.layers[0].bias.value = Tensor::vector(vec![4.0, 4.0]);
        ema_update(&mut st, 0.5);
        assert_eq!(st.teacher.encoder.mlp.layers[0].bias.value.values(), &[3.0, 3.0]);
        assert_eq!(st.student.encoder.mlp.layers[0].bias.value.values(), &[4.0, 4.0]);
    }
}

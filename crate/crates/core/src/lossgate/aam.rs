//! Additive angular margin softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::ops::{cosine_slice, log_softmax_into, norm};
use crate::numkit::{Param, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AamConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self { scale: 30.0, margin: 0.2 }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidConfig("aam scale must be > 0".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidConfig("aam margin must lie in [0, pi/2)".into()));
        }
        Ok(())
    }
}

/// Class-centre matrix `W` of shape `[num_classes, embed_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AamHead {
    pub weight: Param,
}

impl AamHead {
    pub fn init(num_classes: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / embed_dim as f64).sqrt();
        Self { weight: Param::new(Tensor::matrix(num_classes, embed_dim, rng.normal_vec(num_classes * embed_dim, std))) }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if (0..self.num_classes()).any(|c| norm(self.weight.value.row(c)) == 0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(())
    }

    /// Cosines between one embedding and every class centre.
    pub fn cosines(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.embed_dim() {
            return Err(Error::ShapeMismatch { expected: vec![self.embed_dim()], got: vec![embedding.len()] });
        }
        (0..self.num_classes()).map(|c| cosine_slice(embedding, self.weight.value.row(c))).collect()
    }
}

/// Log-probabilities over classes; the margin applies to `label` when given.
pub fn aam_log_probs(cosines: &[f64], label: Option<usize>, cfg: &AamConfig) -> Vec<f64> {
    let mut logits: Vec<f64> = cosines.iter().map(|c| cfg.scale * c).collect();
    if let Some(y) = label {
        let theta = cosines[y].clamp(-1.0, 1.0).acos();
        logits[y] = cfg.scale * (theta + cfg.margin).cos();
    }
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(&logits, 1.0, &mut out);
    out
}

/// AAM loss of one embedding against `label`, with the softmax outputs.
pub fn aam_loss(embedding: &[f64], label: usize, head: &AamHead, cfg: &AamConfig) -> Result<(f64, Vec<f64>)> {
    if label >= head.num_classes() {
        return Err(Error::InvalidLabel { label, num_classes: head.num_classes() });
    }
    let cos = head.cosines(embedding)?;
    let logp = aam_log_probs(&cos, Some(label), cfg);
    Ok((aam_nll(&cos, label, cfg), logp.iter().map(|l| l.exp()).collect()))
}

/// `−log p_y` as `ln(1 + Σ_{j≠y} e^{l_j − l_y})`, which stays strictly
/// positive when the target dominates.
pub fn aam_nll(cosines: &[f64], label: usize, cfg: &AamConfig) -> f64 {
    let theta = cosines[label].clamp(-1.0, 1.0).acos();
    let target = cfg.scale * (theta + cfg.margin).cos();
    let rest: f64 = cosines.iter().enumerate().filter(|(j, _)| *j != label).map(|(_, c)| (cfg.scale * c - target).exp()).sum();
    rest.ln_1p()
}

/// Tape pieces for `[n, C]` cosine logits between embedding rows and `W`.
pub fn cosine_matrix(tape: &mut Tape, embeddings: Var, weight: Var) -> Var {
    let e = tape.normalize_rows(embeddings);
    let w = tape.normalize_rows(weight);
    tape.matmul_nt(e, w)
}

/// Row-wise log-probabilities with the margin on labelled rows.
pub fn aam_log_probs_tape(tape: &mut Tape, embeddings: Var, weight: Var, labels: &[Option<usize>], cfg: &AamConfig) -> Var {
    let cos = cosine_matrix(tape, embeddings, weight);
    let logits = tape.margin_logits(cos, labels, cfg.scale, cfg.margin);
    tape.log_softmax_rows(logits, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;

    fn head_from(rows: &[&[f64]]) -> AamHead {
        let d = rows[0].len();
        AamHead { weight: Param::new(Tensor::matrix(rows.len(), d, rows.concat())) }
    }

    #[test]
    fn zero_margin_is_scaled_cosine_softmax() {
        let mut rng = Rng::new(2);
        let head = AamHead::init(5, 4, &mut rng);
        let e = rng.normal_vec(4, 1.0);
        let cfg = AamConfig { scale: 30.0, margin: 0.0 };
        let (loss, probs) = aam_loss(&e, 3, &head, &cfg).unwrap();
        let cos = head.cosines(&e).unwrap();
        let z: f64 = cos.iter().map(|c| (30.0 * c).exp()).sum();
        assert!((loss - (z.ln() - 30.0 * cos[3])).abs() < 1e-10);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_target_matches_direct_formula() {
        let head = head_from(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let (loss, _) = aam_loss(&[5.0, 0.0], 0, &head, &AamConfig::default()).unwrap();
        let t = (30.0 * 0.2f64.cos()).exp();
        let want = -(t / (t + 1.0)).ln();
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn errors() {
        let head = head_from(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = AamConfig::default();
        assert_eq!(aam_loss(&[1.0, 0.0], 2, &head, &cfg).unwrap_err(), Error::InvalidLabel { label: 2, num_classes: 2 });
        assert_eq!(aam_loss(&[0.0, 0.0], 0, &head, &cfg).unwrap_err(), Error::ZeroVector);
        assert!(AamConfig { scale: 30.0, margin: 1.6 }.validate().is_err());
    }

    #[test]
    fn tape_matches_scalar_and_gradients_check() {
        let mut rng = Rng::new(8);
        let (n, d, c) = (4, 5, 3);
        let x = Tensor::matrix(n, d, rng.normal_vec(n * d, 1.0));
        let w = Tensor::matrix(c, d, rng.normal_vec(c * d, 1.0));
        let labels = vec![Some(0), Some(2), None, Some(1)];
        let cfg = AamConfig { scale: 5.0, margin: 0.2 };
        let f = |p: &[Tensor]| {
            let mut tape = Tape::new();
            let xv = tape.param(&p[0]);
            let wv = tape.param(&p[1]);
            let lp = aam_log_probs_tape(&mut tape, xv, wv, &labels, &cfg);
            let mut targets = vec![0.0; n * c];
            for (i, l) in labels.iter().enumerate() {
                targets[i * c + l.unwrap_or(0)] = 1.0;
            }
            let loss = tape.cross_entropy(lp, targets);
            let g = tape.backward(loss);
            Ok((tape.scalar(loss), vec![g.get(xv), g.get(wv)]))
        };
        let (loss, _) = f(&[x.clone(), w.clone()]).unwrap();
        let head = AamHead { weight: Param::new(w.clone()) };
        let mut want = 0.0;
        for (i, l) in labels.iter().enumerate() {
            let cos = head.cosines(x.row(i)).unwrap();
            want -= aam_log_probs(&cos, *l, &cfg)[l.unwrap_or(0)];
        }
        assert!((loss - want).abs() < 1e-10);
        assert!(grad_check(f, &[x, w], 1e-5).unwrap() < 1e-4);
    }
}

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares analytic gradients with central finite differences.
///
/// `f` maps a point to `(loss, analytic gradient per tensor)`. Returns the
/// largest `|analytic − numeric| / max(1, |analytic|)` over all coordinates.
pub fn grad_check<F>(f: F, point: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(epsilon > 1e-8 && epsilon < 1e-2) {
        return Err(Error::InvalidConfig(format!("grad_check epsilon {epsilon} outside (1e-8, 1e-2)")));
    }
    let (loss, analytic) = f(point)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut probe: Vec<Tensor> = point.to_vec();
    let mut worst = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        for ci in 0..probe[ti].len() {
            let orig = probe[ti].values()[ci];
            probe[ti].values_mut()[ci] = orig + epsilon;
            let (up, _) = f(&probe)?;
            probe[ti].values_mut()[ci] = orig - epsilon;
            let (down, _) = f(&probe)?;
            probe[ti].values_mut()[ci] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grad.values()[ci];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        let x = Tensor::vector(vec![0.3, -1.7, 2.5, 0.01]);
        let err = grad_check(
            |p| {
                let v = p[0].values();
                let loss = v.iter().map(|a| a * a).sum();
                Ok((loss, vec![Tensor::vector(v.iter().map(|a| 2.0 * a).collect())]))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_epsilon_and_nan() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|_| Ok((0.0, vec![Tensor::vector(vec![0.0])])), &[x.clone()], 0.5).is_err());
        assert_eq!(
            grad_check(|_| Ok((f64::NAN, vec![Tensor::vector(vec![0.0])])), &[x], 1e-5),
            Err(Error::NonFiniteLoss)
        );
    }
}

//! Two-component univariate Gaussian mixture: EM fit and the equal-density
//! crossing between the components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const MIN_SAMPLES: usize = 20;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn gaussian_pdf(x: f64, mean: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::NonPositiveVariance(var));
    }
    Ok(log_gaussian(x, mean, var).exp())
}

fn log_gaussian(x: f64, mean: f64, var: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * var.ln() - (x - mean) * (x - mean) / (2.0 * var)
}

/// Component 1 is the low-mean (reliable) peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gmm2 {
    pub weight1: f64,
    pub weight2: f64,
    pub mean1: f64,
    pub mean2: f64,
    pub var1: f64,
    pub var2: f64,
}

impl Gmm2 {
    pub fn weighted_density1(&self, x: f64) -> f64 {
        self.weight1 * log_gaussian(x, self.mean1, self.var1).exp()
    }

    pub fn weighted_density2(&self, x: f64) -> f64 {
        self.weight2 * log_gaussian(x, self.mean2, self.var2).exp()
    }

    pub fn density(&self, x: f64) -> f64 {
        self.weighted_density1(x) + self.weighted_density2(x)
    }

    fn log_ratio(&self, x: f64) -> f64 {
        (self.weight1.ln() + log_gaussian(x, self.mean1, self.var1)) - (self.weight2.ln() + log_gaussian(x, self.mean2, self.var2))
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let a = self.weight1.ln() + log_gaussian(x, self.mean1, self.var1);
                let b = self.weight2.ln() + log_gaussian(x, self.mean2, self.var2);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum()
    }

    /// True when the mixture density has a strict interior minimum between
    /// the two means.
    pub fn has_dip(&self) -> bool {
        if !(self.mean2 > self.mean1) {
            return false;
        }
        let steps = 512;
        let h = (self.mean2 - self.mean1) / steps as f64;
        let vals: Vec<f64> = (0..=steps).map(|i| self.density(self.mean1 + i as f64 * h)).collect();
        let lowest = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        lowest < vals[0] * (1.0 - 1e-9) && lowest < vals[steps] * (1.0 - 1e-9)
    }

    fn ordered(self) -> Self {
        if self.mean1 <= self.mean2 {
            self
        } else {
            Self {
                weight1: self.weight2,
                weight2: self.weight1,
                mean1: self.mean2,
                mean2: self.mean1,
                var1: self.var2,
                var2: self.var1,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub gmm: Gmm2,
    /// Log-likelihood of the data under the parameters entering each EM step,
    /// plus the final parameters.
    pub ll_trace: Vec<f64>,
    pub iterations: usize,
}

/// EM on values that are already in the log-loss domain.
pub fn fit_gmm2_log(xs: &[f64], max_em_iters: usize, tol: f64) -> Result<GmmFit> {
    if xs.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples { got: xs.len(), min: MIN_SAMPLES });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
    let q = |p: f64| crate::numkit::ops::quantile(xs, p);
    let mut g = Gmm2 { weight1: 0.5, weight2: 0.5, mean1: q(0.25), mean2: q(0.75), var1: var, var2: var };
    let mut trace = vec![g.log_likelihood(xs)];
    let mut resp = vec![0.0; xs.len()];
    let mut iterations = 0;
    let mut floored = false;
    for _ in 0..max_em_iters {
        iterations += 1;
        // E step: responsibility of component 1
        for (r, &x) in resp.iter_mut().zip(xs) {
            let a = g.weight1.ln() + log_gaussian(x, g.mean1, g.var1);
            let b = g.weight2.ln() + log_gaussian(x, g.mean2, g.var2);
            *r = 1.0 / (1.0 + (b - a).exp());
        }
        // M step
        let n1: f64 = resp.iter().sum();
        let n2 = n - n1;
        let m1 = resp.iter().zip(xs).map(|(r, x)| r * x).sum::<f64>() / n1.max(f64::MIN_POSITIVE);
        let m2 = resp.iter().zip(xs).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n2.max(f64::MIN_POSITIVE);
        let v1 = resp.iter().zip(xs).map(|(r, x)| r * (x - m1).powi(2)).sum::<f64>() / n1.max(f64::MIN_POSITIVE);
        let v2 = resp.iter().zip(xs).map(|(r, x)| (1.0 - r) * (x - m2).powi(2)).sum::<f64>() / n2.max(f64::MIN_POSITIVE);
        let w1 = (n1 / n).clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR);
        floored |= v1 < VARIANCE_FLOOR || v2 < VARIANCE_FLOOR || w1 != n1 / n;
        g = Gmm2 {
            weight1: w1,
            weight2: 1.0 - w1,
            mean1: if n1 > 0.0 { m1 } else { g.mean1 },
            mean2: if n2 > 0.0 { m2 } else { g.mean2 },
            var1: v1.max(VARIANCE_FLOOR),
            var2: v2.max(VARIANCE_FLOOR),
        };
        let ll = g.log_likelihood(xs);
        let prev = *trace.last().unwrap();
        if !floored {
            assert!(ll >= prev - 1e-9 * prev.abs().max(1.0), "EM log-likelihood decreased: {prev} -> {ll}");
        }
        trace.push(ll);
        if (ll - prev).abs() < tol * n {
            break;
        }
    }
    if g.var1 <= VARIANCE_FLOOR && g.var2 <= VARIANCE_FLOOR {
        return Err(Error::DegenerateFit);
    }
    Ok(GmmFit { gmm: g.ordered(), ll_trace: trace, iterations })
}

/// EM on `log(loss)`; every loss must be positive.
pub fn fit_gmm2(losses: &[f64], max_em_iters: usize, tol: f64) -> Result<GmmFit> {
    if losses.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidConfig("losses must be positive to fit in the log domain".into()));
    }
    let logs: Vec<f64> = losses.iter().map(|l| l.ln()).collect();
    fit_gmm2_log(&logs, max_em_iters, tol)
}

/// Solved threshold. `midpoint_fallback` is set when no crossing lies between
/// the means and the midpoint was returned instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub midpoint_fallback: bool,
}

/// The point in `[μ1, μ2]` where the weighted component densities are equal.
pub fn solve_threshold(g: &Gmm2) -> Result<Threshold> {
    let g = g.ordered();
    if g.mean1 == g.mean2 {
        return Err(Error::DegenerateMeans);
    }
    let (lo, hi) = (g.mean1, g.mean2);
    let (flo, fhi) = (g.log_ratio(lo), g.log_ratio(hi));
    if flo == 0.0 {
        return Ok(Threshold { value: lo, midpoint_fallback: false });
    }
    if fhi == 0.0 {
        return Ok(Threshold { value: hi, midpoint_fallback: false });
    }
    if flo.signum() == fhi.signum() {
        return Ok(Threshold { value: 0.5 * (lo + hi), midpoint_fallback: true });
    }
    // log p1 − log p2 = a x² + b x + c
    let a = 1.0 / (2.0 * g.var2) - 1.0 / (2.0 * g.var1);
    let b = g.mean1 / g.var1 - g.mean2 / g.var2;
    let c = g.mean2 * g.mean2 / (2.0 * g.var2) - g.mean1 * g.mean1 / (2.0 * g.var1) + g.weight1.ln() - 0.5 * g.var1.ln()
        - g.weight2.ln()
        + 0.5 * g.var2.ln();
    let mut guess = if a.abs() < 1e-14 * (b.abs() + c.abs()).max(1.0) {
        -c / b
    } else {
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        let q = -0.5 * (b + b.signum() * disc);
        let r1 = q / a;
        let r2 = if q != 0.0 { c / q } else { r1 };
        if (lo..=hi).contains(&r1) {
            r1
        } else {
            r2
        }
    };
    if !(lo..=hi).contains(&guess) || !guess.is_finite() {
        guess = 0.5 * (lo + hi);
    }
    // Polish with bisection around the analytic root inside the bracket.
    let (mut l, mut h) = (lo, hi);
    let sign_lo = flo.signum();
    for _ in 0..200 {
        let fg = g.log_ratio(guess);
        if fg == 0.0 {
            break;
        }
        if fg.signum() == sign_lo {
            l = guess;
        } else {
            h = guess;
        }
        if h - l <= f64::EPSILON * h.abs().max(l.abs()).max(1.0) {
            break;
        }
        guess = 0.5 * (l + h);
    }
    Ok(Threshold { value: guess, midpoint_fallback: false })
}

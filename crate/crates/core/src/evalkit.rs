//! Verification and clustering metrics.
//!
//! EER and minDCF are evaluated on the operating points obtained by placing a
//! threshold below every score, between every pair of adjacent distinct
//! scores, and above every score. A trial is accepted when its score is at or
//! above the threshold.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::ops::cosine_slice;
use crate::synthworld::TrialList;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrials {
    scores: Vec<f64>,
    is_target: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, is_target: Vec<bool>) -> Result<Self> {
        if scores.len() != is_target.len() {
            return Err(Error::LengthMismatch(scores.len(), is_target.len()));
        }
        let nt = is_target.iter().filter(|t| **t).count();
        if nt == 0 || nt == is_target.len() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::DegenerateTrials);
        }
        Ok(Self { scores, is_target })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_target(&self) -> &[bool] {
        &self.is_target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub normalize: bool,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self { p_target: 0.01, c_miss: 1.0, c_fa: 1.0, normalize: true }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || !(self.c_miss > 0.0) || !(self.c_fa > 0.0) {
            return Err(Error::InvalidConfig("dcf needs p_target in (0,1) and positive costs".into()));
        }
        Ok(())
    }

    /// Cost of the best trivial (accept-all or reject-all) policy.
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// One row of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

/// Operating points in increasing-threshold order (FRR rising, FAR falling).
pub fn operating_points(st: &ScoredTrials) -> Vec<OperatingPoint> {
    let mut idx: Vec<usize> = (0..st.scores.len()).collect();
    idx.sort_by(|&a, &b| st.scores[a].total_cmp(&st.scores[b]));
    let n_t = st.is_target.iter().filter(|t| **t).count() as f64;
    let n_n = st.scores.len() as f64 - n_t;
    let mut out = Vec::with_capacity(idx.len() + 1);
    let (mut misses, mut rejected_non) = (0usize, 0usize);
    out.push(OperatingPoint { threshold: f64::NEG_INFINITY, frr: 0.0, far: 1.0 });
    let mut i = 0;
    while i < idx.len() {
        let s = st.scores[idx[i]];
        while i < idx.len() && st.scores[idx[i]] == s {
            if st.is_target[idx[i]] {
                misses += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
        let threshold = if i < idx.len() { 0.5 * (s + st.scores[idx[i]]) } else { f64::INFINITY };
        out.push(OperatingPoint {
            threshold,
            frr: misses as f64 / n_t,
            far: (n_n - rejected_non as f64) / n_n,
        });
    }
    out
}

/// Equal error rate and the (interpolated) threshold where it occurs.
pub fn compute_eer(st: &ScoredTrials) -> Result<(f64, f64)> {
    let pts = operating_points(st);
    let lo = st.scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = st.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let finite = |t: f64| if t == f64::NEG_INFINITY { lo - 1.0 } else if t == f64::INFINITY { hi + 1.0 } else { t };
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.frr - a.far, b.frr - b.far);
        if da <= 0.0 && db >= 0.0 {
            if da == db {
                return Ok((a.frr, finite(a.threshold)));
            }
            let alpha = da / (da - db);
            let eer = a.frr + alpha * (b.frr - a.frr);
            let thr = finite(a.threshold) + alpha * (finite(b.threshold) - finite(a.threshold));
            return Ok((eer.clamp(0.0, 1.0), thr));
        }
    }
    Err(Error::DegenerateTrials)
}

/// Minimum detection cost over all operating points.
pub fn compute_mindcf(st: &ScoredTrials, cfg: &DcfConfig) -> Result<f64> {
    cfg.validate()?;
    let best = operating_points(st)
        .iter()
        .map(|p| cfg.c_miss * p.frr * cfg.p_target + cfg.c_fa * p.far * (1.0 - cfg.p_target))
        .fold(f64::INFINITY, f64::min);
    Ok(if cfg.normalize { best / cfg.normalizer() } else { best })
}

/// Cosine score for each trial from per-utterance embeddings.
pub fn score_trials(embeddings: &[Vec<f64>], trials: &TrialList) -> Result<ScoredTrials> {
    let mut scores = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        let a = embeddings.get(t.a).ok_or(Error::UnknownUtterance(t.a))?;
        let b = embeddings.get(t.b).ok_or(Error::UnknownUtterance(t.b))?;
        scores.push(cosine_slice(a, b)?);
    }
    ScoredTrials::new(scores, trials.trials.iter().map(|t| t.is_target).collect())
}

fn contingency(a: &[usize], b: &[usize]) -> (HashMap<(usize, usize), usize>, HashMap<usize, usize>, HashMap<usize, usize>) {
    let mut joint = HashMap::new();
    let mut ca = HashMap::new();
    let mut cb = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
    }
    (joint, ca, cb)
}

fn entropy(counts: &HashMap<usize, usize>, n: f64) -> f64 {
    let mut keys: Vec<_> = counts.keys().copied().collect();
    keys.sort_unstable();
    keys.iter().map(|k| counts[k] as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Mutual information normalized by the arithmetic mean of the entropies.
pub fn nmi(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = labels_a.len() as f64;
    let (joint, ca, cb) = contingency(labels_a, labels_b);
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut cells: Vec<_> = joint.iter().map(|(&k, &v)| (k, v)).collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .iter()
        .map(|&((x, y), c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

/// Fraction of points whose cluster's majority truth class matches their own.
pub fn purity(pseudo: &[usize], truth: &[usize]) -> Result<f64> {
    if pseudo.len() != truth.len() {
        return Err(Error::LengthMismatch(pseudo.len(), truth.len()));
    }
    if pseudo.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (joint, _, _) = contingency(pseudo, truth);
    let mut best: HashMap<usize, usize> = HashMap::new();
    for (&(c, _), &n) in &joint {
        let e = best.entry(c).or_insert(0);
        *e = (*e).max(n);
    }
    Ok(best.values().sum::<usize>() as f64 / pseudo.len() as f64)
}

/// A metric as written to the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub version: u32,
    pub metric: String,
    pub value: f64,
    pub iteration: usize,
    pub modality: String,
    pub config_hash: String,
}

//! Loss-gate state, threshold refresh, sharpening, label correction and the
//! per-sample branch rule.

use serde::{Deserialize, Serialize};

use super::gmm::{fit_gmm2_log, solve_threshold, Gmm2, MIN_SAMPLES};
use crate::error::{Error, Result};
use crate::numkit::ops::{argmax, check_distribution, cross_entropy, quantile};

const DIST_TOL: f64 = 1e-6;
pub const EM_MAX_ITERS: usize = 200;
pub const EM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateState {
    /// Log-loss threshold; `+∞` means every sample is reliable.
    #[serde(with = "crate::numkit::lenient_f64")]
    pub tau1: f64,
    pub tau2: f64,
    pub sharpness: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_record: Vec<f64>,
}

impl Default for GateState {
    fn default() -> Self {
        Self { tau1: f64::INFINITY, tau2: 0.5, sharpness: 0.1, loss_record: Vec::new() }
    }
}

impl GateState {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau2 > 0.0 && self.tau2 < 1.0) {
            return Err(Error::InvalidConfig("gate tau2 must lie in (0, 1)".into()));
        }
        if !(self.sharpness > 0.0) {
            return Err(Error::InvalidConfig("gate sharpness must be > 0".into()));
        }
        if self.tau1.is_nan() {
            return Err(Error::InvalidConfig("gate tau1 is NaN".into()));
        }
        Ok(())
    }

    /// Appends a raw (positive) clean loss.
    pub fn record(&mut self, loss: f64) {
        self.loss_record.push(loss);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateWarning {
    TooFewSamples,
    /// Fit degenerate or without a density dip; τ1 moved above the 95th
    /// percentile.
    Unimodal,
    /// No crossing between the means; midpoint used.
    MidpointFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refresh {
    pub gmm: Option<Gmm2>,
    pub warning: Option<GateWarning>,
    pub samples: usize,
}

/// Refits the mixture on the recorded log-losses and moves τ1 to the
/// crossing. The record is always cleared; an empty record is a no-op.
pub fn refresh_threshold(gate: &mut GateState) -> Refresh {
    let record = std::mem::take(&mut gate.loss_record);
    let samples = record.len();
    if record.is_empty() {
        return Refresh { gmm: None, warning: None, samples };
    }
    if record.len() < MIN_SAMPLES {
        return Refresh { gmm: None, warning: Some(GateWarning::TooFewSamples), samples };
    }
    let logs: Vec<f64> = record.iter().map(|l| l.max(f64::MIN_POSITIVE).ln()).collect();
    let above_q95 = || {
        let q = quantile(&logs, 0.95);
        q + 1e-9 * q.abs().max(1.0)
    };
    match fit_gmm2_log(&logs, EM_MAX_ITERS, EM_TOL) {
        Ok(fit) if fit.gmm.has_dip() => match solve_threshold(&fit.gmm) {
            Ok(t) => {
                gate.tau1 = t.value;
                let warning = t.midpoint_fallback.then_some(GateWarning::MidpointFallback);
                Refresh { gmm: Some(fit.gmm), warning, samples }
            }
            Err(_) => {
                gate.tau1 = above_q95();
                Refresh { gmm: Some(fit.gmm), warning: Some(GateWarning::Unimodal), samples }
            }
        },
        Ok(fit) => {
            gate.tau1 = above_q95();
            Refresh { gmm: Some(fit.gmm), warning: Some(GateWarning::Unimodal), samples }
        }
        Err(_) => {
            gate.tau1 = above_q95();
            Refresh { gmm: None, warning: Some(GateWarning::Unimodal), samples }
        }
    }
}

/// `softmax(log p / ε_c)`.
pub fn sharpen(probs: &[f64], sharpness: f64) -> Result<Vec<f64>> {
    check_distribution(probs, DIST_TOL)?;
    if !(sharpness > 0.0) {
        return Err(Error::NonPositiveTemperature(sharpness));
    }
    let logits: Vec<f64> = probs.iter().map(|p| if *p > 0.0 { p.ln() / sharpness } else { f64::NEG_INFINITY }).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `H(sharpen(p_clean) | p_aug)`, or `None` (skip) when the clean prediction
/// is not confident enough.
pub fn lc_loss(p_clean: &[f64], p_aug: &[f64], gate: &GateState) -> Result<Option<f64>> {
    check_distribution(p_clean, DIST_TOL)?;
    check_distribution(p_aug, DIST_TOL)?;
    if p_clean.len() != p_aug.len() {
        return Err(Error::LengthMismatch(p_clean.len(), p_aug.len()));
    }
    if max_conf(p_clean) <= gate.tau2 {
        return Ok(None);
    }
    Ok(Some(cross_entropy(&sharpen(p_clean, gate.sharpness)?, p_aug)))
}

pub fn max_conf(p: &[f64]) -> f64 {
    p.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// How the training step treats the pseudo-labels.
/// Written as `none`, `dlg`, `dlg_lc` or `fixed(<raw loss>)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SelectionMode {
    /// Every label is trusted.
    None,
    /// Static gate on the raw clean loss; unreliable samples are dropped.
    Fixed(f64),
    /// Dynamic gate; unreliable samples are dropped.
    Dlg,
    /// Dynamic gate with label correction for unreliable samples.
    DlgLc,
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionMode::None => f.write_str("none"),
            SelectionMode::Fixed(t) => write!(f, "fixed({t})"),
            SelectionMode::Dlg => f.write_str("dlg"),
            SelectionMode::DlgLc => f.write_str("dlg_lc"),
        }
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(SelectionMode::None),
            "dlg" => Ok(SelectionMode::Dlg),
            "dlg_lc" => Ok(SelectionMode::DlgLc),
            other => other
                .strip_prefix("fixed(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| *v > 0.0)
                .map(SelectionMode::Fixed)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown selection mode {other:?}"))),
        }
    }
}

impl TryFrom<String> for SelectionMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SelectionMode> for String {
    fn from(m: SelectionMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Reliable,
    Corrected,
    Skipped,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Reliable => "reliable",
            Branch::Corrected => "corrected",
            Branch::Skipped => "skipped",
        }
    }
}

/// Branch for one sample given its raw clean loss and clean-view confidence.
pub fn select_branch(clean_loss: f64, max_conf: f64, gate: &GateState, mode: SelectionMode) -> Branch {
    match mode {
        SelectionMode::None => Branch::Reliable,
        SelectionMode::Fixed(t) => {
            if clean_loss < t {
                Branch::Reliable
            } else {
                Branch::Skipped
            }
        }
        SelectionMode::Dlg | SelectionMode::DlgLc => {
            if clean_loss.ln() < gate.tau1 {
                Branch::Reliable
            } else if mode == SelectionMode::DlgLc && max_conf > gate.tau2 {
                Branch::Corrected
            } else {
                Branch::Skipped
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MmDecision {
    Reliable,
    HardLabel { class: usize },
    /// Per-modality label correction; `false` means that modality skips.
    SoftLabel { audio: bool, visual: bool },
    Skip,
}

/// Joint gate for paired audio/visual samples. Losses are raw; thresholds are
/// in the log domain.
pub fn mm_gate(
    l_audio: f64,
    l_visual: f64,
    tau_audio: f64,
    tau_visual: f64,
    p_audio: &[f64],
    p_visual: &[f64],
    tau2: f64,
) -> Result<MmDecision> {
    check_distribution(p_audio, DIST_TOL)?;
    check_distribution(p_visual, DIST_TOL)?;
    if l_audio.ln() < tau_audio && l_visual.ln() < tau_visual {
        return Ok(MmDecision::Reliable);
    }
    let (ca, cv) = (argmax(p_audio), argmax(p_visual));
    if ca == cv {
        return Ok(MmDecision::HardLabel { class: ca });
    }
    let (a, v) = (max_conf(p_audio) > tau2, max_conf(p_visual) > tau2);
    Ok(if a || v { MmDecision::SoftLabel { audio: a, visual: v } } else { MmDecision::Skip })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    #[test]
    fn sharpen_examples() {
        let u = vec![0.25; 4];
        for eps in [0.05, 0.1, 1.0, 3.0] {
            let s = sharpen(&u, eps).unwrap();
            assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
        let p = [0.6, 0.3, 0.1];
        let s = sharpen(&p, 0.1).unwrap();
        let raw: Vec<f64> = p.iter().map(|v: &f64| v.powf(10.0)).collect();
        let z: f64 = raw.iter().sum();
        for (a, b) in s.iter().zip(&raw) {
            assert!((a - b / z).abs() < 1e-14);
        }
        assert!(s[0] > 0.99);
        assert_eq!(sharpen(&[0.5, 0.6], 0.1), Err(Error::NonDistribution));
    }

    #[test]
    fn lc_examples() {
        let gate = GateState::default();
        assert_eq!(lc_loss(&[0.4, 0.3, 0.3], &[0.2, 0.4, 0.4], &gate).unwrap(), None);
        let pc = [0.7, 0.2, 0.1];
        let target = sharpen(&pc, 0.1).unwrap();
        let entropy: f64 = -target.iter().map(|t| t * t.ln()).sum::<f64>();
        let same = lc_loss(&pc, &target, &gate).unwrap().unwrap();
        assert!((same - entropy).abs() < 1e-12);
        let pa: [f64; 3] = [0.5, 0.25, 0.25];
        let want: f64 = -target.iter().zip(&pa).map(|(t, q)| t * q.ln()).sum::<f64>();
        assert!((lc_loss(&pc, &pa, &gate).unwrap().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn refresh_on_known_mixture() {
        let mut rng = Rng::new(11);
        let mut gate = GateState::default();
        for _ in 0..4000 {
            let x = if rng.uniform() < 0.6 { -1.5 + 0.4 * rng.normal() } else { 1.0 + 0.5 * rng.normal() };
            gate.record(x.exp());
        }
        let r = refresh_threshold(&mut gate);
        assert!(r.warning.is_none());
        assert!(gate.loss_record.is_empty());
        let truth = super::super::gmm::Gmm2 { weight1: 0.6, weight2: 0.4, mean1: -1.5, mean2: 1.0, var1: 0.16, var2: 0.25 };
        let want = solve_threshold(&truth).unwrap().value;
        assert!((gate.tau1 - want).abs() < 0.05, "{} vs {want}", gate.tau1);
    }

    #[test]
    fn refresh_fallbacks() {
        let mut gate = GateState { tau1: 0.3, ..GateState::default() };
        assert_eq!(refresh_threshold(&mut gate).warning, None);
        assert_eq!(gate.tau1, 0.3);
        gate.loss_record = vec![1.0; 5];
        assert_eq!(refresh_threshold(&mut gate).warning, Some(GateWarning::TooFewSamples));
        assert_eq!(gate.tau1, 0.3);
        assert!(gate.loss_record.is_empty());

        let mut rng = Rng::new(4);
        let logs: Vec<f64> = (0..2000).map(|_| 0.2 * rng.normal()).collect();
        gate.loss_record = logs.iter().map(|l| l.exp()).collect();
        assert_eq!(refresh_threshold(&mut gate).warning, Some(GateWarning::Unimodal));
        assert!(gate.tau1 > quantile(&logs, 0.95));
        assert!(logs.iter().filter(|l| **l < gate.tau1).count() >= 1900);

        gate.loss_record = vec![2.0; 40];
        assert_eq!(refresh_threshold(&mut gate).warning, Some(GateWarning::Unimodal));
        assert!(gate.tau1 > 2f64.ln());
    }

    #[test]
    fn selection_mode_strings() {
        for m in [SelectionMode::None, SelectionMode::Dlg, SelectionMode::DlgLc, SelectionMode::Fixed(2.5)] {
            assert_eq!(m.to_string().parse::<SelectionMode>().unwrap(), m);
        }
        assert!("fixed(-1)".parse::<SelectionMode>().is_err());
        assert!("lg".parse::<SelectionMode>().is_err());
    }

    #[test]
    fn gate_serializes_infinite_tau() {
        let g = GateState::default();
        let s = serde_json::to_string(&g).unwrap();
        let back: GateState = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn branch_rule() {
        let open = GateState::default();
        let closed = GateState { tau1: f64::NEG_INFINITY, tau2: 1.0 - 1e-12, ..GateState::default() };
        for (l, c) in [(0.01, 0.9), (50.0, 0.2), (3.0, 0.999)] {
            assert_eq!(select_branch(l, c, &open, SelectionMode::DlgLc), Branch::Reliable);
            assert_eq!(select_branch(l, c, &closed, SelectionMode::DlgLc), Branch::Skipped);
            assert_eq!(select_branch(l, c, &closed, SelectionMode::None), Branch::Reliable);
        }
        let g = GateState { tau1: 0.0, ..GateState::default() };
        assert_eq!(select_branch(0.5, 0.9, &g, SelectionMode::DlgLc), Branch::Reliable);
        assert_eq!(select_branch(2.0, 0.9, &g, SelectionMode::DlgLc), Branch::Corrected);
        assert_eq!(select_branch(2.0, 0.9, &g, SelectionMode::Dlg), Branch::Skipped);
        assert_eq!(select_branch(2.0, 0.5, &g, SelectionMode::DlgLc), Branch::Skipped);
        assert_eq!(select_branch(2.0, 0.9, &g, SelectionMode::Fixed(3.0)), Branch::Reliable);
    }

    #[test]
    fn mm_gate_examples() {
        let pa = [0.1, 0.1, 0.1, 0.7];
        let pv = [0.2, 0.1, 0.1, 0.6];
        assert_eq!(mm_gate(0.1, 0.1, 0.0, 0.0, &pa, &[0.9, 0.1, 0.0, 0.0], 0.5).unwrap(), MmDecision::Reliable);
        assert_eq!(mm_gate(5.0, 0.1, 0.0, 0.0, &pa, &pv, 0.5).unwrap(), MmDecision::HardLabel { class: 3 });
        let qa = [0.4, 0.3, 0.3, 0.0];
        let qv = [0.3, 0.4, 0.3, 0.0];
        assert_eq!(mm_gate(5.0, 5.0, 0.0, 0.0, &qa, &qv, 0.5).unwrap(), MmDecision::Skip);
        assert_eq!(
            mm_gate(5.0, 5.0, 0.0, 0.0, &[0.8, 0.1, 0.1, 0.0], &qv, 0.5).unwrap(),
            MmDecision::SoftLabel { audio: true, visual: false }
        );
    }

    proptest! {
        #[test]
        fn sharpen_keeps_argmax_and_identity(raw in prop::collection::vec(0.01f64..1.0, 2..8), eps in 0.05f64..2.0) {
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let s = sharpen(&p, eps).unwrap();
            prop_assert_eq!(argmax(&s), argmax(&p));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let id = sharpen(&p, 1.0).unwrap();
            for (a, b) in id.iter().zip(&p) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn raising_tau1_never_shrinks_reliable_set(
            losses in prop::collection::vec(0.001f64..100.0, 1..40),
            t in -5.0f64..5.0,
            dt in 0.0f64..5.0,
        ) {
            let lo = GateState { tau1: t, ..GateState::default() };
            let hi = GateState { tau1: t + dt, ..GateState::default() };
            for l in losses {
                if select_branch(l, 0.9, &lo, SelectionMode::DlgLc) == Branch::Reliable {
                    prop_assert_eq!(select_branch(l, 0.9, &hi, SelectionMode::DlgLc), Branch::Reliable);
                }
            }
        }
    }
}

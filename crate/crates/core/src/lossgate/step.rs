//! The gated training step: clean-view loss recording, branch selection and
//! the augmented-view objective, for one modality or a paired audio/visual
//! batch.

use serde::{Deserialize, Serialize};

use super::aam::{aam_log_probs, aam_log_probs_tape, aam_nll, AamConfig, AamHead};
use super::gate::{max_conf, mm_gate, select_branch, sharpen, Branch, GateState, MmDecision, SelectionMode};
use crate::dino::model::{register, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numkit::{Param, Rng, Tape, Tensor};

/// Stage II network: encoder trunk plus AAM class centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: AamHead,
}

impl Classifier {
    pub fn init(cfg: &EncoderConfig, num_classes: usize, rng: &Rng) -> Self {
        Self {
            encoder: Encoder::init(cfg, &mut rng.split(1)),
            head: AamHead::init(num_classes, cfg.embed_dim, &mut rng.split(2)),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.push(&self.head.weight);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.push(&mut self.head.weight);
        p
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

/// Pairs of crops of the same utterances: `x1` is the clean view, `x2` is
/// augmented inside the step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub sample_ids: Vec<usize>,
    pub x1: Tensor,
    pub x2: Tensor,
    pub labels: Vec<usize>,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.sample_ids.len() != n || self.x1.rows() != n || self.x2.rows() != n {
            return Err(Error::ShapeMismatch { expected: vec![n], got: vec![self.sample_ids.len(), self.x1.rows(), self.x2.rows()] });
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub aam: AamConfig,
    pub mode: SelectionMode,
    pub augment_std: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub epoch: usize,
    pub sample_id: usize,
    pub log_loss: f64,
    pub branch: Branch,
    pub tau1: f64,
    pub max_conf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Batch-mean objective; skipped samples count in the denominator.
    pub loss: f64,
    /// One gradient per entry of [`Classifier::params`].
    pub grads: Vec<Vec<f64>>,
    pub records: Vec<AuditRecord>,
}

/// Clean-view statistics, computed without gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanStats {
    /// Margin AAM loss against the pseudo-label.
    pub losses: Vec<f64>,
    /// Margin-free class posteriors.
    pub probs: Vec<Vec<f64>>,
}

pub fn clean_pass(model: &Classifier, x: &Tensor, labels: &[usize], aam: &AamConfig) -> Result<CleanStats> {
    let emb = model.encoder.embed_rows(x);
    let mut losses = Vec::with_capacity(emb.len());
    let mut probs = Vec::with_capacity(emb.len());
    for (e, &y) in emb.iter().zip(labels) {
        let cos = model.head.cosines(e)?;
        losses.push(aam_nll(&cos, y, aam).max(f64::MIN_POSITIVE));
        probs.push(aam_log_probs(&cos, None, aam).iter().map(|l| l.exp()).collect());
    }
    Ok(CleanStats { losses, probs })
}

/// What one augmented row is trained towards.
#[derive(Debug, Clone, PartialEq)]
pub enum RowTarget {
    /// Margin AAM against this class.
    Hard(usize),
    /// Cross-entropy of the margin-free posterior against a fixed target.
    Soft(Vec<f64>),
    Zero,
}

/// `(1/denom) Σ_rows CE(target, p_aug)` and its parameter gradients.
pub fn augmented_objective(model: &Classifier, x_aug: &Tensor, targets: &[RowTarget], aam: &AamConfig, denom: usize) -> (f64, Vec<Vec<f64>>) {
    let c = model.head.num_classes();
    let params = model.params();
    let mut tape = Tape::new();
    let handles = register(&mut tape, &params, true);
    let x = tape.constant(x_aug);
    let emb = model.encoder.forward(&mut tape, &handles[..handles.len() - 1], x);
    let labels: Vec<Option<usize>> = targets.iter().map(|t| if let RowTarget::Hard(y) = t { Some(*y) } else { None }).collect();
    let logp = aam_log_probs_tape(&mut tape, emb, handles[handles.len() - 1], &labels, aam);
    let mut tmat = vec![0.0; targets.len() * c];
    for (row, t) in tmat.chunks_mut(c).zip(targets) {
        match t {
            RowTarget::Hard(y) => row[*y] = 1.0,
            RowTarget::Soft(p) => row.copy_from_slice(p),
            RowTarget::Zero => {}
        }
    }
    let ce = tape.cross_entropy(logp, tmat);
    let loss = tape.scale(ce, 1.0 / denom as f64);
    let g = tape.backward(loss);
    let grads = handles.iter().zip(&params).map(|(&h, p)| g.get_slice(h).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.len()])).collect();
    (tape.scalar(loss), grads)
}

fn augment(x: &Tensor, std: f64, rng: &mut Rng) -> Tensor {
    let mut out = x.clone();
    if std > 0.0 {
        out.values_mut().iter_mut().for_each(|v| *v += std * rng.normal());
    }
    out
}

/// Branches and targets for a batch given its clean statistics.
pub fn plan_batch(stats: &CleanStats, labels: &[usize], gate: &GateState, mode: SelectionMode) -> Result<(Vec<Branch>, Vec<RowTarget>)> {
    let mut branches = Vec::with_capacity(labels.len());
    let mut targets = Vec::with_capacity(labels.len());
    for ((&l, p), &y) in stats.losses.iter().zip(&stats.probs).zip(labels) {
        let b = select_branch(l, max_conf(p), gate, mode);
        targets.push(match b {
            Branch::Reliable => RowTarget::Hard(y),
            Branch::Corrected => RowTarget::Soft(sharpen(p, gate.sharpness)?),
            Branch::Skipped => RowTarget::Zero,
        });
        branches.push(b);
    }
    Ok((branches, targets))
}

/// One gated step. Every clean loss is appended to the gate's record in
/// batch order; the gate threshold itself is not changed.
pub fn dlg_lc_step(model: &Classifier, batch: &StepBatch, gate: &mut GateState, ctx: &StepContext, rng: &mut Rng) -> Result<StepOutput> {
    batch.validate(model.head.num_classes())?;
    let x_aug = augment(&batch.x2, ctx.augment_std, rng);
    let stats = clean_pass(model, &batch.x1, &batch.labels, &ctx.aam)?;
    let (branches, targets) = plan_batch(&stats, &batch.labels, gate, ctx.mode)?;
    let (loss, grads) = augmented_objective(model, &x_aug, &targets, &ctx.aam, batch.len());
    let records = audit(&stats, &branches, &batch.sample_ids, gate.tau1, ctx.epoch);
    stats.losses.iter().for_each(|&l| gate.record(l));
    Ok(StepOutput { loss, grads, records })
}

fn audit(stats: &CleanStats, branches: &[Branch], ids: &[usize], tau1: f64, epoch: usize) -> Vec<AuditRecord> {
    stats
        .losses
        .iter()
        .zip(&stats.probs)
        .zip(branches)
        .zip(ids)
        .map(|(((&l, p), &branch), &sample_id)| AuditRecord { epoch, sample_id, log_loss: l.ln(), branch, tau1, max_conf: max_conf(p) })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmStepOutput {
    pub audio: StepOutput,
    pub visual: StepOutput,
    pub decisions: Vec<MmDecision>,
}

/// Paired step over two independent encoders sharing the joint pseudo-labels.
/// Sample `i` of both batches must be the same utterance.
pub fn mm_dlg_lc_step(
    audio: &Classifier,
    visual: &Classifier,
    batch_audio: &StepBatch,
    batch_visual: &StepBatch,
    gates: (&mut GateState, &mut GateState),
    ctx: &StepContext,
    rng: &mut Rng,
) -> Result<MmStepOutput> {
    let (gate_a, gate_v) = gates;
    batch_audio.validate(audio.head.num_classes())?;
    batch_visual.validate(visual.head.num_classes())?;
    if batch_audio.sample_ids != batch_visual.sample_ids || batch_audio.labels != batch_visual.labels {
        return Err(Error::InvalidConfig("audio and visual batches must be paired".into()));
    }
    let aug_a = augment(&batch_audio.x2, ctx.augment_std, &mut rng.split(1));
    let aug_v = augment(&batch_visual.x2, ctx.augment_std, &mut rng.split(2));
    rng.next_u64();
    let sa = clean_pass(audio, &batch_audio.x1, &batch_audio.labels, &ctx.aam)?;
    let sv = clean_pass(visual, &batch_visual.x1, &batch_visual.labels, &ctx.aam)?;

    let n = batch_audio.len();
    let mut decisions = Vec::with_capacity(n);
    let (mut ta, mut tv) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut ba, mut bv) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (la, lv) = (sa.losses[i], sv.losses[i]);
        let (pa, pv) = (&sa.probs[i], &sv.probs[i]);
        let both_pass = |ta: f64, tv: f64| la.ln() < ta && lv.ln() < tv;
        let d = match ctx.mode {
            SelectionMode::None => MmDecision::Reliable,
            SelectionMode::Fixed(t) => {
                if la < t && lv < t {
                    MmDecision::Reliable
                } else {
                    MmDecision::Skip
                }
            }
            SelectionMode::Dlg => {
                if both_pass(gate_a.tau1, gate_v.tau1) {
                    MmDecision::Reliable
                } else {
                    MmDecision::Skip
                }
            }
            SelectionMode::DlgLc => mm_gate(la, lv, gate_a.tau1, gate_v.tau1, pa, pv, gate_a.tau2)?,
        };
        let y = batch_audio.labels[i];
        let (xa, xv) = match &d {
            MmDecision::Reliable => ((Branch::Reliable, RowTarget::Hard(y)), (Branch::Reliable, RowTarget::Hard(y))),
            MmDecision::HardLabel { class } => ((Branch::Corrected, RowTarget::Hard(*class)), (Branch::Corrected, RowTarget::Hard(*class))),
            MmDecision::SoftLabel { audio: a, visual: v } => {
                let soft = |on: bool, p: &[f64], sharp: f64| -> Result<(Branch, RowTarget)> {
                    Ok(if on { (Branch::Corrected, RowTarget::Soft(sharpen(p, sharp)?)) } else { (Branch::Skipped, RowTarget::Zero) })
                };
                (soft(*a, pa, gate_a.sharpness)?, soft(*v, pv, gate_v.sharpness)?)
            }
            MmDecision::Skip => ((Branch::Skipped, RowTarget::Zero), (Branch::Skipped, RowTarget::Zero)),
        };
        ba.push(xa.0);
        ta.push(xa.1);
        bv.push(xv.0);
        tv.push(xv.1);
        decisions.push(d);
    }
    let (la, ga) = augmented_objective(audio, &aug_a, &ta, &ctx.aam, n);
    let (lv, gv) = augmented_objective(visual, &aug_v, &tv, &ctx.aam, n);
    let ra = audit(&sa, &ba, &batch_audio.sample_ids, gate_a.tau1, ctx.epoch);
    let rv = audit(&sv, &bv, &batch_visual.sample_ids, gate_v.tau1, ctx.epoch);
    sa.losses.iter().for_each(|&l| gate_a.record(l));
    sv.losses.iter().for_each(|&l| gate_v.record(l));
    Ok(MmStepOutput {
        audio: StepOutput { loss: la, grads: ga, records: ra },
        visual: StepOutput { loss: lv, grads: gv, records: rv },
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lossgate::aam::aam_loss;
    use crate::numkit::grad_check;

    fn setup(n: usize, seed: u64) -> (Classifier, StepBatch) {
        let mut cfg = EncoderConfig::new(6);
        cfg.hidden_dims = vec![10];
        cfg.embed_dim = 5;
        let rng = Rng::new(seed);
        let model = Classifier::init(&cfg, 4, &rng);
        let mut r = rng.split(9);
        let x1 = Tensor::matrix(n, 6, r.normal_vec(n * 6, 1.0));
        let x2 = Tensor::matrix(n, 6, r.normal_vec(n * 6, 1.0));
        let labels = (0..n).map(|i| i % 4).collect();
        (model, StepBatch { sample_ids: (100..100 + n).collect(), x1, x2, labels })
    }

    fn ctx(mode: SelectionMode) -> StepContext {
        StepContext { aam: AamConfig { scale: 5.0, margin: 0.2 }, mode, augment_std: 0.0, epoch: 1 }
    }

    #[test]
    fn open_gate_is_plain_aam_on_augmented_view() {
        let (model, batch) = setup(8, 1);
        let mut gate = GateState::default();
        let c = ctx(SelectionMode::DlgLc);
        let out = dlg_lc_step(&model, &batch, &mut gate, &c, &mut Rng::new(0)).unwrap();
        let emb = model.encoder.embed_rows(&batch.x2);
        let want: f64 = emb.iter().zip(&batch.labels).map(|(e, &y)| aam_loss(e, y, &model.head, &c.aam).unwrap().0).sum::<f64>() / 8.0;
        assert!((out.loss - want).abs() < 1e-10);
        assert!(out.records.iter().all(|r| r.branch == Branch::Reliable));
        assert_eq!(gate.loss_record.len(), 8);
    }

    #[test]
    fn closed_gate_contributes_nothing() {
        let (model, batch) = setup(8, 2);
        let mut gate = GateState { tau1: f64::NEG_INFINITY, tau2: 1.0, ..GateState::default() };
        let out = dlg_lc_step(&model, &batch, &mut gate, &ctx(SelectionMode::DlgLc), &mut Rng::new(0)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().flatten().all(|g| *g == 0.0));
        assert!(out.records.iter().all(|r| r.branch == Branch::Skipped));
    }

    #[test]
    fn mixed_batch_matches_hand_trace() {
        let (model, batch) = setup(8, 3);
        let c = ctx(SelectionMode::DlgLc);
        let stats = clean_pass(&model, &batch.x1, &batch.labels, &c.aam).unwrap();
        let mut logs: Vec<f64> = stats.losses.iter().map(|l| l.ln()).collect();
        logs.sort_by(f64::total_cmp);
        let tau1 = 0.5 * (logs[3] + logs[4]);
        let conf: Vec<f64> = stats.probs.iter().map(|p| max_conf(p)).collect();
        let mut sorted = conf.clone();
        sorted.sort_by(f64::total_cmp);
        let tau2 = 0.5 * (sorted[3] + sorted[4]);
        let mut gate = GateState { tau1, tau2, ..GateState::default() };
        let out = dlg_lc_step(&model, &batch, &mut gate, &c, &mut Rng::new(0)).unwrap();
        let mut want_loss = 0.0;
        let emb = model.encoder.embed_rows(&batch.x2);
        for i in 0..8 {
            let want = if stats.losses[i].ln() < tau1 {
                want_loss += aam_loss(&emb[i], batch.labels[i], &model.head, &c.aam).unwrap().0;
                Branch::Reliable
            } else if conf[i] > tau2 {
                let cos = model.head.cosines(&emb[i]).unwrap();
                let q: Vec<f64> = aam_log_probs(&cos, None, &c.aam).iter().map(|l| l.exp()).collect();
                want_loss += super::super::gate::lc_loss(&stats.probs[i], &q, &gate).unwrap().unwrap();
                Branch::Corrected
            } else {
                Branch::Skipped
            };
            assert_eq!(out.records[i].branch, want, "sample {i}");
        }
        assert!((out.loss - want_loss / 8.0).abs() < 1e-10);
    }

    #[test]
    fn clean_view_is_a_constant_target() {
        // Gradients must equal those of the augmented objective with the
        // targets frozen, i.e. nothing flows through the clean pathway.
        let (model, batch) = setup(6, 4);
        let c = ctx(SelectionMode::DlgLc);
        let stats = clean_pass(&model, &batch.x1, &batch.labels, &c.aam).unwrap();
        let mut logs: Vec<f64> = stats.losses.iter().map(|l| l.ln()).collect();
        logs.sort_by(f64::total_cmp);
        let mut gate = GateState { tau1: 0.5 * (logs[2] + logs[3]), tau2: 0.01, ..GateState::default() };
        let (_, targets) = plan_batch(&stats, &batch.labels, &gate, c.mode).unwrap();
        assert!(targets.iter().any(|t| matches!(t, RowTarget::Soft(_))));
        let out = dlg_lc_step(&model, &batch, &mut gate, &c, &mut Rng::new(0)).unwrap();
        let point: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        let f = |p: &[Tensor]| {
            let mut m = model.clone();
            for (dst, src) in m.params_mut().into_iter().zip(p) {
                dst.value = src.clone();
            }
            let (loss, grads) = augmented_objective(&m, &batch.x2, &targets, &c.aam, 6);
            Ok((loss, grads.into_iter().zip(p).map(|(g, t)| Tensor::new(t.shape().to_vec(), g).unwrap()).collect()))
        };
        assert!(grad_check(f, &point, 1e-6).unwrap() < 1e-4);
        let (_, frozen) = f(&point).unwrap();
        for (a, b) in out.grads.iter().zip(&frozen) {
            assert_eq!(a.as_slice(), b.values());
        }
    }

    #[test]
    fn paired_step_open_gate_matches_single() {
        let (audio, batch) = setup(5, 6);
        let (visual, _) = setup(5, 7);
        let c = ctx(SelectionMode::DlgLc);
        let (mut ga, mut gv) = (GateState::default(), GateState::default());
        let out = mm_dlg_lc_step(&audio, &visual, &batch, &batch, (&mut ga, &mut gv), &c, &mut Rng::new(1)).unwrap();
        assert!(out.decisions.iter().all(|d| *d == MmDecision::Reliable));
        let single = dlg_lc_step(&audio, &batch, &mut GateState::default(), &c, &mut Rng::new(1)).unwrap();
        assert!((out.audio.loss - single.loss).abs() < 1e-12);
        assert_eq!(ga.loss_record.len(), 5);
        assert_eq!(gv.loss_record.len(), 5);
    }
}

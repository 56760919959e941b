//! Stage II: training fresh encoders on pseudo-labels through the loss gate.

use serde::{Deserialize, Serialize};

use crate::dino::model::EncoderConfig;
use crate::dino::train::learning_rate;
use crate::error::{Error, Result};
use crate::lossgate::step::{dlg_lc_step, mm_dlg_lc_step, AuditRecord, Classifier, StepBatch, StepContext};
use crate::lossgate::{refresh_threshold, AamConfig, Branch, GateState, GateWarning, Gmm2, SelectionMode};
use crate::numkit::{Param, Rng, Sgd, Tensor};
use crate::synthworld::{sample_view, Modality, WorldView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Hyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub warmup_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: LrDecay,
}

/// Shape of the post-warmup decay from `lr` to `lr_final`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Cosine,
    Exponential,
}

impl Default for Stage2Hyper {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, lr: 0.1, lr_final: 1e-4, warmup_fraction: 0.1, momentum: 0.9, weight_decay: 5e-5, lr_decay: LrDecay::Exponential }
    }
}

impl Stage2Hyper {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Cosine => learning_rate(step, total, self.lr, self.lr_final, self.warmup_fraction),
            LrDecay::Exponential => {
                let warm = ((total as f64) * self.warmup_fraction).round() as usize;
                if step < warm {
                    return self.lr * (step + 1) as f64 / warm as f64;
                }
                let t = (step - warm) as f64 / (total - warm).max(1) as f64;
                self.lr * (self.lr_final / self.lr).powf(t.min(1.0))
            }
        }
    }
}

impl Stage2Hyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("stage2 batch_size must be >= 1");
        }
        if !(self.lr > 0.0) || !(self.lr_final >= 0.0) || (self.lr_decay == LrDecay::Exponential && !(self.lr_final > 0.0)) {
            return bad("stage2 learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("stage2 warmup_fraction, momentum must lie in [0, 1) and weight_decay >= 0");
        }
        Ok(())
    }
}

/// Per-modality training inputs for one Stage II run.
pub struct Track<'a> {
    pub modality: Modality,
    pub encoder: &'a EncoderConfig,
    /// Starting weights; `None` means fresh initialization.
    pub warm: Option<&'a Classifier>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub modality: Modality,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Threshold in force during the epoch (log domain).
    #[serde(with = "crate::numkit::lenient_f64")]
    pub tau1: f64,
    pub reliable_rate: f64,
    pub corrected_rate: f64,
    pub skipped_rate: f64,
    /// Label accuracy of the reliable subset; needs the truth sidecar.
    pub selected_precision: Option<f64>,
    /// Label accuracy over every sample; needs the truth sidecar.
    pub label_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRefresh {
    pub modality: Modality,
    pub epoch: usize,
    pub gmm: Option<Gmm2>,
    pub warning: Option<GateWarning>,
    #[serde(with = "crate::numkit::lenient_f64")]
    pub tau1: f64,
}

pub struct Stage2Outcome {
    pub models: Vec<Classifier>,
    pub gates: Vec<GateState>,
    pub epochs: Vec<Stage2Epoch>,
    pub refreshes: Vec<GateRefresh>,
    /// Audit records per modality, all epochs, in training order.
    pub audits: Vec<Vec<AuditRecord>>,
}

/// Everything a Stage II run needs besides the per-modality tracks.
pub struct Stage2Setup<'a> {
    pub view: &'a WorldView,
    pub labels: &'a [usize],
    pub num_classes: usize,
    pub gate: &'a GateState,
    pub aam: &'a AamConfig,
    pub mode: SelectionMode,
    pub hyper: &'a Stage2Hyper,
    /// Whether each training label is correct; evaluation only.
    pub label_correct: Option<&'a [bool]>,
}

fn batch_for(view: &WorldView, modality: Modality, ids: &[usize], labels: &[usize], rng: &Rng) -> StepBatch {
    let d = view.config.obs_dim(modality);
    let std = view.config.content_noise_std_long;
    let (mut x1, mut x2) = (Vec::with_capacity(ids.len() * d), Vec::with_capacity(ids.len() * d));
    for &u in ids {
        let mut r = rng.split(u as u64);
        let base = view.utterances[u].base(modality);
        x1.extend_from_slice(sample_view(base, std, 0.0, &mut r).values());
        x2.extend_from_slice(sample_view(base, std, 0.0, &mut r).values());
    }
    StepBatch {
        sample_ids: ids.to_vec(),
        x1: Tensor::matrix(ids.len(), d, x1),
        x2: Tensor::matrix(ids.len(), d, x2),
        labels: ids.iter().map(|&u| labels[u]).collect(),
    }
}

fn apply(model: &mut Classifier, opt: &mut Sgd, grads: &[Vec<f64>], lr: f64) {
    model.zero_grad();
    for (p, g) in model.params_mut().into_iter().zip(grads) {
        p.accumulate(g);
    }
    let mut params: Vec<&mut Param> = model.params_mut();
    opt.step(&mut params, lr);
}

fn summarize(modality: Modality, epoch: usize, loss: f64, lr: f64, tau1: f64, records: &[AuditRecord], correct: Option<&[bool]>) -> Stage2Epoch {
    let n = records.len().max(1) as f64;
    let count = |b: Branch| records.iter().filter(|r| r.branch == b).count() as f64;
    let (selected_precision, label_accuracy) = match correct {
        None => (None, None),
        Some(c) => {
            let rel: Vec<&AuditRecord> = records.iter().filter(|r| r.branch == Branch::Reliable).collect();
            let sp = (!rel.is_empty()).then(|| rel.iter().filter(|r| c[r.sample_id]).count() as f64 / rel.len() as f64);
            let acc = records.iter().filter(|r| c[r.sample_id]).count() as f64 / n;
            (sp, Some(acc))
        }
    };
    Stage2Epoch {
        modality,
        epoch,
        loss,
        lr,
        tau1,
        reliable_rate: count(Branch::Reliable) / n,
        corrected_rate: count(Branch::Corrected) / n,
        skipped_rate: count(Branch::Skipped) / n,
        selected_precision,
        label_accuracy,
    }
}

/// Trains one classifier per track; two tracks use the paired audio/visual
/// gate.
pub fn train_stage2(setup: &Stage2Setup, tracks: &[Track], rng: &Rng) -> Result<Stage2Outcome> {
    setup.hyper.validate()?;
    setup.aam.validate()?;
    setup.gate.validate()?;
    if tracks.is_empty() || tracks.len() > 2 {
        return Err(Error::InvalidConfig("stage2 takes one or two modality tracks".into()));
    }
    let view = setup.view;
    let n = view.len();
    if setup.labels.len() != n {
        return Err(Error::LengthMismatch(setup.labels.len(), n));
    }
    let mut models: Vec<Classifier> = tracks
        .iter()
        .enumerate()
        .map(|(i, t)| match t.warm {
            Some(m) => m.clone(),
            None => Classifier::init(t.encoder, setup.num_classes, &rng.split(10 + i as u64)),
        })
        .collect();
    for (m, t) in models.iter().zip(tracks) {
        if m.head.num_classes() != setup.num_classes || m.encoder.mlp.input_dim() != view.config.obs_dim(t.modality) {
            return Err(Error::InvalidConfig("stage2 model shape does not match the world or label count".into()));
        }
    }
    let mut opts: Vec<Sgd> = tracks.iter().map(|_| Sgd::new(setup.hyper.momentum, setup.hyper.weight_decay)).collect();
    let mut gates: Vec<GateState> = tracks.iter().map(|_| setup.gate.clone()).collect();
    let mut audits: Vec<Vec<AuditRecord>> = tracks.iter().map(|_| Vec::new()).collect();
    let (mut epochs, mut refreshes) = (Vec::new(), Vec::new());
    let steps_per_epoch = n.div_ceil(setup.hyper.batch_size);
    let total_steps = (setup.hyper.epochs * steps_per_epoch).max(1);
    let mut step = 0;

    for epoch in 0..setup.hyper.epochs {
        let order = rng.split(1_000 + epoch as u64).permutation(n);
        let mut epoch_records: Vec<Vec<AuditRecord>> = tracks.iter().map(|_| Vec::new()).collect();
        let mut loss_sum = vec![0.0; tracks.len()];
        let tau_before: Vec<f64> = gates.iter().map(|g| g.tau1).collect();
        let mut lr = 0.0;
        for (bi, ids) in order.chunks(setup.hyper.batch_size).enumerate() {
            let brng = rng.split(((epoch as u64) << 32) | ((bi as u64 + 1) << 8) | 7);
            let ctx = StepContext { aam: *setup.aam, mode: setup.mode, augment_std: view.config.augment_noise_std, epoch };
            lr = setup.hyper.lr_at(step, total_steps);
            let batches: Vec<StepBatch> =
                tracks.iter().enumerate().map(|(i, t)| batch_for(view, t.modality, ids, setup.labels, &brng.split(i as u64 + 1))).collect();
            let mut step_rng = brng.split(99);
            let outs = if tracks.len() == 1 {
                vec![dlg_lc_step(&models[0], &batches[0], &mut gates[0], &ctx, &mut step_rng)?]
            } else {
                let (ga, gv) = gates.split_at_mut(1);
                let o = mm_dlg_lc_step(&models[0], &models[1], &batches[0], &batches[1], (&mut ga[0], &mut gv[0]), &ctx, &mut step_rng)?;
                vec![o.audio, o.visual]
            };
            for (i, out) in outs.into_iter().enumerate() {
                if !out.loss.is_finite() {
                    return Err(Error::NonFiniteLoss);
                }
                apply(&mut models[i], &mut opts[i], &out.grads, lr);
                loss_sum[i] += out.loss * ids.len() as f64;
                epoch_records[i].extend(out.records);
            }
            step += 1;
        }
        for (i, t) in tracks.iter().enumerate() {
            epochs.push(summarize(t.modality, epoch, loss_sum[i] / n as f64, lr, tau_before[i], &epoch_records[i], setup.label_correct));
            let r = refresh_threshold(&mut gates[i]);
            refreshes.push(GateRefresh { modality: t.modality, epoch, gmm: r.gmm, warning: r.warning, tau1: gates[i].tau1 });
            audits[i].append(&mut epoch_records[i]);
        }
    }
    Ok(Stage2Outcome { models, gates, epochs, refreshes, audits })
}

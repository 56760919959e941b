//! Stage I: CA-DINO training loop.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{ce_pairs, consistency_pairs, ema_update, ModelState};
use super::model::{DinoNet, EncoderConfig};
use crate::clusterlab::{assign_pseudo_labels, KmeansConfig, LabelModality};
use crate::error::{Error, Result};
use crate::numkit::ops::softmax_slice;
use crate::numkit::{cosine_schedule, Rng, ScheduleSpec, Sgd, Tape, Tensor};
use crate::synthworld::{sample_crops, sample_crops_cluster_aware, CropSet, Modality, Utterance, WorldView, NUM_LONG, NUM_VIEWS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DinoHyper {
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub consistency_weight: f64,
    pub center_momentum: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub lr: f64,
    pub lr_final: f64,
    pub warmup_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ca_warmup_epochs: usize,
    pub ca_cluster_every: usize,
    pub ca_num_clusters: usize,
    pub include_self_pairs: bool,
}

impl Default for DinoHyper {
    fn default() -> Self {
        Self {
            teacher_temp: 0.04,
            student_temp: 0.1,
            consistency_weight: 1.0,
            center_momentum: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
            lr: 0.05,
            lr_final: 1e-5,
            warmup_fraction: 0.13,
            momentum: 0.9,
            weight_decay: 5e-5,
            epochs: 30,
            batch_size: 32,
            ca_warmup_epochs: 3,
            ca_cluster_every: 2,
            ca_num_clusters: 30,
            include_self_pairs: false,
        }
    }
}

impl DinoHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.teacher_temp > 0.0) || !(self.student_temp > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.consistency_weight >= 0.0) {
            return bad("consistency_weight must be >= 0");
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return bad("center_momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_start) || !(0.0..=1.0).contains(&self.ema_end) {
            return bad("ema endpoints must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.ca_cluster_every == 0 || self.ca_num_clusters == 0 {
            return bad("batch_size, ca_cluster_every and ca_num_clusters must be >= 1");
        }
        if !(self.lr >= 0.0) || !(self.lr_final >= 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("learning-rate settings out of range");
        }
        Ok(())
    }
}

/// Learning rate: linear warmup, then half-cosine decay to `lr_final`.
pub fn learning_rate(step: usize, total: usize, base: f64, final_lr: f64, warmup_fraction: f64) -> f64 {
    let warm = ((total as f64) * warmup_fraction).round() as usize;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let spec = ScheduleSpec { start: base, end: final_lr, total_steps: (total - warm).max(1) };
    cosine_schedule((step - warm).min(spec.total_steps), &spec).unwrap_or(final_lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DinoLossParts {
    pub total: f64,
    pub ce: f64,
    pub consistency: f64,
}

/// Teacher distributions (and raw logits) for the long views, rows `[2B, K]`.
pub fn teacher_outputs(teacher: &DinoNet, long_views: &Tensor, center: &[f64], teacher_temp: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let x = tape.constant(long_views);
    let out = teacher.forward_tape(&mut tape, x, false);
    let (_, k) = tape.shape(out.logits);
    let logits: Vec<Vec<f64>> = tape.value(out.logits).chunks(k).map(|r| r.to_vec()).collect();
    let probs = logits
        .iter()
        .map(|r| {
            let shifted: Vec<f64> = r.iter().zip(center).map(|(a, c)| a - c).collect();
            softmax_slice(&shifted, teacher_temp)
        })
        .collect();
    (probs, logits)
}

/// Batch-mean DINO loss for `B` crop sets and its gradient w.r.t. every student
/// parameter (in `DinoNet::params` order).
///
/// `student_views` rows are grouped per crop set, six rows each with the two
/// long views first; `teacher_probs` holds two rows per crop set.
pub fn student_loss_and_grads(
    student: &DinoNet,
    student_views: &Tensor,
    teacher_probs: &[Vec<f64>],
    hyper: &DinoHyper,
) -> (DinoLossParts, Vec<Vec<f64>>) {
    let b = student_views.rows() / NUM_VIEWS;
    assert_eq!(teacher_probs.len(), b * NUM_LONG, "two teacher rows per crop set");
    let mut tape = Tape::new();
    let x = tape.constant(student_views);
    let out = student.forward_tape(&mut tape, x, true);
    let (_, k) = tape.shape(out.logits);
    let inv_b = 1.0 / b as f64;

    let logp = tape.log_softmax_rows(out.logits, hyper.student_temp);
    let mut targets = vec![0.0; b * NUM_VIEWS * k];
    for set in 0..b {
        for (t, s) in ce_pairs(hyper.include_self_pairs) {
            let row = &mut targets[(set * NUM_VIEWS + s) * k..(set * NUM_VIEWS + s + 1) * k];
            row.iter_mut().zip(&teacher_probs[set * NUM_LONG + t]).for_each(|(a, p)| *a += p * inv_b);
        }
    }
    let ce = tape.cross_entropy(logp, targets);

    let emb = tape.normalize_rows(out.embeddings);
    let pairs: Vec<(usize, usize)> = (0..b)
        .flat_map(|set| consistency_pairs().into_iter().map(move |(e, f)| (set * NUM_VIEWS + e, set * NUM_VIEWS + f)))
        .collect();
    let num_pairs = pairs.len() as f64;
    let dots = tape.pair_dots(emb, pairs);
    let cos_sum = tape.sum(dots);
    // consistency = (P − Σcos) / B; the constant does not affect gradients
    let neg = tape.scale(cos_sum, -hyper.consistency_weight * inv_b);
    let loss = tape.add(ce, neg);
    let grads = tape.backward(loss);

    let ce_v = tape.scalar(ce);
    let cons_v = (num_pairs - tape.scalar(cos_sum)) * inv_b;
    let parts = DinoLossParts { total: ce_v + hyper.consistency_weight * cons_v, ce: ce_v, consistency: cons_v };
    let g = out
        .handles
        .iter()
        .map(|&h| grads.get_slice(h).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(h).len()]))
        .collect();
    (parts, g)
}

/// Stacks crop sets into student rows `[6B, d]` and teacher rows `[2B, d]`.
pub fn stack_views(sets: &[CropSet]) -> (Tensor, Tensor) {
    let d = sets[0].long[0].len();
    let mut s = Vec::with_capacity(sets.len() * NUM_VIEWS * d);
    let mut t = Vec::with_capacity(sets.len() * NUM_LONG * d);
    for cs in sets {
        cs.views().for_each(|v| s.extend_from_slice(v.values()));
        cs.long.iter().for_each(|v| t.extend_from_slice(v.values()));
    }
    (Tensor::matrix(sets.len() * NUM_VIEWS, d, s), Tensor::matrix(sets.len() * NUM_LONG, d, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub consistency: f64,
    pub lr: f64,
    pub ema_momentum: f64,
    pub cluster_aware: bool,
}

/// Teacher-encoder embeddings of every utterance base.
pub fn teacher_embeddings(state: &ModelState, view: &WorldView, modality: Modality) -> Vec<Vec<f64>> {
    let bases: Vec<&Tensor> = view.utterances.iter().map(|u| u.base(modality)).collect();
    state.teacher.encoder.embed_all(&bases)
}

fn sample_batch(
    batch: &[usize],
    view: &WorldView,
    modality: Modality,
    clusters: Option<(&[usize], &[Vec<usize>])>,
    crop_rng: &Rng,
) -> Result<Vec<CropSet>> {
    let make = |&u: &usize| -> Result<CropSet> {
        let mut rng = crop_rng.split(u as u64);
        let utt = &view.utterances[u];
        match clusters {
            None => Ok(sample_crops(utt, modality, &view.config, &mut rng)),
            Some((labels, members)) => {
                let m: Vec<&Utterance> = members[labels[u]].iter().map(|&i| &view.utterances[i]).collect();
                sample_crops_cluster_aware(&m, modality, &view.config, &mut rng)
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        batch.par_iter().map(make).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(make).collect()
    }
}

/// Trains a student/teacher pair on one modality of a truth-free world.
pub fn train_stage1(
    view: &WorldView,
    modality: Modality,
    cfg: &EncoderConfig,
    hyper: &DinoHyper,
    rng: &Rng,
) -> Result<(ModelState, Vec<Stage1Epoch>)> {
    cfg.validate()?;
    hyper.validate()?;
    if cfg.input_dim != view.config.obs_dim(modality) {
        return Err(Error::InvalidConfig(format!("encoder input_dim {} does not match {} observations", cfg.input_dim, modality.name())));
    }
    let mut state = ModelState::new(DinoNet::init(cfg, &mut rng.split(0)));
    let n = view.len();
    let steps_per_epoch = n.div_ceil(hyper.batch_size);
    let total_steps = (hyper.epochs * steps_per_epoch).max(1);
    let ema_spec = ScheduleSpec { start: hyper.ema_start, end: hyper.ema_end, total_steps };
    let mut opt = Sgd::new(hyper.momentum, hyper.weight_decay);
    let mut clusters: Option<(Vec<usize>, Vec<Vec<usize>>)> = None;
    let mut rows = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        if epoch >= hyper.ca_warmup_epochs && (epoch - hyper.ca_warmup_epochs) % hyper.ca_cluster_every == 0 {
            let embs = teacher_embeddings(&state, view, modality);
            let k = hyper.ca_num_clusters.min(n);
            let store = assign_pseudo_labels(&embs, k, LabelModality::Audio, 0, &mut rng.split(2_000 + epoch as u64), &KmeansConfig::default())?;
            let members = store.members();
            clusters = Some((store.labels, members));
        }
        let order = rng.split(1_000 + epoch as u64).permutation(n);
        let (mut sum_total, mut sum_ce, mut sum_cons, mut lr) = (0.0, 0.0, 0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(hyper.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let crop_rng = rng.split(((epoch as u64) << 32) | (bi as u64 + 1) << 8 | 3);
            let sets = sample_batch(batch, view, modality, clusters.as_ref().map(|(l, m)| (l.as_slice(), m.as_slice())), &crop_rng)?;
            let (student_views, long_views) = stack_views(&sets);
            let (tprobs, tlogits) = teacher_outputs(&state.teacher, &long_views, &state.center, hyper.teacher_temp);
            let (parts, grads) = student_loss_and_grads(&state.student, &student_views, &tprobs, hyper);
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            state.student.zero_grad();
            for (p, g) in state.student.params_mut().into_iter().zip(&grads) {
                p.accumulate(g);
            }
            lr = learning_rate(state.step, total_steps, hyper.lr, hyper.lr_final, hyper.warmup_fraction);
            opt.step(&mut state.student.params_mut(), lr);
            let lambda = cosine_schedule((state.step + 1).min(total_steps), &ema_spec)?;
            ema_update(&mut state, lambda);
            let rows_ref: Vec<&[f64]> = tlogits.iter().map(|r| r.as_slice()).collect();
            state.center = super::loss::update_center(&state.center, &rows_ref, hyper.center_momentum)?;
            state.step += 1;
            sum_total += parts.total;
            sum_ce += parts.ce;
            sum_cons += parts.consistency;
        }
        let nb = batches.len() as f64;
        rows.push(Stage1Epoch {
            epoch,
            loss: sum_total / nb,
            ce: sum_ce / nb,
            consistency: sum_cons / nb,
            lr,
            ema_momentum: cosine_schedule(state.step.min(total_steps), &ema_spec)?,
            cluster_aware: clusters.is_some(),
        });
    }
    Ok((state, rows))
}

//! Stage I → cluster → Stage II → re-cluster, with optional persistence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ModalityMode, RunConfig};
use super::report::{ReportRow, RunReport};
use super::stage2::{train_stage2, Stage2Outcome, Stage2Setup, Track};
use crate::clusterlab::{assign_pseudo_labels, joint_embeddings, LabelModality, PseudoLabelStore};
use crate::dino::{train_stage1, DinoHyper, EncoderConfig, ModelState};
use crate::error::{Error, Result};
use crate::evalkit::{compute_eer, compute_mindcf, nmi, purity, score_trials, DcfConfig};
use crate::lossgate::step::{AuditRecord, Classifier};
use crate::lossgate::GateState;
use crate::numkit::{Rng, Tensor};
use crate::synthworld::{corrupt_labels, Modality, TruthMap, WorldView};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

pub fn modalities(mode: ModalityMode) -> Vec<Modality> {
    match mode {
        ModalityMode::AudioOnly => vec![Modality::Audio],
        ModalityMode::AudioVisual => vec![Modality::Audio, Modality::Visual],
    }
}

fn encoder_cfg(cfg: &RunConfig, m: Modality) -> &EncoderConfig {
    match m {
        Modality::Audio => &cfg.encoder_audio,
        Modality::Visual => &cfg.encoder_visual,
    }
}

/// Models whose embeddings drive the next clustering.
#[derive(Debug, Clone, PartialEq)]
pub enum Models {
    Stage1(Vec<ModelState>),
    Stage2(Vec<Classifier>),
}

impl Models {
    /// Embeddings of every utterance base, one list per modality.
    pub fn embeddings(&self, view: &WorldView, modalities: &[Modality]) -> Vec<Vec<Vec<f64>>> {
        modalities
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let bases: Vec<&Tensor> = view.utterances.iter().map(|u| u.base(m)).collect();
                match self {
                    Models::Stage1(s) => s[i].teacher.encoder.embed_all(&bases),
                    Models::Stage2(c) => c[i].encoder.embed_all(&bases),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Checkpoint {
    pub version: u32,
    pub modality: Modality,
    pub encoder: EncoderConfig,
    pub hyper: DinoHyper,
    pub state: ModelState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Checkpoint {
    pub version: u32,
    pub iteration: usize,
    pub modality: Modality,
    pub encoder: EncoderConfig,
    pub model: Classifier,
    pub gate: GateState,
}

#[derive(Clone)]
pub struct Stage1Output {
    pub states: Vec<ModelState>,
    pub rows: Vec<ReportRow>,
    pub started: std::time::Instant,
}

/// Independent DINO pretraining per modality.
pub fn run_stage1(cfg: &RunConfig, view: &WorldView) -> Result<Stage1Output> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let root = Rng::new(cfg.seed);
    let mods = modalities(cfg.modality_mode);
    let mut states = Vec::new();
    let mut per_mod = Vec::new();
    for (i, &m) in mods.iter().enumerate() {
        let (state, rows) = train_stage1(view, m, encoder_cfg(cfg, m), &cfg.dino, &root.split(10 + i as u64))?;
        states.push(state);
        per_mod.push(rows);
    }
    let mut rows = Vec::new();
    for e in 0..cfg.dino.epochs {
        for (i, &m) in mods.iter().enumerate() {
            rows.push(ReportRow::Stage1Epoch { iteration: 0, modality: m, row: per_mod[i][e].clone() });
        }
    }
    Ok(Stage1Output { states, rows, started })
}

/// Pseudo-labels from one set of models. In audio-visual mode `store` is the
/// joint clustering and `audio_only` the audio clustering kept for
/// comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub store: PseudoLabelStore,
    pub audio_only: Option<PseudoLabelStore>,
}

pub fn cluster_embeddings(cfg: &RunConfig, embs: &[Vec<Vec<f64>>], iteration: usize) -> Result<Clustering> {
    let rng = Rng::new(cfg.seed).split(500 + iteration as u64);
    let k = cfg.num_clusters;
    let audio = assign_pseudo_labels(&embs[0], k, LabelModality::Audio, iteration, &mut rng.split(1), &cfg.kmeans)?;
    match cfg.modality_mode {
        ModalityMode::AudioOnly => Ok(Clustering { store: audio, audio_only: None }),
        ModalityMode::AudioVisual => {
            let joint = joint_embeddings(&embs[0], &embs[1])?;
            let store = assign_pseudo_labels(&joint, k, LabelModality::Joint, iteration, &mut rng.split(2), &cfg.kmeans)?;
            Ok(Clustering { store, audio_only: Some(audio) })
        }
    }
}

fn metric_row(cfg_hash: &str, iteration: usize, metric: &str, modality: &str, value: f64) -> ReportRow {
    ReportRow::Metric { iteration, metric: metric.into(), value, modality: modality.into(), config_hash: cfg_hash.into() }
}

/// Verification metrics per modality (when the view has trials) and
/// clustering metrics (when truth is supplied).
pub fn evaluate(
    cfg: &RunConfig,
    view: &WorldView,
    truth: Option<&TruthMap>,
    embs: &[Vec<Vec<f64>>],
    clustering: &Clustering,
    iteration: usize,
) -> Result<Vec<ReportRow>> {
    let hash = cfg.hash();
    let mut rows = Vec::new();
    if let Some(trials) = &view.trials {
        for (e, m) in embs.iter().zip(modalities(cfg.modality_mode)) {
            let st = score_trials(e, trials)?;
            rows.push(metric_row(&hash, iteration, "eer", m.name(), compute_eer(&st)?.0));
            rows.push(metric_row(&hash, iteration, "min_dcf", m.name(), compute_mindcf(&st, &DcfConfig::default())?));
        }
    }
    if let Some(t) = truth {
        let mut stores = vec![&clustering.store];
        stores.extend(clustering.audio_only.as_ref());
        for s in stores {
            let name = match s.modality {
                LabelModality::Audio => "audio",
                LabelModality::Visual => "visual",
                LabelModality::Joint => "joint",
            };
            rows.push(metric_row(&hash, iteration, "nmi", name, nmi(&s.labels, t.labels())?));
            rows.push(metric_row(&hash, iteration, "purity", name, purity(&s.labels, t.labels())?));
        }
    }
    Ok(rows)
}

/// Whether each label agrees with the truth identity its cluster mostly
/// holds.
pub fn label_correctness(labels: &[usize], truth: &[usize]) -> Vec<bool> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let c = truth.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; c]; k];
    for (&l, &t) in labels.iter().zip(truth) {
        counts[l][t] += 1;
    }
    let majority: Vec<usize> = counts.iter().map(|row| (0..c).max_by_key(|&j| (row[j], std::cmp::Reverse(j))).unwrap_or(0)).collect();
    labels.iter().zip(truth).map(|(&l, &t)| majority[l] == t).collect()
}

pub struct IterationOutput {
    pub iteration: usize,
    /// Labels actually trained on, after noise injection.
    pub train_labels: Vec<usize>,
    pub noise_mask: Vec<bool>,
    pub stage2: Stage2Outcome,
    pub rows: Vec<ReportRow>,
}

/// One Stage II round on `labels`. `warm` seeds the encoders when warm
/// starts are enabled.
pub fn run_iteration(
    cfg: &RunConfig,
    view: &WorldView,
    truth: Option<&TruthMap>,
    labels: &PseudoLabelStore,
    warm: Option<&[Classifier]>,
    iteration: usize,
) -> Result<IterationOutput> {
    cfg.validate()?;
    if labels.labels.len() != view.len() {
        return Err(Error::LengthMismatch(labels.labels.len(), view.len()));
    }
    let rng = Rng::new(cfg.seed).split(100 + iteration as u64);
    let k = labels.num_clusters;
    let (train_labels, noise_mask) = if cfg.label_noise_rate > 0.0 {
        corrupt_labels(&labels.labels, cfg.label_noise_rate, k, &mut rng.split(1))?
    } else {
        (labels.labels.clone(), vec![false; labels.labels.len()])
    };
    let correct = truth.map(|t| label_correctness(&train_labels, t.labels()));
    let mods = modalities(cfg.modality_mode);
    let warm = if cfg.warm_start { warm } else { None };
    let tracks: Vec<Track> = mods
        .iter()
        .enumerate()
        .map(|(i, &m)| Track { modality: m, encoder: encoder_cfg(cfg, m), warm: warm.and_then(|w| w.get(i)) })
        .collect();
    let setup = Stage2Setup {
        view,
        labels: &train_labels,
        num_classes: k,
        gate: &cfg.gate,
        aam: &cfg.aam,
        mode: cfg.selection_mode,
        hyper: &cfg.stage2,
        label_correct: correct.as_deref(),
    };
    let stage2 = train_stage2(&setup, &tracks, &rng.split(2))?;
    let mut rows = Vec::new();
    let per_epoch = mods.len();
    for e in 0..cfg.stage2.epochs {
        for j in 0..per_epoch {
            rows.push(ReportRow::Stage2Epoch { iteration, row: stage2.epochs[e * per_epoch + j].clone() });
        }
        for j in 0..per_epoch {
            rows.push(ReportRow::Gmm { iteration, row: stage2.refreshes[e * per_epoch + j].clone() });
        }
    }
    Ok(IterationOutput { iteration, train_labels, noise_mask, stage2, rows })
}

/// Output directory layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "labels", "loss_records", "plots"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn world(&self) -> PathBuf {
        self.root.join("world.json")
    }

    pub fn truth(&self) -> PathBuf {
        self.root.join("truth.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.jsonl")
    }

    pub fn stage1_checkpoint(&self, m: Modality) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage1_{}.json", m.name()))
    }

    pub fn iteration_checkpoint(&self, iteration: usize, m: Modality) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter{iteration}_{}.json", m.name()))
    }

    /// Labels produced by clustering the models of `iteration`.
    pub fn labels(&self, iteration: usize) -> PathBuf {
        self.root.join("labels").join(format!("iter{iteration}.json"))
    }

    pub fn loss_records(&self, iteration: usize, m: Modality) -> PathBuf {
        self.root.join("loss_records").join(format!("iter{iteration}_{}.csv", m.name()))
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn save_stage1(&self, cfg: &RunConfig, states: &[ModelState]) -> Result<()> {
        for (s, m) in states.iter().zip(modalities(cfg.modality_mode)) {
            let ck = Stage1Checkpoint { version: CHECKPOINT_SCHEMA_VERSION, modality: m, encoder: encoder_cfg(cfg, m).clone(), hyper: cfg.dino.clone(), state: s.clone() };
            write_json(&self.stage1_checkpoint(m), &ck)?;
        }
        Ok(())
    }

    pub fn load_stage1(&self, cfg: &RunConfig) -> Result<Vec<ModelState>> {
        modalities(cfg.modality_mode).into_iter().map(|m| Ok(read_json::<Stage1Checkpoint>(&self.stage1_checkpoint(m))?.state)).collect()
    }

    pub fn save_iteration(&self, cfg: &RunConfig, out: &IterationOutput) -> Result<()> {
        let mods = modalities(cfg.modality_mode);
        for (i, &m) in mods.iter().enumerate() {
            let ck = Stage2Checkpoint {
                version: CHECKPOINT_SCHEMA_VERSION,
                iteration: out.iteration,
                modality: m,
                encoder: encoder_cfg(cfg, m).clone(),
                model: out.stage2.models[i].clone(),
                gate: out.stage2.gates[i].clone(),
            };
            write_json(&self.iteration_checkpoint(out.iteration, m), &ck)?;
            write_audit_csv(&self.loss_records(out.iteration, m), &out.stage2.audits[i])?;
        }
        Ok(())
    }

    pub fn load_iteration(&self, cfg: &RunConfig, iteration: usize) -> Result<Vec<Classifier>> {
        modalities(cfg.modality_mode)
            .into_iter()
            .map(|m| Ok(read_json::<Stage2Checkpoint>(&self.iteration_checkpoint(iteration, m))?.model))
            .collect()
    }

    /// Models produced by `iteration` (0 is Stage I).
    pub fn load_models(&self, cfg: &RunConfig, iteration: usize) -> Result<Models> {
        if iteration == 0 {
            Ok(Models::Stage1(self.load_stage1(cfg)?))
        } else {
            Ok(Models::Stage2(self.load_iteration(cfg, iteration)?))
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, value)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct AuditCsvRow {
    epoch: usize,
    sample_id: usize,
    log_loss: f64,
    branch: String,
    tau1: f64,
    max_conf: f64,
}

pub fn write_audit_csv(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(AuditCsvRow {
            epoch: r.epoch,
            sample_id: r.sample_id,
            log_loss: r.log_loss,
            branch: r.branch.name().into(),
            tau1: r.tau1,
            max_conf: r.max_conf,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// `(epoch, sample_id, log_loss, branch)` rows of a loss-record file.
pub fn read_audit_csv(path: &Path) -> Result<Vec<(usize, usize, f64, String)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: AuditCsvRow = row?;
        out.push((row.epoch, row.sample_id, row.log_loss, row.branch));
    }
    Ok(out)
}

pub struct RunOutput {
    pub stage1: Vec<ModelState>,
    pub iterations: Vec<IterationOutput>,
    /// Clustering of the models of iteration `i` (0 is Stage I).
    pub clusterings: Vec<Clustering>,
    pub report: RunReport,
}

impl RunOutput {
    pub fn final_models(&self) -> Models {
        match self.iterations.last() {
            Some(it) => Models::Stage2(it.stage2.models.clone()),
            None => Models::Stage1(self.stage1.clone()),
        }
    }
}

/// Stage I, then `num_iterations` Stage II rounds, each followed by
/// evaluation and re-clustering. Everything is written to `out` when given.
pub fn run_full(cfg: &RunConfig, view: &WorldView, truth: Option<&TruthMap>, out: Option<&RunDir>) -> Result<RunOutput> {
    let s1 = run_stage1(cfg, view)?;
    run_from_stage1(cfg, view, truth, out, s1)
}

/// [`run_full`] continued from existing Stage I results.
pub fn run_from_stage1(cfg: &RunConfig, view: &WorldView, truth: Option<&TruthMap>, out: Option<&RunDir>, s1: Stage1Output) -> Result<RunOutput> {
    cfg.validate()?;
    let mods = modalities(cfg.modality_mode);
    let mut report = RunReport::since(s1.started);
    let mut written = 0;
    let mut flush = |report: &RunReport| -> Result<()> {
        if let Some(d) = out {
            report.append_to(&d.report(), written)?;
            written = report.lines.len();
        }
        Ok(())
    };
    report.extend(s1.rows);
    let models = Models::Stage1(s1.states.clone());
    let embs = models.embeddings(view, &mods);
    let clustering = cluster_embeddings(cfg, &embs, 0)?;
    report.extend(evaluate(cfg, view, truth, &embs, &clustering, 0)?);
    if let Some(d) = out {
        d.save_stage1(cfg, &s1.states)?;
        clustering.store.save(&d.labels(0))?;
    }
    flush(&report)?;

    let mut clusterings = vec![clustering];
    let mut iterations: Vec<IterationOutput> = Vec::new();
    for it in 1..=cfg.num_iterations {
        let prev = iterations.last().map(|o| o.stage2.models.as_slice());
        let result = run_iteration(cfg, view, truth, &clusterings[it - 1].store, prev, it)?;
        report.extend(result.rows.clone());
        let models = Models::Stage2(result.stage2.models.clone());
        let embs = models.embeddings(view, &mods);
        let clustering = cluster_embeddings(cfg, &embs, it)?;
        report.extend(evaluate(cfg, view, truth, &embs, &clustering, it)?);
        if let Some(d) = out {
            d.save_iteration(cfg, &result)?;
            clustering.store.save(&d.labels(it))?;
        }
        flush(&report)?;
        clusterings.push(clustering);
        iterations.push(result);
    }
    Ok(RunOutput { stage1: s1.states, iterations, clusterings, report })
}

//! `dlglc` command-line interface.
//!
//! Exit codes: 0 success, 1 invalid configuration or runtime failure,
//! 2 missing inputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use super::config::RunConfig;
use super::report::{ReportRow, RunReport};
use super::run::{
    cluster_embeddings, evaluate, modalities, read_audit_csv, read_json, run_from_stage1, run_iteration, run_stage1, Models, RunDir, Stage1Checkpoint,
    Stage2Checkpoint,
};
use crate::clusterlab::PseudoLabelStore;
use crate::error::{Error, Result};
use crate::evalkit::{compute_eer, compute_mindcf, score_trials, DcfConfig};
use crate::numkit::{Rng, Tensor};
use crate::synthworld::{generate_world, make_trials, Modality, TruthMap, WorldView};

#[derive(Debug, Parser)]
#[command(name = "dlglc", version, about = "Self-supervised speaker embedding pipeline with a dynamic loss gate")]
pub struct Cli {
    /// TOML run configuration; defaults to the run directory's snapshot.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Ground-truth identities; enables clustering and selection metrics.
    #[arg(long, global = true)]
    pub truth_sidecar: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world, its trial list and the truth sidecar.
    GenWorld,
    /// Stage I pretraining and the initial clustering.
    Pretrain,
    /// One Stage II round on the labels of the previous round.
    Iterate {
        #[arg(long)]
        iteration: usize,
    },
    /// World generation, Stage I and every configured Stage II round.
    Run,
    /// Score the trial list with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write plot-ready CSV files from a finished run.
    Report {
        /// Run directory; defaults to `--out`.
        dir: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingInput(_) => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli, dir: &RunDir) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(Error::MissingInput(p.display().to_string())),
        Some(p) => RunConfig::load(p)?,
        None if dir.config().exists() => RunConfig::load(&dir.config())?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_truth(cli: &Cli) -> Result<Option<TruthMap>> {
    cli.truth_sidecar.as_deref().map(read_json::<TruthMap>).transpose()
}

/// Generates the world with its trials and writes world, truth and config.
pub fn gen_world(cfg: &RunConfig, dir: &RunDir) -> Result<WorldView> {
    let mut world = generate_world(&cfg.world)?;
    let trials = make_trials(&world, cfg.trials.targets, cfg.trials.nontargets, &mut Rng::new(cfg.world.seed).split(77))?;
    world.set_trials(trials);
    std::fs::write(dir.config(), cfg.to_toml()?)?;
    let (view, truth) = world.into_parts();
    view.save(&dir.world())?;
    super::run::write_json(&dir.truth(), &truth)?;
    Ok(view)
}

fn load_world(dir: &RunDir) -> Result<WorldView> {
    if !dir.world().exists() {
        return Err(Error::MissingInput(dir.world().display().to_string()));
    }
    WorldView::load(&dir.world())
}

fn fresh_report(dir: &RunDir) -> Result<()> {
    if dir.report().exists() {
        std::fs::remove_file(dir.report())?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    if let Command::Report { dir } = &cli.command {
        return write_plots(dir.as_deref().unwrap_or(&cli.out));
    }
    if let Command::Eval { checkpoint } = &cli.command {
        let ck = checkpoint.as_deref().ok_or_else(|| Error::MissingInput("--checkpoint".into()))?;
        return eval_checkpoint(&cli.out, ck);
    }
    let dir = RunDir::create(&cli.out)?;
    let cfg = load_config(cli, &dir)?;
    match &cli.command {
        Command::GenWorld => {
            gen_world(&cfg, &dir)?;
        }
        Command::Pretrain => {
            let view = load_world(&dir)?;
            let truth = load_truth(cli)?;
            fresh_report(&dir)?;
            std::fs::write(dir.config(), cfg.to_toml()?)?;
            let s1 = run_stage1(&cfg, &view)?;
            let mut report = RunReport::since(s1.started);
            report.extend(s1.rows);
            let embs = Models::Stage1(s1.states.clone()).embeddings(&view, &modalities(cfg.modality_mode));
            let clustering = cluster_embeddings(&cfg, &embs, 0)?;
            report.extend(evaluate(&cfg, &view, truth.as_ref(), &embs, &clustering, 0)?);
            dir.save_stage1(&cfg, &s1.states)?;
            clustering.store.save(&dir.labels(0))?;
            report.append_to(&dir.report(), 0)?;
        }
        Command::Iterate { iteration } => {
            if *iteration == 0 {
                return Err(Error::InvalidConfig("iterations are numbered from 1; use pretrain for Stage I".into()));
            }
            let view = load_world(&dir)?;
            let truth = load_truth(cli)?;
            let labels_path = dir.labels(iteration - 1);
            if !labels_path.exists() {
                return Err(Error::MissingInput(labels_path.display().to_string()));
            }
            let labels = PseudoLabelStore::load(&labels_path)?;
            let warm = if cfg.warm_start && *iteration > 1 { Some(dir.load_iteration(&cfg, iteration - 1)?) } else { None };
            let out = run_iteration(&cfg, &view, truth.as_ref(), &labels, warm.as_deref(), *iteration)?;
            let mut report = RunReport::default();
            report.extend(out.rows.clone());
            let embs = Models::Stage2(out.stage2.models.clone()).embeddings(&view, &modalities(cfg.modality_mode));
            let clustering = cluster_embeddings(&cfg, &embs, *iteration)?;
            report.extend(evaluate(&cfg, &view, truth.as_ref(), &embs, &clustering, *iteration)?);
            dir.save_iteration(&cfg, &out)?;
            clustering.store.save(&dir.labels(*iteration))?;
            report.append_to(&dir.report(), 0)?;
        }
        Command::Run => {
            let view = gen_world(&cfg, &dir)?;
            let truth = load_truth(cli)?;
            fresh_report(&dir)?;
            let s1 = run_stage1(&cfg, &view)?;
            run_from_stage1(&cfg, &view, truth.as_ref(), Some(&dir), s1)?;
        }
        Command::Eval { .. } | Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalLine {
    modality: Modality,
    eer: f64,
    eer_threshold: f64,
    min_dcf: f64,
}

fn eval_checkpoint(out: &Path, checkpoint: &Path) -> Result<()> {
    if !checkpoint.exists() {
        return Err(Error::MissingInput(checkpoint.display().to_string()));
    }
    let view = load_world(&RunDir { root: out.to_path_buf() })?;
    let text = std::fs::read_to_string(checkpoint)?;
    let (modality, encoder) = if let Ok(ck) = serde_json::from_str::<Stage2Checkpoint>(&text) {
        (ck.modality, ck.model.encoder)
    } else {
        let ck: Stage1Checkpoint = serde_json::from_str(&text)?;
        (ck.modality, ck.state.teacher.encoder)
    };
    let trials = view.trials.as_ref().ok_or_else(|| Error::MissingInput("trial list in world.json".into()))?;
    let bases: Vec<&Tensor> = view.utterances.iter().map(|u| u.base(modality)).collect();
    let st = score_trials(&encoder.embed_all(&bases), trials)?;
    let (eer, eer_threshold) = compute_eer(&st)?;
    let line = EvalLine { modality, eer, eer_threshold, min_dcf: compute_mindcf(&st, &DcfConfig::default())? };
    println!("{}", serde_json::to_string(&line)?);
    Ok(())
}

pub const HISTOGRAM_BINS: usize = 40;

#[derive(Serialize)]
struct LossValueRow<'a> {
    iteration: usize,
    modality: &'a str,
    epoch: usize,
    sample_id: usize,
    log_loss: f64,
    branch: &'a str,
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    iteration: usize,
    modality: &'a str,
    epoch: usize,
    bin: usize,
    lo: f64,
    hi: f64,
    count: usize,
}

#[derive(Serialize)]
struct MetricCsvRow<'a> {
    iteration: usize,
    modality: &'a str,
    metric: &'a str,
    value: f64,
}

/// Loss values, per-epoch histograms, GMM parameters and metric
/// trajectories as CSV under `plots/`.
pub fn write_plots(dir: &Path) -> Result<()> {
    let run = RunDir { root: dir.to_path_buf() };
    if !run.report().exists() {
        return Err(Error::MissingInput(run.report().display().to_string()));
    }
    std::fs::create_dir_all(run.plots())?;
    let lines = RunReport::read(&run.report())?;

    let mut metrics = csv::Writer::from_path(run.plots().join("metrics.csv"))?;
    let mut gmm = csv::Writer::from_path(run.plots().join("gmm.csv"))?;
    gmm.write_record(["iteration", "modality", "epoch", "weight1", "weight2", "mean1", "mean2", "var1", "var2", "tau1", "warning"])?;
    for line in &lines {
        match &line.row {
            ReportRow::Metric { iteration, metric, value, modality, .. } => {
                metrics.serialize(MetricCsvRow { iteration: *iteration, modality, metric, value: *value })?;
            }
            ReportRow::Gmm { iteration, row } => {
                let g = row.gmm.map(|g| [g.weight1, g.weight2, g.mean1, g.mean2, g.var1, g.var2].map(|v| v.to_string()));
                let mut rec = vec![iteration.to_string(), row.modality.name().to_string(), row.epoch.to_string()];
                rec.extend(g.unwrap_or_default().into_iter().chain(std::iter::repeat(String::new())).take(6));
                rec.push(row.tau1.to_string());
                rec.push(row.warning.map(|w| format!("{w:?}")).unwrap_or_default());
                gmm.write_record(&rec)?;
            }
            _ => {}
        }
    }
    metrics.flush()?;
    gmm.flush()?;

    let mut values = csv::Writer::from_path(run.plots().join("loss_values.csv"))?;
    let mut hist = csv::Writer::from_path(run.plots().join("loss_histogram.csv"))?;
    for (iteration, modality, path) in loss_record_files(&run)? {
        let rows = read_audit_csv(&path)?;
        let mut by_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (epoch, sample_id, log_loss, branch) in &rows {
            values.serialize(LossValueRow { iteration, modality: &modality, epoch: *epoch, sample_id: *sample_id, log_loss: *log_loss, branch })?;
            by_epoch.entry(*epoch).or_default().push(*log_loss);
        }
        for (epoch, xs) in by_epoch {
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let width = ((hi - lo) / HISTOGRAM_BINS as f64).max(f64::MIN_POSITIVE);
            let mut counts = [0usize; HISTOGRAM_BINS];
            for x in &xs {
                counts[(((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1)] += 1;
            }
            for (bin, &count) in counts.iter().enumerate() {
                let b_lo = lo + bin as f64 * width;
                hist.serialize(HistogramRow { iteration, modality: &modality, epoch, bin, lo: b_lo, hi: b_lo + width, count })?;
            }
        }
    }
    values.flush()?;
    hist.flush()?;
    Ok(())
}

/// `(iteration, modality, path)` for every `loss_records/iter<k>_<modality>.csv`.
fn loss_record_files(run: &RunDir) -> Result<Vec<(usize, String, PathBuf)>> {
    let mut out = Vec::new();
    let dir = run.root.join("loss_records");
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Some((it, modality)) = stem.strip_prefix("iter").and_then(|r| r.split_once('_')) else { continue };
        if let Ok(it) = it.parse() {
            out.push((it, modality.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

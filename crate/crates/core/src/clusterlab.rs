//! k-means over embeddings, joint audio-visual embeddings, and the pseudo
//! label store shared by both training stages.

use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::ops::l2_normalize_slice;
use crate::numkit::{Exec, Rng};

pub const LABEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmeansConfig {
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self { max_iters: 100, restarts: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd update of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest centroid for every point, ties to the lowest index.
pub fn assign_points(points: &[Vec<f64>], centroids: &[Vec<f64>], exec: Exec) -> Vec<(usize, f64)> {
    match exec {
        Exec::Sequential => points.iter().map(|p| nearest(p, centroids)).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => points.par_iter().map(|p| nearest(p, centroids)).collect(),
    }
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.uniform() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("distinct points remain");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick].clone();
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn update_centroids(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    sums
}

/// Moves the farthest member of the largest cluster into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        let far = (0..points.len())
            .filter(|&i| assignments[i] == largest)
            .max_by(|&a, &b| sq_dist(&points[a], &centroids[largest]).total_cmp(&sq_dist(&points[b], &centroids[largest])).then(b.cmp(&a)))
            .unwrap();
        assignments[far] = empty;
    }
}

fn inertia_of(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut Rng, exec: Exec) -> KmeansResult {
    let mut centroids = plus_plus_seeds(points, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut next: Vec<usize> = assign_points(points, &centroids, exec).into_iter().map(|(a, _)| a).collect();
        repair_empty(points, &mut next, &centroids, k);
        let converged = next == assignments;
        assignments = next;
        centroids = update_centroids(points, &assignments, k);
        let inertia = inertia_of(points, &assignments, &centroids);
        if let Some(&prev) = trace.last() {
            assert!(inertia <= prev + 1e-9 * prev.abs().max(1.0), "Lloyd inertia increased: {prev} -> {inertia}");
        }
        trace.push(inertia);
        if converged {
            break;
        }
    }
    let inertia = *trace.last().unwrap();
    KmeansResult { assignments, centroids, inertia, inertia_trace: trace }
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng, cfg: &KmeansConfig) -> Result<KmeansResult> {
    kmeans_with(points, k, rng, cfg, Exec::default())
}

pub fn kmeans_with(points: &[Vec<f64>], k: usize, rng: &mut Rng, cfg: &KmeansConfig, exec: Exec) -> Result<KmeansResult> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch { expected: vec![dim], got: vec![] });
    }
    if count_distinct(points) < k {
        return Err(Error::TooFewDistinctPoints { k, min: k });
    }
    let mut best: Option<KmeansResult> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut sub = rng.split(r as u64);
        let res = lloyd(points, k, cfg.max_iters, &mut sub, exec);
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    // advance the caller's stream so consecutive calls differ
    rng.next_u64();
    Ok(best.unwrap())
}

/// Per-modality ℓ2 normalization, then concatenation.
pub fn joint_embed(e_audio: &[f64], e_visual: &[f64]) -> Result<Vec<f64>> {
    let mut out = l2_normalize_slice(e_audio)?;
    out.extend(l2_normalize_slice(e_visual)?);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelModality {
    Audio,
    Visual,
    Joint,
}

/// Cluster id for every utterance, indexed by utterance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    pub version: u32,
    pub iteration: usize,
    pub modality: LabelModality,
    pub num_clusters: usize,
    pub labels: Vec<usize>,
}

impl PseudoLabelStore {
    pub fn new(iteration: usize, modality: LabelModality, num_clusters: usize, labels: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_clusters) {
            return Err(Error::InvalidLabel { label: bad, num_classes: num_clusters });
        }
        Ok(Self { version: LABEL_SCHEMA_VERSION, iteration, modality, num_clusters, labels })
    }

    pub fn label(&self, utterance: usize) -> Option<usize> {
        self.labels.get(utterance).copied()
    }

    /// Utterance ids grouped by cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (u, &c) in self.labels.iter().enumerate() {
            out[c].push(u);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingInput(path.display().to_string()))?;
        let s: Self = serde_json::from_str(&text)?;
        Self::new(s.iteration, s.modality, s.num_clusters, s.labels)
    }
}

/// Clusters ℓ2-normalized embeddings (one per utterance) into a label store.
pub fn assign_pseudo_labels(
    embeddings: &[Vec<f64>],
    k: usize,
    modality: LabelModality,
    iteration: usize,
    rng: &mut Rng,
    cfg: &KmeansConfig,
) -> Result<PseudoLabelStore> {
    let points = embeddings.iter().map(|e| l2_normalize_slice(e)).collect::<Result<Vec<_>>>()?;
    let res = kmeans(&points, k, rng, cfg)?;
    PseudoLabelStore::new(iteration, modality, k, res.assignments)
}

/// Joint embeddings for paired per-utterance audio and visual embeddings.
pub fn joint_embeddings(audio: &[Vec<f64>], visual: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if audio.len() != visual.len() {
        return Err(Error::LengthMismatch(audio.len(), visual.len()));
    }
    audio.iter().zip(visual).map(|(a, v)| joint_embed(a, v)).collect()
}

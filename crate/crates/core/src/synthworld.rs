//! Synthetic identity world: identity centroids in two correlated modalities,
//! utterances with per-utterance channel offsets, noisy multi-crop views,
//! label corruption and verification trial lists.
//!
//! Ground truth lives in [`TruthMap`], which only [`World`] holds. Training
//! code receives a [`WorldView`], which has no access to it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};

pub const WORLD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_identities: usize,
    pub utterances_per_identity: usize,
    pub obs_dim_audio: usize,
    pub obs_dim_visual: usize,
    pub channel_noise_std: f64,
    /// Share of the channel variance that is isotropic; the rest lies in a
    /// low-rank nuisance subspace.
    pub channel_isotropic_fraction: f64,
    pub content_noise_std_long: f64,
    pub content_noise_std_short: f64,
    pub augment_noise_std: f64,
    pub modality_correlation: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            utterances_per_identity: 50,
            obs_dim_audio: 32,
            obs_dim_visual: 24,
            channel_noise_std: 1.0,
            channel_isotropic_fraction: 0.5,
            content_noise_std_long: 0.35,
            content_noise_std_short: 0.7,
            augment_noise_std: 0.35,
            modality_correlation: 0.8,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_identities == 0 || self.utterances_per_identity == 0 {
            return bad("identity and utterance counts must be positive");
        }
        if self.obs_dim_audio == 0 || self.obs_dim_visual == 0 {
            return bad("observation dims must be positive");
        }
        let stds = [
            self.channel_noise_std,
            self.content_noise_std_long,
            self.content_noise_std_short,
            self.augment_noise_std,
        ];
        if stds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("noise stds must be finite and >= 0");
        }
        if self.content_noise_std_short < self.content_noise_std_long {
            return bad("short-crop noise must be at least the long-crop noise");
        }
        if !(0.0..=1.0).contains(&self.channel_isotropic_fraction) {
            return bad("channel_isotropic_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.modality_correlation) {
            return bad("modality_correlation must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn num_utterances(&self) -> usize {
        self.num_identities * self.utterances_per_identity
    }

    pub fn obs_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Audio => self.obs_dim_audio,
            Modality::Visual => self.obs_dim_visual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub audio_centroid: Tensor,
    pub visual_centroid: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: usize,
    pub audio_base: Tensor,
    pub visual_base: Tensor,
}

impl Utterance {
    pub fn base(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::Audio => &self.audio_base,
            Modality::Visual => &self.visual_base,
        }
    }
}

/// Hidden utterance → identity map. Evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMap {
    pub version: u32,
    pub identity_of: Vec<usize>,
}

impl TruthMap {
    pub fn identity(&self, utterance: usize) -> Option<usize> {
        self.identity_of.get(utterance).copied()
    }

    pub fn labels(&self) -> &[usize] {
        &self.identity_of
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub a: usize,
    pub b: usize,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn num_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }
}

/// The truth-free face of a world: everything training and scoring may read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldView {
    pub version: u32,
    pub config: WorldConfig,
    pub identities: Vec<Identity>,
    pub utterances: Vec<Utterance>,
    pub trials: Option<TrialList>,
}

impl WorldView {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterance(&self, id: usize) -> Result<&Utterance> {
        self.utterances.get(id).ok_or(Error::UnknownUtterance(id))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingInput(path.display().to_string()))?;
        let view: WorldView = serde_json::from_str(&text)?;
        if view.version != WORLD_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported world version {}", view.version)));
        }
        view.config.validate()?;
        Ok(view)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    view: WorldView,
    truth: TruthMap,
}

impl World {
    pub fn view(&self) -> &WorldView {
        &self.view
    }

    pub fn truth(&self) -> &TruthMap {
        &self.truth
    }

    pub fn config(&self) -> &WorldConfig {
        &self.view.config
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.view.utterances
    }

    pub fn identities(&self) -> &[Identity] {
        &self.view.identities
    }

    pub fn set_trials(&mut self, trials: TrialList) {
        self.view.trials = Some(trials);
    }

    pub fn into_parts(self) -> (WorldView, TruthMap) {
        (self.view, self.truth)
    }
}

/// Orthonormal columns `[dim × rank]` (stored column-major) scaled so that an
/// offset `B z` with `z ~ N(0, I)` has unit average per-coordinate variance.
fn nuisance_basis(dim: usize, rank: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while cols.len() < rank {
        let mut v = rng.normal_vec(dim, 1.0);
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            cols.push(v);
        }
    }
    let s = (dim as f64 / rank as f64).sqrt();
    cols.iter_mut().for_each(|c| c.iter_mut().for_each(|a| *a *= s));
    cols
}

/// Channel offsets live in a low-rank subspace: a quarter of the dimensions.
pub fn nuisance_rank(dim: usize) -> usize {
    dim.div_ceil(4).max(1)
}

/// Per-utterance offset with average per-coordinate variance `std²`, split
/// between the nuisance subspace and an isotropic part.
fn channel_offset(basis: &[Vec<f64>], dim: usize, std: f64, isotropic: f64, rng: &mut Rng) -> Vec<f64> {
    let low = std * (1.0 - isotropic).sqrt();
    let iso = std * isotropic.sqrt();
    let mut out = vec![0.0; dim];
    for col in basis {
        let z = low * rng.normal();
        out.iter_mut().zip(col).for_each(|(o, c)| *o += z * c);
    }
    out.iter_mut().for_each(|o| *o += iso * rng.normal());
    out
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let (da, dv) = (config.obs_dim_audio, config.obs_dim_visual);
    let rho = config.modality_correlation;

    let mut rc = root.split(1);
    let mixing: Vec<f64> = rc.normal_vec(dv * da, 1.0 / (da as f64).sqrt());
    let mut identities = Vec::with_capacity(config.num_identities);
    for _ in 0..config.num_identities {
        let za = rc.normal_vec(da, 1.0);
        let zi = rc.normal_vec(da, 1.0);
        let latent: Vec<f64> = za.iter().zip(&zi).map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b).collect();
        let visual: Vec<f64> = (0..dv).map(|r| (0..da).map(|c| mixing[r * da + c] * latent[c]).sum()).collect();
        identities.push(Identity { audio_centroid: Tensor::vector(za), visual_centroid: Tensor::vector(visual) });
    }

    let mut rb = root.split(2);
    let basis_a = nuisance_basis(da, nuisance_rank(da), &mut rb);
    let basis_v = nuisance_basis(dv, nuisance_rank(dv), &mut rb);

    let n = config.num_utterances();
    let mut order = root.split(3).permutation(n);
    let mut ru = root.split(4);
    let mut slots: Vec<Option<(Utterance, usize)>> = (0..n).map(|_| None).collect();
    for identity in 0..config.num_identities {
        for _ in 0..config.utterances_per_identity {
            let id = order.pop().expect("permutation covers every slot");
            let c = &identities[identity];
            let oa = channel_offset(&basis_a, da, config.channel_noise_std, config.channel_isotropic_fraction, &mut ru);
            let ov = channel_offset(&basis_v, dv, config.channel_noise_std, config.channel_isotropic_fraction, &mut ru);
            let audio: Vec<f64> = c.audio_centroid.values().iter().zip(&oa).map(|(a, b)| a + b).collect();
            let visual: Vec<f64> = c.visual_centroid.values().iter().zip(&ov).map(|(a, b)| a + b).collect();
            slots[id] = Some((
                Utterance { id, audio_base: Tensor::vector(audio), visual_base: Tensor::vector(visual) },
                identity,
            ));
        }
    }
    let (utterances, identity_of): (Vec<_>, Vec<_>) = slots.into_iter().map(|s| s.expect("filled")).unzip();
    Ok(World {
        view: WorldView { version: WORLD_SCHEMA_VERSION, config: config.clone(), identities, utterances, trials: None },
        truth: TruthMap { version: WORLD_SCHEMA_VERSION, identity_of },
    })
}

/// Two long and four short views. Long views come first in every listing.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    pub long: Vec<Tensor>,
    pub short: Vec<Tensor>,
    pub source_utterance_ids: Vec<usize>,
}

pub const NUM_LONG: usize = 2;
pub const NUM_SHORT: usize = 4;
pub const NUM_VIEWS: usize = NUM_LONG + NUM_SHORT;

impl CropSet {
    /// All six views, long first.
    pub fn views(&self) -> impl Iterator<Item = &Tensor> {
        self.long.iter().chain(self.short.iter())
    }
}

/// One noisy view of `base`: content noise plus optional augmentation noise.
pub fn sample_view(base: &Tensor, content_std: f64, augment_std: f64, rng: &mut Rng) -> Tensor {
    let v = base
        .values()
        .iter()
        .map(|b| {
            let c = content_std * rng.normal();
            let a = augment_std * rng.normal();
            b + c + a
        })
        .collect();
    Tensor::vector(v)
}

fn crop_from(u: &Utterance, modality: Modality, cfg: &WorldConfig, long: bool, rng: &mut Rng) -> Tensor {
    let std = if long { cfg.content_noise_std_long } else { cfg.content_noise_std_short };
    sample_view(u.base(modality), std, cfg.augment_noise_std, rng)
}

/// Six independent views of one utterance.
pub fn sample_crops(u: &Utterance, modality: Modality, cfg: &WorldConfig, rng: &mut Rng) -> CropSet {
    let long = (0..NUM_LONG).map(|_| crop_from(u, modality, cfg, true, rng)).collect();
    let short = (0..NUM_SHORT).map(|_| crop_from(u, modality, cfg, false, rng)).collect();
    CropSet { long, short, source_utterance_ids: vec![u.id; NUM_VIEWS] }
}

/// Six views, each from an independently chosen member of one cluster.
pub fn sample_crops_cluster_aware(
    members: &[&Utterance],
    modality: Modality,
    cfg: &WorldConfig,
    rng: &mut Rng,
) -> Result<CropSet> {
    if members.is_empty() {
        return Err(Error::EmptyCluster);
    }
    if members.len() == 1 {
        return Ok(sample_crops(members[0], modality, cfg, rng));
    }
    let mut sources = Vec::with_capacity(NUM_VIEWS);
    let mut views = Vec::with_capacity(NUM_VIEWS);
    for i in 0..NUM_VIEWS {
        let u = members[rng.below(members.len())];
        sources.push(u.id);
        views.push(crop_from(u, modality, cfg, i < NUM_LONG, rng));
    }
    let short = views.split_off(NUM_LONG);
    Ok(CropSet { long: views, short, source_utterance_ids: sources })
}

/// Replaces exactly `round(rate · N)` labels with a different, uniformly
/// chosen class. Returns the new labels and the corruption mask.
pub fn corrupt_labels(labels: &[usize], rate: f64, num_classes: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidLabel { label: bad, num_classes });
    }
    let count = (rate * labels.len() as f64).round() as usize;
    if count > 0 && num_classes < 2 {
        return Err(Error::InvalidRate(rate));
    }
    let mut out = labels.to_vec();
    let mut mask = vec![false; labels.len()];
    let order = rng.permutation(labels.len());
    for &i in order.iter().take(count) {
        let shift = 1 + rng.below(num_classes - 1);
        out[i] = (labels[i] + shift) % num_classes;
        mask[i] = true;
    }
    Ok((out, mask))
}

/// Builds target (same identity) and non-target (different identity) pairs.
pub fn make_trials(world: &World, n_target: usize, n_nontarget: usize, rng: &mut Rng) -> Result<TrialList> {
    let num_ids = world.identities().len();
    let mut by_identity: Vec<Vec<usize>> = vec![Vec::new(); num_ids];
    for (u, &i) in world.truth().identity_of.iter().enumerate() {
        by_identity[i].push(u);
    }
    let eligible: Vec<usize> = (0..num_ids).filter(|&i| by_identity[i].len() >= 2).collect();
    if num_ids < 2 || eligible.len() < 2 {
        return Err(Error::InsufficientIdentities);
    }
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for _ in 0..n_target {
        let members = &by_identity[eligible[rng.below(eligible.len())]];
        let a = rng.below(members.len());
        let mut b = rng.below(members.len() - 1);
        if b >= a {
            b += 1;
        }
        trials.push(Trial { a: members[a], b: members[b], is_target: true });
    }
    for _ in 0..n_nontarget {
        let pa = rng.below(eligible.len());
        let mut pb = rng.below(eligible.len() - 1);
        if pb >= pa {
            pb += 1;
        }
        let (ma, mb) = (&by_identity[eligible[pa]], &by_identity[eligible[pb]]);
        trials.push(Trial { a: ma[rng.below(ma.len())], b: mb[rng.below(mb.len())], is_target: false });
    }
    Ok(TrialList { trials })
}

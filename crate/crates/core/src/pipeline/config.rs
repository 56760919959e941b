//! Run configuration: one TOML file with a section per module.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stage2::Stage2Hyper;
use crate::clusterlab::KmeansConfig;
use crate::dino::{DinoHyper, EncoderConfig};
use crate::error::{Error, Result};
use crate::lossgate::{AamConfig, GateState, SelectionMode};
use crate::synthworld::WorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    AudioOnly,
    AudioVisual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub targets: usize,
    pub nontargets: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self { targets: 20000, nontargets: 20000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub num_iterations: usize,
    pub num_clusters: usize,
    pub modality_mode: ModalityMode,
    pub selection_mode: SelectionMode,
    pub label_noise_rate: f64,
    pub warm_start: bool,
    pub world: WorldConfig,
    pub trials: TrialConfig,
    pub encoder_audio: EncoderConfig,
    pub encoder_visual: EncoderConfig,
    pub dino: DinoHyper,
    pub stage2: Stage2Hyper,
    pub gate: GateState,
    pub aam: AamConfig,
    pub kmeans: KmeansConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            seed: 0,
            num_iterations: 3,
            num_clusters: 30,
            modality_mode: ModalityMode::AudioOnly,
            selection_mode: SelectionMode::DlgLc,
            label_noise_rate: 0.0,
            warm_start: false,
            encoder_audio: EncoderConfig::new(world.obs_dim_audio),
            encoder_visual: EncoderConfig::new(world.obs_dim_visual),
            world,
            trials: TrialConfig::default(),
            dino: DinoHyper::default(),
            stage2: Stage2Hyper::default(),
            gate: GateState::default(),
            aam: AamConfig::default(),
            kmeans: KmeansConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.encoder_audio.validate()?;
        self.encoder_visual.validate()?;
        self.dino.validate()?;
        self.stage2.validate()?;
        self.gate.validate()?;
        self.aam.validate()?;
        if self.encoder_audio.input_dim != self.world.obs_dim_audio || self.encoder_visual.input_dim != self.world.obs_dim_visual {
            return Err(Error::InvalidConfig("encoder input_dim must match the world observation dims".into()));
        }
        if self.num_clusters < 2 || self.num_clusters > self.world.num_utterances() {
            return Err(Error::InvalidConfig("num_clusters must lie in [2, number of utterances]".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return Err(Error::InvalidRate(self.label_noise_rate));
        }
        if !self.gate.loss_record.is_empty() {
            return Err(Error::InvalidConfig("gate.loss_record must be empty in a config".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.selection_mode = SelectionMode::Fixed(2.5);
        cfg.modality_mode = ModalityMode::AudioVisual;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\nselection_mode = \"none\"\n[stage2]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.selection_mode, SelectionMode::None);
        assert_eq!(cfg.stage2.epochs, 3);
        assert_eq!(cfg.num_clusters, 30);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("sede = 1\n"), Err(Error::InvalidConfig(_))));
        assert!(matches!(RunConfig::from_toml("[world]\nbogus = 1\n"), Err(Error::InvalidConfig(_))));
        assert!(matches!(RunConfig::from_toml("label_noise_rate = 1.5\n"), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}

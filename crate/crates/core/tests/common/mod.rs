#![allow(dead_code)]

use dlglc::dino::EncoderConfig;
use dlglc::numkit::Rng;
use dlglc::pipeline::RunConfig;
use dlglc::synthworld::{generate_world, make_trials, World, WorldConfig};

/// A world and model small enough for a full run in about a second.
pub fn small_config() -> RunConfig {
    let world = WorldConfig { num_identities: 6, utterances_per_identity: 10, obs_dim_audio: 10, obs_dim_visual: 8, ..WorldConfig::default() };
    let enc = |d: usize| EncoderConfig { input_dim: d, hidden_dims: vec![16], embed_dim: 8, head_hidden_dim: 16, head_bottleneck_dim: 8, head_output_dim: 32 };
    let mut cfg = RunConfig {
        num_iterations: 2,
        num_clusters: 6,
        encoder_audio: enc(world.obs_dim_audio),
        encoder_visual: enc(world.obs_dim_visual),
        world,
        ..RunConfig::default()
    };
    cfg.trials.targets = 100;
    cfg.trials.nontargets = 100;
    cfg.dino.epochs = 3;
    cfg.dino.batch_size = 16;
    cfg.dino.ca_warmup_epochs = 1;
    cfg.dino.ca_num_clusters = 6;
    cfg.stage2.epochs = 4;
    cfg.stage2.batch_size = 16;
    cfg
}

pub fn world_for(cfg: &RunConfig) -> World {
    let mut w = generate_world(&cfg.world).unwrap();
    let trials = make_trials(&w, cfg.trials.targets, cfg.trials.nontargets, &mut Rng::new(cfg.world.seed).split(77)).unwrap();
    w.set_trials(trials);
    w
}

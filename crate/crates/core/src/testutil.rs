//! Small fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bayesnet::{BayesNet, NetConfig, Preset};
use crate::synth::{generate_scene, AmbiguityProfile, SceneObservation, SynthConfig};

pub fn toy_synth() -> SynthConfig {
    SynthConfig {
        image_size: [192, 192],
        grid: [4, 4],
        feature_dim: 8,
        global_dim: 4,
        joints: 5,
        expression_dim: 2,
        ..SynthConfig::default()
    }
}

pub fn toy_net_config() -> NetConfig {
    NetConfig {
        feature_dim: 8,
        global_dim: 4,
        hidden_dim: 12,
        joints: 5,
        expression_dim: 2,
        grid: [4, 4],
        image_size: [192, 192],
        ..NetConfig::default()
    }
}

/// A toy network with parameters moved off the initialization.
pub fn toy_net(preset: Preset, seed: u64) -> BayesNet {
    let mut net = BayesNet::new(toy_net_config(), preset, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    for h in net.heads.values_mut() {
        for b in h.blocks_mut() {
            for x in b.iter_mut() {
                *x += 0.1 * (rng.random::<f64>() - 0.5);
            }
        }
    }
    net
}

pub fn toy_scene(seed: u64, people: usize, views: usize) -> Vec<SceneObservation> {
    generate_scene(seed, people, views, AmbiguityProfile::BedlamLike, &toy_synth()).unwrap().views
}

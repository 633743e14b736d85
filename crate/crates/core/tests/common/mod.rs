//! Fixtures and numerical oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use bnhmr::bayesnet::{BayesNet, NetConfig, Preset};
use bnhmr::synth::{generate_scene, AmbiguityProfile, SceneObservation, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `c(k I) = 1 / E[exp(tr(k R))]` under the unit-mass Haar measure, integrating
/// over the rotation angle with density `(1 - cos w) / pi`.
pub fn isotropic_fisher_normalizer(kappa: f64) -> f64 {
    1.0 / simpson(|w| (kappa * (1.0 + 2.0 * w.cos())).exp() * (1.0 - w.cos()) / PI, 0.0, PI, 20_000)
}

/// Haar mass of the cap of rotation angle at most `radius` under `exp(tr(k R))`.
pub fn isotropic_fisher_cap_mass(kappa: f64, radius: f64) -> f64 {
    let f = |w: f64| (kappa * (1.0 + 2.0 * w.cos())).exp() * (1.0 - w.cos()) / PI;
    simpson(f, 0.0, radius, 20_000) / simpson(f, 0.0, PI, 20_000)
}

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

/// Minimum total cost over all permutations.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

mod common;

use std::collections::{BTreeMap, BTreeSet};

use bnhmr::bayesnet::{NodeDistribution, NodeName, NodeValue, Preset, SceneAssignment};
use bnhmr::body::KinematicBody;
use bnhmr::distributions::{DiagGaussianParams, FisherNormalizer, MatrixFisherParams};
use bnhmr::inference::multiview::pair_cost;
use bnhmr::inference::{extract_mode, fuse_multiview, hungarian, match_people, KnownValues, ModePrediction, PersonState};
use bnhmr::so3::{Rotation, So3Grid};
use bnhmr::synth::{generate_scene, AmbiguityProfile, GroundTruthPerson, SceneObservation, SynthConfig};
use common::{brute_force_assignment, toy_net, toy_scene};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn exact_norm() -> FisherNormalizer {
    FisherNormalizer::with_quantum(So3Grid::cached(2).unwrap(), 0.0)
}

fn gt_cells(obs: &SceneObservation) -> KnownValues {
    KnownValues { cells: Some(obs.gt.iter().map(|g| g.cell).collect()), ..KnownValues::none() }
}

/// Two scalar nodes `a -> b` with linear heads; `b`'s spread may depend on `a`.
struct Chain {
    mu_a: f64,
    raw_a: f64,
    slope: f64,
    bias: f64,
    raw_b: (f64, f64),
}

impl Chain {
    fn cond_b(&self, a: f64) -> DiagGaussianParams {
        DiagGaussianParams::new(vec![self.slope * a + self.bias], vec![self.raw_b.0 + self.raw_b.1 * a]).unwrap()
    }

    fn joint(&self, a: f64, b: f64) -> f64 {
        DiagGaussianParams::new(vec![self.mu_a], vec![self.raw_a]).unwrap().log_density(&[a]).unwrap()
            + self.cond_b(a).log_density(&[b]).unwrap()
    }

    fn greedy(&self) -> (f64, f64) {
        (self.mu_a, self.cond_b(self.mu_a).mode()[0])
    }
}

#[test]
fn greedy_mode_matches_dense_scan_for_homoscedastic_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let step = 0.01;
    let scan = |c: &Chain| {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=800 {
            let a = -4.0 + i as f64 * step;
            for j in 0..=800 {
                let b = -4.0 + j as f64 * step;
                let l = c.joint(a, b);
                if l > best.0 {
                    best = (l, a, b);
                }
            }
        }
        (best.1, best.2)
    };
    let mut mismatches = 0;
    for case in 0..20 {
        let heteroscedastic = case % 2 == 1;
        let c = Chain {
            mu_a: rng.random_range(-1.0..1.0),
            raw_a: rng.random_range(-2.0..0.0),
            slope: rng.random_range(-1.0..1.0),
            bias: rng.random_range(-0.5..0.5),
            raw_b: (rng.random_range(-2.0..-1.0), if heteroscedastic { rng.random_range(-1.0..1.0) } else { 0.0 }),
        };
        let (ga, gb) = c.greedy();
        let (sa, sb) = scan(&c);
        let close = (ga - sa).abs() <= step && (gb - sb).abs() <= step;
        if heteroscedastic {
            mismatches += usize::from(!close);
        } else {
            assert!(close, "greedy ({ga}, {gb}) vs scan ({sa}, {sb})");
        }
    }
    println!("heteroscedastic chains where greedy differs from the global mode: {mismatches}/10");
}

#[test]
fn mode_terms_dominate_reextracted_descendants() {
    let norm = exact_norm();
    for preset in [Preset::Condimen, Preset::Variant1, Preset::Variant2] {
        let net = toy_net(preset, 11);
        let obs = &toy_scene(12, 2, 1)[0];
        let base = extract_mode(&net, obs, &gt_cells(obs)).unwrap();
        for p in &base.persons {
            for (node, value, nudge) in [
                (NodeName::Shape, NodeValue::Vector(p.beta.clone()), NodeValue::Vector(p.beta.iter().map(|b| b + 0.05).collect())),
                (NodeName::EncodedDepth, NodeValue::Vector(vec![p.encoded_depth]), NodeValue::Vector(vec![p.encoded_depth - 0.05])),
            ] {
                let mut known = gt_cells(obs);
                known.clamp(p.cell, node, value.clone());
                let held = extract_mode(&net, obs, &known).unwrap();
                let mut moved_known = gt_cells(obs);
                moved_known.clamp(p.cell, node, nudge);
                let moved = extract_mode(&net, obs, &moved_known).unwrap();
                let a = held.persons.iter().find(|q| q.cell == p.cell).unwrap().assignment();
                let mut b = moved.persons.iter().find(|q| q.cell == p.cell).unwrap().assignment();
                // keep the clamped value, take the descendants extracted under the nudge
                match (&node, &value) {
                    (NodeName::Shape, NodeValue::Vector(v)) => b.shape = v.clone(),
                    (NodeName::EncodedDepth, NodeValue::Vector(v)) => b.encoded_depth = v[0],
                    _ => unreachable!(),
                }
                let da = net.person_log_densities(&a, &held.intrinsics, obs, &norm).unwrap();
                let db = net.person_log_densities(&b, &held.intrinsics, obs, &norm).unwrap();
                for n in net.person_nodes() {
                    let parents = net.connectivity.parents_of(n);
                    if parents.iter().all(|q| !q.is_person_level() || a.value(*q) == b.value(*q)) {
                        assert!(da[&n] >= db[&n] - 1e-9, "{preset:?} {n:?}: {} < {}", da[&n], db[&n]);
                    }
                }
            }
        }
    }
}

#[test]
fn leaf_depth_marginalizes_out_of_the_joint() {
    let norm = exact_norm();
    for preset in [Preset::NaiveBayes, Preset::Condimen] {
        let net = toy_net(preset, 21);
        let obs = &toy_scene(22, 2, 1)[0];
        let m = extract_mode(&net, obs, &gt_cells(obs)).unwrap();
        let persons: Vec<_> = m.persons.iter().map(|p| p.assignment()).collect();
        let joint_at = |e: f64| {
            let mut ps = persons.clone();
            ps[0].encoded_depth = e;
            net.joint_log_density(&SceneAssignment { intrinsics: m.intrinsics, persons: ps }, obs, &norm).unwrap()
        };
        let terms = net.person_log_densities(&persons[0], &m.intrinsics, obs, &norm).unwrap();
        let marginal = joint_at(persons[0].encoded_depth) - terms[&NodeName::EncodedDepth];
        let sd = match &m.persons[0].distributions[&NodeName::EncodedDepth] {
            NodeDistribution::Gaussian(g) => g.stds()[0],
            d => panic!("unexpected {d:?}"),
        };
        let e0 = persons[0].encoded_depth;
        let mass = common::simpson(|e| (joint_at(e) - marginal).exp(), e0 - 8.0 * sd, e0 + 8.0 * sd, 2000);
        assert!((mass - 1.0).abs() < 1e-4, "{preset:?}: {mass}");
    }
}

fn tangent(rng: &mut ChaCha8Rng, sd: f64) -> Rotation {
    Rotation::from_scaled_axis(&(Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * sd))
}

fn noisy_state(g: &GroundTruthPerson, rng: &mut ChaCha8Rng) -> PersonState {
    let theta: Vec<Rotation> = g.theta.iter().map(|r| r.compose(&tangent(rng, 0.15))).collect();
    let pose = theta.iter().map(|r| MatrixFisherParams::new(*r, Rotation::identity(), [0.0; 3])).collect();
    let d = g.translation().norm();
    PersonState {
        cell: g.cell,
        score: 1.0,
        center2d: g.center2d,
        encoded_depth: g.encoded_depth,
        depth: d,
        t: g.t,
        theta,
        beta: g.beta.clone(),
        gamma: g.gamma.clone(),
        distributions: BTreeMap::from([(NodeName::Pose, NodeDistribution::Pose(pose))]),
        clamped: BTreeSet::new(),
    }
}

fn vertex_error(body: &KinematicBody, s: &PersonState, g: &GroundTruthPerson) -> f64 {
    let a = s.points(body).unwrap();
    let b = bnhmr::body::forward_kinematics(body, &g.theta, &g.beta, &g.translation()).unwrap();
    a.iter().zip(&b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

#[test]
fn four_view_fusion_beats_single_views() {
    let body = KinematicBody::standard();
    let config = SynthConfig::default();
    let mut wins = 0;
    for seed in 0..100u64 {
        let scene = generate_scene(seed, 1 + (seed % 3) as usize, 4, AmbiguityProfile::BedlamLike, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let views: Vec<ModePrediction> = scene
            .views
            .iter()
            .map(|o| ModePrediction {
                intrinsics: o.gt_intrinsics,
                intrinsics_clamped: true,
                intrinsics_distribution: None,
                detection_scores: Vec::new(),
                persons: o.gt.iter().map(|g| noisy_state(g, &mut rng)).collect(),
            })
            .collect();
        let fused = fuse_multiview(&views, &body).unwrap();
        let (mut single, mut multi, mut n) = (0.0, 0.0, 0.0);
        for (v, o) in scene.views.iter().enumerate() {
            for (i, g) in o.gt.iter().enumerate() {
                single += vertex_error(&body, &views[v].persons[i], g);
                multi += vertex_error(&body, &fused.views[v][i], g);
                n += 1.0;
            }
        }
        if multi / n < single / n {
            wins += 1;
        }
    }
    println!("fusion won on {wins}/100 scenes");
    assert!(wins >= 90);
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..200 {
        let n = 1 + case % 6;
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let (assignment, total) = hungarian(&cost).unwrap();
        let mut seen = assignment.clone();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let check: f64 = assignment.iter().enumerate().map(|(r, c)| cost[r][*c]).sum();
        assert!((check - total).abs() < 1e-9);
        assert!((total - brute_force_assignment(&cost)).abs() < 1e-9);
    }
}

#[test]
fn person_matching_minimizes_total_pair_cost() {
    let body = KinematicBody::with_joints(5);
    for seed in 0..10 {
        let net = toy_net(Preset::Condimen, seed);
        let views = toy_scene(40 + seed, 4, 2);
        let a = extract_mode(&net, &views[0], &gt_cells(&views[0])).unwrap().persons;
        let b = extract_mode(&net, &views[1], &gt_cells(&views[1])).unwrap().persons;
        let cost: Vec<Vec<f64>> = a.iter().map(|p| b.iter().map(|q| pair_cost(p, q, &body).unwrap()).collect()).collect();
        let m = match_people(&a, &b, &body).unwrap();
        let total: f64 = m.iter().enumerate().map(|(i, j)| cost[i][j.unwrap()]).sum();
        assert!((total - brute_force_assignment(&cost)).abs() < 1e-9);
    }
}

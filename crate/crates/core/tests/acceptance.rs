//! Acceptance criteria. Runs without the test harness and prints one
//! PASS/FAIL line per criterion, followed by indented details.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use bnhmr::bayesnet::{BayesNet, MlpHead, NetConfig, Preset};
use bnhmr::detection::{detect, DetectionGrid};
use bnhmr::distributions::{
    fisher_log_density_grad, fisher_mode, fisher_normalizer, fisher_param_log_density_grad, DiagGaussianParams,
    FisherNormalizer, LogNormalParams, MatrixFisher, MatrixFisherParams,
};
use bnhmr::experiment::{evaluate_regime, EvalSettings, ExperimentConfig, Regime, OUTPUT_ROOT_ENV};
use bnhmr::inference::{fuse_pose_multiview, hungarian};
use bnhmr::so3::{geodesic_distance, special_procrustes, ProcrustesFactor, Rotation, So3Grid};
use bnhmr::synth::{AmbiguityProfile, Dataset, DatasetSpec, SceneObservation, SynthConfig};
use bnhmr::training::{flatten_params, loss_prob, loss_prob_and_grad, set_param, train, TrainConfig};
use common::{brute_force_assignment, isotropic_fisher_normalizer, toy_net, toy_net_config, toy_scene, toy_synth};
use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Pinned tolerances and budgets.
const NORMALIZER_REL_TOL: f64 = 1e-3;
const NORMALIZER_BUDGET_S: f64 = 5.0;
const MODE_CASES: usize = 1000;
const MODE_PROCRUSTES_TOL: f64 = 1e-9;
const MODE_BUDGET_S: f64 = 60.0;
const GRADIENT_REL_TOL: f64 = 1e-3;
const GRADIENT_REL_FLOOR: f64 = 1e-2;
const GRADIENT_MIN_CASES: usize = 200;
const FUSION_CASES: usize = 100;
const FUSION_TOL: f64 = 1e-12;
const HUNGARIAN_CASES: usize = 500;
const HUNGARIAN_TOL: f64 = 1e-9;
const DETECTION_CASES: usize = 1000;
const E2E_STEPS: usize = 2000;
const E2E_TRAIN_SCENES: usize = 256;
const E2E_EVAL_SCENES: usize = 64;
const E2E_VIEWS: usize = 4;
const E2E_LEARNING_RATE: f64 = 1e-3;
const E2E_SHAPE_GAIN: f64 = 0.20;
const E2E_FUSION_FRACTION: f64 = 0.90;
const E2E_MIN_SPEARMAN: f64 = 0.20;

struct Outcome {
    pass: bool,
    details: Vec<String>,
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Raw concentrations are unit normal, the scale a head emits at
/// initialization; `spread` widens them for stress cases.
fn random_params_with_spread(rng: &mut ChaCha8Rng, spread: f64) -> MatrixFisherParams {
    let raw = [0; 3].map(|_| spread * randn(rng));
    MatrixFisherParams::new(Rotation::random(rng), Rotation::random(rng), raw)
}

fn random_params(rng: &mut ChaCha8Rng) -> MatrixFisherParams {
    random_params_with_spread(rng, 3.0)
}

/// Grid argmax of `tr(F^T R)`, which orders grid rotations like the density.
fn grid_argmax(mats: &[Matrix3<f64>], f: &Matrix3<f64>) -> usize {
    mats.iter()
        .enumerate()
        .map(|(i, m)| (i, f.component_mul(m).sum()))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
        .0
}

fn normalizer_matches_quadrature() -> Outcome {
    let start = Instant::now();
    let grid = So3Grid::cached(3).unwrap();
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for kappa in [0.5, 1.0, 2.0, 5.0, 10.0] {
        let c = fisher_normalizer(&(Matrix3::identity() * kappa), &grid).unwrap();
        let want = isotropic_fisher_normalizer(kappa);
        let rel = (c / want - 1.0).abs();
        worst = worst.max(rel);
        details.push(format!("kappa {kappa}: grid {c:.6e} quadrature {want:.6e} rel {rel:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    details.push(format!("worst rel {worst:.2e} (tol {NORMALIZER_REL_TOL:e}), {secs:.2} s (budget {NORMALIZER_BUDGET_S} s)"));
    Outcome { pass: worst < NORMALIZER_REL_TOL && secs < NORMALIZER_BUDGET_S, details }
}

fn grid_argmax_is_the_mode() -> Outcome {
    let start = Instant::now();
    let grid = So3Grid::cached(3).unwrap();
    let radius = So3Grid::nominal_cell_radius(3);
    let mats: Vec<Matrix3<f64>> = grid.rotations.iter().map(|r| r.matrix()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut far, mut procrustes_off, mut worst_dist, mut worst_proc) = (0, 0, 0.0f64, 0.0f64);
    for _ in 0..MODE_CASES {
        let p = random_params_with_spread(&mut rng, 1.0);
        let f = p.assembled();
        let d = geodesic_distance(&grid.rotations[grid_argmax(&mats, &f)], &fisher_mode(&p));
        worst_dist = worst_dist.max(d);
        far += usize::from(d > radius);
        let e = geodesic_distance(&special_procrustes(&f).unwrap(), &p.mode);
        worst_proc = worst_proc.max(e);
        procrustes_off += usize::from(e > MODE_PROCRUSTES_TOL);
    }
    let secs = start.elapsed().as_secs_f64();
    // Reported only: with two near-zero concentrations the trace is almost
    // flat along a great circle and the grid argmax drifts along it.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let wide_far = (0..MODE_CASES)
        .filter(|_| {
            let p = random_params_with_spread(&mut rng, 3.0);
            geodesic_distance(&grid.rotations[grid_argmax(&mats, &p.assembled())], &p.mode) > radius
        })
        .count();
    Outcome {
        pass: far == 0 && procrustes_off == 0 && secs < MODE_BUDGET_S,
        details: vec![
            format!("{MODE_CASES} cases: {far} argmax beyond cell radius {radius:.4} (worst {worst_dist:.4})"),
            format!("special_procrustes vs mode: {procrustes_off} beyond {MODE_PROCRUSTES_TOL:e} (worst {worst_proc:.2e})"),
            format!("{secs:.2} s (budget {MODE_BUDGET_S} s)"),
            format!("not asserted: raw spread 3 puts {wide_far}/{MODE_CASES} argmaxes beyond the radius (near rank-one F)"),
        ],
    }
}

struct GradCheck {
    cases: usize,
    failures: usize,
    worst: f64,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck { cases: 0, failures: 0, worst: 0.0 }
    }

    /// Records one case; every component pair must agree.
    fn case(&mut self, pairs: &[(f64, f64)]) {
        self.cases += 1;
        let mut bad = false;
        for &(analytic, fd) in pairs {
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(GRADIENT_REL_FLOOR);
            self.worst = self.worst.max(rel);
            bad |= !(rel <= GRADIENT_REL_TOL);
        }
        self.failures += usize::from(bad);
    }
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut families = Vec::new();
    let h = 1e-6;

    let mut g = GradCheck::new();
    for _ in 0..40 {
        let mu: Vec<f64> = (0..3).map(|_| randn(&mut rng)).collect();
        let raw: Vec<f64> = (0..3).map(|_| randn(&mut rng)).collect();
        let x: Vec<f64> = (0..3).map(|_| 2.0 * randn(&mut rng)).collect();
        let (gm, gr) = DiagGaussianParams::new(mu.clone(), raw.clone()).unwrap().log_density_grad(&x).unwrap();
        let mut pairs = Vec::new();
        for i in 0..3 {
            let at = |m: &[f64], r: &[f64]| DiagGaussianParams::new(m.to_vec(), r.to_vec()).unwrap().log_density(&x).unwrap();
            let fm = central(|v| { let mut m = mu.clone(); m[i] = v; at(&m, &raw) }, mu[i], h);
            let fr = central(|v| { let mut r = raw.clone(); r[i] = v; at(&mu, &r) }, raw[i], h);
            pairs.extend([(gm[i], fm), (gr[i], fr)]);
        }
        g.case(&pairs);
    }
    families.push(("diag gaussian", g));

    let mut g = GradCheck::new();
    for _ in 0..40 {
        let (mu, raw) = (6.0 + 0.5 * randn(&mut rng), randn(&mut rng) - 1.0);
        let f = (mu + 0.3 * randn(&mut rng)).exp();
        let (gm, gr) = LogNormalParams::new(mu, raw).log_density_grad(f).unwrap();
        let fm = central(|v| LogNormalParams::new(v, raw).log_density(f).unwrap(), mu, h);
        let fr = central(|v| LogNormalParams::new(mu, v).log_density(f).unwrap(), raw, h);
        g.case(&[(gm, fm), (gr, fr)]);
    }
    families.push(("log-normal", g));

    let norm = FisherNormalizer::with_quantum(So3Grid::cached(2).unwrap(), 0.0);
    let mut g = GradCheck::new();
    for _ in 0..40 {
        let p = random_params(&mut rng);
        let (m, o, r) = (p.mode.matrix(), p.dispersion_rotation.matrix(), Rotation::random(&mut rng).matrix());
        let lam = p.lambda_raw;
        let at = |m: &Matrix3<f64>, o: &Matrix3<f64>, l: &[f64; 3]| fisher_param_log_density_grad(m, o, l, p.lambda_scale, &r, &norm).log_density;
        let an = fisher_param_log_density_grad(&m, &o, &lam, p.lambda_scale, &r, &norm);
        let mut pairs = Vec::new();
        for k in 0..3 {
            pairs.push((an.grad_lambda_raw[k], central(|v| { let mut l = lam; l[k] = v; at(&m, &o, &l) }, lam[k], h)));
        }
        for i in 0..3 {
            for j in 0..3 {
                pairs.push((an.grad_mode[(i, j)], central(|v| { let mut x = m; x[(i, j)] = v; at(&x, &o, &lam) }, m[(i, j)], h)));
                pairs.push((an.grad_dispersion[(i, j)], central(|v| { let mut x = o; x[(i, j)] = v; at(&m, &x, &lam) }, o[(i, j)], h)));
            }
        }
        g.case(&pairs);
    }
    for _ in 0..20 {
        let p = random_params(&mut rng);
        let r = Rotation::random(&mut rng);
        let an = fisher_log_density_grad(&p, &r, &norm).unwrap();
        let f0 = p.assembled();
        let mut pairs = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                let fd = central(|v| { let mut f = f0; f[(i, j)] = v; MatrixFisher::new(f).log_density(&r, &norm).unwrap() }, f0[(i, j)], 1e-5);
                pairs.push((an[(i, j)], fd));
            }
        }
        g.case(&pairs);
    }
    families.push(("matrix fisher", g));

    let mut g = GradCheck::new();
    while g.cases < 30 {
        let m = Matrix3::from_fn(|_, _| randn(&mut rng));
        let s = m.singular_values();
        let mut s: Vec<f64> = s.iter().cloned().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if s[0] - s[1] < 0.1 || s[1] - s[2] < 0.1 || s[2] < 0.1 {
            continue;
        }
        let w = Matrix3::from_fn(|_, _| randn(&mut rng));
        let an = ProcrustesFactor::new(&m).unwrap().backward(&w);
        let loss = |x: &Matrix3<f64>| ProcrustesFactor::new(x).unwrap().rotation.component_mul(&w).sum();
        let mut pairs = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                pairs.push((an[(i, j)], central(|v| { let mut x = m; x[(i, j)] = v; loss(&x) }, m[(i, j)], h)));
            }
        }
        g.case(&pairs);
    }
    families.push(("special procrustes", g));

    let mut g = GradCheck::new();
    for _ in 0..30 {
        let dims = [4usize, 3];
        let head = MlpHead::new(&dims, 6, (0..5).map(|_| randn(&mut rng)).collect(), &mut rng);
        let mut head = head;
        for b in head.blocks_mut() {
            for x in b.iter_mut() {
                *x += 0.3 * randn(&mut rng);
            }
        }
        let xa = DMatrix::from_fn(3, 4, |_, _| randn(&mut rng));
        let xb = DMatrix::from_fn(3, 3, |_, _| randn(&mut rng));
        let wout = DMatrix::from_fn(3, 5, |_, _| randn(&mut rng));
        let loss = |h: &MlpHead, xa: &DMatrix<f64>| h.forward(&[xa, &xb]).unwrap().0.component_mul(&wout).sum();
        let (_, trace) = head.forward(&[&xa, &xb]).unwrap();
        let mut grad = head.zero_grad();
        let gin = head.backward(&[&xa, &xb], &trace, &wout, &mut grad, &[true, false]);
        let mut pairs = Vec::new();
        for (bi, block) in grad.blocks().iter().enumerate() {
            for k in 0..block.len() {
                let fd = central(|v| { let mut hp = head.clone(); hp.blocks_mut()[bi][k] = v; loss(&hp, &xa) }, head.blocks()[bi][k], h);
                pairs.push((block[k], fd));
            }
        }
        let gx = gin[0].as_ref().unwrap();
        for r in 0..3 {
            for c in 0..4 {
                pairs.push((gx[(r, c)], central(|v| { let mut x = xa.clone(); x[(r, c)] = v; loss(&head, &x) }, xa[(r, c)], h)));
            }
        }
        g.case(&pairs);
    }
    families.push(("mlp heads", g));

    let exact = FisherNormalizer::with_quantum(So3Grid::cached(1).unwrap(), 0.0);
    let mut g = GradCheck::new();
    for case in 0..20u64 {
        let preset = [Preset::NaiveBayes, Preset::Condimen, Preset::Variant1, Preset::Variant2][case as usize % 4];
        let net = toy_net(preset, 100 + case);
        let obs: Vec<SceneObservation> = toy_scene(200 + case, 2, 1);
        let batch: Vec<&SceneObservation> = obs.iter().collect();
        let (_, grad) = loss_prob_and_grad(&net, &batch, &exact).unwrap();
        let grad = grad.flatten();
        let params = flatten_params(&net);
        let mut pairs = Vec::new();
        for _ in 0..10 {
            let i = rng.random_range(0..params.len());
            let step = 1e-6 * params[i].abs().max(1.0);
            let fd = central(|v| { let mut n = net.clone(); set_param(&mut n, i, v); loss_prob(&n, &batch, &exact).unwrap() }, params[i], step);
            pairs.push((grad[i], fd));
        }
        g.case(&pairs);
    }
    families.push(("full l_prob (toy net)", g));

    let cases: usize = families.iter().map(|f| f.1.cases).sum();
    let failures: usize = families.iter().map(|f| f.1.failures).sum();
    let mut details: Vec<String> = families
        .iter()
        .map(|(n, g)| format!("{n}: {} cases, {} failed, worst rel {:.2e}", g.cases, g.failures, g.worst))
        .collect();
    details.push(format!("{cases} cases total (min {GRADIENT_MIN_CASES}), tol {GRADIENT_REL_TOL:e} relative"));
    Outcome { pass: failures == 0 && cases >= GRADIENT_MIN_CASES, details }
}

fn fusion_attains_grid_maximum() -> Outcome {
    let grid = So3Grid::cached(3).unwrap();
    let mats: Vec<Matrix3<f64>> = grid.rotations.iter().map(|r| r.matrix()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0;
    let mut margin = f64::INFINITY;
    for _ in 0..FUSION_CASES {
        let views: Vec<(Rotation, Vec<Matrix3<f64>>)> =
            (0..3).map(|_| (Rotation::random(&mut rng), vec![random_params(&mut rng).assembled()])).collect();
        let total: Matrix3<f64> = views.iter().map(|(a, f)| a.matrix() * f[0]).sum();
        let objective = |r: &Matrix3<f64>| total.component_mul(r).sum();
        let fused = objective(&fuse_pose_multiview(&views).unwrap()[0].matrix());
        let best = mats.iter().map(objective).fold(f64::NEG_INFINITY, f64::max);
        margin = margin.min(fused - best);
        failures += usize::from(fused < best - FUSION_TOL);
    }
    Outcome {
        pass: failures == 0,
        details: vec![format!("{FUSION_CASES} three-view problems: {failures} below the grid maximum, min margin {margin:.3e}")],
    }
}

fn hungarian_matches_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    for case in 0..HUNGARIAN_CASES {
        let n = 1 + case % 6;
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
        let (_, total) = hungarian(&cost).unwrap();
        failures += usize::from((total - brute_force_assignment(&cost)).abs() > HUNGARIAN_TOL);
    }
    Outcome { pass: failures == 0, details: vec![format!("{HUNGARIAN_CASES} matrices up to 6x6: {failures} mismatches")] }
}

/// Exhaustive reference: a cell survives when it reaches the threshold and
/// no 3x3 neighbour has a higher score, or an equal score at a smaller
/// `(v, u)` index.
fn reference_detect(s: &[f64], w: usize, h: usize, threshold: f64) -> Vec<(usize, usize)> {
    let mut keep = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let x = s[v * w + u];
            if x < threshold {
                continue;
            }
            let mut ok = true;
            for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    let (nv, nu) = (v as i64 + dv, u as i64 + du);
                    if (dv, du) == (0, 0) || nv < 0 || nu < 0 || nv >= h as i64 || nu >= w as i64 {
                        continue;
                    }
                    let y = s[nv as usize * w + nu as usize];
                    if y > x || (y == x && (nv as usize, nu as usize) < (v, u)) {
                        ok = false;
                    }
                }
            }
            if ok {
                keep.push((x, v, u));
            }
        }
    }
    keep.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    keep.into_iter().map(|(_, v, u)| (u, v)).collect()
}

fn detection_matches_reference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut failures, mut boundary, mut ties) = (0, 0, 0);
    for case in 0..DETECTION_CASES {
        // coarse levels make exact threshold hits and equal neighbours common
        let levels = [0.1, 0.3, 0.45, 0.5, 0.5, 0.6, 0.7, 0.9];
        let scores: Vec<f64> = (0..64)
            .map(|_| if case % 2 == 0 { levels[rng.random_range(0..levels.len())] } else { rng.random::<f64>() })
            .collect();
        boundary += usize::from(scores.contains(&0.5));
        ties += usize::from((0..64).any(|i| (i % 8 < 7 && scores[i] == scores[i + 1]) || (i < 56 && scores[i] == scores[i + 8])));
        let got: Vec<(usize, usize)> = detect(&DetectionGrid::new(8, 8, scores.clone()).unwrap(), 0.5).iter().map(|d| (d.u, d.v)).collect();
        failures += usize::from(got != reference_detect(&scores, 8, 8, 0.5));
    }
    Outcome {
        pass: failures == 0,
        details: vec![format!("{DETECTION_CASES} 8x8 grids ({boundary} with threshold hits, {ties} with adjacent ties): {failures} mismatches")],
    }
}

struct PresetRun {
    pe: [(Regime, f64); 3],
    fused_share: f64,
    fused_counts: (usize, usize),
    rho_none: Option<f64>,
    first_l_prob: f64,
    last_l_prob: f64,
}

fn run_preset(preset: Preset, train_set: &Dataset, eval_set: &Dataset) -> PresetRun {
    let mut net = BayesNet::new(NetConfig::default(), preset, 0).unwrap();
    let cfg = TrainConfig { learning_rate: E2E_LEARNING_RATE, steps: E2E_STEPS, ..TrainConfig::default() };
    let curve = train(&mut net, &train_set.observations(), &cfg, |_| {}).unwrap();
    let settings = EvalSettings::default();
    let report = |r: Regime, v: usize| evaluate_regime(&net, eval_set, r, v, &settings).unwrap();
    let none = report(Regime::None, 1);
    let intr = report(Regime::Intr, 1);
    let intr_shape = report(Regime::IntrShape, 1);
    let fused = report(Regime::Intr, E2E_VIEWS);
    let single = intr.per_scene_pve();
    let multi = fused.per_scene_pve();
    let wins = single.iter().zip(&multi).filter(|(s, m)| s.0 == m.0 && m.1 <= s.1).count();
    let window = 50;
    let mean = |c: &[bnhmr::training::LossBreakdown]| c.iter().map(|l| l.l_prob).sum::<f64>() / c.len() as f64;
    PresetRun {
        pe: [(Regime::None, none.pe), (Regime::Intr, intr.pe), (Regime::IntrShape, intr_shape.pe)],
        fused_share: wins as f64 / single.len() as f64,
        fused_counts: (wins, single.len()),
        rho_none: none.likelihood_error_corr,
        first_l_prob: mean(&curve[..window]),
        last_l_prob: mean(&curve[curve.len() - window..]),
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let train_spec = DatasetSpec {
        scenes: E2E_TRAIN_SCENES,
        views: E2E_VIEWS,
        seed: 1,
        profile: AmbiguityProfile::SizeDistance,
        synth: SynthConfig::default(),
        ..DatasetSpec::default()
    };
    let eval_spec = DatasetSpec { scenes: E2E_EVAL_SCENES, seed: 2, ..train_spec.clone() };
    let train_set = Dataset::generate(&train_spec).unwrap();
    let eval_set = Dataset::generate(&eval_spec).unwrap();
    let condimen = run_preset(Preset::Condimen, &train_set, &eval_set);
    let naive = run_preset(Preset::NaiveBayes, &train_set, &eval_set);
    let pe = |r: &PresetRun, g: Regime| r.pe.iter().find(|x| x.0 == g).unwrap().1;
    let a = pe(&condimen, Regime::Intr) < pe(&condimen, Regime::None) && pe(&naive, Regime::Intr) < pe(&naive, Regime::None);
    let gain = |r: &PresetRun| 1.0 - pe(r, Regime::IntrShape) / pe(r, Regime::Intr);
    let b = gain(&condimen) >= E2E_SHAPE_GAIN && gain(&naive) < gain(&condimen);
    let c = condimen.fused_share >= E2E_FUSION_FRACTION && naive.fused_share >= E2E_FUSION_FRACTION;
    let d = condimen.rho_none.is_some_and(|r| r > E2E_MIN_SPEARMAN);
    let flag = |x: bool| if x { "pass" } else { "fail" };
    let mut details = Vec::new();
    for (name, r) in [("condimen", &condimen), ("naive_bayes", &naive)] {
        details.push(format!(
            "{name}: PE none {:.1} intr {:.1} intr_shape {:.1} mm; shape gain {:.1}%; fused <= single on {}/{} scenes; rho(none) {}; l_prob {:.2} -> {:.2}",
            pe(r, Regime::None),
            pe(r, Regime::Intr),
            pe(r, Regime::IntrShape),
            100.0 * gain(r),
            r.fused_counts.0,
            r.fused_counts.1,
            r.rho_none.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into()),
            r.first_l_prob,
            r.last_l_prob,
        ));
    }
    details.push(format!("(a) intr lowers PE for both presets: {}", flag(a)));
    details.push(format!("(b) condimen intr_shape gain >= {:.0}% and naive_bayes gains less: {}", 100.0 * E2E_SHAPE_GAIN, flag(b)));
    details.push(format!("(c) 4-view fusion <= single view on >= {:.0}% of scenes (intr): {}", 100.0 * E2E_FUSION_FRACTION, flag(c)));
    details.push(format!("(d) condimen Spearman(NLL, PVE) > {E2E_MIN_SPEARMAN} (none): {}", flag(d)));
    details.push(format!(
        "condimen PE below naive_bayes under intr_shape: {}; training lowers l_prob for both: {}",
        flag(pe(&condimen, Regime::IntrShape) < pe(&naive, Regime::IntrShape)),
        flag(condimen.last_l_prob < condimen.first_l_prob && naive.last_l_prob < naive.first_l_prob)
    ));
    details.push(format!("{:.0} s", start.elapsed().as_secs_f64()));
    Outcome { pass: a && b && c && d, details }
}

fn cli(root: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_bnhmr")).args(args).env(OUTPUT_ROOT_ENV, root).stdout(std::process::Stdio::null()).status().is_ok_and(|s| s.success())
}

fn csv_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli_is_deterministic() -> Outcome {
    let config = ExperimentConfig {
        regimes: Regime::ALL.to_vec(),
        view_counts: vec![1, 2],
        seed: 9,
        dataset: DatasetSpec { scenes: 8, views: 2, synth: toy_synth(), ..DatasetSpec::default() },
        net: toy_net_config(),
        train: TrainConfig { learning_rate: 1e-3, batch_size: 4, steps: 40, normalizer_level: 1, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    let run_all = |root: &Path| -> (bool, Vec<(String, Vec<u8>)>) {
        let path = root.join("config.toml");
        std::fs::write(&path, config.to_toml().unwrap()).unwrap();
        let c = path.to_str().unwrap();
        let ok = cli(root, &["--config", c, "generate", "--seed", "3"])
            && cli(root, &["--config", c, "generate", "--out", "data/eval", "--seed", "4", "--scenes", "4"])
            && cli(root, &["--config", c, "stats"])
            && cli(root, &["--config", c, "train"])
            && cli(root, &["--config", c, "eval"]);
        (ok, csv_files(root))
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ok_a, fa) = run_all(a.path());
    let (ok_b, fb) = run_all(b.path());
    let differing: Vec<&String> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    let names: Vec<&String> = fa.iter().map(|f| &f.0).collect();
    Outcome {
        pass: ok_a && ok_b && !fa.is_empty() && fa.len() == fb.len() && differing.is_empty(),
        details: vec![format!("generate, stats, train, eval twice: {} CSV files compared {:?}, differing {:?}", fa.len(), names, differing)],
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("Fisher normalizer matches the isotropic quadrature oracle", normalizer_matches_quadrature),
        ("Fisher grid argmax lies within one cell of the mode", grid_argmax_is_the_mode),
        ("analytic gradients match central finite differences", gradient_suite),
        ("multi-view pose fusion attains the grid maximum", fusion_attains_grid_maximum),
        ("Hungarian matching equals brute force", hungarian_matches_brute_force),
        ("detection equals the exhaustive reference", detection_matches_reference),
        ("end-to-end directional trends", end_to_end),
        ("CLI commands are byte-reproducible", cli_is_deterministic),
    ];
    let mut all = true;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        all &= outcome.pass;
        println!("[PRIMARY] criterion {}: {} ... {}", i + 1, name, if outcome.pass { "PASS" } else { "FAIL" });
        for d in &outcome.details {
            println!("    {d}");
        }
    }
    if all { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}

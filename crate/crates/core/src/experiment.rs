//! Experiment runner: dataset generation, training, evaluation under the
//! conditioning regimes and dataset statistics, with CSV and JSON-lines output.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayesnet::{BayesNet, NetConfig, NodeName, NodeValue, Preset};
use crate::body::{forward_kinematics, KinematicBody};
use crate::detection::DEFAULT_THRESHOLD;
use crate::distributions::FisherNormalizer;
use crate::error::{Error, Result};
use crate::inference::{extract_mode_with_threshold, fuse_multiview, person_log_density, KnownValues, ModePrediction, PersonState};
use crate::metrics::{evaluate, EvalConfig, EvalReport, EvalScene, MatchRule, PersonPoints};
use crate::so3::So3Grid;
use crate::synth::{dataset_stats, Dataset, DatasetSpec, DatasetStats, Manifest, SceneObservation};
use crate::training::{train, write_loss_csv, LossBreakdown, TrainConfig};

/// Relative paths in a configuration are resolved against this directory.
pub const OUTPUT_ROOT_ENV: &str = "BNHMR_OUTPUT_ROOT";

/// Which ground-truth quantities are handed to the network at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    None,
    Intr,
    IntrDist,
    IntrShape,
    IntrShapeDist,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::None, Regime::Intr, Regime::IntrDist, Regime::IntrShape, Regime::IntrShapeDist];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::Intr => "intr",
            Regime::IntrDist => "intr_dist",
            Regime::IntrShape => "intr_shape",
            Regime::IntrShapeDist => "intr_shape_dist",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }

    pub fn intrinsics(&self) -> bool {
        *self != Regime::None
    }

    pub fn shape(&self) -> bool {
        matches!(self, Regime::IntrShape | Regime::IntrShapeDist)
    }

    pub fn distance(&self) -> bool {
        matches!(self, Regime::IntrDist | Regime::IntrShapeDist)
    }

    /// Clamped values for one observation: the true intrinsics and, per
    /// annotated head cell, the true shape and encoded depth.
    pub fn known_values(&self, obs: &SceneObservation) -> KnownValues {
        let mut known = if self.intrinsics() { KnownValues::with_intrinsics(obs.gt_intrinsics) } else { KnownValues::none() };
        for p in &obs.gt {
            if self.shape() {
                known.clamp(p.cell, NodeName::Shape, NodeValue::Vector(p.beta.clone()));
            }
            if self.distance() {
                known.clamp(p.cell, NodeName::EncodedDepth, NodeValue::Vector(vec![p.encoded_depth]));
            }
        }
        known
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub detection_threshold: f64,
    pub normalizer_level: u32,
    pub normalizer_quantum: f64,
    pub pck_threshold_mm: f64,
    pub pa_with_scale: bool,
    pub match_rule: MatchRule,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            detection_threshold: DEFAULT_THRESHOLD,
            normalizer_level: 2,
            normalizer_quantum: 0.01,
            pck_threshold_mm: crate::metrics::DEFAULT_PCK_THRESHOLD_MM,
            pa_with_scale: true,
            match_rule: MatchRule::HeadRay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub regimes: Vec<Regime>,
    /// View counts to evaluate; 1 evaluates every view on its own, larger
    /// counts fuse the first views of each scene.
    pub view_counts: Vec<usize>,
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
    pub output_dir: PathBuf,
    /// Network initialization and training seed.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    /// Overrides the output-root environment variable; not persisted.
    #[serde(skip)]
    pub output_root: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: Preset::Condimen,
            regimes: Regime::ALL.to_vec(),
            view_counts: vec![1],
            train_data: PathBuf::from("data/train"),
            eval_data: PathBuf::from("data/eval"),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            dataset: DatasetSpec::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            output_root: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML or JSON, chosen by the file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// `path` itself if absolute, otherwise below the output root (the
    /// `output_root` field, else the environment, else the working directory).
    pub fn resolve(&self, path: &Path) -> PathBuf {
        let root = self.output_root.clone().or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from));
        match root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir).join(self.preset.name())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.run_dir().join("checkpoint.json")
    }

    /// Train configuration with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() || self.view_counts.is_empty() {
            return Err(Error::Config("at least one regime and one view count are required".into()));
        }
        if self.view_counts.iter().any(|&v| v == 0 || v > 8) {
            return Err(Error::Config("view counts must lie in 1..=8".into()));
        }
        self.train.validate()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

/// The size-distance ambiguity holds when the features predict apparent size
/// well and metric depth poorly.
pub fn ambiguity_check_passes(stats: &DatasetStats) -> bool {
    stats.probe_extent_r2 > 0.9 && stats.probe_depth_r2 < 0.3
}

const STATS_CSV_HEADER: &str = "scenes,people,people_per_scene_mean,people_per_scene_min,people_per_scene_max,\
depth_min,depth_max,depth_mean,beta0_mean,beta0_std,beta0_excess_kurtosis,probe_extent_r2,probe_depth_r2,ambiguity_check";

fn stats_csv(stats: &DatasetStats) -> String {
    format!(
        "{STATS_CSV_HEADER}\n{},{},{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
        stats.scenes,
        stats.people,
        stats.people_per_scene_mean,
        stats.people_per_scene_min,
        stats.people_per_scene_max,
        stats.depth_min,
        stats.depth_max,
        stats.depth_mean,
        stats.beta0_mean,
        stats.beta0_std,
        stats.beta0_excess_kurtosis,
        stats.probe_extent_r2,
        stats.probe_depth_r2,
        if ambiguity_check_passes(stats) { "pass" } else { "fail" },
    )
}

fn write_stats(dir: &Path, stats: &DatasetStats) -> Result<()> {
    write_file(&dir.join("stats.csv"), stats_csv(stats).as_bytes())?;
    let json = serde_json::to_string_pretty(stats).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join("stats.json"), json.as_bytes())
}

/// Generates `config.dataset` into `dir`, with the manifest and a statistics
/// report next to the scene files.
pub fn cmd_generate(config: &ExperimentConfig, dir: &Path) -> Result<(Manifest, DatasetStats)> {
    let dataset = Dataset::generate(&config.dataset)?;
    let manifest = dataset.save(dir)?;
    let stats = dataset_stats(&dataset)?;
    write_stats(dir, &stats)?;
    Ok((manifest, stats))
}

/// Statistics of an existing dataset, written next to it.
pub fn cmd_stats(dir: &Path) -> Result<DatasetStats> {
    let dataset = Dataset::load(dir)?;
    let stats = dataset_stats(&dataset)?;
    write_stats(dir, &stats)?;
    Ok(stats)
}

pub struct TrainOutcome {
    pub net: BayesNet,
    pub curve: Vec<LossBreakdown>,
    pub checkpoint: PathBuf,
}

/// Trains a fresh network of the configured preset on the training set and
/// writes the checkpoint and loss curve to the run directory.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = Dataset::load(&config.resolve(&config.train_data))?;
    let mut net = BayesNet::new(config.net.clone(), config.preset, config.seed)?;
    let curve = train(&mut net, &dataset.observations(), &config.train_config(), |_| {})?;
    let dir = config.run_dir();
    create_dir(&dir)?;
    let checkpoint = config.checkpoint_path();
    net.save(&checkpoint)?;
    write_loss_csv(&dir.join("loss.csv"), &curve)?;
    Ok(TrainOutcome { net, curve, checkpoint })
}

fn truth_points(body: &KinematicBody, obs: &SceneObservation) -> Result<Vec<PersonPoints>> {
    obs.gt
        .iter()
        .map(|p| {
            let t = p.translation();
            Ok(PersonPoints { points: forward_kinematics(body, &p.theta, &p.beta, &t)?, translation: t, log_density: None })
        })
        .collect()
}

fn predicted_points(
    net: &BayesNet,
    obs: &SceneObservation,
    mode: &ModePrediction,
    persons: &[PersonState],
    body: &KinematicBody,
    norm: &FisherNormalizer,
) -> Result<Vec<PersonPoints>> {
    persons
        .iter()
        .map(|s| {
            Ok(PersonPoints {
                points: s.points(body)?,
                translation: s.translation(),
                log_density: Some(person_log_density(net, obs, &mode.intrinsics, s, norm)?),
            })
        })
        .collect()
}

/// Evaluates one regime at one view count over every scene of `dataset`.
pub fn evaluate_regime(
    net: &BayesNet,
    dataset: &Dataset,
    regime: Regime,
    views: usize,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let body = KinematicBody::with_joints(net.config.joints);
    let norm = FisherNormalizer::with_quantum(So3Grid::cached(settings.normalizer_level)?, settings.normalizer_quantum);
    let mut scenes = Vec::new();
    for scene in &dataset.scenes {
        if scene.views.len() < views {
            return Err(Error::Config(format!("scene {} has {} views, {views} requested", scene.scene_id, scene.views.len())));
        }
        let used = if views == 1 { &scene.views[..] } else { &scene.views[..views] };
        let modes: Vec<ModePrediction> = used
            .iter()
            .map(|o| extract_mode_with_threshold(net, o, &regime.known_values(o), settings.detection_threshold))
            .collect::<Result<_>>()?;
        let persons: Vec<Vec<PersonState>> =
            if views == 1 { modes.iter().map(|m| m.persons.clone()).collect() } else { fuse_multiview(&modes, &body)?.views };
        for ((obs, mode), ps) in used.iter().zip(&modes).zip(&persons) {
            scenes.push(EvalScene {
                scene: obs.scene_id,
                view: obs.view_id,
                predictions: predicted_points(net, obs, mode, ps, &body, &norm)?,
                ground_truth: truth_points(&body, obs)?,
            });
        }
    }
    let cfg = EvalConfig {
        joints: net.config.joints,
        pck_threshold_mm: settings.pck_threshold_mm,
        pa_with_scale: settings.pa_with_scale,
        match_rule: settings.match_rule,
    };
    evaluate(&scenes, &cfg)
}

pub const COMPARISON_CSV_HEADER_PREFIX: &str = "preset,regime,views";

/// Evaluates every configured regime and view count. Writes one JSON report
/// and one JSON-lines record file per combination and a comparison table
/// `comparison.csv` to `<run dir>/eval`.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<(Regime, usize, EvalReport)>> {
    config.validate()?;
    let net = BayesNet::load(checkpoint)?;
    let dataset = Dataset::load(&config.resolve(&config.eval_data))?;
    let dir = config.run_dir().join("eval");
    create_dir(&dir)?;
    let mut table = format!("{COMPARISON_CSV_HEADER_PREFIX},{}\n", EvalReport::CSV_HEADER);
    let mut out = Vec::new();
    for &views in &config.view_counts {
        for &regime in &config.regimes {
            let report = evaluate_regime(&net, &dataset, regime, views, &config.eval)?;
            table.push_str(&format!("{},{},{},{}\n", net.preset, regime, views, report.csv_fields()));
            let stem = format!("{regime}_v{views}");
            let mut summary = report.clone();
            summary.records.clear();
            let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
            write_file(&dir.join(format!("{stem}.json")), json.as_bytes())?;
            let mut lines = String::new();
            for r in &report.records {
                lines.push_str(&json_line(r)?);
                lines.push('\n');
            }
            write_file(&dir.join(format!("{stem}_records.jsonl")), lines.as_bytes())?;
            out.push((regime, views, report));
        }
    }
    write_file(&dir.join("comparison.csv"), table.as_bytes())?;
    Ok(out)
}

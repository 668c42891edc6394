//! End-to-end experiments driven by a TOML file.
//!
//! ```toml
//! task = "ftp"        # ftp | fr | ad
//! seed = 7
//!
//! [data]
//! count_per_class = 50
//! train_fraction = 0.5
//!
//! [encoder]
//! d_model = 64
//! ```
//!
//! Only `task` and `seed` are required; every other key falls back to
//! [`ExperimentConfig::desk`]. Per-stage seeds are derived from `seed`; seeds
//! written inside sections are ignored. Reports never contain wall-clock
//! values, so rerunning a config produces the same bytes; timings are
//! returned separately.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flightgen::{derive_seed, generate_dataset, inject_anomaly, AnomalyKind, AnomalySpec, ClassSpec, RouteSpec};
use crate::heads::{
    anomaly_example, class_example, embed, ftp_example, predict_example, train_head, FtpHead, Head, HeadOutcome,
    HeadTrainConfig, InputPipeline, MlpHead, HORIZONS,
};
use crate::metrics::{
    auc_aupr, baseline_predict, classification_metrics, regression_metrics, residual_score, BaselineKind, ClassificationReport,
    DetectionReport, RegressionReport,
};
use crate::nn::{AdamWConfig, EncoderConfig, PatchEncoder};
use crate::patching::PatchingConfig;
use crate::pretrain::{pretrain, prepare_samples, EpochRecord, PretrainConfig, PretrainModel};
use crate::trajectory::{fit_norm_stats, normalize, parse_trajectory_file, split_by_time, IngestConfig, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ftp,
    Fr,
    Ad,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Ftp => "ftp",
            Task::Fr => "fr",
            Task::Ad => "ad",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Trajectory table to read instead of generating synthetic flights.
    pub path: Option<PathBuf>,
    pub count_per_class: usize,
    /// Synthetic classes; the built-in corridors when absent.
    pub classes: Option<Vec<ClassSpec>>,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            count_per_class: 50,
            classes: None,
            train_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtpConfig {
    /// Observed points per prediction window.
    pub history: usize,
    pub h_max: usize,
    pub horizons: Vec<usize>,
    /// Offset between consecutive windows on one trajectory.
    pub window_stride: usize,
}

impl Default for FtpConfig {
    fn default() -> Self {
        Self {
            history: 240,
            h_max: 60,
            horizons: HORIZONS.to_vec(),
            window_stride: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdConfig {
    pub kinds: Vec<AnomalyKind>,
    /// Share of the test set replaced by anomalous copies.
    pub contamination: f64,
    /// Share of the head training set replaced by anomalous copies when
    /// `paired` is off.
    pub train_anomaly_fraction: f64,
    /// Train on every clean trajectory plus an anomalous twin of each.
    pub paired: bool,
    /// Affected points per anomaly.
    pub duration: usize,
    /// Anomaly starts are drawn uniformly from this range of trajectory
    /// fractions.
    pub start_range: [f64; 2],
    /// Magnitude overrides keyed by kind name (`SMA`, `HD`, `VD`, `GoAround`).
    pub magnitudes: BTreeMap<String, f64>,
    /// Seeds of the random-scorer control.
    pub control_seeds: usize,
}

impl Default for AdConfig {
    fn default() -> Self {
        Self {
            kinds: AnomalyKind::ALL.to_vec(),
            contamination: 0.05,
            train_anomaly_fraction: 0.5,
            paired: true,
            duration: 24,
            start_range: [0.15, 0.6],
            magnitudes: BTreeMap::new(),
            control_seeds: 10,
        }
    }
}

impl AdConfig {
    pub fn magnitude(&self, kind: AnomalyKind) -> f64 {
        self.magnitudes.get(kind.as_str()).copied().unwrap_or_else(|| kind.default_magnitude())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    #[serde(flatten)]
    pub train: HeadTrainConfig,
    /// Hidden width of the FR and AD perceptrons.
    pub hidden: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            train: HeadTrainConfig::default(),
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "desk_patching")]
    pub patching: PatchingConfig,
    #[serde(default = "desk_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default = "desk_pretrain")]
    pub pretrain: PretrainConfig,
    /// Pretrained checkpoint to start from instead of pretraining.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub head: HeadSection,
    #[serde(default)]
    pub ftp: FtpConfig,
    #[serde(default)]
    pub ad: AdConfig,
}

pub const DESK_PATCH_SIZE: usize = 16;
pub const DESK_NUM_PATCHES: usize = 12;

pub fn desk_patching() -> PatchingConfig {
    PatchingConfig::with_geometry(DESK_PATCH_SIZE, DESK_NUM_PATCHES)
}

fn desk_encoder() -> EncoderConfig {
    EncoderConfig::desk(DESK_PATCH_SIZE, DESK_NUM_PATCHES)
}

fn desk_pretrain() -> PretrainConfig {
    PretrainConfig {
        epochs: 20,
        batch_size: 8,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        ..PretrainConfig::default()
    }
}

impl ExperimentConfig {
    pub fn desk(task: Task, seed: u64) -> Self {
        let mut cfg = Self {
            task,
            seed,
            data: DataConfig::default(),
            patching: desk_patching(),
            encoder: desk_encoder(),
            pretrain: desk_pretrain(),
            checkpoint: None,
            head: HeadSection::default(),
            ftp: FtpConfig::default(),
            ad: AdConfig::default(),
        };
        if task == Task::Ad {
            cfg.data.count_per_class = 100;
            cfg.head.train.freeze_encoder = false;
            cfg.head.train.epochs = 50;
            cfg.head.train.optimizer.lr = 1e-3;
        }
        cfg
    }

    /// Parses a config; every key left out takes its value from
    /// [`ExperimentConfig::desk`] for the given task and seed.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, None, None)
    }

    /// Like [`ExperimentConfig::from_toml`], with `task` and `seed` taking
    /// precedence over the document.
    pub fn from_toml_with(text: &str, task: Option<Task>, seed: Option<u64>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Head {
            task: Task,
            seed: u64,
        }
        let mut user: toml::Table = toml::from_str(text)?;
        if let Some(task) = task {
            user.insert("task".into(), toml::Value::String(task.as_str().into()));
        }
        if let Some(seed) = seed {
            let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} exceeds i64")))?;
            user.insert("seed".into(), toml::Value::Integer(seed));
        }
        let head: Head = toml::Value::Table(user.clone()).try_into()?;
        let mut base = toml::Table::try_from(Self::desk(head.task, head.seed))
            .map_err(|e| Error::Config(format!("cannot encode desk defaults: {e}")))?;
        merge_tables(&mut base, user);
        let cfg: Self = toml::Value::Table(base).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.patching.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        if (self.patching.patch_size, self.patching.num_patches) != (self.encoder.patch_size, self.encoder.num_patches) {
            return Err(Error::Config(format!(
                "patching geometry {}x{} differs from encoder geometry {}x{}",
                self.patching.num_patches, self.patching.patch_size, self.encoder.num_patches, self.encoder.patch_size
            )));
        }
        if let Some(&h) = self.ftp.horizons.iter().find(|&&h| h == 0 || h > self.ftp.h_max) {
            return Err(Error::HorizonRange {
                horizon: h,
                max: self.ftp.h_max,
            });
        }
        if self.ftp.window_stride == 0 {
            return Err(Error::Config("window_stride must be positive".into()));
        }
        let [lo, hi] = self.ad.start_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("anomaly start range {lo}..{hi} outside [0, 1)")));
        }
        for name in self.ad.magnitudes.keys() {
            if !AnomalyKind::ALL.iter().any(|k| k.as_str() == name) {
                return Err(Error::Config(format!("unknown anomaly kind `{name}`")));
            }
        }
        if !(self.ad.contamination > 0.0 && self.ad.contamination < 1.0)
            || !(self.ad.train_anomaly_fraction > 0.0 && self.ad.train_anomaly_fraction < 1.0)
        {
            return Err(Error::Config("anomaly fractions must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Four synthetic corridors between distinct terminal areas. Each climbs out,
/// turns twice en route and descends into its destination.
pub fn desk_classes() -> Vec<ClassSpec> {
    let route = |wps: Vec<[f64; 3]>, holding: usize| RouteSpec {
        holding_count: holding,
        noise_std: [4e-4, 4e-4, 0.05, 1e-4, 1e-4, 0.02],
        waypoint_jitter: 0.25,
        ..RouteSpec::new(wps, 0.04, 6.0, 6.0)
    };
    vec![
        ClassSpec {
            label: "north".into(),
            route: route(vec![[0.0, 0.0, 20.0], [4.0, 2.0, 300.0], [7.0, 7.0, 300.0], [11.0, 9.0, 20.0]], 0),
        },
        ClassSpec {
            label: "south".into(),
            route: route(vec![[0.0, 10.0, 20.0], [4.5, 8.0, 320.0], [7.5, 3.5, 320.0], [12.0, 1.5, 20.0]], 0),
        },
        ClassSpec {
            label: "west".into(),
            route: route(vec![[13.0, 1.0, 20.0], [9.0, 3.0, 280.0], [5.5, 7.0, 280.0], [1.0, 8.0, 20.0]], 1),
        },
        ClassSpec {
            label: "east".into(),
            route: route(vec![[5.0, -2.0, 20.0], [6.5, 3.0, 340.0], [4.0, 8.0, 340.0], [7.0, 12.5, 20.0]], 0),
        },
    ]
}

/// Reads the configured table or generates the synthetic dataset.
pub fn load_dataset(data: &DataConfig, seed: u64) -> Result<Vec<Trajectory>> {
    match &data.path {
        Some(path) => {
            let parsed = parse_trajectory_file(BufReader::new(File::open(path)?), &IngestConfig::default())?;
            for (line, message) in parsed.row_errors() {
                log::warn!("{}:{line}: {message}", path.display());
            }
            Ok(parsed.trajectories)
        }
        None => {
            let classes = data.classes.clone().unwrap_or_else(desk_classes);
            generate_dataset(&classes, data.count_per_class, seed)
        }
    }
}

/// Loss curve entry without wall-clock time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub l_mse: f64,
    pub l_md: f64,
    pub l_m: f64,
    pub train_l_m: f64,
    pub masked_points: usize,
}

impl From<&EpochRecord> for CurvePoint {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            l_mse: r.l_mse,
            l_md: r.l_md,
            l_m: r.l_m,
            train_l_m: r.train_l_m,
            masked_points: r.masked_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonResult {
    pub horizon: usize,
    pub model: RegressionReport,
    pub constant_position: RegressionReport,
    pub linear_extrapolation: RegressionReport,
    /// `1 - model MDE / constant-position MDE`.
    pub mde_gain_vs_constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtpResults {
    pub train_windows: usize,
    pub test_windows: usize,
    pub head_curve: Vec<f64>,
    pub horizons: Vec<HorizonResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrResults {
    pub classes: Vec<String>,
    pub head_curve: Vec<f64>,
    pub model: ClassificationReport,
    /// Nearest class centroid of the mean normalized features.
    pub nearest_centroid: ClassificationReport,
    pub predictions: Vec<(String, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindResult {
    pub kind: AnomalyKind,
    pub magnitude: f64,
    pub train_anomalies: usize,
    pub head_curve: Vec<f64>,
    pub detection: DetectionReport,
    pub random_control_aupr: Vec<f64>,
    /// Distance-threshold floor on normalized positions.
    pub residual_baseline: DetectionReport,
    /// `(recall, precision)` after each distinct threshold.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdResults {
    pub kinds: Vec<KindResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskResults {
    Ftp(FtpResults),
    Fr(FrResults),
    Ad(AdResults),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: Task,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub pretrain_curve: Vec<CurvePoint>,
    pub results: TaskResults,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub timings: Timings,
    pub pipeline: InputPipeline,
    pub pretrained: PretrainModel,
}

const STAGE_DATA: u64 = 1;
const STAGE_INIT: u64 = 2;
const STAGE_PRETRAIN: u64 = 3;
const STAGE_HEAD: u64 = 4;
const STAGE_INJECT: u64 = 5;
const STAGE_CONTROL: u64 = 6;

struct Clock {
    start: Instant,
    stages: BTreeMap<String, f64>,
}

impl Clock {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f().map_err(|e| e.at_stage(stage));
        *self.stages.entry(stage.to_string()).or_default() += t0.elapsed().as_secs_f64();
        out
    }
}

/// Normalization is fitted on the training trajectories only.
pub fn fit_pipeline(train: &[Trajectory], patching: PatchingConfig) -> Result<InputPipeline> {
    Ok(InputPipeline {
        norm: fit_norm_stats(train)?,
        patching,
    })
}

/// Pretrains a freshly initialized encoder on `train`.
pub fn pretrain_encoder(
    train: &[Trajectory],
    pipeline: &InputPipeline,
    encoder: EncoderConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<crate::pretrain::PretrainOutcome> {
    let normalized: Vec<Trajectory> = train.iter().map(|t| normalize(t, &pipeline.norm)).collect();
    let samples = prepare_samples(&normalized, &pipeline.patching)?;
    let model = PretrainModel::new(encoder, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STAGE_INIT, 0)))?;
    let cfg = PretrainConfig {
        seed: derive_seed(seed, STAGE_PRETRAIN, 0),
        ..*config
    };
    pretrain(&samples, model, &cfg)
}

/// The dataset `run_experiment` starts from.
pub fn experiment_dataset(config: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    load_dataset(&config.data, derive_seed(config.seed, STAGE_DATA, 0))
}

/// Runs every stage of the configured task.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mut clock = Clock {
        start: Instant::now(),
        stages: BTreeMap::new(),
    };
    let seed = config.seed;
    let data = clock.run("data", || experiment_dataset(config))?;
    let (train, test) = clock.run("split", || split_by_time(&data, config.data.train_fraction))?;
    let pipeline = clock.run("normalize", || fit_pipeline(&train, config.patching))?;
    let (pretrained, curve) = clock.run("pretrain", || match &config.checkpoint {
        Some(path) => {
            let ck = crate::checkpoint::Checkpoint::load(path)?;
            Ok((ck.to_pretrain()?, Vec::new()))
        }
        None => {
            let out = pretrain_encoder(&train, &pipeline, config.encoder, &config.pretrain, seed)?;
            let curve = out.curve.iter().map(CurvePoint::from).collect();
            Ok((out.model, curve))
        }
    })?;
    let encoder = &pretrained.encoder;
    let results = match config.task {
        Task::Ftp => TaskResults::Ftp(run_ftp(config, encoder, &pipeline, &train, &test, &mut clock)?),
        Task::Fr => TaskResults::Fr(run_fr(config, encoder, &pipeline, &train, &test, &mut clock)?),
        Task::Ad => TaskResults::Ad(run_ad(config, encoder, &pipeline, &train, &test, &mut clock)?),
    };
    let report = ExperimentReport {
        task: config.task,
        seed,
        config: config.clone(),
        train_trajectories: train.len(),
        test_trajectories: test.len(),
        pretrain_curve: curve,
        results,
    };
    let timings = Timings {
        total_seconds: clock.start.elapsed().as_secs_f64(),
        stages: clock.stages,
    };
    Ok(ExperimentOutcome {
        report,
        timings,
        pipeline,
        pretrained,
    })
}

fn head_config(config: &ExperimentConfig, stream: u64) -> HeadTrainConfig {
    HeadTrainConfig {
        seed: derive_seed(config.seed, STAGE_HEAD, stream),
        ..config.head.train
    }
}

/// History/future windows cut from one trajectory.
pub fn ftp_windows(traj: &Trajectory, history: usize, h_max: usize, stride: usize) -> Vec<Trajectory> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + history + h_max <= traj.len() {
        let mut w = traj.slice(start..start + history + h_max);
        w.id = format!("{}@{start}", traj.id);
        out.push(w);
        start += stride;
    }
    out
}

fn collect_windows(set: &[Trajectory], ftp: &FtpConfig) -> Vec<Trajectory> {
    set.iter()
        .flat_map(|t| ftp_windows(t, ftp.history, ftp.h_max, ftp.window_stride))
        .collect()
}

fn run_ftp(
    config: &ExperimentConfig,
    encoder: &PatchEncoder,
    pipeline: &InputPipeline,
    train: &[Trajectory],
    test: &[Trajectory],
    clock: &mut Clock,
) -> Result<FtpResults> {
    let ftp = &config.ftp;
    let (train_w, test_w) = (collect_windows(train, ftp), collect_windows(test, ftp));
    if train_w.is_empty() || test_w.is_empty() {
        return Err(Error::Precondition(format!(
            "no prediction windows of {} + {} points",
            ftp.history, ftp.h_max
        ))
        .at_stage("windows"));
    }
    let trained = clock.run("head", || train_task_head(config, encoder, pipeline, train, None))?;
    let Head::Ftp(head) = &trained.outcome.head else {
        unreachable!("ftp head in, ftp head out")
    };
    let trained = &trained.outcome;
    clock.run("evaluate", || {
        let mut per_h: BTreeMap<usize, [Vec<[f64; 3]>; 4]> = BTreeMap::new();
        for w in &test_w {
            let history = w.slice(0..ftp.history);
            let input = pipeline.prepare(&history)?;
            let out = predict_example(&trained.encoder, head, &input.values)?;
            for &h in &ftp.horizons {
                let z: [f64; 3] = std::array::from_fn(|k| input.last_position[k] + out[(h - 1) * 3 + k]);
                let entry = per_h.entry(h).or_default();
                entry[0].push(pipeline.norm.denormalize_position(z));
                entry[1].push(baseline_predict(&history, h, BaselineKind::ConstantPosition)?);
                entry[2].push(baseline_predict(&history, h, BaselineKind::LinearExtrapolation)?);
                entry[3].push(w.points[ftp.history + h - 1].position());
            }
        }
        let horizons = per_h
            .into_iter()
            .map(|(h, [model, constant, linear, truth])| {
                let model = regression_metrics(&model, &truth, h)?;
                let constant_position = regression_metrics(&constant, &truth, h)?;
                Ok(HorizonResult {
                    horizon: h,
                    mde_gain_vs_constant: 1.0 - model.mde_km / constant_position.mde_km,
                    model,
                    constant_position,
                    linear_extrapolation: regression_metrics(&linear, &truth, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FtpResults {
            train_windows: trained_windows(train, ftp),
            test_windows: test_w.len(),
            head_curve: trained.curve.clone(),
            horizons,
        })
    })
}

fn class_names(set: &[Trajectory]) -> Result<Vec<String>> {
    let mut names: Vec<String> = set
        .iter()
        .map(|t| {
            t.label
                .clone()
                .ok_or_else(|| Error::Precondition(format!("trajectory {} has no class label", t.id)))
        })
        .collect::<Result<_>>()?;
    names.sort();
    names.dedup();
    if names.len() < 2 {
        return Err(Error::Precondition("recognition needs at least 2 classes".into()));
    }
    Ok(names)
}

fn class_index(names: &[String], traj: &Trajectory) -> Result<usize> {
    let label = traj.label.as_deref().unwrap_or_default();
    names
        .iter()
        .position(|n| n == label)
        .ok_or_else(|| Error::Precondition(format!("class `{label}` of {} unseen in training", traj.id)))
}

fn mean_features(pipeline: &InputPipeline, traj: &Trajectory) -> Vec<f64> {
    let z = normalize(traj, &pipeline.norm);
    let n = z.len() as f64;
    let mut m = vec![0.0; 6];
    for p in &z.points {
        for (a, v) in m.iter_mut().zip(p.features()) {
            *a += v / n;
        }
    }
    m
}

fn nearest_centroid(pipeline: &InputPipeline, names: &[String], train: &[Trajectory], test: &[Trajectory]) -> Result<Vec<usize>> {
    let mut sums = vec![vec![0.0; 6]; names.len()];
    let mut counts = vec![0usize; names.len()];
    for t in train {
        let c = class_index(names, t)?;
        for (s, v) in sums[c].iter_mut().zip(mean_features(pipeline, t)) {
            *s += v;
        }
        counts[c] += 1;
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    Ok(test
        .iter()
        .map(|t| {
            let f = mean_features(pipeline, t);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..centroids.len())
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .expect("at least two classes")
        })
        .collect())
}

fn run_fr(
    config: &ExperimentConfig,
    encoder: &PatchEncoder,
    pipeline: &InputPipeline,
    train: &[Trajectory],
    test: &[Trajectory],
    clock: &mut Clock,
) -> Result<FrResults> {
    let TrainedHead {
        outcome: trained,
        class_names: names,
        ..
    } = clock.run("head", || train_task_head(config, encoder, pipeline, train, None))?;
    let Head::Fr(head) = &trained.head else {
        unreachable!("fr head in, fr head out")
    };
    clock.run("evaluate", || {
        let mut pred = Vec::with_capacity(test.len());
        let mut truth = Vec::with_capacity(test.len());
        let mut predictions = Vec::with_capacity(test.len());
        for t in test {
            let probs = crate::heads::classify_flight(&trained.encoder, head, pipeline, t)?;
            let p = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).expect("classes");
            let y = class_index(&names, t)?;
            pred.push(p);
            truth.push(y);
            predictions.push((t.id.clone(), y, p));
        }
        let centroid = nearest_centroid(pipeline, &names, train, test)?;
        Ok(FrResults {
            head_curve: trained.curve.clone(),
            model: classification_metrics(&pred, &truth, names.len())?,
            nearest_centroid: classification_metrics(&centroid, &truth, names.len())?,
            classes: names.clone(),
            predictions,
        })
    })
}

/// A trained head with what is needed to use it.
#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub outcome: HeadOutcome,
    /// Class names in head output order; empty outside recognition.
    pub class_names: Vec<String>,
    pub examples: usize,
    pub train_anomalies: usize,
}

/// Builds the training examples of `config.task` from `train` and fits a
/// fresh head. Anomaly detection needs the kind and its position in
/// `config.ad.kinds`, which selects the seed stream.
pub fn train_task_head(
    config: &ExperimentConfig,
    encoder: &PatchEncoder,
    pipeline: &InputPipeline,
    train: &[Trajectory],
    ad_kind: Option<(usize, AnomalyKind)>,
) -> Result<TrainedHead> {
    let d = config.encoder.d_model;
    let (examples, head, class_names, train_anomalies, stream) = match config.task {
        Task::Ftp => {
            let ftp = &config.ftp;
            let windows = collect_windows(train, ftp);
            if windows.is_empty() {
                return Err(Error::Precondition(format!(
                    "no prediction windows of {} + {} points",
                    ftp.history, ftp.h_max
                ))
                .at_stage("windows"));
            }
            let examples = windows
                .iter()
                .map(|w| ftp_example(pipeline, w, ftp.history, ftp.h_max))
                .collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STAGE_HEAD, 1000));
            (examples, Head::Ftp(FtpHead::new(d, ftp.h_max, &mut rng)), Vec::new(), 0, 0)
        }
        Task::Fr => {
            let names = class_names(train).map_err(|e| e.at_stage("labels"))?;
            let examples = train
                .iter()
                .map(|t| class_example(pipeline, t, class_index(&names, t)?))
                .collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STAGE_HEAD, 1000));
            let head = Head::Fr(MlpHead::new(d, config.head.hidden, names.len(), &mut rng));
            (examples, head, names, 0, 0)
        }
        Task::Ad => {
            let (k, kind) = ad_kind.ok_or_else(|| Error::Config("anomaly head needs a kind".into()))?;
            let (ad, k) = (&config.ad, k as u64);
            let seed = derive_seed(config.seed, STAGE_INJECT, 2 * k);
            let (set, flags) = if ad.paired {
                with_twins(train, kind, ad, seed)?
            } else {
                contaminate(train, kind, ad.train_anomaly_fraction, ad, seed)?
            };
            let examples = set
                .iter()
                .zip(&flags)
                .map(|(t, &y)| anomaly_example(pipeline, t, y))
                .collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STAGE_HEAD, 1000 + k));
            let head = Head::Ad(MlpHead::new(d, config.head.hidden, 1, &mut rng));
            let positives = flags.iter().filter(|f| **f).count();
            (examples, head, Vec::new(), positives, 1 + k)
        }
    };
    let outcome = train_head(encoder, head, &examples, &head_config(config, stream))?;
    Ok(TrainedHead {
        outcome,
        class_names,
        examples: examples.len(),
        train_anomalies,
    })
}

fn trained_windows(train: &[Trajectory], ftp: &FtpConfig) -> usize {
    collect_windows(train, ftp).len()
}

/// Replaces a `fraction` share of `set` (chosen by seeded shuffle) with
/// anomalous copies of kind `kind`. Trajectories where the kind does not
/// apply are skipped. Returns the new set and the anomaly flags.
pub fn contaminate(set: &[Trajectory], kind: AnomalyKind, fraction: f64, ad: &AdConfig, seed: u64) -> Result<(Vec<Trajectory>, Vec<bool>)> {
    let target = ((fraction * set.len() as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng);
    let mut out = set.to_vec();
    let mut flags = vec![false; set.len()];
    let mut done = 0;
    for &idx in &order {
        if done == target {
            break;
        }
        let [lo, hi] = ad.start_range;
        let start = lo + (hi - lo) * rng.random::<f64>();
        let spec = AnomalySpec {
            magnitude: ad.magnitude(kind),
            ..AnomalySpec::new(kind, start, ad.duration)
        };
        match inject_anomaly(&set[idx], &spec, rng.random()) {
            Ok(t) => {
                out[idx] = t;
                flags[idx] = true;
                done += 1;
            }
            Err(Error::InapplicableAnomaly { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if done < target {
        return Err(Error::Precondition(format!("only {done} of {target} {kind} anomalies could be injected")));
    }
    Ok((out, flags))
}

/// The clean set followed by one anomalous twin per trajectory that admits
/// the kind.
pub fn with_twins(set: &[Trajectory], kind: AnomalyKind, ad: &AdConfig, seed: u64) -> Result<(Vec<Trajectory>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = set.to_vec();
    let mut flags = vec![false; set.len()];
    for t in set {
        let [lo, hi] = ad.start_range;
        let start = lo + (hi - lo) * rng.random::<f64>();
        let spec = AnomalySpec {
            magnitude: ad.magnitude(kind),
            ..AnomalySpec::new(kind, start, ad.duration)
        };
        match inject_anomaly(t, &spec, rng.random()) {
            Ok(a) => {
                out.push(a);
                flags.push(true);
            }
            Err(Error::InapplicableAnomaly { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if out.len() == set.len() {
        return Err(Error::Precondition(format!("no trajectory admits a {kind} anomaly")));
    }
    Ok((out, flags))
}

/// `(recall, precision)` after each distinct score threshold, descending.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|l| **l).count().max(1) as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        seen += 1;
        if labels[i] {
            tp += 1;
        }
        if k + 1 == order.len() || scores[order[k + 1]] != scores[i] {
            out.push((tp as f64 / pos, tp as f64 / seen as f64));
        }
    }
    out
}

const RESIDUAL_HALF_WINDOW: usize = 3;

fn run_ad(
    config: &ExperimentConfig,
    encoder: &PatchEncoder,
    pipeline: &InputPipeline,
    train: &[Trajectory],
    test: &[Trajectory],
    clock: &mut Clock,
) -> Result<AdResults> {
    let ad = &config.ad;
    let mut kinds = Vec::new();
    for (k, &kind) in ad.kinds.iter().enumerate() {
        let k = k as u64;
        let (test_set, test_flags) = clock.run("inject", || {
            contaminate(test, kind, ad.contamination, ad, derive_seed(config.seed, STAGE_INJECT, 2 * k + 1))
        })?;
        let TrainedHead {
            outcome: trained,
            train_anomalies,
            ..
        } = clock.run("head", || train_task_head(config, encoder, pipeline, train, Some((k as usize, kind))))?;
        let Head::Ad(head) = &trained.head else {
            unreachable!("ad head in, ad head out")
        };
        let result = clock.run("evaluate", || {
            let scores: Vec<f64> = test_set
                .iter()
                .map(|t| crate::heads::score_anomaly(&trained.encoder, head, pipeline, t))
                .collect::<Result<_>>()?;
            let detection = auc_aupr(&scores, &test_flags)?;
            let random_control_aupr = (0..ad.control_seeds)
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STAGE_CONTROL, 100 * k + r as u64));
                    let random: Vec<f64> = (0..scores.len()).map(|_| rng.random()).collect();
                    Ok(auc_aupr(&random, &test_flags)?.aupr)
                })
                .collect::<Result<Vec<_>>>()?;
            let residual: Vec<f64> = test_set
                .iter()
                .map(|t| residual_score(&normalize(t, &pipeline.norm), RESIDUAL_HALF_WINDOW))
                .collect();
            let residual_baseline = auc_aupr(&residual, &test_flags)?;
            Ok(KindResult {
                kind,
                residual_baseline,
                magnitude: ad.magnitude(kind),
                train_anomalies,
                head_curve: trained.curve.clone(),
                pr_curve: pr_curve(&scores, &test_flags),
                detection,
                random_control_aupr,
            })
        })?;
        log::info!(
            "{kind}: AUC {:.3} AUPR {:.3}",
            result.detection.auc,
            result.detection.aupr
        );
        kinds.push(result);
    }
    Ok(AdResults { kinds })
}

/// Pooled representations of a dataset, in order.
pub fn embed_dataset(encoder: &PatchEncoder, pipeline: &InputPipeline, set: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
    set.iter().map(|t| Ok(embed(encoder, pipeline, t)?.pooled)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::desk(Task::Ad, 3);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let minimal = ExperimentConfig::from_toml("task = \"fr\"\nseed = 5\n").unwrap();
        assert_eq!(minimal, ExperimentConfig::desk(Task::Fr, 5));
    }

    #[test]
    fn partial_sections_keep_desk_values() {
        let cfg = ExperimentConfig::from_toml("task = \"ftp\"\nseed = 2\n[encoder]\nlayers = 1\n").unwrap();
        let mut expected = ExperimentConfig::desk(Task::Ftp, 2);
        expected.encoder.layers = 1;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn config_rejects_bad_fields() {
        assert!(ExperimentConfig::from_toml("task = \"ftp\"\nseed = 1\nbogus = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("task = \"ftp\"\nseed = 1\n[ftp]\nhorizons = [61]\n").is_err());
        assert!(ExperimentConfig::from_toml("task = \"ad\"\nseed = 1\n[ad.magnitudes]\nXY = 1.0\n").is_err());
    }

    #[test]
    fn windows_tile_the_trajectory() {
        let data = generate_dataset(&desk_classes()[..1], 1, 0).unwrap();
        let w = ftp_windows(&data[0], 100, 20, 50);
        assert!(!w.is_empty());
        for (k, win) in w.iter().enumerate() {
            assert_eq!(win.len(), 120);
            assert_eq!(win.points[0].t, data[0].points[50 * k].t);
        }
    }

    #[test]
    fn pr_curve_steps() {
        let c = pr_curve(&[0.9, 0.8, 0.8, 0.1], &[true, false, true, false]);
        assert_eq!(c, vec![(0.5, 1.0), (1.0, 2.0 / 3.0), (1.0, 0.5)]);
    }

    #[test]
    fn contamination_counts() {
        let data = generate_dataset(&desk_classes(), 5, 1).unwrap();
        let ad = AdConfig::default();
        for kind in AnomalyKind::ALL {
            let (set, flags) = contaminate(&data, kind, 0.25, &ad, 9).unwrap();
            assert_eq!(flags.iter().filter(|f| **f).count(), 5);
            for (t, f) in set.iter().zip(&flags) {
                assert_eq!(t.anomaly_tag.is_some(), *f);
            }
        }
    }

    #[test]
    fn twins_follow_the_clean_set() {
        let data = generate_dataset(&desk_classes(), 3, 1).unwrap();
        let ad = AdConfig::default();
        let (set, flags) = with_twins(&data, AnomalyKind::Hd, &ad, 4).unwrap();
        assert_eq!(set.len(), 2 * data.len());
        assert_eq!(&set[..data.len()], &data[..]);
        assert!(flags[..data.len()].iter().all(|f| !f) && flags[data.len()..].iter().all(|f| *f));
        for (twin, clean) in set[data.len()..].iter().zip(&data) {
            assert_eq!(twin.id, clean.id);
        }
    }
}

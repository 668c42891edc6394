//! Synthetic flight generator and anomaly injection.
//!
//! Flights follow straight constant-speed legs between waypoints, with
//! fly-by circular turns at the given turn rate, linear climbs and descents,
//! and optional racetrack holding patterns. Positions are planar degrees;
//! altitude is in flight levels. Velocities are backward positional deltas
//! computed before noise is added.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, TrajectoryPoint, NUM_FEATURES};

const MAX_STEPS: usize = 200_000;

/// Seconds between consecutive instance start times in generated datasets.
pub const START_SPACING_S: f64 = 600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    /// (lon, lat, alt) triples.
    pub waypoints: Vec<[f64; 3]>,
    /// Horizontal distance flown per step, degrees.
    pub cruise_speed: f64,
    /// Maximum heading change per step, degrees.
    pub turn_rate: f64,
    /// Maximum altitude change per step, flight levels.
    pub climb_rate: f64,
    #[serde(default)]
    pub holding_count: usize,
    /// Straight-leg length of a holding racetrack, in steps.
    #[serde(default = "default_holding_leg")]
    pub holding_leg: usize,
    /// Gaussian noise std for lon, lat, alt, v_lon, v_lat, v_alt.
    #[serde(default)]
    pub noise_std: [f64; NUM_FEATURES],
    #[serde(default = "default_steps_per_second")]
    pub steps_per_second: f64,
    /// Per-instance Gaussian jitter applied to waypoint lon/lat, degrees.
    #[serde(default)]
    pub waypoint_jitter: f64,
    #[serde(default)]
    pub start_time: f64,
}

fn default_holding_leg() -> usize {
    10
}

fn default_steps_per_second() -> f64 {
    // one point every 20 s
    0.05
}

impl RouteSpec {
    pub fn new(waypoints: Vec<[f64; 3]>, cruise_speed: f64, turn_rate: f64, climb_rate: f64) -> Self {
        Self {
            waypoints,
            cruise_speed,
            turn_rate,
            climb_rate,
            holding_count: 0,
            holding_leg: default_holding_leg(),
            noise_std: [0.0; NUM_FEATURES],
            steps_per_second: default_steps_per_second(),
            waypoint_jitter: 0.0,
            start_time: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.cruise_speed > 0.0
            && self.turn_rate > 0.0
            && self.climb_rate > 0.0
            && self.steps_per_second > 0.0
            && self.holding_leg > 0;
        if self.waypoints.len() < 2 {
            return Err(Error::Config("a route needs at least 2 waypoints".into()));
        }
        if !rates_ok {
            return Err(Error::Config("route rates must be > 0".into()));
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) || !(self.waypoint_jitter >= 0.0) {
            return Err(Error::Config("noise std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnomalyKind {
    #[serde(rename = "SMA")]
    Sma,
    #[serde(rename = "HD")]
    Hd,
    #[serde(rename = "VD")]
    Vd,
    GoAround,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [AnomalyKind::Sma, AnomalyKind::Hd, AnomalyKind::Vd, AnomalyKind::GoAround];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnomalyKind::Sma => "SMA",
            AnomalyKind::Hd => "HD",
            AnomalyKind::Vd => "VD",
            AnomalyKind::GoAround => "GoAround",
        }
    }

    /// Calibrated default magnitude in feature units.
    pub fn default_magnitude(&self) -> f64 {
        match self {
            AnomalyKind::Sma => 0.08,
            AnomalyKind::Hd => 0.8,
            AnomalyKind::Vd => 40.0,
            AnomalyKind::GoAround => 30.0,
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub start_fraction: f64,
    /// Number of affected points.
    pub duration: usize,
    pub magnitude: f64,
}

impl AnomalySpec {
    pub fn new(kind: AnomalyKind, start_fraction: f64, duration: usize) -> Self {
        Self {
            kind,
            start_fraction,
            duration,
            magnitude: kind.default_magnitude(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_duration = match self.kind {
            AnomalyKind::Sma => 2,
            _ => 3,
        };
        if !(0.0..1.0).contains(&self.start_fraction) {
            return Err(Error::Config(format!("start fraction {} outside [0, 1)", self.start_fraction)));
        }
        if self.duration < min_duration {
            return Err(Error::Config(format!(
                "{} needs duration >= {min_duration}, got {}",
                self.kind, self.duration
            )));
        }
        if !(self.magnitude >= 0.0) {
            return Err(Error::Config("anomaly magnitude must be >= 0".into()));
        }
        Ok(())
    }
}

fn horizontal_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

fn bearing(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0])
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

struct Flight<'a> {
    spec: &'a RouteSpec,
    pos: [f64; 2],
    alt: f64,
    heading: f64,
    track: Vec<[f64; 3]>,
}

impl Flight<'_> {
    fn record(&mut self) -> Result<()> {
        if self.track.len() >= MAX_STEPS {
            return Err(Error::DegenerateRoute(format!("route did not converge in {MAX_STEPS} steps")));
        }
        self.track.push([self.pos[0], self.pos[1], self.alt]);
        Ok(())
    }

    fn step(&mut self, target_alt: f64) -> Result<()> {
        let speed = self.spec.cruise_speed;
        self.pos[0] += speed * self.heading.cos();
        self.pos[1] += speed * self.heading.sin();
        let dz = (target_alt - self.alt).clamp(-self.spec.climb_rate, self.spec.climb_rate);
        self.alt += dz;
        self.record()
    }

    fn straight(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step(self.alt)?;
        }
        Ok(())
    }

    fn turn_by(&mut self, total: f64) -> Result<()> {
        let rate = self.spec.turn_rate.to_radians();
        let mut left = total;
        while left.abs() > 1e-12 {
            let d = left.clamp(-rate, rate);
            self.heading = wrap_angle(self.heading + d);
            left -= d;
            self.step(self.alt)?;
        }
        Ok(())
    }

    fn racetrack(&mut self) -> Result<()> {
        let leg = self.spec.holding_leg;
        self.straight(leg)?;
        self.turn_by(-PI)?;
        self.straight(leg)?;
        self.turn_by(-PI)
    }
}

/// Generates one clean-then-noised trajectory; pure in `(spec, seed)`.
pub fn generate_trajectory(spec: &RouteSpec, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, spec.waypoint_jitter.max(f64::MIN_POSITIVE)).expect("finite std");
    let waypoints: Vec<[f64; 3]> = spec
        .waypoints
        .iter()
        .map(|w| {
            if spec.waypoint_jitter > 0.0 {
                [w[0] + jitter.sample(&mut rng), w[1] + jitter.sample(&mut rng), w[2]]
            } else {
                *w
            }
        })
        .collect();
    let horiz = |k: usize| [waypoints[k][0], waypoints[k][1]];
    for k in 1..waypoints.len() {
        let d = horizontal_distance(horiz(k - 1), horiz(k));
        if d < spec.cruise_speed {
            return Err(Error::DegenerateRoute(format!(
                "waypoints {} and {k} are {d:.6} deg apart, less than one step",
                k - 1
            )));
        }
    }

    let last = waypoints.len() - 1;
    let hold_at = last.saturating_sub(1).max(1);
    let turn_radius = spec.cruise_speed / spec.turn_rate.to_radians();
    let mut flight = Flight {
        spec,
        pos: horiz(0),
        alt: waypoints[0][2],
        heading: bearing(horiz(0), horiz(1)),
        track: Vec::new(),
    };
    flight.record()?;
    let mut target = 1;
    loop {
        let here = flight.pos;
        let dist = horizontal_distance(here, horiz(target));
        let lead = if target < last {
            let inbound = bearing(horiz(target - 1), horiz(target));
            let outbound = bearing(horiz(target), horiz(target + 1));
            let change = wrap_angle(outbound - inbound).abs();
            (turn_radius * (change / 2.0).tan()).max(spec.cruise_speed)
        } else {
            spec.cruise_speed
        };
        if dist <= lead {
            if target == hold_at && spec.holding_count > 0 && target < last {
                for _ in 0..spec.holding_count {
                    flight.racetrack()?;
                }
            }
            if target == last {
                break;
            }
            target += 1;
            continue;
        }
        let desired = bearing(here, horiz(target));
        let rate = spec.turn_rate.to_radians();
        let change = wrap_angle(desired - flight.heading).clamp(-rate, rate);
        flight.heading = wrap_angle(flight.heading + change);
        flight.step(waypoints[target][2])?;
    }
    if target == last && spec.holding_count > 0 && hold_at == last {
        for _ in 0..spec.holding_count {
            flight.racetrack()?;
        }
    }

    let track = flight.track;
    if track.len() < 2 {
        return Err(Error::DegenerateRoute("route produced fewer than 2 points".into()));
    }
    let normals: Vec<Normal<f64>> = spec
        .noise_std
        .iter()
        .map(|s| Normal::new(0.0, s.max(f64::MIN_POSITIVE)).expect("finite std"))
        .collect();
    let mut points = Vec::with_capacity(track.len());
    for k in 0..track.len() {
        let (a, b) = if k == 0 { (0, 1) } else { (k - 1, k) };
        let vel = [
            track[b][0] - track[a][0],
            track[b][1] - track[a][1],
            track[b][2] - track[a][2],
        ];
        let mut f = [track[k][0], track[k][1], track[k][2], vel[0], vel[1], vel[2]];
        for (j, value) in f.iter_mut().enumerate() {
            if spec.noise_std[j] > 0.0 {
                *value += normals[j].sample(&mut rng);
            }
        }
        f[2] = f[2].max(0.0);
        points.push(TrajectoryPoint::new(spec.start_time + k as f64 / spec.steps_per_second, f));
    }
    Ok(Trajectory::new(format!("gen-{seed}"), points))
}

/// SplitMix64 finalizer used to derive per-instance seeds.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub label: String,
    pub route: RouteSpec,
}

/// Generates `count_per_class` trajectories per class. Start times interleave
/// classes so temporal splits keep every class on both sides.
pub fn generate_dataset(classes: &[ClassSpec], count_per_class: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(classes.len() * count_per_class);
    for (c, class) in classes.iter().enumerate() {
        for i in 0..count_per_class {
            let mut route = class.route.clone();
            route.start_time += (i * classes.len() + c) as f64 * START_SPACING_S;
            let mut traj = generate_trajectory(&route, derive_seed(seed, c as u64, i as u64))?;
            traj.id = format!("{}-{i:04}", class.label);
            traj.label = Some(class.label.clone());
            out.push(traj);
        }
    }
    Ok(out)
}

/// As [`generate_dataset`], requiring at least two classes.
pub fn generate_recognition_dataset(classes: &[ClassSpec], count_per_class: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if classes.len() < 2 {
        return Err(Error::Precondition(format!(
            "recognition needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    generate_dataset(classes, count_per_class, seed)
}

/// Ramp up, hold at 1, ramp down; reaches 1 for every `duration >= 3`.
fn ramp_profile(duration: usize) -> Vec<f64> {
    let ramp = (duration / 4).max(1) as f64;
    (0..duration)
        .map(|k| (k.min(duration - 1 - k) as f64 / ramp).min(1.0))
        .collect()
}

fn recompute_velocities(points: &mut [TrajectoryPoint], from: usize, to: usize, axes: &[usize]) {
    let n = points.len();
    for j in from..=(to + 1).min(n - 1) {
        let (a, b) = if j == 0 { (0, 1) } else { (j - 1, j) };
        let pa = points[a].position();
        let pb = points[b].position();
        let mut f = points[j].features();
        for &axis in axes {
            f[3 + axis] = pb[axis] - pa[axis];
        }
        points[j].set_features(f);
    }
}

fn find_descent(alt: &[f64], from: usize, width: usize) -> Option<usize> {
    let descends = |i: usize| i + width < alt.len() && alt[i] - alt[i + width] >= 0.5 * width as f64;
    (from..alt.len()).find(|&i| descends(i)).or_else(|| (0..from).find(|&i| descends(i)))
}

/// Injects one anomaly; `n`, timestamps and id are preserved.
pub fn inject_anomaly(traj: &Trajectory, spec: &AnomalySpec, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    let n = traj.len();
    let start = (spec.start_fraction * n as f64).floor() as usize;
    if start + spec.duration > n {
        return Err(Error::Precondition(format!(
            "anomaly window {start}..{} does not fit {n} points",
            start + spec.duration
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = traj.clone();
    let end = start + spec.duration - 1;
    let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
    match spec.kind {
        AnomalyKind::Sma => {
            for p in &mut out.points[start..=end] {
                p.lon += sign(&mut rng) * spec.magnitude;
                p.lat += sign(&mut rng) * spec.magnitude;
                p.alt = (p.alt + sign(&mut rng) * spec.magnitude).max(0.0);
            }
            recompute_velocities(&mut out.points, start, end, &[0, 1, 2]);
        }
        AnomalyKind::Hd => {
            let side = sign(&mut rng);
            let profile = ramp_profile(spec.duration);
            for (k, weight) in profile.iter().enumerate() {
                let i = start + k;
                let a = traj.points[i.saturating_sub(1)].position();
                let b = traj.points[(i + 1).min(n - 1)].position();
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let norm = (dx * dx + dy * dy).sqrt();
                if norm == 0.0 {
                    continue;
                }
                let offset = side * spec.magnitude * weight;
                out.points[i].lon += -dy / norm * offset;
                out.points[i].lat += dx / norm * offset;
            }
            recompute_velocities(&mut out.points, start, end, &[0, 1]);
        }
        AnomalyKind::Vd => {
            let side = sign(&mut rng);
            for (k, weight) in ramp_profile(spec.duration).iter().enumerate() {
                let p = &mut out.points[start + k];
                p.alt = (p.alt + side * spec.magnitude * weight).max(0.0);
            }
            recompute_velocities(&mut out.points, start, end, &[2]);
        }
        AnomalyKind::GoAround => {
            let alt: Vec<f64> = traj.points.iter().map(|p| p.alt).collect();
            let d = spec.duration;
            let i = find_descent(&alt, start, d).ok_or_else(|| Error::InapplicableAnomaly {
                kind: spec.kind.to_string(),
                reason: "trajectory has no descending segment".into(),
            })?;
            let peak = alt[i] + spec.magnitude;
            let climb_end = (i + d).min(n - 1);
            for j in i..=climb_end {
                out.points[j].alt = alt[i] + spec.magnitude * (j - i) as f64 / d as f64;
            }
            let rejoin = (i + 2 * d).min(n - 1);
            if rejoin > climb_end {
                let span = (rejoin - climb_end) as f64;
                for j in climb_end..=rejoin {
                    let w = (j - climb_end) as f64 / span;
                    out.points[j].alt = (peak + (alt[rejoin] - peak) * w).max(0.0);
                }
            }
            recompute_velocities(&mut out.points, i, rejoin, &[2]);
        }
    }
    out.anomaly_tag = Some(spec.kind.to_string());
    Ok(out)
}

/// Contamination plan used when emitting a dataset with anomalies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyPlan {
    /// Fraction of emitted trajectories that carry an anomaly.
    #[serde(default = "default_contamination")]
    pub contamination: f64,
    pub specs: Vec<AnomalySpec>,
}

fn default_contamination() -> f64 {
    0.05
}

/// Structured config read by the `synthesize` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count_per_class: usize,
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub anomalies: Option<AnomalyPlan>,
}

impl SyntheticConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Generates the dataset, then replaces a `contamination` share of it
    /// (chosen by seeded shuffle) with anomalous copies, cycling through the
    /// anomaly specs.
    pub fn generate(&self, seed: u64) -> Result<Vec<Trajectory>> {
        let mut data = generate_dataset(&self.classes, self.count_per_class, seed)?;
        if let Some(plan) = &self.anomalies {
            if plan.specs.is_empty() {
                return Err(Error::Config("anomaly plan without specs".into()));
            }
            let count = (plan.contamination * data.len() as f64).round() as usize;
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX, 0));
            for k in (1..order.len()).rev() {
                let j = rng.random_range(0..=k);
                order.swap(k, j);
            }
            for (m, &idx) in order.iter().take(count).enumerate() {
                let spec = &plan.specs[m % plan.specs.len()];
                data[idx] = inject_anomaly(&data[idx], spec, derive_seed(seed, u64::MAX, idx as u64 + 1))?;
            }
        }
        Ok(data)
    }
}

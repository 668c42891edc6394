//! Trajectory data model, table ingestion, validation, normalization and
//! temporal splitting.
//!
//! A trajectory table is comma-separated UTF-8 text with a header row. The
//! mandatory columns are `id, t, lon, lat, alt, v_lon, v_lat, v_alt`; `label`
//! and `anomaly_tag` are optional. Altitudes are flight levels (hundreds of
//! feet) and velocities are per-step displacements in the units of their
//! positional counterparts.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of attributes carried by every point.
pub const NUM_FEATURES: usize = 6;

/// Feature names in storage order.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = ["lon", "lat", "alt", "v_lon", "v_lat", "v_alt"];

const MANDATORY_COLUMNS: [&str; 8] = ["id", "t", "lon", "lat", "alt", "v_lon", "v_lat", "v_alt"];

/// One timestamped aircraft state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub lon: f64,
    pub lat: f64,
    pub alt: f64,
    pub v_lon: f64,
    pub v_lat: f64,
    pub v_alt: f64,
}

impl TrajectoryPoint {
    pub fn new(t: f64, features: [f64; NUM_FEATURES]) -> Self {
        let [lon, lat, alt, v_lon, v_lat, v_alt] = features;
        Self {
            t,
            lon,
            lat,
            alt,
            v_lon,
            v_lat,
            v_alt,
        }
    }

    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [self.lon, self.lat, self.alt, self.v_lon, self.v_lat, self.v_alt]
    }

    pub fn set_features(&mut self, f: [f64; NUM_FEATURES]) {
        *self = Self::new(self.t, f);
    }

    pub fn position(&self) -> [f64; 3] {
        [self.lon, self.lat, self.alt]
    }

    fn is_finite(&self) -> bool {
        self.t.is_finite() && self.features().iter().all(|v| v.is_finite())
    }

    fn in_range(&self) -> bool {
        (-180.0..=180.0).contains(&self.lon) && (-90.0..=90.0).contains(&self.lat) && self.alt >= 0.0
    }
}

/// An ordered sequence of points belonging to one flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<TrajectoryPoint>,
    pub label: Option<String>,
    pub anomaly_tag: Option<String>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<TrajectoryPoint>) -> Self {
        Self {
            id: id.into(),
            points,
            label: None,
            anomaly_tag: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_time(&self) -> Option<f64> {
        self.points.first().map(|p| p.t)
    }

    /// Copy of the points in `range`, keeping id and tags.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            id: self.id.clone(),
            points: self.points[range].to_vec(),
            label: self.label.clone(),
            anomaly_tag: self.anomaly_tag.clone(),
        }
    }
}

/// Per-trajectory problem counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub out_of_range: usize,
    pub non_monotone: usize,
    pub non_finite: usize,
    pub length_ok: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.length_ok && self.out_of_range == 0 && self.non_monotone == 0 && self.non_finite == 0
    }
}

/// Counts invariant violations. Non-finite points are not also counted as
/// out of range.
pub fn validate_trajectory(traj: &Trajectory) -> ValidationReport {
    let mut report = ValidationReport {
        length_ok: traj.len() >= 2,
        ..Default::default()
    };
    for p in &traj.points {
        if !p.is_finite() {
            report.non_finite += 1;
        } else if !p.in_range() {
            report.out_of_range += 1;
        }
    }
    report.non_monotone = traj.points.windows(2).filter(|w| !(w[1].t > w[0].t)).count();
    report
}

/// A recoverable problem found while parsing a table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum IngestIssue {
    /// The row at `line` (1-based, header is line 1) could not be used.
    RowError { line: u64, message: String },
    /// Trajectory `id` had fewer than two valid rows and was dropped.
    Dropped { id: String, rows: usize },
}

/// Parsed trajectories together with every row-level issue.
#[derive(Debug, Clone, Default)]
pub struct ParsedTable {
    pub trajectories: Vec<Trajectory>,
    pub issues: Vec<IngestIssue>,
}

impl ParsedTable {
    pub fn row_errors(&self) -> impl Iterator<Item = (u64, &str)> {
        self.issues.iter().filter_map(|i| match i {
            IngestIssue::RowError { line, message } => Some((*line, message.as_str())),
            _ => None,
        })
    }
}

/// Ingestion options.
#[derive(Debug, Clone, Copy)]
pub struct IngestConfig {
    pub delimiter: u8,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

struct ColumnMap {
    mandatory: [usize; 8],
    label: Option<usize>,
    anomaly_tag: Option<usize>,
}

impl ColumnMap {
    fn from_headers(headers: &csv::StringRecord) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let mut mandatory = [0usize; 8];
        for (slot, name) in mandatory.iter_mut().zip(MANDATORY_COLUMNS) {
            *slot = find(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        }
        Ok(Self {
            mandatory,
            label: find("label"),
            anomaly_tag: find("anomaly_tag"),
        })
    }
}

/// Parses a trajectory table. Rows are grouped by `id` in first-appearance
/// order and sorted by `t` within each trajectory. Bad rows are reported and
/// skipped; trajectories left with fewer than two rows are dropped.
pub fn parse_trajectory_file<R: Read>(source: R, config: &IngestConfig) -> Result<ParsedTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(config.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let columns = ColumnMap::from_headers(reader.headers()?)?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Trajectory> = HashMap::new();
    let mut issues = Vec::new();

    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx as u64 + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                issues.push(IngestIssue::RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let cell = |idx: usize| record.get(idx).unwrap_or("");
        let mut values = [0.0f64; 7];
        let mut bad = None;
        for (k, &col) in columns.mandatory[1..].iter().enumerate() {
            match cell(col).parse::<f64>() {
                Ok(v) if v.is_finite() => values[k] = v,
                Ok(v) => {
                    bad = Some(format!("column `{}` is not finite ({v})", MANDATORY_COLUMNS[k + 1]));
                    break;
                }
                Err(_) => {
                    bad = Some(format!(
                        "column `{}` is not a number: {:?}",
                        MANDATORY_COLUMNS[k + 1],
                        cell(col)
                    ));
                    break;
                }
            }
        }
        if let Some(message) = bad {
            issues.push(IngestIssue::RowError { line, message });
            continue;
        }
        let id = cell(columns.mandatory[0]).to_string();
        let point = TrajectoryPoint::new(
            values[0],
            [values[1], values[2], values[3], values[4], values[5], values[6]],
        );
        let optional = |col: Option<usize>| {
            col.map(|c| cell(c).to_string()).filter(|s| !s.is_empty())
        };
        let label = optional(columns.label);
        let tag = optional(columns.anomaly_tag);
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Trajectory::new(id.clone(), Vec::new())
        });
        if entry.label.is_none() {
            entry.label = label;
        }
        if entry.anomaly_tag.is_none() {
            entry.anomaly_tag = tag;
        }
        entry.points.push(point);
    }

    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let mut traj = groups.remove(&id).expect("grouped id");
        if traj.len() < 2 {
            log::warn!("dropping trajectory {id}: {} valid rows", traj.len());
            issues.push(IngestIssue::Dropped {
                id,
                rows: traj.len(),
            });
            continue;
        }
        traj.points.sort_by(|a, b| a.t.total_cmp(&b.t));
        trajectories.push(traj);
    }
    Ok(ParsedTable {
        trajectories,
        issues,
    })
}

/// Writes trajectories in the table format. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_trajectory_file<W: Write>(sink: W, dataset: &[Trajectory]) -> Result<()> {
    let with_label = dataset.iter().any(|t| t.label.is_some());
    let with_tag = dataset.iter().any(|t| t.anomaly_tag.is_some());
    let mut writer = csv::Writer::from_writer(sink);
    let mut header: Vec<&str> = MANDATORY_COLUMNS.to_vec();
    if with_label {
        header.push("label");
    }
    if with_tag {
        header.push("anomaly_tag");
    }
    writer.write_record(&header)?;
    for traj in dataset {
        for p in &traj.points {
            let mut row = vec![traj.id.clone(), p.t.to_string()];
            row.extend(p.features().iter().map(|v| v.to_string()));
            if with_label {
                row.push(traj.label.clone().unwrap_or_default());
            }
            if with_tag {
                row.push(traj.anomaly_tag.clone().unwrap_or_default());
            }
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

/// Fits normalization statistics over every point of `dataset`.
pub fn fit_norm_stats(dataset: &[Trajectory]) -> Result<NormStats> {
    let count: usize = dataset.iter().map(Trajectory::len).sum();
    if count == 0 {
        return Err(Error::Precondition("cannot fit normalization on an empty dataset".into()));
    }
    let mut mean = [0.0; NUM_FEATURES];
    for p in dataset.iter().flat_map(|t| &t.points) {
        for (m, v) in mean.iter_mut().zip(p.features()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = [0.0; NUM_FEATURES];
    for p in dataset.iter().flat_map(|t| &t.points) {
        for k in 0..NUM_FEATURES {
            let d = p.features()[k] - mean[k];
            var[k] += d * d;
        }
    }
    let mut std = [0.0; NUM_FEATURES];
    for k in 0..NUM_FEATURES {
        std[k] = (var[k] / count as f64).sqrt();
        // relative test so that constant features with rounding noise are caught
        if !(std[k] > 1e-12 * mean[k].abs().max(1.0)) {
            return Err(Error::DegenerateFeature(FEATURE_NAMES[k]));
        }
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn normalize_features(&self, f: [f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|k| (f[k] - self.mean[k]) / self.std[k])
    }

    pub fn denormalize_features(&self, z: [f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|k| z[k] * self.std[k] + self.mean[k])
    }

    /// Maps a normalized position back to physical (lon, lat, alt).
    pub fn denormalize_position(&self, z: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| z[k] * self.std[k] + self.mean[k])
    }
}

/// Z-scores every feature; timestamps are kept.
pub fn normalize(traj: &Trajectory, stats: &NormStats) -> Trajectory {
    map_features(traj, |f| stats.normalize_features(f))
}

pub fn denormalize(traj: &Trajectory, stats: &NormStats) -> Trajectory {
    map_features(traj, |f| stats.denormalize_features(f))
}

fn map_features(traj: &Trajectory, f: impl Fn([f64; NUM_FEATURES]) -> [f64; NUM_FEATURES]) -> Trajectory {
    Trajectory {
        points: traj
            .points
            .iter()
            .map(|p| TrajectoryPoint::new(p.t, f(p.features())))
            .collect(),
        ..traj.clone()
    }
}

/// Splits by trajectory start time. Trajectories are ordered by
/// `(start time, id)` and the first `ceil(fraction * len)` go to train, so
/// ties at the boundary are broken by id and the odd element goes to train.
/// Both halves are returned in that sorted order.
pub fn split_by_time(dataset: &[Trajectory], fraction: f64) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Precondition(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut keyed = Vec::with_capacity(dataset.len());
    for traj in dataset {
        let start = traj
            .start_time()
            .ok_or_else(|| Error::Precondition(format!("trajectory {} has no points", traj.id)))?;
        keyed.push((start, traj));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let n_train = ((fraction * keyed.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(keyed.len() - n_train);
    for (i, (_, traj)) in keyed.into_iter().enumerate() {
        if i < n_train {
            train.push(traj.clone());
        } else {
            test.push(traj.clone());
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(t: f64, lon: f64) -> TrajectoryPoint {
        TrajectoryPoint::new(t, [lon, 50.0, 300.0, 0.1, 0.0, 0.0])
    }

    const HEADER: &str = "id,t,lon,lat,alt,v_lon,v_lat,v_alt\n";

    #[test]
    fn minimal_file_gives_one_trajectory() {
        let text = format!("{HEADER}A,0,1,2,3,0,0,0\nA,20,1.1,2,3,0.1,0,0\n");
        let parsed = parse_trajectory_file(text.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(parsed.trajectories.len(), 1);
        assert_eq!(parsed.trajectories[0].len(), 2);
        assert!(parsed.issues.is_empty());
    }

    #[test]
    fn interleaved_ids_are_grouped_and_sorted() {
        let text = format!(
            "{HEADER}A,20,1,2,3,0,0,0\nB,5,1,2,3,0,0,0\nA,0,1,2,3,0,0,0\nB,1,1,2,3,0,0,0\nA,10,1,2,3,0,0,0\n"
        );
        let parsed = parse_trajectory_file(text.as_bytes(), &IngestConfig::default()).unwrap();
        let ids: Vec<_> = parsed.trajectories.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["A", "B"]);
        let ta: Vec<f64> = parsed.trajectories[0].points.iter().map(|p| p.t).collect();
        assert_eq!(ta, [0.0, 10.0, 20.0]);
        let tb: Vec<f64> = parsed.trajectories[1].points.iter().map(|p| p.t).collect();
        assert_eq!(tb, [1.0, 5.0]);
    }

    #[test]
    fn nan_row_is_reported_with_line_number() {
        let text = format!(
            "{HEADER}A,0,1,2,3,0,0,0\nA,1,1,2,NaN,0,0,0\nA,2,1,2,3,0,0,0\nA,3,1,2,x,0,0,0\n"
        );
        let parsed = parse_trajectory_file(text.as_bytes(), &IngestConfig::default()).unwrap();
        let lines: Vec<u64> = parsed.row_errors().map(|(l, _)| l).collect();
        assert_eq!(lines, [3, 5]);
        assert_eq!(parsed.trajectories[0].len(), 2);
    }

    #[test]
    fn missing_column_names_it() {
        let text = "id,t,lon,lat,alt,v_lon,v_lat\nA,0,1,2,3,0,0\n";
        match parse_trajectory_file(text.as_bytes(), &IngestConfig::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "v_alt"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_row_trajectory_is_dropped_with_warning() {
        let text = format!("{HEADER}A,0,1,2,3,0,0,0\nB,0,1,2,3,0,0,0\nB,1,1,2,3,0,0,0\n");
        let parsed = parse_trajectory_file(text.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(parsed.trajectories.len(), 1);
        assert_eq!(
            parsed.issues,
            vec![IngestIssue::Dropped {
                id: "A".into(),
                rows: 1
            }]
        );
    }

    #[test]
    fn optional_columns_are_read() {
        let text = "id,t,lon,lat,alt,v_lon,v_lat,v_alt,label,anomaly_tag\nA,0,1,2,3,0,0,0,ESSA,\nA,1,1,2,3,0,0,0,ESSA,VD\n";
        let parsed = parse_trajectory_file(text.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(parsed.trajectories[0].label.as_deref(), Some("ESSA"));
        assert_eq!(parsed.trajectories[0].anomaly_tag.as_deref(), Some("VD"));
    }

    #[test]
    fn validation_counts() {
        let valid = Trajectory::new("a", (0..10).map(|i| pt(i as f64, i as f64 * 0.1)).collect());
        let r = validate_trajectory(&valid);
        assert_eq!(r, ValidationReport { length_ok: true, ..Default::default() });
        assert!(r.passed());

        let mut bad_lat = valid.clone();
        bad_lat.points[3].lat = 95.0;
        let r = validate_trajectory(&bad_lat);
        assert_eq!(r.out_of_range, 1);
        assert!(!r.passed());

        let dup = Trajectory::new("d", vec![pt(0.0, 0.0), pt(5.0, 0.1), pt(5.0, 0.2)]);
        let r = validate_trajectory(&dup);
        // brute-force scan of consecutive pairs
        let expected = dup.points.iter().zip(dup.points.iter().skip(1)).filter(|(a, b)| b.t <= a.t).count();
        assert_eq!(r.non_monotone, expected);
        assert_eq!(r.non_monotone, 1);
        assert!(!r.passed());

        let mut nan = valid.clone();
        nan.points[0].v_alt = f64::INFINITY;
        assert_eq!(validate_trajectory(&nan).non_finite, 1);
    }

    fn two_point(lons: [f64; 2]) -> Trajectory {
        Trajectory::new(
            "x",
            vec![
                TrajectoryPoint::new(0.0, [lons[0], 10.0, 100.0, 1.0, 2.0, 3.0]),
                TrajectoryPoint::new(1.0, [lons[1], 12.0, 300.0, 3.0, 4.0, 5.0]),
            ],
        )
    }

    #[test]
    fn norm_stats_population_convention() {
        let stats = fit_norm_stats(&[two_point([0.0, 2.0])]).unwrap();
        assert_eq!(stats.mean[0], 1.0);
        assert_eq!(stats.std[0], 1.0);
        assert_eq!(normalize(&two_point([3.0, 1.0]), &stats).points[0].lon, 2.0);
    }

    #[test]
    fn norm_stats_errors() {
        let mut t = two_point([0.0, 2.0]);
        t.points[1].alt = 100.0;
        assert!(matches!(fit_norm_stats(&[t]), Err(Error::DegenerateFeature("alt"))));
        assert!(matches!(fit_norm_stats(&[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn point_at_mean_normalizes_to_zero() {
        let t = two_point([0.0, 2.0]);
        let stats = fit_norm_stats(&[t]).unwrap();
        let at_mean = stats.normalize_features(stats.mean);
        assert!(at_mean.iter().all(|v| *v == 0.0));
    }

    fn starting_at(id: &str, t0: f64) -> Trajectory {
        Trajectory::new(id, vec![pt(t0, 0.0), pt(t0 + 1.0, 0.1)])
    }

    #[test]
    fn split_basic_and_ties() {
        let ds: Vec<_> = [3.0, 1.0, 0.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| starting_at(&format!("t{i}"), t))
            .collect();
        let (train, test) = split_by_time(&ds, 0.5).unwrap();
        let starts = |v: &[Trajectory]| v.iter().map(|t| t.start_time().unwrap()).collect::<Vec<_>>();
        assert_eq!(starts(&train), [0.0, 1.0]);
        assert_eq!(starts(&test), [2.0, 3.0]);

        let tied: Vec<_> = ["c", "a", "e", "b", "d"].iter().map(|id| starting_at(id, 7.0)).collect();
        let (train, test) = split_by_time(&tied, 0.5).unwrap();
        let ids = |v: &[Trajectory]| v.iter().map(|t| t.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), ["a", "b", "c"]);
        assert_eq!(ids(&test), ["d", "e"]);
        assert!(split_by_time(&tied, 1.0).is_err());
        assert!(split_by_time(&tied, 0.0).is_err());
    }
}

//! Behavior-adaptive patching.
//!
//! A trajectory is turned into exactly `N` patches of `S` points. Points whose
//! turn angle exceeds the activity threshold are grouped into clusters; each
//! cluster contributes one behavioral patch of `S` consecutive points around
//! its median member. Everything else is cut into `N - g` contiguous chunks of
//! near-equal length, and each chunk is subsampled to `S` points with both
//! chunk endpoints kept. The mean chunk length is `(n - S * g) / (N - g)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, NUM_FEATURES};

/// Turn angle in degrees for every point; endpoints are stored as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleProfile {
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchingConfig {
    /// Activity threshold `s` in degrees (strict `>`).
    pub active_threshold_deg: f64,
    /// Points turning by more than this are treated as noise and removed.
    pub noise_cap_deg: f64,
    /// Maximum index distance between consecutive members of one cluster.
    pub gap: usize,
    pub patch_size: usize,
    pub num_patches: usize,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        Self {
            active_threshold_deg: 5.0,
            noise_cap_deg: 150.0,
            gap: 16,
            patch_size: 32,
            num_patches: 20,
        }
    }
}

impl PatchingConfig {
    /// Default thresholds with the given geometry and `gap = S / 2`.
    pub fn with_geometry(patch_size: usize, num_patches: usize) -> Self {
        Self {
            gap: (patch_size / 2).max(1),
            patch_size,
            num_patches,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.active_threshold_deg > 0.0
            && self.active_threshold_deg < self.noise_cap_deg
            && self.noise_cap_deg <= 180.0
            && self.gap >= 1
            && self.patch_size >= 2
            && self.num_patches >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid patching config {self:?}")))
        }
    }

    /// Flattened patch width `S * 6`.
    pub fn patch_width(&self) -> usize {
        self.patch_size * NUM_FEATURES
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BehaviorClusters {
    pub clusters: Vec<Vec<usize>>,
    pub centers: Vec<usize>,
}

impl BehaviorClusters {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `S` rows of 6 features, flattened row-major.
    pub values: Vec<f64>,
    pub source_indices: Vec<usize>,
    pub is_behavioral: bool,
    /// Number of original points this patch stands for: `S` for behavioral
    /// patches, the chunk length for uniform ones.
    pub span: usize,
    /// Largest turn angle among the source points.
    pub peak_angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Vec<Patch>,
    /// Length of the trajectory the source indices refer to.
    pub n: usize,
    /// Behavior clusters left after merging overlapping windows, before the
    /// top-`N` cut.
    pub clusters_found: usize,
    /// Centers of the clusters that received a behavioral patch.
    pub centers: Vec<usize>,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn behavioral_count(&self) -> usize {
        self.patches.iter().filter(|p| p.is_behavioral).count()
    }

    /// Mean number of original points per uniform patch, `None` when every
    /// patch is behavioral.
    pub fn mean_uniform_stride(&self) -> Option<f64> {
        let spans: Vec<usize> = self.patches.iter().filter(|p| !p.is_behavioral).map(|p| p.span).collect();
        if spans.is_empty() {
            None
        } else {
            Some(spans.iter().sum::<usize>() as f64 / spans.len() as f64)
        }
    }
}

fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let cross_norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    if dot == 0.0 && cross_norm == 0.0 {
        return 0.0;
    }
    cross_norm.atan2(dot).to_degrees()
}

fn displacement(traj: &Trajectory, from: usize, to: usize) -> [f64; 3] {
    let a = traj.points[from].position();
    let b = traj.points[to].position();
    [b[0] - a[0], b[1] - a[1], b[2] - a[2]]
}

/// Angle between successive 3D displacements at each interior point.
pub fn turn_angles(traj: &Trajectory) -> Result<AngleProfile> {
    let n = traj.len();
    if n < 3 {
        return Err(Error::Precondition(format!("turn angles need n >= 3, got {n}")));
    }
    let mut angles = vec![0.0; n];
    for i in 1..n - 1 {
        angles[i] = angle_between(displacement(traj, i - 1, i), displacement(traj, i, i + 1));
    }
    Ok(AngleProfile { angles })
}

/// Removes, in one pass, every interior point turning by more than
/// `noise_cap` degrees. Fails when fewer than three points would remain,
/// since the angle profile needs at least three.
pub fn denoise(traj: &Trajectory, noise_cap: f64) -> Result<Trajectory> {
    let profile = turn_angles(traj)?;
    let points: Vec<_> = traj
        .points
        .iter()
        .zip(&profile.angles)
        .filter(|(_, &a)| a <= noise_cap)
        .map(|(p, _)| *p)
        .collect();
    if points.len() < 3 {
        return Err(Error::OverFiltered { remaining: points.len() });
    }
    Ok(Trajectory {
        points,
        ..traj.clone()
    })
}

pub fn detect_active_points(profile: &AngleProfile, s: f64) -> Vec<usize> {
    profile
        .angles
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > s)
        .map(|(j, _)| j)
        .collect()
}

fn lower_median(members: &[usize]) -> usize {
    members[(members.len() - 1) / 2]
}

/// Greedy left-to-right grouping of sorted indices.
pub fn cluster_active_points(indices: &[usize], gap: usize) -> BehaviorClusters {
    debug_assert!(indices.windows(2).all(|w| w[0] < w[1]), "indices must be sorted");
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for &idx in indices {
        match clusters.last_mut() {
            Some(current) if idx - current[current.len() - 1] <= gap => current.push(idx),
            _ => clusters.push(vec![idx]),
        }
    }
    let centers = clusters.iter().map(|c| lower_median(c)).collect();
    BehaviorClusters { clusters, centers }
}

fn behavioral_window(center: usize, n: usize, size: usize) -> std::ops::Range<usize> {
    let start = center.saturating_sub(size / 2).min(n - size);
    start..start + size
}

/// Merges clusters whose windows overlap until all windows are disjoint.
fn merge_overlapping(mut groups: Vec<Vec<usize>>, n: usize, size: usize) -> Vec<Vec<usize>> {
    loop {
        let windows: Vec<_> = groups
            .iter()
            .map(|g| behavioral_window(lower_median(g), n, size))
            .collect();
        let Some(k) = (1..windows.len()).find(|&k| windows[k].start < windows[k - 1].end) else {
            return groups;
        };
        let tail = groups.remove(k);
        groups[k - 1].extend(tail);
        groups[k - 1].sort_unstable();
    }
}

fn make_patch(traj: &Trajectory, profile: &[f64], indices: Vec<usize>, is_behavioral: bool, span: usize) -> Patch {
    let mut values = Vec::with_capacity(indices.len() * NUM_FEATURES);
    for &i in &indices {
        values.extend_from_slice(&traj.points[i].features());
    }
    let peak_angle = indices.iter().map(|&i| profile[i]).fold(0.0, f64::max);
    Patch {
        values,
        source_indices: indices,
        is_behavioral,
        span,
        peak_angle,
    }
}

/// Builds the `N` patches for `traj` given its behavior clusters.
pub fn build_patches(traj: &Trajectory, clusters: &BehaviorClusters, config: &PatchingConfig) -> Result<PatchSequence> {
    config.validate()?;
    let n = traj.len();
    let size = config.patch_size;
    let total = config.num_patches;
    if n < size {
        return Err(Error::TooShort { n, patch_size: size });
    }
    if total * size > n {
        return Err(Error::InfeasibleConfig(format!(
            "{total} patches of {size} points need {} points, trajectory has {n}",
            total * size
        )));
    }
    let profile = if n >= 3 { turn_angles(traj)?.angles } else { vec![0.0; n] };

    let groups = merge_overlapping(clusters.clusters.clone(), n, size);
    let clusters_found = groups.len();
    let peak = |g: &Vec<usize>| g.iter().map(|&i| profile[i]).fold(0.0, f64::max);
    let mut kept: Vec<Vec<usize>> = groups;
    if kept.len() > total {
        let mut ranked: Vec<(usize, f64)> = kept.iter().enumerate().map(|(k, g)| (k, peak(g))).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut keep: Vec<usize> = ranked[..total].iter().map(|r| r.0).collect();
        keep.sort_unstable();
        kept = keep.into_iter().map(|k| std::mem::take(&mut kept[k])).collect();
    }
    let centers: Vec<usize> = kept.iter().map(|g| lower_median(g)).collect();

    let mut covered = vec![false; n];
    let mut patches = Vec::with_capacity(total);
    for &c in &centers {
        let window = behavioral_window(c, n, size);
        covered[window.clone()].iter_mut().for_each(|f| *f = true);
        patches.push(make_patch(traj, &profile, window.collect(), true, size));
    }

    let uniform_count = total - centers.len();
    if uniform_count > 0 {
        let remaining: Vec<usize> = (0..n).filter(|&i| !covered[i]).collect();
        let base = remaining.len() / uniform_count;
        let extra = remaining.len() % uniform_count;
        let mut offset = 0;
        for k in 0..uniform_count {
            let len = base + usize::from(k < extra);
            let chunk = &remaining[offset..offset + len];
            offset += len;
            let picked = (0..size).map(|j| chunk[j * (len - 1) / (size - 1)]).collect();
            patches.push(make_patch(traj, &profile, picked, false, len));
        }
    }
    patches.sort_by_key(|p| p.source_indices[0]);

    Ok(PatchSequence {
        patches,
        n,
        clusters_found,
        centers,
    })
}

/// A trajectory after denoising, with its angle profile and patches.
#[derive(Debug, Clone)]
pub struct PatchedTrajectory {
    pub trajectory: Trajectory,
    pub profile: AngleProfile,
    pub patches: PatchSequence,
}

/// Full patching pipeline: denoise, angle profile, activity detection,
/// clustering and patch extraction.
pub fn patch_trajectory(traj: &Trajectory, config: &PatchingConfig) -> Result<PatchedTrajectory> {
    config.validate()?;
    let trajectory = denoise(traj, config.noise_cap_deg)?;
    let profile = turn_angles(&trajectory)?;
    let active = detect_active_points(&profile, config.active_threshold_deg);
    let clusters = cluster_active_points(&active, config.gap);
    let patches = build_patches(&trajectory, &clusters, config)?;
    Ok(PatchedTrajectory {
        trajectory,
        profile,
        patches,
    })
}

/// Writes one row per patch: id, patch index, behavioral flag, `;`-joined
/// source indices and `;`-joined `S * 6` values.
pub fn write_patch_dump<W: Write>(sink: W, rows: &[(&str, &PatchSequence)]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(["id", "patch_index", "is_behavioral", "source_indices", "values"])?;
    for (id, seq) in rows {
        for (k, patch) in seq.patches.iter().enumerate() {
            let indices: Vec<String> = patch.source_indices.iter().map(|i| i.to_string()).collect();
            let values: Vec<String> = patch.values.iter().map(|v| v.to_string()).collect();
            writer.write_record([
                id.to_string(),
                k.to_string(),
                u8::from(patch.is_behavioral).to_string(),
                indices.join(";"),
                values.join(";"),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

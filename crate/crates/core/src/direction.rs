//! Sign-based quantization of point-to-point motion into 26 direction classes.
//!
//! Each axis of the displacement `(Δlon, Δlat, Δalt)` is reduced to
//! `{-1, 0, +1}`. The 27 triplets are ordered canonically by
//! `r = (d_lon + 1) * 9 + (d_lat + 1) * 3 + (d_alt + 1)`; the all-zero triplet
//! (`r = 13`) is not a class, so classes above it shift down by one. Under this
//! ordering negating a triplet maps class `c` to `25 - c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, TrajectoryPoint};

pub const NUM_DIRECTIONS: usize = 26;

/// Dead-zone used when labelling normalized trajectories.
pub const DEFAULT_EPS: f64 = 1e-6;

const STATIONARY_RANK: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DirectionTriplet {
    pub d_lon: i8,
    pub d_lat: i8,
    pub d_alt: i8,
}

impl DirectionTriplet {
    pub const fn new(d_lon: i8, d_lat: i8, d_alt: i8) -> Self {
        Self { d_lon, d_lat, d_alt }
    }

    pub fn is_stationary(&self) -> bool {
        self.d_lon == 0 && self.d_lat == 0 && self.d_alt == 0
    }

    pub fn negated(&self) -> Self {
        Self::new(-self.d_lon, -self.d_lat, -self.d_alt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DirectionLabel(u8);

impl DirectionLabel {
    pub fn new(class_id: usize) -> Result<Self> {
        if class_id < NUM_DIRECTIONS {
            Ok(Self(class_id as u8))
        } else {
            Err(Error::ClassOutOfRange(class_id))
        }
    }

    pub fn class_id(&self) -> usize {
        self.0 as usize
    }
}

/// Label of one consecutive point pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Moving(DirectionLabel),
    /// All deltas inside the dead-zone; excluded from the direction loss.
    Stationary,
}

impl PairLabel {
    pub fn class_id(&self) -> Option<usize> {
        match self {
            PairLabel::Moving(l) => Some(l.class_id()),
            PairLabel::Stationary => None,
        }
    }
}

/// Componentwise `b - a` over (lon, lat, alt).
pub fn direction_vector(a: &TrajectoryPoint, b: &TrajectoryPoint) -> [f64; 3] {
    [b.lon - a.lon, b.lat - a.lat, b.alt - a.alt]
}

fn sign_with_deadzone(u: f64, eps: f64) -> i8 {
    if u > eps {
        1
    } else if u < -eps {
        -1
    } else {
        0
    }
}

pub fn sign_triplet(v: [f64; 3], eps: f64) -> DirectionTriplet {
    debug_assert!(eps >= 0.0);
    DirectionTriplet::new(
        sign_with_deadzone(v[0], eps),
        sign_with_deadzone(v[1], eps),
        sign_with_deadzone(v[2], eps),
    )
}

pub fn triplet_to_class(t: DirectionTriplet) -> Result<DirectionLabel> {
    if t.is_stationary() {
        return Err(Error::StationaryDirection);
    }
    let rank = ((t.d_lon + 1) * 9 + (t.d_lat + 1) * 3 + (t.d_alt + 1)) as usize;
    let class = if rank < STATIONARY_RANK { rank } else { rank - 1 };
    DirectionLabel::new(class)
}

pub fn class_to_triplet(label: usize) -> Result<DirectionTriplet> {
    if label >= NUM_DIRECTIONS {
        return Err(Error::ClassOutOfRange(label));
    }
    let rank = if label < STATIONARY_RANK { label } else { label + 1 } as i8;
    Ok(DirectionTriplet::new(rank / 9 - 1, (rank / 3) % 3 - 1, rank % 3 - 1))
}

/// Labels every pair `(x_i, x_{i+1})`; the result has `n - 1` entries and the
/// final point carries no label of its own.
pub fn label_trajectory_directions(traj: &Trajectory, eps: f64) -> Vec<PairLabel> {
    traj.points
        .windows(2)
        .map(|w| {
            let t = sign_triplet(direction_vector(&w[0], &w[1]), eps);
            match triplet_to_class(t) {
                Ok(label) => PairLabel::Moving(label),
                Err(_) => PairLabel::Stationary,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_triplets() -> Vec<DirectionTriplet> {
        let mut out = Vec::new();
        for a in -1..=1 {
            for b in -1..=1 {
                for c in -1..=1 {
                    out.push(DirectionTriplet::new(a, b, c));
                }
            }
        }
        out
    }

    #[test]
    fn direction_vector_subtracts() {
        let a = TrajectoryPoint::new(0.0, [10.0, 20.0, 100.0, 0.0, 0.0, 0.0]);
        let b = TrajectoryPoint::new(1.0, [10.1, 19.9, 100.0, 0.0, 0.0, 0.0]);
        assert_eq!(direction_vector(&a, &b), [10.1 - 10.0, 19.9 - 20.0, 0.0]);
        assert_eq!(direction_vector(&a, &a), [0.0; 3]);
    }

    #[test]
    fn sign_deadzone() {
        assert_eq!(sign_triplet([0.5, -0.2, 0.0], 1e-9), DirectionTriplet::new(1, -1, 0));
        assert_eq!(sign_triplet([1e-12, 0.0, -1e-12], 1e-9), DirectionTriplet::new(0, 0, 0));
        assert_eq!(sign_triplet([1e-300, -1e-300, 0.0], 0.0), DirectionTriplet::new(1, -1, 0));
    }

    #[test]
    fn class_extremes_and_errors() {
        assert_eq!(triplet_to_class(DirectionTriplet::new(-1, -1, -1)).unwrap().class_id(), 0);
        assert_eq!(triplet_to_class(DirectionTriplet::new(1, 1, 1)).unwrap().class_id(), 25);
        assert!(matches!(
            triplet_to_class(DirectionTriplet::new(0, 0, 0)),
            Err(Error::StationaryDirection)
        ));
        assert_eq!(class_to_triplet(0).unwrap(), DirectionTriplet::new(-1, -1, -1));
        assert!(matches!(class_to_triplet(26), Err(Error::ClassOutOfRange(26))));
    }

    #[test]
    fn exhaustive_bijection_and_antipodes() {
        let mut seen = [false; NUM_DIRECTIONS];
        for t in all_triplets().into_iter().filter(|t| !t.is_stationary()) {
            let c = triplet_to_class(t).unwrap().class_id();
            assert!(!seen[c]);
            seen[c] = true;
            assert_eq!(class_to_triplet(c).unwrap(), t);
            assert_eq!(triplet_to_class(t.negated()).unwrap().class_id(), 25 - c);
        }
        assert!(seen.iter().all(|s| *s));
    }

    fn level_point(t: f64, lon: f64, lat: f64, alt: f64) -> TrajectoryPoint {
        TrajectoryPoint::new(t, [lon, lat, alt, 0.0, 0.0, 0.0])
    }

    #[test]
    fn eastbound_and_stationary_labels() {
        let east = Trajectory::new("e", (0..5).map(|i| level_point(i as f64, i as f64 * 0.1, 0.0, 300.0)).collect());
        let expected = PairLabel::Moving(triplet_to_class(DirectionTriplet::new(1, 0, 0)).unwrap());
        assert!(label_trajectory_directions(&east, DEFAULT_EPS).iter().all(|l| *l == expected));

        let still = Trajectory::new("s", vec![level_point(0.0, 1.0, 1.0, 1.0), level_point(1.0, 1.0, 1.0, 1.0)]);
        assert_eq!(label_trajectory_directions(&still, DEFAULT_EPS), vec![PairLabel::Stationary]);
    }

    #[test]
    fn climb_turn_fixture() {
        // climb east, then turn north while climbing, then level north-west descent
        let pts = [
            (0.0, 0.0, 100.0),
            (0.1, 0.0, 105.0),
            (0.1, 0.1, 110.0),
            (0.0, 0.2, 110.0),
            (-0.1, 0.3, 100.0),
        ];
        let traj = Trajectory::new(
            "c",
            pts.iter().enumerate().map(|(i, p)| level_point(i as f64, p.0, p.1, p.2)).collect(),
        );
        let by_hand = [(1, 0, 1), (0, 1, 1), (-1, 1, 0), (-1, 1, -1)];
        let labels = label_trajectory_directions(&traj, DEFAULT_EPS);
        assert_eq!(labels.len(), 4);
        for (l, (a, b, c)) in labels.iter().zip(by_hand) {
            let expected = triplet_to_class(DirectionTriplet::new(a, b, c)).unwrap();
            assert_eq!(*l, PairLabel::Moving(expected));
        }
    }

    proptest! {
        #[test]
        fn labels_invariant_under_positive_axis_scaling(
            d in prop::array::uniform3(-1.0f64..1.0),
            s in prop::array::uniform3(0.01f64..100.0),
        ) {
            let scaled = [d[0] * s[0], d[1] * s[1], d[2] * s[2]];
            prop_assert_eq!(sign_triplet(d, 0.0), sign_triplet(scaled, 0.0));
        }

        #[test]
        fn random_pair_matches_subtraction(a in prop::array::uniform3(-50.0f64..50.0), b in prop::array::uniform3(-50.0f64..50.0)) {
            let pa = level_point(0.0, a[0], a[1], a[2]);
            let pb = level_point(1.0, b[0], b[1], b[2]);
            let v = direction_vector(&pa, &pb);
            prop_assert_eq!(v, [b[0] - a[0], b[1] - a[1], b[2] - a[2]]);
        }
    }
}

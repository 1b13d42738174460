//! Candidate intents around the target: empty spots inside the sensing window and
//! lane exits on its boundary.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Pose};
use crate::map::ParkingMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntentKind {
    Spot,
    Lane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentCandidate {
    pub kind: IntentKind,
    /// Index into `ParkingMap::spots` or `ParkingMap::lanes`.
    pub map_index: usize,
    /// Target location in the ego frame.
    pub eta: Point,
    pub distance: f64,
    pub heading_diff: f64,
    /// Spot outline in the ego frame; `None` for lanes.
    pub footprint: Option<[Point; 4]>,
}

impl IntentCandidate {
    fn new(kind: IntentKind, map_index: usize, eta: Point, footprint: Option<[Point; 4]>) -> Self {
        let (distance, heading_diff) = features(eta);
        Self { kind, map_index, eta, distance, heading_diff, footprint }
    }
}

/// Spots first, then lanes; combined indices follow that order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    pub spots: Vec<IntentCandidate>,
    pub lanes: Vec<IntentCandidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.spots.len() + self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// No lane exit was found; the pose is not drivable out of the window.
    pub fn is_degenerate(&self) -> bool {
        self.lanes.is_empty()
    }

    pub fn get(&self, combined: usize) -> Option<&IntentCandidate> {
        if combined < self.spots.len() {
            self.spots.get(combined)
        } else {
            self.lanes.get(combined - self.spots.len())
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &IntentCandidate> {
        self.spots.iter().chain(self.lanes.iter())
    }
}

/// `(‖η‖, |atan2(y, x)|)`.
pub fn features(eta: Point) -> (f64, f64) {
    (eta.norm(), eta.y.atan2(eta.x).abs())
}

/// One candidate per unoccupied spot whose center lies in the closed window.
pub fn detect_spots(map: &ParkingMap, ego: &Pose, limit: f64) -> Vec<IntentCandidate> {
    map.spots
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.occupied)
        .filter_map(|(i, s)| {
            let eta = ego.point_to_local(s.center());
            let inside = eta.x.abs() <= limit && eta.y.abs() <= limit;
            inside.then(|| IntentCandidate::new(IntentKind::Spot, i, eta, Some(s.polygon().map(|p| ego.point_to_local(p)))))
        })
        .collect()
}

fn strictly_outside(p: Point, limit: f64) -> bool {
    p.x.abs() > limit || p.y.abs() > limit
}

/// Liang–Barsky clip of `a→b` against `[-h, h]²`; returns the touched parameter range.
fn clip_segment(a: Point, b: Point, h: f64) -> Option<(f64, f64)> {
    let d = Point::new(b.x - a.x, b.y - a.y);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-d.x, a.x + h), (d.x, h - a.x), (-d.y, a.y + h), (d.y, h - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

#[derive(Debug, Clone, Copy)]
struct Crossing {
    at: Point,
    outbound: bool,
}

fn boundary_crossings(polyline: &[Point], h: f64) -> Vec<Crossing> {
    let mut out: Vec<Crossing> = Vec::new();
    for w in polyline.windows(2) {
        let (a, b) = (w[0], w[1]);
        let Some((t0, t1)) = clip_segment(a, b, h) else { continue };
        let lerp = |t: f64| Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
        if strictly_outside(a, h) {
            out.push(Crossing { at: lerp(t0), outbound: false });
        }
        if strictly_outside(b, h) {
            out.push(Crossing { at: lerp(t1), outbound: true });
        }
    }
    out
}

/// One candidate per lane centerline crossing of the window boundary. One-way lanes keep
/// only crossings that leave the window in travel direction; two-way lanes keep both.
pub fn detect_lanes(map: &ParkingMap, ego: &Pose, limit: f64) -> Vec<IntentCandidate> {
    let mut out: Vec<IntentCandidate> = Vec::new();
    for (j, lane) in map.lanes.iter().enumerate() {
        let local: Vec<Point> = lane.points().into_iter().map(|p| ego.point_to_local(p)).collect();
        let first_of_lane = out.len();
        for c in boundary_crossings(&local, limit) {
            if lane.one_way && !c.outbound {
                continue;
            }
            // A tangent touch yields an entry and exit at the same point.
            if out[first_of_lane..].iter().any(|o| o.eta.distance(&c.at) < 1e-9) {
                continue;
            }
            out.push(IntentCandidate::new(IntentKind::Lane, j, c.at, None));
        }
    }
    out
}

pub fn detect_candidates(map: &ParkingMap, ego: &Pose, limit: f64) -> CandidateSet {
    CandidateSet { spots: detect_spots(map, ego, limit), lanes: detect_lanes(map, ego, limit) }
}

/// Cost used to rank lane exits: more steering and a longer drive cost more.
pub fn lane_cost(candidate: &IntentCandidate, limit: f64) -> f64 {
    candidate.heading_diff / PI + 0.5 * candidate.distance / limit
}

/// Weights `1, (M-1)/M, …, 1/M` handed out in ascending cost order (ties by position).
/// The result is aligned with `lanes`.
pub fn lane_weights(lanes: &[IntentCandidate], limit: f64) -> Result<Vec<f64>> {
    if lanes.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let m = lanes.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| lane_cost(&lanes[a], limit).total_cmp(&lane_cost(&lanes[b], limit)).then(a.cmp(&b)));
    let mut w = vec![0.0; m];
    for (rank, &j) in order.iter().enumerate() {
        w[j] = (m - rank) as f64 / m as f64;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{Lane, ParkingSpot};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn spot(id: &str, cx: f64, cy: f64, occupied: bool) -> ParkingSpot {
        ParkingSpot {
            id: id.into(),
            corners: [[cx - 1.25, cy - 2.5], [cx + 1.25, cy - 2.5], [cx + 1.25, cy + 2.5], [cx - 1.25, cy + 2.5]],
            occupied,
        }
    }

    fn lane(id: &str, pts: &[[f64; 2]], one_way: bool) -> Lane {
        Lane { id: id.into(), polyline: pts.to_vec(), one_way }
    }

    #[test]
    fn features_examples() {
        assert_eq!(features(Point::new(5.0, 0.0)), (5.0, 0.0));
        let (d, a) = features(Point::new(0.0, 5.0));
        assert_eq!(d, 5.0);
        assert!((a - FRAC_PI_2).abs() < 1e-15);
        // Calculator oracle: atan2(-4, -3) = -(π - atan(4/3)) = -2.214297...
        let (d, a) = features(Point::new(-3.0, -4.0));
        assert_eq!(d, 5.0);
        assert!((a - (PI - (4.0f64 / 3.0).atan())).abs() < 1e-12);
        assert!((a - 2.2143).abs() < 1e-4);
    }

    #[test]
    fn occupied_spots_are_skipped() {
        let map = ParkingMap { spots: vec![spot("a", 3.0, 6.0, true), spot("b", -3.0, 6.0, true)], lanes: vec![] };
        assert!(detect_spots(&map, &Pose::IDENTITY, 10.0).is_empty());
    }

    #[test]
    fn spot_center_on_window_edge_is_included() {
        let map = ParkingMap { spots: vec![spot("edge", 10.0, 0.0, false), spot("out", 10.01, 0.0, false)], lanes: vec![] };
        let c = detect_spots(&map, &Pose::IDENTITY, 10.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].map_index, 0);
    }

    #[test]
    fn straight_lane_crossings() {
        // Segment-square oracle: the line y = 0 meets |x| = 10 at (±10, 0).
        let two_way = ParkingMap { spots: vec![], lanes: vec![lane("l", &[[-30.0, 0.0], [30.0, 0.0]], false)] };
        let c = detect_lanes(&two_way, &Pose::IDENTITY, 10.0);
        let mut xs: Vec<f64> = c.iter().map(|c| c.eta.x).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![-10.0, 10.0]);
        assert!(c.iter().all(|c| c.eta.y.abs() < 1e-12));

        let one_way = ParkingMap { spots: vec![], lanes: vec![lane("l", &[[-30.0, 0.0], [30.0, 0.0]], true)] };
        let c = detect_lanes(&one_way, &Pose::IDENTITY, 10.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].eta, Point::new(10.0, 0.0));
    }

    #[test]
    fn lane_crossings_rotate_with_ego() {
        let map = ParkingMap { spots: vec![], lanes: vec![lane("l", &[[-30.0, 0.0], [30.0, 0.0]], true)] };
        let c = detect_lanes(&map, &Pose::new(0.0, 0.0, FRAC_PI_2), 10.0);
        // The exit at world (10, 0) sits to the ego's right.
        assert_eq!(c.len(), 1);
        assert!((c[0].eta.x).abs() < 1e-9 && (c[0].eta.y + 10.0).abs() < 1e-9);
    }

    #[test]
    fn no_lane_crossing_is_degenerate() {
        let map = ParkingMap { spots: vec![spot("s", 3.0, 6.0, false)], lanes: vec![lane("l", &[[-3.0, 0.0], [3.0, 0.0]], false)] };
        let set = detect_candidates(&map, &Pose::IDENTITY, 10.0);
        assert!(set.is_degenerate());
        assert_eq!(set.spots.len(), 1);
    }

    /// Layout resembling a T-shaped aisle junction with four free bays in view.
    pub(crate) fn junction_map() -> ParkingMap {
        ParkingMap {
            spots: vec![
                spot("n1", -4.0, 6.5, false),
                spot("n2", -1.5, 6.5, true),
                spot("n3", 1.0, 6.5, false),
                spot("s1", -4.0, -6.5, false),
                spot("s2", -1.5, -6.5, false),
                spot("far", 25.0, 6.5, false),
            ],
            lanes: vec![
                lane("main", &[[-40.0, 0.0], [40.0, 0.0]], true),
                lane("cross", &[[6.0, -40.0], [6.0, 40.0]], false),
            ],
        }
    }

    #[test]
    fn junction_scene_counts() {
        let set = detect_candidates(&junction_map(), &Pose::IDENTITY, 10.0);
        assert_eq!(set.spots.len(), 4);
        assert_eq!(set.lanes.len(), 3);
        assert_eq!(set.len(), 7);
    }

    #[test]
    fn lane_weight_examples() {
        assert!(matches!(lane_weights(&[], 10.0), Err(Error::EmptyCandidates)));
        let ahead = IntentCandidate::new(IntentKind::Lane, 0, Point::new(10.0, 0.0), None);
        assert_eq!(lane_weights(std::slice::from_ref(&ahead), 10.0).unwrap(), vec![1.0]);
        let left = IntentCandidate::new(IntentKind::Lane, 1, Point::new(0.0, 10.0), None);
        // Costs: 0 + 0.5 vs 0.5 + 0.5, so straight ahead ranks first.
        assert_eq!(lane_weights(&[left.clone(), ahead.clone()], 10.0).unwrap(), vec![0.5, 1.0]);
        let back = IntentCandidate::new(IntentKind::Lane, 2, Point::new(-10.0, 0.0), None);
        assert_eq!(lane_weights(&[back, left, ahead], 10.0).unwrap(), vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn lane_weight_ties_by_position() {
        let a = IntentCandidate::new(IntentKind::Lane, 0, Point::new(0.0, 10.0), None);
        let b = IntentCandidate::new(IntentKind::Lane, 1, Point::new(0.0, -10.0), None);
        assert_eq!(lane_weights(&[a, b], 10.0).unwrap(), vec![1.0, 0.5]);
    }

    proptest! {
        #[test]
        fn distance_is_rotation_invariant(x in -20.0..20.0f64, y in -20.0..20.0f64, th in -PI..PI) {
            let (d0, a0) = features(Point::new(x, y));
            let r = Pose::new(0.0, 0.0, th).point_to_world(Point::new(x, y));
            let (d1, _) = features(r);
            prop_assert!((d0 - d1).abs() < 1e-9);
            prop_assert!((0.0..=PI).contains(&a0));
        }

        #[test]
        fn weights_are_permuted_sequence(pts in proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..8)) {
            let lanes: Vec<IntentCandidate> = pts.iter().enumerate()
                .map(|(j, &(x, y))| IntentCandidate::new(IntentKind::Lane, j, Point::new(x, y), None)).collect();
            let w = lane_weights(&lanes, 10.0).unwrap();
            let m = lanes.len();
            let mut sorted = w.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let expect: Vec<f64> = (0..m).map(|k| (m - k) as f64 / m as f64).collect();
            prop_assert_eq!(&sorted, &expect);
            // Higher weight never has strictly higher cost.
            for a in 0..m {
                for b in 0..m {
                    if w[a] > w[b] {
                        prop_assert!(lane_cost(&lanes[a], 10.0) <= lane_cost(&lanes[b], 10.0));
                    }
                }
            }
        }
    }
}

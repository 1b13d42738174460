//! Parametric parking lot with scripted, kinematically smooth vehicles.
//!
//! Layout: spot rows come in pairs facing a shared east–west aisle. Aisles run past
//! both ends of the lot; a north–south cross aisle east of the spots creates one
//! intersection per aisle. Vehicles enter an aisle from the west or east end.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::map::{Lane, ParkingMap, ParkingSpot};
use crate::scene::{AgentKind, Scene, SceneBuilder, TrackSample};

pub const SPOT_WIDTH: f64 = 2.7;
pub const SPOT_LENGTH: f64 = 5.0;
pub const AISLE_WIDTH: f64 = 7.0;
/// Turning radius of every scripted arc (curvature 0.25 1/m).
pub const TURN_RADIUS: f64 = 4.0;
pub const MAX_ACCEL: f64 = 1.5;
/// Aisles extend this far past the spots on the west side.
const WEST_RUN: f64 = 20.0;
/// Offset of the cross aisle from the last spot column, and its overhang.
const CROSS_OFFSET: f64 = 8.0;
const CROSS_RUN: f64 = 15.0;
const SAMPLE_DS: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Cruise,
    ForwardPark,
    ReversePark,
    Turn,
}

/// Relative frequencies of the scripted maneuvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverMix {
    pub cruise: f64,
    pub forward_park: f64,
    pub reverse_park: f64,
    pub turn: f64,
}

impl Default for ManeuverMix {
    fn default() -> Self {
        Self { cruise: 0.25, forward_park: 0.35, reverse_park: 0.15, turn: 0.25 }
    }
}

impl ManeuverMix {
    fn sample(&self, rng: &mut impl Rng) -> Maneuver {
        let w = [self.cruise, self.forward_park, self.reverse_park, self.turn];
        let mut u = rng.gen::<f64>() * w.iter().sum::<f64>();
        for (m, wi) in [Maneuver::Cruise, Maneuver::ForwardPark, Maneuver::ReversePark, Maneuver::Turn].into_iter().zip(w) {
            if u < wi {
                return m;
            }
            u -= wi;
        }
        Maneuver::Turn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Spot rows; must be even (two per aisle).
    pub rows: usize,
    pub cols: usize,
    pub n_agents: usize,
    pub mix: ManeuverMix,
    pub duration_s: f64,
    pub frame_rate: f64,
    /// Fraction of spots holding a parked car (static obstacle).
    pub occupied_fraction: f64,
    /// Latest agent start as a fraction of the duration.
    pub start_window: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 10,
            n_agents: 8,
            mix: ManeuverMix::default(),
            duration_s: 60.0,
            frame_rate: 25.0,
            occupied_fraction: 0.4,
            start_window: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || !self.rows.is_multiple_of(2) || self.cols == 0 {
            return Err(Error::InvalidConfig(format!("lot needs an even number of rows ≥ 2 and ≥ 1 column, got {}×{}", self.rows, self.cols)));
        }
        if !(self.duration_s > 0.0 && self.frame_rate > 0.0) {
            return Err(Error::InvalidConfig("duration and frame rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.occupied_fraction) || !(0.0..=1.0).contains(&self.start_window) {
            return Err(Error::InvalidConfig("fractions must lie in [0, 1]".into()));
        }
        let m = &self.mix;
        let w = [m.cruise, m.forward_park, m.reverse_park, m.turn];
        if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig("maneuver mix needs non-negative weights with a positive sum".into()));
        }
        Ok(())
    }
}

/// Geometry of the generated lot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LotLayout {
    pub rows: usize,
    pub cols: usize,
}

impl LotLayout {
    pub fn aisles(&self) -> usize {
        self.rows / 2
    }

    /// Centerline y of aisle `k`.
    pub fn aisle_y(&self, k: usize) -> f64 {
        k as f64 * (2.0 * SPOT_LENGTH + AISLE_WIDTH) + SPOT_LENGTH + 0.5 * AISLE_WIDTH
    }

    pub fn west_x(&self) -> f64 {
        -WEST_RUN
    }

    pub fn cross_x(&self) -> f64 {
        self.cols as f64 * SPOT_WIDTH + CROSS_OFFSET
    }

    pub fn east_x(&self) -> f64 {
        self.cross_x() + CROSS_RUN
    }

    /// Center of spot `(row, col)`; row `2k` lies south of aisle `k`, `2k + 1` north.
    pub fn spot_center(&self, row: usize, col: usize) -> (f64, f64) {
        let yc = self.aisle_y(row / 2);
        let off = 0.5 * AISLE_WIDTH + 0.5 * SPOT_LENGTH;
        ((col as f64 + 0.5) * SPOT_WIDTH, if row.is_multiple_of(2) { yc - off } else { yc + off })
    }

    pub fn spot_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn map(&self) -> ParkingMap {
        let mut spots = Vec::with_capacity(self.rows * self.cols);
        for row in 0..self.rows {
            for col in 0..self.cols {
                let (cx, cy) = self.spot_center(row, col);
                let (hw, hl) = (0.5 * SPOT_WIDTH, 0.5 * SPOT_LENGTH);
                spots.push(ParkingSpot {
                    id: format!("spot_r{row}_c{col}"),
                    corners: [[cx - hw, cy - hl], [cx + hw, cy - hl], [cx + hw, cy + hl], [cx - hw, cy + hl]],
                    occupied: false,
                });
            }
        }
        let mut lanes: Vec<Lane> = (0..self.aisles())
            .map(|k| Lane { id: format!("aisle{k}"), polyline: vec![[self.west_x(), self.aisle_y(k)], [self.east_x(), self.aisle_y(k)]], one_way: false })
            .collect();
        lanes.push(Lane {
            id: "cross".into(),
            polyline: vec![[self.cross_x(), self.aisle_y(0) - CROSS_RUN], [self.cross_x(), self.aisle_y(self.aisles() - 1) + CROSS_RUN]],
            one_way: false,
        });
        ParkingMap { spots, lanes }
    }
}

/// Sampled path piece; `reverse` pieces are driven backwards.
#[derive(Debug, Clone)]
struct Leg {
    /// `(x, y, direction of motion)` every `SAMPLE_DS` meters.
    points: Vec<(f64, f64, f64)>,
    reverse: bool,
    stop_at_end: bool,
}

#[derive(Debug, Default)]
struct LegBuilder {
    points: Vec<(f64, f64, f64)>,
}

impl LegBuilder {
    fn line(mut self, from: (f64, f64), to: (f64, f64)) -> Self {
        let len = (to.0 - from.0).hypot(to.1 - from.1);
        let dir = (to.1 - from.1).atan2(to.0 - from.0);
        let n = (len / SAMPLE_DS).ceil().max(1.0) as usize;
        let skip = usize::from(!self.points.is_empty());
        for i in skip..=n {
            let t = i as f64 / n as f64;
            self.points.push((from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1), dir));
        }
        self
    }

    /// Circle arc from angle `theta0` through `sweep` radians around `center`.
    fn arc(mut self, center: (f64, f64), theta0: f64, sweep: f64) -> Self {
        let n = (TURN_RADIUS * sweep.abs() / SAMPLE_DS).ceil().max(1.0) as usize;
        let skip = usize::from(!self.points.is_empty());
        for i in skip..=n {
            let th = theta0 + sweep * i as f64 / n as f64;
            let dir = th + sweep.signum() * FRAC_PI_2;
            self.points.push((center.0 + TURN_RADIUS * th.cos(), center.1 + TURN_RADIUS * th.sin(), dir));
        }
        self
    }

    fn end(&self) -> (f64, f64) {
        let p = self.points.last().expect("non-empty leg");
        (p.0, p.1)
    }

    fn build(self, reverse: bool, stop_at_end: bool) -> Leg {
        Leg { points: self.points, reverse, stop_at_end }
    }
}

/// Path in a canonical frame where the vehicle enters at `x0` heading +x along `yc`.
/// `north` selects the spot row / turn direction. `target_x` is the spot column center
/// or the cross-aisle x.
fn canonical_legs(m: Maneuver, x0: f64, x_end: f64, yc: f64, target_x: f64, north: bool, turn_len: f64) -> Vec<Leg> {
    let r = TURN_RADIUS;
    let s = if north { 1.0 } else { -1.0 };
    let spot_y = yc + s * (0.5 * AISLE_WIDTH + 0.5 * SPOT_LENGTH);
    match m {
        Maneuver::Cruise => vec![LegBuilder::default().line((x0, yc), (x_end, yc)).build(false, false)],
        Maneuver::Turn => {
            let b = LegBuilder::default().line((x0, yc), (target_x - r, yc)).arc((target_x - r, yc + s * r), -s * FRAC_PI_2, s * FRAC_PI_2);
            let e = b.end();
            vec![b.line(e, (target_x, yc + s * (r + turn_len))).build(false, false)]
        }
        Maneuver::ForwardPark => {
            let b = LegBuilder::default().line((x0, yc), (target_x - r, yc)).arc((target_x - r, yc + s * r), -s * FRAC_PI_2, s * FRAC_PI_2);
            let e = b.end();
            vec![b.line(e, (target_x, spot_y)).build(false, true)]
        }
        Maneuver::ReversePark => {
            let fwd = LegBuilder::default().line((x0, yc), (target_x + r, yc)).build(false, true);
            let b = LegBuilder::default().arc((target_x + r, yc + s * r), -s * FRAC_PI_2, -s * FRAC_PI_2);
            let e = b.end();
            vec![fwd, b.line(e, (target_x, spot_y)).build(true, true)]
        }
    }
}

/// Per-frame `[x, y, heading, speed, accel]` along the legs, followed by `hold` frames
/// at rest when the last leg stops.
fn time_parameterize(legs: &[Leg], dt: f64, v_fwd: f64, v_rev: f64, pause_frames: usize) -> Vec<[f64; 5]> {
    let mut out: Vec<[f64; 5]> = Vec::new();
    let mut v_prev_signed = 0.0;
    for (li, leg) in legs.iter().enumerate() {
        let total = (leg.points.len() - 1) as f64 * SAMPLE_DS;
        let vmax = if leg.reverse { v_rev } else { v_fwd };
        let sign = if leg.reverse { -1.0 } else { 1.0 };
        // Entering vehicles are already rolling; legs after a stop start from rest.
        let mut v: f64 = if li == 0 { vmax } else { 0.0 };
        let mut s = 0.0;
        let pose_at = |s: f64| {
            let f = (s / SAMPLE_DS).min((leg.points.len() - 1) as f64);
            let i = (f.floor() as usize).min(leg.points.len() - 2);
            let t = f - i as f64;
            let (a, b) = (leg.points[i], leg.points[i + 1]);
            let dir = a.2 + t * wrap_angle(b.2 - a.2);
            (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), dir)
        };
        let push = |out: &mut Vec<[f64; 5]>, s: f64, v: f64, v_prev: &mut f64| {
            let (x, y, dir) = pose_at(s);
            let heading = wrap_angle(if leg.reverse { dir + PI } else { dir });
            let vs = sign * v;
            out.push([x, y, heading, vs, (vs - *v_prev) / dt]);
            *v_prev = vs;
        };
        if li == 0 {
            push(&mut out, 0.0, v, &mut v_prev_signed);
        }
        loop {
            let mut v_next = (v + MAX_ACCEL * dt).min(vmax);
            if leg.stop_at_end {
                v_next = v_next.min((2.0 * MAX_ACCEL * (total - s).max(0.0)).sqrt());
            }
            let remaining = total - s;
            if remaining <= v_next * dt || remaining < 1e-3 || (leg.stop_at_end && v_next < 1e-3) {
                v = if leg.stop_at_end { 0.0 } else { v_next };
                push(&mut out, total, v, &mut v_prev_signed);
                break;
            }
            s += v_next * dt;
            v = v_next;
            push(&mut out, s, v, &mut v_prev_signed);
        }
        if leg.stop_at_end && li + 1 < legs.len() {
            let last = *out.last().expect("pushed");
            for _ in 0..pause_frames {
                out.push([last[0], last[1], last[2], 0.0, 0.0]);
            }
        }
    }
    out
}

/// Generates the scene and its map; identical for identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Scene, ParkingMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lot = LotLayout { rows: spec.rows, cols: spec.cols };
    let mut map = lot.map();
    let n_frames = (spec.duration_s * spec.frame_rate).round() as usize;
    let dt = 1.0 / spec.frame_rate;
    let mut b = SceneBuilder::new(format!("synthetic_{}", spec.seed), spec.frame_rate, n_frames);

    let mut free: Vec<(usize, usize)> = (0..spec.rows).flat_map(|r| (0..spec.cols).map(move |c| (r, c))).collect();
    free.shuffle(&mut rng);
    let n_parked = (spec.occupied_fraction * free.len() as f64).round() as usize;
    for (i, (row, col)) in free.drain(..n_parked).enumerate() {
        let (cx, cy) = lot.spot_center(row, col);
        let heading = if rng.gen::<bool>() { FRAC_PI_2 } else { -FRAC_PI_2 };
        b.add_obstacle(format!("parked{i}"), cx, cy, heading, 4.6, 1.9);
        map.spots[lot.spot_index(row, col)].occupied = true;
    }

    let (xw, xe) = (lot.west_x(), lot.east_x());
    let mirror = |x: f64| xw + xe - x;
    for i in 0..spec.n_agents {
        let mut m = spec.mix.sample(&mut rng);
        if matches!(m, Maneuver::ForwardPark | Maneuver::ReversePark) && free.is_empty() {
            m = Maneuver::Cruise;
        }
        let from_east = rng.gen::<bool>();
        let (aisle, north, target_x) = match m {
            Maneuver::ForwardPark | Maneuver::ReversePark => {
                let (row, col) = free.pop().expect("checked above");
                let x = lot.spot_center(row, col).0;
                (row / 2, row % 2 == 1, if from_east { mirror(x) } else { x })
            }
            _ => {
                let x = lot.cross_x();
                (rng.gen_range(0..lot.aisles()), rng.gen::<bool>(), if from_east { mirror(x) } else { x })
            }
        };
        let yc = lot.aisle_y(aisle);
        let legs = canonical_legs(m, xw, xe, yc, target_x, north, CROSS_RUN);
        let v_fwd = rng.gen_range(2.0..4.5);
        let v_rev = rng.gen_range(0.8..1.5);
        let mut states = time_parameterize(&legs, dt, v_fwd, v_rev, (spec.frame_rate * 1.0) as usize);
        if from_east {
            for s in &mut states {
                s[0] = mirror(s[0]);
                s[2] = wrap_angle(PI - s[2]);
            }
        }
        let start = rng.gen_range(0..=(spec.start_window * n_frames as f64) as usize);
        let parks = matches!(m, Maneuver::ForwardPark | Maneuver::ReversePark);
        if parks {
            let last = *states.last().expect("non-empty track");
            while start + states.len() < n_frames {
                states.push([last[0], last[1], last[2], 0.0, 0.0]);
            }
        }
        let track: Vec<TrackSample> = states.into_iter().enumerate().map(|(k, s)| (start + k, s)).take_while(|(f, _)| *f < n_frames).collect();
        if track.is_empty() {
            continue;
        }
        let length = rng.gen_range(4.3..4.9);
        let width = rng.gen_range(1.8..2.0);
        b.add_agent(format!("car{i}"), AgentKind::Car, length, width, track);
    }
    Ok((b.build()?, map))
}

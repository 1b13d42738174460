#![allow(dead_code)]
//! Pairs of rendered examples with identical history and intent whose futures differ
//! only through what the images show: one variant passes a roadside obstacle, the other
//! brakes behind an obstacle in its path.

use parkcast_core::geometry::RasterSpec;
use parkcast_core::map::{Lane, ParkingMap};
use parkcast_core::raster::{rasterize_history, RenderConfig};
use parkcast_core::scene::{AgentIdx, AgentKind, FrameIdx, SceneBuilder};
use parkcast_core::traj::TrajExample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FPS: f64 = 25.0;
pub const STRIDE: usize = 10;
pub const N_HIST: usize = 10;
pub const N_TAIL: usize = 10;
pub const N_PRED: usize = 10;

pub fn raster() -> RasterSpec {
    RasterSpec::new(10.0, 0.5).unwrap()
}

pub const ACCEL: f64 = 1.0;
pub const V_MAX: f64 = 6.0;
pub const BRAKE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    /// The clear variant keeps its speed; the blocked one brakes to rest 3.5 m short of
    /// the obstacle center.
    Cruise,
    /// The clear variant accelerates up to `V_MAX`; the blocked one brakes at `BRAKE`.
    /// The pair members differ from the first future step on.
    Diverge,
}

/// Ego position and speed along x at time `t` (seconds after the anchor) for speed `v`
/// at the anchor. Before the anchor it cruises.
fn motion(t: f64, v: f64, obstacle_x: f64, blocked: bool, dynamics: Dynamics) -> (f64, f64) {
    if t <= 0.0 {
        return (v * t, v);
    }
    match (dynamics, blocked) {
        (Dynamics::Cruise, false) => (v * t, v),
        (Dynamics::Cruise, true) => {
            let a = v * v / (2.0 * (obstacle_x - 3.5));
            let tt = t.min(v / a);
            (v * tt - 0.5 * a * tt * tt, (v - a * tt).max(0.0))
        }
        (Dynamics::Diverge, false) => {
            let t_cap = (V_MAX - v) / ACCEL;
            if t <= t_cap {
                (v * t + 0.5 * ACCEL * t * t, v + ACCEL * t)
            } else {
                (v * t_cap + 0.5 * ACCEL * t_cap * t_cap + V_MAX * (t - t_cap), V_MAX)
            }
        }
        (Dynamics::Diverge, true) => {
            let tt = t.min(v / BRAKE);
            (v * tt - 0.5 * BRAKE * tt * tt, v - BRAKE * tt)
        }
    }
}

fn example(v: f64, obstacle_x: f64, blocked: bool, dynamics: Dynamics) -> TrajExample {
    let anchor = (N_HIST + N_TAIL - 1) * STRIDE;
    let n_frames = anchor + N_PRED * STRIDE + 1;
    let mut b = SceneBuilder::new("toy", FPS, n_frames);
    let track = (0..n_frames)
        .map(|f| {
            let t = (f as f64 - anchor as f64) / FPS;
            let (x, s) = motion(t, v, obstacle_x, blocked, dynamics);
            (f, [x, 0.0, 0.0, s, 0.0])
        })
        .collect();
    b.add_agent("ego", AgentKind::Car, 4.5, 1.9, track);
    b.add_obstacle("block", obstacle_x, if blocked { 0.0 } else { 5.5 }, 0.0, 4.5, 1.9);
    let scene = b.build().unwrap();
    let map = ParkingMap { spots: vec![], lanes: vec![Lane { id: "l".into(), polyline: vec![[-200.0, 0.0], [200.0, 0.0]], one_way: false }] };
    let cfg = RenderConfig { spec: raster(), n_tail: N_TAIL, stride_frames: STRIDE, ..Default::default() };
    let images = rasterize_history(&scene, &map, AgentIdx(0), FrameIdx(anchor), &cfg, N_HIST).unwrap().images;
    let state = |f: usize| {
        let i = scene.instance(scene.instance_at(AgentIdx(0), FrameIdx(f)).unwrap());
        [i.x, i.y, i.heading]
    };
    TrajExample {
        history: (0..N_HIST).map(|k| state(anchor - (N_HIST - 1 - k) * STRIDE)).collect(),
        images,
        intent: [10.0, 0.0],
        future: (1..=N_PRED).map(|k| state(anchor + k * STRIDE)).collect(),
    }
}

/// `2 * pairs` examples, pair members adjacent.
pub fn toy_pairs(pairs: usize, seed: u64, dynamics: Dynamics) -> Vec<TrajExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * pairs);
    for k in 0..pairs {
        let v = 1.5 + 2.5 * k as f64 / (pairs.max(2) - 1) as f64;
        let ox = match dynamics {
            Dynamics::Cruise => rng.gen_range(7.0..9.0),
            // Rest position plus both half lengths plus a gap of 1 to 2 m.
            Dynamics::Diverge => v * v / (2.0 * BRAKE) + 5.5 + rng.gen_range(0.0..1.0),
        };
        out.push(example(v, ox, false, dynamics));
        out.push(example(v, ox, true, dynamics));
    }
    out
}

//! Static parking-lot layout: spot rectangles and lane centerlines, world frame.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_in_polygon, Point};
use crate::scene::{AgentIdx, FrameIdx, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkingSpot {
    pub id: String,
    pub corners: [[f64; 2]; 4],
    pub occupied: bool,
}

impl ParkingSpot {
    pub fn polygon(&self) -> [Point; 4] {
        self.corners.map(Point::from)
    }

    pub fn center(&self) -> Point {
        let (sx, sy) = self.corners.iter().fold((0.0, 0.0), |(x, y), c| (x + c[0], y + c[1]));
        Point::new(sx / 4.0, sy / 4.0)
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_polygon(p, &self.polygon())
    }

    fn area(&self) -> f64 {
        let c = &self.corners;
        0.5 * (0..4).map(|i| c[i][0] * c[(i + 1) % 4][1] - c[(i + 1) % 4][0] * c[i][1]).sum::<f64>().abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: String,
    pub polyline: Vec<[f64; 2]>,
    /// Travel is only allowed in polyline order.
    #[serde(default)]
    pub one_way: bool,
}

impl Lane {
    pub fn points(&self) -> Vec<Point> {
        self.polyline.iter().copied().map(Point::from).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParkingMap {
    #[serde(default)]
    pub spots: Vec<ParkingSpot>,
    #[serde(default)]
    pub lanes: Vec<Lane>,
}

impl ParkingMap {
    pub fn validate(&self) -> Result<()> {
        for s in &self.spots {
            if !(s.area() > 1e-9) {
                return Err(Error::InvalidGeometry(format!("spot '{}' is degenerate", s.id)));
            }
        }
        for l in &self.lanes {
            if l.polyline.len() < 2 {
                return Err(Error::InvalidGeometry(format!("lane '{}' needs at least two points", l.id)));
            }
        }
        Ok(())
    }

    /// Marks spots whose interior holds a static obstacle or another agent at `frame`.
    pub fn occupancy_at(&self, scene: &Scene, frame: FrameIdx, exclude: Option<AgentIdx>) -> Vec<bool> {
        let mut centers: Vec<Point> = scene.obstacles().iter().map(|o| Point::new(o.x, o.y)).collect();
        centers.extend(
            scene
                .frame(frame)
                .instances
                .iter()
                .map(|&i| scene.instance(i))
                .filter(|inst| Some(inst.agent) != exclude)
                .map(|inst| Point::new(inst.x, inst.y)),
        );
        self.spots.iter().map(|s| s.occupied || centers.iter().any(|&c| s.contains(c))).collect()
    }

    /// Copy of the map with the given occupancy flags.
    pub fn with_occupancy(&self, occupied: &[bool]) -> ParkingMap {
        let mut m = self.clone();
        for (s, &o) in m.spots.iter_mut().zip(occupied) {
            s.occupied = o;
        }
        m
    }
}

pub fn load_map(path: impl AsRef<Path>) -> Result<ParkingMap> {
    let map: ParkingMap = serde_json::from_str(&fs::read_to_string(path)?)?;
    map.validate()?;
    Ok(map)
}

pub fn save_map(map: &ParkingMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(map)?)?;
    Ok(())
}

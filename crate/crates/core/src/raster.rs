//! Ego-centric semantic bird's-eye-view rendering.
//!
//! Images are stored as 8-bit RGB in `[channel][row][col]` order, which is also the
//! layout handed to the networks (after scaling to `[0, 1]`). Every polygon is filled
//! with the pixel-center rule and no antialiasing, so rendering is bit-reproducible.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_in_polygon, OrientedBox, Point, Pose, RasterSpec};
use crate::map::ParkingMap;
use crate::scene::{AgentIdx, FrameIdx, InstanceIdx, Neighbor, Scene};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorMap {
    pub background: Rgb,
    pub lane: Rgb,
    pub empty_spot: Rgb,
    pub static_obstacle: Rgb,
    pub target: Rgb,
    pub other_agent: Rgb,
    pub spot_paint: Rgb,
}

impl Default for ColorMap {
    fn default() -> Self {
        Self {
            background: [0, 0, 0],
            lane: [128, 128, 128],
            empty_spot: [0, 255, 0],
            static_obstacle: [0, 0, 255],
            target: [255, 0, 0],
            other_agent: [255, 255, 0],
            spot_paint: [160, 32, 240],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub spec: RasterSpec,
    pub colors: ColorMap,
    /// Number of past footprints drawn behind each agent.
    pub n_tail: usize,
    /// Frames between consecutive tail footprints (and history images).
    pub stride_frames: usize,
    /// Drawn width of lane centerlines, meters.
    pub lane_width: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { spec: RasterSpec::default(), colors: ColorMap::default(), n_tail: 10, stride_frames: 10, lane_width: 6.0 }
    }
}

/// Brightness factor of a tail footprint `age` steps old.
pub fn tail_factor(age: usize, n_tail: usize) -> f64 {
    (n_tail + 1 - age) as f64 / (n_tail + 1) as f64
}

fn dim(c: Rgb, factor: f64) -> Rgb {
    c.map(|v| (v as f64 * factor).round() as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticImage {
    spec: RasterSpec,
    data: Vec<u8>,
}

impl SemanticImage {
    pub fn new(spec: RasterSpec, fill: Rgb) -> Self {
        let plane = spec.n() * spec.n();
        let mut data = vec![0u8; 3 * plane];
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            chunk.fill(fill[c]);
        }
        Self { spec, data }
    }

    /// Wraps raw CHW bytes.
    pub fn from_raw(spec: RasterSpec, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * spec.n() * spec.n() {
            return Err(Error::ShapeMismatch { op: "SemanticImage::from_raw", lhs: vec![data.len()], rhs: vec![3, spec.n(), spec.n()] });
        }
        Ok(Self { spec, data })
    }

    pub fn spec(&self) -> &RasterSpec {
        &self.spec
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Rgb {
        let n = self.spec.n();
        let plane = n * n;
        let i = row * n + col;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set(&mut self, row: usize, col: usize, c: Rgb) {
        let n = self.spec.n();
        let plane = n * n;
        let i = row * n + col;
        self.data[i] = c[0];
        self.data[plane + i] = c[1];
        self.data[2 * plane + i] = c[2];
    }

    /// Channel values scaled into `[0, 1]`, `[channel][row][col]` order.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// Fills every pixel whose center lies inside `poly` (ego frame). Returns the count.
    pub fn fill_polygon(&mut self, poly: &[Point], color: Rgb) -> usize {
        let n = self.spec.n() as i64;
        let (mut rmin, mut rmax, mut cmin, mut cmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in poly {
            let (r, c) = self.spec.world_to_pixel(*p);
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            cmin = cmin.min(c);
            cmax = cmax.max(c);
        }
        let r0 = (rmin.floor() as i64).max(0);
        let r1 = (rmax.ceil() as i64).min(n - 1);
        let c0 = (cmin.floor() as i64).max(0);
        let c1 = (cmax.ceil() as i64).min(n - 1);
        let mut count = 0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let center = self.spec.pixel_center(r as usize, c as usize);
                if point_in_polygon(center, poly) {
                    self.set(r as usize, c as usize, color);
                    count += 1;
                }
            }
        }
        count
    }

    fn fill_box(&mut self, b: &OrientedBox, ego: &Pose, color: Rgb) -> usize {
        self.fill_polygon(&b.to_local(ego).corners(), color)
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        let n = self.spec.n() as u32;
        image::RgbImage::from_fn(n, n, |x, y| image::Rgb(self.get(y as usize, x as usize)))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb_image().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Images for every step of the history horizon, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageHistory {
    pub images: Vec<SemanticImage>,
}

fn lane_polygons(map: &ParkingMap, ego: &Pose, width: f64) -> Vec<[Point; 4]> {
    let hw = 0.5 * width;
    let mut out = Vec::new();
    for lane in &map.lanes {
        let pts: Vec<Point> = lane.points().into_iter().map(|p| ego.point_to_local(p)).collect();
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = a.distance(&b);
            if len == 0.0 {
                continue;
            }
            let d = Point::new((b.x - a.x) / len, (b.y - a.y) / len);
            let nrm = Point::new(-d.y, d.x);
            // Square caps so consecutive segments join without gaps.
            let a = Point::new(a.x - d.x * hw, a.y - d.y * hw);
            let b = Point::new(b.x + d.x * hw, b.y + d.y * hw);
            out.push([
                Point::new(a.x - nrm.x * hw, a.y - nrm.y * hw),
                Point::new(b.x - nrm.x * hw, b.y - nrm.y * hw),
                Point::new(b.x + nrm.x * hw, b.y + nrm.y * hw),
                Point::new(a.x + nrm.x * hw, a.y + nrm.y * hw),
            ]);
        }
    }
    out
}

/// Renders the window around `target` at its frame.
pub fn rasterize(scene: &Scene, map: &ParkingMap, target: InstanceIdx, cfg: &RenderConfig) -> Result<SemanticImage> {
    if target.0 >= scene.instances().len() {
        return Err(Error::InvalidInput(format!("target instance {} not in scene '{}'", target.0, scene.id)));
    }
    let inst = scene.instance(target);
    let ego = inst.pose();
    let frame = inst.frame;
    let me = inst.agent;
    let limit = cfg.spec.sensing_limit();
    let colors = &cfg.colors;
    let mut img = SemanticImage::new(cfg.spec, colors.background);

    for poly in lane_polygons(map, &ego, cfg.lane_width) {
        img.fill_polygon(&poly, colors.lane);
    }
    for spot in map.spots.iter().filter(|s| !s.occupied) {
        let local = spot.polygon().map(|p| ego.point_to_local(p));
        img.fill_polygon(&local, colors.empty_spot);
    }
    let current = scene.neighbors(frame, &ego, limit, Some(me));
    for n in &current {
        if let Neighbor::Obstacle(o) = n {
            img.fill_box(&scene.obstacle(*o).footprint(), &ego, colors.static_obstacle);
        }
    }

    for age in (1..=cfg.n_tail).rev() {
        let Some(past) = frame.0.checked_sub(age * cfg.stride_frames) else { continue };
        let factor = tail_factor(age, cfg.n_tail);
        let past = FrameIdx(past);
        for n in scene.neighbors(past, &ego, limit, None) {
            if let Neighbor::Instance(i) = n {
                let base = if scene.instance(i).agent == me { colors.target } else { colors.other_agent };
                img.fill_box(&scene.footprint(i), &ego, dim(base, factor));
            }
        }
    }

    for n in &current {
        if let Neighbor::Instance(i) = n {
            img.fill_box(&scene.footprint(*i), &ego, colors.other_agent);
        }
    }
    img.fill_box(&scene.footprint(target), &ego, colors.target);
    Ok(img)
}

/// One image per history step, each rendered in the target's pose at that step.
pub fn rasterize_history(
    scene: &Scene,
    map: &ParkingMap,
    agent: AgentIdx,
    at: FrameIdx,
    cfg: &RenderConfig,
    n_hist: usize,
) -> Result<ImageHistory> {
    let track = scene.history(agent, at, n_hist + cfg.n_tail, cfg.stride_frames)?;
    let images = track[cfg.n_tail..].iter().map(|&i| rasterize(scene, map, i, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(ImageHistory { images })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaintedImage {
    pub image: SemanticImage,
    /// False when the polygon covered no pixel of the window; the image is then unchanged.
    pub inside: bool,
}

/// Copy of `img` with the spot outline (ego frame) filled in the paint color.
pub fn paint_spot(img: &SemanticImage, polygon: &[Point], colors: &ColorMap) -> PaintedImage {
    let mut image = img.clone();
    let painted = image.fill_polygon(polygon, colors.spot_paint);
    PaintedImage { image, inside: painted > 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{Lane, ParkingSpot};
    use crate::scene::{AgentKind, SceneBuilder};

    fn small_cfg(n_tail: usize) -> RenderConfig {
        RenderConfig { spec: RasterSpec::new(10.0, 0.25).unwrap(), n_tail, ..Default::default() }
    }

    fn lone_scene() -> Scene {
        let mut b = SceneBuilder::new("s", 25.0, 1);
        b.add_agent("ego", AgentKind::Car, 4.0, 2.0, vec![(0, [5.0, 5.0, 0.3, 0.0, 0.0])]);
        b.build().unwrap()
    }

    #[test]
    fn empty_world_is_background_plus_target() {
        let s = lone_scene();
        let cfg = small_cfg(0);
        let img = rasterize(&s, &ParkingMap::default(), InstanceIdx(0), &cfg).unwrap();
        let n = cfg.spec.n();
        let mut target = 0;
        for r in 0..n {
            for c in 0..n {
                let px = img.get(r, c);
                assert!(px == cfg.colors.background || px == cfg.colors.target);
                target += (px == cfg.colors.target) as usize;
            }
        }
        // 4 m × 2 m at 0.25 m/px covers 16 × 8 pixel centers.
        assert_eq!(target, 128);
        assert_eq!(img.get(n / 2, n / 2), cfg.colors.target);
    }

    #[test]
    fn target_faces_east() {
        let s = lone_scene();
        let cfg = small_cfg(0);
        let img = rasterize(&s, &ParkingMap::default(), InstanceIdx(0), &cfg).unwrap();
        let n = cfg.spec.n();
        // Long axis horizontal: 16 px wide along the row through the center, 8 px tall.
        let row: usize = (0..n).filter(|&c| img.get(n / 2, c) == cfg.colors.target).count();
        let col: usize = (0..n).filter(|&r| img.get(r, n / 2) == cfg.colors.target).count();
        assert_eq!((row, col), (16, 8));
    }

    #[test]
    fn bad_target_rejected() {
        let s = lone_scene();
        assert!(rasterize(&s, &ParkingMap::default(), InstanceIdx(3), &small_cfg(0)).is_err());
    }

    #[test]
    fn layers_and_colors() {
        let mut b = SceneBuilder::new("s", 25.0, 1);
        b.add_agent("ego", AgentKind::Car, 4.0, 2.0, vec![(0, [0.0, 0.0, 0.0, 0.0, 0.0])]);
        b.add_agent("other", AgentKind::Car, 4.0, 2.0, vec![(0, [-6.0, 0.0, 0.0, 0.0, 0.0])]);
        b.add_obstacle("o", 5.05, 6.55, 0.0, 1.0, 1.0);
        let s = b.build().unwrap();
        let map = ParkingMap {
            spots: vec![ParkingSpot { id: "p".into(), corners: [[-3.0, 4.0], [-1.0, 4.0], [-1.0, 9.0], [-3.0, 9.0]], occupied: false }],
            lanes: vec![Lane { id: "l".into(), polyline: vec![[-30.0, 0.0], [30.0, 0.0]], one_way: false }],
        };
        let cfg = small_cfg(0);
        let img = rasterize(&s, &map, InstanceIdx(0), &cfg).unwrap();
        let at = |x: f64, y: f64| {
            let (r, c) = cfg.spec.pixel_index(Point::new(x, y));
            img.get(r as usize, c as usize)
        };
        assert_eq!(at(0.1, 0.1), cfg.colors.target);
        assert_eq!(at(-6.0, 0.1), cfg.colors.other_agent);
        assert_eq!(at(8.0, 2.5), cfg.colors.lane);
        assert_eq!(at(-2.0, 6.0), cfg.colors.empty_spot);
        assert_eq!(at(5.1, 6.6), cfg.colors.static_obstacle);
        assert_eq!(at(8.0, -8.0), cfg.colors.background);
    }

    #[test]
    fn tail_dims_with_age() {
        let mut b = SceneBuilder::new("s", 25.0, 41);
        let track = (0..41).map(|f| (f, [-6.0 + 0.1 * f as f64, 4.0, 0.0, 2.5, 0.0])).collect();
        b.add_agent("ego", AgentKind::Car, 4.0, 2.0, (0..41).map(|f| (f, [0.0, -4.0, 0.0, 0.0, 0.0])).collect());
        b.add_agent("mover", AgentKind::Car, 1.0, 1.0, track);
        let s = b.build().unwrap();
        let cfg = RenderConfig { n_tail: 4, ..small_cfg(4) };
        let target = s.instance_at(AgentIdx(0), FrameIdx(40)).unwrap();
        let img = rasterize(&s, &ParkingMap::default(), target, &cfg).unwrap();
        let at = |x: f64, y: f64| {
            let (r, c) = cfg.spec.pixel_index(Point::new(x, y + 4.0));
            img.get(r as usize, c as usize)[0]
        };
        // Mover at frame 40 sits at x = -2; each tail step is 1 m further back.
        let reds: Vec<u8> = (0..5).map(|k| at(-2.0 - k as f64, 4.0)).collect();
        assert_eq!(reds[0], 255);
        assert!(reds.windows(2).all(|w| w[0] > w[1]), "{reds:?}");
        assert_eq!(reds[1], (255.0 * 4.0 / 5.0f64).round() as u8);
    }

    #[test]
    fn paint_spot_touches_only_polygon() {
        let s = lone_scene();
        let cfg = small_cfg(0);
        let img = rasterize(&s, &ParkingMap::default(), InstanceIdx(0), &cfg).unwrap();
        let poly = [Point::new(3.0, 3.0), Point::new(5.0, 3.0), Point::new(5.0, 8.0), Point::new(3.0, 8.0)];
        let out = paint_spot(&img, &poly, &cfg.colors);
        assert!(out.inside);
        let n = cfg.spec.n();
        for r in 0..n {
            for c in 0..n {
                let inside = point_in_polygon(cfg.spec.pixel_center(r, c), &poly);
                assert_eq!(out.image.get(r, c) != img.get(r, c), inside);
            }
        }
        let poly2 = [Point::new(-5.0, -3.0), Point::new(-3.0, -3.0), Point::new(-3.0, -8.0), Point::new(-5.0, -8.0)];
        let out2 = paint_spot(&img, &poly2, &cfg.colors);
        for r in 0..n {
            for c in 0..n {
                let p = cfg.spec.pixel_center(r, c);
                let differ = out.image.get(r, c) != out2.image.get(r, c);
                assert_eq!(differ, point_in_polygon(p, &poly) || point_in_polygon(p, &poly2));
            }
        }
    }

    #[test]
    fn paint_outside_window_is_flagged() {
        let s = lone_scene();
        let cfg = small_cfg(0);
        let img = rasterize(&s, &ParkingMap::default(), InstanceIdx(0), &cfg).unwrap();
        let poly = [Point::new(30.0, 3.0), Point::new(32.0, 3.0), Point::new(32.0, 8.0), Point::new(30.0, 8.0)];
        let out = paint_spot(&img, &poly, &cfg.colors);
        assert!(!out.inside);
        assert_eq!(out.image, img);
    }

    #[test]
    fn history_of_one_matches_single_render() {
        let mut b = SceneBuilder::new("s", 25.0, 60);
        b.add_agent("ego", AgentKind::Car, 4.0, 2.0, (0..60).map(|f| (f, [0.05 * f as f64, 0.0, 0.0, 1.25, 0.0])).collect());
        let s = b.build().unwrap();
        let cfg = RenderConfig { n_tail: 2, ..small_cfg(2) };
        let h = rasterize_history(&s, &ParkingMap::default(), AgentIdx(0), FrameIdx(50), &cfg, 1).unwrap();
        let single = rasterize(&s, &ParkingMap::default(), s.instance_at(AgentIdx(0), FrameIdx(50)).unwrap(), &cfg).unwrap();
        assert_eq!(h.images, vec![single]);
        assert!(matches!(
            rasterize_history(&s, &ParkingMap::default(), AgentIdx(0), FrameIdx(50), &cfg, 5),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn stationary_world_history_is_constant() {
        let mut b = SceneBuilder::new("s", 25.0, 120);
        b.add_agent("ego", AgentKind::Car, 4.0, 2.0, (0..120).map(|f| (f, [1.0, 2.0, 0.5, 0.0, 0.0])).collect());
        b.add_agent("other", AgentKind::Car, 4.0, 2.0, (0..120).map(|f| (f, [-4.0, 2.0, 0.1, 0.0, 0.0])).collect());
        let s = b.build().unwrap();
        let cfg = RenderConfig { n_tail: 3, ..small_cfg(3) };
        let h = rasterize_history(&s, &ParkingMap::default(), AgentIdx(0), FrameIdx(110), &cfg, 5).unwrap();
        assert_eq!(h.images.len(), 5);
        assert!(h.images.windows(2).all(|w| w[0] == w[1]));
    }
}

//! Scene → training examples: anchors, ego-frame trajectories, rasters, candidates
//! and ground-truth intent labels.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Pose, RasterSpec};
use crate::intent::{detect_candidates, CandidateSet, IntentExample, IntentLabel};
use crate::map::ParkingMap;
use crate::raster::{rasterize, ColorMap, RenderConfig, SemanticImage};
use crate::scene::{AgentIdx, AgentKind, FrameIdx, InstanceIdx, Scene};
use crate::traj::{State, TrajExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Seconds between samples.
    pub dt: f64,
    pub n_hist: usize,
    pub n_tail: usize,
    pub n_pred: usize,
    /// Agents whose speed never exceeds this (m/s) are dropped.
    pub min_speed: f64,
    /// Also drop anchors where the agent stays below `min_speed` over the whole window.
    pub skip_stationary: bool,
    pub kinds: Vec<AgentKind>,
    /// Training fraction of the split.
    pub split: f64,
    pub seed: u64,
    /// Frames between consecutive anchors of one agent.
    pub anchor_stride: usize,
    /// Labeling horizon, seconds.
    pub lookahead: f64,
    /// Minimum stay inside a spot to count as parking, seconds.
    pub park_dwell: f64,
    pub raster: RasterSpec,
    pub colors: ColorMap,
    pub lane_width: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            dt: 0.4,
            n_hist: 10,
            n_tail: 10,
            n_pred: 10,
            min_speed: 0.5,
            skip_stationary: true,
            kinds: vec![AgentKind::Car],
            split: 0.9,
            seed: 0,
            anchor_stride: 25,
            lookahead: 20.0,
            park_dwell: 2.0,
            raster: RasterSpec::default(),
            colors: ColorMap::default(),
            lane_width: 6.0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_hist == 0 || self.n_pred == 0 || !(self.dt > 0.0) || self.anchor_stride == 0 {
            return Err(Error::InvalidConfig("horizons, dt and anchor stride must be positive".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidConfig(format!("split {} outside (0, 1)", self.split)));
        }
        if !(self.lookahead > 0.0 && self.park_dwell >= 0.0) {
            return Err(Error::InvalidConfig("lookahead must be positive and dwell non-negative".into()));
        }
        Ok(())
    }

    pub fn render_config(&self, scene: &Scene) -> RenderConfig {
        RenderConfig { spec: self.raster, colors: self.colors, n_tail: self.n_tail, stride_frames: scene.stride_for(self.dt), lane_width: self.lane_width }
    }
}

/// One anchor of one agent, in both model formats.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub scene: String,
    pub agent: String,
    /// Anchor frame index.
    pub frame: usize,
    /// Frame index of each history image.
    pub image_frames: Vec<usize>,
    pub intent: IntentExample,
    pub traj: TrajExample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub agents_used: usize,
    pub agents_filtered: usize,
    pub anchors: usize,
    pub examples: usize,
    pub short_history: usize,
    pub short_future: usize,
    pub stationary: usize,
    pub no_candidates: usize,
    pub unlabeled: usize,
}

impl ExtractionStats {
    pub fn merge(&mut self, o: &ExtractionStats) {
        self.agents_used += o.agents_used;
        self.agents_filtered += o.agents_filtered;
        self.anchors += o.anchors;
        self.examples += o.examples;
        self.short_history += o.short_history;
        self.short_future += o.short_future;
        self.stationary += o.stationary;
        self.no_candidates += o.no_candidates;
        self.unlabeled += o.unlabeled;
    }
}

/// Why no label could be assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unlabeled {
    /// The agent neither parked nor left the window within the lookahead.
    Undecided,
    /// It left the window but no lane candidate exists.
    NoLane,
}

/// Ground-truth intent of `agent` at `anchor`.
///
/// Parking wins: the first unoccupied spot whose interior holds the box center for at
/// least `park_dwell` seconds, starting within `lookahead` seconds. If that spot is among
/// the candidates it is the label. Otherwise the label is the lane candidate closest to
/// the pose where the agent first leaves the sensing window.
pub fn label_intent(
    scene: &Scene,
    map: &ParkingMap,
    agent: AgentIdx,
    anchor: FrameIdx,
    candidates: &CandidateSet,
    cfg: &ExtractionConfig,
) -> Result<std::result::Result<IntentLabel, Unlabeled>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let start = scene.instance_at(agent, anchor).ok_or_else(|| Error::NotVisible { agent: scene.agent(agent).id.clone(), frame: anchor.0 })?;
    let ego = scene.instance(start).pose();
    let occupied = map.occupancy_at(scene, anchor, Some(agent));
    let fps = scene.frame_rate;
    let horizon = anchor.0 + (cfg.lookahead * fps).round() as usize;
    let dwell = (cfg.park_dwell * fps).round() as usize;
    let limit = cfg.raster.sensing_limit();

    let track: Vec<InstanceIdx> = scene.track(agent).skip_while(|&i| i != start).collect();
    let spot_at = |i: InstanceIdx| {
        let inst = scene.instance(i);
        let p = Point::new(inst.x, inst.y);
        map.spots.iter().enumerate().position(|(k, s)| !occupied[k] && s.contains(p))
    };

    let mut exit: Option<Point> = None;
    let mut k = 0;
    while k < track.len() {
        let inst = scene.instance(track[k]);
        if inst.frame.0 > horizon {
            break;
        }
        if let Some(s) = spot_at(track[k]) {
            // Contiguous stay in the same spot.
            let mut j = k;
            while j + 1 < track.len() && spot_at(track[j + 1]) == Some(s) && scene.instance(track[j + 1]).frame.0 == scene.instance(track[j]).frame.0 + 1 {
                j += 1;
            }
            if scene.instance(track[j]).frame.0 - inst.frame.0 >= dwell {
                if let Some(idx) = candidates.spots.iter().position(|c| c.map_index == s) {
                    return Ok(Ok(IntentLabel::Spot(idx)));
                }
                break;
            }
            k = j + 1;
            continue;
        }
        if exit.is_none() {
            let local = ego.point_to_local(Point::new(inst.x, inst.y));
            if local.x.abs() > limit || local.y.abs() > limit {
                exit = Some(local);
            }
        }
        k += 1;
    }
    let exit = match exit {
        Some(e) => e,
        None => {
            // A park outside the window implies an exit somewhere on the track.
            let far = track.iter().map(|&i| scene.instance(i)).take_while(|i| i.frame.0 <= horizon).find_map(|i| {
                let l = ego.point_to_local(Point::new(i.x, i.y));
                (l.x.abs() > limit || l.y.abs() > limit).then_some(l)
            });
            match far {
                Some(e) => e,
                None => return Ok(Err(Unlabeled::Undecided)),
            }
        }
    };
    let nearest = candidates.lanes.iter().enumerate().min_by(|a, b| a.1.eta.distance(&exit).total_cmp(&b.1.eta.distance(&exit)));
    Ok(match nearest {
        Some((j, _)) => Ok(IntentLabel::Lane(j)),
        None => Err(Unlabeled::NoLane),
    })
}

fn local_state(ego: &Pose, p: &Pose) -> State {
    ego.to_local(p).as_array()
}

/// All examples of one scene, sorted by `(agent, frame)`.
pub fn extract_examples(scene: &Scene, map: &ParkingMap, cfg: &ExtractionConfig) -> Result<(Vec<Example>, ExtractionStats)> {
    cfg.validate()?;
    map.validate()?;
    let agents: Vec<AgentIdx> = (0..scene.agents().len()).map(AgentIdx).collect();
    let results = std::thread::scope(|s| {
        let handles: Vec<_> = agents.iter().map(|&a| s.spawn(move || extract_agent(scene, map, a, cfg))).collect();
        handles.into_iter().map(|h| h.join().expect("extraction worker panicked")).collect::<Result<Vec<_>>>()
    })?;
    let mut examples = Vec::new();
    let mut stats = ExtractionStats::default();
    for (ex, st) in results {
        examples.extend(ex);
        stats.merge(&st);
    }
    Ok((examples, stats))
}

fn extract_agent(scene: &Scene, map: &ParkingMap, agent: AgentIdx, cfg: &ExtractionConfig) -> Result<(Vec<Example>, ExtractionStats)> {
    let mut stats = ExtractionStats::default();
    let info = scene.agent(agent);
    let track: Vec<InstanceIdx> = scene.track(agent).collect();
    let moving = track.iter().any(|&i| scene.instance(i).speed.abs() > cfg.min_speed);
    if !cfg.kinds.contains(&info.kind) || !moving {
        stats.agents_filtered = 1;
        return Ok((Vec::new(), stats));
    }
    stats.agents_used = 1;
    let stride = scene.stride_for(cfg.dt);
    let render = cfg.render_config(scene);
    let mut cache: HashMap<InstanceIdx, SemanticImage> = HashMap::new();
    let mut out = Vec::new();

    for &anchor in track.iter().step_by(cfg.anchor_stride) {
        stats.anchors += 1;
        let frame = scene.instance(anchor).frame;
        let Ok(hist) = scene.history(agent, frame, cfg.n_hist + cfg.n_tail, stride) else {
            stats.short_history += 1;
            continue;
        };
        let Ok(fut) = scene.future(agent, frame, cfg.n_pred, stride) else {
            stats.short_future += 1;
            continue;
        };
        let hist = &hist[cfg.n_tail..];
        if cfg.skip_stationary && hist.iter().chain(&fut).all(|&i| scene.instance(i).speed.abs() <= cfg.min_speed) {
            stats.stationary += 1;
            continue;
        }
        let candidates = anchor_candidates(scene, map, agent, frame, cfg);
        if candidates.is_empty() {
            stats.no_candidates += 1;
            continue;
        }
        let label = match label_intent(scene, map, agent, frame, &candidates, cfg)? {
            Ok(l) => l,
            Err(_) => {
                stats.unlabeled += 1;
                continue;
            }
        };
        let mut images = Vec::with_capacity(hist.len());
        for &i in hist {
            if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(i) {
                e.insert(rasterize(scene, map, i, &render)?);
            }
            images.push(cache[&i].clone());
        }
        let ego = scene.instance(anchor).pose();
        let eta = candidates.get(label.combined(&candidates)).expect("label within candidates").eta;
        let traj = TrajExample {
            history: local_states(scene, &ego, hist),
            images,
            intent: [eta.x, eta.y],
            future: local_states(scene, &ego, &fut),
        };
        let image = traj.images.last().expect("n_hist ≥ 1").clone();
        out.push(Example {
            scene: scene.id.clone(),
            agent: info.id.clone(),
            frame: frame.0,
            image_frames: hist.iter().map(|&i| scene.instance(i).frame.0).collect(),
            intent: IntentExample::new(image, candidates, label)?,
            traj,
        });
        stats.examples += 1;
    }
    Ok((out, stats))
}

fn anchor_candidates(scene: &Scene, map: &ParkingMap, agent: AgentIdx, frame: FrameIdx, cfg: &ExtractionConfig) -> CandidateSet {
    let ego = scene.instance(scene.instance_at(agent, frame).expect("agent present at frame")).pose();
    let occ = map.occupancy_at(scene, frame, Some(agent));
    detect_candidates(&map.with_occupancy(&occ), &ego, cfg.raster.sensing_limit())
}

fn local_states(scene: &Scene, ego: &Pose, track: &[InstanceIdx]) -> Vec<State> {
    track.iter().map(|&i| local_state(ego, &scene.instance(i).pose())).collect()
}

/// Model inputs for one agent at one frame, without a label.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorInputs {
    pub images: Vec<SemanticImage>,
    pub history: Vec<State>,
    pub candidates: CandidateSet,
    /// Ground-truth future when the track is long enough.
    pub future: Option<Vec<State>>,
}

/// Builds the model inputs of `agent` at `frame`; fails when the history is too short.
pub fn anchor_inputs(scene: &Scene, map: &ParkingMap, agent: AgentIdx, frame: FrameIdx, cfg: &ExtractionConfig) -> Result<AnchorInputs> {
    cfg.validate()?;
    let stride = scene.stride_for(cfg.dt);
    let anchor = scene
        .instance_at(agent, frame)
        .ok_or_else(|| Error::InvalidInput(format!("agent '{}' is not present at frame {}", scene.agent(agent).id, frame.0)))?;
    let hist = scene.history(agent, frame, cfg.n_hist + cfg.n_tail, stride)?;
    let hist = &hist[cfg.n_tail..];
    let render = cfg.render_config(scene);
    let ego = scene.instance(anchor).pose();
    Ok(AnchorInputs {
        images: hist.iter().map(|&i| rasterize(scene, map, i, &render)).collect::<Result<Vec<_>>>()?,
        history: local_states(scene, &ego, hist),
        candidates: anchor_candidates(scene, map, agent, frame, cfg),
        future: scene.future(agent, frame, cfg.n_pred, stride).ok().map(|f| local_states(scene, &ego, &f)),
    })
}

/// Disjoint train/validation partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize) {
        (self.train.len(), self.val.len())
    }
}

/// Shuffles with `seed` and puts the first `round(ratio·n)` examples (at least one, and
/// at most `n − 1` when `n ≥ 2`) into the training set.
pub fn split_dataset(mut examples: Vec<Example>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
    let n = examples.len();
    let n_train = if n < 2 { n } else { ((ratio * n as f64).round() as usize).clamp(1, n - 1) };
    let val = examples.split_off(n_train);
    Ok(DatasetSplit { train: examples, val })
}

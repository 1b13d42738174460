//! Graph-structured parking recordings: scenes own frames, agents, instances and
//! static obstacles, cross-linked by index.
//!
//! On disk a scene is a single JSON document (see [`SceneDocument`]) with string ids;
//! in memory every reference is resolved to a typed index once at load time so that
//! traversal never touches a hash map.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{convex_intersects_square, wrap_angle, OrientedBox, Pose};

macro_rules! index_type {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(pub usize);
    };
}

index_type!(FrameIdx);
index_type!(AgentIdx);
index_type!(InstanceIdx);
index_type!(ObstacleIdx);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Car,
    #[serde(other)]
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: String,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub first_instance: InstanceIdx,
    pub last_instance: InstanceIdx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub agent: AgentIdx,
    pub frame: FrameIdx,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    pub prev: Option<InstanceIdx>,
    pub next: Option<InstanceIdx>,
}

impl Instance {
    pub fn pose(&self) -> Pose {
        Pose { x: self.x, y: self.y, psi: self.heading }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub timestamp: f64,
    pub instances: Vec<InstanceIdx>,
    pub prev: Option<FrameIdx>,
    pub next: Option<FrameIdx>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Obstacle {
    pub fn footprint(&self) -> OrientedBox {
        OrientedBox { center: Pose { x: self.x, y: self.y, psi: self.heading }, length: self.length, width: self.width }
    }
}

/// Entity returned by a neighborhood query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighbor {
    Instance(InstanceIdx),
    Obstacle(ObstacleIdx),
}

/// A consecutive recording. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub frame_rate: f64,
    frames: Vec<Frame>,
    agents: Vec<Agent>,
    instances: Vec<Instance>,
    obstacles: Vec<Obstacle>,
    by_agent_frame: HashMap<(AgentIdx, FrameIdx), InstanceIdx>,
    agent_ids: HashMap<String, AgentIdx>,
    frame_ids: HashMap<String, FrameIdx>,
}

// ---------------------------------------------------------------------------
// On-disk schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneHeader {
    pub id: String,
    pub frame_rate_hz: f64,
    pub frame_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub timestamp_s: f64,
    pub prev: Option<String>,
    pub next: Option<String>,
    pub instance_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: String,
    pub kind: AgentKind,
    pub length_m: f64,
    pub width_m: f64,
    pub first_instance: String,
    pub last_instance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub agent_id: String,
    pub frame_id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
    pub speed_mps: f64,
    pub accel_mps2: f64,
    pub prev: Option<String>,
    pub next: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleRecord {
    pub id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
    pub length_m: f64,
    pub width_m: f64,
}

/// One JSON document per scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDocument {
    pub scene: SceneHeader,
    #[serde(default)]
    pub frames: Vec<FrameRecord>,
    #[serde(default)]
    pub agents: Vec<AgentRecord>,
    #[serde(default)]
    pub instances: Vec<InstanceRecord>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleRecord>,
}

/// Reads and validates a scene document.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let text = fs::read_to_string(path)?;
    let doc: SceneDocument = serde_json::from_str(&text)?;
    Scene::from_document(doc)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string(&scene.to_document())?;
    fs::write(path, text)?;
    Ok(())
}

fn index_of<I: Copy>(
    map: &HashMap<String, I>,
    kind: &'static str,
    id: &str,
    from: impl FnOnce() -> String,
) -> Result<I> {
    map.get(id)
        .copied()
        .ok_or_else(|| Error::DanglingReference { kind, id: id.to_string(), from: from() })
}

fn unique_ids<'a>(kind: &'static str, ids: impl Iterator<Item = &'a str>) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::new();
    for (i, id) in ids.enumerate() {
        if map.insert(id.to_string(), i).is_some() {
            return Err(Error::InvalidScene(format!("duplicate {kind} id '{id}'")));
        }
    }
    Ok(map)
}

impl Scene {
    pub fn from_document(doc: SceneDocument) -> Result<Scene> {
        if !(doc.scene.frame_rate_hz > 0.0) {
            return Err(Error::InvalidScene(format!("frame rate must be positive, got {}", doc.scene.frame_rate_hz)));
        }
        let record_pos = unique_ids("frame", doc.frames.iter().map(|f| f.id.as_str()))?;
        let agent_ids = unique_ids("agent", doc.agents.iter().map(|a| a.id.as_str()))?;
        let instance_ids = unique_ids("instance", doc.instances.iter().map(|i| i.id.as_str()))?;
        unique_ids("obstacle", doc.obstacles.iter().map(|o| o.id.as_str()))?;

        // Frames are stored in header order; FrameIdx is the position in that order.
        if doc.scene.frame_ids.len() != doc.frames.len() {
            return Err(Error::InvalidScene(format!(
                "header lists {} frames but document has {}",
                doc.scene.frame_ids.len(),
                doc.frames.len()
            )));
        }
        let mut frame_ids = HashMap::new();
        for (i, id) in doc.scene.frame_ids.iter().enumerate() {
            if !record_pos.contains_key(id) {
                return Err(Error::DanglingReference { kind: "frame", id: id.clone(), from: "scene header".into() });
            }
            if frame_ids.insert(id.clone(), FrameIdx(i)).is_some() {
                return Err(Error::InvalidScene(format!("frame '{id}' listed twice in header")));
            }
        }
        let agent_idx: HashMap<String, AgentIdx> = agent_ids.into_iter().map(|(k, v)| (k, AgentIdx(v))).collect();
        let inst_idx: HashMap<String, InstanceIdx> =
            instance_ids.into_iter().map(|(k, v)| (k, InstanceIdx(v))).collect();

        fn link<I: Copy>(map: &HashMap<String, I>, kind: &'static str, id: &Option<String>, from: &str) -> Result<Option<I>> {
            match id {
                None => Ok(None),
                Some(s) => index_of(map, kind, s, || from.to_string()).map(Some),
            }
        }

        let mut frames = Vec::with_capacity(doc.frames.len());
        for id in &doc.scene.frame_ids {
            let rec = &doc.frames[record_pos[id]];
            let from = format!("frame '{}'", rec.id);
            let instances = rec
                .instance_ids
                .iter()
                .map(|i| index_of(&inst_idx, "instance", i, || from.clone()))
                .collect::<Result<Vec<_>>>()?;
            frames.push(Frame {
                id: rec.id.clone(),
                timestamp: rec.timestamp_s,
                instances,
                prev: link(&frame_ids, "frame", &rec.prev, &from)?,
                next: link(&frame_ids, "frame", &rec.next, &from)?,
            });
        }

        let mut agents = Vec::with_capacity(doc.agents.len());
        for rec in &doc.agents {
            let from = format!("agent '{}'", rec.id);
            if !(rec.length_m > 0.0 && rec.width_m > 0.0) {
                return Err(Error::InvalidScene(format!("{from} has non-positive extents")));
            }
            agents.push(Agent {
                id: rec.id.clone(),
                kind: rec.kind,
                length: rec.length_m,
                width: rec.width_m,
                first_instance: index_of(&inst_idx, "instance", &rec.first_instance, || from.clone())?,
                last_instance: index_of(&inst_idx, "instance", &rec.last_instance, || from.clone())?,
            });
        }

        let mut instances = Vec::with_capacity(doc.instances.len());
        for rec in &doc.instances {
            let from = format!("instance '{}'", rec.id);
            instances.push(Instance {
                id: rec.id.clone(),
                agent: index_of(&agent_idx, "agent", &rec.agent_id, || from.clone())?,
                frame: index_of(&frame_ids, "frame", &rec.frame_id, || from.clone())?,
                x: rec.x_m,
                y: rec.y_m,
                heading: wrap_angle(rec.heading_rad),
                speed: rec.speed_mps,
                accel: rec.accel_mps2,
                prev: link(&inst_idx, "instance", &rec.prev, &from)?,
                next: link(&inst_idx, "instance", &rec.next, &from)?,
            });
        }

        let obstacles = doc
            .obstacles
            .iter()
            .map(|rec| {
                if !(rec.length_m > 0.0 && rec.width_m > 0.0) {
                    return Err(Error::InvalidScene(format!("obstacle '{}' has non-positive extents", rec.id)));
                }
                Ok(Obstacle {
                    id: rec.id.clone(),
                    x: rec.x_m,
                    y: rec.y_m,
                    heading: wrap_angle(rec.heading_rad),
                    length: rec.length_m,
                    width: rec.width_m,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut by_agent_frame = HashMap::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            if by_agent_frame.insert((inst.agent, inst.frame), InstanceIdx(i)).is_some() {
                return Err(Error::InvalidScene(format!(
                    "agent '{}' has two instances in frame '{}'",
                    agents[inst.agent.0].id, frames[inst.frame.0].id
                )));
            }
        }

        let scene = Scene {
            id: doc.scene.id,
            frame_rate: doc.scene.frame_rate_hz,
            frames,
            agents,
            instances,
            obstacles,
            by_agent_frame,
            agent_ids: agent_idx,
            frame_ids,
        };
        scene.validate()?;
        Ok(scene)
    }

    fn validate(&self) -> Result<()> {
        // Frame chain follows header order, links are mutual, timestamps strictly increase.
        let n = self.frames.len();
        for (i, f) in self.frames.iter().enumerate() {
            let want_prev = (i > 0).then(|| FrameIdx(i - 1));
            let want_next = (i + 1 < n).then(|| FrameIdx(i + 1));
            if f.prev != want_prev || f.next != want_next {
                return Err(Error::InconsistentLinks(format!(
                    "frame '{}' links do not match the header order",
                    f.id
                )));
            }
            if i > 0 && !(f.timestamp > self.frames[i - 1].timestamp) {
                return Err(Error::NonMonotoneTimestamps(format!(
                    "frame '{}' at {} s follows '{}' at {} s",
                    f.id,
                    f.timestamp,
                    self.frames[i - 1].id,
                    self.frames[i - 1].timestamp
                )));
            }
            for &ii in &f.instances {
                if self.instances[ii.0].frame != FrameIdx(i) {
                    return Err(Error::InconsistentLinks(format!(
                        "frame '{}' lists instance '{}' belonging to another frame",
                        f.id, self.instances[ii.0].id
                    )));
                }
            }
        }
        let listed: HashSet<InstanceIdx> = self.frames.iter().flat_map(|f| f.instances.iter().copied()).collect();

        for (i, inst) in self.instances.iter().enumerate() {
            let me = InstanceIdx(i);
            if !listed.contains(&me) {
                return Err(Error::InconsistentLinks(format!("instance '{}' missing from its frame", inst.id)));
            }
            if let Some(nx) = inst.next {
                let other = &self.instances[nx.0];
                if other.prev != Some(me) || other.agent != inst.agent {
                    return Err(Error::InconsistentLinks(format!("instance '{}' next link not mirrored", inst.id)));
                }
                if !(self.frames[other.frame.0].timestamp > self.frames[inst.frame.0].timestamp) {
                    return Err(Error::NonMonotoneTimestamps(format!(
                        "instance '{}' is followed by '{}' at a non-later time",
                        inst.id, other.id
                    )));
                }
            }
            if let Some(pv) = inst.prev {
                let other = &self.instances[pv.0];
                if other.next != Some(me) {
                    return Err(Error::InconsistentLinks(format!("instance '{}' prev link not mirrored", inst.id)));
                }
            }
        }

        let mut per_agent = vec![0usize; self.agents.len()];
        for inst in &self.instances {
            per_agent[inst.agent.0] += 1;
        }
        for (a, agent) in self.agents.iter().enumerate() {
            let first = &self.instances[agent.first_instance.0];
            let last = &self.instances[agent.last_instance.0];
            if first.agent != AgentIdx(a) || last.agent != AgentIdx(a) || first.prev.is_some() || last.next.is_some() {
                return Err(Error::InconsistentLinks(format!("agent '{}' has invalid chain endpoints", agent.id)));
            }
            let mut count = 1;
            let mut cur = agent.first_instance;
            while let Some(nx) = self.instances[cur.0].next {
                cur = nx;
                count += 1;
                if count > per_agent[a] {
                    return Err(Error::InconsistentLinks(format!("agent '{}' chain has a cycle", agent.id)));
                }
            }
            if cur != agent.last_instance || count != per_agent[a] {
                return Err(Error::InconsistentLinks(format!(
                    "agent '{}' chain covers {count} of {} instances",
                    agent.id, per_agent[a]
                )));
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> SceneDocument {
        let fid = |f: FrameIdx| self.frames[f.0].id.clone();
        let iid = |i: InstanceIdx| self.instances[i.0].id.clone();
        SceneDocument {
            scene: SceneHeader {
                id: self.id.clone(),
                frame_rate_hz: self.frame_rate,
                frame_ids: self.frames.iter().map(|f| f.id.clone()).collect(),
            },
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord {
                    id: f.id.clone(),
                    timestamp_s: f.timestamp,
                    prev: f.prev.map(fid),
                    next: f.next.map(fid),
                    instance_ids: f.instances.iter().map(|&i| iid(i)).collect(),
                })
                .collect(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentRecord {
                    id: a.id.clone(),
                    kind: a.kind,
                    length_m: a.length,
                    width_m: a.width,
                    first_instance: iid(a.first_instance),
                    last_instance: iid(a.last_instance),
                })
                .collect(),
            instances: self
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    id: i.id.clone(),
                    agent_id: self.agents[i.agent.0].id.clone(),
                    frame_id: fid(i.frame),
                    x_m: i.x,
                    y_m: i.y,
                    heading_rad: i.heading,
                    speed_mps: i.speed,
                    accel_mps2: i.accel,
                    prev: i.prev.map(iid),
                    next: i.next.map(iid),
                })
                .collect(),
            obstacles: self
                .obstacles
                .iter()
                .map(|o| ObstacleRecord {
                    id: o.id.clone(),
                    x_m: o.x,
                    y_m: o.y,
                    heading_rad: o.heading,
                    length_m: o.length,
                    width_m: o.width,
                })
                .collect(),
        }
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn frame(&self, f: FrameIdx) -> &Frame {
        &self.frames[f.0]
    }

    pub fn agent(&self, a: AgentIdx) -> &Agent {
        &self.agents[a.0]
    }

    pub fn instance(&self, i: InstanceIdx) -> &Instance {
        &self.instances[i.0]
    }

    pub fn obstacle(&self, o: ObstacleIdx) -> &Obstacle {
        &self.obstacles[o.0]
    }

    pub fn agent_by_id(&self, id: &str) -> Result<AgentIdx> {
        self.agent_ids.get(id).copied().ok_or_else(|| Error::UnknownId { kind: "agent", id: id.into() })
    }

    pub fn frame_by_id(&self, id: &str) -> Result<FrameIdx> {
        self.frame_ids.get(id).copied().ok_or_else(|| Error::UnknownId { kind: "frame", id: id.into() })
    }

    pub fn instance_at(&self, agent: AgentIdx, frame: FrameIdx) -> Option<InstanceIdx> {
        self.by_agent_frame.get(&(agent, frame)).copied()
    }

    /// Footprint of an agent at one of its instances.
    pub fn footprint(&self, i: InstanceIdx) -> OrientedBox {
        let inst = &self.instances[i.0];
        let agent = &self.agents[inst.agent.0];
        OrientedBox { center: inst.pose(), length: agent.length, width: agent.width }
    }

    /// Number of frames between samples spaced `dt` seconds apart.
    pub fn stride_for(&self, dt: f64) -> usize {
        ((dt * self.frame_rate).round() as usize).max(1)
    }

    /// Iterator over an agent's instances in temporal order.
    pub fn track(&self, agent: AgentIdx) -> impl Iterator<Item = InstanceIdx> + '_ {
        let mut cur = Some(self.agents[agent.0].first_instance);
        std::iter::from_fn(move || {
            let here = cur?;
            cur = self.instances[here.0].next;
            Some(here)
        })
    }

    fn anchor(&self, agent: AgentIdx, at: FrameIdx) -> Result<InstanceIdx> {
        self.instance_at(agent, at)
            .ok_or_else(|| Error::NotVisible { agent: self.agents[agent.0].id.clone(), frame: at.0 })
    }

    /// Walks `steps` links (backward or forward) and checks that the walk landed on
    /// the expected frame, i.e. the track has no gaps along the way.
    fn walk(&self, from: InstanceIdx, steps: usize, backward: bool) -> Option<InstanceIdx> {
        let mut cur = from;
        for _ in 0..steps {
            let inst = &self.instances[cur.0];
            cur = if backward { inst.prev? } else { inst.next? };
        }
        let f0 = self.instances[from.0].frame.0;
        let f1 = self.instances[cur.0].frame.0;
        let expected = if backward { f0.checked_sub(steps)? } else { f0 + steps };
        (f1 == expected).then_some(cur)
    }

    /// `count` samples ending at `at`, spaced `stride` frames apart, oldest first.
    pub fn history(&self, agent: AgentIdx, at: FrameIdx, count: usize, stride: usize) -> Result<Vec<InstanceIdx>> {
        if count == 0 || stride == 0 {
            return Err(Error::InvalidInput("history needs count >= 1 and stride >= 1".into()));
        }
        let mut out = vec![self.anchor(agent, at)?];
        while out.len() < count {
            match self.walk(*out.last().unwrap(), stride, true) {
                Some(i) => out.push(i),
                None => return Err(Error::InsufficientHistory { needed: count, found: out.len() }),
            }
        }
        out.reverse();
        Ok(out)
    }

    /// `count` samples strictly after `at`, spaced `stride` frames apart, earliest first.
    pub fn future(&self, agent: AgentIdx, at: FrameIdx, count: usize, stride: usize) -> Result<Vec<InstanceIdx>> {
        if stride == 0 {
            return Err(Error::InvalidInput("future needs stride >= 1".into()));
        }
        let mut cur = self.anchor(agent, at)?;
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            match self.walk(cur, stride, false) {
                Some(i) => {
                    out.push(i);
                    cur = i;
                }
                None => return Err(Error::InsufficientFuture { needed: count, found: out.len() }),
            }
        }
        Ok(out)
    }

    /// Instances and obstacles whose footprint touches the square window of half-width
    /// `radius` centered on `center` and aligned with its heading.
    pub fn neighbors(&self, frame: FrameIdx, center: &Pose, radius: f64, exclude: Option<AgentIdx>) -> Vec<Neighbor> {
        let reach = radius * std::f64::consts::SQRT_2;
        let touches = |b: &OrientedBox| {
            let d = (b.center.x - center.x).hypot(b.center.y - center.y);
            if d > reach + b.bounding_radius() {
                return false;
            }
            convex_intersects_square(&b.to_local(center).corners(), radius)
        };
        let mut out = Vec::new();
        for &i in &self.frames[frame.0].instances {
            if Some(self.instances[i.0].agent) == exclude {
                continue;
            }
            if touches(&self.footprint(i)) {
                out.push(Neighbor::Instance(i));
            }
        }
        for (o, obs) in self.obstacles.iter().enumerate() {
            if touches(&obs.footprint()) {
                out.push(Neighbor::Obstacle(ObstacleIdx(o)));
            }
        }
        out
    }
}

/// Incremental construction of a scene in memory (used by the synthetic generator and tests).
#[derive(Debug, Default)]
pub struct SceneBuilder {
    id: String,
    frame_rate: f64,
    timestamps: Vec<f64>,
    agents: Vec<(AgentRecord, Vec<(usize, [f64; 5])>)>,
    obstacles: Vec<ObstacleRecord>,
}

/// Kinematic sample handed to [`SceneBuilder::add_agent`]: `(frame, [x, y, heading, speed, accel])`.
pub type TrackSample = (usize, [f64; 5]);

impl SceneBuilder {
    pub fn new(id: impl Into<String>, frame_rate: f64, n_frames: usize) -> Self {
        Self {
            id: id.into(),
            frame_rate,
            timestamps: (0..n_frames).map(|i| i as f64 / frame_rate).collect(),
            ..Default::default()
        }
    }

    /// Adds an agent whose samples are `(frame ordinal, state)`, strictly increasing in frame.
    pub fn add_agent(&mut self, id: impl Into<String>, kind: AgentKind, length: f64, width: f64, track: Vec<TrackSample>) {
        let id = id.into();
        let record = AgentRecord {
            id: id.clone(),
            kind,
            length_m: length,
            width_m: width,
            first_instance: String::new(),
            last_instance: String::new(),
        };
        self.agents.push((record, track));
    }

    pub fn add_obstacle(&mut self, id: impl Into<String>, x: f64, y: f64, heading: f64, length: f64, width: f64) {
        self.obstacles.push(ObstacleRecord { id: id.into(), x_m: x, y_m: y, heading_rad: heading, length_m: length, width_m: width });
    }

    pub fn document(&self) -> SceneDocument {
        let frame_id = |f: usize| format!("f{f}");
        let mut frames: Vec<FrameRecord> = self
            .timestamps
            .iter()
            .enumerate()
            .map(|(i, &t)| FrameRecord {
                id: frame_id(i),
                timestamp_s: t,
                prev: (i > 0).then(|| frame_id(i - 1)),
                next: (i + 1 < self.timestamps.len()).then(|| frame_id(i + 1)),
                instance_ids: Vec::new(),
            })
            .collect();
        let mut agents = Vec::new();
        let mut instances = Vec::new();
        for (rec, track) in &self.agents {
            if track.is_empty() {
                continue;
            }
            let inst_id = |k: usize| format!("{}-{}", rec.id, track[k].0);
            for (k, &(f, s)) in track.iter().enumerate() {
                frames[f].instance_ids.push(inst_id(k));
                instances.push(InstanceRecord {
                    id: inst_id(k),
                    agent_id: rec.id.clone(),
                    frame_id: frame_id(f),
                    x_m: s[0],
                    y_m: s[1],
                    heading_rad: wrap_angle(s[2]),
                    speed_mps: s[3],
                    accel_mps2: s[4],
                    prev: (k > 0).then(|| inst_id(k - 1)),
                    next: (k + 1 < track.len()).then(|| inst_id(k + 1)),
                });
            }
            agents.push(AgentRecord { first_instance: inst_id(0), last_instance: inst_id(track.len() - 1), ..rec.clone() });
        }
        SceneDocument {
            scene: SceneHeader {
                id: self.id.clone(),
                frame_rate_hz: self.frame_rate,
                frame_ids: (0..self.timestamps.len()).map(frame_id).collect(),
            },
            frames,
            agents,
            instances,
            obstacles: self.obstacles.clone(),
        }
    }

    pub fn build(&self) -> Result<Scene> {
        Scene::from_document(self.document())
    }
}

pub mod dlp {
    //! Adapter for the token-keyed JSON layout of the official parking-lot release
    //! (`<stem>_scene.json`, `_frames.json`, `_agents.json`, `_instances.json`,
    //! `_obstacles.json`). Converted into a [`SceneDocument`] and validated as usual.

    use std::collections::HashMap;
    use std::fs;
    use std::path::{Path, PathBuf};

    use serde::Deserialize;
    use serde_json::Value;

    use super::*;

    pub const FRAME_RATE_HZ: f64 = 25.0;

    #[derive(Debug, Deserialize)]
    struct RawScene {
        first_frame: String,
        #[serde(default)]
        scene_token: String,
    }

    #[derive(Debug, Deserialize)]
    struct RawFrame {
        frame_token: String,
        timestamp: f64,
        #[serde(default)]
        next: String,
        #[serde(default)]
        prev: String,
        #[serde(default)]
        instances: Vec<String>,
    }

    #[derive(Debug, Deserialize)]
    struct RawAgent {
        agent_token: String,
        #[serde(rename = "type")]
        kind: String,
        size: [f64; 2],
        first_instance: String,
        last_instance: String,
    }

    #[derive(Debug, Deserialize)]
    struct RawInstance {
        instance_token: String,
        agent_token: String,
        frame_token: String,
        coords: [f64; 2],
        heading: f64,
        speed: f64,
        #[serde(default)]
        acceleration: Value,
        #[serde(default)]
        next: String,
        #[serde(default)]
        prev: String,
    }

    #[derive(Debug, Deserialize)]
    struct RawObstacle {
        obstacle_token: String,
        size: [f64; 2],
        coords: [f64; 2],
        heading: f64,
    }

    fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn opt(s: String) -> Option<String> {
        (!s.is_empty()).then_some(s)
    }

    /// Scene stems (e.g. `DJI_0012`) found in `dir`, sorted.
    pub fn scene_stems(dir: &Path) -> Result<Vec<String>> {
        let mut stems: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_scene.json")).map(String::from))
            .collect();
        stems.sort();
        Ok(stems)
    }

    pub fn load_dlp_scene(dir: &Path, stem: &str) -> Result<Scene> {
        let file = |suffix: &str| -> PathBuf { dir.join(format!("{stem}_{suffix}.json")) };
        let raw_scene: RawScene = read(&file("scene"))?;
        let frames: HashMap<String, RawFrame> = read(&file("frames"))?;
        let agents: HashMap<String, RawAgent> = read(&file("agents"))?;
        let instances: HashMap<String, RawInstance> = read(&file("instances"))?;
        let obstacles: HashMap<String, RawObstacle> = read(&file("obstacles")).unwrap_or_default();

        // Header order comes from walking the frame chain.
        let mut frame_ids = Vec::with_capacity(frames.len());
        let mut cur = opt(raw_scene.first_frame);
        while let Some(tok) = cur {
            let f = frames
                .get(&tok)
                .ok_or_else(|| Error::DanglingReference { kind: "frame", id: tok.clone(), from: "scene".into() })?;
            frame_ids.push(tok);
            if frame_ids.len() > frames.len() {
                return Err(Error::InconsistentLinks("frame chain has a cycle".into()));
            }
            cur = opt(f.next.clone());
        }

        let mut agent_records: Vec<AgentRecord> = agents
            .into_values()
            .map(|a| AgentRecord {
                id: a.agent_token,
                kind: if a.kind.eq_ignore_ascii_case("car") { AgentKind::Car } else { AgentKind::Other },
                length_m: a.size[0],
                width_m: a.size[1],
                first_instance: a.first_instance,
                last_instance: a.last_instance,
            })
            .collect();
        agent_records.sort_by(|a, b| a.id.cmp(&b.id));

        let mut instance_records: Vec<InstanceRecord> = instances
            .into_values()
            .map(|i| {
                let accel = match &i.acceleration {
                    Value::Number(n) => n.as_f64().unwrap_or(0.0),
                    Value::Array(v) => v.first().and_then(Value::as_f64).unwrap_or(0.0),
                    _ => 0.0,
                };
                InstanceRecord {
                    id: i.instance_token,
                    agent_id: i.agent_token,
                    frame_id: i.frame_token,
                    x_m: i.coords[0],
                    y_m: i.coords[1],
                    heading_rad: i.heading,
                    speed_mps: i.speed,
                    accel_mps2: accel,
                    prev: opt(i.prev),
                    next: opt(i.next),
                }
            })
            .collect();
        instance_records.sort_by(|a, b| a.id.cmp(&b.id));

        let mut obstacle_records: Vec<ObstacleRecord> = obstacles
            .into_values()
            .map(|o| ObstacleRecord {
                id: o.obstacle_token,
                x_m: o.coords[0],
                y_m: o.coords[1],
                heading_rad: o.heading,
                length_m: o.size[0],
                width_m: o.size[1],
            })
            .collect();
        obstacle_records.sort_by(|a, b| a.id.cmp(&b.id));

        let frame_records = frame_ids
            .iter()
            .map(|tok| {
                let f = &frames[tok];
                FrameRecord {
                    id: f.frame_token.clone(),
                    timestamp_s: f.timestamp,
                    prev: opt(f.prev.clone()),
                    next: opt(f.next.clone()),
                    instance_ids: f.instances.clone(),
                }
            })
            .collect();

        let id = if raw_scene.scene_token.is_empty() { stem.to_string() } else { raw_scene.scene_token };
        Scene::from_document(SceneDocument {
            scene: SceneHeader { id, frame_rate_hz: FRAME_RATE_HZ, frame_ids },
            frames: frame_records,
            agents: agent_records,
            instances: instance_records,
            obstacles: obstacle_records,
        })
    }

    /// Totals over every scene in a directory.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
    pub struct DirectorySummary {
        pub scenes: usize,
        pub frames: usize,
        pub agents: usize,
        pub instances: usize,
        pub obstacles: usize,
    }

    pub fn summarize_dir(dir: &Path) -> Result<DirectorySummary> {
        let mut s = DirectorySummary::default();
        for stem in scene_stems(dir)? {
            let scene = load_dlp_scene(dir, &stem)?;
            s.scenes += 1;
            s.frames += scene.frames().len();
            s.agents += scene.agents().len();
            s.instances += scene.instances().len();
            s.obstacles += scene.obstacles().len();
        }
        Ok(s)
    }
}

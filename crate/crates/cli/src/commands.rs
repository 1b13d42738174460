use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use parkcast_core::ekf::{ekf_prediction, endpoint_intent_distribution, EkfConfig};
use parkcast_core::eval::{evaluate, run_ablation, EkfPredictor, OracleTrajPredictor, Predictor};
use parkcast_core::geometry::RasterSpec;
use parkcast_core::intent::{train_intent as fit_intent, IntentExample, IntentScorer, IntentScorerConfig};
use parkcast_core::map::{load_map, save_map, ParkingMap};
use parkcast_core::nn::OptimizerConfig;
use parkcast_core::pipeline::{anchor_inputs, extract_examples, generate_synthetic, load_dataset, save_dataset, split_dataset, Example, ExtractionConfig, ExtractionStats, SyntheticSpec};
use parkcast_core::plot::trajectory_overlay;
use parkcast_core::raster::{rasterize, RenderConfig};
use parkcast_core::scene::{load_scene, save_scene, FrameIdx, Scene};
use parkcast_core::traj::{train_traj as fit_traj, TrajConfig, TrajExample, TrajPredictor};
use parkcast_core::training::TrainOptions;
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::TrainArgs;

pub const INTENT_CHECKPOINT: &str = "intent.ckpt.json";
pub const TRAJ_CHECKPOINT: &str = "traj.ckpt.json";

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map(read_json).transpose().map(Option::unwrap_or_default)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset_at(dir: &Path) -> Result<Vec<Example>> {
    let ex = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if ex.is_empty() {
        bail!("dataset {} holds no examples", dir.display());
    }
    Ok(ex)
}

fn raster_of(examples: &[Example]) -> RasterSpec {
    *examples[0].intent.image.spec()
}

pub fn gen(spec: Option<&Path>, seed: Option<u64>, agents: Option<usize>, out: &Path) -> Result<()> {
    let mut spec: SyntheticSpec = read_json_or_default(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = agents {
        spec.n_agents = n;
    }
    let (scene, map) = generate_synthetic(&spec)?;
    fs::create_dir_all(out)?;
    save_scene(&scene, out.join("scene.json"))?;
    save_map(&map, out.join("map.json"))?;
    println!("scene '{}': {} frames, {} agents, {} obstacles; map: {} spots, {} lanes", scene.id, scene.frames().len(), scene.agents().len(), scene.obstacles().len(), map.spots.len(), map.lanes.len());
    Ok(())
}

pub fn extract(scenes: &[PathBuf], maps: &[PathBuf], config: Option<&Path>, out: &Path) -> Result<()> {
    if maps.len() != 1 && maps.len() != scenes.len() {
        bail!("give one map for all scenes or one per scene ({} scenes, {} maps)", scenes.len(), maps.len());
    }
    let cfg: ExtractionConfig = read_json_or_default(config)?;
    let mut all = Vec::new();
    let mut stats = ExtractionStats::default();
    for (i, path) in scenes.iter().enumerate() {
        let scene = load_scene(path).with_context(|| format!("loading scene {}", path.display()))?;
        let map_path = &maps[if maps.len() == 1 { 0 } else { i }];
        let map = load_map(map_path).with_context(|| format!("loading map {}", map_path.display()))?;
        let (ex, st) = extract_examples(&scene, &map, &cfg)?;
        stats.merge(&st);
        all.extend(ex);
    }
    let split = split_dataset(all, cfg.split, cfg.seed)?;
    save_dataset(&out.join("train"), &split.train)?;
    save_dataset(&out.join("val"), &split.val)?;
    let (n_train, n_val) = split.counts();
    write_json(&out.join("extraction.json"), &json!({ "config": cfg, "stats": stats, "train": n_train, "val": n_val }))?;
    println!("train: {n_train}");
    println!("val: {n_val}");
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn train_options(a: &TrainArgs) -> TrainOptions {
    TrainOptions {
        max_epochs: a.epochs,
        batch_size: a.batch_size,
        patience: a.patience,
        clip_norm: a.clip_norm,
        lr_decay: a.lr_decay,
        seed: a.seed,
        ..Default::default()
    }
}

fn load_pair(a: &TrainArgs) -> Result<(Vec<Example>, Vec<Example>)> {
    let train = load_dataset_at(&a.data)?;
    let val = match &a.val {
        Some(v) => load_dataset(v).with_context(|| format!("loading dataset {}", v.display()))?,
        None => Vec::new(),
    };
    Ok((train, val))
}

pub fn train_intent(a: &TrainArgs) -> Result<()> {
    let (train, val) = load_pair(a)?;
    let mut cfg: IntentScorerConfig = read_json_or_default(a.config.as_deref())?;
    cfg.raster = raster_of(&train);
    if let Some(lr) = a.lr {
        cfg.optimizer = cfg.optimizer.with_lr(lr);
    }
    let train: Vec<IntentExample> = train.into_iter().map(|e| e.intent).collect();
    let val: Vec<IntentExample> = val.into_iter().map(|e| e.intent).collect();
    let (model, report) = fit_intent(&train, &val, cfg, &train_options(a))?;
    fs::create_dir_all(&a.out.out)?;
    model.save(&a.out.out.join(INTENT_CHECKPOINT))?;
    report.write_csv(&a.out.out.join("intent_train.csv"))?;
    println!("epochs: {}, best epoch: {}, final train loss: {:.6}", report.epochs.len(), report.best_epoch, report.final_train_loss().unwrap_or(f64::NAN));
    Ok(())
}

pub fn train_traj(a: &TrainArgs, no_image: bool, no_intent: bool, dropout: Option<f64>, adam: bool) -> Result<()> {
    let (train, val) = load_pair(a)?;
    let mut cfg: TrajConfig = read_json_or_default(a.config.as_deref())?;
    cfg.raster = raster_of(&train);
    cfg.use_image &= !no_image;
    cfg.use_intent &= !no_intent;
    if let Some(d) = dropout {
        cfg.dropout = d;
    }
    if adam {
        cfg.optimizer = OptimizerConfig::adam(cfg.optimizer.lr());
    }
    if let Some(lr) = a.lr {
        cfg.optimizer = cfg.optimizer.with_lr(lr);
    }
    let train: Vec<TrajExample> = train.into_iter().map(|e| e.traj).collect();
    let val: Vec<TrajExample> = val.into_iter().map(|e| e.traj).collect();
    let (model, report) = fit_traj(&train, &val, cfg, &train_options(a))?;
    fs::create_dir_all(&a.out.out)?;
    model.save(&a.out.out.join(TRAJ_CHECKPOINT))?;
    report.write_csv(&a.out.out.join("traj_train.csv"))?;
    println!("epochs: {}, best epoch: {}, final train loss: {:.6}", report.epochs.len(), report.best_epoch, report.final_train_loss().unwrap_or(f64::NAN));
    Ok(())
}

fn load_scene_map(scene: &Path, map: &Path) -> Result<(Scene, ParkingMap)> {
    let s = load_scene(scene).with_context(|| format!("loading scene {}", scene.display()))?;
    let m = load_map(map).with_context(|| format!("loading map {}", map.display()))?;
    Ok((s, m))
}

#[allow(clippy::too_many_arguments)]
pub fn predict(checkpoint: &Path, intent_checkpoint: Option<&Path>, scene: &Path, map: &Path, agent: &str, frame: usize, k: usize, dt: f64, out: &Path) -> Result<()> {
    let model = TrajPredictor::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mc = model.config();
    let (scene, map) = load_scene_map(scene, map)?;
    let agent_idx = scene.agent_by_id(agent)?;
    let cfg = ExtractionConfig { dt, n_hist: mc.n_hist, n_pred: mc.n_pred, raster: mc.raster, ..Default::default() };
    let inputs = anchor_inputs(&scene, &map, agent_idx, FrameIdx(frame), &cfg)?;
    if inputs.candidates.is_empty() {
        bail!("agent '{agent}' has no intent candidates at frame {frame}");
    }
    let current = inputs.images.last().expect("at least one history image");
    let dist = match intent_checkpoint {
        Some(p) => {
            let scorer = IntentScorer::load(p).with_context(|| format!("loading {}", p.display()))?;
            if scorer.config().raster != mc.raster {
                bail!("intent and trajectory checkpoints use different rasters");
            }
            scorer.predict(current, &inputs.candidates)?.with_candidates(inputs.candidates.clone())?
        }
        None => {
            let ekf = ekf_prediction(&inputs.history, dt, mc.n_pred, &EkfConfig::default())?;
            let end = ekf.modes[0].states.last().expect("non-empty horizon");
            endpoint_intent_distribution([end[0], end[1]], &inputs.candidates)?
        }
    };
    let modes = model.multimodal_predict(&inputs.images, &inputs.history, &dist, k)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("prediction.json"), modes.to_json()?)?;
    trajectory_overlay(current, &modes, inputs.future.as_deref(), 3).save(out.join("prediction.png"))?;
    for m in &modes.modes {
        let end = m.states.last().expect("non-empty horizon");
        println!("p={:.4} endpoint=({:.2}, {:.2})", m.probability, end[0], end[1]);
    }
    Ok(())
}

enum Variant {
    Model(TrajPredictor),
    Ekf(EkfPredictor),
    Oracle(OracleTrajPredictor),
}

impl Variant {
    fn predictor(&self) -> &dyn Predictor {
        match self {
            Self::Model(m) => m,
            Self::Ekf(e) => e,
            Self::Oracle(o) => o,
        }
    }
}

fn parse_variant(spec: &str, dt: f64, n_pred: usize) -> Result<(String, Variant)> {
    match spec.split_once('=') {
        Some((name, path)) => {
            let m = TrajPredictor::load(Path::new(path)).with_context(|| format!("loading variant '{name}' from {path}"))?;
            Ok((name.to_string(), Variant::Model(m)))
        }
        None if spec == "ekf" => Ok((spec.into(), Variant::Ekf(EkfPredictor { config: EkfConfig::default(), dt, n_pred }))),
        None if spec == "oracle" => Ok((spec.into(), Variant::Oracle(OracleTrajPredictor))),
        None => bail!("variant '{spec}' is neither name=checkpoint, ekf nor oracle"),
    }
}

pub fn eval(data: &Path, variants: &[String], intent_checkpoint: Option<&Path>, dt: f64, out: &Path) -> Result<()> {
    let examples = load_dataset_at(data)?;
    let n_pred = examples[0].traj.future.len();
    let variants = variants.iter().map(|v| parse_variant(v, dt, n_pred)).collect::<Result<Vec<_>>>()?;
    let scorer = intent_checkpoint.map(|p| IntentScorer::load(p).with_context(|| format!("loading {}", p.display()))).transpose()?;
    let intent: Vec<IntentExample> = examples.iter().map(|e| e.intent.clone()).collect();
    let traj: Vec<TrajExample> = examples.into_iter().map(|e| e.traj).collect();

    let first = variants.first().map(|(_, v)| v.predictor());
    let report = evaluate(scorer.as_ref(), &intent, first, &traj)?;
    let named: Vec<(&str, &dyn Predictor)> = variants.iter().map(|(n, v)| (n.as_str(), v.predictor())).collect();
    let ablation = run_ablation(&traj, &named)?;

    fs::create_dir_all(out)?;
    fs::write(out.join("eval.json"), report.to_json()?)?;
    let mut csv = String::from("k,accuracy\n");
    for (i, a) in report.top_k.iter().enumerate() {
        csv += &format!("{},{}\n", i + 1, a);
    }
    fs::write(out.join("top_k.csv"), csv)?;
    ablation.write(out)?;

    for (i, a) in report.top_k.iter().enumerate() {
        println!("A_{} = {:.4}", i + 1, a);
    }
    for (name, c) in &ablation.variants {
        println!("{name}: e_p(end) = {:.4} m, e_a(end) = {:.4} rad", c.e_p.last().unwrap_or(&f64::NAN), c.e_a.last().unwrap_or(&f64::NAN));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn render(scene: &Path, map: &Path, agent: &str, frame: usize, ntail: usize, range: f64, resolution: f64, dt: f64, out: &Path) -> Result<()> {
    let (scene, map) = load_scene_map(scene, map)?;
    let a = scene.agent_by_id(agent)?;
    let target = scene.instance_at(a, FrameIdx(frame)).with_context(|| format!("agent '{agent}' is not present at frame {frame}"))?;
    let cfg = RenderConfig { spec: RasterSpec::new(range, resolution)?, n_tail: ntail, stride_frames: scene.stride_for(dt), ..Default::default() };
    let img = rasterize(&scene, &map, target, &cfg)?;
    fs::create_dir_all(out)?;
    let path = out.join(format!("bev_{agent}_{frame}.png"));
    img.save_png(&path)?;
    println!("{}", path.display());
    Ok(())
}

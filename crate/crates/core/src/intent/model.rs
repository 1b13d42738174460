//! CNN score network `f(I, ‖η‖, |Δψ|) -> [0, 1]` and its training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::candidates::{lane_weights, CandidateSet};
use super::distribution::{assemble, IntentDistribution};
use crate::error::{Error, Result};
use crate::geometry::RasterSpec;
use crate::nn::layers::leaky_relu_gain;
use crate::nn::{self, Graph, Linear, OptimizerConfig, ParamStore, Tensor, Var};
use crate::raster::{paint_spot, ColorMap, SemanticImage};
use crate::training::{EarlyStopping, EpochLog, TrainOptions, TrainReport};
use crate::trunk::{image_batch, ConvTrunk, ConvTrunkConfig};

/// Bounds applied to every network score.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentScorerConfig {
    pub raster: RasterSpec,
    pub colors: ColorMap,
    pub trunk: ConvTrunkConfig,
    pub hidden: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for IntentScorerConfig {
    fn default() -> Self {
        Self {
            raster: RasterSpec::default(),
            colors: ColorMap::default(),
            trunk: ConvTrunkConfig::default(),
            hidden: 100,
            optimizer: OptimizerConfig::adam(0.001),
        }
    }
}

/// Which candidate the vehicle actually went for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum IntentLabel {
    /// Index into `CandidateSet::spots`.
    Spot(usize),
    /// Index into `CandidateSet::lanes`; the vehicle bypassed every visible spot.
    Lane(usize),
}

impl IntentLabel {
    pub fn is_bypass(&self) -> bool {
        matches!(self, Self::Lane(_))
    }

    /// Index in the combined spots-then-lanes ordering.
    pub fn combined(&self, c: &CandidateSet) -> usize {
        match *self {
            Self::Spot(i) => i,
            Self::Lane(j) => c.spots.len() + j,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentExample {
    /// Unpainted image at the current step.
    pub image: SemanticImage,
    pub candidates: CandidateSet,
    pub label: IntentLabel,
}

impl IntentExample {
    pub fn new(image: SemanticImage, candidates: CandidateSet, label: IntentLabel) -> Result<Self> {
        let ok = match label {
            IntentLabel::Spot(i) => i < candidates.spots.len(),
            IntentLabel::Lane(j) => j < candidates.lanes.len(),
        };
        if !ok {
            return Err(Error::InvalidInput(format!("label {label:?} outside candidate set of size {}", candidates.len())));
        }
        if candidates.spots.iter().any(|s| s.footprint.is_none()) {
            return Err(Error::InvalidInput("spot candidates need footprints".into()));
        }
        Ok(Self { image, candidates, label })
    }

    /// Number of scorer rows: one per spot plus the bypass row.
    pub fn rows(&self) -> usize {
        self.candidates.spots.len() + 1
    }
}

/// One training row: `spot == None` is the bypass row.
#[derive(Debug, Clone, Copy)]
struct Row {
    example: usize,
    spot: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct IntentScorer {
    config: IntentScorerConfig,
    store: ParamStore<f32>,
    trunk: ConvTrunk,
    fc1: Linear,
    fc2: Linear,
}

impl IntentScorer {
    pub const KIND: &'static str = "intent-scorer";

    pub fn new(config: IntentScorerConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let trunk = ConvTrunk::new(&mut store, "trunk", &config.trunk, config.raster.n(), &mut rng)?;
        let fc1 = Linear::new(&mut store, "head.fc1", trunk.out_len() + 2, config.hidden, 1.0, &mut rng);
        let fc2 = Linear::new(&mut store, "head.fc2", config.hidden, 1, leaky_relu_gain(1.0), &mut rng);
        Ok(Self { config, store, trunk, fc1, fc2 })
    }

    pub fn config(&self) -> &IntentScorerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Input width of the first head layer: flattened conv features plus two scalars.
    pub fn head_input_len(&self) -> usize {
        self.fc1.d_in
    }

    fn forward(&self, g: &mut Graph<f32>, images: Tensor<f32>, feats: Tensor<f32>) -> Result<Var> {
        let x = g.constant(images);
        let f = g.constant(feats);
        let h = self.trunk.forward(g, &self.store, x)?;
        let h = g.concat_cols(&[h, f])?;
        let h = self.fc1.forward(g, &self.store, h)?;
        let h = self.fc2.forward(g, &self.store, h)?;
        Ok(g.sigmoid(h))
    }

    fn normalized(&self, distance: f64, heading_diff: f64) -> [f32; 2] {
        [(distance / self.config.raster.sensing_limit()) as f32, (heading_diff.abs() / std::f64::consts::PI) as f32]
    }

    fn check_image(&self, image: &SemanticImage) -> Result<()> {
        if image.spec() != &self.config.raster {
            let n = self.config.raster.n();
            return Err(Error::ShapeMismatch { op: "score", lhs: vec![3, image.spec().n(), image.spec().n()], rhs: vec![3, n, n] });
        }
        Ok(())
    }

    /// Scores several (image, distance, |Δψ|) triples in eval mode. Each score depends
    /// only on its own triple.
    pub fn score_batch(&self, items: &[(&SemanticImage, f64, f64)]) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        for (img, ..) in items {
            self.check_image(img)?;
        }
        let images = image_batch(items.iter().map(|t| t.0), self.config.raster.n())?;
        let feats: Vec<f32> = items.iter().flat_map(|&(_, d, h)| self.normalized(d, h)).collect();
        let mut g = Graph::new(false, 0);
        let out = self.forward(&mut g, images, Tensor::new(&[items.len(), 2], feats)?)?;
        Ok(g.value(out).data().iter().map(|&s| (s as f64).clamp(SCORE_EPS, 1.0 - SCORE_EPS)).collect())
    }

    pub fn score(&self, image: &SemanticImage, distance: f64, heading_diff: f64) -> Result<f64> {
        Ok(self.score_batch(&[(image, distance, heading_diff)])?[0])
    }

    /// `[ŝ_bypass, ŝ_spot_1, …]` for the unpainted image and candidate set.
    pub fn score_candidates(&self, image: &SemanticImage, candidates: &CandidateSet) -> Result<Vec<f64>> {
        let painted = candidates
            .spots
            .iter()
            .map(|c| {
                let fp = c.footprint.ok_or_else(|| Error::InvalidInput("spot candidate without footprint".into()))?;
                Ok(paint_spot(image, &fp, &self.config.colors).image)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut items = vec![(image, 0.0, 0.0)];
        items.extend(painted.iter().zip(&candidates.spots).map(|(img, c)| (img, c.distance, c.heading_diff)));
        self.score_batch(&items)
    }

    /// Full intent distribution for one target.
    pub fn predict(&self, image: &SemanticImage, candidates: &CandidateSet) -> Result<IntentDistribution> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let scores = self.score_candidates(image, candidates)?;
        let weights = if candidates.lanes.is_empty() {
            Vec::new()
        } else {
            lane_weights(&candidates.lanes, self.config.raster.sensing_limit())?
        };
        assemble(&scores, &weights)?.with_candidates(candidates.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(path, Self::KIND, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: IntentScorerConfig = nn::read_checkpoint_config(path, Self::KIND)?;
        let mut model = Self::new(config, 0)?;
        nn::load_checkpoint(path, Self::KIND, &mut model.store)?;
        Ok(model)
    }

    fn batch(&self, examples: &[IntentExample], rows: &[Row]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<f32>)> {
        let mut owned = Vec::with_capacity(rows.len());
        let mut feats = Vec::with_capacity(rows.len() * 2);
        let mut labels = Vec::with_capacity(rows.len());
        for r in rows {
            let ex = &examples[r.example];
            match r.spot {
                Some(i) => {
                    let c = &ex.candidates.spots[i];
                    let fp = c.footprint.expect("validated");
                    owned.push(paint_spot(&ex.image, &fp, &self.config.colors).image);
                    feats.extend(self.normalized(c.distance, c.heading_diff));
                    labels.push(if ex.label == IntentLabel::Spot(i) { 1.0 } else { 0.0 });
                }
                None => {
                    owned.push(ex.image.clone());
                    feats.extend([0.0, 0.0]);
                    labels.push(if ex.label.is_bypass() { 1.0 } else { 0.0 });
                }
            }
        }
        let images = image_batch(owned.iter(), self.config.raster.n())?;
        Ok((images, Tensor::new(&[rows.len(), 2], feats)?, labels))
    }

    fn mean_bce(&self, examples: &[IntentExample], rows: &[Row], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        for chunk in rows.chunks(batch_size) {
            let (images, feats, labels) = self.batch(examples, chunk)?;
            let mut g = Graph::new(false, 0);
            let p = self.forward(&mut g, images, feats)?;
            let loss = g.bce(p, &labels)?;
            total += g.value(loss).item() as f64 * chunk.len() as f64;
        }
        Ok(total / rows.len() as f64)
    }
}

fn expand(examples: &[IntentExample]) -> Vec<Row> {
    examples
        .iter()
        .enumerate()
        .flat_map(|(e, ex)| {
            std::iter::once(Row { example: e, spot: None }).chain((0..ex.candidates.spots.len()).map(move |i| Row { example: e, spot: Some(i) }))
        })
        .collect()
}

/// Trains a fresh scorer on the painted-image expansion of `train` with mean binary
/// cross-entropy. The monitored loss is the validation loss when `val` is non-empty and
/// the training loss otherwise; the parameters of the best epoch are returned.
pub fn train_intent(
    train: &[IntentExample],
    val: &[IntentExample],
    config: IntentScorerConfig,
    opts: &TrainOptions,
) -> Result<(IntentScorer, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    opts.validate()?;
    for ex in train.iter().chain(val) {
        if ex.image.spec() != &config.raster {
            return Err(Error::InvalidInput("example image does not match the configured raster".into()));
        }
    }
    let mut model = IntentScorer::new(config, opts.seed)?;
    let mut rows = expand(train);
    let val_rows = expand(val);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut report = TrainReport::new("bce");
    let mut stopper = EarlyStopping::new(opts.patience, opts.min_delta);
    let mut best = model.store.clone();

    for epoch in 1..=opts.max_epochs {
        rows.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in rows.chunks(opts.batch_size).enumerate() {
            let (images, feats, labels) = model.batch(train, chunk)?;
            let mut g = Graph::new(true, opts.seed.wrapping_add((epoch * 100_003 + b) as u64));
            let p = model.forward(&mut g, images, feats)?;
            let loss = g.bce(p, &labels)?;
            total += g.value(loss).item() as f64 * chunk.len() as f64;
            g.backward(loss)?;
            model.store.zero_grad();
            g.accumulate_param_grads(&mut model.store);
            if let Some(c) = opts.clip_norm {
                nn::clip_grad_norm(&mut model.store, c);
            }
            let opt = model.config.optimizer;
            opt.with_lr(opt.lr() * opts.lr_scale(epoch)).step(&mut model.store);
            g.apply_buffer_updates(&mut model.store);
        }
        let train_loss = total / rows.len() as f64;
        let val_loss = if val_rows.is_empty() { None } else { Some(model.mean_bce(val, &val_rows, opts.batch_size)?) };
        report.epochs.push(EpochLog { epoch, train_loss, val_loss });
        let (improved, stop) = stopper.update(epoch, val_loss.unwrap_or(train_loss));
        if improved {
            best = model.store.clone();
        }
        if opts.target_loss.is_some_and(|t| train_loss < t) {
            report.best_epoch = epoch;
            return Ok((model, report));
        }
        if stop {
            report.stopped_early = true;
            break;
        }
    }
    report.best_epoch = stopper.best_epoch();
    model.store = best;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::intent::candidates::{IntentCandidate, IntentKind};

    fn spec() -> RasterSpec {
        RasterSpec::new(4.0, 0.5).unwrap()
    }

    fn config() -> IntentScorerConfig {
        IntentScorerConfig { raster: spec(), hidden: 8, ..Default::default() }
    }

    fn spot(x: f64, y: f64) -> IntentCandidate {
        let fp = [Point::new(x - 1.0, y - 0.5), Point::new(x + 1.0, y - 0.5), Point::new(x + 1.0, y + 0.5), Point::new(x - 1.0, y + 0.5)];
        let (distance, heading_diff) = crate::intent::candidates::features(Point::new(x, y));
        IntentCandidate { kind: IntentKind::Spot, map_index: 0, eta: Point::new(x, y), distance, heading_diff, footprint: Some(fp) }
    }

    fn lane(x: f64, y: f64) -> IntentCandidate {
        let (distance, heading_diff) = crate::intent::candidates::features(Point::new(x, y));
        IntentCandidate { kind: IntentKind::Lane, map_index: 0, eta: Point::new(x, y), distance, heading_diff, footprint: None }
    }

    fn example(label: IntentLabel) -> IntentExample {
        let img = SemanticImage::new(spec(), [0, 0, 0]);
        let c = CandidateSet { spots: vec![spot(2.0, 2.0), spot(-2.0, 2.0)], lanes: vec![lane(4.0, 0.0)] };
        IntentExample::new(img, c, label).unwrap()
    }

    #[test]
    fn head_input_is_flatten_plus_two() {
        let m = IntentScorer::new(config(), 0).unwrap();
        assert_eq!(m.head_input_len(), 3 * 2 * 2 + 2);
        let full = IntentScorer::new(IntentScorerConfig::default(), 0).unwrap();
        assert_eq!(full.head_input_len(), 1877);
    }

    #[test]
    fn eval_scores_are_deterministic_and_bounded() {
        let m = IntentScorer::new(config(), 3).unwrap();
        let img = SemanticImage::new(spec(), [10, 200, 30]);
        let a = m.score(&img, 1.0, 0.3).unwrap();
        assert_eq!(a, m.score(&img, 1.0, 0.3).unwrap());
        assert!((SCORE_EPS..=1.0 - SCORE_EPS).contains(&a));
    }

    #[test]
    fn wrong_raster_is_a_shape_error() {
        let m = IntentScorer::new(config(), 0).unwrap();
        let img = SemanticImage::new(RasterSpec::new(2.0, 0.5).unwrap(), [0, 0, 0]);
        assert!(matches!(m.score(&img, 0.0, 0.0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn label_validation() {
        let img = SemanticImage::new(spec(), [0, 0, 0]);
        let c = CandidateSet { spots: vec![spot(1.0, 1.0)], lanes: vec![] };
        assert!(IntentExample::new(img.clone(), c.clone(), IntentLabel::Spot(1)).is_err());
        assert!(IntentExample::new(img, c, IntentLabel::Lane(0)).is_err());
    }

    #[test]
    fn expansion_labels_follow_choice() {
        let ex = [example(IntentLabel::Spot(1)), example(IntentLabel::Lane(0))];
        let m = IntentScorer::new(config(), 0).unwrap();
        let rows = expand(&ex);
        assert_eq!(rows.len(), 6);
        let (_, _, labels) = m.batch(&ex, &rows).unwrap();
        // bypass, spot0, spot1 for each example
        assert_eq!(labels, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn predict_is_on_simplex() {
        let m = IntentScorer::new(config(), 1).unwrap();
        let ex = example(IntentLabel::Spot(0));
        let d = m.predict(&ex.image, &ex.candidates).unwrap();
        assert_eq!(d.len(), 3);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overfits_a_single_example() {
        // Dropout before pooling shifts eval-mode activations; switch it off so the
        // check isolates the optimization loop.
        let cfg = IntentScorerConfig { trunk: ConvTrunkConfig { dropout: 0.0, ..Default::default() }, ..config() };
        let ex = vec![example(IntentLabel::Spot(0))];
        let opts = TrainOptions { max_epochs: 200, batch_size: 8, patience: 200, ..Default::default() };
        let (m, report) = train_intent(&ex, &[], cfg, &opts).unwrap();
        assert!(report.final_train_loss().unwrap() < 0.05);
        let s = m.score_candidates(&ex[0].image, &ex[0].candidates).unwrap();
        assert!(s[1] > 0.99, "chosen spot score {}", s[1]);
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intent.json");
        let m = IntentScorer::new(config(), 5).unwrap();
        m.save(&path).unwrap();
        let back = IntentScorer::load(&path).unwrap();
        let img = SemanticImage::new(spec(), [40, 40, 40]);
        assert_eq!(m.score(&img, 2.0, 1.0).unwrap(), back.score(&img, 2.0, 1.0).unwrap());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(train_intent(&[], &[], config(), &TrainOptions::default()), Err(Error::EmptyDataset)));
    }
}

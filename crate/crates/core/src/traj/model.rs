//! Transformer encoder–decoder over ego-frame states with image features and an
//! intent-attention block in every decoder layer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RasterSpec;
use crate::intent::{top_k_intents, IntentDistribution};
use crate::nn::{self, causal_mask, FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, OptimizerConfig, ParamStore, Tensor, Var};
use crate::raster::SemanticImage;
use crate::training::{EarlyStopping, EpochLog, TrainOptions, TrainReport};
use crate::trunk::{image_batch, ConvTrunk, ConvTrunkConfig};

/// An ego-frame state `(x, y, ψ)`.
pub type State = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_head: usize,
    pub dropout: f64,
    pub ffn_hidden: usize,
    /// Width of the per-image feature vector.
    pub d_img: usize,
    pub n_hist: usize,
    pub n_pred: usize,
    pub raster: RasterSpec,
    pub trunk: ConvTrunkConfig,
    /// When false the intent-attention blocks are skipped.
    pub use_intent: bool,
    /// When false the image features are replaced by zeros.
    pub use_image: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for TrajConfig {
    fn default() -> Self {
        Self {
            d_model: 52,
            n_enc_layers: 16,
            n_dec_layers: 8,
            n_head: 4,
            dropout: 0.14,
            ffn_hidden: 208,
            d_img: 64,
            n_hist: 10,
            n_pred: 10,
            raster: RasterSpec::default(),
            trunk: ConvTrunkConfig::default(),
            use_intent: true,
            use_image: true,
            optimizer: OptimizerConfig::sgd(0.0025),
        }
    }
}

impl TrajConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.n_head == 0 || !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::InvalidConfig(format!("d_model {} must be ≥ 2 and divisible by {} heads", self.d_model, self.n_head)));
        }
        if self.n_hist == 0 || self.n_pred == 0 || self.d_img == 0 || self.ffn_hidden == 0 {
            return Err(Error::InvalidConfig("horizons and widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Sinusoidal code for step `t`. Storage index `j` corresponds to the one-based
/// dimension `i = j + 1`: even `i` gives `sin(t / 10000^(i/D))`, odd `i` gives
/// `cos(t / 10000^((i-1)/D))`.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = j + 1;
            let t = t as f64;
            if i % 2 == 0 {
                (t / 10000f64.powf(i as f64 / d as f64)).sin()
            } else {
                (t / 10000f64.powf((i - 1) as f64 / d as f64)).cos()
            }
        })
        .collect()
}

/// Codes for steps `0..n`, tiled `batch` times: `[batch·n, d]`.
fn pe_tensor(n: usize, d: usize, batch: usize) -> Tensor<f32> {
    let rows: Vec<Vec<f64>> = (0..n).map(|t| positional_encoding(t, d)).collect();
    let data = (0..batch).flat_map(|_| rows.iter().flatten().map(|&v| v as f32)).collect();
    Tensor::new(&[batch * n, d], data).expect("pe shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajExample {
    /// Past states, oldest first; the last row is `z(0) = (0, 0, 0)`.
    pub history: Vec<State>,
    /// One image per history step.
    pub images: Vec<SemanticImage>,
    /// Ground-truth intent location in the ego frame.
    pub intent: [f64; 2],
    pub future: Vec<State>,
}

impl TrajExample {
    pub fn validate(&self, cfg: &TrajConfig) -> Result<()> {
        if self.history.len() != cfg.n_hist || self.images.len() != cfg.n_hist {
            return Err(Error::ShapeMismatch { op: "traj example history", lhs: vec![self.history.len(), self.images.len()], rhs: vec![cfg.n_hist] });
        }
        if self.future.len() != cfg.n_pred {
            return Err(Error::ShapeMismatch { op: "traj example future", lhs: vec![self.future.len()], rhs: vec![cfg.n_pred] });
        }
        if self.images.iter().any(|i| i.spec() != &cfg.raster) {
            return Err(Error::InvalidInput("history image does not match the configured raster".into()));
        }
        Ok(())
    }
}

/// One predicted future with the probability of the intent that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalPrediction {
    #[serde(rename = "p")]
    pub probability: f64,
    /// Combined candidate index, when the mode came from an intent distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<[f64; 2]>,
    pub states: Vec<State>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModalPredictionSet {
    pub modes: Vec<ModalPrediction>,
}

impl ModalPredictionSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    intent: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct TrajPredictor {
    config: TrajConfig,
    store: ParamStore<f32>,
    trunk: Option<(ConvTrunk, Linear)>,
    phi_en: Linear,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    phi_it: Option<Linear>,
    phi_de: Linear,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl TrajPredictor {
    pub const KIND: &'static str = "traj-predictor";

    pub fn new(config: TrajConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, h, f, p) = (config.d_model, config.n_head, config.ffn_hidden, config.dropout);
        let trunk = if config.use_image {
            let t = ConvTrunk::new(&mut s, "image.trunk", &config.trunk, config.raster.n(), &mut rng)?;
            let proj = Linear::new(&mut s, "image.proj", t.out_len(), config.d_img, 1.0, &mut rng);
            Some((t, proj))
        } else {
            None
        };
        let phi_en = Linear::new(&mut s, "phi_en", config.d_img + 3, d, 1.0, &mut rng);
        let mut encoder = Vec::with_capacity(config.n_enc_layers);
        for l in 0..config.n_enc_layers {
            let n = format!("enc{l}");
            encoder.push(EncoderLayer {
                ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), d),
                attn: MultiHeadAttention::new(&mut s, &format!("{n}.attn"), d, h, &mut rng)?,
                ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), d),
                ffn: FeedForward::new(&mut s, &format!("{n}.ffn"), d, f, p, &mut rng),
            });
        }
        let enc_norm = LayerNorm::new(&mut s, "enc_norm", d);
        let phi_it = config.use_intent.then(|| Linear::new(&mut s, "phi_it", 2, d, 1.0, &mut rng));
        let phi_de = Linear::new(&mut s, "phi_de", 3, d, 1.0, &mut rng);
        let mut decoder = Vec::with_capacity(config.n_dec_layers);
        for l in 0..config.n_dec_layers {
            let n = format!("dec{l}");
            let intent = if config.use_intent {
                Some((LayerNorm::new(&mut s, &format!("{n}.ln_it"), d), MultiHeadAttention::new(&mut s, &format!("{n}.intent_attn"), d, h, &mut rng)?))
            } else {
                None
            };
            decoder.push(DecoderLayer {
                ln_self: LayerNorm::new(&mut s, &format!("{n}.ln_self"), d),
                self_attn: MultiHeadAttention::new(&mut s, &format!("{n}.self_attn"), d, h, &mut rng)?,
                ln_cross: LayerNorm::new(&mut s, &format!("{n}.ln_cross"), d),
                cross_attn: MultiHeadAttention::new(&mut s, &format!("{n}.cross_attn"), d, h, &mut rng)?,
                intent,
                ln_ffn: LayerNorm::new(&mut s, &format!("{n}.ln_ffn"), d),
                ffn: FeedForward::new(&mut s, &format!("{n}.ffn"), d, f, p, &mut rng),
            });
        }
        let dec_norm = LayerNorm::new(&mut s, "dec_norm", d);
        let head = Linear::new(&mut s, "head", d, 3, 1.0, &mut rng);
        Ok(Self { config, store: s, trunk, phi_en, encoder, enc_norm, phi_it, phi_de, decoder, dec_norm, head })
    }

    pub fn config(&self) -> &TrajConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    // ---------------------------------------------------------------------
    // Graph builders
    // ---------------------------------------------------------------------

    fn residual(g: &mut Graph<f32>, x: Var, delta: Var, rate: f64) -> Result<Var> {
        let delta = g.dropout(delta, rate);
        g.add(x, delta)
    }

    /// Encoder over `batch` sequences: `images` are `[batch·n_hist, 3, n, n]` (ignored
    /// without the image branch), `history` is `[batch·n_hist, 3]`. Returns the
    /// memory `[batch·n_hist, D]`.
    pub fn encoder_graph(&self, g: &mut Graph<f32>, images: Option<Tensor<f32>>, history: Var, batch: usize) -> Result<Var> {
        let cfg = &self.config;
        let rows = batch * cfg.n_hist;
        if g.shape(history) != [rows, 3] {
            return Err(Error::ShapeMismatch { op: "encode history", lhs: g.shape(history).to_vec(), rhs: vec![rows, 3] });
        }
        let feats = match (&self.trunk, images) {
            (Some((trunk, proj)), Some(imgs)) => {
                if imgs.shape()[0] != rows {
                    return Err(Error::ShapeMismatch { op: "encode images", lhs: imgs.shape().to_vec(), rhs: vec![rows] });
                }
                let x = g.constant(imgs);
                let h = trunk.forward(g, &self.store, x)?;
                proj.forward(g, &self.store, h)?
            }
            (Some(_), None) => return Err(Error::InvalidInput("model expects history images".into())),
            (None, _) => g.constant(Tensor::zeros(&[rows, cfg.d_img])),
        };
        let x = g.concat_cols(&[feats, history])?;
        let x = self.phi_en.forward(g, &self.store, x)?;
        let x = g.add_const(x, &pe_tensor(cfg.n_hist, cfg.d_model, batch))?;
        let mut x = g.dropout(x, cfg.dropout);
        for layer in &self.encoder {
            let h = layer.ln1.forward(g, &self.store, x)?;
            let a = layer.attn.forward(g, &self.store, h, h, batch, None)?;
            x = Self::residual(g, x, a, cfg.dropout)?;
            let h = layer.ln2.forward(g, &self.store, x)?;
            let f = layer.ffn.forward(g, &self.store, h)?;
            x = Self::residual(g, x, f, cfg.dropout)?;
        }
        self.enc_norm.forward(g, &self.store, x)
    }

    /// `eta: [batch, 2] -> [batch, D]`; `None` without the intent branch.
    pub fn intent_graph(&self, g: &mut Graph<f32>, eta: Var) -> Result<Option<Var>> {
        match &self.phi_it {
            Some(phi) => Ok(Some(phi.forward(g, &self.store, eta)?)),
            None => Ok(None),
        }
    }

    /// Decoder over `batch` sequences of `dec_in` rows each (`[batch·s, 3]`, first row of
    /// every sequence is the start state). Returns `[batch·s, 3]`; row `t` of a sequence
    /// only sees input rows `≤ t`.
    pub fn decoder_graph(&self, g: &mut Graph<f32>, memory: Var, intent: Option<Var>, dec_in: Var, batch: usize) -> Result<Var> {
        let cfg = &self.config;
        let rows = g.shape(dec_in)[0];
        if batch == 0 || !rows.is_multiple_of(batch) || g.shape(dec_in)[1] != 3 {
            return Err(Error::ShapeMismatch { op: "decode", lhs: g.shape(dec_in).to_vec(), rhs: vec![batch, 3] });
        }
        let s = rows / batch;
        let mask = causal_mask::<f32>(s);
        let y = self.phi_de.forward(g, &self.store, dec_in)?;
        let y = g.add_const(y, &pe_tensor(s, cfg.d_model, batch))?;
        let mut y = g.dropout(y, cfg.dropout);
        for layer in &self.decoder {
            let h = layer.ln_self.forward(g, &self.store, y)?;
            let a = layer.self_attn.forward(g, &self.store, h, h, batch, Some(&mask))?;
            y = Self::residual(g, y, a, cfg.dropout)?;
            let h = layer.ln_cross.forward(g, &self.store, y)?;
            let a = layer.cross_attn.forward(g, &self.store, h, memory, batch, None)?;
            y = Self::residual(g, y, a, cfg.dropout)?;
            if let (Some((ln, attn)), Some(it)) = (&layer.intent, intent) {
                let h = ln.forward(g, &self.store, y)?;
                let a = attn.forward(g, &self.store, h, it, batch, None)?;
                y = Self::residual(g, y, a, cfg.dropout)?;
            }
            let h = layer.ln_ffn.forward(g, &self.store, y)?;
            let f = layer.ffn.forward(g, &self.store, h)?;
            y = Self::residual(g, y, f, cfg.dropout)?;
        }
        let y = self.dec_norm.forward(g, &self.store, y)?;
        self.head.forward(g, &self.store, y)
    }

    fn images_tensor<'a>(&self, images: impl IntoIterator<Item = &'a SemanticImage>) -> Result<Option<Tensor<f32>>> {
        if self.trunk.is_none() {
            return Ok(None);
        }
        let imgs: Vec<&SemanticImage> = images.into_iter().collect();
        if imgs.iter().any(|i| i.spec() != &self.config.raster) {
            return Err(Error::InvalidInput("history image does not match the configured raster".into()));
        }
        Ok(Some(image_batch(imgs, self.config.raster.n())?))
    }

    fn states_tensor<'a>(states: impl IntoIterator<Item = &'a State>) -> Result<Tensor<f32>> {
        let data: Vec<f32> = states.into_iter().flat_map(|s| s.map(|v| v as f32)).collect();
        let n = data.len() / 3;
        Tensor::new(&[n, 3], data)
    }

    // ---------------------------------------------------------------------
    // Inference
    // ---------------------------------------------------------------------

    /// Encoder memory `[n_hist, D]` for one history (eval mode).
    pub fn encode(&self, images: &[SemanticImage], history: &[State]) -> Result<Tensor<f32>> {
        let n = self.config.n_hist;
        if history.len() != n || images.len() != n {
            return Err(Error::ShapeMismatch { op: "encode", lhs: vec![history.len(), images.len()], rhs: vec![n] });
        }
        let mut g = Graph::new(false, 0);
        let h = g.constant(Self::states_tensor(history)?);
        let m = self.encoder_graph(&mut g, self.images_tensor(images)?, h, 1)?;
        Ok(g.value(m).clone())
    }

    /// Intent embedding of length D, or `None` without the intent branch.
    pub fn embed_intent(&self, eta: [f64; 2]) -> Result<Option<Vec<f32>>> {
        if !eta.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("intent {eta:?} is not finite")));
        }
        let mut g = Graph::new(false, 0);
        let e = g.constant(Tensor::new(&[1, 2], vec![eta[0] as f32, eta[1] as f32])?);
        Ok(self.intent_graph(&mut g, e)?.map(|v| g.value(v).data().to_vec()))
    }

    fn decode_eval(&self, memory: &Tensor<f32>, intent: Option<&[f32]>, dec_in: &[State]) -> Result<Vec<State>> {
        let d = self.config.d_model;
        if memory.shape() != [self.config.n_hist, d] {
            return Err(Error::ShapeMismatch { op: "decode memory", lhs: memory.shape().to_vec(), rhs: vec![self.config.n_hist, d] });
        }
        let mut g = Graph::new(false, 0);
        let mem = g.constant(memory.clone());
        let it = match intent {
            Some(v) => Some(g.constant(Tensor::new(&[1, d], v.to_vec())?)),
            None => None,
        };
        let x = g.constant(Self::states_tensor(dec_in)?);
        let y = self.decoder_graph(&mut g, mem, it, x, 1)?;
        Ok(g.value(y).data().chunks(3).map(|r| [r[0] as f64, r[1] as f64, r[2] as f64]).collect())
    }

    /// Teacher-forced decoder output for target states: inputs are
    /// `[z(0), targets[0], …, targets[N-2]]`.
    pub fn decode_teacher_forced(&self, memory: &Tensor<f32>, intent: Option<&[f32]>, targets: &[State]) -> Result<Vec<State>> {
        let mut dec_in = vec![[0.0; 3]];
        dec_in.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
        self.decode_eval(memory, intent, &dec_in)
    }

    /// Autoregressive rollout of `n_pred` states from the start state.
    pub fn predict(&self, memory: &Tensor<f32>, intent: Option<&[f32]>, n_pred: usize) -> Result<Vec<State>> {
        let mut seq: Vec<State> = vec![[0.0; 3]];
        for _ in 0..n_pred {
            let out = self.decode_eval(memory, intent, &seq)?;
            seq.push(*out.last().expect("non-empty output"));
        }
        Ok(seq.split_off(1))
    }

    /// Encodes, embeds `eta` and rolls out the configured horizon.
    pub fn predict_example(&self, images: &[SemanticImage], history: &[State], eta: [f64; 2]) -> Result<Vec<State>> {
        let memory = self.encode(images, history)?;
        let intent = self.embed_intent(eta)?;
        self.predict(&memory, intent.as_deref(), self.config.n_pred)
    }

    /// One rollout per top-`k` intent, each tagged with that intent's probability.
    pub fn multimodal_predict(&self, images: &[SemanticImage], history: &[State], dist: &IntentDistribution, k: usize) -> Result<ModalPredictionSet> {
        if dist.candidates.len() != dist.len() {
            return Err(Error::InvalidInput("intent distribution carries no candidates".into()));
        }
        let memory = self.encode(images, history)?;
        let mut modes = Vec::new();
        for idx in top_k_intents(dist, k)? {
            let c = dist.candidates.get(idx).expect("index from distribution");
            let eta = [c.eta.x, c.eta.y];
            let intent = self.embed_intent(eta)?;
            let states = self.predict(&memory, intent.as_deref(), self.config.n_pred)?;
            modes.push(ModalPrediction { probability: dist.get(idx).expect("index in range"), intent_index: Some(idx), intent: Some(eta), states });
        }
        Ok(ModalPredictionSet { modes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(path, Self::KIND, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: TrajConfig = nn::read_checkpoint_config(path, Self::KIND)?;
        let mut model = Self::new(config, 0)?;
        nn::load_checkpoint(path, Self::KIND, &mut model.store)?;
        Ok(model)
    }

    // ---------------------------------------------------------------------
    // Training
    // ---------------------------------------------------------------------

    /// Teacher-forced outputs for a batch, plus the flattened targets.
    fn batch_graph(&self, g: &mut Graph<f32>, batch: &[&TrajExample]) -> Result<(Var, Vec<f32>)> {
        let b = batch.len();
        let images = self.images_tensor(batch.iter().flat_map(|e| e.images.iter()))?;
        let hist = g.constant(Self::states_tensor(batch.iter().flat_map(|e| e.history.iter()))?);
        let memory = self.encoder_graph(g, images, hist, b)?;
        let eta = g.constant(Tensor::new(&[b, 2], batch.iter().flat_map(|e| e.intent.map(|v| v as f32)).collect())?);
        let intent = self.intent_graph(g, eta)?;
        let mut dec_in = Vec::with_capacity(b * self.config.n_pred);
        for e in batch {
            dec_in.push([0.0; 3]);
            dec_in.extend_from_slice(&e.future[..self.config.n_pred - 1]);
        }
        let x = g.constant(Self::states_tensor(&dec_in)?);
        let y = self.decoder_graph(g, memory, intent, x, b)?;
        let targets = batch.iter().flat_map(|e| e.future.iter().flat_map(|s| s.map(|v| v as f32))).collect();
        Ok((y, targets))
    }

    /// Mean teacher-forced L1 over `examples` in eval mode.
    pub fn mean_l1(&self, examples: &[TrajExample], batch_size: usize) -> Result<f64> {
        let refs: Vec<&TrajExample> = examples.iter().collect();
        let mut total = 0.0;
        for chunk in refs.chunks(batch_size.max(1)) {
            let mut g = Graph::new(false, 0);
            let (y, t) = self.batch_graph(&mut g, chunk)?;
            let loss = g.l1(y, &t)?;
            total += g.value(loss).item() as f64 * chunk.len() as f64;
        }
        Ok(total / examples.len().max(1) as f64)
    }
}

/// Trains a fresh predictor with teacher forcing and mean L1 loss against the future
/// states, conditioning on the ground-truth intent.
pub fn train_traj(train: &[TrajExample], val: &[TrajExample], config: TrajConfig, opts: &TrainOptions) -> Result<(TrajPredictor, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    opts.validate()?;
    for e in train.iter().chain(val) {
        e.validate(&config)?;
    }
    let mut model = TrajPredictor::new(config, opts.seed)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7a11);
    let mut report = TrainReport::new("l1");
    let mut stopper = EarlyStopping::new(opts.patience, opts.min_delta);
    let mut best = model.store.clone();

    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch: Vec<&TrajExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new(true, opts.seed.wrapping_add((epoch * 100_003 + bi) as u64));
            let (y, t) = model.batch_graph(&mut g, &batch)?;
            let loss = g.l1(y, &t)?;
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
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() { None } else { Some(model.mean_l1(val, opts.batch_size)?) };
        report.epochs.push(EpochLog { epoch, train_loss, val_loss });
        if opts.target_loss.is_some_and(|t| train_loss < t) {
            report.best_epoch = epoch;
            return Ok((model, report));
        }
        let (improved, stop) = stopper.update(epoch, val_loss.unwrap_or(train_loss));
        if improved {
            best = model.store.clone();
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

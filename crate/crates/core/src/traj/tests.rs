use super::model::*;
use crate::geometry::RasterSpec;
use crate::intent::{assemble, CandidateSet, IntentCandidate, IntentKind};
use crate::geometry::Point;
use crate::nn::{Graph, Tensor};
use crate::raster::SemanticImage;
use crate::training::TrainOptions;

fn tiny(use_intent: bool, use_image: bool) -> TrajConfig {
    TrajConfig {
        d_model: 8,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_head: 2,
        ffn_hidden: 16,
        d_img: 4,
        n_hist: 3,
        n_pred: 4,
        raster: RasterSpec::new(4.0, 0.5).unwrap(),
        use_intent,
        use_image,
        ..Default::default()
    }
}

fn images(cfg: &TrajConfig, seed: u8) -> Vec<SemanticImage> {
    (0..cfg.n_hist)
        .map(|i| {
            let mut img = SemanticImage::new(cfg.raster, [0, 0, 0]);
            img.set(i, (seed as usize) % cfg.raster.n(), [255, seed, 10]);
            img
        })
        .collect()
}

fn history(cfg: &TrajConfig) -> Vec<State> {
    (0..cfg.n_hist).map(|i| [-(((cfg.n_hist - 1 - i) as f64) * 0.8), 0.0, 0.0]).collect()
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(0, 6);
    // Storage index j is one-based dimension j + 1: even j gives cos, odd j gives sin.
    assert_eq!(pe, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let pe = positional_encoding(1, 4);
    let want = [1.0f64.cos(), (1.0 / 10000f64.powf(0.5)).sin(), (1.0 / 10000f64.powf(0.5)).cos(), (1.0 / 10000f64).sin()];
    for (a, b) in pe.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    for t in 0..200 {
        assert!(positional_encoding(t, 52).iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn default_shapes() {
    let cfg = TrajConfig { raster: RasterSpec::new(4.0, 0.5).unwrap(), ..Default::default() };
    let m = TrajPredictor::new(cfg.clone(), 0).unwrap();
    let mem = m.encode(&images(&cfg, 1), &history(&cfg)).unwrap();
    assert_eq!(mem.shape(), &[10, 52]);
    let emb = m.embed_intent([3.0, 1.0]).unwrap().unwrap();
    assert_eq!(emb.len(), 52);
    let out = m.decode_teacher_forced(&mem, Some(&emb), &vec![[0.1, 0.0, 0.0]; 10]).unwrap();
    assert_eq!(out.len(), 10);
}

#[test]
fn config_rejects_indivisible_heads() {
    let cfg = TrajConfig { d_model: 9, ..tiny(true, true) };
    assert!(TrajPredictor::new(cfg, 0).is_err());
}

#[test]
fn encoder_is_deterministic_and_order_sensitive() {
    let cfg = tiny(true, true);
    let m = TrajPredictor::new(cfg.clone(), 2).unwrap();
    let (imgs, hist) = (images(&cfg, 3), history(&cfg));
    let a = m.encode(&imgs, &hist).unwrap();
    assert_eq!(a, m.encode(&imgs, &hist).unwrap());
    let mut swapped = hist.clone();
    swapped.swap(0, 1);
    let mut simgs = imgs.clone();
    simgs.swap(0, 1);
    assert_ne!(a, m.encode(&simgs, &swapped).unwrap());
}

#[test]
fn encode_rejects_length_mismatch() {
    let cfg = tiny(true, true);
    let m = TrajPredictor::new(cfg.clone(), 0).unwrap();
    assert!(m.encode(&images(&cfg, 0)[..2], &history(&cfg)).is_err());
}

#[test]
fn intent_embedding_is_affine() {
    let m = TrajPredictor::new(tiny(true, true), 4).unwrap();
    let e0 = m.embed_intent([0.0, 0.0]).unwrap().unwrap();
    let e1 = m.embed_intent([1.5, -2.0]).unwrap().unwrap();
    let e2 = m.embed_intent([3.0, -4.0]).unwrap().unwrap();
    for i in 0..e0.len() {
        assert!(((e2[i] - e0[i]) - 2.0 * (e1[i] - e0[i])).abs() < 1e-5);
    }
    assert_ne!(e1, e2);
    assert!(m.embed_intent([f64::NAN, 0.0]).is_err());
}

#[test]
fn no_intent_variant_has_no_embedding() {
    let m = TrajPredictor::new(tiny(false, true), 0).unwrap();
    assert!(m.embed_intent([1.0, 1.0]).unwrap().is_none());
    assert!(m.params().id("phi_it.weight").is_none());
}

#[test]
fn autoregressive_matches_teacher_forcing_on_own_outputs() {
    let cfg = tiny(true, true);
    let m = TrajPredictor::new(cfg.clone(), 7).unwrap();
    let mem = m.encode(&images(&cfg, 5), &history(&cfg)).unwrap();
    let emb = m.embed_intent([4.0, 1.0]).unwrap();
    let pred = m.predict(&mem, emb.as_deref(), cfg.n_pred).unwrap();
    let tf = m.decode_teacher_forced(&mem, emb.as_deref(), &pred).unwrap();
    for (a, b) in pred.iter().zip(&tf) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-5);
        }
    }
    assert_eq!(pred, m.predict(&mem, emb.as_deref(), cfg.n_pred).unwrap());
    assert_eq!(m.predict(&mem, emb.as_deref(), 1).unwrap().len(), 1);
}

#[test]
fn decoder_output_row_ignores_later_inputs() {
    let cfg = tiny(true, false);
    let m = TrajPredictor::new(cfg.clone(), 9).unwrap();
    let n = 5;
    for t in 0..n {
        let mut g = Graph::new(false, 0);
        let mem = g.constant(Tensor::from_fn(&[cfg.n_hist, cfg.d_model], |i| (i as f32 * 0.37).sin()));
        let eta = g.constant(Tensor::new(&[1, 2], vec![2.0, -1.0]).unwrap());
        let it = m.intent_graph(&mut g, eta).unwrap();
        let x = g.input(Tensor::from_fn(&[n, 3], |i| (i as f32 * 0.71).cos()));
        let y = m.decoder_graph(&mut g, mem, it, x, 1).unwrap();
        let row = g.slice_rows(y, t, 1).unwrap();
        let s = g.sum(row);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        assert!(grad.data()[t * 3..(t + 1) * 3].iter().any(|v| *v != 0.0) || t == 0);
        assert!(grad.data()[(t + 1) * 3..].iter().all(|v| *v == 0.0));
    }
}

fn toy_examples(cfg: &TrajConfig) -> Vec<TrajExample> {
    (0..4)
        .map(|k| {
            let v = 0.5 + 0.3 * k as f64;
            TrajExample {
                history: (0..cfg.n_hist).map(|i| [-(((cfg.n_hist - 1 - i) as f64) * v), 0.0, 0.0]).collect(),
                images: images(cfg, k as u8),
                intent: [4.0, 0.0],
                future: (1..=cfg.n_pred).map(|i| [i as f64 * v, 0.0, 0.0]).collect(),
            }
        })
        .collect()
}

#[test]
fn training_reduces_l1() {
    let cfg = TrajConfig { optimizer: crate::nn::OptimizerConfig::adam(3e-3), dropout: 0.0, ..tiny(true, true) };
    let data = toy_examples(&cfg);
    let opts = TrainOptions { max_epochs: 60, batch_size: 4, patience: 60, ..Default::default() };
    let (m, report) = train_traj(&data, &[], cfg, &opts).unwrap();
    let first = report.epochs[0].train_loss;
    let eval = m.mean_l1(&data, 4).unwrap();
    assert!(eval < 0.5 * first, "first {first} eval {eval}");
}

#[test]
fn train_rejects_empty_and_malformed() {
    let cfg = tiny(true, true);
    assert!(train_traj(&[], &[], cfg.clone(), &TrainOptions::default()).is_err());
    let mut bad = toy_examples(&cfg);
    bad[0].future.pop();
    assert!(train_traj(&bad, &[], cfg, &TrainOptions::default()).is_err());
}

#[test]
fn multimodal_modes_carry_unnormalized_probabilities() {
    let cfg = tiny(true, true);
    let m = TrajPredictor::new(cfg.clone(), 1).unwrap();
    let cand = |x: f64, y: f64, kind| IntentCandidate { kind, map_index: 0, eta: Point::new(x, y), distance: 0.0, heading_diff: 0.0, footprint: None };
    let c = CandidateSet {
        spots: vec![cand(2.0, 2.0, IntentKind::Spot), cand(-2.0, 2.0, IntentKind::Spot)],
        lanes: vec![cand(4.0, 0.0, IntentKind::Lane)],
    };
    let dist = assemble(&[0.2, 0.5, 0.3], &[1.0]).unwrap().with_candidates(c).unwrap();
    let set = m.multimodal_predict(&images(&cfg, 0), &history(&cfg), &dist, 2).unwrap();
    assert_eq!(set.modes.len(), 2);
    assert_eq!(set.modes[0].intent_index, Some(0));
    assert_eq!(set.modes[0].probability, 0.5);
    assert_eq!(set.modes[1].probability, 0.3);
    assert!(set.modes.iter().map(|m| m.probability).sum::<f64>() <= 1.0);
    let json = set.to_json().unwrap();
    assert!(json.contains("\"p\""));
    assert_ne!(set.modes[0].states, set.modes[1].states);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.json");
    let cfg = tiny(true, true);
    let m = TrajPredictor::new(cfg.clone(), 3).unwrap();
    m.save(&path).unwrap();
    let back = TrajPredictor::load(&path).unwrap();
    let (imgs, hist) = (images(&cfg, 2), history(&cfg));
    assert_eq!(m.predict_example(&imgs, &hist, [1.0, 2.0]).unwrap(), back.predict_example(&imgs, &hist, [1.0, 2.0]).unwrap());
}

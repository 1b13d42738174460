//! Top-k intent accuracy, per-step trajectory errors and the paired variant comparison.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ekf::{ekf_filter, ekf_predict_horizon, EkfConfig};
use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::intent::{top_k_indices, IntentExample, IntentScorer};
use crate::traj::{State, TrajExample, TrajPredictor};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Fraction of samples whose label is among the `k` most probable entries.
pub fn top_k_accuracy(dists: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if dists.len() != labels.len() {
        return Err(Error::ShapeMismatch { op: "top_k_accuracy", lhs: vec![dists.len()], rhs: vec![labels.len()] });
    }
    if dists.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for (p, &l) in dists.iter().zip(labels) {
        if l >= p.len() {
            return Err(Error::InvalidInput(format!("label {l} outside a distribution over {} intents", p.len())));
        }
        if top_k_indices(p, k)?.contains(&l) {
            hits += 1;
        }
    }
    Ok(hits as f64 / dists.len() as f64)
}

/// `A_1..=A_kmax`.
pub fn accuracy_curve(dists: &[Vec<f64>], labels: &[usize], k_max: usize) -> Result<Vec<f64>> {
    (1..=k_max).map(|k| top_k_accuracy(dists, labels, k)).collect()
}

/// Mean position and wrapped heading errors per prediction step with 95% CI
/// half-widths over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurves {
    pub e_p: Vec<f64>,
    pub ci_p: Vec<f64>,
    pub e_a: Vec<f64>,
    pub ci_a: Vec<f64>,
    pub samples: usize,
}

impl ErrorCurves {
    pub fn horizon(&self) -> usize {
        self.e_p.len()
    }
}

fn mean_ci(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * var.sqrt() / n.sqrt())
}

pub fn error_curves(pred: &[Vec<State>], gt: &[Vec<State>]) -> Result<ErrorCurves> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch { op: "error_curves", lhs: vec![pred.len()], rhs: vec![gt.len()] });
    }
    let Some(horizon) = gt.first().map(Vec::len) else {
        return Err(Error::EmptyDataset);
    };
    if pred.iter().chain(gt).any(|t| t.len() != horizon) {
        return Err(Error::InvalidInput(format!("every trajectory must have {horizon} steps")));
    }
    let mut out = ErrorCurves { e_p: vec![], ci_p: vec![], e_a: vec![], ci_a: vec![], samples: gt.len() };
    for t in 0..horizon {
        let pos: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p[t][0] - g[t][0]).hypot(p[t][1] - g[t][1])).collect();
        let ang: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| wrap_angle(p[t][2] - g[t][2]).abs()).collect();
        let (m, c) = mean_ci(&pos);
        out.e_p.push(m);
        out.ci_p.push(c);
        let (m, c) = mean_ci(&ang);
        out.e_a.push(m);
        out.ci_a.push(c);
    }
    Ok(out)
}

/// Anything that maps an example to the future conditioned on its ground-truth intent.
pub trait Predictor: Sync {
    fn predict_future(&self, example: &TrajExample) -> Result<Vec<State>>;
}

impl Predictor for TrajPredictor {
    fn predict_future(&self, e: &TrajExample) -> Result<Vec<State>> {
        self.predict_example(&e.images, &e.history, e.intent)
    }
}

/// Filter the history then coast; ignores images and intents.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfPredictor {
    pub config: EkfConfig,
    pub dt: f64,
    pub n_pred: usize,
}

impl Predictor for EkfPredictor {
    fn predict_future(&self, e: &TrajExample) -> Result<Vec<State>> {
        let st = ekf_filter(&e.history, self.dt, &self.config)?;
        Ok(ekf_predict_horizon(&st, self.n_pred, self.dt))
    }
}

/// Returns the ground truth; used to check the harness itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleTrajPredictor;

impl Predictor for OracleTrajPredictor {
    fn predict_future(&self, e: &TrajExample) -> Result<Vec<State>> {
        Ok(e.future.clone())
    }
}

/// Runs `f` over `items` on all cores, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate_trajectories(predictor: &dyn Predictor, examples: &[TrajExample]) -> Result<ErrorCurves> {
    let pred = par_map(examples, |e| predictor.predict_future(e))?;
    let gt: Vec<Vec<State>> = examples.iter().map(|e| e.future.clone()).collect();
    error_curves(&pred, &gt)
}

/// Intent distributions from `scorer` and combined label indices.
pub fn intent_predictions(scorer: &IntentScorer, examples: &[IntentExample]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let dists = par_map(examples, |e| Ok(scorer.predict(&e.image, &e.candidates)?.probs()))?;
    let labels = examples.iter().map(|e| e.label.combined(&e.candidates)).collect();
    Ok((dists, labels))
}

/// Intent accuracy and trajectory errors over one validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `A_1..=A_5`; empty when no intent model was evaluated.
    pub top_k: Vec<f64>,
    pub intent_samples: usize,
    pub curves: Option<ErrorCurves>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate(scorer: Option<&IntentScorer>, intent_examples: &[IntentExample], predictor: Option<&dyn Predictor>, traj_examples: &[TrajExample]) -> Result<EvalReport> {
    let top_k = match scorer {
        Some(s) if !intent_examples.is_empty() => {
            let (d, l) = intent_predictions(s, intent_examples)?;
            accuracy_curve(&d, &l, 5)?
        }
        _ => Vec::new(),
    };
    let curves = match predictor {
        Some(p) if !traj_examples.is_empty() => Some(evaluate_trajectories(p, traj_examples)?),
        _ => None,
    };
    Ok(EvalReport { top_k, intent_samples: if scorer.is_some() { intent_examples.len() } else { 0 }, curves })
}

/// Every variant evaluated on the same samples in the same order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub samples: usize,
    pub variants: Vec<(String, ErrorCurves)>,
}

pub fn run_ablation(examples: &[TrajExample], variants: &[(&str, &dyn Predictor)]) -> Result<AblationReport> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = AblationReport { samples: examples.len(), variants: Vec::new() };
    for (name, p) in variants {
        if out.variants.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidInput(format!("duplicate variant name '{name}'")));
        }
        out.variants.push((name.to_string(), evaluate_trajectories(*p, examples)?));
    }
    Ok(out)
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<&ErrorCurves> {
        self.variants.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    /// One row per step; `e_p`, `ci_p`, `e_a`, `ci_a` columns per variant.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for (n, _) in &self.variants {
            s += &format!(",{n}_e_p,{n}_ci_p,{n}_e_a,{n}_ci_a");
        }
        s.push('\n');
        let horizon = self.variants.iter().map(|(_, c)| c.horizon()).max().unwrap_or(0);
        for t in 0..horizon {
            s += &(t + 1).to_string();
            for (_, c) in &self.variants {
                s += &format!(",{},{},{},{}", c.e_p[t], c.ci_p[t], c.e_a[t], c.ci_a[t]);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `ablation.csv`, `ablation.json`, `position_error.png` and
    /// `heading_error.png` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), self.to_csv())?;
        std::fs::write(dir.join("ablation.json"), self.to_json()?)?;
        let series = |pos: bool| -> Vec<crate::plot::Series> {
            self.variants
                .iter()
                .map(|(n, c)| crate::plot::Series {
                    name: n.clone(),
                    values: if pos { c.e_p.clone() } else { c.e_a.clone() },
                    ci: if pos { c.ci_p.clone() } else { c.ci_a.clone() },
                })
                .collect()
        };
        crate::plot::line_chart(&series(true)).save(dir.join("position_error.png"))?;
        crate::plot::line_chart(&series(false)).save(dir.join("heading_error.png"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_predictions_are_perfect() {
        let d = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(top_k_accuracy(&d, &[1, 0], 1).unwrap(), 1.0);
    }

    #[test]
    fn large_k_is_always_one() {
        let d = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.9]];
        assert_eq!(top_k_accuracy(&d, &[2, 0], 3).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&d, &[2, 0], 1).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = vec![vec![0.5, 0.5]];
        assert!(top_k_accuracy(&d, &[0], 0).is_err());
        assert!(top_k_accuracy(&d, &[2], 1).is_err());
        assert!(top_k_accuracy(&d, &[0, 1], 1).is_err());
    }

    #[test]
    fn perfect_predictions_have_zero_error() {
        let g = vec![vec![[1.0, 2.0, 3.0], [2.0, 3.0, -3.0]]; 4];
        let c = error_curves(&g, &g).unwrap();
        assert!(c.e_p.iter().chain(&c.e_a).chain(&c.ci_p).all(|&v| v == 0.0));
    }

    #[test]
    fn constant_offset() {
        let g: Vec<Vec<State>> = (0..5).map(|i| vec![[i as f64, 0.0, 0.1]; 3]).collect();
        let p: Vec<Vec<State>> = g.iter().map(|t| t.iter().map(|s| [s[0] + 1.0, s[1], s[2]]).collect()).collect();
        let c = error_curves(&p, &g).unwrap();
        assert!(c.e_p.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(c.ci_p.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn heading_error_wraps() {
        let g = vec![vec![[0.0, 0.0, 3.1]]];
        let p = vec![vec![[0.0, 0.0, -3.1]]];
        let c = error_curves(&p, &g).unwrap();
        assert!((c.e_a[0] - (2.0 * std::f64::consts::PI - 6.2)).abs() < 1e-12);
    }

    #[test]
    fn horizon_mismatch_is_an_error() {
        assert!(error_curves(&[vec![[0.0; 3]; 2]], &[vec![[0.0; 3]; 3]]).is_err());
        assert!(error_curves(&[], &[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let c = ErrorCurves { e_p: vec![0.5, 1.0], ci_p: vec![0.1, 0.2], e_a: vec![0.0, 0.1], ci_a: vec![0.0, 0.0], samples: 3 };
        let r = AblationReport { samples: 3, variants: vec![("full".into(), c.clone()), ("ekf".into(), c)] };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,full_e_p,full_ci_p,full_e_a,full_ci_a,ekf_e_p,ekf_ci_p,ekf_e_a,ekf_ci_a");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,1,0.2,"));
    }
}

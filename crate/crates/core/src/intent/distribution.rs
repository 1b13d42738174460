//! Turning raw scores into a probability vector over spot and lane intents.

use serde::{Deserialize, Serialize};

use super::candidates::CandidateSet;
use crate::error::{Error, Result};

/// Probabilities over spots then lanes. `candidates` is empty when the distribution
/// was assembled from bare scores.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IntentDistribution {
    pub p_s: Vec<f64>,
    pub p_d: Vec<f64>,
    pub candidates: CandidateSet,
    /// Every score was zero and the uniform distribution was used instead.
    pub uniform_fallback: bool,
    /// No lane exit existed; the bypass mass was spread over the spots.
    pub bypass_redistributed: bool,
}

impl IntentDistribution {
    pub fn len(&self) -> usize {
        self.p_s.len() + self.p_d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spots first, then lanes.
    pub fn probs(&self) -> Vec<f64> {
        self.p_s.iter().chain(&self.p_d).copied().collect()
    }

    pub fn get(&self, combined: usize) -> Option<f64> {
        if combined < self.p_s.len() {
            self.p_s.get(combined).copied()
        } else {
            self.p_d.get(combined - self.p_s.len()).copied()
        }
    }

    /// Total probability of not choosing any visible spot.
    pub fn bypass(&self) -> f64 {
        self.p_d.iter().sum()
    }

    /// Attaches the candidates the probabilities refer to.
    pub fn with_candidates(mut self, candidates: CandidateSet) -> Result<Self> {
        if candidates.spots.len() != self.p_s.len() || candidates.lanes.len() != self.p_d.len() {
            return Err(Error::InvalidInput(format!(
                "distribution over {}+{} intents cannot describe {}+{} candidates",
                self.p_s.len(),
                self.p_d.len(),
                candidates.spots.len(),
                candidates.lanes.len()
            )));
        }
        self.candidates = candidates;
        Ok(self)
    }
}

fn check_nonneg(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        Some(x) => Err(Error::InvalidInput(format!("{what} must be finite and non-negative, got {x}"))),
        None => Ok(()),
    }
}

/// Normalizes `scores = [ŝ_bypass, ŝ_spot_1, …]` and splits the bypass share over the
/// lanes in proportion to `lane_weights`.
///
/// With no lanes the bypass share is folded back into the spots proportionally. If all
/// relevant scores are zero the result is uniform and `uniform_fallback` is set.
pub fn assemble(scores: &[f64], lane_weights: &[f64]) -> Result<IntentDistribution> {
    let Some((&bypass, spots)) = scores.split_first() else {
        return Err(Error::InvalidInput("assemble needs at least the bypass score".into()));
    };
    check_nonneg("scores", scores)?;
    check_nonneg("lane weights", lane_weights)?;
    let (ms, md) = (spots.len(), lane_weights.len());
    if ms + md == 0 {
        return Err(Error::EmptyCandidates);
    }
    let mut out = IntentDistribution::default();

    if md == 0 {
        out.bypass_redistributed = true;
        let total: f64 = spots.iter().sum();
        if total > 0.0 {
            out.p_s = spots.iter().map(|s| s / total).collect();
        } else {
            out.uniform_fallback = true;
            out.p_s = vec![1.0 / ms as f64; ms];
        }
        return Ok(out);
    }

    let total = bypass + spots.iter().sum::<f64>();
    let p_bypass = if total > 0.0 {
        out.p_s = spots.iter().map(|s| s / total).collect();
        bypass / total
    } else {
        out.uniform_fallback = true;
        let m = (ms + md) as f64;
        out.p_s = vec![1.0 / m; ms];
        md as f64 / m
    };
    let wsum: f64 = lane_weights.iter().sum();
    out.p_d = if wsum > 0.0 {
        lane_weights.iter().map(|w| w / wsum * p_bypass).collect()
    } else {
        out.uniform_fallback = true;
        vec![p_bypass / md as f64; md]
    };
    Ok(out)
}

/// Combined indices of the `k` most probable intents, most probable first; ties go to
/// the lower index.
pub fn top_k_intents(dist: &IntentDistribution, k: usize) -> Result<Vec<usize>> {
    top_k_indices(&dist.probs(), k)
}

pub fn top_k_indices(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_spot_even_split() {
        let d = assemble(&[0.5, 0.5], &[1.0]).unwrap();
        assert_eq!(d.p_s, vec![0.5]);
        assert_eq!(d.p_d, vec![0.5]);
    }

    #[test]
    fn single_lane_takes_bypass_exactly() {
        let d = assemble(&[0.25, 0.5, 0.25], &[0.7]).unwrap();
        assert_eq!(d.p_d[0], 0.25);
    }

    #[test]
    fn lane_split_follows_weights() {
        let d = assemble(&[0.5, 0.5], &[1.0, 0.5]).unwrap();
        assert!((d.p_d[0] - 0.5 * 2.0 / 3.0).abs() < 1e-15);
        assert!((d.p_d[1] - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_lanes_redistributes_over_spots() {
        let d = assemble(&[0.9, 0.2, 0.6], &[]).unwrap();
        assert!(d.bypass_redistributed);
        assert!((d.p_s[0] - 0.25).abs() < 1e-15 && (d.p_s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn all_zero_scores_fall_back_to_uniform() {
        let d = assemble(&[0.0, 0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(d.uniform_fallback);
        assert!(d.probs().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rejects_negative_scores_and_empty_sets() {
        assert!(assemble(&[-0.1, 0.5], &[1.0]).is_err());
        assert!(matches!(assemble(&[0.4], &[]), Err(Error::EmptyCandidates)));
        assert!(assemble(&[], &[1.0]).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k_indices(&[0.2, 0.5, 0.3], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.25, 0.25, 0.5], 3).unwrap(), vec![2, 0, 1]);
        assert_eq!(top_k_indices(&[0.5, 0.5], 9).unwrap(), vec![0, 1]);
        assert!(top_k_indices(&[1.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn top_k_agrees_with_full_sort(p in proptest::collection::vec(0.0f64..1.0, 1..12), k in 1usize..14) {
            let got = top_k_indices(&p, k).unwrap();
            let mut all: Vec<(f64, usize)> = p.iter().copied().zip(0..).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn output_is_on_simplex(
            s in proptest::collection::vec(0.0f64..1.0, 1..10),
            w in proptest::collection::vec(0.0f64..1.0, 0..5),
        ) {
            prop_assume!(s.len() > 1 || !w.is_empty());
            let d = assemble(&s, &w).unwrap();
            prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

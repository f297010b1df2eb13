use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ScoredSnippet;
use crate::corpus::SnippetRef;
use crate::error::{Error, Result};
use crate::metrics::Prf;

/// Number of candidate thresholds tried during calibration.
pub const GRID_POINTS: usize = 201;

/// One validation instance: every candidate with its score, plus gold refs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance_id: String,
    pub ranked: Vec<ScoredSnippet>,
    pub gold: BTreeSet<SnippetRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    /// Validation instance-level F1 at `threshold`.
    pub f1: f64,
    /// Every (threshold, F1) tried, ascending by threshold.
    pub grid: Vec<(f64, f64)>,
}

/// `points` evenly spaced quantiles (linear interpolation between order
/// statistics) of `scores`, ascending, duplicates removed.
pub fn quantile_grid(scores: &[f64], points: usize) -> Vec<f64> {
    if scores.is_empty() || points == 0 {
        return Vec::new();
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    let mut grid: Vec<f64> = (0..points)
        .map(|i| {
            let q = if points == 1 { 0.0 } else { i as f64 / (points - 1) as f64 };
            let pos = q * last;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            if lo == hi {
                sorted[lo]
            } else {
                sorted[lo] + (sorted[hi] - sorted[lo]) * frac
            }
        })
        .collect();
    grid.dedup();
    grid
}

/// Macro F1 over instances with gold, selecting `score >= threshold`.
fn instance_f1(instances: &[&ScoredInstance], threshold: f64) -> f64 {
    let total: f64 = instances
        .iter()
        .map(|inst| {
            let selected: Vec<&ScoredSnippet> = inst.ranked.iter().filter(|s| s.score >= threshold).collect();
            let hits = selected.iter().filter(|s| inst.gold.contains(&s.snippet_ref)).count();
            Prf::from_counts(hits, selected.len(), inst.gold.len()).f1
        })
        .sum();
    total / instances.len() as f64
}

/// Picks the grid threshold with the best validation instance-level F1;
/// ties go to the lower threshold.
pub fn calibrate_threshold(validation: &[ScoredInstance]) -> Result<Calibration> {
    let usable: Vec<&ScoredInstance> = validation.iter().filter(|i| !i.gold.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Precondition(
            "threshold calibration needs validation instances with gold snippets".into(),
        ));
    }
    let scores: Vec<f64> = usable
        .iter()
        .flat_map(|i| i.ranked.iter().map(|s| s.score))
        .collect();
    if scores.is_empty() {
        return Err(Error::Precondition("validation instances have no candidates".into()));
    }
    let grid: Vec<(f64, f64)> = quantile_grid(&scores, GRID_POINTS)
        .into_iter()
        .map(|t| (t, instance_f1(&usable, t)))
        .collect();
    let (threshold, f1) = grid
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, (t, f)| match best {
            Some((_, bf)) if bf >= f => best,
            _ => Some((t, f)),
        })
        .expect("grid is non-empty");
    Ok(Calibration { threshold, f1, grid })
}

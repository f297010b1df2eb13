use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    /// Precision and recall from a true-positive count; an empty prediction
    /// (or empty gold) side contributes 0.
    pub fn from_counts(true_positives: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Prf::new(ratio(true_positives, predicted), ratio(true_positives, gold))
    }

    pub const PERFECT: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };
}

/// Macro-averaged PRF. Instances with an empty gold set are excluded from
/// `prf`; `with_empty_gold` instead scores them 1 when the prediction is also
/// empty and 0 otherwise, so both conventions are available.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InstancePrf {
    pub prf: Prf,
    pub with_empty_gold: Prf,
    pub evaluated: usize,
    pub excluded_empty_gold: usize,
}

fn overlap<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> usize {
    a.intersection(b).count()
}

fn mean_prf(items: &[Prf]) -> Prf {
    if items.is_empty() {
        return Prf::default();
    }
    let n = items.len() as f64;
    Prf {
        precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
    }
}

pub fn instance_prf<T: Ord>(predictions: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> InstancePrf {
    assert_eq!(predictions.len(), gold.len(), "predictions and gold must align");
    let mut scored = Vec::with_capacity(gold.len());
    let mut all = Vec::with_capacity(gold.len());
    for (p, g) in predictions.iter().zip(gold) {
        if g.is_empty() {
            all.push(if p.is_empty() { Prf::PERFECT } else { Prf::default() });
            continue;
        }
        let prf = Prf::from_counts(overlap(p, g), p.len(), g.len());
        scored.push(prf);
        all.push(prf);
    }
    let excluded = gold.len() - scored.len();
    if excluded > 0 {
        log::info!("instance PRF: {excluded} empty-gold instances excluded");
    }
    InstancePrf {
        prf: mean_prf(&scored),
        with_empty_gold: mean_prf(&all),
        evaluated: scored.len(),
        excluded_empty_gold: excluded,
    }
}

/// Micro PRF over every (instance, snippet) pair.
pub fn snippet_prf<T: Ord>(predictions: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Prf {
    assert_eq!(predictions.len(), gold.len(), "predictions and gold must align");
    let (mut tp, mut pred, mut gold_n) = (0, 0, 0);
    for (p, g) in predictions.iter().zip(gold) {
        tp += overlap(p, g);
        pred += p.len();
        gold_n += g.len();
    }
    Prf::from_counts(tp, pred, gold_n)
}

/// Binary classification scores, positive class = `true`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn classification_scores(pairs: impl IntoIterator<Item = (bool, bool)>) -> ClassificationScores {
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (predicted, gold) in pairs {
        match (predicted, gold) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = tp + tn + fp + fn_;
    let prf = Prf::from_counts(tp, tp + fp, tp + fn_);
    ClassificationScores {
        accuracy: if n == 0 { 0.0 } else { (tp + tn) as f64 / n as f64 },
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn perfect() {
        let g = vec![set(&[1, 2]), set(&[3])];
        let r = instance_prf(&g, &g);
        assert_eq!(r.prf, Prf::PERFECT);
        assert_eq!(snippet_prf(&g, &g), Prf::PERFECT);
    }

    #[test]
    fn one_perfect_one_wrong() {
        let pred = vec![set(&[1]), set(&[9])];
        let gold = vec![set(&[1]), set(&[2])];
        assert!((instance_prf(&pred, &gold).prf.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn snippet_level_toy() {
        // 3 gold pairs; predict 2 correct + 2 spurious
        let pred = vec![set(&[1, 2, 8]), set(&[9])];
        let gold = vec![set(&[1, 2, 3]), set(&[])];
        let p = snippet_prf(&pred, &gold);
        assert!((p.precision - 0.5).abs() < 1e-12);
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_gold_conventions() {
        let pred = vec![set(&[1]), set(&[])];
        let gold = vec![set(&[1]), set(&[])];
        let r = instance_prf(&pred, &gold);
        assert_eq!(r.evaluated, 1);
        assert_eq!(r.excluded_empty_gold, 1);
        assert_eq!(r.prf, Prf::PERFECT);
        assert_eq!(r.with_empty_gold, Prf::PERFECT);
    }

    #[test]
    fn classification() {
        let all_right = classification_scores([(true, true), (false, false)]);
        assert_eq!((all_right.accuracy, all_right.precision, all_right.recall, all_right.f1), (1.0, 1.0, 1.0, 1.0));
        let all_negative = classification_scores([(false, true), (false, true)]);
        assert_eq!((all_negative.accuracy, all_negative.recall), (0.0, 0.0));
    }
}

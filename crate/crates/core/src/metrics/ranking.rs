use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Average precision of one ranking: the mean, over gold items, of the
/// precision at the rank where each is retrieved. Gold items missing from
/// the ranking contribute 0. `None` when there is no gold item.
pub fn average_precision<T: Ord>(ranking: &[T], gold: &BTreeSet<T>) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, item) in ranking.iter().enumerate() {
        if gold.contains(item) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MapSummary {
    pub map: f64,
    pub evaluated: usize,
    pub excluded_empty_gold: usize,
}

/// Mean of [`average_precision`] over instances that have gold items.
pub fn mean_average_precision<T: Ord>(rankings: &[Vec<T>], gold: &[BTreeSet<T>]) -> MapSummary {
    assert_eq!(rankings.len(), gold.len(), "rankings and gold must align");
    let aps: Vec<f64> = rankings
        .iter()
        .zip(gold)
        .filter_map(|(r, g)| average_precision(r, g))
        .collect();
    let excluded = gold.len() - aps.len();
    if excluded > 0 {
        log::info!("mAP: {excluded} empty-gold instances excluded");
    }
    MapSummary {
        map: if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        },
        evaluated: aps.len(),
        excluded_empty_gold: excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gold_first_is_perfect() {
        let gold: BTreeSet<_> = [1, 2].into();
        assert_eq!(average_precision(&[2, 1, 3, 4], &gold), Some(1.0));
    }

    #[test]
    fn gold_non_gold() {
        let gold: BTreeSet<_> = ["a", "c"].into();
        let ap = average_precision(&["a", "b", "c"], &gold).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_gold_counts_zero() {
        let gold: BTreeSet<_> = [1, 5].into();
        assert_eq!(average_precision(&[1, 2], &gold), Some(0.5));
    }

    #[test]
    fn empty_gold_excluded() {
        let s = mean_average_precision(&[vec![1], vec![2]], &[[1].into(), BTreeSet::new()]);
        assert_eq!(s.map, 1.0);
        assert_eq!(s.excluded_empty_gold, 1);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{FreezeMask, ImportanceMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionCriterion {
    /// Freeze every scalar with score `>= θ`.
    Threshold(f64),
    /// Choose θ so that at least a fraction `ρ` of scalars is frozen.
    TopFraction(f64),
}

/// Upper nearest-rank `(1 − ρ)` quantile: the `⌈ρN⌉`-th largest score.
///
/// `ρ = 0` maps to `+∞` so that nothing is frozen. Ties at θ are frozen too,
/// so the realised core fraction may exceed ρ by the tie mass.
pub fn top_fraction_threshold(scores: &[f64], rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("core fraction {rho} outside [0, 1]")));
    }
    let k = (rho * scores.len() as f64).ceil() as usize;
    if k == 0 {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[k - 1])
}

pub fn partition(imap: &ImportanceMap, criterion: PartitionCriterion) -> Result<FreezeMask> {
    let threshold = match criterion {
        PartitionCriterion::Threshold(t) => {
            if t.is_nan() {
                return Err(Error::Config("threshold is NaN".into()));
            }
            t
        }
        PartitionCriterion::TopFraction(rho) => top_fraction_threshold(&imap.all_scores(), rho)?,
    };
    Ok(FreezeMask::new(
        threshold,
        imap.iter()
            .map(|(id, s)| (id.to_string(), s.iter().map(|&x| x >= threshold).collect())),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::EstimatorKind;

    fn map(scores: Vec<f64>) -> ImportanceMap {
        ImportanceMap::new(EstimatorKind::Gradient, 1, [("p".to_string(), scores)]).unwrap()
    }

    #[test]
    fn threshold_rule() {
        let m = partition(&map(vec![0.1, 0.5, 0.9]), PartitionCriterion::Threshold(0.5)).unwrap();
        assert_eq!(m.get("p").unwrap(), &[false, true, true]);
        assert!((m.core_fraction() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_fractions() {
        let scores = map(vec![0.3, 0.3, 0.0, 2.0]);
        let none = partition(&scores, PartitionCriterion::TopFraction(0.0)).unwrap();
        assert_eq!(none.core_count(), 0);
        let all = partition(&scores, PartitionCriterion::TopFraction(1.0)).unwrap();
        assert_eq!(all.core_count(), 4);
        assert_eq!(all.core_fraction(), 1.0);
    }

    #[test]
    fn out_of_range_fraction() {
        assert!(matches!(
            partition(&map(vec![1.0]), PartitionCriterion::TopFraction(1.3)),
            Err(Error::Config(_))
        ));
        assert!(partition(&map(vec![1.0]), PartitionCriterion::TopFraction(-0.1)).is_err());
    }

    #[test]
    fn ties_are_frozen() {
        let m = partition(&map(vec![1.0, 1.0, 1.0, 0.5]), PartitionCriterion::TopFraction(0.25)).unwrap();
        assert_eq!(m.threshold(), 1.0);
        assert_eq!(m.core_count(), 3);
    }
}

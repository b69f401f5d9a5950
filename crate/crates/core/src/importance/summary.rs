use serde::Serialize;

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::model::ParameterRegistry;

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub param_id: String,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceSummary {
    pub layers: Vec<LayerStats>,
    pub overall: LayerStats,
    pub histogram: Histogram,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn stats(param_id: &str, scores: &[f64]) -> LayerStats {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    LayerStats {
        param_id: param_id.to_string(),
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        min: sorted[0],
        q25: quantile(&sorted, 0.25),
        q50: quantile(&sorted, 0.5),
        q75: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    }
}

fn histogram(scores: &[f64], min: f64, max: f64) -> Histogram {
    let width = (max - min) / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS)
        .map(|i| if i == HISTOGRAM_BINS { max } else { min + width * i as f64 })
        .collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    for &s in scores {
        let bin = if width > 0.0 {
            (((s - min) / width) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    Histogram { edges, counts }
}

/// Per-parameter and overall score distribution.
pub fn importance_summary(imap: &ImportanceMap) -> Result<ImportanceSummary> {
    let all = imap.all_scores();
    if all.is_empty() {
        return Err(Error::Contract("importance map has no scores".into()));
    }
    let layers = imap
        .iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(id, s)| stats(id, s))
        .collect();
    let overall = stats("*", &all);
    let histogram = histogram(&all, overall.min, overall.max);
    Ok(ImportanceSummary {
        layers,
        overall,
        histogram,
    })
}

/// One exported slice of a parameter's scores: a matrix row, or a whole vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub param_id: String,
    pub offset_start: usize,
    pub offset_end: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn importance_rows(imap: &ImportanceMap, registry: &ParameterRegistry) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for (id, scores) in imap.iter() {
        let tensor = registry
            .get(id)
            .ok_or_else(|| Error::Contract(format!("importance entry {id} not in registry")))?;
        let chunk = tensor.dims2().map_or(scores.len(), |(_, c)| c).max(1);
        for (i, c) in scores.chunks(chunk).enumerate() {
            rows.push(ScoreRow {
                param_id: id.to_string(),
                offset_start: i * chunk,
                offset_end: i * chunk + c.len(),
                mean: c.iter().sum::<f64>() / c.len() as f64,
                min: c.iter().copied().fold(f64::INFINITY, f64::min),
                max: c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::EstimatorKind;

    fn map(entries: Vec<(&str, Vec<f64>)>) -> ImportanceMap {
        ImportanceMap::new(
            EstimatorKind::Gradient,
            1,
            entries.into_iter().map(|(k, v)| (k.to_string(), v)),
        )
        .unwrap()
    }

    #[test]
    fn uniform_scores_have_equal_quantiles() {
        let s = importance_summary(&map(vec![("a", vec![0.4; 7]), ("b", vec![0.4; 3])])).unwrap();
        let o = &s.overall;
        assert!([o.min, o.q25, o.q50, o.q75, o.max].iter().all(|&q| q == 0.4));
        assert_eq!(s.histogram.counts[0], 10);
    }

    #[test]
    fn four_value_quantiles() {
        let s = importance_summary(&map(vec![("a", vec![4.0, 1.0, 3.0, 2.0])])).unwrap();
        let l = &s.layers[0];
        assert_eq!((l.min, l.q25, l.q50, l.q75, l.max), (1.0, 1.75, 2.5, 3.25, 4.0));
        assert_eq!(l.mean, 2.5);
    }

    #[test]
    fn totals_sum_to_n() {
        let s = importance_summary(&map(vec![("a", vec![0.0, 0.1, 0.9, 1.0]), ("b", vec![0.5; 6])])).unwrap();
        assert_eq!(s.histogram.counts.iter().sum::<usize>(), 10);
        assert_eq!(s.layers.iter().map(|l| l.count).sum::<usize>(), 10);
        assert_eq!(s.histogram.counts[HISTOGRAM_BINS - 1], 2);
    }
}

//! Confusion counts, the derived percentages, layer ranking and reports.
//!
//! A metric whose denominator is zero is undefined and carried as `None`
//! (`null` in JSON) rather than as zero, so it cannot inflate an average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel counts with "changed" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    /// Counts from boolean predictions and truths.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (pred, truth) in pairs {
            match (pred, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

/// Compares a binary prediction with a 0/1 truth map of the same size.
pub fn confusion(pred: &Tensor, truth: &Tensor) -> Result<ConfusionCounts> {
    let spatial = |t: &Tensor| -> Vec<usize> {
        match t.shape() {
            [1, h, w] | [h, w] => vec![*h, *w],
            s => s.to_vec(),
        }
    };
    if spatial(pred) != spatial(truth) || pred.ndim() < 2 {
        return Err(Error::shape(format!(
            "prediction {:?} and truth {:?} differ in size",
            pred.shape(),
            truth.shape()
        )));
    }
    for (name, t) in [("prediction", pred), ("truth", truth)] {
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data(format!("{name} values must be 0 or 1")));
        }
    }
    Ok(ConfusionCounts::from_pairs(
        pred.data().iter().zip(truth.data()).map(|(&p, &t)| (p == 1.0, t == 1.0)),
    ))
}

/// Percentages; `None` where undefined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub average_accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// F1 in percent from sensitivity and precision in percent.
pub fn f1_from(sensitivity: f64, precision: f64) -> Option<f64> {
    let s = sensitivity + precision;
    (s > 0.0).then(|| 2.0 * sensitivity * precision / s)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = match (sensitivity, precision) {
        (Some(s), Some(p)) => f1_from(s, p),
        _ => None,
    };
    let average_accuracy = match (sensitivity, specificity) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ => None,
    };
    Metrics {
        sensitivity,
        specificity,
        precision,
        f1,
        average_accuracy,
    }
}

/// Mean AA of one feature layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub mean_aa: Option<f64>,
}

/// Picks the layer with the highest mean AA; ties go to the shallower layer.
/// Layers whose AA is undefined are never selected.
pub fn rank_layers(results: &[LayerScore]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in results {
        let Some(aa) = r.mean_aa else { continue };
        best = match best {
            Some((l, b)) if b > aa || (b == aa && l < r.layer) => Some((l, b)),
            _ => Some((r.layer, aa)),
        };
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::data("no layer has a defined average accuracy"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// How `aggregate` combines pairs; always "micro" (pooled counts).
    pub aggregation: String,
    pub per_pair: Vec<PairReport>,
    pub aggregate: Metrics,
    pub aggregate_counts: ConfusionCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_layer: Vec<LayerScore>,
}

impl Report {
    pub fn from_pairs(per_pair: Vec<(String, ConfusionCounts)>) -> Self {
        let mut pooled = ConfusionCounts::default();
        let per_pair = per_pair
            .into_iter()
            .map(|(id, counts)| {
                pooled.add(&counts);
                PairReport {
                    id,
                    metrics: metrics(&counts),
                    counts,
                }
            })
            .collect();
        Report {
            aggregation: "micro".into(),
            per_pair,
            aggregate: metrics(&pooled),
            aggregate_counts: pooled,
            per_layer: Vec::new(),
        }
    }
}

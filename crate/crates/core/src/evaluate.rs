//! Held-out evaluation: accuracy, balanced accuracy and the equalized odds
//! difference across sensitive groups.
//!
//! EOD here is the largest gap, over true- and false-positive rates, between
//! the best and worst sensitive group. Groups with no positives (or no
//! negatives) do not contribute to the corresponding rate.

use serde::Serialize;

use crate::model::{FeatureKind, FeatureSchema, NeuralNet};
use crate::solve::CertificationResult;

/// Scores at or above this value predict the positive class.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub eod: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_certified: Option<CertificationResult>,
}

/// Group id of every row: the active level of the first sensitive categorical
/// group, else the first sensitive continuous column split at 0.5. Rows all
/// fall into group 0 when nothing is sensitive.
pub fn sensitive_groups(x: &[Vec<f64>], schema: &FeatureSchema) -> Vec<usize> {
    let sensitive = schema.sensitive_indices();
    let group = schema
        .groups()
        .into_iter()
        .find(|(_, cols)| cols.iter().all(|c| sensitive.contains(c)));
    if let Some((_, cols)) = group {
        return x
            .iter()
            .map(|row| {
                let mut best = 0;
                for (k, &c) in cols.iter().enumerate() {
                    if row[c] > row[cols[best]] {
                        best = k;
                    }
                }
                best
            })
            .collect();
    }
    let continuous = sensitive
        .into_iter()
        .find(|&i| matches!(schema.features()[i].kind, FeatureKind::Continuous { .. }));
    match continuous {
        Some(c) => x.iter().map(|row| usize::from(row[c] >= 0.5)).collect(),
        None => vec![0; x.len()],
    }
}

fn rate(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Metrics of hard predictions against binary labels.
pub fn classification_report(pred: &[bool], labels: &[bool], groups: &[usize]) -> EvalReport {
    let n = pred.len();
    let mut tp = 0;
    let mut tn = 0;
    let mut pos = 0;
    for (&p, &y) in pred.iter().zip(labels) {
        if y {
            pos += 1;
            tp += usize::from(p);
        } else {
            tn += usize::from(!p);
        }
    }
    let neg = n - pos;
    let recalls: Vec<f64> = [rate(tp, pos), rate(tn, neg)].into_iter().flatten().collect();
    let balanced = if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    };

    let k = groups.iter().copied().max().map_or(0, |g| g + 1);
    // per group: [tp, positives, fp, negatives]
    let mut counts = vec![[0usize; 4]; k];
    for ((&p, &y), &g) in pred.iter().zip(labels).zip(groups) {
        let c = &mut counts[g];
        if y {
            c[1] += 1;
            c[0] += usize::from(p);
        } else {
            c[3] += 1;
            c[2] += usize::from(p);
        }
    }
    let spread = |rates: Vec<f64>| {
        if rates.len() < 2 {
            return 0.0;
        }
        let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    let tpr = spread(counts.iter().filter_map(|c| rate(c[0], c[1])).collect());
    let fpr = spread(counts.iter().filter_map(|c| rate(c[2], c[3])).collect());

    EvalReport {
        n,
        accuracy: if n == 0 { 0.0 } else { (tp + tn) as f64 / n as f64 },
        balanced_accuracy: balanced,
        eod: tpr.max(fpr),
        delta_certified: None,
    }
}

/// Scores every row with the network and compares against `labels` (0/1).
pub fn evaluate(net: &NeuralNet, x: &[Vec<f64>], labels: &[f64], schema: &FeatureSchema) -> crate::Result<EvalReport> {
    let pred = x
        .iter()
        .map(|row| net.forward(row).map(|s| s >= DECISION_THRESHOLD))
        .collect::<Result<Vec<bool>, _>>()?;
    let labels: Vec<bool> = labels.iter().map(|&y| y >= DECISION_THRESHOLD).collect();
    Ok(classification_report(&pred, &labels, &sensitive_groups(x, schema)))
}

//! Ranking metrics for binary and one-vs-rest multiclass scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Labels;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredExamples {
    scores: Vec<f64>,
    labels: Vec<bool>,
    n_pos: usize,
    n_neg: usize,
}

impl ScoredExamples {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let n_pos = labels.iter().filter(|&&y| y).count();
        let n_neg = labels.len() - n_pos;
        Ok(ScoredExamples {
            scores,
            labels,
            n_pos,
            n_neg,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_neg(&self) -> usize {
        self.n_neg
    }

    pub fn has_both_classes(&self) -> bool {
        self.n_pos > 0 && self.n_neg > 0
    }

    fn require_both(&self) -> Result<()> {
        if self.has_both_classes() {
            Ok(())
        } else {
            Err(Error::SingleClass)
        }
    }
}

/// Ascending midranks (1-based) of `values`.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties counting 1/2.
pub fn auroc(s: &ScoredExamples) -> Result<f64> {
    s.require_both()?;
    let ranks = midranks(&s.scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(&s.labels)
        .filter(|(_, &y)| y)
        .map(|(r, _)| r)
        .sum();
    let np = s.n_pos as f64;
    let u = pos_rank_sum - np * (np + 1.0) / 2.0;
    Ok(u / (np * s.n_neg as f64))
}

/// Average precision: `Σ (R_i − R_{i−1}) · P_i` over distinct score thresholds,
/// visited from the highest score down.
pub fn auprc(s: &ScoredExamples) -> Result<f64> {
    s.require_both()?;
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut new_tp = 0;
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            if s.labels[order[j]] {
                new_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += new_tp;
        if new_tp > 0 {
            ap += (new_tp as f64 / s.n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

/// One column of scores against the membership of each example in that column.
fn columns(predictions: &Tensor, labels: &Labels) -> Result<Vec<ScoredExamples>> {
    let (n, c) = (predictions.rows(), predictions.cols());
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            n,
            labels.len()
        )));
    }
    (0..c)
        .map(|j| {
            let scores = (0..n).map(|i| predictions.row(i)[j]).collect();
            let ys = match labels {
                Labels::Classes(cls) => cls.iter().map(|&y| y == j).collect(),
                Labels::MultiHot(t) => (0..n).map(|i| t.row(i)[j] > 0.5).collect(),
            };
            ScoredExamples::new(scores, ys)
        })
        .collect()
}

/// One-vs-rest aggregate of `metric`. Under macro averaging, columns lacking
/// positives or negatives are skipped; `None` when no column is evaluable.
pub fn one_vs_rest(
    predictions: &Tensor,
    labels: &Labels,
    averaging: Averaging,
    metric: fn(&ScoredExamples) -> Result<f64>,
) -> Result<Option<f64>> {
    let cols = columns(predictions, labels)?;
    match averaging {
        Averaging::Macro => {
            let vals: Vec<f64> = cols
                .iter()
                .filter(|s| s.has_both_classes())
                .map(metric)
                .collect::<Result<_>>()?;
            Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
        }
        Averaging::Micro => {
            let mut scores = Vec::new();
            let mut ys = Vec::new();
            for s in cols {
                scores.extend_from_slice(&s.scores);
                ys.extend_from_slice(&s.labels);
            }
            let pooled = ScoredExamples::new(scores, ys)?;
            if pooled.has_both_classes() {
                metric(&pooled).map(Some)
            } else {
                Ok(None)
            }
        }
    }
}

/// Top-1 accuracy for class labels; elementwise accuracy at 0.5 for multi-hot labels.
pub fn accuracy(predictions: &Tensor, labels: &Labels) -> Result<f64> {
    let n = predictions.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            n,
            labels.len()
        )));
    }
    let hits = match labels {
        Labels::Classes(cls) => (0..n)
            .filter(|&i| {
                let row = predictions.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == cls[i]
            })
            .count() as f64,
        Labels::MultiHot(t) => {
            let total = t.len() as f64;
            let hit = predictions
                .data()
                .iter()
                .zip(t.data())
                .filter(|(&p, &y)| (p > 0.5) == (y > 0.5))
                .count() as f64;
            return Ok(hit / total);
        }
    };
    Ok(hits / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(scores: &[f64], labels: &[u8]) -> ScoredExamples {
        ScoredExamples::new(scores.to_vec(), labels.iter().map(|&y| y == 1).collect()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(
            auroc(&ex(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&ex(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(),
            0.75
        );
        assert_eq!(auroc(&ex(&[0.5; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
        assert!(matches!(
            auroc(&ex(&[0.1, 0.2], &[1, 1])),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(
            auprc(&ex(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(),
            1.0
        );
        let ap = auprc(&ex(&[0.9, 0.8, 0.7], &[1, 0, 1])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        for n in 2..8 {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let mut labels = vec![0u8; n];
            labels[n - 1] = 1;
            assert!((auprc(&ex(&scores, &labels)).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        }
        assert!(matches!(auprc(&ex(&[0.1], &[0])), Err(Error::SingleClass)));
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn macro_ovr_skips_absent_classes() {
        let p = Tensor::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.6, 0.3, 0.1],
        ])
        .unwrap();
        let y = Labels::Classes(vec![0, 1, 0]);
        // class 2 never occurs; classes 0 and 1 are perfectly ranked
        assert_eq!(
            one_vs_rest(&p, &y, Averaging::Macro, auroc).unwrap(),
            Some(1.0)
        );
        assert!(one_vs_rest(&p, &y, Averaging::Micro, auroc)
            .unwrap()
            .is_some());
        assert!((accuracy(&p, &y).unwrap() - 1.0).abs() < 1e-15);
    }
}

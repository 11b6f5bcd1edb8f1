//! Evaluation metrics for multi-label probabilities.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// 1-based ranks with tied scores sharing their mean rank.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
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

/// Area under the precision-recall curve by the trapezoid rule. The curve
/// starts at (recall 0, precision 1) and has one point per distinct score,
/// taken as a threshold from the highest down.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let r = tp as f64 / pos as f64;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    Some(area)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// `2 TP / (2 TP + FP + FN)`; `None` when that denominator is 0.
pub fn f1(c: Confusion) -> Option<f64> {
    let den = 2 * c.tp + c.fp + c.fn_;
    (den > 0).then(|| 2.0 * c.tp as f64 / den as f64)
}

/// Mean of sensitivity and specificity; `None` unless both classes occur.
pub fn balanced_accuracy(c: Confusion) -> Option<f64> {
    let (p, n) = (c.tp + c.fn_, c.tn + c.fp);
    if p == 0 || n == 0 {
        return None;
    }
    Some(0.5 * (c.tp as f64 / p as f64 + c.tn as f64 / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub auroc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub f1: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub auroc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub f1: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_label: Vec<LabelMetrics>,
    #[serde(rename = "macro")]
    pub macro_: MacroMetrics,
    /// Labels lacking a positive or a negative, left out of the macros.
    pub excluded: Vec<String>,
}

impl MetricReport {
    pub fn macro_auroc(&self) -> Option<f64> {
        self.macro_.auroc
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let width = self
            .per_label
            .iter()
            .map(|l| l.label.len())
            .chain(["label".len(), "macro".len()])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>6}",
            "label", "auroc", "auc_pr", "f1", "bal_acc", "pos"
        );
        for l in &self.per_label {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>6}",
                l.label,
                fmt(l.auroc),
                fmt(l.auc_pr),
                fmt(l.f1),
                fmt(l.balanced_accuracy),
                l.positives
            );
        }
        let m = &self.macro_;
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
            "macro",
            fmt(m.auroc),
            fmt(m.auc_pr),
            fmt(m.f1),
            fmt(m.balanced_accuracy)
        );
        s
    }
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = vals.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-label and macro metrics. `probs` and `labels` are row-major `N x L`;
/// unobserved labels are skipped per label.
pub fn metric_report(
    probs: &[Vec<f64>],
    labels: &[Vec<Option<bool>>],
    label_names: &[String],
    threshold: f64,
) -> Result<MetricReport> {
    if probs.len() != labels.len() {
        return Err(Error::structure(
            "metric_report",
            format!("{} prediction rows for {} label rows", probs.len(), labels.len()),
        ));
    }
    let l = label_names.len();
    if let Some(bad) = probs.iter().position(|r| r.len() != l) {
        return Err(Error::structure("metric_report", format!("prediction row {bad} width differs from {l} labels")));
    }
    if let Some(bad) = labels.iter().position(|r| r.len() != l) {
        return Err(Error::structure("metric_report", format!("label row {bad} width differs from {l} labels")));
    }
    let mut per_label = Vec::with_capacity(l);
    let mut excluded = Vec::new();
    for (k, name) in label_names.iter().enumerate() {
        let (mut s, mut y) = (Vec::new(), Vec::new());
        for (pr, lr) in probs.iter().zip(labels) {
            if let Some(v) = lr[k] {
                s.push(pr[k]);
                y.push(v);
            }
        }
        let positives = y.iter().filter(|&&v| v).count();
        let negatives = y.len() - positives;
        let both = positives > 0 && negatives > 0;
        if !both {
            excluded.push(name.clone());
        }
        let c = confusion(&s, &y, threshold);
        per_label.push(LabelMetrics {
            label: name.clone(),
            auroc: if both { auroc(&s, &y) } else { None },
            auc_pr: if both { auc_pr(&s, &y) } else { None },
            f1: if both { f1(c) } else { None },
            balanced_accuracy: if both { balanced_accuracy(c) } else { None },
            positives,
            negatives,
        });
    }
    let macro_ = MacroMetrics {
        auroc: mean(per_label.iter().filter_map(|m| m.auroc)),
        auc_pr: mean(per_label.iter().filter_map(|m| m.auc_pr)),
        f1: mean(per_label.iter().filter_map(|m| m.f1)),
        balanced_accuracy: mean(per_label.iter().filter_map(|m| m.balanced_accuracy)),
    };
    Ok(MetricReport {
        per_label,
        macro_,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]), Some(1.0));
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[true, false, true]), Some(0.5));
        assert_eq!(auroc(&[0.4; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn perfect_and_uninformative_reports() {
        let labels: Vec<Vec<Option<bool>>> = (0..6).map(|i| vec![Some(i % 2 == 0), Some(i < 2)]).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|r| r.iter().map(|y| if y.unwrap() { 1.0 } else { 0.0 }).collect())
            .collect();
        let rep = metric_report(&probs, &labels, &names, 0.5).unwrap();
        assert_eq!(rep.macro_.auroc, Some(1.0));
        assert_eq!(rep.macro_.auc_pr, Some(1.0));
        assert_eq!(rep.macro_.f1, Some(1.0));
        assert_eq!(rep.macro_.balanced_accuracy, Some(1.0));

        let half = vec![vec![0.5, 0.5]; 6];
        let balanced: Vec<Vec<Option<bool>>> = (0..6).map(|i| vec![Some(i % 2 == 0); 2]).collect();
        let rep = metric_report(&half, &balanced, &names, 0.5).unwrap();
        assert_eq!(rep.macro_.auroc, Some(0.5));
        assert_eq!(rep.macro_.balanced_accuracy, Some(0.5));
    }

    #[test]
    fn single_class_label_is_excluded() {
        let labels = vec![vec![Some(true), Some(false)], vec![Some(false), Some(false)]];
        let names = vec!["a".to_string(), "b".to_string()];
        let rep = metric_report(&[vec![0.9, 0.1], vec![0.2, 0.3]], &labels, &names, 0.5).unwrap();
        assert_eq!(rep.excluded, vec!["b".to_string()]);
        assert_eq!(rep.macro_.auroc, Some(1.0));
        assert!(rep.to_table().contains("macro"));
        let back: MetricReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn auc_pr_hand_value() {
        // Scores descending: 0.9(+) 0.8(-) 0.7(+) 0.6(-).
        // Points: (0,1) (0.5,1) (0.5,0.5) (1,2/3) (1,0.5).
        // Area: 0.5*1 + 0 + 0.5*(0.5+2/3)/2 + 0 = 0.5 + 0.291666...
        let v = auc_pr(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((v - (0.5 + 7.0 / 24.0)).abs() < 1e-15);
    }
}

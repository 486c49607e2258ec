//! Classification metrics: ROC curves with Mann-Whitney AUC, one-vs-rest
//! extraction from posterior fields, cross-entropy, and normalized binary
//! confusion matrices.

use crate::inference::PosteriorField;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need at least one positive and one negative label")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("scores and labels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("malformed metrics table: {0}")]
    BadTable(String),
}

/// ROC curve from a descending threshold sweep plus its area. The curve
/// starts at (0,0), ends at (1,1), and the area equals the Mann-Whitney
/// statistic with ties counted one half.
#[derive(Debug, Clone)]
pub struct RocResult {
    /// Sweep thresholds; leading sentinel above every score.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocResult, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }

    // Threshold sweep over unique scores, descending: predict positive at
    // score >= threshold.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        tpr.push(tp as f64 / n_pos as f64);
        fpr.push(fp as f64 / n_neg as f64);
    }

    // Mann-Whitney via average ranks (ascending), ties shared.
    let mut asc: Vec<usize> = (0..scores.len()).collect();
    asc.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut j = 0;
    while j < asc.len() {
        let mut k = j;
        while k < asc.len() && scores[asc[k]] == scores[asc[j]] {
            k += 1;
        }
        // 1-based ranks j+1 ..= k averaged across the tie group.
        let avg_rank = (j + 1 + k) as f64 / 2.0;
        for &idx in &asc[j..k] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        j = k;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    let auc = u / (n_pos as f64 * n_neg as f64);

    Ok(RocResult { thresholds, tpr, fpr, auc })
}

impl RocResult {
    /// Trapezoidal area under the swept curve; equals `auc` up to rounding.
    pub fn trapezoid_area(&self) -> f64 {
        let mut area = 0.0;
        for i in 1..self.fpr.len() {
            area += (self.fpr[i] - self.fpr[i - 1]) * (self.tpr[i] + self.tpr[i - 1]) / 2.0;
        }
        area
    }

    /// Largest TPR attainable at false-positive rate at most `max_fpr`.
    pub fn tpr_at_fpr(&self, max_fpr: f64) -> f64 {
        self.fpr
            .iter()
            .zip(&self.tpr)
            .filter(|(&f, _)| f <= max_fpr + 1e-12)
            .map(|(_, &t)| t)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for i in 0..self.fpr.len() {
            let _ = writeln!(out, "{},{},{}", self.thresholds[i], self.fpr[i], self.tpr[i]);
        }
        out
    }
}

/// One-vs-rest scores for `class` of `node`: the posterior probability of
/// that class at each truth point's location. Points whose cell is outside
/// the active set are excluded and counted.
pub fn one_vs_rest(
    q: &PosteriorField,
    node: usize,
    active_index: &[Option<usize>],
    truth: &[(usize, usize)],
    class: usize,
) -> (Vec<f64>, Vec<bool>, usize) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut excluded = 0usize;
    for &(cell, truth_class) in truth {
        match active_index.get(cell).copied().flatten() {
            Some(l) => {
                scores.push(q.row(node, l)[class]);
                labels.push(truth_class == class);
            }
            None => excluded += 1,
        }
    }
    (scores, labels, excluded)
}

/// Mean negative log-probability of the true class, probabilities clipped
/// at 1e-12.
pub fn cross_entropy<'a>(
    items: impl IntoIterator<Item = (&'a [f64], usize)>,
) -> Result<f64, EvalError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (probs, label) in items {
        total -= probs[label].max(1e-12).ln();
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(total / n as f64)
}

/// Row-normalized binary confusion matrix at a threshold: rows are the true
/// class (damaged first), columns the estimate (damaged first); a score at
/// or above the threshold estimates damaged.
pub fn confusion_binary(scores: &[f64], labels: &[bool], threshold: f64) -> [[f64; 2]; 2] {
    let mut counts = [[0.0f64; 2]; 2];
    for (&s, &l) in scores.iter().zip(labels) {
        let row = if l { 0 } else { 1 };
        let col = if s >= threshold { 0 } else { 1 };
        counts[row][col] += 1.0;
    }
    for row in &mut counts {
        let total = row[0] + row[1];
        if total > 0.0 {
            row[0] /= total;
            row[1] /= total;
        }
    }
    counts
}

/// Per-class evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub auc_posterior: f64,
    pub auc_prior: f64,
    pub cross_entropy: f64,
}

/// Evaluation of one node's posterior against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub node: String,
    pub per_class: Vec<ClassMetrics>,
    /// Binary damaged-vs-not confusion at `threshold` on `1 - p(state 0)`.
    pub confusion: [[f64; 2]; 2],
    pub threshold: f64,
    pub n_points: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub nodes: Vec<NodeReport>,
}

impl MetricsReport {
    /// Per-class table, one row per (node, class).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,class,auc_posterior,auc_prior,cross_entropy\n");
        for n in &self.nodes {
            for c in &n.per_class {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    n.node, c.class, c.auc_posterior, c.auc_prior, c.cross_entropy
                );
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricsReport, EvalError> {
        let mut report = MetricsReport::default();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "node,class,auc_posterior,auc_prior,cross_entropy" {
                    return Err(EvalError::BadTable(format!("bad header '{line}'")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(EvalError::BadTable(format!("bad row '{line}'")));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| EvalError::BadTable(format!("bad number '{s}'")))
            };
            let node_name = f[0].to_string();
            let row = ClassMetrics {
                class: f[1]
                    .parse()
                    .map_err(|_| EvalError::BadTable(format!("bad class '{}'", f[1])))?,
                auc_posterior: parse(f[2])?,
                auc_prior: parse(f[3])?,
                cross_entropy: parse(f[4])?,
            };
            match report.nodes.iter_mut().find(|n| n.node == node_name) {
                Some(n) => n.per_class.push(row),
                None => report.nodes.push(NodeReport {
                    node: node_name,
                    per_class: vec![row],
                    confusion: [[0.0; 2]; 2],
                    threshold: 0.5,
                    n_points: 0,
                    excluded: 0,
                }),
            }
        }
        Ok(report)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = writeln!(out, "[{}] points={} excluded={}", n.node, n.n_points, n.excluded);
            for c in &n.per_class {
                let _ = writeln!(
                    out,
                    "  class {}: auc_post={:.4} auc_prior={:.4} xent={:.4}",
                    c.class, c.auc_posterior, c.auc_prior, c.cross_entropy
                );
            }
            let _ = writeln!(
                out,
                "  confusion @ {:.2}: damaged-true [{:.4} {:.4}] undamaged-true [{:.4} {:.4}]",
                n.threshold,
                n.confusion[0][0],
                n.confusion[0][1],
                n.confusion[1][0],
                n.confusion[1][1]
            );
        }
        out
    }
}

//! Evaluation: confusion matrix, per-class precision/recall/F1, accuracy,
//! one-vs-rest ROC curves and their trapezoidal AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        ConfusionMatrix {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            n,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|j| self.get(c, j)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }

    /// Header of class names, then one labelled row per true class.
    pub fn to_csv(&self, classes: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for c in classes {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (i, c) in classes.iter().enumerate() {
            out.push_str(c);
            for j in 0..self.n {
                write!(out, ",{}", self.get(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(num_classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::invalid(format!(
                "label pair ({t}, {p}) out of range for {num_classes} classes"
            )));
        }
        m.counts[t * num_classes + p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A zero denominator was replaced by 0.0 somewhere in this row.
    pub degenerate: bool,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn precision_recall_f1(m: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..m.n)
        .map(|c| {
            let tp = m.get(c, c) as f64;
            let predicted = m.col_sum(c);
            let actual = m.row_sum(c);
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            ClassScores {
                precision,
                recall,
                f1: f1_score(precision, recall),
                degenerate: predicted == 0 || actual == 0 || precision + recall == 0.0,
            }
        })
        .collect()
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64> {
    match m.total() {
        0 => Err(Error::invalid("accuracy of an empty confusion matrix")),
        total => Ok(m.trace() as f64 / total as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` count as positive; the first point uses `+inf`.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold).unwrap();
        }
        out
    }
}

/// One-vs-rest ROC for `positive` using each sample's score for that class.
pub fn roc_curve<S: AsRef<[f64]>>(scores: &[S], truth: &[usize], positive: usize) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} score rows but {} labels",
            scores.len(),
            truth.len()
        )));
    }
    let mut ranked = Vec::with_capacity(scores.len());
    for (row, &t) in scores.iter().zip(truth) {
        let s = *row.as_ref().get(positive).ok_or_else(|| {
            Error::invalid(format!("score row lacks class {positive}"))
        })?;
        ranked.push((s, t == positive));
    }
    let pos = ranked.iter().filter(|r| r.1).count();
    let neg = ranked.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedCurve(format!(
            "class {positive} has {pos} positive and {neg} negative samples"
        )));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let threshold = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == threshold {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under TPR over FPR.
pub fn auc(curve: &RocCurve) -> Result<f64> {
    let pts = &curve.points;
    if pts.len() < 2 {
        return Err(Error::invalid("ROC curve needs at least two points"));
    }
    let mut area = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.fpr < a.fpr || b.tpr < a.tpr {
            return Err(Error::invalid("ROC curve is not monotone"));
        }
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
    }
    Ok(area)
}

/// Round half to even at `decimals` places, for table display.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let y = x * scale;
    let r = y.round();
    let r = if (y - y.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - y.signum()
    } else {
        r
    };
    r / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the test set lacks positives or negatives for the class.
    pub auc: Option<f64>,
    pub support: u64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Label for comparison tables, e.g. the architecture name.
    pub model: Option<String>,
    pub classes: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassReport>,
    pub accuracy: f64,
    /// Unweighted mean over classes.
    pub macro_avg: Aggregate,
    /// Mean weighted by true-class support.
    pub weighted: Aggregate,
}

// The JSON key for the macro aggregate is `macro`, a Rust keyword.
mod report_json {
    use super::*;

    #[derive(Serialize, Deserialize)]
    pub(super) struct Wire {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub model: Option<String>,
        pub classes: Vec<String>,
        pub confusion: Vec<Vec<u64>>,
        pub per_class: Vec<ClassReport>,
        pub accuracy: f64,
        #[serde(rename = "macro")]
        pub macro_avg: Aggregate,
        pub weighted: Aggregate,
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let wire = report_json::Wire {
            model: self.model.clone(),
            classes: self.classes.clone(),
            confusion: self.confusion.clone(),
            per_class: self.per_class.clone(),
            accuracy: self.accuracy,
            macro_avg: self.macro_avg.clone(),
            weighted: self.weighted.clone(),
        };
        serde_json::to_string_pretty(&wire).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: report_json::Wire = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("bad metrics report: {e}")))?;
        Ok(MetricsReport {
            model: w.model,
            classes: w.classes,
            confusion: w.confusion,
            per_class: w.per_class,
            accuracy: w.accuracy,
            macro_avg: w.macro_avg,
            weighted: w.weighted,
        })
    }
}

/// Full evaluation of probability rows against true labels.
pub fn evaluate(
    probabilities: &[Vec<f64>],
    truth: &[usize],
    classes: &[String],
) -> Result<(MetricsReport, Vec<Option<RocCurve>>)> {
    let n = classes.len();
    let predicted: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let m = confusion(truth, &predicted, n)?;
    let scores = precision_recall_f1(&m);
    let curves: Vec<Option<RocCurve>> = (0..n)
        .map(|c| match roc_curve(probabilities, truth, c) {
            Ok(curve) => Ok(Some(curve)),
            Err(Error::UndefinedCurve(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let aucs: Vec<Option<f64>> = curves
        .iter()
        .map(|c| c.as_ref().map(auc).transpose())
        .collect::<Result<_>>()?;

    let per_class: Vec<ClassReport> = scores
        .iter()
        .zip(&aucs)
        .enumerate()
        .map(|(c, (s, a))| ClassReport {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            auc: *a,
            support: m.row_sum(c),
            degenerate: s.degenerate,
        })
        .collect();

    let mean = |f: &dyn Fn(&ClassReport) -> f64| per_class.iter().map(f).sum::<f64>() / n.max(1) as f64;
    let total = m.total().max(1) as f64;
    let weighted_mean =
        |f: &dyn Fn(&ClassReport) -> f64| per_class.iter().map(|r| f(r) * r.support as f64).sum::<f64>() / total;
    let defined: Vec<(f64, u64)> = per_class
        .iter()
        .filter_map(|r| r.auc.map(|a| (a, r.support)))
        .collect();
    let macro_auc = (!defined.is_empty())
        .then(|| defined.iter().map(|d| d.0).sum::<f64>() / defined.len() as f64);
    let weighted_auc = {
        let w: u64 = defined.iter().map(|d| d.1).sum();
        (w > 0).then(|| defined.iter().map(|d| d.0 * d.1 as f64).sum::<f64>() / w as f64)
    };

    let report = MetricsReport {
        model: None,
        classes: classes.to_vec(),
        confusion: m.rows(),
        accuracy: accuracy(&m)?,
        macro_avg: Aggregate {
            precision: mean(&|r| r.precision),
            recall: mean(&|r| r.recall),
            f1: mean(&|r| r.f1),
            auc: macro_auc,
        },
        weighted: Aggregate {
            precision: weighted_mean(&|r| r.precision),
            recall: weighted_mean(&|r| r.recall),
            f1: weighted_mean(&|r| r.f1),
            auc: weighted_auc,
        },
        per_class,
    };
    Ok((report, curves))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

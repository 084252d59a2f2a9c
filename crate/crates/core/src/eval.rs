//! Confusion matrix, per-class and macro-averaged metrics, and the metrics
//! text file.

use std::fmt::Write as _;

use crate::scalar::Scalar;
use crate::stack::IntegratedModel;
use crate::transform::{GrayscaleImage, LabeledImage};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("{truth} labels but {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("malformed metrics file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Row sum: how many samples truly belong to `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Column sum: how many samples were predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch { truth: truth.len(), predicted: predicted.len() });
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        let class = t.max(p);
        if class >= classes {
            return Err(EvalError::ClassOutOfRange { class, classes });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// `num / den`, or 0 when the denominator is 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Unweighted means over every class of the matrix. Any zero denominator
/// makes that quantity 0.
pub fn macro_metrics(cm: &ConfusionMatrix) -> MacroMetrics {
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| {
            let tp = cm.true_positives(c) as f64;
            let precision = ratio(tp, cm.predicted(c) as f64);
            let recall = ratio(tp, cm.support(c) as f64);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            ClassMetrics { precision, recall, f1, support: cm.support(c) }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| ratio(per_class.iter().map(f).sum(), per_class.len() as f64);
    MacroMetrics {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MacroMetrics,
}

/// Scores a label/prediction pair set.
pub fn evaluate_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Evaluation, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let confusion = confusion_matrix(truth, predicted, classes)?;
    let metrics = macro_metrics(&confusion);
    Ok(Evaluation { confusion, metrics })
}

/// Runs the integrated model over `dataset` and scores it.
pub fn evaluate<T: Scalar>(model: &IntegratedModel<T>, dataset: &[LabeledImage]) -> Result<Evaluation, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let images: Vec<&GrayscaleImage> = dataset.iter().map(|r| &r.image).collect();
    let predicted: Vec<usize> = model.predict_batch(&images)?.into_iter().map(|p| p.class_id).collect();
    let truth: Vec<usize> = dataset.iter().map(|r| r.class_id as usize).collect();
    evaluate_predictions(&truth, &predicted, model.classes())
}

/// `key=value` lines followed by the confusion matrix, one row per line.
///
/// ```text
/// classes=N
/// macro_precision=…
/// macro_recall=…
/// macro_f1=…
/// class_<id>_precision=…   (and _recall, _f1, _support)
/// confusion
/// <N rows of N space-separated counts>
/// ```
pub fn format_metrics(eval: &Evaluation) -> String {
    let m = &eval.metrics;
    let mut s = String::new();
    writeln!(s, "classes={}", eval.confusion.classes()).unwrap();
    writeln!(s, "macro_precision={:.6}", m.macro_precision).unwrap();
    writeln!(s, "macro_recall={:.6}", m.macro_recall).unwrap();
    writeln!(s, "macro_f1={:.6}", m.macro_f1).unwrap();
    for (c, cm) in m.per_class.iter().enumerate() {
        writeln!(s, "class_{c}_precision={:.6}", cm.precision).unwrap();
        writeln!(s, "class_{c}_recall={:.6}", cm.recall).unwrap();
        writeln!(s, "class_{c}_f1={:.6}", cm.f1).unwrap();
        writeln!(s, "class_{c}_support={}", cm.support).unwrap();
    }
    s.push_str("confusion\n");
    for row in eval.confusion.rows() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        writeln!(s, "{}", cells.join(" ")).unwrap();
    }
    s
}

/// Reads back the `key=value` section and the confusion matrix.
pub fn parse_metrics(text: &str) -> Result<(Vec<(String, String)>, ConfusionMatrix), EvalError> {
    let mut lines = text.lines();
    let mut pairs = Vec::new();
    for line in lines.by_ref() {
        if line == "confusion" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| EvalError::Malformed(line.to_string()))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let counts = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(' ')
                .map(|c| c.parse::<u64>().map_err(|_| EvalError::Malformed(l.to_string())))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    if counts.iter().any(|r| r.len() != counts.len()) {
        return Err(EvalError::Malformed("confusion matrix is not square".into()));
    }
    Ok((pairs, ConfusionMatrix { counts }))
}

/// Human-readable per-class table with class names.
pub fn format_table(eval: &Evaluation, class_names: &[String]) -> String {
    let width = class_names.iter().map(String::len).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}\n", "class", "precision", "recall", "f1", "support");
    for (c, m) in eval.metrics.per_class.iter().enumerate() {
        let name = class_names.get(c).map_or("?", String::as_str);
        writeln!(s, "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}", m.precision, m.recall, m.f1, m.support).unwrap();
    }
    let m = &eval.metrics;
    writeln!(s, "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}", "macro", m.macro_precision, m.macro_recall, m.macro_f1, eval.confusion.total())
        .unwrap();
    s
}

//! Per-class segmentation metrics and their fold-wise aggregation.
//!
//! Images are scored over the full frame: target pixels outside the direct
//! parent (`-1`) count as negatives. Scores are averaged per fold first, then
//! summarized as mean and population standard deviation over the fold means.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::dataprep::HierTargetStack;
use crate::error::{Error, Result};
use crate::hierarchy::ClassTree;
use crate::model::Prediction;

pub const AVERAGE_ROW: &str = "Average";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Scoring of a class absent from both prediction and target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// Perfect score.
    #[default]
    One,
    /// Leave the image out of that class's averages.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// `None` only for an empty class under [`EmptyPolicy::Skip`].
    pub fn scores(&self, policy: EmptyPolicy) -> Option<Scores> {
        if self.is_empty() {
            return match policy {
                EmptyPolicy::One => Some(Scores {
                    iou: 1.0,
                    dice: 1.0,
                    precision: 1.0,
                    recall: 1.0,
                }),
                EmptyPolicy::Skip => None,
            };
        }
        Some(Scores {
            iou: ratio(self.tp, self.tp + self.fp + self.fn_),
            dice: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
        })
    }
}

pub fn confusion(pred: ArrayView2<bool>, target: ArrayView2<bool>) -> Confusion {
    assert_eq!(pred.dim(), target.dim(), "prediction and target shapes differ");
    let mut c = Confusion::default();
    Zip::from(&pred).and(&target).for_each(|&p, &t| match (p, t) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    c
}

/// Confusion counts of every tree class, in tree order.
pub fn evaluate_image(pred: &Prediction, targets: &HierTargetStack, tree: &ClassTree) -> Result<Vec<Confusion>> {
    if pred.levels.len() != targets.depth() {
        return Err(Error::Shape(format!(
            "prediction has {} levels, targets {}",
            pred.levels.len(),
            targets.depth()
        )));
    }
    let mut out = Vec::with_capacity(tree.len());
    for node in tree.nodes() {
        let (level, pos) = tree.position(&node.name).expect("node belongs to the tree");
        let p = &pred.levels[level];
        let t = targets.level(level);
        if p.dim() != t.dim() {
            return Err(Error::Shape(format!(
                "level {level}: prediction {:?}, targets {:?}",
                p.dim(),
                t.dim()
            )));
        }
        let target = t.index_axis(Axis(0), pos).mapv(|v| v == 1);
        out.push(confusion(p.index_axis(Axis(0), pos), target.view()));
    }
    Ok(out)
}

/// One image-class row of the per-image report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub fold: usize,
    pub class: String,
    pub confusion: Confusion,
    pub scores: Option<Scores>,
}

pub fn image_records(
    image_id: &str,
    fold: usize,
    counts: &[Confusion],
    tree: &ClassTree,
    policy: EmptyPolicy,
) -> Vec<ImageRecord> {
    tree.nodes()
        .iter()
        .zip(counts)
        .map(|(node, c)| ImageRecord {
            image_id: image_id.to_string(),
            fold,
            class: node.name.clone(),
            confusion: *c,
            scores: c.scores(policy),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Stat {
    if values.is_empty() {
        return Stat { mean: f64::NAN, std: f64::NAN };
    }
    let n = values.len() as f64;
    // Shifting by the first value keeps identical inputs exact.
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub iou: Stat,
    pub dice: Stat,
    pub precision: Stat,
    pub recall: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// One row per class in tree order, then the average row.
    pub rows: Vec<ClassSummary>,
    pub folds: usize,
    pub records: Vec<ImageRecord>,
}

fn mean_scores(scores: &[Scores]) -> Option<Scores> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(Scores {
        iou: scores.iter().map(|s| s.iou).sum::<f64>() / n,
        dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
    })
}

fn summarize(class: &str, per_fold: &[Scores]) -> ClassSummary {
    let pick = |f: fn(&Scores) -> f64| mean_std(&per_fold.iter().map(f).collect::<Vec<_>>());
    ClassSummary {
        class: class.to_string(),
        iou: pick(|s| s.iou),
        dice: pick(|s| s.dice),
        precision: pick(|s| s.precision),
        recall: pick(|s| s.recall),
    }
}

/// Per-fold class means, then mean ± std across folds. The average row is
/// the unweighted mean over classes, computed within each fold.
pub fn aggregate(records: Vec<ImageRecord>, class_names: &[String]) -> Result<MetricsReport> {
    let mut by_fold: BTreeMap<usize, BTreeMap<&str, Vec<Scores>>> = BTreeMap::new();
    for r in &records {
        let entry = by_fold.entry(r.fold).or_default().entry(r.class.as_str()).or_default();
        if let Some(s) = r.scores {
            entry.push(s);
        }
    }
    if by_fold.is_empty() {
        return Err(Error::Validation("no images to aggregate".into()));
    }
    let mut class_folds: Vec<Vec<Scores>> = vec![Vec::new(); class_names.len()];
    let mut average_folds = Vec::new();
    for (fold, classes) in &by_fold {
        let mut fold_class_means = Vec::new();
        for (i, name) in class_names.iter().enumerate() {
            if let Some(m) = classes.get(name.as_str()).and_then(|s| mean_scores(s)) {
                class_folds[i].push(m);
                fold_class_means.push(m);
            }
        }
        let avg = mean_scores(&fold_class_means)
            .ok_or_else(|| Error::Validation(format!("fold {fold} has no scored class")))?;
        average_folds.push(avg);
    }
    let mut rows: Vec<ClassSummary> = class_names
        .iter()
        .zip(&class_folds)
        .map(|(name, folds)| summarize(name, folds))
        .collect();
    rows.push(summarize(AVERAGE_ROW, &average_folds));
    Ok(MetricsReport {
        rows,
        folds: by_fold.len(),
        records,
    })
}

impl MetricsReport {
    pub fn row(&self, class: &str) -> Option<&ClassSummary> {
        self.rows.iter().find(|r| r.class == class)
    }

    pub fn average(&self) -> &ClassSummary {
        self.rows.last().expect("report has an average row")
    }

    /// One line per image and class.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("image_id,fold,class,tp,fp,fn,tn,iou,dice,precision,recall\n");
        for r in &self.records {
            let c = r.confusion;
            let scores = match r.scores {
                Some(s) => format!("{:.6},{:.6},{:.6},{:.6}", s.iou, s.dice, s.precision, s.recall),
                None => ",,,".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.image_id, r.fold, r.class, c.tp, c.fp, c.fn_, c.tn, scores
            );
        }
        out
    }

    /// Summary rows as CSV with mean and std columns.
    pub fn summary_csv(&self) -> String {
        let mut out =
            String::from("class,iou_mean,iou_std,dice_mean,dice_std,precision_mean,precision_std,recall_mean,recall_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.class,
                r.iou.mean,
                r.iou.std,
                r.dice.mean,
                r.dice.std,
                r.precision.mean,
                r.precision.std,
                r.recall.mean,
                r.recall.std
            );
        }
        out
    }

    /// Plain-text table with `mean (std)` cells.
    pub fn table(&self) -> String {
        let cell = |s: Stat| format!("{:.3} ({:.3})", s.mean, s.std);
        let width = self.rows.iter().map(|r| r.class.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<width$}  {:<13}  {:<13}  {:<13}  {:<13}\n",
            "Class", "IoU", "Dice", "Precision", "Recall"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<13}  {:<13}  {:<13}  {:<13}",
                r.class,
                cell(r.iou),
                cell(r.dice),
                cell(r.precision),
                cell(r.recall)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn masks(pred: &[u8], target: &[u8]) -> Confusion {
        let p = Array2::from_shape_vec((1, pred.len()), pred.iter().map(|&v| v == 1).collect()).unwrap();
        let t = Array2::from_shape_vec((1, target.len()), target.iter().map(|&v| v == 1).collect()).unwrap();
        confusion(p.view(), t.view())
    }

    #[test]
    fn count_examples() {
        let s = masks(&[1, 1, 0, 0], &[0, 1, 1, 0]).scores(EmptyPolicy::One).unwrap();
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((s.dice, s.precision, s.recall), (0.5, 0.5, 0.5));
        let perfect = masks(&[1, 0, 1], &[1, 0, 1]).scores(EmptyPolicy::One).unwrap();
        assert_eq!(perfect.iou, 1.0);
        let disjoint = masks(&[1, 0, 0], &[0, 0, 1]).scores(EmptyPolicy::One).unwrap();
        assert_eq!(disjoint.iou, 0.0);
        let empty = masks(&[0, 0], &[0, 0]);
        assert_eq!(empty.scores(EmptyPolicy::One).unwrap().iou, 1.0);
        assert_eq!(empty.scores(EmptyPolicy::Skip), None);
        // Prediction empty, target not: precision 0/0 scores 0.
        assert_eq!(masks(&[0, 0], &[1, 0]).scores(EmptyPolicy::One).unwrap().precision, 0.0);
    }

    #[test]
    fn fold_statistics() {
        assert_eq!(mean_std(&[0.7, 0.7, 0.7]).std, 0.0);
        let s = mean_std(&[0.6, 0.7]);
        assert!((s.mean - 0.65).abs() < 1e-15 && (s.std - 0.05).abs() < 1e-15);
    }

    fn record(fold: usize, class: &str, iou: f64) -> ImageRecord {
        ImageRecord {
            image_id: format!("{fold}-{class}"),
            fold,
            class: class.to_string(),
            confusion: Confusion::default(),
            scores: Some(Scores {
                iou,
                dice: iou,
                precision: iou,
                recall: iou,
            }),
        }
    }

    #[test]
    fn aggregate_means_folds_first() {
        let names = vec!["A".to_string()];
        // Fold 0 has two images (0.4, 0.8), fold 1 one image (0.7).
        let report = aggregate(vec![record(0, "A", 0.4), record(0, "A", 0.8), record(1, "A", 0.7)], &names).unwrap();
        let a = report.row("A").unwrap();
        assert!((a.iou.mean - 0.65).abs() < 1e-15);
        assert!((a.iou.std - 0.05).abs() < 1e-15);
        assert_eq!(report.average().iou, a.iou);
        assert!(aggregate(Vec::new(), &names).is_err());
        assert!(report.table().contains("0.650 (0.050)"));
    }
}

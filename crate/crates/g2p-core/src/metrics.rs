//! Segmentation metrics: confusion accumulation, IoU/accuracy summaries,
//! and class-group reporting for taxonomies that define one.

use serde::Serialize;

use crate::error::{Error, Result};

/// Square confusion matrix indexed (predicted, true). Points carrying the
/// ignore id in the ground truth are not counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            ignored: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, predicted: usize, truth: usize) -> u64 {
        self.counts[predicted * self.classes + truth]
    }

    /// Points skipped because their ground truth carried the ignore id.
    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    /// Scored points.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies one batch of predictions. Additive: accumulating two batches
    /// equals accumulating their concatenation.
    pub fn accumulate(
        &mut self,
        predicted: &[u16],
        truth: &[u16],
        ignore_id: Option<u16>,
    ) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::validation(
                "labels",
                format!("{} predictions vs {} truths", predicted.len(), truth.len()),
            ));
        }
        for (i, (&p, &t)) in predicted.iter().zip(truth).enumerate() {
            if Some(t) == ignore_id {
                self.ignored += 1;
                continue;
            }
            if p as usize >= self.classes || t as usize >= self.classes {
                return Err(Error::validation(
                    "labels",
                    format!("id out of range at index {i}: pred {p}, true {t}"),
                ));
            }
            self.counts[p as usize * self.classes + t as usize] += 1;
        }
        Ok(())
    }

    /// Exact merge of two matrices over the same class set.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::validation(
                "confusion",
                format!("class counts differ: {} vs {}", self.classes, other.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Named subset of class indices whose IoUs are averaged together.
#[derive(Clone, Debug, Serialize)]
pub struct ClassGroup {
    pub name: String,
    pub classes: Vec<usize>,
}

/// Class names plus optional group partition.
#[derive(Clone, Debug, Serialize)]
pub struct Taxonomy {
    pub name: String,
    pub class_names: Vec<String>,
    pub groups: Vec<ClassGroup>,
}

impl Taxonomy {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }
}

/// The 20-class ScanNet taxonomy with its geometric-discriminability
/// grouping. Six classes belong to neither group and stay ungrouped.
pub fn scannet20() -> Taxonomy {
    let class_names: Vec<String> = [
        "wall",
        "floor",
        "cabinet",
        "bed",
        "chair",
        "sofa",
        "table",
        "door",
        "window",
        "bookshelf",
        "picture",
        "counter",
        "desk",
        "curtain",
        "refrigerator",
        "shower curtain",
        "toilet",
        "sink",
        "bathtub",
        "otherfurniture",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    Taxonomy {
        name: "scannet20".into(),
        class_names,
        groups: vec![
            ClassGroup {
                name: "geometrically_distinguishable".into(),
                classes: vec![0, 1, 2, 3, 4, 5, 6, 9],
            },
            ClassGroup {
                name: "geometrically_challenging".into(),
                classes: vec![7, 8, 10, 13, 14, 15],
            },
        ],
    }
}

/// Per-class and aggregate metrics. Classes with zero ground-truth support
/// are reported absent (`None`) and excluded from the means.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsSummary {
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub oa: f64,
    pub scored_points: u64,
    pub ignored_points: u64,
    /// (group name, mean IoU over that group's supported classes).
    pub group_means: Vec<(String, Option<f64>)>,
}

/// Mean of the group's per-class IoUs, skipping absent classes; `None` when
/// nothing in the group has support.
pub fn group_mean_iou(per_class_iou: &[Option<f64>], group: &ClassGroup) -> Option<f64> {
    let values: Vec<f64> = group
        .classes
        .iter()
        .filter_map(|&c| per_class_iou.get(c).copied().flatten())
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Summarizes a confusion matrix into IoU/accuracy aggregates, with group
/// means when the taxonomy defines groups.
pub fn summarize(cm: &ConfusionMatrix, taxonomy: Option<&Taxonomy>) -> Result<MetricsSummary> {
    if cm.total() == 0 {
        return Err(Error::validation("confusion", "no scored points"));
    }
    if let Some(t) = taxonomy {
        if t.classes() != cm.classes() {
            return Err(Error::validation(
                "taxonomy",
                format!(
                    "taxonomy has {} classes but matrix has {}",
                    t.classes(),
                    cm.classes()
                ),
            ));
        }
    }
    let classes = cm.classes();
    let mut per_class_iou = Vec::with_capacity(classes);
    let mut per_class_acc = Vec::with_capacity(classes);
    let mut correct = 0u64;
    for c in 0..classes {
        let tp = cm.count(c, c);
        correct += tp;
        let fp: u64 = (0..classes).filter(|&t| t != c).map(|t| cm.count(c, t)).sum();
        let fn_: u64 = (0..classes).filter(|&p| p != c).map(|p| cm.count(p, c)).sum();
        let support = tp + fn_;
        if support == 0 {
            per_class_iou.push(None);
            per_class_acc.push(None);
        } else {
            per_class_iou.push(Some(tp as f64 / (tp + fp + fn_) as f64));
            per_class_acc.push(Some(tp as f64 / support as f64));
        }
    }
    let mean = |values: &[Option<f64>]| {
        let present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    let group_means = taxonomy
        .map(|t| {
            t.groups
                .iter()
                .map(|g| (g.name.clone(), group_mean_iou(&per_class_iou, g)))
                .collect()
        })
        .unwrap_or_default();
    Ok(MetricsSummary {
        miou: mean(&per_class_iou),
        macc: mean(&per_class_acc),
        oa: correct as f64 / cm.total() as f64,
        per_class_iou,
        per_class_acc,
        scored_points: cm.total(),
        ignored_points: cm.ignored(),
        group_means,
    })
}

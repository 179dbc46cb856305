//! Cross-validated evaluation of trained folds.

use std::collections::HashMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::manifest::LesionClass;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::froc::{froc, FrocCurve, FrocImage, DEFAULT_IOM_THRESHOLD};
use crate::eval::roc::{auroc, pauc_ratio, roc_curve, specificity_at_sensitivity, threshold_at_sensitivity, RocCurve};
use crate::model::forward::{class_slot, image_scores_for_task, predict, Posteriors, Task};
use crate::model::params::{Mode, ModelParams};

pub const OPERATING_SENSITIVITY: f64 = 0.85;
pub const PAUC_BAND: (f64, f64) = (0.8, 1.0);
pub const FROC_MAX_FP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub index: usize,
    pub posteriors: Posteriors,
    /// `m × 2` localization scores, columns `(B, M)`.
    pub localization: Array2<f64>,
}

/// Inference over `indices`; images without regions get zero posteriors.
pub fn predict_images(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<Vec<ImagePrediction>> {
    indices
        .par_iter()
        .map(|&index| {
            let r = &dataset.records[index];
            if r.n_regions() == 0 {
                return Ok(ImagePrediction {
                    index,
                    posteriors: Posteriors::default(),
                    localization: Array2::zeros((0, 2)),
                });
            }
            let (posteriors, localization) = predict(params, r.features.view())?;
            Ok(ImagePrediction {
                index,
                posteriors,
                localization,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    /// Evaluated units (images, or breasts at breast level).
    pub n_units: usize,
    pub n_positive: usize,
    pub auroc: f64,
    pub pauc_ratio: f64,
    pub op_specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocSummary {
    pub class: LesionClass,
    pub iom_threshold: f64,
    pub n_evaluated: usize,
    pub max_fp_per_image: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub mode: Mode,
    pub breast_level: bool,
    pub folds: Vec<FoldMetrics>,
    pub auroc: MeanStd,
    pub pauc_ratio: MeanStd,
    pub op_specificity: MeanStd,
    pub froc: FrocSummary,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad metrics report: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct RunEvaluation {
    pub report: MetricsReport,
    pub roc_curves: Vec<RocCurve>,
    pub froc: FrocCurve,
}

/// Trained parameters for one fold and the held-out images they score.
#[derive(Debug, Clone)]
pub struct FoldModel {
    pub fold: usize,
    pub test: Vec<usize>,
    pub params: ModelParams,
}

/// Breast identifier: a trailing `_CC` or `_MLO` view suffix is dropped.
pub fn breast_key(image_id: &str) -> &str {
    image_id
        .strip_suffix("_CC")
        .or_else(|| image_id.strip_suffix("_MLO"))
        .unwrap_or(image_id)
}

/// Groups per-image `(score, label)` by breast: max score, any-positive label.
pub fn group_by_breast(ids: &[&str], scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<bool>) {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let (mut s_out, mut l_out) = (Vec::new(), Vec::new());
    for ((id, &s), &y) in ids.iter().zip(scores).zip(labels) {
        let key = breast_key(id);
        match slot.get(key) {
            Some(&j) => {
                s_out[j] = f64::max(s_out[j], s);
                l_out[j] |= y;
            }
            None => {
                slot.insert(key, s_out.len());
                s_out.push(s);
                l_out.push(y);
            }
        }
    }
    (s_out, l_out)
}

fn froc_images(dataset: &Dataset, preds: &[ImagePrediction], class: LesionClass) -> Vec<FrocImage> {
    preds
        .iter()
        .map(|p| {
            let r = &dataset.records[p.index];
            FrocImage {
                regions: r.regions.iter().map(|g| g.bbox).collect(),
                scores: p.localization.column(class_slot(class)).to_vec(),
                lesions: r.annotations.iter().filter(|a| a.class == class).map(|a| a.rect).collect(),
            }
        })
        .collect()
}

/// Per-fold classification metrics on held-out images plus the pooled FROC of
/// the task's localized class over every fold's true-positive set.
pub fn evaluate_run(dataset: &Dataset, folds: &[FoldModel], task: Task, breast_level: bool) -> Result<RunEvaluation> {
    if folds.is_empty() {
        return Err(Error::InvalidArgument("no folds to evaluate".into()));
    }
    let mode = folds[0].params.mode();
    let class = task.localized_class();
    let mut metrics = Vec::new();
    let mut curves = Vec::new();
    let mut evaluated = Vec::new();
    for fm in folds {
        if let Some(&bad) = fm.test.iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::Data(format!("fold {} refers to image {bad} outside the dataset", fm.fold)));
        }
        if fm.params.input_dim() != dataset.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: dataset.feature_dim,
                actual: fm.params.input_dim(),
            });
        }
        let preds = predict_images(&fm.params, dataset, &fm.test)?;
        let scores: Vec<f64> = preds.iter().map(|p| image_scores_for_task(&p.posteriors, task)).collect();
        let labels: Vec<bool> = preds.iter().map(|p| task.is_positive(dataset.records[p.index].label)).collect();

        let image_curve = roc_curve(&scores, &labels)
            .map_err(|e| Error::Data(format!("fold {}, task {}: {e}", fm.fold, task.as_str())))?;
        let threshold = threshold_at_sensitivity(&image_curve, OPERATING_SENSITIVITY);
        for (p, (&s, &y)) in preds.iter().zip(scores.iter().zip(&labels)) {
            let has_lesion = dataset.records[p.index].annotations.iter().any(|a| a.class == class);
            if y && s >= threshold && has_lesion {
                evaluated.push(p.clone());
            }
        }

        let (curve, n_units) = if breast_level {
            let ids: Vec<&str> = preds.iter().map(|p| dataset.records[p.index].image_id.as_str()).collect();
            let (bs, bl) = group_by_breast(&ids, &scores, &labels);
            let c = roc_curve(&bs, &bl)
                .map_err(|e| Error::Data(format!("fold {}, task {}: {e}", fm.fold, task.as_str())))?;
            (c, bs.len())
        } else {
            (image_curve, scores.len())
        };
        metrics.push(FoldMetrics {
            fold: fm.fold,
            n_units,
            n_positive: curve.n_positive,
            auroc: auroc(&curve),
            pauc_ratio: pauc_ratio(&curve, PAUC_BAND.0, PAUC_BAND.1),
            op_specificity: specificity_at_sensitivity(&curve, OPERATING_SENSITIVITY),
        });
        curves.push(curve);
    }
    let froc_curve = froc(&froc_images(dataset, &evaluated, class), DEFAULT_IOM_THRESHOLD)?;
    let pick = |f: fn(&FoldMetrics) -> f64| mean_std(&metrics.iter().map(f).collect::<Vec<_>>());
    let report = MetricsReport {
        task,
        mode,
        breast_level,
        auroc: pick(|m| m.auroc),
        pauc_ratio: pick(|m| m.pauc_ratio),
        op_specificity: pick(|m| m.op_specificity),
        froc: FrocSummary {
            class,
            iom_threshold: DEFAULT_IOM_THRESHOLD,
            n_evaluated: evaluated.len(),
            max_fp_per_image: FROC_MAX_FP,
            recall: froc_curve.recall_at(FROC_MAX_FP),
        },
        folds: metrics,
    };
    Ok(RunEvaluation {
        report,
        roc_curves: curves,
        froc: froc_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let ms = mean_std(&[0.7, 0.7, 0.75, 0.7, 0.75]);
        assert!((ms.mean - 0.72).abs() < 1e-12);
        assert!((ms.std - 0.027386127875258).abs() < 1e-12);
        assert_eq!(mean_std(&[0.8; 5]).std, 0.0);
    }

    #[test]
    fn breast_grouping_takes_max_and_any_label() {
        let ids = ["p1_L_CC", "p1_L_MLO", "p1_R_CC", "p2"];
        let (s, l) = group_by_breast(&ids, &[0.2, 0.7, 0.1, 0.4], &[false, true, false, false]);
        assert_eq!(s, vec![0.7, 0.1, 0.4]);
        assert_eq!(l, vec![true, false, false]);
        assert_eq!(breast_key("x_MLO"), "x");
        assert_eq!(breast_key("x_mlo"), "x_mlo");
    }
}

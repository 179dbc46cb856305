//! Classification and localization metrics, cross-validated reports and
//! overlays.

pub mod froc;
pub mod overlay;
pub mod report;
pub mod roc;

pub use froc::{froc, iom, region_hits, FrocCurve, FrocImage, FrocPoint, DEFAULT_IOM_THRESHOLD};
pub use overlay::{localization_csv, render_overlay, top_regions, OVERLAY_TOP};
pub use report::{
    breast_key, evaluate_run, group_by_breast, mean_std, predict_images, FoldMetrics, FoldModel, FrocSummary,
    ImagePrediction, MeanStd, MetricsReport, RunEvaluation, FROC_MAX_FP, OPERATING_SENSITIVITY, PAUC_BAND,
};
pub use roc::{
    auroc, pauc_ratio, roc_csv, roc_curve, specificity_at_sensitivity, threshold_at_sensitivity, RocCurve, RocPoint,
};

//! Intersection over minimum and the localization FROC.
//!
//! A region is marked at threshold `t` when its localization score is `>= t`.
//! Marked regions with IoM at or above the match threshold against some lesion
//! of the class are hits; every other marked region is a false positive (no
//! suppression across overlapping regions).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Rect;

pub const DEFAULT_IOM_THRESHOLD: f64 = 0.5;

pub fn iom(a: &Rect, b: &Rect) -> Result<f64> {
    if a.area() == 0 || b.area() == 0 {
        return Err(Error::InvalidArgument(format!(
            "IoM needs rectangles of positive area, got {a:?} and {b:?}"
        )));
    }
    Ok(a.intersection_area(b) as f64 / a.area().min(b.area()) as f64)
}

/// One evaluated image: region boxes with their class localization scores and
/// the class lesions.
#[derive(Debug, Clone, PartialEq)]
pub struct FrocImage {
    pub regions: Vec<Rect>,
    pub scores: Vec<f64>,
    pub lesions: Vec<Rect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub recall: f64,
    pub fp_per_image: f64,
}

/// Points in ascending threshold order, ending with the `+inf` sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub n_images: usize,
    pub points: Vec<FrocPoint>,
}

impl FrocCurve {
    /// Best recall among operating points averaging at most `max_fp` false
    /// positives per image.
    pub fn recall_at(&self, max_fp: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fp_per_image <= max_fp)
            .map(|p| p.recall)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,x,y\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fp_per_image, p.recall));
        }
        out
    }
}

/// Region hit flags: IoM ≥ `iom_threshold` with at least one lesion.
pub fn region_hits(image: &FrocImage, iom_threshold: f64) -> Result<Vec<bool>> {
    image
        .regions
        .iter()
        .map(|r| {
            for l in &image.lesions {
                if iom(r, l)? >= iom_threshold {
                    return Ok(true);
                }
            }
            Ok(false)
        })
        .collect()
}

pub fn froc(images: &[FrocImage], iom_threshold: f64) -> Result<FrocCurve> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("FROC needs a nonempty evaluated set".into()));
    }
    let n = images.len();
    // best hit score per image and all false-positive candidate scores
    let mut best_hit = Vec::with_capacity(n);
    let mut misses = Vec::new();
    let mut thresholds = Vec::new();
    for img in images {
        if img.regions.len() != img.scores.len() {
            return Err(Error::DimensionMismatch {
                expected: img.regions.len(),
                actual: img.scores.len(),
            });
        }
        if img.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument("localization scores contain NaN".into()));
        }
        let hits = region_hits(img, iom_threshold)?;
        let mut best = f64::NEG_INFINITY;
        for (&s, &h) in img.scores.iter().zip(&hits) {
            if h {
                best = best.max(s);
            } else {
                misses.push(s);
            }
        }
        best_hit.push(best);
        thresholds.extend_from_slice(&img.scores);
    }
    best_hit.sort_by(f64::total_cmp);
    misses.sort_by(f64::total_cmp);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v < t);
    let points = thresholds
        .into_iter()
        .map(|t| FrocPoint {
            threshold: t,
            recall: at_least(&best_hit, t) as f64 / n as f64,
            fp_per_image: at_least(&misses, t) as f64 / n as f64,
        })
        .collect();
    Ok(FrocCurve { n_images: n, points })
}

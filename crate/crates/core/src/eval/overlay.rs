//! Localization overlays: top-scoring regions outlined on the image.

use ndarray::Array2;

use crate::data::manifest::LesionClass;
use crate::data::regions::Region;
use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::model::forward::class_slot;

pub const OVERLAY_TOP: usize = 3;
const GREEN: usize = 1;
const BLUE: usize = 2;
const LINE: usize = 2;

/// Indices of the `n` highest scores, ties to the lower index.
pub fn top_regions(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// Outlines the top benign regions in green and the top malignant regions in
/// blue. `localization` is `m × 2` with columns `(B, M)`.
pub fn render_overlay(image: &GrayImage, regions: &[Region], localization: &Array2<f64>, top: usize) -> Result<RgbImage> {
    if localization.nrows() != regions.len() {
        return Err(Error::DimensionMismatch {
            expected: regions.len(),
            actual: localization.nrows(),
        });
    }
    let mut out = RgbImage::from_gray(image);
    for (class, channel) in [(LesionClass::Benign, GREEN), (LesionClass::Malignant, BLUE)] {
        let scores = localization.column(class_slot(class)).to_vec();
        for i in top_regions(&scores, top) {
            out.outline(&regions[i].bbox, channel, LINE);
        }
    }
    Ok(out)
}

/// Sidecar CSV with every region's box and localization scores.
pub fn localization_csv(regions: &[Region], localization: &Array2<f64>) -> String {
    let mut out = String::from("region,x,y,w,h,d_B,d_M\n");
    for (r, row) in regions.iter().zip(localization.rows()) {
        let b = &r.bbox;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index,
            b.x,
            b.y,
            b.w,
            b.h,
            row[class_slot(LesionClass::Benign)],
            row[class_slot(LesionClass::Malignant)]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Rect;
    use ndarray::array;

    #[test]
    fn overlay_keeps_dimensions_and_marks_channels() {
        let img = GrayImage::new(40, 30, 255);
        let regions: Vec<Region> = (0..4)
            .map(|i| Region {
                index: i,
                bbox: Rect::new(i as usize * 10, 0, 10, 10),
            })
            .collect();
        let loc = array![[0.9, 0.0], [0.1, 0.0], [0.0, 0.0], [0.0, 0.8]];
        let out = render_overlay(&img, &regions, &loc, 1).unwrap();
        assert_eq!((out.width, out.height), (40, 30));
        assert_eq!(out.data[0], [0, 255, 0]);
        assert_eq!(out.data[30], [0, 0, 255]);
        assert_eq!(out.data[10 * 40 + 15], [0, 0, 0]);
        let csv = localization_csv(&regions, &loc);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(4).unwrap().ends_with(",0,0.8"));
    }

    #[test]
    fn top_regions_tie_break() {
        assert_eq!(top_regions(&[0.5, 0.7, 0.5, 0.1], 3), vec![1, 0, 2]);
    }
}

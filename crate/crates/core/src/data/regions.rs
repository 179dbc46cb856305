//! Sliding-window region grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, GrayImage, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub window: usize,
    pub stride: usize,
    /// Minimum foreground fraction of a window for it to be kept.
    pub coverage: f64,
}

impl Default for GridGeometry {
    fn default() -> Self {
        GridGeometry {
            window: 64,
            stride: 32,
            coverage: 0.5,
        }
    }
}

impl GridGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidArgument("window must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "coverage {} outside (0, 1]",
                self.coverage
            )));
        }
        Ok(())
    }
}

/// Window offsets along one axis: multiples of `stride` from 0, plus a final
/// window flush with the far edge when the regular positions leave it uncovered.
pub fn axis_positions(length: usize, window: usize, stride: usize) -> Vec<usize> {
    if window > length || window == 0 || stride == 0 {
        return Vec::new();
    }
    let mut out: Vec<usize> = (0..=length - window).step_by(stride).collect();
    let last = *out.last().expect("at least one position");
    if last + window < length {
        out.push(length - window);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    /// Row-major index over the full grid (dropped positions keep their slot).
    pub index: u32,
    pub bbox: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GridStatus {
    #[default]
    Ok,
    WindowLargerThanImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub image_id: String,
    pub window: usize,
    pub stride: usize,
    pub status: GridStatus,
    pub regions: Vec<Region>,
}

impl RegionGrid {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

pub fn extract_regions(
    image_id: &str,
    image: &GrayImage,
    mask: &BinaryMask,
    geometry: &GridGeometry,
) -> Result<RegionGrid> {
    geometry.validate()?;
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::Data(format!(
            "mask {}x{} does not match image {}x{} for `{image_id}`",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    let GridGeometry {
        window,
        stride,
        coverage,
    } = *geometry;
    let mut grid = RegionGrid {
        image_id: image_id.to_string(),
        window,
        stride,
        status: GridStatus::Ok,
        regions: Vec::new(),
    };
    if window > image.width() || window > image.height() {
        log::warn!(
            "window {window} exceeds image `{image_id}` ({}x{}); no regions extracted",
            image.width(),
            image.height()
        );
        grid.status = GridStatus::WindowLargerThanImage;
        return Ok(grid);
    }
    let xs = axis_positions(image.width(), window, stride);
    let ys = axis_positions(image.height(), window, stride);
    let area = (window * window) as f64;
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            let bbox = Rect::new(x, y, window, window);
            if mask.count_in(&bbox) as f64 / area >= coverage {
                grid.regions.push(Region {
                    index: (row * xs.len() + col) as u32,
                    bbox,
                });
            }
        }
    }
    Ok(grid)
}

//! Geometric augmentation of an image together with its mask and annotations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{LesionAnnotation, WeakLabel};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, GrayImage, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentOp {
    /// `k` quarter turns clockwise.
    Rotate90(u8),
    FlipHorizontal,
    FlipVertical,
    /// Translation; exposed borders are filled with 0.
    Shift { dx: i32, dy: i32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSample {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub label: WeakLabel,
    pub annotations: Vec<LesionAnnotation>,
}

/// Coordinate map shared by image, mask and annotation transforms.
trait PixelMap {
    fn out_dims(&self, w: usize, h: usize) -> (usize, usize);
    /// Source pixel for an output pixel, `None` when it falls outside.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> Option<(usize, usize)>;
}

impl PixelMap for AugmentOp {
    fn out_dims(&self, w: usize, h: usize) -> (usize, usize) {
        match self {
            AugmentOp::Rotate90(k) if k % 2 == 1 => (h, w),
            _ => (w, h),
        }
    }

    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> Option<(usize, usize)> {
        match *self {
            AugmentOp::Rotate90(k) => match k % 4 {
                0 => Some((x, y)),
                1 => Some((y, h - 1 - x)),
                2 => Some((w - 1 - x, h - 1 - y)),
                _ => Some((w - 1 - y, x)),
            },
            AugmentOp::FlipHorizontal => Some((w - 1 - x, y)),
            AugmentOp::FlipVertical => Some((x, h - 1 - y)),
            AugmentOp::Shift { dx, dy } => {
                let sx = x as i64 - dx as i64;
                let sy = y as i64 - dy as i64;
                (sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h)
                    .then_some((sx as usize, sy as usize))
            }
        }
    }
}

impl AugmentOp {
    fn map_rect(&self, r: &Rect, w: usize, h: usize) -> Option<Rect> {
        match *self {
            AugmentOp::Rotate90(k) => {
                let mut out = *r;
                let (mut cw, mut ch) = (w, h);
                for _ in 0..k % 4 {
                    out = Rect::new(ch - out.y - out.h, out.x, out.h, out.w);
                    std::mem::swap(&mut cw, &mut ch);
                }
                Some(out)
            }
            AugmentOp::FlipHorizontal => Some(Rect::new(w - r.x - r.w, r.y, r.w, r.h)),
            AugmentOp::FlipVertical => Some(Rect::new(r.x, h - r.y - r.h, r.w, r.h)),
            AugmentOp::Shift { dx, dy } => {
                let x0 = (r.x as i64 + dx as i64).clamp(0, w as i64);
                let y0 = (r.y as i64 + dy as i64).clamp(0, h as i64);
                let x1 = (r.right() as i64 + dx as i64).clamp(0, w as i64);
                let y1 = (r.bottom() as i64 + dy as i64).clamp(0, h as i64);
                (x1 > x0 && y1 > y0).then(|| {
                    Rect::new(x0 as usize, y0 as usize, (x1 - x0) as usize, (y1 - y0) as usize)
                })
            }
        }
    }

    fn apply_image(&self, img: &GrayImage) -> GrayImage {
        let (w, h) = (img.width(), img.height());
        let (ow, oh) = self.out_dims(w, h);
        let mut out = GrayImage::new(ow, oh, img.maxval());
        for y in 0..oh {
            for x in 0..ow {
                if let Some((sx, sy)) = self.source(x, y, w, h) {
                    out.set_raw(x, y, img.raw(sx, sy));
                }
            }
        }
        out
    }

    fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (w, h) = (mask.width(), mask.height());
        let (ow, oh) = self.out_dims(w, h);
        let mut out = BinaryMask::empty(ow, oh);
        for y in 0..oh {
            for x in 0..ow {
                if let Some((sx, sy)) = self.source(x, y, w, h) {
                    out.set(x, y, mask.get(sx, sy));
                }
            }
        }
        out
    }
}

/// Applies `ops` in order. Shifts must stay strictly below `stride`.
pub fn augment(sample: &AugmentSample, ops: &[AugmentOp], stride: usize) -> Result<AugmentSample> {
    for op in ops {
        if let AugmentOp::Shift { dx, dy } = op {
            if dx.unsigned_abs() as usize >= stride || dy.unsigned_abs() as usize >= stride {
                return Err(Error::InvalidArgument(format!(
                    "shift ({dx}, {dy}) must be smaller than the stride {stride}"
                )));
            }
        }
    }
    let mut cur = sample.clone();
    for op in ops {
        let (w, h) = (cur.image.width(), cur.image.height());
        cur.annotations = cur
            .annotations
            .iter()
            .filter_map(|a| {
                op.map_rect(&a.rect, w, h).map(|rect| LesionAnnotation {
                    class: a.class,
                    rect,
                })
            })
            .collect();
        cur.image = op.apply_image(&cur.image);
        cur.mask = op.apply_mask(&cur.mask);
    }
    Ok(cur)
}

/// Finite augmentation pool: identity, three quarter turns, two flips and the
/// four diagonal shifts by `max_shift` pixels.
pub fn augmentation_pool(max_shift: usize) -> Vec<Vec<AugmentOp>> {
    let s = max_shift as i32;
    let mut pool = vec![
        vec![],
        vec![AugmentOp::Rotate90(1)],
        vec![AugmentOp::Rotate90(2)],
        vec![AugmentOp::Rotate90(3)],
        vec![AugmentOp::FlipHorizontal],
        vec![AugmentOp::FlipVertical],
    ];
    for (dx, dy) in [(s, s), (s, -s), (-s, s), (-s, -s)] {
        pool.push(vec![AugmentOp::Shift { dx, dy }]);
    }
    pool
}

/// Index into [`augmentation_pool`]: each of the seven kinds (identity, three
/// rotations, two flips, shift) is equally likely; a shift picks one of the
/// four diagonals.
pub fn draw_pool_index<R: Rng>(rng: &mut R) -> usize {
    match rng.gen_range(0..7usize) {
        6 => 6 + rng.gen_range(0..4usize),
        k => k,
    }
}

/// One augmentation per call, uniformly among identity, three rotations, two
/// flips and a random shift of magnitude at most `max_shift` per axis.
pub fn random_ops<R: Rng>(rng: &mut R, max_shift: usize) -> Vec<AugmentOp> {
    match rng.gen_range(0..7u8) {
        0 => vec![],
        k @ 1..=3 => vec![AugmentOp::Rotate90(k)],
        4 => vec![AugmentOp::FlipHorizontal],
        5 => vec![AugmentOp::FlipVertical],
        _ => {
            let m = max_shift as i32;
            let dx = rng.gen_range(-m..=m);
            let dy = rng.gen_range(-m..=m);
            vec![AugmentOp::Shift { dx, dy }]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::LesionClass;
    use proptest::prelude::*;

    fn sample(w: usize, h: usize) -> AugmentSample {
        let pixels = (0..w * h).map(|i| (i * 37 % 251) as u16).collect();
        AugmentSample {
            image: GrayImage::from_pixels(w, h, 255, pixels).unwrap(),
            mask: BinaryMask::full(w, h),
            label: WeakLabel::new(true, false),
            annotations: vec![LesionAnnotation {
                class: LesionClass::Malignant,
                rect: Rect::new(1, 1, 3, 2),
            }],
        }
    }

    #[test]
    fn identity_is_bit_identical() {
        let s = sample(7, 5);
        assert_eq!(augment(&s, &[], 4).unwrap(), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(7, 5);
        for op in [AugmentOp::FlipHorizontal, AugmentOp::FlipVertical] {
            assert_eq!(augment(&s, &[op, op], 4).unwrap(), s);
        }
    }

    #[test]
    fn rotation_maps_dimensions_and_corners() {
        let s = sample(7, 5);
        let r = augment(&s, &[AugmentOp::Rotate90(1)], 4).unwrap();
        assert_eq!((r.image.width(), r.image.height()), (5, 7));
        // corner oracle: clockwise quarter turn sends (x, y) to (H - 1 - y, x)
        let rect = s.annotations[0].rect;
        let corners = [
            (rect.x, rect.y),
            (rect.right() - 1, rect.y),
            (rect.x, rect.bottom() - 1),
            (rect.right() - 1, rect.bottom() - 1),
        ];
        let mapped: Vec<(usize, usize)> = corners.iter().map(|&(x, y)| (5 - 1 - y, x)).collect();
        let got = r.annotations[0].rect;
        let min_x = mapped.iter().map(|c| c.0).min().unwrap();
        let min_y = mapped.iter().map(|c| c.1).min().unwrap();
        let max_x = mapped.iter().map(|c| c.0).max().unwrap();
        let max_y = mapped.iter().map(|c| c.1).max().unwrap();
        assert_eq!(got, Rect::new(min_x, min_y, max_x - min_x + 1, max_y - min_y + 1));
        // pixel oracle
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(r.image.raw(5 - 1 - y, x), s.image.raw(x, y));
            }
        }
        assert_eq!(r.label, s.label);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let s = sample(6, 3);
        let r = augment(&s, &[AugmentOp::Rotate90(1); 4], 4).unwrap();
        assert_eq!(r, s);
    }

    #[test]
    fn shift_fills_background_and_moves_annotation() {
        let s = sample(7, 5);
        let r = augment(&s, &[AugmentOp::Shift { dx: 2, dy: -1 }], 4).unwrap();
        assert_eq!(r.image.raw(0, 0), 0);
        assert_eq!(r.image.raw(2, 0), s.image.raw(0, 1));
        assert!(!r.mask.get(1, 2));
        assert_eq!(r.annotations[0].rect, Rect::new(3, 0, 3, 2));
    }

    #[test]
    fn shift_at_stride_rejected() {
        let s = sample(7, 5);
        assert!(augment(&s, &[AugmentOp::Shift { dx: 4, dy: 0 }], 4).is_err());
        assert!(augment(&s, &[AugmentOp::Shift { dx: 0, dy: -4 }], 4).is_err());
    }

    proptest! {
        #[test]
        fn label_preserved_and_involutions_hold(k in 0u8..4, w in 2usize..12, h in 2usize..12) {
            let s = sample(w.max(5), h.max(6));
            let r = augment(&s, &[AugmentOp::Rotate90(k), AugmentOp::FlipHorizontal], 8).unwrap();
            prop_assert_eq!(r.label, s.label);
            prop_assert_eq!(r.annotations.len(), s.annotations.len());
            let back = augment(&r, &[AugmentOp::FlipHorizontal, AugmentOp::Rotate90((4 - k) % 4)], 8).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}

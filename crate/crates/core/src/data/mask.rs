use crate::image::{BinaryMask, GrayImage};

/// Foreground estimate: pixels strictly above the global mean, restricted to
/// the largest 4-connected component. Ties between equally large components go
/// to the one whose first pixel comes earliest in row-major order.
pub fn compute_foreground_mask(image: &GrayImage) -> BinaryMask {
    let (w, h) = (image.width(), image.height());
    if image.is_empty() {
        return BinaryMask::empty(w, h);
    }
    let pixels = image.pixels();
    let sum: u64 = pixels.iter().map(|&p| p as u64).sum();
    let n = pixels.len() as u64;
    // p > sum / n  <=>  p * n > sum, exact in integers
    let above: Vec<bool> = pixels.iter().map(|&p| p as u64 * n > sum).collect();

    let mut label = vec![0u32; w * h];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !above[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if above[j] && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((next, size));
        }
    }
    let bits = match best {
        Some((keep, _)) => label.iter().map(|&l| l == keep).collect(),
        None => vec![false; w * h],
    };
    BinaryMask::from_bits(w, h, bits).expect("mask dimensions")
}

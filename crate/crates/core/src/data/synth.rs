//! Synthetic planted-lesion benchmark.
//!
//! Background: a sum of random low-frequency cosine waves rescaled to a fixed
//! intensity band. Benign lesions are isotropic Gaussian blobs; malignant ones
//! are the same blob plus thin radial spikes. Labels follow the planted lesions.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{DatasetManifest, LesionAnnotation, LesionClass, ManifestEntry, WeakLabel};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, GrayImage, Rect};
use crate::seed::{rng_for, TAG_SYNTH};

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const MAX_REGENERATIONS: u64 = 1000;

/// Fractions of images whose primary finding is malignant, benign or none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMix {
    pub malignant: f64,
    pub benign: f64,
    pub normal: f64,
}

impl ClassMix {
    /// Parses `B:M:N` ratios, e.g. `3:3:4` or `0.3:0.3:0.4`; ratios are normalized.
    pub fn parse_bmn(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!("mix `{text}` must look like B:M:N")));
        }
        let mut v = [0.0f64; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .ok_or_else(|| Error::InvalidArgument(format!("bad mix component `{p}`")))?;
        }
        let total: f64 = v.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("mix components sum to zero".into()));
        }
        Ok(ClassMix {
            benign: v[0] / total,
            malignant: v[1] / total,
            normal: v[2] / total,
        })
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.malignant, self.benign, self.normal];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("mix fractions must be non-negative".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("mix fractions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub mix: ClassMix,
    pub n_waves: usize,
    /// Upper bound on the spatial frequency of background waves, cycles per image.
    pub max_frequency: f64,
    pub background_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub blob_amplitude: f64,
    pub n_spikes: usize,
    /// Spike length in units of the blob sigma.
    pub spike_length: f64,
    pub spike_amplitude: f64,
    /// Full width of a spike in pixels.
    pub spike_width: f64,
    /// Probability that an abnormal image also carries a lesion of the other class.
    pub second_finding_prob: f64,
    pub maxval: u16,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 256,
            height: 256,
            mix: ClassMix {
                malignant: 0.3,
                benign: 0.3,
                normal: 0.4,
            },
            n_waves: 8,
            max_frequency: 4.0,
            background_range: (0.2, 0.6),
            sigma_range: (8.0, 10.0),
            blob_amplitude: 0.3,
            n_spikes: 8,
            spike_length: 3.0,
            spike_amplitude: 0.2,
            spike_width: 3.0,
            second_finding_prob: 0.1,
            maxval: u16::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<GrayImage>,
    /// Shared all-foreground mask; the synthetic field of view is the whole image.
    pub mask: BinaryMask,
}

pub const SYNTH_MANIFEST: &str = "manifest.jsonl";
pub const SYNTH_MASK: &str = "foreground.pgm";

struct Lesion {
    class: LesionClass,
    cx: f64,
    cy: f64,
    sigma: f64,
    spike_angle: f64,
    rect: Rect,
}

impl SynthParams {
    fn half_extent(&self, class: LesionClass, sigma: f64) -> f64 {
        match class {
            LesionClass::Benign => 2.0 * sigma,
            LesionClass::Malignant => (self.spike_length * sigma).max(2.0 * sigma),
        }
    }

    fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        let (lo, hi) = self.sigma_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument("sigma range must be positive and ordered".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.second_finding_prob) {
            return Err(Error::InvalidArgument("second_finding_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

fn background<R: Rng>(rng: &mut R, p: &SynthParams) -> Vec<f64> {
    let (w, h) = (p.width, p.height);
    let mut waves = Vec::with_capacity(p.n_waves);
    for _ in 0..p.n_waves {
        let (fx, fy) = loop {
            let fx = rng.gen_range(-p.max_frequency..=p.max_frequency);
            let fy = rng.gen_range(-p.max_frequency..=p.max_frequency);
            if fx.hypot(fy) <= p.max_frequency {
                break (fx, fy);
            }
        };
        let amp = rng.gen_range(0.0..1.0);
        let phase = rng.gen_range(0.0..TAU);
        waves.push((fx, fy, amp, phase));
    }
    // cos(a + b) = cos a cos b - sin a sin b with a from x, b from y
    let mut field = vec![0.0; w * h];
    for &(fx, fy, a, ph) in &waves {
        let xs: Vec<(f64, f64)> = (0..w)
            .map(|x| (TAU * fx * x as f64 / w as f64 + ph).sin_cos())
            .collect();
        for y in 0..h {
            let (sy, cy) = (TAU * fy * y as f64 / h as f64).sin_cos();
            let row = &mut field[y * w..(y + 1) * w];
            for (v, &(sx, cx)) in row.iter_mut().zip(&xs) {
                *v += a * (cx * cy - sx * sy);
            }
        }
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (b0, b1) = p.background_range;
    for v in &mut field {
        *v = if hi > lo {
            b0 + (*v - lo) / (hi - lo) * (b1 - b0)
        } else {
            0.5 * (b0 + b1)
        };
    }
    field
}

fn place<R: Rng>(rng: &mut R, p: &SynthParams, class: LesionClass) -> Option<Lesion> {
    let sigma = rng.gen_range(p.sigma_range.0..=p.sigma_range.1);
    let r = p.half_extent(class, sigma);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let cx = rng.gen_range(0.0..p.width as f64);
        let cy = rng.gen_range(0.0..p.height as f64);
        let (x0, y0) = ((cx - r).floor(), (cy - r).floor());
        let (x1, y1) = ((cx + r).ceil(), (cy + r).ceil());
        if x0 >= 0.0 && y0 >= 0.0 && x1 <= p.width as f64 && y1 <= p.height as f64 {
            let rect = Rect::new(x0 as usize, y0 as usize, (x1 - x0) as usize, (y1 - y0) as usize);
            return Some(Lesion {
                class,
                cx,
                cy,
                sigma,
                spike_angle: rng.gen_range(0.0..TAU),
                rect,
            });
        }
    }
    None
}

fn distance_to_segment(px: f64, py: f64, ax: f64, ay: f64, dx: f64, dy: f64, len: f64) -> f64 {
    let t = ((px - ax) * dx + (py - ay) * dy).clamp(0.0, len);
    (px - ax - t * dx).hypot(py - ay - t * dy)
}

fn paint(field: &mut [f64], p: &SynthParams, lesion: &Lesion) {
    let w = p.width;
    let rect = lesion.rect;
    let two_s2 = 2.0 * lesion.sigma * lesion.sigma;
    let spike_len = p.spike_length * lesion.sigma;
    let half_width = 0.5 * p.spike_width;
    let dirs: Vec<(f64, f64)> = (0..p.n_spikes)
        .map(|j| {
            let a = lesion.spike_angle + TAU * j as f64 / p.n_spikes as f64;
            (a.cos(), a.sin())
        })
        .collect();
    for y in rect.y..rect.bottom() {
        for x in rect.x..rect.right() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d2 = (px - lesion.cx).powi(2) + (py - lesion.cy).powi(2);
            let mut add = p.blob_amplitude * (-d2 / two_s2).exp();
            if lesion.class == LesionClass::Malignant {
                let on_spike = dirs.iter().any(|&(dx, dy)| {
                    distance_to_segment(px, py, lesion.cx, lesion.cy, dx, dy, spike_len) <= half_width
                });
                if on_spike {
                    add += p.spike_amplitude;
                }
            }
            field[y * w + x] += add;
        }
    }
}

fn generate_image(seed: u64, index: usize, primary: Option<LesionClass>, p: &SynthParams) -> (GrayImage, Vec<LesionAnnotation>) {
    for attempt in 0..MAX_REGENERATIONS {
        let mut rng = rng_for(seed, &[TAG_SYNTH, 1, index as u64, attempt]);
        let mut field = background(&mut rng, p);
        let mut classes = Vec::new();
        if let Some(c) = primary {
            classes.push(c);
            if rng.gen_bool(p.second_finding_prob) {
                classes.push(match c {
                    LesionClass::Benign => LesionClass::Malignant,
                    LesionClass::Malignant => LesionClass::Benign,
                });
            }
        }
        let lesions: Option<Vec<Lesion>> = classes.iter().map(|&c| place(&mut rng, p, c)).collect();
        let Some(lesions) = lesions else {
            continue;
        };
        for l in &lesions {
            paint(&mut field, p, l);
        }
        let image = GrayImage::from_unit(p.width, p.height, p.maxval, &field).expect("synthetic dimensions");
        let annotations = lesions
            .iter()
            .map(|l| LesionAnnotation {
                class: l.class,
                rect: l.rect,
            })
            .collect();
        return (image, annotations);
    }
    panic!("lesion placement failed {MAX_REGENERATIONS} times; sigma range too large for image");
}

/// Generates `n_images` images; a pure function of `(seed, n_images, params)`.
pub fn synth_generate(seed: u64, n_images: usize, params: &SynthParams) -> Result<SynthDataset> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    params.validate()?;
    let largest = 2.0 * params.half_extent(LesionClass::Malignant, params.sigma_range.1).ceil() + 2.0;
    if largest > params.width.min(params.height) as f64 {
        return Err(Error::InvalidArgument("lesions cannot fit in the image".into()));
    }

    let n_m = ((n_images as f64 * params.mix.malignant).round() as usize).min(n_images);
    let n_b = ((n_images as f64 * params.mix.benign).round() as usize).min(n_images - n_m);
    let mut classes: Vec<Option<LesionClass>> = std::iter::repeat(Some(LesionClass::Malignant))
        .take(n_m)
        .chain(std::iter::repeat(Some(LesionClass::Benign)).take(n_b))
        .chain(std::iter::repeat(None).take(n_images - n_m - n_b))
        .collect();
    classes.shuffle(&mut rng_for(seed, &[TAG_SYNTH, 0]));

    let mut images = Vec::with_capacity(n_images);
    let mut entries = Vec::with_capacity(n_images);
    for (i, primary) in classes.iter().enumerate() {
        let (image, annotations) = generate_image(seed, i, *primary, params);
        let id = format!("synth_{i:05}");
        let label = WeakLabel::new(
            annotations.iter().any(|a| a.class == LesionClass::Malignant),
            annotations.iter().any(|a| a.class == LesionClass::Benign),
        );
        entries.push(ManifestEntry {
            image_id: id.clone(),
            patient_id: id.clone(),
            image_path: PathBuf::from(format!("images/{id}.pgm")),
            label,
            mask_path: Some(PathBuf::from(SYNTH_MASK)),
            annotations,
        });
        images.push(image);
    }
    Ok(SynthDataset {
        manifest: DatasetManifest {
            root: PathBuf::new(),
            entries,
        },
        images,
        mask: BinaryMask::full(params.width, params.height),
    })
}

impl SynthDataset {
    /// Writes `manifest.jsonl`, `foreground.pgm` and `images/*.pgm` under `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        for (entry, image) in self.manifest.entries.iter().zip(&self.images) {
            image.write_pgm(dir.join(&entry.image_path))?;
        }
        self.mask.write_pgm(dir.join(SYNTH_MASK))?;
        self.manifest.root = dir.to_path_buf();
        self.manifest.write(dir.join(SYNTH_MANIFEST))
    }

    /// Label counts `(normal, malignant only, benign only, both)`.
    pub fn class_counts(&self) -> [usize; 4] {
        label_counts(&self.manifest)
    }
}

pub fn label_counts(manifest: &DatasetManifest) -> [usize; 4] {
    let mut counts = [0; 4];
    for e in &manifest.entries {
        counts[e.label.code()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            width: 96,
            height: 96,
            ..SynthParams::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = synth_generate(5, 10, &small()).unwrap();
        let b = synth_generate(5, 10, &small()).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(6, 10, &small()).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn all_normal_mix() {
        let p = SynthParams {
            mix: ClassMix {
                malignant: 0.0,
                benign: 0.0,
                normal: 1.0,
            },
            ..small()
        };
        let d = synth_generate(1, 12, &p).unwrap();
        assert!(d.manifest.entries.iter().all(|e| e.label.is_normal() && e.annotations.is_empty()));
    }

    #[test]
    fn labels_follow_planted_lesions_and_fit() {
        let d = synth_generate(2, 40, &small()).unwrap();
        for (e, img) in d.manifest.entries.iter().zip(&d.images) {
            for a in &e.annotations {
                assert!(a.rect.fits_within(img.width(), img.height()));
                assert!(e.label.has(a.class));
            }
            assert_eq!(e.image_id, e.patient_id);
        }
        let counts = d.class_counts();
        // 30% malignant and 30% benign primaries
        assert_eq!(counts[1] + counts[3] + counts[2], 24);
    }

    #[test]
    fn background_stays_in_band_for_normal_images() {
        let p = SynthParams {
            mix: ClassMix {
                malignant: 0.0,
                benign: 0.0,
                normal: 1.0,
            },
            ..small()
        };
        let d = synth_generate(3, 3, &p).unwrap();
        for img in &d.images {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let v = img.value(x, y);
                    assert!((0.2 - 1e-4..=0.6 + 1e-4).contains(&v));
                }
            }
        }
    }

    #[test]
    fn malignant_lesion_is_brighter_along_spikes() {
        let p = SynthParams {
            mix: ClassMix {
                malignant: 1.0,
                benign: 0.0,
                normal: 0.0,
            },
            second_finding_prob: 0.0,
            ..small()
        };
        let d = synth_generate(4, 1, &p).unwrap();
        assert_eq!(d.manifest.entries[0].label, WeakLabel::new(true, false));
        let r = d.manifest.entries[0].annotations[0].rect;
        let inside = d.images[0].patch(&r).iter().cloned().fold(0.0, f64::max);
        assert!(inside > 0.6, "peak {inside}");
    }

    #[test]
    fn mix_parsing() {
        let m = ClassMix::parse_bmn("0:0:1").unwrap();
        assert_eq!(m.normal, 1.0);
        let m = ClassMix::parse_bmn("3:3:4").unwrap();
        assert!((m.benign - 0.3).abs() < 1e-12 && (m.normal - 0.4).abs() < 1e-12);
        assert!(ClassMix::parse_bmn("1:2").is_err());
        assert!(ClassMix::parse_bmn("0:0:0").is_err());
        assert!(ClassMix::parse_bmn("a:1:1").is_err());
    }

    #[test]
    fn written_dataset_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = synth_generate(9, 4, &small()).unwrap();
        d.write(dir.path()).unwrap();
        let m = crate::data::manifest::load_manifest(dir.path().join(SYNTH_MANIFEST)).unwrap();
        assert_eq!(m.entries, d.manifest.entries);
        let img = GrayImage::read_pgm(m.resolve(&m.entries[0].image_path)).unwrap();
        assert_eq!(img, d.images[0]);
    }
}

//! Materialized datasets: every image's region grid paired with its feature
//! matrix, plus (optionally) the pixels needed to re-featurize augmented views.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::augment::{augment, augmentation_pool, AugmentOp, AugmentSample};
use crate::data::manifest::{DatasetManifest, LesionAnnotation, ManifestEntry, WeakLabel};
use crate::data::mask::compute_foreground_mask;
use crate::data::regions::{extract_regions, GridGeometry, GridStatus, Region};
use crate::data::synth::SynthDataset;
use crate::error::{Error, Result};
use crate::features::{FeatureStore, FeatureVector, Featurizer};
use crate::image::{BinaryMask, GrayImage};

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub label: WeakLabel,
    pub annotations: Vec<LesionAnnotation>,
    pub regions: Vec<Region>,
    /// `m × d`, one row per region.
    pub features: Array2<f64>,
    pub width: usize,
    pub height: usize,
}

impl ImageRecord {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }
}

/// Pixels and foreground mask kept for on-the-fly augmentation.
#[derive(Debug, Clone)]
pub struct PixelSource {
    pub image: GrayImage,
    pub mask: Arc<BinaryMask>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub geometry: GridGeometry,
    pub feature_dim: usize,
    pixels: Option<Vec<PixelSource>>,
}

/// Loads an entry's image and its foreground mask (manifest mask, else estimated).
pub fn load_pixels(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    mask_cache: &mut HashMap<PathBuf, Arc<BinaryMask>>,
) -> Result<PixelSource> {
    let image = GrayImage::read_pgm(manifest.resolve(&entry.image_path))?;
    let mask = match &entry.mask_path {
        Some(p) => {
            let path = manifest.resolve(p);
            match mask_cache.get(&path) {
                Some(m) => m.clone(),
                None => {
                    let m = Arc::new(BinaryMask::read_pgm(&path)?);
                    mask_cache.insert(path, m.clone());
                    m
                }
            }
        }
        None => Arc::new(compute_foreground_mask(&image)),
    };
    check_annotations(entry, &image)?;
    Ok(PixelSource { image, mask })
}

fn check_annotations(entry: &ManifestEntry, image: &GrayImage) -> Result<()> {
    for a in &entry.annotations {
        if !a.rect.fits_within(image.width(), image.height()) {
            return Err(Error::Data(format!(
                "annotation {:?} of `{}` exceeds image bounds {}x{}",
                a.rect,
                entry.image_id,
                image.width(),
                image.height()
            )));
        }
    }
    Ok(())
}

fn stack(rows: &[&FeatureVector], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        for (d, &s) in dst.iter_mut().zip(src.as_slice()) {
            *d = s as f64;
        }
    }
    out
}

/// Featurizes every retained region of every image, images in parallel.
pub fn extract_store(
    manifest: &DatasetManifest,
    pixels: &[PixelSource],
    featurizer: &Featurizer,
    geometry: &GridGeometry,
) -> Result<(FeatureStore, Vec<usize>)> {
    let per_image: Vec<Result<(Vec<Region>, Vec<FeatureVector>)>> = manifest
        .entries
        .par_iter()
        .zip(pixels.par_iter())
        .map(|(entry, px)| {
            let grid = extract_regions(&entry.image_id, &px.image, &px.mask, geometry)?;
            let feats = featurizer.featurize_grid(&px.image, &grid)?;
            Ok((grid.regions, feats))
        })
        .collect();
    let mut store = FeatureStore::new(featurizer.dim());
    let mut counts = Vec::with_capacity(per_image.len());
    for (entry, res) in manifest.entries.iter().zip(per_image) {
        let (regions, feats) = res?;
        counts.push(regions.len());
        for (r, f) in regions.iter().zip(feats) {
            store.insert(&entry.image_id, r.index, f)?;
        }
    }
    Ok((store, counts))
}

impl Dataset {
    /// Joins a manifest with a feature store. Region grids are recomputed from
    /// the pixels so bounding boxes are available for localization.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        store: &FeatureStore,
        geometry: GridGeometry,
        keep_pixels: bool,
    ) -> Result<Self> {
        let mut cache = HashMap::new();
        let pixels: Vec<PixelSource> = manifest
            .entries
            .iter()
            .map(|e| load_pixels(manifest, e, &mut cache))
            .collect::<Result<_>>()?;
        Self::assemble(manifest, pixels, store, geometry, keep_pixels)
    }

    /// In-memory path for a freshly generated synthetic dataset.
    pub fn from_synth(
        synth: &SynthDataset,
        featurizer: &Featurizer,
        geometry: GridGeometry,
        keep_pixels: bool,
    ) -> Result<Self> {
        let mask = Arc::new(synth.mask.clone());
        let pixels: Vec<PixelSource> = synth
            .images
            .iter()
            .map(|image| PixelSource {
                image: image.clone(),
                mask: mask.clone(),
            })
            .collect();
        let (store, _) = extract_store(&synth.manifest, &pixels, featurizer, &geometry)?;
        Self::assemble(&synth.manifest, pixels, &store, geometry, keep_pixels)
    }

    fn assemble(
        manifest: &DatasetManifest,
        pixels: Vec<PixelSource>,
        store: &FeatureStore,
        geometry: GridGeometry,
        keep_pixels: bool,
    ) -> Result<Self> {
        let dim = store.dim();
        let records = manifest
            .entries
            .iter()
            .zip(&pixels)
            .map(|(entry, px)| {
                let grid = extract_regions(&entry.image_id, &px.image, &px.mask, &geometry)?;
                if grid.status == GridStatus::WindowLargerThanImage {
                    log::warn!("image `{}` yields no regions", entry.image_id);
                }
                let rows: Vec<&FeatureVector> = grid
                    .regions
                    .iter()
                    .map(|r| store.get(&entry.image_id, r.index))
                    .collect::<Result<_>>()?;
                Ok(ImageRecord {
                    image_id: entry.image_id.clone(),
                    patient_id: entry.patient_id.clone(),
                    label: entry.label,
                    annotations: entry.annotations.clone(),
                    regions: grid.regions,
                    features: stack(&rows, dim),
                    width: px.image.width(),
                    height: px.image.height(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            records,
            geometry,
            feature_dim: dim,
            pixels: keep_pixels.then_some(pixels),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_pixels(&self) -> bool {
        self.pixels.is_some()
    }

    pub fn pixels(&self, index: usize) -> Option<&PixelSource> {
        self.pixels.as_ref().map(|p| &p[index])
    }

    pub fn index_of(&self, image_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.image_id == image_id)
    }

    /// Manifest-shaped view used for fold splitting.
    pub fn manifest_view(&self) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::new(),
            entries: self
                .records
                .iter()
                .map(|r| ManifestEntry {
                    image_id: r.image_id.clone(),
                    patient_id: r.patient_id.clone(),
                    image_path: PathBuf::new(),
                    label: r.label,
                    mask_path: None,
                    annotations: r.annotations.clone(),
                })
                .collect(),
        }
    }

    /// Releases the retained pixels (e.g. once an [`AugmentBank`] is built).
    pub fn drop_pixels(&mut self) {
        self.pixels = None;
    }

    /// Features of an augmented view of image `index`.
    pub fn augmented_features(
        &self,
        index: usize,
        ops: &[AugmentOp],
        featurizer: &Featurizer,
    ) -> Result<Array2<f64>> {
        if ops.is_empty() {
            return Ok(self.records[index].features.clone());
        }
        let px = self
            .pixels(index)
            .ok_or_else(|| Error::InvalidArgument("augmentation needs image pixels".into()))?;
        let rec = &self.records[index];
        let sample = AugmentSample {
            image: px.image.clone(),
            mask: (*px.mask).clone(),
            label: rec.label,
            annotations: Vec::new(),
        };
        let out = augment(&sample, ops, self.geometry.stride)?;
        let grid = extract_regions(&rec.image_id, &out.image, &out.mask, &self.geometry)?;
        let feats = featurizer.featurize_grid(&out.image, &grid)?;
        let rows: Vec<&FeatureVector> = feats.iter().collect();
        Ok(stack(&rows, self.feature_dim))
    }
}

/// Precomputed features of every augmentation-pool view of every image.
#[derive(Debug, Clone)]
pub struct AugmentBank {
    pub max_shift: usize,
    pub pool: Vec<Vec<AugmentOp>>,
    /// `views[image][j]` holds pool entry `j + 1` (entry 0 is the identity).
    views: Vec<Vec<Array2<f32>>>,
}

impl AugmentBank {
    pub fn build(dataset: &Dataset, featurizer: &Featurizer, max_shift: usize) -> Result<Self> {
        if featurizer.dim() != dataset.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: dataset.feature_dim,
                actual: featurizer.dim(),
            });
        }
        if max_shift >= dataset.geometry.stride {
            return Err(Error::InvalidArgument(format!(
                "max_shift {max_shift} must be smaller than the stride {}",
                dataset.geometry.stride
            )));
        }
        if !dataset.has_pixels() {
            return Err(Error::InvalidArgument("augmentation requires image pixels".into()));
        }
        let pool = augmentation_pool(max_shift);
        let views = (0..dataset.len())
            .into_par_iter()
            .map(|i| {
                pool[1..]
                    .iter()
                    .map(|ops| Ok(dataset.augmented_features(i, ops, featurizer)?.mapv(|v| v as f32)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AugmentBank { max_shift, pool, views })
    }

    pub fn n_images(&self) -> usize {
        self.views.len()
    }

    /// Features of pool view `view` of image `index`; `None` for the identity.
    pub fn view(&self, index: usize, view: usize) -> Option<&Array2<f32>> {
        view.checked_sub(1).map(|j| &self.views[index][j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthParams};

    #[test]
    fn synth_dataset_has_49_regions_per_image() {
        let synth = synth_generate(1, 3, &SynthParams::default()).unwrap();
        let fz = Featurizer::new(0, 16);
        let ds = Dataset::from_synth(&synth, &fz, GridGeometry::default(), true).unwrap();
        assert!(ds.records.iter().all(|r| r.n_regions() == 49 && r.features.dim() == (49, 16)));
        // identity augmentation reproduces the cached features
        let same = ds.augmented_features(0, &[], &fz).unwrap();
        assert_eq!(same, ds.records[0].features);
        let flipped = ds.augmented_features(0, &[AugmentOp::FlipHorizontal], &fz).unwrap();
        assert_eq!(flipped.dim(), (49, 16));
        assert_ne!(flipped, ds.records[0].features);

        let bank = AugmentBank::build(&ds, &fz, 4).unwrap();
        assert!(bank.view(1, 0).is_none());
        let rot = bank.view(1, 2).unwrap().mapv(f64::from);
        assert_eq!(rot, ds.augmented_features(1, &[AugmentOp::Rotate90(2)], &fz).unwrap().mapv(|v| v as f32 as f64));
        assert!(AugmentBank::build(&ds, &fz, 32).is_err());
    }
}

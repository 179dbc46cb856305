//! Region featurization and the `FEAT1` feature-file format.
//!
//! The built-in featurizer standardizes a square patch, area-averages it down to
//! 32×32, applies a fixed seeded ±1/32 sign projection and squashes with `tanh`.
//! Externally computed codes enter through [`ingest_features`].
//!
//! File layout (little-endian): `b"FEAT1"`, `u32` record count, `u32` dim, then
//! per record `u16` id length, id bytes, `u32` region index, `dim × f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::data::regions::RegionGrid;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::seed::{rng_for, TAG_PROJECTION};

pub const DEFAULT_FEATURE_DIM: usize = 128;
pub const DOWNSAMPLED_SIDE: usize = 32;
const PROJECTED_LEN: usize = DOWNSAMPLED_SIDE * DOWNSAMPLED_SIDE;
const VARIANCE_FLOOR: f64 = 1e-8;
const MAGIC: &[u8; 5] = b"FEAT1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f32>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Area-weight matrix mapping `len` source samples onto `out` equal bins.
fn area_weights(len: usize, out: usize) -> Array2<f64> {
    let scale = len as f64 / out as f64;
    Array2::from_shape_fn((out, len), |(r, s)| {
        let (lo, hi) = (r as f64 * scale, (r + 1) as f64 * scale);
        let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
        overlap / scale
    })
}

/// Area averaging onto the 32×32 grid: whole blocks when the side is a
/// multiple of 32, fractional overlap weights otherwise.
enum Downsample {
    Block(usize),
    Weights(Array2<f64>),
}

#[derive(Debug, Clone)]
pub struct Featurizer {
    seed: u64,
    dim: usize,
    /// `PROJECTED_LEN × dim`, entries ±1/32.
    projection_t: Array2<f64>,
}

impl Featurizer {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = rng_for(seed, &[TAG_PROJECTION, dim as u64]);
        let amp = 1.0 / (PROJECTED_LEN as f64).sqrt();
        // row-major d × 1024, stored transposed for the batch product
        let proj = Array2::from_shape_fn((dim, PROJECTED_LEN), |_| if rng.gen::<bool>() { amp } else { -amp });
        Featurizer {
            seed,
            dim,
            projection_t: proj.reversed_axes().as_standard_layout().into_owned(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Standardized, downsampled 1024-vector for one square patch.
    fn reduce(patch: ArrayView2<f64>, down: &Downsample) -> Vec<f64> {
        let first = patch.iter().next().copied().unwrap_or(0.0);
        if patch.iter().all(|&v| v == first) {
            return vec![0.0; PROJECTED_LEN];
        }
        let n = patch.len() as f64;
        let mean = patch.sum() / n;
        let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
        match down {
            Downsample::Block(f) => {
                // standardization is affine, so it commutes with block averaging
                let mut small = vec![0.0; PROJECTED_LEN];
                for (y, row) in patch.rows().into_iter().enumerate() {
                    let out = &mut small[(y / f) * DOWNSAMPLED_SIDE..(y / f + 1) * DOWNSAMPLED_SIDE];
                    for (x, &v) in row.iter().enumerate() {
                        out[x / f] += v;
                    }
                }
                let scale = inv_std / (f * f) as f64;
                small.iter_mut().for_each(|v| *v = (*v * scale) - mean * inv_std);
                small
            }
            Downsample::Weights(w) => {
                let standardized = patch.mapv(|v| (v - mean) * inv_std);
                w.dot(&standardized).dot(&w.t()).iter().copied().collect()
            }
        }
    }

    pub fn featurize_patch(&self, patch: ArrayView2<f64>) -> Result<FeatureVector> {
        Ok(self.featurize_patches(&[patch])?.pop().expect("one patch"))
    }

    /// Featurizes square patches of a common side length in one matrix product.
    pub fn featurize_patches(&self, patches: &[ArrayView2<f64>]) -> Result<Vec<FeatureVector>> {
        let Some(first) = patches.first() else {
            return Ok(Vec::new());
        };
        let side = first.nrows();
        for p in patches {
            if p.nrows() != p.ncols() || p.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "patch must be square and nonempty, got {}x{}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            if p.nrows() != side {
                return Err(Error::DimensionMismatch {
                    expected: side,
                    actual: p.nrows(),
                });
            }
        }
        let down = if side % DOWNSAMPLED_SIDE == 0 {
            Downsample::Block(side / DOWNSAMPLED_SIDE)
        } else {
            Downsample::Weights(area_weights(side, DOWNSAMPLED_SIDE))
        };
        let mut reduced = Array2::<f64>::zeros((patches.len(), PROJECTED_LEN));
        for (mut row, p) in reduced.rows_mut().into_iter().zip(patches) {
            row.assign(&ndarray::Array1::from(Self::reduce(*p, &down)));
        }
        let projected = reduced.dot(&self.projection_t);
        Ok(projected
            .rows()
            .into_iter()
            .map(|r| FeatureVector(r.iter().map(|v| v.tanh() as f32).collect()))
            .collect())
    }

    /// Features for every region of a grid, in grid order.
    pub fn featurize_grid(&self, image: &GrayImage, grid: &RegionGrid) -> Result<Vec<FeatureVector>> {
        let side = grid.window;
        let patches: Vec<Array2<f64>> = grid
            .regions
            .iter()
            .map(|r| Array2::from_shape_vec((side, side), image.patch(&r.bbox)).expect("window patch"))
            .collect();
        let views: Vec<ArrayView2<f64>> = patches.iter().map(|p| p.view()).collect();
        self.featurize_patches(&views)
    }
}

/// Convenience wrapper building a throwaway [`Featurizer`].
pub fn featurize_patch(patch: ArrayView2<f64>, seed: u64, dim: usize) -> Result<FeatureVector> {
    Featurizer::new(seed, dim).featurize_patch(patch)
}

/// Region features keyed by `(image_id, region_index)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStore {
    dim: usize,
    map: BTreeMap<(String, u32), FeatureVector>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim,
            map: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, image_id: &str, region_index: u32, features: FeatureVector) -> Result<()> {
        if features.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: features.dim(),
            });
        }
        if features.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature for ({image_id}, {region_index})"
            )));
        }
        if image_id.len() > u16::MAX as usize {
            return Err(Error::Data("image_id longer than 65535 bytes".into()));
        }
        match self.map.entry((image_id.to_string(), region_index)) {
            std::collections::btree_map::Entry::Occupied(_) => Err(Error::Data(format!(
                "duplicate feature record ({image_id}, {region_index})"
            ))),
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(features);
                Ok(())
            }
        }
    }

    pub fn get(&self, image_id: &str, region_index: u32) -> Result<&FeatureVector> {
        self.map
            .get(&(image_id.to_string(), region_index))
            .ok_or_else(|| Error::Data(format!("missing features for ({image_id}, {region_index})")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, &FeatureVector)> {
        self.map.iter().map(|((id, idx), v)| (id.as_str(), *idx, v))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.map.len() * (10 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.map.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for ((id, idx), v) in &self.map {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&idx.to_le_bytes());
            for x in &v.0 {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        struct Cursor<'a> {
            bytes: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.pos + n > self.bytes.len() {
                    return Err(Error::Format(format!(
                        "truncated feature file: expected at least {} bytes, found {}",
                        self.pos + n,
                        self.bytes.len()
                    )));
                }
                let s = &self.bytes[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
            fn u32(&mut self) -> Result<u32> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
            }
        }

        let mut cur = Cursor { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("feature file magic mismatch (expected FEAT1)".into()));
        }
        cur.take(MAGIC.len())?;
        let count = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut store = FeatureStore::new(dim);
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
            let id = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("image_id is not UTF-8".into()))?
                .to_string();
            let idx = cur.u32()?;
            let payload = cur.take(4 * dim)?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.insert(&id, idx, FeatureVector(values))?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "trailing bytes in feature file: expected {} bytes, found {}",
                cur.pos,
                bytes.len()
            )));
        }
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

pub fn ingest_features(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureStore::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_patch(seed: u64, side: usize) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((side, side), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn constant_patch_maps_to_zero() {
        let f = featurize_patch(Array2::from_elem((64, 64), 0.37).view(), 1, 16).unwrap();
        assert!(f.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic() {
        let p = random_patch(3, 64);
        let fz = Featurizer::new(9, 128);
        assert_eq!(fz.featurize_patch(p.view()).unwrap(), fz.featurize_patch(p.view()).unwrap());
        assert_eq!(fz.featurize_patch(p.view()).unwrap(), featurize_patch(p.view(), 9, 128).unwrap());
    }

    #[test]
    fn negated_patch_negates_features() {
        let p = random_patch(4, 48);
        let fz = Featurizer::new(2, 32);
        let a = fz.featurize_patch(p.view()).unwrap();
        let b = fz.featurize_patch(p.mapv(|v| -v).view()).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x + y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn non_square_rejected() {
        let p = Array2::<f64>::zeros((4, 5));
        assert!(featurize_patch(p.view(), 0, 8).is_err());
    }

    #[test]
    fn block_average_matches_area_weights() {
        let p = random_patch(9, 64);
        let w = area_weights(64, DOWNSAMPLED_SIDE);
        let block = Featurizer::reduce(p.view(), &Downsample::Block(2));
        let dense = Featurizer::reduce(p.view(), &Downsample::Weights(w));
        for (a, b) in block.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn area_weights_rows_sum_to_one() {
        for len in [7usize, 32, 64, 224] {
            let w = area_weights(len, DOWNSAMPLED_SIDE);
            for r in w.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
        // exact 2x2 pooling at 64 → 32
        let w = area_weights(64, 32);
        assert_eq!(w[[3, 6]], 0.5);
        assert_eq!(w[[3, 7]], 0.5);
        assert_eq!(w[[3, 8]], 0.0);
    }

    #[test]
    fn two_record_store() {
        let mut s = FeatureStore::new(4);
        s.insert("a", 0, FeatureVector(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        s.insert("b", 7, FeatureVector(vec![0.5; 4])).unwrap();
        let back = FeatureStore::decode(&s.encode()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.dim(), 4);
        assert!(s.insert("a", 0, FeatureVector(vec![0.0; 4])).is_err());
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut s = FeatureStore::new(4);
        s.insert("a", 0, FeatureVector(vec![1.0; 4])).unwrap();
        let bytes = s.encode();
        let err = FeatureStore::decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("expected at least 36 bytes, found 33"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FeatureStore::decode(&bad).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn duplicate_records_rejected_on_ingest() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&1u16.to_le_bytes());
            bytes.push(b'z');
            bytes.extend_from_slice(&3u32.to_le_bytes());
            bytes.extend_from_slice(&1.5f32.to_le_bytes());
        }
        assert!(FeatureStore::decode(&bytes).unwrap_err().to_string().contains("duplicate"));
    }

    proptest! {
        #[test]
        fn affine_intensity_invariance(seed in any::<u64>(), a in 0.05f64..20.0, b in -5.0f64..5.0) {
            let p = random_patch(seed, 32);
            let fz = Featurizer::new(1, 16);
            let x = fz.featurize_patch(p.view()).unwrap();
            let y = fz.featurize_patch(p.mapv(|v| a * v + b).view()).unwrap();
            for (u, v) in x.0.iter().zip(&y.0) {
                prop_assert!((u - v).abs() < 1e-6);
                prop_assert!(u.abs() < 1.0);
            }
        }

        #[test]
        fn file_roundtrip(records in proptest::collection::vec(("[a-z]{1,6}", 0u32..50, proptest::collection::vec(-1e3f32..1e3, 3)), 0..20)) {
            let mut s = FeatureStore::new(3);
            for (id, idx, v) in records {
                let _ = s.insert(&id, idx, FeatureVector(v));
            }
            let back = FeatureStore::decode(&s.encode()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}

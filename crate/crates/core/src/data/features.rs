//! Visual feature grids and the `RPF1` file format.
//!
//! A grid is the spatial output of an image backbone: `grid_h x grid_w`
//! block regions, each a `channels`-dimensional vector. Files hold the magic
//! `RPF1`, three little-endian `u32` dims `(h, w, c)`, then `h*w*c`
//! little-endian `f64` values in row-major block order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"RPF1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub values: Vec<Real>,
}

impl FeatureGrid {
    pub fn new(grid_h: usize, grid_w: usize, channels: usize, values: Vec<Real>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || channels == 0 {
            return Err(Error::invalid("feature_grid", "zero-sized dimension"));
        }
        if values.len() != grid_h * grid_w * channels {
            return Err(Error::invalid(
                "feature_grid",
                format!(
                    "{grid_h}x{grid_w}x{channels} grid needs {} values, got {}",
                    grid_h * grid_w * channels,
                    values.len()
                ),
            ));
        }
        Ok(FeatureGrid {
            grid_h,
            grid_w,
            channels,
            values,
        })
    }

    /// Number of block regions, `m`.
    pub fn blocks(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn block(&self, j: usize) -> &[Real] {
        &self.values[j * self.channels..(j + 1) * self.channels]
    }

    /// Row-major flattening to an `[m, channels]` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.blocks(), self.channels], self.values.clone()).expect("validated grid")
    }

    /// Per-channel mean over all blocks.
    pub fn mean_feature(&self) -> Vec<Real> {
        let mut mean = vec![0.0; self.channels];
        for j in 0..self.blocks() {
            for (m, v) in mean.iter_mut().zip(self.block(j)) {
                *m += v;
            }
        }
        let m = self.blocks() as Real;
        mean.iter_mut().for_each(|v| *v /= m);
        mean
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 8);
        out.extend_from_slice(FEATURE_MAGIC);
        for d in [self.grid_h, self.grid_w, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> std::result::Result<Self, String> {
        if buf.len() < 16 || &buf[..4] != FEATURE_MAGIC {
            return Err("bad magic, expected RPF1".into());
        }
        let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let expected = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .and_then(|v| v.checked_mul(8))
            .ok_or("dimension overflow")?;
        let payload = &buf[16..];
        if payload.len() < expected {
            return Err(format!(
                "truncated payload: header {h}x{w}x{c} needs {expected} bytes, found {}",
                payload.len()
            ));
        }
        if payload.len() > expected {
            return Err(format!("{} trailing bytes", payload.len() - expected));
        }
        let values = payload
            .chunks_exact(8)
            .map(|b| Real::from_le_bytes(b.try_into().unwrap()))
            .collect();
        FeatureGrid::new(h, w, c, values).map_err(|e| e.to_string())
    }
}

pub fn write_feature_grid(grid: &FeatureGrid, path: &Path) -> Result<()> {
    fs::write(path, grid.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_feature_grid(path: &Path) -> Result<FeatureGrid> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureGrid::decode(&buf).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// Anything that can produce a grid for an image reference. Files are the
/// only source shipped; a live extractor can plug in here.
pub trait FeatureSource {
    fn grid(&mut self, image_ref: &str) -> Result<&FeatureGrid>;
}

/// Loads `RPF1` files relative to a base directory, caching each grid.
#[derive(Debug, Default)]
pub struct FileFeatureSource {
    base: PathBuf,
    cache: HashMap<String, FeatureGrid>,
}

impl FileFeatureSource {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        FileFeatureSource {
            base: base.into(),
            cache: HashMap::new(),
        }
    }

    pub fn resolve(&self, image_ref: &str) -> PathBuf {
        let p = Path::new(image_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

impl FeatureSource for FileFeatureSource {
    fn grid(&mut self, image_ref: &str) -> Result<&FeatureGrid> {
        if !self.cache.contains_key(image_ref) {
            let grid = load_feature_grid(&self.resolve(image_ref))?;
            self.cache.insert(image_ref.to_string(), grid);
        }
        Ok(&self.cache[image_ref])
    }
}

/// In-memory grids keyed by reference (synthetic data, tests).
#[derive(Debug, Default, Clone)]
pub struct MemoryFeatureSource {
    pub grids: HashMap<String, FeatureGrid>,
}

impl FeatureSource for MemoryFeatureSource {
    fn grid(&mut self, image_ref: &str) -> Result<&FeatureGrid> {
        self.grids
            .get(image_ref)
            .ok_or_else(|| Error::invalid("feature_source", format!("no grid for `{image_ref}`")))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<Real> = (0..7 * 7 * 16).map(|_| rng.gen::<Real>() * 1e3 - 5e2).collect();
        let grid = FeatureGrid::new(7, 7, 16, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.rpf");
        write_feature_grid(&grid, &path).unwrap();
        let back = load_feature_grid(&path).unwrap();
        assert!(back
            .values
            .iter()
            .zip(&grid.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, grid);
    }

    #[test]
    fn short_payload_is_truncation_error() {
        let mut buf = FEATURE_MAGIC.to_vec();
        for d in [7u32, 7, 2048] {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&[0u8; 800]);
        let err = FeatureGrid::decode(&buf).unwrap_err();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = FeatureGrid::new(1, 1, 1, vec![1.0]).unwrap().encode();
        bytes[3] = b'9';
        assert!(FeatureGrid::decode(&bytes).unwrap_err().contains("magic"));
    }

    #[test]
    fn single_block_grid_is_accepted() {
        let grid = FeatureGrid::new(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let back = FeatureGrid::decode(&grid.encode()).unwrap();
        assert_eq!(back.blocks(), 1);
        assert_eq!(back.block(0), &[1.0, 2.0, 3.0, 4.0]);
    }
}

//! Per-tracklet regional feature files.
//!
//! Layout: magic `AGRF`, then `version`, `T`, `N`, `d` as little-endian
//! `u32`, then `T·N·d` little-endian `f64` values, frame-major then
//! region-major.

use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AGRF";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 * 4;

/// Regional features of one tracklet: `frames × regions` rows of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub frames: usize,
    pub regions: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureFile {
    pub fn new(frames: usize, regions: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * regions * dim {
            return Err(Error::invalid(format!(
                "{} values for {frames}x{regions}x{dim} features",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            regions,
            dim,
            data,
        })
    }

    /// Rows of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.regions * self.dim;
        &self.data[t * w..(t + 1) * w]
    }

    /// Node matrix for the given frame indices, `(frames.len()·N) × d`.
    pub fn nodes(&self, frames: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(frames.len() * self.regions * self.dim);
        for &t in frames {
            data.extend_from_slice(self.frame(t));
        }
        Tensor::from_parts(vec![frames.len() * self.regions, self.dim], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.frames as u32, self.regions as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a feature file (missing AGRF header)"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (version, frames, regions, dim) = (word(0), word(1), word(2), word(3));
        if version != VERSION as usize {
            return Err(Error::format(path, format!("unsupported feature file version {version}")));
        }
        let expect = frames * regions * dim;
        let payload = &bytes[HEADER..];
        if payload.len() != 8 * expect {
            return Err(Error::format(
                path,
                format!("payload has {} bytes, header {frames}x{regions}x{dim} needs {}", payload.len(), 8 * expect),
            ));
        }
        if frames == 0 || regions == 0 || dim == 0 {
            return Err(Error::format(path, "empty feature tensor"));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, "non-finite feature value"));
        }
        Ok(Self {
            frames,
            regions,
            dim,
            data,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_malformed_files() {
        let p = Path::new("x.agrf");
        assert!(FeatureFile::from_bytes(b"NOPE", p).is_err());
        let mut ok = FeatureFile::new(1, 1, 2, vec![1.0, 2.0]).unwrap().to_bytes();
        ok.pop();
        let err = FeatureFile::from_bytes(&ok, p).unwrap_err().to_string();
        assert!(err.contains("x.agrf"), "{err}");
        let mut v2 = FeatureFile::new(1, 1, 1, vec![1.0]).unwrap().to_bytes();
        v2[4] = 2;
        assert!(FeatureFile::from_bytes(&v2, p).is_err());
        assert!(FeatureFile::new(2, 1, 1, vec![1.0]).is_err());
    }

    #[test]
    fn node_rows_follow_frame_order() {
        let f = FeatureFile::new(3, 2, 1, vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        assert_eq!(f.nodes(&[2, 0]).data(), &[20.0, 21.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(t in 1usize..4, n in 1usize..8, d in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..t * n * d)
                .map(|i| f64::from_bits((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 12) | 0x3ff0_0000_0000_0000) - 1.5)
                .collect();
            let f = FeatureFile::new(t, n, d, data).unwrap();
            let back = FeatureFile::from_bytes(&f.to_bytes(), Path::new("p")).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}

//! MVOL: a minimal little-endian volume container.
//!
//! Layout: the 6-byte magic `MVOL1\n`, a `u32` LE header length `L`, `L` bytes
//! of UTF-8 JSON describing the geometry, then `D*H*W` `f32` LE voxels with W
//! varying fastest.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MVOL_MAGIC: &[u8; 6] = b"MVOL1\n";
pub const ORIENTATION: &str = "RAS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "DWI")]
    Dwi,
    #[serde(rename = "ADC")]
    Adc,
    #[serde(rename = "MASK")]
    Mask,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Dwi => "DWI",
            Modality::Adc => "ADC",
            Modality::Mask => "MASK",
        })
    }
}

/// A 3D scalar field. `dims` is `[D, H, W]`; `spacing_mm` is `[sx, sy, sz]`,
/// i.e. the spacing along W, H and D respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub modality: Modality,
    pub voxels: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    modality: Modality,
    orientation: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], modality: Modality, voxels: Vec<f32>) -> Result<Self> {
        let v = Volume { dims, spacing_mm, modality, voxels };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(dims: [usize; 3], spacing_mm: [f64; 3], modality: Modality, value: f32) -> Result<Self> {
        Self::new(dims, spacing_mm, modality, vec![value; dims.iter().product()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Header(format!("dims must be positive, got {:?}", self.dims)));
        }
        if !self.spacing_mm.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::Header(format!("spacing must be positive, got {:?}", self.spacing_mm)));
        }
        let n = self.len();
        if self.voxels.len() != n {
            return Err(Error::PayloadLength { expected: n * 4, actual: self.voxels.len() * 4 });
        }
        if let Some(i) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("voxel {i} is not finite")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    /// Same geometry, new values and modality.
    pub fn with_voxels(&self, modality: Modality, voxels: Vec<f32>) -> Result<Volume> {
        Volume::new(self.dims, self.spacing_mm, modality, voxels)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&Header {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            dtype: "f32".into(),
            modality: self.modality,
            orientation: ORIENTATION.into(),
        })?;
        let mut out = Vec::with_capacity(10 + header.len() + self.voxels.len() * 4);
        out.extend_from_slice(MVOL_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Volume> {
        if bytes.len() < MVOL_MAGIC.len() || &bytes[..6] != MVOL_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 10 {
            return Err(Error::Truncated("header length missing".into()));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = &bytes[10..];
        if body.len() < hlen {
            return Err(Error::Truncated(format!("header needs {hlen} bytes, file has {}", body.len())));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Header(format!("unreadable header: {e}")))?;
        if header.dtype != "f32" {
            return Err(Error::Header(format!("unsupported dtype {:?}", header.dtype)));
        }
        if header.orientation != ORIENTATION {
            return Err(Error::Header(format!("unsupported orientation {:?}", header.orientation)));
        }
        let payload = &body[hlen..];
        if payload.len() % 4 != 0 {
            return Err(Error::Truncated(format!("payload of {} bytes ends inside a voxel", payload.len())));
        }
        let expected = header.dims.iter().product::<usize>() * 4;
        if payload.len() != expected {
            return Err(Error::PayloadLength { expected, actual: payload.len() });
        }
        let voxels = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Volume::new(header.dims, header.spacing_mm, header.modality, voxels)
    }
}

pub fn write_mvol(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, volume.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes)
}

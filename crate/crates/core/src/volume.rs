//! Volume container I/O.
//!
//! A volume is stored as a pair of files sharing a stem: `<stem>.mvol.json`
//! (header sidecar) and `<stem>.mvol.raw` (payload, little-endian, x-fastest:
//! linear index = x + nx*(y + ny*z)). The format is bit-exact: writing the
//! same volume twice produces identical bytes.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const HEADER_EXT: &str = ".mvol.json";
pub const RAW_EXT: &str = ".mvol.raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "HU")]
    Hu,
    #[serde(rename = "normalized")]
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "i16")]
    I16,
    #[serde(rename = "f32")]
    F32,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::I16 => 2,
            Dtype::F32 => 4,
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            Dtype::I16 => "i16",
            Dtype::F32 => "f32",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub unit: Unit,
    pub dtype: Dtype,
}

impl VolumeHeader {
    pub fn voxel_count(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        for (i, &n) in self.shape.iter().enumerate() {
            if n < 1 {
                return Err(Error::InvalidHeader {
                    path: path.to_path_buf(),
                    field: format!("shape[{i}]"),
                    message: format!("must be >= 1, got {n}"),
                });
            }
        }
        for (i, &s) in self.spacing_mm.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidHeader {
                    path: path.to_path_buf(),
                    field: format!("spacing_mm[{i}]"),
                    message: format!("must be > 0, got {s}"),
                });
            }
        }
        if self.dtype == Dtype::I16 && self.unit != Unit::Hu {
            return Err(Error::InvalidHeader {
                path: path.to_path_buf(),
                field: "dtype".into(),
                message: "i16 payload is only permitted with unit HU".into(),
            });
        }
        Ok(())
    }
}

/// Scalar voxel grid with physical spacing. Voxels are held as `f32` in
/// memory regardless of on-disk dtype; an `i16` volume therefore only admits
/// integral values in the i16 range, which keeps round-trips bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(header: VolumeHeader, voxels: Vec<f32>) -> Result<Self> {
        let v = Volume { header, voxels };
        v.check_invariants()?;
        Ok(v)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.voxels.len() != self.header.voxel_count() {
            return Err(Error::InvalidVolume(format!(
                "voxel count {} does not match shape {:?}",
                self.voxels.len(),
                self.header.shape
            )));
        }
        if self.header.unit == Unit::Normalized {
            if let Some(&v) = self
                .voxels
                .iter()
                .find(|v| !(**v >= 0.0 && **v <= 1.0))
            {
                return Err(Error::InvalidVolume(format!(
                    "unit is normalized but voxel value {v} lies outside [0,1]"
                )));
            }
        }
        if self.header.dtype == Dtype::I16 {
            if let Some(&v) = self
                .voxels
                .iter()
                .find(|v| v.fract() != 0.0 || **v < i16::MIN as f32 || **v > i16::MAX as f32)
            {
                return Err(Error::InvalidVolume(format!(
                    "dtype is i16 but voxel value {v} is not an integral i16"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.header.shape
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.header.shape;
        x + nx * (y + ny * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.voxels {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

/// Binary mask on the same grid contract as `Volume`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub header: VolumeHeader,
    pub voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(header: VolumeHeader, voxels: Vec<u8>) -> Result<Self> {
        if voxels.len() != header.voxel_count() {
            return Err(Error::InvalidVolume(format!(
                "mask voxel count {} does not match shape {:?}",
                voxels.len(),
                header.shape
            )));
        }
        if let Some(&v) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidVolume(format!(
                "mask values must be 0 or 1, got {v}"
            )));
        }
        Ok(MaskVolume { header, voxels })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        let [nx, ny, _] = self.header.shape;
        self.voxels[x + nx * (y + ny * z)]
    }

    /// Grid equality against a companion volume: shape and spacing must match
    /// exactly. Masks are never resampled implicitly.
    pub fn check_grid(&self, vol: &Volume) -> Result<()> {
        if self.header.shape != vol.header.shape || self.header.spacing_mm != vol.header.spacing_mm
        {
            return Err(Error::GridMismatch(format!(
                "mask grid {:?} @ {:?} mm vs volume grid {:?} @ {:?} mm",
                self.header.shape,
                self.header.spacing_mm,
                vol.header.shape,
                vol.header.spacing_mm
            )));
        }
        Ok(())
    }
}

/// Resolve `<stem>`, `<stem>.mvol.json` or `<stem>.mvol.raw` to the stem.
fn stem_of(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    if let Some(stripped) = s.strip_suffix(HEADER_EXT) {
        PathBuf::from(stripped)
    } else if let Some(stripped) = s.strip_suffix(RAW_EXT) {
        PathBuf::from(stripped)
    } else {
        path.to_path_buf()
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = stem_of(path).into_os_string();
    s.push(HEADER_EXT);
    PathBuf::from(s)
}

pub fn raw_path(path: &Path) -> PathBuf {
    let mut s = stem_of(path).into_os_string();
    s.push(RAW_EXT);
    PathBuf::from(s)
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::InvalidHeader {
        path: hp.clone(),
        field: "<json>".into(),
        message: e.to_string(),
    })?;
    header.validate(&hp)?;
    Ok(header)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    let rp = raw_path(path);
    let bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let expected = header.voxel_count() * header.dtype.size_bytes();
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            path: rp,
            expected,
            actual: bytes.len(),
            shape: header.shape,
            dtype: header.dtype.name(),
        });
    }
    let voxels = match header.dtype {
        Dtype::I16 => bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    };
    Volume::new(header, voxels)
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    volume.check_invariants()?;
    let hp = header_path(path);
    volume.header.validate(&hp)?;
    let json = serde_json::to_string_pretty(&volume.header)?;
    fs::write(&hp, json).map_err(|e| Error::io(&hp, e))?;

    let rp = raw_path(path);
    let mut bytes = Vec::with_capacity(volume.voxels.len() * volume.header.dtype.size_bytes());
    match volume.header.dtype {
        Dtype::I16 => {
            for &v in &volume.voxels {
                bytes.extend_from_slice(&(v as i16).to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in &volume.voxels {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(&rp, bytes).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    let vol = read_volume(path)?;
    let voxels = vol
        .voxels
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(0u8)
            } else if v == 1.0 {
                Ok(1u8)
            } else {
                Err(Error::InvalidVolume(format!(
                    "mask voxel value {v} is neither 0 nor 1"
                )))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    MaskVolume::new(vol.header, voxels)
}

pub fn write_mask(mask: &MaskVolume, path: &Path) -> Result<()> {
    let vol = Volume::new(
        VolumeHeader {
            dtype: Dtype::I16,
            unit: Unit::Hu,
            ..mask.header.clone()
        },
        mask.voxels.iter().map(|&v| v as f32).collect(),
    )?;
    write_volume(&vol, path)
}

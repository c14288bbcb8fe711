//! Deterministic normalization of a raw HU volume into a fixed-grid,
//! unit-range tensor.
//!
//! Canonical stage order: optional mask crop, isotropic resampling, intensity
//! clipping, unit normalization, centered pad/crop. Clipping before
//! normalization is forced by the normalization formula; a single
//! interpolation pass keeps blur to one resampling.

use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, Exec};
use crate::volume::{Dtype, MaskVolume, Unit, Volume, VolumeHeader};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_spacing_mm: f64,
    pub target_shape: [usize; 3],
    pub hu_low: f32,
    pub hu_high: f32,
    /// Pad fill in HU; mapped through clip+normalize when padding happens
    /// after normalization in the pipeline.
    pub fill_value: f32,
    /// Crop to the heart/aorta mask bounding box before resampling when masks
    /// are available.
    pub use_mask_crop: bool,
    pub mask_margin_mm: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing_mm: 0.625,
            target_shape: [256, 256, 256],
            hu_low: -1000.0,
            hu_high: 2000.0,
            fill_value: -1000.0,
            use_mask_crop: false,
            mask_margin_mm: 10.0,
        }
    }
}

impl PreprocessConfig {
    /// Desk-scale profile: everything runs on CPU in seconds.
    pub fn desk() -> Self {
        PreprocessConfig {
            target_spacing_mm: 5.0,
            target_shape: [32, 32, 32],
            ..Default::default()
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.hu_low < self.hu_high) {
            return Err(Error::validation(
                format!("{prefix}.hu_low"),
                format!("must be < hu_high ({} >= {})", self.hu_low, self.hu_high),
            ));
        }
        if !(self.target_spacing_mm > 0.0) {
            return Err(Error::validation(
                format!("{prefix}.target_spacing_mm"),
                "must be > 0",
            ));
        }
        for (i, &n) in self.target_shape.iter().enumerate() {
            if n < 1 {
                return Err(Error::validation(
                    format!("{prefix}.target_shape[{i}]"),
                    "must be >= 1",
                ));
            }
        }
        if !(self.mask_margin_mm >= 0.0) {
            return Err(Error::validation(
                format!("{prefix}.mask_margin_mm"),
                "must be >= 0",
            ));
        }
        Ok(())
    }
}

/// Trilinear sample of `vol` at fractional index coordinates, clamping
/// out-of-domain coordinates to the nearest edge.
#[inline]
pub(crate) fn sample_trilinear_clamped(vol: &Volume, u: f64, v: f64, w: f64) -> f32 {
    let [nx, ny, nz] = vol.header.shape;
    let u = u.clamp(0.0, (nx - 1) as f64);
    let v = v.clamp(0.0, (ny - 1) as f64);
    let w = w.clamp(0.0, (nz - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let z0 = w.floor() as usize;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let fz = w - z0 as f64;

    let c000 = vol.at(x0, y0, z0) as f64;
    let c100 = vol.at(x1, y0, z0) as f64;
    let c010 = vol.at(x0, y1, z0) as f64;
    let c110 = vol.at(x1, y1, z0) as f64;
    let c001 = vol.at(x0, y0, z1) as f64;
    let c101 = vol.at(x1, y0, z1) as f64;
    let c011 = vol.at(x0, y1, z1) as f64;
    let c111 = vol.at(x1, y1, z1) as f64;

    let c00 = c000 + (c100 - c000) * fx;
    let c10 = c010 + (c110 - c010) * fx;
    let c01 = c001 + (c101 - c001) * fx;
    let c11 = c011 + (c111 - c011) * fx;
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    (c0 + (c1 - c0) * fz) as f32
}

/// Resample onto an isotropic grid of `target_spacing_mm` per axis. Output
/// shape per axis is round(n * spacing / target), at least 1. Voxel i sits at
/// physical coordinate i * spacing (node-centered); values are trilinear
/// interpolations, edge-clamped outside the source domain.
pub fn resample_isotropic(vol: &Volume, target_spacing_mm: f64) -> Result<Volume> {
    if !(target_spacing_mm > 0.0) {
        return Err(Error::validation(
            "target_spacing_mm",
            format!("must be > 0, got {target_spacing_mm}"),
        ));
    }
    let [nx, ny, nz] = vol.header.shape;
    let [sx, sy, sz] = vol.header.spacing_mm;
    if [sx, sy, sz] == [target_spacing_mm; 3] {
        let mut out = vol.clone();
        out.header.spacing_mm = [target_spacing_mm; 3];
        return Ok(out);
    }
    let t = target_spacing_mm;
    let out_shape = [
        (((nx as f64) * sx / t).round() as usize).max(1),
        (((ny as f64) * sy / t).round() as usize).max(1),
        (((nz as f64) * sz / t).round() as usize).max(1),
    ];
    let [ox, oy, oz] = out_shape;
    let mut voxels = vec![0.0f32; ox * oy * oz];
    // Each task fills one output z-slab; independent of evaluation order.
    for_each_chunk(Exec::default(), &mut voxels, ox * oy, |z, slab| {
        let w = (z as f64) * t / sz;
        for y in 0..oy {
            let v = (y as f64) * t / sy;
            for x in 0..ox {
                let u = (x as f64) * t / sx;
                slab[y * ox + x] = sample_trilinear_clamped(vol, u, v, w);
            }
        }
    });
    Volume::new(
        VolumeHeader {
            shape: out_shape,
            spacing_mm: [t; 3],
            unit: vol.header.unit,
            dtype: Dtype::F32,
        },
        voxels,
    )
}

/// Clamp every voxel into [hu_low, hu_high]. Unit stays HU.
pub fn clip_intensities(vol: &Volume, hu_low: f32, hu_high: f32) -> Result<Volume> {
    if !(hu_low < hu_high) {
        return Err(Error::validation(
            "hu_low",
            format!("must be < hu_high ({hu_low} >= {hu_high})"),
        ));
    }
    let mut out = vol.clone();
    out.header.dtype = Dtype::F32;
    for v in &mut out.voxels {
        *v = v.clamp(hu_low, hu_high);
    }
    Ok(out)
}

/// Map [hu_low, hu_high] affinely onto [0, 1]. Input must already be clipped;
/// a value outside the range signals pipeline misordering.
pub fn normalize_unit(vol: &Volume, hu_low: f32, hu_high: f32) -> Result<Volume> {
    if !(hu_low < hu_high) {
        return Err(Error::validation(
            "hu_low",
            format!("must be < hu_high ({hu_low} >= {hu_high})"),
        ));
    }
    let range = (hu_high - hu_low) as f64;
    let mut voxels = Vec::with_capacity(vol.voxels.len());
    for &v in &vol.voxels {
        if v < hu_low || v > hu_high {
            return Err(Error::InvalidVolume(format!(
                "normalize_unit: value {v} outside clip range [{hu_low}, {hu_high}]; \
                 clip_intensities must run first"
            )));
        }
        voxels.push((((v - hu_low) as f64) / range) as f32);
    }
    Volume::new(
        VolumeHeader {
            unit: Unit::Normalized,
            dtype: Dtype::F32,
            ..vol.header.clone()
        },
        voxels,
    )
}

/// Center the content on a fixed grid. Per axis, cropping removes
/// floor(excess/2) at the low end and padding adds floor(deficit/2) at the
/// low end; padded voxels take `fill_value`.
pub fn pad_or_crop(vol: &Volume, target_shape: [usize; 3], fill_value: f32) -> Result<Volume> {
    let src = vol.header.shape;
    // Per axis: output index j maps to source index j - pad_low + crop_low.
    let mut off = [0i64; 3];
    for a in 0..3 {
        if src[a] >= target_shape[a] {
            off[a] = ((src[a] - target_shape[a]) / 2) as i64; // crop at low end
        } else {
            off[a] = -(((target_shape[a] - src[a]) / 2) as i64); // pad at low end
        }
    }
    let [tx, ty, tz] = target_shape;
    let [nx, ny, nz] = src;
    let mut voxels = vec![fill_value; tx * ty * tz];
    for_each_chunk(Exec::default(), &mut voxels, tx * ty, |z, slab| {
        let sz = z as i64 + off[2];
        if sz < 0 || sz >= nz as i64 {
            return;
        }
        for y in 0..ty {
            let sy = y as i64 + off[1];
            if sy < 0 || sy >= ny as i64 {
                continue;
            }
            for x in 0..tx {
                let sx = x as i64 + off[0];
                if sx < 0 || sx >= nx as i64 {
                    continue;
                }
                slab[y * tx + x] = vol.at(sx as usize, sy as usize, sz as usize);
            }
        }
    });
    Volume::new(
        VolumeHeader {
            shape: target_shape,
            dtype: if vol.header.dtype == Dtype::I16 && fill_value.fract() == 0.0 {
                vol.header.dtype
            } else {
                Dtype::F32
            },
            ..vol.header.clone()
        },
        voxels,
    )
}

/// Axis-aligned bounding box of the union of all mask-positive voxels,
/// expanded by ceil(margin_mm / spacing) voxels per side and clamped to the
/// volume bounds.
pub fn crop_to_masks(vol: &Volume, masks: &[&MaskVolume], margin_mm: f64) -> Result<Volume> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for mask in masks {
        mask.check_grid(vol)?;
        let [nx, ny, _] = mask.header.shape;
        for (i, &m) in mask.voxels.iter().enumerate() {
            if m == 1 {
                any = true;
                let x = i % nx;
                let y = (i / nx) % ny;
                let z = i / (nx * ny);
                let p = [x, y, z];
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    let [nx, ny, nz] = vol.header.shape;
    let bounds = [nx, ny, nz];
    let mut lo_m = [0usize; 3];
    let mut hi_m = [0usize; 3];
    for a in 0..3 {
        let margin = (margin_mm / vol.header.spacing_mm[a]).ceil() as usize;
        lo_m[a] = lo[a].saturating_sub(margin);
        hi_m[a] = (hi[a] + margin).min(bounds[a] - 1);
    }
    let shape = [
        hi_m[0] - lo_m[0] + 1,
        hi_m[1] - lo_m[1] + 1,
        hi_m[2] - lo_m[2] + 1,
    ];
    let mut voxels = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
    for z in lo_m[2]..=hi_m[2] {
        for y in lo_m[1]..=hi_m[1] {
            for x in lo_m[0]..=hi_m[0] {
                voxels.push(vol.at(x, y, z));
            }
        }
    }
    Volume::new(
        VolumeHeader {
            shape,
            ..vol.header.clone()
        },
        voxels,
    )
}

/// Full pipeline: optional mask crop, resample, clip, normalize, pad/crop.
/// Output always has `config.target_shape` and unit `normalized`.
///
/// An already-normalized input skips the clip and normalize stages, which
/// makes the pipeline idempotent: a volume that is isotropic, normalized
/// and on the target grid passes through unchanged.
pub fn preprocess_pipeline(
    vol: &Volume,
    config: &PreprocessConfig,
    masks: &[&MaskVolume],
) -> Result<Volume> {
    config.validate("preprocess")?;
    let cropped;
    let stage: &Volume = if config.use_mask_crop && !masks.is_empty() {
        cropped = crop_to_masks(vol, masks, config.mask_margin_mm)?;
        &cropped
    } else {
        vol
    };
    let resampled = resample_isotropic(stage, config.target_spacing_mm)?;
    let normalized = match vol.header.unit {
        Unit::Hu => {
            let clipped = clip_intensities(&resampled, config.hu_low, config.hu_high)?;
            normalize_unit(&clipped, config.hu_low, config.hu_high)?
        }
        Unit::Normalized => resampled,
    };
    // The configured fill is in HU; padding happens post-normalization, so
    // push it through the same clip + normalize mapping.
    let fill = ((config.fill_value.clamp(config.hu_low, config.hu_high) - config.hu_low) as f64
        / (config.hu_high - config.hu_low) as f64) as f32;
    pad_or_crop(&normalized, config.target_shape, fill)
}

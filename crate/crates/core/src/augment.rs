//! Training-time random 3D rotations.
//!
//! A rotation is sampled as a single principal axis, a magnitude uniform in
//! the configured band and a uniform sign, then applied by inverse-mapping
//! trilinear resampling about the volume's geometric center. Coordinates that
//! fall outside the input domain take the fill value exactly.

use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, Exec};
use crate::volume::{Dtype, Volume};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub angle_min_deg: f64,
    pub angle_max_deg: f64,
    /// Fill for voxels rotated in from outside the volume; normalized air.
    pub fill_value: f32,
    /// When true, compose one rotation per axis instead of a single-axis
    /// rotation per sample.
    pub multi_axis: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            angle_min_deg: 10.0,
            angle_max_deg: 20.0,
            fill_value: 0.0,
            multi_axis: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(0.0 <= self.angle_min_deg && self.angle_min_deg <= self.angle_max_deg) {
            return Err(Error::validation(
                format!("{prefix}.angle_min_deg"),
                format!(
                    "need 0 <= angle_min <= angle_max, got [{}, {}]",
                    self.angle_min_deg, self.angle_max_deg
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub axis: Axis,
    pub angle_deg: f64,
}

/// Draw axis (uniform over x/y/z), magnitude (uniform in the band) and sign
/// (uniform) from `rng`, in that fixed order.
pub fn sample_rotation<R: Rng>(rng: &mut R, config: &AugmentConfig) -> RotationSpec {
    let axis = match rng.random_range(0..3u8) {
        0 => Axis::X,
        1 => Axis::Y,
        _ => Axis::Z,
    };
    let magnitude = rng.random_range(config.angle_min_deg..=config.angle_max_deg);
    let sign = if rng.random_range(0..2u8) == 0 { 1.0 } else { -1.0 };
    RotationSpec {
        axis,
        angle_deg: sign * magnitude,
    }
}

/// Sample the full per-sample rotation: one spec, or one per axis when
/// `multi_axis` is set (applied in x, y, z order).
pub fn sample_rotations<R: Rng>(rng: &mut R, config: &AugmentConfig) -> Vec<RotationSpec> {
    if config.multi_axis {
        [Axis::X, Axis::Y, Axis::Z]
            .into_iter()
            .map(|axis| {
                let magnitude = rng.random_range(config.angle_min_deg..=config.angle_max_deg);
                let sign = if rng.random_range(0..2u8) == 0 { 1.0 } else { -1.0 };
                RotationSpec {
                    axis,
                    angle_deg: sign * magnitude,
                }
            })
            .collect()
    } else {
        vec![sample_rotation(rng, config)]
    }
}

/// (sin, cos) of the angle, snapped to exact values at multiples of 90° so
/// lattice-to-lattice rotations are reproduced without interpolation error.
fn sin_cos_snapped(angle_deg: f64) -> (f64, f64) {
    let quarter = angle_deg / 90.0;
    if (quarter - quarter.round()).abs() < 1e-12 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        let rad = angle_deg.to_radians();
        (rad.sin(), rad.cos())
    }
}

/// Trilinear sample at fractional index coordinates; `None` when the point
/// lies outside the closed index domain.
#[inline]
fn sample_trilinear_bounded(vol: &Volume, u: f64, v: f64, w: f64) -> Option<f32> {
    let [nx, ny, nz] = vol.header.shape;
    if u < 0.0 || v < 0.0 || w < 0.0 {
        return None;
    }
    if u > (nx - 1) as f64 || v > (ny - 1) as f64 || w > (nz - 1) as f64 {
        return None;
    }
    Some(crate::preprocess::sample_trilinear_clamped(vol, u, v, w))
}

/// Rotate by `spec` about the volume's geometric center via inverse-mapping
/// trilinear resampling. Shape and spacing are unchanged.
pub fn apply_rotation(vol: &Volume, spec: &RotationSpec, fill_value: f32) -> Volume {
    let [nx, ny, nz] = vol.header.shape;
    let [sx, sy, sz] = vol.header.spacing_mm;
    let center = [
        (nx - 1) as f64 / 2.0 * sx,
        (ny - 1) as f64 / 2.0 * sy,
        (nz - 1) as f64 / 2.0 * sz,
    ];
    // inverse rotation: sample the input at R(-theta) * (p - c) + c
    let (s, c) = sin_cos_snapped(-spec.angle_deg);
    let mut voxels = vec![fill_value; nx * ny * nz];
    for_each_chunk(Exec::default(), &mut voxels, nx * ny, |z, slab| {
        let pz = z as f64 * sz - center[2];
        for y in 0..ny {
            let py = y as f64 * sy - center[1];
            for x in 0..nx {
                let px = x as f64 * sx - center[0];
                let (qx, qy, qz) = match spec.axis {
                    Axis::X => (px, c * py - s * pz, s * py + c * pz),
                    Axis::Y => (c * px + s * pz, py, -s * px + c * pz),
                    Axis::Z => (c * px - s * py, s * px + c * py, pz),
                };
                let u = (qx + center[0]) / sx;
                let v = (qy + center[1]) / sy;
                let w = (qz + center[2]) / sz;
                if let Some(value) = sample_trilinear_bounded(vol, u, v, w) {
                    slab[y * nx + x] = value;
                }
            }
        }
    });
    Volume {
        header: crate::volume::VolumeHeader {
            dtype: Dtype::F32,
            ..vol.header.clone()
        },
        voxels,
    }
}

/// Apply a sequence of rotations left to right.
pub fn apply_rotations(vol: &Volume, specs: &[RotationSpec], fill_value: f32) -> Volume {
    let mut out = vol.clone();
    for spec in specs {
        out = apply_rotation(&out, spec, fill_value);
    }
    out
}

//! Synthetic thoracic phantoms with fully known geometry and labels.
//!
//! Each phantom is an ellipsoidal "heart" with a contrast-filled interior and
//! a cylindrical "aorta" rising from its top, joined by a soft-tissue annulus
//! ring. Positive phantoms carry a single eccentric calcific arc on the ring;
//! negative phantoms carry the same total arc extent split into two
//! diametrically opposed arcs (same calcium burden, different geometry) or no
//! calcification at all. Everything is seed-deterministic.

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::manifest::{DatasetManifest, PatientRecord};
use crate::volume::{write_mask, write_volume, Dtype, MaskVolume, Unit, Volume, VolumeHeader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionSpec {
    pub present: bool,
    /// Total calcific arc extent in degrees (shared by both classes).
    pub arc_extent_deg: f64,
    /// Radial displacement of the positive arc, as a fraction of the ring
    /// radius.
    pub eccentricity: f64,
}

impl Default for LesionSpec {
    fn default() -> Self {
        LesionSpec {
            present: false,
            arc_extent_deg: 150.0,
            eccentricity: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStyle {
    /// Two opposed half-extent arcs: equal calcium burden, symmetric layout.
    Symmetric,
    /// No calcification anywhere.
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub background_hu: f32,
    pub soft_tissue_hu: f32,
    pub blood_pool_hu: f32,
    pub calcification_hu: f32,
    pub lesion: LesionSpec,
    pub negative_style: NegativeStyle,
    pub noise_sigma_hu: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [44, 44, 56],
            spacing_mm: [4.0, 4.0, 2.5],
            background_hu: -1000.0,
            soft_tissue_hu: 40.0,
            blood_pool_hu: 300.0,
            calcification_hu: 700.0,
            lesion: LesionSpec::default(),
            negative_style: NegativeStyle::Symmetric,
            noise_sigma_hu: 20.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [
            ("background_hu", self.background_hu),
            ("soft_tissue_hu", self.soft_tissue_hu),
            ("blood_pool_hu", self.blood_pool_hu),
            ("calcification_hu", self.calcification_hu),
        ] {
            if !(-1000.0..=2000.0).contains(&v) {
                return Err(Error::validation(
                    format!("{prefix}.{name}"),
                    format!("HU value {v} outside the clip range [-1000, 2000]"),
                ));
            }
        }
        if self.shape.contains(&0) {
            return Err(Error::validation(format!("{prefix}.shape"), "must be >= 1"));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation(
                format!("{prefix}.spacing_mm"),
                "must be > 0",
            ));
        }
        if !(self.lesion.arc_extent_deg >= 0.0 && self.lesion.arc_extent_deg <= 360.0) {
            return Err(Error::validation(
                format!("{prefix}.lesion.arc_extent_deg"),
                "must lie in [0, 360]",
            ));
        }
        Ok(())
    }
}

/// One generated phantom with its ground truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub heart_mask: MaskVolume,
    pub aorta_mask: MaskVolume,
    pub label: u8,
    /// Physical-coordinate bounding box [[x0,x1],[y0,y1],[z0,z1]] of the
    /// eccentric lesion, present on positives only.
    pub lesion_bbox_mm: Option<[[f64; 2]; 3]>,
}

fn angle_in_arc(theta: f64, start: f64, extent: f64) -> bool {
    let delta = (theta - start).rem_euclid(360.0);
    delta <= extent
}

/// Generate one phantom. Fully determined by (spec, rng state).
pub fn generate_phantom<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Result<Phantom> {
    spec.validate("phantom")?;
    let [nx, ny, nz] = spec.shape;
    let [sx, sy, sz] = spec.spacing_mm;
    let extent = [nx as f64 * sx, ny as f64 * sy, nz as f64 * sz];

    // per-sample geometry jitter, drawn in a fixed order
    let size_jitter = rng.random_range(0.92..1.08);
    let cx_jitter = rng.random_range(-0.02..0.02) * extent[0];
    let cy_jitter = rng.random_range(-0.02..0.02) * extent[1];
    let theta0 = rng.random_range(0.0..360.0);
    let ring_jitter = rng.random_range(0.92..1.08);

    let heart_c = [
        0.5 * extent[0] + cx_jitter,
        0.5 * extent[1] + cy_jitter,
        0.40 * extent[2],
    ];
    let heart_a = [
        0.26 * extent[0] * size_jitter,
        0.24 * extent[1] * size_jitter,
        0.26 * extent[2] * size_jitter,
    ];
    let aorta_r = 0.12 * extent[0].min(extent[1]) * ring_jitter;
    let wall = 4.0;
    let ring_r = aorta_r + 5.0;
    let tube_r = 7.0;
    let z_junction = heart_c[2] + heart_a[2] * 0.92;
    let aorta_top = 0.95 * extent[2];
    let aorta_bottom = z_junction - 10.0;

    // arcs: positives get one contiguous arc on a radially displaced ring;
    // symmetric negatives split the same extent across opposite sides
    let arc = spec.lesion.arc_extent_deg;
    let (arcs, displacement): (Vec<(f64, f64)>, f64) = if spec.lesion.present {
        (vec![(theta0, arc)], spec.lesion.eccentricity * ring_r)
    } else {
        match spec.negative_style {
            NegativeStyle::Symmetric if arc > 0.0 => (
                vec![(theta0, arc / 2.0), (theta0 + 180.0, arc / 2.0)],
                0.0,
            ),
            _ => (Vec::new(), 0.0),
        }
    };
    let theta_mid = (theta0 + arc / 2.0).to_radians();
    let lesion_shift = [
        displacement * theta_mid.cos(),
        displacement * theta_mid.sin(),
    ];

    let mut voxels = vec![0.0f32; nx * ny * nz];
    let mut heart = vec![0u8; nx * ny * nz];
    let mut aorta = vec![0u8; nx * ny * nz];
    let mut bbox: Option<[[f64; 2]; 3]> = None;

    for z in 0..nz {
        let pz = z as f64 * sz;
        for y in 0..ny {
            let py = y as f64 * sy;
            for x in 0..nx {
                let px = x as f64 * sx;
                let i = x + nx * (y + ny * z);
                let mut hu = spec.background_hu;

                // heart: soft-tissue ellipsoid with a contrast-filled core
                let e = [
                    (px - heart_c[0]) / heart_a[0],
                    (py - heart_c[1]) / heart_a[1],
                    (pz - heart_c[2]) / heart_a[2],
                ];
                let r2 = e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
                if r2 <= 1.0 {
                    heart[i] = 1;
                    hu = if r2 <= 0.82 * 0.82 {
                        spec.blood_pool_hu
                    } else {
                        spec.soft_tissue_hu
                    };
                }

                // aorta: contrast cylinder with a soft-tissue wall
                let dax = px - heart_c[0];
                let day = py - heart_c[1];
                let radial = (dax * dax + day * day).sqrt();
                if pz >= aorta_bottom && pz <= aorta_top {
                    if radial <= aorta_r + wall {
                        aorta[i] = 1;
                        hu = if radial <= aorta_r {
                            spec.blood_pool_hu
                        } else {
                            spec.soft_tissue_hu
                        };
                    }
                }

                // annulus ring at the junction
                let ring_d = (radial - ring_r).powi(2) + (pz - z_junction).powi(2);
                if ring_d <= tube_r * tube_r {
                    hu = spec.soft_tissue_hu;
                }

                // calcific arcs (possibly on the displaced lesion ring)
                for (ai, &(start, ext)) in arcs.iter().enumerate() {
                    let (ox, oy) = if spec.lesion.present {
                        (lesion_shift[0], lesion_shift[1])
                    } else {
                        (0.0, 0.0)
                    };
                    let ldx = px - heart_c[0] - ox;
                    let ldy = py - heart_c[1] - oy;
                    let lradial = (ldx * ldx + ldy * ldy).sqrt();
                    let ldist = (lradial - ring_r).powi(2) + (pz - z_junction).powi(2);
                    if ldist <= tube_r * tube_r {
                        let theta = ldy.atan2(ldx).to_degrees();
                        if angle_in_arc(theta, start, ext) {
                            hu = spec.calcification_hu;
                            if spec.lesion.present && ai == 0 {
                                let b = bbox.get_or_insert([
                                    [px, px],
                                    [py, py],
                                    [pz, pz],
                                ]);
                                for (axis, p) in [px, py, pz].into_iter().enumerate() {
                                    b[axis][0] = b[axis][0].min(p);
                                    b[axis][1] = b[axis][1].max(p);
                                }
                            }
                        }
                    }
                }

                voxels[i] = hu;
            }
        }
    }

    // additive Gaussian noise, then clip back into the HU band and round so
    // the volume stores as integral i16 HU like real CT
    let normal = Normal::new(0.0f64, spec.noise_sigma_hu).map_err(|e| {
        Error::validation("phantom.noise_sigma_hu", e.to_string())
    })?;
    for v in &mut voxels {
        let noisy = *v as f64 + normal.sample(rng);
        *v = (noisy.clamp(-1000.0, 2000.0)).round() as f32;
    }

    let header = VolumeHeader {
        shape: spec.shape,
        spacing_mm: spec.spacing_mm,
        unit: Unit::Hu,
        dtype: Dtype::I16,
    };
    let volume = Volume::new(header.clone(), voxels)?;
    let heart_mask = MaskVolume::new(header.clone(), heart)?;
    let aorta_mask = MaskVolume::new(header, aorta)?;
    Ok(Phantom {
        volume,
        heart_mask,
        aorta_mask,
        label: if spec.lesion.present { 1 } else { 0 },
        lesion_bbox_mm: bbox,
    })
}

/// Agatston-style pretext target: log(1 + #voxels above threshold).
pub fn calcium_burden_target(volume: &Volume, threshold_hu: f32) -> f64 {
    let count = volume.voxels.iter().filter(|&&v| v > threshold_hu).count();
    (1.0 + count as f64).ln()
}

/// Lesion bounding-box sidecar written next to the manifest.
pub const LESIONS_FILE: &str = "lesions.csv";

/// Generate `n` phantoms with round(n * positive_fraction) positives, write
/// volumes, masks, the manifest and a lesion-bbox sidecar into `out_dir`.
pub fn generate_dataset(
    n: usize,
    positive_fraction: f64,
    spec_template: &PhantomSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n < 2 {
        return Err(Error::validation("synth.n", "need at least 2 phantoms"));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::validation(
            "synth.positive_fraction",
            format!("must lie in (0,1), got {positive_fraction}"),
        ));
    }
    spec_template.validate("synth.spec")?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let n_pos = (n as f64 * positive_fraction).round() as usize;
    let mut master = ChaCha12Rng::seed_from_u64(seed);
    // fixed draw order: per-phantom seeds first, then the label shuffle
    let phantom_seeds: Vec<u64> = (0..n).map(|_| master.random()).collect();
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
    for i in (1..n).rev() {
        let j = master.random_range(0..=i);
        labels.swap(i, j);
    }

    let results = map_indexed(Exec::default(), n, |i| -> Result<PatientRecord> {
        let id = format!("P{:04}", i + 1);
        let spec = PhantomSpec {
            seed: phantom_seeds[i],
            lesion: LesionSpec {
                present: labels[i],
                ..spec_template.lesion
            },
            ..spec_template.clone()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let phantom = generate_phantom(&spec, &mut rng)?;
        let vol_stem = out_dir.join(&id);
        write_volume(&phantom.volume, &vol_stem)?;
        let heart_stem = out_dir.join(format!("{id}_heart"));
        write_mask(&phantom.heart_mask, &heart_stem)?;
        let aorta_stem = out_dir.join(format!("{id}_aorta"));
        write_mask(&phantom.aorta_mask, &aorta_stem)?;
        Ok(PatientRecord {
            patient_id: id.clone(),
            volume_path: crate::volume::header_path(&vol_stem),
            heart_mask_path: Some(crate::volume::header_path(&heart_stem)),
            aorta_mask_path: Some(crate::volume::header_path(&aorta_stem)),
            label: if labels[i] { 1 } else { 0 },
        })
    });
    let mut records = Vec::with_capacity(n);
    for r in results {
        records.push(r?);
    }

    // lesion sidecar (recomputed serially; generation above is the oracle)
    let mut lesions = String::from("patient_id,present,x0_mm,x1_mm,y0_mm,y1_mm,z0_mm,z1_mm\n");
    for (i, rec) in records.iter().enumerate() {
        let spec = PhantomSpec {
            seed: phantom_seeds[i],
            lesion: LesionSpec {
                present: labels[i],
                ..spec_template.lesion
            },
            ..spec_template.clone()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let phantom = generate_phantom(&spec, &mut rng)?;
        match phantom.lesion_bbox_mm {
            Some(b) => lesions.push_str(&format!(
                "{},1,{},{},{},{},{},{}\n",
                rec.patient_id, b[0][0], b[0][1], b[1][0], b[1][1], b[2][0], b[2][1]
            )),
            None => lesions.push_str(&format!("{},0,,,,,,\n", rec.patient_id)),
        }
    }
    let lesions_path = out_dir.join(LESIONS_FILE);
    std::fs::write(&lesions_path, lesions).map_err(|e| Error::io(&lesions_path, e))?;

    let manifest = DatasetManifest::new(records)?;
    crate::manifest::write_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Parse the lesion sidecar into (patient_id -> bbox_mm).
pub fn read_lesions(path: &Path) -> Result<std::collections::BTreeMap<String, [[f64; 2]; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 || cells[1] != "1" {
            continue;
        }
        let v: Vec<f64> = cells[2..]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidManifest(format!("lesions.csv: {e}")))?;
        out.insert(
            cells[0].to_string(),
            [[v[0], v[1]], [v[2], v[3]], [v[4], v[5]]],
        );
    }
    Ok(out)
}

//! Synthetic CT-like phantom patches: randomized ellipsoid nodules with
//! texture-dependent intensity signatures over lung-like background
//! noise, plus the ground-truth records and manifest for a run.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fleischner::{mask_volume_mm3, records_to_csv, NoduleRecord, RecordSource, Texture};
use crate::io::{write_tensor, DatasetManifest, ManifestEntry, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub patch_extent: usize,
    pub spacing_mm: [f64; 3],
    /// Candidates per patient are drawn uniformly from this range.
    pub candidates_per_patient: (usize, usize),
    /// Fraction of candidates with no nodule (pure background).
    pub non_nodule_fraction: f64,
    /// Ellipsoid semi-axis range in voxels.
    pub radius_range: (f64, f64),
    /// Fraction of patients tagged as validation.
    pub val_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            patch_extent: 32,
            spacing_mm: [1.0, 1.0, 1.0],
            candidates_per_patient: (1, 4),
            non_nodule_fraction: 0.25,
            radius_range: (2.5, 7.0),
            val_fraction: 0.3,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.candidates_per_patient;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "candidates_per_patient range ({}, {}) is empty",
                lo, hi
            )));
        }
        if !(0.0..=1.0).contains(&self.non_nodule_fraction) {
            return Err(Error::InvalidConfig("non_nodule_fraction must lie in [0, 1]".into()));
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::InvalidConfig(format!("radius range ({}, {}) is empty", rlo, rhi)));
        }
        // Largest ellipsoid must fit with a margin inside the patch.
        if rhi * 2.0 + 4.0 > self.patch_extent as f64 {
            return Err(Error::InvalidConfig(format!(
                "radius {} does not fit a {}^3 patch",
                rhi, self.patch_extent
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Raw HU-like intensity levels. Solid reads densest, GGO haziest;
/// PartSolid is a solid core in a GGO halo, so its mean sits in between.
const BACKGROUND_HU: f64 = -850.0;
const BACKGROUND_NOISE_HU: f64 = 40.0;
const SOLID_HU: f64 = 50.0;
const GGO_HU: f64 = -550.0;
const FOREGROUND_NOISE_HU: f64 = 25.0;

pub struct Candidate {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub texture: Option<Texture>,
    pub volume_mm3: f64,
}

/// One candidate patch. Nodules are randomized ellipsoids strictly inside
/// the patch; non-nodules are pure background.
pub fn generate_candidate(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Candidate> {
    cfg.validate()?;
    let e = cfg.patch_extent;
    let background = Normal::new(BACKGROUND_HU, BACKGROUND_NOISE_HU).expect("const sigma");
    let fg_noise = Normal::new(0.0, FOREGROUND_NOISE_HU).expect("const sigma");

    let mut image = Tensor::<f32>::zeros(&[e, e, e]);
    let mut mask = Tensor::<f32>::zeros(&[e, e, e]);
    for v in image.data_mut() {
        *v = background.sample(rng) as f32;
    }

    let is_nodule = !rng.gen_bool(cfg.non_nodule_fraction);
    if !is_nodule {
        return Ok(Candidate { image, mask, texture: None, volume_mm3: 0.0 });
    }

    let texture = Texture::ALL[rng.gen_range(0..3)];
    let (rlo, rhi) = cfg.radius_range;
    let radii = [
        rng.gen_range(rlo..=rhi),
        rng.gen_range(rlo..=rhi),
        rng.gen_range(rlo..=rhi),
    ];
    // Center placed so the ellipsoid stays >= 1 voxel from every face.
    let center: Vec<f64> = radii
        .iter()
        .map(|&r| rng.gen_range(r + 1.0..=(e as f64 - 2.0 - r)))
        .collect();

    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let u = [
                    (z as f64 - center[0]) / radii[0],
                    (y as f64 - center[1]) / radii[1],
                    (x as f64 - center[2]) / radii[2],
                ];
                let r2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
                if r2 > 1.0 {
                    continue;
                }
                let idx = (z * e + y) * e + x;
                mask.data_mut()[idx] = 1.0;
                // Hazy GGO component fades toward the rim; solid matter
                // is uniform. PartSolid switches to solid inside half
                // radius.
                let haze = GGO_HU + (BACKGROUND_HU - GGO_HU) * r2.sqrt();
                let value = match texture {
                    Texture::Solid => SOLID_HU,
                    Texture::Ggo => haze,
                    Texture::PartSolid => {
                        if r2 <= 0.25 {
                            SOLID_HU
                        } else {
                            haze
                        }
                    }
                };
                image.data_mut()[idx] = (value + fg_noise.sample(rng)) as f32;
            }
        }
    }
    let volume_mm3 = mask_volume_mm3(&mask, cfg.spacing_mm)?;
    Ok(Candidate { image, mask, texture: Some(texture), volume_mm3 })
}

pub struct PhantomDataset {
    pub manifest: DatasetManifest,
    pub records: Vec<NoduleRecord>,
}

/// Write per-candidate volume/mask NDT1 files, the dataset manifest, and
/// the ground-truth nodule CSV under `out_dir`. Patients are split
/// train/val by index; everything is a pure function of (cfg, seed).
pub fn generate_phantom_dataset(
    out_dir: &Path,
    n_patients: usize,
    cfg: &PhantomConfig,
    seed: u64,
) -> Result<PhantomDataset> {
    if n_patients == 0 {
        return Err(Error::InvalidConfig("need at least one patient".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", out_dir.display(), e))))?;

    let n_val = (n_patients as f64 * cfg.val_fraction).round() as usize;
    let mut manifest = DatasetManifest::default();
    let mut records = Vec::new();
    for p in 0..n_patients {
        let patient_id = format!("p{:04}", p);
        // Per-patient stream, so patient p's data never depends on how
        // many candidates earlier patients drew.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (lo, hi) = cfg.candidates_per_patient;
        let n_candidates = rng.gen_range(lo..=hi);
        let split = if p < n_patients - n_val { Split::Train } else { Split::Val };
        for c in 0..n_candidates {
            let cand = generate_candidate(cfg, &mut rng)?;
            let stem = format!("{}_c{}", patient_id, c);
            let volume_file = format!("{}_vol.ndt1", stem);
            let mask_file = format!("{}_mask.ndt1", stem);
            write_tensor(&out_dir.join(&volume_file), &cand.image)?;
            write_tensor(&out_dir.join(&mask_file), &cand.mask)?;
            manifest.entries.push(ManifestEntry {
                volume_file,
                mask_file,
                texture: cand.texture,
                is_nodule: cand.texture.is_some(),
                patient_id: patient_id.clone(),
                split,
            });
            records.push(NoduleRecord {
                patient_id: patient_id.clone(),
                nodule_id: format!("c{}", c),
                volume_mm3: cand.volume_mm3,
                texture: cand.texture,
                is_nodule: cand.texture.is_some(),
                source: RecordSource::GroundTruth,
            });
        }
    }
    fs::write(out_dir.join("manifest.csv"), manifest.to_csv())
        .map_err(|e| Error::Io(std::io::Error::other(format!("manifest: {}", e))))?;
    fs::write(out_dir.join("records.csv"), records_to_csv(&records))
        .map_err(|e| Error::Io(std::io::Error::other(format!("records: {}", e))))?;
    Ok(PhantomDataset { manifest, records })
}

//! Synthetic lung phantoms with known emphysema burden.
//!
//! A phantom is a box of soft tissue holding an ellipsoidal "lung" of
//! Gaussian parenchyma. Emphysema is emulated by spherical blobs of
//! low-attenuation voxels added until a target fraction of lung voxels lies
//! below -950 HU.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{
    emphysema_fraction, voxel_index, write_mask, write_volume, CohortManifest, Dims, LungMask, ManifestEntry, Split,
    SubjectLabel, Volume, EMPHYSEMA_THRESHOLD_HU, HU_MAX, HU_MIN,
};

/// Semi-axis scale giving an ellipsoid of ~40% of the bounding box:
/// `π/6 · r³ = 0.4`.
fn lung_axis_ratio() -> f64 {
    (0.4 * 6.0 / std::f64::consts::PI).cbrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub parenchyma_mean: f64,
    pub parenchyma_std: f64,
    pub blob_mean: f64,
    pub blob_std: f64,
    /// Inclusive blob radius range in voxels.
    pub blob_radius: (usize, usize),
    /// Soft tissue outside the lung.
    pub tissue_mean: f64,
    pub tissue_std: f64,
    /// Target fraction of lung voxels below -950 HU.
    pub burden: f64,
    pub channels: usize,
    /// Noise of the registered second channel.
    pub second_channel_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [96, 96, 96],
            spacing: [1.0, 1.0, 1.0],
            parenchyma_mean: -850.0,
            parenchyma_std: 40.0,
            blob_mean: -975.0,
            blob_std: 15.0,
            blob_radius: (2, 6),
            tissue_mean: 40.0,
            tissue_std: 20.0,
            burden: 0.0,
            channels: 1,
            second_channel_std: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.burden) {
            return Err(Error::invalid(format!("burden must lie in [0,1], got {}", self.burden)));
        }
        if !(self.blob_mean < EMPHYSEMA_THRESHOLD_HU && EMPHYSEMA_THRESHOLD_HU < self.parenchyma_mean) {
            return Err(Error::invalid("need blob_mean < -950 HU < parenchyma_mean"));
        }
        if self.blob_radius.0 > self.blob_radius.1 {
            return Err(Error::invalid("blob radius range is inverted"));
        }
        if self.burden > 0.0 && self.blob_radius.1 == 0 {
            return Err(Error::invalid(
                "unsatisfiable spec: positive burden with zero blob radius",
            ));
        }
        if !(1..=2).contains(&self.channels) {
            return Err(Error::invalid("channels must be 1 or 2"));
        }
        for s in [
            self.parenchyma_std,
            self.blob_std,
            self.tissue_std,
            self.second_channel_std,
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid("standard deviations must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: LungMask,
    pub achieved_burden: f64,
}

fn to_hu(v: f64) -> i16 {
    v.round().clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16
}

fn ellipsoid_mask(dims: Dims) -> Vec<u8> {
    let r = lung_axis_ratio();
    let centre: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let semi: [f64; 3] = std::array::from_fn(|a| r * dims[a] as f64 / 2.0);
    let mut mask = vec![0u8; dims.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x, y, z];
                let q: f64 = (0..3).map(|a| ((p[a] as f64 - centre[a]) / semi[a]).powi(2)).sum();
                if q <= 1.0 {
                    mask[voxel_index(dims, x, y, z)] = 1;
                }
            }
        }
    }
    mask
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("validated standard deviation")
}

/// Generates one phantom; deterministic for a given spec (including seed).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = rng::seeded(spec.seed);
    let mask_data = ellipsoid_mask(dims);
    let n = mask_data.len();
    let parenchyma = normal(spec.parenchyma_mean, spec.parenchyma_std);
    let tissue = normal(spec.tissue_mean, spec.tissue_std);
    let mut ch0: Vec<i16> = mask_data
        .iter()
        .map(|&m| {
            if m == 1 {
                to_hu(parenchyma.sample(&mut rng))
            } else {
                to_hu(tissue.sample(&mut rng))
            }
        })
        .collect();

    let lung: Vec<usize> = (0..n).filter(|&i| mask_data[i] == 1).collect();
    if lung.is_empty() {
        return Err(Error::NoLungVoxels);
    }
    let is_low = |v: i16| f64::from(v) < EMPHYSEMA_THRESHOLD_HU;
    let mut below = lung.iter().filter(|&&i| is_low(ch0[i])).count();
    let target = spec.burden * lung.len() as f64;

    if (below as f64) < target {
        let blob = normal(spec.blob_mean, spec.blob_std);
        let (r_lo, r_hi) = (spec.blob_radius.0.max(1), spec.blob_radius.1);
        let smallest = (4.0 / 3.0 * std::f64::consts::PI * (r_lo as f64).powi(3)).max(1.0);
        let max_blobs = 20 * (lung.len() as f64 / smallest).ceil() as usize + 1000;
        for _ in 0..max_blobs {
            if below as f64 >= target {
                break;
            }
            let centre = lung[rng.random_range(0..lung.len())];
            let (cx, cy, cz) = (
                centre % dims[0],
                (centre / dims[0]) % dims[1],
                centre / (dims[0] * dims[1]),
            );
            let r = rng.random_range(r_lo..=r_hi);
            let r2 = (r * r) as isize;
            let ri = r as isize;
            for dz in -ri..=ri {
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        if dx * dx + dy * dy + dz * dz > r2 {
                            continue;
                        }
                        let (x, y, z) = (cx as isize + dx, cy as isize + dy, cz as isize + dz);
                        if x < 0 || y < 0 || z < 0 {
                            continue;
                        }
                        let (x, y, z) = (x as usize, y as usize, z as usize);
                        if x >= dims[0] || y >= dims[1] || z >= dims[2] {
                            continue;
                        }
                        let i = voxel_index(dims, x, y, z);
                        if mask_data[i] == 0 {
                            continue;
                        }
                        let before = is_low(ch0[i]);
                        ch0[i] = to_hu(blob.sample(&mut rng));
                        match (before, is_low(ch0[i])) {
                            (false, true) => below += 1,
                            (true, false) => below -= 1,
                            _ => {}
                        }
                    }
                }
            }
        }
    }

    let mut data = ch0.clone();
    if spec.channels == 2 {
        let noise = normal(0.0, spec.second_channel_std);
        data.extend(ch0.iter().map(|&v| to_hu(f64::from(v) + noise.sample(&mut rng))));
    }
    let volume = Volume::new(dims, spec.spacing, spec.channels, data)?;
    let mask = LungMask::new(dims, mask_data)?;
    let achieved_burden = emphysema_fraction(&volume, &mask, EMPHYSEMA_THRESHOLD_HU)?;
    Ok(Phantom {
        volume,
        mask,
        achieved_burden,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_healthy: usize,
    pub n_diseased: usize,
    /// Burden range sampled uniformly for healthy subjects.
    pub healthy_burden: (f64, f64),
    pub diseased_burden: (f64, f64),
    /// Template for every phantom; burden and seed are overridden.
    pub phantom: PhantomSpec,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_healthy: 0,
            n_diseased: 0,
            healthy_burden: (0.0, 0.005),
            diseased_burden: (0.08, 0.35),
            phantom: PhantomSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientPlan {
    pub patient_id: String,
    pub label: SubjectLabel,
    pub split: Split,
    pub phantom: PhantomSpec,
}

/// Split sizes for one class: 20% validation, 20% test (rounded), rest train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (n as f64 * 0.2).round() as usize;
    let test = (n as f64 * 0.2).round() as usize;
    (n - val - test, val, test)
}

/// Patient ids, labels, stratified splits and per-patient phantom specs.
pub fn plan_cohort(spec: &CohortSpec) -> Result<Vec<PatientPlan>> {
    spec.phantom.validate()?;
    for (lo, hi) in [spec.healthy_burden, spec.diseased_burden] {
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "burden range ({lo}, {hi}) must lie within [0,1]"
            )));
        }
    }
    let mut rng = rng::seeded(spec.seed);
    let mut plans = Vec::with_capacity(spec.n_healthy + spec.n_diseased);
    for (label, n, (lo, hi), prefix) in [
        (SubjectLabel::Healthy, spec.n_healthy, spec.healthy_burden, "healthy"),
        (
            SubjectLabel::Diseased,
            spec.n_diseased,
            spec.diseased_burden,
            "diseased",
        ),
    ] {
        let (n_train, n_val, _) = split_sizes(n);
        let mut slots: Vec<Split> = (0..n)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                }
            })
            .collect();
        slots.shuffle(&mut rng);
        for (i, split) in slots.into_iter().enumerate() {
            let burden = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let phantom = PhantomSpec {
                burden,
                seed: rng::derive_seed(spec.seed, plans.len() as u64),
                ..spec.phantom.clone()
            };
            plans.push(PatientPlan {
                patient_id: format!("{prefix}_{i:04}"),
                label,
                split,
                phantom,
            });
        }
    }
    Ok(plans)
}

/// Generates the cohort, writes VOL1 volumes and masks plus `manifest.json`
/// into `out_dir`, and returns the manifest.
pub fn generate_cohort(spec: &CohortSpec, out_dir: impl AsRef<Path>) -> Result<CohortManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let plans = plan_cohort(spec)?;
    let patients = plans
        .par_iter()
        .map(|plan| {
            let phantom = generate_phantom(&plan.phantom)?;
            let vol = write_volume(&phantom.volume, out_dir, &plan.patient_id)?;
            let mask = write_mask(
                &phantom.mask,
                plan.phantom.spacing,
                out_dir,
                &format!("{}_mask", plan.patient_id),
            )?;
            let file_name = |p: PathBuf| PathBuf::from(p.file_name().expect("written file has a name"));
            Ok(ManifestEntry {
                patient_id: plan.patient_id.clone(),
                volume_path: file_name(vol),
                mask_path: file_name(mask),
                subject_label: plan.label,
                split: plan.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CohortManifest {
        patients,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(burden: f64, seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [48, 48, 48],
            burden,
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn mask_fills_about_forty_percent() {
        let m = ellipsoid_mask([64, 64, 64]);
        let frac = m.iter().filter(|&&v| v == 1).count() as f64 / m.len() as f64;
        assert!((frac - 0.4).abs() < 0.02, "{frac}");
    }

    #[test]
    fn zero_burden_stays_below_normal_limit() {
        let p = generate_phantom(&small(0.0, 1)).unwrap();
        assert!(p.achieved_burden < 0.01, "{}", p.achieved_burden);
        // the parenchyma tail alone: Φ(-2.5) ≈ 0.6%
        assert!(p.achieved_burden > 0.002);
    }

    #[test]
    fn quarter_burden_is_reached_without_large_overshoot() {
        let p = generate_phantom(&small(0.25, 2)).unwrap();
        assert!((0.25..=0.35).contains(&p.achieved_burden), "{}", p.achieved_burden);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(&small(0.1, 3)).unwrap();
        let b = generate_phantom(&small(0.1, 3)).unwrap();
        assert_eq!(a.volume, b.volume);
        let c = generate_phantom(&small(0.1, 4)).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn second_channel_is_a_noisy_copy() {
        let spec = PhantomSpec {
            channels: 2,
            ..small(0.05, 5)
        };
        let p = generate_phantom(&spec).unwrap();
        let (a, b) = (p.volume.channel(0), p.volume.channel(1));
        let diff: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| f64::from(y) - f64::from(x)).collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let std = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diff.len() as f64).sqrt();
        assert!(mean.abs() < 0.5 && (std - 10.0).abs() < 0.5, "{mean} {std}");
    }

    #[test]
    fn unsatisfiable_spec_is_rejected() {
        let spec = PhantomSpec {
            blob_radius: (0, 0),
            ..small(0.2, 1)
        };
        assert!(generate_phantom(&spec).is_err());
        let spec = PhantomSpec {
            blob_mean: -900.0,
            ..small(0.2, 1)
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10), (6, 2, 2));
        assert_eq!(split_sizes(0), (0, 0, 0));
        let plans = plan_cohort(&CohortSpec {
            n_healthy: 10,
            n_diseased: 10,
            ..CohortSpec::default()
        })
        .unwrap();
        assert_eq!(plans.len(), 20);
        for label in [SubjectLabel::Healthy, SubjectLabel::Diseased] {
            let count = |s: Split| plans.iter().filter(|p| p.label == label && p.split == s).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
        }
        assert!(plan_cohort(&CohortSpec::default()).unwrap().is_empty());
    }

    #[test]
    fn written_cohort_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CohortSpec {
            n_healthy: 1,
            n_diseased: 1,
            phantom: PhantomSpec {
                dims: [16, 16, 16],
                blob_radius: (1, 2),
                ..PhantomSpec::default()
            },
            ..CohortSpec::default()
        };
        let manifest = generate_cohort(&spec, dir.path()).unwrap();
        let reloaded = CohortManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(reloaded.patients, manifest.patients);
        let d = reloaded.get("diseased_0000").unwrap();
        let vol = crate::volume::load_volume(reloaded.resolve(&d.volume_path)).unwrap();
        let mask = crate::volume::load_mask(reloaded.resolve(&d.mask_path)).unwrap();
        assert!(emphysema_fraction(&vol, &mask, -950.0).unwrap() >= 0.08);
    }
}

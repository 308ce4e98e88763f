//! On-disk patch stores and augmented pair datasets.
//!
//! A patch store (`PST1`) is a directory with `patches.json` plus one
//! `<patient_id>.pst1.raw` payload per patient holding its patches as
//! `i16le`, each `channels·size³` samples in patch layout.
//!
//! A pair dataset (`PAIR1`) is a directory with `pairs.json` plus
//! `pairs.raw`: for every record, view A then view B as `f32le`, normalized
//! to `(hu + 1024) / 4095`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig};
use crate::encode::{handcrafted_features, Embedding, EmbeddingSet, Provenance, FEATURES_PER_CHANNEL};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::volume::{
    extract_patch_grid, label_patch_normality, load_mask, load_volume, subsample_patches, CohortManifest, Patch, Split,
    SubjectLabel, DEFAULT_MAX_PATCHES_PER_PATIENT, DEFAULT_MIN_LUNG_COVERAGE, DEFAULT_PATCH_SIZE, HU_MAX, HU_MIN,
};

pub const STORE_MAGIC: &str = "PST1";
pub const STORE_INDEX: &str = "patches.json";
pub const PAIRS_MAGIC: &str = "PAIR1";
pub const PAIRS_INDEX: &str = "pairs.json";
pub const PAIRS_PAYLOAD: &str = "pairs.raw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub patch_size: usize,
    pub overlap: f64,
    pub min_lung_coverage: f64,
    pub max_patches_per_patient: usize,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            overlap: 0.0,
            min_lung_coverage: DEFAULT_MIN_LUNG_COVERAGE,
            max_patches_per_patient: DEFAULT_MAX_PATCHES_PER_PATIENT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPatch {
    pub index: u32,
    pub origin: [usize; 3],
    pub mask_coverage: f64,
    pub emphysema_fraction: f64,
    pub normal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPatient {
    pub patient_id: String,
    pub label: SubjectLabel,
    pub split: Split,
    pub payload: String,
    pub patches: Vec<StoredPatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchStore {
    pub magic: String,
    pub channels: usize,
    pub config: ExtractConfig,
    pub patients: Vec<StoredPatient>,
    #[serde(skip)]
    pub dir: PathBuf,
}

fn patch_to_bytes(p: &Patch, out: &mut Vec<u8>) {
    for &v in &p.data {
        let hu = v.round().clamp(f32::from(HU_MIN), f32::from(HU_MAX)) as i16;
        out.extend(hu.to_le_bytes());
    }
}

/// Extracts, subsamples and flags patches for every manifest patient, and
/// writes the store into `out_dir`.
pub fn extract_cohort(manifest: &CohortManifest, cfg: &ExtractConfig, out_dir: impl AsRef<Path>) -> Result<PatchStore> {
    let out_dir = out_dir.as_ref();
    if cfg.max_patches_per_patient == 0 {
        return Err(Error::invalid("max_patches_per_patient must be >= 1"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = manifest
        .patients
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let vol = load_volume(manifest.resolve(&entry.volume_path))?;
            let mask = load_mask(manifest.resolve(&entry.mask_path))?;
            let grid = extract_patch_grid(
                &vol,
                &mask,
                &entry.patient_id,
                cfg.patch_size,
                cfg.overlap,
                cfg.min_lung_coverage,
            )?;
            let kept = subsample_patches(grid, cfg.max_patches_per_patient, derive_seed(cfg.seed, i as u64))?;
            let mut bytes = Vec::new();
            let patches = kept
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    patch_to_bytes(p, &mut bytes);
                    StoredPatch {
                        index: k as u32,
                        origin: p.origin,
                        mask_coverage: p.mask_coverage,
                        emphysema_fraction: p.emphysema_fraction,
                        normal: label_patch_normality(p, entry.subject_label),
                    }
                })
                .collect();
            let payload = format!("{}.pst1.raw", entry.patient_id);
            let path = out_dir.join(&payload);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok((
                vol.channels(),
                StoredPatient {
                    patient_id: entry.patient_id.clone(),
                    label: entry.subject_label,
                    split: entry.split,
                    payload,
                    patches,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let channels = results.first().map_or(1, |r| r.0);
    if results.iter().any(|r| r.0 != channels) {
        return Err(Error::Format("patients differ in channel count".into()));
    }
    let store = PatchStore {
        magic: STORE_MAGIC.into(),
        channels,
        config: cfg.clone(),
        patients: results.into_iter().map(|r| r.1).collect(),
        dir: out_dir.to_path_buf(),
    };
    store.save()?;
    Ok(store)
}

impl PatchStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(STORE_INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut store: PatchStore =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if store.magic != STORE_MAGIC {
            return Err(Error::Format(format!("bad patch store magic {:?}", store.magic)));
        }
        store.dir = dir.to_path_buf();
        Ok(store)
    }

    fn save(&self) -> Result<()> {
        let path = self.dir.join(STORE_INDEX);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("patch store index", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Patient id to binary class (1 = diseased).
    pub fn labels(&self) -> HashMap<String, u8> {
        self.patients
            .iter()
            .map(|p| (p.patient_id.clone(), p.label.as_class()))
            .collect()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.config.patch_size.pow(3)
    }

    /// Reads one patient's patches back, with metadata restored.
    pub fn load_patches(&self, patient: &StoredPatient) -> Result<Vec<Patch>> {
        let path = self.dir.join(&patient.payload);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let per_patch = self.patch_len();
        let expected = 2 * per_patch * patient.patches.len();
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "payload size mismatch: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        Ok(patient
            .patches
            .iter()
            .zip(bytes.chunks_exact(2 * per_patch.max(1)))
            .map(|(meta, raw)| Patch {
                data: raw
                    .chunks_exact(2)
                    .map(|b| f32::from(i16::from_le_bytes([b[0], b[1]])))
                    .collect(),
                channels: self.channels,
                size: self.config.patch_size,
                origin: meta.origin,
                mask_coverage: meta.mask_coverage,
                emphysema_fraction: meta.emphysema_fraction,
                patient_id: patient.patient_id.clone(),
            })
            .collect())
    }
}

/// Handcrafted embeddings for every stored patch of patients in `splits`
/// (all splits when empty), in store order. Normal flags come from the store.
pub fn featurize_store(store: &PatchStore, splits: &[Split]) -> Result<EmbeddingSet> {
    let selected: Vec<&StoredPatient> = store
        .patients
        .iter()
        .filter(|p| splits.is_empty() || splits.contains(&p.split))
        .collect();
    let per_patient = selected
        .par_iter()
        .map(|patient| {
            let patches = store.load_patches(patient)?;
            Ok(patient
                .patches
                .iter()
                .zip(&patches)
                .map(|(meta, p)| Embedding {
                    values: handcrafted_features(p),
                    patient_id: patient.patient_id.clone(),
                    patch_index: meta.index,
                    normal_flag: meta.normal,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = EmbeddingSet::new(store.channels * FEATURES_PER_CHANNEL, Provenance::Handcrafted);
    set.rows = per_patient.into_iter().flatten().collect();
    set.validate()?;
    Ok(set)
}

/// Maps HU to roughly `[0, 1]` for network input.
pub fn normalize_hu(v: f32) -> f32 {
    (v - f32::from(HU_MIN)) / f32::from(HU_MAX - HU_MIN)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub patient_id: String,
    pub patch_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairIndex {
    pub magic: String,
    pub patch_size: usize,
    pub channels: usize,
    /// Floats per view.
    pub view_len: usize,
    pub normalization: String,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub records: Vec<PairRecord>,
}

/// Writes two augmented views of every patch in `splits` (all splits when
/// empty). Record `i` uses seed `derive_seed(seed, i)`.
pub fn make_pairs(
    store: &PatchStore,
    cfg: &AugmentConfig,
    seed: u64,
    splits: &[Split],
    out_dir: impl AsRef<Path>,
) -> Result<PairIndex> {
    let out_dir = out_dir.as_ref();
    cfg.validate(store.config.patch_size)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut patches = Vec::new();
    for patient in &store.patients {
        if splits.is_empty() || splits.contains(&patient.split) {
            for (meta, p) in patient.patches.iter().zip(store.load_patches(patient)?) {
                patches.push((meta.index, p));
            }
        }
    }
    let views = patches
        .par_iter()
        .enumerate()
        .map(|(i, (_, p))| augment_pair(p, cfg, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let raw_path = out_dir.join(PAIRS_PAYLOAD);
    let file = fs::File::create(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (a, b) in &views {
        for v in a.data.iter().chain(&b.data) {
            w.write_all(&normalize_hu(*v).to_le_bytes())
                .map_err(|e| Error::io(&raw_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&raw_path, e))?;

    let index = PairIndex {
        magic: PAIRS_MAGIC.into(),
        patch_size: store.config.patch_size,
        channels: store.channels,
        view_len: store.patch_len(),
        normalization: "(hu + 1024) / 4095".into(),
        augment: cfg.clone(),
        seed,
        records: patches
            .into_iter()
            .map(|(index, p)| PairRecord {
                patient_id: p.patient_id,
                patch_index: index,
            })
            .collect(),
    };
    let path = out_dir.join(PAIRS_INDEX);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json("pair index", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Normalized `(view_a, view_b)` of one record.
pub type ViewPair = (Vec<f32>, Vec<f32>);

pub fn read_pairs(dir: impl AsRef<Path>) -> Result<(PairIndex, Vec<ViewPair>)> {
    let dir = dir.as_ref();
    let path = dir.join(PAIRS_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: PairIndex = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if index.magic != PAIRS_MAGIC {
        return Err(Error::Format(format!("bad pair dataset magic {:?}", index.magic)));
    }
    let raw_path = dir.join(PAIRS_PAYLOAD);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = index.records.len() * 2 * index.view_len * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload size mismatch: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let pairs = floats
        .chunks_exact((2 * index.view_len).max(1))
        .take(index.records.len())
        .map(|rec| (rec[..index.view_len].to_vec(), rec[index.view_len..].to_vec()))
        .collect();
    Ok((index, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, CohortSpec, PhantomSpec};

    fn small_cohort(dir: &Path) -> CohortManifest {
        let spec = CohortSpec {
            n_healthy: 2,
            n_diseased: 2,
            phantom: PhantomSpec {
                dims: [24, 24, 24],
                blob_radius: (1, 3),
                ..PhantomSpec::default()
            },
            seed: 3,
            ..CohortSpec::default()
        };
        generate_cohort(&spec, dir).unwrap()
    }

    #[test]
    fn store_round_trip_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_cohort(&dir.path().join("cohort"));
        let cfg = ExtractConfig {
            patch_size: 8,
            max_patches_per_patient: 5,
            ..ExtractConfig::default()
        };
        let store = extract_cohort(&manifest, &cfg, dir.path().join("patches")).unwrap();
        let reopened = PatchStore::open(dir.path().join("patches")).unwrap();
        assert_eq!(reopened.patients, store.patients);
        for patient in &reopened.patients {
            assert!(patient.patches.len() <= 5);
            let patches = reopened.load_patches(patient).unwrap();
            assert_eq!(patches.len(), patient.patches.len());
            let entry = manifest.get(&patient.patient_id).unwrap();
            let vol = load_volume(manifest.resolve(&entry.volume_path)).unwrap();
            for (meta, p) in patient.patches.iter().zip(&patches) {
                let [ox, oy, oz] = p.origin;
                assert_eq!(p.data[0], f32::from(vol.get(0, ox, oy, oz)));
                assert_eq!(meta.normal, label_patch_normality(p, patient.label));
                if patient.label == SubjectLabel::Diseased {
                    assert!(!meta.normal);
                }
            }
        }
    }

    #[test]
    fn pairs_are_deterministic_and_readable() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_cohort(&dir.path().join("cohort"));
        let cfg = ExtractConfig {
            patch_size: 8,
            max_patches_per_patient: 3,
            ..ExtractConfig::default()
        };
        let store = extract_cohort(&manifest, &cfg, dir.path().join("patches")).unwrap();
        let aug = AugmentConfig {
            shuffle_block_size: 2,
            paint_size_range: (1, 3),
            ..AugmentConfig::default()
        };
        let index = make_pairs(&store, &aug, 9, &[], dir.path().join("a")).unwrap();
        make_pairs(&store, &aug, 9, &[], dir.path().join("b")).unwrap();
        let a = fs::read(dir.path().join("a").join(PAIRS_PAYLOAD)).unwrap();
        let b = fs::read(dir.path().join("b").join(PAIRS_PAYLOAD)).unwrap();
        assert_eq!(a, b);
        let (back, pairs) = read_pairs(dir.path().join("a")).unwrap();
        assert_eq!(back, index);
        assert_eq!(pairs.len(), index.records.len());
        assert!(pairs.iter().all(|(x, y)| x.len() == 512 && y.len() == 512));
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_hu(-1024.0), 0.0);
        assert_eq!(normalize_hu(3071.0), 1.0);
    }
}

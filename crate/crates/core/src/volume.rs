//! CT volumes, lung masks and lung-patch extraction.
//!
//! Volumes live on disk in the VOL1 layout: a JSON sidecar
//! `<name>.vol1.json` describing the grid and a raw payload
//! `<name>.vol1.raw` holding channel-major, then z, y, x ordered samples.
//! Intensities are little-endian `i16` Hounsfield units; masks reuse the
//! layout with `u8` samples in `{0, 1}`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Lowest representable CT intensity kept after loading.
pub const HU_MIN: i16 = -1024;
/// Highest representable CT intensity kept after loading (12-bit range).
pub const HU_MAX: i16 = 3071;
/// Low-attenuation threshold used for emphysema quantification.
pub const EMPHYSEMA_THRESHOLD_HU: f64 = -950.0;
/// A patch is normal only when strictly less than this fraction of its lung
/// voxels is emphysematous, and only in healthy subjects.
pub const NORMAL_EMPHYSEMA_LIMIT: f64 = 0.01;

pub const DEFAULT_PATCH_SIZE: usize = 32;
pub const DEFAULT_MIN_LUNG_COVERAGE: f64 = 0.5;
pub const DEFAULT_MAX_PATCHES_PER_PATIENT: usize = 100;

pub type Dims = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectLabel {
    Healthy,
    Diseased,
}

impl SubjectLabel {
    /// Binary class used by the metrics (1 = diseased).
    pub fn as_class(self) -> u8 {
        match self {
            SubjectLabel::Healthy => 0,
            SubjectLabel::Diseased => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Voxel index of `(x, y, z)` inside a `dims` grid (x fastest).
#[inline]
pub fn voxel_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// A 3D CT grid with one or two registered channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    channels: usize,
    data: Vec<i16>,
}

impl Volume {
    /// Builds a volume, clamping intensities into `[HU_MIN, HU_MAX]`.
    pub fn new(dims: Dims, spacing: [f64; 3], channels: usize, mut data: Vec<i16>) -> Result<Self> {
        validate_grid(dims, spacing)?;
        if !(1..=2).contains(&channels) {
            return Err(Error::invalid(format!("channels must be 1 or 2, got {channels}")));
        }
        let expected = voxel_count(dims) * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        for v in &mut data {
            *v = (*v).clamp(HU_MIN, HU_MAX);
        }
        Ok(Volume {
            dims,
            spacing,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    /// Samples of one channel in z, y, x order.
    pub fn channel(&self, c: usize) -> &[i16] {
        let n = voxel_count(self.dims);
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> i16 {
        self.data[c * voxel_count(self.dims) + voxel_index(self.dims, x, y, z)]
    }
}

fn validate_grid(dims: Dims, spacing: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("all dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

/// Binary lung segmentation aligned with a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LungMask {
    dims: Dims,
    data: Vec<u8>,
}

impl LungMask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("all dims must be >= 1, got {dims:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::DimensionMismatch {
                expected: voxel_count(dims),
                got: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Format(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(LungMask { dims, data })
    }

    pub fn full(dims: Dims) -> Self {
        LungMask {
            dims,
            data: vec![1; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn lung_voxels(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    #[inline]
    pub fn is_lung(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[voxel_index(self.dims, x, y, z)] == 1
    }
}

/// A cubic multi-channel crop of a volume.
///
/// `data` holds `channels * size³` intensities, channel-major then z, y, x.
/// Extraction produces integral HU values; augmentations may make them
/// fractional.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: Vec<f32>,
    pub channels: usize,
    pub size: usize,
    pub origin: [usize; 3],
    pub mask_coverage: f64,
    pub emphysema_fraction: f64,
    pub patient_id: String,
}

impl Patch {
    /// A patch not tied to any volume, mostly useful for transforms.
    pub fn from_data(data: Vec<f32>, channels: usize, size: usize) -> Result<Self> {
        let expected = channels * size * size * size;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Patch {
            data,
            channels,
            size,
            origin: [0; 3],
            mask_coverage: 1.0,
            emphysema_fraction: 0.0,
            patient_id: String::new(),
        })
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.size * self.size * self.size
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    /// Same metadata, new samples.
    pub fn with_data(&self, data: Vec<f32>) -> Patch {
        debug_assert_eq!(data.len(), self.data.len());
        Patch { data, ..self.clone() }
    }
}

/// Fraction of lung voxels below `threshold` HU, measured on channel 0.
pub fn emphysema_fraction(vol: &Volume, mask: &LungMask, threshold: f64) -> Result<f64> {
    check_mask_matches(vol, mask)?;
    let (below, lung) = vol
        .channel(0)
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m == 1)
        .fold((0usize, 0usize), |(b, n), (&v, _)| {
            (b + usize::from(f64::from(v) < threshold), n + 1)
        });
    if lung == 0 {
        return Err(Error::NoLungVoxels);
    }
    Ok(below as f64 / lung as f64)
}

fn check_mask_matches(vol: &Volume, mask: &LungMask) -> Result<()> {
    if vol.dims() != mask.dims() {
        return Err(Error::invalid(format!(
            "mask dims {:?} differ from volume dims {:?}",
            mask.dims(),
            vol.dims()
        )));
    }
    Ok(())
}

/// Window start positions along one axis: multiples of `stride` that keep
/// the window inside the axis, plus the clamped final window `dim - size`.
pub fn grid_starts(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = dim - size;
    let stride = stride.max(1);
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Stride of the patch grid for a given overlap fraction.
pub fn grid_stride(patch_size: usize, overlap: f64) -> usize {
    ((patch_size as f64 * (1.0 - overlap)).floor() as usize).max(1)
}

/// Tiles the volume with cubic patches and keeps those sufficiently covered
/// by lung.
pub fn extract_patch_grid(
    vol: &Volume,
    mask: &LungMask,
    patient_id: &str,
    patch_size: usize,
    overlap: f64,
    min_lung_coverage: f64,
) -> Result<Vec<Patch>> {
    check_mask_matches(vol, mask)?;
    let dims = vol.dims();
    if patch_size == 0 || dims.iter().any(|&d| patch_size > d) {
        return Err(Error::invalid(format!(
            "patch size {patch_size} does not fit volume dims {dims:?}"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    if !(0.0..=1.0).contains(&min_lung_coverage) {
        return Err(Error::invalid(format!(
            "min_lung_coverage must lie in [0, 1], got {min_lung_coverage}"
        )));
    }

    let stride = grid_stride(patch_size, overlap);
    let starts: Vec<Vec<usize>> = dims.iter().map(|&d| grid_starts(d, patch_size, stride)).collect();
    let voxels = patch_size * patch_size * patch_size;

    let mut patches = Vec::new();
    for &oz in &starts[2] {
        for &oy in &starts[1] {
            for &ox in &starts[0] {
                let mut lung = 0usize;
                let mut below = 0usize;
                for z in oz..oz + patch_size {
                    for y in oy..oy + patch_size {
                        for x in ox..ox + patch_size {
                            if mask.is_lung(x, y, z) {
                                lung += 1;
                                if f64::from(vol.get(0, x, y, z)) < EMPHYSEMA_THRESHOLD_HU {
                                    below += 1;
                                }
                            }
                        }
                    }
                }
                let coverage = lung as f64 / voxels as f64;
                if coverage < min_lung_coverage {
                    continue;
                }
                let mut data = Vec::with_capacity(vol.channels() * voxels);
                for c in 0..vol.channels() {
                    for z in oz..oz + patch_size {
                        for y in oy..oy + patch_size {
                            for x in ox..ox + patch_size {
                                data.push(f32::from(vol.get(c, x, y, z)));
                            }
                        }
                    }
                }
                patches.push(Patch {
                    data,
                    channels: vol.channels(),
                    size: patch_size,
                    origin: [ox, oy, oz],
                    mask_coverage: coverage,
                    // Lung-free patches (only kept when min coverage is 0) count as intact.
                    emphysema_fraction: if lung == 0 { 0.0 } else { below as f64 / lung as f64 },
                    patient_id: patient_id.to_string(),
                });
            }
        }
    }
    Ok(patches)
}

/// Normal-patch rule: healthy subject and strictly under 1% emphysema.
pub fn label_patch_normality(patch: &Patch, subject_label: SubjectLabel) -> bool {
    subject_label == SubjectLabel::Healthy && patch.emphysema_fraction < NORMAL_EMPHYSEMA_LIMIT
}

/// Caps the number of patches per patient with a seeded uniform draw
/// without replacement, keeping the original relative order.
pub fn subsample_patches(patches: Vec<Patch>, max_n: usize, seed: u64) -> Result<Vec<Patch>> {
    if max_n == 0 {
        return Err(Error::invalid("max_n must be >= 1"));
    }
    if patches.len() <= max_n {
        return Ok(patches);
    }
    let mut rng = rng::seeded(seed);
    let mut keep = index::sample(&mut rng, patches.len(), max_n).into_vec();
    keep.sort_unstable();
    let mut keep = keep.into_iter().peekable();
    Ok(patches
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            if keep.peek() == Some(&i) {
                keep.next();
                Some(p)
            } else {
                None
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// VOL1 on-disk format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Vol1Sidecar {
    dims: Dims,
    spacing: [f64; 3],
    channels: usize,
    dtype: String,
    payload: String,
}

const DTYPE_I16: &str = "i16le";
const DTYPE_U8: &str = "u8";

fn read_sidecar(path: &Path) -> Result<(Vol1Sidecar, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar: Vol1Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    validate_grid(sidecar.dims, sidecar.spacing)?;
    let payload_path = path.parent().unwrap_or(Path::new(".")).join(&sidecar.payload);
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    Ok((sidecar, payload))
}

fn write_sidecar(dir: &Path, name: &str, sidecar: &Vol1Sidecar, payload: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(format!("{name}.vol1.json"));
    let raw_path = dir.join(&sidecar.payload);
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::json("vol1 sidecar", e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(json_path)
}

fn size_mismatch(expected: usize, got: usize) -> Error {
    Error::Format(format!("payload size mismatch: expected {expected} bytes, found {got}"))
}

/// Reads a VOL1 intensity volume given the path of its JSON sidecar.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (sidecar, payload) = read_sidecar(path)?;
    if sidecar.dtype != DTYPE_I16 {
        return Err(Error::Format(format!(
            "volume dtype must be {DTYPE_I16}, found {:?}",
            sidecar.dtype
        )));
    }
    let expected = voxel_count(sidecar.dims) * sidecar.channels * 2;
    if payload.len() != expected {
        return Err(size_mismatch(expected, payload.len()));
    }
    let data = payload
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    Volume::new(sidecar.dims, sidecar.spacing, sidecar.channels, data)
}

/// Writes `<dir>/<name>.vol1.json` and its payload; returns the sidecar path.
pub fn write_volume(vol: &Volume, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let sidecar = Vol1Sidecar {
        dims: vol.dims,
        spacing: vol.spacing,
        channels: vol.channels,
        dtype: DTYPE_I16.into(),
        payload: format!("{name}.vol1.raw"),
    };
    let payload: Vec<u8> = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_sidecar(dir.as_ref(), name, &sidecar, &payload)
}

/// Reads a VOL1 `u8` lung mask.
pub fn load_mask(path: impl AsRef<Path>) -> Result<LungMask> {
    let path = path.as_ref();
    let (sidecar, payload) = read_sidecar(path)?;
    if sidecar.dtype != DTYPE_U8 || sidecar.channels != 1 {
        return Err(Error::Format(format!(
            "mask must be single-channel {DTYPE_U8}, found {} x {:?}",
            sidecar.channels, sidecar.dtype
        )));
    }
    let expected = voxel_count(sidecar.dims);
    if payload.len() != expected {
        return Err(size_mismatch(expected, payload.len()));
    }
    LungMask::new(sidecar.dims, payload)
}

pub fn write_mask(mask: &LungMask, spacing: [f64; 3], dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let sidecar = Vol1Sidecar {
        dims: mask.dims,
        spacing,
        channels: 1,
        dtype: DTYPE_U8.into(),
        payload: format!("{name}.vol1.raw"),
    };
    write_sidecar(dir.as_ref(), name, &sidecar, &mask.data)
}

// ---------------------------------------------------------------------------
// Cohort manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    /// Sidecar path, relative to the manifest's directory unless absolute.
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
    pub subject_label: SubjectLabel,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub patients: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CohortManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.patients {
            if !seen.insert(e.patient_id.as_str()) {
                return Err(Error::Format(format!("duplicate patient id {:?}", e.patient_id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, patient_id: &str) -> Option<&ManifestEntry> {
        self.patients.iter().find(|e| e.patient_id == patient_id)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: CohortManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        manifest.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        manifest.validate_unique_ids()?;
        for e in &manifest.patients {
            for p in [&e.volume_path, &e.mask_path] {
                let resolved = manifest.resolve(p);
                if !resolved.is_file() {
                    return Err(Error::Format(format!(
                        "patient {:?}: unresolvable path {}",
                        e.patient_id,
                        resolved.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate_unique_ids()?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_volume(dims: Dims, hu: i16) -> Volume {
        Volume::new(dims, [1.0; 3], 1, vec![hu; voxel_count(dims)]).unwrap()
    }

    #[test]
    fn load_constant_volume() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<u8> = std::iter::repeat_n((-1000i16).to_le_bytes(), 64).flatten().collect();
        assert_eq!(raw.len(), 128);
        fs::write(dir.path().join("v.vol1.raw"), &raw).unwrap();
        fs::write(
            dir.path().join("v.vol1.json"),
            r#"{"dims":[4,4,4],"spacing":[1,1,1],"channels":1,"dtype":"i16le","payload":"v.vol1.raw"}"#,
        )
        .unwrap();
        let vol = load_volume(dir.path().join("v.vol1.json")).unwrap();
        assert_eq!(vol.data().len(), 64);
        assert!(vol.data().iter().all(|&v| v == -1000));
    }

    #[test]
    fn load_rejects_wrong_payload_length() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.vol1.raw"), vec![0u8; 127]).unwrap();
        fs::write(
            dir.path().join("v.vol1.json"),
            r#"{"dims":[4,4,4],"spacing":[1,1,1],"channels":1,"dtype":"i16le","payload":"v.vol1.raw"}"#,
        )
        .unwrap();
        let err = load_volume(dir.path().join("v.vol1.json")).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");
    }

    #[test]
    fn load_rejects_nonpositive_spacing_and_bad_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.vol1.raw"), vec![0u8; 2]).unwrap();
        fs::write(
            dir.path().join("v.vol1.json"),
            r#"{"dims":[1,1,1],"spacing":[1,0,1],"channels":1,"dtype":"i16le","payload":"v.vol1.raw"}"#,
        )
        .unwrap();
        assert!(load_volume(dir.path().join("v.vol1.json")).is_err());
        fs::write(dir.path().join("w.vol1.json"), "{not json").unwrap();
        assert!(matches!(
            load_volume(dir.path().join("w.vol1.json")),
            Err(Error::Json { .. })
        ));
        assert!(matches!(
            load_volume(dir.path().join("missing.vol1.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_clamps_out_of_range_intensities() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume {
            dims: [2, 1, 1],
            spacing: [1.0; 3],
            channels: 1,
            data: vec![-2000, 4000],
        };
        let path = write_volume(&vol, dir.path(), "v").unwrap();
        let loaded = load_volume(path).unwrap();
        assert_eq!(loaded.data(), &[-1024, 3071]);
    }

    #[test]
    fn volume_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [3, 2, 2];
        let data: Vec<i16> = (0..24).map(|i| i * 10 - 100).collect();
        let vol = Volume::new(dims, [0.5, 0.7, 1.25], 2, data).unwrap();
        let p = write_volume(&vol, dir.path(), "a").unwrap();
        assert_eq!(load_volume(p).unwrap(), vol);
        let mask = LungMask::new(dims, vec![0, 1, 1, 0, 1, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        let p = write_mask(&mask, [1.0; 3], dir.path(), "m").unwrap();
        assert_eq!(load_mask(&p).unwrap(), mask);
        // an intensity volume is not a mask
        assert!(load_mask(dir.path().join("a.vol1.json")).is_err());
    }

    #[test]
    fn emphysema_fraction_extremes() {
        let mask = LungMask::full([4, 4, 4]);
        assert_eq!(
            emphysema_fraction(&constant_volume([4, 4, 4], -1000), &mask, -950.0).unwrap(),
            1.0
        );
        assert_eq!(
            emphysema_fraction(&constant_volume([4, 4, 4], -800), &mask, -950.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn emphysema_fraction_counts_lung_voxels_only() {
        // 10 lung voxels: 3 at -960, 7 at -900; 2 non-lung voxels at -1000.
        let mut data = vec![-960i16; 3];
        data.extend([-900i16; 7]);
        data.extend([-1000i16; 2]);
        let mut mask = vec![1u8; 10];
        mask.extend([0u8; 2]);
        let vol = Volume::new([12, 1, 1], [1.0; 3], 1, data.clone()).unwrap();
        let mask = LungMask::new([12, 1, 1], mask).unwrap();
        let oracle = data[..10].iter().filter(|&&v| v < -950).count() as f64 / 10.0;
        assert_eq!(oracle, 0.3);
        assert_eq!(emphysema_fraction(&vol, &mask, -950.0).unwrap(), oracle);
    }

    #[test]
    fn emphysema_threshold_is_strict() {
        let vol = constant_volume([2, 2, 2], -950);
        assert_eq!(
            emphysema_fraction(&vol, &LungMask::full([2, 2, 2]), -950.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn emphysema_fraction_rejects_empty_mask() {
        let vol = constant_volume([2, 2, 2], -1000);
        let mask = LungMask::new([2, 2, 2], vec![0; 8]).unwrap();
        let err = emphysema_fraction(&vol, &mask, -950.0).unwrap_err();
        assert_eq!(err.to_string(), "no lung voxels");
    }

    #[test]
    fn grid_counts_for_zero_and_twenty_percent_overlap() {
        let vol = constant_volume([64, 64, 64], -850);
        let mask = LungMask::full([64, 64, 64]);
        let p0 = extract_patch_grid(&vol, &mask, "p", 32, 0.0, 0.5).unwrap();
        assert_eq!(p0.len(), 8);
        assert_eq!(grid_starts(64, 32, grid_stride(32, 0.2)), vec![0, 25, 32]);
        let p20 = extract_patch_grid(&vol, &mask, "p", 32, 0.2, 0.5).unwrap();
        assert_eq!(p20.len(), 27);
    }

    #[test]
    fn grid_with_empty_mask_is_empty() {
        let vol = constant_volume([64, 64, 64], -850);
        let mask = LungMask::new([64, 64, 64], vec![0; 64 * 64 * 64]).unwrap();
        assert!(extract_patch_grid(&vol, &mask, "p", 32, 0.0, 0.5).unwrap().is_empty());
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        let vol = constant_volume([8, 8, 4], -850);
        let mask = LungMask::full([8, 8, 4]);
        assert!(extract_patch_grid(&vol, &mask, "p", 5, 0.0, 0.5).is_err());
        assert!(extract_patch_grid(&vol, &mask, "p", 4, 0.0, 1.5).is_err());
        assert!(extract_patch_grid(&vol, &mask, "p", 4, 1.0, 0.5).is_err());
    }

    #[test]
    fn patch_carries_region_statistics() {
        // left half of an 8x4x4 volume is emphysematous
        let dims = [8, 4, 4];
        let mut data = vec![-850i16; voxel_count(dims)];
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    data[voxel_index(dims, x, y, z)] = -990;
                }
            }
        }
        let vol = Volume::new(dims, [1.0; 3], 1, data).unwrap();
        let patches = extract_patch_grid(&vol, &LungMask::full(dims), "p", 4, 0.0, 0.0).unwrap();
        assert_eq!(patches.len(), 2);
        assert_eq!(patches[0].origin, [0, 0, 0]);
        assert_eq!(patches[0].emphysema_fraction, 1.0);
        assert_eq!(patches[1].origin, [4, 0, 0]);
        assert_eq!(patches[1].emphysema_fraction, 0.0);
        assert!(patches.iter().all(|p| p.mask_coverage == 1.0 && p.data.len() == 64));
    }

    #[test]
    fn normality_rule() {
        let mut p = Patch::from_data(vec![0.0; 1], 1, 1).unwrap();
        p.emphysema_fraction = 0.005;
        assert!(label_patch_normality(&p, SubjectLabel::Healthy));
        p.emphysema_fraction = 0.02;
        assert!(!label_patch_normality(&p, SubjectLabel::Healthy));
        p.emphysema_fraction = 0.0;
        assert!(!label_patch_normality(&p, SubjectLabel::Diseased));
    }

    fn numbered_patches(n: usize) -> Vec<Patch> {
        (0..n)
            .map(|i| {
                let mut p = Patch::from_data(vec![i as f32], 1, 1).unwrap();
                p.origin = [i, 0, 0];
                p
            })
            .collect()
    }

    #[test]
    fn subsample_under_cap_is_identity() {
        let patches = numbered_patches(80);
        assert_eq!(subsample_patches(patches.clone(), 100, 1).unwrap(), patches);
    }

    #[test]
    fn subsample_caps_and_is_deterministic() {
        let a = subsample_patches(numbered_patches(319), 100, 42).unwrap();
        let b = subsample_patches(numbered_patches(319), 100, 42).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].origin[0] < w[1].origin[0]));
        let c = subsample_patches(numbered_patches(319), 100, 43).unwrap();
        assert_ne!(a, c);
        assert!(subsample_patches(numbered_patches(3), 0, 1).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let entry = ManifestEntry {
            patient_id: "a".into(),
            volume_path: "a.vol1.json".into(),
            mask_path: "a_mask.vol1.json".into(),
            subject_label: SubjectLabel::Healthy,
            split: Split::Train,
        };
        let m = CohortManifest {
            patients: vec![entry.clone(), entry],
            base_dir: dir.path().into(),
        };
        assert!(m.save(dir.path().join("m.json")).is_err());

        let m = CohortManifest {
            patients: vec![m.patients[0].clone()],
            base_dir: dir.path().into(),
        };
        m.save(dir.path().join("m.json")).unwrap();
        let err = CohortManifest::load(dir.path().join("m.json")).unwrap_err();
        assert!(err.to_string().contains("unresolvable path"), "{err}");
    }
}

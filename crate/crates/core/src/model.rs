//! Density models behind one interface, plus their on-disk format.
//!
//! A model file is a single JSON header line followed by `\n` and a payload
//! of little-endian `f64` parameters. The header's `magic` is `GMM1` or
//! `NF1`.
//!
//! * `GMM1` payload: `k` weights, `k·d` means, `k·d·d` row-major covariances.
//! * `NF1` payload: `d` standardization shifts, `d` scales, then every
//!   block's parameters in [`NfModel::params`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, NfModel};
use crate::gmm::{EmConfig, GmmModel};
use crate::scalar::Scalar;

/// Anything exposing a log-density over fixed-dimension vectors.
pub trait DensityModel<T: Scalar> {
    fn dim(&self) -> usize;
    fn log_density(&self, z: &[T]) -> Result<T>;
    fn n_params(&self) -> usize;
}

impl<T: Scalar> DensityModel<T> for GmmModel<T> {
    fn dim(&self) -> usize {
        GmmModel::dim(self)
    }
    fn log_density(&self, z: &[T]) -> Result<T> {
        GmmModel::log_density(self, z)
    }
    fn n_params(&self) -> usize {
        GmmModel::n_params(self)
    }
}

impl<T: Scalar> DensityModel<T> for NfModel<T> {
    fn dim(&self) -> usize {
        NfModel::dim(self)
    }
    fn log_density(&self, z: &[T]) -> Result<T> {
        NfModel::log_density(self, z)
    }
    fn n_params(&self) -> usize {
        NfModel::n_params(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenerativeModel<T> {
    Gmm(GmmModel<T>),
    Flow(NfModel<T>),
}

impl<T: Scalar> DensityModel<T> for GenerativeModel<T> {
    fn dim(&self) -> usize {
        match self {
            GenerativeModel::Gmm(m) => m.dim(),
            GenerativeModel::Flow(m) => m.dim(),
        }
    }
    fn log_density(&self, z: &[T]) -> Result<T> {
        match self {
            GenerativeModel::Gmm(m) => m.log_density(z),
            GenerativeModel::Flow(m) => m.log_density(z),
        }
    }
    fn n_params(&self) -> usize {
        match self {
            GenerativeModel::Gmm(m) => m.n_params(),
            GenerativeModel::Flow(m) => m.n_params(),
        }
    }
}

impl<T: Scalar> GenerativeModel<T> {
    /// Short human-readable name such as `gmm4` or `nf`.
    pub fn label(&self) -> String {
        match self {
            GenerativeModel::Gmm(m) => format!("gmm{}", m.k()),
            GenerativeModel::Flow(_) => "nf".into(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, payload) = match self {
            GenerativeModel::Gmm(m) => gmm_parts(m),
            GenerativeModel::Flow(m) => nf_parts(m),
        };
        let mut buf = serde_json::to_vec(&header).map_err(|e| Error::json("model header", e))?;
        buf.push(b'\n');
        for v in payload {
            buf.extend(v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("model header line missing".into()))?;
        let header: ModelHeader =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::json("model header", e))?;
        let raw = &bytes[newline + 1..];
        if !raw.len().is_multiple_of(8) {
            return Err(Error::Format("payload size mismatch".into()));
        }
        let payload: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        match header.magic.as_str() {
            GMM_MAGIC => gmm_from_parts(&header, &payload).map(GenerativeModel::Gmm),
            NF_MAGIC => nf_from_parts(&header, &payload).map(GenerativeModel::Flow),
            other => Err(Error::Format(format!("unknown model magic {other:?}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const GMM_MAGIC: &str = "GMM1";
const NF_MAGIC: &str = "NF1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    magic: String,
    #[serde(rename = "type")]
    kind: String,
    d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    permutations: Option<Vec<Vec<usize>>>,
    /// Fit settings the parameters came from, echoed for provenance.
    #[serde(default)]
    hyperparameters: serde_json::Value,
    #[serde(default)]
    seed: Option<u64>,
}

fn f64s<T: Scalar>(v: &[T]) -> impl Iterator<Item = f64> + '_ {
    v.iter().map(|x| x.as_f64())
}

fn gmm_parts<T: Scalar>(m: &GmmModel<T>) -> (ModelHeader, Vec<f64>) {
    let header = ModelHeader {
        magic: GMM_MAGIC.into(),
        kind: "gmm".into(),
        d: m.dim(),
        k: Some(m.k()),
        n_blocks: None,
        hidden: None,
        clamp: None,
        permutations: None,
        hyperparameters: serde_json::to_value(&m.fit_config).unwrap_or_default(),
        seed: m.fit_config.as_ref().map(|c| c.seed),
    };
    let mut payload: Vec<f64> = f64s(m.weights()).collect();
    for j in 0..m.k() {
        payload.extend(f64s(m.mean(j)));
    }
    for j in 0..m.k() {
        payload.extend(f64s(m.covariance(j)));
    }
    (header, payload)
}

fn size_mismatch(expected: usize, got: usize) -> Error {
    Error::Format(format!(
        "payload size mismatch: expected {expected} parameters, found {got}"
    ))
}

fn gmm_from_parts<T: Scalar>(header: &ModelHeader, payload: &[f64]) -> Result<GmmModel<T>> {
    let d = header.d;
    let k = header.k.ok_or_else(|| Error::Format("GMM1 header lacks k".into()))?;
    let expected = k + k * d + k * d * d;
    if payload.len() != expected {
        return Err(size_mismatch(expected, payload.len()));
    }
    let t = |s: &[f64]| s.iter().map(|&v| T::of(v)).collect::<Vec<T>>();
    let weights = t(&payload[..k]);
    let means = payload[k..k + k * d].chunks(d).map(t).collect();
    let covs = payload[k + k * d..].chunks(d * d).map(t).collect();
    let mut model = GmmModel::new(weights, means, covs)?;
    model.fit_config = serde_json::from_value::<Option<EmConfig>>(header.hyperparameters.clone()).unwrap_or(None);
    Ok(model)
}

fn nf_parts<T: Scalar>(m: &NfModel<T>) -> (ModelHeader, Vec<f64>) {
    let header = ModelHeader {
        magic: NF_MAGIC.into(),
        kind: "nf".into(),
        d: m.dim(),
        k: None,
        n_blocks: Some(m.blocks.len()),
        hidden: Some(m.hidden()),
        clamp: Some(m.clamp().as_f64()),
        permutations: Some(m.blocks.iter().map(|b| b.permutation.clone()).collect()),
        hyperparameters: serde_json::to_value(&m.fit_config).unwrap_or_default(),
        seed: m.fit_config.as_ref().map(|c| c.seed),
    };
    let mut payload: Vec<f64> = f64s(&m.input_shift).chain(f64s(&m.input_scale)).collect();
    payload.extend(m.params().map(|p| p.as_f64()));
    (header, payload)
}

fn nf_from_parts<T: Scalar>(header: &ModelHeader, payload: &[f64]) -> Result<NfModel<T>> {
    let missing = |f: &str| Error::Format(format!("NF1 header lacks {f}"));
    let d = header.d;
    let n_blocks = header.n_blocks.ok_or_else(|| missing("n_blocks"))?;
    let hidden = header.hidden.ok_or_else(|| missing("hidden"))?;
    let clamp = header.clamp.ok_or_else(|| missing("clamp"))?;
    let perms = header.permutations.clone().ok_or_else(|| missing("permutations"))?;
    if perms.len() != n_blocks {
        return Err(Error::Format("permutation count differs from n_blocks".into()));
    }
    let mut model = NfModel::<T>::identity(d, n_blocks, hidden, clamp)?;
    let expected = 2 * d + model.n_params();
    if payload.len() != expected {
        return Err(size_mismatch(expected, payload.len()));
    }
    model.input_shift = payload[..d].iter().map(|&v| T::of(v)).collect();
    model.input_scale = payload[d..2 * d].iter().map(|&v| T::of(v)).collect();
    for (p, &v) in model.params_mut().zip(&payload[2 * d..]) {
        *p = T::of(v);
    }
    for (block, perm) in model.blocks.iter_mut().zip(perms) {
        block.permutation = perm;
    }
    model.fit_config = serde_json::from_value::<Option<FlowConfig>>(header.hyperparameters.clone()).unwrap_or(None);
    model.validate()?;
    Ok(model)
}

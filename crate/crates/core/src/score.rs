//! Patch anomaly scores `s(x) = -ln p(f(x))` and patient-level aggregation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{Embedding, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::DensityModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationStrategy {
    Mean,
    Median,
    Q3,
    P95,
    P99,
    Max,
    Sum95,
    Sum99,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 8] = [
        AggregationStrategy::Mean,
        AggregationStrategy::Median,
        AggregationStrategy::Q3,
        AggregationStrategy::P95,
        AggregationStrategy::P99,
        AggregationStrategy::Max,
        AggregationStrategy::Sum95,
        AggregationStrategy::Sum99,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationStrategy::Mean => "mean",
            AggregationStrategy::Median => "median",
            AggregationStrategy::Q3 => "q3",
            AggregationStrategy::P95 => "p95",
            AggregationStrategy::P99 => "p99",
            AggregationStrategy::Max => "max",
            AggregationStrategy::Sum95 => "sum95",
            AggregationStrategy::Sum99 => "sum99",
        }
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregationStrategy::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown aggregation strategy {s:?}")))
    }
}

/// Percentile of already sorted values with linear interpolation between
/// closest ranks at fractional index `q · (B - 1)`.
pub fn percentile_sorted<T: Scalar>(sorted: &[T], q: f64) -> T {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::of(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Aggregates one patient's patch scores. Every strategy is invariant to
/// the order of `scores`.
pub fn aggregate<T: Scalar>(scores: &[T], strategy: AggregationStrategy) -> Result<T> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty score list"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("patch scores".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let tail_sum = |q: f64| {
        let cut = percentile_sorted(&sorted, q);
        sorted.iter().copied().filter(|&s| s >= cut).sum::<T>()
    };
    Ok(match strategy {
        // summing in sorted order makes the mean bitwise order-invariant
        AggregationStrategy::Mean => sorted.iter().copied().sum::<T>() / T::of_usize(sorted.len()),
        AggregationStrategy::Median => percentile_sorted(&sorted, 0.5),
        AggregationStrategy::Q3 => percentile_sorted(&sorted, 0.75),
        AggregationStrategy::P95 => percentile_sorted(&sorted, 0.95),
        AggregationStrategy::P99 => percentile_sorted(&sorted, 0.99),
        AggregationStrategy::Max => sorted[sorted.len() - 1],
        AggregationStrategy::Sum95 => tail_sum(0.95),
        AggregationStrategy::Sum99 => tail_sum(0.99),
    })
}

/// `-ln p(z)`.
pub fn anomaly_score<T: Scalar, M: DensityModel<T> + ?Sized>(model: &M, z: &[T]) -> Result<T> {
    Ok(-model.log_density(z)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord<T> {
    pub patient_id: String,
    /// 1 = diseased.
    pub label: u8,
    pub patch_scores: Vec<T>,
    pub aggregate: Option<T>,
}

impl<T: Scalar> PatientRecord<T> {
    /// Aggregate value, failing if the record has not been aggregated yet.
    pub fn aggregate_value(&self) -> Result<T> {
        self.aggregate
            .ok_or_else(|| Error::invalid(format!("patient {:?} has no aggregate", self.patient_id)))
    }
}

/// Scores every patch embedding of one patient and aggregates them.
pub fn score_patient<T: Scalar, M: DensityModel<T> + ?Sized>(
    model: &M,
    patient_id: &str,
    label: u8,
    embeddings: &[&Embedding],
    strategy: AggregationStrategy,
) -> Result<PatientRecord<T>> {
    if embeddings.is_empty() {
        return Err(Error::invalid(format!("patient {patient_id:?} has no embeddings")));
    }
    let patch_scores = embeddings
        .iter()
        .map(|e| anomaly_score(model, &e.to_scalars::<T>()))
        .collect::<Result<Vec<T>>>()?;
    let aggregate = aggregate(&patch_scores, strategy)?;
    Ok(PatientRecord {
        patient_id: patient_id.to_string(),
        label,
        patch_scores,
        aggregate: Some(aggregate),
    })
}

/// Scores every patient in `set`; `label_of` supplies the class of each
/// patient id. Patients appear in order of first occurrence.
pub fn score_cohort<T: Scalar, M: DensityModel<T> + Sync + ?Sized>(
    model: &M,
    set: &EmbeddingSet,
    label_of: impl Fn(&str) -> Option<u8> + Sync,
    strategy: AggregationStrategy,
) -> Result<Vec<PatientRecord<T>>> {
    if set.d != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: set.d,
        });
    }
    set.by_patient()
        .par_iter()
        .map(|(id, rows)| {
            let label = label_of(id).ok_or_else(|| Error::invalid(format!("no label for patient {id:?}")))?;
            score_patient(model, id, label, rows, strategy)
        })
        .collect()
}

/// One line of the scored-cohort CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub patient_id: String,
    pub label: u8,
    pub strategy: AggregationStrategy,
    pub aggregate: f64,
    #[serde(rename = "B")]
    pub b: usize,
}

impl ScoreRow {
    pub fn from_record<T: Scalar>(rec: &PatientRecord<T>, strategy: AggregationStrategy) -> Result<Self> {
        Ok(ScoreRow {
            patient_id: rec.patient_id.clone(),
            label: rec.label,
            strategy,
            aggregate: rec.aggregate_value()?.as_f64(),
            b: rec.patch_scores.len(),
        })
    }

    /// Record carrying only the aggregate (patch scores are not stored in CSV).
    pub fn to_record<T: Scalar>(&self) -> PatientRecord<T> {
        PatientRecord {
            patient_id: self.patient_id.clone(),
            label: self.label,
            patch_scores: Vec::new(),
            aggregate: Some(T::of(self.aggregate)),
        }
    }
}

pub fn write_scores_csv(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
    if let Some(row) = rows.iter().find(|r| r.label > 1) {
        return Err(Error::Format(format!("label must be 0 or 1, found {}", row.label)));
    }
    Ok(rows)
}

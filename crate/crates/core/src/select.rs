//! Validation-based choice among fitted density models.

use crate::encode::EmbeddingSet;
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::model::{DensityModel, GenerativeModel};
use crate::scalar::Scalar;
use crate::score::{score_cohort, AggregationStrategy};

/// Validation outcome of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub label: String,
    pub n_params: usize,
    pub auroc: f64,
}

/// Index of the best candidate: highest AUROC, then fewer parameters, then
/// earliest position.
pub fn select_best(scores: &[CandidateScore]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("no candidates to select from"));
    }
    let mut best = 0;
    for (i, c) in scores.iter().enumerate().skip(1) {
        let b = &scores[best];
        if c.auroc > b.auroc || (c.auroc == b.auroc && c.n_params < b.n_params) {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<CandidateScore>,
}

/// Scores every candidate on the validation patients with `strategy` and
/// returns the one with the best patient-level AUROC.
pub fn select_model<T: Scalar>(
    candidates: &[(GenerativeModel<T>, String)],
    val: &EmbeddingSet,
    label_of: impl Fn(&str) -> Option<u8> + Sync,
    strategy: AggregationStrategy,
) -> Result<Selection> {
    let scores = candidates
        .iter()
        .map(|(model, label)| {
            let records = score_cohort(model, val, &label_of, strategy)?;
            Ok(CandidateScore {
                label: label.clone(),
                n_params: model.n_params(),
                auroc: auroc(&records)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = select_best(&scores)?;
    Ok(Selection { index, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::{Embedding, Provenance};
    use crate::gmm::GmmModel;

    fn cand(label: &str, n_params: usize, auroc: f64) -> CandidateScore {
        CandidateScore {
            label: label.into(),
            n_params,
            auroc,
        }
    }

    #[test]
    fn tie_goes_to_fewer_parameters_then_order() {
        assert_eq!(select_best(&[cand("a", 10, 0.8), cand("b", 5, 0.8)]).unwrap(), 1);
        assert_eq!(select_best(&[cand("a", 5, 0.8), cand("b", 5, 0.8)]).unwrap(), 0);
        assert!(select_best(&[]).is_err());
    }

    fn val_set() -> EmbeddingSet {
        let mut set = EmbeddingSet::new(1, Provenance::External);
        for (i, v) in [0.1f32, -0.2, 3.0, 4.0].into_iter().enumerate() {
            set.rows.push(Embedding {
                values: vec![v],
                patient_id: format!("p{i}"),
                patch_index: 0,
                normal_flag: false,
            });
        }
        set
    }

    fn label_of(id: &str) -> Option<u8> {
        Some(u8::from(id == "p2" || id == "p3"))
    }

    #[test]
    fn single_candidate_is_returned() {
        let m = GmmModel::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let sel = select_model(
            &[(GenerativeModel::Gmm(m), "g".into())],
            &val_set(),
            label_of,
            AggregationStrategy::Mean,
        )
        .unwrap();
        assert_eq!(sel.index, 0);
        assert_eq!(sel.scores[0].auroc, 1.0);
    }

    #[test]
    fn better_separating_model_wins() {
        // centred on the diseased patients, so they look normal: AUROC 0
        let wrong = GmmModel::new(vec![1.0], vec![vec![3.5]], vec![vec![1.0]]).unwrap();
        let right = GmmModel::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let sel = select_model(
            &[
                (GenerativeModel::Gmm(wrong), "wrong".into()),
                (GenerativeModel::Gmm(right), "right".into()),
            ],
            &val_set(),
            label_of,
            AggregationStrategy::Mean,
        )
        .unwrap();
        assert_eq!(sel.index, 1);
        assert_eq!(sel.scores[0].auroc, 0.0);
    }

    #[test]
    fn single_class_validation_is_rejected() {
        let m = GmmModel::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        assert!(select_model(
            &[(GenerativeModel::Gmm(m), "g".into())],
            &val_set(),
            |_| Some(0),
            AggregationStrategy::Mean
        )
        .is_err());
    }
}

//! Train-split mean imputation of unobserved clinical entries.

use super::Cohort;
use crate::error::{Error, Result};
use crate::Real;

/// Fill every unobserved clinical entry with the per-feature mean computed
/// over **observed** entries of the training-split patients only; the same
/// fill values are applied to every patient, so nothing outside the training
/// split influences them. Returns the completed cohort and the fill means.
pub fn impute_missing(cohort: &Cohort, train_indices: &[usize]) -> Result<(Cohort, Vec<Real>)> {
    if train_indices.is_empty() {
        return Err(Error::contract("impute_missing with empty training split"));
    }
    let d_c = cohort.patients[0].clinical.dim();
    let mut sums = vec![0.0f64; d_c];
    let mut counts = vec![0usize; d_c];
    for &i in train_indices {
        let c = &cohort.patients[i].clinical;
        for j in 0..d_c {
            if c.observed[j] {
                sums[j] += c.values[j];
                counts[j] += 1;
            }
        }
    }
    let mut means = vec![0.0f64; d_c];
    for j in 0..d_c {
        if counts[j] == 0 {
            return Err(Error::config(format!(
                "clinical feature {j} has no observed value in the training split"
            )));
        }
        means[j] = sums[j] / counts[j] as f64;
    }
    let mut out = cohort.clone();
    for p in &mut out.patients {
        for j in 0..d_c {
            if !p.clinical.observed[j] {
                p.clinical.values[j] = means[j];
                p.clinical.observed[j] = true;
            }
        }
    }
    Ok((out, means))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{ClinicalVector, CohortSpec, PatientRecord};
    use crate::Tensor64;

    fn patient(values: Vec<f64>, observed: Vec<bool>, outcome: usize) -> PatientRecord {
        PatientRecord {
            id: format!("p{outcome}"),
            features: Some(Tensor64::matrix(1, 2, vec![0.0, 0.0]).unwrap()),
            tiles: None,
            gen_types: vec![0],
            pred_types: None,
            clinical: ClinicalVector { values, observed },
            outcome,
        }
    }

    fn tiny_cohort() -> Cohort {
        Cohort {
            spec: CohortSpec::no_signal(4, 0),
            patients: vec![
                patient(vec![1.0, 5.0], vec![true, true], 0),
                patient(vec![3.0, 0.0], vec![true, false], 1),
                patient(vec![0.0, 7.0], vec![false, true], 2),
                patient(vec![9.0, 9.0], vec![true, true], 0),
            ],
        }
    }

    #[test]
    fn fills_with_train_means() {
        let cohort = tiny_cohort();
        // train = patients 0,1 -> feature 0 mean = 2.0, feature 1 mean = 5.0
        let (out, means) = impute_missing(&cohort, &[0, 1]).unwrap();
        assert_eq!(means, vec![2.0, 5.0]);
        assert_eq!(out.patients[1].clinical.values[1], 5.0);
        assert_eq!(out.patients[2].clinical.values[0], 2.0);
        // observed entries untouched
        assert_eq!(out.patients[3].clinical.values, vec![9.0, 9.0]);
    }

    #[test]
    fn complete_cohort_is_unchanged() {
        let mut cohort = tiny_cohort();
        for p in &mut cohort.patients {
            p.clinical.observed = vec![true, true];
        }
        let (out, _) = impute_missing(&cohort, &[0, 1, 2, 3]).unwrap();
        assert_eq!(out, cohort);
    }

    #[test]
    fn validation_values_never_contribute() {
        let cohort = tiny_cohort();
        let (_, means_before) = impute_missing(&cohort, &[0, 1]).unwrap();
        let mut mutated = cohort.clone();
        mutated.patients[2].clinical.values = vec![1e9, -1e9];
        mutated.patients[3].clinical.values = vec![-7.0, 123.0];
        let (_, means_after) = impute_missing(&mutated, &[0, 1]).unwrap();
        assert_eq!(means_before, means_after);
    }

    #[test]
    fn fully_missing_feature_is_config_error() {
        let mut cohort = tiny_cohort();
        cohort.patients[0].clinical.observed[0] = false;
        cohort.patients[1].clinical.observed[0] = false;
        assert!(impute_missing(&cohort, &[0, 1]).is_err());
    }
}

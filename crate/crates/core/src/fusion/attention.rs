//! Attention-by-morphology analysis: where does the MIL pooling look, per
//! outcome class?

use super::{FusionModel, PreparedPatient};
use crate::cohort::{MORPH_NAMES, N_MORPH_TYPES, N_OUTCOMES, OUTCOME_NAMES};
use crate::error::{Error, Result};
use crate::params::{Bound, ParameterSet};
use crate::autodiff::Tape;
use crate::{Real, Tensor64};
use std::path::Path;

/// Mean MIL attention mass per (outcome class, morphology type). Every row
/// averages per-patient distributions, so it sums to 1 (over the types a
/// class actually exhibits).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTable {
    pub mean_attention: [[Real; N_MORPH_TYPES]; N_OUTCOMES],
    pub patients_per_class: [usize; N_OUTCOMES],
}

/// For each patient, distribute the MIL attention over its patches into the
/// patches' morphology types (per-patient mass sums to 1), then average
/// within each outcome class.
pub fn export_attention_by_type(
    model: &dyn FusionModel,
    params: &ParameterSet<Real>,
    patients: &[(PreparedPatient, usize)],
) -> Result<AttentionTable> {
    let mut sums = [[0.0; N_MORPH_TYPES]; N_OUTCOMES];
    let mut counts = [0usize; N_OUTCOMES];
    for (patient, outcome) in patients {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, params);
        let bag = tape.constant(patient.bag.clone());
        let clin = tape.constant(Tensor64::vector(patient.clinical.clone()));
        let repr = model.forward_repr(&mut tape, &bound, bag, clin)?;
        let attn_id = repr.mil_attention.ok_or_else(|| {
            Error::contract(format!("model {} has no MIL attention to export", model.name()))
        })?;
        let attn = &tape.value(attn_id).data;
        if patient.types.len() != attn.len() {
            return Err(Error::contract("types and attention lengths disagree"));
        }
        let total: Real = attn.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("attention mass {total} is not normalized")));
        }
        let mut per_type = [0.0; N_MORPH_TYPES];
        for (&a, &t) in attn.iter().zip(&patient.types) {
            per_type[t] += a;
        }
        for t in 0..N_MORPH_TYPES {
            sums[*outcome][t] += per_type[t];
        }
        counts[*outcome] += 1;
    }
    let mut mean_attention = [[0.0; N_MORPH_TYPES]; N_OUTCOMES];
    for c in 0..N_OUTCOMES {
        if counts[c] > 0 {
            for t in 0..N_MORPH_TYPES {
                mean_attention[c][t] = sums[c][t] / counts[c] as Real;
            }
        }
    }
    Ok(AttentionTable { mean_attention, patients_per_class: counts })
}

/// `outcome_class,morph_type,mean_attention` rows.
pub fn write_attention_csv(path: &Path, table: &AttentionTable) -> Result<()> {
    let mut out = String::from("outcome_class,morph_type,mean_attention\n");
    use std::fmt::Write as _;
    for c in 0..N_OUTCOMES {
        for t in 0..N_MORPH_TYPES {
            writeln!(out, "{},{},{}", OUTCOME_NAMES[c], MORPH_NAMES[t], table.mean_attention[c][t]).unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{Abmil, FusionConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patient(n: usize, types: Vec<usize>, seed: u64) -> PreparedPatient {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PreparedPatient {
            bag: Tensor64::randn(&[n, 6], 1.0, &mut rng),
            clinical: vec![],
            label: 0,
            types,
        }
    }

    #[test]
    fn single_type_bag_gets_all_mass() {
        let model = Abmil::new(FusionConfig::desk(), 6);
        let params = model.init_params(1).unwrap();
        let p = patient(4, vec![2, 2, 2, 2], 2);
        let table = export_attention_by_type(&model, &params, &[(p, 1)]).unwrap();
        assert!((table.mean_attention[1][2] - 1.0).abs() < 1e-9);
        assert_eq!(table.patients_per_class, [0, 1, 0]);
    }

    #[test]
    fn identical_rows_give_uniform_split_across_balanced_types() {
        let model = Abmil::new(FusionConfig::desk(), 6);
        let params = model.init_params(3).unwrap();
        // all-equal patches force uniform attention; balanced types then
        // split the mass evenly
        let row: Vec<Real> = vec![0.3; 6];
        let p = PreparedPatient {
            bag: Tensor64::from_rows(&vec![row; 4]).unwrap(),
            clinical: vec![],
            label: 0,
            types: vec![0, 1, 3, 4],
        };
        let table = export_attention_by_type(&model, &params, &[(p, 0)]).unwrap();
        for t in [0, 1, 3, 4] {
            assert!((table.mean_attention[0][t] - 0.25).abs() < 1e-9);
        }
        assert!(table.mean_attention[0][2].abs() < 1e-12);
    }
}

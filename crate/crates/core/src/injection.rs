//! Multi-granularity morphology type injection: per-patch one-hot
//! concatenation onto image features, and the patient-level type
//! distribution concatenated onto clinical features. Both are exact
//! concatenations, so either part is recoverable losslessly.

use crate::cohort::N_MORPH_TYPES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{Real, Tensor64};

/// Simplex over the five morphology types.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeDistribution {
    pub d: [Real; N_MORPH_TYPES],
}

impl TypeDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.d.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("type distribution has a negative entry"));
        }
        let s: Real = self.d.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("type distribution sums to {s}, not 1")));
        }
        Ok(())
    }
}

/// Append `one_hot(type_i)` to each feature row: `[N, d_f] -> [N, d_f + K]`.
pub fn inject_patch_types(features: &Tensor64, types: &[usize]) -> Result<Tensor64> {
    let n = features.rows();
    if features.rank() != 2 {
        return Err(Error::contract(format!("patch features must be a matrix, got {:?}", features.shape)));
    }
    if types.len() != n {
        return Err(Error::contract(format!(
            "{} type labels for {} feature rows",
            types.len(),
            n
        )));
    }
    if let Some(&bad) = types.iter().find(|&&t| t >= N_MORPH_TYPES) {
        return Err(Error::contract(format!("type label {bad} out of range 0..{N_MORPH_TYPES}")));
    }
    let d_f = features.cols();
    let mut rows = Vec::with_capacity(n);
    for (i, &t) in types.iter().enumerate() {
        let mut row = Vec::with_capacity(d_f + N_MORPH_TYPES);
        row.extend_from_slice(features.row(i));
        let mut one_hot = [0.0; N_MORPH_TYPES];
        one_hot[t] = 1.0;
        row.extend_from_slice(&one_hot);
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

/// Empirical type distribution `d_k = count(k) / N`.
pub fn patient_type_distribution(types: &[usize]) -> Result<TypeDistribution> {
    if types.is_empty() {
        return Err(Error::contract("type distribution of an empty bag"));
    }
    if let Some(&bad) = types.iter().find(|&&t| t >= N_MORPH_TYPES) {
        return Err(Error::contract(format!("type label {bad} out of range 0..{N_MORPH_TYPES}")));
    }
    let mut d = [0.0; N_MORPH_TYPES];
    for &t in types {
        d[t] += 1.0;
    }
    for v in &mut d {
        *v /= types.len() as Real;
    }
    Ok(TypeDistribution { d })
}

/// Append the type distribution to the clinical vector:
/// `[d_c] -> [d_c + K]`.
pub fn inject_patient_types(clinical: &[Real], dist: &TypeDistribution) -> Result<Vec<Real>> {
    dist.validate()?;
    let mut out = Vec::with_capacity(clinical.len() + N_MORPH_TYPES);
    out.extend_from_slice(clinical);
    out.extend_from_slice(&dist.d);
    Ok(out)
}

//! Outcome labeling rule on proteinuria/creatinine trajectories.

use super::{CR, NR, PR};
use crate::error::{Error, Result};

/// Numeric cutoffs for the labeling rule (synthetic units).
#[derive(Debug, Clone, PartialEq)]
pub struct KdigoThresholds {
    /// Proteinuria below this counts as normalized.
    pub norm_threshold: f64,
    /// Relative creatinine change within this band counts as stable.
    pub stable_band: f64,
}

impl Default for KdigoThresholds {
    fn default() -> Self {
        KdigoThresholds { norm_threshold: 0.5, stable_band: 0.25 }
    }
}

/// Three-branch response rule:
/// complete remission iff proteinuria normalized and creatinine stable;
/// else partial response iff proteinuria fell by at least half;
/// else no response.
pub fn kdigo_label(
    proteinuria_0m: f64,
    proteinuria_12m: f64,
    creatinine_0m: f64,
    creatinine_12m: f64,
    thresholds: &KdigoThresholds,
) -> Result<usize> {
    for (name, v) in [
        ("proteinuria_0m", proteinuria_0m),
        ("proteinuria_12m", proteinuria_12m),
        ("creatinine_0m", creatinine_0m),
        ("creatinine_12m", creatinine_12m),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::contract(format!("{name} must be a positive finite measurement, got {v}")));
        }
    }
    let normalized = proteinuria_12m < thresholds.norm_threshold;
    let stable = (creatinine_12m / creatinine_0m - 1.0).abs() <= thresholds.stable_band;
    if normalized && stable {
        return Ok(CR);
    }
    if proteinuria_12m <= 0.5 * proteinuria_0m {
        return Ok(PR);
    }
    Ok(NR)
}

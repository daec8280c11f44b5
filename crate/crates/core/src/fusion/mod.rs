//! Patient-level fusion models: the condition-token transformer plus the
//! comparison architectures (clinical MLP, gated-attention MIL, late fusion,
//! cross-attention), all behind one trait so the harness trains and scores
//! them identically.

mod attention;
mod baselines;
mod cit;

pub use attention::{export_attention_by_type, write_attention_csv, AttentionTable};
pub use baselines::{Abmil, ClinicalMlp, CrossAttention, LateFusion};
pub use cit::{gated_mil_pool, project_clinical, project_patches, Cit, CitPrediction};

use crate::autodiff::{Tape, TensorId};
use crate::cohort::{PatientRecord, N_MORPH_TYPES};
use crate::error::{Error, Result};
use crate::injection::{inject_patch_types, inject_patient_types, patient_type_distribution};
use crate::params::{Bound, ParameterSet};
use crate::training::N_CLASSES;
use crate::{Real, Tensor64};

/// Fusion hyperparameters. `paper()` is the published geometry; `desk()` is
/// the small configuration benchmarks run at.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    /// Gating width of the MIL attention (V and U project into this).
    pub mil_dim: usize,
}

impl FusionConfig {
    pub fn paper() -> Self {
        FusionConfig { d_h: 256, layers: 2, heads: 4, mlp_width: 256, mil_dim: 256 }
    }

    pub fn desk() -> Self {
        FusionConfig { d_h: 16, layers: 2, heads: 2, mlp_width: 16, mil_dim: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden dim {} not divisible by {} heads",
                self.d_h, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("at least one fusion layer required"));
        }
        Ok(())
    }
}

/// How raw patient records are turned into model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    /// Number of leading clinical dims fed to the model (25 = baseline only,
    /// 59 = with follow-up deltas).
    pub clinical_dims: usize,
    /// Multi-granularity type injection on/off (the ablation flag).
    pub inject_types: bool,
    /// Prefer classifier-predicted types over generation labels when present.
    pub prefer_predicted_types: bool,
}

impl InputSpec {
    pub fn new(clinical_dims: usize) -> Self {
        InputSpec { clinical_dims, inject_types: true, prefer_predicted_types: true }
    }

    pub fn without_injection(mut self) -> Self {
        self.inject_types = false;
        self
    }

    /// Width of one patch row under this spec.
    pub fn patch_width(&self, d_f: usize) -> usize {
        d_f + if self.inject_types { N_MORPH_TYPES } else { 0 }
    }

    /// Width of the clinical vector under this spec.
    pub fn clinical_width(&self) -> usize {
        self.clinical_dims + if self.inject_types { N_MORPH_TYPES } else { 0 }
    }
}

/// A patient record reduced to model-ready tensors.
#[derive(Debug, Clone)]
pub struct PreparedPatient {
    pub bag: Tensor64,
    pub clinical: Vec<Real>,
    pub label: usize,
    /// Types aligned with bag rows, for attention-by-type analysis.
    pub types: Vec<usize>,
}

/// Apply clinical-mode truncation and (optionally) both injection
/// granularities. Requires extracted features and imputed clinical values.
pub fn prepare_patient(patient: &PatientRecord, spec: &InputSpec) -> Result<PreparedPatient> {
    let features = patient
        .features
        .as_ref()
        .ok_or_else(|| Error::contract(format!("patient {} has no features; run feature extraction first", patient.id)))?;
    if patient.clinical.observed.iter().any(|&o| !o) {
        return Err(Error::contract(format!(
            "patient {} has unimputed clinical entries",
            patient.id
        )));
    }
    if spec.clinical_dims > patient.clinical.dim() {
        return Err(Error::contract(format!(
            "clinical mode wants {} dims, record has {}",
            spec.clinical_dims,
            patient.clinical.dim()
        )));
    }
    let types = patient.injected_types(spec.prefer_predicted_types).to_vec();
    let clinical_base = &patient.clinical.values[..spec.clinical_dims];
    let (bag, clinical) = if spec.inject_types {
        let dist = patient_type_distribution(&types)?;
        (
            inject_patch_types(features, &types)?,
            inject_patient_types(clinical_base, &dist)?,
        )
    } else {
        (features.clone(), clinical_base.to_vec())
    };
    Ok(PreparedPatient { bag, clinical, label: patient.outcome, types })
}

/// Representation produced by a model before its classification head.
pub struct ReprOut {
    /// Patient representation; mixup interpolates here.
    pub h: TensorId,
    /// MIL attention over the bag, when the architecture has one.
    pub mil_attention: Option<TensorId>,
}

/// Common surface of every fusion model: build parameters, map
/// `(bag, clinical)` to a patient representation, classify it.
pub trait FusionModel: Send + Sync {
    fn name(&self) -> &'static str;

    fn init_params(&self, seed: u64) -> Result<ParameterSet<Real>>;

    fn forward_repr(
        &self,
        tape: &mut Tape<Real>,
        bound: &Bound<Real>,
        bag: TensorId,
        clinical: TensorId,
    ) -> Result<ReprOut>;

    fn head(&self, tape: &mut Tape<Real>, bound: &Bound<Real>, h: TensorId) -> Result<TensorId>;

    /// Convenience: logits for one prepared patient under given parameters.
    fn logits(&self, params: &ParameterSet<Real>, patient: &PreparedPatient) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, params);
        let bag = tape.constant(patient.bag.clone());
        let clin = tape.constant(Tensor64::vector(patient.clinical.clone()));
        let repr = self.forward_repr(&mut tape, &bound, bag, clin)?;
        let logits = self.head(&mut tape, &bound, repr.h)?;
        Ok(tape.value(logits).data.clone())
    }
}

/// Names understood by the benchmark harness and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Cit,
    ClinicalMlp,
    Abmil,
    LateFusion,
    CrossAttention,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Cit,
        ModelKind::ClinicalMlp,
        ModelKind::Abmil,
        ModelKind::LateFusion,
        ModelKind::CrossAttention,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cit" => Ok(ModelKind::Cit),
            "clinical_mlp" => Ok(ModelKind::ClinicalMlp),
            "abmil" => Ok(ModelKind::Abmil),
            "late_fusion" => Ok(ModelKind::LateFusion),
            "cross_attention" => Ok(ModelKind::CrossAttention),
            other => Err(Error::config(format!(
                "unknown model {other:?} (expected cit|clinical_mlp|abmil|late_fusion|cross_attention)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Cit => "cit",
            ModelKind::ClinicalMlp => "clinical_mlp",
            ModelKind::Abmil => "abmil",
            ModelKind::LateFusion => "late_fusion",
            ModelKind::CrossAttention => "cross_attention",
        }
    }
}

/// Instantiate a model for the given input widths.
pub fn build_model(
    kind: ModelKind,
    cfg: &FusionConfig,
    d_patch_in: usize,
    d_clin_in: usize,
) -> Result<Box<dyn FusionModel>> {
    cfg.validate()?;
    Ok(match kind {
        ModelKind::Cit => Box::new(Cit::new(cfg.clone(), d_patch_in, d_clin_in)),
        ModelKind::ClinicalMlp => Box::new(ClinicalMlp::new(cfg.clone(), d_clin_in)),
        ModelKind::Abmil => Box::new(Abmil::new(cfg.clone(), d_patch_in)),
        ModelKind::LateFusion => Box::new(LateFusion::new(cfg.clone(), d_patch_in, d_clin_in)),
        ModelKind::CrossAttention => Box::new(CrossAttention::new(cfg.clone(), d_patch_in, d_clin_in)),
    })
}

/// Exact trainable-scalar count of a model under the given widths.
pub fn parameter_count(model: &dyn FusionModel) -> Result<usize> {
    Ok(model.init_params(0)?.total_len())
}

pub const PAPER_REPORTED_FUSION_PARAMS: usize = 560_000;

/// Number of output classes every head produces.
pub const fn n_classes() -> usize {
    N_CLASSES
}

//! Synthetic patient cohorts: generation with plantable cross-modal signals,
//! outcome labeling rules, imputation, stratified folds and the on-disk
//! manifest + binary tensor format.

mod folds;
mod generate;
mod impute;
mod io;
mod kdigo;
mod tiles;

pub use folds::stratified_folds;
pub use generate::{generate_cohort, single_modality_bayes_accuracy, joint_bayes_accuracy};
pub use impute::impute_missing;
pub use io::{
    load_cohort, load_params, read_tensor, save_cohort, save_params, write_summary_csv,
    write_tensor, IntTensor,
};
pub use kdigo::{kdigo_label, KdigoThresholds};
pub use tiles::{generate_tile_set, render_tile};

use crate::error::{Error, Result};
use crate::Real;
use crate::Tensor64;

pub const N_OUTCOMES: usize = 3;
pub const N_MORPH_TYPES: usize = 5;

/// Outcome class codes.
pub const CR: usize = 0;
pub const PR: usize = 1;
pub const NR: usize = 2;

pub const OUTCOME_NAMES: [&str; N_OUTCOMES] = ["CR", "PR", "NR"];

/// Glomerulus morphology codes, fixed order.
pub const MORPH_NAMES: [&str; N_MORPH_TYPES] = [
    "mesangial_proliferative",
    "normal",
    "endocapillary_proliferative",
    "crescentic",
    "sclerotic",
];

/// Structured clinical covariates with an observation mask. Unobserved
/// entries hold a placeholder until [`impute_missing`] fills them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalVector {
    pub values: Vec<Real>,
    pub observed: Vec<bool>,
}

impl ClinicalVector {
    pub fn fully_observed(values: Vec<Real>) -> Self {
        let observed = vec![true; values.len()];
        ClinicalVector { values, observed }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A grayscale image patch around one glomerulus.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    /// `[H, W]`, values in `[0, 1]`.
    pub pixels: Tensor64,
    /// Generation-time morphology label, `0..5`.
    pub morph_type: usize,
}

/// One patient: an unordered bag of patches plus clinical covariates and the
/// outcome class.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// Precomputed patch features `[N, d_f]` (present in feature-mode cohorts
    /// or after feature extraction).
    pub features: Option<Tensor64>,
    /// Raw tiles (present in tile-mode cohorts).
    pub tiles: Option<Vec<Tile>>,
    /// Generation-time morphology labels, length `N`.
    pub gen_types: Vec<usize>,
    /// Classifier-predicted morphology labels, once the knowledge path ran.
    pub pred_types: Option<Vec<usize>>,
    pub clinical: ClinicalVector,
    /// Outcome class in `0..3`.
    pub outcome: usize,
}

impl PatientRecord {
    pub fn bag_size(&self) -> usize {
        self.gen_types.len()
    }

    /// Morphology labels used for type injection. Classifier predictions are
    /// preferred when available; generation labels are the controlled
    /// substitute (and the only option before the knowledge path ran).
    pub fn injected_types(&self, prefer_predicted: bool) -> &[usize] {
        match (&self.pred_types, prefer_predicted) {
            (Some(p), true) => p,
            _ => &self.gen_types,
        }
    }

    pub fn type_histogram(&self) -> [usize; N_MORPH_TYPES] {
        let mut h = [0usize; N_MORPH_TYPES];
        for &t in &self.gen_types {
            h[t] += 1;
        }
        h
    }
}

/// How patch content is materialized by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// Sample patch feature vectors directly (fast; used by benchmarks).
    Features,
    /// Render grayscale tiles (used by the encoder adaptation pipeline).
    Tiles,
}

/// Generator parameters. Every planted signal has its own switch so cohorts
/// can isolate what a given model family is able to exploit.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub class_prior: [f64; N_OUTCOMES],
    /// Draw exact largest-remainder class counts instead of iid sampling.
    pub exact_counts: bool,
    /// Mean bag size (Poisson).
    pub bag_mean: f64,
    pub d_f: usize,
    pub d_c: usize,
    /// Outcome-dependent mean shift in patch features.
    pub image_signal: bool,
    /// Outcome-dependent mean shift in clinical features (CR vs rest).
    pub clinical_signal: bool,
    /// Conjunctive image+clinical latent pair; neither modality alone is
    /// informative about it.
    pub interaction_signal: bool,
    /// Outcome-dependent morphology composition.
    pub composition_signal: bool,
    /// Observation noise scale for features and clinical values.
    pub noise: f64,
    /// Probability that a clinical entry is unobserved.
    pub missing_rate: f64,
    pub representation: Representation,
    /// Tile side length (tile mode).
    pub tile_size: usize,
    pub seed: u64,
}

impl CohortSpec {
    /// Benchmark cohort: clinical signal separates CR from the rest, the
    /// PR/NR distinction lives only in the cross-modal latent pair.
    pub fn interaction_benchmark(seed: u64) -> Self {
        CohortSpec {
            n_patients: 400,
            class_prior: [49.0 / 71.0, 10.0 / 71.0, 12.0 / 71.0],
            exact_counts: false,
            bag_mean: 31.5,
            d_f: 12,
            d_c: 59,
            image_signal: false,
            clinical_signal: true,
            interaction_signal: true,
            composition_signal: false,
            noise: 1.0,
            missing_rate: 0.08,
            representation: Representation::Features,
            tile_size: 32,
            seed,
        }
    }

    /// Composition cohort: outcome shifts the morphology mixture; patch
    /// features reflect the type only noisily, so injected type labels carry
    /// real information.
    pub fn composition_benchmark(seed: u64) -> Self {
        CohortSpec {
            n_patients: 200,
            composition_signal: true,
            clinical_signal: false,
            interaction_signal: false,
            ..CohortSpec::interaction_benchmark(seed)
        }
    }

    /// Cohort-sized replica of the clinical dataset shape: 71 patients with
    /// exact 49/10/12 class counts.
    pub fn replica(seed: u64) -> Self {
        CohortSpec {
            n_patients: 71,
            exact_counts: true,
            ..CohortSpec::interaction_benchmark(seed)
        }
    }

    /// Image-only signal (for the image-branch baselines).
    pub fn image_only(n_patients: usize, seed: u64) -> Self {
        CohortSpec {
            n_patients,
            image_signal: true,
            clinical_signal: false,
            interaction_signal: false,
            ..CohortSpec::interaction_benchmark(seed)
        }
    }

    /// No planted signal at all; any model should sit at the majority rate.
    pub fn no_signal(n_patients: usize, seed: u64) -> Self {
        CohortSpec {
            n_patients,
            image_signal: false,
            clinical_signal: false,
            interaction_signal: false,
            composition_signal: false,
            ..CohortSpec::interaction_benchmark(seed)
        }
    }

    /// Tile-mode variant for the encoder pipeline.
    pub fn with_tiles(mut self) -> Self {
        self.representation = Representation::Tiles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.class_prior.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.class_prior.iter().any(|&p| p < 0.0) {
            return Err(Error::config(format!("class prior must be a distribution, got {:?}", self.class_prior)));
        }
        if self.n_patients == 0 || self.bag_mean <= 0.0 {
            return Err(Error::config("n_patients and bag_mean must be positive"));
        }
        if self.d_f == 0 || self.d_c == 0 {
            return Err(Error::config("d_f and d_c must be positive"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::config("missing_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Patients plus the spec that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.patients.iter().map(|p| p.outcome).collect()
    }

    pub fn class_counts(&self) -> [usize; N_OUTCOMES] {
        let mut c = [0usize; N_OUTCOMES];
        for p in &self.patients {
            c[p.outcome] += 1;
        }
        c
    }

    pub fn mean_bag_size(&self) -> f64 {
        self.patients.iter().map(|p| p.bag_size()).sum::<usize>() as f64 / self.len() as f64
    }

    pub fn has_features(&self) -> bool {
        self.patients.iter().all(|p| p.features.is_some())
    }
}

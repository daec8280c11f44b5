//! Cross-validation harness and multi-model benchmark orchestration.
//!
//! Protocol per (seed, fold): stratify folds on the cohort labels, impute
//! and weight from the training split only, carve a stratified inner
//! validation split for early stopping, train from scratch, score the
//! held-out fold. Models in one benchmark share fold assignments, so their
//! per-fold metrics are legitimately paired.

use super::metrics::{compute_metrics, Metrics};
use super::wilcoxon::{wilcoxon_exact, WilcoxonResult};
use crate::cohort::{impute_missing, stratified_folds, Cohort};
use crate::error::{Error, Result};
use crate::fusion::{
    build_model, export_attention_by_type, AttentionTable, FusionConfig, InputSpec, ModelKind,
    PreparedPatient,
};
use crate::fusion::prepare_patient;
use crate::params::ParameterSet;
use crate::training::{class_weights, fit, EpochRecord, TrainOpts, N_CLASSES};
use crate::Real;
use rayon::prelude::*;

/// Everything a cross-validated run needs besides the cohort.
#[derive(Debug, Clone)]
pub struct CvSettings {
    pub fusion: FusionConfig,
    pub input: InputSpec,
    pub train: TrainOpts,
    pub k_folds: usize,
    pub seeds: Vec<u64>,
    /// The training split is re-stratified into this many inner folds; inner
    /// fold 0 becomes the early-stopping validation set.
    pub inner_val_folds: usize,
}

impl CvSettings {
    /// Desk-scale benchmark protocol: 5 folds, 3 seeds, small fusion dims,
    /// shortened schedule.
    pub fn benchmark(clinical_dims: usize) -> Self {
        CvSettings {
            fusion: FusionConfig::desk(),
            input: InputSpec::new(clinical_dims),
            train: TrainOpts {
                max_epochs: 40,
                patience: 10,
                batch_size: 32,
                ..TrainOpts::default()
            },
            k_folds: 5,
            seeds: vec![11, 22, 33],
            inner_val_folds: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 || self.seeds.is_empty() || self.inner_val_folds < 2 {
            return Err(Error::config("k_folds >= 2, inner_val_folds >= 2 and at least one seed required"));
        }
        self.fusion.validate()
    }
}

/// Per-(model, seed, fold) outcome.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub model: String,
    pub seed: u64,
    pub fold: usize,
    pub patient_ids: Vec<String>,
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
    pub probs: Vec<[f64; N_CLASSES]>,
    pub metrics: Metrics,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// splitmix64-style stream derivation so parallel runs never share rng state.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z ^= p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = z.wrapping_add(0x94D0_49BB_1331_11EB).rotate_left(23);
        z = (z ^ (z >> 31)).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    }
    z ^ (z >> 32)
}

fn kind_tag(kind: ModelKind) -> u64 {
    kind.name().bytes().fold(0u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64))
}

/// Stable max-subtracted softmax over a logit vector.
pub fn softmax_probs(logits: &[Real]) -> [f64; N_CLASSES] {
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let mut out = [0.0; N_CLASSES];
    let mut denom = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        denom += *o;
    }
    for o in &mut out {
        *o /= denom;
    }
    out
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

pub(crate) struct RunOutput {
    pub fold_result: FoldResult,
    pub params: ParameterSet<Real>,
    pub test_prepared: Vec<(PreparedPatient, usize)>,
}

fn run_fold(
    cohort: &Cohort,
    kind: ModelKind,
    settings: &CvSettings,
    seed: u64,
    assignment: &[usize],
    fold: usize,
) -> Result<RunOutput> {
    let test_idx: Vec<usize> = (0..cohort.len()).filter(|&i| assignment[i] == fold).collect();
    let train_idx: Vec<usize> = (0..cohort.len()).filter(|&i| assignment[i] != fold).collect();
    if test_idx.is_empty() || train_idx.is_empty() {
        return Err(Error::contract(format!("fold {fold} produces an empty split")));
    }

    // training-split statistics only: imputation means and class weights
    let (imputed, _) = impute_missing(cohort, &train_idx)?;
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| imputed.patients[i].outcome).collect();
    let weights = class_weights(&train_labels)?;

    // stratified inner validation split for early stopping
    let inner = stratified_folds(&train_labels, settings.inner_val_folds, derive_seed(&[seed, fold as u64, 0xA11]))?;
    let mut fit_set = Vec::new();
    let mut val_set = Vec::new();
    for (pos, &i) in train_idx.iter().enumerate() {
        let prepared = prepare_patient(&imputed.patients[i], &settings.input)?;
        if inner[pos] == 0 {
            val_set.push(prepared);
        } else {
            fit_set.push(prepared);
        }
    }
    let test_prepared: Vec<(PreparedPatient, usize)> = test_idx
        .iter()
        .map(|&i| prepare_patient(&imputed.patients[i], &settings.input).map(|p| (p, imputed.patients[i].outcome)))
        .collect::<Result<_>>()?;

    let d_patch_in = fit_set[0].bag.cols();
    let d_clin_in = fit_set[0].clinical.len();
    let model = build_model(kind, &settings.fusion, d_patch_in, d_clin_in)?;

    let opts = TrainOpts {
        seed: derive_seed(&[seed, fold as u64, kind_tag(kind)]),
        ..settings.train.clone()
    };
    let fitted = fit(model.as_ref(), &fit_set, &val_set, &weights, &opts)?;

    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut probs = Vec::new();
    let mut ids = Vec::new();
    for (p, outcome) in &test_prepared {
        let logits = model.logits(&fitted.params, p)?;
        let pr = softmax_probs(&logits);
        truth.push(*outcome);
        pred.push(argmax_first(&pr));
        probs.push(pr);
    }
    for &i in &test_idx {
        ids.push(imputed.patients[i].id.clone());
    }
    let metrics = compute_metrics(&truth, &pred, &probs)?;

    Ok(RunOutput {
        fold_result: FoldResult {
            model: kind.name().to_string(),
            seed,
            fold,
            patient_ids: ids,
            truth,
            pred,
            probs,
            metrics,
            history: fitted.history,
            best_epoch: fitted.best_epoch,
        },
        params: fitted.params,
        test_prepared,
    })
}

fn assignments_per_seed(cohort: &Cohort, settings: &CvSettings) -> Result<Vec<Vec<usize>>> {
    let labels = cohort.labels();
    settings
        .seeds
        .iter()
        .map(|&s| stratified_folds(&labels, settings.k_folds, s))
        .collect()
}

fn run_all(
    cohort: &Cohort,
    kind: ModelKind,
    settings: &CvSettings,
    assignments: &[Vec<usize>],
) -> Result<Vec<RunOutput>> {
    let descs: Vec<(usize, usize)> = (0..settings.seeds.len())
        .flat_map(|s| (0..settings.k_folds).map(move |f| (s, f)))
        .collect();
    let mut outs: Vec<(usize, RunOutput)> = descs
        .par_iter()
        .map(|&(s, f)| {
            run_fold(cohort, kind, settings, settings.seeds[s], &assignments[s], f)
                .map(|o| (s * settings.k_folds + f, o))
        })
        .collect::<Result<_>>()?;
    outs.sort_by_key(|(i, _)| *i);
    Ok(outs.into_iter().map(|(_, o)| o).collect())
}

/// Cross-validate one model: `k_folds x seeds` runs, each trained from
/// scratch. Deterministic given the cohort and settings.
pub fn run_cv(cohort: &Cohort, kind: ModelKind, settings: &CvSettings) -> Result<Vec<FoldResult>> {
    settings.validate()?;
    if !cohort.has_features() {
        return Err(Error::contract("cohort has no patch features; extract features first"));
    }
    let assignments = assignments_per_seed(cohort, settings)?;
    Ok(run_all(cohort, kind, settings, &assignments)?
        .into_iter()
        .map(|o| o.fold_result)
        .collect())
}

/// Train one (seed, fold) run and return its parameters plus the fold
/// scores; backs the single-run CLI paths.
pub fn train_single_fold(
    cohort: &Cohort,
    kind: ModelKind,
    settings: &CvSettings,
    seed: u64,
    fold: usize,
) -> Result<(ParameterSet<Real>, FoldResult)> {
    settings.validate()?;
    if fold >= settings.k_folds {
        return Err(Error::config(format!("fold {fold} out of range 0..{}", settings.k_folds)));
    }
    let labels = cohort.labels();
    let assignment = stratified_folds(&labels, settings.k_folds, seed)?;
    let out = run_fold(cohort, kind, settings, seed, &assignment, fold)?;
    Ok((out.params, out.fold_result))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct ModelSummary {
    pub model: String,
    pub accuracy: MeanStd,
    pub weighted_f1: MeanStd,
    pub macro_f1: MeanStd,
    pub auc: MeanStd,
    pub parameter_count: usize,
}

#[derive(Debug, Clone)]
pub struct WilcoxonRow {
    pub reference: String,
    pub baseline: String,
    pub metric: &'static str,
    pub result: WilcoxonResult,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub fold_results: Vec<FoldResult>,
    pub summaries: Vec<ModelSummary>,
    /// One-sided tests of the first model in the list against each other
    /// model, on paired fold accuracies.
    pub wilcoxon: Vec<WilcoxonRow>,
    pub attention: Option<AttentionTable>,
    pub seeds: Vec<u64>,
    pub k_folds: usize,
}

/// `mean ± std` where the mean is over per-seed fold averages and the std is
/// the sample deviation across those per-seed means.
pub fn seed_level_mean_std(results: &[FoldResult], metric: impl Fn(&Metrics) -> f64) -> MeanStd {
    use std::collections::BTreeMap;
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in results {
        by_seed.entry(r.seed).or_default().push(metric(&r.metrics));
    }
    let seed_means: Vec<f64> = by_seed
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let mean = seed_means.iter().sum::<f64>() / seed_means.len() as f64;
    let std = if seed_means.len() > 1 {
        let var = seed_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (seed_means.len() - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

/// Summaries (per-seed mean/std of fold-averaged metrics) for one model's
/// fold results.
pub fn summarize_model(results: &[FoldResult], parameter_count: usize) -> ModelSummary {
    ModelSummary {
        model: results[0].model.clone(),
        accuracy: seed_level_mean_std(results, |m| m.accuracy),
        weighted_f1: seed_level_mean_std(results, |m| m.weighted_f1),
        macro_f1: seed_level_mean_std(results, |m| m.macro_f1),
        auc: seed_level_mean_std(results, |m| m.auc),
        parameter_count,
    }
}

/// Run every model on identical fold assignments, summarize, test the first
/// model against each other model with the exact Wilcoxon on paired fold
/// accuracies, and export the attention-by-type table of the first model
/// (test-fold patients only, aggregated over all its runs).
pub fn benchmark_suite(cohort: &Cohort, kinds: &[ModelKind], settings: &CvSettings) -> Result<BenchmarkReport> {
    settings.validate()?;
    if kinds.is_empty() {
        return Err(Error::config("benchmark needs at least one model"));
    }
    if !cohort.has_features() {
        return Err(Error::contract("cohort has no patch features; extract features first"));
    }
    let assignments = assignments_per_seed(cohort, settings)?;

    let mut all_results: Vec<FoldResult> = Vec::new();
    let mut summaries = Vec::new();
    let mut per_model_acc: Vec<Vec<f64>> = Vec::new();
    let mut attention: Option<AttentionTable> = None;

    for (mi, &kind) in kinds.iter().enumerate() {
        let outs = run_all(cohort, kind, settings, &assignments)?;
        // paired metric vectors ordered by (seed, fold)
        per_model_acc.push(outs.iter().map(|o| o.fold_result.metrics.accuracy).collect());
        let results: Vec<FoldResult> = outs.iter().map(|o| o.fold_result.clone()).collect();
        let param_count = outs[0].params.total_len();
        summaries.push(summarize_model(&results, param_count));

        if mi == 0 {
            // aggregate MIL attention over the reference model's test folds
            let mut merged: Option<AttentionTable> = None;
            for o in &outs {
                let model = build_model(
                    kind,
                    &settings.fusion,
                    o.test_prepared[0].0.bag.cols(),
                    o.test_prepared[0].0.clinical.len(),
                )?;
                match export_attention_by_type(model.as_ref(), &o.params, &o.test_prepared) {
                    Ok(t) => {
                        merged = Some(match merged {
                            None => t,
                            Some(acc) => merge_attention(acc, t),
                        });
                    }
                    Err(Error::Contract(_)) => break, // model without MIL attention
                    Err(e) => return Err(e),
                }
            }
            attention = merged;
        }
        all_results.extend(results);
    }

    let mut wilcoxon = Vec::new();
    for mi in 1..kinds.len() {
        let diffs: Vec<f64> = per_model_acc[0]
            .iter()
            .zip(&per_model_acc[mi])
            .map(|(a, b)| a - b)
            .collect();
        wilcoxon.push(WilcoxonRow {
            reference: kinds[0].name().to_string(),
            baseline: kinds[mi].name().to_string(),
            metric: "accuracy",
            result: wilcoxon_exact(&diffs)?,
        });
    }

    Ok(BenchmarkReport {
        fold_results: all_results,
        summaries,
        wilcoxon,
        attention,
        seeds: settings.seeds.clone(),
        k_folds: settings.k_folds,
    })
}

fn merge_attention(a: AttentionTable, b: AttentionTable) -> AttentionTable {
    let mut mean_attention = [[0.0; crate::cohort::N_MORPH_TYPES]; crate::cohort::N_OUTCOMES];
    let mut patients_per_class = [0usize; crate::cohort::N_OUTCOMES];
    for c in 0..crate::cohort::N_OUTCOMES {
        let (ca, cb) = (a.patients_per_class[c], b.patients_per_class[c]);
        patients_per_class[c] = ca + cb;
        if ca + cb > 0 {
            for t in 0..crate::cohort::N_MORPH_TYPES {
                mean_attention[c][t] =
                    (a.mean_attention[c][t] * ca as f64 + b.mean_attention[c][t] * cb as f64) / (ca + cb) as f64;
            }
        }
    }
    AttentionTable { mean_attention, patients_per_class }
}

//! Cohort sampling with plantable per-modality signals.
//!
//! The interaction signal is a conjunctive latent pair: an image latent `a`
//! (a clean direction in every patch feature) and a clinical latent `b`.
//! Marginally both are symmetric coin flips for every outcome class, so no
//! single modality learns anything from them; jointly their parity separates
//! the no-response class from the rest. The clinical profile block separates
//! complete remission from the rest. Achievable accuracy therefore ranks
//! joint models strictly above either single modality and above any additive
//! (late) fusion of the two.

use super::{
    render_tile, ClinicalVector, Cohort, CohortSpec, PatientRecord, Representation, CR, NR,
    N_MORPH_TYPES, N_OUTCOMES,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

/// Base morphology mixture when composition carries no outcome signal.
const BASE_MIX: [f64; N_MORPH_TYPES] = [0.25, 0.35, 0.20, 0.10, 0.10];

/// Outcome-conditioned mixtures: partial and no response shift mass toward
/// the pathological types (mesangial proliferative, crescentic, sclerotic).
const COMPOSITION_MIX: [[f64; N_MORPH_TYPES]; N_OUTCOMES] = [
    [0.20, 0.50, 0.15, 0.075, 0.075], // CR: mostly normal
    [0.32, 0.23, 0.15, 0.25, 0.05],   // PR: crescentic + mesangial heavy
    [0.27, 0.18, 0.10, 0.10, 0.35],   // NR: sclerotic heavy
];

/// Signal amplitudes, in units of the observation noise.
const PROFILE_AMP: f64 = 1.3;
const LATENT_CLINICAL_AMP: f64 = 1.6;
const LATENT_IMAGE_AMP: f64 = 1.5;
const IMAGE_CLASS_AMP: [f64; N_OUTCOMES] = [0.9, -0.3, -0.9];
const TYPE_ANCHOR_AMP: f64 = 1.0;
const PROFILE_DIMS: std::ops::Range<usize> = 0..3;
const LATENT_DIMS: std::ops::Range<usize> = 3..5;
const TILE_PIXEL_NOISE: f64 = 0.06;

/// Deterministic per-type anchor directions in feature space, independent of
/// the cohort seed so every cohort of a given width shares them.
fn type_anchors(d_f: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_A11C);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..N_MORPH_TYPES)
        .map(|_| (0..d_f).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Largest-remainder apportionment of `n` over `prior`.
fn exact_class_counts(prior: &[f64; N_OUTCOMES], n: usize) -> [usize; N_OUTCOMES] {
    let raw: Vec<f64> = prior.iter().map(|p| p * n as f64).collect();
    let mut counts = [0usize; N_OUTCOMES];
    for k in 0..N_OUTCOMES {
        counts[k] = raw[k].floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..N_OUTCOMES).collect();
    order.sort_by(|&i, &j| {
        (raw[j] - raw[j].floor())
            .partial_cmp(&(raw[i] - raw[i].floor()))
            .unwrap()
            .then(i.cmp(&j))
    });
    for i in 0..(n - assigned) {
        counts[order[i % N_OUTCOMES]] += 1;
    }
    counts
}

/// Generate a cohort. Pure function of the spec (including its seed):
/// identical specs produce bit-identical cohorts.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    if spec.interaction_signal && spec.representation == Representation::Tiles {
        return Err(Error::config(
            "interaction_signal requires the feature representation; tiles carry no latent channel",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|_| Error::config("noise must be positive"))?;
    let poisson = Poisson::new(spec.bag_mean).map_err(|_| Error::config("bag_mean must be positive"))?;
    let anchors = type_anchors(spec.d_f);

    let outcomes: Vec<usize> = if spec.exact_counts {
        let counts = exact_class_counts(&spec.class_prior, spec.n_patients);
        let mut ys: Vec<usize> = (0..N_OUTCOMES).flat_map(|k| std::iter::repeat(k).take(counts[k])).collect();
        ys.shuffle(&mut rng);
        ys
    } else {
        (0..spec.n_patients).map(|_| sample_categorical(&spec.class_prior, &mut rng)).collect()
    };

    let mut patients = Vec::with_capacity(spec.n_patients);
    for (idx, &y) in outcomes.iter().enumerate() {
        let bag = (poisson.sample(&mut rng) as usize).max(1);
        let mix = if spec.composition_signal { &COMPOSITION_MIX[y] } else { &BASE_MIX };
        let gen_types: Vec<usize> = (0..bag).map(|_| sample_categorical(mix, &mut rng)).collect();

        // conjunctive latents: parity of (a, b) marks NR, marginals are flat
        let a = rng.gen_bool(0.5);
        let b = if y == NR { !a } else { a };

        let mut clinical = vec![0.0f64; spec.d_c];
        for v in clinical.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        if spec.clinical_signal {
            let shift = if y == CR { PROFILE_AMP } else { -PROFILE_AMP } * spec.noise;
            for j in PROFILE_DIMS {
                clinical[j] += shift;
            }
            // follow-up delta block echoes the profile when present
            if spec.d_c >= 28 {
                for j in 25..28 {
                    clinical[j] += 0.6 * shift;
                }
            }
        }
        if spec.interaction_signal {
            let shift = (if b { 1.0 } else { -1.0 }) * LATENT_CLINICAL_AMP * spec.noise;
            for j in LATENT_DIMS {
                clinical[j] += shift;
            }
            if spec.d_c >= 30 {
                clinical[28] += 0.8 * shift;
                clinical[29] += 0.8 * shift;
            }
        }
        let observed: Vec<bool> = (0..spec.d_c).map(|_| !rng.gen_bool(spec.missing_rate)).collect();
        let mut values = clinical;
        for (v, &obs) in values.iter_mut().zip(&observed) {
            if !obs {
                *v = 0.0; // placeholder until imputation
            }
        }

        let (features, tiles) = match spec.representation {
            Representation::Features => {
                let mut rows = Vec::with_capacity(bag);
                for &t in &gen_types {
                    let mut x: Vec<f64> = (0..spec.d_f).map(|_| noise.sample(&mut rng)).collect();
                    for j in 0..spec.d_f {
                        x[j] += TYPE_ANCHOR_AMP * spec.noise * anchors[t][j];
                    }
                    if spec.image_signal {
                        let shift = IMAGE_CLASS_AMP[y] * spec.noise;
                        for j in 0..3.min(spec.d_f) {
                            x[j] += shift;
                        }
                    }
                    if spec.interaction_signal {
                        let shift = (if a { 1.0 } else { -1.0 }) * LATENT_IMAGE_AMP * spec.noise;
                        x[spec.d_f - 1] += shift;
                    }
                    rows.push(x);
                }
                (Some(Tensor::from_rows(&rows)?), None)
            }
            Representation::Tiles => {
                let tiles: Vec<_> = gen_types
                    .iter()
                    .map(|&t| render_tile(t, spec.tile_size, TILE_PIXEL_NOISE, &mut rng))
                    .collect::<Result<_>>()?;
                (None, Some(tiles))
            }
        };

        patients.push(PatientRecord {
            id: format!("P{idx:05}"),
            features,
            tiles,
            gen_types,
            pred_types: None,
            clinical: ClinicalVector { values, observed },
            outcome: y,
        });
    }

    Ok(Cohort { spec: spec.clone(), patients })
}

// ── Closed-form achievable accuracy of the interaction design ──────────────
//
// With the conjunctive construction the discrete latent state is
// (y, a, b = a XOR [y == NR]) with P(y, a) = prior(y) / 2. Posterior-argmax
// accuracy for an observer seeing a subset of (profile(y), a, b) follows by
// enumerating those six states; observation noise only degrades both sides,
// so the structural gap is what matters.

fn enumerate_accuracy(prior: &[f64; N_OUTCOMES], observe: impl Fn(usize, bool, bool) -> u32) -> f64 {
    use std::collections::BTreeMap;
    let mut by_obs: BTreeMap<u32, [f64; N_OUTCOMES]> = BTreeMap::new();
    for y in 0..N_OUTCOMES {
        for a in [false, true] {
            let b = if y == NR { !a } else { a };
            let p = prior[y] * 0.5;
            by_obs.entry(observe(y, a, b)).or_insert([0.0; N_OUTCOMES])[y] += p;
        }
    }
    by_obs
        .values()
        .map(|mass| mass.iter().cloned().fold(f64::MIN, f64::max))
        .sum()
}

/// Best achievable accuracy for each single modality on an
/// interaction-signal cohort: `(image_only, clinical_only)`.
pub fn single_modality_bayes_accuracy(spec: &CohortSpec) -> Result<(f64, f64)> {
    if !spec.interaction_signal || spec.composition_signal || spec.image_signal {
        return Err(Error::contract(
            "closed-form accuracy covers the pure interaction design only",
        ));
    }
    let prior = &spec.class_prior;
    // image sees a only
    let image = enumerate_accuracy(prior, |_, a, _| a as u32);
    // clinical sees the CR-vs-rest profile and b
    let clinical = enumerate_accuracy(prior, |y, _, b| ((y == CR) as u32) << 1 | b as u32);
    Ok((image, clinical))
}

/// Best achievable joint accuracy on the same design.
pub fn joint_bayes_accuracy(spec: &CohortSpec) -> Result<f64> {
    if !spec.interaction_signal || spec.composition_signal || spec.image_signal {
        return Err(Error::contract(
            "closed-form accuracy covers the pure interaction design only",
        ));
    }
    Ok(enumerate_accuracy(&spec.class_prior, |y, a, b| {
        ((y == CR) as u32) << 2 | (a as u32) << 1 | b as u32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replica_counts_are_exact() {
        let cohort = generate_cohort(&CohortSpec::replica(3)).unwrap();
        assert_eq!(cohort.class_counts(), [49, 10, 12]);
        assert_eq!(cohort.len(), 71);
    }

    #[test]
    fn generation_is_pure_in_spec_and_seed() {
        let spec = CohortSpec::interaction_benchmark(9);
        let a = generate_cohort(&spec).unwrap();
        let b = generate_cohort(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&CohortSpec::interaction_benchmark(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bag_sizes_center_on_target_mean() {
        let cohort = generate_cohort(&CohortSpec::interaction_benchmark(1)).unwrap();
        let mean = cohort.mean_bag_size();
        assert!((mean - 31.5).abs() < 1.0, "mean bag size {mean}");
        assert!(cohort.patients.iter().all(|p| p.bag_size() >= 1));
    }

    #[test]
    fn feature_shapes_match_bags() {
        let cohort = generate_cohort(&CohortSpec::interaction_benchmark(2)).unwrap();
        for p in &cohort.patients {
            let f = p.features.as_ref().unwrap();
            assert_eq!(f.shape, vec![p.bag_size(), cohort.spec.d_f]);
            assert_eq!(p.clinical.dim(), 59);
        }
    }

    #[test]
    fn composition_shifts_type_mixture() {
        let cohort = generate_cohort(&CohortSpec::composition_benchmark(4)).unwrap();
        let frac = |outcome: usize, t: usize| -> f64 {
            let (mut hits, mut total) = (0usize, 0usize);
            for p in cohort.patients.iter().filter(|p| p.outcome == outcome) {
                hits += p.gen_types.iter().filter(|&&x| x == t).count();
                total += p.bag_size();
            }
            hits as f64 / total as f64
        };
        // NR carries far more sclerotic mass than CR
        assert!(frac(NR, 4) > frac(CR, 4) + 0.15);
    }

    #[test]
    fn tiles_mode_renders_bags() {
        let mut spec = CohortSpec::no_signal(6, 5).with_tiles();
        spec.bag_mean = 4.0;
        let cohort = generate_cohort(&spec).unwrap();
        for p in &cohort.patients {
            assert!(p.features.is_none());
            let tiles = p.tiles.as_ref().unwrap();
            assert_eq!(tiles.len(), p.bag_size());
        }
        assert!(generate_cohort(&CohortSpec::interaction_benchmark(0).with_tiles()).is_err());
    }

    #[test]
    fn closed_form_single_modality_below_joint() {
        let spec = CohortSpec::interaction_benchmark(0);
        let (img, clin) = single_modality_bayes_accuracy(&spec).unwrap();
        let joint = joint_bayes_accuracy(&spec).unwrap();
        let majority = 49.0 / 71.0;
        assert!((img - majority).abs() < 1e-12, "image-only sits at majority, got {img}");
        assert!((clin - (49.0 + 12.0) / 71.0).abs() < 1e-12, "clinical resolves CR plus the larger of PR/NR");
        assert!((joint - 1.0).abs() < 1e-12);
        assert!(img < joint && clin < joint);
    }

    #[test]
    fn missingness_rate_is_respected() {
        let cohort = generate_cohort(&CohortSpec::interaction_benchmark(8)).unwrap();
        let (mut missing, mut total) = (0usize, 0usize);
        for p in &cohort.patients {
            missing += p.clinical.observed.iter().filter(|&&o| !o).count();
            total += p.clinical.dim();
        }
        let rate = missing as f64 / total as f64;
        assert!((rate - 0.08).abs() < 0.01, "empirical missing rate {rate}");
    }
}

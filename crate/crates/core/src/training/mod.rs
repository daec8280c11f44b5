//! Optimization recipe: weighted smoothed cross-entropy, manifold mixup at
//! the patient representation, AdamW with cosine annealing, early stopping.

mod adamw;
mod fit;


pub use adamw::AdamW;
pub use fit::{fit, EpochRecord, FitResult};


use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Beta, Distribution};

pub const N_CLASSES: usize = 3;

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub mixup_alpha: f64,
    pub smoothing_eps: f64,
    /// Minibatch size; 0 means full-batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            lr: 1e-3,
            weight_decay: 5e-4,
            max_epochs: 500,
            patience: 50,
            mixup_alpha: 0.4,
            smoothing_eps: 0.05,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl TrainOpts {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::contract("lr, max_epochs and patience must be positive"));
        }
        if self.mixup_alpha <= 0.0 {
            return Err(Error::contract("mixup_alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing_eps) {
            return Err(Error::contract("smoothing_eps must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-class loss weights, derived from training-split labels only.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: [f64; N_CLASSES],
}

/// Inverse-frequency weights `n_total / (K * n_k)`, mean 1 when balanced.
/// A class absent from the training split gets the mean of present weights.
pub fn class_weights(train_labels: &[usize]) -> Result<ClassWeights> {
    if train_labels.is_empty() {
        return Err(Error::contract("class_weights on empty label set"));
    }
    let mut counts = [0usize; N_CLASSES];
    for &y in train_labels {
        if y >= N_CLASSES {
            return Err(Error::contract(format!("label {y} out of range 0..{N_CLASSES}")));
        }
        counts[y] += 1;
    }
    let n = train_labels.len() as f64;
    let mut w = [0.0; N_CLASSES];
    let present: Vec<usize> = (0..N_CLASSES).filter(|&k| counts[k] > 0).collect();
    for &k in &present {
        w[k] = n / (N_CLASSES as f64 * counts[k] as f64);
    }
    let mean_present = present.iter().map(|&k| w[k]).sum::<f64>() / present.len() as f64;
    for k in 0..N_CLASSES {
        if counts[k] == 0 {
            w[k] = mean_present;
        }
    }
    Ok(ClassWeights { w })
}

/// Smooth a target distribution: `(1 - eps) * q + eps / K`.
pub fn smooth_target(q: &[f64; N_CLASSES], eps: f64) -> [f64; N_CLASSES] {
    let mut out = [0.0; N_CLASSES];
    for k in 0..N_CLASSES {
        out[k] = (1.0 - eps) * q[k] + eps / N_CLASSES as f64;
    }
    out
}

fn one_hot3(y: usize) -> [f64; N_CLASSES] {
    let mut q = [0.0; N_CLASSES];
    q[y] = 1.0;
    q
}

/// Tape-level weighted cross-entropy against an arbitrary simplex target
/// (any number of classes): `loss = -weight * sum_k q_k * log softmax(logits)_k`.
pub fn weighted_ce_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: TensorId,
    target: &[f64],
    weight: f64,
) -> Result<TensorId> {
    if !tape.value(logits).all_finite() {
        return Err(Error::domain("non-finite logits in cross-entropy"));
    }
    let ls = tape.log_softmax(logits)?;
    let q = tape.constant(Tensor::vector(target.iter().map(|&v| F::cast(v)).collect()));
    let prod = tape.mul(ls, q)?;
    let s = tape.sum_all(prod)?;
    tape.scale(s, F::cast(-weight))
}

/// Smoothed weighted cross-entropy for a hard label:
/// target `q = (1 - eps) one_hot(y) + eps/K`, weight `w_y`.
pub fn smoothed_weighted_ce<F: Scalar>(
    tape: &mut Tape<F>,
    logits: TensorId,
    y: usize,
    weights: &ClassWeights,
    eps: f64,
) -> Result<TensorId> {
    let q = smooth_target(&one_hot3(y), eps);
    weighted_ce_loss(tape, logits, &q, weights.w[y])
}

/// A mixup draw: coefficient plus the mixed target distribution.
#[derive(Debug, Clone)]
pub struct MixupDraw {
    pub lambda: f64,
    pub q_mix: [f64; N_CLASSES],
}

/// Sample `lambda ~ Beta(alpha, alpha)` and mix the two one-hot targets.
/// The representation mix itself happens on the tape via [`mix_representations`].
pub fn manifold_mixup_draw<R: Rng>(y_a: usize, y_b: usize, alpha: f64, rng: &mut R) -> MixupDraw {
    let beta = Beta::new(alpha, alpha).expect("alpha > 0");
    let lambda: f64 = beta.sample(rng);
    let (qa, qb) = (one_hot3(y_a), one_hot3(y_b));
    let mut q_mix = [0.0; N_CLASSES];
    for k in 0..N_CLASSES {
        q_mix[k] = lambda * qa[k] + (1.0 - lambda) * qb[k];
    }
    MixupDraw { lambda, q_mix }
}

/// `h_mix = lambda * h_a + (1 - lambda) * h_b` on the tape.
pub fn mix_representations<F: Scalar>(
    tape: &mut Tape<F>,
    h_a: TensorId,
    h_b: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    let sa = tape.scale(h_a, F::cast(lambda))?;
    let sb = tape.scale(h_b, F::cast(1.0 - lambda))?;
    tape.add(sa, sb)
}

/// Cosine-annealed learning rate at epoch `t` of `total`:
/// `lr_min + (lr_max - lr_min) * (1 + cos(pi t / total)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("cosine_lr with total = 0"));
    }
    if t > total {
        return Err(Error::contract(format!("epoch {t} beyond schedule end {total}")));
    }
    let cos = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + cos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balanced_weights_are_unit() {
        let labels: Vec<usize> = [vec![0; 10], vec![1; 10], vec![2; 10]].concat();
        let w = class_weights(&labels).unwrap();
        assert_eq!(w.w, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn imbalanced_weights_match_declared_formula() {
        let labels: Vec<usize> = [vec![0; 49], vec![1; 10], vec![2; 12]].concat();
        let w = class_weights(&labels).unwrap();
        assert!((w.w[0] - 71.0 / 147.0).abs() < 1e-12);
        assert!((w.w[1] - 71.0 / 30.0).abs() < 1e-12);
        assert!((w.w[2] - 71.0 / 36.0).abs() < 1e-12);
        // scale invariance
        let doubled: Vec<usize> = [vec![0; 98], vec![1; 20], vec![2; 24]].concat();
        let w2 = class_weights(&doubled).unwrap();
        for k in 0..3 {
            assert!((w.w[k] - w2.w[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_class_takes_mean_weight() {
        let labels: Vec<usize> = [vec![0; 4], vec![1; 4]].concat();
        let w = class_weights(&labels).unwrap();
        assert!((w.w[2] - (w.w[0] + w.w[1]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cost_ln3() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::vector(vec![0.7, 0.7, 0.7]));
        let w = ClassWeights { w: [1.0, 1.0, 1.0] };
        for y in 0..3 {
            for eps in [0.0, 0.05, 0.3] {
                let loss = smoothed_weighted_ce(&mut tape, logits, y, &w, eps).unwrap();
                let v = tape.value(loss).data[0];
                assert!((v - 3f64.ln()).abs() < 1e-12, "y={y} eps={eps}: {v}");
            }
        }
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::vector(vec![40.0, 0.0, 0.0]));
        let w = ClassWeights { w: [1.0, 1.0, 1.0] };
        let loss = smoothed_weighted_ce(&mut tape, logits, 0, &w, 0.0).unwrap();
        assert!(tape.value(loss).data[0] < 1e-12);
    }

    #[test]
    fn ce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let logits = Tensor::<f64>::randn(&[3], 2.0, &mut rng);
            let y = 1usize;
            let w = ClassWeights { w: [0.48, 2.37, 1.97] };
            let eps = 0.05;
            let mut tape = Tape::<f64>::new();
            let il = tape.constant(logits.clone());
            let loss = smoothed_weighted_ce(&mut tape, il, y, &w, eps).unwrap();
            // direct route: explicit normalization without the log-sum-exp path
            let exps: Vec<f64> = logits.data.iter().map(|v| v.exp()).collect();
            let z: f64 = exps.iter().sum();
            let q = smooth_target(&[0.0, 1.0, 0.0], eps);
            let direct: f64 = -w.w[y]
                * q.iter()
                    .zip(&exps)
                    .map(|(&qk, &ek)| qk * (ek / z).ln())
                    .sum::<f64>();
            assert!((tape.value(loss).data[0] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_is_nonnegative_and_positive_under_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = ClassWeights { w: [1.0, 1.0, 1.0] };
        for _ in 0..50 {
            let logits = Tensor::<f64>::randn(&[3], 3.0, &mut rng);
            let mut tape = Tape::<f64>::new();
            let il = tape.constant(logits);
            let loss = smoothed_weighted_ce(&mut tape, il, 0, &w, 0.05).unwrap();
            assert!(tape.value(loss).data[0] > 0.0);
        }
    }

    #[test]
    fn mixup_endpoints_reproduce_unmixed_samples() {
        let mut tape = Tape::<f64>::new();
        let ha = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let hb = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let at_one = mix_representations(&mut tape, ha, hb, 1.0).unwrap();
        assert_eq!(tape.value(at_one).data, vec![1.0, 0.0]);
        let at_zero = mix_representations(&mut tape, ha, hb, 0.0).unwrap();
        assert_eq!(tape.value(at_zero).data, vec![0.0, 1.0]);
        let halfway = mix_representations(&mut tape, ha, hb, 0.5).unwrap();
        assert_eq!(tape.value(halfway).data, vec![0.5, 0.5]);
    }

    #[test]
    fn beta_draws_center_on_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| manifold_mixup_draw(0, 1, 0.4, &mut rng).lambda)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "empirical mean {mean}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.0).unwrap(), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3, 0.0).unwrap().abs() < 1e-19);
        assert!((cosine_lr(50, 100, 1e-3, 0.0).unwrap() - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1, 0, 1e-3, 0.0).is_err());
    }
}

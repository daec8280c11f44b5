//! Stratified k-fold assignment.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Assign each index to one of `k` folds so that every class is spread as
/// evenly as possible: per class and fold, counts differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::contract("stratified_folds needs k >= 2"));
    }
    if k > labels.len() {
        return Err(Error::contract(format!(
            "k = {k} exceeds number of samples {}",
            labels.len()
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let offset: usize = rng.gen_range(0..k);
        for (i, idx) in members.into_iter().enumerate() {
            assignment[idx] = (i + offset) % k;
        }
    }
    Ok(assignment)
}

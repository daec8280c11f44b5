//! Knowledge path: finetune a copy of the pretrained encoder for 5-way
//! morphology classification and distill it to discrete labels.

use super::vit::{patchify, vit_encode};
use super::{FrozenEncoder, VitConfig};
use crate::autodiff::{Tape, TensorId};
use crate::cohort::{Tile, N_MORPH_TYPES};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, GradStore, ParameterSet};
use crate::training::{cosine_lr, weighted_ce_loss, AdamW, TrainOpts};
use crate::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Finetuned encoder copy plus linear morphology head.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphClassifier {
    pub cfg: VitConfig,
    pub params: ParameterSet<Real>,
}

#[derive(Debug, Clone)]
pub struct MorphFinetuneOutcome {
    pub classifier: MorphClassifier,
    pub held_out_accuracy: f64,
    pub warnings: Vec<String>,
}

fn logits_on_tape(
    tape: &mut Tape<Real>,
    bound: &Bound<Real>,
    cfg: &VitConfig,
    tile: &Tile,
) -> Result<TensorId> {
    let patches = patchify(tile, cfg)?;
    let rows = tape.constant(patches);
    let encoded = vit_encode(tape, bound, cfg, rows, None)?;
    let pooled = tape.mean_axis(encoded, 0)?;
    let pooled = tape.reshape(pooled, &[1, cfg.embed_dim])?;
    let logits = nn::linear(tape, bound, "head", pooled)?;
    tape.reshape(logits, &[N_MORPH_TYPES])
}

/// Class logits of a tile under a trained classifier.
pub fn morph_logits(tile: &Tile, clf: &MorphClassifier) -> Result<Vec<Real>> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &clf.params);
    let logits = logits_on_tape(&mut tape, &bound, &clf.cfg, tile)?;
    Ok(tape.value(logits).data.clone())
}

/// Argmax class; ties break toward the lowest class index.
pub fn classify_morph(tile: &Tile, clf: &MorphClassifier) -> Result<usize> {
    let logits = morph_logits(tile, clf)?;
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Full-network finetune from a copy of the pretrained encoder. The frozen
/// encoder itself is untouched (decoupling); a stratified 80/20 split of the
/// tiles provides the held-out accuracy estimate.
pub fn finetune_morph(
    tiles: &[Tile],
    encoder: &FrozenEncoder,
    opts: &TrainOpts,
    seed: u64,
) -> Result<MorphFinetuneOutcome> {
    if tiles.is_empty() {
        return Err(Error::contract("finetune_morph needs at least one tile"));
    }
    for t in tiles {
        if t.morph_type >= N_MORPH_TYPES {
            return Err(Error::contract(format!("morph label {} out of range", t.morph_type)));
        }
    }
    opts.validate()?;
    let cfg = encoder.cfg().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // stratified 80/20 split over types
    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for class in 0..N_MORPH_TYPES {
        let mut members: Vec<usize> = (0..tiles.len()).filter(|&i| tiles[i].morph_type == class).collect();
        members.shuffle(&mut rng);
        let n_held = (members.len() as f64 * 0.2).round() as usize;
        held_idx.extend_from_slice(&members[..n_held]);
        train_idx.extend_from_slice(&members[n_held..]);
    }
    train_idx.sort_unstable();
    held_idx.sort_unstable();

    let mut warnings = Vec::new();
    for class in 0..N_MORPH_TYPES {
        if !train_idx.iter().any(|&i| tiles[i].morph_type == class) {
            warnings.push(format!(
                "morph class {class} absent from the training split; proceeding"
            ));
        }
    }

    let mut params = encoder.clone_params();
    nn::init_linear(&mut params, "head", cfg.embed_dim, N_MORPH_TYPES, &mut rng)?;
    let mut opt = AdamW::new(&params);
    let batch = if opts.batch_size == 0 { train_idx.len() } else { opts.batch_size };

    let mut order = train_idx.clone();
    for epoch in 0..opts.max_epochs {
        let lr = cosine_lr(epoch, opts.max_epochs, opts.lr, 0.0)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &params);
            let inv = 1.0 / chunk.len() as Real;
            let mut batch_loss = None;
            for &ti in chunk {
                let logits = logits_on_tape(&mut tape, &bound, &cfg, &tiles[ti])?;
                let mut one_hot = [0.0f64; N_MORPH_TYPES];
                one_hot[tiles[ti].morph_type] = 1.0;
                let li = weighted_ce_loss(&mut tape, logits, &one_hot, 1.0)?;
                let scaled = tape.scale(li, inv)?;
                batch_loss = Some(match batch_loss {
                    None => scaled,
                    Some(acc) => tape.add(acc, scaled)?,
                });
            }
            let loss = batch_loss.expect("non-empty chunk");
            tape.backward(loss)?;
            let mut grads = GradStore::zeros_like(&params);
            bound.accumulate_grads(&tape, 1.0, &mut grads);
            opt.step(&mut params, &grads, lr, opts.weight_decay)?;
        }
    }

    let classifier = MorphClassifier { cfg, params };
    let eval_set = if held_idx.is_empty() { &train_idx } else { &held_idx };
    let mut correct = 0usize;
    for &i in eval_set {
        if classify_morph(&tiles[i], &classifier)? == tiles[i].morph_type {
            correct += 1;
        }
    }
    let held_out_accuracy = correct as f64 / eval_set.len() as f64;
    Ok(MorphFinetuneOutcome { classifier, held_out_accuracy, warnings })
}

//! Masked-autoencoder pretraining: encode the visible tokens only, let a
//! one-block decoder reconstruct pixels, score the masked patches alone.

use super::vit::{init_vit, patchify, vit_encode};
use super::{FrozenEncoder, VitConfig};
use crate::autodiff::{Tape, TensorId};
use crate::cohort::Tile;
use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::params::{Bound, GradStore, ParameterSet};
use crate::training::{cosine_lr, AdamW, TrainOpts};
use crate::{Real, Tensor64};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_EPS: Real = 1e-5;

/// Uniformly random disjoint covering partition of `0..t` into
/// (visible, masked) with `|masked| = round(ratio * t)`, both sorted.
/// Degenerate splits (nothing masked or nothing visible) are rejected.
pub fn mae_mask<R: Rng>(t: usize, ratio: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if t == 0 {
        return Err(Error::contract("mae_mask over zero tokens"));
    }
    if ratio <= 0.0 || ratio >= 1.0 {
        return Err(Error::contract(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n_mask = (ratio * t as f64).round() as usize;
    if n_mask == 0 {
        return Err(Error::contract(format!(
            "ratio {ratio} over {t} tokens masks nothing; at least 1 masked token required"
        )));
    }
    if n_mask >= t {
        return Err(Error::contract(format!(
            "ratio {ratio} over {t} tokens leaves nothing visible"
        )));
    }
    let mut order: Vec<usize> = (0..t).collect();
    order.shuffle(rng);
    let mut masked = order[..n_mask].to_vec();
    let mut visible = order[n_mask..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok((visible, masked))
}

/// Decoder on top of the encoder parameters: learned mask token, one
/// transformer block, layer norm, linear pixel head. The pixel head starts
/// near zero so the untrained reconstruction is close to a zero image.
pub fn init_mae<R: Rng>(cfg: &VitConfig, rng: &mut R) -> Result<ParameterSet<Real>> {
    let mut p = init_vit(cfg, rng)?;
    p.insert("dec.mask_token", Tensor64::randn(&[cfg.embed_dim], 0.02, rng))?;
    nn::init_transformer_block(&mut p, "dec.blk", cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio, rng)?;
    nn::init_layer_norm(&mut p, "dec.ln", cfg.embed_dim)?;
    p.insert("dec.head.w", Tensor64::randn(&[cfg.embed_dim, cfg.patch_pixels()], 0.01, rng))?;
    p.insert("dec.head.b", Tensor64::zeros(&[cfg.patch_pixels()]))?;
    Ok(p)
}

fn is_encoder_param(name: &str) -> bool {
    !name.starts_with("dec.")
}

/// One tile's masked-reconstruction pass.
#[derive(Debug, Clone)]
pub struct MaeForward {
    /// Mean squared error over masked patches only.
    pub loss: TensorId,
    /// Predicted pixel rows for the masked patches, `[M, ps^2]`.
    pub pred_masked: TensorId,
    pub masked: Vec<usize>,
}

/// Masked-reconstruction loss of one tile on an existing tape. The loss
/// averages squared error over masked patches only; visible patches carry
/// zero weight by construction.
pub fn mae_loss_on_tape<R: Rng>(
    tape: &mut Tape<Real>,
    bound: &Bound<Real>,
    cfg: &VitConfig,
    tile: &Tile,
    rng: &mut R,
) -> Result<MaeForward> {
    let patches = patchify(tile, cfg)?;
    let t = cfg.tokens();
    let (visible, masked) = mae_mask(t, cfg.mask_ratio, rng)?;

    let vis_rows: Vec<Vec<Real>> = visible.iter().map(|&i| patches.row(i).to_vec()).collect();
    let vis_const = tape.constant(Tensor64::from_rows(&vis_rows)?);
    let encoded = vit_encode(tape, bound, cfg, vis_const, Some(&visible))?;

    let mask_tok = bound.id("dec.mask_token")?;
    let mask_rows = tape.repeat_row(mask_tok, masked.len())?;
    let stacked = tape.concat_rows(&[encoded, mask_rows])?;
    // stacked rows follow `visible ++ masked`; invert back to grid order
    let mut inv = vec![0usize; t];
    for (k, &j) in visible.iter().chain(masked.iter()).enumerate() {
        inv[j] = k;
    }
    let grid = tape.gather_rows(stacked, &inv)?;
    let pos = bound.id("pos")?;
    let grid = tape.add(grid, pos)?;
    let (dec, _) = nn::transformer_block(tape, bound, "dec.blk", grid, cfg.heads, Activation::Gelu, LN_EPS)?;
    let dec = nn::layer_norm(tape, bound, "dec.ln", dec, LN_EPS)?;
    let pixels = nn::linear(tape, bound, "dec.head", dec)?;

    let pred_masked = tape.gather_rows(pixels, &masked)?;
    let target_rows: Vec<Vec<Real>> = masked.iter().map(|&i| patches.row(i).to_vec()).collect();
    let target = tape.constant(Tensor64::from_rows(&target_rows)?);
    let diff = tape.sub(pred_masked, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean_all(sq)?;
    Ok(MaeForward { loss, pred_masked, masked })
}

/// One-off masked-reconstruction loss of a tile under given parameters.
pub fn mae_forward_loss<R: Rng>(
    tile: &Tile,
    cfg: &VitConfig,
    params: &ParameterSet<Real>,
    rng: &mut R,
) -> Result<Real> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, params);
    let fwd = mae_loss_on_tape(&mut tape, &bound, cfg, tile, rng)?;
    Ok(tape.value(fwd.loss).data[0])
}

/// Result of a pretraining run: the frozen encoder and the per-epoch mean
/// masked reconstruction loss.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: FrozenEncoder,
    /// Decoder-side parameters, kept for inspection.
    pub decoder_params: ParameterSet<Real>,
    pub loss_curve: Vec<Real>,
}

/// AdamW pretraining over the tile set. Deterministic per seed.
pub fn pretrain_mae(tiles: &[Tile], cfg: &VitConfig, opts: &TrainOpts, seed: u64) -> Result<PretrainOutcome> {
    if tiles.is_empty() {
        return Err(Error::contract("pretrain_mae needs at least one tile"));
    }
    cfg.validate()?;
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_mae(cfg, &mut rng)?;
    let mut opt = AdamW::new(&params);
    let batch = if opts.batch_size == 0 { tiles.len() } else { opts.batch_size };
    let mut curve = Vec::with_capacity(opts.max_epochs);
    let mut order: Vec<usize> = (0..tiles.len()).collect();

    for epoch in 0..opts.max_epochs {
        let lr = cosine_lr(epoch, opts.max_epochs, opts.lr, 0.0)?;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &params);
            let inv = 1.0 / chunk.len() as Real;
            let mut batch_loss = None;
            for &ti in chunk {
                let fwd = mae_loss_on_tape(&mut tape, &bound, cfg, &tiles[ti], &mut rng)?;
                let scaled = tape.scale(fwd.loss, inv)?;
                batch_loss = Some(match batch_loss {
                    None => scaled,
                    Some(acc) => tape.add(acc, scaled)?,
                });
            }
            let loss = batch_loss.expect("non-empty chunk");
            epoch_loss += tape.value(loss).data[0] * chunk.len() as Real;
            tape.backward(loss)?;
            let mut grads = GradStore::zeros_like(&params);
            bound.accumulate_grads(&tape, 1.0, &mut grads);
            opt.step(&mut params, &grads, lr, opts.weight_decay)?;
        }
        curve.push(epoch_loss / tiles.len() as Real);
    }

    let mut encoder_params = ParameterSet::new();
    let mut decoder_params = ParameterSet::new();
    for (name, t) in params.iter() {
        if is_encoder_param(name) {
            encoder_params.insert(name, t.clone())?;
        } else {
            decoder_params.insert(name, t.clone())?;
        }
    }
    Ok(PretrainOutcome {
        encoder: FrozenEncoder::new(cfg.clone(), encoder_params),
        decoder_params,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::generate_tile_set;

    #[test]
    fn mask_partition_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (vis, masked) = mae_mask(16, 0.75, &mut rng).unwrap();
        assert_eq!(masked.len(), 12);
        assert_eq!(vis.len(), 4);
        let mut all: Vec<usize> = vis.iter().chain(masked.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(mae_mask(0, 0.75, &mut rng).is_err());
        assert!(mae_mask(16, 0.01, &mut rng).is_err()); // rounds to zero masked
        assert!(mae_mask(16, 0.99, &mut rng).is_err()); // rounds to all masked
    }

    #[test]
    fn mask_frequency_tracks_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 16;
        let draws = 10_000;
        let mut hits = vec![0usize; t];
        for _ in 0..draws {
            let (_, masked) = mae_mask(t, 0.75, &mut rng).unwrap();
            for &i in &masked {
                hits[i] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let f = h as f64 / draws as f64;
            assert!((f - 0.75).abs() < 0.02, "token {i} masked with frequency {f}");
        }
    }

    #[test]
    fn untrained_loss_on_constant_tile_matches_direct_mse() {
        let cfg = VitConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = init_mae(&cfg, &mut rng).unwrap();
        let tile = Tile {
            pixels: Tensor64::filled(&[32, 32], 0.5),
            morph_type: 1,
        };
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let mut rng_loss = ChaCha8Rng::seed_from_u64(5);
        let fwd = mae_loss_on_tape(&mut tape, &bound, &cfg, &tile, &mut rng_loss).unwrap();
        assert_eq!(fwd.masked.len(), 12);

        // direct-route oracle: plain-f64 mean of (pred - 0.5)^2 over the
        // decoder's masked-pixel outputs
        let pred = tape.value(fwd.pred_masked);
        let direct: f64 = pred.data.iter().map(|p| (p - 0.5).powi(2)).sum::<f64>() / pred.numel() as f64;
        assert!((tape.value(fwd.loss).data[0] - direct).abs() < 1e-10);
    }

    #[test]
    fn perfect_decoder_has_zero_loss_and_ignores_visible_error() {
        // pixel head rigged to output exactly 0.5 everywhere: weights zero,
        // bias 0.5. On a constant-0.5 tile the masked patches are perfectly
        // reconstructed, so the loss must be exactly zero no matter how wrong
        // the visible-patch reconstruction would be.
        let cfg = VitConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = init_mae(&cfg, &mut rng).unwrap();
        let pp = cfg.patch_pixels();
        *params.get_mut("dec.head.w").unwrap() = Tensor64::zeros(&[cfg.embed_dim, pp]);
        *params.get_mut("dec.head.b").unwrap() = Tensor64::filled(&[pp], 0.5);
        let tile = Tile {
            pixels: Tensor64::filled(&[32, 32], 0.5),
            morph_type: 0,
        };
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let mut rng_loss = ChaCha8Rng::seed_from_u64(7);
        let fwd = mae_loss_on_tape(&mut tape, &bound, &cfg, &tile, &mut rng_loss).unwrap();
        assert_eq!(tape.value(fwd.loss).data[0], 0.0);
    }

    #[test]
    fn one_epoch_lr_zero_is_a_no_op() {
        let cfg = VitConfig::default();
        let tiles = generate_tile_set(6, 32, 0.06, 7).unwrap();
        let opts = TrainOpts {
            lr: 1e-12, // cosine schedule hits exactly 0 only at the end; use epsilon lr with wd 0
            weight_decay: 0.0,
            max_epochs: 1,
            batch_size: 0,
            ..TrainOpts::default()
        };
        // with lr epsilon and wd 0 the params move by at most ~lr per step
        let out = pretrain_mae(&tiles, &cfg, &opts, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let init = init_mae(&cfg, &mut rng).unwrap();
        for (name, t) in out.encoder.params().iter() {
            let orig = init.get(name).unwrap();
            for (a, b) in t.data.iter().zip(&orig.data) {
                assert!((a - b).abs() <= 1e-11, "{name} moved by {}", (a - b).abs());
            }
        }
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = VitConfig::default();
        let tiles = generate_tile_set(8, 32, 0.06, 9).unwrap();
        let opts = TrainOpts { max_epochs: 2, batch_size: 4, ..TrainOpts::default() };
        let a = pretrain_mae(&tiles, &cfg, &opts, 3).unwrap();
        let b = pretrain_mae(&tiles, &cfg, &opts, 3).unwrap();
        assert_eq!(a.encoder.params(), b.encoder.params());
        assert_eq!(a.loss_curve, b.loss_curve);
    }
}

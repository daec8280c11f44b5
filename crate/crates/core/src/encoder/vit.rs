//! ViT tokenization and encoding.

use super::VitConfig;
use crate::autodiff::{Tape, TensorId};
use crate::cohort::Tile;
use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::params::{Bound, ParameterSet};
use crate::tensor::Tensor;
use crate::{Real, Tensor64};
use rand::Rng;

const LN_EPS: Real = 1e-5;

/// Cut a tile into non-overlapping patches, row-major over the patch grid,
/// each flattened row-major: `[T, patch_size^2]`.
pub fn patchify(tile: &Tile, cfg: &VitConfig) -> Result<Tensor64> {
    cfg.validate()?;
    if tile.pixels.shape != [cfg.image_size, cfg.image_size] {
        return Err(Error::config(format!(
            "tile shape {:?} does not match configured image size {}",
            tile.pixels.shape, cfg.image_size
        )));
    }
    let ps = cfg.patch_size;
    let side = cfg.image_size / ps;
    let mut rows = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let mut patch = Vec::with_capacity(ps * ps);
            for y in 0..ps {
                for x in 0..ps {
                    patch.push(tile.pixels.at(py * ps + y, px * ps + x));
                }
            }
            rows.push(patch);
        }
    }
    Tensor::from_rows(&rows)
}

/// Inverse of [`patchify`]: reassemble `[T, ps^2]` into `[H, W]`.
pub fn unpatchify(patches: &Tensor64, cfg: &VitConfig) -> Result<Tensor64> {
    let ps = cfg.patch_size;
    let side = cfg.image_size / ps;
    if patches.shape != [side * side, ps * ps] {
        return Err(Error::config(format!("patch block shape {:?} unexpected", patches.shape)));
    }
    let mut pixels = vec![0.0; cfg.image_size * cfg.image_size];
    for py in 0..side {
        for px in 0..side {
            let row = patches.row(py * side + px);
            for y in 0..ps {
                for x in 0..ps {
                    pixels[(py * ps + y) * cfg.image_size + (px * ps + x)] = row[y * ps + x];
                }
            }
        }
    }
    Tensor::new(vec![cfg.image_size, cfg.image_size], pixels)
}

/// Encoder parameters: patch embedding, learned positional table, `layers`
/// pre-norm blocks (gelu MLP, standard ViT convention), final layer norm.
pub fn init_vit<R: Rng>(cfg: &VitConfig, rng: &mut R) -> Result<ParameterSet<Real>> {
    cfg.validate()?;
    let mut p = ParameterSet::new();
    nn::init_linear(&mut p, "embed", cfg.patch_pixels(), cfg.embed_dim, rng)?;
    p.insert("pos", Tensor::randn(&[cfg.tokens(), cfg.embed_dim], 0.02, rng))?;
    for l in 0..cfg.layers {
        nn::init_transformer_block(&mut p, &format!("blk{l}"), cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio, rng)?;
    }
    nn::init_layer_norm(&mut p, "ln_f", cfg.embed_dim)?;
    Ok(p)
}

/// Encode patch rows (a subset of the token grid given by `token_idx`, or
/// the full grid) into `[|tokens|, embed_dim]`.
pub fn vit_encode(
    tape: &mut Tape<Real>,
    bound: &Bound<Real>,
    cfg: &VitConfig,
    patch_rows: TensorId,
    token_idx: Option<&[usize]>,
) -> Result<TensorId> {
    let embedded = nn::linear(tape, bound, "embed", patch_rows)?;
    let pos = bound.id("pos")?;
    let pos = match token_idx {
        Some(idx) => tape.gather_rows(pos, idx)?,
        None => pos,
    };
    let mut x = tape.add(embedded, pos)?;
    for l in 0..cfg.layers {
        let (next, _) = nn::transformer_block(tape, bound, &format!("blk{l}"), x, cfg.heads, Activation::Gelu, LN_EPS)?;
        x = next;
    }
    nn::layer_norm(tape, bound, "ln_f", x, LN_EPS)
}

/// Mean-pooled final-layer embedding of a tile under frozen parameters.
/// Purely functional: the parameter set is borrowed immutably and nothing is
/// recorded beyond a throwaway tape.
pub fn extract_features(tile: &Tile, cfg: &VitConfig, params: &ParameterSet<Real>) -> Result<Tensor64> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, params);
    let patches = patchify(tile, cfg)?;
    let rows = tape.constant(patches);
    let encoded = vit_encode(&mut tape, &bound, cfg, rows, None)?;
    let pooled = tape.mean_axis(encoded, 0)?;
    Ok(tape.value(pooled).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::render_tile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_token_count_and_round_trip() {
        let cfg = VitConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tile = render_tile(2, 32, 0.06, &mut rng).unwrap();
        let patches = patchify(&tile, &cfg).unwrap();
        assert_eq!(patches.shape, vec![16, 64]);
        let back = unpatchify(&patches, &cfg).unwrap();
        assert_eq!(back, tile.pixels);
    }

    #[test]
    fn constant_tile_tokens_are_identical() {
        let cfg = VitConfig::default();
        let tile = Tile {
            pixels: Tensor64::filled(&[32, 32], 0.5),
            morph_type: 0,
        };
        let patches = patchify(&tile, &cfg).unwrap();
        for r in 1..patches.rows() {
            assert_eq!(patches.row(r), patches.row(0));
        }
    }

    #[test]
    fn indivisible_dims_are_config_error() {
        let cfg = VitConfig { image_size: 30, ..VitConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn features_deterministic_and_right_sized() {
        let cfg = VitConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_vit(&cfg, &mut rng).unwrap();
        let tile = render_tile(4, 32, 0.06, &mut rng).unwrap();
        let f1 = extract_features(&tile, &cfg, &params).unwrap();
        let f2 = extract_features(&tile, &cfg, &params).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.shape, vec![64]);
    }

    #[test]
    fn extract_features_leaves_params_untouched() {
        let cfg = VitConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_vit(&cfg, &mut rng).unwrap();
        let before = params.content_hash();
        let tile = render_tile(0, 32, 0.06, &mut rng).unwrap();
        extract_features(&tile, &cfg, &params).unwrap();
        assert_eq!(params.content_hash(), before);
    }
}

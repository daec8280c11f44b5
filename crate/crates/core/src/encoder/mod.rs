//! Tiny ViT patch encoder with two adaptation paths: masked-autoencoder
//! pretraining (frozen representation path) and supervised 5-way morphology
//! finetuning whose predictions feed type injection (knowledge path).
//!
//! The two paths are decoupled on purpose: finetuning starts from a copy, so
//! the frozen encoder stays bit-identical to its post-pretraining state.

mod mae;
mod morph;
mod vit;

pub use mae::{init_mae, mae_forward_loss, mae_loss_on_tape, mae_mask, pretrain_mae, MaeForward, PretrainOutcome};
pub use morph::{classify_morph, finetune_morph, morph_logits, MorphClassifier, MorphFinetuneOutcome};
pub use vit::{extract_features, init_vit, patchify, unpatchify, vit_encode};

use crate::cohort::{MORPH_NAMES, N_MORPH_TYPES};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::Real;

/// Geometry of the patch encoder. Defaults are the desk-scale setup; the
/// full-size geometry is expressible by changing the fields.
#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.75,
        }
    }
}

impl VitConfig {
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("layers >= 1 and mask_ratio in (0,1) required"));
        }
        Ok(())
    }
}

/// Human-readable morphology name for a type code.
pub fn morph_name(code: usize) -> &'static str {
    MORPH_NAMES[code.min(N_MORPH_TYPES - 1)]
}

/// Pretrained encoder parameters, frozen for downstream feature extraction.
/// Consumers only get shared access; the finetuning path works on a clone.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    cfg: VitConfig,
    params: ParameterSet<Real>,
}

impl FrozenEncoder {
    pub fn new(cfg: VitConfig, params: ParameterSet<Real>) -> Self {
        FrozenEncoder { cfg, params }
    }

    pub fn cfg(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet<Real> {
        &self.params
    }

    /// Copy of the parameters for the finetuning path.
    pub fn clone_params(&self) -> ParameterSet<Real> {
        self.params.clone()
    }
}

//! Condition-token fusion: the clinical vector is projected into patch
//! space, prepended as token 0, and run through a shared self-attention
//! stack, so each modality attends to the other inside one sequence. The
//! enriched patch tokens are pooled by gated attention MIL; the final
//! patient representation is `[pooled image; enriched condition token]`.
//!
//! No positional embeddings anywhere: a bag of glomeruli is unordered, which
//! makes patch-permutation equivariance exact (up to float summation order).

use super::{FusionConfig, FusionModel, ReprOut};
use crate::autodiff::{Tape, TensorId};
use crate::error::Result;
use crate::nn::{self, Activation};
use crate::params::{Bound, ParameterSet};
use crate::training::N_CLASSES;
use crate::{Real, Tensor64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const LN_EPS: Real = 1e-5;

/// `z = LayerNorm(ReLU(W c + b))` for a clinical vector `[d_in]`, producing
/// a `[1, d_h]` row.
pub fn project_clinical(
    tape: &mut Tape<Real>,
    bound: &Bound<Real>,
    prefix: &str,
    clinical: TensorId,
) -> Result<TensorId> {
    let d_in = tape.value(clinical).numel();
    let row = tape.reshape(clinical, &[1, d_in])?;
    let lin = nn::linear(tape, bound, prefix, row)?;
    let act = tape.relu(lin)?;
    nn::layer_norm(tape, bound, &format!("{prefix}.ln"), act, LN_EPS)
}

/// Same projection recipe applied row-wise to the bag `[N, d_in] -> [N, d_h]`.
pub fn project_patches(
    tape: &mut Tape<Real>,
    bound: &Bound<Real>,
    prefix: &str,
    bag: TensorId,
) -> Result<TensorId> {
    let lin = nn::linear(tape, bound, prefix, bag)?;
    let act = tape.relu(lin)?;
    nn::layer_norm(tape, bound, &format!("{prefix}.ln"), act, LN_EPS)
}

pub(crate) fn init_projection<R: rand::Rng>(
    params: &mut ParameterSet<Real>,
    prefix: &str,
    d_in: usize,
    d_h: usize,
    rng: &mut R,
) -> Result<()> {
    nn::init_linear(params, prefix, d_in, d_h, rng)?;
    nn::init_layer_norm(params, &format!("{prefix}.ln"), d_h)
}

pub(crate) fn init_gated_mil<R: rand::Rng>(
    params: &mut ParameterSet<Real>,
    prefix: &str,
    d_h: usize,
    mil_dim: usize,
    rng: &mut R,
) -> Result<()> {
    let limit = (6.0 / (d_h + mil_dim) as f64).sqrt();
    params.insert(format!("{prefix}.v"), Tensor64::rand_uniform(&[d_h, mil_dim], limit, rng))?;
    params.insert(format!("{prefix}.u"), Tensor64::rand_uniform(&[d_h, mil_dim], limit, rng))?;
    let wl = (6.0 / (mil_dim + 1) as f64).sqrt();
    params.insert(format!("{prefix}.w"), Tensor64::rand_uniform(&[mil_dim, 1], wl, rng))?;
    Ok(())
}

/// Gated attention MIL pooling:
/// `a = softmax_i( w^T (tanh(V z_i) .* sigmoid(U z_i)) )`,
/// `h_img = sum_i a_i z_i`. Returns `(h_img [d_h], a [N])`.
pub fn gated_mil_pool(
    tape: &mut Tape<Real>,
    bound: &Bound<Real>,
    prefix: &str,
    patches: TensorId,
) -> Result<(TensorId, TensorId)> {
    let n = tape.value(patches).rows();
    let d_h = tape.value(patches).cols();
    let v = bound.id(&format!("{prefix}.v"))?;
    let u = bound.id(&format!("{prefix}.u"))?;
    let w = bound.id(&format!("{prefix}.w"))?;
    let zv = tape.matmul(patches, v)?;
    let zv = tape.tanh(zv)?;
    let zu = tape.matmul(patches, u)?;
    let zu = tape.sigmoid(zu)?;
    let gate = tape.mul(zv, zu)?;
    let scores = tape.matmul(gate, w)?; // [N, 1]
    let scores = tape.reshape(scores, &[n])?;
    let attn = tape.softmax(scores)?;
    let attn_row = tape.reshape(attn, &[1, n])?;
    let pooled = tape.matmul(attn_row, patches)?; // [1, d_h]
    let pooled = tape.reshape(pooled, &[d_h])?;
    Ok((pooled, attn))
}

/// The condition-token transformer.
pub struct Cit {
    cfg: FusionConfig,
    d_patch_in: usize,
    d_clin_in: usize,
}

/// Everything one forward pass produces, as plain values.
#[derive(Debug, Clone)]
pub struct CitPrediction {
    pub logits: Vec<Real>,
    pub probabilities: Vec<Real>,
    pub mil_attention: Vec<Real>,
    pub representation: Vec<Real>,
}

impl Cit {
    pub fn new(cfg: FusionConfig, d_patch_in: usize, d_clin_in: usize) -> Self {
        Cit { cfg, d_patch_in, d_clin_in }
    }

    pub fn cfg(&self) -> &FusionConfig {
        &self.cfg
    }

    /// Run the shared transformer over `[cond; patches]` and split the
    /// result. Returns `(z_cond [d_h], patches [N, d_h], per-layer attention)`.
    pub fn fuse(
        &self,
        tape: &mut Tape<Real>,
        bound: &Bound<Real>,
        z_cond: TensorId,
        z_patches: TensorId,
    ) -> Result<(TensorId, TensorId, Vec<TensorId>)> {
        let n = tape.value(z_patches).rows();
        let mut z = tape.concat_rows(&[z_cond, z_patches])?;
        let mut attns = Vec::new();
        for l in 0..self.cfg.layers {
            let (next, a) =
                nn::transformer_block(tape, bound, &format!("blk{l}"), z, self.cfg.heads, Activation::Gelu, LN_EPS)?;
            z = next;
            attns.extend(a);
        }
        let z = nn::layer_norm(tape, bound, "ln_f", z, LN_EPS)?;
        let cond = tape.slice_rows(z, 0, 1)?;
        let cond = tape.reshape(cond, &[self.cfg.d_h])?;
        let patches = tape.slice_rows(z, 1, n)?;
        Ok((cond, patches, attns))
    }

    /// Full prediction with attention read-out, as plain values.
    pub fn predict(
        &self,
        params: &ParameterSet<Real>,
        bag: &Tensor64,
        clinical: &[Real],
    ) -> Result<CitPrediction> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, params);
        let bag_id = tape.constant(bag.clone());
        let clin_id = tape.constant(Tensor64::vector(clinical.to_vec()));
        let repr = self.forward_repr(&mut tape, &bound, bag_id, clin_id)?;
        let logits = self.head(&mut tape, &bound, repr.h)?;
        let probs = tape.softmax(logits)?;
        Ok(CitPrediction {
            logits: tape.value(logits).data.clone(),
            probabilities: tape.value(probs).data.clone(),
            mil_attention: tape.value(repr.mil_attention.expect("cit pools with MIL attention")).data.clone(),
            representation: tape.value(repr.h).data.clone(),
        })
    }
}

impl FusionModel for Cit {
    fn name(&self) -> &'static str {
        "cit"
    }

    fn init_params(&self, seed: u64) -> Result<ParameterSet<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        init_projection(&mut p, "proj_c", self.d_clin_in, self.cfg.d_h, &mut rng)?;
        init_projection(&mut p, "proj_x", self.d_patch_in, self.cfg.d_h, &mut rng)?;
        for l in 0..self.cfg.layers {
            nn::init_transformer_block(&mut p, &format!("blk{l}"), self.cfg.d_h, self.cfg.mlp_width, &mut rng)?;
        }
        nn::init_layer_norm(&mut p, "ln_f", self.cfg.d_h)?;
        init_gated_mil(&mut p, "mil", self.cfg.d_h, self.cfg.mil_dim, &mut rng)?;
        nn::init_linear(&mut p, "head", 2 * self.cfg.d_h, N_CLASSES, &mut rng)?;
        Ok(p)
    }

    fn forward_repr(
        &self,
        tape: &mut Tape<Real>,
        bound: &Bound<Real>,
        bag: TensorId,
        clinical: TensorId,
    ) -> Result<ReprOut> {
        let z_cond = project_clinical(tape, bound, "proj_c", clinical)?;
        let z_patches = project_patches(tape, bound, "proj_x", bag)?;
        let (cond_out, patches_out, _) = self.fuse(tape, bound, z_cond, z_patches)?;
        let (h_img, attn) = gated_mil_pool(tape, bound, "mil", patches_out)?;
        let h = tape.concat_cols(&[h_img, cond_out])?;
        Ok(ReprOut { h, mil_attention: Some(attn) })
    }

    fn head(&self, tape: &mut Tape<Real>, bound: &Bound<Real>, h: TensorId) -> Result<TensorId> {
        let row = tape.reshape(h, &[1, 2 * self.cfg.d_h])?;
        let logits = nn::linear(tape, bound, "head", row)?;
        tape.reshape(logits, &[N_CLASSES])
    }
}

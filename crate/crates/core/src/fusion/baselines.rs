//! Comparison fusion architectures trained under the identical protocol.

use super::cit::{gated_mil_pool, init_gated_mil, init_projection, project_clinical, project_patches, LN_EPS};
use super::{FusionConfig, FusionModel, ReprOut};
use crate::autodiff::{Tape, TensorId};
use crate::error::Result;
use crate::nn::{self, Activation};
use crate::params::{Bound, ParameterSet};
use crate::training::N_CLASSES;
use crate::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn head_on(tape: &mut Tape<Real>, bound: &Bound<Real>, h: TensorId) -> Result<TensorId> {
    let d = tape.value(h).numel();
    let row = tape.reshape(h, &[1, d])?;
    let logits = nn::linear(tape, bound, "head", row)?;
    tape.reshape(logits, &[N_CLASSES])
}

/// Clinical-only two-layer MLP; the bag is ignored entirely.
pub struct ClinicalMlp {
    cfg: FusionConfig,
    d_clin_in: usize,
}

impl ClinicalMlp {
    pub fn new(cfg: FusionConfig, d_clin_in: usize) -> Self {
        ClinicalMlp { cfg, d_clin_in }
    }
}

impl FusionModel for ClinicalMlp {
    fn name(&self) -> &'static str {
        "clinical_mlp"
    }

    fn init_params(&self, seed: u64) -> Result<ParameterSet<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        nn::init_linear(&mut p, "fc1", self.d_clin_in, self.cfg.d_h, &mut rng)?;
        nn::init_linear(&mut p, "head", self.cfg.d_h, N_CLASSES, &mut rng)?;
        Ok(p)
    }

    fn forward_repr(
        &self,
        tape: &mut Tape<Real>,
        bound: &Bound<Real>,
        _bag: TensorId,
        clinical: TensorId,
    ) -> Result<ReprOut> {
        let row = tape.reshape(clinical, &[1, self.d_clin_in])?;
        let hidden = nn::linear(tape, bound, "fc1", row)?;
        let hidden = tape.relu(hidden)?;
        let h = tape.reshape(hidden, &[self.cfg.d_h])?;
        Ok(ReprOut { h, mil_attention: None })
    }

    fn head(&self, tape: &mut Tape<Real>, bound: &Bound<Real>, h: TensorId) -> Result<TensorId> {
        head_on(tape, bound, h)
    }
}

/// Image-only gated-attention MIL: project patches, pool, classify. No
/// clinical input, no transformer.
pub struct Abmil {
    cfg: FusionConfig,
    d_patch_in: usize,
}

impl Abmil {
    pub fn new(cfg: FusionConfig, d_patch_in: usize) -> Self {
        Abmil { cfg, d_patch_in }
    }
}

impl FusionModel for Abmil {
    fn name(&self) -> &'static str {
        "abmil"
    }

    fn init_params(&self, seed: u64) -> Result<ParameterSet<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        init_projection(&mut p, "proj_x", self.d_patch_in, self.cfg.d_h, &mut rng)?;
        init_gated_mil(&mut p, "mil", self.cfg.d_h, self.cfg.mil_dim, &mut rng)?;
        nn::init_linear(&mut p, "head", self.cfg.d_h, N_CLASSES, &mut rng)?;
        Ok(p)
    }

    fn forward_repr(
        &self,
        tape: &mut Tape<Real>,
        bound: &Bound<Real>,
        bag: TensorId,
        _clinical: TensorId,
    ) -> Result<ReprOut> {
        let z = project_patches(tape, bound, "proj_x", bag)?;
        let (h_img, attn) = gated_mil_pool(tape, bound, "mil", z)?;
        Ok(ReprOut { h: h_img, mil_attention: Some(attn) })
    }

    fn head(&self, tape: &mut Tape<Real>, bound: &Bound<Real>, h: TensorId) -> Result<TensorId> {
        head_on(tape, bound, h)
    }
}

/// Independent image and clinical branches concatenated only at the linear
/// head: no cross-modal interaction anywhere before the logits.
pub struct LateFusion {
    cfg: FusionConfig,
    d_patch_in: usize,
    d_clin_in: usize,
}

impl LateFusion {
    pub fn new(cfg: FusionConfig, d_patch_in: usize, d_clin_in: usize) -> Self {
        LateFusion { cfg, d_patch_in, d_clin_in }
    }
}

impl FusionModel for LateFusion {
    fn name(&self) -> &'static str {
        "late_fusion"
    }

    fn init_params(&self, seed: u64) -> Result<ParameterSet<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        init_projection(&mut p, "proj_x", self.d_patch_in, self.cfg.d_h, &mut rng)?;
        init_gated_mil(&mut p, "mil", self.cfg.d_h, self.cfg.mil_dim, &mut rng)?;
        nn::init_linear(&mut p, "clin_fc", self.d_clin_in, self.cfg.d_h, &mut rng)?;
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
        let z = project_patches(tape, bound, "proj_x", bag)?;
        let (h_img, attn) = gated_mil_pool(tape, bound, "mil", z)?;
        let row = tape.reshape(clinical, &[1, self.d_clin_in])?;
        let e_c = nn::linear(tape, bound, "clin_fc", row)?;
        let e_c = tape.relu(e_c)?;
        let e_c = tape.reshape(e_c, &[self.cfg.d_h])?;
        let h = tape.concat_cols(&[h_img, e_c])?;
        Ok(ReprOut { h, mil_attention: Some(attn) })
    }

    fn head(&self, tape: &mut Tape<Real>, bound: &Bound<Real>, h: TensorId) -> Result<TensorId> {
        head_on(tape, bound, h)
    }
}

/// Dual-stream cross-attention fusion: one cross-attention block with the
/// clinical embedding as query over patch keys/values, then per-stream
/// processing (a transformer stack over the value-updated patches feeding
/// MIL pooling, an MLP over the residual-updated clinical embedding), heads
/// on the concatenation. Deliberately the parameter-heavy alternative to
/// condition-token injection.
pub struct CrossAttention {
    cfg: FusionConfig,
    d_patch_in: usize,
    d_clin_in: usize,
}

impl CrossAttention {
    pub fn new(cfg: FusionConfig, d_patch_in: usize, d_clin_in: usize) -> Self {
        CrossAttention { cfg, d_patch_in, d_clin_in }
    }

    /// Cross-attention weights over the bag for one forward pass.
    pub fn attention_over_patches(
        &self,
        params: &ParameterSet<Real>,
        bag: &crate::Tensor64,
        clinical: &[Real],
    ) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, params);
        let bag_id = tape.constant(bag.clone());
        let clin_id = tape.constant(crate::Tensor64::vector(clinical.to_vec()));
        let (_, _, attn) = self.cross_block(&mut tape, &bound, bag_id, clin_id)?;
        Ok(tape.value(attn).data.clone())
    }

    /// Returns `(updated clinical [d_h], value-updated patches [N, d_h],
    /// attention row [N])`.
    fn cross_block(
        &self,
        tape: &mut Tape<Real>,
        bound: &Bound<Real>,
        bag: TensorId,
        clinical: TensorId,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let d_h = self.cfg.d_h;
        let e_c = project_clinical(tape, bound, "proj_c", clinical)?; // [1, d_h]
        let z = project_patches(tape, bound, "proj_x", bag)?; // [N, d_h]
        let n = tape.value(z).rows();

        let q = nn::linear(tape, bound, "cross.q", e_c)?; // [1, d_h]
        let k = nn::linear(tape, bound, "cross.k", z)?;
        let v = nn::linear(tape, bound, "cross.v", z)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?; // [1, N]
        let scaled = tape.scale(scores, 1.0 / (d_h as Real).sqrt())?;
        let attn_row = tape.softmax(scaled)?;
        let ctx = tape.matmul(attn_row, v)?; // [1, d_h]
        let ctx = nn::linear(tape, bound, "cross.o", ctx)?;
        let e_c = tape.add(e_c, ctx)?; // clinical residual
        let z = tape.add(z, v)?; // value-updated patches
        let attn = tape.reshape(attn_row, &[n])?;
        Ok((e_c, z, attn))
    }
}

impl FusionModel for CrossAttention {
    fn name(&self) -> &'static str {
        "cross_attention"
    }

    fn init_params(&self, seed: u64) -> Result<ParameterSet<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        init_projection(&mut p, "proj_c", self.d_clin_in, self.cfg.d_h, &mut rng)?;
        init_projection(&mut p, "proj_x", self.d_patch_in, self.cfg.d_h, &mut rng)?;
        for proj in ["q", "k", "v", "o"] {
            nn::init_linear(&mut p, &format!("cross.{proj}"), self.cfg.d_h, self.cfg.d_h, &mut rng)?;
        }
        for l in 0..self.cfg.layers {
            nn::init_transformer_block(&mut p, &format!("img_blk{l}"), self.cfg.d_h, self.cfg.mlp_width, &mut rng)?;
        }
        nn::init_layer_norm(&mut p, "img_ln", self.cfg.d_h)?;
        nn::init_mlp(&mut p, "clin_mlp", self.cfg.d_h, self.cfg.mlp_width, &mut rng)?;
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
        let (e_c, mut z, _) = self.cross_block(tape, bound, bag, clinical)?;
        for l in 0..self.cfg.layers {
            let (next, _) =
                nn::transformer_block(tape, bound, &format!("img_blk{l}"), z, self.cfg.heads, Activation::Gelu, LN_EPS)?;
            z = next;
        }
        let z = nn::layer_norm(tape, bound, "img_ln", z, LN_EPS)?;
        let (h_img, attn) = gated_mil_pool(tape, bound, "mil", z)?;
        let e_c = nn::mlp(tape, bound, "clin_mlp", e_c, Activation::Gelu)?;
        let e_c = tape.reshape(e_c, &[self.cfg.d_h])?;
        let h = tape.concat_cols(&[h_img, e_c])?;
        Ok(ReprOut { h, mil_attention: Some(attn) })
    }

    fn head(&self, tape: &mut Tape<Real>, bound: &Bound<Real>, h: TensorId) -> Result<TensorId> {
        head_on(tape, bound, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{build_model, parameter_count, ModelKind, PreparedPatient};
    use crate::{Real, Tensor64};
    use rand::Rng;

    fn prepared(n: usize, d_f: usize, d_c: usize, seed: u64) -> PreparedPatient {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PreparedPatient {
            bag: Tensor64::randn(&[n, d_f], 1.0, &mut rng),
            clinical: (0..d_c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            label: 0,
            types: vec![0; n],
        }
    }

    #[test]
    fn clinical_mlp_ignores_the_bag() {
        let cfg = FusionConfig::desk();
        let model = ClinicalMlp::new(cfg, 10);
        let params = model.init_params(1).unwrap();
        let a = prepared(3, 7, 10, 2);
        let mut b = prepared(9, 7, 10, 3);
        b.clinical = a.clinical.clone();
        let la = model.logits(&params, &a).unwrap();
        let lb = model.logits(&params, &b).unwrap();
        assert_eq!(la, lb);
        assert_eq!(la.len(), 3);
    }

    #[test]
    fn abmil_is_permutation_invariant_and_singleton_exact() {
        let cfg = FusionConfig::desk();
        let model = Abmil::new(cfg.clone(), 7);
        let params = model.init_params(4).unwrap();
        let p = prepared(6, 7, 0, 5);
        let base = model.logits(&params, &p).unwrap();
        let perm = [5usize, 2, 0, 4, 1, 3];
        let rows: Vec<Vec<Real>> = perm.iter().map(|&i| p.bag.row(i).to_vec()).collect();
        let shuffled = PreparedPatient {
            bag: Tensor64::from_rows(&rows).unwrap(),
            ..p.clone()
        };
        let permuted = model.logits(&params, &shuffled).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-6);
        }

        // N = 1: logits equal head(projection of the single patch)
        let single = prepared(1, 7, 0, 6);
        let via_model = model.logits(&params, &single).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let bag = tape.constant(single.bag.clone());
        let z = project_patches(&mut tape, &bound, "proj_x", bag).unwrap();
        let z1 = tape.reshape(z, &[16]).unwrap();
        let direct = head_on(&mut tape, &bound, z1).unwrap();
        for (a, b) in via_model.iter().zip(&tape.value(direct).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn late_fusion_with_zeroed_clinical_branch_reduces_to_abmil_plus_constant() {
        let cfg = FusionConfig::desk();
        let model = LateFusion::new(cfg, 7, 10);
        let mut params = model.init_params(7).unwrap();
        *params.get_mut("clin_fc.w").unwrap() = Tensor64::zeros(&[10, 16]);
        *params.get_mut("clin_fc.b").unwrap() = Tensor64::zeros(&[16]);
        let a = prepared(4, 7, 10, 8);
        let mut b = prepared(4, 7, 10, 9);
        b.bag = a.bag.clone(); // same bag, different clinical
        let la = model.logits(&params, &a).unwrap();
        let lb = model.logits(&params, &b).unwrap();
        assert_eq!(la, lb, "zeroed clinical branch still leaks clinical info");
    }

    #[test]
    fn cross_attention_rows_are_stochastic_and_singleton_is_one() {
        let cfg = FusionConfig::desk();
        let model = CrossAttention::new(cfg, 7, 10);
        let params = model.init_params(10).unwrap();
        let p = prepared(5, 7, 10, 11);
        let attn = model.attention_over_patches(&params, &p.bag, &p.clinical).unwrap();
        assert_eq!(attn.len(), 5);
        assert!((attn.iter().sum::<Real>() - 1.0).abs() < 1e-6);

        let single = prepared(1, 7, 10, 12);
        let attn = model.attention_over_patches(&params, &single.bag, &single.clinical).unwrap();
        assert!((attn[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_outweighs_cit_at_equal_width() {
        let cfg = FusionConfig::desk();
        let cit = build_model(ModelKind::Cit, &cfg, 12, 30).unwrap();
        let cross = build_model(ModelKind::CrossAttention, &cfg, 12, 30).unwrap();
        let cit_n = parameter_count(cit.as_ref()).unwrap();
        let cross_n = parameter_count(cross.as_ref()).unwrap();
        assert!(
            cross_n > cit_n,
            "cross-attention ({cross_n}) should exceed condition-token fusion ({cit_n})"
        );
    }
}

//! Shared network building blocks on top of the tape: linear layers,
//! layer-norm affines, multi-head self-attention and pre-norm transformer
//! encoder blocks. Both the patch encoder and the fusion module are built
//! from these.

use crate::autodiff::{Tape, TensorId};
use crate::error::Result;
use crate::params::{Bound, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Activation used inside transformer MLP blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

pub fn apply_activation<F: Scalar>(tape: &mut Tape<F>, x: TensorId, act: Activation) -> Result<TensorId> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
    }
}

/// Glorot-uniform weight `[in, out]` plus zero bias `[out]` under
/// `name.w` / `name.b`.
pub fn init_linear<F: Scalar, R: Rng>(
    params: &mut ParameterSet<F>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<()> {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    params.insert(format!("{name}.w"), Tensor::rand_uniform(&[in_dim, out_dim], limit, rng))?;
    params.insert(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
    Ok(())
}

/// `x[m,in] . w[in,out] + b`.
pub fn linear<F: Scalar>(tape: &mut Tape<F>, bound: &Bound<F>, name: &str, x: TensorId) -> Result<TensorId> {
    let w = bound.id(&format!("{name}.w"))?;
    let b = bound.id(&format!("{name}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Identity-initialized layer-norm affine under `name.g` / `name.b`.
pub fn init_layer_norm<F: Scalar>(params: &mut ParameterSet<F>, name: &str, dim: usize) -> Result<()> {
    params.insert(format!("{name}.g"), Tensor::filled(&[dim], F::one()))?;
    params.insert(format!("{name}.b"), Tensor::zeros(&[dim]))?;
    Ok(())
}

pub fn layer_norm<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound<F>,
    name: &str,
    x: TensorId,
    eps: F,
) -> Result<TensorId> {
    let g = bound.id(&format!("{name}.g"))?;
    let b = bound.id(&format!("{name}.b"))?;
    tape.layer_norm(x, g, b, eps)
}

/// Multi-head self-attention parameters: fused QKV-style projections stored
/// as four linears `name.q`, `name.k`, `name.v`, `name.o`.
pub fn init_attention<F: Scalar, R: Rng>(
    params: &mut ParameterSet<F>,
    name: &str,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{name}.{proj}"), dim, dim, rng)?;
    }
    Ok(())
}

/// Self-attention over `x[T,d]` with `heads` heads. No positional encoding;
/// token order carries no information at this level. Returns the output and
/// the per-head attention matrices (row-stochastic `[T,T]`).
pub fn self_attention<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound<F>,
    name: &str,
    x: TensorId,
    heads: usize,
) -> Result<(TensorId, Vec<TensorId>)> {
    let d = *tape.shape(x).last().unwrap();
    debug_assert_eq!(d % heads, 0, "dim divisible by heads is a config invariant");
    let dk = d / heads;
    let q = linear(tape, bound, &format!("{name}.q"), x)?;
    let k = linear(tape, bound, &format!("{name}.k"), x)?;
    let v = linear(tape, bound, &format!("{name}.v"), x)?;
    let scale = F::cast(1.0 / (dk as f64).sqrt());

    let mut head_outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let attn = tape.softmax(scaled)?;
        let out = tape.matmul(attn, vh)?;
        head_outs.push(out);
        attns.push(attn);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let projected = linear(tape, bound, &format!("{name}.o"), merged)?;
    Ok((projected, attns))
}

/// Two-layer position-wise MLP `d -> hidden -> d`.
pub fn init_mlp<F: Scalar, R: Rng>(
    params: &mut ParameterSet<F>,
    name: &str,
    dim: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(params, &format!("{name}.fc1"), dim, hidden, rng)?;
    init_linear(params, &format!("{name}.fc2"), hidden, dim, rng)?;
    Ok(())
}

pub fn mlp<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound<F>,
    name: &str,
    x: TensorId,
    act: Activation,
) -> Result<TensorId> {
    let h = linear(tape, bound, &format!("{name}.fc1"), x)?;
    let h = apply_activation(tape, h, act)?;
    linear(tape, bound, &format!("{name}.fc2"), h)
}

/// Pre-norm transformer encoder block:
/// `x += attn(LN(x)); x += mlp(LN(x))`.
pub fn init_transformer_block<F: Scalar, R: Rng>(
    params: &mut ParameterSet<F>,
    name: &str,
    dim: usize,
    mlp_hidden: usize,
    rng: &mut R,
) -> Result<()> {
    init_layer_norm(params, &format!("{name}.ln1"), dim)?;
    init_attention(params, &format!("{name}.attn"), dim, rng)?;
    init_layer_norm(params, &format!("{name}.ln2"), dim)?;
    init_mlp(params, &format!("{name}.mlp"), dim, mlp_hidden, rng)?;
    Ok(())
}

pub fn transformer_block<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound<F>,
    name: &str,
    x: TensorId,
    heads: usize,
    act: Activation,
    ln_eps: F,
) -> Result<(TensorId, Vec<TensorId>)> {
    let n1 = layer_norm(tape, bound, &format!("{name}.ln1"), x, ln_eps)?;
    let (att, attns) = self_attention(tape, bound, &format!("{name}.attn"), n1, heads)?;
    let x = tape.add(x, att)?;
    let n2 = layer_norm(tape, bound, &format!("{name}.ln2"), x, ln_eps)?;
    let m = mlp(tape, bound, &format!("{name}.mlp"), n2, act)?;
    let x = tape.add(x, m)?;
    Ok((x, attns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block_params(dim: usize, hidden: usize, seed: u64) -> ParameterSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        init_transformer_block(&mut p, "blk", dim, hidden, &mut rng).unwrap();
        p
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let params = block_params(8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let ix = tape.constant(x);
        let (_, attns) = transformer_block(&mut tape, &bound, "blk", ix, 2, Activation::Gelu, 1e-5).unwrap();
        assert_eq!(attns.len(), 2);
        for a in attns {
            let t = tape.value(a);
            for r in 0..t.rows() {
                let s: f64 = t.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn transformer_block_gradients_check_out() {
        let params = block_params(6, 10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[4, 6], 0.8, &mut rng);
        let report = grad_check(
            move |tape, leaf| {
                let bound = Bound::bind(tape, &params);
                let (y, _) = transformer_block(tape, &bound, "blk", leaf, 2, Activation::Gelu, 1e-5)?;
                let sq = tape.mul(y, y)?;
                tape.mean_all(sq)
            },
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "{report:?}");
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let params = block_params(8, 8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];

        let run = |input: &Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &params);
            let ix = tape.constant(input.clone());
            let (y, _) = transformer_block(&mut tape, &bound, "blk", ix, 2, Activation::Gelu, 1e-5).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x);
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        let shuffled = run(&Tensor::from_rows(&permuted_rows).unwrap());
        for (r, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((shuffled.at(r, j) - base.at(src, j)).abs() < 1e-9);
            }
        }
    }
}

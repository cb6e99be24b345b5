//! Composite layers built from tape primitives.

use ndarray::{Array2, Axis};

use crate::nn::params::ParamSet;
use crate::nn::tape::{Id, Tape};

/// Additive mask value that underflows to an exact zero after softmax.
pub const MASK_NEG: f64 = -1e30;

/// x . W + b where `{name}/w` is (in x out) and `{name}/b` is (1 x out).
pub fn linear(tape: &mut Tape, x: Id, params: &ParamSet, name: &str, trainable: bool) -> Id {
    let w = tape.bind(params, &format!("{name}/w"), trainable);
    let b = tape.bind(params, &format!("{name}/b"), trainable);
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

/// Two-layer ReLU MLP: relu(x . W1 + b1) . W2 + b2 under `{name}/{w1,b1,w2,b2}`.
pub fn mlp2(tape: &mut Tape, x: Id, params: &ParamSet, name: &str, trainable: bool) -> Id {
    let w1 = tape.bind(params, &format!("{name}/w1"), trainable);
    let b1 = tape.bind(params, &format!("{name}/b1"), trainable);
    let w2 = tape.bind(params, &format!("{name}/w2"), trainable);
    let b2 = tape.bind(params, &format!("{name}/b2"), trainable);
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let h = tape.matmul(h, w2);
    tape.add_row(h, b2)
}

/// Row-wise softmax with an optional additive mask applied before
/// normalisation.  Masked entries (MASK_NEG) come out exactly zero; every
/// row must keep at least one unmasked entry.
pub fn softmax_rows(tape: &mut Tape, logits: Id, additive_mask: Option<&Array2<f64>>) -> Id {
    let z = match additive_mask {
        Some(m) => {
            assert_eq!(tape.value(logits).dim(), m.dim(), "mask shape mismatch");
            let mc = tape.constant(m.clone());
            tape.add(logits, mc)
        }
        None => logits,
    };
    // Subtracting the per-row max is a constant shift: softmax is invariant
    // to it, so routing it around the tape leaves gradients untouched.
    let max = tape
        .value(z)
        .map_axis(Axis(1), |row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .insert_axis(Axis(1))
        .to_owned();
    let max_c = tape.constant(max);
    let shifted = tape.sub_col(z, max_c);
    let e = tape.exp(shifted);
    let totals = tape.row_sum(e);
    tape.div_col(e, totals)
}

/// Batch normalisation over rows with affine parameters
/// `{name}/{gamma,beta}`.
///
/// Each column is centred and scaled by the statistics of the current
/// input (biased variance, gradients flow through the statistics), in
/// training and evaluation alike.  Using the same statistics on both
/// paths keeps a network trained on per-instance forwards consistent at
/// inference, and the output stays a deterministic, permutation-
/// equivariant function of the input.
pub fn batchnorm(tape: &mut Tape, x: Id, params: &ParamSet, name: &str, trainable: bool) -> Id {
    const EPS: f64 = 1e-5;
    let gamma = tape.bind(params, &format!("{name}/gamma"), trainable);
    let beta = tape.bind(params, &format!("{name}/beta"), trainable);
    let mu = tape.col_mean(x);
    let xc = tape.sub_row(x, mu);
    let sq = tape.mul(xc, xc);
    let var = tape.col_mean(sq);
    let var_eps = tape.add_scalar(var, EPS);
    let sd = tape.sqrt(var_eps);
    let normalized = tape.div_row(xc, sd);
    let scaled = tape.mul_row(normalized, gamma);
    tape.add_row(scaled, beta)
}

/// Multi-head scaled dot-product attention.
///
/// Queries come from `q_in` (S x d), keys and values from `kv` (n x d);
/// `wq`, `wk`, `wv` are full d x d projections split into `heads` slices.
/// `additive_mask` (S x n), if given, is added to every head's logits.
/// Returns the S x d concatenation of head outputs; callers apply any
/// output projection themselves.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Id,
    kv: Id,
    wq: Id,
    wk: Id,
    wv: Id,
    heads: usize,
    additive_mask: Option<&Array2<f64>>,
) -> Id {
    let d = tape.value(wq).ncols();
    assert_eq!(d % heads, 0, "head count must divide model dim");
    let dh = d / heads;
    let q = tape.matmul(q_in, wq);
    let k = tape.matmul(kv, wk);
    let v = tape.matmul(kv, wv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, s, e);
        let kh = tape.slice_cols(k, s, e);
        let vh = tape.slice_cols(v, s, e);
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt);
        let logits = tape.scale(logits, scale);
        let attn = softmax_rows(tape, logits, additive_mask);
        outs.push(tape.matmul(attn, vh));
    }
    tape.concat_cols(&outs)
}

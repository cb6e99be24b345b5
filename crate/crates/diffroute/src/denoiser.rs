//! Gated edge-and-node message-passing network that predicts, for every
//! customer pair, the probability that the clean matrix links them, given a
//! corrupted matrix and its noise level.
//!
//! Edges carry their own embeddings (seeded from the corrupted entries);
//! each layer updates them from the incident node embeddings plus a
//! timestep signal, then gates node-to-node messages through a sigmoid of
//! the fresh edge state, so the influence of j on i can differ from that of
//! i on j.  The per-pair head is symmetrised and the diagonal forced to
//! zero so outputs always satisfy the matrix contract.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::constraint::{ConstraintMatrix, EdgeProbabilities};
use crate::diffusion::EdgeState;
use crate::error::{Error, Result};
use crate::instance::CvrpInstance;
use crate::nn::{
    batchnorm, init_bn, init_linear, init_matrix, init_mlp2, linear, mlp2, Id, ParamSet,
    Tape,
};

/// Register a fresh denoiser under the `denoiser/` namespace.
pub fn init_denoiser(params: &mut ParamSet, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) {
    assert!(hidden % 2 == 0, "hidden width must be even for the timestep embedding");
    init_linear(params, "denoiser/edge_embed", 2, hidden, rng);
    for l in 0..layers {
        let p = format!("denoiser/l{l}");
        for w in ["w1", "w2", "w3", "w4", "w5"] {
            init_matrix(params, &format!("{p}/{w}"), hidden, hidden, rng);
        }
        init_mlp2(params, &format!("{p}/edge_mlp"), hidden, hidden, hidden, rng);
        init_mlp2(params, &format!("{p}/time_mlp"), hidden, hidden, hidden, rng);
        init_bn(params, &format!("{p}/bn_e"), hidden);
        init_bn(params, &format!("{p}/bn_h"), hidden);
    }
    init_linear(params, "denoiser/head", hidden, 2, rng);
}

/// Hidden width recorded in a parameter set.
pub fn hidden_width(params: &ParamSet) -> usize {
    params.get("denoiser/edge_embed/w").ncols()
}

/// Number of message-passing layers recorded in a parameter set.
pub fn layer_count(params: &ParamSet) -> usize {
    let mut l = 0;
    while params.contains(&format!("denoiser/l{l}/w1")) {
        l += 1;
    }
    l
}

/// Sinusoidal timestep embedding: entry 2i is sin(t / 10000^(2i/d)),
/// entry 2i+1 the matching cosine.
pub fn timestep_embedding(t: usize, d: usize) -> Result<Array2<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "timestep embedding width must be positive and even, got {d}"
        )));
    }
    let mut e = Array2::zeros((1, d));
    for i in 0..d / 2 {
        let angle = t as f64 * 10000f64.powf(-2.0 * i as f64 / d as f64);
        e[[0, 2 * i]] = angle.sin();
        e[[0, 2 * i + 1]] = angle.cos();
    }
    Ok(e)
}

/// Flat pair layout: row i*n + j of an edge matrix is the pair (i, j).
fn pair_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(n * n);
    let mut dst = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            src.push(i);
            dst.push(j);
        }
    }
    (src, dst)
}

/// Row indices that map pair (i, j) to pair (j, i).
fn transpose_indices(n: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            idx.push(j * n + i);
        }
    }
    idx
}

/// Constant 0/1 matrix (n x n^2) whose product with flat edge rows sums
/// each node's incoming messages over all other nodes.
fn neighbor_selector(n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, n * n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[[i, i * n + j]] = 1.0;
            }
        }
    }
    m
}

/// Column (n^2 x 1) that is 0 on diagonal pairs and 1 elsewhere.
fn off_diagonal_column(n: usize) -> Array2<f64> {
    let mut c = Array2::ones((n * n, 1));
    for i in 0..n {
        c[[i * n + i, 0]] = 0.0;
    }
    c
}

/// One message-passing layer.  `h` is n x d node state, `e` is n^2 x d edge
/// state in flat pair layout, `t_emb` the 1 x d timestep embedding.
/// Returns the updated (node, edge) states.
pub fn denoiser_layer(
    tape: &mut Tape,
    params: &ParamSet,
    h: Id,
    e: Id,
    t_emb: &Array2<f64>,
    layer: usize,
    trainable: bool,
) -> Result<(Id, Id)> {
    let (n, d) = tape.value(h).dim();
    if tape.value(e).dim() != (n * n, d) {
        return Err(Error::DimensionMismatch(format!(
            "edge state is {:?}, expected {:?}",
            tape.value(e).dim(),
            (n * n, d)
        )));
    }
    if t_emb.dim() != (1, d) {
        return Err(Error::DimensionMismatch(format!(
            "timestep embedding is {:?}, expected {:?}",
            t_emb.dim(),
            (1, d)
        )));
    }
    let p = format!("denoiser/l{layer}");
    if !params.contains(&format!("{p}/w1")) {
        return Err(Error::InvalidArgument(format!(
            "denoiser has no layer {layer}"
        )));
    }

    // Edge update: normalise, transform, inject the timestep signal, then
    // combine with both endpoint embeddings.
    let e_bn = batchnorm(tape, e, params, &format!("{p}/bn_e"), trainable);
    let e_mlp = mlp2(tape, e_bn, params, &format!("{p}/edge_mlp"), trainable);
    let t_in = tape.constant(t_emb.clone());
    let t_mlp = mlp2(tape, t_in, params, &format!("{p}/time_mlp"), trainable);
    let mixed = tape.add_row(e_mlp, t_mlp);
    let w3 = tape.bind(params, &format!("{p}/w3"), trainable);
    let mixed = tape.matmul(mixed, w3);

    let (src_idx, dst_idx) = pair_indices(n);
    let w1 = tape.bind(params, &format!("{p}/w1"), trainable);
    let w2 = tape.bind(params, &format!("{p}/w2"), trainable);
    let h_src = tape.matmul(h, w1);
    let h_dst = tape.matmul(h, w2);
    let h_src = tape.gather_rows(h_src, &src_idx);
    let h_dst = tape.gather_rows(h_dst, &dst_idx);
    let endpoints = tape.add(h_src, h_dst);
    let e_new = tape.add(endpoints, mixed);

    // Node update: messages from every other node, gated per pair by the
    // fresh edge state.
    let w4 = tape.bind(params, &format!("{p}/w4"), trainable);
    let h_msg = tape.matmul(h, w4);
    let h_msg = tape.gather_rows(h_msg, &dst_idx);
    let gate = tape.sigmoid(e_new);
    let gated = tape.mul(gate, h_msg);
    let selector = tape.constant(neighbor_selector(n));
    let agg = tape.matmul(selector, gated);
    let w5 = tape.bind(params, &format!("{p}/w5"), trainable);
    let h_self = tape.matmul(h, w5);
    let pre = tape.add(h_self, agg);
    let pre_bn = batchnorm(tape, pre, params, &format!("{p}/bn_h"), trainable);
    let act = tape.relu(pre_bn);
    let h_new = tape.add(h, act);
    Ok((h_new, e_new))
}

/// Full forward pass up to the symmetrised per-pair logit (n^2 x 1 column;
/// entry (i, j) is the log-odds that the clean matrix links i and j).
pub fn x0_logits(
    tape: &mut Tape,
    params: &ParamSet,
    h0: Id,
    xt: &EdgeState,
    t: usize,
    trainable: bool,
) -> Result<Id> {
    let (n, d) = tape.value(h0).dim();
    if d != hidden_width(params) {
        return Err(Error::DimensionMismatch(format!(
            "node embeddings have width {d}, parameters expect {}",
            hidden_width(params)
        )));
    }
    if xt.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "corrupted matrix is {:?}, expected {:?}",
            xt.dim(),
            (n, n)
        )));
    }
    let layers = layer_count(params);
    if layers == 0 {
        return Err(Error::InvalidArgument("denoiser has no layers".into()));
    }

    // Seed edge embeddings from the one-hot corrupted entries.
    let mut onehot = Array2::zeros((n * n, 2));
    for i in 0..n {
        for j in 0..n {
            let v = xt[[i, j]];
            onehot[[i * n + j, 0]] = 1.0 - v;
            onehot[[i * n + j, 1]] = v;
        }
    }
    let oh = tape.constant(onehot);
    let mut e = linear(tape, oh, params, "denoiser/edge_embed", trainable);
    let t_emb = timestep_embedding(t, d)?;
    let mut h = h0;
    for l in 0..layers {
        let (h2, e2) = denoiser_layer(tape, params, h, e, &t_emb, l, trainable)?;
        h = h2;
        e = e2;
    }
    let z = linear(tape, e, params, "denoiser/head", trainable);
    // Two-class softmax reduces to the sigmoid of the logit difference;
    // averaging with the transposed pairs enforces symmetry.
    let z0 = tape.slice_cols(z, 0, 1);
    let z1 = tape.slice_cols(z, 1, 2);
    let diff = tape.sub(z1, z0);
    let flipped = tape.gather_rows(diff, &transpose_indices(n));
    let summed = tape.add(diff, flipped);
    Ok(tape.scale(summed, 0.5))
}

/// Per-pair probabilities (n^2 x 1 column) with the diagonal forced to zero.
pub fn x0_probability_column(
    tape: &mut Tape,
    params: &ParamSet,
    h0: Id,
    xt: &EdgeState,
    t: usize,
    trainable: bool,
) -> Result<Id> {
    let n = tape.value(h0).nrows();
    let logits = x0_logits(tape, params, h0, xt, t, trainable)?;
    let p = tape.sigmoid(logits);
    let mask = tape.constant(off_diagonal_column(n));
    Ok(tape.mul(p, mask))
}

/// Reshape a flat n^2 x 1 pair column into its n x n matrix.
pub fn column_to_square(col: &Array2<f64>, n: usize) -> Result<Array2<f64>> {
    if col.dim() != (n * n, 1) {
        return Err(Error::DimensionMismatch(format!(
            "pair column is {:?}, expected {:?}",
            col.dim(),
            (n * n, 1)
        )));
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = col[[i * n + j, 0]];
        }
    }
    Ok(out)
}

/// Predict clean-matrix probabilities for one corrupted state.
///
/// `h0` holds the customer rows of the frozen global encoder's output for
/// the same instance; the result is a pure function of its arguments.
pub fn predict_x0(
    instance: &CvrpInstance,
    h0: &Array2<f64>,
    xt: &EdgeState,
    t: usize,
    params: &ParamSet,
) -> Result<EdgeProbabilities> {
    let n = instance.customer_count();
    if h0.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "node embeddings have {} rows, instance has {n} customers",
            h0.nrows()
        )));
    }
    let mut tape = Tape::no_grad();
    let h = tape.constant(h0.clone());
    let p = x0_probability_column(&mut tape, params, h, xt, t, false)?;
    column_to_square(tape.value(p), n)
}

/// Mean binary cross-entropy between per-pair logits and a clean matrix,
/// over the strict upper triangle, as a scalar tape node.  Works directly
/// on logits (softplus form) so saturated probabilities cannot produce
/// infinities.
pub fn x0_training_loss(tape: &mut Tape, logits: Id, target: &ConstraintMatrix) -> Result<Id> {
    let n = target.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "training loss needs at least two customers".into(),
        ));
    }
    if tape.value(logits).dim() != (n * n, 1) {
        return Err(Error::DimensionMismatch(format!(
            "logit column is {:?}, expected {:?}",
            tape.value(logits).dim(),
            (n * n, 1)
        )));
    }
    // -ln sigmoid(z) = softplus(-z) and -ln(1 - sigmoid(z)) = softplus(z);
    // pick per pair via 0/1 selector columns over the strict upper triangle.
    let mut sel_pos = Array2::zeros((n * n, 1));
    let mut sel_neg = Array2::zeros((n * n, 1));
    for i in 1..=n {
        for j in (i + 1)..=n {
            let flat = (i - 1) * n + (j - 1);
            if target.same_route(i, j) {
                sel_pos[[flat, 0]] = 1.0;
            } else {
                sel_neg[[flat, 0]] = 1.0;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let neg = tape.scale(logits, -1.0);
    let sp_pos = softplus(tape, neg);
    let sp_neg = softplus(tape, logits);
    let wp = tape.constant(sel_pos);
    let wn = tape.constant(sel_neg);
    let lp = tape.mul(sp_pos, wp);
    let ln_ = tape.mul(sp_neg, wn);
    let total = tape.add(lp, ln_);
    let sum = tape.sum_all(total);
    Ok(tape.scale(sum, 1.0 / pairs))
}

/// Overflow-safe softplus: relu(x) + ln(1 + exp(x - 2 relu(x))), where the
/// exponent argument is -|x|.
fn softplus(tape: &mut Tape, x: Id) -> Id {
    let r = tape.relu(x);
    let r2 = tape.scale(r, -2.0);
    let neg_abs = tape.add(x, r2);
    let e = tape.exp(neg_abs);
    let e1 = tape.add_scalar(e, 1.0);
    let l = tape.ln(e1);
    tape.add(r, l)
}

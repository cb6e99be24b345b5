//! Two-branch instance encoder.
//!
//! The global branch is a frozen stack of full-attention layers trained
//! alongside the corruption-reversal network; the local branch re-attends
//! over the same projected features but only along pairs the predicted
//! same-route matrix allows (plus the depot and each node itself).  Summing
//! the branches through a small MLP yields per-node embeddings for the
//! route builder and, by averaging, a whole-instance embedding.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::constraint::ConstraintMatrix;
use crate::error::{Error, Result};
use crate::instance::CvrpInstance;
use crate::nn::{
    batchnorm, init_bn, init_linear, init_matrix, init_mlp2, linear, mlp2, multi_head_attention,
    Id, ParamSet, Tape, MASK_NEG,
};

/// Raw per-node features: row 0 is the depot (x, y, 0), row i is customer i
/// as (x, y, demand / capacity).
pub fn node_features(instance: &CvrpInstance) -> Array2<f64> {
    let n = instance.customer_count();
    let q = f64::from(instance.capacity);
    let mut f = Array2::zeros((n + 1, 3));
    for i in 0..=n {
        let [x, y] = instance.coord(i);
        f[[i, 0]] = x;
        f[[i, 1]] = y;
        f[[i, 2]] = if i == 0 {
            0.0
        } else {
            f64::from(instance.demand(i)) / q
        };
    }
    f
}

/// Register a fresh global branch under the `gat/` namespace.
pub fn init_gat(params: &mut ParamSet, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) {
    init_linear(params, "gat/input", 3, hidden, rng);
    for l in 0..layers {
        let p = format!("gat/l{l}");
        for w in ["wq", "wk", "wv", "wo"] {
            init_matrix(params, &format!("{p}/{w}"), hidden, hidden, rng);
        }
        init_bn(params, &format!("{p}/bn"), hidden);
    }
}

/// Register a fresh local branch under the `masked_encoder/` namespace.
pub fn init_masked_encoder(
    params: &mut ParamSet,
    hidden: usize,
    layers: usize,
    rng: &mut ChaCha8Rng,
) {
    for l in 0..layers {
        let p = format!("masked_encoder/l{l}");
        for w in ["wq", "wk", "wv"] {
            init_matrix(params, &format!("{p}/{w}"), hidden, hidden, rng);
        }
        init_bn(params, &format!("{p}/bn"), hidden);
    }
    init_mlp2(params, "masked_encoder/fuse", hidden, hidden, hidden, rng);
}

/// Number of global-branch layers recorded in a parameter set.
pub fn gat_layer_count(params: &ParamSet) -> usize {
    let mut l = 0;
    while params.contains(&format!("gat/l{l}/wq")) {
        l += 1;
    }
    l
}

/// Number of local-branch layers recorded in a parameter set.
pub fn masked_layer_count(params: &ParamSet) -> usize {
    let mut l = 0;
    while params.contains(&format!("masked_encoder/l{l}/wq")) {
        l += 1;
    }
    l
}

/// Global branch: input projection, then full-attention layers with output
/// combination, residual folded in before normalisation.
pub fn gat_forward_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    features: Id,
    heads: usize,
    trainable: bool,
) -> Result<Id> {
    if tape.value(features).ncols() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "feature matrix has {} columns, expected 3",
            tape.value(features).ncols()
        )));
    }
    let layers = gat_layer_count(params);
    if layers == 0 {
        return Err(Error::InvalidArgument("global branch has no layers".into()));
    }
    let mut h = linear(tape, features, params, "gat/input", trainable);
    for l in 0..layers {
        let p = format!("gat/l{l}");
        let wq = tape.bind(params, &format!("{p}/wq"), trainable);
        let wk = tape.bind(params, &format!("{p}/wk"), trainable);
        let wv = tape.bind(params, &format!("{p}/wv"), trainable);
        let mha = multi_head_attention(tape, h, h, wq, wk, wv, heads, None);
        let wo = tape.bind(params, &format!("{p}/wo"), trainable);
        let proj = tape.matmul(mha, wo);
        let res = tape.add(h, proj);
        h = batchnorm(tape, res, params, &format!("{p}/bn"), trainable);
    }
    Ok(h)
}

/// Evaluation-mode global branch over an instance's features.
pub fn gat_forward(
    instance: &CvrpInstance,
    params: &ParamSet,
    heads: usize,
) -> Result<Array2<f64>> {
    let mut tape = Tape::no_grad();
    let f = tape.constant(node_features(instance));
    let h = gat_forward_on_tape(&mut tape, params, f, heads, false)?;
    Ok(tape.value(h).clone())
}

/// Additive attention mask over depot + customers: entry (i, j) is 0 when i
/// may attend to j and strongly negative otherwise.  The depot row and
/// column and the diagonal are always allowed, so no row is ever empty.
pub fn depot_augmented_mask(mask: &ConstraintMatrix) -> Array2<f64> {
    let n = mask.len();
    let mut m = Array2::from_elem((n + 1, n + 1), MASK_NEG);
    for i in 0..=n {
        m[[i, 0]] = 0.0;
        m[[0, i]] = 0.0;
        m[[i, i]] = 0.0;
    }
    for i in 1..=n {
        for j in 1..=n {
            if i != j && mask.same_route(i, j) {
                m[[i, j]] = 0.0;
            }
        }
    }
    m
}

/// One local-branch layer: masked multi-head attention, residual folded in
/// before normalisation.  `allow` is the additive mask (0 or strongly
/// negative) whose diagonal must be allowed.
pub fn masked_attention_layer(
    tape: &mut Tape,
    params: &ParamSet,
    h: Id,
    allow: &Array2<f64>,
    layer: usize,
    heads: usize,
    trainable: bool,
) -> Result<Id> {
    let rows = tape.value(h).nrows();
    if allow.dim() != (rows, rows) {
        return Err(Error::DimensionMismatch(format!(
            "attention mask is {:?}, expected {:?}",
            allow.dim(),
            (rows, rows)
        )));
    }
    let p = format!("masked_encoder/l{layer}");
    if !params.contains(&format!("{p}/wq")) {
        return Err(Error::InvalidArgument(format!(
            "local branch has no layer {layer}"
        )));
    }
    let wq = tape.bind(params, &format!("{p}/wq"), trainable);
    let wk = tape.bind(params, &format!("{p}/wk"), trainable);
    let wv = tape.bind(params, &format!("{p}/wv"), trainable);
    let mha = multi_head_attention(tape, h, h, wq, wk, wv, heads, Some(allow));
    let res = tape.add(mha, h);
    Ok(batchnorm(tape, res, params, &format!("{p}/bn"), trainable))
}

/// Tape handles for everything the route builder consumes.
pub struct EncoderIds {
    pub h_global: Id,
    pub h_local: Id,
    pub h_fused: Id,
    /// 1 x d mean of the fused rows.
    pub graph_embedding: Id,
}

/// Owned evaluation-mode encoder output.
pub struct EncoderOutput {
    pub h_global: Array2<f64>,
    pub h_local: Array2<f64>,
    pub h_fused: Array2<f64>,
    pub graph_embedding: Array2<f64>,
}

impl EncoderOutput {
    /// Rebind the owned arrays as constants on a tape.
    pub fn on_tape(&self, tape: &mut Tape) -> EncoderIds {
        EncoderIds {
            h_global: tape.constant(self.h_global.clone()),
            h_local: tape.constant(self.h_local.clone()),
            h_fused: tape.constant(self.h_fused.clone()),
            graph_embedding: tape.constant(self.graph_embedding.clone()),
        }
    }
}

/// Run both branches and fuse them.  The global branch always runs frozen
/// in evaluation mode; `trainable_local` controls whether the local branch
/// and fusion MLP record gradients.
pub fn encode_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    instance: &CvrpInstance,
    mask: &ConstraintMatrix,
    heads: usize,
    trainable_local: bool,
) -> Result<EncoderIds> {
    let n = instance.customer_count();
    if mask.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "mask covers {} customers, instance has {n}",
            mask.len()
        )));
    }
    let feats = tape.constant(node_features(instance));
    let h_global = gat_forward_on_tape(tape, params, feats, heads, false)?;
    // The local branch starts from the same frozen input projection.
    let mut h_local = linear(tape, feats, params, "gat/input", false);
    let allow = depot_augmented_mask(mask);
    for l in 0..masked_layer_count(params) {
        h_local =
            masked_attention_layer(tape, params, h_local, &allow, l, heads, trainable_local)?;
    }
    let summed = tape.add(h_local, h_global);
    let h_fused = mlp2(tape, summed, params, "masked_encoder/fuse", trainable_local);
    let graph_embedding = tape.col_mean(h_fused);
    Ok(EncoderIds {
        h_global,
        h_local,
        h_fused,
        graph_embedding,
    })
}

/// Evaluation-mode encoder: a pure function of instance, mask and weights.
pub fn encode(
    instance: &CvrpInstance,
    mask: &ConstraintMatrix,
    params: &ParamSet,
    heads: usize,
) -> Result<EncoderOutput> {
    let mut tape = Tape::no_grad();
    let ids = encode_on_tape(&mut tape, params, instance, mask, heads, false)?;
    Ok(EncoderOutput {
        h_global: tape.value(ids.h_global).clone(),
        h_local: tape.value(ids.h_local).clone(),
        h_fused: tape.value(ids.h_fused).clone(),
        graph_embedding: tape.value(ids.graph_embedding).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::augment::augment8;
    use crate::instance::generate_instance;
    use crate::nn::softmax_rows;
    use crate::rng::substream;

    const HEADS: usize = 4;

    fn test_params(hidden: usize, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        let mut rng = substream(seed, "encoder-test/init");
        init_gat(&mut params, hidden, 3, &mut rng);
        init_masked_encoder(&mut params, hidden, 3, &mut rng);
        params
    }

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::zeros((rows, cols));
        for v in m.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    fn link(mask: &mut ConstraintMatrix, i: usize, j: usize) {
        mask.set(i, j, true);
        mask.set(j, i, true);
    }

    #[test]
    fn node_features_follow_layout() {
        let instance = CvrpInstance::new(
            [0.5, 0.25],
            vec![[0.1, 0.2], [0.3, 0.4]],
            vec![9, 3],
            9,
        )
        .unwrap();
        let f = node_features(&instance);
        assert_eq!(f.dim(), (3, 3));
        assert_eq!(f[[0, 0]], 0.5);
        assert_eq!(f[[0, 1]], 0.25);
        assert_eq!(f[[0, 2]], 0.0);
        // A demand equal to the capacity normalises to exactly 1.
        assert_eq!(f[[1, 2]], 1.0);
        assert!((f[[2, 2]] - 3.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn demand_features_identical_across_augmented_variants() {
        let instance = generate_instance(12, 77).unwrap();
        for variant in augment8(&instance) {
            let f = node_features(&variant);
            let base = node_features(&instance);
            for i in 0..f.nrows() {
                assert_eq!(f[[i, 2]], base[[i, 2]]);
            }
        }
    }

    #[test]
    fn gat_output_has_model_width() {
        let params = test_params(16, 21);
        let instance = generate_instance(9, 78).unwrap();
        let h = gat_forward(&instance, &params, HEADS).unwrap();
        assert_eq!(h.dim(), (10, 16));
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gat_is_equivariant_over_customer_rows() {
        let params = test_params(16, 22);
        let instance = generate_instance(8, 79).unwrap();
        let h = gat_forward(&instance, &params, HEADS).unwrap();

        // Permute the customers of the instance itself.
        let perm: Vec<usize> = vec![4, 1, 7, 0, 5, 2, 6, 3];
        let coords: Vec<[f64; 2]> = perm.iter().map(|&i| instance.coords[i]).collect();
        let demands: Vec<u32> = perm.iter().map(|&i| instance.demands[i]).collect();
        let permuted =
            CvrpInstance::new(instance.depot, coords, demands, instance.capacity).unwrap();
        let hp = gat_forward(&permuted, &params, HEADS).unwrap();

        let depot_diff = (&h.row(0) - &hp.row(0)).mapv(f64::abs).sum();
        assert!(depot_diff < 1e-5);
        for (new_row, &old) in perm.iter().enumerate() {
            let diff = (&h.row(old + 1) - &hp.row(new_row + 1)).mapv(f64::abs).sum();
            assert!(diff < 1e-5, "customer row {old} differs by {diff}");
        }
    }

    #[test]
    fn vacuous_mask_equals_unmasked_attention() {
        let params = test_params(16, 23);
        let mut rng = substream(23, "encoder-test/vacuous");
        let h_in = rand_matrix(6, 16, &mut rng);
        // All customers on one route: every pair allowed.
        let mut mask = ConstraintMatrix::zeros(5);
        for i in 1..=5 {
            for j in (i + 1)..=5 {
                link(&mut mask, i, j);
            }
        }
        let allow = depot_augmented_mask(&mask);
        assert!(allow.iter().all(|&v| v == 0.0));

        let mut tape = Tape::no_grad();
        let h = tape.constant(h_in.clone());
        let masked =
            masked_attention_layer(&mut tape, &params, h, &allow, 0, HEADS, false).unwrap();

        // Reference: identical layer maths with no mask at all.
        let mut tape2 = Tape::no_grad();
        let h2 = tape2.constant(h_in);
        let wq = tape2.bind(&params, "masked_encoder/l0/wq", false);
        let wk = tape2.bind(&params, "masked_encoder/l0/wk", false);
        let wv = tape2.bind(&params, "masked_encoder/l0/wv", false);
        let mha = multi_head_attention(&mut tape2, h2, h2, wq, wk, wv, HEADS, None);
        let res = tape2.add(mha, h2);
        let reference = batchnorm(&mut tape2, res, &params, "masked_encoder/l0/bn", false);

        let diff = (tape.value(masked) - tape2.value(reference))
            .mapv(f64::abs)
            .sum();
        assert!(diff < 1e-6, "vacuous mask changed the output by {diff}");
    }

    #[test]
    fn attention_weights_over_allowed_set_sum_to_one() {
        let mut mask = ConstraintMatrix::zeros(4);
        link(&mut mask, 1, 2);
        link(&mut mask, 3, 4);
        let allow = depot_augmented_mask(&mask);
        let mut rng = substream(24, "encoder-test/weights");
        let logits = rand_matrix(5, 5, &mut rng);
        let mut tape = Tape::no_grad();
        let z = tape.constant(logits);
        let p = softmax_rows(&mut tape, z, Some(&allow));
        let v = tape.value(p);
        for i in 0..5 {
            assert!((v.row(i).sum() - 1.0).abs() < 1e-6);
        }
        // Customer 1 (row 1) may attend depot, itself and customer 2 only.
        assert_eq!(v[[1, 3]], 0.0);
        assert_eq!(v[[1, 4]], 0.0);
        assert!(v[[1, 0]] > 0.0 && v[[1, 1]] > 0.0 && v[[1, 2]] > 0.0);
    }

    #[test]
    fn block_mask_isolates_blocks_across_stacked_attention() {
        // Pure block-diagonal allowance over 7 rows (depot grouped with the
        // first block) stays closed under composition of the attention
        // sublayers, so no information crosses blocks through attention no
        // matter how many layers run.  The normalisation that follows in
        // the full layer couples all rows through column statistics, so the
        // isolation claim belongs to the attention step alone.
        let params = test_params(16, 25);
        let mut rng = substream(25, "encoder-test/isolation");
        let rows = 7;
        let blocks: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]];
        let mut allow = Array2::from_elem((rows, rows), MASK_NEG);
        for block in &blocks {
            for &i in block {
                for &j in block {
                    allow[[i, j]] = 0.0;
                }
            }
        }
        let h_in = rand_matrix(rows, 16, &mut rng);
        let run = |input: &Array2<f64>| -> Array2<f64> {
            let mut tape = Tape::no_grad();
            let mut h = tape.constant(input.clone());
            for l in 0..3 {
                let p = format!("masked_encoder/l{l}");
                let wq = tape.bind(&params, &format!("{p}/wq"), false);
                let wk = tape.bind(&params, &format!("{p}/wk"), false);
                let wv = tape.bind(&params, &format!("{p}/wv"), false);
                let mha =
                    multi_head_attention(&mut tape, h, h, wq, wk, wv, HEADS, Some(&allow));
                h = tape.add(mha, h);
            }
            tape.value(h).clone()
        };
        let base = run(&h_in);
        // Perturb a middle-block row; first and last blocks must not move.
        let mut bumped = h_in.clone();
        bumped[[3, 5]] += 0.37;
        let out = run(&bumped);
        for &i in blocks[0].iter().chain(blocks[2].iter()) {
            let diff = (&base.row(i) - &out.row(i)).mapv(f64::abs).sum();
            assert!(diff < 1e-7, "row {i} moved by {diff}");
        }
        let moved = (&base.row(4) - &out.row(4)).mapv(f64::abs).sum();
        assert!(moved > 1e-6, "same-block row should react");
    }

    #[test]
    fn zero_mask_blocks_cross_customer_attention() {
        let params = test_params(16, 26);
        let mut rng = substream(26, "encoder-test/zero-mask");
        let mask = ConstraintMatrix::zeros(5);
        let allow = depot_augmented_mask(&mask);
        let h_in = rand_matrix(6, 16, &mut rng);
        // Attention plus residual, without the row-coupling normalisation.
        let run = |input: &Array2<f64>| -> Array2<f64> {
            let mut tape = Tape::no_grad();
            let h = tape.constant(input.clone());
            let wq = tape.bind(&params, "masked_encoder/l0/wq", false);
            let wk = tape.bind(&params, "masked_encoder/l0/wk", false);
            let wv = tape.bind(&params, "masked_encoder/l0/wv", false);
            let mha = multi_head_attention(&mut tape, h, h, wq, wk, wv, HEADS, Some(&allow));
            let out = tape.add(mha, h);
            tape.value(out).clone()
        };
        let base = run(&h_in);
        let mut bumped = h_in.clone();
        bumped[[2, 0]] += 0.5;
        let out = run(&bumped);
        // Other customers see only themselves and the depot, whose inputs
        // did not change; the depot row attends everyone and may move.
        for i in [1usize, 3, 4, 5] {
            let diff = (&base.row(i) - &out.row(i)).mapv(f64::abs).sum();
            assert!(diff < 1e-12, "customer row {i} moved by {diff}");
        }
        let depot_moved = (&base.row(0) - &out.row(0)).mapv(f64::abs).sum();
        assert!(depot_moved > 1e-6);
    }

    #[test]
    fn encode_exposes_consistent_fused_output() {
        let params = test_params(16, 27);
        let instance = generate_instance(7, 80).unwrap();
        let mut mask = ConstraintMatrix::zeros(7);
        link(&mut mask, 1, 2);
        link(&mut mask, 6, 7);
        let out = encode(&instance, &mask, &params, HEADS).unwrap();
        assert_eq!(out.h_global.dim(), (8, 16));
        assert_eq!(out.h_local.dim(), (8, 16));
        assert_eq!(out.h_fused.dim(), (8, 16));
        assert_eq!(out.graph_embedding.dim(), (1, 16));
        // The whole-instance embedding is exactly the mean of fused rows.
        for c in 0..16 {
            let mean: f64 = (0..8).map(|r| out.h_fused[[r, c]]).sum::<f64>() / 8.0;
            assert!((out.graph_embedding[[0, c]] - mean).abs() < 1e-6);
        }
        assert!(out.h_fused.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn graph_embedding_invariant_under_customer_permutation() {
        let params = test_params(16, 28);
        let instance = generate_instance(6, 81).unwrap();
        let mut mask = ConstraintMatrix::zeros(6);
        link(&mut mask, 1, 4);
        link(&mut mask, 2, 3);
        link(&mut mask, 5, 6);
        let out = encode(&instance, &mask, &params, HEADS).unwrap();

        let perm: Vec<usize> = vec![3, 5, 0, 1, 4, 2]; // new position -> old index
        let coords: Vec<[f64; 2]> = perm.iter().map(|&i| instance.coords[i]).collect();
        let demands: Vec<u32> = perm.iter().map(|&i| instance.demands[i]).collect();
        let permuted =
            CvrpInstance::new(instance.depot, coords, demands, instance.capacity).unwrap();
        let mut mask_p = ConstraintMatrix::zeros(6);
        for a in 0..6 {
            for b in 0..6 {
                if a != b && mask.same_route(perm[a] + 1, perm[b] + 1) {
                    mask_p.set(a + 1, b + 1, true);
                }
            }
        }
        let out_p = encode(&permuted, &mask_p, &params, HEADS).unwrap();
        let diff = (&out.graph_embedding - &out_p.graph_embedding)
            .mapv(f64::abs)
            .sum();
        assert!(diff < 1e-5, "graph embedding moved by {diff}");
        // Fused rows permute with the customers.
        for new_row in 0..6 {
            let old = perm[new_row] + 1;
            let d = (&out.h_fused.row(old) - &out_p.h_fused.row(new_row + 1))
                .mapv(f64::abs)
                .sum();
            assert!(d < 1e-5);
        }
    }
}

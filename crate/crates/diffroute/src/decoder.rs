//! Autoregressive route construction with two attention pointers.
//!
//! Decoding walks node by node: a state tracks the visited set, the last
//! node and the remaining vehicle capacity.  At each step two attention
//! pointers read the encoder's embeddings — a local one restricted to
//! same-route candidates of the last node (plus the depot), a global one
//! over everything feasible — and their outputs fuse into a context that a
//! final clipped single-head layer turns into a distribution over nodes.
//! A heuristic detour-saving bias is added to customer-to-customer logits.
//! Feasibility masking makes every emitted tour valid by construction.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::constraint::ConstraintMatrix;
use crate::encoder::{EncoderIds, EncoderOutput};
use crate::error::{Error, Result};
use crate::instance::{CvrpInstance, CvrpSolution};
use crate::nn::{
    init_matrix, init_mlp2, mlp2, multi_head_attention, Id, ParamSet, Tape, MASK_NEG,
};

/// Default logit clipping constant.
pub const DEFAULT_CLIP: f64 = 10.0;
/// Floor applied to the detour saving before its logarithm.
pub const SAVING_FLOOR: f64 = 1e-6;

/// Scalar knobs the decoder needs at every call.
#[derive(Clone, Copy)]
pub struct DecoderSettings {
    pub heads: usize,
    pub clip: f64,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        DecoderSettings {
            heads: 8,
            clip: DEFAULT_CLIP,
        }
    }
}

/// Register fresh decoder weights under the `decoder/` namespace.
pub fn init_decoder(params: &mut ParamSet, hidden: usize, rng: &mut ChaCha8Rng) {
    init_mlp2(params, "decoder/cap", 1, hidden, hidden, rng);
    for side in ["local", "global"] {
        for w in ["wq", "wk", "wv"] {
            init_matrix(params, &format!("decoder/{side}/{w}"), hidden, hidden, rng);
        }
    }
    init_mlp2(params, "decoder/aux", hidden, hidden, hidden, rng);
    init_matrix(params, "decoder/final/wq", hidden, hidden, rng);
    init_matrix(params, "decoder/final/wk", hidden, hidden, rng);
}

/// Detour saving of serving i and j consecutively instead of via the depot;
/// zero whenever either endpoint is the depot.
pub fn saving(instance: &CvrpInstance, i: usize, j: usize) -> f64 {
    if i == 0 || j == 0 {
        0.0
    } else {
        instance.distance(0, i) + instance.distance(0, j) - instance.distance(i, j)
    }
}

/// Mutable decoding state for one tour under construction.
#[derive(Clone)]
pub struct DecoderState {
    visited: Vec<bool>,
    visited_count: usize,
    last_node: usize,
    capacity: u32,
    remaining_capacity: u32,
    routes: Vec<Vec<usize>>,
    current_route: Vec<usize>,
}

impl DecoderState {
    /// Fresh state: vehicle at the depot, nothing visited.
    pub fn new(instance: &CvrpInstance) -> Self {
        DecoderState {
            visited: vec![false; instance.customer_count() + 1],
            visited_count: 0,
            last_node: 0,
            capacity: instance.capacity,
            remaining_capacity: instance.capacity,
            routes: Vec::new(),
            current_route: Vec::new(),
        }
    }

    /// Fresh state with `start` force-visited as the first action.
    pub fn start_at(instance: &CvrpInstance, start: usize) -> Result<Self> {
        let mut state = DecoderState::new(instance);
        if start == 0 || start > instance.customer_count() {
            return Err(Error::InvalidArgument(format!(
                "start node {start} is not a customer"
            )));
        }
        state.apply(instance, start)?;
        Ok(state)
    }

    pub fn last_node(&self) -> usize {
        self.last_node
    }

    pub fn remaining_capacity(&self) -> u32 {
        self.remaining_capacity
    }

    /// Remaining capacity as a fraction of the vehicle capacity.
    pub fn capacity_fraction(&self) -> f64 {
        f64::from(self.remaining_capacity) / f64::from(self.capacity)
    }

    pub fn is_visited(&self, customer: usize) -> bool {
        self.visited[customer]
    }

    /// Decoding ends once every customer is visited and the vehicle is home.
    pub fn is_terminated(&self) -> bool {
        self.visited_count == self.visited.len() - 1 && self.last_node == 0
    }

    /// Apply one action: 0 returns to the depot, anything else visits that
    /// customer.  Rejects repeat visits, overloads and depot-to-depot moves.
    pub fn apply(&mut self, instance: &CvrpInstance, action: usize) -> Result<()> {
        if action == 0 {
            if self.last_node == 0 {
                return Err(Error::InvalidArgument(
                    "vehicle is already at the depot".into(),
                ));
            }
            self.routes.push(std::mem::take(&mut self.current_route));
            self.remaining_capacity = instance.capacity;
            self.last_node = 0;
            return Ok(());
        }
        if action > instance.customer_count() {
            return Err(Error::InvalidArgument(format!(
                "action {action} out of range"
            )));
        }
        if self.visited[action] {
            return Err(Error::InvalidArgument(format!(
                "customer {action} already visited"
            )));
        }
        let demand = instance.demand(action);
        if demand > self.remaining_capacity {
            return Err(Error::InvalidArgument(format!(
                "customer {action} needs {demand}, only {} left",
                self.remaining_capacity
            )));
        }
        self.visited[action] = true;
        self.visited_count += 1;
        self.remaining_capacity -= demand;
        self.current_route.push(action);
        self.last_node = action;
        Ok(())
    }

    /// Emit the constructed solution, closing any route still open.
    pub fn into_solution(mut self) -> CvrpSolution {
        if !self.current_route.is_empty() {
            self.routes.push(std::mem::take(&mut self.current_route));
        }
        CvrpSolution {
            routes: self.routes,
        }
    }
}

/// Action mask over nodes 0..=N: customer j allowed iff unvisited and its
/// demand fits the remaining capacity; the depot allowed iff the vehicle is
/// not already there.
pub fn feasible_actions(state: &DecoderState, instance: &CvrpInstance) -> Result<Vec<bool>> {
    if state.is_terminated() {
        return Err(Error::InvalidArgument(
            "decoding already terminated".into(),
        ));
    }
    let n = instance.customer_count();
    let mut mask = vec![false; n + 1];
    mask[0] = state.last_node != 0;
    for j in 1..=n {
        mask[j] = !state.visited[j] && instance.demand(j) <= state.remaining_capacity;
    }
    Ok(mask)
}

/// Local-pointer candidate set: feasible nodes the last node's matrix row
/// allows, plus the depot; from the depot, every feasible customer.
fn local_allowed(state: &DecoderState, feasible: &[bool], mask: &ConstraintMatrix) -> Vec<bool> {
    if state.last_node == 0 {
        return feasible.to_vec();
    }
    let mut out = vec![false; feasible.len()];
    out[0] = feasible[0];
    for j in 1..feasible.len() {
        out[j] = feasible[j] && mask.same_route(state.last_node, j);
    }
    out
}

/// Per-step batched inputs: one row per tour being decoded.
struct StepInputs {
    last_nodes: Vec<usize>,
    capacity_fractions: Vec<f64>,
    feasible: Vec<Vec<bool>>,
    local: Vec<Vec<bool>>,
}

fn additive_mask(allowed: &[Vec<bool>]) -> Array2<f64> {
    let rows = allowed.len();
    let cols = allowed[0].len();
    let mut m = Array2::from_elem((rows, cols), MASK_NEG);
    for (r, row) in allowed.iter().enumerate() {
        for (c, &ok) in row.iter().enumerate() {
            if ok {
                m[[r, c]] = 0.0;
            }
        }
    }
    m
}

/// Context sums for both pointers: rows of the local-branch embeddings for
/// the depot and the last node, plus the capacity embedding; the global
/// variant additionally adds the whole-instance embedding.
fn batch_contexts(
    tape: &mut Tape,
    params: &ParamSet,
    h_local: Id,
    graph: Id,
    last_nodes: &[usize],
    capacity_fractions: &[f64],
    trainable: bool,
) -> (Id, Id) {
    let s = last_nodes.len();
    let mut cap = Array2::zeros((s, 1));
    for (r, &f) in capacity_fractions.iter().enumerate() {
        cap[[r, 0]] = f;
    }
    let cap = tape.constant(cap);
    let cap_emb = mlp2(tape, cap, params, "decoder/cap", trainable);
    let depot_rows = tape.gather_rows(h_local, &vec![0; s]);
    let last_rows = tape.gather_rows(h_local, last_nodes);
    let sum = tape.add(depot_rows, last_rows);
    let ctx_local = tape.add(sum, cap_emb);
    let ctx_global = tape.add_row(ctx_local, graph);
    (ctx_global, ctx_local)
}

/// Dual-pointer fusion: each pointer attends over its candidate set with
/// its own weights, the outputs are summed, and an auxiliary transformation
/// of the raw local context is added on top.
fn batch_pointer_context(
    tape: &mut Tape,
    params: &ParamSet,
    ctx_global: Id,
    ctx_local: Id,
    h_fused: Id,
    inputs: &StepInputs,
    settings: DecoderSettings,
    trainable: bool,
) -> Id {
    let local_mask = additive_mask(&inputs.local);
    let feas_mask = additive_mask(&inputs.feasible);
    let lq = tape.bind(params, "decoder/local/wq", trainable);
    let lk = tape.bind(params, "decoder/local/wk", trainable);
    let lv = tape.bind(params, "decoder/local/wv", trainable);
    let attn_local = multi_head_attention(
        tape,
        ctx_local,
        h_fused,
        lq,
        lk,
        lv,
        settings.heads,
        Some(&local_mask),
    );
    let gq = tape.bind(params, "decoder/global/wq", trainable);
    let gk = tape.bind(params, "decoder/global/wk", trainable);
    let gv = tape.bind(params, "decoder/global/wv", trainable);
    let attn_global = multi_head_attention(
        tape,
        ctx_global,
        h_fused,
        gq,
        gk,
        gv,
        settings.heads,
        Some(&feas_mask),
    );
    let fused = tape.add(attn_local, attn_global);
    let aux = mlp2(tape, ctx_local, params, "decoder/aux", trainable);
    tape.add(aux, fused)
}

/// Clipped final scores: single-head compatibility between the fused
/// context and every node's static embedding, plus the log detour-saving
/// bias on customer-to-customer moves.
fn batch_logits(
    tape: &mut Tape,
    params: &ParamSet,
    pointer_ctx: Id,
    h_fused: Id,
    instance: &CvrpInstance,
    inputs: &StepInputs,
    settings: DecoderSettings,
    trainable: bool,
) -> Id {
    let d = tape.value(h_fused).ncols();
    let wq = tape.bind(params, "decoder/final/wq", trainable);
    let wk = tape.bind(params, "decoder/final/wk", trainable);
    let q = tape.matmul(pointer_ctx, wq);
    let k = tape.matmul(h_fused, wk);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());

    let s = inputs.last_nodes.len();
    let n = instance.customer_count();
    let mut bias = Array2::zeros((s, n + 1));
    for (r, &last) in inputs.last_nodes.iter().enumerate() {
        if last == 0 {
            continue;
        }
        for j in 1..=n {
            bias[[r, j]] = saving(instance, last, j).max(SAVING_FLOOR).ln();
        }
    }
    let bias = tape.constant(bias);
    let u = tape.add(scores, bias);
    let t = tape.tanh(u);
    tape.scale(t, settings.clip)
}

fn batch_distribution(
    tape: &mut Tape,
    params: &ParamSet,
    enc: &EncoderIds,
    instance: &CvrpInstance,
    inputs: &StepInputs,
    settings: DecoderSettings,
    trainable: bool,
) -> Id {
    let (ctx_global, ctx_local) = batch_contexts(
        tape,
        params,
        enc.h_local,
        enc.graph_embedding,
        &inputs.last_nodes,
        &inputs.capacity_fractions,
        trainable,
    );
    let pointer_ctx = batch_pointer_context(
        tape,
        params,
        ctx_global,
        ctx_local,
        enc.h_fused,
        inputs,
        settings,
        trainable,
    );
    let logits = batch_logits(
        tape,
        params,
        pointer_ctx,
        enc.h_fused,
        instance,
        inputs,
        settings,
        trainable,
    );
    let feas_mask = additive_mask(&inputs.feasible);
    crate::nn::softmax_rows(tape, logits, Some(&feas_mask))
}

fn step_inputs_for(
    states: &[DecoderState],
    instance: &CvrpInstance,
    mask: &ConstraintMatrix,
) -> Result<StepInputs> {
    let n = instance.customer_count();
    let mut inputs = StepInputs {
        last_nodes: Vec::with_capacity(states.len()),
        capacity_fractions: Vec::with_capacity(states.len()),
        feasible: Vec::with_capacity(states.len()),
        local: Vec::with_capacity(states.len()),
    };
    for state in states {
        if state.is_terminated() {
            // Finished tours idle on a depot-only singleton: its softmax
            // weight is exactly 1, so the log-probability picks up zero.
            let mut depot_only = vec![false; n + 1];
            depot_only[0] = true;
            inputs.last_nodes.push(0);
            inputs.capacity_fractions.push(1.0);
            inputs.feasible.push(depot_only.clone());
            inputs.local.push(depot_only);
        } else {
            let feasible = feasible_actions(state, instance)?;
            let local = local_allowed(state, &feasible, mask);
            inputs.last_nodes.push(state.last_node);
            inputs.capacity_fractions.push(state.capacity_fraction());
            inputs.feasible.push(feasible);
            inputs.local.push(local);
        }
    }
    Ok(inputs)
}

/// How actions are chosen during a rollout.
pub enum DecodePolicy<'a> {
    /// Highest-probability action, ties to the lowest index.
    Greedy,
    /// Sample from the step distribution.
    Sample,
    /// Replay fixed action sequences (one per start, excluding the forced
    /// start visit).
    Replay(&'a [Vec<usize>]),
}

/// Result of decoding one instance from several starts on one tape.
pub struct RolloutBatch {
    pub solutions: Vec<CvrpSolution>,
    /// Chosen actions per start, excluding the forced start visit.
    pub actions: Vec<Vec<usize>>,
    /// S x 1 node: per-start sums of chosen-action log-probabilities.
    pub log_prob_sums: Id,
}

/// Decode one instance from every listed start simultaneously.  All starts
/// share the per-step network evaluation; each maintains its own state.
/// With `trainable` the accumulated log-probabilities carry gradients.
#[allow(clippy::too_many_arguments)]
pub fn rollout_batch_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    enc: &EncoderIds,
    instance: &CvrpInstance,
    mask: &ConstraintMatrix,
    starts: &[usize],
    policy: DecodePolicy,
    settings: DecoderSettings,
    trainable: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<RolloutBatch> {
    if starts.is_empty() {
        return Err(Error::InvalidArgument("no start nodes given".into()));
    }
    if let DecodePolicy::Replay(seqs) = &policy {
        if seqs.len() != starts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} replay sequences for {} starts",
                seqs.len(),
                starts.len()
            )));
        }
    }
    let n = instance.customer_count();
    let s = starts.len();
    let mut states = starts
        .iter()
        .map(|&start| DecoderState::start_at(instance, start))
        .collect::<Result<Vec<_>>>()?;
    let mut actions: Vec<Vec<usize>> = vec![Vec::new(); s];
    let mut log_prob_sums = tape.constant(Array2::zeros((s, 1)));
    // Every step visits a customer or closes a route, so 2N+1 steps always
    // finish; the guard turns a logic bug into an error instead of a hang.
    let max_steps = 2 * n + 2;
    for _ in 0..max_steps {
        if states.iter().all(DecoderState::is_terminated) {
            break;
        }
        let inputs = step_inputs_for(&states, instance, mask)?;
        let probs = batch_distribution(tape, params, enc, instance, &inputs, settings, trainable);
        let mut chosen = vec![0usize; s];
        for (r, state) in states.iter().enumerate() {
            if state.is_terminated() {
                continue;
            }
            let row = tape.value(probs).row(r).to_owned();
            chosen[r] = match &policy {
                DecodePolicy::Greedy => {
                    let mut best = 0usize;
                    let mut best_p = f64::NEG_INFINITY;
                    for (j, &p) in row.iter().enumerate() {
                        if inputs.feasible[r][j] && p > best_p {
                            best = j;
                            best_p = p;
                        }
                    }
                    best
                }
                DecodePolicy::Sample => {
                    let rng = rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::InvalidArgument("sampling needs an rng".into()))?;
                    let draw: f64 = rng.gen_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut pick = None;
                    for (j, &p) in row.iter().enumerate() {
                        if !inputs.feasible[r][j] {
                            continue;
                        }
                        acc += p;
                        if draw < acc {
                            pick = Some(j);
                            break;
                        }
                    }
                    // Floating-point shortfall: fall back to the last
                    // feasible action.
                    pick.unwrap_or_else(|| {
                        (0..row.len()).rev().find(|&j| inputs.feasible[r][j]).unwrap()
                    })
                }
                DecodePolicy::Replay(seqs) => {
                    let step = actions[r].len();
                    *seqs[r].get(step).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "replay sequence for start {} exhausted at step {step}",
                            starts[r]
                        ))
                    })?
                }
            };
        }
        // Log-probability of the chosen action per row; terminated rows
        // point at their singleton depot whose probability is exactly 1.
        let mut onehot = Array2::zeros((s, n + 1));
        for (r, &a) in chosen.iter().enumerate() {
            onehot[[r, a]] = 1.0;
        }
        let sel = tape.constant(onehot);
        let picked = tape.mul(probs, sel);
        let row_p = tape.row_sum(picked);
        let lnp = tape.ln(row_p);
        log_prob_sums = tape.add(log_prob_sums, lnp);
        for (r, state) in states.iter_mut().enumerate() {
            if state.is_terminated() {
                continue;
            }
            state.apply(instance, chosen[r])?;
            actions[r].push(chosen[r]);
        }
    }
    if !states.iter().all(DecoderState::is_terminated) {
        return Err(Error::Numerical(
            "decoding failed to terminate within its step budget".into(),
        ));
    }
    let solutions = states.into_iter().map(DecoderState::into_solution).collect();
    Ok(RolloutBatch {
        solutions,
        actions,
        log_prob_sums,
    })
}

fn lift_encoder(tape: &mut Tape, enc: &EncoderOutput) -> EncoderIds {
    enc.on_tape(tape)
}

/// Per-node static decoder inputs: the encoder's fused embeddings, fixed
/// for the whole decode.
pub fn static_embeddings(enc: &EncoderOutput) -> &Array2<f64> {
    &enc.h_fused
}

/// The two pointer contexts for one state, as (global, local) 1 x d rows.
/// Their difference is exactly the whole-instance embedding.
pub fn context_vectors(
    state: &DecoderState,
    enc: &EncoderOutput,
    params: &ParamSet,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut tape = Tape::no_grad();
    let ids = lift_encoder(&mut tape, enc);
    let (g, l) = batch_contexts(
        &mut tape,
        params,
        ids.h_local,
        ids.graph_embedding,
        &[state.last_node],
        &[state.capacity_fraction()],
        false,
    );
    Ok((tape.value(g).clone(), tape.value(l).clone()))
}

/// The fused dual-pointer context for one state, as a 1 x d row.
pub fn dual_pointer_context(
    state: &DecoderState,
    instance: &CvrpInstance,
    enc: &EncoderOutput,
    mask: &ConstraintMatrix,
    params: &ParamSet,
    settings: DecoderSettings,
) -> Result<Array2<f64>> {
    if state.is_terminated() {
        return Err(Error::InvalidArgument(
            "decoding already terminated".into(),
        ));
    }
    let mut tape = Tape::no_grad();
    let ids = lift_encoder(&mut tape, enc);
    let inputs = step_inputs_for(std::slice::from_ref(state), instance, mask)?;
    let (g, l) = batch_contexts(
        &mut tape,
        params,
        ids.h_local,
        ids.graph_embedding,
        &inputs.last_nodes,
        &inputs.capacity_fractions,
        false,
    );
    let ctx = batch_pointer_context(
        &mut tape, params, g, l, ids.h_fused, &inputs, settings, false,
    );
    Ok(tape.value(ctx).clone())
}

/// Clipped pre-softmax scores for one state, as (node, logit) pairs over
/// the feasible actions only.
pub fn step_logits(
    state: &DecoderState,
    instance: &CvrpInstance,
    enc: &EncoderOutput,
    mask: &ConstraintMatrix,
    params: &ParamSet,
    settings: DecoderSettings,
) -> Result<Vec<(usize, f64)>> {
    if state.is_terminated() {
        return Err(Error::InvalidArgument(
            "decoding already terminated".into(),
        ));
    }
    let mut tape = Tape::no_grad();
    let ids = lift_encoder(&mut tape, enc);
    let inputs = step_inputs_for(std::slice::from_ref(state), instance, mask)?;
    let (g, l) = batch_contexts(
        &mut tape,
        params,
        ids.h_local,
        ids.graph_embedding,
        &inputs.last_nodes,
        &inputs.capacity_fractions,
        false,
    );
    let ctx = batch_pointer_context(
        &mut tape, params, g, l, ids.h_fused, &inputs, settings, false,
    );
    let logits = batch_logits(
        &mut tape, params, ctx, ids.h_fused, instance, &inputs, settings, false,
    );
    let row = tape.value(logits).row(0).to_owned();
    Ok(inputs.feasible[0]
        .iter()
        .enumerate()
        .filter(|&(_, &ok)| ok)
        .map(|(j, _)| (j, row[j]))
        .collect())
}

/// Probability of each action for one state; infeasible actions get
/// exactly zero and the rest sum to one.
pub fn step_distribution(
    state: &DecoderState,
    instance: &CvrpInstance,
    enc: &EncoderOutput,
    mask: &ConstraintMatrix,
    params: &ParamSet,
    settings: DecoderSettings,
) -> Result<Vec<f64>> {
    if state.is_terminated() {
        return Err(Error::InvalidArgument(
            "decoding already terminated".into(),
        ));
    }
    let mut tape = Tape::no_grad();
    let ids = lift_encoder(&mut tape, enc);
    let inputs = step_inputs_for(std::slice::from_ref(state), instance, mask)?;
    let probs = batch_distribution(&mut tape, params, &ids, instance, &inputs, settings, false);
    Ok(tape.value(probs).row(0).to_vec())
}

/// Decode one tour from `start`, returning the solution together with the
/// log-probability of each chosen action (the forced start visit excluded).
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    instance: &CvrpInstance,
    enc: &EncoderOutput,
    mask: &ConstraintMatrix,
    params: &ParamSet,
    settings: DecoderSettings,
    start: usize,
    policy: DecodePolicy,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(CvrpSolution, Vec<f64>)> {
    let mut state = DecoderState::start_at(instance, start)?;
    let mut log_probs = Vec::new();
    let max_steps = 2 * instance.customer_count() + 2;
    for step in 0..=max_steps {
        if state.is_terminated() {
            return Ok((state.into_solution(), log_probs));
        }
        let probs = step_distribution(&state, instance, enc, mask, params, settings)?;
        let feasible = feasible_actions(&state, instance)?;
        let action = match &policy {
            DecodePolicy::Greedy => {
                let mut best = 0usize;
                let mut best_p = f64::NEG_INFINITY;
                for (j, &p) in probs.iter().enumerate() {
                    if feasible[j] && p > best_p {
                        best = j;
                        best_p = p;
                    }
                }
                best
            }
            DecodePolicy::Sample => {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::InvalidArgument("sampling needs an rng".into()))?;
                let draw: f64 = rng.gen_range(0.0..1.0);
                let mut acc = 0.0;
                let mut pick = None;
                for (j, &p) in probs.iter().enumerate() {
                    if !feasible[j] {
                        continue;
                    }
                    acc += p;
                    if draw < acc {
                        pick = Some(j);
                        break;
                    }
                }
                pick.unwrap_or_else(|| {
                    (0..probs.len()).rev().find(|&j| feasible[j]).unwrap()
                })
            }
            DecodePolicy::Replay(seqs) => *seqs[0].get(step).ok_or_else(|| {
                Error::InvalidArgument(format!("replay sequence exhausted at step {step}"))
            })?,
        };
        log_probs.push(probs[action].ln());
        state.apply(instance, action)?;
    }
    Err(Error::Numerical(
        "decoding failed to terminate within its step budget".into(),
    ))
}

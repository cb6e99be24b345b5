//! Supervised diffusion pretraining and multi-start REINFORCE policy
//! training.
//!
//! Both stages share one parameter set.  The diffusion stage fits the
//! global branch and the denoiser to labelled constraint matrices; the
//! policy stage freezes them, predicts a mask per instance once, and fits
//! the masked branch and decoder against sampled rollouts with the
//! per-instance mean reward over start nodes as baseline.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::constraint::{auc_score, ConstraintMatrix};
use crate::dataset::DatasetRecord;
use crate::decoder::{init_decoder, rollout_batch_on_tape, DecodePolicy, DecoderSettings};
use crate::denoiser::{init_denoiser, x0_logits, x0_training_loss};
use crate::diffusion::{make_schedule, sample_xt, NoiseSchedule};
use crate::encoder::{encode_on_tape, gat_forward_on_tape, init_gat, init_masked_encoder, node_features};
use crate::error::{Error, Result};
use crate::instance::CvrpInstance;
use crate::nn::{Adam, Id, ParamSet, Tape};
use crate::pipeline::predict_mask;
use crate::rng::{indexed_label, substream};

/// Default cap on the number of start nodes per instance.
pub const START_LIMIT: usize = 100;

/// Curves and final metrics from a training run.  Diffusion runs fill the
/// loss curve and the AUC fields; policy runs fill the reward and
/// validation curves and the validation objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per completed epoch.
    pub losses: Vec<f64>,
    /// Mean rollout reward per completed epoch.
    pub rewards: Vec<f64>,
    /// Mean greedy validation objective per completed epoch.
    pub validation: Vec<f64>,
    /// Epoch index after which early stopping triggered, if it did.
    pub early_stop_epoch: Option<usize>,
    /// Reverse-chain AUC over the records used for fitting.
    pub train_auc: Option<f64>,
    /// Reverse-chain AUC over the records held back from fitting.
    pub holdout_auc: Option<f64>,
    /// Best mean greedy objective over the validation split.
    pub validation_objective: Option<f64>,
}

impl TrainReport {
    fn empty() -> Self {
        TrainReport {
            losses: Vec::new(),
            rewards: Vec::new(),
            validation: Vec::new(),
            early_stop_epoch: None,
            train_auc: None,
            holdout_auc: None,
            validation_objective: None,
        }
    }
}

/// Start nodes for multi-start decoding: every customer when there are at
/// most `limit`, otherwise the `limit` customers closest to the depot,
/// distance ties resolved toward the lower index.  Returned in index order.
pub fn n_start(instance: &CvrpInstance, limit: usize) -> Vec<usize> {
    let n = instance.customer_count();
    let mut nodes: Vec<usize> = (1..=n).collect();
    if n <= limit {
        return nodes;
    }
    nodes.sort_by(|&a, &b| {
        instance
            .distance(0, a)
            .total_cmp(&instance.distance(0, b))
            .then(a.cmp(&b))
    });
    nodes.truncate(limit);
    nodes.sort_unstable();
    nodes
}

/// Mean reverse-chain AUC over labelled records: run the full mask
/// prediction per instance and score the final edge probabilities against
/// the label's constraint matrix.  Records whose label matrix holds only
/// one class are skipped; at least one record must be scoreable.
pub fn diffusion_auc(
    records: &[DatasetRecord],
    params: &ParamSet,
    config: &TrainConfig,
    reverse_steps: usize,
    seed: u64,
) -> Result<f64> {
    let schedule = make_schedule(
        config.diffusion.steps,
        config.diffusion.beta_start,
        config.diffusion.beta_end,
    )?;
    let mut total = 0.0;
    let mut scored = 0usize;
    for (idx, record) in records.iter().enumerate() {
        let solution = record.solution.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("record {idx} has no reference routes"))
        })?;
        let truth = ConstraintMatrix::from_solution(&record.instance, solution)?;
        let n = truth.len();
        let positives: usize = (1..=n)
            .map(|i| ((i + 1)..=n).filter(|&j| truth.same_route(i, j)).count())
            .sum();
        if positives == 0 || positives == n * (n - 1) / 2 {
            continue;
        }
        let mask_seed = substream(seed, &indexed_label("diffusion-auc", idx)).gen::<u64>();
        let pred = predict_mask(
            &record.instance,
            params,
            &schedule,
            reverse_steps,
            config.gat.heads,
            mask_seed,
        )?;
        total += auc_score(&pred.probabilities, &truth)?;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Undefined(
            "no record has both same-route and split pairs to score".into(),
        ));
    }
    Ok(total / scored as f64)
}

/// Fit the global branch and denoiser to labelled constraint matrices.
///
/// Each step draws a shuffled batch, one uniform timestep per instance,
/// corrupts the label matrix, and descends the clean-state prediction
/// loss.  When there are at least ten records the last tenth is held back
/// from fitting and scored separately; both AUC scores use the reverse
/// chain at the configured mask step count.
pub fn train_diffusion(
    records: &[DatasetRecord],
    config: &TrainConfig,
    seed: u64,
) -> Result<(ParamSet, TrainReport)> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("no training records".into()));
    }
    let mut matrices = Vec::with_capacity(records.len());
    for (idx, record) in records.iter().enumerate() {
        let solution = record.solution.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("record {idx} has no reference routes"))
        })?;
        if record.instance.customer_count() < 2 {
            return Err(Error::InvalidArgument(format!(
                "record {idx} has fewer than two customers"
            )));
        }
        matrices.push(ConstraintMatrix::from_solution(&record.instance, solution)?);
    }
    let holdout = records.len() / 10;
    let train_len = records.len() - holdout;
    let schedule = make_schedule(
        config.diffusion.steps,
        config.diffusion.beta_start,
        config.diffusion.beta_end,
    )?;

    let mut params = ParamSet::new();
    let mut init_rng = substream(seed, "train-diffusion/init");
    init_gat(&mut params, config.gat.hidden, config.gat.layers, &mut init_rng);
    init_denoiser(
        &mut params,
        config.gat.hidden,
        config.diffusion.denoiser_layers,
        &mut init_rng,
    );
    let mut opt = Adam::new(
        &params,
        config.diffusion.learning_rate,
        config.diffusion.weight_decay,
    );

    let mut report = TrainReport::empty();
    let mut global_step = 0usize;
    for epoch in 0..config.diffusion.epochs {
        let mut order: Vec<usize> = (0..train_len).collect();
        let mut epoch_rng = substream(seed, &indexed_label("train-diffusion/epoch", epoch));
        order.shuffle(&mut epoch_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.diffusion.batch_size) {
            epoch_loss += diffusion_step(
                &mut params,
                &mut opt,
                records,
                &matrices,
                chunk,
                &schedule,
                config,
                &mut epoch_rng,
                global_step,
            )?;
            steps += 1;
            global_step += 1;
        }
        report.losses.push(epoch_loss / steps as f64);
    }

    let reverse = config.policy.mask_reverse_steps;
    let train_seed = substream(seed, "train-diffusion/train-auc").gen::<u64>();
    report.train_auc = Some(diffusion_auc(
        &records[..train_len],
        &params,
        config,
        reverse,
        train_seed,
    )?);
    if holdout > 0 {
        let holdout_seed = substream(seed, "train-diffusion/holdout-auc").gen::<u64>();
        report.holdout_auc = Some(diffusion_auc(
            &records[train_len..],
            &params,
            config,
            reverse,
            holdout_seed,
        )?);
    }
    Ok((params, report))
}

/// One optimiser step over a batch of labelled records.
#[allow(clippy::too_many_arguments)]
fn diffusion_step(
    params: &mut ParamSet,
    opt: &mut Adam,
    records: &[DatasetRecord],
    matrices: &[ConstraintMatrix],
    chunk: &[usize],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut total: Option<Id> = None;
    for &idx in chunk {
        let instance = &records[idx].instance;
        let t = rng.gen_range(1..=schedule.t_max());
        let xt = sample_xt(&matrices[idx], t, schedule, rng, true)?;
        let feats = tape.constant(node_features(instance));
        let h = gat_forward_on_tape(&mut tape, params, feats, config.gat.heads, true)?;
        let customers: Vec<usize> = (1..=instance.customer_count()).collect();
        let h0 = tape.gather_rows(h, &customers);
        let logits = x0_logits(&mut tape, params, h0, &xt, t, true)?;
        let loss = x0_training_loss(&mut tape, logits, &matrices[idx])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss),
            None => loss,
        });
    }
    let total = total.expect("chunks are never empty");
    let mean = tape.scale(total, 1.0 / chunk.len() as f64);
    let value = tape.scalar(mean);
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at optimisation step {step}"
        )));
    }
    let grads = tape.backward(mean, params.len())?;
    opt.step(params, &grads)?;
    Ok(value)
}

/// Batch statistics from one REINFORCE update.
#[derive(Clone, Debug)]
pub struct ReinforceStats {
    /// Mean reward (negated tour length) over every rollout in the batch.
    pub mean_reward: f64,
    /// Surrogate-loss value at the evaluated parameters.
    pub surrogate: f64,
    /// Per-instance advantage sums; each is zero up to summation order.
    pub advantage_sums: Vec<f64>,
    /// Rollouts decoded in this step.
    pub rollouts: usize,
}

struct SurrogateParts {
    surrogate: Id,
    stats: ReinforceStats,
    /// Chosen actions per instance per start, excluding forced starts.
    #[cfg_attr(not(test), allow(dead_code))]
    actions: Vec<Vec<Vec<usize>>>,
}

/// Build the advantage-weighted surrogate for a batch on one tape.  With
/// `replay` the recorded action sequences are decoded instead of sampling,
/// which keeps rewards and advantages fixed across parameter changes.
#[allow(clippy::too_many_arguments)]
fn build_surrogate(
    tape: &mut Tape,
    params: &ParamSet,
    instances: &[CvrpInstance],
    masks: &[ConstraintMatrix],
    starts_limit: usize,
    settings: DecoderSettings,
    replay: Option<&[Vec<Vec<usize>>]>,
    rng: &mut ChaCha8Rng,
    trainable: bool,
) -> Result<SurrogateParts> {
    let b = instances.len();
    let mut surrogate: Option<Id> = None;
    let mut actions = Vec::with_capacity(b);
    let mut advantage_sums = Vec::with_capacity(b);
    let mut reward_total = 0.0;
    let mut rollouts = 0usize;
    for (i, instance) in instances.iter().enumerate() {
        let starts = n_start(instance, starts_limit);
        if starts.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "instance {i} has no start nodes"
            )));
        }
        let enc = encode_on_tape(tape, params, instance, &masks[i], settings.heads, trainable)?;
        let policy = match replay {
            Some(all) => DecodePolicy::Replay(&all[i]),
            None => DecodePolicy::Sample,
        };
        let batch = rollout_batch_on_tape(
            tape,
            params,
            &enc,
            instance,
            &masks[i],
            &starts,
            policy,
            settings,
            trainable,
            Some(rng),
        )?;
        let rewards: Vec<f64> = batch
            .solutions
            .iter()
            .map(|sol| -instance.tour_length(sol))
            .collect();
        let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
        advantage_sums.push(advantages.iter().sum());
        reward_total += rewards.iter().sum::<f64>();
        rollouts += rewards.len();
        // -(1/(B*N)) sum_n advantage_n * logp_n, as a weighted row product.
        let scale = -1.0 / (b as f64 * starts.len() as f64);
        let weights =
            Array2::from_shape_fn((starts.len(), 1), |(r, _)| scale * advantages[r]);
        let w = tape.constant(weights);
        let weighted = tape.mul(w, batch.log_prob_sums);
        let contrib = tape.sum_all(weighted);
        surrogate = Some(match surrogate {
            Some(acc) => tape.add(acc, contrib),
            None => contrib,
        });
        actions.push(batch.actions);
    }
    let surrogate =
        surrogate.ok_or_else(|| Error::InvalidArgument("empty instance batch".into()))?;
    let stats = ReinforceStats {
        mean_reward: reward_total / rollouts as f64,
        surrogate: tape.scalar(surrogate),
        advantage_sums,
        rollouts,
    };
    Ok(SurrogateParts {
        surrogate,
        stats,
        actions,
    })
}

/// One multi-start REINFORCE update on the masked branch and decoder.
///
/// Rollouts are sampled from every start node of every instance; each
/// instance's mean reward over its starts is the baseline.  The global
/// branch and denoiser receive no gradients and stay bit-identical.
pub fn reinforce_step(
    instances: &[CvrpInstance],
    masks: &[ConstraintMatrix],
    params: &mut ParamSet,
    opt: &mut Adam,
    settings: DecoderSettings,
    starts_limit: usize,
    seed: u64,
) -> Result<ReinforceStats> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("empty instance batch".into()));
    }
    if instances.len() != masks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} instances with {} masks",
            instances.len(),
            masks.len()
        )));
    }
    let mut rng = substream(seed, "reinforce-step");
    let mut tape = Tape::new();
    let parts = build_surrogate(
        &mut tape,
        params,
        instances,
        masks,
        starts_limit,
        settings,
        None,
        &mut rng,
        true,
    )?;
    let grads = tape.backward(parts.surrogate, params.len())?;
    opt.step(params, &grads)?;
    Ok(parts.stats)
}

/// The mask an instance keeps for the whole policy run, drawn from the
/// frozen diffusion stage with a per-record seed.
fn policy_mask(
    record: &DatasetRecord,
    params: &ParamSet,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    index: usize,
) -> Result<ConstraintMatrix> {
    let mask_seed = substream(seed, &indexed_label("policy-mask", index)).gen::<u64>();
    let pred = predict_mask(
        &record.instance,
        params,
        schedule,
        config.policy.mask_reverse_steps,
        config.gat.heads,
        mask_seed,
    )?;
    Ok(pred.mask)
}

/// Mean best greedy objective over a validation slice with cached masks.
fn greedy_validation(
    records: &[DatasetRecord],
    range: std::ops::Range<usize>,
    params: &ParamSet,
    masks: &BTreeMap<usize, ConstraintMatrix>,
    settings: DecoderSettings,
) -> Result<f64> {
    let mut total = 0.0;
    for idx in range.clone() {
        let instance = &records[idx].instance;
        let mask = &masks[&idx];
        let starts = n_start(instance, START_LIMIT);
        let mut tape = Tape::no_grad();
        let enc = encode_on_tape(&mut tape, params, instance, mask, settings.heads, false)?;
        let batch = rollout_batch_on_tape(
            &mut tape,
            params,
            &enc,
            instance,
            mask,
            &starts,
            DecodePolicy::Greedy,
            settings,
            false,
            None,
        )?;
        let best = batch
            .solutions
            .iter()
            .map(|sol| instance.tour_length(sol))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / range.len() as f64)
}

/// Mean multi-start greedy objective over the validation tail, with masks
/// drawn exactly as `train_policy` draws them for those records.
pub fn policy_validation_objective(
    records: &[DatasetRecord],
    params: &ParamSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    let val_len = config.policy.validation_size;
    if records.len() <= val_len {
        return Err(Error::InvalidArgument(format!(
            "{} records cannot cover a validation split of {val_len}",
            records.len()
        )));
    }
    let schedule = make_schedule(
        config.diffusion.steps,
        config.diffusion.beta_start,
        config.diffusion.beta_end,
    )?;
    let train_len = records.len() - val_len;
    let mut masks = BTreeMap::new();
    for idx in train_len..records.len() {
        masks.insert(
            idx,
            policy_mask(&records[idx], params, config, &schedule, seed, idx)?,
        );
    }
    let settings = DecoderSettings {
        heads: config.policy.heads,
        clip: config.policy.clip,
    };
    greedy_validation(records, train_len..records.len(), params, &masks, settings)
}

/// Fit the masked branch and decoder with multi-start REINFORCE.
///
/// `params` must hold trained `gat/` and `denoiser/` sections; fresh
/// policy weights are initialised from the seed.  Masks are predicted once
/// per record and cached.  The last `validation_size` records form a
/// greedy-objective validation split; training stops early after
/// `patience` epochs without improvement, and the best-scoring parameters
/// are returned together with the report.
pub fn train_policy(
    records: &[DatasetRecord],
    params: &ParamSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ParamSet, TrainReport)> {
    config.validate()?;
    let val_len = config.policy.validation_size;
    if records.len() <= val_len {
        return Err(Error::InvalidArgument(format!(
            "{} records cannot cover a validation split of {val_len}",
            records.len()
        )));
    }
    let mut work = ParamSet::new();
    for name in params.names() {
        if name.starts_with("gat/") || name.starts_with("denoiser/") {
            work.insert(name, params.get(name).clone());
        }
    }
    if work.is_empty() {
        return Err(Error::InvalidArgument(
            "parameter set has no trained diffusion sections".into(),
        ));
    }
    let mut init_rng = substream(seed, "train-policy/init");
    init_masked_encoder(
        &mut work,
        config.policy.hidden,
        config.policy.layers,
        &mut init_rng,
    );
    init_decoder(&mut work, config.policy.hidden, &mut init_rng);
    let mut opt = Adam::new(&work, config.policy.learning_rate, config.policy.weight_decay);

    let schedule = make_schedule(
        config.diffusion.steps,
        config.diffusion.beta_start,
        config.diffusion.beta_end,
    )?;
    let settings = DecoderSettings {
        heads: config.policy.heads,
        clip: config.policy.clip,
    };
    let train_len = records.len() - val_len;
    let batch = config.policy.batch_size;
    let mut masks: BTreeMap<usize, ConstraintMatrix> = BTreeMap::new();
    for idx in train_len..records.len() {
        masks.insert(
            idx,
            policy_mask(&records[idx], &work, config, &schedule, seed, idx)?,
        );
    }

    let mut report = TrainReport::empty();
    let mut best_objective = f64::INFINITY;
    let mut best_params = work.clone();
    let mut stale = 0usize;
    let mut global_step = 0usize;
    for epoch in 0..config.policy.epochs {
        let mut order: Vec<usize> = (0..train_len).collect();
        let mut epoch_rng = substream(seed, &indexed_label("policy-epoch", epoch));
        order.shuffle(&mut epoch_rng);
        let full: Vec<&[usize]> = order.chunks(batch).filter(|c| c.len() == batch).collect();
        let chunks: Vec<&[usize]> = if full.is_empty() {
            order.chunks(batch).collect()
        } else {
            full
        };
        let mut reward_sum = 0.0;
        let mut rollout_count = 0usize;
        for chunk in chunks {
            let mut instances = Vec::with_capacity(chunk.len());
            let mut chunk_masks = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                if !masks.contains_key(&idx) {
                    let mask = policy_mask(&records[idx], &work, config, &schedule, seed, idx)?;
                    masks.insert(idx, mask);
                }
                instances.push(records[idx].instance.clone());
                chunk_masks.push(masks[&idx].clone());
            }
            let step_seed =
                substream(seed, &indexed_label("policy-step", global_step)).gen::<u64>();
            let stats = reinforce_step(
                &instances,
                &chunk_masks,
                &mut work,
                &mut opt,
                settings,
                START_LIMIT,
                step_seed,
            )?;
            if !stats.surrogate.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite surrogate at optimisation step {global_step}"
                )));
            }
            reward_sum += stats.mean_reward * stats.rollouts as f64;
            rollout_count += stats.rollouts;
            global_step += 1;
        }
        report.rewards.push(reward_sum / rollout_count as f64);
        let objective =
            greedy_validation(records, train_len..records.len(), &work, &masks, settings)?;
        report.validation.push(objective);
        if objective < best_objective {
            best_objective = objective;
            best_params = work.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.policy.patience {
                report.early_stop_epoch = Some(epoch);
                break;
            }
        }
    }
    report.validation_objective = Some(best_objective);
    Ok((best_params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::archive::ParameterArchive;
    use crate::instance::generate_instance;
    use crate::oracles::savings_solve;

    /// Small configuration for fast deterministic runs.
    fn desk_config(hidden: usize, heads: usize) -> TrainConfig {
        let mut config = TrainConfig::default();
        config.diffusion.steps = 20;
        config.diffusion.beta_end = 0.2;
        config.diffusion.denoiser_layers = 1;
        config.diffusion.batch_size = 4;
        config.diffusion.epochs = 2;
        config.diffusion.learning_rate = 2e-3;
        config.gat.layers = 1;
        config.gat.hidden = hidden;
        config.gat.heads = heads;
        config.policy.layers = 1;
        config.policy.heads = heads;
        config.policy.hidden = hidden;
        config.policy.mask_reverse_steps = 4;
        config.policy.batch_size = 4;
        config.policy.epochs = 2;
        config.policy.validation_size = 3;
        config.policy.learning_rate = 2e-3;
        config.validate().unwrap();
        config
    }

    fn labeled_records(n: usize, count: usize, seed: u64) -> Vec<DatasetRecord> {
        (0..count)
            .map(|k| {
                let instance = generate_instance(n, seed + k as u64).unwrap();
                let solution = savings_solve(&instance).unwrap();
                DatasetRecord {
                    instance,
                    solution: Some(solution),
                }
            })
            .collect()
    }

    fn unlabeled_records(n: usize, count: usize, seed: u64) -> Vec<DatasetRecord> {
        (0..count)
            .map(|k| DatasetRecord {
                instance: generate_instance(n, seed + k as u64).unwrap(),
                solution: None,
            })
            .collect()
    }

    fn params_equal(a: &ParamSet, b: &ParamSet) -> bool {
        let names: Vec<&str> = a.names().collect();
        if names != b.names().collect::<Vec<&str>>() {
            return false;
        }
        names.iter().all(|name| {
            let (x, y) = (a.get(name), b.get(name));
            x.dim() == y.dim()
                && x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
    }

    fn policy_params(config: &TrainConfig, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        let mut rng = substream(seed, "training-test/init");
        init_gat(&mut params, config.gat.hidden, config.gat.layers, &mut rng);
        init_denoiser(
            &mut params,
            config.gat.hidden,
            config.diffusion.denoiser_layers,
            &mut rng,
        );
        init_masked_encoder(
            &mut params,
            config.policy.hidden,
            config.policy.layers,
            &mut rng,
        );
        init_decoder(&mut params, config.policy.hidden, &mut rng);
        params
    }

    fn settings(config: &TrainConfig) -> DecoderSettings {
        DecoderSettings {
            heads: config.policy.heads,
            clip: config.policy.clip,
        }
    }

    #[test]
    fn n_start_returns_all_customers_in_index_order() {
        let instance = generate_instance(20, 3).unwrap();
        assert_eq!(n_start(&instance, 100), (1..=20).collect::<Vec<_>>());
        assert_eq!(n_start(&instance, 20), (1..=20).collect::<Vec<_>>());
    }

    #[test]
    fn n_start_keeps_the_depot_closest_nodes() {
        let instance = generate_instance(150, 5).unwrap();
        let starts = n_start(&instance, 100);
        assert_eq!(starts.len(), 100);
        assert!(starts.windows(2).all(|w| w[0] < w[1]));
        let kept_max = starts
            .iter()
            .map(|&i| instance.distance(0, i))
            .fold(0.0f64, f64::max);
        let excluded_min = (1..=150)
            .filter(|i| !starts.contains(i))
            .map(|i| instance.distance(0, i))
            .fold(f64::INFINITY, f64::min);
        assert!(kept_max <= excluded_min);
    }

    #[test]
    fn n_start_breaks_distance_ties_toward_the_lower_index() {
        let instance = CvrpInstance::new(
            [0.5, 0.5],
            vec![[0.5, 0.6], [0.7, 0.5], [0.3, 0.5]],
            vec![1, 1, 1],
            30,
        )
        .unwrap();
        // Customers 2 and 3 are exactly 0.2 from the depot; the cutoff
        // keeps the lower index.
        assert_eq!(n_start(&instance, 2), vec![1, 2]);
    }

    #[test]
    fn perfect_logits_drive_the_training_loss_to_zero() {
        let records = labeled_records(8, 1, 40);
        let truth = ConstraintMatrix::from_solution(
            &records[0].instance,
            records[0].solution.as_ref().unwrap(),
        )
        .unwrap();
        let n = truth.len();
        let mut column = Array2::zeros((n * n, 1));
        for i in 1..=n {
            for j in 1..=n {
                if i == j {
                    continue;
                }
                let z = if truth.same_route(i, j) { 40.0 } else { -40.0 };
                column[[(i - 1) * n + (j - 1), 0]] = z;
            }
        }
        let mut tape = Tape::no_grad();
        let logits = tape.constant(column);
        let loss = x0_training_loss(&mut tape, logits, &truth).unwrap();
        assert!(tape.scalar(loss) <= 1e-10);
    }

    #[test]
    fn train_diffusion_rejects_unlabeled_records() {
        let mut records = labeled_records(8, 3, 50);
        records[1].solution = None;
        let err = train_diffusion(&records, &desk_config(8, 2), 1).unwrap_err();
        assert!(err.to_string().contains("record 1"));
    }

    #[test]
    fn train_diffusion_is_deterministic() {
        let records = labeled_records(8, 5, 60);
        let config = desk_config(8, 2);
        let (params_a, report_a) = train_diffusion(&records, &config, 9).unwrap();
        let (params_b, report_b) = train_diffusion(&records, &config, 9).unwrap();
        assert_eq!(report_a, report_b);
        assert!(params_equal(&params_a, &params_b));
        assert_eq!(report_a.losses.len(), config.diffusion.epochs);
        assert!(report_a.holdout_auc.is_none());
    }

    #[test]
    fn train_diffusion_overfits_a_small_batch() {
        let records = labeled_records(8, 4, 70);
        let mut config = desk_config(16, 2);
        config.diffusion.epochs = 25;
        let (_, report) = train_diffusion(&records, &config, 4).unwrap();
        assert_eq!(report.losses.len(), 25);
        assert!(report.losses.last().unwrap() < report.losses.first().unwrap());
        let auc = report.train_auc.unwrap();
        assert!((0.0..=1.0).contains(&auc));
        assert!(report.rewards.is_empty());
    }

    #[test]
    fn a_tenth_of_the_records_is_held_out_for_scoring() {
        let records = labeled_records(8, 12, 80);
        let mut config = desk_config(8, 2);
        config.diffusion.epochs = 1;
        let (_, report) = train_diffusion(&records, &config, 2).unwrap();
        // 12 records -> one held out, eleven fitted.
        assert!(report.train_auc.is_some());
        assert!(report.holdout_auc.is_some());
    }

    #[test]
    fn reinforce_advantages_sum_to_zero_per_instance() {
        let config = desk_config(8, 2);
        let mut params = policy_params(&config, 1);
        let mut opt = Adam::new(&params, 1e-3, 0.0);
        let records = labeled_records(6, 2, 90);
        let instances: Vec<CvrpInstance> =
            records.iter().map(|r| r.instance.clone()).collect();
        let masks: Vec<ConstraintMatrix> = records
            .iter()
            .map(|r| {
                ConstraintMatrix::from_solution(&r.instance, r.solution.as_ref().unwrap())
                    .unwrap()
            })
            .collect();
        let stats = reinforce_step(
            &instances,
            &masks,
            &mut params,
            &mut opt,
            settings(&config),
            START_LIMIT,
            7,
        )
        .unwrap();
        assert_eq!(stats.advantage_sums.len(), 2);
        for sum in &stats.advantage_sums {
            assert!(sum.abs() <= 1e-9, "advantage sum {sum}");
        }
        assert_eq!(stats.rollouts, 12);
        assert!(stats.mean_reward < 0.0);
        assert!(stats.surrogate.is_finite());
    }

    #[test]
    fn equal_rewards_leave_every_gradient_at_zero() {
        // Demands of 4 against capacity 5 force singleton routes, so every
        // start decodes to the same pair of round trips and every
        // advantage is exactly zero.
        let instance = CvrpInstance::new(
            [0.5, 0.5],
            vec![[0.2, 0.2], [0.8, 0.8]],
            vec![4, 4],
            5,
        )
        .unwrap();
        let mask = ConstraintMatrix::from_probabilities(&Array2::zeros((2, 2))).unwrap();
        let config = desk_config(8, 2);
        let params = policy_params(&config, 2);
        let mut tape = Tape::new();
        let mut rng = substream(11, "training-test/equal-rewards");
        let parts = build_surrogate(
            &mut tape,
            &params,
            std::slice::from_ref(&instance),
            std::slice::from_ref(&mask),
            START_LIMIT,
            settings(&config),
            None,
            &mut rng,
            true,
        )
        .unwrap();
        assert!(parts.stats.advantage_sums[0].abs() <= 1e-12);
        let grads = tape.backward(parts.surrogate, params.len()).unwrap();
        for idx in 0..params.len() {
            let name = params.name(idx);
            match &grads[idx] {
                Some(grad) => {
                    let worst = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                    assert!(worst <= 1e-12, "{name} has gradient {worst}");
                }
                None => assert!(
                    !name.starts_with("masked_encoder/fuse"),
                    "{name} missing from the surrogate graph"
                ),
            }
        }
    }

    #[test]
    fn reinforce_surrogate_matches_finite_differences() {
        let config = desk_config(8, 2);
        let params = policy_params(&config, 3);
        let records = labeled_records(4, 1, 100);
        let instances: Vec<CvrpInstance> =
            records.iter().map(|r| r.instance.clone()).collect();
        let masks: Vec<ConstraintMatrix> = records
            .iter()
            .map(|r| {
                ConstraintMatrix::from_solution(&r.instance, r.solution.as_ref().unwrap())
                    .unwrap()
            })
            .collect();

        // Sample once to fix the action sequences and advantages.
        let mut sample_tape = Tape::new();
        let mut rng = substream(5, "training-test/fd-sample");
        let sampled = build_surrogate(
            &mut sample_tape,
            &params,
            &instances,
            &masks,
            START_LIMIT,
            settings(&config),
            None,
            &mut rng,
            true,
        )
        .unwrap();
        let actions = sampled.actions;

        let eval = |p: &ParamSet| -> (Tape, Id) {
            let mut tape = Tape::new();
            let mut dummy = substream(0, "training-test/fd-replay");
            let parts = build_surrogate(
                &mut tape,
                p,
                &instances,
                &masks,
                START_LIMIT,
                settings(&config),
                Some(&actions),
                &mut dummy,
                true,
            )
            .unwrap();
            (tape, parts.surrogate)
        };

        let clone = |src: &ParamSet| -> ParamSet {
            let mut out = ParamSet::new();
            for idx in 0..src.len() {
                out.insert(src.name(idx), src.value(idx).clone());
            }
            out
        };

        let (tape, surrogate) = eval(&params);
        let grads = tape.backward(surrogate, params.len()).unwrap();
        let eps = 1e-6;
        let mut checked = 0usize;
        for idx in 0..params.len() {
            let name = params.name(idx);
            if grads[idx].is_none() {
                assert!(
                    !(name.starts_with("masked_encoder/fuse") || name.starts_with("decoder/final")),
                    "{name} missing from the surrogate graph"
                );
                continue;
            }
            assert!(
                name.starts_with("masked_encoder/") || name.starts_with("decoder/"),
                "{name} should stay frozen"
            );
            let (rows, cols) = params.value(idx).dim();
            let mut probe = substream(idx as u64, "training-test/fd-probe");
            for _ in 0..3 {
                let r = probe.gen_range(0..rows);
                let c = probe.gen_range(0..cols);
                let mut plus = clone(&params);
                plus.value_mut(idx)[[r, c]] += eps;
                let mut minus = clone(&params);
                minus.value_mut(idx)[[r, c]] -= eps;
                let (tp, lp) = eval(&plus);
                let (tm, lm) = eval(&minus);
                let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * eps);
                let an = grads[idx].as_ref().unwrap()[[r, c]];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                checked += 1;
                assert!(rel <= 1e-4, "{name}[{r},{c}]: an {an} vs fd {fd}");
            }
        }
        assert!(checked >= 30, "only {checked} probes ran");
    }

    #[test]
    fn reinforce_step_leaves_the_diffusion_sections_untouched() {
        let config = desk_config(8, 2);
        let mut params = policy_params(&config, 4);
        let before = ParameterArchive::new(config.clone(), params.clone());
        let gat_before = before.section_bytes("gat");
        let denoiser_before = before.section_bytes("denoiser");
        let decoder_before = before.section_bytes("decoder");
        let mut opt = Adam::new(&params, 1e-3, 1e-6);
        let records = labeled_records(5, 1, 110);
        let masks = vec![ConstraintMatrix::from_solution(
            &records[0].instance,
            records[0].solution.as_ref().unwrap(),
        )
        .unwrap()];
        reinforce_step(
            &[records[0].instance.clone()],
            &masks,
            &mut params,
            &mut opt,
            settings(&config),
            START_LIMIT,
            13,
        )
        .unwrap();
        let after = ParameterArchive::new(config.clone(), params);
        assert_eq!(after.section_bytes("gat"), gat_before);
        assert_eq!(after.section_bytes("denoiser"), denoiser_before);
        assert_ne!(after.section_bytes("decoder"), decoder_before);
    }

    #[test]
    fn reinforce_step_rejects_bad_batches() {
        let config = desk_config(8, 2);
        let mut params = policy_params(&config, 5);
        let mut opt = Adam::new(&params, 1e-3, 0.0);
        let instance = generate_instance(4, 120).unwrap();
        let mask = ConstraintMatrix::from_probabilities(&Array2::zeros((4, 4))).unwrap();
        assert!(reinforce_step(
            &[],
            &[],
            &mut params,
            &mut opt,
            settings(&config),
            START_LIMIT,
            1,
        )
        .is_err());
        assert!(reinforce_step(
            &[instance.clone()],
            &[],
            &mut params,
            &mut opt,
            settings(&config),
            START_LIMIT,
            1,
        )
        .is_err());
        // A start cap of zero leaves no rollout roots.
        assert!(reinforce_step(
            &[instance],
            &[mask],
            &mut params,
            &mut opt,
            settings(&config),
            0,
            1,
        )
        .is_err());
    }

    #[test]
    fn train_policy_improves_the_validation_objective() {
        let mut config = desk_config(16, 2);
        config.policy.epochs = 6;
        let records = unlabeled_records(5, 11, 130);
        let mut diffusion = ParamSet::new();
        let mut rng = substream(6, "training-test/diffusion");
        init_gat(&mut diffusion, config.gat.hidden, config.gat.layers, &mut rng);
        init_denoiser(
            &mut diffusion,
            config.gat.hidden,
            config.diffusion.denoiser_layers,
            &mut rng,
        );

        // Reconstruct the starting policy weights to score the untrained
        // network on the same validation split.
        let mut before = diffusion.clone();
        let mut init_rng = substream(21, "train-policy/init");
        init_masked_encoder(
            &mut before,
            config.policy.hidden,
            config.policy.layers,
            &mut init_rng,
        );
        init_decoder(&mut before, config.policy.hidden, &mut init_rng);
        let untrained = policy_validation_objective(&records, &before, &config, 21).unwrap();

        let (trained, report) = train_policy(&records, &diffusion, &config, 21).unwrap();
        let best = report.validation_objective.unwrap();
        assert!(
            best < untrained,
            "validation objective {best} did not improve on {untrained}"
        );
        assert!(report.validation.len() <= config.policy.epochs);
        assert_eq!(report.validation.len(), report.rewards.len());
        let curve_min = report
            .validation
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v));
        assert_eq!(best, curve_min);

        let before_archive = ParameterArchive::new(config.clone(), diffusion.clone());
        let after_archive = ParameterArchive::new(config.clone(), trained);
        assert_eq!(
            after_archive.section_bytes("gat"),
            before_archive.section_bytes("gat")
        );
        assert_eq!(
            after_archive.section_bytes("denoiser"),
            before_archive.section_bytes("denoiser")
        );
    }

    #[test]
    fn train_policy_is_deterministic() {
        let mut config = desk_config(8, 2);
        config.policy.epochs = 2;
        config.policy.batch_size = 2;
        config.policy.validation_size = 2;
        let records = unlabeled_records(4, 6, 140);
        let mut diffusion = ParamSet::new();
        let mut rng = substream(7, "training-test/diffusion");
        init_gat(&mut diffusion, config.gat.hidden, config.gat.layers, &mut rng);
        init_denoiser(
            &mut diffusion,
            config.gat.hidden,
            config.diffusion.denoiser_layers,
            &mut rng,
        );
        let (params_a, report_a) = train_policy(&records, &diffusion, &config, 33).unwrap();
        let (params_b, report_b) = train_policy(&records, &diffusion, &config, 33).unwrap();
        assert_eq!(report_a, report_b);
        assert!(params_equal(&params_a, &params_b));
    }

    #[test]
    fn train_policy_stops_early_on_a_plateau() {
        // A vanishing learning rate cannot flip any greedy argmax, so the
        // validation objective repeats and patience runs out immediately.
        let mut config = desk_config(8, 2);
        config.policy.epochs = 8;
        config.policy.patience = 1;
        config.policy.learning_rate = 1e-12;
        config.policy.validation_size = 2;
        let records = unlabeled_records(4, 6, 150);
        let mut diffusion = ParamSet::new();
        let mut rng = substream(8, "training-test/diffusion");
        init_gat(&mut diffusion, config.gat.hidden, config.gat.layers, &mut rng);
        init_denoiser(
            &mut diffusion,
            config.gat.hidden,
            config.diffusion.denoiser_layers,
            &mut rng,
        );
        let (_, report) = train_policy(&records, &diffusion, &config, 44).unwrap();
        assert_eq!(report.early_stop_epoch, Some(1));
        assert_eq!(report.validation.len(), 2);
        assert_eq!(report.validation[0], report.validation[1]);
    }

    #[test]
    fn train_policy_rejects_a_validation_split_covering_everything() {
        let config = desk_config(8, 2);
        let records = unlabeled_records(4, 3, 160);
        let diffusion = policy_params(&config, 9);
        assert!(train_policy(&records, &diffusion, &config, 1).is_err());
        // Enough records, but no trained diffusion sections to freeze.
        let more = unlabeled_records(4, 5, 161);
        assert!(train_policy(&more, &ParamSet::new(), &config, 1).is_err());
    }
}

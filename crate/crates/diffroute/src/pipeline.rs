//! End-to-end inference: mask prediction, augmented multi-start decoding,
//! and benchmark evaluation.
//!
//! A solve runs every requested dihedral variant of the instance through
//! mask prediction, encoding and greedy multi-start decoding, then keeps
//! the shortest feasible tour.  Route indices are unaffected by the
//! isometries, so any variant's tour applies to the original coordinates
//! directly.  Evaluation wraps solve over a dataset and reports objectives
//! and percentage gaps against reference labels as CSV and JSON.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::Rng;
use serde::Serialize;

use crate::augment::augment8;
use crate::config::TrainConfig;
use crate::constraint::{ConstraintMatrix, EdgeProbabilities};
use crate::dataset::{write_atomic, DatasetRecord};
use crate::decoder::{rollout_batch_on_tape, DecodePolicy, DecoderSettings};
use crate::denoiser::predict_x0;
use crate::diffusion::{make_inference_schedule, make_schedule, reverse_step, NoiseSchedule};
use crate::encoder::{encode, gat_forward};
use crate::error::{Error, Result};
use crate::instance::{CvrpInstance, CvrpSolution};
use crate::nn::{ParamSet, Tape};
use crate::rng::substream;
use crate::training::n_start;

/// A predicted constraint matrix with the probabilities behind it.
pub struct MaskPrediction {
    pub mask: ConstraintMatrix,
    /// Symmetrized clean-matrix probabilities from the final reverse step.
    pub probabilities: EdgeProbabilities,
}

/// Run the reverse corruption chain from pure noise down to a binary
/// constraint matrix.  The output is symmetric with a zero diagonal;
/// capacity consistency and transitivity are not enforced.
pub fn predict_mask(
    instance: &CvrpInstance,
    params: &ParamSet,
    schedule: &NoiseSchedule,
    reverse_steps: usize,
    heads: usize,
    seed: u64,
) -> Result<MaskPrediction> {
    let n = instance.customer_count();
    let h = gat_forward(instance, params, heads)?;
    let h0 = h.slice(s![1.., ..]).to_owned();
    let mut rng = substream(seed, "predict-mask");

    let mut xt = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let bit = f64::from(rng.gen_bool(0.5));
            xt[[i, j]] = bit;
            xt[[j, i]] = bit;
        }
    }

    let mut probabilities = Array2::zeros((n, n));
    for (t, t_prev) in make_inference_schedule(schedule.t_max(), reverse_steps)? {
        let pred = predict_x0(instance, &h0, &xt, t, params)?;
        for i in 0..n {
            for j in 0..n {
                probabilities[[i, j]] = 0.5 * (pred[[i, j]] + pred[[j, i]]);
            }
        }
        xt = reverse_step(&xt, &pred, t, t_prev, schedule, &mut rng)?;
    }

    Ok(MaskPrediction {
        mask: ConstraintMatrix::from_probabilities(&xt)?,
        probabilities,
    })
}

/// Best greedy tour found within one dihedral variant.
#[derive(Clone, Debug)]
pub struct VariantBest {
    pub variant: usize,
    pub start: usize,
    pub objective: f64,
}

/// Result of an augmented multi-start solve.
pub struct SolveOutcome {
    pub solution: CvrpSolution,
    pub objective: f64,
    pub variant: usize,
    pub start: usize,
    pub per_variant: Vec<VariantBest>,
}

/// Solve one instance: for each of the first `augmentations` dihedral
/// variants, predict a mask, encode, decode greedily from every start, and
/// return the shortest feasible tour (ties to the lower variant id, then
/// the lower start id).
pub fn solve(
    instance: &CvrpInstance,
    params: &ParamSet,
    config: &TrainConfig,
    augmentations: usize,
    starts_limit: usize,
    seed: u64,
) -> Result<SolveOutcome> {
    if !(1..=8).contains(&augmentations) {
        return Err(Error::InvalidArgument(format!(
            "augmentations {augmentations} outside 1..=8"
        )));
    }
    let schedule = make_schedule(
        config.diffusion.steps,
        config.diffusion.beta_start,
        config.diffusion.beta_end,
    )?;
    let settings = DecoderSettings {
        heads: config.policy.heads,
        clip: config.policy.clip,
    };
    let variants = augment8(instance);
    // Per-variant corruption seeds drawn up front so a prefix of variants
    // sees the same noise regardless of how many run.
    let mut seed_rng = substream(seed, "solve/mask-seeds");
    let mask_seeds: Vec<u64> = (0..variants.len()).map(|_| seed_rng.gen()).collect();

    let mut best: Option<(f64, usize, usize, CvrpSolution)> = None;
    let mut per_variant = Vec::with_capacity(augmentations);
    for (variant, inst) in variants.iter().take(augmentations).enumerate() {
        let predicted = predict_mask(
            inst,
            params,
            &schedule,
            config.policy.mask_reverse_steps,
            config.gat.heads,
            mask_seeds[variant],
        )?;
        let enc = encode(inst, &predicted.mask, params, config.policy.heads)?;
        let starts = n_start(inst, starts_limit);
        if starts.is_empty() {
            return Err(Error::InvalidArgument(
                "starts_limit admits no start nodes".into(),
            ));
        }
        let mut tape = Tape::no_grad();
        let ids = enc.on_tape(&mut tape);
        let batch = rollout_batch_on_tape(
            &mut tape,
            params,
            &ids,
            inst,
            &predicted.mask,
            &starts,
            DecodePolicy::Greedy,
            settings,
            false,
            None,
        )?;
        let mut variant_best: Option<(f64, usize)> = None;
        for (i, solution) in batch.solutions.iter().enumerate() {
            // Tour indices transfer to the original instance unchanged;
            // score there so isometry rounding cannot skew the comparison.
            let objective = instance.tour_length(solution);
            if variant_best.is_none() || objective < variant_best.unwrap().0 {
                variant_best = Some((objective, starts[i]));
            }
            if best.is_none() || objective < best.as_ref().unwrap().0 {
                best = Some((objective, variant, starts[i], solution.clone()));
            }
        }
        let (objective, start) = variant_best.expect("at least one start ran");
        per_variant.push(VariantBest {
            variant,
            start,
            objective,
        });
    }
    let (objective, variant, start, solution) = best.expect("at least one variant ran");
    instance.check_feasible(&solution)?;
    Ok(SolveOutcome {
        solution,
        objective,
        variant,
        start,
        per_variant,
    })
}

/// Percentage gap of an objective against a reference value.
pub fn gap_percent(objective: f64, reference: f64) -> Result<f64> {
    if !(reference.is_finite() && reference > 0.0) {
        return Err(Error::Undefined(format!(
            "reference objective {reference} admits no gap"
        )));
    }
    Ok(100.0 * (objective - reference) / reference)
}

/// One evaluated instance: the winning tour plus its gap when a reference
/// label exists.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub instance_id: usize,
    pub variant: usize,
    pub start: usize,
    pub objective: f64,
    pub feasible: bool,
    pub wall_ms: f64,
    pub gap_percent: Option<f64>,
}

/// Aggregate metrics over the rows that carry references.
#[derive(Clone, Debug, Serialize)]
pub struct EvalAggregate {
    pub mean_gap: Option<f64>,
    pub std_gap: Option<f64>,
    pub mean_obj: f64,
    /// Rows with a reference, hence included in the gap statistics.
    pub count: usize,
    pub total_ms: f64,
}

pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalAggregate,
}

/// Solve every record and compare against its reference routes, when
/// present.  Gaps are percentages; unlabeled records evaluate but are
/// excluded from the gap statistics.
pub fn evaluate(
    records: &[DatasetRecord],
    params: &ParamSet,
    config: &TrainConfig,
    augmentations: usize,
    starts_limit: usize,
    seed: u64,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation dataset".into()));
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut total_ms = 0.0;
    for (instance_id, record) in records.iter().enumerate() {
        let clock = Instant::now();
        let outcome = solve(
            &record.instance,
            params,
            config,
            augmentations,
            starts_limit,
            substream(seed, &crate::rng::indexed_label("evaluate", instance_id)).gen(),
        )?;
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        total_ms += wall_ms;
        let feasible = record.instance.check_feasible(&outcome.solution).is_ok();
        let gap = match &record.solution {
            Some(reference) => Some(gap_percent(
                outcome.objective,
                record.instance.tour_length(reference),
            )?),
            None => None,
        };
        rows.push(EvalRow {
            instance_id,
            variant: outcome.variant,
            start: outcome.start,
            objective: outcome.objective,
            feasible,
            wall_ms,
            gap_percent: gap,
        });
    }

    let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap_percent).collect();
    let count = gaps.len();
    let (mean_gap, std_gap) = if count > 0 {
        let mean = gaps.iter().sum::<f64>() / count as f64;
        let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / count as f64;
        (Some(mean), Some(var.sqrt()))
    } else {
        (None, None)
    };
    let mean_obj = rows.iter().map(|r| r.objective).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        rows,
        aggregate: EvalAggregate {
            mean_gap,
            std_gap,
            mean_obj,
            count,
            total_ms,
        },
    })
}

/// CSV image of the per-instance rows; gaps print as `n/a` when no
/// reference exists.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("instance_id,variant,start,objective,feasible,wall_ms,gap_percent\n");
    for row in &report.rows {
        let gap = row
            .gap_percent
            .map_or_else(|| "n/a".to_string(), |g| format!("{g}"));
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.instance_id,
            row.variant,
            row.start,
            row.objective,
            row.feasible,
            row.wall_ms,
            gap
        ));
    }
    out
}

/// JSON image of the aggregate metrics.
pub fn eval_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&report.aggregate)?)
}

pub fn write_eval_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    write_atomic(path.as_ref(), eval_csv(report).as_bytes())
}

pub fn write_eval_json(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    write_atomic(path.as_ref(), eval_json(report)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_gat, init_masked_encoder};
    use crate::instance::generate_instance;
    use crate::nn::ParamSet;
    use crate::oracles::savings_solve;

    fn desk_config(hidden: usize, heads: usize) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.diffusion.steps = 20;
        c.diffusion.beta_end = 0.2;
        c.diffusion.denoiser_layers = 2;
        c.gat.layers = 2;
        c.gat.hidden = hidden;
        c.gat.heads = heads;
        c.policy.layers = 2;
        c.policy.heads = heads;
        c.policy.hidden = hidden;
        c.policy.mask_reverse_steps = 5;
        c.validate().unwrap();
        c
    }

    fn desk_params(config: &TrainConfig, seed: u64) -> ParamSet {
        let mut rng = substream(seed, "pipeline-test-init");
        let mut params = ParamSet::new();
        init_gat(&mut params, config.gat.hidden, config.gat.layers, &mut rng);
        crate::denoiser::init_denoiser(
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
        crate::decoder::init_decoder(&mut params, config.policy.hidden, &mut rng);
        params
    }

    #[test]
    fn predicted_mask_agrees_with_an_overfit_label() {
        let mut config = desk_config(16, 2);
        config.policy.heads = 2;
        config.gat.heads = 2;
        config.diffusion.batch_size = 1;
        config.diffusion.epochs = 400;
        config.diffusion.learning_rate = 2e-3;
        config.validate().unwrap();
        let instance = generate_instance(10, 77).unwrap();
        let solution = savings_solve(&instance).unwrap();
        let truth = ConstraintMatrix::from_solution(&instance, &solution).unwrap();
        let records = vec![crate::dataset::DatasetRecord {
            instance: instance.clone(),
            solution: Some(solution),
        }];
        let (params, report) = crate::training::train_diffusion(&records, &config, 77).unwrap();
        assert!(report.train_auc.unwrap() > 0.9, "overfit failed to converge");

        let schedule = make_schedule(
            config.diffusion.steps,
            config.diffusion.beta_start,
            config.diffusion.beta_end,
        )
        .unwrap();
        let pred = predict_mask(
            &instance,
            &params,
            &schedule,
            config.policy.mask_reverse_steps,
            config.gat.heads,
            123,
        )
        .unwrap();
        let n = truth.len();
        let mut agree = 0usize;
        for i in 1..=n {
            for j in 1..=n {
                if i != j && pred.mask.same_route(i, j) == truth.same_route(i, j) {
                    agree += 1;
                }
            }
        }
        let fraction = agree as f64 / (n * (n - 1)) as f64;
        assert!(fraction >= 0.95, "only {fraction:.3} of entries agree");
    }

    #[test]
    fn predicted_masks_are_symmetric_zero_diagonal_and_seeded() {
        let config = desk_config(16, 4);
        let params = desk_params(&config, 31);
        let instance = generate_instance(9, 31).unwrap();
        let schedule = make_schedule(
            config.diffusion.steps,
            config.diffusion.beta_start,
            config.diffusion.beta_end,
        )
        .unwrap();
        let a = predict_mask(&instance, &params, &schedule, 5, 4, 7).unwrap();
        let b = predict_mask(&instance, &params, &schedule, 5, 4, 7).unwrap();
        let arr = a.mask.to_array();
        for i in 0..9 {
            assert_eq!(arr[[i, i]], 0.0);
            for j in 0..9 {
                assert_eq!(arr[[i, j]], arr[[j, i]]);
                let p = a.probabilities[[i, j]];
                assert!((0.0..=1.0).contains(&p));
                assert!((p - a.probabilities[[j, i]]).abs() <= 1e-15);
            }
        }
        assert_eq!(a.mask.to_array(), b.mask.to_array());

        let c = predict_mask(&instance, &params, &schedule, 5, 4, 8).unwrap();
        // A different seed is allowed to produce a different matrix; the
        // call itself must still satisfy the same contract.
        assert_eq!(c.mask.to_array().diag().sum(), 0.0);
    }

    #[test]
    fn solve_reports_exact_objectives_and_is_deterministic() {
        let config = desk_config(16, 4);
        let params = desk_params(&config, 32);
        let instance = generate_instance(8, 32).unwrap();
        let a = solve(&instance, &params, &config, 3, 100, 5).unwrap();
        let b = solve(&instance, &params, &config, 3, 100, 5).unwrap();
        assert_eq!(a.solution.routes, b.solution.routes);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.per_variant.len(), 3);
        instance.check_feasible(&a.solution).unwrap();
        assert_eq!(a.objective, instance.tour_length(&a.solution));
        // The winner is one of the per-variant bests, and the smallest.
        let min = a
            .per_variant
            .iter()
            .map(|v| v.objective)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.objective, min);
        assert!(a.per_variant.iter().any(|v| v.variant == a.variant));

        assert!(solve(&instance, &params, &config, 0, 100, 5).is_err());
        assert!(solve(&instance, &params, &config, 9, 100, 5).is_err());
    }

    #[test]
    fn single_variant_single_start_is_one_greedy_rollout() {
        let config = desk_config(16, 4);
        let params = desk_params(&config, 33);
        let instance = generate_instance(7, 33).unwrap();
        let outcome = solve(&instance, &params, &config, 1, 1, 9).unwrap();

        // Reproduce the internals by hand: same mask seed, nearest start.
        let schedule = make_schedule(
            config.diffusion.steps,
            config.diffusion.beta_start,
            config.diffusion.beta_end,
        )
        .unwrap();
        let mask_seed = substream(9, "solve/mask-seeds").gen::<u64>();
        let predicted = predict_mask(
            &instance,
            &params,
            &schedule,
            config.policy.mask_reverse_steps,
            config.gat.heads,
            mask_seed,
        )
        .unwrap();
        let enc = encode(&instance, &predicted.mask, &params, config.policy.heads).unwrap();
        let starts = n_start(&instance, 1);
        assert_eq!(starts.len(), 1);
        let (solution, _) = crate::decoder::rollout(
            &instance,
            &enc,
            &predicted.mask,
            &params,
            DecoderSettings {
                heads: config.policy.heads,
                clip: config.policy.clip,
            },
            starts[0],
            DecodePolicy::Greedy,
            None,
        )
        .unwrap();
        assert_eq!(outcome.solution.routes, solution.routes);
        assert_eq!(outcome.variant, 0);
        assert_eq!(outcome.start, starts[0]);
    }

    #[test]
    fn more_augmentations_never_hurt() {
        let config = desk_config(16, 4);
        let params = desk_params(&config, 34);
        for seed in 0..12 {
            let instance = generate_instance(8, 600 + seed).unwrap();
            let one = solve(&instance, &params, &config, 1, 100, seed).unwrap();
            let eight = solve(&instance, &params, &config, 8, 100, seed).unwrap();
            assert!(
                eight.objective <= one.objective + 1e-12,
                "seed {seed}: {} vs {}",
                eight.objective,
                one.objective
            );
            // The variant-0 entries coincide: same seed, same noise.
            assert_eq!(eight.per_variant[0].objective, one.per_variant[0].objective);
        }
    }

    #[test]
    fn gap_percent_matches_the_worked_example() {
        let g = gap_percent(10.41, 10.36).unwrap();
        assert!((g - 0.48).abs() <= 0.01, "gap {g}");
        assert_eq!(gap_percent(10.36, 10.36).unwrap(), 0.0);
        assert!(gap_percent(1.0, 0.0).is_err());
    }

    #[test]
    fn evaluate_reports_rows_gaps_and_aggregates() {
        let config = desk_config(16, 4);
        let params = desk_params(&config, 35);
        let mut records = Vec::new();
        for seed in 0..3 {
            let instance = generate_instance(7, 700 + seed).unwrap();
            let solution = (seed != 1).then(|| savings_solve(&instance).unwrap());
            records.push(DatasetRecord { instance, solution });
        }
        let report = evaluate(&records, &params, &config, 2, 100, 3).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows[0].gap_percent.is_some());
        assert!(report.rows[1].gap_percent.is_none());
        assert_eq!(report.aggregate.count, 2);

        let gaps: Vec<f64> = report.rows.iter().filter_map(|r| r.gap_percent).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((report.aggregate.mean_gap.unwrap() - mean).abs() <= 1e-12);
        let objs: f64 = report.rows.iter().map(|r| r.objective).sum::<f64>() / 3.0;
        assert!((report.aggregate.mean_obj - objs).abs() <= 1e-12);
        assert!(report.rows.iter().all(|r| r.feasible));

        let csv = eval_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "instance_id,variant,start,objective,feasible,wall_ms,gap_percent"
        );
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().ends_with("n/a"));

        let json = eval_json(&report).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["count"], 2);
        assert!(value["mean_gap"].is_number());
        assert!(value["std_gap"].is_number());
        assert!(value["mean_obj"].is_number());
        assert!(value["total_ms"].is_number());
    }

    #[test]
    fn unlabeled_only_dataset_yields_null_gap_aggregates() {
        let config = desk_config(16, 4);
        let params = desk_params(&config, 36);
        let records = vec![DatasetRecord {
            instance: generate_instance(6, 800).unwrap(),
            solution: None,
        }];
        let report = evaluate(&records, &params, &config, 1, 100, 1).unwrap();
        assert_eq!(report.aggregate.count, 0);
        assert!(report.aggregate.mean_gap.is_none());
        let value: serde_json::Value =
            serde_json::from_str(&eval_json(&report).unwrap()).unwrap();
        assert!(value["mean_gap"].is_null());
    }
}

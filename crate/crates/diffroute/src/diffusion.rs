//! Bernoulli-state discrete diffusion over same-route matrices.
//!
//! Forward corruption multiplies per-entry one-hot states by 2x2 symmetric
//! transition matrices whose flip rates follow a linear schedule; after the
//! full horizon every entry is near-uniform noise.  The reverse process
//! mixes the exact two-state posterior over a predicted clean matrix, and a
//! skip-step variant jumps several timesteps per application so inference
//! needs far fewer steps than the training horizon.

use ndarray::Array2;
use rand::Rng;

use crate::constraint::{ConstraintMatrix, EdgeProbabilities};
use crate::error::{Error, Result};

/// Binary matrix state at some diffusion timestep: 0/1 entries, zero
/// diagonal at t=0, symmetric whenever symmetric corruption is used.
pub type EdgeState = Array2<f64>;

/// Ordered (t, t_prev) pairs walked by reverse inference; the final pair's
/// t_prev is 0, the terminal collapse step.
pub type InferenceSchedule = Vec<(usize, usize)>;

type Mat2 = [[f64; 2]; 2];

fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// Linear flip-rate schedule with per-step and cumulative transition
/// matrices, all precomputed in double precision.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    q: Vec<Mat2>,
    qbar: Vec<Mat2>,
}

/// Build the schedule: beta_t interpolates linearly from `beta1` (t=1) to
/// `beta_t_max` (t=T), with both endpoints exact.  Cumulative products are
/// accumulated by sequential 2x2 multiplication.
pub fn make_schedule(t_max: usize, beta1: f64, beta_t_max: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(0.0..0.5).contains(&beta1) || !(0.0..0.5).contains(&beta_t_max) || beta1 > beta_t_max {
        return Err(Error::InvalidArgument(format!(
            "flip rates must satisfy 0 <= beta1 <= betaT < 0.5, got ({beta1}, {beta_t_max})"
        )));
    }
    let betas: Vec<f64> = if t_max == 1 {
        vec![beta1]
    } else {
        (1..=t_max)
            .map(|t| beta1 + (t - 1) as f64 * (beta_t_max - beta1) / (t_max - 1) as f64)
            .collect()
    };
    let q: Vec<Mat2> = betas
        .iter()
        .map(|&b| [[1.0 - b, b], [b, 1.0 - b]])
        .collect();
    let mut qbar = Vec::with_capacity(t_max + 1);
    qbar.push([[1.0, 0.0], [0.0, 1.0]]);
    for qt in &q {
        let prev = *qbar.last().unwrap();
        qbar.push(mat2_mul(&prev, qt));
    }
    Ok(NoiseSchedule {
        t_max,
        betas,
        q,
        qbar,
    })
}

impl NoiseSchedule {
    /// Final timestep T.
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Flip rate at step `t` (1-based).
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// One-step transition matrix Q_t (1-based).
    pub fn q_matrix(&self, t: usize) -> Mat2 {
        self.q[t - 1]
    }

    /// Cumulative transition matrix for reaching step `t` from step 0;
    /// `t = 0` gives the identity.
    pub fn qbar_matrix(&self, t: usize) -> Mat2 {
        self.qbar[t]
    }

    /// Probability that an entry at step `t` differs from its clean value.
    pub fn flip_prob(&self, t: usize) -> f64 {
        self.qbar[t][0][1]
    }

    /// Transition matrix bridging step `s` to step `t > s`, as the ordered
    /// product of the intermediate per-step matrices.
    pub fn q_between(&self, s: usize, t: usize) -> Mat2 {
        let mut m = [[1.0, 0.0], [0.0, 1.0]];
        for u in (s + 1)..=t {
            m = mat2_mul(&m, &self.q[u - 1]);
        }
        m
    }
}

/// Corrupt a clean matrix to step `t`: every off-diagonal entry flips
/// independently with the cumulative flip probability.  With `symmetric`
/// set, only the upper triangle draws and the lower mirrors it.
pub fn sample_xt(
    x0: &ConstraintMatrix,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
    symmetric: bool,
) -> Result<EdgeState> {
    if t < 1 || t > schedule.t_max {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside 1..={}",
            schedule.t_max
        )));
    }
    let n = x0.len();
    let flip = schedule.flip_prob(t);
    let mut xt = x0.to_array();
    if symmetric {
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(flip) {
                    xt[[i, j]] = 1.0 - xt[[i, j]];
                }
                xt[[j, i]] = xt[[i, j]];
            }
        }
    } else {
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.gen_bool(flip) {
                    xt[[i, j]] = 1.0 - xt[[i, j]];
                }
            }
        }
    }
    Ok(xt)
}

/// Exact one-step posterior q(x_{t-1} | x_t, x_0) for a single entry,
/// returned as probabilities for states (0, 1).
pub fn posterior(schedule: &NoiseSchedule, xt_bit: u8, x0_bit: u8, t: usize) -> [f64; 2] {
    posterior_between(schedule, xt_bit, x0_bit, t, t - 1)
}

/// Generalised posterior q(x_s | x_t, x_0) for s < t, using the bridged
/// transition between the two steps: Bayes over the two candidate states.
pub fn posterior_between(
    schedule: &NoiseSchedule,
    xt_bit: u8,
    x0_bit: u8,
    t: usize,
    s: usize,
) -> [f64; 2] {
    assert!(t >= 1 && s < t && t <= schedule.t_max, "bad step pair ({t}, {s})");
    let bridge = schedule.q_between(s, t);
    let prior = schedule.qbar_matrix(s);
    let xt = xt_bit as usize;
    let x0 = x0_bit as usize;
    let num = [bridge[0][xt] * prior[x0][0], bridge[1][xt] * prior[x0][1]];
    let den = num[0] + num[1];
    assert!(den > 0.0, "posterior denominator vanished at ({t}, {s})");
    [num[0] / den, num[1] / den]
}

/// Marginal probability that an entry is 1 at `t_prev` after one reverse
/// application from `t`, mixing the generalised posterior over the model's
/// clean-state belief `x0_prob1`.
pub fn reverse_entry_probability(
    schedule: &NoiseSchedule,
    xt_bit: u8,
    x0_prob1: f64,
    t: usize,
    t_prev: usize,
) -> f64 {
    let from_one = posterior_between(schedule, xt_bit, 1, t, t_prev)[1];
    let from_zero = posterior_between(schedule, xt_bit, 0, t, t_prev)[1];
    x0_prob1 * from_one + (1.0 - x0_prob1) * from_zero
}

/// One reverse-chain application: sample the state at `t_prev` given the
/// state at `t` and the model's clean-matrix probabilities.  At the terminal
/// step (`t_prev == 0`) the clean-state belief is thresholded instead of
/// sampled, making the chain end deterministic.  States are treated as
/// symmetric: the upper triangle is drawn and mirrored.
pub fn reverse_step(
    xt: &EdgeState,
    x0_probs: &EdgeProbabilities,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<EdgeState> {
    if t_prev >= t || t > schedule.t_max {
        return Err(Error::InvalidArgument(format!(
            "reverse pair ({t}, {t_prev}) invalid for horizon {}",
            schedule.t_max
        )));
    }
    let n = xt.nrows();
    if xt.dim() != (n, n) || x0_probs.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "state {:?} and probabilities {:?} must be square and equal",
            xt.dim(),
            x0_probs.dim()
        )));
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let p1 = 0.5 * (x0_probs[[i, j]] + x0_probs[[j, i]]);
            let bit = if t_prev == 0 {
                (p1 > 0.5) as u8 as f64
            } else {
                let xt_bit = xt[[i, j]] as u8;
                let prob = reverse_entry_probability(schedule, xt_bit, p1, t, t_prev);
                rng.gen_bool(prob.clamp(0.0, 1.0)) as u8 as f64
            };
            out[[i, j]] = bit;
            out[[j, i]] = bit;
        }
    }
    Ok(out)
}

/// Mean binary cross-entropy between predicted probabilities and the clean
/// matrix over the strict upper triangle.  Probabilities are clamped to
/// [1e-12, 1-1e-12] inside the logs; entries outside [0,1] are an error.
pub fn x0_loss(pred: &EdgeProbabilities, truth: &ConstraintMatrix) -> Result<f64> {
    let n = truth.len();
    if pred.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {:?}, expected ({n}, {n})",
            pred.dim()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "loss needs at least two customers".into(),
        ));
    }
    const CLAMP: f64 = 1e-12;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let p = pred[[i, j]];
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Numerical(format!(
                    "prediction entry ({i}, {j}) = {p} outside [0, 1]"
                )));
            }
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            let y = truth.same_route(i + 1, j + 1) as u8 as f64;
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Diagnostic per-entry KL divergence between the exact one-step posterior
/// and the model's mixed reverse distribution at step `t`.
pub fn kl_term(
    schedule: &NoiseSchedule,
    xt_bit: u8,
    x0_bit: u8,
    t: usize,
    x0_prob1: f64,
) -> f64 {
    let q = posterior(schedule, xt_bit, x0_bit, t);
    let from_one = posterior_between(schedule, xt_bit, 1, t, t - 1);
    let from_zero = posterior_between(schedule, xt_bit, 0, t, t - 1);
    let mut kl = 0.0;
    for v in 0..2 {
        if q[v] > 0.0 {
            let p = x0_prob1 * from_one[v] + (1.0 - x0_prob1) * from_zero[v];
            kl += q[v] * (q[v] / p).ln();
        }
    }
    kl
}

/// Evenly spaced reverse-inference schedule: `steps` timesteps from T down
/// to 1 (floor of linear spacing), paired consecutively, with a final
/// terminal pair (last_t, 0).
pub fn make_inference_schedule(t_max: usize, steps: usize) -> Result<InferenceSchedule> {
    if steps < 1 || steps > t_max {
        return Err(Error::InvalidArgument(format!(
            "inference steps {steps} outside 1..={t_max}"
        )));
    }
    let times: Vec<usize> = if steps == 1 {
        vec![t_max]
    } else {
        (0..steps)
            .map(|k| {
                let x = t_max as f64 - k as f64 * (t_max - 1) as f64 / (steps - 1) as f64;
                x.floor() as usize
            })
            .collect()
    };
    let mut pairs: InferenceSchedule = times.windows(2).map(|w| (w[0], w[1])).collect();
    pairs.push((*times.last().unwrap(), 0));
    Ok(pairs)
}

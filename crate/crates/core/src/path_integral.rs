//! Monte Carlo estimators of ξ = E[exp(−S/λ)] and of the saddle-point
//! controls from batches of uncontrolled rollouts.
//!
//! Weights are always formed as exp(−(Sᵢ − min S)/λ); the shift is added
//! back in log space.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{gain_matrices, phi_terminal, single_agent_gain, GameSpec, StateVector};
use crate::rng::RngStreamKey;
use crate::sde::{rollout_summary_with, ExitKind, Scratch, TimeGrid, Trajectory};

/// ESS below this fraction of N flags the estimate.
pub const LOW_ESS_FRACTION: f64 = 0.01;

/// How per-rollout terms are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Sequential sums in rollout-index order; results do not depend on the
    /// worker count.
    #[default]
    Ordered,
    /// Tree sums across workers; agrees with `Ordered` up to rounding.
    Parallel,
}

/// Costs and first-step noise pushes of N uncontrolled rollouts from one
/// origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub origin: StateVector,
    pub t: f64,
    /// Nominal step h.
    pub h: f64,
    /// Length of the first step (shorter than h only near the horizon).
    pub first_step: f64,
    pub costs: Vec<f64>,
    /// Σ⁽²⁾Δw₀ of rollout i at `first_noise[i*n₂..(i+1)*n₂]`.
    pub first_noise: Vec<f64>,
    pub noise_rows: usize,
    pub exit_kinds: Vec<ExitKind>,
    /// Rollouts that crossed the truncation radius of the safe set.
    pub truncation_hits: usize,
}

impl RolloutBatch {
    pub fn count(&self) -> usize {
        self.costs.len()
    }

    pub fn noise(&self, i: usize) -> &[f64] {
        &self.first_noise[i * self.noise_rows..(i + 1) * self.noise_rows]
    }

    pub fn exit_fraction(&self) -> f64 {
        let exits = self
            .exit_kinds
            .iter()
            .filter(|k| **k == ExitKind::BoundaryExit)
            .count();
        exits as f64 / self.count() as f64
    }
}

/// Simulate N uncontrolled rollouts from `(x, t)`; rollout i uses
/// `key.with_rollout(i)`.
pub fn generate_batch(spec: &GameSpec, x: &StateVector, t: f64, h: f64, n: usize, key: RngStreamKey) -> Result<RolloutBatch> {
    if n < 1 {
        return Err(Error::InvalidConfig("a rollout batch needs at least one rollout".into()));
    }
    if !spec.safe_set.contains(x.as_slice()) {
        return Err(Error::InvalidConfig("rollouts must start inside the safe set".into()));
    }
    let grid = TimeGrid::new(t, spec.horizon, h)?;
    let summaries = (0..n)
        .into_par_iter()
        .map_init(
            || Scratch::new(spec),
            |scratch, i| {
                rollout_summary_with(
                    spec,
                    x.as_slice(),
                    &grid,
                    key.with_rollout(i as u64).stream(),
                    scratch,
                )
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let n2 = spec.n_noise_rows();
    let mut costs = Vec::with_capacity(n);
    let mut first_noise = Vec::with_capacity(n * n2);
    let mut exit_kinds = Vec::with_capacity(n);
    let mut truncation_hits = 0;
    for s in summaries {
        costs.push(s.cost);
        first_noise.extend_from_slice(&s.first_noise);
        exit_kinds.push(s.exit_kind);
        truncation_hits += s.truncation_hit as usize;
    }
    if truncation_hits > 0 {
        log::warn!(
            "{} of {n} rollouts from t = {t} crossed the safe-set truncation radius",
            truncation_hits
        );
    }
    Ok(RolloutBatch {
        origin: x.clone(),
        t,
        h,
        first_step: grid.step_len(0),
        costs,
        first_noise,
        noise_rows: n2,
        exit_kinds,
        truncation_hits,
    })
}

/// S(τ) = φ(x(t_f)) + Σ_{k < exit} V(x_k, t_k)·h_k.
pub fn trajectory_cost(spec: &GameSpec, traj: &Trajectory) -> f64 {
    let mut running = 0.0;
    for k in 0..traj.exit_index {
        let hk = traj.times[k + 1] - traj.times[k];
        running += spec.dynamics.state_cost(traj.states[k].as_slice(), traj.times[k]) * hk;
    }
    running + phi_terminal(spec, traj.final_state().as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XiEstimate {
    pub value: f64,
    pub log_value: f64,
    /// Standard error of `value` (infinite for a single rollout).
    pub std_error: f64,
    /// (Σw)²/Σw², in [1, N].
    pub ess: f64,
    pub low_ess: bool,
    pub samples: usize,
}

/// Shifted weights of a batch.
struct Weights {
    w: Vec<f64>,
    shift: f64,
    sum: f64,
}

fn sum(values: impl IndexedParallelIterator<Item = f64> + Clone, seq: &[f64], reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Ordered => seq.iter().sum(),
        Reduction::Parallel => values.sum(),
    }
}

fn weights(batch: &RolloutBatch, lambda: f64, reduction: Reduction) -> Result<Weights> {
    let shift = batch.costs.iter().copied().fold(f64::INFINITY, f64::min);
    if !shift.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    let w: Vec<f64> = batch.costs.iter().map(|s| (-(s - shift) / lambda).exp()).collect();
    let total = sum(w.par_iter().copied(), &w, reduction);
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateBatch);
    }
    Ok(Weights { w, shift, sum: total })
}

fn xi_from_weights(wts: &Weights, lambda: f64, reduction: Reduction) -> XiEstimate {
    let n = wts.w.len();
    let nf = n as f64;
    let mean = wts.sum / nf;
    let sq: Vec<f64> = wts.w.iter().map(|w| w * w).collect();
    let sum_sq = sum(sq.par_iter().copied(), &sq, reduction);
    let dev: Vec<f64> = wts.w.iter().map(|w| (w - mean) * (w - mean)).collect();
    let sum_dev = sum(dev.par_iter().copied(), &dev, reduction);
    let scale = (-wts.shift / lambda).exp();
    let std_error = if n > 1 {
        scale * (sum_dev / (nf - 1.0) / nf).sqrt()
    } else {
        f64::INFINITY
    };
    let ess = wts.sum * wts.sum / sum_sq;
    XiEstimate {
        value: mean * scale,
        log_value: mean.ln() - wts.shift / lambda,
        std_error,
        ess,
        low_ess: ess < LOW_ESS_FRACTION * nf,
        samples: n,
    }
}

/// ξ estimate from an existing batch.
pub fn xi_from_batch(batch: &RolloutBatch, lambda: f64, reduction: Reduction) -> Result<XiEstimate> {
    Ok(xi_from_weights(&weights(batch, lambda, reduction)?, lambda, reduction))
}

/// ξ(x, t) from N fresh uncontrolled rollouts.
#[allow(clippy::too_many_arguments)]
pub fn estimate_xi(
    spec: &GameSpec,
    x: &StateVector,
    t: f64,
    lambda: f64,
    n: usize,
    h: f64,
    key: RngStreamKey,
    reduction: Reduction,
) -> Result<XiEstimate> {
    xi_from_batch(&generate_batch(spec, x, t, h, n, key)?, lambda, reduction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleControls {
    pub u_star: DVector<f64>,
    pub v_star: DVector<f64>,
    /// Σᵢwᵢ·noiseᵢ / (h₀·Σᵢwᵢ), the common factor of both controls.
    pub noise_average: DVector<f64>,
    pub xi: XiEstimate,
    pub ess: f64,
    pub low_ess: bool,
}

fn weighted_noise_average(batch: &RolloutBatch, wts: &Weights, reduction: Reduction) -> DVector<f64> {
    let n2 = batch.noise_rows;
    let acc = match reduction {
        Reduction::Ordered => {
            let mut acc = vec![0.0; n2];
            for (i, w) in wts.w.iter().enumerate() {
                for (a, e) in acc.iter_mut().zip(batch.noise(i)) {
                    *a += w * e;
                }
            }
            acc
        }
        Reduction::Parallel => (0..batch.count())
            .into_par_iter()
            .map(|i| batch.noise(i).iter().map(|e| wts.w[i] * e).collect::<Vec<_>>())
            .reduce(
                || vec![0.0; n2],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                    a
                },
            ),
    };
    DVector::from_vec(acc) / (batch.first_step * wts.sum)
}

/// Both players' controls from one batch:
/// u* = 𝒢_u·avg and v* = 𝒢_v·avg with avg the weighted first-step noise
/// push per unit time.
pub fn saddle_from_batch(spec: &GameSpec, batch: &RolloutBatch, lambda: f64, reduction: Reduction) -> Result<SaddleControls> {
    let gains = gain_matrices(spec, batch.origin.as_slice(), batch.t)?;
    let wts = weights(batch, lambda, reduction)?;
    let avg = weighted_noise_average(batch, &wts, reduction);
    let xi = xi_from_weights(&wts, lambda, reduction);
    if xi.low_ess {
        log::debug!(
            "low effective sample size {:.1} of {} at t = {}",
            xi.ess,
            batch.count(),
            batch.t
        );
    }
    Ok(SaddleControls {
        u_star: &gains.agent * &avg,
        v_star: &gains.adversary * &avg,
        noise_average: avg,
        ess: xi.ess,
        low_ess: xi.low_ess,
        xi,
    })
}

/// Saddle controls at `(x, t)` from N fresh rollouts.
#[allow(clippy::too_many_arguments)]
pub fn estimate_saddle_controls(
    spec: &GameSpec,
    x: &StateVector,
    t: f64,
    lambda: f64,
    n: usize,
    h: f64,
    key: RngStreamKey,
    reduction: Reduction,
) -> Result<SaddleControls> {
    gain_matrices(spec, x.as_slice(), t)?;
    saddle_from_batch(spec, &generate_batch(spec, x, t, h, n, key)?, lambda, reduction)
}

/// Control of an agent that plans as if no adversary existed, with its own
/// temperature `lambda`.
pub fn single_agent_from_batch(
    spec: &GameSpec,
    batch: &RolloutBatch,
    lambda: f64,
    reduction: Reduction,
) -> Result<(DVector<f64>, XiEstimate)> {
    let gain: DMatrix<f64> = single_agent_gain(spec, batch.origin.as_slice(), batch.t)?;
    let wts = weights(batch, lambda, reduction)?;
    let avg = weighted_noise_average(batch, &wts, reduction);
    Ok((gain * avg, xi_from_weights(&wts, lambda, reduction)))
}

/// J = −λ log ξ.
pub fn value_from_xi(xi: &XiEstimate, lambda: f64) -> f64 {
    -lambda * xi.log_value
}

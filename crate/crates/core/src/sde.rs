//! Euler–Maruyama simulation of the controlled and uncontrolled game SDE with
//! first-exit detection against the safe set.
//!
//! A rollout started at `(x, t)` visits the times `t + k·h` for as long as
//! they precede the horizon, then a final step lands exactly on `T`. Each step
//! draws `noise_dim` standard normals from the rollout's keyed stream, scaled
//! by the square root of that step's length.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::game::{GameSpec, StateVector};
use crate::rng::{NoiseIncrement, NoiseStream, RngStreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitKind {
    BoundaryExit,
    HorizonEnd,
}

impl ExitKind {
    pub fn label(self) -> &'static str {
        match self {
            ExitKind::BoundaryExit => "boundary",
            ExitKind::HorizonEnd => "horizon",
        }
    }
}

/// Fixed-step grid on `[start, end]` whose last step may be shorter than `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub h: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(start: f64, end: f64, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidConfig(format!("step {h} must be positive")));
        }
        if !(start < end) {
            return Err(Error::InvalidConfig(format!(
                "start time {start} must precede the horizon {end}"
            )));
        }
        // Remainders below a tiny fraction of h are rounding, not a step.
        let steps = (((end - start) / h) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Ok(Self { start, end, h, steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.end
        } else {
            self.start + k as f64 * self.h
        }
    }

    /// Length of step `k`, the interval `[time(k), time(k+1)]`.
    #[inline]
    pub fn step_len(&self, k: usize) -> f64 {
        self.time(k + 1) - self.time(k)
    }
}

/// One discretized sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub exit_kind: ExitKind,
    pub exit_time: f64,
    pub exit_index: usize,
    /// Σ⁽²⁾Δw over the first step, restricted to the partition rows.
    pub first_noise: Vec<f64>,
    pub first_step: f64,
    /// The path crossed the truncation radius of an unbounded safe set.
    pub truncation_hit: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> &StateVector {
        &self.states[self.exit_index]
    }
}

/// A closed-loop path with the controls applied during each step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledTrajectory {
    pub path: Trajectory,
    /// `controls_u[k]` acts on `[times[k], times[k+1]]`.
    pub controls_u: Vec<DVector<f64>>,
    pub controls_v: Vec<DVector<f64>>,
}

/// Agent or adversary feedback law.
pub trait Policy {
    fn control(&mut self, x: &[f64], t: f64, step: usize) -> Result<DVector<f64>>;
}

impl<F> Policy for F
where
    F: FnMut(&[f64], f64, usize) -> Result<DVector<f64>>,
{
    fn control(&mut self, x: &[f64], t: f64, step: usize) -> Result<DVector<f64>> {
        self(x, t, step)
    }
}

/// Both players' controls from one evaluation (they may share work).
pub trait JointPolicy {
    fn controls(&mut self, x: &[f64], t: f64, step: usize) -> Result<(DVector<f64>, DVector<f64>)>;
}

struct PolicyPair<'a> {
    u: &'a mut dyn Policy,
    v: &'a mut dyn Policy,
}

impl JointPolicy for PolicyPair<'_> {
    fn controls(&mut self, x: &[f64], t: f64, step: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        Ok((self.u.control(x, t, step)?, self.v.control(x, t, step)?))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy(pub usize);

impl Policy for ZeroPolicy {
    fn control(&mut self, _x: &[f64], _t: f64, _step: usize) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.0))
    }
}

/// Reusable buffers for one simulation thread.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    pub x: Vec<f64>,
    pub next: Vec<f64>,
    pub drift: Vec<f64>,
    pub diffused: Vec<f64>,
    pub dw: Vec<f64>,
}

impl Scratch {
    pub fn new(spec: &GameSpec) -> Self {
        Self {
            x: vec![0.0; spec.state_dim],
            next: vec![0.0; spec.state_dim],
            drift: vec![0.0; spec.state_dim],
            diffused: vec![0.0; spec.state_dim],
            dw: vec![0.0; spec.noise_dim],
        }
    }
}

/// `out = x + f(x,t)h + push·h + Σ(x,t)dw`, with `diffused` receiving Σdw.
#[inline]
#[allow(clippy::too_many_arguments)]
fn euler_maruyama_into(
    spec: &GameSpec,
    x: &[f64],
    t: f64,
    h: f64,
    push: Option<&[f64]>,
    dw: &[f64],
    drift: &mut [f64],
    diffused: &mut [f64],
    out: &mut [f64],
) {
    spec.dynamics.drift(x, t, drift);
    spec.dynamics.apply_diffusion(x, t, dw, diffused);
    match push {
        Some(p) => {
            for i in 0..x.len() {
                out[i] = x[i] + drift[i] * h + p[i] * h + diffused[i];
            }
        }
        None => {
            for i in 0..x.len() {
                out[i] = x[i] + drift[i] * h + diffused[i];
            }
        }
    }
}

fn control_push(spec: &GameSpec, x: &[f64], t: f64, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    spec.dynamics.gain_u(x, t) * u + spec.dynamics.gain_v(x, t) * v
}

fn check_dims(spec: &GameSpec, u: &DVector<f64>, v: &DVector<f64>) -> Result<()> {
    if u.len() != spec.agent_dim {
        return Err(Error::DimensionMismatch {
            what: "agent control",
            expected: spec.agent_dim,
            got: u.len(),
        });
    }
    if v.len() != spec.adversary_dim {
        return Err(Error::DimensionMismatch {
            what: "adversary control",
            expected: spec.adversary_dim,
            got: v.len(),
        });
    }
    Ok(())
}

/// One explicit Euler–Maruyama step of length `dw.step`.
pub fn em_step(
    spec: &GameSpec,
    x: &StateVector,
    t: f64,
    u: &DVector<f64>,
    v: &DVector<f64>,
    dw: &NoiseIncrement,
) -> Result<StateVector> {
    check_dims(spec, u, v)?;
    if x.dim() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: spec.state_dim,
            got: x.dim(),
        });
    }
    if dw.dw.len() != spec.noise_dim {
        return Err(Error::DimensionMismatch {
            what: "noise increment",
            expected: spec.noise_dim,
            got: dw.dw.len(),
        });
    }
    if !(dw.step > 0.0) {
        return Err(Error::InvalidConfig("step must be positive".into()));
    }
    let n = spec.state_dim;
    let push = control_push(spec, x.as_slice(), t, u, v);
    let (mut drift, mut diffused, mut out) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    euler_maruyama_into(
        spec,
        x.as_slice(),
        t,
        dw.step,
        Some(push.as_slice()),
        &dw.dw,
        &mut drift,
        &mut diffused,
        &mut out,
    );
    let next = StateVector::new(out);
    if !next.is_finite() {
        return Err(Error::NonFiniteState { step: 0, time: t + dw.step });
    }
    Ok(next)
}

fn check_start(spec: &GameSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: spec.state_dim,
            got: x.len(),
        });
    }
    if !spec.safe_set.contains(x) {
        return Err(Error::InvalidConfig(
            "rollouts must start inside the safe set".into(),
        ));
    }
    Ok(())
}

fn partition_values(spec: &GameSpec, full: &[f64]) -> Vec<f64> {
    spec.partition_rows.iter().map(|&r| full[r]).collect()
}

/// Outcome of an uncontrolled rollout without the stored path.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSummary {
    /// S(τ) = φ(x(t_f)) + Σ V(x_k,t_k)·h_k.
    pub cost: f64,
    pub exit_kind: ExitKind,
    pub exit_time: f64,
    pub first_noise: Vec<f64>,
    pub truncation_hit: bool,
}

/// Simulate dx̂ = f dt + Σ dw from `(x, t)` until exit, accumulating S(τ)
/// without storing the path. Bitwise equal to running [`rollout_uncontrolled`]
/// and then `trajectory_cost` on the result.
pub fn rollout_summary(spec: &GameSpec, x: &[f64], t: f64, h: f64, key: RngStreamKey) -> Result<RolloutSummary> {
    check_start(spec, x)?;
    let grid = TimeGrid::new(t, spec.horizon, h)?;
    let mut s = Scratch::new(spec);
    rollout_summary_with(spec, x, &grid, key.stream(), &mut s)
}

pub(crate) fn rollout_summary_with(
    spec: &GameSpec,
    x0: &[f64],
    grid: &TimeGrid,
    mut stream: NoiseStream,
    s: &mut Scratch,
) -> Result<RolloutSummary> {
    let dyns = &*spec.dynamics;
    let safe = &*spec.safe_set;
    s.x.copy_from_slice(x0);
    let mut running = 0.0;
    let mut first_noise = Vec::new();
    let mut truncation_hit = false;
    let steps = grid.steps();
    for k in 0..steps {
        let tk = grid.time(k);
        let hk = grid.step_len(k);
        stream.fill_increment(hk, &mut s.dw);
        running += dyns.state_cost(&s.x, tk) * hk;
        euler_maruyama_into(spec, &s.x, tk, hk, None, &s.dw, &mut s.drift, &mut s.diffused, &mut s.next);
        if k == 0 {
            first_noise = partition_values(spec, &s.diffused);
        }
        std::mem::swap(&mut s.x, &mut s.next);
        if !s.x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState {
                step: k + 1,
                time: grid.time(k + 1),
            });
        }
        truncation_hit |= safe.beyond_truncation(&s.x);
        if !safe.contains(&s.x) {
            return Ok(RolloutSummary {
                cost: running + spec.failure_weight,
                exit_kind: ExitKind::BoundaryExit,
                exit_time: grid.time(k + 1),
                first_noise,
                truncation_hit,
            });
        }
    }
    Ok(RolloutSummary {
        cost: running + crate::game::phi_terminal(spec, &s.x),
        exit_kind: ExitKind::HorizonEnd,
        exit_time: grid.end,
        first_noise,
        truncation_hit,
    })
}

/// Simulate the uncontrolled SDE dx̂ = f dt + Σ dw from `(x, t)` until the
/// first discrete state outside X_s or the horizon.
pub fn rollout_uncontrolled(spec: &GameSpec, x: &StateVector, t: f64, h: f64, key: RngStreamKey) -> Result<Trajectory> {
    let mut zero_u = ZeroPolicy(spec.agent_dim);
    let mut zero_v = ZeroPolicy(spec.adversary_dim);
    let mut pair = PolicyPair {
        u: &mut zero_u,
        v: &mut zero_v,
    };
    simulate(spec, x, t, h, key, &mut pair, false).map(|c| c.path)
}

/// Simulate the game SDE under separate feedback laws for both players.
pub fn rollout_controlled(
    spec: &GameSpec,
    x: &StateVector,
    t: f64,
    h: f64,
    policy_u: &mut dyn Policy,
    policy_v: &mut dyn Policy,
    key: RngStreamKey,
) -> Result<ControlledTrajectory> {
    let mut pair = PolicyPair { u: policy_u, v: policy_v };
    simulate(spec, x, t, h, key, &mut pair, true)
}

/// Simulate the game SDE under a joint feedback law.
pub fn rollout_joint(
    spec: &GameSpec,
    x: &StateVector,
    t: f64,
    h: f64,
    policy: &mut dyn JointPolicy,
    key: RngStreamKey,
) -> Result<ControlledTrajectory> {
    simulate(spec, x, t, h, key, policy, true)
}

fn simulate(
    spec: &GameSpec,
    x0: &StateVector,
    t: f64,
    h: f64,
    key: RngStreamKey,
    policy: &mut dyn JointPolicy,
    controlled: bool,
) -> Result<ControlledTrajectory> {
    check_start(spec, x0.as_slice())?;
    let grid = TimeGrid::new(t, spec.horizon, h)?;
    let mut stream = key.stream();
    let mut s = Scratch::new(spec);
    s.x.copy_from_slice(x0.as_slice());

    let steps = grid.steps();
    let mut times = vec![grid.time(0)];
    let mut states = vec![x0.clone()];
    let (mut controls_u, mut controls_v) = (Vec::new(), Vec::new());
    let mut first_noise = Vec::new();
    let mut truncation_hit = false;
    let mut exit_kind = ExitKind::HorizonEnd;

    for k in 0..steps {
        let tk = grid.time(k);
        let hk = grid.step_len(k);
        stream.fill_increment(hk, &mut s.dw);
        let push = if controlled {
            let (u, v) = policy.controls(&s.x, tk, k)?;
            check_dims(spec, &u, &v)?;
            if !(u.iter().chain(v.iter()).all(|c| c.is_finite())) {
                return Err(Error::PolicyFailure(format!("non-finite control at t = {tk}")));
            }
            let push = control_push(spec, &s.x, tk, &u, &v);
            controls_u.push(u);
            controls_v.push(v);
            Some(push)
        } else {
            None
        };
        euler_maruyama_into(
            spec,
            &s.x,
            tk,
            hk,
            push.as_ref().map(|p| p.as_slice()),
            &s.dw,
            &mut s.drift,
            &mut s.diffused,
            &mut s.next,
        );
        if k == 0 {
            first_noise = partition_values(spec, &s.diffused);
        }
        std::mem::swap(&mut s.x, &mut s.next);
        if !s.x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState {
                step: k + 1,
                time: grid.time(k + 1),
            });
        }
        times.push(grid.time(k + 1));
        states.push(StateVector::from_slice(&s.x));
        truncation_hit |= spec.safe_set.beyond_truncation(&s.x);
        if !spec.safe_set.contains(&s.x) {
            exit_kind = ExitKind::BoundaryExit;
            break;
        }
    }
    let exit_index = states.len() - 1;
    Ok(ControlledTrajectory {
        path: Trajectory {
            exit_time: times[exit_index],
            times,
            states,
            exit_kind,
            exit_index,
            first_noise,
            first_step: grid.step_len(0),
            truncation_hit,
        },
        controls_u,
        controls_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_lands_on_horizon() {
        let g = TimeGrid::new(0.0, 2.0, 0.01).unwrap();
        assert_eq!(g.steps(), 200);
        assert_eq!(g.time(200), 2.0);
        let g = TimeGrid::new(0.0, 1.0, 0.3).unwrap();
        assert_eq!(g.steps(), 4);
        assert!((g.step_len(3) - 0.1).abs() < 1e-12);
        let g = TimeGrid::new(1.995, 2.0, 0.01).unwrap();
        assert_eq!(g.steps(), 1);
        assert!((g.step_len(0) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(TimeGrid::new(0.0, 1.0, 0.0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 0.1).is_err());
    }
}

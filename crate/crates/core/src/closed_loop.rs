//! Receding-horizon play of the game against the true system.
//!
//! Every `decision_steps` steps both players' controls are re-estimated from
//! one fresh rollout batch at the current state and held until the next
//! decision. Trial `i` draws its system noise from
//! `RngStreamKey::system(seed, i)` and the batch of decision `d` from
//! `RngStreamKey::new(seed, i, d, ·)`, so configurations that share a seed
//! see common random numbers.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{resolve_lambda, resolve_single_agent_lambda, GameSpec, LambdaCertificate, StateVector};
use crate::path_integral::{generate_batch, saddle_from_batch, single_agent_from_batch, Reduction};
use crate::rng::RngStreamKey;
use crate::sde::{rollout_joint, ControlledTrajectory, ExitKind, JointPolicy};
use crate::stats::{mean_and_se, std_dev, wilson_interval, Z95};

/// Probes drawn when certifying λ for a planner.
pub const LAMBDA_PROBES: usize = 100;

/// Feedback law with state argument and time.
pub type FixedLaw = Arc<dyn Fn(&[f64], f64) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub enum PolicyKind {
    /// The side's component of the path-integral saddle controls.
    PathIntegralSaddle,
    Zero,
    /// Path-integral control of the one-player problem without the opponent.
    SingleAgentPI,
    Fixed(FixedLaw),
}

impl fmt::Debug for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::PathIntegralSaddle => f.write_str("PathIntegralSaddle"),
            PolicyKind::Zero => f.write_str("Zero"),
            PolicyKind::SingleAgentPI => f.write_str("SingleAgentPI"),
            PolicyKind::Fixed(_) => f.write_str("Fixed"),
        }
    }
}

/// `c ↦ scale·c + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub scale: f64,
    pub offset: Vec<f64>,
}

impl Perturbation {
    pub fn scaling(scale: f64, dim: usize) -> Self {
        Self {
            scale,
            offset: vec![0.0; dim],
        }
    }

    pub fn offset(offset: Vec<f64>) -> Self {
        Self { scale: 1.0, offset }
    }

    fn apply(&self, c: DVector<f64>) -> DVector<f64> {
        c * self.scale + DVector::from_column_slice(&self.offset)
    }

    pub fn describe(&self) -> String {
        format!("scale {} offset {:?}", self.scale, self.offset)
    }
}

#[derive(Debug, Clone)]
pub struct PolicyHandle {
    pub kind: PolicyKind,
    pub perturbation: Option<Perturbation>,
}

impl PolicyHandle {
    pub fn saddle() -> Self {
        Self {
            kind: PolicyKind::PathIntegralSaddle,
            perturbation: None,
        }
    }

    pub fn zero() -> Self {
        Self {
            kind: PolicyKind::Zero,
            perturbation: None,
        }
    }

    pub fn unaware() -> Self {
        Self {
            kind: PolicyKind::SingleAgentPI,
            perturbation: None,
        }
    }

    pub fn fixed(law: FixedLaw) -> Self {
        Self {
            kind: PolicyKind::Fixed(law),
            perturbation: None,
        }
    }

    pub fn perturbed(mut self, p: Perturbation) -> Self {
        self.perturbation = Some(p);
        self
    }

    fn is_saddle(&self) -> bool {
        matches!(self.kind, PolicyKind::PathIntegralSaddle)
    }

    fn is_single(&self) -> bool {
        matches!(self.kind, PolicyKind::SingleAgentPI)
    }
}

/// Sampling and cadence of the online controllers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoopSettings {
    pub h: f64,
    pub rollouts: usize,
    /// Controls are re-estimated every this many steps of length h.
    pub decision_steps: usize,
    pub master_seed: u64,
    pub reduction: Reduction,
}

/// A game with its certified temperatures and controller settings.
#[derive(Debug, Clone)]
pub struct Planner {
    pub spec: GameSpec,
    pub lambda: LambdaCertificate,
    pub single_agent_lambda: Option<LambdaCertificate>,
    pub settings: ClosedLoopSettings,
}

impl Planner {
    pub fn new(spec: GameSpec, settings: ClosedLoopSettings) -> Result<Self> {
        if settings.decision_steps == 0 || settings.rollouts == 0 {
            return Err(Error::InvalidConfig("decision_steps and rollouts must be positive".into()));
        }
        let probes = spec.probe_points(LAMBDA_PROBES, settings.master_seed);
        spec.validate(&probes)?;
        let lambda = resolve_lambda(&spec, &probes)?;
        let single_agent_lambda = resolve_single_agent_lambda(&spec, &probes).ok();
        Ok(Self {
            spec,
            lambda,
            single_agent_lambda,
            settings,
        })
    }
}

/// Per-trial cost decomposition; every integral is a left Riemann sum over
/// the steps before exit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostLedger {
    /// φ(x(t_f)).
    pub terminal: f64,
    /// ∫V dt.
    pub state_cost: f64,
    /// ∫½uᵀR_u u dt.
    pub agent_energy: f64,
    /// ∫½vᵀR_v v dt.
    pub adversary_energy: f64,
    /// ∫vᵀv dt.
    pub adversary_raw: f64,
    pub exit_kind: ExitKind,
    pub exit_time: f64,
    /// Decisions that drew a rollout batch.
    pub decisions: usize,
    pub low_ess_decisions: usize,
    pub truncation_hit: bool,
}

impl CostLedger {
    /// ∫(V + ½uᵀR_u u − ½vᵀR_v v) dt.
    pub fn running(&self) -> f64 {
        self.state_cost + self.agent_energy - self.adversary_energy
    }

    /// Game cost φ + ∫L dt.
    pub fn total(&self) -> f64 {
        self.terminal + self.running()
    }

    /// Agent's own performance φ + ∫(V + ½uᵀR_u u) dt.
    pub fn performance(&self) -> f64 {
        self.terminal + self.state_cost + self.agent_energy
    }

    pub fn failed(&self) -> bool {
        self.exit_kind == ExitKind::BoundaryExit
    }
}

struct TrialController<'a> {
    planner: &'a Planner,
    policy_u: &'a PolicyHandle,
    policy_v: &'a PolicyHandle,
    trial: u64,
    held: Option<(DVector<f64>, DVector<f64>)>,
    decisions: usize,
    low_ess: usize,
}

impl TrialController<'_> {
    fn decide(&mut self, x: &[f64], t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let p = self.planner;
        let spec = &p.spec;
        let s = &p.settings;
        if self.policy_v.is_single() {
            return Err(Error::PolicyFailure(
                "the one-player controller is only defined for the agent".into(),
            ));
        }
        let needs_batch = [self.policy_u, self.policy_v]
            .iter()
            .any(|h| h.is_saddle() || h.is_single());
        let (mut saddle, mut single) = (None, None);
        if needs_batch {
            let key = RngStreamKey::new(s.master_seed, self.trial, self.decisions as u64, 0);
            let batch = generate_batch(spec, &StateVector::from_slice(x), t, s.h, s.rollouts, key)?;
            if self.policy_u.is_saddle() || self.policy_v.is_saddle() {
                let c = saddle_from_batch(spec, &batch, p.lambda.lambda, s.reduction)?;
                self.low_ess += c.low_ess as usize;
                saddle = Some(c);
            }
            if self.policy_u.is_single() {
                let lam = p.single_agent_lambda.as_ref().ok_or_else(|| {
                    Error::NoValidLambda("the one-player problem has no valid lambda".into())
                })?;
                let (u, xi) = single_agent_from_batch(spec, &batch, lam.lambda, s.reduction)?;
                if saddle.is_none() {
                    self.low_ess += xi.low_ess as usize;
                }
                single = Some(u);
            }
            // Counts rollout batches; zero and fixed play never sample.
            self.decisions += 1;
        }
        let pick = |h: &PolicyHandle, dim: usize, agent: bool| -> DVector<f64> {
            let raw = match &h.kind {
                PolicyKind::Zero => DVector::zeros(dim),
                PolicyKind::Fixed(law) => law(x, t),
                PolicyKind::PathIntegralSaddle => {
                    let c = saddle.as_ref().expect("saddle batch computed");
                    if agent {
                        c.u_star.clone()
                    } else {
                        c.v_star.clone()
                    }
                }
                PolicyKind::SingleAgentPI => single.clone().expect("single-agent control computed"),
            };
            match &h.perturbation {
                Some(pert) => pert.apply(raw),
                None => raw,
            }
        };
        Ok((
            pick(self.policy_u, spec.agent_dim, true),
            pick(self.policy_v, spec.adversary_dim, false),
        ))
    }
}

impl JointPolicy for TrialController<'_> {
    fn controls(&mut self, x: &[f64], t: f64, step: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        if self.held.is_none() || step % self.planner.settings.decision_steps == 0 {
            self.held = Some(self.decide(x, t)?);
        }
        Ok(self.held.clone().expect("controls held"))
    }
}

/// Ledger of a finished closed-loop path.
pub fn ledger_for(spec: &GameSpec, traj: &ControlledTrajectory) -> CostLedger {
    let path = &traj.path;
    let (mut state_cost, mut agent_energy, mut adversary_energy, mut adversary_raw) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..path.exit_index {
        let (x, t) = (path.states[k].as_slice(), path.times[k]);
        let hk = path.times[k + 1] - t;
        let (u, v) = (&traj.controls_u[k], &traj.controls_v[k]);
        let ru = spec.dynamics.control_weight_u(x, t);
        let rv = spec.dynamics.control_weight_v(x, t);
        state_cost += spec.dynamics.state_cost(x, t) * hk;
        agent_energy += 0.5 * (u.transpose() * ru * u)[0] * hk;
        adversary_energy += 0.5 * (v.transpose() * rv * v)[0] * hk;
        adversary_raw += v.dot(v) * hk;
    }
    CostLedger {
        terminal: crate::game::phi_terminal(spec, path.final_state().as_slice()),
        state_cost,
        agent_energy,
        adversary_energy,
        adversary_raw,
        exit_kind: path.exit_kind,
        exit_time: path.exit_time,
        decisions: 0,
        low_ess_decisions: 0,
        truncation_hit: path.truncation_hit,
    }
}

/// One receding-horizon trial from the game's (x₀, t₀).
pub fn run_trial(
    planner: &Planner,
    policy_u: &PolicyHandle,
    policy_v: &PolicyHandle,
    trial_index: u64,
) -> Result<(ControlledTrajectory, CostLedger)> {
    let spec = &planner.spec;
    run_trial_from(planner, policy_u, policy_v, &spec.x0, spec.t0, trial_index)
}

/// One receding-horizon trial from `(x, t)`.
pub fn run_trial_from(
    planner: &Planner,
    policy_u: &PolicyHandle,
    policy_v: &PolicyHandle,
    x: &StateVector,
    t: f64,
    trial_index: u64,
) -> Result<(ControlledTrajectory, CostLedger)> {
    let s = &planner.settings;
    let mut ctl = TrialController {
        planner,
        policy_u,
        policy_v,
        trial: trial_index,
        held: None,
        decisions: 0,
        low_ess: 0,
    };
    let traj = rollout_joint(
        &planner.spec,
        x,
        t,
        s.h,
        &mut ctl,
        RngStreamKey::system(s.master_seed, trial_index),
    )?;
    let mut ledger = ledger_for(&planner.spec, &traj);
    ledger.decisions = ctl.decisions;
    ledger.low_ess_decisions = ctl.low_ess;
    Ok((traj, ledger))
}

/// Closed-loop statistics over a trial set.
#[derive(Debug, Clone)]
pub struct GameOutcome {
    pub trials: usize,
    pub failures: usize,
    pub p_fail: f64,
    /// Wilson 95% interval of `p_fail`.
    pub ci: (f64, f64),
    pub cost_mean: f64,
    pub cost_std: f64,
    pub cost_se: f64,
    pub performance_mean: f64,
    pub performance_se: f64,
    pub control_energy_u: f64,
    pub control_energy_v: f64,
    pub adversary_energy_raw: f64,
    pub low_ess_decisions: usize,
    pub decisions: usize,
    pub truncation_hits: usize,
    pub ledgers: Vec<CostLedger>,
    /// Full paths of the first recorded trials, keyed by trial index.
    pub recorded: Vec<(u64, ControlledTrajectory)>,
}

impl GameOutcome {
    pub fn from_ledgers(ledgers: Vec<CostLedger>, recorded: Vec<(u64, ControlledTrajectory)>) -> Self {
        let trials = ledgers.len();
        let failures = ledgers.iter().filter(|l| l.failed()).count();
        let costs: Vec<f64> = ledgers.iter().map(|l| l.total()).collect();
        let perf: Vec<f64> = ledgers.iter().map(|l| l.performance()).collect();
        let (cost_mean, cost_se) = mean_and_se(&costs);
        let (performance_mean, performance_se) = mean_and_se(&perf);
        let mean_of = |f: fn(&CostLedger) -> f64| {
            if trials == 0 {
                f64::NAN
            } else {
                ledgers.iter().map(f).sum::<f64>() / trials as f64
            }
        };
        Self {
            trials,
            failures,
            p_fail: if trials == 0 { f64::NAN } else { failures as f64 / trials as f64 },
            ci: wilson_interval(failures, trials, Z95),
            cost_mean,
            cost_std: std_dev(&costs),
            cost_se,
            performance_mean,
            performance_se,
            control_energy_u: mean_of(|l| l.agent_energy),
            control_energy_v: mean_of(|l| l.adversary_energy),
            adversary_energy_raw: mean_of(|l| l.adversary_raw),
            low_ess_decisions: ledgers.iter().map(|l| l.low_ess_decisions).sum(),
            decisions: ledgers.iter().map(|l| l.decisions).sum(),
            truncation_hits: ledgers.iter().filter(|l| l.truncation_hit).count(),
            ledgers,
            recorded,
        }
    }
}

/// Run `trials` independent trials (indices 0..trials) and aggregate; the
/// first `record` paths are kept.
pub fn estimate_failure_probability(
    planner: &Planner,
    policy_u: &PolicyHandle,
    policy_v: &PolicyHandle,
    trials: usize,
    record: usize,
) -> Result<GameOutcome> {
    let results = (0..trials as u64)
        .into_par_iter()
        .map(|i| run_trial(planner, policy_u, policy_v, i))
        .collect::<Result<Vec<_>>>()?;
    let mut ledgers = Vec::with_capacity(trials);
    let mut recorded = Vec::new();
    for (i, (traj, ledger)) in results.into_iter().enumerate() {
        ledgers.push(ledger);
        if i < record {
            recorded.push((i as u64, traj));
        }
    }
    let outcome = GameOutcome::from_ledgers(ledgers, recorded);
    if outcome.low_ess_decisions > 0 {
        log::info!(
            "{}: {} of {} decisions had low effective sample size",
            planner.spec.name,
            outcome.low_ess_decisions,
            outcome.decisions
        );
    }
    if outcome.truncation_hits > 0 {
        log::warn!(
            "{}: {} trials crossed the safe-set truncation radius",
            planner.spec.name,
            outcome.truncation_hits
        );
    }
    Ok(outcome)
}

/// Monte Carlo C(x, t; u*, v*) with its standard error.
pub fn empirical_game_value(planner: &Planner, x: &StateVector, t: f64, trials: usize) -> Result<(f64, f64)> {
    let (u, v) = (PolicyHandle::saddle(), PolicyHandle::saddle());
    let costs = (0..trials as u64)
        .into_par_iter()
        .map(|i| run_trial_from(planner, &u, &v, x, t, i).map(|(_, l)| l.total()))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_and_se(&costs))
}

/// Adversary tested against the attenuation bound.
#[derive(Debug, Clone)]
pub struct BoundedAdversary {
    pub label: String,
    pub policy: PolicyHandle,
    /// Declared energy bound δ; `None` uses the measured energy.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem3Row {
    pub label: String,
    pub delta: f64,
    pub measured_energy: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    /// √(se(perf*)² + (γ²/2)²·se(δ_γ)² + se(perf_v)²).
    pub combined_se: f64,
    /// Standard error of the per-trial differences under common noise.
    pub paired_se: f64,
    pub p_fail: f64,
    pub holds: bool,
}

#[derive(Debug, Clone)]
pub struct Theorem3Report {
    pub gamma_sq: f64,
    pub delta_gamma: f64,
    pub saddle_performance: f64,
    pub saddle: GameOutcome,
    pub rows: Vec<Theorem3Row>,
}

/// Check the attenuation bound
/// E^{u*,v*}[perf] + (γ²/2)(δ − δ_γ) ≥ E^{u*,v}[perf] for each adversary,
/// with energies measured as ∫vᵀ(R_v/γ²)v dt. A row holds when
/// LHS − RHS ≥ −2·combined_se.
pub fn theorem3_check(
    planner: &Planner,
    gamma_sq: f64,
    adversaries: &[BoundedAdversary],
    trials: usize,
    baseline: Option<GameOutcome>,
) -> Result<Theorem3Report> {
    let agent = PolicyHandle::saddle();
    let saddle = match baseline {
        Some(b) => b,
        None => estimate_failure_probability(planner, &agent, &PolicyHandle::saddle(), trials, 0)?,
    };
    let energy = |l: &CostLedger| 2.0 * l.adversary_energy / gamma_sq;
    let star_perf: Vec<f64> = saddle.ledgers.iter().map(|l| l.performance()).collect();
    let star_energy: Vec<f64> = saddle.ledgers.iter().map(energy).collect();
    let (perf_star, se_perf_star) = mean_and_se(&star_perf);
    let (delta_gamma, se_delta_gamma) = mean_and_se(&star_energy);

    let mut rows = Vec::new();
    for adv in adversaries {
        // Common random numbers make a replay of (u*, v*) identical to the baseline.
        let replay = matches!(adv.policy.kind, PolicyKind::PathIntegralSaddle) && adv.policy.perturbation.is_none();
        let out = if replay && saddle.trials == trials {
            saddle.clone()
        } else {
            estimate_failure_probability(planner, &agent, &adv.policy, trials, 0)?
        };
        let perf: Vec<f64> = out.ledgers.iter().map(|l| l.performance()).collect();
        let en: Vec<f64> = out.ledgers.iter().map(energy).collect();
        let (perf_v, se_perf_v) = mean_and_se(&perf);
        let (measured, _) = mean_and_se(&en);
        let delta = adv.delta.unwrap_or(measured);
        if measured > delta * (1.0 + 1e-12) {
            return Err(Error::EnergyBoundViolated {
                measured,
                declared: delta,
            });
        }
        let half = gamma_sq / 2.0;
        let lhs = perf_star + half * (delta - delta_gamma);
        let combined_se = (se_perf_star.powi(2) + (half * se_delta_gamma).powi(2) + se_perf_v.powi(2)).sqrt();
        let diffs: Vec<f64> = (0..star_perf.len().min(perf.len()))
            .map(|i| star_perf[i] + half * (delta - star_energy[i]) - perf[i])
            .collect();
        let (_, paired_se) = mean_and_se(&diffs);
        let gap = lhs - perf_v;
        rows.push(Theorem3Row {
            label: adv.label.clone(),
            delta,
            measured_energy: measured,
            lhs,
            rhs: perf_v,
            gap,
            combined_se,
            paired_se,
            p_fail: out.p_fail,
            holds: gap >= -2.0 * combined_se,
        });
    }
    Ok(Theorem3Report {
        gamma_sq,
        delta_gamma,
        saddle_performance: perf_star,
        saddle,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Agent,
    Adversary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleRow {
    pub side: Side,
    pub perturbation: Perturbation,
    pub cost: f64,
    pub cost_se: f64,
    /// Signed margin: C* − C(u*, v_p) for the adversary side and
    /// C(u_p, v*) − C* for the agent side; should be ≥ −2·combined_se.
    pub margin: f64,
    pub combined_se: f64,
    pub paired_se: f64,
    pub holds: bool,
}

#[derive(Debug, Clone)]
pub struct SaddleReport {
    pub value: f64,
    pub value_se: f64,
    pub rows: Vec<SaddleRow>,
}

/// Empirical check of C(u*, v) ≤ C(u*, v*) ≤ C(u, v*) over perturbed policies.
pub fn saddle_check(
    planner: &Planner,
    agent_perturbations: &[Perturbation],
    adversary_perturbations: &[Perturbation],
    trials: usize,
) -> Result<SaddleReport> {
    let star = estimate_failure_probability(planner, &PolicyHandle::saddle(), &PolicyHandle::saddle(), trials, 0)?;
    let star_costs: Vec<f64> = star.ledgers.iter().map(|l| l.total()).collect();
    let mut rows = Vec::new();
    let cases = agent_perturbations
        .iter()
        .map(|p| (Side::Agent, p))
        .chain(adversary_perturbations.iter().map(|p| (Side::Adversary, p)));
    for (side, p) in cases {
        let perturbed = PolicyHandle::saddle().perturbed(p.clone());
        let (u, v) = match side {
            Side::Agent => (perturbed, PolicyHandle::saddle()),
            Side::Adversary => (PolicyHandle::saddle(), perturbed),
        };
        let out = estimate_failure_probability(planner, &u, &v, trials, 0)?;
        let costs: Vec<f64> = out.ledgers.iter().map(|l| l.total()).collect();
        let sign = if side == Side::Agent { 1.0 } else { -1.0 };
        let margin = sign * (out.cost_mean - star.cost_mean);
        let diffs: Vec<f64> = costs.iter().zip(&star_costs).map(|(a, b)| sign * (a - b)).collect();
        let combined_se = (out.cost_se.powi(2) + star.cost_se.powi(2)).sqrt();
        rows.push(SaddleRow {
            side,
            perturbation: p.clone(),
            cost: out.cost_mean,
            cost_se: out.cost_se,
            margin,
            combined_se,
            paired_se: mean_and_se(&diffs).1,
            holds: margin >= -2.0 * combined_se,
        });
    }
    Ok(SaddleReport {
        value: star.cost_mean,
        value_se: star.cost_se,
        rows,
    })
}

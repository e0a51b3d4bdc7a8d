//! Scenario configuration.
//!
//! A config is a TOML document with a few top-level keys and one table per
//! section (`[unicycle]`, `[pursuit_evasion]`, `[custom]`, `[numerics]`,
//! `[experiment]`, `[oracle]`). Unknown keys anywhere are errors. Numerics
//! left unset take the defaults of the selected mode.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Rect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    UnicycleDa,
    #[default]
    PursuitEvasion,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    Theorem3,
    OracleXcheck,
    Saddle,
    #[default]
    Single,
}

impl ExperimentKind {
    /// Name as spelled in config files.
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Fig1 => "fig1",
            ExperimentKind::Fig2 => "fig2",
            ExperimentKind::Fig3 => "fig3",
            ExperimentKind::Fig4 => "fig4",
            ExperimentKind::Theorem3 => "theorem3",
            ExperimentKind::OracleXcheck => "oracle_xcheck",
            ExperimentKind::Saddle => "saddle",
            ExperimentKind::Single => "single",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Desk,
    Full,
}

/// How R_u and R_v are scaled against the noise intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlWeights {
    /// R_u = I and R_v = r²I as written for the game. With isotropic noise
    /// level s the identity holds for λ = s²·r²/(r² − 1).
    Unit,
    /// R_u = (Σ⁽²⁾Σ⁽²⁾ᵀ)⁻¹ and R_v = r²R_u, so the closed-form λ satisfies
    /// the noise/cost identity exactly. Feedback gains are unchanged.
    Normalized,
    /// R_u = I and R_v = r²I paired with the unit-noise λ = r²/(r² − 1).
    /// The identity fails unless the noise level is 1; kept for comparison.
    Uncertified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnicycleConfig {
    pub sigma: f64,
    pub nu: f64,
    pub k: f64,
    pub gamma_sq: f64,
    pub eta: f64,
    pub t0: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub workspace: Rect,
    pub obstacles: Vec<Rect>,
    pub control_weights: ControlWeights,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mollifier_width: Option<f64>,
}

impl Default for UnicycleConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            nu: 0.1,
            k: 0.2,
            gamma_sq: 2.0,
            eta: 0.67,
            t0: 0.0,
            horizon: 10.0,
            x0: vec![-0.4, -0.4, 0.0, 0.0],
            workspace: Rect::new(-0.6, 0.6, -0.6, 0.6),
            obstacles: default_obstacles(),
            control_weights: ControlWeights::Unit,
            mollifier_width: None,
        }
    }
}

/// Default obstacle map: a wall across the straight path from the start to
/// the origin, and a block guarding the far side of the detour around it.
pub fn default_obstacles() -> Vec<Rect> {
    vec![
        Rect::new(-0.45, -0.05, -0.3, -0.22),
        Rect::new(0.1, 0.25, -0.45, -0.3),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PursuitEvasionConfig {
    pub sigma_evader: [f64; 2],
    pub sigma_pursuer: [f64; 2],
    pub rho: f64,
    pub rv_sq: f64,
    pub eta: f64,
    pub t0: f64,
    pub horizon: f64,
    pub x0: [f64; 2],
    /// Truncation radius of the unbounded safe set, in units of ρ.
    pub outer_radius_factor: f64,
    pub control_weights: ControlWeights,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mollifier_width: Option<f64>,
}

impl Default for PursuitEvasionConfig {
    fn default() -> Self {
        let s = 0.1f64.sqrt();
        Self {
            sigma_evader: [s, s],
            sigma_pursuer: [s, s],
            rho: 0.1,
            rv_sq: 2.0,
            eta: 0.2,
            t0: 0.0,
            horizon: 2.0,
            x0: [0.3, 0.3],
            outer_radius_factor: 50.0,
            control_weights: ControlWeights::Normalized,
            mollifier_width: None,
        }
    }
}

/// Decoupled linear-quadratic game on a box:
/// dxᵢ = aᵢxᵢ dt + uᵢ dt + vᵢ dt + σᵢ dwᵢ, V = q‖x‖², ψ = q_f‖x‖².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CustomConfig {
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
    pub r_u: f64,
    pub r_v: f64,
    pub state_weight: f64,
    pub terminal_weight: f64,
    pub eta: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub t0: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
}

impl Default for CustomConfig {
    fn default() -> Self {
        Self {
            drift: vec![-0.5],
            sigma: vec![0.5],
            r_u: 1.0,
            r_v: 4.0,
            state_weight: 1.0,
            terminal_weight: 0.0,
            eta: 1.0,
            lower: vec![-1.0],
            upper: vec![1.0],
            t0: 0.0,
            horizon: 1.0,
            x0: vec![0.2],
        }
    }
}

/// Sampling and orchestration numerics; unset fields follow the mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rollouts: Option<usize>,
    /// Decision interval in multiples of h.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reproducible: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

/// Numerics with every field resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Numerics {
    pub h: f64,
    pub rollouts: usize,
    pub decision_steps: usize,
    pub trials: usize,
    pub master_seed: u64,
    pub reproducible: bool,
    /// 0 means one worker per available core.
    pub workers: usize,
}

impl Numerics {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Desk => Self {
                h: 0.01,
                rollouts: 1000,
                decision_steps: 5,
                trials: 100,
                master_seed: 1,
                reproducible: true,
                workers: 0,
            },
            Mode::Full => Self {
                h: 0.01,
                rollouts: 10_000,
                decision_steps: 1,
                trials: 100,
                master_seed: 1,
                reproducible: true,
                workers: 0,
            },
        }
    }

    pub fn decision_interval(&self) -> f64 {
        self.decision_steps as f64 * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// γ² values of the attenuation sweep.
    pub gamma_sq_values: Vec<f64>,
    /// r_v² grid of the pursuit–evasion sweep.
    pub rv_sq_values: Vec<f64>,
    /// Multipliers applied to v* for the attenuation bound check.
    pub adversary_scales: Vec<f64>,
    /// Extra states for the oracle cross-check, beside x₀.
    pub xcheck_states: Vec<[f64; 2]>,
    /// Rollouts per state in the oracle cross-check.
    pub xcheck_rollouts: usize,
    /// Agent policy of a `single` run.
    pub agent: AgentKind,
    /// Adversary policy of a `single` run.
    pub adversary: AdversaryKind,
    /// Trials whose full paths go to trajectories.csv, per run.
    pub recorded_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Single,
            gamma_sq_values: vec![2.0, 7.0],
            rv_sq_values: vec![1.5, 2.0, 3.0, 5.0, 8.0],
            adversary_scales: vec![1.0, 0.5],
            xcheck_states: default_xcheck_states(),
            xcheck_rollouts: 100_000,
            agent: AgentKind::Saddle,
            adversary: AdversaryKind::Saddle,
            recorded_trials: 100,
        }
    }
}

/// Interior pursuit–evasion states used alongside x₀ for the cross-check.
pub fn default_xcheck_states() -> Vec<[f64; 2]> {
    vec![
        [0.15, 0.0],
        [0.0, 0.2],
        [-0.18, 0.1],
        [0.12, -0.12],
        [-0.25, -0.2],
        [0.4, 0.0],
        [0.0, -0.5],
        [-0.35, 0.35],
        [0.55, 0.3],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Saddle,
    /// Path-integral control of the one-player problem that ignores v.
    Unaware,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    Saddle,
    Zero,
}

/// Grid of the finite-difference oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Half width of the square computational box.
    pub half_width: f64,
    /// Nodes per axis.
    pub nodes: usize,
    pub time_steps: usize,
    /// Stored time slices are every `slice_stride` steps.
    pub slice_stride: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            half_width: 2.0,
            nodes: 401,
            time_steps: 2000,
            slice_stride: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub mode: Mode,
    pub unicycle: UnicycleConfig,
    pub pursuit_evasion: PursuitEvasionConfig,
    pub custom: CustomConfig,
    pub numerics: NumericsConfig,
    pub experiment: ExperimentConfig,
    pub oracle: OracleConfig,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn emit(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn numerics(&self) -> Numerics {
        let base = Numerics::for_mode(self.mode);
        let n = &self.numerics;
        Numerics {
            h: n.h.unwrap_or(base.h),
            rollouts: n.rollouts.unwrap_or(base.rollouts),
            decision_steps: n.decision_steps.unwrap_or(base.decision_steps),
            trials: n.trials.unwrap_or(base.trials),
            master_seed: n.master_seed.unwrap_or(base.master_seed),
            reproducible: n.reproducible.unwrap_or(base.reproducible),
            workers: n.workers.unwrap_or(base.workers),
        }
    }

    /// Range and consistency checks that do not need a built game.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let n = self.numerics();
        if !(n.h > 0.0 && n.h.is_finite()) {
            return bad(format!("numerics.h = {} must be positive", n.h));
        }
        if n.rollouts < 1 || n.decision_steps < 1 {
            return bad("numerics.rollouts and numerics.decision_steps must be at least 1".into());
        }
        // TOML integers are signed, so larger seeds could not be echoed back.
        if n.master_seed > i64::MAX as u64 {
            return bad(format!("numerics.master_seed = {} exceeds {}", n.master_seed, i64::MAX));
        }
        match self.scenario {
            Scenario::UnicycleDa => {
                let u = &self.unicycle;
                if !(u.sigma > 0.0 && u.nu > 0.0) {
                    return bad("unicycle noise levels must be positive".into());
                }
                if !(u.k >= 0.0 && u.eta > 0.0) {
                    return bad("unicycle.k must be nonnegative and unicycle.eta positive".into());
                }
                if u.x0.len() != 4 {
                    return bad("unicycle.x0 needs 4 coordinates".into());
                }
                if !(u.t0 < u.horizon) {
                    return bad("unicycle.t0 must precede unicycle.horizon".into());
                }
            }
            Scenario::PursuitEvasion => {
                let p = &self.pursuit_evasion;
                if p.sigma_evader.iter().chain(&p.sigma_pursuer).any(|s| !(*s >= 0.0)) {
                    return bad("pursuit_evasion noise levels must be nonnegative".into());
                }
                if !(p.rho > 0.0 && p.eta > 0.0 && p.outer_radius_factor > 1.0) {
                    return bad("pursuit_evasion.rho and eta must be positive, outer_radius_factor above 1".into());
                }
                if !(p.t0 < p.horizon) {
                    return bad("pursuit_evasion.t0 must precede pursuit_evasion.horizon".into());
                }
            }
            Scenario::Custom => {
                let c = &self.custom;
                let d = c.x0.len();
                if !(1..=2).contains(&d) {
                    return bad("custom games have 1 or 2 states".into());
                }
                if [c.drift.len(), c.sigma.len(), c.lower.len(), c.upper.len()]
                    .iter()
                    .any(|&l| l != d)
                {
                    return bad("custom vectors must all have the length of custom.x0".into());
                }
                if c.sigma.iter().any(|s| !(*s > 0.0)) || !(c.r_u > 0.0 && c.r_v > 0.0 && c.eta > 0.0) {
                    return bad("custom.sigma, r_u, r_v and eta must be positive".into());
                }
                if !(c.t0 < c.horizon) {
                    return bad("custom.t0 must precede custom.horizon".into());
                }
            }
        }
        let o = &self.oracle;
        if o.nodes < 5 || o.time_steps < 1 || o.slice_stride < 1 || !(o.half_width > 0.0) {
            return bad("oracle grid is too small".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ScenarioConfig::parse("scenaro = \"custom\"").is_err());
        assert!(ScenarioConfig::parse("[pursuit_evasion]\nrv = 2.0").is_err());
        assert!(ScenarioConfig::parse("[numerics]\nh = 0.01\nstep = 2").is_err());
    }

    #[test]
    fn mode_defaults_fill_unset_numerics() {
        let cfg = ScenarioConfig::parse("mode = \"full\"\n[numerics]\ntrials = 7").unwrap();
        let n = cfg.numerics();
        assert_eq!(n.trials, 7);
        assert_eq!(n.rollouts, 10_000);
        assert_eq!(n.decision_steps, 1);
        let desk = ScenarioConfig::default().numerics();
        assert_eq!((desk.rollouts, desk.decision_steps), (1000, 5));
    }

    #[test]
    fn default_round_trips() {
        let cfg = ScenarioConfig::default();
        assert_eq!(ScenarioConfig::parse(&cfg.emit().unwrap()).unwrap(), cfg);
    }
}

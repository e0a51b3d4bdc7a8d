#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;

use riskgame::closed_loop::{ClosedLoopSettings, Planner};
use riskgame::config::{ControlWeights, CustomConfig, PursuitEvasionConfig, UnicycleConfig};
use riskgame::game::{BoxSet, GameDynamics, GameSpec, StateVector};
use riskgame::path_integral::Reduction;
use riskgame::scenarios::{build_custom_spec, build_pe_spec, build_unicycle_spec};

pub fn pe_config() -> PursuitEvasionConfig {
    PursuitEvasionConfig::default()
}

/// Pursuit–evasion game with the published parameters.
pub fn pe_spec() -> GameSpec {
    build_pe_spec(&pe_config()).unwrap()
}

/// Pursuit–evasion game with R_u = I and R_v = r_v²I.
pub fn pe_unit_spec() -> GameSpec {
    build_pe_spec(&PursuitEvasionConfig {
        control_weights: ControlWeights::Unit,
        ..pe_config()
    })
    .unwrap()
}

pub fn unicycle_spec(gamma_sq: f64, weights: ControlWeights) -> GameSpec {
    build_unicycle_spec(&UnicycleConfig {
        gamma_sq,
        control_weights: weights,
        ..UnicycleConfig::default()
    })
    .unwrap()
}

pub fn lq_spec(cfg: CustomConfig) -> GameSpec {
    build_custom_spec(&cfg).unwrap()
}

pub fn desk_settings(seed: u64) -> ClosedLoopSettings {
    ClosedLoopSettings {
        h: 0.01,
        rollouts: 1000,
        decision_steps: 5,
        master_seed: seed,
        reduction: Reduction::Ordered,
    }
}

pub fn planner(spec: GameSpec, settings: ClosedLoopSettings) -> Planner {
    Planner::new(spec, settings).unwrap()
}

pub fn sv(x: &[f64]) -> StateVector {
    StateVector::from_slice(x)
}

/// Game with f = 0, Σ = s·I, G_u = G_v = I, R_u = I, R_v = 2I, constant
/// running cost and constant terminal cost, on the box (−10, 10)^dim.
#[derive(Debug, Clone)]
pub struct ConstantCost {
    pub dim: usize,
    pub noise: f64,
    pub cost: f64,
    pub terminal: f64,
}

impl GameDynamics for ConstantCost {
    fn drift(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn gain_u(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }
    fn gain_v(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }
    fn diffusion(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.noise
    }
    fn state_cost(&self, _x: &[f64], _t: f64) -> f64 {
        self.cost
    }
    fn terminal_cost(&self, _x: &[f64]) -> f64 {
        self.terminal
    }
    fn control_weight_u(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }
    fn control_weight_v(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * 2.0
    }
    fn is_autonomous(&self) -> bool {
        true
    }
}

pub fn constant_cost_spec(dim: usize, noise: f64, cost: f64, terminal: f64, eta: f64, horizon: f64) -> GameSpec {
    GameSpec {
        name: "constant cost".into(),
        state_dim: dim,
        agent_dim: dim,
        adversary_dim: dim,
        noise_dim: dim,
        partition_rows: (0..dim).collect(),
        dynamics: Arc::new(ConstantCost {
            dim,
            noise,
            cost,
            terminal,
        }),
        safe_set: Arc::new(BoxSet {
            lower: vec![-10.0; dim],
            upper: vec![10.0; dim],
        }),
        failure_weight: eta,
        t0: 0.0,
        horizon,
        x0: StateVector::new(vec![0.0; dim]),
        lambda_hint: None,
        single_agent_lambda: None,
        boundary_mollifier: None,
        probe_box: vec![(-1.0, 1.0); dim],
    }
}

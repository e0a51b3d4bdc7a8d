//! The two benchmark games plus a small linear-quadratic family.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::config::{ControlWeights, CustomConfig, PursuitEvasionConfig, UnicycleConfig};
use crate::error::{Error, Result};
use crate::game::{BoxSet, DiskComplement, GameDynamics, GameSpec, LambdaHint, StateVector, Workspace};

/// λ solving λ(1 − 1/r²) = 1.
pub fn attenuation_lambda(r_sq: f64) -> Result<f64> {
    if !(r_sq > 1.0) {
        return Err(Error::NoValidLambda(format!(
            "weight ratio {r_sq} must exceed 1 for a positive lambda"
        )));
    }
    Ok(r_sq / (r_sq - 1.0))
}

/// Unicycle with state (p_x, p_y, s, θ); both players act on (s, θ).
#[derive(Debug, Clone)]
pub struct UnicycleDynamics {
    pub k: f64,
    pub sigma: f64,
    pub nu: f64,
    pub r_u: DMatrix<f64>,
    pub r_v: DMatrix<f64>,
}

fn speed_heading_gain() -> DMatrix<f64> {
    DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
}

impl GameDynamics for UnicycleDynamics {
    #[inline]
    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        let (sin, cos) = x[3].sin_cos();
        out[0] = -self.k * x[0] + x[2] * cos;
        out[1] = -self.k * x[1] + x[2] * sin;
        out[2] = -self.k * x[2];
        out[3] = -self.k * x[3];
    }

    fn gain_u(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        speed_heading_gain()
    }

    fn gain_v(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        speed_heading_gain()
    }

    fn diffusion(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, self.sigma, 0.0, 0.0, self.nu])
    }

    #[inline]
    fn apply_diffusion(&self, _x: &[f64], _t: f64, dw: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = self.sigma * dw[0];
        out[3] = self.nu * dw[1];
    }

    #[inline]
    fn state_cost(&self, x: &[f64], _t: f64) -> f64 {
        x[0] * x[0] + x[1] * x[1]
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        x[0] * x[0] + x[1] * x[1]
    }

    fn control_weight_u(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        self.r_u.clone()
    }

    fn control_weight_v(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        self.r_v.clone()
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}

/// Agent weight under the chosen normalization, for noise levels on a
/// diagonal noise block with identity control gain.
fn agent_weight(weights: ControlWeights, noise: &[f64]) -> DMatrix<f64> {
    match weights {
        ControlWeights::Unit | ControlWeights::Uncertified => DMatrix::identity(noise.len(), noise.len()),
        ControlWeights::Normalized => {
            DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(noise.len(), noise.iter().map(|s| 1.0 / (s * s))))
        }
    }
}

/// Closed-form (game λ, single-agent λ) for weight ratio r² on a diagonal
/// noise block with identity gains. `None` leaves λ to the least-squares fit,
/// which fails for anisotropic noise under unit weights.
fn weighted_lambdas(weights: ControlWeights, noise: &[f64], r_sq: f64) -> Result<Option<(LambdaHint, f64)>> {
    let base = attenuation_lambda(r_sq)?;
    Ok(match weights {
        ControlWeights::Normalized => Some((LambdaHint { value: base, exact: true }, 1.0)),
        ControlWeights::Uncertified => Some((LambdaHint { value: base, exact: false }, 1.0)),
        ControlWeights::Unit => {
            let var = noise[0] * noise[0];
            if noise.iter().all(|s| s * s == var) {
                Some((LambdaHint { value: var * base, exact: true }, var))
            } else {
                None
            }
        }
    })
}

/// Disturbance-attenuation game on the unicycle: agent weight R_u,
/// adversary weight γ²R_u, V = ψ = p_x² + p_y², workspace minus obstacles.
pub fn build_unicycle_spec(cfg: &UnicycleConfig) -> Result<GameSpec> {
    let lambdas = weighted_lambdas(cfg.control_weights, &[cfg.sigma, cfg.nu], cfg.gamma_sq)?;
    if cfg.x0.len() != 4 {
        return Err(Error::DimensionMismatch {
            what: "unicycle initial state",
            expected: 4,
            got: cfg.x0.len(),
        });
    }
    let r_u = agent_weight(cfg.control_weights, &[cfg.sigma, cfg.nu]);
    let r_v = &r_u * cfg.gamma_sq;
    let b = cfg.workspace;
    let spec = GameSpec {
        name: format!("unicycle (gamma^2 = {})", cfg.gamma_sq),
        state_dim: 4,
        agent_dim: 2,
        adversary_dim: 2,
        noise_dim: 2,
        partition_rows: vec![2, 3],
        dynamics: Arc::new(UnicycleDynamics {
            k: cfg.k,
            sigma: cfg.sigma,
            nu: cfg.nu,
            r_u,
            r_v,
        }),
        safe_set: Arc::new(Workspace {
            bounds: b,
            obstacles: cfg.obstacles.clone(),
        }),
        failure_weight: cfg.eta,
        t0: cfg.t0,
        horizon: cfg.horizon,
        x0: StateVector::new(cfg.x0.clone()),
        lambda_hint: lambdas.map(|l| l.0),
        single_agent_lambda: lambdas.map(|l| l.1),
        boundary_mollifier: cfg.mollifier_width,
        probe_box: vec![(b.x_min, b.x_max), (b.y_min, b.y_max), (-1.0, 1.0), (-PI, PI)],
    };
    if !spec.safe_set.contains(spec.x0.as_slice()) {
        return Err(Error::InvalidConfig("unicycle start lies outside the workspace".into()));
    }
    Ok(spec)
}

/// Relative position of evader and pursuer, dx = u dt − v dt + Σ dw.
#[derive(Debug, Clone)]
pub struct PursuitEvasionDynamics {
    pub sigma: [f64; 2],
    pub r_u: DMatrix<f64>,
    pub r_v: DMatrix<f64>,
}

impl GameDynamics for PursuitEvasionDynamics {
    #[inline]
    fn drift(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
    }

    fn gain_u(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }

    fn gain_v(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        -DMatrix::identity(2, 2)
    }

    fn diffusion(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.sigma[0], 0.0, 0.0, self.sigma[1]])
    }

    #[inline]
    fn apply_diffusion(&self, _x: &[f64], _t: f64, dw: &[f64], out: &mut [f64]) {
        out[0] = self.sigma[0] * dw[0];
        out[1] = self.sigma[1] * dw[1];
    }

    #[inline]
    fn state_cost(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }

    fn terminal_cost(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn control_weight_u(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        self.r_u.clone()
    }

    fn control_weight_v(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        self.r_v.clone()
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}

/// Combined relative-position noise levels √(σ_E² + σ_P²) per axis.
pub fn relative_noise(cfg: &PursuitEvasionConfig) -> [f64; 2] {
    [
        cfg.sigma_evader[0].hypot(cfg.sigma_pursuer[0]),
        cfg.sigma_evader[1].hypot(cfg.sigma_pursuer[1]),
    ]
}

/// Pursuit–evasion game in relative coordinates with capture disk radius ρ.
pub fn build_pe_spec(cfg: &PursuitEvasionConfig) -> Result<GameSpec> {
    let sigma = relative_noise(cfg);
    let lambdas = weighted_lambdas(cfg.control_weights, &sigma, cfg.rv_sq)?;
    if cfg.control_weights == ControlWeights::Normalized && sigma.iter().any(|s| *s <= 0.0) {
        return Err(Error::InvalidConfig(
            "normalized control weights need positive noise on both axes".into(),
        ));
    }
    let r_u = agent_weight(cfg.control_weights, &sigma);
    let r_v = &r_u * cfg.rv_sq;
    let outer = cfg.outer_radius_factor * cfg.rho;
    let spec = GameSpec {
        name: format!("pursuit-evasion (r_v^2 = {})", cfg.rv_sq),
        state_dim: 2,
        agent_dim: 2,
        adversary_dim: 2,
        noise_dim: 2,
        partition_rows: vec![0, 1],
        dynamics: Arc::new(PursuitEvasionDynamics { sigma, r_u, r_v }),
        safe_set: Arc::new(DiskComplement {
            radius: cfg.rho,
            outer_radius: outer,
        }),
        failure_weight: cfg.eta,
        t0: cfg.t0,
        horizon: cfg.horizon,
        x0: StateVector::new(cfg.x0.to_vec()),
        lambda_hint: lambdas.map(|l| l.0),
        single_agent_lambda: lambdas.map(|l| l.1),
        boundary_mollifier: cfg.mollifier_width,
        probe_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
    };
    if !spec.safe_set.contains(spec.x0.as_slice()) {
        return Err(Error::InvalidConfig("pursuit-evasion start lies inside the capture disk".into()));
    }
    Ok(spec)
}

/// Decoupled linear-quadratic game; see [`CustomConfig`].
#[derive(Debug, Clone)]
pub struct LinearQuadraticDynamics {
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
    pub r_u: f64,
    pub r_v: f64,
    pub state_weight: f64,
    pub terminal_weight: f64,
}

impl GameDynamics for LinearQuadraticDynamics {
    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = self.drift[i] * x[i];
        }
    }

    fn gain_u(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.sigma.len(), self.sigma.len())
    }

    fn gain_v(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.sigma.len(), self.sigma.len())
    }

    fn diffusion(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.sigma))
    }

    fn apply_diffusion(&self, _x: &[f64], _t: f64, dw: &[f64], out: &mut [f64]) {
        for i in 0..dw.len() {
            out[i] = self.sigma[i] * dw[i];
        }
    }

    fn state_cost(&self, x: &[f64], _t: f64) -> f64 {
        self.state_weight * x.iter().map(|v| v * v).sum::<f64>()
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.terminal_weight * x.iter().map(|v| v * v).sum::<f64>()
    }

    fn control_weight_u(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.sigma.len(), self.sigma.len()) * self.r_u
    }

    fn control_weight_v(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.sigma.len(), self.sigma.len()) * self.r_v
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}

/// Linear-quadratic game on a box with λ left to the least-squares fit.
pub fn build_custom_spec(cfg: &CustomConfig) -> Result<GameSpec> {
    let d = cfg.x0.len();
    let spec = GameSpec {
        name: format!("linear-quadratic box game ({d}D)"),
        state_dim: d,
        agent_dim: d,
        adversary_dim: d,
        noise_dim: d,
        partition_rows: (0..d).collect(),
        dynamics: Arc::new(LinearQuadraticDynamics {
            drift: cfg.drift.clone(),
            sigma: cfg.sigma.clone(),
            r_u: cfg.r_u,
            r_v: cfg.r_v,
            state_weight: cfg.state_weight,
            terminal_weight: cfg.terminal_weight,
        }),
        safe_set: Arc::new(BoxSet {
            lower: cfg.lower.clone(),
            upper: cfg.upper.clone(),
        }),
        failure_weight: cfg.eta,
        t0: cfg.t0,
        horizon: cfg.horizon,
        x0: StateVector::new(cfg.x0.clone()),
        lambda_hint: None,
        single_agent_lambda: None,
        boundary_mollifier: None,
        probe_box: cfg.lower.iter().zip(&cfg.upper).map(|(l, u)| (*l, *u)).collect(),
    };
    if !spec.safe_set.contains(spec.x0.as_slice()) {
        return Err(Error::InvalidConfig("custom start lies outside the box".into()));
    }
    Ok(spec)
}

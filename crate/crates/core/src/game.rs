//! Declarative description of one risk-minimizing zero-sum game.
//!
//! The state follows
//!
//! ```text
//! dx = f(x,t) dt + G_u(x,t) u dt + G_v(x,t) v dt + Σ(x,t) dw
//! ```
//!
//! with the agent minimizing and the adversary maximizing
//!
//! ```text
//! E[ φ(x(t_f)) + ∫ V + ½ uᵀR_u u − ½ vᵀR_v v dt ],   φ = ψ on X_s, η off X_s.
//! ```
//!
//! Only the rows listed in `partition_rows` may carry control or noise; the
//! remaining rows evolve by drift alone.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default tolerance on the Frobenius residual of the noise/cost identity.
pub const LAMBDA_TOLERANCE: f64 = 1e-8;

/// Gain matrices whose noise-block coupling matrix exceeds this condition
/// number are rejected.
pub const MAX_GAIN_CONDITION: f64 = 1e12;

/// State of the game, in scenario units.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(DVector<f64>);

impl StateVector {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(DVector::from_vec(coords))
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        Self(DVector::from_column_slice(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.0.as_mut_slice()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<DVector<f64>> for StateVector {
    fn from(v: DVector<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Dynamics and cost callbacks. Implementations must be pure.
///
/// The slice-based methods sit on the rollout hot path and must not allocate
/// in scenario implementations; the matrix-valued methods are called once per
/// control decision.
pub trait GameDynamics: Send + Sync + fmt::Debug {
    fn drift(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn gain_u(&self, x: &[f64], t: f64) -> DMatrix<f64>;
    fn gain_v(&self, x: &[f64], t: f64) -> DMatrix<f64>;
    fn diffusion(&self, x: &[f64], t: f64) -> DMatrix<f64>;

    /// `out = Σ(x,t)·dw`.
    fn apply_diffusion(&self, x: &[f64], t: f64, dw: &[f64], out: &mut [f64]) {
        let sigma = self.diffusion(x, t);
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..dw.len()).map(|j| sigma[(i, j)] * dw[j]).sum();
        }
    }

    /// State cost V(x,t) ≥ 0.
    fn state_cost(&self, x: &[f64], t: f64) -> f64;
    /// Terminal cost ψ(x) for survivors.
    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn control_weight_u(&self, x: &[f64], t: f64) -> DMatrix<f64>;
    fn control_weight_v(&self, x: &[f64], t: f64) -> DMatrix<f64>;

    /// True when no callback depends on `t`.
    fn is_autonomous(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    Interior,
    Outside,
}

/// The open safe region X_s.
pub trait SafeSet: Send + Sync + fmt::Debug {
    fn contains(&self, x: &[f64]) -> bool;

    fn membership(&self, x: &[f64]) -> Membership {
        if self.contains(x) {
            Membership::Interior
        } else {
            Membership::Outside
        }
    }

    fn describe(&self) -> String;

    /// Signed distance to ∂X_s (positive inside), when the geometry has one.
    fn signed_distance(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    /// True once a point has left the region in which an unbounded safe set
    /// was truncated. Reaching it is a diagnostic, not an exit.
    fn beyond_truncation(&self, _x: &[f64]) -> bool {
        false
    }
}

/// `{ ‖(x₀,x₁)‖ > radius }`, monitored out to `outer_radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskComplement {
    pub radius: f64,
    pub outer_radius: f64,
}

impl SafeSet for DiskComplement {
    #[inline]
    fn contains(&self, x: &[f64]) -> bool {
        x[0] * x[0] + x[1] * x[1] > self.radius * self.radius
    }

    fn describe(&self) -> String {
        format!(
            "disk complement, radius {} (truncated at {})",
            self.radius, self.outer_radius
        )
    }

    fn signed_distance(&self, x: &[f64]) -> Option<f64> {
        Some(x[0].hypot(x[1]) - self.radius)
    }

    fn beyond_truncation(&self, x: &[f64]) -> bool {
        x[0] * x[0] + x[1] * x[1] >= self.outer_radius * self.outer_radius
    }
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    #[inline]
    fn contains_closed(&self, px: f64, py: f64) -> bool {
        px >= self.x_min && px <= self.x_max && py >= self.y_min && py <= self.y_max
    }

    fn distance_outside(&self, px: f64, py: f64) -> f64 {
        let dx = (self.x_min - px).max(px - self.x_max).max(0.0);
        let dy = (self.y_min - py).max(py - self.y_max).max(0.0);
        if dx > 0.0 || dy > 0.0 {
            dx.hypot(dy)
        } else {
            -(px - self.x_min)
                .min(self.x_max - px)
                .min(py - self.y_min)
                .min(self.y_max - py)
        }
    }
}

/// Open planar workspace minus closed rectangular obstacles; acts on the
/// first two coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub bounds: Rect,
    pub obstacles: Vec<Rect>,
}

impl SafeSet for Workspace {
    #[inline]
    fn contains(&self, x: &[f64]) -> bool {
        let (px, py) = (x[0], x[1]);
        let b = &self.bounds;
        if !(px > b.x_min && px < b.x_max && py > b.y_min && py < b.y_max) {
            return false;
        }
        !self.obstacles.iter().any(|o| o.contains_closed(px, py))
    }

    fn describe(&self) -> String {
        format!(
            "workspace [{}, {}]x[{}, {}] with {} rectangular obstacles",
            self.bounds.x_min,
            self.bounds.x_max,
            self.bounds.y_min,
            self.bounds.y_max,
            self.obstacles.len()
        )
    }

    fn signed_distance(&self, x: &[f64]) -> Option<f64> {
        let (px, py) = (x[0], x[1]);
        let b = &self.bounds;
        let wall = (px - b.x_min)
            .min(b.x_max - px)
            .min(py - b.y_min)
            .min(b.y_max - py);
        let obstacle = self
            .obstacles
            .iter()
            .map(|o| o.distance_outside(px, py))
            .fold(f64::INFINITY, f64::min);
        Some(wall.min(obstacle))
    }
}

/// Open box on every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SafeSet for BoxSet {
    fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v > *lo && *v < *hi)
    }

    fn describe(&self) -> String {
        format!("box {:?} .. {:?}", self.lower, self.upper)
    }

    fn signed_distance(&self, x: &[f64]) -> Option<f64> {
        Some(
            x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(v, (lo, hi))| (v - lo).min(hi - v))
                .fold(f64::INFINITY, f64::min),
        )
    }
}

/// Scenario-supplied closed form for λ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaHint {
    pub value: f64,
    /// False when the scenario knowingly uses a λ for which the
    /// noise/cost identity holds only up to a noise-intensity rescaling.
    pub exact: bool,
}

#[derive(Clone)]
pub struct GameSpec {
    pub name: String,
    pub state_dim: usize,
    pub agent_dim: usize,
    pub adversary_dim: usize,
    pub noise_dim: usize,
    /// Rows of the noise-driven subsystem.
    pub partition_rows: Vec<usize>,
    pub dynamics: Arc<dyn GameDynamics>,
    pub safe_set: Arc<dyn SafeSet>,
    /// η > 0, terminal penalty for leaving X_s.
    pub failure_weight: f64,
    pub t0: f64,
    pub horizon: f64,
    pub x0: StateVector,
    pub lambda_hint: Option<LambdaHint>,
    /// Closed-form λ of the single-agent problem obtained by deleting the
    /// adversary.
    pub single_agent_lambda: Option<f64>,
    /// Width of the optional smooth transition between ψ and η near ∂X_s.
    pub boundary_mollifier: Option<f64>,
    /// Per-coordinate ranges used to draw probe points.
    pub probe_box: Vec<(f64, f64)>,
}

impl fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameSpec")
            .field("name", &self.name)
            .field("dims", &(self.state_dim, self.agent_dim, self.adversary_dim, self.noise_dim))
            .field("partition_rows", &self.partition_rows)
            .field("safe_set", &self.safe_set.describe())
            .field("eta", &self.failure_weight)
            .field("horizon", &(self.t0, self.horizon))
            .finish()
    }
}

impl GameSpec {
    /// Structural checks plus the sampled invariants (partition soundness and
    /// positive definite weights) at `probes`.
    pub fn validate(&self, probes: &[(StateVector, f64)]) -> Result<()> {
        if !(self.failure_weight > 0.0) {
            return Err(Error::InvalidConfig("failure weight must be positive".into()));
        }
        if !(self.t0 < self.horizon) {
            return Err(Error::InvalidConfig("t0 must precede the horizon".into()));
        }
        if self.x0.dim() != self.state_dim {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                expected: self.state_dim,
                got: self.x0.dim(),
            });
        }
        if self.partition_rows.iter().any(|&r| r >= self.state_dim) {
            return Err(Error::InvalidConfig("partition row out of range".into()));
        }
        for (x, t) in probes {
            let xs = x.as_slice();
            let (gu, gv, sigma) = (
                self.dynamics.gain_u(xs, *t),
                self.dynamics.gain_v(xs, *t),
                self.dynamics.diffusion(xs, *t),
            );
            check_shape("G_u", &gu, self.state_dim, self.agent_dim)?;
            check_shape("G_v", &gv, self.state_dim, self.adversary_dim)?;
            check_shape("Σ", &sigma, self.state_dim, self.noise_dim)?;
            for row in (0..self.state_dim).filter(|r| !self.partition_rows.contains(r)) {
                let nonzero = |m: &DMatrix<f64>| m.row(row).iter().any(|v| *v != 0.0);
                if nonzero(&gu) || nonzero(&gv) || nonzero(&sigma) {
                    return Err(Error::InvalidConfig(format!(
                        "row {row} is outside the noise partition but carries control or noise"
                    )));
                }
            }
            spd_inverse(&self.dynamics.control_weight_u(xs, *t), "R_u")?;
            spd_inverse(&self.dynamics.control_weight_v(xs, *t), "R_v")?;
        }
        Ok(())
    }

    /// Random interior probe points in Q̄, reproducible from `seed`.
    pub fn probe_points(&self, count: usize, seed: u64) -> Vec<(StateVector, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            assert!(attempts < 1000 * count.max(1), "probe box misses the safe set");
            let x: Vec<f64> = self
                .probe_box
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo..=hi))
                .collect();
            if self.safe_set.contains(&x) {
                let t = rng.gen_range(self.t0..=self.horizon);
                out.push((StateVector::new(x), t));
            }
        }
        out
    }

    pub fn n_noise_rows(&self) -> usize {
        self.partition_rows.len()
    }
}

fn check_shape(what: &'static str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::DimensionMismatch {
            what,
            expected: rows,
            got: m.nrows(),
        });
    }
    if m.ncols() != cols {
        return Err(Error::DimensionMismatch {
            what,
            expected: cols,
            got: m.ncols(),
        });
    }
    Ok(())
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let scale = m.norm().max(1.0);
    if !m.is_square() || (m - m.transpose()).norm() > 1e-12 * scale {
        return Err(Error::NotPositiveDefinite(what));
    }
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveDefinite(what))
}

/// Smooth transition from 0 (at distance 0) to 1 (at distance `width`).
fn bump(distance: f64, width: f64) -> f64 {
    if distance <= 0.0 {
        return 0.0;
    }
    if distance >= width {
        return 1.0;
    }
    let s = distance / width;
    let a = (-1.0 / s).exp();
    let b = (-1.0 / (1.0 - s)).exp();
    a / (a + b)
}

/// Terminal cost φ: ψ(x) on X_s, η on every state classified Outside.
pub fn phi_terminal(spec: &GameSpec, x: &[f64]) -> f64 {
    if !spec.safe_set.contains(x) {
        return spec.failure_weight;
    }
    let psi = spec.dynamics.terminal_cost(x);
    match (spec.boundary_mollifier, spec.safe_set.signed_distance(x)) {
        (Some(width), Some(d)) => {
            let b = bump(d, width);
            psi * b + spec.failure_weight * (1.0 - b)
        }
        _ => psi,
    }
}

/// Running cost L = V + ½uᵀR_u u − ½vᵀR_v v.
pub fn running_cost(spec: &GameSpec, x: &[f64], u: &DVector<f64>, v: &DVector<f64>, t: f64) -> f64 {
    let ru = spec.dynamics.control_weight_u(x, t);
    let rv = spec.dynamics.control_weight_v(x, t);
    spec.dynamics.state_cost(x, t) + 0.5 * (u.transpose() * ru * u)[0] - 0.5 * (v.transpose() * rv * v)[0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSource {
    ClosedForm,
    LeastSquares,
}

/// Evidence that ΣΣᵀ = λ(G_uR_u⁻¹G_uᵀ − G_vR_v⁻¹G_vᵀ) at a set of probes.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaCertificate {
    pub lambda: f64,
    /// Max Frobenius residual of the identity over the probes.
    pub residual: f64,
    pub probe_count: usize,
    pub source: LambdaSource,
    /// Residual within tolerance.
    pub exact: bool,
}

fn identity_sides(spec: &GameSpec, x: &[f64], t: f64, with_adversary: bool) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = &spec.dynamics;
    let sigma = d.diffusion(x, t);
    let gu = d.gain_u(x, t);
    let mut rhs = &gu * spd_inverse(&d.control_weight_u(x, t), "R_u")? * gu.transpose();
    if with_adversary {
        let gv = d.gain_v(x, t);
        rhs -= &gv * spd_inverse(&d.control_weight_v(x, t), "R_v")? * gv.transpose();
    }
    Ok((&sigma * sigma.transpose(), rhs))
}

fn certify(
    spec: &GameSpec,
    probes: &[(StateVector, f64)],
    hint: Option<LambdaHint>,
    with_adversary: bool,
    tolerance: f64,
) -> Result<LambdaCertificate> {
    if probes.is_empty() {
        return Err(Error::InvalidConfig("lambda resolution needs at least one probe".into()));
    }
    let sides = probes
        .iter()
        .map(|(x, t)| identity_sides(spec, x.as_slice(), *t, with_adversary))
        .collect::<Result<Vec<_>>>()?;

    let (lambda, source) = match hint {
        Some(h) => (h.value, LambdaSource::ClosedForm),
        None => {
            let num: f64 = sides.iter().map(|(a, b)| a.dot(b)).sum();
            let den: f64 = sides.iter().map(|(_, b)| b.dot(b)).sum();
            (num / den, LambdaSource::LeastSquares)
        }
    };
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::NoValidLambda(format!(
            "lambda = {lambda} is not positive; the noise/cost condition cannot hold"
        )));
    }
    let residual = sides
        .iter()
        .map(|(a, b)| (a - b * lambda).norm())
        .fold(0.0, f64::max);
    let exact = residual <= tolerance;
    if !exact {
        match hint {
            Some(LambdaHint { exact: false, .. }) => log::warn!(
                "{}: closed-form lambda {lambda} leaves a noise/cost residual of {residual:.3e}",
                spec.name
            ),
            _ => {
                return Err(Error::NoValidLambda(format!(
                    "residual {residual:.3e} exceeds tolerance {tolerance:e} at lambda = {lambda}"
                )))
            }
        }
    }
    Ok(LambdaCertificate {
        lambda,
        residual,
        probe_count: probes.len(),
        source,
        exact,
    })
}

/// Resolve λ for the game: the scenario's closed form when it has one,
/// verified at `probes`, otherwise a least-squares fit.
pub fn resolve_lambda(spec: &GameSpec, probes: &[(StateVector, f64)]) -> Result<LambdaCertificate> {
    certify(spec, probes, spec.lambda_hint, true, LAMBDA_TOLERANCE)
}

/// λ for the one-player problem an agent solves when it ignores the adversary.
pub fn resolve_single_agent_lambda(spec: &GameSpec, probes: &[(StateVector, f64)]) -> Result<LambdaCertificate> {
    let hint = spec.single_agent_lambda.map(|value| LambdaHint {
        value,
        exact: spec.lambda_hint.map_or(true, |h| h.exact),
    });
    certify(spec, probes, hint, false, LAMBDA_TOLERANCE)
}

/// Noise-block feedback gains 𝒢_u (m×n₂) and 𝒢_v (l×n₂).
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrices {
    pub agent: DMatrix<f64>,
    pub adversary: DMatrix<f64>,
}

fn noise_rows(spec: &GameSpec, m: &DMatrix<f64>) -> DMatrix<f64> {
    m.select_rows(spec.partition_rows.iter())
}

fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_GAIN_CONDITION) {
        return Err(Error::SingularGain { condition });
    }
    m.clone()
        .try_inverse()
        .ok_or(Error::SingularGain { condition })
}

/// 𝒢_u = R_u⁻¹G_u⁽²⁾ᵀM⁻¹ and 𝒢_v = −R_v⁻¹G_v⁽²⁾ᵀM⁻¹ with
/// M = G_u⁽²⁾R_u⁻¹G_u⁽²⁾ᵀ − G_v⁽²⁾R_v⁻¹G_v⁽²⁾ᵀ.
pub fn gain_matrices(spec: &GameSpec, x: &[f64], t: f64) -> Result<GainMatrices> {
    let d = &spec.dynamics;
    let gu = noise_rows(spec, &d.gain_u(x, t));
    let gv = noise_rows(spec, &d.gain_v(x, t));
    let ru_inv = spd_inverse(&d.control_weight_u(x, t), "R_u")?;
    let rv_inv = spd_inverse(&d.control_weight_v(x, t), "R_v")?;
    let m = &gu * &ru_inv * gu.transpose() - &gv * &rv_inv * gv.transpose();
    let m_inv = checked_inverse(&m)?;
    Ok(GainMatrices {
        agent: ru_inv * gu.transpose() * &m_inv,
        adversary: -(rv_inv * gv.transpose() * m_inv),
    })
}

/// Gain of the one-player estimator: R_u⁻¹G_u⁽²⁾ᵀ(G_u⁽²⁾R_u⁻¹G_u⁽²⁾ᵀ)⁻¹.
pub fn single_agent_gain(spec: &GameSpec, x: &[f64], t: f64) -> Result<DMatrix<f64>> {
    let d = &spec.dynamics;
    let gu = noise_rows(spec, &d.gain_u(x, t));
    let ru_inv = spd_inverse(&d.control_weight_u(x, t), "R_u")?;
    let m = &gu * &ru_inv * gu.transpose();
    Ok(ru_inv * gu.transpose() * checked_inverse(&m)?)
}

//! Finite-difference ground truth for games with one or two states.
//!
//! Solves the linear Dirichlet problem for ξ = exp(−J/λ) in backward time
//! τ = T − t,
//!
//! ```text
//! ∂τξ = −(V/λ)ξ + fᵀ∇ξ + ½ Σᵢ aᵢᵢ ∂ᵢᵢξ,    a = ΣΣᵀ (diagonal),
//! ```
//!
//! with ξ = exp(−ψ/λ) at τ = 0 and ξ = exp(−η/λ) on ∂X_s. Each time step is a
//! locally one-dimensional backward-Euler sweep per axis; the killing term is
//! split evenly between sweeps. Diffusion uses central differences,
//! advection is upwinded, and lines that cross ∂X_s between two nodes use the
//! Shortley–Weller stencil with the crossing located by bisection. Every
//! sweep matrix is an M-matrix, so ξ stays in (0, 1] when V ≥ 0 and the data
//! lie in (0, 1].
//!
//! Nodes on the edge of the computational box take exp(−ψ/λ): the box
//! truncates an unbounded safe set and its edge counts as safe.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{phi_terminal, spd_inverse, GameSpec};

/// Bisection steps used to locate a boundary crossing between two nodes.
const CROSSING_BISECTIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Self {
        Self { lo, hi, nodes }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }
}

/// Tensor grid on one or two state axes plus the backward time stepping.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub axes: Vec<Axis>,
    pub time_steps: usize,
    /// Slices are stored every `slice_stride` time steps (and at t₀).
    pub slice_stride: usize,
}

impl Grid2D {
    /// Square `[−w, w]²` with `nodes` per axis.
    pub fn square(half_width: f64, nodes: usize, time_steps: usize, slice_stride: usize) -> Self {
        Self {
            axes: vec![Axis::new(-half_width, half_width, nodes); 2],
            time_steps,
            slice_stride,
        }
    }

    pub fn line(lo: f64, hi: f64, nodes: usize, time_steps: usize, slice_stride: usize) -> Self {
        Self {
            axes: vec![Axis::new(lo, hi, nodes)],
            time_steps,
            slice_stride,
        }
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    fn shape(&self) -> (usize, usize) {
        (self.axes[0].nodes, self.axes.get(1).map_or(1, |a| a.nodes))
    }

    pub fn node_count(&self) -> usize {
        let (nx, ny) = self.shape();
        nx * ny
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        i + j * self.axes[0].nodes
    }

    fn point(&self, i: usize, j: usize) -> Vec<f64> {
        let mut p = vec![self.axes[0].coord(i)];
        if let Some(a) = self.axes.get(1) {
            p.push(a.coord(j));
        }
        p
    }

    /// Same box and time stepping with spatial steps halved.
    pub fn refined(&self) -> Self {
        Self {
            axes: self
                .axes
                .iter()
                .map(|a| Axis::new(a.lo, a.hi, 2 * a.nodes - 1))
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NodeKind {
    Unknown,
    /// Box edge inside X_s: fixed exp(−ψ/λ).
    Edge,
    /// Outside X_s: fixed exp(−η/λ).
    Outside,
}

/// Neighbor seen from an unknown node along one direction.
#[derive(Debug, Clone, Copy)]
struct Link {
    /// Distance to the neighbor or to the boundary crossing.
    dist: f64,
    /// Fixed value when the neighbor is not an unknown.
    fixed: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PdeSolution {
    pub grid: Grid2D,
    pub lambda: f64,
    pub t0: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Stored fields, by decreasing t (first is t = T).
    pub slices: Vec<Vec<f64>>,
    pub slice_times: Vec<f64>,
    /// Field at t₀ + dt, for time differences at t₀.
    pub before_final: Vec<f64>,
    kinds: Vec<NodeKind>,
    boundary_value: f64,
}

fn check_supported(spec: &GameSpec, grid: &Grid2D) -> Result<()> {
    if spec.state_dim > 2 || spec.state_dim == 0 {
        return Err(Error::UnsupportedOracle(format!(
            "{} states; the grid oracle handles one or two",
            spec.state_dim
        )));
    }
    if grid.dims() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            what: "oracle grid axes",
            expected: spec.state_dim,
            got: grid.dims(),
        });
    }
    if grid.axes.iter().any(|a| a.nodes < 3 || !(a.hi > a.lo)) || grid.time_steps == 0 || grid.slice_stride == 0 {
        return Err(Error::InvalidConfig("oracle grid needs 3+ nodes per axis and positive steps".into()));
    }
    Ok(())
}

/// Diagonal of ΣΣᵀ, rejecting correlated noise.
fn noise_diagonal(spec: &GameSpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let s = spec.dynamics.diffusion(x, t);
    let a = &s * s.transpose();
    let scale = a.norm().max(1e-300);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if i != j && a[(i, j)].abs() > 1e-14 * scale {
                return Err(Error::UnsupportedOracle("correlated noise channels".into()));
            }
        }
    }
    Ok((0..a.nrows()).map(|i| a[(i, i)]).collect())
}

/// Point-wise PDE coefficients.
struct Coefficients {
    drift: Vec<Vec<f64>>,
    half_a: Vec<Vec<f64>>,
    kill: Vec<f64>,
}

fn coefficients(spec: &GameSpec, grid: &Grid2D, points: &[Vec<f64>], kinds: &[NodeKind], t: f64, lambda: f64) -> Result<Coefficients> {
    let d = grid.dims();
    let n = points.len();
    let mut drift = vec![vec![0.0; n]; d];
    let mut half_a = vec![vec![0.0; n]; d];
    let mut kill = vec![0.0; n];
    let mut f = vec![0.0; d];
    for (idx, p) in points.iter().enumerate() {
        if kinds[idx] != NodeKind::Unknown {
            continue;
        }
        spec.dynamics.drift(p, t, &mut f);
        let a = noise_diagonal(spec, p, t)?;
        for ax in 0..d {
            drift[ax][idx] = f[ax];
            half_a[ax][idx] = 0.5 * a[ax];
        }
        kill[idx] = spec.dynamics.state_cost(p, t) / lambda;
    }
    Ok(Coefficients { drift, half_a, kill })
}

/// Fraction of the segment p→q before the first point outside X_s.
fn crossing_fraction(spec: &GameSpec, p: &[f64], q: &[f64]) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    let at = |s: f64| -> Vec<f64> { p.iter().zip(q).map(|(a, b)| a + s * (b - a)).collect() };
    for _ in 0..CROSSING_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if spec.safe_set.contains(&at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Backward-Euler systems of one sweep direction: one tridiagonal system
/// per run of consecutive unknown nodes, stored LU-factored.
struct Sweep {
    members: Vec<usize>,
    run_ends: Vec<usize>,
    lower: Vec<f64>,
    inv_beta: Vec<f64>,
    c_prime: Vec<f64>,
    /// dt·(c_l·g_l + c_r·g_r) from fixed neighbors.
    fixed_add: Vec<f64>,
}

impl Sweep {
    fn build(grid: &Grid2D, ax: usize, kinds: &[NodeKind], links: &[(Link, Link)], coef: &Coefficients, dt: f64) -> Self {
        let (nx, ny) = grid.shape();
        let (lines, len) = if ax == 0 { (ny, nx) } else { (nx, ny) };
        let d = grid.dims() as f64;
        let mut s = Sweep {
            members: Vec::new(),
            run_ends: Vec::new(),
            lower: Vec::new(),
            inv_beta: Vec::new(),
            c_prime: Vec::new(),
            fixed_add: Vec::new(),
        };
        let (mut diag, mut upper) = (Vec::new(), Vec::new());
        for line in 0..lines {
            let at = |k: usize| if ax == 0 { grid.index(k, line) } else { grid.index(line, k) };
            let mut k = 0;
            while k < len {
                if kinds[at(k)] != NodeKind::Unknown {
                    k += 1;
                    continue;
                }
                let start = s.members.len();
                diag.clear();
                upper.clear();
                while k < len && kinds[at(k)] == NodeKind::Unknown {
                    let idx = at(k);
                    let (lm, lp) = links[idx];
                    let (hl, hr) = (lm.dist, lp.dist);
                    let half_a = coef.half_a[ax][idx];
                    let f = coef.drift[ax][idx];
                    let cl = 2.0 * half_a / (hl * (hl + hr)) + if f < 0.0 { -f / hl } else { 0.0 };
                    let cr = 2.0 * half_a / (hr * (hl + hr)) + if f > 0.0 { f / hr } else { 0.0 };
                    let kill = coef.kill[idx] / d;
                    s.members.push(idx);
                    s.fixed_add
                        .push(dt * (cl * lm.fixed.unwrap_or(0.0) + cr * lp.fixed.unwrap_or(0.0)));
                    s.lower.push(if lm.fixed.is_some() { 0.0 } else { -dt * cl });
                    upper.push(if lp.fixed.is_some() { 0.0 } else { -dt * cr });
                    diag.push(1.0 + dt * (cl + cr + kill));
                    k += 1;
                }
                let (ib, cp) = factor_tridiagonal(&s.lower[start..], &diag, &upper);
                s.inv_beta.extend(ib);
                s.c_prime.extend(cp);
                s.run_ends.push(s.members.len());
            }
        }
        s
    }

    fn apply(&self, xi: &mut [f64], buf: &mut Vec<f64>) {
        let mut start = 0;
        for &end in &self.run_ends {
            let r = start..end;
            buf.clear();
            buf.extend(self.members[r.clone()].iter().zip(&self.fixed_add[r.clone()]).map(|(&i, a)| xi[i] + a));
            solve_factored(&self.lower[r.clone()], &self.inv_beta[r.clone()], &self.c_prime[r.clone()], buf);
            for (&i, v) in self.members[r].iter().zip(buf.iter()) {
                xi[i] = *v;
            }
            start = end;
        }
    }
}

/// LU factors (1/βᵢ, c′ᵢ) of a tridiagonal matrix with sub-diagonal
/// `lower[i]` (row i) and super-diagonal `upper[i]` (row i).
fn factor_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut inv_beta = Vec::with_capacity(n);
    let mut c_prime = Vec::with_capacity(n);
    let mut prev_c = 0.0;
    for i in 0..n {
        let beta = diag[i] - if i > 0 { lower[i] * prev_c } else { 0.0 };
        inv_beta.push(1.0 / beta);
        prev_c = upper[i] / beta;
        c_prime.push(prev_c);
    }
    (inv_beta, c_prime)
}

fn solve_factored(lower: &[f64], inv_beta: &[f64], c_prime: &[f64], rhs: &mut [f64]) {
    let n = rhs.len();
    rhs[0] *= inv_beta[0];
    for i in 1..n {
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) * inv_beta[i];
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c_prime[i] * rhs[i + 1];
    }
}

/// Backward-Euler LOD solve of the linear Dirichlet problem for ξ.
pub fn solve_dirichlet(spec: &GameSpec, grid: &Grid2D, lambda: f64) -> Result<PdeSolution> {
    check_supported(spec, grid)?;
    if !(lambda > 0.0) {
        return Err(Error::NoValidLambda(format!("lambda = {lambda}")));
    }
    let d = grid.dims();
    let (nx, ny) = grid.shape();
    let n = nx * ny;
    let boundary_value = (-spec.failure_weight / lambda).exp();

    let mut points = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    for j in 0..ny {
        for i in 0..nx {
            let p = grid.point(i, j);
            let on_edge = i == 0 || i + 1 == nx || (d == 2 && (j == 0 || j + 1 == ny));
            kinds.push(if !spec.safe_set.contains(&p) {
                NodeKind::Outside
            } else if on_edge {
                NodeKind::Edge
            } else {
                NodeKind::Unknown
            });
            points.push(p);
        }
    }

    // Links of every unknown node per axis: [axis][node] = (minus, plus).
    let mut links: Vec<Vec<(Link, Link)>> = Vec::with_capacity(d);
    for ax in 0..d {
        let h = grid.axes[ax].step();
        let mut per_node = vec![
            (
                Link { dist: h, fixed: None },
                Link { dist: h, fixed: None },
            );
            n
        ];
        for j in 0..ny {
            for i in 0..nx {
                let idx = grid.index(i, j);
                if kinds[idx] != NodeKind::Unknown {
                    continue;
                }
                let neighbor = |sign: isize| -> usize {
                    if ax == 0 {
                        grid.index((i as isize + sign) as usize, j)
                    } else {
                        grid.index(i, (j as isize + sign) as usize)
                    }
                };
                let link = |sign: isize| -> Link {
                    let q = neighbor(sign);
                    match kinds[q] {
                        NodeKind::Unknown => Link { dist: h, fixed: None },
                        NodeKind::Edge => Link {
                            dist: h,
                            fixed: Some((-phi_terminal(spec, &points[q]) / lambda).exp()),
                        },
                        NodeKind::Outside => Link {
                            dist: h * crossing_fraction(spec, &points[idx], &points[q]),
                            fixed: Some(boundary_value),
                        },
                    }
                };
                per_node[idx] = (link(-1), link(1));
            }
        }
        links.push(per_node);
    }

    let mut xi: Vec<f64> = points
        .iter()
        .zip(&kinds)
        .map(|(p, k)| match k {
            NodeKind::Outside => boundary_value,
            _ => (-phi_terminal(spec, p) / lambda).exp(),
        })
        .collect();

    let dt = (spec.horizon - spec.t0) / grid.time_steps as f64;
    let autonomous = spec.dynamics.is_autonomous();
    let build = |t: f64| -> Result<Vec<Sweep>> {
        let coef = coefficients(spec, grid, &points, &kinds, t, lambda)?;
        Ok((0..d).map(|ax| Sweep::build(grid, ax, &kinds, &links[ax], &coef, dt)).collect())
    };
    let mut sweeps = build(spec.horizon - dt)?;

    let mut slices = vec![xi.clone()];
    let mut slice_times = vec![spec.horizon];
    let mut before_final = xi.clone();
    let mut buf = Vec::new();

    for step in 1..=grid.time_steps {
        let t_new = if step == grid.time_steps {
            spec.t0
        } else {
            spec.horizon - step as f64 * dt
        };
        if !autonomous && step > 1 {
            sweeps = build(t_new)?;
        }
        if step == grid.time_steps {
            before_final.clone_from(&xi);
        }
        for sweep in &sweeps {
            sweep.apply(&mut xi, &mut buf);
        }
        if let Some(bad) = xi.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::UnstableSolve(format!(
                "xi = {} at node {:?}, t = {t_new}",
                xi[bad], points[bad]
            )));
        }
        if step % grid.slice_stride == 0 || step == grid.time_steps {
            slices.push(xi.clone());
            slice_times.push(t_new);
        }
    }
    Ok(PdeSolution {
        grid: grid.clone(),
        lambda,
        t0: spec.t0,
        horizon: spec.horizon,
        dt,
        slices,
        slice_times,
        before_final,
        kinds,
        boundary_value,
    })
}

impl PdeSolution {
    /// Field at t₀.
    pub fn initial_field(&self) -> &[f64] {
        self.slices.last().expect("at least one slice")
    }

    /// Node values and coordinates at t₀.
    pub fn node_values(&self) -> impl Iterator<Item = (Vec<f64>, f64, bool)> + '_ {
        let (nx, ny) = self.grid.shape();
        let field = self.initial_field();
        (0..ny).flat_map(move |j| {
            (0..nx).map(move |i| {
                let idx = self.grid.index(i, j);
                (
                    self.grid.point(i, j),
                    field[idx],
                    self.kinds[idx] == NodeKind::Unknown,
                )
            })
        })
    }

    /// Cell containing `x` and its local coordinates, if the cell lies in the
    /// grid.
    fn cell(&self, x: &[f64]) -> Option<(Vec<usize>, Vec<f64>)> {
        let mut base = Vec::new();
        let mut frac = Vec::new();
        for (ax, a) in self.grid.axes.iter().enumerate() {
            let s = (x[ax] - a.lo) / a.step();
            if !(s >= 0.0 && s <= (a.nodes - 1) as f64) {
                return None;
            }
            let i = (s.floor() as usize).min(a.nodes - 2);
            base.push(i);
            frac.push(s - i as f64);
        }
        Some((base, frac))
    }

    fn corners(&self, base: &[usize]) -> Vec<(usize, Vec<usize>)> {
        if self.grid.dims() == 1 {
            vec![(base[0], vec![0]), (base[0] + 1, vec![1])]
        } else {
            let mut out = Vec::with_capacity(4);
            for dj in 0..2 {
                for di in 0..2 {
                    out.push((self.grid.index(base[0] + di, base[1] + dj), vec![di, dj]));
                }
            }
            out
        }
    }

    fn interpolate_field(&self, field: &[f64], base: &[usize], frac: &[f64]) -> f64 {
        self.corners(base)
            .into_iter()
            .map(|(idx, offs)| {
                let w: f64 = offs
                    .iter()
                    .zip(frac)
                    .map(|(o, f)| if *o == 1 { *f } else { 1.0 - f })
                    .product();
                w * field[idx]
            })
            .sum()
    }

    /// True when every corner of the cell containing `x` is an unknown node.
    pub fn cell_is_interior(&self, x: &[f64]) -> bool {
        match self.cell(x) {
            Some((base, _)) => self
                .corners(&base)
                .into_iter()
                .all(|(idx, _)| self.kinds[idx] == NodeKind::Unknown),
            None => false,
        }
    }

    /// Multilinear interpolation of ξ in space, linear in time.
    pub fn xi_at(&self, x: &[f64], t: f64) -> Result<f64> {
        let (base, frac) = self.cell(x).ok_or_else(|| Error::StencilOutOfDomain(x.to_vec()))?;
        let t = t.clamp(self.t0, self.horizon);
        // slice_times decrease.
        let k = self
            .slice_times
            .iter()
            .position(|&s| s <= t)
            .unwrap_or(self.slice_times.len() - 1);
        let v_k = self.interpolate_field(&self.slices[k], &base, &frac);
        if k == 0 || self.slice_times[k] == t {
            return Ok(v_k);
        }
        let (t_hi, t_lo) = (self.slice_times[k - 1], self.slice_times[k]);
        let v_hi = self.interpolate_field(&self.slices[k - 1], &base, &frac);
        let w = (t - t_lo) / (t_hi - t_lo);
        Ok(v_k * (1.0 - w) + v_hi * w)
    }

    pub fn value_at(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(-self.lambda * self.xi_at(x, t)?.ln())
    }

    /// Central-difference ∇J at `(x, t)` with the grid step; every stencil
    /// point must sit in a fully interior cell.
    pub fn value_gradient(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut grad = Vec::with_capacity(x.len());
        for (ax, a) in self.grid.axes.iter().enumerate() {
            let h = a.step();
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[ax] += h;
            minus[ax] -= h;
            if !(self.cell_is_interior(&plus) && self.cell_is_interior(&minus) && self.cell_is_interior(x)) {
                return Err(Error::StencilOutOfDomain(x.to_vec()));
            }
            grad.push((self.value_at(&plus, t)? - self.value_at(&minus, t)?) / (2.0 * h));
        }
        Ok(grad)
    }

    /// Fixed value on ∂X_s.
    pub fn boundary_value(&self) -> f64 {
        self.boundary_value
    }

    /// Write `t, x[, y], xi` rows for every stored slice.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let (nx, ny) = self.grid.shape();
        if self.grid.dims() == 1 {
            writeln!(w, "t,x,xi")?;
        } else {
            writeln!(w, "t,x,y,xi")?;
        }
        for (field, t) in self.slices.iter().zip(&self.slice_times) {
            for j in 0..ny {
                for i in 0..nx {
                    let p = self.grid.point(i, j);
                    let coords: Vec<String> = p.iter().map(|c| format!("{c:.16e}")).collect();
                    writeln!(w, "{:.16e},{},{:.16e}", t, coords.join(","), field[self.grid.index(i, j)])?;
                }
            }
        }
        Ok(())
    }
}

/// u* = −R_u⁻¹G_uᵀ∇J and v* = R_v⁻¹G_vᵀ∇J from the oracle value.
pub fn controls_from_solution(sol: &PdeSolution, spec: &GameSpec, x: &[f64], t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let grad = DVector::from_vec(sol.value_gradient(x, t)?);
    let d = &spec.dynamics;
    let u = -(spd_inverse(&d.control_weight_u(x, t), "R_u")? * d.gain_u(x, t).transpose() * &grad);
    let v = spd_inverse(&d.control_weight_v(x, t), "R_v")? * d.gain_v(x, t).transpose() * &grad;
    Ok((u, v))
}

fn require_exit_problem(spec: &GameSpec, grid: &Grid2D) -> Result<()> {
    let probes = spec.probe_points(50, 0);
    let zero = probes
        .iter()
        .all(|(x, t)| spec.dynamics.state_cost(x.as_slice(), *t) == 0.0 && spec.dynamics.terminal_cost(x.as_slice()) == 0.0);
    if !zero || spec.boundary_mollifier.is_some() {
        return Err(Error::UnsupportedOracle(
            "exit probabilities need V = 0, psi = 0 and a sharp boundary".into(),
        ));
    }
    check_supported(spec, grid)
}

/// P_exit(x, t) = (1 − ξ)/(1 − e^{−η/λ}) from a solution of the exit problem.
pub fn exit_probability_from(sol: &PdeSolution, x: &[f64], t: f64) -> Result<f64> {
    let xi = sol.xi_at(x, t)?;
    Ok((1.0 - xi) / (1.0 - sol.boundary_value))
}

/// Probability of leaving X_s before T from `(x, t)` under the uncontrolled
/// dynamics. The weight λ drops out; λ = 1 is used.
pub fn exit_probability_reference(spec: &GameSpec, grid: &Grid2D, x: &[f64], t: f64) -> Result<f64> {
    require_exit_problem(spec, grid)?;
    exit_probability_from(&solve_dirichlet(spec, grid, 1.0)?, x, t)
}

/// Root-mean-square HJI residual of J = −λ log ξ at t₀ over the unknown nodes
/// accepted by `region` whose full 3-point stencils are unknown nodes:
///
/// ```text
/// ∂τJ − [V + fᵀ∇J − ½∇Jᵀ(G_uR_u⁻¹G_uᵀ − G_vR_v⁻¹G_vᵀ)∇J + ½Tr(ΣΣᵀ∇²J)].
/// ```
pub fn hji_residual(sol: &PdeSolution, spec: &GameSpec, region: impl Fn(&[f64]) -> bool) -> Result<f64> {
    let grid = &sol.grid;
    let d = grid.dims();
    let (nx, ny) = grid.shape();
    let lam = sol.lambda;
    let now = sol.initial_field();
    let j_now: Vec<f64> = now.iter().map(|v| -lam * v.ln()).collect();
    let j_prev: Vec<f64> = sol.before_final.iter().map(|v| -lam * v.ln()).collect();
    let t = sol.t0;
    let mut f = vec![0.0; d];
    let (mut sum_sq, mut count) = (0.0, 0usize);
    for jy in 0..ny {
        for ix in 0..nx {
            let idx = grid.index(ix, jy);
            if sol.kinds[idx] != NodeKind::Unknown {
                continue;
            }
            let p = grid.point(ix, jy);
            if !region(&p) {
                continue;
            }
            let neighbors: Vec<(usize, usize)> = (0..d)
                .map(|ax| {
                    if ax == 0 {
                        (grid.index(ix - 1, jy), grid.index(ix + 1, jy))
                    } else {
                        (grid.index(ix, jy - 1), grid.index(ix, jy + 1))
                    }
                })
                .collect();
            if neighbors
                .iter()
                .any(|(a, b)| sol.kinds[*a] != NodeKind::Unknown || sol.kinds[*b] != NodeKind::Unknown)
            {
                continue;
            }
            let mut grad = DVector::zeros(d);
            let mut diffusion = 0.0;
            let a = noise_diagonal(spec, &p, t)?;
            for (ax, (m, pl)) in neighbors.iter().enumerate() {
                let h = grid.axes[ax].step();
                grad[ax] = (j_now[*pl] - j_now[*m]) / (2.0 * h);
                diffusion += 0.5 * a[ax] * (j_now[*pl] - 2.0 * j_now[idx] + j_now[*m]) / (h * h);
            }
            spec.dynamics.drift(&p, t, &mut f);
            let dy = &spec.dynamics;
            let gu = dy.gain_u(&p, t);
            let gv = dy.gain_v(&p, t);
            let b: DMatrix<f64> = &gu * spd_inverse(&dy.control_weight_u(&p, t), "R_u")? * gu.transpose()
                - &gv * spd_inverse(&dy.control_weight_v(&p, t), "R_v")? * gv.transpose();
            let advect: f64 = f.iter().zip(grad.iter()).map(|(a, g)| a * g).sum();
            let quad = (grad.transpose() * &b * &grad)[0];
            let dtau = (j_now[idx] - j_prev[idx]) / sol.dt;
            let r = dtau - (dy.state_cost(&p, t) + advect - 0.5 * quad + diffusion);
            sum_sq += r * r;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidConfig("residual region contains no interior nodes".into()));
    }
    Ok((sum_sq / count as f64).sqrt())
}

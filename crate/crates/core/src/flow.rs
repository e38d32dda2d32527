//! Moser flow: the time-one map of `v_t = w / ((1−t)f + t·g)`, integrated by
//! classical RK4 from every grid node.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffeo::{pullback_density, DiffeoError, Diffeomorphism, CLAMP_TOL};
use crate::field::{FieldError, ScalarField, VectorField};
use crate::grid::{Grid, Point};

/// Smallest admissible interpolated density along the path.
pub const RHO_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Diffeo(#[from] DiffeoError),
    #[error("densities and flux live on different grids")]
    GridMismatch,
    #[error("time step count must be at least 1")]
    NoSteps,
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("density floor breached: ρ_t = {value:e} at t = {t} near {point:?}")]
    DensityFloor { t: f64, point: Vec<f64>, value: f64 },
    #[error("trajectory from node {node} became non-finite")]
    NonFinite { node: usize },
    #[error("trajectory from node {node} left the box by {excess:e}")]
    LeftBox { node: usize, excess: f64 },
}

/// How `w`, `f` and `g` are evaluated between nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Reaches one cell; a point whose cell corners carry no flux never moves.
    #[default]
    Multilinear,
    /// C² local quintic, reaching three cells.
    Smooth,
}

/// Source and target densities with a flux `w`, `div w ≈ f − g`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowProblem {
    f: ScalarField,
    g: ScalarField,
    w: VectorField,
    steps: usize,
    interpolation: Interpolation,
}

impl FlowProblem {
    pub fn new(f: ScalarField, g: ScalarField, w: VectorField, steps: usize) -> Result<Self, FlowError> {
        if f.grid() != g.grid() || f.grid() != w.grid() {
            return Err(FlowError::GridMismatch);
        }
        if steps == 0 {
            return Err(FlowError::NoSteps);
        }
        for (t, dens) in [(0.0, &f), (1.0, &g)] {
            if let Some(i) = dens.values().iter().position(|&v| !(v >= RHO_FLOOR)) {
                let point = dens.grid().node_at(i)[..dens.grid().n_dim()].to_vec();
                return Err(FlowError::DensityFloor { t, point, value: dens.values()[i] });
            }
        }
        Ok(Self { f, g, w, steps, interpolation: Interpolation::default() })
    }

    pub fn grid(&self) -> &Grid {
        self.f.grid()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn has_flux(&self) -> bool {
        self.w.max_norm() > 0.0
    }

    /// `w(p) / ((1−t)·f(p) + t·g(p))`.
    pub fn velocity_at(&self, t: f64, p: &Point) -> Result<Point, FlowError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FlowError::TimeOutOfRange(t));
        }
        let grid = self.grid();
        if p[..grid.n_dim()].iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinitePoint(p[..grid.n_dim()].to_vec()).into());
        }
        self.velocity(t, p)
    }

    #[inline]
    fn velocity(&self, t: f64, p: &Point) -> Result<Point, FlowError> {
        let grid = self.grid();
        let loc = grid.locate(p);
        let smooth = self.interpolation == Interpolation::Smooth;
        let mut v = if smooth { self.w.sample_smooth(&loc) } else { self.w.sample(&loc) };
        if v.iter().all(|&c| c == 0.0) {
            return Ok(v);
        }
        let rho = if smooth {
            (1.0 - t) * self.f.sample_smooth(&loc) + t * self.g.sample_smooth(&loc)
        } else {
            (1.0 - t) * self.f.sample(&loc) + t * self.g.sample(&loc)
        };
        if !(rho >= RHO_FLOOR) {
            return Err(FlowError::DensityFloor { t, point: p[..grid.n_dim()].to_vec(), value: rho });
        }
        v.iter_mut().for_each(|c| *c /= rho);
        Ok(v)
    }

    /// Advances `points` from `t0` to `t1` with `steps` RK4 steps.
    pub fn advance(&self, points: &mut [Point], t0: f64, t1: f64, steps: usize) -> Result<(), FlowError> {
        if steps == 0 {
            return Err(FlowError::NoSteps);
        }
        for t in [t0, t1] {
            if !(0.0..=1.0).contains(&t) {
                return Err(FlowError::TimeOutOfRange(t));
            }
        }
        let dt = (t1 - t0) / steps as f64;
        points.par_iter_mut().enumerate().try_for_each(|(node, p)| self.trajectory(node, p, t0, dt, steps))
    }

    /// Image of one point under the time-one map, or under its inverse when
    /// `forward` is false (integrating from `t = 1` back to `t = 0`).
    pub fn map_point(&self, p: &Point, forward: bool) -> Result<Point, FlowError> {
        let dt = if forward { 1.0 } else { -1.0 } / self.steps as f64;
        let mut q = *p;
        self.trajectory(usize::MAX, &mut q, if forward { 0.0 } else { 1.0 }, dt, self.steps)?;
        Ok(q)
    }

    /// Node images of the time-one map or its inverse.
    pub(crate) fn node_images(&self, forward: bool) -> Result<Vec<Point>, FlowError> {
        let grid = *self.grid();
        let mut points: Vec<Point> = (0..grid.len()).map(|i| grid.node_at(i)).collect();
        let (t0, t1) = if forward { (0.0, 1.0) } else { (1.0, 0.0) };
        self.advance(&mut points, t0, t1, self.steps)?;
        Ok(points)
    }

    fn trajectory(&self, node: usize, p: &mut Point, t0: f64, dt: f64, steps: usize) -> Result<(), FlowError> {
        let grid = self.grid();
        let n = grid.n_dim();
        let bounds = grid.bounds();
        let limit = CLAMP_TOL * (0..n).map(|a| grid.extent(a)).fold(0.0, f64::max);
        let shifted = |x: &Point, k: &Point, s: f64| {
            let mut y = *x;
            for a in 0..n {
                y[a] += s * k[a];
            }
            y
        };
        for s in 0..steps {
            let t = t0 + s as f64 * dt;
            let k1 = self.velocity(t, p)?;
            if k1.iter().all(|&c| c == 0.0) {
                // every later stage samples the same point
                continue;
            }
            let k2 = self.velocity(t + 0.5 * dt, &shifted(p, &k1, 0.5 * dt))?;
            let k3 = self.velocity(t + 0.5 * dt, &shifted(p, &k2, 0.5 * dt))?;
            let k4 = self.velocity(t + dt, &shifted(p, &k3, dt))?;
            for a in 0..n {
                p[a] += dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
            }
            if p[..n].iter().any(|c| !c.is_finite()) {
                return Err(FlowError::NonFinite { node });
            }
            let excess = bounds.distance_to(p);
            if excess > limit {
                return Err(FlowError::LeftBox { node, excess });
            }
            if excess > 0.0 {
                *p = bounds.clamp(p);
            }
        }
        Ok(())
    }
}

/// Time-one map of the Moser flow, seeded at every node. Off-node points
/// are mapped by integrating their own trajectories.
pub fn integrate_flow(problem: &FlowProblem) -> Result<Diffeomorphism, FlowError> {
    let points = problem.node_images(true)?;
    Ok(Diffeomorphism::from_flow(Arc::new(problem.clone()), true, &points)?)
}

/// Norms of `(g∘φ)·det∇φ − f` over the nodes at distance at least `2h` from
/// the faces, with the smallest node Jacobian over the whole grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PullbackResidual {
    pub max: f64,
    pub l2: f64,
    pub min_jacobian: f64,
}

pub fn pullback_residual(
    f: &ScalarField,
    g: &ScalarField,
    phi: &Diffeomorphism,
) -> Result<PullbackResidual, FlowError> {
    if f.grid() != g.grid() {
        return Err(FlowError::GridMismatch);
    }
    let grid = *f.grid();
    let pulled = pullback_density(g, phi)?;
    let min_jacobian = phi.min_jacobian()?;
    let margin = 2.0 * grid.max_spacing() * (1.0 - 1e-9);
    let bounds = grid.bounds();
    let cell: f64 = grid.spacings().iter().product();
    let mut max = 0.0f64;
    let mut sq = 0.0;
    for (i, (p, q)) in pulled.values().iter().zip(f.values()).enumerate() {
        if bounds.distance_to_boundary(&grid.node_at(i)) >= margin {
            let r = p - q;
            max = max.max(r.abs());
            sq += r * r * cell;
        }
    }
    Ok(PullbackResidual { max, l2: sq.sqrt(), min_jacobian })
}

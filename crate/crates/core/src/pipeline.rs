//! End-to-end solves of `(g∘φ)·det∇φ = f` with `φ = id` outside a subdomain Ω′.
//!
//! The composed method works on Ω′ in two stages. Stage A flows `f` to the
//! uniform density along a Neumann potential gradient, giving Φ with
//! `det∇Φ = f` that keeps Ω′ invariant but moves its boundary. Stage B pushes
//! `g` forward through Φ to the density `h`, which equals 1 near the image of
//! the collar, and solves `det∇Θ = h` with a compactly supported flux so that
//! Θ is the identity there. Then `Ψ = Θ∘Φ` has `det∇Ψ = g`, and
//! `φ = Ψ⁻¹∘Φ` is the identity on the collar and is extended by the identity
//! to the whole grid. The direct method runs a single compactly supported
//! Moser flow from `f` to `g`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bogovskii::bump_kernel;
use crate::diffeo::{
    compose, extend_by_identity, invert, pullback_density, DiffeoError, Diffeomorphism, InversionSettings,
};
use crate::divergence::{solve_compact_divergence, DivError, DivProblem, DivSettings};
use crate::domain::{
    bounding_box, collar_band, select_subdomain, support_nodes, support_threshold, CollarBand, DomainError,
};
use crate::field::{gradient, integrate, FieldError, ScalarField, VectorField};
use crate::flow::{integrate_flow, pullback_residual, FlowError, FlowProblem, Interpolation, RHO_FLOOR};
use crate::grid::{Grid, GridError, IndexBox, MAX_DIM};
use crate::poisson::{neumann_laplacian, solve_neumann_poisson, trapezoid_mean, PoissonError, PoissonSettings};
use crate::report::{CollarReport, DirectReport, Gate, SolveReport, StageAReport, StageBReport, Timing, REPORT_SCHEMA};

/// Collar displacement allowed before snapping, in units of the grid spacing.
pub const CONCORD_FACTOR: f64 = 1e-3;
/// Post-normalization mass accuracy, relative to the box measure.
pub const NORMALIZED_MASS_TOL: f64 = 1e-10;
/// Smallest admissible nodes per axis.
pub const MIN_GRID_N: usize = 17;
pub const MIN_STEPS: usize = 4;
/// `|∫(g∘φ)·det∇φ − ∫f| / ∫f` gate.
pub const PULLBACK_MASS_TOL: f64 = 1e-3;
/// `φ⁻¹∘φ` gate.
pub const ROUND_TRIP_TOL: f64 = 1e-6;
/// `|h − 1|` gate near the image of the collar.
pub const H_COLLAR_TOL: f64 = 1e-6;
/// Default collar width as a fraction of the gap between `supp(f − g)` and ∂Ω′.
pub const COLLAR_FRACTION: f64 = 8.0;
/// Defect-correction passes pushing the discrete divergence of the Stage A
/// field towards `f − 1`.
const DEFECT_SWEEPS: usize = 2;

/// Residual bound for a grid with `n` nodes per axis: 2e-2 at 65, scaled by
/// `h^1.5`, the slowest order the solver is expected to reach.
pub fn method_tol(n: usize) -> f64 {
    2e-2 * (64.0 / (n.max(2) - 1) as f64).powf(1.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Composed,
    Direct,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Composed => "composed",
            Method::Direct => "direct",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "composed" => Ok(Method::Composed),
            "direct" => Ok(Method::Direct),
            other => Err(format!("unknown method `{other}` (expected composed or direct)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: Method,
    /// Nodes per axis when the pipeline builds its own inputs.
    pub grid_n: usize,
    /// RK4 steps per flow.
    pub steps: usize,
    /// Inset of Ω′ from the boundary; half the support distance when absent.
    pub margin: Option<f64>,
    /// Collar width inside Ω′; a quarter of the gap between the support and ∂Ω′ when absent.
    pub collar_width: Option<f64>,
    /// Relative threshold deciding which nodes belong to `supp(f − g)`.
    pub support_threshold: f64,
    pub div_tol: f64,
    pub inv_tol: f64,
    /// Admissible `|∫f − ∫g| / ∫f` of the inputs.
    pub mass_tol: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::Composed,
            grid_n: 65,
            steps: 32,
            margin: None,
            collar_width: None,
            support_threshold: crate::domain::DEFAULT_SUPPORT_THRESHOLD,
            div_tol: 1e-3,
            inv_tol: 1e-10,
            mass_tol: 1e-3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        if self.grid_n < MIN_GRID_N {
            return bad(format!("grid_n = {} is below the minimum {MIN_GRID_N}", self.grid_n));
        }
        if self.steps < MIN_STEPS {
            return bad(format!("steps = {} is below the minimum {MIN_STEPS}", self.steps));
        }
        for (name, v) in [("margin", self.margin), ("collar_width", self.collar_width)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} = {v} must be positive"));
                }
            }
        }
        for (name, v) in [
            ("support_threshold", self.support_threshold),
            ("div_tol", self.div_tol),
            ("inv_tol", self.inv_tol),
            ("mass_tol", self.mass_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        Ok(())
    }

    fn inversion(&self) -> InversionSettings {
        InversionSettings { tol: self.inv_tol, ..InversionSettings::default() }
    }

    fn div_settings(&self) -> DivSettings {
        DivSettings { div_tol: self.div_tol, ..DivSettings::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Input,
    Normalize,
    Subdomain,
    StageA,
    StageB,
    Compose,
    Extend,
    Direct,
    Verify,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Input => "input",
            Stage::Normalize => "normalize",
            Stage::Subdomain => "subdomain",
            Stage::StageA => "stage A",
            Stage::StageB => "stage B",
            Stage::Compose => "compose",
            Stage::Extend => "extend",
            Stage::Direct => "direct",
            Stage::Verify => "verify",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Poisson(#[from] PoissonError),
    #[error(transparent)]
    Div(#[from] DivError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Diffeo(#[from] DiffeoError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage { stage: Stage, source: StageError },
    #[error("f and g live on different grids")]
    GridMismatch,
    #[error("grid has {nodes} nodes along an axis, below the minimum {MIN_GRID_N}")]
    GridTooSmall { nodes: usize },
    #[error("density {density} is not positive at node {node} (value {value})")]
    NonPositive { density: char, node: usize, value: f64 },
    #[error("unequal total volume: ∫f = {f_mass}, ∫g = {g_mass}, relative gap {gap:e} exceeds {tol:e}")]
    UnequalVolume { f_mass: f64, g_mass: f64, gap: f64, tol: f64 },
    #[error("{stage}: mass drift {relative:e} exceeds {tol:e}")]
    MassDrift { stage: Stage, relative: f64, tol: f64 },
    #[error("margin parameter {d} must lie in (0, {limit}]")]
    MarginRange { d: f64, limit: f64 },
    #[error("support of f − g is at distance {distance} from the boundary, below the requested {d}")]
    SupportTooClose { distance: f64, d: f64 },
    #[error("f and g differ at node {node} inside the collar or its 2h neighbourhood")]
    CollarNotConcordant { node: usize },
    #[error("degenerate concordance density: h = {value} at node {node}")]
    DegenerateDensity { node: usize, value: f64 },
    #[error("concordance failed: no room for Θ between the collar image (depth {collar_depth}) and supp(h − 1) (depth {source_depth})")]
    NoRoom { collar_depth: usize, source_depth: usize },
    #[error("concordance failed: collar displacement {displacement:e} exceeds {limit:e}")]
    ConcordanceFailed { displacement: f64, limit: f64 },
    #[error("collar snapping degraded the residual from {before:e} to {after:e}")]
    SnapDegraded { before: f64, after: f64 },
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage { stage, source: e.into() })
    }
}

/// Densities rescaled to mass `meas Ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub f: ScalarField,
    pub g: ScalarField,
    /// `meas Ω / ∫f`, applied to both densities.
    pub lambda: f64,
    /// Extra factor on g at the nodes where `f ≠ g`, closing the quadrature mass gap.
    pub g_correction: f64,
    /// `|∫f − ∫g| / ∫f` of the inputs.
    pub mass_gap: f64,
}

impl Normalized {
    /// Largest `|∫f − meas Ω|`, `|∫g − meas Ω|` relative to meas Ω.
    pub fn mass_error(&self) -> f64 {
        let meas = self.f.grid().measure();
        (integrate(&self.f) - meas).abs().max((integrate(&self.g) - meas).abs()) / meas
    }
}

fn check_positive(field: &ScalarField, density: char) -> Result<(), PipelineError> {
    match field.values().iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        Some(node) => Err(PipelineError::NonPositive { density, node, value: field.values()[node] }),
        None => Ok(()),
    }
}

/// Scales `f` and `g` by `λ = meas Ω / ∫f`, then scales g further at the
/// nodes where it differs from f so that both masses equal `meas Ω`. Nodes
/// where `f = g` stay equal.
pub fn normalize_pair(f: &ScalarField, g: &ScalarField, mass_tol: f64) -> Result<Normalized, PipelineError> {
    if f.grid() != g.grid() {
        return Err(PipelineError::GridMismatch);
    }
    check_positive(f, 'f')?;
    check_positive(g, 'g')?;
    let grid = *f.grid();
    let (f_mass, g_mass) = (integrate(f), integrate(g));
    let mass_gap = (f_mass - g_mass).abs() / f_mass;
    if !(mass_gap <= mass_tol) {
        return Err(PipelineError::UnequalVolume { f_mass, g_mass, gap: mass_gap, tol: mass_tol });
    }
    let meas = grid.measure();
    let lambda = meas / f_mass;
    let fl = f.scale(lambda).at(Stage::Normalize)?;
    let gl = g.scale(lambda).at(Stage::Normalize)?;
    let deficit = meas - integrate(&gl);
    let mut g_correction = 1.0;
    let mut gv = gl.values().to_vec();
    if deficit != 0.0 {
        let nodes: Vec<usize> =
            fl.values().iter().zip(&gv).enumerate().filter(|(_, (a, b))| a != b).map(|(i, _)| i).collect();
        if nodes.is_empty() {
            // f = g at every node, so their masses agree already up to rounding
        } else {
            let weight: f64 = nodes.iter().map(|&i| grid.trapezoid_weight(&grid.multi_index(i)) * gv[i]).sum();
            g_correction = 1.0 + deficit / weight;
            for &i in &nodes {
                gv[i] *= g_correction;
            }
        }
    }
    let out = Normalized { f: fl, g: ScalarField::new(grid, gv).at(Stage::Normalize)?, lambda, g_correction, mass_gap };
    let err = out.mass_error();
    if !(err <= NORMALIZED_MASS_TOL) {
        return Err(PipelineError::MassDrift { stage: Stage::Normalize, relative: err, tol: NORMALIZED_MASS_TOL });
    }
    Ok(out)
}

fn normal_free_gradient(u: &ScalarField) -> VectorField {
    let grid = *u.grid();
    let w = gradient(u);
    let comps = (0..grid.n_dim())
        .map(|a| {
            w.component(a)
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let k = grid.multi_index(i)[a];
                    if k == 0 || k + 1 == grid.shape()[a] {
                        0.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    VectorField::new(grid, comps).expect("shape preserved")
}

/// Moser flow from `f` to the uniform density along a Neumann potential
/// gradient whose normal component vanishes on the faces, so `det∇Φ ≈ f` and
/// the box is invariant. Requires `∫f = meas`. The velocity is sampled with the
/// smooth interpolant: the piecewise-linear one leaves an O(h) ripple in the
/// differenced Jacobian.
pub fn solve_jacobian_neumann(f: &ScalarField, steps: usize) -> Result<(Diffeomorphism, f64), PipelineError> {
    let grid = *f.grid();
    let rho = f.map(|v| v - 1.0).at(Stage::StageA)?;
    let settings = PoissonSettings::default();
    let u = solve_neumann_poisson(&rho, &settings).at(Stage::StageA)?;
    let mean = trapezoid_mean(&rho);
    let lap = neumann_laplacian(&u);
    let scale = rho.max_abs().max(f64::MIN_POSITIVE);
    let poisson_residual =
        lap.values().iter().zip(rho.values()).map(|(l, r)| (l - (r - mean)).abs()).fold(0.0, f64::max) / scale;
    let mut u = u;
    let mut w = normal_free_gradient(&u);
    for _ in 0..DEFECT_SWEEPS {
        let d = crate::field::divergence(&w);
        let r = rho.zip_with(&d, |a, b| a - b).at(Stage::StageA)?;
        let du = solve_neumann_poisson(&r, &settings).at(Stage::StageA)?;
        u = u.zip_with(&du, |a, b| a + b).at(Stage::StageA)?;
        w = normal_free_gradient(&u);
    }
    let one = ScalarField::constant(grid, 1.0).at(Stage::StageA)?;
    let problem =
        FlowProblem::new(f.clone(), one, w, steps).at(Stage::StageA)?.with_interpolation(Interpolation::Smooth);
    Ok((integrate_flow(&problem).at(Stage::StageA)?, poisson_residual))
}

/// Depth of the deepest node that a multilinear evaluation at any image of a
/// collar node touches.
fn collar_image_depth(phi: &Diffeomorphism, collar: &CollarBand) -> usize {
    let grid = phi.grid();
    let n = grid.n_dim();
    (0..grid.len())
        .filter(|&i| collar.contains(&grid.node_at(i)))
        .map(|i| {
            let loc = grid.locate(&grid.bounds().clamp(&phi.node_image(i)));
            let mut deepest = 0;
            for corner in 0..(1usize << n) {
                let mut k = [0; MAX_DIM];
                for a in 0..n {
                    k[a] = (loc.base[a] + ((corner >> a) & 1)).min(grid.shape()[a] - 1);
                }
                deepest = deepest.max(grid.index_depth(&k));
            }
            deepest
        })
        .max()
        .unwrap_or(0)
}

fn max_abs_where(a: &ScalarField, b: &ScalarField, select: impl Fn(usize) -> bool) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .enumerate()
        .filter(|&(i, _)| select(i))
        .map(|(_, (x, y))| (x - y).abs())
        .fold(0.0, f64::max)
}

fn stencil_valid(grid: &Grid) -> impl Fn(usize) -> bool + '_ {
    let margin = 2.0 * grid.max_spacing() * (1.0 - 1e-9);
    let bounds = grid.bounds();
    move |i| bounds.distance_to_boundary(&grid.node_at(i)) >= margin
}

/// Given Φ on Ω′ with target Jacobian `jacobian` (`det∇Φ ≈ jacobian`) and a
/// density `g` equal to `jacobian` on the collar, returns `Ψ = Θ∘Φ` with
/// `det∇Ψ ≈ g` and `Ψ = Φ` on the collar.
///
/// `h = (g∘Φ⁻¹) / (jacobian∘Φ⁻¹)` uses the target Jacobian rather than a
/// differenced one, so h is exactly 1 wherever `g = jacobian` and the Stage A
/// error cancels to first order in the composite.
pub fn concordant_jacobian_solve(
    phi: &Diffeomorphism,
    jacobian: &ScalarField,
    g: &ScalarField,
    collar: &CollarBand,
    config: &PipelineConfig,
) -> Result<(Diffeomorphism, StageBReport), PipelineError> {
    let grid = *phi.grid();
    if g.grid() != &grid || jacobian.grid() != &grid {
        return Err(PipelineError::GridMismatch);
    }
    let meas = grid.measure();
    let phi_inv = invert(phi, &config.inversion()).at(Stage::StageB)?;
    let pre: Vec<_> = (0..grid.len()).map(|i| phi_inv.node_image(i)).collect();
    let h_values: Vec<f64> = pre
        .par_iter()
        .map(|x| {
            let loc = grid.locate(x);
            g.sample_cubic(&loc) / jacobian.sample_cubic(&loc)
        })
        .collect();
    if let Some(node) = h_values.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(PipelineError::DegenerateDensity { node, value: h_values[node] });
    }
    let h = ScalarField::new(grid, h_values).at(Stage::StageB)?;
    let h_mass_error = (integrate(&h) - meas).abs() / meas;
    if !(h_mass_error <= config.mass_tol) {
        return Err(PipelineError::MassDrift { stage: Stage::StageB, relative: h_mass_error, tol: config.mass_tol });
    }
    let h_collar_deviation =
        (0..grid.len()).filter(|&i| collar.contains(&pre[i])).map(|i| (h.values()[i] - 1.0).abs()).fold(0.0, f64::max);
    let fd = pullback_density(g, &phi_inv).at(Stage::StageB)?;
    let h_fd_deviation = max_abs_where(&fd, &h, stencil_valid(&grid));

    let mut rho = h.map(|v| v - 1.0).at(Stage::StageB)?;
    let cut = config.div_settings().threshold * rho.max_abs();
    let nodes: Vec<usize> = (0..grid.len()).filter(|&i| rho.values()[i].abs() > cut).collect();
    let mut report = StageBReport {
        h_min: h.min(),
        h_max: h.max(),
        h_mass_error,
        h_collar_deviation,
        h_fd_deviation,
        mass_correction: 0.0,
        theta_support: None,
        theta_source_box: None,
        div_residual: 0.0,
        jacobian_residual: 0.0,
    };
    let psi = if nodes.is_empty() {
        phi.clone()
    } else {
        let depth = collar_image_depth(phi, collar);
        let n = grid.n_dim();
        let mut ib = IndexBox { lo: [0; MAX_DIM], hi: [0; MAX_DIM] };
        for a in 0..n {
            ib.lo[a] = depth;
            ib.hi[a] = grid.shape()[a].saturating_sub(1 + depth);
        }
        let source_depth = nodes.iter().map(|&i| grid.index_depth(&grid.multi_index(i))).min().unwrap_or(0);
        // the writable block starts one layer inside the support box
        if source_depth <= depth || (0..n).any(|a| ib.hi[a] < ib.lo[a] + 4) {
            return Err(PipelineError::NoRoom { collar_depth: depth, source_depth });
        }
        let support = grid.box_of(&ib).at(Stage::StageB)?;
        let inner = bounding_box(&grid, &nodes).expect("nonempty");
        let bump = bump_kernel(grid, &inner);
        let drift = integrate(&rho);
        rho = rho.zip_with(&bump, |r, b| r - drift * b).at(Stage::StageB)?;
        report.mass_correction = drift;
        let problem = DivProblem::new(rho.clone(), support, inner).at(Stage::StageB)?;
        let sol = solve_compact_divergence(&problem, &config.div_settings()).at(Stage::StageB)?;
        report.div_residual = sol.trace.last().copied().unwrap_or(0.0);
        let h_corrected = rho.map(|r| 1.0 + r).at(Stage::StageB)?;
        if h_corrected.min() < RHO_FLOOR {
            let node = h_corrected.values().iter().position(|&v| v < RHO_FLOOR).unwrap_or(0);
            return Err(PipelineError::DegenerateDensity { node, value: h_corrected.values()[node] });
        }
        let one = ScalarField::constant(grid, 1.0).at(Stage::StageB)?;
        let flow = FlowProblem::new(h_corrected, one, sol.w, config.steps).at(Stage::StageB)?;
        let theta = integrate_flow(&flow).at(Stage::StageB)?.with_support_box(support).at(Stage::StageB)?;
        report.theta_support = Some(support);
        report.theta_source_box = Some(inner);
        compose(&theta, phi).at(Stage::StageB)?
    };
    let one = ScalarField::constant(grid, 1.0).at(Stage::StageB)?;
    report.jacobian_residual = pullback_residual(g, &one, &psi).at(Stage::StageB)?.max;
    Ok((psi, report))
}

/// Everything [`solve_on_subdomain`] measured along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct SubdomainSolve {
    pub phi: Diffeomorphism,
    pub stage_a: StageAReport,
    pub stage_b: StageBReport,
    pub collar: CollarReport,
}

/// Solves the pullback equation on the grid of `f` and `g` (Ω′) with
/// `φ = id` on `collar`. Requires `f = g` on the collar and a further 2h.
pub fn solve_on_subdomain(
    f: &ScalarField,
    g: &ScalarField,
    collar: &CollarBand,
    config: &PipelineConfig,
) -> Result<SubdomainSolve, PipelineError> {
    let grid = *f.grid();
    if g.grid() != &grid {
        return Err(PipelineError::GridMismatch);
    }
    let reach = collar.width() + 2.0 * grid.max_spacing() * (1.0 + 1e-9);
    let bounds = grid.bounds();
    if let Some(node) = (0..grid.len())
        .find(|&i| bounds.distance_to_boundary(&grid.node_at(i)) <= reach && f.values()[i] != g.values()[i])
    {
        return Err(PipelineError::CollarNotConcordant { node });
    }
    let norm = normalize_pair(f, g, config.mass_tol)?;
    let (f, g) = (&norm.f, &norm.g);

    let (big_phi, poisson_residual) = solve_jacobian_neumann(f, config.steps)?;
    let one = ScalarField::constant(grid, 1.0).at(Stage::StageA)?;
    let res_a = pullback_residual(f, &one, &big_phi).at(Stage::StageA)?;
    let stage_a = StageAReport {
        jacobian_residual: res_a.max,
        min_jacobian: res_a.min_jacobian,
        max_collar_displacement: big_phi.max_displacement_where(|p| collar.contains(p)),
        poisson_residual,
    };

    let (psi, stage_b) = concordant_jacobian_solve(&big_phi, f, g, collar, config)?;
    let phi = compose(&invert(&psi, &config.inversion()).at(Stage::Compose)?, &big_phi).at(Stage::Compose)?;

    let limit = CONCORD_FACTOR * grid.max_spacing();
    let displacement = phi.max_displacement_where(|p| collar.contains(p));
    if !(displacement <= limit) {
        return Err(PipelineError::ConcordanceFailed { displacement, limit });
    }
    let before = pullback_residual(f, g, &phi).at(Stage::Compose)?.max;
    let snapped = phi.zero_where(|p| collar.contains(p)).with_support_box(*collar.outer()).at(Stage::Compose)?;
    let after = pullback_residual(f, g, &snapped).at(Stage::Compose)?.max;
    if after > 2.0 * before && after > before + 1e-14 {
        return Err(PipelineError::SnapDegraded { before, after });
    }
    let collar_report = CollarReport {
        width: collar.width(),
        displacement_before_snap: displacement,
        limit,
        residual_before_snap: before,
        residual_after_snap: after,
    };
    Ok(SubdomainSolve { phi: snapped, stage_a, stage_b, collar: collar_report })
}

pub fn solve_pullback(
    f: &ScalarField,
    g: &ScalarField,
    config: &PipelineConfig,
) -> Result<(Diffeomorphism, SolveReport), PipelineError> {
    solve(f, g, config, None)
}

/// Like [`solve_pullback`] with the direct method.
pub fn solve_direct(
    f: &ScalarField,
    g: &ScalarField,
    config: &PipelineConfig,
) -> Result<(Diffeomorphism, SolveReport), PipelineError> {
    let config = PipelineConfig { method: Method::Direct, ..config.clone() };
    solve(f, g, &config, None)
}

/// Solves with `φ = id` on the band `V_d = {dist(·, ∂Ω) < d/2}`; requires
/// `supp(f − g)` at distance at least `d` from the boundary.
pub fn solve_with_margin(
    f: &ScalarField,
    g: &ScalarField,
    d: f64,
    config: &PipelineConfig,
) -> Result<(Diffeomorphism, SolveReport), PipelineError> {
    if f.grid() != g.grid() {
        return Err(PipelineError::GridMismatch);
    }
    let limit = f.grid().bounds().inradius();
    if !(d > 0.0 && d <= limit) {
        return Err(PipelineError::MarginRange { d, limit });
    }
    let threshold = support_threshold(f, g, config.support_threshold);
    let distance = crate::domain::support_distance(f, g, threshold).at(Stage::Subdomain)?;
    if distance < d {
        return Err(PipelineError::SupportTooClose { distance, d });
    }
    let config = PipelineConfig { margin: Some(d / 2.0), ..config.clone() };
    solve(f, g, &config, Some(d))
}

struct Clock(Vec<Timing>, Instant);

impl Clock {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.0.push(Timing { stage: stage.to_string(), seconds: (now - self.1).as_secs_f64() });
        self.1 = now;
    }
}

fn solve(
    f: &ScalarField,
    g: &ScalarField,
    config: &PipelineConfig,
    band: Option<f64>,
) -> Result<(Diffeomorphism, SolveReport), PipelineError> {
    config.validate()?;
    if f.grid() != g.grid() {
        return Err(PipelineError::GridMismatch);
    }
    let grid = *f.grid();
    if let Some(&nodes) = grid.shape()[..grid.n_dim()].iter().find(|&&s| s < MIN_GRID_N) {
        return Err(PipelineError::GridTooSmall { nodes });
    }
    let mut clock = Clock(Vec::new(), Instant::now());
    let norm = normalize_pair(f, g, config.mass_tol)?;
    clock.lap("normalize");
    let threshold = support_threshold(&norm.f, &norm.g, config.support_threshold);
    let sub = select_subdomain(&norm.f, &norm.g, threshold, config.margin).at(Stage::Subdomain)?;
    let (sub_grid, ib) = grid.sublattice(&sub.omega_prime).at(Stage::Subdomain)?;
    let omega = sub_grid.bounds();
    let outside = |i: usize| !sub.omega_prime.contains(&grid.node_at(i));
    let restricted_mass_gap = {
        let diff = norm
            .f
            .zip_with(&norm.g, |a, b| a - b)
            .at(Stage::Subdomain)?
            .restrict(sub_grid, &ib)
            .at(Stage::Subdomain)?;
        integrate(&diff).abs()
    };

    let mut stage_a = None;
    let mut stage_b = None;
    let mut collar_report = None;
    let mut direct = None;
    let phi = if sub.support_empty {
        Diffeomorphism::identity(grid)
    } else {
        let nodes = support_nodes(&norm.f, &norm.g, threshold).at(Stage::Subdomain)?;
        let gap = nodes.iter().map(|&i| omega.distance_to_boundary(&grid.node_at(i))).fold(f64::INFINITY, f64::min);
        match config.method {
            Method::Composed => {
                let eps = config.collar_width.unwrap_or(gap / COLLAR_FRACTION);
                let collar = collar_band(&omega, eps).at(Stage::Subdomain)?;
                let f_sub = norm.f.restrict(sub_grid, &ib).at(Stage::Subdomain)?;
                let g_sub = norm.g.restrict(sub_grid, &ib).at(Stage::Subdomain)?;
                clock.lap("subdomain");
                let solved = solve_on_subdomain(&f_sub, &g_sub, &collar, config)?;
                clock.lap("solve on subdomain");
                stage_a = Some(solved.stage_a);
                stage_b = Some(solved.stage_b);
                collar_report = Some(solved.collar);
                let phi = extend_by_identity(&solved.phi, &omega, &grid).at(Stage::Extend)?;
                clock.lap("extend");
                phi
            }
            Method::Direct => {
                let inner = bounding_box(&grid, &nodes).expect("nonempty");
                let rho = norm.f.zip_with(&norm.g, |a, b| a - b).at(Stage::Direct)?;
                let problem = DivProblem::new(rho, omega, inner).at(Stage::Direct)?;
                let sol = solve_compact_divergence(&problem, &config.div_settings()).at(Stage::Direct)?;
                clock.lap("divergence");
                let flow = FlowProblem::new(norm.f.clone(), norm.g.clone(), sol.w, config.steps).at(Stage::Direct)?;
                let phi = integrate_flow(&flow).at(Stage::Direct)?.with_support_box(omega).at(Stage::Direct)?;
                clock.lap("flow");
                direct =
                    Some(DirectReport { div_residual: sol.trace.last().copied().unwrap_or(0.0), source_box: inner });
                phi
            }
        }
    };

    let residual = pullback_residual(&norm.f, &norm.g, &phi).at(Stage::Verify)?;
    let outside_disp = phi.max_displacement_where(|p| !sub.omega_prime.contains(p));
    let band_width = band.map(|d| d / 2.0);
    let bounds = grid.bounds();
    let band_disp = band_width.map(|w| phi.max_displacement_where(|p| bounds.distance_to_boundary(p) < w));
    let pulled = pullback_density(&norm.g, &phi).at(Stage::Verify)?;
    let f_mass = integrate(&norm.f);
    let pullback_mass_error = (integrate(&pulled) - f_mass).abs() / f_mass;
    let inverse = invert(&phi, &config.inversion()).at(Stage::Verify)?;
    let round_trip = compose(&inverse, &phi)
        .at(Stage::Verify)?
        .max_displacement_where(|_| true)
        .max(compose(&phi, &inverse).at(Stage::Verify)?.max_displacement_where(|_| true));
    clock.lap("verify");

    let n_max = grid.shape()[..grid.n_dim()].iter().copied().max().unwrap_or(0);
    let mut gates = vec![
        Gate::at_most("pullback-residual", residual.max, method_tol(n_max)),
        Gate::above("min-jacobian", residual.min_jacobian, 0.0),
        Gate::at_most("support-outside-omega-prime", outside_disp, 0.0),
        Gate::at_most("pullback-mass", pullback_mass_error, PULLBACK_MASS_TOL),
        Gate::at_most("inversion-round-trip", round_trip, ROUND_TRIP_TOL),
        Gate::at_most("normalized-mass", norm.mass_error(), NORMALIZED_MASS_TOL),
    ];
    if let Some(v) = band_disp {
        gates.push(Gate::at_most("support-band", v, 0.0));
    }
    if let Some(b) = &stage_b {
        gates.push(Gate::at_most("h-mass", b.h_mass_error, config.mass_tol));
        gates.push(Gate::above("h-positive", b.h_min, 0.0));
        gates.push(Gate::at_most("h-collar", b.h_collar_deviation, H_COLLAR_TOL));
    }
    let report = SolveReport {
        schema: REPORT_SCHEMA.to_string(),
        method: config.method,
        shape: grid.shape()[..grid.n_dim()].to_vec(),
        steps: config.steps,
        lambda: norm.lambda,
        g_correction: norm.g_correction,
        mass_balance: norm.mass_gap,
        normalized_mass_error: norm.mass_error(),
        support_distance: sub.support_distance,
        support_empty: sub.support_empty,
        margin: sub.margin,
        omega_prime: sub.omega_prime,
        restricted_mass_gap,
        residual,
        min_jacobian: residual.min_jacobian,
        max_displacement_outside_omega_prime: outside_disp,
        band_width,
        max_displacement_in_band: band_disp,
        max_displacement: phi.max_displacement_where(|_| true),
        pullback_mass_error,
        inversion_round_trip: round_trip,
        stage_a,
        stage_b,
        collar: collar_report,
        direct,
        timings: clock.0,
        gates,
    };
    debug_assert!((0..grid.len()).filter(|&i| outside(i)).all(|i| phi.displacement().is_zero_at(i)));
    Ok((phi, report))
}

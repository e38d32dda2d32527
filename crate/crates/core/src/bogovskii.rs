//! Direct quadrature of the Bogovskii integral operator on a box. Slow, used
//! only as an independent check on [`solve_compact_divergence`](crate::divergence::solve_compact_divergence).

use rayon::prelude::*;

use crate::divergence::{DivError, DivProblem};
use crate::field::{integrate, ScalarField, VectorField};
use crate::grid::{BoxDomain, Grid, Point, MAX_DIM};

const GAUSS4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSettings {
    /// Ray directions around each node (per great circle in 3-D).
    pub directions: usize,
    /// Gauss panels per grid spacing along each ray.
    pub panels_per_cell: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { directions: 128, panels_per_cell: 2.0 }
    }
}

/// Product quartic bump supported on `support`, normalized to unit integral.
pub fn bump_kernel(grid: Grid, support: &BoxDomain) -> ScalarField {
    let raw = ScalarField::from_fn(grid, |p| {
        let mut v = 1.0;
        for a in 0..grid.n_dim() {
            let c = 0.5 * (support.lower()[a] + support.upper()[a]);
            let s = (p[a] - c) / (0.5 * support.side(a));
            v *= if s.abs() < 1.0 { (1.0 - s * s).powi(4) } else { 0.0 };
        }
        v
    })
    .expect("finite");
    let mass = integrate(&raw);
    raw.scale(1.0 / mass).expect("finite")
}

/// Quadrature of `w(x) = ∫ ρ(y)·(x−y)·∫₁^∞ θ(y + s(x−y)) s^{n−1} ds dy` with
/// `θ = kernel_density / ∫kernel_density`, both taken as multilinear interpolants.
///
/// Written in polar coordinates about `x` (`y = x − t·e`, `y + s(x−y) = x + u·e`)
/// the integrand is regular:
/// `w(x) = ∫_{|e|=1} e ∫₀^∞∫₀^∞ ρ(x − t·e) θ(x + u·e) (t+u)^{n−1} du dt de`.
/// Cost grows like `N^n` nodes times directions times ray samples; meant for small grids.
pub fn bogovskii_oracle(
    problem: &DivProblem,
    kernel_density: &ScalarField,
    settings: &OracleSettings,
) -> Result<VectorField, DivError> {
    let rho = problem.rho();
    let grid = *rho.grid();
    if !grid.same_lattice(kernel_density.grid()) {
        return Err(DivError::Field(crate::field::FieldError::GridMismatch));
    }
    let n = grid.n_dim();
    let zero = VectorField::zeros(grid);
    let Some(rho_box) = support_box_of(rho) else { return Ok(zero) };
    let Some(theta_box) = support_box_of(kernel_density) else { return Ok(zero) };
    let theta_mass = integrate(kernel_density);
    let directions = sphere_directions(n, settings.directions.max(8));
    let h_min = grid.spacings().iter().copied().fold(f64::INFINITY, f64::min);
    let panel = h_min / settings.panels_per_cell.max(0.1);

    let values: Vec<Point> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node_at(i);
            let mut acc = [0.0; MAX_DIM];
            if !problem.support_box().contains(&x) {
                return acc;
            }
            for &(e, weight) in &directions {
                let back = [-e[0], -e[1], -e[2]];
                let t_moments = ray_moments(rho, &rho_box, &x, &back, n, panel);
                if t_moments.iter().all(|&m| m == 0.0) {
                    continue;
                }
                let u_moments = ray_moments(kernel_density, &theta_box, &x, &e, n, panel);
                // expand (t+u)^{n−1} binomially
                let mut c = 0.0;
                for k in 0..n {
                    c += binomial(n - 1, k) * t_moments[k] * u_moments[n - 1 - k];
                }
                for a in 0..n {
                    acc[a] += weight * c * e[a] / theta_mass;
                }
            }
            acc
        })
        .collect();
    let comps = (0..n).map(|a| values.iter().map(|v| v[a]).collect()).collect();
    Ok(VectorField::new(grid, comps)?)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Unit directions with quadrature weights summing to the sphere's measure.
fn sphere_directions(n: usize, m: usize) -> Vec<(Point, f64)> {
    use std::f64::consts::PI;
    if n == 2 {
        return (0..m)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / m as f64;
                ([a.cos(), a.sin(), 0.0], 2.0 * PI / m as f64)
            })
            .collect();
    }
    // Gauss–Legendre in cos(polar) times uniform azimuth
    let rings = (m / 2).max(4);
    let (nodes, weights) = gauss_legendre(rings);
    let mut out = Vec::with_capacity(rings * m);
    for (z, wz) in nodes.iter().zip(&weights) {
        let r = (1.0 - z * z).sqrt();
        for j in 0..m {
            let a = 2.0 * PI * j as f64 / m as f64;
            out.push(([r * a.cos(), r * a.sin(), *z], wz * 2.0 * PI / m as f64));
        }
    }
    out
}

/// Gauss–Legendre nodes and weights on [−1, 1] by Newton iteration on `P_m`.
fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(m, z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(m, z);
        nodes[i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (nodes, weights)
}

fn legendre(m: usize, z: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, z);
    for k in 2..=m {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = m as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, dp)
}

/// Moments `∫ f(x + r·e) r^k dr`, `k < n`, over the part of the ray inside `b`.
fn ray_moments(f: &ScalarField, b: &BoxDomain, x: &Point, e: &Point, n: usize, panel: f64) -> [f64; MAX_DIM] {
    let mut out = [0.0; MAX_DIM];
    let Some((r0, r1)) = ray_window(b, x, e, n) else { return out };
    let panels = ((r1 - r0) / panel).ceil().max(1.0) as usize;
    let width = (r1 - r0) / panels as f64;
    let grid = f.grid();
    for p in 0..panels {
        let mid = r0 + (p as f64 + 0.5) * width;
        for &(node, weight) in &GAUSS4 {
            let r = mid + 0.5 * width * node;
            let mut z = [0.0; MAX_DIM];
            for a in 0..n {
                z[a] = x[a] + r * e[a];
            }
            let v = 0.5 * width * weight * f.sample(&grid.locate(&z));
            let mut rk = 1.0;
            for o in out.iter_mut().take(n) {
                *o += v * rk;
                rk *= r;
            }
        }
    }
    out
}

/// Parameter window `r ≥ 0` where `x + r·e` stays in `b`.
fn ray_window(b: &BoxDomain, x: &Point, e: &Point, n: usize) -> Option<(f64, f64)> {
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for a in 0..n {
        if e[a].abs() < 1e-300 {
            if x[a] < b.lower()[a] || x[a] > b.upper()[a] {
                return None;
            }
            continue;
        }
        let t0 = (b.lower()[a] - x[a]) / e[a];
        let t1 = (b.upper()[a] - x[a]) / e[a];
        lo = lo.max(t0.min(t1));
        hi = hi.min(t0.max(t1));
    }
    (hi > lo).then_some((lo, hi))
}

/// Box covered by the interpolant of a field: its nonzero nodes grown by one cell.
fn support_box_of(field: &ScalarField) -> Option<BoxDomain> {
    let grid = field.grid();
    let nodes: Vec<usize> = field.values().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
    let inner = crate::domain::bounding_box(grid, &nodes)?;
    let bounds = grid.bounds();
    let lo: Vec<f64> = (0..grid.n_dim()).map(|a| (inner.lower()[a] - grid.spacing(a)).max(bounds.lower()[a])).collect();
    let hi: Vec<f64> = (0..grid.n_dim()).map(|a| (inner.upper()[a] + grid.spacing(a)).min(bounds.upper()[a])).collect();
    BoxDomain::new(&lo, &hi).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{dipole, solve_compact_divergence, DivSettings};
    use crate::field::divergence;

    fn boxes() -> (BoxDomain, BoxDomain) {
        (BoxDomain::new(&[0.2, 0.2], &[0.8, 0.8]).unwrap(), BoxDomain::new(&[0.3, 0.3], &[0.7, 0.7]).unwrap())
    }

    fn l2(field: &[f64], grid: Grid) -> f64 {
        integrate(&ScalarField::new(grid, field.iter().map(|v| v * v).collect()).unwrap()).sqrt()
    }

    #[test]
    fn zero_source() {
        let g = Grid::unit(2, 17).unwrap();
        let (s, i) = boxes();
        let p = DivProblem::new(ScalarField::zeros(g), s, i).unwrap();
        let w = bogovskii_oracle(&p, &bump_kernel(g, &i), &OracleSettings::default()).unwrap();
        assert_eq!(w.max_norm(), 0.0);
    }

    #[test]
    fn kernel_has_unit_mass() {
        let g = Grid::unit(2, 33).unwrap();
        let (_, i) = boxes();
        assert!((integrate(&bump_kernel(g, &i)) - 1.0).abs() < 1e-14);
    }

    fn self_check(n: usize) -> f64 {
        let g = Grid::unit(2, n).unwrap();
        let (s, i) = boxes();
        let rho = dipole(g, [0.42, 0.5], [0.58, 0.5], 0.1);
        let p = DivProblem::new(rho.clone(), s, i).unwrap();
        let w = bogovskii_oracle(&p, &bump_kernel(g, &i), &OracleSettings::default()).unwrap();
        let diff: Vec<f64> = divergence(&w).values().iter().zip(rho.values()).map(|(d, r)| d - r).collect();
        l2(&diff, g) / l2(rho.values(), g)
    }

    #[test]
    fn dipole_self_consistency_n17() {
        let g = Grid::unit(2, 17).unwrap();
        let (s, i) = boxes();
        let rho = dipole(g, [0.42, 0.5], [0.58, 0.5], 0.1);
        let p = DivProblem::new(rho.clone(), s, i).unwrap();
        let w = bogovskii_oracle(&p, &bump_kernel(g, &i), &OracleSettings::default()).unwrap();
        let err = divergence(&w).values().iter().zip(rho.values()).map(|(d, r)| (d - r).abs()).fold(0.0, f64::max);
        println!("oracle N=17 self-check: {:.4e}", err / rho.max_abs());
        assert!(err <= 0.66 * rho.max_abs());
    }

    #[test]
    fn discrete_divergence_converges_second_order() {
        let errs: Vec<f64> = [33, 65, 129].iter().map(|&n| self_check(n)).collect();
        println!("oracle self-check: {errs:?}");
        assert!(errs[2] < errs[1] && errs[1] < errs[0]);
        let order = (errs[1] / errs[2]).log2();
        assert!(order > 1.6, "order {order}");
    }

    #[test]
    fn agrees_with_compact_solver_n33() {
        let g = Grid::unit(2, 33).unwrap();
        let (s, i) = boxes();
        let rho = dipole(g, [0.42, 0.5], [0.58, 0.5], 0.1);
        let p = DivProblem::new(rho.clone(), s, i).unwrap();
        let oracle = divergence(&bogovskii_oracle(&p, &bump_kernel(g, &i), &OracleSettings::default()).unwrap());
        let settings = DivSettings { div_tol: 1e-2, ..Default::default() };
        let compact = divergence(&solve_compact_divergence(&p, &settings).unwrap().w);
        let diff: Vec<f64> = oracle.values().iter().zip(compact.values()).map(|(a, b)| a - b).collect();
        let rel = l2(&diff, g) / l2(rho.values(), g);
        // measured 0.222; the gap is the O(h²) truncation of div_h on the continuous field
        assert!(rel <= 0.27, "relative L2 {rel}");
    }
}

//! Compactly supported solutions of `div w = ρ` on box sub-regions.
//!
//! The first sweep takes the cutoff Neumann gradient `χ·∇u`; its residual lives
//! in the cutoff annulus. Later sweeps use a strip-flux construction: the source
//! is split into a part with zero integral along every line of the last axes and
//! a separable remainder, each inverted line by line with the central-difference
//! recurrence. Both constructions write only to nodes strictly inside the
//! support box.

use thiserror::Error;

use crate::domain::{make_cutoff, DomainError};
use crate::field::{divergence, gradient, FieldError, ScalarField, VectorField};
use crate::grid::{BoxDomain, Grid, GridError, IndexBox, MAX_DIM};
use crate::poisson::{solve_neumann_poisson, PoissonError, PoissonSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Poisson(#[from] PoissonError),
    #[error("source has nonzero mean: |∫rho| = {integral:e} exceeds {limit:e}")]
    NonzeroMean { integral: f64, limit: f64 },
    #[error("source node at index {0} lies outside the inner box")]
    SourceOutsideInner(usize),
    #[error("inner box must lie strictly inside the support box, and the support box inside the grid")]
    Nesting,
    #[error("support box holds too few interior nodes")]
    SupportTooSmall,
    #[error("annulus correction failed: residual trace {trace:?}")]
    CorrectionFailed { trace: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivSettings {
    /// Target for `‖div_h w − ρ‖∞ / ‖ρ‖∞`.
    pub div_tol: f64,
    pub max_sweeps: usize,
    /// Admissible `|∫ρ|` relative to `‖ρ‖∞ · meas(support_box)`.
    pub mean_tol: f64,
    /// Source nodes below `threshold · ‖ρ‖∞` are treated as zero.
    pub threshold: f64,
    /// Minimum annulus width, in cells, for the cutoff-gradient first sweep.
    pub min_annulus_cells: usize,
    pub poisson: PoissonSettings,
}

impl Default for DivSettings {
    fn default() -> Self {
        Self {
            div_tol: 1e-3,
            max_sweeps: 8,
            mean_tol: 1e-9,
            threshold: 1e-12,
            min_annulus_cells: 4,
            poisson: PoissonSettings::default(),
        }
    }
}

/// Zero-mean source with its support box and the box holding `supp ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DivProblem {
    rho: ScalarField,
    support_box: BoxDomain,
    inner_box: BoxDomain,
}

impl DivProblem {
    pub fn new(rho: ScalarField, support_box: BoxDomain, inner_box: BoxDomain) -> Result<Self, DivError> {
        let grid = rho.grid();
        if !grid.bounds().contains_box(&support_box) || !support_box.strictly_contains(&inner_box) {
            return Err(DivError::Nesting);
        }
        Ok(Self { rho, support_box, inner_box })
    }

    pub fn rho(&self) -> &ScalarField {
        &self.rho
    }

    pub fn support_box(&self) -> &BoxDomain {
        &self.support_box
    }

    pub fn inner_box(&self) -> &BoxDomain {
        &self.inner_box
    }

    fn validate(&self, settings: &DivSettings) -> Result<(), DivError> {
        let grid = self.rho.grid();
        let scale = self.rho.max_abs();
        let cut = settings.threshold * scale;
        for (i, v) in self.rho.values().iter().enumerate() {
            if v.abs() > cut && !self.inner_box.contains(&grid.node_at(i)) {
                return Err(DivError::SourceOutsideInner(i));
            }
        }
        let integral = crate::field::integrate(&self.rho);
        let limit = settings.mean_tol * scale * self.support_box.measure();
        if integral.abs() > limit {
            return Err(DivError::NonzeroMean { integral, limit });
        }
        Ok(())
    }
}

/// Solution field with the relative residual after each sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct DivSolution {
    pub w: VectorField,
    pub trace: Vec<f64>,
}

/// Interior of the support box's node set: the only nodes a solution may touch.
fn writable_nodes(grid: &Grid, support_box: &BoxDomain) -> Result<IndexBox, DivError> {
    let mut ib = grid.index_box(support_box).ok_or(DivError::SupportTooSmall)?;
    for a in 0..grid.n_dim() {
        if ib.hi[a] < ib.lo[a] + 4 {
            return Err(DivError::SupportTooSmall);
        }
        ib.lo[a] += 1;
        ib.hi[a] -= 1;
    }
    Ok(ib)
}

/// Solves `div_h w = ρ` with `w` bit-exact zero at every node outside the support box.
pub fn solve_compact_divergence(problem: &DivProblem, settings: &DivSettings) -> Result<DivSolution, DivError> {
    problem.validate(settings)?;
    let rho = &problem.rho;
    let grid = *rho.grid();
    let scale = rho.max_abs();
    if scale == 0.0 {
        return Ok(DivSolution { w: VectorField::zeros(grid), trace: Vec::new() });
    }
    let inner_nodes = writable_nodes(&grid, &problem.support_box)?;
    let mut comps = vec![vec![0.0; grid.len()]; grid.n_dim()];
    let mut trace = Vec::new();

    let ramp_end = grid.box_of(&inner_nodes)?;
    if ramp_end.strictly_contains(&problem.inner_box)
        && annulus_cells(&grid, &problem.inner_box, &ramp_end) >= settings.min_annulus_cells
    {
        cutoff_gradient_sweep(problem, &settings.poisson, &inner_nodes, &mut comps)?;
    } else {
        strip_flux_sweep(rho, &inner_nodes, &mut comps);
    }
    let mut residual = residual_of(rho, &comps)?;
    trace.push(residual.max_abs() / scale);

    while *trace.last().unwrap() > settings.div_tol {
        if trace.len() >= settings.max_sweeps {
            return Err(DivError::CorrectionFailed { trace });
        }
        strip_flux_sweep(&residual, &inner_nodes, &mut comps);
        residual = residual_of(rho, &comps)?;
        let r = residual.max_abs() / scale;
        let prev = *trace.last().unwrap();
        trace.push(r);
        if r > settings.div_tol && r >= 0.999 * prev {
            return Err(DivError::CorrectionFailed { trace });
        }
    }
    Ok(DivSolution { w: VectorField::new(grid, comps)?, trace })
}

fn residual_of(rho: &ScalarField, comps: &[Vec<f64>]) -> Result<ScalarField, DivError> {
    let w = VectorField::new(*rho.grid(), comps.to_vec())?;
    Ok(rho.zip_with(&divergence(&w), |r, d| r - d)?)
}

/// Narrowest gap between inner and support box, in cells.
fn annulus_cells(grid: &Grid, inner: &BoxDomain, outer: &BoxDomain) -> usize {
    (0..grid.n_dim())
        .map(|a| {
            let h = grid.spacing(a);
            let gap = (inner.lower()[a] - outer.lower()[a]).min(outer.upper()[a] - inner.upper()[a]);
            (gap / h + 1e-9).floor().max(0.0) as usize
        })
        .min()
        .unwrap_or(0)
}

fn cutoff_gradient_sweep(
    problem: &DivProblem,
    poisson: &PoissonSettings,
    writable: &IndexBox,
    comps: &mut [Vec<f64>],
) -> Result<(), DivError> {
    let grid = *problem.rho.grid();
    let n = grid.n_dim();
    let (sub, ib) = grid.sublattice(&problem.support_box)?;
    let local_rho = problem.rho.restrict(sub, &ib)?;
    let u = solve_neumann_poisson(&local_rho, poisson)?;
    let grad = gradient(&u);
    // the ramp ends on the writable block's faces, so the block's outer layer stays zero
    let ramp_end = grid.box_of(writable)?;
    let chi = make_cutoff(&problem.inner_box, &ramp_end, &sub)?;
    for li in 0..sub.len() {
        let lk = sub.multi_index(li);
        let mut k = [0; MAX_DIM];
        for a in 0..n {
            k[a] = lk[a] + ib.lo[a];
        }
        if !(0..n).all(|a| k[a] > writable.lo[a] && k[a] < writable.hi[a]) {
            continue;
        }
        let c = chi.field().values()[li];
        if c == 0.0 {
            continue;
        }
        let gi = grid.linear_index(&k);
        for a in 0..n {
            comps[a][gi] += c * grad.component(a)[li];
        }
    }
    Ok(())
}

/// Dense local array over an index box.
struct Block {
    n_dim: usize,
    shape: [usize; MAX_DIM],
    stride: [usize; MAX_DIM],
    h: [f64; MAX_DIM],
}

impl Block {
    fn new(grid: &Grid, ib: &IndexBox) -> Self {
        let n_dim = grid.n_dim();
        let mut shape = [1; MAX_DIM];
        let mut stride = [0; MAX_DIM];
        let mut h = [0.0; MAX_DIM];
        let mut s = 1;
        for a in 0..n_dim {
            shape[a] = ib.count(a);
            stride[a] = s;
            s *= shape[a];
            h[a] = grid.spacing(a);
        }
        Self { n_dim, shape, stride, h }
    }

    fn len(&self) -> usize {
        self.shape[..self.n_dim].iter().product()
    }

    fn index(&self, k: &[usize; MAX_DIM]) -> usize {
        (0..self.n_dim).map(|a| k[a] * self.stride[a]).sum()
    }

    fn multi(&self, mut i: usize) -> [usize; MAX_DIM] {
        let mut k = [0; MAX_DIM];
        for a in 0..self.n_dim {
            k[a] = i % self.shape[a];
            i /= self.shape[a];
        }
        k
    }

    /// Bump along `axis`, zero at both ends, with unit Riemann sum.
    fn profile(&self, axis: usize) -> Vec<f64> {
        let n = self.shape[axis];
        let mid = (n - 1) as f64 / 2.0;
        let mut p: Vec<f64> = (0..n).map(|k| (1.0 - ((k as f64 - mid) / mid).powi(2)).powi(4)).collect();
        let s: f64 = p.iter().sum::<f64>() * self.h[axis];
        p.iter_mut().for_each(|v| *v /= s);
        p
    }

    /// Compactly supported `w` with `(w[k+1] − w[k−1])/2h = q[k]` on every line along `axis`,
    /// after moving each line's even and odd sums into a smooth profile (those sums
    /// are invariants of the central difference and cannot be produced by a compact field).
    fn central_antiderivative(&self, q: &[f64], axis: usize) -> Vec<f64> {
        let n = self.shape[axis];
        let s = self.stride[axis];
        let h2 = 2.0 * self.h[axis];
        let prof = self.profile(axis);
        let prof_sum = [prof.iter().step_by(2).sum::<f64>(), prof.iter().skip(1).step_by(2).sum::<f64>()];
        let mut out = vec![0.0; q.len()];
        let mut line = vec![0.0; n];
        for start in 0..q.len() {
            if !(start / s).is_multiple_of(n) {
                continue;
            }
            let mut sums = [0.0; 2];
            for (j, l) in line.iter_mut().enumerate() {
                *l = q[start + j * s];
                sums[j & 1] += *l;
            }
            for (j, l) in line.iter_mut().enumerate() {
                *l -= sums[j & 1] / prof_sum[j & 1] * prof[j];
            }
            // w[-1] = w[0] = 0
            let mut prev = 0.0;
            let mut cur = 0.0;
            for j in 0..n - 1 {
                let next = prev + h2 * line[j];
                out[start + (j + 1) * s] = next;
                prev = cur;
                cur = next;
            }
        }
        out
    }
}

/// Adds to `out` a field whose central-difference divergence over `axes` is `q`.
/// Requires `q` to sum to zero over every parity class of `axes` on each line of
/// the remaining axes; the split below keeps that property at every level.
fn strip_flux(block: &Block, q: &[f64], axes: &[usize], out: &mut [Vec<f64>]) {
    let a = axes[0];
    let rest = &axes[1..];
    if rest.is_empty() {
        for (o, v) in out[a].iter_mut().zip(block.central_antiderivative(q, a)) {
            *o += v;
        }
        return;
    }
    // per-axis bump restricted to one parity, with unit Riemann sum on that parity
    let profiles: Vec<Vec<f64>> = (0..MAX_DIM)
        .map(|b| {
            if !rest.contains(&b) {
                return Vec::new();
            }
            let mut p = block.profile(b);
            let sums = [p.iter().step_by(2).sum::<f64>(), p.iter().skip(1).step_by(2).sum::<f64>()];
            for (k, v) in p.iter_mut().enumerate() {
                *v /= sums[k & 1] * block.h[b];
            }
            p
        })
        .collect();
    let psi = |k: &[usize; MAX_DIM]| rest.iter().map(|&b| profiles[b][k[b]]).product::<f64>();
    let cell: f64 = rest.iter().map(|&b| block.h[b]).product();
    // collapse the rest axes onto their parity
    let key = |k: &[usize; MAX_DIM]| {
        let mut kk = *k;
        for &b in rest {
            kk[b] &= 1;
        }
        block.index(&kk)
    };

    let mut collapsed = vec![0.0; block.len()];
    for (i, v) in q.iter().enumerate() {
        collapsed[key(&block.multi(i))] += cell * v;
    }
    let mut m = vec![0.0; block.len()];
    let mut r = vec![0.0; block.len()];
    for i in 0..block.len() {
        let k = block.multi(i);
        m[i] = collapsed[key(&k)];
        r[i] = q[i] - m[i] * psi(&k);
    }
    strip_flux(block, &r, rest, out);
    let wm = block.central_antiderivative(&m, a);
    for i in 0..block.len() {
        let k = block.multi(i);
        out[a][i] += psi(&k) * wm[i];
    }
}

/// Removes the sum of `q` over each of the `2ⁿ` parity classes, spread evenly
/// over the class. These sums are invariant under the central divergence of a
/// compactly supported field, so the removed part is the unreachable remainder.
fn remove_parity_sums(block: &Block, q: &mut [f64]) {
    let classes = 1usize << block.n_dim;
    let class_of = |i: usize| {
        let k = block.multi(i);
        (0..block.n_dim).map(|a| (k[a] & 1) << a).sum::<usize>()
    };
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for (i, v) in q.iter().enumerate() {
        let c = class_of(i);
        sums[c] += v;
        counts[c] += 1;
    }
    for (i, v) in q.iter_mut().enumerate() {
        let c = class_of(i);
        *v -= sums[c] / counts[c] as f64;
    }
}

fn strip_flux_sweep(q: &ScalarField, writable: &IndexBox, comps: &mut [Vec<f64>]) {
    let grid = *q.grid();
    let n = grid.n_dim();
    let block = Block::new(&grid, writable);
    let to_global = |i: usize| {
        let lk = block.multi(i);
        let mut k = [0; MAX_DIM];
        for a in 0..n {
            k[a] = lk[a] + writable.lo[a];
        }
        grid.linear_index(&k)
    };
    let mut local: Vec<f64> = (0..block.len()).map(|i| q.values()[to_global(i)]).collect();
    remove_parity_sums(&block, &mut local);
    let axes: Vec<usize> = (0..n).collect();
    let mut out = vec![vec![0.0; block.len()]; n];
    strip_flux(&block, &local, &axes, &mut out);
    for i in 0..block.len() {
        let gi = to_global(i);
        for a in 0..n {
            comps[a][gi] += out[a][i];
        }
    }
}

/// Zero-mean dipole of two compact quartic bumps, used by tests and benchmarks.
pub fn dipole(grid: Grid, plus: [f64; 2], minus: [f64; 2], radius: f64) -> ScalarField {
    let bump = |p: &crate::grid::Point, c: [f64; 2]| {
        let r2 = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / (radius * radius);
        if r2 < 1.0 {
            (1.0 - r2).powi(4)
        } else {
            0.0
        }
    };
    let a = ScalarField::from_fn(grid, |p| bump(p, plus)).expect("finite");
    let b = ScalarField::from_fn(grid, |p| bump(p, minus)).expect("finite");
    let ratio = crate::field::integrate(&a) / crate::field::integrate(&b);
    a.zip_with(&b, |x, y| x - ratio * y).expect("same grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::integrate;
    use proptest::prelude::*;

    fn boxes() -> (BoxDomain, BoxDomain) {
        (BoxDomain::new(&[0.2, 0.2], &[0.8, 0.8]).unwrap(), BoxDomain::new(&[0.3, 0.3], &[0.7, 0.7]).unwrap())
    }

    fn check(problem: &DivProblem, sol: &DivSolution, tol: f64) {
        let grid = problem.rho().grid();
        for i in 0..grid.len() {
            if !problem.support_box().contains(&grid.node_at(i)) {
                assert!(sol.w.is_zero_at(i), "nonzero outside support at {i}");
            }
        }
        let div = divergence(&sol.w);
        let res = div.values().iter().zip(problem.rho().values()).map(|(d, r)| (d - r).abs()).fold(0.0, f64::max);
        assert!(res <= tol * problem.rho().max_abs(), "residual {res}");
    }

    #[test]
    fn zero_source() {
        let g = Grid::unit(2, 33).unwrap();
        let (s, i) = boxes();
        let p = DivProblem::new(ScalarField::zeros(g), s, i).unwrap();
        let sol = solve_compact_divergence(&p, &DivSettings::default()).unwrap();
        assert!(sol.w.components().iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dipole_solve() {
        let g = Grid::unit(2, 65).unwrap();
        let (s, i) = boxes();
        let rho = dipole(g, [0.42, 0.5], [0.58, 0.5], 0.1);
        let p = DivProblem::new(rho, s, i).unwrap();
        let sol = solve_compact_divergence(&p, &DivSettings::default()).unwrap();
        check(&p, &sol, 1e-3);
        assert!(sol.trace.windows(2).all(|t| t[1] < t[0]), "{:?}", sol.trace);
    }

    #[test]
    fn narrow_annulus_uses_strip_flux() {
        let g = Grid::unit(2, 65).unwrap();
        let s = BoxDomain::new(&[0.28, 0.28], &[0.72, 0.72]).unwrap();
        let i = BoxDomain::new(&[0.3, 0.3], &[0.7, 0.7]).unwrap();
        let rho = dipole(g, [0.42, 0.45], [0.58, 0.55], 0.1);
        let p = DivProblem::new(rho, s, i).unwrap();
        let sol = solve_compact_divergence(&p, &DivSettings::default()).unwrap();
        check(&p, &sol, 1e-3);
    }

    #[test]
    fn three_dimensional_strip_flux() {
        let g = Grid::unit(3, 25).unwrap();
        let s = BoxDomain::new(&[0.1, 0.1, 0.1], &[0.9, 0.9, 0.9]).unwrap();
        let i = BoxDomain::new(&[0.2, 0.2, 0.2], &[0.8, 0.8, 0.8]).unwrap();
        let bump = |p: &crate::grid::Point, c: [f64; 3]| {
            let r2 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() / 0.04;
            if r2 < 1.0 {
                (1.0 - r2).powi(4)
            } else {
                0.0
            }
        };
        let rho = ScalarField::from_fn(g, |p| bump(p, [0.4, 0.5, 0.5]) - bump(p, [0.6, 0.5, 0.5])).unwrap();
        let settings = DivSettings { min_annulus_cells: usize::MAX, ..Default::default() };
        let p = DivProblem::new(rho, s, i).unwrap();
        let sol = solve_compact_divergence(&p, &settings).unwrap();
        check(&p, &sol, 1e-3);
    }

    #[test]
    fn nonzero_mean_rejected() {
        let g = Grid::unit(2, 33).unwrap();
        let (s, i) = boxes();
        let rho = ScalarField::from_fn(g, |p| if i.contains(p) { 1.0 } else { 0.0 }).unwrap();
        let p = DivProblem::new(rho, s, i).unwrap();
        assert!(matches!(solve_compact_divergence(&p, &DivSettings::default()), Err(DivError::NonzeroMean { .. })));
    }

    #[test]
    fn source_outside_inner_rejected() {
        let g = Grid::unit(2, 33).unwrap();
        let (s, i) = boxes();
        let rho = dipole(g, [0.25, 0.5], [0.5, 0.5], 0.05);
        let p = DivProblem::new(rho, s, i).unwrap();
        assert!(matches!(solve_compact_divergence(&p, &DivSettings::default()), Err(DivError::SourceOutsideInner(_))));
        assert!(DivProblem::new(ScalarField::zeros(g), i, s).is_err());
    }

    #[test]
    fn residual_means_stay_zero() {
        let g = Grid::unit(2, 65).unwrap();
        let (s, i) = boxes();
        let rho = dipole(g, [0.4, 0.4], [0.6, 0.62], 0.08);
        let p = DivProblem::new(rho.clone(), s, i).unwrap();
        let settings = DivSettings { div_tol: 1e-9, max_sweeps: 4, ..Default::default() };
        let mut comps = vec![vec![0.0; g.len()]; 2];
        let writable = writable_nodes(&g, &s).unwrap();
        cutoff_gradient_sweep(&p, &settings.poisson, &writable, &mut comps).unwrap();
        for _ in 0..3 {
            let res = residual_of(&rho, &comps).unwrap();
            assert!(integrate(&res).abs() <= 1e-10 * rho.max_abs());
            strip_flux_sweep(&res, &writable, &mut comps);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn exact_support_on_random_dipoles(
            ax in 0.4f64..0.6, ay in 0.4f64..0.6,
            bx in 0.4f64..0.6, by in 0.4f64..0.6,
            r in 0.08f64..0.1,
        ) {
            let g = Grid::unit(2, 65).unwrap();
            let (s, i) = boxes();
            let rho = dipole(g, [ax, ay], [bx, by], r);
            prop_assume!(rho.max_abs() > 1e-3);
            let p = DivProblem::new(rho, s, i).unwrap();
            let sol = solve_compact_divergence(&p, &DivSettings::default()).unwrap();
            for k in 0..g.len() {
                if !s.contains(&g.node_at(k)) {
                    prop_assert!(sol.w.is_zero_at(k));
                }
            }
            let div = divergence(&sol.w);
            let res = div.values().iter().zip(p.rho().values()).map(|(d, r)| (d - r).abs()).fold(0.0, f64::max);
            prop_assert!(res <= 1e-3 * p.rho().max_abs());
            prop_assert!(sol.trace.windows(2).all(|t| t[1] < t[0]));
        }
    }
}

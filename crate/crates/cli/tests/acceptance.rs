//! Acceptance criteria 1–10, one test per criterion.

use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use jf_core::bogovskii::{bogovskii_oracle, bump_kernel, OracleSettings};
use jf_core::diffeo::{compose, invert, Diffeomorphism, InversionSettings};
use jf_core::divergence::{dipole, solve_compact_divergence, DivProblem, DivSettings};
use jf_core::gallery::{oned_profile, GalleryProblem};
use jf_core::io::{format_field_csv, parse_field_csv, ReportFile};
use jf_core::pipeline::{normalize_pair, solve_pullback, solve_with_margin, Method, PipelineConfig};
use jf_core::report::SolveReport;
use jf_core::verify::{oracle_compare_1d, run_convergence};
use jf_core::{divergence, BoxDomain, Grid, ScalarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 65;
const STEPS: usize = 32;
const RESIDUAL_TOL: f64 = 2e-2;
const ROUND_TRIP_TOL: f64 = 1e-6;

struct Run {
    problem: GalleryProblem,
    f: ScalarField,
    g: ScalarField,
    phi: Diffeomorphism,
    report: SolveReport,
    elapsed: Duration,
}

fn solve_all(method: Method) -> Vec<Run> {
    GalleryProblem::ALL
        .iter()
        .map(|&problem| {
            let (f, g) = problem.pair(N).unwrap();
            let config = PipelineConfig { method, grid_n: N, steps: STEPS, ..Default::default() };
            let start = Instant::now();
            let (phi, report) = solve_pullback(&f, &g, &config).unwrap_or_else(|e| panic!("{problem} ({method}): {e}"));
            Run { problem, f, g, phi, report, elapsed: start.elapsed() }
        })
        .collect()
}

fn composed() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| solve_all(Method::Composed))
}

fn direct() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| solve_all(Method::Direct))
}

fn check_pullback(runs: &[Run]) {
    for r in runs {
        println!("{} {}: residual {:.4e}, {:.2?}", r.problem, r.report.method, r.report.residual.max, r.elapsed);
        assert!(r.report.residual.max <= RESIDUAL_TOL, "{}: residual {:e}", r.problem, r.report.residual.max);
        assert!(r.elapsed <= Duration::from_secs(60), "{}: {:?}", r.problem, r.elapsed);
    }
}

fn check_support(runs: &[Run]) {
    for r in runs {
        let grid = *r.phi.grid();
        let omega_prime = r.report.omega_prime;
        for i in 0..grid.len() {
            if !omega_prime.contains(&grid.node_at(i)) {
                let u = r.phi.displacement().at(i);
                assert!(u.iter().all(|&v| v == 0.0), "{}: node {i} moved by {u:?}", r.problem);
            }
        }
        assert_eq!(r.report.max_displacement_outside_omega_prime, 0.0);
    }
}

fn check_diffeomorphism(runs: &[Run]) {
    for r in runs {
        assert!(r.report.passed(), "{}: failed gates {:?}", r.problem, r.report.failed_gates().collect::<Vec<_>>());
        let det = r.phi.jacobian_determinant().unwrap();
        assert!(det.min() > 0.0, "{}: min det {}", r.problem, det.min());
        let inverse = invert(&r.phi, &InversionSettings::default()).unwrap();
        let round_trip = compose(&inverse, &r.phi).unwrap().max_displacement_where(|_| true);
        println!("{} {}: min det {:.4}, round trip {:.2e}", r.problem, r.report.method, det.min(), round_trip);
        assert!(round_trip <= ROUND_TRIP_TOL, "{}: round trip {round_trip:e}", r.problem);
    }
}

#[test]
fn criterion_01_pullback_equation() {
    check_pullback(composed());
}

#[test]
fn criterion_02_support_control() {
    check_support(composed());
    let (f, g) = GalleryProblem::TwinBumps.pair(N).unwrap();
    let config = PipelineConfig { grid_n: N, steps: STEPS, ..Default::default() };
    let d = 0.3;
    let (phi, report) = solve_with_margin(&f, &g, d, &config).unwrap();
    let bounds = f.grid().bounds();
    let grid = *f.grid();
    let mut band_nodes = 0;
    for i in 0..grid.len() {
        let p = grid.node_at(i);
        if bounds.distance_to_boundary(&p) < d / 2.0 {
            band_nodes += 1;
            assert!(phi.displacement().at(i).iter().all(|&v| v == 0.0), "band node {i} moved");
        }
    }
    assert!(band_nodes > 0);
    assert_eq!(report.max_displacement_in_band, Some(0.0));
}

#[test]
fn criterion_03_diffeomorphism() {
    check_diffeomorphism(composed());
}

#[test]
fn criterion_04_concordance_density() {
    for r in composed() {
        let b = r.report.stage_b.as_ref().expect("composed runs report stage B");
        println!(
            "{}: ∫h error {:.2e}, h ∈ [{:.4}, {:.4}], |h − 1| near Φ(collar) {:e}",
            r.problem, b.h_mass_error, b.h_min, b.h_max, b.h_collar_deviation
        );
        assert!(b.h_mass_error <= 1e-3, "{}", r.problem);
        assert!(b.h_min > 0.0, "{}", r.problem);
        assert!(b.h_collar_deviation <= 1e-6, "{}", r.problem);
    }
}

#[test]
fn criterion_05_normalization() {
    for r in composed().iter().chain(direct()) {
        assert!(r.report.normalized_mass_error <= 1e-10, "{}: {:e}", r.problem, r.report.normalized_mass_error);
        let norm = normalize_pair(&r.f, &r.g, 1e-3).unwrap();
        let meas = r.f.grid().measure();
        for field in [&norm.f, &norm.g] {
            assert!((jf_core::integrate(field) - meas).abs() <= 1e-10 * meas);
        }
    }
}

#[test]
fn criterion_06_convergence_order() {
    let mut orders = Vec::new();
    for method in [Method::Composed, Method::Direct] {
        let config = PipelineConfig { method, grid_n: N, steps: STEPS, ..Default::default() };
        let study = run_convergence("twin-bumps", &[33, 65, 129], &config).unwrap();
        let order = study.order.value().expect("nonzero residuals");
        println!("{method}: residuals {:?}, steps {:?}, order {order:.3}", study.residuals(), study.steps);
        assert!((1.5..=2.5).contains(&order), "{method}: order {order}");
        assert!(study.is_monotone());
        orders.push(order);
    }
    assert!((orders[0] - orders[1]).abs() <= 0.5, "orders {orders:?}");
}

#[test]
fn criterion_07_one_dimensional_oracle() {
    let d65 = oracle_compare_1d(&oned_profile(65).unwrap(), 32).unwrap();
    let d129 = oracle_compare_1d(&oned_profile(129).unwrap(), 64).unwrap();
    let ratio = d65 / d129;
    println!("oracle deviation {d65:.3e} at 65, {d129:.3e} at 129, ratio {ratio:.3}");
    assert!(d65 <= 3e-2, "{d65}");
    assert!((3.0..=5.0).contains(&ratio), "{ratio}");
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn criterion_08_divergence_solver() {
    let grid = Grid::unit(2, 65).unwrap();
    let support = BoxDomain::new(&[0.2, 0.2], &[0.8, 0.8]).unwrap();
    let inner = BoxDomain::new(&[0.3, 0.3], &[0.7, 0.7]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut solved = 0;
    while solved < 100 {
        let mut c = || [rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6)];
        let (a, b) = (c(), c());
        let radius = rng.gen_range(0.08..0.1);
        let rho = dipole(grid, a, b, radius);
        if rho.max_abs() <= 1e-3 {
            continue;
        }
        let problem = DivProblem::new(rho, support, inner).unwrap();
        let sol = solve_compact_divergence(&problem, &DivSettings::default()).unwrap();
        for i in 0..grid.len() {
            if !support.contains(&grid.node_at(i)) {
                assert!(sol.w.at(i).iter().all(|&v| v == 0.0), "dipole {solved}: w ≠ 0 at node {i}");
            }
        }
        let div = divergence(&sol.w);
        let res = div.values().iter().zip(problem.rho().values()).map(|(d, r)| (d - r).abs()).fold(0.0, f64::max)
            / problem.rho().max_abs();
        assert!(res <= 1e-3, "dipole {solved}: residual {res:e}");
        worst = worst.max(res);
        solved += 1;
    }
    println!("100 dipoles: exact support, worst relative residual {worst:.2e}");

    let grid = Grid::unit(2, 33).unwrap();
    let rho = dipole(grid, [0.42, 0.5], [0.58, 0.5], 0.1);
    let problem = DivProblem::new(rho.clone(), support, inner).unwrap();
    let oracle =
        divergence(&bogovskii_oracle(&problem, &bump_kernel(grid, &inner), &OracleSettings::default()).unwrap());
    let settings = DivSettings { div_tol: 1e-2, ..Default::default() };
    let compact = divergence(&solve_compact_divergence(&problem, &settings).unwrap().w);
    let diff: Vec<f64> = oracle.values().iter().zip(compact.values()).map(|(a, b)| a - b).collect();
    let agreement = l2(&diff) / l2(rho.values());
    println!("Bogovskii agreement at N=33: relative L2 {agreement:.4}");
    assert!(agreement <= 5e-2, "Bogovskii agreement {agreement:.4} exceeds 5e-2");
}

#[test]
fn criterion_09_cross_method() {
    let direct = direct();
    check_pullback(direct);
    check_support(direct);
    check_diffeomorphism(direct);
    for (c, d) in composed().iter().zip(direct) {
        assert_eq!(c.problem, d.problem);
        assert!(c.report.passed() && d.report.passed());
    }
}

#[test]
fn criterion_10_io_and_exit_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = Grid::new(&[7, 5], &[-0.3, 0.1], &[1.7, 0.9]).unwrap();
    let values = (0..grid.len()).map(|_| rng.gen_range(1e-3..1e3) * 10f64.powi(rng.gen_range(-30..30))).collect();
    let field = ScalarField::new(grid, values).unwrap();
    let back = parse_field_csv(&format_field_csv(&field).unwrap(), "mem.csv".as_ref()).unwrap();
    assert!(field.values().iter().zip(back.values()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let run = &composed()[0];
    let text = serde_json::to_string(&ReportFile { report: run.report.clone(), renders: vec![] }).unwrap();
    let parsed: ReportFile = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.report, run.report);
    assert_eq!(serde_json::to_string(&parsed).unwrap(), text);

    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_jf"))
        .args([
            "solve",
            "--f",
            "gallery:twin-bumps:src",
            "--g",
            "gallery:twin-bumps:dst",
            "--grid",
            "33",
            "--steps",
            "16",
        ])
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report.report.schema, "jf-report-1");
    assert_eq!(report.report.max_displacement_outside_omega_prime, 0.0);

    let header = "17,17,0,0,1,1\n";
    let rows = |v: &str| vec![vec![v; 17].join(","); 17].join("\n");
    std::fs::write(dir.path().join("f.csv"), format!("{header}{}\n", rows("1.0"))).unwrap();
    std::fs::write(dir.path().join("g.csv"), format!("{header}{}\n", rows("2.0"))).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_jf"))
        .arg("solve")
        .arg(format!("--f=csv:{}", dir.path().join("f.csv").display()))
        .arg(format!("--g=csv:{}", dir.path().join("g.csv").display()))
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr.contains("unequal total volume"), "{stderr}");
}

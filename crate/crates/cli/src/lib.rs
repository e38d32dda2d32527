//! Argument parsing, configuration layering and the `solve` / `convergence`
//! commands behind the `jf` binary.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use jf_core::gallery::{GalleryError, GalleryProblem};
use jf_core::io::{load_density_csv, write_json, write_outputs, IoError};
use jf_core::pipeline::{solve_pullback, solve_with_margin, Method, PipelineConfig, PipelineError};
use jf_core::report::SolveReport;
use jf_core::verify::{run_convergence, ConvergenceStudy, VerifyError};
use jf_core::ScalarField;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXIT_GATE_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "jf", version, about = "Solve (g∘φ)·det∇φ = f with control of supp(φ − id)")]
pub struct Cli {
    /// JSON file with defaults for any flag; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one pullback problem.
    Solve(SolveArgs),
    /// Residual convergence study on a gallery problem.
    Convergence(ConvergenceArgs),
}

#[derive(Debug, Default, Args)]
pub struct SolveArgs {
    /// `gallery:<name>:src|dst` or `csv:<path>`.
    #[arg(long)]
    pub f: Option<DensitySpec>,
    #[arg(long)]
    pub g: Option<DensitySpec>,
    /// Nodes per axis for gallery densities.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Keep φ = id on the band of half-width d/2 along the boundary.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub collar_width: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write PGM images of det∇φ and of the pullback residual.
    #[arg(long)]
    pub render: bool,
}

#[derive(Debug, Default, Args)]
pub struct ConvergenceArgs {
    #[arg(long)]
    pub problem: Option<GalleryProblem>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Time steps at the grid size given by `--grid`; scaled with the size.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Src,
    Dst,
}

/// Where a density comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DensitySpec {
    Gallery { problem: GalleryProblem, role: Role },
    Csv(PathBuf),
}

impl FromStr for DensitySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("csv:") {
            if path.is_empty() {
                return Err("malformed density spec `csv:`: missing path".into());
            }
            return Ok(DensitySpec::Csv(PathBuf::from(path)));
        }
        let malformed = || format!("malformed density spec `{s}` (expected gallery:<name>:src|dst or csv:<path>)");
        let rest = s.strip_prefix("gallery:").ok_or_else(malformed)?;
        let (name, role) = rest.rsplit_once(':').ok_or_else(malformed)?;
        let problem = name.parse::<GalleryProblem>().map_err(|e| e.to_string())?;
        let role = match role {
            "src" => Role::Src,
            "dst" => Role::Dst,
            _ => return Err(malformed()),
        };
        Ok(DensitySpec::Gallery { problem, role })
    }
}

impl fmt::Display for DensitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensitySpec::Gallery { problem, role } => {
                write!(f, "gallery:{problem}:{}", if *role == Role::Src { "src" } else { "dst" })
            }
            DensitySpec::Csv(p) => write!(f, "csv:{}", p.display()),
        }
    }
}

impl TryFrom<String> for DensitySpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DensitySpec> for String {
    fn from(d: DensitySpec) -> Self {
        d.to_string()
    }
}

/// Contents of a `--config` file; every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct ConfigFile {
    pub f: Option<DensitySpec>,
    pub g: Option<DensitySpec>,
    pub grid: Option<usize>,
    pub steps: Option<usize>,
    pub method: Option<Method>,
    pub margin: Option<f64>,
    pub collar_width: Option<f64>,
    pub out: Option<PathBuf>,
    pub render: Option<bool>,
    pub support_threshold: Option<f64>,
    pub div_tol: Option<f64>,
    pub inv_tol: Option<f64>,
    pub mass_tol: Option<f64>,
    pub problem: Option<GalleryProblem>,
    pub sizes: Option<Vec<usize>>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    fn pipeline(&self, grid: Option<usize>, steps: Option<usize>, method: Option<Method>) -> PipelineConfig {
        let d = PipelineConfig::default();
        PipelineConfig {
            method: method.or(self.method).unwrap_or(d.method),
            grid_n: grid.or(self.grid).unwrap_or(d.grid_n),
            steps: steps.or(self.steps).unwrap_or(d.steps),
            margin: None,
            collar_width: None,
            support_threshold: self.support_threshold.unwrap_or(d.support_threshold),
            div_tol: self.div_tol.unwrap_or(d.div_tol),
            inv_tol: self.inv_tol.unwrap_or(d.inv_tol),
            mass_tol: self.mass_tol.unwrap_or(d.mass_tol),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub f: DensitySpec,
    pub g: DensitySpec,
    pub pipeline: PipelineConfig,
    /// The margin parameter d; routes to the band-preserving solve.
    pub margin: Option<f64>,
    pub out: Option<PathBuf>,
    pub render: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub problem: GalleryProblem,
    pub sizes: Vec<usize>,
    pub pipeline: PipelineConfig,
    pub out: Option<PathBuf>,
}

/// Layers flags over the config file over defaults.
pub fn resolve_solve(args: SolveArgs, file: &ConfigFile) -> Result<RunConfig, CliError> {
    let mut pipeline = file.pipeline(args.grid, args.steps, args.method);
    pipeline.collar_width = args.collar_width.or(file.collar_width);
    let config = RunConfig {
        f: args.f.or_else(|| file.f.clone()).ok_or_else(|| CliError::Usage("missing --f".into()))?,
        g: args.g.or_else(|| file.g.clone()).ok_or_else(|| CliError::Usage("missing --g".into()))?,
        pipeline,
        margin: args.margin.or(file.margin),
        out: args.out.or_else(|| file.out.clone()),
        render: args.render || file.render.unwrap_or(false),
    };
    config.pipeline.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(d) = config.margin {
        if !(d > 0.0 && d.is_finite()) {
            return Err(CliError::Usage(format!("--margin {d} must be positive")));
        }
    }
    Ok(config)
}

pub const DEFAULT_SIZES: [usize; 3] = [33, 65, 129];

pub fn resolve_convergence(args: ConvergenceArgs, file: &ConfigFile) -> Result<ConvergenceConfig, CliError> {
    let pipeline = file.pipeline(args.grid, args.steps, args.method);
    let config = ConvergenceConfig {
        problem: args.problem.or(file.problem).ok_or_else(|| CliError::Usage("missing --problem".into()))?,
        sizes: args.sizes.or_else(|| file.sizes.clone()).unwrap_or_else(|| DEFAULT_SIZES.to_vec()),
        pipeline,
        out: args.out.or_else(|| file.out.clone()),
    };
    config.pipeline.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Gallery(#[from] GalleryError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_ERROR,
        }
    }
}

/// Reads `JF_THREADS` and sizes the global worker pool.
pub fn configure_threads(value: Option<&str>) -> Result<(), CliError> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("JF_THREADS must be an integer ≥ 1, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("JF_THREADS: {e}")))
}

fn load(spec: &DensitySpec, n: usize) -> Result<ScalarField, CliError> {
    Ok(match spec {
        DensitySpec::Gallery { problem, role } => {
            let (f, g) = problem.pair(n)?;
            if *role == Role::Src {
                f
            } else {
                g
            }
        }
        DensitySpec::Csv(path) => load_density_csv(path)?,
    })
}

pub struct SolveOutcome {
    pub report: SolveReport,
    pub written: Vec<PathBuf>,
}

pub fn run_solve(config: &RunConfig) -> Result<SolveOutcome, CliError> {
    let f = load(&config.f, config.pipeline.grid_n)?;
    let g = load(&config.g, config.pipeline.grid_n)?;
    let (phi, report) = match config.margin {
        Some(d) => solve_with_margin(&f, &g, d, &config.pipeline)?,
        None => solve_pullback(&f, &g, &config.pipeline)?,
    };
    let written = match &config.out {
        Some(dir) => write_outputs(dir, &report, &phi, &f, &g, config.render)?,
        None => Vec::new(),
    };
    Ok(SolveOutcome { report, written })
}

pub fn run_study(config: &ConvergenceConfig) -> Result<ConvergenceStudy, CliError> {
    let study = run_convergence(config.problem.name(), &config.sizes, &config.pipeline)?;
    if let Some(dir) = &config.out {
        std::fs::create_dir_all(dir).map_err(|source| IoError::Io { path: dir.clone(), source })?;
        write_json(&dir.join("convergence.json"), &study)?;
    }
    Ok(study)
}

pub fn summarize(report: &SolveReport) -> String {
    let mut out = format!(
        "{} on {:?}: residual {:.3e} (l2 {:.3e}), min det {:.4}, max |u| {:.3e}, outside Ω′ {}\n",
        report.method,
        report.shape,
        report.residual.max,
        report.residual.l2,
        report.min_jacobian,
        report.max_displacement,
        report.max_displacement_outside_omega_prime,
    );
    for g in &report.gates {
        out += &format!(
            "  {:<28} {:>11.4e}  limit {:.1e}  {}\n",
            g.name,
            g.value,
            g.limit,
            if g.passed { "ok" } else { "FAILED" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("jf").chain(args.iter().copied()))
    }

    fn solve_args(cli: Cli) -> SolveArgs {
        match cli.command {
            Command::Solve(a) => a,
            _ => panic!("not solve"),
        }
    }

    #[test]
    fn defaults_to_composed() {
        let cli = parse(&[
            "solve",
            "--f",
            "gallery:twin-bumps:src",
            "--g",
            "gallery:twin-bumps:dst",
            "--grid",
            "65",
            "--out",
            "run1",
        ])
        .unwrap();
        let run = resolve_solve(solve_args(cli), &ConfigFile::default()).unwrap();
        assert_eq!(run.pipeline.method, Method::Composed);
        assert_eq!(run.pipeline.grid_n, 65);
        assert_eq!(run.out, Some(PathBuf::from("run1")));
        assert_eq!(run.margin, None);
        assert!(!run.render);
    }

    #[test]
    fn small_grid_is_a_usage_error() {
        let cli =
            parse(&["solve", "--f", "gallery:twin-bumps:src", "--g", "gallery:twin-bumps:dst", "--grid", "8"]).unwrap();
        let e = resolve_solve(solve_args(cli), &ConfigFile::default()).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
        assert!(e.to_string().contains("minimum 17"), "{e}");
    }

    #[test]
    fn direct_with_margin() {
        let cli = parse(&[
            "solve",
            "--f",
            "gallery:twin-bumps:src",
            "--g",
            "gallery:twin-bumps:dst",
            "--method",
            "direct",
            "--margin",
            "0.3",
        ])
        .unwrap();
        let run = resolve_solve(solve_args(cli), &ConfigFile::default()).unwrap();
        assert_eq!(run.pipeline.method, Method::Direct);
        assert_eq!(run.margin, Some(0.3));
    }

    #[test]
    fn bad_input_is_rejected_by_the_parser() {
        assert!(parse(&["solve", "--bogus"]).is_err());
        assert!(parse(&["solve", "--f", "gallery:twin-bumps"]).is_err());
        assert!(parse(&["solve", "--f", "gallery:nope:src"]).is_err());
        assert!(parse(&["solve", "--f", "twin-bumps.csv"]).is_err());
        assert!(parse(&["solve", "--method", "moser"]).is_err());
        assert!(parse(&["convergence", "--sizes", "33,x"]).is_err());
    }

    #[test]
    fn density_specs_round_trip() {
        for s in ["gallery:ring-swap:src", "gallery:oned-profile:dst", "csv:data/f.csv"] {
            assert_eq!(s.parse::<DensitySpec>().unwrap().to_string(), s);
        }
        assert!("csv:".parse::<DensitySpec>().is_err());
    }

    #[test]
    fn convergence_defaults() {
        let cli = parse(&["convergence", "--problem", "twin-bumps"]).unwrap();
        let Command::Convergence(args) = cli.command else { panic!() };
        let c = resolve_convergence(args, &ConfigFile::default()).unwrap();
        assert_eq!(c.sizes, DEFAULT_SIZES);
        assert_eq!(c.problem, GalleryProblem::TwinBumps);
        let cli = parse(&["convergence", "--problem", "ring-swap", "--sizes", "33,65"]).unwrap();
        let Command::Convergence(args) = cli.command else { panic!() };
        assert_eq!(resolve_convergence(args, &ConfigFile::default()).unwrap().sizes, vec![33, 65]);
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        assert!(serde_json::from_str::<ConfigFile>(r#"{"grid": 33, "colour": 1}"#).is_err());
        let c: ConfigFile = serde_json::from_str(r#"{"f": "gallery:twin-bumps:src", "method": "direct"}"#).unwrap();
        assert_eq!(c.method, Some(Method::Direct));
    }

    #[test]
    fn threads_must_be_positive() {
        assert!(configure_threads(Some("0")).is_err());
        assert!(configure_threads(Some("many")).is_err());
        assert!(configure_threads(None).is_ok());
    }

    proptest! {
        #[test]
        fn flags_override_config_override_defaults(
            flag_grid in proptest::option::of(17usize..200),
            file_grid in proptest::option::of(17usize..200),
            flag_steps in proptest::option::of(4usize..100),
            file_steps in proptest::option::of(4usize..100),
            flag_method in proptest::option::of(prop_oneof![Just(Method::Composed), Just(Method::Direct)]),
            file_method in proptest::option::of(prop_oneof![Just(Method::Composed), Just(Method::Direct)]),
            flag_margin in proptest::option::of(0.05f64..0.5),
            file_margin in proptest::option::of(0.05f64..0.5),
            flag_render in any::<bool>(),
            file_render in proptest::option::of(any::<bool>()),
            file_div_tol in proptest::option::of(1e-6f64..1e-2),
            file_f in any::<bool>(),
        ) {
            let file = ConfigFile {
                f: file_f.then(|| "gallery:ring-swap:src".parse().unwrap()),
                g: Some("gallery:ring-swap:dst".parse().unwrap()),
                grid: file_grid,
                steps: file_steps,
                method: file_method,
                margin: file_margin,
                render: file_render,
                div_tol: file_div_tol,
                ..Default::default()
            };
            let mut argv = vec!["solve".to_string()];
            if !file_f {
                argv.extend(["--f".into(), "gallery:twin-bumps:src".into()]);
            }
            let mut push = |k: &str, v: Option<String>| if let Some(v) = v { argv.push(k.into()); argv.push(v); };
            push("--grid", flag_grid.map(|v| v.to_string()));
            push("--steps", flag_steps.map(|v| v.to_string()));
            push("--method", flag_method.map(|v| v.to_string()));
            push("--margin", flag_margin.map(|v| v.to_string()));
            if flag_render {
                argv.push("--render".into());
            }
            let cli = Cli::try_parse_from(std::iter::once("jf".to_string()).chain(argv)).unwrap();
            let run = resolve_solve(solve_args(cli), &file).unwrap();
            let d = PipelineConfig::default();
            prop_assert_eq!(run.pipeline.grid_n, flag_grid.or(file_grid).unwrap_or(d.grid_n));
            prop_assert_eq!(run.pipeline.steps, flag_steps.or(file_steps).unwrap_or(d.steps));
            prop_assert_eq!(run.pipeline.method, flag_method.or(file_method).unwrap_or(d.method));
            prop_assert_eq!(run.margin, flag_margin.or(file_margin));
            prop_assert_eq!(run.render, flag_render || file_render.unwrap_or(false));
            prop_assert_eq!(run.pipeline.div_tol, file_div_tol.unwrap_or(d.div_tol));
            let expect_f = if file_f { "gallery:ring-swap:src" } else { "gallery:twin-bumps:src" };
            prop_assert_eq!(run.f.to_string(), expect_f);
        }
    }
}

use std::process::ExitCode;

use clap::Parser;
use jf_cli::{
    configure_threads, resolve_convergence, resolve_solve, run_solve, run_study, summarize, Cli, CliError, Command,
    ConfigFile, EXIT_GATE_FAILED,
};

fn run(cli: Cli) -> Result<i32, CliError> {
    configure_threads(std::env::var("JF_THREADS").ok().as_deref())?;
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Solve(args) => {
            let config = resolve_solve(args, &file)?;
            let outcome = run_solve(&config)?;
            print!("{}", summarize(&outcome.report));
            for path in &outcome.written {
                println!("wrote {}", path.display());
            }
            let failed: Vec<_> = outcome.report.failed_gates().collect();
            if failed.is_empty() {
                return Ok(0);
            }
            for g in failed {
                eprintln!("error: gate `{}` failed: {:e} against limit {:e}", g.name, g.value, g.limit);
            }
            Ok(EXIT_GATE_FAILED)
        }
        Command::Convergence(args) => {
            let config = resolve_convergence(args, &file)?;
            let study = run_study(&config)?;
            for (n, r) in study.sizes.iter().zip(&study.reports) {
                println!("N = {n:4}  residual {:.4e}  passed {}", r.residual.max, r.passed());
            }
            let pairwise: Vec<String> = study.pairwise.iter().map(|p| p.to_string()).collect();
            println!("order {} (pairwise {})", study.order, pairwise.join(", "));
            let mut code = 0;
            for (n, r) in study.sizes.iter().zip(&study.reports) {
                for g in r.failed_gates() {
                    eprintln!("error: N = {n}: gate `{}` failed: {:e} against limit {:e}", g.name, g.value, g.limit);
                    code = EXIT_GATE_FAILED;
                }
            }
            Ok(code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Driver behind the `cmfuot` binary: `solve`, `sweep` and `trace`.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for solver or
//! runtime failures.

pub mod config;
pub mod output;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cmfuot_core::eval::{
    aggregate, extract_peaks, run_monte_carlo, simulate_covariance, solve_method, write_aggregate_csv,
    write_results_csv, write_timings_csv, Method,
};
use cmfuot_core::scene::Scene;
use cmfuot_core::signalsim::CovarianceMatrix;

pub use config::{Experiment, ExperimentConfig, Overrides};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn load_scene(exp: &Experiment) -> Result<Scene, CliError> {
    Scene::load(&exp.config.scene).map_err(|e| CliError::Config(format!("scene {}: {e}", exp.config.scene.display())))
}

fn covariance_for(exp: &Experiment, scene: &Scene) -> Result<CovarianceMatrix, CliError> {
    match &exp.config.covariance {
        Some(path) => {
            let c = CovarianceMatrix::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if c.dim() != scene.array.len() {
                return Err(CliError::Config(format!(
                    "covariance is {0}x{0} but the array has {1} sensors",
                    c.dim(),
                    scene.array.len()
                )));
            }
            Ok(c)
        }
        None => {
            simulate_covariance(scene, exp.config.snr_db.unwrap_or(f64::INFINITY), exp.config.seed).map_err(runtime)
        }
    }
}

/// Files written by one `solve` call.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub covariance: PathBuf,
    pub power_maps: Vec<(Method, PathBuf, f64)>,
}

/// One solve per method on one covariance. Writes `covariance.txt` and a
/// sparse `power_<method>.csv` per method, and prints a summary.
pub fn cmd_solve(exp: &Experiment, out: &mut dyn Write) -> Result<SolveReport, CliError> {
    let scene = load_scene(exp)?;
    let g = scene.transfer_matrix().map_err(runtime)?;
    let sigma = covariance_for(exp, &scene)?;
    let dir = &exp.config.output;
    let cov_path = dir.join("covariance.txt");
    let mut w = create(&cov_path)?;
    sigma.write_text(&mut w).map_err(runtime)?;
    w.flush().map_err(runtime)?;

    let settings = exp.settings();
    let mut report = SolveReport { covariance: cov_path, power_maps: Vec::new() };
    for &method in &exp.methods {
        let r = solve_method(method, &scene, &g, &sigma, &settings, exp.config.seed).map_err(runtime)?;
        let path = dir.join(format!("power_{}.csv", method.name()));
        let mut meta = exp.metadata("solve");
        meta.push(("method".into(), method.name().into()));
        meta.push(("objective".into(), r.objective.to_string()));
        meta.push(("iterations".into(), r.iterations.to_string()));
        let mut w = create(&path)?;
        output::write_power_map(&mut w, &meta, &scene.grid, &r.power)?;
        w.flush().map_err(runtime)?;

        let peaks = extract_peaks(&r.power, &scene.grid, scene.sources.len(), settings.merge_radius(&scene.grid))
            .map_err(runtime)?;
        let io = |e: std::io::Error| CliError::Runtime(e.to_string());
        writeln!(out, "method {}", method).map_err(io)?;
        writeln!(out, "  objective  {}", r.objective).map_err(io)?;
        writeln!(out, "  iterations {}", r.iterations).map_err(io)?;
        writeln!(out, "  seconds    {:.3}", r.seconds).map_err(io)?;
        writeln!(out, "  peaks      x y z power").map_err(io)?;
        for (p, pw) in peaks.positions.iter().zip(&peaks.powers) {
            writeln!(out, "    {:.4} {:.4} {:.4} {:.6e}", p.x, p.y, p.z, pw).map_err(io)?;
        }
        report.power_maps.push((method, path, r.objective));
    }
    Ok(report)
}

/// Monte-Carlo sweep. Writes `results.csv`, `aggregate.csv` and `timings.csv`.
pub fn cmd_sweep(exp: &Experiment, out: &mut dyn Write) -> Result<(), CliError> {
    let Some(spec) = &exp.config.sweep else {
        return Err(CliError::Config("sweep command needs a \"sweep\" section".into()));
    };
    let scene = load_scene(exp)?;
    let settings = exp.settings();
    let start = Instant::now();
    let results =
        run_monte_carlo(&scene, &exp.methods, spec, exp.config.runs, exp.config.seed, &settings).map_err(runtime)?;
    let seconds = start.elapsed().as_secs_f64();

    let mut meta = exp.metadata("sweep");
    meta.push(("runs".into(), exp.config.runs.to_string()));
    let dir = &exp.config.output;
    let mut w = create(&dir.join("results.csv"))?;
    write_results_csv(&mut w, &meta, &results).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    let rows = aggregate(&results);
    let mut w = create(&dir.join("aggregate.csv"))?;
    write_aggregate_csv(&mut w, &meta, &rows).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    let mut w = create(&dir.join("timings.csv"))?;
    write_timings_csv(&mut w, &results).map_err(runtime)?;
    w.flush().map_err(runtime)?;

    let io = |e: std::io::Error| CliError::Runtime(e.to_string());
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    writeln!(out, "{} records in {:.1} s ({} failed)", results.len(), seconds, failed).map_err(io)?;
    writeln!(out, "method    {:>10} {:>12} {:>12}", spec.variable.name(), "mse_mean", "mse_std").map_err(io)?;
    for r in &rows {
        writeln!(out, "{:<9} {:>10} {:>12.5} {:>12.5}", r.method.name(), r.value, r.mse_mean, r.mse_std).map_err(io)?;
    }
    Ok(())
}

/// Traced greedy solve, `cmf-uot` unless methods were given on the command
/// line. Writes `trace_<method>.csv`.
pub fn cmd_trace(exp: &Experiment, out: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let methods = if exp.methods_from_flags { exp.methods.clone() } else { vec![Method::CmfUot] };
    if methods.contains(&Method::CmfNnls) {
        return Err(CliError::Config("cmf-nnls has no iteration trace".into()));
    }
    let scene = load_scene(exp)?;
    let g = scene.transfer_matrix().map_err(runtime)?;
    let sigma = covariance_for(exp, &scene)?;
    let mut settings = exp.settings();
    settings.cd.trace = true;
    settings.fusion.trace = true;
    let mut paths = Vec::new();
    for method in methods {
        let r = solve_method(method, &scene, &g, &sigma, &settings, exp.config.seed).map_err(runtime)?;
        let trace = r.trace.unwrap_or_default();
        let path = exp.config.output.join(format!("trace_{}.csv", method.name()));
        let mut meta = exp.metadata("trace");
        meta.push(("method".into(), method.name().into()));
        let mut w = create(&path)?;
        for (k, v) in &meta {
            writeln!(w, "# {k}={v}").map_err(runtime)?;
        }
        trace.write_csv(&mut w).map_err(runtime)?;
        w.flush().map_err(runtime)?;
        writeln!(
            out,
            "method {} grid {} updates {} seconds {:.3} objective {}",
            method,
            scene.grid.len(),
            r.iterations,
            r.seconds,
            r.objective
        )
        .map_err(runtime)?;
        paths.push(path);
    }
    Ok(paths)
}

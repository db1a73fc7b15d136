//! Subcommand bodies. Each returns the JSON printed to stdout, a compact
//! summary for the ledger, and a status that selects the exit code.

use std::path::Path;

use moncap::capacity::{audit, compute_capacity_with_bounds, sweep_s};
use moncap::flux::{check_conditions_on, shipped_family, FluxKindName};
use moncap::io::{atomic_write, field_csv, field_pgm, write_json};
use moncap::oracle::{radial_numeric, radial_p_capacity, strip_capacity, RadialSpec};
use moncap::properties::{
    run_bounds_suite, run_comparison_suite, run_convergence_study, run_invariance_suite, run_order_suite,
    run_s_suite, run_subadditivity_suite, s_grid, s_suite_family, ConvergenceCheck, Geometry, SuiteReport,
};
use moncap::{solve_dirichlet, Error, Flux, FluxSpec, Mesh};
use serde_json::{json, Value};

use crate::config::{CheckConfig, ConfigError, ExperimentConfig, OracleConfig, SuiteConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A suite, study or flux check reported a failed property.
    Failed,
    /// A solve did not reach its residual tolerance.
    Diverged,
}

pub struct Outcome {
    pub output: Value,
    pub summary: Value,
    pub status: Status,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Diverged(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::MeshMismatch | Error::Incompatible(_) => CliError::Config(e.to_string()),
            Error::Diverged { .. } => CliError::Diverged(e.to_string()),
            Error::Io(_) | Error::Json(_) => CliError::Runtime(e.to_string()),
        }
    }
}

pub const SUITE_NAMES: [&str; 6] = ["order", "subadditivity", "bounds", "s-laws", "invariance", "comparison"];

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn capacity(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let mesh = cfg.mesh()?;
    let (e, f) = cfg.sets(&mesh)?;
    let flux = cfg.flux.build()?;
    let (report, pot) = compute_capacity_with_bounds(&mesh, &flux, &e, &f, cfg.s, &cfg.solver)?;
    let mut output = to_value(&report)?;
    if let Some(pot) = &pot {
        output["distribution_audit"] = to_value(&audit(&mesh, &flux, &e, &f, pot, &report))?;
    }
    write_json(&out.join("capacity.json"), &output)?;
    let summary = json!({
        "capacity": output["capacity"],
        "c_energy": output["c_energy"],
        "c_inner": output["c_inner"],
        "c_outer": output["c_outer"],
        "converged": report.converged,
        "iterations": report.iterations,
    });
    let status = if report.converged { Status::Ok } else { Status::Diverged };
    Ok(Outcome { output, summary, status })
}

pub fn potential(cfg: &ExperimentConfig, out: &Path, csv: bool, pgm: bool) -> Result<Outcome, CliError> {
    let mesh = cfg.mesh()?;
    let (e, f) = cfg.sets(&mesh)?;
    let flux = cfg.flux.build()?;
    let (field, status) = match solve_dirichlet(&mesh, &flux, &e, &f, cfg.s, &cfg.solver) {
        Ok(field) => (field, Status::Ok),
        Err(Error::Diverged { best, .. }) => (*best, Status::Diverged),
        Err(e) => return Err(e.into()),
    };
    write_json(&out.join("potential.json"), &field)?;
    let mut files = vec!["potential.json"];
    if csv {
        atomic_write(&out.join("potential.csv"), field_csv(&mesh, &field.u).as_bytes())?;
        files.push("potential.csv");
    }
    if pgm {
        let (lo, hi) = (cfg.s.min(0.0), cfg.s.max(0.0));
        atomic_write(&out.join("potential.pgm"), &field_pgm(&mesh, &field.u, lo, hi))?;
        files.push("potential.pgm");
    }
    let (min, max) = field.u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let summary = json!({
        "converged": field.converged,
        "iterations": field.iterations,
        "residual_max": field.residual_max,
        "tol_res": field.tol_res,
        "min": min,
        "max": max,
    });
    let mut output = summary.clone();
    output["files"] = json!(files);
    Ok(Outcome { output, summary, status })
}

pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let mesh = cfg.mesh()?;
    let (e, f) = cfg.sets(&mesh)?;
    let flux = cfg.flux.build()?;
    let grid = cfg.sweep.as_ref().map(|s| s.s_grid.clone()).unwrap_or_else(|| s_grid(-4.0, 4.0, 17));
    let points = sweep_s(&mesh, &flux, &e, &f, &grid, &cfg.solver)?;
    let mut csv = String::from("s,c_hat,capacity,converged\n");
    for p in &points {
        let cap = p.report.as_ref().map(|r| r.capacity).unwrap_or(f64::NAN);
        let c_hat = p.c_hat.unwrap_or(f64::NAN);
        csv.push_str(&format!("{},{},{},{}\n", p.s, c_hat, cap, !p.failed));
    }
    atomic_write(&out.join("sweep_s.csv"), csv.as_bytes())?;
    let output = to_value(&points)?;
    write_json(&out.join("sweep_s.json"), &output)?;
    let failed = points.iter().filter(|p| p.failed).count();
    let summary = json!({
        "points": points.len(),
        "failed": failed,
        "c_hat": points.iter().map(|p| p.c_hat).collect::<Vec<_>>(),
    });
    let status = if failed == 0 { Status::Ok } else { Status::Diverged };
    Ok(Outcome { output, summary, status })
}

fn build_fluxes(specs: &[FluxSpec]) -> Result<Vec<Flux>, CliError> {
    specs.iter().map(|s| s.build().map_err(CliError::from)).collect()
}

pub fn run_named_suite(cfg: &ExperimentConfig, name: &str) -> Result<SuiteReport, CliError> {
    let mesh = cfg.mesh()?;
    let sc = cfg.suite.clone().unwrap_or_default();
    let SuiteConfig { instances, refine_n, fluxes, s_grid: grid } = sc;
    let family = |default: Vec<Flux>| -> Result<Vec<Flux>, CliError> {
        match &fluxes {
            Some(specs) => build_fluxes(specs),
            None => Ok(default),
        }
    };
    let opts = &cfg.solver;
    let report = match name {
        "order" => run_order_suite(&mesh, &family(shipped_family())?, instances, cfg.seed, opts),
        "subadditivity" => {
            let fine = refine_n.map(|n| Mesh::build(n, cfg.mesh.l)).transpose()?;
            run_subadditivity_suite(&mesh, &family(shipped_family())?, instances, cfg.seed, opts, fine.as_ref())
        }
        "bounds" => run_bounds_suite(&mesh, &family(shipped_family())?, instances, cfg.seed, opts),
        "s-laws" => {
            let grid = grid.unwrap_or_else(|| s_grid(-4.0, 4.0, 17));
            run_s_suite(&mesh, &family(s_suite_family())?, &grid, instances, cfg.seed, opts)?
        }
        "invariance" => run_invariance_suite(&mesh, instances, cfg.seed, opts),
        "comparison" => run_comparison_suite(&mesh, instances, cfg.seed, opts),
        other => {
            return Err(CliError::Config(format!("unknown suite `{other}`; expected one of {}", SUITE_NAMES.join(", "))))
        }
    };
    Ok(report)
}

pub fn suite(cfg: &ExperimentConfig, name: &str, out: &Path) -> Result<Outcome, CliError> {
    let report = run_named_suite(cfg, name)?;
    let mut text = report.to_json()?;
    text.push('\n');
    atomic_write(&out.join(format!("suite_{name}.json")), text.as_bytes())?;
    let summary = suite_summary(&report);
    let output = to_value(&report)?;
    let status = if report.passed { Status::Ok } else { Status::Failed };
    Ok(Outcome { output, summary, status })
}

fn suite_summary(report: &SuiteReport) -> Value {
    json!({
        "suite": report.suite,
        "passed": report.passed,
        "instances": report.instances,
        "violations": report.violations,
        "skipped": report.skipped,
        "worst_margin": report.worst_margin,
        "trend_violations": report.trend_violations,
    })
}

fn oracle_value(cfg: &ExperimentConfig, flux: &Flux, oracle: &OracleConfig) -> Result<f64, CliError> {
    Ok(match oracle {
        OracleConfig::Radial { r, big_r, panels } => {
            let spec = RadialSpec::new(2, flux.p(), *r, *big_r)?;
            if cfg.flux.kind == FluxKindName::PLaplacian {
                radial_p_capacity(&spec)?
            } else {
                radial_numeric(&spec, flux, *panels)?
            }
        }
        OracleConfig::Strip { a, b } => strip_capacity(flux.p(), *a, *b, cfg.mesh.l)?,
        OracleConfig::Value(v) => *v,
    })
}

pub fn converge(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let block = cfg.converge.as_ref().ok_or_else(|| CliError::Config("config needs a `converge` block".into()))?;
    let flux = cfg.flux.build()?;
    let (e, f) = match (&cfg.e, &cfg.f) {
        (Some(e), Some(f)) => (e.clone(), f.clone()),
        _ => return Err(CliError::Config("config needs shapes for `E` and `F`".into())),
    };
    let geometry = Geometry { e, f, l: cfg.mesh.l };
    let value = oracle_value(cfg, &flux, &block.oracle)?;
    let check = ConvergenceCheck {
        tolerance: block.tolerance,
        every_n: block.every_n,
        allowed_increases: block.allowed_increases,
    };
    let report = run_convergence_study(&geometry, &flux, &block.n_list, value, &check, &cfg.solver)?;
    write_json(&out.join("converge.json"), &report)?;
    let mut summary = suite_summary(&report);
    summary["oracle"] = json!(value);
    let output = to_value(&report)?;
    let status = if report.passed { Status::Ok } else { Status::Failed };
    Ok(Outcome { output, summary, status })
}

pub fn check_flux(cfg: &ExperimentConfig, shipped: bool, out: &Path) -> Result<Outcome, CliError> {
    let CheckConfig { samples, xi_radius } = cfg.check.clone().unwrap_or_default();
    let fluxes = if shipped { shipped_family() } else { vec![cfg.flux.build()?] };
    let reports: Vec<_> =
        fluxes.iter().map(|f| check_conditions_on(f, samples, xi_radius, cfg.seed, cfg.mesh.l)).collect();
    let all_passed = reports.iter().all(|r| r.all_passed);
    let output = json!({ "all_passed": all_passed, "reports": reports });
    write_json(&out.join("check_flux.json"), &output)?;
    let summary = json!({
        "all_passed": all_passed,
        "failed": reports.iter().filter(|r| !r.all_passed).map(|r| &r.flux).collect::<Vec<_>>(),
    });
    let status = if all_passed { Status::Ok } else { Status::Failed };
    Ok(Outcome { output, summary, status })
}

pub fn oracle_radial(dim: u32, p: f64, r: f64, big_r: f64, flux: Option<&str>, panels: usize) -> Result<Outcome, CliError> {
    let spec = RadialSpec::new(dim, p, r, big_r)?;
    let output = match flux {
        None => json!({ "oracle": "radial", "n": dim, "p": p, "r": r, "R": big_r, "capacity": radial_p_capacity(&spec)? }),
        Some(text) => {
            let fs: FluxSpec = serde_json::from_str(text).map_err(|e| CliError::Config(format!("--flux: {e}")))?;
            let flux = fs.build()?;
            if flux.p() != p {
                return Err(CliError::Config(format!("--flux has p = {} but --p is {p}", flux.p())));
            }
            let value = radial_numeric(&spec, &flux, panels)?;
            json!({ "oracle": "radial_numeric", "n": dim, "p": p, "r": r, "R": big_r, "flux": flux.label(), "panels": panels, "capacity": value })
        }
    };
    Ok(Outcome { summary: output.clone(), output, status: Status::Ok })
}

pub fn oracle_strip(p: f64, a: f64, b: f64, ly: f64) -> Result<Outcome, CliError> {
    let value = strip_capacity(p, a, b, ly)?;
    let output = json!({ "oracle": "strip", "p": p, "a": a, "b": b, "Ly": ly, "capacity": value });
    Ok(Outcome { summary: output.clone(), output, status: Status::Ok })
}

//! Damped, regularized Newton for the discrete Dirichlet problem
//!
//! ```text
//! u = s on E,   u = 0 off F,   r_i(u) = 0 for i in F \ E.
//! ```
//!
//! The residual always uses the true flux. The Newton matrix uses the
//! `eps`-regularized flux Jacobian plus `eps` times the P1 Laplacian, and
//! `eps` walks along a decreasing schedule: a full Newton step moves one
//! notch down, a failed line search moves one notch up. Convergence is
//! declared on the max-norm of the free-node residual.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{residual, residual_parallel, FreeSystem};
use crate::error::{Error, Result};
use crate::flux::{Flux, FluxKind};
use crate::linalg::{gmres, BandedLu, Ilu0};
use crate::mesh::{validate_pair, Mesh, MeshId, NodeSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zero,
    /// Solution of the `p = 2` problem with the same boundary data.
    LinearBlend,
    Given(Vec<f64>),
    /// Uniform values between `0` and `s` at the free nodes.
    Random(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Max-norm residual target; `None` means `1e-10 max(1, |s|^(p-1))`.
    pub tol_res: Option<f64>,
    pub max_newton: usize,
    pub eps_schedule: Vec<f64>,
    pub ls_factor: f64,
    pub ls_sufficient: f64,
    pub ls_min_step: f64,
    pub inner_tol: f64,
    pub init: Init,
    pub picard_fallback: bool,
    pub parallel_assembly: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_res: None,
            max_newton: 200,
            eps_schedule: (2..=10).map(|k| 10f64.powi(-k)).collect(),
            ls_factor: 0.5,
            ls_sufficient: 1e-4,
            ls_min_step: 1e-8,
            inner_tol: 1e-10,
            init: Init::LinearBlend,
            picard_fallback: true,
            parallel_assembly: false,
        }
    }
}

impl SolverOptions {
    pub fn tolerance(&self, p: f64, s: f64) -> f64 {
        self.tol_res.unwrap_or_else(|| 1e-10 * s.abs().powf(p - 1.0).max(1.0))
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tol_res {
            if !(t > 0.0) {
                return Err(Error::invalid("tol_res must be positive"));
            }
        }
        if self.eps_schedule.is_empty()
            || self.eps_schedule.iter().any(|e| !(*e > 0.0))
            || self.eps_schedule.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::invalid("eps_schedule must be positive and strictly decreasing"));
        }
        if !(self.ls_factor > 0.0 && self.ls_factor < 1.0) {
            return Err(Error::invalid("ls_factor must lie in (0, 1)"));
        }
        if !(self.inner_tol > 0.0 && self.inner_tol < 1.0) {
            return Err(Error::invalid("inner_tol must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Solved potential with diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialField {
    pub u: Vec<f64>,
    pub s: f64,
    pub e: String,
    pub f: String,
    pub mesh: MeshId,
    pub residual_max: f64,
    pub tol_res: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Free-node residual max-norm after each accepted step.
    pub history: Vec<f64>,
}

struct Problem<'a> {
    mesh: &'a Mesh,
    flux: &'a Flux,
    sys: FreeSystem,
    parallel: bool,
}

impl Problem<'_> {
    fn residual(&self, u: &[f64]) -> Vec<f64> {
        if self.parallel {
            residual_parallel(self.mesh, self.flux, u)
        } else {
            residual(self.mesh, self.flux, u)
        }
    }

    fn free_residual(&self, u: &[f64]) -> Vec<f64> {
        let r = self.residual(u);
        self.sys.free_nodes().iter().map(|&k| r[k]).collect()
    }

    fn newton_direction(&self, u: &[f64], rf: &[f64], eps: f64, shift: f64, inner_tol: f64) -> Vec<f64> {
        let mat = self.sys.jacobian(self.mesh, self.flux, u, eps, shift);
        let ilu = Ilu0::new(&mat);
        let rhs: Vec<f64> = rf.iter().map(|v| -v).collect();
        let mut d = vec![0.0; rhs.len()];
        let stats = gmres(&mat, &rhs, &mut d, Some(&ilu), inner_tol, 60, 600);
        if !stats.converged {
            // nearly singular Jacobian: fall back to a direct banded solve
            if let Some(lu) = BandedLu::new(&mat) {
                d.copy_from_slice(&rhs);
                lu.solve(&mut d);
            }
        }
        d
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

fn is_better(candidate: f64, target: f64) -> bool {
    candidate.is_finite() && candidate <= target
}

/// Solves for the potential of `E` in `F` at level `s`.
pub fn solve_dirichlet(
    mesh: &Mesh,
    flux: &Flux,
    e: &NodeSet,
    f: &NodeSet,
    s: f64,
    opts: &SolverOptions,
) -> Result<PotentialField> {
    opts.validate()?;
    if !s.is_finite() {
        return Err(Error::invalid("boundary level s must be finite"));
    }
    let pair = validate_pair(e, f, mesh)?;
    let tol = opts.tolerance(flux.p(), s);
    let n = mesh.num_nodes();
    let free_mask: Vec<bool> = (0..n).map(|k| f.contains(k) && !e.contains(k)).collect();
    let mut u: Vec<f64> = (0..n).map(|k| if e.contains(k) { s } else { 0.0 }).collect();

    let mut field = PotentialField {
        u: Vec::new(),
        s,
        e: e.name().to_string(),
        f: f.name().to_string(),
        mesh: mesh.id(),
        residual_max: 0.0,
        tol_res: tol,
        iterations: 0,
        converged: true,
        history: Vec::new(),
    };
    if s == 0.0 || e.is_empty() {
        // the zero field is a potential
        field.u = vec![0.0; n];
        return Ok(field);
    }
    if pair.free_nodes == 0 {
        field.u = u;
        return Ok(field);
    }

    let problem = Problem { mesh, flux, sys: FreeSystem::new(mesh, &free_mask), parallel: opts.parallel_assembly };
    initialize(&problem, &mut u, s, &opts.init)?;

    let mut history = Vec::new();
    let (mut iterations, mut rmax) = newton(&problem, &mut u, tol, opts, opts.max_newton, &mut history);
    // alternate Picard and Newton while the pair keeps making progress
    let mut rounds = 0;
    while !(rmax <= tol) && opts.picard_fallback && rounds < 4 {
        rounds += 1;
        let before = rmax;
        let budget = opts.max_newton.saturating_sub(iterations);
        picard(&problem, &mut u, tol, budget.min(100), &mut history);
        let left = opts.max_newton.saturating_sub(iterations).max(20);
        let (more, r) = newton(&problem, &mut u, tol, opts, left, &mut history);
        iterations += more;
        rmax = r;
        if !(rmax < 0.5 * before) {
            break;
        }
    }
    field.u = u;
    field.residual_max = rmax;
    field.iterations = iterations;
    field.history = history;
    field.converged = rmax <= tol;
    if field.converged {
        Ok(field)
    } else {
        Err(Error::Diverged {
            iterations,
            best_residual: rmax,
            history: field.history.clone(),
            best: Box::new(field),
        })
    }
}

fn initialize(problem: &Problem, u: &mut [f64], s: f64, init: &Init) -> Result<()> {
    let free = problem.sys.free_nodes();
    match init {
        Init::Zero => {}
        Init::LinearBlend => {
            let lap = Flux::p_laplacian(2.0).expect("p = 2 is valid");
            let blend = Problem { mesh: problem.mesh, flux: &lap, sys: problem.sys.clone(), parallel: problem.parallel };
            let rf = blend.free_residual(u);
            let d = blend.newton_direction(u, &rf, 0.0, 0.0, 1e-12);
            for (i, &k) in free.iter().enumerate() {
                u[k] += d[i];
            }
        }
        Init::Given(v) => {
            if v.len() != u.len() {
                return Err(Error::invalid("initial field does not match mesh"));
            }
            for &k in free {
                u[k] = v[k];
            }
        }
        Init::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let (lo, hi) = if s >= 0.0 { (0.0, s) } else { (s, 0.0) };
            for &k in free {
                u[k] = lo + (hi - lo) * rng.gen::<f64>();
            }
        }
    }
    Ok(())
}

/// Returns (iterations, final residual max-norm); `u` holds the best iterate.
fn newton(
    problem: &Problem,
    u: &mut [f64],
    tol: f64,
    opts: &SolverOptions,
    budget: usize,
    history: &mut Vec<f64>,
) -> (usize, f64) {
    let schedule = &opts.eps_schedule;
    let last = schedule.len() - 1;
    let mut level = 0usize;
    let mut rf = problem.free_residual(u);
    let mut rmax = max_abs(&rf);
    let mut iterations = 0;
    let mut failures_at_top = 0;
    let mut trial = u.to_vec();
    // non-monotone acceptance against the recent maximum; the best iterate is kept
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(NONMONOTONE_WINDOW);
    let mut best = (rmax, u.to_vec());
    while !(rmax <= tol) && iterations < budget {
        iterations += 1;
        let eps = schedule[level];
        let d = problem.newton_direction(u, &rf, eps, eps, opts.inner_tol);
        let reference = recent.iter().cloned().fold(rmax, f64::max);
        match line_search(problem, u, &d, reference, opts, &mut trial) {
            Some((t, rt, mt)) => {
                u.copy_from_slice(&trial);
                if recent.len() == NONMONOTONE_WINDOW {
                    recent.pop_front();
                }
                recent.push_back(rmax);
                rf = rt;
                rmax = mt;
                history.push(rmax);
                failures_at_top = 0;
                if is_better(rmax, best.0) {
                    best.0 = rmax;
                    best.1.copy_from_slice(u);
                }
                if t == 1.0 && level < last {
                    level += 1;
                }
            }
            None => {
                if level > 0 {
                    level -= 1;
                } else {
                    failures_at_top += 1;
                    if failures_at_top >= 2 {
                        break;
                    }
                }
            }
        }
    }
    if !(rmax <= best.0) {
        u.copy_from_slice(&best.1);
        rmax = best.0;
    }
    (iterations, rmax)
}

const NONMONOTONE_WINDOW: usize = 5;

/// Backtracking on the max-norm residual; leaves the accepted iterate in `trial`.
fn line_search(
    problem: &Problem,
    u: &[f64],
    d: &[f64],
    rmax: f64,
    opts: &SolverOptions,
    trial: &mut [f64],
) -> Option<(f64, Vec<f64>, f64)> {
    let free = problem.sys.free_nodes();
    let mut t = 1.0;
    while t >= opts.ls_min_step {
        for (i, &k) in free.iter().enumerate() {
            trial[k] = u[k] + t * d[i];
        }
        let rt = problem.free_residual(trial);
        let mt = max_abs(&rt);
        if is_better(mt, (1.0 - opts.ls_sufficient * t) * rmax) {
            return Some((t, rt, mt));
        }
        t *= opts.ls_factor;
    }
    None
}

/// Secant-coefficient (Kacanov) sweeps: freeze `c_T = a(Du).Du / |Du|^2`
/// per triangle, solve the weighted Laplace problem, and move toward it
/// with a damped step.
fn picard(problem: &Problem, u: &mut [f64], tol: f64, sweeps: usize, history: &mut Vec<f64>) {
    let mesh = problem.mesh;
    let free = problem.sys.free_nodes();
    let mut rmax = max_abs(&problem.free_residual(u));
    let mut trial = u.to_vec();
    for _ in 0..sweeps {
        if rmax <= tol {
            break;
        }
        let coeff: Vec<f64> = (0..mesh.num_triangles())
            .map(|t| {
                let g = mesh.grad_on(t, u);
                let a = problem.flux.eval(mesh.barycenter(t), g);
                let floor = 1e-12;
                (a.dot(&g) / g.norm_squared().max(floor * floor)).max(floor)
            })
            .collect();
        let weighted = SecantFlux { coeff: &coeff };
        let mat = weighted.matrix(problem);
        let ilu = Ilu0::new(&mat);
        // weighted residual of the current iterate
        let rw = weighted.residual(mesh, u);
        let rhs: Vec<f64> = free.iter().map(|&k| -rw[k]).collect();
        let mut d = vec![0.0; rhs.len()];
        gmres(&mat, &rhs, &mut d, Some(&ilu), 1e-10, 60, 600);
        let mut t = 1.0;
        let mut moved = false;
        while t >= 1e-4 {
            for (i, &k) in free.iter().enumerate() {
                trial[k] = u[k] + t * d[i];
            }
            let m = max_abs(&problem.free_residual(&trial));
            if is_better(m, rmax) {
                u.copy_from_slice(&trial);
                rmax = m;
                history.push(m);
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
}

struct SecantFlux<'a> {
    coeff: &'a [f64],
}

impl SecantFlux<'_> {
    fn matrix(&self, problem: &Problem) -> crate::linalg::CsrMatrix {
        // per-triangle scalar weight: assemble by scaling the p = 2 element matrices
        let mesh = problem.mesh;
        let lap = Flux::p_laplacian(2.0).expect("p = 2 is valid");
        let mut mat = problem.sys.jacobian(mesh, &lap, &vec![0.0; mesh.num_nodes()], 0.0, 0.0);
        mat.clear();
        let area = mesh.triangle_area();
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let g = mesh.gradients(t);
            for a in 0..3 {
                let Some(ra) = problem.sys.local_index(tri[a]) else { continue };
                for b in 0..3 {
                    let Some(cb) = problem.sys.local_index(tri[b]) else { continue };
                    let slot = mat.position(ra, cb).expect("pattern covers element couplings");
                    mat.values_mut()[slot] += area * self.coeff[t] * g[a].dot(&g[b]);
                }
            }
        }
        mat
    }

    fn residual(&self, mesh: &Mesh, u: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; mesh.num_nodes()];
        let area = mesh.triangle_area();
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let g = mesh.gradients(t);
            let du = mesh.grad_on(t, u) * (self.coeff[t] * area);
            for a in 0..3 {
                r[tri[a]] += du.dot(&g[a]);
            }
        }
        r
    }
}

/// True for fluxes whose potential is unique (strictly monotone).
pub fn strictly_monotone(flux: &Flux) -> bool {
    match flux.kind() {
        FluxKind::FlatCoreP { rho0 } => *rho0 == 0.0,
        FluxKind::STransformed { inner, .. } => strictly_monotone(inner),
        FluxKind::WeightedSum(parts) => parts.iter().any(|(f, w)| *w > 0.0 && strictly_monotone(f)),
        FluxKind::AdversarialNegation => false,
        _ => true,
    }
}

//! Randomized property suites.
//!
//! Each suite draws seeded geometries, solves the capacity problems it needs
//! and turns one inequality into a signed margin per record. A record is a
//! violation when `margin / scale < -tolerance`. Every converged solve is
//! also audited: formula agreement, support and sign of the distributions,
//! and the sandwich bounds against the same-grid p-capacity.
//!
//! Instances run on the rayon pool and are assembled in index order, so a
//! report depends only on its inputs.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::capacity::{audit as audit_distributions, check_bounds, compute_capacity, CapacityReport};
use crate::error::{Error, Result};
use crate::flux::{s_transform, Flux, FluxKind};
use crate::io::{canonical_json, config_hash};
use crate::mesh::{rasterize, Axis, Mesh, NodeSet, ShapeExpr, Side};
use crate::solver::{Init, PotentialField, SolverOptions};

/// Soft lower bound on normalized distribution weights.
pub const SIGN_TOL: f64 = 1e-8;
/// Slack on the sandwich bounds, relative to `1 + C_p`.
pub const BOUND_SLACK: f64 = 1e-9;
/// Fraction of skipped instances a suite tolerates.
pub const MAX_SKIP_FRACTION: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub check: String,
    pub flux: String,
    pub config_hash: String,
    pub values: BTreeMap<String, f64>,
    pub margin: f64,
    pub scale: f64,
    pub tolerance: f64,
    /// Informational records carry a margin but never count as violations.
    pub checked: bool,
    pub skipped: bool,
    pub violated: bool,
}

impl InstanceRecord {
    pub fn normalized_margin(&self) -> f64 {
        self.margin / self.scale
    }
}

/// Refinement or ordering step between two values of a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRecord {
    pub label: String,
    pub from: f64,
    pub to: f64,
    pub before: f64,
    pub after: f64,
    pub slack: f64,
    pub ok: bool,
}

/// Structural checks accumulated over every converged solve of a suite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub solves: usize,
    pub converged: usize,
    pub diverged: usize,
    pub incompatible: usize,
    pub formula_checks: usize,
    pub formula_violations: usize,
    /// Largest `formula_gap / tol_cap`.
    pub worst_formula_ratio: f64,
    pub support_checks: usize,
    pub support_violations: usize,
    /// Largest interior-`E` residual over `tol_res`.
    pub worst_interior_ratio: f64,
    pub sign_checks: usize,
    pub sign_violations: usize,
    pub worst_sign_margin: Option<f64>,
    pub bound_checks: usize,
    pub bound_violations: usize,
    /// Smallest bound margin over `1 + C_p`.
    pub worst_bound_margin: Option<f64>,
    pub tight_checks: usize,
    /// Largest `|C_A - C_p| / (1 + C_p)` for p-Laplacian solves at `s = 1`.
    pub worst_tight_gap: f64,
}

fn min_opt(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.min(b)))
}

impl Audit {
    pub fn merge(&mut self, o: &Audit) {
        self.solves += o.solves;
        self.converged += o.converged;
        self.diverged += o.diverged;
        self.incompatible += o.incompatible;
        self.formula_checks += o.formula_checks;
        self.formula_violations += o.formula_violations;
        self.worst_formula_ratio = self.worst_formula_ratio.max(o.worst_formula_ratio);
        self.support_checks += o.support_checks;
        self.support_violations += o.support_violations;
        self.worst_interior_ratio = self.worst_interior_ratio.max(o.worst_interior_ratio);
        self.sign_checks += o.sign_checks;
        self.sign_violations += o.sign_violations;
        if let Some(v) = o.worst_sign_margin {
            self.worst_sign_margin = min_opt(self.worst_sign_margin, v);
        }
        self.bound_checks += o.bound_checks;
        self.bound_violations += o.bound_violations;
        if let Some(v) = o.worst_bound_margin {
            self.worst_bound_margin = min_opt(self.worst_bound_margin, v);
        }
        self.tight_checks += o.tight_checks;
        self.worst_tight_gap = self.worst_tight_gap.max(o.worst_tight_gap);
    }

    pub fn structural_ok(&self) -> bool {
        self.formula_violations == 0 && self.support_violations == 0 && self.bound_violations == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub mesh_n: usize,
    pub instances: usize,
    pub violations: usize,
    pub skipped: usize,
    pub worst_margin: f64,
    pub tolerance: f64,
    pub trend_violations: usize,
    pub passed: bool,
    pub records: Vec<InstanceRecord>,
    pub trend: Vec<TrendRecord>,
    pub audit: Audit,
}

impl SuiteReport {
    fn assemble(
        suite: &str,
        seed: u64,
        mesh_n: usize,
        tolerance: f64,
        records: Vec<InstanceRecord>,
        trend: Vec<TrendRecord>,
        allowed_trend_failures: usize,
        audit: Audit,
    ) -> Self {
        let checked: Vec<&InstanceRecord> = records.iter().filter(|r| r.checked && !r.skipped).collect();
        let violations = checked.iter().filter(|r| r.violated).count();
        let worst_margin = checked.iter().map(|r| r.normalized_margin()).fold(f64::INFINITY, f64::min);
        let skipped = records.iter().filter(|r| r.skipped).count();
        let trend_violations = trend.iter().filter(|t| !t.ok).count();
        let skip_ok = skipped as f64 <= MAX_SKIP_FRACTION * records.len() as f64;
        SuiteReport {
            suite: suite.to_string(),
            seed,
            mesh_n,
            instances: records.len(),
            violations,
            skipped,
            worst_margin: if worst_margin.is_finite() { worst_margin } else { 0.0 },
            tolerance,
            trend_violations,
            passed: violations == 0 && skip_ok && trend_violations <= allowed_trend_failures,
            records,
            trend,
            audit,
        }
    }

    /// One line: suite name, verdict and the headline numbers.
    pub fn summary_line(&self) -> String {
        format!(
            "{} {}: instances={} violations={} skipped={} worst_margin={:.3e} tol={:.1e} trend_violations={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.instances,
            self.violations,
            self.skipped,
            self.worst_margin,
            self.tolerance,
            self.trend_violations
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn record(
    index: usize,
    check: &str,
    flux: &Flux,
    hash: &str,
    values: &[(&str, f64)],
    margin: f64,
    scale: f64,
    tolerance: f64,
) -> InstanceRecord {
    let violated = !(margin / scale >= -tolerance);
    InstanceRecord {
        index,
        check: check.to_string(),
        flux: flux.label(),
        config_hash: hash.to_string(),
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        margin,
        scale,
        tolerance,
        checked: true,
        skipped: false,
        violated,
    }
}

fn skipped_record(index: usize, check: &str, flux: &Flux, hash: &str, tolerance: f64) -> InstanceRecord {
    InstanceRecord {
        index,
        check: check.to_string(),
        flux: flux.label(),
        config_hash: hash.to_string(),
        values: BTreeMap::new(),
        margin: 0.0,
        scale: 1.0,
        tolerance,
        checked: true,
        skipped: true,
        violated: false,
    }
}

fn informational(mut r: InstanceRecord) -> InstanceRecord {
    r.checked = false;
    r.violated = false;
    r
}

fn instance_hash(suite: &str, index: usize, seed: u64, mesh: &Mesh, flux: &Flux, extra: serde_json::Value) -> String {
    let cfg = json!({
        "suite": suite,
        "index": index,
        "seed": seed,
        "n": mesh.n(),
        "l": mesh.side_length(),
        "flux": flux.to_spec(),
        "instance": extra,
    });
    config_hash(&cfg).expect("serializable")
}

#[derive(Clone)]
struct Solved {
    report: CapacityReport,
    pot: Option<PotentialField>,
}

type MemoKey = (String, Vec<bool>, Vec<bool>, u64);

/// Per-instance solve cache and audit accumulator.
struct Worker<'a> {
    mesh: &'a Mesh,
    opts: &'a SolverOptions,
    audit: Audit,
    memo: HashMap<MemoKey, Option<Solved>>,
    cp: HashMap<(u64, Vec<bool>, Vec<bool>), Option<f64>>,
}

impl<'a> Worker<'a> {
    fn new(mesh: &'a Mesh, opts: &'a SolverOptions) -> Self {
        Worker { mesh, opts, audit: Audit::default(), memo: HashMap::new(), cp: HashMap::new() }
    }

    /// Same-grid p-capacity, cached per `(p, E, F)`.
    fn p_capacity(&mut self, p: f64, e: &NodeSet, f: &NodeSet) -> Option<f64> {
        let key = (p.to_bits(), e.mask().to_vec(), f.mask().to_vec());
        if let Some(v) = self.cp.get(&key) {
            return *v;
        }
        let value = Flux::p_laplacian(p)
            .ok()
            .and_then(|flux| compute_capacity(self.mesh, &flux, e, f, 1.0, self.opts).ok())
            .filter(|(r, _)| r.converged)
            .map(|(r, _)| r.c_inner);
        self.cp.insert(key, value);
        value
    }

    /// Memoized capacity solve; `None` when the solve diverged.
    fn capacity(&mut self, flux: &Flux, e: &NodeSet, f: &NodeSet, s: f64) -> Option<Solved> {
        let key = (canonical_json(&flux.to_spec()).expect("serializable"), e.mask().to_vec(), f.mask().to_vec(), s.to_bits());
        if let Some(v) = self.memo.get(&key) {
            return v.clone();
        }
        let out = self.solve_with(flux, e, f, s, self.opts.init.clone());
        self.memo.insert(key, out.clone());
        out
    }

    fn solve_with(&mut self, flux: &Flux, e: &NodeSet, f: &NodeSet, s: f64, init: Init) -> Option<Solved> {
        let opts = self.opts.clone().with_init(init);
        let (report, pot) = compute_capacity(self.mesh, flux, e, f, s, &opts).ok()?;
        self.audit.solves += 1;
        if !report.compatible {
            self.audit.incompatible += 1;
            return Some(Solved { report, pot });
        }
        if !report.converged {
            self.audit.diverged += 1;
            return None;
        }
        self.audit.converged += 1;
        let solved = Solved { report, pot };
        self.inspect(flux, e, f, &solved);
        Some(solved)
    }

    fn inspect(&mut self, flux: &Flux, e: &NodeSet, f: &NodeSet, solved: &Solved) {
        let rep = &solved.report;
        let a = &mut self.audit;
        a.formula_checks += 1;
        if rep.tol_cap > 0.0 {
            a.worst_formula_ratio = a.worst_formula_ratio.max(rep.formula_gap() / rep.tol_cap);
        }
        if !rep.formulas_agree() {
            a.formula_violations += 1;
        }
        if let Some(pot) = solved.pot.as_ref().filter(|_| rep.s != 0.0 && !e.is_empty()) {
            let d = audit_distributions(self.mesh, flux, e, f, pot, rep);
            a.support_checks += 1;
            a.worst_interior_ratio = a.worst_interior_ratio.max(d.interior_residual / pot.tol_res);
            if !d.support_on_boundary {
                a.support_violations += 1;
            }
            a.sign_checks += 1;
            a.worst_sign_margin = min_opt(a.worst_sign_margin, d.sign_margin);
            if d.sign_margin < -SIGN_TOL {
                a.sign_violations += 1;
            }
        }
        if let Some(cp) = self.p_capacity(flux.p(), e, f) {
            let b = check_bounds(flux, rep, cp);
            let worst = b.lower_margin.min(b.upper_margin).min(b.upper_bounded_margin) / (1.0 + cp);
            let a = &mut self.audit;
            a.bound_checks += 1;
            a.worst_bound_margin = min_opt(a.worst_bound_margin, worst);
            if !b.holds {
                a.bound_violations += 1;
            }
            if matches!(flux.kind(), FluxKind::PLaplacian) && rep.s == 1.0 {
                a.tight_checks += 1;
                a.worst_tight_gap = a.worst_tight_gap.max((rep.c_inner - cp).abs() / (1.0 + cp));
            }
        }
    }
}

/// Disk used as a host region.
#[derive(Clone, Copy, Debug)]
struct Host {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Host {
    fn shape(&self) -> ShapeExpr {
        ShapeExpr::disk(self.cx, self.cy, self.r)
    }
}

/// Seeded generator of node-snapped disks and rectangles.
struct ShapeGen {
    rng: ChaCha8Rng,
    l: f64,
    h: f64,
}

impl ShapeGen {
    fn new(mesh: &Mesh, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        ShapeGen { rng, l: mesh.side_length(), h: mesh.h() }
    }

    fn snap(&self, v: f64) -> f64 {
        (v / self.h).round() * self.h
    }

    /// Disk of radius in `[lo, hi] L`, kept two cells away from the box edge.
    fn host(&mut self, lo: f64, hi: f64) -> Host {
        let v = self.rng.gen_range(lo..hi) * self.l;
        let r = self.snap(v).max(2.0 * self.h);
        let (a, b) = (r + 2.0 * self.h, self.l - r - 2.0 * self.h);
        let mut center = || {
            if a >= b {
                self.snap(0.5 * self.l)
            } else {
                let v = self.rng.gen_range(a..=b);
                self.snap(v).clamp(a, b)
            }
        };
        let cx = center();
        let cy = center();
        Host { cx, cy, r }
    }

    /// Snapped center offset of length at most `dmax`.
    fn offset(&mut self, host: Host, dmax: f64) -> (f64, f64) {
        if dmax <= 0.0 {
            return (host.cx, host.cy);
        }
        let ang = self.rng.gen_range(0.0..std::f64::consts::TAU);
        let d = dmax * self.rng.gen::<f64>().sqrt();
        let (x, y) = (self.snap(host.cx + d * ang.cos()), self.snap(host.cy + d * ang.sin()));
        if (x - host.cx).hypot(y - host.cy) <= dmax {
            (x, y)
        } else {
            (host.cx, host.cy)
        }
    }

    /// Disk or rectangle strictly inside the host, one cell from its rim.
    fn inside(&mut self, host: Host) -> ShapeExpr {
        let room = host.r - self.h;
        if self.rng.gen_bool(0.5) {
            let v = self.rng.gen_range(0.15..0.45) * host.r;
            let r = self.snap(v).max(self.h).min(room);
            let (x, y) = self.offset(host, room - r);
            ShapeExpr::disk(x, y, r)
        } else {
            let (va, vb) = (self.rng.gen_range(0.1..0.35) * host.r, self.rng.gen_range(0.1..0.35) * host.r);
            let (a, b) = (self.snap(va).max(self.h), self.snap(vb).max(self.h));
            let (x, y) = self.offset(host, room - a.hypot(b));
            ShapeExpr::rect(x - a, y - b, x + a, y + b)
        }
    }

    /// Concentric disk with a snapped radius of 55-85% of the host's.
    fn shrink(&mut self, host: Host) -> Host {
        let v = host.r * self.rng.gen_range(0.55..0.85);
        Host { r: self.snap(v).max(3.0 * self.h), ..host }
    }

    /// Halfplane through a snapped point near the host center.
    fn cut(&mut self, host: Host) -> ShapeExpr {
        let axis = if self.rng.gen_bool(0.5) { Axis::X } else { Axis::Y };
        let c = if axis == Axis::X { host.cx } else { host.cy };
        let v = c + self.rng.gen_range(-0.3..0.3) * host.r;
        let t = self.snap(v);
        let side = if self.rng.gen_bool(0.5) { Side::Le } else { Side::Ge };
        ShapeExpr::halfplane(axis, t.clamp(0.0, self.l), side)
    }
}

fn suite_stream(tag: u64, index: usize) -> u64 {
    (tag << 32) | index as u64
}

fn run_parallel<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

fn merge_outputs(outs: Vec<(Vec<InstanceRecord>, Audit)>) -> (Vec<InstanceRecord>, Audit) {
    let mut records = Vec::new();
    let mut audit = Audit::default();
    for (r, a) in outs {
        records.extend(r);
        audit.merge(&a);
    }
    (records, audit)
}

/// Relative scale `1 + max |v|`.
fn rel_scale(values: &[f64]) -> f64 {
    1.0 + values.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

pub const ORDER_TOL: f64 = 1e-6;

/// Monotonicity in `E` and antitonicity in `F`:
/// `C(E1, F) <= C(E2, F)` for `E1 ⊆ E2`, `C(E, F1) >= C(E, F2)` for `F1 ⊆ F2`.
pub fn run_order_suite(mesh: &Mesh, fluxes: &[Flux], n_instances: usize, seed: u64, opts: &SolverOptions) -> SuiteReport {
    let outs = run_parallel(n_instances, |i| {
        let mut g = ShapeGen::new(mesh, seed, suite_stream(1, i));
        let host = g.host(0.3, 0.42);
        let f = host.shape();
        let e1 = if i % 10 == 0 { ShapeExpr::Empty } else { g.inside(host) };
        let e2 = ShapeExpr::Union(vec![e1.clone(), g.inside(host)]);
        let inner = g.shrink(host);
        let e = g.inside(inner);
        let f1 = inner.shape();
        let f2 = if i % 10 == 5 { f1.clone() } else { ShapeExpr::Union(vec![f1.clone(), g.host(0.2, 0.4).shape()]) };
        let sets = |s: &ShapeExpr, name: &str| rasterize(s, mesh, name);
        let (f_set, e1_set, e2_set) = (sets(&f, "F"), sets(&e1, "E1"), sets(&e2, "E2"));
        let (e_set, f1_set, f2_set) = (sets(&e, "E"), sets(&f1, "F1"), sets(&f2, "F2"));
        let mut w = Worker::new(mesh, opts);
        let mut records = Vec::new();
        for flux in fluxes {
            let h = instance_hash("order/E", i, seed, mesh, flux, json!({"F": f, "E1": e1, "E2": e2}));
            match (w.capacity(flux, &e1_set, &f_set, 1.0), w.capacity(flux, &e2_set, &f_set, 1.0)) {
                (Some(a), Some(b)) => {
                    let (c1, c2) = (a.report.c_inner, b.report.c_inner);
                    records.push(record(i, "E-order", flux, &h, &[("C_E1", c1), ("C_E2", c2)], c2 - c1, rel_scale(&[c1, c2]), ORDER_TOL));
                }
                _ => records.push(skipped_record(i, "E-order", flux, &h, ORDER_TOL)),
            }
            let h = instance_hash("order/F", i, seed, mesh, flux, json!({"E": e, "F1": f1, "F2": f2}));
            if config_hash(&f1).ok() == config_hash(&f2).ok() {
                // identical configuration: the margin is zero by construction
                records.push(record(i, "F-order", flux, &h, &[], 0.0, 1.0, ORDER_TOL));
                continue;
            }
            match (w.capacity(flux, &e_set, &f1_set, 1.0), w.capacity(flux, &e_set, &f2_set, 1.0)) {
                (Some(a), Some(b)) => {
                    let (c1, c2) = (a.report.c_inner, b.report.c_inner);
                    records.push(record(i, "F-order", flux, &h, &[("C_F1", c1), ("C_F2", c2)], c1 - c2, rel_scale(&[c1, c2]), ORDER_TOL));
                }
                _ => records.push(skipped_record(i, "F-order", flux, &h, ORDER_TOL)),
            }
        }
        (records, w.audit)
    });
    let (records, audit) = merge_outputs(outs);
    SuiteReport::assemble("order", seed, mesh.n(), ORDER_TOL, records, Vec::new(), 0, audit)
}

pub const SUBADDITIVITY_TOL: f64 = 1e-3;

struct SubInstance {
    f: ShapeExpr,
    parts: Vec<ShapeExpr>,
    target: ShapeExpr,
}

fn subadditivity_instance(mesh: &Mesh, seed: u64, i: usize) -> SubInstance {
    let mut g = ShapeGen::new(mesh, seed, suite_stream(2, i));
    let host = g.host(0.3, 0.42);
    let e1 = g.inside(host);
    let mut parts = vec![e1.clone()];
    match i % 10 {
        3 => parts.push(ShapeExpr::Intersect(vec![e1.clone(), g.cut(host)])),
        7 => parts.push(e1.clone()),
        _ => parts.push(g.inside(host)),
    }
    let union = ShapeExpr::Union(parts.clone());
    let target = if i % 4 == 2 {
        // finite cover: a subset of a three-set union
        parts.push(g.inside(host));
        ShapeExpr::Intersect(vec![ShapeExpr::Union(parts.clone()), ShapeExpr::Complement(Box::new(g.cut(host)))])
    } else {
        union
    };
    SubInstance { f: host.shape(), parts, target }
}

/// `(sum C(E_k), C(E), margin)` for one instance and flux.
fn subadditivity_values(w: &mut Worker, mesh: &Mesh, inst: &SubInstance, flux: &Flux) -> Option<(f64, f64)> {
    let f = rasterize(&inst.f, mesh, "F");
    let mut sum = 0.0;
    for (k, part) in inst.parts.iter().enumerate() {
        sum += w.capacity(flux, &rasterize(part, mesh, &format!("E{}", k + 1)), &f, 1.0)?.report.c_inner;
    }
    let whole = w.capacity(flux, &rasterize(&inst.target, mesh, "E"), &f, 1.0)?.report.c_inner;
    Some((sum, whole))
}

/// Finite subadditivity `C(E, F) <= sum_k C(E_k, F)` for `E ⊆ ∪ E_k`. With
/// `refine`, the five lowest margins are recomputed on the finer mesh and
/// their deficit must not grow.
pub fn run_subadditivity_suite(
    mesh: &Mesh,
    fluxes: &[Flux],
    n_instances: usize,
    seed: u64,
    opts: &SolverOptions,
    refine: Option<&Mesh>,
) -> SuiteReport {
    let outs = run_parallel(n_instances, |i| {
        let inst = subadditivity_instance(mesh, seed, i);
        let mut w = Worker::new(mesh, opts);
        let mut records = Vec::new();
        for flux in fluxes {
            let h = instance_hash("subadditivity", i, seed, mesh, flux, json!({"F": inst.f, "parts": inst.parts, "E": inst.target}));
            match subadditivity_values(&mut w, mesh, &inst, flux) {
                Some((sum, whole)) => records.push(record(
                    i,
                    "subadditivity",
                    flux,
                    &h,
                    &[("sum_parts", sum), ("C_union", whole), ("parts", inst.parts.len() as f64)],
                    sum - whole,
                    rel_scale(&[sum, whole]),
                    SUBADDITIVITY_TOL,
                )),
                None => records.push(skipped_record(i, "subadditivity", flux, &h, SUBADDITIVITY_TOL)),
            }
        }
        (records, w.audit)
    });
    let (records, mut audit) = merge_outputs(outs);
    let mut trend = Vec::new();
    if let Some(fine) = refine {
        let mut ranked: Vec<&InstanceRecord> = records.iter().filter(|r| !r.skipped).collect();
        ranked.sort_by(|a, b| a.normalized_margin().total_cmp(&b.normalized_margin()).then(a.index.cmp(&b.index)).then(a.flux.cmp(&b.flux)));
        let worst: Vec<(usize, Flux, f64, f64)> = ranked
            .iter()
            .take(5)
            .map(|r| {
                let flux = fluxes.iter().find(|f| f.label() == r.flux).expect("flux of record").clone();
                (r.index, flux, r.margin, r.scale)
            })
            .collect();
        let outs = worst
            .par_iter()
            .map(|(i, flux, margin, scale)| {
                let inst = subadditivity_instance(mesh, seed, *i);
                let mut w = Worker::new(fine, opts);
                let fine_vals = subadditivity_values(&mut w, fine, &inst, flux);
                let before = (-margin / scale).max(0.0);
                let t = match fine_vals {
                    Some((sum, whole)) => {
                        let after = ((whole - sum) / rel_scale(&[sum, whole])).max(0.0);
                        let slack = ORDER_TOL;
                        TrendRecord {
                            label: format!("instance {i} {}", flux.label()),
                            from: mesh.n() as f64,
                            to: fine.n() as f64,
                            before,
                            after,
                            slack,
                            ok: after <= before + slack,
                        }
                    }
                    None => TrendRecord {
                        label: format!("instance {i} {} (fine solve failed)", flux.label()),
                        from: mesh.n() as f64,
                        to: fine.n() as f64,
                        before,
                        after: f64::NAN,
                        slack: 0.0,
                        ok: false,
                    },
                };
                (t, w.audit)
            })
            .collect::<Vec<_>>();
        for (t, a) in outs {
            trend.push(t);
            audit.merge(&a);
        }
    }
    SuiteReport::assemble("subadditivity", seed, mesh.n(), SUBADDITIVITY_TOL, records, trend, 0, audit)
}

pub const S_LAW_TOL: f64 = 1e-8;
pub const TIGHT_TOL: f64 = 1e-10;

/// Sandwich bounds against the same-grid p-capacity at `s = 1` and one
/// random level per instance; the p-Laplacian also checks tightness and
/// the `|s|^p` law.
pub fn run_bounds_suite(mesh: &Mesh, fluxes: &[Flux], n_instances: usize, seed: u64, opts: &SolverOptions) -> SuiteReport {
    const LEVELS: [f64; 6] = [-2.0, -0.5, 0.5, 2.0, 3.0, 1.5];
    let outs = run_parallel(n_instances, |i| {
        let mut g = ShapeGen::new(mesh, seed, suite_stream(3, i));
        let host = g.host(0.3, 0.42);
        let (f, e) = (host.shape(), g.inside(host));
        let s_rand = LEVELS[g.rng.gen_range(0..LEVELS.len())];
        let (f_set, e_set) = (rasterize(&f, mesh, "F"), rasterize(&e, mesh, "E"));
        let mut w = Worker::new(mesh, opts);
        let mut records = Vec::new();
        for flux in fluxes {
            let cp = w.p_capacity(flux.p(), &e_set, &f_set);
            for s in [1.0, s_rand] {
                let h = instance_hash("bounds", i, seed, mesh, flux, json!({"F": f, "E": e, "s": s}));
                let (Some(cp), Some(sol)) = (cp, w.capacity(flux, &e_set, &f_set, s)) else {
                    records.push(skipped_record(i, "bounds", flux, &h, BOUND_SLACK));
                    continue;
                };
                let b = check_bounds(flux, &sol.report, cp);
                let ca = sol.report.c_inner;
                records.push(record(
                    i,
                    "bounds",
                    flux,
                    &h,
                    &[
                        ("s", s),
                        ("C_A", ca),
                        ("C_p", cp),
                        ("lower", b.lower),
                        ("upper", b.upper),
                        ("upper_bounded", b.upper_bounded),
                        ("k1", sol.report.k1),
                        ("k2", sol.report.k2),
                        ("k3", sol.report.k3),
                    ],
                    b.lower_margin.min(b.upper_margin).min(b.upper_bounded_margin),
                    1.0 + cp,
                    BOUND_SLACK,
                ));
                if matches!(flux.kind(), FluxKind::PLaplacian) {
                    let want = s.abs().powf(flux.p()) * cp;
                    let (check, tol) = if s == 1.0 { ("p-tight", TIGHT_TOL) } else { ("s-law", S_LAW_TOL) };
                    records.push(record(i, check, flux, &h, &[("s", s), ("C_A", ca), ("expected", want)], -(ca - want).abs(), 1.0 + want, tol));
                }
            }
        }
        (records, w.audit)
    });
    let (records, audit) = merge_outputs(outs);
    SuiteReport::assemble("bounds", seed, mesh.n(), BOUND_SLACK, records, Vec::new(), 0, audit)
}

pub const S_MONOTONE_TOL: f64 = 1e-6;
/// Required shrink factor of the largest adjacent jump when the grid halves.
pub const CONTINUITY_RATIO: f64 = 1.5;

/// Levels used for the scaling identity.
pub const SCALING_LEVELS: [f64; 4] = [-2.0, -0.5, 0.5, 3.0];

/// `n` equally spaced points on `[lo, hi]`.
pub fn s_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).map(|v| if v.abs() < 1e-15 { 0.0 } else { v }).collect()
}

fn refine_grid(grid: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * grid.len());
    for w in grid.windows(2) {
        out.push(w[0]);
        out.push(0.5 * (w[0] + w[1]));
    }
    out.extend(grid.last());
    out
}

/// Sweep with warm starts rescaled to the next level.
fn sweep(w: &mut Worker, flux: &Flux, e: &NodeSet, f: &NodeSet, grid: &[f64]) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(grid.len());
    let mut prev: Option<(f64, Vec<f64>)> = None;
    for &s in grid {
        let key = (canonical_json(&flux.to_spec()).expect("serializable"), e.mask().to_vec(), f.mask().to_vec(), s.to_bits());
        let solved = match w.memo.get(&key) {
            Some(v) => v.clone(),
            None => {
                let init = match &prev {
                    Some((ps, u)) if *ps != 0.0 => Init::Given(u.iter().map(|v| v * s / ps).collect()),
                    _ => w.opts.init.clone(),
                };
                let v = w.solve_with(flux, e, f, s, init);
                w.memo.insert(key, v.clone());
                v
            }
        }?;
        if let Some(pot) = &solved.pot {
            prev = Some((s, pot.u.clone()));
        }
        out.push(solved.report.c_hat);
    }
    Some(out)
}

fn max_jump(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
}

/// s-laws: `Ĉ(s)` nondecreasing with `Ĉ(0) = 0`, the continuity proxy on
/// a halved grid, the scaling identity `C_A(E, F, s) = C_{A_s}(E, F)` and,
/// for the p-Laplacian, `C_A(E, F, s) = |s|^p C_p(E, F)`.
pub fn run_s_suite(
    mesh: &Mesh,
    fluxes: &[Flux],
    grid: &[f64],
    n_instances: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<SuiteReport> {
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("s grid must be strictly ascending"));
    }
    if !(grid.first().is_some_and(|v| *v < 0.0) && grid.last().is_some_and(|v| *v > 0.0)) {
        return Err(Error::invalid("s grid must straddle 0"));
    }
    let fine = refine_grid(grid);
    let outs = run_parallel(n_instances, |i| {
        let mut g = ShapeGen::new(mesh, seed, suite_stream(4, i));
        let host = g.host(0.3, 0.42);
        let (f, e) = (host.shape(), g.inside(host));
        let (f_set, e_set) = (rasterize(&f, mesh, "F"), rasterize(&e, mesh, "E"));
        let mut w = Worker::new(mesh, opts);
        let mut records = Vec::new();
        for flux in fluxes {
            let h = instance_hash("s", i, seed, mesh, flux, json!({"F": f, "E": e, "grid": grid}));
            let (Some(coarse), Some(fine_vals)) = (sweep(&mut w, flux, &e_set, &f_set, grid), sweep(&mut w, flux, &e_set, &f_set, &fine)) else {
                records.push(skipped_record(i, "s-monotone", flux, &h, S_MONOTONE_TOL));
                continue;
            };
            let step = fine_vals.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            records.push(record(i, "s-monotone", flux, &h, &[("min_step", step)], step, rel_scale(&fine_vals), S_MONOTONE_TOL));
            if let Some(k) = grid.iter().position(|s| *s == 0.0) {
                records.push(record(i, "s-zero", flux, &h, &[("c_hat_0", coarse[k])], -coarse[k].abs(), 1.0, 0.0));
            }
            let (j1, j2) = (max_jump(&coarse), max_jump(&fine_vals));
            let ratio = if j2 > 0.0 { j1 / j2 } else { f64::INFINITY };
            let margin = if ratio.is_finite() { ratio - CONTINUITY_RATIO } else { 0.0 };
            records.push(record(i, "s-continuity", flux, &h, &[("jump", j1), ("jump_half", j2)], margin, 1.0, 0.0));
            for s in SCALING_LEVELS {
                let hs = instance_hash("s/scaling", i, seed, mesh, flux, json!({"F": f, "E": e, "s": s}));
                let wrapped = s_transform(flux, s).expect("nonzero level");
                match (w.capacity(flux, &e_set, &f_set, s), w.capacity(&wrapped, &e_set, &f_set, 1.0)) {
                    (Some(a), Some(b)) => {
                        let (ca, cb) = (a.report.c_inner, b.report.c_inner);
                        records.push(record(i, "s-scaling", flux, &hs, &[("s", s), ("C_A", ca), ("C_As", cb)], -(ca - cb).abs(), 1.0 + ca.abs(), S_LAW_TOL));
                        if matches!(flux.kind(), FluxKind::PLaplacian) {
                            if let Some(cp) = w.p_capacity(flux.p(), &e_set, &f_set) {
                                let want = s.abs().powf(flux.p()) * cp;
                                records.push(record(i, "s-power-law", flux, &hs, &[("s", s), ("C_A", ca), ("expected", want)], -(ca - want).abs(), 1.0 + want, S_LAW_TOL));
                            }
                        }
                    }
                    _ => records.push(skipped_record(i, "s-scaling", flux, &hs, S_LAW_TOL)),
                }
            }
        }
        (records, w.audit)
    });
    let (records, audit) = merge_outputs(outs);
    Ok(SuiteReport::assemble("s", seed, mesh.n(), S_MONOTONE_TOL, records, Vec::new(), 0, audit))
}

/// Fluxes for the s-suite: the shipped family without `p < 2`, whose
/// `Ĉ(s) ~ |s|^(p-1)` makes the jump at `s = 0` shrink only by `2^(p-1)`.
pub fn s_suite_family() -> Vec<Flux> {
    crate::flux::shipped_family().into_iter().filter(|f| f.p() >= 2.0).collect()
}

pub const INVARIANCE_TOL: f64 = 1e-6;
pub const INVARIANCE_STARTS: usize = 5;

/// Capacity is independent of which potential the solver reaches: two
/// flat-core fluxes from several random starts, with a strictly monotone
/// control whose fields must agree as well.
pub fn run_invariance_suite(mesh: &Mesh, n_instances: usize, seed: u64, opts: &SolverOptions) -> SuiteReport {
    let flat = Flux::flat_core(3.0, 1.0).expect("valid flux");
    // a core radius near the typical slope leaves whole regions inside the core
    let wide = Flux::flat_core(3.0, 3.0).expect("valid flux");
    let control = Flux::p_laplacian(3.0).expect("valid flux");
    let outs = run_parallel(n_instances, |i| {
        let mut g = ShapeGen::new(mesh, seed, suite_stream(5, i));
        let host = g.host(0.3, 0.42);
        let f = host.shape();
        let e = if i % 10 == 0 { ShapeExpr::Empty } else { g.inside(host) };
        let (f_set, e_set) = (rasterize(&f, mesh, "F"), rasterize(&e, mesh, "E"));
        let mut w = Worker::new(mesh, opts);
        let mut records = Vec::new();
        for (flux, is_control) in [(&flat, false), (&wide, false), (&control, true)] {
            let h = instance_hash("invariance", i, seed, mesh, flux, json!({"F": f, "E": e}));
            let runs: Option<Vec<Solved>> = (0..INVARIANCE_STARTS)
                .map(|k| w.solve_with(flux, &e_set, &f_set, 1.0, Init::Random(seed ^ ((i as u64) << 8) ^ k as u64)))
                .collect();
            let Some(runs) = runs else {
                records.push(skipped_record(i, "capacity-spread", flux, &h, INVARIANCE_TOL));
                continue;
            };
            let caps: Vec<f64> = runs.iter().map(|r| r.report.c_inner).collect();
            let lo = caps.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = caps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = caps.iter().sum::<f64>() / caps.len() as f64;
            let fields: Vec<&[f64]> = runs.iter().filter_map(|r| r.pot.as_ref().map(|p| p.u.as_slice())).collect();
            let mut field_spread: f64 = 0.0;
            for a in &fields {
                for b in &fields {
                    field_spread = field_spread.max(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
                }
            }
            let tol_res = runs[0].report.tol_res.max(f64::MIN_POSITIVE);
            records.push(record(
                i,
                "capacity-spread",
                flux,
                &h,
                &[("min", lo), ("max", hi), ("field_spread", field_spread)],
                -(hi - lo),
                1.0 + mean.abs(),
                INVARIANCE_TOL,
            ));
            let fr = record(i, "field-spread", flux, &h, &[("field_spread", field_spread), ("tol_res", tol_res)], -field_spread, 10.0 * tol_res, 1.0);
            records.push(if is_control { fr } else { informational(fr) });
        }
        (records, w.audit)
    });
    let (records, audit) = merge_outputs(outs);
    SuiteReport::assemble("invariance", seed, mesh.n(), INVARIANCE_TOL, records, Vec::new(), 0, audit)
}

pub const COMPARISON_TOL: f64 = 1e-8;

/// Comparison principle for the linear flux: nested `E` or nested `F`
/// give pointwise ordered potentials, and potentials stay within `[0, s]`.
pub fn run_comparison_suite(mesh: &Mesh, n_instances: usize, seed: u64, opts: &SolverOptions) -> SuiteReport {
    let flux = Flux::p_laplacian(2.0).expect("valid flux");
    let outs = run_parallel(n_instances, |i| {
        let mut g = ShapeGen::new(mesh, seed, suite_stream(6, i));
        let host = g.host(0.3, 0.42);
        let s = g.rng.gen_range(0.5..2.0);
        let f = host.shape();
        let e1 = g.inside(host);
        let e2 = ShapeExpr::Union(vec![e1.clone(), g.inside(host)]);
        let inner = g.shrink(host);
        let e = g.inside(inner);
        let f1 = inner.shape();
        let f2 = ShapeExpr::Union(vec![f1.clone(), g.host(0.2, 0.4).shape()]);
        let r = |x: &ShapeExpr, n: &str| rasterize(x, mesh, n);
        let mut w = Worker::new(mesh, opts);
        let h = instance_hash("comparison", i, seed, mesh, &flux, json!({"F": f, "E1": e1, "E2": e2, "E": e, "F1": f1, "F2": f2, "s": s}));
        let fs = r(&f, "F");
        let solved = [
            w.capacity(&flux, &r(&e1, "E1"), &fs, s),
            w.capacity(&flux, &r(&e2, "E2"), &fs, s),
            w.capacity(&flux, &r(&e, "E"), &r(&f1, "F1"), s),
            w.capacity(&flux, &r(&e, "E"), &r(&f2, "F2"), s),
        ];
        let mut records = Vec::new();
        let fields: Option<Vec<Vec<f64>>> = solved.iter().map(|x| x.as_ref().and_then(|x| x.pot.as_ref()).map(|p| p.u.clone())).collect();
        let Some(u) = fields else {
            records.push(skipped_record(i, "comparison", &flux, &h, COMPARISON_TOL));
            return (records, w.audit);
        };
        let min_diff = |hi: &[f64], lo: &[f64]| hi.iter().zip(lo).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min);
        let e_order = min_diff(&u[1], &u[0]);
        let f_order = min_diff(&u[3], &u[2]);
        let lo = u.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = u.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        records.push(record(i, "E-nested", &flux, &h, &[("min_u2_minus_u1", e_order)], e_order, 1.0, COMPARISON_TOL));
        records.push(record(i, "F-nested", &flux, &h, &[("min_u2_minus_u1", f_order)], f_order, 1.0, COMPARISON_TOL));
        records.push(record(i, "range", &flux, &h, &[("s", s), ("min_u", lo), ("max_u", hi)], lo.min(s - hi), 1.0, COMPARISON_TOL));
        (records, w.audit)
    });
    let (records, audit) = merge_outputs(outs);
    SuiteReport::assemble("comparison", seed, mesh.n(), COMPARISON_TOL, records, Vec::new(), 0, audit)
}

/// Which set varies along a chain and in which direction; the other set
/// is held fixed.
#[derive(Clone, Debug)]
pub enum ChainMode {
    IncreasingE { f: NodeSet },
    DecreasingE { f: NodeSet },
    IncreasingF { e: NodeSet },
    DecreasingF { e: NodeSet },
}

pub const SEQUENCE_TOL: f64 = 1e-6;

/// Capacities along a monotone chain of sets: the values must move in the
/// direction the ordering theorems predict and the last value must equal
/// the capacity of the chain's union (increasing) or intersection
/// (decreasing).
pub fn run_sequence_demo(mesh: &Mesh, flux: &Flux, chain: &[NodeSet], mode: &ChainMode, opts: &SolverOptions) -> Result<SuiteReport> {
    if chain.is_empty() {
        return Err(Error::invalid("empty chain"));
    }
    let increasing = matches!(mode, ChainMode::IncreasingE { .. } | ChainMode::IncreasingF { .. });
    for w in chain.windows(2) {
        let ok = if increasing { w[0].is_subset(&w[1])? } else { w[1].is_subset(&w[0])? };
        if !ok {
            return Err(Error::invalid(format!("chain is not monotone at {} -> {}", w[0].name(), w[1].name())));
        }
    }
    let mut limit = chain[0].clone();
    for s in &chain[1..] {
        limit = if increasing { limit.union(s)? } else { limit.intersect(s)? };
    }
    let limit = limit.with_name("limit");
    let pair = |set: &NodeSet| -> (NodeSet, NodeSet) {
        match mode {
            ChainMode::IncreasingE { f } | ChainMode::DecreasingE { f } => (set.clone(), f.clone()),
            ChainMode::IncreasingF { e } | ChainMode::DecreasingF { e } => (e.clone(), set.clone()),
        }
    };
    for set in chain {
        let (e, f) = pair(set);
        if !e.is_subset(&f)? {
            return Err(Error::Incompatible(format!("{} is not contained in {}", e.name(), f.name())));
        }
    }
    let mut w = Worker::new(mesh, opts);
    let mut values = Vec::new();
    for set in chain.iter().chain(std::iter::once(&limit)) {
        let (e, f) = pair(set);
        match w.capacity(flux, &e, &f, 1.0) {
            Some(s) => values.push(s.report.c_inner),
            None => return Err(Error::invalid(format!("solve for {} did not converge", set.name()))),
        }
    }
    // capacity grows with E and shrinks as F grows
    let sign = match mode {
        ChainMode::IncreasingE { .. } | ChainMode::DecreasingF { .. } => 1.0,
        ChainMode::DecreasingE { .. } | ChainMode::IncreasingF { .. } => -1.0,
    };
    let hash = config_hash(&json!({"chain": chain.iter().map(|c| c.to_rle()).collect::<Vec<_>>(), "mode": format!("{mode:?}").split(' ').next(), "flux": flux.to_spec()}))?;
    let mut records = Vec::new();
    for k in 0..chain.len().saturating_sub(1) {
        let (a, b) = (values[k], values[k + 1]);
        records.push(record(k, "step", flux, &hash, &[("before", a), ("after", b)], sign * (b - a), rel_scale(&[a, b]), SEQUENCE_TOL));
    }
    let (last, lim) = (values[chain.len() - 1], values[chain.len()]);
    records.push(record(chain.len(), "limit", flux, &hash, &[("last", last), ("limit", lim)], -(last - lim).abs(), rel_scale(&[last]), 0.0));
    Ok(SuiteReport::assemble("sequence", 0, mesh.n(), SEQUENCE_TOL, records, Vec::new(), 0, w.audit))
}

/// Geometry given by shapes, rasterized on each mesh of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub e: ShapeExpr,
    pub f: ShapeExpr,
    #[serde(default = "unit_length")]
    pub l: f64,
}

fn unit_length() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCheck {
    /// Relative error bound against the oracle.
    pub tolerance: f64,
    /// Apply the bound at every resolution instead of only the finest.
    pub every_n: bool,
    /// Refinement steps allowed to increase the error.
    pub allowed_increases: usize,
}

fn check_ascending(n_list: &[usize]) -> Result<()> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("N list must be nonempty and strictly ascending"));
    }
    Ok(())
}

fn grid_capacity(geometry: &Geometry, flux: &Flux, n: usize, opts: &SolverOptions) -> Result<(f64, Audit)> {
    let mesh = Mesh::build(n, geometry.l)?;
    let mut w = Worker::new(&mesh, opts);
    let e = rasterize(&geometry.e, &mesh, "E");
    let f = rasterize(&geometry.f, &mesh, "F");
    let solved = w
        .capacity(flux, &e, &f, 1.0)
        .ok_or_else(|| Error::invalid(format!("solve at N={n} did not converge")))?;
    Ok((solved.report.c_inner, w.audit))
}

/// Relative errors below this are round-off and do not count as growth.
pub const CONVERGENCE_FLOOR: f64 = 1e-10;

/// Grid capacities against a reference value over increasing resolution.
pub fn run_convergence_study(
    geometry: &Geometry,
    flux: &Flux,
    n_list: &[usize],
    oracle_value: f64,
    check: &ConvergenceCheck,
    opts: &SolverOptions,
) -> Result<SuiteReport> {
    check_ascending(n_list)?;
    let solved: Vec<Result<(f64, Audit)>> = n_list.par_iter().map(|&n| grid_capacity(geometry, flux, n, opts)).collect();
    let hash = config_hash(&json!({"geometry": geometry, "flux": flux.to_spec(), "n_list": n_list, "oracle": oracle_value}))?;
    let mut records = Vec::new();
    let mut audit = Audit::default();
    let mut errors = Vec::new();
    for (k, (n, res)) in n_list.iter().zip(solved).enumerate() {
        let (value, a) = res?;
        audit.merge(&a);
        let err = (value - oracle_value).abs() / oracle_value.abs().max(f64::MIN_POSITIVE);
        errors.push(err);
        let r = record(k, "oracle-error", flux, &hash, &[("N", *n as f64), ("capacity", value), ("oracle", oracle_value), ("rel_error", err)], check.tolerance - err, 1.0, 0.0);
        records.push(if check.every_n || k + 1 == n_list.len() { r } else { informational(r) });
    }
    let trend = errors
        .windows(2)
        .zip(n_list.windows(2))
        .map(|(e, n)| TrendRecord {
            label: "rel_error".into(),
            from: n[0] as f64,
            to: n[1] as f64,
            before: e[0],
            after: e[1],
            slack: CONVERGENCE_FLOOR,
            ok: e[1] <= e[0] + CONVERGENCE_FLOOR,
        })
        .collect();
    Ok(SuiteReport::assemble("convergence", 0, *n_list.last().unwrap(), check.tolerance, records, trend, check.allowed_increases, audit))
}

/// `|C_a - C_b|` over increasing resolution for two fluxes whose continuum
/// capacities coincide; the gap must not grow beyond round-off.
pub fn run_flux_gap_study(geometry: &Geometry, flux_a: &Flux, flux_b: &Flux, n_list: &[usize], opts: &SolverOptions) -> Result<SuiteReport> {
    check_ascending(n_list)?;
    let hash = config_hash(&json!({"geometry": geometry, "a": flux_a.to_spec(), "b": flux_b.to_spec(), "n_list": n_list}))?;
    let mut audit = Audit::default();
    let mut records = Vec::new();
    let mut gaps = Vec::new();
    for (k, &n) in n_list.iter().enumerate() {
        let (ca, a1) = grid_capacity(geometry, flux_a, n, opts)?;
        let (cb, a2) = grid_capacity(geometry, flux_b, n, opts)?;
        audit.merge(&a1);
        audit.merge(&a2);
        let gap = (ca - cb).abs();
        gaps.push((gap, 1.0 + ca.abs().max(cb.abs())));
        records.push(informational(record(k, "flux-gap", flux_a, &hash, &[("N", n as f64), ("C_a", ca), ("C_b", cb), ("gap", gap)], -gap, 1.0 + ca.abs(), 0.0)));
    }
    let trend = gaps
        .windows(2)
        .zip(n_list.windows(2))
        .map(|(g, n)| {
            let slack = 1e-9 * g[1].1;
            TrendRecord { label: "gap".into(), from: n[0] as f64, to: n[1] as f64, before: g[0].0, after: g[1].0, slack, ok: g[1].0 <= g[0].0 + slack }
        })
        .collect();
    Ok(SuiteReport::assemble("flux-gap", 0, *n_list.last().unwrap(), 0.0, records, trend, 0, audit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::shipped_family;
    use std::f64::consts::PI;

    fn small_family() -> Vec<Flux> {
        vec![Flux::p_laplacian(2.0).unwrap(), Flux::p_laplacian(3.0).unwrap(), Flux::flat_core(3.0, 1.0).unwrap()]
    }

    #[test]
    fn generated_shapes_nest_and_stay_interior() {
        let mesh = Mesh::build(32, 1.0).unwrap();
        for i in 0..40 {
            let mut g = ShapeGen::new(&mesh, 7, i);
            let host = g.host(0.3, 0.42);
            let f = rasterize(&host.shape(), &mesh, "F");
            assert!(f.indices().all(|k| {
                let x = mesh.node(k);
                x.x >= 2.0 * mesh.h() - 1e-12 && x.x <= 1.0 - 2.0 * mesh.h() + 1e-12 && x.y >= 2.0 * mesh.h() - 1e-12
            }));
            for _ in 0..5 {
                let e = rasterize(&g.inside(host), &mesh, "E");
                assert!(!e.is_empty());
                assert!(e.is_subset(&f).unwrap());
                // at least one free ring between E and the rim of F
                let bd = crate::mesh::discrete_boundary(&e, &mesh).unwrap();
                assert!(bd.indices().all(|k| !mesh.on_outer_boundary(k)));
            }
        }
    }

    #[test]
    fn order_suite_small() {
        let mesh = Mesh::build(16, 1.0).unwrap();
        let rep = run_order_suite(&mesh, &small_family(), 6, 3, &SolverOptions::default());
        assert!(rep.passed, "{}", rep.summary_line());
        assert_eq!(rep.instances, 6 * 3 * 2);
        assert!(rep.audit.structural_ok(), "{:?}", rep.audit);
        // E1 = ∅ probe: margin equals C(E2, F)
        let probe = rep.records.iter().find(|r| r.index == 0 && r.check == "E-order").unwrap();
        assert_eq!(probe.values["C_E1"], 0.0);
        assert_eq!(probe.margin, probe.values["C_E2"]);
        let same = rep.records.iter().find(|r| r.index == 5 && r.check == "F-order").unwrap();
        assert_eq!(same.margin, 0.0);
    }

    #[test]
    fn subadditivity_suite_small() {
        let mesh = Mesh::build(16, 1.0).unwrap();
        let fine = Mesh::build(32, 1.0).unwrap();
        let rep = run_subadditivity_suite(&mesh, &small_family()[..2], 8, 11, &SolverOptions::default(), Some(&fine));
        assert!(rep.passed, "{}", rep.summary_line());
        assert_eq!(rep.trend.len(), 5);
        // E1 = E2 instance: margin = C(E1, F)
        let r = rep.records.iter().find(|r| r.index == 7).unwrap();
        assert!((r.margin - r.values["sum_parts"] / 2.0).abs() < 1e-12 * r.scale);
    }

    #[test]
    fn bounds_suite_small() {
        let mesh = Mesh::build(16, 1.0).unwrap();
        let rep = run_bounds_suite(&mesh, &shipped_family(), 3, 5, &SolverOptions::default());
        assert!(rep.passed, "{}", rep.summary_line());
        assert!(rep.records.iter().any(|r| r.check == "p-tight"));
        assert!(rep.audit.tight_checks > 0 && rep.audit.worst_tight_gap <= TIGHT_TOL);
    }

    #[test]
    fn s_suite_small() {
        let mesh = Mesh::build(12, 1.0).unwrap();
        let grid = s_grid(-4.0, 4.0, 9);
        assert!(grid.contains(&0.0));
        let rep = run_s_suite(&mesh, &s_suite_family()[..3], &grid, 2, 9, &SolverOptions::default()).unwrap();
        assert!(rep.passed, "{}", rep.summary_line());
        assert!(run_s_suite(&mesh, &small_family(), &[0.5, 1.0], 1, 0, &SolverOptions::default()).is_err());
    }

    #[test]
    fn invariance_and_comparison_small() {
        let mesh = Mesh::build(16, 1.0).unwrap();
        let rep = run_invariance_suite(&mesh, 3, 1, &SolverOptions::default());
        assert!(rep.passed, "{}", rep.summary_line());
        let zero = rep.records.iter().filter(|r| r.index == 0 && r.check == "capacity-spread");
        assert!(zero.into_iter().all(|r| r.values["max"] == 0.0 && r.values["min"] == 0.0));
        let rep = run_comparison_suite(&mesh, 4, 2, &SolverOptions::default());
        assert!(rep.passed, "{}", rep.summary_line());
    }

    #[test]
    fn sequence_of_growing_disks() {
        let mesh = Mesh::build(24, 1.0).unwrap();
        let f = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.4), &mesh, "F");
        let chain: Vec<NodeSet> = [0.05, 0.1, 0.15, 0.2]
            .iter()
            .map(|r| rasterize(&ShapeExpr::disk(0.5, 0.5, *r), &mesh, &format!("r{r}")))
            .collect();
        let flux = Flux::p_laplacian(2.0).unwrap();
        let rep = run_sequence_demo(&mesh, &flux, &chain, &ChainMode::IncreasingE { f: f.clone() }, &SolverOptions::default()).unwrap();
        assert!(rep.passed);
        assert!(rep.records.iter().filter(|r| r.check == "step").all(|r| r.margin > 0.0));
        assert_eq!(rep.records.last().unwrap().margin, 0.0);
        let rev: Vec<NodeSet> = chain.iter().rev().cloned().collect();
        assert!(run_sequence_demo(&mesh, &flux, &rev, &ChainMode::IncreasingE { f }, &SolverOptions::default()).is_err());
        // decreasing F around a fixed E: values nondecreasing
        let e = chain[0].clone();
        let fs: Vec<NodeSet> = [0.45, 0.35, 0.25].iter().map(|r| rasterize(&ShapeExpr::disk(0.5, 0.5, *r), &mesh, "F")).collect();
        let rep = run_sequence_demo(&mesh, &flux, &fs, &ChainMode::DecreasingF { e }, &SolverOptions::default()).unwrap();
        assert!(rep.passed, "{}", rep.summary_line());
    }

    #[test]
    fn strip_convergence_is_exact() {
        let geometry = Geometry {
            e: ShapeExpr::halfplane(Axis::X, 0.25, Side::Le),
            f: ShapeExpr::Complement(Box::new(ShapeExpr::halfplane(Axis::X, 0.75, Side::Ge))),
            l: 1.0,
        };
        let check = ConvergenceCheck { tolerance: 1e-8, every_n: true, allowed_increases: 2 };
        let rep = run_convergence_study(&geometry, &Flux::p_laplacian(2.0).unwrap(), &[8, 16, 32], 2.0, &check, &SolverOptions::default()).unwrap();
        assert!(rep.passed, "{}", rep.summary_line());
    }

    #[test]
    fn annulus_error_decreases() {
        let geometry = Geometry { e: ShapeExpr::disk(0.5, 0.5, 0.1), f: ShapeExpr::disk(0.5, 0.5, 0.4), l: 1.0 };
        let check = ConvergenceCheck { tolerance: 0.2, every_n: false, allowed_increases: 1 };
        let rep = run_convergence_study(&geometry, &Flux::p_laplacian(2.0).unwrap(), &[8, 16, 32], 2.0 * PI / 4f64.ln(), &check, &SolverOptions::default()).unwrap();
        assert!(rep.passed, "{}", rep.summary_line());
        assert!(run_convergence_study(&geometry, &Flux::p_laplacian(2.0).unwrap(), &[16, 8], 1.0, &check, &SolverOptions::default()).is_err());
    }

    #[test]
    fn reports_are_deterministic() {
        let mesh = Mesh::build(12, 1.0).unwrap();
        let a = run_order_suite(&mesh, &small_family(), 3, 42, &SolverOptions::default());
        let b = run_order_suite(&mesh, &small_family(), 3, 42, &SolverOptions::default());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = run_order_suite(&mesh, &small_family(), 3, 43, &SolverOptions::default());
        assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
    }
}

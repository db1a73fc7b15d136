//! Capacities `C_A(E, F, s)`, `C^_A(E, F, s) = C_A(E, F, s) / s` and the
//! capacitary distributions.
//!
//! Three formulas are evaluated on every solved potential:
//!
//! - `c_energy = <A u, u>`
//! - `c_inner  = s * sum_{i in E} r_i`  (pairing with the indicator of `E`)
//! - `c_outer  = -s * sum_{i not in F} r_i`
//!
//! They coincide up to the free-node residual; `c_inner` is the reported value.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::assembly::{pairing, residual};
use crate::error::{Error, Result};
use crate::flux::Flux;
use crate::mesh::{discrete_boundary, Mesh, NodeSet};
use crate::solver::{solve_dirichlet, Init, PotentialField, SolverOptions};

/// Serializes `+inf` as the string `"infinity"`.
pub mod inf_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, ser: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            ser.serialize_str("infinity")
        } else {
            ser.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(de)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "infinity" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected capacity string {s:?}"))),
        }
    }
}

/// Sandwich-bound check against the same-grid p-capacity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lower: f64,
    pub upper: f64,
    pub upper_bounded: f64,
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub upper_bounded_margin: f64,
    pub slack: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub flux: String,
    pub e: String,
    pub f: String,
    pub s: f64,
    /// Reported capacity (`c_inner`), `"infinity"` for incompatible pairs.
    #[serde(with = "inf_f64")]
    pub capacity: f64,
    #[serde(with = "inf_f64")]
    pub c_energy: f64,
    #[serde(with = "inf_f64")]
    pub c_inner: f64,
    #[serde(with = "inf_f64")]
    pub c_outer: f64,
    #[serde(with = "inf_f64")]
    pub c_hat: f64,
    pub cp_value: Option<f64>,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub diam_f: f64,
    pub area_f: f64,
    pub residual_max: f64,
    pub tol_res: f64,
    pub tol_cap: f64,
    pub free_nodes: usize,
    pub constrained_nodes: usize,
    pub iterations: usize,
    pub compatible: bool,
    pub converged: bool,
    pub bounds: Option<BoundCheck>,
}

impl CapacityReport {
    /// `max(|c_energy - c_inner|, |c_inner - c_outer|)`.
    pub fn formula_gap(&self) -> f64 {
        (self.c_energy - self.c_inner).abs().max((self.c_inner - self.c_outer).abs())
    }

    pub fn formulas_agree(&self) -> bool {
        !self.compatible || self.formula_gap() <= self.tol_cap
    }
}

/// Area of the triangles with at least one vertex in `f`.
pub fn support_area(mesh: &Mesh, f: &NodeSet) -> f64 {
    let count = mesh.triangles().iter().filter(|t| t.iter().any(|&v| f.contains(v))).count();
    count as f64 * mesh.triangle_area()
}

/// Euclidean diameter of the node set.
pub fn node_diameter(mesh: &Mesh, f: &NodeSet) -> f64 {
    // the extreme pair lies among the leftmost/rightmost member of each row
    let side = mesh.n() + 1;
    let mut cand = Vec::new();
    for j in 0..side {
        let row = (0..side).map(|i| j * side + i).filter(|k| f.contains(*k));
        let mut it = row.clone();
        if let Some(first) = it.next() {
            cand.push(mesh.node(first));
            if let Some(last) = row.last() {
                cand.push(mesh.node(last));
            }
        }
    }
    let mut d: f64 = 0.0;
    for a in 0..cand.len() {
        for b in a + 1..cand.len() {
            d = d.max((cand[a] - cand[b]).norm());
        }
    }
    d
}

/// Constants of the sandwich bounds for `flux` on `F`:
/// `k1 = (4 c2)^p / (p (q c1)^(p-1))`,
/// `k2 = 4 c2 / c1^(1/q) (b1 |F|)^(1/q) + 4 b2 |F|^(1/q)`,
/// `k3 = 2^(p+1) (c2 / c1^(1/q) b1^(1/q) + b2) diam(F)^(p-1)`.
pub fn bound_constants(flux: &Flux, area_f: f64, diam_f: f64) -> (f64, f64, f64) {
    let c = flux.constants();
    let (p, q) = (flux.p(), flux.q());
    let k1 = (4.0 * c.c2).powf(p) / (p * (q * c.c1).powf(p - 1.0));
    let ratio = c.c2 / c.c1.powf(1.0 / q);
    let k2 = 4.0 * ratio * (c.b1 * area_f).powf(1.0 / q) + 4.0 * c.b2 * area_f.powf(1.0 / q);
    let k3 = 2f64.powf(p + 1.0) * (ratio * c.b1.powf(1.0 / q) + c.b2) * diam_f.powf(p - 1.0);
    (k1, k2, k3)
}

/// Evaluates the lower and two upper bounds at level `s`.
pub fn check_bounds(flux: &Flux, report: &CapacityReport, cp: f64) -> BoundCheck {
    let c = flux.constants();
    let p = flux.p();
    let sp = report.s.abs().powf(p);
    let sa = report.s.abs();
    let ca = report.c_inner;
    let lower = sp * c.c1 * cp - c.b1 * report.area_f;
    let upper = sp * report.k1 * cp + sa * report.k2 * cp.powf(1.0 / p);
    let upper_bounded = (sp * report.k1 + sa * report.k3) * cp;
    let slack = 1e-9 * (1.0 + cp);
    let lower_margin = ca - lower;
    let upper_margin = upper - ca;
    let upper_bounded_margin = upper_bounded - ca;
    BoundCheck {
        lower,
        upper,
        upper_bounded,
        lower_margin,
        upper_margin,
        upper_bounded_margin,
        slack,
        holds: lower_margin >= -slack && upper_margin >= -slack && upper_bounded_margin >= -slack,
    }
}

fn infinite_report(mesh: &Mesh, flux: &Flux, e: &NodeSet, f: &NodeSet, s: f64) -> CapacityReport {
    let area_f = support_area(mesh, f);
    let diam_f = node_diameter(mesh, f);
    let (k1, k2, k3) = bound_constants(flux, area_f, diam_f);
    let inf = f64::INFINITY;
    CapacityReport {
        flux: flux.label(),
        e: e.name().to_string(),
        f: f.name().to_string(),
        s,
        capacity: inf,
        c_energy: inf,
        c_inner: inf,
        c_outer: inf,
        c_hat: inf,
        cp_value: None,
        k1,
        k2,
        k3,
        diam_f,
        area_f,
        residual_max: 0.0,
        tol_res: 0.0,
        tol_cap: 0.0,
        free_nodes: 0,
        constrained_nodes: 0,
        iterations: 0,
        compatible: false,
        converged: true,
        bounds: None,
    }
}

/// Evaluates the capacity formulas on an already solved potential.
pub fn report_from_potential(
    mesh: &Mesh,
    flux: &Flux,
    e: &NodeSet,
    f: &NodeSet,
    pot: &PotentialField,
) -> CapacityReport {
    let s = pot.s;
    let r = residual(mesh, flux, &pot.u);
    let sum_e: f64 = e.indices().map(|k| r[k]).sum();
    let sum_out: f64 = (0..mesh.num_nodes()).filter(|k| !f.contains(*k)).map(|k| r[k]).sum();
    let c_energy = pairing(mesh, flux, &pot.u, &pot.u);
    let free_nodes = (0..mesh.num_nodes()).filter(|k| f.contains(*k) && !e.contains(*k)).count();
    let constrained_nodes = mesh.num_nodes() - free_nodes;
    let area_f = support_area(mesh, f);
    let diam_f = node_diameter(mesh, f);
    let (k1, k2, k3) = bound_constants(flux, area_f, diam_f);
    let c_inner = s * sum_e;
    CapacityReport {
        flux: flux.label(),
        e: e.name().to_string(),
        f: f.name().to_string(),
        s,
        capacity: c_inner,
        c_energy,
        c_inner,
        c_outer: -s * sum_out,
        c_hat: if s == 0.0 { 0.0 } else { sum_e },
        cp_value: None,
        k1,
        k2,
        k3,
        diam_f,
        area_f,
        residual_max: pot.residual_max,
        tol_res: pot.tol_res,
        tol_cap: constrained_nodes as f64 * pot.tol_res * s.abs().max(1.0),
        free_nodes,
        constrained_nodes,
        iterations: pot.iterations,
        compatible: true,
        converged: pot.converged,
        bounds: None,
    }
}

/// Solves for the potential and evaluates the capacity. Incompatible pairs
/// give an infinite capacity and no potential; a diverged solve gives a
/// report with `converged = false` built from the best iterate.
pub fn compute_capacity(
    mesh: &Mesh,
    flux: &Flux,
    e: &NodeSet,
    f: &NodeSet,
    s: f64,
    opts: &SolverOptions,
) -> Result<(CapacityReport, Option<PotentialField>)> {
    match solve_dirichlet(mesh, flux, e, f, s, opts) {
        Ok(pot) => Ok((report_from_potential(mesh, flux, e, f, &pot), Some(pot))),
        Err(Error::Incompatible(_)) => Ok((infinite_report(mesh, flux, e, f, s), None)),
        Err(Error::Diverged { best, .. }) => Ok((report_from_potential(mesh, flux, e, f, &best), Some(*best))),
        Err(other) => Err(other),
    }
}

/// [`compute_capacity`] plus the same-grid p-capacity and the sandwich bounds.
pub fn compute_capacity_with_bounds(
    mesh: &Mesh,
    flux: &Flux,
    e: &NodeSet,
    f: &NodeSet,
    s: f64,
    opts: &SolverOptions,
) -> Result<(CapacityReport, Option<PotentialField>)> {
    let (mut report, pot) = compute_capacity(mesh, flux, e, f, s, opts)?;
    if report.compatible && report.converged {
        let (cp_report, _) = compute_capacity(mesh, &Flux::p_laplacian(flux.p())?, e, f, 1.0, opts)?;
        if cp_report.converged {
            report.cp_value = Some(cp_report.c_inner);
            report.bounds = Some(check_bounds(flux, &report, cp_report.c_inner));
        }
    }
    Ok((report, pot))
}

/// Discrete p-capacity: the p-Laplacian capacity at `s = 1`.
pub fn p_capacity(mesh: &Mesh, p: f64, e: &NodeSet, f: &NodeSet, opts: &SolverOptions) -> Result<f64> {
    let (report, _) = compute_capacity(mesh, &Flux::p_laplacian(p)?, e, f, 1.0, opts)?;
    if !report.converged {
        return Err(Error::invalid(format!(
            "p-capacity solve did not converge (residual {:e})",
            report.residual_max
        )));
    }
    Ok(report.c_inner)
}

/// Nonnegative node measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeMeasure {
    pub carrier: String,
    pub weights: Vec<f64>,
    pub total: f64,
}

impl NodeMeasure {
    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(k, _)| k)
    }
}

/// Inner and outer distributions `(lambda, nu)` with `A u = lambda - nu`
/// for `s > 0`: `lambda = r` on `E`, `nu = -r` off `F`. For `s < 0` the
/// signs flip so both stay nonnegative; `s = 0` gives zero measures.
pub fn distributions(
    mesh: &Mesh,
    flux: &Flux,
    potential: &PotentialField,
    e: &NodeSet,
    f: &NodeSet,
) -> (NodeMeasure, NodeMeasure) {
    let sign = if potential.s > 0.0 {
        1.0
    } else if potential.s < 0.0 {
        -1.0
    } else {
        0.0
    };
    let r = residual(mesh, flux, &potential.u);
    let n = mesh.num_nodes();
    let lambda: Vec<f64> = (0..n).map(|k| if e.contains(k) { sign * r[k] } else { 0.0 }).collect();
    let nu: Vec<f64> = (0..n).map(|k| if !f.contains(k) { -sign * r[k] } else { 0.0 }).collect();
    let total = |w: &[f64]| w.iter().sum::<f64>();
    (
        NodeMeasure { carrier: e.name().to_string(), total: total(&lambda), weights: lambda },
        NodeMeasure { carrier: format!("~{}", f.name()), total: total(&nu), weights: nu },
    )
}

/// Structural audit of a solved potential: formula agreement and the
/// support/sign of the distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionAudit {
    pub formula_gap: f64,
    pub tol_cap: f64,
    pub formulas_agree: bool,
    /// Largest `|r_i|` over nodes of `E` off its discrete boundary.
    pub interior_residual: f64,
    pub support_on_boundary: bool,
    pub min_lambda: f64,
    pub min_nu: f64,
    /// `min(lambda, nu) / (1 + |C^_A|)`
    pub sign_margin: f64,
}

pub fn audit(
    mesh: &Mesh,
    flux: &Flux,
    e: &NodeSet,
    f: &NodeSet,
    pot: &PotentialField,
    report: &CapacityReport,
) -> DistributionAudit {
    let (lambda, nu) = distributions(mesh, flux, pot, e, f);
    let bd = discrete_boundary(e, mesh).expect("same mesh");
    let interior_residual = e
        .indices()
        .filter(|k| !bd.contains(*k))
        .map(|k| lambda.weights[k].abs())
        .fold(0.0, f64::max);
    let min_lambda = e.indices().map(|k| lambda.weights[k]).fold(f64::INFINITY, f64::min);
    let min_nu = (0..mesh.num_nodes()).filter(|k| !f.contains(*k)).map(|k| nu.weights[k]).fold(f64::INFINITY, f64::min);
    let worst = min_lambda.min(min_nu);
    DistributionAudit {
        formula_gap: report.formula_gap(),
        tol_cap: report.tol_cap,
        formulas_agree: report.formulas_agree(),
        interior_residual,
        support_on_boundary: interior_residual <= pot.tol_res,
        min_lambda,
        min_nu,
        sign_margin: if worst.is_finite() { worst / (1.0 + report.c_hat.abs()) } else { 0.0 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub s: f64,
    pub c_hat: Option<f64>,
    pub report: Option<CapacityReport>,
    pub failed: bool,
}

/// Capacities along ascending `s_values`, each solve warm-started from the
/// previous potential rescaled to the new level.
pub fn sweep_s(
    mesh: &Mesh,
    flux: &Flux,
    e: &NodeSet,
    f: &NodeSet,
    s_values: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<SweepPoint>> {
    if s_values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("s_values must be strictly ascending"));
    }
    let mut out = Vec::with_capacity(s_values.len());
    let mut prev: Option<PotentialField> = None;
    for &s in s_values {
        let mut o = opts.clone();
        if let Some(p) = prev.as_ref().filter(|p| p.s != 0.0 && p.converged) {
            let scale = s / p.s;
            o.init = Init::Given(p.u.iter().map(|v| v * scale).collect());
        }
        let (report, pot) = compute_capacity(mesh, flux, e, f, s, &o)?;
        let failed = !report.converged;
        out.push(SweepPoint { s, c_hat: (!failed).then_some(report.c_hat), report: Some(report), failed });
        prev = pot;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{rasterize, Axis, ShapeExpr, Side};

    fn strip(mesh: &Mesh) -> (NodeSet, NodeSet) {
        let e = rasterize(&ShapeExpr::halfplane(Axis::X, 0.25, Side::Le), mesh, "E");
        let f = rasterize(&ShapeExpr::halfplane(Axis::X, 0.75, Side::Ge), mesh, "Fc").complement().with_name("F");
        (e, f)
    }

    #[test]
    fn strip_capacities() {
        let mesh = Mesh::build(8, 1.0).unwrap();
        let (e, f) = strip(&mesh);
        for (p, want) in [(2.0, 2.0), (3.0, 4.0)] {
            let (rep, _) = compute_capacity(&mesh, &Flux::p_laplacian(p).unwrap(), &e, &f, 1.0, &SolverOptions::default()).unwrap();
            for v in [rep.c_energy, rep.c_inner, rep.c_outer] {
                assert!((v - want).abs() <= 1e-8 * want, "p={p}: {v}");
            }
        }
    }

    #[test]
    fn empty_e_has_zero_capacity() {
        let mesh = Mesh::build(8, 1.0).unwrap();
        let f = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.3), &mesh, "F");
        let (rep, _) = compute_capacity(&mesh, &Flux::p_laplacian(2.0).unwrap(), &mesh.empty_set("E"), &f, 1.0, &SolverOptions::default()).unwrap();
        assert_eq!(rep.capacity, 0.0);
        assert_eq!(rep.c_energy, 0.0);
    }

    #[test]
    fn incompatible_is_infinite() {
        let mesh = Mesh::build(8, 1.0).unwrap();
        let e = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.3), &mesh, "E");
        let f = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.1), &mesh, "F");
        let (rep, pot) = compute_capacity(&mesh, &Flux::p_laplacian(2.0).unwrap(), &e, &f, 1.0, &SolverOptions::default()).unwrap();
        assert!(pot.is_none());
        assert_eq!(rep.capacity, f64::INFINITY);
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["capacity"], "infinity");
        let back: CapacityReport = serde_json::from_value(json).unwrap();
        assert_eq!(back.capacity, f64::INFINITY);
    }

    #[test]
    fn single_node_jump() {
        // E = F = centre node of N = 4: stencil gives 4
        let mesh = Mesh::build(4, 1.0).unwrap();
        let c = mesh.set_from_indices("c", [mesh.node_index(2, 2)]);
        let v = p_capacity(&mesh, 2.0, &c, &c, &SolverOptions::default()).unwrap();
        assert!((v - 4.0).abs() < 1e-14);
        let (rep, _) = compute_capacity(&mesh, &Flux::p_laplacian(2.0).unwrap(), &c, &c, 1.0, &SolverOptions::default()).unwrap();
        assert_eq!(rep.c_inner, v);
    }

    #[test]
    fn distributions_on_annulus() {
        let mesh = Mesh::build(24, 1.0).unwrap();
        let e = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.15), &mesh, "E");
        let f = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.4), &mesh, "F");
        for flux in crate::flux::shipped_family() {
            let (rep, pot) = compute_capacity(&mesh, &flux, &e, &f, 1.0, &SolverOptions::default()).unwrap();
            let pot = pot.unwrap();
            assert!(rep.converged && rep.formulas_agree(), "{}", flux.label());
            let (lambda, nu) = distributions(&mesh, &flux, &pot, &e, &f);
            assert!((lambda.total - rep.c_hat).abs() <= rep.tol_cap);
            assert!((nu.total - rep.c_hat).abs() <= rep.tol_cap);
            let a = audit(&mesh, &flux, &e, &f, &pot, &rep);
            assert!(a.support_on_boundary);
            assert!(a.sign_margin >= -1e-8, "{}: {a:?}", flux.label());
            let bd = discrete_boundary(&e, &mesh).unwrap();
            assert!(lambda.support().all(|k| bd.contains(k)));
        }
    }

    #[test]
    fn negative_level_keeps_measures_nonnegative() {
        let mesh = Mesh::build(16, 1.0).unwrap();
        let e = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.15), &mesh, "E");
        let f = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.4), &mesh, "F");
        let flux = Flux::p_laplacian(3.0).unwrap();
        let (rep, pot) = compute_capacity(&mesh, &flux, &e, &f, -2.0, &SolverOptions::default()).unwrap();
        let (lambda, nu) = distributions(&mesh, &flux, &pot.unwrap(), &e, &f);
        assert!(lambda.min_weight() >= -1e-12 && nu.min_weight() >= -1e-12);
        assert!(rep.c_hat < 0.0);
        assert!((lambda.total + rep.c_hat).abs() < 1e-8);
    }

    #[test]
    fn diameter_matches_brute_force() {
        let mesh = Mesh::build(20, 1.0).unwrap();
        let f = rasterize(
            &ShapeExpr::Union(vec![ShapeExpr::disk(0.3, 0.3, 0.15), ShapeExpr::rect(0.5, 0.6, 0.9, 0.8)]),
            &mesh,
            "F",
        );
        let pts: Vec<_> = f.indices().map(|k| mesh.node(k)).collect();
        let brute = pts
            .iter()
            .flat_map(|a| pts.iter().map(move |b| (a - b).norm()))
            .fold(0.0, f64::max);
        assert!((node_diameter(&mesh, &f) - brute).abs() < 1e-14);
    }

    #[test]
    fn sweep_rejects_unsorted_and_zero_is_zero() {
        let mesh = Mesh::build(12, 1.0).unwrap();
        let e = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.15), &mesh, "E");
        let f = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.4), &mesh, "F");
        let flux = Flux::p_laplacian(3.0).unwrap();
        assert!(sweep_s(&mesh, &flux, &e, &f, &[1.0, 0.5], &SolverOptions::default()).is_err());
        let pts = sweep_s(&mesh, &flux, &e, &f, &[-1.0, 0.0, 1.0, 2.0], &SolverOptions::default()).unwrap();
        assert_eq!(pts[1].c_hat, Some(0.0));
        let c1 = pts[2].c_hat.unwrap();
        assert!((pts[3].c_hat.unwrap() - 4.0 * c1).abs() < 1e-8 * c1);
        assert!((pts[0].c_hat.unwrap() + c1).abs() < 1e-8 * c1);
    }
}

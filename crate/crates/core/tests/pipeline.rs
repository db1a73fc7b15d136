use moncap::capacity::{audit, compute_capacity_with_bounds};
use moncap::flux::skew_example;
use moncap::mesh::{discrete_boundary, rasterize};
use moncap::oracle::{radial_numeric, RadialSpec};
use moncap::properties::{run_flux_gap_study, run_sequence_demo, ChainMode, Geometry};
use moncap::{compute_capacity, distributions, s_transform, sweep_s, Flux, Mesh, ShapeExpr, SolverOptions};

fn annulus(mesh: &Mesh) -> (moncap::NodeSet, moncap::NodeSet) {
    (
        rasterize(&ShapeExpr::disk(0.5, 0.5, 0.125), mesh, "E"),
        rasterize(&ShapeExpr::disk(0.5, 0.5, 0.375), mesh, "F"),
    )
}

#[test]
fn sweep_agrees_with_radial_oracle_of_scaled_flux() {
    let mesh = Mesh::build(64, 1.0).unwrap();
    let (e, f) = annulus(&mesh);
    let flux = Flux::flat_core(3.0, 1.0).unwrap();
    let grid = [-1.5, -0.5, 0.5, 1.0, 2.0];
    let points = sweep_s(&mesh, &flux, &e, &f, &grid, &SolverOptions::default()).unwrap();
    let spec = RadialSpec::new(2, 3.0, 0.125, 0.375).unwrap();
    let oracle = |s: f64| radial_numeric(&spec, &s_transform(&flux, s).unwrap(), 4000).unwrap();
    let grid_at = |s: f64| points.iter().find(|p| p.s == s).unwrap().report.as_ref().unwrap().capacity;
    let (g1, o1) = (grid_at(1.0), oracle(1.0));
    for pt in &points {
        assert!(!pt.failed);
        let (got, want) = (grid_at(pt.s), oracle(pt.s));
        // the inscribed discrete annulus sits below the continuum value at N = 64
        assert!(got < want && got > 0.8 * want, "s={}: {got} vs {want}", pt.s);
        // the s-dependence matches once the common geometric error is divided out
        let (rg, ro) = (got / g1, want / o1);
        assert!((rg - ro).abs() <= 0.08 * ro, "s={}: ratio {rg} vs {ro}", pt.s);
    }
    let c_hat: Vec<f64> = points.iter().map(|p| p.c_hat.unwrap()).collect();
    assert!(c_hat.windows(2).all(|w| w[1] >= w[0] - 1e-9));
}

#[test]
fn distributions_total_the_capacity() {
    let mesh = Mesh::build(32, 1.0).unwrap();
    let (e, f) = annulus(&mesh);
    for flux in [Flux::p_laplacian(1.5).unwrap(), Flux::anisotropic_p(3.0, 1.0, 2.0).unwrap(), skew_example()] {
        for s in [-0.7, 1.3] {
            let (rep, pot) = compute_capacity(&mesh, &flux, &e, &f, s, &SolverOptions::default()).unwrap();
            let pot = pot.unwrap();
            let (lambda, nu) = distributions(&mesh, &flux, &pot, &e, &f);
            // both measures are nonnegative with mass |C(s)/s|
            let c_hat = rep.c_hat.abs();
            assert!((lambda.total - c_hat).abs() <= 1e-6 * (1.0 + c_hat.abs()), "{}", flux.label());
            assert!((nu.total - c_hat).abs() <= 1e-6 * (1.0 + c_hat.abs()), "{}", flux.label());
            assert!(lambda.min_weight() >= -1e-8 * (1.0 + c_hat.abs()));
            assert!(nu.min_weight() >= -1e-8 * (1.0 + c_hat.abs()));
            let bd = discrete_boundary(&e, &mesh).unwrap();
            assert!(lambda.support().all(|k| bd.contains(k)));
            let a = audit(&mesh, &flux, &e, &f, &pot, &rep);
            assert!(a.formulas_agree && a.support_on_boundary, "{a:?}");
        }
    }
}

#[test]
fn bounds_hold_and_are_tight_for_p_laplacian() {
    let mesh = Mesh::build(24, 1.0).unwrap();
    let (e, f) = annulus(&mesh);
    for flux in [Flux::p_laplacian(3.0).unwrap(), Flux::weighted_p_laplacian(2.0, 1.0, 2.0, 1.0).unwrap()] {
        let (rep, _) = compute_capacity_with_bounds(&mesh, &flux, &e, &f, 1.0, &SolverOptions::default()).unwrap();
        let b = rep.bounds.unwrap();
        assert!(b.holds, "{}: {b:?}", flux.label());
        if flux.label().starts_with("p_laplacian") {
            assert!(b.lower_margin.abs() <= 1e-10 * (1.0 + rep.capacity));
        }
    }
}

#[test]
fn increasing_chain_converges_to_union() {
    let mesh = Mesh::build(24, 1.0).unwrap();
    let f = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.42), &mesh, "F");
    let chain: Vec<_> = [0.05, 0.1, 0.15, 0.2]
        .iter()
        .map(|r| rasterize(&ShapeExpr::disk(0.5, 0.5, *r), &mesh, &format!("E{r}")))
        .collect();
    let flux = Flux::p_laplacian(2.0).unwrap();
    let rep = run_sequence_demo(&mesh, &flux, &chain, &ChainMode::IncreasingE { f: f.clone() }, &SolverOptions::default()).unwrap();
    assert!(rep.passed, "{}", rep.summary_line());
    let steps: Vec<_> = rep.records.iter().filter(|r| r.check == "step").collect();
    assert!(steps.iter().all(|r| r.values["after"] > r.values["before"]));

    let e = chain[0].clone();
    let shrinking: Vec<_> = [0.42, 0.35, 0.3]
        .iter()
        .map(|r| rasterize(&ShapeExpr::disk(0.5, 0.5, *r), &mesh, &format!("F{r}")))
        .collect();
    let rep = run_sequence_demo(&mesh, &flux, &shrinking, &ChainMode::DecreasingF { e }, &SolverOptions::default()).unwrap();
    assert!(rep.passed, "{}", rep.summary_line());
    assert!(run_sequence_demo(&mesh, &flux, &shrinking, &ChainMode::IncreasingF { e: chain[0].clone() }, &SolverOptions::default()).is_err());
}

#[test]
fn skew_flux_matches_its_symmetric_part() {
    let geometry = Geometry { e: ShapeExpr::disk(0.5, 0.5, 0.1), f: ShapeExpr::disk(0.5, 0.5, 0.4), l: 1.0 };
    let rep = run_flux_gap_study(&geometry, &skew_example(), &Flux::p_laplacian(2.0).unwrap(), &[8, 16, 32], &SolverOptions::default()).unwrap();
    assert!(rep.passed, "{:?}", rep.trend);
    for r in &rep.records {
        assert!(r.values["gap"] <= 1e-8 * (1.0 + r.values["C_b"]));
    }
}

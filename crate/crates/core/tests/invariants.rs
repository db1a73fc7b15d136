use moncap::assembly::{pairing, residual};
use moncap::flux::{check_conditions, shipped_family};
use moncap::io::config_hash;
use moncap::mesh::{rasterize, Axis, NodeSet, Side};
use moncap::{compute_capacity, s_transform, Flux, Mesh, ShapeExpr, SolverOptions};
use nalgebra::Vector2;
use proptest::prelude::*;

fn coord() -> impl Strategy<Value = f64> {
    (0u32..=16).prop_map(|k| k as f64 / 16.0)
}

fn primitive() -> impl Strategy<Value = ShapeExpr> {
    prop_oneof![
        (coord(), coord(), 0u32..8).prop_map(|(cx, cy, r)| ShapeExpr::disk(cx, cy, r as f64 * 0.07)),
        (coord(), coord(), coord(), coord())
            .prop_map(|(a, b, c, d)| ShapeExpr::rect(a.min(c), b.min(d), a.max(c), b.max(d))),
        (any::<bool>(), coord(), any::<bool>()).prop_map(|(x, t, le)| ShapeExpr::halfplane(
            if x { Axis::X } else { Axis::Y },
            t,
            if le { Side::Le } else { Side::Ge }
        )),
        Just(ShapeExpr::All),
        Just(ShapeExpr::Empty),
    ]
}

fn shape_tree() -> impl Strategy<Value = ShapeExpr> {
    primitive().prop_recursive(4, 24, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..4).prop_map(ShapeExpr::Union),
            prop::collection::vec(inner.clone(), 1..4).prop_map(ShapeExpr::Intersect),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ShapeExpr::Difference(Box::new(a), Box::new(b))),
            inner.prop_map(|a| ShapeExpr::Complement(Box::new(a))),
        ]
    })
}

/// Mask of a shape tree computed from the masks of its children.
fn combined_mask(shape: &ShapeExpr, mesh: &Mesh) -> Vec<bool> {
    let n = mesh.num_nodes();
    match shape {
        ShapeExpr::Union(v) => v.iter().map(|s| combined_mask(s, mesh)).fold(vec![false; n], |acc, m| {
            acc.iter().zip(&m).map(|(a, b)| *a || *b).collect()
        }),
        ShapeExpr::Intersect(v) => v.iter().map(|s| combined_mask(s, mesh)).fold(vec![true; n], |acc, m| {
            acc.iter().zip(&m).map(|(a, b)| *a && *b).collect()
        }),
        ShapeExpr::Difference(a, b) => {
            let (ma, mb) = (combined_mask(a, mesh), combined_mask(b, mesh));
            ma.iter().zip(&mb).map(|(x, y)| *x && !*y).collect()
        }
        ShapeExpr::Complement(a) => combined_mask(a, mesh).iter().map(|x| !x).collect(),
        prim => rasterize(prim, mesh, "p").mask().to_vec(),
    }
}

fn vec2() -> impl Strategy<Value = Vector2<f64>> {
    (-8.0..8.0f64, -8.0..8.0f64).prop_map(|(a, b)| Vector2::new(a, b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rasterize_respects_combinators(shape in shape_tree()) {
        let mesh = Mesh::build(16, 1.0).unwrap();
        let direct = rasterize(&shape, &mesh, "s");
        prop_assert_eq!(direct.mask().to_vec(), combined_mask(&shape, &mesh));
    }

    #[test]
    fn set_algebra_identities(a in shape_tree(), b in shape_tree()) {
        let mesh = Mesh::build(12, 1.0).unwrap();
        let (sa, sb) = (rasterize(&a, &mesh, "A"), rasterize(&b, &mesh, "B"));
        let lhs = sa.union(&sb).unwrap().complement();
        let rhs = sa.complement().intersect(&sb.complement()).unwrap();
        prop_assert!(lhs.same_nodes(&rhs).unwrap());
        let diff = sa.difference(&sb).unwrap();
        prop_assert!(diff.same_nodes(&sa.intersect(&sb.complement()).unwrap()).unwrap());
        prop_assert!(diff.is_subset(&sa).unwrap());
        prop_assert!(sa.intersect(&sb).unwrap().is_subset(&sa.union(&sb).unwrap()).unwrap());
        let back = NodeSet::from_rle(&sa.to_rle()).unwrap();
        prop_assert_eq!(back.mask(), sa.mask());
    }

    #[test]
    fn shipped_fluxes_are_monotone(x in (0.0..1.0f64, 0.0..1.0f64), xi in vec2(), eta in vec2()) {
        let x = Vector2::new(x.0, x.1);
        for flux in shipped_family() {
            let d = (flux.eval(x, xi) - flux.eval(x, eta)).dot(&(xi - eta));
            let scale = 1.0 + xi.norm().powf(flux.p()) + eta.norm().powf(flux.p());
            prop_assert!(d >= -1e-12 * scale, "{}: {d}", flux.label());
        }
    }

    #[test]
    fn s_transform_definition(s in prop_oneof![-3.0..-0.1f64, 0.1..3.0f64], xi in vec2()) {
        let x = Vector2::new(0.3, 0.7);
        for flux in shipped_family() {
            let t = s_transform(&flux, s).unwrap();
            let want = flux.eval(x, xi * s) * s;
            let got = t.eval(x, xi);
            prop_assert!((got - want).norm() <= 1e-12 * (1.0 + want.norm()), "{}", flux.label());
        }
    }

    #[test]
    fn config_hash_is_order_free(keys in prop::collection::btree_map("[a-z]{1,6}", -100i64..100, 1..8)) {
        let forward: serde_json::Map<String, serde_json::Value> =
            keys.iter().map(|(k, v)| (k.clone(), (*v).into())).collect();
        let text_fwd = serde_json::to_string(&forward).unwrap();
        let pairs: Vec<String> = keys.iter().rev().map(|(k, v)| format!("\"{k}\":{v}")).collect();
        let text_rev = format!("{{{}}}", pairs.join(","));
        let a: serde_json::Value = serde_json::from_str(&text_fwd).unwrap();
        let b: serde_json::Value = serde_json::from_str(&text_rev).unwrap();
        prop_assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn residual_is_conservative_and_monotone(
        seed_u in prop::collection::vec(-1.0..1.0f64, 49),
        seed_v in prop::collection::vec(-1.0..1.0f64, 49),
        which in 0usize..7,
    ) {
        let mesh = Mesh::build(6, 1.0).unwrap();
        let flux = &shipped_family()[which];
        let r = residual(&mesh, flux, &seed_u);
        let total: f64 = r.iter().sum();
        let scale: f64 = r.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
        prop_assert!(total.abs() <= 1e-12 * scale);
        let diff: Vec<f64> = seed_u.iter().zip(&seed_v).map(|(a, b)| a - b).collect();
        let mono = pairing(&mesh, flux, &seed_u, &diff) - pairing(&mesh, flux, &seed_v, &diff);
        prop_assert!(mono >= -1e-12, "{}: {mono}", flux.label());
    }

    #[test]
    fn p_laplacian_power_law(s in prop_oneof![-2.5..-0.2f64, 0.2..2.5f64], p in prop::sample::select(vec![1.5, 2.0, 3.0])) {
        let mesh = Mesh::build(12, 1.0).unwrap();
        let e = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.12), &mesh, "E");
        let f = rasterize(&ShapeExpr::disk(0.5, 0.5, 0.4), &mesh, "F");
        let flux = Flux::p_laplacian(p).unwrap();
        let opts = SolverOptions::default();
        let (one, _) = compute_capacity(&mesh, &flux, &e, &f, 1.0, &opts).unwrap();
        let (rep, pot) = compute_capacity(&mesh, &flux, &e, &f, s, &opts).unwrap();
        let want = s.abs().powf(p) * one.capacity;
        prop_assert!((rep.capacity - want).abs() <= 1e-8 * (1.0 + want));
        // potential range within [min(0, s), max(0, s)]
        let u = pot.unwrap().u;
        let (lo, hi) = (s.min(0.0) - 1e-8, s.max(0.0) + 1e-8);
        prop_assert!(u.iter().all(|v| *v >= lo && *v <= hi));
    }
}

#[test]
fn s_transformed_fluxes_pass_checker() {
    for flux in shipped_family() {
        for s in [-2.0, 0.5, 3.0] {
            let t = s_transform(&flux, s).unwrap();
            let rep = check_conditions(&t, 2000, 5.0, 3);
            assert!(rep.all_passed, "{} s={s}: {:?}", flux.label(), rep.conditions);
        }
    }
}

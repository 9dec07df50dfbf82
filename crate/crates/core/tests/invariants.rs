use std::collections::BTreeMap;

use finsler_core::classify::{classify_entry, Verdict};
use finsler_core::expr::{evaluate, parse_metric, substitute, Environment, Expr, Var};
use finsler_core::geometry::{covariant_coefficients, metric_tensor, spray_coefficients, ChartPoint, PointGeometry};
use finsler_core::library::{builtin, builtin_names, LibraryEntry};
use finsler_core::spherical::{polar, sigma};
use proptest::prelude::*;

fn leaf() -> impl Strategy<Value = String> {
    prop_oneof![
        (1usize..=2).prop_map(|i| format!("x{i}")),
        (1usize..=2).prop_map(|i| format!("y{i}")),
        (1u32..20).prop_map(|n| format!("{}", n as f64 / 4.0)),
    ]
}

fn expression() -> impl Strategy<Value = String> {
    leaf().prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} + {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} - {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})*({b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})/(2 + ({b})^2)")),
            (inner.clone(), 1i32..4).prop_map(|(a, n)| format!("({a})^{n}")),
            inner.clone().prop_map(|a| format!("sqrt(1 + ({a})^2)")),
            inner.prop_map(|a| format!("-({a})")),
        ]
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// One valid site of a library metric, chosen by the proptest-drawn seed.
fn site(entry: &LibraryEntry, seed: u64) -> ChartPoint {
    entry.sample(seed, 1).expect("library region yields sites").remove(0)
}

fn entry_strategy() -> impl Strategy<Value = &'static str> {
    proptest::sample::select(builtin_names().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn printing_then_parsing_is_the_identity(text in expression()) {
        let e = parse_metric(&text, 2).unwrap();
        let again = parse_metric(&e.to_string(), 2).unwrap();
        prop_assert_eq!(&again, &e, "printed as {}", e);
    }

    #[test]
    fn substitution_commutes_with_evaluation(
        text in expression(),
        x in prop::array::uniform2(-1.0f64..1.0),
        y in prop::array::uniform2(0.2f64..2.0),
        shift in -0.5f64..0.5,
    ) {
        let e = parse_metric(&text, 2).unwrap();
        let bindings: BTreeMap<Var, Expr> =
            [(Var::x(1), Expr::x(2) + Expr::num(shift)), (Var::y(2), Expr::y(1) * Expr::num(2.0))]
                .into_iter()
                .collect();
        let sub = substitute(&e, &bindings, 2).unwrap();
        let direct = Environment::new(x.to_vec(), y.to_vec()).unwrap();
        let moved = Environment::new(vec![x[1] + shift, x[1]], vec![y[0], 2.0 * y[0]]).unwrap();
        let (a, b) = (evaluate(&sub, &direct), evaluate(&e, &moved));
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!(close(a, b, 1e-12), "{} vs {}", a, b);
        }
    }

    #[test]
    fn spray_and_covariant_coefficients_are_two_homogeneous(
        name in entry_strategy(),
        seed in 0u64..1_000,
        lambda in prop::sample::select(vec![0.5, 2.0, 3.0]),
    ) {
        let entry = builtin(name).unwrap();
        let metric = entry.metric().unwrap();
        let p = site(&entry, seed);
        let q = p.scaled(lambda).unwrap();
        prop_assume!(metric.check_point(&q).is_ok());
        let (g, gq) = (spray_coefficients(&metric, &p).unwrap(), spray_coefficients(&metric, &q).unwrap());
        let (h, hq) = (covariant_coefficients(&metric, &p).unwrap(), covariant_coefficients(&metric, &q).unwrap());
        let l2 = lambda * lambda;
        for i in 0..p.dimension() {
            prop_assert!(close(gq[i], l2 * g[i], 1e-9), "{} G^{}: {} vs {}", name, i + 1, gq[i], l2 * g[i]);
            prop_assert!(close(hq[i], l2 * h[i], 1e-9), "{} H_{}: {} vs {}", name, i + 1, hq[i], l2 * h[i]);
        }
    }

    #[test]
    fn metric_tensor_reproduces_f_squared(name in entry_strategy(), seed in 0u64..1_000) {
        let entry = builtin(name).unwrap();
        let metric = entry.metric().unwrap();
        let p = site(&entry, seed);
        let g = metric_tensor(&metric, &p).unwrap();
        let n = p.dimension();
        let gyy: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| g[[i, j]] * p.y[i] * p.y[j]).sum();
        let f = metric.value(&p).unwrap();
        prop_assert!(close(gyy, f * f, 1e-10), "{}: {} vs {}", name, gyy, f * f);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(g[[i, j]], g[[j, i]]);
            }
        }
    }

    #[test]
    fn cartan_tensor_is_orthogonal_to_y(name in entry_strategy(), seed in 0u64..1_000) {
        let entry = builtin(name).unwrap();
        let p = site(&entry, seed);
        let pg = PointGeometry::new(&entry.metric().unwrap(), &p).unwrap();
        let n = p.dimension();
        let scale = p.y_norm().recip();
        for j in 0..n {
            for k in 0..n {
                let c: f64 = (0..n).map(|i| pg.c3[[i, j, k]] * p.y[i]).sum();
                prop_assert!(c.abs() <= 1e-9 * scale.max(1.0), "{} C_i{}{} y^i = {}", name, j + 1, k + 1, c);
            }
        }
    }

    #[test]
    fn sigma_identities_hold_exactly(
        name in proptest::sample::select(vec!["najafi", "najafi_3d", "najafi_c01", "spherical_generic"]),
        seed in 0u64..1_000,
    ) {
        let entry = builtin(name).unwrap();
        let sm = entry.spherical().expect("profile entry").unwrap();
        let p = site(&entry, seed);
        let (_, r, s) = polar(&p);
        let jet = sm.phi_jet(r, s).unwrap();
        let sg = sigma(&jet);
        prop_assert!(close(s * sg.s2 + sg.s3, 0.0, 1e-12), "{}", s * sg.s2 + sg.s3);
        prop_assert!(close(s * sg.s1 + sg.s2, jet.phi * jet.phi_s, 1e-12));
    }

    #[test]
    fn classification_is_deterministic(name in entry_strategy(), seed in 0u64..10_000) {
        let entry = builtin(name).unwrap();
        let a = classify_entry(&entry, seed, 3, 1e-9).unwrap();
        let b = classify_entry(&entry, seed, 3, 1e-9).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn loosening_tolerance_never_turns_holds_into_fails(
        name in entry_strategy(),
        seed in 0u64..10_000,
        exponent in -12i32..-3,
    ) {
        let entry = builtin(name).unwrap();
        let tight = 10f64.powi(exponent);
        let a = classify_entry(&entry, seed, 3, tight).unwrap();
        let b = classify_entry(&entry, seed, 3, tight * 100.0).unwrap();
        for p in &a.predicates {
            if p.verdict == Verdict::Holds {
                prop_assert_eq!(b.verdict(&p.name), Some(Verdict::Holds), "{} {}", name, p.name);
            }
        }
    }
}

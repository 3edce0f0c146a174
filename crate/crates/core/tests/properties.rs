use amfem_core::adapt::{dorfler_mark_values, fit_rate};
use amfem_core::estimate::{indicators, oscillations, EstimatorKind};
use amfem_core::fem::{solve_problem, SolverKind};
use amfem_core::io::parse_kv;
use amfem_core::mesh::{Domain, Mesh};
use amfem_core::problems::ProblemSpec;
use amfem_core::sparse::CsrMatrix;
use amfem_core::verify::brute_force_min_cardinality;
use proptest::prelude::*;

const DOMAINS: [Domain; 3] = [Domain::UnitSquare, Domain::LShape, Domain::Checkerboard];

/// Applies each round of picks (taken modulo the current element count).
fn refine_by(domain: Domain, rounds: &[Vec<usize>], b: u32) -> Vec<Mesh> {
    let mut meshes = vec![Mesh::create_initial(domain).unwrap()];
    for picks in rounds {
        let m = meshes.last().unwrap();
        let marked: Vec<usize> = picks.iter().map(|p| p % m.n_elements()).collect();
        meshes.push(m.refine(&marked, b).unwrap().mesh);
    }
    meshes
}

fn rounds() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..10_000, 1..6), 1..5)
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..10.0f64], 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_marking_has_minimal_cardinality(eta2 in weights(), theta in 0.05..=1.0f64) {
        let set = dorfler_mark_values(&eta2, theta).unwrap();
        if set.all_zero {
            prop_assert!(set.is_empty());
        } else {
            prop_assert_eq!(set.len(), brute_force_min_cardinality(&eta2, theta));
            prop_assert!(set.marked_sum >= theta * theta * set.total);
        }
    }

    #[test]
    fn marking_grows_with_theta(eta2 in weights(), a in 0.05..=1.0f64, b in 0.05..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = dorfler_mark_values(&eta2, lo).unwrap();
        let large = dorfler_mark_values(&eta2, hi).unwrap();
        prop_assert!(small.ids.iter().all(|t| large.ids.contains(t)));
    }

    #[test]
    fn refinement_is_conforming_and_area_preserving(d in 0usize..3, rounds in rounds(), b in 1u32..=3) {
        let meshes = refine_by(DOMAINS[d], &rounds, b);
        let area0 = meshes[0].total_area();
        for pair in meshes.windows(2) {
            let fine = &pair[1];
            prop_assert!(fine.check_conformity().is_ok());
            prop_assert!((fine.total_area() - area0).abs() <= 1e-12 * area0);
            prop_assert!(fine.ancestor_map(&pair[0]).is_ok());
        }
    }

    #[test]
    fn marked_elements_are_refined(d in 0usize..3, rounds in rounds(), picks in prop::collection::vec(0usize..10_000, 1..8), b in 1u32..=3) {
        let m = refine_by(DOMAINS[d], &rounds, 1).pop().unwrap();
        let marked: Vec<usize> = picks.iter().map(|p| p % m.n_elements()).collect();
        let r = m.refine(&marked, b).unwrap();
        for t in &marked {
            prop_assert!(r.refined_set.binary_search(t).is_ok());
        }
        for (fine, &coarse) in r.parent.iter().enumerate() {
            let (fk, ck) = (r.mesh.key(fine), m.key(coarse));
            prop_assert!(fk == ck || ck.is_ancestor_of(&fk));
            if marked.contains(&coarse) {
                prop_assert!(fk.depth() >= ck.depth() + b);
            }
        }
    }

    #[test]
    fn overlay_is_bounded_by_the_sum(d in 0usize..3, r1 in rounds(), r2 in rounds()) {
        let a = refine_by(DOMAINS[d], &r1, 1).pop().unwrap();
        let b = refine_by(DOMAINS[d], &r2, 1).pop().unwrap();
        let n0 = Mesh::create_initial(DOMAINS[d]).unwrap().n_elements();
        let o = a.overlay(&b).unwrap();
        prop_assert!(o.n_elements() + n0 <= a.n_elements() + b.n_elements());
        prop_assert!(o.ancestor_map(&a).is_ok() && o.ancestor_map(&b).is_ok());
        prop_assert_eq!(o.to_text(), b.overlay(&a).unwrap().to_text());
    }

    #[test]
    fn mesh_text_round_trip(d in 0usize..3, rounds in rounds(), b in 1u32..=2) {
        let m = refine_by(DOMAINS[d], &rounds, b).pop().unwrap();
        let back = Mesh::from_text(&m.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), m.to_text());
        prop_assert_eq!(back.vertices(), m.vertices());
    }

    #[test]
    fn csr_matches_dense(entries in prop::collection::vec((0usize..6, 0usize..5, -5.0..5.0f64), 0..40), x in prop::collection::vec(-2.0..2.0f64, 5)) {
        let a = CsrMatrix::from_triplets(6, 5, entries.clone());
        let mut dense = [[0.0; 5]; 6];
        for &(i, j, v) in &entries {
            dense[i][j] += v;
        }
        let y = a.mul_vec(&x);
        for i in 0..6 {
            let expect: f64 = (0..5).map(|j| dense[i][j] * x[j]).sum();
            prop_assert!((y[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn rate_fit_recovers_power_laws(s in 0.1..1.5f64, c in 0.1..10.0f64) {
        let series: Vec<(usize, f64)> = (1..10).map(|k| (2 + (1usize << k), c * ((1usize << k) as f64).powf(-s))).collect();
        let fit = fit_rate(&series, 2, 0).unwrap();
        prop_assert!((fit.s - s).abs() < 1e-9);
        prop_assert!(fit.lower <= fit.s && fit.s <= fit.upper);
    }

    #[test]
    fn kv_parser_keeps_values(pairs in prop::collection::btree_map("[a-z][a-z0-9_]{0,8}", "[A-Za-z0-9.+-]{1,12}", 0..10)) {
        let text: String = pairs.iter().map(|(k, v)| format!("  {k} = {v}  # note\n")).collect();
        let parsed = parse_kv(&text).unwrap();
        prop_assert_eq!(parsed.len(), pairs.len());
        for (k, v) in &pairs {
            prop_assert_eq!(&parsed[k], v);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn discrete_balance_and_nonnegative_indicators(p in 0usize..4, rounds in rounds(), b in 1u32..=2) {
        let name = ["square_sine", "square_pwconst", "lshape_singular", "checkerboard"][p];
        let problem = ProblemSpec::builtin(name).unwrap();
        let mesh = refine_by(problem.domain, &rounds, b).pop().unwrap();
        let sol = solve_problem(&mesh, &problem, SolverKind::Direct).unwrap();
        let scale = 1.0 + sol.f_h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let div = sol.div_p(&mesh);
        for (d, f) in div.iter().zip(&sol.f_h) {
            prop_assert!((d + f).abs() <= 1e-9 * scale);
        }
        for kind in [EstimatorKind::Stress, EstimatorKind::Full { kappa: 0.5 }] {
            let ind = indicators(&mesh, &sol, &problem, kind).unwrap();
            prop_assert!(ind.locals().iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
        let osc = oscillations(&mesh, &sol, &problem).unwrap();
        let ind = indicators(&mesh, &sol, &problem, EstimatorKind::Stress).unwrap();
        for t in 0..mesh.n_elements() {
            prop_assert!(osc.local(t) <= ind.local(t) * (1.0 + 1e-12) + 1e-300);
        }
    }
}

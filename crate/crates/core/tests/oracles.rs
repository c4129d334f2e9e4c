use anchored_cil::linalg::{sym_eig, Matrix, SeededRng};
use anchored_cil::routing::{
    cost_matrix, entropy, sinkhorn_with_cost, DiscreteMeasure, OtParams, RoutingDistribution,
};
use anchored_cil::sphere::{exp_map, geodesic_distance, log_map, TangentVector, UnitVector};
use anchored_cil::verify::{
    coupling_battery, dirac_battery, eig_battery, gradient_battery, householder_tridiagonal, lipschitz_battery,
    oracle_eig, sturm_eigenvalues,
};
use proptest::prelude::*;

fn toeplitz(n: usize) -> Matrix<f64> {
    Matrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => 2.0,
        1 => -1.0,
        _ => 0.0,
    })
}

#[test]
fn both_eigensolvers_reproduce_the_discrete_laplacian_spectrum() {
    let n = 12;
    let a = toeplitz(n);
    let mut want: Vec<f64> = (1..=n)
        .map(|k| 2.0 - 2.0 * (k as f64 * std::f64::consts::PI / (n as f64 + 1.0)).cos())
        .collect();
    want.sort_by(|x, y| y.total_cmp(x));
    let (d, e) = householder_tridiagonal(&a);
    let sturm = sturm_eigenvalues(&d, &e);
    let jacobi = sym_eig(&a).unwrap().values;
    for i in 0..n {
        assert!((sturm[i] - want[i]).abs() < 1e-12);
        assert!((jacobi[i] - want[i]).abs() < 1e-12);
    }
    let (_, v) = oracle_eig(&a, 1, &mut SeededRng::new(1)).unwrap();
    // Top eigenvector: sin(k n π / (n+1)) pattern for k = n.
    let top: Vec<f64> = (1..=n)
        .map(|j| (j as f64 * n as f64 * std::f64::consts::PI / (n as f64 + 1.0)).sin())
        .collect();
    let cos = anchored_cil::linalg::cosine(&top, &v.column(0)).abs();
    assert!((cos - 1.0).abs() < 1e-10);
}

#[test]
fn pga_anchors_match_the_eigen_oracle() {
    for b in eig_battery(25, &mut SeededRng::new(20)).unwrap() {
        assert!(b.ok(), "{b:?}");
    }
}

/// Golden-section minimisation of the 2×2 entropic objective over the single
/// free coordinate `t = π₀₀`.
fn golden_2x2(a: [f64; 2], b: [f64; 2], c: &Matrix<f64>, eps: f64) -> f64 {
    let f = |t: f64| {
        let p = [t, a[0] - t, b[0] - t, a[1] - b[0] + t];
        let mut v = 0.0;
        for (k, &x) in p.iter().enumerate() {
            v += x * c[(k / 2, k % 2)] + if x > 0.0 { eps * x * x.ln() } else { 0.0 };
        }
        v
    };
    let (mut lo, mut hi) = ((b[0] - a[1]).max(0.0), a[0].min(b[0]));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let x1 = hi - g * (hi - lo);
        let x2 = lo + g * (hi - lo);
        if f(x1) < f(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    f(0.5 * (lo + hi))
}

#[test]
fn sinkhorn_2x2_matches_golden_section() {
    let mut rng = SeededRng::new(21);
    for _ in 0..200 {
        let a0 = rng.uniform_range(0.05, 0.95);
        let b0 = rng.uniform_range(0.05, 0.95);
        let c = Matrix::from_fn(2, 2, |_, _| rng.uniform_range(0.0, 2.0));
        let eps = rng.uniform_range(0.05, 1.0);
        let params = OtParams {
            epsilon: eps,
            max_iter: 100_000,
            marginal_tol: 1e-13,
            ..OtParams::default()
        };
        let sol = sinkhorn_with_cost(&[a0, 1.0 - a0], &[b0, 1.0 - b0], &c, &params).unwrap();
        let want = golden_2x2([a0, 1.0 - a0], [b0, 1.0 - b0], &c, eps);
        assert!((sol.cost - want).abs() < 1e-9, "{} vs {want}", sol.cost);
    }
}

#[test]
fn sinkhorn_4x4_matches_coupling_newton() {
    let b = coupling_battery(40, &mut SeededRng::new(22)).unwrap();
    assert!(b.ok(), "{b:?}");
}

#[test]
fn dirac_source_closed_form_and_marginals() {
    for b in dirac_battery(300, &mut SeededRng::new(23)).unwrap() {
        assert!(b.ok(), "{b:?}");
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    for b in gradient_battery(15, &mut SeededRng::new(24)).unwrap() {
        assert!(b.ok(), "{b:?}");
    }
}

#[test]
fn routing_score_is_one_lipschitz() {
    let b = lipschitz_battery(20, 50, &mut SeededRng::new(25)).unwrap();
    assert!(b.ok(), "{b:?}");
}

fn unit(v: Vec<f64>) -> Option<UnitVector<f64>> {
    UnitVector::new(v).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn log_exp_round_trip(mu in prop::collection::vec(-1.0f64..1.0, 6), x in prop::collection::vec(-1.0f64..1.0, 6)) {
        let (Some(mu), Some(x)) = (unit(mu), unit(x)) else { return Ok(()) };
        prop_assume!(geodesic_distance(&mu, &x) < 3.1);
        let u = log_map(&mu, &x).unwrap();
        prop_assert!(anchored_cil::linalg::dot(mu.as_slice(), u.direction()).abs() < 1e-12);
        let back = exp_map(&mu, &u).unwrap();
        let err: f64 = back.as_slice().iter().zip(x.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
    }

    #[test]
    fn exp_map_stays_on_sphere(mu in prop::collection::vec(-1.0f64..1.0, 5), v in prop::collection::vec(-1.0f64..1.0, 5)) {
        let Some(mu) = unit(mu) else { return Ok(()) };
        let u = TangentVector::project(&mu, &v).unwrap();
        prop_assume!(u.norm() < 3.0);
        let y = exp_map(&mu, &u).unwrap();
        prop_assert!((anchored_cil::linalg::norm(y.as_slice()) - 1.0).abs() < 1e-12);
        prop_assert!((geodesic_distance(&mu, &y) - u.norm()).abs() < 1e-7);
    }

    #[test]
    fn cost_entries_lie_in_range(a in prop::collection::vec(-1.0f64..1.0, 12), b in prop::collection::vec(-1.0f64..1.0, 12)) {
        let atoms = |v: &[f64]| -> Vec<UnitVector<f64>> { v.chunks(3).filter_map(|c| unit(c.to_vec())).collect() };
        let (sa, sb) = (atoms(&a), atoms(&b));
        prop_assume!(!sa.is_empty() && !sb.is_empty());
        let c = cost_matrix(&DiscreteMeasure::uniform(sa).unwrap(), &DiscreteMeasure::uniform(sb).unwrap()).unwrap();
        prop_assert!(c.as_slice().iter().all(|&x| (0.0..=2.0).contains(&x)));
    }

    #[test]
    fn boltzmann_is_a_distribution(costs in prop::collection::vec(-5.0f64..5.0, 1..8), tau in 0.01f64..2.0) {
        let r = RoutingDistribution::boltzmann(&costs, tau).unwrap();
        let s: f64 = r.probs().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        let cheapest = costs.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        prop_assert!(r.probs()[r.argmax()] >= r.probs()[cheapest] - 1e-15);
    }

    #[test]
    fn entropy_is_bounded_by_log_n(w in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let s: f64 = w.iter().sum();
        prop_assume!(s > 1e-6);
        let p: Vec<f64> = w.iter().map(|x| x / s).collect();
        let h = entropy(&p);
        prop_assert!(h >= -1e-15 && h <= (p.len() as f64).ln() + 1e-12);
    }
}

//! Property tests against test-side oracles.

use approx::assert_relative_eq;
use gpc_ddp::cost::{embed_goal, Cost, Goal, QuadraticGpcCost};
use gpc_ddp::ddp::{solve, DdpOptions, Termination};
use gpc_ddp::discretize::{Discretization, EulerGpc, FdLinearized, LinearStep};
use gpc_ddp::gpc::{moments, Distribution, GpcModel, QuadratureLevel};
use gpc_ddp::models::Duffing;
use gpc_ddp::orthopoly::{eval_poly, gauss_rule, multi_indices, PolyFamily, PolynomialBasis};
use gpc_ddp::verify::{mc_propagate, McConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn family() -> impl Strategy<Value = PolyFamily> {
    prop_oneof![Just(PolyFamily::HermiteProbabilists), Just(PolyFamily::Legendre)]
}

/// `∫ φ_n² ρ` with the unnormalized weights (Gaussian density, unit on [-1, 1]).
fn norm_oracle(f: PolyFamily, n: usize) -> f64 {
    match f {
        PolyFamily::HermiteProbabilists => (1..=n).map(|v| v as f64).product(),
        PolyFamily::Legendre => 2.0 / (2.0 * n as f64 + 1.0),
    }
}

fn mass_oracle(f: PolyFamily) -> f64 {
    match f {
        PolyFamily::HermiteProbabilists => 1.0,
        PolyFamily::Legendre => 2.0,
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn distribution() -> impl Strategy<Value = Distribution> {
    prop_oneof![
        (-5.0..5.0f64, 0.01..1.0f64).prop_map(|(mean, std)| Distribution::Gaussian { mean, std }),
        (-5.0..5.0f64, 0.01..2.0f64).prop_map(|(min, w)| Distribution::Uniform { min, max: min + w }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polynomials_are_orthogonal(f in family(), i in 0usize..=8, j in 0usize..=8) {
        let rule = gauss_rule(f, 9).unwrap();
        let got = rule.integrate(|x| eval_poly(f, i, x) * eval_poly(f, j, x));
        let want = if i == j { norm_oracle(f, i) } else { 0.0 };
        assert_relative_eq!(got, want, epsilon = 1e-9, max_relative = 1e-11);
    }

    #[test]
    fn multi_index_count_and_grading(d in 1usize..=4, r in 0usize..=4) {
        let set = multi_indices(d, r);
        prop_assert_eq!(set.len(), binomial(d + r, r));
        let degrees: Vec<usize> = set.iter().map(|t| t.iter().sum()).collect();
        prop_assert!(degrees.iter().all(|&g| g <= r));
        prop_assert!(degrees.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(set.get(0).iter().sum::<usize>(), 0);
    }

    #[test]
    fn moments_match_norm_oracle(
        fams in prop::collection::vec(family(), 1..=3),
        r in 1usize..=3,
        seed in prop::collection::vec(-2.0..2.0f64, 64),
    ) {
        let basis = PolynomialBasis::new(fams.clone(), fams.len(), r).unwrap();
        let k = basis.len();
        let x = DVector::from_fn(2 * k, |a, _| seed[a % seed.len()] * (1.0 + a as f64 / 7.0));
        let [mean, var, _] = moments(&x, &basis);
        for i in 0..2 {
            let mut v = 0.0;
            for (j, t) in basis.indices().iter().enumerate().skip(1) {
                let e: f64 = t.iter().zip(&fams).map(|(&deg, &f)| norm_oracle(f, deg) / mass_oracle(f)).product();
                v += x[i * k + j].powi(2) * e;
            }
            assert_relative_eq!(mean[i], x[i * k], max_relative = 1e-14);
            assert_relative_eq!(var[i], v, max_relative = 1e-12);
        }
    }

    #[test]
    fn projected_inputs_keep_their_moments(lambda in distribution(), x1 in distribution(), x2 in distribution()) {
        let model = Duffing { lambda, x1_0: x1, x2_0: x2 };
        let g = GpcModel::new(model, 2, QuadratureLevel::Auto).unwrap();
        let [mean, var, _] = moments(&g.initial_coefficients().unwrap(), g.basis());
        for (i, d) in [x1, x2].iter().enumerate() {
            let (m, v) = match *d {
                Distribution::Gaussian { mean, std } => (mean, std * std),
                Distribution::Uniform { min, max } => (0.5 * (min + max), (max - min).powi(2) / 12.0),
                Distribution::Deterministic(c) => (c, 0.0),
            };
            assert_relative_eq!(mean[i], m, epsilon = 1e-12);
            assert_relative_eq!(var[i], v, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn quadratic_cost_is_nonnegative_and_rescaling_invariant(
        xs in prop::collection::vec(-3.0..3.0f64, 6),
        scales in prop::collection::vec(0.1..4.0f64, 6),
        w in prop::collection::vec(0.0..5.0f64, 2),
        u in -2.0..2.0f64,
    ) {
        let basis = PolynomialBasis::new(vec![PolyFamily::HermiteProbabilists, PolyFamily::Legendre], 1, 1).unwrap();
        let s = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        let r = DMatrix::from_element(1, 1, 0.3);
        let goal = Goal::Constant(embed_goal(&[1.0, -0.5], &basis));
        let cost = QuadraticGpcCost::expected_quadratic(&s, &s, &r, goal, 4, 0.1, &basis).unwrap();
        let x = DVector::from_vec(xs);
        let uv = DVector::from_element(1, u);
        prop_assert!(cost.stage_value(0, &x, &uv) >= 0.0);
        prop_assert!(cost.terminal_value(&x) >= 0.0);
        let at_goal = embed_goal(&[1.0, -0.5], &basis);
        prop_assert_eq!(cost.terminal_value(&at_goal), 0.0);

        let c = DVector::from_vec(scales);
        let scaled = cost.rescaled(&c).unwrap();
        let y = x.component_div(&c);
        assert_relative_eq!(scaled.stage_value(1, &y, &uv), cost.stage_value(1, &x, &uv), max_relative = 1e-12, epsilon = 1e-14);
        assert_relative_eq!(scaled.terminal_value(&y), cost.terminal_value(&x), max_relative = 1e-12, epsilon = 1e-14);
    }

    #[test]
    fn euler_jacobian_agrees_with_differences(
        perturb in prop::collection::vec(-0.3..0.3f64, 20),
        u in -5.0..5.0f64,
    ) {
        let g = GpcModel::new(Duffing::default(), 3, QuadratureLevel::Auto).unwrap();
        let euler = EulerGpc::new(&g, 0.01).unwrap();
        let x = g.initial_coefficients().unwrap() + DVector::from_vec(perturb);
        let uv = DVector::from_element(1, u);
        let analytic = euler.linearize(0, &x, &uv, false).unwrap();
        let fd = FdLinearized { inner: &euler, h: 1e-5 }.linearize(0, &x, &uv, false).unwrap();
        prop_assert!((&analytic.theta - &fd.theta).amax() < 1e-7);
        prop_assert!((&analytic.b - &fd.b).amax() < 1e-9);
    }

    #[test]
    fn ddp_solves_linear_quadratic_in_one_step(
        a in prop::collection::vec(-0.5..0.5f64, 4),
        b in prop::collection::vec(0.2..1.0f64, 2),
        x0 in prop::collection::vec(-2.0..2.0f64, 2),
    ) {
        let sys = LinearStep {
            a: DMatrix::identity(2, 2) + DMatrix::from_vec(2, 2, a) * 0.1,
            b: DMatrix::from_vec(2, 1, b) * 0.1,
        };
        let basis = PolynomialBasis::deterministic();
        let cost = QuadraticGpcCost::weighted(
            &[vec![1.0], vec![1.0]],
            &[vec![10.0], vec![10.0]],
            &DMatrix::from_element(1, 1, 0.1),
            Goal::Constant(DVector::zeros(2)),
            20,
            0.1,
            &basis,
        )
        .unwrap();
        let sol = solve(&sys, &cost, &DVector::from_vec(x0), vec![DVector::zeros(1); 20], &DdpOptions::default()).unwrap();
        prop_assert_eq!(sol.termination, Termination::Converged);
        prop_assert!(sol.cost_history.windows(2).all(|w| w[1] <= w[0]));
        // after the first accepted step nothing moves
        let d = sol.control_distances();
        prop_assert!(d[1] < 1e-8 * (1.0 + d[0]));
    }
}

#[test]
fn monte_carlo_is_independent_of_thread_count() {
    let model = Duffing::default();
    let controls = vec![DVector::from_element(1, 0.5); 40];
    let cfg = McConfig {
        n_samples: 2000,
        seed: 11,
        ..McConfig::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| mc_propagate(&model, &controls, 0.01, &cfg).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one.n_samples, 2000);
}

#[test]
fn monte_carlo_recovers_initial_distribution() {
    let model = Duffing::default();
    let est = mc_propagate(&model, &[DVector::zeros(1)], 0.01, &McConfig { n_samples: 20_000, ..McConfig::default() }).unwrap();
    let (lo, hi) = (est.mean[0][0] - 4.0 * est.se_mean[0][0], est.mean[0][0] + 4.0 * est.se_mean[0][0]);
    assert!(lo < 4.0 && 4.0 < hi, "MC mean {} ± {}", est.mean[0][0], est.se_mean[0][0]);
    assert!((est.variance[0][0] - 0.0064).abs() < 4.0 * est.se_variance[0][0]);
    assert_eq!(est.variance[0][1], 0.0);
}

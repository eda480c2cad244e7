//! Finite-difference checks of every analytic derivative the solver uses.

use gpc_ddp::discretize::{DelGpc, Discretization, EulerGpc};
use gpc_ddp::gpc::{GpcModel, QuadratureLevel};
use gpc_ddp::models::{Duffing, Quadrotor};
use gpc_ddp::verify::{check_directional_second, check_jacobian, FD_STEPS};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FIRST_TOL: f64 = 1e-5;
const SECOND_TOL: f64 = 1e-4;
const SECOND_STEPS: [f64; 4] = [1e-2, 3e-3, 1e-3, 3e-4];

fn duffing() -> GpcModel<Duffing> {
    GpcModel::new(Duffing::default(), 3, QuadratureLevel::Auto).unwrap()
}

fn quadrotor() -> GpcModel<Quadrotor> {
    GpcModel::new(Quadrotor::default(), 2, QuadratureLevel::Fixed(3)).unwrap()
}

fn jitter(x: &DVector<f64>, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    x.map(|v| v + scale * rng.random_range(-1.0..1.0))
}

fn random_dir(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    d.normalize()
}

/// `x` with every angle and rate coefficient nudged so all couplings are active.
fn quadrotor_point(g: &GpcModel<Quadrotor>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let x0 = g.initial_coefficients().unwrap();
    jitter(&x0, 0.05, rng)
}

fn split<D: Discretization>(disc: &D) -> (usize, impl Fn(&DVector<f64>) -> DVector<f64> + '_) {
    let n = disc.state_dim();
    let m = disc.control_dim();
    (n, move |w: &DVector<f64>| {
        disc.step(0, &w.rows(0, n).into_owned(), &w.rows(n, m).into_owned()).unwrap()
    })
}

fn check_first_order<D: Discretization>(disc: &D, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let lin = disc.linearize(0, x, u, false).unwrap();
    let (n, f) = split(disc);
    let w = DVector::from_iterator(n + u.len(), x.iter().chain(u.iter()).copied());
    let mut analytic = DMatrix::zeros(n, n + u.len());
    analytic.view_mut((0, 0), (n, n)).copy_from(&lin.theta);
    analytic.view_mut((0, n), (n, u.len())).copy_from(&lin.b);
    check_jacobian(f, &w, &analytic, &FD_STEPS).max_rel_error
}

/// Worst error of `vᵀ d²F/ds²` along random directions against the
/// contracted second-order terms.
fn check_contracted_second<D: Discretization>(disc: &D, x: &DVector<f64>, u: &DVector<f64>, dirs: usize, rng: &mut ChaCha8Rng) -> f64 {
    let lin = disc.linearize(0, x, u, true).unwrap();
    let second = lin.second.unwrap();
    let (n, f) = split(disc);
    let m = u.len();
    let w = DVector::from_iterator(n + m, x.iter().chain(u.iter()).copied());
    let mut worst = 0.0f64;
    for _ in 0..dirs {
        let v = random_dir(n, rng);
        let d = random_dir(n + m, rng);
        let (dx, du) = (d.rows(0, n).into_owned(), d.rows(n, m).into_owned());
        let c = second.contract(&v);
        let analytic = dx.dot(&(&c.xx * &dx)) + 2.0 * dx.dot(&(&c.xu * &du)) + du.dot(&(&c.uu * &du));
        let g = |y: &DVector<f64>| DVector::from_element(1, v.dot(&f(y)));
        let r = check_directional_second(g, &w, &d, &DVector::from_element(1, analytic), &SECOND_STEPS);
        worst = worst.max(r.max_rel_error);
    }
    worst
}

/// Same as [`check_contracted_second`] but through the dense `Γ, Δ, Ξ, Λ`.
fn check_dense_second<D: Discretization>(disc: &D, x: &DVector<f64>, u: &DVector<f64>, dirs: usize, rng: &mut ChaCha8Rng) -> f64 {
    let lin = disc.linearize(0, x, u, true).unwrap();
    let t = lin.second.unwrap().tensors();
    let (n, f) = split(disc);
    let m = u.len();
    let w = DVector::from_iterator(n + m, x.iter().chain(u.iter()).copied());
    let mut worst = 0.0f64;
    for _ in 0..dirs {
        let d = random_dir(n + m, rng);
        let (dx, du) = (d.rows(0, n).into_owned(), d.rows(n, m).into_owned());
        let analytic = t.gamma.bilinear(&dx, &dx) + t.delta.bilinear(&dx, &du) + t.xi.bilinear(&du, &dx) + t.lambda.bilinear(&du, &du);
        let r = check_directional_second(&f, &w, &d, &analytic, &SECOND_STEPS);
        worst = worst.max(r.max_rel_error);
    }
    worst
}

#[test]
fn duffing_galerkin_jacobian_and_hessian() {
    let g = duffing();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = jitter(&g.initial_coefficients().unwrap(), 0.1, &mut rng);
    let u = DVector::from_vec(vec![1.3]);
    let (fx, fu) = g.gpc_jacobian(&x, &u, 0.0).unwrap();
    let n = x.len();
    let w = DVector::from_iterator(n + 1, x.iter().chain(u.iter()).copied());
    let f = |w: &DVector<f64>| g.galerkin_rhs(&w.rows(0, n).into_owned(), &w.rows(n, 1).into_owned(), 0.0).unwrap();
    let mut analytic = DMatrix::zeros(n, n + 1);
    analytic.view_mut((0, 0), (n, n)).copy_from(&fx);
    analytic.view_mut((0, n), (n, 1)).copy_from(&fu);
    assert!(check_jacobian(f, &w, &analytic, &FD_STEPS).max_rel_error < FIRST_TOL);

    let euler = EulerGpc::new(&g, 0.01).unwrap();
    assert!(check_first_order(&euler, &x, &u) < 1e-6);
    assert!(check_dense_second(&euler, &x, &u, 20, &mut rng) < SECOND_TOL);
}

#[test]
fn quadrotor_galerkin_jacobian_and_hessian() {
    let g = quadrotor();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = quadrotor_point(&g, &mut rng);
    let u = DVector::from_vec(vec![0.09, 0.1, 0.095, 0.085]);
    let euler = EulerGpc::new(&g, 0.02).unwrap();
    assert!(check_first_order(&euler, &x, &u) < FIRST_TOL);
    assert!(check_contracted_second(&euler, &x, &u, 10, &mut rng) < SECOND_TOL);
}

#[test]
fn duffing_del_linearization() {
    let g = duffing();
    let del = DelGpc::new(&g, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = jitter(&g.initial_coefficients().unwrap(), 0.1, &mut rng);
    let z = del.state_from_coefficients(&x);
    let u = DVector::from_vec(vec![0.8]);
    assert!(check_first_order(&del, &z, &u) < FIRST_TOL);
    assert!(check_dense_second(&del, &z, &u, 20, &mut rng) < SECOND_TOL);
    assert!(check_contracted_second(&del, &z, &u, 20, &mut rng) < SECOND_TOL);
}

#[test]
fn quadrotor_del_linearization() {
    let g = quadrotor();
    let del = DelGpc::new(&g, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = quadrotor_point(&g, &mut rng);
    let z = del.state_from_coefficients(&x);
    let u = DVector::from_vec(vec![0.09, 0.1, 0.095, 0.085]);
    assert!(check_first_order(&del, &z, &u) < FIRST_TOL);
    assert!(check_contracted_second(&del, &z, &u, 10, &mut rng) < SECOND_TOL);
}

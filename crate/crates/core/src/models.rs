//! Stochastic dynamical systems.
//!
//! A model is written once, generic over [`Scalar`], so the same equations
//! give values and (through nested dual numbers) exact derivatives. Models
//! carry the distributions of their uncertain parameters and initial state;
//! the gPC layer decides how those map onto random dimensions.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{self, Dual, Scalar, VectorFn};
use crate::error::{Error, Result};
use crate::gpc::Distribution;
use crate::orthopoly::PolynomialBasis;
use crate::tensor::Tensor3;

/// `ẋ = f(x, u, t; λ)` with distributions for `λ` and `x(t₀)`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn param_distributions(&self) -> Vec<Distribution>;
    fn initial_distributions(&self) -> Vec<Distribution>;

    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], t: f64, params: &[f64]) -> Vec<S>;

    /// Total polynomial degree of `f` in `(x, λ)` when `f` is a polynomial.
    /// Lets the cubature pick an exact node count.
    fn polynomial_degree(&self) -> Option<usize> {
        None
    }

    /// Rejects states outside the region where the equations are valid.
    fn validate_state(&self, _x: &[f64]) -> Result<()> {
        Ok(())
    }

    fn param_dim(&self) -> usize {
        self.param_distributions().len()
    }

    /// `[∇_x f | ∇_u f]`, shape `n × (n+m)`.
    fn jacobian(&self, x: &[f64], u: &[f64], t: f64, params: &[f64]) -> DMatrix<f64> {
        autodiff::jacobian(&RhsFn::new(self, t, params), &concat(x, u))
    }

    /// `H[i, a, b] = ∂²f_i/∂z_a∂z_b` over `z = (x, u)`.
    fn hessian(&self, x: &[f64], u: &[f64], t: f64, params: &[f64]) -> Tensor3 {
        autodiff::hessian(&RhsFn::new(self, t, params), &concat(x, u))
    }
}

/// Systems with a Lagrangian description; the state is `x = (q, q̇)`.
pub trait Mechanical: Dynamics {
    fn config_dim(&self) -> usize;
    fn lagrangian<S: Scalar>(&self, q: &[S], v: &[S], params: &[f64]) -> S;
    /// Generalized non-conservative force.
    fn force<S: Scalar>(&self, q: &[S], v: &[S], u: &[S], params: &[f64]) -> Vec<S>;
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// Adapter exposing `f(x, u)` as a function of the stacked vector `(x, u)`.
pub struct RhsFn<'a, M: ?Sized> {
    model: &'a M,
    t: f64,
    params: &'a [f64],
}

impl<'a, M: Dynamics + ?Sized> RhsFn<'a, M> {
    pub fn new(model: &'a M, t: f64, params: &'a [f64]) -> Self {
        Self { model, t, params }
    }
}

impl<M: Dynamics + ?Sized> VectorFn for RhsFn<'_, M> {
    fn input_dim(&self) -> usize {
        self.model.state_dim() + self.model.control_dim()
    }
    fn output_dim(&self) -> usize {
        self.model.state_dim()
    }
    fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let n = self.model.state_dim();
        self.model.rhs(&z[..n], &z[n..], self.t, self.params)
    }
}

/// Acceleration from the Euler–Lagrange equations,
/// `q̈ = M⁻¹(F + ∂L/∂q − (∂²L/∂q̇∂q) q̇)`, with every partial taken by AD.
pub fn euler_lagrange_acceleration<M: Mechanical + ?Sized>(
    mech: &M,
    q: &[f64],
    v: &[f64],
    u: &[f64],
    params: &[f64],
) -> Result<DVector<f64>> {
    let nq = mech.config_dim();
    let lag = LagrangianFn { mech, params };
    let z = concat(q, v);
    let grad = autodiff::jacobian(&lag, &z);
    let hess = autodiff::hessian(&lag, &z).slab(0);
    let mass = hess.view((nq, nq), (nq, nq)).into_owned();
    let mixed = hess.view((nq, 0), (nq, nq)).into_owned();
    let force = DVector::from_vec(mech.force(q, v, u, params));
    let vv = DVector::from_column_slice(v);
    let dl_dq = DVector::from_fn(nq, |i, _| grad[(0, i)]);
    let rhs = force + dl_dq - mixed * vv;
    mass.lu().solve(&rhs).ok_or(Error::Singular("mass matrix"))
}

/// `L(q, v)` as a scalar function of `(q, v)`.
pub struct LagrangianFn<'a, M: ?Sized> {
    pub mech: &'a M,
    pub params: &'a [f64],
}

impl<M: Mechanical + ?Sized> VectorFn for LagrangianFn<'_, M> {
    fn input_dim(&self) -> usize {
        2 * self.mech.config_dim()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let nq = self.mech.config_dim();
        vec![self.mech.lagrangian(&z[..nq], &z[nq..], self.params)]
    }
}

/// Mass matrix `∂²L/∂q̇²` at `(q, v)`.
pub fn mass_matrix<M: Mechanical + ?Sized>(mech: &M, q: &[f64], v: &[f64], params: &[f64]) -> DMatrix<f64> {
    let nq = mech.config_dim();
    let h = autodiff::hessian(&LagrangianFn { mech, params }, &concat(q, v)).slab(0);
    h.view((nq, nq), (nq, nq)).into_owned()
}

// ---------------------------------------------------------------------------
// Duffing oscillator

/// `ẋ₁ = x₂`, `ẋ₂ = −λx₁ − x₂/4 − x₁³ + u`.
#[derive(Clone, Debug)]
pub struct Duffing {
    pub lambda: Distribution,
    pub x1_0: Distribution,
    pub x2_0: Distribution,
}

impl Default for Duffing {
    fn default() -> Self {
        Self {
            lambda: Distribution::Gaussian { mean: 3.0, std: 0.1 },
            x1_0: Distribution::Gaussian { mean: 4.0, std: 0.08 },
            x2_0: Distribution::Deterministic(0.0),
        }
    }
}

impl Dynamics for Duffing {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn param_distributions(&self) -> Vec<Distribution> {
        vec![self.lambda]
    }
    fn initial_distributions(&self) -> Vec<Distribution> {
        vec![self.x1_0, self.x2_0]
    }
    fn polynomial_degree(&self) -> Option<usize> {
        Some(3)
    }

    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], _t: f64, params: &[f64]) -> Vec<S> {
        let lambda = params[0];
        let x1 = x[0];
        vec![x[1], -(x1 * lambda) - x[1] * 0.25 - x1 * x1 * x1 + u[0]]
    }

    fn jacobian(&self, x: &[f64], _u: &[f64], _t: f64, params: &[f64]) -> DMatrix<f64> {
        let lambda = params[0];
        DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, -lambda - 3.0 * x[0] * x[0], -0.25, 1.0])
    }

    fn hessian(&self, x: &[f64], _u: &[f64], _t: f64, _params: &[f64]) -> Tensor3 {
        let mut h = Tensor3::zeros(2, 3, 3);
        h[(1, 0, 0)] = -6.0 * x[0];
        h
    }
}

impl Mechanical for Duffing {
    fn config_dim(&self) -> usize {
        1
    }
    fn lagrangian<S: Scalar>(&self, q: &[S], v: &[S], params: &[f64]) -> S {
        let lambda = params[0];
        let q2 = q[0] * q[0];
        v[0] * v[0] * 0.5 - q2 * (0.5 * lambda) - q2 * q2 * 0.25
    }
    fn force<S: Scalar>(&self, _q: &[S], v: &[S], u: &[S], _params: &[f64]) -> Vec<S> {
        vec![u[0] - v[0] * 0.25]
    }
}

/// Galerkin-projected Duffing equations written out with precomputed
/// triple and quadruple basis products.
///
/// `basis` must have the parameter dimension first and at least one random
/// dimension. `λ = μ_λ + σ_λ ξ^p`.
pub fn duffing_gpc_rhs_closed_form(
    x: &DVector<f64>,
    u: f64,
    mu_lambda: f64,
    sigma_lambda: f64,
    basis: &PolynomialBasis,
) -> DVector<f64> {
    let k = basis.len();
    let x1 = x.rows(0, k);
    let x2 = x.rows(k, k);
    let p1 = basis.first_degree_index(0).expect("parameter dimension");
    let mut out = DVector::zeros(2 * k);
    let quad = quadruple_products(basis);
    for kk in 0..k {
        out[kk] = x2[kk];
        let mut acc = 0.0;
        for i in 0..k {
            acc -= x1[i] * (mu_lambda * basis.triple(0, kk, i) + sigma_lambda * basis.triple(p1, kk, i));
        }
        acc -= 0.25 * x2[kk] * basis.norm_sq(kk);
        for i in 0..k {
            for g in 0..k {
                let xig = x1[i] * x1[g];
                if xig == 0.0 {
                    continue;
                }
                for j in 0..k {
                    acc -= xig * x1[j] * quad[((kk * k + i) * k + g) * k + j];
                }
            }
        }
        // ⟨φ_k⟩ = ⟨φ_k φ_0⟩
        acc += basis.product_integral(&[kk, 0]) * u;
        out[k + kk] = acc / basis.norm_sq(kk);
    }
    out
}

fn quadruple_products(basis: &PolynomialBasis) -> Vec<f64> {
    let k = basis.len();
    let mut q = vec![0.0; k * k * k * k];
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                for d in 0..k {
                    q[((a * k + b) * k + c) * k + d] = basis.product_integral(&[a, b, c, d]);
                }
            }
        }
    }
    q
}

// ---------------------------------------------------------------------------
// Quadrotor

/// Rigid quadrotor with state `(χ, η, χ̇, η̇)`, `χ = (x, y, z)` and Z-Y-X Euler
/// angles `η = (φ, θ, ψ)`. Controls are the four rotor thrusts.
#[derive(Clone, Debug)]
pub struct Quadrotor {
    pub gravity: f64,
    pub mass: f64,
    pub arm: f64,
    pub inertia: [f64; 3],
    pub g_tr: Distribution,
    pub g_rot: Distribution,
    pub initial: Vec<Distribution>,
}

/// Margin kept from gimbal lock at `|θ| = π/2`.
pub const PITCH_MARGIN: f64 = 0.1;

impl Default for Quadrotor {
    fn default() -> Self {
        let mut initial = vec![Distribution::Deterministic(0.0); 12];
        initial[0] = Distribution::Deterministic(-3.0);
        initial[1] = Distribution::Deterministic(3.0);
        initial[2] = Distribution::Deterministic(3.0);
        Self {
            gravity: 9.81,
            mass: 1.0,
            arm: 0.24,
            inertia: [8.1e-3, 8.1e-3, 14.2e-3],
            g_tr: Distribution::Uniform { min: 2.85e-5, max: 2.95e-5 },
            g_rot: Distribution::Uniform { min: 1.05e-6, max: 1.15e-6 },
            initial,
        }
    }
}

impl Quadrotor {
    /// `W(η)`: Euler-angle rates to body rates.
    fn w_matrix<S: Scalar>(eta: &[S]) -> [[S; 3]; 3] {
        let (sphi, cphi) = (eta[0].sin(), eta[0].cos());
        let (sth, cth) = (eta[1].sin(), eta[1].cos());
        let z = S::zero();
        let one = S::cst(1.0);
        [[one, z, -sth], [z, cphi, sphi * cth], [z, -sphi, cphi * cth]]
    }

    /// `𝕁(η) = Wᵀ 𝕀 W`.
    pub fn angular_inertia<S: Scalar>(&self, eta: &[S]) -> [[S; 3]; 3] {
        let w = Self::w_matrix(eta);
        let mut j = [[S::zero(); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = S::zero();
                for k in 0..3 {
                    acc += w[k][a] * w[k][b] * self.inertia[k];
                }
                j[a][b] = acc;
            }
        }
        j
    }

    /// Third column of `R(η) = R_z(ψ) R_y(θ) R_x(φ)`.
    fn thrust_direction<S: Scalar>(eta: &[S]) -> [S; 3] {
        let (sphi, cphi) = (eta[0].sin(), eta[0].cos());
        let (sth, cth) = (eta[1].sin(), eta[1].cos());
        let (spsi, cpsi) = (eta[2].sin(), eta[2].cos());
        [
            cpsi * sth * cphi + spsi * sphi,
            spsi * sth * cphi - cpsi * sphi,
            cth * cphi,
        ]
    }

    fn torques<S: Scalar>(&self, u: &[S], params: &[f64]) -> [S; 3] {
        let ratio = self.arm * params[0] / params[1];
        [
            (u[2] - u[0]) * ratio,
            (u[1] - u[3]) * ratio,
            u[0] + u[2] - u[1] - u[3],
        ]
    }

    /// Total mechanical energy `½m|χ̇|² + mgz + ½η̇ᵀ𝕁η̇`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let j = self.angular_inertia(&x[3..6]);
        let rot: f64 = (0..3)
            .flat_map(|a| (0..3).map(move |b| (a, b)))
            .map(|(a, b)| x[9 + a] * j[a][b] * x[9 + b])
            .sum();
        let trans: f64 = x[6..9].iter().map(|v| v * v).sum();
        0.5 * self.mass * trans + self.mass * self.gravity * x[2] + 0.5 * rot
    }
}

fn solve3<S: Scalar>(m: &[[S; 3]; 3], b: &[S; 3]) -> [S; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let c10 = m[0][2] * m[2][1] - m[0][1] * m[2][2];
    let c11 = m[0][0] * m[2][2] - m[0][2] * m[2][0];
    let c12 = m[0][1] * m[2][0] - m[0][0] * m[2][1];
    let c20 = m[0][1] * m[1][2] - m[0][2] * m[1][1];
    let c21 = m[0][2] * m[1][0] - m[0][0] * m[1][2];
    let c22 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    // inverse = adjugate / det, adjugate = cofactorᵀ
    [
        (c00 * b[0] + c10 * b[1] + c20 * b[2]) / det,
        (c01 * b[0] + c11 * b[1] + c21 * b[2]) / det,
        (c02 * b[0] + c12 * b[1] + c22 * b[2]) / det,
    ]
}

impl Dynamics for Quadrotor {
    fn state_dim(&self) -> usize {
        12
    }
    fn control_dim(&self) -> usize {
        4
    }
    fn param_distributions(&self) -> Vec<Distribution> {
        vec![self.g_tr, self.g_rot]
    }
    fn initial_distributions(&self) -> Vec<Distribution> {
        self.initial.clone()
    }

    fn validate_state(&self, x: &[f64]) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quadrotor state"));
        }
        let limit = std::f64::consts::FRAC_PI_2 - PITCH_MARGIN;
        if x[4].abs() >= limit {
            return Err(Error::Envelope(format!(
                "pitch {:.6} rad exceeds ±{limit:.6} (angular inertia near singular)",
                x[4]
            )));
        }
        Ok(())
    }

    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], _t: f64, params: &[f64]) -> Vec<S> {
        let eta = &x[3..6];
        let chi_dot = &x[6..9];
        let eta_dot = &x[9..12];
        let thrust = u[0] + u[1] + u[2] + u[3];
        let dir = Self::thrust_direction(eta);
        let inv_m = 1.0 / self.mass;

        let j = self.angular_inertia(eta);
        // ∂𝕁/∂η_k by one forward-mode sweep per angle
        let mut dj = [[[S::zero(); 3]; 3]; 3];
        for (k, djk) in dj.iter_mut().enumerate() {
            let seeded: Vec<Dual<S>> = (0..3)
                .map(|a| if a == k { Dual::variable(eta[a]) } else { Dual::constant(eta[a]) })
                .collect();
            let jd = self.angular_inertia(&seeded);
            for a in 0..3 {
                for b in 0..3 {
                    djk[a][b] = jd[a][b].eps;
                }
            }
        }
        let tau = self.torques(u, params);
        let mut rhs = tau;
        for a in 0..3 {
            // 𝕁̇ η̇ = Σ_k ∂𝕁/∂η_k η̇_k η̇
            for k in 0..3 {
                for b in 0..3 {
                    rhs[a] -= dj[k][a][b] * eta_dot[k] * eta_dot[b];
                }
            }
            // ½ ∂(η̇ᵀ𝕁η̇)/∂η_a
            let mut quad = S::zero();
            for b in 0..3 {
                for c in 0..3 {
                    quad += eta_dot[b] * dj[a][b][c] * eta_dot[c];
                }
            }
            rhs[a] += quad * 0.5;
        }
        let eta_ddot = solve3(&j, &rhs);

        vec![
            chi_dot[0],
            chi_dot[1],
            chi_dot[2],
            eta_dot[0],
            eta_dot[1],
            eta_dot[2],
            dir[0] * thrust * inv_m,
            dir[1] * thrust * inv_m,
            dir[2] * thrust * inv_m - self.gravity,
            eta_ddot[0],
            eta_ddot[1],
            eta_ddot[2],
        ]
    }
}

impl Mechanical for Quadrotor {
    fn config_dim(&self) -> usize {
        6
    }
    fn lagrangian<S: Scalar>(&self, q: &[S], v: &[S], _params: &[f64]) -> S {
        let j = self.angular_inertia(&q[3..6]);
        let mut rot = S::zero();
        for a in 0..3 {
            for b in 0..3 {
                rot += v[3 + a] * j[a][b] * v[3 + b];
            }
        }
        let trans = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        trans * (0.5 * self.mass) - q[2] * (self.mass * self.gravity) + rot * 0.5
    }
    fn force<S: Scalar>(&self, q: &[S], _v: &[S], u: &[S], params: &[f64]) -> Vec<S> {
        let thrust = u[0] + u[1] + u[2] + u[3];
        let dir = Self::thrust_direction(&q[3..6]);
        let tau = self.torques(u, params);
        vec![dir[0] * thrust, dir[1] * thrust, dir[2] * thrust, tau[0], tau[1], tau[2]]
    }
}

// ---------------------------------------------------------------------------
// Small reference systems

/// `ẋ = −λx` with `λ` uncertain; the textbook gPC example.
#[derive(Clone, Debug)]
pub struct LinearDecay {
    pub lambda: Distribution,
    pub x0: Distribution,
}

impl Dynamics for LinearDecay {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn param_distributions(&self) -> Vec<Distribution> {
        vec![self.lambda]
    }
    fn initial_distributions(&self) -> Vec<Distribution> {
        vec![self.x0]
    }
    fn polynomial_degree(&self) -> Option<usize> {
        Some(2)
    }
    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], _t: f64, params: &[f64]) -> Vec<S> {
        vec![-(x[0] * params[0]) + u[0]]
    }
}

/// `L = ½ m q̇²`, no force except the control.
#[derive(Clone, Debug)]
pub struct FreeParticle {
    pub mass: f64,
    pub q0: Distribution,
    pub v0: Distribution,
}

/// `L = ½ q̇² − ½ k q²`, force `u`.
#[derive(Clone, Debug)]
pub struct HarmonicOscillator {
    pub stiffness: f64,
    pub q0: Distribution,
    pub v0: Distribution,
}

/// Free particle of unit mass under the constant force `c + u`.
#[derive(Clone, Debug)]
pub struct ConstantForce {
    pub force: f64,
    pub q0: Distribution,
    pub v0: Distribution,
}

macro_rules! one_dof_dynamics {
    ($ty:ty) => {
        impl Dynamics for $ty {
            fn state_dim(&self) -> usize {
                2
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn param_distributions(&self) -> Vec<Distribution> {
                Vec::new()
            }
            fn initial_distributions(&self) -> Vec<Distribution> {
                vec![self.q0, self.v0]
            }
            fn polynomial_degree(&self) -> Option<usize> {
                Some(1)
            }
            fn rhs<S: Scalar>(&self, x: &[S], u: &[S], _t: f64, params: &[f64]) -> Vec<S> {
                let acc = self.force(&x[..1], &x[1..], u, params)[0] + self.potential_force(x[0]);
                vec![x[1], acc / self.inertia()]
            }
        }
    };
}

trait OneDof {
    fn inertia(&self) -> f64;
    fn potential_force<S: Scalar>(&self, q: S) -> S;
}

impl OneDof for FreeParticle {
    fn inertia(&self) -> f64 {
        self.mass
    }
    fn potential_force<S: Scalar>(&self, _q: S) -> S {
        S::zero()
    }
}

impl OneDof for HarmonicOscillator {
    fn inertia(&self) -> f64 {
        1.0
    }
    fn potential_force<S: Scalar>(&self, q: S) -> S {
        -(q * self.stiffness)
    }
}

impl OneDof for ConstantForce {
    fn inertia(&self) -> f64 {
        1.0
    }
    fn potential_force<S: Scalar>(&self, _q: S) -> S {
        S::zero()
    }
}

one_dof_dynamics!(FreeParticle);
one_dof_dynamics!(HarmonicOscillator);
one_dof_dynamics!(ConstantForce);

impl Mechanical for FreeParticle {
    fn config_dim(&self) -> usize {
        1
    }
    fn lagrangian<S: Scalar>(&self, _q: &[S], v: &[S], _params: &[f64]) -> S {
        v[0] * v[0] * (0.5 * self.mass)
    }
    fn force<S: Scalar>(&self, _q: &[S], _v: &[S], u: &[S], _params: &[f64]) -> Vec<S> {
        vec![u[0]]
    }
}

impl HarmonicOscillator {
    pub fn energy(&self, q: f64, v: f64) -> f64 {
        0.5 * v * v + 0.5 * self.stiffness * q * q
    }
}

impl Mechanical for HarmonicOscillator {
    fn config_dim(&self) -> usize {
        1
    }
    fn lagrangian<S: Scalar>(&self, q: &[S], v: &[S], _params: &[f64]) -> S {
        v[0] * v[0] * 0.5 - q[0] * q[0] * (0.5 * self.stiffness)
    }
    fn force<S: Scalar>(&self, _q: &[S], _v: &[S], u: &[S], _params: &[f64]) -> Vec<S> {
        vec![u[0]]
    }
}

impl Mechanical for ConstantForce {
    fn config_dim(&self) -> usize {
        1
    }
    fn lagrangian<S: Scalar>(&self, _q: &[S], v: &[S], _params: &[f64]) -> S {
        v[0] * v[0] * 0.5
    }
    fn force<S: Scalar>(&self, _q: &[S], _v: &[S], u: &[S], _params: &[f64]) -> Vec<S> {
        vec![u[0] + self.force]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_jacobian<M: Dynamics>(m: &M, x: &[f64], u: &[f64], p: &[f64]) -> DMatrix<f64> {
        let n = m.state_dim();
        let z = concat(x, u);
        let h = 1e-6;
        DMatrix::from_fn(n, z.len(), |i, a| {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[a] += h;
            zm[a] -= h;
            let fp = m.rhs(&zp[..n], &zp[n..], 0.0, p);
            let fm = m.rhs(&zm[..n], &zm[n..], 0.0, p);
            (fp[i] - fm[i]) / (2.0 * h)
        })
    }

    #[test]
    fn duffing_examples() {
        let d = Duffing::default();
        let f = d.rhs(&[1.0, 0.0], &[0.0], 0.0, &[3.0]);
        assert_eq!(f, vec![0.0, -4.0]);
        let j = d.jacobian(&[0.7, -0.3], &[0.2], 0.0, &[3.0]);
        assert_eq!(j[(1, 0)], -3.0 - 3.0 * 0.49);
        assert_eq!(j[(1, 1)], -0.25);
        let ad = autodiff::jacobian(&RhsFn::new(&d, 0.0, &[3.0]), &[0.7, -0.3, 0.2]);
        assert!((ad - j).abs().max() < 1e-14);
        let h = d.hessian(&[0.7, -0.3], &[0.2], 0.0, &[3.0]);
        let had = autodiff::hessian(&RhsFn::new(&d, 0.0, &[3.0]), &[0.7, -0.3, 0.2]);
        assert!(h.max_abs_diff(&had) < 1e-14);
    }

    #[test]
    fn duffing_lagrangian_reproduces_dynamics() {
        let d = Duffing::default();
        for &(q, v, u, lam) in &[(0.3, -1.2, 0.5, 3.1), (4.0, 0.0, 0.0, 2.9), (-1.5, 2.5, -3.0, 3.0)] {
            let acc = euler_lagrange_acceleration(&d, &[q], &[v], &[u], &[lam]).unwrap();
            let f = d.rhs(&[q, v], &[u], 0.0, &[lam]);
            assert!((acc[0] - f[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrotor_hover_and_free_fall() {
        let quad = Quadrotor::default();
        let p = [2.9e-5, 1.1e-6];
        let mut x = vec![0.0; 12];
        x[0] = 1.0;
        x[2] = 2.0;
        let hover = vec![quad.mass * quad.gravity / 4.0; 4];
        let f = quad.rhs(&x, &hover, 0.0, &p);
        assert!(f.iter().all(|v| v.abs() < 1e-14), "{f:?}");
        let fall = quad.rhs(&x, &[0.0; 4], 0.0, &p);
        assert_eq!(&fall[6..9], &[0.0, 0.0, -9.81]);
        let tau = quad.torques(&[1.0; 4], &p);
        assert_eq!(tau, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn quadrotor_rhs_matches_euler_lagrange() {
        let quad = Quadrotor::default();
        let p = [2.87e-5, 1.12e-6];
        let x = [0.1, -0.2, 0.3, 0.2, -0.4, 0.7, 0.5, -0.1, 0.2, 0.3, -0.6, 0.4];
        let u = [2.0, 2.6, 2.3, 2.5];
        let f = quad.rhs(&x, &u, 0.0, &p);
        let acc = euler_lagrange_acceleration(&quad, &x[..6], &x[6..], &u, &p).unwrap();
        for i in 0..6 {
            assert!((f[6 + i] - acc[i]).abs() < 1e-9 * (1.0 + acc[i].abs()), "{i}: {} vs {}", f[6 + i], acc[i]);
        }
    }

    #[test]
    fn quadrotor_jacobian_matches_finite_differences() {
        let quad = Quadrotor::default();
        let p = [2.9e-5, 1.1e-6];
        let x = [0.1, -0.2, 0.3, 0.2, -0.4, 0.7, 0.5, -0.1, 0.2, 0.3, -0.6, 0.4];
        let u = [2.0, 2.6, 2.3, 2.5];
        let j = quad.jacobian(&x, &u, 0.0, &p);
        let fd = fd_jacobian(&quad, &x, &u, &p);
        let err = (&j - &fd).abs().max() / j.abs().max();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn pitch_guard() {
        let quad = Quadrotor::default();
        let mut x = vec![0.0; 12];
        assert!(quad.validate_state(&x).is_ok());
        x[4] = 1.5;
        assert!(matches!(quad.validate_state(&x), Err(Error::Envelope(_))));
        x[4] = f64::NAN;
        assert!(quad.validate_state(&x).is_err());
    }

    #[test]
    fn one_dof_systems_follow_their_lagrangians() {
        let osc = HarmonicOscillator {
            stiffness: 2.0,
            q0: Distribution::Deterministic(1.0),
            v0: Distribution::Deterministic(0.0),
        };
        let f = osc.rhs(&[0.5, 1.0], &[0.3], 0.0, &[]);
        let acc = euler_lagrange_acceleration(&osc, &[0.5], &[1.0], &[0.3], &[]).unwrap();
        assert!((f[1] - acc[0]).abs() < 1e-14);
        let cf = ConstantForce {
            force: 1.5,
            q0: Distribution::Deterministic(0.0),
            v0: Distribution::Deterministic(0.0),
        };
        assert_eq!(cf.rhs(&[0.0, 0.0], &[0.5], 0.0, &[])[1], 2.0);
        let fp = FreeParticle {
            mass: 2.0,
            q0: Distribution::Deterministic(0.0),
            v0: Distribution::Deterministic(0.0),
        };
        assert_eq!(mass_matrix(&fp, &[0.0], &[1.0], &[])[(0, 0)], 2.0);
    }
}

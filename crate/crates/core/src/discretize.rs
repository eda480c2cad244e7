//! Discrete-time step maps over gPC coefficients and their local expansions.
//!
//! Two integrators are provided:
//!
//! - [`EulerGpc`]: `X⁺ = X + Δt f(X, u)` on the projected dynamics.
//! - [`DelGpc`]: a variational integrator. The state is `(Q, P̂)`, positions
//!   and unnormalized momenta `p̂_ij = ∫ ∂L/∂v_i φ_j ρ`, advanced by the
//!   discrete Euler–Lagrange equations of the projected Lagrangian
//!   `L̂ = ∫ L ρ`.
//!
//! Both expose a [`StepLinearization`]: the first-order maps `Θ`, `B` and a
//! second-order term that can be contracted with a costate (what DDP needs)
//! or expanded into the dense tensors `Γ, Δ, Ξ, Λ` (layout in
//! [`crate::tensor`]).
//!
//! The second-order DEL terms come from differentiating the implicit step
//! twice. With `w = (Qᵏ, Qᵏ⁺¹, u)`, `z = (Qᵏ, P̂ᵏ, u)` and `E = ∂w/∂z`:
//!
//! ```text
//! ∂²Qᵏ⁺¹  = −M̂⁻¹ ×₁ (∇²_w G ×₂ Eᵀ ×₃ Eᵀ),      G = D₁L̂ + F̂⁻
//! ∂²P̂ᵏ⁺¹ = ∇²_w H ×₂ Eᵀ ×₃ Eᵀ + D₂D₂L̂ ×₁ ∂²Qᵏ⁺¹,  H = D₂L̂
//! ```
//!
//! Contracting with `(a, b)` collapses everything to
//! `Eᵀ ∇²_w[−c·G + b·H] E` with `c = M̂⁻ᵀ(a + D₂D₂L̂ᵀ b)`; the bracket is one
//! directional third derivative of `L̂` plus a weighted Hessian of `F̂⁻`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{self, Scalar, VectorFn};
use crate::error::{Error, Result};
use crate::gpc::{ContractedHessian, GpcModel, NodeHessians};
use crate::models::{Dynamics, Mechanical};
use crate::tensor::Tensor3;

/// Dense second-order tensors of a step map.
#[derive(Clone, Debug)]
pub struct SecondOrderTensors {
    /// `∂²x⁺/∂x∂x`, shape `(n, n, n)`.
    pub gamma: Tensor3,
    /// `∂²x⁺/∂x∂u`, shape `(n, n, m)`.
    pub delta: Tensor3,
    /// `∂²x⁺/∂u∂x`, shape `(n, m, n)`.
    pub xi: Tensor3,
    /// `∂²x⁺/∂u∂u`, shape `(n, m, m)`.
    pub lambda: Tensor3,
}

/// Second-order part of a step expansion.
pub trait SecondOrderExpansion: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// `Γ ×₁ v`, `Δ ×₁ v`, `Λ ×₁ v`.
    fn contract(&self, v: &DVector<f64>) -> ContractedHessian;

    /// Dense tensors, one contraction per output component unless overridden.
    fn tensors(&self) -> SecondOrderTensors {
        let (n, m) = (self.state_dim(), self.control_dim());
        let mut gamma = Tensor3::zeros(n, n, n);
        let mut delta = Tensor3::zeros(n, n, m);
        let mut lambda = Tensor3::zeros(n, m, m);
        let mut e = DVector::zeros(n);
        for l in 0..n {
            e[l] = 1.0;
            let c = self.contract(&e);
            e[l] = 0.0;
            for a in 0..n {
                for b in 0..n {
                    gamma[(l, a, b)] = c.xx[(a, b)];
                }
                for b in 0..m {
                    delta[(l, a, b)] = c.xu[(a, b)];
                }
            }
            for a in 0..m {
                for b in 0..m {
                    lambda[(l, a, b)] = c.uu[(a, b)];
                }
            }
        }
        let xi = delta.transpose_last();
        SecondOrderTensors {
            gamma,
            delta,
            xi,
            lambda,
        }
    }
}

impl SecondOrderExpansion for SecondOrderTensors {
    fn state_dim(&self) -> usize {
        self.gamma.shape().0
    }
    fn control_dim(&self) -> usize {
        self.lambda.shape().1
    }
    fn contract(&self, v: &DVector<f64>) -> ContractedHessian {
        ContractedHessian {
            xx: self.gamma.contract_first(v),
            xu: self.delta.contract_first(v),
            uu: self.lambda.contract_first(v),
        }
    }
    fn tensors(&self) -> SecondOrderTensors {
        self.clone()
    }
}

/// `δx⁺ ≈ Θ δx + B δu + ½ second-order terms`.
#[derive(Clone)]
pub struct StepLinearization {
    pub theta: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub second: Option<Arc<dyn SecondOrderExpansion>>,
}

impl std::fmt::Debug for StepLinearization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StepLinearization")
            .field("theta", &self.theta)
            .field("b", &self.b)
            .field("second", &self.second.is_some())
            .finish()
    }
}

/// A discrete-time system `x⁺ = F_k(x, u)` that DDP can optimize over.
pub trait Discretization: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// First-order maps, plus second-order terms when `second_order` is set.
    fn linearize(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>, second_order: bool) -> Result<StepLinearization>;
}

impl<D: Discretization + ?Sized> Discretization for &D {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }
    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).step(k, x, u)
    }
    fn linearize(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>, second_order: bool) -> Result<StepLinearization> {
        (**self).linearize(k, x, u, second_order)
    }
}

fn check_finite(v: &DVector<f64>, context: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

// ---------------------------------------------------------------------------
// Linear reference system

/// `x⁺ = A x + B u`.
#[derive(Clone, Debug)]
pub struct LinearStep {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Discretization for LinearStep {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn step(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }
    fn linearize(&self, _k: usize, _x: &DVector<f64>, _u: &DVector<f64>, second_order: bool) -> Result<StepLinearization> {
        let (n, m) = (self.state_dim(), self.control_dim());
        let second: Option<Arc<dyn SecondOrderExpansion>> = second_order.then(|| {
            Arc::new(SecondOrderTensors {
                gamma: Tensor3::zeros(n, n, n),
                delta: Tensor3::zeros(n, n, m),
                xi: Tensor3::zeros(n, m, n),
                lambda: Tensor3::zeros(n, m, m),
            }) as Arc<dyn SecondOrderExpansion>
        });
        Ok(StepLinearization {
            theta: self.a.clone(),
            b: self.b.clone(),
            second,
        })
    }
}

/// Wraps any step map and replaces its linearization by central differences.
/// Only first-order terms are produced.
pub struct FdLinearized<D> {
    pub inner: D,
    pub h: f64,
}

impl<D: Discretization> Discretization for FdLinearized<D> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.step(k, x, u)
    }
    fn linearize(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>, _second_order: bool) -> Result<StepLinearization> {
        let (n, m) = (self.state_dim(), self.control_dim());
        let mut theta = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        for a in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[a] += self.h;
            xm[a] -= self.h;
            let d = (self.inner.step(k, &xp, u)? - self.inner.step(k, &xm, u)?) / (2.0 * self.h);
            theta.set_column(a, &d);
        }
        for c in 0..m {
            let mut up = u.clone();
            let mut um = u.clone();
            up[c] += self.h;
            um[c] -= self.h;
            let d = (self.inner.step(k, x, &up)? - self.inner.step(k, x, &um)?) / (2.0 * self.h);
            b.set_column(c, &d);
        }
        Ok(StepLinearization { theta, b, second: None })
    }
}

// ---------------------------------------------------------------------------
// Explicit Euler on the projected dynamics

pub struct EulerGpc<'a, M> {
    pub gpc: &'a GpcModel<M>,
    pub dt: f64,
}

impl<'a, M: Dynamics> EulerGpc<'a, M> {
    pub fn new(gpc: &'a GpcModel<M>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { gpc, dt })
    }
}

struct EulerSecond {
    nodes: NodeHessians,
    dt: f64,
    n: usize,
    m: usize,
}

impl SecondOrderExpansion for EulerSecond {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn contract(&self, v: &DVector<f64>) -> ContractedHessian {
        let mut c = self.nodes.contract(v);
        c.scale(self.dt);
        c
    }
    fn tensors(&self) -> SecondOrderTensors {
        let mut h = self.nodes.dense();
        for t in [&mut h.xx, &mut h.xu, &mut h.ux, &mut h.uu] {
            t.scale(self.dt);
        }
        SecondOrderTensors {
            gamma: h.xx,
            delta: h.xu,
            xi: h.ux,
            lambda: h.uu,
        }
    }
}

impl<M: Dynamics> Discretization for EulerGpc<'_, M> {
    fn state_dim(&self) -> usize {
        self.gpc.dim()
    }
    fn control_dim(&self) -> usize {
        self.gpc.control_dim()
    }
    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.gpc.galerkin_rhs(x, u, k as f64 * self.dt)?;
        let next = x + f * self.dt;
        check_finite(&next, "Euler step")?;
        Ok(next)
    }
    fn linearize(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>, second_order: bool) -> Result<StepLinearization> {
        let t = k as f64 * self.dt;
        let (fx, fu) = self.gpc.gpc_jacobian(x, u, t)?;
        let n = self.state_dim();
        let theta = DMatrix::identity(n, n) + fx * self.dt;
        let b = fu * self.dt;
        let second = if second_order {
            let nodes = self.gpc.node_hessians(x, u, t)?;
            Some(Arc::new(EulerSecond {
                nodes,
                dt: self.dt,
                n,
                m: self.control_dim(),
            }) as Arc<dyn SecondOrderExpansion>)
        } else {
            None
        };
        Ok(StepLinearization { theta, b, second })
    }
}

// ---------------------------------------------------------------------------
// Physical discrete mechanics

/// `L_d(qᵏ, qᵏ⁺¹) = L((1−ζ)qᵏ + ζqᵏ⁺¹, (qᵏ⁺¹ − qᵏ)/Δt) Δt` as a function of
/// the stacked `(qᵏ, qᵏ⁺¹)`.
pub struct DiscreteLagrangianFn<'a, M: ?Sized> {
    pub mech: &'a M,
    pub params: &'a [f64],
    pub dt: f64,
    pub zeta: f64,
}

impl<M: Mechanical + ?Sized> VectorFn for DiscreteLagrangianFn<'_, M> {
    fn input_dim(&self) -> usize {
        2 * self.mech.config_dim()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let nq = self.mech.config_dim();
        let (q, v) = midpoint(&z[..nq], &z[nq..], self.dt, self.zeta);
        vec![self.mech.lagrangian(&q, &v, self.params) * self.dt]
    }
}

/// `F_d⁻(qᵏ, qᵏ⁺¹, u) = F((1−ζ)qᵏ + ζqᵏ⁺¹, (qᵏ⁺¹ − qᵏ)/Δt, u) Δt` on
/// the stacked `(qᵏ, qᵏ⁺¹, u)`.
pub struct DiscreteForceFn<'a, M: ?Sized> {
    pub mech: &'a M,
    pub params: &'a [f64],
    pub dt: f64,
    pub zeta: f64,
}

impl<M: Mechanical + ?Sized> VectorFn for DiscreteForceFn<'_, M> {
    fn input_dim(&self) -> usize {
        2 * self.mech.config_dim() + self.mech.control_dim()
    }
    fn output_dim(&self) -> usize {
        self.mech.config_dim()
    }
    fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let nq = self.mech.config_dim();
        let (q, v) = midpoint(&z[..nq], &z[nq..2 * nq], self.dt, self.zeta);
        self.mech
            .force(&q, &v, &z[2 * nq..], self.params)
            .into_iter()
            .map(|f| f * self.dt)
            .collect()
    }
}

fn midpoint<S: Scalar>(qk: &[S], q1: &[S], dt: f64, zeta: f64) -> (Vec<S>, Vec<S>) {
    let q = qk.iter().zip(q1).map(|(&a, &b)| a * (1.0 - zeta) + b * zeta).collect();
    let v = qk.iter().zip(q1).map(|(&a, &b)| (b - a) / dt).collect();
    (q, v)
}

pub fn discrete_lagrangian<M: Mechanical + ?Sized>(
    mech: &M,
    qk: &[f64],
    q1: &[f64],
    dt: f64,
    zeta: f64,
    params: &[f64],
) -> f64 {
    let z: Vec<f64> = qk.iter().chain(q1).copied().collect();
    DiscreteLagrangianFn { mech, params, dt, zeta }.eval(&z)[0]
}

/// `(F_d⁻, F_d⁺)` with the midpoint force assigned entirely to `F_d⁻`.
pub fn discrete_forces<M: Mechanical + ?Sized>(
    mech: &M,
    qk: &[f64],
    q1: &[f64],
    u: &[f64],
    dt: f64,
    params: &[f64],
) -> (DVector<f64>, DVector<f64>) {
    let z: Vec<f64> = qk.iter().chain(q1).chain(u).copied().collect();
    let minus = DiscreteForceFn {
        mech,
        params,
        dt,
        zeta: 0.5,
    }
    .eval(&z);
    (DVector::from_vec(minus), DVector::zeros(qk.len()))
}

/// Newton settings for the implicit half of a DEL step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonConfig {
    /// Residual ∞-norm accepted as converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50 }
    }
}

/// Classical DEL step of one deterministic mechanical system.
pub struct PhysicalDel<'a, M> {
    pub mech: &'a M,
    pub params: Vec<f64>,
    pub dt: f64,
    pub newton: NewtonConfig,
}

impl<M: Mechanical> PhysicalDel<'_, M> {
    /// `p = ∂L/∂q̇` at `(q, v)`.
    pub fn momentum(&self, q: &[f64], v: &[f64]) -> DVector<f64> {
        let nq = self.mech.config_dim();
        let lag = crate::models::LagrangianFn {
            mech: self.mech,
            params: &self.params,
        };
        let z: Vec<f64> = q.iter().chain(v).copied().collect();
        let g = autodiff::jacobian(&lag, &z);
        DVector::from_fn(nq, |i, _| g[(0, nq + i)])
    }

    pub fn step(&self, q: &[f64], p: &[f64], u: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let nq = self.mech.config_dim();
        let ld = DiscreteLagrangianFn {
            mech: self.mech,
            params: &self.params,
            dt: self.dt,
            zeta: 0.5,
        };
        let fd = DiscreteForceFn {
            mech: self.mech,
            params: &self.params,
            dt: self.dt,
            zeta: 0.5,
        };
        let v0 = crate::models::mass_matrix(self.mech, q, &vec![0.0; nq], &self.params)
            .lu()
            .solve(&DVector::from_column_slice(p))
            .ok_or(Error::Singular("mass matrix"))?;
        let mut q1: Vec<f64> = q.iter().zip(v0.iter()).map(|(a, b)| a + self.dt * b).collect();
        let mut residual = f64::INFINITY;
        for _ in 0..self.newton.max_iter {
            let w: Vec<f64> = q.iter().chain(&q1).copied().collect();
            let wf: Vec<f64> = w.iter().chain(u).copied().collect();
            let g = autodiff::jacobian(&ld, &w);
            let h = autodiff::hessian(&ld, &w).slab(0);
            let f = fd.eval(&wf);
            let jf = autodiff::jacobian(&fd, &wf);
            let r = DVector::from_fn(nq, |i, _| p[i] + g[(0, i)] + f[i]);
            residual = r.amax();
            if !residual.is_finite() {
                break;
            }
            if residual < self.newton.tol {
                let p1 = DVector::from_fn(nq, |i, _| p[i] + (g[(0, i)] + g[(0, nq + i)]) + f[i]);
                return Ok((DVector::from_vec(q1), p1));
            }
            let mhat = DMatrix::from_fn(nq, nq, |i, j| h[(i, nq + j)] + jf[(i, nq + j)]);
            let dq = mhat.lu().solve(&r).ok_or(Error::Singular("DEL Newton matrix"))?;
            for (a, d) in q1.iter_mut().zip(dq.iter()) {
                *a -= d;
            }
        }
        Err(Error::NewtonDiverged {
            iterations: self.newton.max_iter,
            residual,
        })
    }
}

// ---------------------------------------------------------------------------
// Variational integrator on gPC coefficients

/// DEL equations of the projected Lagrangian. State `z = (Q, P̂)`, each block
/// `N(K+1)` long in the same state-major layout as the coefficients.
pub struct DelGpc<'a, M> {
    pub gpc: &'a GpcModel<M>,
    pub dt: f64,
    pub zeta: f64,
    pub newton: NewtonConfig,
}

/// `L̂_d` and `F̂_d⁻` with their coefficient-space derivatives at one
/// `(Qᵏ, Qᵏ⁺¹, u)`.
#[derive(Clone, Debug)]
pub struct GpcDelTerms {
    pub lhat: f64,
    /// `(D₁L̂, D₂L̂)`.
    pub grad: DVector<f64>,
    /// Hessian of `L̂_d` over `(Qᵏ, Qᵏ⁺¹)`.
    pub hess: DMatrix<f64>,
    pub force: DVector<f64>,
    /// Jacobian of `F̂_d⁻` over `(Qᵏ, Qᵏ⁺¹, u)`.
    pub force_jac: DMatrix<f64>,
}

struct DelSecond {
    nq: usize,
    k: usize,
    m: usize,
    weights: Vec<f64>,
    phi: Vec<Vec<f64>>,
    /// Third derivatives of the physical `L_d` over `(qᵏ, qᵏ⁺¹)`, per node.
    l3: Vec<Tensor3>,
    /// Hessians of the physical `F_d⁻` over `(qᵏ, qᵏ⁺¹, u)`, per node.
    f2: Vec<Tensor3>,
    mhat_inv: DMatrix<f64>,
    d2d2: DMatrix<f64>,
    /// `∂w/∂z`.
    e: DMatrix<f64>,
}

impl SecondOrderExpansion for DelSecond {
    fn state_dim(&self) -> usize {
        2 * self.nq * self.k
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn contract(&self, v: &DVector<f64>) -> ContractedHessian {
        let (nq, k, m) = (self.nq, self.k, self.m);
        let np = nq * k;
        let a = v.rows(0, np);
        let b = v.rows(np, np).into_owned();
        let c = self.mhat_inv.transpose() * (a + self.d2d2.transpose() * &b);
        let nw = 2 * np + m;
        let nphys = 2 * nq;
        let mut w = DMatrix::zeros(nw, nw);
        for (node, &wt) in self.weights.iter().enumerate() {
            let phi = &self.phi[node];
            let coef = |vec: &DVector<f64>, i: usize| -> f64 { (0..k).map(|j| vec[i * k + j] * phi[j]).sum() };
            // physical direction (−c(ξ), b(ξ)) and force weights c(ξ)
            let mut dir = vec![0.0; nphys];
            let mut cw = vec![0.0; nq];
            for i in 0..nq {
                let ci = coef(&c, i);
                cw[i] = ci;
                dir[i] = -ci;
                dir[nq + i] = coef(&b, i);
            }
            let t3 = &self.l3[node];
            let f2 = &self.f2[node];
            let nf = nphys + m;
            let mut local = DMatrix::zeros(nf, nf);
            for (p, dp) in dir.iter().enumerate() {
                if *dp == 0.0 {
                    continue;
                }
                for r in 0..nphys {
                    for s in 0..nphys {
                        local[(r, s)] += dp * t3[(p, r, s)];
                    }
                }
            }
            for (i, ci) in cw.iter().enumerate() {
                if *ci == 0.0 {
                    continue;
                }
                for r in 0..nf {
                    for s in 0..nf {
                        local[(r, s)] -= ci * f2[(i, r, s)];
                    }
                }
            }
            local *= wt;
            // expand: physical q-slot p ↦ coefficients p·k + h weighted by φ_h
            for r in 0..nf {
                for s in 0..nf {
                    let val = local[(r, s)];
                    if val == 0.0 {
                        continue;
                    }
                    match (r < nphys, s < nphys) {
                        (true, true) => {
                            for h in 0..k {
                                let vh = val * phi[h];
                                for d in 0..k {
                                    w[(r * k + h, s * k + d)] += vh * phi[d];
                                }
                            }
                        }
                        (true, false) => {
                            for h in 0..k {
                                w[(r * k + h, 2 * np + s - nphys)] += val * phi[h];
                            }
                        }
                        (false, true) => {
                            for d in 0..k {
                                w[(2 * np + r - nphys, s * k + d)] += val * phi[d];
                            }
                        }
                        (false, false) => w[(2 * np + r - nphys, 2 * np + s - nphys)] += val,
                    }
                }
            }
        }
        let full = self.e.transpose() * w * &self.e;
        let nz = 2 * np;
        ContractedHessian {
            xx: full.view((0, 0), (nz, nz)).into_owned(),
            xu: full.view((0, nz), (nz, m)).into_owned(),
            uu: full.view((nz, nz), (m, m)).into_owned(),
        }
    }
}

impl<'a, M: Mechanical> DelGpc<'a, M> {
    pub fn new(gpc: &'a GpcModel<M>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if gpc.n() != 2 * gpc.model().config_dim() {
            return Err(Error::Dimension {
                context: "mechanical state (q, v)",
                expected: 2 * gpc.model().config_dim(),
                got: gpc.n(),
            });
        }
        Ok(Self {
            gpc,
            dt,
            zeta: 0.5,
            newton: NewtonConfig::default(),
        })
    }

    fn nq(&self) -> usize {
        self.gpc.model().config_dim()
    }

    /// `N(K+1)`.
    pub fn block_len(&self) -> usize {
        self.nq() * self.gpc.n_coeffs()
    }

    fn positions(&self, q: &[f64], phi: &[f64]) -> Vec<f64> {
        let k = phi.len();
        (0..self.nq())
            .map(|i| q[i * k..(i + 1) * k].iter().zip(phi).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn lagrangian_fn<'b>(&'b self, params: &'b [f64]) -> DiscreteLagrangianFn<'b, M> {
        DiscreteLagrangianFn {
            mech: self.gpc.model(),
            params,
            dt: self.dt,
            zeta: self.zeta,
        }
    }

    fn force_fn<'b>(&'b self, params: &'b [f64]) -> DiscreteForceFn<'b, M> {
        DiscreteForceFn {
            mech: self.gpc.model(),
            params,
            dt: self.dt,
            zeta: self.zeta,
        }
    }

    /// Projected discrete Lagrangian and forces with first/second derivatives.
    pub fn terms(&self, qk: &[f64], q1: &[f64], u: &[f64]) -> Result<GpcDelTerms> {
        let (nq, k, m) = (self.nq(), self.gpc.n_coeffs(), self.gpc.control_dim());
        let np = nq * k;
        let mut out = GpcDelTerms {
            lhat: 0.0,
            grad: DVector::zeros(2 * np),
            hess: DMatrix::zeros(2 * np, 2 * np),
            force: DVector::zeros(np),
            force_jac: DMatrix::zeros(np, 2 * np + m),
        };
        for (idx, node) in self.gpc.nodes().iter().enumerate() {
            let phi = &node.phi;
            let w: Vec<f64> = self
                .positions(qk, phi)
                .into_iter()
                .chain(self.positions(q1, phi))
                .collect();
            let wf: Vec<f64> = w.iter().chain(u).copied().collect();
            let ld = self.lagrangian_fn(&node.params);
            let fd = self.force_fn(&node.params);
            let val = ld.eval(&w)[0];
            let g = autodiff::jacobian(&ld, &w);
            let h = autodiff::hessian(&ld, &w).slab(0);
            let f = fd.eval(&wf);
            let jf = autodiff::jacobian(&fd, &wf);
            if !val.is_finite() || !h.iter().all(|x| x.is_finite()) || !jf.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteAtNode {
                    context: "gPC discrete Lagrangian",
                    node: idx,
                    xi: node.xi.clone(),
                });
            }
            let wt = node.weight;
            out.lhat += wt * val;
            for p in 0..2 * nq {
                let gp = wt * g[(0, p)];
                for j in 0..k {
                    out.grad[p * k + j] += gp * phi[j];
                }
                for s in 0..2 * nq {
                    let hv = wt * h[(p, s)];
                    if hv == 0.0 {
                        continue;
                    }
                    for hh in 0..k {
                        let a = hv * phi[hh];
                        for d in 0..k {
                            out.hess[(p * k + hh, s * k + d)] += a * phi[d];
                        }
                    }
                }
            }
            for i in 0..nq {
                for j in 0..k {
                    let row = i * k + j;
                    let wj = wt * phi[j];
                    out.force[row] += wj * f[i];
                    for s in 0..2 * nq {
                        let a = wj * jf[(i, s)];
                        if a == 0.0 {
                            continue;
                        }
                        for d in 0..k {
                            out.force_jac[(row, s * k + d)] += a * phi[d];
                        }
                    }
                    for c in 0..m {
                        out.force_jac[(row, 2 * np + c)] += wj * jf[(i, 2 * nq + c)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Coefficient-space mass matrix `Σ w M(q(ξ)) ⊗ φφᵀ`, so `P̂ = A V` for
    /// Lagrangians quadratic in the velocities.
    pub fn momentum_map(&self, q: &[f64]) -> DMatrix<f64> {
        let (nq, k) = (self.nq(), self.gpc.n_coeffs());
        let mut a = DMatrix::zeros(nq * k, nq * k);
        for node in self.gpc.nodes() {
            let qs = self.positions(q, &node.phi);
            let mass = crate::models::mass_matrix(self.gpc.model(), &qs, &vec![0.0; nq], &node.params);
            for g in 0..nq {
                for i in 0..nq {
                    let mv = node.weight * mass[(g, i)];
                    if mv == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        for h in 0..k {
                            a[(g * k + j, i * k + h)] += mv * node.phi[j] * node.phi[h];
                        }
                    }
                }
            }
        }
        a
    }

    /// `p̂_ij = Σ w ∂L/∂v_i(q(ξ), v(ξ)) φ_j(ξ)` from coefficients `X = (Q, V)`.
    pub fn momenta_from_coefficients(&self, x: &DVector<f64>) -> DVector<f64> {
        let (nq, k) = (self.nq(), self.gpc.n_coeffs());
        let np = nq * k;
        let (q, v) = (&x.as_slice()[..np], &x.as_slice()[np..2 * np]);
        let mut p = DVector::zeros(np);
        for node in self.gpc.nodes() {
            let qs = self.positions(q, &node.phi);
            let vs = self.positions(v, &node.phi);
            let lag = crate::models::LagrangianFn {
                mech: self.gpc.model(),
                params: &node.params,
            };
            let z: Vec<f64> = qs.iter().chain(&vs).copied().collect();
            let g = autodiff::jacobian(&lag, &z);
            for i in 0..nq {
                let a = node.weight * g[(0, nq + i)];
                for j in 0..k {
                    p[i * k + j] += a * node.phi[j];
                }
            }
        }
        p
    }

    /// `(Q, P̂)` from gPC coefficients `X = (Q, V)`.
    pub fn state_from_coefficients(&self, x: &DVector<f64>) -> DVector<f64> {
        let np = self.block_len();
        let p = self.momenta_from_coefficients(x);
        DVector::from_iterator(2 * np, x.rows(0, np).iter().copied().chain(p.iter().copied()))
    }

    /// `X = (Q, V)` from `(Q, P̂)`.
    pub fn coefficients_from_state(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let np = self.block_len();
        let v = self
            .momentum_map(&z.as_slice()[..np])
            .lu()
            .solve(&z.rows(np, np).into_owned())
            .ok_or(Error::Singular("gPC momentum map"))?;
        Ok(DVector::from_iterator(2 * np, z.rows(0, np).iter().copied().chain(v.iter().copied())))
    }

    /// Elementwise `c` with `X ≈ c ∘ (Q, P̂)`: ones on positions and
    /// `1 / (M_ii ⟨φ_j, φ_j⟩)` on momenta, `M` evaluated at `q_ref` and the
    /// nominal parameters. Exact when the mass matrix is constant and diagonal.
    pub fn momentum_scaling(&self, q_ref: &[f64]) -> DVector<f64> {
        let (nq, k) = (self.nq(), self.gpc.n_coeffs());
        let np = nq * k;
        let xi0 = vec![0.0; self.gpc.basis().dim()];
        let params = self.gpc.params_at(&xi0);
        let mass = crate::models::mass_matrix(self.gpc.model(), q_ref, &vec![0.0; nq], &params);
        let mut c = DVector::from_element(2 * np, 1.0);
        for i in 0..nq {
            for j in 0..k {
                c[np + i * k + j] = 1.0 / (mass[(i, i)] * self.gpc.basis().norm_sq(j));
            }
        }
        c
    }

    /// Solves `P̂ᵏ + D₁L̂_d + F̂_d⁻ = 0` for `Qᵏ⁺¹`; returns it with the final
    /// terms and the residual ∞-norm.
    pub fn solve_implicit(&self, z: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, GpcDelTerms, f64)> {
        let np = self.block_len();
        if z.len() != 2 * np {
            return Err(Error::Dimension {
                context: "DEL state",
                expected: 2 * np,
                got: z.len(),
            });
        }
        let qk = &z.as_slice()[..np];
        let pk = z.rows(np, np).into_owned();
        let v0 = self
            .momentum_map(qk)
            .lu()
            .solve(&pk)
            .ok_or(Error::Singular("gPC momentum map"))?;
        let mut q1: DVector<f64> = DVector::from_column_slice(qk) + v0 * self.dt;
        let mut residual = f64::INFINITY;
        for _ in 0..=self.newton.max_iter {
            let terms = self.terms(qk, q1.as_slice(), u.as_slice())?;
            let r = &pk + terms.grad.rows(0, np) + &terms.force;
            residual = r.amax();
            if !residual.is_finite() {
                return Err(Error::NonFinite("DEL residual"));
            }
            if residual < self.newton.tol {
                return Ok((q1, terms, residual));
            }
            let mhat = self.mhat(&terms);
            let dq = mhat.lu().solve(&r).ok_or(Error::Singular("DEL Newton matrix"))?;
            q1 -= dq;
        }
        Err(Error::NewtonDiverged {
            iterations: self.newton.max_iter,
            residual,
        })
    }

    /// `M̂ = D₂D₁L̂ + D₂F̂⁻`.
    fn mhat(&self, t: &GpcDelTerms) -> DMatrix<f64> {
        let np = self.block_len();
        t.hess.view((0, np), (np, np)) + t.force_jac.view((0, np), (np, np))
    }
}

impl<M: Mechanical> Discretization for DelGpc<'_, M> {
    fn state_dim(&self) -> usize {
        2 * self.block_len()
    }
    fn control_dim(&self) -> usize {
        self.gpc.control_dim()
    }

    fn step(&self, _k: usize, z: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let np = self.block_len();
        let (q1, terms, _) = self.solve_implicit(z, u)?;
        // P̂ᵏ⁺¹ = D₂L̂_d (F̂_d⁺ ≡ 0), written as P̂ᵏ + (D₁L̂_d + D₂L̂_d) + F̂_d⁻.
        // Equal at the root; this form leaves the Newton residual out of the
        // momentum, so symmetries of L̂_d hold to rounding.
        let pk = z.rows(np, np);
        let p1 = pk + (terms.grad.rows(0, np) + terms.grad.rows(np, np)) + &terms.force;
        let next = DVector::from_iterator(2 * np, q1.iter().copied().chain(p1.iter().copied()));
        check_finite(&next, "DEL step")?;
        Ok(next)
    }

    fn linearize(&self, _k: usize, z: &DVector<f64>, u: &DVector<f64>, second_order: bool) -> Result<StepLinearization> {
        let np = self.block_len();
        let m = self.control_dim();
        let (q1, t, _) = self.solve_implicit(z, u)?;
        let minv = self
            .mhat(&t)
            .try_inverse()
            .ok_or(Error::Singular("DEL Newton matrix"))?;
        let d1d1 = t.hess.view((0, 0), (np, np));
        let d2d2 = t.hess.view((np, np), (np, np)).into_owned();
        let d1d2 = t.hess.view((np, 0), (np, np));
        let d1f = t.force_jac.view((0, 0), (np, np));
        let d3f = t.force_jac.view((0, 2 * np), (np, m));

        let dq_dq = -&minv * (d1d1 + d1f);
        let dq_dp = -&minv;
        let dq_du = -&minv * d3f;
        let dp_dq = &d2d2 * &dq_dq + d1d2;
        let dp_dp = &d2d2 * &dq_dp;
        let dp_du = &d2d2 * &dq_du;

        let mut theta = DMatrix::zeros(2 * np, 2 * np);
        theta.view_mut((0, 0), (np, np)).copy_from(&dq_dq);
        theta.view_mut((0, np), (np, np)).copy_from(&dq_dp);
        theta.view_mut((np, 0), (np, np)).copy_from(&dp_dq);
        theta.view_mut((np, np), (np, np)).copy_from(&dp_dp);
        let mut b = DMatrix::zeros(2 * np, m);
        b.view_mut((0, 0), (np, m)).copy_from(&dq_du);
        b.view_mut((np, 0), (np, m)).copy_from(&dp_du);

        let second = if second_order {
            let nq = self.nq();
            let k = self.gpc.n_coeffs();
            let qk = &z.as_slice()[..np];
            let mut l3 = Vec::new();
            let mut f2 = Vec::new();
            for node in self.gpc.nodes() {
                let w: Vec<f64> = self
                    .positions(qk, &node.phi)
                    .into_iter()
                    .chain(self.positions(q1.as_slice(), &node.phi))
                    .collect();
                let wf: Vec<f64> = w.iter().chain(u.iter()).copied().collect();
                l3.push(autodiff::third_derivatives(&self.lagrangian_fn(&node.params), &w));
                f2.push(autodiff::hessian(&self.force_fn(&node.params), &wf));
            }
            // E = ∂(Qᵏ, Qᵏ⁺¹, u)/∂(Qᵏ, P̂ᵏ, u)
            let nw = 2 * np + m;
            let mut e = DMatrix::zeros(nw, nw);
            e.view_mut((0, 0), (np, np)).fill_with_identity();
            e.view_mut((np, 0), (np, np)).copy_from(&dq_dq);
            e.view_mut((np, np), (np, np)).copy_from(&dq_dp);
            e.view_mut((np, 2 * np), (np, m)).copy_from(&dq_du);
            e.view_mut((2 * np, 2 * np), (m, m)).fill_with_identity();
            Some(Arc::new(DelSecond {
                nq,
                k,
                m,
                weights: self.gpc.nodes().iter().map(|n| n.weight).collect(),
                phi: self.gpc.nodes().iter().map(|n| n.phi.clone()).collect(),
                l3,
                f2,
                mhat_inv: minv,
                d2d2,
                e,
            }) as Arc<dyn SecondOrderExpansion>)
        } else {
            None
        };
        Ok(StepLinearization { theta, b, second })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpc::{Distribution, QuadratureLevel};
    use crate::models::{ConstantForce, Duffing, FreeParticle, HarmonicOscillator};

    fn det(v: f64) -> Distribution {
        Distribution::Deterministic(v)
    }

    #[test]
    fn discrete_lagrangian_examples() {
        let fp = FreeParticle {
            mass: 1.0,
            q0: det(0.0),
            v0: det(0.0),
        };
        assert!((discrete_lagrangian(&fp, &[0.0], &[1.0], 0.5, 0.5, &[]) - 1.0).abs() < 1e-15);
        let osc = HarmonicOscillator {
            stiffness: 1.0,
            q0: det(0.0),
            v0: det(0.0),
        };
        assert!((discrete_lagrangian(&osc, &[1.0], &[1.0], 0.1, 0.5, &[]) + 0.05).abs() < 1e-15);
        let a = discrete_lagrangian(&fp, &[0.3], &[0.9], 0.2, 0.0, &[]);
        let b = discrete_lagrangian(&fp, &[0.3], &[0.9], 0.2, 1.0, &[]);
        assert_eq!(a, b);
    }

    #[test]
    fn discrete_force_examples() {
        let d = Duffing::default();
        let (minus, plus) = discrete_forces(&d, &[0.0], &[0.1], &[2.0], 0.1, &[3.0]);
        assert!((minus[0] - 0.175).abs() < 1e-15);
        assert_eq!(plus[0], 0.0);
        let cf = ConstantForce {
            force: 3.0,
            q0: det(0.0),
            v0: det(0.0),
        };
        let (m2, _) = discrete_forces(&cf, &[1.0], &[2.0], &[0.0], 0.25, &[]);
        assert_eq!(m2[0], 0.75);
        let (m3, p3) = discrete_forces(&d, &[0.5], &[0.5], &[0.0], 0.1, &[3.0]);
        assert_eq!((m3[0], p3[0]), (0.0, 0.0));
    }

    #[test]
    fn euler_step_examples() {
        let lin = LinearStep {
            a: DMatrix::from_element(1, 1, 0.9),
            b: DMatrix::zeros(1, 1),
        };
        let x = DVector::from_vec(vec![1.0]);
        let u = DVector::zeros(1);
        assert!((lin.step(0, &x, &u).unwrap()[0] - 0.9).abs() < 1e-15);
        let fp = FreeParticle {
            mass: 1.0,
            q0: det(0.0),
            v0: det(0.0),
        };
        let g = GpcModel::new(fp, 0, QuadratureLevel::Auto).unwrap();
        let e = EulerGpc::new(&g, 0.1).unwrap();
        let x = DVector::from_vec(vec![2.0, 0.0]);
        assert_eq!(e.step(0, &x, &u).unwrap(), x);
        assert!(EulerGpc::new(&g, 0.0).is_err());
    }

    #[test]
    fn free_particle_del_is_exact() {
        let fp = FreeParticle {
            mass: 2.0,
            q0: Distribution::Gaussian { mean: 1.0, std: 0.3 },
            v0: det(0.5),
        };
        let g = GpcModel::new(fp, 2, QuadratureLevel::Auto).unwrap();
        let del = DelGpc::new(&g, 0.1).unwrap();
        let z = del.state_from_coefficients(&g.initial_coefficients().unwrap());
        let np = del.block_len();
        let u = DVector::zeros(1);
        let z1 = del.step(0, &z, &u).unwrap();
        for i in 0..np {
            let expected_q = z[i] + 0.1 * z[np + i] / (2.0 * g.basis().norm_sq(i % g.n_coeffs()));
            assert!((z1[i] - expected_q).abs() < 1e-13);
            assert!((z1[np + i] - z[np + i]).abs() < 1e-12);
        }
        let lin = del.linearize(0, &z, &u, true).unwrap();
        let t = lin.second.unwrap().tensors();
        assert!(t.gamma.max_abs() < 1e-12 && t.delta.max_abs() < 1e-12 && t.lambda.max_abs() < 1e-12);
    }

    #[test]
    fn constant_force_adds_impulse() {
        let cf = ConstantForce {
            force: 3.0,
            q0: det(0.0),
            v0: det(1.0),
        };
        let g = GpcModel::new(cf, 0, QuadratureLevel::Auto).unwrap();
        let del = DelGpc::new(&g, 0.1).unwrap();
        let z = del.state_from_coefficients(&g.initial_coefficients().unwrap());
        let z1 = del.step(0, &z, &DVector::zeros(1)).unwrap();
        assert!((z1[1] - (z[1] + 3.0 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_gpc_del_matches_physical_del() {
        let d = Duffing::default();
        let g = GpcModel::with_distributions(d.clone(), &[det(3.0)], &[det(1.5), det(-0.5)], 3, QuadratureLevel::Auto)
            .unwrap();
        let del = DelGpc::new(&g, 0.05).unwrap();
        let phys = PhysicalDel {
            mech: &d,
            params: vec![3.0],
            dt: 0.05,
            newton: NewtonConfig::default(),
        };
        let mut z = del.state_from_coefficients(&DVector::from_vec(vec![1.5, -0.5]));
        let mut q = vec![1.5];
        let mut p = phys.momentum(&[1.5], &[-0.5]).as_slice().to_vec();
        assert!((p[0] - z[1]).abs() < 1e-15);
        let u = DVector::from_vec(vec![0.7]);
        for k in 0..20 {
            z = del.step(k, &z, &u).unwrap();
            let (q1, p1) = phys.step(&q, &p, &[0.7]).unwrap();
            q = q1.as_slice().to_vec();
            p = p1.as_slice().to_vec();
            assert!((z[0] - q[0]).abs() < 1e-12 && (z[1] - p[0]).abs() < 1e-12);
        }
    }
}

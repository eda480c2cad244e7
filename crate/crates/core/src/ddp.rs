//! Differential dynamic programming over a [`Discretization`].
//!
//! One iteration: linearize along the nominal `(X̄, ū)` (parallel over steps),
//! run the backward recursion
//!
//! ```text
//! Q_x  = L_x + Θᵀ V'_x                  Q_u  = L_u + Bᵀ V'_x
//! Q_xx = L_xx + Θᵀ V'_xx Θ + Γ ×₁ V'_x  Q_uu = L_uu + Bᵀ V'_xx B + Λ ×₁ V'_x
//! Q_ux = L_ux + Bᵀ V'_xx Θ + Ξ ×₁ V'_x  Q_xu = L_xu + Θᵀ V'_xx B + Δ ×₁ V'_x
//! ℓ = −(Q_uu + θI)⁻¹ Q_u                Σ = −(Q_uu + θI)⁻¹ Q_ux
//! ```
//!
//! then roll out `u = ū + γℓ + Σ(X − X̄)` for `γ = 1, ½, …` until the cost
//! drops.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cost::Cost;
use crate::discretize::{Discretization, StepLinearization};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct QExpansion {
    pub q0: f64,
    pub qx: DVector<f64>,
    pub qu: DVector<f64>,
    pub qxx: DMatrix<f64>,
    pub quu: DMatrix<f64>,
    pub qux: DMatrix<f64>,
    pub qxu: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct ValueExpansion {
    pub v: f64,
    pub vx: DVector<f64>,
    pub vxx: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct BackwardPass {
    /// Feedforward `ℓ(t_k)`.
    pub ff: Vec<DVector<f64>>,
    /// Feedback `Σ(t_k)`.
    pub fb: Vec<DMatrix<f64>>,
    /// `V(t_0) … V(t_f)`.
    pub values: Vec<ValueExpansion>,
    pub q: Vec<QExpansion>,
    /// `Σ_k Q_uᵀ ℓ`.
    pub dv1: f64,
    /// `Σ_k ½ ℓᵀ Q_uu ℓ`.
    pub dv2: f64,
    /// `Σ_k Q_uᵀ Q_uu⁻¹ Q_u` with the unshifted `Q_uu`.
    pub qu_quu_inv_qu: f64,
    /// `max_k ‖Q_u‖_∞`.
    pub max_qu: f64,
}

impl BackwardPass {
    /// Predicted cost change for step size `γ`.
    pub fn predicted_change(&self, gamma: f64) -> f64 {
        gamma * self.dv1 + gamma * gamma * self.dv2
    }
}

/// Which second-order dynamics terms enter `Q_xx`, `Q_uu`, `Q_ux`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expansion {
    /// Full DDP with the dynamics tensors.
    SecondOrder,
    /// Gauss–Newton (iLQR): tensors dropped.
    FirstOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdpOptions {
    pub max_iterations: usize,
    /// Relative cost change regarded as stalled.
    pub rel_tol: f64,
    /// `‖Q_u‖_∞` regarded as stationary.
    pub qu_tol: f64,
    pub theta_init: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    /// `Q_uu + θI` must have its smallest eigenvalue above this.
    pub theta_floor: f64,
    /// Line search tries `γ = 2⁰ … 2^{-line_search_halvings}`.
    pub line_search_halvings: u32,
    pub expansion: Expansion,
}

impl Default for DdpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            rel_tol: 1e-9,
            qu_tol: 1e-6,
            theta_init: 0.0,
            theta_min: 1e-6,
            theta_max: 1e20,
            theta_floor: 0.0,
            line_search_halvings: 16,
            expansion: Expansion::SecondOrder,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// Line search failed at the largest allowed regularization.
    RegularizationExhausted,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iterations",
            Termination::RegularizationExhausted => "regularization_exhausted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost after the iteration (unchanged if rejected).
    pub cost: f64,
    /// Accepted step size, `None` if the line search failed.
    pub gamma: Option<f64>,
    pub theta: f64,
    pub max_qu: f64,
}

#[derive(Clone, Debug)]
pub struct DdpSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub ff: Vec<DVector<f64>>,
    pub fb: Vec<DMatrix<f64>>,
    pub values: Vec<ValueExpansion>,
    pub cost: f64,
    pub records: Vec<IterationRecord>,
    /// `U⁽⁰⁾, U⁽¹⁾, …`: the nominal controls after every accepted iteration,
    /// starting from the initial guess.
    pub control_history: Vec<Vec<DVector<f64>>>,
    pub cost_history: Vec<f64>,
    pub termination: Termination,
    pub max_qu: f64,
}

impl DdpSolution {
    /// `‖U⁽ˡ⁾ − U*‖` (Euclidean over all steps) against the final controls.
    pub fn control_distances(&self) -> Vec<f64> {
        self.control_history
            .iter()
            .map(|u| {
                u.iter()
                    .zip(&self.controls)
                    .map(|(a, b)| (a - b).norm_squared())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Linearizations of every step, computed in parallel.
pub fn linearize_trajectory<D: Discretization>(
    disc: &D,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    expansion: Expansion,
) -> Result<Vec<StepLinearization>> {
    let second = expansion == Expansion::SecondOrder;
    (0..us.len())
        .into_par_iter()
        .map(|k| disc.linearize(k, &xs[k], &us[k], second))
        .collect()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Backward recursion. `gamma` enters only the scalar `V` update.
pub fn backward_pass<C: Cost + ?Sized>(
    lins: &[StepLinearization],
    cost: &C,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    theta: f64,
    options: &DdpOptions,
    gamma: f64,
) -> Result<BackwardPass> {
    let kf = us.len();
    assert_eq!(lins.len(), kf, "one linearization per step");
    let term = cost.terminal(&xs[kf]);
    let mut v = ValueExpansion {
        v: term.f,
        vx: term.fx,
        vxx: term.fxx,
    };
    let mut values = vec![v.clone()];
    let mut ff = Vec::with_capacity(kf);
    let mut fb = Vec::with_capacity(kf);
    let mut qs = Vec::with_capacity(kf);
    let (mut dv1, mut dv2, mut qq, mut max_qu) = (0.0, 0.0, 0.0, 0.0f64);
    for k in (0..kf).rev() {
        let lin = &lins[k];
        let st = cost.stage(k, &xs[k], &us[k]);
        let vxx_theta = &v.vxx * &lin.theta;
        let mut q = QExpansion {
            q0: st.l + v.v,
            qx: &st.lx + lin.theta.transpose() * &v.vx,
            qu: &st.lu + lin.b.transpose() * &v.vx,
            qxx: &st.lxx + lin.theta.transpose() * &vxx_theta,
            quu: &st.luu + lin.b.transpose() * &v.vxx * &lin.b,
            qux: &st.lux + lin.b.transpose() * &vxx_theta,
            qxu: st.lux.transpose() + lin.theta.transpose() * &v.vxx * &lin.b,
        };
        if options.expansion == Expansion::SecondOrder {
            if let Some(second) = &lin.second {
                let c = second.contract(&v.vx);
                q.qxx += &c.xx;
                q.quu += &c.uu;
                q.qxu += &c.xu;
                q.qux += c.xu.transpose();
            }
        }
        symmetrize(&mut q.qxx);
        symmetrize(&mut q.quu);
        let avg = (&q.qxu + q.qux.transpose()) * 0.5;
        q.qux = avg.transpose();
        q.qxu = avg;

        let m = q.quu.nrows();
        let reg = &q.quu + DMatrix::identity(m, m) * theta;
        let min_eig = reg.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eig > options.theta_floor) {
            return Err(Error::NotPositiveDefinite { step: k, min_eigenvalue: min_eig });
        }
        let chol = reg.cholesky().ok_or(Error::NotPositiveDefinite { step: k, min_eigenvalue: min_eig })?;
        let l = -chol.solve(&q.qu);
        let sigma = -chol.solve(&q.qux);

        if let Some(raw) = q.quu.clone().cholesky() {
            qq += q.qu.dot(&raw.solve(&q.qu));
        } else {
            qq = f64::NAN;
        }
        let qu_l = q.qu.dot(&l);
        let l_quu_l = l.dot(&(&q.quu * &l));
        dv1 += qu_l;
        dv2 += 0.5 * l_quu_l;
        max_qu = max_qu.max(q.qu.amax());

        let st_quu = sigma.transpose() * &q.quu;
        let vx = &q.qx + &st_quu * &l + sigma.transpose() * &q.qu + &q.qxu * &l;
        let mut vxx = &q.qxx + &st_quu * &sigma + sigma.transpose() * &q.qux + &q.qxu * &sigma;
        symmetrize(&mut vxx);
        v = ValueExpansion {
            v: q.q0 + gamma * qu_l + 0.5 * gamma * gamma * l_quu_l,
            vx,
            vxx,
        };
        values.push(v.clone());
        ff.push(l);
        fb.push(sigma);
        qs.push(q);
    }
    ff.reverse();
    fb.reverse();
    values.reverse();
    qs.reverse();
    Ok(BackwardPass {
        ff,
        fb,
        values,
        q: qs,
        dv1,
        dv2,
        qu_quu_inv_qu: qq,
        max_qu,
    })
}

/// Closed-loop rollout. Returns `None` when propagation fails or any value
/// becomes non-finite.
#[allow(clippy::too_many_arguments)]
pub fn forward_pass<D: Discretization, C: Cost + ?Sized>(
    disc: &D,
    cost: &C,
    x0: &DVector<f64>,
    xs_nom: &[DVector<f64>],
    us_nom: &[DVector<f64>],
    ff: &[DVector<f64>],
    fb: &[DMatrix<f64>],
    gamma: f64,
) -> Option<(Vec<DVector<f64>>, Vec<DVector<f64>>, f64)> {
    let kf = us_nom.len();
    let mut xs = Vec::with_capacity(kf + 1);
    let mut us = Vec::with_capacity(kf);
    xs.push(x0.clone());
    let mut total = 0.0;
    for k in 0..kf {
        let dx = &xs[k] - &xs_nom[k];
        let u = &us_nom[k] + &ff[k] * gamma + &fb[k] * dx;
        if !u.iter().all(|v| v.is_finite()) {
            return None;
        }
        total += cost.stage_value(k, &xs[k], &u);
        let next = disc.step(k, &xs[k], &u).ok()?;
        if !next.iter().all(|v| v.is_finite()) {
            return None;
        }
        xs.push(next);
        us.push(u);
    }
    total += cost.terminal_value(&xs[kf]);
    total.is_finite().then_some((xs, us, total))
}

/// Open-loop rollout of `us` from `x0`.
pub fn rollout<D: Discretization>(disc: &D, x0: &DVector<f64>, us: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let mut xs = vec![x0.clone()];
    for (k, u) in us.iter().enumerate() {
        let next = disc.step(k, &xs[k], u)?;
        xs.push(next);
    }
    Ok(xs)
}

/// Full solve from an initial control guess.
pub fn solve<D: Discretization, C: Cost + ?Sized>(
    disc: &D,
    cost: &C,
    x0: &DVector<f64>,
    u_init: Vec<DVector<f64>>,
    options: &DdpOptions,
) -> Result<DdpSolution> {
    if u_init.len() < 2 {
        return Err(Error::InvalidArgument(format!("horizon must have at least 2 steps, got {}", u_init.len())));
    }
    if x0.len() != disc.state_dim() {
        return Err(Error::Dimension {
            context: "initial state",
            expected: disc.state_dim(),
            got: x0.len(),
        });
    }
    if let Some(u) = u_init.iter().find(|u| u.len() != disc.control_dim()) {
        return Err(Error::Dimension {
            context: "initial controls",
            expected: disc.control_dim(),
            got: u.len(),
        });
    }
    let mut us = u_init;
    let mut xs = rollout(disc, x0, &us)?;
    let mut j = cost.total(&xs, &us);
    if !j.is_finite() {
        return Err(Error::NonFinite("initial cost"));
    }
    let mut theta = options.theta_init;
    let mut records = Vec::new();
    let mut control_history = vec![us.clone()];
    let mut cost_history = vec![j];
    let mut small_steps = 0usize;
    let mut termination = Termination::MaxIterations;
    let mut last_bp: Option<BackwardPass> = None;
    let mut lins = linearize_trajectory(disc, &xs, &us, options.expansion)?;

    let mut iteration = 0;
    while iteration < options.max_iterations {
        // indefinite Q_uu: raise θ and redo the backward pass within the same iteration
        let bp = match backward_pass(&lins, cost, &xs, &us, theta, options, 1.0) {
            Ok(bp) => bp,
            Err(Error::NotPositiveDefinite { .. }) => {
                theta = options.theta_min.max(10.0 * theta);
                if theta > options.theta_max {
                    termination = Termination::RegularizationExhausted;
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        iteration += 1;
        if bp.max_qu < options.qu_tol && small_steps >= 2 {
            termination = Termination::Converged;
            last_bp = Some(bp);
            break;
        }
        let mut accepted = None;
        for h in 0..=options.line_search_halvings {
            let gamma = 0.5f64.powi(h as i32);
            if let Some((xn, un, jn)) = forward_pass(disc, cost, x0, &xs, &us, &bp.ff, &bp.fb, gamma) {
                if jn < j {
                    accepted = Some((gamma, xn, un, jn));
                    break;
                }
            }
        }
        match accepted {
            Some((gamma, xn, un, jn)) => {
                let rel = (j - jn) / j.abs().max(f64::MIN_POSITIVE);
                small_steps = if rel < options.rel_tol { small_steps + 1 } else { 0 };
                xs = xn;
                us = un;
                j = jn;
                theta /= 10.0;
                records.push(IterationRecord {
                    iteration,
                    cost: j,
                    gamma: Some(gamma),
                    theta,
                    max_qu: bp.max_qu,
                });
                control_history.push(us.clone());
                cost_history.push(j);
                lins = linearize_trajectory(disc, &xs, &us, options.expansion)?;
                last_bp = Some(bp);
            }
            None => {
                if bp.max_qu < options.qu_tol {
                    termination = Termination::Converged;
                    records.push(IterationRecord {
                        iteration,
                        cost: j,
                        gamma: None,
                        theta,
                        max_qu: bp.max_qu,
                    });
                    last_bp = Some(bp);
                    break;
                }
                theta = options.theta_min.max(10.0 * theta);
                records.push(IterationRecord {
                    iteration,
                    cost: j,
                    gamma: None,
                    theta,
                    max_qu: bp.max_qu,
                });
                last_bp = Some(bp);
                if theta > options.theta_max {
                    termination = Termination::RegularizationExhausted;
                    break;
                }
            }
        }
    }
    // Gains and values consistent with the returned nominal.
    let (ff, fb, values, max_qu) = match backward_pass(&lins, cost, &xs, &us, theta, options, 1.0).ok().or(last_bp) {
        Some(bp) => (bp.ff, bp.fb, bp.values, bp.max_qu),
        // never got a usable expansion: report open-loop nominal only
        None => (
            vec![DVector::zeros(disc.control_dim()); us.len()],
            vec![DMatrix::zeros(disc.control_dim(), disc.state_dim()); us.len()],
            Vec::new(),
            f64::NAN,
        ),
    };
    Ok(DdpSolution {
        states: xs,
        controls: us,
        ff,
        fb,
        values,
        cost: j,
        records,
        control_history,
        cost_history,
        termination,
        max_qu,
    })
}

//! Quadratic costs over gPC coefficients.
//!
//! For a state `x(ξ) = Σ_j X_j φ_j(ξ)` and a deterministic goal `g`,
//!
//! ```text
//! E[½(x − g)ᵀ S (x − g)] = ½ (X − G)ᵀ 𝐒 (X − G),   𝐒 = S ⊗ diag(E[φ_0²], …, E[φ_K²])
//! ```
//!
//! with `G` holding `g` on the `j = 0` slots. Expectations are taken under the
//! probability measure, so Legendre weights carry `⟨φ_j, φ_j⟩ / 2` per uniform
//! dimension. Running costs use a left rectangle rule: stage `k` contributes
//! `Δt·[½(Xᵏ − Gᵏ)ᵀ𝐒(Xᵏ − Gᵏ) + ½uᵏᵀRuᵏ]` for `k = 0 … K_f − 1` and the
//! terminal term is evaluated at `X^{K_f}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::orthopoly::PolynomialBasis;

/// Value and derivatives of one running-cost stage.
#[derive(Clone, Debug)]
pub struct StageDerivatives {
    pub l: f64,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct TerminalDerivatives {
    pub f: f64,
    pub fx: DVector<f64>,
    pub fxx: DMatrix<f64>,
}

/// Twice-differentiable trajectory cost as seen by the DDP solver.
pub trait Cost: Send + Sync {
    fn stage(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageDerivatives;
    fn terminal(&self, x: &DVector<f64>) -> TerminalDerivatives;

    fn stage_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.stage(k, x, u).l
    }
    fn terminal_value(&self, x: &DVector<f64>) -> f64 {
        self.terminal(x).f
    }

    /// `Σ_k L_k(xᵏ, uᵏ) + F(x^{K_f})`; `xs` has one more entry than `us`.
    fn total(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        assert_eq!(xs.len(), us.len() + 1, "trajectory lengths");
        let run: f64 = us.iter().enumerate().map(|(k, u)| self.stage_value(k, &xs[k], u)).sum();
        run + self.terminal_value(&xs[us.len()])
    }
}

/// Goal in coefficient space.
#[derive(Clone, Debug, PartialEq)]
pub enum Goal {
    Constant(DVector<f64>),
    /// One entry per step `0 … K_f`.
    PerStep(Vec<DVector<f64>>),
}

impl Goal {
    pub fn at(&self, k: usize) -> &DVector<f64> {
        match self {
            Goal::Constant(g) => g,
            Goal::PerStep(gs) => &gs[k.min(gs.len() - 1)],
        }
    }
}

/// Diagonal quadratic cost `Δt·½[(X−G)ᵀ𝐒(X−G) + uᵀRu]` per stage plus
/// `½(X−G)ᵀ𝐒_f(X−G)` at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticGpcCost {
    /// Diagonal of 𝐒.
    pub s: DVector<f64>,
    /// Diagonal of 𝐒_f.
    pub sf: DVector<f64>,
    pub r: DMatrix<f64>,
    pub goal: Goal,
    /// Index of the terminal step, used to pick the terminal goal.
    pub horizon: usize,
    pub dt: f64,
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    match w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        Some(i) => Err(Error::InvalidArgument(format!("{what}[{i}] must be a finite nonnegative weight, got {}", w[i]))),
        None => Ok(()),
    }
}

fn check_control_weight(r: &DMatrix<f64>) -> Result<()> {
    if !r.is_square() || (r - r.transpose()).amax() > 1e-12 * (1.0 + r.amax()) {
        return Err(Error::InvalidArgument("R must be symmetric".into()));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument("R must be positive definite".into()));
    }
    Ok(())
}

/// Embeds a physical goal on the mean slots.
pub fn embed_goal(goal: &[f64], basis: &PolynomialBasis) -> DVector<f64> {
    let k = basis.len();
    let mut g = DVector::zeros(goal.len() * k);
    for (i, v) in goal.iter().enumerate() {
        g[i * k] = *v;
    }
    g
}

fn diagonal_of(m: &DMatrix<f64>, what: &str) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!("{what} must be square")));
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{what} must be diagonal (no cross terms), entry ({i}, {j}) = {}",
                    m[(i, j)]
                )));
            }
        }
    }
    let d: Vec<f64> = m.diagonal().iter().copied().collect();
    check_weights(&d, what)?;
    Ok(d)
}

impl QuadraticGpcCost {
    /// Expected-cost transform of a physical quadratic cost with diagonal
    /// state weights.
    pub fn expected_quadratic(
        s: &DMatrix<f64>,
        s_f: &DMatrix<f64>,
        r: &DMatrix<f64>,
        goal: Goal,
        horizon: usize,
        dt: f64,
        basis: &PolynomialBasis,
    ) -> Result<Self> {
        let sd = diagonal_of(s, "S")?;
        let sfd = diagonal_of(s_f, "S_f")?;
        let expand = |d: &[f64]| {
            let w: Vec<Vec<f64>> = d.iter().map(|&v| vec![v; basis.len()]).collect();
            w
        };
        Self::weighted(&expand(&sd), &expand(&sfd), r, goal, horizon, dt, basis)
    }

    /// Per-coefficient weights: `𝐒_i = diag(s_i0, s_i1 E[φ_1²], …)`.
    /// `s[i][j]` is the weight of state `i`, coefficient `j`.
    pub fn weighted(
        s: &[Vec<f64>],
        s_f: &[Vec<f64>],
        r: &DMatrix<f64>,
        goal: Goal,
        horizon: usize,
        dt: f64,
        basis: &PolynomialBasis,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if s.len() != s_f.len() {
            return Err(Error::Dimension {
                context: "running vs terminal state weights",
                expected: s.len(),
                got: s_f.len(),
            });
        }
        check_control_weight(r)?;
        let k = basis.len();
        let flatten = |w: &[Vec<f64>], what: &str| -> Result<DVector<f64>> {
            let mut out = DVector::zeros(w.len() * k);
            for (i, row) in w.iter().enumerate() {
                if row.len() != k {
                    return Err(Error::Dimension {
                        context: "per-coefficient weights",
                        expected: k,
                        got: row.len(),
                    });
                }
                check_weights(row, what)?;
                for j in 0..k {
                    out[i * k + j] = row[j] * basis.expected_sq(j);
                }
            }
            Ok(out)
        };
        let sv = flatten(s, "s")?;
        let sfv = flatten(s_f, "s_f")?;
        let n = sv.len();
        let check_goal = |g: &DVector<f64>| -> Result<()> {
            if g.len() != n {
                return Err(Error::Dimension {
                    context: "goal",
                    expected: n,
                    got: g.len(),
                });
            }
            Ok(())
        };
        match &goal {
            Goal::Constant(g) => check_goal(g)?,
            Goal::PerStep(gs) => {
                if gs.len() != horizon + 1 {
                    return Err(Error::Dimension {
                        context: "goal trajectory length",
                        expected: horizon + 1,
                        got: gs.len(),
                    });
                }
                gs.iter().try_for_each(check_goal)?;
            }
        }
        Ok(Self {
            s: sv,
            sf: sfv,
            r: r.clone(),
            goal,
            horizon,
            dt,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.s.len()
    }

    pub fn control_dim(&self) -> usize {
        self.r.nrows()
    }

    /// Cost in variables `y` with `x = c ∘ y` (elementwise), e.g. momentum
    /// coordinates of a variational integrator.
    pub fn rescaled(&self, c: &DVector<f64>) -> Result<Self> {
        if c.len() != self.state_dim() || c.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("rescaling must be finite, nonzero and state-sized".into()));
        }
        let c2 = c.component_mul(c);
        let goal = match &self.goal {
            Goal::Constant(g) => Goal::Constant(g.component_div(c)),
            Goal::PerStep(gs) => Goal::PerStep(gs.iter().map(|g| g.component_div(c)).collect()),
        };
        Ok(Self {
            s: self.s.component_mul(&c2),
            sf: self.sf.component_mul(&c2),
            r: self.r.clone(),
            goal,
            horizon: self.horizon,
            dt: self.dt,
        })
    }

    /// `½(X−G)ᵀ𝐒(X−G)` without the `Δt` factor.
    pub fn state_term(&self, k: usize, x: &DVector<f64>) -> f64 {
        let e = x - self.goal.at(k);
        0.5 * e.iter().zip(self.s.iter()).map(|(a, w)| w * a * a).sum::<f64>()
    }
}

impl Cost for QuadraticGpcCost {
    fn stage(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageDerivatives {
        let e = x - self.goal.at(k);
        let ru = &self.r * u;
        let lx = e.component_mul(&self.s) * self.dt;
        let l = 0.5 * self.dt * (e.dot(&e.component_mul(&self.s)) + u.dot(&ru));
        StageDerivatives {
            l,
            lx,
            lu: ru * self.dt,
            lxx: DMatrix::from_diagonal(&(&self.s * self.dt)),
            luu: &self.r * self.dt,
            lux: DMatrix::zeros(u.len(), x.len()),
        }
    }

    fn terminal(&self, x: &DVector<f64>) -> TerminalDerivatives {
        let e = x - self.goal.at(self.horizon);
        let fx = e.component_mul(&self.sf);
        TerminalDerivatives {
            f: 0.5 * e.dot(&fx),
            fx,
            fxx: DMatrix::from_diagonal(&self.sf),
        }
    }

    fn stage_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = x - self.goal.at(k);
        0.5 * self.dt * (e.dot(&e.component_mul(&self.s)) + u.dot(&(&self.r * u)))
    }

    fn terminal_value(&self, x: &DVector<f64>) -> f64 {
        let e = x - self.goal.at(self.horizon);
        0.5 * e.dot(&e.component_mul(&self.sf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orthopoly::PolyFamily;

    fn hermite1() -> PolynomialBasis {
        PolynomialBasis::new(vec![PolyFamily::HermiteProbabilists], 1, 1).unwrap()
    }

    fn r1() -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }

    #[test]
    fn kronecker_weights() {
        let s = DMatrix::from_element(1, 1, 2.0);
        let c = QuadraticGpcCost::expected_quadratic(&s, &s, &r1(), Goal::Constant(DVector::zeros(2)), 2, 0.1, &hermite1())
            .unwrap();
        assert_eq!(c.s.as_slice(), &[2.0, 2.0]);
        let leg = PolynomialBasis::new(vec![PolyFamily::Legendre], 1, 1).unwrap();
        let one = DMatrix::from_element(1, 1, 1.0);
        let c = QuadraticGpcCost::expected_quadratic(&one, &one, &r1(), Goal::Constant(DVector::zeros(2)), 2, 0.1, &leg)
            .unwrap();
        assert!((c.s[0] - 1.0).abs() < 1e-15 && (c.s[1] - 1.0 / 3.0).abs() < 1e-15);
        let z = DMatrix::zeros(1, 1);
        let c = QuadraticGpcCost::expected_quadratic(&z, &z, &r1(), Goal::Constant(DVector::zeros(2)), 2, 0.1, &leg)
            .unwrap();
        assert_eq!(c.s.amax(), 0.0);
    }

    #[test]
    fn rejects_cross_terms_and_negative_weights() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]);
        let b = PolynomialBasis::new(vec![PolyFamily::HermiteProbabilists], 1, 1).unwrap();
        let g = Goal::Constant(DVector::zeros(4));
        assert!(QuadraticGpcCost::expected_quadratic(&s, &s, &r1(), g.clone(), 2, 0.1, &b).is_err());
        let w = vec![vec![1.0, -1.0], vec![1.0, 1.0]];
        assert!(QuadraticGpcCost::weighted(&w, &w, &r1(), g.clone(), 2, 0.1, &b).is_err());
        let ok = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(QuadraticGpcCost::weighted(&ok, &ok, &DMatrix::zeros(1, 1), g, 2, 0.1, &b).is_err());
    }

    #[test]
    fn terminal_example() {
        let b = hermite1();
        let w = vec![vec![0.0, 0.0]];
        let wf = vec![vec![400.0, 300.0]];
        let c = QuadraticGpcCost::weighted(&w, &wf, &r1(), Goal::Constant(embed_goal(&[3.0], &b)), 1, 0.1, &b).unwrap();
        let x = DVector::from_vec(vec![3.5, 0.2]);
        assert!((c.terminal_value(&x) - 56.0).abs() < 1e-12);
        let xs = vec![embed_goal(&[3.0], &b); 3];
        let us = vec![DVector::zeros(1); 2];
        assert_eq!(c.total(&xs, &us), 0.0);
    }

    #[test]
    fn rescaling_preserves_value() {
        let b = hermite1();
        let w = vec![vec![2.0, 3.0], vec![1.0, 5.0]];
        let c = QuadraticGpcCost::weighted(&w, &w, &r1(), Goal::Constant(embed_goal(&[1.0, -2.0], &b)), 3, 0.1, &b).unwrap();
        let scale = DVector::from_vec(vec![1.0, 1.0, 0.5, 0.25]);
        let cr = c.rescaled(&scale).unwrap();
        let y = DVector::from_vec(vec![0.3, -0.2, 1.7, 0.4]);
        let x = y.component_mul(&scale);
        let u = DVector::from_vec(vec![0.7]);
        assert!((c.stage_value(1, &x, &u) - cr.stage_value(1, &y, &u)).abs() < 1e-14);
        assert!((c.terminal_value(&x) - cr.terminal_value(&y)).abs() < 1e-13);
    }
}

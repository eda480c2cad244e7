//! Intrusive gPC representation of a stochastic state.
//!
//! The coefficient vector `X` is stored state-major: `X[i·(K+1) + j] = x_ij`,
//! i.e. `(x_10, …, x_1K, x_20, …, x_nK)`.
//!
//! Inner products `⟨·⟩` follow each family's own weight convention (see
//! [`crate::orthopoly`]). Moments divide by the total mass `⟨1⟩` so they are
//! expectations under the probability measure for either family.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::Dynamics;
use crate::orthopoly::{gauss_rule, PolyFamily, PolynomialBasis};
use crate::tensor::Tensor3;

/// Law of one uncertain scalar (a parameter or an initial-state component).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Gaussian { mean: f64, std: f64 },
    Uniform { min: f64, max: f64 },
    Deterministic(f64),
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Gaussian { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || std < 0.0 {
                    return Err(Error::InvalidDistribution(format!(
                        "Gaussian needs finite mean and std >= 0 (got mean {mean}, std {std})"
                    )));
                }
            }
            Distribution::Uniform { min, max } => {
                if !min.is_finite() || !max.is_finite() || min >= max {
                    return Err(Error::InvalidDistribution(format!(
                        "Uniform needs finite min < max (got [{min}, {max}])"
                    )));
                }
            }
            Distribution::Deterministic(c) => {
                if !c.is_finite() {
                    return Err(Error::InvalidDistribution(format!("non-finite constant {c}")));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Distribution::Gaussian { .. } => "Gaussian",
            Distribution::Uniform { .. } => "Uniform",
            Distribution::Deterministic(_) => "Deterministic",
        }
    }

    /// Family of the random dimension this law needs, if any. A Gaussian with
    /// zero spread still occupies a Hermite dimension.
    pub fn family(&self) -> Option<PolyFamily> {
        match self {
            Distribution::Gaussian { .. } => Some(PolyFamily::HermiteProbabilists),
            Distribution::Uniform { .. } => Some(PolyFamily::Legendre),
            Distribution::Deterministic(_) => None,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Gaussian { mean, .. } => mean,
            Distribution::Uniform { min, max } => 0.5 * (min + max),
            Distribution::Deterministic(c) => c,
        }
    }

    /// Coefficient on the first-degree polynomial of the bound dimension.
    pub fn spread(&self) -> f64 {
        match *self {
            Distribution::Gaussian { std, .. } => std,
            Distribution::Uniform { min, max } => 0.5 * (max - min),
            Distribution::Deterministic(_) => 0.0,
        }
    }

    /// Value at standardized input `ξ` (`N(0,1)` or `U(−1,1)`).
    pub fn at(&self, xi: f64) -> f64 {
        self.mean() + self.spread() * xi
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Distribution::Gaussian { std, .. } => std * std,
            Distribution::Uniform { min, max } => (max - min).powi(2) / 12.0,
            Distribution::Deterministic(_) => 0.0,
        }
    }
}

/// A distribution bound to a basis dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputDistribution {
    pub dist: Distribution,
    pub dim: Option<usize>,
}

impl InputDistribution {
    pub fn bind(dist: Distribution, dim: Option<usize>, basis: &PolynomialBasis) -> Result<Self> {
        dist.validate()?;
        match (dist.family(), dim) {
            (None, None) => Ok(Self { dist, dim }),
            (None, Some(_)) => Err(Error::InvalidDistribution(
                "a deterministic value cannot bind to a random dimension".into(),
            )),
            (Some(_), None) => Err(Error::InvalidDistribution(format!(
                "{} distribution needs a random dimension",
                dist.kind()
            ))),
            (Some(fam), Some(d)) => {
                let have = *basis.families().get(d).ok_or(Error::Dimension {
                    context: "distribution binding",
                    expected: basis.dim(),
                    got: d + 1,
                })?;
                if have != fam {
                    return Err(Error::FamilyMismatch {
                        kind: dist.kind(),
                        family: have.name(),
                    });
                }
                Ok(Self { dist, dim })
            }
        }
    }

    pub fn at(&self, xi: &[f64]) -> f64 {
        match self.dim {
            Some(d) => self.dist.at(xi[d]),
            None => self.dist.mean(),
        }
    }
}

/// Coefficient vector of the bound initial distributions.
pub fn project_initial(dists: &[InputDistribution], basis: &PolynomialBasis) -> Result<DVector<f64>> {
    let k = basis.len();
    let mut x = DVector::zeros(dists.len() * k);
    let mut used = vec![false; basis.dim()];
    for (i, d) in dists.iter().enumerate() {
        let bound = InputDistribution::bind(d.dist, d.dim, basis)?;
        x[i * k] = bound.dist.mean();
        if let Some(dim) = bound.dim {
            if std::mem::replace(&mut used[dim], true) {
                return Err(Error::InvalidDistribution(format!(
                    "random dimension {dim} bound to more than one initial state"
                )));
            }
            let j = basis.first_degree_index(dim).ok_or_else(|| {
                Error::InvalidArgument("basis order 0 cannot represent a random initial state".into())
            })?;
            x[i * k + j] = bound.dist.spread();
        }
    }
    Ok(x)
}

/// `x_i(ξ) = Σ_j X_ij φ_j(ξ)`.
pub fn reconstruct_sample(x: &DVector<f64>, xi: &[f64], basis: &PolynomialBasis) -> DVector<f64> {
    reconstruct_with(x, &basis.eval_all(xi))
}

fn reconstruct_with(x: &DVector<f64>, phi: &[f64]) -> DVector<f64> {
    let k = phi.len();
    let n = x.len() / k;
    DVector::from_fn(n, |i, _| {
        x.as_slice()[i * k..(i + 1) * k]
            .iter()
            .zip(phi)
            .map(|(a, b)| a * b)
            .sum()
    })
}

/// Moment of state `i`: 1 → mean, 2 → variance, 3 → third central moment.
pub fn moment(x: &DVector<f64>, i: usize, order: usize, basis: &PolynomialBasis) -> f64 {
    let k = basis.len();
    let row = &x.as_slice()[i * k..(i + 1) * k];
    let mass = basis.total_mass();
    match order {
        1 => row[0],
        2 => (1..k).map(|j| row[j] * row[j] * basis.norm_sq(j)).sum::<f64>() / mass,
        3 => {
            let mut acc = 0.0;
            for a in 1..k {
                if row[a] == 0.0 {
                    continue;
                }
                for b in 1..k {
                    let ab = row[a] * row[b];
                    if ab == 0.0 {
                        continue;
                    }
                    for c in 1..k {
                        acc += ab * row[c] * basis.triple(a, b, c);
                    }
                }
            }
            acc / mass
        }
        _ => panic!("moment order must be 1, 2 or 3"),
    }
}

/// Per-state means, variances and third central moments.
pub fn moments(x: &DVector<f64>, basis: &PolynomialBasis) -> [Vec<f64>; 3] {
    let n = x.len() / basis.len();
    [1, 2, 3].map(|o| (0..n).map(|i| moment(x, i, o, basis)).collect())
}

/// One tensor-product cubature node with everything the projections need.
#[derive(Clone, Debug)]
pub struct CubatureNode {
    pub xi: Vec<f64>,
    pub weight: f64,
    /// `φ_0(ξ), …, φ_K(ξ)`.
    pub phi: Vec<f64>,
    /// Parameter values `λ(ξ)`.
    pub params: Vec<f64>,
}

/// Number of Gauss nodes per random dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuadratureLevel {
    /// `max(3, r+1)`, raised to the exact count for polynomial dynamics.
    Auto,
    Fixed(usize),
}

/// The gPC-projected system: a model, its basis, and the cubature.
#[derive(Clone, Debug)]
pub struct GpcModel<M> {
    model: M,
    basis: PolynomialBasis,
    params: Vec<InputDistribution>,
    initial: Vec<InputDistribution>,
    nodes: Vec<CubatureNode>,
    level: usize,
}

impl<M: Dynamics> GpcModel<M> {
    /// Uses the model's own distributions.
    pub fn new(model: M, order: usize, level: QuadratureLevel) -> Result<Self> {
        let params = model.param_distributions();
        let initial = model.initial_distributions();
        Self::with_distributions(model, &params, &initial, order, level)
    }

    /// Each non-deterministic entry of `params` then `initial` gets its own
    /// random dimension, in that order.
    pub fn with_distributions(
        model: M,
        params: &[Distribution],
        initial: &[Distribution],
        order: usize,
        level: QuadratureLevel,
    ) -> Result<Self> {
        if params.len() != model.param_dim() {
            return Err(Error::Dimension {
                context: "parameter distributions",
                expected: model.param_dim(),
                got: params.len(),
            });
        }
        if initial.len() != model.state_dim() {
            return Err(Error::Dimension {
                context: "initial distributions",
                expected: model.state_dim(),
                got: initial.len(),
            });
        }
        for d in params.iter().chain(initial) {
            d.validate()?;
        }
        let mut families = Vec::new();
        let mut assign = |d: &Distribution| {
            d.family().map(|f| {
                families.push(f);
                families.len() - 1
            })
        };
        let param_dims: Vec<Option<usize>> = params.iter().map(&mut assign).collect();
        let n_param_dims = param_dims.iter().flatten().count();
        let init_dims: Vec<Option<usize>> = initial.iter().map(&mut assign).collect();
        let order = if families.is_empty() { 0 } else { order };
        let basis = PolynomialBasis::new(families, n_param_dims, order)?;
        if basis.dim() > 0 && order == 0 && init_dims.iter().any(|d| d.is_some()) {
            return Err(Error::InvalidArgument(
                "order 0 cannot represent random initial states".into(),
            ));
        }
        let params: Vec<InputDistribution> = params
            .iter()
            .zip(&param_dims)
            .map(|(d, dim)| InputDistribution::bind(*d, *dim, &basis))
            .collect::<Result<_>>()?;
        let initial: Vec<InputDistribution> = initial
            .iter()
            .zip(&init_dims)
            .map(|(d, dim)| InputDistribution::bind(*d, *dim, &basis))
            .collect::<Result<_>>()?;

        let level = match level {
            QuadratureLevel::Fixed(0) => {
                return Err(Error::InvalidArgument("quadrature level must be positive".into()))
            }
            QuadratureLevel::Fixed(l) => l,
            QuadratureLevel::Auto => {
                let base = 3.max(order + 1);
                match model.polynomial_degree() {
                    // f(x(ξ), λ(ξ)) φ_j has degree ≤ (deg f + 1)·r per dimension
                    Some(deg) => base.max(((deg + 1) * order.max(1) + 2) / 2),
                    None => base,
                }
            }
        };
        let nodes = build_cubature(&basis, &params, level)?;
        Ok(Self {
            model,
            basis,
            params,
            initial,
            nodes,
            level,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn basis(&self) -> &PolynomialBasis {
        &self.basis
    }

    pub fn nodes(&self) -> &[CubatureNode] {
        &self.nodes
    }

    pub fn quadrature_level(&self) -> usize {
        self.level
    }

    pub fn param_inputs(&self) -> &[InputDistribution] {
        &self.params
    }

    pub fn initial_inputs(&self) -> &[InputDistribution] {
        &self.initial
    }

    /// Physical state dimension `n`.
    pub fn n(&self) -> usize {
        self.model.state_dim()
    }

    /// `K + 1`.
    pub fn n_coeffs(&self) -> usize {
        self.basis.len()
    }

    /// `n(K+1)`.
    pub fn dim(&self) -> usize {
        self.n() * self.n_coeffs()
    }

    pub fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    pub fn initial_coefficients(&self) -> Result<DVector<f64>> {
        project_initial(&self.initial, &self.basis)
    }

    /// Parameter values at a point of the random space.
    pub fn params_at(&self, xi: &[f64]) -> Vec<f64> {
        self.params.iter().map(|p| p.at(xi)).collect()
    }

    pub fn reconstruct(&self, x: &DVector<f64>, xi: &[f64]) -> DVector<f64> {
        reconstruct_sample(x, xi, &self.basis)
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                context: "gPC coefficients",
                expected: self.dim(),
                got: x.len(),
            });
        }
        if u.len() != self.control_dim() {
            return Err(Error::Dimension {
                context: "control",
                expected: self.control_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    fn node_state(&self, x: &DVector<f64>, idx: usize, context: &'static str) -> Result<DVector<f64>> {
        let node = &self.nodes[idx];
        let xs = reconstruct_with(x, &node.phi);
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteAtNode {
                context,
                node: idx,
                xi: node.xi.clone(),
            });
        }
        self.model.validate_state(xs.as_slice())?;
        Ok(xs)
    }

    /// `Ẋ_ij = Σ_nodes w f_i(x(ξ), u, t, λ(ξ)) φ_j(ξ) / ⟨φ_j, φ_j⟩`.
    pub fn galerkin_rhs(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        let (n, k) = (self.n(), self.n_coeffs());
        let mut out = DVector::zeros(n * k);
        for (idx, node) in self.nodes.iter().enumerate() {
            let xs = self.node_state(x, idx, "galerkin_rhs")?;
            let f = self.model.rhs(xs.as_slice(), u.as_slice(), t, &node.params);
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteAtNode {
                    context: "galerkin_rhs",
                    node: idx,
                    xi: node.xi.clone(),
                });
            }
            for (i, fi) in f.iter().enumerate() {
                let wf = node.weight * fi;
                for j in 0..k {
                    out[i * k + j] += wf * node.phi[j];
                }
            }
        }
        self.divide_by_norms(&mut out);
        Ok(out)
    }

    fn divide_by_norms(&self, v: &mut DVector<f64>) {
        let k = self.n_coeffs();
        for (idx, val) in v.iter_mut().enumerate() {
            *val /= self.basis.norm_sq(idx % k);
        }
    }

    /// Jacobians of the projected dynamics, `(∇_X f, ∇_u f)`.
    ///
    /// Entry `((i,j), (g,h))` is `Σ w ∂f_i/∂x_g φ_h φ_j / ⟨φ_j,φ_j⟩`.
    pub fn gpc_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(x, u)?;
        let (n, m, k) = (self.n(), self.control_dim(), self.n_coeffs());
        let dim = n * k;
        let mut fx = DMatrix::zeros(dim, dim);
        let mut fu = DMatrix::zeros(dim, m);
        for (idx, node) in self.nodes.iter().enumerate() {
            let xs = self.node_state(x, idx, "gpc_jacobian")?;
            let jac = self.model.jacobian(xs.as_slice(), u.as_slice(), t, &node.params);
            if !jac.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteAtNode {
                    context: "gpc_jacobian",
                    node: idx,
                    xi: node.xi.clone(),
                });
            }
            let phi = &node.phi;
            for i in 0..n {
                for j in 0..k {
                    let row = i * k + j;
                    let wj = node.weight * phi[j] / self.basis.norm_sq(j);
                    if wj == 0.0 {
                        continue;
                    }
                    for g in 0..n {
                        let a = wj * jac[(i, g)];
                        if a == 0.0 {
                            continue;
                        }
                        for h in 0..k {
                            fx[(row, g * k + h)] += a * phi[h];
                        }
                    }
                    for c in 0..m {
                        fu[(row, c)] += wj * jac[(i, n + c)];
                    }
                }
            }
        }
        Ok((fx, fu))
    }

    /// Physical second derivatives at every cubature node, the raw material
    /// of both the dense Hessian tensors and their contractions.
    pub fn node_hessians(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<NodeHessians> {
        self.check_dims(x, u)?;
        let mut hessians = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let xs = self.node_state(x, idx, "gpc_hessian")?;
            let h = self.model.hessian(xs.as_slice(), u.as_slice(), t, &node.params);
            if !h.is_finite() {
                return Err(Error::NonFiniteAtNode {
                    context: "gpc_hessian",
                    node: idx,
                    xi: node.xi.clone(),
                });
            }
            hessians.push(h);
        }
        Ok(NodeHessians {
            n: self.n(),
            m: self.control_dim(),
            weights: self.nodes.iter().map(|nd| nd.weight).collect(),
            phi: self.nodes.iter().map(|nd| nd.phi.clone()).collect(),
            norms: self.basis.norms().to_vec(),
            hessians,
        })
    }

    /// Dense second-derivative tensors of the projected dynamics.
    pub fn gpc_hessian(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<GpcHessian> {
        Ok(self.node_hessians(x, u, t)?.dense())
    }
}

/// `∇_xx`, `∇_xu`, `∇_ux`, `∇_uu` of the projected dynamics.
#[derive(Clone, Debug)]
pub struct GpcHessian {
    pub xx: Tensor3,
    pub xu: Tensor3,
    pub ux: Tensor3,
    pub uu: Tensor3,
}

/// Mode-1 contractions `T ×₁ v` of the four second-derivative tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractedHessian {
    pub xx: DMatrix<f64>,
    pub xu: DMatrix<f64>,
    pub uu: DMatrix<f64>,
}

impl ContractedHessian {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            xx: DMatrix::zeros(n, n),
            xu: DMatrix::zeros(n, m),
            uu: DMatrix::zeros(m, m),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.xx *= s;
        self.xu *= s;
        self.uu *= s;
    }
}

/// Per-node physical Hessians `∂²f_i/∂z_a∂z_b`, `z = (x, u)`.
#[derive(Clone, Debug)]
pub struct NodeHessians {
    n: usize,
    m: usize,
    weights: Vec<f64>,
    phi: Vec<Vec<f64>>,
    norms: Vec<f64>,
    hessians: Vec<Tensor3>,
}

impl NodeHessians {
    /// Entry `((i,j), (g,h), (s,d)) = Σ w ∂²f_i/∂x_g∂x_s φ_d φ_h φ_j / ⟨φ_j,φ_j⟩`.
    pub fn dense(&self) -> GpcHessian {
        let (n, m, k) = (self.n, self.m, self.norms.len());
        let dim = n * k;
        let mut xx = Tensor3::zeros(dim, dim, dim);
        let mut xu = Tensor3::zeros(dim, dim, m);
        let mut uu = Tensor3::zeros(dim, m, m);
        for ((w, phi), h) in self.weights.iter().zip(&self.phi).zip(&self.hessians) {
            for i in 0..n {
                for j in 0..k {
                    let l = i * k + j;
                    let wj = w * phi[j] / self.norms[j];
                    if wj == 0.0 {
                        continue;
                    }
                    for g in 0..n {
                        for s in 0..n {
                            let a = wj * h[(i, g, s)];
                            if a == 0.0 {
                                continue;
                            }
                            for hh in 0..k {
                                let b = a * phi[hh];
                                for d in 0..k {
                                    xx[(l, g * k + hh, s * k + d)] += b * phi[d];
                                }
                            }
                        }
                        for c in 0..m {
                            let a = wj * h[(i, g, n + c)];
                            for hh in 0..k {
                                xu[(l, g * k + hh, c)] += a * phi[hh];
                            }
                        }
                    }
                    for c in 0..m {
                        for e in 0..m {
                            uu[(l, c, e)] += wj * h[(i, n + c, n + e)];
                        }
                    }
                }
            }
        }
        let ux = xu.transpose_last();
        GpcHessian { xx, xu, ux, uu }
    }

    /// `Σ_l v_l ∇²[f]_l` without forming the dense tensors.
    pub fn contract(&self, v: &DVector<f64>) -> ContractedHessian {
        let (n, m, k) = (self.n, self.m, self.norms.len());
        let nz = n + m;
        let mut out = ContractedHessian::zeros(n * k, m);
        for ((w, phi), h) in self.weights.iter().zip(&self.phi).zip(&self.hessians) {
            // c_i = Σ_j v_ij φ_j / ⟨φ_j,φ_j⟩
            let c: Vec<f64> = (0..n)
                .map(|i| (0..k).map(|j| v[i * k + j] * phi[j] / self.norms[j]).sum())
                .collect();
            let mut hc = DMatrix::zeros(nz, nz);
            for (i, ci) in c.iter().enumerate() {
                if *ci == 0.0 {
                    continue;
                }
                for a in 0..nz {
                    for b in 0..nz {
                        hc[(a, b)] += ci * h[(i, a, b)];
                    }
                }
            }
            hc *= *w;
            for g in 0..n {
                for s in 0..n {
                    let a = hc[(g, s)];
                    if a == 0.0 {
                        continue;
                    }
                    for hh in 0..k {
                        let b = a * phi[hh];
                        for d in 0..k {
                            out.xx[(g * k + hh, s * k + d)] += b * phi[d];
                        }
                    }
                }
                for e in 0..m {
                    let a = hc[(g, n + e)];
                    for hh in 0..k {
                        out.xu[(g * k + hh, e)] += a * phi[hh];
                    }
                }
            }
            for c1 in 0..m {
                for c2 in 0..m {
                    out.uu[(c1, c2)] += hc[(n + c1, n + c2)];
                }
            }
        }
        out
    }
}

fn build_cubature(basis: &PolynomialBasis, params: &[InputDistribution], level: usize) -> Result<Vec<CubatureNode>> {
    let rules = basis
        .families()
        .iter()
        .map(|&f| gauss_rule(f, level))
        .collect::<Result<Vec<_>>>()?;
    let d = rules.len();
    let total: usize = rules.iter().map(|r| r.n_nodes()).product();
    let mut nodes = Vec::with_capacity(total);
    let mut counter = vec![0usize; d];
    for _ in 0..total {
        let xi: Vec<f64> = counter.iter().zip(&rules).map(|(&c, r)| r.nodes[c]).collect();
        let weight: f64 = counter.iter().zip(&rules).map(|(&c, r)| r.weights[c]).product();
        let phi = basis.eval_all(&xi);
        let params = params.iter().map(|p| p.at(&xi)).collect();
        nodes.push(CubatureNode { xi, weight, phi, params });
        for pos in (0..d).rev() {
            counter[pos] += 1;
            if counter[pos] < rules[pos].n_nodes() {
                break;
            }
            counter[pos] = 0;
        }
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Duffing, LinearDecay};
    use crate::orthopoly::PolyFamily::*;

    fn decay(mu: f64, sigma: f64) -> GpcModel<LinearDecay> {
        let m = LinearDecay {
            lambda: Distribution::Gaussian { mean: mu, std: sigma },
            x0: Distribution::Deterministic(1.0),
        };
        GpcModel::new(m, 1, QuadratureLevel::Auto).unwrap()
    }

    #[test]
    fn project_initial_examples() {
        let basis = PolynomialBasis::new(vec![HermiteProbabilists, HermiteProbabilists], 1, 3).unwrap();
        let dists = [
            InputDistribution {
                dist: Distribution::Gaussian { mean: 4.0, std: 0.08 },
                dim: Some(1),
            },
            InputDistribution {
                dist: Distribution::Deterministic(0.0),
                dim: None,
            },
        ];
        let x = project_initial(&dists, &basis).unwrap();
        assert_eq!(x.len(), 20);
        let j = basis.first_degree_index(1).unwrap();
        assert_eq!(x[0], 4.0);
        assert_eq!(x[j], 0.08);
        assert_eq!(x.iter().filter(|v| **v != 0.0).count(), 2);
        assert!(x.rows(10, 10).iter().all(|v| *v == 0.0));

        let leg = PolynomialBasis::new(vec![Legendre], 0, 2).unwrap();
        let u = [InputDistribution {
            dist: Distribution::Uniform { min: 2.85e-5, max: 2.95e-5 },
            dim: Some(0),
        }];
        let xu = project_initial(&u, &leg).unwrap();
        assert!((xu[0] - 2.90e-5).abs() < 1e-20);
        assert!((xu[1] - 0.05e-5).abs() < 1e-20);
        assert_eq!(xu[2], 0.0);

        let bad = [InputDistribution {
            dist: Distribution::Uniform { min: 0.0, max: 1.0 },
            dim: Some(0),
        }];
        let herm = PolynomialBasis::new(vec![HermiteProbabilists], 0, 2).unwrap();
        assert!(matches!(project_initial(&bad, &herm), Err(Error::FamilyMismatch { .. })));
    }

    #[test]
    fn linear_decay_galerkin_and_jacobian() {
        let (mu, sigma) = (3.0, 0.1);
        let g = decay(mu, sigma);
        let x = DVector::from_vec(vec![0.7, -0.2]);
        let u = DVector::from_vec(vec![0.0]);
        let f = g.galerkin_rhs(&x, &u, 0.0).unwrap();
        assert!((f[0] + (mu * 0.7 + sigma * -0.2)).abs() < 1e-14);
        assert!((f[1] + (sigma * 0.7 + mu * -0.2)).abs() < 1e-14);
        let (fx, fu) = g.gpc_jacobian(&x, &u, 0.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[-mu, -sigma, -sigma, -mu]);
        assert!((fx - expected).abs().max() < 1e-14);
        assert!((fu[(0, 0)] - 1.0).abs() < 1e-14 && fu[(1, 0)].abs() < 1e-14);
        let h = g.gpc_hessian(&x, &u, 0.0).unwrap();
        assert_eq!(h.xx.max_abs(), 0.0);
        assert_eq!(h.uu.max_abs(), 0.0);
    }

    #[test]
    fn moment_examples() {
        let basis = PolynomialBasis::new(vec![HermiteProbabilists], 0, 2).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.5, 0.0]);
        assert_eq!(moment(&x, 0, 1, &basis), 1.0);
        assert!((moment(&x, 0, 2, &basis) - 0.25).abs() < 1e-15);
        assert!(moment(&x, 0, 3, &basis).abs() < 1e-14);
        let sq = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        assert!((moment(&sq, 0, 3, &basis) - 8.0).abs() < 1e-12);
        let lin = DVector::from_vec(vec![5.0, 1.0, 0.0]);
        assert!(moment(&lin, 0, 3, &basis).abs() < 1e-14);
    }

    #[test]
    fn reconstruct_examples() {
        let basis = PolynomialBasis::new(vec![HermiteProbabilists], 0, 1).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.5]);
        assert_eq!(reconstruct_sample(&x, &[2.0], &basis)[0], 2.0);
        let c = DVector::from_vec(vec![3.0, 0.0]);
        assert_eq!(reconstruct_sample(&c, &[-7.0], &basis)[0], 3.0);
    }

    #[test]
    fn duffing_dimensions_and_default_level() {
        let g = GpcModel::new(Duffing::default(), 3, QuadratureLevel::Auto).unwrap();
        assert_eq!(g.dim(), 20);
        assert_eq!(g.quadrature_level(), 7);
        assert_eq!(g.nodes().len(), 49);
        let w: f64 = g.nodes().iter().map(|n| n.weight).sum();
        assert!((w - 1.0).abs() < 1e-13);
    }

    #[test]
    fn deterministic_projection_is_the_physical_system() {
        let d = Duffing::default();
        let g = GpcModel::with_distributions(
            d.clone(),
            &[Distribution::Deterministic(3.0)],
            &[Distribution::Deterministic(4.0), Distribution::Deterministic(0.0)],
            3,
            QuadratureLevel::Auto,
        )
        .unwrap();
        assert_eq!(g.dim(), 2);
        let x = DVector::from_vec(vec![1.2, -0.4]);
        let u = DVector::from_vec(vec![0.3]);
        let f = g.galerkin_rhs(&x, &u, 0.0).unwrap();
        let phys = d.rhs(&[1.2, -0.4], &[0.3], 0.0, &[3.0]);
        assert!((f[0] - phys[0]).abs() < 1e-15 && (f[1] - phys[1]).abs() < 1e-14);
    }

    #[test]
    fn contraction_matches_dense_tensor() {
        let g = GpcModel::new(Duffing::default(), 2, QuadratureLevel::Auto).unwrap();
        let x = DVector::from_fn(g.dim(), |i, _| 0.3 + 0.1 * (i as f64).sin());
        let u = DVector::from_vec(vec![0.4]);
        let nh = g.node_hessians(&x, &u, 0.0).unwrap();
        let dense = nh.dense();
        let v = DVector::from_fn(g.dim(), |i, _| (i as f64 * 0.7).cos());
        let c = nh.contract(&v);
        assert!((dense.xx.contract_first(&v) - &c.xx).abs().max() < 1e-12);
        assert!((dense.xu.contract_first(&v) - &c.xu).abs().max() < 1e-12);
        assert!((dense.uu.contract_first(&v) - &c.uu).abs().max() < 1e-12);
    }
}

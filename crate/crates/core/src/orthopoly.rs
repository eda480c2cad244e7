//! Univariate orthogonal polynomial families, Gauss rules, and the tensorized
//! multivariate basis built from them.
//!
//! Conventions:
//! - `HermiteProbabilists`: `He_n`, orthogonal under the standard normal
//!   density, `⟨He_n, He_n⟩ = n!`.
//! - `Legendre`: `P_n`, orthogonal under the *unnormalized* weight `1` on
//!   `[-1, 1]`, so `⟨P_n, P_n⟩ = 2/(2n+1)` and `⟨1⟩ = 2`. Probability-level
//!   quantities divide by [`PolyFamily::total_mass`].

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolyFamily {
    HermiteProbabilists,
    Legendre,
}

impl PolyFamily {
    pub fn name(self) -> &'static str {
        match self {
            PolyFamily::HermiteProbabilists => "Hermite",
            PolyFamily::Legendre => "Legendre",
        }
    }

    /// `∫ ρ(ξ) dξ` over the support.
    pub fn total_mass(self) -> f64 {
        match self {
            PolyFamily::HermiteProbabilists => 1.0,
            PolyFamily::Legendre => 2.0,
        }
    }

    /// Coefficients `(a_n, b_n)` of `φ_{n+1} = a_n x φ_n − b_n φ_{n−1}`.
    fn recurrence(self, n: usize) -> (f64, f64) {
        let nf = n as f64;
        match self {
            PolyFamily::HermiteProbabilists => (1.0, nf),
            PolyFamily::Legendre => ((2.0 * nf + 1.0) / (nf + 1.0), nf / (nf + 1.0)),
        }
    }

    /// Off-diagonal entry `√β_n` of the Jacobi matrix of the monic recurrence.
    fn jacobi_offdiag(self, n: usize) -> f64 {
        let nf = n as f64;
        match self {
            PolyFamily::HermiteProbabilists => nf.sqrt(),
            PolyFamily::Legendre => nf / (4.0 * nf * nf - 1.0).sqrt(),
        }
    }
}

/// `φ_degree(point)` by three-term recurrence.
pub fn eval_poly(family: PolyFamily, degree: usize, point: f64) -> f64 {
    eval_with_derivative(family, degree, point).0
}

/// Values `φ_0(x), …, φ_max_degree(x)`.
pub fn eval_all(family: PolyFamily, max_degree: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_degree + 1);
    out.push(1.0);
    if max_degree == 0 {
        return out;
    }
    out.push(x);
    for n in 1..max_degree {
        let (a, b) = family.recurrence(n);
        let next = a * x * out[n] - b * out[n - 1];
        out.push(next);
    }
    out
}

fn eval_with_derivative(family: PolyFamily, degree: usize, x: f64) -> (f64, f64) {
    if degree == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    let (mut d_prev, mut d) = (0.0, 1.0);
    for n in 1..degree {
        let (a, b) = family.recurrence(n);
        let p_next = a * x * p - b * p_prev;
        let d_next = a * (p + x * d) - b * d_prev;
        p_prev = p;
        p = p_next;
        d_prev = d;
        d = d_next;
    }
    (p, d)
}

/// `⟨φ_n, φ_n⟩` under the family's weight convention.
pub fn norm_sq(family: PolyFamily, degree: usize) -> f64 {
    match family {
        PolyFamily::HermiteProbabilists => (1..=degree).map(|k| k as f64).product(),
        PolyFamily::Legendre => 2.0 / (2.0 * degree as f64 + 1.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub family: PolyFamily,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss rule with `n_nodes` points for the family's weight.
///
/// Nodes come from the eigenvalues of the symmetric tridiagonal Jacobi matrix,
/// are polished by Newton steps on `φ_n`, and the weights are the Christoffel
/// numbers `1 / Σ_k φ_k(x)² / ⟨φ_k, φ_k⟩` which sum to `total_mass`.
pub fn gauss_rule(family: PolyFamily, n_nodes: usize) -> Result<QuadratureRule> {
    if n_nodes == 0 {
        return Err(Error::InvalidArgument("gauss_rule needs at least one node".into()));
    }
    let n = n_nodes;
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j {
            family.jacobi_offdiag(j)
        } else if j + 1 == i {
            family.jacobi_offdiag(i)
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::try_new(jacobi, f64::EPSILON, 10_000)
        .ok_or(Error::QuadratureSetup { n_nodes })?;
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = eval_with_derivative(family, n, *x);
            if dp == 0.0 {
                break;
            }
            *x -= p / dp;
        }
    }
    // symmetric weight: enforce exact antisymmetry of the node set
    for i in 0..n / 2 {
        let m = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -m;
        nodes[n - 1 - i] = m;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }

    let norms: Vec<f64> = (0..n).map(|k| norm_sq(family, k)).collect();
    let weights = nodes
        .iter()
        .map(|&x| {
            let vals = eval_all(family, n - 1, x);
            let s: f64 = vals.iter().zip(&norms).map(|(v, h)| v * v / h).sum();
            1.0 / s
        })
        .collect();
    Ok(QuadratureRule {
        family,
        nodes,
        weights,
    })
}

/// Smallest node count that integrates a polynomial of `total_degree` exactly.
pub fn exact_node_count(total_degree: usize) -> usize {
    (total_degree + 2) / 2
}

/// `∫ Π_k φ_{degrees[k]}(ξ) ρ(ξ) dξ` by an exact Gauss rule.
pub fn product_integral(family: PolyFamily, degrees: &[usize]) -> f64 {
    assert!(!degrees.is_empty(), "product_integral needs at least one factor");
    let total: usize = degrees.iter().sum();
    let rule = cached_rule(family, exact_node_count(total));
    let max_deg = *degrees.iter().max().unwrap();
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&x, &w)| {
            let vals = eval_all(family, max_deg, x);
            w * degrees.iter().map(|&d| vals[d]).product::<f64>()
        })
        .sum()
}

fn cached_rule(family: PolyFamily, n: usize) -> QuadratureRule {
    const CACHE: usize = 64;
    static HERMITE: OnceLock<Vec<QuadratureRule>> = OnceLock::new();
    static LEGENDRE: OnceLock<Vec<QuadratureRule>> = OnceLock::new();
    let build = || {
        (1..=CACHE)
            .map(|k| gauss_rule(family, k).expect("Gauss rule for a classical family"))
            .collect::<Vec<_>>()
    };
    if n > CACHE {
        return gauss_rule(family, n).expect("Gauss rule for a classical family");
    }
    let table = match family {
        PolyFamily::HermiteProbabilists => HERMITE.get_or_init(build),
        PolyFamily::Legendre => LEGENDRE.get_or_init(build),
    };
    table[n - 1].clone()
}

/// Closed form of `⟨He_i He_j He_g⟩`: nonzero only when `i+j+g` is even and
/// `s = (i+j+g)/2 ≥ max(i, j, g)`.
pub fn hermite_triple_closed_form(i: usize, j: usize, g: usize) -> f64 {
    let sum = i + j + g;
    if sum % 2 == 1 {
        return 0.0;
    }
    let s = sum / 2;
    if s < i.max(j).max(g) {
        return 0.0;
    }
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    fact(i) * fact(j) * fact(g) / (fact(s - i) * fact(s - j) * fact(s - g))
}

/// All `d`-tuples of total degree `≤ r`, graded lexicographically.
///
/// Tuples are grouped by total degree; within a degree they appear in
/// descending lexicographic order, so for `d = 2` the sequence starts
/// `(0,0), (1,0), (0,1), (2,0), (1,1), (0,2), …`. The position of a tuple in
/// this list is the coefficient index `j` everywhere in the crate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiIndexSet {
    d: usize,
    r: usize,
    indices: Vec<Vec<usize>>,
}

impl MultiIndexSet {
    pub fn new(d: usize, r: usize) -> Self {
        let mut indices = Vec::new();
        for degree in 0..=r {
            let mut current = vec![0; d];
            compositions(degree, 0, &mut current, &mut indices);
            if d == 0 {
                // only the empty tuple exists; stop after degree 0
                break;
            }
        }
        Self { d, r, indices }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, j: usize) -> &[usize] {
        &self.indices[j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.iter().map(|v| v.as_slice())
    }

    pub fn position(&self, tuple: &[usize]) -> Option<usize> {
        self.indices.iter().position(|t| t == tuple)
    }
}

fn compositions(remaining: usize, pos: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let d = current.len();
    if d == 0 {
        if remaining == 0 {
            out.push(Vec::new());
        }
        return;
    }
    if pos == d - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for k in (0..=remaining).rev() {
        current[pos] = k;
        compositions(remaining - k, pos + 1, current, out);
    }
    current[pos] = 0;
}

pub fn multi_indices(d: usize, r: usize) -> MultiIndexSet {
    MultiIndexSet::new(d, r)
}

/// Tensorized orthogonal basis `φ_j(ξ) = Π_i φ̃_{j_i}(ξ_i)` truncated at total
/// degree `r`.
///
/// The first `n_param_dims` dimensions of `ξ` carry parameter uncertainty, the
/// rest carry initial-state uncertainty.
#[derive(Clone, Debug)]
pub struct PolynomialBasis {
    families: Vec<PolyFamily>,
    n_param_dims: usize,
    indices: MultiIndexSet,
    norms: Vec<f64>,
    triple: OnceLock<Vec<f64>>,
}

impl PolynomialBasis {
    pub fn new(families: Vec<PolyFamily>, n_param_dims: usize, order: usize) -> Result<Self> {
        if n_param_dims > families.len() {
            return Err(Error::InvalidArgument(format!(
                "{n_param_dims} parameter dimensions exceed the {} basis dimensions",
                families.len()
            )));
        }
        let indices = MultiIndexSet::new(families.len(), order);
        let norms = indices
            .iter()
            .map(|t| {
                t.iter()
                    .zip(&families)
                    .map(|(&deg, &fam)| norm_sq(fam, deg))
                    .product()
            })
            .collect();
        Ok(Self {
            families,
            n_param_dims,
            indices,
            norms,
            triple: OnceLock::new(),
        })
    }

    /// Zero-dimensional basis: one constant function.
    pub fn deterministic() -> Self {
        Self::new(Vec::new(), 0, 0).expect("empty basis")
    }

    pub fn families(&self) -> &[PolyFamily] {
        &self.families
    }

    pub fn dim(&self) -> usize {
        self.families.len()
    }

    pub fn n_param_dims(&self) -> usize {
        self.n_param_dims
    }

    pub fn n_initial_dims(&self) -> usize {
        self.families.len() - self.n_param_dims
    }

    pub fn order(&self) -> usize {
        self.indices.order()
    }

    /// `K + 1`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &MultiIndexSet {
        &self.indices
    }

    /// `⟨φ_j, φ_j⟩` under the unnormalized product weight.
    pub fn norm_sq(&self, j: usize) -> f64 {
        self.norms[j]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// `⟨1⟩ = Π_i ∫ ρ_i`; divides unnormalized inner products into expectations.
    pub fn total_mass(&self) -> f64 {
        self.families.iter().map(|f| f.total_mass()).product()
    }

    /// `E[φ_j²]` under the probability measure.
    pub fn expected_sq(&self, j: usize) -> f64 {
        self.norms[j] / self.total_mass()
    }

    /// Coefficient index of the first-degree polynomial in dimension `dim`.
    pub fn first_degree_index(&self, dim: usize) -> Option<usize> {
        let mut t = vec![0; self.dim()];
        *t.get_mut(dim)? = 1;
        self.indices.position(&t)
    }

    /// `φ_j(ξ)`.
    pub fn eval(&self, j: usize, xi: &[f64]) -> f64 {
        self.indices
            .get(j)
            .iter()
            .zip(&self.families)
            .zip(xi)
            .map(|((&deg, &fam), &x)| eval_poly(fam, deg, x))
            .product()
    }

    /// `(φ_0(ξ), …, φ_K(ξ))`.
    pub fn eval_all(&self, xi: &[f64]) -> Vec<f64> {
        let r = self.order();
        let per_dim: Vec<Vec<f64>> = self
            .families
            .iter()
            .zip(xi)
            .map(|(&fam, &x)| eval_all(fam, r, x))
            .collect();
        self.indices
            .iter()
            .map(|t| t.iter().enumerate().map(|(i, &deg)| per_dim[i][deg]).product())
            .collect()
    }

    /// `⟨φ_a φ_b ⋯⟩` for multivariate indices, as a product of univariate integrals.
    pub fn product_integral(&self, js: &[usize]) -> f64 {
        let mut total = 1.0;
        let mut degs = Vec::with_capacity(js.len());
        for (dim, &fam) in self.families.iter().enumerate() {
            degs.clear();
            degs.extend(js.iter().map(|&j| self.indices.get(j)[dim]));
            total *= product_integral(fam, &degs);
            if total == 0.0 {
                return 0.0;
            }
        }
        // a zero-dimensional basis integrates the constant 1 against unit mass
        total
    }

    /// `⟨φ_a φ_b φ_c⟩` as a flat `(K+1)³` table, computed on first use.
    pub fn triple_products(&self) -> &[f64] {
        self.triple.get_or_init(|| {
            let k = self.len();
            let mut t = vec![0.0; k * k * k];
            for a in 0..k {
                for b in a..k {
                    for c in b..k {
                        let v = self.product_integral(&[a, b, c]);
                        for (i, j, l) in [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
                            t[(i * k + j) * k + l] = v;
                        }
                    }
                }
            }
            t
        })
    }

    pub fn triple(&self, a: usize, b: usize, c: usize) -> f64 {
        let k = self.len();
        self.triple_products()[(a * k + b) * k + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use PolyFamily::*;

    fn double_factorial(n: i64) -> f64 {
        if n <= 0 {
            1.0
        } else {
            (n as f64) * double_factorial(n - 2)
        }
    }

    #[test]
    fn eval_poly_examples() {
        assert_eq!(eval_poly(HermiteProbabilists, 2, 2.0), 3.0);
        assert!((eval_poly(Legendre, 2, 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(eval_poly(HermiteProbabilists, 0, 7.3), 1.0);
        assert_eq!(eval_poly(Legendre, 0, 7.3), 1.0);
        // He_3 = x^3 - 3x, P_3 = (5x^3 - 3x)/2
        assert!((eval_poly(HermiteProbabilists, 3, 1.7) - (1.7f64.powi(3) - 5.1)).abs() < 1e-13);
        assert!((eval_poly(Legendre, 3, 0.4) - (5.0 * 0.064 - 1.2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn norm_sq_examples() {
        assert_eq!(norm_sq(HermiteProbabilists, 3), 6.0);
        assert!((norm_sq(Legendre, 2) - 0.4).abs() < 1e-15);
        assert_eq!(norm_sq(HermiteProbabilists, 0), 1.0);
    }

    #[test]
    fn product_integral_examples() {
        assert!((product_integral(HermiteProbabilists, &[1, 1, 2]) - 2.0).abs() < 1e-12);
        assert!(product_integral(HermiteProbabilists, &[0, 5]).abs() < 1e-12);
        assert!((product_integral(HermiteProbabilists, &[2, 2, 2]) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn gauss_rule_examples() {
        let r = gauss_rule(HermiteProbabilists, 2).unwrap();
        assert!((r.nodes[0] + 1.0).abs() < 1e-14 && (r.nodes[1] - 1.0).abs() < 1e-14);
        assert!((r.weights[0] - 0.5).abs() < 1e-14 && (r.weights[1] - 0.5).abs() < 1e-14);
        let l = gauss_rule(Legendre, 1).unwrap();
        assert_eq!(l.nodes, vec![0.0]);
        assert!((l.weights[0] - 2.0).abs() < 1e-14);
        let h5 = gauss_rule(HermiteProbabilists, 5).unwrap();
        assert!((h5.integrate(|x| x.powi(8)) - 105.0).abs() < 1e-10);
        assert!(gauss_rule(Legendre, 0).is_err());
    }

    #[test]
    fn quadrature_weights_sum_to_mass() {
        for n in 1..=20 {
            for fam in [HermiteProbabilists, Legendre] {
                let r = gauss_rule(fam, n).unwrap();
                let s: f64 = r.weights.iter().sum();
                assert!((s - fam.total_mass()).abs() < 1e-13, "{fam:?} n={n}: {s}");
                assert!(r.weights.iter().all(|&w| w > 0.0));
            }
        }
    }

    #[test]
    fn quadrature_exact_for_monomials() {
        for n in 1..=8 {
            let h = gauss_rule(HermiteProbabilists, n).unwrap();
            let l = gauss_rule(Legendre, n).unwrap();
            for p in 0..2 * n {
                let exact_h = if p % 2 == 1 { 0.0 } else { double_factorial(p as i64 - 1) };
                let exact_l = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
                let got_h = h.integrate(|x| x.powi(p as i32));
                let got_l = l.integrate(|x| x.powi(p as i32));
                assert!((got_h - exact_h).abs() <= 1e-10 * exact_h.max(1.0), "He n={n} p={p}");
                assert!((got_l - exact_l).abs() <= 1e-10, "P n={n} p={p}");
            }
        }
    }

    #[test]
    fn orthogonality_up_to_degree_eight() {
        for fam in [HermiteProbabilists, Legendre] {
            for i in 0..=8 {
                for j in 0..=8 {
                    let v = product_integral(fam, &[i, j]);
                    let expected = if i == j { norm_sq(fam, i) } else { 0.0 };
                    assert!((v - expected).abs() < 1e-10 * expected.max(1.0), "{fam:?} {i} {j}: {v}");
                }
            }
        }
    }

    #[test]
    fn hermite_triple_closed_form_matches_quadrature() {
        for i in 0..=5 {
            for j in 0..=5 {
                for g in 0..=5 {
                    let q = product_integral(HermiteProbabilists, &[i, j, g]);
                    let c = hermite_triple_closed_form(i, j, g);
                    assert!((q - c).abs() < 1e-9 * c.abs().max(1.0), "({i},{j},{g}): {q} vs {c}");
                }
            }
        }
        // odd-degree factors with an even total: nonzero despite not all being even
        assert_eq!(hermite_triple_closed_form(1, 1, 2), 2.0);
        assert_eq!(hermite_triple_closed_form(1, 1, 1), 0.0);
        assert_eq!(hermite_triple_closed_form(1, 1, 4), 0.0);
    }

    #[test]
    fn multi_index_examples_and_order() {
        assert_eq!(multi_indices(2, 3).len(), 10);
        assert_eq!(multi_indices(2, 2).len(), 6);
        let one = multi_indices(1, 0);
        assert_eq!(one.len(), 1);
        assert_eq!(one.get(0), &[0]);
        let m = multi_indices(2, 2);
        let seq: Vec<Vec<usize>> = m.iter().map(|t| t.to_vec()).collect();
        assert_eq!(
            seq,
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
        assert_eq!(multi_indices(0, 3).len(), 1);
    }

    #[test]
    fn multi_index_cardinality() {
        let binom = |n: usize, k: usize| -> usize {
            let mut r = 1usize;
            for i in 0..k {
                r = r * (n - i) / (i + 1);
            }
            r
        };
        for d in 1..=4 {
            for r in 0..=6 {
                assert_eq!(multi_indices(d, r).len(), binom(r + d, d), "d={d} r={r}");
            }
        }
    }

    #[test]
    fn tensor_basis_eval_examples() {
        let b = PolynomialBasis::new(vec![HermiteProbabilists; 2], 1, 2).unwrap();
        assert_eq!(b.eval(0, &[0.3, -2.0]), 1.0);
        let j11 = b.indices().position(&[1, 1]).unwrap();
        assert_eq!(b.eval(j11, &[2.0, 3.0]), 6.0);
        let mixed = PolynomialBasis::new(vec![HermiteProbabilists, Legendre], 1, 4).unwrap();
        let j22 = mixed.indices().position(&[2, 2]).unwrap();
        assert!(mixed.eval(j22, &[1.0, 1.0]).abs() < 1e-15);
        let all = mixed.eval_all(&[0.7, -0.2]);
        for (j, v) in all.iter().enumerate() {
            assert!((v - mixed.eval(j, &[0.7, -0.2])).abs() < 1e-14);
        }
        assert!((mixed.norm_sq(j22) - 2.0 * 0.4).abs() < 1e-15);
        assert_eq!(mixed.total_mass(), 2.0);
    }
}

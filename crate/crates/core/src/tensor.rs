//! Dense three-index tensors and the mode products used by the second-order
//! dynamics expansions.
//!
//! Layout convention, shared by every tensor in the crate:
//!
//! | tensor            | index 0          | index 1        | index 2        |
//! |-------------------|------------------|----------------|----------------|
//! | `∇xx f`, `Γ`      | output component | state          | state          |
//! | `∇xu f`, `Δ`      | output component | state          | control        |
//! | `∇ux f`, `Ξ`      | output component | control        | state          |
//! | `∇uu f`, `Λ`      | output component | control        | control        |
//!
//! "Mode-k" products contract index `k-1` (mode-1 is the output index). The
//! DDP recursion only ever needs `T ×₁ v = Σ_i v_i T[i, :, :]`.

use std::ops::{Index, IndexMut};

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    shape: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self {
            shape: (d0, d1, d2),
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn from_fn(d0: usize, d1: usize, d2: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(d0, d1, d2);
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    t[(i, j, k)] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Matrix slice `T[i, :, :]`.
    pub fn slab(&self, i: usize) -> DMatrix<f64> {
        let (_, d1, d2) = self.shape;
        let off = i * d1 * d2;
        DMatrix::from_row_slice(d1, d2, &self.data[off..off + d1 * d2])
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mode-1 contraction with a vector: `Σ_i v_i T[i, :, :]`.
    pub fn contract_first(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let (d0, d1, d2) = self.shape;
        assert_eq!(v.len(), d0, "mode-1 contraction length");
        let mut out = vec![0.0; d1 * d2];
        for i in 0..d0 {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            let slab = &self.data[i * d1 * d2..(i + 1) * d1 * d2];
            for (o, s) in out.iter_mut().zip(slab) {
                *o += vi * s;
            }
        }
        DMatrix::from_row_slice(d1, d2, &out)
    }

    /// Mode-1 product with a matrix: `R[a, j, k] = Σ_i M[a, i] T[i, j, k]`.
    pub fn mode1(&self, m: &DMatrix<f64>) -> Tensor3 {
        let (d0, d1, d2) = self.shape;
        assert_eq!(m.ncols(), d0, "mode-1 product shape");
        let stride = d1 * d2;
        let mut out = Tensor3::zeros(m.nrows(), d1, d2);
        for a in 0..m.nrows() {
            let dst = &mut out.data[a * stride..(a + 1) * stride];
            for i in 0..d0 {
                let w = m[(a, i)];
                if w == 0.0 {
                    continue;
                }
                let src = &self.data[i * stride..(i + 1) * stride];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Mode-2 product: `R[i, b, k] = Σ_j T[i, j, k] A[j, b]`, i.e. `T ×₂ Aᵀ`.
    pub fn mode2(&self, a: &DMatrix<f64>) -> Tensor3 {
        let (d0, d1, d2) = self.shape;
        assert_eq!(a.nrows(), d1, "mode-2 product shape");
        let nb = a.ncols();
        let mut out = Tensor3::zeros(d0, nb, d2);
        for i in 0..d0 {
            for j in 0..d1 {
                let src = &self.data[(i * d1 + j) * d2..(i * d1 + j + 1) * d2];
                for b in 0..nb {
                    let w = a[(j, b)];
                    if w == 0.0 {
                        continue;
                    }
                    let off = (i * nb + b) * d2;
                    for (d, s) in out.data[off..off + d2].iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        out
    }

    /// Mode-3 product: `R[i, j, c] = Σ_k T[i, j, k] A[k, c]`, i.e. `T ×₃ Aᵀ`.
    pub fn mode3(&self, a: &DMatrix<f64>) -> Tensor3 {
        let (d0, d1, d2) = self.shape;
        assert_eq!(a.nrows(), d2, "mode-3 product shape");
        let nc = a.ncols();
        let mut out = Tensor3::zeros(d0, d1, nc);
        for ij in 0..d0 * d1 {
            let src = &self.data[ij * d2..(ij + 1) * d2];
            let dst = &mut out.data[ij * nc..(ij + 1) * nc];
            for (k, &s) in src.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                for (c, d) in dst.iter_mut().enumerate() {
                    *d += s * a[(k, c)];
                }
            }
        }
        out
    }

    /// Sub-block `T[r0.., c0.., k0..]` of the given extent.
    pub fn block(&self, start: (usize, usize, usize), extent: (usize, usize, usize)) -> Tensor3 {
        Tensor3::from_fn(extent.0, extent.1, extent.2, |i, j, k| {
            self[(start.0 + i, start.1 + j, start.2 + k)]
        })
    }

    /// Swaps the last two indices.
    pub fn transpose_last(&self) -> Tensor3 {
        let (d0, d1, d2) = self.shape;
        Tensor3::from_fn(d0, d2, d1, |i, j, k| self[(i, k, j)])
    }

    /// `Σ_jk T[i, j, k] a_j b_k` for every `i`.
    pub fn bilinear(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let (d0, d1, d2) = self.shape;
        DVector::from_fn(d0, |i, _| {
            let mut acc = 0.0;
            for j in 0..d1 {
                if a[j] == 0.0 {
                    continue;
                }
                let row = &self.data[(i * d1 + j) * d2..(i * d1 + j + 1) * d2];
                let dot: f64 = row.iter().zip(b.iter()).map(|(t, bk)| t * bk).sum();
                acc += a[j] * dot;
            }
            acc
        })
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j, k): (usize, usize, usize)) -> &f64 {
        let (_, d1, d2) = self.shape;
        &self.data[(i * d1 + j) * d2 + k]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor3 {
    #[inline]
    fn index_mut(&mut self, (i, j, k): (usize, usize, usize)) -> &mut f64 {
        let (_, d1, d2) = self.shape;
        &mut self.data[(i * d1 + j) * d2 + k]
    }
}

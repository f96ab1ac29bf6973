//! Superoperator helpers: column-major vectorization, sums of `ρ ↦ AρB`
//! pieces with factored Frobenius inner products, and the frame-frequency
//! mask used by the rotating-wave filter.
//!
//! A piece (c, A, B) stands for the map ρ ↦ c·AρB, whose matrix is
//! c·(Bᵀ ⊗ A) under column-major vec. Inner products factorize as
//! ⟨A₁ρB₁, A₂ρB₂⟩ = ⟨A₁,A₂⟩⟨B₁,B₂⟩, so projections of structured
//! Liouvillians never require materializing d²×d² matrices.

use nalgebra::DMatrix;

use crate::algebra::{c64, C64, Operator};

/// vec(ρ) in column-major order.
pub fn vec_col_major(m: &DMatrix<C64>) -> nalgebra::DVector<C64> {
    nalgebra::DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_col_major`].
pub fn unvec_col_major(v: &nalgebra::DVector<C64>, d: usize) -> DMatrix<C64> {
    DMatrix::from_column_slice(d, d, v.as_slice())
}

/// A sum of `ρ ↦ c·AρB` pieces on a `d`-dimensional space.
#[derive(Debug, Clone)]
pub struct SuperOpSum {
    dim: usize,
    pieces: Vec<(C64, DMatrix<C64>, DMatrix<C64>)>,
}

impl SuperOpSum {
    pub fn new(dim: usize) -> Self {
        SuperOpSum {
            dim,
            pieces: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, coeff: C64, a: DMatrix<C64>, b: DMatrix<C64>) {
        debug_assert_eq!(a.nrows(), self.dim);
        debug_assert_eq!(b.nrows(), self.dim);
        self.pieces.push((coeff, a, b));
    }

    /// Append the Lindblad dissipator `rate·(2CρC† − C†Cρ − ρC†C)`.
    pub fn push_lindblad(&mut self, rate: f64, c: &Operator) {
        let cm = c.matrix();
        let cdag = cm.adjoint();
        let m = &cdag * cm;
        let eye = DMatrix::<C64>::identity(self.dim, self.dim);
        self.push(c64(2.0 * rate, 0.0), cm.clone(), cdag);
        self.push(c64(-rate, 0.0), m.clone(), eye.clone());
        self.push(c64(-rate, 0.0), eye, m);
    }

    /// Append the Hermitian cross pair
    /// `coeff·(2AρB† + 2BρA† − {A†B + B†A, ρ})`.
    pub fn push_cross(&mut self, coeff: f64, a: &Operator, b: &Operator) {
        let am = a.matrix();
        let bm = b.matrix();
        let m = am.adjoint() * bm + bm.adjoint() * am;
        let eye = DMatrix::<C64>::identity(self.dim, self.dim);
        self.push(c64(2.0 * coeff, 0.0), am.clone(), bm.adjoint());
        self.push(c64(2.0 * coeff, 0.0), bm.clone(), am.adjoint());
        self.push(c64(-coeff, 0.0), m.clone(), eye.clone());
        self.push(c64(-coeff, 0.0), eye, m);
    }

    /// Append the commutator part `−i[H, ρ]`.
    pub fn push_hamiltonian(&mut self, h: &Operator) {
        let hm = h.matrix();
        let eye = DMatrix::<C64>::identity(self.dim, self.dim);
        self.push(c64(0.0, -1.0), hm.clone(), eye.clone());
        self.push(c64(0.0, 1.0), eye, hm.clone());
    }

    pub fn extend(&mut self, other: &SuperOpSum) {
        debug_assert_eq!(self.dim, other.dim);
        self.pieces.extend(other.pieces.iter().cloned());
    }

    pub fn scaled(&self, s: f64) -> SuperOpSum {
        let mut out = self.clone();
        for (c, _, _) in out.pieces.iter_mut() {
            *c *= c64(s, 0.0);
        }
        out
    }

    pub fn apply(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let mut out = DMatrix::<C64>::zeros(self.dim, self.dim);
        for (c, a, b) in &self.pieces {
            out += (a * rho * b) * *c;
        }
        out
    }

    /// Frobenius inner product ⟨self, other⟩ computed piecewise without
    /// materializing either superoperator.
    pub fn frob_inner(&self, other: &SuperOpSum) -> C64 {
        let mut acc = c64(0.0, 0.0);
        for (ci, ai, bi) in &self.pieces {
            for (cj, aj, bj) in &other.pieces {
                let ip_a = frob(ai, aj);
                let ip_b = frob(bi, bj);
                acc += ci.conj() * cj * ip_a * ip_b;
            }
        }
        acc
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_inner(self).re.max(0.0).sqrt()
    }

    /// Materialize the d²×d² matrix: Σ c·(Bᵀ ⊗ A).
    pub fn to_matrix(&self) -> DMatrix<C64> {
        let d2 = self.dim * self.dim;
        let mut out = DMatrix::<C64>::zeros(d2, d2);
        for (c, a, b) in &self.pieces {
            out += b.transpose().kronecker(a) * *c;
        }
        out
    }
}

fn frob(a: &DMatrix<C64>, b: &DMatrix<C64>) -> C64 {
    let mut acc = c64(0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x.conj() * y;
    }
    acc
}

/// Least-squares coefficients of `target` on the span of `patterns`
/// (real coefficients; Gram system via factored inner products).
pub fn fit_real_coefficients(patterns: &[SuperOpSum], target: &SuperOpSum) -> Vec<f64> {
    let k = patterns.len();
    let gram = DMatrix::<f64>::from_fn(k, k, |i, j| patterns[i].frob_inner(&patterns[j]).re);
    let rhs = nalgebra::DVector::<f64>::from_fn(k, |i, _| patterns[i].frob_inner(target).re);
    let svd = gram.svd(true, true);
    let sol = svd.solve(&rhs, 1e-13).expect("Gram system is solvable");
    sol.iter().copied().collect()
}

/// Zero out superoperator elements whose frame frequency
/// `(f_k − f_l) − (f_i − f_j)` exceeds `keep_tol·|delta|` in magnitude.
/// Row/column indices decode column-major: matrix element (k,l) of the
/// output density matrix sits at vec index `l·d + k`.
pub fn rwa_mask(
    l: &DMatrix<C64>,
    frame_diag: &[f64],
    delta: f64,
    keep_tol: f64,
) -> DMatrix<C64> {
    let d = frame_diag.len();
    debug_assert_eq!(l.nrows(), d * d);
    let cut = keep_tol * delta.abs();
    let mut out = l.clone();
    for s in 0..d * d {
        let (i, j) = (s % d, s / d);
        for r in 0..d * d {
            let (k, lcol) = (r % d, r / d);
            let freq = (frame_diag[k] - frame_diag[lcol]) - (frame_diag[i] - frame_diag[j]);
            if freq.abs() > cut {
                out[(r, s)] = c64(0.0, 0.0);
            }
        }
    }
    out
}

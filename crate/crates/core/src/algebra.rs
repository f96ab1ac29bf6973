//! Dense complex operator arithmetic on composite spaces: elementary mode
//! and spin operators, commutators, the matrix exponential, and the
//! truncated adjoint series used for order-by-order expansions.

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::hilbert::{CompositeSpace, Factor};

pub type C64 = Complex<f64>;

pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Complex matrix tied to the composite space it acts on.
///
/// Hermiticity and the like are checkable predicates, not stored flags.
#[derive(Debug, Clone)]
pub struct Operator {
    space: Arc<CompositeSpace>,
    mat: DMatrix<C64>,
}

impl Operator {
    pub fn from_matrix(space: Arc<CompositeSpace>, mat: DMatrix<C64>) -> Result<Self> {
        let d = space.total_dim();
        if mat.nrows() != d || mat.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: mat.nrows().max(mat.ncols()),
            });
        }
        Ok(Operator { space, mat })
    }

    pub fn zeros(space: &Arc<CompositeSpace>) -> Self {
        let d = space.total_dim();
        Operator {
            space: space.clone(),
            mat: DMatrix::zeros(d, d),
        }
    }

    pub fn identity(space: &Arc<CompositeSpace>) -> Self {
        let d = space.total_dim();
        Operator {
            space: space.clone(),
            mat: DMatrix::identity(d, d),
        }
    }

    pub fn space(&self) -> &Arc<CompositeSpace> {
        &self.space
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn adjoint(&self) -> Operator {
        Operator {
            space: self.space.clone(),
            mat: self.mat.adjoint(),
        }
    }

    pub fn scale(&self, c: C64) -> Operator {
        Operator {
            space: self.space.clone(),
            mat: &self.mat * c,
        }
    }

    pub fn scale_re(&self, c: f64) -> Operator {
        self.scale(c64(c, 0.0))
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.mat.norm()
    }

    /// Spectral norm (largest singular value).
    pub fn spectral_norm(&self) -> f64 {
        if self.hermiticity_residual() < 1e-12 {
            let eig = nalgebra::SymmetricEigen::new(self.mat.clone());
            eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
        } else {
            let gram = self.mat.adjoint() * &self.mat;
            let eig = nalgebra::SymmetricEigen::new(gram);
            eig.eigenvalues
                .iter()
                .fold(0.0f64, |m, &x| m.max(x.max(0.0)))
                .sqrt()
        }
    }

    pub fn trace(&self) -> C64 {
        self.mat.trace()
    }

    /// Relative Hermiticity residual ‖M − M†‖/‖M‖ (0 for the zero matrix).
    pub fn hermiticity_residual(&self) -> f64 {
        let n = self.norm();
        if n == 0.0 {
            return 0.0;
        }
        (&self.mat - self.mat.adjoint()).norm() / n
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_residual() <= tol
    }

    pub fn is_skew_hermitian(&self, tol: f64) -> bool {
        let n = self.norm();
        if n == 0.0 {
            return true;
        }
        (&self.mat + self.mat.adjoint()).norm() / n <= tol
    }

    /// Off-diagonal Frobenius norm.
    pub fn offdiag_norm(&self) -> f64 {
        let mut s = 0.0;
        for j in 0..self.mat.ncols() {
            for i in 0..self.mat.nrows() {
                if i != j {
                    s += self.mat[(i, j)].norm_sqr();
                }
            }
        }
        s.sqrt()
    }

    /// Real diagonal entries; the imaginary parts must be negligible
    /// against the matrix norm.
    pub fn real_diagonal(&self) -> Result<Vec<f64>> {
        let scale = self.norm().max(1.0);
        let mut out = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let z = self.mat[(i, i)];
            if z.im.abs() > 1e-10 * scale {
                return Err(Error::NonFinite("diagonal expected real"));
            }
            out.push(z.re);
        }
        Ok(out)
    }

    pub fn has_finite_entries(&self) -> bool {
        self.mat.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// ⟨O⟩ = tr(O ρ) for a density matrix ρ.
    pub fn expectation(&self, rho: &DMatrix<C64>) -> C64 {
        (&self.mat * rho).trace()
    }

    /// Plain-text dump: one row per line, entries as `re+imj` with
    /// 17 significant digits, separated by single spaces.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.mat.nrows() {
            let mut first = true;
            for j in 0..self.mat.ncols() {
                if !first {
                    out.push(' ');
                }
                first = false;
                let z = self.mat[(i, j)];
                out.push_str(&format!("{:.16e}{:+.16e}j", z.re, z.im));
            }
            out.push('\n');
        }
        out
    }
}

fn check_same_space(a: &Operator, b: &Operator) -> Result<()> {
    if a.space != b.space {
        return Err(Error::SpaceMismatch);
    }
    Ok(())
}

impl Add for &Operator {
    type Output = Operator;
    fn add(self, rhs: &Operator) -> Operator {
        assert_eq!(self.space, rhs.space, "operator spaces differ");
        Operator {
            space: self.space.clone(),
            mat: &self.mat + &rhs.mat,
        }
    }
}

impl Sub for &Operator {
    type Output = Operator;
    fn sub(self, rhs: &Operator) -> Operator {
        assert_eq!(self.space, rhs.space, "operator spaces differ");
        Operator {
            space: self.space.clone(),
            mat: &self.mat - &rhs.mat,
        }
    }
}

impl Mul for &Operator {
    type Output = Operator;
    fn mul(self, rhs: &Operator) -> Operator {
        assert_eq!(self.space, rhs.space, "operator spaces differ");
        Operator {
            space: self.space.clone(),
            mat: &self.mat * &rhs.mat,
        }
    }
}

impl Neg for &Operator {
    type Output = Operator;
    fn neg(self) -> Operator {
        self.scale_re(-1.0)
    }
}

/// Embed a single-factor matrix into the composite space at factor `k`:
/// identity on every other factor.
pub fn embed(space: &Arc<CompositeSpace>, k: usize, local: &DMatrix<C64>) -> Operator {
    let mut acc = DMatrix::identity(1, 1);
    for (idx, f) in space.factors().iter().enumerate() {
        let d = f.dim();
        let next = if idx == k {
            debug_assert_eq!(local.nrows(), d);
            acc.kronecker(local)
        } else {
            acc.kronecker(&DMatrix::identity(d, d))
        };
        acc = next;
    }
    Operator {
        space: space.clone(),
        mat: acc,
    }
}

fn mode_annihilation_matrix(cutoff: usize) -> DMatrix<C64> {
    let mut a = DMatrix::zeros(cutoff, cutoff);
    for n in 1..cutoff {
        a[(n - 1, n)] = c64((n as f64).sqrt(), 0.0);
    }
    a
}

/// Annihilation operator on mode factor `k`: ⟨n-1|a|n⟩ = √n.
pub fn annihilation(space: &Arc<CompositeSpace>, k: usize) -> Result<Operator> {
    match space.factor(k) {
        Factor::Mode { cutoff } => Ok(embed(space, k, &mode_annihilation_matrix(*cutoff))),
        Factor::Spin { .. } => Err(Error::WrongFactorKind {
            index: k,
            expected: "bosonic mode",
        }),
    }
}

/// Creation operator on mode factor `k`.
pub fn creation(space: &Arc<CompositeSpace>, k: usize) -> Result<Operator> {
    Ok(annihilation(space, k)?.adjoint())
}

/// Number operator a†a on mode factor `k`.
pub fn number(space: &Arc<CompositeSpace>, k: usize) -> Result<Operator> {
    let a = annihilation(space, k)?;
    Ok(&a.adjoint() * &a)
}

/// Collective spin operators (S+, S-, S3) on spin factor `k`, in the
/// m-ascending basis: ⟨m±1|S±|m⟩ = √(j(j+1) − m(m±1)), S3 = diag(−j..j).
pub fn spin_ops(space: &Arc<CompositeSpace>, k: usize) -> Result<(Operator, Operator, Operator)> {
    let atoms = match space.factor(k) {
        Factor::Spin { atoms } => *atoms,
        Factor::Mode { .. } => {
            return Err(Error::WrongFactorKind {
                index: k,
                expected: "spin",
            })
        }
    };
    let dim = atoms + 1;
    let j = atoms as f64 / 2.0;
    let mut sp = DMatrix::zeros(dim, dim);
    let mut s3 = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let m = i as f64 - j;
        s3[(i, i)] = c64(m, 0.0);
        if i + 1 < dim {
            sp[(i + 1, i)] = c64((j * (j + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
        }
    }
    let sp_op = embed(space, k, &sp);
    let sm_op = sp_op.adjoint();
    let s3_op = embed(space, k, &s3);
    Ok((sp_op, sm_op, s3_op))
}

/// Commutator AB − BA.
pub fn commutator(a: &Operator, b: &Operator) -> Result<Operator> {
    check_same_space(a, b)?;
    Ok(&(a * b) - &(b * a))
}

/// Anticommutator AB + BA.
pub fn anticommutator(a: &Operator, b: &Operator) -> Result<Operator> {
    check_same_space(a, b)?;
    Ok(&(a * b) + &(b * a))
}

/// Matrix exponential e^A.
///
/// (Skew-)Hermitian inputs go through the Hermitian eigendecomposition, so
/// exponentials of skew-Hermitian generators are unitary up to roundoff;
/// everything else falls back to scaling-and-squaring with a Padé(13)
/// rational approximant.
pub fn matrix_exp(a: &Operator) -> Result<Operator> {
    if !a.has_finite_entries() {
        return Err(Error::NonFinite("matrix_exp input"));
    }
    let tol = 1e-12;
    let mat = if a.is_hermitian(tol) {
        exp_via_hermitian(&a.mat, false)
    } else if a.is_skew_hermitian(tol) {
        // A = iH with H Hermitian; e^A = V e^{iλ} V†.
        let h = &a.mat * c64(0.0, -1.0);
        exp_via_hermitian(&h, true)
    } else {
        exp_pade(&a.mat)
    };
    Ok(Operator {
        space: a.space.clone(),
        mat,
    })
}

fn exp_via_hermitian(h: &DMatrix<C64>, times_i: bool) -> DMatrix<C64> {
    let eig = nalgebra::SymmetricEigen::new(h.clone());
    let phases = eig.eigenvalues.map(|x| {
        if times_i {
            c64(x.cos(), x.sin())
        } else {
            c64(x.exp(), 0.0)
        }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&phases) * eig.eigenvectors.adjoint()
}

// Padé(13,13) coefficients, ascending.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn exp_pade(a: &DMatrix<C64>) -> DMatrix<C64> {
    let d = a.nrows();
    let one_norm: f64 = (0..d)
        .map(|j| (0..d).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let theta13 = 5.371920351148152;
    let s = if one_norm > theta13 {
        (one_norm / theta13).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a * c64(1.0 / f64::powi(2.0, s as i32), 0.0);

    let eye = DMatrix::<C64>::identity(d, d);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let u_inner = &a6 * c64(PADE13[13], 0.0) + &a4 * c64(PADE13[11], 0.0) + &a2 * c64(PADE13[9], 0.0);
    let u = &scaled
        * (&a6 * &u_inner
            + &a6 * c64(PADE13[7], 0.0)
            + &a4 * c64(PADE13[5], 0.0)
            + &a2 * c64(PADE13[3], 0.0)
            + &eye * c64(PADE13[1], 0.0));
    let v_inner = &a6 * c64(PADE13[12], 0.0) + &a4 * c64(PADE13[10], 0.0) + &a2 * c64(PADE13[8], 0.0);
    let v = &a6 * &v_inner
        + &a6 * c64(PADE13[6], 0.0)
        + &a4 * c64(PADE13[4], 0.0)
        + &a2 * c64(PADE13[2], 0.0)
        + &eye * c64(PADE13[0], 0.0);

    let num = &v + &u;
    let den = &v - &u;
    let mut r = den
        .lu()
        .solve(&num)
        .expect("Padé denominator is singular; input not exponentiable at this scale");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Truncated adjoint series Σ_{k=0..order} ad_A^k(B)/k!, the order-`order`
/// approximation to e^A B e^{−A}.
pub fn adjoint_series(a: &Operator, b: &Operator, order: usize) -> Result<Operator> {
    check_same_space(a, b)?;
    let mut acc = b.clone();
    let mut term = b.clone();
    for k in 1..=order {
        term = commutator(a, &term)?.scale_re(1.0 / k as f64);
        acc = &acc + &term;
    }
    Ok(acc)
}

/// Nested-commutator pieces ad_A^k(B)/k! for k = 0..=order.
pub fn adjoint_pieces(a: &Operator, b: &Operator, order: usize) -> Result<Vec<Operator>> {
    check_same_space(a, b)?;
    let mut pieces = Vec::with_capacity(order + 1);
    pieces.push(b.clone());
    let mut term = b.clone();
    for k in 1..=order {
        term = commutator(a, &term)?.scale_re(1.0 / k as f64);
        pieces.push(term.clone());
    }
    Ok(pieces)
}

/// The block ⟨row_k | O | col_k⟩ of factor `k`, as an operator on the space
/// with that factor removed.
pub fn factor_block(op: &Operator, k: usize, row: usize, col: usize) -> Result<Operator> {
    let space = op.space();
    let reduced = space.without_factor(k)?;
    let dr = reduced.total_dim();
    let nf = space.num_factors();
    let mut out = DMatrix::<C64>::zeros(dr, dr);
    for i_red in 0..dr {
        let mut mi = reduced.multi_index(i_red);
        mi.insert(k, row);
        let i_full = space.flat_index(&mi);
        for j_red in 0..dr {
            let mut mj = reduced.multi_index(j_red);
            mj.insert(k, col);
            let j_full = space.flat_index(&mj);
            out[(i_red, j_red)] = op.matrix()[(i_full, j_full)];
        }
    }
    debug_assert!(nf >= 2);
    Operator::from_matrix(reduced, out)
}

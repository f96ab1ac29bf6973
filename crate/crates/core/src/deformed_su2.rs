//! Recognition of polynomially deformed su(2) triples, extraction of the
//! structure polynomial per invariant block of the integral of motion, and
//! block decomposition of commuting operators.

use nalgebra::DMatrix;

use crate::algebra::{commutator, C64, Operator};
use crate::error::{Error, Result};
use crate::hilbert::Factor;

/// Absolute clustering tolerance for eigenvalues of the block label
/// (integer- or half-integer-valued in all presets up to roundoff).
pub const N_CLUSTER_TOL: f64 = 1e-8;

/// Relative tolerance on the polynomial reconstruction of [X+, X-].
pub const FIT_TOL: f64 = 1e-9;

/// Residuals of the deformed-algebra relations, all relative to the norm of
/// the operator they constrain.
#[derive(Debug, Clone)]
pub struct AlgebraResiduals {
    /// ‖[X3, X+] − X+‖ / ‖X+‖
    pub ladder_plus: f64,
    /// ‖[X3, X−] + X−‖ / ‖X−‖
    pub ladder_minus: f64,
    /// off-diagonality of [X+, X−] in the joint (X3, N) eigenbasis
    pub commutator_offdiag: f64,
    /// ‖X− − X+†‖ / ‖X+‖
    pub adjoint_pair: f64,
    /// max of ‖[N, X±]‖/‖X±‖ and ‖[N, X3]‖/‖X3‖
    pub n_conservation: f64,
}

impl AlgebraResiduals {
    pub fn max(&self) -> f64 {
        self.ladder_plus
            .max(self.ladder_minus)
            .max(self.commutator_offdiag)
            .max(self.adjoint_pair)
            .max(self.n_conservation)
    }

    pub fn pass(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// One invariant block of the integral of motion N.
#[derive(Debug, Clone)]
pub struct Block {
    /// Eigenvalue of N on this block.
    pub n_value: f64,
    /// Basis indices spanning the block.
    pub indices: Vec<usize>,
    /// Coefficients of P on this block, ascending degree. Empty for
    /// truncation-tainted blocks, which carry only the direct diagonal.
    pub poly_coeffs: Vec<f64>,
    /// Residual of the least-squares reconstruction, absolute.
    pub fit_residual: f64,
    /// True when the block touches the top two Fock levels of any mode,
    /// where ladder commutators are corrupted by truncation.
    pub truncation_tainted: bool,
    /// diag([X+, X−]) restricted to the block, in block index order.
    pub comm_diag: Vec<f64>,
    /// diag(X3) restricted to the block, in block index order.
    pub x3_diag: Vec<f64>,
}

impl Block {
    /// P evaluated at x3 from the fitted coefficients.
    pub fn poly_eval(&self, x3: f64) -> f64 {
        let mut acc = 0.0;
        let mut pw = 1.0;
        for &c in &self.poly_coeffs {
            acc += c * pw;
            pw *= x3;
        }
        acc
    }
}

/// A verified deformed-su(2) triple with its block label.
#[derive(Debug, Clone)]
pub struct DeformedAlgebra {
    pub xp: Operator,
    pub xm: Operator,
    pub x3: Operator,
    pub n_op: Operator,
    pub tol: f64,
    /// Populated by [`extract_polynomial`]; empty before extraction.
    pub blocks: Vec<Block>,
}

impl DeformedAlgebra {
    pub fn extracted(&self) -> bool {
        !self.blocks.is_empty()
    }
}

/// Group basis indices by the eigenvalue of a diagonal label operator.
/// Errors if the label has off-diagonal weight.
pub fn label_clusters(n_op: &Operator) -> Result<Vec<(f64, Vec<usize>)>> {
    let scale = n_op.norm().max(1.0);
    let off = n_op.offdiag_norm();
    if off > 1e-12 * scale {
        return Err(Error::LabelNotDiagonal {
            residual: off / scale,
        });
    }
    let diag = n_op.real_diagonal()?;
    let mut order: Vec<usize> = (0..diag.len()).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let mut clusters: Vec<(f64, Vec<usize>)> = Vec::new();
    for idx in order {
        match clusters.last_mut() {
            Some((v, members)) if (diag[idx] - *v).abs() <= N_CLUSTER_TOL => members.push(idx),
            _ => clusters.push((diag[idx], vec![idx])),
        }
    }
    for (_, members) in clusters.iter_mut() {
        members.sort_unstable();
    }
    Ok(clusters)
}

/// Check the deformed-su(2) relations for a candidate triple.
///
/// Returns pass/fail together with the individual residuals: the two ladder
/// relations against X3, off-diagonality of [X+, X−] in the joint (X3, N)
/// eigenbasis, X− = X+†, and commutation of the integral of motion N with
/// X± and X3.
pub fn verify_algebra(
    xp: &Operator,
    xm: &Operator,
    x3: &Operator,
    n_op: &Operator,
    tol: f64,
) -> Result<(bool, AlgebraResiduals)> {
    for o in [xm, x3, n_op] {
        if xp.space() != o.space() {
            return Err(Error::SpaceMismatch);
        }
    }
    let xp_norm = xp.norm().max(f64::MIN_POSITIVE);
    let xm_norm = xm.norm().max(f64::MIN_POSITIVE);
    let x3_norm = x3.norm().max(f64::MIN_POSITIVE);

    let ladder_plus = (&commutator(x3, xp)? - xp).norm() / xp_norm;
    let ladder_minus = (&commutator(x3, xm)? + xm).norm() / xm_norm;
    let adjoint_pair = (xm - &xp.adjoint()).norm() / xp_norm;

    let comm = commutator(xp, xm)?;
    let commutator_offdiag = joint_eigenbasis_offdiag(&comm, x3, n_op)?;

    let n_conservation = (commutator(n_op, xp)?.norm() / xp_norm)
        .max(commutator(n_op, xm)?.norm() / xm_norm)
        .max(commutator(n_op, x3)?.norm() / x3_norm);

    let residuals = AlgebraResiduals {
        ladder_plus,
        ladder_minus,
        commutator_offdiag,
        adjoint_pair,
        n_conservation,
    };
    Ok((residuals.pass(tol), residuals))
}

/// Off-diagonal weight of `op` relative to the joint eigenbasis of the two
/// diagonal labels (entries connecting distinct (x3, n) pairs), relative to
/// ‖op‖.
fn joint_eigenbasis_offdiag(op: &Operator, x3: &Operator, n_op: &Operator) -> Result<f64> {
    let x3_diag = diag_checked(x3)?;
    let n_diag = diag_checked(n_op)?;
    let scale = op.norm();
    if scale == 0.0 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    let m = op.matrix();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i == j {
                continue;
            }
            let same_sector = (x3_diag[i] - x3_diag[j]).abs() <= N_CLUSTER_TOL
                && (n_diag[i] - n_diag[j]).abs() <= N_CLUSTER_TOL;
            if !same_sector {
                s += m[(i, j)].norm_sqr();
            }
        }
    }
    Ok(s.sqrt() / scale)
}

fn diag_checked(op: &Operator) -> Result<Vec<f64>> {
    let scale = op.norm().max(1.0);
    if op.offdiag_norm() > 1e-12 * scale {
        return Err(Error::LabelNotDiagonal {
            residual: op.offdiag_norm() / scale,
        });
    }
    op.real_diagonal()
}

/// Does this basis state occupy the top two Fock levels of any mode factor?
fn touches_cutoff(alg_space: &crate::hilbert::CompositeSpace, flat: usize) -> bool {
    let multi = alg_space.multi_index(flat);
    alg_space
        .factors()
        .iter()
        .zip(&multi)
        .any(|(f, &i)| match f {
            Factor::Mode { cutoff } => i + 2 >= *cutoff,
            Factor::Spin { .. } => false,
        })
}

/// Build a verified algebra and fit the structure polynomial of
/// [X+, X−] against diag(X3) on every invariant block of N.
///
/// Truncation-tainted blocks are excluded from fitting and keep only the
/// direct commutator diagonal. The fitted degree on a block is capped at
/// one less than the number of distinct X3 values it contains, so the
/// least-squares problem stays determined.
pub fn extract_polynomial(mut alg: DeformedAlgebra, max_degree: usize) -> Result<DeformedAlgebra> {
    let (ok, residuals) = verify_algebra(&alg.xp, &alg.xm, &alg.x3, &alg.n_op, alg.tol)?;
    if !ok {
        return Err(Error::ExtractionFailed {
            n_value: f64::NAN,
            residual: residuals.max(),
            tol: alg.tol,
        });
    }
    let comm = commutator(&alg.xp, &alg.xm)?;
    let comm_scale = comm.norm();
    let fit_tol = FIT_TOL * comm_scale.max(f64::MIN_POSITIVE);
    let comm_diag_full = comm.real_diagonal()?;
    let x3_diag_full = diag_checked(&alg.x3)?;
    let clusters = label_clusters(&alg.n_op)?;
    let space = alg.xp.space().clone();

    let mut blocks = Vec::with_capacity(clusters.len());
    for (n_value, indices) in clusters {
        let tainted = indices.iter().any(|&i| touches_cutoff(&space, i));
        let comm_diag: Vec<f64> = indices.iter().map(|&i| comm_diag_full[i]).collect();
        let x3_diag: Vec<f64> = indices.iter().map(|&i| x3_diag_full[i]).collect();
        let (poly_coeffs, fit_residual) = if tainted {
            (Vec::new(), f64::NAN)
        } else {
            let (coeffs, resid) = fit_block_poly(&x3_diag, &comm_diag, max_degree);
            if resid > fit_tol {
                return Err(Error::ExtractionFailed {
                    n_value,
                    residual: resid,
                    tol: fit_tol,
                });
            }
            (coeffs, resid)
        };
        blocks.push(Block {
            n_value,
            indices,
            poly_coeffs,
            fit_residual,
            truncation_tainted: tainted,
            comm_diag,
            x3_diag,
        });
    }
    alg.blocks = blocks;
    Ok(alg)
}

/// Least-squares Vandermonde fit of y against powers of x, degree capped at
/// the number of distinct x values minus one. Returns (coefficients
/// ascending, absolute residual norm).
fn fit_block_poly(x: &[f64], y: &[f64], max_degree: usize) -> (Vec<f64>, f64) {
    let mut distinct: Vec<f64> = Vec::new();
    for &v in x {
        if !distinct.iter().any(|&w| (w - v).abs() <= N_CLUSTER_TOL) {
            distinct.push(v);
        }
    }
    let degree = max_degree.min(distinct.len().saturating_sub(1));
    let rows = x.len();
    let cols = degree + 1;
    let v = DMatrix::<f64>::from_fn(rows, cols, |r, c| x[r].powi(c as i32));
    let rhs = nalgebra::DVector::<f64>::from_row_slice(y);
    let svd = v.clone().svd(true, true);
    let coeffs = svd
        .solve(&rhs, 1e-13)
        .expect("SVD least squares is always solvable");
    let resid = (&v * &coeffs - &rhs).norm();
    (coeffs.iter().copied().collect(), resid)
}

/// Diagonal projector onto the truncation-safe sector: basis states that
/// keep every mode occupation below its top two Fock levels. Ladder
/// commutators are exact on this sector.
pub fn interior_projector(space: &std::sync::Arc<crate::hilbert::CompositeSpace>) -> Operator {
    let d = space.total_dim();
    let mut m = DMatrix::<C64>::zeros(d, d);
    for i in 0..d {
        if !touches_cutoff(space, i) {
            m[(i, i)] = crate::algebra::c64(1.0, 0.0);
        }
    }
    Operator::from_matrix(space.clone(), m).expect("projector dimensions match")
}

/// Basis indices belonging to truncation-untainted blocks.
pub fn untainted_indices(blocks: &[Block]) -> Vec<usize> {
    let mut out: Vec<usize> = blocks
        .iter()
        .filter(|b| !b.truncation_tainted)
        .flat_map(|b| b.indices.iter().copied())
        .collect();
    out.sort_unstable();
    out
}

/// Restrict `op` to each eigenspace of the block label `n_op`.
///
/// Requires [N, O] ≈ 0; the direct sum of the returned sub-matrices
/// reconstructs `op` up to the off-block leakage allowed by the tolerance.
pub fn block_decompose(n_op: &Operator, op: &Operator) -> Result<Vec<(f64, DMatrix<C64>)>> {
    if n_op.space() != op.space() {
        return Err(Error::SpaceMismatch);
    }
    let comm_norm = commutator(n_op, op)?.norm();
    let scale = op.norm().max(f64::MIN_POSITIVE);
    if comm_norm > 1e-10 * scale {
        return Err(Error::DoesNotCommute {
            residual: comm_norm,
        });
    }
    let clusters = label_clusters(n_op)?;
    let m = op.matrix();
    let mut out = Vec::with_capacity(clusters.len());
    for (n_value, indices) in clusters {
        let s = indices.len();
        let sub = DMatrix::<C64>::from_fn(s, s, |r, c| m[(indices[r], indices[c])]);
        out.push((n_value, sub));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{annihilation, c64, number, spin_ops, Operator};
    use crate::hilbert::{mode_space, spin_space, tensor};

    fn coupled_osc_algebra(cutoff: usize) -> DeformedAlgebra {
        let sp = tensor(vec![mode_space(cutoff).unwrap(), mode_space(cutoff).unwrap()]).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let b = annihilation(&sp, 1).unwrap();
        let xp = &b.adjoint() * &a;
        let xm = xp.adjoint();
        let x3 = (&number(&sp, 1).unwrap() - &number(&sp, 0).unwrap()).scale_re(0.5);
        let n_op = &number(&sp, 0).unwrap() + &number(&sp, 1).unwrap();
        DeformedAlgebra {
            xp,
            xm,
            x3,
            n_op,
            tol: 1e-12,
            blocks: Vec::new(),
        }
    }

    #[test]
    fn undeformed_su2_verifies() {
        let sp = tensor(vec![spin_space(2).unwrap()]).unwrap();
        let (spl, sm, s3) = spin_ops(&sp, 0).unwrap();
        // Casimir as the (single-block) integral of motion
        let casimir = &(&(&spl * &sm) + &(&sm * &spl)).scale_re(0.5) + &(&s3 * &s3);
        let (ok, res) = verify_algebra(&spl, &sm, &s3, &casimir, 1e-12).unwrap();
        assert!(ok, "residuals: {res:?}");
        assert!(res.max() < 1e-13);
    }

    #[test]
    fn coupled_oscillator_generators_verify() {
        let alg = coupled_osc_algebra(4);
        let (ok, res) = verify_algebra(&alg.xp, &alg.xm, &alg.x3, &alg.n_op, 1e-12).unwrap();
        assert!(ok, "residuals: {res:?}");
        assert!(res.max() < 1e-13);
    }

    #[test]
    fn sign_violation_fails() {
        // X+ = a, X− = a†, X3 = a†a violates [X3, X+] = +X+ (wrong sign).
        let sp = tensor(vec![mode_space(4).unwrap()]).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let n = number(&sp, 0).unwrap();
        let (ok, res) = verify_algebra(&a, &a.adjoint(), &n, &n, 1e-12).unwrap();
        assert!(!ok);
        assert!(res.ladder_plus > 1.0);
    }

    #[test]
    fn undeformed_extraction_returns_two_x3_any_a() {
        for atoms in [1usize, 2, 4, 5] {
            let sp = tensor(vec![spin_space(atoms).unwrap()]).unwrap();
            let (spl, sm, s3) = spin_ops(&sp, 0).unwrap();
            let casimir = &(&(&spl * &sm) + &(&sm * &spl)).scale_re(0.5) + &(&s3 * &s3);
            let alg = DeformedAlgebra {
                xp: spl,
                xm: sm,
                x3: s3,
                n_op: casimir,
                tol: 1e-12,
                blocks: Vec::new(),
            };
            let alg = extract_polynomial(alg, 3).unwrap();
            assert_eq!(alg.blocks.len(), 1);
            let b = &alg.blocks[0];
            assert!(!b.truncation_tainted);
            assert!((b.poly_coeffs[0]).abs() < 1e-10, "A={atoms}: {:?}", b.poly_coeffs);
            assert!((b.poly_coeffs[1] - 2.0).abs() < 1e-10, "A={atoms}");
            for c in b.poly_coeffs.iter().skip(2) {
                assert!(c.abs() < 1e-10, "A={atoms}");
            }
        }
    }

    #[test]
    fn coupled_oscillator_extraction_is_linear() {
        let alg = extract_polynomial(coupled_osc_algebra(6), 3).unwrap();
        assert!(alg.blocks.iter().any(|b| !b.truncation_tainted));
        for b in alg.blocks.iter().filter(|b| !b.truncation_tainted) {
            if b.indices.len() >= 2 {
                assert!(b.poly_coeffs[0].abs() < 1e-10);
                assert!((b.poly_coeffs[1] - 2.0).abs() < 1e-10, "n={}", b.n_value);
                for c in b.poly_coeffs.iter().skip(2) {
                    assert!(c.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn shg_block_commutator_matches_closed_form_oracle() {
        // diag([X+,X−]) at (n_a, n_b) is (n_a+1)(n_a+2) n_b − n_a(n_a−1)(n_b+1),
        // from the Fock matrix elements directly.
        let sp = tensor(vec![mode_space(8).unwrap(), mode_space(5).unwrap()]).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let b = annihilation(&sp, 1).unwrap();
        let a2 = &a * &a;
        let xp = &b.adjoint() * &a2;
        let xm = xp.adjoint();
        let comm = commutator(&xp, &xm).unwrap();
        let diag = comm.real_diagonal().unwrap();
        for (flat, value) in diag.iter().enumerate() {
            let mi = sp.multi_index(flat);
            let (na, nb) = (mi[0] as f64, mi[1] as f64);
            // clean only away from both mode cutoffs (a ladders by two)
            if mi[0] + 2 < 8 && mi[1] + 1 < 5 {
                let oracle = (na + 1.0) * (na + 2.0) * nb - na * (na - 1.0) * (nb + 1.0);
                assert!(
                    (value - oracle).abs() < 1e-10,
                    "({na},{nb}): {value} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn shg_extraction_fits_quadratic_on_untainted_blocks() {
        let sp = tensor(vec![mode_space(8).unwrap(), mode_space(5).unwrap()]).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let b = annihilation(&sp, 1).unwrap();
        let a2 = &a * &a;
        let xp = &b.adjoint() * &a2;
        let xm = xp.adjoint();
        let x3 = (&number(&sp, 1).unwrap() - &number(&sp, 0).unwrap()).scale_re(1.0 / 3.0);
        let n_op = &number(&sp, 0).unwrap() + &number(&sp, 1).unwrap().scale_re(2.0);
        let alg = DeformedAlgebra {
            xp,
            xm,
            x3,
            n_op,
            tol: 1e-12,
            blocks: Vec::new(),
        };
        let alg = extract_polynomial(alg, 3).unwrap();
        let n4 = alg
            .blocks
            .iter()
            .find(|b| (b.n_value - 4.0).abs() < 1e-9)
            .unwrap();
        assert!(!n4.truncation_tainted);
        // reconstruction matches the direct diagonal
        for (x3v, commv) in n4.x3_diag.iter().zip(&n4.comm_diag) {
            assert!((n4.poly_eval(*x3v) - commv).abs() < 1e-9);
        }
        assert!(n4.poly_coeffs.len() >= 3, "quadratic fit expected");
        assert!(n4.poly_coeffs[2].abs() > 0.1, "genuinely quadratic");
    }

    #[test]
    fn dicke_extraction_degree_at_most_two() {
        let sp = tensor(vec![mode_space(8).unwrap(), spin_space(2).unwrap()]).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let (spl, sm, s3) = spin_ops(&sp, 1).unwrap();
        let xp = &a * &spl;
        let xm = xp.adjoint();
        let n_op = &(&number(&sp, 0).unwrap() + &s3) + &Operator::identity(&sp);
        let alg = DeformedAlgebra {
            xp,
            xm: xm.clone(),
            x3: s3.clone(),
            n_op,
            tol: 1e-12,
            blocks: Vec::new(),
        };
        let alg = extract_polynomial(alg, 3).unwrap();
        // per-block closed form: C2 − m² + (2n+1)m with n = n_value − 1 − m
        let c2 = 2.0; // j(j+1), j = 1
        for blk in alg.blocks.iter().filter(|b| !b.truncation_tainted) {
            for (m, comm) in blk.x3_diag.iter().zip(&blk.comm_diag) {
                let n_ph = blk.n_value - 1.0 - m;
                let oracle = c2 - m * m + (2.0 * n_ph + 1.0) * m;
                assert!((comm - oracle).abs() < 1e-10);
                assert!((blk.poly_eval(*m) - oracle).abs() < 1e-9);
            }
            assert!(blk.poly_coeffs.len() <= 3);
        }
        let _ = sm;
    }

    #[test]
    fn block_sizes_for_two_mode_number() {
        let sp = tensor(vec![mode_space(3).unwrap(), mode_space(3).unwrap()]).unwrap();
        let n_op = &number(&sp, 0).unwrap() + &number(&sp, 1).unwrap();
        let id = Operator::identity(&sp);
        let blocks = block_decompose(&n_op, &id).unwrap();
        let sizes: Vec<usize> = blocks.iter().map(|(_, m)| m.nrows()).collect();
        assert_eq!(sizes, vec![1, 2, 3, 2, 1]);
        for (_, m) in &blocks {
            assert!((m - DMatrix::<C64>::identity(m.nrows(), m.ncols())).norm() < 1e-15);
        }
    }

    #[test]
    fn block_decompose_rejects_noncommuting() {
        let sp = tensor(vec![mode_space(3).unwrap()]).unwrap();
        let n_op = number(&sp, 0).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        assert!(matches!(
            block_decompose(&n_op, &a),
            Err(Error::DoesNotCommute { .. })
        ));
    }

    #[test]
    fn block_decompose_reassembles_exactly() {
        let sp = tensor(vec![mode_space(4).unwrap(), mode_space(3).unwrap()]).unwrap();
        let n_op = &number(&sp, 0).unwrap() + &number(&sp, 1).unwrap();
        // an N-conserving operator with nontrivial blocks
        let a = annihilation(&sp, 0).unwrap();
        let b = annihilation(&sp, 1).unwrap();
        let hop = &(&a.adjoint() * &b) + &(&b.adjoint() * &a);
        let op = &hop + &n_op.scale(c64(0.3, 0.0));
        let blocks = block_decompose(&n_op, &op).unwrap();
        let clusters = label_clusters(&n_op).unwrap();
        let mut rebuilt = DMatrix::<C64>::zeros(sp.total_dim(), sp.total_dim());
        for ((_, sub), (_, indices)) in blocks.iter().zip(&clusters) {
            for (r, &i) in indices.iter().enumerate() {
                for (c, &j) in indices.iter().enumerate() {
                    rebuilt[(i, j)] = sub[(r, c)];
                }
            }
        }
        let leakage = (op.matrix() - &rebuilt).norm();
        assert!(leakage < 1e-10 * op.norm().max(1.0));
    }
}

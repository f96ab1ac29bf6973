//! The small nonlinear rotation and everything it is applied to:
//! Hamiltonians, dissipators, and states. Produces order-2 effective
//! systems, classifies dissipator terms by rotating-frame frequency, and
//! backs every truncated formula with the exact-conjugation oracle.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::algebra::{adjoint_pieces, c64, factor_block, matrix_exp, C64, Operator};
use crate::deformed_su2::DeformedAlgebra;
use crate::error::{Error, Result};
use crate::hilbert::CompositeSpace;
use crate::lindblad::{CrossTerm, DensityState, MasterEquation};
use crate::superop::{fit_real_coefficients, SuperOpSum};

/// Unitarity residual allowed in the exact-conjugation oracle, per unit
/// √dim of Frobenius norm.
pub const UNITARITY_TOL: f64 = 1e-8;

/// Default relative width of the resonant window in the RWA filter.
pub const KEEP_TOL: f64 = 1e-6;

/// Rotating frame used when filtering rapidly oscillating terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameChoice {
    /// Δ·X3, the only large frequency in the problem.
    #[default]
    DeltaX3,
    /// The full diagonal effective Hamiltonian.
    FullDiagonal,
}

/// One dissipator term of an effective master equation: either proper
/// Lindblad form or an explicitly tagged non-Lindblad cross pair.
#[derive(Debug, Clone)]
pub enum DissTerm {
    Lindblad {
        rate: f64,
        op: Operator,
        order: u8,
    },
    /// `coeff·(2·left ρ right† + 2·right ρ left† − {left†right + right†left, ρ})`
    Cross {
        coeff: f64,
        left: Operator,
        right: Operator,
        order: u8,
    },
}

impl DissTerm {
    pub fn order(&self) -> u8 {
        match self {
            DissTerm::Lindblad { order, .. } | DissTerm::Cross { order, .. } => *order,
        }
    }
}

/// U = exp[ε(X+ − X−)], the small nonlinear rotation.
pub fn small_rotation(alg: &DeformedAlgebra, epsilon: f64) -> Result<Operator> {
    if !epsilon.is_finite() {
        return Err(Error::NonFinite("epsilon"));
    }
    if epsilon.abs() >= 1.0 {
        return Err(Error::Config(format!(
            "epsilon = {epsilon} is out of the perturbative range (|epsilon| < 1)"
        )));
    }
    let gen = (&alg.xp - &alg.xm).scale_re(epsilon);
    matrix_exp(&gen)
}

/// ε = g/Δ warning threshold.
pub fn epsilon_warning(epsilon: f64) -> Option<String> {
    (epsilon.abs() > 0.3).then(|| {
        format!("epsilon = {epsilon:.4} exceeds 0.3; order-2 truncation is unreliable here")
    })
}

/// U O U†, the oracle against which every truncated formula is tested.
/// Refuses a non-unitary U.
pub fn conjugate_exact(u: &Operator, o: &Operator) -> Result<Operator> {
    if u.space() != o.space() {
        return Err(Error::SpaceMismatch);
    }
    let d = u.dim() as f64;
    let resid = (&(&u.adjoint() * u) - &Operator::identity(u.space())).norm();
    let tol = UNITARITY_TOL * d.sqrt();
    if resid > tol {
        return Err(Error::NotUnitary { residual: resid, tol });
    }
    Ok(&(u * o) * &u.adjoint())
}

/// Δ·X3 + (g²/Δ)·P(X3), assembled blockwise from the fitted structure
/// polynomial. Truncation-tainted blocks fall back to the direct
/// commutator diagonal, which keeps the oracle residual O(ε³) uniformly.
pub fn effective_hamiltonian_order2(
    delta: f64,
    g: f64,
    alg: &DeformedAlgebra,
) -> Result<Operator> {
    if delta == 0.0 {
        return Err(Error::DegenerateDetuning);
    }
    if !alg.extracted() {
        return Err(Error::ExtractionRequired);
    }
    let d = alg.x3.dim();
    let mut diag = vec![0.0f64; d];
    for block in &alg.blocks {
        for (pos, &idx) in block.indices.iter().enumerate() {
            let x3 = block.x3_diag[pos];
            let p = if block.truncation_tainted {
                block.comm_diag[pos]
            } else {
                block.poly_eval(x3)
            };
            diag[idx] = delta * x3 + g * g / delta * p;
        }
    }
    let mat = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        d,
        diag.iter().map(|&x| c64(x, 0.0)),
    ));
    Operator::from_matrix(alg.x3.space().clone(), mat)
}

/// Nested-commutator pieces of U C U† = Σ εᵏ·ad^k(C)/k!: returns
/// [(C, 0), ([X+−X−, C], 1), (½[X+−X−,[X+−X−,C]], 2), …] up to `order`.
/// The exact conjugation remains available through [`conjugate_exact`].
pub fn transform_dissipator(
    alg: &DeformedAlgebra,
    c: &Operator,
    order: u8,
) -> Result<Vec<(Operator, u8)>> {
    if order > 2 {
        return Err(Error::Config(format!(
            "dissipator expansion order {order} not in 0..=2"
        )));
    }
    let gen = &alg.xp - &alg.xm;
    let pieces = adjoint_pieces(&gen, c, order as usize)?;
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(k, op)| (op, k as u8))
        .collect())
}

/// Split an operator into rotating-frame frequency components
/// [F, O_ω] = ω·O_ω for a diagonal frame generator F.
pub fn frequency_components(frame: &Operator, op: &Operator) -> Result<Vec<(f64, Operator)>> {
    let scale = frame.norm().max(1.0);
    if frame.offdiag_norm() > 1e-12 * scale {
        return Err(Error::FrameNotDiagonal {
            residual: frame.offdiag_norm() / scale,
        });
    }
    let f = frame.real_diagonal()?;
    let d = op.dim();
    let fmax = f.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let cluster = 1e-9 * (1.0 + fmax);
    let mut comps: Vec<(f64, DMatrix<C64>)> = Vec::new();
    let m = op.matrix();
    for j in 0..d {
        for i in 0..d {
            let z = m[(i, j)];
            if z.norm_sqr() == 0.0 {
                continue;
            }
            let freq = f[i] - f[j];
            match comps
                .iter_mut()
                .find(|(w, _)| (*w - freq).abs() <= cluster)
            {
                Some((_, mat)) => mat[(i, j)] = z,
                None => {
                    let mut mat = DMatrix::zeros(d, d);
                    mat[(i, j)] = z;
                    comps.push((freq, mat));
                }
            }
        }
    }
    comps.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    comps
        .into_iter()
        .map(|(w, mat)| Ok((w, Operator::from_matrix(op.space().clone(), mat)?)))
        .collect()
}

/// Keep only resonant dissipator terms in the frame of a diagonal
/// generator: a Liouvillian term survives iff it connects density-matrix
/// elements of equal frame frequency (|ω| ≤ keep_tol·|Δ|).
///
/// Lindblad terms decohere into one Lindblad term per frequency component
/// of their collapse operator; cross pairs keep only components where both
/// sides rotate at the same frequency. Filtering is idempotent.
pub fn rwa_filter(
    terms: Vec<DissTerm>,
    frame: &Operator,
    delta: f64,
    keep_tol: f64,
) -> Result<Vec<DissTerm>> {
    let cut = keep_tol * delta.abs();
    let mut out = Vec::new();
    for term in terms {
        match term {
            DissTerm::Lindblad { rate, op, order } => {
                for (_, comp) in frequency_components(frame, &op)? {
                    out.push(DissTerm::Lindblad {
                        rate,
                        op: comp,
                        order,
                    });
                }
            }
            DissTerm::Cross {
                coeff,
                left,
                right,
                order,
            } => {
                let lc = frequency_components(frame, &left)?;
                let rc = frequency_components(frame, &right)?;
                for (wl, l) in &lc {
                    for (wr, r) in &rc {
                        if (wl - wr).abs() <= cut {
                            out.push(DissTerm::Cross {
                                coeff,
                                left: l.clone(),
                                right: r.clone(),
                                order,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// UρU†; trace, Hermiticity and positivity survive by unitarity and are
/// re-validated on construction.
pub fn transform_state(u: &Operator, rho: &DensityState) -> Result<DensityState> {
    if u.space() != &rho.space {
        return Err(Error::SpaceMismatch);
    }
    let d = u.dim() as f64;
    let resid = (&(&u.adjoint() * u) - &Operator::identity(u.space())).norm();
    if resid > UNITARITY_TOL * d.sqrt() {
        return Err(Error::NotUnitary {
            residual: resid,
            tol: UNITARITY_TOL * d.sqrt(),
        });
    }
    let out = u.matrix() * &rho.rho * u.matrix().adjoint();
    DensityState::new(rho.space.clone(), out, rho.time)
}

/// Options for [`derive_effective_system`].
#[derive(Debug, Clone)]
pub struct DeriveOptions {
    /// ε-order kept in the dissipator expansion (0, 1 or 2).
    pub order: u8,
    pub apply_rwa: bool,
    /// Factor index to treat as a vacuum mode and trace out.
    pub vacuum_reduce: Option<usize>,
    pub frame: FrameChoice,
    pub keep_tol: f64,
}

impl Default for DeriveOptions {
    fn default() -> Self {
        DeriveOptions {
            order: 2,
            apply_rwa: false,
            vacuum_reduce: None,
            frame: FrameChoice::DeltaX3,
            keep_tol: KEEP_TOL,
        }
    }
}

/// Derived effective system: the order-2 diagonal Hamiltonian plus
/// transformed dissipators with symbolic ε-order bookkeeping.
#[derive(Debug, Clone)]
pub struct EffectiveSystem {
    pub epsilon: f64,
    pub delta: f64,
    pub g: f64,
    /// Diagonal effective Hamiltonian on the (possibly reduced) space.
    pub h_eff: Operator,
    /// Lindblad-form dissipators (rate, C, ε-order tag); rates carry the
    /// model's γ/2 and the ε powers of their order.
    pub dissipators: Vec<(f64, Operator, u8)>,
    /// Non-Lindblad cross pairs (coeff, left, right, ε-order tag).
    pub cross_terms: Vec<(f64, Operator, Operator, u8)>,
    /// Identity component of h_eff, reported separately since it does not
    /// affect dynamics.
    pub scalar_part: f64,
    pub frame: String,
    pub truncation_order: u8,
    pub warnings: Vec<String>,
}

impl EffectiveSystem {
    pub fn space(&self) -> &Arc<CompositeSpace> {
        self.h_eff.space()
    }

    pub fn to_master_equation(&self) -> Result<MasterEquation> {
        let dissipators = self
            .dissipators
            .iter()
            .map(|(r, c, _)| (*r, c.clone()))
            .collect();
        let cross = self
            .cross_terms
            .iter()
            .map(|(coeff, l, r, _)| CrossTerm {
                coeff: *coeff,
                left: l.clone(),
                right: r.clone(),
            })
            .collect();
        MasterEquation::new(self.h_eff.clone(), dissipators, cross)
    }
}

/// Assemble the effective system for a model: order-2 diagonal Hamiltonian
/// from the extracted polynomial, dissipators expanded in ε and grouped by
/// order, optional RWA filtering, optional vacuum-mode reduction.
pub fn derive_effective_system(
    model: &crate::models::ModelSystem,
    alg: &DeformedAlgebra,
    opts: &DeriveOptions,
) -> Result<EffectiveSystem> {
    let delta = model.delta;
    let g = model.g;
    if delta == 0.0 {
        return Err(Error::DegenerateDetuning);
    }
    let epsilon = g / delta;
    let mut warnings = Vec::new();
    if let Some(w) = epsilon_warning(epsilon) {
        warnings.push(w);
    }

    let h_eff = if opts.order == 0 || g == 0.0 {
        // no rotation: the interaction Hamiltonian itself
        if g == 0.0 && opts.order > 0 {
            effective_hamiltonian_order2(delta, g, alg)?
        } else {
            model.hint.clone()
        }
    } else {
        effective_hamiltonian_order2(delta, g, alg)?
    };

    let mut terms: Vec<DissTerm> = Vec::new();
    for (rate, c, _) in &model.dissipators {
        let pieces = transform_dissipator(alg, c, opts.order)?;
        let b: Vec<&Operator> = pieces.iter().map(|(op, _)| op).collect();
        terms.push(DissTerm::Lindblad {
            rate: *rate,
            op: b[0].clone(),
            order: 0,
        });
        if opts.order >= 1 && epsilon != 0.0 {
            terms.push(DissTerm::Cross {
                coeff: rate * epsilon,
                left: b[0].clone(),
                right: b[1].clone(),
                order: 1,
            });
        }
        if opts.order >= 2 && epsilon != 0.0 {
            terms.push(DissTerm::Lindblad {
                rate: rate * epsilon * epsilon,
                op: b[1].clone(),
                order: 2,
            });
            terms.push(DissTerm::Cross {
                coeff: rate * epsilon * epsilon,
                left: b[0].clone(),
                right: b[2].clone(),
                order: 2,
            });
        }
    }

    let frame_desc;
    if opts.apply_rwa {
        let frame_op = match opts.frame {
            FrameChoice::DeltaX3 => alg.x3.scale_re(delta),
            FrameChoice::FullDiagonal => h_eff.clone(),
        };
        frame_desc = match opts.frame {
            FrameChoice::DeltaX3 => format!("delta*X3 (keep_tol = {:.1e})", opts.keep_tol),
            FrameChoice::FullDiagonal => format!("diag(H_eff) (keep_tol = {:.1e})", opts.keep_tol),
        };
        terms = rwa_filter(terms, &frame_op, delta, opts.keep_tol)?;
    } else {
        frame_desc = "none".to_string();
    }

    let (h_final, terms_final) = match opts.vacuum_reduce {
        None => (h_eff, terms),
        Some(k) => {
            let dim_k = model.space.factor(k).dim();
            // off-vacuum Hamiltonian coupling would be silently lost
            let mut leak = 0.0;
            for n in 1..dim_k {
                leak += factor_block(&h_eff, k, n, 0)?.norm();
            }
            if leak > 1e-10 * h_eff.norm().max(1.0) {
                warnings.push(format!(
                    "vacuum reduction drops off-vacuum Hamiltonian coupling of norm {leak:.3e}"
                ));
            }
            let h_red = factor_block(&h_eff, k, 0, 0)?;
            let mut reduced = Vec::new();
            for term in terms {
                match term {
                    DissTerm::Lindblad { rate, op, order } => {
                        for kb in vacuum_kraus_blocks(&op, k, dim_k)? {
                            reduced.push(DissTerm::Lindblad {
                                rate,
                                op: kb,
                                order,
                            });
                        }
                    }
                    DissTerm::Cross {
                        coeff,
                        left,
                        right,
                        order,
                    } => {
                        // paired blocks at the same outgoing vacuum level
                        for n in 0..dim_k {
                            let lb = factor_block(&left, k, n, 0)?;
                            let rb = factor_block(&right, k, n, 0)?;
                            let (ln, rn) = (lb.norm(), rb.norm());
                            if ln > 1e-14 && rn > 1e-14 {
                                reduced.push(DissTerm::Cross {
                                    coeff,
                                    left: lb,
                                    right: rb,
                                    order,
                                });
                            }
                        }
                    }
                }
            }
            (h_red, reduced)
        }
    };

    let scalar_part = h_final.trace().re / h_final.dim() as f64;
    if h_final.hermiticity_residual() > 1e-12 {
        return Err(Error::InvalidState(format!(
            "effective Hamiltonian not Hermitian: {:.3e}",
            h_final.hermiticity_residual()
        )));
    }

    let mut dissipators = Vec::new();
    let mut cross_terms = Vec::new();
    for term in terms_final {
        match term {
            DissTerm::Lindblad { rate, op, order } => {
                if rate < 0.0 {
                    return Err(Error::InvalidState(format!("negative rate {rate}")));
                }
                if op.norm() > 1e-14 {
                    dissipators.push((rate, op, order));
                }
            }
            DissTerm::Cross {
                coeff,
                left,
                right,
                order,
            } => {
                if left.norm() > 1e-14 && right.norm() > 1e-14 {
                    cross_terms.push((coeff, left, right, order));
                }
            }
        }
    }

    Ok(EffectiveSystem {
        epsilon,
        delta,
        g,
        h_eff: h_final,
        dissipators,
        cross_terms,
        scalar_part,
        frame: frame_desc,
        truncation_order: opts.order,
        warnings,
    })
}

/// Nonzero vacuum-sector blocks ⟨n_k|C|0_k⟩ of a collapse operator; the
/// reduced dissipator is the sum of Lindblad terms over these blocks.
fn vacuum_kraus_blocks(c: &Operator, k: usize, dim_k: usize) -> Result<Vec<Operator>> {
    let scale = c.norm().max(1.0);
    let mut out = Vec::new();
    for n in 0..dim_k {
        let blk = factor_block(c, k, n, 0)?;
        if blk.norm() > 1e-14 * scale {
            out.push(blk);
        }
    }
    Ok(out)
}

/// Dissipative superoperator of the exactly transformed master equation,
/// as structured pieces: Σ_m rate_m·L[U C_m U†].
pub fn exact_transformed_dissipator(
    u: &Operator,
    dissipators: &[(f64, Operator)],
) -> Result<SuperOpSum> {
    let d = u.dim();
    let mut sum = SuperOpSum::new(d);
    for (rate, c) in dissipators {
        let c_exact = conjugate_exact(u, c)?;
        sum.push_lindblad(*rate, &c_exact);
    }
    Ok(sum)
}

/// Least-squares coefficients of Lindblad patterns inside the exactly
/// transformed (and RWA-filtered) dissipator. The fit is a Frobenius
/// projection of the superoperator onto the span of `L[pattern_i]`.
///
/// When `interior` is given (a diagonal projector onto the
/// truncation-safe sector), collapse components and patterns are first
/// restricted to it, so cutoff-boundary artifacts do not pollute the
/// fitted rates.
pub fn fit_dissipator_rates(
    u: &Operator,
    dissipators: &[(f64, Operator)],
    patterns: &[&Operator],
    frame: &Operator,
    delta: f64,
    keep_tol: f64,
    interior: Option<&Operator>,
) -> Result<Vec<f64>> {
    let project = |o: &Operator| match interior {
        None => o.clone(),
        Some(p) => &(p * o) * p,
    };
    let d = u.dim();
    let cut = keep_tol * delta.abs();
    let mut target = SuperOpSum::new(d);
    for (rate, c) in dissipators {
        let c_exact = conjugate_exact(u, c)?;
        let comps = frequency_components(frame, &c_exact)?;
        for (wl, l) in &comps {
            for (wr, r) in &comps {
                if (wl - wr).abs() <= cut {
                    let (lp, rp) = (project(l), project(r));
                    if std::ptr::eq(l, r) {
                        target.push_lindblad(*rate, &lp);
                    } else {
                        let m = rp.matrix().adjoint() * lp.matrix();
                        let eye = DMatrix::<C64>::identity(d, d);
                        target.push(c64(2.0 * rate, 0.0), lp.matrix().clone(), rp.matrix().adjoint());
                        target.push(c64(-*rate, 0.0), m.clone(), eye.clone());
                        target.push(c64(-*rate, 0.0), eye, m);
                    }
                }
            }
        }
    }
    let pattern_sums: Vec<SuperOpSum> = patterns
        .iter()
        .map(|p| {
            let pp = project(p);
            let mut s = SuperOpSum::new(pp.dim());
            s.push_lindblad(1.0, &pp);
            s
        })
        .collect();
    Ok(fit_real_coefficients(&pattern_sums, &target))
}

/// Effective generator on the non-vacuum factors: apply the exactly
/// transformed dissipator to vacuum⊗σ and trace out factor `k`. Returns
/// the Kraus-block Lindblad sum Σ_n rate·L[⟨n|U C U†|0⟩].
pub fn vacuum_sector_dissipator(
    u: &Operator,
    dissipators: &[(f64, Operator)],
    k: usize,
) -> Result<SuperOpSum> {
    let space = u.space();
    let dim_k = space.factor(k).dim();
    let reduced_dim = space.without_factor(k)?.total_dim();
    let mut sum = SuperOpSum::new(reduced_dim);
    for (rate, c) in dissipators {
        let c_exact = conjugate_exact(u, c)?;
        for blk in vacuum_kraus_blocks(&c_exact, k, dim_k)? {
            sum.push_lindblad(*rate, &blk);
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{annihilation, number, spin_ops};
    use crate::deformed_su2::extract_polynomial;
    use crate::hilbert::{mode_space, spin_space, tensor};
    use crate::lindblad::{product_state, FactorState};
    use approx::assert_relative_eq;

    fn coupled_alg(cutoff: usize) -> DeformedAlgebra {
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
    fn zero_rotation_is_identity() {
        let alg = coupled_alg(4);
        let u = small_rotation(&alg, 0.0).unwrap();
        assert!((&u - &Operator::identity(u.space())).norm() < 1e-14);
    }

    #[test]
    fn single_excitation_block_is_plane_rotation() {
        // On the N=1 block the generator is the 2×2 antisymmetric matrix,
        // so U restricted there is [[cos ε, ∓sin ε], [±sin ε, cos ε]].
        let alg = coupled_alg(3);
        let eps = 0.17;
        let u = small_rotation(&alg, eps).unwrap();
        let sp = u.space();
        let i10 = sp.flat_index(&[1, 0]);
        let i01 = sp.flat_index(&[0, 1]);
        let (c, s) = (eps.cos(), eps.sin());
        assert_relative_eq!(u.matrix()[(i10, i10)].re, c, epsilon = 1e-12);
        assert_relative_eq!(u.matrix()[(i01, i01)].re, c, epsilon = 1e-12);
        assert_relative_eq!(u.matrix()[(i01, i10)].re, s, epsilon = 1e-12);
        assert_relative_eq!(u.matrix()[(i10, i01)].re, -s, epsilon = 1e-12);
    }

    #[test]
    fn rotation_remainder_is_third_order() {
        // ‖U − (1 + A + A²/2)‖ = O(ε³): fitted log-log slope ≥ 2.9.
        let alg = coupled_alg(4);
        let gen0 = &alg.xp - &alg.xm;
        let mut pts = Vec::new();
        for &eps in &[0.02f64, 0.05, 0.1, 0.2] {
            let u = small_rotation(&alg, eps).unwrap();
            let a = gen0.scale_re(eps);
            let approx_u = &(&Operator::identity(u.space()) + &a) + &(&a * &a).scale_re(0.5);
            pts.push((eps.ln(), (&u - &approx_u).norm().ln()));
        }
        let slope = fit_slope(&pts);
        assert!(slope >= 2.9, "slope {slope:.3}");
    }

    #[test]
    fn conjugation_preserves_spectrum_and_trace() {
        let alg = coupled_alg(4);
        let u = small_rotation(&alg, 0.15).unwrap();
        let h = &alg.x3.scale_re(2.0) + &(&alg.xp + &alg.xm).scale_re(0.3);
        let h2 = conjugate_exact(&u, &h).unwrap();
        assert!((h2.trace() - h.trace()).norm() < 1e-12 * h.norm().max(1.0));
        let mut e1 = nalgebra::SymmetricEigen::new(h.matrix().clone()).eigenvalues;
        let mut e2 = nalgebra::SymmetricEigen::new(h2.matrix().clone()).eigenvalues;
        let (s1, s2) = (e1.as_mut_slice(), e2.as_mut_slice());
        s1.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s2.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        // identity conjugation
        let id = Operator::identity(h.space());
        assert!((&conjugate_exact(&id, &h).unwrap() - &h).norm() < 1e-15);
    }

    #[test]
    fn conjugate_rejects_non_unitary() {
        let alg = coupled_alg(3);
        let bad = alg.x3.scale_re(1.7);
        assert!(matches!(
            conjugate_exact(&bad, &alg.x3),
            Err(Error::NotUnitary { .. })
        ));
    }

    #[test]
    fn order2_hamiltonian_matches_oracle_to_third_order() {
        let alg = extract_polynomial(coupled_alg(6), 3).unwrap();
        let delta = 1.0;
        let mut pts = Vec::new();
        for &eps in &[0.02f64, 0.05, 0.1, 0.2] {
            let g = eps * delta;
            let hint = &alg.x3.scale_re(delta) + &(&alg.xp + &alg.xm).scale_re(g);
            let u = small_rotation(&alg, eps).unwrap();
            let exact = conjugate_exact(&u, &hint).unwrap();
            let heff = effective_hamiltonian_order2(delta, g, &alg).unwrap();
            pts.push((eps.ln(), ((&exact - &heff).norm() / hint.norm()).ln()));
        }
        let slope = fit_slope(&pts);
        assert!(slope >= 2.7, "slope {slope:.3}");
    }

    #[test]
    fn transform_dissipator_pieces_for_coupled_oscillators() {
        // [X+−X−, b] = −a away from the Fock boundary; the boundary rows
        // and columns carry the usual truncation artifact.
        let alg = coupled_alg(5);
        let sp = alg.xp.space().clone();
        let b = annihilation(&sp, 1).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let pieces = transform_dissipator(&alg, &b, 2).unwrap();
        assert_eq!(pieces.len(), 3);
        assert!((&pieces[0].0 - &b).norm() < 1e-15);
        let interior = |i: usize, j: usize| {
            let (mi, mj) = (sp.multi_index(i), sp.multi_index(j));
            mi.iter().chain(mj.iter()).all(|&n| n + 2 < 5)
        };
        let order1 = &pieces[1].0 + &a;
        let order2 = &pieces[2].0 + &b.scale_re(0.5);
        for i in 0..sp.total_dim() {
            for j in 0..sp.total_dim() {
                if interior(i, j) {
                    assert!(order1.matrix()[(i, j)].norm() < 1e-13, "order-1 at ({i},{j})");
                    assert!(order2.matrix()[(i, j)].norm() < 1e-13, "order-2 at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn frequency_components_reassemble() {
        let sp = tensor(vec![mode_space(3).unwrap(), mode_space(3).unwrap()]).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let b = annihilation(&sp, 1).unwrap();
        let frame = (&number(&sp, 1).unwrap() - &number(&sp, 0).unwrap()).scale_re(0.5);
        let mixed = &a + &b.adjoint();
        let comps = frequency_components(&frame, &mixed).unwrap();
        assert_eq!(comps.len(), 1, "a and b† co-rotate in this frame");
        let sum = comps
            .iter()
            .fold(Operator::zeros(&sp), |acc, (_, o)| &acc + o);
        assert!((&sum - &mixed).norm() < 1e-15);
        let split = &a + &b;
        let comps2 = frequency_components(&frame, &split).unwrap();
        assert_eq!(comps2.len(), 2);
    }

    #[test]
    fn rwa_keeps_resonant_drops_detuned() {
        let alg = coupled_alg(4);
        let sp = alg.xp.space().clone();
        let delta = 1.0;
        let frame = alg.x3.scale_re(delta);
        let a = annihilation(&sp, 0).unwrap();
        let b = annihilation(&sp, 1).unwrap();
        let terms = vec![
            DissTerm::Lindblad {
                rate: 0.5,
                op: b.clone(),
                order: 0,
            },
            DissTerm::Cross {
                coeff: 0.1,
                left: b.clone(),
                right: a.scale_re(-1.0),
                order: 1,
            },
        ];
        let kept = rwa_filter(terms, &frame, delta, 1e-6).unwrap();
        // L[b] survives whole; the b↔a cross pair rotates at Δ and dies.
        assert_eq!(kept.len(), 1);
        assert!(matches!(&kept[0], DissTerm::Lindblad { op, .. } if (op - &b).norm() < 1e-14));
    }

    #[test]
    fn rwa_filter_is_idempotent() {
        let alg = coupled_alg(4);
        let sp = alg.xp.space().clone();
        let delta = 1.0;
        let frame = alg.x3.scale_re(delta);
        let a = annihilation(&sp, 0).unwrap();
        let b = annihilation(&sp, 1).unwrap();
        let terms = vec![
            DissTerm::Lindblad {
                rate: 0.5,
                op: &b + &a,
                order: 0,
            },
            DissTerm::Cross {
                coeff: 0.1,
                left: b,
                right: a,
                order: 1,
            },
        ];
        let once = rwa_filter(terms, &frame, delta, 1e-6).unwrap();
        let twice = rwa_filter(once.clone(), &frame, delta, 1e-6).unwrap();
        assert_eq!(once.len(), twice.len());
        let norm = |ts: &[DissTerm]| -> f64 {
            ts.iter()
                .map(|t| match t {
                    DissTerm::Lindblad { rate, op, .. } => rate * op.norm(),
                    DissTerm::Cross {
                        coeff, left, right, ..
                    } => coeff * left.norm() * right.norm(),
                })
                .sum()
        };
        assert_relative_eq!(norm(&once), norm(&twice), epsilon = 1e-12);
    }

    #[test]
    fn transform_state_preserves_purity_and_trace() {
        let alg = coupled_alg(6);
        let sp = alg.xp.space().clone();
        let u = small_rotation(&alg, 0.2).unwrap();
        let rho = product_state(&sp, &[FactorState::Fock(1), FactorState::Fock(0)]).unwrap();
        let out = transform_state(&u, &rho).unwrap();
        assert!((out.trace_real() - 1.0).abs() < 1e-14);
        assert!((out.purity() - 1.0).abs() < 1e-12);
        // identity transform
        let id = Operator::identity(&sp);
        let same = transform_state(&id, &rho).unwrap();
        assert!((&same.rho - &rho.rho).norm() < 1e-15);
    }

    #[test]
    fn vacuum_reduction_closed_forms() {
        // coupled oscillators, vacuum mode b: H goes linear in a†a with
        // slope −(Δ/2 + g²/Δ) (the −(g²/Δ)a†a form shifted by the block
        // label), dissipator (γ/2)ε² L[a]
        let (model, alg) =
            crate::models::coupled_oscillators(5.0, 6.0, 0.05, 0.01, 6, 6).unwrap();
        let (delta, g, gamma) = (model.delta, model.g, model.gamma);
        let eps = g / delta;
        let sys = derive_effective_system(
            &model,
            &alg,
            &DeriveOptions {
                apply_rwa: true,
                vacuum_reduce: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let slope = -(delta / 2.0 + g * g / delta);
        for n in 0..4 {
            assert!(
                (sys.h_eff.matrix()[(n, n)].re - slope * n as f64).abs() < 1e-12,
                "diagonal at n={n}"
            );
        }
        assert_eq!(sys.dissipators.len(), 1);
        let (rate, op, order) = &sys.dissipators[0];
        assert!((rate - gamma / 2.0 * eps * eps).abs() < 1e-15);
        assert_eq!(*order, 2);
        let a_red = annihilation(sys.h_eff.space(), 0).unwrap();
        assert!((op - &a_red.scale_re(-1.0)).norm() < 1e-12, "op is −a");
        assert!(sys.cross_terms.is_empty());

        // SHG, vacuum mode b: quadratic Kerr coefficient −g²/Δ survives
        let (model_s, alg_s) =
            crate::models::second_harmonic(1.0, 3.0, 0.05, 0.01, 8, 5).unwrap();
        let sys_s = derive_effective_system(
            &model_s,
            &alg_s,
            &DeriveOptions {
                apply_rwa: true,
                vacuum_reduce: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        // diag(n) = −(Δ/3)n + (g²/Δ)(n − n²) away from the cutoff
        let chi = 0.05 * 0.05 / 1.0;
        for n in 0..5usize {
            let nf = n as f64;
            let expect = -(1.0 / 3.0) * nf + chi * (nf - nf * nf);
            assert!(
                (sys_s.h_eff.matrix()[(n, n)].re - expect).abs() < 1e-12,
                "kerr diagonal at n={n}"
            );
        }
        assert_eq!(sys_s.dissipators.len(), 1);

        // Dicke, vacuum field: the surviving channel is exactly (γ/2)ε² L[S−]
        let (model_d, alg_d) = crate::models::dicke(5.0, 6.0, 0.05, 0.01, 2, 6).unwrap();
        let sys_d = derive_effective_system(
            &model_d,
            &alg_d,
            &DeriveOptions {
                apply_rwa: true,
                vacuum_reduce: Some(0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(sys_d.dissipators.len(), 1);
        let (rate_d, op_d, order_d) = &sys_d.dissipators[0];
        assert!((rate_d - 0.01 / 2.0 * 0.05 * 0.05).abs() < 1e-18);
        assert_eq!(*order_d, 2);
        let (_, sm_red, _) = spin_ops(sys_d.h_eff.space(), 0).unwrap();
        assert!((op_d - &sm_red).norm() < 1e-13, "op is S−");
        assert!(sys_d.cross_terms.is_empty());
    }

    fn fit_slope(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    }

    #[test]
    fn dicke_state_transform_creates_order_eps_coherences() {
        let sp = tensor(vec![mode_space(5).unwrap(), spin_space(2).unwrap()]).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let (spl, _, s3) = spin_ops(&sp, 1).unwrap();
        let xp = &a * &spl;
        let alg = DeformedAlgebra {
            xp: xp.clone(),
            xm: xp.adjoint(),
            x3: s3.clone(),
            n_op: &(&number(&sp, 0).unwrap() + &s3) + &Operator::identity(&sp),
            tol: 1e-12,
            blocks: Vec::new(),
        };
        let eps = 0.05;
        let u = small_rotation(&alg, eps).unwrap();
        let rho = product_state(&sp, &[FactorState::Fock(0), FactorState::SpinLevel(1.0)]).unwrap();
        let out = transform_state(&u, &rho).unwrap();
        // field-atom coherence appears at O(ε)
        let coh: f64 = (0..sp.total_dim())
            .flat_map(|i| (0..sp.total_dim()).map(move |j| (i, j)))
            .filter(|(i, j)| {
                let (mi, mj) = (sp.multi_index(*i), sp.multi_index(*j));
                mi[0] != mj[0]
            })
            .map(|(i, j)| out.rho[(i, j)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(coh > 0.5 * eps && coh < 5.0 * eps, "coherence {coh:.3e}");
    }
}

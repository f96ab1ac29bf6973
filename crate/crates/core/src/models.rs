//! Preset constructors for the three reference models, each yielding the
//! microscopic system (H0, H_int, collapse operators, integral of motion)
//! together with its deformed-su(2) triple and a dispersive-limit guard.

use std::sync::Arc;

use crate::algebra::{annihilation, commutator, number, spin_ops, Operator};
use crate::deformed_su2::{extract_polynomial, verify_algebra, DeformedAlgebra};
use crate::error::{Error, Result};
use crate::hilbert::{mode_space, spin_space, tensor_labelled, CompositeSpace};
use crate::lindblad::DensityState;

/// Relative tolerance for the model invariants ([H0, Hint], [N, Hint],
/// eigenoperator residuals).
pub const MODEL_TOL: f64 = 1e-10;

/// Default polynomial degree for structure-polynomial extraction.
pub const DEFAULT_MAX_DEGREE: usize = 3;

/// Dispersive-limit validity guard; `ratio` must be small against 1.
#[derive(Debug, Clone)]
pub enum DispersiveGuard {
    /// g·√((n̄_a+1)(n̄_b+1)) / |Δ|
    CoupledOscillators { g: f64, delta: f64 },
    /// g·(n̄_a+1)·√(n̄_b+1) / |Δ|
    SecondHarmonic { g: f64, delta: f64 },
    /// A·g·√(n̄+1) / |Δ|
    Dicke { atoms: usize, g: f64, delta: f64 },
}

impl DispersiveGuard {
    /// Guard ratio evaluated on a state; average occupations come from the
    /// state, never from assumptions.
    pub fn ratio(&self, state: &DensityState) -> Result<f64> {
        let space = &state.space;
        let nbar = |label: &str| -> Result<f64> {
            let k = space.factor_index(label)?;
            let n = number(space, k)?;
            Ok(state.expectation(&n).re)
        };
        Ok(match self {
            DispersiveGuard::CoupledOscillators { g, delta } => {
                let (na, nb) = (nbar("a")?, nbar("b")?);
                g.abs() * ((na + 1.0) * (nb + 1.0)).sqrt() / delta.abs()
            }
            DispersiveGuard::SecondHarmonic { g, delta } => {
                let (na, nb) = (nbar("a")?, nbar("b")?);
                g.abs() * (na + 1.0) * (nb + 1.0).sqrt() / delta.abs()
            }
            DispersiveGuard::Dicke { atoms, g, delta } => {
                let n = nbar("field")?;
                *atoms as f64 * g.abs() * (n + 1.0).sqrt() / delta.abs()
            }
        })
    }

    pub fn description(&self) -> String {
        match self {
            DispersiveGuard::CoupledOscillators { .. } => {
                "g*sqrt((n_a+1)(n_b+1)) << |delta|".into()
            }
            DispersiveGuard::SecondHarmonic { .. } => "g*(n_a+1)*sqrt(n_b+1) << |delta|".into(),
            DispersiveGuard::Dicke { .. } => "A*g*sqrt(n+1) << |delta|".into(),
        }
    }
}

/// Microscopic model: free and interaction Hamiltonians, collapse
/// operators with rates, and the integral of motion labelling the
/// invariant blocks.
#[derive(Debug, Clone)]
pub struct ModelSystem {
    pub name: String,
    pub space: Arc<CompositeSpace>,
    pub h0: Operator,
    pub hint: Operator,
    /// (rate, collapse operator, label); rates carry their γ/2 factors.
    pub dissipators: Vec<(f64, Operator, String)>,
    pub n_op: Operator,
    pub delta: f64,
    pub g: f64,
    pub gamma: f64,
    pub guard: DispersiveGuard,
    /// Eigenoperator frequency ω_m of each collapse operator,
    /// [H0, C_m] = ω_m·C_m.
    pub eigen_freqs: Vec<f64>,
}

impl ModelSystem {
    /// Named observables for trajectory outputs: photon numbers per mode,
    /// S3 per spin factor.
    pub fn observables(&self) -> Result<Vec<(String, Operator)>> {
        let mut out = Vec::new();
        for (k, f) in self.space.factors().iter().enumerate() {
            let label = self.space.label(k);
            if f.is_mode() {
                out.push((format!("n_{label}"), number(&self.space, k)?));
            } else {
                let (_, _, s3) = spin_ops(&self.space, k)?;
                out.push((format!("s3_{label}"), s3));
            }
        }
        Ok(out)
    }
}

fn validate_model(model: &mut ModelSystem) -> Result<()> {
    let hint_norm = model.hint.norm().max(f64::MIN_POSITIVE);
    let r1 = commutator(&model.h0, &model.hint)?.norm() / hint_norm;
    if r1 > MODEL_TOL {
        return Err(Error::DoesNotCommute { residual: r1 });
    }
    let r2 = commutator(&model.n_op, &model.hint)?.norm() / hint_norm;
    if r2 > MODEL_TOL {
        return Err(Error::DoesNotCommute { residual: r2 });
    }
    // each collapse operator is an eigenoperator of H0: [H0, C] = ω C,
    // with ω fitted, not assumed
    model.eigen_freqs.clear();
    for (_, c, label) in &model.dissipators {
        let r = commutator(&model.h0, c)?;
        let c_norm2 = c.norm() * c.norm();
        let omega_c = c
            .matrix()
            .iter()
            .zip(r.matrix().iter())
            .map(|(x, y)| x.conj() * y)
            .sum::<crate::algebra::C64>()
            / crate::algebra::c64(c_norm2, 0.0);
        if omega_c.im.abs() > MODEL_TOL * model.h0.norm().max(1.0) {
            return Err(Error::InvalidState(format!(
                "collapse operator {label}: complex eigenoperator frequency"
            )));
        }
        let omega = omega_c.re;
        let resid = (&r - &c.scale_re(omega)).norm()
            / (model.h0.norm().max(1.0) * c.norm().max(f64::MIN_POSITIVE));
        if resid > MODEL_TOL {
            return Err(Error::InvalidState(format!(
                "collapse operator {label} is not an eigenoperator of H0 (residual {resid:.3e})"
            )));
        }
        model.eigen_freqs.push(omega);
    }
    Ok(())
}

fn build_algebra(
    xp: Operator,
    x3: Operator,
    n_op: Operator,
    max_degree: usize,
) -> Result<DeformedAlgebra> {
    let alg = DeformedAlgebra {
        xm: xp.adjoint(),
        xp,
        x3,
        n_op,
        tol: 1e-12,
        blocks: Vec::new(),
    };
    let (ok, residuals) = verify_algebra(&alg.xp, &alg.xm, &alg.x3, &alg.n_op, alg.tol)?;
    if !ok {
        return Err(Error::ExtractionFailed {
            n_value: f64::NAN,
            residual: residuals.max(),
            tol: alg.tol,
        });
    }
    extract_polynomial(alg, max_degree)
}

/// Two linearly coupled modes: H_int = (Δ/2)(b†b − a†a) + g(a†b + b†a),
/// Δ = ω_b − ω_a, lossy mode b at rate γ/2, N = a†a + b†b.
pub fn coupled_oscillators(
    omega_a: f64,
    omega_b: f64,
    g: f64,
    gamma: f64,
    cutoff_a: usize,
    cutoff_b: usize,
) -> Result<(ModelSystem, DeformedAlgebra)> {
    let delta = omega_b - omega_a;
    if delta == 0.0 {
        return Err(Error::DegenerateDetuning);
    }
    let space = tensor_labelled(
        vec![mode_space(cutoff_a)?, mode_space(cutoff_b)?],
        vec!["a".into(), "b".into()],
    )?;
    let a = annihilation(&space, 0)?;
    let b = annihilation(&space, 1)?;
    let na = number(&space, 0)?;
    let nb = number(&space, 1)?;
    let n_op = &na + &nb;
    let h0 = n_op.scale_re(0.5 * (omega_a + omega_b));
    let hop = &(&a.adjoint() * &b) + &(&b.adjoint() * &a);
    let hint = &(&nb - &na).scale_re(0.5 * delta) + &hop.scale_re(g);
    let xp = &b.adjoint() * &a;
    let x3 = (&nb - &na).scale_re(0.5);

    let mut model = ModelSystem {
        name: "coupled_oscillators".into(),
        space,
        h0,
        hint,
        dissipators: vec![(gamma / 2.0, b, "b".into())],
        n_op: n_op.clone(),
        delta,
        g,
        gamma,
        guard: DispersiveGuard::CoupledOscillators { g, delta },
        eigen_freqs: Vec::new(),
    };
    validate_model(&mut model)?;
    let alg = build_algebra(xp, x3, n_op, DEFAULT_MAX_DEGREE)?;
    Ok((model, alg))
}

/// Second-harmonic generation: H_int = (Δ/3)(b†b − a†a) + g(a²b† + a†²b),
/// Δ = ω_b − 2ω_a, lossy harmonic mode b, N = a†a + 2b†b.
pub fn second_harmonic(
    omega_a: f64,
    omega_b: f64,
    g: f64,
    gamma: f64,
    cutoff_a: usize,
    cutoff_b: usize,
) -> Result<(ModelSystem, DeformedAlgebra)> {
    let delta = omega_b - 2.0 * omega_a;
    if delta == 0.0 {
        return Err(Error::DegenerateDetuning);
    }
    if cutoff_a < 3 {
        return Err(Error::InvalidDimension {
            what: "fundamental-mode cutoff",
            got: cutoff_a,
            min: 3,
        });
    }
    let space = tensor_labelled(
        vec![mode_space(cutoff_a)?, mode_space(cutoff_b)?],
        vec!["a".into(), "b".into()],
    )?;
    let a = annihilation(&space, 0)?;
    let b = annihilation(&space, 1)?;
    let na = number(&space, 0)?;
    let nb = number(&space, 1)?;
    let n_op = &na + &nb.scale_re(2.0);
    let h0 = n_op.scale_re((omega_b + omega_a) / 3.0);
    let a2 = &a * &a;
    let pump = &(&a2 * &b.adjoint()) + &(&a2.adjoint() * &b);
    let hint = &(&nb - &na).scale_re(delta / 3.0) + &pump.scale_re(g);
    let xp = &b.adjoint() * &a2;
    let x3 = (&nb - &na).scale_re(1.0 / 3.0);

    let mut model = ModelSystem {
        name: "second_harmonic".into(),
        space,
        h0,
        hint,
        dissipators: vec![(gamma / 2.0, b, "b".into())],
        n_op: n_op.clone(),
        delta,
        g,
        gamma,
        guard: DispersiveGuard::SecondHarmonic { g, delta },
        eigen_freqs: Vec::new(),
    };
    validate_model(&mut model)?;
    let alg = build_algebra(xp, x3, n_op, DEFAULT_MAX_DEGREE)?;
    Ok((model, alg))
}

/// Dicke model: H_int = Δ·S3 + g(aS+ + a†S−), Δ = ω_0 − ω_f, cavity decay
/// at rate γ/2, block label N = a†a + S3 + A/2 (shifted nonnegative).
pub fn dicke(
    omega_f: f64,
    omega_0: f64,
    g: f64,
    gamma: f64,
    atoms: usize,
    cutoff: usize,
) -> Result<(ModelSystem, DeformedAlgebra)> {
    let delta = omega_0 - omega_f;
    if delta == 0.0 {
        return Err(Error::DegenerateDetuning);
    }
    let space = tensor_labelled(
        vec![mode_space(cutoff)?, spin_space(atoms)?],
        vec!["field".into(), "spin".into()],
    )?;
    let a = annihilation(&space, 0)?;
    let nf = number(&space, 0)?;
    let (sp, sm, s3) = spin_ops(&space, 1)?;
    let excitation = &nf + &s3;
    let h0 = excitation.scale_re(omega_f);
    let coupling = &(&a * &sp) + &(&a.adjoint() * &sm);
    let hint = &s3.scale_re(delta) + &coupling.scale_re(g);
    let xp = &a * &sp;
    // shifted to a nonnegative spectrum for block labelling
    let n_op = &excitation + &Operator::identity(&space).scale_re(atoms as f64 / 2.0);

    let mut model = ModelSystem {
        name: "dicke".into(),
        space,
        h0,
        hint,
        dissipators: vec![(gamma / 2.0, a, "a".into())],
        n_op: n_op.clone(),
        delta,
        g,
        gamma,
        guard: DispersiveGuard::Dicke { atoms, g, delta },
        eigen_freqs: Vec::new(),
    };
    validate_model(&mut model)?;
    let alg = build_algebra(xp, s3, n_op, DEFAULT_MAX_DEGREE)?;
    Ok((model, alg))
}

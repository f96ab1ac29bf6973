//! Master-equation right-hand side, fixed-step time integration of density
//! matrices, the full Liouvillian superoperator, and state-comparison
//! metrics.
//!
//! The dissipator convention is exactly `L[C]ρ = 2CρC† − {C†C, ρ}`; the
//! preset rates carry their γ/2 factors explicitly so no hidden factor of
//! two enters the superoperator.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::algebra::{c64, C64, Operator};
use crate::error::{Error, Result};
use crate::hilbert::{CompositeSpace, Factor};
use crate::superop::SuperOpSum;

/// Trace tolerance for a valid density state.
pub const TRACE_TOL: f64 = 1e-9;
/// Relative Hermiticity tolerance for a valid density state.
pub const HERMITICITY_TOL: f64 = 1e-10;
/// Most negative admissible eigenvalue.
pub const POSITIVITY_TOL: f64 = -1e-8;
/// Default bound on the population of the top two Fock levels of any mode.
pub const SUPPORT_TOL: f64 = 1e-6;

/// Density matrix tied to its space, with trace/Hermiticity/positivity
/// validated at construction.
#[derive(Debug, Clone)]
pub struct DensityState {
    pub space: Arc<CompositeSpace>,
    pub rho: DMatrix<C64>,
    pub time: f64,
}

impl DensityState {
    pub fn new(space: Arc<CompositeSpace>, rho: DMatrix<C64>, time: f64) -> Result<Self> {
        let d = space.total_dim();
        if rho.nrows() != d || rho.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: rho.nrows().max(rho.ncols()),
            });
        }
        let state = DensityState { space, rho, time };
        state.validate()?;
        Ok(state)
    }

    fn validate(&self) -> Result<()> {
        let tr = self.rho.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!(
                "trace = {:.12}{:+.3e}i, expected 1",
                tr.re, tr.im
            )));
        }
        let herm = (&self.rho - self.rho.adjoint()).norm();
        let scale = self.rho.norm().max(f64::MIN_POSITIVE);
        if herm / scale > HERMITICITY_TOL {
            return Err(Error::InvalidState(format!(
                "Hermiticity residual {:.3e}",
                herm / scale
            )));
        }
        let min_eig = self.min_eigenvalue();
        if min_eig < POSITIVITY_TOL {
            return Err(Error::InvalidState(format!(
                "negative eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn trace_real(&self) -> f64 {
        self.rho.trace().re
    }

    pub fn purity(&self) -> f64 {
        (&self.rho * &self.rho).trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (&self.rho + self.rho.adjoint()) * c64(0.5, 0.0);
        let eig = nalgebra::SymmetricEigen::new(herm);
        eig.eigenvalues.iter().fold(f64::INFINITY, |m, &x| m.min(x))
    }

    /// Population in the top two Fock levels, per mode factor.
    pub fn mode_tail_populations(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, f) in self.space.factors().iter().enumerate() {
            if let Factor::Mode { cutoff } = f {
                let mut pop = 0.0;
                for i in 0..self.dim() {
                    let level = self.space.multi_index(i)[k];
                    if level + 2 >= *cutoff {
                        pop += self.rho[(i, i)].re;
                    }
                }
                out.push((self.space.label(k).to_string(), pop));
            }
        }
        out
    }

    /// Largest top-two-level population over all modes (0 when there are
    /// no mode factors).
    pub fn support_ratio(&self) -> f64 {
        self.mode_tail_populations()
            .iter()
            .fold(0.0f64, |m, (_, p)| m.max(*p))
    }

    pub fn expectation(&self, op: &Operator) -> C64 {
        op.expectation(&self.rho)
    }
}

/// Per-factor pure-state specification for building product states.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorState {
    /// Fock state |n⟩ on a mode factor.
    Fock(usize),
    /// Coherent state, truncated to the cutoff and renormalized.
    Coherent(C64),
    /// S3 eigenstate with eigenvalue m on a spin factor.
    SpinLevel(f64),
    /// Spin coherent state; θ = 0 is the m = −j ground state.
    SpinCoherent { theta: f64, phi: f64 },
}

fn factor_ket(factor: &Factor, spec: &FactorState) -> Result<DVector<C64>> {
    match (factor, spec) {
        (Factor::Mode { cutoff }, FactorState::Fock(n)) => {
            if *n >= *cutoff {
                return Err(Error::InvalidState(format!(
                    "fock level {n} at cutoff {cutoff}"
                )));
            }
            let mut v = DVector::zeros(*cutoff);
            v[*n] = c64(1.0, 0.0);
            Ok(v)
        }
        (Factor::Mode { cutoff }, FactorState::Coherent(alpha)) => {
            let mut v = DVector::zeros(*cutoff);
            let mut amp = c64((-alpha.norm_sqr() / 2.0).exp(), 0.0);
            v[0] = amp;
            for n in 1..*cutoff {
                amp *= alpha / c64((n as f64).sqrt(), 0.0);
                v[n] = amp;
            }
            let norm = v.norm();
            if norm == 0.0 {
                return Err(Error::InvalidState("coherent state truncated to zero".into()));
            }
            Ok(v / c64(norm, 0.0))
        }
        (Factor::Spin { atoms }, FactorState::SpinLevel(m)) => {
            let j = *atoms as f64 / 2.0;
            let idx = m + j;
            let rounded = idx.round();
            if (idx - rounded).abs() > 1e-9 || rounded < 0.0 || rounded > *atoms as f64 {
                return Err(Error::InvalidState(format!("spin level m={m} for A={atoms}")));
            }
            let mut v = DVector::zeros(atoms + 1);
            v[rounded as usize] = c64(1.0, 0.0);
            Ok(v)
        }
        (Factor::Spin { atoms }, FactorState::SpinCoherent { theta, phi }) => {
            let a = *atoms;
            let mut v = DVector::zeros(a + 1);
            let (cos_h, sin_h) = ((theta / 2.0).cos(), (theta / 2.0).sin());
            for k in 0..=a {
                let mut binom = 1.0f64;
                for i in 0..k {
                    binom *= (a - i) as f64 / (i + 1) as f64;
                }
                let mag = binom.sqrt() * cos_h.powi((a - k) as i32) * sin_h.powi(k as i32);
                let phase = c64(0.0, k as f64 * phi).exp();
                v[k] = phase * c64(mag, 0.0);
            }
            let norm = v.norm();
            Ok(v / c64(norm, 0.0))
        }
        (Factor::Mode { .. }, _) => Err(Error::WrongFactorKind {
            index: 0,
            expected: "mode state (fock/coherent)",
        }),
        (Factor::Spin { .. }, _) => Err(Error::WrongFactorKind {
            index: 0,
            expected: "spin state (level/coherent)",
        }),
    }
}

/// Pure product state from per-factor specifications.
pub fn product_state(space: &Arc<CompositeSpace>, specs: &[FactorState]) -> Result<DensityState> {
    if specs.len() != space.num_factors() {
        return Err(Error::DimensionMismatch {
            expected: space.num_factors(),
            got: specs.len(),
        });
    }
    let mut psi = DVector::from_element(1, c64(1.0, 0.0));
    for (f, s) in space.factors().iter().zip(specs) {
        let ket = factor_ket(f, s)?;
        psi = psi.kronecker(&ket);
    }
    let rho = &psi * psi.adjoint();
    DensityState::new(space.clone(), rho, 0.0)
}

/// Non-Lindblad Hermitian cross pair
/// `coeff·(2·left ρ right† + 2·right ρ left† − {left†right + right†left, ρ})`.
#[derive(Debug, Clone)]
pub struct CrossTerm {
    pub coeff: f64,
    pub left: Operator,
    pub right: Operator,
}

/// Interaction-picture master equation: Hermitian H plus Lindblad
/// dissipators (rate, C) and optional cross pairs.
#[derive(Debug, Clone)]
pub struct MasterEquation {
    pub h: Operator,
    pub dissipators: Vec<(f64, Operator)>,
    pub cross_terms: Vec<CrossTerm>,
}

impl MasterEquation {
    pub fn new(
        h: Operator,
        dissipators: Vec<(f64, Operator)>,
        cross_terms: Vec<CrossTerm>,
    ) -> Result<Self> {
        if h.hermiticity_residual() > 1e-10 {
            return Err(Error::InvalidState(format!(
                "master-equation H not Hermitian: residual {:.3e}",
                h.hermiticity_residual()
            )));
        }
        for (rate, c) in &dissipators {
            if *rate < 0.0 {
                return Err(Error::InvalidState(format!("negative rate {rate}")));
            }
            if c.space() != h.space() {
                return Err(Error::SpaceMismatch);
            }
        }
        for ct in &cross_terms {
            if ct.left.space() != h.space() || ct.right.space() != h.space() {
                return Err(Error::SpaceMismatch);
            }
        }
        Ok(MasterEquation {
            h,
            dissipators,
            cross_terms,
        })
    }

    pub fn space(&self) -> &Arc<CompositeSpace> {
        self.h.space()
    }

    fn superop_sum(&self) -> SuperOpSum {
        let d = self.h.dim();
        let mut s = SuperOpSum::new(d);
        s.push_hamiltonian(&self.h);
        for (rate, c) in &self.dissipators {
            s.push_lindblad(*rate, c);
        }
        for ct in &self.cross_terms {
            s.push_cross(ct.coeff, &ct.left, &ct.right);
        }
        s
    }
}

// Sparse matrix in coordinate form; quantum-optics generators are a few
// entries per row, so products against dense matrices cost O(nnz·d).
struct SparseMat {
    entries: Vec<(usize, usize, C64)>,
}

impl SparseMat {
    fn from_dense(m: &DMatrix<C64>) -> Self {
        let mut entries = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let z = m[(i, j)];
                if z.norm_sqr() > 0.0 {
                    entries.push((i, j, z));
                }
            }
        }
        SparseMat { entries }
    }
}

enum Applier {
    Dense(DMatrix<C64>),
    Sparse(SparseMat),
}

impl Applier {
    fn from_matrix(m: &DMatrix<C64>) -> Self {
        let sp = SparseMat::from_dense(m);
        if sp.entries.len() * 8 <= m.nrows() * m.ncols() {
            Applier::Sparse(sp)
        } else {
            Applier::Dense(m.clone())
        }
    }

    /// out += scale · S · x
    fn left_mul_acc(&self, x: &DMatrix<C64>, out: &mut DMatrix<C64>, scale: C64) {
        match self {
            Applier::Dense(m) => {
                out.gemm(scale, m, x, c64(1.0, 0.0));
            }
            Applier::Sparse(sp) => {
                let d = x.nrows();
                let xs = x.as_slice();
                let os = out.as_mut_slice();
                for j in 0..d {
                    let base = j * d;
                    for &(r, c, v) in &sp.entries {
                        os[base + r] += scale * v * xs[base + c];
                    }
                }
            }
        }
    }

    /// out += scale · x · S
    fn right_mul_acc(&self, x: &DMatrix<C64>, out: &mut DMatrix<C64>, scale: C64) {
        match self {
            Applier::Dense(m) => {
                out.gemm(scale, x, m, c64(1.0, 0.0));
            }
            Applier::Sparse(sp) => {
                let d = x.nrows();
                let xs = x.as_slice();
                let os = out.as_mut_slice();
                for &(r, c, v) in &sp.entries {
                    let sv = scale * v;
                    let (xb, ob) = (r * d, c * d);
                    for i in 0..d {
                        os[ob + i] += sv * xs[xb + i];
                    }
                }
            }
        }
    }
}

struct CompiledDissipator {
    rate: f64,
    c: Applier,
    c_dag: Applier,
    /// C†C
    gram: Applier,
}

struct CompiledCross {
    coeff: f64,
    left: Applier,
    left_dag: Applier,
    right: Applier,
    right_dag: Applier,
    /// left†·right + right†·left
    gram: Applier,
}

/// Precompiled right-hand side of a master equation.
pub struct CompiledMe {
    h: Applier,
    dissipators: Vec<CompiledDissipator>,
    cross: Vec<CompiledCross>,
}

impl CompiledMe {
    pub fn new(me: &MasterEquation) -> Self {
        let dissipators = me
            .dissipators
            .iter()
            .map(|(rate, c)| {
                let cd = c.matrix().adjoint();
                let gram = &cd * c.matrix();
                CompiledDissipator {
                    rate: *rate,
                    c: Applier::from_matrix(c.matrix()),
                    c_dag: Applier::from_matrix(&cd),
                    gram: Applier::from_matrix(&gram),
                }
            })
            .collect();
        let cross = me
            .cross_terms
            .iter()
            .map(|ct| {
                let ld = ct.left.matrix().adjoint();
                let rd = ct.right.matrix().adjoint();
                let gram = &ld * ct.right.matrix() + &rd * ct.left.matrix();
                CompiledCross {
                    coeff: ct.coeff,
                    left: Applier::from_matrix(ct.left.matrix()),
                    left_dag: Applier::from_matrix(&ld),
                    right: Applier::from_matrix(ct.right.matrix()),
                    right_dag: Applier::from_matrix(&rd),
                    gram: Applier::from_matrix(&gram),
                }
            })
            .collect();
        CompiledMe {
            h: Applier::from_matrix(me.h.matrix()),
            dissipators,
            cross,
        }
    }

    /// dρ/dt into `out`; `scratch` must match ρ in size.
    pub fn rhs_into(&self, rho: &DMatrix<C64>, out: &mut DMatrix<C64>, scratch: &mut DMatrix<C64>) {
        out.fill(c64(0.0, 0.0));
        let one = c64(1.0, 0.0);
        // −i[H, ρ]
        self.h.left_mul_acc(rho, out, c64(0.0, -1.0));
        self.h.right_mul_acc(rho, out, c64(0.0, 1.0));
        for dd in &self.dissipators {
            let r = c64(dd.rate, 0.0);
            // 2 C ρ C†
            scratch.fill(c64(0.0, 0.0));
            dd.c.left_mul_acc(rho, scratch, one);
            dd.c_dag.right_mul_acc(scratch, out, r * 2.0);
            // −{C†C, ρ}
            dd.gram.left_mul_acc(rho, out, -r);
            dd.gram.right_mul_acc(rho, out, -r);
        }
        for ct in &self.cross {
            let cc = c64(ct.coeff, 0.0);
            // 2 L ρ R†
            scratch.fill(c64(0.0, 0.0));
            ct.left.left_mul_acc(rho, scratch, one);
            ct.right_dag.right_mul_acc(scratch, out, cc * 2.0);
            // 2 R ρ L†
            scratch.fill(c64(0.0, 0.0));
            ct.right.left_mul_acc(rho, scratch, one);
            ct.left_dag.right_mul_acc(scratch, out, cc * 2.0);
            // −{L†R + R†L, ρ}
            ct.gram.left_mul_acc(rho, out, -cc);
            ct.gram.right_mul_acc(rho, out, -cc);
        }
    }
}

/// Right-hand side `−i[H,ρ] + Σ rate·(2CρC† − {C†C,ρ}) + cross terms`.
pub fn lindblad_rhs(me: &MasterEquation, rho: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    if rho.nrows() != me.h.dim() || rho.ncols() != me.h.dim() {
        return Err(Error::DimensionMismatch {
            expected: me.h.dim(),
            got: rho.nrows().max(rho.ncols()),
        });
    }
    let compiled = CompiledMe::new(me);
    let mut out = DMatrix::zeros(me.h.dim(), me.h.dim());
    let mut scratch = DMatrix::zeros(me.h.dim(), me.h.dim());
    compiled.rhs_into(rho, &mut out, &mut scratch);
    Ok(out)
}

fn axpy_mat(y: &mut DMatrix<C64>, alpha: C64, x: &DMatrix<C64>) {
    for (yi, xi) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *yi += alpha * xi;
    }
}

/// Per-sample integrator diagnostics.
#[derive(Debug, Clone)]
pub struct SampleDiag {
    pub time: f64,
    pub trace: f64,
    pub herm_residual: f64,
    pub min_eig: f64,
    pub purity: f64,
    pub support_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityState>,
    pub diagnostics: Vec<SampleDiag>,
    pub warnings: Vec<String>,
    pub dt_effective: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &DensityState {
        self.states.last().expect("trajectory has at least one sample")
    }
}

#[derive(Debug, Clone)]
pub struct IntegrateOptions {
    /// Number of recorded samples (in addition to the initial state).
    pub samples: usize,
    /// Mode-tail population threshold that triggers a warning.
    pub support_tol: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            samples: 200,
            support_tol: SUPPORT_TOL,
        }
    }
}

/// Classical fixed-step 4th-order integration.
///
/// The step is shrunk to land exactly on `t_final`; trace, Hermiticity and
/// positivity are asserted at every sample and violation aborts with
/// diagnostics — states are never renormalized. The stability guard
/// `dt·(‖H‖ + Σ rate·‖C‖²) ≤ 0.1` (spectral norms) refuses oversized steps
/// with a suggested dt.
pub fn integrate(
    me: &MasterEquation,
    rho0: &DensityState,
    t_final: f64,
    dt: f64,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    if dt.is_nan() || dt <= 0.0 || !t_final.is_finite() || t_final < 0.0 {
        return Err(Error::Config(format!("bad integration window: t_final={t_final}, dt={dt}")));
    }
    if rho0.space != *me.space() {
        return Err(Error::SpaceMismatch);
    }
    let mut stiffness = me.h.spectral_norm();
    for (rate, c) in &me.dissipators {
        let s = c.spectral_norm();
        stiffness += rate * s * s;
    }
    for ct in &me.cross_terms {
        stiffness += ct.coeff.abs() * 2.0 * ct.left.spectral_norm() * ct.right.spectral_norm();
    }
    if dt * stiffness > 0.1 {
        return Err(Error::StabilityGuard {
            dt,
            suggested: 0.1 / stiffness.max(f64::MIN_POSITIVE),
        });
    }

    let n_steps = ((t_final / dt) - 1e-9).ceil().max(1.0) as usize;
    let dt_eff = t_final / n_steps as f64;
    let stride = (n_steps / opts.samples.max(1)).max(1);

    let compiled = CompiledMe::new(me);
    let d = rho0.dim();
    let mut rho = rho0.rho.clone();
    let mut k1 = DMatrix::zeros(d, d);
    let mut k2 = DMatrix::zeros(d, d);
    let mut k3 = DMatrix::zeros(d, d);
    let mut k4 = DMatrix::zeros(d, d);
    let mut stage = DMatrix::zeros(d, d);
    let mut scratch = DMatrix::zeros(d, d);

    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        diagnostics: Vec::new(),
        warnings: Vec::new(),
        dt_effective: dt_eff,
    };
    let t0 = rho0.time;
    let mut support_warned = false;
    record_sample(
        &rho0.space,
        &rho,
        t0,
        0.0,
        opts,
        &mut traj,
        &mut support_warned,
    )?;

    let half = c64(dt_eff / 2.0, 0.0);
    let full = c64(dt_eff, 0.0);
    let sixth = c64(dt_eff / 6.0, 0.0);
    for step in 1..=n_steps {
        compiled.rhs_into(&rho, &mut k1, &mut scratch);
        stage.copy_from(&rho);
        axpy_mat(&mut stage, half, &k1);
        compiled.rhs_into(&stage, &mut k2, &mut scratch);
        stage.copy_from(&rho);
        axpy_mat(&mut stage, half, &k2);
        compiled.rhs_into(&stage, &mut k3, &mut scratch);
        stage.copy_from(&rho);
        axpy_mat(&mut stage, full, &k3);
        compiled.rhs_into(&stage, &mut k4, &mut scratch);

        axpy_mat(&mut rho, sixth, &k1);
        axpy_mat(&mut rho, sixth * 2.0, &k2);
        axpy_mat(&mut rho, sixth * 2.0, &k3);
        axpy_mat(&mut rho, sixth, &k4);

        if step % stride == 0 || step == n_steps {
            let elapsed = step as f64 * dt_eff;
            record_sample(
                &rho0.space,
                &rho,
                t0 + elapsed,
                elapsed,
                opts,
                &mut traj,
                &mut support_warned,
            )?;
        }
    }
    Ok(traj)
}

#[allow(clippy::too_many_arguments)]
fn record_sample(
    space: &Arc<CompositeSpace>,
    rho: &DMatrix<C64>,
    time: f64,
    elapsed: f64,
    opts: &IntegrateOptions,
    traj: &mut Trajectory,
    support_warned: &mut bool,
) -> Result<()> {
    let tr = rho.trace();
    let trace_budget = TRACE_TOL * (1.0 + elapsed);
    if (tr.re - 1.0).abs() > trace_budget || tr.im.abs() > trace_budget {
        return Err(Error::InvariantViolation {
            what: "trace",
            time,
            residual: (tr.re - 1.0).abs().max(tr.im.abs()),
        });
    }
    let scale = rho.norm().max(f64::MIN_POSITIVE);
    let herm = (rho - rho.adjoint()).norm() / scale;
    if herm > HERMITICITY_TOL {
        return Err(Error::InvariantViolation {
            what: "hermiticity",
            time,
            residual: herm,
        });
    }
    let herm_part = (rho + rho.adjoint()) * c64(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::new(herm_part);
    let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &x| m.min(x));
    if min_eig < POSITIVITY_TOL {
        return Err(Error::InvariantViolation {
            what: "positivity",
            time,
            residual: min_eig,
        });
    }
    let state = DensityState {
        space: space.clone(),
        rho: rho.clone(),
        time,
    };
    let support_ratio = state.support_ratio();
    if support_ratio > opts.support_tol && !*support_warned {
        traj.warnings.push(format!(
            "support guard: top-two Fock population {support_ratio:.3e} exceeds {:.1e} at t = {time:.6}",
            opts.support_tol
        ));
        *support_warned = true;
    }
    let purity = state.purity();
    traj.diagnostics.push(SampleDiag {
        time,
        trace: tr.re,
        herm_residual: herm,
        min_eig,
        purity,
        support_ratio,
    });
    traj.times.push(time);
    traj.states.push(state);
    Ok(())
}

/// Matrix L with vec(dρ/dt) = L·vec(ρ), column-major vectorization.
/// Guarded to d² ≤ 10⁴.
pub fn liouvillian_matrix(me: &MasterEquation) -> Result<DMatrix<C64>> {
    let d = me.h.dim();
    if d * d > 10_000 {
        return Err(Error::SuperopGuard(d * d));
    }
    Ok(me.superop_sum().to_matrix())
}

/// Half the sum of singular values of ρ₁ − ρ₂.
pub fn trace_distance(r1: &DensityState, r2: &DensityState) -> Result<f64> {
    if r1.space != r2.space {
        return Err(Error::SpaceMismatch);
    }
    trace_distance_matrices(&r1.rho, &r2.rho)
}

pub fn trace_distance_matrices(a: &DMatrix<C64>, b: &DMatrix<C64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    let diff = a - b;
    let svd = diff.svd(false, false);
    Ok(0.5 * svd.singular_values.iter().sum::<f64>())
}

/// Trace over every factor except `keep`; the result lives on the
/// single-factor space of `keep`.
pub fn partial_trace(state: &DensityState, keep: usize) -> Result<DensityState> {
    let space = &state.space;
    if keep >= space.num_factors() {
        return Err(Error::UnknownFactor(format!("index {keep}")));
    }
    if space.num_factors() == 1 {
        return Ok(state.clone());
    }
    let d = state.dim();
    let dk = space.factor(keep).dim();
    // index of the kept factor and a flat index over the traced-out rest
    let mut keep_idx = vec![0usize; d];
    let mut rest_idx = vec![0usize; d];
    for flat in 0..d {
        let mut multi = space.multi_index(flat);
        keep_idx[flat] = multi[keep];
        multi.remove(keep);
        let mut rest = 0usize;
        for (k, f) in space
            .factors()
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != keep)
        {
            let pos = if k < keep { k } else { k - 1 };
            rest = rest * f.dim() + multi[pos];
        }
        rest_idx[flat] = rest;
    }
    let mut out = DMatrix::<C64>::zeros(dk, dk);
    for i in 0..d {
        for j in 0..d {
            if rest_idx[i] == rest_idx[j] {
                out[(keep_idx[i], keep_idx[j])] += state.rho[(i, j)];
            }
        }
    }
    let factor = space.factor(keep).clone();
    let label = space.label(keep).to_string();
    let reduced = crate::hilbert::tensor_labelled(vec![factor], vec![label])?;
    DensityState::new(reduced, out, state.time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{annihilation, number, spin_ops, Operator};
    use crate::hilbert::{mode_space, spin_space, tensor};
    use approx::assert_relative_eq;

    fn single_mode(cutoff: usize) -> Arc<CompositeSpace> {
        tensor(vec![mode_space(cutoff).unwrap()]).unwrap()
    }

    fn fock_rho(space: &Arc<CompositeSpace>, n: usize) -> DensityState {
        product_state(space, &[FactorState::Fock(n)]).unwrap()
    }

    #[test]
    fn rhs_zero_without_terms() {
        let sp = single_mode(3);
        let me = MasterEquation::new(Operator::zeros(&sp), vec![], vec![]).unwrap();
        let rho = fock_rho(&sp, 1);
        let out = lindblad_rhs(&me, &rho.rho).unwrap();
        assert_relative_eq!(out.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rhs_single_mode_decay_hand_example() {
        // H = 0, C = a at rate γ/2, ρ = |1⟩⟨1|:
        // 2a|1⟩⟨1|a† − {a†a, |1⟩⟨1|} = 2|0⟩⟨0| − 2|1⟩⟨1|, so d⟨n⟩/dt = −γ.
        let gamma = 0.37;
        let sp = single_mode(4);
        let a = annihilation(&sp, 0).unwrap();
        let me = MasterEquation::new(Operator::zeros(&sp), vec![(gamma / 2.0, a)], vec![]).unwrap();
        let rho = fock_rho(&sp, 1);
        let out = lindblad_rhs(&me, &rho.rho).unwrap();
        assert_relative_eq!(out[(0, 0)].re, gamma, epsilon = 1e-13);
        assert_relative_eq!(out[(1, 1)].re, -gamma, epsilon = 1e-13);
        let n = number(&sp, 0).unwrap();
        let dn = (n.matrix() * &out).trace().re;
        assert_relative_eq!(dn, -gamma, epsilon = 1e-13);
    }

    #[test]
    fn rhs_annihilates_trace() {
        let sp = tensor(vec![mode_space(3).unwrap(), spin_space(1).unwrap()]).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let (sps, sms, s3) = spin_ops(&sp, 1).unwrap();
        let h = &(&a.adjoint() * &sms) + &(&a * &sps);
        let me = MasterEquation::new(
            &h + &s3,
            vec![(0.21, a.clone())],
            vec![CrossTerm {
                coeff: 0.05,
                left: a,
                right: sms,
            }],
        )
        .unwrap();
        let rho = product_state(&sp, &[FactorState::Fock(1), FactorState::SpinLevel(0.5)]).unwrap();
        let out = lindblad_rhs(&me, &rho.rho).unwrap();
        assert!(out.trace().norm() < 1e-12);
        // Hermiticity preserved
        assert!((&out - out.adjoint()).norm() < 1e-12);
    }

    #[test]
    fn integrate_preserves_diagonal_unitary_populations() {
        let sp = single_mode(4);
        let n = number(&sp, 0).unwrap();
        let me = MasterEquation::new(n, vec![], vec![]).unwrap();
        let rho0 = product_state(&sp, &[FactorState::Coherent(c64(0.4, 0.1))]).unwrap();
        let pops0: Vec<f64> = (0..4).map(|i| rho0.rho[(i, i)].re).collect();
        let traj = integrate(&me, &rho0, 10.0, 0.01, &IntegrateOptions::default()).unwrap();
        let last = traj.final_state();
        for (i, p0) in pops0.iter().enumerate() {
            assert_relative_eq!(last.rho[(i, i)].re, *p0, epsilon = 1e-10);
        }
    }

    #[test]
    fn integrate_matches_closed_form_decay() {
        // ⟨n(t)⟩ = n0 e^{−γt} for C = a at rate γ/2.
        let gamma = 0.8;
        let sp = single_mode(5);
        let a = annihilation(&sp, 0).unwrap();
        let me = MasterEquation::new(Operator::zeros(&sp), vec![(gamma / 2.0, a)], vec![]).unwrap();
        let rho0 = fock_rho(&sp, 2);
        let t_final = 1.0 / gamma;
        let traj = integrate(&me, &rho0, t_final, 0.002, &IntegrateOptions::default()).unwrap();
        let n = number(&sp, 0).unwrap();
        let got = traj.final_state().expectation(&n).re;
        let expect = 2.0 * (-gamma * t_final).exp();
        assert!(
            (got - expect).abs() / expect < 1e-6,
            "⟨n⟩ = {got}, closed form {expect}"
        );
    }

    #[test]
    fn integrator_self_convergence_is_fourth_order() {
        let gamma = 0.5;
        let sp = single_mode(4);
        let a = annihilation(&sp, 0).unwrap();
        let n = number(&sp, 0).unwrap();
        let me = MasterEquation::new(n, vec![(gamma / 2.0, a)], vec![]).unwrap();
        let rho0 = product_state(&sp, &[FactorState::Coherent(c64(0.8, 0.0))]).unwrap();
        let run = |dt: f64| {
            integrate(&me, &rho0, 2.0, dt, &IntegrateOptions::default())
                .unwrap()
                .final_state()
                .rho
                .clone()
        };
        let reference = run(0.0015625);
        let e1 = (run(0.025) - &reference).norm();
        let e2 = (run(0.0125) - &reference).norm();
        let order = (e1 / e2).log2();
        assert!(
            (3.7..=4.3).contains(&order),
            "observed order {order:.2} (errors {e1:.3e}, {e2:.3e})"
        );
    }

    #[test]
    fn stability_guard_refuses_and_suggests() {
        let sp = single_mode(6);
        let n = number(&sp, 0).unwrap();
        let me = MasterEquation::new(n.scale_re(50.0), vec![], vec![]).unwrap();
        match integrate(
            &me,
            &fock_rho(&sp, 0),
            1.0,
            0.1,
            &IntegrateOptions::default(),
        ) {
            Err(Error::StabilityGuard { suggested, .. }) => {
                assert!(suggested < 0.1 && suggested > 0.0);
            }
            other => panic!("expected stability refusal, got {other:?}"),
        }
    }

    #[test]
    fn liouvillian_matches_rhs_on_random_states() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let sp = tensor(vec![mode_space(3).unwrap(), spin_space(1).unwrap()]).unwrap();
        let a = annihilation(&sp, 0).unwrap();
        let (spp, smm, s3) = spin_ops(&sp, 1).unwrap();
        let h = &(&(&a.adjoint() * &smm) + &(&a * &spp)).scale_re(0.3) + &s3;
        let me = MasterEquation::new(
            h,
            vec![(0.11, a.clone()), (0.07, smm.clone())],
            vec![CrossTerm {
                coeff: 0.02,
                left: a,
                right: smm,
            }],
        )
        .unwrap();
        let l = liouvillian_matrix(&me).unwrap();
        let d = sp.total_dim();
        for _ in 0..20 {
            let raw = DMatrix::<C64>::from_fn(d, d, |_, _| {
                c64(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            });
            let herm = (&raw + raw.adjoint()) * c64(0.5, 0.0);
            let rhs = lindblad_rhs(&me, &herm).unwrap();
            let via_l = crate::superop::unvec_col_major(
                &(&l * crate::superop::vec_col_major(&herm)),
                d,
            );
            assert!((rhs - via_l).norm() < 1e-12 * herm.norm().max(1.0));
        }
    }

    #[test]
    fn liouvillian_4x4_action_on_excited_state() {
        let sp = single_mode(2);
        let a = annihilation(&sp, 0).unwrap();
        let me = MasterEquation::new(Operator::zeros(&sp), vec![(0.5, a)], vec![]).unwrap();
        let l = liouvillian_matrix(&me).unwrap();
        assert_eq!(l.nrows(), 4);
        let rho = fock_rho(&sp, 1);
        let rhs = lindblad_rhs(&me, &rho.rho).unwrap();
        let via_l =
            crate::superop::unvec_col_major(&(&l * crate::superop::vec_col_major(&rho.rho)), 2);
        assert!((rhs - via_l).norm() < 1e-14);
    }

    #[test]
    fn liouvillian_spectrum_is_contractive_with_stationary_state() {
        let sp = single_mode(3);
        let a = annihilation(&sp, 0).unwrap();
        let n = number(&sp, 0).unwrap();
        let me = MasterEquation::new(n, vec![(0.3, a)], vec![]).unwrap();
        let l = liouvillian_matrix(&me).unwrap();
        let eigs = l
            .clone()
            .eigenvalues()
            .expect("complex eigenvalues available");
        let max_re = eigs.iter().fold(f64::NEG_INFINITY, |m, z| m.max(z.re));
        assert!(max_re <= 1e-10, "max Re λ = {max_re:.3e}");
        let min_abs = eigs.iter().fold(f64::INFINITY, |m, z| m.min(z.norm()));
        assert!(min_abs < 1e-10, "no zero eigenvalue, min |λ| = {min_abs:.3e}");
    }

    #[test]
    fn liouvillian_dimension_guard_refuses() {
        let sp = single_mode(101);
        let me = MasterEquation::new(Operator::zeros(&sp), vec![], vec![]).unwrap();
        assert!(matches!(
            liouvillian_matrix(&me),
            Err(Error::SuperopGuard(_))
        ));
    }

    #[test]
    fn trace_distance_basics() {
        let sp = single_mode(3);
        let r0 = fock_rho(&sp, 0);
        let r1 = fock_rho(&sp, 1);
        assert_relative_eq!(trace_distance(&r0, &r0).unwrap(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(trace_distance(&r0, &r1).unwrap(), 1.0, epsilon = 1e-12);
        let mixed = DensityState::new(
            sp.clone(),
            (&r0.rho + &r1.rho) * c64(0.5, 0.0),
            0.0,
        )
        .unwrap();
        assert_relative_eq!(trace_distance(&r0, &mixed).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn partial_trace_of_product_state() {
        let sp = tensor(vec![mode_space(3).unwrap(), mode_space(4).unwrap()]).unwrap();
        let st = product_state(
            &sp,
            &[FactorState::Coherent(c64(0.3, 0.2)), FactorState::Fock(2)],
        )
        .unwrap();
        let ra = partial_trace(&st, 0).unwrap();
        let expect = product_state(&ra.space, &[FactorState::Coherent(c64(0.3, 0.2))]).unwrap();
        assert!((&ra.rho - &expect.rho).norm() < 1e-14);
    }

    #[test]
    fn partial_trace_of_bell_state_is_maximally_mixed() {
        let sp = tensor(vec![mode_space(2).unwrap(), mode_space(2).unwrap()]).unwrap();
        let mut psi = DVector::<C64>::zeros(4);
        psi[sp.flat_index(&[0, 0])] = c64(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        psi[sp.flat_index(&[1, 1])] = c64(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let rho = &psi * psi.adjoint();
        let st = DensityState::new(sp, rho, 0.0).unwrap();
        let red = partial_trace(&st, 0).unwrap();
        for i in 0..2 {
            assert_relative_eq!(red.rho[(i, i)].re, 0.5, epsilon = 1e-14);
        }
        assert!(red.rho[(0, 1)].norm() < 1e-14);
    }

    #[test]
    fn coherent_state_is_normalized_and_truncated() {
        let sp = single_mode(12);
        let st = product_state(&sp, &[FactorState::Coherent(c64(1.0, 0.0))]).unwrap();
        assert_relative_eq!(st.trace_real(), 1.0, epsilon = 1e-12);
        // mean photon number close to |α|² = 1 at this cutoff
        let n = number(&sp, 0).unwrap();
        assert_relative_eq!(st.expectation(&n).re, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn spin_coherent_poles() {
        let sp = tensor(vec![spin_space(3).unwrap()]).unwrap();
        let ground = product_state(
            &sp,
            &[FactorState::SpinCoherent {
                theta: 0.0,
                phi: 0.0,
            }],
        )
        .unwrap();
        assert_relative_eq!(ground.rho[(0, 0)].re, 1.0, epsilon = 1e-14);
        let top = product_state(
            &sp,
            &[FactorState::SpinCoherent {
                theta: std::f64::consts::PI,
                phi: 0.3,
            }],
        )
        .unwrap();
        assert_relative_eq!(top.rho[(3, 3)].re, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn invalid_density_states_are_rejected() {
        let sp = single_mode(2);
        // wrong trace
        let m = DMatrix::<C64>::identity(2, 2);
        assert!(DensityState::new(sp.clone(), m, 0.0).is_err());
        // negative eigenvalue
        let mut neg = DMatrix::<C64>::zeros(2, 2);
        neg[(0, 0)] = c64(1.5, 0.0);
        neg[(1, 1)] = c64(-0.5, 0.0);
        assert!(DensityState::new(sp, neg, 0.0).is_err());
    }
}

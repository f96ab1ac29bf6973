//! The four subcommands: verify, derive, evolve, sweep. All outputs are
//! CSV (comma delimiter, `#` header comments carrying the canonical
//! config) plus plain-text matrix dumps; floats at 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use effmeq::algebra::{annihilation, c64, spin_ops, Operator};
use effmeq::deformed_su2::{
    extract_polynomial, interior_projector, verify_algebra, DeformedAlgebra,
};
use effmeq::effective::{
    conjugate_exact, derive_effective_system, fit_dissipator_rates, small_rotation,
    vacuum_sector_dissipator, DeriveOptions, EffectiveSystem, FrameChoice,
};
use effmeq::hilbert::Factor;
use effmeq::lindblad::{
    integrate, partial_trace, product_state, trace_distance, DensityState, FactorState,
    IntegrateOptions, MasterEquation, Trajectory,
};
use effmeq::models::ModelSystem;
use effmeq::superop::{fit_real_coefficients, SuperOpSum};
use effmeq::{Error, Result};

use crate::config::{serialize, RunConfig};

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn config_header(cfg: &RunConfig) -> String {
    let mut out = String::from("# config:\n");
    for line in serialize(cfg).lines() {
        let _ = writeln!(out, "#   {line}");
    }
    out
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {dir:?}: {e}")))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Config(format!("cannot write {path:?}: {e}")))?;
    Ok(path)
}

/// Initial state from the config's per-factor entries; unlisted factors
/// default to vacuum / lowest spin level.
fn initial_state(cfg: &RunConfig, model: &ModelSystem) -> Result<DensityState> {
    let space = &model.space;
    let mut specs: Vec<FactorState> = space
        .factors()
        .iter()
        .map(|f| match f {
            Factor::Mode { .. } => FactorState::Fock(0),
            Factor::Spin { atoms } => FactorState::SpinLevel(-(*atoms as f64) / 2.0),
        })
        .collect();
    for (label, st) in &cfg.states {
        let k = space.factor_index(label)?;
        specs[k] = st.clone();
    }
    let state = product_state(space, &specs)?;
    let support = state.support_ratio();
    if support > cfg.run.support_tol {
        return Err(Error::InvalidState(format!(
            "initial state fails the support guard: top-two Fock population {support:.3e} > run.support_tol {:.1e}; raise the cutoff or the tolerance",
            cfg.run.support_tol
        )));
    }
    Ok(state)
}

fn derive_options(cfg: &RunConfig, model: &ModelSystem) -> Result<DeriveOptions> {
    let vacuum_reduce = match &cfg.run.vacuum_reduce {
        None => None,
        Some(label) => Some(model.space.factor_index(label)?),
    };
    Ok(DeriveOptions {
        order: cfg.run.order,
        apply_rwa: cfg.run.apply_rwa,
        vacuum_reduce,
        frame: cfg.run.frame,
        keep_tol: cfg.run.keep_tol,
    })
}

/// Known operator shapes for labelling dissipator outputs.
fn op_label(op: &Operator) -> String {
    let mut candidates: Vec<(String, Operator)> = Vec::new();
    let space = op.space();
    for (k, f) in space.factors().iter().enumerate() {
        let label = space.label(k).to_string();
        if f.is_mode() {
            let a = annihilation(space, k).expect("mode factor");
            candidates.push((label.clone(), a.clone()));
            candidates.push((format!("{label}^2"), &a * &a));
            candidates.push((format!("{label}†"), a.adjoint()));
        } else if let Ok((sp, sm, s3)) = spin_ops(space, k) {
            candidates.push(("S+".into(), sp));
            candidates.push(("S-".into(), sm));
            candidates.push(("S3".into(), s3));
        }
    }
    for (name, cand) in &candidates {
        let overlap = op
            .matrix()
            .iter()
            .zip(cand.matrix().iter())
            .map(|(x, y)| y.conj() * x)
            .sum::<effmeq::C64>()
            / c64(cand.norm() * cand.norm(), 0.0);
        let resid = (op - &cand.scale(overlap)).norm();
        if resid < 1e-10 * op.norm().max(1.0) && overlap.norm() > 1e-12 {
            return name.clone();
        }
    }
    "custom".into()
}

pub fn cmd_verify(cfg: &RunConfig, out_dir: &Path) -> Result<bool> {
    let (model, alg0) = cfg.model.build()?;
    let (ok, residuals) =
        verify_algebra(&alg0.xp, &alg0.xm, &alg0.x3, &alg0.n_op, alg0.tol)?;
    let alg = extract_polynomial(
        DeformedAlgebra {
            blocks: Vec::new(),
            ..alg0
        },
        cfg.run.max_degree,
    )?;

    let mut csv = config_header(cfg);
    let _ = writeln!(csv, "# model = {}", model.name);
    let _ = writeln!(csv, "# residual_ladder_plus = {}", fmt_f(residuals.ladder_plus));
    let _ = writeln!(csv, "# residual_ladder_minus = {}", fmt_f(residuals.ladder_minus));
    let _ = writeln!(
        csv,
        "# residual_commutator_offdiag = {}",
        fmt_f(residuals.commutator_offdiag)
    );
    let _ = writeln!(csv, "# residual_adjoint_pair = {}", fmt_f(residuals.adjoint_pair));
    let _ = writeln!(csv, "# residual_n_conservation = {}", fmt_f(residuals.n_conservation));
    let _ = writeln!(csv, "# pass = {ok}");
    let tainted: Vec<String> = alg
        .blocks
        .iter()
        .filter(|b| b.truncation_tainted)
        .map(|b| format!("{}", b.n_value))
        .collect();
    let _ = writeln!(csv, "# truncation_tainted_blocks = {}", tainted.join(";"));
    csv.push_str("n_value,degree,coeff,fit_residual\n");
    for blk in alg.blocks.iter().filter(|b| !b.truncation_tainted) {
        for (deg, coeff) in blk.poly_coeffs.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{deg},{},{}",
                fmt_f(blk.n_value),
                fmt_f(*coeff),
                fmt_f(blk.fit_residual)
            );
        }
    }
    write_file(out_dir, "algebra_report.csv", &csv)?;

    println!("verify: {} — relation residuals:", if ok { "pass" } else { "FAIL" });
    println!("  [X3,X+]−X+ : {:.3e}", residuals.ladder_plus);
    println!("  [X3,X−]+X− : {:.3e}", residuals.ladder_minus);
    println!("  offdiag([X+,X−]) : {:.3e}", residuals.commutator_offdiag);
    println!("  X− vs X+† : {:.3e}", residuals.adjoint_pair);
    println!("  [N,·] : {:.3e}", residuals.n_conservation);
    println!(
        "  blocks: {} total, {} truncation-tainted; report: {}",
        alg.blocks.len(),
        tainted.len(),
        out_dir.join("algebra_report.csv").display()
    );
    Ok(ok)
}

/// The leading transferred Lindblad rate, fitted from the exactly
/// transformed Liouvillian on the truncation-safe sector.
fn transferred_rate(model: &ModelSystem, alg: &DeformedAlgebra, eps: f64) -> Result<(String, f64)> {
    let u = small_rotation(alg, eps)?;
    let diss: Vec<(f64, Operator)> = model
        .dissipators
        .iter()
        .map(|(r, c, _)| (*r, c.clone()))
        .collect();
    match model.name.as_str() {
        "coupled_oscillators" | "second_harmonic" => {
            let a = annihilation(&model.space, 0)?;
            let target = if model.name == "second_harmonic" {
                &a * &a
            } else {
                a
            };
            let b = annihilation(&model.space, 1)?;
            let frame = alg.x3.scale_re(model.delta);
            let pi = interior_projector(&model.space);
            let rates = fit_dissipator_rates(
                &u,
                &diss,
                &[&b, &target],
                &frame,
                model.delta,
                1e-6,
                Some(&pi),
            )?;
            let label = if model.name == "second_harmonic" {
                "a^2"
            } else {
                "a"
            };
            Ok((label.into(), rates[1]))
        }
        _ => {
            // Dicke: the vacuum-field atomic dissipation rate on S−
            let red = vacuum_sector_dissipator(&u, &diss, 0)?;
            let red_space = model.space.without_factor(0)?;
            let (_, sm, _) = spin_ops(&red_space, 0)?;
            let mut pat = SuperOpSum::new(red_space.total_dim());
            pat.push_lindblad(1.0, &sm);
            Ok(("S-".into(), fit_real_coefficients(&[pat], &red)[0]))
        }
    }
}

pub struct DeriveOutcome {
    pub oracle_residual: f64,
    pub transferred: (String, f64),
}

pub fn run_derive(cfg: &RunConfig, out_dir: &Path) -> Result<DeriveOutcome> {
    let (model, alg) = cfg.model.build()?;
    let eps = model.g / model.delta;
    let opts = derive_options(cfg, &model)?;
    let sys = derive_effective_system(&model, &alg, &opts)?;

    // exact-conjugation oracle on the full space
    let oracle_residual = if model.g != 0.0 {
        let u = small_rotation(&alg, eps)?;
        let exact = conjugate_exact(&u, &model.hint)?;
        let heff_full =
            effmeq::effective::effective_hamiltonian_order2(model.delta, model.g, &alg)?;
        (&exact - &heff_full).norm() / model.hint.norm()
    } else {
        0.0
    };
    let transferred = if model.g != 0.0 {
        transferred_rate(&model, &alg, eps)?
    } else {
        ("none".into(), 0.0)
    };

    write_file(out_dir, "h_eff.txt", &sys.h_eff.dump_text())?;

    let mut diss_csv = config_header(cfg);
    diss_csv.push_str("order_tag,rate,operator_label,operator_file\n");
    for (i, (rate, op, order)) in sys.dissipators.iter().enumerate() {
        let file = format!("op_{i}.txt");
        write_file(out_dir, &file, &op.dump_text())?;
        let _ = writeln!(
            diss_csv,
            "{order},{},{},{file}",
            fmt_f(*rate),
            op_label(op)
        );
    }
    for (i, (coeff, left, right, order)) in sys.cross_terms.iter().enumerate() {
        let lf = format!("cross_{i}_left.txt");
        let rf = format!("cross_{i}_right.txt");
        write_file(out_dir, &lf, &left.dump_text())?;
        write_file(out_dir, &rf, &right.dump_text())?;
        let _ = writeln!(
            diss_csv,
            "{order},{},non_lindblad_cross_term,{lf};{rf}",
            fmt_f(*coeff)
        );
    }
    write_file(out_dir, "dissipators.csv", &diss_csv)?;

    let mut report = config_header(cfg);
    for w in &sys.warnings {
        let _ = writeln!(report, "# warning: {w}");
    }
    report.push_str("key,value\n");
    let _ = writeln!(report, "epsilon,{}", fmt_f(sys.epsilon));
    let _ = writeln!(report, "scalar_part,{}", fmt_f(sys.scalar_part));
    let _ = writeln!(report, "oracle_residual,{}", fmt_f(oracle_residual));
    let _ = writeln!(
        report,
        "transferred_rate_{},{}",
        transferred.0,
        fmt_f(transferred.1)
    );
    if let Ok(state) = initial_state(cfg, &model) {
        let ratio = model.guard.ratio(&state)?;
        if ratio >= 0.1 {
            let _ = writeln!(
                report,
                "# warning: dispersive guard ratio {ratio:.3} is not small ({})",
                model.guard.description()
            );
        }
        let _ = writeln!(report, "guard_ratio,{}", fmt_f(ratio));
    }
    // RWA frame comparison: post-filter dissipator weight and term count
    // for both frame choices. A finer frame splits collapse operators into
    // more frequency components (same weight, extra decoherence) and drops
    // more cross pairs.
    if cfg.run.apply_rwa {
        for (frame, tag) in [
            (FrameChoice::DeltaX3, "x3"),
            (FrameChoice::FullDiagonal, "heff"),
        ] {
            let alt = derive_effective_system(
                &model,
                &alg,
                &DeriveOptions {
                    frame,
                    ..opts.clone()
                },
            )?;
            let kept: f64 = alt
                .dissipators
                .iter()
                .map(|(r, c, _)| r * c.norm() * c.norm())
                .sum::<f64>()
                + alt
                    .cross_terms
                    .iter()
                    .map(|(c, l, r, _)| c.abs() * l.norm() * r.norm())
                    .sum::<f64>();
            let _ = writeln!(report, "rwa_kept_weight_frame_{tag},{}", fmt_f(kept));
            let _ = writeln!(
                report,
                "rwa_kept_terms_frame_{tag},{}",
                alt.dissipators.len() + alt.cross_terms.len()
            );
        }
    }

    // ε sweep: oracle residual per point plus the fitted slope
    if let Some(sweep) = &cfg.sweep_g {
        let mut pts = Vec::new();
        let mut oracle_csv = config_header(cfg);
        oracle_csv.push_str("epsilon,hamiltonian_residual\n");
        for &g in sweep {
            let (m2, a2) = cfg.model.with_g(g).build()?;
            let e2 = m2.g / m2.delta;
            let u = small_rotation(&a2, e2)?;
            let exact = conjugate_exact(&u, &m2.hint)?;
            let heff = effmeq::effective::effective_hamiltonian_order2(m2.delta, m2.g, &a2)?;
            let r = (&exact - &heff).norm() / m2.hint.norm();
            let _ = writeln!(oracle_csv, "{},{}", fmt_f(e2), fmt_f(r));
            if e2 > 0.0 && r > 0.0 {
                pts.push((e2.ln(), r.ln()));
            }
        }
        let slope = if pts.len() >= 2 {
            fit_slope(&pts)
        } else {
            f64::NAN
        };
        let _ = writeln!(oracle_csv, "# fitted_slope = {}", fmt_f(slope));
        write_file(out_dir, "oracle.csv", &oracle_csv)?;
        let _ = writeln!(report, "oracle_sweep_slope,{}", fmt_f(slope));
    }
    write_file(out_dir, "derive_report.csv", &report)?;

    println!(
        "derive: epsilon = {:.4}, oracle residual = {:.3e}, H_eff and {} dissipator terms written to {}",
        sys.epsilon,
        oracle_residual,
        sys.dissipators.len() + sys.cross_terms.len(),
        out_dir.display()
    );
    for w in &sys.warnings {
        eprintln!("warning: {w}");
    }
    Ok(DeriveOutcome {
        oracle_residual,
        transferred,
    })
}

fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn trajectory_csv(
    cfg: &RunConfig,
    traj: &Trajectory,
    observables: &[(String, Operator)],
) -> String {
    let mut csv = config_header(cfg);
    for w in &traj.warnings {
        let _ = writeln!(csv, "# warning: {w}");
    }
    let _ = writeln!(csv, "# dt_effective = {}", fmt_f(traj.dt_effective));
    let obs_names: Vec<String> = observables.iter().map(|(n, _)| n.clone()).collect();
    let _ = writeln!(csv, "t,trace,min_eig,purity,{}", obs_names.join(","));
    for (state, diag) in traj.states.iter().zip(&traj.diagnostics) {
        let mut row = format!(
            "{},{},{},{}",
            fmt_f(diag.time),
            fmt_f(diag.trace),
            fmt_f(diag.min_eig),
            fmt_f(diag.purity)
        );
        for (_, op) in observables {
            let _ = write!(row, ",{}", fmt_f(state.expectation(op).re));
        }
        csv.push_str(&row);
        csv.push('\n');
    }
    csv
}

pub struct EvolveOutcome {
    /// Trace distance between exact and effective at the final sample,
    /// when the effective comparison ran.
    pub final_trace_distance: Option<f64>,
}

pub fn run_evolve(cfg: &RunConfig, out_dir: &Path) -> Result<EvolveOutcome> {
    let (model, alg) = cfg.model.build()?;
    let rho0 = initial_state(cfg, &model)?;
    let guard0 = model.guard.ratio(&rho0)?;
    if guard0 >= 0.1 {
        eprintln!(
            "warning: dispersive guard ratio {guard0:.3} is not small ({})",
            model.guard.description()
        );
    }
    let opts = IntegrateOptions {
        samples: cfg.run.samples,
        support_tol: cfg.run.support_tol,
    };
    let me_exact = MasterEquation::new(
        model.hint.clone(),
        model
            .dissipators
            .iter()
            .map(|(r, c, _)| (*r, c.clone()))
            .collect(),
        vec![],
    )?;
    let traj = integrate(&me_exact, &rho0, cfg.run.t_final, cfg.run.dt, &opts)?;
    let observables = model.observables()?;
    write_file(out_dir, "trajectory_exact.csv", &trajectory_csv(cfg, &traj, &observables))?;

    if !cfg.run.effective {
        println!(
            "evolve: exact trajectory with {} samples written to {}",
            traj.times.len(),
            out_dir.display()
        );
        return Ok(EvolveOutcome {
            final_trace_distance: None,
        });
    }

    let dopts = derive_options(cfg, &model)?;
    let sys = derive_effective_system(&model, &alg, &dopts)?;
    let me_eff = sys.to_master_equation()?;
    let eps = model.g / model.delta;
    let u = small_rotation(&alg, eps)?;
    let transformed0 = effmeq::effective::transform_state(&u, &rho0)?;
    let eff0 = match dopts.vacuum_reduce {
        None => transformed0.clone(),
        Some(k) => {
            let keep = if k == 0 { 1 } else { 0 };
            partial_trace(&transformed0, keep)?
        }
    };
    let traj_eff = integrate(&me_eff, &eff0, cfg.run.t_final, cfg.run.dt, &opts)?;
    let eff_observables: Vec<(String, Operator)> = observables
        .iter()
        .filter(|(_, op)| op.space() == sys.h_eff.space())
        .cloned()
        .collect();
    let eff_obs = if eff_observables.is_empty() {
        reduced_observables(&sys)?
    } else {
        eff_observables
    };
    write_file(
        out_dir,
        "trajectory_effective.csv",
        &trajectory_csv(cfg, &traj_eff, &eff_obs),
    )?;

    // comparison: exact state carried into the effective frame at each
    // shared sample time
    let mut cmp = config_header(cfg);
    cmp.push_str("t,trace_distance,guard_ratio\n");
    let mut last_td = 0.0;
    for (ex, eff) in traj.states.iter().zip(traj_eff.states.iter()) {
        let ex_t = effmeq::effective::transform_state(&u, ex)?;
        let ex_cmp = match dopts.vacuum_reduce {
            None => ex_t,
            Some(k) => {
                let keep = if k == 0 { 1 } else { 0 };
                partial_trace(&ex_t, keep)?
            }
        };
        let td = trace_distance(&ex_cmp, eff)?;
        last_td = td;
        let _ = writeln!(
            cmp,
            "{},{},{}",
            fmt_f(ex.time),
            fmt_f(td),
            fmt_f(model.guard.ratio(ex)?)
        );
    }
    write_file(out_dir, "comparison.csv", &cmp)?;
    println!(
        "evolve: {} samples, final trace distance (exact vs effective) = {:.4e}; outputs in {}",
        traj.times.len(),
        last_td,
        out_dir.display()
    );
    Ok(EvolveOutcome {
        final_trace_distance: Some(last_td),
    })
}

fn reduced_observables(sys: &EffectiveSystem) -> Result<Vec<(String, Operator)>> {
    let space = sys.h_eff.space();
    let mut out = Vec::new();
    for (k, f) in space.factors().iter().enumerate() {
        let label = space.label(k);
        if f.is_mode() {
            out.push((format!("n_{label}"), effmeq::algebra::number(space, k)?));
        } else {
            let (_, _, s3) = spin_ops(space, k)?;
            out.push((format!("s3_{label}"), s3));
        }
    }
    Ok(out)
}

pub fn run_sweep(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let sweep = cfg
        .sweep_g
        .clone()
        .ok_or_else(|| Error::Config("sweep requires sweep.g".into()))?;
    if sweep.is_empty() {
        return Err(Error::Config("sweep.g is empty".into()));
    }

    // (epsilon, hamiltonian residual, fitted rate, dynamics error at T)
    type PointMetrics = (f64, f64, f64, f64);
    // worker pool over independent points; each point owns its files
    let results: Vec<(usize, Result<PointMetrics>)> = sweep
        .par_iter()
        .enumerate()
        .map(|(i, &g)| {
            let mut point_cfg = cfg.clone();
            point_cfg.model = cfg.model.with_g(g);
            point_cfg.sweep_g = None;
            let point_dir = out_dir.join(format!("point_{i:03}"));
            let run = || -> Result<PointMetrics> {
                let derive = run_derive(&point_cfg, &point_dir)?;
                let evolve = run_evolve(&point_cfg, &point_dir)?;
                let (model, _) = point_cfg.model.build()?;
                let eps = model.g / model.delta;
                Ok((
                    eps,
                    derive.oracle_residual,
                    derive.transferred.1,
                    evolve.final_trace_distance.unwrap_or(f64::NAN),
                ))
            };
            (i, run())
        })
        .collect();

    let mut csv = config_header(cfg);
    csv.push_str("epsilon,hamiltonian_residual,dissipator_rate_fit,dynamics_error_at_T\n");
    let mut ham_pts = Vec::new();
    let mut rate_pts = Vec::new();
    let mut dyn_pts = Vec::new();
    let mut failures = Vec::new();
    for (i, res) in &results {
        match res {
            Ok((eps, ham, rate, dynerr)) => {
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    fmt_f(*eps),
                    fmt_f(*ham),
                    fmt_f(*rate),
                    fmt_f(*dynerr)
                );
                if *eps > 0.0 {
                    if *ham > 0.0 {
                        ham_pts.push((eps.ln(), ham.ln()));
                    }
                    if *rate > 0.0 {
                        rate_pts.push((eps.ln(), rate.ln()));
                    }
                    if dynerr.is_finite() && *dynerr > 0.0 {
                        dyn_pts.push((eps.ln(), dynerr.ln()));
                    }
                }
            }
            Err(e) => {
                let _ = writeln!(csv, "# point {i} failed: {e}");
                failures.push(format!("point {i}: {e}"));
            }
        }
    }
    write_file(out_dir, "sweep.csv", &csv)?;

    let slope_of = |pts: &[(f64, f64)]| {
        if pts.len() >= 2 {
            fit_slope(pts)
        } else {
            f64::NAN
        }
    };
    let mut slopes = config_header(cfg);
    if sweep.len() < 2 {
        slopes.push_str("# warning: single-point sweep, slopes are nan\n");
        eprintln!("warning: single-point sweep, slopes are nan");
    }
    slopes.push_str("quantity,slope\n");
    let _ = writeln!(slopes, "hamiltonian_residual,{}", fmt_f(slope_of(&ham_pts)));
    let _ = writeln!(slopes, "dissipator_rate_fit,{}", fmt_f(slope_of(&rate_pts)));
    let _ = writeln!(slopes, "dynamics_error_at_T,{}", fmt_f(slope_of(&dyn_pts)));
    write_file(out_dir, "slopes.csv", &slopes)?;

    println!(
        "sweep: {} points ({} failed), aggregated into {}",
        sweep.len(),
        failures.len(),
        out_dir.display()
    );
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("sweep failure: {f}");
        }
        return Err(Error::Config(format!(
            "{} sweep point(s) failed; partial results kept",
            failures.len()
        )));
    }
    Ok(())
}

//! Flat key-value run configuration with dotted sections, chosen for
//! trivial cross-language parsing. `serialize(parse(text))` is the
//! canonical form and is embedded as a header comment in every output.

use std::collections::BTreeMap;

use effmeq::algebra::c64;
use effmeq::deformed_su2::DeformedAlgebra;
use effmeq::effective::FrameChoice;
use effmeq::lindblad::FactorState;
use effmeq::models::{coupled_oscillators, dicke, second_harmonic, ModelSystem};
use effmeq::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    CoupledOscillators {
        omega_a: f64,
        omega_b: f64,
        g: f64,
        gamma: f64,
        cutoff_a: usize,
        cutoff_b: usize,
    },
    SecondHarmonic {
        omega_a: f64,
        omega_b: f64,
        g: f64,
        gamma: f64,
        cutoff_a: usize,
        cutoff_b: usize,
    },
    Dicke {
        omega_f: f64,
        omega_0: f64,
        g: f64,
        gamma: f64,
        atoms: usize,
        cutoff: usize,
    },
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::CoupledOscillators { .. } => "coupled_oscillators",
            ModelConfig::SecondHarmonic { .. } => "second_harmonic",
            ModelConfig::Dicke { .. } => "dicke",
        }
    }

    pub fn with_g(&self, g_new: f64) -> ModelConfig {
        let mut out = self.clone();
        match &mut out {
            ModelConfig::CoupledOscillators { g, .. }
            | ModelConfig::SecondHarmonic { g, .. }
            | ModelConfig::Dicke { g, .. } => *g = g_new,
        }
        out
    }

    pub fn build(&self) -> Result<(ModelSystem, DeformedAlgebra)> {
        match *self {
            ModelConfig::CoupledOscillators {
                omega_a,
                omega_b,
                g,
                gamma,
                cutoff_a,
                cutoff_b,
            } => coupled_oscillators(omega_a, omega_b, g, gamma, cutoff_a, cutoff_b),
            ModelConfig::SecondHarmonic {
                omega_a,
                omega_b,
                g,
                gamma,
                cutoff_a,
                cutoff_b,
            } => second_harmonic(omega_a, omega_b, g, gamma, cutoff_a, cutoff_b),
            ModelConfig::Dicke {
                omega_f,
                omega_0,
                g,
                gamma,
                atoms,
                cutoff,
            } => dicke(omega_f, omega_0, g, gamma, atoms, cutoff),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunParams {
    pub t_final: f64,
    pub dt: f64,
    /// ε-order kept in the dissipator expansion.
    pub order: u8,
    pub apply_rwa: bool,
    /// Factor label of the vacuum mode to reduce, if any.
    pub vacuum_reduce: Option<String>,
    pub frame: FrameChoice,
    pub keep_tol: f64,
    pub support_tol: f64,
    pub samples: usize,
    pub max_degree: usize,
    /// Whether `evolve` also derives and runs the effective system.
    pub effective: bool,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            t_final: 10.0,
            dt: 0.005,
            order: 2,
            apply_rwa: false,
            vacuum_reduce: None,
            frame: FrameChoice::DeltaX3,
            keep_tol: 1e-6,
            support_tol: 1e-6,
            samples: 200,
            max_degree: 3,
            effective: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub run: RunParams,
    /// Per-factor initial states keyed by factor label; unlisted factors
    /// default to vacuum / lowest spin level.
    pub states: Vec<(String, FactorState)>,
    /// Optional ε-sweep: g values at fixed detuning.
    pub sweep_g: Option<Vec<f64>>,
    pub output_dir: Option<String>,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got `{v}`")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "{key}: expected true/false, got `{other}`"
        ))),
    }
}

fn parse_state(key: &str, v: &str) -> Result<FactorState> {
    let (kind, rest) = v
        .trim()
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("{key}: expected kind:args, got `{v}`")))?;
    match kind {
        "fock" => Ok(FactorState::Fock(parse_usize(key, rest)?)),
        "coherent" => {
            let parts: Vec<&str> = rest.split(',').collect();
            let re = parse_f(key, parts[0])?;
            let im = if parts.len() > 1 {
                parse_f(key, parts[1])?
            } else {
                0.0
            };
            Ok(FactorState::Coherent(c64(re, im)))
        }
        "spin" => Ok(FactorState::SpinLevel(parse_f(key, rest)?)),
        "spin_coherent" => {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "{key}: spin_coherent needs theta,phi"
                )));
            }
            Ok(FactorState::SpinCoherent {
                theta: parse_f(key, parts[0])?,
                phi: parse_f(key, parts[1])?,
            })
        }
        other => Err(Error::Config(format!("{key}: unknown state kind `{other}`"))),
    }
}

fn fmt_state(s: &FactorState) -> String {
    match s {
        FactorState::Fock(n) => format!("fock:{n}"),
        FactorState::Coherent(a) => format!("coherent:{},{}", fmt_f(a.re), fmt_f(a.im)),
        FactorState::SpinLevel(m) => format!("spin:{}", fmt_f(*m)),
        FactorState::SpinCoherent { theta, phi } => {
            format!("spin_coherent:{},{}", fmt_f(*theta), fmt_f(*phi))
        }
    }
}

/// Parse the flat `key = value` format; `#` starts a comment line.
pub fn parse(text: &str) -> Result<RunConfig> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key `{key}`")));
        }
    }

    let take = |map: &mut BTreeMap<String, String>, key: &str| map.remove(key);
    let need = |map: &mut BTreeMap<String, String>, key: &str| {
        map.remove(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    };

    let name = need(&mut map, "model.name")?;
    let g = parse_f("model.g", &need(&mut map, "model.g")?)?;
    let gamma = parse_f("model.gamma", &need(&mut map, "model.gamma")?)?;
    let model = match name.as_str() {
        "coupled_oscillators" | "second_harmonic" => {
            let omega_a = parse_f("model.omega_a", &need(&mut map, "model.omega_a")?)?;
            let omega_b = parse_f("model.omega_b", &need(&mut map, "model.omega_b")?)?;
            let cutoff_a = parse_usize("model.cutoff_a", &need(&mut map, "model.cutoff_a")?)?;
            let cutoff_b = parse_usize("model.cutoff_b", &need(&mut map, "model.cutoff_b")?)?;
            if name == "coupled_oscillators" {
                ModelConfig::CoupledOscillators {
                    omega_a,
                    omega_b,
                    g,
                    gamma,
                    cutoff_a,
                    cutoff_b,
                }
            } else {
                ModelConfig::SecondHarmonic {
                    omega_a,
                    omega_b,
                    g,
                    gamma,
                    cutoff_a,
                    cutoff_b,
                }
            }
        }
        "dicke" => ModelConfig::Dicke {
            omega_f: parse_f("model.omega_f", &need(&mut map, "model.omega_f")?)?,
            omega_0: parse_f("model.omega_0", &need(&mut map, "model.omega_0")?)?,
            g,
            gamma,
            atoms: parse_usize("model.atoms", &need(&mut map, "model.atoms")?)?,
            cutoff: parse_usize("model.cutoff", &need(&mut map, "model.cutoff")?)?,
        },
        other => {
            return Err(Error::Config(format!("unknown model `{other}`")));
        }
    };

    let mut run = RunParams::default();
    if let Some(v) = take(&mut map, "run.t_final") {
        run.t_final = parse_f("run.t_final", &v)?;
    }
    if let Some(v) = take(&mut map, "run.dt") {
        run.dt = parse_f("run.dt", &v)?;
    }
    if let Some(v) = take(&mut map, "run.order") {
        let o = parse_usize("run.order", &v)?;
        if o > 2 {
            return Err(Error::Config(format!("run.order must be 0..=2, got {o}")));
        }
        run.order = o as u8;
    }
    if let Some(v) = take(&mut map, "run.rwa") {
        run.apply_rwa = parse_bool("run.rwa", &v)?;
    }
    if let Some(v) = take(&mut map, "run.vacuum_reduce") {
        run.vacuum_reduce = match v.as_str() {
            "none" => None,
            label => Some(label.to_string()),
        };
    }
    if let Some(v) = take(&mut map, "run.frame") {
        run.frame = match v.as_str() {
            "x3" => FrameChoice::DeltaX3,
            "heff" => FrameChoice::FullDiagonal,
            other => {
                return Err(Error::Config(format!(
                    "run.frame: expected x3|heff, got `{other}`"
                )))
            }
        };
    }
    if let Some(v) = take(&mut map, "run.keep_tol") {
        run.keep_tol = parse_f("run.keep_tol", &v)?;
    }
    if let Some(v) = take(&mut map, "run.support_tol") {
        run.support_tol = parse_f("run.support_tol", &v)?;
    }
    if let Some(v) = take(&mut map, "run.samples") {
        run.samples = parse_usize("run.samples", &v)?;
    }
    if let Some(v) = take(&mut map, "run.max_degree") {
        run.max_degree = parse_usize("run.max_degree", &v)?;
    }
    if let Some(v) = take(&mut map, "run.effective") {
        run.effective = parse_bool("run.effective", &v)?;
    }

    let sweep_g = match take(&mut map, "sweep.g") {
        None => None,
        Some(v) => {
            let vals: Result<Vec<f64>> = v.split(',').map(|s| parse_f("sweep.g", s)).collect();
            Some(vals?)
        }
    };
    let output_dir = take(&mut map, "output.dir");

    let mut states = Vec::new();
    let state_keys: Vec<String> = map
        .keys()
        .filter(|k| k.starts_with("state."))
        .cloned()
        .collect();
    for key in state_keys {
        let v = map.remove(&key).unwrap();
        let label = key.trim_start_matches("state.").to_string();
        states.push((label, parse_state(&key, &v)?));
    }

    if let Some(stray) = map.keys().next() {
        return Err(Error::Config(format!("unknown key `{stray}`")));
    }

    Ok(RunConfig {
        model,
        run,
        states,
        sweep_g,
        output_dir,
    })
}

/// Canonical serialization: fixed key order, floats at 17 significant
/// digits. Parsing this text reproduces the config exactly.
pub fn serialize(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    push("model.name", cfg.model.name().to_string());
    match &cfg.model {
        ModelConfig::CoupledOscillators {
            omega_a,
            omega_b,
            g,
            gamma,
            cutoff_a,
            cutoff_b,
        }
        | ModelConfig::SecondHarmonic {
            omega_a,
            omega_b,
            g,
            gamma,
            cutoff_a,
            cutoff_b,
        } => {
            push("model.omega_a", fmt_f(*omega_a));
            push("model.omega_b", fmt_f(*omega_b));
            push("model.g", fmt_f(*g));
            push("model.gamma", fmt_f(*gamma));
            push("model.cutoff_a", cutoff_a.to_string());
            push("model.cutoff_b", cutoff_b.to_string());
        }
        ModelConfig::Dicke {
            omega_f,
            omega_0,
            g,
            gamma,
            atoms,
            cutoff,
        } => {
            push("model.omega_f", fmt_f(*omega_f));
            push("model.omega_0", fmt_f(*omega_0));
            push("model.g", fmt_f(*g));
            push("model.gamma", fmt_f(*gamma));
            push("model.atoms", atoms.to_string());
            push("model.cutoff", cutoff.to_string());
        }
    }
    push("run.t_final", fmt_f(cfg.run.t_final));
    push("run.dt", fmt_f(cfg.run.dt));
    push("run.order", cfg.run.order.to_string());
    push("run.rwa", cfg.run.apply_rwa.to_string());
    push(
        "run.vacuum_reduce",
        cfg.run
            .vacuum_reduce
            .clone()
            .unwrap_or_else(|| "none".to_string()),
    );
    push(
        "run.frame",
        match cfg.run.frame {
            FrameChoice::DeltaX3 => "x3".to_string(),
            FrameChoice::FullDiagonal => "heff".to_string(),
        },
    );
    push("run.keep_tol", fmt_f(cfg.run.keep_tol));
    push("run.support_tol", fmt_f(cfg.run.support_tol));
    push("run.samples", cfg.run.samples.to_string());
    push("run.max_degree", cfg.run.max_degree.to_string());
    push("run.effective", cfg.run.effective.to_string());
    let mut states = cfg.states.clone();
    states.sort_by(|a, b| a.0.cmp(&b.0));
    for (label, st) in &states {
        push(&format!("state.{label}"), fmt_state(st));
    }
    if let Some(sweep) = &cfg.sweep_g {
        let joined: Vec<String> = sweep.iter().map(|g| fmt_f(*g)).collect();
        push("sweep.g", joined.join(","));
    }
    if let Some(dir) = &cfg.output_dir {
        push("output.dir", dir.clone());
    }
    out
}

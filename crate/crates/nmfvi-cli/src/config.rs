//! Flat `[section] key=value` run configuration.
//!
//! One file fully determines a run: prior and truth hyperparameters, model
//! (noise and aspect ratio), quadrature, fixed-point solver, simulation, and
//! coverage levels, plus the sweep axis for `sweep`. Unknown sections or
//! keys are rejected so typos fail loudly, and the fully resolved
//! configuration is embedded in every output for reproducibility.

use nmfvi::channel::{QuadratureScheme, SlabStrategy};
use nmfvi::fixedpoint::SolveOptions;
use nmfvi::meanfield::ProblemSpec;
use nmfvi::priors::PriorSpec;
use nmfvi::simulate::{DesignKind, OptimizerOptions, SimConfig, W2Options};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriorSettings {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta2: Option<f64>,
}

impl PriorSettings {
    fn to_prior(&self) -> Result<PriorSpec, ConfigError> {
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| ConfigError(format!("prior kind {} requires key {key}", self.kind)))
        };
        let prior = match self.kind.as_str() {
            "gaussian" => PriorSpec::gaussian_mean_zero(need(self.delta2, "delta2")?),
            "spike_slab" => {
                PriorSpec::gaussian_spike_slab(need(self.q, "q")?, need(self.delta2, "delta2")?)
            }
            "three_point" => PriorSpec::three_point(need(self.q, "q")?),
            other => return err(format!("unknown prior kind {other}")),
        };
        prior.map_err(|e| ConfigError(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSettings {
    pub sigma2: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuadSettings {
    pub hermite_nodes: usize,
    pub slab: String,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for QuadSettings {
    fn default() -> Self {
        QuadSettings {
            hermite_nodes: 61,
            slab: "hermite".into(),
            mc_samples: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FpSettings {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FpSettings {
    fn default() -> Self {
        FpSettings {
            damping: 0.5,
            tol: 1e-9,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimSettings {
    pub n: usize,
    pub seed: u64,
    pub design: String,
    pub replicates: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            n: 1000,
            seed: 0,
            design: "gaussian".into(),
            replicates: 1,
            grad_tol: 1e-8,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CoverageSettings {
    pub zetas: Vec<f64>,
}

impl Default for CoverageSettings {
    fn default() -> Self {
        CoverageSettings { zetas: vec![0.05] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepSettings {
    pub axis: String,
    pub grid: Vec<f64>,
    pub metrics: Vec<String>,
}

/// Fully resolved run configuration (defaults filled in).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub prior: PriorSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PriorSettings>,
    pub model: ModelSettings,
    pub quad: QuadSettings,
    pub fp: FpSettings,
    pub sim: SimSettings,
    pub coverage: CoverageSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSettings>,
}

impl RunConfig {
    pub fn from_ini_str(text: &str) -> Result<RunConfig, ConfigError> {
        let raw = parse_sections(text)?;
        let mut cfg = RunConfig {
            prior: PriorSettings {
                kind: String::new(),
                q: None,
                delta2: None,
            },
            truth: None,
            model: ModelSettings {
                sigma2: f64::NAN,
                alpha: f64::NAN,
            },
            quad: QuadSettings::default(),
            fp: FpSettings::default(),
            sim: SimSettings::default(),
            coverage: CoverageSettings::default(),
            sweep: None,
        };
        let mut saw_prior = false;
        let mut saw_model = false;
        for (section, entries) in &raw {
            match section.as_str() {
                "prior" => {
                    cfg.prior = parse_prior(entries)?;
                    saw_prior = true;
                }
                "truth" => cfg.truth = Some(parse_prior(entries)?),
                "model" => {
                    let mut sigma2 = None;
                    let mut alpha = None;
                    for (k, v) in entries {
                        match k.as_str() {
                            "sigma2" => sigma2 = Some(parse_f64(k, v)?),
                            "alpha" => alpha = Some(parse_f64(k, v)?),
                            other => return err(format!("unknown key {other} in [model]")),
                        }
                    }
                    cfg.model = ModelSettings {
                        sigma2: sigma2.ok_or(ConfigError("[model] needs sigma2".into()))?,
                        alpha: alpha.ok_or(ConfigError("[model] needs alpha".into()))?,
                    };
                    saw_model = true;
                }
                "quad" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "hermite_nodes" => cfg.quad.hermite_nodes = parse_usize(k, v)?,
                            "slab" => cfg.quad.slab = parse_choice(k, v, &["hermite", "mc"])?,
                            "mc_samples" => cfg.quad.mc_samples = parse_usize(k, v)?,
                            "seed" => cfg.quad.seed = parse_u64(k, v)?,
                            other => return err(format!("unknown key {other} in [quad]")),
                        }
                    }
                }
                "fp" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "damping" => cfg.fp.damping = parse_f64(k, v)?,
                            "tol" => cfg.fp.tol = parse_f64(k, v)?,
                            "max_iter" => cfg.fp.max_iter = parse_usize(k, v)?,
                            other => return err(format!("unknown key {other} in [fp]")),
                        }
                    }
                }
                "sim" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "n" => cfg.sim.n = parse_usize(k, v)?,
                            "seed" => cfg.sim.seed = parse_u64(k, v)?,
                            "design" => {
                                cfg.sim.design = parse_choice(k, v, &["gaussian", "laplace"])?
                            }
                            "replicates" => cfg.sim.replicates = parse_usize(k, v)?,
                            "grad_tol" => cfg.sim.grad_tol = parse_f64(k, v)?,
                            "max_iter" => cfg.sim.max_iter = parse_usize(k, v)?,
                            other => return err(format!("unknown key {other} in [sim]")),
                        }
                    }
                }
                "coverage" => {
                    for (k, v) in entries {
                        match k.as_str() {
                            "zetas" => cfg.coverage.zetas = parse_f64_list(k, v)?,
                            other => return err(format!("unknown key {other} in [coverage]")),
                        }
                    }
                }
                "sweep" => {
                    let mut axis = None;
                    let mut grid = Vec::new();
                    let mut metrics = vec!["mse".to_string(), "coverage_95".to_string()];
                    for (k, v) in entries {
                        match k.as_str() {
                            "axis" => axis = Some(parse_choice(k, v, &["q", "delta2", "alpha"])?),
                            "grid" => grid = parse_f64_list(k, v)?,
                            "metrics" => {
                                metrics = v.split(',').map(|s| s.trim().to_string()).collect()
                            }
                            other => return err(format!("unknown key {other} in [sweep]")),
                        }
                    }
                    cfg.sweep = Some(SweepSettings {
                        axis: axis.ok_or(ConfigError("[sweep] needs axis".into()))?,
                        grid,
                        metrics,
                    });
                }
                other => return err(format!("unknown section [{other}]")),
            }
        }
        if !saw_prior {
            return err("missing [prior] section");
        }
        if !saw_model {
            return err("missing [model] section");
        }
        Ok(cfg)
    }

    /// Serializes back to the same flat format; round trips through
    /// `from_ini_str` without loss (floats print in shortest form).
    pub fn to_ini_string(&self) -> String {
        let mut out = String::new();
        let prior_block = |out: &mut String, name: &str, p: &PriorSettings| {
            let _ = writeln!(out, "[{name}]");
            let _ = writeln!(out, "kind = {}", p.kind);
            if let Some(q) = p.q {
                let _ = writeln!(out, "q = {q}");
            }
            if let Some(d2) = p.delta2 {
                let _ = writeln!(out, "delta2 = {d2}");
            }
        };
        prior_block(&mut out, "prior", &self.prior);
        if let Some(truth) = &self.truth {
            prior_block(&mut out, "truth", truth);
        }
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "sigma2 = {}", self.model.sigma2);
        let _ = writeln!(out, "alpha = {}", self.model.alpha);
        let _ = writeln!(out, "[quad]");
        let _ = writeln!(out, "hermite_nodes = {}", self.quad.hermite_nodes);
        let _ = writeln!(out, "slab = {}", self.quad.slab);
        let _ = writeln!(out, "mc_samples = {}", self.quad.mc_samples);
        let _ = writeln!(out, "seed = {}", self.quad.seed);
        let _ = writeln!(out, "[fp]");
        let _ = writeln!(out, "damping = {}", self.fp.damping);
        let _ = writeln!(out, "tol = {}", self.fp.tol);
        let _ = writeln!(out, "max_iter = {}", self.fp.max_iter);
        let _ = writeln!(out, "[sim]");
        let _ = writeln!(out, "n = {}", self.sim.n);
        let _ = writeln!(out, "seed = {}", self.sim.seed);
        let _ = writeln!(out, "design = {}", self.sim.design);
        let _ = writeln!(out, "replicates = {}", self.sim.replicates);
        let _ = writeln!(out, "grad_tol = {}", self.sim.grad_tol);
        let _ = writeln!(out, "max_iter = {}", self.sim.max_iter);
        let _ = writeln!(out, "[coverage]");
        let zetas: Vec<String> = self.coverage.zetas.iter().map(|z| format!("{z}")).collect();
        let _ = writeln!(out, "zetas = {}", zetas.join(","));
        if let Some(sweep) = &self.sweep {
            let _ = writeln!(out, "[sweep]");
            let _ = writeln!(out, "axis = {}", sweep.axis);
            let grid: Vec<String> = sweep.grid.iter().map(|g| format!("{g}")).collect();
            let _ = writeln!(out, "grid = {}", grid.join(","));
            let _ = writeln!(out, "metrics = {}", sweep.metrics.join(","));
        }
        out
    }

    pub fn prior_spec(&self) -> Result<PriorSpec, ConfigError> {
        self.prior.to_prior()
    }

    pub fn problem(&self) -> Result<ProblemSpec, ConfigError> {
        let prior = self.prior.to_prior()?;
        let truth = match &self.truth {
            Some(t) => t.to_prior()?,
            None => prior.clone(),
        };
        ProblemSpec::new(prior, truth, self.model.sigma2, self.model.alpha)
            .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn scheme(&self) -> QuadratureScheme {
        let slab = match self.quad.slab.as_str() {
            "mc" => SlabStrategy::MonteCarlo {
                samples: self.quad.mc_samples,
                seed: self.quad.seed,
            },
            _ => SlabStrategy::GaussHermite {
                nodes: self.quad.hermite_nodes,
            },
        };
        QuadratureScheme {
            hermite_nodes_z: self.quad.hermite_nodes,
            slab,
        }
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            damping: self.fp.damping,
            tol: self.fp.tol,
            max_iter: self.fp.max_iter,
            ..SolveOptions::default()
        }
    }

    /// `p` is derived from `n` and the aspect ratio `α = n/p`.
    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let p = (self.sim.n as f64 / self.model.alpha).round() as usize;
        if p == 0 {
            return err(format!(
                "n = {} with alpha = {} leaves no coordinates",
                self.sim.n, self.model.alpha
            ));
        }
        let design = match self.sim.design.as_str() {
            "laplace" => DesignKind::LaplaceIid,
            _ => DesignKind::GaussianIid,
        };
        Ok(SimConfig {
            n: self.sim.n,
            p,
            seed: self.sim.seed,
            design,
            replicates: self.sim.replicates,
            optimizer: OptimizerOptions {
                grad_tol: self.sim.grad_tol,
                max_iter: self.sim.max_iter,
                ..OptimizerOptions::default()
            },
            zeta_list: self.coverage.zetas.clone(),
            w2: W2Options::default(),
        })
    }
}

fn parse_prior(entries: &[(String, String)]) -> Result<PriorSettings, ConfigError> {
    let mut kind = None;
    let mut q = None;
    let mut delta2 = None;
    for (k, v) in entries {
        match k.as_str() {
            "kind" => kind = Some(v.clone()),
            "q" => q = Some(parse_f64(k, v)?),
            "delta2" => delta2 = Some(parse_f64(k, v)?),
            other => return err(format!("unknown key {other} in prior section")),
        }
    }
    let settings = PriorSettings {
        kind: kind.ok_or(ConfigError("prior section needs kind".into()))?,
        q,
        delta2,
    };
    settings.to_prior()?;
    Ok(settings)
}

type Sections = Vec<(String, Vec<(String, String)>)>;

fn parse_sections(text: &str) -> Result<Sections, ConfigError> {
    let mut sections: Sections = Vec::new();
    let mut current: Option<usize> = None;
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError(format!("line {}: malformed section", lineno + 1)))?
                .trim()
                .to_string();
            if sections.iter().any(|(s, _)| *s == name) {
                return err(format!("duplicate section [{name}]"));
            }
            sections.push((name, Vec::new()));
            current = Some(sections.len() - 1);
        } else if let Some((key, value)) = line.split_once('=') {
            let idx = current.ok_or_else(|| {
                ConfigError(format!("line {}: key before any section", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if sections[idx].1.iter().any(|(k, _)| *k == key) {
                return err(format!("duplicate key {key} in [{}]", sections[idx].0));
            }
            sections[idx].1.push((key, value.trim().to_string()));
        } else {
            return err(format!("line {}: expected key = value", lineno + 1));
        }
    }
    Ok(sections)
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>()
        .map_err(|_| ConfigError(format!("key {key}: {v} is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse::<usize>()
        .map_err(|_| ConfigError(format!("key {key}: {v} is not a count")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64, ConfigError> {
    v.parse::<u64>()
        .map_err(|_| ConfigError(format!("key {key}: {v} is not a seed")))
}

fn parse_choice(key: &str, v: &str, allowed: &[&str]) -> Result<String, ConfigError> {
    if allowed.contains(&v) {
        Ok(v.to_string())
    } else {
        err(format!("key {key}: {v} is not one of {allowed:?}"))
    }
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_f64(key, s.trim())).collect()
}

/// Flattens the resolved config to an ordered key map, handy for tests.
pub fn flatten(cfg: &RunConfig) -> BTreeMap<String, String> {
    let json = serde_json::to_value(cfg).expect("config serializes");
    let mut out = BTreeMap::new();
    if let serde_json::Value::Object(sections) = json {
        for (section, body) in sections {
            if let serde_json::Value::Object(entries) = body {
                for (key, value) in entries {
                    out.insert(format!("{section}.{key}"), value.to_string());
                }
            }
        }
    }
    out
}

//! Scenario configuration: a JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use btw_core::ReproductionLaw;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    EnvReport,
    #[value(name = "tail-w-m")]
    #[serde(rename = "tail-w-m")]
    TailWM,
    TailMaxl,
    MaxlnConverge,
    NbmCheck,
    TreeEquivalence,
    SpineCheck,
    PijTable,
    MtoCheck,
    LadderReport,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::EnvReport => "env-report",
            Scenario::TailWM => "tail-w-m",
            Scenario::TailMaxl => "tail-maxl",
            Scenario::MaxlnConverge => "maxln-converge",
            Scenario::NbmCheck => "nbm-check",
            Scenario::TreeEquivalence => "tree-equivalence",
            Scenario::SpineCheck => "spine-check",
            Scenario::PijTable => "pij-table",
            Scenario::MtoCheck => "mto-check",
            Scenario::LadderReport => "ladder-report",
        }
    }

    fn default_samples(self) -> u64 {
        match self {
            Scenario::EnvReport | Scenario::PijTable => 0,
            Scenario::TailWM => 20_000,
            Scenario::TailMaxl => 100_000,
            Scenario::MaxlnConverge => 1_000,
            Scenario::NbmCheck | Scenario::TreeEquivalence => 100_000,
            Scenario::SpineCheck => 10_000,
            Scenario::MtoCheck => 1_000_000,
            Scenario::LadderReport => 100_000,
        }
    }

    fn needs_law(self) -> bool {
        self != Scenario::NbmCheck
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Simulation budgets. Unset fields fall back to the library defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Caps {
    pub max_steps: Option<u64>,
    pub max_nodes: Option<u64>,
    /// Pruning barrier for environment exploration, in units of V.
    pub barrier: Option<f64>,
    /// Generations explored at most when computing Ŵ∞ and M̂_e.
    pub depth_cap: Option<u32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    /// Excursions per walk run.
    pub n_excursions: Option<u64>,
    /// Hitting levels A for K_A.
    pub a_list: Option<Vec<u64>>,
    /// Samples per K_A estimate.
    pub ka_samples: Option<u64>,
    pub i_max: Option<u64>,
    pub j_max: Option<u64>,
    /// Depth at which the W_n policy is truncated.
    pub t_trunc: Option<u32>,
    /// Entry types for nbm-check.
    pub k_list: Option<Vec<u64>>,
    /// Quenched stars (children weights) for nbm-check.
    pub stars: Option<Vec<Vec<f64>>>,
    /// Scale factors a in P(W∞ ≥ a x, M_e ≥ x).
    pub scales: Option<Vec<f64>>,
    pub grid_points: Option<usize>,
    /// Survival level where the tail fit starts.
    pub fit_start: Option<f64>,
    /// Exceedances required at the top of the tail fit.
    pub fit_min_exceedances: Option<usize>,
    /// Largest x of the ladder grid.
    pub x_max: Option<f64>,
    /// Tilt exponent of the ladder walk; κ when unset.
    pub tilt_exponent: Option<f64>,
    /// "tree" (local-time Galton–Watson tree) or "walk".
    pub method: Option<String>,
    /// M̂_e samples drawn per max/n sample.
    pub me_ratio: Option<u64>,
    /// c*_κ for the maxln-converge self-consistency check.
    pub c_star: Option<f64>,
    /// Moment exponent for the negative multinomial probe.
    pub alpha: Option<f64>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: Option<Scenario>,
    pub law: Option<String>,
    pub samples: Option<u64>,
    pub seed: Option<u64>,
    pub replicas: Option<u64>,
    pub caps: Caps,
    pub params: Params,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
    pub plot: Option<PathBuf>,
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub config: Option<PathBuf>,
    pub law: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub replicas: Option<u64>,
    pub samples: Option<u64>,
    pub format: Option<Format>,
    pub plot: Option<PathBuf>,
}

/// Fully resolved run settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub law_source: Option<String>,
    pub law: Option<ReproductionLaw>,
    /// Samples per replica.
    pub samples: u64,
    pub seed: u64,
    pub replicas: u64,
    pub caps: Caps,
    pub params: Params,
    pub format: Format,
    pub out: PathBuf,
    pub plot: Option<PathBuf>,
}

impl RunConfig {
    pub fn total_samples(&self) -> u64 {
        self.samples * self.replicas
    }

    pub fn law(&self) -> &ReproductionLaw {
        self.law.as_ref().expect("scenario requires a law")
    }
}

fn bad(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config { field: field.to_string(), message: message.into() }
}

pub fn load_config_file(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| bad("config", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        // serde names unknown or mistyped fields in its message
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("field"))
            .unwrap_or("config")
            .to_string();
        CliError::Config { field, message: format!("{}: {msg}", path.display()) }
    })
}

/// Builtin names `ENV-A`, `ENV-B`, `ENV-C` (any case) or a JSON law file.
pub fn load_law(name: &str, base: Option<&Path>) -> Result<ReproductionLaw, CliError> {
    match name.to_ascii_uppercase().as_str() {
        "ENV-A" => return Ok(ReproductionLaw::env_a()),
        "ENV-B" => return Ok(ReproductionLaw::env_b()),
        "ENV-C" => return Ok(ReproductionLaw::env_c()),
        _ => {}
    }
    let mut path = PathBuf::from(name);
    if path.is_relative() {
        if let Some(base) = base {
            path = base.join(path);
        }
    }
    ReproductionLaw::from_path(&path).map_err(|e| bad("law", format!("{}: {e}", path.display())))
}

pub fn resolve(scenario: Scenario, flags: Flags) -> Result<RunConfig, CliError> {
    let (file, base) = match &flags.config {
        Some(p) => (load_config_file(p)?, p.parent().map(Path::to_path_buf)),
        None => (ScenarioConfig::default(), None),
    };
    if let Some(s) = file.scenario {
        if s != scenario {
            return Err(bad("scenario", format!("config is for {}, command is {}", s.name(), scenario.name())));
        }
    }
    // the law named on the command line is relative to the working directory
    let (law_source, law_base) = match (flags.law, file.law) {
        (Some(l), _) => (Some(l), None),
        (None, Some(l)) => (Some(l), base.clone()),
        (None, None) => (None, None),
    };
    let law = match (&law_source, scenario.needs_law()) {
        (Some(src), _) => Some(load_law(src, law_base.as_deref())?),
        (None, true) => return Err(bad("law", "no law given; pass --law PATH or set `law` in the config")),
        (None, false) => None,
    };
    let samples = flags.samples.or(file.samples).unwrap_or(scenario.default_samples());
    let replicas = flags.replicas.or(file.replicas).unwrap_or(1);
    let cfg = RunConfig {
        scenario,
        law_source,
        law,
        samples,
        seed: flags.seed.or(file.seed).unwrap_or(1),
        replicas,
        caps: file.caps,
        params: file.params,
        format: flags.format.or(file.format).unwrap_or_default(),
        out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("btw-out")),
        plot: flags.plot.or(file.plot),
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.replicas == 0 {
        return Err(bad("replicas", "must be at least 1"));
    }
    if cfg.samples == 0 && cfg.scenario.default_samples() > 0 {
        return Err(bad("samples", "must be at least 1"));
    }
    let c = &cfg.caps;
    if c.max_steps == Some(0) {
        return Err(bad("caps.max_steps", "must be positive"));
    }
    if c.max_nodes.is_some_and(|m| m < 2) {
        return Err(bad("caps.max_nodes", "must be at least 2"));
    }
    if c.barrier.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
        return Err(bad("caps.barrier", "must be a positive finite number"));
    }
    if c.depth_cap == Some(0) {
        return Err(bad("caps.depth_cap", "must be positive"));
    }
    let p = &cfg.params;
    if p.n_excursions == Some(0) {
        return Err(bad("params.n_excursions", "must be at least 1"));
    }
    if let Some(a) = &p.a_list {
        if a.is_empty() || a.iter().any(|&a| a < 2) {
            return Err(bad("params.a_list", "needs at least one level, each >= 2"));
        }
    }
    if p.ka_samples == Some(0) {
        return Err(bad("params.ka_samples", "must be at least 1"));
    }
    if p.i_max == Some(0) {
        return Err(bad("params.i_max", "must be at least 1"));
    }
    if p.t_trunc == Some(0) {
        return Err(bad("params.t_trunc", "must be positive"));
    }
    if let Some(k) = &p.k_list {
        if k.is_empty() || k.contains(&0) {
            return Err(bad("params.k_list", "needs at least one entry type, each >= 1"));
        }
    }
    if let Some(stars) = &p.stars {
        if stars.is_empty() || stars.iter().any(|s| s.is_empty() || s.iter().any(|&w| !(w > 0.0 && w.is_finite()))) {
            return Err(bad("params.stars", "each star needs positive finite weights"));
        }
    }
    if let Some(s) = &p.scales {
        if s.is_empty() || s.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return Err(bad("params.scales", "needs nonnegative finite values"));
        }
    }
    if p.grid_points.is_some_and(|g| g < 2) {
        return Err(bad("params.grid_points", "must be at least 2"));
    }
    if p.fit_start.is_some_and(|s| !(s > 0.0 && s < 1.0)) {
        return Err(bad("params.fit_start", "must lie in (0, 1)"));
    }
    if p.fit_min_exceedances == Some(0) {
        return Err(bad("params.fit_min_exceedances", "must be at least 1"));
    }
    if p.x_max.is_some_and(|x| !(x > 0.0 && x.is_finite())) {
        return Err(bad("params.x_max", "must be positive and finite"));
    }
    if p.tilt_exponent.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
        return Err(bad("params.tilt_exponent", "must be positive and finite"));
    }
    if let Some(m) = &p.method {
        if m != "tree" && m != "walk" {
            return Err(bad("params.method", format!("unknown method {m:?}; use \"tree\" or \"walk\"")));
        }
    }
    if p.me_ratio == Some(0) {
        return Err(bad("params.me_ratio", "must be at least 1"));
    }
    if p.c_star.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
        return Err(bad("params.c_star", "must be positive and finite"));
    }
    if p.alpha.is_some_and(|a| !(a >= 1.0 && a.is_finite())) {
        return Err(bad("params.alpha", "must be finite and >= 1"));
    }
    Ok(())
}

//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ridematch::mdp::{Solver, ViParams};
use ridematch::network::{EconParams, HexLayout};
use ridematch::policies::Policy;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub econ: EconConfig,
    pub experiment: RunConfig,
    #[serde(default)]
    pub index: IndexConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NetworkConfig {
    Uniform {
        /// Per-type arrival rate, customers per minute.
        arrival_rate: f64,
        #[serde(default)]
        layout: Option<LayoutConfig>,
    },
    Real {
        demand: PathBuf,
        centroids: PathBuf,
        profile: PathBuf,
        /// Distance units per centroid-file unit.
        distance_scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    pub columns: usize,
    pub rows: usize,
    pub cell_radius: f64,
    pub source_offset: f64,
}

impl From<LayoutConfig> for HexLayout {
    fn from(l: LayoutConfig) -> Self {
        HexLayout {
            columns: l.columns,
            rows: l.rows,
            cell_radius: l.cell_radius,
            source_offset: l.source_offset,
        }
    }
}

/// Physics parameters; all required. The penalty factor comes from the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconConfig {
    pub b: f64,
    pub gamma: f64,
    pub q: f64,
    pub upsilon: f64,
    pub beta: f64,
    pub n_max: usize,
}

impl EconConfig {
    pub fn at_zeta(&self, zeta: f64) -> EconParams {
        EconParams {
            b: self.b,
            gamma: self.gamma,
            q: self.q,
            upsilon: self.upsilon,
            beta: self.beta,
            zeta,
            n_max: self.n_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub zeta: Vec<f64>,
    pub policies: Vec<String>,
    /// Simulated minutes per replication.
    pub horizon: f64,
    /// Defaults to 10% of the horizon on the uniform network and 0 on a
    /// real (time-varying) one.
    #[serde(default)]
    pub warmup: Option<f64>,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    pub base_seed: u64,
    #[serde(default = "default_true")]
    pub include_reneged_delays: bool,
}

fn default_reps() -> usize {
    30
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Exact,
    ValueIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexConfig {
    pub solver: SolverKind,
    pub beta: f64,
    pub sigma: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        let p = ViParams::default();
        Self {
            solver: SolverKind::Exact,
            beta: p.beta,
            sigma: p.sigma,
        }
    }
}

impl IndexConfig {
    pub fn solver(&self) -> Solver {
        match self.solver {
            SolverKind::Exact => Solver::Exact,
            SolverKind::ValueIteration => Solver::ValueIteration(ViParams {
                beta: self.beta,
                sigma: self.sigma,
                ..ViParams::default()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub sha256: String,
    pub policies: Vec<Policy>,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn warmup(&self) -> f64 {
        let e = &self.config.experiment;
        e.warmup.unwrap_or(match self.config.network {
            NetworkConfig::Uniform { .. } => 0.1 * e.horizon,
            NetworkConfig::Real { .. } => 0.0,
        })
    }
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_config(&text, base_dir)
}

pub fn parse_config(text: &str, base_dir: PathBuf) -> Result<LoadedConfig, CliError> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    let sha256 = hex::encode(Sha256::digest(text.as_bytes()));
    let policies = validate(&config)?;
    let loaded = LoadedConfig {
        config,
        base_dir,
        sha256,
        policies,
    };
    if let NetworkConfig::Real {
        demand,
        centroids,
        profile,
        ..
    } = &loaded.config.network
    {
        for p in [demand, centroids, profile] {
            let full = loaded.resolve(p);
            if !full.is_file() {
                return Err(CliError::Config(format!("data file {} not found", full.display())));
            }
        }
    }
    Ok(loaded)
}

fn validate(c: &ExperimentConfig) -> Result<Vec<Policy>, CliError> {
    let bad = |m: String| Err(CliError::Config(m));
    let e = &c.experiment;
    if e.policies.is_empty() {
        return bad("experiment.policies is empty".into());
    }
    let mut policies = Vec::new();
    for name in &e.policies {
        let p: Policy = name.parse().map_err(|e: ridematch::Error| CliError::Config(e.to_string()))?;
        if policies.contains(&p) {
            return bad(format!("policy {p} listed twice"));
        }
        policies.push(p);
    }
    if e.zeta.is_empty() {
        return bad("experiment.zeta is empty".into());
    }
    if let Some(z) = e.zeta.iter().find(|z| !(**z > 0.0 && z.is_finite())) {
        return bad(format!("zeta values must be positive, got {z}"));
    }
    if !(e.horizon > 0.0 && e.horizon.is_finite()) {
        return bad(format!("horizon must be positive, got {}", e.horizon));
    }
    if let Some(w) = e.warmup {
        if !(w >= 0.0 && w < e.horizon) {
            return bad(format!("warmup must lie in [0, horizon), got {w}"));
        }
    }
    if e.n_reps < 2 {
        return bad("n_reps must be at least 2".into());
    }
    match &c.network {
        NetworkConfig::Uniform { arrival_rate, .. } => {
            if !(*arrival_rate >= 0.0 && arrival_rate.is_finite()) {
                return bad(format!("arrival_rate must be nonnegative, got {arrival_rate}"));
            }
        }
        NetworkConfig::Real { distance_scale, .. } => {
            if !(*distance_scale > 0.0) {
                return bad(format!("distance_scale must be positive, got {distance_scale}"));
            }
        }
    }
    let ix = &c.index;
    if !(ix.beta > 0.0 && ix.beta < 1.0) || !(ix.sigma > 0.0) {
        return bad(format!("index beta must lie in (0,1) and sigma be positive, got ({}, {})", ix.beta, ix.sigma));
    }
    c.econ
        .at_zeta(e.zeta[0])
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(policies)
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIFORM: &str = r#"
[network]
kind = "uniform"
arrival_rate = 0.3

[econ]
b = 1.0
gamma = 1.7
q = 40.0
upsilon = 0.03
beta = 0.09
n_max = 5

[experiment]
zeta = [1.0, 5.0]
policies = ["bi", "jsq"]
horizon = 1000.0
base_seed = 7

[output]
dir = "out"
"#;

    fn parse(s: &str) -> Result<LoadedConfig, CliError> {
        parse_config(s, PathBuf::from("."))
    }

    #[test]
    fn uniform_config_parses_with_defaults() {
        let c = parse(UNIFORM).unwrap();
        assert_eq!(c.config.experiment.n_reps, 30);
        assert_eq!(c.warmup(), 100.0);
        assert_eq!(c.policies, vec![Policy::Bi, Policy::Jsq]);
        assert_eq!(c.config.index.solver, SolverKind::Exact);
    }

    #[test]
    fn empty_policy_list_rejected() {
        let s = UNIFORM.replace(r#"["bi", "jsq"]"#, "[]");
        assert!(matches!(parse(&s), Err(CliError::Config(_))));
    }

    #[test]
    fn missing_physics_parameter_rejected() {
        let s = UNIFORM.replace("gamma = 1.7\n", "");
        assert!(matches!(parse(&s), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_key_rejected() {
        let s = UNIFORM.replace("n_max = 5", "n_max = 5\nzeta = 7.0");
        assert!(matches!(parse(&s), Err(CliError::Config(_))));
    }

    #[test]
    fn nonpositive_zeta_rejected() {
        let s = UNIFORM.replace("[1.0, 5.0]", "[1.0, 0.0]");
        assert!(matches!(parse(&s), Err(CliError::Config(_))));
    }

    #[test]
    fn missing_data_file_rejected() {
        let s = r#"
[network]
kind = "real"
demand = "nope.csv"
centroids = "nope.csv"
profile = "nope.csv"
distance_scale = 0.75
"#
        .to_string()
            + &UNIFORM[UNIFORM.find("[econ]").unwrap()..];
        let err = parse(&s).unwrap_err();
        assert!(err.to_string().contains("not found"), "{err}");
    }
}

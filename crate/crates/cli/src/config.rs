//! Run configuration: the scenario plus one section per pipeline stage.
//!
//! A config file may name a `preset`; the file's own keys are then merged
//! over that preset, table by table.

use std::path::Path;

use fraccount::synthworld::{CensusConfig, DynamicsConfig, RegisterConfig, ScenarioConfig, SurveyConfig, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub world: WorldConfig,
    pub register: RegisterConfig,
    pub census: CensusConfig,
    pub dynamics: DynamicsConfig,
    pub survey: SurveyConfig,
    pub initiate: InitiateSection,
    pub rolling: RollingSection,
    pub tree: TreeSection,
    pub residency: ResidencySection,
    pub audit: AuditSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitiateSection {
    /// `none`, `subset`, `hypercube` or `sample`.
    pub theta_method: String,
    /// Sampling fraction of the non-core register for the `sample` option.
    pub sample_fraction: f64,
    pub benchmark: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollingSection {
    pub epochs: u32,
    /// Random-walk s.d. added to the prior covariance before each roll.
    pub drift_sd: f64,
    /// Benchmark to fresh population estimates every this many epochs (0 = never).
    pub benchmark_every: u32,
    /// Propagate coefficient uncertainty by drawing β once per epoch.
    pub sample_beta: bool,
    pub tree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSection {
    pub hoeffding_delta: f64,
    pub min_leaf: usize,
    pub max_depth: usize,
    /// Upper bound `B` on `Δ_M` (primary mode).
    pub bound: f64,
    pub eta: f64,
    pub half_life: f64,
    /// `primary` or `dual`.
    pub mode: String,
    /// Lower bound on `Δε` in dual mode.
    pub min_delta_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidencySection {
    pub d: f64,
    pub g: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    /// `srs` or `stratified` (core / non-core strata).
    pub design: String,
    pub n: usize,
    pub strata_sizes: Vec<usize>,
    pub alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_scenario(ScenarioConfig::default())
    }
}

impl Default for InitiateSection {
    fn default() -> Self {
        Self { theta_method: "subset".into(), sample_fraction: 0.05, benchmark: true }
    }
}

impl Default for RollingSection {
    fn default() -> Self {
        Self { epochs: 5, drift_sd: 0.05, benchmark_every: 0, sample_beta: false, tree: true }
    }
}

impl Default for TreeSection {
    fn default() -> Self {
        Self {
            hoeffding_delta: 1e-6,
            min_leaf: 20,
            max_depth: 6,
            bound: 0.05,
            eta: 0.05,
            half_life: 2.0,
            mode: "primary".into(),
            min_delta_eps: 0.0,
        }
    }
}

impl Default for ResidencySection {
    fn default() -> Self {
        Self { d: 0.7, g: 0.3, tau: 0.5 }
    }
}

impl Default for AuditSection {
    fn default() -> Self {
        Self { design: "srs".into(), n: 200, strata_sizes: vec![100, 100], alpha: 0.05 }
    }
}

impl RunConfig {
    pub fn from_scenario(s: ScenarioConfig) -> Self {
        Self {
            name: s.name,
            seed: s.seed,
            world: s.world,
            register: s.register,
            census: s.census,
            dynamics: s.dynamics,
            survey: s.survey,
            initiate: InitiateSection::default(),
            rolling: RollingSection::default(),
            tree: TreeSection::default(),
            residency: ResidencySection::default(),
            audit: AuditSection::default(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        ScenarioConfig::preset(name).map(Self::from_scenario)
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            name: self.name.clone(),
            seed: self.seed,
            world: self.world.clone(),
            register: self.register.clone(),
            census: self.census.clone(),
            dynamics: self.dynamics.clone(),
            survey: self.survey.clone(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(one_line(&e)))?;
        let base = match user.remove("preset") {
            Some(toml::Value::String(p)) => {
                Self::preset(&p).ok_or_else(|| CliError::Config(format!("unknown preset {p:?}")))?
            }
            Some(_) => return Err(CliError::Config("preset must be a string".into())),
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(one_line(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scenario().validate().map_err(|e| CliError::Config(e.to_string()))?;
        let bad = |m: String| Err(CliError::Config(m));
        if !["none", "subset", "hypercube", "sample"].contains(&self.initiate.theta_method.as_str()) {
            return bad(format!("initiate.theta_method {:?} is not one of none, subset, hypercube, sample", self.initiate.theta_method));
        }
        if !(self.initiate.sample_fraction > 0.0 && self.initiate.sample_fraction <= 1.0) {
            return bad("initiate.sample_fraction must be in (0, 1]".into());
        }
        if !(self.rolling.drift_sd >= 0.0) {
            return bad("rolling.drift_sd must be non-negative".into());
        }
        if !["primary", "dual"].contains(&self.tree.mode.as_str()) {
            return bad(format!("tree.mode {:?} is not primary or dual", self.tree.mode));
        }
        if !(self.tree.bound >= 0.0) {
            return bad("tree.bound must be non-negative".into());
        }
        let r = &self.residency;
        if !(r.d >= 0.0 && r.g >= 0.0 && r.d + r.g <= 1.0) {
            return bad(format!("residency rates d = {}, g = {} need d, g >= 0 and d + g <= 1", r.d, r.g));
        }
        if !["srs", "stratified"].contains(&self.audit.design.as_str()) {
            return bad(format!("audit.design {:?} is not srs or stratified", self.audit.design));
        }
        if self.audit.design == "stratified" && self.audit.strata_sizes.len() != 2 {
            return bad("audit.strata_sizes needs two entries (core, non-core)".into());
        }
        if !(self.audit.alpha > 0.0 && self.audit.alpha < 1.0) {
            return bad("audit.alpha must be in (0, 1)".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn one_line(e: &toml::de::Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_overrides() {
        let c = RunConfig::from_toml_str("preset = \"latvia-like\"\nseed = 9\n[world]\npopulation = 50\n").unwrap();
        assert_eq!(c.name, "latvia-like");
        assert_eq!(c.seed, 9);
        assert_eq!(c.world.population, 50);
        assert_eq!(c.world.localities, 4);
        assert!((c.register.erroneous_rate - (1.0 - 1.0 / 1.07)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(RunConfig::from_toml_str("[world]\npopulaton = 5\n"), Err(CliError::Config(_))));
        assert!(RunConfig::from_toml_str("[register]\nerroneous_rate = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("preset = \"nowhere\"\n").is_err());
        assert!(RunConfig::from_toml_str("[residency]\nd = 0.8\ng = 0.3\n").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml_str(&a.to_toml()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 2, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything that determines a synthetic world, its register and its
/// observation processes. Identical configs give bit-identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub world: WorldConfig,
    pub register: RegisterConfig,
    pub census: CensusConfig,
    pub dynamics: DynamicsConfig,
    pub survey: SurveyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Target in-scope population size `N`.
    pub population: usize,
    pub localities: usize,
    pub addresses_per_locality: u32,
    pub mean_family_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    /// Expected share of out-of-scope records in the register.
    pub erroneous_rate: f64,
    /// Probability an in-scope person is absent from the register.
    pub missing_rate: f64,
    /// Marginal probability that the true address is not listed.
    pub displacement_rate: f64,
    /// Relative tilt of the displacement rate between the two `z2` groups.
    pub displacement_tilt: f64,
    /// Mean sign-of-life multiplicity `q`.
    pub mean_sol_addresses: f64,
    /// Probability a decoy or displaced listing sits in a neighbouring locality.
    pub neighbour_prob: f64,
    /// Probability a decoy sits in the person's own locality.
    pub same_locality_prob: f64,
    /// Generating coefficients for `source_a, source_b, recency`.
    pub address_coefficients: [f64; 3],
    pub attribute_noise_sd: f64,
    /// Number of administrative sources behind the sign-of-life score.
    pub sol_sources: usize,
    /// Mean shift of `z1` for out-of-scope records.
    pub ghost_z1_shift: f64,
    /// `P(z2 = 1)` for out-of-scope records (0.5 for in-scope persons).
    pub ghost_z2_prob: f64,
    /// Sign-of-life activity of out-of-scope records relative to residents.
    pub ghost_activity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CensusConfig {
    pub link_rate: f64,
    /// Coefficient of variation of the multiplicative lognormal census noise.
    pub estimate_cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub move_rate: f64,
    pub birth_rate: f64,
    pub death_rate: f64,
    pub immigration_rate: f64,
    pub emigration_rate: f64,
    /// Probability the register picks up a move, death or emigration in the epoch it happens.
    pub register_update_rate: f64,
    /// Random-walk step s.d. of the address coefficients per epoch.
    pub drift_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurveyConfig {
    /// Coverage-survey inclusion probability per register record and epoch.
    pub coverage_fraction: f64,
    /// Optional per-stratum rates `[core, non-core]`; overrides `coverage_fraction`.
    pub stratum_rates: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "basic".into(),
            seed: 1,
            world: WorldConfig::default(),
            register: RegisterConfig::default(),
            census: CensusConfig::default(),
            dynamics: DynamicsConfig::default(),
            survey: SurveyConfig::default(),
        }
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { population: 1000, localities: 4, addresses_per_locality: 400, mean_family_size: 2.0 }
    }
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            erroneous_rate: 0.05,
            missing_rate: 0.0,
            displacement_rate: 0.02,
            displacement_tilt: 0.5,
            mean_sol_addresses: 1.6,
            neighbour_prob: 0.5,
            same_locality_prob: 0.2,
            address_coefficients: [1.0, 0.6, 1.5],
            attribute_noise_sd: 1.0,
            sol_sources: 27,
            ghost_z1_shift: 1.5,
            ghost_z2_prob: 0.15,
            ghost_activity: 0.1,
        }
    }
}

impl Default for CensusConfig {
    fn default() -> Self {
        Self { link_rate: 0.9, estimate_cv: 0.005 }
    }
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            move_rate: 0.05,
            birth_rate: 0.01,
            death_rate: 0.01,
            immigration_rate: 0.005,
            emigration_rate: 0.005,
            register_update_rate: 0.7,
            drift_sd: 0.05,
        }
    }
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self { coverage_fraction: 0.05, stratum_rates: Vec::new() }
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {v} is outside [0, 1]")))
    }
}

impl ScenarioConfig {
    /// Named scenario presets.
    ///
    /// `latvia-like` sets the erroneous rate so that the register count
    /// exceeds the true population by 7% (`|P|/N = 1/(1 - e) = 1.07`).
    /// `estonia-like` keeps 27 sign-of-life sources for the residency index.
    pub fn preset(name: &str) -> Option<Self> {
        let mut cfg = Self::default();
        match name {
            "basic" => {}
            "latvia-like" => {
                cfg.register.erroneous_rate = 1.0 - 1.0 / 1.07;
                cfg.register.missing_rate = 0.0;
            }
            "estonia-like" => {
                cfg.register.erroneous_rate = 0.03;
                cfg.register.sol_sources = 27;
                cfg.dynamics.emigration_rate = 0.01;
                cfg.dynamics.register_update_rate = 0.5;
            }
            _ => return None,
        }
        cfg.name = name.into();
        Some(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.register;
        for (n, v) in [
            ("register.erroneous_rate", r.erroneous_rate),
            ("register.missing_rate", r.missing_rate),
            ("register.displacement_rate", r.displacement_rate),
            ("register.neighbour_prob", r.neighbour_prob),
            ("register.same_locality_prob", r.same_locality_prob),
            ("register.ghost_z2_prob", r.ghost_z2_prob),
            ("register.ghost_activity", r.ghost_activity),
            ("census.link_rate", self.census.link_rate),
            ("dynamics.move_rate", self.dynamics.move_rate),
            ("dynamics.birth_rate", self.dynamics.birth_rate),
            ("dynamics.death_rate", self.dynamics.death_rate),
            ("dynamics.immigration_rate", self.dynamics.immigration_rate),
            ("dynamics.emigration_rate", self.dynamics.emigration_rate),
            ("dynamics.register_update_rate", self.dynamics.register_update_rate),
            ("survey.coverage_fraction", self.survey.coverage_fraction),
        ] {
            check_rate(n, v)?;
        }
        for (i, &v) in self.survey.stratum_rates.iter().enumerate() {
            check_rate(&format!("survey.stratum_rates[{i}]"), v)?;
        }
        if !self.survey.stratum_rates.is_empty() && self.survey.stratum_rates.len() != 2 {
            return Err(Error::InvalidConfig("survey.stratum_rates must list [core, non-core]".into()));
        }
        if r.erroneous_rate >= 1.0 {
            return Err(Error::InvalidConfig("register.erroneous_rate must be below 1".into()));
        }
        if !(0.0..=1.0).contains(&r.displacement_tilt) || r.displacement_rate * (1.0 + r.displacement_tilt) > 1.0 {
            return Err(Error::InvalidConfig("displacement rate and tilt must keep both group rates in [0, 1]".into()));
        }
        if r.neighbour_prob + r.same_locality_prob > 1.0 {
            return Err(Error::InvalidConfig("neighbour_prob + same_locality_prob exceeds 1".into()));
        }
        if self.dynamics.death_rate + self.dynamics.emigration_rate + self.dynamics.move_rate > 1.0 {
            return Err(Error::InvalidConfig("death, emigration and move rates must sum to at most 1".into()));
        }
        if !(r.mean_sol_addresses >= 1.0) {
            return Err(Error::InvalidConfig("register.mean_sol_addresses must be at least 1".into()));
        }
        if !(self.world.mean_family_size >= 1.0) {
            return Err(Error::InvalidConfig("world.mean_family_size must be at least 1".into()));
        }
        if self.world.localities == 0 {
            return Err(Error::InvalidConfig("world.localities must be positive".into()));
        }
        if self.world.addresses_per_locality < 6 {
            return Err(Error::InvalidConfig("world.addresses_per_locality must be at least 6".into()));
        }
        if r.sol_sources == 0 {
            return Err(Error::InvalidConfig("register.sol_sources must be positive".into()));
        }
        for (n, v) in [
            ("register.attribute_noise_sd", r.attribute_noise_sd),
            ("census.estimate_cv", self.census.estimate_cv),
            ("dynamics.drift_sd", self.dynamics.drift_sd),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{n} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

use rand::Rng;

use super::generate::std_normal;
use super::{PersonRecord, WorldTruth};
use crate::error::{Error, Result};
use crate::features::{covariate_cell, CELLS};

/// Census-time observation: the linked core and the census estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusOutcome {
    /// Register with core records flagged and labelled.
    pub pd: Vec<PersonRecord>,
    /// Census enumerations `N_L`.
    pub enumerations: usize,
    /// Linked enumerations `N_c = |P_c|`.
    pub linked: usize,
    /// `N̂_i` per locality.
    pub estimates: Vec<f64>,
    /// Estimated in-scope population per covariate cell.
    pub hypercube: Vec<f64>,
}

impl CensusOutcome {
    /// National estimate `N̂ = Σ N̂_i`.
    pub fn national_estimate(&self) -> f64 {
        self.estimates.iter().sum()
    }

    pub fn core_indices(&self) -> Vec<usize> {
        self.pd.iter().enumerate().filter(|(_, r)| r.core).map(|(i, _)| i).collect()
    }
}

/// Enumerates every in-scope person, links each in-scope register record to
/// its enumeration with probability `link_rate`, and perturbs the true
/// locality counts by multiplicative lognormal noise with CV `estimate_cv`.
pub fn simulate_census<R: Rng + ?Sized>(
    world: &WorldTruth,
    pd: &[PersonRecord],
    link_rate: f64,
    estimate_cv: f64,
    rng: &mut R,
) -> Result<CensusOutcome> {
    if !(0.0..=1.0).contains(&link_rate) {
        return Err(Error::InvalidArgument(format!("link_rate {link_rate} outside [0, 1]")));
    }
    if !(estimate_cv >= 0.0) {
        return Err(Error::InvalidArgument("estimate_cv must be non-negative".into()));
    }
    let mut out = pd.to_vec();
    let mut linked = 0;
    for r in &mut out {
        let label = world.truth_label(r);
        if label.in_scope() && rng.random_bool(link_rate) {
            r.core = true;
            r.label = Some(label);
            r.label_epoch = Some(world.time);
            linked += 1;
        }
    }
    let sigma = (1.0 + estimate_cv * estimate_cv).ln().sqrt();
    let mut noisy = |n: usize| {
        if sigma == 0.0 {
            n as f64
        } else {
            n as f64 * (sigma * std_normal(rng) - 0.5 * sigma * sigma).exp()
        }
    };
    let estimates = world.true_counts().into_iter().map(&mut noisy).collect();
    let mut cells = vec![0usize; CELLS];
    for p in world.persons.iter().filter(|p| p.alive_in_scope) {
        cells[covariate_cell(&p.covariates)] += 1;
    }
    let hypercube = cells.into_iter().map(&mut noisy).collect();
    Ok(CensusOutcome { pd: out, enumerations: world.population(), linked, estimates, hypercube })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{derive_pd, generate_world, replicate_rng, ScenarioConfig};

    fn setup(n: usize) -> (ScenarioConfig, WorldTruth, Vec<PersonRecord>) {
        let mut cfg = ScenarioConfig::default();
        cfg.world.population = n;
        let w = generate_world(&cfg, &mut replicate_rng(21, 0)).unwrap();
        let pd = derive_pd(&w, &cfg, &mut replicate_rng(21, 1)).unwrap();
        (cfg, w, pd)
    }

    #[test]
    fn full_linkage_without_noise_recovers_truth() {
        let (_, w, pd) = setup(2000);
        let c = simulate_census(&w, &pd, 1.0, 0.0, &mut replicate_rng(1, 2)).unwrap();
        let in_scope = pd.iter().filter(|r| w.truth_label(r).in_scope()).count();
        assert_eq!(c.linked, in_scope);
        for r in &c.pd {
            assert_eq!(r.core, w.truth_label(r).in_scope());
        }
        let truth: Vec<f64> = w.true_counts().into_iter().map(|n| n as f64).collect();
        assert_eq!(c.estimates, truth);
    }

    #[test]
    fn zero_linkage_gives_empty_core() {
        let (_, w, pd) = setup(500);
        let c = simulate_census(&w, &pd, 0.0, 0.0, &mut replicate_rng(1, 2)).unwrap();
        assert_eq!(c.linked, 0);
        assert!(c.core_indices().is_empty());
    }

    #[test]
    fn rejects_invalid_link_rate() {
        let (_, w, pd) = setup(10);
        assert!(simulate_census(&w, &pd, 1.2, 0.0, &mut replicate_rng(1, 2)).is_err());
    }

    #[test]
    fn link_rate_is_binomial() {
        // binomial oracle: |P_c| ~ Bin(eligible, 0.9)
        let (_, w, pd) = setup(10_000);
        let eligible = pd.iter().filter(|r| w.truth_label(r).in_scope()).count() as f64;
        let c = simulate_census(&w, &pd, 0.9, 0.005, &mut replicate_rng(4, 2)).unwrap();
        let se = (eligible * 0.9 * 0.1).sqrt();
        assert!((c.linked as f64 - 0.9 * eligible).abs() < 3.0 * se);
    }
}

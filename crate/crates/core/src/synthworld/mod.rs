//! Synthetic ground truth, imperfect registers derived from it, and the
//! observation processes (census linkage, coverage survey, register updates)
//! that the estimators consume.
//!
//! All generators are pure functions of their inputs plus an explicit RNG, so
//! replicate worlds can be produced concurrently from [`replicate_rng`]
//! streams.

mod census;
mod config;
mod dynamics;
mod export;
mod generate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use census::{simulate_census, CensusOutcome};
pub use config::{CensusConfig, DynamicsConfig, RegisterConfig, ScenarioConfig, SurveyConfig, WorldConfig};
pub use dynamics::{step_world, EventLog, MoveEvent, StepOutcome, SurveyObservation, UpdateBatch};
pub use export::{write_pd_csv, write_world_csv};
pub use generate::{derive_pd, generate_world, placement_truth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PersonId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AddressId(pub u32);

/// Locality `i` owns the contiguous address block `[first, first + len)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Locality {
    pub index: usize,
    pub first_address: u32,
    pub n_addresses: u32,
}

impl Locality {
    pub fn contains(&self, a: AddressId) -> bool {
        a.0 >= self.first_address && a.0 - self.first_address < self.n_addresses
    }
}

/// Address-to-locality lookup for the partition `A_1..A_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalityMap {
    pub localities: usize,
    pub addresses_per_locality: u32,
}

impl LocalityMap {
    pub fn new(localities: usize, addresses_per_locality: u32) -> Self {
        Self { localities, addresses_per_locality }
    }

    pub fn locality_of(&self, a: AddressId) -> Option<usize> {
        let i = (a.0 / self.addresses_per_locality) as usize;
        (i < self.localities).then_some(i)
    }

    pub fn len(&self) -> usize {
        self.localities
    }

    pub fn is_empty(&self) -> bool {
        self.localities == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePerson {
    pub id: PersonId,
    /// `k ∈ U`.
    pub alive_in_scope: bool,
    /// `None` exactly when the person is out of scope.
    pub true_address: Option<AddressId>,
    /// `(z1, z2)`.
    pub covariates: Vec<f64>,
    /// Value of interest `ε_k` for social statistics.
    pub attribute: f64,
    pub family: u64,
    /// Last address the person was known at; kept after leaving scope.
    pub last_address: AddressId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub persons: Vec<TruePerson>,
    pub localities: Vec<Locality>,
    pub time: u32,
    /// Generating placement coefficients at `time` (layout of [`crate::features`]).
    pub placement_beta: Vec<f64>,
    pub next_id: u64,
    pub next_family: u64,
}

impl WorldTruth {
    pub fn locality_map(&self) -> LocalityMap {
        let apl = self.localities.first().map_or(1, |l| l.n_addresses);
        LocalityMap::new(self.localities.len(), apl)
    }

    /// `N_i` for every locality.
    pub fn true_counts(&self) -> Vec<usize> {
        let map = self.locality_map();
        let mut counts = vec![0; self.localities.len()];
        for p in self.persons.iter().filter(|p| p.alive_in_scope) {
            if let Some(i) = p.true_address.and_then(|a| map.locality_of(a)) {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn population(&self) -> usize {
        self.persons.iter().filter(|p| p.alive_in_scope).count()
    }

    pub fn person(&self, id: PersonId) -> Option<&TruePerson> {
        // ids are assigned in increasing order and persons are never removed
        self.persons.binary_search_by_key(&id, |p| p.id).ok().map(|i| &self.persons[i])
    }

    /// True label of a register record relative to its current listing.
    pub fn truth_label(&self, record: &PersonRecord) -> Label {
        match self.person(record.id) {
            Some(p) if p.alive_in_scope => match p.true_address {
                Some(a) => record.sol.iter().position(|s| s.address == a).map_or(Label::Displaced, Label::At),
                None => Label::Erroneous,
            },
            _ => Label::Erroneous,
        }
    }
}

/// One sign-of-life address on a register record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolAddress {
    pub address: AddressId,
    pub source_a: bool,
    pub source_b: bool,
    /// In `[0, 1]`, 1 = most recently attested.
    pub recency: f64,
}

/// Observed truth for a record: out of scope, in scope but not at a listed
/// address, or at listed position `j` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Erroneous,
    Displaced,
    At(usize),
}

impl Label {
    pub fn in_scope(self) -> bool {
        !matches!(self, Label::Erroneous)
    }

    pub fn displaced(self) -> bool {
        matches!(self, Label::Displaced)
    }

    pub fn code(self) -> String {
        match self {
            Label::Erroneous => "E".into(),
            Label::Displaced => "D".into(),
            Label::At(j) => (j + 1).to_string(),
        }
    }
}

/// One register (PD) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub id: PersonId,
    /// `a_k`: distinct addresses, `q_k = sol.len() ≥ 1`.
    pub sol: Vec<SolAddress>,
    pub covariates: Vec<f64>,
    /// `ε̂_k`; `None` when the register carries no value.
    pub register_attribute: Option<f64>,
    /// Variance of `ε̂_k − ε_k` (0 for error-free attributes).
    pub attribute_error_var: f64,
    /// Linked to the census at initiation (`k ∈ P_c`).
    pub core: bool,
    pub label: Option<Label>,
    pub label_epoch: Option<u32>,
    pub family: u64,
    /// Covariate cell, also used as the displaced-mass stratum.
    pub cell: usize,
    /// Composite sign-of-life score `X(k, t)` in `[0, 1]`.
    pub sol_score: f64,
}

impl PersonRecord {
    pub fn q(&self) -> usize {
        self.sol.len()
    }

    pub fn has_distinct_addresses(&self) -> bool {
        self.sol.iter().enumerate().all(|(i, a)| self.sol[..i].iter().all(|b| b.address != a.address))
    }
}

/// Independent RNG stream for `(master_seed, replicate)`.
pub fn replicate_rng(master_seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replicate);
    rng
}

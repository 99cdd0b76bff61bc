//! Feature maps shared by the world generator and the fitted models.
//!
//! Placement coefficients are laid out as
//! `[source_a, source_b, recency | intercept, z1, z2]`: the first block scores
//! each listed address (conditional logit, no intercept), the second block is
//! the logistic model for being displaced. The erroneous-enumeration model is
//! a logistic regression on `(1, z1, z2)`.

use crate::logit::{choice_probabilities, sigmoid, ChoiceEvent};
use crate::scalar::Scalar;
use crate::synthworld::{Label, PersonRecord, SolAddress};

pub const ADDRESS_FEATURES: usize = 3;
pub const COVARIATES: usize = 2;
pub const DISPLACEMENT_FEATURES: usize = 1 + COVARIATES;
pub const PLACEMENT_DIM: usize = ADDRESS_FEATURES + DISPLACEMENT_FEATURES;
pub const ERRONEOUS_DIM: usize = 1 + COVARIATES;
/// Longest sign-of-life listing the generator produces.
pub const MAX_SOL: usize = 5;
/// Number of covariate cells (`z2` × four `z1` bands).
pub const CELLS: usize = 8;

pub const PLACEMENT_NAMES: [&str; PLACEMENT_DIM] =
    ["addr_source_a", "addr_source_b", "addr_recency", "disp_intercept", "disp_z1", "disp_z2"];
pub const ERRONEOUS_NAMES: [&str; ERRONEOUS_DIM] = ["err_intercept", "err_z1", "err_z2"];

pub fn address_features(a: &SolAddress) -> [f64; ADDRESS_FEATURES] {
    [f64::from(u8::from(a.source_a)), f64::from(u8::from(a.source_b)), a.recency]
}

pub fn covariate_design(z: &[f64]) -> [f64; 1 + COVARIATES] {
    [1.0, z[0], z[1]]
}

pub fn covariate_cell(z: &[f64]) -> usize {
    let band = if z[0] < -0.5 {
        0
    } else if z[0] < 0.5 {
        1
    } else if z[0] < 1.5 {
        2
    } else {
        3
    };
    band + 4 * usize::from(z[1] >= 0.5)
}

fn address_alternative<T: Scalar>(a: &SolAddress) -> Vec<T> {
    let mut x = vec![T::zero(); PLACEMENT_DIM];
    for (slot, v) in x.iter_mut().zip(address_features(a)) {
        *slot = T::lit(v);
    }
    x
}

fn displacement_alternative<T: Scalar>(z: &[f64]) -> Vec<T> {
    let mut x = vec![T::zero(); PLACEMENT_DIM];
    for (slot, v) in x[ADDRESS_FEATURES..].iter_mut().zip(covariate_design(z)) {
        *slot = T::lit(v);
    }
    x
}

pub fn erroneous_design<T: Scalar>(z: &[f64]) -> Vec<T> {
    covariate_design(z).iter().map(|&v| T::lit(v)).collect()
}

/// In-scope placement distribution `(μ, ξ)` implied by placement coefficients.
pub fn placement_probabilities<T: Scalar>(beta: &[T], sol: &[SolAddress], z: &[f64]) -> (Vec<T>, T) {
    let disp_x = displacement_alternative::<T>(z);
    let u: T = disp_x.iter().zip(beta).map(|(&x, &b)| x * b).sum();
    let xi = sigmoid(u);
    let alts: Vec<Vec<T>> = sol.iter().map(address_alternative).collect();
    let within = choice_probabilities(&alts, beta);
    let placed = T::one() - xi;
    (within.into_iter().map(|p| p * placed).collect(), xi)
}

/// Choice events contributed by one labelled in-scope record.
///
/// Erroneous records carry no placement information and yield no events.
pub fn placement_events<T: Scalar>(record: &PersonRecord, label: Label) -> Vec<ChoiceEvent<T>> {
    let disp_x = displacement_alternative::<T>(&record.covariates);
    match label {
        Label::Erroneous => Vec::new(),
        Label::Displaced => vec![ChoiceEvent::new(vec![vec![T::zero(); PLACEMENT_DIM], disp_x], 1)],
        Label::At(j) => {
            let d = ChoiceEvent::new(vec![vec![T::zero(); PLACEMENT_DIM], disp_x], 0);
            let alts = record.sol.iter().map(address_alternative).collect();
            vec![d, ChoiceEvent::new(alts, j)]
        }
    }
}

pub fn erroneous_event<T: Scalar>(record: &PersonRecord, erroneous: bool) -> ChoiceEvent<T> {
    ChoiceEvent::binary(erroneous_design(&record.covariates), erroneous)
}

pub fn erroneous_probability<T: Scalar>(beta: &[T], z: &[f64]) -> T {
    let x = erroneous_design::<T>(z);
    sigmoid(x.iter().zip(beta).map(|(&a, &b)| a * b).sum())
}

/// Features seen by the decision-tree counters: covariates, listing size and
/// the first listed address's features.
pub fn tree_features(record: &PersonRecord) -> Vec<f64> {
    let first = record.sol.first().map(address_features).unwrap_or([0.0; ADDRESS_FEATURES]);
    let mut x = record.covariates.clone();
    x.push(record.sol.len() as f64);
    x.extend_from_slice(&first);
    x
}

pub const TREE_FEATURE_NAMES: [&str; 6] = ["z1", "z2", "q", "first_source_a", "first_source_b", "first_recency"];

//! Fractional counters and the population counts and totals built from them.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::features::CELLS;
use crate::scalar::Scalar;
use crate::synthworld::{LocalityMap, PersonRecord};

/// Per-person `(μ, ξ, θ)`.
///
/// `μ` and `ξ` are conditional on the person being in scope, so
/// `μᵀ1 + ξ = 1`; the unconditional placement mass at listed address `j` is
/// `(1 − θ)·μ_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalCounter<T> {
    pub mu: Vec<T>,
    pub xi: T,
    pub theta: T,
}

impl<T: Scalar> FractionalCounter<T> {
    pub fn new(mu: Vec<T>, xi: T, theta: T) -> Result<Self> {
        let c = Self { mu, xi, theta };
        c.validate()?;
        Ok(c)
    }

    /// All mass on listed position `j` of a `q`-address listing.
    pub fn one_hot(q: usize, j: usize) -> Self {
        let mut mu = vec![T::zero(); q];
        mu[j] = T::one();
        Self { mu, xi: T::zero(), theta: T::zero() }
    }

    /// Uniform over the listed addresses, no displacement or error.
    pub fn uniform(q: usize) -> Self {
        let w = T::one() / T::from_usize_lossy(q);
        Self { mu: vec![w; q], xi: T::zero(), theta: T::zero() }
    }

    pub fn q(&self) -> usize {
        self.mu.len()
    }

    /// `|μᵀ1 + ξ − 1|`.
    pub fn simplex_residual(&self) -> T {
        (self.mu.iter().copied().sum::<T>() + self.xi - T::one()).abs()
    }

    pub fn in_scope_prob(&self) -> T {
        T::one() - self.theta
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.is_empty() {
            return Err(Error::InvalidArgument("counter has an empty placement vector".into()));
        }
        let in_unit = |v: T| v.is_finite() && v >= T::zero() && v <= T::one() + T::simplex_tol();
        if !self.mu.iter().all(|&m| in_unit(m)) || !in_unit(self.xi) || !in_unit(self.theta) {
            return Err(Error::InvalidArgument("counter components must be finite and in [0, 1]".into()));
        }
        let tol = T::simplex_tol() * T::from_usize_lossy(self.mu.len() + 1);
        if self.simplex_residual() > tol {
            return Err(Error::InvalidArgument(format!(
                "counter violates the simplex constraint by {}",
                self.simplex_residual()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    #[default]
    LowestIndex,
    HighestIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMethod {
    Classifier,
    Fractional,
    WithTheta,
}

impl CountMethod {
    pub fn tag(self) -> &'static str {
        match self {
            CountMethod::Classifier => "classifier",
            CountMethod::Fractional => "fractional",
            CountMethod::WithTheta => "fractional_theta",
        }
    }
}

/// How per-person variances are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    #[default]
    Independent,
    /// Records sharing a family id are treated as perfectly correlated.
    FamilyCluster,
}

/// Where the displaced mass `(1 − θ)ξ` goes in locality-level output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisplacedAllocation {
    /// Spread over localities in proportion to the placed mass of the
    /// person's covariate cell.
    #[default]
    Proportional,
    /// Reported as a separate unplaced total.
    Unplaced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountEstimate<T> {
    pub method: CountMethod,
    pub estimates: Vec<T>,
    pub variances: Vec<T>,
    /// `(estimate, variance)` of mass not assigned to any locality.
    pub unplaced: Option<(T, T)>,
}

impl<T: Scalar> CountEstimate<T> {
    pub fn total(&self) -> T {
        self.estimates.iter().copied().sum::<T>() + self.unplaced.map_or(T::zero(), |u| u.0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["locality_id", "method", "estimate", "variance"])?;
        for (i, (e, v)) in self.estimates.iter().zip(&self.variances).enumerate() {
            w.write_record([i.to_string(), self.method.tag().into(), e.to_string(), v.to_string()])?;
        }
        if let Some((e, v)) = self.unplaced {
            w.write_record(["unplaced".into(), self.method.tag().into(), e.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One-hot `y_k` at the largest component of `μ_k`.
pub fn classify<T: Scalar>(counter: &FractionalCounter<T>, tie: TieRule) -> Result<Vec<T>> {
    let j = classify_index(&counter.mu, tie)?;
    let mut y = vec![T::zero(); counter.mu.len()];
    y[j] = T::one();
    Ok(y)
}

pub fn classify_index<T: Scalar>(mu: &[T], tie: TieRule) -> Result<usize> {
    if mu.is_empty() {
        return Err(Error::EmptyInput("cannot classify an empty placement vector".into()));
    }
    let mut best = 0;
    for (j, &m) in mu.iter().enumerate().skip(1) {
        let better = match tie {
            TieRule::LowestIndex => m > mu[best],
            TieRule::HighestIndex => m >= mu[best],
        };
        if better {
            best = j;
        }
    }
    Ok(best)
}

fn check_inputs<T>(pd: &[PersonRecord], counters: &[FractionalCounter<T>]) -> Result<()> {
    if pd.len() != counters.len() {
        return Err(Error::DimensionMismatch { expected: pd.len(), got: counters.len() });
    }
    for (r, c) in pd.iter().zip(counters) {
        if r.q() != c.mu.len() {
            return Err(Error::DimensionMismatch { expected: r.q(), got: c.mu.len() });
        }
    }
    Ok(())
}

/// Locality index of every listed address of `record`.
pub fn record_localities(record: &PersonRecord, map: LocalityMap) -> Result<Vec<usize>> {
    record.sol.iter().map(|s| map.locality_of(s.address).ok_or(Error::UnknownAddress(s.address.0))).collect()
}

/// `μ_kᵀδ_k` for every locality the record touches.
fn locality_masses<T: Scalar>(weights: &[T], locs: &[usize]) -> BTreeMap<usize, T> {
    let mut out = BTreeMap::new();
    for (&w, &i) in weights.iter().zip(locs) {
        *out.entry(i).or_insert(T::zero()) += w;
    }
    out
}

/// `p(1 − p)`, clamped against rounding just outside `[0, 1]`.
fn bernoulli_var<T: Scalar>(p: T) -> T {
    (p * (T::one() - p)).max(T::zero())
}

/// Accumulates per-person Bernoulli probabilities `p_ki` into counts and
/// prediction variances.
struct Accumulator<T> {
    estimates: Vec<T>,
    variances: Vec<T>,
    mode: VarianceMode,
    // (family, locality) -> Σ sd
    family_sd: BTreeMap<(u64, usize), T>,
}

impl<T: Scalar> Accumulator<T> {
    fn new(m: usize, mode: VarianceMode) -> Self {
        Self { estimates: vec![T::zero(); m], variances: vec![T::zero(); m], mode, family_sd: BTreeMap::new() }
    }

    fn add(&mut self, family: u64, locality: usize, p: T, var: T) {
        self.estimates[locality] += p;
        match self.mode {
            VarianceMode::Independent => self.variances[locality] += var,
            VarianceMode::FamilyCluster => {
                *self.family_sd.entry((family, locality)).or_insert(T::zero()) += var.max(T::zero()).sqrt()
            }
        }
    }

    fn finish(mut self, method: CountMethod, unplaced: Option<(T, T)>) -> CountEstimate<T> {
        for ((_, i), sd) in std::mem::take(&mut self.family_sd) {
            self.variances[i] += sd * sd;
        }
        CountEstimate { method, estimates: self.estimates, variances: self.variances, unplaced }
    }
}

/// `N̂_i^C = Σ_k y_kᵀδ_k`; the reported variance is that of the underlying
/// fractional predictor, the classifier itself being deterministic.
pub fn count_classifier<T: Scalar>(
    pd: &[PersonRecord],
    counters: &[FractionalCounter<T>],
    map: LocalityMap,
    tie: TieRule,
) -> Result<CountEstimate<T>> {
    check_inputs(pd, counters)?;
    let mut est = vec![T::zero(); map.len()];
    for (r, c) in pd.iter().zip(counters) {
        let locs = record_localities(r, map)?;
        est[locs[classify_index(&c.mu, tie)?]] += T::one();
    }
    let frac = count_fractional(pd, counters, map, VarianceMode::Independent)?;
    Ok(CountEstimate { method: CountMethod::Classifier, estimates: est, variances: frac.variances, unplaced: None })
}

/// `N̂_i^P = Σ_k μ_kᵀδ_k` with variance `Σ_k μ_kᵀδ_k(1 − μ_kᵀδ_k)`.
pub fn count_fractional<T: Scalar>(
    pd: &[PersonRecord],
    counters: &[FractionalCounter<T>],
    map: LocalityMap,
    mode: VarianceMode,
) -> Result<CountEstimate<T>> {
    check_inputs(pd, counters)?;
    let mut acc = Accumulator::new(map.len(), mode);
    for (r, c) in pd.iter().zip(counters) {
        let locs = record_localities(r, map)?;
        for (i, p) in locality_masses(&c.mu, &locs) {
            acc.add(r.family, i, p, bernoulli_var(p));
        }
    }
    Ok(acc.finish(CountMethod::Fractional, None))
}

/// Counts that account for erroneous enumeration and displacement.
///
/// Person `k` is in locality `i` with probability
/// `(1 − θ_k)(μ_kᵀδ_i + ξ_k·s_{c,i})`, where `s_{c,i}` is locality `i`'s share
/// of placed mass in the person's covariate cell `c` (national shares when
/// the cell has none). With [`DisplacedAllocation::Unplaced`] the `ξ` mass is
/// reported separately instead.
pub fn count_with_theta<T: Scalar>(
    pd: &[PersonRecord],
    counters: &[FractionalCounter<T>],
    map: LocalityMap,
    allocation: DisplacedAllocation,
    mode: VarianceMode,
) -> Result<CountEstimate<T>> {
    check_inputs(pd, counters)?;
    let m = map.len();
    let all_locs = pd.iter().map(|r| record_localities(r, map)).collect::<Result<Vec<_>>>()?;
    let mut cell_mass = vec![vec![T::zero(); m]; CELLS + 1];
    for ((r, c), locs) in pd.iter().zip(counters).zip(&all_locs) {
        let cell = r.cell.min(CELLS - 1);
        for (&mu, &i) in c.mu.iter().zip(locs) {
            let w = c.in_scope_prob() * mu;
            cell_mass[cell][i] += w;
            cell_mass[CELLS][i] += w;
        }
    }
    let shares: Vec<Option<Vec<T>>> = cell_mass
        .iter()
        .map(|row| {
            let s: T = row.iter().copied().sum();
            (s > T::zero()).then(|| row.iter().map(|&v| v / s).collect())
        })
        .collect();
    let mut acc = Accumulator::new(m, mode);
    let (mut unplaced, mut unplaced_var) = (T::zero(), T::zero());
    for ((r, c), locs) in pd.iter().zip(counters).zip(&all_locs) {
        let scope = c.in_scope_prob();
        let mut probs = locality_masses(&c.mu, locs);
        let disp = scope * c.xi;
        let share = match allocation {
            DisplacedAllocation::Proportional => {
                shares[r.cell.min(CELLS - 1)].as_ref().or(shares[CELLS].as_ref())
            }
            DisplacedAllocation::Unplaced => None,
        };
        for p in probs.values_mut() {
            *p *= scope;
        }
        match share {
            Some(s) => {
                for (i, &si) in s.iter().enumerate() {
                    if si > T::zero() {
                        *probs.entry(i).or_insert(T::zero()) += disp * si;
                    }
                }
            }
            None => {
                unplaced += disp;
                unplaced_var += bernoulli_var(disp);
            }
        }
        for (i, p) in probs {
            acc.add(r.family, i, p, bernoulli_var(p));
        }
    }
    let unplaced = (allocation == DisplacedAllocation::Unplaced || unplaced > T::zero()).then_some((unplaced, unplaced_var));
    Ok(acc.finish(CountMethod::WithTheta, unplaced))
}

/// Source of `ε̂_k` for [`social_total`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttributeSource {
    /// Register values with their recorded error variance.
    #[default]
    Register,
    /// Register values treated as error free, `V(ε̂_k − ε_k) = 0`.
    ErrorFree,
}

/// `t̂_i = Σ_k μ̂_k ε̂_k` with `μ̂_k = (1 − θ_k)μ_kᵀδ_k`.
///
/// The variance is `Σ_k V(μ̂_k ε̂_k − δ_k ε_k)` with the placement
/// indicator independent of the attribute error:
/// `ε̂_k²·μ̂_k(1 − μ̂_k) + μ̂_k²·V(ε̂_k − ε_k)`.
pub fn social_total<T: Scalar>(
    pd: &[PersonRecord],
    counters: &[FractionalCounter<T>],
    map: LocalityMap,
    locality: usize,
    source: AttributeSource,
) -> Result<(T, T)> {
    check_inputs(pd, counters)?;
    if locality >= map.len() {
        return Err(Error::UnknownLocality(locality));
    }
    let (mut total, mut var) = (T::zero(), T::zero());
    for (r, c) in pd.iter().zip(counters) {
        let locs = record_localities(r, map)?;
        let mu_hat = c.in_scope_prob() * locality_masses(&c.mu, &locs).get(&locality).copied().unwrap_or(T::zero());
        if mu_hat == T::zero() {
            continue;
        }
        let eps = T::lit(
            r.register_attribute
                .ok_or_else(|| Error::InvalidArgument(format!("record {} has no register attribute", r.id.0)))?,
        );
        let err_var = match source {
            AttributeSource::Register => T::lit(r.attribute_error_var),
            AttributeSource::ErrorFree => T::zero(),
        };
        total += mu_hat * eps;
        var += eps * eps * mu_hat * (T::one() - mu_hat) + mu_hat * mu_hat * err_var;
    }
    Ok((total, var))
}

//! Census-time initiation of fractional counters.

use crate::counting::{record_localities, FractionalCounter};
use crate::error::{Error, Result};
use crate::features::{covariate_design, placement_events, CELLS, PLACEMENT_DIM};
use crate::linalg::Matrix;
use crate::logit::{fit, sigmoid, ChoiceData, ChoiceEvent, GaussianPrior, NewtonOptions};
use crate::model::{placement_counter, ModelKind, ParamState};
use crate::scalar::Scalar;
use crate::synthworld::{CensusOutcome, Label, LocalityMap, PersonRecord};

/// Ridge penalty on every logistic fit.
pub const RIDGE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementFit<T> {
    pub state: ParamState<T>,
    pub separation_suspected: bool,
    /// Labelled in-scope records used.
    pub observations: usize,
    pub iterations: usize,
    pub ridge: T,
}

/// Placement events for every labelled in-scope record.
pub fn placement_data<T: Scalar>(records: &[PersonRecord]) -> Result<(ChoiceData<T>, usize)> {
    let mut data = ChoiceData::new(PLACEMENT_DIM);
    let mut n = 0;
    for r in records {
        let label = r.label.ok_or_else(|| Error::InvalidArgument(format!("record {} is not labelled", r.id.0)))?;
        if let Label::At(j) = label {
            if j >= r.q() {
                return Err(Error::InvalidArgument(format!("record {} labelled at position {j} of {}", r.id.0, r.q())));
            }
        }
        if label.in_scope() {
            n += 1;
            data.extend(placement_events(r, label))?;
        }
    }
    Ok((data, n))
}

/// Fits the placement model on the labelled core (non-informative selection).
pub fn fit_placement<T: Scalar>(core: &[PersonRecord], epoch: u32) -> Result<PlacementFit<T>> {
    if core.is_empty() {
        return Err(Error::EmptyInput("core is empty; cannot fit the placement model".into()));
    }
    let (data, n) = placement_data::<T>(core)?;
    if n < PLACEMENT_DIM {
        return Err(Error::UnderIdentified { observations: n, parameters: PLACEMENT_DIM });
    }
    let ridge = T::lit(RIDGE);
    let prior = GaussianPrior::ridge(PLACEMENT_DIM, ridge);
    let out = fit(&data, Some(&prior), &vec![T::zero(); PLACEMENT_DIM], &NewtonOptions::default())?;
    Ok(PlacementFit {
        state: ParamState::new(ModelKind::Placement, out.beta, out.covariance, epoch)?,
        separation_suspected: out.separation_suspected,
        observations: n,
        iterations: out.iterations,
        ridge,
    })
}

/// `θ_k` for every record plus the model that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaFit<T> {
    pub theta: Vec<T>,
    /// Logistic coefficients, when a model was fitted.
    pub coefficients: Option<Vec<T>>,
    pub covariance: Option<Matrix<T>>,
    /// Records labelled erroneous by the subset rule.
    pub pseudo_erroneous: Option<Vec<bool>>,
    pub warnings: Vec<String>,
}

fn weighted_logistic<T: Scalar>(events: Vec<ChoiceEvent<T>>, dim: usize) -> Result<(Vec<T>, Matrix<T>)> {
    let mut data = ChoiceData::new(dim);
    data.extend(events)?;
    let prior = GaussianPrior::ridge(dim, T::lit(RIDGE));
    let out = fit(&data, Some(&prior), &vec![T::zero(); dim], &NewtonOptions::default())?;
    Ok((out.beta, out.covariance))
}

fn predict<T: Scalar>(beta: &[T], x: &[T]) -> T {
    sigmoid(x.iter().zip(beta).map(|(&a, &b)| a * b).sum())
}

fn subset_design<T: Scalar>(r: &PersonRecord, score: f64) -> Vec<T> {
    let mut x: Vec<T> = covariate_design(&r.covariates).iter().map(|&v| T::lit(v)).collect();
    x.push(T::lit(score));
    x
}

fn core_in_scope(pd: &[PersonRecord]) -> usize {
    pd.iter().filter(|r| r.core && r.label.is_none_or(Label::in_scope)).count()
}

/// Labels the `N̂ − |in-scope core|` highest-scoring non-core records in
/// scope and the rest erroneous, then regresses the erroneous label on
/// `(1, z1, z2, score)` to obtain `θ_k` for every record.
pub fn estimate_theta_subset<T: Scalar>(pd: &[PersonRecord], n_hat: f64, score: &[f64]) -> Result<ThetaFit<T>> {
    if score.len() != pd.len() {
        return Err(Error::DimensionMismatch { expected: pd.len(), got: score.len() });
    }
    if pd.is_empty() {
        return Err(Error::EmptyInput("register is empty".into()));
    }
    let core = core_in_scope(pd);
    let extra = n_hat - core as f64;
    if extra < 0.0 {
        return Err(Error::Infeasible(format!("N̂ = {n_hat} is below the in-scope core count {core}")));
    }
    let mut noncore: Vec<usize> = (0..pd.len()).filter(|&k| !pd[k].core).collect();
    noncore.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let keep = (extra.round() as usize).min(noncore.len());
    let mut erroneous = vec![false; pd.len()];
    for &k in &noncore[keep..] {
        erroneous[k] = true;
    }
    let events =
        pd.iter().enumerate().map(|(k, r)| ChoiceEvent::binary(subset_design(r, score[k]), erroneous[k])).collect();
    let (beta, cov) = weighted_logistic::<T>(events, 4)?;
    let theta = pd.iter().enumerate().map(|(k, r)| predict(&beta, &subset_design(r, score[k]))).collect();
    Ok(ThetaFit {
        theta,
        coefficients: Some(beta),
        covariance: Some(cov),
        pseudo_erroneous: Some(erroneous),
        warnings: Vec::new(),
    })
}

/// `θ_k = max(0, 1 − N̂_c / |P_c|)` for every record in covariate cell `c`.
pub fn estimate_theta_hypercube<T: Scalar>(pd: &[PersonRecord], hypercube: &[f64]) -> Result<ThetaFit<T>> {
    if hypercube.len() != CELLS {
        return Err(Error::DimensionMismatch { expected: CELLS, got: hypercube.len() });
    }
    if hypercube.iter().any(|&h| !(h >= 0.0 && h.is_finite())) {
        return Err(Error::InvalidArgument("hypercube estimates must be finite and non-negative".into()));
    }
    let mut counts = vec![0usize; CELLS];
    for r in pd {
        if r.cell >= CELLS {
            return Err(Error::InvalidArgument(format!("record {} has cell {} out of range", r.id.0, r.cell)));
        }
        counts[r.cell] += 1;
    }
    let mut warnings = Vec::new();
    let cell_theta: Vec<T> = counts
        .iter()
        .zip(hypercube)
        .enumerate()
        .map(|(c, (&n, &est))| {
            if n == 0 {
                if est > 0.0 {
                    warnings.push(format!("cell {c} is empty in the register but estimated at {est}"));
                }
                T::zero()
            } else {
                T::lit((1.0 - est / n as f64).max(0.0))
            }
        })
        .collect();
    Ok(ThetaFit {
        theta: pd.iter().map(|r| cell_theta[r.cell]).collect(),
        coefficients: None,
        covariance: None,
        pseudo_erroneous: None,
        warnings,
    })
}

/// One unit of a probability sample from the non-core part of the register.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleUnit {
    /// Index into the register.
    pub index: usize,
    pub in_scope: bool,
    pub inclusion_prob: f64,
}

fn sample_design<T: Scalar>(r: &PersonRecord, core: bool) -> Vec<T> {
    let mut x: Vec<T> = covariate_design(&r.covariates).iter().map(|&v| T::lit(v)).collect();
    x.push(T::lit(f64::from(u8::from(core))));
    x
}

/// Fits `θ` on the combined sample `P_c ∪ s`.
///
/// Core records enter with weight 1 and label in scope; sampled records with
/// weight `1/π_k`. A core indicator in the design lets non-core records carry
/// their own level of erroneous enumeration.
pub fn estimate_theta_sample<T: Scalar>(pd: &[PersonRecord], sample: &[SampleUnit]) -> Result<ThetaFit<T>> {
    let mut warnings = Vec::new();
    let mut events = Vec::new();
    for r in pd.iter().filter(|r| r.core) {
        events.push(ChoiceEvent::binary(sample_design(r, true), false));
    }
    for u in sample {
        if !(u.inclusion_prob > 0.0 && u.inclusion_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!("inclusion probability {} not in (0, 1]", u.inclusion_prob)));
        }
        let r = pd.get(u.index).ok_or_else(|| Error::InvalidArgument(format!("sample index {} out of range", u.index)))?;
        if r.core {
            return Err(Error::InvalidArgument(format!("sampled record {} belongs to the core", r.id.0)));
        }
        events.push(
            ChoiceEvent::binary(sample_design(r, false), !u.in_scope).with_weight(T::lit(1.0 / u.inclusion_prob)),
        );
    }
    if sample.is_empty() {
        warnings.push("empty sample: theta fitted on the core alone".to_string());
    }
    if events.is_empty() {
        return Err(Error::EmptyInput("neither core nor sample records to fit theta".into()));
    }
    let (beta, cov) = weighted_logistic::<T>(events, 4)?;
    let theta = pd.iter().map(|r| predict(&beta, &sample_design(r, r.core))).collect();
    Ok(ThetaFit { theta, coefficients: Some(beta), covariance: Some(cov), pseudo_erroneous: None, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTargets<T> {
    /// Placed mass `Σ_k (1 − θ_k) μ_kᵀδ_i` wanted in each locality.
    pub localities: Vec<T>,
    /// National `N̂`; `Σ_k θ_k` is scaled toward `N_p − N̂`.
    pub national: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkOptions {
    pub max_iter: usize,
    /// Convergence tolerance relative to `N̂`.
    pub rel_tol: f64,
    pub adjust_theta: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self { max_iter: 1000, rel_tol: 1e-9, adjust_theta: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport<T> {
    pub theta_factor: T,
    /// `(N_p − N̂) − Σθ` after clipping.
    pub theta_residual: T,
    pub pre_placed: Vec<T>,
    pub post_placed: Vec<T>,
    /// Product of the per-locality factors applied.
    pub locality_factors: Vec<T>,
    pub iterations: usize,
    pub max_violation: T,
}

/// Single national factor `f` with `Σ min(1, f·θ_k) = target`, solved exactly
/// over the clipping pattern. Returns `(f, target − Σθ after scaling)`.
pub fn scale_theta<T: Scalar>(counters: &mut [FractionalCounter<T>], target: T, tol: T) -> (T, T) {
    let current: T = counters.iter().map(|c| c.theta).sum();
    if (current - target).abs() <= tol {
        return (T::one(), target - current);
    }
    let mut sorted: Vec<T> = counters.iter().map(|c| c.theta).filter(|&t| t > T::zero()).collect();
    if sorted.is_empty() {
        return (T::one(), target - current);
    }
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite theta"));
    let target_c = target.max(T::zero());
    let mut tail: T = sorted.iter().copied().sum();
    // with the top `c` entries clipped at 1 the rest scale by (target − c)/tail
    let mut f = T::infinity();
    for (c, &t) in sorted.iter().enumerate() {
        let cand = (target_c - T::from_usize_lossy(c)) / tail;
        if cand * t <= T::one() {
            f = cand;
            break;
        }
        tail -= t;
    }
    for ct in counters.iter_mut() {
        if ct.theta > T::zero() {
            ct.theta = if f.is_infinite() { T::one() } else { (f * ct.theta).min(T::one()) };
        }
    }
    let after: T = counters.iter().map(|c| c.theta).sum();
    (f, target - after)
}

fn placed_mass<T: Scalar>(counters: &[FractionalCounter<T>], locs: &[Vec<usize>], m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m];
    for (c, l) in counters.iter().zip(locs) {
        let s = c.in_scope_prob();
        for (&mu, &i) in c.mu.iter().zip(l) {
            out[i] += s * mu;
        }
    }
    out
}

/// Benchmarks counters to census estimates.
///
/// `θ` is first scaled by one national factor (clipped to `[0, 1]`) toward
/// `Σθ = N_p − N̂`. Then per-locality factors are applied to each person's
/// placement mass and each person's `(μ, ξ)` is renormalised to the simplex
/// (`ξ` absorbs any shortfall), repeating until every locality's placed mass
/// meets its target.
pub fn benchmark<T: Scalar>(
    pd: &[PersonRecord],
    counters: &[FractionalCounter<T>],
    map: LocalityMap,
    targets: &BenchmarkTargets<T>,
    opts: &BenchmarkOptions,
) -> Result<(Vec<FractionalCounter<T>>, BenchmarkReport<T>)> {
    if pd.len() != counters.len() {
        return Err(Error::DimensionMismatch { expected: pd.len(), got: counters.len() });
    }
    let m = map.len();
    if targets.localities.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: targets.localities.len() });
    }
    for c in counters {
        c.validate()?;
    }
    let locs = pd.iter().map(|r| record_localities(r, map)).collect::<Result<Vec<_>>>()?;
    if let Some((c, l)) = counters.iter().zip(&locs).find(|(c, l)| c.mu.len() != l.len()) {
        return Err(Error::DimensionMismatch { expected: l.len(), got: c.mu.len() });
    }
    let scale = targets.national.abs().max(T::one());
    let tol = T::lit(opts.rel_tol).max(T::epsilon() * T::lit(16.0)) * scale;
    let mut out = counters.to_vec();
    let n_p = T::from_usize_lossy(pd.len());
    let (theta_factor, theta_residual) = if opts.adjust_theta {
        scale_theta(&mut out, n_p - targets.national, tol)
    } else {
        (T::one(), T::zero())
    };

    let mut attainable = vec![T::zero(); m];
    for (c, l) in out.iter().zip(&locs) {
        let mut seen = Vec::new();
        for &i in l {
            if !seen.contains(&i) {
                attainable[i] += c.in_scope_prob();
                seen.push(i);
            }
        }
    }
    let total_target: T = targets.localities.iter().copied().sum();
    let in_scope: T = out.iter().map(|c| c.in_scope_prob()).sum();
    if total_target > in_scope + tol {
        return Err(Error::Infeasible(format!(
            "sum of locality targets {total_target} exceeds the in-scope mass {in_scope}"
        )));
    }
    for (i, (&t, &a)) in targets.localities.iter().zip(&attainable).enumerate() {
        if !(t >= T::zero()) {
            return Err(Error::Infeasible(format!("locality {i} target {t} is negative")));
        }
        if t > a + tol {
            return Err(Error::Infeasible(format!("locality {i} target {t} exceeds attainable mass {a}")));
        }
    }

    let pre_placed = placed_mass(&out, &locs, m);
    let mut factors = vec![T::one(); m];
    let mut iterations = 0;
    let mut placed = pre_placed.clone();
    loop {
        let violation =
            placed.iter().zip(&targets.localities).fold(T::zero(), |v, (&p, &t)| v.max((p - t).abs()));
        if violation <= tol {
            let report = BenchmarkReport {
                theta_factor,
                theta_residual,
                pre_placed,
                post_placed: placed,
                locality_factors: factors,
                iterations,
                max_violation: violation,
            };
            return Ok((out, report));
        }
        if iterations >= opts.max_iter {
            return Err(Error::Infeasible(format!(
                "benchmarking did not converge in {iterations} iterations (max violation {violation})"
            )));
        }
        iterations += 1;
        let r: Vec<T> = placed
            .iter()
            .zip(&targets.localities)
            .enumerate()
            .map(|(i, (&p, &t))| {
                if p > T::zero() {
                    Ok(t / p)
                } else if t <= tol {
                    Ok(T::one())
                } else {
                    Err(Error::Infeasible(format!("locality {i} has target {t} but no placed mass")))
                }
            })
            .collect::<Result<_>>()?;
        for (f, ri) in factors.iter_mut().zip(&r) {
            *f *= *ri;
        }
        for (c, l) in out.iter_mut().zip(&locs) {
            for (mu, &i) in c.mu.iter_mut().zip(l) {
                *mu *= r[i];
            }
            let s: T = c.mu.iter().copied().sum();
            if s > T::one() {
                c.mu.iter_mut().for_each(|mu| *mu /= s);
                c.xi = T::zero();
            } else {
                c.xi = T::one() - s;
            }
        }
        placed = placed_mass(&out, &locs, m);
    }
}

/// Benchmarks counters to per-locality population estimates `N̂_i`.
///
/// Locality targets for the placed mass are `N̂_i·(1 − D/M)`, where `M` is the
/// in-scope mass and `D` its displaced part after the `θ` step, so that the
/// displaced share is held at its modelled national level.
pub fn benchmark_to_estimates<T: Scalar>(
    pd: &[PersonRecord],
    mut counters: Vec<FractionalCounter<T>>,
    map: LocalityMap,
    estimates: &[f64],
    opts: &BenchmarkOptions,
) -> Result<(Vec<FractionalCounter<T>>, BenchmarkReport<T>)> {
    let n_hat: T = estimates.iter().map(|&e| T::lit(e)).sum();
    if opts.adjust_theta {
        let tol = T::lit(opts.rel_tol) * n_hat.max(T::one());
        scale_theta(&mut counters, T::from_usize_lossy(pd.len()) - n_hat, tol);
    }
    let in_scope: T = counters.iter().map(|c| c.in_scope_prob()).sum();
    let displaced: T = counters.iter().map(|c| c.in_scope_prob() * c.xi).sum();
    let share = if in_scope > T::zero() { T::one() - displaced / in_scope } else { T::one() };
    let targets =
        BenchmarkTargets { localities: estimates.iter().map(|&e| T::lit(e) * share).collect(), national: n_hat };
    benchmark(pd, &counters, map, &targets, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSystemEstimate {
    pub estimate: f64,
    pub variance: f64,
}

/// Lincoln–Petersen `N̂ = n1·n2/n12` with variance
/// `n1·n2·(n1 − n12)(n2 − n12)/n12³`.
pub fn dual_system_estimate(n1: u64, n2: u64, n12: u64) -> Result<DualSystemEstimate> {
    if n12 == 0 {
        return Err(Error::InvalidArgument("no overlap between the two lists (n12 = 0)".into()));
    }
    if n12 > n1.min(n2) {
        return Err(Error::InvalidArgument(format!("overlap {n12} exceeds a list size ({n1}, {n2})")));
    }
    let (a, b, c) = (n1 as f64, n2 as f64, n12 as f64);
    Ok(DualSystemEstimate { estimate: a * b / c, variance: a * b * (a - c) * (b - c) / (c * c * c) })
}

/// How `θ` is estimated at initiation.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaMethod {
    None,
    /// Rank non-core records by their sign-of-life score.
    Subset,
    Hypercube(Vec<f64>),
    Sample(Vec<SampleUnit>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitiateOptions {
    pub theta: ThetaMethod,
    pub benchmark: bool,
    pub benchmark_options: BenchmarkOptions,
}

impl Default for InitiateOptions {
    fn default() -> Self {
        Self { theta: ThetaMethod::Subset, benchmark: true, benchmark_options: BenchmarkOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitiationResult<T> {
    pub counters: Vec<FractionalCounter<T>>,
    pub placement: PlacementFit<T>,
    pub theta: ThetaFit<T>,
    pub benchmark: Option<BenchmarkReport<T>>,
    /// `N̂ − Σ(1 − θ_k)`: census population the register cannot account for.
    pub residual_undercoverage: T,
}

/// Initiation: placement fit on the core, `θ` by the chosen option, then
/// benchmarking to the census estimates.
pub fn initiate<T: Scalar>(
    census: &CensusOutcome,
    map: LocalityMap,
    opts: &InitiateOptions,
) -> Result<InitiationResult<T>> {
    let pd = &census.pd;
    let core: Vec<PersonRecord> = pd.iter().filter(|r| r.core).cloned().collect();
    let placement = fit_placement::<T>(&core, 0)?;
    let mut counters =
        pd.iter().map(|r| placement_counter(&placement.state.beta, r)).collect::<Result<Vec<FractionalCounter<T>>>>()?;
    let n_hat = census.national_estimate();
    let theta = match &opts.theta {
        ThetaMethod::None => ThetaFit {
            theta: vec![T::zero(); pd.len()],
            coefficients: None,
            covariance: None,
            pseudo_erroneous: None,
            warnings: Vec::new(),
        },
        ThetaMethod::Subset => {
            let score: Vec<f64> = pd.iter().map(|r| r.sol_score).collect();
            estimate_theta_subset(pd, n_hat, &score)?
        }
        ThetaMethod::Hypercube(h) => estimate_theta_hypercube(pd, h)?,
        ThetaMethod::Sample(s) => estimate_theta_sample(pd, s)?,
    };
    for ((c, &t), r) in counters.iter_mut().zip(&theta.theta).zip(pd) {
        // linkage to the census observes δ(k ∈ U) = 1
        c.theta = if r.core { T::zero() } else { t };
    }
    let n_hat_t = T::lit(n_hat);
    let benchmark_report = if opts.benchmark {
        let (out, report) = benchmark_to_estimates(pd, counters, map, &census.estimates, &opts.benchmark_options)?;
        counters = out;
        Some(report)
    } else {
        None
    };
    let in_scope: T = counters.iter().map(|c| c.in_scope_prob()).sum();
    Ok(InitiationResult {
        counters,
        placement,
        theta,
        benchmark: benchmark_report,
        residual_undercoverage: n_hat_t - in_scope,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::features::{covariate_cell, placement_probabilities};
    use crate::synthworld::{
        derive_pd, generate_world, replicate_rng, simulate_census, AddressId, PersonId, ScenarioConfig, SolAddress,
    };

    const BETA: [f64; PLACEMENT_DIM] = [1.0, 0.6, 1.5, -2.0, 0.4, 0.8];

    fn draw_label<R: Rng>(rng: &mut R, beta: &[f64], r: &PersonRecord) -> Label {
        let (mu, _) = placement_probabilities(beta, &r.sol, &r.covariates);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in mu.iter().enumerate() {
            acc += p;
            if u < acc {
                return Label::At(j);
            }
        }
        Label::Displaced
    }

    fn synthetic_core(n: usize, seed: u64) -> Vec<PersonRecord> {
        let mut rng = replicate_rng(seed, 0);
        (0..n)
            .map(|k| {
                let q = rng.random_range(1..=3);
                let sol = (0..q)
                    .map(|j| SolAddress {
                        address: AddressId((k * 3 + j) as u32 % 40),
                        source_a: rng.random_bool(0.5),
                        source_b: rng.random_bool(0.4),
                        recency: rng.random(),
                    })
                    .collect();
                let covariates = vec![rng.random::<f64>() * 2.0 - 1.0, f64::from(u8::from(rng.random_bool(0.5)))];
                let mut r = PersonRecord {
                    id: PersonId(k as u64),
                    sol,
                    cell: covariate_cell(&covariates),
                    covariates,
                    register_attribute: None,
                    attribute_error_var: 0.0,
                    core: true,
                    label: None,
                    label_epoch: Some(0),
                    family: k as u64,
                    sol_score: 0.5,
                };
                r.label = Some(draw_label(&mut rng, &BETA, &r));
                r
            })
            .collect()
    }

    fn counter(mu: &[f64], xi: f64, theta: f64) -> FractionalCounter<f64> {
        FractionalCounter::new(mu.to_vec(), xi, theta).unwrap()
    }

    fn single_address_pd(locs: &[u32]) -> (Vec<PersonRecord>, LocalityMap) {
        let map = LocalityMap::new(5, 10);
        let mut pd = synthetic_core(locs.len(), 9);
        for (r, &l) in pd.iter_mut().zip(locs) {
            r.sol.truncate(1);
            r.sol[0].address = AddressId(l * 10);
        }
        (pd, map)
    }

    #[test]
    fn placement_recovers_generating_coefficients() {
        let core = synthetic_core(20_000, 1);
        let f = fit_placement::<f64>(&core, 0).unwrap();
        let se = f.state.std_errors();
        for i in 0..PLACEMENT_DIM {
            assert!((f.state.beta[i] - BETA[i]).abs() < 3.0 * se[i], "coefficient {i}: {} vs {}", f.state.beta[i], BETA[i]);
        }
        assert!(!f.separation_suspected);
    }

    #[test]
    fn saturated_first_address() {
        let mut core = synthetic_core(2000, 2);
        for r in &mut core {
            r.sol[0].source_a = true;
            r.sol[0].source_b = true;
            r.sol[0].recency = 1.0;
            for s in &mut r.sol[1..] {
                s.source_a = false;
                s.source_b = false;
                s.recency = 0.0;
            }
            r.label = Some(Label::At(0));
        }
        let f = fit_placement::<f64>(&core, 0).unwrap();
        let p = placement_counter(&f.state.beta, &core[0]).unwrap();
        assert!(p.mu[0] >= 0.99, "{}", p.mu[0]);
    }

    #[test]
    fn placement_degenerate_inputs() {
        assert!(matches!(fit_placement::<f64>(&[], 0), Err(Error::EmptyInput(_))));
        let core = synthetic_core(PLACEMENT_DIM - 1, 3);
        assert!(matches!(fit_placement::<f64>(&core, 0), Err(Error::UnderIdentified { .. })));
        let mut core = synthetic_core(50, 3);
        core[0].label = Some(Label::At(7));
        assert!(fit_placement::<f64>(&core, 0).is_err());
    }

    #[test]
    fn informative_selection_biases_the_fit() {
        // keep every displaced person but only a third of the placed ones
        let all = synthetic_core(20_000, 4);
        let mut rng = replicate_rng(4, 9);
        let core: Vec<PersonRecord> =
            all.into_iter().filter(|r| r.label == Some(Label::Displaced) || rng.random_bool(1.0 / 3.0)).collect();
        let f = fit_placement::<f64>(&core, 0).unwrap();
        let se = f.state.std_errors();
        // the displacement intercept absorbs log 3
        assert!(f.state.beta[3] - BETA[3] > 3.0 * se[3]);
        assert!((f.state.beta[3] - BETA[3] - 3f64.ln()).abs() < 4.0 * se[3]);
    }

    #[test]
    fn subset_with_full_count_shrinks_theta() {
        let mut pd = synthetic_core(400, 5);
        for r in pd.iter_mut().skip(100) {
            r.core = false;
            r.label = None;
        }
        let score: Vec<f64> = (0..pd.len()).map(|k| k as f64 / 400.0).collect();
        let t = estimate_theta_subset::<f64>(&pd, pd.len() as f64, &score).unwrap();
        assert!(t.pseudo_erroneous.as_ref().unwrap().iter().all(|&e| !e));
        assert!(t.theta.iter().all(|&x| x < 0.05));
        assert!(matches!(estimate_theta_subset::<f64>(&pd, 50.0, &score), Err(Error::Infeasible(_))));
    }

    #[test]
    fn subset_oracle_score_reproduces_truth() {
        let mut pd = synthetic_core(600, 6);
        let truth: Vec<bool> = (0..pd.len()).map(|k| k >= 100 && k % 5 == 0).collect();
        for r in pd.iter_mut().skip(100) {
            r.core = false;
            r.label = None;
        }
        let score: Vec<f64> = truth.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect();
        let n_hat = truth.iter().filter(|&&e| !e).count() as f64;
        let t = estimate_theta_subset::<f64>(&pd, n_hat, &score).unwrap();
        assert_eq!(t.pseudo_erroneous.as_ref().unwrap(), &truth);
        let worst_out = (0..pd.len()).filter(|&k| truth[k]).map(|k| t.theta[k]).fold(1.0, f64::min);
        let best_in = (0..pd.len()).filter(|&k| !truth[k]).map(|k| t.theta[k]).fold(0.0, f64::max);
        assert!(worst_out > best_in, "AUC below 1");
    }

    #[test]
    fn hypercube_arithmetic() {
        let mut pd = synthetic_core(100, 7);
        for r in &mut pd {
            r.cell = 2;
        }
        pd[0].cell = 5;
        let mut h = vec![0.0; CELLS];
        h[2] = 89.1;
        h[5] = 1.0;
        h[6] = 3.0;
        let t = estimate_theta_hypercube::<f64>(&pd, &h).unwrap();
        assert!((t.theta[1] - 0.1).abs() < 1e-12);
        assert_eq!(t.theta[0], 0.0);
        assert_eq!(t.warnings.len(), 1);
        assert!(estimate_theta_hypercube::<f64>(&pd, &h[..3]).is_err());
    }

    #[test]
    fn sample_option_weights_and_errors() {
        let mut pd = synthetic_core(300, 8);
        for r in pd.iter_mut().skip(100) {
            r.core = false;
        }
        let t = estimate_theta_sample::<f64>(&pd, &[]).unwrap();
        assert!(!t.warnings.is_empty());
        let bad = [SampleUnit { index: 150, in_scope: true, inclusion_prob: 0.0 }];
        assert!(estimate_theta_sample::<f64>(&pd, &bad).is_err());
        // every second non-core sampled, one in four erroneous
        let s: Vec<SampleUnit> = (100..300)
            .step_by(2)
            .map(|k| SampleUnit { index: k, in_scope: k % 8 != 0, inclusion_prob: 0.5 })
            .collect();
        let t = estimate_theta_sample::<f64>(&pd, &s).unwrap();
        let mean_noncore = t.theta[100..].iter().sum::<f64>() / 200.0;
        assert!((mean_noncore - 0.25).abs() < 0.05, "{mean_noncore}");
        assert!(t.theta[..100].iter().all(|&x| x < 0.01));
    }

    #[test]
    fn scale_theta_clips_exactly() {
        let mut c = vec![counter(&[1.0], 0.0, 0.5), counter(&[1.0], 0.0, 0.1), counter(&[1.0], 0.0, 0.0)];
        let (f, res) = scale_theta(&mut c, 1.2, 1e-12);
        assert!((c[0].theta - 1.0).abs() < 1e-15);
        assert!((c[1].theta - 0.2).abs() < 1e-12 && (f - 2.0).abs() < 1e-12);
        assert!(res.abs() < 1e-12);
        let (f, _) = scale_theta(&mut c, 1.6, 1e-12);
        assert!((c[0].theta - 1.0).abs() < 1e-15 && (c[1].theta - 0.6).abs() < 1e-12 && (f - 3.0).abs() < 1e-12);
        let (_, res) = scale_theta(&mut c, 5.0, 1e-12);
        assert!((res - 3.0).abs() < 1e-12);
    }

    #[test]
    fn benchmark_fixed_point() {
        let (pd, map) = single_address_pd(&[0, 1, 2, 3, 4]);
        let c: Vec<_> = (0..5).map(|_| counter(&[0.8], 0.2, 0.0)).collect();
        let targets = BenchmarkTargets { localities: vec![0.8; 5], national: 5.0 };
        let (out, rep) = benchmark(&pd, &c, map, &targets, &BenchmarkOptions::default()).unwrap();
        assert_eq!(out, c);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn benchmark_single_locality_scaling() {
        let (pd, _) = single_address_pd(&[0, 0, 0]);
        let map = LocalityMap::new(1, 10);
        let c: Vec<_> = (0..3).map(|_| counter(&[1.0], 0.0, 0.0)).collect();
        let targets = BenchmarkTargets { localities: vec![2.7], national: 3.0 };
        let (out, _) = benchmark(&pd, &c, map, &targets, &BenchmarkOptions::default()).unwrap();
        for o in out {
            assert!((o.mu[0] - 0.9).abs() < 1e-12 && (o.xi - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn benchmark_infeasible_targets() {
        let (pd, map) = single_address_pd(&[0, 1, 2, 3, 4]);
        let c: Vec<_> = (0..5).map(|_| counter(&[0.8], 0.2, 0.0)).collect();
        let opts = BenchmarkOptions::default();
        let mut t = BenchmarkTargets { localities: vec![0.8; 5], national: 5.0 };
        t.localities[3] = 1.5;
        let e = benchmark(&pd, &c, map, &t, &opts).unwrap_err();
        assert!(e.to_string().contains("locality 3"), "{e}");
        t.localities[3] = -0.1;
        assert!(benchmark(&pd, &c, map, &t, &opts).is_err());
    }

    fn random_setting(seed: u64) -> (Vec<PersonRecord>, Vec<FractionalCounter<f64>>, LocalityMap, BenchmarkTargets<f64>) {
        let map = LocalityMap::new(5, 10);
        let mut rng = replicate_rng(seed, 3);
        let mut pd = synthetic_core(500, seed);
        let mut counters = Vec::new();
        for r in &mut pd {
            for s in &mut r.sol {
                s.address = AddressId(rng.random_range(0..50));
            }
            let w: Vec<f64> = (0..=r.q()).map(|_| rng.random::<f64>() + 0.05).collect();
            let tot: f64 = w.iter().sum();
            counters.push(counter(
                &w[..r.q()].iter().map(|x| x / tot).collect::<Vec<_>>(),
                w[r.q()] / tot,
                rng.random::<f64>() * 0.1,
            ));
        }
        let cur = placed_mass(&counters, &pd.iter().map(|r| record_localities(r, map).unwrap()).collect::<Vec<_>>(), 5);
        let localities = cur.iter().map(|&x| x * (1.0 + 0.1 * (rng.random::<f64>() - 0.5))).collect();
        let national = 500.0 - counters.iter().map(|c| c.theta).sum::<f64>();
        (pd, counters, map, BenchmarkTargets { localities, national })
    }

    #[test]
    fn benchmark_random_targets_converge() {
        for seed in 0..5 {
            let (pd, c, map, t) = random_setting(seed);
            let (out, rep) = benchmark(&pd, &c, map, &t, &BenchmarkOptions::default()).unwrap();
            assert!(rep.iterations <= 200, "{} iterations", rep.iterations);
            assert!(rep.max_violation < 1e-6 * t.national);
            assert!(out.iter().all(|c| c.simplex_residual() < 1e-12 && c.xi >= 0.0));
            let (again, _) = benchmark(&pd, &out, map, &t, &BenchmarkOptions::default()).unwrap();
            for (a, b) in again.iter().zip(&out) {
                assert!(a.mu.iter().zip(&b.mu).all(|(x, y)| (x - y).abs() < 1e-10));
            }
        }
    }

    #[test]
    fn dual_system_examples() {
        assert_eq!(dual_system_estimate(40, 40, 40).unwrap().estimate, 40.0);
        assert_eq!(dual_system_estimate(100, 50, 25).unwrap().estimate, 200.0);
        assert!(dual_system_estimate(10, 10, 0).is_err());
        assert!(dual_system_estimate(10, 5, 6).is_err());
    }

    #[test]
    fn dual_system_capture_recapture() {
        // two independent lists with capture rates 0.7 and 0.6 over N = 10000
        let n = 10_000;
        let mut hits = 0;
        for rep in 0..100 {
            let mut rng = replicate_rng(77, rep);
            let (mut n1, mut n2, mut n12) = (0, 0, 0);
            for _ in 0..n {
                let a = rng.random_bool(0.7);
                let b = rng.random_bool(0.6);
                n1 += u64::from(a);
                n2 += u64::from(b);
                n12 += u64::from(a && b);
            }
            let e = dual_system_estimate(n1, n2, n12).unwrap();
            if (e.estimate - n as f64).abs() < 3.0 * e.variance.sqrt() {
                hits += 1;
            }
        }
        assert!(hits >= 95, "{hits}");
    }

    fn scenario(n: usize, seed: u64, preset: &str) -> (ScenarioConfig, CensusOutcome, Vec<bool>) {
        let mut cfg = ScenarioConfig::preset(preset).unwrap();
        cfg.world.population = n;
        cfg.census.estimate_cv = 0.0;
        let w = generate_world(&cfg, &mut replicate_rng(seed, 0)).unwrap();
        let pd = derive_pd(&w, &cfg, &mut replicate_rng(seed, 1)).unwrap();
        let truth = pd.iter().map(|r| !w.truth_label(r).in_scope()).collect();
        let c = simulate_census(&w, &pd, cfg.census.link_rate, cfg.census.estimate_cv, &mut replicate_rng(seed, 2))
            .unwrap();
        (cfg, c, truth)
    }

    #[test]
    fn subset_recovers_erroneous_share() {
        let (_, c, truth) = scenario(10_000, 11, "latvia-like");
        let score: Vec<f64> = c.pd.iter().map(|r| r.sol_score).collect();
        let t = estimate_theta_subset::<f64>(&c.pd, c.national_estimate(), &score).unwrap();
        let mean = t.theta.iter().sum::<f64>() / t.theta.len() as f64;
        let share = truth.iter().filter(|&&e| e).count() as f64 / truth.len() as f64;
        let se = (share * (1.0 - share) / truth.len() as f64).sqrt();
        assert!((mean - share).abs() < 3.0 * se + 0.005, "{mean} vs {share}");
    }

    #[test]
    fn hypercube_recovers_erroneous_count() {
        let (_, c, truth) = scenario(10_000, 12, "basic");
        let t = estimate_theta_hypercube::<f64>(&c.pd, &c.hypercube).unwrap();
        let err = truth.iter().filter(|&&e| e).count() as f64;
        let sum: f64 = t.theta.iter().sum();
        assert!((sum - err).abs() < 0.02 * err, "{sum} vs {err}");
    }

    #[test]
    fn initiation_meets_both_constraints() {
        let (_, c, _) = scenario(3000, 13, "basic");
        let map = LocalityMap::new(4, 400);
        let r = initiate::<f64>(&c, map, &InitiateOptions::default()).unwrap();
        let n_p = c.pd.len() as f64;
        let theta: f64 = r.counters.iter().map(|c| c.theta).sum();
        let in_scope: f64 = r.counters.iter().map(|c| c.in_scope_prob() * (c.mu.iter().sum::<f64>() + c.xi)).sum();
        assert!((c.national_estimate() + theta - n_p).abs() < 1e-6 * n_p);
        assert!((in_scope - c.national_estimate()).abs() < 1e-6 * n_p);
        assert!(r.counters.iter().all(|x| x.simplex_residual() < 1e-12));
        assert!(r.counters.iter().zip(&c.pd).all(|(x, p)| !p.core || x.theta == 0.0));
    }

    #[test]
    fn initiation_without_core_fails() {
        let (_, mut c, _) = scenario(300, 14, "basic");
        for r in &mut c.pd {
            r.core = false;
            r.label = None;
        }
        assert!(matches!(
            initiate::<f64>(&c, LocalityMap::new(4, 400), &InitiateOptions::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn benchmark_preserves_simplex(seed in 0u64..40) {
            let (pd, c, map, t) = random_setting(seed + 100);
            let (out, _) = benchmark(&pd, &c, map, &t, &BenchmarkOptions::default()).unwrap();
            for o in &out {
                proptest::prop_assert!(o.simplex_residual() < 1e-12);
                proptest::prop_assert!(o.theta >= 0.0 && o.theta <= 1.0);
            }
        }
    }
}

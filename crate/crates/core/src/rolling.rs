//! Temporal updating of fractional counters and the baseline update schemes.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;

use crate::counting::FractionalCounter;
use crate::error::{Error, Result};
use crate::features::{erroneous_event, placement_events};
use crate::linalg::{dot, Matrix};
use crate::logit::{fit, ChoiceData, FitOutcome, GaussianPrior, NewtonOptions};
use crate::model::{ModelKind, ModelState, ParamState};
use crate::scalar::Scalar;
use crate::synthworld::{EventLog, Label, MoveEvent, PersonId, PersonRecord, UpdateBatch};

/// `L_t = S_t ∪ B_t ∪ A_t` as indices into the epoch-`t` register.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelledSet {
    /// Survey records: index, observed label, inclusion probability.
    pub survey: Vec<(usize, Label, f64)>,
    /// Register-updated records not in the survey.
    pub register: Vec<(usize, Label)>,
    /// Records carrying only a label from an earlier epoch.
    pub stale: Vec<usize>,
}

impl LabelledSet {
    /// `D_t = S_t ∪ B_t` with labels.
    pub fn updated(&self) -> impl Iterator<Item = (usize, Label)> + '_ {
        self.survey.iter().map(|&(k, l, _)| (k, l)).chain(self.register.iter().copied())
    }

    pub fn updated_len(&self) -> usize {
        self.survey.len() + self.register.len()
    }

    pub fn len(&self) -> usize {
        self.updated_len() + self.stale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partitions the labelled part of `pd` by the batch; a record observed by
/// both the survey and the register goes to `S_t`. Batch entries for records
/// no longer in the register are ignored.
pub fn partition_labels(pd: &[PersonRecord], batch: &UpdateBatch) -> LabelledSet {
    let index: HashMap<PersonId, usize> = pd.iter().enumerate().map(|(k, r)| (r.id, k)).collect();
    let mut taken = vec![false; pd.len()];
    let mut set = LabelledSet::default();
    for s in &batch.survey {
        if let Some(&k) = index.get(&s.id) {
            if !taken[k] {
                taken[k] = true;
                set.survey.push((k, s.label, s.inclusion_prob));
            }
        }
    }
    for &(id, label) in &batch.register_updates {
        if let Some(&k) = index.get(&id) {
            if !taken[k] {
                taken[k] = true;
                set.register.push((k, label));
            }
        }
    }
    for (k, r) in pd.iter().enumerate() {
        if !taken[k] && r.label.is_some() {
            set.stale.push(k);
        }
    }
    set
}

/// Likelihood contributions of `D_t` for a model of the given kind.
///
/// Placement models use in-scope labels only; the erroneous model uses every
/// label. `A_t` is never used.
pub fn updated_events<T: Scalar>(kind: ModelKind, pd: &[PersonRecord], set: &LabelledSet) -> Result<ChoiceData<T>> {
    let mut data = ChoiceData::new(kind.dim());
    for (k, label) in set.updated() {
        let r = pd.get(k).ok_or_else(|| Error::InvalidArgument(format!("index {k} outside the register")))?;
        if let Label::At(j) = label {
            if j >= r.q() {
                return Err(Error::InvalidArgument(format!("record {} labelled at position {j} of {}", r.id.0, r.q())));
            }
        }
        match kind {
            ModelKind::Placement => data.extend(placement_events(r, label))?,
            ModelKind::Erroneous => data.push(erroneous_event(r, !label.in_scope()))?,
        }
    }
    Ok(data)
}

/// Posterior mode and Laplace covariance of
/// `Π f(y_k | x_k, β) · φ(β; mean, cov + drift)`.
///
/// With no data the prior (inflated by `drift`, if any) is returned as is.
pub fn ebp_posterior<T: Scalar>(
    mean: &[T],
    cov: &Matrix<T>,
    data: &ChoiceData<T>,
    drift: Option<&Matrix<T>>,
    opts: &NewtonOptions<T>,
) -> Result<FitOutcome<T>> {
    if mean.len() != data.dim() || cov.rows() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), got: mean.len() });
    }
    let prior_cov = match drift {
        Some(q) => {
            if q.rows() != cov.rows() || q.cols() != cov.cols() {
                return Err(Error::DimensionMismatch { expected: cov.rows(), got: q.rows() });
            }
            cov.add(q)
        }
        None => cov.clone(),
    };
    if data.is_empty() {
        return Ok(FitOutcome {
            beta: mean.to_vec(),
            covariance: prior_cov,
            log_posterior: T::zero(),
            iterations: 0,
            grad_norm: T::zero(),
            separation_suspected: false,
        });
    }
    let prior = GaussianPrior::from_covariance(mean.to_vec(), &prior_cov)?;
    fit(data, Some(&prior), mean, opts)
}

/// One empirical-Bayes roll: the previous state's `N(β̂, Σ̂)` is the prior
/// for `D_t`, and the epoch advances.
pub fn ebp_update<T: Scalar>(
    state: &ParamState<T>,
    data: &ChoiceData<T>,
    drift: Option<&Matrix<T>>,
) -> Result<ParamState<T>> {
    let out = ebp_posterior(&state.beta, &state.sigma, data, drift, &NewtonOptions::default())?;
    ParamState::new(state.kind, out.beta, out.covariance, state.epoch + 1)
}

/// Fit on `D_t` alone, with the same ridge as initiation.
pub fn refit_only<T: Scalar>(kind: ModelKind, data: &ChoiceData<T>, epoch: u32) -> Result<ParamState<T>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no updated observations to refit on".into()));
    }
    let prior = GaussianPrior::ridge(kind.dim(), T::lit(crate::initiate::RIDGE));
    let out = fit(data, Some(&prior), &vec![T::zero(); kind.dim()], &NewtonOptions::default())?;
    ParamState::new(kind, out.beta, out.covariance, epoch)
}

/// Mahalanobis norm `‖a − b‖` under `Σ⁻¹`.
pub fn mahalanobis<T: Scalar>(a: &[T], b: &[T], sigma: &Matrix<T>) -> Result<T> {
    let d: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let chol = sigma.cholesky()?;
    Ok(dot(&d, &chol.solve(&d)).max(T::zero()).sqrt())
}

/// Counters for every record under `state`. With `rng` a single draw
/// `β ~ N(β̂, Σ̂)` is used in place of `β̂`.
pub fn apply_model<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    pd: &[PersonRecord],
    rng: Option<&mut R>,
) -> Result<Vec<FractionalCounter<T>>> {
    let drawn;
    let state = match (state, rng) {
        (ModelState::Parametric(p), Some(rng)) => {
            drawn = ModelState::Parametric(ParamState { beta: p.sample_beta(rng)?, ..p.clone() });
            &drawn
        }
        _ => state,
    };
    pd.iter().map(|r| state.predict(r)).collect()
}

/// `θ_t` after a roll: records labelled this epoch get `θ = 0` or `1` from
/// their label, others keep their previous `θ`, and records new to the
/// register get `default`.
pub fn roll_theta<T: Scalar>(
    previous: &HashMap<PersonId, T>,
    pd: &[PersonRecord],
    set: &LabelledSet,
    default: T,
) -> Vec<T> {
    let mut theta: Vec<T> = pd.iter().map(|r| previous.get(&r.id).copied().unwrap_or(default)).collect();
    for (k, label) in set.updated() {
        theta[k] = if label.in_scope() { T::zero() } else { T::one() };
    }
    theta
}

/// Estonian residency index `R(k,t) = d·R(k,t−1) + g·X(k,t−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidencyState<T> {
    pub r: Vec<T>,
    pub d: T,
    pub g: T,
    /// Residency threshold `τ`.
    pub tau: T,
}

impl<T: Scalar> ResidencyState<T> {
    pub fn new(r: Vec<T>, d: T, g: T, tau: T) -> Result<Self> {
        if !(d >= T::zero() && g >= T::zero()) {
            return Err(Error::InvalidArgument(format!("rates must be non-negative (d = {d}, g = {g})")));
        }
        if d + g > T::one() + T::epsilon() {
            return Err(Error::InvalidArgument(format!("d + g = {} exceeds 1", d + g)));
        }
        if r.iter().any(|&x| !(x >= T::zero() && x <= T::one())) {
            return Err(Error::InvalidArgument("residency index outside [0, 1]".into()));
        }
        Ok(Self { r, d, g, tau })
    }

    /// Defaults `d = 0.7`, `g = 0.3`, `τ = 0.5`.
    pub fn with_defaults(r: Vec<T>) -> Result<Self> {
        Self::new(r, T::lit(0.7), T::lit(0.3), T::lit(0.5))
    }

    /// `θ_k = 1 − R(k,t)`.
    pub fn theta(&self) -> Vec<T> {
        self.r.iter().map(|&x| T::one() - x).collect()
    }

    pub fn resident(&self) -> Vec<bool> {
        self.r.iter().map(|&x| x >= self.tau).collect()
    }
}

pub fn residency_update<T: Scalar>(state: &ResidencyState<T>, x: &[T]) -> Result<ResidencyState<T>> {
    if x.len() != state.r.len() {
        return Err(Error::DimensionMismatch { expected: state.r.len(), got: x.len() });
    }
    if x.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::InvalidArgument("sign-of-life score outside [0, 1]".into()));
    }
    let r = state.r.iter().zip(x).map(|(&r, &x)| (state.d * r + state.g * x).min(T::one())).collect();
    Ok(ResidencyState { r, ..state.clone() })
}

/// Per-locality demographic components for the demographic balancing update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DbeComponents {
    pub births: Vec<f64>,
    pub deaths: Vec<f64>,
    pub net_internal: Vec<f64>,
    pub net_external: Vec<f64>,
}

impl DbeComponents {
    /// Error-free components read off the simulator's event log.
    pub fn from_event_log(log: &EventLog) -> Self {
        let f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Self {
            births: f(&log.births),
            deaths: f(&log.deaths),
            net_internal: log.moves_in.iter().zip(&log.moves_out).map(|(&i, &o)| i as f64 - o as f64).collect(),
            net_external: log.immigration.iter().zip(&log.emigration).map(|(&i, &o)| i as f64 - o as f64).collect(),
        }
    }
}

/// `N_{i,t} = N_{i,t−1} + B − D + netI + netE`.
pub fn dbe_update(counts: &[f64], c: &DbeComponents) -> Result<Vec<f64>> {
    let m = counts.len();
    for v in [&c.births, &c.deaths, &c.net_internal, &c.net_external] {
        if v.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: v.len() });
        }
    }
    (0..m)
        .map(|i| {
            let v = counts[i] + c.births[i] - c.deaths[i] + c.net_internal[i] + c.net_external[i];
            if v < 0.0 {
                Err(Error::NegativeCount { locality: i, value: v })
            } else {
                Ok(v)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPerson<T> {
    pub id: PersonId,
    pub locality: usize,
    pub weight: T,
}

/// Israeli weight carrying: stayers keep their weights, movers take the mean
/// weight of their destination locality (computed before the moves).
pub fn carry_weights<T: Scalar>(
    persons: &[WeightedPerson<T>],
    moves: &[MoveEvent],
    localities: usize,
) -> Result<Vec<WeightedPerson<T>>> {
    let mut sums = vec![(T::zero(), 0usize); localities];
    for p in persons {
        let s = sums.get_mut(p.locality).ok_or(Error::UnknownLocality(p.locality))?;
        s.0 += p.weight;
        s.1 += 1;
    }
    let index: HashMap<PersonId, usize> = persons.iter().enumerate().map(|(k, p)| (p.id, k)).collect();
    let mut out = persons.to_vec();
    for mv in moves {
        let &(sum, n) = sums.get(mv.to).ok_or(Error::UnknownLocality(mv.to))?;
        if n == 0 {
            return Err(Error::UnknownLocality(mv.to));
        }
        let k = *index
            .get(&mv.id)
            .ok_or_else(|| Error::InvalidArgument(format!("mover {} has no weight", mv.id.0)))?;
        out[k].locality = mv.to;
        out[k].weight = sum / T::from_usize_lossy(n);
    }
    Ok(out)
}

/// One line of the rolling log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RollingLogRow {
    pub epoch: u32,
    pub survey: usize,
    pub register: usize,
    pub stale: usize,
    /// `‖β̂_t − β̂_{t−1}‖₂`.
    pub beta_step: f64,
    pub sigma_trace: f64,
}

impl RollingLogRow {
    pub fn new<T: Scalar>(set: &LabelledSet, before: &ParamState<T>, after: &ParamState<T>) -> Self {
        let step = before.beta.iter().zip(&after.beta).map(|(&a, &b)| (a - b).to_f64_lossy().powi(2)).sum::<f64>();
        Self {
            epoch: after.epoch,
            survey: set.survey.len(),
            register: set.register.len(),
            stale: set.stale.len(),
            beta_step: step.sqrt(),
            sigma_trace: after.sigma.trace().to_f64_lossy(),
        }
    }
}

pub fn write_rolling_log<W: Write>(rows: &[RollingLogRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "s", "b", "a", "beta_step", "sigma_trace"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.survey.to_string(),
            r.register.to_string(),
            r.stale.to_string(),
            r.beta_step.to_string(),
            r.sigma_trace.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Previous `θ` keyed by person, for [`roll_theta`].
pub fn theta_by_id<T: Scalar>(pd: &[PersonRecord], counters: &[FractionalCounter<T>]) -> HashMap<PersonId, T> {
    pd.iter().zip(counters).map(|(r, c)| (r.id, c.theta)).collect()
}

//! Fitted model states and the counters they produce.

use rand::Rng;

use crate::counting::FractionalCounter;
use crate::error::{Error, Result};
use crate::features::{self, COVARIATES, ERRONEOUS_DIM, PLACEMENT_DIM};
use crate::linalg::Matrix;
use crate::logit::sigmoid;
use crate::scalar::Scalar;
use crate::synthworld::PersonRecord;
use crate::treeroll::TreeModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Two-part placement model: displaced vs placed, then which listed address.
    Placement,
    /// Logistic model for erroneous enumeration on `(1, z1, z2)`.
    Erroneous,
}

impl ModelKind {
    pub fn dim(self) -> usize {
        match self {
            ModelKind::Placement => PLACEMENT_DIM,
            ModelKind::Erroneous => ERRONEOUS_DIM,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Placement => "placement",
            ModelKind::Erroneous => "erroneous",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "placement" => Some(ModelKind::Placement),
            "erroneous" => Some(ModelKind::Erroneous),
            _ => None,
        }
    }
}

/// `(β̂_t, Σ̂_t)` at epoch `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState<T> {
    pub kind: ModelKind,
    pub beta: Vec<T>,
    pub sigma: Matrix<T>,
    pub epoch: u32,
}

impl<T: Scalar> ParamState<T> {
    pub fn new(kind: ModelKind, beta: Vec<T>, sigma: Matrix<T>, epoch: u32) -> Result<Self> {
        let p = kind.dim();
        if beta.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: beta.len() });
        }
        if sigma.rows() != p || sigma.cols() != p {
            return Err(Error::DimensionMismatch { expected: p, got: sigma.rows() });
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficient".into()));
        }
        Ok(Self { kind, beta, sigma: sigma.symmetrized(), epoch })
    }

    /// Diffuse state with zero mean and covariance `scale·I`.
    pub fn diffuse(kind: ModelKind, scale: T) -> Self {
        let p = kind.dim();
        Self { kind, beta: vec![T::zero(); p], sigma: Matrix::scaled_identity(p, scale), epoch: 0 }
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Standard error of every coefficient.
    pub fn std_errors(&self) -> Vec<T> {
        (0..self.dim()).map(|i| self.sigma[(i, i)].max(T::zero()).sqrt()).collect()
    }

    /// Draws `β ~ N(β̂, Σ̂)`.
    pub fn sample_beta<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<T>> {
        let chol = self.sigma.cholesky()?;
        let z: Vec<T> = (0..self.dim()).map(|_| T::lit(std_normal(rng))).collect();
        Ok(self.beta.iter().zip(chol.lower_mul(&z)).map(|(&b, d)| b + d).collect())
    }
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

fn check_record(record: &PersonRecord) -> Result<()> {
    if record.covariates.len() != COVARIATES {
        return Err(Error::DimensionMismatch { expected: COVARIATES, got: record.covariates.len() });
    }
    if record.sol.is_empty() {
        return Err(Error::InvalidArgument(format!("record {} has no listed address", record.id.0)));
    }
    Ok(())
}

/// In-scope `(μ, ξ)` for one record under placement coefficients `beta`.
pub fn placement_counter<T: Scalar>(beta: &[T], record: &PersonRecord) -> Result<FractionalCounter<T>> {
    if beta.len() != PLACEMENT_DIM {
        return Err(Error::DimensionMismatch { expected: PLACEMENT_DIM, got: beta.len() });
    }
    check_record(record)?;
    let (mu, xi) = features::placement_probabilities(beta, &record.sol, &record.covariates);
    Ok(FractionalCounter { mu, xi, theta: T::zero() })
}

pub fn erroneous_prob<T: Scalar>(beta: &[T], record: &PersonRecord) -> Result<T> {
    if beta.len() != ERRONEOUS_DIM {
        return Err(Error::DimensionMismatch { expected: ERRONEOUS_DIM, got: beta.len() });
    }
    check_record(record)?;
    let x = features::erroneous_design::<T>(&record.covariates);
    Ok(sigmoid(x.iter().zip(beta).map(|(&a, &b)| a * b).sum()))
}

/// Either a parametric state or a decision tree.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelState<T> {
    Parametric(ParamState<T>),
    Tree(Box<TreeModel>),
}

impl<T: Scalar> ModelState<T> {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelState::Parametric(p) => p.kind,
            ModelState::Tree(t) => t.kind,
        }
    }

    /// Placement counter (θ = 0) for a placement model, or `θ_k` wrapped in a
    /// single-address counter for an erroneous model.
    pub fn predict(&self, record: &PersonRecord) -> Result<FractionalCounter<T>> {
        match (self, self.kind()) {
            (ModelState::Parametric(p), ModelKind::Placement) => placement_counter(&p.beta, record),
            (ModelState::Parametric(p), ModelKind::Erroneous) => {
                let theta = erroneous_prob(&p.beta, record)?;
                Ok(FractionalCounter { theta, ..FractionalCounter::uniform(record.q()) })
            }
            (ModelState::Tree(t), _) => {
                let c = t.counter(record)?;
                Ok(FractionalCounter {
                    mu: c.mu.into_iter().map(T::lit).collect(),
                    xi: T::lit(c.xi),
                    theta: T::lit(c.theta),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{AddressId, PersonId, SolAddress};

    fn rec(q: usize) -> PersonRecord {
        PersonRecord {
            id: PersonId(1),
            sol: (0..q)
                .map(|j| SolAddress { address: AddressId(j as u32), source_a: j == 0, source_b: false, recency: 0.5 })
                .collect(),
            covariates: vec![0.3, 1.0],
            register_attribute: None,
            attribute_error_var: 0.0,
            core: false,
            label: None,
            label_epoch: None,
            family: 0,
            cell: 0,
            sol_score: 0.0,
        }
    }

    #[test]
    fn zero_coefficients_split_evenly() {
        let c = placement_counter(&[0.0f64; PLACEMENT_DIM], &rec(1)).unwrap();
        assert!((c.mu[0] - 0.5).abs() < 1e-15 && (c.xi - 0.5).abs() < 1e-15);
        let c = placement_counter(&[0.0f64; PLACEMENT_DIM], &rec(4)).unwrap();
        assert!(c.mu.iter().all(|&m| (m - 0.125).abs() < 1e-15));
        assert!(c.simplex_residual() < 1e-15);
    }

    #[test]
    fn strong_signal_is_near_one_hot() {
        let c = placement_counter(&[30.0f64, 0.0, 0.0, -30.0, 0.0, 0.0], &rec(3)).unwrap();
        assert!(c.mu[0] > 1.0 - 1e-9);
    }

    #[test]
    fn direct_formula_fixture() {
        let beta = [1.0f64, 0.6, 1.5, -2.0, 0.4, 0.8];
        let r = rec(2);
        let c = placement_counter(&beta, &r).unwrap();
        let xi = 1.0 / (1.0 + (-(-2.0f64 + 0.4 * 0.3 + 0.8)).exp());
        let u0 = 1.0f64 + 1.5 * 0.5;
        let u1 = 1.5f64 * 0.5;
        let p0 = u0.exp() / (u0.exp() + u1.exp());
        assert!((c.xi - xi).abs() < 1e-14);
        assert!((c.mu[0] - (1.0 - xi) * p0).abs() < 1e-14);
        assert!((c.mu[1] - (1.0 - xi) * (1.0 - p0)).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(placement_counter(&[0.0f64; 3], &rec(1)), Err(Error::DimensionMismatch { .. })));
        let mut r = rec(1);
        r.covariates.push(1.0);
        assert!(matches!(erroneous_prob(&[0.0f64; 3], &r), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn beta_sampling_matches_covariance() {
        use crate::synthworld::replicate_rng;
        let mut sigma = Matrix::identity(3).scale(0.04);
        sigma[(0, 1)] = 0.02;
        sigma[(1, 0)] = 0.02;
        let s = ParamState::new(ModelKind::Erroneous, vec![1.0f64, -1.0, 0.5], sigma, 0).unwrap();
        let mut rng = replicate_rng(3, 0);
        let n = 20_000;
        let draws: Vec<_> = (0..n).map(|_| s.sample_beta(&mut rng).unwrap()).collect();
        let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let c01 = draws.iter().map(|d| (d[0] - 1.0) * (d[1] + 1.0)).sum::<f64>() / n as f64;
        assert!((m0 - 1.0).abs() < 4.0 * (0.04f64 / n as f64).sqrt());
        assert!((c01 - 0.02).abs() < 0.003);
    }
}

//! Weighted conditional-logit likelihood with an optional Gaussian prior.
//!
//! Every model in the crate reduces to a set of choice events: a person picks
//! one alternative out of a small set, and alternative `j` has utility
//! `βᵀx_j`. A binary logistic regression is the two-alternative case with the
//! reference alternative fixed at the zero vector; the placement model stacks
//! a displacement event and an address event over disjoint blocks of `β`.
//!
//! The maximiser is a damped Newton iteration with step-halving. The curvature
//! returned at the mode is the negative Hessian of the log posterior, so its
//! inverse is the Laplace covariance used by the rolling updates.

use crate::error::{Error, Result};
use crate::linalg::{dot, quad_form, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceEvent<T> {
    /// One feature vector per alternative, each of the model dimension.
    pub alternatives: Vec<Vec<T>>,
    pub chosen: usize,
    pub weight: T,
}

impl<T: Scalar> ChoiceEvent<T> {
    pub fn new(alternatives: Vec<Vec<T>>, chosen: usize) -> Self {
        Self { alternatives, chosen, weight: T::one() }
    }

    /// Binary logistic event: `P(y = 1) = σ(βᵀx)`.
    pub fn binary(x: Vec<T>, y: bool) -> Self {
        let zero = vec![T::zero(); x.len()];
        Self::new(vec![zero, x], usize::from(y))
    }

    pub fn with_weight(mut self, weight: T) -> Self {
        self.weight = weight;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceData<T> {
    dim: usize,
    events: Vec<ChoiceEvent<T>>,
}

impl<T: Scalar> ChoiceData<T> {
    pub fn new(dim: usize) -> Self {
        Self { dim, events: Vec::new() }
    }

    pub fn push(&mut self, event: ChoiceEvent<T>) -> Result<()> {
        if event.alternatives.is_empty() || event.chosen >= event.alternatives.len() {
            return Err(Error::InvalidArgument("choice event needs a valid chosen alternative".into()));
        }
        if let Some(bad) = event.alternatives.iter().find(|x| x.len() != self.dim) {
            return Err(Error::DimensionMismatch { expected: self.dim, got: bad.len() });
        }
        if !(event.weight >= T::zero()) {
            return Err(Error::InvalidArgument("choice event weight must be non-negative".into()));
        }
        self.events.push(event);
        Ok(())
    }

    pub fn extend(&mut self, events: impl IntoIterator<Item = ChoiceEvent<T>>) -> Result<()> {
        events.into_iter().try_for_each(|e| self.push(e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[ChoiceEvent<T>] {
        &self.events
    }
}

/// `N(mean, precision⁻¹)` prior on the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior<T> {
    pub mean: Vec<T>,
    pub precision: Matrix<T>,
}

impl<T: Scalar> GaussianPrior<T> {
    /// Ridge penalty `λ/2 ‖β‖²` expressed as a zero-mean prior.
    pub fn ridge(dim: usize, lambda: T) -> Self {
        Self { mean: vec![T::zero(); dim], precision: Matrix::scaled_identity(dim, lambda) }
    }

    pub fn from_covariance(mean: Vec<T>, covariance: &Matrix<T>) -> Result<Self> {
        Ok(Self { mean, precision: covariance.spd_inverse()? })
    }

    fn log_density_kernel(&self, beta: &[T]) -> T {
        let d: Vec<T> = beta.iter().zip(&self.mean).map(|(&b, &m)| b - m).collect();
        -T::lit(0.5) * quad_form(&self.precision, &d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions<T> {
    pub grad_tol: T,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl<T: Scalar> Default for NewtonOptions<T> {
    fn default() -> Self {
        let tol = if T::epsilon() < T::lit(1e-10) { T::lit(1e-8) } else { T::lit(1e-3) };
        Self { grad_tol: tol, max_iter: 100, max_halvings: 40 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome<T> {
    pub beta: Vec<T>,
    /// Inverse of the negative Hessian at the mode.
    pub covariance: Matrix<T>,
    pub log_posterior: T,
    pub iterations: usize,
    pub grad_norm: T,
    /// Coefficients large enough to indicate (quasi-)separation.
    pub separation_suspected: bool,
}

pub fn softmax<T: Scalar>(utilities: &[T]) -> Vec<T> {
    let max = utilities.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = utilities.iter().map(|&u| (u - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

pub fn choice_probabilities<T: Scalar>(alternatives: &[Vec<T>], beta: &[T]) -> Vec<T> {
    let u: Vec<T> = alternatives.iter().map(|x| dot(x, beta)).collect();
    softmax(&u)
}

fn log_sum_exp<T: Scalar>(u: &[T]) -> T {
    let max = u.iter().copied().fold(T::neg_infinity(), T::max);
    max + u.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub fn log_likelihood<T: Scalar>(data: &ChoiceData<T>, beta: &[T]) -> T {
    data.events
        .iter()
        .map(|e| {
            let u: Vec<T> = e.alternatives.iter().map(|x| dot(x, beta)).collect();
            e.weight * (u[e.chosen] - log_sum_exp(&u))
        })
        .sum()
}

pub fn log_posterior<T: Scalar>(data: &ChoiceData<T>, prior: Option<&GaussianPrior<T>>, beta: &[T]) -> T {
    log_likelihood(data, beta) + prior.map_or(T::zero(), |p| p.log_density_kernel(beta))
}

/// Gradient and Hessian of the log posterior.
pub fn gradient_hessian<T: Scalar>(
    data: &ChoiceData<T>,
    prior: Option<&GaussianPrior<T>>,
    beta: &[T],
) -> (Vec<T>, Matrix<T>) {
    let p = data.dim;
    let mut g = vec![T::zero(); p];
    let mut h = Matrix::zeros(p, p);
    let mut mean = vec![T::zero(); p];
    for e in &data.events {
        let pi = choice_probabilities(&e.alternatives, beta);
        mean.iter_mut().for_each(|m| *m = T::zero());
        for (x, &w) in e.alternatives.iter().zip(&pi) {
            for (m, &xi) in mean.iter_mut().zip(x) {
                *m += w * xi;
            }
        }
        let chosen = &e.alternatives[e.chosen];
        for a in 0..p {
            g[a] += e.weight * (chosen[a] - mean[a]);
        }
        for (x, &w) in e.alternatives.iter().zip(&pi) {
            if w == T::zero() {
                continue;
            }
            for a in 0..p {
                let da = x[a] - mean[a];
                if da == T::zero() {
                    continue;
                }
                for b in 0..=a {
                    h[(a, b)] -= e.weight * w * da * (x[b] - mean[b]);
                }
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    if let Some(prior) = prior {
        let d: Vec<T> = beta.iter().zip(&prior.mean).map(|(&b, &m)| b - m).collect();
        let pd = prior.precision.mul_vec(&d);
        for a in 0..p {
            g[a] -= pd[a];
        }
        h = h.add(&prior.precision.scale(-T::one()));
    }
    (g, h)
}

fn inf_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Maximises the (penalised) log likelihood starting from `start`.
pub fn fit<T: Scalar>(
    data: &ChoiceData<T>,
    prior: Option<&GaussianPrior<T>>,
    start: &[T],
    opts: &NewtonOptions<T>,
) -> Result<FitOutcome<T>> {
    let p = data.dim;
    if start.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: start.len() });
    }
    if let Some(pr) = prior {
        if pr.mean.len() != p || pr.precision.rows() != p {
            return Err(Error::DimensionMismatch { expected: p, got: pr.mean.len() });
        }
    }
    let mut beta = start.to_vec();
    let mut obj = log_posterior(data, prior, &beta);
    let mut iterations = 0;
    loop {
        let (g, h) = gradient_hessian(data, prior, &beta);
        let grad_norm = inf_norm(&g);
        if grad_norm <= opts.grad_tol {
            return finish(beta, h, obj, iterations, grad_norm);
        }
        if iterations >= opts.max_iter {
            return Err(Error::NotConverged { iterations, grad_norm: grad_norm.to_f64_lossy() });
        }
        iterations += 1;
        let neg_h = h.scale(-T::one());
        let step = match neg_h.cholesky() {
            Ok(c) => c.solve(&g),
            // Flat directions without prior curvature: fall back to a scaled gradient step.
            Err(_) => g.iter().map(|&x| x / (T::one() + grad_norm)).collect(),
        };
        // Once the predicted gain is below what the objective can resolve, the
        // line search is blind; inside the quadratic region the full step is safe.
        let decrement = dot(&g, &step);
        if decrement >= T::zero() && decrement <= T::lit(1e3) * T::epsilon() * (T::one() + obj.abs()) {
            beta = beta.iter().zip(&step).map(|(&b, &s)| b + s).collect();
            obj = log_posterior(data, prior, &beta);
            continue;
        }
        let mut t = T::one();
        let mut improved = false;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<T> = beta.iter().zip(&step).map(|(&b, &s)| b + t * s).collect();
            let cand_obj = log_posterior(data, prior, &cand);
            if cand_obj >= obj && cand_obj.is_finite() {
                beta = cand;
                obj = cand_obj;
                improved = true;
                break;
            }
            t = t * T::lit(0.5);
        }
        if !improved {
            // No ascent at machine precision: the mode is reached as far as
            // the objective can resolve it.
            let (g, h) = gradient_hessian(data, prior, &beta);
            let grad_norm = inf_norm(&g);
            let scale = T::one() + data.events.iter().map(|e| e.weight).sum::<T>();
            if grad_norm <= opts.grad_tol.max(T::epsilon().sqrt() * scale) {
                return finish(beta, h, obj, iterations, grad_norm);
            }
            return Err(Error::NotConverged { iterations, grad_norm: grad_norm.to_f64_lossy() });
        }
    }
}

fn finish<T: Scalar>(beta: Vec<T>, h: Matrix<T>, obj: T, iterations: usize, grad_norm: T) -> Result<FitOutcome<T>> {
    let covariance = h.scale(-T::one()).spd_inverse()?;
    let separation_suspected = beta.iter().any(|b| b.abs() > T::lit(15.0));
    Ok(FitOutcome { beta, covariance, log_posterior: obj, iterations, grad_norm, separation_suspected })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_data(xs: &[f64], ys: &[bool]) -> ChoiceData<f64> {
        let mut d = ChoiceData::new(2);
        for (&x, &y) in xs.iter().zip(ys) {
            d.push(ChoiceEvent::binary(vec![1.0, x], y)).unwrap();
        }
        d
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut d = ChoiceData::new(3);
        d.push(ChoiceEvent::new(vec![vec![1.0f64, 0.0, 0.5], vec![0.0, 1.0, -0.3], vec![0.2, 0.2, 1.0]], 2)).unwrap();
        d.push(ChoiceEvent::new(vec![vec![0.4, 1.0, 0.0], vec![1.0, 0.0, 0.0]], 0).with_weight(2.5)).unwrap();
        let prior = GaussianPrior::ridge(3, 0.3);
        let beta = [0.3f64, -0.7, 0.2];
        let (g, h) = gradient_hessian(&d, Some(&prior), &beta);
        let eps = 1e-6;
        for a in 0..3 {
            let mut up = beta;
            let mut dn = beta;
            up[a] += eps;
            dn[a] -= eps;
            let fd = (log_posterior(&d, Some(&prior), &up) - log_posterior(&d, Some(&prior), &dn)) / (2.0 * eps);
            assert!((fd - g[a]).abs() < 1e-7, "grad {a}: {fd} vs {}", g[a]);
            let (gu, _) = gradient_hessian(&d, Some(&prior), &up);
            let (gd, _) = gradient_hessian(&d, Some(&prior), &dn);
            for b in 0..3 {
                let fdh = (gu[b] - gd[b]) / (2.0 * eps);
                assert!((fdh - h[(a, b)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn binary_fit_solves_score_equations() {
        let xs = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
        let ys = [false, false, true, false, true, false, true, true];
        let d = binary_data(&xs, &ys);
        let out = fit(&d, None, &[0.0, 0.0], &NewtonOptions::default()).unwrap();
        let fitted: f64 = xs.iter().map(|&x| sigmoid(out.beta[0] + out.beta[1] * x)).sum();
        let observed = ys.iter().filter(|&&y| y).count() as f64;
        assert!((fitted - observed).abs() < 1e-8);
        assert!(!out.separation_suspected);
    }

    #[test]
    fn separated_data_needs_ridge() {
        let xs = [-2.0, -1.0, 1.0, 2.0];
        let ys = [false, false, true, true];
        let d = binary_data(&xs, &ys);
        match fit(&d, None, &[0.0, 0.0], &NewtonOptions::default()) {
            Ok(out) => assert!(out.separation_suspected),
            Err(_) => {}
        }
        let ridge = GaussianPrior::ridge(2, 1e-4);
        let out = fit(&d, Some(&ridge), &[0.0, 0.0], &NewtonOptions::default()).unwrap();
        assert!(out.beta[1] > 5.0);
    }

    #[test]
    fn f32_fit_runs() {
        let mut d: ChoiceData<f32> = ChoiceData::new(2);
        for (x, y) in [(-1.0f32, false), (0.0, true), (0.5, false), (1.0, true), (2.0, true)] {
            d.push(ChoiceEvent::binary(vec![1.0, x], y)).unwrap();
        }
        let out = fit(&d, None, &[0.0, 0.0], &NewtonOptions::default()).unwrap();
        assert!(out.beta[1] > 0.0);
    }
}

//! Audit sampling: design-based estimates, the MSE estimator and the test of
//! a register-based estimate against the audit.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum AuditDesign {
    /// Simple random sample without replacement of `n` units.
    Srs { n: usize },
    /// Stratified SRSWOR; `sizes[h]` units from stratum `h`.
    Stratified { sizes: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditUnit {
    /// Index into the audited population.
    pub index: usize,
    pub stratum: usize,
    pub inclusion_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditSample {
    pub units: Vec<AuditUnit>,
    /// `(N_h, n_h)` per stratum.
    pub strata: Vec<(usize, usize)>,
}

impl AuditSample {
    pub fn population(&self) -> usize {
        self.strata.iter().map(|s| s.0).sum()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Draws an audit sample. `strata[k]` is the stratum of unit `k`; it is ignored
/// by the SRS design.
pub fn draw_audit_sample<R: Rng + ?Sized>(
    strata: &[usize],
    design: &AuditDesign,
    rng: &mut R,
) -> Result<AuditSample> {
    let big_n = strata.len();
    match design {
        AuditDesign::Srs { n } => {
            if *n > big_n {
                return Err(Error::InvalidArgument(format!("sample size {n} exceeds population {big_n}")));
            }
            let pi = if big_n == 0 { 1.0 } else { *n as f64 / big_n as f64 };
            let mut idx = index::sample(rng, big_n, *n).into_vec();
            idx.sort_unstable();
            Ok(AuditSample {
                units: idx.into_iter().map(|index| AuditUnit { index, stratum: 0, inclusion_prob: pi }).collect(),
                strata: vec![(big_n, *n)],
            })
        }
        AuditDesign::Stratified { sizes } => {
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
            for (k, &h) in strata.iter().enumerate() {
                members
                    .get_mut(h)
                    .ok_or_else(|| Error::InvalidArgument(format!("unit {k} in stratum {h} with no sample size")))?
                    .push(k);
            }
            let mut units = Vec::new();
            let mut info = Vec::new();
            for (h, (m, &n_h)) in members.iter().zip(sizes).enumerate() {
                if m.is_empty() {
                    return Err(Error::EmptyInput(format!("stratum {h} is empty")));
                }
                if n_h > m.len() {
                    return Err(Error::InvalidArgument(format!(
                        "stratum {h}: sample size {n_h} exceeds stratum size {}",
                        m.len()
                    )));
                }
                let pi = n_h as f64 / m.len() as f64;
                for i in index::sample(rng, m.len(), n_h) {
                    units.push(AuditUnit { index: m[i], stratum: h, inclusion_prob: pi });
                }
                info.push((m.len(), n_h));
            }
            units.sort_by_key(|u| u.index);
            Ok(AuditSample { units, strata: info })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditTarget {
    Total,
    /// Population mean, e.g. an erroneous-enumeration rate.
    Mean,
}

/// Horvitz–Thompson `θ̂` and the stratified SRSWOR variance estimator
/// `Σ_h N_h²(1 − f_h)s_h²/n_h`. `values[k]` is the true value of unit `k`.
pub fn audit_estimate(sample: &AuditSample, values: &[f64], target: AuditTarget) -> Result<(f64, f64)> {
    if sample.units.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "audit sample of size {} leaves the variance undefined",
            sample.units.len()
        )));
    }
    let h_count = sample.strata.len();
    let mut by_stratum: Vec<Vec<f64>> = vec![Vec::new(); h_count];
    for u in &sample.units {
        let y = *values.get(u.index).ok_or_else(|| Error::InvalidArgument(format!("no value for unit {}", u.index)))?;
        by_stratum
            .get_mut(u.stratum)
            .ok_or_else(|| Error::InvalidArgument(format!("unit {} in unknown stratum {}", u.index, u.stratum)))?
            .push(y);
    }
    let (mut total, mut var) = (0.0, 0.0);
    for (h, ys) in by_stratum.iter().enumerate() {
        let (big_n, n) = sample.strata[h];
        if n != ys.len() {
            return Err(Error::DimensionMismatch { expected: n, got: ys.len() });
        }
        if n == 0 {
            if big_n > 0 {
                return Err(Error::EmptyInput(format!("stratum {h} has no sampled units")));
            }
            continue;
        }
        let nf = n as f64;
        let mean = ys.iter().sum::<f64>() / nf;
        total += big_n as f64 * mean;
        let fpc = 1.0 - nf / big_n as f64;
        if fpc > 0.0 {
            if n < 2 {
                return Err(Error::InvalidArgument(format!("stratum {h} has a single sampled unit")));
            }
            let s2 = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            var += (big_n as f64).powi(2) * fpc * s2 / nf;
        }
    }
    match target {
        AuditTarget::Total => Ok((total, var)),
        AuditTarget::Mean => {
            let big_n = sample.population() as f64;
            Ok((total / big_n, var / (big_n * big_n)))
        }
    }
}

/// `(θ* − θ̂)² − V̂`. Left untruncated: a negative value is itself informative.
pub fn mse_estimate(theta_star: f64, theta_hat: f64, v_hat: f64) -> f64 {
    (theta_star - theta_hat).powi(2) - v_hat
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct H0Test {
    pub z: f64,
    pub p_value: f64,
    pub reject: bool,
    /// `V̂ = 0` with `θ* ≠ θ̂`: infinite `z`.
    pub degenerate: bool,
}

/// Two-sided normal test of `H₀: θ* = θ₀`; rejects when `|z|` exceeds the
/// `1 − α/2` normal quantile.
pub fn test_h0(theta_star: f64, theta_hat: f64, v_hat: f64, alpha: f64) -> Result<H0Test> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("level {alpha} outside (0, 1)")));
    }
    if !(v_hat >= 0.0 && theta_star.is_finite() && theta_hat.is_finite()) {
        return Err(Error::InvalidArgument("test inputs must be finite with V̂ ≥ 0".into()));
    }
    let diff = theta_star - theta_hat;
    if v_hat == 0.0 {
        return Ok(if diff == 0.0 {
            H0Test { z: 0.0, p_value: 1.0, reject: false, degenerate: false }
        } else {
            H0Test { z: diff.signum() * f64::INFINITY, p_value: 0.0, reject: true, degenerate: true }
        });
    }
    let z = diff / v_hat.sqrt();
    let normal = Normal::standard();
    let p_value = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
    let crit = normal.inverse_cdf(1.0 - alpha / 2.0);
    Ok(H0Test { z, p_value, reject: z.abs() > crit, degenerate: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditResult {
    pub scenario: String,
    pub epoch: u32,
    pub estimator: String,
    pub theta_star: f64,
    pub theta_hat: f64,
    pub v_hat: f64,
    pub mse_hat: f64,
    pub test: H0Test,
}

impl AuditResult {
    pub fn new(
        scenario: &str,
        epoch: u32,
        estimator: &str,
        theta_star: f64,
        theta_hat: f64,
        v_hat: f64,
        alpha: f64,
    ) -> Result<Self> {
        Ok(Self {
            scenario: scenario.to_string(),
            epoch,
            estimator: estimator.to_string(),
            theta_star,
            theta_hat,
            v_hat,
            mse_hat: mse_estimate(theta_star, theta_hat, v_hat),
            test: test_h0(theta_star, theta_hat, v_hat, alpha)?,
        })
    }
}

pub const AUDIT_HEADER: [&str; 9] = ["scenario", "epoch", "estimator", "theta_star", "theta_hat", "v_hat", "mse_hat", "z", "p"];

pub fn write_audit_results<W: Write>(rows: &[AuditResult], header: bool, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record(AUDIT_HEADER)?;
    }
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.epoch.to_string(),
            r.estimator.clone(),
            r.theta_star.to_string(),
            r.theta_hat.to_string(),
            r.v_hat.to_string(),
            r.mse_hat.to_string(),
            r.test.z.to_string(),
            r.test.p_value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::replicate_rng;

    #[test]
    fn census_sample_is_exact() {
        let strata = vec![0; 20];
        let s = draw_audit_sample(&strata, &AuditDesign::Srs { n: 20 }, &mut replicate_rng(1, 0)).unwrap();
        assert!(s.units.iter().all(|u| u.inclusion_prob == 1.0));
        let y: Vec<f64> = (0..20).map(|k| (k % 3) as f64).collect();
        let (t, v) = audit_estimate(&s, &y, AuditTarget::Total).unwrap();
        assert_eq!(t, y.iter().sum::<f64>());
        assert_eq!(v, 0.0);
    }

    #[test]
    fn srs_inclusion_probabilities() {
        let s = draw_audit_sample(&vec![0; 1000], &AuditDesign::Srs { n: 100 }, &mut replicate_rng(2, 0)).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.units.iter().all(|u| (u.inclusion_prob - 0.1).abs() < 1e-15));
        assert!(draw_audit_sample(&vec![0; 10], &AuditDesign::Srs { n: 11 }, &mut replicate_rng(2, 0)).is_err());
    }

    #[test]
    fn stratified_inclusion_probabilities() {
        let strata: Vec<usize> = (0..100).map(|k| usize::from(k >= 80)).collect();
        let d = AuditDesign::Stratified { sizes: vec![8, 10] };
        let s = draw_audit_sample(&strata, &d, &mut replicate_rng(3, 0)).unwrap();
        for u in &s.units {
            assert_eq!(u.inclusion_prob, if u.stratum == 0 { 0.1 } else { 0.5 });
            assert_eq!(u.stratum, strata[u.index]);
        }
        let bad = AuditDesign::Stratified { sizes: vec![8, 10, 1] };
        assert!(matches!(draw_audit_sample(&strata, &bad, &mut replicate_rng(3, 0)), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn stratified_hand_check() {
        // 10 records; stratum 0 = 0..6 (N = 6, n = 3), stratum 1 = 6..10 (N = 4, n = 2)
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 5.0, 3.0, 4.0, 2.0];
        let unit = |index, stratum, p| AuditUnit { index, stratum, inclusion_prob: p };
        let s = AuditSample {
            units: vec![unit(0, 0, 0.5), unit(1, 0, 0.5), unit(3, 0, 0.5), unit(6, 1, 0.5), unit(9, 1, 0.5)],
            strata: vec![(6, 3), (4, 2)],
        };
        let (t, v) = audit_estimate(&s, &y, AuditTarget::Total).unwrap();
        // ȳ0 = 2/3, s0² = 1/3; ȳ1 = 3.5, s1² = 4.5
        assert!((t - (6.0 * 2.0 / 3.0 + 4.0 * 3.5)).abs() < 1e-12);
        let v_hand = 36.0 * 0.5 * (1.0 / 3.0) / 3.0 + 16.0 * 0.5 * 4.5 / 2.0;
        assert!((v - v_hand).abs() < 1e-12);
        let (m, vm) = audit_estimate(&s, &y, AuditTarget::Mean).unwrap();
        assert!((m - t / 10.0).abs() < 1e-12 && (vm - v / 100.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_samples_are_rejected() {
        let s = draw_audit_sample(&vec![0; 10], &AuditDesign::Srs { n: 1 }, &mut replicate_rng(4, 0)).unwrap();
        assert!(audit_estimate(&s, &[0.0; 10], AuditTarget::Mean).is_err());
    }

    fn population(n: usize, rate: f64, seed: u64) -> Vec<f64> {
        let mut rng = replicate_rng(seed, 0);
        (0..n).map(|_| f64::from(u8::from(rng.random_bool(rate)))).collect()
    }

    #[test]
    fn design_unbiasedness_and_variance() {
        let y = population(1000, 0.07, 5);
        let theta0 = y.iter().sum::<f64>() / 1000.0;
        let strata: Vec<usize> = (0..1000).map(|k| k % 3).collect();
        for design in [AuditDesign::Srs { n: 100 }, AuditDesign::Stratified { sizes: vec![20, 40, 40] }] {
            let reps = 2000;
            let est: Vec<(f64, f64)> = (0..reps)
                .map(|r| {
                    let s = draw_audit_sample(&strata, &design, &mut replicate_rng(6, r)).unwrap();
                    audit_estimate(&s, &y, AuditTarget::Mean).unwrap()
                })
                .collect();
            let mean = est.iter().map(|e| e.0).sum::<f64>() / reps as f64;
            let emp_var = est.iter().map(|e| (e.0 - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
            let se = (emp_var / reps as f64).sqrt();
            assert!((mean - theta0).abs() < 3.0 * se, "{design:?}: {mean} vs {theta0}");
            let mean_v = est.iter().map(|e| e.1).sum::<f64>() / reps as f64;
            assert!((mean_v / emp_var - 1.0).abs() < 0.1, "{mean_v} vs {emp_var}");
        }
    }

    #[test]
    fn mse_formula() {
        assert_eq!(mse_estimate(0.3, 0.3, 0.01), -0.01);
        assert!((mse_estimate(0.5, 0.3, 0.0) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn mse_unbiased_and_dilemma() {
        let y = population(2000, 0.1, 7);
        let theta0 = y.iter().sum::<f64>() / 2000.0;
        let strata = vec![0; 2000];
        for (bias, n) in [(0.05, 200), (0.005, 100)] {
            let theta_star = theta0 + bias;
            let reps = 2000;
            let mse: Vec<f64> = (0..reps)
                .map(|r| {
                    let s = draw_audit_sample(&strata, &AuditDesign::Srs { n }, &mut replicate_rng(8, r)).unwrap();
                    let (t, v) = audit_estimate(&s, &y, AuditTarget::Mean).unwrap();
                    mse_estimate(theta_star, t, v)
                })
                .collect();
            let mean = mse.iter().sum::<f64>() / reps as f64;
            let sd = (mse.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            assert!((mean - bias * bias).abs() < 3.0 * sd / (reps as f64).sqrt(), "{mean} vs {}", bias * bias);
            let negative = mse.iter().filter(|&&m| m < 0.0).count() as f64 / reps as f64;
            if bias < 0.01 {
                assert!(negative > 0.3, "{negative}");
            }
        }
    }

    #[test]
    fn test_examples() {
        let t = test_h0(0.2, 0.2, 0.01, 0.05).unwrap();
        assert_eq!(t.p_value, 1.0);
        assert!(!t.reject);
        let crit = Normal::standard().inverse_cdf(0.975);
        let t = test_h0(crit, 0.0, 1.0, 0.05).unwrap();
        assert!(!t.reject, "{t:?}");
        assert!((t.p_value - 0.05).abs() < 1e-8, "{t:?}");
        assert!(test_h0(1.97, 0.0, 1.0, 0.05).unwrap().reject);
        let t = test_h0(0.3, 0.2, 0.0, 0.05).unwrap();
        assert!(t.reject && t.degenerate && t.z.is_infinite());
    }

    #[test]
    fn test_size_under_null() {
        let y = population(5000, 0.2, 9);
        let theta0 = y.iter().sum::<f64>() / 5000.0;
        let strata = vec![0; 5000];
        let reps = 2000;
        let rejections = (0..reps)
            .filter(|&r| {
                let s = draw_audit_sample(&strata, &AuditDesign::Srs { n: 400 }, &mut replicate_rng(10, r)).unwrap();
                let (t, v) = audit_estimate(&s, &y, AuditTarget::Mean).unwrap();
                test_h0(theta0, t, v, 0.05).unwrap().reject
            })
            .count();
        let size = rejections as f64 / reps as f64;
        assert!((size - 0.05).abs() <= 0.02, "{size}");
    }

    #[test]
    fn results_csv() {
        let r = AuditResult::new("basic", 3, "fractional", 0.3, 0.3, 0.01, 0.05).unwrap();
        let mut out = Vec::new();
        write_audit_results(&[r], true, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), AUDIT_HEADER.join(","));
        assert_eq!(text.lines().nth(1).unwrap(), "basic,3,fractional,0.3,0.3,0.01,-0.01,0,1");
    }
}

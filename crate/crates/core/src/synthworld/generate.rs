use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Geometric, Normal, Poisson};

use super::config::{RegisterConfig, ScenarioConfig};
use super::{AddressId, Locality, LocalityMap, PersonId, PersonRecord, SolAddress, TruePerson, WorldTruth};
use crate::error::Result;
use crate::features::{self, covariate_cell};
use crate::logit::sigmoid;

use crate::features::MAX_SOL;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Generating placement coefficients `[address block | displacement block]`.
///
/// The displacement block depends on `z2` only, with group rates
/// `rate·(1 ∓ tilt)`; `z2` is Bernoulli(1/2) for residents, so the marginal
/// displacement probability is exactly `displacement_rate`.
pub fn placement_truth(cfg: &RegisterConfig) -> Vec<f64> {
    let [a, b, c] = cfg.address_coefficients;
    let rate = cfg.displacement_rate;
    let (g0, g2) = if rate == 0.0 {
        (f64::NEG_INFINITY, 0.0)
    } else {
        let lo = rate * (1.0 - cfg.displacement_tilt);
        let hi = rate * (1.0 + cfg.displacement_tilt);
        if lo == 0.0 {
            // tilt = 1 puts the whole displacement on the z2 = 1 group
            (f64::NEG_INFINITY, 0.0)
        } else {
            (logit(lo), logit(hi) - logit(lo))
        }
    };
    vec![a, b, c, g0, 0.0, g2]
}

/// Displacement probability under the generating model; handles the
/// degenerate tilt = 1 case that has no finite coefficients.
fn generating_xi(cfg: &RegisterConfig, beta: &[f64], z: &[f64]) -> f64 {
    if beta[3] == f64::NEG_INFINITY {
        if cfg.displacement_rate > 0.0 && z[1] >= 0.5 {
            return cfg.displacement_rate * (1.0 + cfg.displacement_tilt);
        }
        return 0.0;
    }
    let x = features::covariate_design(z);
    sigmoid(x.iter().zip(&beta[3..]).map(|(a, b)| a * b).sum::<f64>())
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    Bernoulli::new(p.clamp(0.0, 1.0)).expect("probability in [0,1]").sample(rng)
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

pub(crate) fn random_address<R: Rng + ?Sized>(rng: &mut R, map: LocalityMap, locality: usize) -> AddressId {
    AddressId(locality as u32 * map.addresses_per_locality + rng.random_range(0..map.addresses_per_locality))
}

fn neighbour<R: Rng + ?Sized>(rng: &mut R, m: usize, i: usize) -> usize {
    match m {
        1 => 0,
        2 => 1 - i,
        _ if rng.random_bool(0.5) => (i + 1) % m,
        _ => (i + m - 1) % m,
    }
}

pub(crate) fn resident_covariates<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    vec![std_normal(rng), f64::from(u8::from(rng.random_bool(0.5)))]
}

pub(crate) fn attribute_value<R: Rng + ?Sized>(rng: &mut R, z: &[f64]) -> f64 {
    20.0 + 5.0 * z[0] + 3.0 * std_normal(rng)
}

/// Composite score over `sol_sources` administrative sources.
pub(crate) fn sign_of_life<R: Rng + ?Sized>(rng: &mut R, cfg: &RegisterConfig, in_scope: bool) -> f64 {
    let s = cfg.sol_sources;
    let active = (0..s)
        .filter(|&j| {
            let base = if s == 1 { 0.6 } else { 0.25 + 0.65 * j as f64 / (s - 1) as f64 };
            let p = if in_scope { base } else { base * cfg.ghost_activity };
            bernoulli(rng, p)
        })
        .count();
    active as f64 / s as f64
}

fn draw_q<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> usize {
    let extra = if mean > 1.0 {
        Poisson::new(mean - 1.0).expect("positive Poisson mean").sample(rng) as usize
    } else {
        0
    };
    1 + extra.min(MAX_SOL - 1)
}

fn draw_distinct<R: Rng + ?Sized>(
    rng: &mut R,
    map: LocalityMap,
    locality: usize,
    taken: &[AddressId],
) -> AddressId {
    loop {
        let a = random_address(rng, map, locality);
        if !taken.contains(&a) {
            return a;
        }
    }
}

/// Draws a sign-of-life listing for a person.
///
/// For an in-scope person the outcome (displaced, or which position holds the
/// true address) is sampled from the placement model `beta` given freshly
/// drawn address features, so the generating `(μ, ξ)` are known exactly.
pub(crate) fn draw_listing<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &RegisterConfig,
    map: LocalityMap,
    beta: &[f64],
    true_address: Option<AddressId>,
    fallback: AddressId,
    z: &[f64],
) -> Vec<SolAddress> {
    let q = draw_q(rng, cfg.mean_sol_addresses);
    let mut sol: Vec<SolAddress> = (0..q)
        .map(|_| SolAddress {
            address: AddressId(u32::MAX),
            source_a: rng.random_bool(0.6),
            source_b: rng.random_bool(0.5),
            recency: rng.random::<f64>(),
        })
        .collect();
    let m = map.localities;
    let mut taken: Vec<AddressId> = Vec::with_capacity(q + 1);
    match true_address {
        Some(t) => {
            let home = map.locality_of(t).expect("true address inside universe");
            taken.push(t);
            let xi = generating_xi(cfg, beta, z);
            let displaced = bernoulli(rng, xi);
            let true_pos = if displaced {
                None
            } else {
                let (mu, _) = features::placement_probabilities::<f64>(
                    &[beta[0], beta[1], beta[2], f64::NEG_INFINITY, 0.0, 0.0],
                    &sol,
                    z,
                );
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pos = q - 1;
                for (j, p) in mu.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pos = j;
                        break;
                    }
                }
                Some(pos)
            };
            for (j, slot) in sol.iter_mut().enumerate() {
                if Some(j) == true_pos {
                    slot.address = t;
                    continue;
                }
                let u: f64 = rng.random();
                let loc = if displaced {
                    if u < cfg.neighbour_prob {
                        neighbour(rng, m, home)
                    } else {
                        rng.random_range(0..m)
                    }
                } else if u < cfg.neighbour_prob {
                    neighbour(rng, m, home)
                } else if u < cfg.neighbour_prob + cfg.same_locality_prob {
                    home
                } else {
                    rng.random_range(0..m)
                };
                let a = draw_distinct(rng, map, loc, &taken);
                taken.push(a);
                slot.address = a;
            }
        }
        None => {
            sol[0].address = fallback;
            taken.push(fallback);
            for slot in sol.iter_mut().skip(1) {
                let loc = rng.random_range(0..m);
                let a = draw_distinct(rng, map, loc, &taken);
                taken.push(a);
                slot.address = a;
            }
        }
    }
    sol
}

/// Generates `N` residents in families, plus out-of-scope persons who still
/// hold register entries.
///
/// The out-of-scope count is negative binomial `NB(N, 1 − e)`, so the share of
/// erroneous records in a full-coverage register has expectation `e`.
pub fn generate_world<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<WorldTruth> {
    cfg.validate()?;
    let m = cfg.world.localities;
    let apl = cfg.world.addresses_per_locality;
    let map = LocalityMap::new(m, apl);
    let localities =
        (0..m).map(|i| Locality { index: i, first_address: i as u32 * apl, n_addresses: apl }).collect();
    let n = cfg.world.population;
    let mut persons = Vec::with_capacity(n + n / 8);
    let mut next_id = 0u64;
    let mut family = 0u64;
    while persons.len() < n {
        let size = draw_q_family(rng, cfg.world.mean_family_size).min(n - persons.len());
        let loc = rng.random_range(0..m);
        let home = random_address(rng, map, loc);
        for _ in 0..size {
            let z = resident_covariates(rng);
            let attribute = attribute_value(rng, &z);
            persons.push(TruePerson {
                id: PersonId(next_id),
                alive_in_scope: true,
                true_address: Some(home),
                covariates: z,
                attribute,
                family,
                last_address: home,
            });
            next_id += 1;
        }
        family += 1;
    }
    let e = cfg.register.erroneous_rate;
    let ghosts = if e > 0.0 && n > 0 {
        let geo = Geometric::new(1.0 - e).expect("success probability in (0,1]");
        (0..n).map(|_| geo.sample(rng)).sum::<u64>()
    } else {
        0
    };
    for _ in 0..ghosts {
        let z = vec![
            cfg.register.ghost_z1_shift + std_normal(rng),
            f64::from(u8::from(bernoulli(rng, cfg.register.ghost_z2_prob))),
        ];
        let attribute = attribute_value(rng, &z);
        let loc = rng.random_range(0..m);
        let last = random_address(rng, map, loc);
        persons.push(TruePerson {
            id: PersonId(next_id),
            alive_in_scope: false,
            true_address: None,
            covariates: z,
            attribute,
            family,
            last_address: last,
        });
        next_id += 1;
        family += 1;
    }
    Ok(WorldTruth {
        persons,
        localities,
        time: 0,
        placement_beta: placement_truth(&cfg.register),
        next_id,
        next_family: family,
    })
}

fn draw_q_family<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> usize {
    if mean > 1.0 {
        1 + (Poisson::new(mean - 1.0).expect("positive mean").sample(rng) as usize).min(5)
    } else {
        1
    }
}

pub(crate) fn make_record<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &ScenarioConfig,
    map: LocalityMap,
    beta: &[f64],
    p: &TruePerson,
) -> PersonRecord {
    let sd = cfg.register.attribute_noise_sd;
    let noise = if sd > 0.0 { sd * std_normal(rng) } else { 0.0 };
    let sol = draw_listing(rng, &cfg.register, map, beta, p.true_address, p.last_address, &p.covariates);
    PersonRecord {
        id: p.id,
        sol,
        covariates: p.covariates.clone(),
        register_attribute: Some(p.attribute + noise),
        attribute_error_var: sd * sd,
        core: false,
        label: None,
        label_epoch: None,
        family: p.family,
        cell: covariate_cell(&p.covariates),
        sol_score: sign_of_life(rng, &cfg.register, p.alive_in_scope),
    }
}

/// Derives the register `P` from the truth: every person (in or out of
/// scope) is listed unless missed at `missing_rate`.
pub fn derive_pd<R: Rng + ?Sized>(world: &WorldTruth, cfg: &ScenarioConfig, rng: &mut R) -> Result<Vec<PersonRecord>> {
    cfg.validate()?;
    let map = world.locality_map();
    let missing = cfg.register.missing_rate;
    let mut pd = Vec::with_capacity(world.persons.len());
    for p in &world.persons {
        if missing > 0.0 && bernoulli(rng, missing) {
            continue;
        }
        pd.push(make_record(rng, cfg, map, &world.placement_beta, p));
    }
    Ok(pd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{replicate_rng, Label};

    fn cfg(n: usize) -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.world.population = n;
        c
    }

    #[test]
    fn empty_world_has_zero_counts() {
        let w = generate_world(&cfg(0), &mut replicate_rng(3, 0)).unwrap();
        assert_eq!(w.population(), 0);
        assert_eq!(w.true_counts(), vec![0; 4]);
    }

    #[test]
    fn same_seed_same_world() {
        let c = cfg(1000);
        let a = generate_world(&c, &mut replicate_rng(7, 0)).unwrap();
        let b = generate_world(&c, &mut replicate_rng(7, 0)).unwrap();
        assert_eq!(a, b);
        let pa = derive_pd(&a, &c, &mut replicate_rng(7, 1)).unwrap();
        let pb = derive_pd(&b, &c, &mut replicate_rng(7, 1)).unwrap();
        assert_eq!(pa, pb);
        let other = generate_world(&c, &mut replicate_rng(8, 0)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn world_invariants_hold() {
        let c = cfg(2000);
        let w = generate_world(&c, &mut replicate_rng(11, 0)).unwrap();
        let counts = w.true_counts();
        assert_eq!(counts.iter().sum::<usize>(), 2000);
        let map = w.locality_map();
        for p in &w.persons {
            match p.true_address {
                Some(a) => {
                    assert!(p.alive_in_scope);
                    let owners = w.localities.iter().filter(|l| l.contains(a)).count();
                    assert_eq!(owners, 1);
                    assert!(map.locality_of(a).is_some());
                }
                None => assert!(!p.alive_in_scope),
            }
        }
    }

    #[test]
    fn error_free_register_lists_every_true_address() {
        let mut c = cfg(3000);
        c.register.erroneous_rate = 0.0;
        c.register.missing_rate = 0.0;
        c.register.displacement_rate = 0.0;
        let w = generate_world(&c, &mut replicate_rng(5, 0)).unwrap();
        let pd = derive_pd(&w, &c, &mut replicate_rng(5, 1)).unwrap();
        assert_eq!(pd.len(), w.population());
        for r in &pd {
            assert!(r.has_distinct_addresses());
            assert!(matches!(w.truth_label(r), Label::At(_)));
            assert!((1..=MAX_SOL).contains(&r.q()));
        }
    }

    #[test]
    fn placement_truth_reproduces_marginal_rate() {
        let rc = RegisterConfig::default();
        let b = placement_truth(&rc);
        let lo = sigmoid(b[3]);
        let hi = sigmoid(b[3] + b[5]);
        assert!(((lo + hi) / 2.0 - rc.displacement_rate).abs() < 1e-15);
    }
}

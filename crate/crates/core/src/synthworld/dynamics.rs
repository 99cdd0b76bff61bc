use rand::Rng;
use rand_distr::{Binomial, Distribution};

use super::config::ScenarioConfig;
use super::generate::{attribute_value, make_record, random_address, resident_covariates, sign_of_life, std_normal};
use super::{Label, PersonId, PersonRecord, TruePerson, WorldTruth};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoveEvent {
    pub id: PersonId,
    pub from: usize,
    pub to: usize,
    /// The register picked the move up this epoch.
    pub notified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurveyObservation {
    pub id: PersonId,
    pub label: Label,
    pub inclusion_prob: f64,
}

/// Raw observations behind `S_t`, `B_t` and `A_t` for one epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateBatch {
    pub epoch: u32,
    /// Coverage-survey sample with known inclusion probabilities.
    pub survey: Vec<SurveyObservation>,
    /// Records whose labels were refreshed by register updates.
    pub register_updates: Vec<(PersonId, Label)>,
    pub moves: Vec<MoveEvent>,
    /// Records removed after a notified death or emigration.
    pub deregistered: Vec<PersonId>,
}

/// Per-locality demographic components for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventLog {
    pub births: Vec<usize>,
    pub deaths: Vec<usize>,
    pub immigration: Vec<usize>,
    pub emigration: Vec<usize>,
    pub moves_in: Vec<usize>,
    pub moves_out: Vec<usize>,
}

impl EventLog {
    fn new(m: usize) -> Self {
        Self {
            births: vec![0; m],
            deaths: vec![0; m],
            immigration: vec![0; m],
            emigration: vec![0; m],
            moves_in: vec![0; m],
            moves_out: vec![0; m],
        }
    }

    pub fn total_births(&self) -> usize {
        self.births.iter().sum()
    }

    pub fn total_deaths(&self) -> usize {
        self.deaths.iter().sum()
    }

    pub fn total_immigration(&self) -> usize {
        self.immigration.iter().sum()
    }

    pub fn total_emigration(&self) -> usize {
        self.emigration.iter().sum()
    }

    /// `births − deaths + immigration − emigration`.
    pub fn net_change(&self) -> i64 {
        self.total_births() as i64 - self.total_deaths() as i64 + self.total_immigration() as i64
            - self.total_emigration() as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub world: WorldTruth,
    pub pd: Vec<PersonRecord>,
    pub batch: UpdateBatch,
    pub events: EventLog,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fate {
    Stay,
    Died,
    Emigrated,
    Moved,
}

/// Advances the world by one epoch and produces the register-side view.
///
/// Residents die, emigrate or move; births join a resident's household and
/// immigrants arrive at random addresses. The register notices each move,
/// death or emigration with `register_update_rate`; noticed movers get a fresh
/// listing with a known label, noticed leavers are deregistered, and unnoticed
/// leavers stay on as erroneous records. Finally a Poisson coverage survey is
/// drawn from the updated register.
pub fn step_world<R: Rng + ?Sized>(
    world: &WorldTruth,
    pd: &[PersonRecord],
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    cfg.validate()?;
    let dyn_cfg = &cfg.dynamics;
    let map = world.locality_map();
    let m = map.localities;
    let mut next = world.clone();
    next.time = world.time + 1;
    let epoch = next.time;
    if dyn_cfg.drift_sd > 0.0 {
        for b in next.placement_beta.iter_mut().take(3) {
            *b += dyn_cfg.drift_sd * std_normal(rng);
        }
    }
    let mut events = EventLog::new(m);
    let residents: Vec<usize> =
        world.persons.iter().enumerate().filter(|(_, p)| p.alive_in_scope).map(|(i, _)| i).collect();
    let n_t = residents.len() as u64;
    let births = binomial(rng, n_t, dyn_cfg.birth_rate);
    let arrivals = binomial(rng, n_t, dyn_cfg.immigration_rate);

    let mut fates = vec![Fate::Stay; world.persons.len()];
    let mut moves = Vec::new();
    for &i in &residents {
        let p = &mut next.persons[i];
        let here = p.true_address.expect("resident has an address");
        let from = map.locality_of(here).expect("address inside universe");
        let u: f64 = rng.random();
        if u < dyn_cfg.death_rate {
            fates[i] = Fate::Died;
            events.deaths[from] += 1;
        } else if u < dyn_cfg.death_rate + dyn_cfg.emigration_rate {
            fates[i] = Fate::Emigrated;
            events.emigration[from] += 1;
        } else if u < dyn_cfg.death_rate + dyn_cfg.emigration_rate + dyn_cfg.move_rate {
            fates[i] = Fate::Moved;
            let to = if rng.random_bool(0.5) { from } else { rng.random_range(0..m) };
            let dest = loop {
                let a = random_address(rng, map, to);
                if a != here {
                    break a;
                }
            };
            p.true_address = Some(dest);
            p.last_address = dest;
            events.moves_out[from] += 1;
            events.moves_in[to] += 1;
            moves.push(MoveEvent { id: p.id, from, to, notified: false });
            continue;
        } else {
            continue;
        }
        p.alive_in_scope = false;
        p.true_address = None;
    }

    let mut newcomers = Vec::new();
    for _ in 0..births {
        let mother = &world.persons[residents[rng.random_range(0..residents.len())]];
        let home = mother.true_address.expect("resident has an address");
        newcomers.push((home, mother.family));
        events.births[map.locality_of(home).expect("inside universe")] += 1;
    }
    for _ in 0..arrivals {
        let loc = rng.random_range(0..m);
        let home = random_address(rng, map, loc);
        newcomers.push((home, next.next_family));
        next.next_family += 1;
        events.immigration[map.locality_of(home).expect("inside universe")] += 1;
    }
    let first_new = next.persons.len();
    for (home, family) in newcomers {
        let z = resident_covariates(rng);
        let attribute = attribute_value(rng, &z);
        next.persons.push(TruePerson {
            id: PersonId(next.next_id),
            alive_in_scope: true,
            true_address: Some(home),
            covariates: z,
            attribute,
            family,
            last_address: home,
        });
        next.next_id += 1;
    }

    let update_rate = dyn_cfg.register_update_rate;
    let mut batch = UpdateBatch { epoch, ..UpdateBatch::default() };
    let mut out = Vec::with_capacity(pd.len() + next.persons.len() - first_new);
    let mut notified_moves = std::collections::HashSet::new();
    for r in pd {
        let idx = next.persons.binary_search_by_key(&r.id, |p| p.id).expect("record person exists");
        let mut rec = r.clone();
        match fates[idx] {
            Fate::Died | Fate::Emigrated if rng.random_bool(update_rate) => {
                batch.deregistered.push(r.id);
                continue;
            }
            Fate::Moved if rng.random_bool(update_rate) => {
                let person = &next.persons[idx];
                rec.sol = make_record(rng, cfg, map, &next.placement_beta, person).sol;
                let label = next.truth_label(&rec);
                rec.label = Some(label);
                rec.label_epoch = Some(epoch);
                batch.register_updates.push((r.id, label));
                notified_moves.insert(r.id);
            }
            _ => {}
        }
        out.push(rec);
    }
    for mv in &mut moves {
        mv.notified = notified_moves.contains(&mv.id);
    }
    for person in &next.persons[first_new..] {
        if cfg.register.missing_rate > 0.0 && rng.random_bool(cfg.register.missing_rate) {
            continue;
        }
        let mut rec = make_record(rng, cfg, map, &next.placement_beta, person);
        let label = next.truth_label(&rec);
        rec.label = Some(label);
        rec.label_epoch = Some(epoch);
        batch.register_updates.push((rec.id, label));
        out.push(rec);
    }
    for rec in &mut out {
        let in_scope = next.person(rec.id).is_some_and(|p| p.alive_in_scope);
        rec.sol_score = sign_of_life(rng, &cfg.register, in_scope);
    }
    for rec in &mut out {
        let rate = match cfg.survey.stratum_rates.as_slice() {
            [core, noncore] => {
                if rec.core {
                    *core
                } else {
                    *noncore
                }
            }
            _ => cfg.survey.coverage_fraction,
        };
        if rate > 0.0 && rng.random_bool(rate) {
            let label = next.truth_label(rec);
            rec.label = Some(label);
            rec.label_epoch = Some(epoch);
            batch.survey.push(SurveyObservation { id: rec.id, label, inclusion_prob: rate });
        }
    }
    batch.moves = moves;
    Ok(StepOutcome { world: next, pd: out, batch, events })
}

fn binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p == 0.0 {
        0
    } else {
        Binomial::new(n, p).expect("valid binomial").sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{derive_pd, generate_world, replicate_rng};

    fn base(n: usize) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.world.population = n;
        cfg
    }

    #[test]
    fn zero_rates_leave_world_unchanged() {
        let mut cfg = base(800);
        cfg.dynamics = crate::synthworld::DynamicsConfig {
            move_rate: 0.0,
            birth_rate: 0.0,
            death_rate: 0.0,
            immigration_rate: 0.0,
            emigration_rate: 0.0,
            register_update_rate: 0.7,
            drift_sd: 0.0,
        };
        cfg.survey.coverage_fraction = 0.0;
        let w = generate_world(&cfg, &mut replicate_rng(2, 0)).unwrap();
        let pd = derive_pd(&w, &cfg, &mut replicate_rng(2, 1)).unwrap();
        let s = step_world(&w, &pd, &cfg, &mut replicate_rng(2, 2)).unwrap();
        assert_eq!(s.world.persons, w.persons);
        assert_eq!(s.world.placement_beta, w.placement_beta);
        assert_eq!(s.world.time, 1);
        assert!(s.batch.register_updates.is_empty());
        assert!(s.batch.survey.is_empty());
        assert_eq!(s.pd.len(), pd.len());
    }

    #[test]
    fn population_is_conserved_exactly() {
        let cfg = base(3000);
        let mut w = generate_world(&cfg, &mut replicate_rng(9, 0)).unwrap();
        let mut pd = derive_pd(&w, &cfg, &mut replicate_rng(9, 1)).unwrap();
        for t in 0..5u64 {
            let before = w.population() as i64;
            let before_counts = w.true_counts();
            let s = step_world(&w, &pd, &cfg, &mut replicate_rng(9, 10 + t)).unwrap();
            assert_eq!(s.world.population() as i64, before + s.events.net_change());
            let after = s.world.true_counts();
            for i in 0..after.len() {
                let e = &s.events;
                let expect = before_counts[i] as i64 + e.births[i] as i64 - e.deaths[i] as i64
                    + e.immigration[i] as i64
                    - e.emigration[i] as i64
                    + e.moves_in[i] as i64
                    - e.moves_out[i] as i64;
                assert_eq!(after[i] as i64, expect);
            }
            w = s.world;
            pd = s.pd;
        }
    }

    #[test]
    fn step_is_deterministic() {
        let cfg = base(500);
        let w = generate_world(&cfg, &mut replicate_rng(4, 0)).unwrap();
        let pd = derive_pd(&w, &cfg, &mut replicate_rng(4, 1)).unwrap();
        let a = step_world(&w, &pd, &cfg, &mut replicate_rng(4, 2)).unwrap();
        let b = step_world(&w, &pd, &cfg, &mut replicate_rng(4, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn survey_fraction_is_binomial() {
        let mut cfg = base(10_000);
        cfg.survey.coverage_fraction = 0.05;
        let w = generate_world(&cfg, &mut replicate_rng(6, 0)).unwrap();
        let pd = derive_pd(&w, &cfg, &mut replicate_rng(6, 1)).unwrap();
        let s = step_world(&w, &pd, &cfg, &mut replicate_rng(6, 2)).unwrap();
        let n = s.pd.len() as f64;
        let se = (n * 0.05 * 0.95).sqrt();
        assert!((s.batch.survey.len() as f64 - 0.05 * n).abs() < 3.0 * se);
        assert!(s.batch.survey.iter().all(|o| o.inclusion_prob == 0.05));
    }

    #[test]
    fn move_rate_matches_binomial_oracle() {
        let mut cfg = base(10_000);
        cfg.dynamics.move_rate = 0.1;
        cfg.dynamics.death_rate = 0.0;
        cfg.dynamics.emigration_rate = 0.0;
        let reps = 20;
        let mut frac = Vec::new();
        for r in 0..reps {
            let w = generate_world(&cfg, &mut replicate_rng(100 + r, 0)).unwrap();
            let s = step_world(&w, &[], &cfg, &mut replicate_rng(100 + r, 2)).unwrap();
            let residents = w.persons.iter().filter(|p| p.alive_in_scope).count();
            let changed = w
                .persons
                .iter()
                .zip(&s.world.persons)
                .filter(|(a, b)| a.alive_in_scope && a.true_address != b.true_address)
                .count();
            frac.push(changed as f64 / residents as f64);
        }
        let mean = frac.iter().sum::<f64>() / reps as f64;
        let se = (0.1 * 0.9 / 10_000.0 / reps as f64).sqrt();
        assert!((mean - 0.1).abs() < 3.0 * se, "mean move fraction {mean}");
    }
}

//! One replicate of generate → initiate → roll → count → audit.
//!
//! Every stage is a deterministic function of `(config, seed, replicate)`, so
//! a later stage regenerates the earlier ones rather than reading them back.

use std::collections::HashMap;

use fraccount::audit::{audit_estimate, draw_audit_sample, AuditDesign, AuditResult, AuditTarget};
use fraccount::counting::{
    count_classifier, count_fractional, count_with_theta, CountEstimate, DisplacedAllocation, FractionalCounter,
    TieRule, VarianceMode,
};
use fraccount::features::tree_features;
use fraccount::initiate::{
    benchmark_to_estimates, initiate, BenchmarkOptions, BenchmarkReport, InitiateOptions, InitiationResult,
    SampleUnit, ThetaMethod,
};
use fraccount::linalg::Matrix;
use fraccount::model::{ModelKind, ModelState, ParamState};
use fraccount::rolling::{
    apply_model, carry_weights, dbe_update, ebp_update, partition_labels, residency_update, roll_theta, theta_by_id,
    updated_events, DbeComponents, LabelledSet, ResidencyState, RollingLogRow, WeightedPerson,
};
use fraccount::synthworld::{
    derive_pd, generate_world, replicate_rng, simulate_census, step_world, CensusOutcome, EventLog, Label,
    LocalityMap, PersonId, PersonRecord, UpdateBatch, WorldTruth,
};
use fraccount::treeroll::{grow_initial, label_class, roll_tree, LabelledPoint, RollConfig, RollMode, TreeModel, TreeParams, UpdateReport};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;

const STRIDE: u64 = 1 << 20;
const WORLD: u64 = 0;
const PD: u64 = 1;
const CENSUS: u64 = 2;
const THETA_SAMPLE: u64 = 3;
const STEP: u64 = 1_000;
const BENCH: u64 = 100_000;
const AUDIT: u64 = 200_000;
const BETA: u64 = 300_000;

/// Independent stream for one stage of one replicate.
pub fn stage_rng(seed: u64, rep: u64, stage: u64) -> ChaCha8Rng {
    replicate_rng(seed, rep * STRIDE + stage)
}

pub struct Simulation {
    /// `worlds[t]` is the world at epoch `t`.
    pub worlds: Vec<WorldTruth>,
    /// `pds[0]` is the census-labelled register.
    pub pds: Vec<Vec<PersonRecord>>,
    pub census: CensusOutcome,
    /// `batches[t − 1]` and `events[t − 1]` lead into epoch `t`.
    pub batches: Vec<UpdateBatch>,
    pub events: Vec<EventLog>,
}

impl Simulation {
    pub fn map(&self) -> LocalityMap {
        self.worlds[0].locality_map()
    }
}

pub fn simulate(cfg: &RunConfig, seed: u64, rep: u64) -> Result<Simulation, CliError> {
    let sc = cfg.scenario();
    let world = generate_world(&sc, &mut stage_rng(seed, rep, WORLD))?;
    let pd = derive_pd(&world, &sc, &mut stage_rng(seed, rep, PD))?;
    let census =
        simulate_census(&world, &pd, sc.census.link_rate, sc.census.estimate_cv, &mut stage_rng(seed, rep, CENSUS))?;
    let mut worlds = vec![world];
    let mut pds = vec![census.pd.clone()];
    let mut batches = Vec::new();
    let mut events = Vec::new();
    for t in 1..=u64::from(cfg.rolling.epochs) {
        let step = step_world(&worlds[worlds.len() - 1], &pds[pds.len() - 1], &sc, &mut stage_rng(seed, rep, STEP + t))?;
        worlds.push(step.world);
        pds.push(step.pd);
        batches.push(step.batch);
        events.push(step.events);
    }
    Ok(Simulation { worlds, pds, census, batches, events })
}

pub fn initiation(cfg: &RunConfig, sim: &Simulation, seed: u64, rep: u64) -> Result<InitiationResult<f64>, CliError> {
    let theta = match cfg.initiate.theta_method.as_str() {
        "none" => ThetaMethod::None,
        "subset" => ThetaMethod::Subset,
        "hypercube" => ThetaMethod::Hypercube(sim.census.hypercube.clone()),
        "sample" => {
            let f = cfg.initiate.sample_fraction;
            let mut rng = stage_rng(seed, rep, THETA_SAMPLE);
            let units = sim
                .census
                .pd
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.core)
                .filter(|_| rng.random_bool(f))
                .map(|(index, r)| SampleUnit {
                    index,
                    in_scope: sim.worlds[0].truth_label(r).in_scope(),
                    inclusion_prob: f,
                })
                .collect();
            ThetaMethod::Sample(units)
        }
        other => return Err(CliError::Config(format!("unknown theta method {other:?}"))),
    };
    let opts = InitiateOptions { theta, benchmark: cfg.initiate.benchmark, benchmark_options: BenchmarkOptions::default() };
    Ok(initiate(&sim.census, sim.map(), &opts)?)
}

pub struct EpochOutput {
    pub epoch: u32,
    pub placement: ParamState<f64>,
    pub counters: Vec<FractionalCounter<f64>>,
    pub tree: Option<TreeModel>,
    pub tree_counters: Option<Vec<FractionalCounter<f64>>>,
    pub tree_report: Option<UpdateReport>,
    pub residency: ResidencyState<f64>,
    pub log: Option<RollingLogRow>,
    pub benchmark: Option<BenchmarkReport<f64>>,
    pub labelled: LabelledSet,
}

fn tree_params(cfg: &RunConfig) -> TreeParams {
    TreeParams {
        hoeffding_delta: cfg.tree.hoeffding_delta,
        min_leaf: cfg.tree.min_leaf,
        max_depth: cfg.tree.max_depth,
        ..TreeParams::default()
    }
}

fn with_theta(mut counters: Vec<FractionalCounter<f64>>, theta: &[f64]) -> Vec<FractionalCounter<f64>> {
    for (c, &t) in counters.iter_mut().zip(theta) {
        c.theta = t;
    }
    counters
}

/// Noisy population estimates standing in for a post-censal benchmark.
fn fresh_estimates(cfg: &RunConfig, world: &WorldTruth, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cv = cfg.census.estimate_cv;
    let sigma = (1.0 + cv * cv).ln().sqrt();
    world
        .true_counts()
        .into_iter()
        .map(|n| {
            if sigma == 0.0 {
                n as f64
            } else {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                n as f64 * (sigma * z - 0.5 * sigma * sigma).exp()
            }
        })
        .collect()
}

pub fn roll(
    cfg: &RunConfig,
    sim: &Simulation,
    init: &InitiationResult<f64>,
    seed: u64,
    rep: u64,
) -> Result<Vec<EpochOutput>, CliError> {
    let map = sim.map();
    let r = &cfg.residency;
    let pd0 = &sim.pds[0];
    let tree = if cfg.rolling.tree {
        let core: Vec<PersonRecord> = pd0.iter().filter(|r| r.core).cloned().collect();
        Some(grow_initial(&core, ModelKind::Placement, tree_params(cfg), 0)?)
    } else {
        None
    };
    let theta0: Vec<f64> = init.counters.iter().map(|c| c.theta).collect();
    let tree_counters = match &tree {
        Some(t) => Some(with_theta(fraccount::treeroll::tree_counters(t, pd0)?, &theta0)),
        None => None,
    };
    let residency = ResidencyState::new(theta0.iter().map(|t| 1.0 - t).collect(), r.d, r.g, r.tau)?;
    let mut out = vec![EpochOutput {
        epoch: 0,
        placement: init.placement.state.clone(),
        counters: init.counters.clone(),
        tree,
        tree_counters,
        tree_report: None,
        residency,
        log: None,
        benchmark: init.benchmark.clone(),
        labelled: LabelledSet::default(),
    }];
    let dim = ModelKind::Placement.dim();
    let drift = (cfg.rolling.drift_sd > 0.0).then(|| Matrix::identity(dim).scale(cfg.rolling.drift_sd.powi(2)));
    for t in 1..=cfg.rolling.epochs {
        let prev = &out[out.len() - 1];
        let prev_pd = &sim.pds[t as usize - 1];
        let pd = &sim.pds[t as usize];
        let set = partition_labels(pd, &sim.batches[t as usize - 1]);
        let data = updated_events::<f64>(ModelKind::Placement, pd, &set)?;
        let placement = ebp_update(&prev.placement, &data, drift.as_ref())?;
        let state = ModelState::Parametric(placement.clone());
        let counters = if cfg.rolling.sample_beta {
            apply_model(&state, pd, Some(&mut stage_rng(seed, rep, BETA + u64::from(t))))?
        } else {
            apply_model(&state, pd, None::<&mut ChaCha8Rng>)?
        };
        let theta = roll_theta(&theta_by_id(prev_pd, &prev.counters), pd, &set, 0.0);
        let mut counters = with_theta(counters, &theta);
        let mut benchmark = None;
        if cfg.rolling.benchmark_every > 0 && t % cfg.rolling.benchmark_every == 0 {
            let est = fresh_estimates(cfg, &sim.worlds[t as usize], &mut stage_rng(seed, rep, BENCH + u64::from(t)));
            let (c, report) = benchmark_to_estimates(pd, counters, map, &est, &BenchmarkOptions::default())?;
            counters = c;
            benchmark = Some(report);
        }
        let theta: Vec<f64> = counters.iter().map(|c| c.theta).collect();

        let (tree, tree_counters, tree_report) = match &prev.tree {
            Some(model) => {
                let mut fresh = vec![false; pd.len()];
                let mut points = Vec::new();
                for (k, label) in set.updated() {
                    fresh[k] = true;
                    if let Some(class) = label_class(ModelKind::Placement, label) {
                        points.push(LabelledPoint { id: pd[k].id.0, x: tree_features(&pd[k]), class, weight: 1.0 });
                    }
                }
                let non_updated: Vec<Vec<f64>> =
                    pd.iter().zip(&fresh).filter(|(_, &f)| !f).map(|(r, _)| tree_features(r)).collect();
                let mode = match cfg.tree.mode.as_str() {
                    "dual" => RollMode::Dual { min_delta_eps: cfg.tree.min_delta_eps },
                    _ => RollMode::Primary,
                };
                let rc = RollConfig {
                    bound: cfg.tree.bound,
                    eta: cfg.tree.eta,
                    half_life: cfg.tree.half_life,
                    epoch: t,
                    mode,
                    ..RollConfig::default()
                };
                let (next, report) = roll_tree(model, &points, &non_updated, &rc)?;
                let tc = with_theta(fraccount::treeroll::tree_counters(&next, pd)?, &theta);
                (Some(next), Some(tc), Some(report))
            }
            None => (None, None, None),
        };

        // R(k,t) = d·R(k,t−1) + g·X(k,t−1); records new to the register start at τ
        let prev_r: HashMap<PersonId, (f64, f64)> =
            prev_pd.iter().zip(&prev.residency.r).map(|(p, &r)| (p.id, (r, p.sol_score))).collect();
        let (r_prev, x_prev): (Vec<f64>, Vec<f64>) =
            pd.iter().map(|p| prev_r.get(&p.id).copied().unwrap_or((r.tau, p.sol_score))).unzip();
        let residency = residency_update(&ResidencyState::new(r_prev, r.d, r.g, r.tau)?, &x_prev)?;

        let log = RollingLogRow::new(&set, &prev.placement, &placement);
        out.push(EpochOutput {
            epoch: t,
            placement,
            counters,
            tree,
            tree_counters,
            tree_report,
            residency,
            log: Some(log),
            benchmark,
            labelled: set,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub replicate: u64,
    pub epoch: u32,
    pub method: String,
    pub locality: usize,
    pub estimate: f64,
    pub variance: f64,
    pub truth: f64,
}

pub const COUNT_HEADER: [&str; 7] = ["replicate", "epoch", "method", "locality", "estimate", "variance", "truth"];

fn push_estimate(rows: &mut Vec<CountRow>, rep: u64, epoch: u32, method: &str, e: &CountEstimate<f64>, truth: &[f64]) {
    for (i, (&est, &var)) in e.estimates.iter().zip(&e.variances).enumerate() {
        rows.push(CountRow { replicate: rep, epoch, method: method.into(), locality: i, estimate: est, variance: var, truth: truth[i] });
    }
}

fn register_locality(r: &PersonRecord, map: LocalityMap) -> Result<usize, CliError> {
    let a = r.sol[0].address;
    map.locality_of(a).ok_or_else(|| CliError::Runtime(format!("address {} outside every locality", a.0)))
}

/// Locality counts by every method at every epoch.
///
/// Methods: `classifier`, `fractional` (μ only), `fractional_theta`, `tree`,
/// `residency` (θ = 1 below the residency threshold), `dbe` (census estimate
/// rolled by error-free demographic components) and `weights` (census weights
/// carried, movers taking the destination mean).
pub fn count_rows(sim: &Simulation, epochs: &[EpochOutput], rep: u64) -> Result<Vec<CountRow>, CliError> {
    let map = sim.map();
    let mut rows = Vec::new();
    let m = map.len();
    let mut dbe = sim.census.estimates.clone();
    let pd0 = &sim.pds[0];
    let mut reg_count = vec![0usize; m];
    let locs0 = pd0.iter().map(|r| register_locality(r, map)).collect::<Result<Vec<_>, _>>()?;
    for &i in &locs0 {
        reg_count[i] += 1;
    }
    let mut weights: Vec<WeightedPerson<f64>> = pd0
        .iter()
        .zip(&locs0)
        .map(|(r, &i)| WeightedPerson { id: r.id, locality: i, weight: sim.census.estimates[i] / reg_count[i].max(1) as f64 })
        .collect();
    for e in epochs {
        let t = e.epoch as usize;
        let pd = &sim.pds[t];
        let truth: Vec<f64> = sim.worlds[t].true_counts().into_iter().map(|n| n as f64).collect();
        let mode = VarianceMode::Independent;
        push_estimate(&mut rows, rep, e.epoch, "classifier", &count_classifier(pd, &e.counters, map, TieRule::LowestIndex)?, &truth);
        push_estimate(&mut rows, rep, e.epoch, "fractional", &count_fractional(pd, &e.counters, map, mode)?, &truth);
        let wt = count_with_theta(pd, &e.counters, map, DisplacedAllocation::Proportional, mode)?;
        push_estimate(&mut rows, rep, e.epoch, "fractional_theta", &wt, &truth);
        if let Some(tc) = &e.tree_counters {
            let est = count_with_theta(pd, tc, map, DisplacedAllocation::Proportional, mode)?;
            push_estimate(&mut rows, rep, e.epoch, "tree", &est, &truth);
        }
        let resident = e.residency.resident();
        let res_counters: Vec<FractionalCounter<f64>> = e
            .counters
            .iter()
            .zip(&resident)
            .map(|(c, &ok)| FractionalCounter { theta: if ok { 0.0 } else { 1.0 }, ..c.clone() })
            .collect();
        let est = count_with_theta(pd, &res_counters, map, DisplacedAllocation::Proportional, mode)?;
        push_estimate(&mut rows, rep, e.epoch, "residency", &est, &truth);

        if t > 0 {
            dbe = dbe_update(&dbe, &DbeComponents::from_event_log(&sim.events[t - 1]))?;
            let batch = &sim.batches[t - 1];
            let present: HashMap<PersonId, usize> = weights.iter().enumerate().map(|(k, w)| (w.id, k)).collect();
            let moves: Vec<_> = batch.moves.iter().filter(|mv| mv.notified && present.contains_key(&mv.id)).copied().collect();
            weights = carry_weights(&weights, &moves, m)?;
            let mut sums = vec![(0.0, 0usize); m];
            for w in &weights {
                sums[w.locality].0 += w.weight;
                sums[w.locality].1 += 1;
            }
            let by_id: HashMap<PersonId, WeightedPerson<f64>> = weights.iter().map(|w| (w.id, *w)).collect();
            weights = pd
                .iter()
                .map(|r| match by_id.get(&r.id) {
                    Some(w) => Ok(*w),
                    None => {
                        let i = register_locality(r, map)?;
                        let (s, n) = sums[i];
                        Ok(WeightedPerson { id: r.id, locality: i, weight: if n > 0 { s / n as f64 } else { 1.0 } })
                    }
                })
                .collect::<Result<_, CliError>>()?;
        }
        let zeros = vec![0.0; m];
        let dbe_est = CountEstimate { method: fraccount::counting::CountMethod::Fractional, estimates: dbe.clone(), variances: zeros.clone(), unplaced: None };
        push_estimate(&mut rows, rep, e.epoch, "dbe", &dbe_est, &truth);
        let mut w_est = vec![0.0; m];
        for w in &weights {
            w_est[w.locality] += w.weight;
        }
        let w_est = CountEstimate { method: fraccount::counting::CountMethod::Fractional, estimates: w_est, variances: zeros, unplaced: None };
        push_estimate(&mut rows, rep, e.epoch, "weights", &w_est, &truth);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub replicate: u64,
    pub result: AuditResult,
    /// True value `θ₀` from the simulator.
    pub theta0: f64,
}

/// Audits the register's erroneous-enumeration rate at every epoch, for the
/// fractional counters and for the residency index.
pub fn audit_rows(cfg: &RunConfig, sim: &Simulation, epochs: &[EpochOutput], seed: u64, rep: u64) -> Result<Vec<AuditRow>, CliError> {
    let mut rows = Vec::new();
    for e in epochs {
        let t = e.epoch as usize;
        let pd = &sim.pds[t];
        let world = &sim.worlds[t];
        let y: Vec<f64> = pd.iter().map(|r| f64::from(u8::from(world.truth_label(r) == Label::Erroneous))).collect();
        let theta0 = y.iter().sum::<f64>() / y.len() as f64;
        let strata: Vec<usize> = pd.iter().map(|r| usize::from(!r.core)).collect();
        let design = match cfg.audit.design.as_str() {
            "stratified" => AuditDesign::Stratified { sizes: cfg.audit.strata_sizes.clone() },
            _ => AuditDesign::Srs { n: cfg.audit.n.min(pd.len()) },
        };
        let sample = draw_audit_sample(&strata, &design, &mut stage_rng(seed, rep, AUDIT + t as u64))?;
        let (theta_hat, v_hat) = audit_estimate(&sample, &y, AuditTarget::Mean)?;
        let n = pd.len() as f64;
        let frac = e.counters.iter().map(|c| c.theta).sum::<f64>() / n;
        let res = e.residency.resident().iter().filter(|&&ok| !ok).count() as f64 / n;
        for (name, star) in [("fractional", frac), ("residency", res)] {
            let result = AuditResult::new(&cfg.name, e.epoch, name, star, theta_hat, v_hat, cfg.audit.alpha)?;
            rows.push(AuditRow { replicate: rep, result, theta0 });
        }
    }
    Ok(rows)
}

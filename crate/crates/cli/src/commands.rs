//! Subcommands and their artifacts.
//!
//! Per-replicate artifacts live in `rep<NNNN>/` under the output directory;
//! tables aggregated over replicates sit at the top level. Every file opens
//! with a `# config_hash=<sha256>` comment line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fraccount::modelfile::{write_counters, BenchmarkSection, ModelFile, ParamSection, ThetaSection};
use fraccount::rolling::write_rolling_log;
use fraccount::synthworld::{write_pd_csv, write_world_csv, PersonId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{self, AuditRow, CountRow, EpochOutput, Simulation, COUNT_HEADER};

pub const MANIFEST: &str = "manifest.toml";
pub const COUNTS: &str = "counts.csv";
pub const AUDIT: &str = "audit.csv";
pub const REPORT: &str = "report.csv";
pub const AUDIT_REPORT: &str = "audit_report.csv";

pub const AUDIT_COLUMNS: [&str; 11] =
    ["replicate", "scenario", "epoch", "estimator", "theta_star", "theta_hat", "v_hat", "mse_hat", "z", "p", "theta0"];
pub const REPORT_COLUMNS: [&str; 13] = [
    "scenario",
    "epoch",
    "method",
    "locality",
    "replicates",
    "mean_estimate",
    "mean_truth",
    "bias",
    "mc_se",
    "rmse",
    "mean_variance",
    "empirical_variance",
    "coverage",
];
pub const AUDIT_REPORT_COLUMNS: [&str; 10] = [
    "scenario",
    "epoch",
    "estimator",
    "replicates",
    "mean_theta_star",
    "mean_theta_hat",
    "mean_mse_hat",
    "true_mse",
    "negative_mse_rate",
    "reject_rate",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub replicates: u64,
    pub versions: BTreeMap<String, String>,
    pub outputs: BTreeSet<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: RunConfig,
    pub replicates: u64,
    pub jobs: usize,
    pub out: PathBuf,
}

impl RunArgs {
    /// `seed` overrides the config's own seed and so enters the hash.
    pub fn new(mut config: RunConfig, seed: Option<u64>, replicates: u64, jobs: usize, out: PathBuf) -> Result<Self, CliError> {
        if let Some(s) = seed {
            config.seed = s;
        }
        if replicates == 0 {
            return Err(CliError::Config("--replicates must be at least 1".into()));
        }
        Ok(Self { config, replicates, jobs: jobs.max(1), out })
    }
}

struct Output<'a> {
    dir: &'a Path,
    hash: String,
    written: BTreeSet<String>,
}

impl<'a> Output<'a> {
    fn new(args: &'a RunArgs) -> Result<Self, CliError> {
        std::fs::create_dir_all(&args.out)?;
        let hash = args.config.hash();
        if let Ok(m) = RunManifest::read(&args.out) {
            if m.config_hash != hash {
                return Err(CliError::Config(format!(
                    "{} holds a run with config hash {}, this run is {hash}",
                    args.out.display(),
                    m.config_hash
                )));
            }
        }
        Ok(Self { dir: &args.out, hash, written: BTreeSet::new() })
    }

    fn file(&mut self, rel: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(rel);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "# config_hash={}", self.hash)?;
        self.written.insert(rel.to_string());
        Ok(w)
    }

    fn finish(self, args: &RunArgs) -> Result<(), CliError> {
        let mut outputs = RunManifest::read(self.dir).map(|m| m.outputs).unwrap_or_default();
        outputs.extend(self.written);
        outputs.insert("config.toml".into());
        let manifest = RunManifest {
            scenario: args.config.name.clone(),
            config_hash: self.hash.clone(),
            seed: args.config.seed,
            replicates: args.replicates,
            versions: BTreeMap::from([
                ("fraccount".to_string(), fraccount::VERSION.to_string()),
                ("fraccount-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ]),
            outputs,
        };
        std::fs::write(self.dir.join("config.toml"), format!("# config_hash={}\n{}", self.hash, args.config.to_toml()))?;
        std::fs::write(self.dir.join(MANIFEST), toml::to_string(&manifest).expect("manifest serialises"))?;
        Ok(())
    }
}

fn rep_dir(rep: u64) -> String {
    format!("rep{rep:04}")
}

/// Runs `f` for every replicate on `jobs` threads; results come back in
/// replicate order whatever the scheduling.
fn per_replicate<T: Send>(
    args: &RunArgs,
    f: impl Fn(u64) -> Result<T, CliError> + Sync + Send,
) -> Result<Vec<T>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| (0..args.replicates).into_par_iter().map(&f).collect())
}

struct Replicate {
    sim: Simulation,
    init: fraccount::initiate::InitiationResult<f64>,
    epochs: Vec<EpochOutput>,
}

fn run_replicate(cfg: &RunConfig, rep: u64, roll: bool) -> Result<Replicate, CliError> {
    let seed = cfg.seed;
    let sim = pipeline::simulate(cfg, seed, rep)?;
    let init = pipeline::initiation(cfg, &sim, seed, rep)?;
    let epochs = if roll {
        pipeline::roll(cfg, &sim, &init, seed, rep)?
    } else {
        let mut c = cfg.clone();
        c.rolling.epochs = 0;
        pipeline::roll(&c, &sim, &init, seed, rep)?
    };
    Ok(Replicate { sim, init, epochs })
}

pub fn simulate(args: &RunArgs) -> Result<(), CliError> {
    let mut out = Output::new(args)?;
    let sims = per_replicate(args, |rep| pipeline::simulate(&args.config, args.config.seed, rep))?;
    for (rep, sim) in sims.iter().enumerate() {
        let d = rep_dir(rep as u64);
        for (t, (world, pd)) in sim.worlds.iter().zip(&sim.pds).enumerate() {
            write_world_csv(world, out.file(&format!("{d}/world_t{t}.csv"))?)?;
            write_pd_csv(pd, world, out.file(&format!("{d}/pd_t{t}.csv"))?)?;
        }
    }
    out.finish(args)
}

fn model_file(e: &EpochOutput, init: Option<&Replicate>, method: &str) -> ModelFile {
    let mut f = ModelFile::new(e.epoch, fraccount::initiate::RIDGE);
    f.placement = Some(ParamSection::from_state(&e.placement));
    if let Some(r) = init {
        f.theta = Some(ThetaSection::from_fit(method, &r.init.theta));
    }
    f.benchmark = e.benchmark.as_ref().map(BenchmarkSection::from_report);
    f.tree = e.tree.as_ref().map(|t| t.to_text());
    f
}

fn write_epoch(out: &mut Output, rep: &Replicate, r: u64, e: &EpochOutput, method: &str) -> Result<(), CliError> {
    let d = rep_dir(r);
    let t = e.epoch;
    let ids: Vec<PersonId> = rep.sim.pds[t as usize].iter().map(|p| p.id).collect();
    let mut w = out.file(&format!("{d}/model_t{t}.toml"))?;
    w.write_all(model_file(e, (t == 0).then_some(rep), method).to_toml().as_bytes())?;
    write_counters(&ids, &e.counters, out.file(&format!("{d}/counters_t{t}.csv"))?)?;
    Ok(())
}

pub fn initiate(args: &RunArgs) -> Result<(), CliError> {
    let mut out = Output::new(args)?;
    let reps = per_replicate(args, |rep| run_replicate(&args.config, rep, false))?;
    for (r, rep) in reps.iter().enumerate() {
        write_epoch(&mut out, rep, r as u64, &rep.epochs[0], &args.config.initiate.theta_method)?;
    }
    out.finish(args)
}

pub fn roll(args: &RunArgs) -> Result<(), CliError> {
    let mut out = Output::new(args)?;
    let reps = per_replicate(args, |rep| run_replicate(&args.config, rep, true))?;
    for (r, rep) in reps.iter().enumerate() {
        for e in &rep.epochs {
            write_epoch(&mut out, rep, r as u64, e, &args.config.initiate.theta_method)?;
        }
        let d = rep_dir(r as u64);
        let log: Vec<_> = rep.epochs.iter().filter_map(|e| e.log).collect();
        write_rolling_log(&log, out.file(&format!("{d}/rolling_log.csv"))?)?;
        let mut w = csv::Writer::from_writer(out.file(&format!("{d}/tree_updates.csv"))?);
        w.write_record(["epoch", "accepted", "candidates", "edits", "delta_eps", "delta_m"])?;
        for e in &rep.epochs {
            if let Some(t) = &e.tree_report {
                w.write_record([
                    e.epoch.to_string(),
                    t.accepted.to_string(),
                    t.candidates.to_string(),
                    t.edits.len().to_string(),
                    t.delta_eps.to_string(),
                    t.delta_m.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    out.finish(args)
}

fn write_counts<W: Write>(rows: &[CountRow], w: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(COUNT_HEADER)?;
    for r in rows {
        w.write_record([
            r.replicate.to_string(),
            r.epoch.to_string(),
            r.method.clone(),
            r.locality.to_string(),
            r.estimate.to_string(),
            r.variance.to_string(),
            r.truth.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_audit<W: Write>(rows: &[AuditRow], w: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(AUDIT_COLUMNS)?;
    for a in rows {
        let r = &a.result;
        w.write_record([
            a.replicate.to_string(),
            r.scenario.clone(),
            r.epoch.to_string(),
            r.estimator.clone(),
            r.theta_star.to_string(),
            r.theta_hat.to_string(),
            r.v_hat.to_string(),
            r.mse_hat.to_string(),
            r.test.z.to_string(),
            r.test.p_value.to_string(),
            a.theta0.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn count_all(args: &RunArgs) -> Result<Vec<CountRow>, CliError> {
    let rows = per_replicate(args, |rep| {
        let r = run_replicate(&args.config, rep, true)?;
        pipeline::count_rows(&r.sim, &r.epochs, rep)
    })?;
    Ok(rows.into_iter().flatten().collect())
}

fn audit_all(args: &RunArgs) -> Result<Vec<AuditRow>, CliError> {
    let rows = per_replicate(args, |rep| {
        let r = run_replicate(&args.config, rep, true)?;
        pipeline::audit_rows(&args.config, &r.sim, &r.epochs, args.config.seed, rep)
    })?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn count(args: &RunArgs) -> Result<(), CliError> {
    let mut out = Output::new(args)?;
    let rows = count_all(args)?;
    write_counts(&rows, out.file(COUNTS)?)?;
    out.finish(args)
}

pub fn audit(args: &RunArgs) -> Result<(), CliError> {
    let mut out = Output::new(args)?;
    let rows = audit_all(args)?;
    write_audit(&rows, out.file(AUDIT)?)?;
    out.finish(args)
}

fn reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(f))
}

fn check_header(r: &mut csv::Reader<File>, expected: &[&str], path: &Path) -> Result<(), CliError> {
    let h = r.headers()?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(CliError::Runtime(format!("{}: unexpected header {:?}", path.display(), h)));
    }
    Ok(())
}

fn num(s: &str, path: &Path) -> Result<f64, CliError> {
    s.parse().map_err(|_| CliError::Runtime(format!("{}: bad number {s:?}", path.display())))
}

pub fn read_counts(path: &Path) -> Result<Vec<CountRow>, CliError> {
    let mut r = reader(path)?;
    check_header(&mut r, &COUNT_HEADER, path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(CountRow {
                replicate: num(&rec[0], path)? as u64,
                epoch: num(&rec[1], path)? as u32,
                method: rec[2].to_string(),
                locality: num(&rec[3], path)? as usize,
                estimate: num(&rec[4], path)?,
                variance: num(&rec[5], path)?,
                truth: num(&rec[6], path)?,
            })
        })
        .collect()
}

/// One row of the count summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub epoch: u32,
    pub method: String,
    pub locality: usize,
    pub replicates: usize,
    pub mean_estimate: f64,
    pub mean_truth: f64,
    pub bias: f64,
    pub mc_se: f64,
    pub rmse: f64,
    pub mean_variance: f64,
    pub empirical_variance: f64,
    /// Share of replicates with `|N̂ − N| ≤ 1.96·√V̂`.
    pub coverage: f64,
}

/// Bias, Monte-Carlo SE of the bias, RMSE and variance coverage per
/// (epoch, method, locality), in that order.
pub fn summarise(rows: &[CountRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(u32, String, usize), Vec<&CountRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.epoch, r.method.clone(), r.locality)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((epoch, method, locality), g)| {
            let n = g.len() as f64;
            let err: Vec<f64> = g.iter().map(|r| r.estimate - r.truth).collect();
            let bias = err.iter().sum::<f64>() / n;
            let mean_estimate = g.iter().map(|r| r.estimate).sum::<f64>() / n;
            let sd_err = if g.len() > 1 { (err.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            let empirical_variance = if g.len() > 1 {
                g.iter().map(|r| (r.estimate - mean_estimate).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Summary {
                epoch,
                method,
                locality,
                replicates: g.len(),
                mean_estimate,
                mean_truth: g.iter().map(|r| r.truth).sum::<f64>() / n,
                bias,
                mc_se: sd_err / n.sqrt(),
                rmse: (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
                mean_variance: g.iter().map(|r| r.variance).sum::<f64>() / n,
                empirical_variance,
                coverage: g.iter().filter(|r| (r.estimate - r.truth).abs() <= 1.96 * r.variance.sqrt()).count() as f64 / n,
            }
        })
        .collect()
}

fn write_summary<W: Write>(scenario: &str, s: &[Summary], w: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(REPORT_COLUMNS)?;
    for r in s {
        w.write_record([
            scenario.to_string(),
            r.epoch.to_string(),
            r.method.clone(),
            r.locality.to_string(),
            r.replicates.to_string(),
            r.mean_estimate.to_string(),
            r.mean_truth.to_string(),
            r.bias.to_string(),
            r.mc_se.to_string(),
            r.rmse.to_string(),
            r.mean_variance.to_string(),
            r.empirical_variance.to_string(),
            r.coverage.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct AuditLine {
    epoch: u32,
    estimator: String,
    theta_star: f64,
    theta_hat: f64,
    mse_hat: f64,
    p: f64,
    theta0: f64,
}

fn read_audit(path: &Path) -> Result<Vec<AuditLine>, CliError> {
    let mut r = reader(path)?;
    check_header(&mut r, &AUDIT_COLUMNS, path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(AuditLine {
                epoch: num(&rec[2], path)? as u32,
                estimator: rec[3].to_string(),
                theta_star: num(&rec[4], path)?,
                theta_hat: num(&rec[5], path)?,
                mse_hat: num(&rec[7], path)?,
                p: num(&rec[9], path)?,
                theta0: num(&rec[10], path)?,
            })
        })
        .collect()
}

fn write_audit_summary<W: Write>(scenario: &str, rows: &[AuditLine], alpha: f64, w: W) -> Result<(), CliError> {
    let mut groups: BTreeMap<(u32, &str), Vec<&AuditLine>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.epoch, &r.estimator)).or_default().push(r);
    }
    let mut w = csv::Writer::from_writer(w);
    w.write_record(AUDIT_REPORT_COLUMNS)?;
    for ((epoch, est), g) in groups {
        let n = g.len() as f64;
        let mean = |f: fn(&AuditLine) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
        let neg = g.iter().filter(|r| r.mse_hat < 0.0).count() as f64 / n;
        let rej = g.iter().filter(|r| r.p < alpha).count() as f64 / n;
        w.write_record([
            scenario.to_string(),
            epoch.to_string(),
            est.to_string(),
            g.len().to_string(),
            mean(|r| r.theta_star).to_string(),
            mean(|r| r.theta_hat).to_string(),
            mean(|r| r.mse_hat).to_string(),
            mean(|r| (r.theta_star - r.theta0).powi(2)).to_string(),
            neg.to_string(),
            rej.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregates `counts.csv` and `audit.csv`, producing them first if absent.
pub fn report(args: &RunArgs) -> Result<(), CliError> {
    let mut out = Output::new(args)?;
    let counts_path = args.out.join(COUNTS);
    let rows = if counts_path.exists() {
        read_counts(&counts_path)?
    } else {
        let rows = count_all(args)?;
        write_counts(&rows, out.file(COUNTS)?)?;
        rows
    };
    let audit_path = args.out.join(AUDIT);
    if !audit_path.exists() {
        write_audit(&audit_all(args)?, out.file(AUDIT)?)?;
    }
    let audit = read_audit(&audit_path)?;
    let summary = summarise(&rows);
    write_summary(&args.config.name, &summary, out.file(REPORT)?)?;
    write_audit_summary(&args.config.name, &audit, args.config.audit.alpha, out.file(AUDIT_REPORT)?)?;
    out.finish(args)
}

pub const COMPARE_FIXED: [&str; 3] = ["epoch", "method", "locality"];

/// Per (epoch, method, locality) bias and RMSE of every run side by side,
/// with differences against the first run.
pub fn compare<W: Write>(dirs: &[PathBuf], out: W) -> Result<(), CliError> {
    if dirs.len() < 2 {
        return Err(CliError::Config("compare needs at least two result directories".into()));
    }
    let manifests = dirs.iter().map(|d| RunManifest::read(d)).collect::<Result<Vec<_>, _>>()?;
    if let Some(m) = manifests.iter().find(|m| m.scenario != manifests[0].scenario) {
        return Err(CliError::Config(format!("scenario mismatch: {} vs {}", manifests[0].scenario, m.scenario)));
    }
    let tables = dirs
        .iter()
        .map(|d| {
            let p = d.join(COUNTS);
            read_counts(&p).map(|rows| {
                summarise(&rows).into_iter().map(|s| ((s.epoch, s.method.clone(), s.locality), s)).collect::<BTreeMap<_, _>>()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut header: Vec<String> = COMPARE_FIXED.iter().map(|s| s.to_string()).collect();
    for k in 0..dirs.len() {
        header.extend([format!("bias_{k}"), format!("rmse_{k}")]);
    }
    for k in 1..dirs.len() {
        header.extend([format!("bias_diff_{k}"), format!("rmse_diff_{k}")]);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header)?;
    for (key, first) in &tables[0] {
        let row: Vec<Option<&Summary>> = tables.iter().map(|t| t.get(key)).collect();
        let mut rec = vec![key.0.to_string(), key.1.clone(), key.2.to_string()];
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for s in &row {
            rec.push(cell(s.map(|s| s.bias)));
            rec.push(cell(s.map(|s| s.rmse)));
        }
        for s in &row[1..] {
            rec.push(cell(s.map(|s| s.bias - first.bias)));
            rec.push(cell(s.map(|s| s.rmse - first.rmse)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

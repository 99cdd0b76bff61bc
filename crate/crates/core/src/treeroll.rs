//! Incremental decision-tree counters.
//!
//! Splits are installed under a Hoeffding guard, and each rolling epoch
//! searches greedily over leaf refreshes, new splits and subtree collapses,
//! scoring every edit by its held-out log-loss improvement (`Δε`) and by the
//! share of non-updated units whose prediction moves (`Δ_M`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::counting::FractionalCounter;
use crate::error::{Error, Result};
use crate::features::{tree_features, MAX_SOL, TREE_FEATURE_NAMES};
use crate::model::ModelKind;
use crate::synthworld::{Label, PersonRecord};

/// Outcome classes of a tree of the given kind.
///
/// Placement trees use class 0 for displaced and `1 + j` for listed position
/// `j`; erroneous trees use 0 for in scope and 1 for erroneous.
pub fn class_count(kind: ModelKind) -> usize {
    match kind {
        ModelKind::Placement => 1 + MAX_SOL,
        ModelKind::Erroneous => 2,
    }
}

pub fn label_class(kind: ModelKind, label: Label) -> Option<usize> {
    match (kind, label) {
        (ModelKind::Placement, Label::Erroneous) => None,
        (ModelKind::Placement, Label::Displaced) => Some(0),
        (ModelKind::Placement, Label::At(j)) => (j < MAX_SOL).then_some(1 + j),
        (ModelKind::Erroneous, l) => Some(usize::from(!l.in_scope())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledPoint {
    pub id: u64,
    pub x: Vec<f64>,
    pub class: usize,
    pub weight: f64,
}

/// Labelled training points from records carrying labels.
pub fn points_from_records(records: &[PersonRecord], kind: ModelKind) -> Vec<LabelledPoint> {
    records
        .iter()
        .filter_map(|r| {
            let class = label_class(kind, r.label?)?;
            Some(LabelledPoint { id: r.id.0, x: tree_features(r), class, weight: 1.0 })
        })
        .collect()
}

/// Class counts observed at a leaf, grouped by the epoch they were seen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LeafStats {
    pub batches: Vec<(u32, Vec<f64>)>,
}

impl LeafStats {
    fn single(epoch: u32, counts: Vec<f64>) -> Self {
        Self { batches: vec![(epoch, counts)] }
    }

    fn scaled(&self, s: f64) -> Self {
        Self { batches: self.batches.iter().map(|(e, c)| (*e, c.iter().map(|v| v * s).collect())).collect() }
    }

    fn merge(&mut self, other: &LeafStats) {
        for (e, c) in &other.batches {
            self.push(*e, c);
        }
    }

    fn push(&mut self, epoch: u32, counts: &[f64]) {
        match self.batches.iter_mut().find(|(e, _)| *e == epoch) {
            Some((_, c)) => c.iter_mut().zip(counts).for_each(|(a, b)| *a += b),
            None => {
                self.batches.push((epoch, counts.to_vec()));
                self.batches.sort_by_key(|(e, _)| *e);
            }
        }
    }
}

/// Effective class counts with evidence of age `a` weighted by
/// `0.5^(a / half_life)`; an infinite half-life returns raw counts.
pub fn stale_evidence_weight(stats: &LeafStats, now: u32, half_life: f64) -> Result<Vec<f64>> {
    if half_life.is_nan() || half_life < 0.0 {
        return Err(Error::InvalidArgument(format!("half-life {half_life} must be non-negative")));
    }
    let k = stats.batches.first().map_or(0, |(_, c)| c.len());
    let mut out = vec![0.0; k];
    for (epoch, counts) in &stats.batches {
        let age = f64::from(now.saturating_sub(*epoch));
        let w = if age == 0.0 || half_life.is_infinite() {
            1.0
        } else if half_life == 0.0 {
            0.0
        } else {
            0.5f64.powf(age / half_life)
        };
        out.iter_mut().zip(counts).for_each(|(o, c)| *o += w * c);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// `x[feature] ≤ threshold` goes left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { probs: Vec<f64>, stats: LeafStats },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub parent: Option<usize>,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    /// `δ` in the Hoeffding bound.
    pub hoeffding_delta: f64,
    /// Gap below which ties are broken in favour of splitting.
    pub tie_threshold: f64,
    pub min_leaf: usize,
    pub max_depth: usize,
    /// Additive smoothing for leaf probabilities.
    pub smoothing: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { hoeffding_delta: 1e-6, tie_threshold: 0.0, min_leaf: 20, max_depth: 6, smoothing: 0.01 }
    }
}

impl TreeParams {
    fn validate(&self) -> Result<()> {
        if !(self.hoeffding_delta > 0.0 && self.hoeffding_delta < 1.0) {
            return Err(Error::InvalidArgument("hoeffding_delta must be in (0, 1)".into()));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::InvalidArgument("smoothing must be positive".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidArgument("min_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

/// `ε = sqrt(R² ln(1/δ) / 2n)`.
pub fn hoeffding_bound(range: f64, delta: f64, n: f64) -> f64 {
    (range * range * (1.0 / delta).ln() / (2.0 * n)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    pub kind: ModelKind,
    pub classes: usize,
    pub n_features: usize,
    pub params: TreeParams,
    pub epoch: u32,
    pub nodes: BTreeMap<usize, Node>,
    pub next_id: usize,
}

impl TreeModel {
    pub fn root(&self) -> &Node {
        &self.nodes[&0]
    }

    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[&id].kind {
                NodeKind::Split { feature, threshold, left, right } => {
                    id = if x[*feature] <= *threshold { *left } else { *right };
                }
                NodeKind::Leaf { .. } => return id,
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> &[f64] {
        match &self.nodes[&self.leaf_of(x)].kind {
            NodeKind::Leaf { probs, .. } => probs,
            NodeKind::Split { .. } => unreachable!("routing ends at a leaf"),
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.nodes.values().filter(|n| matches!(n.kind, NodeKind::Leaf { .. })).map(|n| n.id).collect()
    }

    pub fn depth_of(&self, mut id: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.nodes[&id].parent {
            id = p;
            d += 1;
        }
        d
    }

    /// Counter for a record: leaf probabilities restricted to the record's
    /// listed positions and renormalised.
    pub fn counter(&self, record: &PersonRecord) -> Result<FractionalCounter<f64>> {
        if record.sol.is_empty() {
            return Err(Error::InvalidArgument(format!("record {} has no listed address", record.id.0)));
        }
        let x = tree_features(record);
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: x.len() });
        }
        let p = self.predict(&x);
        Ok(match self.kind {
            ModelKind::Placement => {
                let q = record.q().min(MAX_SOL);
                let mut mu: Vec<f64> = p[1..=q].to_vec();
                mu.resize(record.q(), 0.0);
                let s = p[0] + mu.iter().sum::<f64>();
                FractionalCounter { mu: mu.iter().map(|m| m / s).collect(), xi: p[0] / s, theta: 0.0 }
            }
            ModelKind::Erroneous => FractionalCounter { theta: p[1], ..FractionalCounter::uniform(record.q()) },
        })
    }

    fn leaf_probs(&self, stats: &LeafStats, now: u32, half_life: f64) -> Result<Vec<f64>> {
        let eff = stale_evidence_weight(stats, now, half_life)?;
        Ok(smoothed(&eff, self.params.smoothing))
    }

    /// Text serialisation; see the crate README for the line format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tree v1");
        let _ = writeln!(s, "kind {}", self.kind.tag());
        let _ = writeln!(s, "classes {}", self.classes);
        let _ = writeln!(s, "features {}", self.n_features);
        let _ = writeln!(s, "epoch {}", self.epoch);
        let p = &self.params;
        let _ = writeln!(
            s,
            "params {} {} {} {} {}",
            p.hoeffding_delta, p.tie_threshold, p.min_leaf, p.max_depth, p.smoothing
        );
        let _ = writeln!(s, "next_id {}", self.next_id);
        for n in self.nodes.values() {
            let parent = n.parent.map_or("-".to_string(), |p| p.to_string());
            match &n.kind {
                NodeKind::Split { feature, threshold, left, right } => {
                    let _ = writeln!(s, "node {} {} split {} {} {} {}", n.id, parent, feature, threshold, left, right);
                }
                NodeKind::Leaf { probs, stats } => {
                    let probs = probs.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
                    let stats = stats
                        .batches
                        .iter()
                        .map(|(e, c)| format!("{e}:{}", c.iter().map(f64::to_string).collect::<Vec<_>>().join(",")))
                        .collect::<Vec<_>>()
                        .join("|");
                    let stats = if stats.is_empty() { "-".to_string() } else { stats };
                    let _ = writeln!(s, "node {} {} leaf {} {}", n.id, parent, probs, stats);
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (i, l) = lines.next().ok_or_else(|| perr(0, &format!("missing {key}")))?;
            let rest = l.strip_prefix(key).ok_or_else(|| perr(i + 1, &format!("expected {key}")))?;
            Ok((i + 1, rest.trim().to_string()))
        };
        let (i, v) = header("tree")?;
        if v != "v1" {
            return Err(perr(i, "unsupported tree format version"));
        }
        let (i, v) = header("kind")?;
        let kind = ModelKind::from_tag(&v).ok_or_else(|| perr(i, "unknown model kind"))?;
        let num = |i: usize, v: &str| v.parse::<f64>().map_err(|_| perr(i, &format!("bad number {v:?}")));
        let int = |i: usize, v: &str| v.parse::<usize>().map_err(|_| perr(i, &format!("bad integer {v:?}")));
        let (i, v) = header("classes")?;
        let classes = int(i, &v)?;
        let (i, v) = header("features")?;
        let n_features = int(i, &v)?;
        let (i, v) = header("epoch")?;
        let epoch = v.parse::<u32>().map_err(|_| perr(i, "bad epoch"))?;
        let (i, v) = header("params")?;
        let f: Vec<&str> = v.split_whitespace().collect();
        if f.len() != 5 {
            return Err(perr(i, "params needs 5 fields"));
        }
        let params = TreeParams {
            hoeffding_delta: num(i, f[0])?,
            tie_threshold: num(i, f[1])?,
            min_leaf: int(i, f[2])?,
            max_depth: int(i, f[3])?,
            smoothing: num(i, f[4])?,
        };
        let (i, v) = header("next_id")?;
        let next_id = int(i, &v)?;
        let mut nodes = BTreeMap::new();
        for (i, l) in lines {
            let i = i + 1;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() < 4 || f[0] != "node" {
                return Err(perr(i, "expected node line"));
            }
            let id = int(i, f[1])?;
            let parent = if f[2] == "-" { None } else { Some(int(i, f[2])?) };
            let kind = match (f[3], f.len()) {
                ("split", 8) => NodeKind::Split {
                    feature: int(i, f[4])?,
                    threshold: num(i, f[5])?,
                    left: int(i, f[6])?,
                    right: int(i, f[7])?,
                },
                ("leaf", 6) => {
                    let probs = f[4].split(';').map(|v| num(i, v)).collect::<Result<Vec<_>>>()?;
                    let mut stats = LeafStats::default();
                    if f[5] != "-" {
                        for b in f[5].split('|') {
                            let (e, c) = b.split_once(':').ok_or_else(|| perr(i, "bad stats batch"))?;
                            let e = e.parse::<u32>().map_err(|_| perr(i, "bad stats epoch"))?;
                            let c = c.split(',').map(|v| num(i, v)).collect::<Result<Vec<_>>>()?;
                            stats.batches.push((e, c));
                        }
                    }
                    if probs.len() != classes {
                        return Err(perr(i, "leaf vector length differs from class count"));
                    }
                    NodeKind::Leaf { probs, stats }
                }
                _ => return Err(perr(i, "malformed node line")),
            };
            nodes.insert(id, Node { id, parent, kind });
        }
        if !nodes.contains_key(&0) {
            return Err(perr(0, "tree has no root node"));
        }
        for n in nodes.values() {
            if let NodeKind::Split { left, right, .. } = n.kind {
                if !nodes.contains_key(&left) || !nodes.contains_key(&right) {
                    return Err(perr(0, &format!("node {} references a missing child", n.id)));
                }
            }
        }
        Ok(Self { kind, classes, n_features, params, epoch, nodes, next_id })
    }
}

fn smoothed(counts: &[f64], alpha: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + alpha * counts.len() as f64;
    counts.iter().map(|c| (c + alpha) / total).collect()
}

fn class_counts(points: &[&LabelledPoint], k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k];
    for p in points {
        c[p.class] += p.weight;
    }
    c
}

fn entropy(counts: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    if n <= 0.0 {
        return 0.0;
    }
    counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).log2()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SplitCandidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Best information-gain threshold on one feature by a sorted scan.
fn best_on_feature(points: &[&LabelledPoint], k: usize, feature: usize, min_leaf: usize) -> Option<SplitCandidate> {
    let mut order: Vec<&LabelledPoint> = points.to_vec();
    order.sort_by(|a, b| a.x[feature].total_cmp(&b.x[feature]));
    let total = class_counts(points, k);
    let n: f64 = total.iter().sum();
    let parent = entropy(&total);
    let mut left = vec![0.0; k];
    let mut best: Option<SplitCandidate> = None;
    for i in 0..order.len().saturating_sub(1) {
        left[order[i].class] += order[i].weight;
        let (a, b) = (order[i].x[feature], order[i + 1].x[feature]);
        if a == b || i + 1 < min_leaf || order.len() - i - 1 < min_leaf {
            continue;
        }
        let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
        let nl: f64 = left.iter().sum();
        let gain = parent - (nl / n) * entropy(&left) - ((n - nl) / n) * entropy(&right);
        if best.is_none_or(|s| gain > s.gain) {
            best = Some(SplitCandidate { feature, threshold: 0.5 * (a + b), gain });
        }
    }
    best
}

/// Best split at a node if it clears the Hoeffding guard.
fn hoeffding_split(points: &[&LabelledPoint], k: usize, n_features: usize, params: &TreeParams) -> Option<SplitCandidate> {
    if points.len() < 2 * params.min_leaf {
        return None;
    }
    let mut per_feature: Vec<SplitCandidate> =
        (0..n_features).filter_map(|f| best_on_feature(points, k, f, params.min_leaf)).collect();
    per_feature.sort_by(|a, b| b.gain.total_cmp(&a.gain).then(a.feature.cmp(&b.feature)));
    let best = *per_feature.first()?;
    let second = per_feature.get(1).map_or(0.0, |s| s.gain);
    let n: f64 = points.iter().map(|p| p.weight).sum();
    let eps = hoeffding_bound((k as f64).log2(), params.hoeffding_delta, n);
    let clears = best.gain - second > eps || (eps < params.tie_threshold && best.gain > eps);
    (best.gain > 0.0 && clears).then_some(best)
}

fn validate_points(points: &[LabelledPoint], k: usize, n_features: usize) -> Result<()> {
    for p in points {
        if p.class >= k {
            return Err(Error::InvalidArgument(format!("class {} out of range for {k} classes", p.class)));
        }
        if p.x.len() != n_features {
            return Err(Error::DimensionMismatch { expected: n_features, got: p.x.len() });
        }
        if !(p.weight >= 0.0 && p.weight.is_finite()) {
            return Err(Error::InvalidArgument("point weights must be finite and non-negative".into()));
        }
    }
    Ok(())
}

/// Grows a tree on labelled points, splitting a node only when the gain gap
/// over the best split on another feature exceeds the Hoeffding bound.
pub fn grow_from_points(
    points: &[LabelledPoint],
    kind: ModelKind,
    n_features: usize,
    params: TreeParams,
    epoch: u32,
) -> Result<TreeModel> {
    params.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyInput("cannot grow a tree without labelled points".into()));
    }
    let k = class_count(kind);
    validate_points(points, k, n_features)?;
    let mut tree = TreeModel { kind, classes: k, n_features, params, epoch, nodes: BTreeMap::new(), next_id: 1 };
    let all: Vec<&LabelledPoint> = points.iter().collect();
    grow_node(&mut tree, 0, None, &all, 0);
    Ok(tree)
}

fn grow_node(tree: &mut TreeModel, id: usize, parent: Option<usize>, points: &[&LabelledPoint], depth: usize) {
    let k = tree.classes;
    let split =
        if depth < tree.params.max_depth { hoeffding_split(points, k, tree.n_features, &tree.params) } else { None };
    match split {
        Some(s) => {
            let (left, right) = (tree.next_id, tree.next_id + 1);
            tree.next_id += 2;
            tree.nodes.insert(
                id,
                Node { id, parent, kind: NodeKind::Split { feature: s.feature, threshold: s.threshold, left, right } },
            );
            let (lp, rp): (Vec<&LabelledPoint>, Vec<&LabelledPoint>) =
                points.iter().partition(|p| p.x[s.feature] <= s.threshold);
            grow_node(tree, left, Some(id), &lp, depth + 1);
            grow_node(tree, right, Some(id), &rp, depth + 1);
        }
        None => {
            let counts = class_counts(points, k);
            let probs = smoothed(&counts, tree.params.smoothing);
            let stats = LeafStats::single(tree.epoch, counts);
            tree.nodes.insert(id, Node { id, parent, kind: NodeKind::Leaf { probs, stats } });
        }
    }
}

/// Grows the initial tree from labelled core records.
pub fn grow_initial(core: &[PersonRecord], kind: ModelKind, params: TreeParams, epoch: u32) -> Result<TreeModel> {
    let points = points_from_records(core, kind);
    if points.is_empty() {
        return Err(Error::EmptyInput("no labelled records to grow a tree from".into()));
    }
    grow_from_points(&points, kind, TREE_FEATURE_NAMES.len(), params, epoch)
}

/// Counters for every record from the tree's leaves.
pub fn tree_counters(model: &TreeModel, pd: &[PersonRecord]) -> Result<Vec<FractionalCounter<f64>>> {
    pd.iter().map(|r| model.counter(r)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RollMode {
    /// Maximise `Δε` subject to `Δ_M ≤ bound`.
    Primary,
    /// Minimise `Δ_M` subject to `Δε ≥ min_delta_eps`.
    Dual { min_delta_eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RollConfig {
    /// Upper bound `B` on `Δ_M`.
    pub bound: f64,
    /// L1 movement that counts a non-updated unit as changed.
    pub eta: f64,
    pub half_life: f64,
    /// Epoch of the new evidence.
    pub epoch: u32,
    pub mode: RollMode,
    /// Edits must beat `max(se_multiplier·SE, min_gain)` on validation.
    pub se_multiplier: f64,
    pub min_gain: f64,
}

impl Default for RollConfig {
    fn default() -> Self {
        Self {
            bound: 0.05,
            eta: 0.05,
            half_life: 2.0,
            epoch: 1,
            mode: RollMode::Primary,
            se_multiplier: 3.0,
            min_gain: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Refresh,
    Split,
    Collapse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRecord {
    pub kind: EditKind,
    pub node: usize,
    pub delta_eps: f64,
    pub delta_m: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateReport {
    pub delta_eps: f64,
    pub delta_m: f64,
    pub accepted: bool,
    pub candidates: usize,
    pub edits: Vec<EditRecord>,
}

/// Deterministic 50/50 train/validation assignment by record id.
pub fn is_validation(id: u64) -> bool {
    let mut z = id.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) & 1 == 1
}

fn log_loss(model: &TreeModel, p: &LabelledPoint) -> f64 {
    -model.predict(&p.x)[p.class].max(f64::MIN_POSITIVE).ln()
}

/// Mean held-out log-loss improvement of `new` over `old` and its standard error.
pub fn delta_eps(old: &TreeModel, new: &TreeModel, validation: &[LabelledPoint]) -> (f64, f64) {
    if validation.is_empty() {
        return (0.0, 0.0);
    }
    let d: Vec<f64> = validation.iter().map(|p| log_loss(old, p) - log_loss(new, p)).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let se = if d.len() > 1 {
        (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    (mean, se)
}

/// Share of non-updated units whose predicted vector moves more than `eta` in L1.
pub fn delta_m(old: &TreeModel, new: &TreeModel, non_updated: &[Vec<f64>], eta: f64) -> f64 {
    if non_updated.is_empty() {
        return 0.0;
    }
    let moved = non_updated
        .iter()
        .filter(|x| {
            let (a, b) = (old.predict(x), new.predict(x));
            a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>() > eta
        })
        .count();
    moved as f64 / non_updated.len() as f64
}

#[derive(Debug, Clone)]
struct Candidate {
    kind: EditKind,
    node: usize,
    touched: Vec<usize>,
    model: TreeModel,
    delta_eps: f64,
    se: f64,
    delta_m: f64,
}

fn refresh_edit(base: &TreeModel, leaf: usize, train: &[&LabelledPoint], cfg: &RollConfig) -> Result<TreeModel> {
    let NodeKind::Leaf { stats, .. } = &base.nodes[&leaf].kind else {
        unreachable!("refresh targets a leaf")
    };
    let mut st = stats.clone();
    st.push(cfg.epoch, &class_counts(train, base.classes));
    let probs = base.leaf_probs(&st, cfg.epoch, cfg.half_life)?;
    let mut m = base.clone();
    m.nodes.get_mut(&leaf).expect("leaf exists").kind = NodeKind::Leaf { probs, stats: st };
    m.epoch = cfg.epoch;
    Ok(m)
}

fn split_edit(
    base: &TreeModel,
    leaf: usize,
    train: &[&LabelledPoint],
    cfg: &RollConfig,
) -> Result<Option<TreeModel>> {
    if base.depth_of(leaf) >= base.params.max_depth {
        return Ok(None);
    }
    let Some(s) = hoeffding_split(train, base.classes, base.n_features, &base.params) else {
        return Ok(None);
    };
    let NodeKind::Leaf { stats, .. } = &base.nodes[&leaf].kind else {
        return Ok(None);
    };
    let (lp, rp): (Vec<&LabelledPoint>, Vec<&LabelledPoint>) = train.iter().partition(|p| p.x[s.feature] <= s.threshold);
    let n = train.len() as f64;
    let mut m = base.clone();
    let (left, right) = (m.next_id, m.next_id + 1);
    m.next_id += 2;
    for (id, pts) in [(left, &lp), (right, &rp)] {
        // the parent's history is shared in proportion to the new evidence
        let mut st = stats.scaled(pts.len() as f64 / n);
        st.push(cfg.epoch, &class_counts(pts, base.classes));
        let probs = base.leaf_probs(&st, cfg.epoch, cfg.half_life)?;
        m.nodes.insert(id, Node { id, parent: Some(leaf), kind: NodeKind::Leaf { probs, stats: st } });
    }
    m.nodes.get_mut(&leaf).expect("leaf exists").kind =
        NodeKind::Split { feature: s.feature, threshold: s.threshold, left, right };
    m.epoch = cfg.epoch;
    Ok(Some(m))
}

fn collapse_edit(
    base: &TreeModel,
    node: usize,
    train: &[&LabelledPoint],
    cfg: &RollConfig,
) -> Result<Option<TreeModel>> {
    let NodeKind::Split { left, right, .. } = base.nodes[&node].kind else {
        return Ok(None);
    };
    let (
        NodeKind::Leaf { stats: ls, .. },
        NodeKind::Leaf { stats: rs, .. },
    ) = (&base.nodes[&left].kind, &base.nodes[&right].kind)
    else {
        return Ok(None);
    };
    let mut st = ls.clone();
    st.merge(rs);
    st.push(cfg.epoch, &class_counts(train, base.classes));
    let probs = base.leaf_probs(&st, cfg.epoch, cfg.half_life)?;
    let mut m = base.clone();
    m.nodes.remove(&left);
    m.nodes.remove(&right);
    m.nodes.get_mut(&node).expect("node exists").kind = NodeKind::Leaf { probs, stats: st };
    m.epoch = cfg.epoch;
    Ok(Some(m))
}

/// Applies the edit of `cand` (computed against the base tree) on top of `current`.
fn transplant(current: &mut TreeModel, cand: &Candidate) {
    match cand.kind {
        EditKind::Refresh => {
            current.nodes.insert(cand.node, cand.model.nodes[&cand.node].clone());
        }
        EditKind::Split => {
            let NodeKind::Split { left, right, .. } = cand.model.nodes[&cand.node].kind else {
                unreachable!("split edit installs a split")
            };
            // child ids must not clash with other accepted splits
            let (nl, nr) = (current.next_id, current.next_id + 1);
            current.next_id += 2;
            let mut parent = cand.model.nodes[&cand.node].clone();
            if let NodeKind::Split { left: l, right: r, .. } = &mut parent.kind {
                *l = nl;
                *r = nr;
            }
            current.nodes.insert(cand.node, parent);
            for (old, new) in [(left, nl), (right, nr)] {
                let mut child = cand.model.nodes[&old].clone();
                child.id = new;
                current.nodes.insert(new, child);
            }
        }
        EditKind::Collapse => {
            if let NodeKind::Split { left, right, .. } = current.nodes[&cand.node].kind {
                current.nodes.remove(&left);
                current.nodes.remove(&right);
            }
            current.nodes.insert(cand.node, cand.model.nodes[&cand.node].clone());
        }
    }
    current.epoch = cand.model.epoch;
}

/// One rolling epoch for a tree counter.
///
/// `updated` holds the units with fresh labels (`D_t`), split 50/50 by id
/// into training and validation halves; `non_updated` holds the feature
/// vectors of the remaining units. Candidate edits are scored against the
/// previous tree, and a greedy batch of non-overlapping edits is accepted.
/// When no batch satisfies the constraint the previous tree is returned with
/// `accepted = false`.
pub fn roll_tree(
    model: &TreeModel,
    updated: &[LabelledPoint],
    non_updated: &[Vec<f64>],
    cfg: &RollConfig,
) -> Result<(TreeModel, UpdateReport)> {
    if !(cfg.bound >= 0.0) {
        return Err(Error::InvalidArgument(format!("bound B = {} must be non-negative", cfg.bound)));
    }
    if !(cfg.eta >= 0.0) {
        return Err(Error::InvalidArgument("eta must be non-negative".into()));
    }
    if cfg.half_life.is_nan() || cfg.half_life < 0.0 {
        return Err(Error::InvalidArgument("half-life must be non-negative".into()));
    }
    validate_points(updated, model.classes, model.n_features)?;
    if updated.is_empty() {
        return Ok((model.clone(), UpdateReport::default()));
    }
    let (validation, train): (Vec<LabelledPoint>, Vec<LabelledPoint>) =
        updated.iter().cloned().partition(|p| is_validation(p.id));
    let mut by_leaf: BTreeMap<usize, Vec<&LabelledPoint>> = BTreeMap::new();
    for p in &train {
        by_leaf.entry(model.leaf_of(&p.x)).or_default().push(p);
    }

    let mut edits: Vec<(EditKind, usize, Vec<usize>, TreeModel)> = Vec::new();
    for (&leaf, pts) in &by_leaf {
        edits.push((EditKind::Refresh, leaf, vec![leaf], refresh_edit(model, leaf, pts, cfg)?));
        if let Some(m) = split_edit(model, leaf, pts, cfg)? {
            edits.push((EditKind::Split, leaf, vec![leaf], m));
        }
    }
    for node in model.nodes.values() {
        if let NodeKind::Split { left, right, .. } = node.kind {
            let mut pts: Vec<&LabelledPoint> = Vec::new();
            for child in [left, right] {
                pts.extend(by_leaf.get(&child).into_iter().flatten().copied());
            }
            if let Some(m) = collapse_edit(model, node.id, &pts, cfg)? {
                edits.push((EditKind::Collapse, node.id, vec![node.id, left, right], m));
            }
        }
    }
    let mut cands: Vec<Candidate> = edits
        .into_iter()
        .map(|(kind, node, touched, m)| {
            let (de, se) = delta_eps(model, &m, &validation);
            let dm = delta_m(model, &m, non_updated, cfg.eta);
            Candidate { kind, node, touched, model: m, delta_eps: de, se, delta_m: dm }
        })
        .collect();
    let n_cands = cands.len();
    cands.retain(|c| c.delta_eps >= (cfg.se_multiplier * c.se).max(cfg.min_gain));
    match cfg.mode {
        RollMode::Primary => cands.sort_by(|a, b| {
            b.delta_eps.total_cmp(&a.delta_eps).then(a.delta_m.total_cmp(&b.delta_m)).then(a.node.cmp(&b.node))
        }),
        RollMode::Dual { .. } => cands.sort_by(|a, b| {
            a.delta_m.total_cmp(&b.delta_m).then(b.delta_eps.total_cmp(&a.delta_eps)).then(a.node.cmp(&b.node))
        }),
    }

    let mut current = model.clone();
    let mut touched: BTreeSet<usize> = BTreeSet::new();
    let mut accepted = Vec::new();
    let mut cum_eps = 0.0;
    for c in &cands {
        if c.touched.iter().any(|n| touched.contains(n)) {
            continue;
        }
        let mut trial = current.clone();
        transplant(&mut trial, c);
        let dm = delta_m(model, &trial, non_updated, cfg.eta);
        if let RollMode::Primary = cfg.mode {
            if dm > cfg.bound {
                continue;
            }
        }
        current = trial;
        touched.extend(c.touched.iter().copied());
        accepted.push(EditRecord { kind: c.kind, node: c.node, delta_eps: c.delta_eps, delta_m: c.delta_m });
        cum_eps += c.delta_eps;
        if let RollMode::Dual { min_delta_eps } = cfg.mode {
            if cum_eps >= min_delta_eps {
                break;
            }
        }
    }
    let satisfied = match cfg.mode {
        RollMode::Primary => !accepted.is_empty(),
        RollMode::Dual { min_delta_eps } => !accepted.is_empty() && cum_eps >= min_delta_eps,
    };
    if !satisfied {
        return Ok((model.clone(), UpdateReport { candidates: n_cands, ..UpdateReport::default() }));
    }
    let (de, _) = delta_eps(model, &current, &validation);
    let dm = delta_m(model, &current, non_updated, cfg.eta);
    Ok((current, UpdateReport { delta_eps: de, delta_m: dm, accepted: true, candidates: n_cands, edits: accepted }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::synthworld::replicate_rng;

    fn pt(id: u64, x: Vec<f64>, class: usize) -> LabelledPoint {
        LabelledPoint { id, x, class, weight: 1.0 }
    }

    #[test]
    fn stale_weights() {
        let st = LeafStats { batches: vec![(0, vec![4.0, 2.0]), (2, vec![1.0, 1.0]), (3, vec![0.0, 3.0])] };
        assert_eq!(stale_evidence_weight(&st, 3, f64::INFINITY).unwrap(), vec![5.0, 6.0]);
        let w = stale_evidence_weight(&st, 3, 1.0).unwrap();
        assert!((w[0] - (4.0 * 0.125 + 0.5)).abs() < 1e-15);
        assert!((w[1] - (2.0 * 0.125 + 0.5 + 3.0)).abs() < 1e-15);
        let one = LeafStats { batches: vec![(1, vec![1.0])] };
        assert_eq!(stale_evidence_weight(&one, 4, 3.0).unwrap(), vec![0.5]);
        assert!(stale_evidence_weight(&one, 4, -1.0).is_err());
    }

    #[test]
    fn pure_labels_give_single_leaf() {
        let pts: Vec<_> = (0..1000).map(|i| pt(i, vec![i as f64, 0.0], 1)).collect();
        let t = grow_from_points(&pts, ModelKind::Erroneous, 2, TreeParams::default(), 0).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert!(t.predict(&[3.0, 0.0])[1] >= 0.999);
    }

    #[test]
    fn separable_feature_gives_one_split() {
        let mut rng = replicate_rng(11, 0);
        let pts: Vec<_> = (0..5000)
            .map(|i| {
                let x: f64 = rng.random();
                pt(i, vec![x], usize::from(x > 0.3))
            })
            .collect();
        let t = grow_from_points(&pts, ModelKind::Erroneous, 1, TreeParams::default(), 0).unwrap();
        assert_eq!(t.nodes.len(), 3);
        let NodeKind::Split { feature, threshold, .. } = t.root().kind else { panic!("root should split") };
        assert_eq!(feature, 0);
        assert!((threshold - 0.3).abs() < 0.01);
    }

    #[test]
    fn hoeffding_guard_blocks_small_samples() {
        // gain of a perfect binary split is 1 bit; with n points the bound is
        // sqrt(ln(1/δ)/2n), so n = 4 cannot clear δ = 1e-6
        let pts = vec![pt(0, vec![0.0], 0), pt(1, vec![0.1], 0), pt(2, vec![0.9], 1), pt(3, vec![1.0], 1)];
        let params = TreeParams { min_leaf: 1, ..TreeParams::default() };
        assert!(hoeffding_bound(1.0, params.hoeffding_delta, 4.0) > 1.0);
        let t = grow_from_points(&pts, ModelKind::Erroneous, 1, params, 0).unwrap();
        assert_eq!(t.nodes.len(), 1);
    }

    fn planted(x: &[f64]) -> f64 {
        // probability of class 1 under a depth-2 generating tree
        if x[0] <= 0.5 {
            if x[1] <= 0.3 { 0.1 } else { 0.7 }
        } else {
            0.4
        }
    }

    #[test]
    fn recovers_generating_tree() {
        let mut rng = replicate_rng(12, 0);
        let pts: Vec<_> = (0..200_000u64)
            .map(|i| {
                let x = vec![rng.random::<f64>(), rng.random::<f64>()];
                let c = usize::from(rng.random::<f64>() < planted(&x));
                pt(i, x, c)
            })
            .collect();
        let params = TreeParams { min_leaf: 200, max_depth: 3, ..TreeParams::default() };
        let t = grow_from_points(&pts, ModelKind::Erroneous, 2, params, 0).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..2000 {
            let x = vec![rng.random::<f64>(), rng.random::<f64>()];
            let p = planted(&x);
            let got = t.predict(&x);
            worst = worst.max((got[1] - p).abs() + (got[0] - (1.0 - p)).abs());
        }
        // probes within a hair of a threshold may be misrouted; check the bulk
        let mut bad = 0;
        for _ in 0..2000 {
            let x = vec![rng.random::<f64>(), rng.random::<f64>()];
            let p = planted(&x);
            let got = t.predict(&x);
            if (got[1] - p).abs() + (got[0] - (1.0 - p)).abs() > 0.02 {
                bad += 1;
            }
        }
        assert!(bad <= 20, "{bad} probes off by more than 0.02 (worst {worst})");
    }

    fn stream(rng: &mut impl Rng, n: u64, start: u64, shifted: bool) -> Vec<LabelledPoint> {
        (start..start + n)
            .map(|i| {
                let x = vec![rng.random::<f64>(), rng.random::<f64>()];
                let mut p = planted(&x);
                if shifted && x[0] > 0.5 {
                    p = 0.9;
                }
                let c = usize::from(rng.random::<f64>() < p);
                pt(i, x, c)
            })
            .collect()
    }

    fn base_tree(rng: &mut impl Rng) -> TreeModel {
        let pts = stream(rng, 40_000, 0, false);
        let params = TreeParams { min_leaf: 200, max_depth: 3, ..TreeParams::default() };
        grow_from_points(&pts, ModelKind::Erroneous, 2, params, 0).unwrap()
    }

    fn probes(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect()
    }

    #[test]
    fn zero_edits_is_identity() {
        let mut rng = replicate_rng(13, 0);
        let t = base_tree(&mut rng);
        let (same, rep) = roll_tree(&t, &[], &probes(&mut rng, 100), &RollConfig::default()).unwrap();
        assert_eq!(same, t);
        assert_eq!((rep.delta_eps, rep.delta_m, rep.accepted), (0.0, 0.0, false));
        let v = stream(&mut rng, 100, 0, false);
        assert_eq!(delta_eps(&t, &t, &v), (0.0, 0.0));
        assert_eq!(delta_m(&t, &t, &probes(&mut rng, 100), 0.05), 0.0);
        assert!(roll_tree(&t, &v, &[], &RollConfig { bound: -0.1, ..RollConfig::default() }).is_err());
    }

    #[test]
    fn stationary_stream_leaves_tree_unchanged() {
        let mut rng = replicate_rng(14, 0);
        let t = base_tree(&mut rng);
        let d = stream(&mut rng, 2000, 100_000, false);
        let cfg = RollConfig { bound: 1.0, half_life: f64::INFINITY, ..RollConfig::default() };
        let (m, rep) = roll_tree(&t, &d, &probes(&mut rng, 500), &cfg).unwrap();
        assert!(!rep.accepted, "{rep:?}");
        assert_eq!(m, t);
    }

    #[test]
    fn planted_shift_changes_only_shifted_region() {
        let mut rng = replicate_rng(15, 0);
        let t = base_tree(&mut rng);
        let d = stream(&mut rng, 4000, 100_000, true);
        let cfg = RollConfig { bound: 1.0, half_life: 0.1, ..RollConfig::default() };
        let probe = probes(&mut rng, 1000);
        let (m, rep) = roll_tree(&t, &d, &probe, &cfg).unwrap();
        assert!(rep.accepted && rep.delta_eps > 0.0, "{rep:?}");
        for x in &probe {
            if x[0] <= 0.5 {
                assert_eq!(m.predict(x), t.predict(x));
            }
        }
        let bound0 = RollConfig { bound: 0.0, ..cfg };
        let (m0, rep0) = roll_tree(&t, &d, &probe, &bound0).unwrap();
        assert!(!rep0.accepted);
        assert_eq!(m0, t);
    }

    #[test]
    fn dual_mode_meets_lower_bound() {
        let mut rng = replicate_rng(16, 0);
        let t = base_tree(&mut rng);
        let d = stream(&mut rng, 4000, 100_000, true);
        let probe = probes(&mut rng, 500);
        let cfg = RollConfig { half_life: 0.5, mode: RollMode::Dual { min_delta_eps: 0.01 }, ..RollConfig::default() };
        let (_, rep) = roll_tree(&t, &d, &probe, &cfg).unwrap();
        assert!(rep.accepted && rep.edits.iter().map(|e| e.delta_eps).sum::<f64>() >= 0.01);
        let cfg = RollConfig { mode: RollMode::Dual { min_delta_eps: 10.0 }, ..cfg };
        let (m, rep) = roll_tree(&t, &d, &probe, &cfg).unwrap();
        assert!(!rep.accepted);
        assert_eq!(m, t);
    }

    #[test]
    fn text_round_trip() {
        let mut rng = replicate_rng(17, 0);
        let t = base_tree(&mut rng);
        let d = stream(&mut rng, 4000, 100_000, true);
        let (m, _) =
            roll_tree(&t, &d, &probes(&mut rng, 200), &RollConfig { bound: 1.0, half_life: 0.5, ..Default::default() })
                .unwrap();
        let back = TreeModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(TreeModel::from_text("tree v2\n").is_err());
    }

    #[test]
    fn record_counters_are_on_the_simplex() {
        use crate::synthworld::{derive_pd, generate_world, simulate_census, ScenarioConfig};
        let mut cfg = ScenarioConfig::default();
        cfg.world.population = 3000;
        cfg.register.displacement_rate = 0.1;
        let w = generate_world(&cfg, &mut replicate_rng(18, 0)).unwrap();
        let pd = derive_pd(&w, &cfg, &mut replicate_rng(18, 1)).unwrap();
        let c = simulate_census(&w, &pd, 1.0, 0.0, &mut replicate_rng(18, 2)).unwrap();
        let core: Vec<_> = c.pd.iter().filter(|r| r.core).cloned().collect();
        let tree = grow_initial(&core, ModelKind::Placement, TreeParams::default(), 0).unwrap();
        for k in tree_counters(&tree, &c.pd).unwrap() {
            assert!(k.simplex_residual() < 1e-12);
        }
        assert!(grow_initial(&[], ModelKind::Placement, TreeParams::default(), 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn accepted_updates_respect_bound(seed in 0u64..1000, bound in 0.0f64..0.6, shift in 0.0f64..0.5) {
            let mut rng = replicate_rng(seed, 0);
            let pts: Vec<_> = (0..4000u64).map(|i| {
                let x = vec![rng.random::<f64>(), rng.random::<f64>()];
                let c = usize::from(rng.random::<f64>() < planted(&x));
                pt(i, x, c)
            }).collect();
            let t = grow_from_points(&pts, ModelKind::Erroneous, 2,
                TreeParams { min_leaf: 50, max_depth: 3, ..TreeParams::default() }, 0).unwrap();
            let d: Vec<_> = (0..1500u64).map(|i| {
                let x = vec![rng.random::<f64>(), rng.random::<f64>()];
                let p = (planted(&x) + if x[1] > 0.5 { shift } else { 0.0 }).min(1.0);
                let c = usize::from(rng.random::<f64>() < p);
                pt(10_000 + i, x, c)
            }).collect();
            let probe = probes(&mut rng, 300);
            let cfg = RollConfig { bound, half_life: 1.0, ..RollConfig::default() };
            let (m, rep) = roll_tree(&t, &d, &probe, &cfg).unwrap();
            if rep.accepted {
                prop_assert!(rep.delta_m <= bound + 1e-12);
                prop_assert!((delta_m(&t, &m, &probe, cfg.eta) - rep.delta_m).abs() < 1e-12);
            } else {
                prop_assert_eq!(m, t);
            }
        }
    }
}

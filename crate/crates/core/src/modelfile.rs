//! Persisted model files and counters CSV.
//!
//! A model file is TOML:
//!
//! ```toml
//! format = "fraccount-model/1"
//! epoch = 0
//! ridge = 0.0001
//!
//! [placement]            # optional; likewise [erroneous]
//! names = ["source_a", ...]
//! beta = [1.0, ...]
//! covariance = [[...], ...]
//!
//! [theta]                # optional
//! method = "subset"
//! coefficients = [-3.0, ...]
//! covariance = [[...], ...]
//!
//! [benchmark]            # optional
//! theta_factor = 1.02
//! theta_residual = 0.0
//! locality_factors = [0.99, ...]
//! iterations = 7
//! max_violation = 1e-9
//!
//! tree = """..."""       # optional tree in its own text format
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::counting::FractionalCounter;
use crate::error::{Error, Result};
use crate::features::{ERRONEOUS_NAMES, PLACEMENT_NAMES};
use crate::initiate::{BenchmarkReport, ThetaFit};
use crate::linalg::Matrix;
use crate::model::{ModelKind, ParamState};
use crate::scalar::Scalar;
use crate::synthworld::PersonId;
use crate::treeroll::TreeModel;

pub const FORMAT: &str = "fraccount-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSection {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl ParamSection {
    pub fn from_state<T: Scalar>(s: &ParamState<T>) -> Self {
        let names: &[&str] = match s.kind {
            ModelKind::Placement => &PLACEMENT_NAMES,
            ModelKind::Erroneous => &ERRONEOUS_NAMES,
        };
        Self {
            names: names.iter().map(|n| n.to_string()).collect(),
            beta: s.beta.iter().map(|b| b.to_f64_lossy()).collect(),
            covariance: s.sigma.to_rows().into_iter().map(|r| r.into_iter().map(|x| x.to_f64_lossy()).collect()).collect(),
        }
    }

    pub fn to_state<T: Scalar>(&self, kind: ModelKind, epoch: u32) -> Result<ParamState<T>> {
        let rows: Vec<Vec<T>> = self.covariance.iter().map(|r| r.iter().map(|&x| T::lit(x)).collect()).collect();
        ParamState::new(kind, self.beta.iter().map(|&b| T::lit(b)).collect(), Matrix::from_rows(&rows)?, epoch)
    }
}

/// The initiation `θ` model; coefficients are absent for the hypercube option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSection {
    pub method: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coefficients: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariance: Vec<Vec<f64>>,
}

impl ThetaSection {
    pub fn from_fit<T: Scalar>(method: &str, fit: &ThetaFit<T>) -> Self {
        Self {
            method: method.into(),
            coefficients: fit.coefficients.iter().flatten().map(|b| b.to_f64_lossy()).collect(),
            covariance: fit
                .covariance
                .iter()
                .flat_map(|c| c.to_rows())
                .map(|r| r.into_iter().map(|x| x.to_f64_lossy()).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub theta_factor: f64,
    pub theta_residual: f64,
    pub locality_factors: Vec<f64>,
    pub iterations: usize,
    pub max_violation: f64,
}

impl BenchmarkSection {
    pub fn from_report<T: Scalar>(r: &BenchmarkReport<T>) -> Self {
        Self {
            theta_factor: r.theta_factor.to_f64_lossy(),
            theta_residual: r.theta_residual.to_f64_lossy(),
            locality_factors: r.locality_factors.iter().map(|f| f.to_f64_lossy()).collect(),
            iterations: r.iterations,
            max_violation: r.max_violation.to_f64_lossy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub epoch: u32,
    pub ridge: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<ParamSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub erroneous: Option<ParamSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<ThetaSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<String>,
}

impl ModelFile {
    pub fn new(epoch: u32, ridge: f64) -> Self {
        Self { format: FORMAT.into(), epoch, ridge, placement: None, erroneous: None, theta: None, benchmark: None, tree: None }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model file serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: Self = toml::from_str(text).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        if f.format != FORMAT {
            return Err(Error::Parse { line: 1, msg: format!("unsupported model format {:?}", f.format) });
        }
        Ok(f)
    }

    pub fn placement_state<T: Scalar>(&self) -> Result<Option<ParamState<T>>> {
        self.placement.as_ref().map(|p| p.to_state(ModelKind::Placement, self.epoch)).transpose()
    }

    pub fn erroneous_state<T: Scalar>(&self) -> Result<Option<ParamState<T>>> {
        self.erroneous.as_ref().map(|p| p.to_state(ModelKind::Erroneous, self.epoch)).transpose()
    }

    pub fn tree_model(&self) -> Result<Option<TreeModel>> {
        self.tree.as_deref().map(TreeModel::from_text).transpose()
    }
}

/// Header of the counters CSV; `mu` is `;`-joined.
pub const COUNTERS_HEADER: [&str; 5] = ["id", "q", "mu", "xi", "theta"];

pub fn write_counters<T: Scalar, W: Write>(
    ids: &[PersonId],
    counters: &[FractionalCounter<T>],
    out: W,
) -> Result<()> {
    if ids.len() != counters.len() {
        return Err(Error::DimensionMismatch { expected: ids.len(), got: counters.len() });
    }
    let io = |e: csv::Error| Error::InvalidArgument(format!("writing counters: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COUNTERS_HEADER).map_err(io)?;
    for (id, c) in ids.iter().zip(counters) {
        let mu = c.mu.iter().map(|m| m.to_f64_lossy().to_string()).collect::<Vec<_>>().join(";");
        w.write_record([
            id.0.to_string(),
            c.q().to_string(),
            mu,
            c.xi.to_f64_lossy().to_string(),
            c.theta.to_f64_lossy().to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("writing counters: {e}")))?;
    Ok(())
}

/// Reads a counters CSV; lines starting with `#` are skipped.
pub fn read_counters<R: Read>(input: R) -> Result<Vec<(PersonId, FractionalCounter<f64>)>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let headers = r.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    if headers.iter().collect::<Vec<_>>() != COUNTERS_HEADER {
        return Err(Error::Parse { line: 1, msg: format!("unexpected header {headers:?}") });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let bad = |msg: String| Error::Parse { line, msg };
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let id = rec[0].parse::<u64>().map_err(|e| bad(e.to_string()))?;
        let q = rec[1].parse::<usize>().map_err(|e| bad(e.to_string()))?;
        let mu = rec[2].split(';').map(num).collect::<Result<Vec<_>>>()?;
        if mu.len() != q {
            return Err(bad(format!("q = {q} but {} placement probabilities", mu.len())));
        }
        let c = FractionalCounter::new(mu, num(&rec[3])?, num(&rec[4])?).map_err(|e| bad(e.to_string()))?;
        out.push((PersonId(id), c));
    }
    Ok(out)
}

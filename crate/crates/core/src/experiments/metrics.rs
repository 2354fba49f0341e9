//! Error metrics and report files.
//!
//! RMSE is √(mean of squared errors); MAPE is 100·mean(|err|/|truth|) with
//! zero-truth rows excluded and the exclusion count reported. Both metrics
//! sum their per-row terms in sorted order, which makes the result invariant
//! under any permutation of the rows, not merely close.
//!
//! Reports are two kinds of CSV: one metrics table
//! (`scenario,method,dimension,rmse,mape,n_test,runtime_s`) and one
//! truth-versus-estimate scatter file per method and dimension
//! (`i,k,truth,estimate`). Values are written with exact round-trip decimal
//! formatting so reruns with the same seed produce byte-identical files.
//! Runtime is written as `0.000` unless wall-clock recording is requested,
//! keeping the default reports stable across machines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, OutputDim};
use crate::experiments::{io_err, ExperimentError};

/// Estimation methods compared by the studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Open-loop corridor simulation with the configured parameters.
    Metanet,
    /// Extended Kalman filter around the corridor model.
    MetanetEkf,
    /// GP regression alone.
    PureGp,
    /// GP regression with the physics term.
    Prgp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Metanet, Method::MetanetEkf, Method::PureGp, Method::Prgp];

    pub fn label(self) -> &'static str {
        match self {
            Method::Metanet => "metanet",
            Method::MetanetEkf => "metanet-ekf",
            Method::PureGp => "pure-gp",
            Method::Prgp => "prgp",
        }
    }

    pub fn parse(label: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.label() == label)
    }
}

/// Sum in ascending order. Makes reductions permutation-invariant bitwise.
fn stable_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Root mean squared error over aligned pairs.
pub fn rmse(truth: &[f64], estimate: &[f64]) -> f64 {
    assert_eq!(truth.len(), estimate.len(), "rmse needs aligned series");
    assert!(!truth.is_empty(), "rmse needs at least one pair");
    let squares: Vec<f64> =
        truth.iter().zip(estimate).map(|(t, e)| (e - t) * (e - t)).collect();
    (stable_sum(squares) / truth.len() as f64).sqrt()
}

/// Mean absolute percentage error over aligned pairs, as a percentage.
/// Rows whose true value is zero are excluded; the second return value is
/// the number of excluded rows. With no usable rows the error is NaN.
pub fn mape(truth: &[f64], estimate: &[f64]) -> (f64, usize) {
    assert_eq!(truth.len(), estimate.len(), "mape needs aligned series");
    let mut terms = Vec::with_capacity(truth.len());
    let mut excluded = 0;
    for (t, e) in truth.iter().zip(estimate) {
        if *t == 0.0 {
            excluded += 1;
        } else {
            terms.push((e - t).abs() / t.abs());
        }
    }
    if terms.is_empty() {
        return (f64::NAN, excluded);
    }
    let n = terms.len() as f64;
    (100.0 * stable_sum(terms) / n, excluded)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimMetrics {
    pub dim: OutputDim,
    pub rmse: f64,
    pub mape: f64,
    /// Number of scored pairs.
    pub n: usize,
    /// Rows left out of MAPE because the true value is zero.
    pub mape_excluded: usize,
}

/// Estimates aligned row-for-row with a dataset's points.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub flow: Vec<f64>,
    pub speed: Vec<f64>,
}

/// Score estimates against the observed dimensions of a truth dataset.
/// Rows where the truth is unobserved in a dimension are skipped for that
/// dimension; a dimension with no observations is omitted entirely.
pub fn compute_metrics(
    truth: &Dataset,
    estimate: &Estimates,
) -> Result<Vec<DimMetrics>, ExperimentError> {
    let n = truth.len();
    for (name, len) in [("flow", estimate.flow.len()), ("speed", estimate.speed.len())] {
        if len != n {
            return Err(ExperimentError::InvalidArgument(format!(
                "{name} estimates have {len} rows, truth has {n}"
            )));
        }
    }
    let mut out = Vec::new();
    for dim in [OutputDim::Flow, OutputDim::Speed] {
        let column = match dim {
            OutputDim::Flow => &estimate.flow,
            OutputDim::Speed => &estimate.speed,
            OutputDim::Density => unreachable!(),
        };
        let mut t = Vec::new();
        let mut e = Vec::new();
        for row in 0..n {
            if let Some(value) = truth.value(row, dim) {
                t.push(value);
                e.push(column[row]);
            }
        }
        if t.is_empty() {
            continue;
        }
        for (name, series) in [("truth", &t), ("estimate", &e)] {
            if let Some(bad) = series.iter().find(|v| !v.is_finite()) {
                return Err(ExperimentError::InvalidArgument(format!(
                    "non-finite {name} value {bad} in {} metrics",
                    dim.label()
                )));
            }
        }
        let (mape, mape_excluded) = mape(&t, &e);
        out.push(DimMetrics { dim, rmse: rmse(&t, &e), mape, n: t.len(), mape_excluded });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub i: usize,
    pub k: usize,
    pub truth: f64,
    pub estimate: f64,
}

/// One method's outcome on a scenario: either scored metrics with scatter
/// rows, or the error that stopped it.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: Method,
    pub error: Option<String>,
    pub dims: Vec<DimMetrics>,
    pub scatter: Vec<(OutputDim, Vec<ScatterPoint>)>,
    /// Wall-clock seconds, recorded only when requested.
    pub runtime: Option<f64>,
}

impl MethodReport {
    pub fn failed(method: Method, error: String, runtime: Option<f64>) -> Self {
        MethodReport { method, error: Some(error), dims: Vec::new(), scatter: Vec::new(), runtime }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub scenario: String,
    pub n_test: usize,
    pub methods: Vec<MethodReport>,
}

pub const METRICS_HEADER: &str = "scenario,method,dimension,rmse,mape,n_test,runtime_s";

fn runtime_field(runtime: Option<f64>) -> String {
    format!("{:.3}", runtime.unwrap_or(0.0))
}

/// Render the metrics table. Failed methods contribute no rows; an empty
/// method list renders the header alone.
pub fn render_metrics_csv(report: &ScenarioReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for method in &report.methods {
        if method.error.is_some() {
            continue;
        }
        for d in &method.dims {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                report.scenario,
                method.method.label(),
                d.dim.label(),
                d.rmse,
                d.mape,
                d.n,
                runtime_field(method.runtime),
            );
        }
    }
    out
}

fn render_scatter_csv(points: &[ScatterPoint]) -> String {
    let mut out = String::from("i,k,truth,estimate\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.i, p.k, p.truth, p.estimate);
    }
    out
}

/// Write `metrics.csv`, one `scatter_<method>_<dim>.csv` per successful
/// method and dimension, and `errors.txt` when any method failed. Returns
/// the written paths.
pub fn emit_report(
    report: &ScenarioReport,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, ExperimentError> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();

    let metrics_path = dir.join("metrics.csv");
    std::fs::write(&metrics_path, render_metrics_csv(report))
        .map_err(|e| io_err(&metrics_path, e))?;
    written.push(metrics_path);

    for method in &report.methods {
        for (dim, points) in &method.scatter {
            let name = format!("scatter_{}_{}.csv", method.method.label(), dim.label());
            let path = dir.join(name);
            std::fs::write(&path, render_scatter_csv(points)).map_err(|e| io_err(&path, e))?;
            written.push(path);
        }
    }

    let failures: Vec<String> = report
        .methods
        .iter()
        .filter_map(|m| m.error.as_ref().map(|e| format!("{}: {e}", m.method.label())))
        .collect();
    if !failures.is_empty() {
        let path = dir.join("errors.txt");
        std::fs::write(&path, failures.join("\n") + "\n").map_err(|e| io_err(&path, e))?;
        written.push(path);
    }

    Ok(written)
}

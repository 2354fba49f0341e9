//! Discretized second-order macroscopic traffic flow model.
//!
//! State lives on a segmented corridor: per-segment density ρ (veh/km/lane),
//! space-mean speed v (km/h) and flow q (veh/h), advanced in steps of T hours:
//!
//! ```text
//! q_{i,k}   = ρ_{i,k} · v_{i,k} · λᵢ
//! ρ_{i,k+1} = ρ_{i,k} + T/(Δᵢλᵢ) · (q_{i−1,k} − q_{i,k} + r_{i,k} − s_{i,k})
//! v_{i,k+1} = v_{i,k} + T/τ · (V(ρ_{i,k}) − v_{i,k})
//!             + T/Δᵢ · v_{i,k} · (v_{i−1,k} − v_{i,k})
//!             − νT/(τΔᵢ) · (ρ_{i+1,k} − ρ_{i,k}) / (ρ_{i,k} + κ)
//!             − δT/(Δᵢλᵢ) · r_{i,k} · v_{i,k} / (ρ_{i,k} + κ)
//! V(ρ)      = v_f · exp(−(1/α) · (ρ/ρ_cr)^α)
//! ```
//!
//! The upstream boundary supplies exogenous flow and speed series and the
//! downstream boundary an exogenous density for the anticipation term; an
//! optional ring topology closes the corridor on itself, which makes total
//! vehicle count an exact invariant for conservation tests. The stochastic
//! variant adds seeded zero-mean Gaussian noise to every speed update and
//! every flow readout; the noisy flow is what enters the conservation update.
//!
//! All updates clamp at zero, so emitted grids never contain negative
//! density, speed or flow. Residual checks elsewhere rely on trajectories
//! where the clamp never activates.

use crate::data::{DataError, Dataset, GridPoint, UnitSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetanetError {
    #[error("negative density")]
    NegativeDensity,
    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("segment count must be at least 3, got {0}")]
    TooFewSegments(usize),
    #[error("per-segment series has {got} entries, expected {expected}")]
    SegmentSeriesLength { expected: usize, got: usize },
    #[error("index ({i}, {k}) outside grid {n_segments}x{n_steps}")]
    IndexOutOfGrid { i: usize, k: usize, n_segments: usize, n_steps: usize },
    #[error("horizon must be at least 2, got {0}")]
    HorizonTooShort(usize),
    #[error("missing boundary entry at step {0}")]
    MissingBoundary(usize),
    #[error("ramp series has {got} entries, expected {expected}")]
    RampSeriesLength { expected: usize, got: usize },
    #[error("detector index {0} out of range")]
    DetectorOutOfRange(usize),
    #[error("aggregation must be at least 1")]
    ZeroAggregation,
    #[error("grid csv error at line {line}: {msg}")]
    GridCsv { line: u64, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Physical parameters of the link model. Geometry (segment length Δᵢ, lane
/// count λᵢ) is per segment; the remaining constants are corridor-wide.
#[derive(Debug, Clone, PartialEq)]
pub struct MetanetParams {
    pub n_segments: usize,
    /// Simulation step T in hours.
    pub t_step: f64,
    /// Segment lengths Δᵢ in km, one per segment.
    pub seg_len: Vec<f64>,
    /// Lane counts λᵢ, one per segment.
    pub lanes: Vec<f64>,
    /// Free-flow speed v_f in km/h.
    pub free_speed: f64,
    /// Critical density ρ_cr in veh/km/lane.
    pub rho_crit: f64,
    /// Fundamental-diagram exponent α.
    pub alpha: f64,
    /// Relaxation time τ in hours.
    pub tau: f64,
    /// Anticipation constant ν in km²/h.
    pub nu: f64,
    /// Merge coefficient δ applied to on-ramp inflow.
    pub delta_ramp: f64,
    /// Density offset κ in veh/km/lane.
    pub kappa: f64,
}

impl Default for MetanetParams {
    /// Calibrated corridor defaults: 20 segments of 0.5 km with 4 lanes,
    /// 10-second step.
    fn default() -> Self {
        MetanetParams::with_uniform_geometry(20, 0.5, 4.0)
    }
}

impl MetanetParams {
    /// Default physical constants over a uniform corridor geometry.
    pub fn with_uniform_geometry(n_segments: usize, seg_len: f64, lanes: f64) -> Self {
        MetanetParams {
            n_segments,
            t_step: 1.0 / 360.0,
            seg_len: vec![seg_len; n_segments],
            lanes: vec![lanes; n_segments],
            free_speed: 120.0,
            rho_crit: 36.85,
            alpha: 1.4324,
            tau: 0.05,
            nu: 35.0,
            delta_ramp: 1.4,
            kappa: 13.0,
        }
    }

    pub fn validate(&self) -> Result<(), MetanetError> {
        if self.n_segments < 3 {
            return Err(MetanetError::TooFewSegments(self.n_segments));
        }
        for (name, value) in [
            ("t_step", self.t_step),
            ("free_speed", self.free_speed),
            ("rho_crit", self.rho_crit),
            ("alpha", self.alpha),
            ("tau", self.tau),
            ("nu", self.nu),
            ("delta_ramp", self.delta_ramp),
            ("kappa", self.kappa),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(MetanetError::InvalidParameter { name, value });
            }
        }
        for (name, series) in [("seg_len", &self.seg_len), ("lanes", &self.lanes)] {
            if series.len() != self.n_segments {
                return Err(MetanetError::SegmentSeriesLength {
                    expected: self.n_segments,
                    got: series.len(),
                });
            }
            if let Some(&bad) = series.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(MetanetError::InvalidParameter { name, value: bad });
            }
        }
        Ok(())
    }
}

/// Dense corridor trajectory: density, speed, flow and ramp rates over an
/// I-segment by K-step grid, stored step-major (all segments of step k are
/// contiguous).
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficGrid {
    n_segments: usize,
    n_steps: usize,
    rho: Vec<f64>,
    vel: Vec<f64>,
    flow: Vec<f64>,
    ramp_in: Vec<f64>,
    ramp_out: Vec<f64>,
}

impl TrafficGrid {
    pub fn zeros(n_segments: usize, n_steps: usize) -> Self {
        let cells = n_segments * n_steps;
        TrafficGrid {
            n_segments,
            n_steps,
            rho: vec![0.0; cells],
            vel: vec![0.0; cells],
            flow: vec![0.0; cells],
            ramp_in: vec![0.0; cells],
            ramp_out: vec![0.0; cells],
        }
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    fn idx(&self, i: usize, k: usize) -> usize {
        assert!(i < self.n_segments && k < self.n_steps, "grid index ({i}, {k}) out of bounds");
        k * self.n_segments + i
    }

    pub fn rho(&self, i: usize, k: usize) -> f64 {
        self.rho[self.idx(i, k)]
    }

    pub fn vel(&self, i: usize, k: usize) -> f64 {
        self.vel[self.idx(i, k)]
    }

    pub fn flow(&self, i: usize, k: usize) -> f64 {
        self.flow[self.idx(i, k)]
    }

    pub fn ramp_in(&self, i: usize, k: usize) -> f64 {
        self.ramp_in[self.idx(i, k)]
    }

    pub fn ramp_out(&self, i: usize, k: usize) -> f64 {
        self.ramp_out[self.idx(i, k)]
    }

    pub fn set_rho(&mut self, i: usize, k: usize, v: f64) {
        let idx = self.idx(i, k);
        self.rho[idx] = v;
    }

    pub fn set_vel(&mut self, i: usize, k: usize, v: f64) {
        let idx = self.idx(i, k);
        self.vel[idx] = v;
    }

    pub fn set_flow(&mut self, i: usize, k: usize, v: f64) {
        let idx = self.idx(i, k);
        self.flow[idx] = v;
    }

    pub fn set_ramp_in(&mut self, i: usize, k: usize, v: f64) {
        let idx = self.idx(i, k);
        self.ramp_in[idx] = v;
    }

    pub fn set_ramp_out(&mut self, i: usize, k: usize, v: f64) {
        let idx = self.idx(i, k);
        self.ramp_out[idx] = v;
    }

    pub fn rho_col(&self, k: usize) -> &[f64] {
        let start = self.idx(0, k);
        &self.rho[start..start + self.n_segments]
    }

    pub fn vel_col(&self, k: usize) -> &[f64] {
        let start = self.idx(0, k);
        &self.vel[start..start + self.n_segments]
    }

    pub fn flow_col(&self, k: usize) -> &[f64] {
        let start = self.idx(0, k);
        &self.flow[start..start + self.n_segments]
    }

    pub fn ramp_in_col(&self, k: usize) -> &[f64] {
        let start = self.idx(0, k);
        &self.ramp_in[start..start + self.n_segments]
    }

    pub fn ramp_out_col(&self, k: usize) -> &[f64] {
        let start = self.idx(0, k);
        &self.ramp_out[start..start + self.n_segments]
    }

    /// Writes the grid as CSV rows `i,k,rho,vel,flow,r,s`, step-major, with
    /// round-trip exact floating point formatting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetanetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "k", "rho", "vel", "flow", "r", "s"])
            .map_err(csv_error)?;
        for k in 0..self.n_steps {
            for i in 0..self.n_segments {
                let idx = k * self.n_segments + i;
                w.write_record([
                    i.to_string(),
                    k.to_string(),
                    self.rho[idx].to_string(),
                    self.vel[idx].to_string(),
                    self.flow[idx].to_string(),
                    self.ramp_in[idx].to_string(),
                    self.ramp_out[idx].to_string(),
                ])
                .map_err(csv_error)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<(), MetanetError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a grid written by [`TrafficGrid::write_csv`]. The extent is
    /// inferred from the largest indices; every cell must appear exactly once.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, MetanetError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = reader.headers().map_err(csv_error)?.clone();
        let expected = ["i", "k", "rho", "vel", "flow", "r", "s"];
        if header.iter().ne(expected) {
            return Err(MetanetError::GridCsv {
                line: 1,
                msg: format!("expected header i,k,rho,vel,flow,r,s, got {}", header.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut rows: Vec<(usize, usize, [f64; 5])> = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 7 {
                return Err(MetanetError::GridCsv {
                    line,
                    msg: format!("expected 7 fields, got {}", record.len()),
                });
            }
            let parse_idx = |field: usize| -> Result<usize, MetanetError> {
                record[field].trim().parse::<usize>().map_err(|e| MetanetError::GridCsv {
                    line,
                    msg: format!("bad index {:?}: {e}", &record[field]),
                })
            };
            let parse_val = |field: usize| -> Result<f64, MetanetError> {
                let v: f64 =
                    record[field].trim().parse().map_err(|e| MetanetError::GridCsv {
                        line,
                        msg: format!("bad value {:?}: {e}", &record[field]),
                    })?;
                if !v.is_finite() || v < 0.0 {
                    return Err(MetanetError::GridCsv {
                        line,
                        msg: format!("value {v} is negative or non-finite"),
                    });
                }
                Ok(v)
            };
            let i = parse_idx(0)?;
            let k = parse_idx(1)?;
            rows.push((
                i,
                k,
                [parse_val(2)?, parse_val(3)?, parse_val(4)?, parse_val(5)?, parse_val(6)?],
            ));
        }
        if rows.is_empty() {
            return Err(MetanetError::GridCsv { line: 1, msg: "no data rows".into() });
        }
        let n_segments = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let n_steps = rows.iter().map(|r| r.1).max().unwrap() + 1;
        if rows.len() != n_segments * n_steps {
            return Err(MetanetError::GridCsv {
                line: 0,
                msg: format!(
                    "grid {n_segments}x{n_steps} needs {} rows, got {}",
                    n_segments * n_steps,
                    rows.len()
                ),
            });
        }
        let mut grid = TrafficGrid::zeros(n_segments, n_steps);
        let mut seen = vec![false; n_segments * n_steps];
        for (i, k, vals) in rows {
            let idx = k * n_segments + i;
            if seen[idx] {
                return Err(MetanetError::GridCsv {
                    line: 0,
                    msg: format!("duplicate cell ({i}, {k})"),
                });
            }
            seen[idx] = true;
            grid.rho[idx] = vals[0];
            grid.vel[idx] = vals[1];
            grid.flow[idx] = vals[2];
            grid.ramp_in[idx] = vals[3];
            grid.ramp_out[idx] = vals[4];
        }
        Ok(grid)
    }

    pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Self, MetanetError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

fn csv_error(e: csv::Error) -> MetanetError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    MetanetError::GridCsv { line, msg: e.to_string() }
}

/// Equilibrium speed V(ρ) = v_f·exp(−(1/α)·(ρ/ρ_cr)^α).
pub fn fundamental_diagram(params: &MetanetParams, rho: f64) -> Result<f64, MetanetError> {
    if rho < 0.0 {
        return Err(MetanetError::NegativeDensity);
    }
    Ok(equilibrium_speed_unchecked(params, rho))
}

fn equilibrium_speed_unchecked(params: &MetanetParams, rho: f64) -> f64 {
    params.free_speed * (-(1.0 / params.alpha) * (rho / params.rho_crit).powf(params.alpha)).exp()
}

/// Unclamped density update for one segment.
fn raw_density_update(
    params: &MetanetParams,
    i: usize,
    rho: f64,
    q_up: f64,
    q_here: f64,
    r: f64,
    s: f64,
) -> f64 {
    rho + params.t_step / (params.seg_len[i] * params.lanes[i]) * (q_up - q_here + r - s)
}

/// Unclamped speed update for one segment.
#[allow(clippy::too_many_arguments)]
fn raw_speed_update(
    params: &MetanetParams,
    i: usize,
    rho: f64,
    rho_down: f64,
    vel: f64,
    vel_up: f64,
    r: f64,
) -> f64 {
    let t = params.t_step;
    let d = params.seg_len[i];
    let relax = t / params.tau * (equilibrium_speed_unchecked(params, rho) - vel);
    let convect = t / d * vel * (vel_up - vel);
    let anticip = params.nu * t / (params.tau * d) * (rho_down - rho) / (rho + params.kappa);
    let merge = params.delta_ramp * t / (d * params.lanes[i]) * r * vel / (rho + params.kappa);
    vel + relax + convect - anticip - merge
}

/// Density at (i, k+1) from grid values at step k, clamped at zero. Segment 0
/// has no in-grid upstream flow; the boundary-aware path lives in [`simulate`].
pub fn step_density(
    params: &MetanetParams,
    grid: &TrafficGrid,
    i: usize,
    k: usize,
) -> Result<f64, MetanetError> {
    params.validate()?;
    if i == 0 || i >= grid.n_segments() || k + 1 >= grid.n_steps() {
        return Err(MetanetError::IndexOutOfGrid {
            i,
            k,
            n_segments: grid.n_segments(),
            n_steps: grid.n_steps(),
        });
    }
    let next = raw_density_update(
        params,
        i,
        grid.rho(i, k),
        grid.flow(i - 1, k),
        grid.flow(i, k),
        grid.ramp_in(i, k),
        grid.ramp_out(i, k),
    );
    Ok(next.max(0.0))
}

/// Speed at (i, k+1) from grid values at step k, clamped at zero. Requires
/// both spatial neighbors in-grid.
pub fn step_speed(
    params: &MetanetParams,
    grid: &TrafficGrid,
    i: usize,
    k: usize,
) -> Result<f64, MetanetError> {
    params.validate()?;
    if i == 0 || i + 1 >= grid.n_segments() || k + 1 >= grid.n_steps() {
        return Err(MetanetError::IndexOutOfGrid {
            i,
            k,
            n_segments: grid.n_segments(),
            n_steps: grid.n_steps(),
        });
    }
    let next = raw_speed_update(
        params,
        i,
        grid.rho(i, k),
        grid.rho(i + 1, k),
        grid.vel(i, k),
        grid.vel(i - 1, k),
        grid.ramp_in(i, k),
    );
    Ok(next.max(0.0))
}

/// Densities and speeds at k = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub rho: Vec<f64>,
    pub vel: Vec<f64>,
}

impl InitialState {
    /// Spatially uniform state.
    pub fn uniform(n_segments: usize, rho: f64, vel: f64) -> Self {
        InitialState { rho: vec![rho; n_segments], vel: vec![vel; n_segments] }
    }
}

/// Exogenous values adjacent to the corridor at one step: flow and speed of
/// the virtual segment upstream of segment 0, density of the virtual segment
/// downstream of segment I−1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBoundary {
    pub upstream_flow: f64,
    pub upstream_speed: f64,
    pub downstream_rho: f64,
}

/// Corridor boundary condition over a whole horizon.
#[derive(Debug, Clone, PartialEq)]
pub enum Boundary {
    /// Exogenous series, one entry per step.
    Series { upstream_flow: Vec<f64>, upstream_speed: Vec<f64>, downstream_rho: Vec<f64> },
    /// Ring topology: segment I−1 feeds segment 0.
    Periodic,
}

impl Boundary {
    /// Constant exogenous boundary held for `len` steps.
    pub fn constant(upstream_flow: f64, upstream_speed: f64, downstream_rho: f64, len: usize) -> Self {
        Boundary::Series {
            upstream_flow: vec![upstream_flow; len],
            upstream_speed: vec![upstream_speed; len],
            downstream_rho: vec![downstream_rho; len],
        }
    }
}

/// On/off-ramp specification over the horizon. Matrices are step-major,
/// `k·I + i`, matching [`TrafficGrid`] layout.
#[derive(Debug, Clone, PartialEq)]
pub enum RampSpec {
    None,
    /// Both rates given directly in veh/h.
    Direct { ramp_in: Vec<f64>, ramp_out: Vec<f64> },
    /// On-ramp rate given directly; off-ramp rate computed as a split
    /// fraction of the arriving upstream flow, s_{i,k} = β_{i,k}·q_{i−1,k}.
    SplitRatio { ramp_in: Vec<f64>, beta: Vec<f64> },
}

impl RampSpec {
    fn validate(&self, cells: usize) -> Result<(), MetanetError> {
        let check = |v: &Vec<f64>| -> Result<(), MetanetError> {
            if v.len() != cells {
                return Err(MetanetError::RampSeriesLength { expected: cells, got: v.len() });
            }
            Ok(())
        };
        match self {
            RampSpec::None => Ok(()),
            RampSpec::Direct { ramp_in, ramp_out } => {
                check(ramp_in)?;
                check(ramp_out)
            }
            RampSpec::SplitRatio { ramp_in, beta } => {
                check(ramp_in)?;
                check(beta)?;
                if let Some(&bad) = beta.iter().find(|b| !(0.0..=1.0).contains(*b)) {
                    return Err(MetanetError::InvalidParameter { name: "beta", value: bad });
                }
                Ok(())
            }
        }
    }
}

/// Zero-mean Gaussian process noise: standard deviations for the flow readout
/// and the speed update, plus the generator seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma_q: f64,
    pub sigma_v: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), MetanetError> {
        for (name, value) in [("sigma_q", self.sigma_q), ("sigma_v", self.sigma_v)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(MetanetError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }
}

/// One deterministic corridor step: flows from the state identity q = ρvλ,
/// then the density and speed updates with the given boundary, clamped at
/// zero. Returns (densities, speeds) at the next step.
pub fn one_step(
    params: &MetanetParams,
    rho: &[f64],
    vel: &[f64],
    ramp_in: &[f64],
    ramp_out: &[f64],
    boundary: &StepBoundary,
) -> Result<(Vec<f64>, Vec<f64>), MetanetError> {
    params.validate()?;
    let n = params.n_segments;
    for (series, len) in [(rho.len(), n), (vel.len(), n), (ramp_in.len(), n), (ramp_out.len(), n)]
    {
        if series != len {
            return Err(MetanetError::SegmentSeriesLength { expected: len, got: series });
        }
    }
    let flow: Vec<f64> =
        (0..n).map(|i| rho[i] * vel[i] * params.lanes[i]).collect();
    Ok(advance(params, rho, vel, &flow, ramp_in, ramp_out, boundary, None))
}

/// Shared single-step kernel. Flows at step k are taken as given (they may
/// carry readout noise); speed noise is added before clamping when a sampler
/// is supplied.
#[allow(clippy::too_many_arguments)]
fn advance(
    params: &MetanetParams,
    rho: &[f64],
    vel: &[f64],
    flow: &[f64],
    ramp_in: &[f64],
    ramp_out: &[f64],
    boundary: &StepBoundary,
    mut speed_noise: Option<&mut dyn FnMut() -> f64>,
) -> (Vec<f64>, Vec<f64>) {
    let n = params.n_segments;
    let mut rho_next = Vec::with_capacity(n);
    let mut vel_next = Vec::with_capacity(n);
    for i in 0..n {
        let q_up = if i == 0 { boundary.upstream_flow } else { flow[i - 1] };
        let r = raw_density_update(params, i, rho[i], q_up, flow[i], ramp_in[i], ramp_out[i]);
        rho_next.push(r.max(0.0));
    }
    for i in 0..n {
        let v_up = if i == 0 { boundary.upstream_speed } else { vel[i - 1] };
        let rho_down = if i + 1 == n { boundary.downstream_rho } else { rho[i + 1] };
        let mut v = raw_speed_update(params, i, rho[i], rho_down, vel[i], v_up, ramp_in[i]);
        if let Some(noise) = speed_noise.as_mut() {
            v += noise();
        }
        vel_next.push(v.max(0.0));
    }
    (rho_next, vel_next)
}

/// Forward simulation over `horizon` steps (grid columns 0..horizon−1).
/// Deterministic unless a [`NoiseSpec`] is given, in which case every flow
/// readout gains N(0, σ_q²) and every speed update N(0, σ_v²), reproducibly
/// under the seed.
pub fn simulate(
    params: &MetanetParams,
    initial: &InitialState,
    boundary: &Boundary,
    ramps: &RampSpec,
    horizon: usize,
    noise: Option<&NoiseSpec>,
) -> Result<TrafficGrid, MetanetError> {
    params.validate()?;
    let n = params.n_segments;
    if horizon < 2 {
        return Err(MetanetError::HorizonTooShort(horizon));
    }
    if initial.rho.len() != n || initial.vel.len() != n {
        return Err(MetanetError::SegmentSeriesLength {
            expected: n,
            got: if initial.rho.len() != n { initial.rho.len() } else { initial.vel.len() },
        });
    }
    if let Boundary::Series { upstream_flow, upstream_speed, downstream_rho } = boundary {
        let shortest =
            upstream_flow.len().min(upstream_speed.len()).min(downstream_rho.len());
        if shortest < horizon {
            return Err(MetanetError::MissingBoundary(shortest));
        }
    }
    ramps.validate(n * horizon)?;
    if let Some(spec) = noise {
        spec.validate()?;
    }

    let mut rng_state = match noise {
        Some(spec) => {
            let rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let flow_dist = Normal::new(0.0, spec.sigma_q)
                .map_err(|_| MetanetError::InvalidParameter { name: "sigma_q", value: spec.sigma_q })?;
            let speed_dist = Normal::new(0.0, spec.sigma_v)
                .map_err(|_| MetanetError::InvalidParameter { name: "sigma_v", value: spec.sigma_v })?;
            Some((rng, flow_dist, speed_dist))
        }
        None => None,
    };

    let mut grid = TrafficGrid::zeros(n, horizon);
    for i in 0..n {
        grid.set_rho(i, 0, initial.rho[i].max(0.0));
        grid.set_vel(i, 0, initial.vel[i].max(0.0));
    }

    for k in 0..horizon {
        // Flow readout for the current column, optionally noisy.
        for i in 0..n {
            let mut q = grid.rho(i, k) * grid.vel(i, k) * params.lanes[i];
            if let Some((rng, flow_dist, _)) = rng_state.as_mut() {
                q += flow_dist.sample(rng);
            }
            grid.set_flow(i, k, q.max(0.0));
        }
        if k + 1 == horizon {
            break;
        }

        let step_boundary = match boundary {
            Boundary::Series { upstream_flow, upstream_speed, downstream_rho } => StepBoundary {
                upstream_flow: upstream_flow[k],
                upstream_speed: upstream_speed[k],
                downstream_rho: downstream_rho[k],
            },
            Boundary::Periodic => StepBoundary {
                upstream_flow: grid.flow(n - 1, k),
                upstream_speed: grid.vel(n - 1, k),
                downstream_rho: grid.rho(0, k),
            },
        };

        // Resolve ramp rates for this column and record them in the grid.
        for i in 0..n {
            let cell = k * n + i;
            let (r, s) = match ramps {
                RampSpec::None => (0.0, 0.0),
                RampSpec::Direct { ramp_in, ramp_out } => (ramp_in[cell], ramp_out[cell]),
                RampSpec::SplitRatio { ramp_in, beta } => {
                    let q_up =
                        if i == 0 { step_boundary.upstream_flow } else { grid.flow(i - 1, k) };
                    (ramp_in[cell], beta[cell] * q_up)
                }
            };
            grid.set_ramp_in(i, k, r);
            grid.set_ramp_out(i, k, s);
        }

        let rho_k = grid.rho_col(k).to_vec();
        let vel_k = grid.vel_col(k).to_vec();
        let flow_k = grid.flow_col(k).to_vec();
        let ramp_in_k = grid.ramp_in_col(k).to_vec();
        let ramp_out_k = grid.ramp_out_col(k).to_vec();

        let (rho_next, vel_next) = match rng_state.as_mut() {
            Some((rng, _, speed_dist)) => {
                let mut draw = || speed_dist.sample(rng);
                advance(
                    params,
                    &rho_k,
                    &vel_k,
                    &flow_k,
                    &ramp_in_k,
                    &ramp_out_k,
                    &step_boundary,
                    Some(&mut draw),
                )
            }
            None => advance(
                params,
                &rho_k,
                &vel_k,
                &flow_k,
                &ramp_in_k,
                &ramp_out_k,
                &step_boundary,
                None,
            ),
        };
        for i in 0..n {
            grid.set_rho(i, k + 1, rho_next[i]);
            grid.set_vel(i, k + 1, vel_next[i]);
        }
    }
    Ok(grid)
}

/// Detector readout: window means of flow and speed at the given segments,
/// converted to the requested units, on the aggregated time grid (window w
/// becomes time index w).
pub fn emit_detector_data(
    grid: &TrafficGrid,
    detectors: &[usize],
    aggregation: usize,
    units: UnitSpec,
) -> Result<Dataset, MetanetError> {
    if aggregation == 0 {
        return Err(MetanetError::ZeroAggregation);
    }
    if let Some(&bad) = detectors.iter().find(|d| **d >= grid.n_segments()) {
        return Err(MetanetError::DetectorOutOfRange(bad));
    }
    let n_windows = grid.n_steps() / aggregation;
    let mut points = Vec::with_capacity(n_windows * detectors.len());
    let mut flows = Vec::with_capacity(points.capacity());
    let mut speeds = Vec::with_capacity(points.capacity());
    for w in 0..n_windows {
        for &d in detectors {
            let mut q_sum = 0.0;
            let mut v_sum = 0.0;
            for k in w * aggregation..(w + 1) * aggregation {
                q_sum += grid.flow(d, k);
                v_sum += grid.vel(d, k);
            }
            let steps = aggregation as f64;
            points.push(GridPoint::new(d, w));
            flows.push(units.flow_from_internal(q_sum / steps));
            speeds.push(units.speed_from_internal(v_sum / steps));
        }
    }
    Ok(Dataset::dense(points, flows, speeds, units)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FlowUnit, SpeedUnit};
    use approx::assert_abs_diff_eq;

    fn toy_params() -> MetanetParams {
        MetanetParams::with_uniform_geometry(3, 0.5, 4.0)
    }

    #[test]
    fn fd_zero_density_gives_free_speed() {
        let p = MetanetParams::default();
        assert_eq!(fundamental_diagram(&p, 0.0).unwrap(), 120.0);
    }

    #[test]
    fn fd_critical_density_closed_form() {
        let p = MetanetParams::default();
        let v = fundamental_diagram(&p, 36.85).unwrap();
        assert_abs_diff_eq!(v, 120.0 * (-1.0f64 / 1.4324).exp(), epsilon = 1e-12);
        assert!(v > 59.0 && v < 60.0);
    }

    #[test]
    fn fd_negative_density_rejected() {
        let p = MetanetParams::default();
        let err = fundamental_diagram(&p, -1.0).unwrap_err();
        assert_eq!(err.to_string(), "negative density");
    }

    #[test]
    fn fd_strictly_decreasing() {
        let p = MetanetParams::default();
        let mut prev = fundamental_diagram(&p, 0.0).unwrap();
        for step in 1..=40 {
            let v = fundamental_diagram(&p, step as f64 * 5.0).unwrap();
            assert!(v < prev, "V must strictly decrease, {v} !< {prev}");
            prev = v;
        }
    }

    #[test]
    fn params_validation_rejects_bad_values() {
        let mut p = toy_params();
        p.tau = 0.0;
        assert!(p.validate().is_err());
        let mut p = toy_params();
        p.n_segments = 2;
        p.seg_len = vec![0.5; 2];
        p.lanes = vec![4.0; 2];
        assert!(matches!(p.validate(), Err(MetanetError::TooFewSegments(2))));
    }

    #[test]
    fn step_density_stationary_uniform() {
        let p = toy_params();
        let mut grid = TrafficGrid::zeros(3, 2);
        for i in 0..3 {
            grid.set_rho(i, 0, 25.0);
            grid.set_vel(i, 0, 80.0);
            grid.set_flow(i, 0, 25.0 * 80.0 * 4.0);
        }
        let next = step_density(&p, &grid, 1, 0).unwrap();
        assert_eq!(next, 25.0);
    }

    #[test]
    fn step_density_hand_case() {
        let p = MetanetParams { t_step: 1.0 / 12.0, ..toy_params() };
        let mut grid = TrafficGrid::zeros(3, 2);
        grid.set_flow(0, 0, 4000.0);
        grid.set_flow(1, 0, 3000.0);
        grid.set_rho(1, 0, 10.0);
        let next = step_density(&p, &grid, 1, 0).unwrap();
        assert_abs_diff_eq!(next, 10.0 + 125.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn step_density_out_of_grid() {
        let p = toy_params();
        let grid = TrafficGrid::zeros(3, 2);
        assert!(step_density(&p, &grid, 0, 0).is_err());
        assert!(step_density(&p, &grid, 1, 1).is_err());
    }

    #[test]
    fn step_speed_equilibrium_fixed_point() {
        let p = toy_params();
        let rho = 30.0;
        let veq = fundamental_diagram(&p, rho).unwrap();
        let mut grid = TrafficGrid::zeros(3, 2);
        for i in 0..3 {
            grid.set_rho(i, 0, rho);
            grid.set_vel(i, 0, veq);
            grid.set_flow(i, 0, rho * veq * 4.0);
        }
        let next = step_speed(&p, &grid, 1, 0).unwrap();
        assert_abs_diff_eq!(next, veq, epsilon = 1e-12);
    }

    #[test]
    fn step_speed_relaxation_hand_case() {
        let p = toy_params();
        let rho = 30.0;
        let vel = 80.0;
        let mut grid = TrafficGrid::zeros(3, 2);
        for i in 0..3 {
            grid.set_rho(i, 0, rho);
            grid.set_vel(i, 0, vel);
        }
        let veq = fundamental_diagram(&p, rho).unwrap();
        let expected = vel + p.t_step / p.tau * (veq - vel);
        let next = step_speed(&p, &grid, 1, 0).unwrap();
        assert_abs_diff_eq!(next, expected, epsilon = 1e-12);
    }

    #[test]
    fn step_speed_matches_scalar_reimplementation() {
        let p = toy_params();
        let mut grid = TrafficGrid::zeros(3, 2);
        let rho = [22.0, 31.0, 27.0];
        let vel = [95.0, 78.0, 84.0];
        for i in 0..3 {
            grid.set_rho(i, 0, rho[i]);
            grid.set_vel(i, 0, vel[i]);
        }
        grid.set_ramp_in(1, 0, 600.0);
        let next = step_speed(&p, &grid, 1, 0).unwrap();

        // Independent scalar arithmetic, terms written out one by one.
        let t = 1.0 / 360.0;
        let veq = 120.0 * f64::exp(-(31.0f64 / 36.85).powf(1.4324) / 1.4324);
        let mut v = 78.0;
        v += t / 0.05 * (veq - 78.0);
        v += t / 0.5 * 78.0 * (95.0 - 78.0);
        v -= 35.0 * t / (0.05 * 0.5) * (27.0 - 31.0) / (31.0 + 13.0);
        v -= 1.4 * t / (0.5 * 4.0) * 600.0 * 78.0 / (31.0 + 13.0);
        assert_abs_diff_eq!(next, v, epsilon = 1e-9);
    }

    #[test]
    fn simulate_empty_road() {
        let p = toy_params();
        let initial = InitialState::uniform(3, 0.0, 120.0);
        let boundary = Boundary::constant(0.0, 120.0, 0.0, 10);
        let grid = simulate(&p, &initial, &boundary, &RampSpec::None, 10, None).unwrap();
        for k in 0..10 {
            for i in 0..3 {
                assert_eq!(grid.rho(i, k), 0.0);
                assert_eq!(grid.flow(i, k), 0.0);
                assert_abs_diff_eq!(grid.vel(i, k), 120.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn simulate_agrees_with_step_functions() {
        let p = MetanetParams::with_uniform_geometry(5, 0.5, 4.0);
        let initial = InitialState {
            rho: vec![20.0, 24.0, 28.0, 26.0, 22.0],
            vel: vec![100.0, 92.0, 85.0, 90.0, 97.0],
        };
        let boundary = Boundary::constant(20.0 * 100.0 * 4.0, 100.0, 22.0, 40);
        let grid = simulate(&p, &initial, &boundary, &RampSpec::None, 40, None).unwrap();
        for k in 0..39 {
            for i in 1..5 {
                let expect = step_density(&p, &grid, i, k).unwrap();
                assert_abs_diff_eq!(grid.rho(i, k + 1), expect, epsilon = 1e-10);
            }
            for i in 1..4 {
                let expect = step_speed(&p, &grid, i, k).unwrap();
                assert_abs_diff_eq!(grid.vel(i, k + 1), expect, epsilon = 1e-10);
            }
            for i in 0..5 {
                assert_eq!(grid.flow(i, k), grid.rho(i, k) * grid.vel(i, k) * 4.0);
            }
        }
    }

    #[test]
    fn simulate_one_step_matches_helper_bitwise() {
        let p = MetanetParams::with_uniform_geometry(4, 0.5, 4.0);
        let initial =
            InitialState { rho: vec![18.0, 26.0, 31.0, 24.0], vel: vec![101.0, 88.0, 79.0, 93.0] };
        let boundary_step = StepBoundary {
            upstream_flow: 7200.0,
            upstream_speed: 100.0,
            downstream_rho: 21.0,
        };
        let boundary = Boundary::constant(7200.0, 100.0, 21.0, 2);
        let grid = simulate(&p, &initial, &boundary, &RampSpec::None, 2, None).unwrap();
        let ramps = vec![0.0; 4];
        let (rho_next, vel_next) =
            one_step(&p, &initial.rho, &initial.vel, &ramps, &ramps, &boundary_step).unwrap();
        for i in 0..4 {
            assert_eq!(grid.rho(i, 1).to_bits(), rho_next[i].to_bits());
            assert_eq!(grid.vel(i, 1).to_bits(), vel_next[i].to_bits());
        }
    }

    #[test]
    fn simulate_rejects_short_horizon_and_missing_boundary() {
        let p = toy_params();
        let initial = InitialState::uniform(3, 10.0, 100.0);
        let boundary = Boundary::constant(4000.0, 100.0, 10.0, 10);
        assert!(matches!(
            simulate(&p, &initial, &boundary, &RampSpec::None, 1, None),
            Err(MetanetError::HorizonTooShort(1))
        ));
        let short = Boundary::constant(4000.0, 100.0, 10.0, 5);
        assert!(matches!(
            simulate(&p, &initial, &short, &RampSpec::None, 10, None),
            Err(MetanetError::MissingBoundary(5))
        ));
    }

    #[test]
    fn ring_road_conserves_vehicles() {
        let p = MetanetParams::with_uniform_geometry(8, 0.5, 4.0);
        let rho: Vec<f64> = (0..8).map(|i| 28.0 + 6.0 * (i as f64 * 0.7).sin()).collect();
        let vel: Vec<f64> =
            rho.iter().map(|r| fundamental_diagram(&p, *r).unwrap()).collect();
        let initial = InitialState { rho: rho.clone(), vel };
        let grid =
            simulate(&p, &initial, &Boundary::Periodic, &RampSpec::None, 100, None).unwrap();
        let total = |k: usize| -> f64 {
            (0..8).map(|i| grid.rho(i, k) * p.seg_len[i] * p.lanes[i]).sum()
        };
        let t0 = total(0);
        for k in 1..100 {
            assert_abs_diff_eq!(total(k), t0, epsilon = 1e-9 * t0);
        }
        for k in 0..100 {
            for i in 0..8 {
                assert!(grid.rho(i, k) > 0.0 && grid.vel(i, k) > 0.0);
            }
        }
    }

    #[test]
    fn stochastic_run_is_seed_reproducible() {
        let p = toy_params();
        let initial = InitialState::uniform(3, 20.0, 95.0);
        let boundary = Boundary::constant(20.0 * 95.0 * 4.0, 95.0, 20.0, 30);
        let noise = NoiseSpec { sigma_q: 80.0, sigma_v: 3.0, seed: 11 };
        let a = simulate(&p, &initial, &boundary, &RampSpec::None, 30, Some(&noise)).unwrap();
        let b = simulate(&p, &initial, &boundary, &RampSpec::None, 30, Some(&noise)).unwrap();
        assert_eq!(a, b);
        let other = NoiseSpec { seed: 12, ..noise };
        let c = simulate(&p, &initial, &boundary, &RampSpec::None, 30, Some(&other)).unwrap();
        assert_ne!(a, c);
        for k in 0..30 {
            for i in 0..3 {
                assert!(a.rho(i, k) >= 0.0 && a.vel(i, k) >= 0.0 && a.flow(i, k) >= 0.0);
            }
        }
    }

    #[test]
    fn split_ratio_ramp_records_outflow() {
        let p = toy_params();
        let initial = InitialState::uniform(3, 20.0, 95.0);
        let boundary = Boundary::constant(7600.0, 95.0, 20.0, 4);
        let cells = 3 * 4;
        let ramps = RampSpec::SplitRatio { ramp_in: vec![0.0; cells], beta: vec![0.1; cells] };
        let grid = simulate(&p, &initial, &boundary, &ramps, 4, None).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(grid.ramp_out(0, k), 0.1 * 7600.0, epsilon = 1e-12);
            for i in 1..3 {
                assert_abs_diff_eq!(
                    grid.ramp_out(i, k),
                    0.1 * grid.flow(i - 1, k),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn detector_identity_at_native_units() {
        let p = toy_params();
        let initial = InitialState::uniform(3, 20.0, 95.0);
        let boundary = Boundary::constant(7600.0, 95.0, 20.0, 6);
        let grid = simulate(&p, &initial, &boundary, &RampSpec::None, 6, None).unwrap();
        let data = emit_detector_data(&grid, &[1], 1, UnitSpec::internal()).unwrap();
        assert_eq!(data.len(), 6);
        for (row, point) in data.points().iter().enumerate() {
            assert_eq!(point.i, 1);
            assert_eq!(data.flow()[row].unwrap(), grid.flow(1, point.k));
            assert_eq!(data.speed()[row].unwrap(), grid.vel(1, point.k));
        }
    }

    #[test]
    fn detector_unit_conversion() {
        let mut grid = TrafficGrid::zeros(3, 4);
        for k in 0..4 {
            for i in 0..3 {
                grid.set_flow(i, k, 4800.0);
                grid.set_vel(i, k, 100.0);
            }
        }
        let units = UnitSpec { flow: FlowUnit::VehPer5Min, speed: SpeedUnit::MilesPerHour };
        let data = emit_detector_data(&grid, &[0], 1, units).unwrap();
        assert_abs_diff_eq!(data.flow()[0].unwrap(), 400.0, epsilon = 1e-12);
    }

    #[test]
    fn detector_window_mean() {
        let mut grid = TrafficGrid::zeros(3, 12);
        for k in 0..12 {
            let q = if k % 2 == 0 { 3600.0 } else { 4000.0 };
            for i in 0..3 {
                grid.set_flow(i, k, q);
                grid.set_vel(i, k, 90.0);
            }
        }
        let units = UnitSpec { flow: FlowUnit::VehPer5Min, speed: SpeedUnit::KmPerHour };
        let data = emit_detector_data(&grid, &[2], 12, units).unwrap();
        assert_eq!(data.len(), 1);
        assert_abs_diff_eq!(data.flow()[0].unwrap(), 3800.0 / 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(data.speed()[0].unwrap(), 90.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_csv_round_trips() {
        let p = toy_params();
        let initial = InitialState { rho: vec![17.0, 29.0, 23.0], vel: vec![103.0, 84.0, 91.0] };
        let boundary = Boundary::constant(6800.0, 103.0, 20.0, 8);
        let cells = 3 * 8;
        let ramps = RampSpec::Direct {
            ramp_in: (0..cells).map(|c| (c % 5) as f64 * 30.0).collect(),
            ramp_out: vec![12.5; cells],
        };
        let grid = simulate(&p, &initial, &boundary, &ramps, 8, None).unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let back = TrafficGrid::read_csv(buf.as_slice()).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn grid_csv_rejects_bad_header_and_rows() {
        let bad_header = "a,b,c\n1,2,3\n";
        assert!(TrafficGrid::read_csv(bad_header.as_bytes()).is_err());
        let bad_value = "i,k,rho,vel,flow,r,s\n0,0,-1.0,0,0,0,0\n";
        let err = TrafficGrid::read_csv(bad_value.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}

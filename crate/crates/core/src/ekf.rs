//! Extended Kalman filter over the stochastic corridor state: the online
//! correction baseline.
//!
//! The filter state stacks densities and speeds, x = [ρ_0..ρ_{I−1},
//! v_0..v_{I−1}], optionally followed by three random-walk parameters
//! (v_f, ρ_cr, α) when parameter augmentation is on. One cycle is
//!
//! ```text
//! predict:  x̂⁻ = f(x̂)            (one deterministic corridor step)
//!           P⁻ = F P Fᵀ + Q       (F = ∂f/∂x by central differences)
//! update:   S  = H P⁻ Hᵀ + R      (H = ∂h/∂x, h: q = ρvλ, v direct)
//!           K  = P⁻ Hᵀ S⁻¹
//!           x̂  = x̂⁻ + K (z − h(x̂⁻)),     clamped nonnegative
//!           P  = (I−KH) P⁻ (I−KH)ᵀ + KRKᵀ  (Joseph form), symmetrized
//! ```
//!
//! Q is diagonal. Speed rows carry the squared speed-noise deviation
//! directly (that noise is additive in the speed update); density rows carry
//! the flow-noise deviation propagated exactly through the conservation
//! equation, 2·(T/(Δᵢλᵢ))²·D(ξ^q)², since each segment sees independent
//! readout noise on its inflow and outflow. Segment 0 uses the boundary
//! deviations instead of the interior ones. Per-segment density deviations
//! can override the propagated value.

use crate::linalg::{CholeskyFactor, LinalgError};
use crate::metanet::{one_step, Boundary, InitialState, MetanetError, MetanetParams, StepBoundary, TrafficGrid};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EkfError {
    #[error("non-finite state")]
    NonFiniteState,
    #[error("innovation covariance not invertible")]
    InnovationNotInvertible,
    #[error("state has {got} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("measured segment {segment} outside corridor of {n_segments} segments")]
    MeasurementSegment { segment: usize, n_segments: usize },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metanet(#[from] MetanetError),
}

/// Noise deviations of the filter. All values are standard deviations in
/// physical units (veh/h for flows, km/h for speeds, veh/km/lane for
/// densities).
#[derive(Debug, Clone, PartialEq)]
pub struct EkfConfig {
    /// D(ξ^q): flow readout noise feeding the conservation equation.
    pub process_flow_dev: f64,
    /// D(ξ^v): additive speed process noise.
    pub process_speed_dev: f64,
    /// D(ξ^q_0): upstream boundary flow deviation, applied to segment 0.
    pub boundary_flow_dev: f64,
    /// D(ξ^v_0): upstream boundary speed deviation, applied to segment 0.
    pub boundary_speed_dev: f64,
    /// D(γ^q): flow measurement noise.
    pub measure_flow_dev: f64,
    /// D(γ^v): speed measurement noise.
    pub measure_speed_dev: f64,
    /// Initial covariance P₀ = scale·I (parameter rows use their own
    /// deviations squared instead).
    pub init_cov_scale: f64,
    /// Per-segment density process deviations D(ξ^ρ_i) replacing the
    /// propagated flow-noise value on those segments.
    pub density_dev_overrides: Vec<(usize, f64)>,
    /// Append v_f, ρ_cr, α to the state as random walks.
    pub augment_params: bool,
    /// D(ξ^{v_f}), random-walk deviation of the free speed.
    pub free_speed_dev: f64,
    /// D(ξ^{ρ_cr}), random-walk deviation of the critical density.
    pub rho_crit_dev: f64,
    /// D(ξ^α), random-walk deviation of the exponent.
    pub alpha_dev: f64,
}

impl EkfConfig {
    /// Reference deviations of the filter literature this baseline follows:
    /// D(ξ^q)=100, D(ξ^v)=11, D(ξ^q_0)=100, D(ξ^v_0)=5, D(ξ^ρ_11)=1.5,
    /// D(γ^q)=100, D(γ^v)=10, D(ξ^{v_f})=0.5, D(ξ^{ρ_cr})=0.1, D(ξ^α)=0.01.
    pub fn table_defaults() -> Self {
        EkfConfig {
            process_flow_dev: 100.0,
            process_speed_dev: 11.0,
            boundary_flow_dev: 100.0,
            boundary_speed_dev: 5.0,
            measure_flow_dev: 100.0,
            measure_speed_dev: 10.0,
            init_cov_scale: 10.0,
            density_dev_overrides: vec![(11, 1.5)],
            augment_params: false,
            free_speed_dev: 0.5,
            rho_crit_dev: 0.1,
            alpha_dev: 0.01,
        }
    }

    /// Degenerate filter: every deviation zero, P₀ = 0. With exact
    /// measurements this reproduces the deterministic simulator.
    pub fn zero_noise() -> Self {
        EkfConfig {
            process_flow_dev: 0.0,
            process_speed_dev: 0.0,
            boundary_flow_dev: 0.0,
            boundary_speed_dev: 0.0,
            measure_flow_dev: 0.0,
            measure_speed_dev: 0.0,
            init_cov_scale: 0.0,
            density_dev_overrides: Vec::new(),
            augment_params: false,
            free_speed_dev: 0.0,
            rho_crit_dev: 0.0,
            alpha_dev: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), EkfError> {
        let fields = [
            ("process_flow_dev", self.process_flow_dev),
            ("process_speed_dev", self.process_speed_dev),
            ("boundary_flow_dev", self.boundary_flow_dev),
            ("boundary_speed_dev", self.boundary_speed_dev),
            ("measure_flow_dev", self.measure_flow_dev),
            ("measure_speed_dev", self.measure_speed_dev),
            ("init_cov_scale", self.init_cov_scale),
            ("free_speed_dev", self.free_speed_dev),
            ("rho_crit_dev", self.rho_crit_dev),
            ("alpha_dev", self.alpha_dev),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value >= 0.0) {
                return Err(EkfError::InvalidConfig(format!(
                    "{name} must be a nonnegative deviation, got {value}"
                )));
            }
        }
        for (segment, dev) in &self.density_dev_overrides {
            if !(dev.is_finite() && *dev >= 0.0) {
                return Err(EkfError::InvalidConfig(format!(
                    "density override for segment {segment} must be nonnegative, got {dev}"
                )));
            }
        }
        Ok(())
    }
}

/// Filter state: mean vector and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub state: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_segments: usize,
    pub augmented: bool,
}

impl EkfState {
    /// Dimension the state vector must have.
    pub fn expected_dim(n_segments: usize, augmented: bool) -> usize {
        2 * n_segments + if augmented { 3 } else { 0 }
    }

    /// Initial filter state from a corridor initial condition.
    pub fn from_initial(
        initial: &InitialState,
        params: &MetanetParams,
        config: &EkfConfig,
    ) -> Result<Self, EkfError> {
        config.validate()?;
        let n = params.n_segments;
        if initial.rho.len() != n || initial.vel.len() != n {
            return Err(EkfError::DimensionMismatch {
                expected: n,
                got: initial.rho.len().min(initial.vel.len()),
            });
        }
        let dim = Self::expected_dim(n, config.augment_params);
        let mut state = DVector::zeros(dim);
        for i in 0..n {
            state[i] = initial.rho[i];
            state[n + i] = initial.vel[i];
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for d in 0..2 * n {
            cov[(d, d)] = config.init_cov_scale;
        }
        if config.augment_params {
            state[2 * n] = params.free_speed;
            state[2 * n + 1] = params.rho_crit;
            state[2 * n + 2] = params.alpha;
            cov[(2 * n, 2 * n)] = config.free_speed_dev * config.free_speed_dev;
            cov[(2 * n + 1, 2 * n + 1)] = config.rho_crit_dev * config.rho_crit_dev;
            cov[(2 * n + 2, 2 * n + 2)] = config.alpha_dev * config.alpha_dev;
        }
        Ok(EkfState { state, cov, n_segments: n, augmented: config.augment_params })
    }

    pub fn rho(&self, i: usize) -> f64 {
        self.state[i]
    }

    pub fn vel(&self, i: usize) -> f64 {
        self.state[self.n_segments + i]
    }

    fn check(&self) -> Result<(), EkfError> {
        let expected = Self::expected_dim(self.n_segments, self.augmented);
        if self.state.nrows() != expected {
            return Err(EkfError::DimensionMismatch { expected, got: self.state.nrows() });
        }
        if self.cov.nrows() != expected || self.cov.ncols() != expected {
            return Err(EkfError::DimensionMismatch { expected, got: self.cov.nrows() });
        }
        if self.state.iter().any(|v| !v.is_finite()) {
            return Err(EkfError::NonFiniteState);
        }
        Ok(())
    }
}

/// Corridor parameters with the augmented coordinates, if any, taken from
/// the state vector.
fn effective_params(params: &MetanetParams, x: &DVector<f64>, n: usize, augmented: bool) -> MetanetParams {
    let mut p = params.clone();
    if augmented {
        p.free_speed = x[2 * n];
        p.rho_crit = x[2 * n + 1];
        p.alpha = x[2 * n + 2];
    }
    p
}

/// Deterministic transition mean over the full state vector.
fn transition_mean(
    params: &MetanetParams,
    x: &DVector<f64>,
    n: usize,
    augmented: bool,
    boundary: &StepBoundary,
) -> Result<DVector<f64>, EkfError> {
    let p = effective_params(params, x, n, augmented);
    let rho: Vec<f64> = (0..n).map(|i| x[i]).collect();
    let vel: Vec<f64> = (0..n).map(|i| x[n + i]).collect();
    let zeros = vec![0.0; n];
    let (rho_next, vel_next) = one_step(&p, &rho, &vel, &zeros, &zeros, boundary)?;
    let mut out = x.clone();
    for i in 0..n {
        out[i] = rho_next[i];
        out[n + i] = vel_next[i];
    }
    Ok(out)
}

fn fd_step(x_j: f64) -> f64 {
    1e-6 * x_j.abs().max(1.0)
}

/// Diagonal process noise for one predict step.
fn process_noise(params: &MetanetParams, config: &EkfConfig, dim: usize) -> DMatrix<f64> {
    let n = params.n_segments;
    let mut q = DMatrix::zeros(dim, dim);
    for i in 0..n {
        let c = params.t_step / (params.seg_len[i] * params.lanes[i]);
        let inflow_dev = if i == 0 { config.boundary_flow_dev } else { config.process_flow_dev };
        let outflow_dev = config.process_flow_dev;
        q[(i, i)] = c * c * (inflow_dev * inflow_dev + outflow_dev * outflow_dev);
        let speed_dev = if i == 0 {
            (config.process_speed_dev * config.process_speed_dev
                + config.boundary_speed_dev * config.boundary_speed_dev)
                .sqrt()
        } else {
            config.process_speed_dev
        };
        q[(n + i, n + i)] = speed_dev * speed_dev;
    }
    for (segment, dev) in &config.density_dev_overrides {
        if *segment < n {
            q[(*segment, *segment)] = dev * dev;
        }
    }
    if config.augment_params {
        q[(2 * n, 2 * n)] = config.free_speed_dev * config.free_speed_dev;
        q[(2 * n + 1, 2 * n + 1)] = config.rho_crit_dev * config.rho_crit_dev;
        q[(2 * n + 2, 2 * n + 2)] = config.alpha_dev * config.alpha_dev;
    }
    q
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for r in 0..n {
        for c in r + 1..n {
            let avg = 0.5 * (p[(r, c)] + p[(c, r)]);
            p[(r, c)] = avg;
            p[(c, r)] = avg;
        }
        if p[(r, r)] < 0.0 {
            p[(r, r)] = 0.0;
        }
    }
}

/// Prediction step: mean through one deterministic corridor step, covariance
/// through F P Fᵀ + Q with F the transition Jacobian by central differences
/// (relative step 1e−6). The mean path is exactly [`one_step`]; with
/// augmentation off it is bitwise identical to it.
pub fn ekf_predict(
    state: &EkfState,
    params: &MetanetParams,
    boundary: &StepBoundary,
    config: &EkfConfig,
) -> Result<EkfState, EkfError> {
    state.check()?;
    config.validate()?;
    if params.n_segments != state.n_segments {
        return Err(EkfError::DimensionMismatch {
            expected: EkfState::expected_dim(params.n_segments, state.augmented),
            got: state.state.nrows(),
        });
    }
    let n = state.n_segments;
    let dim = state.state.nrows();
    let mean = transition_mean(params, &state.state, n, state.augmented, boundary)?;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(EkfError::NonFiniteState);
    }

    let mut jac = DMatrix::zeros(dim, dim);
    let mut probe = state.state.clone();
    for j in 0..dim {
        let h = fd_step(state.state[j]);
        probe[j] = state.state[j] + h;
        let plus = transition_mean(params, &probe, n, state.augmented, boundary)?;
        probe[j] = state.state[j] - h;
        let minus = transition_mean(params, &probe, n, state.augmented, boundary)?;
        probe[j] = state.state[j];
        for r in 0..dim {
            jac[(r, j)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }

    let mut cov = &jac * &state.cov * jac.transpose();
    cov += process_noise(params, config, dim);
    symmetrize(&mut cov);
    Ok(EkfState { state: mean, cov, n_segments: n, augmented: state.augmented })
}

/// One detector reading used in an update. Values are physical units
/// (veh/h, km/h); absent values are simply not measured this step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementRow {
    pub segment: usize,
    pub flow: Option<f64>,
    pub speed: Option<f64>,
}

/// Measurement model h(x): flow rows ρ_s·v_s·λ_s, speed rows v_s.
fn measurement_mean(
    x: &DVector<f64>,
    rows: &[MeasurementRow],
    params: &MetanetParams,
    n: usize,
) -> DVector<f64> {
    let mut out = Vec::new();
    for row in rows {
        let s = row.segment;
        if row.flow.is_some() {
            out.push(x[s] * x[n + s] * params.lanes[s]);
        }
        if row.speed.is_some() {
            out.push(x[n + s]);
        }
    }
    DVector::from_vec(out)
}

/// Measurement update. Skips cleanly (state and covariance unchanged) when
/// P Hᵀ is exactly zero, which is the degenerate-filter regime; otherwise a
/// singular innovation covariance is an error.
pub fn ekf_update(
    state: &EkfState,
    rows: &[MeasurementRow],
    params: &MetanetParams,
    config: &EkfConfig,
) -> Result<EkfState, EkfError> {
    state.check()?;
    config.validate()?;
    let n = state.n_segments;
    let dim = state.state.nrows();
    let mut z = Vec::new();
    let mut noise_var = Vec::new();
    for row in rows {
        if row.segment >= n {
            return Err(EkfError::MeasurementSegment { segment: row.segment, n_segments: n });
        }
        if let Some(q) = row.flow {
            z.push(q);
            noise_var.push(config.measure_flow_dev * config.measure_flow_dev);
        }
        if let Some(v) = row.speed {
            z.push(v);
            noise_var.push(config.measure_speed_dev * config.measure_speed_dev);
        }
    }
    if z.is_empty() {
        return Ok(state.clone());
    }
    let z = DVector::from_vec(z);
    let m = z.nrows();

    let h0 = measurement_mean(&state.state, rows, params, n);
    let mut jac = DMatrix::zeros(m, dim);
    let mut probe = state.state.clone();
    for j in 0..dim {
        let h = fd_step(state.state[j]);
        probe[j] = state.state[j] + h;
        let plus = measurement_mean(&probe, rows, params, n);
        probe[j] = state.state[j] - h;
        let minus = measurement_mean(&probe, rows, params, n);
        probe[j] = state.state[j];
        for r in 0..m {
            jac[(r, j)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }

    let pht = &state.cov * jac.transpose();
    if pht.iter().all(|v| *v == 0.0) {
        return Ok(state.clone());
    }
    let mut s = &jac * &pht;
    for d in 0..m {
        s[(d, d)] += noise_var[d];
    }
    let factor = CholeskyFactor::new(&s).map_err(|e| match e {
        LinalgError::NotPositiveDefinite => EkfError::InnovationNotInvertible,
        other => EkfError::InvalidConfig(other.to_string()),
    })?;
    // K = P Hᵀ S⁻¹, computed as Kᵀ = S⁻¹ (P Hᵀ)ᵀ.
    let gain = factor
        .solve_matrix(&pht.transpose())
        .map_err(|_| EkfError::InnovationNotInvertible)?
        .transpose();

    let innovation = &z - &h0;
    let mut mean = &state.state + &gain * &innovation;
    for v in mean.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(EkfError::NonFiniteState);
    }

    // Joseph form keeps the covariance positive semidefinite.
    let identity = DMatrix::identity(dim, dim);
    let ikh = &identity - &gain * &jac;
    let mut r = DMatrix::zeros(m, m);
    for d in 0..m {
        r[(d, d)] = noise_var[d];
    }
    let mut cov = &ikh * &state.cov * ikh.transpose() + &gain * r * gain.transpose();
    symmetrize(&mut cov);
    Ok(EkfState { state: mean, cov, n_segments: n, augmented: state.augmented })
}

/// Measurements available at one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfMeasurement {
    /// Simulation step index the rows apply to.
    pub step: usize,
    pub rows: Vec<MeasurementRow>,
}

/// Runs the filter over a horizon: at each step, apply any measurement for
/// that step, record the (posterior) state as grid column k, then predict to
/// k+1. Ramps are zero. The emitted grid carries the state estimates with
/// flows read out as q = ρvλ.
pub fn run_filter(
    params: &MetanetParams,
    initial: &InitialState,
    boundary: &Boundary,
    measurements: &[EkfMeasurement],
    horizon: usize,
    config: &EkfConfig,
) -> Result<TrafficGrid, EkfError> {
    params.validate()?;
    config.validate()?;
    if horizon < 2 {
        return Err(EkfError::Metanet(MetanetError::HorizonTooShort(horizon)));
    }
    let series = match boundary {
        Boundary::Series { upstream_flow, upstream_speed, downstream_rho } => {
            let shortest = upstream_flow.len().min(upstream_speed.len()).min(downstream_rho.len());
            if shortest < horizon {
                return Err(EkfError::Metanet(MetanetError::MissingBoundary(shortest)));
            }
            (upstream_flow, upstream_speed, downstream_rho)
        }
        Boundary::Periodic => {
            return Err(EkfError::InvalidConfig(
                "filter requires an exogenous boundary series".into(),
            ))
        }
    };

    let n = params.n_segments;
    let mut by_step: std::collections::HashMap<usize, &EkfMeasurement> =
        std::collections::HashMap::new();
    for m in measurements {
        by_step.insert(m.step, m);
    }

    let mut state = EkfState::from_initial(initial, params, config)?;
    let mut grid = TrafficGrid::zeros(n, horizon);
    for k in 0..horizon {
        if let Some(meas) = by_step.get(&k) {
            state = ekf_update(&state, &meas.rows, params, config)?;
        }
        for i in 0..n {
            grid.set_rho(i, k, state.rho(i));
            grid.set_vel(i, k, state.vel(i));
            let q = grid.rho(i, k) * grid.vel(i, k) * params.lanes[i];
            grid.set_flow(i, k, q.max(0.0));
        }
        if k + 1 == horizon {
            break;
        }
        let step_boundary = StepBoundary {
            upstream_flow: series.0[k],
            upstream_speed: series.1[k],
            downstream_rho: series.2[k],
        };
        state = ekf_predict(&state, params, &step_boundary, config)?;
    }
    Ok(grid)
}

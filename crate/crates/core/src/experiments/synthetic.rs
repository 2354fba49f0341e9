//! Synthetic corridor worlds.
//!
//! Ground truth is a deterministic corridor run driven by a repeating
//! morning-peak demand profile: a trapezoid in the hour of day, flat at a
//! base demand overnight, ramping up from 05:00, holding a peak plateau
//! from 08:00 to 11:00, and relaxing back to base by 15:00. Detector data
//! is the window-mean readout of that run plus seeded Gaussian measurement
//! noise, so every study has an exact noise-free target to score against.
//!
//! The upstream boundary state for a given demand is the free-flow fixed
//! point of q = ρ·V(ρ)·λ, found by a short fixed-point iteration. The peak
//! demand must stay below corridor capacity λ·ρ_cr·V(ρ_cr), where the fixed
//! point exists.
//!
//! A world may carry unobserved on/off-ramps: they drive the generating run
//! but are absent from the detector readout and from everything handed to
//! the estimation methods, so corridor models that assume a closed pipe are
//! structurally wrong about the stretch between the ramps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, GridPoint, UnitSpec};
use crate::experiments::ExperimentError;
use crate::metanet::{
    emit_detector_data, fundamental_diagram, simulate, Boundary, InitialState, MetanetParams,
    RampSpec, TrafficGrid,
};

/// Hour-of-day breakpoints of the demand trapezoid.
const RAMP_UP_START: f64 = 5.0;
const PEAK_START: f64 = 8.0;
const PEAK_END: f64 = 11.0;
const RAMP_DOWN_END: f64 = 15.0;

/// An unmetered ramp pair at one segment of the generated corridor. These
/// flows shape the ground truth but are not reported to any estimation
/// method, so a corridor model that omits them carries a structural error,
/// the regime the residual terms exist to absorb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticRamp {
    pub segment: usize,
    /// On-ramp inflow as a fraction of the instantaneous corridor demand.
    pub inflow_share: f64,
    /// Off-ramp split: fraction of the arriving upstream flow that exits.
    pub exit_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Parameters of the generating corridor.
    pub truth: MetanetParams,
    pub days: usize,
    /// Simulation steps per detector sample.
    pub aggregation: usize,
    /// Segments carrying detectors.
    pub detectors: Vec<usize>,
    /// Overnight upstream demand in veh/h over all lanes.
    pub base_demand: f64,
    /// Morning-peak upstream demand in veh/h over all lanes.
    pub peak_demand: f64,
    /// Detector noise standard deviations in internal units (veh/h, km/h).
    pub flow_noise: f64,
    pub speed_noise: f64,
    /// Unobserved ramps of the generating corridor.
    pub ramps: Vec<SyntheticRamp>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// One day of the default corridor sampled every five minutes by five
    /// evenly spaced detectors.
    pub fn defaults(seed: u64) -> Self {
        SyntheticSpec {
            truth: MetanetParams::default(),
            days: 1,
            aggregation: 30,
            detectors: vec![2, 6, 10, 14, 18],
            base_demand: 2000.0,
            peak_demand: 7000.0,
            flow_noise: 120.0,
            speed_noise: 3.0,
            ramps: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.truth.validate()?;
        if self.days == 0 {
            return Err(ExperimentError::InvalidArgument("days must be positive".into()));
        }
        if self.aggregation == 0 {
            return Err(ExperimentError::InvalidArgument("aggregation must be positive".into()));
        }
        if self.detectors.is_empty() {
            return Err(ExperimentError::InvalidArgument("no detectors".into()));
        }
        for (name, value) in [
            ("base demand", self.base_demand),
            ("peak demand", self.peak_demand),
            ("flow noise", self.flow_noise),
            ("speed noise", self.speed_noise),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ExperimentError::InvalidArgument(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
        }
        let mut inflow_share = 0.0;
        for ramp in &self.ramps {
            if ramp.segment >= self.truth.n_segments {
                return Err(ExperimentError::InvalidArgument(format!(
                    "ramp segment {} outside corridor of {} segments",
                    ramp.segment, self.truth.n_segments
                )));
            }
            if !(ramp.inflow_share.is_finite() && ramp.inflow_share >= 0.0) {
                return Err(ExperimentError::InvalidArgument(
                    "ramp inflow share must be finite and nonnegative".into(),
                ));
            }
            if !(0.0..=1.0).contains(&ramp.exit_ratio) {
                return Err(ExperimentError::InvalidArgument(format!(
                    "ramp exit ratio must be in [0, 1], got {}",
                    ramp.exit_ratio
                )));
            }
            inflow_share += ramp.inflow_share;
        }
        let lanes = self.truth.lanes[0];
        let v_crit = fundamental_diagram(&self.truth, self.truth.rho_crit)?;
        let capacity = lanes * self.truth.rho_crit * v_crit;
        let loaded_peak = self.peak_demand * (1.0 + inflow_share);
        if loaded_peak >= capacity {
            return Err(ExperimentError::InvalidArgument(format!(
                "peak demand {} plus ramp inflows exceeds corridor capacity {capacity:.0}",
                loaded_peak
            )));
        }
        Ok(())
    }
}

/// Demand at an hour of day, in veh/h over all lanes.
pub fn demand_profile(base: f64, peak: f64, hour: f64) -> f64 {
    let h = hour.rem_euclid(24.0);
    if h < RAMP_UP_START || h >= RAMP_DOWN_END {
        base
    } else if h < PEAK_START {
        base + (peak - base) * (h - RAMP_UP_START) / (PEAK_START - RAMP_UP_START)
    } else if h < PEAK_END {
        peak
    } else {
        peak + (base - peak) * (h - PEAK_END) / (RAMP_DOWN_END - PEAK_END)
    }
}

/// Ramp series of a generated corridor: on-ramp inflow tracks the demand
/// profile through each ramp's share, off-ramp departures follow the split
/// ratio s = exit_ratio · q_upstream. Returns [`RampSpec::None`] when the
/// spec has no ramps.
fn ramp_series(spec: &SyntheticSpec, horizon: usize) -> RampSpec {
    if spec.ramps.is_empty() {
        return RampSpec::None;
    }
    let n = spec.truth.n_segments;
    let mut ramp_in = vec![0.0; n * horizon];
    let mut beta = vec![0.0; n * horizon];
    for k in 0..horizon {
        let hour = (k as f64 * spec.truth.t_step).rem_euclid(24.0);
        let demand = demand_profile(spec.base_demand, spec.peak_demand, hour);
        for ramp in &spec.ramps {
            ramp_in[k * n + ramp.segment] = ramp.inflow_share * demand;
            beta[k * n + ramp.segment] = ramp.exit_ratio;
        }
    }
    RampSpec::SplitRatio { ramp_in, beta }
}

/// Free-flow state (ρ, v) carrying the given total demand: the fixed point
/// of ρ = q/(λ·V(ρ)) starting from the free-speed density.
pub fn upstream_state(params: &MetanetParams, demand: f64) -> Result<(f64, f64), ExperimentError> {
    let lanes = params.lanes[0];
    let per_lane = demand / lanes;
    let mut rho = per_lane / params.free_speed;
    let mut vel = params.free_speed;
    for _ in 0..64 {
        vel = fundamental_diagram(params, rho)?;
        rho = per_lane / vel;
    }
    Ok((rho, vel))
}

/// A generated corridor study: the full-resolution run, its detector
/// readout with and without measurement noise, and the inputs a
/// simulation-based method needs to rerun the corridor.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: SyntheticSpec,
    pub grid: TrafficGrid,
    /// Noise-free window means at the detector cells, internal units.
    pub truth: Dataset,
    /// The same cells with seeded measurement noise.
    pub measured: Dataset,
    pub boundary: Boundary,
    pub initial: InitialState,
    /// Aggregated time steps covered by the detector data.
    pub windows: usize,
    pub horizon: usize,
}

pub fn generate_world(spec: &SyntheticSpec) -> Result<World, ExperimentError> {
    spec.validate()?;
    let params = &spec.truth;
    let steps_per_day = (24.0 / params.t_step).round() as usize;
    let horizon = spec.days * steps_per_day;
    if horizon < 2 * spec.aggregation {
        return Err(ExperimentError::InvalidArgument(
            "horizon shorter than two detector windows".into(),
        ));
    }

    let mut upstream_flow = Vec::with_capacity(horizon);
    let mut upstream_speed = Vec::with_capacity(horizon);
    let mut downstream_rho = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let hour = (k as f64 * params.t_step).rem_euclid(24.0);
        let demand = demand_profile(spec.base_demand, spec.peak_demand, hour);
        let (rho, vel) = upstream_state(params, demand)?;
        upstream_flow.push(rho * vel * params.lanes[0]);
        upstream_speed.push(vel);
        downstream_rho.push(rho);
    }
    let boundary = Boundary::Series { upstream_flow, upstream_speed, downstream_rho };

    let (rho0, vel0) = upstream_state(params, demand_profile(spec.base_demand, spec.peak_demand, 0.0))?;
    let initial = InitialState::uniform(params.n_segments, rho0, vel0);

    let grid = simulate(params, &initial, &boundary, &ramp_series(spec, horizon), horizon, None)?;
    let truth = emit_detector_data(&grid, &spec.detectors, spec.aggregation, UnitSpec::internal())?;
    let measured = add_measurement_noise(&truth, spec.flow_noise, spec.speed_noise, spec.seed)?;
    let windows = horizon / spec.aggregation;

    Ok(World { spec: spec.clone(), grid, truth, measured, boundary, initial, windows, horizon })
}

fn add_measurement_noise(
    truth: &Dataset,
    flow_noise: f64,
    speed_noise: f64,
    seed: u64,
) -> Result<Dataset, ExperimentError> {
    let flow_dist = Normal::new(0.0, flow_noise)
        .map_err(|e| ExperimentError::InvalidArgument(format!("flow noise: {e}")))?;
    let speed_dist = Normal::new(0.0, speed_noise)
        .map_err(|e| ExperimentError::InvalidArgument(format!("speed noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = truth.clone();
    for r in 0..out.len() {
        let dq = flow_dist.sample(&mut rng);
        let dv = speed_dist.sample(&mut rng);
        if let Some(q) = out.flow_mut()[r].as_mut() {
            *q = (*q + dq).max(0.0);
        }
        if let Some(v) = out.speed_mut()[r].as_mut() {
            *v = (*v + dv).max(0.0);
        }
    }
    Ok(out)
}

/// Held-out cells: every row of one detector, plus the final windows of all
/// remaining detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    /// Segment id of the held-out detector.
    pub holdout_segment: usize,
    /// Number of final windows withheld from the remaining detectors.
    pub test_tail: usize,
}

/// Partition rows into (train, test) index sets. Train rows are the
/// non-holdout detectors before the tail; test rows are everything else,
/// so the two sets are disjoint and exhaustive by construction.
pub fn split_rows(
    points: &[GridPoint],
    split: &SplitSpec,
    windows: usize,
) -> Result<(Vec<usize>, Vec<usize>), ExperimentError> {
    if split.test_tail >= windows {
        return Err(ExperimentError::InvalidArgument(format!(
            "test tail {} covers all {windows} windows",
            split.test_tail
        )));
    }
    if !points.iter().any(|p| p.i == split.holdout_segment) {
        return Err(ExperimentError::InvalidArgument(format!(
            "holdout segment {} has no rows",
            split.holdout_segment
        )));
    }
    let cut = windows - split.test_tail;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (row, p) in points.iter().enumerate() {
        if p.i == split.holdout_segment || p.k >= cut {
            test.push(row);
        } else {
            train.push(row);
        }
    }
    if train.is_empty() {
        return Err(ExperimentError::InvalidArgument("split leaves no training rows".into()));
    }
    Ok((train, test))
}

/// Miscalibrated copy of the physical constants: each one scaled by a
/// seeded factor in [1 − relative, 1 + relative]. Geometry and the step
/// size are left alone.
pub fn perturb_params(params: &MetanetParams, relative: f64, seed: u64) -> MetanetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    for field in [
        &mut out.free_speed,
        &mut out.rho_crit,
        &mut out.alpha,
        &mut out.tau,
        &mut out.nu,
        &mut out.kappa,
    ] {
        let u: f64 = rng.gen_range(-1.0..1.0);
        *field *= 1.0 + relative * u;
    }
    out
}

/// Deterministic miscalibration: every physical parameter moved by exactly
/// the given relative amount, with alternating sign so the errors do not
/// reduce to a single rescaling. Unlike [`perturb_params`], the error
/// magnitude never depends on a seed, so a study built on it has the same
/// calibration gap on every run.
pub fn decalibrate(params: &MetanetParams, relative: f64) -> MetanetParams {
    let mut out = params.clone();
    out.free_speed *= 1.0 + relative;
    out.rho_crit *= 1.0 - relative;
    out.alpha *= 1.0 + relative;
    out.tau *= 1.0 - relative;
    out.nu *= 1.0 + relative;
    out.kappa *= 1.0 - relative;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demand_profile_is_trapezoidal() {
        let base = 2000.0;
        let peak = 7000.0;
        assert_eq!(demand_profile(base, peak, 3.0), base);
        assert_eq!(demand_profile(base, peak, 9.5), peak);
        assert_eq!(demand_profile(base, peak, 20.0), base);
        let rising = demand_profile(base, peak, 6.5);
        assert!(rising > base && rising < peak);
        assert_eq!(demand_profile(base, peak, 6.5), demand_profile(base, peak, 30.5));
        let falling = demand_profile(base, peak, 13.0);
        assert_eq!(falling, base + (peak - base) * 0.5);
    }

    #[test]
    fn upstream_state_carries_the_demand() {
        let params = MetanetParams::default();
        for demand in [1500.0, 4000.0, 7000.0, 8500.0] {
            let (rho, vel) = upstream_state(&params, demand).unwrap();
            let q = rho * vel * params.lanes[0];
            assert!((q - demand).abs() <= 1e-6 * demand, "demand {demand} gave {q}");
            assert!(rho < params.rho_crit, "fixed point must stay free-flow");
        }
    }

    #[test]
    fn unobserved_ramps_shift_flow_between_their_segments() {
        let mut spec = SyntheticSpec::defaults(5);
        spec.ramps = vec![
            SyntheticRamp { segment: 4, inflow_share: 0.15, exit_ratio: 0.0 },
            SyntheticRamp { segment: 16, inflow_share: 0.0, exit_ratio: 0.10 },
        ];
        let world = generate_world(&spec).unwrap();
        // During the peak plateau the stretch between the ramps carries the
        // on-ramp surplus and the final stretch loses the off-ramp share.
        let peak_window = (9.5 * 12.0) as usize;
        let flow_at = |seg: usize| {
            let row = world
                .truth
                .points()
                .iter()
                .position(|p| p.i == seg && p.k == peak_window)
                .expect("detector row present");
            world.truth.flow()[row].unwrap()
        };
        let upstream = flow_at(2);
        let inside = flow_at(10);
        let past_exit = flow_at(18);
        assert!(
            inside > 1.10 * upstream,
            "on-ramp surplus missing: {inside} vs upstream {upstream}"
        );
        assert!(past_exit < 0.95 * inside, "off-ramp exit missing: {past_exit} vs {inside}");
        // The readout never exposes the ramp series.
        assert_eq!(world.truth.len(), spec.detectors.len() * world.windows);
    }

    #[test]
    fn ramp_specs_are_validated() {
        let mut spec = SyntheticSpec::defaults(1);
        spec.ramps = vec![SyntheticRamp { segment: 20, inflow_share: 0.1, exit_ratio: 0.0 }];
        assert!(generate_world(&spec).unwrap_err().to_string().contains("outside corridor"));
        spec.ramps = vec![SyntheticRamp { segment: 4, inflow_share: 0.1, exit_ratio: 1.5 }];
        assert!(generate_world(&spec).unwrap_err().to_string().contains("exit ratio"));
        // Total on-ramp load counts against capacity.
        spec.ramps = vec![SyntheticRamp { segment: 4, inflow_share: 0.30, exit_ratio: 0.0 }];
        spec.peak_demand = 7000.0;
        assert!(generate_world(&spec).unwrap_err().to_string().contains("capacity"));
    }

    #[test]
    fn decalibration_is_deterministic_and_scales_each_field() {
        let truth = MetanetParams::default();
        let off = decalibrate(&truth, 0.1);
        assert_eq!(off.free_speed, truth.free_speed * 1.1);
        assert_eq!(off.rho_crit, truth.rho_crit * 0.9);
        assert_eq!(off.alpha, truth.alpha * 1.1);
        assert_eq!(off.tau, truth.tau * 0.9);
        assert_eq!(off.nu, truth.nu * 1.1);
        assert_eq!(off.kappa, truth.kappa * 0.9);
        assert_eq!(off.t_step, truth.t_step);
        assert_eq!(off.seg_len, truth.seg_len);
        off.validate().unwrap();
        assert_eq!(decalibrate(&truth, 0.1), off);
    }

    #[test]
    fn world_generation_is_deterministic() {
        let spec = SyntheticSpec { days: 1, ..SyntheticSpec::defaults(5) };
        let a = generate_world(&spec).unwrap();
        let b = generate_world(&spec).unwrap();
        assert_eq!(a.windows, 288);
        assert_eq!(a.horizon, 8640);
        assert_eq!(a.truth.len(), 288 * spec.detectors.len());
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.measured, b.measured);
        assert_ne!(a.truth, a.measured);
    }

    #[test]
    fn truth_rows_are_window_means_of_the_grid() {
        let spec = SyntheticSpec { days: 1, ..SyntheticSpec::defaults(5) };
        let world = generate_world(&spec).unwrap();
        let d = spec.detectors[1];
        let w = 37;
        let row = world
            .truth
            .points()
            .iter()
            .position(|p| p.i == d && p.k == w)
            .expect("detector row present");
        let mut q_sum = 0.0;
        for k in w * spec.aggregation..(w + 1) * spec.aggregation {
            q_sum += world.grid.flow(d, k);
        }
        let mean = q_sum / spec.aggregation as f64;
        assert_eq!(world.truth.flow()[row], Some(mean));
    }

    #[test]
    fn world_speeds_track_the_morning_peak() {
        let spec = SyntheticSpec { days: 1, ..SyntheticSpec::defaults(5) };
        let world = generate_world(&spec).unwrap();
        let d = spec.detectors[2];
        let night = world.truth.points().iter().position(|p| p.i == d && p.k == 24).unwrap();
        let peak = world.truth.points().iter().position(|p| p.i == d && p.k == 114).unwrap();
        let v_night = world.truth.speed()[night].unwrap();
        let v_peak = world.truth.speed()[peak].unwrap();
        assert!(v_peak < v_night - 5.0, "peak speed {v_peak} vs night {v_night}");
        let q_night = world.truth.flow()[night].unwrap();
        let q_peak = world.truth.flow()[peak].unwrap();
        assert!(q_peak > 2.0 * q_night, "peak flow {q_peak} vs night {q_night}");
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let spec = SyntheticSpec { days: 1, ..SyntheticSpec::defaults(5) };
        let world = generate_world(&spec).unwrap();
        let split = SplitSpec { holdout_segment: 10, test_tail: 48 };
        let (train, test) = split_rows(world.truth.points(), &split, world.windows).unwrap();
        assert_eq!(train.len() + test.len(), world.truth.len());
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), world.truth.len());
        for &r in &train {
            let p = world.truth.points()[r];
            assert_ne!(p.i, 10);
            assert!(p.k < world.windows - 48);
        }
        let holdout_rows = test
            .iter()
            .filter(|&&r| world.truth.points()[r].i == 10)
            .count();
        assert_eq!(holdout_rows, world.windows);
    }

    #[test]
    fn split_rejects_degenerate_requests() {
        let points: Vec<GridPoint> = (0..10).map(|k| GridPoint::new(2, k)).collect();
        let split = SplitSpec { holdout_segment: 3, test_tail: 2 };
        assert!(split_rows(&points, &split, 10).is_err());
        let split = SplitSpec { holdout_segment: 2, test_tail: 10 };
        assert!(split_rows(&points, &split, 10).is_err());
    }

    #[test]
    fn perturbation_is_seeded_and_bounded() {
        let params = MetanetParams::default();
        let a = perturb_params(&params, 0.1, 3);
        let b = perturb_params(&params, 0.1, 3);
        let c = perturb_params(&params, 0.1, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.free_speed >= 108.0 && a.free_speed <= 132.0);
        assert!(a.tau > 0.0);
        assert_ne!(a.free_speed, params.free_speed);
        assert_eq!(a.t_step, params.t_step);
        assert_eq!(a.lanes, params.lanes);
        a.validate().unwrap();
    }

    #[test]
    fn overloaded_peak_demand_is_rejected() {
        let mut spec = SyntheticSpec::defaults(1);
        spec.peak_demand = 20_000.0;
        let err = generate_world(&spec).unwrap_err();
        assert!(err.to_string().contains("capacity"));
    }
}

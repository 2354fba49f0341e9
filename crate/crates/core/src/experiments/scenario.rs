//! Scenario orchestration: one data source, one train/test split, optional
//! training-set corruption, and a list of estimation methods scored on the
//! same held-out cells.
//!
//! Corruption and thinning apply to the training rows alone; the test rows
//! are taken from the noise-free truth and never touched. Each method runs
//! independently: a failure is recorded in its report entry and the
//! remaining methods still run. Reruns with the same scenario and seed
//! produce identical reports.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use crate::data::{Dataset, OutputDim, UnitSpec};
use crate::ekf::{run_filter, EkfConfig, EkfMeasurement, MeasurementRow};
use crate::experiments::config::TrainSettings;
use crate::experiments::metrics::{
    compute_metrics, Estimates, Method, MethodReport, ScatterPoint, ScenarioReport,
};
use crate::experiments::synthetic::{
    decalibrate, generate_world, split_rows, SplitSpec, SyntheticSpec, World,
};
use crate::experiments::{ingest_csv, inject_bias, subsample, BiasSpec, ExperimentError};
use crate::metanet::{
    emit_detector_data, simulate, Boundary, InitialState, MetanetParams, RampSpec,
};
use crate::prgp::{self, PrgpParams, TrainConfig};

/// Seed offsets keeping the corruption draws distinct from the world's
/// measurement noise and the trainer's batch draws.
const BIAS_SALT: u64 = 0x4249_4153;
const SAMPLE_SALT: u64 = 0x5341_4d50;

/// Where a scenario's rows come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Detector CSV in the given file units. Test targets are the file's own
    /// values, and simulation-based methods are unavailable.
    Csv { path: PathBuf, units: UnitSpec },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub source: DataSource,
    pub split: SplitSpec,
    /// Detector-fault corruption applied to the training rows.
    pub bias: Option<BiasSpec>,
    /// Uniform thinning applied to the training rows after corruption.
    pub sample_ratio: Option<f64>,
    pub methods: Vec<Method>,
    pub train: TrainSettings,
    /// Physical constants handed to the estimation methods, typically
    /// miscalibrated relative to the generating corridor.
    pub method_params: MetanetParams,
    pub ekf: EkfConfig,
    pub seed: u64,
    /// Draw residual estimates from the GP posterior instead of its mean.
    pub sample_posterior: bool,
    /// Record wall-clock runtimes. Off by default so reports are
    /// byte-stable across machines.
    pub wall_clock: bool,
}

impl Scenario {
    /// Default corridor study: one synthetic day, the middle detector held
    /// out, the last two hours withheld everywhere, and estimation methods
    /// running on physical constants decalibrated by 10%.
    pub fn synthetic_default(name: &str, seed: u64) -> Self {
        let spec = SyntheticSpec::defaults(seed);
        let method_params = decalibrate(&spec.truth, 0.1);
        Scenario {
            name: name.to_string(),
            source: DataSource::Synthetic(spec),
            split: SplitSpec { holdout_segment: 10, test_tail: 24 },
            bias: None,
            sample_ratio: None,
            methods: Method::ALL.to_vec(),
            train: TrainSettings::default(),
            method_params,
            ekf: EkfConfig::table_defaults(),
            seed,
            sample_posterior: false,
            wall_clock: false,
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        self.method_params.validate()?;
        if let DataSource::Synthetic(spec) = &self.source {
            if self.method_params.n_segments != spec.truth.n_segments {
                return Err(ExperimentError::InvalidArgument(format!(
                    "method parameters cover {} segments, corridor has {}",
                    self.method_params.n_segments, spec.truth.n_segments
                )));
            }
            if self.method_params.t_step != spec.truth.t_step {
                return Err(ExperimentError::InvalidArgument(
                    "method parameters must use the corridor step size".into(),
                ));
            }
        }
        if let Some(bias) = &self.bias {
            bias.validate()?;
        }
        Ok(())
    }
}

/// The split, corrupted inputs a scenario's methods all share.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    /// Held-out targets, never corrupted.
    pub test: Dataset,
    pub world: Option<World>,
}

pub fn prepare(scenario: &Scenario) -> Result<Prepared, ExperimentError> {
    scenario.validate()?;
    let (raw_train, test, world) = match &scenario.source {
        DataSource::Synthetic(spec) => {
            let world = generate_world(spec)?;
            let (train_rows, test_rows) =
                split_rows(world.truth.points(), &scenario.split, world.windows)?;
            let train = world.measured.select_rows(&train_rows);
            let test = world.truth.select_rows(&test_rows);
            (train, test, Some(world))
        }
        DataSource::Csv { path, units } => {
            let data = ingest_csv(path, *units)?;
            let windows = 1 + data.points().iter().map(|p| p.k).max().unwrap_or(0);
            let (train_rows, test_rows) = split_rows(data.points(), &scenario.split, windows)?;
            (data.select_rows(&train_rows), data.select_rows(&test_rows), None)
        }
    };
    let mut train = raw_train;
    if let Some(bias) = &scenario.bias {
        train = inject_bias(&train, bias, scenario.seed ^ BIAS_SALT)?;
    }
    if let Some(ratio) = scenario.sample_ratio {
        train = subsample(&train, ratio, scenario.seed ^ SAMPLE_SALT)?;
    }
    Ok(Prepared { train, test, world })
}

/// Run every requested method and score it on the held-out cells.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioReport, ExperimentError> {
    let prepared = prepare(scenario)?;
    let mut methods = Vec::with_capacity(scenario.methods.len());
    for &method in &scenario.methods {
        let start = Instant::now();
        let outcome = estimate(scenario, &prepared, method)
            .and_then(|est| score(&prepared.test, est, method));
        let runtime = scenario.wall_clock.then(|| start.elapsed().as_secs_f64());
        methods.push(match outcome {
            Ok(mut report) => {
                report.runtime = runtime;
                report
            }
            Err(e) => MethodReport::failed(method, e.to_string(), runtime),
        });
    }
    Ok(ScenarioReport {
        scenario: scenario.name.clone(),
        n_test: prepared.test.len(),
        methods,
    })
}

fn estimate(
    scenario: &Scenario,
    prepared: &Prepared,
    method: Method,
) -> Result<Estimates, ExperimentError> {
    match method {
        Method::Metanet => estimate_open_loop(scenario, prepared),
        Method::MetanetEkf => estimate_filtered(scenario, prepared),
        Method::PureGp => estimate_gp(scenario, prepared, false),
        Method::Prgp => estimate_gp(scenario, prepared, true),
    }
}

fn require_world<'a>(prepared: &'a Prepared) -> Result<&'a World, ExperimentError> {
    prepared.world.as_ref().ok_or_else(|| {
        ExperimentError::InvalidArgument("method requires a synthetic corridor".into())
    })
}

/// Boundary series and initial state reconstructed from the training rows,
/// which are all the corridor information an estimation method gets. The
/// first and last detectors carrying data stand in for the corridor ends,
/// held piecewise constant over each window; windows without rows keep the
/// last seen value. The generating boundary itself is never handed to a
/// method.
pub fn reconstructed_inputs(
    train: &Dataset,
    params: &MetanetParams,
    windows: usize,
    aggregation: usize,
    horizon: usize,
) -> Result<(Boundary, InitialState), ExperimentError> {
    let mut segments: Vec<usize> = train.points().iter().map(|p| p.i).collect();
    segments.sort_unstable();
    segments.dedup();
    let (Some(&up), Some(&down)) = (segments.first(), segments.last()) else {
        return Err(ExperimentError::InvalidArgument("no training rows".into()));
    };

    let window_series = |segment: usize| -> Result<Vec<(f64, f64)>, ExperimentError> {
        let mut sparse: Vec<Option<(f64, f64)>> = vec![None; windows];
        for (row, p) in train.points().iter().enumerate() {
            if p.i == segment && p.k < windows {
                if let (Some(q), Some(v)) = (train.flow()[row], train.speed()[row]) {
                    sparse[p.k] = Some((q, v));
                }
            }
        }
        let first = sparse.iter().flatten().next().copied().ok_or_else(|| {
            ExperimentError::InvalidArgument(format!("segment {segment} has no usable rows"))
        })?;
        let mut last = first;
        Ok(sparse
            .into_iter()
            .map(|entry| {
                if let Some(value) = entry {
                    last = value;
                }
                last
            })
            .collect())
    };
    let up_series = window_series(up)?;
    let down_series = window_series(down)?;

    let mut upstream_flow = Vec::with_capacity(horizon);
    let mut upstream_speed = Vec::with_capacity(horizon);
    let mut downstream_rho = Vec::with_capacity(horizon);
    let down_lanes = params.lanes[params.n_segments - 1];
    for k in 0..horizon {
        let w = (k / aggregation).min(windows - 1);
        let (q_up, v_up) = up_series[w];
        let (q_down, v_down) = down_series[w];
        upstream_flow.push(q_up);
        upstream_speed.push(v_up.max(1.0));
        downstream_rho.push(q_down / (v_down.max(1.0) * down_lanes));
    }
    let boundary = Boundary::Series { upstream_flow, upstream_speed, downstream_rho };

    let (q0, v0) = up_series[0];
    let rho0 = q0 / (v0.max(1.0) * params.lanes[0]);
    let initial = InitialState::uniform(params.n_segments, rho0, v0.max(1.0));
    Ok((boundary, initial))
}

fn estimate_open_loop(
    scenario: &Scenario,
    prepared: &Prepared,
) -> Result<Estimates, ExperimentError> {
    let world = require_world(prepared)?;
    let (boundary, initial) = reconstructed_inputs(
        &prepared.train,
        &scenario.method_params,
        world.windows,
        world.spec.aggregation,
        world.horizon,
    )?;
    let grid = simulate(
        &scenario.method_params,
        &initial,
        &boundary,
        &RampSpec::None,
        world.horizon,
        None,
    )?;
    let estimates =
        emit_detector_data(&grid, &world.spec.detectors, world.spec.aggregation, UnitSpec::internal())?;
    lookup_estimates(&estimates, &prepared.test)
}

fn estimate_filtered(
    scenario: &Scenario,
    prepared: &Prepared,
) -> Result<Estimates, ExperimentError> {
    let world = require_world(prepared)?;
    let aggregation = world.spec.aggregation;
    let (boundary, initial) = reconstructed_inputs(
        &prepared.train,
        &scenario.method_params,
        world.windows,
        aggregation,
        world.horizon,
    )?;
    // Each training row becomes a measurement at the final step of its
    // window; the filter free-runs wherever the training set has no row.
    let mut by_step: BTreeMap<usize, Vec<MeasurementRow>> = BTreeMap::new();
    for (row, p) in prepared.train.points().iter().enumerate() {
        let step = (p.k + 1) * aggregation - 1;
        by_step.entry(step).or_default().push(MeasurementRow {
            segment: p.i,
            flow: prepared.train.flow()[row],
            speed: prepared.train.speed()[row],
        });
    }
    let measurements: Vec<EkfMeasurement> =
        by_step.into_iter().map(|(step, rows)| EkfMeasurement { step, rows }).collect();
    let grid = run_filter(
        &scenario.method_params,
        &initial,
        &boundary,
        &measurements,
        world.horizon,
        &scenario.ekf,
    )?;
    let estimates =
        emit_detector_data(&grid, &world.spec.detectors, aggregation, UnitSpec::internal())?;
    lookup_estimates(&estimates, &prepared.test)
}

/// Physical constants on the detector lattice: the estimation step size is
/// the simulation step times the aggregation window.
fn lattice_params(scenario: &Scenario, prepared: &Prepared) -> MetanetParams {
    let mut params = scenario.method_params.clone();
    if let Some(world) = &prepared.world {
        params.t_step = world.spec.truth.t_step * world.spec.aggregation as f64;
    }
    params
}

/// Training state with kernels at their starting point and the density
/// prior level set from the data: mean flow over mean speed times lanes.
pub fn gp_initial_params(lattice: MetanetParams, data: &Dataset) -> PrgpParams {
    let lanes = lattice.lanes[0];
    let mut params = PrgpParams::initial(lattice);
    let (_, flows) = data.observed(OutputDim::Flow);
    let (_, speeds) = data.observed(OutputDim::Speed);
    if !flows.is_empty() && !speeds.is_empty() {
        let mean_flow = flows.iter().sum::<f64>() / flows.len() as f64;
        let mean_speed = speeds.iter().sum::<f64>() / speeds.len() as f64;
        let level = mean_flow / (mean_speed.max(1.0) * lanes);
        params.set_density_prior_mean(level.max(1.0));
    }
    params
}

/// Trainer settings for one method. `physics = false` zeroes the physics
/// ascent weight, which reduces training to plain GP regression.
pub fn gp_train_config(
    train: &TrainSettings,
    seed: u64,
    physics: bool,
    sample_posterior: bool,
) -> TrainConfig {
    let mut config = TrainConfig::defaults(seed);
    config.iterations = train.iterations;
    config.learning_rate = train.learning_rate;
    config.m = train.m;
    config.phi_f = train.phi_f;
    config.phi_g = if physics { train.phi_g } else { 0.0 };
    config.sample_posterior = physics && sample_posterior;
    config
}

fn estimate_gp(
    scenario: &Scenario,
    prepared: &Prepared,
    physics: bool,
) -> Result<Estimates, ExperimentError> {
    let params = gp_initial_params(lattice_params(scenario, prepared), &prepared.train);
    let config =
        gp_train_config(&scenario.train, scenario.seed, physics, scenario.sample_posterior);
    let (model, _) = prgp::train(&params, &prepared.train, &config)?;
    let prediction = prgp::predict(&model, &prepared.train, prepared.test.points())?;
    Ok(Estimates { flow: prediction.flow, speed: prediction.vel })
}

/// Align a dataset of estimates to the test rows by cell.
pub fn lookup_estimates(
    estimates: &Dataset,
    test: &Dataset,
) -> Result<Estimates, ExperimentError> {
    let mut by_cell = HashMap::with_capacity(estimates.len());
    for (row, p) in estimates.points().iter().enumerate() {
        by_cell.insert((p.i, p.k), (estimates.flow()[row], estimates.speed()[row]));
    }
    let mut flow = Vec::with_capacity(test.len());
    let mut speed = Vec::with_capacity(test.len());
    for p in test.points() {
        let Some((q, v)) = by_cell.get(&(p.i, p.k)) else {
            return Err(ExperimentError::InvalidArgument(format!(
                "no estimate at cell ({}, {})",
                p.i, p.k
            )));
        };
        flow.push(q.unwrap_or(f64::NAN));
        speed.push(v.unwrap_or(f64::NAN));
    }
    Ok(Estimates { flow, speed })
}

fn score(
    test: &Dataset,
    estimates: Estimates,
    method: Method,
) -> Result<MethodReport, ExperimentError> {
    let dims = compute_metrics(test, &estimates)?;
    let mut scatter = Vec::new();
    for d in &dims {
        let column = match d.dim {
            OutputDim::Flow => &estimates.flow,
            OutputDim::Speed => &estimates.speed,
            OutputDim::Density => continue,
        };
        let mut points = Vec::with_capacity(d.n);
        for (row, p) in test.points().iter().enumerate() {
            if let Some(truth) = test.value(row, d.dim) {
                points.push(ScatterPoint { i: p.i, k: p.k, truth, estimate: column[row] });
            }
        }
        scatter.push((d.dim, points));
    }
    Ok(MethodReport { method, error: None, dims, scatter, runtime: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::metrics::render_metrics_csv;

    /// Coarse world: one day sampled hourly by three detectors, so the GP
    /// lattice is 3×24 and every method runs in milliseconds.
    fn small_scenario(name: &str, seed: u64) -> Scenario {
        let mut scenario = Scenario::synthetic_default(name, seed);
        let DataSource::Synthetic(spec) = &mut scenario.source else { unreachable!() };
        spec.aggregation = 360;
        spec.detectors = vec![2, 10, 17];
        scenario.split = SplitSpec { holdout_segment: 10, test_tail: 4 };
        scenario.train =
            TrainSettings { iterations: 3, learning_rate: 0.01, m: 4, phi_f: 0.01, phi_g: 0.01 };
        scenario
    }

    #[test]
    fn reconstruction_fills_windows_forward_from_training_rows() {
        let points = vec![
            crate::data::GridPoint::new(1, 0),
            crate::data::GridPoint::new(1, 2),
            crate::data::GridPoint::new(4, 0),
            crate::data::GridPoint::new(4, 1),
        ];
        let flow = vec![1000.0, 2000.0, 1200.0, 1600.0];
        let speed = vec![50.0, 40.0, 60.0, 55.0];
        let train = Dataset::dense(points, flow, speed, UnitSpec::internal()).unwrap();
        let params = crate::metanet::MetanetParams::with_uniform_geometry(6, 0.5, 4.0);
        let (boundary, initial) = reconstructed_inputs(&train, &params, 4, 2, 8).unwrap();
        let Boundary::Series { upstream_flow, upstream_speed, downstream_rho } = boundary else {
            panic!("reconstruction must produce an exogenous series");
        };
        // Windows map to sim steps in pairs; window 1 keeps window 0's rows
        // and window 3 keeps window 2's.
        assert_eq!(upstream_flow, vec![1000.0; 4].into_iter().chain(vec![2000.0; 4]).collect::<Vec<_>>());
        assert_eq!(upstream_speed[0], 50.0);
        assert_eq!(upstream_speed[7], 40.0);
        assert_eq!(downstream_rho[0], 1200.0 / (60.0 * 4.0));
        assert_eq!(downstream_rho[2], 1600.0 / (55.0 * 4.0));
        assert_eq!(downstream_rho[7], 1600.0 / (55.0 * 4.0));
        assert_eq!(initial.rho, vec![1000.0 / (50.0 * 4.0); 6]);
        assert_eq!(initial.vel, vec![50.0; 6]);
    }

    #[test]
    fn calibrated_open_loop_tracks_noise_free_truth_closely() {
        let mut scenario = small_scenario("calibrated", 3);
        let DataSource::Synthetic(spec) = &mut scenario.source else { unreachable!() };
        spec.flow_noise = 0.0;
        spec.speed_noise = 0.0;
        scenario.method_params = spec.truth.clone();
        scenario.methods = vec![Method::Metanet];
        let report = run_scenario(&scenario).unwrap();
        let entry = &report.methods[0];
        assert_eq!(entry.error, None);
        // The boundary is rebuilt from hourly window means, so the rerun is
        // close but no longer exact.
        let flow = &entry.dims[0];
        let speed = &entry.dims[1];
        assert!(flow.rmse > 0.0 && flow.rmse < 600.0, "flow rmse {}", flow.rmse);
        assert!(speed.rmse > 0.0 && speed.rmse < 8.0, "speed rmse {}", speed.rmse);
    }

    #[test]
    fn miscalibrated_open_loop_has_positive_error() {
        let mut scenario = small_scenario("uncalibrated", 3);
        scenario.methods = vec![Method::Metanet];
        let report = run_scenario(&scenario).unwrap();
        let entry = &report.methods[0];
        assert_eq!(entry.error, None);
        assert!(entry.dims.iter().all(|d| d.rmse > 0.0));
    }

    #[test]
    fn scenario_rerun_renders_byte_identical_reports() {
        let mut scenario = small_scenario("repeat", 11);
        scenario.methods = vec![Method::Metanet, Method::MetanetEkf, Method::PureGp, Method::Prgp];
        let a = run_scenario(&scenario).unwrap();
        let b = run_scenario(&scenario).unwrap();
        let text_a = render_metrics_csv(&a);
        assert_eq!(text_a, render_metrics_csv(&b));
        // All four methods succeed and contribute flow and speed rows.
        assert_eq!(text_a.lines().count(), 1 + 2 * scenario.methods.len());
        for m in &a.methods {
            assert_eq!(m.error, None, "{:?}", m.method);
        }
    }

    #[test]
    fn corruption_never_touches_test_rows() {
        let mut scenario = small_scenario("biased", 7);
        scenario.bias =
            Some(BiasSpec { fraction: 1.0, flow_noise_std: 100.0, speed_noise_std: 5.0 });
        scenario.sample_ratio = Some(0.8);
        let prepared = prepare(&scenario).unwrap();

        let clean = prepare(&small_scenario("biased", 7)).unwrap();
        assert_eq!(prepared.test, clean.test);
        assert_ne!(prepared.train.len(), clean.train.len());

        // Test rows carry noise-free truth values.
        let DataSource::Synthetic(spec) = &scenario.source else { unreachable!() };
        let world = generate_world(spec).unwrap();
        for (row, p) in prepared.test.points().iter().enumerate() {
            let source = world
                .truth
                .points()
                .iter()
                .position(|q| q == p)
                .expect("test row drawn from the truth lattice");
            assert_eq!(prepared.test.flow()[row], world.truth.flow()[source]);
            assert_eq!(prepared.test.speed()[row], world.truth.speed()[source]);
        }
    }

    #[test]
    fn method_failure_is_recorded_and_the_run_continues() {
        let mut scenario = small_scenario("partial", 5);
        scenario.methods = vec![Method::PureGp, Method::Metanet];
        scenario.train.iterations = 0;
        let report = run_scenario(&scenario).unwrap();
        assert!(report.methods[0].error.is_some());
        assert!(report.methods[0].dims.is_empty());
        assert_eq!(report.methods[1].error, None);
        assert!(!report.methods[1].dims.is_empty());
    }

    #[test]
    fn csv_source_runs_data_methods_and_rejects_simulation_methods() {
        let mut points = Vec::new();
        let mut flows = Vec::new();
        let mut speeds = Vec::new();
        for i in [0usize, 1, 2] {
            for k in 0..10 {
                points.push(crate::data::GridPoint::new(i, k));
                flows.push(4000.0 + 100.0 * i as f64 + 20.0 * (k as f64 * 0.8).sin());
                speeds.push(90.0 - 3.0 * i as f64 + (k as f64 * 0.5).cos());
            }
        }
        let data =
            Dataset::dense(points, flows, speeds, UnitSpec::internal()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detectors.csv");
        crate::experiments::write_detector_csv(&data, &path).unwrap();

        let mut scenario = small_scenario("from-csv", 13);
        scenario.source = DataSource::Csv { path, units: UnitSpec::internal() };
        scenario.split = SplitSpec { holdout_segment: 1, test_tail: 2 };
        scenario.methods = vec![Method::Metanet, Method::PureGp];
        let report = run_scenario(&scenario).unwrap();
        assert_eq!(
            report.methods[0].error.as_deref(),
            Some("method requires a synthetic corridor")
        );
        assert_eq!(report.methods[1].error, None);
        assert_eq!(report.n_test, 10 + 2 * 2);
        assert_eq!(report.methods[1].dims[0].n, report.n_test);
    }

    #[test]
    fn scatter_rows_cover_every_test_cell() {
        let mut scenario = small_scenario("scatter", 9);
        scenario.methods = vec![Method::Metanet];
        let report = run_scenario(&scenario).unwrap();
        let entry = &report.methods[0];
        for (dim, points) in &entry.scatter {
            assert_eq!(points.len(), report.n_test, "{dim:?}");
        }
    }
}

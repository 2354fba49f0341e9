//! Experiment harness: detector CSV ingest, training-set corruption and
//! thinning, error metrics, synthetic corridor worlds, and scenario
//! orchestration.
//!
//! A study runs in four stages. A corridor world is generated (or a detector
//! CSV ingested), the rows are split into a training set and a held-out test
//! set, the training rows alone are optionally corrupted with sensor bias or
//! thinned down, and each estimation method is scored on the untouched test
//! cells with RMSE and MAPE.
//!
//! All randomness is seeded and all file output is rendered through exact
//! decimal round-trip formatting, so a scenario rerun with the same seed
//! produces byte-identical reports.

pub mod config;
pub mod metrics;
pub mod scenario;
pub mod synthetic;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{
    DataError, Dataset, GridPoint, StandardStats, UnitSpec, KM_PER_MILE, SAMPLES_PER_HOUR,
};
use crate::ekf::EkfError;
use crate::metanet::MetanetError;
use crate::prgp::PrgpError;

pub use config::{load_config, parse_config, ExperimentConfig, TrainSettings};
pub use metrics::{
    compute_metrics, emit_report, render_metrics_csv, DimMetrics, Estimates, Method,
    MethodReport, ScatterPoint, ScenarioReport,
};
pub use scenario::{
    gp_initial_params, gp_train_config, lookup_estimates, prepare, run_scenario, DataSource,
    Prepared, Scenario,
};
pub use synthetic::{
    decalibrate, generate_world, perturb_params, SplitSpec, SyntheticRamp, SyntheticSpec, World,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metanet(#[from] MetanetError),
    #[error(transparent)]
    Train(#[from] PrgpError),
    #[error(transparent)]
    Filter(#[from] EkfError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("config key {key}: {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    InvalidArgument(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io { path: path.display().to_string(), source }
}

pub const DETECTOR_HEADER: &str = "segment,k,flow,speed";

/// Parse detector text in the `segment,k,flow,speed` schema and convert the
/// values from the stated file units to internal units (veh/h, km/h).
pub fn parse_detector_csv(text: &str, units: UnitSpec) -> Result<Dataset, ExperimentError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == DETECTOR_HEADER => {}
        Some((_, header)) => {
            return Err(ExperimentError::Csv {
                line: 1,
                message: format!("expected header '{DETECTOR_HEADER}', got '{}'", header.trim_end()),
            })
        }
        None => return Err(ExperimentError::Data(DataError::Empty)),
    }
    let mut points = Vec::new();
    let mut flows = Vec::new();
    let mut speeds = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 {
            return Err(ExperimentError::Csv {
                line,
                message: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let segment = parse_field::<usize>(fields[0], "segment", line)?;
        let k = parse_field::<usize>(fields[1], "k", line)?;
        let flow = parse_field::<f64>(fields[2], "flow", line)?;
        let speed = parse_field::<f64>(fields[3], "speed", line)?;
        for (name, value) in [("flow", flow), ("speed", speed)] {
            if !value.is_finite() {
                return Err(ExperimentError::Csv {
                    line,
                    message: format!("non-finite {name} {value}"),
                });
            }
            if value < 0.0 {
                return Err(ExperimentError::Csv {
                    line,
                    message: format!("negative {name} {value}"),
                });
            }
        }
        points.push(GridPoint::new(segment, k));
        flows.push(flow);
        speeds.push(speed);
    }
    let data = Dataset::dense(points, flows, speeds, units)?;
    Ok(data.to_internal_units())
}

fn parse_field<T: std::str::FromStr>(
    token: &str,
    name: &str,
    line: usize,
) -> Result<T, ExperimentError> {
    token.trim().parse::<T>().map_err(|_| ExperimentError::Csv {
        line,
        message: format!("invalid {name} '{token}'"),
    })
}

/// Read a detector CSV file. See [`parse_detector_csv`].
pub fn ingest_csv<P: AsRef<Path>>(path: P, units: UnitSpec) -> Result<Dataset, ExperimentError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_detector_csv(&text, units)
}

/// Render a dataset to detector CSV text in the dataset's own units. Every
/// row must carry both values; the format has no missing-value notation.
pub fn render_detector_csv(data: &Dataset) -> Result<String, ExperimentError> {
    let mut out = String::with_capacity(32 * (data.len() + 1));
    out.push_str(DETECTOR_HEADER);
    out.push('\n');
    for (row, p) in data.points().iter().enumerate() {
        let (Some(flow), Some(speed)) = (data.flow()[row], data.speed()[row]) else {
            return Err(ExperimentError::InvalidArgument(format!(
                "row {row} is missing a value; detector files require complete rows"
            )));
        };
        let _ = writeln!(out, "{},{},{},{}", p.i, p.k, flow, speed);
    }
    Ok(out)
}

/// Write a detector CSV file. See [`render_detector_csv`].
pub fn write_detector_csv<P: AsRef<Path>>(
    data: &Dataset,
    path: P,
) -> Result<(), ExperimentError> {
    let path = path.as_ref();
    let text = render_detector_csv(data)?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Fit per-dimension statistics and return the standardized copy along with
/// the fitted statistics, so predictions can be mapped back.
pub fn standardize(data: &Dataset) -> Result<(Dataset, StandardStats), ExperimentError> {
    let stats = StandardStats::fit(data)?;
    Ok((data.standardized(&stats), stats))
}

/// Detector-fault model: a fixed fraction of rows gets additive Gaussian
/// noise. The noise scales are stated in field units (veh/5min and mph)
/// because that is how detector fault magnitudes are usually quoted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasSpec {
    /// Fraction of rows to corrupt, in [0, 1].
    pub fraction: f64,
    /// Flow noise standard deviation in veh/5min.
    pub flow_noise_std: f64,
    /// Speed noise standard deviation in mph.
    pub speed_noise_std: f64,
}

impl BiasSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(self.fraction.is_finite() && (0.0..=1.0).contains(&self.fraction)) {
            return Err(ExperimentError::InvalidArgument(format!(
                "corruption fraction must be in [0, 1], got {}",
                self.fraction
            )));
        }
        for (name, value) in
            [("flow noise std", self.flow_noise_std), ("speed noise std", self.speed_noise_std)]
        {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ExperimentError::InvalidArgument(format!(
                    "{name} must be finite and nonnegative, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Corrupt ⌊fraction·n⌋ rows, chosen without replacement, with additive
/// Gaussian noise on both observed values, clamped at zero. Rows outside the
/// chosen set are returned bit-identical.
pub fn inject_bias(
    data: &Dataset,
    spec: &BiasSpec,
    seed: u64,
) -> Result<Dataset, ExperimentError> {
    spec.validate()?;
    if data.units != UnitSpec::internal() {
        return Err(ExperimentError::InvalidArgument(
            "corruption expects internal units; convert the dataset first".into(),
        ));
    }
    let n = data.len();
    let count = (spec.fraction * n as f64).floor() as usize;
    let mut out = data.clone();
    if count == 0 {
        return Ok(out);
    }
    let sigma_q = spec.flow_noise_std * SAMPLES_PER_HOUR;
    let sigma_v = spec.speed_noise_std * KM_PER_MILE;
    let flow_noise = Normal::new(0.0, sigma_q)
        .map_err(|e| ExperimentError::InvalidArgument(format!("flow noise: {e}")))?;
    let speed_noise = Normal::new(0.0, sigma_v)
        .map_err(|e| ExperimentError::InvalidArgument(format!("speed noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, count).into_vec();
    rows.sort_unstable();
    for r in rows {
        let dq = flow_noise.sample(&mut rng);
        let dv = speed_noise.sample(&mut rng);
        if let Some(q) = out.flow_mut()[r].as_mut() {
            *q = (*q + dq).max(0.0);
        }
        if let Some(v) = out.speed_mut()[r].as_mut() {
            *v = (*v + dv).max(0.0);
        }
    }
    Ok(out)
}

/// Keep a seeded uniform sample of ⌊ratio·n⌋ rows, preserving the original
/// row order. `ratio = 1` returns the input unchanged.
pub fn subsample(data: &Dataset, ratio: f64, seed: u64) -> Result<Dataset, ExperimentError> {
    if !(ratio.is_finite() && ratio > 0.0 && ratio <= 1.0) {
        return Err(ExperimentError::InvalidArgument(format!(
            "sample ratio must be in (0, 1], got {ratio}"
        )));
    }
    let n = data.len();
    let keep = (ratio * n as f64).floor() as usize;
    if keep == 0 {
        return Err(ExperimentError::Data(DataError::Empty));
    }
    if keep == n {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    rows.sort_unstable();
    Ok(data.select_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FlowUnit, OutputDim, SpeedUnit};

    fn field_units() -> UnitSpec {
        UnitSpec { flow: FlowUnit::VehPer5Min, speed: SpeedUnit::MilesPerHour }
    }

    fn grid_dataset(n_segments: usize, n_steps: usize) -> Dataset {
        let mut points = Vec::new();
        let mut flows = Vec::new();
        let mut speeds = Vec::new();
        for i in 0..n_segments {
            for k in 0..n_steps {
                points.push(GridPoint::new(i, k));
                flows.push(3000.0 + 40.0 * i as f64 + 3.0 * k as f64);
                speeds.push(90.0 - 2.0 * i as f64 + 0.25 * k as f64);
            }
        }
        Dataset::dense(points, flows, speeds, UnitSpec::internal()).unwrap()
    }

    #[test]
    fn ingest_converts_field_units_to_internal() {
        let data =
            parse_detector_csv("segment,k,flow,speed\n0,0,400,65\n", field_units()).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.flow()[0], Some(4800.0));
        assert_eq!(data.speed()[0], Some(65.0 * KM_PER_MILE));
        assert_eq!(data.units, UnitSpec::internal());
    }

    #[test]
    fn ingest_reports_line_numbers_for_malformed_rows() {
        let missing = parse_detector_csv(
            "segment,k,flow,speed\n0,0,400,65\n1,0,380\n",
            field_units(),
        )
        .unwrap_err();
        assert_eq!(missing.to_string(), "line 3: expected 4 comma-separated fields, got 3");

        let garbage =
            parse_detector_csv("segment,k,flow,speed\n0,zero,400,65\n", field_units())
                .unwrap_err();
        assert_eq!(garbage.to_string(), "line 2: invalid k 'zero'");
    }

    #[test]
    fn ingest_rejects_negative_values() {
        let err =
            parse_detector_csv("segment,k,flow,speed\n0,0,-3,65\n", field_units()).unwrap_err();
        assert_eq!(err.to_string(), "line 2: negative flow -3");
    }

    #[test]
    fn ingest_rejects_duplicate_cells() {
        let err = parse_detector_csv(
            "segment,k,flow,speed\n0,0,400,65\n0,0,410,64\n",
            field_units(),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "duplicate input (0, 0)");
    }

    #[test]
    fn ingest_rejects_empty_and_bad_header() {
        let empty = parse_detector_csv("segment,k,flow,speed\n", field_units()).unwrap_err();
        assert_eq!(empty.to_string(), "no observations");

        let header = parse_detector_csv("seg,k,q,v\n0,0,1,2\n", field_units()).unwrap_err();
        assert!(header.to_string().starts_with("line 1: expected header"));
    }

    #[test]
    fn detector_csv_round_trip_is_lossless() {
        let internal = grid_dataset(3, 4);
        let in_field_units = internal.with_units(field_units());
        let text = render_detector_csv(&in_field_units).unwrap();
        let back = parse_detector_csv(&text, field_units()).unwrap();
        assert_eq!(back.points(), in_field_units.points());
        // Both sides apply exactly one unit conversion to the written values,
        // so equality is exact, not approximate.
        let expected = in_field_units.to_internal_units();
        for r in 0..back.len() {
            assert_eq!(back.flow()[r], expected.flow()[r]);
            assert_eq!(back.speed()[r], expected.speed()[r]);
        }
    }

    #[test]
    fn standardize_centers_scales_and_inverts() {
        let data = grid_dataset(4, 6);
        let (std_data, stats) = standardize(&data).unwrap();
        for dim in [OutputDim::Flow, OutputDim::Speed] {
            let (_, values) = std_data.observed(dim);
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-12, "{dim:?} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-12, "{dim:?} var {var}");
        }
        let (_, raw) = data.observed(OutputDim::Flow);
        let (_, std_flow) = std_data.observed(OutputDim::Flow);
        for (r, s) in raw.iter().zip(&std_flow) {
            let back = stats.destandardize(OutputDim::Flow, *s);
            assert!((back - r).abs() <= 1e-12 * r.abs().max(1.0));
        }
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let points = vec![GridPoint::new(0, 0), GridPoint::new(0, 1)];
        let data =
            Dataset::dense(points, vec![5.0, 5.0], vec![60.0, 61.0], UnitSpec::internal())
                .unwrap();
        let err = standardize(&data).unwrap_err();
        assert_eq!(err.to_string(), "zero-variance dimension");
    }

    #[test]
    fn bias_touches_exactly_the_requested_row_count() {
        let data = grid_dataset(10, 10);
        let spec = BiasSpec { fraction: 0.5, flow_noise_std: 100.0, speed_noise_std: 5.0 };
        let noisy = inject_bias(&data, &spec, 7).unwrap();
        let mut changed = 0;
        for r in 0..data.len() {
            let same = noisy.flow()[r] == data.flow()[r] && noisy.speed()[r] == data.speed()[r];
            if !same {
                changed += 1;
            }
        }
        assert_eq!(changed, 50);
    }

    #[test]
    fn bias_zero_fraction_is_bitwise_identity() {
        let data = grid_dataset(5, 7);
        let spec = BiasSpec { fraction: 0.0, flow_noise_std: 100.0, speed_noise_std: 5.0 };
        let out = inject_bias(&data, &spec, 11).unwrap();
        assert_eq!(out, data);
    }

    #[test]
    fn bias_is_seeded_and_seed_sensitive() {
        let data = grid_dataset(6, 8);
        let spec = BiasSpec { fraction: 0.4, flow_noise_std: 50.0, speed_noise_std: 4.0 };
        let a = inject_bias(&data, &spec, 3).unwrap();
        let b = inject_bias(&data, &spec, 3).unwrap();
        let c = inject_bias(&data, &spec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bias_clamps_values_at_zero() {
        let points: Vec<GridPoint> = (0..40).map(|k| GridPoint::new(0, k)).collect();
        let flows = vec![1.0; 40];
        let speeds: Vec<f64> = (0..40).map(|k| 0.5 + 0.001 * k as f64).collect();
        let data = Dataset::dense(points, flows, speeds, UnitSpec::internal()).unwrap();
        let spec = BiasSpec { fraction: 1.0, flow_noise_std: 500.0, speed_noise_std: 50.0 };
        let noisy = inject_bias(&data, &spec, 1).unwrap();
        for r in 0..noisy.len() {
            assert!(noisy.flow()[r].unwrap() >= 0.0);
            assert!(noisy.speed()[r].unwrap() >= 0.0);
        }
    }

    #[test]
    fn bias_rejects_bad_fraction_and_units() {
        let data = grid_dataset(2, 2);
        let spec = BiasSpec { fraction: 1.5, flow_noise_std: 1.0, speed_noise_std: 1.0 };
        assert!(inject_bias(&data, &spec, 0).is_err());
        let field = data.with_units(field_units());
        let ok_spec = BiasSpec { fraction: 0.5, flow_noise_std: 1.0, speed_noise_std: 1.0 };
        assert!(inject_bias(&field, &ok_spec, 0).is_err());
    }

    #[test]
    fn subsample_keeps_floor_of_ratio_times_rows() {
        let data = grid_dataset(56, 144);
        assert_eq!(data.len(), 8064);
        let kept = subsample(&data, 0.357, 9).unwrap();
        assert_eq!(kept.len(), 2878);
    }

    #[test]
    fn subsample_full_ratio_is_bitwise_identity() {
        let data = grid_dataset(4, 5);
        let out = subsample(&data, 1.0, 123).unwrap();
        assert_eq!(out, data);
    }

    #[test]
    fn subsample_rejects_bad_ratio_and_empty_result() {
        let data = grid_dataset(2, 3);
        assert!(subsample(&data, 0.0, 0).is_err());
        assert!(subsample(&data, 1.2, 0).is_err());
        let err = subsample(&data, 0.1, 0).unwrap_err();
        assert_eq!(err.to_string(), "no observations");
    }

    #[test]
    fn subsample_seeds_give_different_row_sets() {
        let data = grid_dataset(10, 10);
        let a = subsample(&data, 0.5, 1).unwrap();
        let b = subsample(&data, 0.5, 2).unwrap();
        assert_eq!(a.len(), b.len());
        assert_ne!(a.points(), b.points());
    }

    #[test]
    fn subsample_preserves_original_row_order() {
        let data = grid_dataset(8, 8);
        let kept = subsample(&data, 0.3, 5).unwrap();
        let order: Vec<usize> = kept
            .points()
            .iter()
            .map(|p| data.points().iter().position(|q| q == p).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }
}

//! Shared data types: grid inputs, detector datasets, units, standardization.
//!
//! Internal units are veh/h for flow, km/h for speed and veh/km/lane for
//! density. Detector files may use veh/5min and mph; conversions are exact
//! constants (1 veh/5min = 12 veh/h, 1 mph = 1.609344 km/h).

use thiserror::Error;

/// Exact mile-to-kilometre factor.
pub const KM_PER_MILE: f64 = 1.609344;
/// 5-minute samples per hour.
pub const SAMPLES_PER_HOUR: f64 = 12.0;

/// One grid input x = (segment index, time index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPoint {
    pub i: usize,
    pub k: usize,
}

impl GridPoint {
    pub fn new(i: usize, k: usize) -> Self {
        GridPoint { i, k }
    }
}

/// Output dimensions of the estimator. Density is never observed directly;
/// it is carried as a third GP output trained only through the physics term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputDim {
    Flow,
    Speed,
    Density,
}

impl OutputDim {
    pub const ALL: [OutputDim; 3] = [OutputDim::Flow, OutputDim::Speed, OutputDim::Density];

    pub fn index(self) -> usize {
        match self {
            OutputDim::Flow => 0,
            OutputDim::Speed => 1,
            OutputDim::Density => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OutputDim::Flow => "flow",
            OutputDim::Speed => "speed",
            OutputDim::Density => "density",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowUnit {
    VehPerHour,
    VehPer5Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedUnit {
    KmPerHour,
    MilesPerHour,
}

/// Units attached to a dataset. Density is always veh/km/lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitSpec {
    pub flow: FlowUnit,
    pub speed: SpeedUnit,
}

impl UnitSpec {
    /// Internal units: veh/h and km/h.
    pub fn internal() -> Self {
        UnitSpec { flow: FlowUnit::VehPerHour, speed: SpeedUnit::KmPerHour }
    }

    pub fn flow_to_internal(&self, value: f64) -> f64 {
        match self.flow {
            FlowUnit::VehPerHour => value,
            FlowUnit::VehPer5Min => value * SAMPLES_PER_HOUR,
        }
    }

    pub fn flow_from_internal(&self, value: f64) -> f64 {
        match self.flow {
            FlowUnit::VehPerHour => value,
            FlowUnit::VehPer5Min => value / SAMPLES_PER_HOUR,
        }
    }

    pub fn speed_to_internal(&self, value: f64) -> f64 {
        match self.speed {
            SpeedUnit::KmPerHour => value,
            SpeedUnit::MilesPerHour => value * KM_PER_MILE,
        }
    }

    pub fn speed_from_internal(&self, value: f64) -> f64 {
        match self.speed {
            SpeedUnit::KmPerHour => value,
            SpeedUnit::MilesPerHour => value / KM_PER_MILE,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("duplicate input ({0}, {1})")]
    DuplicatePoint(usize, usize),
    #[error("column length {got} does not match {expected} input points")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no observations")]
    Empty,
    #[error("zero-variance dimension")]
    ZeroVariance,
}

/// Paired inputs X = (i, k) and outputs Y = (flow, speed) with a per-dimension
/// observation mask (a `None` entry is masked out). Density has no column
/// because it is never observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<GridPoint>,
    flow: Vec<Option<f64>>,
    speed: Vec<Option<f64>>,
    pub units: UnitSpec,
}

impl Dataset {
    pub fn new(
        points: Vec<GridPoint>,
        flow: Vec<Option<f64>>,
        speed: Vec<Option<f64>>,
        units: UnitSpec,
    ) -> Result<Self, DataError> {
        if points.is_empty() {
            return Err(DataError::Empty);
        }
        if flow.len() != points.len() {
            return Err(DataError::LengthMismatch { expected: points.len(), got: flow.len() });
        }
        if speed.len() != points.len() {
            return Err(DataError::LengthMismatch { expected: points.len(), got: speed.len() });
        }
        let mut seen = std::collections::HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert(*p) {
                return Err(DataError::DuplicatePoint(p.i, p.k));
            }
        }
        Ok(Dataset { points, flow, speed, units })
    }

    /// Fully observed dataset (every row has both flow and speed).
    pub fn dense(
        points: Vec<GridPoint>,
        flow: Vec<f64>,
        speed: Vec<f64>,
        units: UnitSpec,
    ) -> Result<Self, DataError> {
        let flow = flow.into_iter().map(Some).collect();
        let speed = speed.into_iter().map(Some).collect();
        Dataset::new(points, flow, speed, units)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[GridPoint] {
        &self.points
    }

    pub fn flow(&self) -> &[Option<f64>] {
        &self.flow
    }

    pub fn speed(&self) -> &[Option<f64>] {
        &self.speed
    }

    pub fn flow_mut(&mut self) -> &mut [Option<f64>] {
        &mut self.flow
    }

    pub fn speed_mut(&mut self) -> &mut [Option<f64>] {
        &mut self.speed
    }

    pub fn value(&self, row: usize, dim: OutputDim) -> Option<f64> {
        match dim {
            OutputDim::Flow => self.flow[row],
            OutputDim::Speed => self.speed[row],
            OutputDim::Density => None,
        }
    }

    /// Observed (input, value) pairs for one dimension. Density is always empty.
    pub fn observed(&self, dim: OutputDim) -> (Vec<GridPoint>, Vec<f64>) {
        let column: &[Option<f64>] = match dim {
            OutputDim::Flow => &self.flow,
            OutputDim::Speed => &self.speed,
            OutputDim::Density => return (Vec::new(), Vec::new()),
        };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (p, v) in self.points.iter().zip(column) {
            if let Some(v) = *v {
                xs.push(*p);
                ys.push(v);
            }
        }
        (xs, ys)
    }

    /// Convert all values to internal units (veh/h, km/h).
    pub fn to_internal_units(&self) -> Dataset {
        let units = self.units;
        let flow = self.flow.iter().map(|v| v.map(|x| units.flow_to_internal(x))).collect();
        let speed = self.speed.iter().map(|v| v.map(|x| units.speed_to_internal(x))).collect();
        Dataset { points: self.points.clone(), flow, speed, units: UnitSpec::internal() }
    }

    /// Convert internal-unit values to the given output units.
    pub fn with_units(&self, units: UnitSpec) -> Dataset {
        assert_eq!(self.units, UnitSpec::internal(), "convert from internal units only");
        let flow = self.flow.iter().map(|v| v.map(|x| units.flow_from_internal(x))).collect();
        let speed = self.speed.iter().map(|v| v.map(|x| units.speed_from_internal(x))).collect();
        Dataset { points: self.points.clone(), flow, speed, units }
    }

    /// Keep only the rows at the given indices (order preserved).
    /// Applies a fitted standardization to the observed columns. The caller
    /// keeps values in internal units before standardizing.
    pub fn standardized(&self, stats: &StandardStats) -> Dataset {
        let flow = self
            .flow
            .iter()
            .map(|v| v.map(|x| stats.standardize(OutputDim::Flow, x)))
            .collect();
        let speed = self
            .speed
            .iter()
            .map(|v| v.map(|x| stats.standardize(OutputDim::Speed, x)))
            .collect();
        Dataset { points: self.points.clone(), flow, speed, units: self.units }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let points = rows.iter().map(|&r| self.points[r]).collect();
        let flow = rows.iter().map(|&r| self.flow[r]).collect();
        let speed = rows.iter().map(|&r| self.speed[r]).collect();
        Dataset { points, flow, speed, units: self.units }
    }
}

/// Per-dimension standardization statistics (mean, standard deviation).
/// Density uses the identity transform: its GP works in physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl StandardStats {
    pub fn identity() -> Self {
        StandardStats { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Fits mean and population standard deviation of each observed output
    /// column. Unobserved dimensions (always density) keep the identity
    /// transform. A constant observed column cannot be standardized.
    pub fn fit(data: &Dataset) -> Result<Self, DataError> {
        let mut stats = StandardStats::identity();
        for dim in [OutputDim::Flow, OutputDim::Speed] {
            let (_, values) = data.observed(dim);
            if values.is_empty() {
                continue;
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(DataError::ZeroVariance);
            }
            let j = dim.index();
            stats.mean[j] = mean;
            stats.std[j] = var.sqrt();
        }
        Ok(stats)
    }

    pub fn standardize(&self, dim: OutputDim, value: f64) -> f64 {
        let j = dim.index();
        (value - self.mean[j]) / self.std[j]
    }

    pub fn destandardize(&self, dim: OutputDim, value: f64) -> f64 {
        let j = dim.index();
        self.mean[j] + self.std[j] * value
    }

    /// Rescale a variance from standardized space back to physical units.
    pub fn destandardize_var(&self, dim: OutputDim, var: f64) -> f64 {
        let s = self.std[dim.index()];
        var * s * s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_constants_are_exact() {
        let u = UnitSpec { flow: FlowUnit::VehPer5Min, speed: SpeedUnit::MilesPerHour };
        assert_eq!(u.flow_to_internal(400.0), 4800.0);
        assert_eq!(u.speed_to_internal(1.0), 1.609344);
        assert_eq!(u.speed_to_internal(65.0), 104.60736);
    }

    #[test]
    fn duplicate_points_rejected() {
        let pts = vec![GridPoint::new(0, 0), GridPoint::new(0, 0)];
        let err = Dataset::dense(pts, vec![1.0, 2.0], vec![3.0, 4.0], UnitSpec::internal());
        assert!(matches!(err, Err(DataError::DuplicatePoint(0, 0))));
    }

    #[test]
    fn observed_skips_masked_rows() {
        let pts = vec![GridPoint::new(0, 0), GridPoint::new(0, 1), GridPoint::new(1, 0)];
        let ds = Dataset::new(
            pts,
            vec![Some(1.0), None, Some(3.0)],
            vec![Some(9.0), Some(8.0), None],
            UnitSpec::internal(),
        )
        .unwrap();
        let (xs, ys) = ds.observed(OutputDim::Flow);
        assert_eq!(xs, vec![GridPoint::new(0, 0), GridPoint::new(1, 0)]);
        assert_eq!(ys, vec![1.0, 3.0]);
        assert!(ds.observed(OutputDim::Density).1.is_empty());
    }

    #[test]
    fn standardize_round_trips() {
        let stats = StandardStats { mean: [10.0, 50.0, 0.0], std: [2.0, 5.0, 1.0] };
        let y = 13.7;
        let z = stats.standardize(OutputDim::Flow, y);
        assert!((stats.destandardize(OutputDim::Flow, z) - y).abs() < 1e-12);
    }
}

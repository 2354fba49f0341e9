//! C ABI surface for the prgp toolkit.
//!
//! Every object crosses the boundary as an opaque handle created and
//! destroyed here; every fallible call returns a [`PrgpStatus`] code and
//! stores a message retrievable with [`prgp_last_error`]. Pointers returned
//! through out-parameters are owned by the caller and must be released with
//! the matching `_free` function. All functions are safe to call from any
//! thread, but a handle must not be used concurrently from two threads.
//!
//! The generated header lives at `include/prgp.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use prgp::data::{Dataset, FlowUnit, GridPoint, OutputDim, SpeedUnit, UnitSpec};
use prgp::experiments::scenario::{gp_initial_params, lookup_estimates};
use prgp::experiments::{compute_metrics, parse_detector_csv, render_detector_csv};
use prgp::metanet::MetanetParams;
use prgp::prgp::{
    load_checkpoint, predict, save_checkpoint, train, Optimizer, PrgpModel as CoreModel,
    TrainConfig,
};

/// Status code of every fallible call. Anything but `Ok` leaves a
/// description in the per-thread buffer read by [`prgp_last_error`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrgpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument value was out of range.
    InvalidArgument = 3,
    /// Detector text could not be parsed.
    ParseFailed = 4,
    /// Training failed to produce a model.
    TrainFailed = 5,
    /// Prediction or evaluation failed.
    PredictFailed = 6,
    /// A file could not be read or written.
    IoFailed = 7,
    /// The call panicked; the handle state is unspecified.
    Panicked = 8,
}

/// Flow unit of a detector file column.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrgpFlowUnit {
    VehPerHour = 0,
    VehPerFiveMinutes = 1,
}

/// Speed unit of a detector file column.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrgpSpeedUnit {
    KmPerHour = 0,
    MilesPerHour = 1,
}

/// Opaque detector dataset handle. Rows are stored in internal units.
pub struct PrgpDataset {
    inner: Dataset,
}

/// Opaque trained-model handle.
pub struct PrgpModel {
    inner: CoreModel,
    config: TrainConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl AsRef<str>) {
    let owned = CString::new(message.as_ref().replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(owned));
}

fn fail(status: PrgpStatus, message: impl AsRef<str>) -> PrgpStatus {
    set_error(message);
    status
}

/// Copies the most recent error message of this thread into `buf` (NUL
/// terminated, truncated to `cap` bytes) and returns the full message length
/// in bytes, excluding the terminator. Returns 0 when no error is recorded.
/// Passing a null or empty buffer just reports the required length.
#[no_mangle]
pub extern "C" fn prgp_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(message) = slot.as_ref() else { return 0 };
        let bytes = message.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

fn unit_spec(flow: PrgpFlowUnit, speed: PrgpSpeedUnit) -> UnitSpec {
    UnitSpec {
        flow: match flow {
            PrgpFlowUnit::VehPerHour => FlowUnit::VehPerHour,
            PrgpFlowUnit::VehPerFiveMinutes => FlowUnit::VehPer5Min,
        },
        speed: match speed {
            PrgpSpeedUnit::KmPerHour => SpeedUnit::KmPerHour,
            PrgpSpeedUnit::MilesPerHour => SpeedUnit::MilesPerHour,
        },
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or null.
unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, PrgpStatus> {
    if ptr.is_null() {
        return Err(fail(PrgpStatus::NullPointer, format!("{name} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(PrgpStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn guard<T>(out: *mut *mut T) -> Result<(), PrgpStatus> {
    if out.is_null() {
        return Err(fail(PrgpStatus::NullPointer, "out pointer is null"));
    }
    Ok(())
}

fn shielded(op: impl FnOnce() -> PrgpStatus) -> PrgpStatus {
    match catch_unwind(AssertUnwindSafe(op)) {
        Ok(status) => status,
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic without message".into());
            fail(PrgpStatus::Panicked, message)
        }
    }
}

/// Parses detector CSV text (`segment,k,flow,speed` header) given the units
/// of its value columns. On success stores a new dataset handle in `out`.
///
/// # Safety
/// `text` must be a valid NUL-terminated string; `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn prgp_dataset_parse(
    text: *const c_char,
    flow_unit: PrgpFlowUnit,
    speed_unit: PrgpSpeedUnit,
    out: *mut *mut PrgpDataset,
) -> PrgpStatus {
    shielded(|| {
        if guard(out).is_err() {
            return PrgpStatus::NullPointer;
        }
        let text = match unsafe { read_str(text, "text") } {
            Ok(t) => t,
            Err(status) => return status,
        };
        match parse_detector_csv(text, unit_spec(flow_unit, speed_unit)) {
            Ok(data) => {
                unsafe { *out = Box::into_raw(Box::new(PrgpDataset { inner: data })) };
                PrgpStatus::Ok
            }
            Err(e) => fail(PrgpStatus::ParseFailed, e.to_string()),
        }
    })
}

/// Reads and parses a detector CSV file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn prgp_dataset_read(
    path: *const c_char,
    flow_unit: PrgpFlowUnit,
    speed_unit: PrgpSpeedUnit,
    out: *mut *mut PrgpDataset,
) -> PrgpStatus {
    shielded(|| {
        if guard(out).is_err() {
            return PrgpStatus::NullPointer;
        }
        let path = match unsafe { read_str(path, "path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(PrgpStatus::IoFailed, format!("{path}: {e}")),
        };
        match parse_detector_csv(&text, unit_spec(flow_unit, speed_unit)) {
            Ok(data) => {
                unsafe { *out = Box::into_raw(Box::new(PrgpDataset { inner: data })) };
                PrgpStatus::Ok
            }
            Err(e) => fail(PrgpStatus::ParseFailed, format!("{path}: {e}")),
        }
    })
}

/// Number of rows in a dataset; 0 for a null handle.
///
/// # Safety
/// `dataset` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn prgp_dataset_len(dataset: *const PrgpDataset) -> usize {
    if dataset.is_null() {
        return 0;
    }
    unsafe { &*dataset }.inner.len()
}

/// Reads one row. Missing values are reported as NaN. Flow is in veh/h,
/// speed in km/h.
///
/// # Safety
/// `dataset` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prgp_dataset_row(
    dataset: *const PrgpDataset,
    index: usize,
    segment: *mut usize,
    step: *mut usize,
    flow: *mut f64,
    speed: *mut f64,
) -> PrgpStatus {
    shielded(|| {
        if dataset.is_null() || segment.is_null() || step.is_null() || flow.is_null() || speed.is_null() {
            return fail(PrgpStatus::NullPointer, "null argument to prgp_dataset_row");
        }
        let data = &unsafe { &*dataset }.inner;
        if index >= data.len() {
            return fail(
                PrgpStatus::InvalidArgument,
                format!("row {index} out of bounds for {} rows", data.len()),
            );
        }
        let point = data.points()[index];
        unsafe {
            *segment = point.i;
            *step = point.k;
            *flow = data.flow()[index].unwrap_or(f64::NAN);
            *speed = data.speed()[index].unwrap_or(f64::NAN);
        }
        PrgpStatus::Ok
    })
}

/// Renders a dataset as detector CSV text in the requested units. The
/// returned string must be released with [`prgp_string_free`].
///
/// # Safety
/// `dataset` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prgp_dataset_render(
    dataset: *const PrgpDataset,
    flow_unit: PrgpFlowUnit,
    speed_unit: PrgpSpeedUnit,
    out: *mut *mut c_char,
) -> PrgpStatus {
    shielded(|| {
        if dataset.is_null() || guard(out).is_err() {
            return fail(PrgpStatus::NullPointer, "null argument to prgp_dataset_render");
        }
        let data = &unsafe { &*dataset }.inner;
        let converted = data.with_units(unit_spec(flow_unit, speed_unit));
        match render_detector_csv(&converted) {
            Ok(text) => match CString::new(text) {
                Ok(c) => {
                    unsafe { *out = c.into_raw() };
                    PrgpStatus::Ok
                }
                Err(_) => fail(PrgpStatus::InvalidArgument, "rendered text contains NUL"),
            },
            Err(e) => fail(PrgpStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must be a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn prgp_dataset_free(dataset: *mut PrgpDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `text` must be a string returned by this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn prgp_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(unsafe { CString::from_raw(text) });
    }
}

/// Trains a model on a dataset and stores the handle in `out`.
///
/// `use_physics` of 0 fits GP hyperparameters alone; nonzero also ascends
/// the physics regularizer. `data_interval_hours` is the time spacing of
/// consecutive `k` indices (0 selects five-minute data), `lanes` the lane
/// count of the corridor (0 selects 4). `iterations`, `batch`,
/// `learning_rate`, and `step_size` of 0 select the defaults (500, 10,
/// 0.01, 0.01).
///
/// # Safety
/// `dataset` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prgp_train(
    dataset: *const PrgpDataset,
    use_physics: i32,
    iterations: u32,
    batch: u32,
    learning_rate: f64,
    step_size: f64,
    data_interval_hours: f64,
    lanes: f64,
    seed: u64,
    out: *mut *mut PrgpModel,
) -> PrgpStatus {
    shielded(|| {
        if dataset.is_null() || guard(out).is_err() {
            return fail(PrgpStatus::NullPointer, "null argument to prgp_train");
        }
        let data = &unsafe { &*dataset }.inner;
        if !(data_interval_hours >= 0.0) || !(lanes >= 0.0) {
            return fail(
                PrgpStatus::InvalidArgument,
                "data_interval_hours and lanes must be nonnegative",
            );
        }
        let mut config = TrainConfig::defaults(seed);
        config.optimizer = Optimizer::Adam;
        if iterations > 0 {
            config.iterations = iterations as usize;
        }
        if batch > 0 {
            config.m = batch as usize;
        }
        if learning_rate > 0.0 {
            config.learning_rate = learning_rate;
        }
        let step = if step_size > 0.0 { step_size } else { 0.01 };
        config.phi_f = step;
        config.phi_g = if use_physics != 0 { step } else { 0.0 };
        if let Err(e) = config.validate() {
            return fail(PrgpStatus::InvalidArgument, e.to_string());
        }

        let max_segment = data.points().iter().map(|p| p.i).max().unwrap_or(0);
        let n_segments = (max_segment + 1).max(3);
        let mut lattice = MetanetParams::with_uniform_geometry(
            n_segments,
            MetanetParams::default().seg_len[0],
            if lanes > 0.0 { lanes } else { MetanetParams::default().lanes[0] },
        );
        lattice.t_step =
            if data_interval_hours > 0.0 { data_interval_hours } else { 1.0 / 12.0 };
        let initial = gp_initial_params(lattice, data);

        match train(&initial, data, &config) {
            Ok((model, _trace)) => {
                unsafe { *out = Box::into_raw(Box::new(PrgpModel { inner: model, config })) };
                PrgpStatus::Ok
            }
            Err(e) => fail(PrgpStatus::TrainFailed, e.to_string()),
        }
    })
}

/// Saves a model checkpoint to a file.
///
/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn prgp_model_save(
    model: *const PrgpModel,
    path: *const c_char,
) -> PrgpStatus {
    shielded(|| {
        if model.is_null() {
            return fail(PrgpStatus::NullPointer, "model is null");
        }
        let path = match unsafe { read_str(path, "path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let handle = unsafe { &*model };
        match save_checkpoint(Path::new(path), &handle.inner, &handle.config) {
            Ok(()) => PrgpStatus::Ok,
            Err(e) => fail(PrgpStatus::IoFailed, format!("{path}: {e}")),
        }
    })
}

/// Loads a model checkpoint from a file and stores the handle in `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prgp_model_load(
    path: *const c_char,
    out: *mut *mut PrgpModel,
) -> PrgpStatus {
    shielded(|| {
        if guard(out).is_err() {
            return PrgpStatus::NullPointer;
        }
        let path = match unsafe { read_str(path, "path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint(Path::new(path)) {
            Ok((model, config)) => {
                unsafe { *out = Box::into_raw(Box::new(PrgpModel { inner: model, config })) };
                PrgpStatus::Ok
            }
            Err(e) => fail(PrgpStatus::IoFailed, format!("{path}: {e}")),
        }
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn prgp_model_free(model: *mut PrgpModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Predicts flow (veh/h) and speed (km/h) at `count` grid cells given by
/// parallel `segments`/`steps` arrays, conditioning the trained model on
/// `train_data`. Results are written to the caller's `out_flow` and
/// `out_speed` buffers, each with room for `count` values.
///
/// # Safety
/// All handles must be live; the four array pointers must address `count`
/// readable (respectively writable) elements.
#[no_mangle]
pub unsafe extern "C" fn prgp_predict(
    model: *const PrgpModel,
    train_data: *const PrgpDataset,
    segments: *const usize,
    steps: *const usize,
    count: usize,
    out_flow: *mut f64,
    out_speed: *mut f64,
) -> PrgpStatus {
    shielded(|| {
        if model.is_null()
            || train_data.is_null()
            || segments.is_null()
            || steps.is_null()
            || out_flow.is_null()
            || out_speed.is_null()
        {
            return fail(PrgpStatus::NullPointer, "null argument to prgp_predict");
        }
        if count == 0 {
            return PrgpStatus::Ok;
        }
        let handle = unsafe { &*model };
        let data = &unsafe { &*train_data }.inner;
        let segments = unsafe { std::slice::from_raw_parts(segments, count) };
        let steps = unsafe { std::slice::from_raw_parts(steps, count) };
        let xstar: Vec<GridPoint> = segments
            .iter()
            .zip(steps)
            .map(|(&i, &k)| GridPoint::new(i, k))
            .collect();
        match predict(&handle.inner, data, &xstar) {
            Ok(prediction) => {
                unsafe {
                    std::ptr::copy_nonoverlapping(prediction.flow.as_ptr(), out_flow, count);
                    std::ptr::copy_nonoverlapping(prediction.vel.as_ptr(), out_speed, count);
                }
                PrgpStatus::Ok
            }
            Err(e) => fail(PrgpStatus::PredictFailed, e.to_string()),
        }
    })
}

/// Scores an estimate dataset against a truth dataset on their shared cells:
/// RMSE and MAPE (percent) per dimension. A dimension with no scorable cells
/// reports NaN for both.
///
/// # Safety
/// Both handles must be live; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prgp_evaluate(
    truth: *const PrgpDataset,
    estimate: *const PrgpDataset,
    flow_rmse: *mut f64,
    flow_mape: *mut f64,
    speed_rmse: *mut f64,
    speed_mape: *mut f64,
) -> PrgpStatus {
    shielded(|| {
        if truth.is_null()
            || estimate.is_null()
            || flow_rmse.is_null()
            || flow_mape.is_null()
            || speed_rmse.is_null()
            || speed_mape.is_null()
        {
            return fail(PrgpStatus::NullPointer, "null argument to prgp_evaluate");
        }
        let truth = &unsafe { &*truth }.inner;
        let estimate = &unsafe { &*estimate }.inner;
        let estimates = match lookup_estimates(estimate, truth) {
            Ok(v) => v,
            Err(e) => return fail(PrgpStatus::PredictFailed, e.to_string()),
        };
        match compute_metrics(truth, &estimates) {
            Ok(dims) => {
                unsafe {
                    *flow_rmse = f64::NAN;
                    *flow_mape = f64::NAN;
                    *speed_rmse = f64::NAN;
                    *speed_mape = f64::NAN;
                    for d in dims {
                        match d.dim {
                            OutputDim::Flow => {
                                *flow_rmse = d.rmse;
                                *flow_mape = d.mape;
                            }
                            OutputDim::Speed => {
                                *speed_rmse = d.rmse;
                                *speed_mape = d.mape;
                            }
                            OutputDim::Density => {}
                        }
                    }
                }
                PrgpStatus::Ok
            }
            Err(e) => fail(PrgpStatus::PredictFailed, e.to_string()),
        }
    })
}

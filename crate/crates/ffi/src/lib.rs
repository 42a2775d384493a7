//! C interface to the plant, the MPC expert and the network policy.
//!
//! Every fallible function returns an [`MpcnnStatus`]. On failure a message is
//! kept per thread and can be read with [`mpcnn_last_error`]. Handles are
//! opaque; each `*_new`/`*_load`/`*_init` must be paired with its `*_free`.
//! Panics never cross the boundary; they surface as `MPCNN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mpcnn::eval::{self, EvalError};
use mpcnn::mpc::{self, MpcError};
use mpcnn::nn::{self, NnError};
use mpcnn::{plant, Bounds, Control, MlpParams, MpcConfig, State};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Malformed = 4,
    Numerical = 5,
    Panic = 6,
}

/// Network policy with the control box its outputs are clamped into.
pub struct MpcnnModel {
    params: MlpParams,
    bounds: Bounds,
}

/// MPC expert with a fixed configuration.
pub struct MpcnnMpc {
    config: MpcConfig,
}

struct Failure(MpcnnStatus, String);

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        let status = match e {
            NnError::Io { .. } => MpcnnStatus::Io,
            NnError::Malformed(_) | NnError::ShapeMismatch { .. } | NnError::VersionMismatch { .. } => {
                MpcnnStatus::Malformed
            }
            NnError::NumericalFailure { .. } => MpcnnStatus::Numerical,
            NnError::InvalidConfig(_) | NnError::EmptyTrainingSet => MpcnnStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<MpcError> for Failure {
    fn from(e: MpcError) -> Self {
        let status = match e {
            MpcError::Divergence(_) => MpcnnStatus::Numerical,
            MpcError::InvalidConfig(_) | MpcError::HorizonMismatch { .. } => MpcnnStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure(MpcnnStatus::InvalidArgument, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpcnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            MpcnnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            MpcnnStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MpcnnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_array<const N: usize>(p: *const f64, what: &str) -> Result<[f64; N], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let mut a = [0.0; N];
    a.copy_from_slice(std::slice::from_raw_parts(p, N));
    Ok(a)
}

unsafe fn write_array<const N: usize>(p: *mut f64, a: [f64; N], what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts_mut(p, N).copy_from_slice(&a);
    Ok(())
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MpcnnStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn borrow<'a, T>(h: *const T, what: &str) -> Result<&'a T, Failure> {
    h.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpcnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string.
///
/// The pointer stays valid until the next call into the library on the same
/// thread.
#[no_mangle]
pub extern "C" fn mpcnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// One RK4 step of the plant. `state` and `out_state` hold 4 values, `control`
/// holds 2. The control is applied as given, without clamping.
///
/// # Safety
/// Pointers must be null or valid for the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_plant_step(
    state: *const f64,
    control: *const f64,
    dt: f64,
    out_state: *mut f64,
) -> MpcnnStatus {
    guard(|| {
        let s = State::from_array(read_array(state, "state")?);
        let c = Control::from_array(read_array(control, "control")?);
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Failure(MpcnnStatus::InvalidArgument, "dt must be positive".into()));
        }
        let next = plant::step(&s, &c, dt).map_err(|e| Failure(MpcnnStatus::Numerical, e.to_string()))?;
        write_array(out_state, next.to_array(), "out_state")
    })
}

/// RMSE over both channels of `n` control pairs. `expert` and `predicted`
/// hold `2 * n` interleaved values `(u1, u2)`.
///
/// # Safety
/// `expert` and `predicted` must be valid for `2 * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_rmse(
    expert: *const f64,
    predicted: *const f64,
    n: usize,
    out: *mut f64,
) -> MpcnnStatus {
    guard(|| {
        if expert.is_null() || predicted.is_null() {
            return Err(null("control array"));
        }
        let pairs = |p: *const f64| -> Vec<Control> {
            std::slice::from_raw_parts(p, 2 * n).chunks_exact(2).map(|c| Control::new(c[0], c[1])).collect()
        };
        let value = eval::rmse(&pairs(expert), &pairs(predicted))?;
        write_array(out, [value], "out")
    })
}

/// Freshly initialized network for `seed`, clamped to the default control box.
///
/// # Safety
/// `out` must be null or valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_model_init(seed: u64, out: *mut *mut MpcnnModel) -> MpcnnStatus {
    guard(|| write_handle(out, MpcnnModel { params: nn::init_params(seed), bounds: Bounds::default() }))
}

/// Loads a weight file written by `mpcnn_model_save` or the `mpcnn` CLI.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_model_load(path: *const c_char, out: *mut *mut MpcnnModel) -> MpcnnStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        let params = nn::load_params(Path::new(path))?;
        write_handle(out, MpcnnModel { params, bounds: Bounds::default() })
    })
}

/// # Safety
/// `model` must be null or a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_model_save(model: *const MpcnnModel, path: *const c_char) -> MpcnnStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let path = read_str(path, "path")?;
        nn::save_params(&m.params, Path::new(path))?;
        Ok(())
    })
}

/// Clamped network output for one state. `state` holds 4 values, `out_control` 2.
///
/// # Safety
/// `model` must be null or a live handle; arrays as stated.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_model_forward(
    model: *const MpcnnModel,
    state: *const f64,
    out_control: *mut f64,
) -> MpcnnStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let s = State::from_array(read_array(state, "state")?);
        write_array(out_control, m.params.forward(&s, &m.bounds).to_array(), "out_control")
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_model_free(model: *mut MpcnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// MPC expert with the default configuration.
///
/// # Safety
/// `out` must be null or valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_mpc_new(out: *mut *mut MpcnnMpc) -> MpcnnStatus {
    guard(|| write_handle(out, MpcnnMpc { config: MpcConfig::default() }))
}

/// MPC expert from a JSON object; missing fields take their defaults.
///
/// # Safety
/// `json` must be null or a NUL-terminated string; `out` must be null or
/// valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_mpc_from_json(json: *const c_char, out: *mut *mut MpcnnMpc) -> MpcnnStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        let config: MpcConfig =
            serde_json::from_str(text).map_err(|e| Failure(MpcnnStatus::InvalidArgument, e.to_string()))?;
        config.validate()?;
        write_handle(out, MpcnnMpc { config })
    })
}

/// Cold-started solve from `state` (4 values); writes the first control (2 values).
///
/// # Safety
/// `mpc` must be null or a live handle; arrays as stated.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_mpc_solve(
    mpc: *const MpcnnMpc,
    state: *const f64,
    out_control: *mut f64,
) -> MpcnnStatus {
    guard(|| {
        let m = borrow(mpc, "mpc")?;
        let s = State::from_array(read_array(state, "state")?);
        let solution = mpc::solve(&s, &m.config, None)?;
        write_array(out_control, solution.first_control.to_array(), "out_control")
    })
}

/// # Safety
/// `mpc` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpcnn_mpc_free(mpc: *mut MpcnnMpc) {
    if !mpc.is_null() {
        drop(Box::from_raw(mpc));
    }
}


//! C ABI for the opnet engine.
//!
//! Networks load from `OPN1` checkpoint files into opaque handles; scoring
//! functions fill caller-provided buffers. Every function returns an
//! [`OpnetStatus`] code; on failure a human-readable message is retrievable
//! with [`opnet_last_error_message`] until the next call on the same thread.
//!
//! The generated C header lives at `include/opnet.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use opnet::network::SplitNetwork;
use opnet::tensor::Tensor;
use opnet::uncertainty::{
    apply_behavior, confidence_interval, predictive_stats, sample_predictions, BehaviorMode,
    ConfidenceConfig,
};
use opnet::{checkpoint, Error};

/// Status codes returned by every FFI function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpnetStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// A path or string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// File could not be read.
    Io = 3,
    /// File exists but is not a valid checkpoint.
    BadFormat = 4,
    /// A numeric argument or buffer length is out of range.
    InvalidArgument = 5,
    /// Input length does not match the network.
    ShapeMismatch = 6,
    /// Any other engine failure.
    Internal = 7,
}

/// Behavior selector mirrored across the C boundary.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpnetMode {
    Plain = 0,
    Mean = 1,
    Optimistic = 2,
    Pessimistic = 3,
}

impl From<OpnetMode> for BehaviorMode {
    fn from(mode: OpnetMode) -> Self {
        match mode {
            OpnetMode::Plain => BehaviorMode::Plain,
            OpnetMode::Mean => BehaviorMode::Mean,
            OpnetMode::Optimistic => BehaviorMode::Optimistic,
            OpnetMode::Pessimistic => BehaviorMode::Pessimistic,
        }
    }
}

/// Opaque network handle.
pub struct OpnetNetwork {
    net: SplitNetwork,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error").expect("static string"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(status: OpnetStatus, message: impl Into<String>) -> OpnetStatus {
    set_error(message.into());
    status
}

fn fail_with(e: Error) -> OpnetStatus {
    let status = match &e {
        Error::Io { .. } => OpnetStatus::Io,
        Error::Format { .. } => OpnetStatus::BadFormat,
        Error::ShapeMismatch { .. } | Error::LayerShape { .. } => OpnetStatus::ShapeMismatch,
        Error::Argument(_) | Error::Config(_) => OpnetStatus::InvalidArgument,
        _ => OpnetStatus::Internal,
    };
    fail(status, e.to_string())
}

/// Last error message for the current thread, or null when the previous call
/// succeeded. The pointer stays valid until the next failing call on this
/// thread; do not free it.
#[no_mangle]
pub extern "C" fn opnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |msg| msg.as_ptr())
    })
}

/// Loads a checkpoint into a fresh handle.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn opnet_network_load(
    path: *const c_char,
    out: *mut *mut OpnetNetwork,
) -> OpnetStatus {
    if path.is_null() || out.is_null() {
        return fail(OpnetStatus::NullArgument, "path and out must be non-null");
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return fail(OpnetStatus::InvalidUtf8, "path is not valid UTF-8");
    };
    match checkpoint::load(Path::new(path)) {
        Ok(net) => {
            *out = Box::into_raw(Box::new(OpnetNetwork { net }));
            OpnetStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Frees a handle returned by [`opnet_network_load`]. Null is a no-op.
///
/// # Safety
/// `net` must be a pointer from `opnet_network_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opnet_network_free(net: *mut OpnetNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of input values the network expects (flattened length).
///
/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn opnet_network_input_len(
    net: *const OpnetNetwork,
    out: *mut usize,
) -> OpnetStatus {
    let Some(handle) = net.as_ref() else {
        return fail(OpnetStatus::NullArgument, "net must be non-null");
    };
    if out.is_null() {
        return fail(OpnetStatus::NullArgument, "out must be non-null");
    }
    *out = handle.net.input_shape().iter().product();
    OpnetStatus::Ok
}

/// Number of class scores the network produces.
///
/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn opnet_network_output_len(
    net: *const OpnetNetwork,
    out: *mut usize,
) -> OpnetStatus {
    let Some(handle) = net.as_ref() else {
        return fail(OpnetStatus::NullArgument, "net must be non-null");
    };
    if out.is_null() {
        return fail(OpnetStatus::NullArgument, "out must be non-null");
    }
    match handle.net.output_len() {
        Ok(len) => {
            *out = len;
            OpnetStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

unsafe fn input_tensor(
    handle: &OpnetNetwork,
    input: *const f64,
    input_len: usize,
) -> Result<Tensor, OpnetStatus> {
    let expected: usize = handle.net.input_shape().iter().product();
    if input.is_null() {
        return Err(fail(OpnetStatus::NullArgument, "input must be non-null"));
    }
    if input_len != expected {
        return Err(fail(
            OpnetStatus::ShapeMismatch,
            format!("input has {input_len} values, network expects {expected}"),
        ));
    }
    let data = std::slice::from_raw_parts(input, input_len).to_vec();
    Tensor::new(handle.net.input_shape().to_vec(), data).map_err(fail_with)
}

unsafe fn write_output(scores: &Tensor, out: *mut f64, out_len: usize) -> OpnetStatus {
    if out.is_null() {
        return fail(OpnetStatus::NullArgument, "out buffer must be non-null");
    }
    if out_len != scores.len() {
        return fail(
            OpnetStatus::ShapeMismatch,
            format!("out buffer holds {out_len} values, need {}", scores.len()),
        );
    }
    std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(scores.data());
    OpnetStatus::Ok
}

/// Single deterministic forward pass (dropout disabled).
///
/// # Safety
/// `net` must be a live handle; `input` must hold `input_len` doubles and
/// `out` room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn opnet_forward_plain(
    net: *const OpnetNetwork,
    input: *const f64,
    input_len: usize,
    out: *mut f64,
    out_len: usize,
) -> OpnetStatus {
    let Some(handle) = net.as_ref() else {
        return fail(OpnetStatus::NullArgument, "net must be non-null");
    };
    let x = match input_tensor(handle, input, input_len) {
        Ok(x) => x,
        Err(status) => return status,
    };
    match handle.net.forward_deterministic(&x) {
        Ok(scores) => write_output(&scores, out, out_len),
        Err(e) => fail_with(e),
    }
}

/// Behavior-adjusted class scores: `t` stochastic passes at dropout rate
/// `p_drop` seeded by `seed`, reduced per `mode` at confidence level
/// `1 - alpha`. `Plain` ignores `t`, `p_drop` and `alpha`.
///
/// # Safety
/// Pointer contracts as in [`opnet_forward_plain`].
#[no_mangle]
pub unsafe extern "C" fn opnet_predict(
    net: *const OpnetNetwork,
    input: *const f64,
    input_len: usize,
    mode: OpnetMode,
    t: u32,
    p_drop: f64,
    alpha: f64,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> OpnetStatus {
    let Some(handle) = net.as_ref() else {
        return fail(OpnetStatus::NullArgument, "net must be non-null");
    };
    let x = match input_tensor(handle, input, input_len) {
        Ok(x) => x,
        Err(status) => return status,
    };
    let result = (|| -> opnet::Result<Tensor> {
        match BehaviorMode::from(mode) {
            BehaviorMode::Plain => handle.net.forward_deterministic(&x),
            behavior => {
                let samples = sample_predictions(&handle.net, &x, t as usize, p_drop, seed)?;
                let stats = predictive_stats(&samples, None)?;
                let conf = ConfidenceConfig::new(alpha)?;
                apply_behavior(Some(&stats), &conf, behavior, None)
            }
        }
    })();
    match result {
        Ok(scores) => write_output(&scores, out, out_len),
        Err(e) => fail_with(e),
    }
}

/// Full per-class sampling statistics: mean, variance and the confidence
/// interval bounds. Each buffer must hold one double per output class.
///
/// # Safety
/// Pointer contracts as in [`opnet_forward_plain`]; all four output buffers
/// must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn opnet_predict_stats(
    net: *const OpnetNetwork,
    input: *const f64,
    input_len: usize,
    t: u32,
    p_drop: f64,
    alpha: f64,
    seed: u64,
    out_mean: *mut f64,
    out_variance: *mut f64,
    out_lower: *mut f64,
    out_upper: *mut f64,
    out_len: usize,
) -> OpnetStatus {
    let Some(handle) = net.as_ref() else {
        return fail(OpnetStatus::NullArgument, "net must be non-null");
    };
    let x = match input_tensor(handle, input, input_len) {
        Ok(x) => x,
        Err(status) => return status,
    };
    let result = (|| -> opnet::Result<(Tensor, Tensor, Tensor, Tensor)> {
        let samples = sample_predictions(&handle.net, &x, t as usize, p_drop, seed)?;
        let stats = predictive_stats(&samples, None)?;
        let conf = ConfidenceConfig::new(alpha)?;
        let (lower, upper) = confidence_interval(&stats, &conf)?;
        Ok((stats.mean, stats.variance, lower, upper))
    })();
    let (mean, variance, lower, upper) = match result {
        Ok(v) => v,
        Err(e) => return fail_with(e),
    };
    for (tensor, buffer) in [
        (&mean, out_mean),
        (&variance, out_variance),
        (&lower, out_lower),
        (&upper, out_upper),
    ] {
        let status = write_output(tensor, buffer, out_len);
        if status != OpnetStatus::Ok {
            return status;
        }
    }
    OpnetStatus::Ok
}

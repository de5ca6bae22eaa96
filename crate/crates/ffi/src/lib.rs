//! C ABI over the skipdepth runtime.
//!
//! Every function returns a [`SkipdepthStatus`]. On anything but
//! `SKIPDEPTH_STATUS_OK` a human-readable message is stored per thread and
//! can be read with [`skipdepth_last_error_message`]. Handles are opaque and
//! must be released with the matching `*_free` function. A session copies the
//! model and skip modules it was created from, so those handles may be freed
//! while the session lives.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use skipdepth::checkpoint;
use skipdepth::policy::PolicyModel;
use skipdepth::runtime::{continuity, DeltaLMode, Mode, RolloutConfig, Session, SkipModules};
use skipdepth::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipdepthStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    Numeric = 6,
    Internal = 7,
}

/// Opaque trained policy.
pub struct SkipdepthModel {
    inner: PolicyModel,
}

/// Opaque adapters and controllers with their static layer set.
pub struct SkipdepthSkipModules {
    inner: SkipModules,
}

/// Opaque per-episode inference state.
pub struct SkipdepthSession {
    model: PolicyModel,
    mods: SkipModules,
    session: Session,
}

/// Guidance parameters of a session.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipdepthRuntimeConfig {
    /// Number of action differences in the continuity window.
    pub k: u32,
    /// Allow-point dead band.
    pub eta: f64,
    /// Verification threshold; a negative value reuses `eta`.
    pub eta_verify: f64,
    /// Constant allow-point stride, or 0 for the adaptive stride.
    pub delta_l_const: u32,
    /// Per-layer bypass probability in random-skip mode.
    pub random_prob: f64,
}

/// What one session step did.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SkipdepthStepInfo {
    pub executed_layers: u32,
    pub controllers_evaluated: u32,
    pub skipped_segments: u32,
    pub flops: u64,
    pub continuity: f64,
    /// 1 when the step was re-predicted without skipping.
    pub verified: u8,
    /// 1 while the continuity window is still filling.
    pub warmup: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> SkipdepthStatus {
    match err {
        Error::Io(_) | Error::MissingArtifact { .. } => SkipdepthStatus::Io,
        Error::Serde(_) => SkipdepthStatus::Parse,
        Error::Shape(_) => SkipdepthStatus::Shape,
        Error::Numeric(_) | Error::Diverged { .. } | Error::Degenerate(_) => SkipdepthStatus::Numeric,
        Error::Config { .. } | Error::Usage(_) | Error::Env(_) => SkipdepthStatus::InvalidArgument,
        Error::Integrity(_) => SkipdepthStatus::Internal,
    }
}

type Outcome = Result<(), (SkipdepthStatus, String)>;

fn fail<T>(status: SkipdepthStatus, msg: impl Into<String>) -> Result<T, (SkipdepthStatus, String)> {
    Err((status, msg.into()))
}

fn lift<T>(r: skipdepth::Result<T>) -> Result<T, (SkipdepthStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

/// Run `body`, turning errors and panics into a status plus last-error text.
fn guard(body: impl FnOnce() -> Outcome) -> SkipdepthStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            clear_error();
            SkipdepthStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SkipdepthStatus::Internal
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, (SkipdepthStatus, String)> {
    if path.is_null() {
        return fail(SkipdepthStatus::NullPointer, "path is null");
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(SkipdepthStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

unsafe fn slice_arg<'a>(data: *const f64, len: usize, what: &str) -> Result<&'a [f64], (SkipdepthStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return fail(SkipdepthStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn write_action(action: &[f64], out: *mut f64, out_len: usize) -> Outcome {
    if out.is_null() {
        return fail(SkipdepthStatus::NullPointer, "action output is null");
    }
    if out_len < action.len() {
        return fail(
            SkipdepthStatus::Shape,
            format!("action buffer holds {out_len} values, {} needed", action.len()),
        );
    }
    std::slice::from_raw_parts_mut(out, action.len()).copy_from_slice(action);
    Ok(())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn skipdepth_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn skipdepth_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_model_load(path: *const c_char, out: *mut *mut SkipdepthModel) -> SkipdepthStatus {
    guard(|| {
        if out.is_null() {
            return fail(SkipdepthStatus::NullPointer, "output handle pointer is null");
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let inner = lift(checkpoint::load_model(&path))?;
        *out = Box::into_raw(Box::new(SkipdepthModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`skipdepth_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_model_free(model: *mut SkipdepthModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Observation, instruction and action widths and the block count.
///
/// # Safety
/// `model` must be a live handle; the output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_model_dims(
    model: *const SkipdepthModel,
    obs_dim: *mut usize,
    instr_dim: *mut usize,
    action_dim: *mut usize,
    depth: *mut usize,
) -> SkipdepthStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SkipdepthStatus::NullPointer, "model handle is null");
        };
        let c = &m.inner.config;
        for (p, v) in [(obs_dim, c.obs_dim), (instr_dim, c.instr_dim), (action_dim, c.action_dim), (depth, c.depth)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Full-depth forward pass; writes `action_dim` unit-scale values.
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_model_forward(
    model: *const SkipdepthModel,
    obs: *const f64,
    obs_len: usize,
    instr: *const f64,
    instr_len: usize,
    action_out: *mut f64,
    action_len: usize,
) -> SkipdepthStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SkipdepthStatus::NullPointer, "model handle is null");
        };
        let obs = slice_arg(obs, obs_len, "obs")?;
        let instr = slice_arg(instr, instr_len, "instr")?;
        let action = lift(m.inner.forward(obs, instr))?;
        write_action(&action, action_out, action_len)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_skip_load(path: *const c_char, out: *mut *mut SkipdepthSkipModules) -> SkipdepthStatus {
    guard(|| {
        if out.is_null() {
            return fail(SkipdepthStatus::NullPointer, "output handle pointer is null");
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let inner = lift(checkpoint::load_skip(&path))?;
        *out = Box::into_raw(Box::new(SkipdepthSkipModules { inner }));
        Ok(())
    })
}

/// # Safety
/// `mods` must come from [`skipdepth_skip_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_skip_free(mods: *mut SkipdepthSkipModules) {
    if !mods.is_null() {
        drop(Box::from_raw(mods));
    }
}

/// Number of static layers; their ids go to `layers_out` when it is non-null
/// and holds at least that many entries.
///
/// # Safety
/// `count` must be writable; `layers_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_skip_static_layers(
    mods: *const SkipdepthSkipModules,
    layers_out: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> SkipdepthStatus {
    guard(|| {
        let Some(m) = mods.as_ref() else {
            return fail(SkipdepthStatus::NullPointer, "skip module handle is null");
        };
        if count.is_null() {
            return fail(SkipdepthStatus::NullPointer, "count pointer is null");
        }
        let layers = m.inner.static_set.layers();
        *count = layers.len();
        if !layers_out.is_null() {
            if capacity < layers.len() {
                return fail(SkipdepthStatus::Shape, format!("buffer holds {capacity} ids, {} needed", layers.len()));
            }
            std::slice::from_raw_parts_mut(layers_out, layers.len()).copy_from_slice(layers);
        }
        Ok(())
    })
}

/// Defaults used by the benchmark pipeline.
#[no_mangle]
pub extern "C" fn skipdepth_runtime_config_default() -> SkipdepthRuntimeConfig {
    let d = RolloutConfig::default();
    SkipdepthRuntimeConfig {
        k: d.k as u32,
        eta: d.eta,
        eta_verify: d.eta_verify.unwrap_or(-1.0),
        delta_l_const: match d.delta_l {
            DeltaLMode::Adaptive => 0,
            DeltaLMode::Const(n) => n as u32,
        },
        random_prob: d.random_prob,
    }
}

fn rollout_config(c: &SkipdepthRuntimeConfig) -> RolloutConfig {
    RolloutConfig {
        k: c.k as usize,
        eta: c.eta,
        eta_verify: (c.eta_verify >= 0.0).then_some(c.eta_verify),
        delta_l: match c.delta_l_const {
            0 => DeltaLMode::Adaptive,
            n => DeltaLMode::Const(n as usize),
        },
        random_prob: c.random_prob,
    }
}

/// Start an episode. `mode` is one of `full`, `dysl`, `controllers-only` or
/// `random-skip`; `config` may be null for the defaults.
///
/// # Safety
/// Handles must be live, `mode` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_session_new(
    model: *const SkipdepthModel,
    mods: *const SkipdepthSkipModules,
    mode: *const c_char,
    config: *const SkipdepthRuntimeConfig,
    seed: u64,
    out: *mut *mut SkipdepthSession,
) -> SkipdepthStatus {
    guard(|| {
        if out.is_null() {
            return fail(SkipdepthStatus::NullPointer, "output handle pointer is null");
        }
        *out = ptr::null_mut();
        let (Some(model), Some(mods)) = (model.as_ref(), mods.as_ref()) else {
            return fail(SkipdepthStatus::NullPointer, "model or skip module handle is null");
        };
        if mode.is_null() {
            return fail(SkipdepthStatus::NullPointer, "mode is null");
        }
        let Ok(mode_name) = CStr::from_ptr(mode).to_str() else {
            return fail(SkipdepthStatus::InvalidArgument, "mode is not valid UTF-8");
        };
        let mode: Mode = lift(mode_name.parse())?;
        if mods.inner.static_set.depth() != model.inner.depth() {
            return fail(
                SkipdepthStatus::Shape,
                format!(
                    "skip modules built for depth {}, model has {}",
                    mods.inner.static_set.depth(),
                    model.inner.depth()
                ),
            );
        }
        let cfg = config.as_ref().map_or_else(RolloutConfig::default, rollout_config);
        let session = lift(Session::new(&mods.inner, &cfg, mode, seed))?;
        *out = Box::into_raw(Box::new(SkipdepthSession {
            model: model.inner.clone(),
            mods: mods.inner.clone(),
            session,
        }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`skipdepth_session_new`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_session_free(session: *mut SkipdepthSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Predict one action and advance the guidance state. `info` may be null.
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_session_step(
    session: *mut SkipdepthSession,
    obs: *const f64,
    obs_len: usize,
    instr: *const f64,
    instr_len: usize,
    action_out: *mut f64,
    action_len: usize,
    info: *mut SkipdepthStepInfo,
) -> SkipdepthStatus {
    guard(|| {
        let Some(s) = session.as_mut() else {
            return fail(SkipdepthStatus::NullPointer, "session handle is null");
        };
        let obs = slice_arg(obs, obs_len, "obs")?;
        let instr = slice_arg(instr, instr_len, "instr")?;
        if action_out.is_null() {
            return fail(SkipdepthStatus::NullPointer, "action output is null");
        }
        let out = lift(s.session.step(&s.model, &s.mods, obs, instr))?;
        write_action(&out.action, action_out, action_len)?;
        if let Some(info) = info.as_mut() {
            *info = SkipdepthStepInfo {
                executed_layers: out.trace.executed.len() as u32,
                controllers_evaluated: out.trace.controllers.len() as u32,
                skipped_segments: out.trace.skipped_segments.len() as u32,
                flops: out.trace.flops,
                continuity: out.c_t,
                verified: out.trace.verified as u8,
                warmup: out.warmup as u8,
            };
        }
        Ok(())
    })
}

/// Current allow points, one per segment.
///
/// # Safety
/// `count` must be writable; `points_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_session_allow_points(
    session: *const SkipdepthSession,
    points_out: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> SkipdepthStatus {
    guard(|| {
        let Some(s) = session.as_ref() else {
            return fail(SkipdepthStatus::NullPointer, "session handle is null");
        };
        if count.is_null() {
            return fail(SkipdepthStatus::NullPointer, "count pointer is null");
        }
        let points = s.session.guidance().allow.points();
        *count = points.len();
        if !points_out.is_null() {
            if capacity < points.len() {
                return fail(SkipdepthStatus::Shape, format!("buffer holds {capacity} points, {} needed", points.len()));
            }
            std::slice::from_raw_parts_mut(points_out, points.len()).copy_from_slice(points);
        }
        Ok(())
    })
}

/// Continuity of a window of `n_actions` row-major actions of width
/// `action_dim`, over its last `k` differences. `warmup` (nullable) is set to
/// 1 when fewer than `k` differences were available.
///
/// # Safety
/// `actions` must hold `n_actions * action_dim` values.
#[no_mangle]
pub unsafe extern "C" fn skipdepth_continuity(
    actions: *const f64,
    n_actions: usize,
    action_dim: usize,
    k: usize,
    value_out: *mut f64,
    warmup: *mut u8,
) -> SkipdepthStatus {
    guard(|| {
        if value_out.is_null() {
            return fail(SkipdepthStatus::NullPointer, "value output is null");
        }
        if action_dim == 0 || k == 0 {
            return fail(SkipdepthStatus::InvalidArgument, "action_dim and k must be positive");
        }
        let Some(total) = n_actions.checked_mul(action_dim) else {
            return fail(SkipdepthStatus::InvalidArgument, "window size overflows");
        };
        let flat = slice_arg(actions, total, "actions")?;
        let window: Vec<Vec<f64>> = flat.chunks(action_dim).map(<[f64]>::to_vec).collect();
        let c = continuity(&window, k);
        *value_out = c.value;
        if !warmup.is_null() {
            *warmup = c.warmup as u8;
        }
        Ok(())
    })
}

//! C ABI over `mpl-core`.
//!
//! Objects cross the boundary as opaque heap handles (`MplModel`, `MplEnv`)
//! created by `*_new`/`*_load` and released with `*_free`. Every fallible
//! call returns an [`MplStatus`]; on failure [`mpl_last_error`] describes it.
//! Panics are caught and reported as [`MplStatus::Panic`].
//!
//! Units: environment calls take world units; `mpl_optimize_input` works in
//! the model's normalized units (positions / world size, velocities / max
//! speed).

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mpl_core::env::{self, EnvConfig, EnvState, Status};
use mpl_core::executor::{self, Terminal};
use mpl_core::model::{self, TrainedModel};
use mpl_core::optimizer::{self, Condition, OptConfig, References};
use mpl_core::Error;

pub const MPL_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MplStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptModel = 4,
    NotRunning = 5,
    Numeric = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MplCondition {
    Nobp = 0,
    Bpu = 1,
    Bpp = 2,
    Bpup = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MplEnvStatus {
    Running = 0,
    ReachedGoal = 1,
    Done = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MplTerminal {
    ReachedGoal = 0,
    TimedOut = 1,
    Aborted = 2,
}

/// Result of one closed-loop episode.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MplEpisodeSummary {
    pub terminal: MplTerminal,
    pub collided_ever: bool,
    pub steps: u64,
}

/// Result of one input optimization (normalized units).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MplOptResult {
    /// Predicted control to execute (normalized).
    pub u: [f64; 2],
    /// Optimized input the prediction was made from.
    pub input: [f64; 2],
    pub p_pred: f64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub updates: u32,
}

/// Trained dynamics model.
pub struct MplModel {
    inner: TrainedModel,
}

/// One environment episode.
pub struct MplEnv {
    cfg: EnvConfig,
    state: EnvState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> MplStatus {
    match err {
        Error::Io { .. } => MplStatus::Io,
        Error::Checksum | Error::Version { .. } | Error::Shape(_) => MplStatus::CorruptModel,
        Error::NotRunning => MplStatus::NotRunning,
        Error::NonFiniteLoss { .. } | Error::ModelCorrupt => MplStatus::Numeric,
        _ => MplStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status and last-error text.
fn guard(f: impl FnOnce() -> Result<(), (MplStatus, String)>) -> MplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MplStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            MplStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (MplStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (MplStatus, String) {
    (MplStatus::NullPointer, format!("{name} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, (MplStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MplStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn env_config(json: *const c_char, seed: u64) -> Result<EnvConfig, (MplStatus, String)> {
    let mut cfg = if json.is_null() {
        EnvConfig::default()
    } else {
        serde_json::from_str(read_str(json, "config_json")?)
            .map_err(|e| (MplStatus::InvalidArgument, format!("config_json: {e}")))?
    };
    cfg.seed = seed;
    cfg.validate().map_err(core_err)?;
    Ok(cfg)
}

fn condition(c: MplCondition) -> Condition {
    match c {
        MplCondition::Nobp => Condition::NoBP,
        MplCondition::Bpu => Condition::BPu,
        MplCondition::Bpp => Condition::BPp,
        MplCondition::Bpup => Condition::BPuP,
    }
}

/// ABI version of this library.
#[no_mangle]
pub extern "C" fn mpl_abi_version() -> u32 {
    MPL_ABI_VERSION
}

/// Message for the last failed call on this thread. Valid until the next
/// failing call on the same thread; empty if none failed.
#[no_mangle]
pub extern "C" fn mpl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model file into `*out`.
#[no_mangle]
pub unsafe extern "C" fn mpl_model_load(path: *const c_char, out: *mut *mut MplModel) -> MplStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let inner = model::load_model(Path::new(path)).map_err(core_err)?;
        *out = Box::into_raw(Box::new(MplModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mpl_model_free(model: *mut MplModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mpl_model_hidden_dim(model: *const MplModel, out: *mut u32) -> MplStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.params.hidden_dim() as u32;
        Ok(())
    })
}

/// Creates an environment. `config_json` may be null for defaults; `seed`
/// always overrides the configured seed.
#[no_mangle]
pub unsafe extern "C" fn mpl_env_new(config_json: *const c_char, seed: u64, out: *mut *mut MplEnv) -> MplStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = env_config(config_json, seed)?;
        let state = env::reset(&cfg);
        *out = Box::into_raw(Box::new(MplEnv { cfg, state }));
        Ok(())
    })
}

/// Releases an environment. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mpl_env_free(env: *mut MplEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Writes `(agent_x, agent_y, obstacle_x, obstacle_y)` into `out[4]`.
#[no_mangle]
pub unsafe extern "C" fn mpl_env_observe(env: *const MplEnv, out: *mut f64) -> MplStatus {
    guard(|| {
        let e = env.as_ref().ok_or_else(|| null("env"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let obs = e.state.observation();
        ptr::copy_nonoverlapping(obs.as_ptr(), out, obs.len());
        Ok(())
    })
}

/// Applies velocity `(ux, uy)` for one step. `status` and `collided_ever`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn mpl_env_step(
    env: *mut MplEnv,
    ux: f64,
    uy: f64,
    status: *mut MplEnvStatus,
    collided_ever: *mut bool,
) -> MplStatus {
    guard(|| {
        let e = env.as_mut().ok_or_else(|| null("env"))?;
        if !(ux.is_finite() && uy.is_finite()) {
            return Err((MplStatus::InvalidArgument, "velocity must be finite".into()));
        }
        e.state = env::step(&e.state, [ux, uy], &e.cfg).map_err(core_err)?;
        if let Some(s) = status.as_mut() {
            *s = match e.state.status {
                Status::Running => MplEnvStatus::Running,
                Status::ReachedGoal => MplEnvStatus::ReachedGoal,
                Status::Done => MplEnvStatus::Done,
            };
        }
        if let Some(c) = collided_ever.as_mut() {
            *c = e.state.collided_ever;
        }
        Ok(())
    })
}

/// Straight-line velocity toward the goal for the current state.
#[no_mangle]
pub unsafe extern "C" fn mpl_env_nominal_input(env: *const MplEnv, out: *mut f64) -> MplStatus {
    guard(|| {
        let e = env.as_ref().ok_or_else(|| null("env"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let u = env::nominal_input(&e.state, &e.cfg);
        ptr::copy_nonoverlapping(u.as_ptr(), out, 2);
        Ok(())
    })
}

/// Optimizes one input from a fresh recurrent state. `s_t[4]`, `u_init[2]`
/// and `u_ref[2]` are normalized; `u_ref` may be null.
#[no_mangle]
pub unsafe extern "C" fn mpl_optimize_input(
    model: *const MplModel,
    cond: MplCondition,
    s_t: *const f64,
    u_init: *const f64,
    p_init: f64,
    u_ref: *const f64,
    p_ref: f64,
    out: *mut MplOptResult,
) -> MplStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if s_t.is_null() || u_init.is_null() {
            return Err(null("s_t/u_init"));
        }
        let s: [f64; 4] = ptr::read(s_t.cast());
        let u0: [f64; 2] = ptr::read(u_init.cast());
        let refs = References {
            s_ref: None,
            u_ref: (!u_ref.is_null()).then(|| ptr::read(u_ref.cast())),
            p_ref,
        };
        let cfg = OptConfig::default().with_condition(condition(cond));
        let r = optimizer::optimize_input(&m.inner, &m.inner.initial_state(), s, u0, p_init, &refs, &cfg)
            .map_err(core_err)?;
        *out = MplOptResult {
            u: r.u,
            input: r.input,
            p_pred: r.p_pred,
            first_loss: r.first_loss,
            final_loss: r.final_loss,
            updates: r.updates as u32,
        };
        Ok(())
    })
}

/// Runs one closed-loop episode. A negative `abort_threshold` disables
/// aborting.
#[no_mangle]
pub unsafe extern "C" fn mpl_run_episode(
    model: *const MplModel,
    env_config_json: *const c_char,
    cond: MplCondition,
    seed: u64,
    abort_threshold: f64,
    out: *mut MplEpisodeSummary,
) -> MplStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let env_cfg = env_config(env_config_json, seed)?;
        let mut opt = OptConfig::default().with_condition(condition(cond));
        if abort_threshold >= 0.0 {
            opt.abort_enabled = true;
            opt.abort_threshold = abort_threshold;
        }
        opt.validate().map_err(core_err)?;
        let rec = executor::run_episode(&m.inner, &env_cfg, &opt, seed).map_err(core_err)?;
        *out = MplEpisodeSummary {
            terminal: match rec.terminal {
                Terminal::ReachedGoal => MplTerminal::ReachedGoal,
                Terminal::TimedOut => MplTerminal::TimedOut,
                Terminal::Aborted => MplTerminal::Aborted,
            },
            collided_ever: rec.collided_ever,
            steps: rec.env_t as u64,
        };
        Ok(())
    })
}

//! C ABI over the simulator.
//!
//! Every function returns a [`DmStatus`]; results come back through out
//! pointers. Strings handed out are NUL-terminated UTF-8 and must be
//! released with `dm_string_free`. On failure a message is kept per thread
//! and can be read with `dm_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use datamarket::broker::{compute_price, PriceError};
use datamarket::config::{ConfigError, ScenarioConfig};
use datamarket::metrics::CostReport;
use datamarket::privacy::{monte_carlo, Attack};
use datamarket::sim::{SimError, Simulation};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    UnknownAttack = 4,
    InvalidInput = 5,
    Overflow = 6,
    /// The run stopped because a protocol invariant failed.
    InvariantViolation = 7,
    SetupFailure = 8,
    /// `dm_simulation_run` was called twice on one handle.
    AlreadyRun = 9,
    Panic = 99,
}

/// Opaque simulation handle.
pub struct DmSimulation {
    sim: Simulation,
    ran: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(DmStatus, String);

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        Fail(DmStatus::InvalidConfig, e.to_string())
    }
}

impl From<SimError> for Fail {
    fn from(e: SimError) -> Self {
        let status = match e {
            SimError::InvariantViolation { .. } => DmStatus::InvariantViolation,
            SimError::Setup(_) => DmStatus::SetupFailure,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DmStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Fail(DmStatus::InvalidUtf8, "output contains NUL".into()))?;
    out.write(c.into_raw());
    Ok(())
}

unsafe fn handle<'a>(sim: *const DmSimulation) -> Result<&'a DmSimulation, Fail> {
    sim.as_ref().ok_or_else(|| null("simulation"))
}

/// Builds a simulation from a JSON scenario. `config_json` may be `"{}"`
/// for all defaults.
///
/// # Safety
/// `config_json` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dm_simulation_new(config_json: *const c_char, out: *mut *mut DmSimulation) -> DmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ScenarioConfig::from_json(str_arg(config_json, "config_json")?)?;
        let sim = Simulation::new(cfg)?;
        out.write(Box::into_raw(Box::new(DmSimulation { sim, ran: false })));
        Ok(())
    })
}

/// Runs to quiescence or `max_epochs`; writes the epoch count to
/// `out_epochs` if it is not null. The handle stays usable for the
/// artifact getters even after an invariant failure.
///
/// # Safety
/// `sim` must come from `dm_simulation_new` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn dm_simulation_run(sim: *mut DmSimulation, out_epochs: *mut u64) -> DmStatus {
    guard(|| {
        let h = sim.as_mut().ok_or_else(|| null("simulation"))?;
        if h.ran {
            return Err(Fail(DmStatus::AlreadyRun, "simulation already ran".into()));
        }
        h.ran = true;
        let outcome = h.sim.run()?;
        if !out_epochs.is_null() {
            out_epochs.write(outcome.epochs);
        }
        Ok(())
    })
}

/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dm_simulation_settled_count(sim: *const DmSimulation, out: *mut u64) -> DmStatus {
    guard(|| put(out, handle(sim)?.sim.settled_trades() as u64, "out"))
}

/// Event log as JSON lines.
///
/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dm_simulation_trace_jsonl(sim: *const DmSimulation, out: *mut *mut c_char) -> DmStatus {
    guard(|| {
        let bytes = handle(sim)?.sim.trace().to_jsonl();
        put_string(out, String::from_utf8(bytes).expect("JSON is UTF-8"))
    })
}

/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dm_simulation_cost_report_json(sim: *const DmSimulation, out: *mut *mut c_char) -> DmStatus {
    guard(|| {
        let report = CostReport::from_trace(&handle(sim)?.sim.trace());
        put_string(out, report.to_json())
    })
}

/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dm_simulation_reputation_json(sim: *const DmSimulation, out: *mut *mut c_char) -> DmStatus {
    guard(|| put_string(out, handle(sim)?.sim.reputation_json()))
}

/// # Safety
/// `sim` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dm_simulation_free(sim: *mut DmSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Monte Carlo linkage attack (`"timing"` or `"size"`) over `runs` seeds.
///
/// # Safety
/// Both strings must be valid C strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dm_attack_report_json(
    config_json: *const c_char,
    attack: *const c_char,
    runs: u32,
    out: *mut *mut c_char,
) -> DmStatus {
    guard(|| {
        let cfg = ScenarioConfig::from_json(str_arg(config_json, "config_json")?)?;
        let a: Attack = str_arg(attack, "attack")?
            .parse()
            .map_err(|e: datamarket::privacy::UnknownAttack| Fail(DmStatus::UnknownAttack, e.to_string()))?;
        if runs == 0 {
            return Err(Fail(DmStatus::InvalidInput, "runs must be positive".into()));
        }
        let report = monte_carlo(&cfg, &[a], runs as usize)?.remove(0);
        put_string(out, report.to_json())
    })
}

/// `basic_price * volume`, rejecting zero inputs and overflow.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_compute_price(basic_price: u64, volume: u64, out: *mut u64) -> DmStatus {
    guard(|| {
        let p = compute_price(basic_price, volume).map_err(|e| {
            let status = match e {
                PriceError::InvalidInput => DmStatus::InvalidInput,
                PriceError::Overflow => DmStatus::Overflow,
            };
            Fail(status, e.to_string())
        })?;
        put(out, p, "out")
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

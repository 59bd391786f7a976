//! C ABI over the tilted attack family, the recursive generalized CUSUM
//! detector and single simulated episodes.
//!
//! Every fallible function returns a [`CesStatus`]. On failure a message is
//! stored per thread and can be read with [`ces_last_error_message`].
//! Handles are opaque and must be released with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cesentry::adversary::{make_tilted_attack, AttackSpec, StartLaw};
use cesentry::detection::{mu_alpha, DetectorConfig, DetectorState, ObservationMode, StopReason, Verdict};
use cesentry::game::{build_chicken_game, chicken_ce, victim_view, VictimView};
use cesentry::simulation::{run_episode, EpisodeConfig, Outcome};
use cesentry::tilted::TiltedFamily;
use cesentry::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CesStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Infeasible = 3,
    NotInAlphabet = 4,
    AlreadyStopped = 5,
    NoConvergence = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CesOutcome {
    Detected = 0,
    FalseAlarm = 1,
    CensoredNoStop = 2,
    CensoredPreChange = 3,
}

/// Result of one simulated episode. Times are 1-based; 0 means "none".
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CesEpisode {
    pub stop_time: u64,
    /// 0 for the CUSUM branch, `k` for window `k`, -1 when not stopped.
    pub stop_window: i64,
    pub change_time: u64,
    pub outcome: CesOutcome,
    pub impact: f64,
    pub steps: u64,
}

/// Victim-side tilted family `tau_theta`.
pub struct CesFamily(TiltedFamily);

/// Calibrated detector.
pub struct CesDetector(DetectorConfig);

/// Running state of one detector instance.
pub struct CesState(DetectorState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> CesStatus {
    match err {
        Error::InfeasibleEpsilon { .. }
        | Error::MeanOutOfRange { .. }
        | Error::KlBudgetUnreachable { .. }
        | Error::DegenerateFamily(_) => CesStatus::Infeasible,
        Error::NotInAlphabet(_) => CesStatus::NotInAlphabet,
        Error::AlreadyStopped(_) => CesStatus::AlreadyStopped,
        Error::NoConvergence { .. } => CesStatus::NoConvergence,
        _ => CesStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), CesStatus>) -> CesStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CesStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic");
            CesStatus::Panic
        }
    }
}

fn check<T>(r: cesentry::Result<T>) -> Result<T, CesStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, CesStatus> {
    p.as_ref().ok_or_else(|| {
        set_error(format!("{name} is null"));
        CesStatus::NullPointer
    })
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, CesStatus> {
    p.as_mut().ok_or_else(|| {
        set_error(format!("{name} is null"));
        CesStatus::NullPointer
    })
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], CesStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        set_error(format!("{name} is null"));
        return Err(CesStatus::NullPointer);
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), CesStatus> {
    *deref_mut(out, "output pointer")? = value;
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ces_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// `log(3 (d + 1)^2) - log(alpha |log alpha|)`.
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn ces_mu_alpha(d_min: f64, alpha: f64, out: *mut f64) -> CesStatus {
    guard(|| {
        let mu = check(mu_alpha(d_min, alpha))?;
        write(out, mu)
    })
}

/// Builds a family from a victim pmf over `len` distinct utilities.
///
/// # Safety
/// `alphabet` and `pmf` must point to `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ces_family_new(
    alphabet: *const f64,
    pmf: *const f64,
    len: usize,
    out: *mut *mut CesFamily,
) -> CesStatus {
    guard(|| {
        let alphabet = slice(alphabet, len, "alphabet")?;
        let pmf = slice(pmf, len, "pmf")?;
        deref_mut(out, "out")?;
        let view = check(VictimView::from_pmf(alphabet, pmf))?;
        let family = check(TiltedFamily::new(view))?;
        write(out, Box::into_raw(Box::new(CesFamily(family))))
    })
}

/// Family of the first player of chicken under the mediator's equilibrium.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ces_family_chicken(out: *mut *mut CesFamily) -> CesStatus {
    guard(|| {
        deref_mut(out, "out")?;
        let view = check(victim_view(&build_chicken_game(), &chicken_ce(), 0))?;
        let family = check(TiltedFamily::new(view))?;
        write(out, Box::into_raw(Box::new(CesFamily(family))))
    })
}

/// # Safety
/// `family` must come from a `ces_family_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn ces_family_free(family: *mut CesFamily) {
    if !family.is_null() {
        drop(Box::from_raw(family));
    }
}

/// Number of supported utilities.
///
/// # Safety
/// `family` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ces_family_len(family: *const CesFamily) -> usize {
    family.as_ref().map_or(0, |f| f.0.len())
}

/// Copies the sorted alphabet and base pmf into caller buffers of `len`
/// entries; either buffer may be null.
///
/// # Safety
/// Non-null buffers must hold at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ces_family_support(
    family: *const CesFamily,
    alphabet: *mut f64,
    pmf: *mut f64,
    len: usize,
) -> CesStatus {
    guard(|| {
        let f = &deref(family, "family")?.0;
        if len < f.len() {
            set_error(format!("buffer of {len} entries for {} symbols", f.len()));
            return Err(CesStatus::InvalidArgument);
        }
        if !alphabet.is_null() {
            ptr::copy_nonoverlapping(f.alphabet().as_ptr(), alphabet, f.len());
        }
        if !pmf.is_null() {
            ptr::copy_nonoverlapping(f.base_pmf().as_ptr(), pmf, f.len());
        }
        Ok(())
    })
}

/// Expected victim utility `u_pi` under the unmanipulated signal.
///
/// # Safety
/// `family` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ces_family_base_mean(family: *const CesFamily, out: *mut f64) -> CesStatus {
    guard(|| write(out, deref(family, "family")?.0.base_mean()))
}

/// Supremum of feasible `epsilon`, `u_pi - u_min`.
///
/// # Safety
/// `family` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ces_family_max_epsilon(family: *const CesFamily, out: *mut f64) -> CesStatus {
    guard(|| write(out, deref(family, "family")?.0.max_epsilon()))
}

/// Tilt parameter whose expected cost equals `epsilon`.
///
/// # Safety
/// `family` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ces_family_theta_for_epsilon(
    family: *const CesFamily,
    epsilon: f64,
    out: *mut f64,
) -> CesStatus {
    guard(|| {
        let f = &deref(family, "family")?.0;
        let solve = check(f.theta_for_epsilon(epsilon))?;
        write(out, solve.theta)
    })
}

/// Writes `tau_theta` into `pmf` (at least `len` entries) and optionally its
/// KL divergence from the base and its mean utility.
///
/// # Safety
/// `pmf` must hold `len` doubles; `kl` and `mean` may be null.
#[no_mangle]
pub unsafe extern "C" fn ces_family_tilt(
    family: *const CesFamily,
    theta: f64,
    pmf: *mut f64,
    len: usize,
    kl: *mut f64,
    mean: *mut f64,
) -> CesStatus {
    guard(|| {
        let f = &deref(family, "family")?.0;
        if !(theta >= 0.0 && theta.is_finite()) {
            set_error(format!("theta must be finite and >= 0, got {theta}"));
            return Err(CesStatus::InvalidArgument);
        }
        if len < f.len() {
            set_error(format!("buffer of {len} entries for {} symbols", f.len()));
            return Err(CesStatus::InvalidArgument);
        }
        if pmf.is_null() {
            set_error("pmf is null");
            return Err(CesStatus::NullPointer);
        }
        let tau = f.tilt(theta);
        ptr::copy_nonoverlapping(tau.as_ptr(), pmf, tau.len());
        if !kl.is_null() {
            *kl = f.kl_from_base(theta);
        }
        if !mean.is_null() {
            *mean = f.mean_utility(theta);
        }
        Ok(())
    })
}

fn observation_mode(snap: bool) -> ObservationMode {
    if snap {
        ObservationMode::SnapToNearest
    } else {
        ObservationMode::Strict
    }
}

/// Calibrates `theta_min` from `epsilon` and the threshold from `alpha`.
/// With `snap` set, off-alphabet observations map to the nearest symbol.
///
/// # Safety
/// `family` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ces_detector_new(
    family: *const CesFamily,
    epsilon: f64,
    alpha: f64,
    snap: bool,
    out: *mut *mut CesDetector,
) -> CesStatus {
    guard(|| {
        let f = &deref(family, "family")?.0;
        deref_mut(out, "out")?;
        let det = check(DetectorConfig::build(f, epsilon, alpha))?.with_observation_mode(observation_mode(snap));
        write(out, Box::into_raw(Box::new(CesDetector(det))))
    })
}

/// Like [`ces_detector_new`] with the threshold `mu` given directly.
///
/// # Safety
/// `family` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ces_detector_with_threshold(
    family: *const CesFamily,
    epsilon: f64,
    mu: f64,
    snap: bool,
    out: *mut *mut CesDetector,
) -> CesStatus {
    guard(|| {
        let f = &deref(family, "family")?.0;
        deref_mut(out, "out")?;
        let det = check(DetectorConfig::with_threshold(f, epsilon, mu))?.with_observation_mode(observation_mode(snap));
        write(out, Box::into_raw(Box::new(CesDetector(det))))
    })
}

/// # Safety
/// `detector` must come from a `ces_detector_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn ces_detector_free(detector: *mut CesDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// # Safety
/// `detector` must be a live handle or null (returns NaN).
#[no_mangle]
pub unsafe extern "C" fn ces_detector_theta_min(detector: *const CesDetector) -> f64 {
    detector.as_ref().map_or(f64::NAN, |d| d.0.theta_min)
}

/// # Safety
/// `detector` must be a live handle or null (returns NaN).
#[no_mangle]
pub unsafe extern "C" fn ces_detector_d_min(detector: *const CesDetector) -> f64 {
    detector.as_ref().map_or(f64::NAN, |d| d.0.d_min)
}

/// # Safety
/// `detector` must be a live handle or null (returns NaN).
#[no_mangle]
pub unsafe extern "C" fn ces_detector_mu(detector: *const CesDetector) -> f64 {
    detector.as_ref().map_or(f64::NAN, |d| d.0.mu)
}

/// Number of windows `M`.
///
/// # Safety
/// `detector` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn ces_detector_window_count(detector: *const CesDetector) -> usize {
    detector.as_ref().map_or(0, |d| d.0.m())
}

/// Fresh state for `detector`.
///
/// # Safety
/// `detector` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ces_state_new(detector: *const CesDetector, out: *mut *mut CesState) -> CesStatus {
    guard(|| {
        let d = &deref(detector, "detector")?.0;
        write(out, Box::into_raw(Box::new(CesState(d.new_state()))))
    })
}

/// # Safety
/// `state` must come from [`ces_state_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ces_state_free(state: *mut CesState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Feeds one observed utility. `stopped` receives whether an alarm fired.
///
/// # Safety
/// All pointers must be live; `state` must belong to `detector`.
#[no_mangle]
pub unsafe extern "C" fn ces_detector_step(
    detector: *const CesDetector,
    state: *mut CesState,
    utility: f64,
    stopped: *mut bool,
) -> CesStatus {
    guard(|| {
        let d = &deref(detector, "detector")?.0;
        let s = &mut deref_mut(state, "state")?.0;
        deref_mut(stopped, "stopped")?;
        if s.q.len() != d.m() {
            set_error("state was created for a different detector");
            return Err(CesStatus::InvalidArgument);
        }
        let verdict = check(d.step(s, utility))?;
        write(stopped, matches!(verdict, Verdict::Stop(_)))
    })
}

/// Current time, CUSUM statistic and stop time (0 while running).
///
/// # Safety
/// `state` must be live; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn ces_state_query(
    state: *const CesState,
    t: *mut u64,
    r: *mut f64,
    stop_time: *mut u64,
    stop_window: *mut i64,
) -> CesStatus {
    guard(|| {
        let s = &deref(state, "state")?.0;
        if !t.is_null() {
            *t = s.t;
        }
        if !r.is_null() {
            *r = s.r;
        }
        if !stop_time.is_null() {
            *stop_time = s.stop_time.unwrap_or(0);
        }
        if !stop_window.is_null() {
            *stop_window = window_code(s.stop_reason);
        }
        Ok(())
    })
}

fn window_code(reason: Option<StopReason>) -> i64 {
    match reason {
        None => -1,
        Some(StopReason::Cusum) => 0,
        Some(StopReason::Window(k)) => k as i64,
    }
}

/// Simulates one episode against the tilted attack `tau_theta` starting at
/// `change_time` (0: never). Deterministic in `seed`.
///
/// # Safety
/// `detector` must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ces_run_episode(
    detector: *const CesDetector,
    theta: f64,
    change_time: u64,
    horizon: u64,
    seed: u64,
    out: *mut CesEpisode,
) -> CesStatus {
    guard(|| {
        let d = &deref(detector, "detector")?.0;
        deref_mut(out, "out")?;
        if horizon == 0 {
            set_error("horizon must be >= 1");
            return Err(CesStatus::InvalidArgument);
        }
        let attack: AttackSpec = if change_time == 0 {
            AttackSpec::none(d.family())
        } else {
            check(make_tilted_attack(d.family(), theta, d.epsilon, StartLaw::Fixed { t: change_time }))?
        };
        let result =
            check(run_episode(&EpisodeConfig { detector: d, attack: &attack, horizon, false_alarm_cost: 0.0, seed }))?;
        write(
            out,
            CesEpisode {
                stop_time: result.stop_time.unwrap_or(0),
                stop_window: window_code(result.stop_reason),
                change_time: result.change_time.unwrap_or(0),
                outcome: match result.outcome {
                    Outcome::Detected => CesOutcome::Detected,
                    Outcome::FalseAlarm => CesOutcome::FalseAlarm,
                    Outcome::CensoredNoStop => CesOutcome::CensoredNoStop,
                    Outcome::CensoredPreChange => CesOutcome::CensoredPreChange,
                },
                impact: result.impact,
                steps: result.steps,
            },
        )
    })
}

//! C interface to `mirpairs`.
//!
//! Every fallible call returns an [`MpStatus`]; on failure the message is
//! available from [`mp_last_error`] on the same thread. Experiments, tag
//! streams and histograms are opaque handles released with the matching
//! `*_free` call.
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the access the function
//! makes: handles must come from this library and not be used after being
//! freed, strings must be NUL-terminated, and output buffers must hold at
//! least `capacity` elements. Null pointers are reported as
//! [`MpStatus::NullPointer`] rather than dereferenced.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mirpairs::cli::{parse_config, PairsConfig};
use mirpairs::coincidence::{build_histogram, car_from_histogram, fit_peak, CarOptions, CoincidenceHistogram};
use mirpairs::error::Error;
use mirpairs::pairsource::{
    read_tags_binary, simulate_tags, write_tags_binary, Channel, PairExperiment, SimulationOptions, TagStream,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpStatus {
    Ok = 0,
    InvalidArgument = 1,
    UnderResolved = 2,
    NonConvergence = 3,
    InsufficientData = 4,
    RejectedData = 5,
    MalformedTags = 6,
    Io = 7,
    NullPointer = 8,
    Panic = 9,
}

impl From<&Error> for MpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => MpStatus::InvalidArgument,
            Error::UnderResolved { .. } => MpStatus::UnderResolved,
            Error::NonConvergence { .. } => MpStatus::NonConvergence,
            Error::InsufficientData(_) => MpStatus::InsufficientData,
            Error::RejectedData(_) => MpStatus::RejectedData,
            Error::MalformedTags { .. } => MpStatus::MalformedTags,
            Error::Io(_) => MpStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(MpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MpStatus::from(&e), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(MpStatus::Io, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MpStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MpStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            MpStatus::Panic
        }
    }
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    unsafe { out.write(value) };
    Ok(())
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(MpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// γ in 1/(W·m) from n₂ (m²/W), A_eff (m²) and wavelength (m).
#[no_mangle]
pub unsafe extern "C" fn mp_nonlinear_parameter(n2: f64, a_eff: f64, wavelength: f64, out: *mut f64) -> MpStatus {
    guard(|| write_out(out, mirpairs::fwm::nonlinear_parameter(n2, a_eff, wavelength)?))
}

/// Waveguide TPA coefficient in 1/(W·m) from bulk β_TPA (m/W) and A_eff (m²).
#[no_mangle]
pub unsafe extern "C" fn mp_tpa_bulk_to_waveguide(beta_tpa: f64, a_eff: f64, out: *mut f64) -> MpStatus {
    guard(|| write_out(out, mirpairs::fwm::tpa_bulk_to_waveguide(beta_tpa, a_eff)?))
}

/// Mean pairs per pulse for efficiency ξ (1/W²) at peak power P (W).
#[no_mangle]
pub unsafe extern "C" fn mp_pairs_per_pulse(xi: f64, power: f64, out: *mut f64) -> MpStatus {
    guard(|| write_out(out, mirpairs::pairsource::pairs_per_pulse(xi, power)?))
}

/// Monitored coincidence probability of the two-source state at pump
/// phase `phi` and coupler reflectivity `r`.
#[no_mangle]
pub unsafe extern "C" fn mp_coincidence_probability(phi: f64, r: f64, out: *mut f64) -> MpStatus {
    use mirpairs::interference::{biphoton_state, coincidence_probability};
    guard(|| write_out(out, coincidence_probability(&biphoton_state(phi, r)?)))
}

/// Raw visibility ceiling CAR/(2 + CAR); 1 for infinite CAR.
#[no_mangle]
pub extern "C" fn mp_raw_visibility_bound(car: f64) -> f64 {
    mirpairs::interference::raw_visibility_bound(car)
}

/// Pair-source experiment: source, two channels and two detectors.
pub struct MpExperiment(PairExperiment);

/// Simulated or loaded detection events.
pub struct MpTagStream(TagStream);

/// Start-stop coincidence histogram.
pub struct MpHistogram(CoincidenceHistogram);

/// Build an experiment from the JSON accepted by `mirpairs pairs`.
#[no_mangle]
pub unsafe extern "C" fn mp_experiment_from_json(json: *const c_char, out: *mut *mut MpExperiment) -> MpStatus {
    guard(|| {
        let text = unsafe { string(json, "json") }?;
        let cfg: PairsConfig = parse_config(text).map_err(|e| Failure(MpStatus::InvalidArgument, e.to_string()))?;
        let exp = cfg
            .experiment()
            .map_err(|e| Failure(MpStatus::InvalidArgument, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(MpExperiment(exp))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_experiment_free(exp: *mut MpExperiment) {
    if !exp.is_null() {
        drop(unsafe { Box::from_raw(exp) });
    }
}

/// Pulse period of the experiment's source, ps.
#[no_mangle]
pub unsafe extern "C" fn mp_experiment_period_ps(exp: *const MpExperiment, out: *mut f64) -> MpStatus {
    guard(|| write_out(out, unsafe { borrow(exp, "experiment") }?.0.source.period_ps()))
}

/// Simulate `duration` seconds at peak power `power`; identical inputs give
/// identical streams.
#[no_mangle]
pub unsafe extern "C" fn mp_simulate_tags(
    exp: *const MpExperiment,
    power: f64,
    duration: f64,
    seed: u64,
    out: *mut *mut MpTagStream,
) -> MpStatus {
    guard(|| {
        let exp = unsafe { borrow(exp, "experiment") }?;
        let stream = simulate_tags(&exp.0, power, duration, seed, &SimulationOptions::default())?;
        write_out(out, Box::into_raw(Box::new(MpTagStream(stream))))
    })
}

/// Load a binary tag file.
#[no_mangle]
pub unsafe extern "C" fn mp_tags_read(path: *const c_char, out: *mut *mut MpTagStream) -> MpStatus {
    guard(|| {
        let path = unsafe { string(path, "path") }?;
        let stream = read_tags_binary(&mut BufReader::new(File::open(path)?))?;
        write_out(out, Box::into_raw(Box::new(MpTagStream(stream))))
    })
}

/// Write a binary tag file.
#[no_mangle]
pub unsafe extern "C" fn mp_tags_write(tags: *const MpTagStream, path: *const c_char) -> MpStatus {
    guard(|| {
        let tags = unsafe { borrow(tags, "tag stream") }?;
        let path = unsafe { string(path, "path") }?;
        let mut w = BufWriter::new(File::create(path)?);
        write_tags_binary(&tags.0, &mut w)?;
        w.flush()?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_tags_free(tags: *mut MpTagStream) {
    if !tags.is_null() {
        drop(unsafe { Box::from_raw(tags) });
    }
}

/// Number of tags; with `channel` 0 or 1 only that channel is counted, any
/// other value counts both.
#[no_mangle]
pub unsafe extern "C" fn mp_tags_len(tags: *const MpTagStream, channel: i32, out: *mut usize) -> MpStatus {
    guard(|| {
        let s = &unsafe { borrow(tags, "tag stream") }?.0;
        let n = match u8::try_from(channel).ok().and_then(Channel::from_u8) {
            Some(ch) => s.count(ch),
            None => s.tags.len(),
        };
        write_out(out, n)
    })
}

/// Copy up to `capacity` tags into `times_ps` and `channels`; `written`
/// receives the number copied.
#[no_mangle]
pub unsafe extern "C" fn mp_tags_copy(
    tags: *const MpTagStream,
    times_ps: *mut i64,
    channels: *mut u8,
    capacity: usize,
    written: *mut usize,
) -> MpStatus {
    guard(|| {
        let s = &unsafe { borrow(tags, "tag stream") }?.0;
        let n = s.tags.len().min(capacity);
        if n > 0 && (times_ps.is_null() || channels.is_null()) {
            return Err(null("output buffer"));
        }
        for (k, t) in s.tags[..n].iter().enumerate() {
            unsafe {
                times_ps.add(k).write(t.t);
                channels.add(k).write(t.channel as u8);
            }
        }
        write_out(written, n)
    })
}

/// Histogram of B − A delays within ±`span_ps`, `bin_width_ps` wide bins.
#[no_mangle]
pub unsafe extern "C" fn mp_histogram_build(
    tags: *const MpTagStream,
    bin_width_ps: i64,
    span_ps: i64,
    out: *mut *mut MpHistogram,
) -> MpStatus {
    guard(|| {
        let s = unsafe { borrow(tags, "tag stream") }?;
        let h = build_histogram(&s.0, bin_width_ps, span_ps)?;
        write_out(out, Box::into_raw(Box::new(MpHistogram(h))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_histogram_free(hist: *mut MpHistogram) {
    if !hist.is_null() {
        drop(unsafe { Box::from_raw(hist) });
    }
}

/// Number of bins.
#[no_mangle]
pub unsafe extern "C" fn mp_histogram_len(hist: *const MpHistogram, out: *mut usize) -> MpStatus {
    guard(|| write_out(out, unsafe { borrow(hist, "histogram") }?.0.counts.len()))
}

/// Copy up to `capacity` bin centres (ps) and counts.
#[no_mangle]
pub unsafe extern "C" fn mp_histogram_copy(
    hist: *const MpHistogram,
    delays_ps: *mut f64,
    counts: *mut u64,
    capacity: usize,
    written: *mut usize,
) -> MpStatus {
    guard(|| {
        let h = &unsafe { borrow(hist, "histogram") }?.0;
        let n = h.counts.len().min(capacity);
        if n > 0 && (delays_ps.is_null() || counts.is_null()) {
            return Err(null("output buffer"));
        }
        for (k, (d, c)) in h.delays().into_iter().zip(&h.counts).take(n).enumerate() {
            unsafe {
                delays_ps.add(k).write(d);
                counts.add(k).write(*c);
            }
        }
        write_out(written, n)
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MpCar {
    pub x_raw: f64,
    pub x_acc: f64,
    /// Infinite when no accidentals were counted.
    pub car: f64,
    pub car_err: f64,
}

/// Coincidence-to-accidental ratio with `n_side_peaks` accidental windows.
#[no_mangle]
pub unsafe extern "C" fn mp_histogram_car(
    hist: *const MpHistogram,
    window_ps: f64,
    n_side_peaks: usize,
    period_ps: f64,
    out: *mut MpCar,
) -> MpStatus {
    guard(|| {
        let h = unsafe { borrow(hist, "histogram") }?;
        let opts = CarOptions {
            window_ps,
            n_side_peaks,
            ..CarOptions::new(period_ps)
        };
        let r = car_from_histogram(&h.0, &opts)?;
        write_out(
            out,
            MpCar {
                x_raw: r.x_raw,
                x_acc: r.x_acc,
                car: r.car,
                car_err: r.car_err,
            },
        )
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MpPeak {
    pub center_ps: f64,
    pub center_err_ps: f64,
    pub fwhm_ps: f64,
    pub fwhm_err_ps: f64,
    pub amplitude: f64,
    pub background: f64,
    pub converged: bool,
}

/// Gaussian-plus-background fit of the zero-delay peak within
/// ±`fit_half_width_ps`.
#[no_mangle]
pub unsafe extern "C" fn mp_histogram_fit_peak(
    hist: *const MpHistogram,
    fit_half_width_ps: f64,
    out: *mut MpPeak,
) -> MpStatus {
    guard(|| {
        let h = unsafe { borrow(hist, "histogram") }?;
        let f = fit_peak(&h.0, fit_half_width_ps)?;
        write_out(
            out,
            MpPeak {
                center_ps: f.center,
                center_err_ps: f.center_err,
                fwhm_ps: f.fwhm,
                fwhm_err_ps: f.fwhm_err,
                amplitude: f.amplitude,
                background: f.background,
                converged: f.converged,
            },
        )
    })
}

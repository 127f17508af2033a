//! C ABI over the corrector, the permutation oracle and the beam search.
//!
//! Every fallible function returns a [`PfStatus`]; on failure the message is
//! available from [`pf_last_error`] on the same thread. Strings returned to
//! the caller must be released with [`pf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use permfill::align::{build_with, OracleConfig};
use permfill::config::RunConfig;
use permfill::neural::Checkpoint;
use permfill::pipeline::Corrector;
use permfill::search::{beam_search, BeamConfig, PointerMatrix};
use permfill::train::load_corrector;
use permfill::Error;

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Config = 4,
    Checkpoint = 5,
    InvalidInput = 6,
    BufferTooSmall = 7,
    Runtime = 8,
    Panic = 9,
}

/// Opaque handle to a loaded corrector.
pub struct PfCorrector {
    inner: Corrector,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        Error::Io(_) | Error::File { .. } => PfStatus::Io,
        Error::Config(_) | Error::Plan(_) => PfStatus::Config,
        Error::Checkpoint(_) => PfStatus::Checkpoint,
        Error::EmptyInput
        | Error::InvalidPermutation(_)
        | Error::InvalidVocab(_)
        | Error::LengthExceeded { .. }
        | Error::Shape(_) => PfStatus::InvalidInput,
        _ => PfStatus::Runtime,
    }
}

fn fail(status: PfStatus, msg: impl Into<String>) -> PfStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording errors and converting panics.
fn guard<F: FnOnce() -> Result<(), PfStatus>>(f: F) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PfStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(PfStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: permfill::Result<T>) -> Result<T, PfStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, PfStatus> {
    if p.is_null() {
        return Err(fail(PfStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), PfStatus> {
    let c = CString::new(s).map_err(|_| fail(PfStatus::Runtime, "output contains a NUL byte"))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint. `config_toml` may be null for the default settings;
/// otherwise it is TOML text in the command-line configuration format, of
/// which the search and decoder sections apply.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_corrector_load(
    checkpoint_path: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut PfCorrector,
) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(PfStatus::NullArgument, "out is null"));
        }
        let path = read_str(checkpoint_path, "checkpoint_path")?;
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            let cfg = lift(RunConfig::parse(read_str(config_toml, "config_toml")?))?;
            lift(cfg.validate())?;
            cfg
        };
        let ckpt = lift(Checkpoint::load(Path::new(path)))?;
        let inner = lift(load_corrector(ckpt, &cfg))?;
        *out = Box::into_raw(Box::new(PfCorrector { inner }));
        Ok(())
    })
}

/// Destroys a corrector. Null is ignored.
///
/// # Safety
/// `c` must come from [`pf_corrector_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pf_corrector_free(c: *mut PfCorrector) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Sets the confidence bias used by subsequent calls.
///
/// # Safety
/// `c` must be a live corrector not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn pf_corrector_set_confidence_bias(c: *mut PfCorrector, bias: f64) -> PfStatus {
    guard(|| {
        let c = c.as_mut().ok_or_else(|| fail(PfStatus::NullArgument, "corrector is null"))?;
        if !(0.0..=1.0).contains(&bias) {
            return Err(fail(PfStatus::Config, "confidence bias must lie in [0, 1]"));
        }
        c.inner.search.confidence_bias = bias;
        Ok(())
    })
}

/// Corrects one sentence. On success `*out` holds a string to be released
/// with [`pf_string_free`].
///
/// # Safety
/// `c` must be a live corrector, `sentence` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_correct(c: *const PfCorrector, sentence: *const c_char, out: *mut *mut c_char) -> PfStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| fail(PfStatus::NullArgument, "corrector is null"))?;
        if out.is_null() {
            return Err(fail(PfStatus::NullArgument, "out is null"));
        }
        let text = read_str(sentence, "sentence")?;
        let r = lift(c.inner.correct(text))?;
        give_string(r.best().text(), out)
    })
}

/// Up to `k` hypotheses as a JSON array of `{"text", "score"}` objects, best
/// first.
///
/// # Safety
/// As for [`pf_correct`].
#[no_mangle]
pub unsafe extern "C" fn pf_correct_topk(
    c: *const PfCorrector,
    sentence: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> PfStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| fail(PfStatus::NullArgument, "corrector is null"))?;
        if out_json.is_null() {
            return Err(fail(PfStatus::NullArgument, "out_json is null"));
        }
        let text = read_str(sentence, "sentence")?;
        let mut inner = c.inner.clone();
        inner.search.topk = k.clamp(1, inner.search.beam_width);
        let r = lift(inner.correct(text))?;
        let arr: Vec<_> = r
            .hypotheses
            .iter()
            .map(|h| serde_json::json!({ "text": h.text(), "score": h.perm_score }))
            .collect();
        give_string(serde_json::Value::Array(arr).to_string(), out_json)
    })
}

/// Oracle permutation for a pair of sentinel-wrapped id sequences
/// (`2 .. 3`). Writes up to `cap` indices to `out_pi`, the full length to
/// `out_len` and whether the example is lossy to `out_lossy`. Returns
/// `BufferTooSmall` (with `out_len` set) when `cap` is insufficient.
///
/// # Safety
/// Array arguments must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pf_oracle_permutation(
    src: *const u32,
    src_len: usize,
    tgt: *const u32,
    tgt_len: usize,
    s: usize,
    max_len: usize,
    out_pi: *mut usize,
    cap: usize,
    out_len: *mut usize,
    out_lossy: *mut bool,
) -> PfStatus {
    guard(|| {
        if src.is_null() || tgt.is_null() || out_len.is_null() || out_lossy.is_null() {
            return Err(fail(PfStatus::NullArgument, "null array argument"));
        }
        let x = slice::from_raw_parts(src, src_len);
        let y = slice::from_raw_parts(tgt, tgt_len);
        let cfg = OracleConfig {
            s,
            max_len,
            ..OracleConfig::default()
        };
        let ex = lift(build_with(x, y, &cfg))?;
        let pi = ex.pi.as_slice();
        *out_len = pi.len();
        *out_lossy = ex.lossy;
        if pi.len() > cap || (out_pi.is_null() && !pi.is_empty()) {
            return Err(fail(PfStatus::BufferTooSmall, format!("need {} entries", pi.len())));
        }
        ptr::copy_nonoverlapping(pi.as_ptr(), out_pi, pi.len());
        Ok(())
    })
}

/// Beam search over a row-major `(n + s) x (n + s)` pointer matrix. Results
/// are written best first: hypothesis `h` occupies
/// `out_perms[h * (n + s) ..]` with length `out_lens[h]` and ranking score
/// `out_scores[h]`. All output arrays need room for `width` hypotheses.
///
/// # Safety
/// `a` must hold `(n + s)^2` values and the outputs must be writable for the
/// sizes above.
#[no_mangle]
pub unsafe extern "C" fn pf_beam_search(
    a: *const f64,
    n: usize,
    s: usize,
    width: usize,
    confidence_bias: f64,
    length_norm: bool,
    out_perms: *mut usize,
    out_lens: *mut usize,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> PfStatus {
    guard(|| {
        if a.is_null() || out_perms.is_null() || out_lens.is_null() || out_scores.is_null() || out_count.is_null() {
            return Err(fail(PfStatus::NullArgument, "null array argument"));
        }
        let m = n + s;
        let values = slice::from_raw_parts(a, m * m).to_vec();
        let pm = lift(PointerMatrix::new(values, n, s))?;
        let cfg = BeamConfig {
            width,
            confidence_bias,
            length_norm,
        };
        let found = lift(beam_search(&pm, &cfg))?;
        for (h, hyp) in found.iter().enumerate() {
            let pi = hyp.perm.as_slice();
            ptr::copy_nonoverlapping(pi.as_ptr(), out_perms.add(h * m), pi.len());
            *out_lens.add(h) = pi.len();
            *out_scores.add(h) = hyp.score;
        }
        *out_count = found.len();
        Ok(())
    })
}

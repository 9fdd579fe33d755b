//! C ABI over trained `tkgqa` checkpoints.
//!
//! Every fallible call returns a [`TkgqaStatus`]. On failure the message is
//! kept in thread-local storage and can be read with
//! [`tkgqa_last_error_message`]. Handles are opaque and must be released with
//! their `_free` function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tkgqa::forecaster::{forecast_scores, TimeAwareReps};
use tkgqa::qa::{Family, QaModel};
use tkgqa::questions::Question;
use tkgqa::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TkgqaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    MissingArtifact = 4,
    Data = 5,
    Numeric = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Forecaster representations plus whichever QA models were found.
pub struct TkgqaModel {
    reps: TimeAwareReps,
    models: BTreeMap<Family, QaModel>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TkgqaStatus {
    match e {
        Error::Config { .. } | Error::InvalidBoundaries(_) => TkgqaStatus::Config,
        Error::MissingArtifact { .. } => TkgqaStatus::MissingArtifact,
        Error::Divergence { .. } => TkgqaStatus::Numeric,
        Error::Io(_) => TkgqaStatus::Io,
        _ => TkgqaStatus::Data,
    }
}

fn fail(status: TkgqaStatus, msg: impl Into<String>) -> TkgqaStatus {
    set_error(msg.into());
    status
}

/// Run `f`, turning errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), TkgqaStatus>>(f: F) -> TkgqaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TkgqaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(TkgqaStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: tkgqa::Result<T>) -> Result<T, TkgqaStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, TkgqaStatus> {
    if p.is_null() {
        return Err(fail(TkgqaStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        fail(
            TkgqaStatus::InvalidUtf8,
            format!("{name} is not valid UTF-8"),
        )
    })
}

unsafe fn model_ref<'a>(m: *const TkgqaModel) -> Result<&'a TkgqaModel, TkgqaStatus> {
    m.as_ref()
        .ok_or_else(|| fail(TkgqaStatus::NullPointer, "model is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tkgqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Length in bytes of the last error message on this thread, excluding the
/// terminating NUL. Zero when the last call succeeded.
#[no_mangle]
pub extern "C" fn tkgqa_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copy the last error message into `buf` (NUL-terminated).
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tkgqa_last_error_message(buf: *mut c_char, len: usize) -> TkgqaStatus {
    if buf.is_null() {
        return TkgqaStatus::NullPointer;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[0u8][..], |c| c.as_bytes_with_nul());
        if bytes.len() > len {
            return TkgqaStatus::BufferTooSmall;
        }
        ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, bytes.len());
        TkgqaStatus::Ok
    })
}

/// Load `reps.bin` and every `qa-{epq,yuq,frq}.bin` from a checkpoint
/// directory. At least one QA model must be present.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tkgqa_model_open(
    dir: *const c_char,
    out: *mut *mut TkgqaModel,
) -> TkgqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(TkgqaStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let dir = Path::new(str_arg(dir, "dir")?);
        let reps_path = dir.join("reps.bin");
        if !reps_path.exists() {
            let e = Error::MissingArtifact {
                path: reps_path,
                producer: "infer-reps",
            };
            return Err(fail(status_of(&e), e.to_string()));
        }
        let reps = lift(TimeAwareReps::load(&reps_path))?;
        let mut models = BTreeMap::new();
        for fam in [Family::Epq, Family::Yuq, Family::Frq] {
            let p = dir.join(format!("qa-{}.bin", fam.as_str()));
            if p.exists() {
                models.insert(fam, lift(QaModel::load(&p))?);
            }
        }
        if models.is_empty() {
            let e = Error::MissingArtifact {
                path: dir.join("qa-epq.bin"),
                producer: "train-qa",
            };
            return Err(fail(status_of(&e), e.to_string()));
        }
        *out = Box::into_raw(Box::new(TkgqaModel { reps, models }));
        Ok(())
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `m` must come from [`tkgqa_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tkgqa_model_free(m: *mut TkgqaModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tkgqa_model_num_entities(
    m: *const TkgqaModel,
    out: *mut usize,
) -> TkgqaStatus {
    guard(|| {
        let m = model_ref(m)?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(TkgqaStatus::NullPointer, "out is null"))?;
        *out = m.reps.num_entities();
        Ok(())
    })
}

/// Answer one question given as a JSON object (the format of the question
/// files). On success `*out` receives the prediction as JSON, to be released
/// with [`tkgqa_string_free`].
///
/// # Safety
/// `m` must be a live handle, `question_json` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tkgqa_model_predict_json(
    m: *const TkgqaModel,
    question_json: *const c_char,
    out: *mut *mut c_char,
) -> TkgqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(TkgqaStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let m = model_ref(m)?;
        let text = str_arg(question_json, "question_json")?;
        let q: Question = lift(serde_json::from_str(text).map_err(Error::from))?;
        let fam = Family::of(q.qtype);
        let model = m.models.get(&fam).ok_or_else(|| {
            fail(
                TkgqaStatus::MissingArtifact,
                format!(
                    "no {} model loaded; run `tkgqa train-qa` first",
                    fam.as_str()
                ),
            )
        })?;
        let pred = lift(model.predict(&q, &m.reps))?;
        let json = lift(serde_json::to_string(&pred).map_err(Error::from))?;
        *out = CString::new(json).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// Forecast object scores for `(s, r, ?, t)` into `scores[0..len]`, where
/// `len` must equal the entity count.
///
/// # Safety
/// `m` must be a live handle and `scores` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tkgqa_model_forecast(
    m: *const TkgqaModel,
    s: u32,
    r: u32,
    t: u32,
    scores: *mut f64,
    len: usize,
) -> TkgqaStatus {
    guard(|| {
        let m = model_ref(m)?;
        if scores.is_null() {
            return Err(fail(TkgqaStatus::NullPointer, "scores is null"));
        }
        let n = m.reps.num_entities();
        if len != n {
            return Err(fail(
                TkgqaStatus::BufferTooSmall,
                format!("scores buffer holds {len}, need {n}"),
            ));
        }
        let v = lift(forecast_scores(&m.reps, s, r, t))?;
        ptr::copy_nonoverlapping(v.as_ptr(), scores, n);
        Ok(())
    })
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tkgqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_reported() {
        let mut out = ptr::null_mut();
        let st = unsafe { tkgqa_model_open(ptr::null(), &mut out) };
        assert_eq!(st, TkgqaStatus::NullPointer);
        assert!(tkgqa_last_error_length() > 0);
        let mut n = 0usize;
        assert_eq!(
            unsafe { tkgqa_model_num_entities(ptr::null(), &mut n) },
            TkgqaStatus::NullPointer
        );
    }

    #[test]
    fn error_message_copies_with_nul() {
        set_error("boom".into());
        let mut small = [0 as c_char; 4];
        assert_eq!(
            unsafe { tkgqa_last_error_message(small.as_mut_ptr(), small.len()) },
            TkgqaStatus::BufferTooSmall
        );
        let mut buf = [0 as c_char; 8];
        assert_eq!(
            unsafe { tkgqa_last_error_message(buf.as_mut_ptr(), buf.len()) },
            TkgqaStatus::Ok
        );
        let s = unsafe { CStr::from_ptr(buf.as_ptr()) };
        assert_eq!(s.to_str().unwrap(), "boom");
    }

    #[test]
    fn version_is_crate_version() {
        let v = unsafe { CStr::from_ptr(tkgqa_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

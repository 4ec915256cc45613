//! C ABI over `pfo-core`: compile a program with a pass list, simulate it,
//! verify it and read its copy counters. Handles are opaque; every call
//! returns a [`PfoStatus`] and the message of the last failure on the
//! calling thread is available from [`pfo_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pfo_core::leakage::{verify_pfo, SecretDomain, Target};
use pfo_core::optimize::{compile_program, parse_opts, CompileOptions, Compiled};
use pfo_core::simulate::{simulate, Inputs, SimOptions};
use pfo_core::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfoStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Syntax, semantic or unsupported-construct error in the program.
    Program = 3,
    /// Bad inputs, options or domain.
    Input = 4,
    /// No valid staging plan or layout.
    Plan = 5,
    /// The program traps or exceeds its step limit.
    Runtime = 6,
    Internal = 7,
    Panic = 8,
}

/// A compiled program: vanilla build plus its transformed plan.
pub struct PfoProgram {
    compiled: Compiled,
}

/// Copy operations the plan performs.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PfoCopyCounts {
    pub code_fetch: u64,
    pub data_fetch: u64,
    pub copy_back: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PfoStatus {
    match e {
        Error::Syntax { .. }
        | Error::UnboundedLoop { .. }
        | Error::Unsupported { .. }
        | Error::Semantic { .. } => PfoStatus::Program,
        Error::Input(_) | Error::Domain(_) | Error::Json(_) | Error::Io(_) => PfoStatus::Input,
        Error::Plan(_) | Error::Layout(_) | Error::Resource { .. } => PfoStatus::Plan,
        Error::StepLimit(_) => PfoStatus::Runtime,
        _ => PfoStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), PfoStatus>) -> PfoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PfoStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside pfo".into());
            PfoStatus::Panic
        }
    }
}

fn fail(e: Error) -> PfoStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, PfoStatus> {
    if p.is_null() {
        set_error("null argument".into());
        return Err(PfoStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8".into());
        PfoStatus::InvalidUtf8
    })
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), PfoStatus> {
    let c = CString::new(s).map_err(|_| {
        set_error("result contains a nul byte".into());
        PfoStatus::Internal
    })?;
    // SAFETY: callers checked `out` is non-null.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn pfo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Compiles `source` with passes `opts` (`"O1,O2"`, `"all"` or `""`).
///
/// # Safety
/// `source` and `opts` must be valid nul-terminated strings; `out` must be
/// a valid pointer. On success `*out` owns a handle to release with
/// [`pfo_program_free`].
#[no_mangle]
pub unsafe extern "C" fn pfo_compile(
    source: *const c_char,
    opts: *const c_char,
    page_size: u64,
    out: *mut *mut PfoProgram,
) -> PfoStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer".into());
            return Err(PfoStatus::NullArgument);
        }
        *out = ptr::null_mut();
        let src = str_arg(source)?;
        let opts = parse_opts(str_arg(opts)?).map_err(fail)?;
        let compiled = compile_program(
            src,
            &[],
            &opts,
            &CompileOptions {
                page_size,
                ..Default::default()
            },
        )
        .map_err(fail)?;
        *out = Box::into_raw(Box::new(PfoProgram { compiled }));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`pfo_compile`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pfo_program_free(p: *mut PfoProgram) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pfo_copy_counts(
    p: *const PfoProgram,
    out: *mut PfoCopyCounts,
) -> PfoStatus {
    guard(|| {
        let (Some(p), false) = (p.as_ref(), out.is_null()) else {
            set_error("null argument".into());
            return Err(PfoStatus::NullArgument);
        };
        let c = p.compiled.plan.counters;
        *out = PfoCopyCounts {
            code_fetch: c.code_fetch,
            data_fetch: c.data_fetch,
            copy_back: c.copy_back,
        };
        Ok(())
    })
}

/// Runs one input, given as a JSON object of name to element list, on the
/// vanilla or transformed program. `*out_json` receives the result as JSON;
/// release it with [`pfo_string_free`].
///
/// # Safety
/// `p` must be a live handle, `inputs_json` a valid nul-terminated string
/// and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pfo_simulate(
    p: *const PfoProgram,
    inputs_json: *const c_char,
    transformed: bool,
    out_json: *mut *mut c_char,
) -> PfoStatus {
    guard(|| {
        let (Some(p), false) = (p.as_ref(), out_json.is_null()) else {
            set_error("null argument".into());
            return Err(PfoStatus::NullArgument);
        };
        *out_json = ptr::null_mut();
        let inputs: Inputs =
            serde_json::from_str(str_arg(inputs_json)?).map_err(|e| fail(e.into()))?;
        let c = &p.compiled;
        let opts = SimOptions {
            record_trace: false,
            ..Default::default()
        };
        let r = if transformed {
            simulate(&c.tree, &c.layout, Some(&c.plan), &inputs, &opts)
        } else {
            simulate(&c.vanilla, &c.vanilla_layout, None, &inputs, &opts)
        }
        .map_err(fail)?;
        out_string(r.to_json(), out_json)
    })
}

/// Checks the profile is the same for every value of the low `bits` secret
/// bits. `*oblivious` is set to 1 or 0.
///
/// # Safety
/// `p` must be a live handle and `oblivious` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pfo_verify(
    p: *const PfoProgram,
    bits: u32,
    transformed: bool,
    oblivious: *mut i32,
) -> PfoStatus {
    guard(|| {
        let (Some(p), false) = (p.as_ref(), oblivious.is_null()) else {
            set_error("null argument".into());
            return Err(PfoStatus::NullArgument);
        };
        let c = &p.compiled;
        let t = if transformed {
            Target::planned(&c.tree, &c.plan)
        } else {
            Target::vanilla(&c.vanilla, &c.vanilla_layout)
        };
        let rep = verify_pfo(&t, &SecretDomain::exhaustive(bits), &SimOptions::default())
            .map_err(fail)?;
        *oblivious = i32::from(rep.oblivious);
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pfo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

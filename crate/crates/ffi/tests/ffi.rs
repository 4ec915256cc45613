use std::ffi::{CStr, CString};
use std::ptr;

use pfo_ffi::*;

const SPLIT: &str = include_str!("../../../corpus/split_toy.pfo");

fn compile(src: &str, opts: &str) -> (PfoStatus, *mut PfoProgram) {
    let src = CString::new(src).unwrap();
    let opts = CString::new(opts).unwrap();
    let mut p = ptr::null_mut();
    let st = unsafe { pfo_compile(src.as_ptr(), opts.as_ptr(), 4096, &mut p) };
    (st, p)
}

fn last_error() -> String {
    let e = pfo_last_error();
    assert!(!e.is_null());
    unsafe { CStr::from_ptr(e) }.to_string_lossy().into_owned()
}

#[test]
fn compile_verify_and_free() {
    let (st, p) = compile(SPLIT, "O1");
    assert_eq!(st, PfoStatus::Ok);
    let mut ob = -1;
    unsafe {
        assert_eq!(pfo_verify(p, 3, false, &mut ob), PfoStatus::Ok);
        assert_eq!(ob, 0);
        assert_eq!(pfo_verify(p, 3, true, &mut ob), PfoStatus::Ok);
        assert_eq!(ob, 1);
        let mut c = PfoCopyCounts::default();
        assert_eq!(pfo_copy_counts(p, &mut c), PfoStatus::Ok);
        assert!(c.data_fetch > 0);
        pfo_program_free(p);
    }
}

#[test]
fn simulate_returns_json() {
    let (_, p) = compile(SPLIT, "");
    let inputs = CString::new(r#"{"s":[5]}"#).unwrap();
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(
            pfo_simulate(p, inputs.as_ptr(), false, &mut out),
            PfoStatus::Ok
        );
        let s = CStr::from_ptr(out).to_str().unwrap().to_owned();
        pfo_string_free(out);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["outputs"]["y"][0], 9);
        pfo_program_free(p);
    }
}

#[test]
fn syntax_error_sets_message() {
    let (st, p) = compile("void main( {", "");
    assert_eq!(st, PfoStatus::Program);
    assert!(p.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn bad_options_and_inputs() {
    let (st, _) = compile(SPLIT, "O9");
    assert_eq!(st, PfoStatus::Input);
    let (_, p) = compile(SPLIT, "");
    let bad = CString::new("not json").unwrap();
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(
            pfo_simulate(p, bad.as_ptr(), false, &mut out),
            PfoStatus::Input
        );
        assert!(out.is_null());
        pfo_program_free(p);
    }
}

#[test]
fn null_arguments_are_rejected() {
    let mut p = ptr::null_mut();
    let opts = CString::new("").unwrap();
    unsafe {
        assert_eq!(
            pfo_compile(ptr::null(), opts.as_ptr(), 4096, &mut p),
            PfoStatus::NullArgument
        );
        assert_eq!(
            pfo_verify(ptr::null(), 3, true, ptr::null_mut()),
            PfoStatus::NullArgument
        );
        pfo_program_free(ptr::null_mut());
        pfo_string_free(ptr::null_mut());
    }
}

#[test]
fn header_is_current() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pfo.h")).unwrap();
    for f in [
        "pfo_compile",
        "pfo_simulate",
        "pfo_verify",
        "pfo_copy_counts",
        "pfo_program_free",
        "pfo_last_error",
    ] {
        assert!(h.contains(f), "{f}");
    }
}

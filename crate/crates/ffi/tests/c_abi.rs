use std::ffi::{CStr, CString};
use std::ptr;

use lablink_ffi::*;

fn take(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe { lablink_string_free(s) };
    out
}

fn request(p: *const LablinkPlatform, method: &str, path: &str, token: Option<&str>, body: Option<&str>) -> (u16, serde_json::Value) {
    let m = CString::new(method).unwrap();
    let path = CString::new(path).unwrap();
    let token = token.map(|t| CString::new(t).unwrap());
    let body = body.map(|b| CString::new(b).unwrap());
    let mut status = 0u16;
    let mut out = ptr::null_mut();
    let rc = unsafe {
        lablink_request(
            p,
            m.as_ptr(),
            path.as_ptr(),
            token.as_ref().map_or(ptr::null(), |t| t.as_ptr()),
            body.as_ref().map_or(ptr::null(), |b| b.as_ptr()),
            &mut status,
            &mut out,
        )
    };
    assert_eq!(rc, LablinkStatus::Ok);
    (status, serde_json::from_str(&take(out)).unwrap())
}

#[test]
fn requests_go_through_the_router() {
    let cfg = CString::new("[bootstrap_admin]\nusername = \"root\"\npassword = \"hunter22\"\n").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { lablink_platform_open(cfg.as_ptr(), &mut p) }, LablinkStatus::Ok);

    let (status, health) = request(p, "GET", "/api/v1/health", None, None);
    assert_eq!(status, 200);
    assert_eq!(health["status"], "ok");

    let (status, body) = request(p, "GET", "/api/v1/members", None, None);
    assert_eq!(status, 403);
    assert_eq!(body["code"], "PermissionDenied");

    let (status, login) = request(p, "POST", "/api/v1/auth/token", None, Some(r#"{"username":"root","password":"hunter22"}"#));
    assert_eq!(status, 200);
    let token = login["token"].as_str().unwrap().to_owned();
    let (status, members) = request(p, "GET", "/api/v1/members", Some(&token), None);
    assert_eq!(status, 200);
    assert_eq!(members.as_array().unwrap().len(), 1);

    unsafe { lablink_platform_free(p) };
}

#[test]
fn bad_config_reports_config_error() {
    let cfg = CString::new("deployment_tz = \"Nowhere/Land\"").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { lablink_platform_open(cfg.as_ptr(), &mut p) }, LablinkStatus::ConfigError);
    assert!(p.is_null());
    let msg = unsafe { CStr::from_ptr(lablink_last_error_message()) }.to_str().unwrap();
    assert!(msg.starts_with("ConfigError"), "{msg}");
}

#[test]
fn partial_loss_matches_hand_count() {
    // 254 -> 255 -> (0, 1 lost) 2 -> 3: five transitions, three seen
    let counters = [254i64, 255, 2, 3];
    let mut est = LablinkLossEstimate::default();
    assert_eq!(unsafe { lablink_partial_loss(counters.as_ptr(), counters.len(), 256, &mut est) }, LablinkStatus::Ok);
    assert_eq!(est.expected, 5);
    assert_eq!(est.received, 3);
    assert!((est.loss_rate - 2.0 / 5.0).abs() < 1e-12);

    assert_eq!(unsafe { lablink_partial_loss(counters.as_ptr(), 1, 256, &mut est) }, LablinkStatus::TooFewPoints);
    assert_eq!(unsafe { lablink_partial_loss(ptr::null(), 0, 256, &mut est) }, LablinkStatus::NullArgument);
}

#[test]
fn nyquist_over_the_abi() {
    let times: Vec<f64> = (0..10).map(|i| f64::from(i) * 900.0).collect();
    let mut v = LablinkNyquist::default();
    assert_eq!(unsafe { lablink_nyquist_check(times.as_ptr(), times.len(), 1800.0, &mut v) }, LablinkStatus::Ok);
    assert!(v.adequate);
    assert_eq!(v.median_interval_s, 900.0);
    assert_eq!(unsafe { lablink_nyquist_check(times.as_ptr(), times.len(), 1799.0, &mut v) }, LablinkStatus::Ok);
    assert!(!v.adequate);
}

#[test]
fn anonymous_id_is_stable_and_salted() {
    let a = CString::new("00112233445566778899aabbccddeeff").unwrap();
    let b = CString::new("ffeeddccbbaa99887766554433221100").unwrap();
    let user = CString::new("jdoe").unwrap();
    let url = CString::new("https://surveys.example/s/1").unwrap();
    let open = CString::new("2021-01-04T09:00:00Z").unwrap();
    let id = |salt: &CString| {
        let mut out = ptr::null_mut();
        assert_eq!(
            unsafe { lablink_anonymous_id(salt.as_ptr(), user.as_ptr(), url.as_ptr(), open.as_ptr(), &mut out) },
            LablinkStatus::Ok
        );
        take(out)
    };
    let first = id(&a);
    assert_eq!(first.len(), 32);
    assert_eq!(first, id(&a));
    assert_ne!(first, id(&b));
    let short = CString::new("abcd").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { lablink_anonymous_id(short.as_ptr(), user.as_ptr(), url.as_ptr(), open.as_ptr(), &mut out) },
        LablinkStatus::InvalidArgument
    );
    assert!(out.is_null());
}

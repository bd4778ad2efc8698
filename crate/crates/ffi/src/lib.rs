//! C ABI over the lablink platform.
//!
//! A platform is an opaque handle from [`lablink_platform_open`]. Requests
//! go through the same router as the HTTP service, so every permission
//! check, status code and error envelope matches the network API.
//!
//! Every function returns a [`LablinkStatus`]. On failure the message is
//! available from [`lablink_last_error_message`] on the same thread.
//! Strings handed out by this library must be released with
//! [`lablink_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request};
use lablink::clock::{from_millis, parse_rfc3339};
use lablink::registry::SecretSalt;
use lablink::tsstore::{Sample, Selector, Series};
use lablink::{Error, Lab, ServiceConfig};
use tower::ServiceExt;

const MAX_BODY: usize = 64 * 1024 * 1024;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LablinkStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ConfigError = 4,
    TooFewPoints = 5,
    EmptySeries = 6,
    Io = 7,
    Internal = 8,
}

/// Opaque platform handle.
pub struct LablinkPlatform {
    router: axum::Router,
    runtime: tokio::runtime::Runtime,
    _lab: Arc<Lab>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LablinkLossEstimate {
    pub expected: u64,
    pub received: u64,
    pub loss_rate: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LablinkNyquist {
    pub adequate: bool,
    pub required_interval_s: f64,
    pub median_interval_s: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: LablinkStatus, message: impl Into<String>) -> LablinkStatus {
    let msg = CString::new(message.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
    status
}

fn fail_core(e: Error) -> LablinkStatus {
    let status = match e {
        Error::Config(_) => LablinkStatus::ConfigError,
        Error::TooFewPoints => LablinkStatus::TooFewPoints,
        Error::EmptySeries => LablinkStatus::EmptySeries,
        Error::Io(_) => LablinkStatus::Io,
        Error::InvalidArgument(_) | Error::InvalidRange(_) => LablinkStatus::InvalidArgument,
        _ => LablinkStatus::Internal,
    };
    fail(status, format!("{}: {e}", e.code()))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, LablinkStatus> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| fail(LablinkStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, LablinkStatus> {
    opt_str(p, what)?.ok_or_else(|| fail(LablinkStatus::NullArgument, format!("{what} is null")))
}

fn give_string(s: String, out: *mut *mut c_char) {
    let c = CString::new(s.replace('\0', "\\u0000")).unwrap_or_default();
    // SAFETY: callers check `out` for null first.
    unsafe { *out = c.into_raw() };
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Opens a platform from TOML configuration text. A null or empty config
/// yields an in-memory platform with defaults.
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lablink_platform_open(config_toml: *const c_char, out: *mut *mut LablinkPlatform) -> LablinkStatus {
    if out.is_null() {
        return fail(LablinkStatus::NullArgument, "out is null");
    }
    *out = ptr::null_mut();
    let text = tri!(opt_str(config_toml, "config")).unwrap_or("");
    let config = match ServiceConfig::from_toml(text) {
        Ok(c) => c,
        Err(e) => return fail_core(e),
    };
    let lab = match Lab::open(config) {
        Ok(l) => Arc::new(l),
        Err(e) => return fail_core(e),
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build() {
        Ok(r) => r,
        Err(e) => return fail(LablinkStatus::Io, e.to_string()),
    };
    let router = lablink::api::router(lab.clone());
    *out = Box::into_raw(Box::new(LablinkPlatform { router, runtime, _lab: lab }));
    LablinkStatus::Ok
}

/// # Safety
/// `platform` is null or a handle from [`lablink_platform_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lablink_platform_free(platform: *mut LablinkPlatform) {
    if !platform.is_null() {
        drop(Box::from_raw(platform));
    }
}

/// Dispatches one API request, e.g. `("POST", "/api/v1/auth/token", NULL,
/// "{...}")`. On success `*out_status` holds the HTTP status and `*out_body`
/// the response body, which the caller frees with [`lablink_string_free`].
///
/// # Safety
/// `platform` is a live handle; `method` and `path` are NUL-terminated;
/// `token` and `body` are null or NUL-terminated; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn lablink_request(
    platform: *const LablinkPlatform,
    method: *const c_char,
    path: *const c_char,
    token: *const c_char,
    body: *const c_char,
    out_status: *mut u16,
    out_body: *mut *mut c_char,
) -> LablinkStatus {
    if platform.is_null() || out_status.is_null() || out_body.is_null() {
        return fail(LablinkStatus::NullArgument, "platform and outputs must not be null");
    }
    *out_body = ptr::null_mut();
    let p = &*platform;
    let method = tri!(req_str(method, "method"));
    let path = tri!(req_str(path, "path"));
    let token = tri!(opt_str(token, "token"));
    let body = tri!(opt_str(body, "body"));

    let Ok(method) = Method::from_bytes(method.as_bytes()) else {
        return fail(LablinkStatus::InvalidArgument, format!("bad method {method:?}"));
    };
    let mut req = Request::builder().method(method).uri(path);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    let req = match req.body(Body::from(body.unwrap_or("").to_owned())) {
        Ok(r) => r,
        Err(e) => return fail(LablinkStatus::InvalidArgument, e.to_string()),
    };
    let router = p.router.clone();
    let result = p.runtime.block_on(async move {
        let resp = router.oneshot(req).await.map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let bytes = axum::body::to_bytes(resp.into_body(), MAX_BODY).await.map_err(|e| e.to_string())?;
        Ok::<_, String>((status, bytes))
    });
    match result {
        Ok((status, bytes)) => {
            *out_status = status;
            give_string(String::from_utf8_lossy(&bytes).into_owned(), out_body);
            LablinkStatus::Ok
        }
        Err(e) => fail(LablinkStatus::Internal, e),
    }
}

/// Loss estimate from a wrapping transmission counter.
///
/// # Safety
/// `counters` points to `len` readable values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lablink_partial_loss(counters: *const i64, len: usize, modulus: i64, out: *mut LablinkLossEstimate) -> LablinkStatus {
    if counters.is_null() || out.is_null() {
        return fail(LablinkStatus::NullArgument, "counters and out must not be null");
    }
    let c = std::slice::from_raw_parts(counters, len);
    match lablink::faultwatch::estimate_loss(c, modulus) {
        Ok(e) => {
            *out = LablinkLossEstimate { expected: e.expected, received: e.received, loss_rate: e.loss_rate };
            LablinkStatus::Ok
        }
        Err(e) => fail_core(e),
    }
}

/// Whether sample times (epoch seconds) resolve a behavior of the given period.
///
/// # Safety
/// `times_s` points to `len` readable values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lablink_nyquist_check(times_s: *const f64, len: usize, behavior_period_s: f64, out: *mut LablinkNyquist) -> LablinkStatus {
    if times_s.is_null() || out.is_null() {
        return fail(LablinkStatus::NullArgument, "times_s and out must not be null");
    }
    let times = std::slice::from_raw_parts(times_s, len);
    if times.iter().any(|t| !t.is_finite()) {
        return fail(LablinkStatus::InvalidArgument, "sample times must be finite");
    }
    let samples = times.iter().map(|t| Sample::new(from_millis((t * 1000.0).round() as i64), 0.0)).collect();
    match lablink::tsstore::nyquist_check(&Series::new(Selector::new(), samples), behavior_period_s) {
        Ok(v) => {
            *out = LablinkNyquist { adequate: v.adequate, required_interval_s: v.required_interval_s, median_interval_s: v.median_interval_s };
            LablinkStatus::Ok
        }
        Err(e) => fail_core(e),
    }
}

/// Survey anonymous id. `salt_hex` is 32 hex characters and `open_time` is
/// RFC 3339.
///
/// # Safety
/// String arguments are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lablink_anonymous_id(
    salt_hex: *const c_char,
    username: *const c_char,
    provider_url: *const c_char,
    open_time: *const c_char,
    out: *mut *mut c_char,
) -> LablinkStatus {
    if out.is_null() {
        return fail(LablinkStatus::NullArgument, "out is null");
    }
    *out = ptr::null_mut();
    let salt_hex = tri!(req_str(salt_hex, "salt_hex"));
    let username = tri!(req_str(username, "username"));
    let provider_url = tri!(req_str(provider_url, "provider_url"));
    let open_time = tri!(req_str(open_time, "open_time"));
    let mut salt = [0u8; 16];
    if hex::decode_to_slice(salt_hex, &mut salt).is_err() {
        return fail(LablinkStatus::InvalidArgument, "salt_hex must be 32 hex characters");
    }
    let Some(open) = parse_rfc3339(open_time) else {
        return fail(LablinkStatus::InvalidArgument, format!("open_time {open_time:?} is not RFC 3339"));
    };
    give_string(lablink::surveys::anonymous_id(&SecretSalt::from_bytes(salt), username, provider_url, &open), out);
    LablinkStatus::Ok
}

/// Message of the last failure on this thread, or null. Owned by the
/// library and valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn lablink_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` is null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lablink_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

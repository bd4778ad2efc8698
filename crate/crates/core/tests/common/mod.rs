#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use lablink::clock::{parse_rfc3339, ManualClock, Timestamp};
use lablink::devices::{DeviceSpec, FieldSpec, ValueKind};
use lablink::floorplan::GridCell;
use lablink::registry::{Descriptor, Member, NewMember, Principal, Role};
use lablink::{Lab, ServiceConfig};
use serde_json::Value;
use tower::ServiceExt;

pub const CANONICAL: &str = r#"{"time":"2020-12-23T23:54:50.727Z","device_id":"503eaa71b92a","location_general":"Link Lab","location_specific":"grid_5","fieldname":"heartbeat","system_version":"lll-1.0.0","value":1,"counter":256}"#;

pub fn ts(s: &str) -> Timestamp {
    parse_rfc3339(s).expect("fixture timestamp")
}

pub fn new_member(username: &str, role: Role) -> NewMember {
    NewMember {
        username: username.into(),
        email: format!("{username}@lab.example"),
        display_name: format!("Display {username}"),
        role,
        descriptor: Descriptor::Participant,
        password: Some(format!("pw-{username}-secret")),
    }
}

pub struct Harness {
    pub lab: Arc<Lab>,
    pub clock: Arc<ManualClock>,
    pub admin: Member,
    pub token: String,
    router: axum::Router,
    rt: tokio::runtime::Runtime,
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub text: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or(Value::Null)
    }

    pub fn code(&self) -> String {
        self.json()["code"].as_str().unwrap_or_default().to_owned()
    }
}

impl Harness {
    pub fn new(config: ServiceConfig) -> Self {
        Self::at(config, ts("2021-01-04T12:00:00Z"))
    }

    pub fn at(config: ServiceConfig, now: Timestamp) -> Self {
        let clock = Arc::new(ManualClock::new(now));
        let lab = Arc::new(Lab::with_clock(config, clock.clone()).expect("lab"));
        let admin = lab.create_first_admin(new_member("root", Role::Admin)).expect("admin");
        let token = lab.issue_token(&admin.member_id).expect("token");
        let router = lablink::api::router(lab.clone());
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("runtime");
        Harness { lab, clock, admin, token, router, rt }
    }

    pub fn root(&self) -> Principal {
        self.admin.principal()
    }

    pub fn member(&self, username: &str, role: Role) -> (Member, String) {
        let m = self.lab.create_member(&self.root(), new_member(username, role)).expect("member");
        let t = self.lab.issue_token(&m.member_id).expect("token");
        (m, t)
    }

    pub fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<&str>) -> Reply {
        let mut req = Request::builder().method(Method::from_bytes(method.as_bytes()).unwrap()).uri(path);
        if let Some(t) = token {
            req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        if body.is_some() {
            req = req.header(header::CONTENT_TYPE, "application/json");
        }
        let req = req.body(Body::from(body.unwrap_or("").to_owned())).unwrap();
        let router = self.router.clone();
        self.rt.block_on(async move {
            let resp = router.oneshot(req).await.unwrap();
            let status = resp.status();
            let headers = resp.headers().clone();
            let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
            Reply { status, headers, text: String::from_utf8(bytes.to_vec()).unwrap() }
        })
    }

    pub fn get(&self, path: &str) -> Reply {
        self.call("GET", path, Some(&self.token), None)
    }

    pub fn post(&self, path: &str, body: &str) -> Reply {
        self.call("POST", path, Some(&self.token), Some(body))
    }

    /// Link Lab 10x10 with the example heartbeat device at grid_5.
    pub fn canonical_device(&self) {
        let plan = self.lab.create_floorplan(&self.root(), "Link Lab", 1.0, 10, 10).unwrap();
        let fields = vec![FieldSpec::new("heartbeat", ValueKind::Integer), FieldSpec::new("counter", ValueKind::Integer)];
        let mut spec = DeviceSpec::new("503eaa71b92a", fields).placed(plan.plan_id, GridCell::new(5, 0));
        spec.system_version = Some("lll-1.0.0".into());
        self.lab.register_device(&self.root(), spec).unwrap();
    }
}

#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use neurorag_core::engine::{Engine, TrainHyper};
use neurorag_core::types::RetrievalConfig;
use neurorag_service::api::{self, AppState};
use serde_json::Value;
use tower::ServiceExt;

pub struct App {
    pub state: Arc<AppState>,
    pub router: Router,
}

impl App {
    pub fn demo() -> Self {
        let engine = Arc::new(Engine::demo(RetrievalConfig::default()).unwrap());
        let state = AppState::new(engine, TrainHyper::default());
        App {
            router: api::router(state.clone()),
            state,
        }
    }

    pub async fn send(&self, method: Method, uri: &str, body: Option<&str>, key: Option<&str>) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        if let Some(k) = key {
            req = req.header(api::IDEMPOTENCY_HEADER, k);
        }
        let req = req.body(Body::from(body.unwrap_or("").to_string())).unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, headers, bytes }
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.send(Method::GET, uri, None, None).await
    }

    pub async fn post(&self, uri: &str, body: &str) -> Reply {
        self.send(Method::POST, uri, Some(body), None).await
    }

    pub async fn new_session(&self) -> String {
        let r = self.post("/sessions", "").await;
        assert_eq!(r.status, StatusCode::CREATED);
        r.json()["session_id"].as_str().unwrap().to_string()
    }

    pub async fn turn(&self, session: &str, text: &str) -> Value {
        let body = serde_json::json!({ "speaker": "patient", "text": text }).to_string();
        let r = self.post(&format!("/sessions/{session}/turns"), &body).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        r.json()
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", self.text()))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }

    pub fn error_kind(&self) -> String {
        self.json()["error"]["kind"].as_str().unwrap().to_string()
    }
}

pub fn provenance_validator() -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(api::PROVENANCE_SCHEMA).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

pub fn assert_valid(v: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

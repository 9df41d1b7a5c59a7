#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use iskg_core::corpus::{generate_synthetic, LabeledSentence, Split, SynthGrammar};
use iskg_core::model::{Hainex, LossKind, ModelConfig};
use iskg_core::parallel::Execution;
use iskg_core::trainer::{init_model, train, TrainConfig};
use iskg_service::{router, AppState, ServiceConfig};
use serde_json::Value;
use tower::ServiceExt;

pub fn app(state: AppState) -> Router {
    router(state, &ServiceConfig::default())
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map(|b| b.to_string());
    call_raw(app, method, uri, body).await
}

pub async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or(Body::empty(), Body::from)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

/// Training config small enough to overfit in well under a second.
pub fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 1,
        lr: 5e-2,
        loss: LossKind::Mle,
        seed: 3,
        execution: Execution::Sequential,
        keep_best: false,
        model: ModelConfig::tiny(),
    }
}

/// A tiny model trained to reproduce one synthetic sentence.
pub fn overfit_model() -> (Hainex, LabeledSentence) {
    let corpus = generate_synthetic(&SynthGrammar::default_hazop(2), 1);
    let mut ds = corpus.dataset.clone();
    ds.splits = Some(vec![Split::Train]);
    let cfg = TrainConfig {
        model: {
            let mut m = ModelConfig::tiny();
            m.encoder.d_model = 8;
            m.encoder.d_ff = 12;
            m.hidden = 8;
            m
        },
        ..tiny_config(200)
    };
    let model = train(init_model(&ds, &cfg).unwrap(), &ds, &cfg, None).unwrap().model;
    (model, ds.sentences[0].clone())
}

#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refinpaint::api::{router, AppState};
use refinpaint::session::{Models, SessionStore};
use refinpaint_core::corpus::generate_toy_corpus;
use refinpaint_core::engine::EngineConfig;
use refinpaint_core::midi::{write_smf, Score};
use refinpaint_core::models::{Feedback, Inpainter, ModelConfig, Network};
use refinpaint_core::remi::VOCAB_SIZE;
use serde_json::Value;
use tower::ServiceExt;

pub fn tiny_models(seed: u64) -> Models {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = |enc, dec| ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: enc,
        n_dec_layers: dec,
        max_len: 128,
        dropout_p: 0.0,
        vocab_size: VOCAB_SIZE,
    };
    let inpainter = Inpainter::build(config(1, 1), &mut rng).unwrap();
    let mut feedback = Feedback::build(config(1, 0), &mut rng).unwrap();
    // An untrained critic is flat at 0.5; give it opinions.
    let head = feedback.params().find("head.weight").unwrap();
    for v in feedback.params_mut().get_mut(head).data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    Models { inpainter, feedback }
}

pub fn toy_score(seed: u64) -> Score {
    generate_toy_corpus(1, &mut ChaCha8Rng::seed_from_u64(seed)).remove(0)
}

pub fn toy_midi(seed: u64) -> Vec<u8> {
    write_smf(&toy_score(seed))
}

pub fn app(dir: &std::path::Path, engine: EngineConfig) -> Router {
    let store = SessionStore::open(dir).unwrap();
    router(Arc::new(AppState::new(tiny_models(3), engine, store)))
}

pub const BOUNDARY: &str = "XyZboundaryZyX";

pub fn multipart(file: &[u8], seed: Option<u64>) -> Vec<u8> {
    let mut body = Vec::new();
    if let Some(s) = seed {
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"seed\"\r\n\r\n{s}\r\n").as_bytes(),
        );
    }
    body.extend_from_slice(
        format!(
            "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"in.mid\"\r\n\
             Content-Type: audio/midi\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(file);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub struct Reply {
    pub status: StatusCode,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {:?}", String::from_utf8_lossy(&self.bytes)))
    }
}

pub async fn send(app: &Router, req: Request<Body>) -> Reply {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, bytes }
}

pub async fn create(app: &Router, midi: &[u8], key: Option<&str>) -> Reply {
    let mut req = Request::post("/v1/sessions")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"));
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    send(app, req.body(Body::from(multipart(midi, None))).unwrap()).await
}

pub async fn post_json(app: &Router, uri: &str, body: &str, key: Option<&str>) -> Reply {
    let mut req = Request::post(uri).header("content-type", "application/json");
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    send(app, req.body(Body::from(body.to_string())).unwrap()).await
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

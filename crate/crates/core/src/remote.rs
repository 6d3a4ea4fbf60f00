// SPDX-License-Identifier: Apache-2.0

//! HTTP clients for the chat, embedding and simulator services.

use serde_json::{json, Value};
use std::time::Duration;
use thiserror::Error;

use crate::agents::{ChatBackend, ChatRequest};
use crate::backend::BackendError;
use crate::clustering::EmbeddingBackend;
use crate::model::TextSegment;
use crate::scoring::{Simulator, SimulatorError};

pub const LLM_URL_VAR: &str = "NEURONSCOPE_LLM_URL";
pub const LLM_KEY_VAR: &str = "NEURONSCOPE_LLM_KEY";
pub const EMB_URL_VAR: &str = "NEURONSCOPE_EMB_URL";
pub const EMB_KEY_VAR: &str = "NEURONSCOPE_EMB_KEY";
pub const SIM_URL_VAR: &str = "NEURONSCOPE_SIM_URL";
pub const SIM_KEY_VAR: &str = "NEURONSCOPE_SIM_KEY";

pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("environment variable {0} is not set")]
pub struct MissingEnv(pub &'static str);

/// Endpoint plus optional bearer token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub url: String,
    pub key: Option<String>,
}

impl Endpoint {
    pub fn from_env(url_var: &'static str, key_var: &'static str) -> Result<Self, MissingEnv> {
        let url = std::env::var(url_var)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .ok_or(MissingEnv(url_var))?;
        let key = std::env::var(key_var).ok().filter(|s| !s.is_empty());
        Ok(Self { url, key })
    }
}

/// JSON-over-HTTP with bounded retries and exponential backoff. Transport
/// errors, 429 and 5xx responses are retried; other statuses fail at once.
#[derive(Debug, Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    key: Option<String>,
    pub attempts: u32,
    pub backoff: Duration,
}

impl HttpClient {
    pub fn new(key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            key,
            attempts: MAX_ATTEMPTS,
            backoff: Duration::from_millis(500),
        }
    }

    pub fn post_json(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let mut last = String::new();
        for attempt in 1..=self.attempts {
            if attempt > 1 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 2));
            }
            let mut req = self.agent.post(url).header("Content-Type", "application/json");
            if let Some(k) = &self.key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            match req.send(body.to_string()) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text).map_err(|e| BackendError {
                            message: format!("invalid JSON from {url}: {e}"),
                            attempts: attempt,
                        });
                    }
                    last = format!("HTTP {status} from {url}: {}", text.chars().take(200).collect::<String>());
                    if status != 429 && status < 500 {
                        return Err(BackendError {
                            message: last,
                            attempts: attempt,
                        });
                    }
                }
                Err(e) => last = format!("request to {url} failed: {e}"),
            }
            log::warn!("attempt {attempt}/{} failed: {last}", self.attempts);
        }
        Err(BackendError {
            message: last,
            attempts: self.attempts,
        })
    }
}

fn malformed(what: &str) -> BackendError {
    BackendError::new(format!("malformed response: {what}"))
}

/// Chat-completions style endpoint (`POST {base}/chat/completions`).
pub struct RemoteChat {
    client: HttpClient,
    url: String,
    model: String,
}

impl RemoteChat {
    pub fn new(endpoint: Endpoint, model: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: format!("{}/chat/completions", endpoint.url.trim_end_matches('/')),
            client: HttpClient::new(endpoint.key, timeout),
            model: model.into(),
        }
    }

    pub fn client_mut(&mut self) -> &mut HttpClient {
        &mut self.client
    }
}

impl ChatBackend for RemoteChat {
    fn generate(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError> {
        let mut out = Vec::with_capacity(req.n_samples);
        // Some servers ignore `n`; keep asking until enough choices arrive.
        for round in 0..req.n_samples.max(1) {
            let body = json!({
                "model": self.model,
                "messages": [
                    {"role": "system", "content": req.system},
                    {"role": "user", "content": req.user},
                ],
                "n": req.n_samples - out.len(),
                "temperature": req.temperature,
                "seed": req.seed.wrapping_add(round as u64) % (1u64 << 53),
            });
            let resp = self.client.post_json(&self.url, &body)?;
            let choices = resp["choices"].as_array().ok_or_else(|| malformed("missing choices"))?;
            for c in choices {
                let content = c["message"]["content"]
                    .as_str()
                    .ok_or_else(|| malformed("choice without message content"))?;
                out.push(content.to_string());
            }
            if out.len() >= req.n_samples || choices.is_empty() {
                break;
            }
        }
        out.truncate(req.n_samples);
        if out.len() != req.n_samples {
            return Err(BackendError::new(format!(
                "expected {} completions, got {}",
                req.n_samples,
                out.len()
            )));
        }
        Ok(out)
    }
}

/// Embedding endpoint (`POST {base}/embeddings`).
pub struct RemoteEmbedder {
    client: HttpClient,
    url: String,
    model: String,
}

impl RemoteEmbedder {
    pub fn new(endpoint: Endpoint, model: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: format!("{}/embeddings", endpoint.url.trim_end_matches('/')),
            client: HttpClient::new(endpoint.key, timeout),
            model: model.into(),
        }
    }
}

impl EmbeddingBackend for RemoteEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp = self
            .client
            .post_json(&self.url, &json!({"model": self.model, "input": texts}))?;
        let data = resp["data"].as_array().ok_or_else(|| malformed("missing data"))?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, d) in data.iter().enumerate() {
            let idx = d["index"].as_u64().map_or(pos, |i| i as usize);
            let v: Vec<f64> = serde_json::from_value(d["embedding"].clone())
                .map_err(|_| malformed("embedding is not a number array"))?;
            rows.push((idx, v));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

/// Activation simulator endpoint (`POST {url}`).
pub struct RemoteSimulator {
    client: HttpClient,
    url: String,
}

impl RemoteSimulator {
    pub fn new(endpoint: Endpoint, timeout: Duration) -> Self {
        Self {
            url: endpoint.url,
            client: HttpClient::new(endpoint.key, timeout),
        }
    }
}

pub fn simulator_request(explanation: &str, segments: &[TextSegment]) -> Value {
    json!({
        "explanation": explanation,
        "segments": segments
            .iter()
            .map(|s| json!({"segment_id": s.segment_id, "tokens": s.tokens}))
            .collect::<Vec<_>>(),
    })
}

impl Simulator for RemoteSimulator {
    fn simulate(&self, explanation: &str, segments: &[TextSegment]) -> Result<Vec<Vec<f64>>, SimulatorError> {
        let fail = |segment_id: Option<String>, message: String| SimulatorError::Failed { segment_id, message };
        let resp = self
            .client
            .post_json(&self.url, &simulator_request(explanation, segments))
            .map_err(|e| fail(None, e.to_string()))?;
        let preds: Vec<Vec<f64>> = serde_json::from_value(resp["predictions"].clone())
            .map_err(|_| fail(None, "response lacks a numeric predictions array".into()))?;
        if preds.len() != segments.len() {
            return Err(fail(None, format!("{} prediction rows for {} segments", preds.len(), segments.len())));
        }
        for (row, seg) in preds.iter().zip(segments) {
            if row.len() != seg.tokens.len() {
                return Err(fail(
                    Some(seg.segment_id.clone()),
                    format!("{} predictions for {} tokens", row.len(), seg.tokens.len()),
                ));
            }
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentKind;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves the given (status, body) responses in order, one per
    /// connection, and reports each request's path, headers and body.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String, Value)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                tx.send((path, headers, serde_json::from_slice(&buf).unwrap_or(Value::Null))).ok();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), rx)
    }

    fn fast(mut c: HttpClient) -> HttpClient {
        c.backoff = Duration::from_millis(1);
        c
    }

    #[test]
    fn chat_wire_format() {
        let (url, rx) = serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"one"}},{"message":{"content":"two"}}]}"#.into(),
        )]);
        let chat = RemoteChat::new(Endpoint { url: url + "/v1/", key: Some("k1".into()) }, "m", Duration::from_secs(5));
        let out = chat
            .generate(&ChatRequest {
                agent: AgentKind::Refinement,
                system: "S".into(),
                user: "U".into(),
                n_samples: 2,
                temperature: 0.7,
                seed: 4,
            })
            .unwrap();
        assert_eq!(out, vec!["one", "two"]);
        let (path, headers, body) = rx.recv().unwrap();
        assert_eq!(path, "/v1/chat/completions");
        assert!(headers.to_lowercase().contains("authorization: bearer k1"));
        assert_eq!(body["messages"][0], json!({"role": "system", "content": "S"}));
        assert_eq!(body["messages"][1], json!({"role": "user", "content": "U"}));
        assert_eq!(body["n"], 2);
        assert_eq!(body["model"], "m");
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, rx) = serve(vec![
            (503, "{}".into()),
            (500, "{}".into()),
            (200, r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#.into()),
        ]);
        let mut emb = RemoteEmbedder::new(Endpoint { url, key: None }, "e", Duration::from_secs(5));
        emb.client = fast(emb.client);
        let out = emb.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (path, _, body) = rx.recv().unwrap();
        assert_eq!(path, "/embeddings");
        assert_eq!(body["input"], json!(["a", "b"]));
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let (url, _rx) = serve(vec![(502, "{}".into()), (502, "{}".into()), (502, "{}".into())]);
        let mut emb = RemoteEmbedder::new(Endpoint { url, key: None }, "e", Duration::from_secs(5));
        emb.client = fast(emb.client);
        let err = emb.embed(&["a".into()]).unwrap_err();
        assert_eq!(err.attempts, 3);
        assert!(err.message.contains("502"));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, _rx) = serve(vec![(401, r#"{"error":"no"}"#.into())]);
        let emb = RemoteEmbedder::new(Endpoint { url, key: None }, "e", Duration::from_secs(5));
        let err = emb.embed(&["a".into()]).unwrap_err();
        assert_eq!(err.attempts, 1);
    }

    #[test]
    fn simulator_wire_format() {
        let (url, rx) = serve(vec![(200, r#"{"predictions":[[0.0,9.5],[1.0]]}"#.into())]);
        let sim = RemoteSimulator::new(Endpoint { url: url + "/simulate", key: Some("s".into()) }, Duration::from_secs(5));
        let segs = vec![
            TextSegment { segment_id: "a".into(), text: "x y".into(), tokens: vec!["x".into(), " y".into()] },
            TextSegment { segment_id: "b".into(), text: "z".into(), tokens: vec!["z".into()] },
        ];
        let out = sim.simulate("E", &segs).unwrap();
        assert_eq!(out, vec![vec![0.0, 9.5], vec![1.0]]);
        let (path, _, body) = rx.recv().unwrap();
        assert_eq!(path, "/simulate");
        assert_eq!(
            body,
            json!({"explanation": "E", "segments": [
                {"segment_id": "a", "tokens": ["x", " y"]},
                {"segment_id": "b", "tokens": ["z"]},
            ]})
        );
    }

    #[test]
    fn simulator_shape_error_names_segment() {
        let (url, _rx) = serve(vec![(200, r#"{"predictions":[[0.0],[1.0]]}"#.into())]);
        let sim = RemoteSimulator::new(Endpoint { url, key: None }, Duration::from_secs(5));
        let segs = vec![
            TextSegment { segment_id: "a".into(), text: "x".into(), tokens: vec!["x".into()] },
            TextSegment { segment_id: "b".into(), text: "z w".into(), tokens: vec!["z".into(), "w".into()] },
        ];
        match sim.simulate("E", &segs) {
            Err(SimulatorError::Failed { segment_id, .. }) => assert_eq!(segment_id.as_deref(), Some("b")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_env_is_reported() {
        assert_eq!(
            Endpoint::from_env("NEURONSCOPE_TEST_UNSET_URL", "NEURONSCOPE_TEST_UNSET_KEY").unwrap_err(),
            MissingEnv("NEURONSCOPE_TEST_UNSET_URL")
        );
    }
}

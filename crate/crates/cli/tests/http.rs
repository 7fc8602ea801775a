use std::net::SocketAddr;
use std::sync::Arc;

use serde_json::{json, Value};

use capfuse::corpus::PaperRecord;
use capfuse::model::{CapabilitySource, Objective};
use capfuse::service::{ModelInfo, OutcomeModel, Registry};
use capfuse_cli::server;

/// Rating grows with idea length; the acceptance logit with team size.
struct Stub {
    id: &'static str,
    source: CapabilitySource,
}

impl OutcomeModel for Stub {
    fn info(&self) -> ModelInfo {
        ModelInfo {
            model_id: self.id.into(),
            architecture: "three-way/sa1".into(),
            fusion_variant: "sa1".into(),
            capability_source: Some(self.source),
        }
    }

    fn raw_score(&self, record: &PaperRecord, objective: Objective) -> capfuse::Result<f64> {
        let idea = record.idea_text.as_deref().unwrap_or("");
        Ok(match objective {
            Objective::Rating => idea.len() as f64 / 4.0,
            Objective::Acceptance => record.authors.len() as f64 - 2.0,
        })
    }
}

fn start(models: Vec<Stub>, static_dir: Option<std::path::PathBuf>) -> SocketAddr {
    let mut reg = Registry::new();
    for m in models {
        reg.add(Arc::new(m)).unwrap();
    }
    server::spawn(server::router(Arc::new(reg), static_dir)).unwrap()
}

fn predicted() -> Stub {
    Stub {
        id: "pred",
        source: CapabilitySource::Predicted,
    }
}

/// Status and JSON body, for success and error statuses alike.
fn call(addr: SocketAddr, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
    let req = ureq::request(method, &format!("http://{addr}{path}"));
    let res = match body {
        Some(b) => req.send_json(b),
        None => req.call(),
    };
    let resp = match res {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => panic!("transport error: {e}"),
    };
    let status = resp.status();
    (status, resp.into_json().unwrap_or(Value::Null))
}

fn submission() -> Value {
    json!({
        "title": "t",
        "authors": [{"display_name": "Ada Li", "position": "Professor"}, {"display_name": "Bo Chen"}],
        "venue": "ICLR2024",
        "idea": "a short idea"
    })
}

#[test]
fn health_and_models() {
    let addr = start(vec![predicted()], None);
    let (s, v) = call(addr, "GET", "/v1/health", None);
    assert_eq!(s, 200);
    assert_eq!(v["models_loaded"], 1);
    let (s, v) = call(addr, "GET", "/v1/models", None);
    assert_eq!(s, 200);
    assert_eq!(v["models"][0]["model_id"], "pred");
    assert_eq!(v["models"][0]["capability_source"], "predicted");
}

#[test]
fn predict_returns_served_ranges() {
    let addr = start(vec![predicted()], None);
    let (s, v) = call(addr, "POST", "/v1/predict", Some(json!({ "submission": submission() })));
    assert_eq!(s, 200, "{v}");
    // "a short idea" is 12 characters: 12 / 4 = 3
    assert!((v["rating"].as_f64().unwrap() - 3.0).abs() < 1e-12);
    let p = v["acceptance_probability"].as_f64().unwrap();
    assert!((p - 0.5).abs() < 1e-12);
    assert_eq!(v["model_id"], "pred");
}

#[test]
fn predict_rejects_bad_input() {
    let addr = start(vec![predicted()], None);
    let mut sub = submission();
    sub.as_object_mut().unwrap().remove("idea");
    let (s, v) = call(addr, "POST", "/v1/predict", Some(json!({ "submission": sub })));
    assert_eq!(s, 400);
    assert!(v["error"].as_str().unwrap().contains("idea"), "{v}");

    let req = ureq::post(&format!("http://{addr}/v1/predict")).set("Content-Type", "application/json");
    match req.send_string("{not json") {
        Err(ureq::Error::Status(code, _)) => assert_eq!(code, 400),
        other => panic!("expected 400, got {other:?}"),
    }
}

#[test]
fn explicit_model_requires_capability_text() {
    let addr = start(
        vec![Stub {
            id: "exp",
            source: CapabilitySource::Explicit,
        }],
        None,
    );
    let (s, _) = call(addr, "POST", "/v1/predict", Some(json!({ "submission": submission() })));
    assert_eq!(s, 400);
    let mut sub = submission();
    sub["capability"] = json!("The team's capability is strong.");
    let (s, _) = call(addr, "POST", "/v1/predict", Some(json!({ "submission": sub })));
    assert_eq!(s, 200);
}

#[test]
fn empty_registry_is_unavailable() {
    let addr = start(Vec::new(), None);
    let (s, v) = call(addr, "POST", "/v1/predict", Some(json!({ "submission": submission() })));
    assert_eq!(s, 503, "{v}");
    let (s, v) = call(addr, "GET", "/v1/health", None);
    assert_eq!(s, 200);
    assert_eq!(v["models_loaded"], 0);
}

#[test]
fn recommend_ideas_picks_the_highest_rating() {
    let addr = start(vec![predicted()], None);
    let body = json!({
        "base": submission(),
        "candidates": [
            {"id": "short", "idea": "tiny"},
            {"id": "long", "idea": "a considerably longer idea description"},
            {"id": "mid", "idea": "a medium idea"}
        ]
    });
    let (s, v) = call(addr, "POST", "/v1/recommend/ideas", Some(body));
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["kind"], "ideas");
    assert_eq!(v["best"], "long");
    let ids: Vec<&str> = v["ranking"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["long", "mid", "short"]);
}

#[test]
fn recommend_authors_by_acceptance() {
    let addr = start(vec![predicted()], None);
    let author = |n: &str| json!({"display_name": n});
    let body = json!({
        "base": submission(),
        "objective": "acceptance",
        "candidates": [
            {"id": "solo", "authors": [author("A")]},
            {"id": "trio", "authors": [author("A"), author("B"), author("C")]}
        ]
    });
    let (s, v) = call(addr, "POST", "/v1/recommend/authors", Some(body));
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["best"], "trio");
    for r in v["ranking"].as_array().unwrap() {
        let p = r["score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn recommend_kind_must_match_the_route() {
    let addr = start(vec![predicted()], None);
    let body = json!({
        "base": submission(),
        "kind": "author_groups",
        "candidates": [{"id": "x", "idea": "an idea"}]
    });
    let (s, v) = call(addr, "POST", "/v1/recommend/ideas", Some(body));
    assert_eq!(s, 400);
    assert!(v["error"].as_str().unwrap().contains("does not match"), "{v}");
    let (s, _) = call(addr, "POST", "/v1/recommend/ideas", Some(json!([1, 2])));
    assert_eq!(s, 400);
}

#[test]
fn static_files_and_unknown_routes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>what if</h1>").unwrap();
    let addr = start(vec![predicted()], Some(dir.path().to_path_buf()));
    let page = ureq::get(&format!("http://{addr}/")).call().unwrap().into_string().unwrap();
    assert_eq!(page, "<h1>what if</h1>");
    // API routes still win over the static fallback
    let (s, _) = call(addr, "GET", "/v1/health", None);
    assert_eq!(s, 200);

    let bare = start(vec![predicted()], None);
    let (s, v) = call(bare, "GET", "/nowhere", None);
    assert_eq!(s, 404);
    assert!(v["error"].is_string());
}

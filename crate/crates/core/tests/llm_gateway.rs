use std::collections::VecDeque;
use std::sync::Mutex;

use capfuse::corpus::{AuthorRecord, PaperRecord};
use capfuse::llm::{ChatRequest, ChatTransport, Gateway, GatewayConfig, REASK_SUFFIX};
use capfuse::{Error, Result};

/// Replies are chosen by record id (found in the user message) and popped
/// in order; every request is logged.
struct Scripted {
    script: Mutex<Vec<(String, VecDeque<Result<String>>)>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl Scripted {
    fn new(script: Vec<(&str, Vec<Result<String>>)>) -> Self {
        Self {
            script: Mutex::new(script.into_iter().map(|(k, v)| (k.to_string(), v.into())).collect()),
            log: Mutex::new(Vec::new()),
        }
    }
}

impl ChatTransport for Scripted {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.log.lock().unwrap().push(request.clone());
        let user = &request.messages.iter().find(|m| m.role == "user").unwrap().content;
        let mut script = self.script.lock().unwrap();
        let (_, queue) = script
            .iter_mut()
            .find(|(k, _)| user.contains(k.as_str()))
            .expect("scripted key present");
        queue.pop_front().unwrap_or_else(|| Err(Error::Transport("script exhausted".into())))
    }
}

impl ChatTransport for &Scripted {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (*self).complete(request)
    }
}

fn record(id: &str) -> PaperRecord {
    PaperRecord {
        record_id: id.into(),
        title: "t".into(),
        r#abstract: String::new(),
        authors: vec![AuthorRecord {
            display_name: "Ada Smith".into(),
            position: "Professor".into(),
            affiliation: "Uni".into(),
            country: "us".into(),
            order_index: 0,
        }],
        venue: "ICLR2024".into(),
        idea_text: Some(format!("idea marker {id}")),
        capability_text: Some("The authors' capability is high.".into()),
        avg_rating: None,
        accepted: None,
        first_author_key: "ada smith".into(),
    }
}

fn config() -> GatewayConfig {
    GatewayConfig {
        max_concurrency: 1,
        ..GatewayConfig::default()
    }
}

const GOOD: &str = r#"{"acc_chance": 0.4, "rating_ave": 6.0}"#;

#[test]
fn judge_retries_transport_errors_within_budget() {
    let t = Scripted::new(vec![(
        "marker r1",
        vec![Err(Error::Transport("503".into())), Err(Error::Transport("timeout".into())), Ok(GOOD.into())],
    )]);
    let gw = Gateway::new(config(), &t).unwrap();
    let out = gw.judge_paper(&record("r1")).unwrap();
    assert_eq!(out.rating_ave, 6.0);
    assert_eq!(gw.outbound_calls(), 3);
    assert!(t.log.lock().unwrap().iter().all(|r| r.temperature == 0.0));
}

#[test]
fn judge_gives_up_after_three_attempts() {
    let t = Scripted::new(vec![(
        "marker r1",
        (0..5).map(|_| Err(Error::Transport("down".into()))).collect(),
    )]);
    let gw = Gateway::new(config(), &t).unwrap();
    assert!(gw.judge_paper(&record("r1")).is_err());
    assert_eq!(gw.outbound_calls(), 3);
}

#[test]
fn unreadable_reply_gets_one_reask_then_exclusion() {
    let t = Scripted::new(vec![
        ("marker ok", vec![Ok("I think {'acc_chance': 0.1, 'rating_ave': 3}".into())]),
        ("marker fixed", vec![Ok("no idea".into()), Ok(GOOD.into())]),
        ("marker bad", vec![Ok("nope".into()), Ok("still nope".into()), Ok(GOOD.into())]),
        ("marker range", vec![Ok(r#"{"acc_chance": 0.5, "rating_ave": 12}"#.into())]),
    ]);
    let gw = Gateway::new(config(), &t).unwrap();
    let recs = [record("ok"), record("fixed"), record("bad"), record("range")];
    let batch = gw.judge_records(&recs);
    let ids: Vec<_> = batch.outputs.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ["ok", "fixed"]);
    let excluded: Vec<_> = batch.excluded.iter().map(|e| e.record_id.as_str()).collect();
    assert_eq!(excluded, ["bad", "range"]);
    // re-ask appends the instruction as the final user turn
    let log = t.log.lock().unwrap();
    let reask = log.iter().find(|r| r.messages.len() > 2).unwrap();
    assert_eq!(reask.messages.last().unwrap().content, REASK_SUFFIX);
    // exactly one re-ask for the persistently bad record
    assert_eq!(log.iter().filter(|r| r.messages[1].content.contains("marker bad")).count(), 2);
}

#[test]
fn user_message_binds_json_values() {
    let t = Scripted::new(vec![("marker j", vec![Ok(GOOD.into())])]);
    let gw = Gateway::new(config(), &t).unwrap();
    gw.judge_paper(&record("j")).unwrap();
    let log = t.log.lock().unwrap();
    let user = &log[0].messages[1].content;
    let v: serde_json::Value = serde_json::from_str(user).unwrap();
    assert_eq!(v["venue"], "ICLR2024");
    assert_eq!(v["authors"][0]["institution"], "Uni");
    assert_eq!(log[0].messages[0].role, "system");
}

#[test]
fn cache_short_circuits_repeat_requests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GatewayConfig {
        cache_dir: Some(dir.path().to_path_buf()),
        ..config()
    };
    let t = Scripted::new(vec![("marker c", vec![Ok(GOOD.into())])]);
    let gw = Gateway::new(cfg.clone(), &t).unwrap();
    let a = gw.judge_paper(&record("c")).unwrap();
    let b = gw.judge_paper(&record("c")).unwrap();
    assert_eq!(a, b);
    assert_eq!(gw.outbound_calls(), 1);
    let files: Vec<_> = std::fs::read_dir(dir.path().join("judge").join("judge-v1")).unwrap().collect();
    assert_eq!(files.len(), 1);
    // a different model is a different key
    let other = Gateway::new(GatewayConfig { model: "other".into(), ..cfg }, &t).unwrap();
    assert!(other.judge_paper(&record("c")).is_err());
}

#[test]
fn idea_and_capability_extraction() {
    let cap = "The authors' capability is high in mathematical derivation, medium in theoretical analysis/proving, high in model/architecture design, low in data collection, high in experimental design, and high in paper presentation. Core expertise includes a (high), b (medium), c (high), d (low), and e (high).";
    let t = Scripted::new(vec![
        ("PAPER-A", vec![Ok("We study X.\n It achieves 12.5 % gains.".into())]),
        ("PAPER-B", vec![Ok(cap.into())]),
    ]);
    let gw = Gateway::new(config(), &t).unwrap();
    let idea = gw.extract_idea("PAPER-A body").unwrap();
    assert_eq!(idea.flags.len(), 1);
    let prof = gw.extract_capability("PAPER-B body", "Ada Smith, Professor, Uni").unwrap();
    assert_eq!(prof.rendered_text, cap);
    assert!(matches!(gw.extract_idea("  "), Err(Error::Precondition(_))));
}

#[test]
fn missing_fields_are_reported() {
    let t = Scripted::new(vec![]);
    let gw = Gateway::new(config(), &t).unwrap();
    let mut r = record("m");
    r.idea_text = None;
    match gw.judge_paper(&r) {
        Err(Error::MissingField { field, .. }) => assert_eq!(field, "idea"),
        other => panic!("unexpected {other:?}"),
    }
}

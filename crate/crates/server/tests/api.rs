mod common;

use std::time::{Duration, Instant};

use common::{llm_pipeline, SseReader, TestServer};
use crskit::monitor::Monitor;
use crskit::testkit::{LlmScript, StubLlm};
use reqwest::StatusCode;
use serde_json::{json, Value};

const UNKNOWN: &str = "00000000-0000-0000-0000-000000000000";

#[tokio::test]
async fn lists_pipelines_with_their_modules() {
    let server = TestServer::offline().await;
    let list: Value = server.get("/api/pipelines").await.json().await.unwrap();
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0]["id"], "expansion");
    assert_eq!(list[0]["kind"], "expansion");
    assert_eq!(list[0]["name"], "demo-expansion");
    assert_eq!(
        list[0]["modules"],
        json!({"rec": "demo-rec", "gen": "demo-expansion-gen", "proc": "demo-linker"})
    );
    assert_eq!(list[0]["default_kwargs"]["rec"]["top_k"], 3);
    assert_eq!(list[1]["id"], "fillblank");

    let empty = TestServer::spawn(vec![]).await;
    let list: Value = empty.get("/api/pipelines").await.json().await.unwrap();
    assert_eq!(list, json!([]));
}

#[tokio::test]
async fn session_creation_codes() {
    let server = TestServer::offline().await;
    let a = server.session("expansion", "info").await;
    let b = server.session("expansion", "debug").await;
    assert_ne!(a, b);
    let r = server
        .post("/api/sessions", json!({"pipeline_id": "nope", "mode": "info"}))
        .await;
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let r = server
        .post("/api/sessions", json!({"pipeline_id": "expansion", "mode": "verbose"}))
        .await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let r = server.post("/api/sessions", json!({"mode": "info"})).await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn offline_exchange_streams_and_finishes() {
    let server = TestServer::offline().await;
    let sid = server.session("expansion", "info").await;
    let (status, events) = server.message(&sid, "Hello", json!({})).await;
    assert_eq!(status, StatusCode::OK);
    let done = events.last().unwrap();
    assert_eq!(done.event, "done");
    assert!(!done.data["text"].as_str().unwrap().is_empty());
    assert_eq!(done.data["recommendations"].as_array().unwrap().len(), 3);
    assert!(done.data.get("trace_id").is_none(), "info mode hides trace ids");
    let chunks: String = events
        .iter()
        .filter(|e| e.event == "chunk")
        .map(|e| e.data["text"].as_str().unwrap())
        .collect();
    assert!(!chunks.is_empty());

    let hist = server.history(&sid).await;
    let msgs = hist["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 2);
    assert_eq!(msgs[0]["role"], "User");
    assert_eq!(msgs[0]["text"], "Hello");
    assert_eq!(msgs[1]["role"], "System");
    assert_eq!(msgs[1]["text"], done.data["text"]);
}

#[tokio::test]
async fn message_error_codes() {
    let server = TestServer::offline().await;
    let sid = server.session("expansion", "info").await;
    let (status, _) = server.message(&sid, "a <sep> b", json!({})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = server.message(&sid, "hi", json!([1, 2])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = server.message(UNKNOWN, "hi", json!({})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(server.history(&sid).await["messages"], json!([]));
}

#[tokio::test]
async fn pipeline_failures_end_with_error_event() {
    let server = TestServer::offline().await;
    let sid = server.session("fillblank", "info").await;
    let (status, events) = server
        .message(&sid, "I like <entity>Up (2009)</entity>", json!({"gen": {"slots": 40}}))
        .await;
    assert_eq!(status, StatusCode::OK);
    let last = events.last().unwrap();
    assert_eq!(last.event, "error");
    assert_eq!(last.data["kind"], "insufficient_recommendations");
    assert_eq!(server.history(&sid).await["messages"], json!([]));
    // The session stays usable.
    let (_, events) = server
        .message(&sid, "I like <entity>Up (2009)</entity>", json!({"gen": {"slots": 2}}))
        .await;
    assert_eq!(events.last().unwrap().event, "done");
    assert_eq!(events.last().unwrap().data["recommendations"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn history_preserves_markup_and_downloads_as_attachment() {
    let server = TestServer::offline().await;
    let sid = server.session("fillblank", "info").await;
    let fresh = server.get(&format!("/api/sessions/{sid}/history")).await;
    let disposition = fresh.headers()["content-disposition"].to_str().unwrap().to_string();
    assert!(disposition.starts_with("attachment"), "{disposition}");
    assert_eq!(fresh.json::<Value>().await.unwrap()["messages"], json!([]));

    let text = "I like <entity>Coco (2017)</entity> and <entity>Up (2009)</entity>";
    server.message(&sid, text, json!({})).await;
    let hist = server.history(&sid).await;
    assert_eq!(hist["messages"][0]["text"], text);
    let reply = hist["messages"][1]["text"].as_str().unwrap();
    assert!(reply.contains("<entity>"), "{reply}");
    assert_eq!(hist["messages"][1]["recommendations"].as_array().unwrap().len(), 3);

    let r = server.get(&format!("/api/sessions/{UNKNOWN}/history")).await;
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn refresh_clears_history_and_is_idempotent() {
    let server = TestServer::offline().await;
    let sid = server.session("expansion", "info").await;
    server.message(&sid, "Hello", json!({})).await;
    server.message(&sid, "Something funny?", json!({})).await;
    assert_eq!(server.history(&sid).await["messages"].as_array().unwrap().len(), 4);
    for _ in 0..2 {
        let r = server.delete(&format!("/api/sessions/{sid}")).await;
        assert_eq!(r.status(), StatusCode::OK);
        let doc: Value = r.json().await.unwrap();
        assert_eq!(doc["session_id"], sid.as_str());
        assert_eq!(doc["messages"], json!([]));
    }
    assert_eq!(server.history(&sid).await["messages"], json!([]));
    let r = server.delete(&format!("/api/sessions/{UNKNOWN}")).await;
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn traces_are_debug_only() {
    let server = TestServer::offline().await;
    let debug = server.session("expansion", "debug").await;
    let (_, events) = server.message(&debug, "I like Up (2009)", json!({})).await;
    let trace_id = events.last().unwrap().data["trace_id"].as_str().unwrap().to_string();
    let r = server.get(&format!("/api/traces/{trace_id}")).await;
    assert_eq!(r.status(), StatusCode::OK);
    let t: Value = r.json().await.unwrap();
    let spans = t["spans"].as_array().unwrap();
    assert!(spans.len() >= 3);
    assert_eq!(t["timeline"][0]["name"], "pipeline.respond");
    assert_eq!(t["timeline"][0]["depth"], 0);
    assert_eq!(t["graph"]["nodes"][0], "pipeline");
    let hist = server.history(&debug).await;
    assert_eq!(hist["messages"][1]["trace_id"], trace_id.as_str());

    let info = server.session("expansion", "info").await;
    server.message(&info, "Hello", json!({})).await;
    let info_trace = server.state.monitor().trace_ids().last().unwrap().clone();
    assert_ne!(info_trace, trace_id);
    let r = server.get(&format!("/api/traces/{info_trace}")).await;
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    let r = server.get("/api/traces/not-a-trace").await;
    assert_eq!(r.status(), StatusCode::NOT_FOUND);

    // Push the debug trace out of the bounded ring.
    let monitor: &Monitor = server.state.monitor();
    for _ in 0..crskit::monitor::DEFAULT_CAPACITY {
        let _ = monitor
            .root("pipeline.respond", String::new(), async { Ok::<_, String>(()) })
            .await;
    }
    let r = server.get(&format!("/api/traces/{trace_id}")).await;
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_stay_isolated() {
    let server = std::sync::Arc::new(TestServer::offline().await);
    let tasks: Vec<_> = (0..8)
        .map(|i| {
            let server = server.clone();
            tokio::spawn(async move {
                let pipeline = if i % 2 == 0 { "expansion" } else { "fillblank" };
                let sid = server.session(pipeline, "debug").await;
                for j in 0..10 {
                    let (status, events) = server
                        .message(&sid, &format!("session {i} message {j} likes Coco (2017)"), json!({}))
                        .await;
                    assert_eq!(status, StatusCode::OK);
                    assert_eq!(events.last().unwrap().event, "done");
                }
                (i, sid)
            })
        })
        .collect();
    for t in tasks {
        let (i, sid) = t.await.unwrap();
        let hist = server.history(&sid).await;
        let msgs = hist["messages"].as_array().unwrap();
        assert_eq!(msgs.len(), 20);
        for (j, pair) in msgs.chunks(2).enumerate() {
            let user = pair[0]["text"].as_str().unwrap();
            assert!(user.starts_with(&format!("session {i} message {j} ")), "{user}");
            assert_eq!(pair[1]["role"], "System");
            let trace_id = pair[1]["trace_id"].as_str().unwrap();
            let t = server.state.monitor().get(trace_id).unwrap();
            t.validate().unwrap();
            assert!(t.spans[0].input_digest.contains(&format!("session {i} message {j} ")));
        }
    }
}

#[tokio::test]
async fn stop_cancels_a_slow_stream() {
    let stub = StubLlm::spawn(LlmScript {
        chunks: (0..50).map(|i| format!("w{i} ")).collect(),
        chunk_delay: Duration::from_millis(100),
        ..Default::default()
    })
    .await;
    let server = TestServer::spawn(vec![("slow".into(), llm_pipeline("slow", stub.url()))]).await;
    let sid = server.session("slow", "info").await;

    let r = server.post(&format!("/api/sessions/{sid}/stop"), json!({})).await;
    assert_eq!(r.json::<Value>().await.unwrap(), json!({"stopped": false}));

    let mut reader = SseReader::new(server.message_response(&sid, "Hello", json!({})).await);
    let first = reader.next().await.unwrap();
    assert_eq!(first.event, "chunk");
    let (status, _) = server.message(&sid, "again", json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let chunk_at = Instant::now();
    let r = server.post(&format!("/api/sessions/{sid}/stop"), json!({})).await;
    assert_eq!(r.json::<Value>().await.unwrap(), json!({"stopped": true}));
    let mut last = first;
    while let Some(e) = reader.next().await {
        last = e;
    }
    let elapsed = chunk_at.elapsed();
    assert!(elapsed < Duration::from_millis(200), "stream ended {elapsed:?} after stop");
    assert_eq!(last.event, "error");
    assert_eq!(last.data["kind"], "cancelled");
    assert_eq!(server.history(&sid).await["messages"], json!([]));

    // The session accepts a new message afterwards.
    let mut reader = SseReader::new(server.message_response(&sid, "Hello again", json!({})).await);
    assert_eq!(reader.next().await.unwrap().event, "chunk");
    let r = server.post(&format!("/api/sessions/{sid}/stop"), json!({})).await;
    assert_eq!(r.json::<Value>().await.unwrap(), json!({"stopped": true}));

    let r = server.post(&format!("/api/sessions/{UNKNOWN}/stop"), json!({})).await;
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn refresh_during_generation_discards_the_reply() {
    let stub = StubLlm::spawn(LlmScript {
        chunks: (0..20).map(|i| format!("w{i} ")).collect(),
        chunk_delay: Duration::from_millis(20),
        ..Default::default()
    })
    .await;
    let server = TestServer::spawn(vec![("slow".into(), llm_pipeline("slow", stub.url()))]).await;
    let sid = server.session("slow", "info").await;
    let mut reader = SseReader::new(server.message_response(&sid, "Hello", json!({})).await);
    reader.next().await.unwrap();
    server.delete(&format!("/api/sessions/{sid}")).await;
    while reader.next().await.is_some() {}
    assert_eq!(server.history(&sid).await["messages"], json!([]));
    let (status, events) = server.message(&sid, "Hi", json!({})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(events.last().unwrap().event, "done");
}

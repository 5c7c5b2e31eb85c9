mod common;

use std::process::Command;

use common::TestServer;
use crskit_server::ServerConfig;
use reqwest::StatusCode;
use serde_json::json;

#[tokio::test]
async fn init_demo_writes_a_servable_config() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_crskit"))
        .args(["init-demo", "--out"])
        .arg(dir.path())
        // Unroutable on purpose: offline loading must never contact it.
        .args(["--llm-url", "http://127.0.0.1:9"])
        .status()
        .unwrap();
    assert!(status.success());

    let config_path = dir.path().join("crskit.toml");
    let cfg = ServerConfig::read(&config_path).unwrap();
    let ids: Vec<&str> = cfg.pipelines.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["expansion", "fillblank", "llm-expansion"]);

    let pipelines = cfg.load_pipelines(dir.path(), true).await.unwrap();
    assert_eq!(pipelines.len(), 3);
    let server = TestServer::spawn(pipelines).await;
    for id in ["expansion", "fillblank", "llm-expansion"] {
        let sid = server.session(id, "debug").await;
        let (status, events) = server.message(&sid, "I loved Up (2009)", json!({})).await;
        assert_eq!(status, StatusCode::OK);
        let done = events.last().unwrap();
        assert_eq!(done.event, "done", "{id}: {:?}", done.data);
        assert!(done.data["trace_id"].is_string());
    }
}

#[test]
fn missing_config_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_crskit"))
        .args(["serve", "--config", "/nonexistent/crskit.toml", "--port", "0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/crskit.toml"));
}

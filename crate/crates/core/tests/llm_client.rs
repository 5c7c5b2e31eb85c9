use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crskit::generator::{GenError, GenOverrides, GenStyle, LlmClient, LlmEndpointConfig, LlmGen, LlmGenConfig};
use crskit::module::{Module, ModuleError, ModuleRequest};
use crskit::protocol::parse_dialog;
use crskit::testkit::{LlmScript, StubLlm};
use tokio_util::sync::CancellationToken;

/// Each test uses its own variable so parallel tests never race on the
/// process environment.
fn config(url: &str, key_var: &str, key: Option<&str>) -> LlmEndpointConfig {
    match key {
        Some(k) => std::env::set_var(key_var, k),
        None => std::env::remove_var(key_var),
    }
    let mut c = LlmEndpointConfig::new(url, "stub-model", key_var);
    c.backoff_base_ms = 10;
    c
}

#[tokio::test]
async fn chunks_concatenate_to_final_text() {
    let stub = StubLlm::spawn(LlmScript {
        chunks: vec!["Have ".into(), "you seen ".into(), "日本".into(), "?".into()],
        ..Default::default()
    })
    .await;
    let client = LlmClient::new(config(stub.url(), "CRSKIT_T_CHUNKS", Some("k1"))).unwrap();
    let mut seen = Vec::new();
    let text = client
        .generate_text("prompt", &GenOverrides::default(), &CancellationToken::new(), |c| {
            seen.push(c.to_string())
        })
        .await
        .unwrap();
    assert_eq!(seen, ["Have ", "you seen ", "日本", "?"]);
    assert_eq!(seen.concat(), text);
    assert_eq!(stub.bearer_tokens(), [Some("k1".to_string())]);
    let body = &stub.bodies()[0];
    assert_eq!(body["stream"], true);
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["content"], "prompt");
}

#[tokio::test]
async fn stream_ends_with_final_chunk() {
    let stub = StubLlm::spawn(LlmScript::default()).await;
    let client = LlmClient::new(config(stub.url(), "CRSKIT_T_FINAL", Some("k"))).unwrap();
    let mut stream = client
        .generate("p", &GenOverrides::default(), &CancellationToken::new())
        .await
        .unwrap();
    let mut chunks = Vec::new();
    while let Some(c) = stream.next_chunk().await {
        chunks.push(c.unwrap());
    }
    let last = chunks.pop().unwrap();
    assert!(last.is_final && last.text.is_empty());
    assert!(chunks.iter().all(|c| !c.is_final));
    assert_eq!(chunks.iter().map(|c| c.text.as_str()).collect::<String>(), "Hello there!");
}

#[tokio::test]
async fn retries_after_two_server_errors() {
    let stub = StubLlm::spawn(LlmScript {
        fail_first: 2,
        ..Default::default()
    })
    .await;
    let client = LlmClient::new(config(stub.url(), "CRSKIT_T_RETRY", Some("k"))).unwrap();
    let text = client
        .generate_text("p", &GenOverrides::default(), &CancellationToken::new(), |_| {})
        .await
        .unwrap();
    assert_eq!(text, "Hello there!");
    assert_eq!(stub.request_count(), 3);
}

#[tokio::test]
async fn gives_up_after_max_retries() {
    let stub = StubLlm::spawn(LlmScript {
        fail_first: 10,
        ..Default::default()
    })
    .await;
    let client = LlmClient::new(config(stub.url(), "CRSKIT_T_GIVEUP", Some("k"))).unwrap();
    let err = client
        .generate_text("p", &GenOverrides::default(), &CancellationToken::new(), |_| {})
        .await
        .unwrap_err();
    assert!(matches!(err, GenError::Remote { status: 500, .. }), "{err:?}");
    assert_eq!(stub.request_count(), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let stub = StubLlm::spawn(LlmScript {
        fail_first: 10,
        fail_status: 401,
        ..Default::default()
    })
    .await;
    let client = LlmClient::new(config(stub.url(), "CRSKIT_T_4XX", Some("k"))).unwrap();
    let err = client
        .generate_text("p", &GenOverrides::default(), &CancellationToken::new(), |_| {})
        .await
        .unwrap_err();
    assert!(matches!(err, GenError::Remote { status: 401, .. }), "{err:?}");
    assert_eq!(stub.request_count(), 1);
}

#[tokio::test]
async fn missing_key_opens_no_socket() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let accepted = Arc::new(AtomicBool::new(false));
    let flag = accepted.clone();
    let watcher = tokio::spawn(async move {
        if listener.accept().await.is_ok() {
            flag.store(true, Ordering::SeqCst);
        }
    });
    let client = LlmClient::new(config(&url, "CRSKIT_T_NOKEY", None)).unwrap();
    let err = client
        .generate("p", &GenOverrides::default(), &CancellationToken::new())
        .await
        .unwrap_err();
    assert!(matches!(err, GenError::MissingApiKey(ref v) if v == "CRSKIT_T_NOKEY"));
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert!(!accepted.load(Ordering::SeqCst));
    watcher.abort();
}

#[tokio::test]
async fn cancellation_stops_a_slow_stream() {
    let stub = StubLlm::spawn(LlmScript {
        chunks: (0..20).map(|i| format!("w{i} ")).collect(),
        chunk_delay: Duration::from_millis(100),
        ..Default::default()
    })
    .await;
    let client = LlmClient::new(config(stub.url(), "CRSKIT_T_CANCEL", Some("k"))).unwrap();
    let cancel = CancellationToken::new();
    let trigger = cancel.clone();
    let mut first_at = None;
    let started = Instant::now();
    let err = client
        .generate_text("p", &GenOverrides::default(), &cancel, |_| {
            first_at.get_or_insert_with(Instant::now);
            trigger.cancel();
        })
        .await
        .unwrap_err();
    assert!(matches!(err, GenError::Cancelled));
    assert!(first_at.unwrap().elapsed() < Duration::from_millis(50));
    assert!(started.elapsed() < Duration::from_secs(1));
}

#[tokio::test]
async fn overrides_reach_the_endpoint() {
    let stub = StubLlm::spawn(LlmScript::default()).await;
    let client = LlmClient::new(config(stub.url(), "CRSKIT_T_OVERRIDE", Some("k"))).unwrap();
    let o = GenOverrides {
        model: Some("bigger-model".into()),
        temperature: Some(0.1),
    };
    client
        .generate_text("p", &o, &CancellationToken::new(), |_| {})
        .await
        .unwrap();
    let body = &stub.bodies()[0];
    assert_eq!(body["model"], "bigger-model");
    assert_eq!(body["temperature"], 0.1);
}

#[tokio::test]
async fn llm_generator_module_prompts_and_streams() {
    let stub = StubLlm::spawn(LlmScript {
        echo_prompt: true,
        ..Default::default()
    })
    .await;
    let cfg = LlmGenConfig::with_default_prompt(config(stub.url(), "CRSKIT_T_MODULE", Some("k")), GenStyle::Expansion);
    let gen = LlmGen::new("gen", cfg).unwrap();
    let d = parse_dialog("User: I like <entity>Up (2009)</entity>").unwrap();
    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
    let mut kwargs = serde_json::Map::new();
    kwargs.insert("model".into(), "chosen-model".into());
    let req = ModuleRequest {
        items: vec!["Coco (2017)".into(), "WALL-E (2008)".into()],
        chunks: Some(tx),
        ..ModuleRequest::with_kwargs(kwargs)
    };
    let text = gen.response(&d, &req).await.unwrap().into_text().unwrap();
    assert!(text.contains("Coco (2017); WALL-E (2008)"), "{text}");
    assert!(text.contains("User: I like <entity>Up (2009)</entity>"), "{text}");
    drop(req);
    let mut streamed = String::new();
    while let Some(c) = rx.recv().await {
        streamed.push_str(&c);
    }
    assert_eq!(streamed, text);
    assert_eq!(stub.bodies()[0]["model"], "chosen-model");
}

#[tokio::test]
async fn offline_generator_never_calls_out() {
    let stub = StubLlm::spawn(LlmScript::default()).await;
    let cfg = LlmGenConfig::with_default_prompt(config(stub.url(), "CRSKIT_T_OFFLINE", None), GenStyle::Fillblank);
    let gen = LlmGen::new("gen", cfg).unwrap().offline(true);
    let d = parse_dialog("User: anything?").unwrap();
    let req = ModuleRequest {
        slots: Some(2),
        ..Default::default()
    };
    let text = gen.response(&d, &req).await.unwrap().into_text().unwrap();
    assert_eq!(text.matches("<item>").count(), 2);
    assert_eq!(stub.request_count(), 0);

    let online = LlmGen::new("gen", gen_config_without_key(stub.url())).unwrap();
    let err = online.response(&d, &req).await.unwrap_err();
    assert!(matches!(err, ModuleError::Generator(GenError::MissingApiKey(_))), "{err:?}");
}

fn gen_config_without_key(url: &str) -> LlmGenConfig {
    LlmGenConfig::with_default_prompt(config(url, "CRSKIT_T_OFFLINE2", None), GenStyle::Fillblank)
}

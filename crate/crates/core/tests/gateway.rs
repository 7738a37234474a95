use std::sync::Arc;
use std::thread;

use synthembed::gateway::{
    ChatMessage, ChatRequest, FinishReason, Gateway, GatewayConfig, GatewayError, MockResponse, MockServer, Secret,
};

fn request(text: &str) -> ChatRequest {
    ChatRequest {
        model: "mock-model".into(),
        messages: vec![ChatMessage::system("be brief"), ChatMessage::user(text)],
        temperature: 0.7,
        max_tokens: 128,
        seed: Some(7),
    }
}

fn fast_config(server: &MockServer) -> GatewayConfig {
    let mut cfg = GatewayConfig::for_url(server.base_url());
    cfg.backoff_base_ms = 1;
    cfg.max_retries = 3;
    cfg.api_key = Secret::new("sk-test-0123456789");
    cfg
}

#[test]
fn plain_success() {
    let server = MockServer::start(vec![MockResponse::chat("hello")]).unwrap();
    let gw = Gateway::new(fast_config(&server)).unwrap();
    let out = gw.chat_complete_counted(&request("hi")).unwrap();
    assert_eq!(out.response.content, "hello");
    assert_eq!(out.response.finish_reason, FinishReason::Stop);
    assert_eq!(out.attempts, 1);
    let log = server.requests();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].path, "/v1/chat/completions");
    assert!(log[0].bearer);
    assert_eq!(log[0].chat_request().unwrap(), request("hi"));
}

#[test]
fn rate_limit_then_success_takes_two_attempts() {
    let server = MockServer::start(vec![MockResponse::status(429), MockResponse::chat("ok")]).unwrap();
    let gw = Gateway::new(fast_config(&server)).unwrap();
    let out = gw.chat_complete_counted(&request("hi")).unwrap();
    assert_eq!(out.attempts, 2);
    assert_eq!(server.request_count(), 2);
}

#[test]
fn client_error_is_not_retried() {
    let server = MockServer::start(vec![MockResponse::status(400), MockResponse::chat("never")]).unwrap();
    let gw = Gateway::new(fast_config(&server)).unwrap();
    let err = gw.chat_complete(&request("hi")).unwrap_err();
    assert_eq!(err, GatewayError::NonRetryable { status: 400, attempts: 1 });
    assert_eq!(server.request_count(), 1);
}

#[test]
fn attempts_never_exceed_retry_budget() {
    let server = MockServer::start(vec![MockResponse::status(503); 10]).unwrap();
    let gw = Gateway::new(fast_config(&server)).unwrap();
    match gw.chat_complete(&request("hi")).unwrap_err() {
        GatewayError::Exhausted {
            attempts, last_status, ..
        } => {
            assert_eq!(attempts, 4);
            assert_eq!(last_status, Some(503));
        }
        e => panic!("unexpected {e:?}"),
    }
    assert_eq!(server.request_count(), 4);
}

#[test]
fn script_overflow_answers_500_and_is_logged() {
    let server = MockServer::start(vec![MockResponse::chat("a"), MockResponse::chat("b")]).unwrap();
    let mut cfg = fast_config(&server);
    cfg.max_retries = 0;
    let gw = Gateway::new(cfg).unwrap();
    assert_eq!(gw.chat_complete(&request("1")).unwrap().content, "a");
    assert_eq!(gw.chat_complete(&request("2")).unwrap().content, "b");
    let err = gw.chat_complete(&request("3")).unwrap_err();
    assert!(matches!(err, GatewayError::Exhausted { last_status: Some(500), .. }));
    let log = server.requests();
    assert_eq!(log.len(), 3);
    assert!(log[0].body.contains("\"1\""));
    assert!(log[1].body.contains("\"2\""));
    assert_eq!(server.overflow_count(), 1);
}

#[test]
fn idle_server_has_empty_log() {
    let server = MockServer::start(vec![MockResponse::chat("unused")]).unwrap();
    assert!(server.requests().is_empty());
    assert_eq!(server.max_concurrent_seen(), 0);
}

#[test]
fn burst_respects_concurrency_bound() {
    let server = MockServer::with_responder(|_| MockResponse::chat("burst").with_delay(15)).unwrap();
    let mut cfg = fast_config(&server);
    cfg.max_concurrent = 4;
    let gw = Arc::new(Gateway::new(cfg).unwrap());
    let handles: Vec<_> = (0..100)
        .map(|i| {
            let gw = Arc::clone(&gw);
            thread::spawn(move || gw.chat_complete(&request(&format!("burst {i}"))).unwrap())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().content, "burst");
    }
    assert_eq!(server.request_count(), 100);
    let peak = server.max_concurrent_seen();
    assert!(peak <= 4, "peak in-flight {peak}");
    assert!(peak >= 2, "burst never overlapped (peak {peak})");
}

#[test]
fn unreachable_endpoint_exhausts_without_leaking_secret() {
    // bind then drop to get a port with nothing listening
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = GatewayConfig::for_url(format!("http://127.0.0.1:{port}"));
    cfg.backoff_base_ms = 1;
    cfg.max_retries = 1;
    cfg.api_key = Secret::new("sk-should-not-leak");
    let gw = Gateway::new(cfg).unwrap();
    let err = gw.chat_complete(&request("hi")).unwrap_err();
    assert!(matches!(err, GatewayError::Exhausted { attempts: 2, last_status: None, .. }));
    assert!(!err.to_string().contains("sk-should-not-leak"));
    assert!(!format!("{err:?}").contains("sk-should-not-leak"));
}

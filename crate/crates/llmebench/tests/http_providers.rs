//! Wire-level provider behavior against a scripted HTTP stub: request
//! shape, credential handling, status mapping, retry flow, and the
//! embeddings endpoint.

mod common;

use std::time::Duration;

use httpstub::{Action, StubResponse, StubServer};

use common::*;
use llmebench::fewshot::{embed, EmbedderConfig, FewshotError};
use llmebench::providers::{
    summarize_response, FailureClass, InvokeError, Provider, ProviderError, RetryPolicy,
};
use llmebench::types::ChatMessage;

fn fast_retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        base_delay: 0.01,
        backoff_factor: 2.0,
        ..RetryPolicy::default()
    }
}

#[test]
fn request_shape_carries_model_messages_and_credentials() {
    let fixture = r#"{"id":"chatcmpl-42","object":"chat.completion","created":1714000000,"model":"stub-model","system_fingerprint":"fp_test","choices":[{"index":0,"message":{"role":"assistant","content":"All good."},"finish_reason":"stop"}],"usage":{"prompt_tokens":21,"completion_tokens":3,"total_tokens":24}}"#;
    let server = StubServer::start(vec![Action::Respond(StubResponse::json(200, fixture))]);

    std::env::set_var("WIRE_KEY_3391", "sk-test-3391");
    let mut config = stub_provider_config(server.url(), fast_retry(3));
    config.api_key_env = Some("WIRE_KEY_3391".to_string());
    let provider = Provider::new(config).unwrap();

    let messages = [ChatMessage::system("You judge."), ChatMessage::user("Q")];
    let response = provider.invoke_with_retry(&messages).unwrap();
    assert_eq!(response.attempts_used, 1);
    // The payload survives verbatim, unknown fields and key order included.
    assert_eq!(
        response.payload,
        serde_json::from_str::<serde_json::Value>(fixture).unwrap()
    );
    assert_eq!(response.payload.to_string(), fixture);
    assert_eq!(summarize_response(&response.payload).unwrap(), "All good.");

    let requests = server.requests();
    assert_eq!(requests.len(), 1);
    let request = &requests[0];
    assert_eq!(request.method, "POST");
    assert_eq!(request.path, "/chat/completions");
    assert_eq!(request.header("authorization"), Some("Bearer sk-test-3391"));
    assert!(request
        .header("content-type")
        .unwrap()
        .starts_with("application/json"));

    let body: serde_json::Value = serde_json::from_str(&request.body_str()).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(
        body["messages"],
        serde_json::json!([
            {"role": "system", "content": "You judge."},
            {"role": "user", "content": "Q"},
        ])
    );
    assert_eq!(body["temperature"], serde_json::json!(0.0));
    assert_eq!(body["top_p"], serde_json::json!(1.0));
    assert_eq!(body["max_tokens"], 64);
}

#[test]
fn keyless_requests_omit_authorization() {
    std::env::remove_var("OPENAI_API_KEY");
    std::env::remove_var("FASTCHAT_API_KEY");
    let server = StubServer::start(vec![Action::Respond(chat_ok("fine"))]);
    let provider = Provider::new(stub_provider_config(server.url(), fast_retry(3))).unwrap();

    provider
        .invoke_with_retry(&[ChatMessage::user("Q")])
        .unwrap();
    let requests = server.requests();
    assert_eq!(requests[0].header("authorization"), None);
}

#[test]
fn base_url_resolution_and_config_errors() {
    std::env::remove_var("OPENAI_API_BASE");
    std::env::remove_var("FASTCHAT_API_BASE");

    // No base URL anywhere: constructing the provider fails.
    let mut config = stub_provider_config("ignored", fast_retry(3));
    config.base_url = None;
    let error = Provider::new(config).unwrap_err();
    assert!(matches!(error, ProviderError::Config(_)), "got {error:?}");

    // Naming a key variable that is unset is a configuration error too.
    let mut config = stub_provider_config("http://127.0.0.1:1", fast_retry(3));
    config.api_key_env = Some("UNSET_KEY_VAR_55123".to_string());
    let error = Provider::new(config).unwrap_err();
    assert!(matches!(error, ProviderError::Config(_)), "got {error:?}");

    // The standard environment variable supplies the base when the recipe
    // leaves it out.
    let server = StubServer::start(vec![Action::Respond(chat_ok("fine"))]);
    std::env::set_var("OPENAI_API_BASE", server.url());
    let mut config = stub_provider_config("ignored", fast_retry(3));
    config.base_url = None;
    let provider = Provider::new(config).unwrap();
    provider
        .invoke_with_retry(&[ChatMessage::user("Q")])
        .unwrap();
    assert_eq!(server.request_count(), 1);
    std::env::remove_var("OPENAI_API_BASE");
}

#[test]
fn rate_limit_retries_until_success() {
    let server = StubServer::start(vec![
        Action::Respond(StubResponse::status(429)),
        Action::Respond(chat_ok("eventually")),
    ]);
    let provider = Provider::new(stub_provider_config(server.url(), fast_retry(3))).unwrap();

    let response = provider
        .invoke_with_retry(&[ChatMessage::user("Q")])
        .unwrap();
    assert_eq!(response.attempts_used, 2);
    assert_eq!(server.request_count(), 2);
}

#[test]
fn empty_retryable_set_makes_rate_limit_fatal() {
    let server = StubServer::start(vec![Action::Respond(StubResponse::status(429))]);
    let retry = RetryPolicy {
        retryable: Vec::new(),
        ..fast_retry(3)
    };
    let provider = Provider::new(stub_provider_config(server.url(), retry)).unwrap();

    let error = provider
        .invoke_with_retry(&[ChatMessage::user("Q")])
        .unwrap_err();
    assert!(
        matches!(error, InvokeError::Fatal(ProviderError::RateLimited(_))),
        "got {error:?}"
    );
    assert_eq!(server.request_count(), 1);
}

#[test]
fn server_errors_exhaust_into_typed_error() {
    let server = StubServer::start(vec![Action::Respond(StubResponse::status(500))]);
    let provider = Provider::new(stub_provider_config(server.url(), fast_retry(3))).unwrap();

    let error = provider
        .invoke_with_retry(&[ChatMessage::user("Q")])
        .unwrap_err();
    match &error {
        InvokeError::ExhaustedRetries { attempts, last } => {
            assert_eq!(*attempts, 3);
            assert_eq!(last.failure_class(), Some(FailureClass::ServerError));
        }
        other => panic!("expected exhausted retries, got {other:?}"),
    }
    assert_eq!(error.class_name(), "exhausted_retries");
    assert_eq!(server.request_count(), 3);
}

#[test]
fn unexpected_status_is_fatal_malformed() {
    let server = StubServer::start(vec![Action::Respond(StubResponse::status(404))]);
    let provider = Provider::new(stub_provider_config(server.url(), fast_retry(3))).unwrap();

    let error = provider
        .invoke_with_retry(&[ChatMessage::user("Q")])
        .unwrap_err();
    assert!(
        matches!(
            error,
            InvokeError::Fatal(ProviderError::MalformedResponse(_))
        ),
        "got {error:?}"
    );
    assert_eq!(server.request_count(), 1);
}

#[test]
fn ok_status_with_unparseable_body_is_fatal_malformed() {
    let server = StubServer::start(vec![Action::Respond(StubResponse::json(200, "{oops"))]);
    let provider = Provider::new(stub_provider_config(server.url(), fast_retry(3))).unwrap();

    let error = provider
        .invoke_with_retry(&[ChatMessage::user("Q")])
        .unwrap_err();
    assert!(
        matches!(
            error,
            InvokeError::Fatal(ProviderError::MalformedResponse(_))
        ),
        "got {error:?}"
    );
    assert_eq!(server.request_count(), 1);
}

#[test]
fn timeouts_retry_and_recover() {
    let server = StubServer::start(vec![
        Action::Stall(Duration::from_secs(2)),
        Action::Respond(chat_ok("awake")),
    ]);
    let mut config = stub_provider_config(server.url(), fast_retry(3));
    config.timeout = 0.3;
    let provider = Provider::new(config).unwrap();

    let response = provider
        .invoke_with_retry(&[ChatMessage::user("Q")])
        .unwrap();
    assert_eq!(response.attempts_used, 2);
    assert_eq!(summarize_response(&response.payload).unwrap(), "awake");
}

#[test]
fn dropped_connections_retry_as_server_errors() {
    let server = StubServer::start(vec![Action::Drop, Action::Respond(chat_ok("back"))]);
    let provider = Provider::new(stub_provider_config(server.url(), fast_retry(3))).unwrap();

    let response = provider
        .invoke_with_retry(&[ChatMessage::user("Q")])
        .unwrap();
    assert_eq!(response.attempts_used, 2);
    assert_eq!(server.request_count(), 2);
}

#[test]
fn embeddings_reorder_by_index_and_authenticate() {
    let server = StubServer::start(vec![Action::Respond(StubResponse::json(
        200,
        r#"{"object":"list","data":[
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]}
        ]}"#,
    ))]);
    std::env::set_var("EMB_KEY_7741", "sk-emb-7741");
    let embedder = EmbedderConfig::Http {
        base_url: server.url().to_string(),
        model: "embedder-1".to_string(),
        api_key_env: Some("EMB_KEY_7741".to_string()),
        timeout: 5.0,
    };

    let texts = vec!["first".to_string(), "second".to_string()];
    let vectors = embed(&texts, &embedder).unwrap();
    assert_eq!(vectors[0].values(), &[1.0, 0.0]);
    assert_eq!(vectors[1].values(), &[0.0, 1.0]);

    let requests = server.requests();
    assert_eq!(requests[0].path, "/embeddings");
    assert_eq!(
        requests[0].header("authorization"),
        Some("Bearer sk-emb-7741")
    );
    let body: serde_json::Value = serde_json::from_str(&requests[0].body_str()).unwrap();
    assert_eq!(
        body,
        serde_json::json!({"model": "embedder-1", "input": ["first", "second"]})
    );
}

#[test]
fn embeddings_reject_malformed_service_answers() {
    let server = StubServer::start(vec![
        Action::Respond(StubResponse::json(
            200,
            r#"{"data":[{"index":0,"embedding":[1.0]}]}"#,
        )),
        Action::Respond(StubResponse::json(
            200,
            r#"{"data":[{"embedding":[1.0]},{"index":1,"embedding":[1.0]}]}"#,
        )),
        Action::Respond(StubResponse::json(
            200,
            r#"{"data":[{"index":0,"embedding":[1.0,0.0]},{"index":1,"embedding":[1.0,0.0,0.0]}]}"#,
        )),
        Action::Respond(StubResponse::json(
            200,
            r#"{"data":[{"index":0,"embedding":[0.0,0.0]},{"index":1,"embedding":[1.0,0.0]}]}"#,
        )),
        Action::Respond(StubResponse::status(500)),
    ]);
    let embedder = EmbedderConfig::Http {
        base_url: server.url().to_string(),
        model: "embedder-1".to_string(),
        api_key_env: None,
        timeout: 5.0,
    };
    let texts = vec!["first".to_string(), "second".to_string()];
    let call = || embed(&texts, &embedder).unwrap_err();

    let error = call();
    assert!(
        matches!(&error, FewshotError::EmbeddingService(m) if m.contains("expected 2")),
        "got {error:?}"
    );
    let error = call();
    assert!(
        matches!(error, FewshotError::EmbeddingService(_)),
        "got {error:?}"
    );
    let error = call();
    assert!(
        matches!(
            error,
            FewshotError::DimensionMismatch {
                expected: 2,
                got: 3
            }
        ),
        "got {error:?}"
    );
    let error = call();
    assert!(matches!(error, FewshotError::ZeroVector), "got {error:?}");
    let error = call();
    assert!(
        matches!(&error, FewshotError::EmbeddingService(m) if m.contains("500")),
        "got {error:?}"
    );
}

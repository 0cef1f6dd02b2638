use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use dqg_core::corpus::Document;
use dqg_core::querygen::mock::{load_transcript, MockBehavior, MockServer, TranscriptEntry};
use dqg_core::querygen::{
    build_prompt, builtin_examples, generate_queries, CompletionClient, CompletionRequest, GenerationSettings,
    HttpClient, MockClient, PromptItem, PromptTemplate,
};
use dqg_core::Error;

fn quick() -> GenerationSettings {
    GenerationSettings {
        max_retries: 1,
        retry_backoff: Duration::from_millis(5),
        request_timeout: Duration::from_secs(10),
        ..GenerationSettings::default()
    }
}

fn items(n: usize) -> Vec<PromptItem> {
    (0..n)
        .map(|i| PromptItem {
            doc_id: format!("doc{i}"),
            prompt: format!("Document: body number {i} of the fixture\nRelevant Query:"),
        })
        .collect()
}

#[test]
fn scidocs_prompt_matches_golden_file() {
    let target = Document::new(
        "t1",
        "Graph neural networks for molecular property prediction",
        "We benchmark message passing architectures on quantum chemistry datasets.",
    );
    let examples = builtin_examples("scidocs").unwrap();
    let prompt = build_prompt(&PromptTemplate::inpars(), &examples, &target.render(), &GenerationSettings::default()).unwrap();
    assert_eq!(prompt, include_str!("fixtures/scidocs_prompt.txt"));
}

#[test]
fn replayed_transcript_round_trips_over_http() {
    let prompts = items(5);
    let completions = [
        " what is body zero\nExplanation: x",
        "\"which fixture holds body one\"",
        "  body two lookup  ",
        " number three\n\nmore",
        " fourth body question",
    ];
    let expected = [
        "what is body zero",
        "which fixture holds body one",
        "body two lookup",
        "number three",
        "fourth body question",
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transcript.jsonl");
    let lines: String = prompts
        .iter()
        .zip(completions)
        .map(|(p, c)| {
            let entry = TranscriptEntry { prompt: p.prompt.clone(), completion: c.to_owned() };
            serde_json::to_string(&entry).unwrap() + "\n"
        })
        .collect();
    std::fs::write(&path, lines).unwrap();

    let server = MockServer::start(MockBehavior::Replay(load_transcript(&path).unwrap())).unwrap();
    let client = HttpClient::new(server.url(), "replay-model", Duration::from_secs(10));
    let outcome = generate_queries(&client, &prompts, &quick()).unwrap();
    assert!(outcome.failures.is_empty());
    let got: Vec<&str> = outcome.queries.iter().map(|q| q.query_text.as_str()).collect();
    assert_eq!(got, expected);
    assert_eq!(outcome.queries[3].raw_completion, completions[3]);
    assert!(outcome.queries.iter().all(|q| q.model_name == "replay-model"));
}

#[test]
fn http_prefix_mock_answers_with_target_words() {
    let server = MockServer::start(MockBehavior::DocumentPrefix { words: 3 }).unwrap();
    let client = HttpClient::new(server.url(), "m", Duration::from_secs(10));
    let outcome = generate_queries(&client, &items(3), &quick()).unwrap();
    let got: Vec<&str> = outcome.queries.iter().map(|q| q.query_text.as_str()).collect();
    assert_eq!(got, ["body number 0", "body number 1", "body number 2"]);
}

#[test]
fn failing_server_is_an_aggregate_error() {
    let server = MockServer::start(MockBehavior::Fail).unwrap();
    let client = HttpClient::new(server.url(), "m", Duration::from_secs(10));
    match generate_queries(&client, &items(4), &quick()) {
        Err(Error::AllRequestsFailed { failed }) => assert_eq!(failed, 4),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_fails_every_item() {
    let server = MockServer::start(MockBehavior::Fail).unwrap();
    let url = server.url();
    drop(server);
    let client = HttpClient::new(url, "m", Duration::from_secs(2));
    let settings = GenerationSettings { max_retries: 0, ..quick() };
    assert!(matches!(
        generate_queries(&client, &items(2), &settings),
        Err(Error::AllRequestsFailed { failed: 2 })
    ));
}

/// Finishes requests in reverse submission order.
struct Staggered {
    total: usize,
    started: AtomicUsize,
}

impl CompletionClient for Staggered {
    fn complete(&self, request: &CompletionRequest) -> dqg_core::Result<String> {
        let i = self.started.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(((self.total - i) * 4) as u64));
        Ok(format!(" echo {}", request.prompt.lines().next().unwrap()))
    }

    fn model_name(&self) -> &str {
        "staggered"
    }
}

#[test]
fn output_order_follows_input_under_any_schedule() {
    let prompts = items(12);
    let client = Staggered { total: 12, started: AtomicUsize::new(0) };
    let settings = GenerationSettings { concurrency: 6, ..quick() };
    let outcome = generate_queries(&client, &prompts, &settings).unwrap();
    let ids: Vec<&str> = outcome.queries.iter().map(|q| q.doc_id.as_str()).collect();
    let want: Vec<String> = (0..12).map(|i| format!("doc{i}")).collect();
    assert_eq!(ids, want);
    for (q, p) in outcome.queries.iter().zip(&prompts) {
        assert!(q.query_text.ends_with(&p.prompt.lines().next().unwrap()[10..]));
    }
}

#[test]
fn exactly_one_query_per_parsed_completion() {
    let prompts = items(6);
    let mut replies = HashMap::new();
    for (i, p) in prompts.iter().enumerate() {
        let reply = if i % 3 == 0 { "\n\n".to_owned() } else { format!(" query {i}") };
        replies.insert(p.prompt.clone(), reply);
    }
    let outcome = generate_queries(&MockClient::Replay(replies), &prompts, &quick()).unwrap();
    assert_eq!(outcome.queries.len(), 4);
    assert_eq!(outcome.failures.len(), 2);
    assert_eq!(outcome.failures[0].doc_id, "doc0");
    assert_eq!(outcome.failures[1].doc_id, "doc3");
}

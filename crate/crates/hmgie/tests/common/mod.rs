//! Scripted model replies shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use hmgie::config::{BackendSource, RunConfig};
use hmgie::gateway::{Backend, BackendError, FnBackend, FixtureStore, ModelRequest, RecordingBackend};
use hmgie::image::ImageInput;
use hmgie::pipeline::Evaluator;

pub const CAPTION: &str = "A brown dog sits in a park.";

/// 1x1 transparent PNG.
pub const PNG: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52,
    0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1f, 0x15, 0xc4,
    0x89, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x00, 0x01, 0x00, 0x00,
    0x05, 0x00, 0x01, 0x0d, 0x0a, 0x2d, 0xb4, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae,
    0x42, 0x60, 0x82,
];

pub fn image() -> ImageInput {
    ImageInput::from_bytes(PNG.to_vec(), "test.png").unwrap()
}

pub const GRAPH: &str = r#"{
  "nodes": [
    {"id": "N1", "type": "Entity", "label": "dog"},
    {"id": "N2", "type": "Attribute", "label": "brown"},
    {"id": "N3", "type": "Location", "label": "park"}
  ],
  "edges": [
    {"from": ["N1", "dog"], "to": ["N2", "brown"], "type": "Has Attribute", "label": "color", "description": "The dog is brown."},
    {"from": ["N1", "dog"], "to": ["N3", "park"], "type": "Spatial", "label": "sits in", "description": "The dog sits in a park."}
  ]
}"#;

pub const LEVEL1: &str = r#"{"Questions": [
  {"Question": "Is there a dog in the image?", "Verify-Fact": "a dog is present", "Expected-Answer": "Yes", "Parent-IDS": [], "Covered-Nodes": ["N1"], "Covered-Edges": []},
  {"Question": "Is the scene a park?", "Verify-Fact": "the scene is a park", "Expected-Answer": "Yes", "Parent-IDS": [], "Covered-Nodes": ["N3"], "Covered-Edges": []}
]}"#;

pub const LEVEL2: &str = r#"{"Questions": [
  {"Question": "What color is the dog?", "Verify-Fact": "the dog is brown", "Expected-Answer": "Brown", "Parent-IDS": ["Q1.1"], "Covered-Nodes": ["N2"], "Covered-Edges": [0]}
]}"#;

pub const EXPLANATION: &str = "The caption matches the image: the dog, its brown color and the park were all confirmed.";

/// Which anchor sentence identifies each evaluation template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    GraphGen,
    QuestionGen,
    Vqa,
    Eval,
    Coverage,
    Explain,
    Caption,
    Fusion,
    Perturb,
    Detector,
}

pub fn classify(prompt: &str) -> Kind {
    const ANCHORS: &[(&str, Kind)] = &[
        ("into a Semantic Graph", Kind::GraphGen),
        ("specialized question generator", Kind::QuestionGen),
        ("specialized in visual question answering", Kind::Vqa),
        ("question answer evaluator", Kind::Eval),
        ("inconsistency based on QA results", Kind::Coverage),
        ("generating natural language explanations", Kind::Explain),
        ("Describe the image in a single caption", Kind::Caption),
        ("Several assistants captioned", Kind::Fusion),
        ("You create hard test cases", Kind::Perturb),
        ("Does the image match the given caption", Kind::Detector),
        ("detecting image-text consistency", Kind::Detector),
    ];
    ANCHORS
        .iter()
        .find(|(anchor, _)| prompt.contains(anchor))
        .map(|(_, k)| *k)
        .unwrap_or_else(|| panic!("unrecognized prompt: {}", &prompt[..prompt.len().min(200)]))
}

/// Value of the `<label>: value` line, e.g. `Current Level: 2`.
pub fn line_value<'a>(prompt: &'a str, label: &str) -> &'a str {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(label))
        .map(str::trim)
        .unwrap_or("")
}

/// Replies for the two-level scenario. With `second_correct` unset the
/// evaluator rejects the answer to the park question.
pub fn scenario_reply(prompt: &str, second_correct: bool) -> String {
    match classify(prompt) {
        Kind::GraphGen => GRAPH.to_owned(),
        Kind::QuestionGen => match line_value(prompt, "Current Level:") {
            "1" => LEVEL1.to_owned(),
            "2" => LEVEL2.to_owned(),
            _ => r#"{"Questions": []}"#.to_owned(),
        },
        Kind::Vqa => {
            let q = line_value(prompt, "The question is:");
            match q {
                "Is there a dog in the image?" => r#"{"Answer": "Yes", "Confidence": 1.0}"#,
                "Is the scene a park?" => r#"{"Answer": "Yes, a park", "Confidence": 1.0}"#,
                "What color is the dog?" => r#"{"Answer": "Brown", "Confidence": 0.8}"#,
                other => panic!("unexpected question {other:?}"),
            }
            .to_owned()
        }
        Kind::Eval => {
            let q = line_value(prompt, "Question:");
            let correct = second_correct || q != "Is the scene a park?";
            format!(r#"{{"Correct": {correct}}}"#)
        }
        Kind::Coverage => {
            if prompt.contains("Q2.1") {
                r#"{"Verified-Complete": true, "Examined-Nodes": ["N1", "N2", "N3"], "Examined-Edges": [0, 1], "Next-Level-Suggestion": null}"#
                    .to_owned()
            } else {
                r#"{"Verified-Complete": false, "Examined-Nodes": ["N1", "N3"], "Examined-Edges": [], "Next-Level-Suggestion": "Check the dog's color."}"#
                    .to_owned()
            }
        }
        Kind::Explain => EXPLANATION.to_owned(),
        other => panic!("evaluation scenario got a {other:?} prompt"),
    }
}

pub fn scenario_backend(second_correct: bool) -> FnBackend {
    FnBackend::new("scenario", move |req: &ModelRequest| Ok(scenario_reply(&req.prompt, second_correct)))
}

/// Evaluator over `backend` with default settings and a traced gateway.
pub fn evaluator(backend: Arc<dyn Backend>) -> Evaluator {
    let config = RunConfig::default();
    let bindings = config.pipeline_bindings(&BackendSource::Custom(backend)).unwrap();
    Evaluator::new(bindings, config.pipeline).unwrap()
}

pub fn shipped_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_level")
}

pub const DATASET: &str = "{\"id\": \"dog\", \"image_path\": \"dog.png\", \"caption\": \"A brown dog sits in a park.\", \"label\": 0}\n";

/// Writes the two-level fixture set into `dir`: image, dataset and every
/// reply a default-configured run requests.
pub fn record_fixtures(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("dog.png"), PNG).unwrap();
    std::fs::write(dir.join("dataset.jsonl"), DATASET).unwrap();
    let store = FixtureStore::new(dir.join("replies"));
    let recorder: Arc<dyn Backend> = Arc::new(RecordingBackend::new(Arc::new(scenario_backend(true)), store));
    let report = evaluator(recorder).evaluate_pair(&image(), CAPTION).unwrap();
    assert_eq!(report.realized_depth, 2);
}

/// Forge replies: one caption per granularity, perturbations numbered by
/// attempt, and a detector that is fooled on attempt `fool_at` (1-based;
/// `0` never).
pub fn forge_reply(prompt: &str, fool_at: usize) -> String {
    match classify(prompt) {
        Kind::Caption => {
            let lo = prompt
                .split("Use between ")
                .nth(1)
                .and_then(|s| s.split_whitespace().next())
                .unwrap_or("?");
            format!("A brown dog sits in a park (min {lo}).")
        }
        Kind::Fusion => "A brown dog sits in a green park.".to_owned(),
        Kind::Perturb => {
            let attempt = prompt.matches("(attempt ").count() + 1;
            format!("A black dog sits in a park (attempt {attempt}).")
        }
        Kind::Detector => {
            let caption = line_after(prompt, "Caption:");
            let attempt: usize = caption
                .split("(attempt ")
                .nth(1)
                .and_then(|s| s.trim_end_matches(").").parse().ok())
                .unwrap_or(0);
            let fooled = fool_at != 0 && attempt == fool_at;
            let answer = if fooled { "Yes" } else { "No" };
            format!(r#"{{"Answer": "{answer}", "Explanation": "attempt {attempt}"}}"#)
        }
        other => panic!("forge scenario got a {other:?} prompt"),
    }
}

fn line_after<'a>(prompt: &'a str, label: &str) -> &'a str {
    let mut lines = prompt.lines();
    while let Some(l) = lines.next() {
        if l.trim() == label {
            return lines.next().unwrap_or("").trim();
        }
    }
    ""
}

pub fn forge_backend(fool_at: usize) -> FnBackend {
    FnBackend::new("forge-scenario", move |req: &ModelRequest| Ok(forge_reply(&req.prompt, fool_at)))
}

pub fn failing_backend(message: &'static str) -> FnBackend {
    FnBackend::new("failing", move |_| Err(BackendError::Fatal(message.into())))
}

pub fn count_calls(calls: Arc<AtomicUsize>, inner: FnBackend) -> FnBackend {
    FnBackend::new("counted", move |req: &ModelRequest| {
        calls.fetch_add(1, Ordering::SeqCst);
        inner.complete(req, "")
    })
}

/// Minimal HTTP server answering with scripted `(status, body)` pairs; the
/// last pair repeats. Records every request body.
pub struct MockServer {
    pub url: String,
    pub connections: Arc<AtomicUsize>,
    pub requests: Arc<std::sync::Mutex<Vec<String>>>,
}

pub fn chat_reply(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

type Handler = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;

impl MockServer {
    pub fn start(script: Vec<(u16, String)>) -> MockServer {
        Self::start_with(move |n, _| script[n.min(script.len() - 1)].clone())
    }

    /// Answers every chat request with `scenario_reply` on its prompt.
    pub fn scenario() -> MockServer {
        Self::start_with(|_, body| {
            let v: serde_json::Value = serde_json::from_str(body).unwrap();
            let content = &v["messages"][1]["content"];
            let prompt = content
                .as_str()
                .map(str::to_owned)
                .unwrap_or_else(|| content[0]["text"].as_str().unwrap_or("").to_owned());
            (200, chat_reply(&scenario_reply(&prompt, true)))
        })
    }

    /// `handler` gets the connection index and the request body.
    pub fn start_with(handler: impl Fn(usize, &str) -> (u16, String) + Send + Sync + 'static) -> MockServer {
        use std::io::{BufRead, BufReader, Read, Write};
        let handler: Arc<Handler> = Arc::new(handler);
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let connections = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(std::sync::Mutex::new(Vec::new()));
        let (conns, reqs) = (Arc::clone(&connections), Arc::clone(&requests));
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let n = conns.fetch_add(1, Ordering::SeqCst);
                let (handler, reqs) = (Arc::clone(&handler), Arc::clone(&reqs));
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut length = 0;
                    let mut head = String::new();
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                            break;
                        }
                        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                            length = v.trim().parse().unwrap_or(0);
                        }
                        head.push_str(&line);
                    }
                    let mut body = vec![0; length];
                    let _ = reader.read_exact(&mut body);
                    let body = String::from_utf8_lossy(&body).into_owned();
                    let (status, reply) = handler(n, &body);
                    reqs.lock().unwrap().push(format!("{head}\r\n{body}"));
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} Scripted\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                        reply.len()
                    );
                });
            }
        });
        MockServer {
            url,
            connections,
            requests,
        }
    }
}

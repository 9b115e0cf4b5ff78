mod common;

use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use hmgie::gateway::{
    cache_key, Backend, BackendError, FixtureStore, FnBackend, Gateway, GatewayError, HttpBackend, ModelRequest,
    RecordingBackend, ReplayBackend, RetryPolicy,
};

use common::{chat_reply, MockServer};

fn recording_sleeper() -> (Arc<Mutex<Vec<Duration>>>, hmgie::gateway::Sleeper) {
    let slept = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&slept);
    (slept, Arc::new(move |d| log.lock().unwrap().push(d)))
}

fn http(server: &MockServer) -> Arc<dyn Backend> {
    Arc::new(HttpBackend::new(&server.url, "secret", Duration::from_secs(5)))
}

#[test]
fn transient_http_errors_are_retried() {
    let server = MockServer::start(vec![(503, "busy".into()), (200, chat_reply("hello"))]);
    let (slept, sleeper) = recording_sleeper();
    let gateway = Gateway::new(http(&server)).with_sleeper(sleeper).with_trace();
    let reply = gateway.call(&ModelRequest::text("m", "hi")).unwrap();
    assert_eq!(reply.text, "hello");
    assert_eq!(*slept.lock().unwrap(), [Duration::from_secs(1)]);
    assert_eq!(gateway.trace()[0].attempts, 2);

    let requests = server.requests.lock().unwrap();
    assert_eq!(requests.len(), 2);
    assert!(requests[1].to_ascii_lowercase().contains("authorization: bearer secret"));
    let body = requests[1].split("\r\n\r\n").nth(1).unwrap();
    let body: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(body["model"], "m");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "hi");
}

#[test]
fn vision_requests_carry_a_data_url() {
    let server = MockServer::start(vec![(200, chat_reply("ok"))]);
    let gateway = Gateway::new(http(&server));
    gateway.call(&ModelRequest::vision("m", "look", common::image())).unwrap();
    let requests = server.requests.lock().unwrap();
    assert!(requests[0].contains("data:image/png;base64,iVBORw0KGgo"));
}

#[test]
fn auth_failures_are_not_retried() {
    let server = MockServer::start(vec![(401, "{}".into())]);
    let (slept, sleeper) = recording_sleeper();
    let gateway = Gateway::new(http(&server)).with_sleeper(sleeper);
    let err = gateway.call(&ModelRequest::text("m", "hi")).unwrap_err();
    assert!(matches!(err, GatewayError::AuthError(_)), "{err}");
    assert!(slept.lock().unwrap().is_empty());
    assert_eq!(server.connections.load(Ordering::SeqCst), 1);
}

#[test]
fn retries_stop_at_the_attempt_limit() {
    let server = MockServer::start(vec![(429, "slow down".into())]);
    let (slept, sleeper) = recording_sleeper();
    let gateway = Gateway::new(http(&server)).with_sleeper(sleeper);
    match gateway.call(&ModelRequest::text("m", "hi")).unwrap_err() {
        GatewayError::Exhausted { attempts, reason, .. } => {
            assert_eq!(attempts, 3);
            assert!(reason.contains("429"));
        }
        other => panic!("{other}"),
    }
    assert_eq!(*slept.lock().unwrap(), [Duration::from_secs(1), Duration::from_secs(2)]);
}

#[test]
fn retries_respect_the_total_delay_ceiling() {
    let calls = Arc::new(AtomicU32::new(0));
    let seen = Arc::clone(&calls);
    let backend = FnBackend::new("down", move |_| {
        seen.fetch_add(1, Ordering::SeqCst);
        Err(BackendError::Transient("timeout".into()))
    });
    let (slept, sleeper) = recording_sleeper();
    let policy = RetryPolicy {
        max_attempts: 10,
        initial_delay: Duration::from_secs(4),
        multiplier: 2.0,
        max_total_delay: Duration::from_secs(30),
    };
    let gateway = Gateway::new(Arc::new(backend)).with_retry(policy).with_sleeper(sleeper);
    assert!(gateway.call(&ModelRequest::text("m", "x")).is_err());
    let total: Duration = slept.lock().unwrap().iter().sum();
    assert_eq!(total, Duration::from_secs(4 + 8 + 16));
    assert_eq!(calls.load(Ordering::SeqCst), 4);
}

#[test]
fn unreachable_server_is_transient() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let backend = HttpBackend::new(url, "k", Duration::from_secs(2));
    let err = backend.complete(&ModelRequest::text("m", "x"), "k").unwrap_err();
    assert!(matches!(err, BackendError::Transient(_)), "{err}");
}

#[test]
fn record_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let inner: Arc<dyn Backend> = Arc::new(FnBackend::new("echo", |req: &ModelRequest| Ok(format!("echo {}", req.prompt))));
    let recorder = Gateway::new(Arc::new(RecordingBackend::new(inner, FixtureStore::new(dir.path()))));
    let req = ModelRequest::text("m", "ping");
    recorder.call(&req).unwrap();
    assert!(dir.path().join(format!("{}.txt", cache_key(&req))).exists());

    let replay = Gateway::new(Arc::new(ReplayBackend::new(FixtureStore::new(dir.path()))));
    assert_eq!(replay.call(&req).unwrap().text, "echo ping");

    let other = ModelRequest::text("m", "pong");
    let err = replay.call(&other).unwrap_err().to_string();
    assert!(err.contains(&cache_key(&other)), "{err}");
    assert!(err.contains("no fixture"), "{err}");
}

#[test]
fn disk_cache_survives_gateways() {
    let dir = tempfile::tempdir().unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    let make = || {
        let seen = Arc::clone(&calls);
        let backend = FnBackend::new("counted", move |_| {
            seen.fetch_add(1, Ordering::SeqCst);
            Ok("reply".into())
        });
        Gateway::new(Arc::new(backend)).with_disk_cache(FixtureStore::new(dir.path()))
    };
    let req = ModelRequest::text("m", "q");
    assert!(!make().call(&req).unwrap().cached);
    assert!(make().call(&req).unwrap().cached);
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[test]
fn concurrent_identical_requests_share_one_call() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = Arc::clone(&calls);
    let backend = FnBackend::new("slow", move |_| {
        seen.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(50));
        Ok("done".into())
    });
    let gateway = Arc::new(Gateway::new(Arc::new(backend)));
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let g = Arc::clone(&gateway);
            std::thread::spawn(move || g.call(&ModelRequest::text("m", "same")).unwrap().text)
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), "done");
    }
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[test]
fn cache_key_depends_on_every_field() {
    let base = ModelRequest::text("m", "p");
    let keys = [
        cache_key(&base),
        cache_key(&ModelRequest::text("m2", "p")),
        cache_key(&ModelRequest::text("m", "p2")),
        cache_key(&base.clone().with_temperature(0.7)),
        cache_key(&ModelRequest::vision("m", "p", common::image())),
    ];
    let unique: std::collections::BTreeSet<_> = keys.iter().collect();
    assert_eq!(unique.len(), keys.len());
    assert_eq!(cache_key(&base), cache_key(&ModelRequest::text("m", "p")));
}

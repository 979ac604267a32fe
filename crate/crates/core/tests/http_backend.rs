//! The HTTP client against small in-process servers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use occuprobe::demography::{build_identity_templates, plan_calls, CategoryScheme, GenerationPlan};
use occuprobe::genclient::corpus::{errors_path, read_corpus};
use occuprobe::genclient::http::HttpBackend;
use occuprobe::genclient::protocol::{
    validate_generate_response, validate_request, GenerateRequest, GENERATE_PATH, HEALTH_PATH,
};
use occuprobe::genclient::{generate_corpus, Backend, GenParams, GenerateOptions, RetryPolicy};
use occuprobe::Error;
use rand::{Rng, SeedableRng};
use tiny_http::{Header, Response, Server};

#[derive(Clone, Copy)]
enum Mode {
    Good,
    /// Answers 3 completions whatever `n` is.
    Short,
    /// Every third generate call answers a non-JSON body.
    Garbage,
    Status500,
}

const JOBS: [&str; 4] = ["nurse at the clinic", "plumber", "teacher in town", "cook"];

fn reply(req: &GenerateRequest, calls: usize, mode: Mode) -> (u16, String) {
    if let Err(e) = validate_request(req) {
        return (400, e);
    }
    match mode {
        Mode::Status500 => return (500, "boom".into()),
        Mode::Garbage if calls % 3 == 2 => return (200, "<html>".into()),
        _ => {}
    }
    let n = match mode {
        Mode::Short => 3,
        _ => req.n as usize,
    };
    let seed = req.seed.unwrap_or(0) as usize;
    let completions: Vec<String> = (0..n)
        .map(|i| format!(" {} and then some more words than ten for sure yes", JOBS[(seed + i) % JOBS.len()]))
        .collect();
    (200, serde_json::json!({ "completions": completions }).to_string())
}

fn serve(server: Server, mode: Mode, seen: Arc<AtomicUsize>) {
    thread::spawn(move || {
        for mut rq in server.incoming_requests() {
            let json = Header::from_bytes("Content-Type", "application/json").unwrap();
            let (code, body) = if rq.url() == HEALTH_PATH {
                (200, r#"{"model_id":"fake-model"}"#.to_string())
            } else if rq.url() == GENERATE_PATH {
                let mut text = String::new();
                rq.as_reader().read_to_string(&mut text).unwrap();
                match serde_json::from_str::<GenerateRequest>(&text) {
                    Ok(req) => reply(&req, seen.fetch_add(1, Ordering::SeqCst), mode),
                    Err(e) => (400, e.to_string()),
                }
            } else {
                (404, String::new())
            };
            let _ = rq.respond(Response::from_string(body).with_status_code(code).with_header(json));
        }
    });
}

fn start(mode: Mode) -> (String, Arc<AtomicUsize>) {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let seen = Arc::new(AtomicUsize::new(0));
    serve(server, mode, seen.clone());
    (url, seen)
}

fn base_plan(calls: u64) -> GenerationPlan {
    let specs = build_identity_templates(&CategoryScheme::base())
        .unwrap()
        .into_iter()
        .map(|s| s.with_calls(calls))
        .collect();
    plan_calls(specs).unwrap()
}

fn opts() -> GenerateOptions {
    GenerateOptions {
        batch_size: 25,
        max_in_flight: 4,
        retry: RetryPolicy {
            max_retries: 6,
            base_delay: Duration::from_millis(40),
            max_delay: Duration::from_millis(400),
        },
        ..GenerateOptions::default()
    }
}

fn params() -> GenParams {
    GenParams {
        seed: Some(11),
        ..GenParams::default()
    }
}

#[test]
fn conforming_server_fills_the_corpus() {
    let (url, _) = start(Mode::Good);
    let backend = HttpBackend::new(&url, Duration::from_secs(5));
    assert_eq!(backend.health().unwrap(), "fake-model");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    let sum = generate_corpus(&base_plan(60), &backend, &params(), &out, &opts()).unwrap();
    assert_eq!(sum.records, 120);
    assert_eq!(sum.backend_id, "http:fake-model");
    let (_, recs) = read_corpus(&out).unwrap();
    assert_eq!(recs.len(), 120);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.seq, i as u64);
        assert!(r.completion.split_whitespace().count() <= 10);
        assert!(!r.completion.is_empty());
    }
}

#[test]
fn short_response_is_a_protocol_error() {
    let (url, _) = start(Mode::Short);
    let backend = HttpBackend::new(&url, Duration::from_secs(5));
    let dir = tempfile::tempdir().unwrap();
    let o = GenerateOptions {
        batch_size: 5,
        max_in_flight: 1,
        ..opts()
    };
    let err = generate_corpus(&base_plan(5), &backend, &params(), &dir.path().join("c.jsonl"), &o).unwrap_err();
    match &err {
        Error::Protocol { first, last, .. } => assert_eq!((*first, *last), (0, 4)),
        other => panic!("{other:?}"),
    }
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn error_status_aborts() {
    let (url, _) = start(Mode::Status500);
    let backend = HttpBackend::new(&url, Duration::from_secs(5));
    let dir = tempfile::tempdir().unwrap();
    let err = generate_corpus(&base_plan(5), &backend, &params(), &dir.path().join("c.jsonl"), &opts()).unwrap_err();
    assert!(matches!(err, Error::Protocol { .. }), "{err:?}");
}

#[test]
fn malformed_bodies_become_error_records() {
    let (url, _) = start(Mode::Garbage);
    let backend = HttpBackend::new(&url, Duration::from_secs(5));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    let o = GenerateOptions {
        max_in_flight: 1,
        ..opts()
    };
    let sum = generate_corpus(&base_plan(75), &backend, &params(), &out, &o).unwrap();
    assert_eq!(sum.records, 150);
    assert_eq!(sum.error_records, 50);
    let errors = std::fs::read_to_string(errors_path(&out)).unwrap();
    assert_eq!(errors.lines().count(), 2);
    let (_, recs) = read_corpus(&out).unwrap();
    assert_eq!(recs.iter().filter(|r| r.completion.is_empty()).count(), 50);
}

#[test]
fn late_server_is_reached_after_retries() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let url = format!("http://{addr}");
    let backend = HttpBackend::new(&url, Duration::from_secs(2));
    let starter = thread::spawn(move || {
        thread::sleep(Duration::from_millis(150));
        let server = Server::http(addr).unwrap();
        serve(server, Mode::Good, Arc::new(AtomicUsize::new(0)));
    });
    let dir = tempfile::tempdir().unwrap();
    let sum = generate_corpus(&base_plan(10), &backend, &params(), &dir.path().join("c.jsonl"), &opts()).unwrap();
    starter.join().unwrap();
    assert_eq!(sum.records, 20);
}

#[test]
fn unreachable_server_reports_progress() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let backend = HttpBackend::new(&format!("http://{addr}"), Duration::from_millis(200));
    let dir = tempfile::tempdir().unwrap();
    let o = GenerateOptions {
        retry: RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(5),
            max_delay: Duration::from_millis(10),
        },
        ..opts()
    };
    let err = generate_corpus(&base_plan(10), &backend, &params(), &dir.path().join("c.jsonl"), &o).unwrap_err();
    assert!(matches!(err, Error::BackendUnavailable { completed: 0, .. }), "{err:?}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn validator_accepts_randomized_valid_exchanges() {
    let (url, seen) = start(Mode::Good);
    // One connection per request: pooled keep-alive sockets hit delayed-ACK stalls.
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(5))
        .max_idle_connections(0)
        .build();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let req = GenerateRequest {
            prompt: format!("The {} works as a", ["man", "woman", "Asian man", "Jamal"][rng.gen_range(0..4)]),
            n: rng.gen_range(1..60),
            top_k: rng.gen_range(1..600),
            temperature: rng.gen_range(0.05..100.0),
            max_new_tokens: rng.gen_range(1..64),
            seed: rng.gen::<bool>().then(|| rng.gen_range(0..1u64 << 53)),
        };
        validate_request(&req).unwrap();
        let body = agent
            .post(&format!("{url}{GENERATE_PATH}"))
            .send_json(&req)
            .unwrap()
            .into_string()
            .unwrap();
        let got = validate_generate_response(&req, &body).unwrap();
        assert_eq!(got.len(), req.n as usize);
    }
    assert_eq!(seen.load(Ordering::SeqCst), 1000);
}

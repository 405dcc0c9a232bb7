//! The HTTP oracle client against a minimal in-process server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use recall_forge::calibration::protocol::{OracleRequest, OracleResponse, RequestKind, ORACLE_PATH};
use recall_forge::calibration::{calibrate, call_with_retry, describe, CalibrationConfig, HttpOracle, MockOracle, Oracle};
use recall_forge::miner::{MiningReport, QueryMining};
use recall_forge::world::{World, WorldSpec};
use recall_forge::Error;

type Handler = dyn Fn(&Value) -> (u16, String) + Send + Sync;

struct Server {
    url: String,
    hits: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<(String, Value)>>>,
}

/// Serves every connection on its own thread; one request per connection.
fn serve(handler: Arc<Handler>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let (h, s) = (hits.clone(), seen.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (handler, hits, seen) = (handler.clone(), h.clone(), s.clone());
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let request_line = line.trim_end().to_string();
                let mut length = 0;
                loop {
                    line.clear();
                    reader.read_line(&mut line).unwrap();
                    let header = line.trim_end();
                    if header.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = header.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                hits.fetch_add(1, Ordering::SeqCst);
                let (status, out) = handler(&body);
                seen.lock().unwrap().push((request_line, body));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
                    out.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            });
        }
    });
    Server { url, hits, seen }
}

fn fixed(status: u16, body: &str) -> Arc<Handler> {
    let body = body.to_string();
    Arc::new(move |_| (status, body.clone()))
}

fn mock_handler(world: Arc<World>) -> Arc<Handler> {
    Arc::new(move |body| {
        let request: OracleRequest = serde_json::from_value(body.clone()).unwrap();
        match MockOracle::exact(&world).call(&request) {
            Ok(r) => (200, r.to_json().to_string()),
            Err(e) => (200, json!({"error": {"kind": "protocol", "message": e.to_string()}}).to_string()),
        }
    })
}

fn small_world() -> Arc<World> {
    Arc::new(World::generate(&WorldSpec { num_items: 200, num_queries: 40, ..WorldSpec::default() }).unwrap())
}

fn client(server: &Server) -> HttpOracle {
    HttpOracle::new(&server.url, Duration::from_secs(10)).unwrap()
}

fn sample_request(world: &World) -> OracleRequest {
    let q = &world.queries[0];
    let informative = &world.subsets[0].candidates[1];
    OracleRequest::generate(
        describe(world, &q.reference_id).unwrap(),
        &q.instruction,
        describe(world, informative).unwrap(),
    )
}

fn mining(world: &World) -> MiningReport {
    let records = world
        .queries
        .iter()
        .zip(&world.subsets)
        .map(|(q, s)| QueryMining {
            query_id: q.query_id.clone(),
            gt_rank: 3,
            informative: s.candidates[1..3].to_vec(),
        })
        .collect();
    MiningReport { records }
}

#[test]
fn endpoint_is_root_plus_oracle_path() {
    let o = HttpOracle::new("http://example.test:8080/", Duration::from_secs(1)).unwrap();
    assert_eq!(o.endpoint(), format!("http://example.test:8080{ORACLE_PATH}"));
}

#[test]
fn request_travels_as_documented_json() {
    let world = small_world();
    let server = serve(mock_handler(world.clone()));
    let req = sample_request(&world);
    let direct = MockOracle::exact(&world).call(&req).unwrap();
    let remote = client(&server).call(&req).unwrap();
    assert_eq!(direct, remote);

    let seen = server.seen.lock().unwrap();
    let (line, body) = &seen[0];
    assert_eq!(line, &format!("POST {ORACLE_PATH} HTTP/1.1"));
    assert_eq!(body["kind"], "generate_corrective");
    assert_eq!(body["instruction"], req.instruction.as_str());
    assert_eq!(body["reference"]["id"], world.queries[0].reference_id.as_str());
    assert!(body["candidate"]["attributes"].is_object());
    assert!(body.get("questions").is_none());
}

#[test]
fn vqa_round_trip() {
    let world = small_world();
    let server = serve(mock_handler(world.clone()));
    let id = &world.items[3].id;
    let req = OracleRequest::vqa("", describe(&world, id).unwrap(), vec!["is the color red?".into()]);
    match client(&server).call(&req).unwrap() {
        OracleResponse::Vqa(v) => assert_eq!(v.answers.len(), 1),
        other => panic!("{other:?}"),
    }
    assert_eq!(server.seen.lock().unwrap()[0].1["kind"], "vqa_check");
    assert_eq!(req.kind, RequestKind::VqaCheck);
}

#[test]
fn remote_calibration_matches_in_process() {
    let world = small_world();
    let server = serve(mock_handler(world.clone()));
    let report = mining(&world);
    let cfg = CalibrationConfig::default();
    let local = calibrate(&MockOracle::exact(&world), &world, &report, &cfg).unwrap();
    let remote = calibrate(&client(&server), &world, &report, &cfg).unwrap();
    assert_eq!(local, remote);
    assert!(remote.summary.kept > 0);
}

#[test]
fn retryable_error_body_is_transport_and_retried() {
    let world = small_world();
    let server = serve(fixed(200, r#"{"error": {"kind": "retryable", "message": "busy"}}"#));
    let err = call_with_retry(&client(&server), &sample_request(&world), 2).unwrap_err();
    assert!(matches!(err, Error::Transport(ref m) if m.contains("busy")), "{err}");
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn protocol_error_body_is_not_retried() {
    let world = small_world();
    let server = serve(fixed(422, r#"{"error": {"kind": "protocol", "message": "bad candidate"}}"#));
    let err = call_with_retry(&client(&server), &sample_request(&world), 2).unwrap_err();
    assert!(matches!(err, Error::Protocol(ref m) if m.contains("bad candidate")), "{err}");
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn server_errors_are_transport() {
    let world = small_world();
    let server = serve(fixed(503, "unavailable"));
    let err = client(&server).call(&sample_request(&world)).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}

#[test]
fn malformed_bodies_are_protocol() {
    let world = small_world();
    let req = sample_request(&world);
    for (status, body) in [
        (200, "not json"),
        (200, r#"{"intents": []}"#),
        (200, r#"{"answers": []}"#),
        (404, r#"{"detail": "no such route"}"#),
    ] {
        let server = serve(fixed(status, body));
        let err = client(&server).call(&req).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{status} {body}: {err}");
    }
}

#[test]
fn transient_failure_recovers_within_budget() {
    let world = small_world();
    let inner = mock_handler(world.clone());
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = serve(Arc::new(move |body| {
        if c.fetch_add(1, Ordering::SeqCst) == 0 {
            (502, String::new())
        } else {
            inner(body)
        }
    }));
    let req = sample_request(&world);
    assert!(call_with_retry(&client(&server), &req, 1).is_ok());
    assert_eq!(server.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn persistent_outage_aborts_calibration() {
    let world = small_world();
    let server = serve(fixed(500, ""));
    let cfg = CalibrationConfig { retries: 1, ..CalibrationConfig::default() };
    let err = calibrate(&client(&server), &world, &mining(&world), &cfg).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}

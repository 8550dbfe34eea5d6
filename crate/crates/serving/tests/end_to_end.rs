use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use redf_core::lstm::{predict, HyperParams, ModelParams};
use redf_core::numeric::Rng;
use redf_core::timeseries::Scaler;
use redf_serving::artifact::{self, ArtifactError};
use redf_serving::client::{request_with_id, Connection};
use redf_serving::frame::{read_frame, write_raw, Message};
use redf_serving::{
    client_request, run_broker, run_model_server, BrokerClient, ClientError, ModelRegistry, ServeMode, Target,
    REQUEST_TOPIC,
};
use serde_json::json;

const TIMEOUT: Duration = Duration::from_secs(10);

fn model() -> (ModelParams, Scaler) {
    let hyper = HyperParams {
        units: 6,
        timesteps: 24,
        ..HyperParams::default()
    };
    (
        ModelParams::init(hyper, &mut Rng::new(42)),
        Scaler::minmax(900.0, 2600.0).unwrap(),
    )
}

fn registry_from_artifact() -> (Arc<ModelRegistry>, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dayton.redf");
    let (p, s) = model();
    artifact::save(&path, &p, &s).unwrap();
    (Arc::new(ModelRegistry::load(&[&path]).unwrap()), dir)
}

fn history(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(1000.0, 2500.0)).collect()
}

/// In-process oracle: scale, forward, invert.
fn in_process(history: &[f64], horizon: usize) -> Vec<f64> {
    let (p, s) = model();
    let mut window = s.apply(&history[history.len() - 24..]);
    let mut out = Vec::new();
    for _ in 0..horizon {
        let y = predict(&p, [window.as_slice()], 1).unwrap()[0];
        out.push(s.invert_value(y));
        window.remove(0);
        window.push(y);
    }
    out
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn direct_forecasts_equal_in_process_inference() {
    let (reg, _dir) = registry_from_artifact();
    let server = run_model_server(reg, ServeMode::Listen("127.0.0.1:0".into())).unwrap();
    let target = Target::Direct(server.addr().unwrap().to_string());
    let mut rng = Rng::new(5);
    for k in 0..50 {
        let h = history(&mut rng, 24 + k);
        let resp = client_request(&target, "dayton", &h, 1 + k % 3, TIMEOUT).unwrap();
        assert_eq!(bits(&resp.forecast), bits(&in_process(&h, 1 + k % 3)), "history {k}");
        assert!(resp.model_version.starts_with("dayton@"));
    }
    server.shutdown();
}

#[test]
fn broker_forecasts_equal_in_process_inference() {
    let (broker, _) = run_broker("127.0.0.1:0").unwrap();
    let addr = broker.addr().unwrap().to_string();
    let (reg, _dir) = registry_from_artifact();
    let server = run_model_server(
        reg,
        ServeMode::Broker {
            address: addr.clone(),
            topic: REQUEST_TOPIC.into(),
            workers: 2,
        },
    )
    .unwrap();
    let target = Target::broker(addr);
    let mut rng = Rng::new(6);
    for k in 0..50 {
        let h = history(&mut rng, 30);
        let resp = client_request(&target, "dayton", &h, 2, TIMEOUT).unwrap();
        assert_eq!(bits(&resp.forecast), bits(&in_process(&h, 2)), "history {k}");
    }
    let err = client_request(&target, "dayton", &[1000.0; 3], 1, TIMEOUT).unwrap_err();
    assert_eq!(err.code(), "insufficient_history");
    server.shutdown();
    broker.shutdown();
}

#[test]
fn concurrent_requests_are_matched_by_id() {
    let (reg, _dir) = registry_from_artifact();
    let server = run_model_server(reg, ServeMode::Listen("127.0.0.1:0".into())).unwrap();
    let target = Target::Direct(server.addr().unwrap().to_string());
    let threads: Vec<_> = (0..100)
        .map(|k| {
            let target = target.clone();
            thread::spawn(move || {
                let h = history(&mut Rng::new(1000 + k), 24);
                let id = format!("req-{k}");
                let resp = request_with_id(&target, &id, "dayton", &h, 1, TIMEOUT).unwrap();
                assert_eq!(resp.id, id);
                bits(&resp.forecast) == bits(&in_process(&h, 1))
            })
        })
        .collect();
    let ok = threads.into_iter().map(|t| t.join().unwrap()).filter(|&b| b).count();
    assert_eq!(ok, 100);

    // pipelined on one connection, replies read back in bulk
    let mut conn = Connection::open(&target_addr(&target), TIMEOUT).unwrap();
    for k in 0..100 {
        conn.send(&Message::ForecastReq {
            id: format!("p{k}"),
            model: "dayton".into(),
            horizon: 1,
            history: history(&mut Rng::new(k), 24),
            reply_topic: None,
        })
        .unwrap();
    }
    for k in 0..100 {
        match conn.recv().unwrap() {
            Message::ForecastResp { id, forecast, .. } => {
                assert_eq!(id, format!("p{k}"));
                assert_eq!(bits(&forecast), bits(&in_process(&history(&mut Rng::new(k), 24), 1)));
            }
            other => panic!("{other:?}"),
        }
    }
    server.shutdown();
}

fn target_addr(t: &Target) -> String {
    match t {
        Target::Direct(a) => a.clone(),
        Target::Broker { address, .. } => address.clone(),
    }
}

#[test]
fn concurrent_requests_through_broker() {
    let (broker, _) = run_broker("127.0.0.1:0").unwrap();
    let addr = broker.addr().unwrap().to_string();
    let (reg, _dir) = registry_from_artifact();
    let server = run_model_server(
        reg,
        ServeMode::Broker {
            address: addr.clone(),
            topic: REQUEST_TOPIC.into(),
            workers: 4,
        },
    )
    .unwrap();
    let threads: Vec<_> = (0..100)
        .map(|k| {
            let target = Target::broker(addr.clone());
            thread::spawn(move || {
                let h = history(&mut Rng::new(2000 + k), 24);
                let id = format!("b-{k}");
                let resp = request_with_id(&target, &id, "dayton", &h, 1, TIMEOUT).unwrap();
                resp.id == id && bits(&resp.forecast) == bits(&in_process(&h, 1))
            })
        })
        .collect();
    assert!(threads.into_iter().all(|t| t.join().unwrap()));
    server.shutdown();
    broker.shutdown();
}

#[test]
fn server_error_codes_over_the_wire() {
    let (reg, _dir) = registry_from_artifact();
    let server = run_model_server(reg, ServeMode::Listen("127.0.0.1:0".into())).unwrap();
    let target = Target::Direct(server.addr().unwrap().to_string());
    let code = |model: &str, h: &[f64]| client_request(&target, model, h, 1, TIMEOUT).unwrap_err().code().to_string();
    assert_eq!(code("missing", &[1000.0; 24]), "unknown_model");
    assert_eq!(code("dayton", &[1000.0; 3]), "insufficient_history");
    let mut h = vec![1000.0; 24];
    h[7] = f64::INFINITY;
    assert_eq!(code("dayton", &h), "invalid_values");
    server.shutdown();
}

#[test]
fn closed_port_is_a_connect_error() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let started = Instant::now();
    let err = client_request(
        &Target::Direct(format!("127.0.0.1:{port}")),
        "m",
        &[1.0; 24],
        1,
        Duration::from_secs(2),
    )
    .unwrap_err();
    assert!(matches!(err, ClientError::Connect { .. }), "{err:?}");
    assert!(started.elapsed() < Duration::from_secs(2));
}

#[test]
fn silent_server_is_a_timeout() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let hold = thread::spawn(move || listener.accept().map(|(s, _)| s));
    let err = client_request(&Target::Direct(addr), "m", &[1.0; 24], 1, Duration::from_millis(200)).unwrap_err();
    assert!(matches!(err, ClientError::Timeout(_)), "{err:?}");
    drop(hold.join());
}

#[test]
fn broker_fifo_and_empty_marker_over_tcp() {
    let (handle, broker) = run_broker("127.0.0.1:0").unwrap();
    let addr = handle.addr().unwrap().to_string();
    let mut c = BrokerClient::connect(&addr, TIMEOUT).unwrap();
    c.publish("t", json!("a")).unwrap();
    c.publish("t", json!("b")).unwrap();
    assert_eq!(c.fetch("t", Duration::ZERO).unwrap(), Some(json!("a")));
    assert_eq!(c.fetch("t", Duration::ZERO).unwrap(), Some(json!("b")));
    let started = Instant::now();
    assert_eq!(c.fetch("t", Duration::from_millis(50)).unwrap(), None);
    let waited = started.elapsed();
    assert!(waited >= Duration::from_millis(50), "{waited:?}");
    assert!(waited <= Duration::from_millis(70), "{waited:?}");

    // several producers; everything published is fetched, in order per producer
    let producers: Vec<_> = (0..4)
        .map(|p| {
            let addr = addr.clone();
            thread::spawn(move || {
                let mut c = BrokerClient::connect(&addr, TIMEOUT).unwrap();
                for i in 0..50 {
                    c.publish("many", json!([p, i])).unwrap();
                }
            })
        })
        .collect();
    producers.into_iter().for_each(|t| t.join().unwrap());
    assert_eq!(broker.depth("many"), 200);
    let mut last = [-1i64; 4];
    for _ in 0..200 {
        let v = c.fetch("many", Duration::ZERO).unwrap().unwrap();
        let (p, i) = (v[0].as_u64().unwrap() as usize, v[1].as_i64().unwrap());
        assert!(i > last[p]);
        last[p] = i;
    }
    assert_eq!(c.fetch("many", Duration::ZERO).unwrap(), None);
    handle.shutdown();
}

#[test]
fn malformed_json_keeps_connection_and_oversized_closes_it() {
    let (handle, _) = run_broker("127.0.0.1:0").unwrap();
    let addr = handle.addr().unwrap();
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(TIMEOUT)).unwrap();
    write_raw(&mut s, b"{not json").unwrap();
    match read_frame(&mut s).unwrap().unwrap() {
        Message::Error { code, .. } => assert_eq!(code, "malformed_frame"),
        other => panic!("{other:?}"),
    }
    write_raw(&mut s, br#"{"type":"PUBLISH","id":"ok","topic":"t","payload":1}"#).unwrap();
    assert_eq!(read_frame(&mut s).unwrap().unwrap().id(), "ok");

    s.write_all(&(17u32 * 1024 * 1024).to_be_bytes()).unwrap();
    match read_frame(&mut s).unwrap().unwrap() {
        Message::Error { code, .. } => assert_eq!(code, "frame_too_large"),
        other => panic!("{other:?}"),
    }
    let mut rest = Vec::new();
    assert_eq!(s.read_to_end(&mut rest).unwrap_or(0), 0);
    handle.shutdown();
}

#[test]
fn artifact_round_trip_and_fuzz() {
    let (p, s) = model();
    let bytes = artifact::to_bytes(&p, &s);
    let (q, t) = artifact::from_bytes(&bytes).unwrap();
    assert_eq!(bits(&p.weights.tensors().iter().flat_map(|x| x.data.to_vec()).collect::<Vec<_>>()),
               bits(&q.weights.tensors().iter().flat_map(|x| x.data.to_vec()).collect::<Vec<_>>()));
    assert_eq!((p.hyper, s), (q.hyper, t));

    let mut rng = Rng::new(77);
    for _ in 0..100 {
        let cut = rng.below(bytes.len());
        let err = artifact::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, ArtifactError::Magic | ArtifactError::Shape(_)), "cut {cut}: {err}");
    }
    for _ in 0..100 {
        let mut bad = bytes.clone();
        let at = rng.below(bad.len());
        bad[at] ^= 1 << rng.below(8);
        assert!(artifact::from_bytes(&bad).is_err(), "flip at {at}");
    }
}

#[test]
fn shutdown_stops_the_listener() {
    let (reg, _dir) = registry_from_artifact();
    let server = run_model_server(reg, ServeMode::Listen("127.0.0.1:0".into())).unwrap();
    let addr = server.addr().unwrap();
    server.shutdown();
    thread::sleep(Duration::from_millis(20));
    assert!(TcpStream::connect(addr).is_err());
}

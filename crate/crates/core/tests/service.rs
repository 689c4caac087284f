use std::net::SocketAddr;
use std::time::{Duration, Instant};

use kaa_cal::cal::{AnnotationRequest, Oracle};
use kaa_cal::harness::service::{schema_of, AnnotationItem, AnnotationService, ServicePhase, Status};
use kaa_cal::synthdata::{generate_bundle, DatasetBundle, SynthConfig};
use serde_json::json;
use ureq::Agent;

fn small_data() -> DatasetBundle {
    let cfg = SynthConfig {
        train_size: 12,
        val_size: 4,
        test_size: 4,
        joint_size: 8,
        ..SynthConfig::default()
    };
    generate_bundle(&cfg, 3).unwrap()
}

fn agent() -> Agent {
    Agent::config_builder().http_status_as_error(false).build().new_agent()
}

fn start(data: &DatasetBundle) -> AnnotationService {
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    AnnotationService::start(addr, schema_of(&data.config), 30).unwrap()
}

fn status(a: &Agent, base: &str) -> Status {
    a.get(format!("{base}/status")).call().unwrap().body_mut().read_json().unwrap()
}

fn wait_for(a: &Agent, base: &str, phase: ServicePhase) -> Status {
    let t0 = Instant::now();
    loop {
        let s = status(a, base);
        if s.phase == phase {
            return s;
        }
        assert!(t0.elapsed() < Duration::from_secs(20), "service never reached {phase:?}");
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn post_labels(a: &Agent, base: &str, body: &str) -> u16 {
    a.post(format!("{base}/labels"))
        .content_type("application/json")
        .send(body)
        .unwrap()
        .status()
        .as_u16()
}

#[test]
fn labelling_round_trip_over_http() {
    let data = small_data();
    let service = start(&data);
    let base = service.base_url();
    let a = agent();

    let idle = status(&a, &base);
    assert_eq!(idle.phase, ServicePhase::Idle);
    assert_eq!(idle.budget_remaining, 30);
    let q: Vec<AnnotationItem> = a.get(format!("{base}/queue")).call().unwrap().body_mut().read_json().unwrap();
    assert!(q.is_empty());

    let ids: Vec<u64> = data.joint().iter().take(3).map(|e| e.id).collect();
    let request = AnnotationRequest {
        iteration: 1,
        ids: ids.clone(),
        suggestions: Some(vec![vec![0, 1, 0], vec![1, 1, 1], vec![2, 0, 1]]),
    };
    let answers = std::thread::scope(|scope| {
        let mut oracle = service.oracle(&data, 0, Some(Duration::from_secs(60)));
        let worker = scope.spawn(move || oracle.annotate(&request));

        let s = wait_for(&a, &base, ServicePhase::Annotating);
        assert_eq!((s.iteration, s.pending, s.labeled), (1, 3, 0));
        let q: Vec<AnnotationItem> = a.get(format!("{base}/queue")).call().unwrap().body_mut().read_json().unwrap();
        assert_eq!(q.iter().map(|i| i.id).collect::<Vec<_>>(), ids);
        assert_eq!(q[1].suggestions, Some(vec![1, 1, 1]));
        assert_eq!(q[0].schema.len(), 3);

        let mut resp = a.get(format!("http://{}{}", service.addr(), q[0].image)).call().unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        let png = resp.body_mut().read_to_vec().unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
        assert_eq!(a.get(format!("{base}/image/999999")).call().unwrap().status().as_u16(), 404);

        assert_eq!(post_labels(&a, &base, "{not json"), 400);
        assert_eq!(post_labels(&a, &base, &json!({"id": ids[0]}).to_string()), 400);
        assert_eq!(post_labels(&a, &base, &json!({"id": ids[0], "labels": [0, 0]}).to_string()), 400);
        assert_eq!(post_labels(&a, &base, &json!({"id": ids[0], "labels": [0, 9, 0]}).to_string()), 400);
        assert_eq!(post_labels(&a, &base, &json!({"id": 424242, "labels": [0, 0, 0]}).to_string()), 409);
        assert_eq!(a.post(format!("{base}/advance")).send_empty().unwrap().status().as_u16(), 409);

        assert_eq!(post_labels(&a, &base, &json!({"id": ids[0], "labels": [1, 0, 2]}).to_string()), 200);
        let s = status(&a, &base);
        assert_eq!((s.labeled, s.pending), (1, 2));
        assert_eq!(post_labels(&a, &base, &json!({"id": ids[0], "labels": [1, 0, 2]}).to_string()), 409);
        assert_eq!(post_labels(&a, &base, &json!({"id": ids[1], "labels": [-1, -1, -1]}).to_string()), 200);
        assert_eq!(post_labels(&a, &base, &json!({"id": ids[2], "labels": [0, -1, 1]}).to_string()), 200);

        let q: Vec<AnnotationItem> = a.get(format!("{base}/queue")).call().unwrap().body_mut().read_json().unwrap();
        assert!(q.is_empty());
        assert_eq!(a.post(format!("{base}/advance")).send_empty().unwrap().status().as_u16(), 200);
        worker.join().unwrap()
    })
    .unwrap();
    assert_eq!(answers, vec![vec![1, 0, 2], vec![-1, -1, -1], vec![0, -1, 1]]);
    let s = status(&a, &base);
    assert_eq!(s.phase, ServicePhase::Training);
    assert_eq!(s.labeled, 3);
}

#[test]
fn oracle_times_out_without_annotator() {
    let data = small_data();
    let service = start(&data);
    let mut oracle = service.oracle(&data, 0, Some(Duration::from_millis(50)));
    let ids = vec![data.examples[0].id];
    let err = oracle
        .annotate(&AnnotationRequest {
            iteration: 1,
            ids,
            suggestions: None,
        })
        .unwrap_err();
    assert_eq!(err.kind(), "contract");
    assert_eq!(service.status().phase, ServicePhase::Idle);
}

#[test]
fn metrics_endpoint_starts_empty() {
    let data = small_data();
    let service = start(&data);
    let rows: Vec<serde_json::Value> = agent()
        .get(format!("{}/metrics", service.base_url()))
        .call()
        .unwrap()
        .body_mut()
        .read_json()
        .unwrap();
    assert!(rows.is_empty());
}

//! The external teacher/predictor HTTP contract, exercised against a local
//! single-purpose server speaking raw HTTP/1.1.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::thread::JoinHandle;

use tabrl::eval::{ExternalPredictor, Predictor};
use tabrl::prompt::parse_output;
use tabrl::synthesis::{ExternalTeacher, Teacher, TeacherRequest};
use tabrl::table::{ContextFeature, InstanceContext, Target, TaskType, TrainingInstance, Value};

/// Serves `responses.len()` requests, one connection each, and returns the
/// request bodies it saw.
fn spawn_server(responses: Vec<String>) -> (String, JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind localhost");
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for response in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            let (header_end, content_length) = loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = find_header_end(&buf) {
                    let headers = String::from_utf8_lossy(&buf[..pos]);
                    let content_length = headers
                        .lines()
                        .find_map(|l| {
                            let (name, value) = l.split_once(':')?;
                            name.eq_ignore_ascii_case("content-length")
                                .then(|| value.trim().parse::<usize>().ok())?
                        })
                        .unwrap_or(0);
                    break (pos + 4, content_length);
                }
            };
            while buf.len() < header_end + content_length {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
            }
            bodies.push(String::from_utf8_lossy(&buf[header_end..header_end + content_length]).to_string());
            let reply = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                response.len(),
                response
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
        bodies
    });
    (format!("http://{addr}/model"), handle)
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn sample_instance() -> TrainingInstance {
    TrainingInstance {
        table_id: "wire".into(),
        query_index: 2,
        shot_k: 3,
        task_type: TaskType::Cls,
        prompt: "the rendered prompt".into(),
        target: Target::Class("yes".into()),
        gold_evidence: [1usize, 3].into_iter().collect(),
        evidence_ratio: 0.4,
        seed: 9,
        context: InstanceContext {
            rows: vec![
                ContextFeature { similarity: 0.9, label: Value::Text("yes".into()) },
                ContextFeature { similarity: 0.2, label: Value::Text("no".into()) },
                ContextFeature { similarity: 0.8, label: Value::Text("yes".into()) },
            ],
            class_labels: Some(vec!["yes".into(), "no".into()]),
            reg_prior: None,
        },
    }
}

#[test]
fn external_teacher_speaks_the_wire_contract() {
    let (url, server) = spawn_server(vec![
        r#"{"trace": "ranking rows by similarity", "selection": [1, 3]}"#.to_string(),
        r#"{"trace": "estimating from evidence", "answer": "yes"}"#.to_string(),
        r#"{"trace": "rewritten trace"}"#.to_string(),
        r#"{"answer": "accept"}"#.to_string(),
    ]);
    let mut teacher = ExternalTeacher::new(url);
    let instance = sample_instance();

    let (trace, selection) = teacher.select_evidence(&instance, 2).unwrap();
    assert_eq!(trace, "ranking rows by similarity");
    assert_eq!(selection, [1usize, 3].into_iter().collect::<BTreeSet<_>>());

    let (trace, answer) = teacher.predict(&instance, "prior trace").unwrap();
    assert_eq!(trace, "estimating from evidence");
    assert_eq!(answer, "yes");

    let rewritten = teacher.rewrite_trace("there are exactly 2 evidential rows").unwrap();
    assert_eq!(rewritten, "rewritten trace");

    let table = tabrl::synthetic::generate_synthetic_table(
        &tabrl::synthetic::SyntheticTableSpec::cls(20, 3, 2, 0.5, 0),
    )
    .unwrap();
    assert!(teacher.propose_target(&table, "f0").unwrap());

    let bodies = server.join().unwrap();
    assert_eq!(bodies.len(), 4);
    let request: TeacherRequest = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(request.mode, "select_evidence");
    assert!(request.prompt.contains("the rendered prompt"));
    assert!(request.prompt.contains("exactly 2"));
    let request: TeacherRequest = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(request.mode, "predict");
    assert!(request.prompt.contains("prior trace"));
    let request: TeacherRequest = serde_json::from_str(&bodies[2]).unwrap();
    assert_eq!(request.mode, "rewrite");
    let request: TeacherRequest = serde_json::from_str(&bodies[3]).unwrap();
    assert_eq!(request.mode, "propose_target");
}

#[test]
fn external_predictor_renders_protocol_output() {
    let (url, server) = spawn_server(vec![
        r#"{"selection": [1, 3], "answer": "yes"}"#.to_string(),
    ]);
    let mut predictor = ExternalPredictor::new(url);
    let output = predictor.predict(&sample_instance()).unwrap();
    let parsed = parse_output(&output);
    assert!(parsed.well_formed);
    assert_eq!(parsed.selected.unwrap(), [1usize, 3].into_iter().collect::<BTreeSet<_>>());
    assert_eq!(parsed.answer.unwrap().raw, "yes");
    let bodies = server.join().unwrap();
    let request: TeacherRequest = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(request.mode, "predict");
}

#[test]
fn teacher_errors_on_missing_fields_and_bad_status() {
    let (url, server) = spawn_server(vec![r#"{"trace": "no selection field"}"#.to_string()]);
    let mut teacher = ExternalTeacher::new(url);
    let err = teacher.select_evidence(&sample_instance(), 2).unwrap_err();
    assert!(err.to_string().contains("selection"));
    server.join().unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut chunk = [0u8; 4096];
        let _ = stream.read(&mut chunk).unwrap();
        stream
            .write_all(b"HTTP/1.1 500 Internal Server Error\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")
            .unwrap();
    });
    let mut teacher = ExternalTeacher::new(format!("http://{addr}/model"));
    let err = teacher.rewrite_trace("trace").unwrap_err();
    assert!(err.to_string().contains("500"));
    handle.join().unwrap();
}

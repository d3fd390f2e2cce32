use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use visreflect::verifier::{Answer, RemoteVerifier, Verifier, VerifierError, VerifierQuery};

#[derive(Clone)]
enum Reply {
    Json(&'static str),
    Stall(Duration),
    Status(u16),
}

struct MockServer {
    url: String,
    bodies: Arc<Mutex<Vec<String>>>,
}

fn read_request(stream: &mut TcpStream) -> String {
    let mut reader = BufReader::new(stream);
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    String::from_utf8(body).unwrap()
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

/// Serves `replies` in order, one per connection; the last reply repeats.
fn serve(replies: Vec<Reply>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/verify", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&bodies);
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let mut stream = stream.unwrap();
            let reply = replies[i.min(replies.len() - 1)].clone();
            let seen = Arc::clone(&seen);
            thread::spawn(move || {
                let body = read_request(&mut stream);
                seen.lock().unwrap().push(body);
                match reply {
                    Reply::Json(b) => respond(&mut stream, 200, b),
                    Reply::Stall(d) => {
                        thread::sleep(d);
                        respond(&mut stream, 200, r#"{"text":"late"}"#);
                    }
                    Reply::Status(s) => respond(&mut stream, s, "{}"),
                }
            });
        }
    });
    MockServer { url, bodies }
}

fn query() -> VerifierQuery {
    VerifierQuery {
        item_id: "n01530575_10086".into(),
        category: "brambling".into(),
        prompt: "Does the picture have a brambling?".into(),
    }
}

fn client(url: &str, timeout_ms: u64, retries: u32) -> RemoteVerifier {
    RemoteVerifier::new(url, Duration::from_millis(timeout_ms), retries, 1).unwrap()
}

#[test]
fn yes_answer_round_trip() {
    let server = serve(vec![Reply::Json(
        r#"{"text":"Yes, there is a small finch on the branch."}"#,
    )]);
    let v = client(&server.url, 2_000, 0);
    let verdict = v.verify(&query()).unwrap();
    assert_eq!(verdict.answer, Answer::Yes);
    assert_eq!(
        verdict.raw_text,
        "Yes, there is a small finch on the branch."
    );
    assert_eq!(v.stats().requests, 1);
}

#[test]
fn request_carries_no_truth() {
    let server = serve(vec![Reply::Json(r#"{"text":"No."}"#)]);
    let v = client(&server.url, 2_000, 0);
    v.verify(&query()).unwrap();
    let bodies = server.bodies.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    let mut keys: Vec<&str> = body
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    keys.sort();
    assert_eq!(keys, ["image_ref", "item_id", "prompt"]);
    assert_eq!(body["prompt"], "Does the picture have a brambling?");
}

#[test]
fn timeouts_are_retried() {
    let server = serve(vec![
        Reply::Stall(Duration::from_millis(600)),
        Reply::Stall(Duration::from_millis(600)),
        Reply::Json(r#"{"text":"Yes."}"#),
    ]);
    let v = client(&server.url, 150, 3);
    let verdict = v.verify(&query()).unwrap();
    assert_eq!(verdict.answer, Answer::Yes);
    assert_eq!(v.stats().retries, 2);
    assert_eq!(v.stats().requests, 3);
}

#[test]
fn timeouts_exhaust_retries() {
    let server = serve(vec![Reply::Stall(Duration::from_millis(600))]);
    let v = client(&server.url, 100, 1);
    assert_eq!(
        v.verify(&query()).unwrap_err(),
        VerifierError::Timeout { attempts: 2 }
    );
}

#[test]
fn server_errors_are_retried_client_errors_are_not() {
    let server = serve(vec![
        Reply::Status(503),
        Reply::Json(r#"{"text":"not sure"}"#),
    ]);
    let v = client(&server.url, 2_000, 2);
    assert_eq!(v.verify(&query()).unwrap().answer, Answer::NotSure);

    let server = serve(vec![Reply::Status(400), Reply::Json(r#"{"text":"Yes"}"#)]);
    let v = client(&server.url, 2_000, 2);
    assert_eq!(
        v.verify(&query()).unwrap_err(),
        VerifierError::BadStatus {
            status: 400,
            attempts: 1
        }
    );
}

#[test]
fn malformed_body_is_not_retried() {
    let server = serve(vec![
        Reply::Json(r#"{"answer":"Yes"}"#),
        Reply::Json(r#"{"text":"Yes"}"#),
    ]);
    let v = client(&server.url, 2_000, 3);
    assert!(matches!(
        v.verify(&query()),
        Err(VerifierError::MalformedResponse(_))
    ));
    assert_eq!(v.stats().requests, 1);
}

#[test]
fn unparseable_text_becomes_not_sure() {
    let server = serve(vec![Reply::Json(r#"{"text":"The image shows a bird."}"#)]);
    let verdict = client(&server.url, 2_000, 0).verify(&query()).unwrap();
    assert_eq!(verdict.answer, Answer::NotSure);
    assert!(verdict.parse_miss);
}

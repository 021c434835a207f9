use std::net::SocketAddr;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use sioms_core::scenario::Scenario;
use sioms_live::{Server, ServerConfig};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;

async fn start(static_dir: Option<std::path::PathBuf>) -> SocketAddr {
    let config = ServerConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        static_dir,
        scenario: Scenario::builtin("cart_mass").unwrap(),
        ratio: 1.0,
        max_sessions: 8,
    };
    let server = Server::bind(config).await.unwrap();
    let addr = server.local_addr();
    tokio::spawn(server.run());
    addr
}

/// Minimal HTTP/1.1 exchange; returns the status code and body.
async fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let body = body.unwrap_or("");
    let ctype = if body.is_empty() { String::new() } else { "Content-Type: application/json\r\n".to_string() };
    let req = format!("{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n{ctype}Content-Length: {}\r\n\r\n{body}", body.len());
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8_lossy(&raw).into_owned();
    let status = text.split(' ').nth(1).unwrap().parse().unwrap();
    let body = text.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

async fn create(addr: SocketAddr, body: &str) -> String {
    let (status, text) = http(addr, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, 201, "{text}");
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["state"], "created");
    v["id"].as_str().unwrap().to_string()
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

async fn connect(addr: SocketAddr, id: &str) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws")).await.unwrap().0
}

/// Next text frame, or `None` once the server closes.
async fn recv(ws: &mut Ws) -> Option<Value> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), ws.next()).await.expect("frame within 30 s")?;
        match msg {
            Ok(Message::Text(t)) => {
                let v: Value = serde_json::from_str(&t).unwrap();
                assert_eq!(v["v"], 1, "every frame carries the schema version");
                return Some(v);
            }
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => continue,
        }
    }
}

/// Reads until a frame of `kind` arrives, skipping the stream in between.
async fn recv_kind(ws: &mut Ws, kind: &str) -> Value {
    loop {
        let v = recv(ws).await.unwrap_or_else(|| panic!("closed before a {kind} frame"));
        if v["type"] == kind {
            return v;
        }
    }
}

/// Everything up to the close. The stop ack is a direct reply while the
/// summary is broadcast, so their relative order is not fixed.
async fn rest(ws: &mut Ws) -> Vec<Value> {
    let mut out = Vec::new();
    while let Some(v) = recv(ws).await {
        out.push(v);
    }
    out
}

fn find<'a>(frames: &'a [Value], kind: &str) -> &'a Value {
    frames.iter().find(|v| v["type"] == kind).unwrap_or_else(|| panic!("no {kind} frame"))
}

async fn send(ws: &mut Ws, text: &str) {
    ws.send(Message::Text(text.to_string().into())).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn stream_starts_at_the_initial_state() {
    let addr = start(None).await;
    let id = create(addr, "{}").await;
    let mut ws = connect(addr, &id).await;
    let hello = recv(&mut ws).await.unwrap();
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["session"], id.as_str());
    assert_eq!(hello["rate_hz"], 30.0);
    assert_eq!(recv(&mut ws).await.unwrap()["state"], "running");
    let first = recv(&mut ws).await.unwrap();
    assert_eq!(first["type"], "state");
    assert_eq!(first["t"], 0.0);
    assert_eq!(first["x"], serde_json::json!([0.5, 0.0, 0.1, 0.0, 1.0]));
    assert_eq!(first["u"].as_array().unwrap().len(), 3);
    send(&mut ws, r#"{"type":"stop"}"#).await;
    let tail = rest(&mut ws).await;
    assert_eq!(find(&tail, "ack")["command"], "stop");
    assert_eq!(find(&tail, "summary")["completed"], false);
}

#[tokio::test(flavor = "multi_thread")]
async fn commands_get_acks_or_typed_errors() {
    let addr = start(None).await;
    let id = create(addr, r#"{"ratio": 1.0}"#).await;
    let mut ws = connect(addr, &id).await;
    recv_kind(&mut ws, "state").await;

    send(&mut ws, r#"{"type":"impulse","index":4,"magnitude":0.2}"#).await;
    let ack = recv_kind(&mut ws, "ack").await;
    assert_eq!((ack["command"].as_str(), ack["index"].as_u64(), ack["magnitude"].as_f64()), (Some("impulse"), Some(4), Some(0.2)));
    assert!(ack["t"].as_f64().unwrap() >= 0.0);

    send(&mut ws, r#"{"type":"impulse","index":4,"magnitude":0.0}"#).await;
    assert_eq!(recv_kind(&mut ws, "ack").await["magnitude"], 0.0);

    send(&mut ws, r#"{"type":"impulse","index":9,"magnitude":0.2}"#).await;
    assert_eq!(recv_kind(&mut ws, "error").await["code"], "index_out_of_range");
    send(&mut ws, r#"{"type":"resume"}"#).await;
    assert_eq!(recv_kind(&mut ws, "error").await["code"], "invalid_state");
    send(&mut ws, r#"{"type":"warp"}"#).await;
    assert_eq!(recv_kind(&mut ws, "error").await["code"], "bad_frame");
    send(&mut ws, r#"{"v":7,"type":"pause"}"#).await;
    assert_eq!(recv_kind(&mut ws, "error").await["code"], "unsupported_version");

    send(&mut ws, r#"{"type":"pause"}"#).await;
    assert_eq!(recv_kind(&mut ws, "ack").await["command"], "pause");
    send(&mut ws, r#"{"type":"resume"}"#).await;
    assert_eq!(recv_kind(&mut ws, "ack").await["command"], "resume");
    send(&mut ws, r#"{"type":"stop"}"#).await;
    let tail = rest(&mut ws).await;
    assert_eq!(find(&tail, "ack")["command"], "stop");
    let summary = find(&tail, "summary");
    let impulses = summary["impulses"].as_array().unwrap();
    assert_eq!(impulses.len(), 2);
    assert_eq!(impulses[1]["noop"], true);

    // the session is over; a late socket still gets the summary
    let (status, info) = http(addr, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, 200);
    let info: Value = serde_json::from_str(&info).unwrap();
    assert_eq!(info["state"], "stopped");
    let mut late = connect(addr, &id).await;
    assert_eq!(recv(&mut late).await.unwrap()["state"], "stopped");
    assert_eq!(recv(&mut late).await.unwrap()["type"], "summary");
}

#[tokio::test(flavor = "multi_thread")]
async fn heartbeat_every_two_seconds() {
    let addr = start(None).await;
    let id = create(addr, "{}").await;
    let mut ws = connect(addr, &id).await;
    let started = Instant::now();
    let hb = recv_kind(&mut ws, "heartbeat").await;
    let waited = started.elapsed().as_secs_f64();
    assert!((1.5..3.0).contains(&waited), "first heartbeat after {waited} s");
    assert_eq!(hb["session"], id.as_str());
    assert_eq!(hb["state"], "running");
    send(&mut ws, r#"{"type":"stop"}"#).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn as_fast_as_possible_session_runs_to_completion() {
    let addr = start(None).await;
    let id = create(addr, r#"{"ratio": 0}"#).await;
    let mut ws = connect(addr, &id).await;
    let mut last_t = -1.0;
    let mut frames = 0;
    let summary = loop {
        let v = recv(&mut ws).await.expect("summary before close");
        match v["type"].as_str().unwrap() {
            "state" => {
                let t = v["t"].as_f64().unwrap();
                assert!(t > last_t);
                last_t = t;
                frames += 1;
            }
            "summary" => break v,
            _ => {}
        }
    };
    assert_eq!(summary["completed"], true);
    assert_eq!(summary["t"], 40.0);
    assert_eq!(frames, 1 + 40 * 30);
    assert!(recv(&mut ws).await.is_none(), "socket closes after the summary");
}

#[tokio::test(flavor = "multi_thread")]
async fn http_errors_and_distinct_sessions() {
    let addr = start(None).await;
    let a = create(addr, "{}").await;
    let b = create(addr, r#"{"scenario": "cart_mass"}"#).await;
    assert_ne!(a, b);
    let (status, body) = http(addr, "GET", "/sessions/nope", None).await;
    assert_eq!(status, 404);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["code"], "unknown_session");
    let (status, body) = http(addr, "POST", "/sessions", Some(r#"{"scenario": "/etc/passwd"}"#)).await;
    assert_eq!(status, 400);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["code"], "invalid_scenario");
    let (status, _) = http(addr, "POST", "/sessions", Some(r#"{"ratio": -2}"#)).await;
    assert_eq!(status, 400);
    let (status, body) = http(addr, "GET", "/health", None).await;
    assert_eq!((status, body.as_str()), (200, "ok"));
}

#[tokio::test(flavor = "multi_thread")]
async fn static_files_are_served() {
    let dir = tempfile::TempDir::new().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>cart</h1>").unwrap();
    let addr = start(Some(dir.path().to_path_buf())).await;
    let (status, body) = http(addr, "GET", "/index.html", None).await;
    assert_eq!(status, 200);
    assert!(body.contains("<h1>cart</h1>"));
    let (status, _) = http(addr, "GET", "/missing.js", None).await;
    assert_eq!(status, 404);
}

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Server {
    child: Child,
    addr: String,
    _tmp: tempfile::TempDir,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(scenario: &str, script: Option<&str>) -> Server {
    let tmp = tempfile::tempdir().unwrap();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../data/scenarios/{scenario}.json"));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_comuros"));
    cmd.args(["serve", "--scenario", path.to_str().unwrap(), "--serve", "127.0.0.1:0", "--tps", "200", "--world-every", "10"]);
    if let Some(s) = script {
        let p = tmp.path().join("script.json");
        std::fs::write(&p, s).unwrap();
        cmd.args(["--script", p.to_str().unwrap()]);
    }
    let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect("listening line").to_string();
    Server { child, addr, _tmp: tmp }
}

async fn snapshot(addr: &str) -> Value {
    reqwest::get(format!("http://{addr}/snapshot")).await.unwrap().json().await.unwrap()
}

async fn connect(addr: &str) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn next_frame(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(20), ws.next()).await.expect("frame in time").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

/// Read frames until `pred` holds for a chat entry; returns all chat entries seen.
async fn chat_until(ws: &mut Ws, seen: &mut Vec<Value>, pred: impl Fn(&[Value]) -> bool) {
    while !pred(seen) {
        let f = next_frame(ws).await;
        let mut keys: Vec<&str> = f.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["payload", "tick", "ts", "type"]);
        if f["type"] == "chat" {
            seen.push(f["payload"].clone());
        }
    }
}

fn role_after(entries: &[Value], first: &str, then: &str) -> bool {
    entries
        .iter()
        .position(|e| e["role"] == first)
        .is_some_and(|i| entries[i + 1..].iter().any(|e| e["role"] == then))
}

#[tokio::test(flavor = "multi_thread")]
async fn snapshot_endpoint_reports_live_state() {
    let srv = start("transport", Some("[]"));
    let s = snapshot(&srv.addr).await;
    for k in ["tick", "world", "manager", "chat", "finished"] {
        assert!(s.get(k).is_some(), "{k}");
    }
    assert_eq!(s["finished"], false);
    tokio::time::sleep(Duration::from_millis(100)).await;
    let later = snapshot(&srv.addr).await;
    assert!(later["tick"].as_u64() > s["tick"].as_u64(), "clock advances without clients");
}

#[tokio::test(flavor = "multi_thread")]
async fn user_command_streams_plan_and_late_joiner_matches_snapshot() {
    let srv = start("transport", Some("[]"));
    let mut a = connect(&srv.addr).await;
    a.send(Message::Text(r#"{"type":"user_input","payload":{"text":"  "}}"#.into())).await.unwrap();
    let err = next_frame(&mut a).await;
    assert_eq!(err["type"], "error");
    a.send(Message::Text("not json".into())).await.unwrap();
    assert_eq!(next_frame(&mut a).await["type"], "error");

    let input = json!({"type": "user_input", "payload": {"text": "Deliver the blue ball to (4,0)"}});
    a.send(Message::Text(input.to_string().into())).await.unwrap();
    let mut seen_a = Vec::new();
    chat_until(&mut a, &mut seen_a, |e| role_after(e, "USER", "TASK_MANAGER")).await;
    assert_eq!(seen_a[0]["text"], "Deliver the blue ball to (4,0)");

    // a reconnecting client replays history, then follows the stream
    let mut b = connect(&srv.addr).await;
    let snap = snapshot(&srv.addr).await;
    let want = snap["chat"].as_array().unwrap().clone();
    let mut seen_b = Vec::new();
    chat_until(&mut b, &mut seen_b, |e| e.len() >= want.len()).await;
    chat_until(&mut a, &mut seen_a, |e| e.len() >= want.len()).await;
    assert_eq!(seen_b[..want.len()], want[..]);
    assert_eq!(seen_a[..want.len()], want[..]);
    let ids: Vec<u64> = seen_b.iter().map(|e| e["id"].as_u64().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]), "each entry once, in order");
}

#[tokio::test(flavor = "multi_thread")]
async fn drop_event_is_streamed_in_temporal_position() {
    let srv = start("lab_drop", None);
    let mut ws = connect(&srv.addr).await;
    let mut seen = Vec::new();
    chat_until(&mut ws, &mut seen, |e| role_after(e, "EVENT", "TASK_MANAGER")).await;
    let ticks: Vec<u64> = seen.iter().map(|e| e["tick"].as_u64().unwrap()).collect();
    assert!(ticks.windows(2).all(|w| w[0] <= w[1]), "{ticks:?}");
    let event = seen.iter().find(|e| e["role"] == "EVENT").unwrap();
    assert!(event["tick"].as_u64().unwrap() >= 40);
    assert!(seen.iter().position(|e| e["role"] == "TASK_MANAGER") < seen.iter().position(|e| e["role"] == "EVENT"));
}

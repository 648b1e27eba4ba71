//! Live gateway. The simulation owns its thread and never waits on clients;
//! handlers see copies of its state and talk to it through a channel.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use clap::Args;
use comuros_core::gateway::{ClientMessage, Frame, FrameType};
use comuros_core::manager::{StaticRules, DEFAULT_RULES};
use comuros_core::planner::make_planner;
use comuros_core::runtime::Runtime;
use futures::{SinkExt, StreamExt};
use tokio::sync::broadcast;

use crate::run::{load_scenario, load_script};
use crate::{invalid, BackendArg};

/// Frames a client may fall behind by before it is dropped.
const CLIENT_BUFFER: usize = 4096;

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Event script (JSON list) replacing the scenario's own.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArg,
    /// Bind address; port 0 picks a free port.
    #[arg(long = "serve", default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Simulation ticks per second.
    #[arg(long, default_value_t = 10.0)]
    pub tps: f64,
    /// Stream a world frame every this many ticks.
    #[arg(long, default_value_t = 5)]
    pub world_every: u64,
}

/// State shared between the sim thread and handlers. `chat` and the
/// broadcast are updated under the same lock, so a joining client replays
/// exactly the entries its subscription will not carry.
struct Published {
    snapshot: String,
    chat: Vec<String>,
}

#[derive(Clone)]
struct Gateway {
    published: Arc<Mutex<Published>>,
    frames: broadcast::Sender<String>,
    inputs: mpsc::Sender<String>,
}

fn sim_loop(mut rt: Runtime, gw: Gateway, inputs: mpsc::Receiver<String>, tps: f64, world_every: u64) {
    let period = if tps > 0.0 { Duration::from_secs_f64(1.0 / tps) } else { Duration::ZERO };
    let world_every = world_every.max(1);
    loop {
        let started = Instant::now();
        for text in inputs.try_iter() {
            rt.inject_user(text);
        }
        rt.step();
        let frames = rt.take_frames();
        let snapshot = serde_json::to_string(&rt.snapshot()).expect("snapshot serializes");
        {
            let mut p = gw.published.lock().expect("gateway state");
            p.snapshot = snapshot;
            for f in frames {
                if f.kind == FrameType::World && f.tick % world_every != 0 {
                    continue;
                }
                let text = f.to_json();
                if f.kind == FrameType::Chat {
                    p.chat.push(text.clone());
                }
                // no receivers is fine
                let _ = gw.frames.send(text);
            }
        }
        if let Some(rest) = period.checked_sub(started.elapsed()) {
            std::thread::sleep(rest);
        }
    }
}

async fn snapshot(State(gw): State<Gateway>) -> impl IntoResponse {
    let body = gw.published.lock().expect("gateway state").snapshot.clone();
    ([(header::CONTENT_TYPE, "application/json")], body)
}

async fn ws(State(gw): State<Gateway>, upgrade: WebSocketUpgrade) -> impl IntoResponse {
    upgrade.on_upgrade(move |socket| client(socket, gw))
}

fn error_frame(msg: &str, tick: u64) -> String {
    Frame::new(FrameType::Error, serde_json::json!({ "message": msg }), tick).to_json()
}

async fn client(socket: WebSocket, gw: Gateway) {
    let (history, mut rx) = {
        let p = gw.published.lock().expect("gateway state");
        (p.chat.clone(), gw.frames.subscribe())
    };
    let (mut tx, mut inbound) = socket.split();
    for text in history {
        if tx.send(Message::Text(text.into())).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            frame = rx.recv() => match frame {
                Ok(text) => {
                    if tx.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    // the stream is no longer prefix-complete; the client must resync from /snapshot
                    let _ = tx.send(Message::Text(error_frame(&format!("lagged by {n} frames; reconnect"), 0).into())).await;
                    return;
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            msg = inbound.next() => match msg {
                Some(Ok(Message::Text(text))) => match ClientMessage::parse(&text) {
                    Ok(ClientMessage::UserInput { text }) => {
                        let _ = gw.inputs.send(text);
                    }
                    Err(e) => {
                        if tx.send(Message::Text(error_frame(&e, 0).into())).await.is_err() {
                            return;
                        }
                    }
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

fn router(gw: Gateway) -> Router {
    Router::new().route("/snapshot", get(snapshot)).route("/ws", get(ws)).with_state(gw)
}

pub fn serve(args: ServeArgs) -> ExitCode {
    let mut scenario = match load_scenario(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Some(p) = &args.script {
        match load_script(p) {
            Ok(script) => scenario.script = script,
            Err(code) => return code,
        }
    }
    let backend = match args.backend.load() {
        Ok(b) => b,
        Err(e) => return invalid(e),
    };
    let planner = match make_planner(&backend, &scenario.config, &scenario.planning, DEFAULT_RULES) {
        Ok(p) => p,
        Err(e) => return invalid(e),
    };
    let mut rt = match Runtime::new(scenario, planner, StaticRules::default()) {
        Ok(rt) => rt,
        Err(e) => return invalid(e),
    };
    rt.set_live(true);

    let (input_tx, input_rx) = mpsc::channel();
    let (frames, _) = broadcast::channel(CLIENT_BUFFER);
    let snapshot = serde_json::to_string(&rt.snapshot()).expect("snapshot serializes");
    let gw = Gateway {
        published: Arc::new(Mutex::new(Published { snapshot, chat: Vec::new() })),
        frames,
        inputs: input_tx,
    };

    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => return invalid(e),
    };
    runtime.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(args.addr).await {
            Ok(l) => l,
            Err(e) => return invalid(format!("bind {}: {e}", args.addr)),
        };
        let addr = listener.local_addr().expect("bound");
        println!("listening on http://{addr}");
        let sim_gw = gw.clone();
        std::thread::spawn(move || sim_loop(rt, sim_gw, input_rx, args.tps, args.world_every));
        match axum::serve(listener, router(gw)).await {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(crate::EXIT_SHORT)
            }
        }
    })
}

use std::path::Path;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

use mpl_core::data::{self, Source};
use mpl_core::env::{self, EnvConfig};
use mpl_core::server::{router, DatasetWriter, ServeOptions};

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn start(env_cfg: EnvConfig, dataset: &Path) -> (String, DatasetWriter) {
    let opts = ServeOptions {
        env_cfg: env_cfg.clone(),
        seed: 11,
        tick_hz: 200.0,
        dataset_path: dataset.to_path_buf(),
        assets_dir: None,
        run_config: None,
    };
    let writer = DatasetWriter::spawn(dataset.to_path_buf(), data::DatasetHeader::new(&env_cfg, 11)).unwrap();
    let app = router(&opts, &writer);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("127.0.0.1:{}", addr.port()), writer)
}

async fn recv(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("timed out waiting for a message")
            .unwrap()
            .unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

async fn until_episode_end(ws: &mut Ws) -> Value {
    loop {
        let m = recv(ws).await;
        if m["type"] == "episode_end" {
            return m;
        }
    }
}

async fn wait_for_episodes(path: &Path, n: usize) -> data::Dataset {
    for _ in 0..200 {
        if let Ok(d) = data::load_dataset(path) {
            if d.episodes.len() >= n {
                return d;
            }
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("dataset never reached {n} episodes");
}

fn harmless_env() -> EnvConfig {
    EnvConfig {
        agent_radius: 0.01,
        obstacle_radius: 0.01,
        ..EnvConfig::default()
    }
}

#[tokio::test]
async fn health_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, _writer) = start(EnvConfig::default(), &dir.path().join("d.jsonl")).await;
    let mut stream = tokio::net::TcpStream::connect(&addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).await.unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains(r#""protocol_version":1"#));
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let first = recv(&mut ws).await;
    assert_eq!(first["type"], "state");
    assert_eq!(first["t"], 0);
    assert_eq!(first["agent"], json!([0.0, 0.0]));
    assert_eq!(first["goal"], json!([128.0, 128.0]));
}

#[tokio::test]
async fn taught_episode_is_persisted_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("human.jsonl");
    let env_cfg = harmless_env();
    let (addr, _writer) = start(env_cfg.clone(), &path).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();

    send(&mut ws, json!({"type": "hello", "protocol_version": 1})).await;
    loop {
        if recv(&mut ws).await["type"] == "hello" {
            break;
        }
    }
    send(&mut ws, json!({"type": "intervene", "active": true, "u": [10.0, 0.0]})).await;
    let mut seen_p = false;
    while !seen_p {
        let m = recv(&mut ws).await;
        seen_p = m["type"] == "state" && m["p"] == 1.0;
    }
    send(&mut ws, json!({"type": "intervene", "active": false})).await;
    let end = until_episode_end(&mut ws).await;
    assert_eq!(end["success"], true);

    let d = wait_for_episodes(&path, 1).await;
    let ep = &d.episodes[0];
    assert_eq!(ep.meta.source, Source::Human);
    assert_eq!(end["steps"].as_u64().unwrap() as usize + 1, ep.steps.len());
    let assisted: Vec<_> = ep.steps.iter().filter(|s| s.p == 1.0).collect();
    assert!(!assisted.is_empty());
    for s in &assisted {
        assert_eq!(s.u, [3.5, 0.0]);
    }

    let cfg = EnvConfig { seed: ep.meta.seed, ..env_cfg };
    let mut st = env::reset(&cfg);
    for (k, rec) in ep.steps.iter().enumerate() {
        assert_eq!(st.observation().map(f64::to_bits), rec.s.map(f64::to_bits), "step {k}");
        if k + 1 < ep.steps.len() {
            st = env::step(&st, rec.u, &cfg).unwrap();
        }
    }

    // A reset starts a fresh episode at t = 0.
    send(&mut ws, json!({"type": "reset"})).await;
    loop {
        let m = recv(&mut ws).await;
        if m["type"] == "state" && m["t"] == 0 {
            break;
        }
    }
}

#[tokio::test]
async fn collided_episode_is_not_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("human.jsonl");
    let env_cfg = EnvConfig {
        obstacle_radius: 60.0,
        ..EnvConfig::default()
    };
    let (addr, writer) = start(env_cfg, &path).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let end = until_episode_end(&mut ws).await;
    assert_eq!(end["success"], false);
    send(&mut ws, json!({"type": "bogus"})).await;
    let reply = recv(&mut ws).await;
    assert_eq!(reply["type"], "error");
    drop(ws);
    drop(writer);
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert!(!path.exists() || data::load_dataset(&path).map(|d| d.episodes.is_empty()).unwrap_or(true));
}

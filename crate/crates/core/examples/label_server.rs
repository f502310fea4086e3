//! Serve segment pairs for labeling over HTTP. With `demo` a local client
//! answers every query from the scripted teacher, exercising the same API a
//! browser labeler uses.
//!
//!     cargo run --release --example label_server -- [addr] [demo]
//!
//! Endpoints: `GET /api/v1/query`, `POST /api/v1/label {query_id, y}`,
//! `POST /api/v1/skip {query_id}`, `GET /api/v1/progress`.

use std::io::{Read, Write};
use std::net::TcpStream;

use pref_transformer::env::{generate_dataset, Env};
use pref_transformer::server::{serve, LabelServer, ServerConfig};
use pref_transformer::teacher::{sample_queries, ScriptedTeacher};
use serde_json::Value;

const QUERIES: usize = 20;

/// `None` once the server has gone away.
fn request(addr: &str, method: &str, path: &str, body: &str) -> Option<Value> {
    let mut s = TcpStream::connect(addr).ok()?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nhost: {addr}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    )
    .ok()?;
    let mut resp = String::new();
    s.read_to_string(&mut resp).ok()?;
    let json = resp.split_once("\r\n\r\n")?.1;
    serde_json::from_str(json).ok()
}

fn main() -> pref_transformer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let addr = args.first().cloned().unwrap_or_else(|| "127.0.0.1:8321".into());
    let demo = args.iter().any(|a| a == "demo");

    let env = Env::key_door();
    let trajs = generate_dataset(&env, 50, 0);
    let refs = sample_queries(&trajs, QUERIES, 10, 1)?;
    let queries = refs.iter().map(|q| q.query(&trajs)).collect::<Result<Vec<_>, _>>()?;
    let log = std::env::temp_dir().join("human_preferences.jsonl");
    let _ = std::fs::remove_file(&log);
    let server = LabelServer::new(&env, queries, &log, ServerConfig {
        quota: Some(QUERIES),
        ..Default::default()
    })?;

    if demo {
        let client_addr = addr.clone();
        std::thread::spawn(move || {
            std::thread::sleep(std::time::Duration::from_millis(300));
            let teacher = ScriptedTeacher::deterministic();
            while let Some(q) = request(&client_addr, "GET", "/api/v1/query", "") {
                if q["status"] != "query" {
                    break;
                }
                let id = q["query_id"].as_u64().unwrap();
                let (r0, r1) = refs[id as usize].returns(&trajs);
                let y = teacher.preference_probability(r0, r1);
                let Some(ack) = request(&client_addr, "POST", "/api/v1/label", &format!(r#"{{"query_id":{id},"y":{y}}}"#)) else {
                    break;
                };
                println!("query {id}: y = {y}, progress {}", ack["progress"]);
                if ack["progress"]["pending"] == 0 {
                    break;
                }
            }
        });
    } else {
        println!("serving {QUERIES} queries on http://{addr}");
    }

    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let progress = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await.expect("bind");
        serve(listener, server).await
    })?;
    println!("{} labels written to {}", progress.labeled, log.display());
    Ok(())
}

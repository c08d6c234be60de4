//! Serving-contract acceptance: a scripted session against the real
//! binary must yield 200/200/400 for (query_id, query_text via a mock
//! provider, malformed body), with non-increasing scores and at most k
//! items; plus 404/502 paths, health metadata, env-var precedence for the
//! provider URL, and response determinism.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use jam_core::checkpoint::{save_checkpoint, CheckpointModel};
use jam_core::data::chronological_split;
use jam_core::model::MixerKind;
use jam_core::synth::{synth_generate, SynthConfig};
use jam_core::train::{train_jam, TrainConfig, TrainData};

struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn jam_bin() -> &'static str {
    env!("CARGO_BIN_EXE_jam")
}

/// Build a small trained world on disk; returns (dir, query_dim).
fn build_world(dir: &Path) -> usize {
    let cfg = SynthConfig {
        n_users: 12,
        n_queries: 10,
        n_items: 60,
        latent_dim: 6,
        n_mod: 2,
        noise_sigma: 0.0,
        distractor_overlap: 0.0,
        seed: 13,
    };
    let world = synth_generate(&cfg).unwrap();
    jam_core::synth::save_world(&world, dir).unwrap();
    let (train_ds, val_ds, _) = chronological_split(&world.dataset).unwrap();
    let data =
        TrainData { catalog: &world.catalog, users: &world.users, queries: &world.queries };
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        n_negatives: 2,
        d: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let (params, _) = train_jam(&tc, MixerKind::Avg, &train_ds, &val_ds, &data).unwrap();
    save_checkpoint(
        &dir.join("model.ckpt"),
        &CheckpointModel::Jam(params),
        world.catalog.modality_names(),
    )
    .unwrap();
    world.queries.dim()
}

fn write_config(dir: &Path, embed_url: Option<&str>) -> PathBuf {
    let mut conf = String::from(
        "catalog = catalog.json\nusers_matrix = users.jamb\nusers_ids = users.ids\n\
         queries_matrix = queries.jamb\nqueries_ids = queries.ids\ntriplets = triplets.jsonl\n\
         checkpoint = model.ckpt\n",
    );
    if let Some(url) = embed_url {
        conf.push_str(&format!("embed_url = {url}\n"));
    }
    let path = dir.join("serve.conf");
    std::fs::write(&path, conf).unwrap();
    path
}

/// Spawn `jam serve` and parse the announced address.
fn spawn_server(config: &Path, env: &[(&str, &str)]) -> (ChildGuard, String) {
    let mut cmd = Command::new(jam_bin());
    cmd.args(["serve", "--config"])
        .arg(config)
        .args(["--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().expect("spawn jam serve");
    let stdout = child.stdout.take().unwrap();
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected startup line: {line:?}"))
        .to_string();
    (ChildGuard(child), addr)
}

/// Mock embedding provider returning a fixed vector of the right width.
async fn spawn_mock_provider(dim: usize) -> String {
    let app = Router::new().route(
        "/embed",
        post(move |Json(body): Json<Value>| async move {
            assert!(body.get("text").is_some());
            let v: Vec<f64> = (0..dim).map(|i| 0.1 * (i as f64 + 1.0)).collect();
            Json(json!({ "vector": v }))
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    format!("http://{addr}/embed")
}

fn assert_ranked_body(body: &Value, k: usize) {
    let items = body["items"].as_array().unwrap();
    assert!(items.len() <= k, "got {} items for k={k}", items.len());
    let scores: Vec<f64> = items.iter().map(|i| i["score"].as_f64().unwrap()).collect();
    for w in scores.windows(2) {
        assert!(w[0] >= w[1], "scores not non-increasing: {scores:?}");
    }
    assert!(body["model"].as_str().is_some());
    assert!(body["mixer"].as_str().is_some());
}

#[tokio::test(flavor = "multi_thread")]
async fn serving_contract_scripted_session() {
    let dir = tempfile::tempdir().unwrap();
    let query_dim = build_world(dir.path());
    let mock_url = spawn_mock_provider(query_dim).await;
    // The config carries a dead provider URL; the environment variable
    // must take precedence over it.
    let config = write_config(dir.path(), Some("http://127.0.0.1:1/embed"));
    let (_guard, addr) = spawn_server(&config, &[("JAM_EMBED_URL", mock_url.as_str())]);
    let client = reqwest::Client::new();

    // Health exposes snapshot metadata.
    let health: Value =
        client.get(format!("{addr}/healthz")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["mixer"], "avg");
    assert_eq!(health["n_items"], 60);

    // 1) query_id -> 200 with at most k items, scores non-increasing.
    let resp = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"user_id": "user_00003", "query_id": "query_00004", "k": 5}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let body: Value = resp.json().await.unwrap();
    assert_ranked_body(&body, 5);
    println!("[PASS] serving: query_id request -> 200 with ranked items");

    // Determinism: the same request against the same snapshot.
    let again: Value = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"user_id": "user_00003", "query_id": "query_00004", "k": 5}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(body, again);
    println!("[PASS] serving: identical requests return identical responses");

    // 2) query_text through the mock provider -> 200.
    let resp = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"user_id": "user_00003", "query_text": "sad piano songs", "k": 4}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let body: Value = resp.json().await.unwrap();
    assert_ranked_body(&body, 4);
    println!("[PASS] serving: query_text through provider -> 200 (env URL beats config URL)");

    // Anonymous request: no user_id means pure query translation.
    let resp = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"query_id": "query_00001", "k": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);

    // 3) malformed body -> 400.
    let resp = client
        .post(format!("{addr}/recommend"))
        .header("content-type", "application/json")
        .body("{\"k\": not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    println!("[PASS] serving: malformed body -> 400");

    // Both query fields -> 400 (exactly-one rule).
    let resp = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"query_id": "query_00001", "query_text": "x", "k": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);

    // Neither query field -> 400.
    let resp = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"user_id": "user_00001", "k": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);

    // Unknown ids -> 404.
    let resp = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"user_id": "ghost", "query_id": "query_00001", "k": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 404);
    let resp = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"user_id": "user_00001", "query_id": "ghost", "k": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 404);
    println!("[PASS] serving: unknown user/query ids -> 404");

    println!("[PASS] serving contract: scripted session returned 200/200/400 as required");
}

#[tokio::test(flavor = "multi_thread")]
async fn serving_provider_failure_returns_502() {
    let dir = tempfile::tempdir().unwrap();
    build_world(dir.path());
    // Provider URL points at a closed port; no env override.
    let config = write_config(dir.path(), Some("http://127.0.0.1:1/embed"));
    let (_guard, addr) = spawn_server(&config, &[]);
    let client = reqwest::Client::new();
    let resp = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"user_id": "user_00001", "query_text": "anything", "k": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 502);
    let body: Value = resp.json().await.unwrap();
    let msg = body["error"].as_str().unwrap();
    assert!(msg.contains("retry"), "502 body should be retry-safe, got {msg:?}");
    println!("[PASS] serving: provider failure -> 502 with retry-safe body");

    // Without any provider configured, query_text is a client error.
    let config = write_config(dir.path(), None);
    let (_guard2, addr2) = spawn_server(&config, &[]);
    let resp = client
        .post(format!("{addr2}/recommend"))
        .json(&json!({"user_id": "user_00001", "query_text": "anything", "k": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    println!("[PASS] serving: query_text with no provider configured -> 400");
}

#[tokio::test(flavor = "multi_thread")]
async fn serving_provider_bad_vectors_return_502() {
    let dir = tempfile::tempdir().unwrap();
    build_world(dir.path());

    // Wrong-dimension provider.
    let app = Router::new().route(
        "/embed",
        post(|Json(_): Json<Value>| async move { Json(json!({ "vector": [1.0, 2.0] })) }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let bad_dim_url = format!("http://{}/embed", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let config = write_config(dir.path(), Some(&bad_dim_url));
    let (_guard, addr) = spawn_server(&config, &[]);
    let client = reqwest::Client::new();
    let resp = client
        .post(format!("{addr}/recommend"))
        .json(&json!({"user_id": "user_00001", "query_text": "x", "k": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 502);
    println!("[PASS] serving: provider with wrong dimension -> 502");
}

/// Concurrent identical requests against one snapshot agree: nothing is
/// mutated after startup.
#[tokio::test(flavor = "multi_thread")]
async fn serving_concurrent_requests_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    build_world(dir.path());
    let config = write_config(dir.path(), None);
    let (_guard, addr) = spawn_server(&config, &[]);
    let client = reqwest::Client::new();
    let mut handles = Vec::new();
    for _ in 0..16 {
        let client = client.clone();
        let addr = addr.clone();
        handles.push(tokio::spawn(async move {
            let v: Value = client
                .post(format!("{addr}/recommend"))
                .json(&json!({"user_id": "user_00002", "query_id": "query_00003", "k": 10}))
                .send()
                .await
                .unwrap()
                .json()
                .await
                .unwrap();
            v
        }));
    }
    let mut first: Option<Value> = None;
    for h in handles {
        let v = h.await.unwrap();
        match &first {
            None => first = Some(v),
            Some(f) => assert_eq!(f, &v),
        }
    }
    println!("[PASS] serving: 16 concurrent identical requests agree");
}

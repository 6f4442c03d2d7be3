//! Start the session service in-process and play the annotator over HTTP,
//! answering every batch from the gold labels the dataset carries.
//!
//!     cargo run -p cleanloop-server --example scripted_annotator

use std::error::Error;
use std::time::Duration;

use cleanloop::dataset::{perturb_labels, write_dataset};
use cleanloop::synth::{two_clusters, ClusterSpec};
use cleanloop_server::wire::{AnswerItem, Batch, Corrections, Report, Status, WIRE_VERSION};
use cleanloop_server::{router, AppState, ServiceConfig};
use reqwest::StatusCode;
use serde_json::json;

#[tokio::main]
async fn main() -> Result<(), Box<dyn Error>> {
    let dir = std::env::temp_dir().join("cleanloop-scripted");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("noisy.jsonl");
    let noisy = perturb_labels(&two_clusters(&ClusterSpec { instances: 300, ..Default::default() }, 4, 1 << 14)?, 0.08, 1)?;
    write_dataset(&noisy, &path)?;

    let state = AppState::open(ServiceConfig { default_dataset: Some(path.clone()), default_k: Some(15), checkpoint_dir: None })?;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    tokio::spawn(async move { axum::serve(listener, router(state)).await });
    println!("service on {base}");

    let client = reqwest::Client::new();
    let body = json!({ "v": 1, "folds": 5, "trainer": { "epochs": 5 }, "stop_config": { "max_iterations": 8, "error_fraction_threshold": 0.0 } });
    let created: serde_json::Value = client.post(format!("{base}/sessions")).json(&body).send().await?.json().await?;
    let id = created["id"].as_str().ok_or("no session id")?.to_string();
    println!("session {id}");

    loop {
        let resp = client.get(format!("{base}/sessions/{id}/batch")).send().await?;
        match resp.status() {
            StatusCode::CONFLICT => {
                tokio::time::sleep(Duration::from_millis(20)).await;
                continue;
            }
            StatusCode::GONE => break,
            StatusCode::OK => {}
            other => return Err(format!("unexpected {other}: {}", resp.text().await?).into()),
        }
        let batch: Batch = resp.json().await?;
        let answers = batch
            .items
            .iter()
            .map(|item| {
                let gold = noisy.get(&item.id).and_then(|i| i.gold.clone()).expect("gold labels");
                let names: Vec<String> = gold.iter().map(|&g| batch.label_space[g].clone()).collect();
                if names == item.labels {
                    AnswerItem::confirm(&item.id)
                } else {
                    AnswerItem::correct(&item.id, names)
                }
            })
            .collect();
        let resp = client.post(format!("{base}/sessions/{id}/corrections")).json(&Corrections { v: WIRE_VERSION, answers }).send().await?;
        let ack: serde_json::Value = resp.json().await?;
        println!("iteration {}: {} items, error fraction {}", batch.iteration, batch.items.len(), ack["batch_error_fraction"]);
    }

    let status: Status = client.get(format!("{base}/sessions/{id}/status")).send().await?.json().await?;
    println!("phase {:?}, {} of {} instances reviewed", status.phase, status.corrected_count, status.total);
    let report: Report = client.get(format!("{base}/sessions/{id}/report")).send().await?.json().await?;
    println!("stop reason {:?}", report.stop_reason);
    if let Some(eval) = report.evaluation {
        println!("AP {:.1}% over {} seeded errors", 100.0 * eval.ap, eval.positives);
    }
    let cleaned = client.get(format!("{base}{}", report.dataset)).send().await?.bytes().await?;
    std::fs::write(dir.join("cleaned.jsonl"), &cleaned)?;
    println!("cleaned dataset written to {}", dir.join("cleaned.jsonl").display());
    Ok(())
}

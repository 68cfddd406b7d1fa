//! The study HTTP API end to end, through the router.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use crop_study::{create_study, router, CropOutput, MethodPair, ServeOptions, Study, StudyImage, Vote};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const LABELS: [&str; 2] = ["gaic_baseline", "full_pipeline"];
const TOKEN: &str = "op-secret";

fn images(dir: &Path, n: usize) -> Vec<StudyImage> {
    (0..n)
        .map(|i| StudyImage {
            image_id: format!("photo{i}"),
            outputs: LABELS
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let png = dir.join(format!("{i}-{k}.png"));
                    std::fs::write(&png, format!("png-bytes-{i}-{k}")).unwrap();
                    (m.to_string(), CropOutput { png, bbox: None })
                })
                .collect::<BTreeMap<_, _>>(),
        })
        .collect()
}

fn app(data: &Path, n: usize) -> (Router, Arc<Study>) {
    let items = create_study(&images(data, n), &[MethodPair::new(LABELS[0], LABELS[1])], 11).unwrap();
    let study = Arc::new(Study::open(items, 11, &data.join("state")).unwrap());
    let r = router(
        Arc::clone(&study),
        ServeOptions {
            operator_token: Some(TOKEN.into()),
            ui_dir: None,
        },
    );
    (r, study)
}

struct Reply {
    status: StatusCode,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, body }
}

fn assert_anonymous(r: &Reply) {
    let text = String::from_utf8_lossy(&r.body);
    for l in LABELS {
        assert!(!text.contains(l), "label {l} leaked in {text}");
    }
}

#[tokio::test]
async fn full_session_without_leaking_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (app, study) = app(dir.path(), 6);

    let s = call(&app, "POST", "/api/session", None).await;
    assert_eq!(s.status, StatusCode::OK);
    assert_anonymous(&s);
    let sid = s.json()["session_id"].as_str().unwrap().to_string();
    assert_eq!(s.json()["total_items"], 6);

    let mut seen = Vec::new();
    loop {
        let next = call(&app, "GET", &format!("/api/items/next?session={sid}"), None).await;
        assert_eq!(next.status, StatusCode::OK);
        assert_anonymous(&next);
        let v = next.json();
        if v["done"] == true {
            assert_eq!(v["progress"], json!({"done": 6, "total": 6}));
            break;
        }
        let item = v["item_id"].as_str().unwrap().to_string();
        assert_eq!(v["progress"]["done"], seen.len());
        for key in ["left_png_url", "right_png_url"] {
            let png = call(&app, "GET", v[key].as_str().unwrap(), None).await;
            assert_eq!(png.status, StatusCode::OK);
            assert!(png.body.starts_with(b"png-bytes-"));
            assert_anonymous(&png);
        }
        let body = json!({"session": sid, "item_id": item, "choice": "left"});
        let ack = call(&app, "POST", "/api/vote", Some(body.clone())).await;
        assert_anonymous(&ack);
        assert_eq!(ack.json()["recorded"], true);
        // A double click: acknowledged, not counted.
        let again = call(&app, "POST", "/api/vote", Some(body)).await;
        assert_eq!(again.status, StatusCode::OK);
        assert_eq!(again.json()["duplicate"], true);
        seen.push(item);
    }
    assert_eq!(study.votes().len(), 6);
    let lines = std::fs::read_to_string(study.vote_log_path()).unwrap();
    assert_eq!(lines.lines().count(), 6);
    for l in lines.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["choice", "item_id", "session", "ts"]);
    }

    let hidden = call(&app, "GET", "/api/results", None).await;
    assert_eq!(hidden.status, StatusCode::FORBIDDEN);
    let wrong = call(&app, "GET", "/api/results?token=nope", None).await;
    assert_eq!(wrong.status, StatusCode::FORBIDDEN);
    let res = call(&app, "GET", &format!("/api/results?token={TOKEN}"), None).await;
    assert_eq!(res.status, StatusCode::OK);
    let r = res.json();
    assert_eq!(r["total_votes"], 6);
    assert_eq!(r, serde_json::to_value(study.results()).unwrap());
}

#[tokio::test]
async fn errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), 2);
    let r = call(&app, "GET", "/api/items/next?session=ghost", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "unknown_session");
    let r = call(&app, "GET", "/api/items/next", None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let sid = call(&app, "POST", "/api/session", None).await.json()["session_id"].clone();
    let r = call(&app, "POST", "/api/vote", Some(json!({"session": sid, "item_id": "nope", "choice": "left"}))).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "unknown_item");
    let r = call(&app, "POST", "/api/vote", Some(json!({"session": sid, "item_id": "x", "choice": "up"}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = call(&app, "GET", "/crops/nope/left.png", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_resume_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let sid;
    let first_two: Vec<String>;
    {
        let (app, _) = app(dir.path(), 5);
        sid = call(&app, "POST", "/api/session", None).await.json()["session_id"].as_str().unwrap().to_string();
        let mut ids = Vec::new();
        for _ in 0..2 {
            let item = call(&app, "GET", &format!("/api/items/next?session={sid}"), None).await.json()["item_id"]
                .as_str()
                .unwrap()
                .to_string();
            call(&app, "POST", "/api/vote", Some(json!({"session": sid, "item_id": item, "choice": "right"}))).await;
            ids.push(item);
        }
        first_two = ids;
    }
    let (app, study) = app(dir.path(), 5);
    let next = call(&app, "GET", &format!("/api/items/next?session={sid}"), None).await.json();
    assert_eq!(next["progress"]["done"], 2);
    assert!(!first_two.contains(&next["item_id"].as_str().unwrap().to_string()));
    assert_eq!(study.votes().len(), 2);

    // Another session progresses independently.
    let other = call(&app, "POST", "/api/session", None).await.json()["session_id"].as_str().unwrap().to_string();
    let v = call(&app, "GET", &format!("/api/items/next?session={other}"), None).await.json();
    assert_eq!(v["progress"]["done"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_writers_lose_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (app, study) = app(dir.path(), 200);
    let mut tasks = Vec::new();
    for w in 0..8 {
        let app = app.clone();
        let items: Vec<String> = study.items().iter().map(|i| i.item_id.clone()).collect();
        tasks.push(tokio::spawn(async move {
            let sid = call(&app, "POST", "/api/session", None).await.json()["session_id"].as_str().unwrap().to_string();
            for (k, item) in items.iter().enumerate() {
                let choice = if (k + w) % 3 == 0 { "left" } else { "right" };
                let r = call(&app, "POST", "/api/vote", Some(json!({"session": sid, "item_id": item, "choice": choice}))).await;
                assert_eq!(r.status, StatusCode::OK);
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    let text = std::fs::read_to_string(study.vote_log_path()).unwrap();
    let votes: Vec<Vote> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(votes.len(), 1600);
    assert_eq!(crop_study::distinct_votes(&votes).len(), 1600);
    let r = study.results();
    assert_eq!(r.total_votes, 1600);
    assert_eq!(r.pairs[0].votes_a + r.pairs[0].votes_b, 1600);
}

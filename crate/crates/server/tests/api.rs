use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use facepref::artifact::{read_jsonl, Header};
use facepref::coeffs::ActionVocabulary;
use facepref::facerender::RenderSpec;
use facepref::prefdata::{build_region_tasks, decide_all, ComparisonTask, Decision, Vote, VOTES_SCHEMA};
use facepref::synthworld::{generate_split, Split, WorldConfig};
use facepref_server::queue::Progress;
use facepref_server::{router, AppState, Catalog, ServerOptions, TaskPayload};
use http_body_util::BodyExt;
use serde_json::json;
use tower::ServiceExt;

fn fixture(samples: usize) -> (Vec<ComparisonTask>, Catalog) {
    let vocab = ActionVocabulary::default();
    let world = match samples {
        0 => Vec::new(),
        n => generate_split(&WorldConfig::default(), &vocab, Split::Rollout, n).unwrap(),
    };
    let mut tasks = Vec::new();
    let mut observations = HashMap::new();
    for s in &world {
        let (u, l) = build_region_tasks(&s.id, &s.pseudo_label, &s.ground_truth, &vocab, 1, 3).unwrap();
        tasks.extend([u, l]);
        observations.insert(s.id.clone(), s.observation.clone());
    }
    (tasks, Catalog { vocab, observations })
}

fn open(dir: &Path, samples: usize, lease: Duration) -> Router {
    let (tasks, catalog) = fixture(samples);
    let options = ServerOptions {
        lease,
        annotators_per_task: 2,
        render: RenderSpec::default(),
    };
    let state = AppState::open(
        tasks,
        catalog,
        options,
        &dir.join("votes.jsonl"),
        &Header::untracked(VOTES_SCHEMA),
    )
    .unwrap();
    router(Arc::new(state), &dir.join("ui"))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn next(app: &Router, annotator: &str) -> (StatusCode, Option<TaskPayload>) {
    let req = Request::get(format!("/api/tasks/next?annotator={annotator}"))
        .body(Body::empty())
        .unwrap();
    let (status, body) = call(app, req).await;
    let payload = (status == StatusCode::OK).then(|| serde_json::from_slice(&body).unwrap());
    (status, payload)
}

async fn vote(app: &Router, task_id: &str, annotator: &str, choice: &str) -> StatusCode {
    let body = json!({ "task_id": task_id, "annotator_id": annotator, "choice": choice });
    let req = Request::post("/api/votes")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await.0
}

async fn progress(app: &Router) -> Progress {
    let (status, body) = call(app, Request::get("/api/progress").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    Progress {
        pending: v["pending"].as_u64().unwrap() as usize,
        leased: v["leased"].as_u64().unwrap() as usize,
        complete: v["complete"].as_u64().unwrap() as usize,
        consistent: v["consistent"].as_u64().unwrap() as usize,
        inconsistent: v["inconsistent"].as_u64().unwrap() as usize,
    }
}

fn log_lines(dir: &Path) -> usize {
    std::fs::read_to_string(dir.join("votes.jsonl")).unwrap().lines().count()
}

#[tokio::test]
async fn empty_queue_answers_no_content() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(dir.path(), 0, Duration::from_secs(600));
    assert_eq!(next(&app, "ann").await.0, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn missing_annotator_is_a_bad_request() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(dir.path(), 1, Duration::from_secs(600));
    let (status, _) = call(&app, Request::get("/api/tasks/next").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn lease_vote_and_replay_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(dir.path(), 2, Duration::from_secs(600));
    let (status, task) = next(&app, "ann").await;
    assert_eq!(status, StatusCode::OK);
    let task = task.unwrap();
    assert_eq!(next(&app, "ann").await.0, StatusCode::TOO_MANY_REQUESTS);

    assert_eq!(vote(&app, &task.task_id, "other", "left").await, StatusCode::FORBIDDEN);
    let before = log_lines(dir.path());
    assert_eq!(vote(&app, &task.task_id, "ann", "left").await, StatusCode::CREATED);
    assert_eq!(log_lines(dir.path()), before + 1);
    assert_eq!(vote(&app, &task.task_id, "ann", "left").await, StatusCode::CONFLICT);
    assert_eq!(log_lines(dir.path()), before + 1);
}

#[tokio::test]
async fn payload_hides_candidate_identity() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(dir.path(), 1, Duration::from_secs(600));
    let req = Request::get("/api/tasks/next?annotator=ann").body(Body::empty()).unwrap();
    let (_, body) = call(&app, req).await;
    let text = String::from_utf8(body).unwrap();
    assert!(!text.contains("truth_mapping"));
    assert!(!text.contains("cand_left"));
    assert!(!text.contains("ground_truth"));
}

#[tokio::test]
async fn renders_are_deterministic_and_highlighted() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(dir.path(), 1, Duration::from_secs(600));
    let task = next(&app, "ann").await.1.unwrap();
    for url in [&task.left_url, &task.right_url, &task.reference_url] {
        let get = || Request::get(url.as_str()).body(Body::empty()).unwrap();
        let (s1, b1) = call(&app, get()).await;
        let (s2, b2) = call(&app, get()).await;
        assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
        assert_eq!(b1, b2);
        assert!(String::from_utf8(b1).unwrap().contains("region-mask"));
    }
    let (status, _) = call(&app, Request::get("/api/render/nope_AB_left.svg").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn static_files_are_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("ui")).unwrap();
    std::fs::write(dir.path().join("ui/index.html"), "<html>ui</html>").unwrap();
    let app = open(dir.path(), 1, Duration::from_secs(600));
    let (status, body) = call(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>ui</html>");
}

#[tokio::test]
async fn expired_lease_is_dispensed_again() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(dir.path(), 1, Duration::ZERO);
    let first = next(&app, "a").await.1.unwrap();
    assert_eq!(vote(&app, &first.task_id, "a", "left").await, StatusCode::FORBIDDEN);
    let again = next(&app, "a").await.1.unwrap();
    assert_eq!(again.task_id, first.task_id);
}

#[tokio::test]
async fn vote_log_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let app = open(dir.path(), 1, Duration::from_secs(600));
        let t = next(&app, "a").await.1.unwrap();
        assert_eq!(vote(&app, &t.task_id, "a", "right").await, StatusCode::CREATED);
        next(&app, "a").await.1.unwrap();
    }
    let app = open(dir.path(), 1, Duration::from_secs(600));
    let p = progress(&app).await;
    assert_eq!((p.complete, p.leased, p.pending), (1, 0, 7));
    let t = next(&app, "a").await.1.unwrap();
    assert!(t.task_id.ends_with("-l"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_annotators_get_disjoint_slots() {
    let dir = tempfile::tempdir().unwrap();
    let samples = 15;
    let app = open(dir.path(), samples, Duration::from_secs(600));
    let annotators = ["a", "b", "c", "d", "e", "f"];
    let mut handles = Vec::new();
    for (i, ann) in annotators.iter().enumerate() {
        let app = app.clone();
        let ann = ann.to_string();
        handles.push(tokio::spawn(async move {
            let mut served = Vec::new();
            let choices = ["left", "right", "similar"];
            let mut n = i;
            while let (StatusCode::OK, Some(t)) = next(&app, &ann).await {
                served.push(t.task_id.clone());
                assert_eq!(vote(&app, &t.task_id, &ann, choices[n % 3]).await, StatusCode::CREATED);
                n += 1;
            }
            served
        }));
    }
    let mut all = 0;
    for h in handles {
        all += h.await.unwrap().len();
    }
    let tasks = fixture(samples).0;
    let slots = tasks.len() * 2 * 2;
    assert_eq!(all, slots);

    let (_, votes): (_, Vec<Vote>) = read_jsonl(&dir.path().join("votes.jsonl"), VOTES_SCHEMA).unwrap();
    assert_eq!(votes.len(), slots);
    let distinct: HashSet<_> = votes
        .iter()
        .map(|v| (v.task_id.clone(), v.annotator_id.clone(), v.display_order))
        .collect();
    assert_eq!(distinct.len(), slots);

    let p = progress(&app).await;
    assert_eq!(p.pending + p.leased + p.complete, slots);
    assert_eq!(p.complete, slots);
    let decisions = decide_all(&tasks, &votes, 2).unwrap();
    let inconsistent = decisions.values().filter(|&&d| d == Decision::Inconsistent).count();
    assert_eq!(p.inconsistent, inconsistent);
    assert_eq!(p.consistent, decisions.len() - inconsistent);
}

use std::time::Duration;

use chatmpc_core::scenarios::{anchor_points, DrivingCaseId, NavEnvId};
use chatmpc_core::session::log::PromptRecord;
use chatmpc_core::session::{parse_log, run_session, PlantState, SessionConfig, UserConfig};
use chatmpc_gateway::api::{SessionHandle, Status, StreamFrame};
use reqwest::{Client, StatusCode};
use serde_json::json;

struct Server {
    base: String,
    http: Client,
}

async fn start() -> Server {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, chatmpc_gateway::router()).await.unwrap() });
    Server { base: format!("http://{addr}"), http: Client::new() }
}

impl Server {
    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn create(&self, cfg: &SessionConfig, speed: f64) -> SessionHandle {
        let r = self.http.post(self.url(&format!("/sessions?speed={speed}"))).json(cfg).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::CREATED);
        r.json().await.unwrap()
    }

    async fn control(&self, id: &str, action: &str) -> reqwest::Response {
        self.http.post(self.url(&format!("/sessions/{id}/control"))).json(&json!({ "action": action })).send().await.unwrap()
    }

    async fn prompt(&self, id: &str, text: &str) -> reqwest::Response {
        self.http.post(self.url(&format!("/sessions/{id}/prompt"))).json(&json!({ "text": text })).send().await.unwrap()
    }

    async fn handle(&self, id: &str) -> SessionHandle {
        self.http.get(self.url(&format!("/sessions/{id}"))).send().await.unwrap().json().await.unwrap()
    }

    async fn frame(&self, id: &str) -> StreamFrame {
        self.http.get(self.url(&format!("/sessions/{id}/frame"))).send().await.unwrap().json().await.unwrap()
    }

    async fn wait_finished(&self, id: &str) -> SessionHandle {
        for _ in 0..2000 {
            let h = self.handle(id).await;
            if matches!(h.status, Status::Finished { .. }) {
                return h;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("session {id} did not finish");
    }

    /// Reads the whole event stream; it ends on its own after a terminal frame.
    async fn stream(&self, id: &str) -> Vec<StreamFrame> {
        let mut r = self.http.get(self.url(&format!("/sessions/{id}/stream"))).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        let mut text = String::new();
        while let Some(chunk) = r.chunk().await.unwrap() {
            text.push_str(std::str::from_utf8(&chunk).unwrap());
        }
        text.split("\n\n")
            .filter_map(|ev| ev.lines().find_map(|l| l.strip_prefix("data:")))
            .map(|d| serde_json::from_str(d.trim()).unwrap())
            .collect()
    }
}

fn nav() -> SessionConfig {
    SessionConfig::navigation(NavEnvId::A)
}

#[tokio::test]
async fn create_returns_distinct_ids() {
    let s = start().await;
    let a = s.create(&nav(), 0.0).await;
    let b = s.create(&nav(), 0.0).await;
    assert_ne!(a.id, b.id);
    assert_eq!(a.status, Status::Created);
    assert_eq!(a.k, 0);
    let list: Vec<SessionHandle> = s.http.get(s.url("/sessions")).send().await.unwrap().json().await.unwrap();
    assert_eq!(list.len(), 2);
}

#[tokio::test]
async fn malformed_config_reports_field_path() {
    let s = start().await;
    let r = s.http.post(s.url("/sessions")).json(&json!({"scenario": {"navigation": {"env": "C"}}})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let body: serde_json::Value = r.json().await.unwrap();
    assert_eq!(body["path"], "scenario.navigation.env");

    let r = s
        .http
        .post(s.url("/sessions"))
        .header("content-type", "application/toml")
        .body("seed = 1\n[scenario.navigation]\nenv = \"A\"\n[scenario.navigation.overrides]\nsigma = -1.0\n")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let mut with_log = nav();
    with_log.log = Some("/tmp/x.ndjson".into());
    let r = s.http.post(s.url("/sessions")).json(&with_log).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn toml_config_is_accepted() {
    let s = start().await;
    let r = s
        .http
        .post(s.url("/sessions?speed=0"))
        .header("content-type", "application/toml")
        .body(nav().to_toml())
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let s = start().await;
    assert_eq!(s.control("nope", "start").await.status(), StatusCode::NOT_FOUND);
    assert_eq!(s.prompt("nope", "hi").await.status(), StatusCode::NOT_FOUND);
    let r = s.http.get(s.url("/sessions/nope/trajectory")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn control_transitions() {
    let s = start().await;
    let h = s.create(&nav(), 0.0).await;
    assert_eq!(s.control(&h.id, "pause").await.status(), StatusCode::CONFLICT);

    let r: SessionHandle = s.control(&h.id, "step").await.json().await.unwrap();
    assert_eq!((r.status.clone(), r.k), (Status::Paused, 1));
    let r: SessionHandle = s.control(&h.id, "step").await.json().await.unwrap();
    assert_eq!(r.k, 2);
    assert_eq!(s.frame(&h.id).await.frame.k, 2);

    let r: SessionHandle = s.control(&h.id, "start").await.json().await.unwrap();
    assert_eq!(r.status, Status::Running);
    assert_eq!(s.control(&h.id, "start").await.status(), StatusCode::CONFLICT);

    let done = s.wait_finished(&h.id).await;
    assert!(matches!(done.status, Status::Finished { .. }));
    assert_eq!(s.control(&h.id, "start").await.status(), StatusCode::CONFLICT);
    assert_eq!(s.control(&h.id, "step").await.status(), StatusCode::CONFLICT);

    let r: SessionHandle = s.control(&h.id, "reset").await.json().await.unwrap();
    assert_eq!((r.status, r.k, r.run), (Status::Created, 0, 1));

    let r = s.http.delete(s.url(&format!("/sessions/{}", h.id))).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);
    assert_eq!(s.control(&h.id, "start").await.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn navigation_prompts() {
    let s = start().await;
    let mut cfg = nav();
    cfg.user = UserConfig::None;
    let h = s.create(&cfg, 0.0).await;
    assert_eq!(s.prompt(&h.id, "Separate from the vase.").await.status(), StatusCode::CONFLICT);
    s.control(&h.id, "step").await;

    let r = s.prompt(&h.id, "Separate from the vase.").await;
    assert_eq!(r.status(), StatusCode::OK);
    let rec: PromptRecord = r.json().await.unwrap();
    assert_eq!(rec.marker.as_slice(), &[-1, 0]);
    assert!(rec.applied);
    assert_eq!(rec.theta_before, vec![0.4, 0.4]);
    assert_eq!(rec.theta_after, vec![0.2, 0.4]);

    let rec: PromptRecord = s.prompt(&h.id, "zzqq").await.json().await.unwrap();
    assert!(!rec.applied);
    assert!(rec.confidence < 0.5);
    assert_eq!(rec.theta_after, vec![0.2, 0.4]);

    assert_eq!(s.prompt(&h.id, "   ").await.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(s.prompt(&h.id, "?!").await.status(), StatusCode::UNPROCESSABLE_ENTITY);

    s.control(&h.id, "step").await;
    let f = s.frame(&h.id).await;
    assert_eq!(f.frame.theta, vec![0.2, 0.4]);

    let text = s.http.get(s.url(&format!("/sessions/{}/trajectory", h.id))).send().await.unwrap().text().await.unwrap();
    let log = parse_log(&text).unwrap();
    assert_eq!(log.prompts().count(), 2);
    log.verify_replay().unwrap();
}

#[tokio::test]
async fn driving_prompt_adds_virtual_disc() {
    let s = start().await;
    let mut cfg = SessionConfig::driving(DrivingCaseId::One);
    cfg.user = UserConfig::None;
    let h = s.create(&cfg, 0.0).await;
    s.control(&h.id, "step").await;
    let before = s.frame(&h.id).await;
    let PlantState::Drive(d) = before.frame.state else { panic!("driving state expected") };
    let rec: PromptRecord = s.prompt(&h.id, "obstacle in front!").await.json().await.unwrap();
    assert_eq!(rec.marker.as_slice(), &[0, 1, 0]);
    s.control(&h.id, "step").await;
    let after = s.frame(&h.id).await;
    assert_eq!(after.frame.k, 2);
    let virt: Vec<_> = after.frame.obstacles.iter().filter(|o| o.name.starts_with("virtual")).collect();
    assert_eq!(virt.len(), 1);
    let anchor = anchor_points(&d.pose).f;
    assert!((virt[0].disc.cx - anchor.0).abs() < 1e-9 && (virt[0].disc.cy - anchor.1).abs() < 1e-9);
    assert_eq!(virt[0].disc.radius, 4.0);
}

#[tokio::test]
async fn stream_is_ordered_and_terminates() {
    let s = start().await;
    let h = s.create(&nav(), 0.0).await;
    let reader = {
        let (base, id) = (s.base.clone(), h.id.clone());
        tokio::spawn(async move { Server { base, http: Client::new() }.stream(&id).await })
    };
    // let the subscriber connect before the run starts
    tokio::time::sleep(Duration::from_millis(100)).await;
    s.control(&h.id, "start").await;
    let frames = reader.await.unwrap();
    assert!(frames.len() > 2);
    assert_eq!(frames[0].frame.k, 0);
    assert!(frames.windows(2).all(|w| w[1].frame.k > w[0].frame.k));
    let last = frames.last().unwrap();
    assert!(matches!(last.status, Status::Finished { .. }));
    assert!(last.frame.outcome.is_some());
    assert!(frames.iter().all(|f| f.schema == 1));

    // reconnect after finish: just the latest frame
    let again = s.stream(&h.id).await;
    assert_eq!(again.len(), 1);
    assert_eq!(again[0].frame.k, last.frame.k);
}

#[tokio::test]
async fn gateway_log_equals_cli_log() {
    let s = start().await;
    for cfg in [nav(), SessionConfig::navigation(NavEnvId::B)] {
        let h = s.create(&cfg, 0.0).await;
        s.control(&h.id, "start").await;
        s.wait_finished(&h.id).await;
        let text = s.http.get(s.url(&format!("/sessions/{}/trajectory", h.id))).send().await.unwrap().text().await.unwrap();
        let gateway = parse_log(&text).unwrap();
        let cli = run_session(&cfg).unwrap();
        assert_eq!(gateway.to_ndjson_deterministic(), cli.to_ndjson_deterministic());
    }
}

#[tokio::test]
async fn next_trial_keeps_parameters() {
    let s = start().await;
    let h = s.create(&nav(), 0.0).await;
    s.control(&h.id, "start").await;
    s.wait_finished(&h.id).await;
    let r: SessionHandle = s.control(&h.id, "next_trial").await.json().await.unwrap();
    assert_eq!((r.trial, r.k, r.status), (2, 0, Status::Created));
    s.control(&h.id, "start").await;
    s.wait_finished(&h.id).await;
    assert_eq!(s.frame(&h.id).await.frame.theta, vec![0.2, 0.4]);

    let d = s.create(&SessionConfig::driving(DrivingCaseId::One), 0.0).await;
    assert_eq!(s.control(&d.id, "next_trial").await.status(), StatusCode::CONFLICT);
}

#[tokio::test]
async fn paced_session_runs_near_real_time() {
    let s = start().await;
    // dt = 0.2 s at speed 10 gives 20 ms per step
    let h = s.create(&nav(), 10.0).await;
    s.control(&h.id, "start").await;
    tokio::time::sleep(Duration::from_millis(200)).await;
    let k = s.handle(&h.id).await.k;
    assert!((3..=14).contains(&k), "k = {k}");
}

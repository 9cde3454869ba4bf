use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use riskwatch_core::dataset::{EpisodeStore, Provenance};
use riskwatch_core::estimator::EstimatorRegistry;
use riskwatch_core::frame::Frame;
use riskwatch_core::pipeline::{save_bundle, train_pipeline, PipelineConfig};
use riskwatch_core::synthgen::{generate_suite, Profile};
use riskwatch_service::{spawn, ServerHandle, ServiceConfig};
use serde_json::{json, Value};

const SKILL: &str = "pick_peg";
const INJECTED: &str = "pick_peg_injected";

fn quick_cfg() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.ae.channels = [4, 8, 8, 8];
    cfg.ae.epochs = 6;
    cfg.ae.batch_size = 16;
    cfg.encoder_frames = 300;
    cfg.estimator.gp.max_iters = 30;
    cfg.estimator.gp.max_train = 300;
    cfg
}

fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            std::fs::copy(entry.path(), to).unwrap();
        }
    }
}

/// Data directory with the pick-peg smoke episodes, a command-line style
/// checkpoint, and a demonstration replay with one white frame spliced in
/// at `alpha = 0.5`. Built once, copied per test.
fn template() -> &'static (PathBuf, usize) {
    static T: OnceLock<(tempfile::TempDir, PathBuf, usize)> = OnceLock::new();
    let t = T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let suite: Vec<_> = generate_suite(Profile::Smoke, 3)
            .unwrap()
            .into_iter()
            .filter(|e| e.skill == SKILL)
            .collect();
        let store = EpisodeStore::open(root.join("episodes")).unwrap();
        for ep in &suite {
            store.save(ep).unwrap();
        }
        let reg = EstimatorRegistry::default();
        let model = train_pipeline(&suite, SKILL, "gp", &quick_cfg(), &reg).unwrap();
        save_bundle(&root.join("checkpoints").join(SKILL).join("gp"), SKILL, &model, &[]).unwrap();

        let demo = suite.iter().find(|e| e.provenance == Provenance::Demonstration).unwrap();
        let mut injected = demo.clone();
        injected.episode_id = INJECTED.into();
        injected.provenance = Provenance::TestNovel;
        let n = injected.len() - injected.len() % 2;
        injected.frames.truncate(n);
        let fault_at = n / 2;
        injected.frames[fault_at] = Frame::white();
        let mut fresh = riskwatch_core::dataset::EpisodeRecord::new(INJECTED, SKILL, Provenance::TestNovel, injected.frames);
        fresh.fault_spec = None;
        store.save(&fresh).unwrap();
        (dir, root, fault_at)
    });
    // SAFETY of lifetimes: the TempDir lives in the static.
    let (_, root, at) = t;
    static OUT: OnceLock<(PathBuf, usize)> = OnceLock::new();
    OUT.get_or_init(|| (root.clone(), *at))
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    fault_at: usize,
}

fn fixture() -> Fixture {
    let (root, fault_at) = template();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    copy_dir(root, &data);
    Fixture {
        _dir: dir,
        data,
        fault_at: *fault_at,
    }
}

fn server(data: &Path) -> ServerHandle {
    let mut cfg = ServiceConfig::new(data);
    cfg.port = 0;
    cfg.pipeline = quick_cfg();
    spawn(cfg).unwrap()
}

fn get(url: &str) -> (u16, Value) {
    match ureq::get(url).call() {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap()),
        Err(e) => panic!("{e}"),
    }
}

fn post(url: &str, body: Value) -> (u16, Value) {
    match ureq::post(url).send_json(body) {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap()),
        Err(e) => panic!("{e}"),
    }
}

fn post_frame(url: &str, frame: &Frame) -> (u16, Value) {
    let req = ureq::post(url).set("Content-Type", "image/x-portable-graymap");
    match req.send_bytes(&frame.to_pgm()) {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap()),
        Err(e) => panic!("{e}"),
    }
}

fn wait_for(what: &str, timeout: Duration, mut f: impl FnMut() -> bool) {
    let t0 = Instant::now();
    while !f() {
        assert!(t0.elapsed() < timeout, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn error_code(v: &Value) -> &str {
    assert_eq!(v["format_version"], 1);
    v["error"]["code"].as_str().unwrap()
}

/// Reads `(event, data)` pairs until the server closes the stream.
fn read_stream(url: &str) -> Vec<(String, Value)> {
    let resp = ureq::get(url).call().unwrap();
    assert_eq!(resp.header("content-type"), Some("text/event-stream"));
    let mut out = Vec::new();
    let mut name = String::new();
    for line in BufReader::new(resp.into_reader()).lines() {
        let line = line.unwrap();
        if let Some(n) = line.strip_prefix("event: ") {
            name = n.to_string();
        } else if let Some(d) = line.strip_prefix("data: ") {
            out.push((name.clone(), serde_json::from_str(d).unwrap()));
        }
    }
    out
}

fn start_replay(base: &str, episode: &str) -> String {
    let (code, v) = post(
        &format!("{base}/sessions"),
        json!({"skill": SKILL, "source": {"kind": "replay", "episode_id": episode}}),
    );
    assert_eq!(code, 201, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn session(base: &str, id: &str) -> Value {
    let (code, v) = get(&format!("{base}/sessions/{id}"));
    assert_eq!(code, 200);
    v
}

fn wait_version(base: &str, version: u64) -> Value {
    let mut models = Value::Null;
    wait_for("retrain", Duration::from_secs(300), || {
        models = get(&format!("{base}/models")).1;
        assert_ne!(models["retrain"]["state"], "failed", "{models}");
        models["current_version"] == version
    });
    models
}

#[test]
fn replay_pauses_on_injected_fault_and_label_resumes() {
    let fx = fixture();
    let srv = server(&fx.data);
    let base = srv.url();
    let id = start_replay(&base, INJECTED);
    let stream_url = format!("{base}/sessions/{id}/stream");
    let reader = std::thread::spawn(move || read_stream(&stream_url));

    wait_for("pause", Duration::from_secs(30), || session(&base, &id)["phase"] == "PAUSED_AWAITING_LABEL");
    let s = session(&base, &id);
    assert_eq!(s["pending_frame"], fx.fault_at);
    assert_eq!(s["model_version"], 1);
    // scoring stops at the flagged frame
    std::thread::sleep(Duration::from_millis(200));
    assert_eq!(session(&base, &id)["cursor"], fx.fault_at + 1);

    let (code, v) = post(
        &format!("{base}/sessions/{id}/labels"),
        json!({"frame_index": 0, "label": "risky"}),
    );
    assert_eq!(code, 409);
    assert_eq!(error_code(&v), "NotPaused");

    let (code, v) = post(
        &format!("{base}/sessions/{id}/labels"),
        json!({"frame_index": fx.fault_at, "label": "risky"}),
    );
    assert_eq!(code, 200, "{v}");
    wait_for("completion", Duration::from_secs(30), || session(&base, &id)["phase"] == "COMPLETED");

    let events = reader.join().unwrap();
    assert!(events.iter().all(|(_, d)| d["format_version"] == 1));
    let verdicts: Vec<&Value> = events.iter().filter(|(n, _)| n == "verdict").map(|(_, d)| d).collect();
    let total = session(&base, &id)["total_frames"].as_u64().unwrap() as usize;
    assert_eq!(verdicts.len(), total);
    for (i, v) in verdicts.iter().enumerate() {
        assert_eq!(v["frame_index"], i);
        for k in ["r", "mu", "sigma", "flag", "recon_unreliable", "phase"] {
            assert!(!v[k].is_null(), "verdict lacks {k}");
        }
    }
    let pauses = events
        .iter()
        .filter(|(n, d)| n == "phase" && d["phase"] == "PAUSED_AWAITING_LABEL")
        .count();
    assert_eq!(pauses, 1);
    assert!(verdicts[fx.fault_at]["flag"].as_bool().unwrap());
    assert_eq!(events.last().unwrap().1["phase"], "COMPLETED");
    assert!(events.iter().any(|(n, d)| n == "label" && d["label"] == "risky"));

    // the label reached the episode store
    let store = EpisodeStore::open(fx.data.join("episodes")).unwrap();
    let ep = store.load(INJECTED).unwrap();
    assert_eq!(ep.label(fx.fault_at), Some(riskwatch_core::dataset::Label::Risky));
    assert_eq!(ep.audit().len(), 1);

    // any frame of a completed replay may be labeled
    let (code, _) = post(
        &format!("{base}/sessions/{id}/labels"),
        json!({"frame_index": 3, "label": "safe"}),
    );
    assert_eq!(code, 200);
    let (code, v) = post(
        &format!("{base}/sessions/{id}/labels"),
        json!({"frame_index": total, "label": "safe"}),
    );
    assert_eq!(code, 422);
    assert_eq!(error_code(&v), "IndexOutOfRange");

    // a late subscriber gets the full history and a closed stream
    let again = read_stream(&format!("{base}/sessions/{id}/stream"));
    assert!(again.len() >= events.len());
}

#[test]
fn push_session_pauses_rejects_and_completes() {
    let fx = fixture();
    let srv = server(&fx.data);
    let base = srv.url();
    let store = EpisodeStore::open(fx.data.join("episodes")).unwrap();
    let demo = store.load("pick_peg_demo_00").unwrap();

    let (code, v) = post(
        &format!("{base}/sessions"),
        json!({"skill": SKILL, "source": {"kind": "push", "expected_frames": 4}}),
    );
    assert_eq!(code, 201);
    let id = v["session_id"].as_str().unwrap().to_string();
    let frames_url = format!("{base}/sessions/{id}/frames");

    // white frame at alpha 0 coincides with an anchor
    let (code, v) = post_frame(&frames_url, &Frame::white());
    assert_eq!(code, 200, "{v}");
    assert_eq!(v["flag"], true);
    assert_eq!(v["phase"], "PAUSED_AWAITING_LABEL");
    let (code, v) = post_frame(&frames_url, &demo.frames[50]);
    assert_eq!(code, 409);
    assert_eq!(error_code(&v), "SessionPaused");

    let (code, v) = post(
        &format!("{base}/sessions/{id}/labels"),
        json!({"frame_index": 0, "label": "safe"}),
    );
    assert_eq!(code, 200);
    assert_eq!(v["phase"], "RESUMED");

    for i in [50, 100, 150] {
        let (code, v) = post_frame(&frames_url, &demo.frames[i]);
        assert_eq!(code, 200);
        assert_eq!(v["flag"], false, "{v}");
    }
    assert_eq!(session(&base, &id)["phase"], "COMPLETED");
    let (code, v) = post_frame(&frames_url, &demo.frames[0]);
    assert_eq!(code, 409);
    assert_eq!(error_code(&v), "SessionCompleted");

    let recorded = store.load(&format!("push_{id}")).unwrap();
    assert_eq!(recorded.len(), 4);
    assert_eq!(recorded.label(0), Some(riskwatch_core::dataset::Label::Safe));
    assert_eq!(recorded.provenance, Provenance::TrainingExecution);
}

#[test]
fn errors_use_the_error_document() {
    let fx = fixture();
    let srv = server(&fx.data);
    let base = srv.url();

    let (code, v) = post(
        &format!("{base}/sessions"),
        json!({"skill": "juggle", "source": {"kind": "push", "expected_frames": 3}}),
    );
    assert_eq!(code, 404);
    assert_eq!(error_code(&v), "NoModelForSkill");

    let (code, v) = post(&format!("{base}/sessions"), json!({"skill": SKILL}));
    assert_eq!(code, 400);
    assert_eq!(error_code(&v), "BadRequest");

    let (code, v) = post(
        &format!("{base}/sessions"),
        json!({"skill": SKILL, "source": {"kind": "replay", "episode_id": "nope"}}),
    );
    assert_eq!(code, 404);
    assert_eq!(error_code(&v), "EpisodeNotFound");

    let (code, v) = get(&format!("{base}/sessions/s999999"));
    assert_eq!(code, 404);
    assert_eq!(error_code(&v), "SessionNotFound");

    let (_, v) = post(
        &format!("{base}/sessions"),
        json!({"skill": SKILL, "source": {"kind": "push", "expected_frames": 3}}),
    );
    let id = v["session_id"].as_str().unwrap();
    let resp = ureq::post(&format!("{base}/sessions/{id}/frames")).send_bytes(b"P5 not a frame");
    match resp {
        Err(ureq::Error::Status(400, r)) => assert_eq!(error_code(&r.into_json().unwrap()), "BadRequest"),
        other => panic!("expected 400, got {other:?}"),
    }
    let (code, v) = post(
        &format!("{base}/sessions/{id}/labels"),
        json!({"frame_index": 0, "label": "risky"}),
    );
    assert_eq!(code, 422);
    assert_eq!(error_code(&v), "IndexOutOfRange");

    let (code, v) = get(&format!("{base}/no/such/route"));
    assert_eq!(code, 404);
    assert_eq!(error_code(&v), "NoRoute");
}

#[test]
fn episodes_and_frames_are_served() {
    let fx = fixture();
    let srv = server(&fx.data);
    let base = srv.url();
    let (code, v) = get(&format!("{base}/episodes"));
    assert_eq!(code, 200);
    assert_eq!(v["format_version"], 1);
    let eps = v["episodes"].as_array().unwrap();
    assert_eq!(eps.len(), 10);
    assert!(eps.iter().any(|e| e["episode_id"] == INJECTED));

    let resp = ureq::get(&format!("{base}/episodes/{INJECTED}/frames/{}", fx.fault_at)).call().unwrap();
    assert_eq!(resp.header("content-type"), Some("image/x-portable-graymap"));
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut resp.into_reader(), &mut bytes).unwrap();
    assert_eq!(Frame::from_pgm(&bytes).unwrap(), Frame::white());

    let (code, v) = get(&format!("{base}/episodes/{INJECTED}/frames/100000"));
    assert_eq!(code, 422);
    assert_eq!(error_code(&v), "IndexOutOfRange");
}

#[test]
fn retrain_publishes_new_version_and_survives_restart() {
    let fx = fixture();
    let srv = server(&fx.data);
    let base = srv.url();
    let (_, models) = get(&format!("{base}/models"));
    assert_eq!(models["current_version"], 1);
    assert_eq!(models["versions"][0]["scope"], "import");

    // label the injected frame through a completed replay
    let id = start_replay(&base, INJECTED);
    wait_for("pause", Duration::from_secs(30), || session(&base, &id)["phase"] == "PAUSED_AWAITING_LABEL");
    post(
        &format!("{base}/sessions/{id}/labels"),
        json!({"frame_index": fx.fault_at, "label": "risky"}),
    );
    wait_for("completion", Duration::from_secs(30), || session(&base, &id)["phase"] == "COMPLETED");

    // a session started before the retrain keeps its version
    let (_, v) = post(
        &format!("{base}/sessions"),
        json!({"skill": SKILL, "source": {"kind": "push", "expected_frames": 10}}),
    );
    let pinned = v["session_id"].as_str().unwrap().to_string();

    let (code, v) = post(&format!("{base}/retrain"), json!({"scope": "gp_only"}));
    assert_eq!(code, 202, "{v}");
    assert_eq!(v["retrain"]["state"], "running");
    let (code, v) = post(&format!("{base}/retrain"), json!({"scope": "gp_only"}));
    assert_eq!(code, 409);
    assert_eq!(error_code(&v), "RetrainInProgress");
    let (code, _) = post(&format!("{base}/retrain"), json!({"scope": "everything"}));
    assert_eq!(code, 400);

    let models = wait_version(&base, 2);
    let v2 = &models["versions"][1];
    assert_eq!(v2["scope"], "gp_only");
    let entry = &v2["skills"][SKILL];
    assert_eq!(entry["encoder_version"], 1, "gp_only keeps the encoder");
    let trained: Vec<&str> = entry["training_episodes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e.as_str().unwrap())
        .collect();
    assert!(trained.contains(&INJECTED));
    assert!(!trained.contains(&"pick_peg_novel_01"));
    assert_eq!(session(&base, &pinned)["model_version"], 1);

    let fresh = start_replay(&base, INJECTED);
    assert_eq!(session(&base, &fresh)["model_version"], 2);
    wait_for("pause", Duration::from_secs(30), || {
        session(&base, &fresh)["phase"] == "PAUSED_AWAITING_LABEL"
    });
    assert_eq!(session(&base, &fresh)["pending_frame"], fx.fault_at);

    // gp_encoder fine-tunes and re-stamps the encoder
    let (code, _) = post(&format!("{base}/retrain"), json!({"scope": "gp_encoder"}));
    assert_eq!(code, 202);
    let models = wait_version(&base, 3);
    assert_eq!(models["versions"][2]["skills"][SKILL]["encoder_version"], 3);

    drop(srv);
    let srv = server(&fx.data);
    let base = srv.url();
    let (_, models) = get(&format!("{base}/models"));
    assert_eq!(models["current_version"], 3);
    assert_eq!(models["versions"].as_array().unwrap().len(), 3);
    let restored = session(&base, &id);
    assert_eq!(restored["phase"], "COMPLETED");
    assert_eq!(restored["flagged_frames"], json!([fx.fault_at]));
    // sessions that never completed are not restored
    let (code, _) = get(&format!("{base}/sessions/{pinned}"));
    assert_eq!(code, 404);
    let next = start_replay(&base, "pick_peg_demo_00");
    assert!(next > fresh, "{next} should sort after {fresh}");
    let events = read_stream(&format!("{base}/sessions/{id}/stream"));
    assert_eq!(events.last().unwrap().1["phase"], "COMPLETED");
}

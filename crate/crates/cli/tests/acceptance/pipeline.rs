//! End-to-end checks through the binary and the HTTP service: determinism,
//! latency, and the absence of any browser-side build.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use counterfact_core::dataio::{truncate_record, TrajectoryRecord};
use counterfact_core::inference::{counterfactual_compare, default_plans, prepare_history};
use counterfact_core::seqmodel::ModelCheckpoint;
use counterfact_service::{router, serve_until, AppState, LoadedModel};
use serde_json::json;

use crate::sweep::pass_word;
use crate::Verdict;

const BIN: &str = env!("CARGO_BIN_EXE_counterfact");

const PIPELINE_CONFIG: &str = r#"
[simulate]
n_patients = 150
horizon = 20
gamma = 4.0
seed = 11

[preprocess]
split_seed = 2

[train]
mode = "smmd"
epochs = 6
batch_size = 16
seed = 3

[train.smmd]
subset_size = 16
grouping = "joint"
"#;

fn run(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .arg("--quiet")
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("read dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("prefix").to_path_buf();
                files.insert(rel, std::fs::read(&p).expect("read file"));
            }
        }
    }
    files
}

fn pipeline_once(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("run.toml"), PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    run(dir, &["simulate", "--config", "run.toml", "--out", "out/sim"])?;
    run(dir, &["train", "--config", "run.toml", "--data", "out/sim", "--out", "out/train"])?;
    run(
        dir,
        &[
            "evaluate",
            "--config",
            "run.toml",
            "--checkpoint",
            "out/train/model.ckpt",
            "--data",
            "out/train/splits/test",
            "--out",
            "out/eval",
        ],
    )?;
    Ok(snapshot(&dir.join("out")))
}

pub fn determinism() -> Verdict {
    let work = tempfile::tempdir().expect("tempdir");
    let first = pipeline_once(&work.path().join("a"));
    let second = pipeline_once(&work.path().join("b"));
    let (a, b) = match (first, second) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Verdict::new(false, format!("pipeline failed: {e}")),
    };
    let same_names = a.keys().eq(b.keys());
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let kinds = |suffix: &str| a.keys().filter(|k| k.to_string_lossy().ends_with(suffix)).count();
    let ok = same_names && differing.is_empty() && kinds(".ckpt") > 0 && kinds("trajectories.csv") > 0;
    Verdict::new(
        ok,
        if ok {
            format!(
                "simulate → train → evaluate twice: {} files bit-identical ({} checkpoint, {} datasets, {} JSON reports)",
                a.len(),
                kinds(".ckpt"),
                kinds("trajectories.csv"),
                kinds(".json")
            )
        } else {
            format!("file sets equal: {same_names}; differing: {}", differing.join(", "))
        },
    )
}

fn history_json(r: &TrajectoryRecord, t: usize) -> serde_json::Value {
    let x: Vec<Vec<f64>> = (0..t).map(|k| r.x_row(k, 2).to_vec()).collect();
    let a: Vec<Vec<f64>> = (0..t).map(|k| r.a_row(k, 2).to_vec()).collect();
    let y: Vec<Vec<f64>> = (0..t).map(|k| r.y_row(k, 1).to_vec()).collect();
    json!({ "patient_id": r.patient_id, "v": r.v, "x": x, "a": a, "y": y })
}

fn post(addr: &str, path: &str, body: &str) -> Result<String, String> {
    let mut s = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    write!(
        s,
        "POST {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .map_err(|e| e.to_string())?;
    let mut resp = String::new();
    s.read_to_string(&mut resp).map_err(|e| e.to_string())?;
    if resp.starts_with("HTTP/1.1 200") {
        Ok(resp)
    } else {
        Err(resp.lines().next().unwrap_or("").to_string())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const WARMUP: usize = 20;
const REQUESTS: usize = 200;
/// History steps sent with each request.
const LATENCY_ORIGIN: usize = 20;

pub fn latency(ckpt: &ModelCheckpoint, record: &TrajectoryRecord) -> Verdict {
    let model = LoadedModel::new(ckpt.clone()).expect("model");
    let app = router(AppState::with_model(model), &[]).expect("router");
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime");
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).expect("bind");
    let addr = listener.local_addr().expect("addr").to_string();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = rt.spawn(serve_until(listener, app, async {
        let _ = stopped.await;
    }));

    let body = json!({
        "history": history_json(record, LATENCY_ORIGIN),
        "horizon": 6,
        "ig_steps": 64,
        "target_range": [0.0, 1000.0],
    })
    .to_string();
    let mut times = Vec::with_capacity(REQUESTS);
    let mut error = None;
    for i in 0..WARMUP + REQUESTS {
        let started = Instant::now();
        match post(&addr, "/predict", &body) {
            Ok(resp) if i == 0 && !resp.contains("\"trajectories\"") => {
                error = Some("response without trajectories".to_string());
                break;
            }
            Ok(_) => {}
            Err(e) => {
                error = Some(e);
                break;
            }
        }
        if i >= WARMUP {
            times.push(started.elapsed().as_secs_f64() * 1e3);
        }
    }
    let _ = stop.send(());
    let _ = rt.block_on(server);
    if let Some(e) = error {
        return Verdict::new(false, format!("/predict failed: {e}"));
    }
    let predict_p50 = median(times);

    let inputs = prepare_history(ckpt, &truncate_record(record, LATENCY_ORIGIN, &ckpt.schema)).expect("history");
    let plans = default_plans(&ckpt.schema, 6);
    let mut rollout = Vec::with_capacity(REQUESTS);
    for i in 0..WARMUP + REQUESTS {
        let started = Instant::now();
        let res = counterfactual_compare(ckpt, &inputs, &plans).expect("rollout");
        std::hint::black_box(res);
        if i >= WARMUP {
            rollout.push(started.elapsed().as_secs_f64() * 1e3);
        }
    }
    let rollout_p50 = median(rollout);
    let (p_ok, r_ok) = (predict_p50 < 50.0, rollout_p50 < 35.0);
    Verdict::new(
        p_ok && r_ok,
        format!(
            "/predict p50 {predict_p50:.2} ms over {REQUESTS} warm requests (τ=6, 4 plans, m=64, {} params) {}; rollout p50 {rollout_p50:.3} ms {}",
            ckpt.model.param_count(),
            pass_word(p_ok),
            pass_word(r_ok)
        ),
    )
}

/// Paths under the workspace root that would indicate a browser build.
fn browser_artifacts(root: &Path) -> Vec<PathBuf> {
    const MARKERS: [&str; 5] = ["node_modules", "package.json", "package-lock.json", "dist", ".vite"];
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for entry in entries.flatten() {
            let p = entry.path();
            let name = entry.file_name().to_string_lossy().to_string();
            if MARKERS.contains(&name.as_str()) {
                found.push(p.clone());
            }
            if p.is_dir() && !matches!(name.as_str(), "target" | ".git" | "examples") {
                stack.push(p);
            }
        }
    }
    found
}

pub fn no_secondary() -> Verdict {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let found = browser_artifacts(&root);
    let manifest = std::fs::read_to_string(root.join("Cargo.toml")).unwrap_or_default();
    let rust_only = manifest.contains("members = [\"crates/*\"]");
    Verdict::new(
        found.is_empty() && rust_only,
        if found.is_empty() {
            "suite built and run by cargo alone; no browser toolchain or build output in the workspace".to_string()
        } else {
            format!(
                "browser build artifacts present: {}",
                found.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
            )
        },
    )
}

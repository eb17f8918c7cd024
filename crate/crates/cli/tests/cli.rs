use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gsopt::oracle::{read_pfm, Scene};
use gsopt::search::read_iterations;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn config() -> String {
    fixtures().join("mock_config.json").to_str().unwrap().to_string()
}

fn gsopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsopt"))
        .args(args)
        .env_remove("GSOPT_TEST_UNSET_KEY")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Copy of the mock config with `edit` applied, written next to absolute paths.
fn edited_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(config()).unwrap()).unwrap();
    let abs = |p: &serde_json::Value| serde_json::Value::String(fixtures().join(p.as_str().unwrap()).to_str().unwrap().into());
    for key in ["source_path", "scene_path", "metrics_path", "workload_path"] {
        v[key] = abs(&v[key]);
    }
    for f in v["crosscheck"]["fixtures"].as_array_mut().unwrap() {
        f["path"] = abs(&f["path"]);
    }
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn profile_from_config() {
    let o = gsopt(&["profile", "--config", &config()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("compute-bound"));
    assert!(text.contains("not_selected"));
    assert!(text.contains("1617 blocks"));
    assert!(text.contains("12 waves"));
    assert!(text.contains("1189"));
}

#[test]
fn profile_single_tile_is_one_wave() {
    let metrics = fixtures().join("metrics_drjohnson.csv");
    let o = gsopt(&["profile", "--metrics", metrics.to_str().unwrap(), "--width", "16", "--height", "16"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("1 blocks, 144 concurrent, 1 wave\n"));
}

#[test]
fn profile_input_errors_exit_2() {
    let o = gsopt(&["profile", "--metrics", "/nonexistent/metrics.csv", "--width", "8", "--height", "8"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gsopt(&["profile", "--width", "8", "--height", "8"]);
    assert_eq!(o.status.code(), Some(2));
    let metrics = fixtures().join("metrics_mipnerf360.csv");
    let o = gsopt(&["profile", "--metrics", metrics.to_str().unwrap(), "--width", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_2() {
    let o = gsopt(&["plan", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}

#[test]
fn render_empty_scene_is_background() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = Scene::empty(20, 12, [16, 16]);
    scene.background = vec![0.25, 0.5, 0.75];
    let path = dir.path().join("empty.json");
    scene.write(&path).unwrap();
    let out = dir.path().join("out");
    let o = gsopt(&["render", "--scene", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let img = read_pfm(out.join("image.pfm")).unwrap();
    assert_eq!((img.width, img.height), (20, 12));
    for px in img.to_f64().chunks(3) {
        assert_eq!(px, [0.25, 0.5, 0.75]);
    }
    assert!(!out.join("stats.csv").exists());
}

#[test]
fn render_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = gsopt(&["render", "--config", &config(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("mean_per_tile,40.1875"));
        bytes.push(std::fs::read(out.join("image.pfm")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn render_malformed_scene_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"width\": 4,").unwrap();
    let o = gsopt(&["render", "--scene", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn search_writes_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = gsopt(&["search", "--config", &config(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["run.json", "iterations.jsonl", "report.json", "plan.json", "pruned.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    for i in [10, 20, 30, 40] {
        assert!(out.join("best").join(format!("{i}.src")).exists());
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["best_curve"].as_array().unwrap().len(), 4);
    assert_eq!(read_iterations(&out.join("iterations.jsonl")).unwrap().len(), 40);

    let o = gsopt(&["report", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("iterations: 40"));
}

#[test]
fn search_requires_out() {
    let o = gsopt(&["search", "--config", &config()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(seed);
        let o = gsopt(&["search", "--config", &config(), "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        logs.push(std::fs::read(out.join("iterations.jsonl")).unwrap());
    }
    assert_ne!(logs[0], logs[1]);
}

#[test]
fn remote_backend_without_key_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |v| {
        v["backends"][1] = serde_json::json!({
            "role": "generator",
            "kind": "remote",
            "endpoint": "http://127.0.0.1:9/v1/chat/completions",
            "model": "some-model",
            "api_key_env": "GSOPT_TEST_UNSET_KEY"
        });
    });
    let out = dir.path().join("run");
    let o = gsopt(&["search", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("GSOPT_TEST_UNSET_KEY"));

    // --mock swaps the remote generator for a mock and the run succeeds.
    let o = gsopt(&["search", "--config", &cfg, "--mock", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
}

#[test]
fn invalid_search_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |v| v["search"]["top_k"] = 99.into());
    let o = gsopt(&["search", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn duplicate_role_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |v| {
        let planner = v["backends"][0].clone();
        v["backends"].as_array_mut().unwrap().push(planner);
    });
    assert_eq!(gsopt(&["plan", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn plan_and_prune() {
    let dir = tempfile::tempdir().unwrap();
    let o = gsopt(&["plan", "--config", &config(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().count() >= 5);
    let plan = dir.path().join("plan.json");
    let o = gsopt(&["prune", "--config", &config(), "--plan", plan.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("KEEP") && text.contains("DROP"));
    assert!(text.lines().any(|l| l.starts_with("DROP") && l.contains("computed fraction")));
}

#[test]
fn check_reports_verdicts() {
    let unsafe_candidate = fixtures().join("crosscheck/Gemini.cu");
    let o = gsopt(&["check", "--config", &config(), unsafe_candidate.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("NOT EQUIVALENT\n- "));

    let o = gsopt(&["check", "--config", &config(), fixtures().join("kernel.cu").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("EQUIVALENT\n"));
}

#[test]
fn check_rejects_edits_outside_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixtures().join("kernel.cu")).unwrap();
    let path = dir.path().join("edited.cu");
    std::fs::write(&path, format!("// extra header line\n{text}")).unwrap();
    let o = gsopt(&["check", "--config", &config(), path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn crosscheck_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = gsopt(&["crosscheck", "--config", &config(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("crosscheck.csv")).unwrap();
    assert_eq!(csv, stdout(&o));
    assert!(csv.starts_with("checker,GPT-5,Deepseek_r1,Gemini,Claude\n"));
}

#[test]
fn crosscheck_without_section_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |v| {
        v.as_object_mut().unwrap().remove("crosscheck");
    });
    assert_eq!(gsopt(&["crosscheck", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn report_on_missing_dir_exits_2() {
    assert_eq!(gsopt(&["report", "/nonexistent/run"]).status.code(), Some(2));
}

#[test]
fn remote_auth_rejection_exits_3() {
    use std::io::{Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming().take(1) {
            let mut s = stream.unwrap();
            let mut buf = [0u8; 65536];
            let _ = s.read(&mut buf);
            let body = "{\"error\":\"bad key\"}";
            let _ = write!(
                s,
                "HTTP/1.1 401 Unauthorized\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |v| {
        v["backends"][0] = serde_json::json!({
            "role": "planner",
            "kind": "remote",
            "endpoint": format!("http://{addr}/v1/chat/completions"),
            "model": "some-model",
            "api_key_env": "GSOPT_TEST_KEY",
            "max_retries": 0
        });
    });
    let o = Command::new(env!("CARGO_BIN_EXE_gsopt"))
        .args(["plan", "--config", &cfg])
        .env("GSOPT_TEST_KEY", "wrong")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pseudoflow::dataio::read_png;

fn pf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pseudoflow"))
        .args(args)
        .current_dir(cwd)
        .env("PSEUDOFLOW_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_flow_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        ok(&pf(&["synth-flow", "--width", "40", "--height", "30", "--seed", "5", "--out", &format!("{name}.flo")], d));
    }
    assert_eq!(fs::read(d.join("a.flo")).unwrap(), fs::read(d.join("b.flo")).unwrap());
    assert_eq!(fs::read(d.join("a.png")).unwrap(), fs::read(d.join("b.png")).unwrap());
    assert_eq!(fs::read(d.join("a.flo")).unwrap().len(), 12 + 8 * 40 * 30);
}

#[test]
fn zero_flow_warp_preserves_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pf(
        &["dataset-gen", "--out", "ds", "--width", "24", "--height", "20", "--frames", "2", "--train-clips", "0", "--val-clips", "1"],
        d,
    ));
    let img = d.join("ds/domainX/val/clip_0000/frame_00000.png");
    // a .flo of zeros
    let mut flo = b"PIEH".to_vec();
    flo.extend(24u32.to_le_bytes());
    flo.extend(20u32.to_le_bytes());
    flo.resize(12 + 8 * 24 * 20, 0);
    fs::write(d.join("zero.flo"), flo).unwrap();
    ok(&pf(&["warp", "--image", img.to_str().unwrap(), "--flow", "zero.flo", "--out", "w.png"], d));
    let a = read_png(&img).unwrap();
    let b = read_png(&d.join("w.png")).unwrap();
    assert_eq!(a.shape(), b.shape());
    // within one 8-bit step
    assert!(a.max_abs_diff(&b) <= 2.0 / 255.0 + 1e-6);
}

#[test]
fn ablate_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pf(
        &[
            "ablate", "--preset", "wrong-flow", "--seeds", "1", "--max-iterations", "3", "--net-width", "2", "--width", "16",
            "--height", "16", "--frames", "3", "--train-clips", "2", "--val-clips", "1", "--out", "out/report.json",
        ],
        d,
    ));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    let names: Vec<&str> = r["summary"].as_array().unwrap().iter().map(|s| s["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "wrong-flow"]);
    assert_eq!(r["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn train_translate_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pf(
        &["dataset-gen", "--out", "ds", "--width", "16", "--height", "16", "--frames", "3", "--train-clips", "2", "--val-clips", "1"],
        d,
    ));
    fs::write(
        d.join("tiny.toml"),
        "max_iterations = 4\n[generator]\nbase_width = 2\nn_downsample = 1\nn_resblocks = 1\n[discriminator]\nbase_width = 2\nn_strided = 2\n",
    )
    .unwrap();
    let out = pf(&["train", "--data", "ds", "--config", "tiny.toml", "--out", "run", "--seed", "7"], d);
    ok(&out);
    // the resolved config and seed are logged as JSON
    let first = String::from_utf8_lossy(&out.stderr).lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["command"], "train");
    assert_eq!(v["resolved"]["seed"], 7);
    assert_eq!(fs::read_to_string(d.join("run/log.csv")).unwrap().lines().count(), 5);

    let ck = "run/checkpoints/final.ckpt";
    ok(&pf(&["translate", "--checkpoint", ck, "--input", "ds/domainX/val/clip_0000", "--out", "tr"], d));
    let frames = fs::read_dir(d.join("tr")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("frame_"));
    assert_eq!(frames.count(), 3);
    ok(&pf(&["eval", "--checkpoint", ck, "--data", "ds", "--out", "rep"], d));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("rep.json")).unwrap()).unwrap();
    assert!(rep["miou"]["value"].as_f64().unwrap() >= 0.0);
    assert!(d.join("rep.csv").is_file());
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = pf(&["synth-flow", "--width", "8", "--height", "8", "--out", "f.flo", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = pf(&["--json", "ablate", "--preset", "nonsense", "--out", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    let last: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(last["code"], 2);
    assert_eq!(last["error"], "usage");
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = pf(&["--json", "warp", "--image", "missing.png", "--flow", "missing.flo"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let last: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(last["error"], "runtime");
    assert!(last["message"].as_str().unwrap().contains("missing.png"));
}

#[test]
fn help_lists_subcommands_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let top = pf(&["--help"], dir.path());
    ok(&top);
    let text = String::from_utf8_lossy(&top.stdout);
    for cmd in ["dataset-gen", "synth-flow", "warp", "train", "translate", "eval", "gradcheck", "ablate", "--json"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
    let train = pf(&["train", "--help"], dir.path());
    let text = String::from_utf8_lossy(&train.stdout);
    for flag in ["--data", "--config", "--out", "--seed", "--resume", "--max-iterations"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn gradcheck_passes_on_a_few_cases() {
    let dir = tempfile::tempdir().unwrap();
    let out = pf(&["gradcheck", "--cases", "2"], dir.path());
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("backward_warp") && text.contains("generator_2res"));
    assert!(!text.contains("FAIL"));
}

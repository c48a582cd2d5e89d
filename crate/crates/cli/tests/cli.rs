use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use thermal_nuc::io::{read_pfm, write_pfm};
use thermal_nuc::Image;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermal-nuc")).args(args).output().unwrap()
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermal-nuc"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn simulate(out: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--synthetic", "smooth", "--seed", "3", "--out", s(out)];
    args.extend_from_slice(extra);
    ok(run(&args));
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_is_byte_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    simulate(&a, &["--width", "64", "--height", "64"]);
    simulate(&b, &["--width", "64", "--height", "64"]);
    assert_eq!(listing(&a), listing(&b));
}

#[test]
fn simulate_shares_one_nonuniformity_across_frames() {
    let d = tempfile::tempdir().unwrap();
    simulate(d.path(), &["--width", "32", "--height", "32", "--frames", "20"]);
    let names: Vec<String> = listing(d.path()).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("frame_")).count(), 20);
    assert_eq!(names.iter().filter(|n| n.as_str() == "gain.pfm").count(), 1);
    assert_eq!(names.iter().filter(|n| n.as_str() == "offset.pfm").count(), 1);
    let meta = read_json(&d.path().join("meta.json"));
    assert_eq!(meta["config"]["frames"], 20);
}

#[test]
fn noiseless_single_frame_is_the_scene() {
    let d = tempfile::tempdir().unwrap();
    let scene = Image::from_fn(24, 20, |x, y| 0.1 + 0.03 * x as f64 + 0.01 * (y * y) as f64);
    let sp = d.path().join("scene.pfm");
    write_pfm(&sp, &scene).unwrap();
    let out = d.path().join("stack");
    ok(run(&[
        "simulate", "--scene", s(&sp), "--frames", "1", "--jitter-px", "0", "--gain-col-sigma", "0",
        "--offset-amp", "0", "--poisson-scale", "0", "--read-sigma", "0", "--seed", "1", "--out", s(&out),
    ]));
    assert_eq!(read_pfm(out.join("frame_0000.pfm")).unwrap(), read_pfm(&sp).unwrap());
}

#[test]
fn input_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.pfm");
    std::fs::write(&bad, b"P6\n2 2\n255\n").unwrap();
    let out = d.path().join("o");
    assert_eq!(code(&run(&["simulate", "--scene", s(&bad), "--seed", "1", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["simulate", "--synthetic", "smooth", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["solve", "--stack", s(d.path()), "--seed", "1", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);

    let stack = d.path().join("stack");
    simulate(&stack, &["--width", "32", "--height", "32"]);
    let o = run(&["solve", "--stack", s(&stack), "--method", "magic", "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 2);

    let (a, b) = (d.path().join("a.pfm"), d.path().join("b.pfm"));
    write_pfm(&a, &Image::filled(4, 4, 1.0)).unwrap();
    write_pfm(&b, &Image::filled(4, 5, 1.0)).unwrap();
    assert_eq!(code(&run(&["metrics", "--estimate", s(&a), "--truth", s(&b)])), 2);
}

#[test]
fn solver_failures_exit_with_three_and_leave_diagnostics() {
    let d = tempfile::tempdir().unwrap();
    let stack = d.path().join("stack");
    simulate(&stack, &["--width", "32", "--height", "32", "--frames", "1"]);
    let out = d.path().join("out");
    let o = run(&["solve", "--stack", s(&stack), "--method", "deepir", "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    let diag = read_json(&out.join("diagnostics.json"));
    assert!(diag["error"].as_str().is_some());
    assert!(String::from_utf8_lossy(&o.stderr).contains("diagnostics.json"));
}

#[test]
fn metrics_prints_psnr_and_mse() {
    let d = tempfile::tempdir().unwrap();
    let truth = Image::from_fn(16, 16, |x, y| ((x + 16 * y) as f64 / 255.0).min(1.0));
    let (t, e) = (d.path().join("t.pfm"), d.path().join("e.pfm"));
    write_pfm(&t, &truth).unwrap();
    let parse = |o: Output| -> Value { serde_json::from_slice(&ok(o).stdout).unwrap() };

    let same = parse(run(&["metrics", "--estimate", s(&t), "--truth", s(&t)]));
    assert_eq!(same["psnr_db"], "inf");
    assert_eq!(same["mse"], 0.0);

    // Values that are exact in 32 bits keep the offset exact after the file round trip.
    let truth = Image::from_fn(16, 16, |x, y| if (x + y) % 2 == 0 { 0.0 } else { 1.0 });
    write_pfm(&t, &truth).unwrap();
    write_pfm(&e, &truth.map(|v| v + 0.125)).unwrap();
    let off = parse(run(&["metrics", "--estimate", s(&e), "--truth", s(&t)]));
    let want = 10.0 * (1.0 / (0.125f64 * 0.125)).log10();
    assert!((off["psnr_db"].as_f64().unwrap() - want).abs() < 1e-9);
    assert_eq!(off["mse"], 0.125 * 0.125);
}

#[test]
fn metrics_reports_twenty_db_for_a_tenth_offset() {
    let d = tempfile::tempdir().unwrap();
    let truth = Image::from_fn(8, 8, |x, _| x as f64 / 7.0);
    let (t, e) = (d.path().join("t.pfm"), d.path().join("e.pfm"));
    write_pfm(&t, &truth).unwrap();
    write_pfm(&e, &truth.map(|v| v + 0.1)).unwrap();
    let o: Value = serde_json::from_slice(&ok(run(&["metrics", "--estimate", s(&e), "--truth", s(&t)])).stdout).unwrap();
    assert!((o["psnr_db"].as_f64().unwrap() - 20.0).abs() < 1e-5, "{o}");
}

#[test]
fn average_solve_reproduces_a_noiseless_identity_stack() {
    let d = tempfile::tempdir().unwrap();
    let stack = d.path().join("stack");
    simulate(
        &stack,
        &[
            "--width", "32", "--height", "32", "--jitter-px", "0", "--max-rotation-deg", "0", "--gain-col-sigma", "0",
            "--poisson-scale", "0",
        ],
    );
    let out = d.path().join("out");
    ok(run(&["solve", "--stack", s(&stack), "--method", "average", "--seed", "1", "--out", s(&out)]));
    assert_eq!(read_pfm(out.join("x0_hat.pfm")).unwrap(), read_pfm(stack.join("frame_0000.pfm")).unwrap());
    assert_eq!(read_json(&out.join("report.json"))["psnr_db"], "inf");
}

#[test]
fn deepir_report_echoes_the_default_settings() {
    let d = tempfile::tempdir().unwrap();
    let stack = d.path().join("stack");
    simulate(&stack, &["--width", "32", "--height", "32"]);
    let out = d.path().join("out");
    ok(run(&["solve", "--stack", s(&stack), "--method", "deepir", "--seed", "1", "--out", s(&out)]));
    let r = read_json(&out.join("report.json"));
    let c = &r["config"];
    assert_eq!(c["iters"], 2000);
    assert_eq!(c["lr"], 1e-3);
    assert_eq!(c["tv_image_weight"], 1e-5);
    assert_eq!(c["tv_offset_weight"], 10.0);
    assert_eq!(c["method"], "deepir");
    assert_eq!(r["loss_curve"]["total"].as_array().unwrap().len(), 2000);
    assert!(r["psnr_db"].as_f64().is_some() && r["baseline_psnr_db"].as_f64().is_some());
}

#[test]
fn config_files_supply_settings_and_flags_override_them() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("sim.toml");
    std::fs::write(&cfg, "seed = 5\nwidth = 32\nheight = 32\nframes = 4\n").unwrap();
    let out = d.path().join("stack");
    ok(run(&["simulate", "--config", s(&cfg), "--synthetic", "textured", "--frames", "2", "--out", s(&out)]));
    let meta = read_json(&out.join("meta.json"));
    assert_eq!(meta["config"]["seed"], 5);
    assert_eq!(meta["config"]["frames"], 2);
    assert!(out.join("frame_0001.pfm").exists() && !out.join("frame_0002.pfm").exists());
}

#[test]
fn solve_results_reproduce_from_their_echoed_config() {
    let d = tempfile::tempdir().unwrap();
    let stack = d.path().join("stack");
    simulate(&stack, &["--width", "32", "--height", "32"]);
    let a = d.path().join("a");
    ok(run(&[
        "solve", "--stack", s(&stack), "--method", "physics-tv", "--iters", "20", "--seed", "2", "--out", s(&a),
    ]));
    let mut echo = read_json(&a.join("report.json"))["config"].clone();
    let b = d.path().join("b");
    echo["out"] = Value::String(s(&b).into());
    let cfg = d.path().join("echo.json");
    std::fs::write(&cfg, serde_json::to_string(&echo).unwrap()).unwrap();
    ok(run(&["solve", "--config", s(&cfg)]));
    for f in ["x0_hat.pfm", "gain_hat.pfm", "offset_hat.pfm", "transforms_hat.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn superres_writes_q_times_the_sensor() {
    let d = tempfile::tempdir().unwrap();
    let stack = d.path().join("stack");
    simulate(&stack, &["--width", "64", "--height", "64", "--frames", "4", "--downsample", "4"]);
    let out = d.path().join("out");
    let o = ok(run(&["superres", "--stack", s(&stack), "--iters", "5", "--channels", "8", "--seed", "1", "--out", s(&out)]));
    assert_eq!(read_pfm(out.join("x0_hat.pfm")).unwrap().dims(), (64, 64));
    assert_eq!(read_pfm(stack.join("frame_0000.pfm")).unwrap().dims(), (16, 16));
    assert!(String::from_utf8_lossy(&o.stdout).contains("baseline"));
    let bad = run(&["superres", "--stack", s(&stack), "--factor", "3", "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn stats_of_identical_frames() {
    let d = tempfile::tempdir().unwrap();
    let stack = d.path().join("stack");
    simulate(
        &stack,
        &[
            "--width", "96", "--height", "96", "--frames", "5", "--jitter-px", "0", "--max-rotation-deg", "0",
            "--gain-pixel-sigma", "0.05", "--gain-corr-len", "3", "--poisson-scale", "0",
        ],
    );
    // A flat field: overwrite every frame with the first.
    let first = std::fs::read(stack.join("frame_0000.pfm")).unwrap();
    for k in 1..5 {
        std::fs::write(stack.join(format!("frame_{k:04}.pfm")), &first).unwrap();
    }
    let out = d.path().join("stats");
    ok(run(&["stats", "--stack", s(&stack), "--out", s(&out)]));
    let t = read_json(&out.join("temporal_autocorr.json"));
    for c in t["autocorr"].as_array().unwrap() {
        assert!((c.as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
    let st = read_json(&out.join("stats.json"));
    assert_eq!(st["requested_max_lag"], 50);
    assert!(out.join("spatial_autocorr.pfm").exists());
}

#[test]
fn thread_cap_is_validated() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    let args = |o: &Path| vec!["simulate", "--synthetic", "textured", "--width", "32", "--height", "32", "--seed", "4", "--out"]
        .into_iter()
        .map(String::from)
        .chain([s(o).to_string()])
        .collect::<Vec<_>>();
    let av = args(&a);
    let bv = args(&b);
    let ar: Vec<&str> = av.iter().map(String::as_str).collect();
    let br: Vec<&str> = bv.iter().map(String::as_str).collect();
    ok(run_env(&ar, "THERMAL_IR_THREADS", "1"));
    ok(run_env(&br, "THERMAL_IR_THREADS", "0"));
    assert_eq!(listing(&a), listing(&b));
    assert_eq!(code(&run_env(&ar, "THERMAL_IR_THREADS", "many")), 2);
}

#[test]
fn deepir_beats_physics_tv_on_the_demo_stack() {
    let d = tempfile::tempdir().unwrap();
    let stack = d.path().join("stack");
    ok(run(&[
        "simulate", "--synthetic", "smooth", "--seed", "1", "--transform-kind", "affine", "--offset-amp", "0.04",
        "--out", s(&stack),
    ]));
    let mut psnr = Vec::new();
    for m in ["physics-tv", "deepir"] {
        let out = d.path().join(m);
        ok(run(&["solve", "--stack", s(&stack), "--method", m, "--transform-kind", "affine", "--seed", "1", "--out", s(&out)]));
        psnr.push(read_json(&out.join("report.json"))["psnr_db"].as_f64().unwrap());
    }
    assert!(psnr[1] > psnr[0], "{psnr:?}");
}

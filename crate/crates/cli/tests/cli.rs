use std::path::Path;
use std::process::{Command, Output};

use slidestitch::imagecore::ImageBuffer;
use slidestitch::stitcher::StitchManifest;
use slidestitch::synthgen::render_slide;

fn slidestitch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slidestitch"))
        .args(args)
        .env_remove("SLIDESTITCH_THREADS")
        .output()
        .expect("spawn slidestitch")
}

fn ok(args: &[&str]) -> String {
    let out = slidestitch(args);
    assert!(
        out.status.success(),
        "slidestitch {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Four paused stops on a 2x2 grid, 16 frames each.
fn four_stop_sweep(dir: &Path) {
    let spec = dir.join("spec.toml");
    std::fs::write(
        &spec,
        "slide_width = 1000\nslide_height = 800\nframe_width = 400\nframe_height = 300\n\
         max_stops = 4\npause_frames = 16\ntravel_frames = 3\nseed = 11\n",
    )
    .unwrap();
    ok(&["synth", "--out", s(&dir.join("sweep")), "--spec", s(&spec)]);
}

#[test]
fn invalid_config_key_exits_with_config_code_and_names_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[stitch]\nbatch_sise = 4\n").unwrap();
    let out = slidestitch(&["--config", s(&cfg), "config"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));
}

#[test]
fn missing_frames_directory_is_an_io_or_input_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = slidestitch(&["extract", "--frames", s(&dir.path().join("nope")), "--out", s(dir.path())]);
    let code = out.status.code().unwrap();
    assert!(code == 4 || code == 5, "code {code}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(slidestitch(&["stitch"]).status.code(), Some(2));
    assert_eq!(slidestitch(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn metrics_of_an_image_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    render_slide(96, 64, 3).save(&a).unwrap();
    let out = ok(&["--json", "metrics", "--ref", s(&a), "--test", s(&a)]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["result"]["report"]["ssim_mean"].as_f64(), Some(1.0));
    assert_eq!(v["result"]["report"]["psnr_mean"].as_f64(), Some(100.0));

    let table = ok(&["metrics", "--ref", s(&a), "--test", s(&a), "--label", "self"]);
    assert!(table.contains("| self  | 1.000 ± 0.000 | 100.000 ± 0.000 |"), "{table}");
}

#[test]
fn tile_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    render_slide(700, 300, 5).save(&img).unwrap();
    let pyr = dir.path().join("pyr");
    ok(&["tile", "--image", s(&img), "--out", s(&pyr), "--tile-size", "128"]);
    let out = ok(&["tile", "--verify", "--out", s(&pyr), "--image", s(&img)]);
    assert!(out.contains("10 levels"), "{out}");

    std::fs::remove_file(pyr.join("9/0_0.png")).unwrap();
    let out = slidestitch(&["tile", "--verify", "--out", s(&pyr)]);
    assert_eq!(out.status.code(), Some(8));
}

#[test]
fn tile_without_image_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(slidestitch(&["tile", "--out", s(dir.path())]).status.code(), Some(3));
}

#[test]
fn naive_and_recursive_stitch_agree() {
    let dir = tempfile::tempdir().unwrap();
    four_stop_sweep(dir.path());
    let stills = dir.path().join("stills");
    ok(&["extract", "--frames", s(&dir.path().join("sweep")), "--out", s(&stills)]);

    let rec = dir.path().join("rec");
    let naive = dir.path().join("naive");
    ok(&["stitch", "--frames", s(&stills), "--out", s(&rec), "--batch-size", "2"]);
    ok(&["stitch", "--frames", s(&stills), "--out", s(&naive), "--naive"]);

    let load = |d: &Path| -> StitchManifest {
        serde_json::from_str(&std::fs::read_to_string(d.join("stitch.json")).unwrap()).unwrap()
    };
    let (a, b) = (load(&rec), load(&naive));
    assert_eq!(a.frames.len(), 4);
    assert_eq!(b.frames.len(), 4);
    // Compare positions relative to the first frame, since each canvas has its own origin.
    let rel = |m: &StitchManifest, i: usize| {
        let t0 = m.transform_of(0).unwrap().invert().unwrap();
        t0.compose(m.transform_of(i).unwrap()).map_corners(400, 300)
    };
    for i in 0..4 {
        for (p, q) in rel(&a, i).iter().zip(rel(&b, i).iter()) {
            let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
            assert!(d < 5.0, "frame {i}: corners differ by {d:.2} px");
        }
    }
}

#[test]
fn identical_frames_yield_that_frame() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    let img = render_slide(320, 240, 9);
    for i in 0..30 {
        img.save(frames.join(format!("f{i:03}.png"))).unwrap();
    }
    let out = dir.path().join("out");
    ok(&["run", "--frames", s(&frames), "--out", s(&out)]);
    let mosaic = ImageBuffer::load(out.join("mosaic.png")).unwrap();
    assert_eq!((mosaic.width(), mosaic.height()), (320, 240));
    assert_eq!(mosaic.data(), img.data());
}

#[test]
fn end_to_end_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    four_stop_sweep(dir.path());
    let sweep = dir.path().join("sweep");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "--frames", s(&sweep), "--out", s(&a), "--seed", "5"]);
    ok(&["--threads", "1", "run", "--frames", s(&sweep), "--out", s(&b), "--seed", "5"]);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "manifest.json"), read(&b, "manifest.json"));
    assert_eq!(read(&a, "mosaic.png"), read(&b, "mosaic.png"));
    assert_eq!(read(&a, "pyramid/pyramid.json"), read(&b, "pyramid/pyramid.json"));
}

#[test]
fn json_logs_are_one_object_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_slidestitch"))
        .args(["--json", "synth", "--out", s(&dir.path().join("sw")), "--max-stops", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["event"].is_string());
    }
    let v: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(v["result"]["stops"].as_u64(), Some(2));
}

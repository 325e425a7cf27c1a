//! End-to-end runs of the `scenecap` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scenecap::commands::{FitResult, Report};
use scenecap::config::PosesFile;
use scenecap::formats::{obj, ply};
use scenecap::manifest::SequenceManifest;
use scenecap_core::body::synthetic_body;
use scenecap_core::math::Vec3;
use scenecap_core::metrics::PersonPose;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scenecap"));
    c.env_remove(scenecap::THREADS_ENV);
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn ok(c: &mut Command) -> String {
    let o = run(c);
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(c: &mut Command) -> i32 {
    run(c).status.code().expect("exit code")
}

fn json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn synth(dir: &Path, preset: &str, frames: usize, seed: u64) -> String {
    ok(bin().args(["synth", "--preset", preset, "--frames", &frames.to_string(), "--seed", &seed.to_string(), "--output"]).arg(dir))
}

fn checksum(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.strip_prefix("sha256 ")).unwrap().to_string()
}

/// A short fit so the CLI paths stay quick.
fn quick_config(dir: &Path) -> PathBuf {
    let p = dir.join("quick.json");
    std::fs::write(&p, r#"{"solver": {"stage1_iters": 4, "stage2_iters": 4, "batch_frames": 3}}"#).unwrap();
    p
}

#[test]
fn preset_synth_writes_full_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(bin().args(["synth", "--preset", "three-person-plane", "--output"]).arg(d.path()));
    assert!(out.contains("100 frames, 3 persons"));
    let m: SequenceManifest = json(&d.path().join("sequence.json"));
    assert_eq!(m.num_frames, 100);
    assert_eq!(m.frames.len(), 100);
    let gt: PosesFile = json(&d.path().join("poses.json"));
    assert_eq!(gt.frames.len(), 100);
    assert!(gt.frames.iter().all(|f| f.len() <= 3));
    let ids: std::collections::BTreeSet<u32> = gt.frames.iter().flatten().map(|p| p.track_id).collect();
    assert_eq!(ids.len(), 3);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let d = tempfile::tempdir().unwrap();
    let a = checksum(&synth(&d.path().join("a"), "children", 6, 4));
    let b = checksum(&synth(&d.path().join("b"), "children", 6, 4));
    let c = checksum(&synth(&d.path().join("c"), "children", 6, 5));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn invalid_scenarios_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let mut spec = scenecap_core::synth::Preset::ThreePersonPlane.spec();
    spec.persons.clear();
    let p = d.path().join("empty.json");
    std::fs::write(&p, serde_json::to_vec(&spec).unwrap()).unwrap();
    assert_eq!(code(bin().args(["synth", "--spec"]).arg(&p).arg("--output").arg(d.path().join("o"))), 2);
    assert_eq!(code(bin().args(["synth", "--preset", "nope", "--output"]).arg(d.path())), 2);
    assert_eq!(code(bin().args(["synth", "--output"]).arg(d.path())), 2);
    assert_eq!(code(bin().args(["synth", "--preset", "children", "--frames", "0", "--output"]).arg(d.path())), 2);
}

#[test]
fn fit_writes_results_and_ablation_tag() {
    let d = tempfile::tempdir().unwrap();
    let scene = d.path().join("scene");
    synth(&scene, "walking-on-plane", 8, 0);
    let cfg = quick_config(d.path());
    let out = d.path().join("fit");
    let stdout = ok(bin().arg("fit").arg(&scene).arg("--config").arg(&cfg).args(["--disable", "e_scale", "--disable", "slip", "--output"]).arg(&out));
    assert!(stdout.contains("w/o e_scale,e_slip"));
    for f in ["state.json", "poses.json", "scene.ply", "trace.jsonl", "static_depth.pfm"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let fit: FitResult = json(&out.join("state.json"));
    assert_eq!(fit.ablation.disabled, vec!["e_scale", "e_slip"]);
    assert_eq!(fit.ablation.tag, "w/o e_scale,e_slip");
    assert_eq!(fit.state.persons.len(), 2);
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 8);
    for l in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["terms"]["scale"].as_f64() == Some(0.0));
    }
    let poses: PosesFile = json(&out.join("poses.json"));
    assert_eq!(poses.frames.len(), 8);
    let cloud = ply::load(&out.join("scene.ply")).unwrap();
    assert!(!cloud.vertices.is_empty() && cloud.faces.is_empty());
}

#[test]
fn fit_usage_errors_exit_2_and_runtime_errors_exit_3() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(bin().arg("fit").arg(d.path().join("missing")).arg("--output").arg(d.path().join("o"))), 2);
    let scene = d.path().join("scene");
    synth(&scene, "children", 6, 0);
    let cfg = quick_config(d.path());
    assert_eq!(code(bin().arg("fit").arg(&scene).args(["--disable", "e_gravity", "--output"]).arg(d.path().join("o"))), 2);
    assert_eq!(code(bin().arg("fit").arg(&scene).args(["--batch-frames", "0", "--output"]).arg(d.path().join("o"))), 2);
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, r#"{"solver": {"lr0": -1.0}}"#).unwrap();
    assert_eq!(code(bin().arg("fit").arg(&scene).arg("--config").arg(&bad).arg("--output").arg(d.path().join("o"))), 2);
    // Output path occupied by a file: the fit itself is fine, writing fails.
    let blocker = d.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert_eq!(code(bin().arg("fit").arg(&scene).arg("--config").arg(&cfg).arg("--output").arg(&blocker)), 3);
}

#[test]
fn thread_count_does_not_change_results() {
    let d = tempfile::tempdir().unwrap();
    let scene = d.path().join("scene");
    synth(&scene, "children", 6, 1);
    let cfg = quick_config(d.path());
    let fit = |name: &str, threads: Option<&str>, env: Option<&str>| -> PathBuf {
        let out = d.path().join(name);
        let mut c = bin();
        c.arg("fit").arg(&scene).arg("--config").arg(&cfg).arg("--output").arg(&out);
        if let Some(t) = threads {
            c.args(["--threads", t]);
        }
        if let Some(e) = env {
            c.env(scenecap::THREADS_ENV, e);
        }
        ok(&mut c);
        out
    };
    let a = fit("a", Some("1"), None);
    let b = fit("b", Some("2"), Some("1"));
    let c = fit("c", None, Some("3"));
    for f in ["state.json", "trace.jsonl"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap());
        assert_eq!(x, std::fs::read(c.join(f)).unwrap());
    }
    let mut bad = bin();
    bad.arg("fit").arg(&scene).arg("--output").arg(d.path().join("x")).env(scenecap::THREADS_ENV, "many");
    assert_eq!(code(&mut bad), 2);
    assert_eq!(code(bin().arg("fit").arg(&scene).args(["--threads", "0", "--output"]).arg(d.path().join("x"))), 2);
}

fn skeleton(root: Vec3, id: u32) -> PersonPose {
    PersonPose {
        track_id: id,
        joints: (0..24).map(|j| root + Vec3::new(0.01 * j as f64, -0.05 * j as f64, 0.0)).collect(),
        root: 0,
    }
}

fn write_poses(p: &Path, f: &PosesFile) {
    std::fs::write(p, serde_json::to_vec(f).unwrap()).unwrap();
}

#[test]
fn eval_reports_and_rejects_mismatches() {
    let d = tempfile::tempdir().unwrap();
    let gt = PosesFile {
        frames: (0..4)
            .map(|t| vec![skeleton(Vec3::new(-0.5, 0.0, 3.0 + 0.1 * t as f64), 0), skeleton(Vec3::new(0.7, 0.0, 4.0), 1)])
            .collect(),
    };
    let gp = d.path().join("gt.json");
    write_poses(&gp, &gt);

    // Identical prediction.
    let out = d.path().join("same");
    ok(bin().arg("eval").arg(&gp).arg(&gp).arg("--output").arg(&out));
    let r: Report = json(&out.join("report.json"));
    assert_eq!(r.mrpe_mm, Some(0.0));
    assert_eq!(r.pck3d, Some(100.0));
    assert_eq!(r.ap_root, Some(100.0));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));
    assert!(csv.contains("mrpe_mm,0\n"));

    // Track 1 misplaced by 40 cm: half of the predictions hit.
    let mut half = gt.clone();
    for f in &mut half.frames {
        for j in &mut f[1].joints {
            *j += Vec3::new(0.4, 0.0, 0.0);
        }
    }
    let hp = d.path().join("half.json");
    write_poses(&hp, &half);
    let out = d.path().join("half");
    ok(bin().arg("eval").arg(&hp).arg(&gp).arg("--output").arg(&out));
    let r: Report = json(&out.join("report.json"));
    assert!((r.ap_root.unwrap() - 50.0).abs() < 1e-9);
    assert!((r.mrpe_mm.unwrap() - 200.0).abs() < 1e-6);

    // Empty ground truth: nothing to score.
    let empty = PosesFile { frames: vec![vec![]; 4] };
    let ep = d.path().join("empty.json");
    write_poses(&ep, &empty);
    let out = d.path().join("empty");
    ok(bin().arg("eval").arg(&ep).arg(&ep).arg("--output").arg(&out));
    let r: Report = json(&out.join("report.json"));
    assert_eq!((r.mrpe_mm, r.pck3d, r.ap_root, r.jitter_mm), (None, None, None, None));
    let raw: serde_json::Value = json(&out.join("report.json"));
    assert!(raw["mrpe_mm"].is_null());

    // A track id on one side only.
    let mut other = gt.clone();
    other.frames[2][1].track_id = 7;
    let op = d.path().join("other.json");
    write_poses(&op, &other);
    let o = run(bin().arg("eval").arg(&op).arg(&gp));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unmatched tracks"));
    // Different frame counts.
    let short = PosesFile { frames: gt.frames[..3].to_vec() };
    let sp = d.path().join("short.json");
    write_poses(&sp, &short);
    assert_eq!(code(bin().arg("eval").arg(&sp).arg(&gp)), 2);
}

#[test]
fn export_meshes_reload_within_float32() {
    let d = tempfile::tempdir().unwrap();
    let scene = d.path().join("scene");
    synth(&scene, "walking-on-plane", 5, 0);
    let cfg = quick_config(d.path());
    let fit = d.path().join("fit");
    ok(bin().arg("fit").arg(&scene).arg("--config").arg(&cfg).arg("--output").arg(&fit));
    let state: FitResult = json(&fit.join("state.json"));
    let model = synthetic_body();
    let vn = model.num_vertices();

    for format in ["ply", "obj"] {
        let out = d.path().join(format!("export_{format}"));
        let stdout = ok(bin().arg("export").arg(&fit).args(["--format", format, "--output"]).arg(&out));
        let present: usize = state.state.presence.iter().flatten().filter(|p| **p).count();
        assert!(stdout.starts_with(&format!("{present} meshes")));
        for t in 0..5 {
            for (n, id) in state.track_ids.iter().enumerate() {
                if !state.state.presence[t][n] {
                    continue;
                }
                let path = out.join("meshes").join(format!("frame_{t:04}_track_{id}.{format}"));
                let mesh = if format == "ply" { ply::load(&path).unwrap() } else { obj::load(&path).unwrap() };
                assert_eq!(mesh.vertices.len(), vn);
                assert_eq!(mesh.faces, model.faces());
                let p = &state.state.persons[n];
                let sk = model.skin(&p.theta[t], &p.beta).unwrap();
                for (v, m) in sk.vertices.iter().zip(&mesh.vertices) {
                    let w = *v * p.scale + p.gamma[t];
                    for k in 0..3 {
                        assert_eq!(m[k], w.0[k] as f32);
                    }
                }
            }
        }
        assert!(out.join("skeleton.json").is_file());
        assert!(out.join("scene.ply").is_file());
    }
    assert_eq!(code(bin().arg("export").arg(&fit).args(["--format", "fbx", "--output"]).arg(d.path().join("x"))), 2);
    assert_eq!(code(bin().arg("export").arg(d.path().join("nothing")).arg("--output").arg(d.path().join("x"))), 2);
}

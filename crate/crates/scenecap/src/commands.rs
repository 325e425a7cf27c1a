//! The four pipeline commands behind the binary.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scenecap_core::body::BodyModel;
use scenecap_core::energy::{joints_all, pose_all, OptimState, Problem, Term};
use scenecap_core::metrics::{ap_root, correspond, jitter, mpjpe, mrpe, pck3d, Correspondence, PersonPose};
use scenecap_core::observations::assemble;
use scenecap_core::scene::ScenePointCloud;
use scenecap_core::solver::{build_scene, initialize, run, TraceEntry};
use scenecap_core::synth::{generate, ScenarioSpec};

use crate::config::{ablation, PosesFile, RunConfig};
use crate::error::{create_dir, read_json, write, write_json, CliError, Result};
use crate::formats::{obj, pfm, ply, png_io};
use crate::manifest::{load_sequence, write_sequence};
use crate::model_io::model_or_default;

pub const STATE_FILE: &str = "state.json";
pub const POSES_FILE: &str = "poses.json";
pub const SCENE_FILE: &str = "scene.ply";
pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub name: String,
    pub frames: usize,
    pub persons: usize,
    pub manifest: PathBuf,
    /// SHA-256 over the manifest and every frame file, in listing order.
    pub checksum: String,
}

/// Generates a scenario and writes its observation sequence, ground-truth
/// state and poses, and the scenario description into `out`.
pub fn cmd_synth(spec: &ScenarioSpec, model: &BodyModel, out: &Path) -> Result<SynthSummary> {
    spec.validate().map_err(|e| CliError::invalid("scenario", e))?;
    let sc = generate(spec, model).map_err(|e| CliError::invalid("scenario", e))?;
    create_dir(out)?;
    let manifest = write_sequence(out, spec.camera, spec.frame_rate, &sc.frames)?;
    write_json(&out.join("scenario.json"), spec)?;
    write_json(&out.join("truth.json"), &sc.truth)?;
    write_json(&out.join(POSES_FILE), &PosesFile { frames: sc.gt_poses.clone() })?;
    pfm::save(&out.join("background_depth.pfm"), &sc.background_depth)?;
    png_io::save_depth_mm(&out.join("background_depth.png"), &sc.background_depth)?;

    let m: crate::manifest::SequenceManifest = read_json(&manifest)?;
    let mut h = Sha256::new();
    h.update(crate::error::read(&manifest)?);
    for f in &m.frames {
        for p in [&f.disparity, &f.masks, &f.joints, &f.poses] {
            h.update(crate::error::read(&out.join(p))?);
        }
    }
    Ok(SynthSummary {
        name: spec.name.clone(),
        frames: spec.frames,
        persons: spec.persons.len(),
        manifest,
        checksum: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Inputs of one fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    /// `sequence.json` or its directory.
    pub manifest: PathBuf,
    /// Body-model container; the built-in synthetic body when absent.
    pub model: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: Option<u64>,
    /// Terms switched off in addition to those listed in the config.
    pub disable: Vec<Term>,
    pub batch_frames: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// `full`, or `w/o` followed by the disabled terms.
    pub tag: String,
    pub disabled: Vec<String>,
}

/// Contents of `state.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub ablation: Ablation,
    pub seed: u64,
    pub frame_rate: f64,
    /// Track id of each optimized person, in state order.
    pub track_ids: Vec<u32>,
    pub final_energy: f64,
    pub events: Vec<String>,
    pub state: OptimState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub output: PathBuf,
    pub iterations: usize,
    pub persons: usize,
    pub frames: usize,
    pub scene_points: usize,
    pub ablation: Ablation,
}

/// Predicted joints of every present person, in `poses.json` layout.
pub fn predicted_poses(model: &BodyModel, st: &OptimState, track_ids: &[u32]) -> Result<PosesFile> {
    let joints = joints_all(model, st).map_err(|e| CliError::core("posing the result", e))?;
    let frames = joints
        .into_iter()
        .map(|row| {
            row.into_iter()
                .enumerate()
                .filter_map(|(n, j)| {
                    j.map(|joints| PersonPose {
                        track_id: track_ids[n],
                        joints,
                        root: 0,
                    })
                })
                .collect()
        })
        .collect();
    Ok(PosesFile { frames })
}

fn scene_mesh(cloud: &ScenePointCloud) -> ply::PlyMesh {
    ply::PlyMesh::from_points(&cloud.points, &[])
}

/// Fits the sequence and writes `state.json`, `poses.json`, `scene.ply`,
/// `static_depth.pfm` and the streamed `trace.jsonl` into the output
/// directory.
pub fn cmd_fit(run_manifest: &RunManifest) -> Result<FitSummary> {
    let rm = run_manifest;
    let mut cfg = match &rm.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = rm.seed {
        cfg.solver.seed = s;
    }
    if let Some(b) = rm.batch_frames {
        cfg.solver.batch_frames = b;
    }
    cfg.solver.validate().map_err(|e| CliError::invalid("solver config", e))?;
    cfg.weights.validate().map_err(|e| CliError::invalid("energy weights", e))?;
    let mut disabled = cfg.disabled_terms()?;
    disabled.extend(&rm.disable);
    let (terms, names) = ablation(&disabled);
    let ablation = Ablation {
        tag: if names.is_empty() { "full".into() } else { format!("w/o {}", names.join(",")) },
        disabled: names.iter().map(|s| s.to_string()).collect(),
    };

    let model = model_or_default(rm.model.as_deref())?;
    let (m, frames) = load_sequence(&rm.manifest)?;
    cfg.problem.frame_rate = m.frame_rate;
    let seq = assemble(frames, &m.camera, Some(&model), model.num_betas(), &cfg.observations)
        .map_err(|e| CliError::invalid("observations", e))?;
    let problem = Problem::new(&model, &seq, m.camera, cfg.problem).map_err(|e| CliError::invalid("problem", e))?;
    let init = initialize(&problem, &cfg.solver).map_err(|e| CliError::core("initialization", e))?;

    let out = create_dir(&rm.output)?;
    let trace_path = out.join(TRACE_FILE);
    let file = std::fs::File::create(&trace_path).map_err(|e| CliError::output(&trace_path, e))?;
    let mut trace = std::io::BufWriter::new(file);
    let mut trace_err: Option<std::io::Error> = None;
    let mut last: Option<TraceEntry> = None;
    let result = run(&problem, init, &cfg.weights, &cfg.solver, terms, |e| {
        if trace_err.is_none() {
            let line = serde_json::to_string(e).expect("trace entries serialize");
            if let Err(err) = writeln!(trace, "{line}") {
                trace_err = Some(err);
            }
        }
        last = Some(e.clone());
    });
    if let Err(err) = trace.flush() {
        trace_err.get_or_insert(err);
    }
    if let Some(err) = trace_err {
        return Err(CliError::output(&trace_path, err));
    }
    let output = result.map_err(|e| {
        let detail = last.as_ref().map_or(String::from("before the first iteration"), |l| {
            let terms: Vec<String> = Term::ALL.iter().map(|t| format!("{}={:.6e}", t.name(), l.terms.get(*t))).collect();
            format!("after iteration {} ({})", l.iter, terms.join(" "))
        });
        CliError::runtime(format!("optimization failed {detail}: {e}"))
    })?;

    let (static_depth, cloud) = match (output.static_depth, output.cloud) {
        (Some(d), Some(c)) => (Some(d), Some(c)),
        _ => match build_scene(&problem, &output.state, &cfg.solver.cloud) {
            Ok((d, c)) => (Some(d), Some(c)),
            Err(_) => (None, None),
        },
    };
    let scene_points = cloud.as_ref().map_or(0, |c| c.len());
    ply::save(&out.join(SCENE_FILE), &cloud.as_ref().map(scene_mesh).unwrap_or_default())?;
    if let Some(d) = &static_depth {
        pfm::save(&out.join("static_depth.pfm"), d)?;
    }
    write_json(&out.join(POSES_FILE), &predicted_poses(&model, &output.state, &seq.track_ids)?)?;
    let fit = FitResult {
        ablation: ablation.clone(),
        seed: cfg.solver.seed,
        frame_rate: m.frame_rate,
        track_ids: seq.track_ids.clone(),
        final_energy: last.as_ref().map_or(f64::NAN, |l| l.total),
        events: output.events,
        state: output.state,
    };
    write_json(&out.join(STATE_FILE), &fit)?;
    Ok(FitSummary {
        output: out,
        iterations: cfg.solver.stage1_iters + cfg.solver.stage2_iters,
        persons: seq.num_persons(),
        frames: seq.num_frames(),
        scene_points,
        ablation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Joint distance threshold of 3DPCK, meters.
    pub pck_threshold: f64,
    /// Root distance threshold of AP, meters.
    pub ap_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pck_threshold: 0.15,
            ap_threshold: 0.25,
        }
    }
}

/// Metric values; `None` where nothing could be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub frames: usize,
    pub matched: usize,
    /// `(frame, track id)` ground-truth entries without a prediction.
    pub missed: usize,
    pub mrpe_mm: Option<f64>,
    pub mpjpe_mm: Option<f64>,
    pub pck3d: Option<f64>,
    pub ap_root: Option<f64>,
    pub jitter_mm: Option<f64>,
    pub pck_threshold_m: f64,
    pub ap_threshold_m: f64,
}

impl Report {
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("mrpe_mm", self.mrpe_mm),
            ("mpjpe_mm", self.mpjpe_mm),
            ("pck3d", self.pck3d),
            ("ap_root", self.ap_root),
            ("jitter_mm", self.jitter_mm),
        ]
    }
}

/// Scores predictions against ground truth. Persons are matched by track
/// id; a track present on only one side is an error.
pub fn evaluate_poses(pred: &PosesFile, gt: &PosesFile, cfg: &EvalConfig) -> Result<Report> {
    if pred.frames.len() != gt.frames.len() {
        return Err(CliError::usage(format!(
            "prediction has {} frames, ground truth {}",
            pred.frames.len(),
            gt.frames.len()
        )));
    }
    let ids = |f: &PosesFile| -> std::collections::BTreeSet<u32> { f.frames.iter().flatten().map(|p| p.track_id).collect() };
    let (pi, gi) = (ids(pred), ids(gt));
    let only_pred: Vec<u32> = pi.difference(&gi).copied().collect();
    let only_gt: Vec<u32> = gi.difference(&pi).copied().collect();
    if !gi.is_empty() && (!only_pred.is_empty() || !only_gt.is_empty()) {
        return Err(CliError::usage(format!(
            "unmatched tracks: predicted only {only_pred:?}, ground truth only {only_gt:?}"
        )));
    }
    let (pairs, missed) = correspond(&pred.frames, &gt.frames, Correspondence::TrackId).map_err(|e| CliError::invalid("pose files", e))?;
    let opt = |r: scenecap_core::Result<f64>| r.ok();
    let tracks: Vec<Vec<Vec<scenecap_core::math::Vec3>>> = gi
        .iter()
        .map(|id| pairs.iter().filter(|p| p.track_id == *id).map(|p| p.pred.clone()).collect())
        .collect();
    Ok(Report {
        frames: gt.frames.len(),
        matched: pairs.len(),
        missed: missed.len(),
        mrpe_mm: opt(mrpe(&pairs)),
        mpjpe_mm: opt(mpjpe(&pairs)),
        pck3d: opt(pck3d(&pairs, cfg.pck_threshold, true)),
        ap_root: ap_root(&pred.frames, &gt.frames, cfg.ap_threshold).map_err(|e| CliError::invalid("pose files", e))?,
        jitter_mm: jitter(&tracks),
        pck_threshold_m: cfg.pck_threshold,
        ap_threshold_m: cfg.ap_threshold,
    })
}

/// Loads two `poses.json` files, scores them and, with `out`, writes
/// `report.json` and `report.csv`.
pub fn cmd_eval(pred: &Path, gt: &Path, out: Option<&Path>, cfg: &EvalConfig) -> Result<Report> {
    let p: PosesFile = read_json(pred)?;
    let g: PosesFile = read_json(gt)?;
    let report = evaluate_poses(&p, &g, cfg)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("report.json"), &report)?;
        let path = dir.join("report.csv");
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| CliError::output(&path, e);
        w.write_record(["metric", "value"]).map_err(fail)?;
        for (k, v) in report.rows() {
            w.write_record([k.to_string(), v.map(|v| v.to_string()).unwrap_or_default()]).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::output(&path, e))?;
        write(&path, &bytes)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Ply,
    Obj,
}

impl MeshFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ply" => Ok(MeshFormat::Ply),
            "obj" => Ok(MeshFormat::Obj),
            _ => Err(CliError::usage(format!("unknown export format '{s}', expected ply or obj"))),
        }
    }
    fn extension(self) -> &'static str {
        match self {
            MeshFormat::Ply => "ply",
            MeshFormat::Obj => "obj",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub meshes: Vec<PathBuf>,
    pub skeleton: PathBuf,
    pub scene: Option<PathBuf>,
}

/// Writes one posed mesh per present `(t, n)` under `out/meshes`, the
/// skeletons as `out/skeleton.json` and a copy of the scene cloud.
pub fn cmd_export(results: &Path, format: MeshFormat, model: &BodyModel, out: &Path) -> Result<ExportSummary> {
    let state_path = results.join(STATE_FILE);
    if !state_path.is_file() {
        return Err(CliError::usage(format!("{}: results not found", state_path.display())));
    }
    let fit: FitResult = read_json(&state_path)?;
    fit.state.validate().map_err(|e| CliError::invalid("state", e))?;
    if fit.track_ids.len() != fit.state.persons.len() {
        return Err(CliError::input(&state_path, "track id count differs from person count"));
    }
    let mesh_dir = create_dir(&out.join("meshes"))?;
    let posed = pose_all(model, &fit.state).map_err(|e| CliError::invalid("state does not fit the body model", e))?;
    let nn = fit.state.persons.len();
    let mut meshes = Vec::new();
    for (i, p) in posed.iter().enumerate() {
        let Some(p) = p else { continue };
        let (t, n) = (i / nn, i % nn);
        let mesh = ply::PlyMesh::from_points(&p.world, model.faces());
        let path = mesh_dir.join(format!("frame_{t:04}_track_{}.{}", fit.track_ids[n], format.extension()));
        match format {
            MeshFormat::Ply => ply::save(&path, &mesh)?,
            MeshFormat::Obj => obj::save(&path, &mesh)?,
        }
        meshes.push(path);
    }
    let skeleton = out.join("skeleton.json");
    #[derive(Serialize)]
    struct Skeleton<'a> {
        joint_names: Vec<&'a str>,
        parents: &'a [Option<usize>],
        frames: Vec<Vec<PersonPose>>,
    }
    let poses = predicted_poses(model, &fit.state, &fit.track_ids)?;
    write_json(
        &skeleton,
        &Skeleton {
            joint_names: scenecap_core::body::JOINT_NAMES.to_vec(),
            parents: model.parents(),
            frames: poses.frames,
        },
    )?;
    let scene_src = results.join(SCENE_FILE);
    let scene = if scene_src.is_file() {
        let dst = out.join(SCENE_FILE);
        if dst != scene_src {
            std::fs::copy(&scene_src, &dst).map_err(|e| CliError::output(&dst, e))?;
        }
        Some(dst)
    } else {
        None
    };
    Ok(ExportSummary { meshes, skeleton, scene })
}

//! Body-model container: `model.json` plus raw little-endian blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scenecap_core::body::{BodyModel, BodyModelData};
use scenecap_core::math::Vec3;

use crate::error::{read, read_json, write, write_json, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub num_vertices: usize,
    pub num_betas: usize,
    pub num_joints: usize,
    pub num_eval_joints: usize,
    pub num_faces: usize,
    pub joint_names: Vec<String>,
    /// Parent of each joint, `null` for the root.
    pub parents: Vec<Option<usize>>,
    pub blobs: Vec<Blob>,
}

/// One array file with its row-major shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

const OPTIONAL: &[&str] = &["pose_dirs"];

fn f32_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect()
}

/// Writes `dir/model.json` and the blobs.
pub fn save_model(dir: &Path, model: &BodyModel) -> Result<()> {
    crate::error::create_dir(dir)?;
    let d = model.data();
    let (vn, k, b) = (d.template.len(), d.parents.len(), d.num_betas);
    let mut blobs = vec![
        ("template", "f32", vec![vn, 3], f32_bytes(&d.template.iter().flat_map(|v| v.0).collect::<Vec<_>>())),
        ("shape_dirs", "f32", vec![vn, 3, b], f32_bytes(&d.shape_dirs)),
        ("skin_weights", "f32", vec![vn, k], f32_bytes(&d.skin_weights)),
        ("J_skel", "f32", vec![k, vn], f32_bytes(&d.joint_regressor_skeleton)),
        ("J_eval", "f32", vec![d.num_eval_joints, vn], f32_bytes(&d.joint_regressor_eval)),
        (
            "faces",
            "u32",
            vec![d.faces.len(), 3],
            d.faces.iter().flatten().flat_map(|i| i.to_le_bytes()).collect(),
        ),
    ];
    if let Some(p) = &d.pose_dirs {
        blobs.push(("pose_dirs", "f32", vec![vn, 3, 9 * (k - 1)], f32_bytes(p)));
    }
    let mut header = ModelHeader {
        num_vertices: vn,
        num_betas: b,
        num_joints: k,
        num_eval_joints: d.num_eval_joints,
        num_faces: d.faces.len(),
        joint_names: d.joint_names.clone(),
        parents: d.parents.clone(),
        blobs: Vec::new(),
    };
    for (name, dtype, shape, bytes) in blobs {
        let file = format!("{name}.{dtype}");
        write(&dir.join(&file), &bytes)?;
        header.blobs.push(Blob {
            name: name.into(),
            file,
            dtype: dtype.into(),
            shape,
        });
    }
    write_json(&dir.join("model.json"), &header)
}

/// Rows stored in single precision sum to one only up to rounding;
/// restore exact normalization before validation.
fn renormalize_rows(m: &mut [f64], cols: usize) {
    for row in m.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() < 1e-4 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Loads a container written by [`save_model`] or converted from another
/// LBS model with the same layout.
pub fn load_model(dir: &Path) -> Result<BodyModel> {
    let json = dir.join("model.json");
    let h: ModelHeader = read_json(&json)?;
    let bad = |msg: String| CliError::input(&json, msg);
    let (vn, k, b, j) = (h.num_vertices, h.num_joints, h.num_betas, h.num_eval_joints);
    if h.parents.len() != k {
        return Err(bad(format!("{} parents for {k} joints", h.parents.len())));
    }
    let expected = |name: &str| -> Option<Vec<usize>> {
        Some(match name {
            "template" => vec![vn, 3],
            "shape_dirs" => vec![vn, 3, b],
            "skin_weights" => vec![vn, k],
            "J_skel" => vec![k, vn],
            "J_eval" => vec![j, vn],
            "faces" => vec![h.num_faces, 3],
            "pose_dirs" => vec![vn, 3, 9 * k.saturating_sub(1)],
            _ => return None,
        })
    };
    let blob = |name: &str| -> Result<Option<Vec<u8>>> {
        let Some(bl) = h.blobs.iter().find(|bl| bl.name == name) else {
            return if OPTIONAL.contains(&name) { Ok(None) } else { Err(bad(format!("missing blob {name}"))) };
        };
        let want = expected(name).unwrap_or_default();
        if bl.shape != want {
            return Err(bad(format!("blob {name} has shape {:?}, expected {want:?}", bl.shape)));
        }
        let want_dtype = if name == "faces" { "u32" } else { "f32" };
        if bl.dtype != want_dtype {
            return Err(bad(format!("blob {name} must be {want_dtype}")));
        }
        let bytes = read(&dir.join(&bl.file))?;
        let n: usize = bl.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(bad(format!("blob {name} holds {} bytes, expected {}", bytes.len(), 4 * n)));
        }
        Ok(Some(bytes))
    };
    let floats = |name: &str| -> Result<Option<Vec<f64>>> {
        Ok(blob(name)?.map(|b| {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }))
    };
    let req = |name: &str| -> Result<Vec<f64>> { floats(name).map(Option::unwrap_or_default) };

    let template: Vec<Vec3> = req("template")?.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    let mut skin_weights = req("skin_weights")?;
    renormalize_rows(&mut skin_weights, k);
    let mut joint_regressor_skeleton = req("J_skel")?;
    renormalize_rows(&mut joint_regressor_skeleton, vn);
    let mut joint_regressor_eval = req("J_eval")?;
    renormalize_rows(&mut joint_regressor_eval, vn);
    let faces: Vec<[u32; 3]> = blob("faces")?
        .unwrap_or_default()
        .chunks_exact(12)
        .map(|c| {
            let u = |i: usize| u32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
            [u(0), u(4), u(8)]
        })
        .collect();
    let data = BodyModelData {
        template,
        shape_dirs: req("shape_dirs")?,
        num_betas: b,
        skin_weights,
        parents: h.parents.clone(),
        joint_regressor_skeleton,
        joint_regressor_eval,
        num_eval_joints: j,
        faces,
        pose_dirs: floats("pose_dirs")?,
        joint_names: h.joint_names.clone(),
    };
    BodyModel::new(data).map_err(|e| CliError::invalid(&json.display().to_string(), e))
}

/// The model at `dir`, or the built-in synthetic body.
pub fn model_or_default(dir: Option<&Path>) -> Result<BodyModel> {
    match dir {
        Some(d) => load_model(d),
        None => Ok(scenecap_core::body::synthetic_body()),
    }
}

//! Wavefront OBJ triangle meshes (positions and faces only).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{read, write, CliError, Result};
use crate::formats::ply::PlyMesh;

pub fn encode(mesh: &PlyMesh) -> String {
    let mut s = String::with_capacity(32 * (mesh.vertices.len() + mesh.faces.len()));
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Accepts `v` and triangular `f` records; face entries may carry
/// `/vt/vn` suffixes and negative (relative) indices.
pub fn decode(text: &str) -> std::result::Result<PlyMesh, String> {
    let mut mesh = PlyMesh::default();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f32> = it.take(3).map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| format!("line {}: bad vertex", ln + 1))?;
                if c.len() != 3 {
                    return Err(format!("line {}: vertex needs three coordinates", ln + 1));
                }
                mesh.vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<i64> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| format!("line {}: bad face", ln + 1))?;
                if idx.len() != 3 {
                    return Err(format!("line {}: only triangles are supported", ln + 1));
                }
                let n = mesh.vertices.len() as i64;
                let mut f = [0u32; 3];
                for (o, i) in f.iter_mut().zip(&idx) {
                    let k = if *i < 0 { n + i } else { i - 1 };
                    if !(0..n).contains(&k) {
                        return Err(format!("line {}: face index out of range", ln + 1));
                    }
                    *o = k as u32;
                }
                mesh.faces.push(f);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn save(path: &Path, mesh: &PlyMesh) -> Result<()> {
    write(path, encode(mesh).as_bytes())
}

pub fn load(path: &Path) -> Result<PlyMesh> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::input(path, e))?;
    decode(&text).map_err(|e| CliError::input(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_float32_exact() {
        let m = PlyMesh {
            vertices: vec![[0.1, -2.5, 3.333_333_3], [1e-7, 0.0, 1.0], [4.0, 5.0, 6.0]],
            faces: vec![[0, 1, 2], [2, 1, 0]],
        };
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn slashes_and_negative_indices() {
        let m = decode("# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 -1//1\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
        assert!(decode("v 0 0 0\nf 1 2 3\n").is_err());
    }
}

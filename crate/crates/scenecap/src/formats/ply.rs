//! Binary little-endian PLY for point clouds and triangle meshes.

use std::path::Path;

use scenecap_core::math::Vec3;

use crate::error::{read, write, CliError, Result};

/// Vertices and triangles as stored on disk (single precision).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyMesh {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyMesh {
    pub fn from_points(points: &[Vec3], faces: &[[u32; 3]]) -> Self {
        PlyMesh {
            vertices: points.iter().map(|p| [p.x() as f32, p.y() as f32, p.z() as f32]).collect(),
            faces: faces.to_vec(),
        }
    }
}

pub fn encode(mesh: &PlyMesh) -> Vec<u8> {
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        mesh.vertices.len()
    );
    if !mesh.faces.is_empty() {
        header += &format!("element face {}\nproperty list uchar int vertex_indices\n", mesh.faces.len());
    }
    header += "end_header\n";
    let mut out = header.into_bytes();
    for v in &mesh.vertices {
        for c in v {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for f in &mesh.faces {
        out.push(3);
        for i in f {
            out.extend_from_slice(&(*i as i32).to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, s: Scalar) -> std::result::Result<f64, String> {
        let end = self.pos + s.size();
        let b = self.bytes.get(self.pos..end).ok_or("unexpected end of data")?;
        self.pos = end;
        Ok(s.read(b))
    }
}

/// Reads binary little-endian files with a `vertex` element carrying
/// `x y z` and an optional `face` element with a `vertex_indices` list.
/// Other elements and properties are skipped.
pub fn decode(bytes: &[u8]) -> std::result::Result<PlyMesh, String> {
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or("missing end_header")?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not UTF-8")?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err("not a PLY file".into());
    }
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => return Err(format!("unsupported format {other}")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| "bad element count")?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, name] => {
                let (c, i) = (Scalar::parse(c).ok_or("bad list type")?, Scalar::parse(i).ok_or("bad list type")?);
                elements.last_mut().ok_or("property before element")?.props.push(Property::List(name.to_string(), c, i));
            }
            ["property", t, name] => {
                let t = Scalar::parse(t).ok_or("bad property type")?;
                elements.last_mut().ok_or("property before element")?.props.push(Property::Scalar(name.to_string(), t));
            }
            _ => return Err(format!("unrecognized header line: {line}")),
        }
    }
    let mut cur = Cursor {
        bytes,
        pos: end + 11,
    };
    let mut mesh = PlyMesh::default();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0f32; 3];
            let mut face = None;
            for p in &el.props {
                match p {
                    Property::Scalar(name, t) => {
                        let v = cur.take(*t)?;
                        if let Some(k) = ["x", "y", "z"].iter().position(|a| a == name) {
                            xyz[k] = v as f32;
                        }
                    }
                    Property::List(name, c, i) => {
                        let n = cur.take(*c)? as usize;
                        let idx: Vec<u32> = (0..n).map(|_| cur.take(*i).map(|v| v as u32)).collect::<std::result::Result<_, _>>()?;
                        if name == "vertex_indices" || name == "vertex_index" {
                            if n != 3 {
                                return Err("only triangles are supported".into());
                            }
                            face = Some([idx[0], idx[1], idx[2]]);
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => mesh.vertices.push(xyz),
                "face" => mesh.faces.extend(face),
                _ => {}
            }
        }
    }
    if mesh.faces.iter().flatten().any(|i| *i as usize >= mesh.vertices.len()) {
        return Err("face index out of range".into());
    }
    Ok(mesh)
}

pub fn save(path: &Path, mesh: &PlyMesh) -> Result<()> {
    write(path, &encode(mesh))
}

pub fn load(path: &Path) -> Result<PlyMesh> {
    decode(&read(path)?).map_err(|e| CliError::input(path, e))
}

//! Differentiable rasterization of triangle meshes into depth maps and soft
//! silhouettes.
//!
//! Depth uses a hard z-buffer with perspective-correct interpolation; the
//! gradient flows through the barycentric coordinates and vertex depths of
//! the winning face, so coverage boundaries carry no gradient.
//!
//! The silhouette aggregates per-face soft coverage
//! `c_f = sigmoid(tau * d_f)` as `1 - prod_f (1 - c_f)`, where `d_f` is the
//! signed pixel distance to face `f` (positive inside). Inside a face only
//! its *open* edges count: an edge shared with a neighbour that lies on the
//! other side of it in the image is an interior seam and is ignored, so the
//! coverage does not dip along internal edges of the projected mesh.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::camera::CameraIntrinsics;
use crate::grid::{Grid, Mask};
use crate::math::{sigmoid, sqrt, Fnv, Vec3};

pub const NO_FACE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RasterConfig {
    /// Silhouette edge sharpness `tau` in inverse pixels.
    pub sharpness: f64,
    /// Faces stop contributing once `tau * |d|` exceeds this.
    pub cutoff: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            sharpness: 8.0,
            cutoff: 20.0,
        }
    }
}

impl RasterConfig {
    fn margin(&self) -> f64 {
        self.cutoff / self.sharpness
    }
}

/// Face adjacency: for edge `e` of face `f` (vertices `f[e] -> f[(e+1)%3]`),
/// the face on the other side, if the edge is shared by exactly two faces.
#[derive(Debug, Clone)]
pub struct MeshTopology {
    neighbors: Vec<[u32; 3]>,
}

impl MeshTopology {
    pub fn new(faces: &[[u32; 3]]) -> Self {
        let mut edges: BTreeMap<(u32, u32), Vec<(u32, usize)>> = BTreeMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                edges.entry((a.min(b), a.max(b))).or_default().push((fi as u32, e));
            }
        }
        let mut neighbors = vec![[NO_FACE; 3]; faces.len()];
        for list in edges.values() {
            if let [(f0, e0), (f1, e1)] = list.as_slice() {
                neighbors[*f0 as usize][*e0] = *f1;
                neighbors[*f1 as usize][*e1] = *f0;
            }
        }
        MeshTopology { neighbors }
    }
}

#[inline]
fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}
#[inline]
fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}
#[inline]
fn perp(r: [f64; 2]) -> [f64; 2] {
    [r[1], -r[0]]
}

struct SegDist {
    dist: f64,
    t: f64,
    closest: [f64; 2],
}

#[inline]
fn point_segment(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> SegDist {
    let ab = sub2(b, a);
    let aq = sub2(q, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((aq[0] * ab[0] + aq[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let closest = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let d = sub2(q, closest);
    SegDist {
        dist: sqrt(d[0] * d[0] + d[1] * d[1]),
        t,
        closest,
    }
}

#[derive(Clone, Copy)]
struct FaceSd {
    /// Signed distance in pixels, `+inf` when inside a face with no open edge.
    d: f64,
    inside: bool,
    edge: usize,
}

/// Signed distance from pixel `q` to projected triangle `p`.
#[inline]
fn face_signed_distance(q: [f64; 2], p: &[[f64; 2]; 3], orient: f64, open: [bool; 3]) -> (FaceSd, [SegDist; 3]) {
    let segs = [
        point_segment(q, p[0], p[1]),
        point_segment(q, p[1], p[2]),
        point_segment(q, p[2], p[0]),
    ];
    let inside = (0..3).all(|e| orient * cross2(sub2(p[(e + 1) % 3], p[e]), sub2(q, p[e])) >= 0.0);
    let mut best = f64::INFINITY;
    let mut edge = 3;
    for e in 0..3 {
        if (!inside || open[e]) && segs[e].dist < best {
            best = segs[e].dist;
            edge = e;
        }
    }
    let d = if inside { best } else { -best };
    (FaceSd { d, inside, edge }, segs)
}

/// Depth, soft silhouette and visibility of one mesh.
#[derive(Debug, Clone)]
pub struct Render {
    /// Nearest-surface depth in meters, 0 where empty.
    pub depth: Grid<f64>,
    pub silhouette: Grid<f64>,
    /// Pixels where this mesh is the front-most surface among all rendered
    /// meshes of the frame; equals the hard coverage until
    /// [`assign_visibility`] runs.
    pub visibility: Mask,
    face: Grid<u32>,
    complement: Grid<f64>,
    projected: Vec<Option<([f64; 2], [Vec3; 2])>>,
    open_edges: Vec<[bool; 3]>,
    orientation: Vec<f64>,
    /// Vertices at or behind the image plane; faces touching them are skipped.
    pub behind_vertices: usize,
    signature: u64,
}

impl Render {
    pub fn coverage(&self) -> Mask {
        self.face.map(|f| *f != NO_FACE)
    }
    pub fn is_empty(&self) -> bool {
        self.face.data().iter().all(|f| *f == NO_FACE)
    }
    /// Hash of every discrete decision the rasterizer made (z-buffer
    /// winners, inside/outside and nearest-edge choices, seam
    /// classification). Two renders with equal signatures lie on the same
    /// smooth piece of the render function.
    pub fn signature(&self) -> u64 {
        self.signature
    }
}

/// Renders `vertices` (camera frame) with `cam`.
pub fn render(
    cam: &CameraIntrinsics,
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    topo: &MeshTopology,
    cfg: &RasterConfig,
) -> Render {
    let (w, h) = (cam.width, cam.height);
    let projected: Vec<_> = vertices.iter().map(|v| cam.project_with_jacobian(v)).collect();
    let behind_vertices = projected.iter().filter(|p| p.is_none()).count();

    let mut orientation = vec![0.0; faces.len()];
    let mut tri2d = vec![None; faces.len()];
    for (fi, f) in faces.iter().enumerate() {
        if let (Some(a), Some(b), Some(c)) = (
            projected[f[0] as usize],
            projected[f[1] as usize],
            projected[f[2] as usize],
        ) {
            let p = [a.0, b.0, c.0];
            let area2 = cross2(sub2(p[1], p[0]), sub2(p[2], p[0]));
            if area2.abs() > 1e-12 {
                orientation[fi] = area2.signum();
                tri2d[fi] = Some(p);
            }
        }
    }

    let mut sig = Fnv::new();
    let mut open_edges = vec![[true; 3]; faces.len()];
    for (fi, f) in faces.iter().enumerate() {
        let Some(p) = tri2d[fi] else { continue };
        for e in 0..3 {
            let nb = topo.neighbors[fi][e];
            if nb == NO_FACE {
                continue;
            }
            let Some(q) = tri2d[nb as usize] else { continue };
            let (a, b) = (f[e], f[(e + 1) % 3]);
            let opp = faces[nb as usize].iter().position(|v| *v != a && *v != b).unwrap();
            let ab = sub2(p[(e + 1) % 3], p[e]);
            let own = cross2(ab, sub2(p[(e + 2) % 3], p[e]));
            let other = cross2(ab, sub2(q[opp], p[e]));
            if own * other < 0.0 {
                open_edges[fi][e] = false;
            }
        }
        sig.push(fi as u64 ^ ((open_edges[fi][0] as u64) << 40 | (open_edges[fi][1] as u64) << 41 | (open_edges[fi][2] as u64) << 42));
    }

    let mut depth = Grid::new(w, h, 0.0);
    let mut face_buf = Grid::new(w, h, NO_FACE);
    let mut complement = Grid::new(w, h, 1.0);
    let margin = cfg.margin();
    let tau = cfg.sharpness;

    for (fi, f) in faces.iter().enumerate() {
        let Some(p) = tri2d[fi] else { continue };
        let orient = orientation[fi];
        let area2 = cross2(sub2(p[1], p[0]), sub2(p[2], p[0]));
        let zs = [
            vertices[f[0] as usize].z(),
            vertices[f[1] as usize].z(),
            vertices[f[2] as usize].z(),
        ];
        let (minx, maxx) = (p[0][0].min(p[1][0]).min(p[2][0]), p[0][0].max(p[1][0]).max(p[2][0]));
        let (miny, maxy) = (p[0][1].min(p[1][1]).min(p[2][1]), p[0][1].max(p[1][1]).max(p[2][1]));
        let Some((x0, x1)) = pixel_range(minx - margin, maxx + margin, w) else { continue };
        let Some((y0, y1)) = pixel_range(miny - margin, maxy + margin, h) else { continue };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let q = [x as f64, y as f64];
                let (sd, _) = face_signed_distance(q, &p, orient, open_edges[fi]);
                if sd.inside {
                    let r = [sub2(p[0], q), sub2(p[1], q), sub2(p[2], q)];
                    let b = [
                        cross2(r[1], r[2]) / area2,
                        cross2(r[2], r[0]) / area2,
                        cross2(r[0], r[1]) / area2,
                    ];
                    let inv_z = b[0] / zs[0] + b[1] / zs[1] + b[2] / zs[2];
                    let z = 1.0 / inv_z;
                    let cur = *depth.get(x, y);
                    if cur == 0.0 || z < cur {
                        depth.set(x, y, z);
                        face_buf.set(x, y, fi as u32);
                    }
                }
                if tau * sd.d < -cfg.cutoff {
                    continue;
                }
                sig.push(((fi as u64) << 32) ^ ((y * w + x) as u64) << 3 ^ (sd.inside as u64) << 2 ^ sd.edge as u64);
                *complement.get_mut(x, y) *= sigmoid(-tau * sd.d);
            }
        }
    }
    for f in face_buf.data() {
        sig.push(*f as u64);
    }
    let silhouette = complement.map(|p| 1.0 - p);
    let visibility = face_buf.map(|f| *f != NO_FACE);
    Render {
        depth,
        silhouette,
        visibility,
        face: face_buf,
        complement,
        projected,
        open_edges,
        orientation,
        behind_vertices,
        signature: sig.0,
    }
}

fn pixel_range(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let lo = crate::math::ceil(lo).max(0.0);
    let hi = crate::math::floor(hi).min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Backpropagates gradients on the depth map and/or silhouette into
/// per-vertex gradients (camera frame), accumulated into `grad_vertices`.
pub fn render_backward(
    render: &Render,
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    cfg: &RasterConfig,
    grad_depth: Option<&Grid<f64>>,
    grad_silhouette: Option<&Grid<f64>>,
    grad_vertices: &mut [Vec3],
) {
    let (w, h) = (render.depth.width(), render.depth.height());
    let mut g2d = vec![[0.0f64; 2]; vertices.len()];
    let mut gz = vec![0.0f64; vertices.len()];

    if let Some(gd) = grad_depth {
        for y in 0..h {
            for x in 0..w {
                let g = *gd.get(x, y);
                let fi = *render.face.get(x, y);
                if g == 0.0 || fi == NO_FACE {
                    continue;
                }
                let f = faces[fi as usize];
                let p = [0, 1, 2].map(|i| render.projected[f[i] as usize].unwrap().0);
                let ws = [0, 1, 2].map(|i| 1.0 / vertices[f[i] as usize].z());
                let q = [x as f64, y as f64];
                let r = [sub2(p[0], q), sub2(p[1], q), sub2(p[2], q)];
                let n = [cross2(r[1], r[2]), cross2(r[2], r[0]), cross2(r[0], r[1])];
                let area = n[0] + n[1] + n[2];
                let s = (n[0] * ws[0] + n[1] * ws[1] + n[2] * ws[2]) / area;
                let d = 1.0 / s;
                // dD = -D^2 dS with S = N / A
                let gs = -g * d * d;
                let pr = [perp(r[0]), perp(r[1]), perp(r[2])];
                // dN/dp_i and dA/dp_i
                let dn = [
                    [
                        -ws[1] * pr[2][0] + ws[2] * pr[1][0],
                        -ws[1] * pr[2][1] + ws[2] * pr[1][1],
                    ],
                    [
                        ws[0] * pr[2][0] - ws[2] * pr[0][0],
                        ws[0] * pr[2][1] - ws[2] * pr[0][1],
                    ],
                    [
                        -ws[0] * pr[1][0] + ws[1] * pr[0][0],
                        -ws[0] * pr[1][1] + ws[1] * pr[0][1],
                    ],
                ];
                let da = [
                    [-pr[2][0] + pr[1][0], -pr[2][1] + pr[1][1]],
                    [pr[2][0] - pr[0][0], pr[2][1] - pr[0][1]],
                    [-pr[1][0] + pr[0][0], -pr[1][1] + pr[0][1]],
                ];
                for i in 0..3 {
                    let v = f[i] as usize;
                    for c in 0..2 {
                        g2d[v][c] += gs * (dn[i][c] - s * da[i][c]) / area;
                    }
                    // dS/dw_i = n_i / A, dw/dz = -w^2
                    gz[v] += gs * (n[i] / area) * (-ws[i] * ws[i]);
                }
            }
        }
    }

    if let Some(gsil) = grad_silhouette {
        let tau = cfg.sharpness;
        let margin = cfg.margin();
        for (fi, f) in faces.iter().enumerate() {
            if render.orientation[fi] == 0.0 {
                continue;
            }
            let p = [0, 1, 2].map(|i| render.projected[f[i] as usize].unwrap().0);
            let (minx, maxx) = (p[0][0].min(p[1][0]).min(p[2][0]), p[0][0].max(p[1][0]).max(p[2][0]));
            let (miny, maxy) = (p[0][1].min(p[1][1]).min(p[2][1]), p[0][1].max(p[1][1]).max(p[2][1]));
            let Some((x0, x1)) = pixel_range(minx - margin, maxx + margin, w) else { continue };
            let Some((y0, y1)) = pixel_range(miny - margin, maxy + margin, h) else { continue };
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let g = *gsil.get(x, y);
                    if g == 0.0 {
                        continue;
                    }
                    let q = [x as f64, y as f64];
                    let (sd, segs) = face_signed_distance(q, &p, render.orientation[fi], render.open_edges[fi]);
                    if sd.edge == 3 || tau * sd.d < -cfg.cutoff {
                        continue;
                    }
                    let c = sigmoid(tau * sd.d);
                    let gd = g * tau * c * *render.complement.get(x, y);
                    let seg = &segs[sd.edge];
                    if seg.dist == 0.0 {
                        continue;
                    }
                    let sign = if sd.inside { 1.0 } else { -1.0 };
                    let nrm = [(q[0] - seg.closest[0]) / seg.dist, (q[1] - seg.closest[1]) / seg.dist];
                    let (a, b) = (f[sd.edge] as usize, f[(sd.edge + 1) % 3] as usize);
                    for c2 in 0..2 {
                        g2d[a][c2] -= gd * sign * nrm[c2] * (1.0 - seg.t);
                        g2d[b][c2] -= gd * sign * nrm[c2] * seg.t;
                    }
                }
            }
        }
    }

    for (v, gv) in grad_vertices.iter_mut().enumerate() {
        if g2d[v] == [0.0, 0.0] && gz[v] == 0.0 {
            continue;
        }
        let Some((_, jac)) = render.projected[v] else { continue };
        *gv += jac[0] * g2d[v][0] + jac[1] * g2d[v][1];
        gv.0[2] += gz[v];
    }
}

/// Hard z-buffered depth map.
pub fn rasterize_depth(cam: &CameraIntrinsics, vertices: &[Vec3], faces: &[[u32; 3]]) -> Grid<f64> {
    render(cam, vertices, faces, &MeshTopology::new(faces), &RasterConfig::default()).depth
}

/// Soft silhouette in `[0, 1]`.
pub fn rasterize_silhouette(
    cam: &CameraIntrinsics,
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    cfg: &RasterConfig,
) -> Grid<f64> {
    render(cam, vertices, faces, &MeshTopology::new(faces), cfg).silhouette
}

/// Per-pixel front-most mesh among `depths` (0 = empty); ties go to the
/// lower index. Returns one mask per input.
pub fn visibility_masks(depths: &[&Grid<f64>]) -> Vec<Mask> {
    let Some(first) = depths.first() else { return Vec::new() };
    let (w, h) = (first.width(), first.height());
    let mut out: Vec<Mask> = depths.iter().map(|_| Mask::new(w, h, false)).collect();
    for i in 0..w * h {
        let mut best: Option<(usize, f64)> = None;
        for (n, d) in depths.iter().enumerate() {
            let z = d.data()[i];
            if z > 0.0 && best.is_none_or(|(_, bz)| z < bz) {
                best = Some((n, z));
            }
        }
        if let Some((n, _)) = best {
            out[n].data_mut()[i] = true;
        }
    }
    out
}

/// Replaces each render's visibility with its front-most-surface mask.
pub fn assign_visibility(renders: &mut [Render]) {
    let masks = {
        let depths: Vec<&Grid<f64>> = renders.iter().map(|r| &r.depth).collect();
        visibility_masks(&depths)
    };
    for (r, m) in renders.iter_mut().zip(masks) {
        r.visibility = m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap()
    }

    /// Fronto-parallel square of half-size `s` (meters) at depth `z`,
    /// centered on `(cx, cy)`.
    fn square(cx: f64, cy: f64, s: f64, z: f64) -> (Vec<Vec3>, Vec<[u32; 3]>) {
        (
            vec![
                Vec3::new(cx - s, cy - s, z),
                Vec3::new(cx + s, cy - s, z),
                Vec3::new(cx + s, cy + s, z),
                Vec3::new(cx - s, cy + s, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    #[test]
    fn square_depth_and_zbuffer() {
        let c = cam();
        let (v, f) = square(0.0, 0.0, 0.2, 2.0);
        let d = rasterize_depth(&c, &v, &f);
        assert!((d.get(16, 16) - 2.0).abs() < 1e-12);
        assert_eq!(*d.get(0, 0), 0.0);

        let (mut v1, f1) = square(0.0, 0.0, 0.3, 3.0);
        let (v2, _) = square(0.0, 0.0, 0.1, 1.0);
        v1.extend(v2);
        let mut faces = f1.clone();
        faces.extend(f1.iter().map(|t| t.map(|i| i + 4)));
        let d = rasterize_depth(&c, &v1, &faces);
        assert!((d.get(16, 16) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn silhouette_saturates() {
        let c = cam();
        let (v, f) = square(0.0, 0.0, 0.6, 2.0);
        let s = rasterize_silhouette(&c, &v, &f, &RasterConfig::default());
        // on the internal diagonal and off it
        assert!(*s.get(16, 16) > 0.99);
        assert!(*s.get(10, 14) > 0.99);
        assert!(*s.get(0, 0) < 0.01);
        assert!(s.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn behind_camera_is_empty() {
        let c = cam();
        let (v, f) = square(0.0, 0.0, 0.3, -2.0);
        let r = render(&c, &v, &f, &MeshTopology::new(&f), &RasterConfig::default());
        assert!(r.is_empty());
        assert_eq!(r.behind_vertices, 4);
        assert!(r.silhouette.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn visibility_front_to_back() {
        let a = Grid::from_vec(3, 1, vec![1.0, 0.0, 2.0]).unwrap();
        let b = Grid::from_vec(3, 1, vec![2.0, 3.0, 2.0]).unwrap();
        let m = visibility_masks(&[&a, &b]);
        assert_eq!(m[0].data(), &[true, false, true]);
        assert_eq!(m[1].data(), &[false, true, false]);
        let single = visibility_masks(&[&a]);
        assert_eq!(single[0].data(), &[true, false, true]);
    }
}

#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::body::synthetic_body;

    fn loss(cam: &CameraIntrinsics, v: &[Vec3], faces: &[[u32; 3]], topo: &MeshTopology, wd: &Grid<f64>, ws: &Grid<f64>) -> (f64, u64) {
        let r = render(cam, v, faces, topo, &RasterConfig::default());
        let mut l = 0.0;
        for i in 0..wd.len() {
            l += wd.data()[i] * r.depth.data()[i] + ws.data()[i] * r.silhouette.data()[i];
        }
        (l, r.signature())
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        let body = synthetic_body();
        let cam = CameraIntrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        let faces = body.faces().to_vec();
        let topo = MeshTopology::new(&faces);
        let verts: Vec<Vec3> = body.data().template.iter().map(|p| *p + Vec3::new(0.05, 0.1, 3.0)).collect();
        let r = render(&cam, &verts, &faces, &topo, &RasterConfig::default());
        let wd = r.depth.map(|_| 0.0).map(|_| 1.0);
        let mut k = 0u64;
        let ws = r.silhouette.map(|_| {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((k >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        });
        let mut g = vec![Vec3::ZERO; verts.len()];
        render_backward(&r, &verts, &faces, &RasterConfig::default(), Some(&wd), Some(&ws), &mut g);
        let h = 1e-5;
        let mut checked = 0;
        for v in (0..verts.len()).step_by(37) {
            for c in 0..3 {
                let mut vp = verts.clone();
                let mut vm = verts.clone();
                vp[v].0[c] += h;
                vm[v].0[c] -= h;
                let (lp, sp) = loss(&cam, &vp, &faces, &topo, &wd, &ws);
                let (lm, sm) = loss(&cam, &vm, &faces, &topo, &wd, &ws);
                if sp != r.signature() || sm != r.signature() {
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                let a = g[v].0[c];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-12);
                let noise = 4.0 * f64::EPSILON * lp.abs().max(lm.abs()) / h;
                assert!(rel < 1e-4 || (fd - a).abs() < noise, "vertex {v} axis {c}: analytic {a} fd {fd}");
                checked += 1;
            }
        }
        assert!(checked > 30, "{checked}");
    }
}

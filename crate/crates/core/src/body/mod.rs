//! Parametric articulated body: shape blendshapes, forward kinematics and
//! linear blend skinning, plus the per-person scale/translation wrapper.
//!
//! Vertices are produced as
//! `V = sum_k w_vk * (G_k * (T + S*beta + P(theta) - J_k) + t_k)`
//! where `G_k, t_k` are the posed global rotation and position of joint `k`
//! and `J = W_skel * (T + S*beta)` are the rest joints.

mod synthetic;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{rodrigues_with_jacobian, Mat3, Vec3};

pub use synthetic::synthetic_body;

/// Number of articulated joints. Pose vectors carry `NUM_JOINTS * 3` values.
pub const NUM_JOINTS: usize = 24;
/// Default shape-space dimensionality.
pub const NUM_BETAS: usize = 10;

/// Joint names in the order used by the kinematic tree.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

/// Parents of the 24-joint tree; `None` for the root.
pub const DEFAULT_PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

/// Raw body-model arrays, row-major, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModelData {
    pub template: Vec<Vec3>,
    /// `Vn x 3 x B`, index `(v * 3 + c) * B + b`.
    pub shape_dirs: Vec<f64>,
    pub num_betas: usize,
    /// `Vn x K`.
    pub skin_weights: Vec<f64>,
    pub parents: Vec<Option<usize>>,
    /// `K x Vn`, produces the rest joints used by forward kinematics.
    pub joint_regressor_skeleton: Vec<f64>,
    /// `J x Vn`, produces the evaluation joints.
    pub joint_regressor_eval: Vec<f64>,
    pub num_eval_joints: usize,
    pub faces: Vec<[u32; 3]>,
    /// Optional pose correctives, `Vn x 3 x 9(K-1)`, driven by `R_k - I`
    /// for every non-root joint.
    pub pose_dirs: Option<Vec<f64>>,
    pub joint_names: Vec<String>,
}

type Sparse = Vec<Vec<(usize, f64)>>;

/// A validated body model with sparse caches for skinning.
#[derive(Debug, Clone)]
pub struct BodyModel {
    data: BodyModelData,
    vertex_weights: Sparse,
    skeleton_rows: Sparse,
    eval_rows: Sparse,
}

const ROW_SUM_TOL: f64 = 1e-6;

fn sparse_rows(dense: &[f64], rows: usize, cols: usize) -> Sparse {
    (0..rows)
        .map(|r| {
            dense[r * cols..(r + 1) * cols]
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(c, w)| (c, *w))
                .collect()
        })
        .collect()
}

fn check_rows(name: &str, dense: &[f64], rows: usize, cols: usize, nonneg: bool) -> Result<()> {
    for r in 0..rows {
        let row = &dense[r * cols..(r + 1) * cols];
        if nonneg && row.iter().any(|w| *w < 0.0) {
            return Err(Error::Model(alloc::format!("{name} row {r} has a negative entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Model(alloc::format!("{name} row {r} sums to {s}")));
        }
    }
    Ok(())
}

impl BodyModel {
    pub fn new(data: BodyModelData) -> Result<Self> {
        let vn = data.template.len();
        let k = data.parents.len();
        let b = data.num_betas;
        if k != NUM_JOINTS {
            return Err(Error::dim("kinematic tree joints", NUM_JOINTS, k));
        }
        if vn == 0 {
            return Err(Error::Model("template has no vertices".into()));
        }
        if data.shape_dirs.len() != vn * 3 * b {
            return Err(Error::dim("shape_dirs", vn * 3 * b, data.shape_dirs.len()));
        }
        if data.skin_weights.len() != vn * k {
            return Err(Error::dim("skin_weights", vn * k, data.skin_weights.len()));
        }
        if data.joint_regressor_skeleton.len() != k * vn {
            return Err(Error::dim("joint_regressor_skeleton", k * vn, data.joint_regressor_skeleton.len()));
        }
        let j = data.num_eval_joints;
        if data.joint_regressor_eval.len() != j * vn {
            return Err(Error::dim("joint_regressor_eval", j * vn, data.joint_regressor_eval.len()));
        }
        if let Some(p) = &data.pose_dirs {
            let want = vn * 3 * 9 * (k - 1);
            if p.len() != want {
                return Err(Error::dim("pose_dirs", want, p.len()));
            }
        }
        if data.parents[0].is_some() {
            return Err(Error::Model("joint 0 must be the root".into()));
        }
        // Requiring parent < child rules out cycles and gives a topological order.
        for (i, p) in data.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => {
                    return Err(Error::Model(alloc::format!(
                        "joint {i} must have a parent with a lower index"
                    )))
                }
            }
        }
        for f in &data.faces {
            if f.iter().any(|&i| i as usize >= vn) {
                return Err(Error::Model("face references a missing vertex".into()));
            }
        }
        if !data.template.iter().all(Vec3::is_finite) || !data.shape_dirs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("body model"));
        }
        check_rows("skin_weights", &data.skin_weights, vn, k, true)?;
        check_rows("joint_regressor_skeleton", &data.joint_regressor_skeleton, k, vn, false)?;
        check_rows("joint_regressor_eval", &data.joint_regressor_eval, j, vn, false)?;

        let vertex_weights = sparse_rows(&data.skin_weights, vn, k);
        let skeleton_rows = sparse_rows(&data.joint_regressor_skeleton, k, vn);
        let eval_rows = sparse_rows(&data.joint_regressor_eval, j, vn);
        Ok(BodyModel {
            data,
            vertex_weights,
            skeleton_rows,
            eval_rows,
        })
    }

    pub fn data(&self) -> &BodyModelData {
        &self.data
    }
    pub fn num_vertices(&self) -> usize {
        self.data.template.len()
    }
    pub fn num_betas(&self) -> usize {
        self.data.num_betas
    }
    pub fn num_eval_joints(&self) -> usize {
        self.data.num_eval_joints
    }
    pub fn faces(&self) -> &[[u32; 3]] {
        &self.data.faces
    }
    pub fn parents(&self) -> &[Option<usize>] {
        &self.data.parents
    }

    /// Template plus shape blendshapes.
    pub fn shaped_vertices(&self, beta: &[f64]) -> Result<Vec<Vec3>> {
        let b = self.data.num_betas;
        if beta.len() != b {
            return Err(Error::dim("beta", b, beta.len()));
        }
        let dirs = &self.data.shape_dirs;
        Ok(self
            .data
            .template
            .iter()
            .enumerate()
            .map(|(v, t)| {
                let mut out = *t;
                for c in 0..3 {
                    let base = (v * 3 + c) * b;
                    out.0[c] += dirs[base..base + b].iter().zip(beta).map(|(d, x)| d * x).sum::<f64>();
                }
                out
            })
            .collect())
    }

    fn apply_rows(rows: &Sparse, verts: &[Vec3]) -> Vec<Vec3> {
        rows.iter()
            .map(|row| {
                let mut acc = Vec3::ZERO;
                for &(v, w) in row {
                    acc += verts[v] * w;
                }
                acc
            })
            .collect()
    }

    /// Rest-pose joints of the shaped body.
    pub fn rest_joints(&self, beta: &[f64]) -> Result<Vec<Vec3>> {
        let shaped = self.shaped_vertices(beta)?;
        Ok(Self::apply_rows(&self.skeleton_rows, &shaped))
    }

    /// Posed, shaped vertices for one pose and shape.
    pub fn skin(&self, theta: &[Vec3], beta: &[f64]) -> Result<Skinned> {
        if theta.len() != NUM_JOINTS {
            return Err(Error::dim("theta joints", NUM_JOINTS, theta.len()));
        }
        let shaped = self.shaped_vertices(beta)?;
        let rest = Self::apply_rows(&self.skeleton_rows, &shaped);

        let mut local_rot = Vec::with_capacity(NUM_JOINTS);
        let mut local_jac = Vec::with_capacity(NUM_JOINTS);
        for w in theta {
            let (r, d) = rodrigues_with_jacobian(w);
            local_rot.push(r);
            local_jac.push(d);
        }

        let posed_rest = match &self.data.pose_dirs {
            None => shaped,
            Some(pd) => {
                let feats = pose_features(&local_rot);
                let nf = feats.len();
                shaped
                    .iter()
                    .enumerate()
                    .map(|(v, s)| {
                        let mut out = *s;
                        for c in 0..3 {
                            let base = (v * 3 + c) * nf;
                            out.0[c] += pd[base..base + nf].iter().zip(&feats).map(|(a, b)| a * b).sum::<f64>();
                        }
                        out
                    })
                    .collect()
            }
        };

        let mut global_rot = vec![Mat3::IDENTITY; NUM_JOINTS];
        let mut global_pos = vec![Vec3::ZERO; NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            match self.data.parents[k] {
                None => {
                    global_rot[k] = local_rot[k];
                    global_pos[k] = rest[k];
                }
                Some(p) => {
                    global_rot[k] = global_rot[p] * local_rot[k];
                    global_pos[k] = global_rot[p].mul_vec(&(rest[k] - rest[p])) + global_pos[p];
                }
            }
        }

        let vertices = posed_rest
            .iter()
            .zip(&self.vertex_weights)
            .map(|(vp, ws)| {
                let mut acc = Vec3::ZERO;
                for &(k, w) in ws {
                    acc += (global_rot[k].mul_vec(&(*vp - rest[k])) + global_pos[k]) * w;
                }
                acc
            })
            .collect();

        Ok(Skinned {
            vertices,
            rest_joints: rest,
            posed_rest,
            local_rot,
            local_jac,
            global_rot,
            global_pos,
        })
    }

    /// Reverse-mode pass through [`BodyModel::skin`]. Gradients are
    /// accumulated into `grad_theta` and `grad_beta`.
    pub fn skin_backward(
        &self,
        skinned: &Skinned,
        grad_vertices: &[Vec3],
        grad_theta: &mut [Vec3],
        grad_beta: &mut [f64],
    ) -> Result<()> {
        let vn = self.num_vertices();
        if grad_vertices.len() != vn {
            return Err(Error::dim("vertex gradient", vn, grad_vertices.len()));
        }
        if grad_theta.len() != NUM_JOINTS {
            return Err(Error::dim("theta gradient", NUM_JOINTS, grad_theta.len()));
        }
        if grad_beta.len() != self.data.num_betas {
            return Err(Error::dim("beta gradient", self.data.num_betas, grad_beta.len()));
        }
        let rest = &skinned.rest_joints;
        let grot = &skinned.global_rot;

        let mut g_grot = vec![Mat3::ZERO; NUM_JOINTS];
        let mut g_gpos = vec![Vec3::ZERO; NUM_JOINTS];
        let mut g_rest = vec![Vec3::ZERO; NUM_JOINTS];
        let mut g_posed = vec![Vec3::ZERO; vn];

        for v in 0..vn {
            let gv = grad_vertices[v];
            if gv == Vec3::ZERO {
                continue;
            }
            let vp = skinned.posed_rest[v];
            for &(k, w) in &self.vertex_weights[v] {
                let gw = gv * w;
                g_grot[k] += Mat3::outer(&gw, &(vp - rest[k]));
                g_gpos[k] += gw;
                g_posed[v] += grot[k].tmul_vec(&gw);
            }
        }
        for k in 0..NUM_JOINTS {
            g_rest[k] -= grot[k].tmul_vec(&g_gpos[k]);
        }

        let mut g_local = vec![Mat3::ZERO; NUM_JOINTS];
        for k in (0..NUM_JOINTS).rev() {
            match self.data.parents[k] {
                None => {
                    g_local[k] += g_grot[k];
                    g_rest[k] += g_gpos[k];
                }
                Some(p) => {
                    let gr = g_grot[k];
                    let gp = g_gpos[k];
                    g_grot[p] += gr * skinned.local_rot[k].transpose() + Mat3::outer(&gp, &(rest[k] - rest[p]));
                    g_local[k] += grot[p].transpose() * gr;
                    g_gpos[p] += gp;
                    let back = grot[p].tmul_vec(&gp);
                    g_rest[k] += back;
                    g_rest[p] -= back;
                }
            }
        }

        if let Some(pd) = &self.data.pose_dirs {
            let nf = 9 * (NUM_JOINTS - 1);
            let mut g_feat = vec![0.0; nf];
            for (v, gp) in g_posed.iter().enumerate() {
                for c in 0..3 {
                    if gp.0[c] == 0.0 {
                        continue;
                    }
                    let base = (v * 3 + c) * nf;
                    for (gf, d) in g_feat.iter_mut().zip(&pd[base..base + nf]) {
                        *gf += d * gp.0[c];
                    }
                }
            }
            for k in 1..NUM_JOINTS {
                let off = (k - 1) * 9;
                for r in 0..3 {
                    for c in 0..3 {
                        g_local[k].0[r][c] += g_feat[off + r * 3 + c];
                    }
                }
            }
        }

        for k in 0..NUM_JOINTS {
            for i in 0..3 {
                grad_theta[k].0[i] += g_local[k].dot(&skinned.local_jac[k][i]);
            }
        }

        // posed_rest = shaped + correctives and rest = W_skel * shaped, so the
        // gradient reaching the shaped vertices is g_posed + W_skel^T g_rest.
        let mut g_shaped = g_posed;
        for (k, row) in self.skeleton_rows.iter().enumerate() {
            for &(v, w) in row {
                g_shaped[v] += g_rest[k] * w;
            }
        }
        let b = self.data.num_betas;
        let dirs = &self.data.shape_dirs;
        for (v, gs) in g_shaped.iter().enumerate() {
            for c in 0..3 {
                let g = gs.0[c];
                if g == 0.0 {
                    continue;
                }
                let base = (v * 3 + c) * b;
                for (gb, d) in grad_beta.iter_mut().zip(&dirs[base..base + b]) {
                    *gb += d * g;
                }
            }
        }
        Ok(())
    }

    /// Evaluation joints `W * V`.
    pub fn regress_joints(&self, mesh: &[Vec3]) -> Result<Vec<Vec3>> {
        if mesh.len() != self.num_vertices() {
            return Err(Error::dim("mesh vertices", self.num_vertices(), mesh.len()));
        }
        Ok(Self::apply_rows(&self.eval_rows, mesh))
    }

    /// Adjoint of [`BodyModel::regress_joints`]: accumulates `W^T g` into
    /// `grad_mesh`.
    pub fn regress_joints_backward(&self, grad_joints: &[Vec3], grad_mesh: &mut [Vec3]) {
        for (row, g) in self.eval_rows.iter().zip(grad_joints) {
            for &(v, w) in row {
                grad_mesh[v] += *g * w;
            }
        }
    }
}

fn pose_features(local_rot: &[Mat3]) -> Vec<f64> {
    let mut f = Vec::with_capacity(9 * (local_rot.len() - 1));
    for r in &local_rot[1..] {
        let d = *r - Mat3::IDENTITY;
        for row in d.0 {
            f.extend_from_slice(&row);
        }
    }
    f
}

/// Output of forward skinning plus the intermediates the backward pass needs.
#[derive(Debug, Clone)]
pub struct Skinned {
    pub vertices: Vec<Vec3>,
    pub rest_joints: Vec<Vec3>,
    posed_rest: Vec<Vec3>,
    local_rot: Vec<Mat3>,
    local_jac: Vec<[Mat3; 3]>,
    global_rot: Vec<Mat3>,
    global_pos: Vec<Vec3>,
}

impl Skinned {
    /// Posed joint positions from forward kinematics.
    pub fn posed_joints(&self) -> &[Vec3] {
        &self.global_pos
    }
}

/// `s * V + gamma`, row-wise.
pub fn pose_in_world(mesh: &[Vec3], scale: f64, gamma: Vec3) -> Result<Vec<Vec3>> {
    if !(scale > 0.0) {
        return Err(Error::param("scale", "must be positive"));
    }
    Ok(mesh.iter().map(|v| *v * scale + gamma).collect())
}

/// Per-person parameters over a sequence of frames.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PersonParams {
    /// Per frame, `NUM_JOINTS` axis-angle vectors; joint 0 is the global rotation.
    pub theta: Vec<Vec<Vec3>>,
    pub beta: Vec<f64>,
    /// Per-frame translation in meters.
    pub gamma: Vec<Vec3>,
    pub scale: f64,
}

impl PersonParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::param("scale", "must be positive and finite"));
        }
        if !self.beta.iter().all(|b| b.is_finite()) {
            return Err(Error::NonFinite("beta"));
        }
        if self.theta.len() != self.gamma.len() {
            return Err(Error::dim("gamma frames", self.theta.len(), self.gamma.len()));
        }
        for th in &self.theta {
            if th.len() != NUM_JOINTS {
                return Err(Error::dim("theta joints", NUM_JOINTS, th.len()));
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.theta.len()
    }
}

/// Wraps an axis-angle vector so that its angle lies in `[0, pi]`.
pub fn canonicalize_axis_angle(w: Vec3) -> Vec3 {
    let angle = w.norm();
    if angle <= core::f64::consts::PI {
        return w;
    }
    let axis = w.scale(1.0 / angle);
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut a = angle % two_pi;
    if a > core::f64::consts::PI {
        a -= two_pi;
    }
    axis.scale(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{rodrigues, rotation_to_axis_angle};

    fn model() -> BodyModel {
        synthetic_body()
    }

    fn zero_pose() -> Vec<Vec3> {
        vec![Vec3::ZERO; NUM_JOINTS]
    }

    #[test]
    fn zero_pose_zero_shape_is_template() {
        let m = model();
        let out = m.skin(&zero_pose(), &[0.0; NUM_BETAS]).unwrap();
        for (a, b) in out.vertices.iter().zip(&m.data().template) {
            assert!((*a - *b).norm() < 1e-12);
        }
    }

    #[test]
    fn unit_beta_adds_first_shape_direction() {
        let m = model();
        let mut beta = [0.0; NUM_BETAS];
        beta[0] = 1.0;
        let out = m.skin(&zero_pose(), &beta).unwrap();
        let b = m.num_betas();
        for (v, p) in out.vertices.iter().enumerate() {
            let mut expect = m.data().template[v];
            for c in 0..3 {
                expect.0[c] += m.data().shape_dirs[(v * 3 + c) * b];
            }
            assert!((*p - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn global_rotation_rotates_about_root() {
        let m = model();
        let mut theta = zero_pose();
        theta[0] = Vec3::new(0.0, core::f64::consts::PI, 0.0);
        let out = m.skin(&theta, &[0.0; NUM_BETAS]).unwrap();
        let root = m.rest_joints(&[0.0; NUM_BETAS]).unwrap()[0];
        // standalone rigid rotation by pi about Y: (x, y, z) -> (-x, y, -z)
        for (p, t) in out.vertices.iter().zip(&m.data().template) {
            let d = *t - root;
            let expect = Vec3::new(-d.x(), d.y(), -d.z()) + root;
            assert!((*p - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn dimension_errors() {
        let m = model();
        assert!(matches!(m.skin(&[Vec3::ZERO; 3], &[0.0; NUM_BETAS]), Err(Error::Dimension { .. })));
        assert!(matches!(m.skin(&zero_pose(), &[0.0; 3]), Err(Error::Dimension { .. })));
        assert!(m.regress_joints(&[Vec3::ZERO; 4]).is_err());
    }

    #[test]
    fn pose_in_world_substitution() {
        let out = pose_in_world(&[Vec3::new(1.0, 1.0, 1.0)], 2.0, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(out[0], Vec3::new(2.0, 2.0, 3.0));
        let v = [Vec3::new(0.3, -0.2, 4.0)];
        assert_eq!(pose_in_world(&v, 1.0, Vec3::ZERO).unwrap(), v.to_vec());
        let back = pose_in_world(&pose_in_world(&v, 0.5, Vec3::ZERO).unwrap(), 2.0, Vec3::ZERO).unwrap();
        assert!((back[0] - v[0]).norm() < 1e-15);
        assert!(pose_in_world(&v, 0.0, Vec3::ZERO).is_err());
        assert!(pose_in_world(&v, -1.0, Vec3::ZERO).is_err());
    }

    #[test]
    fn regressor_rows() {
        let mut data = model().data().clone();
        let vn = data.template.len();
        // one-hot row and uniform row
        data.num_eval_joints = 2;
        let mut w = vec![0.0; 2 * vn];
        w[17] = 1.0;
        for x in &mut w[vn..] {
            *x = 1.0 / vn as f64;
        }
        data.joint_regressor_eval = w;
        let m = BodyModel::new(data).unwrap();
        let mesh = m.data().template.clone();
        let j = m.regress_joints(&mesh).unwrap();
        assert_eq!(j[0], mesh[17]);
        let mut c = Vec3::ZERO;
        for v in &mesh {
            c += *v;
        }
        c = c * (1.0 / vn as f64);
        assert!((j[1] - c).norm() < 1e-12);
    }

    #[test]
    fn invalid_models_rejected() {
        let good = model().data().clone();

        let mut bad = good.clone();
        bad.skin_weights[0] += 0.1;
        assert!(matches!(BodyModel::new(bad), Err(Error::Model(_))));

        let mut bad = good.clone();
        bad.parents[3] = Some(5);
        assert!(BodyModel::new(bad).is_err());

        let mut bad = good.clone();
        bad.parents.pop();
        assert!(BodyModel::new(bad).is_err());

        let mut bad = good;
        bad.joint_regressor_eval[0] += 0.5;
        assert!(BodyModel::new(bad).is_err());
    }

    #[test]
    fn canonicalization_bounds_angle() {
        let w = Vec3::new(0.0, 0.0, 7.0);
        let c = canonicalize_axis_angle(w);
        assert!(c.norm() <= core::f64::consts::PI + 1e-12);
        let (r1, r2) = (rodrigues(&w), rodrigues(&c));
        assert!((r1 - r2).dot(&(r1 - r2)) < 1e-20);
        let back = rotation_to_axis_angle(&r2);
        assert!((back - c).norm() < 1e-9);
    }
}

//! Procedural low-poly humanoid: one closed capsule per bone of the 24-joint
//! tree (about 600 vertices). Camera convention: +Y points down, the body
//! faces -Z, so a zero pose stands upright in front of a camera looking
//! along +Z.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::{BodyModel, BodyModelData, DEFAULT_PARENTS, JOINT_NAMES, NUM_BETAS, NUM_JOINTS};
use crate::math::{cos, sin, Vec3};

const SIDES: usize = 8;
const RING_FRACTIONS: [f64; 3] = [0.0, 0.5, 1.0];
const CAP_EXTENSION: f64 = 0.8;

// Rest joints in a y-up, +z-facing frame; converted by (x, -y, -z).
const REST_JOINTS_YUP: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.07, -0.09, 0.0],
    [-0.07, -0.09, 0.0],
    [0.0, 0.11, -0.02],
    [0.10, -0.47, 0.0],
    [-0.10, -0.47, 0.0],
    [0.0, 0.24, -0.01],
    [0.10, -0.87, -0.03],
    [-0.10, -0.87, -0.03],
    [0.0, 0.30, 0.01],
    [0.11, -0.93, 0.10],
    [-0.11, -0.93, 0.10],
    [0.0, 0.50, -0.01],
    [0.08, 0.42, 0.0],
    [-0.08, 0.42, 0.0],
    [0.0, 0.62, 0.04],
    [0.18, 0.45, -0.01],
    [-0.18, 0.45, -0.01],
    [0.44, 0.44, -0.03],
    [-0.44, 0.44, -0.03],
    [0.69, 0.45, -0.02],
    [-0.69, 0.45, -0.02],
    [0.77, 0.44, -0.02],
    [-0.77, 0.44, -0.02],
];

// Capsule radius of the bone ending at each joint (index 0 unused).
const BONE_RADIUS: [f64; NUM_JOINTS] = [
    0.0, 0.09, 0.09, 0.12, 0.075, 0.075, 0.12, 0.05, 0.05, 0.125, 0.04, 0.04, 0.06, 0.06, 0.06, 0.095,
    0.055, 0.055, 0.045, 0.045, 0.04, 0.04, 0.035, 0.035,
];

pub(crate) fn rest_joint(k: usize) -> Vec3 {
    let [x, y, z] = REST_JOINTS_YUP[k];
    Vec3::new(x, -y, -z)
}

struct BoneVerts {
    joint: usize,
    start: usize,
    /// Per vertex: axial fraction along the bone and outward direction.
    axial: Vec<f64>,
    normal: Vec<Vec3>,
}

fn perpendicular_basis(d: Vec3) -> (Vec3, Vec3) {
    let ax = [d.x().abs(), d.y().abs(), d.z().abs()];
    let mut r = Vec3::ZERO;
    let i = if ax[0] <= ax[1] && ax[0] <= ax[2] {
        0
    } else if ax[1] <= ax[2] {
        1
    } else {
        2
    };
    r.0[i] = 1.0;
    let u = d.cross(&r);
    let u = u.scale(1.0 / u.norm());
    let v = d.cross(&u);
    (u, v)
}

fn is_descendant(mut c: usize, j: usize) -> bool {
    while let Some(p) = DEFAULT_PARENTS[c] {
        if p == j {
            return true;
        }
        c = p;
    }
    false
}

/// Builds the procedural body. Deterministic.
pub fn synthetic_body() -> BodyModel {
    BodyModel::new(synthetic_body_data()).expect("procedural body satisfies model invariants")
}

pub(crate) fn synthetic_body_data() -> BodyModelData {
    let mut template: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut bones: Vec<BoneVerts> = Vec::new();

    for j in 1..NUM_JOINTS {
        let p = DEFAULT_PARENTS[j].unwrap();
        let a = rest_joint(p);
        let b = rest_joint(j);
        let len = (b - a).norm();
        let d = (b - a).scale(1.0 / len);
        let (u, v) = perpendicular_basis(d);
        let r = BONE_RADIUS[j];
        let start = template.len();
        let mut axial = Vec::new();
        let mut normal = Vec::new();
        for &f in &RING_FRACTIONS {
            for s in 0..SIDES {
                let phi = 2.0 * core::f64::consts::PI * s as f64 / SIDES as f64;
                let n = u.scale(cos(phi)) + v.scale(sin(phi));
                template.push(a + (b - a).scale(f) + n.scale(r));
                axial.push(f);
                normal.push(n);
            }
        }
        template.push(a - d.scale(CAP_EXTENSION * r));
        axial.push(0.0);
        normal.push(-d);
        template.push(b + d.scale(CAP_EXTENSION * r));
        axial.push(1.0);
        normal.push(d);

        let idx = |ring: usize, side: usize| (start + ring * SIDES + side % SIDES) as u32;
        for ring in 0..RING_FRACTIONS.len() - 1 {
            for s in 0..SIDES {
                faces.push([idx(ring, s), idx(ring, s + 1), idx(ring + 1, s + 1)]);
                faces.push([idx(ring, s), idx(ring + 1, s + 1), idx(ring + 1, s)]);
            }
        }
        let cap0 = (start + RING_FRACTIONS.len() * SIDES) as u32;
        let cap1 = cap0 + 1;
        let last = RING_FRACTIONS.len() - 1;
        for s in 0..SIDES {
            faces.push([cap0, idx(0, s + 1), idx(0, s)]);
            faces.push([cap1, idx(last, s), idx(last, s + 1)]);
        }
        bones.push(BoneVerts {
            joint: j,
            start,
            axial,
            normal,
        });
    }

    let vn = template.len();
    let k = NUM_JOINTS;

    // Skinning: each bone follows its parent joint; the ring at the parent
    // end blends half with the grandparent to soften the joint.
    let mut skin_weights = vec![0.0; vn * k];
    for bone in &bones {
        let p = DEFAULT_PARENTS[bone.joint].unwrap();
        let pp = DEFAULT_PARENTS[p];
        for (i, &f) in bone.axial.iter().enumerate() {
            let row = &mut skin_weights[(bone.start + i) * k..(bone.start + i + 1) * k];
            match pp {
                Some(pp) if f == 0.0 => {
                    row[p] = 0.5;
                    row[pp] = 0.5;
                }
                _ => row[p] = 1.0,
            }
        }
    }

    // Joint regressor: ring centroids at each joint.
    let mut regressor = vec![0.0; k * vn];
    for joint in 0..k {
        let mut members: Vec<usize> = Vec::new();
        for bone in &bones {
            let p = DEFAULT_PARENTS[bone.joint].unwrap();
            if p == joint {
                members.extend((0..SIDES).map(|s| bone.start + s));
            }
        }
        if members.is_empty() {
            let bone = bones.iter().find(|b| b.joint == joint).unwrap();
            let last = RING_FRACTIONS.len() - 1;
            members.extend((0..SIDES).map(|s| bone.start + last * SIDES + s));
        }
        let w = 1.0 / members.len() as f64;
        for m in members {
            regressor[joint * vn + m] = w;
        }
    }

    let shape_dirs = shape_directions(&template, &bones);

    BodyModelData {
        template,
        shape_dirs,
        num_betas: NUM_BETAS,
        skin_weights,
        parents: DEFAULT_PARENTS.to_vec(),
        joint_regressor_skeleton: regressor.clone(),
        joint_regressor_eval: regressor,
        num_eval_joints: k,
        faces,
        pose_dirs: None,
        joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

enum Mode {
    Stature(f64),
    Radial(&'static [usize], f64),
    Stretch(&'static [usize], f64),
}

const ALL_BONES: [usize; 23] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23];
const LIMBS: [usize; 12] = [4, 5, 7, 8, 10, 11, 18, 19, 20, 21, 22, 23];

fn shape_directions(template: &[Vec3], bones: &[BoneVerts]) -> Vec<f64> {
    let modes: [&[Mode]; NUM_BETAS] = [
        &[Mode::Stature(0.06)],
        &[Mode::Radial(&ALL_BONES, 0.15)],
        &[Mode::Stretch(&[4, 5, 7, 8], 0.035)],
        &[Mode::Stretch(&[18, 19, 20, 21], 0.03)],
        &[Mode::Stretch(&[3, 6, 9], 0.02)],
        &[Mode::Radial(&[3, 6], 0.25)],
        &[Mode::Radial(&LIMBS, 0.2)],
        &[Mode::Stretch(&[16, 17], 0.025)],
        &[Mode::Stretch(&[1, 2], 0.02)],
        &[Mode::Radial(&[15], 0.15), Mode::Stretch(&[15], 0.015)],
    ];
    let vn = template.len();
    let b = NUM_BETAS;
    let mut dirs = vec![0.0; vn * 3 * b];
    let pelvis_y = rest_joint(0).y();
    for (m, parts) in modes.iter().enumerate() {
        let mut disp = vec![Vec3::ZERO; vn];
        for mode in parts.iter() {
            match mode {
                Mode::Stature(k) => {
                    for (d, t) in disp.iter_mut().zip(template) {
                        d.0[1] += k * (t.y() - pelvis_y);
                    }
                }
                Mode::Radial(set, ratio) => {
                    for bone in bones.iter().filter(|b| set.contains(&b.joint)) {
                        let r = BONE_RADIUS[bone.joint];
                        for (i, n) in bone.normal.iter().enumerate() {
                            disp[bone.start + i] += n.scale(ratio * r);
                        }
                    }
                }
                Mode::Stretch(set, amount) => {
                    for &j in set.iter() {
                        let p = DEFAULT_PARENTS[j].unwrap();
                        let dir = rest_joint(j) - rest_joint(p);
                        let dir = dir.scale(amount / dir.norm());
                        for bone in bones {
                            if bone.joint == j {
                                for (i, f) in bone.axial.iter().enumerate() {
                                    disp[bone.start + i] += dir.scale(*f);
                                }
                            } else if is_descendant(bone.joint, j) {
                                for i in 0..bone.axial.len() {
                                    disp[bone.start + i] += dir;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (v, d) in disp.iter().enumerate() {
            for c in 0..3 {
                dirs[(v * 3 + c) * b + m] = d.0[c];
            }
        }
    }
    dirs
}

//! Synthetic multi-person scenes with known ground truth: posed bodies on a
//! ground plane in front of a back wall, rendered into disparity, joint
//! detections, pose estimates and instance masks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::body::{BodyModel, PersonParams, NUM_JOINTS};
use crate::camera::CameraIntrinsics;
use crate::energy::OptimState;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math::{atan2, cos, exp, ln, sin, sqrt, Vec3};
use crate::metrics::PersonPose;
use crate::observations::{FrameObservations, JointDetection, PoseEstimate};
use crate::raster::{render, MeshTopology, RasterConfig};
use crate::scene::FrameDepthParams;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum Motion {
    /// In place, with a slow idle arm swing.
    Stand,
    /// Constant ground velocity `(vx, vz)` in m/s.
    WalkLine { velocity: [f64; 2] },
    /// Circle around `center` (x, z); negative speed walks clockwise.
    WalkCircle { center: [f64; 2], radius: f64, angular_speed: f64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PersonSpec {
    pub scale: f64,
    pub beta: Vec<f64>,
    /// Ground position (x, z) at frame 0. Ignored by circles.
    pub start: [f64; 2],
    /// Rotation about the vertical axis for standing persons; 0 faces the camera.
    pub heading: f64,
    pub motion: Motion,
}

/// Supporting surface, expressed in camera coordinates (+Y down).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum Ground {
    /// Horizontal plane `y = height`.
    Plane { height: f64 },
    /// Plane rising away from the camera: `y = height - slope * (z - origin_z)`.
    Ramp { height: f64, slope: f64, origin_z: f64 },
}

impl Ground {
    fn coefficients(&self) -> (f64, f64, f64) {
        match *self {
            Ground::Plane { height } => (height, 0.0, 0.0),
            Ground::Ramp { height, slope, origin_z } => (height, slope, origin_z),
        }
    }

    /// Signed distance to the surface, positive above it (toward -Y).
    pub fn height_above(&self, p: &Vec3) -> f64 {
        let (h, s, z0) = self.coefficients();
        (h - p.y() - s * (p.z() - z0)) / sqrt(1.0 + s * s)
    }

    /// Depth at which the ray through `(u, v)` hits the surface.
    fn ray_depth(&self, cam: &CameraIntrinsics, u: f64, v: f64) -> Option<f64> {
        let _ = u;
        let (h, s, z0) = self.coefficients();
        let ry = (v - cam.cy) / cam.fy;
        let den = ry + s;
        if den <= 1e-9 {
            return None;
        }
        let z = (h + s * z0) / den;
        (z > 0.0).then_some(z)
    }

    fn vertical_offset(&self, p: &Vec3) -> f64 {
        let (h, s, z0) = self.coefficients();
        p.y() + s * (p.z() - z0) - h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct NoiseSpec {
    /// Gaussian noise on 2D joints, pixels.
    pub joint_px: f64,
    /// Gaussian noise on normalized disparity.
    pub disparity: f64,
    /// Gaussian noise on every pose-estimate axis-angle component, radians.
    pub pose: f64,
    /// Gaussian noise on estimated shape coefficients.
    pub beta: f64,
    /// Extra square erosion applied to instance masks (0 = none).
    pub mask_erosion: usize,
    /// Log-normal spread of the per-frame depth range.
    pub depth_range: f64,
    /// Spread of a constant disparity offset drawn once per person and
    /// added to every pixel that person owns. Monocular depth networks
    /// tend to misplace whole objects relative to the floor like this.
    pub instance_disparity_bias: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        joint_px: 0.0,
        disparity: 0.0,
        pose: 0.0,
        beta: 0.0,
        mask_erosion: 0,
        depth_range: 0.0,
        instance_disparity_bias: 0.0,
    };
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            joint_px: 1.0,
            disparity: 0.005,
            pose: 0.03,
            beta: 0.05,
            mask_erosion: 0,
            depth_range: ln(1.2),
            instance_disparity_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScenarioSpec {
    pub name: String,
    pub camera: CameraIntrinsics,
    pub frames: usize,
    pub frame_rate: f64,
    pub ground: Ground,
    /// Depth of the fronto-parallel back wall, meters.
    pub back_wall: f64,
    pub persons: Vec<PersonSpec>,
    pub noise: NoiseSpec,
    /// Center of the per-frame disparity range.
    pub z_near: f64,
    pub z_far: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.persons.is_empty() {
            return Err(Error::Empty("scenario persons"));
        }
        if self.persons.len() > 254 {
            return Err(Error::param("persons", "at most 254 instances fit a label image"));
        }
        if self.frames == 0 {
            return Err(Error::Empty("scenario frames"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::param("frame_rate", "must be positive"));
        }
        if !(self.back_wall > 0.0) {
            return Err(Error::param("back_wall", "must be positive"));
        }
        FrameDepthParams::new(self.z_near, self.z_far)?;
        let n = &self.noise;
        if [n.joint_px, n.disparity, n.pose, n.beta, n.depth_range, n.instance_disparity_bias].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::param("noise", "must be finite and non-negative"));
        }
        for p in &self.persons {
            if !(p.scale > 0.0) || !p.scale.is_finite() {
                return Err(Error::param("person scale", "must be positive"));
            }
            if let Motion::WalkCircle { radius, .. } = p.motion {
                if !(radius > 0.0) {
                    return Err(Error::param("circle radius", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// A generated scenario: observations plus the state that produced them.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub frames: Vec<FrameObservations>,
    pub truth: OptimState,
    /// Evaluation joints in camera coordinates, `[t][..]` for visible persons.
    pub gt_poses: Vec<Vec<PersonPose>>,
    /// Depth of the static background (ground and wall).
    pub background_depth: Grid<f64>,
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    sigma * z
}

const L_HIP: usize = 1;
const R_HIP: usize = 2;
const L_KNEE: usize = 4;
const R_KNEE: usize = 5;
const L_SHOULDER: usize = 16;
const R_SHOULDER: usize = 17;
const L_ELBOW: usize = 18;
const R_ELBOW: usize = 19;

/// Joint angles and ground placement of one person at time `time`.
fn person_at(p: &PersonSpec, time: f64) -> (Vec<Vec3>, [f64; 2]) {
    let (pos, heading, phase, walking) = match p.motion {
        Motion::Stand => (p.start, p.heading, 2.0 * PI * 0.5 * time, false),
        Motion::WalkLine { velocity: [vx, vz] } => {
            let speed = sqrt(vx * vx + vz * vz);
            let heading = if speed > 0.0 { atan2(-vx, -vz) } else { p.heading };
            let dist = speed * time;
            ([p.start[0] + vx * time, p.start[1] + vz * time], heading, 2.0 * PI * dist / (1.2 * p.scale), speed > 0.0)
        }
        Motion::WalkCircle {
            center,
            radius,
            angular_speed,
        } => {
            let a = angular_speed * time;
            let pos = [center[0] + radius * cos(a), center[1] + radius * sin(a)];
            let (vx, vz) = (-radius * angular_speed * sin(a), radius * angular_speed * cos(a));
            let dist = radius * angular_speed.abs() * time;
            (pos, atan2(-vx, -vz), 2.0 * PI * dist / (1.2 * p.scale), true)
        }
    };
    let mut theta = vec![Vec3::ZERO; NUM_JOINTS];
    theta[0] = Vec3::new(0.0, heading, 0.0);
    let swing = sin(phase);
    if walking {
        theta[L_HIP] = Vec3::new(0.4 * swing, 0.0, 0.0);
        theta[R_HIP] = Vec3::new(-0.4 * swing, 0.0, 0.0);
        theta[L_KNEE] = Vec3::new(0.6 * (-swing).max(0.0), 0.0, 0.0);
        theta[R_KNEE] = Vec3::new(0.6 * swing.max(0.0), 0.0, 0.0);
        theta[L_SHOULDER] = Vec3::new(-0.3 * swing, 0.0, 1.2);
        theta[R_SHOULDER] = Vec3::new(0.3 * swing, 0.0, -1.2);
    } else {
        theta[L_SHOULDER] = Vec3::new(0.0, 0.0, 1.1 + 0.15 * swing);
        theta[R_SHOULDER] = Vec3::new(0.0, 0.0, -1.1 + 0.15 * swing);
    }
    theta[L_ELBOW] = Vec3::new(0.0, -0.3, 0.0);
    theta[R_ELBOW] = Vec3::new(0.0, 0.3, 0.0);
    (theta, pos)
}

/// Renders the scenario. Deterministic for a given spec and model.
pub fn generate(spec: &ScenarioSpec, model: &BodyModel) -> Result<Scenario> {
    spec.validate()?;
    let cam = spec.camera;
    let (n_persons, t_len) = (spec.persons.len(), spec.frames);
    let nb = model.num_betas();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topo = MeshTopology::new(model.faces());
    let rcfg = RasterConfig::default();

    let betas: Vec<Vec<f64>> = spec
        .persons
        .iter()
        .map(|p| (0..nb).map(|i| p.beta.get(i).copied().unwrap_or(0.0)).collect())
        .collect();
    let mut background_depth = Grid::new(cam.width, cam.height, spec.back_wall);
    for v in 0..cam.height {
        for u in 0..cam.width {
            if let Some(z) = spec.ground.ray_depth(&cam, u as f64, v as f64) {
                if z < spec.back_wall {
                    background_depth.set(u, v, z);
                }
            }
        }
    }

    let mut persons: Vec<PersonParams> = spec
        .persons
        .iter()
        .zip(&betas)
        .map(|(p, b)| PersonParams {
            theta: Vec::with_capacity(t_len),
            beta: b.clone(),
            gamma: Vec::with_capacity(t_len),
            scale: p.scale,
        })
        .collect();
    let mut presence = vec![vec![false; n_persons]; t_len];
    let mut depth_params = Vec::with_capacity(t_len);
    let mut frames = Vec::with_capacity(t_len);
    let mut gt_poses = Vec::with_capacity(t_len);
    let mut visible_count = vec![0usize; n_persons];

    let instance_bias: Vec<f64> = if spec.noise.instance_disparity_bias > 0.0 {
        (0..n_persons).map(|_| gauss(&mut rng, spec.noise.instance_disparity_bias)).collect()
    } else {
        vec![0.0; n_persons]
    };

    for t in 0..t_len {
        let time = t as f64 / spec.frame_rate;
        let mut worlds = Vec::with_capacity(n_persons);
        for (n, p) in spec.persons.iter().enumerate() {
            let (theta, pos) = person_at(p, time);
            let sk = model.skin(&theta, &betas[n])?;
            let root = sk.posed_joints()[0];
            let mut gamma = Vec3::new(pos[0] - p.scale * root.x(), 0.0, pos[1] - p.scale * root.z());
            let lowest = sk
                .vertices
                .iter()
                .map(|v| spec.ground.vertical_offset(&(*v * p.scale + gamma)))
                .fold(f64::NEG_INFINITY, f64::max);
            gamma.0[1] -= lowest;
            let world: Vec<Vec3> = sk.vertices.iter().map(|v| *v * p.scale + gamma).collect();
            persons[n].theta.push(theta);
            persons[n].gamma.push(gamma);
            worlds.push(world);
        }

        // Composite depth and front-most ownership.
        let mut depth = background_depth.clone();
        let mut owner: Grid<u8> = Grid::new(cam.width, cam.height, 0);
        for (n, w) in worlds.iter().enumerate() {
            let r = render(&cam, w, model.faces(), &topo, &rcfg);
            for (i, z) in r.depth.data().iter().enumerate() {
                if *z > 0.0 && *z < depth.data()[i] {
                    depth.data_mut()[i] = *z;
                    owner.data_mut()[i] = (n + 1) as u8;
                }
            }
        }

        let (zmin, zmax) = depth
            .data()
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), z| (a.min(*z), b.max(*z)));
        let mut z_near = spec.z_near * exp(gauss(&mut rng, spec.noise.depth_range));
        let mut z_far = spec.z_far * exp(gauss(&mut rng, spec.noise.depth_range));
        z_near = z_near.min(0.95 * zmin);
        z_far = z_far.max(1.05 * zmax);
        let params = FrameDepthParams::new(z_near, z_far)?;
        let mut disparity = depth.map(|z| params.disparity(*z));
        for (d, o) in disparity.data_mut().iter_mut().zip(owner.data()) {
            if *o > 0 {
                *d = (*d + instance_bias[*o as usize - 1]).clamp(0.0, 1.0);
            }
        }
        let disparity = if spec.noise.disparity > 0.0 {
            disparity.map(|d| (d + gauss(&mut rng, spec.noise.disparity)).clamp(0.0, 1.0))
        } else {
            disparity
        };
        depth_params.push(params);

        let mut detections = Vec::new();
        let mut poses = Vec::new();
        let mut masks = Vec::new();
        let mut gt = Vec::new();
        for (n, w) in worlds.iter().enumerate() {
            let joints = model.regress_joints(w)?;
            let visible = cam
                .project(&joints[0])
                .is_some_and(|[u, v]| u >= 0.0 && v >= 0.0 && u <= (cam.width - 1) as f64 && v <= (cam.height - 1) as f64);
            if !visible {
                continue;
            }
            visible_count[n] += 1;
            presence[t][n] = true;
            let mut j2d = Vec::with_capacity(joints.len());
            for j in &joints {
                let [u, v] = cam.project(j).ok_or(Error::Degenerate("joint behind the camera".into()))?;
                j2d.push([u + gauss(&mut rng, spec.noise.joint_px), v + gauss(&mut rng, spec.noise.joint_px)]);
            }
            detections.push(JointDetection {
                confidence: vec![1.0; j2d.len()],
                joints: j2d,
                track_id: Some(n as u32),
            });

            let p = &persons[n];
            let theta_hat: Vec<Vec3> = p.theta[t]
                .iter()
                .map(|w| *w + Vec3::new(gauss(&mut rng, spec.noise.pose), gauss(&mut rng, spec.noise.pose), gauss(&mut rng, spec.noise.pose)))
                .collect();
            let beta_hat: Vec<f64> = p.beta.iter().map(|b| b + gauss(&mut rng, spec.noise.beta)).collect();
            let sk_hat = model.skin(&theta_hat, &beta_hat)?;
            let world_hat: Vec<Vec3> = sk_hat.vertices.iter().map(|v| *v * p.scale + p.gamma[t]).collect();
            let joints2d = model
                .regress_joints(&world_hat)?
                .iter()
                .map(|j| cam.project(j).unwrap_or([cam.cx, cam.cy]))
                .collect();
            poses.push(PoseEstimate {
                theta: theta_hat,
                beta: beta_hat,
                joints2d: Some(joints2d),
            });

            let mut m = owner.map(|o| *o as usize == n + 1);
            if spec.noise.mask_erosion > 1 {
                m = m.erode(spec.noise.mask_erosion);
            }
            masks.push(m);
            gt.push(PersonPose {
                track_id: n as u32,
                joints,
                root: 0,
            });
        }
        poses.shuffle(&mut rng);
        masks.shuffle(&mut rng);
        frames.push(FrameObservations {
            disparity,
            detections,
            poses,
            person_masks: masks,
            background: owner.map(|o| *o == 0),
        });
        gt_poses.push(gt);
    }

    for (n, c) in visible_count.iter().enumerate() {
        if 5 * c < 4 * t_len {
            return Err(Error::param(
                "persons",
                alloc::format!("person {n} is inside the view in only {c} of {t_len} frames"),
            ));
        }
    }

    Ok(Scenario {
        spec: spec.clone(),
        frames,
        truth: OptimState {
            persons,
            depth: depth_params,
            presence,
        },
        gt_poses,
        background_depth,
    })
}

/// Shifts every translation by `gamma_offset` and multiplies every scale by
/// `scale_factor`.
pub fn perturb(state: &OptimState, gamma_offset: Vec3, scale_factor: f64) -> OptimState {
    let mut out = state.clone();
    for p in &mut out.persons {
        p.scale *= scale_factor;
        for g in &mut p.gamma {
            *g += gamma_offset;
        }
    }
    out
}

/// Named scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    ThreePersonPlane,
    MultiScale,
    Children,
    WalkingOnPlane,
    Noisy,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::ThreePersonPlane,
        Preset::MultiScale,
        Preset::Children,
        Preset::WalkingOnPlane,
        Preset::Noisy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ThreePersonPlane => "three-person-plane",
            Preset::MultiScale => "multi-scale",
            Preset::Children => "children",
            Preset::WalkingOnPlane => "walking-on-plane",
            Preset::Noisy => "noisy",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Scenario with the preset's default length (100 frames).
    pub fn spec(self) -> ScenarioSpec {
        let stand = |x: f64, z: f64, scale: f64, beta: &[f64]| PersonSpec {
            scale,
            beta: beta.to_vec(),
            start: [x, z],
            heading: 0.0,
            motion: Motion::Stand,
        };
        let persons = match self {
            Preset::ThreePersonPlane | Preset::Noisy => vec![
                PersonSpec {
                    motion: Motion::WalkCircle {
                        center: [-0.7, 2.3],
                        radius: 0.25,
                        angular_speed: 0.9,
                    },
                    ..stand(0.0, 0.0, 0.97, &[0.3, -0.2])
                },
                PersonSpec {
                    heading: 0.3,
                    ..stand(0.9, 2.4, 1.0, &[-0.4, 0.1])
                },
                PersonSpec {
                    motion: Motion::WalkLine { velocity: [0.45, 0.0] },
                    ..stand(-1.0, 4.0, 1.04, &[0.1, 0.5])
                },
            ],
            // Depth changes over time are what pin the relative scales, so
            // everybody walks toward or away from the camera.
            Preset::MultiScale => vec![
                PersonSpec {
                    motion: Motion::WalkLine { velocity: [0.0, 0.3] },
                    ..stand(-0.8, 1.8, 0.8, &[0.2])
                },
                PersonSpec {
                    motion: Motion::WalkLine { velocity: [0.0, -0.3] },
                    ..stand(0.0, 2.5, 1.0, &[-0.3, 0.2])
                },
                PersonSpec {
                    motion: Motion::WalkLine { velocity: [0.0, 0.3] },
                    ..stand(0.8, 1.9, 1.25, &[0.4, -0.1])
                },
            ],
            Preset::Children => vec![
                stand(-0.8, 2.4, 1.0, &[0.2]),
                PersonSpec {
                    motion: Motion::WalkLine { velocity: [0.0, 0.2] },
                    ..stand(0.0, 2.0, 0.55, &[-0.5])
                },
                stand(0.8, 2.6, 1.05, &[0.3, 0.3]),
            ],
            Preset::WalkingOnPlane => vec![
                PersonSpec {
                    motion: Motion::WalkLine { velocity: [0.4, 0.0] },
                    ..stand(-0.9, 2.5, 1.0, &[0.1])
                },
                PersonSpec {
                    motion: Motion::WalkLine { velocity: [-0.4, 0.0] },
                    ..stand(0.9, 3.2, 1.02, &[-0.2])
                },
            ],
        };
        let noise = match self {
            Preset::Noisy => NoiseSpec {
                joint_px: 3.0,
                disparity: 0.02,
                pose: 0.06,
                beta: 0.1,
                mask_erosion: 3,
                ..NoiseSpec::default()
            },
            Preset::WalkingOnPlane => NoiseSpec {
                instance_disparity_bias: 0.03,
                ..NoiseSpec::default()
            },
            _ => NoiseSpec::default(),
        };
        ScenarioSpec {
            name: String::from(self.name()),
            camera: CameraIntrinsics {
                fx: 200.0,
                fy: 200.0,
                cx: 160.0,
                cy: 120.0,
                width: 320,
                height: 240,
            },
            frames: 100,
            frame_rate: if self == Preset::MultiScale { 15.0 } else { 30.0 },
            ground: Ground::Plane { height: 1.0 },
            back_wall: 8.0,
            persons,
            noise,
            z_near: 1.0,
            z_far: 12.0,
            seed: 0,
        }
    }
}

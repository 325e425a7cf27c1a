//! Normalized disparity to metric depth, static background aggregation and
//! the scene point cloud used for contact reasoning.

use alloc::vec;
use alloc::vec::Vec;

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::math::{floor, Vec3};

/// Per-frame near/far planes of the disparity-to-depth conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameDepthParams {
    pub z_near: f64,
    pub z_far: f64,
}

impl FrameDepthParams {
    pub fn new(z_near: f64, z_far: f64) -> Result<Self> {
        let p = FrameDepthParams { z_near, z_far };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z_near > 0.0 && self.z_near < self.z_far && self.z_far.is_finite()) {
            return Err(Error::param("depth params", "require 0 < z_near < z_far"));
        }
        Ok(())
    }

    /// Depth of one normalized disparity value (1 = near, 0 = far).
    #[inline]
    pub fn depth(&self, d: f64) -> f64 {
        self.z_far * self.z_near / (d * (self.z_far - self.z_near) + self.z_near)
    }

    /// `(dD/dz_near, dD/dz_far)` at disparity `d`.
    #[inline]
    pub fn depth_gradient(&self, d: f64) -> (f64, f64) {
        let den = d * (self.z_far - self.z_near) + self.z_near;
        let den2 = den * den;
        (
            d * self.z_far * self.z_far / den2,
            (1.0 - d) * self.z_near * self.z_near / den2,
        )
    }

    /// Inverse of [`FrameDepthParams::depth`].
    #[inline]
    pub fn disparity(&self, depth: f64) -> f64 {
        self.z_near * (self.z_far / depth - 1.0) / (self.z_far - self.z_near)
    }
}

/// Which end of the normalized range denotes near surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DisparityPolarity {
    #[default]
    OneIsNear,
    OneIsFar,
}

impl DisparityPolarity {
    pub fn normalize(self, d: f64) -> f64 {
        match self {
            DisparityPolarity::OneIsNear => d,
            DisparityPolarity::OneIsFar => 1.0 - d,
        }
    }
}

/// Elementwise disparity-to-depth conversion.
pub fn disparity_to_depth(disparity: &Grid<f64>, params: &FrameDepthParams) -> Result<Grid<f64>> {
    params.validate()?;
    if disparity.data().iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(Error::param("disparity", "values must lie in [0, 1]"));
    }
    Ok(disparity.map(|d| params.depth(*d)))
}

/// Median of a non-empty slice; even counts average the two central values.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-pixel median depth over the frames where the pixel is background.
/// Pixels that are never background are 0 (invalid).
pub fn aggregate_background(depths: &[Grid<f64>], backgrounds: &[Mask]) -> Result<Grid<f64>> {
    let first = depths.first().ok_or(Error::Empty("depth maps"))?;
    if depths.len() != backgrounds.len() {
        return Err(Error::dim("background masks", depths.len(), backgrounds.len()));
    }
    if depths.iter().any(|d| !d.same_shape(first)) || backgrounds.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::param("depth maps", "all frames must share dimensions"));
    }
    let mut out = Grid::new(first.width(), first.height(), 0.0);
    let mut buf = Vec::with_capacity(depths.len());
    for i in 0..first.len() {
        buf.clear();
        for (d, m) in depths.iter().zip(backgrounds) {
            if m.data()[i] && d.data()[i] > 0.0 {
                buf.push(d.data()[i]);
            }
        }
        if !buf.is_empty() {
            out.data_mut()[i] = median(&mut buf);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CloudConfig {
    /// Edge length of the acceleration grid cells in meters.
    pub cell_size: f64,
    /// Optional voxel size for centroid downsampling before indexing.
    pub voxel_size: Option<f64>,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            cell_size: 0.25,
            voxel_size: None,
        }
    }
}

/// Uniform grid over a point set, stored as cell-sorted point ids.
#[derive(Debug, Clone)]
struct UniformGrid {
    cell: f64,
    origin: Vec3,
    dims: [usize; 3],
    starts: Vec<u32>,
    ids: Vec<u32>,
}

const MAX_CELLS: usize = 1 << 22;

impl UniformGrid {
    fn build(points: &[Vec3], mut cell: f64) -> UniformGrid {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for c in 0..3 {
                lo.0[c] = lo.0[c].min(p.0[c]);
                hi.0[c] = hi.0[c].max(p.0[c]);
            }
        }
        let dims = loop {
            let d = [0, 1, 2].map(|c| floor((hi.0[c] - lo.0[c]) / cell) as usize + 1);
            if d[0] * d[1] * d[2] <= MAX_CELLS {
                break d;
            }
            cell *= 2.0;
        };
        let mut grid = UniformGrid {
            cell,
            origin: lo,
            dims,
            starts: Vec::new(),
            ids: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let cell_of: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_coords(p))).collect();
        let mut counts = vec![0u32; ncells + 1];
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut ids = vec![0u32; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            ids[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.ids = ids;
        grid
    }

    fn cell_coords(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|c| {
            let i = floor((p.0[c] - self.origin.0[c]) / self.cell);
            (i.max(0.0) as usize).min(self.dims[c] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn nearest(&self, points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let center = self.cell_coords(q);
        let mut best = (usize::MAX, f64::INFINITY);
        let max_r = self.dims.iter().copied().max().unwrap();
        for r in 0..=max_r {
            let lo = center.map(|c| c.saturating_sub(r));
            let hi = [0, 1, 2].map(|a| (center[a] + r).min(self.dims[a] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let on_shell = r == 0
                            || x.abs_diff(center[0]) == r
                            || y.abs_diff(center[1]) == r
                            || z.abs_diff(center[2]) == r;
                        if !on_shell {
                            continue;
                        }
                        let c = self.flat([x, y, z]);
                        for &id in &self.ids[self.starts[c] as usize..self.starts[c + 1] as usize] {
                            let d2 = (points[id as usize] - *q).norm_sq();
                            let id = id as usize;
                            if d2 < best.1 || (d2 == best.1 && id < best.0) {
                                best = (id, d2);
                            }
                        }
                    }
                }
            }
            let covers_all = (0..3).all(|a| lo[a] == 0 && hi[a] == self.dims[a] - 1);
            if covers_all {
                break;
            }
            // Distance from q to the outside of the searched block bounds
            // every point not yet visited.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                let bmin = self.origin.0[a] + lo[a] as f64 * self.cell;
                let bmax = self.origin.0[a] + (hi[a] + 1) as f64 * self.cell;
                if lo[a] > 0 {
                    bound = bound.min(q.0[a] - bmin);
                }
                if hi[a] < self.dims[a] - 1 {
                    bound = bound.min(bmax - q.0[a]);
                }
            }
            if bound > 0.0 && best.1 < bound * bound {
                break;
            }
        }
        best
    }
}

/// Scene points back-projected from the static depth map.
#[derive(Debug, Clone)]
pub struct ScenePointCloud {
    pub points: Vec<Vec3>,
    pub source_pixels: Vec<[u32; 2]>,
    index: UniformGrid,
}

impl ScenePointCloud {
    pub fn from_points(points: Vec<Vec3>, source_pixels: Vec<[u32; 2]>, cell_size: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("scene point cloud"));
        }
        if !(cell_size > 0.0) {
            return Err(Error::param("cell_size", "must be positive"));
        }
        let index = UniformGrid::build(&points, cell_size);
        Ok(ScenePointCloud {
            points,
            source_pixels,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact nearest point; ties resolve to the lowest point index.
    pub fn nearest_point(&self, query: &Vec3) -> (usize, Vec3, f64) {
        let (i, d2) = self.index.nearest(&self.points, query);
        (i, self.points[i], crate::math::sqrt(d2))
    }
}

/// Back-projects every valid (positive) pixel of `depth` and indexes it.
pub fn build_point_cloud(depth: &Grid<f64>, cam: &CameraIntrinsics, cfg: &CloudConfig) -> Result<ScenePointCloud> {
    if depth.width() != cam.width || depth.height() != cam.height {
        return Err(Error::param("depth map", "dimensions must match the camera"));
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let z = *depth.get(x, y);
            if z > 0.0 && z.is_finite() {
                points.push(cam.back_project(x as f64, y as f64, z)?);
                pixels.push([x as u32, y as u32]);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Degenerate("no valid background pixels for the scene point cloud".into()));
    }
    if let Some(voxel) = cfg.voxel_size {
        let (p, s) = voxel_downsample(&points, &pixels, voxel);
        points = p;
        pixels = s;
    }
    ScenePointCloud::from_points(points, pixels, cfg.cell_size)
}

fn voxel_downsample(points: &[Vec3], pixels: &[[u32; 2]], voxel: f64) -> (Vec<Vec3>, Vec<[u32; 2]>) {
    let key = |p: &Vec3| [0, 1, 2].map(|c| floor(p.0[c] / voxel) as i64);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| (key(&points[i]), i));
    let mut out_p = Vec::new();
    let mut out_s = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let k = key(&points[order[i]]);
        let mut acc = Vec3::ZERO;
        let mut n = 0usize;
        let first = order[i];
        while i < order.len() && key(&points[order[i]]) == k {
            acc += points[order[i]];
            n += 1;
            i += 1;
        }
        out_p.push(acc * (1.0 / n as f64));
        out_s.push(pixels[first]);
    }
    (out_p, out_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disparity_boundaries() {
        let p = FrameDepthParams::new(1.0, 2.0).unwrap();
        assert_eq!(p.depth(1.0), 1.0);
        assert_eq!(p.depth(0.0), 2.0);
        assert!((p.depth(0.5) - 4.0 / 3.0).abs() < 1e-15);
        assert!(FrameDepthParams::new(2.0, 2.0).is_err());
        assert!(FrameDepthParams::new(3.0, 2.0).is_err());
    }

    #[test]
    fn depth_gradients_match_differences() {
        let h = 1e-6;
        for d in [0.0, 0.2, 0.77, 1.0] {
            let p = FrameDepthParams::new(0.7, 6.5).unwrap();
            let (gn, gf) = p.depth_gradient(d);
            let fd_n = (FrameDepthParams { z_near: 0.7 + h, ..p }.depth(d) - FrameDepthParams { z_near: 0.7 - h, ..p }.depth(d)) / (2.0 * h);
            let fd_f = (FrameDepthParams { z_far: 6.5 + h, ..p }.depth(d) - FrameDepthParams { z_far: 6.5 - h, ..p }.depth(d)) / (2.0 * h);
            assert!((gn - fd_n).abs() <= 1e-5 * gn.abs().max(1e-9) + 1e-9);
            assert!((gf - fd_f).abs() <= 1e-5 * gf.abs().max(1e-9) + 1e-9);
        }
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&mut [1.0, 100.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn aggregate_ignores_foreground_and_marks_invalid() {
        let d = [Grid::new(2, 1, 3.0), Grid::new(2, 1, 5.0), Grid::new(2, 1, 4.0)];
        let m = [
            Grid::from_vec(2, 1, vec![true, false]).unwrap(),
            Grid::from_vec(2, 1, vec![true, false]).unwrap(),
            Grid::from_vec(2, 1, vec![false, false]).unwrap(),
        ];
        let a = aggregate_background(&d, &m).unwrap();
        assert_eq!(a.data(), &[4.0, 0.0]);
    }

    #[test]
    fn planar_cloud() {
        let cam = CameraIntrinsics::new(20.0, 20.0, 8.0, 6.0, 16, 12).unwrap();
        let depth = Grid::new(16, 12, 3.0);
        let cloud = build_point_cloud(&depth, &cam, &CloudConfig::default()).unwrap();
        assert_eq!(cloud.len(), 16 * 12);
        assert!(cloud.points.iter().all(|p| p.z() == 3.0));
        let (_, _, d) = cloud.nearest_point(&cloud.points[7]);
        assert_eq!(d, 0.0);
        assert!(build_point_cloud(&Grid::new(16, 12, 0.0), &cam, &CloudConfig::default()).is_err());
    }

    #[test]
    fn ground_plane_distance() {
        let mut pts = Vec::new();
        for i in -20..=20 {
            for j in 0..40 {
                pts.push(Vec3::new(i as f64 * 0.05, 1.0, 2.0 + j as f64 * 0.05));
            }
        }
        let n = pts.len();
        let cloud = ScenePointCloud::from_points(pts, vec![[0, 0]; n], 0.25).unwrap();
        let (_, _, d) = cloud.nearest_point(&Vec3::new(0.0, 0.0, 2.5));
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn voxel_downsample_keeps_plane() {
        let cam = CameraIntrinsics::new(20.0, 20.0, 8.0, 6.0, 16, 12).unwrap();
        let depth = Grid::new(16, 12, 3.0);
        let cfg = CloudConfig {
            voxel_size: Some(0.5),
            ..CloudConfig::default()
        };
        let cloud = build_point_cloud(&depth, &cam, &cfg).unwrap();
        assert!(cloud.len() < 16 * 12);
        assert!(cloud.points.iter().all(|p| (p.z() - 3.0).abs() < 1e-12));
    }
}

//! Small fixed-size linear algebra and float helpers that work without `std`.

use core::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}
#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}
#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}
#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}
#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}
#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}
#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}
#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Sign with `signum(0) == 0`, used as the L1 subgradient.
#[inline]
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }
    #[inline]
    pub fn x(&self) -> f64 {
        self.0[0]
    }
    #[inline]
    pub fn y(&self) -> f64 {
        self.0[1]
    }
    #[inline]
    pub fn z(&self) -> f64 {
        self.0[2]
    }
    #[inline]
    pub fn dot(&self, o: &Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }
    #[inline]
    pub fn cross(&self, o: &Vec3) -> Vec3 {
        let [a, b, c] = self.0;
        let [d, e, f] = o.0;
        Vec3([b * f - c * e, c * d - a * f, a * e - b * d])
    }
    #[inline]
    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }
    #[inline]
    pub fn norm(&self) -> f64 {
        sqrt(self.norm_sq())
    }
    #[inline]
    pub fn l1(&self) -> f64 {
        self.0[0].abs() + self.0[1].abs() + self.0[2].abs()
    }
    #[inline]
    pub fn scale(&self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
    #[inline]
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
    pub fn from_slice(s: &[f64]) -> Vec3 {
        Vec3([s[0], s[1], s[2]])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}
impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}
impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}
impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        self.scale(s)
    }
}
impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        self.0[0] += o.0[0];
        self.0[1] += o.0[1];
        self.0[2] += o.0[2];
    }
}
impl SubAssign for Vec3 {
    #[inline]
    fn sub_assign(&mut self, o: Vec3) {
        self.0[0] -= o.0[0];
        self.0[1] -= o.0[1];
        self.0[2] -= o.0[2];
    }
}
impl Index<usize> for Vec3 {
    type Output = f64;
    #[inline]
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}
impl IndexMut<usize> for Vec3 {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Default for Mat3 {
    fn default() -> Self {
        Mat3::ZERO
    }
}

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Cross-product matrix `[w]x`, so that `skew(w) * v == w x v`.
    pub fn skew(w: &Vec3) -> Mat3 {
        let [x, y, z] = w.0;
        Mat3([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    }

    pub fn outer(a: &Vec3, b: &Vec3) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a.0[i] * b.0[j];
            }
        }
        Mat3(m)
    }

    #[inline]
    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    #[inline]
    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    /// `self^T * v` without materializing the transpose.
    #[inline]
    pub fn tmul_vec(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[1][0] * v.0[1] + m[2][0] * v.0[2],
            m[0][1] * v.0[0] + m[1][1] * v.0[1] + m[2][1] * v.0[2],
            m[0][2] * v.0[0] + m[1][2] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = *self;
        for row in out.0.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    /// Frobenius inner product.
    pub fn dot(&self, o: &Mat3) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += self.0[i][j] * o.0[i][j];
            }
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.0[i][0] * o.0[0][j] + self.0[i][1] * o.0[1][j] + self.0[i][2] * o.0[2][j];
            }
        }
        Mat3(m)
    }
}
impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut m = self.0;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += o.0[i][j];
            }
        }
        Mat3(m)
    }
}
impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, o: Mat3) -> Mat3 {
        let mut m = self.0;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] -= o.0[i][j];
            }
        }
        Mat3(m)
    }
}
impl AddAssign for Mat3 {
    fn add_assign(&mut self, o: Mat3) {
        for i in 0..3 {
            for j in 0..3 {
                self.0[i][j] += o.0[i][j];
            }
        }
    }
}

// Below this angle the closed-form coefficients lose precision to
// cancellation and their Taylor series are used instead.
const SERIES_ANGLE: f64 = 5e-2;

struct RodriguesCoeffs {
    a: f64,
    b: f64,
    da: f64,
    db: f64,
}

fn rodrigues_coeffs(phi: f64) -> RodriguesCoeffs {
    if phi < SERIES_ANGLE {
        let p2 = phi * phi;
        let p4 = p2 * p2;
        let p6 = p4 * p2;
        RodriguesCoeffs {
            a: 1.0 - p2 / 6.0 + p4 / 120.0 - p6 / 5040.0,
            b: 0.5 - p2 / 24.0 + p4 / 720.0 - p6 / 40320.0,
            da: -1.0 / 3.0 + p2 / 30.0 - p4 / 840.0 + p6 / 45360.0,
            db: -1.0 / 12.0 + p2 / 180.0 - p4 / 6720.0 + p6 / 453600.0,
        }
    } else {
        let (s, c) = (sin(phi), cos(phi));
        let p2 = phi * phi;
        RodriguesCoeffs {
            a: s / phi,
            b: (1.0 - c) / p2,
            da: (phi * c - s) / (p2 * phi),
            db: (phi * s - 2.0 * (1.0 - c)) / (p2 * p2),
        }
    }
}

/// Axis-angle to rotation matrix.
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let co = rodrigues_coeffs(w.norm());
    let k = Mat3::skew(w);
    Mat3::IDENTITY + k.scale(co.a) + (k * k).scale(co.b)
}

/// Rotation matrix and its three partial derivatives with respect to the
/// axis-angle components.
pub fn rodrigues_with_jacobian(w: &Vec3) -> (Mat3, [Mat3; 3]) {
    let co = rodrigues_coeffs(w.norm());
    let k = Mat3::skew(w);
    let k2 = k * k;
    let r = Mat3::IDENTITY + k.scale(co.a) + k2.scale(co.b);
    let mut d = [Mat3::ZERO; 3];
    for (i, di) in d.iter_mut().enumerate() {
        let mut e = Vec3::ZERO;
        e.0[i] = 1.0;
        let ei = Mat3::skew(&e);
        *di = k.scale(co.da * w.0[i])
            + ei.scale(co.a)
            + k2.scale(co.db * w.0[i])
            + (ei * k + k * ei).scale(co.b);
    }
    (r, d)
}

/// Rotation about a unit axis, as an axis-angle vector.
pub fn axis_angle(axis: Vec3, angle: f64) -> Vec3 {
    axis.scale(angle / axis.norm())
}

/// Matrix to axis-angle (principal branch, angle in [0, pi]).
pub fn rotation_to_axis_angle(r: &Mat3) -> Vec3 {
    let m = &r.0;
    let tr = m[0][0] + m[1][1] + m[2][2];
    let cos_a = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = libm::acos(cos_a);
    if angle < 1e-12 {
        return Vec3::ZERO;
    }
    let v = Vec3([m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]]);
    let s = v.norm();
    if s > 1e-9 {
        return v.scale(angle / s);
    }
    // angle close to pi: axis from the diagonal of (R + I) / 2
    let xx = ((m[0][0] + 1.0) * 0.5).max(0.0);
    let yy = ((m[1][1] + 1.0) * 0.5).max(0.0);
    let zz = ((m[2][2] + 1.0) * 0.5).max(0.0);
    let axis = if xx >= yy && xx >= zz {
        let x = sqrt(xx);
        Vec3([x, m[0][1] / (2.0 * x), m[0][2] / (2.0 * x)])
    } else if yy >= zz {
        let y = sqrt(yy);
        Vec3([m[0][1] / (2.0 * y), y, m[1][2] / (2.0 * y)])
    } else {
        let z = sqrt(zz);
        Vec3([m[0][2] / (2.0 * z), m[1][2] / (2.0 * z), z])
    };
    axis.scale(angle / axis.norm())
}

/// FNV-1a accumulator used to fingerprint discrete decisions.
pub(crate) struct Fnv(pub(crate) u64);
impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    #[inline]
    pub(crate) fn push(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

//! Continuous 6D rotation parameters for learnable camera extrinsics.

use crate::error::{Error, Result};
use crate::types::{check_rotation, Mat3, PoseSE3, Vec3};

/// First two rotation columns (before orthonormalization) and a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseParam {
    pub rot6d: [f64; 6],
    pub translation: Vec3,
}

/// Gradient of a scalar with respect to a [`PoseParam`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseGrad {
    pub rot6d: [f64; 6],
    pub translation: Vec3,
}

impl PoseGrad {
    pub fn as_array(&self) -> [f64; 9] {
        let r = self.rot6d;
        let t = self.translation;
        [r[0], r[1], r[2], r[3], r[4], r[5], t.x, t.y, t.z]
    }
}

impl PoseParam {
    pub fn from_pose(pose: &PoseSE3) -> Result<Self> {
        Ok(PoseParam {
            rot6d: matrix_to_rot6d(&pose.rotation)?,
            translation: pose.translation,
        })
    }

    pub fn to_pose(&self) -> Result<PoseSE3> {
        Ok(PoseSE3 {
            rotation: rot6d_to_matrix(&self.rot6d)?,
            translation: self.translation,
        })
    }

    pub fn as_array(&self) -> [f64; 9] {
        let r = self.rot6d;
        let t = self.translation;
        [r[0], r[1], r[2], r[3], r[4], r[5], t.x, t.y, t.z]
    }

    pub fn from_array(a: &[f64; 9]) -> Self {
        PoseParam {
            rot6d: [a[0], a[1], a[2], a[3], a[4], a[5]],
            translation: Vec3::new(a[6], a[7], a[8]),
        }
    }

    /// Chain rule from `dL/dR` and `dL/do` to the nine parameters.
    pub fn backward(&self, d_rotation: &Mat3, d_translation: &Vec3) -> Result<PoseGrad> {
        Ok(PoseGrad {
            rot6d: rot6d_backward(&self.rot6d, d_rotation)?,
            translation: *d_translation,
        })
    }
}

fn columns(r: &[f64; 6]) -> (Vec3, Vec3) {
    (Vec3::new(r[0], r[1], r[2]), Vec3::new(r[3], r[4], r[5]))
}

struct GramSchmidt {
    a1_norm: f64,
    u_norm: f64,
    c1: Vec3,
    c2: Vec3,
    a2: Vec3,
}

fn gram_schmidt(r: &[f64; 6]) -> Result<GramSchmidt> {
    let (a1, a2) = columns(r);
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite rotation parameters".into()));
    }
    let a1_norm = a1.norm();
    if a1_norm < 1e-12 {
        return Err(Error::Numeric("first rotation column is zero".into()));
    }
    let c1 = a1 / a1_norm;
    let u = a2 - c1 * c1.dot(&a2);
    let u_norm = u.norm();
    if u_norm < 1e-12 * a2.norm().max(1e-300) || u_norm < 1e-300 {
        return Err(Error::Numeric("rotation columns are parallel".into()));
    }
    Ok(GramSchmidt {
        a1_norm,
        u_norm,
        c1,
        c2: u / u_norm,
        a2,
    })
}

/// Gram–Schmidt on the two columns; the third is their cross product.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Mat3> {
    let g = gram_schmidt(r)?;
    let c3 = g.c1.cross(&g.c2);
    Ok(Mat3::from_columns(&[g.c1, g.c2, c3]))
}

pub fn matrix_to_rot6d(m: &Mat3) -> Result<[f64; 6]> {
    check_rotation(m)?;
    Ok([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// `dL/dr` given `dL/dR` for `R = rot6d_to_matrix(r)`.
pub fn rot6d_backward(r: &[f64; 6], d_rotation: &Mat3) -> Result<[f64; 6]> {
    let g = gram_schmidt(r)?;
    let g1: Vec3 = d_rotation.column(0).into();
    let g2: Vec3 = d_rotation.column(1).into();
    let g3: Vec3 = d_rotation.column(2).into();
    let mut dc1 = g1 + g.c2.cross(&g3);
    let dc2 = g2 + g3.cross(&g.c1);
    let gu = (dc2 - g.c2 * g.c2.dot(&dc2)) / g.u_norm;
    let da2 = gu - g.c1 * g.c1.dot(&gu);
    dc1 -= gu * g.c1.dot(&g.a2) + g.a2 * g.c1.dot(&gu);
    let da1 = (dc1 - g.c1 * g.c1.dot(&dc1)) / g.a1_norm;
    Ok([da1.x, da1.y, da1.z, da2.x, da2.y, da2.z])
}

/// Accumulates per-ray gradients into `dL/dR` and `dL/do` for one camera.
/// Rays are `o + t·R·d̂_c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseGradAccum {
    pub d_rotation: Mat3,
    pub d_translation: Vec3,
}

impl Default for PoseGradAccum {
    fn default() -> Self {
        PoseGradAccum {
            d_rotation: Mat3::zeros(),
            d_translation: Vec3::zeros(),
        }
    }
}

impl PoseGradAccum {
    /// `camera_dir` is the unit camera-frame direction of the ray.
    pub fn add_ray(&mut self, d_origin: &Vec3, d_direction: &Vec3, camera_dir: &Vec3) {
        self.d_translation += d_origin;
        self.d_rotation += d_direction * camera_dir.transpose();
    }

    pub fn merge(&mut self, other: &PoseGradAccum) {
        self.d_rotation += other.d_rotation;
        self.d_translation += other.d_translation;
    }
}

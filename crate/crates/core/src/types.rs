//! Cameras, poses, rays, and per-frame observation containers.
//!
//! Conventions: camera frame is x right, y down, z forward (right-handed).
//! Rays are cast through pixel centers, i.e. pixel `(col, row)` samples the
//! continuous image point `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Input(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::Input(format!("cx={} outside [0, {})", self.cx, self.width)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Input(format!("cy={} outside [0, {})", self.cy, self.height)));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Un-normalized camera-frame direction through the center of pixel `(col, row)`.
    pub fn pixel_direction(&self, col: u32, row: u32) -> Vec3 {
        Vec3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Same image downscaled by an integer factor.
    pub fn downscaled(&self, factor: u32) -> Camera {
        let f = factor as f64;
        Camera {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

const ROTATION_TOL: f64 = 1e-6;

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite translation".into()));
        }
        Ok(PoseSE3 {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        PoseSE3 {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Angle of the relative rotation, in degrees.
    pub fn rotation_angle_to(&self, other: &PoseSE3) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

pub(crate) fn check_rotation(r: &Mat3) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("non-finite rotation".into()));
    }
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if err > ROTATION_TOL {
        return Err(Error::Input(format!("rotation not orthonormal (|RᵀR − I| = {err:e})")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::Input(format!("rotation determinant {det} ≠ 1")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Slab test; returns the parametric interval of the ray inside the box.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        if t1 > t0.max(0.0) {
            Some((t0.max(0.0), t1))
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Input("degenerate ray direction".into()));
        }
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::Input(format!("invalid ray bounds [{t_near}, {t_far}]")));
        }
        Ok(Ray {
            origin,
            direction: direction / n,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Restricts the ray interval to the part inside `aabb`.
    pub fn clipped(&self, aabb: &Aabb) -> Option<Ray> {
        let (a, b) = aabb.intersect(&self.origin, &self.direction)?;
        let t0 = a.max(self.t_near);
        let t1 = b.min(self.t_far);
        (t1 > t0).then_some(Ray {
            t_near: t0,
            t_far: t1,
            ..*self
        })
    }
}

/// Casts the world-space ray through the center of pixel `px = (col, row)`.
pub fn pixel_ray(camera: &Camera, pose: &PoseSE3, px: (u32, u32)) -> Result<Ray> {
    let (col, row) = px;
    if col >= camera.width || row >= camera.height {
        return Err(Error::Input(format!(
            "pixel ({col}, {row}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    let d_cam = camera.pixel_direction(col, row);
    let dir = (pose.rotation * d_cam).normalize();
    Ok(Ray {
        origin: pose.translation,
        direction: dir,
        t_near: 0.0,
        t_far: f64::INFINITY,
    })
}

/// Row-major 2D map.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Image {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Input(format!(
                "map of {} values cannot be {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, col: u32, row: u32) -> &T {
        &self.data[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, value: T) {
        let w = self.width as usize;
        self.data[row as usize * w + col as usize] = value;
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type RgbImage = Image<[f64; 3]>;
pub type LabelMap = Image<u16>;
pub type ScalarMap = Image<f64>;

/// Label value for pixels excluded from evaluation.
pub const VOID_LABEL: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticSchema {
    pub num_classes: usize,
    pub thing_flags: Vec<bool>,
    pub num_instance_slots: usize,
    pub class_names: Vec<String>,
}

impl SemanticSchema {
    pub fn new(thing_flags: Vec<bool>, num_instance_slots: usize, class_names: Vec<String>) -> Result<Self> {
        let s = SemanticSchema {
            num_classes: thing_flags.len(),
            thing_flags,
            num_instance_slots,
            class_names,
        };
        s.validate()?;
        Ok(s)
    }

    /// Two classes (background stuff, fruit thing).
    pub fn fruit(num_instance_slots: usize) -> Self {
        SemanticSchema {
            num_classes: 2,
            thing_flags: vec![false, true],
            num_instance_slots,
            class_names: vec!["background".into(), "fruit".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thing_flags.len() != self.num_classes || self.class_names.len() != self.num_classes {
            return Err(Error::Input("schema class arrays disagree with num_classes".into()));
        }
        if self.thing_flags.iter().all(|&t| t) {
            return Err(Error::Input("schema needs at least one stuff class".into()));
        }
        if self.num_instance_slots < 2 {
            return Err(Error::Input("schema needs at least 2 instance slots".into()));
        }
        Ok(())
    }

    pub fn is_thing(&self, class: u16) -> bool {
        self.thing_flags.get(class as usize).copied().unwrap_or(false)
    }

    /// First stuff class; the label given to discarded thing masks.
    pub fn background_class(&self) -> u16 {
        self.thing_flags.iter().position(|t| !t).unwrap_or(0) as u16
    }
}

/// One posed observation with per-frame detector output.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticFrame {
    pub index: usize,
    pub rgb: RgbImage,
    pub sem_det: LabelMap,
    pub inst_det: LabelMap,
    pub conf: ScalarMap,
    pub pose_init: PoseSE3,
    pub camera: Camera,
}

impl PanopticFrame {
    pub fn validate(&self, schema: &SemanticSchema) -> Result<()> {
        let (w, h) = (self.camera.width, self.camera.height);
        let shapes_ok = [
            (self.rgb.width, self.rgb.height),
            (self.sem_det.width, self.sem_det.height),
            (self.inst_det.width, self.inst_det.height),
            (self.conf.width, self.conf.height),
        ]
        .iter()
        .all(|&s| s == (w, h));
        if !shapes_ok {
            return Err(Error::Input(format!("frame {} map shapes differ", self.index)));
        }
        for (i, (&s, &k)) in self.sem_det.data.iter().zip(&self.inst_det.data).enumerate() {
            if s as usize >= schema.num_classes {
                return Err(Error::Input(format!(
                    "frame {} pixel {i}: class {s} outside [0, {})",
                    self.index, schema.num_classes
                )));
            }
            if k > 0 && !schema.is_thing(s) {
                return Err(Error::Input(format!(
                    "frame {} pixel {i}: instance {k} on stuff class {s}",
                    self.index
                )));
            }
        }
        if self.conf.data.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Input(format!("frame {} confidence outside [0,1]", self.index)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::new(50.0, 60.0, 10.5, 8.5, 21, 17).unwrap()
    }

    #[test]
    fn principal_ray_points_forward() {
        let r = pixel_ray(&cam(), &PoseSE3::identity(), (10, 8)).unwrap();
        assert!((r.direction - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(r.origin, Vec3::zeros());
    }

    #[test]
    fn translation_moves_origin_only() {
        let rot = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner();
        let pose = PoseSE3::new(rot, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let r = pixel_ray(&cam(), &pose, (10, 8)).unwrap();
        assert_eq!(r.origin, Vec3::new(1.0, 2.0, 3.0));
        assert!((r.direction - rot * Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn focal_offset_pixel_is_diagonal() {
        // cx + fx = 60.5 → pixel column 60 in a wide image
        let c = Camera::new(50.0, 50.0, 10.5, 8.5, 80, 17).unwrap();
        let r = pixel_ray(&c, &PoseSE3::identity(), (60, 8)).unwrap();
        let expect = Vec3::new(1.0, 0.0, 1.0).normalize();
        assert!((r.direction - expect).norm() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        assert!(pixel_ray(&cam(), &PoseSE3::identity(), (21, 0)).is_err());
        assert!(pixel_ray(&cam(), &PoseSE3::identity(), (0, 17)).is_err());
    }

    #[test]
    fn camera_invariants_enforced() {
        assert!(Camera::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Camera::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn all_pixel_rays_unit_and_invertible() {
        let c = cam();
        let rot = nalgebra::Rotation3::from_euler_angles(0.4, 0.7, -1.1).into_inner();
        let pose = PoseSE3::new(rot, Vec3::new(-0.3, 0.2, 5.0)).unwrap();
        let inv = pose.inverse();
        for row in 0..c.height {
            for col in 0..c.width {
                let r = pixel_ray(&c, &pose, (col, row)).unwrap();
                assert!((r.direction.norm() - 1.0).abs() < 1e-9);
                let canonical = c.pixel_direction(col, row).normalize();
                let back_dir = inv.transform_vector(&r.direction);
                let back_origin = inv.transform_point(&r.origin);
                assert!((back_dir - canonical).norm() < 1e-9);
                assert!(back_origin.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn aabb_clip() {
        let b = Aabb::new(Vec3::new(-1.0, -1.0, 2.0), Vec3::new(1.0, 1.0, 4.0));
        let r = Ray::new(Vec3::zeros(), Vec3::z(), 0.0, f64::INFINITY).unwrap();
        let c = r.clipped(&b).unwrap();
        assert!((c.t_near - 2.0).abs() < 1e-12 && (c.t_far - 4.0).abs() < 1e-12);
        let miss = Ray::new(Vec3::new(5.0, 0.0, 0.0), Vec3::z(), 0.0, 10.0).unwrap();
        assert!(miss.clipped(&b).is_none());
    }
}

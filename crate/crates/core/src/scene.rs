//! Analytic sphere-and-slab scenes: exact ground-truth rendering, simulated
//! detector output, noisy odometry, and dataset export.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{Dataset, GroundTruthMaps, Manifest, NoiseConfig, WindowSpec};
use crate::error::{Error, Result};
use crate::types::{pixel_ray, Aabb, Camera, Image, LabelMap, Mat3, PanopticFrame, PoseSE3, Ray, RgbImage, ScalarMap, SemanticSchema, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: [f64; 3],
    /// Global instance id, > 0.
    pub instance: u16,
}

/// Axis-aligned box of background material with a smooth sinusoidal texture.
#[derive(Clone, Debug, PartialEq)]
pub struct Slab {
    pub bounds: Aabb,
    pub albedo: [f64; 3],
    /// Texture periods along x and y (m).
    pub period: [f64; 2],
    pub contrast: f64,
}

impl Slab {
    fn albedo_at(&self, p: &Vec3) -> [f64; 3] {
        let m = 1.0 + self.contrast * (2.0 * PI * p.x / self.period[0]).sin() * (2.0 * PI * p.y / self.period[1]).sin();
        [self.albedo[0] * m, self.albedo[1] * m, self.albedo[2] * m]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spheres: Vec<Sphere>,
    pub slabs: Vec<Slab>,
    /// Unit vector toward the light.
    pub light: Vec3,
    pub ambient: f64,
    /// Region containing every primitive part that cameras can see.
    pub bounds: Aabb,
    pub schema: SemanticSchema,
}

/// Straight rail with evenly spaced frames, all sharing one orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub start: Vec3,
    pub end: Vec3,
    pub frames: usize,
    pub rotation: Mat3,
}

impl Trajectory {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        (0..self.frames)
            .map(|i| {
                let a = if self.frames > 1 { i as f64 / (self.frames - 1) as f64 } else { 0.0 };
                PoseSE3 {
                    rotation: self.rotation,
                    translation: self.start + (self.end - self.start) * a,
                }
            })
            .collect()
    }
}

/// A complete generation recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePreset {
    pub name: String,
    pub scene: SyntheticScene,
    pub trajectory: Trajectory,
    pub camera: Camera,
    /// Distance from the rail to the background face, for the frustum length.
    pub slab_distance: f64,
}

impl ScenePreset {
    /// Width of the visible background strip along the rail.
    pub fn frustum_length(&self) -> f64 {
        self.camera.width as f64 * self.slab_distance / self.camera.fx
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(desk()),
            "twins" => Ok(twins()),
            "wall" => Ok(wall()),
            other => Err(Error::Usage(format!("unknown scene preset '{other}' (desk, twins, wall)"))),
        }
    }

    pub fn with_frames(mut self, frames: usize) -> Self {
        self.trajectory.frames = frames;
        self
    }

    pub fn with_camera_scale(mut self, factor: u32) -> Self {
        self.camera = self.camera.downscaled(factor);
        self
    }
}

fn background_slab(x0: f64, x1: f64) -> Slab {
    Slab {
        bounds: Aabb::new(Vec3::new(x0, -0.5, 0.55), Vec3::new(x1, 0.5, 0.6)),
        albedo: [0.3, 0.55, 0.25],
        period: [0.35, 0.3],
        contrast: 0.35,
    }
}

fn light() -> Vec3 {
    Vec3::new(-0.4, -0.6, -1.0).normalize()
}

/// Eight fruits in front of a textured slab, 1.5 m rail, 12 frames at 96×96.
pub fn desk() -> ScenePreset {
    let layout = [
        (-0.15, -0.15, 0.45, 0.05),
        (0.12, 0.12, 0.47, 0.045),
        (0.36, -0.05, 0.44, 0.06),
        (0.6, 0.17, 0.46, 0.04),
        (0.84, -0.17, 0.45, 0.055),
        (1.1, 0.05, 0.43, 0.05),
        (1.36, 0.15, 0.47, 0.045),
        (1.62, -0.1, 0.45, 0.06),
    ];
    let albedos = [[0.85, 0.2, 0.15], [0.9, 0.55, 0.1], [0.8, 0.15, 0.3], [0.95, 0.7, 0.2]];
    let spheres = layout
        .iter()
        .enumerate()
        .map(|(i, &(x, y, z, r))| Sphere {
            center: Vec3::new(x, y, z),
            radius: r,
            albedo: albedos[i % albedos.len()],
            instance: i as u16 + 1,
        })
        .collect();
    ScenePreset {
        name: "desk".into(),
        scene: SyntheticScene {
            spheres,
            slabs: vec![background_slab(-0.6, 2.1)],
            light: light(),
            ambient: 0.35,
            bounds: Aabb::new(Vec3::new(-0.45, -0.4, 0.3), Vec3::new(1.95, 0.4, 0.62)),
            schema: SemanticSchema::fruit(16),
        },
        trajectory: Trajectory {
            start: Vec3::zeros(),
            end: Vec3::new(1.5, 0.0, 0.0),
            frames: 12,
            rotation: Mat3::identity(),
        },
        camera: Camera {
            fx: 80.0,
            fy: 80.0,
            cx: 48.0,
            cy: 48.0,
            width: 96,
            height: 96,
        },
        slab_distance: 0.55,
    }
}

/// Two identical fruits farther apart than the visible strip.
pub fn twins() -> ScenePreset {
    let fruit = |x: f64, id: u16| Sphere {
        center: Vec3::new(x, 0.0, 0.45),
        radius: 0.06,
        albedo: [0.85, 0.2, 0.15],
        instance: id,
    };
    ScenePreset {
        name: "twins".into(),
        scene: SyntheticScene {
            spheres: vec![fruit(0.0, 1), fruit(1.2, 2)],
            slabs: vec![background_slab(-0.6, 1.8)],
            light: light(),
            ambient: 0.35,
            bounds: Aabb::new(Vec3::new(-0.45, -0.4, 0.3), Vec3::new(1.65, 0.4, 0.62)),
            schema: SemanticSchema::fruit(8),
        },
        trajectory: Trajectory {
            start: Vec3::zeros(),
            end: Vec3::new(1.2, 0.0, 0.0),
            frames: 12,
            rotation: Mat3::identity(),
        },
        camera: Camera {
            fx: 40.0,
            fy: 40.0,
            cx: 24.0,
            cy: 24.0,
            width: 48,
            height: 48,
        },
        slab_distance: 0.55,
    }
}

/// A flat red wall and nothing else.
pub fn wall() -> ScenePreset {
    ScenePreset {
        name: "wall".into(),
        scene: SyntheticScene {
            spheres: vec![],
            slabs: vec![Slab {
                bounds: Aabb::new(Vec3::new(-1.0, -1.0, 0.55), Vec3::new(1.5, 1.0, 0.6)),
                albedo: [1.0, 0.0, 0.0],
                period: [1.0, 1.0],
                contrast: 0.0,
            }],
            light: Vec3::new(0.0, 0.0, -1.0),
            ambient: 1.0,
            bounds: Aabb::new(Vec3::new(-0.6, -0.5, 0.3), Vec3::new(1.1, 0.5, 0.62)),
            schema: SemanticSchema::fruit(4),
        },
        trajectory: Trajectory {
            start: Vec3::zeros(),
            end: Vec3::new(0.5, 0.0, 0.0),
            frames: 4,
            rotation: Mat3::identity(),
        },
        camera: Camera {
            fx: 16.0,
            fy: 16.0,
            cx: 12.0,
            cy: 12.0,
            width: 24,
            height: 24,
        },
        slab_distance: 0.55,
    }
}

/// Closest intersection of a ray with anything in the scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hit {
    Sphere { index: usize, t: f64 },
    Slab { index: usize, t: f64, normal: Vec3 },
}

impl Hit {
    pub fn t(&self) -> f64 {
        match *self {
            Hit::Sphere { t, .. } | Hit::Slab { t, .. } => t,
        }
    }
}

fn sphere_hit(s: &Sphere, ray: &Ray) -> Option<f64> {
    let oc = ray.origin - s.center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - s.radius * s.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [-b - sq, -b + sq].into_iter().find(|&t| t > 1e-9)
}

fn slab_hit(s: &Slab, ray: &Ray) -> Option<(f64, Vec3)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut normal = Vec3::zeros();
    for i in 0..3 {
        let d = ray.direction[i];
        if d.abs() < 1e-15 {
            if ray.origin[i] < s.bounds.min[i] || ray.origin[i] > s.bounds.max[i] {
                return None;
            }
            continue;
        }
        let a = (s.bounds.min[i] - ray.origin[i]) / d;
        let b = (s.bounds.max[i] - ray.origin[i]) / d;
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t0 {
            t0 = near;
            normal = Vec3::zeros();
            normal[i] = -d.signum();
        }
        t1 = t1.min(far);
    }
    (t1 >= t0 && t0 > 1e-9).then_some((t0, normal))
}

impl SyntheticScene {
    pub fn closest_hit(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (index, s) in self.spheres.iter().enumerate() {
            if let Some(t) = sphere_hit(s, ray) {
                if best.is_none_or(|b| t < b.t()) {
                    best = Some(Hit::Sphere { index, t });
                }
            }
        }
        for (index, s) in self.slabs.iter().enumerate() {
            if let Some((t, normal)) = slab_hit(s, ray) {
                if best.is_none_or(|b| t < b.t()) {
                    best = Some(Hit::Slab { index, t, normal });
                }
            }
        }
        best
    }

    fn shade(&self, albedo: [f64; 3], normal: &Vec3) -> [f64; 3] {
        let k = self.ambient + (1.0 - self.ambient) * normal.dot(&self.light).max(0.0);
        [
            (albedo[0] * k).clamp(0.0, 1.0),
            (albedo[1] * k).clamp(0.0, 1.0),
            (albedo[2] * k).clamp(0.0, 1.0),
        ]
    }

    /// Color, range, class, and instance seen along one ray.
    pub fn trace(&self, ray: &Ray, far: f64) -> ([f64; 3], f64, u16, u16) {
        match self.closest_hit(ray) {
            None => ([0.0; 3], far, self.schema.background_class(), 0),
            Some(Hit::Sphere { index, t }) => {
                let s = &self.spheres[index];
                let n = (ray.at(t) - s.center) / s.radius;
                (self.shade(s.albedo, &n), t, 1, s.instance)
            }
            Some(Hit::Slab { index, t, normal }) => {
                let s = &self.slabs[index];
                (self.shade(s.albedo_at(&ray.at(t)), &normal), t, self.schema.background_class(), 0)
            }
        }
    }
}

/// Exact per-pixel ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub rgb: RgbImage,
    pub depth: ScalarMap,
    pub sem: LabelMap,
    pub inst: LabelMap,
}

/// Range reported where a pixel sees nothing.
pub const MISS_DEPTH: f64 = 10.0;

pub fn analytic_render(scene: &SyntheticScene, camera: &Camera, pose: &PoseSE3) -> Result<GroundTruth> {
    let (w, h) = (camera.width, camera.height);
    let mut gt = GroundTruth {
        rgb: Image::filled(w, h, [0.0; 3]),
        depth: Image::filled(w, h, MISS_DEPTH),
        sem: Image::filled(w, h, 0),
        inst: Image::filled(w, h, 0),
    };
    for row in 0..h {
        for col in 0..w {
            let ray = pixel_ray(camera, pose, (col, row))?;
            let (c, d, s, k) = scene.trace(&ray, MISS_DEPTH);
            gt.rgb.set(col, row, c);
            gt.depth.set(col, row, d);
            gt.sem.set(col, row, s);
            gt.inst.set(col, row, k);
        }
    }
    Ok(gt)
}

pub const MAX_DETECTION_ID: u16 = 255;

/// Simulated detector output for one frame: `(sem, inst, conf)`.
///
/// With `shuffle` set, present instances get fresh ids drawn without
/// replacement from 1..=[`MAX_DETECTION_ID`], as an untracked detector would
/// number them; otherwise they keep their global ids. Each mask is
/// dropped (relabeled as stuff) with probability `dropout`, and kept masks get
/// confidence `1 − U(0, conf_noise)`.
pub fn make_detections<R: Rng + ?Sized>(
    gt: &GroundTruth,
    schema: &SemanticSchema,
    rng: &mut R,
    dropout: f64,
    shuffle: bool,
    conf_noise: f64,
) -> (LabelMap, LabelMap, ScalarMap) {
    let mut present: Vec<u16> = gt.inst.data.iter().copied().filter(|&i| i != 0).collect();
    present.sort_unstable();
    present.dedup();
    let relabel: Vec<u16> = if shuffle {
        rand::seq::index::sample(rng, MAX_DETECTION_ID as usize, present.len())
            .into_iter()
            .map(|i| i as u16 + 1)
            .collect()
    } else {
        present.clone()
    };
    let mut sem = gt.sem.clone();
    let mut inst = gt.inst.clone();
    let mut conf = Image::filled(gt.inst.width, gt.inst.height, 1.0);
    for (k, &id) in present.iter().enumerate() {
        let drop = rng.random::<f64>() < dropout;
        let c = 1.0 - conf_noise * rng.random::<f64>();
        for i in 0..gt.inst.data.len() {
            if gt.inst.data[i] != id {
                continue;
            }
            if drop {
                inst.data[i] = 0;
                sem.data[i] = schema.background_class();
            } else {
                inst.data[i] = relabel[k];
                conf.data[i] = c;
            }
        }
    }
    (sem, inst, conf)
}

/// Adds Gaussian translation noise per axis and a rotation about a uniformly
/// random axis by a Gaussian angle, applied in the camera frame.
pub fn perturb_poses<R: Rng + ?Sized>(poses: &[PoseSE3], sigma_t: f64, sigma_r_deg: f64, rng: &mut R) -> Result<Vec<PoseSE3>> {
    if !(sigma_t >= 0.0 && sigma_r_deg >= 0.0) {
        return Err(Error::Input("pose noise must be non-negative".into()));
    }
    let mut out = Vec::with_capacity(poses.len());
    for p in poses {
        let mut q = *p;
        if sigma_t > 0.0 {
            let n = Normal::new(0.0, sigma_t).map_err(|e| Error::Input(e.to_string()))?;
            for i in 0..3 {
                q.translation[i] += n.sample(rng);
            }
        }
        if sigma_r_deg > 0.0 {
            let axis = loop {
                let v = Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
                if v.norm() > 1e-12 {
                    break Unit::new_normalize(v);
                }
            };
            let n = Normal::new(0.0, sigma_r_deg.to_radians()).map_err(|e| Error::Input(e.to_string()))?;
            let dr = Rotation3::from_axis_angle(&axis, n.sample(rng));
            q.rotation = p.rotation * dr.into_inner();
        }
        out.push(q);
    }
    Ok(out)
}

/// RNG streams of the generator, so noise settings never shift one another.
const STREAM_POSES: u64 = 11;
const STREAM_DETECTIONS: u64 = 12;

/// Renders the preset, simulates detections and odometry, and assembles a
/// dataset with ground truth and an every-second-frame train split.
pub fn generate(preset: &ScenePreset, noise: &NoiseConfig, seed: u64) -> Result<Dataset> {
    let gt_poses = preset.trajectory.poses();
    let mut pose_rng = ChaCha8Rng::seed_from_u64(seed);
    pose_rng.set_stream(STREAM_POSES);
    let mut det_rng = ChaCha8Rng::seed_from_u64(seed);
    det_rng.set_stream(STREAM_DETECTIONS);
    let noisy = perturb_poses(&gt_poses, noise.sigma_t, noise.sigma_r_deg, &mut pose_rng)?;
    let mut frames = Vec::with_capacity(gt_poses.len());
    let mut gt = Vec::with_capacity(gt_poses.len());
    for (i, (pose, init)) in gt_poses.iter().zip(&noisy).enumerate() {
        let g = analytic_render(&preset.scene, &preset.camera, pose)?;
        let (sem, inst, conf) = make_detections(&g, &preset.scene.schema, &mut det_rng, noise.dropout, noise.shuffle_ids, noise.conf_noise);
        frames.push(PanopticFrame {
            index: i,
            rgb: g.rgb.clone(),
            sem_det: sem,
            inst_det: inst,
            conf,
            pose_init: *init,
            camera: preset.camera,
        });
        gt.push(Some(GroundTruthMaps {
            sem: g.sem,
            inst: g.inst,
            depth: g.depth,
        }));
    }
    let n = frames.len();
    let train: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let train_ids: Vec<usize> = (0..n).filter(|&i| train[i]).collect();
    let middle = train_ids.get(train_ids.len() / 2).copied().unwrap_or(0);
    let t = &preset.trajectory;
    let b = &preset.scene.bounds;
    let manifest = Manifest {
        seed,
        scene: preset.name.clone(),
        noise: noise.clone(),
        frustum_length: preset.frustum_length(),
        trajectory_start: t.start.into(),
        trajectory_end: t.end.into(),
        num_frames: n,
        train,
        windows: vec![WindowSpec {
            frames: (0..n).collect(),
            middle,
        }],
        scene_min: b.min.into(),
        scene_max: b.max.into(),
    };
    Ok(Dataset {
        schema: preset.scene.schema.clone(),
        camera: preset.camera,
        frames,
        gt,
        gt_poses: Some(gt_poses),
        manifest: Some(manifest),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miss_renders_background() {
        let p = desk();
        let ray = Ray::new(Vec3::zeros(), -Vec3::z(), 0.0, f64::INFINITY).unwrap();
        let (c, d, s, k) = p.scene.trace(&ray, MISS_DEPTH);
        assert_eq!((c, d, s, k), ([0.0; 3], MISS_DEPTH, 0, 0));
    }

    #[test]
    fn center_ray_depth() {
        let p = desk();
        let s = &p.scene.spheres[2];
        let origin = Vec3::new(s.center.x, s.center.y, 0.0);
        let ray = Ray::new(origin, Vec3::z(), 0.0, f64::INFINITY).unwrap();
        let (_, d, sem, k) = p.scene.trace(&ray, MISS_DEPTH);
        assert!((d - (s.center.z - s.radius)).abs() < 1e-12);
        assert_eq!((sem, k), (1, s.instance));
    }

    #[test]
    fn exact_detections_without_noise() {
        let p = desk();
        let g = analytic_render(&p.scene, &p.camera, &PoseSE3::identity()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, k, c) = make_detections(&g, &p.scene.schema, &mut rng, 0.0, false, 0.0);
        assert_eq!(s, g.sem);
        assert_eq!(k, g.inst);
        assert!(c.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_noise_keeps_poses() {
        let poses = desk().trajectory.poses();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb_poses(&poses, 0.0, 0.0, &mut rng).unwrap(), poses);
    }
}

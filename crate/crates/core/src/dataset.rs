//! On-disk dataset layout: loading, exporting, and detection filtering.
//!
//! ```text
//! schema.json  camera.json  manifest.json (optional)
//! frames/00000.rgb.png        8-bit RGB
//! frames/00000.sem.png        16-bit class indices
//! frames/00000.inst.png       16-bit instance ids (0 = stuff)
//! frames/00000.conf.png       16-bit, value/65535 (optional)
//! frames/00000.pose.txt       12 numbers, row-major [R|o]
//! frames/00000.gt_sem.png     optional ground truth, same encodings
//! frames/00000.gt_inst.png
//! frames/00000.gt_depth.png   16-bit millimeters along the ray
//! gt/00000.pose.txt           optional ground-truth poses
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Camera, Image, LabelMap, Mat3, PanopticFrame, PoseSE3, RgbImage, ScalarMap, SemanticSchema, Vec3};
use crate::util::median;

/// Optional ground-truth maps of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMaps {
    pub sem: LabelMap,
    pub inst: LabelMap,
    /// Meters along the ray.
    pub depth: ScalarMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_t: f64,
    pub sigma_r_deg: f64,
    pub dropout: f64,
    pub shuffle_ids: bool,
    pub conf_noise: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_t: 0.0,
            sigma_r_deg: 0.0,
            dropout: 0.0,
            shuffle_ids: false,
            conf_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub frames: Vec<usize>,
    /// Frame whose panoptic output is evaluated.
    pub middle: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scene: String,
    pub noise: NoiseConfig,
    pub frustum_length: f64,
    pub trajectory_start: [f64; 3],
    pub trajectory_end: [f64; 3],
    pub num_frames: usize,
    /// `true` for training frames, `false` for held-out ones.
    pub train: Vec<bool>,
    pub windows: Vec<WindowSpec>,
    pub scene_min: [f64; 3],
    pub scene_max: [f64; 3],
}

impl Manifest {
    pub fn trajectory_length(&self) -> f64 {
        (Vec3::from(self.trajectory_end) - Vec3::from(self.trajectory_start)).norm()
    }

    /// Unit vector of travel.
    pub fn trajectory_direction(&self) -> Vec3 {
        (Vec3::from(self.trajectory_end) - Vec3::from(self.trajectory_start)).normalize()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: SemanticSchema,
    pub camera: Camera,
    pub frames: Vec<PanopticFrame>,
    pub gt: Vec<Option<GroundTruthMaps>>,
    pub gt_poses: Option<Vec<PoseSE3>>,
    pub manifest: Option<Manifest>,
}

fn frame_path(dir: &Path, i: usize, suffix: &str) -> PathBuf {
    dir.join("frames").join(format!("{i:05}.{suffix}"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::load(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::load(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::load(path, e))?;
    let img = img.as_rgb8().ok_or_else(|| Error::load(path, "expected 8-bit RGB"))?;
    let data = img.pixels().map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]).collect();
    Image::from_vec(img.width(), img.height(), data)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width, img.height, |x, y| {
            let p = img.get(x, y);
            Rgb([q(p[0]), q(p[1]), q(p[2])])
        });
    buf.save(path).map_err(|e| Error::load(path, e))
}

pub fn read_u16_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::load(path, e))?;
    let img = img.as_luma16().ok_or_else(|| Error::load(path, "expected 16-bit grayscale"))?;
    Image::from_vec(img.width(), img.height(), img.pixels().map(|p| p[0]).collect())
}

pub fn write_u16_png(path: &Path, img: &LabelMap) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(img.width, img.height, |x, y| Luma([*img.get(x, y)]));
    buf.save(path).map_err(|e| Error::load(path, e))
}

fn scalar_to_u16(m: &ScalarMap, scale: f64) -> LabelMap {
    Image {
        width: m.width,
        height: m.height,
        data: m.data.iter().map(|v| (v * scale).round().clamp(0.0, 65535.0) as u16).collect(),
    }
}

fn u16_to_scalar(m: &LabelMap, scale: f64) -> ScalarMap {
    Image {
        width: m.width,
        height: m.height,
        data: m.data.iter().map(|&v| v as f64 / scale).collect(),
    }
}

pub fn read_pose(path: &Path) -> Result<PoseSE3> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::load(path, e))?;
    if vals.len() != 12 {
        return Err(Error::load(path, format!("expected 12 numbers, found {}", vals.len())));
    }
    let r = Mat3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
    let t = Vec3::new(vals[3], vals[7], vals[11]);
    PoseSE3::new(r, t).map_err(|e| Error::load(path, e))
}

pub fn format_pose(p: &PoseSE3) -> String {
    let r = &p.rotation;
    let t = &p.translation;
    let mut s = String::new();
    for i in 0..3 {
        s.push_str(&format!("{} {} {} {}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]));
    }
    s
}

pub fn write_pose(path: &Path, p: &PoseSE3) -> Result<()> {
    fs::write(path, format_pose(p)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let schema: SemanticSchema = read_json(&dir.join("schema.json"))?;
    schema.validate().map_err(|e| Error::load(dir.join("schema.json"), e))?;
    let camera: Camera = read_json(&dir.join("camera.json"))?;
    camera.validate().map_err(|e| Error::load(dir.join("camera.json"), e))?;
    let manifest_path = dir.join("manifest.json");
    let manifest: Option<Manifest> = if manifest_path.exists() { Some(read_json(&manifest_path)?) } else { None };

    let frames_dir = dir.join("frames");
    let mut indices: Vec<usize> = fs::read_dir(&frames_dir)
        .map_err(|e| Error::io(&frames_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".rgb.png").and_then(|s| s.parse().ok())
        })
        .collect();
    indices.sort_unstable();

    let mut frames = Vec::with_capacity(indices.len());
    let mut gt = Vec::with_capacity(indices.len());
    for &i in &indices {
        let rgb_path = frame_path(dir, i, "rgb.png");
        let rgb = read_rgb_png(&rgb_path)?;
        let sem_path = frame_path(dir, i, "sem.png");
        let sem_det = read_u16_png(&sem_path)?;
        let inst_path = frame_path(dir, i, "inst.png");
        let inst_det = read_u16_png(&inst_path)?;
        let conf_path = frame_path(dir, i, "conf.png");
        let conf = if conf_path.exists() {
            u16_to_scalar(&read_u16_png(&conf_path)?, 65535.0)
        } else {
            Image::filled(camera.width, camera.height, 1.0)
        };
        let pose_init = read_pose(&frame_path(dir, i, "pose.txt"))?;
        let frame = PanopticFrame {
            index: i,
            rgb,
            sem_det,
            inst_det,
            conf,
            pose_init,
            camera,
        };
        if let Err(e) = frame.validate(&schema) {
            return Err(Error::load(&sem_path, e));
        }
        frames.push(frame);

        let gs = frame_path(dir, i, "gt_sem.png");
        gt.push(if gs.exists() {
            Some(GroundTruthMaps {
                sem: read_u16_png(&gs)?,
                inst: read_u16_png(&frame_path(dir, i, "gt_inst.png"))?,
                depth: u16_to_scalar(&read_u16_png(&frame_path(dir, i, "gt_depth.png"))?, 1000.0),
            })
        } else {
            None
        });
    }
    let gt_dir = dir.join("gt");
    let gt_poses = if gt_dir.exists() {
        Some(indices.iter().map(|&i| read_pose(&gt_dir.join(format!("{i:05}.pose.txt")))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    if let Some(m) = &manifest {
        if m.train.len() != frames.len() {
            return Err(Error::load(&manifest_path, format!("split lists {} frames, found {}", m.train.len(), frames.len())));
        }
    }
    Ok(Dataset {
        schema,
        camera,
        frames,
        gt,
        gt_poses,
        manifest,
    })
}

pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir.join("frames"), e))?;
    write_json(&dir.join("schema.json"), &ds.schema)?;
    write_json(&dir.join("camera.json"), &ds.camera)?;
    if let Some(m) = &ds.manifest {
        write_json(&dir.join("manifest.json"), m)?;
    }
    for (k, f) in ds.frames.iter().enumerate() {
        let i = f.index;
        write_rgb_png(&frame_path(dir, i, "rgb.png"), &f.rgb)?;
        write_u16_png(&frame_path(dir, i, "sem.png"), &f.sem_det)?;
        write_u16_png(&frame_path(dir, i, "inst.png"), &f.inst_det)?;
        write_u16_png(&frame_path(dir, i, "conf.png"), &scalar_to_u16(&f.conf, 65535.0))?;
        write_pose(&frame_path(dir, i, "pose.txt"), &f.pose_init)?;
        if let Some(g) = ds.gt.get(k).and_then(|g| g.as_ref()) {
            write_u16_png(&frame_path(dir, i, "gt_sem.png"), &g.sem)?;
            write_u16_png(&frame_path(dir, i, "gt_inst.png"), &g.inst)?;
            write_u16_png(&frame_path(dir, i, "gt_depth.png"), &scalar_to_u16(&g.depth, 1000.0))?;
        }
    }
    if let Some(poses) = &ds.gt_poses {
        let gt_dir = dir.join("gt");
        fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
        for (f, p) in ds.frames.iter().zip(poses) {
            write_pose(&gt_dir.join(format!("{:05}.pose.txt", f.index)), p)?;
        }
    }
    Ok(())
}

/// Relabels as stuff every thing mask whose median depth exceeds `max_depth`.
pub fn filter_far_masks(frame: &PanopticFrame, depth: &ScalarMap, max_depth: f64, schema: &SemanticSchema) -> Result<PanopticFrame> {
    if !frame.inst_det.same_shape(depth) {
        return Err(Error::Input("depth map shape differs from frame".into()));
    }
    let mut out = frame.clone();
    let mut ids: Vec<u16> = frame.inst_det.data.iter().copied().filter(|&i| i != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let mut d: Vec<f64> = frame
            .inst_det
            .data
            .iter()
            .zip(&depth.data)
            .filter(|(&i, _)| i == id)
            .map(|(_, &z)| z)
            .collect();
        if median(&mut d) > max_depth {
            for (k, &i) in frame.inst_det.data.iter().enumerate() {
                if i == id {
                    out.inst_det.data[k] = 0;
                    out.sem_det.data[k] = schema.background_class();
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> PanopticFrame {
        let cam = Camera::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        let mut sem = Image::filled(8, 8, 0u16);
        let mut inst = Image::filled(8, 8, 0u16);
        for y in 0..4 {
            for x in 0..4 {
                sem.set(x, y, 1);
                inst.set(x, y, 1);
                sem.set(x + 4, y + 4, 1);
                inst.set(x + 4, y + 4, 2);
            }
        }
        PanopticFrame {
            index: 0,
            rgb: Image::filled(8, 8, [0.5; 3]),
            sem_det: sem,
            inst_det: inst,
            conf: Image::filled(8, 8, 1.0),
            pose_init: PoseSE3::identity(),
            camera: cam,
        }
    }

    #[test]
    fn near_masks_untouched_far_removed() {
        let s = SemanticSchema::fruit(4);
        let f = frame();
        let near = Image::filled(8, 8, 1.0);
        assert_eq!(filter_far_masks(&f, &near, 1.5, &s).unwrap(), f);
        let mut d = near.clone();
        for y in 4..8 {
            for x in 4..8 {
                d.set(x, y, 2.0);
            }
        }
        let g = filter_far_masks(&f, &d, 1.5, &s).unwrap();
        assert!(g.inst_det.data.iter().all(|&i| i != 2));
        assert_eq!(*g.inst_det.get(0, 0), 1);
        assert_eq!(*g.sem_det.get(5, 5), 0);
    }

    #[test]
    fn bimodal_mask_decided_by_median() {
        let s = SemanticSchema::fruit(4);
        let f = frame();
        let mut d = Image::filled(8, 8, 1.0);
        // mask 1 has 16 pixels: 9 far, 7 near -> median far
        let mut n = 0;
        for y in 0..4 {
            for x in 0..4 {
                d.set(x, y, if n < 9 { 3.0 } else { 0.5 });
                n += 1;
            }
        }
        let g = filter_far_masks(&f, &d, 1.5, &s).unwrap();
        assert_eq!(*g.inst_det.get(0, 0), 0);
        let mut d2 = d.clone();
        let mut n = 0;
        for y in 0..4 {
            for x in 0..4 {
                d2.set(x, y, if n < 7 { 3.0 } else { 0.5 });
                n += 1;
            }
        }
        let g2 = filter_far_masks(&f, &d2, 1.5, &s).unwrap();
        assert_eq!(*g2.inst_det.get(0, 0), 1);
    }

    #[test]
    fn pose_text_round_trip() {
        let p = PoseSE3::new(
            nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner(),
            Vec3::new(0.1, 2.0 / 3.0, -1e-7),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        write_pose(&path, &p).unwrap();
        assert_eq!(read_pose(&path).unwrap(), p);
    }
}

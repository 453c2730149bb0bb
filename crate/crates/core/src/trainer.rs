//! Training loop, event schedule, validation-pose registration, checkpoints,
//! per-window evaluation, and capacity ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assignment::{apply_id_window, assignment_cost, forbid_stuff_slot, hungarian, IdWindow, FORBIDDEN_COST};
use crate::config::TrainConfig;
use crate::dataset::{filter_far_masks, Dataset, GroundTruthMaps};
use crate::error::{Error, Result};
use crate::losses::{color_loss, segment_consistency_loss, semantic_loss, stuff_loss, things_loss, total_loss, FrameTargets, LossParts};
use crate::metrics::{id_consistency, iou, mean_psnr, panoptic_quality, psnr, FrameMetrics, PqReport};
use crate::model::{ChunkForward, ChunkUpstream, FieldGrads, PanopticField, RayOutputs, RenderOptions, SampleBatch};
use crate::octree::OccupancyOctree;
use crate::optim::{Adam, AdamConfig};
use crate::pose::{PoseGradAccum, PoseParam};
use crate::render::{postprocess_panoptic, render_frame, FrameRender};
use crate::types::{pixel_ray, Aabb, Camera, Mat3, PanopticFrame, PoseSE3, Ray, SemanticSchema, Vec3, VOID_LABEL};
use crate::util::{median, read_f64s, read_u64, write_f64s};

const STREAM_TRAINER: u64 = 4;

/// What the schedule asks for before the step of a given epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Events {
    pub prune: bool,
    pub voxel_switch: bool,
    pub register: bool,
}

pub fn schedule_events(epoch: usize, cfg: &TrainConfig) -> Events {
    let every = |p: usize| epoch > 0 && epoch % p == 0;
    let voxel_switch = epoch > 0 && epoch == cfg.voxel_trace_after;
    Events {
        prune: every(cfg.prune_every) || voxel_switch,
        voxel_switch,
        register: cfg.register_validation && every(cfg.register_every),
    }
}

/// The frames of one window plus everything the trainer needs to know
/// about the capture.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub schema: SemanticSchema,
    pub camera: Camera,
    pub window: usize,
    /// Dataset index of every frame in the window.
    pub frame_ids: Vec<usize>,
    /// Detections with far masks relabeled as stuff.
    pub frames: Vec<PanopticFrame>,
    pub train: Vec<bool>,
    /// Position of the labeled middle frame within `frames`.
    pub middle: usize,
    pub gt: Vec<Option<GroundTruthMaps>>,
    pub gt_poses: Option<Vec<PoseSE3>>,
    pub trajectory_start: Vec3,
    pub trajectory_dir: Vec3,
    pub trajectory_length: f64,
    pub frustum_length: f64,
    pub scene: Aabb,
}

pub fn num_windows(ds: &Dataset) -> usize {
    ds.manifest.as_ref().map_or(1, |m| m.windows.len().max(1))
}

impl TrainData {
    /// Without a manifest the whole sequence is one window with an
    /// every-second-frame split, the rail runs from the first to the last
    /// initial camera center, and the scene box spans the camera centers
    /// grown by `max_mask_depth`.
    pub fn from_window(ds: &Dataset, window: usize, cfg: &TrainConfig) -> Result<Self> {
        let n = ds.frames.len();
        if n == 0 {
            return Err(Error::Input("dataset has no frames".into()));
        }
        let (frame_ids, train, middle_id, start, end, frustum, scene) = match &ds.manifest {
            Some(m) => {
                let w = m.windows.get(window).ok_or_else(|| Error::Usage(format!("window {window} not in manifest ({} windows)", m.windows.len())))?;
                if let Some(&bad) = w.frames.iter().find(|&&f| f >= n) {
                    return Err(Error::Input(format!("window {window} names frame {bad} of {n}")));
                }
                let train = w.frames.iter().map(|&f| m.train.get(f).copied().unwrap_or(f % 2 == 0)).collect();
                (
                    w.frames.clone(),
                    train,
                    w.middle,
                    Vec3::from(m.trajectory_start),
                    Vec3::from(m.trajectory_end),
                    m.frustum_length,
                    Aabb::new(Vec3::from(m.scene_min), Vec3::from(m.scene_max)),
                )
            }
            None => {
                if window != 0 {
                    return Err(Error::Usage(format!("window {window} requested but the dataset has no manifest")));
                }
                let ids: Vec<usize> = (0..n).collect();
                let train: Vec<bool> = ids.iter().map(|i| i % 2 == 0).collect();
                let start = ds.frames[0].pose_init.translation;
                let end = ds.frames[n - 1].pose_init.translation;
                let mut lo = start;
                let mut hi = start;
                for f in &ds.frames {
                    lo = lo.inf(&f.pose_init.translation);
                    hi = hi.sup(&f.pose_init.translation);
                }
                let grow = Vec3::repeat(cfg.max_mask_depth);
                let frustum = ds.camera.width as f64 * cfg.max_mask_depth / ds.camera.fx;
                let middle = ids[(n / 2) & !1];
                (ids, train, middle, start, end, frustum, Aabb::new(lo - grow, hi + grow))
            }
        };
        let middle = frame_ids
            .iter()
            .position(|&f| f == middle_id)
            .ok_or_else(|| Error::Input(format!("middle frame {middle_id} is not in window {window}")))?;
        let mut frames = Vec::with_capacity(frame_ids.len());
        let mut gt = Vec::with_capacity(frame_ids.len());
        for &f in &frame_ids {
            let g = ds.gt.get(f).cloned().flatten();
            let frame = match &g {
                Some(g) => filter_far_masks(&ds.frames[f], &g.depth, cfg.max_mask_depth, &ds.schema)?,
                None => ds.frames[f].clone(),
            };
            frames.push(frame);
            gt.push(g);
        }
        let gt_poses = ds.gt_poses.as_ref().map(|p| frame_ids.iter().map(|&f| p[f]).collect());
        let length = (end - start).norm();
        let dir = if length > 0.0 { (end - start) / length } else { Vec3::x() };
        Ok(TrainData {
            schema: ds.schema.clone(),
            camera: ds.camera,
            window,
            frame_ids,
            frames,
            train,
            middle,
            gt,
            gt_poses,
            trajectory_start: start,
            trajectory_dir: dir,
            trajectory_length: length,
            frustum_length: frustum,
            scene,
        })
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.train[i]).collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| !self.train[i]).collect()
    }

    /// Trajectory coordinate of a world point.
    pub fn trajectory_coordinate(&self, p: &Vec3) -> f64 {
        (p - self.trajectory_start).dot(&self.trajectory_dir)
    }
}

/// One optimizer per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub color_grid: Adam,
    pub panoptic_grid: Adam,
    pub density: Adam,
    pub color: Adam,
    pub semantic: Adam,
    pub instance: Adam,
    pub train_poses: Adam,
    pub val_poses: Adam,
}

impl Optimizers {
    fn new(field: &PanopticField, num_train: usize, num_val: usize, cfg: &TrainConfig) -> Self {
        let c = |lr| AdamConfig {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        };
        let d = &field.decoders;
        Optimizers {
            color_grid: Adam::new(field.color_grid.param_count(), c(cfg.lr_grid), true),
            panoptic_grid: Adam::new(field.panoptic_grid.param_count(), c(cfg.lr_grid), true),
            density: Adam::new(d.density.param_count(), c(cfg.lr_global), false),
            color: Adam::new(d.color.param_count(), c(cfg.lr_global), false),
            semantic: Adam::new(d.semantic.param_count(), c(cfg.lr_global), false),
            instance: Adam::new(d.instance.param_count(), c(cfg.lr_global), false),
            train_poses: Adam::new(9 * num_train, c(cfg.lr_pose), false),
            val_poses: Adam::new(9 * num_val, c(cfg.lr_pose), false),
        }
    }

    fn all(&self) -> [&Adam; 8] {
        [
            &self.color_grid,
            &self.panoptic_grid,
            &self.density,
            &self.color,
            &self.semantic,
            &self.instance,
            &self.train_poses,
            &self.val_poses,
        ]
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub parts: LossParts,
    pub occupied_leaves: usize,
    pub voxel_tracing: bool,
}

/// Validation color loss on a fixed ray set before and after one
/// registration run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Registration {
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub field: PanopticField,
    /// One per window frame, in window order.
    pub poses: Vec<PoseParam>,
    pub optimizers: Optimizers,
    pub tree: OccupancyOctree,
    pub voxel_tracing: bool,
    pub epoch: usize,
    pub window: usize,
    pub frame_ids: Vec<usize>,
    pub train: Vec<bool>,
    pub camera: Camera,
    pub scene: Aabb,
    pub schema: SemanticSchema,
    pub log: Vec<EpochLog>,
    rng: ChaCha8Rng,
}

/// Rays drawn from a set of frames.
struct RaySet {
    rays: Vec<Ray>,
    /// Window position of each ray's frame; rays of a frame are contiguous.
    frame: Vec<usize>,
    pixel: Vec<usize>,
    camera_dir: Vec<Vec3>,
}

/// Per-ray panoptic supervision for one batch.
struct PanopticTargets {
    labels: Vec<u16>,
    conf: Vec<f64>,
    things: Vec<FrameTargets>,
    stuff: Vec<usize>,
    masks: Vec<Vec<Vec<usize>>>,
}

impl TrainState {
    pub fn new(config: TrainConfig, data: &TrainData) -> Result<Self> {
        config.validate()?;
        let schema = &data.schema;
        let field = PanopticField::new(&config.field_config(schema.num_classes, schema.num_instance_slots), config.seed)?;
        let poses = data.frames.iter().map(|f| PoseParam::from_pose(&f.pose_init)).collect::<Result<Vec<_>>>()?;
        let nt = data.train.iter().filter(|&&t| t).count();
        let optimizers = Optimizers::new(&field, nt, data.train.len() - nt, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_TRAINER);
        Ok(TrainState {
            tree: OccupancyOctree::new(data.scene, config.octree_depth),
            config,
            field,
            poses,
            optimizers,
            voxel_tracing: false,
            epoch: 0,
            window: data.window,
            frame_ids: data.frame_ids.clone(),
            train: data.train.clone(),
            camera: data.camera,
            scene: data.scene,
            schema: data.schema.clone(),
            log: Vec::new(),
            rng,
        })
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        if data.frame_ids != self.frame_ids || data.train != self.train {
            return Err(Error::Input(format!(
                "training state belongs to window {} with frames {:?}, data has window {} with frames {:?}",
                self.window, self.frame_ids, data.window, data.frame_ids
            )));
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        let c = &self.config;
        RenderOptions {
            samples_per_ray: c.samples_per_ray,
            k_voxels: c.k_voxels,
            per_voxel: c.per_voxel,
            chunk_rays: c.chunk_rays,
            panoptic_min_weight: c.panoptic_min_weight,
            ..RenderOptions::new(self.scene)
        }
    }

    /// The tree used for sampling, once voxel tracing is on.
    pub fn sampling_tree(&self) -> Option<&OccupancyOctree> {
        self.voxel_tracing.then_some(&self.tree)
    }

    pub fn pose(&self, frame: usize) -> Result<PoseSE3> {
        self.poses[frame].to_pose()
    }

    /// Trains until `until` (capped at the configured epoch count), firing
    /// scheduled events before each step.
    pub fn train_until(&mut self, data: &TrainData, until: usize, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        self.check_data(data)?;
        while self.epoch < until.min(self.config.epochs) {
            let ev = schedule_events(self.epoch, &self.config);
            if ev.prune {
                self.prune();
            }
            if ev.voxel_switch {
                self.voxel_tracing = true;
            }
            if ev.register {
                self.register_validation(data)?;
            }
            self.train_step(data)?;
            if let Some(l) = self.log.last() {
                on_epoch(l);
            }
        }
        Ok(())
    }

    /// Marks leaves whose peak density keeps `σ·δ` below the configured
    /// floor at the voxel-tracing step size as empty.
    pub fn prune(&mut self) {
        let step = self.tree.leaf_size() / self.config.per_voxel.max(1) as f64;
        let threshold = self.config.prune_sigma_delta / step;
        let field = &self.field;
        self.tree.prune(threshold, |pts| field.density_at(pts));
    }

    fn sample_pixels(&mut self, camera: &Camera, frames: &[usize], per_frame: usize) -> Vec<(usize, usize)> {
        let n = camera.num_pixels();
        let mut out = Vec::with_capacity(frames.len() * per_frame);
        for &f in frames {
            for _ in 0..per_frame {
                out.push((f, self.rng.random_range(0..n)));
            }
        }
        out
    }

    fn rays_for(&self, camera: &Camera, pixels: &[(usize, usize)]) -> Result<RaySet> {
        let mut set = RaySet {
            rays: Vec::with_capacity(pixels.len()),
            frame: Vec::with_capacity(pixels.len()),
            pixel: Vec::with_capacity(pixels.len()),
            camera_dir: Vec::with_capacity(pixels.len()),
        };
        let mut cached: Option<(usize, PoseSE3)> = None;
        let w = camera.width as usize;
        for &(f, p) in pixels {
            let pose = match cached {
                Some((cf, pose)) if cf == f => pose,
                _ => {
                    let pose = self.poses[f].to_pose()?;
                    cached = Some((f, pose));
                    pose
                }
            };
            let (col, row) = ((p % w) as u32, (p / w) as u32);
            set.rays.push(pixel_ray(camera, &pose, (col, row))?);
            set.frame.push(f);
            set.pixel.push(p);
            set.camera_dir.push(camera.pixel_direction(col, row).normalize());
        }
        Ok(set)
    }

    fn chunk_starts(&self, num_rays: usize) -> Vec<usize> {
        (0..num_rays).step_by(self.config.chunk_rays.max(1)).collect()
    }

    fn forward_all(&self, batch: &SampleBatch, opts: &RenderOptions, with_panoptic: bool) -> (Vec<ChunkForward>, RayOutputs) {
        let nr = batch.num_rays();
        let step = self.config.chunk_rays.max(1);
        let fwds: Vec<ChunkForward> = self
            .chunk_starts(nr)
            .into_par_iter()
            .map(|s| self.field.forward_chunk(batch.slice(s..(s + step).min(nr)), opts, with_panoptic))
            .collect();
        let mut out = RayOutputs::default();
        for f in &fwds {
            out.append(f.outputs.clone());
        }
        (fwds, out)
    }

    /// Parallel backward over chunks, reduced in chunk order. Returns field
    /// gradients and, when asked, per-frame pose gradient accumulators.
    fn backward_all(
        &self,
        fwds: &[ChunkForward],
        set: &RaySet,
        up: ChunkUpstream,
        opts: &RenderOptions,
        want_pose: bool,
    ) -> Result<(FieldGrads, BTreeMap<usize, PoseGradAccum>)> {
        let (nc, ns) = (self.field.num_classes(), self.field.num_slots());
        let mut ranges = Vec::with_capacity(fwds.len());
        let mut s = 0;
        for f in fwds {
            let e = s + f.outputs.rgb.len();
            ranges.push(s..e);
            s = e;
        }
        let grads: Vec<_> = fwds
            .par_iter()
            .zip(ranges.par_iter())
            .map(|(f, r)| {
                let cu = ChunkUpstream {
                    rgb: &up.rgb[r.clone()],
                    semantic: if up.semantic.is_empty() { &[] } else { &up.semantic[r.start * nc..r.end * nc] },
                    instance: if up.instance.is_empty() { &[] } else { &up.instance[r.start * ns..r.end * ns] },
                };
                self.field.backward_chunk(f, cu, opts, want_pose)
            })
            .collect();
        let mut total = FieldGrads::zeros(&self.field);
        let mut poses: BTreeMap<usize, PoseGradAccum> = BTreeMap::new();
        for (g, r) in grads.into_iter().zip(&ranges) {
            let g = g?;
            total.accumulate(&g);
            if want_pose {
                for (k, ray) in r.clone().enumerate() {
                    poses.entry(set.frame[ray]).or_default().add_ray(&g.d_origin[k], &g.d_dir[k], &set.camera_dir[ray]);
                }
            }
        }
        Ok((total, poses))
    }

    /// Flattened pose gradients of `frames`, in order.
    fn pose_grads(&self, frames: &[usize], acc: &BTreeMap<usize, PoseGradAccum>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(9 * frames.len());
        for &f in frames {
            match acc.get(&f) {
                Some(a) => out.extend_from_slice(&self.poses[f].backward(&a.d_rotation, &a.d_translation)?.as_array()),
                None => out.extend_from_slice(&[0.0; 9]),
            }
        }
        Ok(out)
    }

    fn step_poses(&mut self, frames: &[usize], grads: &[f64], val: bool) {
        let mut flat: Vec<f64> = frames.iter().flat_map(|&f| self.poses[f].as_array()).collect();
        let opt = if val { &mut self.optimizers.val_poses } else { &mut self.optimizers.train_poses };
        opt.step(&mut flat, grads);
        for (k, &f) in frames.iter().enumerate() {
            let a: [f64; 9] = flat[9 * k..9 * k + 9].try_into().expect("nine pose values");
            self.poses[f] = PoseParam::from_array(&a);
        }
    }

    /// One optimizer step on a random batch of training frames.
    pub fn train_step(&mut self, data: &TrainData) -> Result<LossParts> {
        self.check_data(data)?;
        let cfg = self.config.clone();
        let epoch = self.epoch;
        let panoptic = epoch >= cfg.panoptic_start_epoch;
        let train = data.train_indices();
        if train.is_empty() {
            return Err(Error::Input("window has no training frames".into()));
        }
        let nb = cfg.batch_images.min(train.len());
        let chosen: Vec<usize> = rand::seq::index::sample(&mut self.rng, train.len(), nb).into_iter().map(|i| train[i]).collect();
        let pixels = self.sample_pixels(&data.camera, &chosen, cfg.rays_per_image);
        let set = self.rays_for(&data.camera, &pixels)?;
        let opts = self.render_options();
        let tree = self.voxel_tracing.then_some(&self.tree);
        let mut batch = SampleBatch::generate(&set.rays, tree, &opts, true, &mut self.rng);
        if cfg.random_background {
            batch.backgrounds = (0..set.rays.len()).map(|_| self.rng.random::<[f64; 3]>()).collect();
        }
        let (fwds, out) = self.forward_all(&batch, &opts, panoptic);

        let observed: Vec<[f64; 3]> = set.frame.iter().zip(&set.pixel).map(|(&f, &p)| data.frames[f].rgb.data[p]).collect();
        let w = cfg.weights;
        let (lc, gc) = color_loss(&out.rgb, &observed);
        let mut parts = LossParts {
            color: lc,
            ..Default::default()
        };
        let rgb_up: Vec<[f64; 3]> = gc.iter().map(|g| g.map(|v| v * w.color)).collect();
        let (mut sem_up, mut inst_up) = (Vec::new(), Vec::new());
        if panoptic {
            let ns = self.field.num_slots();
            let nc = self.field.num_classes();
            let t = self.panoptic_targets(data, &set, &out, ns)?;
            let (ls, gs) = semantic_loss(&out.semantic, nc, &t.labels, &t.conf);
            let (lt, gt) = things_loss(&out.instance, ns, &t.things, &t.conf);
            let (lst, gst) = stuff_loss(&out.instance, ns, &t.stuff, &t.conf);
            let (lr, gr) = segment_consistency_loss(&out.instance, ns, &t.masks, &t.conf);
            parts.semantic = ls;
            parts.things = lt;
            parts.stuff = lst;
            parts.consistency = lr;
            sem_up = gs.iter().map(|g| g * w.semantic).collect();
            inst_up = (0..gt.len()).map(|i| w.id * (gt[i] + gst[i]) + w.consistency * gr[i]).collect();
        }
        let total = total_loss(&parts, &w, epoch)?;

        let up = ChunkUpstream {
            rgb: &rgb_up,
            semantic: &sem_up,
            instance: &inst_up,
        };
        let (grads, pose_acc) = self.backward_all(&fwds, &set, up, &opts, cfg.optimize_poses)?;
        drop(fwds);

        let o = &mut self.optimizers;
        for a in [&mut o.panoptic_grid, &mut o.semantic, &mut o.instance] {
            a.frozen = !panoptic;
        }
        o.train_poses.frozen = !cfg.optimize_poses;
        let f = &mut self.field;
        o.color_grid.step(&mut f.color_grid.table, &grads.color_grid);
        o.panoptic_grid.step(&mut f.panoptic_grid.table, &grads.panoptic_grid);
        o.density.step(&mut f.decoders.density.params, &grads.density);
        o.color.step(&mut f.decoders.color.params, &grads.color);
        o.semantic.step(&mut f.decoders.semantic.params, &grads.semantic);
        o.instance.step(&mut f.decoders.instance.params, &grads.instance);
        if cfg.optimize_poses {
            let pg = self.pose_grads(&train, &pose_acc)?;
            self.step_poses(&train, &pg, false);
        }

        self.log.push(EpochLog {
            epoch,
            total,
            parts,
            occupied_leaves: self.tree.occupied_leaves(),
            voxel_tracing: self.voxel_tracing,
        });
        self.epoch += 1;
        Ok(parts)
    }

    fn panoptic_targets(&self, data: &TrainData, set: &RaySet, out: &RayOutputs, ns: usize) -> Result<PanopticTargets> {
        let n = set.rays.len();
        let mut t = PanopticTargets {
            labels: Vec::with_capacity(n),
            conf: Vec::with_capacity(n),
            things: Vec::new(),
            stuff: Vec::new(),
            masks: Vec::new(),
        };
        for r in 0..n {
            let fr = &data.frames[set.frame[r]];
            let p = set.pixel[r];
            let s = fr.sem_det.data[p];
            if s == VOID_LABEL {
                t.labels.push(0);
                t.conf.push(0.0);
            } else {
                t.labels.push(s);
                t.conf.push(fr.conf.data[p]);
            }
        }
        let window = if self.config.id_window {
            Some(IdWindow::new(ns, data.trajectory_length, data.frustum_length, 0.0)?)
        } else {
            None
        };
        let mut r0 = 0;
        while r0 < n {
            let f = set.frame[r0];
            let r1 = (r0..n).find(|&r| set.frame[r] != f).unwrap_or(n);
            let fr = &data.frames[f];
            let mut by_id: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
            for r in r0..r1 {
                let p = set.pixel[r];
                let (s, k) = (fr.sem_det.data[p], fr.inst_det.data[p]);
                if s == VOID_LABEL {
                    continue;
                }
                if k != 0 && data.schema.is_thing(s) {
                    by_id.entry(k).or_default().push(r);
                } else {
                    t.stuff.push(r);
                }
            }
            let masks: Vec<Vec<usize>> = by_id.into_values().collect();
            let (mut cost, kept) = assignment_cost(&masks, &out.instance, ns);
            if cost.rows > 0 {
                if cost.rows >= ns {
                    return Err(Error::Config(format!(
                        "frame {} has {} detections but only {} thing slots",
                        data.frame_ids[f],
                        cost.rows,
                        ns - 1
                    )));
                }
                forbid_stuff_slot(&mut cost);
                if let Some(win) = &window {
                    let positions: Vec<f64> = kept
                        .iter()
                        .map(|&m| {
                            let mut u: Vec<f64> = masks[m]
                                .iter()
                                .map(|&r| {
                                    let ray = &set.rays[r];
                                    data.trajectory_coordinate(&(ray.origin + ray.direction * out.depth[r]))
                                })
                                .collect();
                            median(&mut u)
                        })
                        .collect();
                    apply_id_window(&mut cost, &positions, win)?;
                }
                let slots = hungarian(&cost)?;
                let mut ft = FrameTargets::default();
                for (row, &m) in kept.iter().enumerate() {
                    let slot = slots[row];
                    // more masks than window slots: the leftovers get no target
                    if cost.get(row, slot) >= FORBIDDEN_COST {
                        continue;
                    }
                    for &r in &masks[m] {
                        ft.rays.push(r);
                        ft.slots.push(slot);
                    }
                }
                t.things.push(ft);
            }
            t.masks.push(masks);
            r0 = r1;
        }
        Ok(t)
    }

    /// Refines held-out poses against the frozen field on a fixed ray set.
    /// Only the validation pose group moves.
    pub fn register_validation(&mut self, data: &TrainData) -> Result<Option<Registration>> {
        self.check_data(data)?;
        let val = data.val_indices();
        if val.is_empty() || self.config.register_steps == 0 {
            return Ok(None);
        }
        let opts = self.render_options();
        let pixels = self.sample_pixels(&data.camera, &val, self.config.register_rays);
        let observed: Vec<[f64; 3]> = pixels.iter().map(|&(f, p)| data.frames[f].rgb.data[p]).collect();
        let epoch = self.epoch;
        let eval = |s: &Self| -> Result<(RaySet, SampleBatch, f64)> {
            let set = s.rays_for(&data.camera, &pixels)?;
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let batch = SampleBatch::generate(&set.rays, s.sampling_tree(), &opts, false, &mut unused);
            let out = s.field.render_batch(&batch, &opts, false);
            let l = color_loss(&out.rgb, &observed).0;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { term: "registration color", epoch });
            }
            Ok((set, batch, l))
        };
        let initial_loss = eval(self)?.2;
        for _ in 0..self.config.register_steps {
            let set = self.rays_for(&data.camera, &pixels)?;
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let batch = SampleBatch::generate(&set.rays, self.sampling_tree(), &opts, false, &mut unused);
            let (fwds, out) = self.forward_all(&batch, &opts, false);
            let (l, g) = color_loss(&out.rgb, &observed);
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { term: "registration color", epoch });
            }
            let up = ChunkUpstream {
                rgb: &g,
                semantic: &[],
                instance: &[],
            };
            let (_, acc) = self.backward_all(&fwds, &set, up, &opts, true)?;
            let pg = self.pose_grads(&val, &acc)?;
            self.step_poses(&val, &pg, true);
        }
        let final_loss = eval(self)?.2;
        Ok(Some(Registration { initial_loss, final_loss }))
    }

    /// Trains a window to completion and refits the held-out poses once more.
    pub fn run(&mut self, data: &TrainData, on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        let done = self.epoch >= self.config.epochs;
        self.train_until(data, self.config.epochs, on_epoch)?;
        if !done && self.config.register_validation {
            self.register_validation(data)?;
        }
        Ok(())
    }

    pub fn render(&self, pose: &PoseSE3) -> Result<FrameRender> {
        render_frame(&self.field, &self.camera, pose, self.sampling_tree(), &self.render_options(), &self.schema)
    }

    /// Window position of a dataset frame.
    pub fn frame_position(&self, frame_id: usize) -> Option<usize> {
        self.frame_ids.iter().position(|&f| f == frame_id)
    }

    /// Held-out PSNR, panoptic scores on the middle frame, instance-ID
    /// consistency over the window, and pose errors.
    pub fn evaluate(&self, data: &TrainData) -> Result<WindowReport> {
        self.check_data(data)?;
        let mut renders = Vec::with_capacity(data.frames.len());
        let mut infer_seconds = 0.0;
        for i in 0..data.frames.len() {
            let t0 = Instant::now();
            let mut r = self.render(&self.pose(i)?)?;
            if self.config.postprocess {
                r.instance = postprocess_panoptic(&r.instance);
            }
            if i == data.middle {
                infer_seconds = t0.elapsed().as_secs_f64();
            }
            renders.push(r);
        }
        let mut rows = Vec::new();
        let mut psnrs = Vec::new();
        for i in data.val_indices() {
            let v = psnr(&renders[i].rgb, &data.frames[i].rgb, 1.0)?;
            psnrs.push(v);
            rows.push(FrameMetrics {
                frame: data.frame_ids[i],
                psnr: Some(v),
                miou: None,
                pq: None,
                id_consistency: None,
            });
        }
        let (psnr_mean, psnr_excluded) = mean_psnr(&psnrs);

        let m = data.middle;
        let (mut miou, mut pq) = (None, None);
        if let Some(g) = &data.gt[m] {
            miou = Some(iou(&renders[m].semantic, &g.sem, data.schema.num_classes)?.mean);
            pq = Some(panoptic_quality(&renders[m].semantic, &renders[m].instance, &g.sem, &g.inst, &data.schema)?);
        }
        let with_gt: Vec<usize> = (0..data.frames.len()).filter(|&i| data.gt[i].is_some()).collect();
        let (mut idc, mut det_idc) = (None, None);
        if !with_gt.is_empty() {
            let gt: Vec<_> = with_gt.iter().map(|&i| data.gt[i].as_ref().expect("filtered").inst.clone()).collect();
            let pred: Vec<_> = with_gt.iter().map(|&i| renders[i].instance.clone()).collect();
            let det: Vec<_> = with_gt.iter().map(|&i| data.frames[i].inst_det.clone()).collect();
            idc = Some(id_consistency(&pred, &gt)?);
            det_idc = Some(id_consistency(&det, &gt)?);
        }
        rows.push(FrameMetrics {
            frame: data.frame_ids[m],
            psnr: None,
            miou,
            pq: pq.clone(),
            id_consistency: idc,
        });

        let pose_error = match &data.gt_poses {
            Some(gt) => {
                let est = (0..data.frames.len()).map(|i| self.pose(i)).collect::<Result<Vec<_>>>()?;
                let init: Vec<PoseSE3> = data.frames.iter().map(|f| f.pose_init).collect();
                let (ti, ri) = aligned_pose_error(&init, gt);
                let (t, r) = aligned_pose_error(&est, gt);
                Some(PoseErrors {
                    init_translation: ti,
                    init_rotation_deg: ri,
                    translation: t,
                    rotation_deg: r,
                })
            }
            None => None,
        };
        Ok(WindowReport {
            window: data.window,
            psnr: psnr_mean,
            psnr_excluded,
            miou,
            pq,
            id_consistency: idc,
            detection_id_consistency: det_idc,
            pose_error,
            infer_seconds,
            param_count: self.field.param_count(),
            grid_param_count: self.field.color_grid.param_count() + self.field.panoptic_grid.param_count(),
            frames: rows,
        })
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("epoch,total,color,semantic,things,stuff,consistency,occupied_leaves,voxel_tracing\n");
        for l in &self.log {
            let p = &l.parts;
            let _ = writeln!(
                s,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{}",
                l.epoch, l.total, p.color, p.semantic, p.things, p.stuff, p.consistency, l.occupied_leaves, l.voxel_tracing as u8
            );
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

const MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u64 = 1;

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

impl TrainState {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(MAGIC).map_err(io)?;
        write_u64(w, VERSION).map_err(io)?;
        let text = self.config.to_text();
        write_u64(w, text.len() as u64).map_err(io)?;
        w.write_all(text.as_bytes()).map_err(io)?;
        write_u64(w, self.window as u64).map_err(io)?;
        write_u64(w, self.frame_ids.len() as u64).map_err(io)?;
        for (&f, &t) in self.frame_ids.iter().zip(&self.train) {
            write_u64(w, f as u64).map_err(io)?;
            w.write_all(&[t as u8]).map_err(io)?;
        }
        let c = &self.camera;
        write_f64s(w, &[c.fx, c.fy, c.cx, c.cy, c.width as f64, c.height as f64]).map_err(io)?;
        let b = &self.scene;
        write_f64s(w, &[b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z]).map_err(io)?;
        let schema = serde_json::to_string(&self.schema).map_err(|e| Error::Input(e.to_string()))?;
        write_u64(w, schema.len() as u64).map_err(io)?;
        w.write_all(schema.as_bytes()).map_err(io)?;
        write_u64(w, self.epoch as u64).map_err(io)?;
        w.write_all(&[self.voxel_tracing as u8]).map_err(io)?;
        w.write_all(&self.rng.get_seed()).map_err(io)?;
        write_u64(w, self.rng.get_stream()).map_err(io)?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes()).map_err(io)?;
        self.field.write_to(w)?;
        let flat: Vec<f64> = self.poses.iter().flat_map(|p| p.as_array()).collect();
        write_f64s(w, &flat).map_err(io)?;
        for a in self.optimizers.all() {
            a.write_to(w).map_err(io)?;
        }
        self.tree.write_to(w).map_err(io)?;
        write_u64(w, self.log.len() as u64).map_err(io)?;
        for l in &self.log {
            let p = &l.parts;
            write_u64(w, l.epoch as u64).map_err(io)?;
            write_f64s(w, &[l.total, p.color, p.semantic, p.things, p.stuff, p.consistency]).map_err(io)?;
            write_u64(w, l.occupied_leaves as u64).map_err(io)?;
            w.write_all(&[l.voxel_tracing as u8]).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e| Error::io("<checkpoint>", e);
        let bad = |why: &str| Error::load("<checkpoint>", why);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = read_u64(r).map_err(io)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(r).map_err(io)? as usize;
        if len > 1 << 20 {
            return Err(bad("config text too long"));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(io)?;
        let text = String::from_utf8(text).map_err(|_| bad("config text is not UTF-8"))?;
        let config = TrainConfig::parse(&text)?;
        let window = read_u64(r).map_err(io)? as usize;
        let nf = read_u64(r).map_err(io)? as usize;
        if nf > 1 << 20 {
            return Err(bad("frame count too large"));
        }
        let mut frame_ids = Vec::with_capacity(nf);
        let mut train = Vec::with_capacity(nf);
        let mut byte = [0u8; 1];
        for _ in 0..nf {
            frame_ids.push(read_u64(r).map_err(io)? as usize);
            r.read_exact(&mut byte).map_err(io)?;
            train.push(byte[0] != 0);
        }
        let c = read_f64s(r, 6).map_err(io)?;
        let camera = Camera::new(c[0], c[1], c[2], c[3], c[4] as u32, c[5] as u32).map_err(|e| bad(&e.to_string()))?;
        let b = read_f64s(r, 6).map_err(io)?;
        let scene = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]));
        let len = read_u64(r).map_err(io)? as usize;
        if len > 1 << 20 {
            return Err(bad("schema text too long"));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(io)?;
        let schema: SemanticSchema = serde_json::from_slice(&text).map_err(|e| bad(&e.to_string()))?;
        schema.validate().map_err(|e| bad(&e.to_string()))?;
        let epoch = read_u64(r).map_err(io)? as usize;
        r.read_exact(&mut byte).map_err(io)?;
        let voxel_tracing = byte[0] != 0;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(io)?;
        let stream = read_u64(r).map_err(io)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp).map_err(io)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(wp));
        let field = PanopticField::read_from(r)?;
        let flat = read_f64s(r, 9 * nf).map_err(io)?;
        let poses = flat.chunks_exact(9).map(|c| PoseParam::from_array(c.try_into().expect("nine pose values"))).collect();
        let nt = train.iter().filter(|&&t| t).count();
        let d = &field.decoders;
        let mut adam = |len| Adam::read_from(r, len);
        let optimizers = Optimizers {
            color_grid: adam(field.color_grid.param_count())?,
            panoptic_grid: adam(field.panoptic_grid.param_count())?,
            density: adam(d.density.param_count())?,
            color: adam(d.color.param_count())?,
            semantic: adam(d.semantic.param_count())?,
            instance: adam(d.instance.param_count())?,
            train_poses: adam(9 * nt)?,
            val_poses: adam(9 * (nf - nt))?,
        };
        let tree = OccupancyOctree::read_from(r)?;
        let nl = read_u64(r).map_err(io)? as usize;
        let mut log = Vec::with_capacity(nl.min(1 << 16));
        for _ in 0..nl {
            let e = read_u64(r).map_err(io)? as usize;
            let v = read_f64s(r, 6).map_err(io)?;
            let occupied = read_u64(r).map_err(io)? as usize;
            r.read_exact(&mut byte).map_err(io)?;
            log.push(EpochLog {
                epoch: e,
                total: v[0],
                parts: LossParts {
                    color: v[1],
                    semantic: v[2],
                    things: v[3],
                    stuff: v[4],
                    consistency: v[5],
                },
                occupied_leaves: occupied,
                voxel_tracing: byte[0] != 0,
            });
        }
        Ok(TrainState {
            config,
            field,
            poses,
            optimizers,
            tree,
            voxel_tracing,
            epoch,
            window,
            frame_ids,
            train,
            camera,
            scene,
            schema,
            log,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| relabel(e, path))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f)).map_err(|e| relabel(e, path))
    }
}

/// Puts the real file name on errors raised by stream readers and writers.
fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Load { reason, .. } => Error::load(path, reason),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseErrors {
    /// Mean camera-center error of the initial poses, m.
    pub init_translation: f64,
    pub init_rotation_deg: f64,
    pub translation: f64,
    pub rotation_deg: f64,
}

/// Mean translation (m) and rotation (degrees) error after removing the
/// best global rotation (chordal mean) and the centroid offset.
pub fn aligned_pose_error(est: &[PoseSE3], gt: &[PoseSE3]) -> (f64, f64) {
    let n = est.len().min(gt.len());
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut m = Mat3::zeros();
    let mut ce = Vec3::zeros();
    let mut cg = Vec3::zeros();
    for (e, g) in est.iter().zip(gt) {
        m += g.rotation * e.rotation.transpose();
        ce += e.translation;
        cg += g.translation;
    }
    ce /= n as f64;
    cg /= n as f64;
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut fix = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let align = u * fix * vt;
    let (mut te, mut re) = (0.0, 0.0);
    for (e, g) in est.iter().zip(gt) {
        let aligned = PoseSE3 {
            rotation: align * e.rotation,
            translation: align * (e.translation - ce) + cg,
        };
        te += (aligned.translation - g.translation).norm();
        re += g.rotation_angle_to(&aligned);
    }
    (te / n as f64, re / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowReport {
    pub window: usize,
    /// Mean PSNR over held-out frames with finite PSNR, dB.
    pub psnr: f64,
    pub psnr_excluded: usize,
    pub miou: Option<f64>,
    pub pq: Option<PqReport>,
    pub id_consistency: Option<f64>,
    /// The same score for the raw detections.
    pub detection_id_consistency: Option<f64>,
    pub pose_error: Option<PoseErrors>,
    /// Wall time to render the middle frame, s.
    pub infer_seconds: f64,
    pub param_count: usize,
    pub grid_param_count: usize,
    pub frames: Vec<FrameMetrics>,
}

/// Arithmetic means over windows; optional scores average over the windows
/// that have them.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetReport {
    pub windows: Vec<WindowReport>,
    pub psnr: f64,
    pub pq: Option<f64>,
    pub miou: Option<f64>,
    pub id_consistency: Option<f64>,
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl DatasetReport {
    pub fn from_windows(windows: Vec<WindowReport>) -> Self {
        let psnr = mean_psnr(&windows.iter().map(|w| w.psnr).collect::<Vec<_>>()).0;
        DatasetReport {
            psnr,
            pq: mean_opt(windows.iter().map(|w| w.pq.as_ref().map(|p| p.pq))),
            miou: mean_opt(windows.iter().map(|w| w.miou)),
            id_consistency: mean_opt(windows.iter().map(|w| w.id_consistency)),
            windows,
        }
    }

    pub fn frame_rows(&self) -> Vec<FrameMetrics> {
        self.windows.iter().flat_map(|w| w.frames.iter().cloned()).collect()
    }
}

/// Trains a fresh model on one window and evaluates it.
pub fn run_window(ds: &Dataset, window: usize, config: &TrainConfig) -> Result<(TrainState, WindowReport)> {
    let data = TrainData::from_window(ds, window, config)?;
    let mut state = TrainState::new(config.clone(), &data)?;
    state.run(&data, |_| {})?;
    let report = state.evaluate(&data)?;
    Ok((state, report))
}

/// Runs every window and averages.
pub fn run_dataset(ds: &Dataset, config: &TrainConfig) -> Result<DatasetReport> {
    let mut reports = Vec::new();
    for w in 0..num_windows(ds) {
        reports.push(run_window(ds, w, config)?.1);
    }
    Ok(DatasetReport::from_windows(reports))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Levels of both grids.
    Lods,
    /// `log2` of the color grid capacity.
    ColorCapacity,
    /// `log2` of the panoptic grid capacity.
    PanopticCapacity,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lods" => Ok(AblationAxis::Lods),
            "color_capacity" => Ok(AblationAxis::ColorCapacity),
            "panoptic_capacity" => Ok(AblationAxis::PanopticCapacity),
            other => Err(Error::Usage(format!("unknown ablation axis '{other}' (lods, color_capacity, panoptic_capacity)"))),
        }
    }
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Lods => "lods",
            AblationAxis::ColorCapacity => "color_capacity",
            AblationAxis::PanopticCapacity => "panoptic_capacity",
        }
    }

    pub fn apply(&self, cfg: &TrainConfig, value: usize) -> Result<TrainConfig> {
        let mut c = cfg.clone();
        let cap = |v: usize| -> Result<usize> {
            if v >= 32 {
                return Err(Error::Config(format!("capacity exponent {v} too large")));
            }
            Ok(1usize << v)
        };
        match self {
            AblationAxis::Lods => {
                c.color_grid.num_levels = value;
                c.panoptic_grid.num_levels = value;
            }
            AblationAxis::ColorCapacity => c.color_grid.capacity = cap(value)?,
            AblationAxis::PanopticCapacity => c.panoptic_grid.capacity = cap(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: usize,
    /// Hash-table entries of both grids times features.
    pub param_count: usize,
    /// Every learnable value, decoders included.
    pub total_params: usize,
    pub psnr: f64,
    pub pq: Option<f64>,
    pub infer_seconds: f64,
}

/// Trains window 0 once per value.
pub fn ablate(ds: &Dataset, config: &TrainConfig, axis: AblationAxis, values: &[usize]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let cfg = axis.apply(config, v)?;
        let (_, rep) = run_window(ds, 0, &cfg)?;
        rows.push(AblationRow {
            value: v,
            param_count: rep.grid_param_count,
            total_params: rep.param_count,
            psnr: rep.psnr,
            pq: rep.pq.as_ref().map(|p| p.pq),
            infer_seconds: rep.infer_seconds,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, axis: AblationAxis, rows: &[AblationRow]) -> Result<()> {
    let mut s = format!("{},param_count,total_params,psnr,pq,infer_ms\n", axis.name());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{:.3}",
            r.value,
            r.param_count,
            r.total_params,
            r.psnr,
            r.pq.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.infer_seconds * 1e3
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// PSNR and PQ against the swept value, side by side.
pub fn write_ablation_svg(path: &Path, axis: AblationAxis, rows: &[AblationRow]) -> Result<()> {
    const W: f64 = 320.0;
    const H: f64 = 220.0;
    const PAD: f64 = 40.0;
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{H}" font-family="sans-serif" font-size="11">"#, 2.0 * W);
    let series: [(&str, Vec<(f64, f64)>); 2] = [
        ("PSNR (dB)", rows.iter().map(|r| (r.value as f64, r.psnr)).filter(|p| p.1.is_finite()).collect()),
        ("PQ", rows.iter().filter_map(|r| r.pq.map(|q| (r.value as f64, q))).collect()),
    ];
    for (k, (label, pts)) in series.iter().enumerate() {
        let x0 = k as f64 * W;
        let _ = write!(
            s,
            r#"<rect x="{}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/><text x="{}" y="20">{label} vs {}</text>"#,
            x0 + PAD,
            W - 2.0 * PAD,
            H - 2.0 * PAD,
            x0 + PAD,
            axis.name()
        );
        if pts.is_empty() {
            continue;
        }
        let (xmin, xmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (ymin, ymax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let sx = |x: f64| x0 + PAD + if xmax > xmin { (x - xmin) / (xmax - xmin) } else { 0.5 } * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - if ymax > ymin { (y - ymin) / (ymax - ymin) } else { 0.5 } * (H - 2.0 * PAD);
        let poly: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
        let _ = write!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, poly.join(" "));
        for p in pts {
            let _ = write!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, sx(p.0), sy(p.1));
        }
        let _ = write!(
            s,
            r#"<text x="{}" y="{}">{ymin:.3}</text><text x="{}" y="{}">{ymax:.3}</text><text x="{}" y="{}">{xmin}</text><text x="{}" y="{}" text-anchor="end">{xmax}</text>"#,
            x0 + 2.0,
            H - PAD,
            x0 + 2.0,
            PAD + 10.0,
            x0 + PAD,
            H - PAD + 14.0,
            x0 + W - PAD,
            H - PAD + 14.0
        );
    }
    s.push_str("</svg>\n");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#![allow(dead_code)]

use pagnerf::decoders::DecoderConfig;
use pagnerf::grid::GridConfig;
use pagnerf::model::{ChunkUpstream, FieldConfig, FieldGrads, PanopticField, RenderOptions, SampleBatch};
use pagnerf::pose::{PoseGradAccum, PoseParam};
use pagnerf::types::{pixel_ray, Aabb, Camera, PoseSE3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_field_config() -> FieldConfig {
    FieldConfig {
        color_grid: GridConfig {
            num_levels: 3,
            capacity: 1 << 8,
            features_per_level: 2,
            base_scale: 1.5,
            finest_scale: 6.0,
            init_range: 0.5,
        },
        panoptic_grid: GridConfig {
            num_levels: 2,
            capacity: 1 << 6,
            features_per_level: 2,
            base_scale: 1.5,
            finest_scale: 3.0,
            init_range: 0.5,
        },
        decoder: DecoderConfig {
            num_classes: 3,
            num_instance_slots: 4,
            dir_frequencies: 2,
            logit_init_scale: 1.0,
        },
        density_bias: 1.0,
    }
}

pub struct Setup {
    pub field: PanopticField,
    pub opts: RenderOptions,
    pub camera: Camera,
    pub pose: PoseParam,
    pub pixels: Vec<(u32, u32)>,
    pub batch: SampleBatch,
    pub up_rgb: Vec<[f64; 3]>,
    pub up_sem: Vec<f64>,
    pub up_inst: Vec<f64>,
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> nalgebra::Matrix3<f64> {
    let axis = nalgebra::Unit::new_normalize(Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    nalgebra::Rotation3::from_axis_angle(&axis, max_angle * (rng.random::<f64>() * 2.0 - 1.0)).into_inner()
}

impl Setup {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = PanopticField::new(&small_field_config(), seed).unwrap();
        let mut opts = RenderOptions::new(Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0)));
        opts.samples_per_ray = 12;
        opts.panoptic_min_weight = 0.0;
        let camera = Camera::new(4.0, 4.0, 3.0, 3.0, 6, 6).unwrap();
        let pose = PoseParam::from_pose(&PoseSE3::new(random_rotation(&mut rng, 0.2), Vec3::new(0.1, -0.05, -2.0)).unwrap()).unwrap();
        let pixels: Vec<(u32, u32)> = (0..8).map(|_| (rng.random_range(0..6), rng.random_range(0..6))).collect();
        let rays: Vec<_> = pixels.iter().map(|&p| pixel_ray(&camera, &pose.to_pose().unwrap(), p).unwrap()).collect();
        let batch = SampleBatch::generate(&rays, None, &opts, true, &mut rng);
        let n = rays.len();
        let (nc, ns) = (field.num_classes(), field.num_slots());
        let mut u = || rng.random::<f64>() * 2.0 - 1.0;
        let up_rgb = (0..n).map(|_| [u(), u(), u()]).collect();
        let up_sem = (0..n * nc).map(|_| u()).collect();
        let up_inst = (0..n * ns).map(|_| u()).collect();
        Setup {
            field,
            opts,
            camera,
            pose,
            pixels,
            batch,
            up_rgb,
            up_sem,
            up_inst,
        }
    }

    /// The batch with the rays moved to `pose`, sample depths held fixed.
    pub fn batch_at(&self, pose: &PoseParam) -> SampleBatch {
        let mut b = self.batch.clone();
        let p = pose.to_pose().unwrap();
        for (r, &px) in self.pixels.iter().enumerate() {
            let ray = pixel_ray(&self.camera, &p, px).unwrap();
            b.origins[r] = ray.origin;
            b.dirs[r] = ray.direction;
        }
        b
    }

    /// `Σ upstream · outputs`, with the panoptic terms optional.
    pub fn objective(&self, field: &PanopticField, batch: &SampleBatch, panoptic: bool) -> f64 {
        let out = field.render_batch(batch, &self.opts, true);
        let mut l = 0.0;
        for (o, u) in out.rgb.iter().zip(&self.up_rgb) {
            l += o[0] * u[0] + o[1] * u[1] + o[2] * u[2];
        }
        if panoptic {
            l += out.semantic.iter().zip(&self.up_sem).map(|(a, b)| a * b).sum::<f64>();
            l += out.instance.iter().zip(&self.up_inst).map(|(a, b)| a * b).sum::<f64>();
        }
        l
    }

    pub fn analytic(&self) -> (FieldGrads, [f64; 9]) {
        let fwd = self.field.forward_chunk(self.batch.clone(), &self.opts, true);
        let up = ChunkUpstream {
            rgb: &self.up_rgb,
            semantic: &self.up_sem,
            instance: &self.up_inst,
        };
        let g = self.field.backward_chunk(&fwd, up, &self.opts, true).unwrap();
        let mut grads = FieldGrads::zeros(&self.field);
        grads.accumulate(&g);
        let mut acc = PoseGradAccum::default();
        for (r, &(c, row)) in self.pixels.iter().enumerate() {
            acc.add_ray(&g.d_origin[r], &g.d_dir[r], &self.camera.pixel_direction(c, row).normalize());
        }
        let pg = self.pose.backward(&acc.d_rotation, &acc.d_translation).unwrap();
        (grads, pg.as_array())
    }
}

/// Relative error `‖fd − analytic‖ / ‖fd‖` over the checked coordinates.
fn relative_error(fd: &[f64], an: &[f64]) -> f64 {
    let num: f64 = fd.iter().zip(an).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Coordinates to probe: the largest analytic entries plus random ones.
fn probe_indices(grad: &[f64], rng: &mut ChaCha8Rng, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grad.len()).collect();
    idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
    let mut out: Vec<usize> = idx.into_iter().take(count).collect();
    for _ in 0..count / 2 {
        out.push(rng.random_range(0..grad.len()));
    }
    out.sort_unstable();
    out.dedup();
    out
}

const EPS: f64 = 1e-6;

fn check_block(
    setup: &Setup,
    name: &str,
    analytic: &[f64],
    get: fn(&mut PanopticField) -> &mut Vec<f64>,
    panoptic: bool,
    rng: &mut ChaCha8Rng,
) -> (String, f64) {
    let mut field = setup.field.clone();
    let idx = probe_indices(analytic, rng, 24);
    let mut fd = Vec::new();
    let mut an = Vec::new();
    for i in idx {
        let orig = get(&mut field)[i];
        get(&mut field)[i] = orig + EPS;
        let lp = setup.objective(&field, &setup.batch, panoptic);
        get(&mut field)[i] = orig - EPS;
        let lm = setup.objective(&field, &setup.batch, panoptic);
        get(&mut field)[i] = orig;
        fd.push((lp - lm) / (2.0 * EPS));
        an.push(analytic[i]);
    }
    (name.to_string(), relative_error(&fd, &an))
}

/// Finite-difference check of every parameter block and of the nine pose
/// parameters. Returns `(block, relative error)`. The color branch and the
/// poses are checked against the color objective alone, since the panoptic
/// heads see color features and weights as constants; the panoptic blocks
/// against the full objective.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let s = Setup::new(seed);
    let (g, pose_grad) = s.analytic();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut out = vec![
        check_block(&s, "color_grid", &g.color_grid, |f| &mut f.color_grid.table, false, &mut rng),
        check_block(&s, "panoptic_grid", &g.panoptic_grid, |f| &mut f.panoptic_grid.table, true, &mut rng),
        check_block(&s, "density_head", &g.density, |f| &mut f.decoders.density.params, false, &mut rng),
        check_block(&s, "color_head", &g.color, |f| &mut f.decoders.color.params, false, &mut rng),
        check_block(&s, "semantic_head", &g.semantic, |f| &mut f.decoders.semantic.params, true, &mut rng),
        check_block(&s, "instance_head", &g.instance, |f| &mut f.decoders.instance.params, true, &mut rng),
    ];
    // pose gradients come from the color path only
    let mut fd = Vec::new();
    let base = s.pose.as_array();
    for i in 0..9 {
        let mut a = base;
        a[i] = base[i] + EPS;
        let lp = s.objective(&s.field, &s.batch_at(&PoseParam::from_array(&a)), false);
        a[i] = base[i] - EPS;
        let lm = s.objective(&s.field, &s.batch_at(&PoseParam::from_array(&a)), false);
        fd.push((lp - lm) / (2.0 * EPS));
    }
    out.push(("pose".to_string(), relative_error(&fd, &pose_grad)));
    out
}

//! Training configuration and its flat `key = value` text form.

use std::path::Path;

use crate::decoders::DecoderConfig;
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::losses::LossWeights;
use crate::model::FieldConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub rays_per_image: usize,
    pub samples_per_ray: usize,
    pub prune_every: usize,
    pub voxel_trace_after: usize,
    pub panoptic_start_epoch: usize,
    pub batch_images: usize,
    pub lr_global: f64,
    pub lr_grid: f64,
    pub lr_pose: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub color_grid: GridConfig,
    pub panoptic_grid: GridConfig,
    pub seed: u64,

    pub dir_frequencies: usize,
    pub logit_init_scale: f64,
    pub density_bias: f64,
    pub optimize_poses: bool,
    /// Periodically refit held-out camera poses against the frozen field.
    pub register_validation: bool,
    pub register_every: usize,
    pub register_steps: usize,
    pub register_rays: usize,
    pub id_window: bool,
    pub k_voxels: usize,
    pub per_voxel: usize,
    pub octree_depth: usize,
    /// Target `σ·δ` at the finest voxel-tracing step below which leaves are pruned.
    pub prune_sigma_delta: f64,
    pub chunk_rays: usize,
    pub panoptic_min_weight: f64,
    pub max_mask_depth: f64,
    pub postprocess: bool,
    /// Composite training rays over a random color instead of black, so
    /// only fully opaque geometry reproduces the observed pixels.
    pub random_background: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let grid = GridConfig::default();
        TrainConfig {
            epochs: 800,
            rays_per_image: 4096,
            samples_per_ray: 512,
            prune_every: 200,
            voxel_trace_after: 200,
            panoptic_start_epoch: 600,
            batch_images: 6,
            lr_global: 0.01,
            lr_grid: 1.0,
            lr_pose: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-15,
            weights: LossWeights::default(),
            color_grid: grid.clone(),
            panoptic_grid: grid,
            seed: 0,
            dir_frequencies: 4,
            logit_init_scale: 1.0,
            density_bias: 0.1,
            optimize_poses: true,
            register_validation: true,
            register_every: 10,
            register_steps: 20,
            register_rays: 64,
            id_window: true,
            k_voxels: 8,
            per_voxel: 2,
            octree_depth: 7,
            prune_sigma_delta: 0.01,
            chunk_rays: 256,
            panoptic_min_weight: 1e-4,
            max_mask_depth: 1.5,
            postprocess: true,
            random_background: true,
        }
    }
}

impl TrainConfig {
    /// Scaled-down schedule and grids for the synthetic desk scenes on a CPU.
    pub fn desk() -> Self {
        let color = GridConfig {
            num_levels: 8,
            capacity: 1 << 15,
            features_per_level: 2,
            base_scale: 8.0,
            finest_scale: 256.0,
            init_range: 1e-4,
        };
        let panoptic = GridConfig {
            num_levels: 8,
            capacity: 1 << 12,
            ..color.clone()
        };
        TrainConfig {
            epochs: 800,
            rays_per_image: 512,
            samples_per_ray: 48,
            batch_images: 6,
            lr_global: 0.01,
            lr_grid: 0.1,
            octree_depth: 6,
            k_voxels: 12,
            panoptic_start_epoch: 400,
            random_background: false,
            color_grid: color,
            panoptic_grid: panoptic,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown config preset '{other}' (paper, desk)"))),
        }
    }

    pub fn field_config(&self, num_classes: usize, num_slots: usize) -> FieldConfig {
        FieldConfig {
            color_grid: self.color_grid.clone(),
            panoptic_grid: self.panoptic_grid.clone(),
            decoder: DecoderConfig {
                num_classes,
                num_instance_slots: num_slots,
                dir_frequencies: self.dir_frequencies,
                logit_init_scale: self.logit_init_scale,
            },
            density_bias: self.density_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.panoptic_start_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "panoptic_start_epoch {} must be below epochs {}",
                self.panoptic_start_epoch, self.epochs
            )));
        }
        for (name, v) in [("lr_global", self.lr_global), ("lr_grid", self.lr_grid), ("lr_pose", self.lr_pose)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.rays_per_image == 0 || self.samples_per_ray == 0 || self.batch_images == 0 || self.chunk_rays == 0 {
            return Err(Error::Config("ray, sample, batch, and chunk counts must be positive".into()));
        }
        if self.prune_every == 0 || self.register_every == 0 {
            return Err(Error::Config("event periods must be positive".into()));
        }
        self.color_grid.validate()?;
        self.panoptic_grid.validate()?;
        if self.panoptic_grid.num_levels * self.panoptic_grid.features_per_level > self.color_grid.num_levels * self.color_grid.features_per_level {
            return Err(Error::Config("panoptic grid is wider than the color grid".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        fn grid(g: &mut GridConfig, field: &str, key: &str, v: &str) -> Result<()> {
            match field {
                "levels" => g.num_levels = p(key, v)?,
                "log2_capacity" => {
                    let e: u32 = p(key, v)?;
                    if e >= 32 {
                        return Err(Error::Config(format!("{key} = {e} is too large")));
                    }
                    g.capacity = 1usize << e;
                }
                "features" => g.features_per_level = p(key, v)?,
                "base_scale" => g.base_scale = p(key, v)?,
                "finest_scale" => g.finest_scale = p(key, v)?,
                "init_range" => g.init_range = p(key, v)?,
                _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
            }
            Ok(())
        }
        let v = value;
        match key {
            "epochs" => self.epochs = p(key, v)?,
            "rays_per_image" => self.rays_per_image = p(key, v)?,
            "samples_per_ray" => self.samples_per_ray = p(key, v)?,
            "prune_every" => self.prune_every = p(key, v)?,
            "voxel_trace_after" => self.voxel_trace_after = p(key, v)?,
            "panoptic_start_epoch" => self.panoptic_start_epoch = p(key, v)?,
            "batch_images" => self.batch_images = p(key, v)?,
            "lr_global" => self.lr_global = p(key, v)?,
            "lr_grid" => self.lr_grid = p(key, v)?,
            "lr_pose" => self.lr_pose = p(key, v)?,
            "beta1" => self.beta1 = p(key, v)?,
            "beta2" => self.beta2 = p(key, v)?,
            "adam_eps" => self.adam_eps = p(key, v)?,
            "lambda_color" => self.weights.color = p(key, v)?,
            "lambda_sem" => self.weights.semantic = p(key, v)?,
            "lambda_id" => self.weights.id = p(key, v)?,
            "lambda_reg" => self.weights.consistency = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            "dir_frequencies" => self.dir_frequencies = p(key, v)?,
            "logit_init_scale" => self.logit_init_scale = p(key, v)?,
            "density_bias" => self.density_bias = p(key, v)?,
            "optimize_poses" => self.optimize_poses = p(key, v)?,
            "register_validation" => self.register_validation = p(key, v)?,
            "register_every" => self.register_every = p(key, v)?,
            "register_steps" => self.register_steps = p(key, v)?,
            "register_rays" => self.register_rays = p(key, v)?,
            "id_window" => self.id_window = p(key, v)?,
            "k_voxels" => self.k_voxels = p(key, v)?,
            "per_voxel" => self.per_voxel = p(key, v)?,
            "octree_depth" => self.octree_depth = p(key, v)?,
            "prune_sigma_delta" => self.prune_sigma_delta = p(key, v)?,
            "chunk_rays" => self.chunk_rays = p(key, v)?,
            "panoptic_min_weight" => self.panoptic_min_weight = p(key, v)?,
            "max_mask_depth" => self.max_mask_depth = p(key, v)?,
            "postprocess" => self.postprocess = p(key, v)?,
            "random_background" => self.random_background = p(key, v)?,
            _ => {
                if let Some(f) = key.strip_prefix("color_grid.") {
                    grid(&mut self.color_grid, f, key, v)?
                } else if let Some(f) = key.strip_prefix("panoptic_grid.") {
                    grid(&mut self.panoptic_grid, f, key, v)?
                } else {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. A leading
    /// `preset = <name>` line selects the starting values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<TrainConfig> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                if cfg.is_some() {
                    return Err(Error::Config(format!("line {}: preset must come first", n + 1)));
                }
                cfg = Some(Self::preset(v)?);
                continue;
            }
            cfg.get_or_insert_with(Self::desk)
                .set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        let cfg = cfg.unwrap_or_else(Self::desk);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::load(path, e))
    }

    /// Every setting, one per line, in a form [`parse`](Self::parse) reads back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("epochs", self.epochs.to_string());
        kv("rays_per_image", self.rays_per_image.to_string());
        kv("samples_per_ray", self.samples_per_ray.to_string());
        kv("prune_every", self.prune_every.to_string());
        kv("voxel_trace_after", self.voxel_trace_after.to_string());
        kv("panoptic_start_epoch", self.panoptic_start_epoch.to_string());
        kv("batch_images", self.batch_images.to_string());
        kv("lr_global", self.lr_global.to_string());
        kv("lr_grid", self.lr_grid.to_string());
        kv("lr_pose", self.lr_pose.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("lambda_color", self.weights.color.to_string());
        kv("lambda_sem", self.weights.semantic.to_string());
        kv("lambda_id", self.weights.id.to_string());
        kv("lambda_reg", self.weights.consistency.to_string());
        kv("seed", self.seed.to_string());
        kv("dir_frequencies", self.dir_frequencies.to_string());
        kv("logit_init_scale", self.logit_init_scale.to_string());
        kv("density_bias", self.density_bias.to_string());
        kv("optimize_poses", self.optimize_poses.to_string());
        kv("register_validation", self.register_validation.to_string());
        kv("register_every", self.register_every.to_string());
        kv("register_steps", self.register_steps.to_string());
        kv("register_rays", self.register_rays.to_string());
        kv("id_window", self.id_window.to_string());
        kv("k_voxels", self.k_voxels.to_string());
        kv("per_voxel", self.per_voxel.to_string());
        kv("octree_depth", self.octree_depth.to_string());
        kv("prune_sigma_delta", self.prune_sigma_delta.to_string());
        kv("chunk_rays", self.chunk_rays.to_string());
        kv("panoptic_min_weight", self.panoptic_min_weight.to_string());
        kv("max_mask_depth", self.max_mask_depth.to_string());
        kv("postprocess", self.postprocess.to_string());
        kv("random_background", self.random_background.to_string());
        for (prefix, g) in [("color_grid", &self.color_grid), ("panoptic_grid", &self.panoptic_grid)] {
            kv(&format!("{prefix}.levels"), g.num_levels.to_string());
            kv(&format!("{prefix}.log2_capacity"), g.capacity.trailing_zeros().to_string());
            kv(&format!("{prefix}.features"), g.features_per_level.to_string());
            kv(&format!("{prefix}.base_scale"), g.base_scale.to_string());
            kv(&format!("{prefix}.finest_scale"), g.finest_scale.to_string());
            kv(&format!("{prefix}.init_range"), g.init_range.to_string());
        }
        s
    }
}

//! The panoptic radiance field: two permutohedral grids, four decoder heads,
//! batched differentiable rendering of color, depth, and panoptic
//! distributions, and the matching backward pass.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::composite::{composite, composite_backward, Composite};
use crate::decoders::{DecoderConfig, DecoderSet, DENSITY_FEATURES};
use crate::error::{Error, Result};
use crate::grid::{GridConfig, PermutoGrid, SparseGrad};
use crate::octree::OccupancyOctree;
use crate::sampling::{sample_uniform, sample_voxel};
use crate::types::{Aabb, Ray, Vec3};
use crate::util::softmax;

#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    pub color_grid: GridConfig,
    pub panoptic_grid: GridConfig,
    pub decoder: DecoderConfig,
    /// Initial bias of the density output, keeps the ReLU alive at the start.
    pub density_bias: f64,
}

/// RNG stream ids, one per component so changing one component's size never
/// changes another's initialization.
const STREAM_COLOR_GRID: u64 = 1;
const STREAM_PANOPTIC_GRID: u64 = 2;
const STREAM_DECODERS: u64 = 3;

#[derive(Clone, Debug)]
pub struct PanopticField {
    pub color_grid: PermutoGrid,
    /// Delta grid `Δg_p`; panoptic features are `g_c + Δg_p`.
    pub panoptic_grid: PermutoGrid,
    pub decoders: DecoderSet,
}

impl PanopticField {
    pub fn new(cfg: &FieldConfig, seed: u64) -> Result<Self> {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let color_grid = PermutoGrid::new(cfg.color_grid.clone(), &mut stream(STREAM_COLOR_GRID))?;
        let panoptic_grid = PermutoGrid::new(cfg.panoptic_grid.clone(), &mut stream(STREAM_PANOPTIC_GRID))?;
        if panoptic_grid.output_dim() > color_grid.output_dim() {
            return Err(Error::Config(format!(
                "panoptic grid width {} exceeds color grid width {}",
                panoptic_grid.output_dim(),
                color_grid.output_dim()
            )));
        }
        let mut decoders = DecoderSet::new(color_grid.output_dim(), &cfg.decoder, &mut stream(STREAM_DECODERS));
        decoders.density.bias_mut(1)[DENSITY_FEATURES - 1] = cfg.density_bias;
        Ok(PanopticField {
            color_grid,
            panoptic_grid,
            decoders,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.decoders.semantic.out_dim()
    }

    pub fn num_slots(&self) -> usize {
        self.decoders.instance.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.color_grid.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.color_grid.param_count() + self.panoptic_grid.param_count() + self.decoders.param_count()
    }

    /// Checksum over every learnable value.
    pub fn checksum(&self) -> u64 {
        let parts = [
            self.color_grid.checksum(),
            self.panoptic_grid.checksum(),
            crate::util::checksum_f64(&self.decoders.density.params),
            crate::util::checksum_f64(&self.decoders.color.params),
            crate::util::checksum_f64(&self.decoders.semantic.params),
            crate::util::checksum_f64(&self.decoders.instance.params),
        ];
        parts.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &p| (h ^ p).wrapping_mul(0x100_0000_01b3))
    }

    /// Checksum of the panoptic branch only (delta grid and semantic/instance heads).
    pub fn panoptic_checksum(&self) -> u64 {
        let parts = [
            self.panoptic_grid.checksum(),
            crate::util::checksum_f64(&self.decoders.semantic.params),
            crate::util::checksum_f64(&self.decoders.instance.params),
        ];
        parts.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &p| (h ^ p).wrapping_mul(0x100_0000_01b3))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.color_grid.write_to(w)?;
        self.panoptic_grid.write_to(w)?;
        self.decoders.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        Ok(PanopticField {
            color_grid: PermutoGrid::read_from(r)?,
            panoptic_grid: PermutoGrid::read_from(r)?,
            decoders: DecoderSet::read_from(r)?,
        })
    }

    /// Densities at world points.
    pub fn density_at(&self, points: &[Vec3]) -> Vec<f64> {
        const CHUNK: usize = 4096;
        let chunks: Vec<Vec<f64>> = points
            .par_chunks(CHUNK)
            .map(|pts| {
                let fd = self.feature_dim();
                let mut feats = vec![0.0; pts.len() * fd];
                for (p, row) in pts.iter().zip(feats.chunks_exact_mut(fd)) {
                    self.color_grid.encode(p, row);
                }
                let c = self.decoders.density.forward(feats, pts.len());
                c.output().chunks_exact(DENSITY_FEATURES).map(|r| r[DENSITY_FEATURES - 1].max(0.0)).collect()
            })
            .collect();
        chunks.concat()
    }
}

/// Sampling and compositing settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    /// Region where the field lives; rays are clipped to it.
    pub scene: Aabb,
    pub samples_per_ray: usize,
    pub k_voxels: usize,
    pub per_voxel: usize,
    pub background: [f64; 3],
    /// Depth reported for rays that miss the scene box.
    pub far: f64,
    pub chunk_rays: usize,
    /// Samples whose compositing weight is at or below this are skipped by
    /// the panoptic heads.
    pub panoptic_min_weight: f64,
}

impl RenderOptions {
    pub fn new(scene: Aabb) -> Self {
        RenderOptions {
            scene,
            samples_per_ray: 64,
            k_voxels: 8,
            per_voxel: 2,
            background: [0.0; 3],
            far: 10.0,
            chunk_rays: 256,
            panoptic_min_weight: 1e-4,
        }
    }
}

/// Samples for a set of rays, flattened.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub origins: Vec<Vec3>,
    pub dirs: Vec<Vec3>,
    /// Depth used when the ray is not fully absorbed.
    pub far: Vec<f64>,
    /// Ray `r` owns samples `offsets[r]..offsets[r + 1]`.
    pub offsets: Vec<usize>,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// Per-ray background colors; empty means `RenderOptions::background`.
    pub backgrounds: Vec<[f64; 3]>,
}

impl SampleBatch {
    pub fn background<'a>(&'a self, r: usize, opts: &'a RenderOptions) -> &'a [f64; 3] {
        self.backgrounds.get(r).unwrap_or(&opts.background)
    }

    pub fn num_rays(&self) -> usize {
        self.origins.len()
    }

    pub fn num_samples(&self) -> usize {
        self.t.len()
    }

    pub fn range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }

    pub fn position(&self, r: usize, j: usize) -> Vec3 {
        self.origins[r] + self.dirs[r] * self.t[j]
    }

    /// Rays `range` as a self-contained batch.
    pub fn slice(&self, rays: std::ops::Range<usize>) -> SampleBatch {
        let s0 = self.offsets[rays.start];
        let s1 = self.offsets[rays.end];
        SampleBatch {
            origins: self.origins[rays.clone()].to_vec(),
            dirs: self.dirs[rays.clone()].to_vec(),
            far: self.far[rays.clone()].to_vec(),
            offsets: self.offsets[rays.start..=rays.end].iter().map(|o| o - s0).collect(),
            t: self.t[s0..s1].to_vec(),
            delta: self.delta[s0..s1].to_vec(),
            backgrounds: if self.backgrounds.is_empty() { Vec::new() } else { self.backgrounds[rays].to_vec() },
        }
    }

    /// Samples `rays` uniformly (or by voxel tracing when `tree` is given)
    /// inside `opts.scene`.
    pub fn generate<R: Rng + ?Sized>(rays: &[Ray], tree: Option<&OccupancyOctree>, opts: &RenderOptions, jitter: bool, rng: &mut R) -> Self {
        let mut b = SampleBatch {
            offsets: vec![0],
            ..Default::default()
        };
        for ray in rays {
            b.origins.push(ray.origin);
            b.dirs.push(ray.direction);
            match ray.clipped(&opts.scene) {
                Some(clip) => {
                    b.far.push(clip.t_far);
                    let s = match tree {
                        Some(tree) => sample_voxel(&clip, tree, opts.k_voxels, opts.per_voxel, jitter, rng),
                        None => sample_uniform(&clip, opts.samples_per_ray, jitter, rng),
                    };
                    b.t.extend_from_slice(&s.t);
                    b.delta.extend_from_slice(&s.delta);
                }
                None => b.far.push(opts.far.min(ray.t_far)),
            }
            b.offsets.push(b.t.len());
        }
        b
    }
}

/// Per-ray rendered quantities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayOutputs {
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    /// `rays × classes`; empty when the panoptic branch was not evaluated.
    pub semantic: Vec<f64>,
    /// `rays × slots`; empty when the panoptic branch was not evaluated.
    pub instance: Vec<f64>,
}

impl RayOutputs {
    pub fn append(&mut self, mut o: RayOutputs) {
        self.rgb.append(&mut o.rgb);
        self.depth.append(&mut o.depth);
        self.opacity.append(&mut o.opacity);
        self.semantic.append(&mut o.semantic);
        self.instance.append(&mut o.instance);
    }
}

struct PanopticCache {
    /// Sample index of every evaluated sample.
    kept: Vec<usize>,
    /// Owning ray of every evaluated sample.
    kept_ray: Vec<usize>,
    semantic: crate::nn::MlpCache,
    instance: crate::nn::MlpCache,
    sem_prob: Vec<f64>,
    inst_prob: Vec<f64>,
}

/// Forward state of one chunk, kept for the backward pass.
pub struct ChunkForward {
    batch: SampleBatch,
    density: crate::nn::MlpCache,
    color: crate::nn::MlpCache,
    sigma: Vec<f64>,
    composites: Vec<Composite>,
    panoptic: Option<PanopticCache>,
    pub outputs: RayOutputs,
}

/// Gradients of one chunk.
#[derive(Clone, Debug, Default)]
pub struct ChunkGrads {
    pub color_grid: SparseGrad,
    pub panoptic_grid: SparseGrad,
    pub density: Vec<f64>,
    pub color: Vec<f64>,
    pub semantic: Vec<f64>,
    pub instance: Vec<f64>,
    /// Per ray, present when pose gradients were requested.
    pub d_origin: Vec<Vec3>,
    pub d_dir: Vec<Vec3>,
}

/// Dense gradient buffers for every field parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads {
    pub color_grid: Vec<f64>,
    pub panoptic_grid: Vec<f64>,
    pub density: Vec<f64>,
    pub color: Vec<f64>,
    pub semantic: Vec<f64>,
    pub instance: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros(field: &PanopticField) -> Self {
        FieldGrads {
            color_grid: vec![0.0; field.color_grid.param_count()],
            panoptic_grid: vec![0.0; field.panoptic_grid.param_count()],
            density: vec![0.0; field.decoders.density.param_count()],
            color: vec![0.0; field.decoders.color.param_count()],
            semantic: vec![0.0; field.decoders.semantic.param_count()],
            instance: vec![0.0; field.decoders.instance.param_count()],
        }
    }

    pub fn clear(&mut self) {
        for b in [
            &mut self.color_grid,
            &mut self.panoptic_grid,
            &mut self.density,
            &mut self.color,
            &mut self.semantic,
            &mut self.instance,
        ] {
            b.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, g: &ChunkGrads) {
        g.color_grid.reduce_into(&mut self.color_grid);
        g.panoptic_grid.reduce_into(&mut self.panoptic_grid);
        for (dst, src) in [
            (&mut self.density, &g.density),
            (&mut self.color, &g.color),
            (&mut self.semantic, &g.semantic),
            (&mut self.instance, &g.instance),
        ] {
            if !src.is_empty() {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

/// Upstream gradients for one chunk's rendered outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct ChunkUpstream<'a> {
    pub rgb: &'a [[f64; 3]],
    /// `rays × classes`, may be empty.
    pub semantic: &'a [f64],
    /// `rays × slots`, may be empty.
    pub instance: &'a [f64],
}

impl PanopticField {
    /// Renders a chunk of sampled rays, keeping everything needed for
    /// [`backward_chunk`](Self::backward_chunk).
    pub fn forward_chunk(&self, batch: SampleBatch, opts: &RenderOptions, with_panoptic: bool) -> ChunkForward {
        let n = batch.num_samples();
        let nr = batch.num_rays();
        let fd = self.feature_dim();
        let pe = self.decoders.dir_encoding;
        let pe_dim = pe.output_dim();

        let mut feats = vec![0.0; n * fd];
        for r in 0..nr {
            for j in batch.range(r) {
                self.color_grid.encode(&batch.position(r, j), &mut feats[j * fd..(j + 1) * fd]);
            }
        }
        let density = self.decoders.density.forward(feats, n);
        let dens_out = density.output();
        let sigma: Vec<f64> = dens_out.chunks_exact(DENSITY_FEATURES).map(|row| row[DENSITY_FEATURES - 1].max(0.0)).collect();

        let cin = DENSITY_FEATURES + pe_dim;
        let mut color_in = vec![0.0; n * cin];
        for r in 0..nr {
            let dir_pe = pe.encode(&batch.dirs[r]);
            for j in batch.range(r) {
                let row = &mut color_in[j * cin..(j + 1) * cin];
                row[..DENSITY_FEATURES].copy_from_slice(&dens_out[j * DENSITY_FEATURES..(j + 1) * DENSITY_FEATURES]);
                row[DENSITY_FEATURES..].copy_from_slice(&dir_pe);
            }
        }
        let color = self.decoders.color.forward(color_in, n);
        let rgb_s = color.output();

        let mut outputs = RayOutputs::default();
        let mut composites = Vec::with_capacity(nr);
        for r in 0..nr {
            let rg = batch.range(r);
            let (v, comp) = composite(&sigma[rg.clone()], &rgb_s[rg.start * 3..rg.end * 3], &batch.delta[rg.clone()], 3, batch.background(r, opts));
            let depth: f64 = rg.clone().map(|j| comp.weights[j - rg.start] * batch.t[j]).sum::<f64>() + comp.final_transmittance() * batch.far[r];
            outputs.rgb.push([v[0], v[1], v[2]]);
            outputs.depth.push(depth);
            outputs.opacity.push(comp.opacity);
            composites.push(comp);
        }

        let panoptic = with_panoptic.then(|| self.panoptic_forward(&batch, &density, &composites, opts, &mut outputs));
        ChunkForward {
            batch,
            density,
            color,
            sigma,
            composites,
            panoptic,
            outputs,
        }
    }

    fn panoptic_forward(
        &self,
        batch: &SampleBatch,
        density: &crate::nn::MlpCache,
        composites: &[Composite],
        opts: &RenderOptions,
        outputs: &mut RayOutputs,
    ) -> PanopticCache {
        let fd = self.feature_dim();
        let (nc, ns) = (self.num_classes(), self.num_slots());
        let nr = batch.num_rays();
        let mut kept = Vec::new();
        let mut kept_ray = Vec::new();
        for r in 0..nr {
            let rg = batch.range(r);
            for j in rg.clone() {
                if composites[r].weights[j - rg.start] > opts.panoptic_min_weight {
                    kept.push(j);
                    kept_ray.push(r);
                }
            }
        }
        let k = kept.len();
        let dd = self.panoptic_grid.output_dim();
        let g_c = density.input();
        let mut g_p = vec![0.0; k * fd];
        let mut delta = vec![0.0; dd];
        for (i, (&j, &r)) in kept.iter().zip(&kept_ray).enumerate() {
            let row = &mut g_p[i * fd..(i + 1) * fd];
            // the color features enter as constants
            row.copy_from_slice(&g_c[j * fd..(j + 1) * fd]);
            self.panoptic_grid.encode(&batch.position(r, j), &mut delta);
            for (o, d) in row.iter_mut().zip(&delta) {
                *o += d;
            }
        }
        let semantic = self.decoders.semantic.forward(g_p.clone(), k);
        let instance = self.decoders.instance.forward(g_p, k);
        let mut sem_prob = vec![0.0; k * nc];
        let mut inst_prob = vec![0.0; k * ns];
        for i in 0..k {
            softmax(&semantic.output()[i * nc..(i + 1) * nc], &mut sem_prob[i * nc..(i + 1) * nc]);
            softmax(&instance.output()[i * ns..(i + 1) * ns], &mut inst_prob[i * ns..(i + 1) * ns]);
        }
        outputs.semantic = vec![0.0; nr * nc];
        outputs.instance = vec![0.0; nr * ns];
        for (i, (&j, &r)) in kept.iter().zip(&kept_ray).enumerate() {
            let w = composites[r].weights[j - batch.offsets[r]];
            for c in 0..nc {
                outputs.semantic[r * nc + c] += w * sem_prob[i * nc + c];
            }
            for m in 0..ns {
                outputs.instance[r * ns + m] += w * inst_prob[i * ns + m];
            }
        }
        PanopticCache {
            kept,
            kept_ray,
            semantic,
            instance,
            sem_prob,
            inst_prob,
        }
    }

    /// Backward pass of one chunk. Color gradients reach the color grid,
    /// density and color heads, and (with `want_pose`) the rays; panoptic
    /// gradients reach only the delta grid and the semantic/instance heads.
    pub fn backward_chunk(&self, fwd: &ChunkForward, up: ChunkUpstream, opts: &RenderOptions, want_pose: bool) -> Result<ChunkGrads> {
        let b = &fwd.batch;
        let n = b.num_samples();
        let nr = b.num_rays();
        let fd = self.feature_dim();
        let pe = self.decoders.dir_encoding;
        let cin = DENSITY_FEATURES + pe.output_dim();
        let mut g = ChunkGrads {
            density: vec![0.0; self.decoders.density.param_count()],
            color: vec![0.0; self.decoders.color.param_count()],
            ..Default::default()
        };
        if want_pose {
            g.d_origin = vec![Vec3::zeros(); nr];
            g.d_dir = vec![Vec3::zeros(); nr];
        }

        if !up.rgb.is_empty() && up.rgb.iter().any(|c| c.iter().any(|&v| v != 0.0)) {
            let rgb_s = fwd.color.output();
            let mut d_rgb_s = vec![0.0; n * 3];
            let mut d_dens = vec![0.0; n * DENSITY_FEATURES];
            let dens_out = fwd.density.output();
            for r in 0..nr {
                let rg = b.range(r);
                if rg.is_empty() {
                    continue;
                }
                let (ds, dv) = composite_backward(
                    &fwd.sigma[rg.clone()],
                    &rgb_s[rg.start * 3..rg.end * 3],
                    &b.delta[rg.clone()],
                    3,
                    b.background(r, opts),
                    &fwd.composites[r],
                    &up.rgb[r],
                );
                d_rgb_s[rg.start * 3..rg.end * 3].copy_from_slice(&dv);
                for (k, j) in rg.enumerate() {
                    if dens_out[j * DENSITY_FEATURES + DENSITY_FEATURES - 1] > 0.0 {
                        d_dens[j * DENSITY_FEATURES + DENSITY_FEATURES - 1] = ds[k];
                    }
                }
            }
            let d_cin = self.decoders.color.backward(&fwd.color, &d_rgb_s, &mut g.color, true)?.unwrap_or_default();
            for j in 0..n {
                for k in 0..DENSITY_FEATURES {
                    d_dens[j * DENSITY_FEATURES + k] += d_cin[j * cin + k];
                }
            }
            let d_feat = self.decoders.density.backward(&fwd.density, &d_dens, &mut g.density, true)?.unwrap_or_default();
            for r in 0..nr {
                let mut d_o = Vec3::zeros();
                let mut d_d = Vec3::zeros();
                for j in b.range(r) {
                    let dp = self.color_grid.backward_into(&b.position(r, j), &d_feat[j * fd..(j + 1) * fd], &mut g.color_grid, want_pose);
                    if want_pose {
                        d_o += dp;
                        d_d += dp * b.t[j];
                        d_d += pe.backward(&b.dirs[r], &d_cin[j * cin + DENSITY_FEATURES..(j + 1) * cin]);
                    }
                }
                if want_pose {
                    g.d_origin[r] = d_o;
                    g.d_dir[r] = d_d;
                }
            }
        }

        let has_pan = !up.semantic.is_empty() || !up.instance.is_empty();
        if let (true, Some(pc)) = (has_pan, &fwd.panoptic) {
            let (nc, ns) = (self.num_classes(), self.num_slots());
            let k = pc.kept.len();
            g.semantic = vec![0.0; self.decoders.semantic.param_count()];
            g.instance = vec![0.0; self.decoders.instance.param_count()];
            let mut d_gp = vec![0.0; k * fd];
            for (head, probs, upstream, width, cache, grad) in [
                (&self.decoders.semantic, &pc.sem_prob, up.semantic, nc, &pc.semantic, &mut g.semantic),
                (&self.decoders.instance, &pc.inst_prob, up.instance, ns, &pc.instance, &mut g.instance),
            ] {
                if upstream.is_empty() {
                    continue;
                }
                let mut d_logits = vec![0.0; k * width];
                for (i, (&j, &r)) in pc.kept.iter().zip(&pc.kept_ray).enumerate() {
                    let w = fwd.composites[r].weights[j - b.offsets[r]];
                    let p = &probs[i * width..(i + 1) * width];
                    let dp: Vec<f64> = (0..width).map(|c| w * upstream[r * width + c]).collect();
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for c in 0..width {
                        d_logits[i * width + c] = p[c] * (dp[c] - dot);
                    }
                }
                let dx = head.backward(cache, &d_logits, grad, true)?.unwrap_or_default();
                for (a, b) in d_gp.iter_mut().zip(&dx) {
                    *a += b;
                }
            }
            let dd = self.panoptic_grid.output_dim();
            for (i, (&j, &r)) in pc.kept.iter().zip(&pc.kept_ray).enumerate() {
                let row = crate::grid::delta_combine_backward(&d_gp[i * fd..(i + 1) * fd], dd);
                self.panoptic_grid.backward_into(&b.position(r, j), row, &mut g.panoptic_grid, false);
            }
        }
        Ok(g)
    }

    /// Forward-only rendering of many rays, chunked and parallel.
    pub fn render_batch(&self, batch: &SampleBatch, opts: &RenderOptions, with_panoptic: bool) -> RayOutputs {
        let nr = batch.num_rays();
        let step = opts.chunk_rays.max(1);
        let starts: Vec<usize> = (0..nr).step_by(step).collect();
        let parts: Vec<RayOutputs> = starts
            .par_iter()
            .map(|&s| self.forward_chunk(batch.slice(s..(s + step).min(nr)), opts, with_panoptic).outputs)
            .collect();
        let mut out = RayOutputs::default();
        for p in parts {
            out.append(p);
        }
        out
    }
}

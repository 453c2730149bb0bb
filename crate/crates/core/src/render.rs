//! Whole-frame rendering, panoptic label fusion, and label clean-up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{PanopticField, RenderOptions, SampleBatch};
use crate::octree::OccupancyOctree;
use crate::types::{pixel_ray, Camera, Image, LabelMap, PoseSE3, Ray, RgbImage, ScalarMap, SemanticSchema};
use crate::util::argmax;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRender {
    pub rgb: RgbImage,
    pub depth: ScalarMap,
    pub opacity: ScalarMap,
    pub semantic: LabelMap,
    pub instance: LabelMap,
    /// Per-pixel composited class distribution, `pixels × classes`.
    pub semantic_dist: Vec<f64>,
    /// Per-pixel composited slot distribution, `pixels × slots`.
    pub instance_dist: Vec<f64>,
}

/// Rays through every pixel center, row-major.
pub fn frame_rays(camera: &Camera, pose: &PoseSE3, far: f64) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(camera.num_pixels());
    for row in 0..camera.height {
        for col in 0..camera.width {
            let mut r = pixel_ray(camera, pose, (col, row))?;
            r.t_far = far;
            rays.push(r);
        }
    }
    Ok(rays)
}

/// Renders all pixels without jitter.
pub fn render_frame(
    field: &PanopticField,
    camera: &Camera,
    pose: &PoseSE3,
    tree: Option<&OccupancyOctree>,
    opts: &RenderOptions,
    schema: &SemanticSchema,
) -> Result<FrameRender> {
    let rays = frame_rays(camera, pose, opts.far)?;
    // no jitter, so the generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = SampleBatch::generate(&rays, tree, opts, false, &mut rng);
    let out = field.render_batch(&batch, opts, true);
    let (w, h) = (camera.width, camera.height);
    let (semantic, instance) = fuse_panoptic(&out.semantic, &out.instance, schema, w, h)?;
    Ok(FrameRender {
        rgb: Image::from_vec(w, h, out.rgb)?,
        depth: Image::from_vec(w, h, out.depth)?,
        opacity: Image::from_vec(w, h, out.opacity)?,
        semantic,
        instance,
        semantic_dist: out.semantic,
        instance_dist: out.instance,
    })
}

/// Per-pixel labels from composited distributions: the most likely class,
/// and for thing classes the most likely non-stuff slot (stuff pixels get 0).
pub fn fuse_panoptic(sem: &[f64], inst: &[f64], schema: &SemanticSchema, width: u32, height: u32) -> Result<(LabelMap, LabelMap)> {
    let n = (width * height) as usize;
    let (nc, ns) = (schema.num_classes, schema.num_instance_slots);
    let mut s = Vec::with_capacity(n);
    let mut k = Vec::with_capacity(n);
    for p in 0..n {
        let c = argmax(&sem[p * nc..(p + 1) * nc]) as u16;
        s.push(c);
        if schema.is_thing(c) && ns > 1 {
            k.push(1 + argmax(&inst[p * ns + 1..(p + 1) * ns]) as u16);
        } else {
            k.push(0);
        }
    }
    Ok((Image::from_vec(width, height, s)?, Image::from_vec(width, height, k)?))
}

fn morph(mask: &[bool], w: usize, h: usize, erode: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = erode;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let v = mask[ny as usize * w + nx as usize];
                    if erode {
                        acc &= v;
                    } else {
                        acc |= v;
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Binary opening (erosion then dilation) with a 3×3 square; neighbors
/// outside the image are ignored.
pub fn open_mask(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    morph(&morph(mask, width, height, true), width, height, false)
}

/// Opens every instance mask; pixels removed from their mask become 0.
pub fn postprocess_panoptic(inst: &LabelMap) -> LabelMap {
    let (w, h) = (inst.width as usize, inst.height as usize);
    let mut ids: Vec<u16> = inst.data.iter().copied().filter(|&i| i != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut out = inst.clone();
    for id in ids {
        let mask: Vec<bool> = inst.data.iter().map(|&v| v == id).collect();
        let opened = open_mask(&mask, w, h);
        for (i, (&m, &o)) in mask.iter().zip(&opened).enumerate() {
            if m && !o {
                out.data[i] = 0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speckle_removed_square_kept() {
        let mut m = Image::filled(20, 20, 0u16);
        m.set(3, 3, 5);
        for y in 8..18 {
            for x in 8..18 {
                m.set(x, y, 2);
            }
        }
        let p = postprocess_panoptic(&m);
        assert_eq!(*p.get(3, 3), 0);
        for y in 8..18 {
            for x in 8..18 {
                assert_eq!(*p.get(x, y), 2);
            }
        }
    }
}

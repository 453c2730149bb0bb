//! Image and panoptic evaluation metrics.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{LabelMap, RgbImage, SemanticSchema, VOID_LABEL};

/// `10·log10(peak²/MSE)`; identical images give `+∞`.
pub fn psnr(img: &RgbImage, reference: &RgbImage, peak: f64) -> Result<f64> {
    if !img.same_shape(reference) {
        return Err(Error::Input(format!(
            "psnr shape mismatch: {}x{} vs {}x{}",
            img.width, img.height, reference.width, reference.height
        )));
    }
    let mut se = 0.0;
    for (a, b) in img.data.iter().zip(&reference.data) {
        for c in 0..3 {
            se += (a[c] - b[c]).powi(2);
        }
    }
    let mse = se / (3 * img.len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class intersection over union; void ground-truth pixels are ignored.
pub fn iou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<IouReport> {
    if !pred.same_shape(gt) {
        return Err(Error::Input("iou shape mismatch".into()));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g == VOID_LABEL {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p == g {
            if p < num_classes {
                inter[p] += 1;
                union[p] += 1;
            }
        } else {
            if p < num_classes {
                union[p] += 1;
            }
            if g < num_classes {
                union[g] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(IouReport { per_class, mean })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqCounts {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PqCounts {
    pub fn pq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if d == 0.0 {
            1.0
        } else {
            self.iou_sum / d
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            if self.fp + self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if d == 0.0 {
            1.0
        } else {
            self.tp as f64 / d
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Counts over all segments of all classes.
    pub total: PqCounts,
    pub per_class: Vec<PqCounts>,
}

/// Segment key: `(class, instance)`; stuff classes have one segment each.
/// Thing pixels without an instance are unassigned and belong to no segment.
fn segment_of(sem: u16, inst: u16, schema: &SemanticSchema) -> Option<(u16, u16)> {
    if sem as usize >= schema.num_classes {
        return None;
    }
    if schema.is_thing(sem) {
        (inst != 0).then_some((sem, inst))
    } else {
        Some((sem, 0))
    }
}

/// Panoptic quality with unique IoU > 0.5 matching between segments of the
/// same class. Pixels that are void in the ground truth are dropped from both
/// sides first.
pub fn panoptic_quality(
    pred_sem: &LabelMap,
    pred_inst: &LabelMap,
    gt_sem: &LabelMap,
    gt_inst: &LabelMap,
    schema: &SemanticSchema,
) -> Result<PqReport> {
    if !(pred_sem.same_shape(gt_sem) && pred_inst.same_shape(gt_inst) && pred_sem.same_shape(pred_inst)) {
        return Err(Error::Input("panoptic quality shape mismatch".into()));
    }
    let mut pred_area: HashMap<(u16, u16), usize> = HashMap::new();
    let mut gt_area: HashMap<(u16, u16), usize> = HashMap::new();
    let mut overlap: HashMap<((u16, u16), (u16, u16)), usize> = HashMap::new();
    for i in 0..gt_sem.len() {
        if gt_sem.data[i] == VOID_LABEL {
            continue;
        }
        let g = segment_of(gt_sem.data[i], gt_inst.data[i], schema);
        let p = segment_of(pred_sem.data[i], pred_inst.data[i], schema);
        if let Some(g) = g {
            *gt_area.entry(g).or_default() += 1;
        }
        if let Some(p) = p {
            *pred_area.entry(p).or_default() += 1;
        }
        if let (Some(g), Some(p)) = (g, p) {
            if g.0 == p.0 {
                *overlap.entry((g, p)).or_default() += 1;
            }
        }
    }
    let mut per_class = vec![PqCounts::default(); schema.num_classes];
    let mut matched_gt = std::collections::HashSet::new();
    let mut matched_pred = std::collections::HashSet::new();
    let mut pairs: Vec<_> = overlap.into_iter().collect();
    pairs.sort_unstable();
    for ((g, p), inter) in pairs {
        let union = gt_area[&g] + pred_area[&p] - inter;
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            matched_gt.insert(g);
            matched_pred.insert(p);
            let c = &mut per_class[g.0 as usize];
            c.tp += 1;
            c.iou_sum += iou;
        }
    }
    for g in gt_area.keys() {
        if !matched_gt.contains(g) {
            per_class[g.0 as usize].fn_ += 1;
        }
    }
    for p in pred_area.keys() {
        if !matched_pred.contains(p) {
            per_class[p.0 as usize].fp += 1;
        }
    }
    let mut total = PqCounts::default();
    for c in &per_class {
        total.iou_sum += c.iou_sum;
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
    }
    Ok(PqReport {
        pq: total.pq(),
        sq: total.sq(),
        rq: total.rq(),
        total,
        per_class,
    })
}

/// Per ground-truth object: the share of its pixels, over all frames, that
/// carry its most frequent non-zero predicted ID. Averaged over objects.
/// Pixels predicted as 0 count against consistency.
pub fn id_consistency(pred: &[LabelMap], gt: &[LabelMap]) -> Result<f64> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(p, g)| !p.same_shape(g)) {
        return Err(Error::Input("id_consistency needs matching frame lists".into()));
    }
    let mut votes: HashMap<u16, HashMap<u16, usize>> = HashMap::new();
    let mut totals: HashMap<u16, usize> = HashMap::new();
    for (p, g) in pred.iter().zip(gt) {
        for (&pi, &gi) in p.data.iter().zip(&g.data) {
            if gi == 0 || gi == VOID_LABEL {
                continue;
            }
            *totals.entry(gi).or_default() += 1;
            if pi != 0 {
                *votes.entry(gi).or_default().entry(pi).or_default() += 1;
            }
        }
    }
    if totals.is_empty() {
        return Ok(1.0);
    }
    let mut ids: Vec<u16> = totals.keys().copied().collect();
    ids.sort_unstable();
    let sum: f64 = ids
        .iter()
        .map(|id| {
            let best = votes.get(id).and_then(|v| v.values().max().copied()).unwrap_or(0);
            best as f64 / totals[id] as f64
        })
        .sum();
    Ok(sum / ids.len() as f64)
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Present on held-out frames.
    pub psnr: Option<f64>,
    pub miou: Option<f64>,
    pub pq: Option<PqReport>,
    pub id_consistency: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Mean PSNR over finite values and the number of infinite ones left out.
pub fn mean_psnr(values: &[f64]) -> (f64, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let skipped = values.len() - finite.len();
    if finite.is_empty() {
        (f64::INFINITY, skipped)
    } else {
        (finite.iter().sum::<f64>() / finite.len() as f64, skipped)
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[FrameMetrics]) -> Result<()> {
    let mut s = String::from("frame,psnr,miou,pq,sq,rq,id_consistency\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.frame,
            fmt_opt(r.psnr),
            fmt_opt(r.miou),
            fmt_opt(r.pq.as_ref().map(|p| p.pq)),
            fmt_opt(r.pq.as_ref().map(|p| p.sq)),
            fmt_opt(r.pq.as_ref().map(|p| p.rq)),
            fmt_opt(r.id_consistency),
        ));
    }
    let (mean, skipped) = mean_psnr(&rows.iter().filter_map(|r| r.psnr).collect::<Vec<_>>());
    s.push_str(&format!("# mean_psnr={} infinite_excluded={skipped}\n", fmt_f64(mean)));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Image;

    fn schema() -> SemanticSchema {
        SemanticSchema::fruit(8)
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let z = Image::filled(4, 4, [0.0; 3]);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&z, &o, 1.0).unwrap(), 0.0);
        assert!(psnr(&z, &Image::filled(3, 4, [0.0; 3]), 1.0).is_err());
    }

    #[test]
    fn iou_half_overlap() {
        // two 4x4 squares offset by two columns: 8 shared of 24
        let mut p = Image::filled(8, 4, 0u16);
        let mut g = Image::filled(8, 4, 0u16);
        for y in 0..4 {
            for x in 0..4 {
                g.set(x, y, 1);
                p.set(x + 2, y, 1);
            }
        }
        let r = iou(&p, &g, 2).unwrap();
        assert!((r.per_class[1].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&g, &g, 2).unwrap().mean, 1.0);
    }

    #[test]
    fn pq_single_segment() {
        let s = schema();
        let mut gs = Image::filled(10, 10, 0u16);
        let mut gi = Image::filled(10, 10, 0u16);
        for y in 0..10 {
            for x in 0..5 {
                gs.set(x, y, 1);
                gi.set(x, y, 3);
            }
        }
        // prediction covers 40 of the 50 pixels: IoU 0.8
        let mut ps = Image::filled(10, 10, VOID_LABEL);
        let mut pi = Image::filled(10, 10, 0u16);
        for y in 0..8 {
            for x in 0..5 {
                ps.set(x, y, 1);
                pi.set(x, y, 9);
            }
        }
        // only the thing class is labeled in gt; void elsewhere
        let mut gs_v = gs.clone();
        for v in gs_v.data.iter_mut() {
            if *v == 0 {
                *v = VOID_LABEL;
            }
        }
        let r = panoptic_quality(&ps, &pi, &gs_v, &gi, &s).unwrap();
        assert!((r.pq - 0.8).abs() < 1e-12, "{r:?}");
        assert!((r.pq - r.sq * r.rq).abs() < 1e-12);
        let none = Image::filled(10, 10, VOID_LABEL);
        let r0 = panoptic_quality(&none, &pi.clone(), &gs_v, &gi, &s).unwrap();
        assert_eq!(r0.pq, 0.0);
        assert_eq!(r0.total.fn_, 1);
        let same = panoptic_quality(&gs, &gi, &gs, &gi, &s).unwrap();
        assert_eq!(same.pq, 1.0);
    }

    #[test]
    fn consistency_of_shuffled_ids() {
        let frames = 4;
        let gt: Vec<LabelMap> = (0..frames).map(|_| Image::filled(2, 2, 7u16)).collect();
        let stable: Vec<LabelMap> = (0..frames).map(|_| Image::filled(2, 2, 3u16)).collect();
        assert_eq!(id_consistency(&stable, &gt).unwrap(), 1.0);
        let shuffled: Vec<LabelMap> = (0..frames).map(|f| Image::filled(2, 2, 1 + f as u16)).collect();
        assert!((id_consistency(&shuffled, &gt).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(id_consistency(&shuffled[..1], &gt[..1]).unwrap(), 1.0);
    }
}

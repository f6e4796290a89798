//! Segmentation, instance and depth evaluation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{DepthMap, Grid, InstanceDetection, InstanceMap, SemanticMap, IGNORE_LABEL};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    /// Row = true class, column = predicted class.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image; ignored ground-truth pixels are skipped.
    pub fn accumulate(&mut self, truth: &SemanticMap, pred: &Grid<u8>) -> Result<()> {
        if truth.shape() != pred.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", truth.shape(), pred.shape())));
        }
        for (&t, &p) in truth.data().iter().zip(pred.data()) {
            if t == IGNORE_LABEL || t as usize >= self.k {
                continue;
            }
            if p as usize >= self.k {
                return Err(Error::InvalidInput(format!("predicted class {p} out of range")));
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Collapses classes into categories.
    pub fn collapse(&self, category_map: &[usize]) -> Result<ConfusionMatrix> {
        if category_map.len() != self.k {
            return Err(Error::Shape("category map must cover every class".into()));
        }
        let m = category_map.iter().max().map_or(0, |&c| c + 1);
        let mut out = ConfusionMatrix::new(m);
        for t in 0..self.k {
            for p in 0..self.k {
                out.counts[category_map[t] * m + category_map[p]] += self.get(t, p);
            }
        }
        Ok(out)
    }

    /// IoU per class; `None` where the union is empty.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouScores {
    pub per_class: Vec<Option<f64>>,
    pub mean_class: f64,
    pub per_category: Vec<Option<f64>>,
    pub mean_category: f64,
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

pub fn iou_scores(cm: &ConfusionMatrix, category_map: &[usize]) -> Result<IouScores> {
    let per_class = cm.class_iou();
    let mean_class = mean_defined(&per_class).ok_or(Error::EmptySet("class IoU"))?;
    let per_category = cm.collapse(category_map)?.class_iou();
    let mean_category = mean_defined(&per_category).ok_or(Error::EmptySet("category IoU"))?;
    Ok(IouScores {
        per_class,
        mean_class,
        per_category,
        mean_category,
    })
}

/// Overlap thresholds 0.50, 0.55, ..., 0.95.
pub fn default_overlap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Ground-truth instances of one image; `classes[id]` is the class of
/// instance `id` (index 0 unused). Instances labelled [`IGNORE_LABEL`] are
/// not evaluated.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruthInstances<'a> {
    pub instances: &'a InstanceMap,
    pub classes: &'a [u8],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApResult {
    /// Mean over thresholds and evaluated classes.
    pub ap: f64,
    pub ap50: f64,
    /// `(class, AP, AP0.5)` for every class with ground truth.
    pub per_class: Vec<(u8, f64, f64)>,
    /// AP per threshold, averaged over classes.
    pub per_threshold: Vec<(f64, f64)>,
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Area under the precision envelope for a ranked list of hit flags.
fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Mask AP under greedy confidence-ranked matching. Detections are ranked
/// by confidence, ties broken by larger mask, then image and list order.
/// A detection matches the unmatched ground truth of its class with the
/// highest IoU if that IoU reaches the threshold.
pub fn instance_ap(
    detections: &[Vec<InstanceDetection>],
    ground_truth: &[GroundTruthInstances<'_>],
    thresholds: &[f64],
) -> Result<ApResult> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Shape("one detection list per ground-truth image required".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::EmptySet("overlap thresholds"));
    }
    // Ground-truth masks per image: (id, class, mask).
    let gts: Vec<Vec<(u8, Vec<bool>)>> = ground_truth
        .iter()
        .map(|g| {
            (1..=g.instances.max_id())
                .filter_map(|id| {
                    let cls = *g.classes.get(id as usize)?;
                    if cls == IGNORE_LABEL {
                        return None;
                    }
                    let mask = g.instances.mask(id).into_vec();
                    mask.iter().any(|&m| m).then_some((cls, mask))
                })
                .collect()
        })
        .collect();
    let mut classes: Vec<u8> = gts.iter().flatten().map(|(c, _)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::EmptySet("instance AP without ground-truth instances"));
    }
    let i50 = thresholds.iter().position(|t| (t - 0.5).abs() < 1e-9);
    let mut per_class = Vec::new();
    let mut per_threshold = vec![0.0; thresholds.len()];
    for &cls in &classes {
        let num_gt: usize = gts.iter().flatten().filter(|(c, _)| *c == cls).count();
        let mut ranked: Vec<(usize, usize, f64, usize)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for (j, d) in dets.iter().enumerate() {
                if d.class_id == cls {
                    ranked.push((img, j, d.confidence, d.mask.count()));
                }
            }
        }
        ranked.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then(b.3.cmp(&a.3))
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        // IoU of every ranked detection against the same-class gts of its image.
        let ious: Vec<Vec<(usize, f64)>> = ranked
            .iter()
            .map(|&(img, j, _, _)| {
                let m = detections[img][j].mask.data();
                gts[img]
                    .iter()
                    .enumerate()
                    .filter(|(_, (c, _))| *c == cls)
                    .map(|(g, (_, gm))| (g, mask_iou(m, gm)))
                    .collect()
            })
            .collect();
        let mut aps = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let hits: Vec<bool> = ranked
                .iter()
                .zip(&ious)
                .map(|(&(img, ..), cand)| {
                    let best = cand
                        .iter()
                        .filter(|(g, iou)| !matched[img][*g] && *iou >= t)
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                    match best {
                        Some(&(g, _)) => {
                            matched[img][g] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect();
            aps.push(average_precision(&hits, num_gt));
        }
        for (acc, ap) in per_threshold.iter_mut().zip(&aps) {
            *acc += ap / classes.len() as f64;
        }
        let ap = aps.iter().sum::<f64>() / aps.len() as f64;
        let ap50 = i50.map_or(f64::NAN, |i| aps[i]);
        per_class.push((cls, ap, ap50));
    }
    let n = per_class.len() as f64;
    Ok(ApResult {
        ap: per_class.iter().map(|c| c.1).sum::<f64>() / n,
        ap50: per_class.iter().map(|c| c.2).sum::<f64>() / n,
        per_class,
        per_threshold: thresholds.iter().copied().zip(per_threshold).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DepthErrors {
    pub mae: f64,
    pub rmse: f64,
    pub ard: f64,
    pub count: usize,
}

/// Running sums for [`DepthErrors`], mergeable across images.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    abs: f64,
    sq: f64,
    rel: f64,
    count: usize,
}

impl DepthAccumulator {
    pub fn push(&mut self, pred: f64, gt: f64) {
        let d = pred - gt;
        self.abs += d.abs();
        self.sq += d * d;
        self.rel += d.abs() / gt;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &DepthAccumulator) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.rel += other.rel;
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<DepthErrors> {
        if self.count == 0 {
            return Err(Error::EmptySet("depth evaluation set"));
        }
        let n = self.count as f64;
        Ok(DepthErrors {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            ard: self.rel / n,
            count: self.count,
        })
    }
}

fn within_cap(gt: f64, cap: Option<f64>) -> bool {
    gt > 0.0 && cap.is_none_or(|c| gt <= c)
}

/// Adds every valid pixel with ground truth within `cap` to `acc`.
pub fn accumulate_depth(acc: &mut DepthAccumulator, pred: &DepthMap, gt: &DepthMap, cap: Option<f64>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    for i in 0..gt.depth.len() {
        if let (Some(g), Some(p)) = (gt.at(i), pred.at(i)) {
            if within_cap(g as f64, cap) {
                acc.push(p as f64, g as f64);
            }
        }
    }
    Ok(())
}

pub fn depth_errors(pred: &DepthMap, gt: &DepthMap, cap: Option<f64>) -> Result<DepthErrors> {
    let mut acc = DepthAccumulator::default();
    accumulate_depth(&mut acc, pred, gt, cap)?;
    acc.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CarDepthPair {
    pub image_id: String,
    pub instance_id: u32,
    pub gt_depth: f64,
    pub pred_depth: f64,
    pub pixel_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CarDepthTable {
    pub pairs: Vec<CarDepthPair>,
    /// Instances without any valid ground-truth depth pixel.
    pub skipped: usize,
}

/// Average-pools both depth maps over each instance mask, restricted to
/// pixels with valid ground truth (and valid prediction). With
/// `classes = Some((per-id classes, car class))` only that class is kept.
pub fn per_car_depth_table(
    image_id: &str,
    pred: &DepthMap,
    instances: &InstanceMap,
    gt: &DepthMap,
    classes: Option<(&[u8], u8)>,
) -> Result<CarDepthTable> {
    if pred.shape() != gt.shape() || instances.shape() != gt.shape() {
        return Err(Error::Shape("depth maps and instance map differ in size".into()));
    }
    let n = instances.max_id() as usize;
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); n + 1];
    let mut present = vec![false; n + 1];
    for (i, &id) in instances.data().iter().enumerate() {
        if id == 0 {
            continue;
        }
        present[id as usize] = true;
        if let (Some(g), Some(p)) = (gt.at(i), pred.at(i)) {
            let s = &mut sums[id as usize];
            s.0 += g as f64;
            s.1 += p as f64;
            s.2 += 1;
        }
    }
    let mut table = CarDepthTable::default();
    for id in 1..=n {
        if !present[id] {
            continue;
        }
        if let Some((cls, car)) = classes {
            if cls.get(id) != Some(&car) {
                continue;
            }
        }
        let (g, p, c) = sums[id];
        if c == 0 {
            table.skipped += 1;
            continue;
        }
        table.pairs.push(CarDepthPair {
            image_id: image_id.to_string(),
            instance_id: id as u32,
            gt_depth: g / c as f64,
            pred_depth: p / c as f64,
            pixel_count: c,
        });
    }
    Ok(table)
}

pub fn per_car_summary(pairs: &[CarDepthPair], cap: Option<f64>) -> Result<DepthErrors> {
    let mut acc = DepthAccumulator::default();
    for p in pairs.iter().filter(|p| within_cap(p.gt_depth, cap)) {
        acc.push(p.pred_depth, p.gt_depth);
    }
    acc.finish()
}

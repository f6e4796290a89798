use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::alloc;
use crate::checkpoint::Checkpoint;
use crate::data::{DatasetConfig, CITYSCAPES_CATEGORY_NAMES};
use crate::error::{Error, Result};
use crate::metrics::{
    accumulate_depth, default_overlap_thresholds, instance_ap, iou_scores, per_car_depth_table, per_car_summary,
    ApResult, CarDepthPair, ConfusionMatrix, DepthAccumulator, DepthErrors, GroundTruthInstances, IouScores,
};
use crate::network::{forward, BranchedModel};
use crate::postprocess::{assign_instance_classes, foreground_mask, mean_shift_cluster};
use crate::types::{Grid, InstanceDetection, InstanceMap, PredictionBundle, Sample, IGNORE_LABEL};

/// Which masks pool the per-car depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthProtocol {
    /// Ground-truth car instance masks.
    GtMask,
    /// Predicted car detections; ground truth is pooled over the same mask.
    PredMask,
}

/// Pixels handed to the clustering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ForegroundSource {
    Predicted,
    /// Ground-truth instance pixels; isolates the embedding branch.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub depth_protocol: DepthProtocol,
    pub foreground: ForegroundSource,
    /// Depth caps in meters, one table row each.
    pub caps: Vec<f64>,
    pub bandwidth: f64,
    pub cluster_seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            depth_protocol: DepthProtocol::GtMask,
            foreground: ForegroundSource::Predicted,
            caps: vec![100.0, 50.0, 25.0],
            bandwidth: 0.5,
            cluster_seed: 0,
            batch_size: 4,
        }
    }
}

impl EvalOptions {
    /// Defaults with the bandwidth recorded in the checkpoint, if any.
    pub fn for_checkpoint(ckpt: &Checkpoint) -> Self {
        let mut opts = Self::default();
        if let Some(v) = recorded_bandwidth(ckpt) {
            opts.bandwidth = v;
        }
        opts
    }
}

/// The `bandwidth` entry of a checkpoint, else its `delta_v`.
pub fn recorded_bandwidth(ckpt: &Checkpoint) -> Option<f64> {
    ["bandwidth", "delta_v"]
        .iter()
        .find_map(|k| ckpt.metadata.get(*k).and_then(|v| v.parse().ok()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub depth_protocol: DepthProtocol,
    pub foreground: ForegroundSource,
    pub class_names: Vec<String>,
    pub category_names: Vec<String>,
    pub iou: IouScores,
    /// Absent when the split has no evaluable instances.
    pub ap: Option<ApResult>,
    pub detections: usize,
    /// `(cap, errors)` over valid pixels; errors absent when no pixel is
    /// within the cap.
    pub pixel_depth: Vec<(f64, Option<DepthErrors>)>,
    pub car_depth: Vec<(f64, Option<DepthErrors>)>,
    pub car_pairs: Vec<CarDepthPair>,
    pub cars_skipped: usize,
    pub forward_ms_per_image: f64,
    pub peak_heap_bytes: Option<usize>,
}

fn category_names(ds: &DatasetConfig, n: usize) -> Vec<String> {
    if ds.category_map.as_deref() == Some(&crate::data::CITYSCAPES_CATEGORIES[..]) {
        return CITYSCAPES_CATEGORY_NAMES.iter().map(|s| s.to_string()).collect();
    }
    if ds.category_map.is_none() {
        return (0..n).map(|k| ds.class_name(k)).collect();
    }
    (0..n).map(|k| format!("category{k}")).collect()
}

/// Ground-truth instance classes with non-thing instances marked ignored.
fn thing_instance_classes(s: &Sample, thing: &[u8]) -> Vec<u8> {
    s.instance_classes()
        .into_iter()
        .map(|c| if thing.contains(&c) { c } else { IGNORE_LABEL })
        .collect()
}

fn detections_for(
    p: &PredictionBundle,
    s: &Sample,
    ds: &DatasetConfig,
    opts: &EvalOptions,
    gt_classes: &[u8],
) -> Result<Vec<InstanceDetection>> {
    let fg = match opts.foreground {
        ForegroundSource::Predicted => foreground_mask(&p.semantic_logits, &ds.thing_classes),
        ForegroundSource::GroundTruth => s.instances.map(|&id| id > 0 && gt_classes.get(id as usize) != Some(&IGNORE_LABEL)),
    };
    let (h, w) = s.shape();
    let mut params = ds.clustering_params(opts.bandwidth, h, w);
    params.seed = opts.cluster_seed;
    let (_, masks) = mean_shift_cluster(&p.embeddings, &fg, &params)?;
    assign_instance_classes(&masks, &p.semantic_logits, &ds.thing_classes)
}

fn car_instance_map(dets: &[InstanceDetection], car: u8, h: usize, w: usize) -> InstanceMap {
    let mut map = InstanceMap(Grid::filled(h, w, 0u32));
    for (k, d) in dets.iter().filter(|d| d.class_id == car).enumerate() {
        for (v, &m) in map.data_mut().iter_mut().zip(d.mask.data()) {
            if m {
                *v = k as u32 + 1;
            }
        }
    }
    map
}

/// Forward pass, postprocessing and every metric over `samples`.
pub fn evaluate(model: &BranchedModel, samples: &[Sample], ds: &DatasetConfig, opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptySet("evaluation split"));
    }
    if !model.is_joint() {
        return Err(Error::Config("evaluation needs a joint model".into()));
    }
    if model.config.num_classes != ds.num_classes {
        return Err(Error::Config("model and dataset disagree on num_classes".into()));
    }
    let k = ds.num_classes;
    let mut cm = ConfusionMatrix::new(k);
    let mut pixel_acc = vec![DepthAccumulator::default(); opts.caps.len()];
    let mut all_dets = Vec::with_capacity(samples.len());
    let mut gt_classes = Vec::with_capacity(samples.len());
    let mut car_pairs = Vec::new();
    let mut cars_skipped = 0;
    let mut forward_s = 0.0;
    alloc::reset_peak();
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        let start = Instant::now();
        let preds = forward(model, &images)?;
        forward_s += start.elapsed().as_secs_f64();
        for (s, p) in chunk.iter().zip(&preds) {
            cm.accumulate(&s.semantic, &p.semantic_logits.argmax_map())?;
            for (acc, &cap) in pixel_acc.iter_mut().zip(&opts.caps) {
                accumulate_depth(acc, &p.depth, &s.depth, Some(cap))?;
            }
            let classes = thing_instance_classes(s, &ds.thing_classes);
            let dets = detections_for(p, s, ds, opts, &classes)?;
            let table = match opts.depth_protocol {
                DepthProtocol::GtMask => {
                    per_car_depth_table(&s.id, &p.depth, &s.instances, &s.depth, Some((&classes, ds.car_class)))?
                }
                DepthProtocol::PredMask => {
                    let (h, w) = s.shape();
                    let cars = car_instance_map(&dets, ds.car_class, h, w);
                    per_car_depth_table(&s.id, &p.depth, &cars, &s.depth, None)?
                }
            };
            car_pairs.extend(table.pairs);
            cars_skipped += table.skipped;
            all_dets.push(dets);
            gt_classes.push(classes);
        }
    }
    let gts: Vec<GroundTruthInstances<'_>> = samples
        .iter()
        .zip(&gt_classes)
        .map(|(s, c)| GroundTruthInstances {
            instances: &s.instances,
            classes: c,
        })
        .collect();
    let ap = match instance_ap(&all_dets, &gts, &default_overlap_thresholds()) {
        Ok(ap) => Some(ap),
        Err(Error::EmptySet(_)) => None,
        Err(e) => return Err(e),
    };
    let categories = ds.categories();
    let num_categories = categories.iter().max().map_or(0, |m| m + 1);
    let finish = |r: Result<DepthErrors>| match r {
        Ok(e) => Ok(Some(e)),
        Err(Error::EmptySet(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let pixel_depth = opts
        .caps
        .iter()
        .zip(&pixel_acc)
        .map(|(&c, a)| Ok((c, finish(a.finish())?)))
        .collect::<Result<Vec<_>>>()?;
    let car_depth = opts
        .caps
        .iter()
        .map(|&c| Ok((c, finish(per_car_summary(&car_pairs, Some(c)))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        images: samples.len(),
        depth_protocol: opts.depth_protocol,
        foreground: opts.foreground,
        class_names: (0..k).map(|c| ds.class_name(c)).collect(),
        category_names: category_names(ds, num_categories),
        iou: iou_scores(&cm, &categories)?,
        ap,
        detections: all_dets.iter().map(Vec::len).sum(),
        pixel_depth,
        car_depth,
        car_pairs,
        cars_skipped,
        forward_ms_per_image: forward_s * 1e3 / samples.len() as f64,
        peak_heap_bytes: alloc::is_tracking().then(alloc::peak_bytes),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

fn meters(v: f64) -> String {
    format!("{v:.2}m")
}

fn depth_row(out: &mut String, label: &str, e: Option<&DepthErrors>) {
    match e {
        Some(e) => {
            let _ = writeln!(
                out,
                "| {label} | {} | {} | {:.1}% | {} |",
                meters(e.mae),
                meters(e.rmse),
                100.0 * e.ard,
                e.count
            );
        }
        None => {
            let _ = writeln!(out, "| {label} | n/a | n/a | n/a | 0 |");
        }
    }
}

impl EvalReport {
    /// Flat `key = value` lines, fractions unscaled.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("images".to_string(), self.images.to_string()),
            ("depth_protocol".to_string(), format!("{:?}", self.depth_protocol)),
            ("foreground".to_string(), format!("{:?}", self.foreground)),
            ("iou_class".to_string(), format!("{:.6}", self.iou.mean_class)),
            ("iou_category".to_string(), format!("{:.6}", self.iou.mean_category)),
        ];
        for (c, v) in self.iou.per_class.iter().enumerate() {
            kv.push((format!("iou_class.{}", self.class_names[c]), opt(*v)));
        }
        kv.push(("ap".into(), opt(self.ap.as_ref().map(|a| a.ap))));
        kv.push(("ap50".into(), opt(self.ap.as_ref().map(|a| a.ap50))));
        kv.push(("detections".into(), self.detections.to_string()));
        for (cap, e) in &self.pixel_depth {
            kv.push((format!("depth_mae_{cap}m"), opt(e.map(|e| e.mae))));
            kv.push((format!("depth_rmse_{cap}m"), opt(e.map(|e| e.rmse))));
            kv.push((format!("depth_ard_{cap}m"), opt(e.map(|e| e.ard))));
        }
        for (cap, e) in &self.car_depth {
            kv.push((format!("car_depth_mae_{cap}m"), opt(e.map(|e| e.mae))));
            kv.push((format!("car_depth_rmse_{cap}m"), opt(e.map(|e| e.rmse))));
            kv.push((format!("car_depth_ard_{cap}m"), opt(e.map(|e| e.ard))));
        }
        kv.push(("car_pairs".into(), self.car_pairs.len().to_string()));
        kv.push(("cars_skipped".into(), self.cars_skipped.to_string()));
        kv.push(("forward_ms_per_image".into(), format!("{:.3}", self.forward_ms_per_image)));
        if let Some(b) = self.peak_heap_bytes {
            kv.push(("peak_heap_bytes".into(), b.to_string()));
        }
        kv
    }

    /// Segmentation, instance and depth tables in percent and meters.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "## Semantic segmentation ({} images)\n", self.images);
        let _ = writeln!(out, "| | IoU class | IoU category |\n|---|---|---|");
        let _ = writeln!(
            out,
            "| Ours | {:.1} | {:.1} |\n",
            100.0 * self.iou.mean_class,
            100.0 * self.iou.mean_category
        );
        let _ = writeln!(out, "| class | IoU |\n|---|---|");
        for (c, v) in self.iou.per_class.iter().enumerate() {
            let _ = writeln!(out, "| {} | {} |", self.class_names[c], pct(*v));
        }
        let _ = writeln!(out, "\n| category | IoU |\n|---|---|");
        for (c, v) in self.iou.per_category.iter().enumerate() {
            let name = self.category_names.get(c).cloned().unwrap_or_else(|| format!("category{c}"));
            let _ = writeln!(out, "| {name} | {} |", pct(*v));
        }

        let _ = writeln!(out, "\n## Instance segmentation\n");
        let _ = writeln!(out, "| | AP | AP0.5 | AP100m | AP50m |\n|---|---|---|---|---|");
        let ap = self.ap.as_ref();
        let _ = writeln!(
            out,
            "| Ours | {} | {} | n/a | n/a |",
            pct(ap.map(|a| a.ap)),
            pct(ap.map(|a| a.ap50))
        );
        if let Some(ap) = ap {
            let _ = writeln!(out, "\n| class | AP | AP0.5 |\n|---|---|---|");
            for (c, a, a50) in &ap.per_class {
                let _ = writeln!(
                    out,
                    "| {} | {:.1} | {:.1} |",
                    self.class_names.get(*c as usize).cloned().unwrap_or_default(),
                    100.0 * a,
                    100.0 * a50
                );
            }
        }

        let _ = writeln!(out, "\n## Depth, per car ({:?})\n", self.depth_protocol);
        let _ = writeln!(out, "| | MAE | RMSE | ARD | cars |\n|---|---|---|---|---|");
        for (cap, e) in &self.car_depth {
            depth_row(&mut out, &format!("Ours (< {cap}m)"), e.as_ref());
        }
        let _ = writeln!(out, "\n## Depth, per pixel\n");
        let _ = writeln!(out, "| | MAE | RMSE | ARD | pixels |\n|---|---|---|---|---|");
        for (cap, e) in &self.pixel_depth {
            depth_row(&mut out, &format!("Ours (< {cap}m)"), e.as_ref());
        }
        let _ = writeln!(
            out,
            "\ncars with depth: {}, without valid depth: {}; forward {:.2} ms/image",
            self.car_pairs.len(),
            self.cars_skipped,
            self.forward_ms_per_image
        );
        out
    }

    pub fn write_car_pairs(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["image_id", "instance_id", "gt_depth_m", "pred_depth_m", "pixels"])
            .map_err(csv_err)?;
        for p in &self.car_pairs {
            w.write_record([
                p.image_id.clone(),
                p.instance_id.to_string(),
                format!("{:.6}", p.gt_depth),
                format!("{:.6}", p.pred_depth),
                p.pixel_count.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

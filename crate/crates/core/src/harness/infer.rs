use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};

use crate::checkpoint::Checkpoint;
use crate::data::{gray16, gray8, load_image, resize_image, save_png, ClassMapping, DatasetConfig, INSTANCE_ENCODING};
use crate::error::{Error, Result};
use crate::harness::eval::recorded_bandwidth;
use crate::network::{check_input_size, forward, BranchedModel};
use crate::postprocess::{assign_instance_classes, foreground_mask, mean_shift_cluster, ClusteringParams};
use crate::types::{Grid, ImageTensor, InstanceDetection, InstanceMap};

const CITYSCAPES_COLORS: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

/// Postprocessing choices that are not part of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct InferSettings {
    pub thing_classes: Vec<u8>,
    pub class_mapping: ClassMapping,
    pub bandwidth: f64,
    pub min_cluster_pixels: Option<usize>,
    pub seed: u64,
}

fn parse_list(v: &str) -> Option<Vec<u8>> {
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

impl InferSettings {
    pub fn from_dataset(ds: &DatasetConfig, bandwidth: f64) -> Self {
        Self {
            thing_classes: ds.thing_classes.clone(),
            class_mapping: ds.class_mapping,
            bandwidth,
            min_cluster_pixels: ds.min_cluster_pixels,
            seed: 0,
        }
    }

    /// Settings recorded at training time. Checkpoints without them fall
    /// back to the Cityscapes layout for 19 classes and to the last class
    /// as the only thing class otherwise.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let k = ckpt.network.num_classes;
        let md = &ckpt.metadata;
        let cityscapes = k == 19;
        let thing_classes = md
            .get("thing_classes")
            .and_then(|v| parse_list(v))
            .unwrap_or_else(|| if cityscapes { (11..=18).collect() } else { vec![(k - 1) as u8] });
        let class_mapping = match md.get("class_mapping").map(String::as_str) {
            Some("identity") => ClassMapping::Identity,
            Some("cityscapes19") => ClassMapping::Cityscapes19,
            _ if cityscapes => ClassMapping::Cityscapes19,
            _ => ClassMapping::Identity,
        };
        Self {
            thing_classes,
            class_mapping,
            bandwidth: recorded_bandwidth(ckpt).unwrap_or(0.5),
            min_cluster_pixels: md.get("min_cluster_pixels").and_then(|v| v.parse().ok()),
            seed: 0,
        }
    }

    fn clustering(&self, h: usize, w: usize) -> ClusteringParams {
        let mut p = ClusteringParams::for_resolution(self.bandwidth, h, w);
        if let Some(n) = self.min_cluster_pixels {
            p.min_cluster_pixels = n;
        }
        p.seed = self.seed;
        p
    }
}

/// Discrete outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub semantic: Grid<u8>,
    pub instances: InstanceMap,
    pub detections: Vec<InstanceDetection>,
    pub depth: Grid<f32>,
}

pub fn predict_sample(model: &BranchedModel, image: &ImageTensor, settings: &InferSettings) -> Result<Prediction> {
    let p = forward(model, std::slice::from_ref(image))?.remove(0);
    let (h, w) = (image.height(), image.width());
    let fg = foreground_mask(&p.semantic_logits, &settings.thing_classes);
    let (_, masks) = mean_shift_cluster(&p.embeddings, &fg, &settings.clustering(h, w))?;
    let detections = assign_instance_classes(&masks, &p.semantic_logits, &settings.thing_classes)?;
    let mut instances = InstanceMap(Grid::filled(h, w, 0u32));
    for (k, d) in detections.iter().enumerate() {
        for (v, &m) in instances.data_mut().iter_mut().zip(d.mask.data()) {
            if m {
                *v = k as u32 + 1;
            }
        }
    }
    Ok(Prediction {
        semantic: p.semantic_logits.argmax_map(),
        instances,
        detections,
        depth: p.depth.depth,
    })
}

fn nearest<T: Clone>(g: &Grid<T>, h: usize, w: usize) -> Grid<T> {
    let (gh, gw) = g.shape();
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            g.get(r * gh / h, c * gw / w).clone()
        })
        .collect();
    Grid::from_vec(h, w, data)
}

impl Prediction {
    /// Nearest-neighbour resampling of every map to `h x w`.
    pub fn resized(&self, h: usize, w: usize) -> Prediction {
        if self.semantic.shape() == (h, w) {
            return self.clone();
        }
        Prediction {
            semantic: nearest(&self.semantic, h, w),
            instances: InstanceMap(nearest(&self.instances, h, w)),
            detections: self
                .detections
                .iter()
                .map(|d| InstanceDetection {
                    mask: nearest(&d.mask, h, w),
                    ..d.clone()
                })
                .collect(),
            depth: nearest(&self.depth, h, w),
        }
    }
}

fn color(class: u8, num_classes: usize) -> [u8; 3] {
    if num_classes == CITYSCAPES_COLORS.len() {
        return CITYSCAPES_COLORS[class as usize];
    }
    // Evenly spaced hues.
    let hue = class as f64 / num_classes.max(1) as f64 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Millimeters, saturating at the 16-bit range.
pub fn depth_to_millimeters(d: f32) -> u16 {
    (d as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutputs {
    pub semantic_png: PathBuf,
    pub instance_png: PathBuf,
    pub depth_png: PathBuf,
    /// One line per detection: mask path, label id, confidence.
    pub submission_txt: PathBuf,
    pub mask_pngs: Vec<PathBuf>,
}

/// Writes the color semantic map, the id-coded instance map
/// (`label * 1000 + index`), the 16-bit millimeter depth map and the
/// per-detection submission files for `pred`.
pub fn infer(pred: &Prediction, num_classes: usize, settings: &InferSettings, stem: &str, out: &Path) -> Result<InferOutputs> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (h, w) = pred.semantic.shape();
    let mut rgb = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (px, &c) in rgb.pixels_mut().zip(pred.semantic.data()) {
        px.0 = color(c, num_classes);
    }
    let semantic_png = out.join(format!("{stem}_semantic.png"));
    save_png(&rgb, &semantic_png)?;

    let mut ids = vec![0u16; h * w];
    for (k, d) in pred.detections.iter().enumerate() {
        let label = settings.class_mapping.to_label(d.class_id) as u32;
        let code = (label * INSTANCE_ENCODING + k as u32 + 1).min(u16::MAX as u32) as u16;
        for (v, &m) in ids.iter_mut().zip(d.mask.data()) {
            if m {
                *v = code;
            }
        }
    }
    let instance_png = out.join(format!("{stem}_instance.png"));
    save_png(&gray16(w, h, ids), &instance_png)?;

    let saturated = pred.depth.data().iter().filter(|&&d| d as f64 * 1000.0 > u16::MAX as f64).count();
    if saturated > 0 {
        log::warn!("{saturated} depth pixels beyond 65.535 m were clamped");
    }
    let mm: Vec<u16> = pred.depth.data().iter().map(|&d| depth_to_millimeters(d)).collect();
    let depth_png = out.join(format!("{stem}_depth.png"));
    save_png(&gray16(w, h, mm), &depth_png)?;

    let mut lines = String::new();
    let mut mask_pngs = Vec::new();
    for (k, d) in pred.detections.iter().enumerate() {
        let name = format!("{stem}_mask_{k:03}.png");
        let path = out.join(&name);
        let px: Vec<u8> = d.mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
        save_png(&gray8(w, h, px), &path)?;
        let label = settings.class_mapping.to_label(d.class_id);
        lines.push_str(&format!("{name} {label} {:.6}\n", d.confidence));
        mask_pngs.push(path);
    }
    let submission_txt = out.join(format!("{stem}.txt"));
    fs::write(&submission_txt, lines).map_err(|e| Error::io(&submission_txt, e))?;
    Ok(InferOutputs {
        semantic_png,
        instance_png,
        depth_png,
        submission_txt,
        mask_pngs,
    })
}

/// Loads a checkpoint and an image, optionally resizes the network input
/// to `resize = (h, w)`, and writes outputs at the image's own size.
pub fn infer_file(ckpt_path: &Path, image_path: &Path, out: &Path, resize: Option<(usize, usize)>) -> Result<InferOutputs> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.to_model()?;
    let settings = InferSettings::from_checkpoint(&ckpt);
    let image = load_image(image_path)?;
    let (h, w) = (image.height(), image.width());
    let input = match resize {
        Some((rh, rw)) => {
            check_input_size(rh, rw)?;
            resize_image(&image, rh, rw)
        }
        None => image,
    };
    let pred = predict_sample(&model, &input, &settings)?.resized(h, w);
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    infer(&pred, model.config.num_classes, &settings, &stem, out)
}
